//! Descriptor extraction, gallery/probe rank-k tables and feature export.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{clip_tensor, Dataset, Role, SampleMeta, Sequence, Split};
use crate::error::{Error, Result};
use crate::model::GaitModel;
use crate::tensor::Tensor;

pub const DEFAULT_RANKS: [usize; 4] = [1, 5, 10, 20];

/// Descriptor of a whole sequence; no clip sampling.
pub fn extract(model: &GaitModel, seq: &Sequence) -> Result<Tensor> {
    if seq.frames.len() < 3 {
        return Err(Error::Data(format!("sequence too short: {} frames", seq.frames.len())));
    }
    let cfg = model.config();
    let frames: Vec<_> = seq.frames.iter().collect();
    Ok(model.infer(&clip_tensor(&frames, cfg.input_height, cfg.input_width))?.descriptor)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub meta: SampleMeta,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStore {
    dim: usize,
    records: Vec<FeatureRecord>,
    keys: HashSet<SampleMeta>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    n: usize,
    dim: usize,
    rows: Vec<SampleMeta>,
}

impl FeatureStore {
    pub fn new(dim: usize) -> Self {
        Self { dim, records: Vec::new(), keys: HashSet::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    pub fn push(&mut self, meta: SampleMeta, values: Vec<f32>) -> Result<()> {
        if values.len() != self.dim {
            return Err(Error::Shape(format!("feature of length {} in a store of dim {}", values.len(), self.dim)));
        }
        if !self.keys.insert(meta.clone()) {
            return Err(Error::Data(format!("duplicate feature record {meta:?}")));
        }
        self.records.push(FeatureRecord { meta, values });
        Ok(())
    }

    /// Records matching `keep`, in order.
    pub fn filter(&self, keep: impl Fn(&SampleMeta) -> bool) -> Self {
        let mut out = Self::new(self.dim);
        for r in self.records.iter().filter(|r| keep(&r.meta)) {
            out.push(r.meta.clone(), r.values.clone()).expect("subset of a valid store");
        }
        out
    }

    fn paths(prefix: &Path) -> (PathBuf, PathBuf) {
        let mut bin = prefix.as_os_str().to_owned();
        bin.push(".bin");
        let mut json = prefix.as_os_str().to_owned();
        json.push(".json");
        (bin.into(), json.into())
    }

    /// Writes `PREFIX.bin` (little-endian f32 rows) and `PREFIX.json`.
    pub fn export(&self, prefix: &Path) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Data("refusing to export an empty feature store".into()));
        }
        let (bin, json) = Self::paths(prefix);
        let mut bytes = Vec::with_capacity(self.len() * self.dim * 4);
        for r in &self.records {
            for v in &r.values {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
        let sidecar = Sidecar {
            n: self.len(),
            dim: self.dim,
            rows: self.records.iter().map(|r| r.meta.clone()).collect(),
        };
        std::fs::write(&json, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&json, e))
    }

    pub fn import(prefix: &Path) -> Result<Self> {
        let (bin, json) = Self::paths(prefix);
        let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
        let sidecar: Sidecar = serde_json::from_str(&text)?;
        let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        if bytes.len() != sidecar.n * sidecar.dim * 4 || sidecar.rows.len() != sidecar.n {
            return Err(Error::Artifact(format!(
                "{}: {} bytes for {} rows of dim {}",
                bin.display(),
                bytes.len(),
                sidecar.n,
                sidecar.dim
            )));
        }
        let mut store = Self::new(sidecar.dim);
        for (meta, row) in sidecar.rows.into_iter().zip(bytes.chunks(sidecar.dim * 4)) {
            let values = row.chunks(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            store.push(meta, values)?;
        }
        Ok(store)
    }
}

/// Extracts descriptors of the given dataset entries.
pub fn extract_store(model: &GaitModel, dataset: &Dataset, indices: &[usize]) -> Result<FeatureStore> {
    let mut store: Option<FeatureStore> = None;
    for &i in indices {
        let seq = &dataset.sequences[i];
        let d = extract(model, seq)?;
        let s = store.get_or_insert_with(|| FeatureStore::new(d.numel()));
        s.push(seq.meta.clone(), d.data().iter().map(|&v| v as f32).collect())?;
    }
    store.ok_or_else(|| Error::Data("no sequences to extract".into()))
}

/// Gallery and probe stores of the test split.
pub fn gallery_probe(model: &GaitModel, dataset: &Dataset) -> Result<(FeatureStore, FeatureStore)> {
    let gallery = extract_store(model, dataset, &dataset.indices(Split::Test, Some(Role::Gallery)))?;
    let probe = extract_store(model, dataset, &dataset.indices(Split::Test, Some(Role::Probe)))?;
    Ok((gallery, probe))
}

fn distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub probe_view: String,
    pub gallery_view: String,
    /// Probes counted in the denominator.
    pub valid: usize,
    /// Probes whose subject has no gallery record in this view.
    pub invalid: usize,
    /// Accuracy per entry of `ks`.
    pub accuracy: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionTable {
    pub condition: String,
    pub cells: Vec<Cell>,
    /// Per probe view (sorted), mean over its gallery views, per k.
    pub per_probe_view: Vec<(String, Vec<f64>)>,
    /// Gallery views averaged first, then probe views.
    pub mean: Vec<f64>,
    /// Probe views averaged first, then gallery views.
    pub mean_gallery_order: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub ks: Vec<usize>,
    pub exclude_identical_view: bool,
    pub conditions: Vec<ConditionTable>,
    /// Probes whose subject is absent from the whole gallery.
    pub invalid_probes: usize,
}

fn mean_rows<'a>(rows: impl Iterator<Item = &'a Vec<f64>>, width: usize) -> Vec<f64> {
    let mut acc = vec![0.0; width];
    let mut n = 0usize;
    for r in rows {
        acc.iter_mut().zip(r).for_each(|(a, v)| *a += v);
        n += 1;
    }
    if n > 0 {
        acc.iter_mut().for_each(|a| *a /= n as f64);
    }
    acc
}

/// Cross-view rank-k accuracy of `probe` against `gallery`.
pub fn rank_k(gallery: &FeatureStore, probe: &FeatureStore, ks: &[usize], exclude_identical_view: bool) -> Result<RankTable> {
    if gallery.is_empty() {
        return Err(Error::Data("empty gallery".into()));
    }
    if gallery.dim != probe.dim {
        return Err(Error::Shape(format!("gallery dim {} vs probe dim {}", gallery.dim, probe.dim)));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config(format!("invalid ranks {ks:?}")));
    }
    let mut by_view: BTreeMap<&str, Vec<&FeatureRecord>> = BTreeMap::new();
    for r in &gallery.records {
        by_view.entry(r.meta.view.as_str()).or_default().push(r);
    }
    let gallery_subjects: BTreeSet<&str> = gallery.records.iter().map(|r| r.meta.subject.as_str()).collect();
    let mut invalid_probes = 0;
    // (condition, probe view, gallery view) -> (valid, invalid, hits per k)
    let mut cells: BTreeMap<(&str, &str, &str), (usize, usize, Vec<usize>)> = BTreeMap::new();
    for p in &probe.records {
        if !gallery_subjects.contains(p.meta.subject.as_str()) {
            invalid_probes += 1;
            continue;
        }
        for (&view, records) in &by_view {
            if exclude_identical_view && view == p.meta.view {
                continue;
            }
            let cell = cells
                .entry((p.meta.condition.as_str(), p.meta.view.as_str(), view))
                .or_insert_with(|| (0, 0, vec![0; ks.len()]));
            if !records.iter().any(|g| g.meta.subject == p.meta.subject) {
                cell.1 += 1;
                continue;
            }
            let mut ranked: Vec<(f64, &FeatureRecord)> =
                records.iter().map(|g| (distance(&p.values, &g.values), *g)).collect();
            ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.meta.key().cmp(&b.1.meta.key())));
            let first = ranked.iter().position(|(_, g)| g.meta.subject == p.meta.subject).expect("subject present");
            cell.0 += 1;
            for (h, &k) in cell.2.iter_mut().zip(ks) {
                if first < k {
                    *h += 1;
                }
            }
        }
    }
    let mut conditions: BTreeMap<&str, Vec<Cell>> = BTreeMap::new();
    for ((cond, pv, gv), (valid, invalid, hits)) in cells {
        if valid == 0 {
            continue;
        }
        conditions.entry(cond).or_default().push(Cell {
            probe_view: pv.to_string(),
            gallery_view: gv.to_string(),
            valid,
            invalid,
            accuracy: hits.iter().map(|&h| h as f64 / valid as f64).collect(),
        });
    }
    let n = ks.len();
    let conditions = conditions
        .into_iter()
        .map(|(cond, cells)| {
            let views = |f: fn(&Cell) -> &str| cells.iter().map(f).collect::<BTreeSet<_>>();
            let per_probe_view: Vec<(String, Vec<f64>)> = views(|c| &c.probe_view)
                .into_iter()
                .map(|v| {
                    let rows = cells.iter().filter(|c| c.probe_view == v).map(|c| &c.accuracy);
                    (v.to_string(), mean_rows(rows, n))
                })
                .collect();
            let per_gallery: Vec<Vec<f64>> = views(|c| &c.gallery_view)
                .into_iter()
                .map(|v| mean_rows(cells.iter().filter(|c| c.gallery_view == v).map(|c| &c.accuracy), n))
                .collect();
            ConditionTable {
                condition: cond.to_string(),
                mean: mean_rows(per_probe_view.iter().map(|(_, r)| r), n),
                mean_gallery_order: mean_rows(per_gallery.iter(), n),
                per_probe_view,
                cells,
            }
        })
        .collect();
    Ok(RankTable {
        ks: ks.to_vec(),
        exclude_identical_view,
        conditions,
        invalid_probes,
    })
}

impl RankTable {
    /// Mean over conditions of the condition means at rank `k`.
    pub fn mean(&self, k: usize) -> Option<f64> {
        let i = self.ks.iter().position(|&x| x == k)?;
        if self.conditions.is_empty() {
            return None;
        }
        Some(self.conditions.iter().map(|c| c.mean[i]).sum::<f64>() / self.conditions.len() as f64)
    }

    /// Aligned text: one block per rank, probe views as columns, one row
    /// per condition, percentages.
    pub fn to_text(&self) -> String {
        let views: BTreeSet<&str> = self
            .conditions
            .iter()
            .flat_map(|c| c.per_probe_view.iter().map(|(v, _)| v.as_str()))
            .collect();
        let mut out = String::new();
        for (i, k) in self.ks.iter().enumerate() {
            let _ = writeln!(out, "Rank-{k} accuracy (%)");
            let _ = write!(out, "{:<10}", "probe");
            for v in &views {
                let _ = write!(out, "{v:>8}");
            }
            let _ = writeln!(out, "{:>8}", "mean");
            for c in &self.conditions {
                let _ = write!(out, "{:<10}", c.condition);
                for v in &views {
                    match c.per_probe_view.iter().find(|(pv, _)| pv == v) {
                        Some((_, acc)) => {
                            let _ = write!(out, "{:>8.1}", 100.0 * acc[i]);
                        }
                        None => {
                            let _ = write!(out, "{:>8}", "-");
                        }
                    }
                }
                let _ = writeln!(out, "{:>8.1}", 100.0 * c.mean[i]);
            }
            let _ = writeln!(out);
        }
        if self.invalid_probes > 0 {
            let _ = writeln!(out, "invalid probes excluded: {}", self.invalid_probes);
        }
        out
    }
}
