use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::frame::load_frames;
use super::{Frame, Sequence};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleMeta {
    pub subject: String,
    pub condition: String,
    pub condition_index: usize,
    pub view: String,
    pub view_index: usize,
    pub seq_index: usize,
}

impl SampleMeta {
    /// Stable ordering key, also used to break distance ties.
    pub fn key(&self) -> (&str, &str, &str, usize) {
        (&self.subject, &self.condition, &self.view, self.seq_index)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Role of a test sequence during evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Gallery,
    Probe,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Sequence directory relative to the manifest root.
    pub path: PathBuf,
    pub subject: String,
    pub condition: String,
    pub view: String,
    pub seq_index: usize,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<Role>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub protocol: String,
    /// Condition labels; a label's position is its class index.
    pub conditions: Vec<String>,
    /// View labels; a label's position is its class index.
    pub views: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn meta(&self, entry: &ManifestEntry) -> Result<SampleMeta> {
        let find = |labels: &[String], l: &str, what: &str| {
            labels
                .iter()
                .position(|x| x == l)
                .ok_or_else(|| Error::Data(format!("unknown {what} label {l:?}")))
        };
        Ok(SampleMeta {
            subject: entry.subject.clone(),
            condition: entry.condition.clone(),
            condition_index: find(&self.conditions, &entry.condition, "condition")?,
            view: entry.view.clone(),
            view_index: find(&self.views, &entry.view, "view")?,
            seq_index: entry.seq_index,
        })
    }

    pub fn subjects(&self, split: Split) -> BTreeSet<String> {
        self.entries.iter().filter(|e| e.split == split).map(|e| e.subject.clone()).collect()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Self = serde_json::from_str(&text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            let meta = self.meta(e)?;
            if !seen.insert(meta.clone()) {
                return Err(Error::Data(format!("duplicate manifest entry {meta:?}")));
            }
        }
        let overlap: Vec<_> = self.subjects(Split::Train).intersection(&self.subjects(Split::Test)).cloned().collect();
        if !overlap.is_empty() {
            return Err(Error::Data(format!("subjects in both splits: {overlap:?}")));
        }
        Ok(())
    }
}

/// Split rules of a named evaluation protocol.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    /// First half of the sorted subjects train; test gallery holds odd
    /// sequence indices, probes even ones.
    Synthetic,
    /// Subjects 001-074 train; gallery nm-01..04.
    CasiaBLt,
    /// First 5153 sorted subjects train; gallery sequence 00, probe 01.
    OuMvlp,
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(Self::Synthetic),
            "casia-b-lt" => Ok(Self::CasiaBLt),
            "oumvlp" => Ok(Self::OuMvlp),
            other => Err(Error::Config(format!("unknown protocol {other:?}"))),
        }
    }
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Self::Synthetic => "synthetic",
            Self::CasiaBLt => "casia-b-lt",
            Self::OuMvlp => "oumvlp",
        }
    }
}

/// Assigns split and role to every entry.
pub fn apply_protocol(manifest: &mut Manifest, protocol: Protocol) -> Result<()> {
    let subjects: Vec<String> = manifest
        .entries
        .iter()
        .map(|e| e.subject.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let train: BTreeSet<String> = match protocol {
        Protocol::Synthetic => {
            if subjects.len() < 2 {
                return Err(Error::Data("synthetic protocol needs at least 2 subjects".into()));
            }
            subjects[..subjects.len() / 2].iter().cloned().collect()
        }
        Protocol::CasiaBLt => subjects
            .iter()
            .filter(|s| s.parse::<u32>().is_ok_and(|n| (1..=74).contains(&n)))
            .cloned()
            .collect(),
        Protocol::OuMvlp => subjects.iter().take(5153).cloned().collect(),
    };
    for e in &mut manifest.entries {
        if train.contains(&e.subject) {
            e.split = Split::Train;
            e.role = None;
            continue;
        }
        e.split = Split::Test;
        let gallery = match protocol {
            Protocol::Synthetic => e.seq_index % 2 == 1,
            Protocol::CasiaBLt => e.condition == "nm" && (1..=4).contains(&e.seq_index),
            Protocol::OuMvlp => e.seq_index == 0,
        };
        e.role = Some(if gallery { Role::Gallery } else { Role::Probe });
    }
    manifest.protocol = protocol.name().to_string();
    manifest.validate()
}

/// Walks `ROOT/<subject>/<cond>-<idx>/<view>/` into a manifest, every entry
/// initially in the training split. Labels are sorted.
pub fn scan_dataset(root: &Path) -> Result<Manifest> {
    let dirs = |p: &Path| -> Result<Vec<(String, PathBuf)>> {
        let mut out = Vec::new();
        for entry in std::fs::read_dir(p).map_err(|e| Error::io(p, e))? {
            let path = entry.map_err(|e| Error::io(p, e))?.path();
            if path.is_dir() {
                let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
                out.push((name, path));
            }
        }
        out.sort();
        Ok(out)
    };
    let mut entries = Vec::new();
    let (mut conditions, mut views) = (BTreeSet::new(), BTreeSet::new());
    for (subject, sp) in dirs(root)? {
        for (seq, qp) in dirs(&sp)? {
            let Some((cond, idx)) = seq.rsplit_once('-') else {
                return Err(Error::Data(format!("bad sequence directory {}", qp.display())));
            };
            let seq_index = idx
                .parse()
                .map_err(|_| Error::Data(format!("bad sequence index in {}", qp.display())))?;
            for (view, _) in dirs(&qp)? {
                conditions.insert(cond.to_string());
                views.insert(view.clone());
                entries.push(ManifestEntry {
                    path: PathBuf::from(&subject).join(&seq).join(&view),
                    subject: subject.clone(),
                    condition: cond.to_string(),
                    view,
                    seq_index,
                    split: Split::Train,
                    role: None,
                });
            }
        }
    }
    let manifest = Manifest {
        protocol: "unassigned".into(),
        conditions: conditions.into_iter().collect(),
        views: views.into_iter().collect(),
        entries,
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Loads `root/manifest.json` if present, otherwise scans the directory
/// tree, then assigns splits under `protocol`.
pub fn open_dataset(root: &Path, protocol: Protocol) -> Result<Dataset> {
    let path = root.join("manifest.json");
    let mut manifest = if path.is_file() { Manifest::read(&path)? } else { scan_dataset(root)? };
    apply_protocol(&mut manifest, protocol)?;
    Dataset::load(root, manifest)
}

/// A manifest with every sequence loaded.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub sequences: Vec<Sequence>,
}

impl Dataset {
    pub fn load(root: &Path, manifest: Manifest) -> Result<Self> {
        let sequences = manifest
            .entries
            .iter()
            .map(|e| {
                Ok(Sequence {
                    frames: load_frames(&root.join(&e.path), super::FRAME_HEIGHT, super::FRAME_WIDTH)?,
                    meta: manifest.meta(e)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, sequences })
    }

    pub fn from_parts(manifest: Manifest, frames: Vec<Vec<Frame>>) -> Result<Self> {
        if frames.len() != manifest.entries.len() {
            return Err(Error::Data("frame lists do not match manifest entries".into()));
        }
        let sequences = manifest
            .entries
            .iter()
            .zip(frames)
            .map(|(e, frames)| Ok(Sequence { frames, meta: manifest.meta(e)? }))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, sequences })
    }

    /// Indices of entries in `split`, optionally restricted to one role.
    pub fn indices(&self, split: Split, role: Option<Role>) -> Vec<usize> {
        self.manifest
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.split == split && (role.is_none() || e.role == role))
            .map(|(i, _)| i)
            .collect()
    }

    /// Subject label per training index, densely numbered in sorted order.
    pub fn subject_ids(&self, indices: &[usize]) -> BTreeMap<String, usize> {
        let names: BTreeSet<&str> = indices.iter().map(|&i| self.manifest.entries[i].subject.as_str()).collect();
        names.into_iter().enumerate().map(|(k, s)| (s.to_string(), k)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(subjects: usize) -> Manifest {
        let mut entries = Vec::new();
        for s in 1..=subjects {
            for (c, n) in [("nm", 6), ("bg", 2), ("cl", 2)] {
                for i in 1..=n {
                    entries.push(ManifestEntry {
                        path: PathBuf::new(),
                        subject: format!("{s:03}"),
                        condition: c.into(),
                        view: "090".into(),
                        seq_index: i,
                        split: Split::Train,
                        role: None,
                    });
                }
            }
        }
        Manifest {
            protocol: String::new(),
            conditions: vec!["bg".into(), "cl".into(), "nm".into()],
            views: vec!["090".into()],
            entries,
        }
    }

    #[test]
    fn casia_lt_split() {
        let mut m = manifest(124);
        apply_protocol(&mut m, Protocol::CasiaBLt).unwrap();
        assert_eq!(m.subjects(Split::Train).len(), 74);
        assert_eq!(m.subjects(Split::Test).len(), 50);
        let gallery = m.entries.iter().filter(|e| e.role == Some(Role::Gallery)).count();
        assert_eq!(gallery, 50 * 4);
        assert!(m.entries.iter().filter(|e| e.split == Split::Test).all(|e| e.role.is_some()));
    }

    #[test]
    fn protocols_are_disjoint() {
        for p in [Protocol::Synthetic, Protocol::CasiaBLt, Protocol::OuMvlp] {
            for n in [2, 7, 80] {
                let mut m = manifest(n);
                if apply_protocol(&mut m, p).is_ok() {
                    assert!(m.subjects(Split::Train).is_disjoint(&m.subjects(Split::Test)));
                }
            }
        }
    }

    #[test]
    fn duplicate_entries_rejected() {
        let mut m = manifest(2);
        let dup = m.entries[0].clone();
        m.entries.push(dup);
        assert!(m.validate().is_err());
    }

    #[test]
    fn unknown_protocol_is_config_error() {
        assert!(matches!("casia".parse::<Protocol>(), Err(Error::Config(_))));
    }
}
