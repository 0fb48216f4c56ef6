//! Run configuration: presets, a key-value file with flat dotted keys, and
//! `key=value` overrides, merged in that order of precedence.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::archive::sha256_hex;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root holding `manifest.json`, or a raw directory tree.
    pub root: PathBuf,
    pub protocol: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { root: PathBuf::from("data"), protocol: "synthetic".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ranks: Vec<usize>,
    pub exclude_identical_view: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { ranks: vec![1, 5, 10, 20], exclude_identical_view: true }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    CasiaB,
    Oumvlp,
    Grew,
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "casia-b" => Ok(Self::CasiaB),
            "oumvlp" => Ok(Self::Oumvlp),
            "grew" => Ok(Self::Grew),
            "desk" => Ok(Self::Desk),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let (model, train, protocol) = match p {
            Preset::CasiaB => (ModelConfig::casia_b(), TrainConfig::casia_b(), "casia-b-lt"),
            Preset::Oumvlp => (ModelConfig::large(), TrainConfig::oumvlp(), "oumvlp"),
            Preset::Grew => (ModelConfig::large(), TrainConfig::grew(), "oumvlp"),
            Preset::Desk => (ModelConfig::desk(), TrainConfig::desk(), "synthetic"),
        };
        Self {
            data: DataConfig { protocol: protocol.into(), ..DataConfig::default() },
            model,
            train,
            eval: EvalConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.ranks.is_empty() || self.eval.ranks.contains(&0) {
            return Err(Error::Config("eval.ranks must be nonempty and positive".into()));
        }
        Ok(())
    }

    /// `base` (a preset, or the desk preset) overlaid with `file` and then
    /// with `overrides` of the form `section.key=value`. Returns the config
    /// and one note per value replaced by a later layer.
    pub fn resolve(base: Option<Preset>, file: Option<&Path>, overrides: &[String]) -> Result<(Self, Vec<String>)> {
        let start = Self::preset(base.unwrap_or(Preset::Desk));
        let mut table = Table::try_from(&start).map_err(|e| Error::Config(e.to_string()))?;
        let mut notes = Vec::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let layer: Table = text
                .parse()
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            for (key, value) in flatten(&layer) {
                set_path(&mut table, &key, value, "config file", &mut notes)?;
            }
        }
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {ov:?} is not key=value")))?;
            set_path(&mut table, key.trim(), parse_value(raw.trim()), "flag", &mut notes)?;
        }
        let cfg: Self = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok((cfg, notes))
    }

    /// Every setting as one `section.key = value` line, sorted.
    pub fn to_flat(&self) -> String {
        let table = Table::try_from(self).expect("config serializes");
        let mut out = String::new();
        for (k, v) in flatten(&table) {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn from_flat(text: &str) -> Result<Self> {
        let table: Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let cfg: Self = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn hash(&self) -> String {
        sha256_hex(self.to_flat().as_bytes())
    }
}

fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

fn flatten(t: &Table) -> Vec<(String, Value)> {
    let mut out = Vec::new();
    for (k, v) in t {
        match v {
            Value::Table(inner) => {
                out.extend(flatten(inner).into_iter().map(|(ik, iv)| (format!("{k}.{ik}"), iv)));
            }
            other => out.push((k.clone(), other.clone())),
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

fn set_path(table: &mut Table, key: &str, value: Value, source: &str, notes: &mut Vec<String>) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, sections) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for s in sections {
        cur = match cur.get_mut(*s) {
            Some(Value::Table(t)) => t,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        };
    }
    match cur.get(*last) {
        None => return Err(Error::Config(format!("unknown config key {key:?}"))),
        Some(old) if *old != value => notes.push(format!("{key} = {value} ({source}; was {old})")),
        Some(_) => {}
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_round_trip() {
        for p in [Preset::CasiaB, Preset::Oumvlp, Preset::Grew, Preset::Desk] {
            let c = RunConfig::preset(p);
            assert_eq!(RunConfig::from_flat(&c.to_flat()).unwrap(), c);
        }
    }

    #[test]
    fn flag_beats_file_beats_preset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "train.seed = 3\nmodel.pe = \"sinusoidal\"\n").unwrap();
        let (c, notes) =
            RunConfig::resolve(Some(Preset::CasiaB), Some(&path), &["train.seed=5".into()]).unwrap();
        assert_eq!(c.train.seed, 5);
        assert_eq!(c.train.batch_p, 8);
        assert_eq!(c.model.pe, crate::model::PeStrategy::Sinusoidal);
        assert!(notes.iter().any(|n| n.starts_with("train.seed = 5 (flag")));
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(matches!(
            RunConfig::resolve(None, None, &["train.bogus=1".into()]),
            Err(Error::Config(_))
        ));
        assert!(matches!(RunConfig::from_flat("model.nope = 1\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_flat("extra.key = 1\n"), Err(Error::Config(_))));
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::preset(Preset::Desk);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.train.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }
}
