//! Iteration loop, learning-rate schedule, checkpointing and resume.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archive::{Archive, DType};
use crate::autograd::Tape;
use crate::data::{batch_sampler, clip_tensor, sample_clip, BatchSampler, Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{GaitModel, ModelConfig, PriorKind};
use crate::objective::{objective, LossReport};
use crate::optim::{AdamConfig, AdamW};
use crate::tensor::Tensor;

/// Bounds applied to every GeM exponent after each update.
pub const GEM_P_RANGE: (f64, f64) = (1.0, 64.0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub transformer_lr_mult: f64,
    pub weight_decay: f64,
    pub margin: f64,
    pub alpha: f64,
    /// Subjects per batch.
    pub batch_p: usize,
    /// Sequences per subject.
    pub batch_k: usize,
    pub clip_len: usize,
    pub iterations: u64,
    /// `(iteration, lr)`: iterations after `iteration` run at `lr`.
    pub lr_schedule: Vec<(u64, f64)>,
    pub seed: u64,
    /// Save a checkpoint every this many iterations; 0 saves only the final one.
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    pub fn casia_b() -> Self {
        Self {
            base_lr: 1e-4,
            transformer_lr_mult: 0.1,
            weight_decay: 5e-4,
            margin: 0.25,
            alpha: 0.2,
            batch_p: 8,
            batch_k: 8,
            clip_len: 30,
            iterations: 80_000,
            lr_schedule: vec![(70_000, 1e-5)],
            seed: 0,
            checkpoint_interval: 10_000,
        }
    }

    pub fn oumvlp() -> Self {
        Self {
            batch_p: 32,
            batch_k: 8,
            iterations: 210_000,
            lr_schedule: vec![(150_000, 1e-5), (200_000, 1e-6)],
            ..Self::casia_b()
        }
    }

    pub fn grew() -> Self {
        Self {
            batch_p: 32,
            batch_k: 4,
            iterations: 190_000,
            lr_schedule: vec![(150_000, 1e-5)],
            ..Self::casia_b()
        }
    }

    /// Small schedule sized for the synthetic set on one CPU core.
    pub fn desk() -> Self {
        Self {
            base_lr: 3e-3,
            batch_p: 4,
            batch_k: 2,
            clip_len: 15,
            iterations: 2_000,
            lr_schedule: vec![(1_500, 3e-4)],
            checkpoint_interval: 500,
            ..Self::casia_b()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if self.iterations == 0 {
            return bad("iterations must be positive".into());
        }
        if self.batch_p < 2 || self.batch_k == 0 {
            return bad(format!("batch ({}, {}) needs P >= 2 and K >= 1", self.batch_p, self.batch_k));
        }
        if self.clip_len < 3 {
            return bad(format!("clip_len {} below 3 frames", self.clip_len));
        }
        if self.lr_schedule.windows(2).any(|w| w[1].0 <= w[0].0) {
            return bad("lr_schedule iterations must be strictly increasing".into());
        }
        if self.lr_schedule.iter().any(|&(_, lr)| !(lr > 0.0 && lr.is_finite())) {
            return bad("lr_schedule rates must be positive".into());
        }
        if !(self.transformer_lr_mult > 0.0) || self.weight_decay < 0.0 || self.margin < 0.0 || self.alpha < 0.0 {
            return bad("multiplier must be positive; decay, margin and alpha nonnegative".into());
        }
        Ok(())
    }

    /// Base learning rate of 1-based iteration `it`.
    pub fn lr_at(&self, it: u64) -> f64 {
        self.lr_schedule
            .iter()
            .take_while(|&&(at, _)| at < it)
            .last()
            .map_or(self.base_lr, |&(_, lr)| lr)
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            weight_decay: self.weight_decay,
            transformer_lr_mult: self.transformer_lr_mult,
            ..AdamConfig::default()
        }
    }
}

/// Predictions and labels of one prior head over a batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorLog {
    pub kind: PriorKind,
    pub pred: Vec<usize>,
    pub label: Vec<usize>,
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iter: u64,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossReport,
    pub priors: Vec<PriorLog>,
}

pub struct Trainer<'d> {
    cfg: TrainConfig,
    model: GaitModel,
    optim: AdamW,
    iteration: u64,
    data: &'d Dataset,
    sampler: BatchSampler,
    config_hash: String,
}

impl<'d> Trainer<'d> {
    /// Fresh model initialized from `cfg.seed`, trained on the train split.
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig, data: &'d Dataset, config_hash: &str) -> Result<Self> {
        cfg.validate()?;
        let labels = [
            (PriorKind::View, data.manifest.views.len()),
            (PriorKind::Condition, data.manifest.conditions.len()),
        ];
        for (kind, n) in labels {
            if model_cfg.priors.contains(&kind) && model_cfg.prior_classes(kind) < n {
                return Err(Error::Config(format!(
                    "{} head has {} classes but the data has {n}",
                    kind.name(),
                    model_cfg.prior_classes(kind)
                )));
            }
        }
        let model = GaitModel::new(model_cfg, cfg.seed)?;
        let optim = AdamW::new(model.params(), cfg.adam())?;
        let sampler = batch_sampler(data, &data.indices(Split::Train, None), cfg.batch_p, cfg.batch_k)?;
        Ok(Self {
            cfg,
            model,
            optim,
            iteration: 0,
            data,
            sampler,
            config_hash: config_hash.to_string(),
        })
    }

    /// Continues from a checkpoint written by [`Trainer::save`].
    pub fn resume(
        path: &Path,
        model_cfg: ModelConfig,
        cfg: TrainConfig,
        data: &'d Dataset,
        config_hash: &str,
    ) -> Result<Self> {
        let mut t = Self::new(model_cfg, cfg, data, config_hash)?;
        let a = Archive::read(path)?;
        let manifest = CheckpointManifest::from_archive(&a)?;
        if manifest.config_hash != config_hash {
            return Err(Error::Artifact(format!(
                "checkpoint config hash {} does not match {config_hash}",
                manifest.config_hash
            )));
        }
        t.model.params_mut().load_values(|n| a.tensors.get(n).cloned())?;
        let names: Vec<String> = t.model.params().iter().map(|p| p.name.clone()).collect();
        for (i, n) in names.iter().enumerate() {
            t.optim.m[i] = a.get(&format!("optim.m.{n}"))?.clone();
            t.optim.v[i] = a.get(&format!("optim.v.{n}"))?.clone();
        }
        t.optim.step = manifest.iteration;
        t.iteration = manifest.iteration;
        Ok(t)
    }

    pub fn model(&self) -> &GaitModel {
        &self.model
    }

    /// Direct parameter access, e.g. for fault injection.
    pub fn model_mut(&mut self) -> &mut GaitModel {
        &mut self.model
    }

    pub fn into_model(self) -> GaitModel {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Completed iterations.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Runs one iteration: sample, forward, loss, backward, update.
    pub fn step(&mut self) -> Result<StepRecord> {
        let it = self.iteration + 1;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(it);
        let batch = self.sampler.sample(&mut rng);
        let mcfg = self.model.config().clone();

        let tape = Tape::new();
        let bound = self.model.bind(&tape);
        let mut descriptors = Vec::with_capacity(batch.sequences.len());
        let kinds: Vec<PriorKind> = self.model.head().prior_heads().iter().map(|h| h.kind).collect();
        let mut priors: Vec<(Vec<_>, Vec<usize>, Vec<usize>)> = kinds.iter().map(|_| Default::default()).collect();
        for &si in &batch.sequences {
            let seq = &self.data.sequences[si];
            let idx = sample_clip(seq.frames.len(), self.cfg.clip_len, &mut rng);
            let frames: Vec<_> = idx.iter().map(|&i| &seq.frames[i]).collect();
            let clip = tape.constant(clip_tensor(&frames, mcfg.input_height, mcfg.input_width));
            let out = self.model.forward(&bound, clip)?;
            descriptors.push(out.head.descriptor);
            for (h, o) in out.head.priors.iter().enumerate() {
                let label = match o.kind {
                    PriorKind::View => seq.meta.view_index,
                    PriorKind::Condition => seq.meta.condition_index,
                };
                priors[h].0.push(o.logits);
                priors[h].1.push(o.prediction);
                priors[h].2.push(label);
            }
        }
        let obj = objective(&descriptors, &batch.subjects, &priors, self.cfg.margin, self.cfg.alpha)?;
        let mut grads = tape.backward(obj.total);
        let grads: Vec<Option<Tensor>> = bound.vars().iter().map(|&v| grads.take(v)).collect();
        if grads.iter().flatten().any(|g| !g.all_finite()) {
            return Err(Error::Diverged(format!("non-finite gradient at iteration {it}")));
        }
        let lr = self.cfg.lr_at(it);
        self.optim.update(self.model.params_mut(), &grads, lr)?;
        clamp_gem(&mut self.model);
        self.iteration = it;
        Ok(StepRecord {
            iter: it,
            lr,
            loss: obj.report,
            priors: kinds
                .into_iter()
                .zip(priors)
                .map(|(kind, (_, pred, label))| PriorLog { kind, pred, label })
                .collect(),
        })
    }

    pub fn checkpoint(&self) -> Archive {
        let manifest = CheckpointManifest {
            iteration: self.iteration,
            config_hash: self.config_hash.clone(),
            rng_state: RngState { seed: self.cfg.seed, stream: self.iteration + 1 },
            model: self.model.config().clone(),
        };
        let mut a = Archive::new(serde_json::to_value(&manifest).expect("manifest serializes"));
        for (i, p) in self.model.params().iter().enumerate() {
            a.insert(p.name.clone(), p.value.clone());
            a.insert(format!("optim.m.{}", p.name), self.optim.m[i].clone());
            a.insert(format!("optim.v.{}", p.name), self.optim.v[i].clone());
        }
        a
    }

    /// Writes a 64-bit checkpoint so a resumed run continues bit-identically.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().write(path, DType::F64)
    }

    /// Runs up to `cfg.iterations`, appending one JSON line per iteration to
    /// `log` and checkpointing into `out_dir`. On divergence a diagnostic
    /// checkpoint `diverged.ckpt` is written before the error is returned.
    pub fn run(&mut self, out_dir: &Path, log: &mut dyn Write) -> Result<PathBuf> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        while self.iteration < self.cfg.iterations {
            let rec = match self.step() {
                Ok(r) => r,
                Err(e @ Error::Diverged(_)) => {
                    self.save(&out_dir.join("diverged.ckpt"))?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let line = serde_json::to_string(&rec)?;
            writeln!(log, "{line}").map_err(|e| Error::io(out_dir, e))?;
            let every = self.cfg.checkpoint_interval;
            if every > 0 && rec.iter % every == 0 && rec.iter < self.cfg.iterations {
                self.save(&checkpoint_path(out_dir, rec.iter))?;
            }
            if rec.iter % 50 == 0 {
                log::info!("iter {} loss {:.4} prior acc {:.2}", rec.iter, rec.loss.total, rec.loss.prior_acc);
            }
        }
        log.flush().map_err(|e| Error::io(out_dir, e))?;
        let last = out_dir.join("final.ckpt");
        self.save(&last)?;
        Ok(last)
    }
}

pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("iter-{iteration:07}.ckpt"))
}

fn clamp_gem(model: &mut GaitModel) {
    let ids: Vec<_> = model.head().prior_heads().iter().map(|h| h.gem_p).collect();
    for id in ids {
        for v in model.params_mut().value_mut(id).data_mut() {
            *v = v.clamp(GEM_P_RANGE.0, GEM_P_RANGE.1);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Stream the next iteration draws from.
    pub stream: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub iteration: u64,
    pub config_hash: String,
    pub rng_state: RngState,
    pub model: ModelConfig,
}

impl CheckpointManifest {
    pub fn from_archive(a: &Archive) -> Result<Self> {
        serde_json::from_value(a.meta.clone()).map_err(|e| Error::Artifact(format!("checkpoint manifest: {e}")))
    }
}

/// Restores the model stored in a checkpoint.
pub fn load_model(path: &Path) -> Result<(GaitModel, CheckpointManifest)> {
    let a = Archive::read(path)?;
    let manifest = CheckpointManifest::from_archive(&a)?;
    let mut model = GaitModel::new(manifest.model.clone(), 0).map_err(|e| Error::Artifact(e.to_string()))?;
    model.params_mut().load_values(|n| a.tensors.get(n).cloned())?;
    Ok((model, manifest))
}
