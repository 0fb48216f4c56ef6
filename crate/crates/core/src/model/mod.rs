//! The assembled network: backbone followed by the multi-span head.

mod config;

pub use config::{ModelConfig, PeStrategy, PriorKind, TemporalPool};

use crate::autograd::{self, Tape, Var};
use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::head::{Head, HeadOutput};
use crate::params::{Bound, ParamBuilder, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GaitModel {
    cfg: ModelConfig,
    params: ParamStore,
    backbone: Backbone,
    head: Head,
}

pub struct ModelOutput<'t> {
    pub s_f: Option<Var<'t>>,
    pub s_c: Option<Var<'t>>,
    pub head: HeadOutput<'t>,
}

/// Result of a gradient-free pass.
#[derive(Clone, Debug)]
pub struct Inference {
    /// `[P, D]`.
    pub descriptor: Tensor,
    /// `(kind, logits, prediction)` per prior head.
    pub priors: Vec<(PriorKind, Tensor, usize)>,
}

impl GaitModel {
    /// Builds the network with freshly initialized parameters.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut b = ParamBuilder::new(seed);
        let backbone = b.scope("backbone", |b| Backbone::build(b, &cfg));
        let head = b.scope("head", |b| Head::build(b, &cfg));
        Ok(Self { params: b.finish(), cfg, backbone, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn head(&self) -> &Head {
        &self.head
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.params.bind(tape)
    }

    /// Forward pass of one clip `[T, H, W]` at the configured input size.
    pub fn forward<'t>(&self, p: &Bound<'t>, clip: Var<'t>) -> Result<ModelOutput<'t>> {
        let s = clip.shape();
        if s.len() != 3 || s[1] != self.cfg.input_height || s[2] != self.cfg.input_width {
            return Err(Error::Shape(format!(
                "clip {s:?} does not match input size {}x{}",
                self.cfg.input_height, self.cfg.input_width
            )));
        }
        if s[0] < 3 {
            return Err(Error::Shape(format!("sequence too short: {} frames", s[0])));
        }
        let x = autograd::reshape(clip, &[1, s[0], s[1], s[2]])?;
        let bb = self.backbone.forward(x, p)?;
        let head = self.head.forward(bb.fine, bb.coarse, p)?;
        Ok(ModelOutput { s_f: bb.fine, s_c: bb.coarse, head })
    }

    pub fn infer(&self, clip: &Tensor) -> Result<Inference> {
        let tape = Tape::new();
        let p = self.bind(&tape);
        let out = self.forward(&p, tape.constant(clip.clone()))?;
        let descriptor = (*out.head.descriptor.value()).clone();
        if !descriptor.all_finite() {
            return Err(Error::Diverged("non-finite descriptor".into()));
        }
        Ok(Inference {
            descriptor,
            priors: out
                .head
                .priors
                .iter()
                .map(|o| (o.kind, (*o.logits.value()).clone(), o.prediction))
                .collect(),
        })
    }
}
