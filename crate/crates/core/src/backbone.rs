//! Multi-granularity feature extractor.
//!
//! A shallow 3-D stem feeds two towers of STEM blocks. The fine tower runs
//! at frame rate; the coarse tower starts from a unit temporal aggregation
//! (UTA, kernel 3 / stride 3 along time) of the stem output and receives
//! UTA-aggregated fine features at every later stage boundary.
//!
//! All volumes are `[C, T, H, W]`.

use crate::autograd::{self, Conv3dSpec, Tape, Var};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::{Bound, Init, ParamBuilder, ParamId};
use crate::tensor::Tensor;

/// Parameters of one B3D block: three parallel kernels with their biases.
#[derive(Clone, Copy, Debug)]
pub struct B3dParams {
    pub k333: ParamId,
    pub b333: ParamId,
    pub k311: ParamId,
    pub b311: ParamId,
    pub k133: ParamId,
    pub b133: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct B3dVars<'t> {
    pub k333: Var<'t>,
    pub b333: Var<'t>,
    pub k311: Var<'t>,
    pub b311: Var<'t>,
    pub k133: Var<'t>,
    pub b133: Var<'t>,
}

impl B3dParams {
    pub fn build(b: &mut ParamBuilder, cin: usize, cout: usize) -> Self {
        let kernel = |b: &mut ParamBuilder, name: &str, k: [usize; 3]| {
            let fan_in = cin * k.iter().product::<usize>();
            b.scope(name, |b| {
                (
                    b.add("weight", &[cout, cin, k[0], k[1], k[2]], Init::FanInUniform { fan_in }),
                    b.add("bias", &[cout], Init::Zeros),
                )
            })
        };
        let (k333, b333) = kernel(b, "k333", [3, 3, 3]);
        let (k311, b311) = kernel(b, "k311", [3, 1, 1]);
        let (k133, b133) = kernel(b, "k133", [1, 3, 3]);
        Self { k333, b333, k311, b311, k133, b133 }
    }

    pub fn bind<'t>(&self, p: &Bound<'t>) -> B3dVars<'t> {
        B3dVars {
            k333: p.var(self.k333),
            b333: p.var(self.b333),
            k311: p.var(self.k311),
            b311: p.var(self.b311),
            k133: p.var(self.k133),
            b133: p.var(self.b133),
        }
    }
}

impl<'t> B3dVars<'t> {
    /// Leaf variables for explicit weights (tests, tools).
    pub fn from_tensors(tape: &'t Tape, kernels: [Tensor; 3], biases: [Tensor; 3]) -> Self {
        let [k333, k311, k133] = kernels.map(|k| tape.variable(k));
        let [b333, b311, b133] = biases.map(|b| tape.variable(b));
        Self { k333, b333, k311, b311, k133, b133 }
    }

    fn channels(&self) -> (usize, usize) {
        let s = self.k333.shape();
        (s[1], s[0])
    }
}

/// Zero-pads a `[Co, Ci, a, b, c]` kernel into the centre of a 3x3x3 one.
fn embed_center(w: Var<'_>) -> Result<Var<'_>> {
    let s = w.shape();
    if s.len() != 5 || s[2..].iter().any(|&k| k != 1 && k != 3) {
        return Err(Error::Shape(format!("cannot embed kernel {s:?} into 3x3x3")));
    }
    let (co, ci) = (s[0], s[1]);
    let off = [(3 - s[2]) / 2, (3 - s[3]) / 2, (3 - s[4]) / 2];
    let (ka, kb, kc) = (s[2], s[3], s[4]);
    let target = move |o: usize, i: usize, a: usize, b: usize, c: usize| {
        (((o * ci + i) * 3 + a + off[0]) * 3 + b + off[1]) * 3 + c + off[2]
    };
    let wv = w.value();
    let mut out = vec![0.0; co * ci * 27];
    let mut src = 0;
    for o in 0..co {
        for i in 0..ci {
            for a in 0..ka {
                for b in 0..kb {
                    for c in 0..kc {
                        out[target(o, i, a, b, c)] = wv.data()[src];
                        src += 1;
                    }
                }
            }
        }
    }
    let out = Tensor::new(&[co, ci, 3, 3, 3], out)?;
    Ok(w.tape().push(
        out,
        &[w],
        Box::new(move |g, _| {
            let mut d = Vec::with_capacity(co * ci * ka * kb * kc);
            for o in 0..co {
                for i in 0..ci {
                    for a in 0..ka {
                        for b in 0..kb {
                            for c in 0..kc {
                                d.push(g.data()[target(o, i, a, b, c)]);
                            }
                        }
                    }
                }
            }
            vec![Some(Tensor::new(&s, d).unwrap())]
        }),
    ))
}

/// `act(conv333(x) + conv311(x) + conv133(x))`, stride 1, zero "same" padding.
///
/// The three kernels are folded into one 3x3x3 kernel before convolving;
/// the result is identical because every kernel shares the same centre.
pub fn b3d_forward<'t>(x: Var<'t>, w: &B3dVars<'t>, slope: f64) -> Result<Var<'t>> {
    let (cin, _) = w.channels();
    let xs = x.shape();
    if xs.len() != 4 || xs[0] != cin {
        return Err(Error::Shape(format!("B3D expects {cin} input channels, got {xs:?}")));
    }
    let kernel = autograd::add(
        autograd::add(w.k333, embed_center(w.k311)?)?,
        embed_center(w.k133)?,
    )?;
    let bias = autograd::add(autograd::add(w.b333, w.b311)?, w.b133)?;
    let y = autograd::conv3d(x, kernel, Some(bias), Conv3dSpec::same([3, 3, 3]))?;
    Ok(autograd::leaky_relu(y, slope))
}

/// One STEM block: shared-weight B3D over each height strip, concatenated,
/// plus a full-frame B3D shortcut.
pub fn stem_forward<'t>(
    x: Var<'t>,
    shared: &B3dVars<'t>,
    shortcut: &B3dVars<'t>,
    strips: usize,
    slope: f64,
) -> Result<Var<'t>> {
    let xs = x.shape();
    if xs.len() != 4 || strips == 0 || xs[2] % strips != 0 {
        return Err(Error::Shape(format!(
            "height not partitionable: {xs:?} into {strips} strips"
        )));
    }
    let rows = xs[2] / strips;
    let parts = (0..strips)
        .map(|i| b3d_forward(autograd::narrow(x, 2, i * rows, rows)?, shared, slope))
        .collect::<Result<Vec<_>>>()?;
    let plain = autograd::concat(&parts, 2)?;
    autograd::add(plain, b3d_forward(x, shortcut, slope)?)
}

/// Unit temporal aggregation: `act(conv(3,1,1) stride (3,1,1))`, no
/// temporal padding, so `T' = floor((T - 3) / 3) + 1`.
pub fn uta<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>, slope: f64) -> Result<Var<'t>> {
    let xs = x.shape();
    if xs.len() != 4 || xs[1] < 3 {
        return Err(Error::Shape(format!(
            "sequence too short for unit aggregation: {xs:?}"
        )));
    }
    let y = autograd::conv3d(x, w, Some(b), Conv3dSpec { stride_t: 3, pad: [0, 0, 0] })?;
    Ok(autograd::leaky_relu(y, slope))
}

pub fn uta_len(t: usize) -> Option<usize> {
    t.checked_sub(3).map(|r| r / 3 + 1)
}

#[derive(Clone, Copy, Debug)]
pub struct StemParams {
    pub shared: B3dParams,
    pub shortcut: B3dParams,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// Parameter handles of the whole extractor.
#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: ModelConfig,
    shallow: Vec<ConvParams>,
    fine: Vec<StemParams>,
    /// Empty when coarse stages share the fine weights.
    coarse: Vec<StemParams>,
    /// `uta[0]` aggregates the stem output; `uta[i]` feeds coarse stage `i`.
    uta: Vec<ConvParams>,
}

/// Outputs of a backbone pass.
pub struct BackboneOutput<'t> {
    pub shallow: Var<'t>,
    pub fine: Option<Var<'t>>,
    pub coarse: Option<Var<'t>>,
}

impl Backbone {
    pub fn build(b: &mut ParamBuilder, cfg: &ModelConfig) -> Self {
        let shallow = b.scope("shallow", |b| {
            (0..cfg.shallow_layers)
                .map(|i| {
                    let cin = if i == 0 { 1 } else { cfg.shallow_channels };
                    b.scope(&format!("conv{i}"), |b| ConvParams {
                        weight: b.add(
                            "weight",
                            &[cfg.shallow_channels, cin, 3, 3, 3],
                            Init::FanInUniform { fan_in: cin * 27 },
                        ),
                        bias: b.add("bias", &[cfg.shallow_channels], Init::Zeros),
                    })
                })
                .collect()
        });
        let tower = |b: &mut ParamBuilder, name: &str| {
            b.scope(name, |b| {
                let mut cin = cfg.shallow_channels;
                cfg.stage_channels
                    .iter()
                    .enumerate()
                    .map(|(i, &cout)| {
                        let p = b.scope(&format!("stage{}", i + 1), |b| StemParams {
                            shared: b.scope("shared", |b| B3dParams::build(b, cin, cout)),
                            shortcut: b.scope("shortcut", |b| B3dParams::build(b, cin, cout)),
                        });
                        cin = cout;
                        p
                    })
                    .collect::<Vec<_>>()
            })
        };
        let fine = tower(b, "fine");
        let coarse = if cfg.coarse_branch && !cfg.coarse_shares_weights {
            tower(b, "coarse")
        } else {
            Vec::new()
        };
        let mut uta = Vec::new();
        if cfg.coarse_branch {
            b.scope("coarse", |b| {
                let mut channels = vec![cfg.shallow_channels];
                if cfg.coarse_injection {
                    channels.extend(&cfg.stage_channels[..cfg.stage_channels.len() - 1]);
                }
                for (i, &c) in channels.iter().enumerate() {
                    uta.push(b.scope(&format!("uta{i}"), |b| ConvParams {
                        weight: b.add("weight", &[c, c, 3, 1, 1], Init::FanInUniform { fan_in: 3 * c }),
                        bias: b.add("bias", &[c], Init::Zeros),
                    }));
                }
            });
        }
        Self {
            cfg: cfg.clone(),
            shallow,
            fine,
            coarse,
            uta,
        }
    }

    /// Runs the extractor on `x: [1, T, H, W]`.
    pub fn forward<'t>(&self, x: Var<'t>, p: &Bound<'t>) -> Result<BackboneOutput<'t>> {
        let cfg = &self.cfg;
        let xs = x.shape();
        if xs.len() != 4 || xs[0] != 1 || xs[1] < 3 {
            return Err(Error::Shape(format!("backbone input must be [1, T>=3, H, W], got {xs:?}")));
        }
        let mut s = x;
        for conv in &self.shallow {
            s = shallow_extract(s, p.var(conv.weight), p.var(conv.bias), cfg.slope)?;
        }
        let need_fine_tower = cfg.fine_branch || (cfg.coarse_branch && cfg.coarse_injection);
        let (fine, stage_outputs) = if need_fine_tower {
            let stems: Vec<_> = self.fine.iter().map(|st| (st.shared.bind(p), st.shortcut.bind(p))).collect();
            let (f, outs) = fine_branch(s, &stems, &cfg.pool_after, cfg.stem_parts, cfg.slope)?;
            (Some(f), outs)
        } else {
            (None, Vec::new())
        };
        let coarse = if cfg.coarse_branch {
            let towers = if self.coarse.is_empty() { &self.fine } else { &self.coarse };
            let stems: Vec<_> = towers.iter().map(|st| (st.shared.bind(p), st.shortcut.bind(p))).collect();
            let utas: Vec<_> = self.uta.iter().map(|u| (p.var(u.weight), p.var(u.bias))).collect();
            let injections = if cfg.coarse_injection { &stage_outputs[..] } else { &[] };
            Some(coarse_branch(injections, s, &stems, &utas, &cfg.pool_after, cfg.stem_parts, cfg.slope)?)
        } else {
            None
        };
        Ok(BackboneOutput {
            shallow: s,
            fine: if cfg.fine_branch { fine } else { None },
            coarse,
        })
    }
}

/// One 3x3x3 convolution, stride 1, "same" padding, plus activation.
pub fn shallow_extract<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>, slope: f64) -> Result<Var<'t>> {
    let xs = x.shape();
    if xs.len() != 4 || xs[1] < 3 || xs[2] < 3 || xs[3] < 3 {
        return Err(Error::Shape(format!("shallow stem needs T, H, W >= 3, got {xs:?}")));
    }
    let y = autograd::conv3d(x, w, Some(b), Conv3dSpec::same([3, 3, 3]))?;
    Ok(autograd::leaky_relu(y, slope))
}

/// Fine tower. Returns the final feature and the output of every stage
/// after its optional pooling; entry `i` is what stage `i + 1` consumes.
pub fn fine_branch<'t>(
    s_hat: Var<'t>,
    stems: &[(B3dVars<'t>, B3dVars<'t>)],
    pool_after: &[usize],
    strips: usize,
    slope: f64,
) -> Result<(Var<'t>, Vec<Var<'t>>)> {
    if stems.is_empty() {
        return Err(Error::Config("fine branch needs at least one stage".into()));
    }
    let mut x = s_hat;
    let mut outs = Vec::with_capacity(stems.len());
    for (i, (shared, shortcut)) in stems.iter().enumerate() {
        x = stem_forward(x, shared, shortcut, strips, slope)?;
        if pool_after.contains(&i) {
            x = autograd::max_pool_hw(x)?;
        }
        outs.push(x);
    }
    Ok((x, outs))
}

/// Coarse tower over `uta(s_hat)`. When `fine_outputs` is nonempty, stage
/// `i >= 1` consumes its own previous output plus `uta_i(fine_outputs[i-1])`.
pub fn coarse_branch<'t>(
    fine_outputs: &[Var<'t>],
    s_hat: Var<'t>,
    stems: &[(B3dVars<'t>, B3dVars<'t>)],
    utas: &[(Var<'t>, Var<'t>)],
    pool_after: &[usize],
    strips: usize,
    slope: f64,
) -> Result<Var<'t>> {
    let inject = !fine_outputs.is_empty();
    if inject && (fine_outputs.len() < stems.len() - 1 || utas.len() < stems.len()) {
        return Err(Error::Shape(format!(
            "coarse branch: {} stages, {} fine outputs, {} UTA blocks",
            stems.len(),
            fine_outputs.len(),
            utas.len()
        )));
    }
    let (w0, b0) = utas
        .first()
        .ok_or_else(|| Error::Config("coarse branch needs an entry UTA".into()))?;
    let mut x = uta(s_hat, *w0, *b0, slope)?;
    for (i, (shared, shortcut)) in stems.iter().enumerate() {
        if i > 0 && inject {
            let (w, b) = utas[i];
            let injected = uta(fine_outputs[i - 1], w, b, slope)?;
            if injected.shape() != x.shape() {
                return Err(Error::Shape(format!(
                    "temporal misalignment: coarse {:?} vs injected {:?}",
                    x.shape(),
                    injected.shape()
                )));
            }
            x = autograd::add(x, injected)?;
        }
        x = stem_forward(x, shared, shortcut, strips, slope)?;
        if pool_after.contains(&i) {
            x = autograd::max_pool_hw(x)?;
        }
    }
    Ok(x)
}
