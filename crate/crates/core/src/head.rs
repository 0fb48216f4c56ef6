//! Multi-span feature learning head.
//!
//! Per branch: horizontal pooling into part tokens, micro-motion capture,
//! then a global span (position encoding + class-token transformer) and a
//! local span (max over time). A prior head classifies view/condition from
//! both branch volumes and adds the embedding of its prediction to every
//! transformer token.

use crate::autograd::{self, TemporalPadding, Var};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, PeStrategy, PriorKind, TemporalPool};
use crate::params::{Bound, Init, ParamBuilder, ParamGroup, ParamId};
use crate::tensor::Tensor;

pub use crate::autograd::horizontal_pool;

/// `sigmoid(conv_k3(tokens)) * window_max(tokens)` along time of `[P, T, C]`.
/// The attention convolution replicates edge frames.
pub fn mcm<'t>(tokens: Var<'t>, w: Var<'t>, b: Var<'t>, radius: usize) -> Result<Var<'t>> {
    let attention = autograd::sigmoid(autograd::temporal_conv(tokens, w, Some(b), TemporalPadding::Replicate)?);
    autograd::mul(attention, autograd::window_max(tokens, radius)?)
}

pub fn temporal_pool(x: Var<'_>, axis: usize, pool: TemporalPool) -> Result<Var<'_>> {
    match pool {
        TemporalPool::Max => autograd::max_axis(x, axis),
        TemporalPool::Mean => autograd::mean_axis(x, axis),
    }
}

/// Local span: pool `[P, T, C]` over time into `[P, C]`.
pub fn local_feature(tokens: Var<'_>, pool: TemporalPool) -> Result<Var<'_>> {
    temporal_pool(tokens, 1, pool)
}

/// Fixed sin/cos table `[T, C]`: even channels `sin(t / 10000^(c/C))`,
/// odd channels the matching cosine.
pub fn sinusoidal_table(t: usize, c: usize) -> Tensor {
    Tensor::from_fn(&[t, c], |i| {
        let (pos, ch) = ((i / c) as f64, i % c);
        let freq = 10000f64.powf((ch - ch % 2) as f64 / c as f64);
        if ch % 2 == 0 {
            (pos / freq).sin()
        } else {
            (pos / freq).cos()
        }
    })
}

/// Adds a temporal position encoding to `[P, T, C]`. `kernel` is `[C, 1, K]`
/// for the grouped strategy, `[K]` for the shared one, unused otherwise.
pub fn position_encode<'t>(tokens: Var<'t>, strategy: PeStrategy, kernel: Option<Var<'t>>) -> Result<Var<'t>> {
    let s = tokens.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("position_encode on {s:?}")));
    }
    let (p, t, c) = (s[0], s[1], s[2]);
    let need = |k: Option<Var<'t>>| k.ok_or_else(|| Error::Config("position encoding kernel missing".into()));
    let encoding = match strategy {
        PeStrategy::None => return Ok(tokens),
        PeStrategy::Sinusoidal => {
            let table = sinusoidal_table(t, c);
            let full = Tensor::from_fn(&[p, t, c], |i| table.data()[i % (t * c)]);
            tokens.tape().constant(full)
        }
        PeStrategy::ChannelGrouped => {
            autograd::temporal_conv(tokens, need(kernel)?, None, TemporalPadding::Zeros)?
        }
        PeStrategy::Conv1dShared => {
            let k = need(kernel)?;
            let width = k.shape()[0];
            let w = autograd::reshape(autograd::expand_rows(k, c), &[c, 1, width])?;
            autograd::temporal_conv(tokens, w, None, TemporalPadding::Zeros)?
        }
    };
    autograd::add(tokens, encoding)
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderLayerParams {
    pub ln1: (ParamId, ParamId),
    pub q: (ParamId, ParamId),
    pub k: (ParamId, ParamId),
    pub v: (ParamId, ParamId),
    pub out: (ParamId, ParamId),
    pub ln2: (ParamId, ParamId),
    pub ffn1: (ParamId, ParamId),
    pub ffn2: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
pub struct CatmParams {
    pub pe_kernel: Option<ParamId>,
    pub class_token: ParamId,
    pub layers: Vec<EncoderLayerParams>,
    pub norm: (ParamId, ParamId),
    /// `[P, C, C]`, one map per part.
    pub part_fc: ParamId,
}

/// Bound CATM weights.
pub struct CatmVars<'t> {
    pub strategy: PeStrategy,
    pub heads: usize,
    pub pe_kernel: Option<Var<'t>>,
    pub class_token: Var<'t>,
    pub layers: Vec<[Var<'t>; 16]>,
    pub norm: (Var<'t>, Var<'t>),
    pub part_fc: Var<'t>,
}

fn linear_params(b: &mut ParamBuilder, name: &str, cin: usize, cout: usize) -> (ParamId, ParamId) {
    b.scope(name, |b| {
        (
            b.add("weight", &[cin, cout], Init::FanInUniform { fan_in: cin }),
            b.add("bias", &[cout], Init::Zeros),
        )
    })
}

fn norm_params(b: &mut ParamBuilder, name: &str, c: usize) -> (ParamId, ParamId) {
    b.scope(name, |b| (b.add("gamma", &[c], Init::Ones), b.add("beta", &[c], Init::Zeros)))
}

impl CatmParams {
    pub fn build(b: &mut ParamBuilder, cfg: &ModelConfig) -> Self {
        let c = cfg.head_channels();
        let pe_kernel = match cfg.pe {
            PeStrategy::ChannelGrouped => Some(b.add("pe.kernel", &[c, 1, cfg.pe_kernel], Init::Zeros)),
            PeStrategy::Conv1dShared => Some(b.add("pe.kernel", &[cfg.pe_kernel], Init::Zeros)),
            PeStrategy::None | PeStrategy::Sinusoidal => None,
        };
        let token_shape: &[usize] = if cfg.class_token_per_part { &[cfg.parts, c] } else { &[c] };
        let class_token = b.add("class_token", token_shape, Init::Normal { std: 1.0 });
        let (layers, norm) = b.in_group(ParamGroup::Transformer, |b| {
            b.scope("encoder", |b| {
                let layers = (0..cfg.layers)
                    .map(|i| {
                        b.scope(&format!("layer{i}"), |b| EncoderLayerParams {
                            ln1: norm_params(b, "ln1", c),
                            q: linear_params(b, "attn.q", c, c),
                            k: linear_params(b, "attn.k", c, c),
                            v: linear_params(b, "attn.v", c, c),
                            out: linear_params(b, "attn.out", c, c),
                            ln2: norm_params(b, "ln2", c),
                            ffn1: linear_params(b, "ffn.fc1", c, cfg.ffn_mult * c),
                            ffn2: linear_params(b, "ffn.fc2", cfg.ffn_mult * c, c),
                        })
                    })
                    .collect();
                (layers, norm_params(b, "norm", c))
            })
        });
        let part_fc = b.add("part_fc.weight", &[cfg.parts, c, c], Init::FanInUniform { fan_in: c });
        Self { pe_kernel, class_token, layers, norm, part_fc }
    }

    pub fn bind<'t>(&self, p: &Bound<'t>, cfg: &ModelConfig) -> CatmVars<'t> {
        let pair = |(a, b): (ParamId, ParamId)| [p.var(a), p.var(b)];
        CatmVars {
            strategy: cfg.pe,
            heads: cfg.heads,
            pe_kernel: self.pe_kernel.map(|id| p.var(id)),
            class_token: p.var(self.class_token),
            layers: self
                .layers
                .iter()
                .map(|l| {
                    let parts = [l.ln1, l.q, l.k, l.v, l.out, l.ln2, l.ffn1, l.ffn2].map(pair);
                    let mut out = [p.var(l.ln1.0); 16];
                    for (i, v) in parts.iter().flatten().enumerate() {
                        out[i] = *v;
                    }
                    out
                })
                .collect(),
            norm: (p.var(self.norm.0), p.var(self.norm.1)),
            part_fc: p.var(self.part_fc),
        }
    }
}

/// One pre-norm encoder layer over `x: [B, S, C]`.
fn encoder_layer<'t>(x: Var<'t>, w: &[Var<'t>; 16], heads: usize) -> Result<Var<'t>> {
    let [g1, b1, wq, bq, wk, bk, wv, bv, wo, bo, g2, b2, w1, c1, w2, c2] = *w;
    let h = autograd::layer_norm(x, g1, b1)?;
    let q = autograd::linear(h, wq, Some(bq))?;
    let k = autograd::linear(h, wk, Some(bk))?;
    let v = autograd::linear(h, wv, Some(bv))?;
    let attn = autograd::multi_head_attention(q, k, v, heads)?;
    let x = autograd::add(x, autograd::linear(attn, wo, Some(bo))?)?;
    let h = autograd::layer_norm(x, g2, b2)?;
    let h = autograd::gelu(autograd::linear(h, w1, Some(c1))?);
    autograd::add(x, autograd::linear(h, w2, Some(c2))?)
}

/// Class-token transformer over position-encoded `[P, T, C]` tokens.
/// `prior`, when given, is added to all `T + 1` tokens. Returns `[P, C]`.
pub fn catm_forward<'t>(tokens: Var<'t>, prior: Option<Var<'t>>, w: &CatmVars<'t>) -> Result<Var<'t>> {
    let s = tokens.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("catm_forward on {s:?}")));
    }
    let (p, t, c) = (s[0], s[1], s[2]);
    if w.heads == 0 || c % w.heads != 0 {
        return Err(Error::Config(format!("width {c} not divisible by {} heads", w.heads)));
    }
    let cls = match w.class_token.shape().len() {
        1 => autograd::expand_rows(w.class_token, p),
        _ => w.class_token,
    };
    let cls = autograd::reshape(cls, &[p, 1, c])?;
    let mut x = autograd::concat(&[tokens, cls], 1)?;
    if let Some(e) = prior {
        x = autograd::add_row(x, e)?;
    }
    for layer in &w.layers {
        x = encoder_layer(x, layer, w.heads)?;
    }
    x = autograd::layer_norm(x, w.norm.0, w.norm.1)?;
    let cls_out = autograd::reshape(autograd::narrow(x, 1, t, 1)?, &[p, c])?;
    autograd::part_linear(cls_out, w.part_fc)
}

/// Prior head weights: learnable GeM exponent and logit projection.
#[derive(Clone, Copy, Debug)]
pub struct PriorHeadParams {
    pub kind: PriorKind,
    pub gem_p: ParamId,
    /// `[D, M]` where `D` is the concatenated branch width.
    pub weight: ParamId,
}

pub struct PriorOutput<'t> {
    pub kind: PriorKind,
    /// Logits `[M]`.
    pub logits: Var<'t>,
    pub prediction: usize,
}

/// Lowest index among the maxima.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Pools branch volumes into the prior vector `S_prior`: temporal pooling
/// per branch, channel concatenation, GeM over all spatial positions.
pub fn prior_vector<'t>(volumes: &[Var<'t>], gem_p: Var<'t>, pool: TemporalPool) -> Result<Var<'t>> {
    let pooled = volumes
        .iter()
        .map(|&v| temporal_pool(v, 1, pool))
        .collect::<Result<Vec<_>>>()?;
    let x = autograd::concat(&pooled, 0)?;
    let s = x.shape();
    let x = autograd::reshape(x, &[s[0], s[1] * s[2]])?;
    autograd::gem_pool(x, gem_p)
}

/// Logits of one prior head and its argmax prediction.
pub fn pieg_prior<'t>(
    volumes: &[Var<'t>],
    gem_p: Var<'t>,
    weight: Var<'t>,
    kind: PriorKind,
    pool: TemporalPool,
) -> Result<PriorOutput<'t>> {
    let sp = prior_vector(volumes, gem_p, pool)?;
    let d = sp.shape()[0];
    let logits = autograd::linear(autograd::reshape(sp, &[1, d])?, weight, None)?;
    let m = logits.shape()[1];
    let logits = autograd::reshape(logits, &[m])?;
    let values = logits.value();
    if !values.all_finite() {
        return Err(Error::Diverged("prior head diverged".into()));
    }
    Ok(PriorOutput { kind, logits, prediction: argmax(values.data()) })
}

/// `concat_c(global_b + local_b)` over branches; either span may be absent.
pub fn fuse<'t>(branches: &[(Option<Var<'t>>, Option<Var<'t>>)]) -> Result<Var<'t>> {
    let mut sums = Vec::with_capacity(branches.len());
    for (g, l) in branches {
        sums.push(match (g, l) {
            (Some(g), Some(l)) => autograd::add(*g, *l)?,
            (Some(x), None) | (None, Some(x)) => *x,
            (None, None) => return Err(Error::Shape("fuse: branch without features".into())),
        });
    }
    if sums.is_empty() {
        return Err(Error::Shape("fuse: no branches".into()));
    }
    autograd::concat(&sums, 1)
}

#[derive(Clone, Debug)]
pub struct BranchHeadParams {
    pub mcm: (ParamId, ParamId),
    pub catm: Option<CatmParams>,
    /// Embedding table `[M, C]` per prior head, same order as the heads.
    pub prior_tables: Vec<ParamId>,
}

/// Parameter handles of the whole head.
#[derive(Clone, Debug)]
pub struct Head {
    cfg: ModelConfig,
    fine: Option<BranchHeadParams>,
    coarse: Option<BranchHeadParams>,
    priors: Vec<PriorHeadParams>,
}

pub struct HeadOutput<'t> {
    /// Horizontal-pooled fine tokens `[P, T, C]`.
    pub fine_tokens: Option<Var<'t>>,
    pub coarse_tokens: Option<Var<'t>>,
    pub priors: Vec<PriorOutput<'t>>,
    /// `[P, branches * C]`.
    pub descriptor: Var<'t>,
}

impl Head {
    pub fn build(b: &mut ParamBuilder, cfg: &ModelConfig) -> Self {
        let c = cfg.head_channels();
        let branch = |b: &mut ParamBuilder, name: &str| {
            b.scope(name, |b| BranchHeadParams {
                mcm: b.scope("mcm", |b| {
                    (
                        b.add("weight", &[c, c, 3], Init::FanInUniform { fan_in: 3 * c }),
                        b.add("bias", &[c], Init::Zeros),
                    )
                }),
                catm: cfg.global_span.then(|| b.scope("catm", |b| CatmParams::build(b, cfg))),
                prior_tables: cfg
                    .priors
                    .iter()
                    .map(|&k| {
                        b.add(
                            &format!("prior.{}.table", k.name()),
                            &[cfg.prior_classes(k), c],
                            Init::Normal { std: 0.02 },
                        )
                    })
                    .collect(),
            })
        };
        let fine = cfg.fine_branch.then(|| branch(b, "fine"));
        let coarse = cfg.coarse_branch.then(|| branch(b, "coarse"));
        let d = cfg.descriptor_channels();
        let priors = cfg
            .priors
            .iter()
            .map(|&kind| {
                b.scope(&format!("pieg.{}", kind.name()), |b| PriorHeadParams {
                    kind,
                    gem_p: b.add("gem_p", &[1], Init::Constant(cfg.gem_p_init)),
                    weight: b.add("weight", &[d, cfg.prior_classes(kind)], Init::FanInUniform { fan_in: d }),
                })
            })
            .collect();
        Self { cfg: cfg.clone(), fine, coarse, priors }
    }

    pub fn prior_heads(&self) -> &[PriorHeadParams] {
        &self.priors
    }

    /// Runs the head on the backbone outputs `[C, T, H, W]`.
    pub fn forward<'t>(&self, fine: Option<Var<'t>>, coarse: Option<Var<'t>>, p: &Bound<'t>) -> Result<HeadOutput<'t>> {
        let cfg = &self.cfg;
        let volumes: Vec<Var<'t>> = fine.into_iter().chain(coarse).collect();
        if volumes.is_empty() {
            return Err(Error::Shape("head needs at least one branch volume".into()));
        }
        let priors = self
            .priors
            .iter()
            .map(|h| pieg_prior(&volumes, p.var(h.gem_p), p.var(h.weight), h.kind, cfg.temporal_pool))
            .collect::<Result<Vec<_>>>()?;
        let mut out = HeadOutput {
            fine_tokens: None,
            coarse_tokens: None,
            priors,
            descriptor: volumes[0],
        };
        let mut branches = Vec::new();
        for (volume, params, slot) in [(fine, &self.fine, 0), (coarse, &self.coarse, 1)] {
            let (Some(volume), Some(params)) = (volume, params) else {
                continue;
            };
            let tokens = horizontal_pool(volume, cfg.parts)?;
            if slot == 0 {
                out.fine_tokens = Some(tokens);
            } else {
                out.coarse_tokens = Some(tokens);
            }
            let motion = mcm(tokens, p.var(params.mcm.0), p.var(params.mcm.1), cfg.mcm_radius)?;
            let global = match &params.catm {
                Some(catm) => {
                    let w = catm.bind(p, cfg);
                    let mut prior = None;
                    for (table, head) in params.prior_tables.iter().zip(&out.priors) {
                        let e = autograd::gather_row(p.var(*table), head.prediction)?;
                        prior = Some(match prior {
                            Some(acc) => autograd::add(acc, e)?,
                            None => e,
                        });
                    }
                    let encoded = position_encode(motion, cfg.pe, w.pe_kernel)?;
                    Some(catm_forward(encoded, prior, &w)?)
                }
                None => None,
            };
            let local = if cfg.local_span { Some(local_feature(motion, cfg.temporal_pool)?) } else { None };
            branches.push((global, local));
        }
        out.descriptor = fuse(&branches)?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn horizontal_pool_of_constant_is_twice_the_constant() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[3, 2, 8, 5], 0.7));
        let y = horizontal_pool(x, 4).unwrap();
        assert_eq!(y.shape(), [4, 2, 3]);
        assert!(y.value().data().iter().all(|&v| (v - 1.4).abs() < 1e-15));
        assert!(horizontal_pool(x, 3).is_err());
    }

    #[test]
    fn mcm_with_zero_attention_is_half_running_max() {
        let tape = Tape::new();
        let x = rand_tensor(&[2, 6, 3], 1);
        let w = tape.constant(Tensor::zeros(&[3, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = mcm(tape.constant(x.clone()), w, b, 1).unwrap();
        let y = y.value();
        for p in 0..2 {
            for t in 0..6usize {
                for c in 0..3 {
                    let lo = t.saturating_sub(1);
                    let hi = (t + 1).min(5);
                    let m = (lo..=hi).map(|u| x.at(&[p, u, c])).fold(f64::NEG_INFINITY, f64::max);
                    assert!((y.at(&[p, t, c]) - 0.5 * m).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn sinusoidal_table_closed_form() {
        let table = sinusoidal_table(10, 8);
        assert!((table.at(&[3, 0]) - 3f64.sin()).abs() < 1e-15);
        assert!((table.at(&[3, 1]) - 3f64.cos()).abs() < 1e-15);
        assert!((table.at(&[5, 4]) - (5.0 / 10000f64.powf(0.5)).sin()).abs() < 1e-15);
        assert!((table.at(&[5, 7]) - (5.0 / 10000f64.powf(0.75)).cos()).abs() < 1e-15);
    }

    #[test]
    fn zero_kernels_are_identity_encoding() {
        let tape = Tape::new();
        let x = tape.constant(rand_tensor(&[2, 5, 4], 2));
        let grouped = tape.constant(Tensor::zeros(&[4, 1, 7]));
        let shared = tape.constant(Tensor::zeros(&[7]));
        let a = position_encode(x, PeStrategy::ChannelGrouped, Some(grouped)).unwrap();
        let b = position_encode(x, PeStrategy::Conv1dShared, Some(shared)).unwrap();
        let c = position_encode(x, PeStrategy::None, None).unwrap();
        assert_eq!(*a.value(), *x.value());
        assert_eq!(*b.value(), *x.value());
        assert_eq!(*c.value(), *x.value());
    }

    #[test]
    fn grouped_encoding_is_shift_covariant_on_interior() {
        let tape = Tape::new();
        let (t, k, shift) = (20, 7, 2);
        let x = rand_tensor(&[1, t, 3], 3);
        let shifted = Tensor::from_fn(&[1, t, 3], |i| {
            let (tt, c) = (i / 3, i % 3);
            if tt >= shift { x.at(&[0, tt - shift, c]) } else { 0.0 }
        });
        let w = tape.constant(rand_tensor(&[3, 1, k], 4));
        let a = position_encode(tape.constant(x), PeStrategy::ChannelGrouped, Some(w)).unwrap().value();
        let b = position_encode(tape.constant(shifted), PeStrategy::ChannelGrouped, Some(w)).unwrap().value();
        for tt in k / 2 + shift..t - k / 2 {
            for c in 0..3 {
                assert!((b.at(&[0, tt, c]) - a.at(&[0, tt - shift, c])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn argmax_lowest_index_wins_ties() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn fuse_concatenates_branch_sums() {
        let tape = Tape::new();
        let g = tape.constant(rand_tensor(&[2, 3], 5));
        let l = tape.constant(rand_tensor(&[2, 3], 6));
        let z = tape.constant(Tensor::zeros(&[2, 3]));
        let out = fuse(&[(Some(g), Some(l)), (Some(z), Some(z))]).unwrap().value();
        let sum = g.value().zip_map(&l.value(), |a, b| a + b);
        for p in 0..2 {
            for c in 0..3 {
                assert_eq!(out.at(&[p, c]), sum.at(&[p, c]));
                assert_eq!(out.at(&[p, 3 + c]), 0.0);
            }
        }
        let swapped = fuse(&[(Some(z), Some(z)), (Some(g), Some(l))]).unwrap().value();
        for p in 0..2 {
            for c in 0..3 {
                assert_eq!(swapped.at(&[p, 3 + c]), out.at(&[p, c]));
            }
        }
        let bad = tape.constant(Tensor::zeros(&[2, 4]));
        assert!(fuse(&[(Some(g), Some(bad))]).is_err());
    }
}
