//! Finite-difference checks of the analytic gradients.
//!
//! The network is piecewise linear (leaky rectifier, max pooling, sliding
//! max), so a central difference whose interval straddles a kink measures a
//! chord rather than the local slope. `full_model_gradients_converge` retries
//! such scalars at smaller steps; a wrong backward rule would disagree at
//! every step.
use gaitscope_core::autograd::{self, Tape, Var};
use gaitscope_core::head::Head;
use gaitscope_core::model::{GaitModel, ModelConfig, PriorKind};
use gaitscope_core::objective::cross_entropy;
use gaitscope_core::params::{ParamBuilder, ParamStore};
use gaitscope_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// `sum(coef * descriptor) + sum of prior cross-entropies at label 1`.
fn scalar_loss<'t>(tape: &'t Tape, descriptor: Var<'t>, logits: &[Var<'t>], coef: &Tensor) -> Var<'t> {
    let mut loss = autograd::weighted_sum(descriptor, tape.constant(coef.clone()));
    for &l in logits {
        let m = l.shape()[0];
        let ce = cross_entropy(autograd::reshape(l, &[1, m]).unwrap(), &[1]).unwrap();
        loss = autograd::add(loss, ce).unwrap();
    }
    loss
}

struct HeadCase {
    head: Head,
    fine: Tensor,
    coarse: Tensor,
    coef: Tensor,
}

impl HeadCase {
    /// Loss value and, when `grads` is set, the gradient of every parameter.
    fn eval(&self, store: &ParamStore, grads: bool) -> (f64, Vec<Vec<f64>>) {
        let tape = Tape::new();
        let p = store.bind(&tape);
        let out = self
            .head
            .forward(Some(tape.constant(self.fine.clone())), Some(tape.constant(self.coarse.clone())), &p)
            .unwrap();
        let logits: Vec<Var<'_>> = out.priors.iter().map(|o| o.logits).collect();
        let loss = scalar_loss(&tape, out.descriptor, &logits, &self.coef);
        collect(&tape, store, p.vars(), loss, grads)
    }
}

struct ModelCase {
    clip: Tensor,
    coef: Tensor,
}

impl ModelCase {
    fn eval(&self, model: &GaitModel, grads: bool) -> (f64, Vec<Vec<f64>>) {
        let tape = Tape::new();
        let p = model.bind(&tape);
        let out = model.forward(&p, tape.constant(self.clip.clone())).unwrap();
        let logits: Vec<Var<'_>> = out.head.priors.iter().map(|o| o.logits).collect();
        let loss = scalar_loss(&tape, out.head.descriptor, &logits, &self.coef);
        collect(&tape, model.params(), p.vars(), loss, grads)
    }
}

fn collect<'t>(tape: &'t Tape, store: &ParamStore, vars: &[Var<'t>], loss: Var<'t>, grads: bool) -> (f64, Vec<Vec<f64>>) {
    let value = loss.value().data()[0];
    if !grads {
        return (value, Vec::new());
    }
    let mut g = tape.backward(loss);
    let out = vars
        .iter()
        .zip(store.iter())
        .map(|(&v, param)| g.take(v).map_or(vec![0.0; param.value.numel()], |t| t.data().to_vec()))
        .collect();
    (value, out)
}

/// Central difference of `f` in scalar `j` of parameter `i`.
fn central(store: &mut ParamStore, i: usize, j: usize, h: f64, f: &dyn Fn(&ParamStore) -> f64) -> f64 {
    let id = store.ids().nth(i).unwrap();
    let orig = store.get(id).value.data()[j];
    store.value_mut(id).data_mut()[j] = orig + h;
    let up = f(store);
    store.value_mut(id).data_mut()[j] = orig - h;
    let down = f(store);
    store.value_mut(id).data_mut()[j] = orig;
    (up - down) / (2.0 * h)
}

/// Per parameter tensor: `max |a - n| / max(max |a|, max |n|, 1e-8)`.
fn relative_error(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = a.iter().chain(n).map(|v| v.abs()).fold(0.0, f64::max).max(1e-8);
    diff / scale
}

#[test]
fn head_only_micro_matches_finite_differences() {
    let cfg = ModelConfig { input_height: 8, input_width: 6, ..ModelConfig::micro() };
    assert_eq!((cfg.parts, cfg.head_channels(), cfg.layers, cfg.heads), (4, 8, 1, 2));
    assert!(cfg.priors.contains(&PriorKind::View));
    let mut b = ParamBuilder::new(5);
    let head = Head::build(&mut b, &cfg);
    let mut store = b.finish();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let case = HeadCase {
        head,
        fine: uniform(&[8, 5, 8, 6], -1.0, 1.0, &mut rng),
        coarse: uniform(&[8, 5, 8, 6], -1.0, 1.0, &mut rng),
        coef: uniform(&[4, 16], -1.0, 1.0, &mut rng),
    };
    let (_, analytic) = case.eval(&store, true);
    let f = |s: &ParamStore| case.eval(s, false).0;
    for (i, a) in analytic.iter().enumerate() {
        let numeric: Vec<f64> = (0..a.len()).map(|j| central(&mut store, i, j, 1e-3, &f)).collect();
        let name = store.iter().nth(i).unwrap().name.clone();
        if a.iter().all(|v| v.abs() < 1e-12) {
            // Key biases shift every score of a query equally, which the
            // softmax cancels; only roundoff is left to measure.
            let noise = numeric.iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(noise < 1e-9, "{name}: zero analytic gradient, numeric {noise:.3e}");
            continue;
        }
        let rel = relative_error(a, &numeric);
        assert!(rel < TOL, "{name}: relative error {rel:.3e}");
    }
}

#[test]
fn full_model_gradients_converge() {
    let mut model = GaitModel::new(ModelConfig::micro(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let case = ModelCase {
        clip: uniform(&[9, 16, 12], 0.2, 1.0, &mut rng),
        coef: uniform(&[4, 16], -1.0, 1.0, &mut rng),
    };
    let (_, analytic) = case.eval(&model, true);
    let ids: Vec<_> = model.params().ids().collect();
    let mut retried = 0usize;
    for (a, id) in analytic.iter().zip(ids) {
        let scale = a.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-8);
        let name = model.params().get(id).name.clone();
        for (j, &aj) in a.iter().enumerate() {
            let mut central = |h: f64| {
                let orig = model.params().get(id).value.data()[j];
                model.params_mut().value_mut(id).data_mut()[j] = orig + h;
                let up = case.eval(&model, false).0;
                model.params_mut().value_mut(id).data_mut()[j] = orig - h;
                let down = case.eval(&model, false).0;
                model.params_mut().value_mut(id).data_mut()[j] = orig;
                (up - down) / (2.0 * h)
            };
            let agrees = |n: f64| (aj - n).abs() < TOL * scale;
            if agrees(central(1e-3)) {
                continue;
            }
            retried += 1;
            let ok = [1e-5, 1e-6, 1e-7].into_iter().any(|h| agrees(central(h)));
            assert!(ok, "{name}[{j}]: analytic {aj:.6e} disagrees at every step");
        }
    }
    eprintln!("{retried} scalars needed a step below 1e-3");
}
