//! Training objective: Batch-All triplet loss over part descriptors plus
//! cross-entropy on the prior heads.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::autograd::{self, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_MARGIN: f64 = 0.25;
pub const DEFAULT_ALPHA: f64 = 0.2;

/// Euclidean distances `[B, B, P]` between the part vectors of `x: [B, P, D]`.
/// The gradient at a zero distance is taken as zero.
pub fn part_distances(x: Var<'_>) -> Result<Var<'_>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("part_distances on {s:?}")));
    }
    let (b, p, d) = (s[0], s[1], s[2]);
    let xv = x.value();
    let xd = xv.data();
    let row = move |i: usize, part: usize| (i * p + part) * d;
    let mut out = vec![0.0; b * b * p];
    for i in 0..b {
        for j in i + 1..b {
            for part in 0..p {
                let (ri, rj) = (row(i, part), row(j, part));
                let sq: f64 = (0..d).map(|k| (xd[ri + k] - xd[rj + k]).powi(2)).sum();
                let dist = sq.sqrt();
                out[(i * b + j) * p + part] = dist;
                out[(j * b + i) * p + part] = dist;
            }
        }
    }
    let dist = out.clone();
    let out = Tensor::new(&[b, b, p], out)?;
    Ok(x.tape().push(
        out,
        &[x],
        Box::new(move |g, _| {
            let gd = g.data();
            let xd = xv.data();
            let mut dx = Tensor::zeros(&s);
            let dd = dx.data_mut();
            for i in 0..b {
                for j in 0..b {
                    for part in 0..p {
                        let o = (i * b + j) * p + part;
                        if i == j || dist[o] == 0.0 || gd[o] == 0.0 {
                            continue;
                        }
                        let coef = gd[o] / dist[o];
                        let (ri, rj) = (row(i, part), row(j, part));
                        for k in 0..d {
                            let diff = coef * (xd[ri + k] - xd[rj + k]);
                            dd[ri + k] += diff;
                            dd[rj + k] -= diff;
                        }
                    }
                }
            }
            vec![Some(dx)]
        }),
    ))
}

/// Batch-All triplet loss on `dist: [B, B, P]`.
///
/// Per part, the hinge `max(d(a,p) - d(a,n) + m, 0)` is averaged over the
/// triplets where it is strictly positive; the result is averaged over
/// parts. Returns the loss and the fraction of active triplets.
pub fn triplet_loss_ba<'t>(dist: Var<'t>, labels: &[usize], margin: f64) -> Result<(Var<'t>, f64)> {
    let s = dist.shape();
    if s.len() != 3 || s[0] != s[1] || s[0] != labels.len() {
        return Err(Error::Shape(format!("triplet loss on {s:?} with {} labels", labels.len())));
    }
    let (b, p) = (s[0], s[2]);
    let dv = dist.value();
    let dd = dv.data();
    let at = |i: usize, j: usize, part: usize| (i * b + j) * p + part;
    let mut total_triplets = 0usize;
    let mut total_active = 0usize;
    let mut loss = 0.0;
    // (anchor-positive index, anchor-negative index, weight) of active terms
    let mut active: Vec<(usize, usize, f64)> = Vec::new();
    for part in 0..p {
        let mut sum = 0.0;
        let mut terms = Vec::new();
        for a in 0..b {
            for pos in 0..b {
                if pos == a || labels[pos] != labels[a] {
                    continue;
                }
                for neg in 0..b {
                    if labels[neg] == labels[a] {
                        continue;
                    }
                    total_triplets += 1;
                    let h = dd[at(a, pos, part)] - dd[at(a, neg, part)] + margin;
                    if h > 0.0 {
                        sum += h;
                        terms.push((at(a, pos, part), at(a, neg, part)));
                    }
                }
            }
        }
        if !terms.is_empty() {
            let n = terms.len() as f64;
            loss += sum / n;
            total_active += terms.len();
            active.extend(terms.into_iter().map(|(ap, an)| (ap, an, 1.0 / (n * p as f64))));
        }
    }
    if total_triplets == 0 {
        warn!("batch has no valid triplet");
    }
    let frac = if total_triplets == 0 { 0.0 } else { total_active as f64 / total_triplets as f64 };
    let out = Tensor::scalar(loss / p as f64);
    let v = dist.tape().push(
        out,
        &[dist],
        Box::new(move |g, _| {
            let g = g.item();
            let mut dx = Tensor::zeros(&s);
            let d = dx.data_mut();
            for &(ap, an, w) in &active {
                d[ap] += g * w;
                d[an] -= g * w;
            }
            vec![Some(dx)]
        }),
    );
    Ok((v, frac))
}

/// Mean softmax cross-entropy of `logits: [B, M]` against `labels`.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
        return Err(Error::Shape(format!("cross_entropy on {s:?} with {} labels", labels.len())));
    }
    let (b, m) = (s[0], s[1]);
    if let Some(&bad) = labels.iter().find(|&&l| l >= m) {
        return Err(Error::Data(format!("label {bad} outside [0, {m})")));
    }
    let lv = logits.value();
    let mut probs = Vec::with_capacity(b * m);
    let mut loss = 0.0;
    for (row, &y) in lv.data().chunks(m).zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let lse = max + z.ln();
        loss += lse - row[y];
        probs.extend(row.iter().map(|v| (v - lse).exp()));
    }
    let labels = labels.to_vec();
    Ok(logits.tape().push(
        Tensor::scalar(loss / b as f64),
        &[logits],
        Box::new(move |g, _| {
            let scale = g.item() / b as f64;
            let mut d = probs.clone();
            for (i, &y) in labels.iter().enumerate() {
                d[i * m + y] -= 1.0;
            }
            d.iter_mut().for_each(|v| *v *= scale);
            vec![Some(Tensor::new(&[b, m], d).unwrap())]
        }),
    ))
}

/// Cross-entropy summed over prior heads; `heads[h]` is `(logits [B, M], labels)`.
pub fn prior_ce<'t>(heads: &[(Var<'t>, Vec<usize>)]) -> Result<Option<Var<'t>>> {
    let mut acc: Option<Var<'t>> = None;
    for (logits, labels) in heads {
        let ce = cross_entropy(*logits, labels)?;
        acc = Some(match acc {
            Some(a) => autograd::add(a, ce)?,
            None => ce,
        });
    }
    Ok(acc)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub triplet: f64,
    pub ce: f64,
    pub active_frac: f64,
    pub prior_acc: f64,
}

/// `triplet + alpha * ce`, rejecting non-finite components.
pub fn total_loss(triplet: f64, ce: f64, alpha: f64) -> Result<f64> {
    let total = triplet + alpha * ce;
    if !total.is_finite() || !triplet.is_finite() || !ce.is_finite() {
        return Err(Error::Diverged(format!("loss diverged (triplet {triplet}, ce {ce})")));
    }
    Ok(total)
}

/// Full objective over a batch.
pub struct Objective<'t> {
    pub total: Var<'t>,
    pub report: LossReport,
}

/// Stacks per-sample `[P, D]` descriptors into `[B, P, D]`.
pub fn stack<'t>(items: &[Var<'t>]) -> Result<Var<'t>> {
    let rows = items
        .iter()
        .map(|v| {
            let mut s = v.shape();
            s.insert(0, 1);
            autograd::reshape(*v, &s)
        })
        .collect::<Result<Vec<_>>>()?;
    autograd::concat(&rows, 0)
}

/// Combines the triplet term over `descriptors` with the prior heads'
/// cross-entropy. `priors[h]` holds the per-sample logits, predictions and
/// labels of head `h`.
pub fn objective<'t>(
    descriptors: &[Var<'t>],
    subjects: &[usize],
    priors: &[(Vec<Var<'t>>, Vec<usize>, Vec<usize>)],
    margin: f64,
    alpha: f64,
) -> Result<Objective<'t>> {
    let dist = part_distances(stack(descriptors)?)?;
    let (triplet, active_frac) = triplet_loss_ba(dist, subjects, margin)?;
    let mut heads = Vec::with_capacity(priors.len());
    let (mut hits, mut seen) = (0usize, 0usize);
    for (logits, preds, labels) in priors {
        heads.push((stack(logits)?, labels.clone()));
        hits += preds.iter().zip(labels).filter(|(p, l)| p == l).count();
        seen += labels.len();
    }
    let ce = prior_ce(&heads)?;
    let ce_value = ce.map_or(0.0, |c| c.value().item());
    let triplet_value = triplet.value().item();
    let total_value = total_loss(triplet_value, ce_value, alpha)?;
    let total = match ce {
        Some(c) => autograd::add(triplet, autograd::scale(c, alpha))?,
        None => triplet,
    };
    debug_assert_eq!(total.value().item(), total_value);
    Ok(Objective {
        total,
        report: LossReport {
            total: total_value,
            triplet: triplet_value,
            ce: ce_value,
            active_frac,
            prior_acc: if seen == 0 { 0.0 } else { hits as f64 / seen as f64 },
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::check;
    use crate::autograd::Tape;
    use proptest::prelude::*;

    fn distances(x: &Tensor) -> Tensor {
        let tape = Tape::new();
        (*part_distances(tape.constant(x.clone())).unwrap().value()).clone()
    }

    fn brute_force(dist: &Tensor, labels: &[usize], m: f64) -> f64 {
        let (b, p) = (dist.dim(0), dist.dim(2));
        let mut total = 0.0;
        for part in 0..p {
            let mut terms = Vec::new();
            for a in 0..b {
                for q in 0..b {
                    for n in 0..b {
                        if a != q && labels[a] == labels[q] && labels[a] != labels[n] {
                            let h = (dist.at(&[a, q, part]) - dist.at(&[a, n, part]) + m).max(0.0);
                            if h > 0.0 {
                                terms.push(h);
                            }
                        }
                    }
                }
            }
            if !terms.is_empty() {
                total += terms.iter().sum::<f64>() / terms.len() as f64;
            }
        }
        total / p as f64
    }

    #[test]
    fn three_four_five() {
        let x = Tensor::new(&[2, 1, 2], vec![0.0, 0.0, 3.0, 4.0]).unwrap();
        let d = distances(&x);
        assert_eq!(d.at(&[0, 1, 0]), 5.0);
        assert_eq!(d.at(&[1, 0, 0]), 5.0);
        assert_eq!(d.at(&[0, 0, 0]), 0.0);
    }

    #[test]
    fn triplet_hand_cases() {
        let tape = Tape::new();
        // a=0, p=1 share a label; n=2. d(a,p) = d(a,n) = 1.
        let mut d = Tensor::zeros(&[3, 3, 1]);
        for (i, j) in [(0, 1), (1, 0), (0, 2), (2, 0), (1, 2), (2, 1)] {
            d.set(&[i, j, 0], 1.0);
        }
        let (loss, frac) = triplet_loss_ba(tape.constant(d.clone()), &[0, 0, 1], 0.25).unwrap();
        assert!((loss.value().item() - 0.25).abs() < 1e-15);
        assert_eq!(frac, 1.0);

        d.set(&[0, 1, 0], 0.1);
        d.set(&[1, 0, 0], 0.1);
        let (loss, frac) = triplet_loss_ba(tape.constant(d), &[0, 0, 1], 0.25).unwrap();
        assert_eq!(loss.value().item(), 0.0);
        assert_eq!(frac, 0.0);
    }

    #[test]
    fn no_valid_triplet_is_zero() {
        let tape = Tape::new();
        let (loss, frac) = triplet_loss_ba(tape.constant(Tensor::zeros(&[2, 2, 3])), &[0, 1], 0.25).unwrap();
        assert_eq!(loss.value().item(), 0.0);
        assert_eq!(frac, 0.0);
    }

    #[test]
    fn cross_entropy_closed_forms() {
        let tape = Tape::new();
        let uniform = tape.constant(Tensor::zeros(&[2, 3]));
        let ce = cross_entropy(uniform, &[0, 2]).unwrap().value().item();
        assert!((ce - 3f64.ln()).abs() < 1e-15);
        let sharp = tape.constant(Tensor::new(&[1, 3], vec![0.0, 200.0, 0.0]).unwrap());
        assert!(cross_entropy(sharp, &[1]).unwrap().value().item() < 1e-80);
        assert!(cross_entropy(sharp, &[3]).is_err());
    }

    #[test]
    fn total_is_exact_sum() {
        assert_eq!(total_loss(1.0, 0.5, 0.2).unwrap(), 1.0 + 0.2 * 0.5);
        assert_eq!(total_loss(0.7, 0.0, 0.2).unwrap(), 0.7);
        assert!(matches!(total_loss(f64::NAN, 0.0, 0.2), Err(Error::Diverged(_))));
    }

    #[test]
    fn gradients() {
        // distinct points so no distance sits at zero
        let x = Tensor::from_fn(&[4, 2, 3], |i| ((i * 37 % 23) as f64) / 7.0 - 1.5);
        check(&[x.clone()], |_, v| part_distances(v[0]).unwrap(), 1e-6, 1e-7);
        let labels = [0, 0, 1, 1];
        check(
            &[x],
            |_, v| triplet_loss_ba(part_distances(v[0]).unwrap(), &labels, 0.5).unwrap().0,
            1e-6,
            1e-6,
        );
        let logits = Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.37).sin());
        check(&[logits], |_, v| cross_entropy(v[0], &[1, 3, 0]).unwrap(), 1e-6, 1e-7);
    }

    fn batch() -> impl Strategy<Value = (Tensor, Vec<usize>)> {
        (2usize..=8, 1usize..=3, 1usize..=4).prop_flat_map(|(b, p, d)| {
            (
                proptest::collection::vec(-2.0f64..2.0, b * p * d),
                proptest::collection::vec(0usize..3, b),
            )
                .prop_map(move |(v, l)| (Tensor::new(&[b, p, d], v).unwrap(), l))
        })
    }

    proptest! {
        #[test]
        fn distances_match_double_loop((x, _) in batch()) {
            let d = distances(&x);
            let (b, p, dim) = (x.dim(0), x.dim(1), x.dim(2));
            for i in 0..b {
                for j in 0..b {
                    for part in 0..p {
                        let e: f64 = (0..dim).map(|k| (x.at(&[i, part, k]) - x.at(&[j, part, k])).powi(2)).sum::<f64>().sqrt();
                        prop_assert!((d.at(&[i, j, part]) - e).abs() < 1e-12);
                    }
                }
            }
        }

        #[test]
        fn triplet_matches_brute_force((x, labels) in batch(), m in 0.0f64..1.0) {
            let d = distances(&x);
            let tape = Tape::new();
            let (loss, frac) = triplet_loss_ba(tape.constant(d.clone()), &labels, m).unwrap();
            prop_assert!((loss.value().item() - brute_force(&d, &labels, m)).abs() < 1e-12);
            prop_assert!(loss.value().item() >= 0.0);
            prop_assert!((0.0..=1.0).contains(&frac));
        }

        #[test]
        fn triplet_invariant_to_relabeling((x, labels) in batch(), shift in 1usize..50) {
            let d = distances(&x);
            let relabeled: Vec<usize> = labels.iter().map(|l| (2 - l) * 7 + shift).collect();
            let tape = Tape::new();
            let (a, _) = triplet_loss_ba(tape.constant(d.clone()), &labels, 0.25).unwrap();
            let (b, _) = triplet_loss_ba(tape.constant(d), &relabeled, 0.25).unwrap();
            prop_assert_eq!(a.value().item(), b.value().item());
        }

        #[test]
        fn cross_entropy_matches_log_sum_exp(v in proptest::collection::vec(-30.0f64..30.0, 6), y in 0usize..3) {
            let tape = Tape::new();
            let logits = Tensor::new(&[2, 3], v.clone()).unwrap();
            let ce = cross_entropy(tape.constant(logits), &[y, 2 - y]).unwrap().value().item();
            let lse = |r: &[f64]| r.iter().map(|x| x.exp()).sum::<f64>().ln();
            let expected = ((lse(&v[..3]) - v[y]) + (lse(&v[3..]) - v[3 + 2 - y])) / 2.0;
            prop_assert!((ce - expected).abs() < 1e-8);
            prop_assert!(ce >= 0.0);
        }
    }
}
