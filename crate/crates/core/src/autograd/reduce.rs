//! Pooling and reductions.
//!
//! Max-type reductions route the gradient to the first maximal element
//! (lowest index), matching the forward tie-break.

use super::Var;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// 2x2 max pooling over the spatial axes of `[C, T, H, W]` (odd edges dropped).
pub fn max_pool_hw(x: Var<'_>) -> Result<Var<'_>> {
    let s = x.shape();
    if s.len() != 4 || s[2] < 2 || s[3] < 2 {
        return Err(Error::Shape(format!("max_pool_hw on {s:?}")));
    }
    let (c, t, h, w) = (s[0], s[1], s[2], s[3]);
    let (ho, wo) = (h / 2, w / 2);
    let xv = x.value();
    let xd = xv.data();
    let mut out = Vec::with_capacity(c * t * ho * wo);
    let mut arg = Vec::with_capacity(c * t * ho * wo);
    for plane in 0..c * t {
        let base = plane * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                out.push(xd[best]);
                arg.push(best);
            }
        }
    }
    let out = Tensor::new(&[c, t, ho, wo], out)?;
    Ok(x.tape().push(
        out,
        &[x],
        Box::new(move |g, _| vec![Some(scatter(&s, &arg, g.data()))]),
    ))
}

fn scatter(shape: &[usize], arg: &[usize], g: &[f64]) -> Tensor {
    let mut d = Tensor::zeros(shape);
    let dd = d.data_mut();
    for (&a, &v) in arg.iter().zip(g) {
        dd[a] += v;
    }
    d
}

/// Horizontal pooling: `[C, T, H, W]` into `[P, T, C]` tokens, each the
/// strip max plus strip mean over `H / P` rows and all columns.
pub fn horizontal_pool(x: Var<'_>, parts: usize) -> Result<Var<'_>> {
    let s = x.shape();
    if s.len() != 4 || parts == 0 || s[2] % parts != 0 {
        return Err(Error::Shape(format!(
            "horizontal pooling of {s:?} into {parts} parts: height not divisible"
        )));
    }
    let (c, t, h, w) = (s[0], s[1], s[2], s[3]);
    let rows = h / parts;
    let n = (rows * w) as f64;
    let xv = x.value();
    let xd = xv.data();
    let mut out = vec![0.0; parts * t * c];
    let mut arg = vec![0usize; parts * t * c];
    for ci in 0..c {
        for ti in 0..t {
            for p in 0..parts {
                let start = ((ci * t + ti) * h + p * rows) * w;
                let strip = &xd[start..start + rows * w];
                let mut best = 0;
                let mut sum = 0.0;
                for (k, &v) in strip.iter().enumerate() {
                    sum += v;
                    if v > strip[best] {
                        best = k;
                    }
                }
                let o = (p * t + ti) * c + ci;
                out[o] = strip[best] + sum / n;
                arg[o] = start + best;
            }
        }
    }
    let out = Tensor::new(&[parts, t, c], out)?;
    Ok(x.tape().push(
        out,
        &[x],
        Box::new(move |g, _| {
            let gd = g.data();
            let mut d = Tensor::zeros(&s);
            let dd = d.data_mut();
            for ci in 0..c {
                for ti in 0..t {
                    for p in 0..parts {
                        let o = (p * t + ti) * c + ci;
                        let start = ((ci * t + ti) * h + p * rows) * w;
                        let share = gd[o] / n;
                        dd[start..start + rows * w].iter_mut().for_each(|v| *v += share);
                        dd[arg[o]] += gd[o];
                    }
                }
            }
            vec![Some(d)]
        }),
    ))
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

/// Maximum over `axis`, which is removed from the shape.
pub fn max_axis(x: Var<'_>, axis: usize) -> Result<Var<'_>> {
    let s = x.shape();
    if axis >= s.len() || s[axis] == 0 {
        return Err(Error::Shape(format!("max over axis {axis} of {s:?}")));
    }
    let (outer, n, inner) = axis_split(&s, axis);
    let xv = x.value();
    let xd = xv.data();
    let mut out = Vec::with_capacity(outer * inner);
    let mut arg = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let mut best = o * n * inner + i;
            for k in 1..n {
                let idx = (o * n + k) * inner + i;
                if xd[idx] > xd[best] {
                    best = idx;
                }
            }
            out.push(xd[best]);
            arg.push(best);
        }
    }
    let mut out_shape = s.clone();
    out_shape.remove(axis);
    let out = Tensor::new(&out_shape, out)?;
    Ok(x.tape().push(
        out,
        &[x],
        Box::new(move |g, _| vec![Some(scatter(&s, &arg, g.data()))]),
    ))
}

/// Mean over `axis`, which is removed from the shape.
pub fn mean_axis(x: Var<'_>, axis: usize) -> Result<Var<'_>> {
    let s = x.shape();
    if axis >= s.len() || s[axis] == 0 {
        return Err(Error::Shape(format!("mean over axis {axis} of {s:?}")));
    }
    let (outer, n, inner) = axis_split(&s, axis);
    let xv = x.value();
    let xd = xv.data();
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for k in 0..n {
            for i in 0..inner {
                out[o * inner + i] += xd[(o * n + k) * inner + i];
            }
        }
    }
    out.iter_mut().for_each(|v| *v /= n as f64);
    let mut out_shape = s.clone();
    out_shape.remove(axis);
    let out = Tensor::new(&out_shape, out)?;
    Ok(x.tape().push(
        out,
        &[x],
        Box::new(move |g, _| {
            let gd = g.data();
            let mut d = Tensor::zeros(&s);
            let dd = d.data_mut();
            for o in 0..outer {
                for k in 0..n {
                    for i in 0..inner {
                        dd[(o * n + k) * inner + i] = gd[o * inner + i] / n as f64;
                    }
                }
            }
            vec![Some(d)]
        }),
    ))
}

/// Sliding maximum along time of `[P, T, C]` over frames `[t - r, t + r]`.
/// Edge replication is the same as clipping the window to valid frames.
pub fn window_max(x: Var<'_>, radius: usize) -> Result<Var<'_>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(Error::Shape(format!("window_max on {s:?}")));
    }
    let (p, t, c) = (s[0], s[1], s[2]);
    let xv = x.value();
    let xd = xv.data();
    let mut out = Vec::with_capacity(xd.len());
    let mut arg = Vec::with_capacity(xd.len());
    for pi in 0..p {
        for ti in 0..t {
            let lo = ti.saturating_sub(radius);
            let hi = (ti + radius).min(t - 1);
            for ci in 0..c {
                let mut best = (pi * t + lo) * c + ci;
                for tj in lo + 1..=hi {
                    let idx = (pi * t + tj) * c + ci;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                out.push(xd[best]);
                arg.push(best);
            }
        }
    }
    let out = Tensor::new(&s, out)?;
    Ok(x.tape().push(
        out,
        &[x],
        Box::new(move |g, _| vec![Some(scatter(&s, &arg, g.data()))]),
    ))
}

/// Floor applied to magnitudes before raising to the power `p`.
pub const GEM_EPS: f64 = 1e-6;

/// Generalized mean over the last axis of `x: [C, N]` with learnable
/// exponent `p: [1]`: `(mean_j max(|x_j|, eps)^p)^(1/p)`.
pub fn gem_pool<'t>(x: Var<'t>, p: Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    if s.len() != 2 || s[1] == 0 || p.shape() != [1] {
        return Err(Error::Shape(format!("gem_pool of {s:?} with p {:?}", p.shape())));
    }
    let (c, n) = (s[0], s[1]);
    let xv = x.value();
    let pe = p.value().item();
    let mut means = Vec::with_capacity(c);
    let mut out = Vec::with_capacity(c);
    for row in xv.data().chunks(n) {
        let m = row.iter().map(|v| v.abs().max(GEM_EPS).powf(pe)).sum::<f64>() / n as f64;
        means.push(m);
        out.push(m.powf(1.0 / pe));
    }
    let y = out.clone();
    let out = Tensor::new(&[c], out)?;
    Ok(x.tape().push(
        out,
        &[x, p],
        Box::new(move |g, needs| {
            let gd = g.data();
            let mut dx = needs[0].then(|| Tensor::zeros(&s));
            let mut dp = 0.0;
            for ci in 0..c {
                let row = &xv.data()[ci * n..(ci + 1) * n];
                let m = means[ci];
                let coef = gd[ci] * m.powf(1.0 / pe - 1.0) / n as f64;
                if let Some(dx) = dx.as_mut() {
                    let d = &mut dx.data_mut()[ci * n..(ci + 1) * n];
                    for (dv, &v) in d.iter_mut().zip(row) {
                        if v.abs() > GEM_EPS {
                            *dv = coef * v.abs().powf(pe - 1.0) * v.signum();
                        }
                    }
                }
                if needs[1] {
                    let s_log = row
                        .iter()
                        .map(|v| {
                            let u = v.abs().max(GEM_EPS);
                            u.powf(pe) * u.ln()
                        })
                        .sum::<f64>()
                        / n as f64;
                    dp += gd[ci] * y[ci] * (-m.ln() / (pe * pe) + s_log / (pe * m));
                }
            }
            vec![dx, needs[1].then(|| Tensor::scalar(dp))]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::check;
    use super::super::Tape;
    use super::*;

    fn distinct(shape: &[usize], seed: usize) -> Tensor {
        // well-separated values so max gradients are stable under FD steps
        let n: usize = shape.iter().product();
        Tensor::from_fn(shape, |i| {
            let k = (i * 7 + seed * 13) % (2 * n + 1);
            k as f64 / n as f64 - 1.0 + 0.01 * seed as f64
        })
    }

    #[test]
    fn pooling_gradients() {
        check(&[distinct(&[2, 2, 4, 5], 1)], |_, v| max_pool_hw(v[0]).unwrap(), 1e-6, 1e-7);
        check(&[distinct(&[3, 2, 4, 2], 2)], |_, v| horizontal_pool(v[0], 2).unwrap(), 1e-6, 1e-7);
        check(&[distinct(&[2, 5, 3], 3)], |_, v| max_axis(v[0], 1).unwrap(), 1e-6, 1e-7);
        check(&[distinct(&[2, 5, 3], 4)], |_, v| mean_axis(v[0], 1).unwrap(), 1e-6, 1e-7);
        check(&[distinct(&[2, 6, 3], 5)], |_, v| window_max(v[0], 1).unwrap(), 1e-6, 1e-7);
    }

    #[test]
    fn gem_gradients_including_exponent() {
        let x = distinct(&[3, 6], 6).map(|v| v + 0.05);
        check(&[x, Tensor::scalar(2.7)], |_, v| gem_pool(v[0], v[1]).unwrap(), 1e-6, 1e-6);
    }

    #[test]
    fn gem_with_unit_exponent_is_mean_of_magnitudes() {
        let tape = Tape::new();
        let x = Tensor::from_fn(&[2, 4], |i| i as f64 * 0.5 + 0.25);
        let y = gem_pool(tape.constant(x.clone()), tape.constant(Tensor::scalar(1.0))).unwrap();
        let y = y.value();
        assert!((y.data()[0] - (0.25 + 0.75 + 1.25 + 1.75) / 4.0).abs() < 1e-12);
    }
}
