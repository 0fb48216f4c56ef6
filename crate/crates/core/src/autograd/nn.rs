//! Dense layers, normalization and attention.

use super::Var;
use crate::error::{Error, Result};
use crate::linalg::{gemm, MatMut, MatRef};
use crate::tensor::Tensor;

/// `x[..., cin] @ w[cin, cout] + b[cout]`.
pub fn linear<'t>(x: Var<'t>, w: Var<'t>, bias: Option<Var<'t>>) -> Result<Var<'t>> {
    let xs = x.shape();
    let ws = w.shape();
    let cin = *xs.last().unwrap_or(&0);
    if ws.len() != 2 || ws[0] != cin {
        return Err(Error::Shape(format!("linear {xs:?} with weight {ws:?}")));
    }
    let cout = ws[1];
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::Shape(format!("linear bias {:?}", b.shape())));
        }
    }
    let rows = x.value().numel() / cin;
    let xv = x.value();
    let wv = w.value();
    let mut out = vec![0.0; rows * cout];
    if let Some(b) = bias {
        let bv = b.value();
        for row in out.chunks_mut(cout) {
            row.copy_from_slice(bv.data());
        }
    }
    gemm(
        1.0,
        MatRef::dense(xv.data(), rows, cin),
        MatRef::dense(wv.data(), cin, cout),
        1.0,
        MatMut::dense(&mut out, rows, cout),
    );
    let mut out_shape = xs.clone();
    *out_shape.last_mut().unwrap() = cout;
    let out = Tensor::new(&out_shape, out)?;
    let mut parents = vec![x, w];
    parents.extend(bias);
    Ok(x.tape().push(
        out,
        &parents,
        Box::new(move |g, needs| {
            let gd = g.data();
            let dx = needs[0].then(|| {
                let mut d = vec![0.0; rows * cin];
                gemm(
                    1.0,
                    MatRef::dense(gd, rows, cout),
                    MatRef::dense(wv.data(), cin, cout).t(),
                    0.0,
                    MatMut::dense(&mut d, rows, cin),
                );
                Tensor::new(xv.shape(), d).unwrap()
            });
            let dw = needs[1].then(|| {
                let mut d = vec![0.0; cin * cout];
                gemm(
                    1.0,
                    MatRef::dense(xv.data(), rows, cin).t(),
                    MatRef::dense(gd, rows, cout),
                    0.0,
                    MatMut::dense(&mut d, cin, cout),
                );
                Tensor::new(&[cin, cout], d).unwrap()
            });
            let mut grads = vec![dx, dw];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| {
                    let mut acc = vec![0.0; cout];
                    for row in gd.chunks(cout) {
                        for (a, v) in acc.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    Tensor::new(&[cout], acc).unwrap()
                }));
            }
            grads
        }),
    ))
}

/// Independent linear map per part: `x[p] @ w[p]` for `x: [P, Cin]`,
/// `w: [P, Cin, Cout]`.
pub fn part_linear<'t>(x: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 2 || ws.len() != 3 || ws[0] != xs[0] || ws[1] != xs[1] {
        return Err(Error::Shape(format!("part_linear {xs:?} with {ws:?}")));
    }
    let (p, cin, cout) = (ws[0], ws[1], ws[2]);
    let xv = x.value();
    let wv = w.value();
    let mut out = vec![0.0; p * cout];
    for pi in 0..p {
        gemm(
            1.0,
            MatRef::dense(&xv.data()[pi * cin..(pi + 1) * cin], 1, cin),
            MatRef::dense(&wv.data()[pi * cin * cout..(pi + 1) * cin * cout], cin, cout),
            0.0,
            MatMut::dense(&mut out[pi * cout..(pi + 1) * cout], 1, cout),
        );
    }
    let out = Tensor::new(&[p, cout], out)?;
    Ok(x.tape().push(
        out,
        &[x, w],
        Box::new(move |g, needs| {
            let gd = g.data();
            let mut dx = needs[0].then(|| vec![0.0; p * cin]);
            let mut dw = needs[1].then(|| vec![0.0; p * cin * cout]);
            for pi in 0..p {
                let gp = &gd[pi * cout..(pi + 1) * cout];
                let xp = &xv.data()[pi * cin..(pi + 1) * cin];
                let wp = &wv.data()[pi * cin * cout..(pi + 1) * cin * cout];
                if let Some(dx) = dx.as_mut() {
                    for (i, d) in dx[pi * cin..(pi + 1) * cin].iter_mut().enumerate() {
                        *d = wp[i * cout..(i + 1) * cout].iter().zip(gp).map(|(a, b)| a * b).sum();
                    }
                }
                if let Some(dw) = dw.as_mut() {
                    let dwp = &mut dw[pi * cin * cout..(pi + 1) * cin * cout];
                    for i in 0..cin {
                        for (d, gv) in dwp[i * cout..(i + 1) * cout].iter_mut().zip(gp) {
                            *d = xp[i] * gv;
                        }
                    }
                }
            }
            vec![
                dx.map(|d| Tensor::new(&[p, cin], d).unwrap()),
                dw.map(|d| Tensor::new(&[p, cin, cout], d).unwrap()),
            ]
        }),
    ))
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer normalization over the last axis with affine `gamma`, `beta`.
pub fn layer_norm<'t>(x: Var<'t>, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
    let xs = x.shape();
    let c = *xs.last().unwrap_or(&0);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::Shape(format!("layer_norm {xs:?} gamma {:?}", gamma.shape())));
    }
    let xv = x.value();
    let gv = gamma.value();
    let bv = beta.value();
    let rows = xv.numel() / c;
    let mut xhat = vec![0.0; rows * c];
    let mut inv_std = vec![0.0; rows];
    let mut out = vec![0.0; rows * c];
    for r in 0..rows {
        let row = &xv.data()[r * c..(r + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std[r] = is;
        for i in 0..c {
            let h = (row[i] - mean) * is;
            xhat[r * c + i] = h;
            out[r * c + i] = h * gv.data()[i] + bv.data()[i];
        }
    }
    let out = Tensor::new(&xs, out)?;
    Ok(x.tape().push(
        out,
        &[x, gamma, beta],
        Box::new(move |g, needs| {
            let gd = g.data();
            let mut dx = vec![0.0; rows * c];
            let mut dg = vec![0.0; c];
            let mut db = vec![0.0; c];
            for r in 0..rows {
                let gr = &gd[r * c..(r + 1) * c];
                let hr = &xhat[r * c..(r + 1) * c];
                let mut sum_dh = 0.0;
                let mut sum_dh_h = 0.0;
                for i in 0..c {
                    dg[i] += gr[i] * hr[i];
                    db[i] += gr[i];
                    let dh = gr[i] * gv.data()[i];
                    sum_dh += dh;
                    sum_dh_h += dh * hr[i];
                }
                if needs[0] {
                    for i in 0..c {
                        let dh = gr[i] * gv.data()[i];
                        dx[r * c + i] =
                            inv_std[r] * (dh - sum_dh / c as f64 - hr[i] * sum_dh_h / c as f64);
                    }
                }
            }
            vec![
                needs[0].then(|| Tensor::new(&xs, dx).unwrap()),
                needs[1].then(|| Tensor::new(&[c], dg).unwrap()),
                needs[2].then(|| Tensor::new(&[c], db).unwrap()),
            ]
        }),
    ))
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Tanh-approximated GELU.
pub fn gelu(x: Var<'_>) -> Var<'_> {
    let xv = x.value();
    let out = xv.map(|v| 0.5 * v * (1.0 + (GELU_K * (v + 0.044715 * v * v * v)).tanh()));
    x.tape().push(
        out,
        &[x],
        Box::new(move |g, _| {
            vec![Some(g.zip_map(&xv, |g, v| {
                let u = GELU_K * (v + 0.044715 * v * v * v);
                let th = u.tanh();
                let du = GELU_K * (1.0 + 3.0 * 0.044715 * v * v);
                g * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du)
            }))]
        }),
    )
}

/// Scaled dot-product attention with `heads` heads over `q, k, v: [B, S, D]`.
/// Returns the concatenated head outputs `[B, S, D]`.
pub fn multi_head_attention<'t>(q: Var<'t>, k: Var<'t>, v: Var<'t>, heads: usize) -> Result<Var<'t>> {
    let s = q.shape();
    if s.len() != 3 || k.shape() != s || v.shape() != s || heads == 0 || s[2] % heads != 0 {
        return Err(Error::Shape(format!(
            "attention q {s:?} k {:?} v {:?} with {heads} heads",
            k.shape(),
            v.shape()
        )));
    }
    let (b, len, d) = (s[0], s[1], s[2]);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (qv, kv, vv) = (q.value(), k.value(), v.value());
    // probs[(bi * heads + h) * len * len ..]
    let mut probs = vec![0.0; b * heads * len * len];
    let mut out = vec![0.0; b * len * d];
    let geo = HeadGeometry { len, d, dh };

    for bi in 0..b {
        for h in 0..heads {
            let pr = &mut probs[(bi * heads + h) * len * len..][..len * len];
            gemm(
                scale,
                geo.view(qv.data(), bi, h),
                geo.view(kv.data(), bi, h).t(),
                0.0,
                MatMut::dense(pr, len, len),
            );
            for row in pr.chunks_mut(len) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - m).exp();
                    z += *v;
                }
                row.iter_mut().for_each(|v| *v /= z);
            }
            gemm(
                1.0,
                MatRef::dense(pr, len, len),
                geo.view(vv.data(), bi, h),
                0.0,
                geo.view_mut(&mut out, bi, h),
            );
        }
    }
    let out = Tensor::new(&s, out)?;
    Ok(q.tape().push(
        out,
        &[q, k, v],
        Box::new(move |g, _| {
            let gd = g.data();
            let mut dq = vec![0.0; b * len * d];
            let mut dk = vec![0.0; b * len * d];
            let mut dv = vec![0.0; b * len * d];
            let mut dp = vec![0.0; len * len];
            for bi in 0..b {
                for h in 0..heads {
                    let pr = &probs[(bi * heads + h) * len * len..][..len * len];
                    let gview = geo.view(gd, bi, h);
                    // dV = P^T dO
                    gemm(
                        1.0,
                        MatRef::dense(pr, len, len).t(),
                        gview,
                        0.0,
                        geo.view_mut(&mut dv, bi, h),
                    );
                    // dP = dO V^T
                    gemm(1.0, gview, geo.view(vv.data(), bi, h).t(), 0.0, MatMut::dense(&mut dp, len, len));
                    // dS = P * (dP - rowsum(dP * P))
                    for (prow, drow) in pr.chunks(len).zip(dp.chunks_mut(len)) {
                        let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                        for (dv_, &pv) in drow.iter_mut().zip(prow) {
                            *dv_ = pv * (*dv_ - dot);
                        }
                    }
                    gemm(
                        scale,
                        MatRef::dense(&dp, len, len),
                        geo.view(kv.data(), bi, h),
                        0.0,
                        geo.view_mut(&mut dq, bi, h),
                    );
                    gemm(
                        scale,
                        MatRef::dense(&dp, len, len).t(),
                        geo.view(qv.data(), bi, h),
                        0.0,
                        geo.view_mut(&mut dk, bi, h),
                    );
                }
            }
            vec![
                Some(Tensor::new(&s, dq).unwrap()),
                Some(Tensor::new(&s, dk).unwrap()),
                Some(Tensor::new(&s, dv).unwrap()),
            ]
        }),
    ))
}

/// Layout of one head's `[len, dh]` slice inside a `[B, len, d]` array.
#[derive(Clone, Copy)]
struct HeadGeometry {
    len: usize,
    d: usize,
    dh: usize,
}

impl HeadGeometry {
    fn view(self, data: &[f64], bi: usize, h: usize) -> MatRef<'_> {
        MatRef {
            data: &data[bi * self.len * self.d + h * self.dh..],
            rows: self.len,
            cols: self.dh,
            row_stride: self.d,
            col_stride: 1,
        }
    }

    fn view_mut(self, data: &mut [f64], bi: usize, h: usize) -> MatMut<'_> {
        MatMut {
            data: &mut data[bi * self.len * self.d + h * self.dh..],
            rows: self.len,
            cols: self.dh,
            row_stride: self.d,
            col_stride: 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::check;
    use super::*;

    fn wave(shape: &[usize], phase: f64) -> Tensor {
        Tensor::from_fn(shape, |i| (i as f64 * 0.731 + phase).sin())
    }

    #[test]
    fn dense_layer_gradients() {
        check(
            &[wave(&[2, 3, 4], 0.1), wave(&[4, 5], 0.2), wave(&[5], 0.3)],
            |_, v| linear(v[0], v[1], Some(v[2])).unwrap(),
            1e-6,
            1e-7,
        );
        check(
            &[wave(&[3, 4], 0.4), wave(&[3, 4, 2], 0.5)],
            |_, v| part_linear(v[0], v[1]).unwrap(),
            1e-6,
            1e-7,
        );
    }

    #[test]
    fn norm_and_activation_gradients() {
        check(
            &[wave(&[3, 6], 0.6), wave(&[6], 0.7), wave(&[6], 0.8)],
            |_, v| gelu(layer_norm(v[0], v[1], v[2]).unwrap()),
            1e-6,
            1e-6,
        );
    }

    #[test]
    fn attention_gradients() {
        check(
            &[wave(&[2, 3, 4], 0.9), wave(&[2, 3, 4], 1.0), wave(&[2, 3, 4], 1.1)],
            |_, v| multi_head_attention(v[0], v[1], v[2], 2).unwrap(),
            1e-6,
            1e-7,
        );
    }

    #[test]
    fn attention_rows_are_convex_combinations() {
        let tape = super::super::Tape::new();
        let q = tape.constant(wave(&[1, 4, 2], 0.0));
        let k = tape.constant(wave(&[1, 4, 2], 1.0));
        let v = tape.constant(Tensor::full(&[1, 4, 2], 3.0));
        let o = multi_head_attention(q, k, v, 1).unwrap();
        assert!(o.value().data().iter().all(|x| (x - 3.0).abs() < 1e-12));
    }
}
