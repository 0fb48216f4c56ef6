//! Convolutions: 3-D over `[C, T, H, W]` volumes and 1-D over the time
//! axis of `[P, T, C]` part tokens.

use super::Var;
use crate::error::{Error, Result};
use crate::linalg::{gemm, MatMut, MatRef};
use crate::tensor::Tensor;

/// Stride and zero padding of a 3-D convolution. Spatial stride is always 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub stride_t: usize,
    pub pad: [usize; 3],
}

impl Conv3dSpec {
    /// Stride 1 with "same" zero padding for an odd kernel.
    pub fn same(kernel: [usize; 3]) -> Self {
        Self {
            stride_t: 1,
            pad: [kernel[0] / 2, kernel[1] / 2, kernel[2] / 2],
        }
    }
}

/// im2col working-set bound, in elements.
const COL_BUDGET: usize = 1 << 21;

#[derive(Clone, Copy)]
struct Geometry {
    cin: usize,
    t: usize,
    h: usize,
    w: usize,
    k: [usize; 3],
    stride_t: usize,
    pad: [usize; 3],
    to: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.cin * self.k[0] * self.k[1] * self.k[2]
    }

    fn plane(&self) -> usize {
        self.ho * self.wo
    }

    fn chunk_frames(&self) -> usize {
        (COL_BUDGET / (self.rows() * self.plane()).max(1)).clamp(1, self.to)
    }

    /// Valid output-column range `[lo, hi)` for width offset `dw`.
    fn w_range(&self, dw: usize) -> (usize, usize) {
        let lo = self.pad[2].saturating_sub(dw).min(self.wo);
        let hi = (self.w + self.pad[2]).saturating_sub(dw).min(self.wo).max(lo);
        (lo, hi)
    }

    fn source(&self, to: usize, dt: usize, ho: usize, dh: usize) -> Option<(usize, usize)> {
        let ti = (to * self.stride_t + dt).checked_sub(self.pad[0])?;
        let hi = (ho + dh).checked_sub(self.pad[1])?;
        (ti < self.t && hi < self.h).then_some((ti, hi))
    }

    fn im2col(&self, x: &[f64], t0: usize, t1: usize, col: &mut [f64]) {
        let ncols = (t1 - t0) * self.plane();
        let [kt, kh, kw] = self.k;
        let mut r = 0;
        for ci in 0..self.cin {
            let xc = &x[ci * self.t * self.h * self.w..(ci + 1) * self.t * self.h * self.w];
            for dt in 0..kt {
                for dh in 0..kh {
                    for dw in 0..kw {
                        let row = &mut col[r * ncols..(r + 1) * ncols];
                        let (lo, hi) = self.w_range(dw);
                        for (j, to) in (t0..t1).enumerate() {
                            for ho in 0..self.ho {
                                let dst = &mut row[(j * self.ho + ho) * self.wo..][..self.wo];
                                match self.source(to, dt, ho, dh) {
                                    None => dst.fill(0.0),
                                    Some((ti, hi_)) => {
                                        dst[..lo].fill(0.0);
                                        dst[hi..].fill(0.0);
                                        let base = (ti * self.h + hi_) * self.w + lo + dw - self.pad[2];
                                        dst[lo..hi].copy_from_slice(&xc[base..base + hi - lo]);
                                    }
                                }
                            }
                        }
                        r += 1;
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f64], t0: usize, t1: usize, dx: &mut [f64]) {
        let ncols = (t1 - t0) * self.plane();
        let [kt, kh, kw] = self.k;
        let mut r = 0;
        for ci in 0..self.cin {
            let vol = self.t * self.h * self.w;
            let dxc = &mut dx[ci * vol..(ci + 1) * vol];
            for dt in 0..kt {
                for dh in 0..kh {
                    for dw in 0..kw {
                        let row = &col[r * ncols..(r + 1) * ncols];
                        let (lo, hi) = self.w_range(dw);
                        for (j, to) in (t0..t1).enumerate() {
                            for ho in 0..self.ho {
                                if let Some((ti, hi_)) = self.source(to, dt, ho, dh) {
                                    let src = &row[(j * self.ho + ho) * self.wo..][..self.wo];
                                    let base = (ti * self.h + hi_) * self.w + lo + dw - self.pad[2];
                                    for (d, s) in dxc[base..base + hi - lo].iter_mut().zip(&src[lo..hi]) {
                                        *d += s;
                                    }
                                }
                            }
                        }
                        r += 1;
                    }
                }
            }
        }
    }
}

/// 3-D convolution of `x: [Cin, T, H, W]` with `w: [Cout, Cin, kt, kh, kw]`.
pub fn conv3d<'t>(x: Var<'t>, w: Var<'t>, bias: Option<Var<'t>>, spec: Conv3dSpec) -> Result<Var<'t>> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 4 || ws.len() != 5 || ws[1] != xs[0] {
        return Err(Error::Shape(format!("conv3d input {xs:?} with kernel {ws:?}")));
    }
    let cout = ws[0];
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::Shape(format!("conv3d bias {:?} for {cout} outputs", b.shape())));
        }
    }
    let k = [ws[2], ws[3], ws[4]];
    let span = |n: usize, p: usize, kk: usize| (n + 2 * p).checked_sub(kk);
    let (Some(tt), Some(hh), Some(ww)) = (
        span(xs[1], spec.pad[0], k[0]),
        span(xs[2], spec.pad[1], k[1]),
        span(xs[3], spec.pad[2], k[2]),
    ) else {
        return Err(Error::Shape(format!("conv3d kernel {k:?} larger than padded input {xs:?}")));
    };
    let g = Geometry {
        cin: xs[0],
        t: xs[1],
        h: xs[2],
        w: xs[3],
        k,
        stride_t: spec.stride_t,
        pad: spec.pad,
        to: tt / spec.stride_t + 1,
        ho: hh + 1,
        wo: ww + 1,
    };
    let xv = x.value();
    let wv = w.value();
    let rows = g.rows();
    let out_len = g.to * g.plane();
    let mut out = vec![0.0; cout * out_len];
    let step = g.chunk_frames();
    let mut col = vec![0.0; rows * step * g.plane()];
    for t0 in (0..g.to).step_by(step) {
        let t1 = (t0 + step).min(g.to);
        let ncols = (t1 - t0) * g.plane();
        g.im2col(xv.data(), t0, t1, &mut col);
        gemm(
            1.0,
            MatRef::dense(wv.data(), cout, rows),
            MatRef::dense(&col[..rows * ncols], rows, ncols),
            0.0,
            MatMut {
                data: &mut out[t0 * g.plane()..],
                rows: cout,
                cols: ncols,
                row_stride: out_len,
                col_stride: 1,
            },
        );
    }
    if let Some(b) = bias {
        let bv = b.value();
        for (co, chunk) in out.chunks_mut(out_len).enumerate() {
            let bc = bv.data()[co];
            chunk.iter_mut().for_each(|v| *v += bc);
        }
    }
    let out = Tensor::new(&[cout, g.to, g.ho, g.wo], out)?;
    let mut parents = vec![x, w];
    parents.extend(bias);
    Ok(x.tape().push(
        out,
        &parents,
        Box::new(move |gy, needs| {
            let gd = gy.data();
            let mut dx = needs[0].then(|| vec![0.0; xv.numel()]);
            let mut dw = needs[1].then(|| vec![0.0; wv.numel()]);
            let mut col = vec![0.0; rows * step * g.plane()];
            let mut dcol = vec![0.0; rows * step * g.plane()];
            for t0 in (0..g.to).step_by(step) {
                let t1 = (t0 + step).min(g.to);
                let ncols = (t1 - t0) * g.plane();
                let gy_chunk = MatRef {
                    data: &gd[t0 * g.plane()..],
                    rows: cout,
                    cols: ncols,
                    row_stride: out_len,
                    col_stride: 1,
                };
                if let Some(dw) = dw.as_mut() {
                    g.im2col(xv.data(), t0, t1, &mut col);
                    gemm(
                        1.0,
                        gy_chunk,
                        MatRef::dense(&col[..rows * ncols], rows, ncols).t(),
                        1.0,
                        MatMut::dense(dw, cout, rows),
                    );
                }
                if let Some(dx) = dx.as_mut() {
                    gemm(
                        1.0,
                        MatRef::dense(wv.data(), cout, rows).t(),
                        gy_chunk,
                        0.0,
                        MatMut::dense(&mut dcol[..rows * ncols], rows, ncols),
                    );
                    g.col2im(&dcol[..rows * ncols], t0, t1, dx);
                }
            }
            let mut grads = vec![
                dx.map(|d| Tensor::new(xv.shape(), d).unwrap()),
                dw.map(|d| Tensor::new(wv.shape(), d).unwrap()),
            ];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| {
                    let sums = gd.chunks(out_len).map(|c| c.iter().sum()).collect();
                    Tensor::new(&[cout], sums).unwrap()
                }));
            }
            grads
        }),
    ))
}

/// Boundary handling along time for [`temporal_conv`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemporalPadding {
    Zeros,
    Replicate,
}

impl TemporalPadding {
    fn source(self, t: isize, len: usize) -> Option<usize> {
        match self {
            Self::Zeros => (t >= 0 && (t as usize) < len).then_some(t as usize),
            Self::Replicate => Some(t.clamp(0, len as isize - 1) as usize),
        }
    }
}

/// Same-length 1-D convolution along time of `x: [P, T, Cin]`.
///
/// `w` is `[Cout, Cin, K]` for a dense convolution or `[C, 1, K]` for a
/// channel-grouped one (one kernel per channel, `Cin == Cout == C`).
pub fn temporal_conv<'t>(
    x: Var<'t>,
    w: Var<'t>,
    bias: Option<Var<'t>>,
    padding: TemporalPadding,
) -> Result<Var<'t>> {
    let xs = x.shape();
    let ws = w.shape();
    if xs.len() != 3 || ws.len() != 3 || ws[2] % 2 == 0 {
        return Err(Error::Shape(format!("temporal_conv input {xs:?} kernel {ws:?}")));
    }
    let (p, t, cin) = (xs[0], xs[1], xs[2]);
    let (cout, k) = (ws[0], ws[2]);
    let grouped = ws[1] == 1 && cout == cin && cin > 1;
    if !grouped && ws[1] != cin {
        return Err(Error::Shape(format!("temporal_conv input {xs:?} kernel {ws:?}")));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::Shape(format!("temporal_conv bias {:?}", b.shape())));
        }
    }
    let half = (k / 2) as isize;
    let xv = x.value();
    let wv = w.value();
    let rows = p * t;
    let src_row = move |pi: usize, ti: usize, kk: usize| -> Option<usize> {
        padding
            .source(ti as isize + kk as isize - half, t)
            .map(|s| pi * t + s)
    };

    let mut out = vec![0.0; rows * cout];
    let mut shifted = vec![0.0; if grouped { 0 } else { rows * cin }];
    for kk in 0..k {
        if grouped {
            for pi in 0..p {
                for ti in 0..t {
                    if let Some(s) = src_row(pi, ti, kk) {
                        let dst = &mut out[(pi * t + ti) * cout..][..cout];
                        let src = &xv.data()[s * cin..][..cin];
                        for c in 0..cin {
                            dst[c] += wv.data()[c * k + kk] * src[c];
                        }
                    }
                }
            }
        } else {
            gather_shifted(xv.data(), cin, p, t, kk, &src_row, &mut shifted);
            gemm(
                1.0,
                MatRef::dense(&shifted, rows, cin),
                kernel_tap(wv.data(), cout, cin, k, kk).t(),
                1.0,
                MatMut::dense(&mut out, rows, cout),
            );
        }
    }
    if let Some(b) = bias {
        let bv = b.value();
        for row in out.chunks_mut(cout) {
            for (o, bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
    }
    let out = Tensor::new(&[p, t, cout], out)?;
    let mut parents = vec![x, w];
    parents.extend(bias);
    Ok(x.tape().push(
        out,
        &parents,
        Box::new(move |gy, needs| {
            let gd = gy.data();
            let mut dx = needs[0].then(|| vec![0.0; xv.numel()]);
            let mut dw = needs[1].then(|| vec![0.0; wv.numel()]);
            let mut shifted = vec![0.0; if grouped { 0 } else { rows * cin }];
            let mut dshift = vec![0.0; if grouped { 0 } else { rows * cin }];
            for kk in 0..k {
                if grouped {
                    for pi in 0..p {
                        for ti in 0..t {
                            let Some(s) = src_row(pi, ti, kk) else { continue };
                            let g = &gd[(pi * t + ti) * cout..][..cout];
                            let src = &xv.data()[s * cin..][..cin];
                            for c in 0..cin {
                                if let Some(dw) = dw.as_mut() {
                                    dw[c * k + kk] += g[c] * src[c];
                                }
                                if let Some(dx) = dx.as_mut() {
                                    dx[s * cin + c] += g[c] * wv.data()[c * k + kk];
                                }
                            }
                        }
                    }
                    continue;
                }
                if let Some(dw) = dw.as_mut() {
                    gather_shifted(xv.data(), cin, p, t, kk, &src_row, &mut shifted);
                    gemm(
                        1.0,
                        MatRef::dense(gd, rows, cout).t(),
                        MatRef::dense(&shifted, rows, cin),
                        1.0,
                        MatMut {
                            data: &mut dw[kk..],
                            rows: cout,
                            cols: cin,
                            row_stride: cin * k,
                            col_stride: k,
                        },
                    );
                }
                if let Some(dx) = dx.as_mut() {
                    gemm(
                        1.0,
                        MatRef::dense(gd, rows, cout),
                        kernel_tap(wv.data(), cout, cin, k, kk),
                        0.0,
                        MatMut::dense(&mut dshift, rows, cin),
                    );
                    for pi in 0..p {
                        for ti in 0..t {
                            if let Some(s) = src_row(pi, ti, kk) {
                                let src = &dshift[(pi * t + ti) * cin..][..cin];
                                for (d, v) in dx[s * cin..][..cin].iter_mut().zip(src) {
                                    *d += v;
                                }
                            }
                        }
                    }
                }
            }
            let mut grads = vec![
                dx.map(|d| Tensor::new(xv.shape(), d).unwrap()),
                dw.map(|d| Tensor::new(wv.shape(), d).unwrap()),
            ];
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

/// `[Cout, Cin]` view of tap `kk` inside a `[Cout, Cin, K]` kernel.
fn kernel_tap(w: &[f64], cout: usize, cin: usize, k: usize, kk: usize) -> MatRef<'_> {
    MatRef {
        data: &w[kk..],
        rows: cout,
        cols: cin,
        row_stride: cin * k,
        col_stride: k,
    }
}

fn gather_shifted(
    x: &[f64],
    c: usize,
    p: usize,
    t: usize,
    kk: usize,
    src_row: &impl Fn(usize, usize, usize) -> Option<usize>,
    out: &mut [f64],
) {
    for pi in 0..p {
        for ti in 0..t {
            let dst = &mut out[(pi * t + ti) * c..][..c];
            match src_row(pi, ti, kk) {
                Some(s) => dst.copy_from_slice(&x[s * c..][..c]),
                None => dst.fill(0.0),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::check;
    use super::super::Tape;
    use super::*;

    fn noise(shape: &[usize], seed: u64) -> Tensor {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    /// Direct nested-loop 3-D convolution.
    fn naive_conv3d(x: &Tensor, w: &Tensor, b: &Tensor, spec: Conv3dSpec) -> Tensor {
        let (cin, t, h, wd) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let (cout, kt, kh, kw) = (w.dim(0), w.dim(2), w.dim(3), w.dim(4));
        let to = (t + 2 * spec.pad[0] - kt) / spec.stride_t + 1;
        let ho = h + 2 * spec.pad[1] - kh + 1;
        let wo = wd + 2 * spec.pad[2] - kw + 1;
        let mut y = Tensor::zeros(&[cout, to, ho, wo]);
        for co in 0..cout {
            for a in 0..to {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = b.data()[co];
                        for ci in 0..cin {
                            for dt in 0..kt {
                                for dh in 0..kh {
                                    for dw in 0..kw {
                                        let ti = (a * spec.stride_t + dt) as isize - spec.pad[0] as isize;
                                        let hi = (i + dh) as isize - spec.pad[1] as isize;
                                        let wi = (j + dw) as isize - spec.pad[2] as isize;
                                        if ti < 0 || hi < 0 || wi < 0 || ti >= t as isize || hi >= h as isize || wi >= wd as isize {
                                            continue;
                                        }
                                        acc += w.at(&[co, ci, dt, dh, dw])
                                            * x.at(&[ci, ti as usize, hi as usize, wi as usize]);
                                    }
                                }
                            }
                        }
                        y.set(&[co, a, i, j], acc);
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv3d_matches_naive_loop() {
        for (k, spec) in [
            ([3, 3, 3], Conv3dSpec::same([3, 3, 3])),
            ([3, 1, 1], Conv3dSpec { stride_t: 3, pad: [0, 0, 0] }),
            ([1, 3, 3], Conv3dSpec::same([1, 3, 3])),
        ] {
            let x = noise(&[3, 7, 5, 4], 1);
            let w = noise(&[2, 3, k[0], k[1], k[2]], 2);
            let b = noise(&[2], 3);
            let tape = Tape::new();
            let y = conv3d(tape.constant(x.clone()), tape.constant(w.clone()), Some(tape.constant(b.clone())), spec).unwrap();
            let expected = naive_conv3d(&x, &w, &b, spec);
            assert!(y.value().max_abs_diff(&expected) < 1e-12, "kernel {k:?}");
        }
    }

    #[test]
    fn conv3d_gradients() {
        check(
            &[noise(&[2, 4, 4, 3], 4), noise(&[3, 2, 3, 3, 3], 5), noise(&[3], 6)],
            |_, v| conv3d(v[0], v[1], Some(v[2]), Conv3dSpec::same([3, 3, 3])).unwrap(),
            1e-5,
            1e-7,
        );
        check(
            &[noise(&[2, 7, 2, 3], 7), noise(&[2, 2, 3, 1, 1], 8)],
            |_, v| conv3d(v[0], v[1], None, Conv3dSpec { stride_t: 3, pad: [0, 0, 0] }).unwrap(),
            1e-5,
            1e-7,
        );
    }

    #[test]
    fn temporal_conv_gradients() {
        for padding in [TemporalPadding::Zeros, TemporalPadding::Replicate] {
            check(
                &[noise(&[2, 5, 3], 9), noise(&[4, 3, 3], 10), noise(&[4], 11)],
                |_, v| temporal_conv(v[0], v[1], Some(v[2]), padding).unwrap(),
                1e-5,
                1e-7,
            );
            check(
                &[noise(&[2, 4, 3], 12), noise(&[3, 1, 5], 13)],
                |_, v| temporal_conv(v[0], v[1], None, padding).unwrap(),
                1e-5,
                1e-7,
            );
        }
    }

    #[test]
    fn grouped_temporal_conv_is_per_channel() {
        let x = noise(&[1, 6, 2], 14);
        let w = noise(&[2, 1, 3], 15);
        let tape = Tape::new();
        let y = temporal_conv(tape.constant(x.clone()), tape.constant(w.clone()), None, TemporalPadding::Zeros).unwrap();
        let y = y.value();
        for t in 0..6 {
            for c in 0..2 {
                let mut acc = 0.0;
                for k in 0..3 {
                    let s = t as isize + k as isize - 1;
                    if (0..6).contains(&s) {
                        acc += w.at(&[c, 0, k]) * x.at(&[0, s as usize, c]);
                    }
                }
                assert!((y.at(&[0, t, c]) - acc).abs() < 1e-14);
            }
        }
    }
}
