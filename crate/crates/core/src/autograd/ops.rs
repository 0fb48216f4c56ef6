//! Element-wise and shape operations.

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn same_shape(a: &Var<'_>, b: &Var<'_>, what: &str) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
    }
    Ok(())
}

pub fn add<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    same_shape(&a, &b, "add")?;
    let out = a.value().zip_map(&b.value(), |x, y| x + y);
    Ok(a.tape().push(
        out,
        &[a, b],
        Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]),
    ))
}

pub fn mul<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    same_shape(&a, &b, "mul")?;
    let (av, bv) = (a.value(), b.value());
    let out = av.zip_map(&bv, |x, y| x * y);
    Ok(a.tape().push(
        out,
        &[a, b],
        Box::new(move |g, needs| {
            vec![
                needs[0].then(|| g.zip_map(&bv, |g, y| g * y)),
                needs[1].then(|| g.zip_map(&av, |g, x| g * x)),
            ]
        }),
    ))
}

pub fn scale(a: Var<'_>, s: f64) -> Var<'_> {
    let out = a.value().scale(s);
    a.tape()
        .push(out, &[a], Box::new(move |g, _| vec![Some(g.scale(s))]))
}

/// `x[..., c] + row[c]`.
pub fn add_row<'t>(x: Var<'t>, row: Var<'t>) -> Result<Var<'t>> {
    let xs = x.shape();
    let rs = row.shape();
    let c = *xs.last().unwrap_or(&0);
    if rs != [c] {
        return Err(Error::Shape(format!("add_row: {xs:?} + {rs:?}")));
    }
    let xv = x.value();
    let rv = row.value();
    let mut out = (*xv).clone();
    for chunk in out.data_mut().chunks_mut(c) {
        for (o, r) in chunk.iter_mut().zip(rv.data()) {
            *o += r;
        }
    }
    Ok(x.tape().push(
        out,
        &[x, row],
        Box::new(move |g, needs| {
            let gr = needs[1].then(|| {
                let mut acc = vec![0.0; c];
                for chunk in g.data().chunks(c) {
                    for (a, v) in acc.iter_mut().zip(chunk) {
                        *a += v;
                    }
                }
                Tensor::new(&[c], acc).unwrap()
            });
            vec![Some(g.clone()), gr]
        }),
    ))
}

pub fn leaky_relu(x: Var<'_>, slope: f64) -> Var<'_> {
    let xv = x.value();
    let out = xv.map(|v| if v > 0.0 { v } else { slope * v });
    x.tape().push(
        out,
        &[x],
        Box::new(move |g, _| {
            vec![Some(g.zip_map(&xv, |g, v| if v > 0.0 { g } else { slope * g }))]
        }),
    )
}

pub fn sigmoid(x: Var<'_>) -> Var<'_> {
    let out = x.value().map(|v| 1.0 / (1.0 + (-v).exp()));
    let y = out.clone();
    x.tape().push(
        out,
        &[x],
        Box::new(move |g, _| vec![Some(g.zip_map(&y, |g, s| g * s * (1.0 - s)))]),
    )
}

pub fn sum_all(x: Var<'_>) -> Var<'_> {
    let xv = x.value();
    let shape = xv.shape().to_vec();
    x.tape().push(
        Tensor::scalar(xv.sum()),
        &[x],
        Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.item()))]),
    )
}

/// `sum(x * w)` as a scalar.
pub fn weighted_sum<'t>(x: Var<'t>, w: Var<'t>) -> Var<'t> {
    let (xv, wv) = (x.value(), w.value());
    assert_eq!(xv.shape(), wv.shape(), "weighted_sum shapes");
    let s: f64 = xv.data().iter().zip(wv.data()).map(|(a, b)| a * b).sum();
    x.tape().push(
        Tensor::scalar(s),
        &[x, w],
        Box::new(move |g, needs| {
            let g = g.item();
            vec![
                needs[0].then(|| wv.scale(g)),
                needs[1].then(|| xv.scale(g)),
            ]
        }),
    )
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Shape("concat of nothing".into()))?;
    let tape: &'t Tape = first.tape();
    let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape()).collect();
    let base = &shapes[0];
    for s in &shapes[1..] {
        let compatible = s.len() == base.len()
            && s.iter()
                .zip(base)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::Shape(format!("concat axis {axis}: {base:?} vs {s:?}")));
        }
    }
    let lens: Vec<usize> = shapes.iter().map(|s| s[axis]).collect();
    let total: usize = lens.iter().sum();
    let (outer, _, inner) = split_at_axis(base, axis);
    let mut out_shape = base.clone();
    out_shape[axis] = total;
    let mut out = vec![0.0; outer * total * inner];
    let mut offset = 0;
    for (p, &len) in parts.iter().zip(&lens) {
        let v = p.value();
        for o in 0..outer {
            let src = &v.data()[o * len * inner..(o + 1) * len * inner];
            let dst = (o * total + offset) * inner;
            out[dst..dst + len * inner].copy_from_slice(src);
        }
        offset += len;
    }
    let out = Tensor::new(&out_shape, out)?;
    Ok(tape.push(
        out,
        parts,
        Box::new(move |g, needs| {
            let mut offset = 0;
            let mut grads = Vec::with_capacity(lens.len());
            for (k, &len) in lens.iter().enumerate() {
                if needs[k] {
                    let mut d = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        d[o * len * inner..(o + 1) * len * inner]
                            .copy_from_slice(&g.data()[src..src + len * inner]);
                    }
                    grads.push(Some(Tensor::new(&shapes[k], d).unwrap()));
                } else {
                    grads.push(None);
                }
                offset += len;
            }
            grads
        }),
    ))
}

/// Slice `[start, start + len)` along `axis`.
pub fn narrow(x: Var<'_>, axis: usize, start: usize, len: usize) -> Result<Var<'_>> {
    let shape = x.shape();
    if axis >= shape.len() || start + len > shape[axis] || len == 0 {
        return Err(Error::Shape(format!(
            "narrow {shape:?} axis {axis} [{start}, {})",
            start + len
        )));
    }
    let (outer, n, inner) = split_at_axis(&shape, axis);
    let xv = x.value();
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let s = (o * n + start) * inner;
        out.extend_from_slice(&xv.data()[s..s + len * inner]);
    }
    let mut out_shape = shape.clone();
    out_shape[axis] = len;
    let out = Tensor::new(&out_shape, out)?;
    Ok(x.tape().push(
        out,
        &[x],
        Box::new(move |g, _| {
            let mut d = Tensor::zeros(&shape);
            for o in 0..outer {
                let s = (o * n + start) * inner;
                d.data_mut()[s..s + len * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(d)]
        }),
    ))
}

pub fn reshape<'t>(x: Var<'t>, shape: &[usize]) -> Result<Var<'t>> {
    let old = x.shape();
    let out = (*x.value()).clone().reshape(shape)?;
    Ok(x.tape().push(
        out,
        &[x],
        Box::new(move |g, _| vec![Some(g.clone().reshape(&old).unwrap())]),
    ))
}

/// Repeats a `[c]` vector into `[n, c]`.
pub fn expand_rows(v: Var<'_>, n: usize) -> Var<'_> {
    let vv = v.value();
    let c = vv.numel();
    let mut out = Vec::with_capacity(n * c);
    for _ in 0..n {
        out.extend_from_slice(vv.data());
    }
    v.tape().push(
        Tensor::new(&[n, c], out).unwrap(),
        &[v],
        Box::new(move |g, _| {
            let mut acc = vec![0.0; c];
            for row in g.data().chunks(c) {
                for (a, r) in acc.iter_mut().zip(row) {
                    *a += r;
                }
            }
            vec![Some(Tensor::new(&[c], acc).unwrap())]
        }),
    )
}

/// Row `index` of a `[m, c]` table.
pub fn gather_row(table: Var<'_>, index: usize) -> Result<Var<'_>> {
    let shape = table.shape();
    if shape.len() != 2 || index >= shape[0] {
        return Err(Error::Shape(format!("gather_row {index} from {shape:?}")));
    }
    let c = shape[1];
    let tv = table.value();
    let row = tv.data()[index * c..(index + 1) * c].to_vec();
    Ok(table.tape().push(
        Tensor::new(&[c], row)?,
        &[table],
        Box::new(move |g, _| {
            let mut d = Tensor::zeros(&shape);
            d.data_mut()[index * c..(index + 1) * c].copy_from_slice(g.data());
            vec![Some(d)]
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::super::gradcheck::check;
    use super::*;

    fn ramp(shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |i| ((i * 37 % 17) as f64 - 8.0) / 7.0)
    }

    #[test]
    fn concat_and_narrow_are_inverse() {
        let tape = Tape::new();
        let a = tape.constant(ramp(&[2, 3, 4]));
        let b = tape.constant(ramp(&[2, 1, 4]));
        let c = concat(&[a, b], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 4, 4]);
        let back = narrow(c, 1, 3, 1).unwrap();
        assert_eq!(*back.value(), *b.value());
    }

    #[test]
    fn shape_op_gradients() {
        check(
            &[ramp(&[2, 3, 4]), ramp(&[2, 2, 4])],
            |_, v| {
                let c = concat(&[v[0], v[1]], 1).unwrap();
                let n = narrow(c, 1, 1, 3).unwrap();
                reshape(n, &[6, 4]).unwrap()
            },
            1e-5,
            1e-7,
        );
    }

    #[test]
    fn elementwise_gradients() {
        check(
            &[ramp(&[3, 4]), ramp(&[4]), ramp(&[3, 4]).map(|v| v + 0.013)],
            |_, v| {
                let a = add_row(v[0], v[1]).unwrap();
                let b = mul(sigmoid(a), leaky_relu(v[2], 0.01)).unwrap();
                let r = expand_rows(v[1], 3);
                add(scale(b, 1.5), r).unwrap()
            },
            1e-6,
            1e-7,
        );
    }

    #[test]
    fn gather_gradient_hits_one_row() {
        let tape = Tape::new();
        let t = tape.variable(ramp(&[3, 2]));
        let r = gather_row(t, 1).unwrap();
        let g = tape.backward(sum_all(r));
        assert_eq!(g.get(t).unwrap().data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }
}
