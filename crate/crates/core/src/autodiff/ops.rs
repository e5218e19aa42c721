//! Differentiable operations on [`Var`].
//!
//! Shapes must match exactly except for [`Var::add_bias`] (a vector added
//! over all leading axes) and [`Var::scale_rows`] (a trailing-size-1 column
//! multiplying each row). Everything else is a dimension error.

use std::ops::Range;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_nt, gemm_tn, Tensor};

pub const DEFAULT_LN_EPS: f64 = 1e-5;

/// `(outer, len, inner)` decomposition of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::dim(op, format!("axis {axis} out of range for shape {shape:?}")));
    }
    Ok(())
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("shapes {:?} and {:?} differ", a.shape(), b.shape())));
    }
    Ok(())
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Var {
    pub fn matmul(&self, rhs: &Var) -> Result<Var> {
        self.tape.record(
            "matmul",
            &[self, rhs],
            |v| {
                let (a, b) = (v[0], v[1]);
                if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                    return Err(Error::dim(
                        "matmul",
                        format!("cannot multiply {:?} by {:?}", a.shape(), b.shape()),
                    ));
                }
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                Ok(Tensor::from_parts(vec![m, n], gemm(a.data(), b.data(), m, k, n)))
            },
            |c| {
                let (a, b, g) = (c.inputs[0], c.inputs[1], c.grad);
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let ga = c.needs[0]
                    .then(|| Tensor::from_parts(vec![m, k], gemm_nt(g.data(), b.data(), m, n, k)));
                let gb = c.needs[1]
                    .then(|| Tensor::from_parts(vec![k, n], gemm_tn(a.data(), g.data(), m, k, n)));
                vec![ga, gb]
            },
        )
    }

    pub fn add(&self, rhs: &Var) -> Result<Var> {
        self.tape.record(
            "add",
            &[self, rhs],
            |v| {
                same_shape("add", v[0], v[1])?;
                Ok(v[0].zip_map(v[1], |a, b| a + b))
            },
            |c| vec![Some(c.grad.clone()), Some(c.grad.clone())],
        )
    }

    pub fn sub(&self, rhs: &Var) -> Result<Var> {
        self.tape.record(
            "sub",
            &[self, rhs],
            |v| {
                same_shape("sub", v[0], v[1])?;
                Ok(v[0].zip_map(v[1], |a, b| a - b))
            },
            |c| vec![Some(c.grad.clone()), Some(c.grad.map(|g| -g))],
        )
    }

    /// Elementwise product.
    pub fn mul(&self, rhs: &Var) -> Result<Var> {
        self.tape.record(
            "mul",
            &[self, rhs],
            |v| {
                same_shape("mul", v[0], v[1])?;
                Ok(v[0].zip_map(v[1], |a, b| a * b))
            },
            |c| {
                vec![
                    c.needs[0].then(|| c.grad.zip_map(c.inputs[1], |g, b| g * b)),
                    c.needs[1].then(|| c.grad.zip_map(c.inputs[0], |g, a| g * a)),
                ]
            },
        )
    }

    /// Adds a `[n]` vector to every row of a `[..., n]` tensor.
    pub fn add_bias(&self, bias: &Var) -> Result<Var> {
        self.tape.record(
            "add_bias",
            &[self, bias],
            |v| {
                let (x, b) = (v[0], v[1]);
                if b.rank() != 1 || b.numel() != x.last_dim() {
                    return Err(Error::dim(
                        "add_bias",
                        format!("bias {:?} does not match trailing axis of {:?}", b.shape(), x.shape()),
                    ));
                }
                let n = b.numel();
                let mut out = x.clone();
                for row in out.data_mut().chunks_mut(n) {
                    for (o, bv) in row.iter_mut().zip(b.data()) {
                        *o += bv;
                    }
                }
                Ok(out)
            },
            |c| {
                let n = c.inputs[1].numel();
                let gb = c.needs[1].then(|| {
                    let mut acc = vec![0.0; n];
                    for row in c.grad.data().chunks(n) {
                        for (a, g) in acc.iter_mut().zip(row) {
                            *a += g;
                        }
                    }
                    Tensor::vector(acc)
                });
                vec![Some(c.grad.clone()), gb]
            },
        )
    }

    /// Multiplies each row of a `[..., n]` tensor by the matching entry of a
    /// `[..., 1]` column.
    pub fn scale_rows(&self, col: &Var) -> Result<Var> {
        self.tape.record(
            "scale_rows",
            &[self, col],
            |v| {
                let (x, s) = (v[0], v[1]);
                let lead_ok = x.rank() == s.rank() && x.shape()[..x.rank() - 1] == s.shape()[..s.rank() - 1];
                if !lead_ok || s.last_dim() != 1 {
                    return Err(Error::dim(
                        "scale_rows",
                        format!("column {:?} does not match rows of {:?}", s.shape(), x.shape()),
                    ));
                }
                let n = x.last_dim();
                let mut out = x.clone();
                for (row, &sv) in out.data_mut().chunks_mut(n).zip(s.data()) {
                    row.iter_mut().for_each(|o| *o *= sv);
                }
                Ok(out)
            },
            |c| {
                let (x, s, g) = (c.inputs[0], c.inputs[1], c.grad);
                let n = x.last_dim();
                let gx = c.needs[0].then(|| {
                    let mut out = g.clone();
                    for (row, &sv) in out.data_mut().chunks_mut(n).zip(s.data()) {
                        row.iter_mut().for_each(|o| *o *= sv);
                    }
                    out
                });
                let gs = c.needs[1].then(|| {
                    let data = g
                        .data()
                        .chunks(n)
                        .zip(x.data().chunks(n))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    Tensor::from_parts(s.shape().to_vec(), data)
                });
                vec![gx, gs]
            },
        )
    }

    pub fn scale(&self, factor: f64) -> Result<Var> {
        self.tape.record(
            "scale",
            &[self],
            |v| Ok(v[0].map(|x| x * factor)),
            move |c| vec![Some(c.grad.map(|g| g * factor))],
        )
    }

    pub fn relu(&self) -> Result<Var> {
        self.tape.record(
            "relu",
            &[self],
            |v| Ok(v[0].map(|x| x.max(0.0))),
            |c| vec![Some(c.grad.zip_map(c.inputs[0], |g, x| if x > 0.0 { g } else { 0.0 }))],
        )
    }

    pub fn sigmoid(&self) -> Result<Var> {
        self.tape.record(
            "sigmoid",
            &[self],
            |v| Ok(v[0].map(sigmoid)),
            |c| vec![Some(c.grad.zip_map(c.output, |g, y| g * y * (1.0 - y)))],
        )
    }

    pub fn tanh(&self) -> Result<Var> {
        self.tape.record(
            "tanh",
            &[self],
            |v| Ok(v[0].map(f64::tanh)),
            |c| vec![Some(c.grad.zip_map(c.output, |g, y| g * (1.0 - y * y)))],
        )
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&self) -> Result<Var> {
        self.tape.record(
            "sum",
            &[self],
            |v| Ok(Tensor::scalar(v[0].sum())),
            |c| vec![Some(Tensor::full(c.inputs[0].shape().to_vec(), c.grad.item()))],
        )
    }

    pub fn mean(&self) -> Result<Var> {
        self.tape.record(
            "mean",
            &[self],
            |v| Ok(Tensor::scalar(v[0].sum() / v[0].numel() as f64)),
            |c| {
                let x = c.inputs[0];
                vec![Some(Tensor::full(x.shape().to_vec(), c.grad.item() / x.numel() as f64))]
            },
        )
    }

    /// Sums over `axis`, keeping it with extent 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Var> {
        self.reduce_axis("sum_axis", axis, 1.0)
    }

    /// Averages over `axis`, keeping it with extent 1.
    pub fn mean_axis(&self, axis: usize) -> Result<Var> {
        let len = self.with_value(|t| t.shape().get(axis).copied());
        let len = len.ok_or_else(|| Error::dim("mean_axis", format!("axis {axis} out of range")))?;
        self.reduce_axis("mean_axis", axis, 1.0 / len as f64)
    }

    fn reduce_axis(&self, op: &'static str, axis: usize, factor: f64) -> Result<Var> {
        self.tape.record(
            op,
            &[self],
            move |v| {
                let x = v[0];
                check_axis(op, x.shape(), axis)?;
                let (outer, len, inner) = split_axis(x.shape(), axis);
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let src = &x.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                out.iter_mut().for_each(|v| *v *= factor);
                let mut shape = x.shape().to_vec();
                shape[axis] = 1;
                Ok(Tensor::from_parts(shape, out))
            },
            move |c| {
                let x = c.inputs[0];
                let (outer, len, inner) = split_axis(x.shape(), axis);
                let mut gx = vec![0.0; x.numel()];
                for o in 0..outer {
                    let src = &c.grad.data()[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        let dst = &mut gx[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = s * factor;
                        }
                    }
                }
                vec![Some(Tensor::from_parts(x.shape().to_vec(), gx))]
            },
        )
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var> {
        self.tape.record(
            "softmax",
            &[self],
            move |v| {
                let x = v[0];
                check_axis("softmax", x.shape(), axis)?;
                Ok(softmax_values(x, axis))
            },
            move |c| {
                let y = c.output;
                let (outer, len, inner) = split_axis(y.shape(), axis);
                let mut gx = vec![0.0; y.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| c.grad.data()[idx(l)] * y.data()[idx(l)]).sum();
                        for l in 0..len {
                            gx[idx(l)] = y.data()[idx(l)] * (c.grad.data()[idx(l)] - dot);
                        }
                    }
                }
                vec![Some(Tensor::from_parts(y.shape().to_vec(), gx))]
            },
        )
    }

    /// Normalizes each trailing-axis row to zero mean and unit (biased)
    /// variance, then applies `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&self, gain: &Var, bias: &Var, eps: f64) -> Result<Var> {
        if eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::Contract(format!("layer_norm eps must be positive, got {eps}")));
        }
        self.tape.record(
            "layer_norm",
            &[self, gain, bias],
            move |v| {
                let (x, g, b) = (v[0], v[1], v[2]);
                let d = x.last_dim();
                if g.shape() != [d] || b.shape() != [d] {
                    return Err(Error::dim(
                        "layer_norm",
                        format!("gain {:?} / bias {:?} must be [{d}] for input {:?}", g.shape(), b.shape(), x.shape()),
                    ));
                }
                let mut out = Vec::with_capacity(x.numel());
                for row in x.data().chunks(d) {
                    let (mean, inv_std) = row_stats(row, eps);
                    out.extend(
                        row.iter()
                            .zip(g.data().iter().zip(b.data()))
                            .map(|(&xv, (&gv, &bv))| gv * (xv - mean) * inv_std + bv),
                    );
                }
                Ok(Tensor::from_parts(x.shape().to_vec(), out))
            },
            move |c| {
                let (x, gain, g) = (c.inputs[0], c.inputs[1], c.grad);
                let d = x.last_dim();
                let mut gx = Vec::with_capacity(x.numel());
                let mut ggain = vec![0.0; d];
                let mut gbias = vec![0.0; d];
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for (row, grow) in x.data().chunks(d).zip(g.data().chunks(d)) {
                    let (mean, inv_std) = row_stats(row, eps);
                    for k in 0..d {
                        xhat[k] = (row[k] - mean) * inv_std;
                        dxhat[k] = grow[k] * gain.data()[k];
                        ggain[k] += grow[k] * xhat[k];
                        gbias[k] += grow[k];
                    }
                    let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dxhat_xhat = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    gx.extend((0..d).map(|k| inv_std * (dxhat[k] - mean_dxhat - xhat[k] * mean_dxhat_xhat)));
                }
                vec![
                    Some(Tensor::from_parts(x.shape().to_vec(), gx)),
                    c.needs[1].then(|| Tensor::vector(ggain)),
                    c.needs[2].then(|| Tensor::vector(gbias)),
                ]
            },
        )
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let tape: Tape = first.tape.clone();
        tape.record(
            "concat",
            parts,
            move |v| {
                let s0 = v[0].shape();
                check_axis("concat", s0, axis)?;
                for t in v {
                    let s = t.shape();
                    let compatible = s.len() == s0.len()
                        && s.iter().zip(s0).enumerate().all(|(i, (a, b))| i == axis || a == b);
                    if !compatible {
                        return Err(Error::dim("concat", format!("cannot concat {s0:?} with {s:?} on axis {axis}")));
                    }
                }
                let (outer, _, inner) = split_axis(s0, axis);
                let total: usize = v.iter().map(|t| t.shape()[axis]).sum();
                let mut out = Vec::with_capacity(outer * total * inner);
                for o in 0..outer {
                    for t in v {
                        let len = t.shape()[axis];
                        out.extend_from_slice(&t.data()[o * len * inner..(o + 1) * len * inner]);
                    }
                }
                let mut shape = s0.to_vec();
                shape[axis] = total;
                Ok(Tensor::from_parts(shape, out))
            },
            move |c| {
                let (outer, total, inner) = split_axis(c.grad.shape(), axis);
                let mut offset = 0;
                c.inputs
                    .iter()
                    .zip(c.needs)
                    .map(|(t, &need)| {
                        let len = t.shape()[axis];
                        let start = offset;
                        offset += len;
                        need.then(|| {
                            let mut g = Vec::with_capacity(t.numel());
                            for o in 0..outer {
                                let base = (o * total + start) * inner;
                                g.extend_from_slice(&c.grad.data()[base..base + len * inner]);
                            }
                            Tensor::from_parts(t.shape().to_vec(), g)
                        })
                    })
                    .collect()
            },
        )
    }

    /// Takes `range` along `axis`.
    pub fn slice(&self, axis: usize, range: Range<usize>) -> Result<Var> {
        let r2 = range.clone();
        self.tape.record(
            "slice",
            &[self],
            move |v| {
                let x = v[0];
                check_axis("slice", x.shape(), axis)?;
                let len = x.shape()[axis];
                if range.start >= range.end || range.end > len {
                    return Err(Error::dim("slice", format!("range {range:?} invalid for axis {axis} of {:?}", x.shape())));
                }
                let (outer, _, inner) = split_axis(x.shape(), axis);
                let w = range.end - range.start;
                let mut out = Vec::with_capacity(outer * w * inner);
                for o in 0..outer {
                    let base = (o * len + range.start) * inner;
                    out.extend_from_slice(&x.data()[base..base + w * inner]);
                }
                let mut shape = x.shape().to_vec();
                shape[axis] = w;
                Ok(Tensor::from_parts(shape, out))
            },
            move |c| {
                let x = c.inputs[0];
                let (outer, len, inner) = split_axis(x.shape(), axis);
                let w = r2.end - r2.start;
                let mut gx = vec![0.0; x.numel()];
                for o in 0..outer {
                    let base = (o * len + r2.start) * inner;
                    gx[base..base + w * inner].copy_from_slice(&c.grad.data()[o * w * inner..(o + 1) * w * inner]);
                }
                vec![Some(Tensor::from_parts(x.shape().to_vec(), gx))]
            },
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let shape = shape.to_vec();
        self.tape.record(
            "reshape",
            &[self],
            move |v| {
                v[0].reshape(shape.clone())
                    .map_err(|_| Error::dim("reshape", format!("cannot reshape {:?} to {shape:?}", v[0].shape())))
            },
            |c| vec![Some(Tensor::from_parts(c.inputs[0].shape().to_vec(), c.grad.data().to_vec()))],
        )
    }

    /// Looks up rows of a `[vocab, d]` table. Rows for `pad_id` come out as
    /// zeros and receive no gradient. Output shape is `lead ++ [d]`.
    pub fn embedding(table: &Var, ids: &[usize], lead: &[usize], pad_id: Option<usize>) -> Result<Var> {
        let ids = ids.to_vec();
        let lead = lead.to_vec();
        let ids_b = ids.clone();
        table.tape.record(
            "embedding",
            &[table],
            move |v| {
                let t = v[0];
                if t.rank() != 2 {
                    return Err(Error::dim("embedding", format!("table must be a matrix, got {:?}", t.shape())));
                }
                if lead.iter().product::<usize>() != ids.len() {
                    return Err(Error::dim("embedding", format!("{} ids do not fill shape {lead:?}", ids.len())));
                }
                let (vocab, d) = (t.shape()[0], t.shape()[1]);
                let mut out = Vec::with_capacity(ids.len() * d);
                for &id in &ids {
                    if id >= vocab {
                        return Err(Error::Data(format!("token id {id} outside vocabulary of {vocab}")));
                    }
                    if Some(id) == pad_id {
                        out.extend(std::iter::repeat(0.0).take(d));
                    } else {
                        out.extend_from_slice(&t.data()[id * d..(id + 1) * d]);
                    }
                }
                let mut shape = lead.clone();
                shape.push(d);
                Ok(Tensor::from_parts(shape, out))
            },
            move |c| {
                let t = c.inputs[0];
                let d = t.shape()[1];
                let mut g = vec![0.0; t.numel()];
                for (&id, grow) in ids_b.iter().zip(c.grad.data().chunks(d)) {
                    if Some(id) == pad_id {
                        continue;
                    }
                    for (a, b) in g[id * d..(id + 1) * d].iter_mut().zip(grow) {
                        *a += b;
                    }
                }
                vec![Some(Tensor::from_parts(t.shape().to_vec(), g))]
            },
        )
    }
}

pub(crate) fn softmax_values(x: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let mut out = vec![0.0; x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |l: usize| (o * len + l) * inner + i;
            let max = (0..len).map(|l| x.data()[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for l in 0..len {
                let e = (x.data()[idx(l)] - max).exp();
                out[idx(l)] = e;
                z += e;
            }
            for l in 0..len {
                out[idx(l)] /= z;
            }
        }
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}
