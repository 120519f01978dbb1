use rand::Rng;

use super::kernels::{gemm, permute};
use super::tape::Op;
use super::{Tensor, Var};
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn same_tape(a: &Var<'_>, b: &Var<'_>) {
    assert!(
        std::ptr::eq(a.tape(), b.tape()),
        "operands recorded on different tapes"
    );
}

impl<'t> Var<'t> {
    fn unary(&self, f: impl Fn(f64) -> (f64, f64)) -> Var<'t> {
        let (shape, (data, deriv)): (Vec<usize>, (Vec<f64>, Vec<f64>)) = {
            let v = self.value();
            (v.shape().to_vec(), v.data().iter().map(|&x| f(x)).unzip())
        };
        let value = Tensor { shape, data };
        self.tape().push(value, Op::Pointwise(self.id(), deriv))
    }

    fn binary(
        &self,
        other: &Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        same_tape(self, other);
        let value = {
            let (a, b) = (self.value(), other.value());
            if a.shape() != b.shape() {
                return Err(Error::shape(name, a.shape(), b.shape()));
            }
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor {
                shape: a.shape().to_vec(),
                data,
            }
        };
        Ok(self.tape().push(value, op))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id(), other.id()))
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id(), other.id()))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id(), other.id()))
    }

    /// Adds a vector along the last axis (bias broadcast).
    pub fn add_row(&self, bias: &Var<'t>) -> Result<Var<'t>> {
        same_tape(self, bias);
        let value = {
            let (x, b) = (self.value(), bias.value());
            let n = b.numel();
            if b.rank() != 1 || x.shape().last() != Some(&n) {
                return Err(Error::shape("add_row", x.shape(), b.shape()));
            }
            let mut data = x.data().to_vec();
            for row in data.chunks_exact_mut(n) {
                for (v, bv) in row.iter_mut().zip(b.data()) {
                    *v += bv;
                }
            }
            Tensor {
                shape: x.shape().to_vec(),
                data,
            }
        };
        Ok(self.tape().push(value, Op::AddRow(self.id(), bias.id())))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        let value = {
            let v = self.value();
            Tensor {
                shape: v.shape().to_vec(),
                data: v.data().iter().map(|x| x * c).collect(),
            }
        };
        self.tape().push(value, Op::Scale(self.id(), c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(|x| (x + c, 1.0))
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(|x| {
            let e = x.exp();
            (e, e)
        })
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(|x| (x.ln(), 1.0 / x))
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(|x| (x * x, 2.0 * x))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(|x| if x > 0.0 { (x, 1.0) } else { (0.0, 0.0) })
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(|x| {
            let s = sigmoid(x);
            (s, s * (1.0 - s))
        })
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(|x| {
            let t = x.tanh();
            (t, 1.0 - t * t)
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<'t> {
        self.unary(|x| {
            let u = GELU_C * (x + GELU_A * x * x * x);
            let t = u.tanh();
            let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
            (0.5 * x * (1.0 + t), 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
        })
    }

    /// Elementwise map with a caller-supplied derivative.
    pub fn map_with_grad(&self, f: impl Fn(f64) -> (f64, f64)) -> Var<'t> {
        self.unary(f)
    }

    /// Matrix product. `self` may carry leading batch axes (`[.., k]`), which
    /// are flattened against a rank-2 right operand `[k, n]`.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        same_tape(self, other);
        let (value, m, k, n) = {
            let (a, b) = (self.value(), other.value());
            let err = || Error::shape("matmul", a.shape(), b.shape());
            let (Some(&k), [kb, n]) = (a.shape().last(), b.shape()) else {
                return Err(err());
            };
            if a.rank() < 2 || k != *kb {
                return Err(err());
            }
            let m = a.numel() / k;
            let mut data = vec![0.0; m * n];
            gemm(m, k, *n, a.data(), false, b.data(), false, &mut data, false);
            let mut shape = a.shape().to_vec();
            *shape.last_mut().unwrap() = *n;
            (Tensor { shape, data }, m, k, *n)
        };
        let op = Op::MatMul {
            a: self.id(),
            b: other.id(),
            batch: 1,
            m,
            k,
            n,
            trans_b: false,
        };
        Ok(self.tape().push(value, op))
    }

    /// Batched product `[g, m, k] · [g, k, n] -> [g, m, n]`.
    pub fn bmm(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.batched(other, false)
    }

    /// Batched product against transposed right operand:
    /// `[g, m, k] · [g, n, k]ᵀ -> [g, m, n]`.
    pub fn bmm_nt(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.batched(other, true)
    }

    fn batched(&self, other: &Var<'t>, trans_b: bool) -> Result<Var<'t>> {
        same_tape(self, other);
        let name = if trans_b { "bmm_nt" } else { "bmm" };
        let (value, batch, m, k, n) = {
            let (a, b) = (self.value(), other.value());
            let err = || Error::shape(name, a.shape(), b.shape());
            let ([ga, m, k], [gb, b1, b2]) = (a.shape(), b.shape()) else {
                return Err(err());
            };
            let (kb, n) = if trans_b { (*b2, *b1) } else { (*b1, *b2) };
            if ga != gb || *k != kb {
                return Err(err());
            }
            let (g, m, k) = (*ga, *m, *k);
            let mut data = vec![0.0; g * m * n];
            for i in 0..g {
                gemm(
                    m,
                    k,
                    n,
                    &a.data()[i * m * k..(i + 1) * m * k],
                    false,
                    &b.data()[i * k * n..(i + 1) * k * n],
                    trans_b,
                    &mut data[i * m * n..(i + 1) * m * n],
                    false,
                );
            }
            (
                Tensor {
                    shape: vec![g, m, n],
                    data,
                },
                g,
                m,
                k,
                n,
            )
        };
        let op = Op::MatMul {
            a: self.id(),
            b: other.id(),
            batch,
            m,
            k,
            n,
            trans_b,
        };
        Ok(self.tape().push(value, op))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.tape().push(Tensor::scalar(s), Op::Sum(self.id()))
    }

    pub fn mean(&self) -> Var<'t> {
        let m = {
            let v = self.value();
            v.data().iter().sum::<f64>() / v.numel() as f64
        };
        self.tape().push(Tensor::scalar(m), Op::Mean(self.id()))
    }

    /// Softmax along the last axis at the given temperature.
    pub fn softmax(&self, temperature: f64) -> Result<Var<'t>> {
        self.softmax_impl(temperature, None)
    }

    /// Softmax along the last axis where `key_mask[r', c] == 0` removes column
    /// `c` from rows in group `r'`. Rows are split into `key_mask.rows` equal,
    /// consecutive groups. Masked entries come out as exact zeros.
    pub fn masked_softmax(&self, key_mask: &Tensor, temperature: f64) -> Result<Var<'t>> {
        self.softmax_impl(temperature, Some(key_mask))
    }

    fn softmax_impl(&self, temperature: f64, key_mask: Option<&Tensor>) -> Result<Var<'t>> {
        if !(temperature > 0.0) {
            return Err(Error::Param(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let value = {
            let x = self.value();
            let cols = *x.shape().last().ok_or_else(|| {
                Error::shape("softmax", x.shape(), key_mask.map_or(&[], |m| m.shape()))
            })?;
            let rows = x.numel() / cols;
            let rows_per_group = match key_mask {
                Some(mask) => {
                    let groups = mask.numel() / cols;
                    if mask.shape().last() != Some(&cols) || !rows.is_multiple_of(groups) {
                        return Err(Error::shape("masked_softmax", x.shape(), mask.shape()));
                    }
                    rows / groups
                }
                None => rows,
            };
            let mut data = vec![0.0; x.numel()];
            for (r, (xr, yr)) in x
                .data()
                .chunks_exact(cols)
                .zip(data.chunks_exact_mut(cols))
                .enumerate()
            {
                let keep = key_mask.map(|m| m.row(r / rows_per_group));
                let active = |c: usize| keep.is_none_or(|k| k[c] != 0.0);
                let max = (0..cols)
                    .filter(|&c| active(c))
                    .map(|c| xr[c])
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(Error::Degenerate(format!(
                        "softmax row {r} has no unmasked entries"
                    )));
                }
                let mut total = 0.0;
                for c in 0..cols {
                    if active(c) {
                        let e = ((xr[c] - max) / temperature).exp();
                        yr[c] = e;
                        total += e;
                    }
                }
                for y in yr.iter_mut() {
                    *y /= total;
                }
            }
            Tensor {
                shape: x.shape().to_vec(),
                data,
            }
        };
        Ok(self.tape().push(
            value,
            Op::Softmax {
                x: self.id(),
                temperature,
            },
        ))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&self, gamma: &Var<'t>, beta: &Var<'t>, eps: f64) -> Result<Var<'t>> {
        same_tape(self, gamma);
        same_tape(self, beta);
        let (value, xhat, inv_std) = {
            let (x, g, b) = (self.value(), gamma.value(), beta.value());
            let d = g.numel();
            if x.shape().last() != Some(&d) || b.numel() != d || g.rank() != 1 {
                return Err(Error::shape("layer_norm", x.shape(), g.shape()));
            }
            let rows = x.numel() / d;
            let mut xhat = vec![0.0; x.numel()];
            let mut inv_std = Vec::with_capacity(rows);
            let mut data = vec![0.0; x.numel()];
            for (r, xr) in x.data().chunks_exact(d).enumerate() {
                let mean = xr.iter().sum::<f64>() / d as f64;
                let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std.push(is);
                for j in 0..d {
                    let h = (xr[j] - mean) * is;
                    xhat[r * d + j] = h;
                    data[r * d + j] = h * g.data()[j] + b.data()[j];
                }
            }
            (
                Tensor {
                    shape: x.shape().to_vec(),
                    data,
                },
                xhat,
                inv_std,
            )
        };
        let op = Op::LayerNorm {
            x: self.id(),
            gamma: gamma.id(),
            beta: beta.id(),
            xhat,
            inv_std,
        };
        Ok(self.tape().push(value, op))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<'t>> {
        let value = {
            let x = self.value();
            let mut seen = vec![false; x.rank()];
            if axes.len() != x.rank()
                || axes.iter().any(|&a| a >= x.rank() || std::mem::replace(&mut seen[a], true))
            {
                return Err(Error::shape("permute", x.shape(), axes));
            }
            let (shape, data) = permute(x.data(), x.shape(), axes);
            Tensor { shape, data }
        };
        Ok(self.tape().push(
            value,
            Op::Permute {
                x: self.id(),
                axes: axes.to_vec(),
            },
        ))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(&self) -> Result<Var<'t>> {
        self.permute(&[1, 0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().reshape(shape)?;
        Ok(self.tape().push(value, Op::Reshape(self.id())))
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Param("concat of zero tensors".into()))?;
        let tape = first.tape();
        let (value, widths) = {
            let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
            let lead = &values[0].shape()[..values[0].rank().saturating_sub(1)];
            let mut widths = Vec::with_capacity(parts.len());
            for v in &values {
                if v.rank() == 0 || &v.shape()[..v.rank() - 1] != lead {
                    return Err(Error::shape("concat", values[0].shape(), v.shape()));
                }
                widths.push(*v.shape().last().unwrap());
            }
            let rows: usize = lead.iter().product();
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for (v, &w) in values.iter().zip(&widths) {
                    data.extend_from_slice(&v.data()[r * w..(r + 1) * w]);
                }
            }
            let mut shape = lead.to_vec();
            shape.push(total);
            (Tensor { shape, data }, widths)
        };
        let op = Op::Concat {
            parts: parts.iter().map(|p| p.id()).collect(),
            widths,
        };
        Ok(tape.push(value, op))
    }

    /// Selects rows (first-axis slices) by index; embedding lookup is this op
    /// applied to the embedding table.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Var<'t>> {
        let value = {
            let x = self.value();
            let Some((&extent, rest)) = x.shape().split_first() else {
                return Err(Error::shape("gather_rows", x.shape(), &[rows.len()]));
            };
            let width: usize = rest.iter().product();
            let mut data = Vec::with_capacity(rows.len() * width);
            for &r in rows {
                if r >= extent {
                    return Err(Error::Param(format!(
                        "row index {r} out of range for extent {extent}"
                    )));
                }
                data.extend_from_slice(&x.data()[r * width..(r + 1) * width]);
            }
            let mut shape = vec![rows.len()];
            shape.extend_from_slice(rest);
            Tensor::new(&shape, data)?
        };
        Ok(self.tape().push(
            value,
            Op::GatherRows {
                x: self.id(),
                rows: rows.to_vec(),
            },
        ))
    }

    /// Mean over the token axis of `[B, N, D]`, counting only positions where
    /// `mask[b, n] != 0`. Returns `[B, D]`.
    pub fn masked_mean_pool(&self, mask: &Tensor) -> Result<Var<'t>> {
        let (value, counts) = {
            let x = self.value();
            let [b, n, d] = x.shape()[..] else {
                return Err(Error::shape("masked_mean_pool", x.shape(), mask.shape()));
            };
            if mask.shape() != [b, n] {
                return Err(Error::shape("masked_mean_pool", x.shape(), mask.shape()));
            }
            let mut data = vec![0.0; b * d];
            let mut counts = Vec::with_capacity(b);
            for bi in 0..b {
                let m = mask.row(bi);
                let count: f64 = m.iter().sum();
                if count <= 0.0 {
                    return Err(Error::Degenerate(format!(
                        "mean pool over all-zero mask (example {bi})"
                    )));
                }
                let dst = &mut data[bi * d..(bi + 1) * d];
                for (t, &mv) in m.iter().enumerate() {
                    if mv != 0.0 {
                        let src = &x.data()[(bi * n + t) * d..(bi * n + t + 1) * d];
                        for (o, s) in dst.iter_mut().zip(src) {
                            *o += mv * s;
                        }
                    }
                }
                for o in dst.iter_mut() {
                    *o /= count;
                }
                counts.push(count);
            }
            (
                Tensor {
                    shape: vec![b, d],
                    data,
                },
                counts,
            )
        };
        let op = Op::MaskedMeanPool {
            x: self.id(),
            mask: mask.data().to_vec(),
            counts,
        };
        Ok(self.tape().push(value, op))
    }

    /// Multiplies consecutive equal-size groups of `self` by the entries of a
    /// vector: with `w` of length `G`, group `g` spans `numel / G` elements.
    pub fn scale_groups(&self, w: &Var<'t>) -> Result<Var<'t>> {
        same_tape(self, w);
        let value = {
            let (x, wv) = (self.value(), w.value());
            let groups = wv.numel();
            if wv.rank() != 1 || x.numel() % groups != 0 {
                return Err(Error::shape("scale_groups", x.shape(), wv.shape()));
            }
            let size = x.numel() / groups;
            let data = x
                .data()
                .iter()
                .enumerate()
                .map(|(i, v)| v * wv.data()[i / size])
                .collect();
            Tensor {
                shape: x.shape().to_vec(),
                data,
            }
        };
        Ok(self.tape().push(
            value,
            Op::ScaleGroups {
                x: self.id(),
                w: w.id(),
            },
        ))
    }

    /// Mean negative log-likelihood of `labels` under softmax(`self`), `self` `[B, C]`.
    pub fn cross_entropy(&self, labels: &[usize]) -> Result<Var<'t>> {
        let (loss, probs) = {
            let x = self.value();
            let [b, c] = x.shape()[..] else {
                return Err(Error::shape("cross_entropy", x.shape(), &[labels.len()]));
            };
            if b != labels.len() {
                return Err(Error::shape("cross_entropy", x.shape(), &[labels.len()]));
            }
            let mut probs = vec![0.0; b * c];
            let mut total = 0.0;
            for (i, &y) in labels.iter().enumerate() {
                if y >= c {
                    return Err(Error::Data(format!(
                        "label {y} of example {i} is outside [0, {c})"
                    )));
                }
                let row = x.row(i);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                let log_z = max + sum.ln();
                for (j, v) in row.iter().enumerate() {
                    probs[i * c + j] = (v - log_z).exp();
                }
                total += log_z - row[y];
            }
            (total / b as f64, probs)
        };
        let op = Op::CrossEntropy {
            logits: self.id(),
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.tape().push(Tensor::scalar(loss), op))
    }

    /// `Σ p log p` along the last axis, with `0 log 0 = 0`.
    pub fn plogp_sum(&self) -> Result<Var<'t>> {
        let value = {
            let p = self.value();
            let Some((&cols, lead)) = p.shape().split_last() else {
                return Err(Error::shape("plogp_sum", p.shape(), &[]));
            };
            let data = p
                .data()
                .chunks_exact(cols)
                .map(|r| r.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum())
                .collect();
            Tensor {
                shape: lead.to_vec(),
                data,
            }
        };
        Ok(self.tape().push(value, Op::PlogpSum(self.id())))
    }

    /// Inverted dropout; identity when `rate == 0`.
    pub fn dropout(&self, rate: f64, rng: &mut impl Rng) -> Result<Var<'t>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Param(format!("dropout rate {rate} not in [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(*self);
        }
        let shape = self.shape();
        let keep = 1.0 / (1.0 - rate);
        let numel = shape.iter().product();
        let mask: Vec<f64> = (0..numel)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let mask = self.tape().constant(Tensor { shape, data: mask });
        self.mul(&mask)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
