//! Differentiable primitives composed by the rest of the crate.

use crate::error::{Error, Result};

use super::gemm::{gemm, Operand};
use super::tensor::{numel, Tensor};

/// Default RoPE frequency base.
pub const ROPE_BASE: f64 = 10_000.0;

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Broadcast two batch shapes, numpy style (right-aligned, 1 stretches).
fn broadcast_batch(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every index of `out_batch`, the flat batch index into an operand whose
/// batch shape `src` broadcasts to it.
fn batch_offsets(src: &[usize], out_batch: &[usize]) -> Vec<usize> {
    let r = out_batch.len();
    let pad = r - src.len();
    let src_strides = strides(src);
    let mut eff = vec![0; r];
    for i in 0..src.len() {
        eff[pad + i] = if src[i] == 1 { 0 } else { src_strides[i] };
    }
    let total = numel(out_batch);
    let mut offs = Vec::with_capacity(total);
    let mut idx = vec![0usize; r];
    for _ in 0..total {
        offs.push(idx.iter().zip(&eff).map(|(i, s)| i * s).sum());
        for d in (0..r).rev() {
            idx[d] += 1;
            if idx[d] < out_batch[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    offs
}

pub(crate) fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let r = shape.len();
    let total = data.len();
    if r == 0 || total == 0 {
        return data.to_vec();
    }
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let inner = out_shape[r - 1];
    let inner_step = src_step[r - 1];
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; r - 1];
    let mut base = 0usize;
    loop {
        let mut off = base;
        for _ in 0..inner {
            out.push(data[off]);
            off += inner_step;
        }
        // Advance the outer odometer.
        let mut d = r - 1;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            base += src_step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= src_step[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.rank() {
        return Err(Error::InvalidShape {
            op,
            detail: format!("axis {axis} out of range for shape {:?}", t.shape()),
        });
    }
    Ok(())
}

#[inline]
fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    /// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]` with
    /// broadcasting over the leading (batch) extents.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let mismatch = || Error::Shape {
            op: "matmul",
            lhs: self.shape().to_vec(),
            rhs: other.shape().to_vec(),
        };
        if self.rank() < 2 || other.rank() < 2 {
            return Err(mismatch());
        }
        let (ra, rb) = (self.rank(), other.rank());
        let (m, k) = (self.shape()[ra - 2], self.shape()[ra - 1]);
        let (k2, n) = (other.shape()[rb - 2], other.shape()[rb - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let batch_a = self.shape()[..ra - 2].to_vec();
        let batch_b = other.shape()[..rb - 2].to_vec();
        let batch = broadcast_batch(&batch_a, &batch_b).ok_or_else(mismatch)?;
        let mut out_shape = batch.clone();
        out_shape.extend([m, n]);

        let (a, b) = (self.clone(), other.clone());
        if batch_b.is_empty() {
            // Fold the batch of `a` into its rows.
            let rows = numel(&batch_a) * m;
            let mut out = vec![0.0; rows * n];
            gemm(rows, k, n, Operand::plain(a.data()), Operand::plain(b.data()), &mut out, 0.0);
            return Tensor::from_op(
                "matmul",
                out_shape,
                out,
                vec![a.clone(), b.clone()],
                Box::new(move |g, _| {
                    let ga = a.requires_grad().then(|| {
                        let mut ga = vec![0.0; rows * k];
                        gemm(rows, n, k, Operand::plain(g), Operand::t(b.data()), &mut ga, 0.0);
                        ga
                    });
                    let gb = b.requires_grad().then(|| {
                        let mut gb = vec![0.0; k * n];
                        gemm(k, rows, n, Operand::t(a.data()), Operand::plain(g), &mut gb, 0.0);
                        gb
                    });
                    vec![ga, gb]
                }),
            );
        }

        let offs_a = batch_offsets(&batch_a, &batch);
        let offs_b = batch_offsets(&batch_b, &batch);
        let (mk, kn, mn) = (m * k, k * n, m * n);
        let mut out = vec![0.0; numel(&batch) * mn];
        for (i, (&oa, &ob)) in offs_a.iter().zip(&offs_b).enumerate() {
            gemm(
                m,
                k,
                n,
                Operand::plain(&a.data()[oa * mk..(oa + 1) * mk]),
                Operand::plain(&b.data()[ob * kn..(ob + 1) * kn]),
                &mut out[i * mn..(i + 1) * mn],
                0.0,
            );
        }
        Tensor::from_op(
            "matmul",
            out_shape,
            out,
            vec![a.clone(), b.clone()],
            Box::new(move |g, _| {
                let ga = a.requires_grad().then(|| {
                    let mut ga = vec![0.0; a.numel()];
                    for (i, &oa) in offs_a.iter().enumerate() {
                        let ob = offs_b[i];
                        gemm(
                            m,
                            n,
                            k,
                            Operand::plain(&g[i * mn..(i + 1) * mn]),
                            Operand::t(&b.data()[ob * kn..(ob + 1) * kn]),
                            &mut ga[oa * mk..(oa + 1) * mk],
                            1.0,
                        );
                    }
                    ga
                });
                let gb = b.requires_grad().then(|| {
                    let mut gb = vec![0.0; b.numel()];
                    for (i, &ob) in offs_b.iter().enumerate() {
                        let oa = offs_a[i];
                        gemm(
                            k,
                            m,
                            n,
                            Operand::t(&a.data()[oa * mk..(oa + 1) * mk]),
                            Operand::plain(&g[i * mn..(i + 1) * mn]),
                            &mut gb[ob * kn..(ob + 1) * kn],
                            1.0,
                        );
                    }
                    gb
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("add", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(x, y)| x + y).collect();
        let (ra, rb) = (self.requires_grad(), other.requires_grad());
        Tensor::from_op(
            "add",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _| vec![ra.then(|| g.to_vec()), rb.then(|| g.to_vec())]),
        )
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("sub", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(x, y)| x - y).collect();
        let (ra, rb) = (self.requires_grad(), other.requires_grad());
        Tensor::from_op(
            "sub",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _| vec![ra.then(|| g.to_vec()), rb.then(|| g.iter().map(|v| -v).collect())]),
        )
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        check_same_shape("mul", self, other)?;
        let data = self.data().iter().zip(other.data()).map(|(x, y)| x * y).collect();
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            "mul",
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _| {
                let ga = a.requires_grad().then(|| g.iter().zip(b.data()).map(|(g, y)| g * y).collect());
                let gb = b.requires_grad().then(|| g.iter().zip(a.data()).map(|(g, x)| g * x).collect());
                vec![ga, gb]
            }),
        )
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let data = self.data().iter().map(|x| x * c).collect();
        Tensor::from_op(
            "scale",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.iter().map(|v| v * c).collect())]),
        )
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|&x| stable_sigmoid(x)).collect();
        Tensor::from_op(
            "sigmoid",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(|g, y| vec![Some(g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect())]),
        )
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self) -> Result<Tensor> {
        let data = self.data().iter().map(|&x| x * stable_sigmoid(x)).collect();
        let x = self.clone();
        Tensor::from_op(
            "silu",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _| {
                let gx = g
                    .iter()
                    .zip(x.data())
                    .map(|(g, &x)| {
                        let s = stable_sigmoid(x);
                        g * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                vec![Some(gx)]
            }),
        )
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        check_axis("softmax", self, axis)?;
        let shape = self.shape().to_vec();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..len {
                    max = max.max(x[base + j * inner]);
                }
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (x[base + j * inner] - max).exp();
                    y[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..len {
                    y[base + j * inner] /= sum;
                }
            }
        }
        Tensor::from_op(
            "softmax",
            shape,
            y,
            vec![self.clone()],
            Box::new(move |g, y| {
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..len).map(|j| g[base + j * inner] * y[base + j * inner]).sum();
                        for j in 0..len {
                            let p = base + j * inner;
                            gx[p] = y[p] * (g[p] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Result<Tensor> {
        self.softmax(self.rank().saturating_sub(1))
    }

    /// Per-token normalization over the last axis followed by `gain`/`bias`.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self.shape().last().ok_or(Error::InvalidShape {
            op: "layer_norm",
            detail: "scalar input".into(),
        })?;
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gain.shape().to_vec(),
            });
        }
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let rows = if d == 0 { 0 } else { self.numel() / d };
        let x = self.data();
        let (gw, bw) = (gain.data(), bias.data());
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut y = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for c in 0..d {
                let h = (row[c] - mean) * inv;
                xhat[r * d + c] = h;
                y[r * d + c] = h * gw[c] + bw[c];
            }
        }
        let (gain_t, bias_t, x_t) = (gain.clone(), bias.clone(), self.clone());
        Tensor::from_op(
            "layer_norm",
            self.shape().to_vec(),
            y,
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |g, _| {
                let gw = gain_t.data();
                let gx = x_t.requires_grad().then(|| {
                    let mut gx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let (mut mean_dh, mut mean_dh_h) = (0.0, 0.0);
                        for c in 0..d {
                            let dh = g[r * d + c] * gw[c];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[r * d + c];
                        }
                        mean_dh /= d as f64;
                        mean_dh_h /= d as f64;
                        for c in 0..d {
                            let dh = g[r * d + c] * gw[c];
                            gx[r * d + c] = inv_std[r] * (dh - mean_dh - xhat[r * d + c] * mean_dh_h);
                        }
                    }
                    gx
                });
                let ggain = gain_t.requires_grad().then(|| {
                    let mut acc = vec![0.0; d];
                    for r in 0..rows {
                        for c in 0..d {
                            acc[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                    acc
                });
                let gbias = bias_t.requires_grad().then(|| {
                    let mut acc = vec![0.0; d];
                    for r in 0..rows {
                        for c in 0..d {
                            acc[c] += g[r * d + c];
                        }
                    }
                    acc
                });
                vec![gx, ggain, gbias]
            }),
        )
    }

    /// Rotary position embedding over `[.., seq, d]`: feature pair `(2i, 2i+1)`
    /// of the token at sequence slot `s` is rotated by
    /// `positions[s] * base^(-2i/d)`.
    pub fn rope(&self, positions: &[usize], base: f64) -> Result<Tensor> {
        if self.rank() < 2 {
            return Err(Error::InvalidShape {
                op: "rope",
                detail: format!("need [.., seq, d], got {:?}", self.shape()),
            });
        }
        let r = self.rank();
        let (seq, d) = (self.shape()[r - 2], self.shape()[r - 1]);
        if d % 2 != 0 {
            return Err(Error::Config(format!("rope needs an even head width, got {d}")));
        }
        if positions.len() != seq {
            return Err(Error::InvalidShape {
                op: "rope",
                detail: format!("{} positions for sequence length {seq}", positions.len()),
            });
        }
        let half = d / 2;
        let mut cos = vec![0.0; seq * half];
        let mut sin = vec![0.0; seq * half];
        for (s, &pos) in positions.iter().enumerate() {
            for i in 0..half {
                let theta = pos as f64 * base.powf(-((2 * i) as f64) / d as f64);
                cos[s * half + i] = theta.cos();
                sin[s * half + i] = theta.sin();
            }
        }
        let rotate = move |src: &[f64], sign: f64| -> Vec<f64> {
            let mut out = vec![0.0; src.len()];
            let blocks = if seq * d == 0 { 0 } else { src.len() / (seq * d) };
            for b in 0..blocks {
                for s in 0..seq {
                    let row = (b * seq + s) * d;
                    for i in 0..half {
                        let (c, sn) = (cos[s * half + i], sign * sin[s * half + i]);
                        let (x0, x1) = (src[row + 2 * i], src[row + 2 * i + 1]);
                        out[row + 2 * i] = x0 * c - x1 * sn;
                        out[row + 2 * i + 1] = x0 * sn + x1 * c;
                    }
                }
            }
            out
        };
        let data = rotate(self.data(), 1.0);
        Tensor::from_op(
            "rope",
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(rotate(g, -1.0))]),
        )
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = *parts.first().ok_or(Error::InvalidShape {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        check_axis("concat", first, axis)?;
        for p in &parts[1..] {
            let ok = p.rank() == first.rank()
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let widths: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
        let total_w: usize = widths.iter().sum();
        let mut shape = first.shape().to_vec();
        shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let mut data = Vec::with_capacity(outer * total_w);
        for o in 0..outer {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&p.data()[o * w..(o + 1) * w]);
            }
        }
        let needs: Vec<bool> = parts.iter().map(|p| p.requires_grad()).collect();
        Tensor::from_op(
            "concat",
            shape,
            data,
            parts.iter().map(|p| (*p).clone()).collect(),
            Box::new(move |g, _| {
                let mut offset = 0;
                widths
                    .iter()
                    .zip(&needs)
                    .map(|(&w, &need)| {
                        let start = offset;
                        offset += w;
                        need.then(|| {
                            let mut gp = Vec::with_capacity(outer * w);
                            for o in 0..outer {
                                gp.extend_from_slice(&g[o * total_w + start..o * total_w + start + w]);
                            }
                            gp
                        })
                    })
                    .collect()
            }),
        )
    }

    /// Feature-axis concatenation `[.., d1] ++ [.., d2] -> [.., d1 + d2]`.
    pub fn concat_last(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() == 0 || self.rank() != other.rank() || self.shape()[..self.rank() - 1] != other.shape()[..other.rank() - 1] {
            return Err(Error::Shape {
                op: "concat_last",
                lhs: self.shape().to_vec(),
                rhs: other.shape().to_vec(),
            });
        }
        Tensor::concat(&[self, other], self.rank() - 1)
    }

    /// Axis permutation; `out.shape[i] == self.shape[perm[i]]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidShape {
                op: "permute",
                detail: format!("{perm:?} is not a permutation of rank {r}"),
            });
        }
        let shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let data = permute_data(self.data(), self.shape(), perm);
        let mut inverse = vec![0; r];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let out_shape = shape.clone();
        Tensor::from_op(
            "permute",
            shape,
            data,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(permute_data(g, &out_shape, &inverse))]),
        )
    }

    /// Swap the last two axes.
    pub fn transpose_last2(&self) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                detail: format!("rank {r}"),
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.data().to_vec(),
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        )
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&self) -> Result<Tensor> {
        let n = self.numel();
        Tensor::from_op(
            "sum",
            Vec::new(),
            vec![self.data().iter().sum()],
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    /// Arithmetic mean along `axis`, which is removed from the shape.
    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        check_axis("mean_axis", self, axis)?;
        let shape = self.shape();
        let len = shape[axis];
        if len == 0 {
            return Err(Error::InvalidShape {
                op: "mean_axis",
                detail: "mean over an empty axis".into(),
            });
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let x = self.data();
        let mut y = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &x[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (acc, v) in y[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        let scale = 1.0 / len as f64;
        y.iter_mut().for_each(|v| *v *= scale);
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        Tensor::from_op(
            "mean_axis",
            out_shape,
            y,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            gx[(o * len + j) * inner + i] = g[o * inner + i] * scale;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Negative log-likelihood of `target` under `softmax(self)`, for logits `[C]`.
    pub fn cross_entropy(&self, target: usize) -> Result<Tensor> {
        if self.rank() != 1 || target >= self.numel() {
            return Err(Error::InvalidShape {
                op: "cross_entropy",
                detail: format!("logits {:?} with target {target}", self.shape()),
            });
        }
        let x = self.data();
        let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let probs: Vec<f64> = x.iter().map(|v| (v - lse).exp()).collect();
        Tensor::from_op(
            "cross_entropy",
            Vec::new(),
            vec![lse - x[target]],
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gx: Vec<f64> = probs.iter().map(|p| p * g[0]).collect();
                gx[target] -= g[0];
                vec![Some(gx)]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = RngState::new(seed);
        Tensor::new(shape, rng.normal_vec(numel(shape), 1.0)).unwrap()
    }

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let eye = Tensor::new(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let x = Tensor::new(&[3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(eye.matmul(&x).unwrap().data(), x.data());
        let two = Tensor::new(&[1, 1], vec![2.0]).unwrap();
        let three = Tensor::new(&[1, 1], vec![3.0]).unwrap();
        assert_eq!(two.matmul(&three).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = random(&[5, 7], 1);
        let b = random(&[7, 4], 2);
        let c = a.matmul(&b).unwrap();
        let reference = naive_matmul(a.data(), b.data(), 5, 7, 4);
        for (x, y) in c.data().iter().zip(&reference) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn batched_matmul_broadcasts() {
        let a = random(&[2, 3, 4, 5], 3);
        let b = random(&[3, 5, 2], 4);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 4, 2]);
        for i in 0..2 {
            for j in 0..3 {
                let ao = (i * 3 + j) * 20;
                let reference = naive_matmul(&a.data()[ao..ao + 20], &b.data()[j * 10..j * 10 + 10], 4, 5, 2);
                let co = (i * 3 + j) * 8;
                for (x, y) in c.data()[co..co + 8].iter().zip(&reference) {
                    assert!((x - y).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 5]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let c = Tensor::new(&[3], vec![2.5; 3]).unwrap().softmax(0).unwrap();
        for v in c.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let one = Tensor::new(&[1], vec![-7.0]).unwrap().softmax(0).unwrap();
        assert_eq!(one.data(), &[1.0]);
        // Log-space evaluation: p0 = 1 / (1 + e^-1000), p1 = e^(-1000 - ln(1 + e^-1000)).
        let big = Tensor::new(&[2], vec![1000.0, 0.0]).unwrap().softmax(0).unwrap();
        let p0 = 1.0 / (1.0 + (-1000.0f64).exp());
        let p1 = (-1000.0 - (-1000.0f64).exp().ln_1p()).exp();
        assert_eq!(big.data(), &[p0, p1]);
        assert!(big.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_over_middle_axis() {
        let x = random(&[2, 3, 4], 9);
        let y = x.softmax(1).unwrap();
        for o in 0..2 {
            for i in 0..4 {
                let s: f64 = (0..3).map(|j| y.data()[o * 12 + j * 4 + i]).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_examples() {
        let g = Tensor::full(&[3], 1.0);
        let b = Tensor::new(&[3], vec![0.1, -0.2, 0.3]).unwrap();
        let y = Tensor::full(&[1, 3], 4.0).layer_norm(&g, &b, 1e-5).unwrap();
        assert_eq!(y.data(), b.data());

        let g2 = Tensor::full(&[2], 1.0);
        let z = Tensor::zeros(&[2]);
        let y = Tensor::new(&[2], vec![-1.0, 1.0]).unwrap().layer_norm(&g2, &z, 1e-5).unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.data()[0] + expect).abs() < 1e-15 && (y.data()[1] - expect).abs() < 1e-15);

        let x = random(&[4, 8], 5);
        let y = x.layer_norm(&Tensor::full(&[8], 1.3), &Tensor::zeros(&[8]), 1e-5).unwrap();
        for r in 0..4 {
            let mean: f64 = y.data()[r * 8..(r + 1) * 8].iter().sum::<f64>() / 8.0;
            assert!(mean.abs() <= 1e-9);
        }
    }

    #[test]
    fn sigmoid_examples() {
        let x = Tensor::new(&[4], vec![0.0, 710.0, -3.0, 3.0]).unwrap();
        let y = x.sigmoid().unwrap();
        assert_eq!(y.data()[0], 0.5);
        assert_eq!(y.data()[1], 1.0);
        assert!((y.data()[2] - (1.0 - y.data()[3])).abs() < 1e-15);
        let neg = Tensor::new(&[1], vec![-710.0]).unwrap().sigmoid().unwrap();
        assert!(neg.data()[0] > 0.0 && neg.data()[0].is_finite());
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let x = Tensor::param(&[1], vec![0.0]).unwrap();
        x.sigmoid().unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.25]);
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let x = random(&[3, 1, 8], 11);
        let y = x.rope(&[0], ROPE_BASE).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn rope_rejects_odd_width() {
        let x = Tensor::zeros(&[2, 5]);
        assert!(matches!(x.rope(&[0, 1], ROPE_BASE), Err(Error::Config(_))));
    }

    #[test]
    fn concat_examples() {
        let a = Tensor::param(&[1], vec![1.0]).unwrap();
        let b = Tensor::param(&[1], vec![2.0]).unwrap();
        let c = a.concat_last(&b).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0]);
        c.sum().unwrap().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0]);
        assert_eq!(b.grad().unwrap(), vec![1.0]);

        let x = random(&[2, 3], 4);
        let empty = Tensor::zeros(&[2, 0]);
        assert_eq!(x.concat_last(&empty).unwrap().data(), x.data());
        assert!(x.concat_last(&Tensor::zeros(&[3, 1])).is_err());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let x = Tensor::param(&[2, 3], vec![0.5; 6]).unwrap();
        x.sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn permute_round_trip() {
        let x = random(&[2, 3, 4], 6);
        let y = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        assert_eq!(y.data()[(3 * 2 + 1) * 3 + 2], x.data()[(1 * 3 + 2) * 4 + 3]);
        let z = y.permute(&[1, 2, 0]).unwrap();
        assert_eq!(z.data(), x.data());
        assert!(x.permute(&[0, 0, 1]).is_err());
    }

    #[test]
    fn cross_entropy_value() {
        let logits = Tensor::new(&[2], vec![0.0, 0.0]).unwrap();
        let l = logits.cross_entropy(1).unwrap();
        assert!((l.item().unwrap() - 2f64.ln()).abs() < 1e-15);
    }
}
