//! Tensor operations and their gradients.
//!
//! Broadcasting is deliberately narrow: two operands combine elementwise only
//! when their shapes are identical or one shape is a trailing suffix of the
//! other (vector against matrix, unbatched against batched). That keeps every
//! backward rule a plain sum over leading axes.

use super::scalar;
use super::{grad_enabled, GradFn, Tensor};
use crate::error::{Error, Result};
use rayon::prelude::*;

#[inline(always)]
fn axpy(y: &mut [f32], a: f32, x: &[f32]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline(always)]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = [0.0f32; 4];
    let mut ia = a.chunks_exact(4);
    let mut ib = b.chunks_exact(4);
    for (ca, cb) in (&mut ia).zip(&mut ib) {
        acc[0] += ca[0] * cb[0];
        acc[1] += ca[1] * cb[1];
        acc[2] += ca[2] * cb[2];
        acc[3] += ca[3] * cb[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (xa, xb) in ia.remainder().iter().zip(ib.remainder()) {
        s += xa * xb;
    }
    s
}

fn track(inputs: &[&Tensor]) -> bool {
    grad_enabled() && inputs.iter().any(|t| t.requires_grad())
}

// ---------------------------------------------------------------------------
// Elementwise unary ops
// ---------------------------------------------------------------------------

macro_rules! unary_op {
    ($name:ident, $grad_struct:ident, $fwd:expr, $bwd:expr) => {
        struct $grad_struct {
            x: Tensor,
        }
        impl GradFn for $grad_struct {
            fn parents(&self) -> Vec<Tensor> {
                vec![self.x.clone()]
            }
            fn backward(&self, g: &[f32]) {
                if !self.x.requires_grad() {
                    return;
                }
                let xs = self.x.data();
                let d: Vec<f32> = xs
                    .iter()
                    .zip(g)
                    .map(|(&x, &go)| {
                        let f: fn(f32) -> f32 = $bwd;
                        go * f(x)
                    })
                    .collect();
                self.x.accumulate_grad(&d);
            }
        }
        impl Tensor {
            pub fn $name(&self) -> Tensor {
                let f: fn(f32) -> f32 = $fwd;
                let data: Vec<f32> = self.data().iter().map(|&v| f(v)).collect();
                if track(&[self]) {
                    Tensor::from_op(
                        self.shape().to_vec(),
                        data,
                        Box::new($grad_struct { x: self.clone() }),
                    )
                } else {
                    Tensor::untracked(self.shape().to_vec(), data)
                }
            }
        }
    };
}

unary_op!(silu, SiluGrad, scalar::silu, scalar::silu_grad);
unary_op!(gelu, GeluGrad, scalar::gelu, scalar::gelu_grad);
unary_op!(softplus, SoftplusGrad, scalar::softplus, scalar::sigmoid);
unary_op!(neg, NegGrad, |v| -v, |_| -1.0);
unary_op!(exp, ExpGrad, scalar::exp_saturating, scalar::exp_saturating);

struct ScaleGrad {
    x: Tensor,
    c: f32,
}
impl GradFn for ScaleGrad {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.x.clone()]
    }
    fn backward(&self, g: &[f32]) {
        if !self.x.requires_grad() {
            return;
        }
        let d: Vec<f32> = g.iter().map(|&v| v * self.c).collect();
        self.x.accumulate_grad(&d);
    }
}

impl Tensor {
    /// Multiplication by a constant.
    pub fn scale(&self, c: f32) -> Tensor {
        let data: Vec<f32> = self.data().iter().map(|&v| v * c).collect();
        if track(&[self]) {
            Tensor::from_op(
                self.shape().to_vec(),
                data,
                Box::new(ScaleGrad { x: self.clone(), c }),
            )
        } else {
            Tensor::untracked(self.shape().to_vec(), data)
        }
    }
}

// ---------------------------------------------------------------------------
// Elementwise binary ops with suffix broadcasting
// ---------------------------------------------------------------------------

/// Checks the suffix-broadcast contract and returns (big-is-lhs, repeats).
fn broadcast_spec(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(bool, usize)> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa == sb {
        return Ok((true, 1));
    }
    if sa.len() > sb.len() && sa.ends_with(sb) {
        return Ok((true, a.numel() / b.numel().max(1)));
    }
    if sb.len() > sa.len() && sb.ends_with(sa) {
        return Ok((false, b.numel() / a.numel().max(1)));
    }
    Err(Error::Shape {
        op,
        lhs: sa.to_vec(),
        rhs: sb.to_vec(),
    })
}

fn reduce_to_suffix(g: &[f32], small_len: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; small_len];
    for block in g.chunks_exact(small_len) {
        axpy(&mut out, 1.0, block);
    }
    out
}

/// Applies `f` elementwise, repeating `small` along the leading axes of `big`.
fn broadcast_map(big: &[f32], small: &[f32], f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    if big.len() == small.len() {
        return big.iter().zip(small).map(|(&a, &b)| f(a, b)).collect();
    }
    let mut out = Vec::with_capacity(big.len());
    for chunk in big.chunks_exact(small.len()) {
        out.extend(chunk.iter().zip(small).map(|(&a, &b)| f(a, b)));
    }
    out
}

struct AddGrad {
    a: Tensor,
    b: Tensor,
}
impl GradFn for AddGrad {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.a.clone(), self.b.clone()]
    }
    fn backward(&self, g: &[f32]) {
        for t in [&self.a, &self.b] {
            if !t.requires_grad() {
                continue;
            }
            if t.numel() == g.len() {
                t.accumulate_grad(g);
            } else {
                t.accumulate_grad(&reduce_to_suffix(g, t.numel()));
            }
        }
    }
}

struct MulGrad {
    a: Tensor,
    b: Tensor,
}
impl GradFn for MulGrad {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.a.clone(), self.b.clone()]
    }
    fn backward(&self, g: &[f32]) {
        let (ad, bd) = (self.a.data(), self.b.data());
        // d(big)/big = g * small-broadcast; d(small) = sum over blocks of g * big
        let grad_of = |own: &[f32], other: &[f32]| -> Vec<f32> {
            if own.len() >= other.len() {
                broadcast_map(g, other, |go, o| go * o)
            } else {
                let mut d = vec![0.0f32; own.len()];
                for (gc, oc) in g.chunks_exact(own.len()).zip(other.chunks_exact(own.len())) {
                    for ((di, &go), &ov) in d.iter_mut().zip(gc).zip(oc) {
                        *di += go * ov;
                    }
                }
                d
            }
        };
        if self.a.requires_grad() {
            self.a.accumulate_grad(&grad_of(ad, bd));
        }
        if self.b.requires_grad() {
            self.b.accumulate_grad(&grad_of(bd, ad));
        }
    }
}

impl Tensor {
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        let (lhs_big, _) = broadcast_spec("add", self, other)?;
        let (big, small) = if lhs_big { (self, other) } else { (other, self) };
        let data = broadcast_map(big.data(), small.data(), |a, b| a + b);
        if track(&[self, other]) {
            Ok(Tensor::from_op(
                big.shape().to_vec(),
                data,
                Box::new(AddGrad {
                    a: self.clone(),
                    b: other.clone(),
                }),
            ))
        } else {
            Ok(Tensor::untracked(big.shape().to_vec(), data))
        }
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        let (lhs_big, _) = broadcast_spec("mul", self, other)?;
        let (big, small) = if lhs_big { (self, other) } else { (other, self) };
        let data = broadcast_map(big.data(), small.data(), |a, b| a * b);
        if track(&[self, other]) {
            Ok(Tensor::from_op(
                big.shape().to_vec(),
                data,
                Box::new(MulGrad {
                    a: self.clone(),
                    b: other.clone(),
                }),
            ))
        } else {
            Ok(Tensor::untracked(big.shape().to_vec(), data))
        }
    }
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

struct SumGrad {
    x: Tensor,
}
impl GradFn for SumGrad {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.x.clone()]
    }
    fn backward(&self, g: &[f32]) {
        if !self.x.requires_grad() {
            return;
        }
        self.x.accumulate_grad(&vec![g[0]; self.x.numel()]);
    }
}

impl Tensor {
    /// Sum of all elements, as a scalar tensor.
    pub fn sum(&self) -> Tensor {
        let mut acc = 0.0f64;
        for &v in self.data() {
            acc += v as f64;
        }
        let data = vec![acc as f32];
        if track(&[self]) {
            Tensor::from_op(vec![1], data, Box::new(SumGrad { x: self.clone() }))
        } else {
            Tensor::untracked(vec![1], data)
        }
    }
}

// ---------------------------------------------------------------------------
// Matmul: batched lhs [.., M, K] against a 2-D rhs [K, P]
// ---------------------------------------------------------------------------

fn matmul_kernel(a: &[f32], b: &[f32], k: usize, p: usize, out: &mut [f32]) {
    out.par_chunks_mut(p).enumerate().for_each(|(i, orow)| {
        let arow = &a[i * k..(i + 1) * k];
        // 4-way k blocking: one pass over the output row per four inputs
        let k4 = k & !3;
        for kk in (0..k4).step_by(4) {
            let (a0, a1, a2, a3) = (arow[kk], arow[kk + 1], arow[kk + 2], arow[kk + 3]);
            let b0 = &b[kk * p..(kk + 1) * p];
            let b1 = &b[(kk + 1) * p..(kk + 2) * p];
            let b2 = &b[(kk + 2) * p..(kk + 3) * p];
            let b3 = &b[(kk + 3) * p..(kk + 4) * p];
            for ((((o, &v0), &v1), &v2), &v3) in
                orow.iter_mut().zip(b0).zip(b1).zip(b2).zip(b3)
            {
                *o += a0 * v0 + a1 * v1 + a2 * v2 + a3 * v3;
            }
        }
        for kk in k4..k {
            axpy(orow, arow[kk], &b[kk * p..(kk + 1) * p]);
        }
    });
}

struct MatmulGrad {
    a: Tensor,
    b: Tensor,
}
impl GradFn for MatmulGrad {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.a.clone(), self.b.clone()]
    }
    fn backward(&self, g: &[f32]) {
        let k = *self.b.shape().first().unwrap();
        let p = self.b.shape()[1];
        let rows = self.a.numel() / k;
        if self.a.requires_grad() {
            // da[r, k] = g[r, :] . b[k, :]
            let bd = self.b.data();
            let mut da = vec![0.0f32; rows * k];
            da.par_chunks_mut(k).enumerate().for_each(|(r, darow)| {
                let grow = &g[r * p..(r + 1) * p];
                for (kk, d) in darow.iter_mut().enumerate() {
                    *d = dot(grow, &bd[kk * p..(kk + 1) * p]);
                }
            });
            self.a.accumulate_grad(&da);
        }
        if self.b.requires_grad() {
            // db[k, p] = sum_r a[r, k] * g[r, p]
            let ad = self.a.data();
            let mut db = vec![0.0f32; k * p];
            db.par_chunks_mut(p).enumerate().for_each(|(kk, dbrow)| {
                let r4 = rows & !3;
                for r in (0..r4).step_by(4) {
                    let (a0, a1, a2, a3) = (
                        ad[r * k + kk],
                        ad[(r + 1) * k + kk],
                        ad[(r + 2) * k + kk],
                        ad[(r + 3) * k + kk],
                    );
                    let g0 = &g[r * p..(r + 1) * p];
                    let g1 = &g[(r + 1) * p..(r + 2) * p];
                    let g2 = &g[(r + 2) * p..(r + 3) * p];
                    let g3 = &g[(r + 3) * p..(r + 4) * p];
                    for ((((o, &v0), &v1), &v2), &v3) in
                        dbrow.iter_mut().zip(g0).zip(g1).zip(g2).zip(g3)
                    {
                        *o += a0 * v0 + a1 * v1 + a2 * v2 + a3 * v3;
                    }
                }
                for r in r4..rows {
                    axpy(dbrow, ad[r * k + kk], &g[r * p..(r + 1) * p]);
                }
            });
            self.b.accumulate_grad(&db);
        }
    }
}

impl Tensor {
    /// Contraction of the last axis of `self` with the first axis of a 2-D
    /// `rhs`: `[.., M, K] x [K, P] -> [.., M, P]`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape().len() < 2 || rhs.shape().len() != 2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let k = *self.shape().last().unwrap();
        if rhs.shape()[0] != k {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let p = rhs.shape()[1];
        let rows = self.numel() / k.max(1);
        let mut out = vec![0.0f32; rows * p];
        matmul_kernel(self.data(), rhs.data(), k, p, &mut out);
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = p;
        if track(&[self, rhs]) {
            Ok(Tensor::from_op(
                shape,
                out,
                Box::new(MatmulGrad {
                    a: self.clone(),
                    b: rhs.clone(),
                }),
            ))
        } else {
            Ok(Tensor::untracked(shape, out))
        }
    }
}

// ---------------------------------------------------------------------------
// Depthwise causal 1-D convolution on [B, E, L]
// ---------------------------------------------------------------------------

struct Conv1dGrad {
    x: Tensor,
    kernel: Tensor,
    bias: Tensor,
}
impl GradFn for Conv1dGrad {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.x.clone(), self.kernel.clone(), self.bias.clone()]
    }
    fn backward(&self, g: &[f32]) {
        let (bsz, e, l) = (self.x.shape()[0], self.x.shape()[1], self.x.shape()[2]);
        let k = self.kernel.shape()[1];
        let xd = self.x.data();
        let kd = self.kernel.data();
        if self.x.requires_grad() {
            // dx[t - (K-1) + kk] += w[kk] * g[t]  =>  per tap, one shifted axpy
            let mut dx = vec![0.0f32; xd.len()];
            for b in 0..bsz {
                for ee in 0..e {
                    let base = (b * e + ee) * l;
                    let grow = &g[base..base + l];
                    let dxrow = &mut dx[base..base + l];
                    for (kk, &kv) in kd[ee * k..(ee + 1) * k].iter().enumerate() {
                        let shift = (k - 1) - kk; // g index = x index + shift
                        if shift < l {
                            axpy(&mut dxrow[..l - shift], kv, &grow[shift..]);
                        }
                    }
                }
            }
            self.x.accumulate_grad(&dx);
        }
        if self.kernel.requires_grad() {
            // dw[kk] = sum_t g[t] * x[t - (K-1) + kk]  =>  per tap, one shifted dot
            let mut dk = vec![0.0f32; kd.len()];
            for b in 0..bsz {
                for ee in 0..e {
                    let base = (b * e + ee) * l;
                    let grow = &g[base..base + l];
                    let xrow = &xd[base..base + l];
                    for kk in 0..k {
                        let shift = (k - 1) - kk;
                        if shift < l {
                            dk[ee * k + kk] += dot(&grow[shift..], &xrow[..l - shift]);
                        }
                    }
                }
            }
            self.kernel.accumulate_grad(&dk);
        }
        if self.bias.requires_grad() {
            let mut db = vec![0.0f32; e];
            for b in 0..bsz {
                for (ee, acc) in db.iter_mut().enumerate() {
                    let base = (b * e + ee) * l;
                    for t in 0..l {
                        *acc += g[base + t];
                    }
                }
            }
            self.bias.accumulate_grad(&db);
        }
    }
}

impl Tensor {
    /// Depthwise causal convolution: channel `e` of the output depends only on
    /// channel `e` of the input, and position `t` only on positions `<= t`
    /// (the leading edge is zero-padded by K-1).
    pub fn conv1d_depthwise(&self, kernel: &Tensor, bias: &Tensor) -> Result<Tensor> {
        if self.shape().len() != 3 || kernel.shape().len() != 2 {
            return Err(Error::Shape {
                op: "conv1d_depthwise",
                lhs: self.shape().to_vec(),
                rhs: kernel.shape().to_vec(),
            });
        }
        let (bsz, e, l) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let k = kernel.shape()[1];
        if k == 0 {
            return Err(Error::Config(
                "conv1d_depthwise: kernel width must be positive".into(),
            ));
        }
        if kernel.shape()[0] != e || bias.shape() != [e] {
            return Err(Error::Shape {
                op: "conv1d_depthwise",
                lhs: vec![e],
                rhs: kernel.shape().to_vec(),
            });
        }
        let xd = self.data();
        let kd = kernel.data();
        let bd = bias.data();
        let mut out = vec![0.0f32; xd.len()];
        out.par_chunks_mut(e * l).enumerate().for_each(|(b, ob)| {
            for ee in 0..e {
                let xrow = &xd[(b * e + ee) * l..(b * e + ee + 1) * l];
                let orow = &mut ob[ee * l..(ee + 1) * l];
                orow.fill(bd[ee]);
                // y[x_idx + shift] += w[kk] * x[x_idx], shift = (K-1) - kk
                for (kk, &kv) in kd[ee * k..(ee + 1) * k].iter().enumerate() {
                    let shift = (k - 1) - kk;
                    if shift < l {
                        axpy(&mut orow[shift..], kv, &xrow[..l - shift]);
                    }
                }
            }
        });
        let shape = vec![bsz, e, l];
        if track(&[self, kernel, bias]) {
            Ok(Tensor::from_op(
                shape,
                out,
                Box::new(Conv1dGrad {
                    x: self.clone(),
                    kernel: kernel.clone(),
                    bias: bias.clone(),
                }),
            ))
        } else {
            Ok(Tensor::untracked(shape, out))
        }
    }
}

// ---------------------------------------------------------------------------
// Structural ops on the sequence axis (axis 1)
// ---------------------------------------------------------------------------

fn seq_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    if t.shape().len() < 2 {
        return Err(Error::Shape {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        });
    }
    let b = t.shape()[0];
    let l = t.shape()[1];
    let inner: usize = t.shape()[2..].iter().product();
    Ok((b, l, inner))
}

struct SliceSeqGrad {
    x: Tensor,
    start: usize,
    len: usize,
}
impl GradFn for SliceSeqGrad {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.x.clone()]
    }
    fn backward(&self, g: &[f32]) {
        if !self.x.requires_grad() {
            return;
        }
        let (b, l, inner) = seq_dims("slice_seq", &self.x).unwrap();
        let mut dx = vec![0.0f32; self.x.numel()];
        for bb in 0..b {
            for t in 0..self.len {
                let dst = (bb * l + self.start + t) * inner;
                let src = (bb * self.len + t) * inner;
                dx[dst..dst + inner].copy_from_slice(&g[src..src + inner]);
            }
        }
        self.x.accumulate_grad(&dx);
    }
}

struct ConcatSeqGrad {
    parts: Vec<Tensor>,
}
impl GradFn for ConcatSeqGrad {
    fn parents(&self) -> Vec<Tensor> {
        self.parts.clone()
    }
    fn backward(&self, g: &[f32]) {
        let (b, _, inner) = seq_dims("concat_seq", &self.parts[0]).unwrap();
        let total_l: usize = self.parts.iter().map(|p| p.shape()[1]).sum();
        let mut offset = 0usize;
        for part in &self.parts {
            let pl = part.shape()[1];
            if part.requires_grad() && pl > 0 {
                let mut dp = vec![0.0f32; part.numel()];
                for bb in 0..b {
                    let src = (bb * total_l + offset) * inner;
                    let dst = bb * pl * inner;
                    dp[dst..dst + pl * inner].copy_from_slice(&g[src..src + pl * inner]);
                }
                part.accumulate_grad(&dp);
            }
            offset += pl;
        }
    }
}

struct ReverseSeqGrad {
    x: Tensor,
}
impl GradFn for ReverseSeqGrad {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.x.clone()]
    }
    fn backward(&self, g: &[f32]) {
        if !self.x.requires_grad() {
            return;
        }
        let (b, l, inner) = seq_dims("reverse_seq", &self.x).unwrap();
        self.x.accumulate_grad(&reverse_axis1(g, b, l, inner));
    }
}

struct Transpose12Grad {
    x: Tensor,
}
impl GradFn for Transpose12Grad {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.x.clone()]
    }
    fn backward(&self, g: &[f32]) {
        if !self.x.requires_grad() {
            return;
        }
        let s = self.x.shape();
        // g has shape [B, s2, s1]; transpose back
        self.x
            .accumulate_grad(&transpose_12_data(g, s[0], s[2], s[1]));
    }
}

struct ReshapeGrad {
    x: Tensor,
}
impl GradFn for ReshapeGrad {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.x.clone()]
    }
    fn backward(&self, g: &[f32]) {
        if self.x.requires_grad() {
            self.x.accumulate_grad(g);
        }
    }
}

struct BroadcastLeadingGrad {
    x: Tensor,
}
impl GradFn for BroadcastLeadingGrad {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.x.clone()]
    }
    fn backward(&self, g: &[f32]) {
        if !self.x.requires_grad() {
            return;
        }
        self.x.accumulate_grad(&reduce_to_suffix(g, self.x.numel()));
    }
}

fn reverse_axis1(data: &[f32], b: usize, l: usize, inner: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; data.len()];
    for bb in 0..b {
        for t in 0..l {
            let src = (bb * l + t) * inner;
            let dst = (bb * l + (l - 1 - t)) * inner;
            out[dst..dst + inner].copy_from_slice(&data[src..src + inner]);
        }
    }
    out
}

fn transpose_12_data(data: &[f32], b: usize, d1: usize, d2: usize) -> Vec<f32> {
    // [B, d1, d2] -> [B, d2, d1]
    let mut out = vec![0.0f32; data.len()];
    for bb in 0..b {
        let base = bb * d1 * d2;
        for i in 0..d1 {
            for j in 0..d2 {
                out[base + j * d1 + i] = data[base + i * d2 + j];
            }
        }
    }
    out
}

impl Tensor {
    /// Contiguous range `[start, start+len)` along axis 1.
    pub fn slice_seq(&self, start: usize, len: usize) -> Result<Tensor> {
        let (b, l, inner) = seq_dims("slice_seq", self)?;
        if start + len > l {
            return Err(Error::Shape {
                op: "slice_seq",
                lhs: self.shape().to_vec(),
                rhs: vec![start, len],
            });
        }
        let mut out = vec![0.0f32; b * len * inner];
        let d = self.data();
        for bb in 0..b {
            let src = (bb * l + start) * inner;
            let dst = bb * len * inner;
            out[dst..dst + len * inner].copy_from_slice(&d[src..src + len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[1] = len;
        if track(&[self]) {
            Ok(Tensor::from_op(
                shape,
                out,
                Box::new(SliceSeqGrad {
                    x: self.clone(),
                    start,
                    len,
                }),
            ))
        } else {
            Ok(Tensor::untracked(shape, out))
        }
    }

    /// Reverses axis 1. `reverse_seq(reverse_seq(x))` is bit-identical to `x`.
    pub fn reverse_seq(&self) -> Result<Tensor> {
        let (b, l, inner) = seq_dims("reverse_seq", self)?;
        let out = reverse_axis1(self.data(), b, l, inner);
        if track(&[self]) {
            Ok(Tensor::from_op(
                self.shape().to_vec(),
                out,
                Box::new(ReverseSeqGrad { x: self.clone() }),
            ))
        } else {
            Ok(Tensor::untracked(self.shape().to_vec(), out))
        }
    }

    /// Swaps axes 1 and 2 of a rank-3 tensor.
    pub fn transpose_12(&self) -> Result<Tensor> {
        if self.shape().len() != 3 {
            return Err(Error::Shape {
                op: "transpose_12",
                lhs: self.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (b, d1, d2) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let out = transpose_12_data(self.data(), b, d1, d2);
        let shape = vec![b, d2, d1];
        if track(&[self]) {
            Ok(Tensor::from_op(
                shape,
                out,
                Box::new(Transpose12Grad { x: self.clone() }),
            ))
        } else {
            Ok(Tensor::untracked(shape, out))
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.data().to_vec();
        if track(&[self]) {
            Ok(Tensor::from_op(
                shape.to_vec(),
                data,
                Box::new(ReshapeGrad { x: self.clone() }),
            ))
        } else {
            Ok(Tensor::untracked(shape.to_vec(), data))
        }
    }

    /// Replicates the tensor `n` times along a new leading axis.
    pub fn broadcast_leading(&self, n: usize) -> Tensor {
        let mut out = Vec::with_capacity(n * self.numel());
        for _ in 0..n {
            out.extend_from_slice(self.data());
        }
        let mut shape = vec![n];
        shape.extend_from_slice(self.shape());
        if track(&[self]) {
            Tensor::from_op(shape, out, Box::new(BroadcastLeadingGrad { x: self.clone() }))
        } else {
            Tensor::untracked(shape, out)
        }
    }
}

/// Concatenation along axis 1. All parts must agree on every other axis.
pub fn concat_seq(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::Usage("concat_seq of zero tensors".into()));
    }
    let (b, _, inner) = seq_dims("concat_seq", &parts[0])?;
    let rank = parts[0].shape().len();
    let mut total_l = 0usize;
    for p in parts {
        let (pb, pl, pinner) = seq_dims("concat_seq", p)?;
        if pb != b || pinner != inner || p.shape().len() != rank {
            return Err(Error::Shape {
                op: "concat_seq",
                lhs: parts[0].shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
        total_l += pl;
    }
    let mut out = vec![0.0f32; b * total_l * inner];
    let mut offset = 0usize;
    for p in parts {
        let pl = p.shape()[1];
        let d = p.data();
        for bb in 0..b {
            let dst = (bb * total_l + offset) * inner;
            let src = bb * pl * inner;
            out[dst..dst + pl * inner].copy_from_slice(&d[src..src + pl * inner]);
        }
        offset += pl;
    }
    let mut shape = parts[0].shape().to_vec();
    shape[1] = total_l;
    let refs: Vec<&Tensor> = parts.iter().collect();
    if track(&refs) {
        Ok(Tensor::from_op(
            shape,
            out,
            Box::new(ConcatSeqGrad {
                parts: parts.to_vec(),
            }),
        ))
    } else {
        Ok(Tensor::untracked(shape, out))
    }
}

// ---------------------------------------------------------------------------
// Layer norm over the last axis
// ---------------------------------------------------------------------------

struct LayerNormGrad {
    x: Tensor,
    gain: Tensor,
    bias: Tensor,
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
}
impl GradFn for LayerNormGrad {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.x.clone(), self.gain.clone(), self.bias.clone()]
    }
    fn backward(&self, g: &[f32]) {
        let d = *self.x.shape().last().unwrap();
        let positions = self.x.numel() / d;
        let gd = self.gain.data();
        if self.x.requires_grad() {
            let mut dx = vec![0.0f32; self.x.numel()];
            for pos in 0..positions {
                let o = pos * d;
                let go = &g[o..o + d];
                let xh = &self.xhat[o..o + d];
                let istd = self.inv_std[pos];
                let mut mean_gy = 0.0f32;
                let mut mean_gyxh = 0.0f32;
                for i in 0..d {
                    let gy = go[i] * gd[i];
                    mean_gy += gy;
                    mean_gyxh += gy * xh[i];
                }
                mean_gy /= d as f32;
                mean_gyxh /= d as f32;
                for i in 0..d {
                    let gy = go[i] * gd[i];
                    dx[o + i] = istd * (gy - mean_gy - xh[i] * mean_gyxh);
                }
            }
            self.x.accumulate_grad(&dx);
        }
        if self.gain.requires_grad() {
            let mut dg = vec![0.0f32; d];
            for pos in 0..positions {
                let o = pos * d;
                for i in 0..d {
                    dg[i] += g[o + i] * self.xhat[o + i];
                }
            }
            self.gain.accumulate_grad(&dg);
        }
        if self.bias.requires_grad() {
            let mut db = vec![0.0f32; d];
            for pos in 0..positions {
                let o = pos * d;
                for i in 0..d {
                    db[i] += g[o + i];
                }
            }
            self.bias.accumulate_grad(&db);
        }
    }
}

impl Tensor {
    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// the affine `gain * xhat + bias`.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f32) -> Result<Tensor> {
        if eps <= 0.0 {
            return Err(Error::Config(format!(
                "layer_norm: eps must be positive, got {eps}"
            )));
        }
        let d = *self.shape().last().ok_or(Error::Shape {
            op: "layer_norm",
            lhs: vec![],
            rhs: vec![],
        })?;
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gain.shape().to_vec(),
            });
        }
        let positions = self.numel() / d;
        let xd = self.data();
        let gd = gain.data();
        let bd = bias.data();
        let mut out = vec![0.0f32; self.numel()];
        let mut xhat = vec![0.0f32; self.numel()];
        let mut inv_std = vec![0.0f32; positions];
        out.chunks_mut(d)
            .zip(xhat.chunks_mut(d))
            .zip(inv_std.iter_mut())
            .enumerate()
            .for_each(|(pos, ((orow, xhrow), istd))| {
                let xrow = &xd[pos * d..(pos + 1) * d];
                let mut mean = 0.0f32;
                for &v in xrow {
                    mean += v;
                }
                mean /= d as f32;
                let mut var = 0.0f32;
                for &v in xrow {
                    let c = v - mean;
                    var += c * c;
                }
                var /= d as f32;
                let s = 1.0 / (var + eps).sqrt();
                *istd = s;
                for i in 0..d {
                    let xh = (xrow[i] - mean) * s;
                    xhrow[i] = xh;
                    orow[i] = gd[i] * xh + bd[i];
                }
            });
        let shape = self.shape().to_vec();
        if track(&[self, gain, bias]) {
            Ok(Tensor::from_op(
                shape,
                out,
                Box::new(LayerNormGrad {
                    x: self.clone(),
                    gain: gain.clone(),
                    bias: bias.clone(),
                    xhat,
                    inv_std,
                }),
            ))
        } else {
            Ok(Tensor::untracked(shape, out))
        }
    }
}

// ---------------------------------------------------------------------------
// Label-smoothed cross entropy
// ---------------------------------------------------------------------------

struct CrossEntropyGrad {
    logits: Tensor,
    targets: Vec<usize>,
    smoothing: f32,
}
impl GradFn for CrossEntropyGrad {
    fn parents(&self) -> Vec<Tensor> {
        vec![self.logits.clone()]
    }
    fn backward(&self, g: &[f32]) {
        if !self.logits.requires_grad() {
            return;
        }
        let b = self.logits.shape()[0];
        let c = self.logits.shape()[1];
        let zd = self.logits.data();
        let s = self.smoothing;
        let scale = g[0] / b as f32;
        let mut dz = vec![0.0f32; zd.len()];
        for row in 0..b {
            let z = &zd[row * c..(row + 1) * c];
            let m = z.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut denom = 0.0f32;
            for &v in z {
                denom += (v - m).exp();
            }
            for i in 0..c {
                let p = (z[i] - m).exp() / denom;
                let q = if i == self.targets[row] { 1.0 - s } else { 0.0 } + s / c as f32;
                dz[row * c + i] = scale * (p - q);
            }
        }
        self.logits.accumulate_grad(&dz);
    }
}

/// Mean label-smoothed cross entropy over a batch of logits `[B, C]`.
///
/// With smoothing `s` the per-example loss is
/// `(1-s) * CE(target) + s * mean_c CE(c)`.
pub fn cross_entropy_label_smoothed(
    logits: &Tensor,
    targets: &[usize],
    smoothing: f32,
) -> Result<Tensor> {
    if logits.shape().len() != 2 {
        return Err(Error::Shape {
            op: "cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: vec![targets.len()],
        });
    }
    let b = logits.shape()[0];
    let c = logits.shape()[1];
    if targets.len() != b {
        return Err(Error::Shape {
            op: "cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: vec![targets.len()],
        });
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(Error::Config(format!(
            "cross_entropy: smoothing must be in [0, 1), got {smoothing}"
        )));
    }
    for (row, &t) in targets.iter().enumerate() {
        if t >= c {
            return Err(Error::Data(format!(
                "cross_entropy: target {t} out of range for {c} classes (row {row})"
            )));
        }
    }
    let zd = logits.data();
    let mut total = 0.0f64;
    for row in 0..b {
        let z = &zd[row * c..(row + 1) * c];
        let m = z.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let mut denom = 0.0f64;
        let mut zsum = 0.0f64;
        for &v in z {
            denom += ((v - m) as f64).exp();
            zsum += v as f64;
        }
        let lse = m as f64 + denom.ln();
        let tgt = z[targets[row]] as f64;
        let s = smoothing as f64;
        total += lse - (1.0 - s) * tgt - s * zsum / c as f64;
    }
    let loss = (total / b as f64) as f32;
    if track(&[logits]) {
        Ok(Tensor::from_op(
            vec![1],
            vec![loss],
            Box::new(CrossEntropyGrad {
                logits: logits.clone(),
                targets: targets.to_vec(),
                smoothing,
            }),
        ))
    } else {
        Ok(Tensor::untracked(vec![1], vec![loss]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::rng::{rng_from_seed, uniform_in};
    use proptest::prelude::*;

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rng_from_seed(seed);
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| uniform_in(&mut rng, -1.0, 1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![3.0, 4.0]).unwrap();
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.data(), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_row_times_column() {
        let a = Tensor::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1], vec![3.0, 4.0]).unwrap();
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn matmul_grad_of_sum_is_column_sums_of_rhs() {
        // d sum(a @ b) / da[i, k] = sum_p b[k, p]
        let a = rand_tensor(&[2, 3], 1).tracked();
        let b = rand_tensor(&[3, 4], 2);
        let loss = a.matmul(&b).unwrap().sum();
        loss.backward().unwrap();
        let ga = a.grad().unwrap();
        for i in 0..2 {
            for k in 0..3 {
                let expect: f32 = (0..4).map(|p| b.data()[k * 4 + p]).sum();
                assert!((ga[i * 3 + k] - expect).abs() < 1e-5);
            }
        }
        // and against the finite-difference oracle
        let fd = gradcheck::finite_diff(a.data(), 1e-3, |xs| {
            let at = Tensor::from_vec(&[2, 3], xs.to_vec()).unwrap();
            at.matmul(&b).unwrap().sum().item()
        });
        assert!(gradcheck::max_rel_err(&ga, &fd) < 1e-3);
    }

    #[test]
    fn conv_identity_kernel() {
        let x = rand_tensor(&[1, 2, 5], 3);
        let k = Tensor::from_vec(&[2, 1], vec![1.0, 1.0]).unwrap();
        let b = Tensor::zeros(&[2]);
        let y = x.conv1d_depthwise(&k, &b).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv_causal_sum_of_adjacent() {
        let x = Tensor::from_vec(&[1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let k = Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = x.conv1d_depthwise(&k, &b).unwrap();
        assert_eq!(y.data(), &[1.0, 3.0, 5.0]);
    }

    #[test]
    fn conv_matches_naive_loop_oracle() {
        let (bsz, e, l, k) = (1usize, 2usize, 8usize, 4usize);
        let x = rand_tensor(&[bsz, e, l], 4);
        let kern = rand_tensor(&[e, k], 5);
        let bias = rand_tensor(&[e], 6);
        let y = x.conv1d_depthwise(&kern, &bias).unwrap();
        // naive O(E*L*K) oracle with explicit zero padding
        for ee in 0..e {
            for t in 0..l {
                let mut acc = bias.data()[ee];
                for kk in 0..k {
                    let src = t as isize + kk as isize - (k as isize - 1);
                    let xv = if src >= 0 { x.data()[ee * l + src as usize] } else { 0.0 };
                    acc += kern.data()[ee * k + kk] * xv;
                }
                assert!((y.data()[ee * l + t] - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn conv_kernel_wider_than_input_is_allowed() {
        let x = Tensor::from_vec(&[1, 1, 2], vec![1.0, 2.0]).unwrap();
        let k = Tensor::from_vec(&[1, 5], vec![1.0; 5]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = x.conv1d_depthwise(&k, &b).unwrap();
        assert_eq!(y.data(), &[1.0, 3.0]);
    }

    #[test]
    fn conv_zero_width_kernel_is_config_error() {
        let x = Tensor::zeros(&[1, 1, 3]);
        let k = Tensor::zeros(&[1, 0]);
        let b = Tensor::zeros(&[1]);
        assert!(matches!(
            x.conv1d_depthwise(&k, &b),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn add_suffix_broadcast() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let v = Tensor::from_vec(&[2], vec![10.0, 20.0]).unwrap();
        let out = a.add(&v).unwrap();
        assert_eq!(out.data(), &[11.0, 22.0, 13.0, 24.0]);
        // and grads reduce over the leading axis
        let a = a.tracked();
        let v = v.tracked();
        a.add(&v).unwrap().sum().backward().unwrap();
        assert_eq!(v.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn add_rejects_non_suffix_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2]);
        assert!(a.add(&b).is_err());
    }

    #[test]
    fn layer_norm_normalizes_last_axis() {
        let x = rand_tensor(&[3, 8], 7).scale(4.0);
        let g = Tensor::full(&[8], 1.0);
        let b = Tensor::zeros(&[8]);
        let y = x.layer_norm(&g, &b, 1e-5).unwrap();
        for row in y.data().chunks(8) {
            let mean: f32 = row.iter().sum::<f32>() / 8.0;
            let var: f32 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 8.0;
            assert!(mean.abs() < 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
    }

    #[test]
    fn layer_norm_rejects_bad_eps() {
        let x = Tensor::zeros(&[2, 4]);
        let g = Tensor::full(&[4], 1.0);
        let b = Tensor::zeros(&[4]);
        assert!(matches!(x.layer_norm(&g, &b, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_c() {
        for c in [2usize, 12, 35] {
            let logits = Tensor::full(&[3, c], 0.7);
            let loss = cross_entropy_label_smoothed(&logits, &[0, c / 2, c - 1], 0.1).unwrap();
            assert!((loss.item() - (c as f32).ln()).abs() < 1e-5);
        }
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let logits = Tensor::zeros(&[1, 4]);
        assert!(matches!(
            cross_entropy_label_smoothed(&logits, &[4], 0.1),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        // matmul -> silu -> layer_norm -> sum
        let x = rand_tensor(&[2, 6], 8).tracked();
        let w = rand_tensor(&[6, 4], 9);
        let g = Tensor::full(&[4], 1.0);
        let b = Tensor::zeros(&[4]);
        let loss = x
            .matmul(&w)
            .unwrap()
            .silu()
            .layer_norm(&g, &b, 1e-5)
            .unwrap()
            .sum();
        loss.backward().unwrap();
        let analytic = x.grad().unwrap();
        let fd = gradcheck::finite_diff(x.data(), 1e-3, |xs| {
            let xt = Tensor::from_vec(&[2, 6], xs.to_vec()).unwrap();
            xt.matmul(&w)
                .unwrap()
                .silu()
                .layer_norm(&g, &b, 1e-5)
                .unwrap()
                .sum()
                .item()
        });
        assert!(
            gradcheck::max_rel_err(&analytic, &fd) < 1e-3,
            "rel err {}",
            gradcheck::max_rel_err(&analytic, &fd)
        );
    }

    #[test]
    fn slice_concat_roundtrip() {
        let x = rand_tensor(&[2, 5, 3], 10);
        let a = x.slice_seq(0, 2).unwrap();
        let b = x.slice_seq(2, 3).unwrap();
        let back = concat_seq(&[a, b]).unwrap();
        assert_eq!(back.data(), x.data());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn reverse_seq_is_an_involution(b in 1usize..3, l in 1usize..9, inner in 1usize..5, seed in 0u64..1000) {
            let x = rand_tensor(&[b, l, inner], seed);
            let back = x.reverse_seq().unwrap().reverse_seq().unwrap();
            prop_assert_eq!(back.data(), x.data());
        }

        #[test]
        fn conv_is_causal(t_perturb in 0usize..8, seed in 0u64..1000) {
            let (e, l, k) = (2usize, 8usize, 3usize);
            let x = rand_tensor(&[1, e, l], seed);
            let kern = rand_tensor(&[e, k], seed + 1);
            let bias = rand_tensor(&[e], seed + 2);
            let y0 = x.conv1d_depthwise(&kern, &bias).unwrap();
            let mut bumped = x.data().to_vec();
            for ee in 0..e {
                bumped[ee * l + t_perturb] += 1.0;
            }
            let y1 = Tensor::from_vec(&[1, e, l], bumped).unwrap()
                .conv1d_depthwise(&kern, &bias).unwrap();
            for ee in 0..e {
                for t in 0..t_perturb {
                    prop_assert_eq!(y0.data()[ee * l + t], y1.data()[ee * l + t]);
                }
            }
        }

        #[test]
        fn transpose_12_roundtrip(b in 1usize..3, d1 in 1usize..6, d2 in 1usize..6, seed in 0u64..1000) {
            let x = rand_tensor(&[b, d1, d2], seed);
            let back = x.transpose_12().unwrap().transpose_12().unwrap();
            prop_assert_eq!(back.data(), x.data());
        }
    }
}
