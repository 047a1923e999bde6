//! The state space recurrence: discretization, the sequential selective scan,
//! the time-invariant convolution-kernel form, and the reversed scan.
//!
//! Discretization follows the operational form used by the scan itself:
//! `A_bar = exp(delta * A)` and the simplified `B_bar = delta * B`. The exact
//! zero-order-hold form of `B_bar` is kept in [`discretize_zoh`] as a
//! reference for tests; the two agree to first order in `delta`.

use crate::error::{Error, Result};
use crate::tensor::scalar::fast_exp;
use crate::tensor::{GradFn, Tensor};
use rayon::prelude::*;

/// Flushes magnitudes below 1e-30 to zero. The recurrent states decay
/// geometrically and would otherwise crawl through the denormal range, where
/// x86 cores fall back to microcode (~100x slower per op).
#[inline(always)]
fn flush_small(x: f32) -> f32 {
    if x.abs() < 1e-30 {
        0.0
    } else {
        x
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

#[inline(always)]
fn sum4(a: &[f32]) -> f32 {
    let mut acc = [0.0f32; 4];
    let mut ia = a.chunks_exact(4);
    for ca in &mut ia {
        acc[0] += ca[0];
        acc[1] += ca[1];
        acc[2] += ca[2];
        acc[3] += ca[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for xa in ia.remainder() {
        s += xa;
    }
    s
}

/// Time-invariant scan parameters: the continuous state matrix, stored
/// diagonally per channel (entry `(e, n)` is the n-th diagonal element for
/// channel `e`).
pub struct SsmParams {
    pub a: Tensor, // [E, N]
}

impl SsmParams {
    /// S4D-real initialization: `A[e, n] = -(n + 1)`, identical across
    /// channels. Strictly negative, so `exp(delta * A)` contracts.
    pub fn s4d_real(e_dim: usize, n_state: usize) -> SsmParams {
        let mut data = Vec::with_capacity(e_dim * n_state);
        for _ in 0..e_dim {
            for n in 0..n_state {
                data.push(-((n + 1) as f32));
            }
        }
        SsmParams {
            a: Tensor::from_vec(&[e_dim, n_state], data).unwrap(),
        }
    }
}

/// Input-dependent scan parameters produced by the selection projections.
pub struct SelectiveInputs {
    pub delta: Tensor,  // [B, L, E], positive step sizes
    pub b_in: Tensor,   // [B, L, N]
    pub c_in: Tensor,   // [B, L, N]
    pub x: Tensor,      // [B, L, E]
    pub d_skip: Tensor, // [E], direct feedthrough per channel
}

/// Discretized parameters, materialized per position.
pub struct DiscretizedParams {
    pub a_bar: Tensor, // [B, L, E, N]
    pub b_bar: Tensor, // [B, L, E, N]
}

fn check_delta_positive(delta: &Tensor) -> Result<()> {
    for (i, &v) in delta.data().iter().enumerate() {
        if !(v > 0.0) {
            return Err(Error::Numeric(format!(
                "discretize: delta must be positive, got {v} at index {i}"
            )));
        }
    }
    Ok(())
}

fn discretize_shapes(a: &Tensor, delta: &Tensor, b_in: &Tensor) -> Result<(usize, usize, usize, usize)> {
    if a.shape().len() != 2 || delta.shape().len() != 3 || b_in.shape().len() != 3 {
        return Err(Error::Shape {
            op: "discretize",
            lhs: delta.shape().to_vec(),
            rhs: a.shape().to_vec(),
        });
    }
    let (e, n) = (a.shape()[0], a.shape()[1]);
    let (bsz, l) = (delta.shape()[0], delta.shape()[1]);
    if delta.shape()[2] != e || b_in.shape() != [bsz, l, n] {
        return Err(Error::Shape {
            op: "discretize",
            lhs: delta.shape().to_vec(),
            rhs: b_in.shape().to_vec(),
        });
    }
    Ok((bsz, l, e, n))
}

/// Discretizes `(A, B)` with per-position step sizes:
/// `A_bar = exp(delta * A)`, `B_bar = delta * B` (simplified Euler form).
///
/// Evaluation-only: the outputs carry no tape. The differentiable path embeds
/// the same discretization inside [`selective_scan_seq`].
pub fn discretize(a: &Tensor, delta: &Tensor, b_in: &Tensor) -> Result<DiscretizedParams> {
    let (bsz, l, e, n) = discretize_shapes(a, delta, b_in)?;
    check_delta_positive(delta)?;
    let (ad, dd, bd) = (a.data(), delta.data(), b_in.data());
    let mut a_bar = vec![0.0f32; bsz * l * e * n];
    let mut b_bar = vec![0.0f32; bsz * l * e * n];
    for bl in 0..bsz * l {
        for ee in 0..e {
            let d = dd[bl * e + ee];
            let out = bl * e * n + ee * n;
            for nn in 0..n {
                a_bar[out + nn] = (d * ad[ee * n + nn]).exp();
                b_bar[out + nn] = d * bd[bl * n + nn];
            }
        }
    }
    let shape = vec![bsz, l, e, n];
    Ok(DiscretizedParams {
        a_bar: Tensor::from_vec(&shape, a_bar)?,
        b_bar: Tensor::from_vec(&shape, b_bar)?,
    })
}

/// Exact zero-order-hold discretization:
/// `B_bar = (delta A)^-1 (exp(delta A) - I) * delta B`, which for diagonal A
/// reduces to `(exp(delta a) - 1) / a * b` per element. Reference oracle for
/// tests; agrees with [`discretize`] to first order in `delta`.
pub fn discretize_zoh(a: &Tensor, delta: &Tensor, b_in: &Tensor) -> Result<DiscretizedParams> {
    let (bsz, l, e, n) = discretize_shapes(a, delta, b_in)?;
    check_delta_positive(delta)?;
    let (ad, dd, bd) = (a.data(), delta.data(), b_in.data());
    let mut a_bar = vec![0.0f32; bsz * l * e * n];
    let mut b_bar = vec![0.0f32; bsz * l * e * n];
    for bl in 0..bsz * l {
        for ee in 0..e {
            let d = dd[bl * e + ee];
            let out = bl * e * n + ee * n;
            for nn in 0..n {
                let av = ad[ee * n + nn];
                let exp_da = ((d * av) as f64).exp();
                a_bar[out + nn] = exp_da as f32;
                let factor = if av.abs() < 1e-12 {
                    d as f64
                } else {
                    (exp_da - 1.0) / av as f64
                };
                b_bar[out + nn] = (factor * bd[bl * n + nn] as f64) as f32;
            }
        }
    }
    let shape = vec![bsz, l, e, n];
    Ok(DiscretizedParams {
        a_bar: Tensor::from_vec(&shape, a_bar)?,
        b_bar: Tensor::from_vec(&shape, b_bar)?,
    })
}

struct ScanDims {
    bsz: usize,
    l: usize,
    e: usize,
    n: usize,
}

fn scan_shapes(inputs: &SelectiveInputs, a: &Tensor) -> Result<ScanDims> {
    if a.shape().len() != 2 || inputs.x.shape().len() != 3 {
        return Err(Error::Shape {
            op: "selective_scan",
            lhs: inputs.x.shape().to_vec(),
            rhs: a.shape().to_vec(),
        });
    }
    let (e, n) = (a.shape()[0], a.shape()[1]);
    let (bsz, l) = (inputs.x.shape()[0], inputs.x.shape()[1]);
    let ok = inputs.x.shape() == [bsz, l, e]
        && inputs.delta.shape() == [bsz, l, e]
        && inputs.b_in.shape() == [bsz, l, n]
        && inputs.c_in.shape() == [bsz, l, n]
        && inputs.d_skip.shape() == [e];
    if !ok {
        return Err(Error::Shape {
            op: "selective_scan",
            lhs: inputs.delta.shape().to_vec(),
            rhs: a.shape().to_vec(),
        });
    }
    Ok(ScanDims { bsz, l, e, n })
}

fn check_no_nan(name: &str, t: &Tensor) -> Result<()> {
    for &v in t.data() {
        if v.is_nan() {
            return Err(Error::Numeric(format!(
                "selective_scan: NaN in input `{name}`"
            )));
        }
    }
    Ok(())
}

// Lane kernels. The const-generic variants let the state-dimension loops
// unroll and vectorize for the standard N; the dynamic variants cover any
// other state size with the same arithmetic and reduction order, so both
// paths produce identical bits for equal inputs.

#[inline(never)] // see bwd_lane_fixed
fn fwd_lane_fixed<const N: usize>(
    l: usize,
    e: usize,
    ee: usize,
    dd: &[f32],
    xd: &[f32],
    bd: &[f32],
    cd: &[f32],
    a_row: &[f32; N],
    skip: f32,
    yb: &mut [f32],
    mut h_store: Option<&mut [f32]>,
) {
    let mut h = [0.0f32; N];
    for t in 0..l {
        let d = dd[t * e + ee];
        let xv = xd[t * e + ee];
        let dx = d * xv;
        let brow: &[f32; N] = bd[t * N..(t + 1) * N].try_into().unwrap();
        let crow: &[f32; N] = cd[t * N..(t + 1) * N].try_into().unwrap();
        for j in 0..N {
            h[j] = flush_small(fast_exp(d * a_row[j]) * h[j] + dx * brow[j]);
        }
        if let Some(store) = h_store.as_deref_mut() {
            store[t * N..(t + 1) * N].copy_from_slice(&h);
        }
        yb[t * e + ee] = dot(crow, &h) + skip * xv;
    }
}

#[inline(never)]
fn fwd_lane_dyn(
    n: usize,
    l: usize,
    e: usize,
    ee: usize,
    dd: &[f32],
    xd: &[f32],
    bd: &[f32],
    cd: &[f32],
    a_row: &[f32],
    skip: f32,
    yb: &mut [f32],
    mut h_store: Option<&mut [f32]>,
    h: &mut [f32],
) {
    h.fill(0.0);
    for t in 0..l {
        let d = dd[t * e + ee];
        let xv = xd[t * e + ee];
        let dx = d * xv;
        let brow = &bd[t * n..(t + 1) * n];
        let crow = &cd[t * n..(t + 1) * n];
        for ((hj, &aj), &bj) in h.iter_mut().zip(a_row).zip(brow) {
            *hj = flush_small(fast_exp(d * aj) * *hj + dx * bj);
        }
        if let Some(store) = h_store.as_deref_mut() {
            store[t * n..(t + 1) * n].copy_from_slice(h);
        }
        yb[t * e + ee] = dot(crow, h) + skip * xv;
    }
}

#[allow(clippy::too_many_arguments)]
#[inline(never)] // out-of-line keeps the slice args noalias, which the
                 // vectorizer needs; inlining here costs 3x
fn bwd_lane_fixed<const N: usize>(
    l: usize,
    e: usize,
    ee: usize,
    g_b: &[f32],
    dd: &[f32],
    xd: &[f32],
    bd: &[f32],
    cd: &[f32],
    a_row: &[f32; N],
    skip: f32,
    h_lane: &[f32],
    ddelta: &mut [f32], // [L, E]
    db: &mut [f32],     // [L, N]
    dc: &mut [f32],     // [L, N]
    dx: &mut [f32],     // [L, E]
    da_row: &mut [f32; N],
) -> f32 {
    let mut dh = [0.0f32; N];
    let mut tmp_delta = [0.0f32; N];
    let mut tmp_x = [0.0f32; N];
    let zeros = [0.0f32; N];
    let mut dskip_acc = 0.0f32;
    for t in (0..l).rev() {
        let go = g_b[t * e + ee];
        let d = dd[t * e + ee];
        let xv = xd[t * e + ee];
        let brow: &[f32; N] = bd[t * N..(t + 1) * N].try_into().unwrap();
        let crow: &[f32; N] = cd[t * N..(t + 1) * N].try_into().unwrap();
        let hrow: &[f32; N] = h_lane[t * N..(t + 1) * N].try_into().unwrap();
        let hprev: &[f32; N] = if t > 0 {
            h_lane[(t - 1) * N..t * N].try_into().unwrap()
        } else {
            &zeros
        };
        let db_row: &mut [f32; N] = (&mut db[t * N..(t + 1) * N]).try_into().unwrap();
        let dc_row: &mut [f32; N] = (&mut dc[t * N..(t + 1) * N]).try_into().unwrap();
        for j in 0..N {
            // y_t += c_t[j] * h_t[j]
            let dhj = dh[j] + crow[j] * go;
            dc_row[j] += hrow[j] * go;
            // h_t[j] = a_bar * h_{t-1}[j] + delta * b_t[j] * x_t
            let abar = fast_exp(d * a_row[j]);
            let d_abar = dhj * hprev[j];
            da_row[j] += d_abar * d * abar;
            tmp_delta[j] = d_abar * a_row[j] * abar + dhj * brow[j] * xv;
            db_row[j] += dhj * d * xv;
            tmp_x[j] = dhj * brow[j];
            dh[j] = flush_small(abar * dhj);
        }
        ddelta[t * e + ee] = sum4(&tmp_delta);
        dx[t * e + ee] = sum4(&tmp_x) * d + skip * go;
        dskip_acc += xv * go;
    }
    dskip_acc
}

#[allow(clippy::too_many_arguments)]
#[inline(never)]
fn bwd_lane_dyn(
    n: usize,
    l: usize,
    e: usize,
    ee: usize,
    g_b: &[f32],
    dd: &[f32],
    xd: &[f32],
    bd: &[f32],
    cd: &[f32],
    a_row: &[f32],
    skip: f32,
    h_lane: &[f32],
    ddelta: &mut [f32], // [L, E]
    db: &mut [f32],     // [L, N]
    dc: &mut [f32],     // [L, N]
    dx: &mut [f32],     // [L, E]
    da_row: &mut [f32],
    scratch: &mut [f32], // 4 * n
) -> f32 {
    let (dh, rest) = scratch.split_at_mut(n);
    let (tmp_delta, rest) = rest.split_at_mut(n);
    let (tmp_x, zeros) = rest.split_at_mut(n);
    dh.fill(0.0);
    zeros.fill(0.0);
    let mut dskip_acc = 0.0f32;
    for t in (0..l).rev() {
        let go = g_b[t * e + ee];
        let d = dd[t * e + ee];
        let xv = xd[t * e + ee];
        let brow = &bd[t * n..(t + 1) * n];
        let crow = &cd[t * n..(t + 1) * n];
        let hrow = &h_lane[t * n..(t + 1) * n];
        let hprev: &[f32] = if t > 0 {
            &h_lane[(t - 1) * n..t * n]
        } else {
            zeros
        };
        let db_row = &mut db[t * n..(t + 1) * n];
        let dc_row = &mut dc[t * n..(t + 1) * n];
        for j in 0..n {
            let dhj = dh[j] + crow[j] * go;
            dc_row[j] += hrow[j] * go;
            let abar = fast_exp(d * a_row[j]);
            let d_abar = dhj * hprev[j];
            da_row[j] += d_abar * d * abar;
            tmp_delta[j] = d_abar * a_row[j] * abar + dhj * brow[j] * xv;
            db_row[j] += dhj * d * xv;
            tmp_x[j] = dhj * brow[j];
            dh[j] = flush_small(abar * dhj);
        }
        ddelta[t * e + ee] = sum4(tmp_delta);
        dx[t * e + ee] = sum4(tmp_x) * d + skip * go;
        dskip_acc += xv * go;
    }
    dskip_acc
}

struct SelectiveScanGrad {
    delta: Tensor,
    a: Tensor,
    b_in: Tensor,
    c_in: Tensor,
    x: Tensor,
    d_skip: Tensor,
    h_all: Vec<f32>, // [B, E, L, N]
    dims: ScanDims,
}

impl GradFn for SelectiveScanGrad {
    fn parents(&self) -> Vec<Tensor> {
        vec![
            self.delta.clone(),
            self.a.clone(),
            self.b_in.clone(),
            self.c_in.clone(),
            self.x.clone(),
            self.d_skip.clone(),
        ]
    }

    fn backward(&self, g: &[f32]) {
        let ScanDims { bsz, l, e, n } = self.dims;
        let (dd, ad, bd, cd, xd, skipd) = (
            self.delta.data(),
            self.a.data(),
            self.b_in.data(),
            self.c_in.data(),
            self.x.data(),
            self.d_skip.data(),
        );

        struct BatchGrads {
            ddelta: Vec<f32>, // [L, E]
            db: Vec<f32>,     // [L, N]
            dc: Vec<f32>,     // [L, N]
            dx: Vec<f32>,     // [L, E]
            da: Vec<f32>,     // [E, N]
            dskip: Vec<f32>,  // [E]
        }

        // One worker per batch element; within a batch the channel loop is
        // sequential, so db/dc rows shared across channels need no locking.
        let per_batch: Vec<BatchGrads> = (0..bsz)
            .into_par_iter()
            .map(|b| {
                let mut out = BatchGrads {
                    ddelta: vec![0.0; l * e],
                    db: vec![0.0; l * n],
                    dc: vec![0.0; l * n],
                    dx: vec![0.0; l * e],
                    da: vec![0.0; e * n],
                    dskip: vec![0.0; e],
                };
                let h_b = &self.h_all[b * e * l * n..(b + 1) * e * l * n];
                let g_b = &g[b * l * e..(b + 1) * l * e];
                let dd_b = &dd[b * l * e..(b + 1) * l * e];
                let xd_b = &xd[b * l * e..(b + 1) * l * e];
                let bd_b = &bd[b * l * n..(b + 1) * l * n];
                let cd_b = &cd[b * l * n..(b + 1) * l * n];
                let mut scratch = vec![0.0f32; 4 * n];
                for ee in 0..e {
                    let h_lane = &h_b[ee * l * n..(ee + 1) * l * n];
                    out.dskip[ee] = match n {
                        16 => bwd_lane_fixed::<16>(
                            l, e, ee, g_b, dd_b, xd_b, bd_b, cd_b,
                            ad[ee * n..(ee + 1) * n].try_into().unwrap(),
                            skipd[ee], h_lane,
                            &mut out.ddelta, &mut out.db, &mut out.dc, &mut out.dx,
                            (&mut out.da[ee * n..(ee + 1) * n]).try_into().unwrap(),
                        ),
                        8 => bwd_lane_fixed::<8>(
                            l, e, ee, g_b, dd_b, xd_b, bd_b, cd_b,
                            ad[ee * n..(ee + 1) * n].try_into().unwrap(),
                            skipd[ee], h_lane,
                            &mut out.ddelta, &mut out.db, &mut out.dc, &mut out.dx,
                            (&mut out.da[ee * n..(ee + 1) * n]).try_into().unwrap(),
                        ),
                        _ => bwd_lane_dyn(
                            n, l, e, ee, g_b, dd_b, xd_b, bd_b, cd_b,
                            &ad[ee * n..(ee + 1) * n],
                            skipd[ee], h_lane,
                            &mut out.ddelta, &mut out.db, &mut out.dc, &mut out.dx,
                            &mut out.da[ee * n..(ee + 1) * n],
                            &mut scratch,
                        ),
                    };
                }
                out
            })
            .collect();

        if self.delta.requires_grad() {
            let mut grad = vec![0.0f32; bsz * l * e];
            for (b, bg) in per_batch.iter().enumerate() {
                grad[b * l * e..(b + 1) * l * e].copy_from_slice(&bg.ddelta);
            }
            self.delta.accumulate_grad(&grad);
        }
        if self.b_in.requires_grad() {
            let mut grad = vec![0.0f32; bsz * l * n];
            for (b, bg) in per_batch.iter().enumerate() {
                grad[b * l * n..(b + 1) * l * n].copy_from_slice(&bg.db);
            }
            self.b_in.accumulate_grad(&grad);
        }
        if self.c_in.requires_grad() {
            let mut grad = vec![0.0f32; bsz * l * n];
            for (b, bg) in per_batch.iter().enumerate() {
                grad[b * l * n..(b + 1) * l * n].copy_from_slice(&bg.dc);
            }
            self.c_in.accumulate_grad(&grad);
        }
        if self.x.requires_grad() {
            let mut grad = vec![0.0f32; bsz * l * e];
            for (b, bg) in per_batch.iter().enumerate() {
                grad[b * l * e..(b + 1) * l * e].copy_from_slice(&bg.dx);
            }
            self.x.accumulate_grad(&grad);
        }
        if self.a.requires_grad() {
            // Sum partials in batch order so the reduction is deterministic.
            let mut grad = vec![0.0f32; e * n];
            for bg in &per_batch {
                for (gacc, &v) in grad.iter_mut().zip(&bg.da) {
                    *gacc += v;
                }
            }
            self.a.accumulate_grad(&grad);
        }
        if self.d_skip.requires_grad() {
            let mut grad = vec![0.0f32; e];
            for bg in &per_batch {
                for (gacc, &v) in grad.iter_mut().zip(&bg.dskip) {
                    *gacc += v;
                }
            }
            self.d_skip.accumulate_grad(&grad);
        }
    }
}

/// Sequential selective scan with zero initial state:
///
/// ```text
/// h_t = exp(delta_t A) .* h_{t-1} + (delta_t B_t) * x_t
/// y_t = <C_t, h_t> + D .* x_t
/// ```
///
/// per (batch, channel) lane. Differentiable end to end with respect to every
/// input. Lanes are evaluated independently (parallel over the batch), each
/// with a fixed sequential reduction, so results do not depend on scheduling.
pub fn selective_scan_seq(inputs: &SelectiveInputs, a: &Tensor) -> Result<Tensor> {
    let dims = scan_shapes(inputs, a)?;
    check_no_nan("delta", &inputs.delta)?;
    check_no_nan("A", a)?;
    check_no_nan("B", &inputs.b_in)?;
    check_no_nan("C", &inputs.c_in)?;
    check_no_nan("x", &inputs.x)?;
    check_no_nan("D", &inputs.d_skip)?;

    let ScanDims { bsz, l, e, n } = dims;
    let (dd, ad, bd, cd, xd, skipd) = (
        inputs.delta.data(),
        a.data(),
        inputs.b_in.data(),
        inputs.c_in.data(),
        inputs.x.data(),
        inputs.d_skip.data(),
    );

    let tracking = crate::tensor::grad_enabled()
        && [&inputs.delta, a, &inputs.b_in, &inputs.c_in, &inputs.x, &inputs.d_skip]
            .iter()
            .any(|t| t.requires_grad());

    let mut y = vec![0.0f32; bsz * l * e];
    let mut h_all = if tracking {
        vec![0.0f32; bsz * e * l * n]
    } else {
        Vec::new()
    };

    let run_lane = |b: usize, ee: usize, h: &mut [f32], yb: &mut [f32], h_store: Option<&mut [f32]>| {
        let dd_b = &dd[b * l * e..(b + 1) * l * e];
        let xd_b = &xd[b * l * e..(b + 1) * l * e];
        let bd_b = &bd[b * l * n..(b + 1) * l * n];
        let cd_b = &cd[b * l * n..(b + 1) * l * n];
        let a_row = &ad[ee * n..(ee + 1) * n];
        let skip = skipd[ee];
        match n {
            16 => fwd_lane_fixed::<16>(
                l, e, ee, dd_b, xd_b, bd_b, cd_b,
                a_row.try_into().unwrap(), skip, yb, h_store,
            ),
            8 => fwd_lane_fixed::<8>(
                l, e, ee, dd_b, xd_b, bd_b, cd_b,
                a_row.try_into().unwrap(), skip, yb, h_store,
            ),
            _ => fwd_lane_dyn(n, l, e, ee, dd_b, xd_b, bd_b, cd_b, a_row, skip, yb, h_store, h),
        }
    };

    if tracking {
        y.par_chunks_mut(l * e)
            .zip(h_all.par_chunks_mut(e * l * n))
            .enumerate()
            .for_each(|(b, (yb, hb))| {
                let mut h = vec![0.0f32; n];
                for ee in 0..e {
                    let lane = &mut hb[ee * l * n..(ee + 1) * l * n];
                    run_lane(b, ee, &mut h, yb, Some(lane));
                }
            });
    } else {
        y.par_chunks_mut(l * e).enumerate().for_each(|(b, yb)| {
            let mut h = vec![0.0f32; n];
            for ee in 0..e {
                run_lane(b, ee, &mut h, yb, None);
            }
        });
    }

    let shape = vec![bsz, l, e];
    if tracking {
        Ok(Tensor::from_op(
            shape,
            y,
            Box::new(SelectiveScanGrad {
                delta: inputs.delta.clone(),
                a: a.clone(),
                b_in: inputs.b_in.clone(),
                c_in: inputs.c_in.clone(),
                x: inputs.x.clone(),
                d_skip: inputs.d_skip.clone(),
                h_all,
                dims,
            }),
        ))
    } else {
        Ok(Tensor::untracked(shape, y))
    }
}

/// Time-invariant kernel evaluation: `y = x (*) K_bar` with
/// `K_bar_j = C . A_bar^j . B_bar` per channel (causal, kernel length L).
///
/// `x` is `[E, L]`, or `[L]` to drive every channel with the same input; the
/// result is `[E, L]`. Kernel powers and the convolution accumulate in f64;
/// this is the reference route the sequential scan is checked against.
pub fn ssm_kernel_conv(a_bar: &Tensor, b_bar: &Tensor, c: &Tensor, x: &Tensor) -> Result<Tensor> {
    if a_bar.shape().len() != 2 || a_bar.shape() != b_bar.shape() {
        return Err(Error::Shape {
            op: "ssm_kernel_conv",
            lhs: a_bar.shape().to_vec(),
            rhs: b_bar.shape().to_vec(),
        });
    }
    let (e, n) = (a_bar.shape()[0], a_bar.shape()[1]);
    if c.shape() != [n] {
        return Err(Error::Shape {
            op: "ssm_kernel_conv",
            lhs: a_bar.shape().to_vec(),
            rhs: c.shape().to_vec(),
        });
    }
    let l = match x.shape() {
        [l] => *l,
        [xe, l] if *xe == e => *l,
        _ => {
            return Err(Error::Shape {
                op: "ssm_kernel_conv",
                lhs: vec![e, n],
                rhs: x.shape().to_vec(),
            })
        }
    };
    if l == 0 {
        return Err(Error::Usage("ssm_kernel_conv: sequence length is zero".into()));
    }
    let shared_input = x.shape().len() == 1;
    let (abd, bbd, cd, xd) = (a_bar.data(), b_bar.data(), c.data(), x.data());
    let mut y = vec![0.0f32; e * l];
    for ee in 0..e {
        // kernel K[j] = sum_n c[n] * a_bar[e,n]^j * b_bar[e,n], built iteratively
        let mut w: Vec<f64> = (0..n)
            .map(|j| cd[j] as f64 * bbd[ee * n + j] as f64)
            .collect();
        let mut kernel = vec![0.0f64; l];
        for kj in kernel.iter_mut() {
            let mut s = 0.0f64;
            for j in 0..n {
                s += w[j];
            }
            *kj = s;
            for j in 0..n {
                w[j] *= abd[ee * n + j] as f64;
            }
        }
        let xrow = if shared_input { xd } else { &xd[ee * l..(ee + 1) * l] };
        for t in 0..l {
            let mut acc = 0.0f64;
            for j in 0..=t {
                acc += kernel[j] * xrow[t - j] as f64;
            }
            y[ee * l + t] = acc as f32;
        }
    }
    Ok(Tensor::untracked(vec![e, l], y))
}

/// Paired scans: the forward branch scans as-is; the backward branch is a
/// forward scan over inputs the caller already derived from the
/// sequence-reversed activations, un-reversed at the end.
pub fn selective_scan_bidirectional(
    inputs_fwd: &SelectiveInputs,
    inputs_bwd: &SelectiveInputs,
    a_fwd: &Tensor,
    a_bwd: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let y_fwd = selective_scan_seq(inputs_fwd, a_fwd)?;
    let y_bwd = selective_scan_seq(inputs_bwd, a_bwd)?.reverse_seq()?;
    Ok((y_fwd, y_bwd))
}
