//! Scalar math shared by op kernels.

/// Numerically stable logistic sigmoid (branchless, vectorizable).
#[inline(always)]
pub fn sigmoid(x: f32) -> f32 {
    let e = fast_exp(-x.abs());
    let s = 1.0 / (1.0 + e);
    if x >= 0.0 {
        s
    } else {
        1.0 - s
    }
}

#[inline(always)]
pub fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

#[inline(always)]
pub fn silu_grad(x: f32) -> f32 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

pub const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)
pub const GELU_A: f32 = 0.044_715;

/// GELU, tanh form.
#[inline(always)]
pub fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline(always)]
pub fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Overflow-safe softplus: above the threshold exp(v) dominates the +1, so
/// the identity is returned directly.
pub const SOFTPLUS_THRESHOLD: f32 = 20.0;

#[inline(always)]
pub fn softplus(x: f32) -> f32 {
    if x > SOFTPLUS_THRESHOLD {
        x
    } else {
        fast_ln_1p(fast_exp(x))
    }
}

/// ln(1 + u) for u in [0, 1], via the odd atanh series at s = u/(2+u)
/// (s <= 1/3, so thirteen terms reach ~1e-8 relative error). Pure
/// arithmetic for the same reasons as [`fast_exp`].
#[inline(always)]
pub fn fast_ln_1p(u: f32) -> f32 {
    debug_assert!((0.0..=1.0 + 1e-6).contains(&u));
    let s = u / (2.0 + u);
    let s2 = s * s;
    let p = 1.0
        + s2 * (1.0 / 3.0
            + s2 * (1.0 / 5.0
                + s2 * (1.0 / 7.0 + s2 * (1.0 / 9.0 + s2 * (1.0 / 11.0 + s2 * (1.0 / 13.0))))));
    2.0 * s * p
}

/// exp with the argument clamped so finite inputs give finite outputs.
#[inline(always)]
pub fn exp_saturating(x: f32) -> f32 {
    x.min(88.0).exp()
}

/// Fast exp for hot elementwise loops (the scan, sigmoid, softplus):
/// 2^n * e^r split with a degree-6 polynomial on |r| <= ln2/2. Relative
/// error is below 2e-7, and the function is pure arithmetic, so results
/// stay bit-reproducible and auto-vectorize where libm calls would not.
#[inline(always)]
pub fn fast_exp(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    // ln2 split so n*LN2_HI is exact for |n| <= 127.
    const LN2_HI: f32 = 0.693_359_375;
    const LN2_LO: f32 = -2.121_944_4e-4;
    // round-to-nearest via the 1.5*2^23 magic constant (keeps the loop free
    // of libm round calls on baseline targets)
    const ROUND_MAGIC: f32 = 12_582_912.0;
    let x = x.clamp(-87.0, 88.0);
    let n = (x * LOG2E + ROUND_MAGIC) - ROUND_MAGIC;
    let r = (x - n * LN2_HI) - n * LN2_LO;
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
    let scale = f32::from_bits((((n as i32) + 127) as u32) << 23);
    p * scale
}
