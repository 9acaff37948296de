//! Scalar numeric kernels shared by the graph ops and the plain (non-graph)
//! evaluation paths. Keeping one implementation of each kernel is what makes
//! the two-route identity checks in the trainer hold to 1e-10.

pub const LN_2PI: f64 = 1.8378770664093453;

/// Overflow-safe log(1 + e^x).
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Standard normal CDF. Both branches call erfc at a nonnegative argument,
/// where it is relatively accurate, so the far tails keep full precision.
#[inline]
pub fn norm_cdf(z: f64) -> f64 {
    if z < 0.0 {
        0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
    } else {
        1.0 - 0.5 * libm::erfc(z / std::f64::consts::SQRT_2)
    }
}

/// Standard normal density.
#[inline]
pub fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// log N(y; mu, sigma^2).
#[inline]
pub fn gauss_log_pdf(y: f64, mu: f64, sigma: f64) -> f64 {
    let t = (y - mu) / sigma;
    -0.5 * t * t - sigma.ln() - 0.5 * LN_2PI
}

/// Logistic CDF with location `c` and scale `s`.
#[inline]
pub fn logistic_cdf(x: f64, c: f64, s: f64) -> f64 {
    sigmoid((x - c) / s)
}

/// log of the logistic density with location `c` and scale `s`.
/// Written in terms of |u| so both tails are overflow-safe.
#[inline]
pub fn logistic_log_pdf(x: f64, c: f64, s: f64) -> f64 {
    let u = ((x - c) / s).abs();
    -u - 2.0 * softplus(-u) - s.ln()
}

/// Numerically stable log(sum(exp(xs))) with max shift.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Kernel scale for a logistic kernel of variance s^2
/// (logistic variance is scale^2 pi^2 / 3).
#[inline]
pub fn logistic_scale_for_variance(s2: f64) -> f64 {
    (3.0 * s2).sqrt() / std::f64::consts::PI
}
