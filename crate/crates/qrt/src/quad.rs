//! Adaptive Simpson quadrature, used by verification suites as an
//! integration oracle independent of any closed-form path under test.

/// Integrate `f` over [a, b] to absolute tolerance `tol`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let c = 0.5 * (a + b);
    let (fa, fb, fc) = (f(a), f(b), f(c));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fc + fb);
    recurse(f, a, b, fa, fb, fc, whole, tol, 60)
}

#[allow(clippy::too_many_arguments)]
fn recurse(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fb: f64,
    fc: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let c = 0.5 * (a + b);
    let l = 0.5 * (a + c);
    let r = 0.5 * (c + b);
    let (fl, fr) = (f(l), f(r));
    let left = (c - a) / 6.0 * (fa + 4.0 * fl + fc);
    let right = (b - c) / 6.0 * (fc + 4.0 * fr + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        left + right + delta / 15.0
    } else {
        recurse(f, a, c, fa, fc, fl, left, 0.5 * tol, depth - 1)
            + recurse(f, c, b, fc, fb, fr, right, 0.5 * tol, depth - 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn polynomial_and_gaussian() {
        let cubic = |x: f64| x * x * x;
        assert_relative_eq!(adaptive_simpson(&cubic, 0.0, 2.0, 1e-12), 4.0, epsilon = 1e-10);
        let gauss = |x: f64| crate::num::norm_pdf(x);
        assert_relative_eq!(adaptive_simpson(&gauss, -10.0, 10.0, 1e-10), 1.0, epsilon = 1e-9);
    }
}
