//! Shared helpers for unit tests: an independent adaptive quadrature
//! used as the oracle wherever a closed form is asserted.

/// Adaptive Simpson integration of `f` on `[a, b]` to absolute
/// tolerance `tol`.
pub fn adaptive_simpson(f: impl Fn(f64) -> f64 + Copy, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (f(a) + 4.0 * f(0.5 * (a + b)) + f(b))
    }
    fn recurse(
        f: impl Fn(f64) -> f64 + Copy,
        a: f64,
        b: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let mid = 0.5 * (a + b);
        let left = simpson(f, a, mid);
        let right = simpson(f, mid, b);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            left + right + (left + right - whole) / 15.0
        } else {
            recurse(f, a, mid, left, tol / 2.0, depth - 1)
                + recurse(f, mid, b, right, tol / 2.0, depth - 1)
        }
    }
    recurse(f, a, b, simpson(f, a, b), tol, 48)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integrates_polynomials_exactly_enough() {
        let got = adaptive_simpson(|x| x * x * x - 2.0 * x + 1.0, -1.0, 3.0, 1e-12);
        assert!((got - (20.0 - 8.0 + 4.0)).abs() < 1e-10);
    }

    #[test]
    fn integrates_square_root_singularity() {
        // semicircle-style integrand with endpoint singularity in the derivative
        let got = adaptive_simpson(|x| (1.0 - x * x).sqrt(), -1.0, 1.0, 1e-11);
        assert!((got - std::f64::consts::FRAC_PI_2).abs() < 1e-8);
    }
}
