//! Eigenvalue statistics of sampled matrices and the semicircle
//! reference law: density, CDF, moments (Catalan numbers), the closed
//! resolvent, and convergence diagnostics.
//!
//! Spectra always refer to the rescaled matrix `M / sqrt(N)`, whose
//! limiting density is supported on `[-2 alpha, 2 alpha]`.

use crate::matrix::{HermitianEigenSolver, HermitianMatrix, MatrixError};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("no input samples")]
    EmptyInput,
    #[error("moment order must be >= 1")]
    InvalidOrder,
    #[error(transparent)]
    Backend(#[from] MatrixError),
    #[error("z = {0} is within {1:e} of the branch cut")]
    OnCut(Complex64, f64),
}

/// The Wigner semicircle with scale `alpha`: density
/// `sqrt(4 alpha^2 - x^2) / (2 pi alpha^2)` on `[-2 alpha, 2 alpha]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SemicircleLaw {
    pub alpha: f64,
}

impl SemicircleLaw {
    pub fn new(alpha: f64) -> Self {
        assert!(alpha > 0.0 && alpha.is_finite(), "alpha must be positive");
        Self { alpha }
    }

    pub fn density(&self, lambda: f64) -> f64 {
        let r = 2.0 * self.alpha;
        if lambda.abs() >= r {
            return 0.0;
        }
        (r * r - lambda * lambda).sqrt() / (2.0 * std::f64::consts::PI * self.alpha * self.alpha)
    }

    /// Closed-form antiderivative of the density.
    pub fn cdf(&self, lambda: f64) -> f64 {
        let r = 2.0 * self.alpha;
        if lambda <= -r {
            return 0.0;
        }
        if lambda >= r {
            return 1.0;
        }
        let a2 = self.alpha * self.alpha;
        let primitive =
            0.5 * lambda * (r * r - lambda * lambda).sqrt() + 2.0 * a2 * (lambda / r).asin();
        0.5 + primitive / (2.0 * std::f64::consts::PI * a2)
    }

    /// Quantile by bisection on the CDF.
    pub fn quantile(&self, p: f64) -> f64 {
        let (mut lo, mut hi) = (-2.0 * self.alpha, 2.0 * self.alpha);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    /// k-th moment: zero for odd k, `Catalan(k/2) * alpha^k` for even k.
    pub fn moment(&self, k: u32) -> f64 {
        if k % 2 == 1 {
            return 0.0;
        }
        catalan(k / 2) as f64 * self.alpha.powi(k as i32)
    }
}

/// Catalan numbers, exact in u128 for the orders used here.
pub fn catalan(m: u32) -> u128 {
    // C(2m, m) / (m + 1) computed without intermediate overflow
    let mut binom: u128 = 1;
    for i in 0..m as u128 {
        binom = binom * (2 * m as u128 - i) / (i + 1);
    }
    binom / (m as u128 + 1)
}

/// Eigenvalues of `M / sqrt(N)`, ascending.
pub fn eigenvalues(
    m: &HermitianMatrix,
    solver: &impl HermitianEigenSolver,
) -> Result<Vec<f64>, SpectralError> {
    let n = m.dimension();
    let scale = 1.0 / (n as f64).sqrt();
    let scaled = HermitianMatrix::from_upper_triangle(n, |i, j| m.get(i, j) * scale);
    Ok(solver.eigenvalues(&scaled)?)
}

/// Normalized trace moment `Tr M^k / N^(1 + k/2)` averaged over samples,
/// with its standard error, computed by matrix powers.
pub fn trace_moment(
    samples: &[HermitianMatrix],
    k: u32,
) -> Result<(f64, f64), SpectralError> {
    let table = trace_moments(samples, &[k])?;
    Ok(table[&k])
}

/// Normalized trace moments for several orders at once (one pass of
/// matrix powers per sample; samples processed in parallel, reduced in
/// index order).
pub fn trace_moments(
    samples: &[HermitianMatrix],
    ks: &[u32],
) -> Result<BTreeMap<u32, (f64, f64)>, SpectralError> {
    if samples.is_empty() {
        return Err(SpectralError::EmptyInput);
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(SpectralError::InvalidOrder);
    }
    let max_k = *ks.iter().max().expect("non-empty");
    let per_sample: Vec<Vec<f64>> = samples
        .par_iter()
        .map(|m| {
            let n = m.dimension() as f64;
            let traces = m.trace_powers(max_k);
            ks.iter()
                .map(|&k| traces[k as usize - 1] / n.powf(1.0 + k as f64 / 2.0))
                .collect()
        })
        .collect();
    let count = samples.len() as f64;
    let mut out = BTreeMap::new();
    for (slot, &k) in ks.iter().enumerate() {
        let mean = per_sample.iter().map(|row| row[slot]).sum::<f64>() / count;
        let stderr = if samples.len() > 1 {
            let var = per_sample
                .iter()
                .map(|row| (row[slot] - mean).powi(2))
                .sum::<f64>()
                / (count - 1.0);
            (var / count).sqrt()
        } else {
            0.0
        };
        out.insert(k, (mean, stderr));
    }
    Ok(out)
}

/// Spectra and trace moments of a batch of samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectralSample {
    pub n: usize,
    /// Sorted eigenvalues of `M / sqrt(N)`, one vector per sample.
    pub eigenvalue_batches: Vec<Vec<f64>>,
    /// `k -> (estimate, standard error)` of the normalized trace moment.
    pub trace_moments: BTreeMap<u32, (f64, f64)>,
}

impl SpectralSample {
    pub fn analyze(
        samples: &[HermitianMatrix],
        ks: &[u32],
        solver: &impl HermitianEigenSolver,
    ) -> Result<Self, SpectralError> {
        if samples.is_empty() {
            return Err(SpectralError::EmptyInput);
        }
        let n = samples[0].dimension();
        let eigenvalue_batches: Vec<Vec<f64>> = samples
            .par_iter()
            .map(|m| eigenvalues(m, solver))
            .collect::<Result<_, _>>()?;
        let trace_moments = trace_moments(samples, ks)?;
        Ok(Self {
            n,
            eigenvalue_batches,
            trace_moments,
        })
    }

    pub fn pooled_eigenvalues(&self) -> Vec<f64> {
        let mut all: Vec<f64> = self
            .eigenvalue_batches
            .iter()
            .flatten()
            .copied()
            .collect();
        all.sort_by(|a, b| a.partial_cmp(b).expect("finite eigenvalues"));
        all
    }
}

/// Kolmogorov-Smirnov distance between the pooled empirical spectrum and
/// the semicircle CDF.
pub fn ks_distance(sample: &SpectralSample, law: &SemicircleLaw) -> Result<f64, SpectralError> {
    let pooled = sample.pooled_eigenvalues();
    if pooled.is_empty() {
        return Err(SpectralError::EmptyInput);
    }
    let n = pooled.len() as f64;
    let mut sup: f64 = 0.0;
    for (idx, &x) in pooled.iter().enumerate() {
        let cdf = law.cdf(x);
        let above = (idx as f64 + 1.0) / n - cdf;
        let below = cdf - idx as f64 / n;
        sup = sup.max(above).max(below);
    }
    Ok(sup)
}

/// Resolvent of the semicircle law,
/// `G(z) = (z - sqrt(z - 2a) sqrt(z + 2a)) / (2 a^2)`,
/// on the branch that decays like `1/z` at infinity with cut
/// `[-2a, 2a]`.
pub fn green_function(z: Complex64, alpha: f64) -> Result<Complex64, SpectralError> {
    const CUT_TOLERANCE: f64 = 1e-12;
    let radius = 2.0 * alpha;
    if z.im.abs() < CUT_TOLERANCE && z.re.abs() <= radius + CUT_TOLERANCE {
        return Err(SpectralError::OnCut(z, CUT_TOLERANCE));
    }
    // principal square roots of the two factors place the cut exactly
    // on the support segment
    let s = (z - radius).sqrt() * (z + radius).sqrt();
    Ok((z - s) / (2.0 * alpha * alpha))
}

/// Histogram of pooled eigenvalues against the semicircle density.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HistogramBin {
    pub left: f64,
    pub right: f64,
    pub count: u64,
    pub empirical_density: f64,
    pub semicircle_density: f64,
}

pub fn histogram(
    sample: &SpectralSample,
    law: &SemicircleLaw,
    bins: usize,
) -> Result<Vec<HistogramBin>, SpectralError> {
    let pooled = sample.pooled_eigenvalues();
    if pooled.is_empty() || bins == 0 {
        return Err(SpectralError::EmptyInput);
    }
    let spread = pooled
        .last()
        .unwrap()
        .abs()
        .max(pooled[0].abs())
        .max(2.0 * law.alpha)
        * 1.05;
    let (lo, hi) = (-spread, spread);
    let width = (hi - lo) / bins as f64;
    let total = pooled.len() as f64;
    let mut counts = vec![0u64; bins];
    for &x in &pooled {
        let slot = (((x - lo) / width) as usize).min(bins - 1);
        counts[slot] += 1;
    }
    Ok(counts
        .iter()
        .enumerate()
        .map(|(b, &count)| {
            let left = lo + b as f64 * width;
            let mid = left + 0.5 * width;
            HistogramBin {
                left,
                right: left + width,
                count,
                empirical_density: count as f64 / (total * width),
                semicircle_density: law.density(mid),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{sample_batch, EnsembleSpec};
    use crate::matrix::NalgebraEigenSolver;
    use crate::testutil::adaptive_simpson;
    use approx::assert_relative_eq;
    use num_complex::Complex64;

    const SOLVER: NalgebraEigenSolver = NalgebraEigenSolver;

    #[test]
    fn eigenvalues_of_scaled_diagonal() {
        let n = 3;
        let root_n = (n as f64).sqrt();
        let m = HermitianMatrix::from_upper_triangle(n, |i, j| {
            if i == j {
                Complex64::new((i as f64 + 1.0) * root_n, 0.0)
            } else {
                Complex64::ZERO
            }
        });
        let ev = eigenvalues(&m, &SOLVER).unwrap();
        for (got, want) in ev.iter().zip([1.0, 2.0, 3.0]) {
            assert_relative_eq!(*got, want, epsilon = 1e-12);
        }
        let zero = HermitianMatrix::zero(4);
        assert_eq!(eigenvalues(&zero, &SOLVER).unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn eigenvalue_sum_matches_scaled_trace() {
        let samples = sample_batch(&EnsembleSpec::Gue { alpha: 1.0 }, 4, 17, 3).unwrap();
        for m in &samples {
            let ev = eigenvalues(&m.clone(), &SOLVER).unwrap();
            let sum: f64 = ev.iter().sum();
            assert_relative_eq!(sum, m.trace().re / 2.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn trace_moment_of_identity() {
        let m = HermitianMatrix::from_upper_triangle(4, |i, j| {
            Complex64::new(if i == j { 1.0 } else { 0.0 }, 0.0)
        });
        let (est, se) = trace_moment(&[m], 2).unwrap();
        assert_relative_eq!(est, 0.25, epsilon = 1e-14);
        assert_eq!(se, 0.0);
    }

    #[test]
    fn first_moment_of_centered_ensembles_is_small() {
        let samples = sample_batch(&EnsembleSpec::Gue { alpha: 1.0 }, 32, 5, 200).unwrap();
        let (est, se) = trace_moment(&samples, 1).unwrap();
        assert!(est.abs() <= 4.0 * se.max(1e-6), "m1 = {est} +- {se}");
    }

    #[test]
    fn moments_match_eigenvalue_route() {
        let samples = sample_batch(&EnsembleSpec::Gue { alpha: 1.0 }, 16, 9, 5).unwrap();
        let table = trace_moments(&samples, &[2, 3, 4]).unwrap();
        let spectra = SpectralSample::analyze(&samples, &[2], &SOLVER).unwrap();
        for (&k, &(est, _)) in &table {
            let via_eigen: f64 = spectra
                .eigenvalue_batches
                .iter()
                .map(|ev| ev.iter().map(|l| l.powi(k as i32)).sum::<f64>() / 16.0)
                .sum::<f64>()
                / spectra.eigenvalue_batches.len() as f64;
            assert_relative_eq!(est, via_eigen, epsilon = 1e-8);
        }
    }

    #[test]
    fn semicircle_moments_are_catalan_and_match_quadrature() {
        let law = SemicircleLaw::new(1.0);
        assert_eq!(law.moment(3), 0.0);
        for (k, want) in [(2u32, 1.0), (4, 2.0), (6, 5.0), (8, 14.0)] {
            assert_relative_eq!(law.moment(k), want, epsilon = 1e-12);
            let quad = adaptive_simpson(
                |x| x.powi(k as i32) * law.density(x),
                -2.0,
                2.0,
                1e-12,
            );
            assert_relative_eq!(law.moment(k), quad, epsilon = 1e-10);
        }
        // scale covariance in alpha
        let scaled = SemicircleLaw::new(1.5);
        assert_relative_eq!(scaled.moment(4), 2.0 * 1.5f64.powi(4), epsilon = 1e-12);
    }

    #[test]
    fn catalan_recurrence() {
        for m in 1..10u32 {
            let convolution: u128 = (0..m).map(|j| catalan(j) * catalan(m - 1 - j)).sum();
            assert_eq!(catalan(m), convolution);
        }
    }

    #[test]
    fn density_and_cdf_closed_forms() {
        let law = SemicircleLaw::new(1.0);
        assert_relative_eq!(law.density(0.0), 1.0 / std::f64::consts::PI, epsilon = 1e-14);
        assert_eq!(law.cdf(-2.0), 0.0);
        assert_eq!(law.cdf(2.0), 1.0);
        let mass = adaptive_simpson(|x| law.density(x), -2.0, 2.0, 1e-12);
        assert_relative_eq!(mass, 1.0, epsilon = 1e-10);
        // CDF differentiates back to the density
        for x in [-1.7, -0.4, 0.0, 0.9, 1.99] {
            let h = 1e-6;
            let numeric = (law.cdf(x + h) - law.cdf(x - h)) / (2.0 * h);
            assert_relative_eq!(numeric, law.density(x), epsilon = 1e-5);
        }
    }

    #[test]
    fn ks_distance_detects_and_accepts() {
        let law = SemicircleLaw::new(1.0);
        // inverse sampling: seeded uniforms through the quantile
        let mut state = 0x853c49e6748fea9bu64;
        let mut uniforms = Vec::with_capacity(100_000);
        for _ in 0..100_000 {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            uniforms.push(((state >> 11) as f64 / (1u64 << 53) as f64).clamp(1e-12, 1.0 - 1e-12));
        }
        let mut draws: Vec<f64> = uniforms.iter().map(|&u| law.quantile(u)).collect();
        draws.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let sample = SpectralSample {
            n: draws.len(),
            eigenvalue_batches: vec![draws],
            trace_moments: BTreeMap::new(),
        };
        let d = ks_distance(&sample, &law).unwrap();
        assert!(d <= 0.01, "inverse-sampled KS = {d}");

        let degenerate = SpectralSample {
            n: 4,
            eigenvalue_batches: vec![vec![0.0; 4]],
            trace_moments: BTreeMap::new(),
        };
        let d = ks_distance(&degenerate, &law).unwrap();
        assert!(d >= 0.5, "point mass KS = {d}");
    }

    #[test]
    fn green_function_closed_form() {
        let g = green_function(Complex64::new(10.0, 0.0), 1.0).unwrap();
        assert_relative_eq!(g.re, 0.1010205144, epsilon = 1e-9);
        assert_relative_eq!(g.im, 0.0, epsilon = 1e-12);
        // fixed point G = 1 / (z - alpha^2 G) off the cut
        for (z, alpha) in [
            (Complex64::new(3.0, 0.5), 1.0),
            (Complex64::new(-1.0, 2.0), 0.7),
            (Complex64::new(0.3, -1.4), 1.3),
        ] {
            let g = green_function(z, alpha).unwrap();
            let fixed = Complex64::new(1.0, 0.0) / (z - alpha * alpha * g);
            assert!((g - fixed).norm() <= 1e-12, "fixed point broken at {z}");
            // Schwarz reflection
            let reflected = green_function(z.conj(), alpha).unwrap();
            assert!((reflected - g.conj()).norm() <= 1e-12);
        }
        assert!(matches!(
            green_function(Complex64::new(0.5, 0.0), 1.0),
            Err(SpectralError::OnCut(_, _))
        ));
    }

    #[test]
    fn green_series_tail_matches_catalan_coefficients() {
        // G - (1/z + a^2/z^3 + 2 a^4 / z^5 + 5 a^6 / z^7) = 14 a^8/z^9 + ...
        let alpha = 1.0f64;
        let z = 10.0f64;
        let g = green_function(Complex64::new(z, 0.0), alpha).unwrap().re;
        let mut partial = 0.0;
        for (m, coeff) in [1.0, 1.0, 2.0, 5.0].iter().enumerate() {
            partial += coeff * alpha.powi(2 * m as i32) / z.powi(2 * m as i32 + 1);
        }
        let tail = g - partial;
        let expected = 14.0 * alpha.powi(8) / z.powi(9);
        // the next series term is 42/z^11, about 3% of the tail here
        assert_relative_eq!(tail, expected, max_relative = 5e-2);
    }

    #[test]
    fn boundary_values_recover_the_density() {
        let alpha = 1.0;
        let law = SemicircleLaw::new(alpha);
        for lambda in [0.0, 0.37, -1.2, 1.8] {
            let mut prev_err = f64::INFINITY;
            for eps in [1e-2, 1e-3, 1e-4] {
                let g = green_function(Complex64::new(lambda, eps), alpha).unwrap();
                let err = (-g.im / std::f64::consts::PI - law.density(lambda)).abs();
                // O(eps): each decade of eps gains roughly a decade
                assert!(err < prev_err.max(1e-12), "no improvement at eps={eps}");
                assert!(
                    err <= 1.0 * eps.sqrt().min(30.0 * eps),
                    "err {err} too large at eps {eps} lambda {lambda}"
                );
                prev_err = err;
            }
        }
    }

    #[test]
    fn gue_histogram_l1_distance_shrinks_with_n() {
        // equal pooled eigenvalue counts per size, so the trend is the
        // finite-size bias rather than sampling noise
        let mut prev = f64::INFINITY;
        for &n in &[32usize, 64, 128] {
            let samples =
                sample_batch(&EnsembleSpec::Gue { alpha: 1.0 }, n, 21, 4096 / n).unwrap();
            let spectra = SpectralSample::analyze(&samples, &[2], &SOLVER).unwrap();
            let law = SemicircleLaw::new(1.0);
            let hist = histogram(&spectra, &law, 41).unwrap();
            let l1: f64 = hist
                .iter()
                .map(|b| (b.empirical_density - b.semicircle_density).abs() * (b.right - b.left))
                .sum();
            assert!(l1 < prev + 0.03, "L1 distance should not grow: {l1} vs {prev}");
            prev = l1;
        }
        assert!(prev < 0.2, "final L1 distance {prev}");
    }
}
