//! Samplers for Hermitian random-matrix ensembles.
//!
//! Three regimes: independent entries (GUE and general Wigner),
//! dependent entries built by adding a single shared scalar noise with a
//! tunable decay `N^(-beta)` to a Gaussian base, and unitary-invariant
//! single-trace potentials sampled by entrywise Metropolis.  Sampling is
//! deterministic in `(spec, N, seed)`: every sample index gets its own
//! counter-based RNG stream, so batches are reproducible regardless of
//! how work is scheduled.

use crate::cumulant::{CumulantError, CumulantSpec, PerturbationTerm};
use crate::graph::{graphs_with_edge_count, GraphError, OrientedMultigraph};
use crate::matrix::HermitianMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("invalid ensemble spec: {0}")]
    InvalidSpec(String),
    #[error("unbounded potential: {0}")]
    UnboundedPotential(String),
    #[error("cumulants are not available for this ensemble: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Cumulant(#[from] CumulantError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Zero-mean scalar distribution for Wigner entry parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case")]
pub enum EntryDistribution {
    Normal { std_dev: f64 },
    Uniform { half_width: f64 },
    Rademacher { scale: f64 },
}

impl EntryDistribution {
    fn validate(&self) -> Result<(), EnsembleError> {
        let p = match self {
            Self::Normal { std_dev } => *std_dev,
            Self::Uniform { half_width } => *half_width,
            Self::Rademacher { scale } => *scale,
        };
        if !(p > 0.0) || !p.is_finite() {
            return Err(EnsembleError::InvalidSpec(
                "entry distribution parameter must be positive and finite".into(),
            ));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Self::Normal { std_dev } => std_dev * standard_normal(rng),
            Self::Uniform { half_width } => half_width * (2.0 * rng.random::<f64>() - 1.0),
            Self::Rademacher { scale } => {
                if rng.random::<bool>() {
                    *scale
                } else {
                    -*scale
                }
            }
        }
    }

    /// Cumulants of the scalar law, orders 1..=4 (all three are
    /// symmetric, so the odd ones vanish).
    pub fn cumulant(&self, order: u32) -> f64 {
        match (self, order) {
            (_, 1) | (_, 3) => 0.0,
            (Self::Normal { std_dev }, 2) => std_dev * std_dev,
            (Self::Normal { .. }, 4) => 0.0,
            (Self::Uniform { half_width }, 2) => half_width * half_width / 3.0,
            (Self::Uniform { half_width }, 4) => -2.0 * half_width.powi(4) / 15.0,
            (Self::Rademacher { scale }, 2) => scale * scale,
            (Self::Rademacher { scale }, 4) => -2.0 * scale.powi(4),
            _ => panic!("entry cumulants implemented for orders 1..=4"),
        }
    }
}

/// Scalar law of the shared noise in the dependent-entry family.  All
/// cumulants are finite; the default choice is non-Gaussian so that
/// higher-order joint cumulants are actually exercised.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case")]
pub enum NoiseDistribution {
    CenteredUniform { half_width: f64 },
    CenteredExponential { rate: f64 },
}

impl NoiseDistribution {
    fn validate(&self) -> Result<(), EnsembleError> {
        let p = match self {
            Self::CenteredUniform { half_width } => *half_width,
            Self::CenteredExponential { rate } => *rate,
        };
        if !(p > 0.0) || !p.is_finite() {
            return Err(EnsembleError::InvalidSpec(
                "noise distribution parameter must be positive and finite".into(),
            ));
        }
        Ok(())
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Self::CenteredUniform { half_width } => {
                half_width * (2.0 * rng.random::<f64>() - 1.0)
            }
            Self::CenteredExponential { rate } => {
                let u: f64 = rng.random();
                -(1.0 - u).ln() / rate - 1.0 / rate
            }
        }
    }

    pub fn cumulant(&self, order: u32) -> f64 {
        match (self, order) {
            (_, 1) => 0.0,
            (Self::CenteredUniform { half_width }, 2) => half_width * half_width / 3.0,
            (Self::CenteredUniform { .. }, 3) => 0.0,
            (Self::CenteredUniform { half_width }, 4) => -2.0 * half_width.powi(4) / 15.0,
            (Self::CenteredExponential { rate }, k @ 2..=4) => {
                (2..k).map(|m| m as f64).product::<f64>() / rate.powi(k as i32)
            }
            _ => panic!("noise cumulants implemented for orders 1..=4"),
        }
    }
}

/// Which entries the shared noise reaches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisePattern {
    AllOnes,
    OffDiagonal,
}

fn default_steps() -> usize {
    5
}
fn default_step_size() -> f64 {
    1.5
}
fn default_burn_in() -> usize {
    50
}

/// Recipe for sampling one Hermitian ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum EnsembleSpec {
    /// Gaussian unitary ensemble with entry covariance
    /// `<M_ij M_kl>_c = alpha^2 d_il d_jk`.
    Gue { alpha: f64 },
    /// Independent entries: iid real diagonal, iid real/imaginary parts
    /// off the diagonal, all zero-mean by construction.
    WignerIid {
        diagonal: EntryDistribution,
        off_diagonal: EntryDistribution,
    },
    /// GUE base plus `(s / N^beta) * P` with one scalar draw `s` shared
    /// by all entries; realizes uniformly-decaying dependent cumulants.
    CommonNoise {
        alpha: f64,
        noise: NoiseDistribution,
        beta: f64,
        pattern: NoisePattern,
    },
    /// Single-trace invariant law `exp(-Tr V(M))` with
    /// `V(x) = x^2/2 + sum_p g_p N^(1-p/2) x^p / p`, sampled by
    /// entrywise Metropolis.
    InvariantPotential {
        #[serde(with = "couplings_as_string_keys")]
        couplings: BTreeMap<u32, f64>,
        #[serde(default = "default_steps")]
        steps: usize,
        #[serde(default = "default_step_size")]
        step_size: f64,
        #[serde(default = "default_burn_in")]
        burn_in: usize,
    },
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<(), EnsembleError> {
        match self {
            Self::Gue { alpha } => {
                if !(*alpha >= 0.0) || !alpha.is_finite() {
                    return Err(EnsembleError::InvalidSpec(
                        "gue alpha must be finite and non-negative".into(),
                    ));
                }
            }
            Self::WignerIid {
                diagonal,
                off_diagonal,
            } => {
                diagonal.validate()?;
                off_diagonal.validate()?;
            }
            Self::CommonNoise {
                alpha, noise, beta, ..
            } => {
                if !(*alpha >= 0.0) || !alpha.is_finite() {
                    return Err(EnsembleError::InvalidSpec(
                        "common-noise alpha must be finite and non-negative".into(),
                    ));
                }
                noise.validate()?;
                if !(*beta >= 0.0) {
                    return Err(EnsembleError::InvalidSpec(
                        "decay exponent beta must be non-negative".into(),
                    ));
                }
            }
            Self::InvariantPotential {
                step_size,
                couplings,
                ..
            } => {
                if !(*step_size > 0.0) || !step_size.is_finite() {
                    return Err(EnsembleError::InvalidSpec(
                        "step_size must be positive".into(),
                    ));
                }
                check_bounded_potential(couplings)?;
            }
        }
        Ok(())
    }
}

/// JSON object keys are strings; round-trip the power -> coupling map
/// through string keys so `{"4": 1.0}` parses everywhere (including
/// through internally tagged enum buffering).
mod couplings_as_string_keys {
    use serde::de::Error;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    pub fn serialize<S: Serializer>(
        map: &BTreeMap<u32, f64>,
        serializer: S,
    ) -> Result<S::Ok, S::Error> {
        map.iter()
            .map(|(k, v)| (k.to_string(), *v))
            .collect::<BTreeMap<String, f64>>()
            .serialize(serializer)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        deserializer: D,
    ) -> Result<BTreeMap<u32, f64>, D::Error> {
        let raw = BTreeMap::<String, f64>::deserialize(deserializer)?;
        raw.into_iter()
            .map(|(k, v)| {
                k.parse::<u32>()
                    .map(|p| (p, v))
                    .map_err(|_| D::Error::custom(format!("coupling power {k} is not an integer")))
            })
            .collect()
    }
}

fn check_bounded_potential(couplings: &BTreeMap<u32, f64>) -> Result<(), EnsembleError> {
    for (&p, &g) in couplings {
        if p < 3 {
            return Err(EnsembleError::InvalidSpec(
                "couplings start at the cubic term".into(),
            ));
        }
        if !g.is_finite() {
            return Err(EnsembleError::InvalidSpec("coupling must be finite".into()));
        }
    }
    if let Some((&top, &g_top)) = couplings.iter().filter(|&(_, &g)| g != 0.0).next_back() {
        if top % 2 == 1 {
            return Err(EnsembleError::UnboundedPotential(format!(
                "leading power {top} is odd"
            )));
        }
        if g_top < 0.0 {
            return Err(EnsembleError::UnboundedPotential(format!(
                "leading coupling g_{top} = {g_top} is negative"
            )));
        }
    }
    Ok(())
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    use rand_distr::StandardNormal;
    rng.sample::<f64, _>(StandardNormal)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One matrix, deterministic in `(spec, n, seed)`.
pub fn sample(spec: &EnsembleSpec, n: usize, seed: u64) -> Result<HermitianMatrix, EnsembleError> {
    sample_indexed(spec, n, seed, 0)
}

/// `count` matrices; index `k` is drawn from its own RNG stream keyed by
/// `(seed, k)`, so the batch equals `count` calls of [`sample_indexed`]
/// in any scheduling order.  A Metropolis ensemble is one chain instead:
/// decorrelated draws along the chain, inherently sequential.
pub fn sample_batch(
    spec: &EnsembleSpec,
    n: usize,
    seed: u64,
    count: usize,
) -> Result<Vec<HermitianMatrix>, EnsembleError> {
    if let EnsembleSpec::InvariantPotential { .. } = spec {
        let mut chain = MetropolisChain::new(spec, n, seed)?;
        return Ok((0..count).map(|_| chain.next_sample()).collect());
    }
    (0..count)
        .into_par_iter()
        .map(|k| sample_indexed(spec, n, seed, k as u64))
        .collect()
}

pub fn sample_indexed(
    spec: &EnsembleSpec,
    n: usize,
    seed: u64,
    index: u64,
) -> Result<HermitianMatrix, EnsembleError> {
    if n == 0 {
        return Err(EnsembleError::InvalidSpec("dimension must be >= 1".into()));
    }
    spec.validate()?;
    let mut rng = stream_rng(seed, index);
    match spec {
        EnsembleSpec::Gue { alpha } => Ok(sample_gue(*alpha, n, &mut rng)),
        EnsembleSpec::WignerIid {
            diagonal,
            off_diagonal,
        } => Ok(HermitianMatrix::from_upper_triangle(n, |i, j| {
            if i == j {
                Complex64::new(diagonal.sample(&mut rng), 0.0)
            } else {
                Complex64::new(off_diagonal.sample(&mut rng), off_diagonal.sample(&mut rng))
            }
        })),
        EnsembleSpec::CommonNoise {
            alpha,
            noise,
            beta,
            pattern,
        } => {
            let mut m = sample_gue(*alpha, n, &mut rng);
            let shared = noise.sample(&mut rng) * (n as f64).powf(-*beta);
            let offset = Complex64::new(shared, 0.0);
            for i in 0..n {
                if *pattern == NoisePattern::AllOnes {
                    m.perturb_entry(i, i, offset);
                }
                for j in i + 1..n {
                    m.perturb_entry(i, j, offset);
                }
            }
            Ok(m)
        }
        EnsembleSpec::InvariantPotential { .. } => {
            let mut chain = MetropolisChain::new(spec, n, seed.wrapping_add(index))?;
            Ok(chain.next_sample())
        }
    }
}

fn sample_gue(alpha: f64, n: usize, rng: &mut ChaCha8Rng) -> HermitianMatrix {
    let off_std = alpha / 2f64.sqrt();
    HermitianMatrix::from_upper_triangle(n, |i, j| {
        if i == j {
            Complex64::new(alpha * standard_normal(rng), 0.0)
        } else {
            Complex64::new(off_std * standard_normal(rng), off_std * standard_normal(rng))
        }
    })
}

/// Analytic entry cumulants of a sampler, as a [`CumulantSpec`], valid
/// through order 4.  Not available for the invariant-potential family
/// (its cumulants have no closed form).
pub fn cumulant_spec_of(spec: &EnsembleSpec) -> Result<CumulantSpec, EnsembleError> {
    spec.validate()?;
    match spec {
        EnsembleSpec::Gue { alpha } => Ok(CumulantSpec::gaussian(*alpha)),
        EnsembleSpec::CommonNoise {
            alpha,
            noise,
            beta,
            pattern,
        } => {
            let mut terms = Vec::new();
            for order in 2..=4u32 {
                let kappa = noise.cumulant(order);
                if kappa == 0.0 {
                    continue;
                }
                for graph in graphs_with_edge_count(order as usize)? {
                    if *pattern == NoisePattern::OffDiagonal
                        && graph.edges().iter().any(|&(s, t)| s == t)
                    {
                        continue;
                    }
                    terms.push(PerturbationTerm::real(
                        graph,
                        kappa,
                        order as f64 * beta,
                    )?);
                }
            }
            Ok(CumulantSpec::new(*alpha, terms)?)
        }
        EnsembleSpec::WignerIid {
            diagonal,
            off_diagonal,
        } => {
            let alpha_sq = 2.0 * off_diagonal.cumulant(2);
            let alpha = alpha_sq.sqrt();
            let mut terms = Vec::new();
            for order in 2..=4u32 {
                // diagonal entries: graphs of `order` loops on one vertex
                let mut kappa_diag = diagonal.cumulant(order);
                if order == 2 {
                    kappa_diag -= alpha_sq; // covered by the Gaussian part
                }
                if kappa_diag != 0.0 {
                    let loops = OrientedMultigraph::new(1, vec![(0, 0); order as usize])
                        .expect("loops touch their vertex");
                    terms.push(PerturbationTerm::real(loops, kappa_diag, 0.0)?);
                }
                // one off-diagonal pair: `a` factors of M_ij and `b` of
                // M_ji have joint cumulant kappa_e(part) * (1 + i^e (-1)^b)
                // a factors of M_ij and b of M_ji label the same graph
                // class as (b, a) after swapping the two vertices, so
                // only a >= b is added.  Odd orders never reach here:
                // the entry parts are symmetric laws with zero odd
                // cumulants, which is exactly what keeps the class
                // amplitude orientation-independent.
                let kappa_off = off_diagonal.cumulant(order);
                if kappa_off == 0.0 {
                    continue;
                }
                for a in order.div_ceil(2)..=order {
                    let b = order - a;
                    let i_pow = match order % 4 {
                        0 => Complex64::new(1.0, 0.0),
                        1 => Complex64::new(0.0, 1.0),
                        2 => Complex64::new(-1.0, 0.0),
                        _ => Complex64::new(0.0, -1.0),
                    };
                    let sign = if b % 2 == 0 { 1.0 } else { -1.0 };
                    let mut amplitude = (Complex64::new(1.0, 0.0) + i_pow * sign) * kappa_off;
                    if a == 1 && b == 1 {
                        amplitude -= Complex64::new(alpha_sq, 0.0);
                    }
                    if amplitude.norm() == 0.0 {
                        continue;
                    }
                    let mut edges = vec![(0usize, 1usize); a as usize];
                    edges.extend(std::iter::repeat_n((1usize, 0usize), b as usize));
                    let graph = OrientedMultigraph::new(2, edges)
                        .expect("both endpoints are covered for order >= 2");
                    terms.push(PerturbationTerm::new(graph, amplitude, 0.0)?);
                }
            }
            Ok(CumulantSpec::new(alpha, terms)?)
        }
        EnsembleSpec::InvariantPotential { .. } => Err(EnsembleError::Unsupported(
            "invariant-potential cumulants are not in closed form".into(),
        )),
    }
}

/// Entrywise Metropolis chain for `exp(-Tr V(M))`.
///
/// A sweep proposes `n (n + 1) / 2` single-entry Gaussian perturbations
/// at random positions, each accepted with probability
/// `min(1, exp(-delta Tr V))`.  The change of `Tr M^p` under a rank-two
/// entry update is evaluated exactly from matrix-vector products against
/// the two touched basis vectors (an `O(p N^2)` rank-two update instead
/// of `O(N^3)` full re-evaluation); `audit` mode re-checks every
/// proposal against the full evaluation.
pub struct MetropolisChain {
    n: usize,
    couplings: BTreeMap<u32, f64>,
    step_size: f64,
    burn_in: usize,
    gap: usize,
    state: HermitianMatrix,
    rng: ChaCha8Rng,
    max_power: u32,
    proposed: u64,
    accepted: u64,
    burned_in: bool,
    audit: bool,
}

impl MetropolisChain {
    pub fn new(spec: &EnsembleSpec, n: usize, seed: u64) -> Result<Self, EnsembleError> {
        let EnsembleSpec::InvariantPotential {
            couplings,
            steps,
            step_size,
            burn_in,
        } = spec
        else {
            return Err(EnsembleError::InvalidSpec(
                "Metropolis chains require an invariant-potential spec".into(),
            ));
        };
        if n == 0 {
            return Err(EnsembleError::InvalidSpec("dimension must be >= 1".into()));
        }
        check_bounded_potential(couplings)?;
        let max_power = couplings
            .iter()
            .filter(|&(_, &g)| g != 0.0)
            .map(|(&p, _)| p)
            .max()
            .unwrap_or(2)
            .max(2);
        Ok(Self {
            n,
            couplings: couplings.clone(),
            step_size: *step_size,
            burn_in: *burn_in,
            gap: (*steps).max(1),
            state: HermitianMatrix::zero(n),
            rng: stream_rng(seed, 0x4d63),
            max_power,
            proposed: 0,
            accepted: 0,
            burned_in: false,
            audit: false,
        })
    }

    /// Re-check every incremental `delta Tr V` against a full
    /// re-evaluation (slow; for tests).
    pub fn set_audit(&mut self, audit: bool) {
        self.audit = audit;
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            return 0.0;
        }
        self.accepted as f64 / self.proposed as f64
    }

    pub fn state(&self) -> &HermitianMatrix {
        &self.state
    }

    /// Burn in on first call, then advance `steps` sweeps per call and
    /// hand out the current state.
    pub fn next_sample(&mut self) -> HermitianMatrix {
        let sweeps = if self.burned_in {
            self.gap
        } else {
            self.burned_in = true;
            self.burn_in.max(1)
        };
        for _ in 0..sweeps {
            self.sweep();
        }
        self.state.clone()
    }

    fn sweep(&mut self) {
        let proposals = self.n * (self.n + 1) / 2;
        let scale = self.step_size / (self.n as f64).sqrt();
        for _ in 0..proposals {
            let i = self.rng.random_range(0..self.n);
            let j = self.rng.random_range(0..self.n);
            let (i, j) = (i.min(j), i.max(j));
            let delta = if i == j {
                Complex64::new(2f64.sqrt() * scale * standard_normal(&mut self.rng), 0.0)
            } else {
                Complex64::new(
                    scale * standard_normal(&mut self.rng),
                    scale * standard_normal(&mut self.rng),
                )
            };
            let delta_v = self.delta_trace_potential(i, j, delta);
            if self.audit {
                let full = self.delta_trace_potential_full(i, j, delta);
                let tol = 1e-8 * (1.0 + delta_v.abs() + full.abs());
                assert!(
                    (delta_v - full).abs() <= tol,
                    "incremental delta Tr V {delta_v} disagrees with full {full}"
                );
            }
            self.proposed += 1;
            let u: f64 = self.rng.random();
            if u.ln() < -delta_v {
                self.state.perturb_entry(i, j, delta);
                self.accepted += 1;
            }
        }
    }

    fn coupling_weight(&self, p: u32) -> f64 {
        let n = self.n as f64;
        if p == 2 {
            0.5
        } else {
            self.couplings.get(&p).copied().unwrap_or(0.0) * n.powf(1.0 - p as f64 / 2.0)
                / p as f64
        }
    }

    /// `Tr V(M + D) - Tr V(M)` where `D` is the Hermitian update with
    /// `delta` at `(i, j)`.
    fn delta_trace_potential(&self, i: usize, j: usize, delta: Complex64) -> f64 {
        let components: Vec<(usize, usize, Complex64)> = if i == j {
            vec![(i, i, Complex64::new(delta.re, 0.0))]
        } else {
            vec![(i, j, delta), (j, i, delta.conj())]
        };
        // (M^a e_i) and (M^a e_j) for a = 0 .. max_power - 1
        let powers_i = self.krylov_column(i);
        let powers_j = if i == j {
            Vec::new()
        } else {
            self.krylov_column(j)
        };
        let entry = |a: usize, row: usize, col: usize| -> Complex64 {
            let column = if col == i { &powers_i } else { &powers_j };
            column[a][row]
        };
        let mut total = 0.0;
        let mut powers_needed: Vec<u32> = vec![2];
        powers_needed.extend(self.couplings.keys().copied());
        for p in powers_needed {
            let weight = self.coupling_weight(p);
            if weight == 0.0 {
                continue;
            }
            total += weight * delta_trace_power(p as usize, &components, &entry);
        }
        total
    }

    fn delta_trace_potential_full(&self, i: usize, j: usize, delta: Complex64) -> f64 {
        let mut perturbed = self.state.clone();
        perturbed.perturb_entry(i, j, delta);
        let before = self.state.trace_powers(self.max_power);
        let after = perturbed.trace_powers(self.max_power);
        let mut total = 0.0;
        for p in 2..=self.max_power {
            total += self.coupling_weight(p) * (after[p as usize - 1] - before[p as usize - 1]);
        }
        total
    }

    /// Columns `M^a e_col` for `a = 0 .. max_power - 1`.
    fn krylov_column(&self, col: usize) -> Vec<Vec<Complex64>> {
        let n = self.n;
        let mut out = Vec::with_capacity(self.max_power as usize);
        let mut v = vec![Complex64::ZERO; n];
        v[col] = Complex64::new(1.0, 0.0);
        out.push(v);
        for _ in 1..self.max_power {
            let prev = out.last().unwrap();
            let mut next = vec![Complex64::ZERO; n];
            for (r, slot) in next.iter_mut().enumerate() {
                let mut acc = Complex64::ZERO;
                for c in 0..n {
                    acc += self.state.get(r, c) * prev[c];
                }
                *slot = acc;
            }
            out.push(next);
        }
        out
    }
}

/// `Tr (M + D)^p - Tr M^p` for a sparse update `D = sum_c coeff_c e_r e_c^T`,
/// expanded over all placements of `D` factors in the length-`p` word.
/// `entry(a, row, col)` must return `(M^a)_{row, col}` for the touched
/// rows/columns.
fn delta_trace_power(
    p: usize,
    components: &[(usize, usize, Complex64)],
    entry: &impl Fn(usize, usize, usize) -> Complex64,
) -> f64 {
    let mut total = Complex64::ZERO;
    for mask in 1u32..(1 << p) {
        // positions of D factors in this word
        let mut positions = Vec::with_capacity(p);
        for bit in 0..p {
            if mask & (1 << bit) != 0 {
                positions.push(bit);
            }
        }
        let q = positions.len();
        // cyclic gaps of M-runs between consecutive D's
        let mut gaps = Vec::with_capacity(q);
        for m in 0..q {
            let next = positions[(m + 1) % q];
            let gap = if m + 1 == q {
                p - positions[m] - 1 + positions[0]
            } else {
                next - positions[m] - 1
            };
            gaps.push(gap);
        }
        // sum over component choices at each D slot
        let mut choice = vec![0usize; q];
        loop {
            let mut term = Complex64::new(1.0, 0.0);
            for m in 0..q {
                let (_, col, coeff) = components[choice[m]];
                let (row_next, _, _) = components[choice[(m + 1) % q]];
                term *= coeff * entry(gaps[m], col, row_next);
                if term == Complex64::ZERO {
                    break;
                }
            }
            total += term;
            // odometer over component choices
            let mut slot = 0;
            loop {
                if slot == q {
                    break;
                }
                choice[slot] += 1;
                if choice[slot] < components.len() {
                    break;
                }
                choice[slot] = 0;
                slot += 1;
            }
            if slot == q {
                break;
            }
        }
    }
    debug_assert!(
        total.im.abs() <= 1e-9 * (1.0 + total.re.abs()),
        "delta trace of a Hermitian power must be real, got {total}"
    );
    total.re
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn gue(alpha: f64) -> EnsembleSpec {
        EnsembleSpec::Gue { alpha }
    }

    #[test]
    fn zero_alpha_gives_zero_matrix() {
        let m = sample(&gue(0.0), 6, 42).unwrap();
        assert_eq!(m, HermitianMatrix::zero(6));
    }

    #[test]
    fn sampling_is_deterministic_and_hermitian() {
        let specs = [
            gue(1.0),
            EnsembleSpec::WignerIid {
                diagonal: EntryDistribution::Uniform { half_width: 1.2 },
                off_diagonal: EntryDistribution::Rademacher {
                    scale: 1.0 / 2f64.sqrt(),
                },
            },
            EnsembleSpec::CommonNoise {
                alpha: 1.0,
                noise: NoiseDistribution::CenteredUniform { half_width: 1.0 },
                beta: 0.5,
                pattern: NoisePattern::AllOnes,
            },
        ];
        for spec in &specs {
            let a = sample(spec, 8, 7).unwrap();
            let b = sample(spec, 8, 7).unwrap();
            assert_eq!(a, b, "same seed must give identical matrices");
            assert!(a.is_hermitian_bitexact());
            let c = sample(spec, 8, 8).unwrap();
            assert_ne!(a, c, "different seeds must differ");
        }
    }

    #[test]
    fn batch_matches_indexed_sampling() {
        let spec = gue(1.0);
        let batch = sample_batch(&spec, 5, 11, 4).unwrap();
        for (k, m) in batch.iter().enumerate() {
            assert_eq!(*m, sample_indexed(&spec, 5, 11, k as u64).unwrap());
        }
    }

    #[test]
    fn gue_entry_covariances_match_the_cumulant_formula() {
        // all sixteen second moments at N = 2, 1e5 draws, 5 sigma band
        let n = 2;
        let draws = 100_000;
        let samples = sample_batch(&gue(1.0), n, 3, draws).unwrap();
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        let mean: Complex64 = samples
                            .iter()
                            .map(|m| m.get(i, j) * m.get(k, l))
                            .sum::<Complex64>()
                            / draws as f64;
                        let expected = if i == l && j == k { 1.0 } else { 0.0 };
                        // second moments of products have variance O(1);
                        // 5 sigma at 1e5 draws is ~0.016
                        let band = 5.0 * 1.8 / (draws as f64).sqrt();
                        assert!(
                            (mean.re - expected).abs() < band && mean.im.abs() < band,
                            "cov(M_{i}{j}, M_{k}{l}) = {mean} expected {expected}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn gue_pair_covariance_at_n_32() {
        let draws = 100_000;
        let samples = sample_batch(&gue(1.0), 32, 8, draws).unwrap();
        let mut m12_m21 = Complex64::ZERO;
        let mut m12_sq = Complex64::ZERO;
        for m in &samples {
            m12_m21 += m.get(1, 2) * m.get(2, 1);
            m12_sq += m.get(1, 2) * m.get(1, 2);
        }
        m12_m21 /= draws as f64;
        m12_sq /= draws as f64;
        let band = 3.0 * 1.5 / (draws as f64).sqrt();
        assert!(
            (m12_m21.re - 1.0).abs() < band && m12_m21.im.abs() < band,
            "E[M12 M21] = {m12_m21}"
        );
        assert!(m12_sq.norm() < band, "E[M12^2] = {m12_sq}");
    }

    #[test]
    fn common_noise_with_huge_beta_reduces_to_gue() {
        let base = sample(&gue(1.0), 16, 99).unwrap();
        let spec = EnsembleSpec::CommonNoise {
            alpha: 1.0,
            noise: NoiseDistribution::CenteredUniform { half_width: 1.0 },
            beta: 1e9,
            pattern: NoisePattern::AllOnes,
        };
        let noisy = sample(&spec, 16, 99).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                assert_eq!(noisy.get(i, j), base.get(i, j));
            }
        }
    }

    #[test]
    fn cumulant_spec_of_gue_is_pure_gaussian() {
        let spec = cumulant_spec_of(&gue(0.7)).unwrap();
        assert_eq!(spec.alpha(), 0.7);
        assert!(spec.perturbations().is_empty());
    }

    #[test]
    fn cumulant_spec_of_common_noise_uniform() {
        let c = 1.3f64;
        let beta = 0.75;
        let spec = cumulant_spec_of(&EnsembleSpec::CommonNoise {
            alpha: 1.0,
            noise: NoiseDistribution::CenteredUniform { half_width: c },
            beta,
            pattern: NoisePattern::AllOnes,
        })
        .unwrap();
        let kappa2 = c * c / 3.0;
        let kappa4 = -2.0 * c.powi(4) / 15.0;
        // no third-order terms for a symmetric noise
        assert!(spec
            .perturbations()
            .iter()
            .all(|t| t.graph().edge_count() != 3));
        let two_edge: Vec<_> = spec
            .perturbations()
            .iter()
            .filter(|t| t.graph().edge_count() == 2)
            .collect();
        let expected_two_edge = graphs_with_edge_count(2).unwrap().len();
        assert_eq!(two_edge.len(), expected_two_edge);
        for t in two_edge {
            assert_relative_eq!(t.amplitude().re, kappa2, max_relative = 1e-14);
            assert_relative_eq!(t.n_exponent(), 2.0 * beta, max_relative = 1e-14);
        }
        for t in spec
            .perturbations()
            .iter()
            .filter(|t| t.graph().edge_count() == 4)
        {
            assert_relative_eq!(t.amplitude().re, kappa4, max_relative = 1e-14);
            assert_relative_eq!(t.n_exponent(), 4.0 * beta, max_relative = 1e-14);
        }
    }

    #[test]
    fn uniform_noise_cumulants_match_quadrature() {
        // independent oracle: integrate moments of U(-c, c), invert
        let c = 0.9f64;
        let m2 = crate::testutil::adaptive_simpson(|x| x * x / (2.0 * c), -c, c, 1e-12);
        let m4 = crate::testutil::adaptive_simpson(|x| x.powi(4) / (2.0 * c), -c, c, 1e-12);
        let dist = NoiseDistribution::CenteredUniform { half_width: c };
        assert_relative_eq!(dist.cumulant(2), m2, epsilon = 1e-10);
        assert_relative_eq!(dist.cumulant(4), m4 - 3.0 * m2 * m2, epsilon = 1e-10);
    }

    #[test]
    fn wigner_rademacher_fourth_cumulant() {
        let scale = 1.0 / 2f64.sqrt();
        let spec = cumulant_spec_of(&EnsembleSpec::WignerIid {
            diagonal: EntryDistribution::Uniform { half_width: 3f64.sqrt() },
            off_diagonal: EntryDistribution::Rademacher { scale },
        })
        .unwrap();
        assert_relative_eq!(spec.alpha(), 1.0, max_relative = 1e-14);
        // per-part kappa_4 = -2 (alpha^2 / 2)^2 = -1/2; the same-direction
        // four-edge graph gets 2 kappa_4 = -1
        let four_same = OrientedMultigraph::new(2, vec![(0, 1); 4]).unwrap();
        let key = four_same.canonical_key().unwrap();
        let found = spec
            .perturbations()
            .iter()
            .find(|t| t.key() == &key)
            .expect("four-parallel-edge term present");
        assert_relative_eq!(found.amplitude().re, -1.0, max_relative = 1e-12);
        // the balanced (2,2) graph gets the same amplitude
        let balanced = OrientedMultigraph::new(2, vec![(0, 1), (0, 1), (1, 0), (1, 0)]).unwrap();
        let key = balanced.canonical_key().unwrap();
        let found = spec
            .perturbations()
            .iter()
            .find(|t| t.key() == &key)
            .expect("balanced four-edge term present");
        assert_relative_eq!(found.amplitude().re, -1.0, max_relative = 1e-12);
        // mixed (3,1) cumulants vanish for independent real/imag parts
        let mixed = OrientedMultigraph::new(2, vec![(0, 1), (0, 1), (0, 1), (1, 0)]).unwrap();
        let key = mixed.canonical_key().unwrap();
        assert!(spec.perturbations().iter().all(|t| t.key() != &key));
        // two-cycle perturbation is absorbed by the Gaussian part
        let two_cycle = OrientedMultigraph::new(2, vec![(0, 1), (1, 0)]).unwrap();
        let key = two_cycle.canonical_key().unwrap();
        assert!(spec.perturbations().iter().all(|t| t.key() != &key));
    }

    #[test]
    fn unbounded_potentials_are_rejected() {
        let odd = EnsembleSpec::InvariantPotential {
            couplings: BTreeMap::from([(3, 1.0)]),
            steps: 1,
            step_size: 1.0,
            burn_in: 1,
        };
        assert!(matches!(
            MetropolisChain::new(&odd, 4, 0),
            Err(EnsembleError::UnboundedPotential(_))
        ));
        let negative = EnsembleSpec::InvariantPotential {
            couplings: BTreeMap::from([(4, -0.5)]),
            steps: 1,
            step_size: 1.0,
            burn_in: 1,
        };
        assert!(matches!(
            MetropolisChain::new(&negative, 4, 0),
            Err(EnsembleError::UnboundedPotential(_))
        ));
        let cubic_quartic = EnsembleSpec::InvariantPotential {
            couplings: BTreeMap::from([(3, -0.4), (4, 0.8)]),
            steps: 1,
            step_size: 1.0,
            burn_in: 1,
        };
        assert!(MetropolisChain::new(&cubic_quartic, 4, 0).is_ok());
    }

    #[test]
    fn incremental_delta_matches_full_reevaluation() {
        let spec = EnsembleSpec::InvariantPotential {
            couplings: BTreeMap::from([(3, 0.3), (4, 1.0), (6, 0.05)]),
            steps: 1,
            step_size: 1.5,
            burn_in: 3,
        };
        let mut chain = MetropolisChain::new(&spec, 10, 5).unwrap();
        chain.set_audit(true);
        // audit mode asserts agreement inside every proposal
        let _ = chain.next_sample();
        let _ = chain.next_sample();
        assert!(chain.proposed >= 4 * 55);
    }

    #[test]
    fn metropolis_acceptance_rate_is_reasonable() {
        let spec = EnsembleSpec::InvariantPotential {
            couplings: BTreeMap::from([(4, 1.0)]),
            steps: 2,
            step_size: default_step_size(),
            burn_in: 20,
        };
        let mut chain = MetropolisChain::new(&spec, 24, 123).unwrap();
        for _ in 0..5 {
            let m = chain.next_sample();
            assert!(m.is_hermitian_bitexact());
        }
        let rate = chain.acceptance_rate();
        assert!(
            rate > 0.1 && rate < 0.9,
            "acceptance rate {rate} outside the tuned band"
        );
    }

    #[test]
    fn ensemble_spec_json_round_trip() {
        let spec = EnsembleSpec::CommonNoise {
            alpha: 1.0,
            noise: NoiseDistribution::CenteredExponential { rate: 2.0 },
            beta: 0.75,
            pattern: NoisePattern::OffDiagonal,
        };
        let json = serde_json::to_string(&spec).unwrap();
        let back: EnsembleSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
        let metro: EnsembleSpec = serde_json::from_str(
            r#"{"type":"invariant_potential","couplings":{"4":1.0}}"#,
        )
        .unwrap();
        if let EnsembleSpec::InvariantPotential {
            steps,
            step_size,
            burn_in,
            ..
        } = metro
        {
            assert_eq!(steps, default_steps());
            assert_eq!(step_size, default_step_size());
            assert_eq!(burn_in, default_burn_in());
        } else {
            panic!("wrong variant");
        }
    }
}
