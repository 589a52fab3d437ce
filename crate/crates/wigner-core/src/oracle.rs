//! Exact finite-size trace moments evaluated directly from a cumulant
//! specification: the brute-force ground truth connecting the graph
//! combinatorics, the samplers, and the flow engine.
//!
//! `Tr M^k` expands as a sum over all `N^k` cyclic index tuples of an
//! entry moment, each of which is a set-partition sum over cumulants.
//! The tuple loop is exhaustive (guarded by a budget); the partition sum
//! is memoized per index-coincidence pattern, which is a pure cache: for
//! the uniform cumulant class the moment of a tuple depends only on
//! which positions share index values.  [`wick_pairing_moment`] computes
//! the Gaussian case by a completely separate route (perfect matchings
//! weighted by `N^(#index loops)`) and must agree exactly.

use crate::cumulant::{
    moment_from_cumulants, moment_from_cumulants_exact, CumulantError, CumulantSpec,
};
use crate::exact::{integer_power, ComplexRational};
use num_bigint::BigInt;
use num_complex::Complex64;
use num_rational::BigRational;
use num_traits::{One, Zero};
use rayon::prelude::*;
use std::collections::HashMap;
use thiserror::Error;

/// Exhaustive enumeration is refused above this many index tuples.
pub const TUPLE_BUDGET: u128 = 10_000_000;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("N^k = {needed} exceeds the enumeration budget {budget}")]
    BudgetExceeded { needed: u128, budget: u128 },
    #[error("Wick pairing moments require an even order")]
    OddOrder,
    #[error("order {0} exceeds the pairing enumeration limit 10")]
    OrderTooLarge(u32),
    #[error("empty or non-increasing N grid")]
    BadGrid,
    #[error(transparent)]
    Cumulant(#[from] CumulantError),
}

/// Unnormalized exact sum `sum_tuples <M_.. ... M_..>` together with its
/// size and order, so both the exact and floating normalizations stay
/// available (for odd `k` the normalization `N^(1 + k/2)` is not
/// rational).
#[derive(Debug, Clone)]
pub struct OracleMoment {
    pub n: u64,
    pub k: u32,
    pub raw_sum: ComplexRational,
}

impl OracleMoment {
    /// `raw / N^(1 + k/2)` as an exact rational; only even orders.
    pub fn normalized_rational(&self) -> Option<ComplexRational> {
        if self.k % 2 != 0 {
            return None;
        }
        let power = (self.k as i64 + 2) / 2;
        Some(self.raw_sum.scale(&integer_power(self.n, -power)))
    }

    pub fn normalized_f64(&self) -> Complex64 {
        self.raw_sum.to_complex64() / (self.n as f64).powf(1.0 + self.k as f64 / 2.0)
    }
}

fn check_budget(n: u64, k: u32) -> Result<(), OracleError> {
    let needed = (n as u128).pow(k);
    if needed > TUPLE_BUDGET {
        return Err(OracleError::BudgetExceeded {
            needed,
            budget: TUPLE_BUDGET,
        });
    }
    Ok(())
}

/// Pattern counts: how many of the `N^k` cyclic tuples realize each
/// index-coincidence pattern (restricted-growth string, bit-packed).
/// The tuple space is split by leading index and walked in parallel.
fn pattern_counts(n: u64, k: u32) -> HashMap<u64, u64> {
    let k = k as usize;
    let maps: Vec<HashMap<u64, u64>> = (0..n)
        .into_par_iter()
        .map(|first| {
            let mut local: HashMap<u64, u64> = HashMap::new();
            let mut tuple = vec![0u64; k];
            tuple[0] = first;
            loop {
                *local.entry(pack_pattern(&tuple)).or_insert(0) += 1;
                // odometer over positions 1..k
                let mut pos = k;
                loop {
                    if pos == 1 {
                        return local;
                    }
                    pos -= 1;
                    tuple[pos] += 1;
                    if tuple[pos] < n {
                        break;
                    }
                    tuple[pos] = 0;
                }
            }
        })
        .collect();
    let mut total: HashMap<u64, u64> = HashMap::new();
    for local in maps {
        for (pattern, count) in local {
            *total.entry(pattern).or_insert(0) += count;
        }
    }
    total
}

/// Restricted-growth string of the tuple, 4 bits per position.
fn pack_pattern(tuple: &[u64]) -> u64 {
    debug_assert!(tuple.len() <= 16);
    let mut packed = 0u64;
    let mut block_of = [u64::MAX; 16];
    let mut blocks = 0u64;
    for (pos, &value) in tuple.iter().enumerate() {
        let slot = tuple[..pos].iter().position(|&prev| prev == value);
        let block = match slot {
            Some(prev_pos) => (packed >> (4 * prev_pos)) & 0xf,
            None => {
                let b = blocks;
                blocks += 1;
                b
            }
        };
        block_of[pos] = block;
        packed |= block << (4 * pos);
    }
    packed
}

/// Cyclic entry pairs of the representative tuple of a pattern.
fn pattern_entries(pattern: u64, k: u32) -> Vec<(usize, usize)> {
    let k = k as usize;
    (0..k)
        .map(|p| {
            let a = ((pattern >> (4 * p)) & 0xf) as usize;
            let b = ((pattern >> (4 * ((p + 1) % k))) & 0xf) as usize;
            (a, b)
        })
        .collect()
}

/// Exact normalized trace moment `Tr M^k / N^(1 + k/2)` from the
/// cumulant spec, as an unnormalized exact sum (see [`OracleMoment`]).
/// Requires an exactly representable spec (integer exponents).
pub fn exact_trace_moment(
    spec: &CumulantSpec,
    n: u64,
    k: u32,
) -> Result<OracleMoment, OracleError> {
    assert!(k >= 1 && n >= 1);
    check_budget(n, k)?;
    let counts = pattern_counts(n, k);
    let mut keys: Vec<u64> = counts.keys().copied().collect();
    keys.sort_unstable();
    let mut raw = ComplexRational::zero();
    for pattern in keys {
        let entries = pattern_entries(pattern, k);
        let value = moment_from_cumulants_exact(spec, &entries, n)?;
        if value.is_zero() {
            continue;
        }
        let count = BigRational::from_integer(BigInt::from(counts[&pattern]));
        raw += value.scale(&count);
    }
    Ok(OracleMoment { n, k, raw_sum: raw })
}

/// Floating-point normalized trace moment; works for any spec (used
/// when exponents are not integers).
pub fn trace_moment_f64(spec: &CumulantSpec, n: u64, k: u32) -> Result<Complex64, OracleError> {
    assert!(k >= 1 && n >= 1);
    check_budget(n, k)?;
    let counts = pattern_counts(n, k);
    let mut keys: Vec<u64> = counts.keys().copied().collect();
    keys.sort_unstable();
    let mut raw = Complex64::ZERO;
    for pattern in keys {
        let entries = pattern_entries(pattern, k);
        raw += moment_from_cumulants(spec, &entries, n) * counts[&pattern] as f64;
    }
    Ok(raw / (n as f64).powf(1.0 + k as f64 / 2.0))
}

/// Audit route with the pattern cache disabled: every tuple evaluates
/// its own partition sum.  Exponentially slower; used to validate the
/// cache.
pub fn exact_trace_moment_uncached(
    spec: &CumulantSpec,
    n: u64,
    k: u32,
) -> Result<OracleMoment, OracleError> {
    check_budget(n, k)?;
    let k_us = k as usize;
    let mut tuple = vec![0u64; k_us];
    let mut raw = ComplexRational::zero();
    loop {
        let entries: Vec<(usize, usize)> = (0..k_us)
            .map(|p| (tuple[p] as usize, tuple[(p + 1) % k_us] as usize))
            .collect();
        raw += moment_from_cumulants_exact(spec, &entries, n)?;
        let mut pos = k_us;
        loop {
            if pos == 0 {
                return Ok(OracleMoment { n, k, raw_sum: raw });
            }
            pos -= 1;
            tuple[pos] += 1;
            if tuple[pos] < n {
                break;
            }
            tuple[pos] = 0;
        }
    }
}

/// Gaussian trace moment by Wick pairing enumeration: sum over perfect
/// matchings of the `k` cycle positions, each contributing
/// `alpha^k N^(#index classes)`; normalized by `N^(1 + k/2)`.
/// Fully independent of the partition machinery.
pub fn wick_pairing_moment(k: u32, n: u64, alpha: f64) -> Result<BigRational, OracleError> {
    if k % 2 != 0 {
        return Err(OracleError::OddOrder);
    }
    if k > 10 {
        return Err(OracleError::OrderTooLarge(k));
    }
    let k_us = k as usize;
    let alpha_sq = BigRational::from_float(alpha * alpha).expect("finite alpha");

    fn matchings(
        unmatched: &mut Vec<usize>,
        pairs: &mut Vec<(usize, usize)>,
        k: usize,
        n: u64,
        total: &mut BigInt,
    ) {
        if unmatched.is_empty() {
            // classes of index slots under i_p = i_{q+1}, i_{p+1} = i_q
            let mut parent: Vec<usize> = (0..k).collect();
            fn find(parent: &mut Vec<usize>, x: usize) -> usize {
                let mut root = x;
                while parent[root] != root {
                    root = parent[root];
                }
                let mut cur = x;
                while parent[cur] != root {
                    let next = parent[cur];
                    parent[cur] = root;
                    cur = next;
                }
                root
            }
            let union = |parent: &mut Vec<usize>, a: usize, b: usize| {
                let (ra, rb) = (find(parent, a), find(parent, b));
                if ra != rb {
                    parent[ra] = rb;
                }
            };
            for &(p, q) in pairs.iter() {
                union(&mut parent, p, (q + 1) % k);
                union(&mut parent, (p + 1) % k, q);
            }
            let classes = (0..k).filter(|&x| find(&mut parent, x) == x).count();
            *total += BigInt::from(n).pow(classes as u32);
            return;
        }
        let first = unmatched[0];
        for slot in 1..unmatched.len() {
            let partner = unmatched[slot];
            let mut rest: Vec<usize> = unmatched[1..].to_vec();
            rest.remove(slot - 1);
            pairs.push((first, partner));
            matchings(&mut rest, pairs, k, n, total);
            pairs.pop();
        }
    }

    let mut total = BigInt::zero();
    let mut unmatched: Vec<usize> = (0..k_us).collect();
    matchings(&mut unmatched, &mut Vec::new(), k_us, n, &mut total);

    let mut alpha_power = BigRational::one();
    for _ in 0..k / 2 {
        alpha_power *= &alpha_sq;
    }
    Ok(BigRational::from_integer(total) * alpha_power * integer_power(n, -((k as i64 + 2) / 2)))
}

/// Exact-when-possible value used by the extrapolation.
fn moment_value(spec: &CumulantSpec, n: u64, k: u32) -> Result<f64, OracleError> {
    if spec.is_exact() {
        Ok(exact_trace_moment(spec, n, k)?.normalized_f64().re)
    } else {
        Ok(trace_moment_f64(spec, n, k)?.re)
    }
}

#[derive(Debug, Clone)]
pub struct TrendReport {
    pub k: u32,
    pub per_n: Vec<(u64, f64)>,
    /// Polynomial extrapolation of the sequence to `1/N -> 0`.
    pub limit: f64,
}

/// Evaluate the normalized moment across the grid and extrapolate in
/// `1/N` (Neville at zero).
pub fn asymptotic_trend(
    spec: &CumulantSpec,
    k: u32,
    n_grid: &[u64],
) -> Result<TrendReport, OracleError> {
    if n_grid.is_empty() || n_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(OracleError::BadGrid);
    }
    let per_n: Vec<(u64, f64)> = n_grid
        .iter()
        .map(|&n| Ok((n, moment_value(spec, n, k)?)))
        .collect::<Result<_, OracleError>>()?;
    let xs: Vec<f64> = per_n.iter().map(|&(n, _)| 1.0 / n as f64).collect();
    let mut ys: Vec<f64> = per_n.iter().map(|&(_, y)| y).collect();
    let m = ys.len();
    for j in 1..m {
        for i in 0..m - j {
            ys[i] = (xs[i + j] * ys[i] - xs[i] * ys[i + 1]) / (xs[i + j] - xs[i]);
        }
    }
    Ok(TrendReport {
        k,
        per_n,
        limit: ys[0],
    })
}
