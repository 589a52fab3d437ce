//! Truncated iteration of the effective-potential flow on graph-indexed
//! coefficients.
//!
//! The effective potential of the replica representation expands over
//! oriented multigraphs; its flow in `t = 1/z` is driven by two graph
//! surgeries.  The Laplacian operator removes an outgoing and an
//! incoming half-edge at one vertex and reattaches the loose ends (a
//! loop consumed whole closes a replica index and costs a power of
//! `n`).  The quadratic operator joins two graphs through one new edge,
//! identifying the two derived vertices, then sums over all partial
//! identifications of the remaining vertices.  A vertex stripped of its
//! last half-edge drops out of the distinct-index sum and contributes a
//! free-index factor `N - v + 1`.
//!
//! The Gaussian sector carries exact coefficients: rationals graded by
//! powers of `alpha^2`, kept as full Laurent polynomials in `N`, so the
//! `N^0` part read off by [`FlowState::green_series`] is exact with no
//! dropped cross terms.  The perturbation sector carries worst-case
//! envelopes `(bound, decay)` certifying
//! `|w_G| <= bound * N^(-(v-c) - decay)`; at replica order zero the
//! surgeries can only keep or grow `decay`, which is what
//! [`FlowState::verify_bound_propagation`] audits.

use crate::cumulant::CumulantSpec;
use crate::graph::{CanonicalGraphKey, GraphError, OrientedMultigraph};
use num_rational::Ratio;
use num_traits::{Signed, ToPrimitive, Zero};
use serde::Serialize;
use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};
use thiserror::Error;

pub type FlowRational = Ratio<i128>;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("truncation ({0}v, {1}e) cannot hold a spec graph with {2} vertices, {3} edges")]
    TruncationTooSmall(usize, usize, usize, usize),
    #[error("1/z^{requested} needs the state iterated to t-order {needed}, have {have}")]
    InsufficientOrder {
        requested: u32,
        needed: usize,
        have: usize,
    },
    #[error("scaling anomaly: {0}")]
    ScalingAnomaly(String),
    #[error("bound propagation violated: {0}")]
    PropagationViolation(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Graph-size and order limits of the truncated flow.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Truncation {
    pub max_t: usize,
    pub max_vertices: usize,
    pub max_edges: usize,
}

impl Default for Truncation {
    fn default() -> Self {
        Self {
            max_t: 4,
            max_vertices: 4,
            max_edges: 4,
        }
    }
}

/// Exact Gaussian-sector coefficient: `(sum_q c_q N^q)` times
/// `alpha^(2 alpha_sq_power)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCoeff {
    pub alpha_sq_power: u32,
    pub n_poly: BTreeMap<i64, FlowRational>,
}

impl GaussianCoeff {
    fn is_zero(&self) -> bool {
        self.n_poly.values().all(|c| c.is_zero())
    }

    fn add_scaled(&mut self, other: &BTreeMap<i64, FlowRational>, factor: FlowRational) {
        for (&power, coeff) in other {
            let entry = self.n_poly.entry(power).or_insert_with(FlowRational::zero);
            *entry += coeff * factor;
            if entry.is_zero() {
                self.n_poly.remove(&power);
            }
        }
    }

    /// Sum of absolute coefficient values; bounds the magnitude for all
    /// `N >= 1` once every Laurent power is known non-positive.
    fn magnitude_bound(&self, alpha: f64) -> f64 {
        let sum: f64 = self
            .n_poly
            .values()
            .map(|c| c.abs().to_f64().unwrap_or(f64::INFINITY))
            .sum();
        sum * alpha.powi(2 * self.alpha_sq_power as i32)
    }

    /// `N^0` part.
    pub fn constant_part(&self) -> FlowRational {
        self.n_poly.get(&0).copied().unwrap_or_else(FlowRational::zero)
    }
}

/// Worst-case envelope of a perturbation coefficient:
/// `|w| <= bound * N^(-(v - c) - decay)`, uniformly in the indices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalingRecord {
    pub bound: f64,
    pub decay: f64,
}

const DECAY_TOLERANCE: f64 = 1e-9;

impl ScalingRecord {
    /// The rescaled coefficient tends to zero.
    pub fn vanishing(&self) -> bool {
        self.decay > DECAY_TOLERANCE
    }

    /// The rescaled coefficient stays bounded.
    pub fn bounded(&self) -> bool {
        self.decay >= -DECAY_TOLERANCE && self.bound.is_finite()
    }

    fn absorb(&mut self, contribution: ScalingRecord) {
        self.bound += contribution.bound;
        self.decay = self.decay.min(contribution.decay);
    }
}

const EMPTY_RECORD: ScalingRecord = ScalingRecord {
    bound: 0.0,
    decay: f64::INFINITY,
};

type BucketKey = (usize, CanonicalGraphKey, u8);

/// Truncated effective potential: graph-indexed coefficients per
/// `t`-order and replica degree, split into the exact Gaussian sector
/// and the scaling-record perturbation sector.
#[derive(Clone)]
pub struct FlowState {
    truncation: Truncation,
    alpha: f64,
    current_order: usize,
    registry: BTreeMap<CanonicalGraphKey, OrientedMultigraph>,
    gaussian: BTreeMap<BucketKey, GaussianCoeff>,
    perturbation: BTreeMap<BucketKey, ScalingRecord>,
    /// `(left eulerian, right eulerian, joined eulerian) -> count` over
    /// every quadratic-operator event, classified before any vertex
    /// identification.
    join_events: BTreeMap<(bool, bool, bool), u64>,
    truncation_drops: Vec<TruncationNotice>,
    anomalies: Vec<String>,
    initial_compliant: bool,
    surgery: Arc<SurgeryCache>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TruncationNotice {
    pub t_order: usize,
    pub vertices: usize,
    pub edges: usize,
    pub count: u64,
}

impl FlowState {
    /// Build the order-zero potential from a cumulant spec: the Gaussian
    /// covariance becomes the quartic replica vertex (weight
    /// `alpha^2 / (2N)` on both the two-cycle and the double loop), and
    /// each perturbation term a scaling record classified by degree
    /// balance.
    pub fn initialize(spec: &CumulantSpec, truncation: Truncation) -> Result<Self, FlowError> {
        let mut state = Self {
            truncation,
            alpha: spec.alpha(),
            current_order: 0,
            registry: BTreeMap::new(),
            gaussian: BTreeMap::new(),
            perturbation: BTreeMap::new(),
            join_events: BTreeMap::new(),
            truncation_drops: Vec::new(),
            anomalies: Vec::new(),
            initial_compliant: true,
            surgery: Arc::new(SurgeryCache::default()),
        };
        if spec.alpha() > 0.0 {
            let half_inverse_n = BTreeMap::from([(-1i64, FlowRational::new(1, 2))]);
            for graph in [
                OrientedMultigraph::new(2, vec![(0, 1), (1, 0)])?,
                OrientedMultigraph::new(1, vec![(0, 0), (0, 0)])?,
            ] {
                let key = state.intern(graph)?;
                state.gaussian.insert(
                    (0, key, 0),
                    GaussianCoeff {
                        alpha_sq_power: 1,
                        n_poly: half_inverse_n.clone(),
                    },
                );
            }
        }
        for term in spec.perturbations() {
            let graph = term.graph().clone();
            if graph.vertex_count() > truncation.max_vertices
                || graph.edge_count() > truncation.max_edges
            {
                return Err(FlowError::TruncationTooSmall(
                    truncation.max_vertices,
                    truncation.max_edges,
                    graph.vertex_count(),
                    graph.edge_count(),
                ));
            }
            let sigma = graph
                .scaling_exponent()
                .to_f64()
                .expect("half-integer exponent");
            let eulerian = graph.is_eulerian();
            let aut = graph.automorphism_count()? as f64;
            let record = ScalingRecord {
                bound: term.amplitude().norm() / aut,
                decay: term.n_exponent() - sigma,
            };
            if (eulerian && !record.vanishing()) || (!eulerian && !record.bounded()) {
                state.initial_compliant = false;
            }
            let key = state.intern(graph)?;
            state
                .perturbation
                .entry((0, key, 0))
                .or_insert(EMPTY_RECORD)
                .absorb(record);
        }
        Ok(state)
    }

    fn intern(&mut self, graph: OrientedMultigraph) -> Result<CanonicalGraphKey, FlowError> {
        let key = graph.canonical_key()?;
        self.registry.entry(key.clone()).or_insert(graph);
        Ok(key)
    }

    pub fn truncation(&self) -> Truncation {
        self.truncation
    }

    pub fn current_order(&self) -> usize {
        self.current_order
    }

    pub fn graph(&self, key: &CanonicalGraphKey) -> Option<&OrientedMultigraph> {
        self.registry.get(key)
    }

    pub fn gaussian_coefficient(
        &self,
        t_order: usize,
        key: &CanonicalGraphKey,
        n_degree: u8,
    ) -> Option<&GaussianCoeff> {
        self.gaussian.get(&(t_order, key.clone(), n_degree))
    }

    pub fn perturbation_record(
        &self,
        t_order: usize,
        key: &CanonicalGraphKey,
        n_degree: u8,
    ) -> Option<&ScalingRecord> {
        self.perturbation.get(&(t_order, key.clone(), n_degree))
    }

    pub fn perturbation_entries(
        &self,
    ) -> impl Iterator<Item = (usize, &OrientedMultigraph, u8, &ScalingRecord)> {
        self.perturbation
            .iter()
            .map(|((order, key, ndeg), record)| (*order, &self.registry[key], *ndeg, record))
    }

    pub fn join_events(&self) -> &BTreeMap<(bool, bool, bool), u64> {
        &self.join_events
    }

    pub fn truncation_notices(&self) -> &[TruncationNotice] {
        &self.truncation_drops
    }

    /// One order of the integral flow equation:
    /// `V^(k) = (1/k) [ L V^(k-1) + sum_{a+b=k-1} Q(V^(a), V^(b)) ]`.
    pub fn step(&self) -> Result<FlowState, FlowError> {
        let mut next = self.clone();
        let k = self.current_order + 1;
        let inv_k = FlowRational::new(1, k as i128);

        let mut new_gaussian: BTreeMap<(CanonicalGraphKey, u8), GaussianCoeff> = BTreeMap::new();
        let mut new_perturbation: BTreeMap<(CanonicalGraphKey, u8), ScalingRecord> =
            BTreeMap::new();

        // Laplacian on order k-1
        let prev = k - 1;
        for ((_, key, ndeg), coeff) in self.gaussian.range(bucket_range(prev)) {
            let expansion = next.laplacian_expansion(key)?;
            for item in &expansion.items {
                let out_deg = ndeg + u8::from(item.n_raised);
                if out_deg > 1 {
                    continue;
                }
                let factor = item.count_factor();
                let slot = new_gaussian
                    .entry((item.key.clone(), out_deg))
                    .or_insert_with(|| GaussianCoeff {
                        alpha_sq_power: coeff.alpha_sq_power,
                        n_poly: BTreeMap::new(),
                    });
                debug_assert_eq!(slot.alpha_sq_power, coeff.alpha_sq_power);
                for (&power, &c) in &factor {
                    slot.add_scaled(&shift_poly(&coeff.n_poly, power), c * inv_k);
                }
            }
        }
        for ((_, key, ndeg), record) in self.perturbation.range(bucket_range(prev)) {
            let in_span = self.vertex_minus_components(key);
            let expansion = next.laplacian_expansion(key)?;
            for item in &expansion.items {
                let out_deg = ndeg + u8::from(item.n_raised);
                if out_deg > 1 {
                    continue;
                }
                let out_span = next.vertex_minus_components(&item.key);
                let slack = in_span - out_span - i64::from(item.pruned);
                if slack < 0 && !item.n_raised && *ndeg == 0 {
                    next.anomalies
                        .push(format!("laplacian slack {slack} at replica order 0 on {key}"));
                }
                let contribution = ScalingRecord {
                    bound: record.bound * item.multiplicity as f64 / k as f64,
                    decay: record.decay + slack as f64,
                };
                absorb_record(
                    &mut new_perturbation,
                    (item.key.clone(), out_deg),
                    contribution,
                );
            }
        }

        // quadratic operator over ordered order pairs a + b = k - 1
        for a in 0..k {
            let b = k - 1 - a;
            let left_terms = self.terms_at(a);
            let right_terms = self.terms_at(b);
            for left in &left_terms {
                for right in &right_terms {
                    let out_deg = left.ndeg + right.ndeg;
                    if out_deg > 1 {
                        continue;
                    }
                    let expansion = next.quadratic_expansion(&left.key, &right.key)?;
                    let left_eul = next.registry[&left.key].is_eulerian();
                    let right_eul = next.registry[&right.key].is_eulerian();
                    for &(joined_eul, count) in &expansion.joins {
                        *next
                            .join_events
                            .entry((left_eul, right_eul, joined_eul))
                            .or_insert(0) += count;
                    }
                    for &((vertices, edges), count) in &expansion.dropped {
                        next.note_truncation(k, vertices, edges, count);
                    }
                    for item in &expansion.items {
                        match (&left.coeff, &right.coeff) {
                            (TermCoeff::Gauss(lc), TermCoeff::Gauss(rc)) => {
                                let factor = item.count_factor();
                                let product = convolve(&lc.n_poly, &rc.n_poly);
                                let slot = new_gaussian
                                    .entry((item.key.clone(), out_deg))
                                    .or_insert_with(|| GaussianCoeff {
                                        alpha_sq_power: lc.alpha_sq_power + rc.alpha_sq_power,
                                        n_poly: BTreeMap::new(),
                                    });
                                debug_assert_eq!(
                                    slot.alpha_sq_power,
                                    lc.alpha_sq_power + rc.alpha_sq_power
                                );
                                for (&power, &c) in &factor {
                                    slot.add_scaled(&shift_poly(&product, power), c * inv_k);
                                }
                            }
                            (lc, rc) => {
                                let (lb, ld) = self.record_view(lc, &left.key)?;
                                let (rb, rd) = self.record_view(rc, &right.key)?;
                                let in_span = self.vertex_minus_components(&left.key)
                                    + self.vertex_minus_components(&right.key);
                                let out_span = next.vertex_minus_components(&item.key);
                                let slack = in_span - out_span - i64::from(item.pruned);
                                if slack < 0 && out_deg == 0 {
                                    next.anomalies.push(format!(
                                        "quadratic slack {slack} joining {} and {}",
                                        left.key, right.key
                                    ));
                                }
                                let contribution = ScalingRecord {
                                    bound: lb * rb * item.multiplicity as f64 / k as f64,
                                    decay: ld + rd + slack as f64,
                                };
                                absorb_record(
                                    &mut new_perturbation,
                                    (item.key.clone(), out_deg),
                                    contribution,
                                );
                            }
                        }
                    }
                }
            }
        }

        for ((key, ndeg), coeff) in new_gaussian {
            if !coeff.is_zero() {
                next.gaussian.insert((k, key, ndeg), coeff);
            }
        }
        for ((key, ndeg), record) in new_perturbation {
            next.perturbation.insert((k, key, ndeg), record);
        }
        next.current_order = k;
        Ok(next)
    }

    /// Iterate [`step`](Self::step) until `order` t-orders are held.
    pub fn iterate_to(&self, order: usize) -> Result<FlowState, FlowError> {
        let mut state = self.clone();
        while state.current_order < order {
            state = state.step()?;
        }
        Ok(state)
    }

    fn note_truncation(&mut self, t_order: usize, vertices: usize, edges: usize, count: u64) {
        if let Some(existing) = self
            .truncation_drops
            .iter_mut()
            .find(|n| n.t_order == t_order && n.vertices == vertices && n.edges == edges)
        {
            existing.count += count;
        } else {
            self.truncation_drops.push(TruncationNotice {
                t_order,
                vertices,
                edges,
                count,
            });
        }
    }

    fn vertex_minus_components(&self, key: &CanonicalGraphKey) -> i64 {
        let g = &self.registry[key];
        g.vertex_count() as i64 - g.connected_components() as i64
    }

    /// Bound data of either sector: a Gaussian coefficient acts as a
    /// record with zero decay after checking its Laurent powers stay
    /// within the `N^(-(v-c))` envelope.
    fn record_view(
        &self,
        coeff: &TermCoeff,
        key: &CanonicalGraphKey,
    ) -> Result<(f64, f64), FlowError> {
        match coeff {
            TermCoeff::Pert(record) => Ok((record.bound, record.decay)),
            TermCoeff::Gauss(gc) => {
                let span = self.vertex_minus_components(key);
                if let Some((&max_power, c)) = gc.n_poly.iter().next_back() {
                    if !c.is_zero() && max_power + span > 0 {
                        return Err(FlowError::ScalingAnomaly(format!(
                            "gaussian coefficient on {key} carries N^{max_power} beyond its envelope"
                        )));
                    }
                }
                Ok((gc.magnitude_bound(self.alpha), 0.0))
            }
        }
    }

    fn terms_at(&self, order: usize) -> Vec<TermRef> {
        let mut out = Vec::new();
        for ((_, key, ndeg), coeff) in self.gaussian.range(bucket_range(order)) {
            out.push(TermRef {
                key: key.clone(),
                ndeg: *ndeg,
                coeff: TermCoeff::Gauss(coeff.clone()),
            });
        }
        for ((_, key, ndeg), record) in self.perturbation.range(bucket_range(order)) {
            out.push(TermRef {
                key: key.clone(),
                ndeg: *ndeg,
                coeff: TermCoeff::Pert(*record),
            });
        }
        out
    }

    fn laplacian_expansion(
        &mut self,
        key: &CanonicalGraphKey,
    ) -> Result<Arc<LaplacianExpansion>, FlowError> {
        let cached = self.surgery.laplacian.lock().unwrap().get(key).cloned();
        if let Some(cached) = cached {
            // the cache outlives any single state lineage: re-intern the
            // output graphs into this state's registry
            for item in &cached.items {
                self.registry
                    .entry(item.key.clone())
                    .or_insert_with(|| item.graph.clone());
            }
            return Ok(cached);
        }
        let graph = self.registry[key].clone();
        let edges = graph.edges().to_vec();
        let v = graph.vertex_count();
        let mut aggregate: BTreeMap<(CanonicalGraphKey, bool, bool), u64> = BTreeMap::new();
        for (idx_out, &(src, _)) in edges.iter().enumerate() {
            for (idx_in, &(_, tgt)) in edges.iter().enumerate() {
                // both half-edge removals happen at one vertex
                if src != tgt {
                    continue;
                }
                let n_raised = idx_out == idx_in;
                let mut new_edges = Vec::with_capacity(edges.len());
                for (idx, &e) in edges.iter().enumerate() {
                    if idx != idx_out && idx != idx_in {
                        new_edges.push(e);
                    }
                }
                if !n_raised {
                    // reattach: the in-half of the consumed out-edge and
                    // the out-half of the consumed in-edge form one edge
                    new_edges.push((edges[idx_in].0, edges[idx_out].1));
                }
                let Some((result, pruned)) = assemble(v, new_edges, |_| true) else {
                    continue; // constant term
                };
                debug_assert!(pruned <= 1);
                let out_key = self.intern(result)?;
                *aggregate
                    .entry((out_key, pruned > 0, n_raised))
                    .or_insert(0) += 1;
            }
        }
        let items = aggregate
            .into_iter()
            .map(|((out_key, pruned, n_raised), multiplicity)| LItem {
                graph: self.registry[&out_key].clone(),
                key: out_key,
                pruned,
                n_raised,
                multiplicity,
                v_before: v,
            })
            .collect();
        let expansion = Arc::new(LaplacianExpansion { items });
        self.surgery
            .laplacian
            .lock()
            .unwrap()
            .insert(key.clone(), expansion.clone());
        Ok(expansion)
    }

    fn quadratic_expansion(
        &mut self,
        left: &CanonicalGraphKey,
        right: &CanonicalGraphKey,
    ) -> Result<Arc<QuadraticExpansion>, FlowError> {
        let cache_key = (left.clone(), right.clone());
        let cached = self.surgery.quadratic.lock().unwrap().get(&cache_key).cloned();
        if let Some(cached) = cached {
            for item in &cached.items {
                self.registry
                    .entry(item.key.clone())
                    .or_insert_with(|| item.graph.clone());
            }
            return Ok(cached);
        }
        let g1 = self.registry[left].clone();
        let g2 = self.registry[right].clone();
        let (v1, v2) = (g1.vertex_count(), g2.vertex_count());
        let limits = (self.truncation.max_vertices, self.truncation.max_edges);
        let mut aggregate: BTreeMap<(CanonicalGraphKey, bool, usize), u64> = BTreeMap::new();
        let mut dropped: BTreeMap<(usize, usize), u64> = BTreeMap::new();
        let mut joins: BTreeMap<bool, u64> = BTreeMap::new();
        for (idx1, &(u, x)) in g1.edges().iter().enumerate() {
            for (idx2, &(y, w)) in g2.edges().iter().enumerate() {
                // derivative vertices: u = source of e1, w = target of
                // e2; the shared index merges w into u
                let merged_w = v1 + w;
                let map2 = |vertex: usize| {
                    if vertex == w {
                        u
                    } else {
                        v1 + vertex
                    }
                };
                let mut base_edges: Vec<(usize, usize)> = Vec::new();
                for (idx, &e) in g1.edges().iter().enumerate() {
                    if idx != idx1 {
                        base_edges.push(e);
                    }
                }
                for (idx, &e) in g2.edges().iter().enumerate() {
                    if idx != idx2 {
                        base_edges.push((map2(e.0), map2(e.1)));
                    }
                }
                base_edges.push((map2(y), x));
                let left_free: Vec<usize> = (0..v1).filter(|&a| a != u).collect();
                let right_free: Vec<usize> =
                    (0..v2).filter(|&b| b != w).map(|b| v1 + b).collect();
                let mut matchings: Vec<Vec<(usize, usize)>> = Vec::new();
                enumerate_matchings(&left_free, &right_free, &mut Vec::new(), &mut matchings);
                for matching in &matchings {
                    let mut edges = base_edges.clone();
                    for &(a, b) in matching {
                        for e in edges.iter_mut() {
                            if e.0 == b {
                                e.0 = a;
                            }
                            if e.1 == b {
                                e.1 = a;
                            }
                        }
                    }
                    // ids merged away are not vertices; only surviving
                    // vertices count as isolated when edge-free
                    let dead: Vec<usize> = std::iter::once(merged_w)
                        .chain(matching.iter().map(|&(_, b)| b))
                        .collect();
                    let v_merged = v1 + v2 - 1 - matching.len();
                    let Some((result, pruned)) =
                        assemble(v1 + v2, edges, |id| !dead.contains(&id))
                    else {
                        continue;
                    };
                    debug_assert!(pruned <= 1);
                    if matching.is_empty() {
                        *joins.entry(result.is_eulerian()).or_insert(0) += 1;
                    }
                    // outputs beyond the graph limits are dropped here,
                    // before any factorial-cost canonicalization
                    if result.vertex_count() > limits.0 || result.edge_count() > limits.1 {
                        *dropped
                            .entry((result.vertex_count(), result.edge_count()))
                            .or_insert(0) += 1;
                        continue;
                    }
                    let out_key = self.intern(result)?;
                    *aggregate
                        .entry((out_key, pruned > 0, v_merged))
                        .or_insert(0) += 1;
                }
            }
        }
        let items = aggregate
            .into_iter()
            .map(|((out_key, pruned, v_before), multiplicity)| QItem {
                graph: self.registry[&out_key].clone(),
                key: out_key,
                pruned,
                v_before,
                multiplicity,
            })
            .collect();
        let expansion = Arc::new(QuadraticExpansion {
            items,
            dropped: dropped.into_iter().collect(),
            joins: joins.into_iter().collect(),
        });
        self.surgery
            .quadratic
            .lock()
            .unwrap()
            .insert(cache_key, expansion.clone());
        Ok(expansion)
    }

    /// Coefficients of `G(z) = 1/z + sum_k w_loop^(k) / z^(k+2)` read
    /// from the replica-order-zero loop coefficient of the Gaussian
    /// sector.  The `N`-power bookkeeping must close at `N^0`; a
    /// positive leftover power is an error, negative powers are
    /// finite-size corrections outside the large-`N` series.
    pub fn green_series(&self, max_inv_z_power: u32) -> Result<Vec<GreenCoefficient>, FlowError> {
        let needed = (max_inv_z_power as usize).saturating_sub(2);
        if self.current_order < needed {
            return Err(FlowError::InsufficientOrder {
                requested: max_inv_z_power,
                needed,
                have: self.current_order,
            });
        }
        let loop_key = OrientedMultigraph::new(1, vec![(0, 0)])?.canonical_key()?;
        let mut series = Vec::new();
        for power in 1..=max_inv_z_power {
            if power == 1 {
                series.push(GreenCoefficient {
                    inv_z_power: 1,
                    alpha_sq_power: 0,
                    value: FlowRational::new(1, 1),
                });
                continue;
            }
            let t_order = power as usize - 2;
            let mut value = FlowRational::zero();
            let mut alpha_sq_power = (power - 1) / 2;
            if let Some(coeff) = self.gaussian.get(&(t_order, loop_key.clone(), 0)) {
                if let Some((&max_power, c)) = coeff.n_poly.iter().next_back() {
                    if !c.is_zero() && max_power > 0 {
                        return Err(FlowError::ScalingAnomaly(format!(
                            "loop coefficient at t^{t_order} carries N^{max_power}"
                        )));
                    }
                }
                value = coeff.constant_part();
                alpha_sq_power = coeff.alpha_sq_power;
            }
            series.push(GreenCoefficient {
                inv_z_power: power,
                alpha_sq_power,
                value,
            });
        }
        Ok(series)
    }

    /// Audit every perturbation record at replica order zero against the
    /// degree-balance classification, and the quadratic join log against
    /// the two-factor rule (joined graph balanced iff both factors are).
    pub fn verify_bound_propagation(&self) -> Result<PropagationReport, FlowError> {
        let mut entries = Vec::new();
        let mut all_ok = true;
        for ((order, key, ndeg), record) in &self.perturbation {
            let graph = &self.registry[key];
            let eulerian = graph.is_eulerian();
            let ok = if *ndeg > 0 {
                true // replica-raised terms sit outside the order-zero bound
            } else if eulerian {
                record.vanishing()
            } else {
                record.bounded()
            };
            if !ok {
                all_ok = false;
            }
            entries.push(PropagationEntry {
                graph: graph.clone(),
                t_order: *order,
                n_degree: *ndeg,
                eulerian,
                bound: record.bound,
                decay: record.decay,
                vanishing: record.vanishing(),
                ok,
            });
        }
        let lemma_consistent = self.join_events.iter().all(|(&(l, r, j), _)| j == (l && r));
        let passed = all_ok && lemma_consistent && self.anomalies.is_empty();
        let report = PropagationReport {
            entries,
            join_events: self
                .join_events
                .iter()
                .map(|(&(left, right, joined), &count)| JoinEventCount {
                    left_eulerian: left,
                    right_eulerian: right,
                    joined_eulerian: joined,
                    count,
                })
                .collect(),
            lemma_consistent,
            anomalies: self.anomalies.clone(),
            initial_compliant: self.initial_compliant,
            passed,
        };
        if self.initial_compliant && !passed {
            return Err(FlowError::PropagationViolation(format!(
                "{} violating entries, lemma_consistent = {lemma_consistent}, {} anomalies",
                report.entries.iter().filter(|e| !e.ok).count(),
                self.anomalies.len()
            )));
        }
        Ok(report)
    }

    /// Serializable dump of every stored term.
    pub fn dump(&self) -> FlowStateDump {
        let mut terms = Vec::new();
        for ((order, key, ndeg), coeff) in &self.gaussian {
            terms.push(FlowTermDump {
                graph: self.registry[key].clone(),
                t_power: *order,
                n_degree: *ndeg,
                sector: "gaussian".to_string(),
                coefficient: Some(GaussianCoeffDump {
                    alpha_sq_power: coeff.alpha_sq_power,
                    n_powers: coeff
                        .n_poly
                        .iter()
                        .map(|(p, c)| (p.to_string(), c.to_string()))
                        .collect(),
                }),
                scaling_record: None,
            });
        }
        for ((order, key, ndeg), record) in &self.perturbation {
            terms.push(FlowTermDump {
                graph: self.registry[key].clone(),
                t_power: *order,
                n_degree: *ndeg,
                sector: "perturbation".to_string(),
                coefficient: None,
                scaling_record: Some(ScalingRecordDump {
                    bound: record.bound,
                    decay: record.decay,
                    vanishing: record.vanishing(),
                }),
            });
        }
        FlowStateDump {
            truncation: self.truncation,
            orders_computed: self.current_order,
            terms,
        }
    }
}

fn bucket_range(order: usize) -> std::ops::Range<BucketKey> {
    (order, CanonicalGraphKey::range_floor(), 0)
        ..(order + 1, CanonicalGraphKey::range_floor(), 0)
}

fn absorb_record(
    map: &mut BTreeMap<(CanonicalGraphKey, u8), ScalingRecord>,
    slot: (CanonicalGraphKey, u8),
    contribution: ScalingRecord,
) {
    map.entry(slot).or_insert(EMPTY_RECORD).absorb(contribution);
}

/// Compact a surgery result into a graph over its surviving vertices.
/// `is_vertex` marks which ids of the working space are actual vertices
/// (as opposed to ids merged away); actual vertices left without any
/// edge are dropped and counted, each standing for a free index sum.
/// `None` when no edges remain (a constant term).
fn assemble(
    id_space: usize,
    edges: Vec<(usize, usize)>,
    is_vertex: impl Fn(usize) -> bool,
) -> Option<(OrientedMultigraph, usize)> {
    if edges.is_empty() {
        return None;
    }
    let mut touched = vec![false; id_space];
    for &(s, t) in &edges {
        touched[s] = true;
        touched[t] = true;
    }
    let pruned = (0..id_space)
        .filter(|&id| is_vertex(id) && !touched[id])
        .count();
    let mut relabel = vec![usize::MAX; id_space];
    let mut next = 0;
    for (id, &hit) in touched.iter().enumerate() {
        if hit {
            relabel[id] = next;
            next += 1;
        }
    }
    let compacted: Vec<(usize, usize)> = edges
        .iter()
        .map(|&(s, t)| (relabel[s], relabel[t]))
        .collect();
    let graph = OrientedMultigraph::new(next, compacted).expect("surgery output is well-formed");
    Some((graph, pruned))
}

/// All injective partial matchings between `left` and `right`, the empty
/// matching included.  Pairs are emitted with increasing left element,
/// so each matching appears exactly once.
fn enumerate_matchings(
    left: &[usize],
    right: &[usize],
    current: &mut Vec<(usize, usize)>,
    out: &mut Vec<Vec<(usize, usize)>>,
) {
    out.push(current.clone());
    for &a in left {
        if let Some(&(last, _)) = current.last() {
            if a <= last {
                continue;
            }
        }
        for &b in right {
            if current.iter().any(|&(_, used)| used == b) {
                continue;
            }
            current.push((a, b));
            enumerate_matchings(left, right, current, out);
            current.pop();
        }
    }
}

fn shift_poly(poly: &BTreeMap<i64, FlowRational>, shift: i64) -> BTreeMap<i64, FlowRational> {
    poly.iter().map(|(&p, &c)| (p + shift, c)).collect()
}

fn convolve(
    a: &BTreeMap<i64, FlowRational>,
    b: &BTreeMap<i64, FlowRational>,
) -> BTreeMap<i64, FlowRational> {
    let mut out: BTreeMap<i64, FlowRational> = BTreeMap::new();
    for (&pa, &ca) in a {
        for (&pb, &cb) in b {
            let entry = out.entry(pa + pb).or_insert_with(FlowRational::zero);
            *entry += ca * cb;
            if entry.is_zero() {
                out.remove(&(pa + pb));
            }
        }
    }
    out
}

#[derive(Default)]
struct SurgeryCache {
    laplacian: Mutex<HashMap<CanonicalGraphKey, Arc<LaplacianExpansion>>>,
    quadratic: Mutex<HashMap<(CanonicalGraphKey, CanonicalGraphKey), Arc<QuadraticExpansion>>>,
}

struct LaplacianExpansion {
    items: Vec<LItem>,
}

struct LItem {
    key: CanonicalGraphKey,
    graph: OrientedMultigraph,
    pruned: bool,
    n_raised: bool,
    multiplicity: u64,
    v_before: usize,
}

impl LItem {
    /// Multiplicity, times the free-index factor `N - (v - 1)` when a
    /// vertex was pruned.
    fn count_factor(&self) -> BTreeMap<i64, FlowRational> {
        let mult = FlowRational::new(self.multiplicity as i128, 1);
        if self.pruned {
            BTreeMap::from([
                (1, mult),
                (0, -mult * FlowRational::new(self.v_before as i128 - 1, 1)),
            ])
        } else {
            BTreeMap::from([(0, mult)])
        }
    }
}

struct QuadraticExpansion {
    items: Vec<QItem>,
    /// outputs beyond the graph limits: `(vertices, edges) -> count`
    dropped: Vec<((usize, usize), u64)>,
    /// `(joined graph eulerian) -> count`, one entry per edge pair.
    joins: Vec<(bool, u64)>,
}

struct QItem {
    key: CanonicalGraphKey,
    graph: OrientedMultigraph,
    pruned: bool,
    /// vertex count after the merge and identifications, before pruning
    v_before: usize,
    multiplicity: u64,
}

impl QItem {
    fn count_factor(&self) -> BTreeMap<i64, FlowRational> {
        let mult = FlowRational::new(self.multiplicity as i128, 1);
        if self.pruned {
            BTreeMap::from([
                (1, mult),
                (0, -mult * FlowRational::new(self.v_before as i128 - 1, 1)),
            ])
        } else {
            BTreeMap::from([(0, mult)])
        }
    }
}

struct TermRef {
    key: CanonicalGraphKey,
    ndeg: u8,
    coeff: TermCoeff,
}

enum TermCoeff {
    Gauss(GaussianCoeff),
    Pert(ScalingRecord),
}

/// One term of the `1/z` expansion of the Green function.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GreenCoefficient {
    pub inv_z_power: u32,
    pub alpha_sq_power: u32,
    #[serde(serialize_with = "serialize_rational")]
    pub value: FlowRational,
}

fn serialize_rational<S: serde::Serializer>(
    value: &FlowRational,
    serializer: S,
) -> Result<S::Ok, S::Error> {
    serializer.serialize_str(&value.to_string())
}

impl GreenCoefficient {
    pub fn evaluate(&self, alpha: f64) -> f64 {
        self.value.to_f64().unwrap_or(f64::NAN) * alpha.powi(2 * self.alpha_sq_power as i32)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PropagationEntry {
    pub graph: OrientedMultigraph,
    pub t_order: usize,
    pub n_degree: u8,
    pub eulerian: bool,
    pub bound: f64,
    pub decay: f64,
    pub vanishing: bool,
    pub ok: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct JoinEventCount {
    pub left_eulerian: bool,
    pub right_eulerian: bool,
    pub joined_eulerian: bool,
    pub count: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PropagationReport {
    pub entries: Vec<PropagationEntry>,
    pub join_events: Vec<JoinEventCount>,
    pub lemma_consistent: bool,
    pub anomalies: Vec<String>,
    pub initial_compliant: bool,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GaussianCoeffDump {
    pub alpha_sq_power: u32,
    pub n_powers: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScalingRecordDump {
    pub bound: f64,
    pub decay: f64,
    pub vanishing: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct FlowTermDump {
    pub graph: OrientedMultigraph,
    pub t_power: usize,
    pub n_degree: u8,
    pub sector: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coefficient: Option<GaussianCoeffDump>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scaling_record: Option<ScalingRecordDump>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FlowStateDump {
    pub truncation: Truncation,
    pub orders_computed: usize,
    pub terms: Vec<FlowTermDump>,
}
