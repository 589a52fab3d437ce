//! Oriented multigraphs encoding joint cumulants of matrix entries.
//!
//! A cumulant of entries `M_{i1 j1} ... M_{ik jk}` is labelled by the
//! oriented multigraph with one vertex per distinct index and one edge
//! `i -> j` per factor `M_ij`.  Loops and parallel edges are allowed;
//! a vertex with no incident edge is not (it cannot arise from a
//! cumulant).  The module provides the invariants that drive the whole
//! crate: degree balance (the "Eulerian" condition), weak connectivity,
//! the scaling exponent `v - c - e/2`, automorphism counts and a
//! canonical form used to index cumulants by isomorphism class.

use num_rational::Rational64;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

/// Largest vertex count for which permutation-based operations
/// (canonical form, automorphism count) are attempted.
pub const DEFAULT_VERTEX_LIMIT: usize = 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("graph must have at least one vertex and one edge")]
    Empty,
    #[error("edge ({0}, {1}) out of range for {2} vertices")]
    EdgeOutOfRange(usize, usize, usize),
    #[error("vertex {0} has no incident edge")]
    IsolatedVertex(usize),
    #[error("{vertices} vertices exceeds the permutation limit {limit}")]
    LimitExceeded { vertices: usize, limit: usize },
    #[error("operation requires a weakly connected graph")]
    NotConnected,
}

/// Oriented multigraph with contiguous vertex ids `0..vertex_count`.
///
/// Edge list order carries no meaning; two graphs are considered the
/// same cumulant label iff their [`canonical_key`](Self::canonical_key)s
/// agree.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "GraphJson", into = "GraphJson")]
pub struct OrientedMultigraph {
    vertex_count: usize,
    edges: Vec<(usize, usize)>,
}

/// Wire form: `{"v": <int>, "edges": [[s, t], ...]}`.
#[derive(Serialize, Deserialize)]
struct GraphJson {
    v: usize,
    edges: Vec<(usize, usize)>,
}

impl TryFrom<GraphJson> for OrientedMultigraph {
    type Error = GraphError;
    fn try_from(raw: GraphJson) -> Result<Self, GraphError> {
        OrientedMultigraph::new(raw.v, raw.edges)
    }
}

impl From<OrientedMultigraph> for GraphJson {
    fn from(g: OrientedMultigraph) -> Self {
        GraphJson {
            v: g.vertex_count,
            edges: g.edges,
        }
    }
}

/// Isomorphism-invariant byte encoding of a graph: the lexicographically
/// minimal sorted edge list over all vertex relabelings, prefixed by the
/// vertex and edge counts.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CanonicalGraphKey(Vec<u8>);

impl CanonicalGraphKey {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    /// Ord-minimal sentinel, below every real key; used for map range
    /// scans keyed by `(order, key, ..)`.
    pub(crate) fn range_floor() -> Self {
        CanonicalGraphKey(Vec::new())
    }
}

impl fmt::Display for CanonicalGraphKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0 {
            write!(f, "{b:x}")?;
        }
        Ok(())
    }
}

impl OrientedMultigraph {
    pub fn new(vertex_count: usize, edges: Vec<(usize, usize)>) -> Result<Self, GraphError> {
        if vertex_count == 0 || edges.is_empty() {
            return Err(GraphError::Empty);
        }
        for &(s, t) in &edges {
            if s >= vertex_count || t >= vertex_count {
                return Err(GraphError::EdgeOutOfRange(s, t, vertex_count));
            }
        }
        let mut touched = vec![false; vertex_count];
        for &(s, t) in &edges {
            touched[s] = true;
            touched[t] = true;
        }
        if let Some(v) = touched.iter().position(|&x| !x) {
            return Err(GraphError::IsolatedVertex(v));
        }
        Ok(Self {
            vertex_count,
            edges,
        })
    }

    /// Build the graph of a cumulant from the raw index pairs of its
    /// factors: distinct raw indices become distinct vertices (in order
    /// of first appearance), one edge `i -> j` per factor `M_ij`.
    ///
    /// Returns the graph together with the raw-index -> vertex-id map.
    pub fn from_index_pattern(
        index_pairs: &[(i64, i64)],
    ) -> Result<(Self, BTreeMap<i64, usize>), GraphError> {
        if index_pairs.is_empty() {
            return Err(GraphError::Empty);
        }
        let mut labels: BTreeMap<i64, usize> = BTreeMap::new();
        let mut next = 0usize;
        let mut edges = Vec::with_capacity(index_pairs.len());
        for &(i, j) in index_pairs {
            let s = *labels.entry(i).or_insert_with(|| {
                let id = next;
                next += 1;
                id
            });
            let t = *labels.entry(j).or_insert_with(|| {
                let id = next;
                next += 1;
                id
            });
            edges.push((s, t));
        }
        Ok((
            Self {
                vertex_count: next,
                edges,
            },
            labels,
        ))
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn out_degree(&self, v: usize) -> usize {
        self.edges.iter().filter(|&&(s, _)| s == v).count()
    }

    pub fn in_degree(&self, v: usize) -> usize {
        self.edges.iter().filter(|&&(_, t)| t == v).count()
    }

    /// Edge-reversed graph (the label of the conjugated cumulant).
    pub fn reversed(&self) -> Self {
        Self {
            vertex_count: self.vertex_count,
            edges: self.edges.iter().map(|&(s, t)| (t, s)).collect(),
        }
    }

    /// Degree balance at every vertex: `d_out(v) = d_in(v)`, a loop
    /// contributing one to each.  Connectivity is not required.
    pub fn is_eulerian(&self) -> bool {
        (0..self.vertex_count).all(|v| self.out_degree(v) == self.in_degree(v))
    }

    fn unbalanced_vertex_count(&self) -> usize {
        (0..self.vertex_count)
            .filter(|&v| self.out_degree(v) != self.in_degree(v))
            .count()
    }

    /// Number of weakly connected components (orientation ignored).
    pub fn connected_components(&self) -> usize {
        let mut parent: Vec<usize> = (0..self.vertex_count).collect();
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
        for &(s, t) in &self.edges {
            let a = find(&mut parent, s);
            let b = find(&mut parent, t);
            if a != b {
                parent[a] = b;
            }
        }
        (0..self.vertex_count)
            .filter(|&v| find(&mut parent, v) == v)
            .count()
    }

    /// Exact scaling exponent `v(G) - c(G) - e(G)/2` weighting a cumulant
    /// in the large-N analysis.
    pub fn scaling_exponent(&self) -> Rational64 {
        let v = self.vertex_count as i64;
        let c = self.connected_components() as i64;
        let e = self.edges.len() as i64;
        Rational64::new(2 * (v - c) - e, 2)
    }

    /// For a connected graph: Eulerian, or at least two vertices with
    /// unbalanced degrees — never exactly one.  Returns `true` iff the
    /// graph satisfies exactly one of the two alternatives.
    pub fn check_euler_lemma(&self) -> Result<bool, GraphError> {
        if self.connected_components() != 1 {
            return Err(GraphError::NotConnected);
        }
        let eulerian = self.is_eulerian();
        let two_unbalanced = self.unbalanced_vertex_count() >= 2;
        Ok(eulerian ^ two_unbalanced)
    }

    fn check_limit(&self, limit: usize) -> Result<(), GraphError> {
        if self.vertex_count > limit {
            return Err(GraphError::LimitExceeded {
                vertices: self.vertex_count,
                limit,
            });
        }
        Ok(())
    }

    /// Order of the automorphism group of the multigraph: vertex
    /// permutations preserving the directed edge multiset, times the
    /// permutations of parallel edges.  The parallel-edge factor is what
    /// makes `1/|Aut|` the correct symmetry weight in the cumulant
    /// generating function (two loops on one vertex have `|Aut| = 2`).
    pub fn automorphism_count(&self) -> Result<u64, GraphError> {
        self.automorphism_count_with_limit(DEFAULT_VERTEX_LIMIT)
    }

    pub fn automorphism_count_with_limit(&self, limit: usize) -> Result<u64, GraphError> {
        self.check_limit(limit)?;
        let sorted = self.sorted_edges(None);
        let mut vertex_perms = 0u64;
        for_each_permutation(self.vertex_count, |perm| {
            if self.sorted_edges(Some(perm)) == sorted {
                vertex_perms += 1;
            }
        });
        let mut multiplicity: BTreeMap<(usize, usize), u64> = BTreeMap::new();
        for &e in &self.edges {
            *multiplicity.entry(e).or_insert(0) += 1;
        }
        let parallel: u64 = multiplicity.values().map(|&m| factorial(m)).product();
        Ok(vertex_perms * parallel)
    }

    fn sorted_edges(&self, perm: Option<&[usize]>) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = match perm {
            Some(p) => self.edges.iter().map(|&(s, t)| (p[s], p[t])).collect(),
            None => self.edges.clone(),
        };
        out.sort_unstable();
        out
    }

    pub fn canonical_key(&self) -> Result<CanonicalGraphKey, GraphError> {
        self.canonical_key_with_limit(DEFAULT_VERTEX_LIMIT)
    }

    pub fn canonical_key_with_limit(&self, limit: usize) -> Result<CanonicalGraphKey, GraphError> {
        self.check_limit(limit)?;
        let mut best: Option<Vec<(usize, usize)>> = None;
        for_each_permutation(self.vertex_count, |perm| {
            let candidate = self.sorted_edges(Some(perm));
            if best.as_ref().is_none_or(|b| candidate < *b) {
                best = Some(candidate);
            }
        });
        let edges = best.expect("at least the identity permutation");
        let mut bytes = Vec::with_capacity(2 + 2 * edges.len());
        bytes.push(self.vertex_count as u8);
        bytes.push(edges.len() as u8);
        for (s, t) in edges {
            bytes.push(s as u8);
            bytes.push(t as u8);
        }
        Ok(CanonicalGraphKey(bytes))
    }
}

fn factorial(n: u64) -> u64 {
    (2..=n).product::<u64>().max(1)
}

/// Heap's algorithm; the closure sees each permutation of `0..n` once.
fn for_each_permutation(n: usize, mut visit: impl FnMut(&[usize])) {
    let mut items: Vec<usize> = (0..n).collect();
    let mut stack = vec![0usize; n];
    visit(&items);
    let mut i = 1;
    while i < n {
        if stack[i] < i {
            if i % 2 == 0 {
                items.swap(0, i);
            } else {
                items.swap(stack[i], i);
            }
            visit(&items);
            stack[i] += 1;
            i = 1;
        } else {
            stack[i] = 0;
            i += 1;
        }
    }
}

/// One representative per isomorphism class of oriented multigraphs with
/// at most `max_vertices` vertices and at most `max_edges` edges (every
/// vertex incident to an edge).  Output sorted by canonical key.
pub fn enumerate_graphs(
    max_vertices: usize,
    max_edges: usize,
) -> Result<Vec<OrientedMultigraph>, GraphError> {
    if max_vertices > DEFAULT_VERTEX_LIMIT || max_edges > DEFAULT_VERTEX_LIMIT {
        return Err(GraphError::LimitExceeded {
            vertices: max_vertices.max(max_edges),
            limit: DEFAULT_VERTEX_LIMIT,
        });
    }
    let mut seen: BTreeMap<CanonicalGraphKey, OrientedMultigraph> = BTreeMap::new();
    for e in 1..=max_edges {
        for g in graphs_with_edge_count(e)? {
            if g.vertex_count() <= max_vertices {
                let key = g.canonical_key()?;
                seen.entry(key).or_insert(g);
            }
        }
    }
    Ok(seen.into_values().collect())
}

/// All isomorphism classes with exactly `edge_count` edges, any vertex
/// count.  A graph on `e` edges is a set partition of the `2e` edge
/// endpoints (blocks = vertices), so the classes are enumerated by
/// walking restricted-growth strings and deduplicating canonically.
pub fn graphs_with_edge_count(edge_count: usize) -> Result<Vec<OrientedMultigraph>, GraphError> {
    if edge_count == 0 || edge_count > DEFAULT_VERTEX_LIMIT {
        return Err(GraphError::LimitExceeded {
            vertices: edge_count,
            limit: DEFAULT_VERTEX_LIMIT,
        });
    }
    let mut seen: BTreeMap<CanonicalGraphKey, OrientedMultigraph> = BTreeMap::new();
    crate::partitions::for_each_partition(2 * edge_count, |rgs| {
        let vertex_count = rgs.iter().max().map_or(0, |&m| m + 1);
        let edges: Vec<(usize, usize)> = (0..edge_count)
            .map(|i| (rgs[2 * i], rgs[2 * i + 1]))
            .collect();
        let g = OrientedMultigraph {
            vertex_count,
            edges,
        };
        let key = g.canonical_key().expect("2e endpoints fit the limit");
        seen.entry(key).or_insert(g);
    });
    Ok(seen.into_values().collect())
}
