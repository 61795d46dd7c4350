//! Graclus coarsening with the mass-normalized stiffness affinity, coarse
//! operator assembly, and the balanced binary-tree pooling layout.
//!
//! Each stage halves the vertex count (up to singletons). Singleton clusters
//! get a fake partner slot in the padded layout; fake slots carry zero
//! features, empty stiffness rows, and unit mass, so signals stay zero there
//! through convolution and pooling.

mod hierarchy;
#[cfg(test)]
mod tests;

pub use hierarchy::{build_hierarchy, pad_features, unpad_features, Hierarchy, Level, PoolStagePairs};

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use thiserror::Error;

use crate::lbo::{
    DiagonalMassMatrix, LboError, OperatorPair, SparseGeneralMatrix, SparseSymmetricMatrix,
};
use crate::rng::{stream, Purpose};

#[derive(Debug, Error)]
pub enum CoarsenError {
    #[error("({i}, {j}) is not an edge of the operator pattern")]
    NotAnEdge { i: usize, j: usize },
    #[error("assignment has {g_fine} fine vertices, operator has {op_dim}")]
    DimensionMismatch { g_fine: usize, op_dim: usize },
    #[error("mesh exhausted: {remaining} real vertices left before stage {stage} of {requested}")]
    MeshExhausted { remaining: usize, stage: usize, requested: usize },
    #[error(transparent)]
    Lbo(#[from] LboError),
}

/// Edge affinity for the localized normalized cut: `k_ij (1/d_i + 1/d_j)`
/// with `k_ij = -S_ij` under the PSD convention. May be negative for obtuse
/// dihedral configurations; such edges are ineligible for matching.
pub fn affinity(
    s: &SparseSymmetricMatrix,
    d: &DiagonalMassMatrix,
    i: usize,
    j: usize,
) -> Result<f64, CoarsenError> {
    if i == j {
        return Err(CoarsenError::NotAnEdge { i, j });
    }
    let s_ij = s.entry(i, j).ok_or(CoarsenError::NotAnEdge { i, j })?;
    Ok(-s_ij * (1.0 / d.get(i) + 1.0 / d.get(j)))
}

/// One level of greedy matching: per-vertex partner, or None for singletons.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Matching {
    partner: Vec<Option<usize>>,
    /// Vertices in the order their cluster was created (visit order).
    cluster_heads: Vec<usize>,
}

impl Matching {
    pub fn n_fine(&self) -> usize {
        self.partner.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.cluster_heads.len()
    }

    pub fn partner(&self, v: usize) -> Option<usize> {
        self.partner[v]
    }

    pub fn is_perfect(&self) -> bool {
        self.partner.iter().all(|p| p.is_some())
    }
}

/// Greedy Graclus matching with a seeded random visit order.
pub fn graclus_match(op: &OperatorPair, seed: u64) -> Matching {
    let n = op.dim();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, Purpose::Matching, n as u64));
    graclus_match_with_order(op, &order)
}

/// Greedy matching with an explicit visit order: each unmatched vertex pairs
/// with its unmatched neighbor of maximum positive affinity (ties to the
/// smallest index); vertices with no eligible neighbor become singletons.
pub fn graclus_match_with_order(op: &OperatorPair, order: &[usize]) -> Matching {
    let n = op.dim();
    assert_eq!(order.len(), n);
    // Neighbor lists from the stored upper pattern, mirrored.
    let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, j, _) in op.s.iter_upper() {
        if i != j {
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
    }
    for list in &mut neighbors {
        list.sort_unstable();
    }
    let mut matched = vec![false; n];
    let mut partner: Vec<Option<usize>> = vec![None; n];
    let mut cluster_heads = Vec::new();
    for &v in order {
        if matched[v] {
            continue;
        }
        matched[v] = true;
        let mut best: Option<(f64, usize)> = None;
        for &w in &neighbors[v] {
            if matched[w] {
                continue;
            }
            let a = affinity(&op.s, &op.d, v, w).expect("pattern neighbor");
            if a > 0.0 {
                let better = match best {
                    None => true,
                    Some((best_a, _)) => a > best_a,
                };
                if better {
                    best = Some((a, w));
                }
            }
        }
        if let Some((_, w)) = best {
            matched[w] = true;
            partner[v] = Some(w);
            partner[w] = Some(v);
        }
        cluster_heads.push(v);
    }
    Matching { partner, cluster_heads }
}

/// Binary fine-to-coarse incidence: each fine vertex belongs to exactly one
/// coarse cluster of size 1 or 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AssignmentMatrix {
    cluster_of: Vec<usize>,
    members: Vec<(usize, Option<usize>)>,
}

impl AssignmentMatrix {
    /// Clusters are numbered in visit order: the matching's head vertex comes
    /// first within each pair.
    pub fn from_matching(matching: &Matching) -> Self {
        let n = matching.n_fine();
        let mut cluster_of = vec![usize::MAX; n];
        let mut members = Vec::with_capacity(matching.n_clusters());
        for &head in &matching.cluster_heads {
            let c = members.len();
            cluster_of[head] = c;
            match matching.partner(head) {
                Some(p) => {
                    cluster_of[p] = c;
                    members.push((head, Some(p)));
                }
                None => members.push((head, None)),
            }
        }
        debug_assert!(cluster_of.iter().all(|&c| c != usize::MAX));
        AssignmentMatrix { cluster_of, members }
    }

    /// Rebuild from explicit member pairs (deserialization); the pairs must
    /// partition `0..n_fine`.
    pub fn from_members(
        n_fine: usize,
        members: Vec<(usize, Option<usize>)>,
    ) -> Result<Self, String> {
        let mut cluster_of = vec![usize::MAX; n_fine];
        for (c, &(a, b)) in members.iter().enumerate() {
            for v in std::iter::once(a).chain(b) {
                if v >= n_fine {
                    return Err(format!("member {v} out of range (n_fine {n_fine})"));
                }
                if cluster_of[v] != usize::MAX {
                    return Err(format!("vertex {v} assigned twice"));
                }
                cluster_of[v] = c;
            }
        }
        if let Some(v) = cluster_of.iter().position(|&c| c == usize::MAX) {
            return Err(format!("vertex {v} unassigned"));
        }
        Ok(AssignmentMatrix { cluster_of, members })
    }

    pub fn n_fine(&self) -> usize {
        self.cluster_of.len()
    }

    pub fn n_coarse(&self) -> usize {
        self.members.len()
    }

    pub fn cluster_of(&self, fine: usize) -> usize {
        self.cluster_of[fine]
    }

    pub fn members(&self, coarse: usize) -> (usize, Option<usize>) {
        self.members[coarse]
    }

    /// Column sums of G, i.e. cluster sizes (1 or 2).
    pub fn cluster_sizes(&self) -> Vec<usize> {
        self.members
            .iter()
            .map(|(_, second)| if second.is_some() { 2 } else { 1 })
            .collect()
    }

    /// y = G x: copy each coarse value to its cluster members.
    pub fn prolong(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n_coarse());
        let mut y = vec![0.0; self.n_fine()];
        for (c, &(a, b)) in self.members.iter().enumerate() {
            y[a] = x[c];
            if let Some(b) = b {
                y[b] = x[c];
            }
        }
        y
    }

    /// y = G^T x: sum fine values within each cluster.
    pub fn restrict(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.n_fine());
        self.members
            .iter()
            .map(|&(a, b)| x[a] + b.map_or(0.0, |b| x[b]))
            .collect()
    }
}

/// Coarse operator flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CoarsenMode {
    /// `S^ = G^T S G`, `D^ = G^T D G` (summed masses); keeps the factored
    /// (stiffness, mass) form at every level.
    #[default]
    Galerkin,
    /// Literal `L^ = G^T (D^-1 S) G`, stored as a general sparse operator.
    Eq8Literal,
}

/// Either output of [`coarsen_operators`].
#[derive(Debug, Clone)]
pub enum CoarseOperator {
    Pair(OperatorPair),
    General(SparseGeneralMatrix),
}

/// Project an operator through an assignment matrix.
pub fn coarsen_operators(
    op: &OperatorPair,
    g: &AssignmentMatrix,
    mode: CoarsenMode,
) -> Result<CoarseOperator, CoarsenError> {
    if g.n_fine() != op.dim() {
        return Err(CoarsenError::DimensionMismatch { g_fine: g.n_fine(), op_dim: op.dim() });
    }
    let nc = g.n_coarse();
    match mode {
        CoarsenMode::Galerkin => {
            let mut triplets: Vec<(usize, usize, f64)> = Vec::with_capacity(op.s.nnz());
            for (i, j, v) in op.s.iter_upper() {
                let (ci, cj) = (g.cluster_of(i), g.cluster_of(j));
                if i != j && ci == cj {
                    // S_ij and S_ji both collapse onto the coarse diagonal.
                    triplets.push((ci, ci, 2.0 * v));
                } else {
                    triplets.push((ci, cj, v));
                }
            }
            let s = SparseSymmetricMatrix::from_triplets(nc, &triplets);
            let d = DiagonalMassMatrix::new(
                g.member_list()
                    .iter()
                    .map(|&(a, b)| op.d.get(a) + b.map_or(0.0, |b| op.d.get(b)))
                    .collect(),
            )?;
            Ok(CoarseOperator::Pair(OperatorPair::new(s, d)))
        }
        CoarsenMode::Eq8Literal => {
            let mut triplets: Vec<(usize, usize, f64)> = Vec::with_capacity(op.s.nnz());
            for (i, j, v) in op.s.iter_upper() {
                let (ci, cj) = (g.cluster_of(i), g.cluster_of(j));
                triplets.push((ci, cj, v / op.d.get(i)));
                if i != j {
                    triplets.push((cj, ci, v / op.d.get(j)));
                }
            }
            Ok(CoarseOperator::General(SparseGeneralMatrix::from_triplets(
                nc, nc, &triplets,
            )))
        }
    }
}

impl AssignmentMatrix {
    fn member_list(&self) -> &[(usize, Option<usize>)] {
        &self.members
    }
}

/// Element-wise max over adjacent padded pairs (2c, 2c+1), halving the rows.
/// Returns the pooled features and the argmax cache for the backward pass.
/// Ties break toward the first slot.
pub fn pool_forward(x: ArrayView2<'_, f64>) -> (Array2<f64>, Vec<u8>) {
    let rows = x.nrows();
    assert!(rows % 2 == 0, "padded pooling input must have even rows");
    let f = x.ncols();
    let out_rows = rows / 2;
    let mut y = Array2::zeros((out_rows, f));
    let mut argmax = vec![0u8; out_rows * f];
    for c in 0..out_rows {
        for k in 0..f {
            let a = x[(2 * c, k)];
            let b = x[(2 * c + 1, k)];
            if b > a {
                y[(c, k)] = b;
                argmax[c * f + k] = 1;
            } else {
                y[(c, k)] = a;
            }
        }
    }
    (y, argmax)
}

/// Route pooled gradients back to the argmax positions.
pub fn pool_backward(grad_out: ArrayView2<'_, f64>, argmax: &[u8]) -> Array2<f64> {
    let out_rows = grad_out.nrows();
    let f = grad_out.ncols();
    assert_eq!(argmax.len(), out_rows * f, "stale pooling cache");
    let mut grad_in = Array2::zeros((2 * out_rows, f));
    for c in 0..out_rows {
        for k in 0..f {
            let row = 2 * c + argmax[c * f + k] as usize;
            grad_in[(row, k)] = grad_out[(c, k)];
        }
    }
    grad_in
}
