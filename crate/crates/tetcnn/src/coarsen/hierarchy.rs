//! Multi-level hierarchy with the balanced binary-tree pooling layout.

use ndarray::{Array2, ArrayView2};

use super::{
    coarsen_operators, graclus_match, AssignmentMatrix, CoarseOperator, CoarsenError, CoarsenMode,
};
use crate::lbo::{robust_lambda_max, DiagonalMassMatrix, OperatorPair, SparseSymmetricMatrix};
use crate::rng::{subseed, Purpose};

/// One level of the hierarchy, indexed in padded (binary-tree) slot order.
#[derive(Debug, Clone)]
pub struct Level {
    /// Operator over padded indexing: fake slots have empty stiffness rows
    /// and unit mass, so `L~ x` keeps zero features at zero.
    pub op: OperatorPair,
    /// Padded slot -> compact vertex index at this level (None = fake).
    pub slots: Vec<Option<usize>>,
    /// Real-slot mask, aligned with `slots`.
    pub real: Vec<bool>,
    /// Number of real vertices at this level.
    pub n_real: usize,
}

impl Level {
    pub fn padded_n(&self) -> usize {
        self.slots.len()
    }
}

/// Pairs reduced by one pooling stage, in padded indexing: `(2c, 2c+1)` with
/// the second (or both) possibly fake.
#[derive(Debug, Clone)]
pub struct PoolStagePairs {
    pub pairs: Vec<(usize, Option<usize>)>,
}

/// The full coarsening hierarchy: `levels + 1` operator levels connected by
/// `levels` matchings, plus the padded binary-tree layout.
#[derive(Debug, Clone)]
pub struct Hierarchy {
    pub levels: Vec<Level>,
    /// Compact fine-to-coarse assignment per stage (levels entries).
    pub assignments: Vec<AssignmentMatrix>,
    /// lambda_max per level (same order as `levels`).
    pub lambda_max: Vec<f64>,
}

impl Hierarchy {
    pub fn n_stages(&self) -> usize {
        self.assignments.len()
    }

    /// Padded feature matrix at level 0: real slots take the vertex's feature
    /// row, fake slots zero.
    pub fn pad_level0(&self, features: ArrayView2<'_, f64>) -> Array2<f64> {
        pad_features(&self.levels[0], features)
    }

    /// Pairs reduced when pooling level `l` to level `l + 1`.
    pub fn stage_pairs(&self, l: usize) -> PoolStagePairs {
        let fine = &self.levels[l];
        let coarse_len = self.levels[l + 1].padded_n();
        let pairs = (0..coarse_len)
            .map(|c| {
                let a = 2 * c;
                let b = 2 * c + 1;
                (a, if fine.real[b] { Some(b) } else { None })
            })
            .collect();
        PoolStagePairs { pairs }
    }
}

/// Scatter compact per-vertex rows into padded slot order (fake rows zero).
pub fn pad_features(level: &Level, features: ArrayView2<'_, f64>) -> Array2<f64> {
    let f = features.ncols();
    let mut out = Array2::zeros((level.padded_n(), f));
    for (slot, &src) in level.slots.iter().enumerate() {
        if let Some(v) = src {
            out.row_mut(slot).assign(&features.row(v));
        }
    }
    out
}

/// Gather real padded rows back into compact vertex order.
pub fn unpad_features(level: &Level, padded: ArrayView2<'_, f64>) -> Array2<f64> {
    let f = padded.ncols();
    let mut out = Array2::zeros((level.n_real, f));
    for (slot, &src) in level.slots.iter().enumerate() {
        if let Some(v) = src {
            out.row_mut(v).assign(&padded.row(slot));
        }
    }
    out
}

/// Build `levels` Graclus stages from the level-0 operator, computing the
/// padded layout, per-level operators (Galerkin), and per-level lambda_max.
///
/// Deterministic for a fixed (operator, seed): visit orders come from
/// per-stage sub-streams of `seed`.
pub fn build_hierarchy(
    op0: &OperatorPair,
    levels: usize,
    seed: u64,
) -> Result<Hierarchy, CoarsenError> {
    assert!(levels >= 1, "hierarchy needs at least one stage");
    let mut compact_ops: Vec<OperatorPair> = vec![op0.clone()];
    let mut assignments: Vec<AssignmentMatrix> = Vec::with_capacity(levels);
    for stage in 0..levels {
        let current = compact_ops.last().unwrap();
        if current.dim() < 2 {
            return Err(CoarsenError::MeshExhausted {
                remaining: current.dim(),
                stage,
                requested: levels,
            });
        }
        let matching = graclus_match(current, subseed(seed, Purpose::Matching, stage as u64));
        let g = AssignmentMatrix::from_matching(&matching);
        let coarse = match coarsen_operators(current, &g, CoarsenMode::Galerkin)? {
            CoarseOperator::Pair(p) => p,
            CoarseOperator::General(_) => unreachable!(),
        };
        assignments.push(g);
        compact_ops.push(coarse);
    }

    // Binary-tree slot layout, coarsest level first: every slot at level l+1
    // owns child slots (2c, 2c+1) at level l; singleton clusters get a fake
    // second child, fake slots get two fake children.
    let n_top = compact_ops[levels].dim();
    let mut slot_maps: Vec<Vec<Option<usize>>> = vec![Vec::new(); levels + 1];
    slot_maps[levels] = (0..n_top).map(Some).collect();
    for l in (0..levels).rev() {
        let parent = &slot_maps[l + 1];
        let g = &assignments[l];
        let mut slots = Vec::with_capacity(parent.len() * 2);
        for &p in parent {
            match p {
                Some(coarse) => {
                    let (a, b) = g.members(coarse);
                    slots.push(Some(a));
                    slots.push(b);
                }
                None => {
                    slots.push(None);
                    slots.push(None);
                }
            }
        }
        slot_maps[l] = slots;
    }

    let mut out_levels = Vec::with_capacity(levels + 1);
    let mut lambda_max = Vec::with_capacity(levels + 1);
    for (l, slots) in slot_maps.into_iter().enumerate() {
        let compact = &compact_ops[l];
        let mut slot_of = vec![usize::MAX; compact.dim()];
        for (slot, &src) in slots.iter().enumerate() {
            if let Some(v) = src {
                slot_of[v] = slot;
            }
        }
        debug_assert!(slot_of.iter().all(|&s| s != usize::MAX));
        let padded_n = slots.len();
        let triplets: Vec<(usize, usize, f64)> = compact
            .s
            .iter_upper()
            .map(|(i, j, v)| (slot_of[i], slot_of[j], v))
            .collect();
        let s = SparseSymmetricMatrix::from_triplets(padded_n, &triplets);
        let mut d = vec![1.0f64; padded_n];
        for (v, &slot) in slot_of.iter().enumerate() {
            d[slot] = compact.d.get(v);
        }
        let mut op = OperatorPair::new(s, DiagonalMassMatrix::new(d).expect("positive masses"));
        let lam = robust_lambda_max(&op.s, &op.d)?;
        op.lambda_max = Some(lam);
        lambda_max.push(lam);
        let real: Vec<bool> = slots.iter().map(|s| s.is_some()).collect();
        out_levels.push(Level { op, slots, real, n_real: compact.dim() });
    }

    Ok(Hierarchy { levels: out_levels, assignments, lambda_max })
}
