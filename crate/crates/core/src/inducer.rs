//! Edge and root scoring, Matrix-Tree marginal inference over single-root
//! arborescences, and the root-refinement loss.
//!
//! With `A_ij = exp(E_ij)` (zero diagonal) and `ρ_j = exp(r_j)`, the
//! in-degree Laplacian `L` has `L_jj = Σ_i A_ij` and `L_ij = -A_ij`. Replacing
//! its first row by `ρ` gives `L̂` with `det(L̂) = Z`, the total weight of all
//! arborescences. Differentiating `log det` gives
//!
//! ```text
//! P_ij = (1 - δ_j0) A_ij [L̂⁻¹]_jj - (1 - δ_i0) A_ij [L̂⁻¹]_ji
//! Pr_j = ρ_j [L̂⁻¹]_j0
//! ```

use rand::Rng;

use crate::autodiff::{Init, NodeId, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const W_PARENT: &str = "tree.w_parent";
pub const W_CHILD: &str = "tree.w_child";
pub const W_BILINEAR: &str = "tree.w_bilinear";
pub const W_ROOT: &str = "tree.w_root";

/// Lower/upper clamp applied to root marginals before taking logs.
pub const ROOT_PROB_CLAMP: f64 = 1e-12;

/// Unnormalized scores: `edges[(head, dependent)]` and one root score per node.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet {
    pub edges: Tensor,
    pub roots: Vec<f64>,
}

impl ScoreSet {
    pub fn new(edges: Tensor, roots: Vec<f64>) -> Result<Self> {
        if edges.rows() != edges.cols() || edges.rows() != roots.len() {
            return Err(Error::shape(
                "score_set",
                format!("edges {:?} with {} roots", edges.shape(), roots.len()),
            ));
        }
        if !edges.is_finite() || roots.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite {
                what: "scores".into(),
            });
        }
        Ok(ScoreSet { edges, roots })
    }

    pub fn size(&self) -> usize {
        self.roots.len()
    }

    /// Same scores with `c` added everywhere.
    pub fn shifted(&self, c: f64) -> ScoreSet {
        ScoreSet {
            edges: self.edges.map(|v| v + c),
            roots: self.roots.iter().map(|v| v + c).collect(),
        }
    }
}

/// Edge marginals `edges[(i, j)] = P(i → j)` and root marginals.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeMarginals {
    pub edges: Tensor,
    pub roots: Vec<f64>,
    pub log_z: f64,
}

impl TreeMarginals {
    pub fn size(&self) -> usize {
        self.roots.len()
    }

    /// Largest absolute difference over all edge and root marginals.
    pub fn max_abs_diff(&self, other: &TreeMarginals) -> f64 {
        let roots = self
            .roots
            .iter()
            .zip(&other.roots)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        roots.max(self.edges.max_abs_diff(&other.edges))
    }

    /// Worst violation of `Σ Pr = 1` and `Σ_i P_ij + Pr_j = 1`.
    pub fn normalization_error(&self) -> f64 {
        let m = self.size();
        let mut worst = (self.roots.iter().sum::<f64>() - 1.0).abs();
        for j in 0..m {
            let incoming: f64 = (0..m).map(|i| self.edges.get(i, j)).sum();
            worst = worst.max((incoming + self.roots[j] - 1.0).abs());
        }
        worst
    }
}

/// Marginal nodes recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct MarginalNodes {
    /// `m × m` edge marginals.
    pub edges: NodeId,
    /// `m × 1` root marginals.
    pub roots: NodeId,
    pub log_z: NodeId,
}

impl MarginalNodes {
    pub fn read(&self, tape: &Tape) -> TreeMarginals {
        TreeMarginals {
            edges: tape.value(self.edges).clone(),
            roots: tape.value(self.roots).as_slice().to_vec(),
            log_z: tape.value(self.log_z).item(),
        }
    }
}

/// Construction variant; anything but `Standard` exists to check that the
/// verification suite notices a broken formula.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MttVariant {
    #[default]
    Standard,
    FlippedSecondTerm,
}

pub fn init_params(store: &mut ParamStore, dim: usize, rng: &mut impl Rng) -> Result<()> {
    store.init(W_PARENT, dim, dim, Init::Glorot, rng)?;
    store.init(W_CHILD, dim, dim, Init::Glorot, rng)?;
    store.init(W_BILINEAR, dim, dim, Init::Glorot, rng)?;
    store.init(W_ROOT, dim, 1, Init::Glorot, rng)?;
    Ok(())
}

pub fn param_shapes(dim: usize) -> Vec<(String, [usize; 2])> {
    vec![
        (W_PARENT.into(), [dim, dim]),
        (W_CHILD.into(), [dim, dim]),
        (W_BILINEAR.into(), [dim, dim]),
        (W_ROOT.into(), [dim, 1]),
    ]
}

/// `E_ij = tanh(h_i W_p) · W_b · tanh(h_j W_c)ᵀ` for all ordered pairs.
pub fn edge_scores(tape: &mut Tape, store: &ParamStore, h: NodeId) -> Result<NodeId> {
    let wp = tape.param(store, W_PARENT)?;
    let wc = tape.param(store, W_CHILD)?;
    let wb = tape.param(store, W_BILINEAR)?;
    let parent = tape.matmul(h, wp)?;
    let parent = tape.tanh(parent)?;
    let child = tape.matmul(h, wc)?;
    let child = tape.tanh(child)?;
    let child_t = tape.transpose(child)?;
    let left = tape.matmul(parent, wb)?;
    tape.matmul(left, child_t)
}

/// `r_i = h_i · w_r`, as an `m × 1` column.
pub fn root_scores(tape: &mut Tape, store: &ParamStore, h: NodeId) -> Result<NodeId> {
    let wr = tape.param(store, W_ROOT)?;
    tape.matmul(h, wr)
}

/// Matrix-Tree marginals for edge scores `edges` (`m × m`) and root scores
/// `roots` (`m × 1`), recorded on the tape.
pub fn mtt_marginals(tape: &mut Tape, edges: NodeId, roots: NodeId) -> Result<MarginalNodes> {
    mtt_marginals_variant(tape, edges, roots, MttVariant::Standard)
}

#[doc(hidden)]
pub fn mtt_marginals_variant(
    tape: &mut Tape,
    edges: NodeId,
    roots: NodeId,
    variant: MttVariant,
) -> Result<MarginalNodes> {
    let [m, m2] = tape.shape(edges);
    if m != m2 || tape.shape(roots) != [m, 1] {
        return Err(Error::shape(
            "mtt_marginals",
            format!("edges {:?}, roots {:?}", tape.shape(edges), tape.shape(roots)),
        ));
    }

    // Every arborescence picks exactly one incoming score per node (an edge
    // or its root score), so shifting column j of E together with r_j by the
    // same constant leaves the distribution unchanged.
    let (e, r) = (tape.value(edges), tape.value(roots));
    let shift: Vec<f64> = (0..m)
        .map(|j| {
            (0..m)
                .filter(|&i| i != j)
                .map(|i| e.get(i, j))
                .fold(r.get(j, 0), f64::max)
        })
        .collect();
    let total_shift: f64 = shift.iter().sum();

    let diag_mask: Vec<bool> = (0..m * m).map(|k| k / m == k % m).collect();
    let shift_row = tape.constant(Tensor::row_vector(&shift))?;
    let off_diag = tape.constant(Tensor::from_fn(m, m, |i, j| if i == j { 0.0 } else { 1.0 }))?;
    let eye = tape.constant(Tensor::identity(m))?;
    let not_first_col = tape.constant(Tensor::col_vector(
        &(0..m).map(|i| if i == 0 { 0.0 } else { 1.0 }).collect::<Vec<_>>(),
    ))?;
    let not_first_row = tape.constant(Tensor::row_vector(
        &(0..m).map(|j| if j == 0 { 0.0 } else { 1.0 }).collect::<Vec<_>>(),
    ))?;
    let first_unit = tape.constant(Tensor::col_vector(
        &(0..m).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect::<Vec<_>>(),
    ))?;

    let shifted = tape.sub(edges, shift_row)?;
    let shifted = tape.masked_fill(shifted, &diag_mask, 0.0)?;
    let a = tape.exp(shifted)?;
    let a = tape.mul(a, off_diag)?;

    let roots_row = tape.transpose(roots)?;
    let roots_row = tape.sub(roots_row, shift_row)?;
    let rho = tape.exp(roots_row)?;

    let in_weight = tape.col_sums(a)?;
    let degree = tape.mul(eye, in_weight)?;
    let laplacian = tape.sub(degree, a)?;
    let body = tape.mul(laplacian, not_first_col)?;
    let first = tape.matmul(first_unit, rho)?;
    let l_hat = tape.add(body, first)?;

    let inv = tape.inverse(l_hat)?;

    let rho_col = tape.transpose(rho)?;
    let first_inv_col = tape.slice(inv, (0, m), (0, 1))?;
    let root_marg = tape.mul(rho_col, first_inv_col)?;

    let inv_diag = tape.mul(inv, eye)?;
    let inv_diag = tape.col_sums(inv_diag)?;
    let inv_diag = tape.mul(inv_diag, not_first_row)?;
    let term_dep = tape.mul(a, inv_diag)?;

    let inv_t = tape.transpose(inv)?;
    let inv_t = tape.mul(inv_t, not_first_col)?;
    let term_head = tape.mul(a, inv_t)?;
    let edge_marg = match variant {
        MttVariant::Standard => tape.sub(term_dep, term_head)?,
        MttVariant::FlippedSecondTerm => tape.add(term_dep, term_head)?,
    };

    let log_det = tape.logdet(l_hat)?;
    let log_z = tape.add_scalar(log_det, total_shift)?;

    Ok(MarginalNodes {
        edges: edge_marg,
        roots: root_marg,
        log_z,
    })
}

/// Marginals for a standalone score set (no gradients needed).
pub fn marginals(scores: &ScoreSet) -> Result<TreeMarginals> {
    marginals_variant(scores, MttVariant::Standard)
}

#[doc(hidden)]
pub fn marginals_variant(scores: &ScoreSet, variant: MttVariant) -> Result<TreeMarginals> {
    if scores.size() == 0 {
        return Err(Error::Invalid("empty score set".into()));
    }
    let mut tape = Tape::new();
    let e = tape.constant(scores.edges.clone())?;
    let r = tape.constant(Tensor::col_vector(&scores.roots))?;
    Ok(mtt_marginals_variant(&mut tape, e, r, variant)?.read(&tape))
}

/// Binary cross-entropy pulling root mass onto the rows flagged in `aspect_mask`.
pub fn root_refinement_loss(tape: &mut Tape, roots: NodeId, aspect_mask: &[bool]) -> Result<NodeId> {
    let [m, c] = tape.shape(roots);
    if c != 1 || aspect_mask.len() != m {
        return Err(Error::shape(
            "root_refinement_loss",
            format!("mask of {} for roots {:?}", aspect_mask.len(), [m, c]),
        ));
    }
    let target: Vec<f64> = aspect_mask.iter().map(|&t| if t { 1.0 } else { 0.0 }).collect();
    let t = tape.constant(Tensor::col_vector(&target))?;
    let one_minus_t = tape.constant(Tensor::col_vector(
        &target.iter().map(|v| 1.0 - v).collect::<Vec<_>>(),
    ))?;

    let p = tape.clamp(roots, ROOT_PROB_CLAMP, 1.0 - ROOT_PROB_CLAMP)?;
    let log_p = tape.log(p)?;
    let q = tape.scale(p, -1.0)?;
    let q = tape.add_scalar(q, 1.0)?;
    let log_q = tape.log(q)?;
    let pos = tape.mul(log_p, t)?;
    let neg = tape.mul(log_q, one_minus_t)?;
    let both = tape.add(pos, neg)?;
    let total = tape.sum(both)?;
    tape.scale(total, -1.0)
}
