//! Closed-form weight updates.
//!
//! Every editor is a pure function from the current memory, its protection
//! state and one [`EditRequest`] to an update `Δ`. All of them reduce to a
//! right-division `Δ = B·M⁻¹`, carried out by [`solve_right`].

use serde::{Deserialize, Serialize};

use crate::error::{config, contract, EditError, Result};
use crate::linalg::{all_finite, solve_right, Matrix};
use crate::memory::{residual, EditRequest, KnowledgeBase, LinearMemory};
use crate::projector::{GramAccumulator, Projector, DEFAULT_EPSILON};

/// Solves whose relative residual exceeds this are flagged as degraded.
pub const SOLVE_RESIDUAL_LIMIT: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    /// History-agnostic MEMIT.
    Memit,
    /// MEMIT with all previous edit keys in the system matrix.
    MemitH,
    /// MEMIT with random keys standing in for the edit history.
    MemitR,
    /// Null-space editing with a projector built from `K₀` only.
    #[serde(rename = "alphaedit")]
    AlphaEdit,
    /// AlphaEdit plus the edit-history Gram in the solve.
    #[serde(rename = "alphaedit_h")]
    AlphaEditH,
    /// Leakage-penalized, history-aware null-space editing.
    #[serde(rename = "betaedit")]
    BetaEdit,
}

impl MethodKind {
    pub const ALL: [MethodKind; 6] = [
        MethodKind::Memit,
        MethodKind::MemitH,
        MethodKind::MemitR,
        MethodKind::AlphaEdit,
        MethodKind::AlphaEditH,
        MethodKind::BetaEdit,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MethodKind::Memit => "memit",
            MethodKind::MemitH => "memit_h",
            MethodKind::MemitR => "memit_r",
            MethodKind::AlphaEdit => "alphaedit",
            MethodKind::AlphaEditH => "alphaedit_h",
            MethodKind::BetaEdit => "betaedit",
        }
    }

    pub fn uses_projector(self) -> bool {
        matches!(self, MethodKind::AlphaEdit | MethodKind::AlphaEditH | MethodKind::BetaEdit)
    }

    pub fn history_aware(self) -> bool {
        matches!(self, MethodKind::MemitH | MethodKind::AlphaEditH | MethodKind::BetaEdit)
    }
}

impl std::fmt::Display for MethodKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodSpec {
    pub kind: MethodKind,
    pub lambda1: f64,
    pub lambda2: f64,
    pub rect_keep_ratio: Option<f64>,
    pub epsilon: f64,
    /// When set, `epsilon` is replaced at run start by a threshold that puts
    /// this fraction of the initial protection Gram's spectrum below it.
    pub epsilon_fraction: Option<f64>,
    pub tau: usize,
    /// AlphaEdit-H only: also add `λ₁·K₀·K₀ᵀ` to the solve.
    pub alpha_h_base_penalty: bool,
}

impl Default for MethodSpec {
    fn default() -> Self {
        Self {
            kind: MethodKind::BetaEdit,
            lambda1: 15000.0,
            lambda2: 10.0,
            rect_keep_ratio: None,
            epsilon: DEFAULT_EPSILON,
            epsilon_fraction: None,
            tau: 1000,
            alpha_h_base_penalty: false,
        }
    }
}

impl MethodSpec {
    pub fn with_kind(kind: MethodKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    /// Returns the offending field name and reason on failure.
    pub fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        if !(self.lambda1.is_finite() && self.lambda1 >= 0.0) {
            return Err(("lambda1", "must be a finite number >= 0".into()));
        }
        if !(self.lambda2.is_finite() && self.lambda2 > 0.0) {
            return Err(("lambda2", "must be a finite number > 0".into()));
        }
        if let Some(r) = self.rect_keep_ratio {
            if !(r > 0.0 && r <= 1.0) {
                return Err(("rect_keep_ratio", "must lie in (0, 1]".into()));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(("epsilon", "must be a finite number > 0".into()));
        }
        if let Some(f) = self.epsilon_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(("epsilon_fraction", "must lie in (0, 1]".into()));
            }
        }
        if self.tau == 0 {
            return Err(("tau", "must be >= 1".into()));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check()
            .map_err(|(field, msg)| config(format!("method.{field}: {msg}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateResult {
    pub delta: Matrix,
    pub solve_residual: f64,
    pub condition_estimate: f64,
    /// `solve_residual` exceeded [`SOLVE_RESIDUAL_LIMIT`].
    pub degraded: bool,
}

impl UpdateResult {
    fn from_solve(delta: Matrix, solve_residual: f64, condition_estimate: f64) -> Self {
        Self {
            delta,
            solve_residual,
            condition_estimate,
            degraded: solve_residual > SOLVE_RESIDUAL_LIMIT,
        }
    }
}

fn check_square(name: &str, m: &Matrix, d: usize) -> Result<()> {
    if m.nrows() != d || m.ncols() != d {
        return Err(contract(format!(
            "{name} is {}x{}, expected {d}x{d}",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

/// MEMIT closed form `Δ = R·Kᵀ·(λ₁K₀K₀ᵀ + [H] + K·Kᵀ)⁻¹`.
///
/// Without `history_gram` this is the history-agnostic rule; passing the
/// accumulated `Σ K_i·K_iᵀ` gives the history-aware one.
pub fn memit_update(
    mem: &LinearMemory,
    kb: &KnowledgeBase,
    req: &EditRequest,
    lambda1: f64,
    history_gram: Option<&Matrix>,
) -> Result<UpdateResult> {
    if !(lambda1.is_finite() && lambda1 >= 0.0) {
        return Err(config(format!("lambda1 must be >= 0, got {lambda1}")));
    }
    let d = mem.d_in();
    if kb.d_in() != d {
        return Err(contract("knowledge base and memory disagree on d_in"));
    }
    let r = residual(mem, req)?;
    let k = req.keys();
    let mut g = kb.k0_gram() * lambda1 + k * k.transpose();
    if let Some(h) = history_gram {
        check_square("history Gram", h, d)?;
        g += h;
    }
    let b = &r * k.transpose();
    let s = solve_right(&g, &b)?;
    Ok(UpdateResult::from_solve(s.x, s.relative_residual, s.condition_estimate))
}

/// MEMIT-R: the history term uses the first `(t−1)·m` columns of
/// `random_key_pool` instead of the real edit keys.
pub fn memit_r_update(
    mem: &LinearMemory,
    kb: &KnowledgeBase,
    req: &EditRequest,
    lambda1: f64,
    random_key_pool: &Matrix,
) -> Result<UpdateResult> {
    let needed = (req.step_index() - 1) * req.batch_size();
    if random_key_pool.ncols() < needed {
        return Err(config(format!(
            "random key pool exhausted: step {} needs {needed} keys, pool has {}",
            req.step_index(),
            random_key_pool.ncols()
        )));
    }
    if needed == 0 {
        return memit_update(mem, kb, req, lambda1, None);
    }
    if random_key_pool.nrows() != mem.d_in() {
        return Err(contract("random key pool has the wrong key dimension"));
    }
    let keys = random_key_pool.columns(0, needed);
    let h = &keys * keys.transpose();
    memit_update(mem, kb, req, lambda1, Some(&h))
}

/// `Δ = R·Kᵀ·P·(λ₂I + (K·Kᵀ + A)·P)⁻¹` for an optional protection Gram `A`.
fn projected_update(
    mem: &LinearMemory,
    p: &Matrix,
    req: &EditRequest,
    lambda2: f64,
    protect: Option<&Matrix>,
) -> Result<UpdateResult> {
    if !(lambda2.is_finite() && lambda2 > 0.0) {
        return Err(config(format!("lambda2 must be > 0, got {lambda2}")));
    }
    let d = mem.d_in();
    check_square("projector", p, d)?;
    let r = residual(mem, req)?;
    let k = req.keys();
    let kp = k.transpose() * p; // m × d
    let mut m = k * &kp;
    if let Some(a) = protect {
        check_square("protection Gram", a, d)?;
        m += a * p;
    }
    for i in 0..d {
        m[(i, i)] += lambda2;
    }
    let b = &r * &kp;
    let s = solve_right(&m, &b)?;
    Ok(UpdateResult::from_solve(s.x, s.relative_residual, s.condition_estimate))
}

/// AlphaEdit closed form. With `history_gram` this is AlphaEdit-H: the
/// history enters the solve while the projector still comes from `K₀` only.
pub fn alphaedit_update(
    mem: &LinearMemory,
    proj: &Projector,
    req: &EditRequest,
    lambda2: f64,
    history_gram: Option<&Matrix>,
) -> Result<UpdateResult> {
    projected_update(mem, proj.matrix(), req, lambda2, history_gram)
}

/// BetaEdit: `Δ = R·Kᵀ·P_t·(λ₂I + (K·Kᵀ + C⁽ᵗ⁾)·P_t)⁻¹` with `C⁽ᵗ⁾` taken
/// from the accumulator and `P_t` its (possibly stale) null-space projector.
pub fn betaedit_update(
    mem: &LinearMemory,
    proj: &Projector,
    gram: &GramAccumulator,
    req: &EditRequest,
    lambda2: f64,
) -> Result<UpdateResult> {
    if proj.dim() != gram.dim() {
        return Err(contract(format!(
            "projector is {0}x{0} but Gram accumulator is {1}x{1}",
            proj.dim(),
            gram.dim()
        )));
    }
    projected_update(mem, proj.matrix(), req, lambda2, Some(&gram.current()))
}

/// Keeps the `⌈keep_ratio·n⌉` largest-magnitude entries of `delta`.
///
/// Ties at the cutoff go to the entry that comes first in (row, column)
/// order.
pub fn rect_sparsify(delta: &Matrix, keep_ratio: f64) -> Result<Matrix> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(config(format!("keep_ratio must lie in (0, 1], got {keep_ratio}")));
    }
    let (rows, cols) = delta.shape();
    let total = rows * cols;
    let keep = ((keep_ratio * total as f64).ceil() as usize).min(total);
    if keep == total {
        return Ok(delta.clone());
    }
    let mut idx: Vec<(usize, usize)> = (0..rows).flat_map(|i| (0..cols).map(move |j| (i, j))).collect();
    idx.sort_by(|a, b| delta[*b].abs().total_cmp(&delta[*a].abs()).then(a.cmp(b)));
    let mut out = Matrix::zeros(rows, cols);
    for &(i, j) in &idx[..keep] {
        out[(i, j)] = delta[(i, j)];
    }
    Ok(out)
}

/// `W + Δ` as a new memory.
pub fn apply_update(mem: &LinearMemory, delta: &Matrix) -> Result<LinearMemory> {
    if delta.shape() != mem.weights().shape() {
        return Err(contract(format!(
            "update is {:?} but weights are {:?}",
            delta.shape(),
            mem.weights().shape()
        )));
    }
    if !all_finite(delta) {
        return Err(EditError::Numerical("update has non-finite entries".into()));
    }
    Ok(LinearMemory::new(mem.weights() + delta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::synth_knowledge;

    fn scalar(v: f64) -> Matrix {
        Matrix::from_element(1, 1, v)
    }

    #[test]
    fn memit_zero_residual() {
        let (kb, mem) = synth_knowledge(1, 6, 4, 10, 1.0).unwrap();
        let keys = Matrix::from_fn(6, 2, |i, j| (i + j) as f64 + 1.0);
        let req = EditRequest::new(1, keys.clone(), mem.weights() * &keys).unwrap();
        let u = memit_update(&mem, &kb, &req, 5.0, None).unwrap();
        assert_eq!(u.delta.norm(), 0.0);
    }

    #[test]
    fn memit_scalar() {
        let kb = KnowledgeBase::new(scalar(1.0), scalar(0.0)).unwrap();
        let mem = LinearMemory::new(scalar(0.0));
        let req = EditRequest::new(1, scalar(1.0), scalar(1.0)).unwrap();
        let u = memit_update(&mem, &kb, &req, 1.0, None).unwrap();
        assert!((u.delta[(0, 0)] - 0.5).abs() < 1e-15);
        assert!(!u.degraded);
    }

    #[test]
    fn memit_singular_system() {
        let kb = KnowledgeBase::new(Matrix::from_column_slice(2, 1, &[1.0, 0.0]), Matrix::zeros(1, 1)).unwrap();
        let mem = LinearMemory::new(Matrix::zeros(1, 2));
        let req = EditRequest::new(1, Matrix::from_column_slice(2, 1, &[1.0, 0.0]), scalar(1.0)).unwrap();
        assert!(matches!(
            memit_update(&mem, &kb, &req, 1.0, None),
            Err(EditError::Singular { .. })
        ));
    }

    #[test]
    fn memit_r_first_step_matches_memit() {
        let (kb, mem) = synth_knowledge(4, 8, 4, 12, 1.0).unwrap();
        let keys = Matrix::from_fn(8, 1, |i, _| (i as f64).sin() + 0.1);
        let req = EditRequest::new(1, keys.clone(), Matrix::from_element(4, 1, 1.0)).unwrap();
        let a = memit_update(&mem, &kb, &req, 3.0, None).unwrap();
        let b = memit_r_update(&mem, &kb, &req, 3.0, &Matrix::zeros(8, 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn memit_r_pool_exhausted() {
        let (kb, mem) = synth_knowledge(4, 8, 4, 12, 1.0).unwrap();
        let req = EditRequest::new(5, Matrix::from_element(8, 1, 1.0), Matrix::zeros(4, 1)).unwrap();
        assert!(matches!(
            memit_r_update(&mem, &kb, &req, 3.0, &Matrix::from_element(8, 3, 1.0)),
            Err(EditError::Config(_))
        ));
    }

    #[test]
    fn alphaedit_zero_projector() {
        let (_, mem) = synth_knowledge(2, 5, 3, 6, 1.0).unwrap();
        let proj = Projector::from_matrix(Matrix::zeros(5, 5), 0.02, 0, 1);
        let req = EditRequest::new(1, Matrix::from_element(5, 1, 1.0), Matrix::from_element(3, 1, 2.0)).unwrap();
        let u = alphaedit_update(&mem, &proj, &req, 10.0, None).unwrap();
        assert_eq!(u.delta.norm(), 0.0);
    }

    #[test]
    fn alphaedit_scalar() {
        let mem = LinearMemory::new(scalar(0.0));
        let proj = Projector::identity(1);
        let req = EditRequest::new(1, scalar(1.0), scalar(11.0)).unwrap();
        let u = alphaedit_update(&mem, &proj, &req, 10.0, None).unwrap();
        assert!((u.delta[(0, 0)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn betaedit_degenerate_protection_is_ridge() {
        let (kb, mem) = synth_knowledge(6, 6, 4, 9, 1.0).unwrap();
        let gram = crate::projector::gram_init(&kb, 0.0).unwrap();
        let keys = Matrix::from_fn(6, 2, |i, j| ((i * 3 + j) as f64).cos());
        let req = EditRequest::new(1, keys.clone(), Matrix::from_fn(4, 2, |i, j| (i + 2 * j) as f64)).unwrap();
        let u = betaedit_update(&mem, &Projector::identity(6), &gram, &req, 10.0).unwrap();
        let r = residual(&mem, &req).unwrap();
        let ridge = Matrix::identity(6, 6) * 10.0 + &keys * keys.transpose();
        let expected = &r * keys.transpose() * ridge.try_inverse().unwrap();
        assert!((u.delta - expected).norm() < 1e-12);
    }

    #[test]
    fn betaedit_dimension_mismatch() {
        let (kb, mem) = synth_knowledge(6, 6, 4, 9, 1.0).unwrap();
        let gram = crate::projector::gram_init(&kb, 1.0).unwrap();
        let req = EditRequest::new(1, Matrix::from_element(6, 1, 1.0), Matrix::zeros(4, 1)).unwrap();
        assert!(matches!(
            betaedit_update(&mem, &Projector::identity(5), &gram, &req, 10.0),
            Err(EditError::Contract(_))
        ));
    }

    #[test]
    fn rect_keep_all() {
        let d = Matrix::from_row_slice(2, 2, &[3.0, -1.0, 0.5, 2.0]);
        assert_eq!(rect_sparsify(&d, 1.0).unwrap(), d);
    }

    #[test]
    fn rect_top_two() {
        let d = Matrix::from_row_slice(2, 2, &[3.0, -1.0, 0.5, 2.0]);
        let out = rect_sparsify(&d, 0.5).unwrap();
        assert_eq!(out, Matrix::from_row_slice(2, 2, &[3.0, 0.0, 0.0, 2.0]));
    }

    #[test]
    fn rect_ties_prefer_earlier_indices() {
        let d = Matrix::from_row_slice(2, 2, &[1.0, -1.0, 1.0, 1.0]);
        let out = rect_sparsify(&d, 0.5).unwrap();
        assert_eq!(out, Matrix::from_row_slice(2, 2, &[1.0, -1.0, 0.0, 0.0]));
    }

    #[test]
    fn rect_bad_ratio() {
        let d = Matrix::zeros(2, 2);
        assert!(matches!(rect_sparsify(&d, 0.0), Err(EditError::Config(_))));
        assert!(matches!(rect_sparsify(&d, 1.5), Err(EditError::Config(_))));
    }

    #[test]
    fn apply_zero_and_sequence() {
        let (_, mem) = synth_knowledge(8, 4, 3, 5, 1.0).unwrap();
        assert_eq!(apply_update(&mem, &Matrix::zeros(3, 4)).unwrap(), mem);
        let d1 = Matrix::from_fn(3, 4, |i, j| (i * 4 + j) as f64 * 0.25);
        let d2 = Matrix::from_fn(3, 4, |i, j| (i as f64) - (j as f64) * 0.5);
        let out = apply_update(&apply_update(&mem, &d1).unwrap(), &d2).unwrap();
        assert_eq!(out.weights(), &(mem.weights() + &d1 + &d2));
    }

    #[test]
    fn apply_rejects_nonfinite_and_shape() {
        let mem = LinearMemory::new(Matrix::zeros(2, 2));
        let mut d = Matrix::zeros(2, 2);
        d[(0, 1)] = f64::INFINITY;
        assert!(matches!(apply_update(&mem, &d), Err(EditError::Numerical(_))));
        assert!(matches!(apply_update(&mem, &Matrix::zeros(3, 2)), Err(EditError::Contract(_))));
    }

    #[test]
    fn spec_validation_names_field() {
        let spec = MethodSpec {
            lambda2: -1.0,
            ..Default::default()
        };
        let err = spec.validate().unwrap_err();
        assert!(err.to_string().contains("method.lambda2"));
    }
}
