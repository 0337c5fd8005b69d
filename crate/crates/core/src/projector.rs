//! Protected-knowledge Gram accumulation and approximate null-space projectors.

use nalgebra::SymmetricEigen;
use serde::{Deserialize, Serialize};

use crate::error::{config, contract, EditError, Result};
use crate::linalg::{all_finite, gram, symmetrize, Matrix};
use crate::memory::KnowledgeBase;

/// Default eigenvalue threshold for the approximate null space.
pub const DEFAULT_EPSILON: f64 = 0.02;

/// How the Gram matrix is scaled before its spectrum is thresholded.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GramNormalization {
    /// Threshold raw eigenvalues.
    #[default]
    Raw,
    /// Divide by the total number of absorbed columns first.
    ByColumns,
}

/// `C⁽ᵗ⁾ = λ₁·K₀·K₀ᵀ + Σ_{i<t} K_i·K_iᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct GramAccumulator {
    lambda1: f64,
    base: Matrix,
    history: Matrix,
    edits_absorbed: usize,
    base_columns: usize,
    history_columns: usize,
}

impl GramAccumulator {
    pub fn lambda1(&self) -> f64 {
        self.lambda1
    }

    pub fn base(&self) -> &Matrix {
        &self.base
    }

    pub fn history(&self) -> &Matrix {
        &self.history
    }

    pub fn edits_absorbed(&self) -> usize {
        self.edits_absorbed
    }

    pub fn dim(&self) -> usize {
        self.base.nrows()
    }

    /// `base + history`.
    pub fn current(&self) -> Matrix {
        &self.base + &self.history
    }

    /// Total number of key columns represented in `current()`.
    pub fn column_count(&self) -> usize {
        self.base_columns + self.history_columns
    }

    /// `current()` scaled according to `norm`, for thresholding.
    pub fn for_threshold(&self, norm: GramNormalization) -> Matrix {
        match norm {
            GramNormalization::Raw => self.current(),
            GramNormalization::ByColumns => self.current() / self.column_count().max(1) as f64,
        }
    }

    /// Adds `keys·keysᵀ` to the history and counts one absorbed edit.
    pub fn absorb(&mut self, keys: &Matrix) -> Result<()> {
        if keys.nrows() != self.dim() {
            return Err(contract(format!(
                "keys have {} rows, accumulator is {}x{}",
                keys.nrows(),
                self.dim(),
                self.dim()
            )));
        }
        if keys.ncols() == 0 {
            return Err(contract("cannot absorb an empty key batch"));
        }
        self.history += keys * keys.transpose();
        self.history = symmetrize(&self.history);
        self.edits_absorbed += 1;
        self.history_columns += keys.ncols();
        Ok(())
    }

    /// Value-semantics variant of [`absorb`](Self::absorb).
    pub fn absorbed(mut self, keys: &Matrix) -> Result<Self> {
        self.absorb(keys)?;
        Ok(self)
    }
}

/// Starts an accumulator with `base = λ₁·K₀·K₀ᵀ` and empty history.
pub fn gram_init(kb: &KnowledgeBase, lambda1: f64) -> Result<GramAccumulator> {
    if !(lambda1.is_finite() && lambda1 >= 0.0) {
        return Err(config(format!("lambda1 must be >= 0, got {lambda1}")));
    }
    let d = kb.d_in();
    Ok(GramAccumulator {
        lambda1,
        base: symmetrize(&(kb.k0_gram() * lambda1)),
        history: Matrix::zeros(d, d),
        edits_absorbed: 0,
        base_columns: kb.n0(),
        history_columns: 0,
    })
}

/// An orthogonal projector `P = U_small·U_smallᵀ` onto the eigenvectors of a
/// Gram matrix whose eigenvalues fall strictly below `epsilon`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Projector {
    #[serde(skip)]
    p: Matrix,
    pub epsilon: f64,
    pub retained_dim: usize,
    /// Retained eigenvalues (after clamping at zero), ascending.
    pub spectrum_kept: Vec<f64>,
    pub built_at_step: usize,
}

impl Projector {
    pub fn matrix(&self) -> &Matrix {
        &self.p
    }

    pub fn dim(&self) -> usize {
        self.p.nrows()
    }

    /// The identity projector: nothing is protected.
    pub fn identity(d: usize) -> Self {
        Self {
            p: Matrix::identity(d, d),
            epsilon: f64::INFINITY,
            retained_dim: d,
            spectrum_kept: Vec::new(),
            built_at_step: 0,
        }
    }

    /// Wraps a caller-provided projector matrix without checking it.
    pub fn from_matrix(p: Matrix, epsilon: f64, retained_dim: usize, built_at_step: usize) -> Self {
        Self {
            p,
            epsilon,
            retained_dim,
            spectrum_kept: Vec::new(),
            built_at_step,
        }
    }

    /// JSON array of the retained spectrum.
    pub fn spectrum_json(&self) -> String {
        serde_json::to_string(&self.spectrum_kept).expect("finite f64 vector serializes")
    }
}

/// Clamped ascending spectrum and matching eigenvector columns.
struct Spectrum {
    values: Vec<f64>,
    vectors: Matrix,
}

fn decompose(c: &Matrix) -> Result<Spectrum> {
    let n = c.nrows();
    if c.ncols() != n {
        return Err(contract(format!("Gram matrix must be square, got {}x{}", n, c.ncols())));
    }
    if !all_finite(c) {
        return Err(EditError::Numerical("Gram matrix has non-finite entries".into()));
    }
    let asym = (c - c.transpose()).norm();
    let scale = c.norm();
    if asym > 1e-8 * scale {
        return Err(contract(format!(
            "Gram matrix is not symmetric (‖C−Cᵀ‖ = {asym:e}, ‖C‖ = {scale:e})"
        )));
    }
    let eig = SymmetricEigen::try_new(symmetrize(c), f64::EPSILON, 0)
        .ok_or_else(|| EditError::Numerical("symmetric eigendecomposition did not converge".into()))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let vectors = Matrix::from_fn(n, n, |r, j| eig.eigenvectors[(r, order[j])]);
    Ok(Spectrum { values, vectors })
}

fn outer_of_columns(vectors: &Matrix, cols: &[usize]) -> Matrix {
    let n = vectors.nrows();
    if cols.is_empty() {
        return Matrix::zeros(n, n);
    }
    let mut u = Matrix::zeros(n, cols.len());
    for (j, &c) in cols.iter().enumerate() {
        u.set_column(j, &vectors.column(c));
    }
    gram(&u)
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon > 0.0) {
        return Err(config(format!("epsilon must be > 0, got {epsilon}")));
    }
    Ok(())
}

/// Builds the approximate null-space projector of `c` at threshold `epsilon`.
pub fn build_projector(c: &Matrix, epsilon: f64, step: usize) -> Result<Projector> {
    check_epsilon(epsilon)?;
    let spec = decompose(c)?;
    let small: Vec<usize> = (0..spec.values.len())
        .filter(|&i| spec.values[i] < epsilon)
        .collect();
    Ok(Projector {
        p: outer_of_columns(&spec.vectors, &small),
        epsilon,
        retained_dim: small.len(),
        spectrum_kept: small.iter().map(|&i| spec.values[i]).collect(),
        built_at_step: step,
    })
}

/// Projector onto the occupied directions (eigenvalue `>= epsilon`).
pub fn build_occupied_projector(c: &Matrix, epsilon: f64) -> Result<Matrix> {
    check_epsilon(epsilon)?;
    let spec = decompose(c)?;
    let big: Vec<usize> = (0..spec.values.len())
        .filter(|&i| spec.values[i] >= epsilon)
        .collect();
    Ok(outer_of_columns(&spec.vectors, &big))
}

/// Picks a threshold so that `⌈fraction·d⌉` eigenvalues of `c` fall below it.
///
/// The threshold sits at the arithmetic midpoint of the gap between the last
/// retained and the first occupied eigenvalue.
pub fn epsilon_for_fraction(c: &Matrix, fraction: f64) -> Result<f64> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(config(format!("spectrum fraction must lie in (0, 1], got {fraction}")));
    }
    let spec = decompose(c)?;
    let d = spec.values.len();
    let keep = ((d as f64) * fraction).ceil() as usize;
    let keep = keep.clamp(1, d);
    let below = spec.values[keep - 1];
    let eps = if keep == d {
        below * 2.0 + 1.0
    } else {
        0.5 * (below + spec.values[keep])
    };
    if eps <= below {
        return Err(EditError::Numerical(format!(
            "no spectral gap after {keep} eigenvalues (value {below:e})"
        )));
    }
    Ok(eps)
}

/// Whether the projector is rebuilt before edit `step` (1-based):
/// true for steps 1, τ+1, 2τ+1, …
pub fn refresh_due(step: usize, tau: usize) -> Result<bool> {
    if tau == 0 {
        return Err(config("tau must be >= 1"));
    }
    if step == 0 {
        return Err(contract("steps are numbered from 1"));
    }
    Ok((step - 1) % tau == 0)
}
