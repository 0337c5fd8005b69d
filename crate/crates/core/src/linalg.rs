//! Dense helpers shared by the editors and metrics.
//!
//! Every closed-form update in this crate has the shape `X · G = B`. We solve
//! it through an LU factorization of `Gᵀ` (partial pivoting) and report the
//! relative residual together with a Hager/Higham 1-norm condition estimate,
//! so callers can reject steps that would silently produce garbage.

use nalgebra::{DMatrix, DVector, LU};

use crate::error::{EditError, Result};

pub type Matrix = DMatrix<f64>;

/// Systems whose 1-norm condition estimate exceeds this are rejected.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Outcome of a right-division `X = B · G⁻¹`.
#[derive(Debug, Clone)]
pub struct RightSolve {
    pub x: Matrix,
    /// `‖X·G − B‖_F / ‖B‖_F` (0 when `B` is zero).
    pub relative_residual: f64,
    pub condition_estimate: f64,
}

/// Solves `X · G = B` for `X` without forming `G⁻¹`.
pub fn solve_right(g: &Matrix, b: &Matrix) -> Result<RightSolve> {
    let n = g.nrows();
    if g.ncols() != n {
        return Err(EditError::Contract(format!(
            "system matrix must be square, got {}x{}",
            g.nrows(),
            g.ncols()
        )));
    }
    if b.ncols() != n {
        return Err(EditError::Contract(format!(
            "right-hand side has {} columns, system is {n}x{n}",
            b.ncols()
        )));
    }
    if !all_finite(g) || !all_finite(b) {
        return Err(EditError::Numerical("non-finite entries in linear system".into()));
    }

    // X·G = B  <=>  Gᵀ·Xᵀ = Bᵀ
    let gt = g.transpose();
    let norm1 = one_norm(&gt);
    let lu = LU::new(gt);
    if !lu.is_invertible() {
        return Err(EditError::Singular { condition: f64::INFINITY });
    }
    let condition = norm1 * inverse_one_norm_estimate(&lu);
    if !condition.is_finite() || condition > CONDITION_LIMIT {
        return Err(EditError::Singular { condition });
    }

    let xt = lu
        .solve(&b.transpose())
        .ok_or(EditError::Singular { condition: f64::INFINITY })?;
    let x = xt.transpose();
    if !all_finite(&x) {
        return Err(EditError::Numerical("solution has non-finite entries".into()));
    }

    let b_norm = b.norm();
    let relative_residual = if b_norm == 0.0 {
        (&x * g).norm()
    } else {
        (&x * g - b).norm() / b_norm
    };
    Ok(RightSolve {
        x,
        relative_residual,
        condition_estimate: condition,
    })
}

/// Maximum absolute column sum.
pub fn one_norm(a: &Matrix) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Hager's estimator for `‖A⁻¹‖₁` given an LU factorization of `A`.
fn inverse_one_norm_estimate(lu: &LU<f64, nalgebra::Dyn, nalgebra::Dyn>) -> f64 {
    let n = lu.l().nrows();
    if n == 0 {
        return 0.0;
    }
    let l = lu.l();
    let u = lu.u();
    let p = lu.p();
    // Aᵀ z = y with P·A = L·U  =>  Uᵀ·Lᵀ·P z = y.
    let solve_transposed = |y: &DVector<f64>| -> Option<DVector<f64>> {
        let w = u.tr_solve_upper_triangular(y)?;
        let mut q = l.tr_solve_lower_triangular(&w)?;
        p.inv_permute_rows(&mut q);
        Some(q)
    };

    let mut x = DVector::from_element(n, 1.0 / n as f64);
    let mut estimate = 0.0;
    for _ in 0..5 {
        let Some(y) = lu.solve(&x) else {
            return f64::INFINITY;
        };
        estimate = y.iter().map(|v| v.abs()).sum::<f64>();
        let sign = y.map(|v| if v >= 0.0 { 1.0 } else { -1.0 });
        let Some(z) = solve_transposed(&sign) else {
            return f64::INFINITY;
        };
        let (j, zmax) = z
            .iter()
            .enumerate()
            .fold((0, 0.0_f64), |acc, (i, v)| if v.abs() > acc.1 { (i, v.abs()) } else { acc });
        if zmax <= z.dot(&x) {
            break;
        }
        x.fill(0.0);
        x[j] = 1.0;
    }
    estimate
}

pub fn all_finite(a: &Matrix) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// Frobenius inner product `⟨A, B⟩_F`.
pub fn frobenius_inner(a: &Matrix, b: &Matrix) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// `(A + Aᵀ) / 2`.
pub fn symmetrize(a: &Matrix) -> Matrix {
    (a + a.transpose()) * 0.5
}

/// `A · Aᵀ`, symmetrized to remove round-off asymmetry.
pub fn gram(a: &Matrix) -> Matrix {
    symmetrize(&(a * a.transpose()))
}
