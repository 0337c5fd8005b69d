//! Reference computations that avoid the production solver path.
//!
//! Everything here works on plain nested loops: products are formed entry by
//! entry and systems are solved by textbook Gaussian elimination with partial
//! pivoting. Slow, but independent of `nalgebra`'s factorizations.

use crate::error::{contract, EditError, Result};
use crate::linalg::Matrix;
use crate::memory::{EditRequest, KnowledgeBase, LinearMemory};
use crate::projector::Projector;

/// Largest input dimension the oracle accepts.
pub const ORACLE_MAX_DIM: usize = 64;

/// Entry-by-entry `A·B`.
pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.ncols(), b.nrows(), "inner dimensions differ");
    let mut c = Matrix::zeros(a.nrows(), b.ncols());
    for i in 0..a.nrows() {
        for j in 0..b.ncols() {
            let mut s = 0.0;
            for k in 0..a.ncols() {
                s += a[(i, k)] * b[(k, j)];
            }
            c[(i, j)] = s;
        }
    }
    c
}

/// Solves `A·X = B` by Gaussian elimination with partial pivoting.
pub fn gaussian_solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n {
        return Err(contract("oracle system has inconsistent shape"));
    }
    let m = b.ncols();
    let mut aug: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).map(|j| a[(i, j)]).collect();
            row.extend((0..m).map(|j| b[(i, j)]));
            row
        })
        .collect();
    let scale = aug
        .iter()
        .flat_map(|r| r[..n].iter())
        .fold(0.0_f64, |acc, v| acc.max(v.abs()));
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| aug[x][col].abs().total_cmp(&aug[y][col].abs()))
            .unwrap();
        if aug[pivot][col].abs() <= 1e-14 * scale {
            return Err(EditError::Singular {
                condition: f64::INFINITY,
            });
        }
        aug.swap(col, pivot);
        for row in (col + 1)..n {
            let factor = aug[row][col] / aug[col][col];
            if factor != 0.0 {
                for k in col..(n + m) {
                    aug[row][k] -= factor * aug[col][k];
                }
            }
        }
    }
    let mut x = Matrix::zeros(n, m);
    for j in 0..m {
        for i in (0..n).rev() {
            let mut s = aug[i][n + j];
            for k in (i + 1)..n {
                s -= aug[i][k] * x[(k, j)];
            }
            x[(i, j)] = s / aug[i][i];
        }
    }
    Ok(x)
}

/// Minimizer of `‖(W+Δ)K₁ − V₁‖² + λ₁‖(W+Δ)K₀ − V₀‖²` from its stationarity
/// system `Δ·(λ₁K₀K₀ᵀ + K₁K₁ᵀ) = R·K₁ᵀ`, assuming `W·K₀ = V₀`.
pub fn oracle_solve(
    mem: &LinearMemory,
    kb: &KnowledgeBase,
    req: &EditRequest,
    lambda1: f64,
) -> Result<Matrix> {
    let d = mem.d_in();
    if d > ORACLE_MAX_DIM {
        return Err(contract(format!("oracle limited to d_in <= {ORACLE_MAX_DIM}")));
    }
    if kb.d_in() != d || req.keys().nrows() != d || req.targets().nrows() != mem.d_out() {
        return Err(contract("oracle inputs have inconsistent dimensions"));
    }
    let k0 = kb.k0();
    let k1 = req.keys();
    let mut g = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let mut base = 0.0;
            for c in 0..k0.ncols() {
                base += k0[(i, c)] * k0[(j, c)];
            }
            let mut new = 0.0;
            for c in 0..k1.ncols() {
                new += k1[(i, c)] * k1[(j, c)];
            }
            g[(i, j)] = lambda1 * base + new;
        }
    }
    let r = req.targets() - naive_matmul(mem.weights(), k1);
    let rhs = naive_matmul(&r, &k1.transpose());
    // Δ·G = RHS  <=>  Gᵀ·Δᵀ = RHSᵀ
    let xt = gaussian_solve(&g.transpose(), &rhs.transpose())?;
    Ok(xt.transpose())
}

/// `‖(W+Δ)K₁ − V₁‖_F² + λ₁‖(W+Δ)K₀ − V₀‖_F²`.
///
/// With a projector the update is evaluated as `Δ·P`, which is how the
/// null-space objective parameterizes feasible updates.
pub fn objective_value(
    mem: &LinearMemory,
    delta: &Matrix,
    kb: &KnowledgeBase,
    req: &EditRequest,
    lambda1: f64,
    proj: Option<&Projector>,
) -> Result<f64> {
    if delta.shape() != mem.weights().shape() {
        return Err(contract("update and weights differ in shape"));
    }
    if kb.d_in() != mem.d_in() || kb.d_out() != mem.d_out() {
        return Err(contract("knowledge base does not match memory"));
    }
    if req.keys().nrows() != mem.d_in() || req.targets().nrows() != mem.d_out() {
        return Err(contract("request does not match memory"));
    }
    let effective = match proj {
        Some(p) => {
            if p.dim() != mem.d_in() {
                return Err(contract("projector does not match memory"));
            }
            delta * p.matrix()
        }
        None => delta.clone(),
    };
    let w = mem.weights() + effective;
    let edit = (&w * req.keys() - req.targets()).norm_squared();
    let keep = (&w * kb.k0() - kb.v0()).norm_squared();
    Ok(edit + lambda1 * keep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::editors::memit_update;
    use crate::memory::synth_knowledge;

    fn scalar(v: f64) -> Matrix {
        Matrix::from_element(1, 1, v)
    }

    #[test]
    fn scalar_oracle() {
        let kb = KnowledgeBase::new(scalar(1.0), scalar(0.0)).unwrap();
        let mem = LinearMemory::new(scalar(0.0));
        let req = EditRequest::new(1, scalar(1.0), scalar(1.0)).unwrap();
        assert!((oracle_solve(&mem, &kb, &req, 1.0).unwrap()[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn oracle_matches_production_small() {
        let (kb, mem) = synth_knowledge(12, 8, 8, 16, 1.0).unwrap();
        let (probe, _) = synth_knowledge(13, 8, 8, 2, 1.0).unwrap();
        let req = EditRequest::new(1, probe.k0().clone(), Matrix::from_fn(8, 2, |i, j| (i + j) as f64)).unwrap();
        let a = oracle_solve(&mem, &kb, &req, 3.0).unwrap();
        let b = memit_update(&mem, &kb, &req, 3.0, None).unwrap().delta;
        assert!((&a - &b).norm() <= 1e-8 * a.norm());
    }

    #[test]
    fn heavy_regularization_kills_update() {
        let (kb, mem) = synth_knowledge(2, 6, 3, 12, 1.0).unwrap();
        let (probe, _) = synth_knowledge(3, 6, 3, 1, 1.0).unwrap();
        let req = EditRequest::new(1, probe.k0().clone(), Matrix::from_element(3, 1, 1.0)).unwrap();
        let small = oracle_solve(&mem, &kb, &req, 1.0).unwrap().norm();
        let big = oracle_solve(&mem, &kb, &req, 1e9).unwrap().norm();
        assert!(big < 1e-6 * small);
    }

    #[test]
    fn singular_oracle_system() {
        let a = Matrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 4.0]);
        assert!(gaussian_solve(&a, &Matrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn objective_at_zero_is_residual_energy() {
        let (kb, mem) = synth_knowledge(5, 6, 4, 10, 1.0).unwrap();
        let req = EditRequest::new(1, Matrix::from_element(6, 1, 0.5), Matrix::from_element(4, 1, 1.0)).unwrap();
        let r = crate::memory::residual(&mem, &req).unwrap();
        let v = objective_value(&mem, &Matrix::zeros(4, 6), &kb, &req, 100.0, None).unwrap();
        assert!((v - r.norm_squared()).abs() <= 1e-10 * r.norm_squared());
    }

    #[test]
    fn perfect_edit_has_zero_objective() {
        // K₀ spans e₁, the edit key is e₂: Δ = r·e₂ᵀ fixes the edit and leaves K₀ alone.
        let k0 = Matrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let mem = LinearMemory::new(Matrix::from_row_slice(1, 2, &[2.0, -1.0]));
        let kb = KnowledgeBase::new(k0.clone(), mem.weights() * &k0).unwrap();
        let req = EditRequest::new(1, Matrix::from_column_slice(2, 1, &[0.0, 1.0]), scalar(3.0)).unwrap();
        let delta = Matrix::from_row_slice(1, 2, &[0.0, 4.0]);
        assert!(objective_value(&mem, &delta, &kb, &req, 50.0, None).unwrap() < 1e-24);
    }
}
