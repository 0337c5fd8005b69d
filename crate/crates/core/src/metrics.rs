//! Leakage, perturbation and interference measurements.

use serde::Serialize;

use crate::editors::MethodKind;
use crate::error::{config, contract, Result};
use crate::linalg::{frobenius_inner, Matrix};
use crate::memory::{EditRequest, KnowledgeBase, LinearMemory};

/// Default relative-residual tolerance of the efficacy proxy.
pub const DEFAULT_EFFICACY_TOL: f64 = 0.1;

/// Metrics captured at one recorded step of a sequential run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub method: MethodKind,
    /// `‖Δ_t‖_F`
    pub delta_norm: f64,
    /// `‖Σ_{s≤t} Δ_s‖_F`
    pub cum_delta_norm: f64,
    pub leakage: f64,
    pub efficacy_proxy: f64,
    /// `‖R_t‖_F` before the update.
    pub residual_norm: f64,
    /// The projector was rebuilt at some step since the previous record.
    pub refresh_event: bool,
    /// Leakage on held-out pre-trained columns; equals `leakage` when no
    /// columns are held out.
    pub specificity: f64,
}

/// Pairwise Frobenius inner products of a sequence of updates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InterferenceReport {
    /// `T × T`, entry `(i, j)` is `⟨Δ_i, Δ_j⟩_F`.
    #[serde(skip)]
    pub gram: Matrix,
    pub min_offdiag: f64,
    pub nonconflict: bool,
    pub tolerance: f64,
}

/// `‖(W₀ + ΣΔ)·K₀ − V₀‖_F`.
pub fn knowledge_leakage(w0: &Matrix, cum_delta: &Matrix, kb: &KnowledgeBase) -> Result<f64> {
    if w0.shape() != cum_delta.shape() {
        return Err(contract("W0 and cumulative update differ in shape"));
    }
    if w0.ncols() != kb.d_in() || w0.nrows() != kb.d_out() {
        return Err(contract("weights do not match the knowledge base"));
    }
    Ok(((w0 + cum_delta) * kb.k0() - kb.v0()).norm())
}

/// `‖Σ_t Δ_t‖_F`.
pub fn cum_perturbation_norm(deltas: &[Matrix]) -> Result<f64> {
    let first = deltas
        .first()
        .ok_or_else(|| contract("cumulative norm of an empty sequence"))?;
    let mut sum = Matrix::zeros(first.nrows(), first.ncols());
    for d in deltas {
        if d.shape() != first.shape() {
            return Err(contract("updates differ in shape"));
        }
        sum += d;
    }
    Ok(sum.norm())
}

/// Non-conflict tolerance `1e-9 · maxᵢ ‖Δᵢ‖_F²`.
pub fn interference_tolerance(max_sq_norm: f64) -> f64 {
    1e-9 * max_sq_norm
}

pub fn pairwise_interference(deltas: &[Matrix]) -> Result<InterferenceReport> {
    if deltas.len() < 2 {
        return Err(contract("interference needs at least two updates"));
    }
    let shape = deltas[0].shape();
    if deltas.iter().any(|d| d.shape() != shape) {
        return Err(contract("updates differ in shape"));
    }
    let n = deltas.len();
    let mut gram = Matrix::zeros(n, n);
    for i in 0..n {
        for j in i..n {
            let v = frobenius_inner(&deltas[i], &deltas[j]);
            gram[(i, j)] = v;
            gram[(j, i)] = v;
        }
    }
    let max_sq = (0..n).map(|i| gram[(i, i)]).fold(0.0, f64::max);
    let mut min_offdiag = f64::INFINITY;
    for i in 0..n {
        for j in (i + 1)..n {
            min_offdiag = min_offdiag.min(gram[(i, j)]);
        }
    }
    let tolerance = interference_tolerance(max_sq);
    Ok(InterferenceReport {
        gram,
        min_offdiag,
        nonconflict: min_offdiag >= -tolerance,
        tolerance,
    })
}

/// Fraction of past edit columns whose relative residual
/// `‖W·k − v‖ / max(‖v‖, 1e-12)` is at most `rel_tol`.
pub fn edit_efficacy(mem: &LinearMemory, past_edits: &[EditRequest], rel_tol: f64) -> Result<f64> {
    if !(rel_tol > 0.0) {
        return Err(config(format!("rel_tol must be > 0, got {rel_tol}")));
    }
    if past_edits.is_empty() {
        return Err(contract("efficacy of an empty edit list"));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for req in past_edits {
        if req.keys().nrows() != mem.d_in() || req.targets().nrows() != mem.d_out() {
            return Err(contract("edit does not match memory dimensions"));
        }
        let out = mem.weights() * req.keys();
        for (o, v) in out.column_iter().zip(req.targets().column_iter()) {
            let rel = (o - v).norm() / v.norm().max(1e-12);
            if rel <= rel_tol {
                hits += 1;
            }
            total += 1;
        }
    }
    Ok(hits as f64 / total as f64)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rx = ranks(xs);
    let ry = ranks(ys);
    pearson(&rx, &ry)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut num, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        num += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    num / (va * vb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::synth_knowledge;

    fn scalar(v: f64) -> Matrix {
        Matrix::from_element(1, 1, v)
    }

    #[test]
    fn leakage_without_edit_is_zero() {
        let (kb, mem) = synth_knowledge(3, 8, 5, 20, 1.0).unwrap();
        let l = knowledge_leakage(mem.weights(), &Matrix::zeros(5, 8), &kb).unwrap();
        assert!(l <= 1e-10);
    }

    #[test]
    fn leakage_scalar() {
        let kb = KnowledgeBase::new(scalar(1.0), scalar(0.0)).unwrap();
        let l = knowledge_leakage(&scalar(0.0), &scalar(0.3), &kb).unwrap();
        assert!((l - 0.3).abs() < 1e-15);
    }

    #[test]
    fn leakage_shape_mismatch() {
        let kb = KnowledgeBase::new(scalar(1.0), scalar(0.0)).unwrap();
        assert!(knowledge_leakage(&scalar(0.0), &Matrix::zeros(2, 1), &kb).is_err());
    }

    #[test]
    fn cumulative_norm_cases() {
        let d = Matrix::from_row_slice(2, 2, &[1.0, 2.0, -3.0, 0.5]);
        assert!((cum_perturbation_norm(std::slice::from_ref(&d)).unwrap() - d.norm()).abs() < 1e-15);
        assert_eq!(cum_perturbation_norm(&[d.clone(), -&d]).unwrap(), 0.0);
        let e = Matrix::from_row_slice(2, 2, &[0.1, -4.0, 2.0, 1.0]);
        assert!(cum_perturbation_norm(&[d.clone(), e.clone()]).unwrap() <= d.norm() + e.norm());
        assert!(cum_perturbation_norm(&[]).is_err());
    }

    #[test]
    fn interference_orthogonal_and_scaled() {
        let a = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let b = Matrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 2.0]);
        let rep = pairwise_interference(&[a.clone(), b]).unwrap();
        assert_eq!(rep.gram[(0, 1)], 0.0);
        assert!(rep.nonconflict);

        let d = Matrix::from_row_slice(2, 2, &[1.0, -2.0, 0.5, 3.0]);
        let rep = pairwise_interference(&[d.clone(), &d * 2.0]).unwrap();
        assert!((rep.gram[(0, 1)] - 2.0 * d.norm_squared()).abs() < 1e-12);

        let rep = pairwise_interference(&[d.clone(), -&d]).unwrap();
        assert!(!rep.nonconflict);
        assert!(pairwise_interference(&[d]).is_err());
    }

    #[test]
    fn efficacy_cases() {
        let (_, mem) = synth_knowledge(4, 6, 4, 8, 1.0).unwrap();
        let keys = Matrix::from_fn(6, 3, |i, j| ((i + 1) * (j + 2)) as f64 * 0.1);
        let exact = EditRequest::new(1, keys.clone(), mem.weights() * &keys).unwrap();
        assert_eq!(edit_efficacy(&mem, &[exact], 0.1).unwrap(), 1.0);

        let wk = mem.weights() * &keys;
        let mut off = wk.clone();
        for mut c in off.column_iter_mut() {
            let n = c.norm();
            c[0] += 0.3 * n / 0.7;
        }
        let missed = EditRequest::new(1, keys, off).unwrap();
        assert_eq!(edit_efficacy(&mem, &[missed], 0.1).unwrap(), 0.0);
        assert!(edit_efficacy(&mem, &[], 0.1).is_err());
    }

    #[test]
    fn spearman_basics() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&x, &[10.0, 20.0, 30.0, 40.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &[4.0, 3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert!((spearman(&x, &[1.0, 1.0, 2.0, 2.0]) - 0.894_427_190_999_915_9).abs() < 1e-12);
    }
}
