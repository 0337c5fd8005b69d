//! Empirical check that history-aware MEMIT accumulates a smaller total
//! perturbation than the history-agnostic rule on non-conflicting streams.

use serde::Serialize;

use super::{run_on_stream, EditTrace, ExperimentConfig};
use crate::editors::MethodKind;
use crate::error::Result;
use crate::memory::{generate_edit_stream, stream_digest, synth_knowledge};

/// Required absolute margin for the strict inequality.
pub const STRICTNESS_MARGIN: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedStatus {
    Pass,
    Fail,
    /// A run violated the non-conflict gate (or aborted); not counted.
    Inconclusive,
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub status: SeedStatus,
    pub nonconflict_agnostic: bool,
    pub nonconflict_aware: bool,
    pub min_offdiag_agnostic: f64,
    pub min_offdiag_aware: f64,
    /// `min_{T′∈[2,T]} (‖ΣΔ^A‖ − ‖ΣΔ^B‖)`.
    pub min_margin: f64,
    /// Margin at `T′ = T`.
    pub final_margin: f64,
    pub final_cum_agnostic: f64,
    pub final_cum_aware: f64,
    /// Steps `t ≥ 2` where `Σ_{s<t}⟨Δ_t^B,Δ_s^B⟩ ≤ Σ_{s<t}⟨Δ_t^A,Δ_s^A⟩`.
    pub sketch_steps_holding: usize,
    pub sketch_steps_total: usize,
    pub stream_digest: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Theorem1Report {
    pub seeds: Vec<SeedOutcome>,
    pub conclusive: usize,
    pub passed: usize,
    /// Fraction of seeds where both runs satisfied non-conflict.
    pub nonconflict_fraction: f64,
}

impl Theorem1Report {
    /// Every conclusive seed satisfied the strict inequality.
    pub fn all_conclusive_pass(&self) -> bool {
        self.passed == self.conclusive
    }
}

fn compare(seed: u64, a: &EditTrace, b: &EditTrace) -> SeedOutcome {
    let gate = |t: &EditTrace| {
        t.interference
            .as_ref()
            .map_or((false, f64::NAN), |r| (r.nonconflict, r.min_offdiag))
    };
    let (nc_a, min_a) = gate(a);
    let (nc_b, min_b) = gate(b);
    let steps = a.completed_steps().min(b.completed_steps());

    let mut min_margin = f64::INFINITY;
    for t in 2..=steps {
        min_margin = min_margin.min(a.cum_norm_series[t - 1] - b.cum_norm_series[t - 1]);
    }
    let final_margin = if steps >= 1 {
        a.cum_norm_series[steps - 1] - b.cum_norm_series[steps - 1]
    } else {
        f64::NAN
    };
    let sketch_total = steps.saturating_sub(1);
    let sketch_holding = (2..=steps)
        .filter(|&t| {
            let pa = a.past_interference_series[t - 1];
            let pb = b.past_interference_series[t - 1];
            pb <= pa + STRICTNESS_MARGIN
        })
        .count();

    let aborted = a.aborted_at.is_some() || b.aborted_at.is_some();
    let status = if aborted || !(nc_a && nc_b) || steps < 2 {
        SeedStatus::Inconclusive
    } else if min_margin > STRICTNESS_MARGIN {
        SeedStatus::Pass
    } else {
        SeedStatus::Fail
    };
    SeedOutcome {
        seed,
        status,
        nonconflict_agnostic: nc_a,
        nonconflict_aware: nc_b,
        min_offdiag_agnostic: min_a,
        min_offdiag_aware: min_b,
        min_margin,
        final_margin,
        final_cum_agnostic: a.cum_norm_series.last().copied().unwrap_or(0.0),
        final_cum_aware: b.cum_norm_series.last().copied().unwrap_or(0.0),
        sketch_steps_holding: sketch_holding,
        sketch_steps_total: sketch_total,
        stream_digest: a.stream_digest.clone(),
    }
}

/// Runs history-agnostic and history-aware MEMIT on identical streams for
/// each seed and compares their cumulative perturbation at every prefix.
///
/// `base.method.kind` is ignored; λ₁ and everything else is shared.
pub fn verify_theorem1(base: &ExperimentConfig, seeds: &[u64]) -> Result<Theorem1Report> {
    base.validate()?;
    let mut outcomes = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut cfg = base.clone();
        cfg.stream.seed = seed;
        cfg.store_deltas = true;
        let (kb, mem) = synth_knowledge(
            seed,
            cfg.dims.d_in,
            cfg.dims.d_out,
            cfg.dims.n0,
            cfg.stream.key_scale,
        )?;
        let stream = generate_edit_stream(&cfg.stream, &kb, &mem)?;
        let digest = stream_digest(&stream);

        let mut cfg_a = cfg.clone();
        cfg_a.method.kind = MethodKind::Memit;
        let mut cfg_b = cfg;
        cfg_b.method.kind = MethodKind::MemitH;
        let a = run_on_stream(&cfg_a, &kb, &mem, &stream)?;
        let b = run_on_stream(&cfg_b, &kb, &mem, &stream)?;
        assert_eq!(a.stream_digest, digest);
        assert_eq!(b.stream_digest, digest);
        outcomes.push(compare(seed, &a, &b));
    }
    let conclusive = outcomes
        .iter()
        .filter(|o| o.status != SeedStatus::Inconclusive)
        .count();
    let passed = outcomes.iter().filter(|o| o.status == SeedStatus::Pass).count();
    let both_nc = outcomes
        .iter()
        .filter(|o| o.nonconflict_agnostic && o.nonconflict_aware)
        .count();
    Ok(Theorem1Report {
        nonconflict_fraction: if outcomes.is_empty() {
            0.0
        } else {
            both_nc as f64 / outcomes.len() as f64
        },
        seeds: outcomes,
        conclusive,
        passed,
    })
}
