//! Sequential editing runs, verification against oracles, and sweeps.

mod oracle;
pub mod suites;
mod theorem;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use oracle::{gaussian_solve, naive_matmul, objective_value, oracle_solve};
pub use theorem::{verify_theorem1, SeedOutcome, SeedStatus, Theorem1Report, STRICTNESS_MARGIN};

use crate::editors::{
    alphaedit_update, apply_update, betaedit_update, memit_update, rect_sparsify, MethodKind,
    MethodSpec, UpdateResult,
};
use crate::error::{config, EditError, Result};
use crate::linalg::{frobenius_inner, symmetrize, Matrix};
use crate::memory::{
    generate_edit_stream, random_key_pool, residual, stream_digest, synth_knowledge, EditRequest,
    KnowledgeBase, LinearMemory, StreamConfig,
};
use crate::metrics::{
    edit_efficacy, knowledge_leakage, pairwise_interference, InterferenceReport, StepRecord,
    DEFAULT_EFFICACY_TOL,
};
use crate::projector::{
    build_projector, epsilon_for_fraction, gram_init, refresh_due, GramAccumulator,
    GramNormalization, Projector,
};

/// Share of `K₀` columns held out from every protected Gram when
/// `holdout = true`.
pub const HOLDOUT_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Dims {
    pub d_in: usize,
    pub d_out: usize,
    pub n0: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            d_in: 64,
            d_out: 32,
            n0: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub stream: StreamConfig,
    pub method: MethodSpec,
    pub dims: Dims,
    pub metrics_every: usize,
    pub holdout: bool,
    pub efficacy_tol: f64,
    pub gram_normalize: GramNormalization,
    /// Keep every `Δ_t` so the full interference Gram can be reported.
    pub store_deltas: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            stream: StreamConfig::default(),
            method: MethodSpec::default(),
            dims: Dims::default(),
            metrics_every: 10,
            holdout: false,
            efficacy_tol: DEFAULT_EFFICACY_TOL,
            gram_normalize: GramNormalization::Raw,
            store_deltas: false,
        }
    }
}

impl ExperimentConfig {
    /// Returns the dotted path of the first invalid field and the reason.
    pub fn check(&self) -> std::result::Result<(), (String, String)> {
        self.stream
            .check()
            .map_err(|(f, m)| (format!("stream.{f}"), m))?;
        self.method
            .check()
            .map_err(|(f, m)| (format!("method.{f}"), m))?;
        for (name, v) in [
            ("d_in", self.dims.d_in),
            ("d_out", self.dims.d_out),
            ("n0", self.dims.n0),
        ] {
            if v == 0 {
                return Err((format!("dims.{name}"), "must be >= 1".into()));
            }
        }
        if self.metrics_every == 0 {
            return Err(("metrics_every".into(), "must be >= 1".into()));
        }
        if !(self.efficacy_tol.is_finite() && self.efficacy_tol > 0.0) {
            return Err(("efficacy_tol".into(), "must be > 0".into()));
        }
        if self.holdout && self.dims.n0 < 2 {
            return Err(("holdout".into(), "needs n0 >= 2".into()));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check()
            .map_err(|(path, msg)| config(format!("{path}: {msg}")))
    }
}

/// Everything a finished (or aborted) run produced.
#[derive(Debug, Clone)]
pub struct EditTrace {
    pub config: ExperimentConfig,
    pub records: Vec<StepRecord>,
    pub final_weights_digest: String,
    pub final_memory: LinearMemory,
    /// Full interference Gram, only when `store_deltas` is set.
    pub interference: Option<InterferenceReport>,
    /// Step whose editor failed with a singular system.
    pub aborted_at: Option<usize>,
    pub stream_digest: String,
    /// Threshold actually used for projector builds.
    pub epsilon_used: f64,
    pub refresh_steps: Vec<usize>,
    /// `‖Σ_{s≤t} Δ_s‖_F` for every completed step.
    pub cum_norm_series: Vec<f64>,
    /// `‖Δ_t‖_F` for every completed step.
    pub delta_norm_series: Vec<f64>,
    /// `Σ_{s<t} ⟨Δ_t, Δ_s⟩_F` for every completed step.
    pub past_interference_series: Vec<f64>,
}

impl EditTrace {
    pub fn last(&self) -> Option<&StepRecord> {
        self.records.last()
    }

    pub fn completed_steps(&self) -> usize {
        self.cum_norm_series.len()
    }
}

/// Synthesizes knowledge, generates the stream and runs it.
pub fn run_sequence(cfg: &ExperimentConfig) -> Result<EditTrace> {
    cfg.validate()?;
    let (kb, mem) = synth_knowledge(
        cfg.stream.seed,
        cfg.dims.d_in,
        cfg.dims.d_out,
        cfg.dims.n0,
        cfg.stream.key_scale,
    )?;
    let stream = generate_edit_stream(&cfg.stream, &kb, &mem)?;
    run_on_stream(cfg, &kb, &mem, &stream)
}

enum Protection {
    None,
    /// Running `Σ K_i·K_iᵀ` of the real edit history.
    History(GramAccumulator),
    /// Running Gram of the random stand-in keys.
    RandomHistory { pool: Matrix, gram: Matrix, used: usize },
    Projected {
        proj: Projector,
        history: Option<GramAccumulator>,
        base_penalty: Option<Matrix>,
    },
    Beta { proj: Projector, gram: GramAccumulator },
}

/// Runs `cfg.method` over an explicit stream against `kb` and `mem0`.
///
/// `cfg.stream` only matters for MEMIT-R (its random key pool); dimensions
/// are taken from the inputs.
pub fn run_on_stream(
    cfg: &ExperimentConfig,
    kb: &KnowledgeBase,
    mem0: &LinearMemory,
    stream: &[EditRequest],
) -> Result<EditTrace> {
    cfg.method.validate()?;
    if cfg.metrics_every == 0 {
        return Err(config("metrics_every: must be >= 1"));
    }
    if kb.d_in() != mem0.d_in() || kb.d_out() != mem0.d_out() {
        return Err(EditError::Contract("knowledge base and memory dimensions differ".into()));
    }
    let (protected, held_out) = if cfg.holdout {
        kb.split_holdout(HOLDOUT_FRACTION)?
    } else {
        (kb.clone(), None)
    };
    let method = &cfg.method;
    let d_in = mem0.d_in();
    let d_out = mem0.d_out();
    let total = stream.len();

    let threshold_scale = |gram: &Matrix, columns: usize| match cfg.gram_normalize {
        GramNormalization::Raw => gram.clone(),
        GramNormalization::ByColumns => gram / columns.max(1) as f64,
    };

    let mut epsilon_used = method.epsilon;
    let mut protection = match method.kind {
        MethodKind::Memit => Protection::None,
        MethodKind::MemitH => Protection::History(gram_init(&protected, 0.0)?),
        MethodKind::MemitR => {
            let m = stream.first().map_or(1, |r| r.batch_size());
            let need = total.saturating_sub(1) * m;
            Protection::RandomHistory {
                pool: random_key_pool(&cfg.stream, d_in, need),
                gram: Matrix::zeros(d_in, d_in),
                used: 0,
            }
        }
        MethodKind::AlphaEdit | MethodKind::AlphaEditH => {
            let c = threshold_scale(protected.k0_gram(), protected.n0());
            if let Some(f) = method.epsilon_fraction {
                epsilon_used = epsilon_for_fraction(&c, f)?;
            }
            let proj = build_projector(&c, epsilon_used, 1)?;
            let (history, base_penalty) = if method.kind == MethodKind::AlphaEditH {
                let penalty = method
                    .alpha_h_base_penalty
                    .then(|| symmetrize(&(protected.k0_gram() * method.lambda1)));
                (Some(gram_init(&protected, 0.0)?), penalty)
            } else {
                (None, None)
            };
            Protection::Projected {
                proj,
                history,
                base_penalty,
            }
        }
        MethodKind::BetaEdit => {
            let gram = gram_init(&protected, method.lambda1)?;
            let c = gram.for_threshold(cfg.gram_normalize);
            // A zero Gram (λ₁ = 0) has no spectrum to split; keep the absolute ε.
            if let (Some(f), false) = (method.epsilon_fraction, c.iter().all(|&x| x == 0.0)) {
                epsilon_used = epsilon_for_fraction(&c, f)?;
            }
            Protection::Beta {
                proj: Projector::identity(d_in),
                gram,
            }
        }
    };

    let w0 = mem0.weights().clone();
    let mut mem = mem0.clone();
    let mut cum = Matrix::zeros(d_out, d_in);
    let mut records = Vec::new();
    let mut deltas = Vec::new();
    let mut refresh_steps = Vec::new();
    let mut refreshed_since_record = false;
    let mut aborted_at = None;
    let mut cum_norm_series = Vec::with_capacity(total);
    let mut delta_norm_series = Vec::with_capacity(total);
    let mut past_interference_series = Vec::with_capacity(total);

    for (i, req) in stream.iter().enumerate() {
        let t = i + 1;
        let residual_norm = residual(&mem, req)?.norm();

        if let Protection::Beta { proj, gram } = &mut protection {
            debug_assert_eq!(gram.edits_absorbed(), t - 1);
            if refresh_due(t, method.tau)? {
                *proj = build_projector(&gram.for_threshold(cfg.gram_normalize), epsilon_used, t)?;
                refresh_steps.push(t);
                refreshed_since_record = true;
            }
        } else if t == 1 && matches!(protection, Protection::Projected { .. }) {
            refresh_steps.push(1);
            refreshed_since_record = true;
        }

        let update: Result<UpdateResult> = match &protection {
            Protection::None => memit_update(&mem, &protected, req, method.lambda1, None),
            Protection::History(acc) => {
                memit_update(&mem, &protected, req, method.lambda1, Some(acc.history()))
            }
            Protection::RandomHistory { gram, .. } => {
                memit_update(&mem, &protected, req, method.lambda1, Some(gram))
            }
            Protection::Projected {
                proj,
                history,
                base_penalty,
            } => match (history, base_penalty) {
                (Some(h), Some(b)) => {
                    let a = h.history() + b;
                    alphaedit_update(&mem, proj, req, method.lambda2, Some(&a))
                }
                (Some(h), None) => alphaedit_update(&mem, proj, req, method.lambda2, Some(h.history())),
                _ => alphaedit_update(&mem, proj, req, method.lambda2, None),
            },
            Protection::Beta { proj, gram } => betaedit_update(&mem, proj, gram, req, method.lambda2),
        };
        let update = match update {
            Ok(u) => u,
            Err(EditError::Singular { .. }) => {
                aborted_at = Some(t);
                break;
            }
            Err(e) => return Err(e),
        };

        let delta = match method.rect_keep_ratio {
            Some(r) => rect_sparsify(&update.delta, r)?,
            None => update.delta,
        };
        past_interference_series.push(frobenius_inner(&delta, &cum));
        delta_norm_series.push(delta.norm());
        mem = apply_update(&mem, &delta)?;
        cum += &delta;
        cum_norm_series.push(cum.norm());

        match &mut protection {
            Protection::History(acc) => acc.absorb(req.keys())?,
            Protection::Projected {
                history: Some(acc), ..
            } => acc.absorb(req.keys())?,
            Protection::Beta { gram, .. } => gram.absorb(req.keys())?,
            Protection::RandomHistory { pool, gram, used } => {
                let m = req.batch_size();
                let take = m.min(pool.ncols() - *used);
                if take > 0 {
                    let keys = pool.columns(*used, take);
                    *gram += &keys * keys.transpose();
                    *gram = symmetrize(gram);
                    *used += take;
                }
            }
            _ => {}
        }

        if t % cfg.metrics_every == 0 || t == total {
            let leakage = knowledge_leakage(&w0, &cum, &protected)?;
            let specificity = match &held_out {
                Some(h) => knowledge_leakage(&w0, &cum, h)?,
                None => leakage,
            };
            records.push(StepRecord {
                step: t,
                method: method.kind,
                delta_norm: *delta_norm_series.last().unwrap(),
                cum_delta_norm: *cum_norm_series.last().unwrap(),
                leakage,
                efficacy_proxy: edit_efficacy(&mem, &stream[..t], cfg.efficacy_tol)?,
                residual_norm,
                refresh_event: refreshed_since_record,
                specificity,
            });
            refreshed_since_record = false;
        }
        if cfg.store_deltas {
            deltas.push(delta);
        }
    }

    let interference = if cfg.store_deltas && deltas.len() >= 2 {
        Some(pairwise_interference(&deltas)?)
    } else {
        None
    };

    Ok(EditTrace {
        config: cfg.clone(),
        records,
        final_weights_digest: mem.digest(),
        final_memory: mem,
        interference,
        aborted_at,
        stream_digest: stream_digest(stream),
        epsilon_used,
        refresh_steps,
        cum_norm_series,
        delta_norm_series,
        past_interference_series,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Lambda1,
    Tau,
    KeepRatio,
}

impl std::str::FromStr for SweepParam {
    type Err = EditError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lambda1" => Ok(SweepParam::Lambda1),
            "tau" => Ok(SweepParam::Tau),
            "keep_ratio" | "rect_keep_ratio" => Ok(SweepParam::KeepRatio),
            other => Err(config(format!(
                "unknown sweep parameter '{other}' (expected lambda1, tau or keep_ratio)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepSummary {
    pub final_efficacy: f64,
    pub final_leakage: f64,
    pub final_cum_norm: f64,
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub value: f64,
    pub summary: SweepSummary,
    pub trace: EditTrace,
}

/// Applies one sweep value to a copy of `base`.
pub fn with_param(base: &ExperimentConfig, param: SweepParam, value: f64) -> Result<ExperimentConfig> {
    let mut cfg = base.clone();
    match param {
        SweepParam::Lambda1 => cfg.method.lambda1 = value,
        SweepParam::Tau => {
            if !(value >= 1.0 && value.fract() == 0.0) {
                return Err(config(format!("tau must be a positive integer, got {value}")));
            }
            cfg.method.tau = value as usize;
        }
        SweepParam::KeepRatio => cfg.method.rect_keep_ratio = Some(value),
    }
    cfg.validate()?;
    Ok(cfg)
}

fn summarize(trace: &EditTrace) -> SweepSummary {
    match trace.last() {
        Some(r) => SweepSummary {
            final_efficacy: r.efficacy_proxy,
            final_leakage: r.leakage,
            final_cum_norm: r.cum_delta_norm,
        },
        None => SweepSummary {
            final_efficacy: f64::NAN,
            final_leakage: 0.0,
            final_cum_norm: 0.0,
        },
    }
}

/// One run per value on the shared seed; rows keep the input order.
///
/// Runs execute on the current rayon pool.
pub fn sweep(base: &ExperimentConfig, param: SweepParam, values: &[f64]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(config("sweep needs at least one value"));
    }
    let configs = values
        .iter()
        .map(|&v| with_param(base, param, v))
        .collect::<Result<Vec<_>>>()?;
    configs
        .par_iter()
        .zip(values.par_iter())
        .map(|(cfg, &value)| {
            let trace = run_sequence(cfg)?;
            Ok(SweepRow {
                value,
                summary: summarize(&trace),
                trace,
            })
        })
        .collect()
}
