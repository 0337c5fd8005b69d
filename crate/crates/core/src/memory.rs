//! Synthetic pre-trained knowledge and edit streams.
//!
//! A [`LinearMemory`] `W` stores key/value associations `W·k ≈ v`. The
//! pre-trained associations `(K₀, V₀)` live in a [`KnowledgeBase`] and hold
//! exactly at construction time. Edit streams are sequences of
//! [`EditRequest`]s whose targets deviate from what `W` currently returns.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config, contract, Result};
use crate::linalg::{gram, Matrix};

const KNOWLEDGE_STREAM: u64 = 0;
const EDIT_STREAM: u64 = 1;
const KEY_DIRECTION_STREAM: u64 = 2;
const RANDOM_POOL_STREAM: u64 = 3;

/// Fraction of `T` used as the size of the shared collision pool.
pub const COLLISION_POOL_FRACTION: f64 = 0.05;
/// Relative residual magnitudes are drawn uniformly from this band.
pub const RESIDUAL_BAND: (f64, f64) = (0.1, 0.5);

pub(crate) fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normal_vector(rng: &mut impl Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
}

fn unit_vector(rng: &mut impl Rng, n: usize) -> DVector<f64> {
    loop {
        let v = normal_vector(rng, n);
        let norm = v.norm();
        if norm > 1e-12 {
            return v / norm;
        }
    }
}

/// Pre-trained keys `K₀` (`d_in × n0`) and values `V₀` (`d_out × n0`).
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeBase {
    k0: Matrix,
    v0: Matrix,
    k0_gram: Matrix,
}

impl KnowledgeBase {
    pub fn new(k0: Matrix, v0: Matrix) -> Result<Self> {
        if k0.ncols() != v0.ncols() {
            return Err(contract(format!(
                "K0 has {} columns but V0 has {}",
                k0.ncols(),
                v0.ncols()
            )));
        }
        if k0.nrows() == 0 || v0.nrows() == 0 {
            return Err(contract("knowledge base needs d_in, d_out >= 1"));
        }
        if k0.column_iter().any(|c| c.norm() == 0.0) {
            return Err(contract("K0 has an all-zero column"));
        }
        let k0_gram = gram(&k0);
        Ok(Self { k0, v0, k0_gram })
    }

    pub fn k0(&self) -> &Matrix {
        &self.k0
    }

    pub fn v0(&self) -> &Matrix {
        &self.v0
    }

    /// `K₀·K₀ᵀ`, cached at construction.
    pub fn k0_gram(&self) -> &Matrix {
        &self.k0_gram
    }

    pub fn d_in(&self) -> usize {
        self.k0.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.v0.nrows()
    }

    pub fn n0(&self) -> usize {
        self.k0.ncols()
    }

    /// Splits off the trailing `fraction` of columns as a held-out set.
    ///
    /// Returns `(protected, held_out)`; the held-out part is `None` when it
    /// would be empty. The protected part always keeps at least one column.
    pub fn split_holdout(&self, fraction: f64) -> Result<(KnowledgeBase, Option<KnowledgeBase>)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(config(format!("holdout fraction {fraction} not in [0, 1)")));
        }
        let n0 = self.n0();
        let held = ((n0 as f64) * fraction).round() as usize;
        let held = held.min(n0 - 1);
        if held == 0 {
            return Ok((self.clone(), None));
        }
        let keep = n0 - held;
        let protected = KnowledgeBase::new(
            self.k0.columns(0, keep).into_owned(),
            self.v0.columns(0, keep).into_owned(),
        )?;
        let rest = KnowledgeBase::new(
            self.k0.columns(keep, held).into_owned(),
            self.v0.columns(keep, held).into_owned(),
        )?;
        Ok((protected, Some(rest)))
    }
}

/// The editable weight matrix `W` (`d_out × d_in`).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMemory {
    weights: Matrix,
}

impl LinearMemory {
    pub fn new(weights: Matrix) -> Self {
        Self { weights }
    }

    pub fn weights(&self) -> &Matrix {
        &self.weights
    }

    pub fn d_in(&self) -> usize {
        self.weights.ncols()
    }

    pub fn d_out(&self) -> usize {
        self.weights.nrows()
    }

    /// SHA-256 over the little-endian bytes of the weights (column-major).
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.d_out() as u64).to_le_bytes());
        h.update((self.d_in() as u64).to_le_bytes());
        for v in self.weights.iter() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// One editing step: keys `K_t` (`d_in × m`) and targets `V_t` (`d_out × m`).
#[derive(Debug, Clone, PartialEq)]
pub struct EditRequest {
    step_index: usize,
    keys: Matrix,
    targets: Matrix,
}

impl EditRequest {
    pub fn new(step_index: usize, keys: Matrix, targets: Matrix) -> Result<Self> {
        if step_index == 0 {
            return Err(contract("edit steps are numbered from 1"));
        }
        if keys.ncols() == 0 {
            return Err(contract("an edit needs at least one key column"));
        }
        if keys.ncols() != targets.ncols() {
            return Err(contract(format!(
                "{} keys but {} targets",
                keys.ncols(),
                targets.ncols()
            )));
        }
        if keys.column_iter().any(|c| c.norm() == 0.0) {
            return Err(contract("edit key with zero norm"));
        }
        Ok(Self {
            step_index,
            keys,
            targets,
        })
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub fn keys(&self) -> &Matrix {
        &self.keys
    }

    pub fn targets(&self) -> &Matrix {
        &self.targets
    }

    pub fn batch_size(&self) -> usize {
        self.keys.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConflictMode {
    /// Residuals share a half-space and keys share a common direction.
    Aligned,
    /// Isotropic residual perturbations and isotropic keys.
    Independent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    pub seed: u64,
    pub num_edits: usize,
    pub batch_size: usize,
    pub collision_rate: f64,
    pub conflict_mode: ConflictMode,
    pub key_scale: f64,
    /// Squared cosine between a key and the run's shared key direction, used
    /// only in aligned mode.
    pub key_coherence: f64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_edits: 100,
            batch_size: 1,
            collision_rate: 0.0,
            conflict_mode: ConflictMode::Aligned,
            key_scale: 1.0,
            key_coherence: 0.75,
        }
    }
}

impl StreamConfig {
    /// Returns the offending field name and reason on failure.
    pub fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.batch_size == 0 {
            return Err(("batch_size", "must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.collision_rate) {
            return Err(("collision_rate", "must lie in [0, 1]".into()));
        }
        if !(self.key_scale.is_finite() && self.key_scale > 0.0) {
            return Err(("key_scale", "must be a positive finite number".into()));
        }
        if !(0.0..1.0).contains(&self.key_coherence) {
            return Err(("key_coherence", "must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.check()
            .map_err(|(field, msg)| config(format!("stream.{field}: {msg}")))
    }

    /// Number of shared columns in the collision pool, `⌈0.05·T⌉`.
    pub fn pool_size(&self) -> usize {
        ((self.num_edits as f64) * COLLISION_POOL_FRACTION).ceil() as usize
    }
}

/// Distribution of fresh edit keys for one run.
#[derive(Debug, Clone)]
pub struct KeyDistribution {
    d_in: usize,
    scale: f64,
    shared: Option<(DVector<f64>, f64)>,
}

impl KeyDistribution {
    pub fn for_stream(cfg: &StreamConfig, d_in: usize) -> Self {
        let shared = match cfg.conflict_mode {
            ConflictMode::Aligned if cfg.key_coherence > 0.0 => {
                let mut rng = rng_for(cfg.seed, KEY_DIRECTION_STREAM);
                Some((unit_vector(&mut rng, d_in), cfg.key_coherence))
            }
            _ => None,
        };
        Self {
            d_in,
            scale: cfg.key_scale,
            shared,
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> DVector<f64> {
        let g = unit_vector(rng, self.d_in);
        let dir = match &self.shared {
            Some((e, c)) => {
                let v = e * c.sqrt() + g * (1.0 - c).sqrt();
                let n = v.norm();
                v / n
            }
            None => g,
        };
        dir * self.scale
    }
}

/// Builds `W`, `K₀` and `V₀ = W·K₀` from a seed.
pub fn synth_knowledge(
    seed: u64,
    d_in: usize,
    d_out: usize,
    n0: usize,
    key_scale: f64,
) -> Result<(KnowledgeBase, LinearMemory)> {
    if d_in == 0 || d_out == 0 || n0 == 0 {
        return Err(config(format!(
            "dimensions must be >= 1 (d_in={d_in}, d_out={d_out}, n0={n0})"
        )));
    }
    if !(key_scale.is_finite() && key_scale > 0.0) {
        return Err(config(format!("key_scale must be positive, got {key_scale}")));
    }
    let mut rng = rng_for(seed, KNOWLEDGE_STREAM);
    let inv_sqrt = 1.0 / (d_in as f64).sqrt();
    let w = Matrix::from_fn(d_out, d_in, |_, _| rng.sample::<f64, _>(StandardNormal) * inv_sqrt);
    let mut k0 = Matrix::zeros(d_in, n0);
    for j in 0..n0 {
        k0.set_column(j, &(unit_vector(&mut rng, d_in) * key_scale));
    }
    let v0 = &w * &k0;
    Ok((KnowledgeBase::new(k0, v0)?, LinearMemory::new(w)))
}

/// Generates `cfg.num_edits` requests against the initial memory.
pub fn generate_edit_stream(
    cfg: &StreamConfig,
    kb: &KnowledgeBase,
    mem: &LinearMemory,
) -> Result<Vec<EditRequest>> {
    cfg.validate()?;
    if kb.d_in() != mem.d_in() || kb.d_out() != mem.d_out() {
        return Err(contract("knowledge base and memory dimensions differ"));
    }
    if cfg.num_edits == 0 {
        return Ok(Vec::new());
    }
    let d_in = mem.d_in();
    let d_out = mem.d_out();
    let keys_dist = KeyDistribution::for_stream(cfg, d_in);
    let mut rng = rng_for(cfg.seed, EDIT_STREAM);

    let pool: Vec<DVector<f64>> = if cfg.collision_rate > 0.0 {
        (0..cfg.pool_size()).map(|_| keys_dist.sample(&mut rng)).collect()
    } else {
        Vec::new()
    };
    let shared_u = match cfg.conflict_mode {
        ConflictMode::Aligned => Some(unit_vector(&mut rng, d_out)),
        ConflictMode::Independent => None,
    };

    let w = mem.weights();
    let mut out = Vec::with_capacity(cfg.num_edits);
    for t in 1..=cfg.num_edits {
        let mut keys = Matrix::zeros(d_in, cfg.batch_size);
        let mut targets = Matrix::zeros(d_out, cfg.batch_size);
        for j in 0..cfg.batch_size {
            let collide = !pool.is_empty() && rng.random::<f64>() < cfg.collision_rate;
            let k = if collide {
                pool[rng.random_range(0..pool.len())].clone()
            } else {
                keys_dist.sample(&mut rng)
            };
            let wk = w * &k;
            let scale = wk.norm();
            let coef = rng.random_range(RESIDUAL_BAND.0..=RESIDUAL_BAND.1);
            let offset = match &shared_u {
                Some(u) => u * (coef * scale),
                None => unit_vector(&mut rng, d_out) * (coef * scale),
            };
            keys.set_column(j, &k);
            targets.set_column(j, &(wk + offset));
        }
        out.push(EditRequest::new(t, keys, targets)?);
    }
    Ok(out)
}

/// Draws `count` keys from the stream's key distribution on an RNG stream
/// independent of the edit stream (the random-history pool of MEMIT-R).
pub fn random_key_pool(cfg: &StreamConfig, d_in: usize, count: usize) -> Matrix {
    let dist = KeyDistribution::for_stream(cfg, d_in);
    let mut rng = rng_for(cfg.seed, RANDOM_POOL_STREAM);
    let mut pool = Matrix::zeros(d_in, count);
    for j in 0..count {
        pool.set_column(j, &dist.sample(&mut rng));
    }
    pool
}

/// SHA-256 over every key and target of a stream.
pub fn stream_digest(stream: &[EditRequest]) -> String {
    let mut h = Sha256::new();
    for req in stream {
        h.update((req.step_index as u64).to_le_bytes());
        for v in req.keys.iter().chain(req.targets.iter()) {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// `R_t = V_t − W·K_t`.
pub fn residual(mem: &LinearMemory, req: &EditRequest) -> Result<Matrix> {
    if req.keys.nrows() != mem.d_in() || req.targets.nrows() != mem.d_out() {
        return Err(contract(format!(
            "request is ({}→{}) but memory is ({}→{})",
            req.keys.nrows(),
            req.targets.nrows(),
            mem.d_in(),
            mem.d_out()
        )));
    }
    Ok(&req.targets - mem.weights() * &req.keys)
}
