//! Command implementations behind the `nulledit` binary.
//!
//! Every command returns an [`ExitStatus`]; the binary only parses flags
//! and maps the status to a process exit code.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use nulledit::harness::suites::{run_suite, Suite, VerifyReport};
use nulledit::harness::{run_sequence, sweep, EditTrace, ExperimentConfig, SweepParam, SweepRow};
use nulledit::EditError;
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const TRACE_HEADER: &str =
    "step,method,delta_norm,cum_delta_norm,leakage,efficacy_proxy,residual_norm,refresh_event";
pub const SWEEP_HEADER: &str = "value,final_efficacy,final_leakage,final_cum_norm";
pub const THREADS_ENV: &str = "NULLEDIT_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitStatus {
    Ok = 0,
    /// A verify suite ran but a required check failed.
    ChecksFailed = 1,
    Config = 2,
    Aborted = 3,
    Numerical = 4,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// `message` already names the line and column.
    #[error("{path}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid config: {field}: {message}")]
    Invalid { field: String, message: String },
    #[error(transparent)]
    Edit(#[from] EditError),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

impl CliError {
    pub fn status(&self) -> ExitStatus {
        match self {
            CliError::Parse { .. } | CliError::Invalid { .. } => ExitStatus::Config,
            CliError::Edit(EditError::Config(_)) => ExitStatus::Config,
            CliError::Edit(EditError::Singular { .. }) => ExitStatus::Aborted,
            CliError::Edit(_) | CliError::Io { .. } => ExitStatus::Numerical,
        }
    }
}

fn io_err(context: impl Into<String>) -> impl FnOnce(io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}

/// Parses a JSON config; absent keys take defaults, unknown keys are errors.
pub fn parse_config_str(text: &str, origin: &str) -> Result<ExperimentConfig, CliError> {
    let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| CliError::Parse {
        path: origin.to_string(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    cfg.check()
        .map_err(|(field, message)| CliError::Invalid { field, message })?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|source| CliError::Parse {
        path: path.display().to_string(),
        line: 0,
        column: 0,
        message: source.to_string(),
    })?;
    parse_config_str(&text, &path.display().to_string())
}

/// Compact JSON with every field spelled out, in declaration order.
pub fn canonical_config(cfg: &ExperimentConfig) -> String {
    serde_json::to_string(cfg).expect("config serializes")
}

pub fn config_hash(cfg: &ExperimentConfig) -> String {
    hex::encode(Sha256::digest(canonical_config(cfg).as_bytes()))
}

/// Command-line overrides applied after parsing and before validation.
#[derive(Debug, Clone, Copy, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub metrics_every: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) -> Result<(), CliError> {
        if let Some(s) = self.seed {
            cfg.stream.seed = s;
        }
        if let Some(m) = self.metrics_every {
            cfg.metrics_every = m;
        }
        cfg.check()
            .map_err(|(field, message)| CliError::Invalid { field, message })
    }
}

fn load(path: &Path, overrides: &Overrides) -> Result<ExperimentConfig, CliError> {
    let mut cfg = parse_config(path)?;
    overrides.apply(&mut cfg)?;
    Ok(cfg)
}

/// Seventeen significant digits: exact round trip for `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn trace_csv(trace: &EditTrace) -> String {
    let mut out = String::from(TRACE_HEADER);
    let aborted = trace.aborted_at;
    if aborted.is_some() {
        out.push_str(",aborted_at");
    }
    out.push('\n');
    for r in &trace.records {
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.step,
            r.method,
            fmt_f64(r.delta_norm),
            fmt_f64(r.cum_delta_norm),
            fmt_f64(r.leakage),
            fmt_f64(r.efficacy_proxy),
            fmt_f64(r.residual_norm),
            r.refresh_event
        );
        if let Some(a) = aborted {
            let _ = write!(out, ",{a}");
        }
        out.push('\n');
    }
    out
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            fmt_f64(r.value),
            fmt_f64(r.summary.final_efficacy),
            fmt_f64(r.summary.final_leakage),
            fmt_f64(r.summary.final_cum_norm)
        );
    }
    out
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub status: String,
    pub exit_code: i32,
    pub config_hash: Option<String>,
    pub config: Option<ExperimentConfig>,
    pub tool_version: String,
    pub started_at: String,
    pub outputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aborted_at: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_weights_digest: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stream_digest: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon_used: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub refresh_steps: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Manifest {
    fn start(command: &str) -> Self {
        Self {
            command: command.into(),
            status: "running".into(),
            exit_code: 0,
            config_hash: None,
            config: None,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            started_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
            outputs: Vec::new(),
            aborted_at: None,
            final_weights_digest: None,
            stream_digest: None,
            epsilon_used: None,
            refresh_steps: Vec::new(),
            error: None,
        }
    }

    fn with_config(mut self, cfg: &ExperimentConfig) -> Self {
        self.config_hash = Some(config_hash(cfg));
        self.config = Some(cfg.clone());
        self
    }

    fn finish(mut self, out: &Path, status: ExitStatus, error: Option<String>) -> ExitStatus {
        self.exit_code = status.code();
        self.status = match status {
            ExitStatus::Ok => "ok",
            ExitStatus::ChecksFailed => "checks_failed",
            ExitStatus::Config => "config_error",
            ExitStatus::Aborted => "aborted",
            ExitStatus::Numerical => "numerical_error",
        }
        .into();
        self.error = error;
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        if let Err(e) = fs::create_dir_all(out).and_then(|_| fs::write(out.join("manifest.json"), text)) {
            eprintln!("error: could not write manifest.json: {e}");
            return match status {
                ExitStatus::Ok => ExitStatus::Numerical,
                s => s,
            };
        }
        status
    }
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, CliError> {
    fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(io_err(format!("writing {}", path.display())))?;
    Ok(path)
}

fn report(err: &CliError) {
    eprintln!("error: {err}");
}

/// `run`: executes one edit sequence and writes trace.csv + manifest.json.
pub fn cmd_run(config: &Path, out: &Path, overrides: &Overrides) -> ExitStatus {
    let manifest = Manifest::start("run");
    let cfg = match load(config, overrides) {
        Ok(c) => c,
        Err(e) => {
            report(&e);
            return manifest.finish(out, e.status(), Some(e.to_string()));
        }
    };
    let mut manifest = manifest.with_config(&cfg);
    let trace = match run_sequence(&cfg) {
        Ok(t) => t,
        Err(e) => {
            let e = CliError::from(e);
            report(&e);
            return manifest.finish(out, e.status(), Some(e.to_string()));
        }
    };
    if let Err(e) = write_file(out, "trace.csv", &trace_csv(&trace)) {
        report(&e);
        return manifest.finish(out, e.status(), Some(e.to_string()));
    }
    manifest.outputs.push("trace.csv".into());
    manifest.aborted_at = trace.aborted_at;
    manifest.final_weights_digest = Some(trace.final_weights_digest.clone());
    manifest.stream_digest = Some(trace.stream_digest.clone());
    manifest.epsilon_used = Some(trace.epsilon_used);
    manifest.refresh_steps = trace.refresh_steps.clone();
    match trace.aborted_at {
        Some(step) => {
            eprintln!("run aborted at step {step}: update system was numerically singular");
            manifest.finish(out, ExitStatus::Aborted, Some(format!("singular system at step {step}")))
        }
        None => manifest.finish(out, ExitStatus::Ok, None),
    }
}

/// `verify`: runs a named suite and writes `verify_<suite>.json`.
pub fn cmd_verify(suite: &str, out: &Path, config: Option<&Path>, overrides: &Overrides) -> ExitStatus {
    let manifest = Manifest::start("verify");
    let suite: Suite = match suite.parse() {
        Ok(s) => s,
        Err(msg) => {
            eprintln!("error: {msg}");
            return manifest.finish(out, ExitStatus::Config, Some(msg));
        }
    };
    let custom = match config.map(|p| load(p, overrides)).transpose() {
        Ok(c) => c,
        Err(e) => {
            report(&e);
            return manifest.finish(out, e.status(), Some(e.to_string()));
        }
    };
    let mut manifest = match &custom {
        Some(c) => manifest.with_config(c),
        None => manifest,
    };
    let rep: VerifyReport = match run_suite(suite, custom.as_ref()) {
        Ok(r) => r,
        Err(e) => {
            let e = CliError::from(e);
            report(&e);
            return manifest.finish(out, e.status(), Some(e.to_string()));
        }
    };
    for c in &rep.checks {
        println!(
            "{} {}{}: value {:e}, threshold {:e}; {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            if c.required { "" } else { " (informational)" },
            c.value,
            c.threshold,
            c.detail
        );
    }
    let name = format!("verify_{suite}.json");
    let json = serde_json::to_string_pretty(&rep).expect("report serializes");
    if let Err(e) = write_file(out, &name, &json) {
        report(&e);
        return manifest.finish(out, e.status(), Some(e.to_string()));
    }
    manifest.outputs.push(name);
    let status = if rep.passed {
        ExitStatus::Ok
    } else {
        ExitStatus::ChecksFailed
    };
    manifest.finish(out, status, None)
}

/// Parses a comma-separated value list. For `tau`, the token `T` stands for
/// the configured number of edits (a never-refreshed projector).
pub fn parse_values(text: &str, param: SweepParam, cfg: &ExperimentConfig) -> Result<Vec<f64>, CliError> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| match (s, param) {
            ("T", SweepParam::Tau) => Ok(cfg.stream.num_edits.max(1) as f64),
            _ => s.parse::<f64>().map_err(|e| CliError::Invalid {
                field: "values".into(),
                message: format!("`{s}`: {e}"),
            }),
        })
        .collect()
}

/// Worker count for sweeps: `NULLEDIT_THREADS` if set and positive.
pub fn sweep_threads() -> Result<Option<usize>, CliError> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(CliError::Invalid {
                field: THREADS_ENV.into(),
                message: format!("must be a positive integer, got `{v}`"),
            }),
        },
    }
}

/// `sweep`: one run per value, written as sweep.csv plus one trace per row.
pub fn cmd_sweep(config: &Path, param: &str, values: &str, out: &Path, overrides: &Overrides) -> ExitStatus {
    let manifest = Manifest::start("sweep");
    let prepared = load(config, overrides).and_then(|cfg| {
        let param: SweepParam = param.parse()?;
        let vals = parse_values(values, param, &cfg)?;
        let threads = sweep_threads()?;
        Ok((cfg, param, vals, threads))
    });
    let (cfg, param, vals, threads) = match prepared {
        Ok(p) => p,
        Err(e) => {
            report(&e);
            return manifest.finish(out, e.status(), Some(e.to_string()));
        }
    };
    let mut manifest = manifest.with_config(&cfg);
    let rows = match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| EditError::Numerical(format!("thread pool: {e}")))
            .and_then(|pool| pool.install(|| sweep(&cfg, param, &vals))),
        None => sweep(&cfg, param, &vals),
    };
    let rows = match rows {
        Ok(r) => r,
        Err(e) => {
            let e = CliError::from(e);
            report(&e);
            return manifest.finish(out, e.status(), Some(e.to_string()));
        }
    };
    for (i, row) in rows.iter().enumerate() {
        let name = format!("trace_{i:03}.csv");
        if let Err(e) = write_file(out, &name, &trace_csv(&row.trace)) {
            report(&e);
            return manifest.finish(out, e.status(), Some(e.to_string()));
        }
        manifest.outputs.push(name);
    }
    if let Err(e) = write_file(out, "sweep.csv", &sweep_csv(&rows)) {
        report(&e);
        return manifest.finish(out, e.status(), Some(e.to_string()));
    }
    manifest.outputs.push("sweep.csv".into());
    let aborted: Vec<usize> = rows.iter().filter_map(|r| r.trace.aborted_at).collect();
    if aborted.is_empty() {
        manifest.finish(out, ExitStatus::Ok, None)
    } else {
        manifest.aborted_at = aborted.first().copied();
        manifest.finish(out, ExitStatus::Aborted, Some(format!("{} sweep runs aborted", aborted.len())))
    }
}
