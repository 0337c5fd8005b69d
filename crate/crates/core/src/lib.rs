//! Closed-form sequential model editing on synthetic linear associative
//! memories.
//!
//! The crate implements the MEMIT family of regularized least-squares
//! updates, null-space constrained updates (AlphaEdit and its history-aware
//! variant), and the leakage-penalized, history-aware null-space rule
//! (BetaEdit), together with the measurements needed to study them over long
//! edit sequences: knowledge leakage, cumulative weight perturbation,
//! pairwise interference and a linear efficacy proxy.
//!
//! ```
//! use nulledit::harness::{run_sequence, ExperimentConfig};
//!
//! let mut cfg = ExperimentConfig::default();
//! cfg.dims.d_in = 16;
//! cfg.dims.d_out = 8;
//! cfg.dims.n0 = 40;
//! cfg.stream.num_edits = 20;
//! let trace = run_sequence(&cfg).unwrap();
//! assert_eq!(trace.records.len(), 2);
//! ```

pub mod editors;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod memory;
pub mod metrics;
pub mod projector;

pub use editors::{MethodKind, MethodSpec, UpdateResult};
pub use error::{EditError, Result};
pub use harness::{run_sequence, EditTrace, ExperimentConfig};
pub use linalg::Matrix;
pub use memory::{EditRequest, KnowledgeBase, LinearMemory, StreamConfig};
pub use metrics::{InterferenceReport, StepRecord};
pub use projector::{GramAccumulator, Projector};
