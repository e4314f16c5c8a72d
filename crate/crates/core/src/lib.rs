//! Gaze-token supervision for a miniature vision-language model.
//!
//! Eye-tracking sessions are turned into per-token patch targets
//! ([`supervision`]), a small causal transformer reserves four placeholder
//! tokens whose hidden states predict those targets ([`model`], [`heads`]),
//! and a two-stage trainer ([`train`]) fits gaze tokens first and then a
//! 14-label classifier jointly with language modeling. [`eval`] scores the
//! result and [`synth`] generates corpora with controllable structure.

pub mod answer;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod heads;
pub mod ingest;
pub mod model;
pub mod session;
pub mod supervision;
pub mod synth;
pub mod train;
pub mod viz;

pub use error::{Error, Result};

/// Number of reserved gaze placeholder tokens.
pub const NUM_GAZE_TOKENS: usize = 4;
/// Number of findings in every label vector.
pub const NUM_LABELS: usize = 14;

/// Binary finding vector in canonical order.
pub type Labels = [u8; NUM_LABELS];

/// Build identifier recorded in checkpoint manifests.
pub const GIT_DESCRIBE: &str = env!("GAZECOT_GIT_DESCRIBE");
