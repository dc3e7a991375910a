//! Graph-based pose reconstruction and action recognition for pedestrian
//! trajectory prediction.
//!
//! The crate is organised as a small stack:
//!
//! * [`tensor`] — a static compute-graph engine with reverse-mode gradients.
//!   Graphs are built once (shapes frozen), then interpreted forward/backward.
//! * [`skeleton`] — 2D skeleton layouts, normalized adjacency, joint masking,
//!   and pose sequence I/O.
//! * [`prar`] — the spatiotemporal graph-convolutional model that encodes a
//!   noisy pose sequence and decodes both a reconstructed pose sequence and an
//!   action distribution.
//! * [`fa`] — optical-flow summarisation and the temporal-convolutional
//!   feature aggregator that fuses location, pose, confidence, action, and
//!   flow streams into a future trajectory.
//! * [`synth`] — deterministic synthetic pedestrian corpora with kinematic
//!   pose generation, occlusion, noise, and camera motion.
//! * [`train`] — SGD training loops for the two stages (pose/action
//!   pretraining, then trajectory prediction) with checkpointing and loss
//!   curves.
//! * [`eval`] — displacement-error metrics, baselines, ablation grids, and
//!   occlusion sweeps.
//! * [`report`] — deterministic CSV and SVG emission for run artifacts.
//!
//! Everything is seeded and single-threaded-deterministic: the same inputs and
//! seeds produce byte-identical artifacts.

pub mod eval;
pub mod fa;
pub mod prar;
pub mod report;
pub mod skeleton;
pub mod synth;
pub mod tensor;
pub mod train;

/// Mixes a seed with a salt (splitmix64 finalizer) so derived rng streams —
/// per-sample, per-epoch — decorrelate from their parent seed and from each
/// other.
pub(crate) fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Error type shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    /// Invalid graph construction or execution request.
    #[error("graph error: {0}")]
    Graph(String),
    /// Checkpoint file malformed or incompatible.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    /// A computation produced NaN or infinity.
    #[error("non-finite value in {0}")]
    NonFinite(String),
    /// Invalid configuration (scenario, model, or training settings).
    #[error("config error: {0}")]
    Config(String),
    /// Malformed data file (pose JSONL, trajectory CSV, flow field, layout).
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
