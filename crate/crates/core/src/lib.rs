//! Scoring pipeline for a two-grader spoken language assessment system.
//!
//! The crate covers the arithmetic that sits between two graders and a
//! leaderboard: challenge metrics, score-conditioned fusion of a speech
//! grader with a multimodal grader, overall-score aggregation, and a small
//! from-scratch version of the speech-grader head (attention pooling,
//! CEFR prototypes and a single-layer MLP).

pub mod error;
pub mod fusion;
pub mod head;
pub mod io;
pub mod metrics;
pub mod report;
pub mod score;
pub mod synth;

pub use error::{Error, Result};
pub use fusion::{FusionCalibration, IntervalLayout};
pub use head::{FrameSequence, HeadMode, HeadParameters};
pub use metrics::MetricReport;
pub use score::{JoinedDataset, JoinedRow, Part, RecordKind, ScoredRecord};
