//! Template-based few-shot keyword spotting.
//!
//! Embedding sequences of query templates are aligned against long test
//! recordings with subsequence DTW; the resulting score curves are
//! thresholded into keyword detections and evaluated with an event-based
//! F-score. Quantization against the embedding model's class centers
//! ([`calib`]) makes those scores easier to threshold under noise.

pub mod calib;
pub mod channel;
pub mod detect;
pub mod dsp;
pub mod dtw;
pub mod error;
pub mod fixtures;
pub mod pipeline;
pub mod tensorio;

pub use calib::{CalibrationMode, CalibrationSides, SegmentLayout};
pub use detect::{DetectionEvent, EvalReport, MatchingConfig, Threshold};
pub use dtw::{AlignConfig, CostMatrix, KeywordCurve, StepSizes, WarpResult};
pub use error::{KwsError, Result};
pub use tensorio::{AnnotationSet, AudioBuffer, CenterBank, EmbeddingSequence};
