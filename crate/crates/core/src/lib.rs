//! Environment-infused video-language grounding.
//!
//! Captions describing the surroundings at regular intervals are embedded by a
//! small trainable text encoder, fused into per-frame video features, and fed
//! to a span-prediction head. The crate also carries the metrics, synthetic
//! data generator and on-disk formats the pipeline needs.

pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod gradsuite;
pub mod grounder;
pub mod infuser;
pub mod interval;
pub mod io;
pub mod model;
pub mod numerics;
pub mod synth;

pub use error::{Error, ErrorClass, Result};
pub use interval::{
    frames_to_seconds, gt_coverage, interval_iou, seconds_to_frames, Candidate, CaptionEntry, CaptionTrack,
    GroundingSample, Interval, PredictionSet, TimeUnit, VideoMeta,
};
pub use numerics::{Matrix, Vector};
