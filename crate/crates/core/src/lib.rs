//! Geometry-based intrusion detection for CAN bus traffic.
//!
//! Ambient traffic is decomposed into 16-bit byte-pair signals, grouped by
//! correlation into co-clusters, and each cluster's observations are embedded
//! with a diffusion map whose out-of-sample extension uses Nyström landmarks.
//! Two online statistics flag intrusions: distance from the learned manifold
//! and the jump between consecutive embedded points.

pub mod artifact;
pub mod cocluster;
pub mod codec;
pub mod detect;
pub mod diffusion;
pub mod error;
pub mod kmeans;
pub mod pipeline;
pub mod rng;
pub mod simulate;
pub mod spatial;
pub mod workflow;

pub use cocluster::{CoClusterModel, SignalId};
pub use codec::{BytePairId, CanFrame, LogFormat};
pub use detect::{Alert, DetectorKind, Thresholds};
pub use diffusion::{DiffusionModel, EmbeddedPoint, FitParams, GammaChoice};
pub use error::{Error, Result};
pub use pipeline::{EmitMode, Observation, Scaler, StateCapture};
