//! Conformal calibration and out-of-calibration monitoring for classifiers.
//!
//! The pipeline:
//!
//! 1. [`calibration::calibrate`] scores a labeled calibration split with the
//!    APS conformity score ([`aps`]) and freezes the `(1 - epsilon)` score
//!    quantile together with the average prediction-set size it produces.
//! 2. [`calibration::CalibrationModel::predict_set`] turns new probability
//!    vectors into prediction sets that contain the true class with
//!    probability at least `1 - epsilon` on exchangeable data.
//! 3. [`detector::DetectorState`] watches the sizes of those sets over a
//!    sliding window. When inputs drift away from the calibration data, an
//!    uncertain model spreads its probability mass and the sets grow.
//!
//! [`simulator`] provides synthetic model families for experiments and
//! [`io`] holds the line-delimited record and CSV formats.

pub mod aps;
pub mod calibration;
pub mod detector;
pub mod error;
pub mod io;
pub mod metrics;
pub mod rng;
pub mod simulator;

pub use aps::{
    conformity_score, prediction_set, rank, ConformityScore, PredictionSet, ProbVector, RankedView,
};
pub use calibration::{calibrate, CalibrationModel, LabeledSample};
pub use detector::{DetectorConfig, DetectorState, DetectorSummary, Verdict};
pub use error::{Error, Result};
pub use metrics::{nse, LogitVector};
pub use simulator::{ModelProfile, ProfileKind, StreamSpec};
