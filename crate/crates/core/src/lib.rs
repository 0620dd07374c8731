//! Calibration metrics, post-hoc teacher calibrators and calibrated-teacher
//! knowledge distillation, with a small MLP engine and a synthetic benchmark
//! harness.

pub mod calibrate;
pub mod data;
pub mod distill;
pub mod error;
pub mod harness;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod prob;
pub mod stats;

pub use calibrate::{
    fit_temperature, fit_vector_scaling, Calibrator, FitMetadata, TemperatureSearch, VectorScalingFit,
    DEFAULT_CALIBRATION_TEMPERATURE,
};
pub use data::{Dataset, Split, SplitTag};
pub use distill::{kd_loss, KdConfig, KdLoss, DEFAULT_KD_TEMPERATURE, DEFAULT_LAMBDA};
pub use error::{Error, Result};
pub use metrics::{
    ace, ece, ece_decomposed, full_report, nll, BinScheme, CalibrationReport, DEFAULT_ACE_BINS,
    DEFAULT_ECE_BINS,
};
pub use nn::{Checkpoint, MlpModel, TrainConfig};
pub use prob::{accuracy, log_tempered_softmax, tempered_softmax, LabelVec, LogitMatrix, ProbMatrix, Temperature};
