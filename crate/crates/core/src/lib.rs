//! Latent-space image editing by score distillation with a latent-alignment
//! regularizer and patch-wise dynamic weighting of concept adapters.
//!
//! The engine talks to a denoiser through [`predictor::PredictorBackend`]. An
//! HTTP client for an out-of-process bridge and a closed-form Gaussian model
//! are provided.

pub mod distill;
pub mod editor;
pub mod predictor;
pub mod rng;
pub mod schedule;
pub mod tensor;
pub mod weighting;

pub use distill::{GradConfig, RegularizerMode, TimeWeighting};
pub use editor::{
    compare_objectives, run_edit, run_sweep, EditConfig, EditError, EditOutcome, EditTrace,
    Objective, RunOptions, StepRecord, SweepAxis, SweepRow,
};
pub use predictor::{
    GaussianConceptModel, PredictError, PredictorBackend, RemoteBackend, RemoteOptions,
};
pub use schedule::{BetaSchedule, NoiseSchedule, TimestepPlan};
pub use tensor::{AdapterSpec, ConditionRef, LatentTensor, Shape, TensorError};
pub use weighting::PatchSize;
