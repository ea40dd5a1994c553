//! Context- and state-dependent kernelized movement primitives.
//!
//! Demonstrations are fitted with a Gaussian mixture, turned into a KMP
//! reference set by mixture regression, and executed as a mixture of three
//! experts: the imitation policy, a stabilizing policy that descends the
//! epistemic variance, and a goal attractor.
//!
//! Every numeric type is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix it to `f64`.

pub mod demonstrations;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod gmm;
pub mod kmp;
pub mod pipeline;
pub mod rollout;
pub mod scalar;

pub use error::{Error, ErrorKind, Result};
pub use fusion::Strategy;
pub use scalar::Scalar;

pub type Demonstration = demonstrations::Demonstration<f64>;
pub type TrainingSet = demonstrations::TrainingSet<f64>;
pub type GmmModel = gmm::GmmModel<f64>;
pub type ReferenceSet = gmm::ReferenceSet<f64>;
pub type KmpModel = kmp::KmpModel<f64>;
pub type KmpHyperparams = kmp::KmpHyperparams<f64>;
pub type Prediction = kmp::Prediction<f64>;
pub type FusionParams = fusion::FusionParams<f64>;
pub type GoalSet = fusion::GoalSet<f64>;
pub type MixingCoefficients = fusion::MixingCoefficients<f64>;
pub type FusedAction = fusion::FusedAction<f64>;
pub type ContextSchedule = rollout::ContextSchedule<f64>;
pub type RolloutConfig = rollout::RolloutConfig<f64>;
pub type RolloutResult = rollout::RolloutResult<f64>;
pub type TrainedModel = pipeline::TrainedModel<f64>;

pub use pipeline::TrainConfig;
pub use experiment::StartMode;
pub use rollout::{EvalReport, FieldRecord, GridSpec, RolloutStatus};
