//! Major-minor mean-field game of deposit-rate competition between one
//! large bank and a continuum of small banks, solved by fictitious play over
//! neural Q-functions.

pub mod error;
pub mod evaluation;
pub mod features;
pub mod game;
pub mod market;
pub mod measure;
#[cfg(any(test, feature = "oracle"))]
pub mod oracle;
pub mod policy;
pub mod qnet;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Game64 = game::Game<f64>;
pub type Game32 = game::Game<f32>;
pub type NeuronMeasure64 = qnet::NeuronMeasure<f64>;
pub type NeuronMeasure32 = qnet::NeuronMeasure<f32>;
pub type Trainer64 = trainer::Trainer<f64>;
pub type Trainer32 = trainer::Trainer<f32>;
pub type Checkpoint64 = trainer::Checkpoint<f64>;
pub type Checkpoint32 = trainer::Checkpoint<f32>;
pub type ProjectedMeasure64 = measure::ProjectedMeasure<f64>;
pub type ProjectedMeasure32 = measure::ProjectedMeasure<f32>;
