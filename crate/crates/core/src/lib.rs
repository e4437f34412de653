//! Gradient leakage laboratory: a small double-backprop engine, the models
//! and defenses under study, gradient inversion attacks, metrics and a
//! FedAvg simulator.

pub mod attacks;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod defenses;
pub mod diffcore;
pub mod error;
pub mod fedsim;
pub mod grads;
pub mod metrics;
pub mod models;
pub mod privacy;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use grads::{LayerGradients, LayerMask, ParamKind};
pub use models::{build_model, count_parameters, InputShape, ModelSpec, ModelState};
pub use privacy::PrivacyModuleSpec;
pub use rng::RandomStream;
pub use tensor::{Precision, Real, Tensor};
