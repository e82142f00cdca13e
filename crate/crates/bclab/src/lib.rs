//! A desk-scale laboratory for comparing behavior-cloning policy
//! parameterizations: plain regression, flow matching, and two-step
//! iterative policies, together with the analysis tooling used to compare
//! them (Lipschitz estimation, Monte-Carlo Q estimation, off-manifold
//! projection norms, closed-form linear ridge surrogates, and numerical
//! checks of the flow-map Lipschitz bound).
//!
//! Everything runs on deterministic toy environments with small MLPs and a
//! built-in reverse-mode gradient tape, so every number is reproducible
//! from a seed and checkable against an independent oracle.

pub mod envs;
pub mod error;
pub mod experiments;
pub mod linear_lab;
pub mod metrics;
pub mod ndmath;
pub mod nets;
pub mod objectives;
pub mod rng;
pub mod samplers;
pub mod theory_lab;

pub use error::{Error, Result};
pub use ndmath::Tensor;
pub use nets::{Activation, NetConfig, PolicyNet, TimeEmbedding};
pub use objectives::{LossNorm, Variant, VariantKind};
pub use samplers::{SampleMode, SamplerConfig};
