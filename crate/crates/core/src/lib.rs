//! Summary-augmented preference optimization over small, exactly enumerable
//! policies.
//!
//! An inference policy compresses noisy user signals into a short summary; a
//! generation policy answers prompts conditioned on that summary. Both are
//! trained against one summary-augmented DPO/IPO objective: the inference
//! policy by group-relative policy gradients with a KL anchor, the generator by
//! direct gradient descent. A synthetic persona world with Bradley–Terry labels
//! provides data and a ground-truth judge, and [`infobound`] evaluates the
//! mutual-information decomposition of the objective by exhaustive enumeration.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! fix the scalar for the common case.

pub mod basemodel;
pub mod error;
pub mod eval;
pub mod grpo;
pub mod infobound;
pub mod objectives;
pub mod optim;
pub mod pipeline;
pub mod policy;
pub mod scalar;
pub mod seed;
pub mod stage2;
pub mod synthworld;

pub use error::{PopiError, Result};
pub use policy::{Arch, ExactDistribution, Policy, Role, SequenceModel, TokenSeq, Vocab, EOS, SEP};
pub use scalar::Scalar;

pub use eval::{Metrics, MetricsTable, Mode};
pub use infobound::InfoReport;

pub type Policy64 = Policy<f64>;
pub type Policy32 = Policy<f32>;
pub type ObjectiveConfig64 = objectives::ObjectiveConfig<f64>;
pub type ObjectiveConfig32 = objectives::ObjectiveConfig<f32>;
