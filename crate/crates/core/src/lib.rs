//! Metropolis-Hastings captioning game between two probabilistic
//! vision-language agents, at desk scale.

pub mod agent;
pub mod baselines;
pub mod dataset;
pub mod error;
pub mod game;
pub mod harness;
pub mod learning;
pub mod linalg;
pub mod metrics;
pub mod oracle;

pub use agent::{AgentId, AgentParams, Caption, HeadId, Latent, ModelDims, Observation};
pub use error::{Error, Result};
