//! Loss functions of the four heads, DER++ replay terms, analytic gradients
//! and the SGD update loop.

mod buffer;
mod grad;
mod loss;
mod sgd;

use serde::{Deserialize, Serialize};

use crate::agent::{Caption, Latent, Observation};

pub use buffer::{ImageOutputs, ReplayBuffer, ReplayEntry, ReplayDraw, TextOutputs};
pub use grad::{grad, Gradient};
pub use loss::{loss, loss_phi, loss_psi, loss_theta, loss_xi, match_width, Loss};
pub use sgd::{update_block, TrainTrace};

pub(crate) use grad::{xi_accumulate, xi_nll_grad, xi_replay_grad};

/// Hyperparameters of the learning phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnConfig {
    pub lr_xi: f64,
    pub lr_phi: f64,
    pub lr_psi: f64,
    pub lr_theta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of the replayed-output matching term.
    pub alpha: f64,
    /// Weight of the replayed-likelihood term.
    pub beta: f64,
    /// Replay buffer capacity per agent.
    pub buffer_capacity: usize,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            lr_xi: 1e-4,
            lr_phi: 1e-6,
            lr_psi: 1e-4,
            lr_theta: 1e-4,
            epochs: 10,
            batch_size: 40,
            alpha: 0.05,
            beta: 0.05,
            buffer_capacity: 500,
        }
    }
}

impl LearnConfig {
    pub fn lr(&self, head: crate::agent::HeadId) -> f64 {
        use crate::agent::HeadId::*;
        match head {
            Xi => self.lr_xi,
            Phi => self.lr_phi,
            Psi => self.lr_psi,
            Theta => self.lr_theta,
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        let lrs = [self.lr_xi, self.lr_phi, self.lr_psi, self.lr_theta];
        if lrs.iter().any(|lr| !(*lr >= 0.0 && lr.is_finite())) {
            return Err(crate::Error::Config("learning rates must be finite and non-negative".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(crate::Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(crate::Error::Config("replay weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Training pair for the text heads: a latent and the caption attached to it.
#[derive(Debug, Clone, PartialEq)]
pub struct TextSample {
    pub latent: Latent,
    pub caption: Caption,
}

/// Training pair for the image heads.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub observation: Observation,
    pub latent: Latent,
}

/// Training data for one head.
#[derive(Debug, Clone, Copy)]
pub enum Batch<'a> {
    Text(&'a [TextSample]),
    Image(&'a [ImageSample]),
}

impl Batch<'_> {
    pub fn len(&self) -> usize {
        match self {
            Batch::Text(s) => s.len(),
            Batch::Image(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests;
