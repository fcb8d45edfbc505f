use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{AgentParams, Caption, Latent, Observation};
use crate::error::Result;

/// Stored outputs of the text encoder: the density parameters `(μ, α, β)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextOutputs {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub shape: f64,
}

/// Stored outputs of a Gaussian image head: mean vector and spread.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageOutputs {
    pub mean: Vec<f64>,
    pub spread: Vec<f64>,
}

/// One pre-training example together with the model outputs recorded for it.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayEntry {
    pub observation: Observation,
    pub latent: Latent,
    pub caption: Caption,
    /// Decoder logits, one row per caption position.
    pub logits: Vec<Vec<f64>>,
    pub text: TextOutputs,
    pub image_encoder: ImageOutputs,
    /// Image decoder mean; `spread` holds the single noise scale.
    pub image_decoder: ImageOutputs,
}

impl ReplayEntry {
    /// Records `agent`'s current outputs for one example.
    pub fn record(agent: &AgentParams, observation: Observation, latent: Latent, caption: Caption) -> Result<Self> {
        let logits = (0..agent.dims.caption_len).map(|p| agent.xi.logits(p, latent.values())).collect();
        let text = TextOutputs {
            mean: agent.phi.mean(&caption),
            scale: agent.phi.scale.clone(),
            shape: agent.phi.shape,
        };
        let image_encoder = ImageOutputs {
            mean: agent.psi.mean(&observation)?,
            spread: agent.psi.std(),
        };
        let image_decoder = ImageOutputs {
            mean: agent.theta.mean(&latent)?,
            spread: vec![agent.theta.noise],
        };
        Ok(Self { observation, latent, caption, logits, text, image_encoder, image_decoder })
    }
}

/// Frozen buffer of pre-training examples used by the replay terms.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReplayBuffer {
    capacity: usize,
    entries: Vec<ReplayEntry>,
}

/// Two independent index draws into a buffer: `prime` feeds the
/// output-matching term, `second` the replayed-likelihood term.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReplayDraw {
    pub prime: Vec<usize>,
    pub second: Vec<usize>,
}

impl ReplayDraw {
    pub fn none() -> Self {
        Self::default()
    }
}

impl ReplayBuffer {
    pub fn empty(capacity: usize) -> Self {
        Self { capacity, entries: Vec::new() }
    }

    pub fn from_entries(capacity: usize, mut entries: Vec<ReplayEntry>) -> Self {
        entries.truncate(capacity);
        Self { capacity, entries }
    }

    /// Fills the buffer from an agent's pre-training set.
    ///
    /// Keeps `min(capacity, data.len())` examples chosen by a seeded shuffle.
    /// Latents are perceived with the agent's image encoder.
    pub fn from_pretraining<R: Rng + ?Sized>(
        agent: &AgentParams,
        data: &[(Observation, Caption)],
        capacity: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(rng);
        order.truncate(capacity);
        let mut entries = Vec::with_capacity(order.len());
        for i in order {
            let (o, c) = &data[i];
            let z = agent.psi.sample(o, rng)?;
            entries.push(ReplayEntry::record(agent, o.clone(), z, c.clone())?);
        }
        Ok(Self { capacity, entries })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ReplayEntry] {
        &self.entries
    }

    pub fn get(&self, i: usize) -> &ReplayEntry {
        &self.entries[i]
    }

    /// Uniform draws with replacement, `n` for each replay term.
    pub fn draw<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> ReplayDraw {
        if self.entries.is_empty() {
            return ReplayDraw::none();
        }
        let len = self.entries.len();
        let prime = (0..n).map(|_| rng.random_range(0..len)).collect();
        let second = (0..n).map(|_| rng.random_range(0..len)).collect();
        ReplayDraw { prime, second }
    }
}
