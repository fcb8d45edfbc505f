//! Maximum-likelihood pre-training of desk-scale agents.
//!
//! Every agent sees images through a private random projection `P` of the
//! observation (its frozen backbone). The text encoder is fitted in that
//! frame on every training caption, so it can score any caption. The image
//! encoder starts at `P` and, like the two decoders, is fitted only on the
//! agent's own subset.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::density::{normal_sample, raw_from_scale};
use crate::agent::{AgentId, AgentParams, Caption, HeadId, Latent, ModelDims, Observation, TextEncoderParams};
use crate::error::{Error, Result};
use crate::learning::{update_block, Batch, ImageSample, LearnConfig, ReplayBuffer, TextSample, TrainTrace};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Latent dimension `K`.
    pub latent: usize,
    pub epochs: usize,
    /// Epochs of the shared text-encoder fit.
    pub backbone_epochs: usize,
    pub batch_size: usize,
    pub lr_xi: f64,
    pub lr_phi: f64,
    pub lr_psi: f64,
    pub lr_theta: f64,
    /// Latent draws per image when fitting heads that take `z` as input.
    pub draws: usize,
    /// Initial image-encoder standard deviation.
    pub init_std: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            latent: 8,
            epochs: 20,
            backbone_epochs: 40,
            batch_size: 40,
            lr_xi: 0.05,
            lr_phi: 0.02,
            lr_psi: 0.01,
            lr_theta: 0.01,
            draws: 2,
            init_std: 0.3,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent == 0 || self.epochs == 0 || self.backbone_epochs == 0 || self.batch_size == 0 || self.draws == 0 {
            return Err(Error::Config("pretrain sizes and epoch counts must be positive".into()));
        }
        let lrs = [self.lr_xi, self.lr_phi, self.lr_psi, self.lr_theta];
        if lrs.iter().any(|lr| !(*lr >= 0.0 && lr.is_finite())) {
            return Err(Error::Config("pretrain learning rates must be finite and non-negative".into()));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::Config("pretrain init_std must be positive".into()));
        }
        Ok(())
    }

    fn learn(&self, epochs: usize) -> LearnConfig {
        LearnConfig {
            lr_xi: self.lr_xi,
            lr_phi: self.lr_phi,
            lr_psi: self.lr_psi,
            lr_theta: self.lr_theta,
            epochs,
            batch_size: self.batch_size,
            alpha: 0.0,
            beta: 0.0,
            buffer_capacity: 0,
        }
    }
}

/// An agent's frozen view of the world: projection and text encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub frame: Matrix,
    pub phi: TextEncoderParams,
    pub trace: TrainTrace,
}

fn project(frame: &Matrix, o: &Observation) -> Result<Latent> {
    Latent::new(frame.affine(o.values(), &vec![0.0; frame.rows()]))
}

fn blank_agent(dims: ModelDims, id: AgentId) -> AgentParams {
    AgentParams {
        id,
        dims,
        xi: crate::agent::TextDecoderParams::zeros(&dims),
        phi: TextEncoderParams::new(&dims, 1.0, 2.0),
        psi: crate::agent::ImageEncoderParams::zeros(&dims, 1.0),
        theta: crate::agent::ImageDecoderParams::zeros(&dims, 1.0),
    }
}

/// Draws a projection with `N(0, 1/D_o)` entries and fits the text encoder
/// to `(P o, c)` over `text_data`.
pub fn fit_backbone<R: Rng + ?Sized>(
    dims: ModelDims,
    text_data: &[(Observation, Caption)],
    config: &PretrainConfig,
    rng: &mut R,
) -> Result<Backbone> {
    config.validate()?;
    if text_data.is_empty() {
        return Err(Error::Input("backbone needs training captions".into()));
    }
    let sd = (dims.obs as f64).sqrt().recip();
    let frame = Matrix::from_fn(dims.latent, dims.obs, |_, _| normal_sample(rng, 0.0, sd));
    let mut agent = blank_agent(dims, AgentId::A);
    agent.phi.embeddings = Matrix::from_fn(dims.vocab, dims.latent, |_, _| normal_sample(rng, 0.0, 0.1));
    let batch = text_data
        .iter()
        .map(|(o, c)| Ok(TextSample { latent: project(&frame, o)?, caption: c.clone() }))
        .collect::<Result<Vec<_>>>()?;
    let trace = update_block(
        &mut agent,
        HeadId::Phi,
        Batch::Text(&batch),
        &ReplayBuffer::default(),
        &config.learn(config.backbone_epochs),
        rng,
    )?;
    Ok(Backbone { frame, phi: agent.phi, trace })
}

/// Result of [`pretrain_agent`].
#[derive(Debug, Clone, PartialEq)]
pub struct Pretrained {
    pub agent: AgentParams,
    /// Traces of ψ, ξ and θ, in fitting order.
    pub traces: Vec<TrainTrace>,
}

/// Fits ψ, ξ and θ on `data` on top of `backbone`, in that order.
///
/// ψ regresses onto latents drawn from the text encoder given the caption,
/// ξ and θ onto latents drawn from the fitted ψ. Replay terms are off.
pub fn pretrain_agent<R: Rng + ?Sized>(
    id: AgentId,
    backbone: &Backbone,
    data: &[(Observation, Caption)],
    config: &PretrainConfig,
    rng: &mut R,
) -> Result<Pretrained> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Input(format!("no pre-training data for agent {id}")));
    }
    let dims = ModelDims::new(
        backbone.phi.embeddings.rows(),
        backbone.frame.rows(),
        data[0].1.len(),
        backbone.frame.cols(),
    )?;
    let mut agent = blank_agent(dims, id);
    agent.phi = backbone.phi.clone();
    agent.psi.weight = backbone.frame.clone();
    agent.psi.raw_scale = vec![raw_from_scale(config.init_std); dims.latent];
    let learn = config.learn(config.epochs);
    let none = ReplayBuffer::default();
    let mut traces = Vec::with_capacity(3);

    let mut images = Vec::with_capacity(data.len() * config.draws);
    for (o, c) in data {
        for _ in 0..config.draws {
            images.push(ImageSample { observation: o.clone(), latent: agent.phi.sample(c, rng) });
        }
    }
    traces.push(update_block(&mut agent, HeadId::Psi, Batch::Image(&images), &none, &learn, rng)?);

    let mut texts = Vec::with_capacity(images.len());
    let mut perceived = Vec::with_capacity(images.len());
    for (o, c) in data {
        for _ in 0..config.draws {
            let z = agent.psi.sample(o, rng)?;
            texts.push(TextSample { latent: z.clone(), caption: c.clone() });
            perceived.push(ImageSample { observation: o.clone(), latent: z });
        }
    }
    traces.push(update_block(&mut agent, HeadId::Xi, Batch::Text(&texts), &none, &learn, rng)?);
    traces.push(update_block(&mut agent, HeadId::Theta, Batch::Image(&perceived), &none, &learn, rng)?);
    agent.validate()?;
    Ok(Pretrained { agent, traces })
}
