use super::{Batch, ImageSample, ReplayBuffer, ReplayDraw, ReplayEntry, TextSample};
use crate::agent::{AgentParams, HeadId, ModelDims};
use crate::error::{Error, Result};

/// Value of one objective, split into its three terms.
#[derive(Debug, Clone, PartialEq)]
pub struct Loss {
    pub total: f64,
    /// Mean negative log-likelihood over the training batch.
    pub data: f64,
    /// Mean squared error between stored and current outputs (unweighted).
    pub replay_match: f64,
    /// Mean negative log-likelihood of replayed examples (unweighted).
    pub replay_nll: f64,
    /// Set when replay was requested but the buffer had nothing to offer.
    pub warning: Option<String>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn mean_over<T>(items: &[T], f: impl Fn(&T) -> Result<f64>) -> Result<f64> {
    let mut acc = 0.0;
    for it in items {
        acc += f(it)?;
    }
    Ok(acc / items.len() as f64)
}

fn replay_entries<'a>(buffer: &'a ReplayBuffer, idx: &[usize]) -> Vec<&'a ReplayEntry> {
    idx.iter().map(|&i| buffer.get(i)).collect()
}

/// Number of stored outputs compared by the matching term of `head`; the
/// term is a mean over them.
pub fn match_width(head: HeadId, dims: &ModelDims) -> usize {
    match head {
        HeadId::Xi => dims.caption_len * dims.vocab,
        HeadId::Phi => 2 * dims.latent + 1,
        HeadId::Psi => 2 * dims.latent,
        HeadId::Theta => dims.obs + 1,
    }
}

/// Shared assembly of `data + α·match + β·nll`.
#[allow(clippy::too_many_arguments)]
fn assemble(
    data: f64,
    width: usize,
    buffer: &ReplayBuffer,
    draw: &ReplayDraw,
    alpha: f64,
    beta: f64,
    matching: impl Fn(&ReplayEntry) -> Result<f64>,
    nll: impl Fn(&ReplayEntry) -> Result<f64>,
) -> Result<Loss> {
    let mut out = Loss { total: data, data, replay_match: 0.0, replay_nll: 0.0, warning: None };
    if alpha == 0.0 && beta == 0.0 {
        return Ok(out);
    }
    if buffer.is_empty() || draw.prime.is_empty() || draw.second.is_empty() {
        out.warning = Some("replay requested but buffer sample is empty; replay terms set to 0".into());
        return Ok(out);
    }
    if alpha != 0.0 {
        out.replay_match = mean_over(&replay_entries(buffer, &draw.prime), |e| matching(e))? / width as f64;
    }
    if beta != 0.0 {
        out.replay_nll = mean_over(&replay_entries(buffer, &draw.second), |e| nll(e))?;
    }
    out.total = data + alpha * out.replay_match + beta * out.replay_nll;
    Ok(out)
}

fn nonempty<T>(batch: &[T]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Input("training batch is empty".into()));
    }
    Ok(())
}

/// Text-decoder objective with replay.
pub fn loss_xi(
    agent: &AgentParams,
    batch: &[TextSample],
    buffer: &ReplayBuffer,
    draw: &ReplayDraw,
    alpha: f64,
    beta: f64,
) -> Result<Loss> {
    nonempty(batch)?;
    let data = mean_over(batch, |s| Ok(-agent.xi.log_prob(&s.caption, &s.latent)?))?;
    assemble(
        data,
        match_width(HeadId::Xi, &agent.dims),
        buffer,
        draw,
        alpha,
        beta,
        |e| {
            Ok((0..agent.dims.caption_len)
                .map(|p| sq_dist(&e.logits[p], &agent.xi.logits(p, e.latent.values())))
                .sum())
        },
        |e| Ok(-agent.xi.log_prob(&e.caption, &e.latent)?),
    )
}

/// Text-encoder objective with replay.
pub fn loss_phi(
    agent: &AgentParams,
    batch: &[TextSample],
    buffer: &ReplayBuffer,
    draw: &ReplayDraw,
    alpha: f64,
    beta: f64,
) -> Result<Loss> {
    nonempty(batch)?;
    let data = mean_over(batch, |s| Ok(-agent.phi.log_pdf(&s.latent, &s.caption)?))?;
    assemble(
        data,
        match_width(HeadId::Phi, &agent.dims),
        buffer,
        draw,
        alpha,
        beta,
        |e| {
            Ok(sq_dist(&e.text.mean, &agent.phi.mean(&e.caption))
                + sq_dist(&e.text.scale, &agent.phi.scale)
                + (e.text.shape - agent.phi.shape).powi(2))
        },
        |e| Ok(-agent.phi.log_pdf(&e.latent, &e.caption)?),
    )
}

/// Image-encoder objective with replay.
pub fn loss_psi(
    agent: &AgentParams,
    batch: &[ImageSample],
    buffer: &ReplayBuffer,
    draw: &ReplayDraw,
    alpha: f64,
    beta: f64,
) -> Result<Loss> {
    nonempty(batch)?;
    let data = mean_over(batch, |s| Ok(-agent.psi.log_pdf(&s.latent, &s.observation)?))?;
    assemble(
        data,
        match_width(HeadId::Psi, &agent.dims),
        buffer,
        draw,
        alpha,
        beta,
        |e| {
            Ok(sq_dist(&e.image_encoder.mean, &agent.psi.mean(&e.observation)?)
                + sq_dist(&e.image_encoder.spread, &agent.psi.std()))
        },
        |e| Ok(-agent.psi.log_pdf(&e.latent, &e.observation)?),
    )
}

/// Image-decoder objective with replay.
pub fn loss_theta(
    agent: &AgentParams,
    batch: &[ImageSample],
    buffer: &ReplayBuffer,
    draw: &ReplayDraw,
    alpha: f64,
    beta: f64,
) -> Result<Loss> {
    nonempty(batch)?;
    let data = mean_over(batch, |s| Ok(-agent.theta.log_pdf(&s.observation, &s.latent)?))?;
    assemble(
        data,
        match_width(HeadId::Theta, &agent.dims),
        buffer,
        draw,
        alpha,
        beta,
        |e| {
            Ok(sq_dist(&e.image_decoder.mean, &agent.theta.mean(&e.latent)?)
                + (e.image_decoder.spread[0] - agent.theta.noise).powi(2))
        },
        |e| Ok(-agent.theta.log_pdf(&e.observation, &e.latent)?),
    )
}

/// Dispatches to the loss of `head`.
pub fn loss(
    head: HeadId,
    agent: &AgentParams,
    batch: Batch<'_>,
    buffer: &ReplayBuffer,
    draw: &ReplayDraw,
    alpha: f64,
    beta: f64,
) -> Result<Loss> {
    match (head, batch) {
        (HeadId::Xi, Batch::Text(b)) => loss_xi(agent, b, buffer, draw, alpha, beta),
        (HeadId::Phi, Batch::Text(b)) => loss_phi(agent, b, buffer, draw, alpha, beta),
        (HeadId::Psi, Batch::Image(b)) => loss_psi(agent, b, buffer, draw, alpha, beta),
        (HeadId::Theta, Batch::Image(b)) => loss_theta(agent, b, buffer, draw, alpha, beta),
        (h, _) => Err(Error::Config(format!("batch kind does not match head {h}"))),
    }
}
