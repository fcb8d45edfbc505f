//! Analytic gradients in the unconstrained coordinates of [`AgentParams::flat`].

use statrs::function::gamma::digamma;

use super::{Batch, ImageSample, ReplayBuffer, ReplayDraw, ReplayEntry};
use crate::agent::density::sigmoid;
use crate::agent::{AgentParams, Caption, HeadId, Latent, Observation};
use crate::error::{Error, Result};
use crate::linalg;

/// Gradient of one head's objective, laid out like [`AgentParams::flat`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub head: HeadId,
    pub values: Vec<f64>,
}

impl Gradient {
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Analytic gradient of [`super::loss`] for `head`.
pub fn grad(
    head: HeadId,
    agent: &AgentParams,
    batch: Batch<'_>,
    buffer: &ReplayBuffer,
    draw: &ReplayDraw,
    alpha: f64,
    beta: f64,
) -> Result<Gradient> {
    if batch.is_empty() {
        return Err(Error::Input("training batch is empty".into()));
    }
    let mut g = vec![0.0; agent.flat_len(head)];
    let use_replay = (alpha != 0.0 || beta != 0.0) && !buffer.is_empty() && !draw.prime.is_empty() && !draw.second.is_empty();
    let prime: Vec<&ReplayEntry> = if use_replay { draw.prime.iter().map(|&i| buffer.get(i)).collect() } else { vec![] };
    let second: Vec<&ReplayEntry> = if use_replay { draw.second.iter().map(|&i| buffer.get(i)).collect() } else { vec![] };
    let wp = if prime.is_empty() { 0.0 } else { alpha / (prime.len() * super::loss::match_width(head, &agent.dims)) as f64 };
    let ws = if second.is_empty() { 0.0 } else { beta / second.len() as f64 };

    match (head, batch) {
        (HeadId::Xi, Batch::Text(data)) => {
            let w = 1.0 / data.len() as f64;
            for s in data {
                xi_nll_grad(agent, &s.latent, &s.caption, w, &mut g);
            }
            if wp != 0.0 {
                xi_replay_grad(agent, &prime, wp, &mut g);
            }
            for e in &second {
                xi_nll_grad(agent, &e.latent, &e.caption, ws, &mut g);
            }
        }
        (HeadId::Phi, Batch::Text(data)) => {
            let w = 1.0 / data.len() as f64;
            for s in data {
                phi_nll_grad(agent, &s.latent, &s.caption, w, &mut g);
            }
            if wp != 0.0 {
                for e in &prime {
                    phi_match_grad(agent, e, wp, &mut g);
                }
            }
            for e in &second {
                phi_nll_grad(agent, &e.latent, &e.caption, ws, &mut g);
            }
        }
        (HeadId::Psi, Batch::Image(data)) => {
            let w = 1.0 / data.len() as f64;
            for s in data {
                psi_nll_grad(agent, s, w, &mut g)?;
            }
            if wp != 0.0 {
                for e in &prime {
                    psi_match_grad(agent, e, wp, &mut g)?;
                }
            }
            for e in &second {
                let s = ImageSample { observation: e.observation.clone(), latent: e.latent.clone() };
                psi_nll_grad(agent, &s, ws, &mut g)?;
            }
        }
        (HeadId::Theta, Batch::Image(data)) => {
            let w = 1.0 / data.len() as f64;
            for s in data {
                theta_nll_grad(agent, &s.observation, &s.latent, w, &mut g)?;
            }
            if wp != 0.0 {
                for e in &prime {
                    theta_match_grad(agent, e, wp, &mut g)?;
                }
            }
            for e in &second {
                theta_nll_grad(agent, &e.observation, &e.latent, ws, &mut g)?;
            }
        }
        (h, _) => return Err(Error::Config(format!("batch kind does not match head {h}"))),
    }

    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence(format!("non-finite gradient for {head}")));
    }
    Ok(Gradient { head, values: g })
}

/// Accumulates `w · ∂/∂logits` into the decoder layout.
pub(crate) fn xi_accumulate(agent: &AgentParams, pos: usize, z: &[f64], dlogits: &[f64], w: f64, g: &mut [f64]) {
    let d = &agent.dims;
    let (v, k) = (d.vocab, d.latent);
    let w_off = pos * v * k;
    let b_off = d.caption_len * v * k + pos * v;
    for (tok, &dl) in dlogits.iter().enumerate() {
        let scaled = w * dl;
        if scaled == 0.0 {
            continue;
        }
        let row = &mut g[w_off + tok * k..w_off + (tok + 1) * k];
        for (gi, zi) in row.iter_mut().zip(z) {
            *gi += scaled * zi;
        }
        g[b_off + tok] += scaled;
    }
}

pub(crate) fn xi_nll_grad(agent: &AgentParams, z: &Latent, c: &Caption, w: f64, g: &mut [f64]) {
    for (pos, &tok) in c.tokens().iter().enumerate() {
        let mut d = linalg::softmax(&agent.xi.logits(pos, z.values()));
        d[tok] -= 1.0;
        xi_accumulate(agent, pos, z.values(), &d, w, g);
    }
}

/// Gradient of `w · Σ_e ||h'_e − logits(z'_e)||²`.
pub(crate) fn xi_replay_grad(agent: &AgentParams, entries: &[&ReplayEntry], w: f64, g: &mut [f64]) {
    for e in entries {
        for pos in 0..agent.dims.caption_len {
            let cur = agent.xi.logits(pos, e.latent.values());
            let d: Vec<f64> = cur.iter().zip(&e.logits[pos]).map(|(c, h)| 2.0 * (c - h)).collect();
            xi_accumulate(agent, pos, e.latent.values(), &d, w, g);
        }
    }
}

/// Offsets of the text-encoder layout: embeddings, log-scales, log-shape.
fn phi_offsets(agent: &AgentParams) -> (usize, usize) {
    let d = &agent.dims;
    let scale_off = d.vocab * d.latent;
    (scale_off, scale_off + d.latent)
}

fn phi_mean_grad(agent: &AgentParams, c: &Caption, dmu: &[f64], g: &mut [f64]) {
    let k = agent.dims.latent;
    let inv_len = 1.0 / c.len() as f64;
    for &tok in c.tokens() {
        for (gi, dm) in g[tok * k..(tok + 1) * k].iter_mut().zip(dmu) {
            *gi += dm * inv_len;
        }
    }
}

fn phi_nll_grad(agent: &AgentParams, z: &Latent, c: &Caption, w: f64, g: &mut [f64]) {
    let phi = &agent.phi;
    let shape = phi.shape;
    let (scale_off, shape_off) = phi_offsets(agent);
    let mu = phi.mean(c);
    let mut dmu = vec![0.0; mu.len()];
    let mut dshape = 0.0;
    let k_dims = mu.len() as f64;
    for (k, ((&zk, &mk), &ak)) in z.values().iter().zip(&mu).zip(&phi.scale).enumerate() {
        let diff = zk - mk;
        let t = diff.abs() / ak;
        let tb = t.powf(shape);
        if t > 0.0 {
            dmu[k] = -w * shape * t.powf(shape - 1.0) * diff.signum() / ak;
            dshape += shape * tb * t.ln();
        }
        g[scale_off + k] += w * (1.0 - shape * tb);
    }
    dshape += k_dims * (-1.0 - digamma(1.0 / shape) / shape);
    g[shape_off] += w * dshape;
    phi_mean_grad(agent, c, &dmu, g);
}

fn phi_match_grad(agent: &AgentParams, e: &ReplayEntry, w: f64, g: &mut [f64]) {
    let phi = &agent.phi;
    let (scale_off, shape_off) = phi_offsets(agent);
    let mu = phi.mean(&e.caption);
    let dmu: Vec<f64> = mu.iter().zip(&e.text.mean).map(|(m, h)| 2.0 * w * (m - h)).collect();
    phi_mean_grad(agent, &e.caption, &dmu, g);
    for (k, (&a, &h)) in phi.scale.iter().zip(&e.text.scale).enumerate() {
        g[scale_off + k] += 2.0 * w * (a - h) * a;
    }
    g[shape_off] += 2.0 * w * (phi.shape - e.text.shape) * phi.shape;
}

/// Accumulates `∂/∂mean` and `∂/∂std` of the image encoder.
fn psi_accumulate(agent: &AgentParams, o: &Observation, dmean: &[f64], dstd: &[f64], g: &mut [f64]) {
    let d = &agent.dims;
    let bias_off = d.latent * d.obs;
    let raw_off = bias_off + d.latent;
    for k in 0..d.latent {
        let row = &mut g[k * d.obs..(k + 1) * d.obs];
        for (gi, oj) in row.iter_mut().zip(o.values()) {
            *gi += dmean[k] * oj;
        }
        g[bias_off + k] += dmean[k];
        g[raw_off + k] += dstd[k] * sigmoid(agent.psi.raw_scale[k]);
    }
}

fn psi_nll_grad(agent: &AgentParams, s: &ImageSample, w: f64, g: &mut [f64]) -> Result<()> {
    let mean = agent.psi.mean(&s.observation)?;
    let std = agent.psi.std();
    let mut dmean = vec![0.0; mean.len()];
    let mut dstd = vec![0.0; mean.len()];
    for k in 0..mean.len() {
        let r = s.latent.values()[k] - mean[k];
        let var = std[k] * std[k];
        dmean[k] = -w * r / var;
        dstd[k] = w * (1.0 / std[k] - r * r / (var * std[k]));
    }
    psi_accumulate(agent, &s.observation, &dmean, &dstd, g);
    Ok(())
}

fn psi_match_grad(agent: &AgentParams, e: &ReplayEntry, w: f64, g: &mut [f64]) -> Result<()> {
    let mean = agent.psi.mean(&e.observation)?;
    let std = agent.psi.std();
    let dmean: Vec<f64> = mean.iter().zip(&e.image_encoder.mean).map(|(m, h)| 2.0 * w * (m - h)).collect();
    let dstd: Vec<f64> = std.iter().zip(&e.image_encoder.spread).map(|(s, h)| 2.0 * w * (s - h)).collect();
    psi_accumulate(agent, &e.observation, &dmean, &dstd, g);
    Ok(())
}

fn theta_accumulate(agent: &AgentParams, z: &Latent, dmean: &[f64], dlog_noise: f64, g: &mut [f64]) {
    let d = &agent.dims;
    let bias_off = d.obs * d.latent;
    for j in 0..d.obs {
        let row = &mut g[j * d.latent..(j + 1) * d.latent];
        for (gi, zk) in row.iter_mut().zip(z.values()) {
            *gi += dmean[j] * zk;
        }
        g[bias_off + j] += dmean[j];
    }
    g[bias_off + d.obs] += dlog_noise;
}

fn theta_nll_grad(agent: &AgentParams, o: &Observation, z: &Latent, w: f64, g: &mut [f64]) -> Result<()> {
    let mean = agent.theta.mean(z)?;
    let var = agent.theta.noise * agent.theta.noise;
    let mut sq = 0.0;
    let dmean: Vec<f64> = o
        .values()
        .iter()
        .zip(&mean)
        .map(|(x, m)| {
            let r = x - m;
            sq += r * r;
            -w * r / var
        })
        .collect();
    let dlog_noise = w * (agent.dims.obs as f64 - sq / var);
    theta_accumulate(agent, z, &dmean, dlog_noise, g);
    Ok(())
}

fn theta_match_grad(agent: &AgentParams, e: &ReplayEntry, w: f64, g: &mut [f64]) -> Result<()> {
    let mean = agent.theta.mean(&e.latent)?;
    let dmean: Vec<f64> = mean.iter().zip(&e.image_decoder.mean).map(|(m, h)| 2.0 * w * (m - h)).collect();
    let noise = agent.theta.noise;
    let dlog_noise = 2.0 * w * (noise - e.image_decoder.spread[0]) * noise;
    theta_accumulate(agent, &e.latent, &dmean, dlog_noise, g);
    Ok(())
}

