//! Brute-force checks over small caption spaces: exact target tables, chain
//! diagnostics and the audit of the listener-only acceptance ratio.

use serde::{Deserialize, Serialize};

use crate::agent::{AgentId, AgentParams, Caption, Latent, ModelDims, TextDecoderParams, TextEncoderParams};
use crate::error::{Error, Result};
use crate::game::{acceptance_ratio, check_enumerable, exact_acceptance_ratio, mode_ratio, AcceptanceMode};
use crate::linalg::{log_sum_exp, Matrix};

/// Which distribution a [`PosteriorTable`] holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Target {
    /// `∝ q(c | z_sp; ξ_sp) · p(z_li | c; φ_li)`: what the game's chain samples.
    MhTarget { speaker: AgentId },
    /// `∝ p(z_A | c; φ_A) · p(z_B | c; φ_B)` under a uniform caption prior.
    JointPosterior,
}

/// Normalized probabilities of every caption, in [`Caption::enumerate`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorTable {
    pub target: Target,
    pub dims: ModelDims,
    pub probs: Vec<f64>,
}

impl PosteriorTable {
    /// Normalizes unnormalized log weights in log space.
    pub fn from_log_weights(target: Target, dims: ModelDims, logs: &[f64]) -> Result<Self> {
        if logs.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
            return Err(Error::Invariant("log weights must be finite or -inf".into()));
        }
        let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::Invariant("every caption has zero weight".into()));
        }
        let weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        Ok(Self { target, dims, probs: weights.iter().map(|w| w / total).collect() })
    }

    pub fn prob(&self, caption: &Caption) -> f64 {
        self.probs[caption.index(self.dims.vocab)]
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// Exact target table by exhaustive enumeration.
pub fn enumerate_posterior(
    a: &AgentParams,
    b: &AgentParams,
    z_a: &Latent,
    z_b: &Latent,
    target: Target,
) -> Result<PosteriorTable> {
    if a.dims != b.dims {
        return Err(Error::Config("agents differ in configuration".into()));
    }
    check_enumerable(a)?;
    let captions = Caption::enumerate(&a.dims)?;
    let logs: Vec<f64> = match target {
        Target::JointPosterior => captions
            .iter()
            .map(|c| Ok(a.phi.log_pdf(z_a, c)? + b.phi.log_pdf(z_b, c)?))
            .collect::<Result<_>>()?,
        Target::MhTarget { speaker } => {
            let (sp, li, z_sp, z_li) = match speaker {
                AgentId::A => (a, b, z_a, z_b),
                AgentId::B => (b, a, z_b, z_a),
            };
            captions
                .iter()
                .map(|c| Ok(sp.xi.log_prob(c, z_sp)? + li.phi.log_pdf(z_li, c)?))
                .collect::<Result<_>>()?
        }
    };
    PosteriorTable::from_log_weights(target, a.dims, &logs)
}

/// `p(c | z; φ)` under a uniform caption prior.
pub fn encoder_posterior(phi: &TextEncoderParams, dims: &ModelDims, z: &Latent) -> Result<Vec<f64>> {
    match dims.caption_space() {
        Some(n) if n <= crate::game::MAX_ENUMERATION => {}
        _ => return Err(Error::Capability("caption space too large to enumerate".into())),
    }
    let logs: Vec<f64> = Caption::enumerate(dims)?.iter().map(|c| phi.log_pdf(z, c)).collect::<Result<_>>()?;
    let norm = log_sum_exp(&logs);
    Ok(logs.iter().map(|l| (l - norm).exp()).collect())
}

/// Decoder probabilities `q(c | z; ξ)` of every caption.
pub fn decoder_table(xi: &TextDecoderParams, dims: &ModelDims, z: &Latent) -> Result<Vec<f64>> {
    Caption::enumerate(dims)?.iter().map(|c| Ok(xi.log_prob(c, z)?.exp())).collect()
}

pub fn tv_distance(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Input("distributions differ in support size".into()));
    }
    Ok(0.5 * p.iter().zip(q).map(|(x, y)| (x - y).abs()).sum::<f64>())
}

/// TV distance between the post-burn-in empirical distribution of `chain`
/// and `table`.
pub fn chain_tv_distance(chain: &[Caption], table: &PosteriorTable, burn_in: usize) -> Result<f64> {
    if chain.len() <= burn_in {
        return Err(Error::Input(format!(
            "chain of length {} leaves nothing after burn-in {burn_in}",
            chain.len()
        )));
    }
    let kept = &chain[burn_in..];
    let mut counts = vec![0usize; table.len()];
    for c in kept {
        c.check(table.dims.vocab, table.dims.caption_len)?;
        counts[c.index(table.dims.vocab)] += 1;
    }
    let n = kept.len() as f64;
    let empirical: Vec<f64> = counts.iter().map(|&k| k as f64 / n).collect();
    tv_distance(&empirical, &table.probs)
}

/// Default burn-in: a tenth of the chain.
pub fn default_burn_in(len: usize) -> usize {
    len / 10
}

/// Both sides of the acceptance-probability approximation for one proposal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceAudit {
    pub r_exact: f64,
    pub r_approx: f64,
    pub abs_diff: f64,
}

pub fn exact_vs_approx_acceptance(
    speaker: &AgentParams,
    listener: &AgentParams,
    z_sp: &Latent,
    z_li: &Latent,
    c_star: &Caption,
    c_li: &Caption,
) -> Result<AcceptanceAudit> {
    let r_exact = exact_acceptance_ratio(speaker, listener, z_sp, z_li, c_star, c_li)?;
    let r_approx = acceptance_ratio(&listener.phi, z_li, c_star, c_li)?;
    Ok(AcceptanceAudit { r_exact, r_approx, abs_diff: (r_exact - r_approx).abs() })
}

/// Probability that one proposal+judgment step moves the listener from
/// `from` to `to` (`from != to`).
#[allow(clippy::too_many_arguments)]
pub fn transition_prob(
    mode: AcceptanceMode,
    speaker: &AgentParams,
    listener: &AgentParams,
    z_sp: &Latent,
    z_li: &Latent,
    from: &Caption,
    to: &Caption,
) -> Result<f64> {
    let q = speaker.xi.log_prob(to, z_sp)?.exp();
    Ok(q * mode_ratio(mode, speaker, listener, z_sp, z_li, to, from)?)
}

/// Product of per-position marginals of a caption distribution, written as a
/// decoder that ignores `z`: zero weights, log-marginal biases.
///
/// This is the closest position-factorized decoder in KL. Returns it with
/// its TV distance to `probs`.
pub fn fit_factorized_decoder(probs: &[f64], dims: &ModelDims) -> Result<(TextDecoderParams, f64)> {
    if Some(probs.len()) != dims.caption_space() {
        return Err(Error::Input("table size does not match the caption space".into()));
    }
    let captions = Caption::enumerate(dims)?;
    let mut marginals = vec![vec![0.0; dims.vocab]; dims.caption_len];
    for (c, &p) in captions.iter().zip(probs) {
        for (pos, &t) in c.tokens().iter().enumerate() {
            marginals[pos][t] += p;
        }
    }
    let xi = TextDecoderParams {
        weights: vec![Matrix::zeros(dims.vocab, dims.latent); dims.caption_len],
        biases: marginals.iter().map(|m| m.iter().map(|p| p.max(f64::MIN_POSITIVE).ln()).collect()).collect(),
    };
    let zero = Latent::new(vec![0.0; dims.latent])?;
    let fitted = decoder_table(&xi, dims, &zero)?;
    let tv = tv_distance(&fitted, probs)?;
    Ok((xi, tv))
}

/// A latent beyond every caption mean in every dimension, by `margin`.
///
/// With a Laplace text encoder (`β = 1`) every `|z_k - μ_k(c)|` is then
/// `z_k - μ_k(c)`, so `log p(z | c)` is linear in the token embeddings and
/// `p(c | z)` is an exact product over positions.
pub fn dominating_latent(phi: &TextEncoderParams, margin: f64) -> Result<Latent> {
    let e = &phi.embeddings;
    Latent::new(
        (0..e.cols())
            .map(|k| (0..e.rows()).map(|v| e.get(v, k)).fold(f64::NEG_INFINITY, f64::max) + margin)
            .collect(),
    )
}

/// JSON diagnostic of one chain check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainReport {
    pub pair: usize,
    pub steps: usize,
    pub burn_in: usize,
    pub tv: f64,
    pub threshold: f64,
    pub pass: bool,
}
