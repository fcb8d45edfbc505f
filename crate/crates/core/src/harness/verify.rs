//! The `mcmc-verify` experiment: frozen random agent pairs on an enumerable
//! world, listener chains against the exact target, and detailed balance
//! over every pair of captions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::density::normal_sample;
use crate::agent::{AgentId, AgentParams, Caption, Latent, ModelDims};
use crate::error::{Error, Result};
use crate::game::{mh_chain, AcceptanceMode};
use crate::oracle::{chain_tv_distance, default_burn_in, enumerate_posterior, transition_prob, ChainReport, Target};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    /// Random `(agents, z_A, z_B)` instances.
    pub pairs: usize,
    /// Judgment steps per chain.
    pub steps: usize,
    /// Largest TV distance a chain may end at.
    pub threshold: f64,
    pub vocab: usize,
    pub caption_len: usize,
    pub latent: usize,
    /// Standard deviation of the random agent weights.
    pub weight_std: f64,
    /// Largest detailed-balance violation tolerated.
    pub balance_tolerance: f64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            pairs: 5,
            steps: 50_000,
            threshold: 0.05,
            vocab: 4,
            caption_len: 3,
            latent: 3,
            weight_std: 1.0,
            balance_tolerance: 1e-9,
        }
    }
}

impl VerifyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pairs == 0 || self.steps < 10 {
            return Err(Error::Config("verify needs at least one pair and ten steps".into()));
        }
        if !(self.threshold > 0.0 && self.balance_tolerance > 0.0 && self.weight_std >= 0.0) {
            return Err(Error::Config("verify thresholds must be positive".into()));
        }
        ModelDims::new(self.vocab, self.latent, self.caption_len, self.latent)?;
        Ok(())
    }

    pub fn dims(&self) -> Result<ModelDims> {
        ModelDims::new(self.vocab, self.latent, self.caption_len, self.latent)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceCheck {
    pub pair: usize,
    pub caption_pairs: usize,
    pub max_abs_diff: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub dims: ModelDims,
    pub chains: Vec<ChainReport>,
    pub detailed_balance: Vec<BalanceCheck>,
    pub pass: bool,
}

impl VerifyReport {
    pub fn summary(&self) -> String {
        let worst_tv = self.chains.iter().map(|c| c.tv).fold(0.0, f64::max);
        let worst_db = self.detailed_balance.iter().map(|c| c.max_abs_diff).fold(0.0, f64::max);
        format!(
            "{} chains, worst TV {worst_tv:.4}; worst detailed-balance gap {worst_db:.3e}; {}",
            self.chains.len(),
            if self.pass { "pass" } else { "FAIL" }
        )
    }
}

/// One verification instance: agents and latents drawn from `rng`.
pub fn verification_instance(config: &VerifyConfig, rng: &mut ChaCha8Rng) -> Result<(AgentParams, AgentParams, Latent, Latent)> {
    let dims = config.dims()?;
    let a = AgentParams::random(dims, AgentId::A, config.weight_std, rng);
    let b = AgentParams::random(dims, AgentId::B, config.weight_std, rng);
    let mut z = || Latent::new((0..dims.latent).map(|_| normal_sample(rng, 0.0, 1.0)).collect());
    let za = z()?;
    let zb = z()?;
    Ok((a, b, za, zb))
}

/// Largest `|π(c1) P(c1→c2) − π(c2) P(c2→c1)|` over all caption pairs, with
/// A speaking and B judging.
pub fn detailed_balance_gap(a: &AgentParams, b: &AgentParams, za: &Latent, zb: &Latent) -> Result<(usize, f64)> {
    let table = enumerate_posterior(a, b, za, zb, Target::MhTarget { speaker: AgentId::A })?;
    let captions = Caption::enumerate(&a.dims)?;
    let mut worst = 0.0f64;
    let mut n = 0;
    for i in 0..captions.len() {
        for j in i + 1..captions.len() {
            let forward = table.probs[i] * transition_prob(AcceptanceMode::Approximate, a, b, za, zb, &captions[i], &captions[j])?;
            let back = table.probs[j] * transition_prob(AcceptanceMode::Approximate, a, b, za, zb, &captions[j], &captions[i])?;
            worst = worst.max((forward - back).abs());
            n += 1;
        }
    }
    Ok((n, worst))
}

pub fn run_verification(config: &VerifyConfig, seed: u64) -> Result<VerifyReport> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chains = Vec::with_capacity(config.pairs);
    let mut detailed_balance = Vec::with_capacity(config.pairs);
    for pair in 0..config.pairs {
        let (a, b, za, zb) = verification_instance(config, &mut rng)?;
        let table = enumerate_posterior(&a, &b, &za, &zb, Target::MhTarget { speaker: AgentId::A })?;
        let init = b.xi.sample(&zb, &mut rng);
        let chain = mh_chain(AcceptanceMode::Approximate, &a, &b, &za, &zb, init, config.steps, &mut rng)?;
        let burn_in = default_burn_in(chain.len());
        let tv = chain_tv_distance(&chain, &table, burn_in)?;
        chains.push(ChainReport {
            pair,
            steps: config.steps,
            burn_in,
            tv,
            threshold: config.threshold,
            pass: tv < config.threshold,
        });
        let (caption_pairs, gap) = detailed_balance_gap(&a, &b, &za, &zb)?;
        detailed_balance.push(BalanceCheck {
            pair,
            caption_pairs,
            max_abs_diff: gap,
            pass: gap < config.balance_tolerance,
        });
    }
    let pass = chains.iter().all(|c| c.pass) && detailed_balance.iter().all(|c| c.pass);
    Ok(VerifyReport { dims: config.dims()?, chains, detailed_balance, pass })
}
