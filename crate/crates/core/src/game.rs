//! The captioning game: perception, proposal, judgment, role swap and the
//! learning phases of both agents.
//!
//! # RNG consumption order
//!
//! A [`GameState`] owns one ChaCha8 stream seeded from [`GameConfig::seed`].
//! [`init_game`] draws, in order: agent A's replay buffer, agent B's replay
//! buffer, then for A and then B, a perception `z_d` and an initial caption
//! for every datum in ascending index order. Each [`play_round`] draws:
//!
//! 1. perception for A (all `d`), then for B;
//! 2. speaker A: for every `d`, the proposal tokens then one uniform `u`;
//! 3. speaker B: the same;
//! 4. text learning: ξ_A, φ_A, ξ_B, φ_B;
//! 5. latents re-sampled from captions, A then B;
//! 6. image learning: ψ_A, θ_A, ψ_B, θ_B (skipped without drawing when the
//!    image heads are frozen).
//!
//! `u` is drawn in every acceptance mode, so an always-accept run consumes
//! exactly the same stream as an approximate one.

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{AgentId, AgentParams, Caption, HeadId, Latent, Observation, TextEncoderParams};
use crate::error::{Error, Result};
use crate::learning::{update_block, Batch, ImageSample, LearnConfig, ReplayBuffer, TextSample, TrainTrace};
use crate::metrics::joint_caption_loglik;

/// Largest caption space the exact acceptance mode will enumerate.
pub const MAX_ENUMERATION: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AcceptanceMode {
    /// Listener-likelihood ratio.
    Approximate,
    /// Full MH ratio against the enumerated joint posterior (uniform prior).
    ExactOracle,
    /// `r = 1`: the fine-tune baseline.
    AlwaysAccept,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GameConfig {
    pub rounds: usize,
    pub acceptance: AcceptanceMode,
    pub freeze_image_heads: bool,
    pub seed: u64,
    /// Skip every learning phase; captions still evolve.
    pub frozen: bool,
    pub learn: LearnConfig,
}

impl Default for GameConfig {
    fn default() -> Self {
        Self {
            rounds: 30,
            acceptance: AcceptanceMode::Approximate,
            freeze_image_heads: false,
            seed: 0,
            frozen: false,
            learn: LearnConfig::default(),
        }
    }
}

impl GameConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        self.learn.validate()
    }
}

/// One line of the round stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    /// Fraction of B's proposals that A accepted.
    #[serde(rename = "acceptance_rate_A")]
    pub acceptance_rate_a: f64,
    /// Fraction of A's proposals that B accepted.
    #[serde(rename = "acceptance_rate_B")]
    pub acceptance_rate_b: f64,
    /// Joint caption log-likelihood of A's greedy captions, averaged over the evaluation set.
    #[serde(rename = "joint_loglik_A")]
    pub joint_loglik_a: f64,
    #[serde(rename = "joint_loglik_B")]
    pub joint_loglik_b: f64,
    pub wallclock_ms: f64,
    #[serde(default)]
    pub learning: Vec<TrainTrace>,
}

impl RoundReport {
    pub fn acceptance_rate(&self, id: AgentId) -> f64 {
        match id {
            AgentId::A => self.acceptance_rate_a,
            AgentId::B => self.acceptance_rate_b,
        }
    }

    pub fn joint_loglik(&self, id: AgentId) -> f64 {
        match id {
            AgentId::A => self.joint_loglik_a,
            AgentId::B => self.joint_loglik_b,
        }
    }
}

/// Writes reports as JSON lines.
pub fn write_reports<W: Write>(mut w: W, reports: &[RoundReport]) -> Result<()> {
    for r in reports {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_reports(s: &str) -> Result<Vec<RoundReport>> {
    s.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// State shared by both agents over the shared observation pool.
#[derive(Debug, Clone)]
pub struct GameState {
    pub config: GameConfig,
    agents: [AgentParams; 2],
    buffers: [ReplayBuffer; 2],
    observations: Vec<Observation>,
    /// Observations scored in each report; defaults to the game pool.
    eval_observations: Vec<Observation>,
    captions: [Vec<Caption>; 2],
    latents: [Vec<Latent>; 2],
    rng: ChaCha8Rng,
    round: usize,
}

fn slot(id: AgentId) -> usize {
    match id {
        AgentId::A => 0,
        AgentId::B => 1,
    }
}

impl GameState {
    pub fn agent(&self, id: AgentId) -> &AgentParams {
        &self.agents[slot(id)]
    }

    pub fn agents(&self) -> (&AgentParams, &AgentParams) {
        (&self.agents[0], &self.agents[1])
    }

    pub fn into_agents(self) -> (AgentParams, AgentParams) {
        let [a, b] = self.agents;
        (a, b)
    }

    pub fn buffer(&self, id: AgentId) -> &ReplayBuffer {
        &self.buffers[slot(id)]
    }

    pub fn captions(&self, id: AgentId) -> &[Caption] {
        &self.captions[slot(id)]
    }

    pub fn latents(&self, id: AgentId) -> &[Latent] {
        &self.latents[slot(id)]
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Rounds played so far.
    pub fn round(&self) -> usize {
        self.round
    }

    pub fn set_eval_observations(&mut self, observations: Vec<Observation>) -> Result<()> {
        if observations.is_empty() {
            return Err(Error::Input("evaluation set is empty".into()));
        }
        self.eval_observations = observations;
        Ok(())
    }

    /// Mean joint caption log-likelihood of each agent's greedy captions,
    /// with both agents perceiving through their image-encoder means.
    pub fn evaluate(&self) -> Result<(f64, f64)> {
        evaluate_joint_loglik(&self.agents[0], &self.agents[1], &self.eval_observations)
    }
}

/// Deterministic perception: the image-encoder mean.
pub fn perceive_mean(agent: &AgentParams, o: &Observation) -> Result<Latent> {
    Latent::new(agent.psi.mean(o)?)
}

/// `(mean over d of joint log-lik of A's greedy caption, same for B)`.
pub fn evaluate_joint_loglik(a: &AgentParams, b: &AgentParams, observations: &[Observation]) -> Result<(f64, f64)> {
    if observations.is_empty() {
        return Err(Error::Input("evaluation set is empty".into()));
    }
    let (mut sa, mut sb) = (0.0, 0.0);
    for o in observations {
        let za = perceive_mean(a, o)?;
        let zb = perceive_mean(b, o)?;
        sa += joint_caption_loglik(&a.phi, &b.phi, &za, &zb, &a.xi.greedy(&za))?;
        sb += joint_caption_loglik(&a.phi, &b.phi, &za, &zb, &b.xi.greedy(&zb))?;
    }
    let n = observations.len() as f64;
    Ok((sa / n, sb / n))
}

/// `min(1, p(z_li | c*; φ) / p(z_li | c_li; φ))`, in log space.
pub fn acceptance_ratio(listener_phi: &TextEncoderParams, z_li: &Latent, c_star: &Caption, c_li: &Caption) -> Result<f64> {
    let log_r = listener_phi.log_pdf(z_li, c_star)? - listener_phi.log_pdf(z_li, c_li)?;
    Ok(clamp_log_ratio(log_r))
}

fn clamp_log_ratio(log_r: f64) -> f64 {
    if log_r >= 0.0 {
        1.0
    } else {
        log_r.exp()
    }
}

/// Untruncated MH ratio with target `p(c | z_sp, z_li) ∝ p(z_sp|c) p(z_li|c)`
/// under a uniform caption prior and the speaker's decoder as proposal.
///
/// The normalizer cancels, but the caption space must still be enumerable.
pub fn exact_acceptance_ratio(
    speaker: &AgentParams,
    listener: &AgentParams,
    z_sp: &Latent,
    z_li: &Latent,
    c_star: &Caption,
    c_li: &Caption,
) -> Result<f64> {
    check_enumerable(speaker)?;
    let log_target = |c: &Caption| -> Result<f64> { Ok(speaker.phi.log_pdf(z_sp, c)? + listener.phi.log_pdf(z_li, c)?) };
    let log_r = log_target(c_star)? + speaker.xi.log_prob(c_li, z_sp)?
        - log_target(c_li)?
        - speaker.xi.log_prob(c_star, z_sp)?;
    Ok(clamp_log_ratio(log_r))
}

pub(crate) fn check_enumerable(agent: &AgentParams) -> Result<usize> {
    match agent.dims.caption_space() {
        Some(n) if n <= MAX_ENUMERATION => Ok(n),
        _ => Err(Error::Capability(format!(
            "caption space {}^{} exceeds the enumeration limit {MAX_ENUMERATION}",
            agent.dims.vocab, agent.dims.caption_len
        ))),
    }
}

/// Draws `u ~ U[0, 1)` and accepts iff `u ≤ r`.
pub fn judge<R: Rng + ?Sized>(r: f64, rng: &mut R) -> bool {
    let u: f64 = rng.random();
    u <= r
}

/// Acceptance probability of `c_star` under `mode`.
pub fn mode_ratio(
    mode: AcceptanceMode,
    speaker: &AgentParams,
    listener: &AgentParams,
    z_sp: &Latent,
    z_li: &Latent,
    c_star: &Caption,
    c_li: &Caption,
) -> Result<f64> {
    match mode {
        AcceptanceMode::Approximate => acceptance_ratio(&listener.phi, z_li, c_star, c_li),
        AcceptanceMode::ExactOracle => exact_acceptance_ratio(speaker, listener, z_sp, z_li, c_star, c_li),
        AcceptanceMode::AlwaysAccept => Ok(1.0),
    }
}

/// One proposal and judgment: returns the listener's caption afterwards and
/// whether the proposal was accepted.
#[allow(clippy::too_many_arguments)]
pub fn propose_and_judge<R: Rng + ?Sized>(
    mode: AcceptanceMode,
    speaker: &AgentParams,
    listener: &AgentParams,
    z_sp: &Latent,
    z_li: &Latent,
    c_li: &Caption,
    rng: &mut R,
) -> Result<(Caption, bool)> {
    let c_star = speaker.xi.sample(z_sp, rng);
    let r = mode_ratio(mode, speaker, listener, z_sp, z_li, &c_star, c_li)?;
    if judge(r, rng) {
        Ok((c_star, true))
    } else {
        Ok((c_li.clone(), false))
    }
}

/// Listener caption chain with frozen agents and fixed latents.
#[allow(clippy::too_many_arguments)]
pub fn mh_chain<R: Rng + ?Sized>(
    mode: AcceptanceMode,
    speaker: &AgentParams,
    listener: &AgentParams,
    z_sp: &Latent,
    z_li: &Latent,
    init: Caption,
    steps: usize,
    rng: &mut R,
) -> Result<Vec<Caption>> {
    let mut chain = Vec::with_capacity(steps);
    let mut current = init;
    for _ in 0..steps {
        current = propose_and_judge(mode, speaker, listener, z_sp, z_li, &current, rng)?.0;
        chain.push(current.clone());
    }
    Ok(chain)
}

/// Sets up a game over a shared observation pool.
///
/// `pretrain_a` / `pretrain_b` are the agents' own pre-training pairs; each
/// replay buffer keeps `min(capacity, len)` of them.
pub fn init_game(
    config: GameConfig,
    agent_a: AgentParams,
    agent_b: AgentParams,
    observations: Vec<Observation>,
    pretrain_a: &[(Observation, Caption)],
    pretrain_b: &[(Observation, Caption)],
) -> Result<GameState> {
    config.validate()?;
    if observations.is_empty() {
        return Err(Error::Input("the game needs at least one observation".into()));
    }
    if agent_a.dims != agent_b.dims {
        return Err(Error::Config(format!(
            "agent configurations differ: {:?} vs {:?}",
            agent_a.dims, agent_b.dims
        )));
    }
    agent_a.validate()?;
    agent_b.validate()?;
    if config.acceptance == AcceptanceMode::ExactOracle {
        check_enumerable(&agent_a)?;
    }
    if let Some(o) = observations.iter().find(|o| o.dim() != agent_a.dims.obs) {
        return Err(Error::Config(format!(
            "observation dimension {} does not match D_o = {}",
            o.dim(),
            agent_a.dims.obs
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let capacity = config.learn.buffer_capacity;
    let buffers = [
        ReplayBuffer::from_pretraining(&agent_a, pretrain_a, capacity, &mut rng)?,
        ReplayBuffer::from_pretraining(&agent_b, pretrain_b, capacity, &mut rng)?,
    ];
    let agents = [agent_a, agent_b];
    let mut latents: [Vec<Latent>; 2] = Default::default();
    let mut captions: [Vec<Caption>; 2] = Default::default();
    for i in 0..2 {
        for o in &observations {
            let z = agents[i].psi.sample(o, &mut rng)?;
            captions[i].push(agents[i].xi.sample(&z, &mut rng));
            latents[i].push(z);
        }
    }
    Ok(GameState {
        config,
        agents,
        buffers,
        eval_observations: observations.clone(),
        observations,
        captions,
        latents,
        rng,
        round: 0,
    })
}

fn perceive_all(state: &mut GameState) -> Result<()> {
    for i in 0..2 {
        for (d, o) in state.observations.iter().enumerate() {
            state.latents[i][d] = state.agents[i].psi.sample(o, &mut state.rng)?;
        }
    }
    Ok(())
}

/// Runs one speaker phase and returns the listener's acceptance count.
fn speaker_phase(state: &mut GameState, speaker: usize) -> Result<usize> {
    let listener = 1 - speaker;
    let mode = state.config.acceptance;
    let mut accepted = 0;
    for d in 0..state.observations.len() {
        let (caption, ok) = propose_and_judge(
            mode,
            &state.agents[speaker],
            &state.agents[listener],
            &state.latents[speaker][d],
            &state.latents[listener][d],
            &state.captions[listener][d],
            &mut state.rng,
        )?;
        if ok {
            accepted += 1;
            state.captions[listener][d] = caption;
        }
    }
    Ok(accepted)
}

fn learn_text(state: &mut GameState, traces: &mut Vec<TrainTrace>) -> Result<()> {
    for i in 0..2 {
        let batch: Vec<TextSample> = state.latents[i]
            .iter()
            .zip(&state.captions[i])
            .map(|(z, c)| TextSample { latent: z.clone(), caption: c.clone() })
            .collect();
        for head in [HeadId::Xi, HeadId::Phi] {
            let trace = update_block(
                &mut state.agents[i],
                head,
                Batch::Text(&batch),
                &state.buffers[i],
                &state.config.learn,
                &mut state.rng,
            )?;
            traces.push(trace);
        }
    }
    Ok(())
}

fn resample_latents(state: &mut GameState) {
    for i in 0..2 {
        for d in 0..state.observations.len() {
            state.latents[i][d] = state.agents[i].phi.sample(&state.captions[i][d], &mut state.rng);
        }
    }
}

fn learn_image(state: &mut GameState, traces: &mut Vec<TrainTrace>) -> Result<()> {
    for i in 0..2 {
        let batch: Vec<ImageSample> = state
            .observations
            .iter()
            .zip(&state.latents[i])
            .map(|(o, z)| ImageSample { observation: o.clone(), latent: z.clone() })
            .collect();
        for head in [HeadId::Psi, HeadId::Theta] {
            let trace = update_block(
                &mut state.agents[i],
                head,
                Batch::Image(&batch),
                &state.buffers[i],
                &state.config.learn,
                &mut state.rng,
            )?;
            traces.push(trace);
        }
    }
    Ok(())
}

/// Plays one full round (see the module docs for the step order).
pub fn play_round(state: &mut GameState) -> Result<RoundReport> {
    let start = Instant::now();
    perceive_all(state)?;
    let accepted_by_b = speaker_phase(state, 0)?;
    let accepted_by_a = speaker_phase(state, 1)?;
    let mut learning = Vec::new();
    if !state.config.frozen {
        learn_text(state, &mut learning)?;
        resample_latents(state);
        if !state.config.freeze_image_heads {
            learn_image(state, &mut learning)?;
        }
    }
    state.round += 1;
    let (joint_loglik_a, joint_loglik_b) = state.evaluate()?;
    let n = state.observations.len() as f64;
    Ok(RoundReport {
        round: state.round,
        acceptance_rate_a: accepted_by_a as f64 / n,
        acceptance_rate_b: accepted_by_b as f64 / n,
        joint_loglik_a,
        joint_loglik_b,
        wallclock_ms: start.elapsed().as_secs_f64() * 1e3,
        learning,
    })
}

/// Plays every configured round.
pub fn play_game(state: &mut GameState) -> Result<Vec<RoundReport>> {
    (0..state.config.rounds).map(|_| play_round(state)).collect()
}

#[cfg(test)]
mod tests;
