//! Comparison methods: fine-tuning without rejection, logit ensembles,
//! perplexity-weighted ensembles, weight averaging and distillation.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::sample_index;
use crate::agent::{AgentParams, Caption, HeadId, Latent, Observation};
use crate::error::{Error, Result};
use crate::game::{play_round, AcceptanceMode, GameState, RoundReport};
use crate::learning::{match_width, xi_accumulate, xi_nll_grad, xi_replay_grad, LearnConfig, ReplayBuffer, TrainTrace};
use crate::linalg::{argmax, log_softmax, softmax};

/// One game round with every proposal accepted.
pub fn finetune_round(state: &mut GameState) -> Result<RoundReport> {
    state.config.acceptance = AcceptanceMode::AlwaysAccept;
    play_round(state)
}

/// Counts of per-position logit evaluations spent decoding.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeCost {
    pub logit_evals: u64,
    pub positions: u64,
}

impl DecodeCost {
    /// Logit evaluations per generated position; 0 before any decoding.
    pub fn per_position(&self) -> f64 {
        if self.positions == 0 {
            0.0
        } else {
            self.logit_evals as f64 / self.positions as f64
        }
    }
}

fn check_simplex(w: [f64; 2]) -> Result<()> {
    if w.iter().any(|x| !(*x >= 0.0)) || ((w[0] + w[1]) - 1.0).abs() > 1e-9 {
        return Err(Error::Input(format!("weights {w:?} are not on the simplex")));
    }
    Ok(())
}

fn check_pair(a: &AgentParams, b: &AgentParams) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::Config(format!("agent configurations differ: {:?} vs {:?}", a.dims, b.dims)));
    }
    Ok(())
}

/// Single-agent greedy decoding with cost accounting.
pub fn single_greedy(agent: &AgentParams, z: &Latent, cost: &mut DecodeCost) -> Caption {
    let tokens = (0..agent.dims.caption_len)
        .map(|pos| {
            cost.logit_evals += 1;
            cost.positions += 1;
            argmax(&agent.xi.logits(pos, z.values()))
        })
        .collect();
    Caption::from_tokens(tokens)
}

fn mix(la: &[f64], lb: &[f64], w: [f64; 2]) -> Vec<f64> {
    la.iter().zip(lb).map(|(x, y)| w[0] * x + w[1] * y).collect()
}

/// Per-position weighted mean of both agents' logits, each agent reading its
/// own latent of the shared image. Samples when `rng` is given, otherwise
/// takes the argmax.
pub fn ensemble_decode<R: Rng + ?Sized>(
    agents: [&AgentParams; 2],
    z: [&Latent; 2],
    weights: [f64; 2],
    rng: Option<&mut R>,
    cost: &mut DecodeCost,
) -> Result<Caption> {
    check_pair(agents[0], agents[1])?;
    check_simplex(weights)?;
    let mut rng = rng;
    let mut tokens = Vec::with_capacity(agents[0].dims.caption_len);
    for pos in 0..agents[0].dims.caption_len {
        let la = agents[0].xi.logits(pos, z[0].values());
        let lb = agents[1].xi.logits(pos, z[1].values());
        cost.logit_evals += 2;
        cost.positions += 1;
        let logits = mix(&la, &lb, weights);
        tokens.push(match rng.as_deref_mut() {
            Some(r) => sample_index(&softmax(&logits), r),
            None => argmax(&logits),
        });
    }
    Ok(Caption::from_tokens(tokens))
}

/// `w_i ∝ exp(-λ · ppl_i)` with `ppl_i = exp(-log q_i(prefix) / len)`.
/// An empty prefix gives uniform weights.
pub fn packllm_weights(agents: [&AgentParams; 2], z: [&Latent; 2], prefix: &[usize], lambda: f64) -> Result<[f64; 2]> {
    check_pair(agents[0], agents[1])?;
    if prefix.len() > agents[0].dims.caption_len {
        return Err(Error::Input("prefix longer than a caption".into()));
    }
    if let Some(&t) = prefix.iter().find(|&&t| t >= agents[0].dims.vocab) {
        return Err(Error::Input(format!("token {t} outside the vocabulary")));
    }
    if prefix.is_empty() {
        return Ok([0.5, 0.5]);
    }
    let ppl = |i: usize| -> f64 {
        let lp: f64 = prefix
            .iter()
            .enumerate()
            .map(|(pos, &t)| log_softmax(&agents[i].xi.logits(pos, z[i].values()))[t])
            .sum();
        (-lp / prefix.len() as f64).exp()
    };
    Ok(weights_from_perplexity([ppl(0), ppl(1)], lambda))
}

fn weights_from_perplexity(ppl: [f64; 2], lambda: f64) -> [f64; 2] {
    let s = [-lambda * ppl[0], -lambda * ppl[1]];
    let m = s[0].max(s[1]);
    if !m.is_finite() {
        return [0.5, 0.5];
    }
    let e = [(s[0] - m).exp(), (s[1] - m).exp()];
    let t = e[0] + e[1];
    [e[0] / t, e[1] / t]
}

/// Ensemble decoding whose weights at each position come from the
/// perplexities of the prefix generated so far. Logits computed at a
/// position are reused for later prefix scores, so the cost stays at two
/// evaluations per position.
pub fn packllm_decode<R: Rng + ?Sized>(
    agents: [&AgentParams; 2],
    z: [&Latent; 2],
    lambda: f64,
    rng: Option<&mut R>,
    cost: &mut DecodeCost,
) -> Result<Caption> {
    check_pair(agents[0], agents[1])?;
    let mut rng = rng;
    let len = agents[0].dims.caption_len;
    let mut tokens = Vec::with_capacity(len);
    let mut prefix_lp = [0.0f64; 2];
    for pos in 0..len {
        let w = if pos == 0 {
            [0.5, 0.5]
        } else {
            let n = pos as f64;
            weights_from_perplexity([(-prefix_lp[0] / n).exp(), (-prefix_lp[1] / n).exp()], lambda)
        };
        let la = agents[0].xi.logits(pos, z[0].values());
        let lb = agents[1].xi.logits(pos, z[1].values());
        cost.logit_evals += 2;
        cost.positions += 1;
        let logits = mix(&la, &lb, w);
        let tok = match rng.as_deref_mut() {
            Some(r) => sample_index(&softmax(&logits), r),
            None => argmax(&logits),
        };
        prefix_lp[0] += log_softmax(&la)[tok];
        prefix_lp[1] += log_softmax(&lb)[tok];
        tokens.push(tok);
    }
    Ok(Caption::from_tokens(tokens))
}

/// Elementwise mean of both agents in unconstrained coordinates (log space
/// for the positive scalars). The result keeps `a`'s id.
pub fn weight_average(a: &AgentParams, b: &AgentParams) -> Result<AgentParams> {
    check_pair(a, b)?;
    let mut out = a.clone();
    for head in HeadId::ALL {
        let avg: Vec<f64> = a.flat(head).iter().zip(b.flat(head)).map(|(x, y)| 0.5 * (x + y)).collect();
        out.set_flat(head, &avg)?;
    }
    out.validate()?;
    Ok(out)
}

/// Distillation target for one image: the student's latent and the
/// teacher's per-position token distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct KdSample {
    pub latent: Latent,
    pub teacher_probs: Vec<Vec<f64>>,
}

/// Perceives every observation with both agents and records the teacher's
/// softmax outputs. Draws the student's latent, then the teacher's, per image.
pub fn kd_samples<R: Rng + ?Sized>(
    student: &AgentParams,
    teacher: &AgentParams,
    observations: &[Observation],
    rng: &mut R,
) -> Result<Vec<KdSample>> {
    check_pair(student, teacher)?;
    observations
        .iter()
        .map(|o| {
            let latent = student.psi.sample(o, rng)?;
            let zt = teacher.psi.sample(o, rng)?;
            let teacher_probs = (0..teacher.dims.caption_len)
                .map(|pos| softmax(&teacher.xi.logits(pos, zt.values())))
                .collect();
            Ok(KdSample { latent, teacher_probs })
        })
        .collect()
}

/// `Σ_pos KL(p_t || p_s)`.
pub fn kd_divergence(student: &AgentParams, sample: &KdSample) -> f64 {
    sample
        .teacher_probs
        .iter()
        .enumerate()
        .map(|(pos, pt)| {
            let ls = log_softmax(&student.xi.logits(pos, sample.latent.values()));
            pt.iter()
                .zip(&ls)
                .filter(|(p, _)| **p > 0.0)
                .map(|(p, l)| p * (p.ln() - l))
                .sum::<f64>()
        })
        .sum()
}

/// Mean KL over `batch` plus the decoder's replay terms (mean squared
/// logit error, replayed NLL) over `prime` and
/// `second` buffer indices.
pub fn kd_loss(
    student: &AgentParams,
    batch: &[KdSample],
    buffer: &ReplayBuffer,
    prime: &[usize],
    second: &[usize],
    alpha: f64,
    beta: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Input("distillation batch is empty".into()));
    }
    let mut total = batch.iter().map(|s| kd_divergence(student, s)).sum::<f64>() / batch.len() as f64;
    if alpha != 0.0 && !prime.is_empty() {
        let m: f64 = prime
            .iter()
            .map(|&i| {
                let e = buffer.get(i);
                (0..student.dims.caption_len)
                    .map(|pos| {
                        let cur = student.xi.logits(pos, e.latent.values());
                        cur.iter().zip(&e.logits[pos]).map(|(c, h)| (c - h) * (c - h)).sum::<f64>()
                    })
                    .sum::<f64>()
            })
            .sum();
        total += alpha * m / (prime.len() * match_width(HeadId::Xi, &student.dims)) as f64;
    }
    if beta != 0.0 && !second.is_empty() {
        let mut nll = 0.0;
        for &i in second {
            let e = buffer.get(i);
            nll -= student.xi.log_prob(&e.caption, &e.latent)?;
        }
        total += beta * nll / second.len() as f64;
    }
    Ok(total)
}

/// Gradient of [`kd_loss`] in the ξ layout of [`AgentParams::flat`].
pub fn kd_grad(
    student: &AgentParams,
    batch: &[KdSample],
    buffer: &ReplayBuffer,
    prime: &[usize],
    second: &[usize],
    alpha: f64,
    beta: f64,
) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::Input("distillation batch is empty".into()));
    }
    let mut g = vec![0.0; student.flat_len(HeadId::Xi)];
    let w = 1.0 / batch.len() as f64;
    for s in batch {
        for (pos, pt) in s.teacher_probs.iter().enumerate() {
            let ps = softmax(&student.xi.logits(pos, s.latent.values()));
            let d: Vec<f64> = ps.iter().zip(pt).map(|(a, b)| a - b).collect();
            xi_accumulate(student, pos, s.latent.values(), &d, w, &mut g);
        }
    }
    if alpha != 0.0 && !prime.is_empty() {
        let entries: Vec<_> = prime.iter().map(|&i| buffer.get(i)).collect();
        xi_replay_grad(student, &entries, alpha / (prime.len() * match_width(HeadId::Xi, &student.dims)) as f64, &mut g);
    }
    if beta != 0.0 && !second.is_empty() {
        let ws = beta / second.len() as f64;
        for &i in second {
            let e = buffer.get(i);
            xi_nll_grad(student, &e.latent, &e.caption, ws, &mut g);
        }
    }
    if g.iter().any(|x| !x.is_finite()) {
        return Err(Error::Divergence("distillation gradient is non-finite".into()));
    }
    Ok(g)
}

/// One epoch of mini-batch SGD on the student's text decoder. The trace holds
/// the mean KL before and after.
pub fn kd_round<R: Rng + ?Sized>(
    student: &mut AgentParams,
    data: &[KdSample],
    buffer: &ReplayBuffer,
    config: &LearnConfig,
    rng: &mut R,
) -> Result<TrainTrace> {
    if data.is_empty() {
        return Err(Error::Input("no distillation data".into()));
    }
    config.validate()?;
    let kl = |s: &AgentParams| data.iter().map(|d| kd_divergence(s, d)).sum::<f64>() / data.len() as f64;
    let initial = kl(student);
    let mut trace = TrainTrace { head: HeadId::Xi, losses: vec![initial], replay_warnings: 0 };
    if config.lr_xi == 0.0 {
        return Ok(trace);
    }
    let replay = config.alpha != 0.0 || config.beta != 0.0;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut flat = student.flat(HeadId::Xi);
    for chunk in order.chunks(config.batch_size) {
        let mini: Vec<KdSample> = chunk.iter().map(|&i| data[i].clone()).collect();
        let draw = if replay { buffer.draw(chunk.len(), rng) } else { Default::default() };
        if replay && buffer.is_empty() {
            trace.replay_warnings += 1;
        }
        let g = kd_grad(student, &mini, buffer, &draw.prime, &draw.second, config.alpha, config.beta)?;
        for (p, gi) in flat.iter_mut().zip(&g) {
            *p -= config.lr_xi * gi;
        }
        if flat.iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence("student decoder became non-finite".into()));
        }
        student.set_flat(HeadId::Xi, &flat)?;
    }
    let last = kl(student);
    if !last.is_finite() || last - initial > 9.0 * initial.abs().max(1.0) {
        return Err(Error::Divergence(format!("distillation KL rose from {initial:.4} to {last:.4}")));
    }
    trace.losses.push(last);
    Ok(trace)
}

#[cfg(test)]
mod tests;
