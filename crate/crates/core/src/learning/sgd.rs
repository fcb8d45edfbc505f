use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{grad, loss, Batch, ImageSample, LearnConfig, ReplayBuffer, ReplayDraw, TextSample};
use crate::agent::{AgentParams, HeadId};
use crate::error::{Error, Result};

/// Per-epoch data loss of one head; `losses[0]` is the value before training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub head: HeadId,
    pub losses: Vec<f64>,
    /// Mini-batches that asked for replay but found an empty buffer.
    pub replay_warnings: usize,
}

impl TrainTrace {
    pub fn initial(&self) -> f64 {
        self.losses[0]
    }

    pub fn last(&self) -> f64 {
        *self.losses.last().expect("trace holds the initial loss")
    }
}

enum Owned {
    Text(Vec<TextSample>),
    Image(Vec<ImageSample>),
}

impl Owned {
    fn gather(batch: Batch<'_>, idx: &[usize]) -> Self {
        match batch {
            Batch::Text(s) => Owned::Text(idx.iter().map(|&i| s[i].clone()).collect()),
            Batch::Image(s) => Owned::Image(idx.iter().map(|&i| s[i].clone()).collect()),
        }
    }

    fn as_batch(&self) -> Batch<'_> {
        match self {
            Owned::Text(v) => Batch::Text(v),
            Owned::Image(v) => Batch::Image(v),
        }
    }
}

fn data_loss(head: HeadId, agent: &AgentParams, batch: Batch<'_>) -> Result<f64> {
    Ok(loss(head, agent, batch, &ReplayBuffer::default(), &ReplayDraw::none(), 0.0, 0.0)?.total)
}

/// Plain SGD on one head with shuffled mini-batches.
///
/// Every mini-batch draws its own pair of replay samples, each of the
/// mini-batch's size. Positive scalars move in log space (see
/// [`AgentParams::flat`]). Fails with [`Error::Divergence`] when the data loss
/// turns non-finite or ends more than ten times (in magnitude) above where it
/// started.
pub fn update_block<R: Rng + ?Sized>(
    agent: &mut AgentParams,
    head: HeadId,
    batch: Batch<'_>,
    buffer: &ReplayBuffer,
    config: &LearnConfig,
    rng: &mut R,
) -> Result<TrainTrace> {
    if batch.is_empty() {
        return Err(Error::Input(format!("no training data for {head}")));
    }
    let lr = config.lr(head);
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate for {head} must be non-negative")));
    }
    let initial = data_loss(head, agent, batch)?;
    let mut trace = TrainTrace { head, losses: vec![initial], replay_warnings: 0 };
    if lr == 0.0 {
        return Ok(trace);
    }
    let replay_wanted = config.alpha != 0.0 || config.beta != 0.0;
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mut flat = agent.flat(head);
    for _ in 0..config.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(config.batch_size) {
            let mini = Owned::gather(batch, chunk);
            let draw = if replay_wanted { buffer.draw(chunk.len(), rng) } else { ReplayDraw::none() };
            if replay_wanted && buffer.is_empty() {
                trace.replay_warnings += 1;
            }
            let g = grad(head, agent, mini.as_batch(), buffer, &draw, config.alpha, config.beta)?;
            for (p, gi) in flat.iter_mut().zip(&g.values) {
                *p -= lr * gi;
            }
            if flat.iter().any(|p| !p.is_finite()) {
                return Err(Error::Divergence(format!("{head} parameters became non-finite")));
            }
            agent.set_flat(head, &flat)?;
        }
        let l = match data_loss(head, agent, batch) {
            Err(Error::Invariant(msg)) => return Err(Error::Divergence(format!("{head}: {msg}"))),
            other => other?,
        };
        if !l.is_finite() {
            return Err(Error::Divergence(format!("{head} loss became non-finite")));
        }
        trace.losses.push(l);
    }
    let last = trace.last();
    if last - initial > 9.0 * initial.abs().max(1.0) {
        return Err(Error::Divergence(format!("{head} loss rose from {initial:.4} to {last:.4}")));
    }
    if trace.replay_warnings > 0 {
        log::warn!("{head}: replay requested but buffer is empty ({} mini-batches)", trace.replay_warnings);
    }
    Ok(trace)
}
