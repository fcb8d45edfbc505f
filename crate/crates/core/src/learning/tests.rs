use super::*;
use crate::agent::{AgentId, AgentParams, HeadId, ModelDims};
use crate::linalg::Matrix;
use crate::{Caption, Latent, Observation};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn dims() -> ModelDims {
    ModelDims::new(4, 3, 2, 5).unwrap()
}

fn random_agent(seed: u64) -> AgentParams {
    let mut r = rng(seed);
    let mut a = AgentParams::random(dims(), AgentId::A, 0.6, &mut r);
    a.phi.scale = (0..3).map(|_| r.random_range(0.5..1.5)).collect();
    a.phi.shape = r.random_range(1.5..3.0);
    a.theta.noise = r.random_range(0.5..1.5);
    for b in a.xi.biases.iter_mut().flatten() {
        *b = r.random_range(-1.0..1.0);
    }
    a
}

fn random_vec(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.5..1.5)).collect()
}

fn text_batch(seed: u64, n: usize) -> Vec<TextSample> {
    let d = dims();
    let mut r = rng(seed);
    (0..n)
        .map(|_| TextSample {
            latent: Latent::new(random_vec(&mut r, d.latent)).unwrap(),
            caption: Caption::new((0..d.caption_len).map(|_| r.random_range(0..d.vocab)).collect(), &d).unwrap(),
        })
        .collect()
}

fn image_batch(seed: u64, n: usize) -> Vec<ImageSample> {
    let d = dims();
    let mut r = rng(seed);
    (0..n)
        .map(|_| ImageSample {
            observation: Observation::new(random_vec(&mut r, d.obs)).unwrap(),
            latent: Latent::new(random_vec(&mut r, d.latent)).unwrap(),
        })
        .collect()
}

/// Buffer recorded from a perturbed copy of `agent`, so stored outputs differ.
fn buffer_for(agent: &AgentParams, seed: u64, n: usize) -> ReplayBuffer {
    let d = dims();
    let mut r = rng(seed);
    let mut old = random_agent(seed + 1000);
    old.id = agent.id;
    let data: Vec<(Observation, Caption)> = (0..n)
        .map(|_| {
            (
                Observation::new(random_vec(&mut r, d.obs)).unwrap(),
                Caption::new((0..d.caption_len).map(|_| r.random_range(0..d.vocab)).collect(), &d).unwrap(),
            )
        })
        .collect();
    ReplayBuffer::from_pretraining(&old, &data, n, &mut r).unwrap()
}

/// Central finite differences on the flat unconstrained parameters.
fn finite_difference(
    head: HeadId,
    agent: &AgentParams,
    batch: Batch<'_>,
    buffer: &ReplayBuffer,
    draw: &ReplayDraw,
    alpha: f64,
    beta: f64,
) -> Vec<f64> {
    let h = 1e-5;
    let base = agent.flat(head);
    (0..base.len())
        .map(|i| {
            let mut plus = agent.clone();
            let mut p = base.clone();
            p[i] += h;
            plus.set_flat(head, &p).unwrap();
            let mut minus = agent.clone();
            p[i] -= 2.0 * h;
            minus.set_flat(head, &p).unwrap();
            let lp = loss(head, &plus, batch, buffer, draw, alpha, beta).unwrap().total;
            let lm = loss(head, &minus, batch, buffer, draw, alpha, beta).unwrap().total;
            (lp - lm) / (2.0 * h)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

// loss_xi

#[test]
fn xi_loss_zero_for_certain_decoder() {
    let d = dims();
    let mut a = random_agent(1);
    let batch = text_batch(2, 3);
    // only valid when every sample carries the same caption
    let c = batch[0].caption.clone();
    let batch: Vec<TextSample> = batch.into_iter().map(|s| TextSample { caption: c.clone(), ..s }).collect();
    for p in 0..d.caption_len {
        a.xi.weights[p] = Matrix::zeros(d.vocab, d.latent);
        a.xi.biases[p] = vec![0.0; d.vocab];
        a.xi.biases[p][c.tokens()[p]] = 50.0;
    }
    let l = loss_xi(&a, &batch, &ReplayBuffer::default(), &ReplayDraw::none(), 0.0, 0.0).unwrap();
    assert_eq!(l.total, 0.0);
}

#[test]
fn xi_loss_uniform_decoder() {
    let d = dims();
    let mut a = random_agent(3);
    a.xi = crate::agent::TextDecoderParams::zeros(&d);
    let batch = text_batch(4, 7);
    let l = loss_xi(&a, &batch, &ReplayBuffer::default(), &ReplayDraw::none(), 0.0, 0.0).unwrap();
    assert!((l.total - d.caption_len as f64 * (d.vocab as f64).ln()).abs() < 1e-12);
}

#[test]
fn matching_term_vanishes_for_unchanged_model() {
    let a = random_agent(5);
    let d = dims();
    let mut r = rng(6);
    let data: Vec<(Observation, Caption)> = (0..10)
        .map(|_| {
            (
                Observation::new(random_vec(&mut r, d.obs)).unwrap(),
                Caption::new(vec![1, 2], &d).unwrap(),
            )
        })
        .collect();
    let buffer = ReplayBuffer::from_pretraining(&a, &data, 10, &mut r).unwrap();
    let draw = buffer.draw(8, &mut r);
    let batch = text_batch(7, 4);
    let images = image_batch(8, 4);
    for head in HeadId::ALL {
        let b = match head {
            HeadId::Xi | HeadId::Phi => Batch::Text(&batch),
            _ => Batch::Image(&images),
        };
        let l = loss(head, &a, b, &buffer, &draw, 1.0, 0.0).unwrap();
        assert_eq!(l.replay_match, 0.0, "{head}");
        let with = grad(head, &a, b, &buffer, &draw, 1.0, 0.0).unwrap();
        let without = grad(head, &a, b, &buffer, &draw, 0.0, 0.0).unwrap();
        assert!(rel_err(&with.values, &without.values) < 1e-12, "{head}");
    }
}

#[test]
fn xi_matching_term_is_mean_squared_logit_error() {
    let a = random_agent(21);
    let buffer = buffer_for(&a, 22, 6);
    let draw = buffer.draw(4, &mut rng(23));
    let l = loss(HeadId::Xi, &a, Batch::Text(&text_batch(24, 3)), &buffer, &draw, 1.0, 0.0).unwrap();
    let d = dims();
    let mut acc = 0.0;
    for &i in &draw.prime {
        let e = buffer.get(i);
        let z = e.latent.values();
        for pos in 0..d.caption_len {
            for tok in 0..d.vocab {
                let w = a.xi.weights[pos].row(tok);
                let cur: f64 = w.iter().zip(z).map(|(x, y)| x * y).sum::<f64>() + a.xi.biases[pos][tok];
                acc += (cur - e.logits[pos][tok]).powi(2);
            }
        }
    }
    let want = acc / (draw.prime.len() * d.caption_len * d.vocab) as f64;
    assert!(want > 0.0);
    assert!((l.replay_match - want).abs() < 1e-12 * want.max(1.0), "{} vs {want}", l.replay_match);
}

#[test]
fn no_replay_reduces_to_expectation_term() {
    let a = random_agent(9);
    let batch = text_batch(10, 5);
    let buffer = buffer_for(&a, 11, 6);
    let draw = buffer.draw(5, &mut rng(12));
    let l = loss_xi(&a, &batch, &buffer, &draw, 0.0, 0.0).unwrap();
    let direct: f64 = batch.iter().map(|s| -a.xi.log_prob(&s.caption, &s.latent).unwrap()).sum::<f64>() / 5.0;
    assert_eq!(l.total, direct);
    assert_eq!(l.data, direct);
    assert_eq!((l.replay_match, l.replay_nll), (0.0, 0.0));
}

#[test]
fn empty_buffer_zeroes_replay_and_warns() {
    let a = random_agent(13);
    let batch = text_batch(14, 5);
    let l = loss_phi(&a, &batch, &ReplayBuffer::empty(10), &ReplayDraw::none(), 0.05, 0.05).unwrap();
    assert!(l.warning.is_some());
    assert_eq!(l.total, l.data);
}

#[test]
fn empty_batch_is_rejected() {
    let a = random_agent(15);
    assert!(loss_xi(&a, &[], &ReplayBuffer::default(), &ReplayDraw::none(), 0.0, 0.0).is_err());
}

// loss_phi

#[test]
fn phi_loss_at_mean_is_gaussian_normalizer() {
    let d = dims();
    let mut a = random_agent(16);
    a.phi.shape = 2.0;
    let batch: Vec<TextSample> = text_batch(17, 4)
        .into_iter()
        .map(|s| TextSample { latent: Latent::new(a.phi.mean(&s.caption)).unwrap(), ..s })
        .collect();
    let l = loss_phi(&a, &batch, &ReplayBuffer::default(), &ReplayDraw::none(), 0.0, 0.0).unwrap();
    let want: f64 = a
        .phi
        .scale
        .iter()
        .map(|&s| 0.5 * std::f64::consts::PI.ln() + s.ln())
        .sum();
    assert!((l.total - want).abs() < 1e-12, "{} vs {want}", l.total);
    assert_eq!(d.latent, a.phi.scale.len());
}

#[test]
fn phi_loss_is_scale_sensitive() {
    let mut a = random_agent(18);
    let batch = text_batch(19, 3);
    let before = loss_phi(&a, &batch, &ReplayBuffer::default(), &ReplayDraw::none(), 0.0, 0.0).unwrap().total;
    a.phi.scale.iter_mut().for_each(|s| *s *= 2.0);
    let after = loss_phi(&a, &batch, &ReplayBuffer::default(), &ReplayDraw::none(), 0.0, 0.0).unwrap().total;
    assert_ne!(before, after);
}

#[test]
fn phi_loss_one_dimensional_by_hand() {
    let d = ModelDims::new(2, 1, 2, 1).unwrap();
    let mut r = rng(20);
    let mut a = AgentParams::random(d, AgentId::B, 1.0, &mut r);
    a.phi.embeddings = Matrix::from_vec(2, 1, vec![0.4, -1.0]).unwrap();
    a.phi.scale = vec![0.75];
    a.phi.shape = 1.5;
    let c = Caption::new(vec![0, 1], &d).unwrap();
    let batch = vec![TextSample { latent: Latent::new(vec![0.5]).unwrap(), caption: c }];
    // μ = (0.4 − 1.0)/2 = −0.3 ; t = |0.5 + 0.3| / 0.75 = 16/15
    let t: f64 = 0.8 / 0.75;
    let ln_gamma_two_thirds = 0.303_150_275_147_523; // ln Γ(1/1.5) = ln Γ(2/3)
    let want = -(1.5f64.ln() - (2.0f64 * 0.75).ln() - ln_gamma_two_thirds - t.powf(1.5));
    let got = loss_phi(&a, &batch, &ReplayBuffer::default(), &ReplayDraw::none(), 0.0, 0.0).unwrap().total;
    assert!((got - want).abs() < 1e-10, "{got} vs {want}");
}

// loss_psi / loss_theta

#[test]
fn psi_loss_cases() {
    let d = dims();
    let a = random_agent(21);
    let images = image_batch(22, 3);
    let at_mean: Vec<ImageSample> = images
        .iter()
        .map(|s| ImageSample { latent: Latent::new(a.psi.mean(&s.observation).unwrap()).unwrap(), ..s.clone() })
        .collect();
    let l = loss_psi(&a, &at_mean, &ReplayBuffer::default(), &ReplayDraw::none(), 0.0, 0.0).unwrap();
    let want = d.latent as f64 * 0.5 * LN_2PI + a.psi.std().iter().map(|s| s.ln()).sum::<f64>();
    assert!((l.total - want).abs() < 1e-12);

    // translating latents and the encoder bias together leaves the loss unchanged
    let base = loss_psi(&a, &images, &ReplayBuffer::default(), &ReplayDraw::none(), 0.0, 0.0).unwrap().total;
    let shift = [0.3, -2.0, 1.1];
    let mut b = a.clone();
    b.psi.bias.iter_mut().zip(shift).for_each(|(x, s)| *x += s);
    let moved: Vec<ImageSample> = images
        .iter()
        .map(|s| ImageSample {
            latent: Latent::new(s.latent.values().iter().zip(shift).map(|(z, s)| z + s).collect()).unwrap(),
            ..s.clone()
        })
        .collect();
    let shifted = loss_psi(&b, &moved, &ReplayBuffer::default(), &ReplayDraw::none(), 0.0, 0.0).unwrap().total;
    assert!((shifted - base).abs() < 1e-12);

    // 1-D by hand
    let d1 = ModelDims::new(2, 1, 1, 1).unwrap();
    let mut c = AgentParams::random(d1, AgentId::A, 1.0, &mut rng(23));
    c.psi.weight = Matrix::from_vec(1, 1, vec![2.0]).unwrap();
    c.psi.bias = vec![0.5];
    c.psi.raw_scale = vec![0.0]; // std = ln 2 + 1e-6
    let s = vec![ImageSample { observation: Observation::new(vec![1.0]).unwrap(), latent: Latent::new(vec![3.0]).unwrap() }];
    let std = 2f64.ln() + 1e-6;
    let want = 0.5 * LN_2PI + std.ln() + 0.5 * (0.5 / std).powi(2);
    let got = loss_psi(&c, &s, &ReplayBuffer::default(), &ReplayDraw::none(), 0.0, 0.0).unwrap().total;
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn theta_loss_cases() {
    let d = dims();
    let mut a = random_agent(24);
    a.theta.noise = 1.0;
    let images: Vec<ImageSample> = image_batch(25, 4)
        .into_iter()
        .map(|s| ImageSample { observation: Observation::new(a.theta.mean(&s.latent).unwrap()).unwrap(), ..s })
        .collect();
    let l = loss_theta(&a, &images, &ReplayBuffer::default(), &ReplayDraw::none(), 0.0, 0.0).unwrap();
    assert!((l.total - d.obs as f64 / 2.0 * LN_2PI).abs() < 1e-12);

    // exp(−loss) of a single 1-D datum integrates to one over o
    let d1 = ModelDims::new(2, 1, 1, 1).unwrap();
    let mut c = AgentParams::random(d1, AgentId::A, 1.0, &mut rng(26));
    c.theta.noise = 0.4;
    let z = Latent::new(vec![0.7]).unwrap();
    let f = |x: f64| {
        let s = vec![ImageSample { observation: Observation::new(vec![x]).unwrap(), latent: z.clone() }];
        (-loss_theta(&c, &s, &ReplayBuffer::default(), &ReplayDraw::none(), 0.0, 0.0).unwrap().total).exp()
    };
    let (lo, hi, n) = (-20.0, 20.0, 40_000);
    let h = (hi - lo) / n as f64;
    let mut acc = f(lo) + f(hi);
    for i in 1..n {
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(lo + i as f64 * h);
    }
    assert!((acc * h / 3.0 - 1.0).abs() < 1e-6);
}

// gradients

#[test]
fn gradients_match_finite_differences() {
    for seed in 0..5u64 {
        let a = random_agent(100 + seed);
        let text = text_batch(200 + seed, 5);
        let images = image_batch(300 + seed, 5);
        let buffer = buffer_for(&a, 400 + seed, 6);
        let draw = buffer.draw(4, &mut rng(500 + seed));
        for head in HeadId::ALL {
            let b = match head {
                HeadId::Xi | HeadId::Phi => Batch::Text(&text),
                _ => Batch::Image(&images),
            };
            let g = grad(head, &a, b, &buffer, &draw, 0.3, 0.7).unwrap();
            let fd = finite_difference(head, &a, b, &buffer, &draw, 0.3, 0.7);
            let e = rel_err(&g.values, &fd);
            assert!(e < 1e-4, "{head} seed {seed}: rel err {e}");
        }
    }
}

#[test]
fn saturated_decoder_has_vanishing_gradient() {
    let d = dims();
    let mut a = random_agent(30);
    let c = Caption::new(vec![3, 1], &d).unwrap();
    for p in 0..d.caption_len {
        a.xi.weights[p] = Matrix::zeros(d.vocab, d.latent);
        a.xi.biases[p] = vec![-25.0; d.vocab];
        a.xi.biases[p][c.tokens()[p]] = 25.0;
    }
    let batch: Vec<TextSample> = text_batch(31, 5).into_iter().map(|s| TextSample { caption: c.clone(), ..s }).collect();
    let g = grad(HeadId::Xi, &a, Batch::Text(&batch), &ReplayBuffer::default(), &ReplayDraw::none(), 0.0, 0.0).unwrap();
    assert!(g.norm() < 1e-6, "{}", g.norm());
}

#[test]
fn replay_draws_are_independent() {
    let a = random_agent(32);
    let buffer = buffer_for(&a, 33, 50);
    let draw = buffer.draw(40, &mut rng(34));
    assert_eq!(draw.prime.len(), 40);
    assert_eq!(draw.second.len(), 40);
    assert_ne!(draw.prime, draw.second);
}

#[test]
fn buffer_size_is_capped() {
    let a = random_agent(35);
    assert_eq!(buffer_for(&a, 36, 12).len(), 12);
    let d = dims();
    let data: Vec<(Observation, Caption)> = (0..7)
        .map(|i| (Observation::new(vec![i as f64; d.obs]).unwrap(), Caption::new(vec![0, 1], &d).unwrap()))
        .collect();
    assert_eq!(ReplayBuffer::from_pretraining(&a, &data, 5, &mut rng(1)).unwrap().len(), 5);
    assert_eq!(ReplayBuffer::from_pretraining(&a, &data, 50, &mut rng(1)).unwrap().len(), 7);
}

// update_block

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let mut a = random_agent(40);
    let before = a.clone();
    let batch = text_batch(41, 20);
    let cfg = LearnConfig { lr_xi: 0.0, ..LearnConfig::default() };
    update_block(&mut a, HeadId::Xi, Batch::Text(&batch), &ReplayBuffer::default(), &cfg, &mut rng(42)).unwrap();
    assert_eq!(a, before);
}

#[test]
fn sgd_recovers_gaussian_mean() {
    // symmetric sample with unit spread, so scale and shape stay near their optimum
    let d = ModelDims::new(1, 1, 1, 1).unwrap();
    let mut a = AgentParams::random(d, AgentId::A, 0.0, &mut rng(43));
    a.phi.scale = vec![1.0];
    a.phi.shape = 2.0;
    let mut r = rng(44);
    let c = Caption::new(vec![0], &d).unwrap();
    let centre = r.random_range(1.0..3.0);
    a.phi.embeddings.set(0, 0, centre + 0.3);
    let batch: Vec<TextSample> = (0..40)
        .map(|i| {
            let z = centre + if i % 2 == 0 { 0.5f64.sqrt() } else { -(0.5f64.sqrt()) };
            TextSample { latent: Latent::new(vec![z]).unwrap(), caption: c.clone() }
        })
        .collect();
    let mean = batch.iter().map(|s| s.latent.values()[0]).sum::<f64>() / 40.0;
    let cfg = LearnConfig { lr_phi: 0.3, alpha: 0.0, beta: 0.0, ..LearnConfig::default() };
    let trace = update_block(&mut a, HeadId::Phi, Batch::Text(&batch), &ReplayBuffer::default(), &cfg, &mut r).unwrap();
    assert!((a.phi.embeddings.get(0, 0) - mean).abs() < 1e-3, "{} vs {mean}", a.phi.embeddings.get(0, 0));
    assert!(trace.last() <= trace.initial());
}

#[test]
fn sgd_is_deterministic() {
    let batch = text_batch(45, 30);
    let base = random_agent(46);
    let buffer = buffer_for(&base, 47, 20);
    let cfg = LearnConfig { lr_xi: 0.05, epochs: 3, batch_size: 7, ..LearnConfig::default() };
    let run = || {
        let mut a = base.clone();
        update_block(&mut a, HeadId::Xi, Batch::Text(&batch), &buffer, &cfg, &mut rng(48)).unwrap();
        a
    };
    assert_eq!(run(), run());
}

#[test]
fn sgd_reports_divergence() {
    let mut a = random_agent(49);
    let images = image_batch(50, 20);
    let cfg = LearnConfig { lr_theta: 1e3, alpha: 0.0, beta: 0.0, ..LearnConfig::default() };
    let res = update_block(&mut a, HeadId::Theta, Batch::Image(&images), &ReplayBuffer::default(), &cfg, &mut rng(51));
    assert!(matches!(res, Err(crate::Error::Divergence(_))), "{res:?}");
}

#[test]
fn losses_decrease_under_small_steps() {
    let base = random_agent(52);
    let text = text_batch(53, 40);
    let images = image_batch(54, 40);
    let buffer = buffer_for(&base, 55, 20);
    let cfg = LearnConfig { lr_xi: 0.05, lr_phi: 0.01, lr_psi: 0.01, lr_theta: 0.01, ..LearnConfig::default() };
    for head in HeadId::ALL {
        let mut a = base.clone();
        let b = match head {
            HeadId::Xi | HeadId::Phi => Batch::Text(&text),
            _ => Batch::Image(&images),
        };
        let t = update_block(&mut a, head, b, &buffer, &cfg, &mut rng(56)).unwrap();
        assert!(t.last() <= t.initial(), "{head}: {:?}", t.losses);
    }
}
