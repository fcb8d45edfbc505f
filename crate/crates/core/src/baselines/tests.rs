use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::agent::{AgentId, ModelDims};
use crate::game::{init_game, GameConfig};
use crate::learning::ReplayEntry;
use crate::linalg::Matrix;

fn dims() -> ModelDims {
    ModelDims::new(4, 3, 2, 3).unwrap()
}

fn agent(id: AgentId, seed: u64) -> AgentParams {
    AgentParams::random(dims(), id, 0.8, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn z(v: [f64; 3]) -> Latent {
    Latent::new(v.to_vec()).unwrap()
}

fn no_rng() -> Option<&'static mut ChaCha8Rng> {
    None
}

/// V = 2, L = 1 agent whose single position has the given logits at any z.
fn fixed_logits(id: AgentId, logits: [f64; 2]) -> AgentParams {
    let d = ModelDims::new(2, 1, 1, 1).unwrap();
    let mut a = AgentParams::random(d, id, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
    a.xi.biases = vec![logits.to_vec()];
    a
}

fn frequencies(n: usize, mut draw: impl FnMut() -> Caption) -> Vec<f64> {
    let mut h = vec![0.0; 16];
    for _ in 0..n {
        h[draw().index(4)] += 1.0 / n as f64;
    }
    h
}

fn tv(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

#[test]
fn finetune_round_is_always_accept_play() {
    let (a, b) = (agent(AgentId::A, 1), agent(AgentId::B, 2));
    let obs: Vec<Observation> = (0..10).map(|i| Observation::new(vec![i as f64 / 10.0, 0.3, -0.2]).unwrap()).collect();
    let cfg = GameConfig { rounds: 2, seed: 5, learn: LearnConfig { lr_xi: 0.05, lr_phi: 0.01, ..LearnConfig::default() }, ..GameConfig::default() };
    let accept = GameConfig { acceptance: AcceptanceMode::AlwaysAccept, ..cfg.clone() };
    let mut ft = init_game(cfg, a.clone(), b.clone(), obs.clone(), &[], &[]).unwrap();
    let mut aa = init_game(accept, a, b, obs, &[], &[]).unwrap();
    for _ in 0..2 {
        let mut r1 = finetune_round(&mut ft).unwrap();
        let mut r2 = play_round(&mut aa).unwrap();
        assert_eq!((r1.acceptance_rate_a, r1.acceptance_rate_b), (1.0, 1.0));
        r1.wallclock_ms = 0.0;
        r2.wallclock_ms = 0.0;
        assert_eq!(r1, r2);
    }
    assert_eq!(ft.agents(), aa.agents());
}

#[test]
fn one_hot_ensemble_weight_reproduces_member() {
    let (a, b) = (agent(AgentId::A, 3), agent(AgentId::B, 4));
    let (za, zb) = (z([0.5, -1.0, 0.2]), z([1.0, 0.0, -0.3]));
    let n = 40_000;
    let mut r1 = ChaCha8Rng::seed_from_u64(7);
    let mut cost = DecodeCost::default();
    let ens = frequencies(n, || ensemble_decode([&a, &b], [&za, &zb], [1.0, 0.0], Some(&mut r1), &mut cost).unwrap());
    let mut r2 = ChaCha8Rng::seed_from_u64(8);
    let solo = frequencies(n, || a.xi.sample(&za, &mut r2));
    assert!(tv(&ens, &solo) < 0.03);
}

#[test]
fn identical_members_reproduce_either() {
    let a = agent(AgentId::A, 5);
    let za = z([0.1, 0.9, -0.4]);
    let n = 40_000;
    let mut r1 = ChaCha8Rng::seed_from_u64(9);
    let mut cost = DecodeCost::default();
    let ens = frequencies(n, || ensemble_decode([&a, &a], [&za, &za], [0.3, 0.7], Some(&mut r1), &mut cost).unwrap());
    let mut r2 = ChaCha8Rng::seed_from_u64(10);
    let solo = frequencies(n, || a.xi.sample(&za, &mut r2));
    assert!(tv(&ens, &solo) < 0.03);
}

#[test]
fn averaged_logits_match_hand_probability() {
    // logits (2, 0) and (0, 1) with weights (0.25, 0.75) average to (0.5, 0.75).
    let a = fixed_logits(AgentId::A, [2.0, 0.0]);
    let b = fixed_logits(AgentId::B, [0.0, 1.0]);
    let z0 = Latent::new(vec![0.0]).unwrap();
    let want = 1.0 / (1.0 + (0.75f64 - 0.5).exp());
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut cost = DecodeCost::default();
    let n = 100_000;
    let zeros = (0..n)
        .filter(|_| ensemble_decode([&a, &b], [&z0, &z0], [0.25, 0.75], Some(&mut rng), &mut cost).unwrap().tokens()[0] == 0)
        .count();
    assert!((zeros as f64 / n as f64 - want).abs() < 0.01);
}

#[test]
fn ensemble_rejects_off_simplex_weights() {
    let a = agent(AgentId::A, 1);
    let za = z([0.0; 3]);
    let mut cost = DecodeCost::default();
    assert!(ensemble_decode([&a, &a], [&za, &za], [0.6, 0.6], no_rng(), &mut cost).is_err());
    assert!(ensemble_decode([&a, &a], [&za, &za], [-0.5, 1.5], no_rng(), &mut cost).is_err());
}

#[test]
fn equal_perplexities_give_even_weights() {
    let a = agent(AgentId::A, 6);
    let za = z([0.3, 0.3, 0.3]);
    let w = packllm_weights([&a, &a], [&za, &za], &[1, 2], 1.0).unwrap();
    assert_eq!(w, [0.5, 0.5]);
}

#[test]
fn zero_temperature_gives_even_weights() {
    let (a, b) = (agent(AgentId::A, 6), agent(AgentId::B, 7));
    let (za, zb) = (z([2.0, -1.0, 0.0]), z([0.0, 0.5, 3.0]));
    assert_eq!(packllm_weights([&a, &b], [&za, &zb], &[3, 0], 0.0).unwrap(), [0.5, 0.5]);
    assert_eq!(packllm_weights([&a, &b], [&za, &zb], &[], 1.0).unwrap(), [0.5, 0.5]);
}

#[test]
fn perplexity_weights_match_hand_values() {
    // Token 0 has probability 1/2 under A and 1/4 under B: perplexities 2 and 4,
    // so w_A = e^-2 / (e^-2 + e^-4) = 1 / (1 + e^-2) = 0.880797 to six places.
    let a = fixed_logits(AgentId::A, [0.0, 0.0]);
    let b = fixed_logits(AgentId::B, [0.0, 3f64.ln()]);
    let z0 = Latent::new(vec![0.0]).unwrap();
    let w = packllm_weights([&a, &b], [&z0, &z0], &[0], 1.0).unwrap();
    assert!((w[0] - 0.880797).abs() < 5e-7, "{w:?}");
    assert!((w[0] + w[1] - 1.0).abs() < 1e-15);
}

#[test]
fn fused_decoders_cost_two_evaluations_per_position() {
    let (a, b) = (agent(AgentId::A, 1), agent(AgentId::B, 2));
    let (za, zb) = (z([0.2, 0.1, 0.0]), z([0.0, -0.1, 0.4]));
    let mut ens = DecodeCost::default();
    let mut pack = DecodeCost::default();
    let mut single = DecodeCost::default();
    let before = (a.clone(), b.clone());
    for _ in 0..5 {
        ensemble_decode([&a, &b], [&za, &zb], [0.5, 0.5], no_rng(), &mut ens).unwrap();
        packllm_decode([&a, &b], [&za, &zb], 1.0, no_rng(), &mut pack).unwrap();
        single_greedy(&a, &za, &mut single);
    }
    assert_eq!((ens.logit_evals, ens.positions), (20, 10));
    assert_eq!(ens.per_position(), 2.0);
    assert_eq!(pack.per_position(), 2.0);
    assert_eq!(single.per_position(), 1.0);
    assert_eq!((&a, &b), (&before.0, &before.1));
}

#[test]
fn averaging_with_itself_is_identity() {
    let mut a = agent(AgentId::A, 12);
    a.phi.scale = vec![0.3, 1.7, 2.2];
    a.phi.shape = 1.3;
    a.theta.noise = 0.4;
    let avg = weight_average(&a, &a).unwrap();
    for head in HeadId::ALL {
        for (x, y) in avg.flat(head).iter().zip(a.flat(head)) {
            assert!((x - y).abs() < 1e-12);
        }
    }
    assert!((avg.phi.shape - 1.3).abs() < 1e-12);
    assert_eq!(avg.xi, a.xi);
}

#[test]
fn averaging_opposite_weights_gives_zero() {
    let a = agent(AgentId::A, 13);
    let mut b = a.clone();
    for m in b.xi.weights.iter_mut() {
        *m = Matrix::from_vec(m.rows(), m.cols(), m.as_slice().iter().map(|x| -x).collect()).unwrap();
    }
    b.psi.weight = Matrix::from_vec(3, 3, a.psi.weight.as_slice().iter().map(|x| -x).collect()).unwrap();
    let avg = weight_average(&a, &b).unwrap();
    assert!(avg.xi.weights.iter().all(|m| m.as_slice().iter().all(|x| *x == 0.0)));
    assert!(avg.psi.weight.as_slice().iter().all(|x| *x == 0.0));
}

#[test]
fn averaging_rejects_mismatched_agents() {
    let a = agent(AgentId::A, 1);
    let b = AgentParams::random(ModelDims::new(5, 3, 2, 3).unwrap(), AgentId::B, 0.1, &mut ChaCha8Rng::seed_from_u64(0));
    assert!(matches!(weight_average(&a, &b), Err(Error::Config(_))));
}

#[test]
fn self_distillation_has_zero_loss_and_gradient() {
    let a = agent(AgentId::A, 14);
    let samples: Vec<KdSample> = [[0.1, 0.2, 0.3], [-1.0, 0.5, 0.0]]
        .into_iter()
        .map(|v| {
            let latent = z(v);
            let teacher_probs = (0..2).map(|p| softmax(&a.xi.logits(p, latent.values()))).collect();
            KdSample { latent, teacher_probs }
        })
        .collect();
    let empty = ReplayBuffer::default();
    assert!(kd_loss(&a, &samples, &empty, &[], &[], 0.0, 0.0).unwrap().abs() < 1e-12);
    let g = kd_grad(&a, &samples, &empty, &[], &[], 0.0, 0.0).unwrap();
    assert!(g.iter().all(|x| x.abs() < 1e-12));
}

#[test]
fn binary_kl_matches_hand_value() {
    let s = fixed_logits(AgentId::A, [0.0, 0.0]);
    let sample = KdSample { latent: Latent::new(vec![0.0]).unwrap(), teacher_probs: vec![vec![0.8, 0.2]] };
    let want = 0.8 * (0.8f64 / 0.5).ln() + 0.2 * (0.2f64 / 0.5).ln();
    assert!((kd_divergence(&s, &sample) - want).abs() < 1e-10);
}

#[test]
fn kd_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for seed in 0..5 {
        let student = agent(AgentId::A, 100 + seed);
        let teacher = agent(AgentId::B, 200 + seed);
        let obs: Vec<Observation> = (0..3).map(|i| Observation::new(vec![i as f64, -0.5, 0.25]).unwrap()).collect();
        let samples = kd_samples(&student, &teacher, &obs, &mut rng).unwrap();
        let entries: Vec<ReplayEntry> = obs
            .iter()
            .enumerate()
            .map(|(i, o)| ReplayEntry::record(&teacher, o.clone(), z([0.3 * i as f64, 0.1, -0.2]), Caption::new(vec![i % 4, 1], &dims()).unwrap()).unwrap())
            .collect();
        let buffer = ReplayBuffer::from_entries(10, entries);
        let (prime, second) = (vec![0, 2, 2], vec![1, 0]);
        let (al, be) = (0.3, 0.7);
        let g = kd_grad(&student, &samples, &buffer, &prime, &second, al, be).unwrap();
        let base = student.flat(HeadId::Xi);
        let h = 1e-5;
        for i in 0..base.len() {
            let eval = |delta: f64| {
                let mut s = student.clone();
                let mut f = base.clone();
                f[i] += delta;
                s.set_flat(HeadId::Xi, &f).unwrap();
                kd_loss(&s, &samples, &buffer, &prime, &second, al, be).unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
            assert!(err < 1e-4, "seed {seed} coord {i}: fd {fd} analytic {}", g[i]);
        }
    }
}

#[test]
fn distillation_converges_to_teacher_on_one_latent() {
    let teacher = agent(AgentId::B, 17);
    let mut student = agent(AgentId::A, 18);
    let zt = z([0.4, -0.6, 1.0]);
    let teacher_probs: Vec<Vec<f64>> = (0..2).map(|p| softmax(&teacher.xi.logits(p, zt.values()))).collect();
    let data = vec![KdSample { latent: z([0.2, 0.2, -0.1]), teacher_probs: teacher_probs.clone() }];
    let cfg = LearnConfig { lr_xi: 0.5, alpha: 0.0, beta: 0.0, ..LearnConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    for _ in 0..2000 {
        kd_round(&mut student, &data, &ReplayBuffer::default(), &cfg, &mut rng).unwrap();
    }
    for (p, pt) in teacher_probs.iter().enumerate() {
        let ps = softmax(&student.xi.logits(p, data[0].latent.values()));
        assert!(tv(&ps, pt) < 0.01);
    }
}

#[test]
fn distillation_leaves_other_heads_alone() {
    let teacher = agent(AgentId::B, 20);
    let mut student = agent(AgentId::A, 21);
    let before = student.clone();
    let obs = vec![Observation::new(vec![0.5, 0.5, 0.5]).unwrap(); 6];
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let data = kd_samples(&student, &teacher, &obs, &mut rng).unwrap();
    let cfg = LearnConfig { lr_xi: 0.1, ..LearnConfig::default() };
    let trace = kd_round(&mut student, &data, &ReplayBuffer::default(), &cfg, &mut rng).unwrap();
    assert_eq!(trace.replay_warnings, 1);
    assert!(trace.last() < trace.initial());
    assert_eq!((&student.phi, &student.psi, &student.theta), (&before.phi, &before.psi, &before.theta));
    assert_ne!(student.xi, before.xi);
}
