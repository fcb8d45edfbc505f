use super::*;
use crate::agent::ModelDims;
use crate::linalg::Matrix;

fn dims() -> ModelDims {
    ModelDims::new(4, 3, 2, 5).unwrap()
}

fn agent(id: AgentId, seed: u64) -> AgentParams {
    AgentParams::random(dims(), id, 0.8, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn pool(n: usize, seed: u64) -> Vec<Observation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| Observation::new((0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
        .collect()
}

fn pretrain(agent: &AgentParams, n: usize, seed: u64) -> Vec<(Observation, Caption)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool(n, seed)
        .into_iter()
        .map(|o| {
            let z = agent.psi.sample(&o, &mut rng).unwrap();
            let c = agent.xi.sample(&z, &mut rng);
            (o, c)
        })
        .collect()
}

fn config() -> GameConfig {
    GameConfig {
        rounds: 3,
        seed: 11,
        learn: LearnConfig { lr_xi: 0.05, lr_phi: 0.01, lr_psi: 0.01, lr_theta: 0.01, epochs: 2, batch_size: 8, buffer_capacity: 20, ..LearnConfig::default() },
        ..GameConfig::default()
    }
}

fn game(config: GameConfig) -> GameState {
    let (a, b) = (agent(AgentId::A, 1), agent(AgentId::B, 2));
    let pa = pretrain(&a, 30, 3);
    let pb = pretrain(&b, 12, 4);
    init_game(config, a, b, pool(24, 5), &pa, &pb).unwrap()
}

/// One-dimensional listener with token `t` embedded at `embed[t]`.
fn line_encoder(embed: &[f64]) -> (TextEncoderParams, ModelDims) {
    let d = ModelDims::new(embed.len(), 1, 1, 1).unwrap();
    let mut phi = TextEncoderParams::new(&d, 1.0, 2.0);
    phi.embeddings = Matrix::from_vec(embed.len(), 1, embed.to_vec()).unwrap();
    (phi, d)
}

#[test]
fn identical_caption_is_accepted_with_certainty() {
    let a = agent(AgentId::A, 9);
    let z = Latent::new(vec![0.3, -1.0, 2.0]).unwrap();
    let c = Caption::new(vec![1, 3], &dims()).unwrap();
    assert_eq!(acceptance_ratio(&a.phi, &z, &c, &c).unwrap(), 1.0);
}

#[test]
fn more_likely_proposal_clamps_to_one() {
    let (phi, d) = line_encoder(&[0.0, 2.0]);
    let z = Latent::new(vec![0.1]).unwrap();
    let near = Caption::new(vec![0], &d).unwrap();
    let far = Caption::new(vec![1], &d).unwrap();
    assert_eq!(acceptance_ratio(&phi, &z, &near, &far).unwrap(), 1.0);
    assert!(acceptance_ratio(&phi, &z, &far, &near).unwrap() < 1.0);
}

#[test]
fn log_two_gap_gives_one_half() {
    // β = 2, α = 1: log p(z|c) = const − (z − μ)², so μ* = √ln2 at z = 0 costs ln 2.
    let (phi, d) = line_encoder(&[0.0, std::f64::consts::LN_2.sqrt()]);
    let z = Latent::new(vec![0.0]).unwrap();
    let current = Caption::new(vec![0], &d).unwrap();
    let proposal = Caption::new(vec![1], &d).unwrap();
    let gap = phi.log_pdf(&z, &proposal).unwrap() - phi.log_pdf(&z, &current).unwrap();
    assert!((gap + std::f64::consts::LN_2).abs() < 1e-14);
    let r = acceptance_ratio(&phi, &z, &proposal, &current).unwrap();
    assert!((r - 0.5).abs() < 1e-12);
}

#[test]
fn ratio_ignores_shared_offsets_of_any_size() {
    // Extra dimensions that every token embeds identically add the same
    // constant to both log-densities; the constant reaches about -1e6 here.
    let d = ModelDims::new(2, 3, 1, 1).unwrap();
    let base = {
        let (phi, _) = line_encoder(&[0.0, std::f64::consts::LN_2.sqrt()]);
        phi
    };
    let z1 = Latent::new(vec![0.0]).unwrap();
    let want = acceptance_ratio(&base, &z1, &Caption::from_tokens(vec![1]), &Caption::from_tokens(vec![0])).unwrap();
    for (scale, offset) in [(1e-300, 0.0), (1.0, 1e3), (1e-3, 30.0)] {
        let mut phi = TextEncoderParams::new(&d, 1.0, 2.0);
        phi.embeddings = Matrix::from_vec(2, 3, vec![0.0, 0.0, 0.0, std::f64::consts::LN_2.sqrt(), 0.0, 0.0]).unwrap();
        phi.scale = vec![1.0, scale, 1.0];
        let z = Latent::new(vec![0.0, 0.0, offset]).unwrap();
        let cur = Caption::new(vec![0], &d).unwrap();
        let prop = Caption::new(vec![1], &d).unwrap();
        assert!(phi.log_pdf(&z, &cur).unwrap().abs() > 5.0);
        let r = acceptance_ratio(&phi, &z, &prop, &cur).unwrap();
        assert!((r - want).abs() < 1e-9, "scale {scale}, offset {offset}: {r}");
    }
}

#[test]
fn judge_with_certain_ratio_always_accepts() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert!((0..10_000).all(|_| judge(1.0, &mut rng)));
}

#[test]
fn judge_frequency_matches_ratio() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 100_000;
    let hits = (0..n).filter(|_| judge(0.5, &mut rng)).count();
    assert!((hits as f64 / n as f64 - 0.5).abs() < 0.01);
}

#[test]
fn always_accept_ignores_densities() {
    let (phi, d) = line_encoder(&[0.0, 40.0]);
    let z = Latent::new(vec![0.0]).unwrap();
    let li = AgentParams { phi, ..AgentParams::random(d, AgentId::B, 0.5, &mut ChaCha8Rng::seed_from_u64(0)) };
    let sp = AgentParams::random(d, AgentId::A, 0.5, &mut ChaCha8Rng::seed_from_u64(1));
    let good = Caption::new(vec![0], &d).unwrap();
    let bad = Caption::new(vec![1], &d).unwrap();
    assert!(mode_ratio(AcceptanceMode::Approximate, &sp, &li, &z, &z, &bad, &good).unwrap() < 1e-100);
    assert_eq!(mode_ratio(AcceptanceMode::AlwaysAccept, &sp, &li, &z, &z, &bad, &good).unwrap(), 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..200 {
        let (c, ok) = propose_and_judge(AcceptanceMode::AlwaysAccept, &sp, &li, &z, &z, &good, &mut rng).unwrap();
        assert!(ok);
        assert_eq!(c.len(), 1);
    }
}

#[test]
fn exact_ratio_matches_hand_computation() {
    let (sp, li) = (agent(AgentId::A, 21), agent(AgentId::B, 22));
    let z_sp = Latent::new(vec![0.5, 0.1, -0.2]).unwrap();
    let z_li = Latent::new(vec![-0.3, 0.8, 0.0]).unwrap();
    let c1 = Caption::new(vec![0, 3], &dims()).unwrap();
    let c2 = Caption::new(vec![2, 1], &dims()).unwrap();
    let pi = |c: &Caption| (sp.phi.log_pdf(&z_sp, c).unwrap() + li.phi.log_pdf(&z_li, c).unwrap()).exp();
    let q = |c: &Caption| sp.xi.log_prob(c, &z_sp).unwrap().exp();
    let want = (pi(&c2) * q(&c1) / (pi(&c1) * q(&c2))).min(1.0);
    let got = exact_acceptance_ratio(&sp, &li, &z_sp, &z_li, &c2, &c1).unwrap();
    assert!((got - want).abs() < 1e-12);
}

#[test]
fn exact_mode_refuses_large_caption_spaces() {
    let d = ModelDims::new(20, 2, 3, 2).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = AgentParams::random(d, AgentId::A, 0.1, &mut rng);
    let b = AgentParams::random(d, AgentId::B, 0.1, &mut rng);
    let z = Latent::new(vec![0.0, 0.0]).unwrap();
    let c = Caption::new(vec![1, 2, 3], &d).unwrap();
    assert!(matches!(exact_acceptance_ratio(&a, &b, &z, &z, &c, &c), Err(Error::Capability(_))));
    let cfg = GameConfig { acceptance: AcceptanceMode::ExactOracle, ..GameConfig::default() };
    let obs = vec![Observation::new(vec![0.0, 0.0]).unwrap()];
    assert!(matches!(init_game(cfg, a, b, obs, &[], &[]), Err(Error::Capability(_))));
}

#[test]
fn empty_pool_is_rejected() {
    let (a, b) = (agent(AgentId::A, 1), agent(AgentId::B, 2));
    assert!(matches!(init_game(config(), a, b, vec![], &[], &[]), Err(Error::Input(_))));
}

#[test]
fn mismatched_agents_are_rejected() {
    let a = agent(AgentId::A, 1);
    let other = ModelDims::new(5, 3, 2, 5).unwrap();
    let b = AgentParams::random(other, AgentId::B, 0.5, &mut ChaCha8Rng::seed_from_u64(2));
    assert!(matches!(init_game(config(), a, b, pool(3, 0), &[], &[]), Err(Error::Config(_))));
}

#[test]
fn zero_rounds_rejected() {
    let (a, b) = (agent(AgentId::A, 1), agent(AgentId::B, 2));
    let cfg = GameConfig { rounds: 0, ..config() };
    assert!(matches!(init_game(cfg, a, b, pool(3, 0), &[], &[]), Err(Error::Config(_))));
}

#[test]
fn buffers_hold_min_of_capacity_and_pretraining_size() {
    let g = game(config());
    assert_eq!(g.buffer(AgentId::A).len(), 20);
    assert_eq!(g.buffer(AgentId::B).len(), 12);
    assert_eq!(g.captions(AgentId::A).len(), 24);
    assert_eq!(g.latents(AgentId::B).len(), 24);
}

#[test]
fn identical_agents_start_with_identically_distributed_captions() {
    let a = agent(AgentId::A, 7);
    let mut b = a.clone();
    b.id = AgentId::B;
    let obs = vec![Observation::new(vec![0.4, -0.2, 0.9, 0.0, 0.3]).unwrap(); 20_000];
    let g = init_game(config(), a, b, obs, &[], &[]).unwrap();
    let hist = |id| {
        let mut h = vec![0.0f64; 16];
        for c in g.captions(id) {
            h[c.index(4)] += 1.0 / 20_000.0;
        }
        h
    };
    let (ha, hb) = (hist(AgentId::A), hist(AgentId::B));
    let tv: f64 = ha.iter().zip(&hb).map(|(x, y)| (x - y).abs()).sum::<f64>() / 2.0;
    // Two independent samples of 2e4 over 16 cells: TV noise is about 0.02.
    assert!(tv < 0.03, "tv {tv}");
}

#[test]
fn frozen_image_heads_stay_bitwise_identical() {
    let mut g = game(GameConfig { freeze_image_heads: true, ..config() });
    let before = (g.agent(AgentId::A).clone(), g.agent(AgentId::B).clone());
    for _ in 0..2 {
        play_round(&mut g).unwrap();
    }
    for (now, then) in [(g.agent(AgentId::A), &before.0), (g.agent(AgentId::B), &before.1)] {
        assert_eq!(now.psi, then.psi);
        assert_eq!(now.theta, then.theta);
        assert_ne!(now.xi, then.xi);
    }
}

#[test]
fn rounds_update_every_head_when_unfrozen() {
    let mut g = game(config());
    let before = g.agent(AgentId::B).clone();
    let report = play_round(&mut g).unwrap();
    let after = g.agent(AgentId::B);
    assert_ne!(after.psi, before.psi);
    assert_ne!(after.theta, before.theta);
    assert_ne!(after.phi, before.phi);
    assert_eq!(report.round, 1);
    assert_eq!(report.learning.len(), 8);
    assert!((0.0..=1.0).contains(&report.acceptance_rate_a));
    assert!(report.joint_loglik_a.is_finite() && report.joint_loglik_b.is_finite());
}

#[test]
fn frozen_game_changes_only_captions() {
    let mut g = game(GameConfig { frozen: true, ..config() });
    let before = g.agents().0.clone();
    let r = play_round(&mut g).unwrap();
    assert_eq!(g.agents().0, &before);
    assert!(r.learning.is_empty());
}

fn strip_time(mut r: Vec<RoundReport>) -> Vec<RoundReport> {
    for x in &mut r {
        x.wallclock_ms = 0.0;
    }
    r
}

#[test]
fn same_seed_same_trace() {
    let r1 = strip_time(play_game(&mut game(config())).unwrap());
    let r2 = strip_time(play_game(&mut game(config())).unwrap());
    assert_eq!(r1, r2);
    let r3 = strip_time(play_game(&mut game(GameConfig { seed: 12, ..config() })).unwrap());
    assert_ne!(r1, r3);
}

#[test]
fn always_accept_reports_full_acceptance() {
    let reports = play_game(&mut game(GameConfig { acceptance: AcceptanceMode::AlwaysAccept, ..config() })).unwrap();
    assert!(reports.iter().all(|r| r.acceptance_rate_a == 1.0 && r.acceptance_rate_b == 1.0));
}

#[test]
fn swapping_labels_mirrors_acceptance_statistics() {
    let (a, b) = (agent(AgentId::A, 31), agent(AgentId::B, 32));
    let obs = pool(4000, 33);
    let cfg = GameConfig { frozen: true, rounds: 1, ..config() };
    let mut fwd = init_game(cfg.clone(), a.clone(), b.clone(), obs.clone(), &[], &[]).unwrap();
    let mut rev = init_game(GameConfig { seed: 99, ..cfg }, b, a, obs, &[], &[]).unwrap();
    let f = play_round(&mut fwd).unwrap();
    let r = play_round(&mut rev).unwrap();
    // Binomial noise on 4000 trials is below 0.008 per rate.
    assert!((f.acceptance_rate_a - r.acceptance_rate_b).abs() < 0.04, "{f:?} {r:?}");
    assert!((f.acceptance_rate_b - r.acceptance_rate_a).abs() < 0.04);
    assert!((f.joint_loglik_a - r.joint_loglik_b).abs() < 1e-9);
}

#[test]
fn reports_round_trip_as_json_lines() {
    let reports = play_game(&mut game(GameConfig { rounds: 2, ..config() })).unwrap();
    let mut out = Vec::new();
    write_reports(&mut out, &reports).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().count(), 2);
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["round", "acceptance_rate_A", "acceptance_rate_B", "joint_loglik_A", "joint_loglik_B", "wallclock_ms", "learning"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    assert_eq!(read_reports(&text).unwrap(), reports);
}
