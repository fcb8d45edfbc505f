//! Pre-trains two agents on their own halves of the world, then plays a
//! short captioning game on the shared pool and streams the round reports
//! (learning traces dropped).

use std::io::stdout;

use mhcg::game::{init_game, play_round, write_reports};
use mhcg::harness::{caption_counts, prepare, pretrain_stage, ExperimentConfig};
use mhcg::metrics::category_metrics;
use mhcg::AgentId;

fn main() -> mhcg::Result<()> {
    let mut config = ExperimentConfig { pool_size: 200, ..ExperimentConfig::default() };
    config.game.rounds = 8;
    let dir = std::env::temp_dir().join("mhcg-game-example");
    let prepared = prepare(&config)?;
    let ck = pretrain_stage(&config, &prepared, &dir)?;
    let s = &prepared.subsets;
    let mut state = init_game(
        config.game.clone(),
        ck.a,
        ck.b,
        prepared.observations(&s.pool),
        &prepared.pairs(&s.train_a),
        &prepared.pairs(&s.train_b),
    )?;
    state.set_eval_observations(prepared.observations(&s.eval))?;
    for _ in 0..config.game.rounds {
        let mut report = play_round(&mut state)?;
        report.learning.clear();
        write_reports(stdout(), std::slice::from_ref(&report))?;
    }
    for id in [AgentId::A, AgentId::B] {
        let m = category_metrics(&caption_counts(&prepared, &s.pool, state.captions(id)))?;
        println!("agent {id}: pool captions OF1 {:.3}, CF1 {:.3}", m.of1, m.cf1);
    }
    Ok(())
}
