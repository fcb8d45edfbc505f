//! Runs the listener's caption chain on a tiny caption space and compares
//! it with the enumerated target, then checks detailed balance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mhcg::game::{mh_chain, AcceptanceMode};
use mhcg::harness::verify::{detailed_balance_gap, verification_instance};
use mhcg::harness::VerifyConfig;
use mhcg::oracle::{chain_tv_distance, default_burn_in, enumerate_posterior, Target};
use mhcg::{AgentId, Caption};

fn main() -> mhcg::Result<()> {
    let config = VerifyConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for pair in 0..3 {
        let (a, b, za, zb) = verification_instance(&config, &mut rng)?;
        let table = enumerate_posterior(&a, &b, &za, &zb, Target::MhTarget { speaker: AgentId::A })?;
        let init = Caption::from_index(0, &a.dims);
        let chain = mh_chain(AcceptanceMode::Approximate, &a, &b, &za, &zb, init, config.steps, &mut rng)?;
        let tv = chain_tv_distance(&chain, &table, default_burn_in(chain.len()))?;
        let (pairs, gap) = detailed_balance_gap(&a, &b, &za, &zb)?;
        println!(
            "pair {pair}: {} captions, TV after {} steps {tv:.4}, detailed balance over {pairs} pairs {gap:.1e}",
            table.len(),
            config.steps
        );
    }
    Ok(())
}
