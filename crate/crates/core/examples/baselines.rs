//! Two-agent decoding baselines and their cost, plus weight averaging.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mhcg::baselines::{ensemble_decode, packllm_decode, packllm_weights, single_greedy, weight_average, DecodeCost};
use mhcg::{AgentId, AgentParams, Latent, ModelDims};

fn main() -> mhcg::Result<()> {
    let dims = ModelDims::new(10, 4, 3, 6)?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = AgentParams::random(dims, AgentId::A, 1.0, &mut rng);
    let b = AgentParams::random(dims, AgentId::B, 1.0, &mut rng);
    let latent = |rng: &mut ChaCha8Rng| Latent::new((0..dims.latent).map(|_| rng.random_range(-1.0..1.0)).collect());
    let (za, zb) = (latent(&mut rng)?, latent(&mut rng)?);

    let mut costs = [DecodeCost::default(), DecodeCost::default(), DecodeCost::default()];
    let single = single_greedy(&a, &za, &mut costs[0]);
    let ensemble = ensemble_decode::<ChaCha8Rng>([&a, &b], [&za, &zb], [0.5, 0.5], None, &mut costs[1])?;
    let pack = packllm_decode::<ChaCha8Rng>([&a, &b], [&za, &zb], 1.0, None, &mut costs[2])?;
    for (name, caption, cost) in [("single A", &single, &costs[0]), ("ensemble", &ensemble, &costs[1]), ("packllm", &pack, &costs[2])] {
        println!("{name:<9} {:?}  {} logit evaluations per position", caption.tokens(), cost.per_position());
    }
    let w = packllm_weights([&a, &b], [&za, &zb], &pack.tokens()[..1], 1.0)?;
    println!("packllm weights at the second position: A {:.3}, B {:.3}", w[0], w[1]);

    let avg = weight_average(&a, &b)?;
    let mut cost = DecodeCost::default();
    println!("weight average decodes {:?}", single_greedy(&avg, &za, &mut cost).tokens());
    Ok(())
}
