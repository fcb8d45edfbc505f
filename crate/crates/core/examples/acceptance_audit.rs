//! Compares the listener-only acceptance ratio with the full
//! Metropolis-Hastings ratio, first for random agents and then for a
//! speaker whose decoder matches its own encoder's posterior.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mhcg::oracle::{dominating_latent, encoder_posterior, exact_vs_approx_acceptance, fit_factorized_decoder};
use mhcg::{AgentId, AgentParams, Caption, Latent, ModelDims};

fn worst_gap(sp: &AgentParams, li: &AgentParams, z_sp: &Latent, rng: &mut ChaCha8Rng) -> mhcg::Result<f64> {
    let dims = sp.dims;
    let space = dims.caption_space().expect("small caption space");
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let z_li = Latent::new((0..dims.latent).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        let c_star = Caption::from_index(rng.random_range(0..space), &dims);
        let c_li = Caption::from_index(rng.random_range(0..space), &dims);
        worst = worst.max(exact_vs_approx_acceptance(sp, li, z_sp, &z_li, &c_star, &c_li)?.abs_diff);
    }
    Ok(worst)
}

fn main() -> mhcg::Result<()> {
    let dims = ModelDims::new(4, 3, 3, 3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut sp = AgentParams::random(dims, AgentId::A, 1.0, &mut rng);
    let li = AgentParams::random(dims, AgentId::B, 1.0, &mut rng);
    let z_sp = Latent::new(vec![0.3, -0.2, 0.8])?;
    println!("random speaker: worst |r_exact - r_approx| = {:.3}", worst_gap(&sp, &li, &z_sp, &mut rng)?);

    sp.phi.shape = 1.0;
    let z_sp = dominating_latent(&sp.phi, 0.5)?;
    let (xi, tv) = fit_factorized_decoder(&encoder_posterior(&sp.phi, &dims, &z_sp)?, &dims)?;
    sp.xi = xi;
    println!("decoder fitted to the speaker's posterior (TV {tv:.1e})");
    println!("matched speaker: worst |r_exact - r_approx| = {:.1e}", worst_gap(&sp, &li, &z_sp, &mut rng)?);
    Ok(())
}
