//! Scalar densities and samplers shared by the four heads.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use statrs::function::gamma::ln_gamma;

/// Floor added to every softplus-mapped scale.
pub const SCALE_FLOOR: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Smooth positivity map used for the image-encoder scales.
pub fn positive_scale(raw: f64) -> f64 {
    SCALE_FLOOR + softplus(raw)
}

/// Inverse of [`positive_scale`] for targets above the floor.
pub fn raw_from_scale(scale: f64) -> f64 {
    let s = (scale - SCALE_FLOOR).max(1e-300);
    if s > 30.0 {
        s
    } else {
        s.exp_m1().ln()
    }
}

pub fn gaussian_log_pdf(x: f64, mean: f64, std: f64) -> f64 {
    let d = (x - mean) / std;
    -0.5 * LN_2PI - std.ln() - 0.5 * d * d
}

/// `log β − log(2α Γ(1/β))`, the per-dimension normalizer of the generalized Gaussian.
pub fn gen_gauss_log_norm(scale: f64, shape: f64) -> f64 {
    shape.ln() - (2.0 * scale).ln() - ln_gamma(1.0 / shape)
}

/// Log-density of the generalized Gaussian `∝ exp(−(|x−μ|/α)^β)`.
pub fn gen_gauss_log_pdf(x: f64, mean: f64, scale: f64, shape: f64) -> f64 {
    gen_gauss_log_norm(scale, shape) - ((x - mean).abs() / scale).powf(shape)
}

/// Draws via `|x−μ| = α·G^{1/β}` with `G ~ Gamma(1/β, 1)` and a fair random sign.
pub fn gen_gauss_sample<R: Rng + ?Sized>(rng: &mut R, mean: f64, scale: f64, shape: f64) -> f64 {
    let gamma = Gamma::new(1.0 / shape, 1.0).expect("shape is positive");
    let g: f64 = gamma.sample(rng);
    let magnitude = scale * g.powf(1.0 / shape);
    if rng.random::<bool>() {
        mean + magnitude
    } else {
        mean - magnitude
    }
}

/// Variance `α² Γ(3/β) / Γ(1/β)`.
pub fn gen_gauss_variance(scale: f64, shape: f64) -> f64 {
    scale * scale * (ln_gamma(3.0 / shape) - ln_gamma(1.0 / shape)).exp()
}

pub fn normal_sample<R: Rng + ?Sized>(rng: &mut R, mean: f64, std: f64) -> f64 {
    let n: f64 = StandardNormal.sample(rng);
    mean + std * n
}
