use rand::Rng;
use serde::{Deserialize, Serialize};

use super::density::{self, positive_scale};
use super::{Caption, Latent, ModelDims, Observation};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

/// Draws an index from a probability vector by inversion.
pub(crate) fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Position-wise linear-softmax caption decoder `q(c | z; ξ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextDecoderParams {
    /// One `V × K` matrix per caption position.
    pub weights: Vec<Matrix>,
    /// One length-`V` bias per caption position.
    pub biases: Vec<Vec<f64>>,
}

impl TextDecoderParams {
    pub fn zeros(dims: &ModelDims) -> Self {
        Self {
            weights: vec![Matrix::zeros(dims.vocab, dims.latent); dims.caption_len],
            biases: vec![vec![0.0; dims.vocab]; dims.caption_len],
        }
    }

    pub fn caption_len(&self) -> usize {
        self.weights.len()
    }

    pub fn vocab(&self) -> usize {
        self.biases.first().map_or(0, Vec::len)
    }

    pub fn logits(&self, pos: usize, z: &[f64]) -> Vec<f64> {
        self.weights[pos].affine(z, &self.biases[pos])
    }

    /// `Σ_pos log softmax(A_pos z + u_pos)[c_pos]`.
    pub fn log_prob(&self, caption: &Caption, z: &Latent) -> Result<f64> {
        caption.check(self.vocab(), self.caption_len())?;
        Ok(caption
            .tokens()
            .iter()
            .enumerate()
            .map(|(pos, &tok)| linalg::log_softmax(&self.logits(pos, z.values()))[tok])
            .sum())
    }

    pub fn sample<R: Rng + ?Sized>(&self, z: &Latent, rng: &mut R) -> Caption {
        let tokens = (0..self.caption_len())
            .map(|pos| sample_index(&linalg::softmax(&self.logits(pos, z.values())), rng))
            .collect();
        Caption::from_tokens(tokens)
    }

    /// Most probable token at every position.
    pub fn greedy(&self, z: &Latent) -> Caption {
        let tokens = (0..self.caption_len())
            .map(|pos| linalg::argmax(&self.logits(pos, z.values())))
            .collect();
        Caption::from_tokens(tokens)
    }
}

/// Mean-of-embeddings generalized-Gaussian text encoder `p(z | c; φ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderParams {
    /// Token embedding table, `V × K`.
    pub embeddings: Matrix,
    /// Per-dimension scale α, strictly positive.
    pub scale: Vec<f64>,
    /// Shared shape exponent β, strictly positive.
    pub shape: f64,
}

impl TextEncoderParams {
    pub fn new(dims: &ModelDims, scale: f64, shape: f64) -> Self {
        Self {
            embeddings: Matrix::zeros(dims.vocab, dims.latent),
            scale: vec![scale; dims.latent],
            shape,
        }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.shape > 0.0 && self.shape.is_finite()) {
            return Err(Error::Invariant(format!("text encoder shape must be positive, got {}", self.shape)));
        }
        if let Some(a) = self.scale.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
            return Err(Error::Invariant(format!("text encoder scale must be positive, got {a}")));
        }
        Ok(())
    }

    /// Unweighted mean of the caption's token embeddings.
    pub fn mean(&self, caption: &Caption) -> Vec<f64> {
        let k = self.embeddings.cols();
        let mut mu = vec![0.0; k];
        for &tok in caption.tokens() {
            for (m, e) in mu.iter_mut().zip(self.embeddings.row(tok)) {
                *m += e;
            }
        }
        let n = caption.len() as f64;
        mu.iter_mut().for_each(|m| *m /= n);
        mu
    }

    pub fn log_pdf(&self, z: &Latent, caption: &Caption) -> Result<f64> {
        self.check()?;
        caption.check(self.embeddings.rows(), caption.len())?;
        if z.dim() != self.scale.len() {
            return Err(Error::Config(format!("latent has {} dims, encoder expects {}", z.dim(), self.scale.len())));
        }
        let mu = self.mean(caption);
        Ok(z.values()
            .iter()
            .zip(&mu)
            .zip(&self.scale)
            .map(|((&zk, &mk), &ak)| density::gen_gauss_log_pdf(zk, mk, ak, self.shape))
            .sum())
    }

    /// Normalizer `Σ_k [log β − log(2 α_k Γ(1/β))]`, the log-density at `z = μ(c)`.
    pub fn log_normalizer(&self) -> f64 {
        self.scale.iter().map(|&a| density::gen_gauss_log_norm(a, self.shape)).sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, caption: &Caption, rng: &mut R) -> Latent {
        let mu = self.mean(caption);
        let values = mu
            .iter()
            .zip(&self.scale)
            .map(|(&m, &a)| density::gen_gauss_sample(rng, m, a, self.shape))
            .collect();
        Latent::from_vec_unchecked(values)
    }
}

/// Diagonal-Gaussian image encoder `q(z | o; ψ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEncoderParams {
    /// `K × D_o`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    /// Unconstrained scales; the standard deviation is `positive_scale(raw)`.
    pub raw_scale: Vec<f64>,
}

impl ImageEncoderParams {
    pub fn zeros(dims: &ModelDims, std: f64) -> Self {
        Self {
            weight: Matrix::zeros(dims.latent, dims.obs),
            bias: vec![0.0; dims.latent],
            raw_scale: vec![density::raw_from_scale(std); dims.latent],
        }
    }

    fn check_obs(&self, o: &Observation) -> Result<()> {
        if o.dim() != self.weight.cols() {
            return Err(Error::Config(format!(
                "observation has {} dims, image encoder expects {}",
                o.dim(),
                self.weight.cols()
            )));
        }
        Ok(())
    }

    pub fn mean(&self, o: &Observation) -> Result<Vec<f64>> {
        self.check_obs(o)?;
        Ok(self.weight.affine(o.values(), &self.bias))
    }

    pub fn std(&self) -> Vec<f64> {
        self.raw_scale.iter().map(|&s| positive_scale(s)).collect()
    }

    /// Perception: one draw of `z` for observation `o`.
    pub fn sample<R: Rng + ?Sized>(&self, o: &Observation, rng: &mut R) -> Result<Latent> {
        let mean = self.mean(o)?;
        let values = mean
            .iter()
            .zip(self.std())
            .map(|(&m, s)| density::normal_sample(rng, m, s))
            .collect();
        Ok(Latent::from_vec_unchecked(values))
    }

    pub fn log_pdf(&self, z: &Latent, o: &Observation) -> Result<f64> {
        let mean = self.mean(o)?;
        if z.dim() != mean.len() {
            return Err(Error::Config("latent dimension mismatch".into()));
        }
        Ok(z.values()
            .iter()
            .zip(&mean)
            .zip(self.std())
            .map(|((&zk, &mk), s)| density::gaussian_log_pdf(zk, mk, s))
            .sum())
    }
}

/// Isotropic-Gaussian image decoder `p(o | z; θ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageDecoderParams {
    /// `D_o × K`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    /// Observation noise σ_θ, strictly positive.
    pub noise: f64,
}

impl ImageDecoderParams {
    pub fn zeros(dims: &ModelDims, noise: f64) -> Self {
        Self {
            weight: Matrix::zeros(dims.obs, dims.latent),
            bias: vec![0.0; dims.obs],
            noise,
        }
    }

    pub fn mean(&self, z: &Latent) -> Result<Vec<f64>> {
        if z.dim() != self.weight.cols() {
            return Err(Error::Config(format!(
                "latent has {} dims, image decoder expects {}",
                z.dim(),
                self.weight.cols()
            )));
        }
        Ok(self.weight.affine(z.values(), &self.bias))
    }

    pub fn log_pdf(&self, o: &Observation, z: &Latent) -> Result<f64> {
        if !(self.noise > 0.0 && self.noise.is_finite()) {
            return Err(Error::Invariant(format!("image decoder noise must be positive, got {}", self.noise)));
        }
        let mean = self.mean(z)?;
        if o.dim() != mean.len() {
            return Err(Error::Config("observation dimension mismatch".into()));
        }
        Ok(o.values()
            .iter()
            .zip(&mean)
            .map(|(&x, &m)| density::gaussian_log_pdf(x, m, self.noise))
            .sum())
    }

    pub fn sample<R: Rng + ?Sized>(&self, z: &Latent, rng: &mut R) -> Result<Observation> {
        let mean = self.mean(z)?;
        Observation::new(mean.into_iter().map(|m| density::normal_sample(rng, m, self.noise)).collect())
    }
}
