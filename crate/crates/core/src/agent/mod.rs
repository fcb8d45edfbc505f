//! Desk-scale probabilistic vision-language agent.
//!
//! Each agent owns four heads:
//!
//! * `xi`    text decoder `q(c | z)`, position-wise linear softmax,
//! * `phi`   text encoder `p(z | c)`, generalized Gaussian around the mean token embedding,
//! * `psi`   image encoder `q(z | o)`, diagonal Gaussian,
//! * `theta` image decoder `p(o | z)`, isotropic Gaussian.
//!
//! All densities are exact and every sampler is a pure function of its inputs
//! and the RNG it is handed.

pub mod density;
mod heads;

use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub use heads::{ImageDecoderParams, ImageEncoderParams, TextDecoderParams, TextEncoderParams};
pub(crate) use heads::sample_index;

/// Shape configuration shared by both agents of a game.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelDims {
    #[serde(rename = "V")]
    pub vocab: usize,
    #[serde(rename = "K")]
    pub latent: usize,
    #[serde(rename = "L")]
    pub caption_len: usize,
    #[serde(rename = "D_o")]
    pub obs: usize,
}

impl ModelDims {
    pub fn new(vocab: usize, latent: usize, caption_len: usize, obs: usize) -> Result<Self> {
        if vocab == 0 || latent == 0 || caption_len == 0 || obs == 0 {
            return Err(Error::Config(format!(
                "all dimensions must be positive (V={vocab}, K={latent}, L={caption_len}, D_o={obs})"
            )));
        }
        Ok(Self { vocab, latent, caption_len, obs })
    }

    /// `V^L`, or `None` on overflow.
    pub fn caption_space(&self) -> Option<usize> {
        u32::try_from(self.caption_len).ok().and_then(|l| self.vocab.checked_pow(l))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgentId {
    A,
    B,
}

impl AgentId {
    pub fn other(self) -> Self {
        match self {
            AgentId::A => AgentId::B,
            AgentId::B => AgentId::A,
        }
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AgentId::A => "A",
            AgentId::B => "B",
        })
    }
}

/// Fixed-length token sequence; the sign exchanged between agents.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Caption(Vec<usize>);

impl Caption {
    pub fn new(tokens: Vec<usize>, dims: &ModelDims) -> Result<Self> {
        let c = Self(tokens);
        c.check(dims.vocab, dims.caption_len)?;
        Ok(c)
    }

    /// Wraps raw tokens without checking them against any vocabulary.
    pub fn from_tokens(tokens: Vec<usize>) -> Self {
        Self(tokens)
    }

    pub fn check(&self, vocab: usize, len: usize) -> Result<()> {
        if self.0.len() != len {
            return Err(Error::Input(format!("caption has length {}, expected {len}", self.0.len())));
        }
        if let Some(t) = self.0.iter().find(|&&t| t >= vocab) {
            return Err(Error::Input(format!("token id {t} out of range for vocabulary of {vocab}")));
        }
        Ok(())
    }

    pub fn tokens(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Caption with mixed-radix index `index` (position 0 most significant).
    pub fn from_index(mut index: usize, dims: &ModelDims) -> Self {
        let mut tokens = vec![0; dims.caption_len];
        for t in tokens.iter_mut().rev() {
            *t = index % dims.vocab;
            index /= dims.vocab;
        }
        Self(tokens)
    }

    pub fn index(&self, vocab: usize) -> usize {
        self.0.iter().fold(0, |acc, &t| acc * vocab + t)
    }

    /// Every caption of the space in index order.
    pub fn enumerate(dims: &ModelDims) -> Result<Vec<Caption>> {
        let n = dims
            .caption_space()
            .ok_or_else(|| Error::Capability("caption space overflows usize".into()))?;
        Ok((0..n).map(|i| Self::from_index(i, dims)).collect())
    }
}

impl fmt::Display for Caption {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(ToString::to_string).collect();
        write!(f, "[{}]", parts.join(" "))
    }
}

macro_rules! finite_vector {
    ($(#[$meta:meta])* $name:ident, $what:literal) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(Vec<f64>);

        impl $name {
            pub fn new(values: Vec<f64>) -> Result<Self> {
                if values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Input(concat!($what, " has non-finite entries").into()));
                }
                Ok(Self(values))
            }

            #[allow(dead_code)]
            pub(crate) fn from_vec_unchecked(values: Vec<f64>) -> Self {
                Self(values)
            }

            pub fn values(&self) -> &[f64] {
                &self.0
            }

            pub fn dim(&self) -> usize {
                self.0.len()
            }

            pub fn into_vec(self) -> Vec<f64> {
                self.0
            }
        }
    };
}

finite_vector!(
    /// Agent-internal representation `z` of an observation.
    Latent,
    "latent"
);
finite_vector!(
    /// Raw image vector `o`.
    Observation,
    "observation"
);

/// Identifies one of the four parameter blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadId {
    Xi,
    Phi,
    Psi,
    Theta,
}

impl HeadId {
    pub const ALL: [HeadId; 4] = [HeadId::Xi, HeadId::Phi, HeadId::Psi, HeadId::Theta];
}

impl fmt::Display for HeadId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            HeadId::Xi => "xi",
            HeadId::Phi => "phi",
            HeadId::Psi => "psi",
            HeadId::Theta => "theta",
        })
    }
}

/// Complete parameter set of one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentParams {
    pub id: AgentId,
    pub dims: ModelDims,
    pub xi: TextDecoderParams,
    pub phi: TextEncoderParams,
    pub psi: ImageEncoderParams,
    pub theta: ImageDecoderParams,
}

impl AgentParams {
    /// Small random weights, unit text scale, Gaussian shape.
    pub fn random<R: Rng + ?Sized>(dims: ModelDims, id: AgentId, weight_std: f64, rng: &mut R) -> Self {
        let mut draw = |rows, cols| {
            Matrix::from_fn(rows, cols, |_, _| density::normal_sample(rng, 0.0, weight_std))
        };
        let xi = TextDecoderParams {
            weights: (0..dims.caption_len).map(|_| draw(dims.vocab, dims.latent)).collect(),
            biases: vec![vec![0.0; dims.vocab]; dims.caption_len],
        };
        let phi = TextEncoderParams {
            embeddings: draw(dims.vocab, dims.latent),
            scale: vec![1.0; dims.latent],
            shape: 2.0,
        };
        let psi = ImageEncoderParams {
            weight: draw(dims.latent, dims.obs),
            bias: vec![0.0; dims.latent],
            raw_scale: vec![density::raw_from_scale(0.1); dims.latent],
        };
        let theta = ImageDecoderParams {
            weight: draw(dims.obs, dims.latent),
            bias: vec![0.0; dims.obs],
            noise: 1.0,
        };
        Self { id, dims, xi, phi, psi, theta }
    }

    /// Checks shapes against `dims` and positivity of constrained scalars.
    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        let bad = |what: &str| Err(Error::Config(format!("agent {}: {what} inconsistent with {d:?}", self.id)));
        if self.xi.weights.len() != d.caption_len || self.xi.biases.len() != d.caption_len {
            return bad("text decoder length");
        }
        if self.xi.weights.iter().any(|w| w.rows() != d.vocab || w.cols() != d.latent)
            || self.xi.biases.iter().any(|b| b.len() != d.vocab)
        {
            return bad("text decoder shape");
        }
        if self.phi.embeddings.rows() != d.vocab
            || self.phi.embeddings.cols() != d.latent
            || self.phi.scale.len() != d.latent
        {
            return bad("text encoder shape");
        }
        if self.psi.weight.rows() != d.latent
            || self.psi.weight.cols() != d.obs
            || self.psi.bias.len() != d.latent
            || self.psi.raw_scale.len() != d.latent
        {
            return bad("image encoder shape");
        }
        if self.theta.weight.rows() != d.obs || self.theta.weight.cols() != d.latent || self.theta.bias.len() != d.obs
        {
            return bad("image decoder shape");
        }
        self.phi.check()?;
        if !(self.theta.noise > 0.0 && self.theta.noise.is_finite()) {
            return Err(Error::Invariant(format!("image decoder noise must be positive, got {}", self.theta.noise)));
        }
        let all_finite = self.xi.weights.iter().all(|w| w.as_slice().iter().all(|v| v.is_finite()))
            && self.xi.biases.iter().flatten().all(|v| v.is_finite())
            && self.phi.embeddings.as_slice().iter().all(|v| v.is_finite())
            && self.psi.weight.as_slice().iter().chain(&self.psi.bias).chain(&self.psi.raw_scale).all(|v| v.is_finite())
            && self.theta.weight.as_slice().iter().chain(&self.theta.bias).all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::Invariant(format!("agent {} has non-finite parameters", self.id)));
        }
        Ok(())
    }

    /// Parameters of one head in unconstrained coordinates, row-major.
    ///
    /// Positive scalars (text scale and shape, decoder noise) appear as logarithms.
    pub fn flat(&self, head: HeadId) -> Vec<f64> {
        let mut out = Vec::new();
        match head {
            HeadId::Xi => {
                for w in &self.xi.weights {
                    out.extend_from_slice(w.as_slice());
                }
                for b in &self.xi.biases {
                    out.extend_from_slice(b);
                }
            }
            HeadId::Phi => {
                out.extend_from_slice(self.phi.embeddings.as_slice());
                out.extend(self.phi.scale.iter().map(|a| a.ln()));
                out.push(self.phi.shape.ln());
            }
            HeadId::Psi => {
                out.extend_from_slice(self.psi.weight.as_slice());
                out.extend_from_slice(&self.psi.bias);
                out.extend_from_slice(&self.psi.raw_scale);
            }
            HeadId::Theta => {
                out.extend_from_slice(self.theta.weight.as_slice());
                out.extend_from_slice(&self.theta.bias);
                out.push(self.theta.noise.ln());
            }
        }
        out
    }

    pub fn flat_len(&self, head: HeadId) -> usize {
        let d = &self.dims;
        match head {
            HeadId::Xi => d.caption_len * d.vocab * (d.latent + 1),
            HeadId::Phi => d.vocab * d.latent + d.latent + 1,
            HeadId::Psi => d.latent * d.obs + 2 * d.latent,
            HeadId::Theta => d.obs * d.latent + d.obs + 1,
        }
    }

    /// Inverse of [`AgentParams::flat`].
    pub fn set_flat(&mut self, head: HeadId, flat: &[f64]) -> Result<()> {
        if flat.len() != self.flat_len(head) {
            return Err(Error::Config(format!(
                "flat vector for {head} has {} entries, expected {}",
                flat.len(),
                self.flat_len(head)
            )));
        }
        let mut rest = flat;
        let mut take = |n: usize| {
            let (a, b) = rest.split_at(n);
            rest = b;
            a
        };
        let d = self.dims;
        match head {
            HeadId::Xi => {
                for w in &mut self.xi.weights {
                    w.as_mut_slice().copy_from_slice(take(d.vocab * d.latent));
                }
                for b in &mut self.xi.biases {
                    b.copy_from_slice(take(d.vocab));
                }
            }
            HeadId::Phi => {
                self.phi.embeddings.as_mut_slice().copy_from_slice(take(d.vocab * d.latent));
                for (a, l) in self.phi.scale.iter_mut().zip(take(d.latent)) {
                    *a = l.exp();
                }
                self.phi.shape = take(1)[0].exp();
            }
            HeadId::Psi => {
                self.psi.weight.as_mut_slice().copy_from_slice(take(d.latent * d.obs));
                self.psi.bias.copy_from_slice(take(d.latent));
                self.psi.raw_scale.copy_from_slice(take(d.latent));
            }
            HeadId::Theta => {
                self.theta.weight.as_mut_slice().copy_from_slice(take(d.obs * d.latent));
                self.theta.bias.copy_from_slice(take(d.obs));
                self.theta.noise = take(1)[0].exp();
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&AgentDocument::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: AgentDocument = serde_json::from_str(s)?;
        doc.try_into()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

// On-disk schema: config header plus flat row-major arrays.

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentDocument {
    config: ModelDims,
    agent: AgentId,
    xi: XiDoc,
    phi: PhiDoc,
    psi: PsiDoc,
    theta: ThetaDoc,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct XiDoc {
    weights: Vec<f64>,
    biases: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PhiDoc {
    embeddings: Vec<f64>,
    scale: Vec<f64>,
    shape: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PsiDoc {
    weight: Vec<f64>,
    bias: Vec<f64>,
    raw_scale: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ThetaDoc {
    weight: Vec<f64>,
    bias: Vec<f64>,
    noise: f64,
}

impl From<&AgentParams> for AgentDocument {
    fn from(p: &AgentParams) -> Self {
        Self {
            config: p.dims,
            agent: p.id,
            xi: XiDoc {
                weights: p.xi.weights.iter().flat_map(|w| w.as_slice().iter().copied()).collect(),
                biases: p.xi.biases.concat(),
            },
            phi: PhiDoc {
                embeddings: p.phi.embeddings.as_slice().to_vec(),
                scale: p.phi.scale.clone(),
                shape: p.phi.shape,
            },
            psi: PsiDoc {
                weight: p.psi.weight.as_slice().to_vec(),
                bias: p.psi.bias.clone(),
                raw_scale: p.psi.raw_scale.clone(),
            },
            theta: ThetaDoc {
                weight: p.theta.weight.as_slice().to_vec(),
                bias: p.theta.bias.clone(),
                noise: p.theta.noise,
            },
        }
    }
}

impl TryFrom<AgentDocument> for AgentParams {
    type Error = Error;

    fn try_from(doc: AgentDocument) -> Result<Self> {
        let d = ModelDims::new(doc.config.vocab, doc.config.latent, doc.config.caption_len, doc.config.obs)?;
        let matrix = |rows, cols, data: Vec<f64>, what: &str| {
            Matrix::from_vec(rows, cols, data)
                .ok_or_else(|| Error::Config(format!("{what}: expected {rows}x{cols} entries")))
        };
        let per_pos = d.vocab * d.latent;
        if doc.xi.weights.len() != d.caption_len * per_pos || doc.xi.biases.len() != d.caption_len * d.vocab {
            return Err(Error::Config("xi arrays have the wrong length".into()));
        }
        let xi = TextDecoderParams {
            weights: doc
                .xi
                .weights
                .chunks(per_pos)
                .map(|c| matrix(d.vocab, d.latent, c.to_vec(), "xi.weights"))
                .collect::<Result<_>>()?,
            biases: doc.xi.biases.chunks(d.vocab).map(<[f64]>::to_vec).collect(),
        };
        let params = AgentParams {
            id: doc.agent,
            dims: d,
            xi,
            phi: TextEncoderParams {
                embeddings: matrix(d.vocab, d.latent, doc.phi.embeddings, "phi.embeddings")?,
                scale: doc.phi.scale,
                shape: doc.phi.shape,
            },
            psi: ImageEncoderParams {
                weight: matrix(d.latent, d.obs, doc.psi.weight, "psi.weight")?,
                bias: doc.psi.bias,
                raw_scale: doc.psi.raw_scale,
            },
            theta: ImageDecoderParams {
                weight: matrix(d.obs, d.latent, doc.theta.weight, "theta.weight")?,
                bias: doc.theta.bias,
                noise: doc.theta.noise,
            },
        };
        params.validate()?;
        Ok(params)
    }
}
