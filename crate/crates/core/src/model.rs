//! Family-agnostic handle over the two generator architectures, plus their
//! checkpoint encoding.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::SentimentLabel;
use crate::cvae::{Cvae, CvaeConfig, ElboParts};
use crate::error::{Error, Result};
use crate::generator::{gold_targets, strip_terminal, DecodeMode, GeneratorConfig, Seq2Seq};
use crate::nn::{checkpoint, Adam, Gradients, ParamStore};

/// The four trained model families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelFamily {
    #[serde(rename = "seq2seq")]
    Seq2Seq,
    #[serde(rename = "cvae")]
    Cvae,
    #[serde(rename = "cgan")]
    Cgan,
    #[serde(rename = "cgan-cvae")]
    CganCvae,
}

impl ModelFamily {
    pub const ALL: [ModelFamily; 4] = [ModelFamily::Seq2Seq, ModelFamily::Cvae, ModelFamily::Cgan, ModelFamily::CganCvae];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelFamily::Seq2Seq => "seq2seq",
            ModelFamily::Cvae => "cvae",
            ModelFamily::Cgan => "cgan",
            ModelFamily::CganCvae => "cgan-cvae",
        }
    }

    pub fn has_latent(self) -> bool {
        matches!(self, ModelFamily::Cvae | ModelFamily::CganCvae)
    }

    pub fn is_adversarial(self) -> bool {
        matches!(self, ModelFamily::Cgan | ModelFamily::CganCvae)
    }

    /// The family an adversarial family's generator is pretrained as.
    pub fn base(self) -> Self {
        match self {
            ModelFamily::Cgan => ModelFamily::Seq2Seq,
            ModelFamily::CganCvae => ModelFamily::Cvae,
            other => other,
        }
    }
}

impl fmt::Display for ModelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelFamily {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        ModelFamily::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| format!("unknown model family {s:?} (expected seq2seq, cvae, cgan or cgan-cvae)"))
    }
}

/// A decoded path plus the latent sample it was drawn under (empty for
/// seq2seq). The path keeps its terminal token when one was emitted.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledPath {
    pub tokens: Vec<usize>,
    pub z: Vec<f64>,
}

#[derive(Debug, Clone)]
pub enum Generator {
    Seq2Seq(Seq2Seq),
    Cvae(Cvae),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "architecture", rename_all = "lowercase")]
enum GeneratorMeta {
    Seq2seq { config: GeneratorConfig },
    Cvae { config: CvaeConfig },
}

impl Generator {
    pub fn new_seq2seq(cfg: GeneratorConfig, seed: u64) -> Result<Self> {
        Ok(Generator::Seq2Seq(Seq2Seq::new(cfg, seed)?))
    }

    pub fn new_cvae(cfg: CvaeConfig, seed: u64) -> Result<Self> {
        Ok(Generator::Cvae(Cvae::new(cfg, seed)?))
    }

    pub fn store(&self) -> &ParamStore {
        match self {
            Generator::Seq2Seq(m) => &m.store,
            Generator::Cvae(m) => &m.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            Generator::Seq2Seq(m) => &mut m.store,
            Generator::Cvae(m) => &mut m.store,
        }
    }

    pub fn config(&self) -> &GeneratorConfig {
        match self {
            Generator::Seq2Seq(m) => m.config(),
            Generator::Cvae(m) => m.config(),
        }
    }

    pub fn z_dim(&self) -> usize {
        match self {
            Generator::Seq2Seq(_) => 0,
            Generator::Cvae(m) => m.z_dim,
        }
    }

    pub fn is_latent(&self) -> bool {
        matches!(self, Generator::Cvae(_))
    }

    /// Adds the maximum-likelihood gradient for one gold example: NLL for
    /// seq2seq, the annealed negative lower bound plus bag-of-words for the
    /// CVAE (`eps` drives its reparameterized sample).
    pub fn mle_gradient(
        &self,
        history: &[usize],
        y: SentimentLabel,
        response: &[usize],
        eps: &[f64],
        kl_weight: f64,
        grads: &mut Gradients,
    ) -> Result<ElboParts> {
        match self {
            Generator::Seq2Seq(m) => {
                let nll = m.nll_gradient(history, y, response, grads)?;
                Ok(ElboParts {
                    total: nll,
                    reconstruction_nll: nll,
                    kl: 0.0,
                    bow: 0.0,
                })
            }
            Generator::Cvae(m) => m.elbo_gradient(history, y, response, eps, kl_weight, grads),
        }
    }

    pub fn mle_loss(&self, history: &[usize], y: SentimentLabel, response: &[usize], eps: &[f64], kl_weight: f64) -> Result<ElboParts> {
        match self {
            Generator::Seq2Seq(m) => {
                let (nll, _) = m.teacher_forced_nll(history, y, response)?;
                Ok(ElboParts {
                    total: nll,
                    reconstruction_nll: nll,
                    kl: 0.0,
                    bow: 0.0,
                })
            }
            Generator::Cvae(m) => m.elbo_step(history, y, response, eps, kl_weight),
        }
    }

    /// Exact NLL of `response` for seq2seq; the reconstruction-plus-KL bound
    /// for the CVAE.
    pub fn eval_nll(&self, history: &[usize], y: SentimentLabel, response: &[usize]) -> Result<f64> {
        match self {
            Generator::Seq2Seq(m) => Ok(m.teacher_forced_nll(history, y, response)?.0),
            Generator::Cvae(m) => m.nll_bound(history, y, response),
        }
    }

    pub fn nll_is_bound(&self) -> bool {
        self.is_latent()
    }

    pub fn sample_path(
        &self,
        history: &[usize],
        y: SentimentLabel,
        max_len: usize,
        mode: DecodeMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<SampledPath> {
        match self {
            Generator::Seq2Seq(m) => Ok(SampledPath {
                tokens: m.decode_path(history, y, max_len, mode, rng)?,
                z: Vec::new(),
            }),
            Generator::Cvae(m) => {
                let (tokens, z) = m.decode_path(history, y, max_len, mode, rng)?;
                Ok(SampledPath { tokens, z })
            }
        }
    }

    /// Log probability of a sampled path (joint with `z` for the CVAE).
    pub fn path_log_prob(&self, history: &[usize], y: SentimentLabel, path: &SampledPath) -> Result<f64> {
        match self {
            Generator::Seq2Seq(m) => Ok(-m.path_nll(history, y, &path.tokens)?.0),
            Generator::Cvae(m) => m.joint_log_prob(history, y, &path.tokens, &path.z),
        }
    }

    /// Adds `scale * d(log prob of path)`; returns the log prob.
    pub fn path_log_prob_gradient(
        &self,
        history: &[usize],
        y: SentimentLabel,
        path: &SampledPath,
        scale: f64,
        grads: &mut Gradients,
    ) -> Result<f64> {
        match self {
            Generator::Seq2Seq(m) => Ok(-m.path_nll_gradient(history, y, &path.tokens, -scale, grads)?),
            Generator::Cvae(m) => m.joint_log_prob_gradient(history, y, &path.tokens, &path.z, scale, grads),
        }
    }

    /// Response for serving and evaluation. The CVAE draws its latent from
    /// the prior with `seed`; sampling mode also uses `seed`.
    pub fn respond(&self, history: &[usize], y: SentimentLabel, max_len: usize, mode: DecodeMode, seed: u64) -> Result<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let path = self.sample_path(history, y, max_len, mode, &mut rng)?;
        Ok(strip_terminal(&path.tokens, self.config()))
    }

    /// Log probability of a response and its EOS under the model; the CVAE
    /// conditions on its prior mean.
    pub fn response_log_prob(&self, history: &[usize], y: SentimentLabel, response: &[usize]) -> Result<f64> {
        match self {
            Generator::Seq2Seq(m) => m.sequence_log_prob(history, y, response),
            Generator::Cvae(m) => {
                let prior = m.prior(history, y)?;
                let path = gold_targets(response, m.net.cfg.eos_id);
                m.conditional_log_prob(history, y, &path, &prior.mu)
            }
        }
    }

    fn meta(&self) -> GeneratorMeta {
        match self {
            Generator::Seq2Seq(m) => GeneratorMeta::Seq2seq { config: *m.config() },
            Generator::Cvae(m) => GeneratorMeta::Cvae {
                config: CvaeConfig {
                    generator: *m.config(),
                    z_dim: m.z_dim,
                    bow_hidden: m.bow_net.hidden.out_dim,
                },
            },
        }
    }

    pub fn save(&self, dir: &Path, family: ModelFamily, optimizer: Option<&Adam>) -> Result<()> {
        let meta = serde_json::to_value(self.meta())?;
        checkpoint::save(dir, family.as_str(), meta, self.store(), optimizer)
    }

    pub fn load(dir: &Path) -> Result<(Self, ModelFamily, Option<Adam>)> {
        let ck = checkpoint::load(dir)?;
        let family: ModelFamily = ck
            .family
            .parse()
            .map_err(|e: String| Error::Checkpoint(format!("{}: {e}", dir.display())))?;
        let meta: GeneratorMeta = serde_json::from_value(ck.meta)
            .map_err(|e| Error::Checkpoint(format!("{}: generator metadata: {e}", dir.display())))?;
        let mut g = match meta {
            GeneratorMeta::Seq2seq { config } => Generator::new_seq2seq(config, 0)?,
            GeneratorMeta::Cvae { config } => Generator::new_cvae(config, 0)?,
        };
        if g.is_latent() != family.has_latent() {
            return Err(Error::Checkpoint(format!("{}: family {family} does not match its architecture", dir.display())));
        }
        checkpoint::assign(g.store_mut(), &ck.params)?;
        Ok((g, family, ck.optimizer))
    }
}
