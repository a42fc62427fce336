//! CVAE generator: a diagonal-Gaussian latent `z` conditions the seq2seq
//! decoder. Training maximizes the lower bound with a recognition network
//! `q(z | W_r, s_c)` against a prior network `p(z | s_c)`, plus a
//! bag-of-words loss predicting the response tokens from `(z, s_c)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::SentimentLabel;
use crate::error::{Error, Result};
use crate::generator::{gold_targets, strip_terminal, Backbone, DecodeMode, EncodedHistory, GeneratorConfig};
use crate::nn::{BiGru, Gradients, Mlp, ParamStore, Tape, Var};

pub const LOGVAR_BOUND: f64 = 20.0;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CvaeConfig {
    pub generator: GeneratorConfig,
    pub z_dim: usize,
    pub bow_hidden: usize,
}

impl CvaeConfig {
    pub fn new(generator: GeneratorConfig) -> Self {
        Self {
            generator,
            z_dim: 16,
            bow_hidden: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
}

/// `z = mu + exp(logvar / 2) * eps`.
pub fn reparameterize(d: &DiagGaussian, eps: &[f64]) -> Vec<f64> {
    d.mu.iter()
        .zip(&d.logvar)
        .zip(eps)
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect()
}

/// Closed-form KL(q || p), summed over dimensions.
pub fn kl_diag_gauss(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    let n = q.mu.len();
    if [q.logvar.len(), p.mu.len(), p.logvar.len()].iter().any(|&l| l != n) {
        return Err(Error::shape("kl_diag_gauss", n, p.mu.len()));
    }
    let mut kl = 0.0;
    for i in 0..n {
        let d = q.mu[i] - p.mu[i];
        kl += 0.5 * (p.logvar[i] - q.logvar[i] + (q.logvar[i].exp() + d * d) / p.logvar[i].exp() - 1.0);
    }
    Ok(kl)
}

/// Loss pieces of one example.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ElboParts {
    pub total: f64,
    pub reconstruction_nll: f64,
    pub kl: f64,
    pub bow: f64,
}

/// Scalar nodes of one example's objective.
#[derive(Debug, Clone, Copy)]
pub struct ElboVars {
    pub total: Var,
    pub reconstruction: Var,
    pub kl: Var,
    pub bow: Var,
}

#[derive(Debug, Clone)]
pub struct Cvae {
    pub store: ParamStore,
    pub net: Backbone,
    pub z_dim: usize,
    pub response_encoder: BiGru,
    pub recognition_net: Mlp,
    pub prior_net: Mlp,
    pub bow_net: Mlp,
}

impl Cvae {
    /// The backbone is allocated first with the same generator stream as
    /// [`crate::generator::Seq2Seq::new`], so both share initial weights.
    pub fn new(cfg: CvaeConfig, seed: u64) -> Result<Self> {
        cfg.generator.validate()?;
        let g = cfg.generator;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = Backbone::allocate(&mut store, g, cfg.z_dim, &mut rng);
        let z = cfg.z_dim;
        let sc = g.sentiment_context_dim();
        let response_encoder = BiGru::allocate(&mut store, "cvae.response_encoder", g.emb_dim, g.enc_hidden, &mut rng);
        let recognition_net = Mlp::allocate(&mut store, "cvae.recognition", response_encoder.output_dim() + sc, 2 * z, 2 * z, &mut rng);
        let prior_net = Mlp::allocate(&mut store, "cvae.prior", sc, 2 * z, 2 * z, &mut rng);
        let bow_net = Mlp::allocate(&mut store, "cvae.bow", z + sc, cfg.bow_hidden, g.vocab_size, &mut rng);
        Ok(Self {
            store,
            net,
            z_dim: z,
            response_encoder,
            recognition_net,
            prior_net,
            bow_net,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.net.cfg
    }

    fn gaussian(&self, tape: &mut Tape<'_>, mlp: &Mlp, input: Var) -> (Var, Var) {
        let out = mlp.forward(tape, input);
        let mu = tape.slice(out, 0, self.z_dim);
        let lv = tape.slice(out, self.z_dim, self.z_dim);
        let lv = tape.clamp(lv, -LOGVAR_BOUND, LOGVAR_BOUND);
        (mu, lv)
    }

    pub fn recognition_on_tape(&self, tape: &mut Tape<'_>, enc: &EncodedHistory, response: &[usize]) -> (Var, Var) {
        let inputs = self.net.embedding.lookup_all(tape, response);
        let r = self.response_encoder.encode(tape, &inputs);
        let x = tape.concat(&[r.last, enc.sentiment_context]);
        self.gaussian(tape, &self.recognition_net, x)
    }

    pub fn prior_on_tape(&self, tape: &mut Tape<'_>, enc: &EncodedHistory) -> (Var, Var) {
        self.gaussian(tape, &self.prior_net, enc.sentiment_context)
    }

    /// KL between two diagonal Gaussians given as (mu, logvar) nodes.
    pub fn kl_on_tape(tape: &mut Tape<'_>, q: (Var, Var), p: (Var, Var)) -> Var {
        let d = tape.sub(q.0, p.0);
        let d2 = tape.mul(d, d);
        let var_q = tape.exp(q.1);
        let num = tape.add(var_q, d2);
        let neg = tape.scale(p.1, -1.0);
        let inv_p = tape.exp(neg);
        let ratio = tape.mul(num, inv_p);
        let lv = tape.sub(p.1, q.1);
        let terms = tape.add(lv, ratio);
        let s = tape.sum(terms);
        let half = tape.scale(s, 0.5);
        let offset = tape.input(vec![-0.5 * tape.value(q.0).len() as f64]);
        tape.add(half, offset)
    }

    /// `log N(z; mu, exp(logvar))` with `z` held constant.
    pub fn log_density_on_tape(tape: &mut Tape<'_>, z: &[f64], d: (Var, Var)) -> Var {
        let zv = tape.input(z.to_vec());
        let diff = tape.sub(zv, d.0);
        let sq = tape.mul(diff, diff);
        let neg = tape.scale(d.1, -1.0);
        let inv = tape.exp(neg);
        let scaled = tape.mul(sq, inv);
        let terms = tape.add(d.1, scaled);
        let s = tape.sum(terms);
        let ll = tape.scale(s, -0.5);
        let c = tape.input(vec![-0.5 * LN_2PI * z.len() as f64]);
        tape.add(ll, c)
    }

    pub fn reparameterize_on_tape(tape: &mut Tape<'_>, d: (Var, Var), eps: &[f64]) -> Var {
        let half = tape.scale(d.1, 0.5);
        let std = tape.exp(half);
        let e = tape.input(eps.to_vec());
        let noise = tape.mul(std, e);
        tape.add(d.0, noise)
    }

    pub fn bow_on_tape(&self, tape: &mut Tape<'_>, z: Var, enc: &EncodedHistory, response: &[usize]) -> Var {
        let x = tape.concat(&[z, enc.sentiment_context]);
        let logits = self.bow_net.forward(tape, x);
        let losses: Vec<Var> = response.iter().map(|&w| tape.cross_entropy(logits, w)).collect();
        tape.sum_all(&losses)
    }

    /// Records the objective `recon + kl_weight * kl + bow` on `tape`.
    pub fn elbo_on_tape(
        &self,
        tape: &mut Tape<'_>,
        history: &[usize],
        y: SentimentLabel,
        response: &[usize],
        eps: &[f64],
        kl_weight: f64,
    ) -> ElboVars {
        let enc = self.net.encode(tape, history, y);
        let q = self.recognition_on_tape(tape, &enc, response);
        let p = self.prior_on_tape(tape, &enc);
        let z = Self::reparameterize_on_tape(tape, q, eps);
        let losses = self.net.path_losses(tape, &enc, Some(z), &gold_targets(response, self.net.cfg.eos_id));
        let reconstruction = tape.sum_all(&losses);
        let kl = Self::kl_on_tape(tape, q, p);
        let bow = self.bow_on_tape(tape, z, &enc, response);
        let weighted = tape.scale(kl, kl_weight);
        let total = tape.sum_all(&[reconstruction, weighted, bow]);
        ElboVars {
            total,
            reconstruction,
            kl,
            bow,
        }
    }

    fn check(&self, history: &[usize], response: &[usize], eps: &[f64]) -> Result<()> {
        self.net.check_history(history)?;
        if response.is_empty() {
            return Err(Error::Empty("response"));
        }
        self.net.check_tokens(response, "response")?;
        if eps.len() != self.z_dim {
            return Err(Error::shape("elbo eps", self.z_dim, eps.len()));
        }
        Ok(())
    }

    pub fn elbo_step(
        &self,
        history: &[usize],
        y: SentimentLabel,
        response: &[usize],
        eps: &[f64],
        kl_weight: f64,
    ) -> Result<ElboParts> {
        self.check(history, response, eps)?;
        let mut tape = Tape::new(&self.store);
        let v = self.elbo_on_tape(&mut tape, history, y, response, eps, kl_weight);
        Ok(parts(&tape, v))
    }

    /// Adds the gradient of the objective to `grads`.
    pub fn elbo_gradient(
        &self,
        history: &[usize],
        y: SentimentLabel,
        response: &[usize],
        eps: &[f64],
        kl_weight: f64,
        grads: &mut Gradients,
    ) -> Result<ElboParts> {
        self.check(history, response, eps)?;
        let mut tape = Tape::new(&self.store);
        let v = self.elbo_on_tape(&mut tape, history, y, response, eps, kl_weight);
        tape.backward(v.total, 1.0, grads);
        Ok(parts(&tape, v))
    }

    pub fn recognition(&self, history: &[usize], y: SentimentLabel, response: &[usize]) -> Result<DiagGaussian> {
        self.net.check_history(history)?;
        if response.is_empty() {
            return Err(Error::Empty("response"));
        }
        self.net.check_tokens(response, "response")?;
        let mut tape = Tape::new(&self.store);
        let enc = self.net.encode(&mut tape, history, y);
        let q = self.recognition_on_tape(&mut tape, &enc, response);
        Ok(to_gaussian(&tape, q))
    }

    pub fn prior(&self, history: &[usize], y: SentimentLabel) -> Result<DiagGaussian> {
        self.net.check_history(history)?;
        let mut tape = Tape::new(&self.store);
        let enc = self.net.encode(&mut tape, history, y);
        let p = self.prior_on_tape(&mut tape, &enc);
        Ok(to_gaussian(&tape, p))
    }

    pub fn bow_loss(&self, history: &[usize], y: SentimentLabel, z: &[f64], response: &[usize]) -> Result<f64> {
        self.net.check_history(history)?;
        self.net.check_tokens(response, "response")?;
        if z.len() != self.z_dim {
            return Err(Error::shape("bow z", self.z_dim, z.len()));
        }
        let mut tape = Tape::new(&self.store);
        let enc = self.net.encode(&mut tape, history, y);
        let zv = tape.input(z.to_vec());
        let b = self.bow_on_tape(&mut tape, zv, &enc, response);
        Ok(tape.scalar(b))
    }

    /// Reconstruction NLL at the recognition mean plus the full KL: an
    /// upper bound on `-log p(response | history, y)`.
    pub fn nll_bound(&self, history: &[usize], y: SentimentLabel, response: &[usize]) -> Result<f64> {
        let p = self.elbo_step(history, y, response, &vec![0.0; self.z_dim], 1.0)?;
        Ok(p.reconstruction_nll + p.kl)
    }

    /// Unit-normal draws for one latent sample.
    pub fn draw_eps(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..self.z_dim).map(|_| StandardNormal.sample(rng)).collect()
    }

    /// Draws `z` from the prior and decodes. The returned path includes any
    /// terminal token.
    pub fn decode_path(
        &self,
        history: &[usize],
        y: SentimentLabel,
        max_len: usize,
        mode: DecodeMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Vec<usize>, Vec<f64>)> {
        self.net.check_history(history)?;
        if max_len == 0 {
            return Err(Error::Invalid("max_len must be at least 1".into()));
        }
        let mut tape = Tape::new(&self.store);
        let enc = self.net.encode(&mut tape, history, y);
        let p = self.prior_on_tape(&mut tape, &enc);
        let eps = self.draw_eps(rng);
        let z = Self::reparameterize_on_tape(&mut tape, p, &eps);
        let z_val = tape.value(z).to_vec();
        let zc = tape.input(z_val.clone());
        let path = self.net.decode(&mut tape, &enc, Some(zc), max_len, mode, rng);
        Ok((path, z_val))
    }

    /// Prior sample, then greedy decoding.
    pub fn generate(&self, history: &[usize], y: SentimentLabel, max_len: usize, seed: u64) -> Result<Vec<usize>> {
        self.sample_response(history, y, max_len, DecodeMode::Greedy, seed)
    }

    pub fn sample_response(
        &self,
        history: &[usize],
        y: SentimentLabel,
        max_len: usize,
        mode: DecodeMode,
        seed: u64,
    ) -> Result<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (path, _) = self.decode_path(history, y, max_len, mode, &mut rng)?;
        Ok(strip_terminal(&path, &self.net.cfg))
    }

    /// `log p(z | s_c) + log p(path | z, s_c)` on a tape.
    fn joint_log_prob_on_tape(&self, tape: &mut Tape<'_>, history: &[usize], y: SentimentLabel, path: &[usize], z: &[f64]) -> Var {
        let enc = self.net.encode(tape, history, y);
        let p = self.prior_on_tape(tape, &enc);
        let log_pz = Self::log_density_on_tape(tape, z, p);
        let zc = tape.input(z.to_vec());
        let nll = self.net.path_nll(tape, &enc, Some(zc), path);
        tape.sub(log_pz, nll)
    }

    fn check_path(&self, history: &[usize], path: &[usize], z: &[f64]) -> Result<()> {
        self.net.check_history(history)?;
        self.net.check_tokens(path, "path")?;
        if z.len() != self.z_dim {
            return Err(Error::shape("latent sample", self.z_dim, z.len()));
        }
        Ok(())
    }

    pub fn joint_log_prob(&self, history: &[usize], y: SentimentLabel, path: &[usize], z: &[f64]) -> Result<f64> {
        self.check_path(history, path, z)?;
        let mut tape = Tape::new(&self.store);
        let lp = self.joint_log_prob_on_tape(&mut tape, history, y, path, z);
        Ok(tape.scalar(lp))
    }

    /// `log p(path | z, s_c)`.
    pub fn conditional_log_prob(&self, history: &[usize], y: SentimentLabel, path: &[usize], z: &[f64]) -> Result<f64> {
        self.check_path(history, path, z)?;
        let mut tape = Tape::new(&self.store);
        let enc = self.net.encode(&mut tape, history, y);
        let zc = tape.input(z.to_vec());
        let nll = self.net.path_nll(&mut tape, &enc, Some(zc), path);
        Ok(-tape.scalar(nll))
    }

    /// Adds `scale * d(joint log prob)` to `grads`; returns the log prob.
    pub fn joint_log_prob_gradient(
        &self,
        history: &[usize],
        y: SentimentLabel,
        path: &[usize],
        z: &[f64],
        scale: f64,
        grads: &mut Gradients,
    ) -> Result<f64> {
        self.check_path(history, path, z)?;
        let mut tape = Tape::new(&self.store);
        let lp = self.joint_log_prob_on_tape(&mut tape, history, y, path, z);
        tape.backward(lp, scale, grads);
        Ok(tape.scalar(lp))
    }
}

fn parts(tape: &Tape<'_>, v: ElboVars) -> ElboParts {
    ElboParts {
        total: tape.scalar(v.total),
        reconstruction_nll: tape.scalar(v.reconstruction),
        kl: tape.scalar(v.kl),
        bow: tape.scalar(v.bow),
    }
}

fn to_gaussian(tape: &Tape<'_>, d: (Var, Var)) -> DiagGaussian {
    DiagGaussian {
        mu: tape.value(d.0).to_vec(),
        logvar: tape.value(d.1).to_vec(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::Seq2Seq;
    use crate::nn::finite_difference_check;

    fn tiny() -> CvaeConfig {
        CvaeConfig {
            generator: GeneratorConfig {
                vocab_size: 9,
                bos_id: 0,
                eos_id: 8,
                pad_id: None,
                emb_dim: 3,
                enc_hidden: 3,
                label_emb_dim: 2,
                sent_dim: 2,
                sentiment_conditioning: true,
            },
            z_dim: 3,
            bow_hidden: 4,
        }
    }

    fn randomized(cfg: CvaeConfig, seed: u64) -> Cvae {
        let mut m = Cvae::new(cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        m.store.randomize(0.4, &mut rng);
        m
    }

    #[test]
    fn reparameterize_cases() {
        let d = DiagGaussian {
            mu: vec![1.0, -2.0],
            logvar: vec![0.0, 0.0],
        };
        assert_eq!(reparameterize(&d, &[0.0, 0.0]), d.mu);
        assert_eq!(reparameterize(&d, &[0.5, 0.25]), vec![1.5, -1.75]);
    }

    #[test]
    fn kl_cases() {
        let q = DiagGaussian {
            mu: vec![1.0],
            logvar: vec![0.0],
        };
        let p = DiagGaussian {
            mu: vec![0.0],
            logvar: vec![0.0],
        };
        assert_eq!(kl_diag_gauss(&q, &q).unwrap(), 0.0);
        assert!((kl_diag_gauss(&q, &p).unwrap() - 0.5).abs() < 1e-15);
        assert!(kl_diag_gauss(&q, &DiagGaussian { mu: vec![], logvar: vec![] }).is_err());
    }

    #[test]
    fn recognition_is_deterministic_and_clamped() {
        let mut m = randomized(tiny(), 0);
        let a = m.recognition(&[1, 2], SentimentLabel::Positive, &[3, 4]).unwrap();
        assert_eq!(a, m.recognition(&[1, 2], SentimentLabel::Positive, &[3, 4]).unwrap());
        assert_eq!((a.mu.len(), a.logvar.len()), (3, 3));
        m.store.rescale(1e6);
        let b = m.recognition(&[1, 2], SentimentLabel::Positive, &[3, 4]).unwrap();
        let p = m.prior(&[1, 2], SentimentLabel::Positive).unwrap();
        assert!(b.logvar.iter().chain(&p.logvar).all(|v| v.abs() <= LOGVAR_BOUND));
    }

    #[test]
    fn elbo_parts_are_consistent() {
        let m = randomized(tiny(), 1);
        let (h, r) = ([1, 2, 3], [4, 5]);
        let eps = [0.3, -0.2, 0.9];
        let w = 0.37;
        let p = m.elbo_step(&h, SentimentLabel::Negative, &r, &eps, w).unwrap();
        assert!((p.total - (p.reconstruction_nll + w * p.kl + p.bow)).abs() < 1e-9);
        let q = m.recognition(&h, SentimentLabel::Negative, &r).unwrap();
        let pr = m.prior(&h, SentimentLabel::Negative).unwrap();
        assert!((p.kl - kl_diag_gauss(&q, &pr).unwrap()).abs() < 1e-9);
        let z = reparameterize(&q, &eps);
        assert!((p.bow - m.bow_loss(&h, SentimentLabel::Negative, &z, &r).unwrap()).abs() < 1e-9);
        let full = m.elbo_step(&h, SentimentLabel::Negative, &r, &eps, 1.0).unwrap();
        assert!(full.total - full.bow >= full.reconstruction_nll - 1e-9);
    }

    #[test]
    fn bow_ignores_order_and_is_uniform_at_zero() {
        let mut m = randomized(tiny(), 2);
        let z = [0.1, 0.2, 0.3];
        let a = m.bow_loss(&[1], SentimentLabel::Positive, &z, &[3, 4, 5, 3]).unwrap();
        let b = m.bow_loss(&[1], SentimentLabel::Positive, &z, &[5, 3, 3, 4]).unwrap();
        assert!((a - b).abs() < 1e-12);
        m.store.rescale(0.0);
        let u = m.bow_loss(&[1], SentimentLabel::Positive, &z, &[3, 4, 5]).unwrap();
        assert!((u - 3.0 * 9f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_latent_reduces_to_seq2seq() {
        let cfg = CvaeConfig { z_dim: 0, ..tiny() };
        let m = Cvae::new(cfg, 5).unwrap();
        let s = Seq2Seq::new(cfg.generator, 5).unwrap();
        let (h, r) = ([1, 2, 3], [4, 5, 6]);
        for y in SentimentLabel::ALL {
            let p = m.elbo_step(&h, y, &r, &[], 0.5).unwrap();
            let (nll, _) = s.teacher_forced_nll(&h, y, &r).unwrap();
            assert!((p.reconstruction_nll - nll).abs() < 1e-9);
            assert!((p.total - (nll + p.bow)).abs() < 1e-9);
            assert_eq!(p.kl, 0.0);
        }
    }

    #[test]
    fn elbo_gradient_matches_finite_differences() {
        let m = randomized(tiny(), 3);
        let (h, r) = ([1, 2], [4, 5, 6]);
        let eps = [0.5, -1.0, 0.25];
        let mut grads = Gradients::zeros_like(&m.store);
        m.elbo_gradient(&h, SentimentLabel::Positive, &r, &eps, 0.7, &mut grads).unwrap();
        let rec = m.recognition_net.hidden.w;
        assert!(grads.get(rec).iter().any(|&g| g != 0.0));
        let loss = |s: &ParamStore| {
            let mut c = m.clone();
            c.store = s.clone();
            c.elbo_step(&h, SentimentLabel::Positive, &r, &eps, 0.7).unwrap().total
        };
        let err = finite_difference_check(loss, &m.store, &grads, 1e-5).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn joint_log_prob_gradient_matches_finite_differences() {
        let m = randomized(tiny(), 4);
        let z = [0.2, -0.4, 1.1];
        let path = [3, 8];
        let mut grads = Gradients::zeros_like(&m.store);
        m.joint_log_prob_gradient(&[1, 2], SentimentLabel::Negative, &path, &z, 1.0, &mut grads).unwrap();
        let f = |s: &ParamStore| {
            let mut c = m.clone();
            c.store = s.clone();
            c.joint_log_prob(&[1, 2], SentimentLabel::Negative, &path, &z).unwrap()
        };
        let err = finite_difference_check(f, &m.store, &grads, 1e-5).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn generation_is_seeded() {
        let m = randomized(tiny(), 6);
        let a = m.generate(&[1, 2], SentimentLabel::Positive, 5, 11).unwrap();
        assert_eq!(a, m.generate(&[1, 2], SentimentLabel::Positive, 5, 11).unwrap());
        assert!(a.len() <= 5);
    }

    #[test]
    fn monte_carlo_moments() {
        let d = DiagGaussian {
            mu: vec![0.5, -1.0],
            logvar: vec![0.4, -0.6],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 10_000;
        let mut mean = [0.0; 2];
        for _ in 0..n {
            let e: Vec<f64> = (0..2).map(|_| StandardNormal.sample(&mut rng)).collect();
            let z = reparameterize(&d, &e);
            mean[0] += z[0] / n as f64;
            mean[1] += z[1] / n as f64;
        }
        for (i, m) in mean.iter().enumerate() {
            let sigma = (0.5 * d.logvar[i]).exp();
            assert!((m - d.mu[i]).abs() < 4.0 * sigma / (n as f64).sqrt());
        }
    }
}
