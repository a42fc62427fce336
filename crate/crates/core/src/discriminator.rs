//! Conditional discriminator scoring whether a response to a history, under
//! a requested sentiment, was written by a person.
//!
//! The history side mirrors the generator encoder (own parameters) and
//! yields `s_c^D`. A unidirectional response GRU starts from an affine map
//! of `s_c^D`; its final state, concatenated with `s_c^D`, feeds an MLP with
//! a single logit.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{SentimentLabel, EOS, PAD};
use crate::error::{Error, Result};
use crate::nn::tape::sigmoid;
use crate::nn::{batch, checkpoint, clip_gradients, Adam, BiGru, Embedding, Gradients, GruParams, Linear, Mlp, ParamStore, Tape, Var};

/// Scores are kept inside the open unit interval.
pub const PROB_MARGIN: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub vocab_size: usize,
    pub eos_id: usize,
    pub pad_id: Option<usize>,
    pub emb_dim: usize,
    pub enc_hidden: usize,
    pub label_emb_dim: usize,
    pub sent_dim: usize,
    pub resp_hidden: usize,
    pub mlp_hidden: usize,
}

impl DiscriminatorConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            eos_id: EOS,
            pad_id: Some(PAD),
            emb_dim: 64,
            enc_hidden: 128,
            label_emb_dim: 12,
            sent_dim: 12,
            resp_hidden: 128,
            mlp_hidden: 64,
        }
    }
}

/// An owned `(history, label, response)` triple.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub history: Vec<usize>,
    pub label: SentimentLabel,
    pub response: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    pub store: ParamStore,
    pub cfg: DiscriminatorConfig,
    pub embedding: Embedding,
    pub history_encoder: BiGru,
    pub label_embedding: Embedding,
    pub sentiment_net: Mlp,
    pub response_init: Linear,
    pub response_gru: GruParams,
    pub head: Mlp,
}

impl Discriminator {
    pub fn new(cfg: DiscriminatorConfig, seed: u64) -> Result<Self> {
        if cfg.vocab_size < 2 || cfg.eos_id >= cfg.vocab_size {
            return Err(Error::Config("discriminator vocabulary must contain EOS".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let sc = 2 * cfg.enc_hidden + cfg.sent_dim;
        let embedding = Embedding::allocate(&mut store, "disc.embedding", cfg.vocab_size, cfg.emb_dim, &mut rng);
        let history_encoder = BiGru::allocate(&mut store, "disc.history_encoder", cfg.emb_dim, cfg.enc_hidden, &mut rng);
        let label_embedding = Embedding::allocate(&mut store, "disc.label_embedding", 2, cfg.label_emb_dim, &mut rng);
        let sentiment_net = Mlp::allocate(&mut store, "disc.sentiment", cfg.label_emb_dim, cfg.sent_dim, cfg.sent_dim, &mut rng);
        let response_init = Linear::allocate(&mut store, "disc.response_init", sc, cfg.resp_hidden, &mut rng);
        let response_gru = GruParams::allocate(&mut store, "disc.response_gru", cfg.emb_dim, cfg.resp_hidden, &mut rng);
        let head = Mlp::allocate(&mut store, "disc.head", cfg.resp_hidden + sc, cfg.mlp_hidden, 1, &mut rng);
        Ok(Self {
            store,
            cfg,
            embedding,
            history_encoder,
            label_embedding,
            sentiment_net,
            response_init,
            response_gru,
            head,
        })
    }

    /// Tokens before the first EOS/PAD; an empty remainder becomes `[EOS]`.
    fn masked(&self, tokens: &[usize]) -> Vec<usize> {
        let end = tokens
            .iter()
            .position(|&t| t == self.cfg.eos_id || Some(t) == self.cfg.pad_id)
            .unwrap_or(tokens.len());
        if end == 0 {
            vec![self.cfg.eos_id]
        } else {
            tokens[..end].to_vec()
        }
    }

    fn check(&self, t: &Triple) -> Result<()> {
        if t.history.is_empty() {
            return Err(Error::Empty("discriminator history"));
        }
        if let Some(&bad) = t.history.iter().chain(&t.response).find(|&&x| x >= self.cfg.vocab_size) {
            return Err(Error::Invalid(format!("token id {bad} >= vocab size {}", self.cfg.vocab_size)));
        }
        Ok(())
    }

    pub fn logit_on_tape(&self, tape: &mut Tape<'_>, t: &Triple) -> Var {
        let history = self.masked(&t.history);
        let response = self.masked(&t.response);
        let hx = self.embedding.lookup_all(tape, &history);
        let enc = self.history_encoder.encode(tape, &hx);
        let ye = self.label_embedding.lookup(tape, t.label.index());
        let s = self.sentiment_net.forward(tape, ye);
        let sc = tape.concat(&[enc.last, s]);
        let mut h = self.response_init.forward(tape, sc);
        for &w in &response {
            let x = self.embedding.lookup(tape, w);
            h = tape.gru(self.response_gru, x, h);
        }
        let feat = tape.concat(&[h, sc]);
        self.head.forward(tape, feat)
    }

    /// Probability that the triple is human-written, in the open interval (0, 1).
    pub fn score(&self, t: &Triple) -> Result<f64> {
        self.check(t)?;
        let mut tape = Tape::new(&self.store);
        let l = self.logit_on_tape(&mut tape, t);
        Ok(clamp_prob(sigmoid(tape.scalar(l))))
    }

    /// Adds the gradient of the BCE loss against `label` (1 human, 0
    /// machine) to `grads`; returns (loss, probability).
    pub fn bce_gradient(&self, t: &Triple, label: f64, grads: &mut Gradients) -> Result<(f64, f64)> {
        self.check(t)?;
        let mut tape = Tape::new(&self.store);
        let l = self.logit_on_tape(&mut tape, t);
        let loss = tape.bce_with_logit(l, label);
        tape.backward(loss, 1.0, grads);
        Ok((tape.scalar(loss), clamp_prob(sigmoid(tape.scalar(l)))))
    }

    pub fn bce_loss(&self, t: &Triple, label: f64) -> Result<f64> {
        self.check(t)?;
        let mut tape = Tape::new(&self.store);
        let l = self.logit_on_tape(&mut tape, t);
        let loss = tape.bce_with_logit(l, label);
        Ok(tape.scalar(loss))
    }

    /// Mean-BCE gradient over a labeled batch, without updating.
    pub fn batch_gradient(&self, pos: &[Triple], neg: &[Triple]) -> Result<(Gradients, BatchStats)> {
        if pos.is_empty() || neg.is_empty() {
            return Err(Error::Empty("discriminator batch"));
        }
        let items: Vec<(&Triple, f64)> = pos.iter().map(|t| (t, 1.0)).chain(neg.iter().map(|t| (t, 0.0))).collect();
        let (mut grads, out) = batch::accumulate(&self.store, &items, |(t, label), g| {
            let (loss, p) = self.bce_gradient(t, *label, g)?;
            Ok((loss, (p > 0.5) == (*label > 0.5)))
        })?;
        let n = items.len() as f64;
        grads.scale(1.0 / n);
        let loss = out.iter().map(|o| o.0).sum::<f64>() / n;
        let accuracy = out.iter().filter(|o| o.1).count() as f64 / n;
        Ok((grads, BatchStats { loss, accuracy }))
    }

    /// One clipped Adam step on BCE with label 1 for `pos`, 0 for `neg`.
    pub fn train_step(&mut self, adam: &mut Adam, pos: &[Triple], neg: &[Triple], clip: f64) -> Result<BatchStats> {
        let (mut grads, stats) = self.batch_gradient(pos, neg)?;
        clip_gradients(&mut grads, clip);
        adam.update(&mut self.store, &grads);
        Ok(stats)
    }

    pub fn save(&self, dir: &Path, optimizer: Option<&Adam>) -> Result<()> {
        checkpoint::save(dir, "discriminator", serde_json::to_value(self.cfg)?, &self.store, optimizer)
    }

    pub fn load(dir: &Path) -> Result<(Self, Option<Adam>)> {
        let ck = checkpoint::load(dir)?;
        if ck.family != "discriminator" {
            return Err(Error::Checkpoint(format!("{}: expected a discriminator checkpoint, found {}", dir.display(), ck.family)));
        }
        let cfg: DiscriminatorConfig = serde_json::from_value(ck.meta)?;
        let mut d = Self::new(cfg, 0)?;
        checkpoint::assign(&mut d.store, &ck.params)?;
        Ok((d, ck.optimizer))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchStats {
    pub loss: f64,
    pub accuracy: f64,
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_MARGIN, 1.0 - PROB_MARGIN)
}

/// Area under the ROC curve by the Mann-Whitney statistic; ties count half.
pub fn auc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Empty("auc scores"));
    }
    let mut all: Vec<(f64, bool)> = pos.iter().map(|&s| (s, true)).chain(neg.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Average ranks over tie groups.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        rank_sum_pos += avg_rank * all[i..j].iter().filter(|x| x.1).count() as f64;
        i = j;
    }
    let (np, nn) = (pos.len() as f64, neg.len() as f64);
    Ok((rank_sum_pos - np * (np + 1.0) / 2.0) / (np * nn))
}
