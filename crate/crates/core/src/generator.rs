//! Sentiment-context seq2seq generator.
//!
//! The history is embedded and run through a bidirectional GRU; its final
//! state `c` is concatenated with a learned sentiment vector `s` into the
//! sentiment context `s_c`. The decoder GRU starts from an affine map of
//! `s_c` and, at every step, reads the previous token embedding and a Luong
//! attention context over the encoder states.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{SentimentLabel, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::nn::tape::softmax;
use crate::nn::{Attention, BiGru, Embedding, Gradients, GruParams, Linear, Mlp, ParamStore, Tape, Var};

/// Shape and special-token settings of a generator backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub vocab_size: usize,
    pub bos_id: usize,
    pub eos_id: usize,
    /// Treated as a second terminal token when set.
    pub pad_id: Option<usize>,
    pub emb_dim: usize,
    /// Per direction.
    pub enc_hidden: usize,
    pub label_emb_dim: usize,
    pub sent_dim: usize,
    /// When false the sentiment vector is replaced by zeros (ablation).
    pub sentiment_conditioning: bool,
}

impl GeneratorConfig {
    /// Full-size dimensions over a vocabulary using the standard specials.
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            bos_id: BOS,
            eos_id: EOS,
            pad_id: Some(PAD),
            emb_dim: 64,
            enc_hidden: 128,
            label_emb_dim: 12,
            sent_dim: 12,
            sentiment_conditioning: true,
        }
    }

    /// Length of `c`.
    pub fn context_dim(&self) -> usize {
        2 * self.enc_hidden
    }

    /// Length of `s_c`, which is also the decoder hidden size.
    pub fn sentiment_context_dim(&self) -> usize {
        self.context_dim() + self.sent_dim
    }

    pub fn is_terminal(&self, token: usize) -> bool {
        token == self.eos_id || Some(token) == self.pad_id
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.vocab_size;
        if v < 2 {
            return Err(Error::Config(format!("vocab_size must be at least 2, got {v}")));
        }
        if self.bos_id >= v || self.eos_id >= v || self.pad_id.is_some_and(|p| p >= v) {
            return Err(Error::Config("special token ids must be below vocab_size".into()));
        }
        for (name, d) in [("emb_dim", self.emb_dim), ("enc_hidden", self.enc_hidden), ("sent_dim", self.sent_dim)] {
            if d == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.label_emb_dim == 0 {
            return Err(Error::Config("label_emb_dim must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Sample,
}

impl std::str::FromStr for DecodeMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "greedy" => Ok(DecodeMode::Greedy),
            "sample" => Ok(DecodeMode::Sample),
            other => Err(format!("unknown decode mode {other:?} (expected greedy or sample)")),
        }
    }
}

/// Parameter handles shared by the seq2seq and CVAE generators. The decoder
/// optionally consumes a latent vector of `latent_dim` entries at every
/// step and in its initial-state map.
#[derive(Debug, Clone, Copy)]
pub struct Backbone {
    pub cfg: GeneratorConfig,
    pub latent_dim: usize,
    pub embedding: Embedding,
    pub encoder: BiGru,
    pub label_embedding: Embedding,
    pub sentiment_net: Mlp,
    pub init: Linear,
    pub attention: Attention,
    pub decoder: GruParams,
    pub output: Linear,
}

/// History encoding recorded on a tape.
#[derive(Debug, Clone)]
pub struct EncodedHistory {
    pub states: Vec<Var>,
    pub keys: Vec<Var>,
    pub context: Var,
    pub sentiment: Var,
    pub sentiment_context: Var,
}

impl Backbone {
    pub fn allocate(store: &mut ParamStore, cfg: GeneratorConfig, latent_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let ctx = cfg.context_dim();
        let dec = cfg.sentiment_context_dim();
        Self {
            cfg,
            latent_dim,
            embedding: Embedding::allocate(store, "gen.embedding", cfg.vocab_size, cfg.emb_dim, rng),
            encoder: BiGru::allocate(store, "gen.encoder", cfg.emb_dim, cfg.enc_hidden, rng),
            label_embedding: Embedding::allocate(store, "gen.label_embedding", 2, cfg.label_emb_dim, rng),
            sentiment_net: Mlp::allocate(store, "gen.sentiment", cfg.label_emb_dim, cfg.sent_dim, cfg.sent_dim, rng),
            init: Linear::allocate(store, "gen.init", dec + latent_dim, dec, rng),
            attention: Attention::allocate(store, "gen.attention", dec, ctx, rng),
            decoder: GruParams::allocate(store, "gen.decoder", cfg.emb_dim + ctx + latent_dim, dec, rng),
            output: Linear::allocate(store, "gen.output", dec, cfg.vocab_size, rng),
        }
    }

    pub fn check_tokens(&self, tokens: &[usize], what: &'static str) -> Result<()> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::Invalid(format!("{what} token id {bad} >= vocab size {}", self.cfg.vocab_size)));
        }
        Ok(())
    }

    pub fn check_history(&self, history: &[usize]) -> Result<()> {
        if history.is_empty() {
            return Err(Error::Empty("history"));
        }
        self.check_tokens(history, "history")
    }

    pub fn sentiment(&self, tape: &mut Tape<'_>, y: SentimentLabel) -> Var {
        if !self.cfg.sentiment_conditioning {
            return tape.input(vec![0.0; self.cfg.sent_dim]);
        }
        let ye = self.label_embedding.lookup(tape, y.index());
        self.sentiment_net.forward(tape, ye)
    }

    pub fn encode(&self, tape: &mut Tape<'_>, history: &[usize], y: SentimentLabel) -> EncodedHistory {
        let inputs = self.embedding.lookup_all(tape, history);
        let enc = self.encoder.encode(tape, &inputs);
        let keys = self.attention.keys(tape, &enc.states);
        let sentiment = self.sentiment(tape, y);
        let sentiment_context = tape.concat(&[enc.last, sentiment]);
        EncodedHistory {
            states: enc.states,
            keys,
            context: enc.last,
            sentiment,
            sentiment_context,
        }
    }

    pub fn initial_state(&self, tape: &mut Tape<'_>, enc: &EncodedHistory, z: Option<Var>) -> Var {
        let input = match z {
            Some(z) => tape.concat(&[enc.sentiment_context, z]),
            None => enc.sentiment_context,
        };
        self.init.forward(tape, input)
    }

    /// One decoder step; returns the new state and the vocabulary logits.
    pub fn step(&self, tape: &mut Tape<'_>, enc: &EncodedHistory, h: Var, prev: usize, z: Option<Var>) -> (Var, Var) {
        let (ctx, _) = self.attention.context(tape, h, &enc.keys, &enc.states);
        let emb = self.embedding.lookup(tape, prev);
        let x = match z {
            Some(z) => tape.concat(&[emb, ctx, z]),
            None => tape.concat(&[emb, ctx]),
        };
        let h = tape.gru(self.decoder, x, h);
        let logits = self.output.forward(tape, h);
        (h, logits)
    }

    /// Per-step cross-entropy nodes for emitting exactly `targets`, feeding
    /// BOS and then each target in turn.
    pub fn path_losses(&self, tape: &mut Tape<'_>, enc: &EncodedHistory, z: Option<Var>, targets: &[usize]) -> Vec<Var> {
        let mut h = self.initial_state(tape, enc, z);
        let mut prev = self.cfg.bos_id;
        let mut losses = Vec::with_capacity(targets.len());
        for &t in targets {
            let (h2, logits) = self.step(tape, enc, h, prev, z);
            losses.push(tape.cross_entropy(logits, t));
            h = h2;
            prev = t;
        }
        losses
    }

    /// Summed path loss; zero for an empty path.
    pub fn path_nll(&self, tape: &mut Tape<'_>, enc: &EncodedHistory, z: Option<Var>, targets: &[usize]) -> Var {
        let losses = self.path_losses(tape, enc, z, targets);
        if losses.is_empty() {
            tape.input(vec![0.0])
        } else {
            tape.sum_all(&losses)
        }
    }

    /// Autoregressive decode. The returned path includes the terminal token
    /// when one was emitted before `max_len`.
    pub fn decode(
        &self,
        tape: &mut Tape<'_>,
        enc: &EncodedHistory,
        z: Option<Var>,
        max_len: usize,
        mode: DecodeMode,
        rng: &mut ChaCha8Rng,
    ) -> Vec<usize> {
        let mut h = self.initial_state(tape, enc, z);
        let mut prev = self.cfg.bos_id;
        let mut path = Vec::new();
        while path.len() < max_len {
            let (h2, logits) = self.step(tape, enc, h, prev, z);
            let token = match mode {
                DecodeMode::Greedy => argmax(tape.value(logits)),
                DecodeMode::Sample => sample_categorical(&softmax(tape.value(logits)), rng),
            };
            path.push(token);
            if self.cfg.is_terminal(token) {
                break;
            }
            h = h2;
            prev = token;
        }
        path
    }
}

/// Gold targets: the response followed by EOS.
pub fn gold_targets(response: &[usize], eos: usize) -> Vec<usize> {
    let mut t = response.to_vec();
    t.push(eos);
    t
}

/// Drops a trailing terminal token from a decoded path.
pub fn strip_terminal(path: &[usize], cfg: &GeneratorConfig) -> Vec<usize> {
    match path.last() {
        Some(&t) if cfg.is_terminal(t) => path[..path.len() - 1].to_vec(),
        _ => path.to_vec(),
    }
}

/// Lowest index among the maximal entries.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn sample_categorical(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Rounding can leave the cumulative sum a hair below 1.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// The sentiment-context seq2seq model with its parameters.
#[derive(Debug, Clone)]
pub struct Seq2Seq {
    pub store: ParamStore,
    pub net: Backbone,
}

impl Seq2Seq {
    pub fn new(cfg: GeneratorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = Backbone::allocate(&mut store, cfg, 0, &mut rng);
        Ok(Self { store, net })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.net.cfg
    }

    pub fn embed_sentiment(&self, y: SentimentLabel) -> Vec<f64> {
        let mut tape = Tape::new(&self.store);
        let s = self.net.sentiment(&mut tape, y);
        tape.value(s).to_vec()
    }

    /// Encoder states and the context vector `c`.
    pub fn encode_history(&self, history: &[usize]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        self.net.check_history(history)?;
        let mut tape = Tape::new(&self.store);
        let enc = self.net.encode(&mut tape, history, SentimentLabel::Positive);
        Ok((
            enc.states.iter().map(|&s| tape.value(s).to_vec()).collect(),
            tape.value(enc.context).to_vec(),
        ))
    }

    /// `s_c = [c; s]`.
    pub fn sentiment_context(&self, history: &[usize], y: SentimentLabel) -> Result<Vec<f64>> {
        self.net.check_history(history)?;
        let mut tape = Tape::new(&self.store);
        let enc = self.net.encode(&mut tape, history, y);
        Ok(tape.value(enc.sentiment_context).to_vec())
    }

    /// Negative log-likelihood of `response` followed by EOS, and the
    /// per-step losses.
    pub fn teacher_forced_nll(&self, history: &[usize], y: SentimentLabel, response: &[usize]) -> Result<(f64, Vec<f64>)> {
        self.path_nll(history, y, &gold_targets(response, self.net.cfg.eos_id))
    }

    /// Like [`Self::teacher_forced_nll`] for an arbitrary emitted path.
    pub fn path_nll(&self, history: &[usize], y: SentimentLabel, targets: &[usize]) -> Result<(f64, Vec<f64>)> {
        self.net.check_history(history)?;
        self.net.check_tokens(targets, "response")?;
        let mut tape = Tape::new(&self.store);
        let enc = self.net.encode(&mut tape, history, y);
        let losses = self.net.path_losses(&mut tape, &enc, None, targets);
        let steps: Vec<f64> = losses.iter().map(|&l| tape.scalar(l)).collect();
        Ok((steps.iter().sum(), steps))
    }

    /// Per-step probability vectors along a path.
    pub fn step_distributions(&self, history: &[usize], y: SentimentLabel, targets: &[usize]) -> Result<Vec<Vec<f64>>> {
        self.net.check_history(history)?;
        self.net.check_tokens(targets, "response")?;
        let mut tape = Tape::new(&self.store);
        let enc = self.net.encode(&mut tape, history, y);
        let losses = self.net.path_losses(&mut tape, &enc, None, targets);
        Ok(losses.iter().map(|&l| tape.probs(l).expect("cross-entropy node").to_vec()).collect())
    }

    /// Adds `scale * d(path NLL)` to `grads`; returns the NLL.
    pub fn path_nll_gradient(
        &self,
        history: &[usize],
        y: SentimentLabel,
        targets: &[usize],
        scale: f64,
        grads: &mut Gradients,
    ) -> Result<f64> {
        self.net.check_history(history)?;
        self.net.check_tokens(targets, "response")?;
        let mut tape = Tape::new(&self.store);
        let enc = self.net.encode(&mut tape, history, y);
        let total = self.net.path_nll(&mut tape, &enc, None, targets);
        tape.backward(total, scale, grads);
        Ok(tape.scalar(total))
    }

    pub fn nll_gradient(&self, history: &[usize], y: SentimentLabel, response: &[usize], grads: &mut Gradients) -> Result<f64> {
        self.path_nll_gradient(history, y, &gold_targets(response, self.net.cfg.eos_id), 1.0, grads)
    }

    /// log p(response, EOS | history, y).
    pub fn sequence_log_prob(&self, history: &[usize], y: SentimentLabel, response: &[usize]) -> Result<f64> {
        Ok(-self.teacher_forced_nll(history, y, response)?.0)
    }

    /// Decoded path including any terminal token.
    pub fn decode_path(
        &self,
        history: &[usize],
        y: SentimentLabel,
        max_len: usize,
        mode: DecodeMode,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<usize>> {
        self.net.check_history(history)?;
        if max_len == 0 {
            return Err(Error::Invalid("max_len must be at least 1".into()));
        }
        let mut tape = Tape::new(&self.store);
        let enc = self.net.encode(&mut tape, history, y);
        Ok(self.net.decode(&mut tape, &enc, None, max_len, mode, rng))
    }

    /// Response tokens without the terminal token. `seed` only matters for
    /// sampling.
    pub fn sample_response(
        &self,
        history: &[usize],
        y: SentimentLabel,
        max_len: usize,
        mode: DecodeMode,
        seed: Option<u64>,
    ) -> Result<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.unwrap_or(0));
        let path = self.decode_path(history, y, max_len, mode, &mut rng)?;
        Ok(strip_terminal(&path, &self.net.cfg))
    }
}
