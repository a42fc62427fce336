//! Training orchestration: generator pretraining, discriminator pretraining
//! against the frozen generator, and the alternating adversarial game.
//!
//! Every batch gradient in this module is a sum over items; the loops divide
//! by the batch size before clipping and the optimizer step. Per-item seeds
//! are drawn sequentially from the run's master generator before any
//! parallel work starts, so results do not depend on the thread count.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::corpus::{generate_synthetic_corpus, load_corpus, CorpusSplit, DialogueExample, IngestConfig, SentimentLabel, Vocabulary};
use crate::cvae::{CvaeConfig, ElboParts};
use crate::discriminator::{auc, Discriminator, DiscriminatorConfig, Triple};
use crate::error::{Error, Result};
use crate::evaluation::{train_sentiment_classifier, Batcher, ClassifierConfig, ClassifierTraining, SentimentClassifier};
use crate::generator::{DecodeMode, GeneratorConfig};
use crate::model::{Generator, ModelFamily, SampledPath};
use crate::nn::{batch, clip_gradients, Adam, Gradients};

// ---------------------------------------------------------------------------
// Configuration

/// Every knob of a run. Serialized next to each checkpoint; together with
/// the corpus it determines every reported number.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRunConfig {
    pub model_family: ModelFamily,
    pub seed: u64,

    /// JSONL corpus; when absent the synthetic corpus is generated.
    pub corpus: Option<PathBuf>,
    pub synthetic_pairs: usize,
    pub synthetic_seed: u64,
    pub max_len: usize,
    pub dev_fraction: f64,
    pub test_fraction: f64,
    pub split_seed: u64,
    pub vocab_max_size: usize,
    pub vocab_min_count: usize,

    pub emb_dim: usize,
    pub enc_hidden: usize,
    pub label_emb_dim: usize,
    pub sent_dim: usize,
    pub sentiment_conditioning: bool,
    pub z_dim: usize,
    pub bow_hidden: usize,

    pub disc_emb_dim: usize,
    pub disc_enc_hidden: usize,
    pub disc_resp_hidden: usize,
    pub disc_mlp_hidden: usize,

    pub clf_emb_dim: usize,
    pub clf_enc_hidden: usize,
    pub clf_mlp_hidden: usize,

    pub lr: f64,
    pub clip: f64,
    pub batch_size: usize,

    pub pretrain_g_steps: usize,
    pub pretrain_d_steps: usize,
    pub adversarial_steps: usize,
    pub d_steps_per_g_step: usize,
    pub classifier_steps: usize,

    pub baseline_decay: f64,
    /// Fraction of generator pretraining over which the KL weight rises
    /// linearly from 0 to 1. Zero disables annealing.
    pub kl_anneal_fraction: f64,
    /// Train and evaluate the discriminator with gold responses in place of
    /// generated negatives.
    pub d_sanity_negatives: bool,
    /// Maximum length of sampled responses during training.
    pub sample_max_len: usize,
    /// Periodic checkpoints during the adversarial phase; 0 disables.
    pub checkpoint_every: usize,
    /// Worker threads; `None` uses rayon's default. Results are identical
    /// for every setting.
    pub threads: Option<usize>,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            model_family: ModelFamily::Seq2Seq,
            seed: 0,
            corpus: None,
            synthetic_pairs: 2000,
            synthetic_seed: 0,
            max_len: 30,
            dev_fraction: 0.05,
            test_fraction: 0.05,
            split_seed: 0,
            vocab_max_size: 20_000,
            vocab_min_count: 1,
            emb_dim: 64,
            enc_hidden: 128,
            label_emb_dim: 12,
            sent_dim: 12,
            sentiment_conditioning: true,
            z_dim: 16,
            bow_hidden: 400,
            disc_emb_dim: 64,
            disc_enc_hidden: 128,
            disc_resp_hidden: 128,
            disc_mlp_hidden: 64,
            clf_emb_dim: 64,
            clf_enc_hidden: 128,
            clf_mlp_hidden: 64,
            lr: 1e-3,
            clip: 5.0,
            batch_size: 32,
            pretrain_g_steps: 1000,
            pretrain_d_steps: 300,
            adversarial_steps: 500,
            d_steps_per_g_step: 1,
            classifier_steps: 300,
            baseline_decay: 0.9,
            kl_anneal_fraction: 0.2,
            d_sanity_negatives: false,
            sample_max_len: 30,
            checkpoint_every: 0,
            threads: None,
        }
    }
}

impl TrainRunConfig {
    /// Reduced dimensions and schedules that finish on one CPU in minutes.
    pub fn desk(family: ModelFamily) -> Self {
        Self {
            model_family: family,
            emb_dim: 32,
            enc_hidden: 32,
            label_emb_dim: 8,
            sent_dim: 8,
            z_dim: 8,
            bow_hidden: 256,
            disc_emb_dim: 32,
            disc_enc_hidden: 32,
            disc_resp_hidden: 32,
            disc_mlp_hidden: 32,
            clf_emb_dim: 16,
            clf_enc_hidden: 16,
            clf_mlp_hidden: 16,
            lr: 3e-3,
            batch_size: 16,
            pretrain_g_steps: 400,
            pretrain_d_steps: 800,
            adversarial_steps: 300,
            classifier_steps: 150,
            sample_max_len: 12,
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Stable hash of the serialized config.
    pub fn fingerprint(&self) -> String {
        use std::hash::{DefaultHasher, Hash, Hasher};
        let mut h = DefaultHasher::new();
        self.to_toml().hash(&mut h);
        format!("{:016x}", h.finish())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("max_len", self.max_len),
            ("emb_dim", self.emb_dim),
            ("enc_hidden", self.enc_hidden),
            ("label_emb_dim", self.label_emb_dim),
            ("sent_dim", self.sent_dim),
            ("bow_hidden", self.bow_hidden),
            ("disc_emb_dim", self.disc_emb_dim),
            ("disc_enc_hidden", self.disc_enc_hidden),
            ("disc_resp_hidden", self.disc_resp_hidden),
            ("disc_mlp_hidden", self.disc_mlp_hidden),
            ("clf_emb_dim", self.clf_emb_dim),
            ("clf_enc_hidden", self.clf_enc_hidden),
            ("clf_mlp_hidden", self.clf_mlp_hidden),
            ("batch_size", self.batch_size),
            ("sample_max_len", self.sample_max_len),
        ];
        if let Some((key, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{key} must be at least 1")));
        }
        if self.model_family.has_latent() && self.z_dim == 0 {
            return Err(Error::Config("z_dim must be at least 1 for latent families".into()));
        }
        if self.model_family.is_adversarial() && self.adversarial_steps > 0 && self.d_steps_per_g_step == 0 {
            return Err(Error::Config("d_steps_per_g_step must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.clip.is_nan() || self.clip <= 0.0 {
            return Err(Error::Config(format!("clip must be positive, got {}", self.clip)));
        }
        if !(0.0..1.0).contains(&self.baseline_decay) {
            return Err(Error::Config(format!("baseline_decay must be in [0, 1), got {}", self.baseline_decay)));
        }
        if !(0.0..=1.0).contains(&self.kl_anneal_fraction) {
            return Err(Error::Config(format!("kl_anneal_fraction must be in [0, 1], got {}", self.kl_anneal_fraction)));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        if self.corpus.is_none() && self.synthetic_pairs < 10 {
            return Err(Error::Config("synthetic_pairs must be at least 10".into()));
        }
        Ok(())
    }

    pub fn ingest(&self) -> IngestConfig {
        IngestConfig {
            max_len: self.max_len,
            dev_fraction: self.dev_fraction,
            test_fraction: self.test_fraction,
            split_seed: self.split_seed,
            vocab_max_size: self.vocab_max_size,
            vocab_min_count: self.vocab_min_count,
            ..IngestConfig::default()
        }
    }

    /// The configured corpus, or the synthetic one.
    pub fn load_corpus(&self) -> Result<CorpusSplit> {
        match &self.corpus {
            Some(path) => load_corpus(path, None, &self.ingest()),
            None => generate_synthetic_corpus(self.synthetic_seed, self.synthetic_pairs),
        }
    }

    pub fn generator_config(&self, vocab_size: usize) -> GeneratorConfig {
        GeneratorConfig {
            emb_dim: self.emb_dim,
            enc_hidden: self.enc_hidden,
            label_emb_dim: self.label_emb_dim,
            sent_dim: self.sent_dim,
            sentiment_conditioning: self.sentiment_conditioning,
            ..GeneratorConfig::new(vocab_size)
        }
    }

    pub fn discriminator_config(&self, vocab_size: usize) -> DiscriminatorConfig {
        DiscriminatorConfig {
            emb_dim: self.disc_emb_dim,
            enc_hidden: self.disc_enc_hidden,
            label_emb_dim: self.label_emb_dim,
            sent_dim: self.sent_dim,
            resp_hidden: self.disc_resp_hidden,
            mlp_hidden: self.disc_mlp_hidden,
            ..DiscriminatorConfig::new(vocab_size)
        }
    }

    pub fn classifier_config(&self, vocab_size: usize) -> ClassifierConfig {
        ClassifierConfig {
            emb_dim: self.clf_emb_dim,
            enc_hidden: self.clf_enc_hidden,
            mlp_hidden: self.clf_mlp_hidden,
            ..ClassifierConfig::new(vocab_size)
        }
    }

    pub fn new_generator(&self, vocab_size: usize, seed: u64) -> Result<Generator> {
        let g = self.generator_config(vocab_size);
        if self.model_family.has_latent() {
            Generator::new_cvae(
                CvaeConfig {
                    generator: g,
                    z_dim: self.z_dim,
                    bow_hidden: self.bow_hidden,
                },
                seed,
            )
        } else {
            Generator::new_seq2seq(g, seed)
        }
    }
}

// ---------------------------------------------------------------------------
// Metrics

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    PretrainG,
    PretrainD,
    Adversarial,
    Classifier,
}

/// One metrics row per optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub phase: Phase,
    pub loss: f64,
    pub reconstruction_nll: Option<f64>,
    pub kl: Option<f64>,
    pub bow: Option<f64>,
    pub kl_weight: Option<f64>,
    pub reward_mean: Option<f64>,
    pub baseline: Option<f64>,
    pub d_accuracy: Option<f64>,
    pub grad_norm: f64,
}

impl StepRecord {
    fn new(step: usize, phase: Phase, loss: f64, grad_norm: f64) -> Self {
        Self {
            step,
            phase,
            loss,
            reconstruction_nll: None,
            kl: None,
            bow: None,
            kl_weight: None,
            reward_mean: None,
            baseline: None,
            d_accuracy: None,
            grad_norm,
        }
    }

    fn with_parts(mut self, parts: &ElboParts, latent: bool) -> Self {
        self.reconstruction_nll = Some(parts.reconstruction_nll);
        if latent {
            self.kl = Some(parts.kl);
            self.bow = Some(parts.bow);
        }
        self
    }
}

/// Append-only metrics stream, optionally mirrored to a JSONL file.
#[derive(Debug, Default)]
pub struct MetricsLog {
    rows: Vec<StepRecord>,
    out: Option<BufWriter<File>>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn to_file(path: &Path) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            rows: Vec::new(),
            out: Some(BufWriter::new(f)),
        })
    }

    pub fn push(&mut self, row: StepRecord) -> Result<()> {
        if let Some(out) = &mut self.out {
            let line = serde_json::to_string(&row)?;
            writeln!(out, "{line}").map_err(|e| Error::io("metrics.jsonl", e))?;
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[StepRecord] {
        &self.rows
    }

    pub fn phase(&self, phase: Phase) -> impl Iterator<Item = &StepRecord> {
        self.rows.iter().filter(move |r| r.phase == phase)
    }

    pub fn flush(&mut self) -> Result<()> {
        if let Some(out) = &mut self.out {
            out.flush().map_err(|e| Error::io("metrics.jsonl", e))?;
        }
        Ok(())
    }
}

fn check_finite(value: f64, phase: &str, step: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            phase: phase.to_string(),
            step,
        })
    }
}

// ---------------------------------------------------------------------------
// Generator pretraining and teacher forcing

/// Linear KL warm-up over the first `fraction` of `total` steps.
pub fn kl_weight(step: usize, total: usize, fraction: f64) -> f64 {
    let warm = fraction * total as f64;
    if warm <= 0.0 {
        1.0
    } else {
        ((step + 1) as f64 / warm).min(1.0)
    }
}

/// Standard-normal noise for the reparameterized latent (empty for seq2seq).
pub fn draw_eps(g: &Generator, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..g.z_dim()).map(|_| StandardNormal.sample(rng)).collect()
}

/// Summed maximum-likelihood gradient on gold responses, the objective
/// generator pretraining descends. `eps[i]` drives item `i`'s latent.
pub fn teacher_forcing_step(
    g: &Generator,
    examples: &[&DialogueExample],
    eps: &[Vec<f64>],
    kl_weight: f64,
) -> Result<(Gradients, ElboParts)> {
    if examples.is_empty() {
        return Err(Error::Empty("teacher forcing batch"));
    }
    if eps.len() != examples.len() {
        return Err(Error::Invalid(format!("{} noise vectors for {} examples", eps.len(), examples.len())));
    }
    let items: Vec<(&DialogueExample, &Vec<f64>)> = examples.iter().copied().zip(eps).collect();
    let (grads, parts) = batch::accumulate(g.store(), &items, |(ex, e), gr| {
        g.mle_gradient(ex.history.tokens(), ex.label, ex.response.tokens(), e, kl_weight, gr)
    })?;
    let mut sum = ElboParts {
        total: 0.0,
        reconstruction_nll: 0.0,
        kl: 0.0,
        bow: 0.0,
    };
    for p in &parts {
        sum.total += p.total;
        sum.reconstruction_nll += p.reconstruction_nll;
        sum.kl += p.kl;
        sum.bow += p.bow;
    }
    Ok((grads, sum))
}

fn mean_parts(p: &ElboParts, n: usize) -> ElboParts {
    let n = n as f64;
    ElboParts {
        total: p.total / n,
        reconstruction_nll: p.reconstruction_nll / n,
        kl: p.kl / n,
        bow: p.bow / n,
    }
}

/// Maximum-likelihood training with Adam and clipping, one row per step.
pub fn pretrain_generator(
    g: &mut Generator,
    adam: &mut Adam,
    train: &[DialogueExample],
    cfg: &TrainRunConfig,
    rng: &mut ChaCha8Rng,
    log: &mut MetricsLog,
) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Empty("generator training split"));
    }
    let mut batcher = Batcher::new(train.len(), rng.random());
    let steps = cfg.pretrain_g_steps;
    for step in 0..steps {
        let idx = batcher.next_batch(cfg.batch_size);
        let examples: Vec<&DialogueExample> = idx.iter().map(|&i| &train[i]).collect();
        let eps: Vec<Vec<f64>> = examples.iter().map(|_| draw_eps(g, rng)).collect();
        let w = kl_weight(step, steps, cfg.kl_anneal_fraction);
        let (mut grads, sum) = teacher_forcing_step(g, &examples, &eps, w)?;
        let parts = mean_parts(&sum, examples.len());
        check_finite(parts.total, "generator pretraining", step)?;
        grads.scale(1.0 / examples.len() as f64);
        let norm = clip_gradients(&mut grads, cfg.clip);
        check_finite(norm, "generator pretraining", step)?;
        adam.update(g.store_mut(), &grads);
        let mut row = StepRecord::new(step, Phase::PretrainG, parts.total, norm).with_parts(&parts, g.is_latent());
        if g.is_latent() {
            row.kl_weight = Some(w);
        }
        log.push(row)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Rewards and the policy gradient

/// Sequence-level reward for a generated response.
pub trait Reward: Sync {
    fn reward(&self, history: &[usize], y: SentimentLabel, response: &[usize]) -> Result<f64>;
}

impl Reward for Discriminator {
    fn reward(&self, history: &[usize], y: SentimentLabel, response: &[usize]) -> Result<f64> {
        self.score(&Triple {
            history: history.to_vec(),
            label: y,
            response: response.to_vec(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub reward: f64,
    pub baseline: f64,
    pub advantage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub path: SampledPath,
    pub record: RewardRecord,
}

/// Adds `(reward - baseline) * d log p(path)` to `grads`: one term of the
/// likelihood-ratio estimate of the expected reward's gradient.
pub fn reinforce_gradient(
    g: &Generator,
    history: &[usize],
    y: SentimentLabel,
    path: &SampledPath,
    reward: f64,
    baseline: f64,
    grads: &mut Gradients,
) -> Result<()> {
    let advantage = reward - baseline;
    if advantage != 0.0 {
        g.path_log_prob_gradient(history, y, path, advantage, grads)?;
    }
    Ok(())
}

/// One sampled response per `(history, y, seed)` item, scored by `reward`.
/// Returns the summed ascent direction for the expected reward; the caller
/// applies it.
pub fn reinforce_step(
    g: &Generator,
    items: &[(&[usize], SentimentLabel, u64)],
    reward: &dyn Reward,
    baseline: f64,
    max_len: usize,
) -> Result<(Gradients, Vec<Rollout>)> {
    batch::accumulate(g.store(), items, |&(h, y, seed), gr| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let path = g.sample_path(h, y, max_len, DecodeMode::Sample, &mut rng)?;
        let r = reward.reward(h, y, &path.tokens)?;
        reinforce_gradient(g, h, y, &path, r, baseline, gr)?;
        Ok(Rollout {
            path,
            record: RewardRecord {
                reward: r,
                baseline,
                advantage: r - baseline,
            },
        })
    })
}

/// Exponential moving average of the batch-mean reward.
pub fn update_baseline(b: f64, mean_reward: f64, decay: f64) -> f64 {
    decay * b + (1.0 - decay) * mean_reward
}

// ---------------------------------------------------------------------------
// Discriminator

pub fn gold_triple(ex: &DialogueExample) -> Triple {
    Triple {
        history: ex.history.tokens().to_vec(),
        label: ex.label,
        response: ex.response.tokens().to_vec(),
    }
}

/// Machine triples: one sampled response per `(example, seed)`.
pub fn sample_negatives(g: &Generator, items: &[(&DialogueExample, u64)], max_len: usize) -> Result<Vec<Triple>> {
    batch::map(items, |&(ex, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let path = g.sample_path(ex.history.tokens(), ex.label, max_len, DecodeMode::Sample, &mut rng)?;
        Ok(Triple {
            history: ex.history.tokens().to_vec(),
            label: ex.label,
            response: path.tokens,
        })
    })
}

/// A discriminator batch: gold positives and either fresh generator samples
/// or, in sanity mode, gold responses of an independent draw.
fn discriminator_batch(
    g: &Generator,
    split: &[DialogueExample],
    batcher: &mut Batcher,
    cfg: &TrainRunConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Triple>, Vec<Triple>)> {
    let pos_idx = batcher.next_batch(cfg.batch_size);
    let neg_idx = batcher.next_batch(cfg.batch_size);
    let pos: Vec<Triple> = pos_idx.iter().map(|&i| gold_triple(&split[i])).collect();
    let neg = if cfg.d_sanity_negatives {
        neg_idx.iter().map(|&i| gold_triple(&split[i])).collect()
    } else {
        let items: Vec<(&DialogueExample, u64)> = neg_idx.iter().map(|&i| (&split[i], rng.random())).collect();
        sample_negatives(g, &items, cfg.sample_max_len)?
    };
    Ok((pos, neg))
}

/// Trains `d` against the frozen `g`, which is only read.
pub fn pretrain_discriminator(
    d: &mut Discriminator,
    adam: &mut Adam,
    g: &Generator,
    train: &[DialogueExample],
    cfg: &TrainRunConfig,
    rng: &mut ChaCha8Rng,
    log: &mut MetricsLog,
) -> Result<()> {
    if train.is_empty() {
        return Err(Error::Empty("discriminator training split"));
    }
    let mut batcher = Batcher::new(train.len(), rng.random());
    for step in 0..cfg.pretrain_d_steps {
        let (pos, neg) = discriminator_batch(g, train, &mut batcher, cfg, rng)?;
        let (mut grads, stats) = d.batch_gradient(&pos, &neg)?;
        check_finite(stats.loss, "discriminator pretraining", step)?;
        let norm = clip_gradients(&mut grads, cfg.clip);
        adam.update(&mut d.store, &grads);
        let mut row = StepRecord::new(step, Phase::PretrainD, stats.loss, norm);
        row.d_accuracy = Some(stats.accuracy);
        log.push(row)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorEval {
    pub auc: f64,
    pub accuracy: f64,
    pub n_positive: usize,
    pub n_negative: usize,
}

/// Held-out AUC and accuracy of `d` separating gold responses from samples
/// of `g`. In sanity mode both classes are gold: the first half of the
/// split is scored as positive and the second half as negative.
pub fn evaluate_discriminator(
    d: &Discriminator,
    g: &Generator,
    split: &[DialogueExample],
    cfg: &TrainRunConfig,
    seed: u64,
) -> Result<DiscriminatorEval> {
    if split.len() < 2 {
        return Err(Error::Empty("discriminator evaluation split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (pos, neg): (Vec<Triple>, Vec<Triple>) = if cfg.d_sanity_negatives {
        let half = split.len() / 2;
        (split[..half].iter().map(gold_triple).collect(), split[half..].iter().map(gold_triple).collect())
    } else {
        let items: Vec<(&DialogueExample, u64)> = split.iter().map(|ex| (ex, rng.random())).collect();
        (split.iter().map(gold_triple).collect(), sample_negatives(g, &items, cfg.sample_max_len)?)
    };
    let sp = batch::map(&pos, |t| d.score(t))?;
    let sn = batch::map(&neg, |t| d.score(t))?;
    let correct = sp.iter().filter(|&&p| p > 0.5).count() + sn.iter().filter(|&&p| p <= 0.5).count();
    Ok(DiscriminatorEval {
        auc: auc(&sp, &sn)?,
        accuracy: correct as f64 / (sp.len() + sn.len()) as f64,
        n_positive: sp.len(),
        n_negative: sn.len(),
    })
}

// ---------------------------------------------------------------------------
// Adversarial game

/// Mutable state of the two players.
pub struct Players<'a> {
    pub g: &'a mut Generator,
    pub g_adam: &'a mut Adam,
    pub d: &'a mut Discriminator,
    pub d_adam: &'a mut Adam,
    /// `None` until the first batch, which initializes it to its mean reward.
    pub baseline: &'a mut Option<f64>,
}

pub type CheckpointHook<'a> = dyn FnMut(usize, &Generator, &Discriminator) -> Result<()> + 'a;

/// Alternating game: each generator step combines the policy gradient of
/// the discriminator's reward with the teacher-forcing gradient on gold
/// responses (for the latent family that gradient is the lower bound plus
/// bag-of-words term), then the discriminator takes
/// `d_steps_per_g_step` steps on fresh triples.
pub fn adversarial_train(
    players: Players<'_>,
    train: &[DialogueExample],
    cfg: &TrainRunConfig,
    rng: &mut ChaCha8Rng,
    log: &mut MetricsLog,
    checkpoint: Option<&mut CheckpointHook<'_>>,
) -> Result<()> {
    if !cfg.model_family.is_adversarial() {
        return Err(Error::Config(format!("model family {} has no adversarial phase", cfg.model_family)));
    }
    if train.is_empty() {
        return Err(Error::Empty("adversarial training split"));
    }
    let Players {
        g,
        g_adam,
        d,
        d_adam,
        baseline,
    } = players;
    let mut checkpoint = checkpoint;
    let mut g_batcher = Batcher::new(train.len(), rng.random());
    let mut d_batcher = Batcher::new(train.len(), rng.random());
    for step in 0..cfg.adversarial_steps {
        let d_before = d.store.fingerprint();

        let idx = g_batcher.next_batch(cfg.batch_size);
        let examples: Vec<&DialogueExample> = idx.iter().map(|&i| &train[i]).collect();
        let n = examples.len() as f64;
        let items: Vec<(&[usize], SentimentLabel, u64)> =
            examples.iter().map(|ex| (ex.history.tokens(), ex.label, rng.random())).collect();
        let eps: Vec<Vec<f64>> = examples.iter().map(|_| draw_eps(g, rng)).collect();

        // The first batch's mean reward seeds the baseline. Sampling under
        // a fixed seed is independent of the baseline, so scoring first and
        // rerunning with the resolved value replays the same paths.
        let b = match *baseline {
            Some(b) => b,
            None => {
                let (_, probe) = reinforce_step(g, &items, &*d, 0.0, cfg.sample_max_len)?;
                probe.iter().map(|r| r.record.reward).sum::<f64>() / n
            }
        };
        let (rl_grads, rollouts) = reinforce_step(g, &items, &*d, b, cfg.sample_max_len)?;
        let reward_mean = rollouts.iter().map(|r| r.record.reward).sum::<f64>() / n;
        let (mut grads, sum) = teacher_forcing_step(g, &examples, &eps, 1.0)?;
        let parts = mean_parts(&sum, examples.len());
        check_finite(parts.total, "adversarial", step)?;
        check_finite(reward_mean, "adversarial", step)?;
        grads.add_scaled(&rl_grads, -1.0);
        grads.scale(1.0 / n);
        let norm = clip_gradients(&mut grads, cfg.clip);
        check_finite(norm, "adversarial", step)?;
        g_adam.update(g.store_mut(), &grads);
        *baseline = Some(update_baseline(b, reward_mean, cfg.baseline_decay));
        if d.store.fingerprint() != d_before {
            return Err(Error::Invalid(format!("generator update touched discriminator parameters at step {step}")));
        }

        let g_before = g.store().fingerprint();
        let mut d_accuracy = 0.0;
        for _ in 0..cfg.d_steps_per_g_step {
            let (pos, neg) = discriminator_batch(g, train, &mut d_batcher, cfg, rng)?;
            let (mut dg, stats) = d.batch_gradient(&pos, &neg)?;
            check_finite(stats.loss, "adversarial discriminator", step)?;
            clip_gradients(&mut dg, cfg.clip);
            d_adam.update(&mut d.store, &dg);
            d_accuracy += stats.accuracy;
        }
        if g.store().fingerprint() != g_before {
            return Err(Error::Invalid(format!("discriminator update touched generator parameters at step {step}")));
        }

        let mut row = StepRecord::new(step, Phase::Adversarial, parts.total, norm).with_parts(&parts, g.is_latent());
        row.reward_mean = Some(reward_mean);
        row.baseline = Some(b);
        row.d_accuracy = Some(d_accuracy / cfg.d_steps_per_g_step as f64);
        log.push(row)?;

        if let Some(hook) = checkpoint.as_deref_mut() {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                hook(step + 1, g, d)?;
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Full runs and run directories

pub const CONFIG_FILE: &str = "config.toml";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const GENERATOR_DIR: &str = "generator";
pub const PRETRAINED_DIR: &str = "pretrained";
pub const DISCRIMINATOR_DIR: &str = "discriminator";
pub const CLASSIFIER_DIR: &str = "classifier";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub model_family: ModelFamily,
    pub config_fingerprint: String,
    pub vocab_size: usize,
    pub train_examples: usize,
    pub generator_parameters: usize,
    pub pretrain_final_loss: Option<f64>,
    pub discriminator: Option<DiscriminatorEval>,
    pub classifier_accuracy: Option<f64>,
    pub reward_mean_first: Option<f64>,
    pub reward_mean_last: Option<f64>,
}

pub struct TrainOutcome {
    pub generator: Generator,
    /// The generator as pretraining left it, for adversarial families.
    pub pretrained: Option<Generator>,
    pub discriminator: Option<Discriminator>,
    pub classifier: Option<SentimentClassifier>,
    pub metrics: Vec<StepRecord>,
    pub summary: RunSummary,
}

/// Mean of the first and last tenth (at least one row) of `values`.
pub fn head_tail_means(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let k = (values.len() / 10).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&values[..k]), mean(&values[values.len() - k..])))
}

/// Runs the configured family end to end. With `out`, writes the run
/// directory: config snapshot, vocabulary, metrics, checkpoints, summary.
pub fn train_run(cfg: &TrainRunConfig, corpus: &CorpusSplit, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    match cfg.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("threads: {e}")))?
            .install(|| train_run_inner(cfg, corpus, out)),
        None => train_run_inner(cfg, corpus, out),
    }
}

fn train_run_inner(cfg: &TrainRunConfig, corpus: &CorpusSplit, out: Option<&Path>) -> Result<TrainOutcome> {
    if corpus.train.is_empty() {
        return Err(Error::Empty("training split"));
    }
    let held_out: &[DialogueExample] = if corpus.dev.is_empty() { &corpus.test } else { &corpus.dev };
    let v = corpus.vocab.len();
    let mut log = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            fs::write(dir.join(CONFIG_FILE), cfg.to_toml()).map_err(|e| Error::io(dir.join(CONFIG_FILE), e))?;
            corpus.vocab.save(&dir.join(VOCAB_FILE))?;
            MetricsLog::to_file(&dir.join(METRICS_FILE))?
        }
        None => MetricsLog::in_memory(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut g = cfg.new_generator(v, rng.random())?;
    let mut g_adam = Adam::new(g.store(), cfg.lr);
    pretrain_generator(&mut g, &mut g_adam, &corpus.train, cfg, &mut rng, &mut log)?;
    let pretrain_final_loss = log.phase(Phase::PretrainG).last().map(|r| r.loss);

    let mut pretrained = None;
    let mut discriminator = None;
    let mut d_eval = None;
    if cfg.model_family.is_adversarial() {
        pretrained = Some(g.clone());
        let mut d = Discriminator::new(cfg.discriminator_config(v), rng.random())?;
        let mut d_adam = Adam::new(&d.store, cfg.lr);
        pretrain_discriminator(&mut d, &mut d_adam, &g, &corpus.train, cfg, &mut rng, &mut log)?;
        if held_out.len() >= 2 {
            d_eval = Some(evaluate_discriminator(&d, &g, held_out, cfg, rng.random())?);
        }
        let mut baseline = None;
        let family = cfg.model_family;
        let mut hook = |step: usize, g: &Generator, d: &Discriminator| -> Result<()> {
            if let Some(dir) = out {
                let ck = dir.join("checkpoints").join(format!("step-{step:06}"));
                g.save(&ck.join(GENERATOR_DIR), family, None)?;
                d.save(&ck.join(DISCRIMINATOR_DIR), None)?;
            }
            Ok(())
        };
        adversarial_train(
            Players {
                g: &mut g,
                g_adam: &mut g_adam,
                d: &mut d,
                d_adam: &mut d_adam,
                baseline: &mut baseline,
            },
            &corpus.train,
            cfg,
            &mut rng,
            &mut log,
            Some(&mut hook),
        )?;
        if let Some(dir) = out {
            pretrained.as_ref().expect("set above").save(&dir.join(PRETRAINED_DIR), ModelFamily::base(family), None)?;
            d.save(&dir.join(DISCRIMINATOR_DIR), Some(&d_adam))?;
        }
        discriminator = Some(d);
    }

    let mut classifier = None;
    let mut classifier_accuracy = None;
    if cfg.classifier_steps > 0 {
        let t = ClassifierTraining {
            steps: cfg.classifier_steps,
            batch_size: cfg.batch_size,
            lr: cfg.lr,
            clip: cfg.clip,
            seed: rng.random(),
        };
        let (clf, steps) = train_sentiment_classifier(&corpus.train, cfg.classifier_config(v), &t)?;
        for s in steps {
            log.push(StepRecord::new(s.step, Phase::Classifier, s.loss, 0.0))?;
        }
        if !held_out.is_empty() {
            classifier_accuracy = Some(clf.accuracy(held_out)?);
        }
        if let Some(dir) = out {
            clf.save(&dir.join(CLASSIFIER_DIR))?;
        }
        classifier = Some(clf);
    }

    let rewards: Vec<f64> = log.phase(Phase::Adversarial).filter_map(|r| r.reward_mean).collect();
    let ht = head_tail_means(&rewards);
    let summary = RunSummary {
        model_family: cfg.model_family,
        config_fingerprint: cfg.fingerprint(),
        vocab_size: v,
        train_examples: corpus.train.len(),
        generator_parameters: g.store().num_scalars(),
        pretrain_final_loss,
        discriminator: d_eval,
        classifier_accuracy,
        reward_mean_first: ht.map(|p| p.0),
        reward_mean_last: ht.map(|p| p.1),
    };
    if let Some(dir) = out {
        g.save(&dir.join(GENERATOR_DIR), cfg.model_family, Some(&g_adam))?;
        fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(dir.join(SUMMARY_FILE), e))?;
    }
    log.flush()?;
    Ok(TrainOutcome {
        generator: g,
        pretrained,
        discriminator,
        classifier,
        metrics: log.rows().to_vec(),
        summary,
    })
}

/// A trained run directory opened for evaluation or serving.
pub struct RunBundle {
    pub dir: PathBuf,
    pub config: TrainRunConfig,
    pub vocab: Vocabulary,
    pub generator: Generator,
    pub family: ModelFamily,
    pub classifier: Option<SentimentClassifier>,
}

impl RunBundle {
    pub fn load(dir: &Path) -> Result<Self> {
        let config = TrainRunConfig::load(&dir.join(CONFIG_FILE))?;
        let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
        let (generator, family, _) = Generator::load(&dir.join(GENERATOR_DIR))?;
        if generator.config().vocab_size != vocab.len() {
            return Err(Error::Checkpoint(format!(
                "{}: generator vocabulary {} does not match vocab.txt ({})",
                dir.display(),
                generator.config().vocab_size,
                vocab.len()
            )));
        }
        let clf_dir = dir.join(CLASSIFIER_DIR);
        let classifier = if clf_dir.exists() { Some(SentimentClassifier::load(&clf_dir)?) } else { None };
        Ok(Self {
            dir: dir.to_path_buf(),
            config,
            vocab,
            generator,
            family,
            classifier,
        })
    }
}
