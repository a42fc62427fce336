//! Perplexity, classifier-judged sentiment accuracy, the sentiment
//! classifier, and blinded human-evaluation sheets.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{DialogueExample, SentimentLabel, Vocabulary, EOS, PAD};
use crate::error::{Error, Result};
use crate::generator::DecodeMode;
use crate::model::Generator;
use crate::nn::tape::sigmoid;
use crate::nn::{batch, checkpoint, clip_gradients, Adam, BiGru, Embedding, Gradients, Mlp, ParamStore, Tape, Var};

// ---------------------------------------------------------------------------
// Sentiment classifier

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub vocab_size: usize,
    pub eos_id: usize,
    pub pad_id: Option<usize>,
    pub emb_dim: usize,
    pub enc_hidden: usize,
    pub mlp_hidden: usize,
}

impl ClassifierConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            eos_id: EOS,
            pad_id: Some(PAD),
            emb_dim: 64,
            enc_hidden: 128,
            mlp_hidden: 64,
        }
    }
}

/// Bidirectional-GRU response classifier; outputs P(positive).
#[derive(Debug, Clone)]
pub struct SentimentClassifier {
    pub store: ParamStore,
    pub cfg: ClassifierConfig,
    pub embedding: Embedding,
    pub encoder: BiGru,
    pub head: Mlp,
}

impl SentimentClassifier {
    pub fn new(cfg: ClassifierConfig, seed: u64) -> Result<Self> {
        if cfg.vocab_size < 2 || cfg.eos_id >= cfg.vocab_size {
            return Err(Error::Config("classifier vocabulary must contain EOS".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embedding = Embedding::allocate(&mut store, "clf.embedding", cfg.vocab_size, cfg.emb_dim, &mut rng);
        let encoder = BiGru::allocate(&mut store, "clf.encoder", cfg.emb_dim, cfg.enc_hidden, &mut rng);
        let head = Mlp::allocate(&mut store, "clf.head", encoder.output_dim(), cfg.mlp_hidden, 1, &mut rng);
        Ok(Self {
            store,
            cfg,
            embedding,
            encoder,
            head,
        })
    }

    fn masked(&self, tokens: &[usize]) -> Result<Vec<usize>> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::Invalid(format!("token id {bad} >= vocab size {}", self.cfg.vocab_size)));
        }
        let end = tokens
            .iter()
            .position(|&t| t == self.cfg.eos_id || Some(t) == self.cfg.pad_id)
            .unwrap_or(tokens.len());
        Ok(if end == 0 { vec![self.cfg.eos_id] } else { tokens[..end].to_vec() })
    }

    fn logit_on_tape(&self, tape: &mut Tape<'_>, tokens: &[usize]) -> Var {
        let x = self.embedding.lookup_all(tape, tokens);
        let enc = self.encoder.encode(tape, &x);
        self.head.forward(tape, enc.last)
    }

    pub fn prob_positive(&self, response: &[usize]) -> Result<f64> {
        let tokens = self.masked(response)?;
        let mut tape = Tape::new(&self.store);
        let l = self.logit_on_tape(&mut tape, &tokens);
        Ok(sigmoid(tape.scalar(l)).clamp(1e-12, 1.0 - 1e-12))
    }

    pub fn predict(&self, response: &[usize]) -> Result<SentimentLabel> {
        Ok(if self.prob_positive(response)? > 0.5 {
            SentimentLabel::Positive
        } else {
            SentimentLabel::Negative
        })
    }

    /// Adds the BCE gradient; returns (loss, correct).
    pub fn gradient(&self, response: &[usize], y: SentimentLabel, grads: &mut Gradients) -> Result<(f64, bool)> {
        let tokens = self.masked(response)?;
        let mut tape = Tape::new(&self.store);
        let l = self.logit_on_tape(&mut tape, &tokens);
        let label = y.index() as f64;
        let loss = tape.bce_with_logit(l, label);
        tape.backward(loss, 1.0, grads);
        Ok((tape.scalar(loss), (tape.scalar(l) > 0.0) == (label > 0.5)))
    }

    pub fn accuracy(&self, examples: &[DialogueExample]) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::Empty("classifier evaluation split"));
        }
        let hits = batch::map(examples, |ex| Ok(self.predict(ex.response.tokens())? == ex.label))?;
        Ok(hits.iter().filter(|&&h| h).count() as f64 / examples.len() as f64)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::save(dir, "classifier", serde_json::to_value(self.cfg)?, &self.store, None)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ck = checkpoint::load(dir)?;
        if ck.family != "classifier" {
            return Err(Error::Checkpoint(format!("{}: expected a classifier checkpoint, found {}", dir.display(), ck.family)));
        }
        let cfg: ClassifierConfig = serde_json::from_value(ck.meta)?;
        let mut c = Self::new(cfg, 0)?;
        checkpoint::assign(&mut c.store, &ck.params)?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTraining {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierStep {
    pub step: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Cycles through seeded permutations of `n` indices.
pub struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    pub fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size && !self.order.is_empty() {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Trains on (response, label) pairs; returns the model and its loss log.
pub fn train_sentiment_classifier(
    train: &[DialogueExample],
    cfg: ClassifierConfig,
    t: &ClassifierTraining,
) -> Result<(SentimentClassifier, Vec<ClassifierStep>)> {
    if train.is_empty() {
        return Err(Error::Empty("classifier training split"));
    }
    let mut clf = SentimentClassifier::new(cfg, t.seed)?;
    let mut adam = Adam::new(&clf.store, t.lr);
    let mut batcher = Batcher::new(train.len(), t.seed ^ 0x5eed);
    let mut log = Vec::with_capacity(t.steps);
    for step in 0..t.steps {
        let idx = batcher.next_batch(t.batch_size.max(1));
        let (mut grads, out) = batch::accumulate(&clf.store, &idx, |&i, g| {
            let ex = &train[i];
            clf.gradient(ex.response.tokens(), ex.label, g)
        })?;
        let n = idx.len() as f64;
        let loss = out.iter().map(|o| o.0).sum::<f64>() / n;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                phase: "classifier".into(),
                step,
            });
        }
        grads.scale(1.0 / n);
        clip_gradients(&mut grads, t.clip);
        adam.update(&mut clf.store, &grads);
        log.push(ClassifierStep {
            step,
            loss,
            accuracy: out.iter().filter(|o| o.1).count() as f64 / n,
        });
    }
    Ok((clf, log))
}

// ---------------------------------------------------------------------------
// Perplexity

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perplexity {
    pub perplexity: f64,
    pub total_nll: f64,
    /// Response tokens plus one EOS per example.
    pub tokens: usize,
    /// True when the NLL is the latent model's upper bound.
    pub is_bound: bool,
}

/// `exp(sum NLL / sum (len + 1))` over gold responses.
pub fn corpus_perplexity(g: &Generator, split: &[DialogueExample]) -> Result<Perplexity> {
    if split.is_empty() {
        return Err(Error::Empty("perplexity split"));
    }
    let nlls = batch::map(split, |ex| g.eval_nll(ex.history.tokens(), ex.label, ex.response.tokens()))?;
    let total_nll: f64 = nlls.iter().sum();
    let tokens: usize = split.iter().map(|ex| ex.response.len() + 1).sum();
    Ok(Perplexity {
        perplexity: (total_nll / tokens as f64).exp(),
        total_nll,
        tokens,
        is_bound: g.nll_is_bound(),
    })
}

// ---------------------------------------------------------------------------
// Sentiment accuracy

/// Anything that answers a history under a requested sentiment.
pub trait Responder: Sync {
    fn respond(&self, history: &[usize], y: SentimentLabel, seed: u64) -> Result<Vec<usize>>;
}

pub struct GeneratorResponder<'a> {
    pub generator: &'a Generator,
    pub max_len: usize,
    pub mode: DecodeMode,
}

impl Responder for GeneratorResponder<'_> {
    fn respond(&self, history: &[usize], y: SentimentLabel, seed: u64) -> Result<Vec<usize>> {
        self.generator.respond(history, y, self.max_len, self.mode, seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    /// Exactly half the requests positive, assigned by seeded shuffle.
    Assigned,
    /// Each history keeps its corpus label.
    Gold,
}

impl std::str::FromStr for LabelMode {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "assigned" => Ok(LabelMode::Assigned),
            "gold" => Ok(LabelMode::Gold),
            other => Err(format!("unknown label mode {other:?} (expected assigned or gold)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LabelCount {
    pub requested: usize,
    pub correct: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentimentAccuracy {
    pub accuracy: f64,
    pub n_examples: usize,
    pub label_mode: LabelMode,
    pub positive: LabelCount,
    pub negative: LabelCount,
}

/// One generation request drawn for evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Request {
    pub example: usize,
    pub label: SentimentLabel,
    pub seed: u64,
}

/// `n` requests over `split`: histories cycle through seeded permutations,
/// labels follow `mode`, and each request gets its own decoding seed.
pub fn draw_requests(split: &[DialogueExample], n: usize, seed: u64, mode: LabelMode) -> Result<Vec<Request>> {
    if split.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..split.len()).collect();
    let mut examples = Vec::with_capacity(n);
    while examples.len() < n {
        order.shuffle(&mut rng);
        examples.extend(order.iter().take(n - examples.len()));
    }
    let mut labels: Vec<SentimentLabel> = (0..n)
        .map(|i| if i < n / 2 { SentimentLabel::Positive } else { SentimentLabel::Negative })
        .collect();
    labels.shuffle(&mut rng);
    Ok(examples
        .into_iter()
        .zip(labels)
        .map(|(example, assigned)| Request {
            example,
            label: match mode {
                LabelMode::Assigned => assigned,
                LabelMode::Gold => split[example].label,
            },
            seed: rng.random(),
        })
        .collect())
}

/// Fraction of generated responses whose classifier label equals the
/// requested one.
pub fn sentiment_accuracy(
    model: &dyn Responder,
    split: &[DialogueExample],
    clf: &SentimentClassifier,
    n: usize,
    seed: u64,
    mode: LabelMode,
) -> Result<SentimentAccuracy> {
    if n == 0 {
        return Err(Error::Invalid("sentiment accuracy needs n >= 1".into()));
    }
    let requests = draw_requests(split, n, seed, mode)?;
    let hits = batch::map(&requests, |r| {
        let response = model.respond(split[r.example].history.tokens(), r.label, r.seed)?;
        Ok(clf.predict(&response)? == r.label)
    })?;
    let mut positive = LabelCount::default();
    let mut negative = LabelCount::default();
    for (r, &hit) in requests.iter().zip(&hits) {
        let c = match r.label {
            SentimentLabel::Positive => &mut positive,
            SentimentLabel::Negative => &mut negative,
        };
        c.requested += 1;
        c.correct += hit as usize;
    }
    Ok(SentimentAccuracy {
        accuracy: (positive.correct + negative.correct) as f64 / n as f64,
        n_examples: n,
        label_mode: mode,
        positive,
        negative,
    })
}

/// Full evaluation document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_family: String,
    pub split: String,
    pub perplexity: f64,
    /// "exact" or "<=-bound".
    pub perplexity_kind: String,
    pub sentiment_accuracy: f64,
    pub n_examples: usize,
    pub label_mode: LabelMode,
    pub per_label: BTreeMap<String, LabelCount>,
    pub config_fingerprint: String,
}

impl EvalReport {
    pub fn new(family: &str, split: &str, ppl: &Perplexity, acc: &SentimentAccuracy, fingerprint: String) -> Self {
        let mut per_label = BTreeMap::new();
        per_label.insert("positive".to_string(), acc.positive);
        per_label.insert("negative".to_string(), acc.negative);
        Self {
            model_family: family.to_string(),
            split: split.to_string(),
            perplexity: ppl.perplexity,
            perplexity_kind: if ppl.is_bound { "<=-bound" } else { "exact" }.to_string(),
            sentiment_accuracy: acc.accuracy,
            n_examples: acc.n_examples,
            label_mode: acc.label_mode,
            per_label,
            config_fingerprint: fingerprint,
        }
    }
}

// ---------------------------------------------------------------------------
// Human evaluation sheets

pub const QUALITY_SHEET: &str = "quality_sheet.csv";
pub const SENTIMENT_SHEET: &str = "sentiment_sheet.csv";
pub const KEY_FILE: &str = "key.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyRow {
    pub id: String,
    pub setting: String,
    pub model: String,
    pub example: usize,
    pub requested: SentimentLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HumanEvalExport {
    pub quality_sheet: PathBuf,
    pub sentiment_sheet: PathBuf,
    pub key: PathBuf,
    pub rows_per_sheet: usize,
}

/// Writes two blinded sheets over disjoint item sets: setting (a) shows
/// history and response for a 1-5 quality score; setting (b) shows the
/// response alone for sentiment labeling. `key.csv` maps rows to models.
pub fn export_human_eval(
    models: &[(String, &dyn Responder)],
    split: &[DialogueExample],
    vocab: &Vocabulary,
    n: usize,
    seed: u64,
    dir: &Path,
) -> Result<HumanEvalExport> {
    if n == 0 {
        return Err(Error::Invalid("human evaluation needs n >= 1 items".into()));
    }
    if models.is_empty() {
        return Err(Error::Empty("human evaluation models"));
    }
    if split.len() < 2 * n {
        return Err(Error::Invalid(format!(
            "human evaluation needs {} distinct histories for two disjoint settings, split has {}",
            2 * n,
            split.len()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..split.len()).collect();
    order.shuffle(&mut rng);
    let (items_a, items_b) = (&order[..n], &order[n..2 * n]);

    struct Row {
        setting: &'static str,
        model: usize,
        example: usize,
        label: SentimentLabel,
        seed: u64,
    }
    let mut build = |setting: &'static str, items: &[usize]| -> Vec<Row> {
        let mut rows = Vec::new();
        for &example in items {
            let label = if rng.random::<bool>() { SentimentLabel::Positive } else { SentimentLabel::Negative };
            for model in 0..models.len() {
                rows.push(Row {
                    setting,
                    model,
                    example,
                    label,
                    seed: rng.random(),
                });
            }
        }
        rows.shuffle(&mut rng);
        rows
    };
    let rows_a = build("a", items_a);
    let rows_b = build("b", items_b);

    let render = |r: &Row| -> Result<String> {
        let resp = models[r.model].1.respond(split[r.example].history.tokens(), r.label, r.seed)?;
        Ok(vocab.decode(&resp))
    };
    let quality_sheet = dir.join(QUALITY_SHEET);
    let sentiment_sheet = dir.join(SENTIMENT_SHEET);
    let key = dir.join(KEY_FILE);
    let mut wa = csv::Writer::from_path(&quality_sheet)?;
    wa.write_record(["id", "history", "response"])?;
    let mut wb = csv::Writer::from_path(&sentiment_sheet)?;
    wb.write_record(["id", "response"])?;
    let mut wk = csv::Writer::from_path(&key)?;
    for (i, r) in rows_a.iter().enumerate() {
        let id = format!("a-{:04}", i + 1);
        wa.write_record([id.as_str(), &vocab.decode(split[r.example].history.tokens()), &render(r)?])?;
        wk.serialize(key_row(id, r.setting, &models[r.model].0, r.example, r.label))?;
    }
    for (i, r) in rows_b.iter().enumerate() {
        let id = format!("b-{:04}", i + 1);
        wb.write_record([id.as_str(), &render(r)?])?;
        wk.serialize(key_row(id, r.setting, &models[r.model].0, r.example, r.label))?;
    }
    for w in [&mut wa, &mut wb, &mut wk] {
        w.flush().map_err(|e| Error::io(dir, e))?;
    }
    Ok(HumanEvalExport {
        quality_sheet,
        sentiment_sheet,
        key,
        rows_per_sheet: n * models.len(),
    })
}

fn key_row(id: String, setting: &str, model: &str, example: usize, requested: SentimentLabel) -> KeyRow {
    KeyRow {
        id,
        setting: setting.to_string(),
        model: model.to_string(),
        example,
        requested,
    }
}

#[derive(Debug, Clone, Deserialize)]
struct Judgement {
    id: String,
    judge: String,
    value: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ModelJudgements {
    /// Mean over setting-(a) items of the judges' mean score.
    pub quality_mean: Option<f64>,
    pub quality_items: usize,
    /// Mean over setting-(b) items of the fraction of judges whose label
    /// matched the requested sentiment.
    pub sentiment_agreement: Option<f64>,
    pub sentiment_items: usize,
}

/// Reads judgements (`id,judge,value`: a 1-5 score for setting (a) rows,
/// positive/negative for setting (b) rows) and averages them per model.
pub fn import_human_eval(key_path: &Path, judgements_path: &Path) -> Result<BTreeMap<String, ModelJudgements>> {
    let mut key: HashMap<String, KeyRow> = HashMap::new();
    for row in csv::Reader::from_path(key_path)?.deserialize() {
        let row: KeyRow = row?;
        key.insert(row.id.clone(), row);
    }
    let mut per_item: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut judges_seen: HashMap<(String, String), ()> = HashMap::new();
    for (line, row) in csv::Reader::from_path(judgements_path)?.deserialize().enumerate() {
        let j: Judgement = row?;
        let bad = |reason: String| Error::MalformedRecord {
            path: judgements_path.to_path_buf(),
            line: line + 2,
            reason,
        };
        let k = key.get(&j.id).ok_or_else(|| bad(format!("unknown item id {:?}", j.id)))?;
        if judges_seen.insert((j.id.clone(), j.judge.clone()), ()).is_some() {
            return Err(bad(format!("judge {:?} scored {:?} twice", j.judge, j.id)));
        }
        let v = match k.setting.as_str() {
            "a" => {
                let s: f64 = j.value.trim().parse().map_err(|_| bad(format!("score {:?} is not a number", j.value)))?;
                if !(1.0..=5.0).contains(&s) {
                    return Err(bad(format!("score {s} outside 1-5")));
                }
                s
            }
            _ => {
                let l = SentimentLabel::parse(j.value.trim()).ok_or_else(|| bad(format!("label {:?} is not positive/negative", j.value)))?;
                (l == k.requested) as u8 as f64
            }
        };
        per_item.entry(j.id).or_default().push(v);
    }
    let mut sums: BTreeMap<String, (f64, usize, f64, usize)> = BTreeMap::new();
    for (id, vals) in &per_item {
        let k = &key[id];
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let e = sums.entry(k.model.clone()).or_default();
        if k.setting == "a" {
            e.0 += mean;
            e.1 += 1;
        } else {
            e.2 += mean;
            e.3 += 1;
        }
    }
    Ok(sums
        .into_iter()
        .map(|(m, (qa, qn, sa, sn))| {
            (
                m,
                ModelJudgements {
                    quality_mean: (qn > 0).then(|| qa / qn as f64),
                    quality_items: qn,
                    sentiment_agreement: (sn > 0).then(|| sa / sn as f64),
                    sentiment_items: sn,
                },
            )
        })
        .collect())
}
