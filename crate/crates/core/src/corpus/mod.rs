//! Dialogue data: labels, tokenization, JSON-lines ingestion, splits and the
//! synthetic verification corpus.

mod emoji;
mod synthetic;
mod vocab;

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use emoji::{map_emoji_to_sentiment, EmojiTable};
pub use synthetic::{generate_synthetic_corpus, synthetic_records, Lexicon, SYNTHETIC_LEXICON};
pub use vocab::{Vocabulary, BOS, DGT, EOS, PAD, SPECIALS, UNK};

use crate::error::{Error, Result};

/// Binary response sentiment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SentimentLabel {
    Negative,
    Positive,
}

impl SentimentLabel {
    pub const ALL: [SentimentLabel; 2] = [SentimentLabel::Negative, SentimentLabel::Positive];

    /// 1 for positive, 0 for negative.
    pub fn index(self) -> usize {
        match self {
            SentimentLabel::Negative => 0,
            SentimentLabel::Positive => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(SentimentLabel::Negative),
            1 => Some(SentimentLabel::Positive),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SentimentLabel::Negative => "negative",
            SentimentLabel::Positive => "positive",
        }
    }

    /// Accepts "positive"/"negative" (any case) and "1"/"0".
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "positive" | "1" => Some(SentimentLabel::Positive),
            "negative" | "0" => Some(SentimentLabel::Negative),
            _ => None,
        }
    }

    pub fn flip(self) -> Self {
        match self {
            SentimentLabel::Negative => SentimentLabel::Positive,
            SentimentLabel::Positive => SentimentLabel::Negative,
        }
    }
}

impl std::fmt::Display for SentimentLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for SentimentLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for SentimentLabel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Text(String),
        }
        let parsed = match Raw::deserialize(d)? {
            Raw::Int(i) => SentimentLabel::from_index(i as usize),
            Raw::Text(s) => SentimentLabel::parse(&s),
        };
        parsed.ok_or_else(|| serde::de::Error::custom("label must be positive/negative or 1/0"))
    }
}

/// A nonempty token-id sequence with no padding inside it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Utterance(Vec<usize>);

impl Utterance {
    pub fn new(tokens: Vec<usize>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Empty("utterance"));
        }
        if tokens.contains(&PAD) {
            return Err(Error::Invalid("utterance contains <pad>".into()));
        }
        Ok(Self(tokens))
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
}

/// `(history, response, label)` triple.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DialogueExample {
    pub history: Utterance,
    pub response: Utterance,
    pub label: SentimentLabel,
}

/// Ids up to (not including) the first `<eos>` or `<pad>`.
pub fn trim_at_end(tokens: &[usize]) -> &[usize] {
    let end = tokens.iter().position(|&t| t == EOS || t == PAD).unwrap_or(tokens.len());
    &tokens[..end]
}

/// Lowercased whitespace tokenization. Punctuation (except apostrophes)
/// becomes its own token, digit runs collapse to `<dgt>`, and the reserved
/// markers such as `<unk>` stay atomic.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut out = Vec::new();
    for chunk in lower.split_whitespace() {
        let mut word = String::new();
        let mut rest = chunk;
        while let Some(c) = rest.chars().next() {
            if c == '<' {
                if let Some(special) = SPECIALS.iter().find(|s| rest.starts_with(*s)) {
                    flush(&mut word, &mut out);
                    out.push(special.to_string());
                    rest = &rest[special.len()..];
                    continue;
                }
            }
            if c.is_ascii_digit() {
                flush(&mut word, &mut out);
                let n = rest.find(|ch: char| !ch.is_ascii_digit()).unwrap_or(rest.len());
                out.push(SPECIALS[DGT].to_string());
                rest = &rest[n..];
                continue;
            }
            if c != '\'' && (c.is_ascii_punctuation() || is_unicode_punct(c)) {
                flush(&mut word, &mut out);
                out.push(c.to_string());
            } else {
                word.push(c);
            }
            rest = &rest[c.len_utf8()..];
        }
        flush(&mut word, &mut out);
    }
    out
}

fn flush(word: &mut String, out: &mut Vec<String>) {
    if !word.is_empty() {
        out.push(std::mem::take(word));
    }
}

fn is_unicode_punct(c: char) -> bool {
    matches!(c, '“' | '”' | '‘' | '…' | '¡' | '¿' | '«' | '»' | '—' | '–')
}

/// Counts for one split. `ratio` is positive/negative, `None` when there are
/// no negative examples.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SplitStats {
    pub examples: usize,
    pub positive: usize,
    pub negative: usize,
    pub ratio: Option<f64>,
}

impl SplitStats {
    pub fn of(examples: &[DialogueExample]) -> Self {
        let positive = examples.iter().filter(|e| e.label == SentimentLabel::Positive).count();
        let negative = examples.len() - positive;
        Self {
            examples: examples.len(),
            positive,
            negative,
            ratio: (negative > 0).then(|| positive as f64 / negative as f64),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CorpusStats {
    pub train: SplitStats,
    pub dev: SplitStats,
    pub test: SplitStats,
    pub overall: SplitStats,
    /// Records whose label could not be resolved (unknown emoji).
    pub skipped_unlabeled: usize,
    /// Records whose history or response tokenized to nothing.
    pub skipped_empty: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit {
    pub vocab: Vocabulary,
    pub train: Vec<DialogueExample>,
    pub dev: Vec<DialogueExample>,
    pub test: Vec<DialogueExample>,
    pub stats: CorpusStats,
    /// Splits are drawn from disjoint record sets.
    pub disjoint: bool,
}

impl CorpusSplit {
    pub fn recompute_stats(&self) -> CorpusStats {
        let all: Vec<DialogueExample> = self.train.iter().chain(&self.dev).chain(&self.test).cloned().collect();
        CorpusStats {
            train: SplitStats::of(&self.train),
            dev: SplitStats::of(&self.dev),
            test: SplitStats::of(&self.test),
            overall: SplitStats::of(&all),
            skipped_unlabeled: self.stats.skipped_unlabeled,
            skipped_empty: self.stats.skipped_empty,
        }
    }

    pub fn split(&self, which: SplitName) -> &[DialogueExample] {
        match which {
            SplitName::Train => &self.train,
            SplitName::Dev => &self.dev,
            SplitName::Test => &self.test,
        }
    }

    /// Decoded JSON-lines rendering with explicit labels and split names;
    /// loading it back reproduces the same splits.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (name, split) in [("train", &self.train), ("dev", &self.dev), ("test", &self.test)] {
            for ex in split.iter() {
                let rec = RawRecord {
                    history: self.vocab.decode(ex.history.tokens()),
                    response: self.vocab.decode(ex.response.tokens()),
                    label: Some(ex.label),
                    emoji: None,
                    split: Some(name.to_string()),
                };
                out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
                out.push('\n');
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Dev,
    Test,
}

impl std::str::FromStr for SplitName {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(SplitName::Train),
            "dev" => Ok(SplitName::Dev),
            "test" => Ok(SplitName::Test),
            other => Err(format!("unknown split {other:?} (expected train, dev or test)")),
        }
    }
}

impl std::fmt::Display for SplitName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Dev => "dev",
            SplitName::Test => "test",
        })
    }
}

/// One JSON-lines record: `history`, `response`, and `label` or `emoji`;
/// `split` optionally pins the record to train/dev/test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub history: String,
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<SentimentLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emoji: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

#[derive(Debug, Clone)]
pub struct IngestConfig {
    pub max_len: usize,
    pub dev_fraction: f64,
    pub test_fraction: f64,
    pub split_seed: u64,
    pub vocab_max_size: usize,
    pub vocab_min_count: usize,
    pub emoji_table: EmojiTable,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            max_len: 30,
            dev_fraction: 0.05,
            test_fraction: 0.05,
            split_seed: 0,
            vocab_max_size: 20_000,
            vocab_min_count: 1,
            emoji_table: EmojiTable::bundled(),
        }
    }
}

struct Tokenized {
    history: Vec<String>,
    response: Vec<String>,
    label: SentimentLabel,
    split: Option<SplitName>,
}

/// Reads a JSON-lines corpus. Without `vocab`, one is built from the train
/// split.
pub fn load_corpus(path: &Path, vocab: Option<&Vocabulary>, cfg: &IngestConfig) -> Result<CorpusSplit> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord = serde_json::from_str(line).map_err(|e| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        if let Some(s) = &rec.split {
            s.parse::<SplitName>().map_err(|reason| Error::MalformedRecord {
                path: path.to_path_buf(),
                line: i + 1,
                reason,
            })?;
        }
        records.push(rec);
    }
    corpus_from_records(&records, vocab, cfg)
}

/// Labels, tokenizes, splits and encodes in-memory records.
pub fn corpus_from_records(records: &[RawRecord], vocab: Option<&Vocabulary>, cfg: &IngestConfig) -> Result<CorpusSplit> {
    let mut skipped_unlabeled = 0;
    let mut skipped_empty = 0;
    let mut rows = Vec::with_capacity(records.len());
    for rec in records {
        let label = rec
            .label
            .or_else(|| rec.emoji.as_deref().and_then(|e| map_emoji_to_sentiment(e, &cfg.emoji_table)));
        let Some(label) = label else {
            skipped_unlabeled += 1;
            continue;
        };
        let mut history = tokenize(&rec.history);
        let mut response = tokenize(&rec.response);
        if history.is_empty() || response.is_empty() {
            skipped_empty += 1;
            continue;
        }
        history.truncate(cfg.max_len);
        response.truncate(cfg.max_len);
        let split = rec.split.as_deref().map(|s| s.parse().expect("validated split"));
        rows.push(Tokenized {
            history,
            response,
            label,
            split,
        });
    }

    let mut train = Vec::new();
    let mut dev = Vec::new();
    let mut test = Vec::new();
    let mut unassigned: Vec<usize> = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        match r.split {
            Some(SplitName::Train) => train.push(i),
            Some(SplitName::Dev) => dev.push(i),
            Some(SplitName::Test) => test.push(i),
            None => unassigned.push(i),
        }
    }
    if !unassigned.is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.split_seed);
        unassigned.shuffle(&mut rng);
        let n = unassigned.len() as f64;
        let n_dev = (n * cfg.dev_fraction).round() as usize;
        let n_test = (n * cfg.test_fraction).round() as usize;
        dev.extend_from_slice(&unassigned[..n_dev]);
        test.extend_from_slice(&unassigned[n_dev..n_dev + n_test]);
        train.extend_from_slice(&unassigned[n_dev + n_test..]);
        dev.sort_unstable();
        test.sort_unstable();
        train.sort_unstable();
    }

    let vocab = match vocab {
        Some(v) => v.clone(),
        None => Vocabulary::build(
            train.iter().flat_map(|&i| [rows[i].history.as_slice(), rows[i].response.as_slice()]),
            cfg.vocab_max_size,
            cfg.vocab_min_count,
        )?,
    };
    let encode = |idx: &[usize]| -> Vec<DialogueExample> {
        idx.iter()
            .map(|&i| {
                let r = &rows[i];
                DialogueExample {
                    history: Utterance::new(vocab.encode_tokens(&r.history)).expect("nonempty tokens"),
                    response: Utterance::new(vocab.encode_tokens(&r.response)).expect("nonempty tokens"),
                    label: r.label,
                }
            })
            .collect()
    };
    let mut corpus = CorpusSplit {
        train: encode(&train),
        dev: encode(&dev),
        test: encode(&test),
        vocab,
        stats: CorpusStats::default(),
        disjoint: true,
    };
    corpus.stats = CorpusStats {
        skipped_unlabeled,
        skipped_empty,
        ..Default::default()
    };
    corpus.stats = corpus.recompute_stats();
    Ok(corpus)
}
