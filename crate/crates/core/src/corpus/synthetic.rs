//! Templated verification dialogues. Each history names one topic; the
//! response vocabulary is fixed by (topic, label), so sentiment is always
//! recoverable from the response words alone.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{corpus_from_records, tokenize, CorpusSplit, IngestConfig, RawRecord, SentimentLabel, Vocabulary};
use crate::error::{Error, Result};

/// Sentiment-bearing words of the synthetic corpus.
#[derive(Debug, Clone, Copy)]
pub struct Lexicon {
    pub positive: &'static [&'static str],
    pub negative: &'static [&'static str],
}

pub const SYNTHETIC_LEXICON: Lexicon = Lexicon {
    positive: &["great", "awesome", "amazing", "love", "enjoyed", "omg", "yay"],
    negative: &["awful", "boring", "terrible", "hate", "hated", "ugh", "meh"],
};

const NOUNS: [&str; 6] = ["movie", "song", "pizza", "game", "trip", "book"];
const VERBS: [&str; 6] = ["watched", "heard", "ate", "played", "booked", "read"];

struct Words {
    adjectives: [&'static str; 3],
    verbs: [&'static str; 2],
    interjections: [&'static str; 2],
}

const POSITIVE: Words = Words {
    adjectives: ["great", "awesome", "amazing"],
    verbs: ["love", "enjoyed"],
    interjections: ["omg", "yay"],
};

const NEGATIVE: Words = Words {
    adjectives: ["awful", "boring", "terrible"],
    verbs: ["hate", "hated"],
    interjections: ["ugh", "meh"],
};

fn history(template: usize, topic: usize, count: u32) -> String {
    let (n, v) = (NOUNS[topic], VERBS[topic]);
    match template {
        0 => format!("i just {v} the new {n}"),
        1 => format!("have you seen the new {n} ?"),
        2 => format!("what do you think about the {n} ?"),
        3 => format!("we got {count} tickets for the {n} today"),
        _ => format!("i {v} the {n} last night with friends lol"),
    }
}

fn response(template: usize, topic: usize, label: SentimentLabel) -> String {
    let w = match label {
        SentimentLabel::Positive => &POSITIVE,
        SentimentLabel::Negative => &NEGATIVE,
    };
    let n = NOUNS[topic];
    let adj = w.adjectives[topic % 3];
    let verb = w.verbs[topic % 2];
    let interj = w.interjections[(topic / 3) % 2];
    match template {
        0 => format!("i {verb} the {n}"),
        1 => format!("the {n} is {adj}"),
        2 => format!("{interj} that {n} is so {adj}"),
        _ => format!("{adj} {n} !"),
    }
}

/// Raw records with labels and an 80/10/10 split already assigned.
/// Exactly a quarter of the pairs (rounded) are negative.
pub fn synthetic_records(seed: u64, n_pairs: usize) -> Result<Vec<RawRecord>> {
    if n_pairs < 10 {
        return Err(Error::Invalid(format!("synthetic corpus needs at least 10 pairs, got {n_pairs}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_neg = (n_pairs as f64 / 4.0).round() as usize;
    let mut labels: Vec<SentimentLabel> = (0..n_pairs)
        .map(|i| if i < n_neg { SentimentLabel::Negative } else { SentimentLabel::Positive })
        .collect();
    labels.shuffle(&mut rng);
    let n_dev = n_pairs / 10;
    let n_test = n_pairs / 10;
    let n_train = n_pairs - n_dev - n_test;
    Ok(labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let topic = rng.random_range(0..NOUNS.len());
            let h = history(rng.random_range(0..5), topic, rng.random_range(2..10));
            let r = response(rng.random_range(0..4), topic, label);
            let split = if i < n_train {
                "train"
            } else if i < n_train + n_dev {
                "dev"
            } else {
                "test"
            };
            RawRecord {
                history: h,
                response: r,
                label: Some(label),
                emoji: None,
                split: Some(split.to_string()),
            }
        })
        .collect())
}

/// Deterministic synthetic corpus. The vocabulary always covers every
/// template word, however few pairs are drawn.
pub fn generate_synthetic_corpus(seed: u64, n_pairs: usize) -> Result<CorpusSplit> {
    let records = synthetic_records(seed, n_pairs)?;
    let cfg = IngestConfig::default();
    let mut texts: Vec<Vec<String>> = records
        .iter()
        .filter(|r| r.split.as_deref() == Some("train"))
        .flat_map(|r| [tokenize(&r.history), tokenize(&r.response)])
        .collect();
    texts.push(template_words());
    let vocab = Vocabulary::build(texts.iter().map(Vec::as_slice), cfg.vocab_max_size, 1)?;
    corpus_from_records(&records, Some(&vocab), &cfg)
}

fn template_words() -> Vec<String> {
    let mut text = String::new();
    for t in 0..NOUNS.len() {
        for h in 0..5 {
            text.push_str(&history(h, t, 2));
            text.push(' ');
        }
        for label in SentimentLabel::ALL {
            for r in 0..4 {
                text.push_str(&response(r, t, label));
                text.push(' ');
            }
        }
    }
    for w in SYNTHETIC_LEXICON.positive.iter().chain(SYNTHETIC_LEXICON.negative) {
        text.push_str(w);
        text.push(' ');
    }
    tokenize(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn same_seed_same_bytes() {
        let a = generate_synthetic_corpus(7, 2000).unwrap();
        let b = generate_synthetic_corpus(7, 2000).unwrap();
        assert_eq!(a.to_jsonl(), b.to_jsonl());
        assert_ne!(a.to_jsonl(), generate_synthetic_corpus(8, 2000).unwrap().to_jsonl());
    }

    #[test]
    fn ratio_is_three_to_one() {
        let c = generate_synthetic_corpus(7, 2000).unwrap();
        assert_eq!(c.stats.overall.positive, 1500);
        assert_eq!(c.stats.overall.negative, 500);
        assert_eq!(c.stats.overall.ratio, Some(3.0));
        assert_eq!((c.train.len(), c.dev.len(), c.test.len()), (1600, 200, 200));
    }

    #[test]
    fn labels_recoverable_from_lexicon() {
        let c = generate_synthetic_corpus(3, 2000).unwrap();
        let id = |w: &&str| c.vocab.id(w).unwrap();
        let pos: HashSet<usize> = SYNTHETIC_LEXICON.positive.iter().map(id).collect();
        let neg: HashSet<usize> = SYNTHETIC_LEXICON.negative.iter().map(id).collect();
        for ex in c.train.iter().chain(&c.dev).chain(&c.test) {
            let r = ex.response.tokens();
            let p = r.iter().filter(|t| pos.contains(t)).count();
            let n = r.iter().filter(|t| neg.contains(t)).count();
            match ex.label {
                SentimentLabel::Positive => assert!(p >= 1 && n == 0),
                SentimentLabel::Negative => assert!(n >= 1 && p == 0),
            }
            assert!(ex.history.tokens().iter().all(|t| !pos.contains(t) && !neg.contains(t)));
        }
    }

    #[test]
    fn vocabulary_is_small_and_complete() {
        let c = generate_synthetic_corpus(1, 10).unwrap();
        assert!(c.vocab.len() <= 64, "vocab {}", c.vocab.len());
        let big = generate_synthetic_corpus(1, 2000).unwrap();
        assert_eq!(c.vocab.len(), big.vocab.len());
        for ex in big.train.iter() {
            assert!(!ex.response.tokens().contains(&crate::corpus::UNK));
        }
    }

    #[test]
    fn too_few_pairs_rejected() {
        assert!(generate_synthetic_corpus(0, 9).is_err());
    }
}
