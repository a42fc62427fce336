//! Fixtures and brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use moodgen_core::corpus::{DialogueExample, SentimentLabel, Utterance};
use moodgen_core::cvae::{Cvae, CvaeConfig};
use moodgen_core::generator::{GeneratorConfig, Seq2Seq};
use moodgen_core::model::{Generator, SampledPath};
use moodgen_core::nn::{Gradients, ParamStore, Tape};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Hidden sizes at most 8, as the gradient checks require.
pub fn tiny_config(vocab: usize) -> GeneratorConfig {
    GeneratorConfig {
        emb_dim: 4,
        enc_hidden: 4,
        label_emb_dim: 3,
        sent_dim: 3,
        ..GeneratorConfig::new(vocab)
    }
}

/// Three-token model: BOS 0, token 1, EOS 2, no PAD.
pub fn toy_config() -> GeneratorConfig {
    GeneratorConfig {
        vocab_size: 3,
        bos_id: 0,
        eos_id: 2,
        pad_id: None,
        ..tiny_config(3)
    }
}

/// Random weights at a scale large enough that every path matters.
pub fn randomized(store: &mut ParamStore, scale: f64, seed: u64) {
    store.randomize(scale, &mut ChaCha8Rng::seed_from_u64(seed));
}

pub fn toy_seq2seq(seed: u64) -> Seq2Seq {
    let mut m = Seq2Seq::new(toy_config(), seed).unwrap();
    randomized(&mut m.store, 1.0, seed + 100);
    m
}

pub fn tiny_cvae(vocab: usize, z_dim: usize, seed: u64) -> Cvae {
    let mut m = Cvae::new(
        CvaeConfig {
            generator: tiny_config(vocab),
            z_dim,
            bow_hidden: 5,
        },
        seed,
    )
    .unwrap();
    randomized(&mut m.store, 0.5, seed + 100);
    m
}

/// Every outcome of decoding up to `max_len` steps: paths that end in the
/// terminal token, plus full-length paths without one.
pub fn decode_outcomes(vocab: usize, eos: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut frontier: Vec<Vec<usize>> = vec![Vec::new()];
    for depth in 1..=max_len {
        let mut next = Vec::new();
        for prefix in &frontier {
            for w in 0..vocab {
                let mut p = prefix.clone();
                p.push(w);
                if w == eos || depth == max_len {
                    out.push(p);
                } else {
                    next.push(p);
                }
            }
        }
        frontier = next;
    }
    out
}

pub fn example(history: &[usize], response: &[usize], label: SentimentLabel) -> DialogueExample {
    DialogueExample {
        history: Utterance::new(history.to_vec()).unwrap(),
        response: Utterance::new(response.to_vec()).unwrap(),
        label,
    }
}

/// Arbitrary reward in (0, 1) fixed per path.
pub fn path_reward(path: &[usize]) -> f64 {
    let mut h: u64 = 1469598103934665603;
    for &t in path {
        h = (h ^ t as u64).wrapping_mul(1099511628211);
    }
    0.05 + 0.9 * ((h >> 11) as f64 / (1u64 << 53) as f64)
}

/// Gradient of the expected reward `sum_paths R(path) p(path)` by
/// differentiating the enumerated sum itself.
pub fn expected_reward_gradient(m: &Seq2Seq, history: &[usize], y: SentimentLabel, paths: &[Vec<usize>]) -> Gradients {
    let mut tape = Tape::new(&m.store);
    let enc = m.net.encode(&mut tape, history, y);
    let mut terms = Vec::new();
    for path in paths {
        let nll = m.net.path_nll(&mut tape, &enc, None, path);
        let neg = tape.scale(nll, -1.0);
        let p = tape.exp(neg);
        terms.push(tape.scale(p, path_reward(path)));
    }
    let j = tape.sum_all(&terms);
    let mut grads = Gradients::zeros_like(&m.store);
    tape.backward(j, 1.0, &mut grads);
    grads
}

pub fn path_prob(g: &Generator, history: &[usize], y: SentimentLabel, path: &[usize]) -> f64 {
    g.path_log_prob(
        history,
        y,
        &SampledPath {
            tokens: path.to_vec(),
            z: Vec::new(),
        },
    )
    .unwrap()
    .exp()
}

pub fn max_abs_diff(a: &Gradients, b: &Gradients) -> f64 {
    a.flatten().iter().zip(b.flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Per-step probability of each gold token recovered by enumeration: the
/// conditional p(w | prefix) is the ratio of prefix-path probabilities,
/// renormalized over every candidate w.
pub fn enumerated_nll(m: &Seq2Seq, ex: &DialogueExample) -> f64 {
    let h = ex.history.tokens();
    let mut gold = ex.response.tokens().to_vec();
    gold.push(m.config().eos_id);
    let mut nll = 0.0;
    for t in 0..gold.len() {
        let weights: Vec<f64> = (0..m.config().vocab_size)
            .map(|w| {
                let mut path = gold[..t].to_vec();
                path.push(w);
                (-m.path_nll(h, ex.label, &path).unwrap().0).exp()
            })
            .collect();
        let z: f64 = weights.iter().sum();
        nll -= (weights[gold[t]] / z).ln();
    }
    nll
}
