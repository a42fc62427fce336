use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Affine map `W x + b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn allocate(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: store.weight(format!("{name}.w"), vec![out_dim, in_dim], rng),
            b: store.zeros(format!("{name}.b"), vec![out_dim]),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        tape.linear(self.w, Some(self.b), x)
    }
}

/// One tanh hidden layer followed by a linear output layer.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    pub fn allocate(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            hidden: Linear::allocate(store, &format!("{name}.hidden"), in_dim, hidden_dim, rng),
            output: Linear::allocate(store, &format!("{name}.out"), hidden_dim, out_dim, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let h = self.hidden.forward(tape, x);
        let h = tape.tanh(h);
        self.output.forward(tape, h)
    }
}

/// Token embedding table `[vocab, dim]`.
#[derive(Debug, Clone, Copy)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn allocate(store: &mut ParamStore, name: &str, vocab: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            table: store.weight(format!("{name}.table"), vec![vocab, dim], rng),
            vocab,
            dim,
        }
    }

    pub fn lookup(&self, tape: &mut Tape<'_>, id: usize) -> Var {
        debug_assert!(id < self.vocab, "token id {id} out of range {}", self.vocab);
        tape.row(self.table, id)
    }

    pub fn lookup_all(&self, tape: &mut Tape<'_>, ids: &[usize]) -> Vec<Var> {
        ids.iter().map(|&id| self.lookup(tape, id)).collect()
    }
}

/// Luong "general" attention: `score_i = q^T W e_i`.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub w: ParamId,
    pub query_dim: usize,
    pub key_dim: usize,
}

impl Attention {
    pub fn allocate(store: &mut ParamStore, name: &str, query_dim: usize, key_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: store.weight(format!("{name}.w"), vec![query_dim, key_dim], rng),
            query_dim,
            key_dim,
        }
    }

    /// Projects encoder states once per sequence so each decoding step only
    /// needs dot products.
    pub fn keys(&self, tape: &mut Tape<'_>, states: &[Var]) -> Vec<Var> {
        states.iter().map(|&s| tape.linear(self.w, None, s)).collect()
    }

    pub fn context(&self, tape: &mut Tape<'_>, query: Var, keys: &[Var], states: &[Var]) -> (Var, Vec<f64>) {
        tape.attention(query, keys, states)
    }
}

/// Attention context for one query outside of any tape; returns the
/// weighted sum of `enc_states` and the normalized weights.
pub fn attention_context(
    dec_state: &[f64],
    enc_states: &[Vec<f64>],
    attn: &Attention,
    store: &ParamStore,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if enc_states.is_empty() {
        return Err(Error::Empty("attention encoder states"));
    }
    if dec_state.len() != attn.query_dim {
        return Err(Error::shape("attention query", attn.query_dim, dec_state.len()));
    }
    if let Some(bad) = enc_states.iter().find(|s| s.len() != attn.key_dim) {
        return Err(Error::shape("attention key", attn.key_dim, bad.len()));
    }
    let mut tape = Tape::new(store);
    let q = tape.input(dec_state.to_vec());
    let states: Vec<Var> = enc_states.iter().map(|s| tape.input(s.clone())).collect();
    let keys = attn.keys(&mut tape, &states);
    let (ctx, weights) = attn.context(&mut tape, q, &keys, &states);
    Ok((tape.value(ctx).to_vec(), weights))
}
