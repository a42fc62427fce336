//! GRU cells and the bidirectional encoder.
//!
//! Gate convention: `h' = (1 - z) * h + z * n`, with `z` the update gate and
//! `n = tanh(Wx_n x + Wh_n (r * h) + b_n)` the candidate state.

use rand_chacha::ChaCha8Rng;

use super::params::ParamStore;
use super::tape::{gru_forward, GruParams, Tape, Var};
use crate::error::{Error, Result};

impl GruParams {
    pub fn allocate(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let wx = store.weight(format!("{name}.wx"), vec![3 * hidden_dim, input_dim], rng);
        let wh = store.weight(format!("{name}.wh"), vec![3 * hidden_dim, hidden_dim], rng);
        let b = store.zeros(format!("{name}.b"), vec![3 * hidden_dim]);
        Self {
            wx,
            wh,
            b,
            input_dim,
            hidden_dim,
        }
    }

    fn check(&self, store: &ParamStore) -> Result<()> {
        let (i, h) = (self.input_dim, self.hidden_dim);
        let expect = [(self.wx, vec![3 * h, i]), (self.wh, vec![3 * h, h]), (self.b, vec![3 * h])];
        for (id, shape) in expect {
            if store.get(id).shape() != shape.as_slice() {
                return Err(Error::shape("gru params", format!("{shape:?}"), format!("{:?}", store.get(id).shape())));
            }
        }
        Ok(())
    }
}

/// One GRU step outside of any tape.
pub fn gru_step(x: &[f64], h: &[f64], p: &GruParams, store: &ParamStore) -> Result<Vec<f64>> {
    p.check(store)?;
    if x.len() != p.input_dim {
        return Err(Error::shape("gru_step input", p.input_dim, x.len()));
    }
    if h.len() != p.hidden_dim {
        return Err(Error::shape("gru_step hidden", p.hidden_dim, h.len()));
    }
    Ok(gru_forward(store, p, x, h).0)
}

/// Output of a bidirectional pass: per-position states `[fwd_t; bwd_t]` and
/// the final summary `[fwd_last; bwd_last]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiEncoding<T> {
    pub states: Vec<T>,
    pub last: T,
}

/// Forward and backward GRUs sharing one input sequence.
#[derive(Debug, Clone, Copy)]
pub struct BiGru {
    pub fwd: GruParams,
    pub bwd: GruParams,
}

impl BiGru {
    pub fn allocate(store: &mut ParamStore, name: &str, input_dim: usize, hidden_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            fwd: GruParams::allocate(store, &format!("{name}.fwd"), input_dim, hidden_dim, rng),
            bwd: GruParams::allocate(store, &format!("{name}.bwd"), input_dim, hidden_dim, rng),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.fwd.hidden_dim + self.bwd.hidden_dim
    }

    pub fn encode(&self, tape: &mut Tape<'_>, inputs: &[Var]) -> BiEncoding<Var> {
        encode_on_tape(tape, inputs, &self.fwd, &self.bwd)
    }
}

pub(crate) fn encode_on_tape(tape: &mut Tape<'_>, inputs: &[Var], fwd: &GruParams, bwd: &GruParams) -> BiEncoding<Var> {
    assert!(!inputs.is_empty(), "bidirectional encoder needs a nonempty sequence");
    let mut h = tape.input(vec![0.0; fwd.hidden_dim]);
    let mut forward = Vec::with_capacity(inputs.len());
    for &x in inputs {
        h = tape.gru(*fwd, x, h);
        forward.push(h);
    }
    let mut h = tape.input(vec![0.0; bwd.hidden_dim]);
    let mut backward = vec![h; inputs.len()];
    for (t, &x) in inputs.iter().enumerate().rev() {
        h = tape.gru(*bwd, x, h);
        backward[t] = h;
    }
    let states = forward
        .iter()
        .zip(&backward)
        .map(|(&f, &b)| tape.concat(&[f, b]))
        .collect();
    let last = tape.concat(&[*forward.last().unwrap(), backward[0]]);
    BiEncoding { states, last }
}

/// Bidirectional encoding of a sequence of input vectors.
pub fn encode_bidirectional(
    seq: &[Vec<f64>],
    fwd: &GruParams,
    bwd: &GruParams,
    store: &ParamStore,
) -> Result<BiEncoding<Vec<f64>>> {
    if seq.is_empty() {
        return Err(Error::Empty("encode_bidirectional sequence"));
    }
    fwd.check(store)?;
    bwd.check(store)?;
    if fwd.input_dim != bwd.input_dim {
        return Err(Error::shape("encode_bidirectional", fwd.input_dim, bwd.input_dim));
    }
    if let Some(bad) = seq.iter().find(|x| x.len() != fwd.input_dim) {
        return Err(Error::shape("encode_bidirectional input", fwd.input_dim, bad.len()));
    }
    let mut tape = Tape::new(store);
    let inputs: Vec<Var> = seq.iter().map(|x| tape.input(x.clone())).collect();
    let enc = encode_on_tape(&mut tape, &inputs, fwd, bwd);
    Ok(BiEncoding {
        states: enc.states.iter().map(|&s| tape.value(s).to_vec()).collect(),
        last: tape.value(enc.last).to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::finite_difference_check;
    use crate::nn::params::Gradients;
    use rand::{Rng, SeedableRng};

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-scale..scale)).collect()
    }

    #[test]
    fn zero_params_halve_the_state() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = GruParams::allocate(&mut store, "g", 3, 4, &mut rng);
        store.rescale(0.0);
        let h = vec![0.4, -0.2, 0.9, -0.7];
        let out = gru_step(&[1.0, 2.0, -3.0], &h, &p, &store).unwrap();
        for (o, hi) in out.iter().zip(&h) {
            assert_eq!(*o, 0.5 * hi);
        }
    }

    #[test]
    fn state_stays_inside_unit_box() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = GruParams::allocate(&mut store, "g", 3, 6, &mut rng);
        // Moderate scale: tanh saturates to exactly 1.0 in f64 beyond ~19.
        store.randomize(1.0, &mut rng);
        for _ in 0..200 {
            let x = rand_vec(&mut rng, 3, 3.0);
            let h = rand_vec(&mut rng, 6, 0.999);
            let out = gru_step(&x, &h, &p, &store).unwrap();
            assert!(out.iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = GruParams::allocate(&mut store, "g", 3, 4, &mut rng);
        assert!(gru_step(&[1.0, 2.0], &[0.0; 4], &p, &store).is_err());
        assert!(gru_step(&[1.0, 2.0, 3.0], &[0.0; 5], &p, &store).is_err());
    }

    #[test]
    fn gru_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = GruParams::allocate(&mut store, "g", 3, 5, &mut rng);
        store.randomize(0.5, &mut rng);
        let x = rand_vec(&mut rng, 3, 1.0);
        let h = rand_vec(&mut rng, 5, 0.9);
        let loss = |s: &ParamStore| {
            let out = gru_step(&x, &h, &p, s).unwrap();
            out.iter().map(|v| v * v).sum::<f64>()
        };
        let mut tape = Tape::new(&store);
        let xv = tape.input(x.clone());
        let hv = tape.input(h.clone());
        let out = tape.gru(p, xv, hv);
        let sq = tape.mul(out, out);
        let total = tape.sum(sq);
        let mut grads = Gradients::zeros_like(&store);
        tape.backward(total, 1.0, &mut grads);
        let err = finite_difference_check(loss, &store, &grads, 1e-6).unwrap();
        assert!(err < 1e-5, "max relative error {err}");
    }

    #[test]
    fn length_one_state_equals_final() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = BiGru::allocate(&mut store, "e", 3, 4, &mut rng);
        let out = encode_bidirectional(&[vec![0.1, 0.2, 0.3]], &enc.fwd, &enc.bwd, &store).unwrap();
        assert_eq!(out.states.len(), 1);
        assert_eq!(out.states[0], out.last);
    }

    #[test]
    fn reversal_swaps_halves_under_param_swap() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = BiGru::allocate(&mut store, "e", 3, 4, &mut rng);
        store.randomize(0.5, &mut rng);
        let seq: Vec<Vec<f64>> = (0..5).map(|_| rand_vec(&mut rng, 3, 1.0)).collect();
        let rev: Vec<Vec<f64>> = seq.iter().rev().cloned().collect();
        let a = encode_bidirectional(&seq, &enc.fwd, &enc.bwd, &store).unwrap();
        let b = encode_bidirectional(&rev, &enc.bwd, &enc.fwd, &store).unwrap();
        let mut swapped = a.last[4..].to_vec();
        swapped.extend_from_slice(&a.last[..4]);
        assert_eq!(swapped, b.last);
    }

    #[test]
    fn full_sized_encoder_has_256_outputs() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = BiGru::allocate(&mut store, "e", 8, 128, &mut rng);
        let out = encode_bidirectional(&[vec![0.5; 8], vec![-0.5; 8]], &enc.fwd, &enc.bwd, &store).unwrap();
        assert_eq!(out.last.len(), 256);
        assert_eq!(enc.output_dim(), 256);
    }

    #[test]
    fn empty_sequence_is_an_error() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = BiGru::allocate(&mut store, "e", 2, 2, &mut rng);
        assert!(matches!(
            encode_bidirectional(&[], &enc.fwd, &enc.bwd, &store),
            Err(Error::Empty(_))
        ));
    }
}
