use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::array::DenseArray;

/// Half-width of the uniform weight initialization.
pub const INIT_SCALE: f64 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: DenseArray,
}

/// Ordered collection of named parameter tensors.
///
/// Registration order is part of the model definition: two stores built by
/// the same constructor with the same seed are bit-identical.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a weight tensor drawn from uniform(-INIT_SCALE, INIT_SCALE).
    pub fn weight(&mut self, name: impl Into<String>, shape: Vec<usize>, rng: &mut ChaCha8Rng) -> ParamId {
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.random_range(-INIT_SCALE..INIT_SCALE)).collect();
        self.push(name.into(), DenseArray::new(shape, values).expect("shape product"))
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> ParamId {
        self.push(name.into(), DenseArray::zeros(shape))
    }

    fn push(&mut self, name: String, value: DenseArray) -> ParamId {
        debug_assert!(self.params.iter().all(|p| p.name != name), "duplicate param {name}");
        self.params.push(Param { name, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &DenseArray {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut DenseArray {
        &mut self.params[id.0].value
    }

    pub fn values(&self, id: ParamId) -> &[f64] {
        self.params[id.0].value.values()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Multiply every tensor by `factor`; used by tests that want larger
    /// gradients than the default initialization produces.
    pub fn rescale(&mut self, factor: f64) {
        for p in &mut self.params {
            for v in p.value.values_mut() {
                *v *= factor;
            }
        }
    }

    /// Fill every tensor with fresh uniform(-scale, scale) values.
    pub fn randomize(&mut self, scale: f64, rng: &mut ChaCha8Rng) {
        for p in &mut self.params {
            for v in p.value.values_mut() {
                *v = rng.random_range(-scale..scale);
            }
        }
    }

    /// Hash of every value's bit pattern; equal fingerprints mean the stores
    /// were not touched between two observations.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for p in &self.params {
            p.name.hash(&mut h);
            for v in p.value.values() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }
}

/// Gradient buffers laid out like a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    buffers: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            buffers: store.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.buffers[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.buffers[id.0]
    }

    pub fn buffers(&self) -> &[Vec<f64>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.buffers
    }

    /// `self += scale * other`
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.buffers.iter_mut().zip(&other.buffers) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for b in &mut self.buffers {
            for x in b.iter_mut() {
                *x *= factor;
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.buffers
            .iter()
            .flat_map(|b| b.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.buffers.iter().flat_map(|b| b.iter().copied()).collect()
    }

    pub fn is_zero(&self) -> bool {
        self.buffers.iter().flat_map(|b| b.iter()).all(|&x| x == 0.0)
    }

    pub fn all_finite(&self) -> bool {
        self.buffers.iter().flat_map(|b| b.iter()).all(|x| x.is_finite())
    }

    /// Sums per-chunk gradients in slice order, which keeps the reduction
    /// independent of how many threads produced them.
    pub fn sum_ordered(store: &ParamStore, parts: &[Gradients]) -> Gradients {
        let mut total = Gradients::zeros_like(store);
        for p in parts {
            total.add_scaled(p, 1.0);
        }
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn init_is_seeded_and_bounded() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut s = ParamStore::new();
            s.weight("w", vec![4, 5], &mut rng);
            s.zeros("b", vec![4]);
            s
        };
        let a = build();
        assert_eq!(a, build());
        assert!(a.values(ParamId(0)).iter().all(|v| v.abs() < INIT_SCALE));
        assert!(a.values(ParamId(1)).iter().all(|&v| v == 0.0));
        assert_eq!(a.fingerprint(), build().fingerprint());
    }

    #[test]
    fn fingerprint_sees_single_bit_changes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        let w = s.weight("w", vec![3], &mut rng);
        let before = s.fingerprint();
        let v = &mut s.get_mut(w).values_mut()[1];
        *v = f64::from_bits(v.to_bits() ^ 1);
        assert_ne!(before, s.fingerprint());
    }
}
