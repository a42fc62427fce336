//! Differentiable substrate: parameters, a reverse-mode tape, GRU cells,
//! attention, losses, Adam, clipping, finite-difference checking and
//! checkpoints.

pub mod array;
pub mod batch;
pub mod checkpoint;
pub mod gradcheck;
pub mod gru;
pub mod layers;
pub mod loss;
pub mod optim;
pub mod params;
pub mod tape;

pub use array::DenseArray;
pub use gradcheck::finite_difference_check;
pub use gru::{encode_bidirectional, gru_step, BiEncoding, BiGru};
pub use layers::{attention_context, Attention, Embedding, Linear, Mlp};
pub use loss::softmax_cross_entropy;
pub use optim::{clip_gradients, Adam};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{GruParams, Tape, Var};
