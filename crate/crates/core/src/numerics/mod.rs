//! Minimal dense-tensor kernel with reverse-mode gradients.
//!
//! Exactly the operations a small bidirectional transformer needs: matmul,
//! elementwise add/mul, layer norm, row softmax, gather/scatter, dropout and
//! masked cross-entropy, each with a hand-written backward recorded on a
//! [`Tape`]. Training runs in `f32`; gradient verification replays the same
//! graph in `f64` against central finite differences.

mod kernels;
mod scalar;
mod tape;
mod tensor;

pub mod gradcheck;
pub mod rng;

pub use kernels::{matmul_seq, matmul_threaded};
pub use scalar::Scalar;
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;
