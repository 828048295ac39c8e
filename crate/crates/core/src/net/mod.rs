//! Small reverse-mode differentiated feedforward networks.
//!
//! [`Tape`] records dense 2-D operations; [`NetworkStack`] holds the
//! encoder, mapper, classifier and discriminator and binds their parameters
//! onto a tape for one forward/backward pass.

mod checkpoint;
mod optim;
mod stack;
mod tape;

pub use checkpoint::{read_stack, write_stack, STACK_FORMAT_VERSION, STACK_MAGIC};
pub use optim::{sgd_step, OptimState};
pub use stack::{Activation, BoundStack, Dense, EncoderKind, NetworkStack, Pooling, StackSpec};
pub use tape::{FrozenMap, Gradients, Tape, Var};

use crate::error::Result;
use crate::linalg::Matrix;

/// Mean negative log-softmax of the true-label logits.
pub fn cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    tape::softmax_cross_entropy(logits, labels).map(|(loss, _)| loss)
}

/// Row-wise softmax.
pub fn softmax(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}
