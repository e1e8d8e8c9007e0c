//! Dense tensors, reverse-mode differentiation and optimizers.

mod array;
mod gradcheck;
mod graph;
mod optim;
mod scalar;

pub use array::Tensor;
pub use gradcheck::{grad_check, GRAD_CHECK_STEP};
pub use graph::{Gradients, Graph, Var};
pub use optim::{
    adam_update, clip_weights, rmsprop_update, Adam, AdamHyper, ParamStore, RmsProp,
    RmsPropHyper,
};
pub use scalar::Scalar;

use crate::error::{ensure, Error, Result};

/// Probabilities below this are floored before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Softmax of a single logit vector.
pub fn softmax<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    ensure!(!logits.is_empty(), Contract, "softmax of an empty vector");
    ensure!(
        logits.iter().all(|x| x.is_finite()),
        Contract,
        "softmax input must be finite"
    );
    let mut out = logits.to_vec();
    graph::softmax_in_place(&mut out);
    Ok(out)
}

/// `-ln(max(dist[target], 1e-12))`.
pub fn cross_entropy<T: Scalar>(dist: &[T], target: usize) -> Result<T> {
    let p = *dist.get(target).ok_or(Error::Index {
        index: target,
        len: dist.len(),
    })?;
    Ok(-p.max(T::of(PROB_FLOOR)).ln())
}
