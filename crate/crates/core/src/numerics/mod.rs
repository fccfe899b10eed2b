//! Dense tensors, reverse-mode differentiation, Adam, dropout and the scalar
//! nonlinearities used by the models.

mod adam;
pub mod ops;
mod rng;
mod tape;
mod tensor;

pub use adam::{AdamState, ParamUpdate};
pub use ops::{
    affine_forward, binary_cross_entropy, clamp_prob, cosine_similarity, relu, sigmoid, softmax, softplus,
    NORM_EPS, PROB_CLIP,
};
pub use rng::RngStream;
pub use tape::{Gradients, Tape, Var};
pub use tensor::{squared_distance, Tensor};

use crate::error::{Error, Result};

/// Inverted-dropout mask: each entry is 0 with probability `rate`, otherwise
/// `1 / (1 - rate)`, so the masked value has the original expectation.
pub fn dropout_mask(shape: &[usize], rate: f64, rng: &mut RngStream) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Contract(format!("dropout rate {rate} outside [0, 1)")));
    }
    let n: usize = shape.iter().product();
    if rate == 0.0 {
        return Tensor::new(shape.to_vec(), vec![1.0; n]);
    }
    let keep = 1.0 / (1.0 - rate);
    let data = (0..n)
        .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
        .collect();
    Tensor::new(shape.to_vec(), data)
}
