//! SVDF, dense and FiLM layers, each with a plain forward path and a tape path.

mod dense;
mod film;
mod svdf;

pub use dense::{Activation, DenseParams, DenseVars};
pub use film::{film_apply, FilmParams, FilmVars};
pub use svdf::{SvdfLayerParams, SvdfState, SvdfVars};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::numerics::Tensor;

/// Glorot-uniform matrix of shape `[fan_out × fan_in]`.
pub(crate) fn glorot(rng: &mut ChaCha8Rng, fan_out: usize, fan_in: usize) -> Tensor {
    let r = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_out * fan_in).map(|_| rng.random_range(-r..r)).collect();
    Tensor::new(vec![fan_out, fan_in], data).expect("positive dims")
}
