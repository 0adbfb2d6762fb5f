//! Minimal differentiable layer set with explicit forward/backward passes.
//!
//! There is no autograd graph: every [`Layer`] returns a [`Saved`] context
//! from `forward` which its `backward` consumes. Networks compose layers by
//! hand, which keeps the gradient flow through skip connections and padding
//! explicit.

mod attention;
mod conv;
mod gemm;
mod gradcheck;
mod layer;
mod norm;
mod sequential;
mod tensor;

pub use attention::{
    apply_channel_attention, attention_weights, ChannelAttention, ClassAttentionParams,
    OneHotLabel,
};
pub use conv::{conv_out_len, deconv_out_len, Conv2d, ConvTranspose2d};
pub use gemm::Real;
pub use gradcheck::{grad_check, grad_check_sequential};
pub use layer::{Dropout, Layer, LayerKind, Linear, Saved};
pub use norm::BatchNorm2d;
pub use sequential::Sequential;
pub use tensor::Tensor4;

use crate::seed::Rng;

/// Standard deviation of the zero-mean Gaussian used for weight init.
pub const INIT_STD: f64 = 0.02;

/// `Train` enables dropout. Batch normalisation always uses the statistics of
/// the current batch, so the two modes differ only in dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-call forward state: mode, conditioning labels and the dropout stream.
pub struct Pass {
    pub mode: Mode,
    /// One label per batch item, or a single label broadcast to the batch.
    pub labels: Vec<OneHotLabel>,
    pub rng: Rng,
}

impl Pass {
    pub fn new(mode: Mode, seed: u64) -> Self {
        Self { mode, labels: Vec::new(), rng: crate::seed::rng(seed) }
    }

    pub fn with_labels(mut self, labels: Vec<OneHotLabel>) -> Self {
        self.labels = labels;
        self
    }
}

/// A named-by-position learnable tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![T::lit(value); shape.iter().product()] }
    }

    pub fn normal(shape: &[usize], mean: f64, std: f64, rng: &mut Rng) -> Self {
        use rand_distr::{Distribution, Normal};
        let dist = Normal::new(mean, std).expect("valid normal parameters");
        let data = (0..shape.iter().product::<usize>()).map(|_| T::lit(dist.sample(rng))).collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Gradients for a list of parameters, aligned by position.
pub type Grads<T> = Vec<Vec<T>>;

/// Anything with an ordered, named parameter list.
pub trait Network<T: Real> {
    fn params(&self) -> Vec<&Param<T>>;
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;
    fn param_names(&self) -> Vec<String>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

impl<T: Real> Network<T> for Sequential<T> {
    fn params(&self) -> Vec<&Param<T>> {
        Sequential::params(self)
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        Sequential::params_mut(self)
    }

    fn param_names(&self) -> Vec<String> {
        Sequential::param_names(self)
    }
}

pub(crate) fn add_grads<T: Real>(acc: &mut Grads<T>, other: &Grads<T>) {
    debug_assert_eq!(acc.len(), other.len());
    for (a, b) in acc.iter_mut().zip(other) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += *y;
        }
    }
}
