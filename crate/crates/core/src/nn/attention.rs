//! Class-conditioned channel attention.
//!
//! A one-hot scene label goes through a fully-connected layer and a sigmoid
//! to give one gate per output channel of the wrapped convolution; the
//! convolution's feature map is scaled channel-wise by those gates before
//! normalisation and activation.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::seed::Rng;

use super::layer::Layer;
use super::{Grads, Param, Real, Saved, Tensor4, INIT_STD};

/// A one-hot class vector, stored as `(index, class count)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct OneHotLabel {
    index: usize,
    classes: usize,
}

impl OneHotLabel {
    pub fn new(index: usize, classes: usize) -> Result<Self> {
        if index >= classes {
            return Err(invalid(format!("class {index} out of range for {classes} classes")));
        }
        Ok(Self { index, classes })
    }

    /// Validates a dense vector: exactly one entry equal to 1, the rest 0.
    pub fn from_vec(v: &[f64]) -> Result<Self> {
        let ones: Vec<usize> = v.iter().enumerate().filter(|(_, x)| **x == 1.0).map(|(i, _)| i).collect();
        let zeros = v.iter().filter(|x| **x == 0.0).count();
        if ones.len() != 1 || zeros != v.len() - 1 {
            return Err(invalid("label is not one-hot"));
        }
        Self::new(ones[0], v.len())
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.classes];
        v[self.index] = 1.0;
        v
    }
}

/// Fully-connected map from a label to per-channel gates.
/// `weight` is `[c_out, k_classes]`, `bias` is `[c_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassAttentionParams<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> ClassAttentionParams<T> {
    pub fn new(c_out: usize, k_classes: usize, rng: &mut Rng) -> Self {
        Self { weight: Param::normal(&[c_out, k_classes], 0.0, INIT_STD, rng), bias: Param::zeros(&[c_out]) }
    }

    pub fn zeros(c_out: usize, k_classes: usize) -> Self {
        Self { weight: Param::zeros(&[c_out, k_classes]), bias: Param::zeros(&[c_out]) }
    }

    pub fn channels(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn classes(&self) -> usize {
        self.weight.shape[1]
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `sigmoid(weight · label + bias)`.
pub fn attention_weights<T: Real>(label: &OneHotLabel, params: &ClassAttentionParams<T>) -> Result<Vec<T>> {
    if label.classes() != params.classes() {
        return Err(invalid(format!(
            "label has {} classes, attention layer expects {}",
            label.classes(),
            params.classes()
        )));
    }
    let k = params.classes();
    Ok((0..params.channels())
        .map(|c| {
            let z = params.weight.data[c * k + label.index()] + params.bias.data[c];
            T::lit(sigmoid(z.as_f64()))
        })
        .collect())
}

/// Scales every channel of `feature` by the matching weight.
pub fn apply_channel_attention<T: Real>(feature: &Tensor4<T>, weights: &[T]) -> Result<Tensor4<T>> {
    if weights.len() != feature.c() {
        return Err(invalid(format!(
            "{} attention weights for {} channels",
            weights.len(),
            feature.c()
        )));
    }
    let mut out = feature.clone();
    let plane = feature.h() * feature.w();
    for n in 0..feature.n() {
        for (c, g) in weights.iter().enumerate() {
            for v in &mut out.item_mut(n)[c * plane..(c + 1) * plane] {
                *v *= *g;
            }
        }
    }
    Ok(out)
}

/// A convolution or transposed convolution whose output channels are gated
/// by class attention.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelAttention<T> {
    pub inner: Layer<T>,
    pub attn: ClassAttentionParams<T>,
}

impl<T: Real> ChannelAttention<T> {
    pub fn new(inner: Layer<T>, k_classes: usize, rng: &mut Rng) -> Result<Self> {
        let c_out = inner
            .out_channels()
            .ok_or_else(|| invalid("channel attention must wrap a conv or deconv layer"))?;
        Ok(Self { inner, attn: ClassAttentionParams::new(c_out, k_classes, rng) })
    }

    /// Per-item gates (`N x C`, row-major) for the batch.
    pub(crate) fn gates(&self, labels: &[OneHotLabel], n: usize) -> Result<(Vec<T>, Vec<usize>)> {
        let per_item: Vec<OneHotLabel> = match labels.len() {
            0 => return Err(invalid("class-conditioned layer called without a label")),
            1 => vec![labels[0]; n],
            l if l == n => labels.to_vec(),
            l => return Err(invalid(format!("{l} labels for a batch of {n}"))),
        };
        let mut gates = Vec::with_capacity(n * self.attn.channels());
        for l in &per_item {
            gates.extend(attention_weights(l, &self.attn)?);
        }
        Ok((gates, per_item.iter().map(|l| l.index()).collect()))
    }

    pub(crate) fn gate_forward(pre: &Tensor4<T>, gates: &[T]) -> Tensor4<T> {
        let c = pre.c();
        let plane = pre.h() * pre.w();
        let mut out = pre.clone();
        for n in 0..pre.n() {
            let item = out.item_mut(n);
            for ci in 0..c {
                let g = gates[n * c + ci];
                for v in &mut item[ci * plane..(ci + 1) * plane] {
                    *v *= g;
                }
            }
        }
        out
    }

    /// Backward through the gate only: returns the gradient w.r.t. the
    /// pre-gate features and the attention parameter gradients.
    pub(crate) fn gate_backward(
        &self,
        pre: &Tensor4<T>,
        gates: &[T],
        classes: &[usize],
        grad_out: &Tensor4<T>,
    ) -> (Tensor4<T>, Grads<T>) {
        let c = pre.c();
        let k = self.attn.classes();
        let plane = pre.h() * pre.w();
        let dpre = Self::gate_forward(grad_out, gates);
        let mut dw = vec![T::zero(); c * k];
        let mut db = vec![T::zero(); c];
        for n in 0..pre.n() {
            let (p, g) = (pre.item(n), grad_out.item(n));
            for ci in 0..c {
                let dgate: f64 = p[ci * plane..(ci + 1) * plane]
                    .iter()
                    .zip(&g[ci * plane..(ci + 1) * plane])
                    .map(|(a, b)| a.as_f64() * b.as_f64())
                    .sum();
                let s = gates[n * c + ci].as_f64();
                let dz = T::lit(dgate * s * (1.0 - s));
                dw[ci * k + classes[n]] += dz;
                db[ci] += dz;
            }
        }
        (dpre, vec![dw, db])
    }

    pub(crate) fn saved_parts(saved: &Saved<T>) -> Option<(&Saved<T>, &Tensor4<T>, &[T], &[usize])> {
        match saved {
            Saved::Attention { inner, pre, gates, classes } => Some((inner, pre, gates, classes)),
            _ => None,
        }
    }
}
