use crate::error::{invalid, Result};
use crate::nn::{
    conv_out_len, BatchNorm2d, Conv2d, Grads, Layer, Network, Param, Pass, Real, Saved, Sequential, Tensor4,
};
use crate::seed;

use super::Conditioning;

/// Convolutions in the default discriminator: three stride-2 stages, one
/// stride-1 stage and the stride-1 score head.
pub const DISCRIMINATOR_LAYERS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorSpec {
    pub base_channels: usize,
    pub k_classes: usize,
    pub conditioning: Conditioning,
    /// Channels of one image; the network sees condition and candidate
    /// concatenated, i.e. twice this.
    pub image_channels: usize,
    /// Stride-2 stages before the two stride-1 convolutions.
    pub downsampling: usize,
}

impl DiscriminatorSpec {
    pub fn new(base_channels: usize, k_classes: usize, conditioning: Conditioning) -> Self {
        Self { base_channels, k_classes, conditioning, image_channels: 3, downsampling: DISCRIMINATOR_LAYERS - 2 }
    }

    /// Drops stride-2 stages until an input of `height x width` still yields
    /// a non-empty patch map. Leaves the spec unchanged for inputs that are
    /// large enough.
    pub fn fit_to(mut self, height: usize, width: usize) -> Result<Self> {
        while self.patch_shape(height, width).is_none() {
            if self.downsampling == 0 {
                return Err(invalid(format!("input {width}x{height} is too small for the discriminator")));
            }
            self.downsampling -= 1;
        }
        Ok(self)
    }

    /// `(stride, out_channels)` of each convolution.
    fn stages(&self) -> Vec<(usize, usize)> {
        let b = self.base_channels;
        let mut s: Vec<(usize, usize)> = (0..self.downsampling).map(|i| (2, b << i.min(3))).collect();
        s.push((1, b << self.downsampling.min(3)));
        s.push((1, 1));
        s
    }

    /// Patch-map `(height, width)` for an input of `height x width`.
    pub fn patch_shape(&self, height: usize, width: usize) -> Option<(usize, usize)> {
        self.stages().iter().try_fold((height, width), |(h, w), (s, _)| {
            Some((conv_out_len(h, 4, *s, 1).filter(|v| *v > 0)?, conv_out_len(w, 4, *s, 1).filter(|v| *v > 0)?))
        })
    }
}

/// Patch discriminator over `(condition ‖ candidate)` pairs with a sigmoid
/// score per patch.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T> {
    spec: DiscriminatorSpec,
    net: Sequential<T>,
}

impl<T: Real> Discriminator<T> {
    pub fn new(spec: DiscriminatorSpec, init_seed: u64) -> Result<Self> {
        if spec.base_channels == 0 || spec.image_channels == 0 {
            return Err(invalid("channel counts must be positive"));
        }
        if spec.conditioning == Conditioning::ClassConditioned && spec.k_classes == 0 {
            return Err(invalid("class-conditioned discriminator needs at least one class"));
        }
        let mut rng = seed::rng(init_seed);
        let rng = &mut rng;
        let k = spec.conditioning.classes(spec.k_classes);
        let mut layers = Vec::new();
        let mut in_ch = 2 * spec.image_channels;
        let stages = spec.stages();
        let last = stages.len() - 1;
        for (i, (stride, out_ch)) in stages.into_iter().enumerate() {
            layers.push(Layer::Conv(Conv2d::new(in_ch, out_ch, 4, stride, 1, rng)).conditioned(k, rng)?);
            if i == last {
                layers.push(Layer::Sigmoid);
            } else {
                if i > 0 {
                    layers.push(Layer::BatchNorm(BatchNorm2d::new(out_ch, rng)));
                }
                layers.push(Layer::LeakyRelu(0.2));
            }
            in_ch = out_ch;
        }
        Ok(Self { spec, net: Sequential::new(layers) })
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    pub fn forward(
        &self,
        condition: &Tensor4<T>,
        candidate: &Tensor4<T>,
        pass: &mut Pass,
    ) -> Result<(Tensor4<T>, Vec<Saved<T>>)> {
        if condition.shape() != candidate.shape() {
            return Err(invalid(format!(
                "condition {:?} and candidate {:?} differ in shape",
                condition.shape(),
                candidate.shape()
            )));
        }
        if condition.c() != self.spec.image_channels {
            return Err(invalid(format!(
                "discriminator expects {}-channel images, got {}",
                self.spec.image_channels,
                condition.c()
            )));
        }
        if let Some(l) = pass.labels.iter().find(|l| l.classes() != self.spec.k_classes) {
            return Err(invalid(format!("label has {} classes, expected {}", l.classes(), self.spec.k_classes)));
        }
        self.net.forward(&Tensor4::concat_channels(condition, candidate)?, pass)
    }

    /// Returns gradients w.r.t. condition and candidate, plus parameter grads.
    pub fn backward(&self, saved: &[Saved<T>], grad_out: &Tensor4<T>) -> Result<(Tensor4<T>, Tensor4<T>, Grads<T>)> {
        let (dx, grads) = self.net.backward(saved, grad_out)?;
        let (dcond, dcand) = dx.split_channels(self.spec.image_channels);
        Ok((dcond, dcand, grads))
    }
}

impl<T: Real> Network<T> for Discriminator<T> {
    fn params(&self) -> Vec<&Param<T>> {
        self.net.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.net.params_mut()
    }

    fn param_names(&self) -> Vec<String> {
        self.net.param_names().into_iter().map(|n| format!("net.{n}")).collect()
    }
}
