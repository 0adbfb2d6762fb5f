use rand::Rng as _;

use crate::error::{invalid, Result};
use crate::seed::Rng;

use super::attention::ChannelAttention;
use super::{BatchNorm2d, Conv2d, ConvTranspose2d, Grads, Mode, Param, Pass, Real, Tensor4, INIT_STD};

/// Tag for each layer variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv,
    Deconv,
    BatchNorm,
    LeakyRelu,
    Relu,
    Tanh,
    Sigmoid,
    Dropout,
    FullyConnected,
    GlobalAvgPool,
    ChannelAttention,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dropout {
    pub p: f64,
}

/// Fully-connected layer over the flattened `C x H x W` of each item;
/// outputs `N x out x 1 x 1`. Weight layout `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Linear<T> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut Rng) -> Self {
        Self {
            in_features,
            out_features,
            weight: Param::normal(&[out_features, in_features], 0.0, INIT_STD, rng),
            bias: Param::zeros(&[out_features]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Conv(Conv2d<T>),
    Deconv(ConvTranspose2d<T>),
    BatchNorm(BatchNorm2d<T>),
    LeakyRelu(f64),
    Relu,
    Tanh,
    Sigmoid,
    Dropout(Dropout),
    FullyConnected(Linear<T>),
    GlobalAvgPool,
    ChannelAttention(Box<ChannelAttention<T>>),
}

/// What a layer keeps from `forward` for its `backward`.
#[derive(Clone, Debug)]
pub enum Saved<T> {
    Input(Tensor4<T>),
    Output(Tensor4<T>),
    Norm { xhat: Tensor4<T>, inv_std: Vec<T> },
    Mask(Option<Vec<T>>),
    Pool { h: usize, w: usize },
    Attention { inner: Box<Saved<T>>, pre: Tensor4<T>, gates: Vec<T>, classes: Vec<usize> },
}

fn wrong_context() -> crate::Error {
    invalid("saved context does not belong to this layer")
}

impl<T: Real> Layer<T> {
    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Conv(_) => LayerKind::Conv,
            Layer::Deconv(_) => LayerKind::Deconv,
            Layer::BatchNorm(_) => LayerKind::BatchNorm,
            Layer::LeakyRelu(_) => LayerKind::LeakyRelu,
            Layer::Relu => LayerKind::Relu,
            Layer::Tanh => LayerKind::Tanh,
            Layer::Sigmoid => LayerKind::Sigmoid,
            Layer::Dropout(_) => LayerKind::Dropout,
            Layer::FullyConnected(_) => LayerKind::FullyConnected,
            Layer::GlobalAvgPool => LayerKind::GlobalAvgPool,
            Layer::ChannelAttention(_) => LayerKind::ChannelAttention,
        }
    }

    /// Wraps a conv/deconv in class attention when `k_classes` is given.
    pub fn conditioned(self, k_classes: Option<usize>, rng: &mut Rng) -> Result<Self> {
        match k_classes {
            Some(k) => Ok(Layer::ChannelAttention(Box::new(ChannelAttention::new(self, k, rng)?))),
            None => Ok(self),
        }
    }

    pub fn out_channels(&self) -> Option<usize> {
        match self {
            Layer::Conv(c) => Some(c.out_ch),
            Layer::Deconv(d) => Some(d.out_ch),
            Layer::ChannelAttention(a) => a.inner.out_channels(),
            _ => None,
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        match self {
            Layer::Conv(c) => vec![&c.weight, &c.bias],
            Layer::Deconv(d) => vec![&d.weight, &d.bias],
            Layer::BatchNorm(b) => vec![&b.gamma, &b.beta],
            Layer::FullyConnected(l) => vec![&l.weight, &l.bias],
            Layer::ChannelAttention(a) => {
                let mut p = a.inner.params();
                p.extend([&a.attn.weight, &a.attn.bias]);
                p
            }
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        match self {
            Layer::Conv(c) => vec![&mut c.weight, &mut c.bias],
            Layer::Deconv(d) => vec![&mut d.weight, &mut d.bias],
            Layer::BatchNorm(b) => vec![&mut b.gamma, &mut b.beta],
            Layer::FullyConnected(l) => vec![&mut l.weight, &mut l.bias],
            Layer::ChannelAttention(a) => {
                let a = &mut **a;
                let mut p = a.inner.params_mut();
                p.extend([&mut a.attn.weight, &mut a.attn.bias]);
                p
            }
            _ => Vec::new(),
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        match self {
            Layer::Conv(_) | Layer::Deconv(_) | Layer::FullyConnected(_) => {
                vec!["weight".into(), "bias".into()]
            }
            Layer::BatchNorm(_) => vec!["gamma".into(), "beta".into()],
            Layer::ChannelAttention(a) => {
                let mut names: Vec<String> = a.inner.param_names().into_iter().map(|n| format!("inner.{n}")).collect();
                names.extend(["attn.weight".into(), "attn.bias".into()]);
                names
            }
            _ => Vec::new(),
        }
    }

    pub fn forward(&self, x: &Tensor4<T>, pass: &mut Pass) -> Result<(Tensor4<T>, Saved<T>)> {
        match self {
            Layer::Conv(c) => Ok((c.forward(x)?, Saved::Input(x.clone()))),
            Layer::Deconv(d) => Ok((d.forward(x)?, Saved::Input(x.clone()))),
            Layer::BatchNorm(b) => {
                let (out, xhat, inv_std) = b.forward(x)?;
                Ok((out, Saved::Norm { xhat, inv_std }))
            }
            Layer::LeakyRelu(slope) => {
                let s = T::lit(*slope);
                Ok((x.map(|v| if v > T::zero() { v } else { v * s }), Saved::Input(x.clone())))
            }
            Layer::Relu => Ok((x.map(|v| v.max(T::zero())), Saved::Input(x.clone()))),
            Layer::Tanh => {
                let y = x.map(|v| v.tanh());
                Ok((y.clone(), Saved::Output(y)))
            }
            Layer::Sigmoid => {
                let y = x.map(|v| T::one() / (T::one() + (-v).exp()));
                Ok((y.clone(), Saved::Output(y)))
            }
            Layer::Dropout(Dropout { p }) => {
                if pass.mode == Mode::Eval || *p == 0.0 {
                    return Ok((x.clone(), Saved::Mask(None)));
                }
                let keep = T::lit(1.0 / (1.0 - p));
                let mask: Vec<T> = (0..x.len())
                    .map(|_| if pass.rng.random::<f64>() < *p { T::zero() } else { keep })
                    .collect();
                let mut y = x.clone();
                for (v, m) in y.data_mut().iter_mut().zip(&mask) {
                    *v *= *m;
                }
                Ok((y, Saved::Mask(Some(mask))))
            }
            Layer::FullyConnected(l) => {
                let per = x.c() * x.h() * x.w();
                if per != l.in_features {
                    return Err(invalid(format!(
                        "fully-connected layer expects {} features, got {per}",
                        l.in_features
                    )));
                }
                let n = x.n();
                let mut out = Tensor4::zeros(n, l.out_features, 1, 1);
                T::gemm(n, per, l.out_features, x.data(), false, &l.weight.data, true, T::zero(), out.data_mut());
                for i in 0..n {
                    for (o, b) in out.item_mut(i).iter_mut().zip(&l.bias.data) {
                        *o += *b;
                    }
                }
                Ok((out, Saved::Input(x.clone())))
            }
            Layer::GlobalAvgPool => {
                let (n, c, h, w) = x.shape();
                let plane = h * w;
                let inv = T::lit(1.0 / plane as f64);
                let mut out = Tensor4::zeros(n, c, 1, 1);
                for i in 0..n {
                    let src = x.item(i);
                    for ci in 0..c {
                        out.item_mut(i)[ci] = src[ci * plane..(ci + 1) * plane].iter().copied().sum::<T>() * inv;
                    }
                }
                Ok((out, Saved::Pool { h, w }))
            }
            Layer::ChannelAttention(a) => {
                let (pre, inner) = a.inner.forward(x, pass)?;
                let (gates, classes) = a.gates(&pass.labels, x.n())?;
                let out = ChannelAttention::gate_forward(&pre, &gates);
                Ok((out, Saved::Attention { inner: Box::new(inner), pre, gates, classes }))
            }
        }
    }

    pub fn backward(&self, saved: &Saved<T>, grad_out: &Tensor4<T>) -> Result<(Tensor4<T>, Grads<T>)> {
        let elementwise = |t: &Tensor4<T>, f: &dyn Fn(T, T) -> T| -> Result<Tensor4<T>> {
            if t.shape() != grad_out.shape() {
                return Err(invalid("grad_out shape mismatch"));
            }
            let mut g = grad_out.clone();
            for (d, v) in g.data_mut().iter_mut().zip(t.data()) {
                *d = f(*d, *v);
            }
            Ok(g)
        };
        match (self, saved) {
            (Layer::Conv(c), Saved::Input(x)) => c.backward(x, grad_out),
            (Layer::Deconv(d), Saved::Input(x)) => d.backward(x, grad_out),
            (Layer::BatchNorm(b), Saved::Norm { xhat, inv_std }) => b.backward(xhat, inv_std, grad_out),
            (Layer::LeakyRelu(slope), Saved::Input(x)) => {
                let s = T::lit(*slope);
                Ok((elementwise(x, &|d, v| if v > T::zero() { d } else { d * s })?, Vec::new()))
            }
            (Layer::Relu, Saved::Input(x)) => {
                Ok((elementwise(x, &|d, v| if v > T::zero() { d } else { T::zero() })?, Vec::new()))
            }
            (Layer::Tanh, Saved::Output(y)) => Ok((elementwise(y, &|d, v| d * (T::one() - v * v))?, Vec::new())),
            (Layer::Sigmoid, Saved::Output(y)) => {
                Ok((elementwise(y, &|d, v| d * v * (T::one() - v))?, Vec::new()))
            }
            (Layer::Dropout(_), Saved::Mask(mask)) => match mask {
                None => Ok((grad_out.clone(), Vec::new())),
                Some(m) => {
                    if m.len() != grad_out.len() {
                        return Err(invalid("grad_out shape mismatch"));
                    }
                    let mut g = grad_out.clone();
                    for (d, k) in g.data_mut().iter_mut().zip(m) {
                        *d *= *k;
                    }
                    Ok((g, Vec::new()))
                }
            },
            (Layer::FullyConnected(l), Saved::Input(x)) => {
                let n = x.n();
                if grad_out.shape() != (n, l.out_features, 1, 1) {
                    return Err(invalid("fully-connected grad_out shape mismatch"));
                }
                let per = l.in_features;
                let mut dx = Tensor4::zeros(n, x.c(), x.h(), x.w());
                let mut dw = vec![T::zero(); l.weight.len()];
                T::gemm(l.out_features, n, per, grad_out.data(), true, x.data(), false, T::zero(), &mut dw);
                T::gemm(n, l.out_features, per, grad_out.data(), false, &l.weight.data, false, T::zero(), dx.data_mut());
                let mut db = vec![T::zero(); l.out_features];
                for i in 0..n {
                    for (b, g) in db.iter_mut().zip(grad_out.item(i)) {
                        *b += *g;
                    }
                }
                Ok((dx, vec![dw, db]))
            }
            (Layer::GlobalAvgPool, Saved::Pool { h, w }) => {
                let (n, c, _, _) = grad_out.shape();
                let inv = T::lit(1.0 / (h * w) as f64);
                Ok((Tensor4::from_fn((n, c, *h, *w), |i, ci, _, _| grad_out.at(i, ci, 0, 0) * inv), Vec::new()))
            }
            (Layer::ChannelAttention(a), saved) => {
                let (inner_saved, pre, gates, classes) =
                    ChannelAttention::saved_parts(saved).ok_or_else(wrong_context)?;
                if pre.shape() != grad_out.shape() {
                    return Err(invalid("grad_out shape mismatch"));
                }
                let (dpre, attn_grads) = a.gate_backward(pre, gates, classes, grad_out);
                let (dx, mut grads) = a.inner.backward(inner_saved, &dpre)?;
                grads.extend(attn_grads);
                Ok((dx, grads))
            }
            _ => Err(wrong_context()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pass() -> Pass {
        Pass::new(Mode::Train, 0)
    }

    #[test]
    fn leaky_relu_definition() {
        let x = Tensor4::from_vec((1, 1, 1, 2), vec![-1.0f64, 2.0]).unwrap();
        let (y, _) = Layer::LeakyRelu(0.2).forward(&x, &mut pass()).unwrap();
        assert_eq!(y.data(), &[-0.2, 2.0]);
    }

    #[test]
    fn tanh_backward_at_zero_passes_gradient() {
        let x = Tensor4::<f64>::zeros(1, 1, 2, 2);
        let (_, saved) = Layer::Tanh.forward(&x, &mut pass()).unwrap();
        let g = Tensor4::from_vec((1, 1, 2, 2), vec![0.5, -1.0, 2.0, 3.0]).unwrap();
        let (dx, _) = Layer::Tanh.backward(&saved, &g).unwrap();
        assert_eq!(dx, g);
    }

    #[test]
    fn dropout_eval_is_identity() {
        let layer = Layer::<f64>::Dropout(Dropout { p: 0.5 });
        let x = Tensor4::filled(1, 2, 3, 3, 1.5);
        let mut p = Pass::new(Mode::Eval, 0);
        let (y, saved) = layer.forward(&x, &mut p).unwrap();
        assert_eq!(y, x);
        let g = Tensor4::filled(1, 2, 3, 3, 0.25);
        assert_eq!(layer.backward(&saved, &g).unwrap().0, g);
    }

    #[test]
    fn dropout_train_is_seeded() {
        let layer = Layer::<f32>::Dropout(Dropout { p: 0.5 });
        let x = Tensor4::filled(1, 4, 8, 8, 1.0);
        let a = layer.forward(&x, &mut Pass::new(Mode::Train, 11)).unwrap().0;
        let b = layer.forward(&x, &mut Pass::new(Mode::Train, 11)).unwrap().0;
        let c = layer.forward(&x, &mut Pass::new(Mode::Train, 12)).unwrap().0;
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.data().iter().all(|v| *v == 0.0 || *v == 2.0));
    }

    #[test]
    fn attention_with_unit_gates_equals_plain_layer() {
        let mut r = crate::seed::rng(1);
        let conv = Layer::Conv(Conv2d::<f64>::down(2, 3, &mut r));
        let mut wrapped = conv.clone().conditioned(Some(4), &mut r).unwrap();
        if let Layer::ChannelAttention(a) = &mut wrapped {
            // sigmoid saturates to exactly 1 in f64 for large arguments
            a.attn.bias.data.fill(1000.0);
        }
        let x = Tensor4::from_fn((1, 2, 8, 8), |_, c, y, xx| ((c * 64 + y * 8 + xx) as f64).sin());
        let label = crate::nn::OneHotLabel::new(2, 4).unwrap();
        let mut p = pass().with_labels(vec![label]);
        let plain = conv.forward(&x, &mut p).unwrap().0;
        let gated = wrapped.forward(&x, &mut p).unwrap().0;
        assert_eq!(plain, gated);
    }

    #[test]
    fn attention_requires_label() {
        let mut r = crate::seed::rng(1);
        let wrapped = Layer::Conv(Conv2d::<f64>::down(2, 3, &mut r)).conditioned(Some(4), &mut r).unwrap();
        let x = Tensor4::zeros(1, 2, 8, 8);
        assert!(wrapped.forward(&x, &mut pass()).is_err());
        assert!(Layer::<f64>::Relu.conditioned(Some(2), &mut r).is_err());
    }

    #[test]
    fn mismatched_context_is_rejected() {
        let x = Tensor4::<f64>::zeros(1, 1, 2, 2);
        let (_, saved) = Layer::Tanh.forward(&x, &mut pass()).unwrap();
        assert!(Layer::<f64>::Relu.backward(&saved, &x).is_err());
    }
}
