//! Central finite-difference verification of analytic gradients.
//!
//! The scalar checked is `L = Σ r_i · y_i` with a fixed random projection
//! `r`, so layers whose plain sum is constant (batch norm) still get a
//! non-trivial check.

use rand::Rng as _;

use crate::error::{invalid, Result};

use super::{Layer, Mode, OneHotLabel, Pass, Sequential, Tensor4};

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Checks one layer. Dropout masks are replayed by reseeding the forward
/// pass with `seed` on every evaluation.
pub fn grad_check(
    layer: &Layer<f64>,
    input: &Tensor4<f64>,
    eps: f64,
    mode: Mode,
    labels: &[OneHotLabel],
    seed: u64,
) -> Result<f64> {
    grad_check_sequential(&Sequential::new(vec![layer.clone()]), input, eps, mode, labels, seed)
}

/// Returns the maximum relative error over every input element and every
/// parameter.
pub fn grad_check_sequential(
    net: &Sequential<f64>,
    input: &Tensor4<f64>,
    eps: f64,
    mode: Mode,
    labels: &[OneHotLabel],
    seed: u64,
) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(invalid(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    let pass = || Pass::new(mode, seed).with_labels(labels.to_vec());
    let (out, saved) = net.forward(input, &mut pass())?;
    let mut r = crate::seed::derived_rng(seed, "gradcheck", 0);
    let proj = Tensor4::from_fn(out.shape(), |_, _, _, _| r.random_range(-1.0..1.0));
    let loss = |net: &Sequential<f64>, x: &Tensor4<f64>| -> Result<f64> {
        let (y, _) = net.forward(x, &mut pass())?;
        Ok(y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum())
    };
    let (dx, grads) = net.backward(&saved, &proj)?;

    let mut worst: f64 = 0.0;
    let mut x = input.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + eps;
        let lp = loss(net, &x)?;
        x.data_mut()[i] = orig - eps;
        let lm = loss(net, &x)?;
        x.data_mut()[i] = orig;
        worst = worst.max(rel_err(dx.data()[i], (lp - lm) / (2.0 * eps)));
    }

    let mut probe = net.clone();
    let n_params = net.params().len();
    for p in 0..n_params {
        for i in 0..net.params()[p].len() {
            let orig = net.params()[p].data[i];
            probe.params_mut()[p].data[i] = orig + eps;
            let lp = loss(&probe, input)?;
            probe.params_mut()[p].data[i] = orig - eps;
            let lm = loss(&probe, input)?;
            probe.params_mut()[p].data[i] = orig;
            worst = worst.max(rel_err(grads[p][i], (lp - lm) / (2.0 * eps)));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{BatchNorm2d, Conv2d, ConvTranspose2d, Dropout, Linear};
    use crate::seed;

    const TOL: f64 = 1e-4;
    const EPS: f64 = 1e-5;

    fn input(shape: (usize, usize, usize, usize), seed: u64) -> Tensor4<f64> {
        let mut r = seed::rng(seed);
        // keep values away from the kinks of (leaky) ReLU
        Tensor4::from_fn(shape, |_, _, _, _| {
            let v: f64 = r.random_range(0.05..1.0);
            if r.random::<bool>() { v } else { -v }
        })
    }

    fn labels() -> Vec<OneHotLabel> {
        vec![OneHotLabel::new(1, 3).unwrap(), OneHotLabel::new(2, 3).unwrap()]
    }

    fn check(layer: Layer<f64>, shape: (usize, usize, usize, usize), mode: Mode) {
        for s in 0..2 {
            let err = grad_check(&layer, &input(shape, s), EPS, mode, &labels(), s).unwrap();
            assert!(err < TOL, "{:?}: rel error {err}", layer.kind());
        }
    }

    #[test]
    fn conv() {
        let mut r = seed::rng(0);
        check(Layer::Conv(Conv2d::down(3, 4, &mut r)), (2, 3, 8, 8), Mode::Train);
        check(Layer::Conv(Conv2d::new(2, 3, 4, 1, 1, &mut r)), (1, 2, 6, 5), Mode::Train);
    }

    #[test]
    fn deconv() {
        let mut r = seed::rng(1);
        check(Layer::Deconv(ConvTranspose2d::up(3, 2, &mut r)), (2, 3, 4, 4), Mode::Train);
    }

    #[test]
    fn batch_norm() {
        let mut r = seed::rng(2);
        check(Layer::BatchNorm(BatchNorm2d::new(3, &mut r)), (2, 3, 4, 4), Mode::Train);
    }

    #[test]
    fn activations() {
        check(Layer::LeakyRelu(0.2), (2, 2, 3, 3), Mode::Train);
        check(Layer::Relu, (2, 2, 3, 3), Mode::Train);
        check(Layer::Tanh, (2, 2, 3, 3), Mode::Train);
        check(Layer::Sigmoid, (2, 2, 3, 3), Mode::Train);
        check(Layer::GlobalAvgPool, (2, 2, 3, 3), Mode::Train);
    }

    #[test]
    fn dropout_both_modes() {
        check(Layer::Dropout(Dropout { p: 0.5 }), (2, 2, 4, 4), Mode::Train);
        check(Layer::Dropout(Dropout { p: 0.5 }), (2, 2, 4, 4), Mode::Eval);
    }

    #[test]
    fn fully_connected() {
        let mut r = seed::rng(3);
        check(Layer::FullyConnected(Linear::new(12, 5, &mut r)), (2, 3, 2, 2), Mode::Train);
    }

    #[test]
    fn attention_wrapped_conv_and_deconv() {
        let mut r = seed::rng(4);
        let conv = Layer::Conv(Conv2d::down(3, 4, &mut r)).conditioned(Some(3), &mut r).unwrap();
        check(conv, (2, 3, 8, 8), Mode::Train);
        let de = Layer::Deconv(ConvTranspose2d::up(4, 2, &mut r)).conditioned(Some(3), &mut r).unwrap();
        check(de, (2, 4, 4, 4), Mode::Train);
    }

    #[test]
    fn stacked_block() {
        let mut r = seed::rng(5);
        let net = Sequential::new(vec![
            Layer::LeakyRelu(0.2),
            Layer::Conv(Conv2d::down(2, 4, &mut r)).conditioned(Some(3), &mut r).unwrap(),
            Layer::BatchNorm(BatchNorm2d::new(4, &mut r)),
            Layer::Relu,
            Layer::Deconv(ConvTranspose2d::up(4, 2, &mut r)),
            Layer::Tanh,
        ]);
        let err = grad_check_sequential(&net, &input((2, 2, 8, 8), 9), EPS, Mode::Train, &labels(), 9).unwrap();
        assert!(err < TOL, "rel error {err}");
    }

    #[test]
    fn eps_range_is_enforced() {
        assert!(grad_check(&Layer::Relu, &input((1, 1, 2, 2), 0), 1e-2, Mode::Train, &[], 0).is_err());
    }
}
