use crate::error::{invalid, Result};
use crate::seed::Rng;

use super::{Grads, Param, Real, Tensor4, INIT_STD};

pub const BN_EPS: f64 = 1e-5;

/// Batch normalisation over `(N, H, W)` per channel, always using the
/// statistics of the current batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm2d<T> {
    pub channels: usize,
    pub gamma: Param<T>,
    pub beta: Param<T>,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(channels: usize, rng: &mut Rng) -> Self {
        Self {
            channels,
            gamma: Param::normal(&[channels], 1.0, INIT_STD, rng),
            beta: Param::zeros(&[channels]),
        }
    }

    /// Returns the output, the normalised input and the per-channel
    /// `1 / sqrt(var + eps)`.
    pub fn forward(&self, x: &Tensor4<T>) -> Result<(Tensor4<T>, Tensor4<T>, Vec<T>)> {
        let (n, c, h, w) = x.shape();
        if c != self.channels {
            return Err(invalid(format!("batch norm expects {} channels, got {c}", self.channels)));
        }
        let plane = h * w;
        let count = (n * plane) as f64;
        let mut xhat = x.clone();
        let mut out = x.clone();
        let mut inv_stds = Vec::with_capacity(c);
        for ci in 0..c {
            let mut sum = 0.0;
            for ni in 0..n {
                sum += x.item(ni)[ci * plane..(ci + 1) * plane].iter().map(|v| v.as_f64()).sum::<f64>();
            }
            let mean = sum / count;
            let mut sq = 0.0;
            for ni in 0..n {
                sq += x.item(ni)[ci * plane..(ci + 1) * plane]
                    .iter()
                    .map(|v| (v.as_f64() - mean).powi(2))
                    .sum::<f64>();
            }
            let inv_std = 1.0 / (sq / count + BN_EPS).sqrt();
            let (g, b) = (self.gamma.data[ci], self.beta.data[ci]);
            let (mean_t, inv_t) = (T::lit(mean), T::lit(inv_std));
            for ni in 0..n {
                let xs = &mut xhat.item_mut(ni)[ci * plane..(ci + 1) * plane];
                for v in xs.iter_mut() {
                    *v = (*v - mean_t) * inv_t;
                }
                let src: Vec<T> = xs.to_vec();
                let os = &mut out.item_mut(ni)[ci * plane..(ci + 1) * plane];
                for (o, xh) in os.iter_mut().zip(src) {
                    *o = g * xh + b;
                }
            }
            inv_stds.push(inv_t);
        }
        Ok((out, xhat, inv_stds))
    }

    pub fn backward(&self, xhat: &Tensor4<T>, inv_std: &[T], grad_out: &Tensor4<T>) -> Result<(Tensor4<T>, Grads<T>)> {
        if xhat.shape() != grad_out.shape() {
            return Err(invalid("batch norm grad_out shape mismatch"));
        }
        let (n, c, h, w) = xhat.shape();
        let plane = h * w;
        let m = (n * plane) as f64;
        let mut dx = Tensor4::zeros(n, c, h, w);
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for ci in 0..c {
            let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
            for ni in 0..n {
                let g = &grad_out.item(ni)[ci * plane..(ci + 1) * plane];
                let xh = &xhat.item(ni)[ci * plane..(ci + 1) * plane];
                for (dy, x) in g.iter().zip(xh) {
                    sum_dy += dy.as_f64();
                    sum_dy_xhat += dy.as_f64() * x.as_f64();
                }
            }
            dbeta[ci] = T::lit(sum_dy);
            dgamma[ci] = T::lit(sum_dy_xhat);
            let gamma = self.gamma.data[ci].as_f64();
            let scale = gamma * inv_std[ci].as_f64() / m;
            for ni in 0..n {
                let g = &grad_out.item(ni)[ci * plane..(ci + 1) * plane];
                let xh = &xhat.item(ni)[ci * plane..(ci + 1) * plane];
                let d: Vec<T> = g
                    .iter()
                    .zip(xh)
                    .map(|(dy, x)| T::lit(scale * (m * dy.as_f64() - sum_dy - x.as_f64() * sum_dy_xhat)))
                    .collect();
                dx.item_mut(ni)[ci * plane..(ci + 1) * plane].copy_from_slice(&d);
            }
        }
        Ok((dx, vec![dgamma, dbeta]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn normalises_each_channel() {
        let mut r = seed::rng(0);
        let mut bn = BatchNorm2d::<f64>::new(2, &mut r);
        bn.gamma.data = vec![1.0, 2.0];
        bn.beta.data = vec![0.0, 3.0];
        let x = Tensor4::from_fn((2, 2, 2, 3), |n, c, y, xx| (n * 7 + c * 3 + y * 2 + xx) as f64 * 0.3);
        let (out, _, _) = bn.forward(&x).unwrap();
        for c in 0..2 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|n| (0..2).flat_map(move |y| (0..3).map(move |xx| (n, y, xx))))
                .map(|(n, y, xx)| out.at(n, c, y, xx))
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!((mean - bn.beta.data[c]).abs() < 1e-9);
            assert!((var.sqrt() - bn.gamma.data[c]).abs() < 1e-3);
        }
    }
}
