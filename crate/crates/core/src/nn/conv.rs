//! 2-D convolution and transposed convolution via im2col + GEMM.

use crate::error::{invalid, Result};
use crate::seed::Rng;

use super::{Grads, Param, Real, Tensor4, INIT_STD};

/// Output length of a strided convolution along one axis.
pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    (len + 2 * pad).checked_sub(kernel).map(|r| r / stride + 1)
}

/// Output length of a transposed convolution along one axis.
pub fn deconv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    ((len.checked_sub(1)?) * stride + kernel).checked_sub(2 * pad)
}

/// Geometry of one im2col unfolding: an image of `c x h x w` read by a
/// `k x k` window at stride `s` / padding `p`, producing an `oh x ow` grid.
#[derive(Clone, Copy, Debug)]
struct Unfold {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    oh: usize,
    ow: usize,
}

impl Unfold {
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn im2col<T: Real>(&self, img: &[T], cols: &mut [T]) {
        let Unfold { c, h, w, k, s, p, oh, ow } = *self;
        let n_cols = oh * ow;
        for ci in 0..c {
            let plane = &img[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let dst = &mut cols[row * n_cols..(row + 1) * n_cols];
                    for oy in 0..oh {
                        let iy = (oy * s + ki) as isize - p as isize;
                        let line = &mut dst[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in line.iter_mut().enumerate() {
                            let ix = (ox * s + kj) as isize - p as isize;
                            *d = if ix < 0 || ix >= w as isize { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds columns back into `img` (which is not cleared).
    fn col2im<T: Real>(&self, cols: &[T], img: &mut [T]) {
        let Unfold { c, h, w, k, s, p, oh, ow } = *self;
        let n_cols = oh * ow;
        for ci in 0..c {
            let plane = &mut img[ci * h * w..(ci + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (ci * k + ki) * k + kj;
                    let src = &cols[row * n_cols..(row + 1) * n_cols];
                    for oy in 0..oh {
                        let iy = (oy * s + ki) as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, v) in src[oy * ow..(oy + 1) * ow].iter().enumerate() {
                            let ix = (ox * s + kj) as isize - p as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += *v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn add_bias<T: Real>(out: &mut [T], bias: &[T], plane: usize) {
    for (c, b) in bias.iter().enumerate() {
        for v in &mut out[c * plane..(c + 1) * plane] {
            *v += *b;
        }
    }
}

fn accumulate_bias_grad<T: Real>(grad: &[T], db: &mut [T], plane: usize) {
    for (c, d) in db.iter_mut().enumerate() {
        *d += grad[c * plane..(c + 1) * plane].iter().copied().sum::<T>();
    }
}

/// Strided 2-D convolution. Weight layout `[out, in, k, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Conv2d<T> {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize, rng: &mut Rng) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            weight: Param::normal(&[out_ch, in_ch, kernel, kernel], 0.0, INIT_STD, rng),
            bias: Param::zeros(&[out_ch]),
        }
    }

    /// The default down-sampling block: kernel 4, stride 2, padding 1.
    pub fn down(in_ch: usize, out_ch: usize, rng: &mut Rng) -> Self {
        Self::new(in_ch, out_ch, 4, 2, 1, rng)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((
            conv_out_len(h, self.kernel, self.stride, self.pad)?,
            conv_out_len(w, self.kernel, self.stride, self.pad)?,
        ))
    }

    fn unfold(&self, x: &Tensor4<T>) -> Result<Unfold> {
        let (_, c, h, w) = x.shape();
        if c != self.in_ch {
            return Err(invalid(format!("conv expects {} input channels, got {c}", self.in_ch)));
        }
        let (oh, ow) = self
            .out_hw(h, w)
            .ok_or_else(|| invalid(format!("input {h}x{w} smaller than conv kernel")))?;
        Ok(Unfold { c, h, w, k: self.kernel, s: self.stride, p: self.pad, oh, ow })
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let u = self.unfold(x)?;
        let mut out = Tensor4::zeros(x.n(), self.out_ch, u.oh, u.ow);
        let mut cols = vec![T::zero(); u.rows() * u.cols()];
        for n in 0..x.n() {
            u.im2col(x.item(n), &mut cols);
            let dst = out.item_mut(n);
            T::gemm(self.out_ch, u.rows(), u.cols(), &self.weight.data, false, &cols, false, T::zero(), dst);
            add_bias(dst, &self.bias.data, u.cols());
        }
        Ok(out)
    }

    pub fn backward(&self, x: &Tensor4<T>, grad_out: &Tensor4<T>) -> Result<(Tensor4<T>, Grads<T>)> {
        let u = self.unfold(x)?;
        if grad_out.shape() != (x.n(), self.out_ch, u.oh, u.ow) {
            return Err(invalid("conv grad_out shape mismatch"));
        }
        let mut dx = Tensor4::zeros(x.n(), u.c, u.h, u.w);
        let mut dw = vec![T::zero(); self.weight.len()];
        let mut db = vec![T::zero(); self.out_ch];
        let mut cols = vec![T::zero(); u.rows() * u.cols()];
        let mut dcols = vec![T::zero(); u.rows() * u.cols()];
        for n in 0..x.n() {
            u.im2col(x.item(n), &mut cols);
            let g = grad_out.item(n);
            T::gemm(self.out_ch, u.cols(), u.rows(), g, false, &cols, true, T::one(), &mut dw);
            accumulate_bias_grad(g, &mut db, u.cols());
            T::gemm(u.rows(), self.out_ch, u.cols(), &self.weight.data, true, g, false, T::zero(), &mut dcols);
            u.col2im(&dcols, dx.item_mut(n));
        }
        Ok((dx, vec![dw, db]))
    }
}

/// Transposed convolution. Weight layout `[in, out, k, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose2d<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> ConvTranspose2d<T> {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize, rng: &mut Rng) -> Self {
        Self {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            weight: Param::normal(&[in_ch, out_ch, kernel, kernel], 0.0, INIT_STD, rng),
            bias: Param::zeros(&[out_ch]),
        }
    }

    /// The default up-sampling block: kernel 4, stride 2, padding 1.
    pub fn up(in_ch: usize, out_ch: usize, rng: &mut Rng) -> Self {
        Self::new(in_ch, out_ch, 4, 2, 1, rng)
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((
            deconv_out_len(h, self.kernel, self.stride, self.pad)?,
            deconv_out_len(w, self.kernel, self.stride, self.pad)?,
        ))
    }

    /// The unfolding of the *output* image onto the input grid.
    fn unfold(&self, x: &Tensor4<T>) -> Result<Unfold> {
        let (_, c, h, w) = x.shape();
        if c != self.in_ch {
            return Err(invalid(format!("deconv expects {} input channels, got {c}", self.in_ch)));
        }
        let (oh, ow) = self
            .out_hw(h, w)
            .filter(|(a, b)| *a > 0 && *b > 0)
            .ok_or_else(|| invalid(format!("deconv input {h}x{w} too small")))?;
        Ok(Unfold { c: self.out_ch, h: oh, w: ow, k: self.kernel, s: self.stride, p: self.pad, oh: h, ow: w })
    }

    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let u = self.unfold(x)?;
        let mut out = Tensor4::zeros(x.n(), self.out_ch, u.h, u.w);
        let mut cols = vec![T::zero(); u.rows() * u.cols()];
        for n in 0..x.n() {
            T::gemm(u.rows(), self.in_ch, u.cols(), &self.weight.data, true, x.item(n), false, T::zero(), &mut cols);
            let dst = out.item_mut(n);
            u.col2im(&cols, dst);
            add_bias(dst, &self.bias.data, u.h * u.w);
        }
        Ok(out)
    }

    pub fn backward(&self, x: &Tensor4<T>, grad_out: &Tensor4<T>) -> Result<(Tensor4<T>, Grads<T>)> {
        let u = self.unfold(x)?;
        if grad_out.shape() != (x.n(), self.out_ch, u.h, u.w) {
            return Err(invalid("deconv grad_out shape mismatch"));
        }
        let mut dx = Tensor4::zeros(x.n(), self.in_ch, x.h(), x.w());
        let mut dw = vec![T::zero(); self.weight.len()];
        let mut db = vec![T::zero(); self.out_ch];
        let mut dcols = vec![T::zero(); u.rows() * u.cols()];
        for n in 0..x.n() {
            let g = grad_out.item(n);
            u.im2col(g, &mut dcols);
            accumulate_bias_grad(g, &mut db, u.h * u.w);
            T::gemm(self.in_ch, u.rows(), u.cols(), &self.weight.data, false, &dcols, false, T::zero(), dx.item_mut(n));
            T::gemm(self.in_ch, u.cols(), u.rows(), x.item(n), false, &dcols, true, T::one(), &mut dw);
        }
        Ok((dx, vec![dw, db]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    /// Direct scalar-loop convolution.
    fn conv_oracle(x: &Tensor4<f64>, conv: &Conv2d<f64>) -> Tensor4<f64> {
        let (n, _, h, w) = x.shape();
        let (oh, ow) = conv.out_hw(h, w).unwrap();
        let k = conv.kernel;
        Tensor4::from_fn((n, conv.out_ch, oh, ow), |ni, co, oy, ox| {
            let mut acc = conv.bias.data[co];
            for ci in 0..conv.in_ch {
                for ki in 0..k {
                    for kj in 0..k {
                        let iy = (oy * conv.stride + ki) as isize - conv.pad as isize;
                        let ix = (ox * conv.stride + kj) as isize - conv.pad as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            acc += x.at(ni, ci, iy as usize, ix as usize)
                                * conv.weight.data[((co * conv.in_ch + ci) * k + ki) * k + kj];
                        }
                    }
                }
            }
            acc
        })
    }

    /// Transposed convolution as scatter of each input pixel.
    fn deconv_oracle(x: &Tensor4<f64>, de: &ConvTranspose2d<f64>) -> Tensor4<f64> {
        let (n, _, h, w) = x.shape();
        let (oh, ow) = de.out_hw(h, w).unwrap();
        let k = de.kernel;
        let mut out = Tensor4::zeros(n, de.out_ch, oh, ow);
        for ni in 0..n {
            for co in 0..de.out_ch {
                for y in 0..oh {
                    for xx in 0..ow {
                        out.set(ni, co, y, xx, de.bias.data[co]);
                    }
                }
            }
            for ci in 0..de.in_ch {
                for iy in 0..h {
                    for ix in 0..w {
                        for co in 0..de.out_ch {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let oy = (iy * de.stride + ki) as isize - de.pad as isize;
                                    let ox = (ix * de.stride + kj) as isize - de.pad as isize;
                                    if oy >= 0 && ox >= 0 && (oy as usize) < oh && (ox as usize) < ow {
                                        let v = out.at(ni, co, oy as usize, ox as usize)
                                            + x.at(ni, ci, iy, ix)
                                                * de.weight.data[((ci * de.out_ch + co) * k + ki) * k + kj];
                                        out.set(ni, co, oy as usize, ox as usize, v);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn random(shape: (usize, usize, usize, usize), seed: u64) -> Tensor4<f64> {
        use rand::Rng as _;
        let mut r = seed::rng(seed);
        Tensor4::from_fn(shape, |_, _, _, _| r.random_range(-1.0..1.0))
    }

    #[test]
    fn conv_4x4_kernel_matches_scalar_loop() {
        let mut r = seed::rng(1);
        let mut conv = Conv2d::<f64>::new(1, 1, 4, 2, 1, &mut r);
        conv.weight.data = (0..16).map(|i| i as f64 * 0.1 - 0.7).collect();
        conv.bias.data = vec![0.25];
        let x = Tensor4::from_fn((1, 1, 4, 4), |_, _, y, x| (y * 4 + x) as f64);
        let got = conv.forward(&x).unwrap();
        assert_eq!(got.shape(), (1, 1, 2, 2));
        assert!(got.max_abs_diff(&conv_oracle(&x, &conv)) < 1e-6);
    }

    #[test]
    fn conv_random_matches_oracle_for_several_strides() {
        let mut r = seed::rng(2);
        for (stride, pad) in [(2, 1), (1, 1), (1, 0)] {
            let conv = Conv2d::<f64>::new(3, 5, 4, stride, pad, &mut r);
            let x = random((2, 3, 9, 7), 3);
            assert!(conv.forward(&x).unwrap().max_abs_diff(&conv_oracle(&x, &conv)) < 1e-12);
        }
    }

    #[test]
    fn deconv_matches_scatter_oracle() {
        let mut r = seed::rng(4);
        let de = ConvTranspose2d::<f64>::up(3, 2, &mut r);
        let x = random((2, 3, 3, 5), 5);
        let got = de.forward(&x).unwrap();
        assert_eq!(got.shape(), (2, 2, 6, 10));
        assert!(got.max_abs_diff(&deconv_oracle(&x, &de)) < 1e-12);
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut r = seed::rng(0);
        let mut conv = Conv2d::<f32>::down(2, 3, &mut r);
        conv.weight.data.fill(0.0);
        let x = Tensor4::filled(1, 2, 8, 8, 1.0);
        assert!(conv.forward(&x).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn down_then_up_restores_spatial_size() {
        let mut r = seed::rng(0);
        let conv = Conv2d::<f32>::down(2, 4, &mut r);
        let de = ConvTranspose2d::<f32>::up(4, 2, &mut r);
        let x = Tensor4::filled(1, 2, 16, 32, 0.5);
        let y = conv.forward(&x).unwrap();
        assert_eq!(y.shape(), (1, 4, 8, 16));
        assert_eq!(de.forward(&y).unwrap().shape(), x.shape());
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut r = seed::rng(0);
        let conv = Conv2d::<f32>::down(3, 4, &mut r);
        assert!(conv.forward(&Tensor4::zeros(1, 2, 8, 8)).is_err());
        assert!(conv.forward(&Tensor4::zeros(1, 3, 1, 1)).is_err());
    }
}
