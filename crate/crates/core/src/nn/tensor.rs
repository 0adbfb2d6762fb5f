use crate::error::{invalid, Result};

use super::Real;

/// Dense `N x C x H x W` array, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T> {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<T>,
}

impl<T: Real> Tensor4<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w, data: vec![T::zero(); n * c * h * w] }
    }

    pub fn filled(n: usize, c: usize, h: usize, w: usize, value: T) -> Self {
        Self { n, c, h, w, data: vec![value; n * c * h * w] }
    }

    pub fn from_vec(shape: (usize, usize, usize, usize), data: Vec<T>) -> Result<Self> {
        let (n, c, h, w) = shape;
        if data.len() != n * c * h * w {
            return Err(invalid(format!(
                "tensor data has {} elements, shape {:?} needs {}",
                data.len(),
                shape,
                n * c * h * w
            )));
        }
        Ok(Self { n, c, h, w, data })
    }

    pub fn from_fn(
        shape: (usize, usize, usize, usize),
        mut f: impl FnMut(usize, usize, usize, usize) -> T,
    ) -> Self {
        let (n, c, h, w) = shape;
        let mut data = Vec::with_capacity(n * c * h * w);
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(ni, ci, y, x));
                    }
                }
            }
        }
        Self { n, c, h, w, data }
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(n, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: T) {
        let i = self.index(n, c, y, x);
        self.data[i] = v;
    }

    /// Contiguous `C x H x W` slab of batch item `n`.
    pub fn item(&self, n: usize) -> &[T] {
        let s = self.c * self.h * self.w;
        &self.data[n * s..(n + 1) * s]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [T] {
        let s = self.c * self.h * self.w;
        &mut self.data[n * s..(n + 1) * s]
    }

    /// Copies batch item `n` into a new single-item tensor.
    pub fn select(&self, n: usize) -> Self {
        Self { n: 1, c: self.c, h: self.h, w: self.w, data: self.item(n).to_vec() }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        let data = self.data.iter().map(|v| f(*v)).collect();
        Self { n: self.n, c: self.c, h: self.h, w: self.w, data }
    }

    pub fn cast<U: Real>(&self) -> Tensor4<U> {
        Tensor4 {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64()).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks single-item tensors along the batch axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first = items.first().ok_or_else(|| invalid("cannot stack zero tensors"))?;
        let (_, c, h, w) = first.shape();
        let mut data = Vec::with_capacity(items.len() * c * h * w);
        let mut n = 0;
        for t in items {
            if (t.c, t.h, t.w) != (c, h, w) {
                return Err(invalid("stacked tensors must share C x H x W"));
            }
            data.extend_from_slice(&t.data);
            n += t.n;
        }
        Ok(Self { n, c, h, w, data })
    }

    /// Channel-wise concatenation `[a ‖ b]`.
    pub fn concat_channels(a: &Self, b: &Self) -> Result<Self> {
        if (a.n, a.h, a.w) != (b.n, b.h, b.w) {
            return Err(invalid(format!(
                "cannot concatenate {:?} and {:?} along channels",
                a.shape(),
                b.shape()
            )));
        }
        let mut out = Self::zeros(a.n, a.c + b.c, a.h, a.w);
        let (sa, sb) = (a.c * a.h * a.w, b.c * b.h * b.w);
        for n in 0..a.n {
            let dst = out.item_mut(n);
            dst[..sa].copy_from_slice(a.item(n));
            dst[sa..sa + sb].copy_from_slice(b.item(n));
        }
        Ok(out)
    }

    /// Inverse of [`Tensor4::concat_channels`]: the first `c_first` channels
    /// and the rest.
    pub fn split_channels(&self, c_first: usize) -> (Self, Self) {
        assert!(c_first <= self.c);
        let mut a = Self::zeros(self.n, c_first, self.h, self.w);
        let mut b = Self::zeros(self.n, self.c - c_first, self.h, self.w);
        let sa = c_first * self.h * self.w;
        for n in 0..self.n {
            let src = self.item(n);
            a.item_mut(n).copy_from_slice(&src[..sa]);
            b.item_mut(n).copy_from_slice(&src[sa..]);
        }
        (a, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concat_then_split_is_identity() {
        let a = Tensor4::<f64>::from_fn((2, 2, 3, 4), |n, c, y, x| (n * 100 + c * 10 + y * 4 + x) as f64);
        let b = Tensor4::<f64>::from_fn((2, 3, 3, 4), |n, c, y, x| -((n * 100 + c * 10 + y * 4 + x) as f64));
        let cat = Tensor4::concat_channels(&a, &b).unwrap();
        assert_eq!(cat.shape(), (2, 5, 3, 4));
        assert_eq!(cat.at(1, 2, 0, 0), b.at(1, 0, 0, 0));
        let (a2, b2) = cat.split_channels(2);
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor4::<f32>::from_vec((1, 1, 2, 2), vec![0.0; 3]).is_err());
    }
}
