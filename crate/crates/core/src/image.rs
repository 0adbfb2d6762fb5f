//! Raster containers and PNG I/O.
//!
//! Pixels are stored row-major and channel-interleaved (`HWC`), normalized
//! to `[0, 1]`.

use std::ops::Deref;
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::nn::{Real, Tensor4};

#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

/// Perspective snapshot; any aspect ratio.
pub type SnapshotImage = Image;

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(invalid(format!(
                "image dimensions must be positive, got {width}x{height}x{channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(invalid(format!(
                "pixel buffer has {} values, expected {}",
                data.len(),
                width * height * channels
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(invalid(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        assert!((0.0..=1.0).contains(&value));
        Self { width, height, channels, data: vec![value; width * height * channels] }
    }

    /// Builds an image from a per-pixel function returning one value per channel.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, &mut [f32]),
    ) -> Self {
        let mut data = vec![0.0; width * height * channels];
        for y in 0..height {
            for x in 0..width {
                let i = (y * width + x) * channels;
                f(x, y, &mut data[i..i + channels]);
            }
        }
        for v in &mut data {
            *v = v.clamp(0.0, 1.0);
        }
        Self { width, height, channels, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Bilinear sample with both axes clamped to the pixel grid. Pixel
    /// `(x, y)` sits at integer coordinates.
    pub fn sample_clamped(&self, u: f64, v: f64, out: &mut [f32]) {
        let u = u.clamp(0.0, (self.width - 1) as f64);
        let v = v.clamp(0.0, (self.height - 1) as f64);
        let x0 = u.floor() as usize;
        let y0 = v.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        self.blend(x0, x1, u - x0 as f64, y0, y1, v - y0 as f64, out);
    }

    /// Bilinear sample that wraps horizontally (longitude) and clamps
    /// vertically (latitude).
    pub fn sample_wrapped(&self, u: f64, v: f64, out: &mut [f32]) {
        let w = self.width as f64;
        let mut u = u.rem_euclid(w);
        if u >= w {
            u = 0.0;
        }
        let v = v.clamp(0.0, (self.height - 1) as f64);
        let x0 = (u.floor() as usize).min(self.width - 1);
        let x1 = (x0 + 1) % self.width;
        let y0 = v.floor() as usize;
        let y1 = (y0 + 1).min(self.height - 1);
        self.blend(x0, x1, u - x0 as f64, y0, y1, v - y0 as f64, out);
    }

    #[allow(clippy::too_many_arguments)]
    #[inline]
    fn blend(&self, x0: usize, x1: usize, fx: f64, y0: usize, y1: usize, fy: f64, out: &mut [f32]) {
        let w00 = (1.0 - fx) * (1.0 - fy);
        let w10 = fx * (1.0 - fy);
        let w01 = (1.0 - fx) * fy;
        let w11 = fx * fy;
        let (p00, p10, p01, p11) =
            (self.pixel(x0, y0), self.pixel(x1, y0), self.pixel(x0, y1), self.pixel(x1, y1));
        for c in 0..self.channels {
            let v = w00 * f64::from(p00[c])
                + w10 * f64::from(p10[c])
                + w01 * f64::from(p01[c])
                + w11 * f64::from(p11[c]);
            out[c] = v.clamp(0.0, 1.0) as f32;
        }
    }

    /// Converts to a `1 x C x H x W` tensor rescaled from `[0, 1]` to `[-1, 1]`.
    pub fn to_tensor<T: Real>(&self) -> Tensor4<T> {
        let (w, h, c) = (self.width, self.height, self.channels);
        let mut t = Tensor4::zeros(1, c, h, w);
        let data = t.data_mut();
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let v = f64::from(self.data[(y * w + x) * c + ch]);
                    data[(ch * h + y) * w + x] = T::lit(v * 2.0 - 1.0);
                }
            }
        }
        t
    }

    /// Inverse of [`Image::to_tensor`] for batch item `n`; values are clamped
    /// into `[0, 1]`.
    pub fn from_tensor<T: Real>(t: &Tensor4<T>, n: usize) -> Result<Self> {
        let (_, c, h, w) = t.shape();
        if n >= t.n() {
            return Err(invalid(format!("batch index {n} out of range")));
        }
        let src = t.item(n);
        let mut data = vec![0.0f32; w * h * c];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = (src[(ch * h + y) * w + x].as_f64() + 1.0) * 0.5;
                    if !v.is_finite() {
                        return Err(Error::NumericDomain("non-finite network output".into()));
                    }
                    data[(y * w + x) * c + ch] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
        Ok(Self { width: w, height: h, channels: c, data })
    }

    /// 8-bit quantization as stored in PNG files.
    pub fn to_rgb8(&self) -> Result<image::RgbImage> {
        if self.channels != 3 {
            return Err(invalid(format!("RGB output needs 3 channels, got {}", self.channels)));
        }
        let bytes = self.data.iter().map(|v| quantize(*v)).collect();
        Ok(image::RgbImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer size matches dimensions"))
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8()?.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|b| f32::from(b) / 255.0).collect();
        Self::new(w as usize, h as usize, 3, data)
    }
}

#[inline]
pub(crate) fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// A panorama in equirectangular projection. Width is always twice the height.
#[derive(Clone, Debug, PartialEq)]
pub struct EquirectImage(Image);

impl EquirectImage {
    pub fn new(image: Image) -> Result<Self> {
        if image.width != 2 * image.height {
            return Err(invalid(format!(
                "equirectangular image must be 2:1, got {}x{}",
                image.width, image.height
            )));
        }
        Ok(Self(image))
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Result<Self> {
        Self::new(Image::filled(width, height, channels, value))
    }

    pub fn into_inner(self) -> Image {
        self.0
    }

    pub fn image_mut(&mut self) -> &mut Image {
        &mut self.0
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(Image::load_png(path)?)
    }
}

impl Deref for EquirectImage {
    type Target = Image;

    fn deref(&self) -> &Image {
        &self.0
    }
}

/// Binary per-pixel mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|m| **m).count()
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.data.iter().map(|m| if *m { 255u8 } else { 0 }).collect();
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer size matches dimensions");
        img.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::NotFound(path.to_path_buf()));
        }
        let img = image::open(path)?.to_luma8();
        let (w, h) = img.dimensions();
        Ok(Self {
            width: w as usize,
            height: h as usize,
            data: img.into_raw().into_iter().map(|b| b >= 128).collect(),
        })
    }
}
