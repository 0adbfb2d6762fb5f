//! Continuity padding applied before the discriminator.
//!
//! The left pad is a copy of the rightmost `side_width` columns and the right
//! pad a copy of the leftmost ones; one row is added above (below) the image,
//! filled entirely with a single pixel taken from the original top (bottom)
//! row.

use rand::Rng as _;

use crate::error::{invalid, Result};
use crate::nn::{Real, Tensor4};
use crate::seed;

/// Side pad width at the 512-pixel reference width.
pub const REFERENCE_SIDE_WIDTH: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PadSpec {
    pub side_width: usize,
    pub enabled: bool,
}

impl PadSpec {
    /// `round(width · 50 / 512)`, at least one pixel.
    pub fn for_width(width: usize) -> Self {
        let side = ((width * REFERENCE_SIDE_WIDTH) as f64 / 512.0).round() as usize;
        Self { side_width: side.max(1), enabled: true }
    }

    pub fn disabled() -> Self {
        Self { side_width: 0, enabled: false }
    }

    pub fn validate(&self, width: usize) -> Result<()> {
        if self.enabled && (self.side_width == 0 || 2 * self.side_width >= width) {
            return Err(invalid(format!(
                "pad side width {} must be in (0, {}/2)",
                self.side_width, width
            )));
        }
        Ok(())
    }
}

/// Source columns for the added top and bottom rows of one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PadColumns {
    pub top: usize,
    pub bottom: usize,
}

/// Uniform column choices for each batch item, drawn from `rng_seed`.
pub fn sample_pad_columns(n: usize, width: usize, rng_seed: u64) -> Vec<PadColumns> {
    let mut r = seed::rng(rng_seed);
    (0..n).map(|_| PadColumns { top: r.random_range(0..width), bottom: r.random_range(0..width) }).collect()
}

/// Pads every image of the batch with seeded column choices. A disabled
/// spec returns the input unchanged.
pub fn continuity_pad<T: Real>(img: &Tensor4<T>, spec: PadSpec, rng_seed: u64) -> Result<Tensor4<T>> {
    if !spec.enabled {
        return Ok(img.clone());
    }
    let cols = sample_pad_columns(img.n(), img.w(), rng_seed);
    continuity_pad_with(img, spec.side_width, &cols)
}

pub fn continuity_pad_with<T: Real>(img: &Tensor4<T>, side: usize, cols: &[PadColumns]) -> Result<Tensor4<T>> {
    let (n, c, h, w) = img.shape();
    PadSpec { side_width: side, enabled: true }.validate(w)?;
    if cols.len() != n || cols.iter().any(|p| p.top >= w || p.bottom >= w) {
        return Err(invalid("pad columns must be given per batch item and lie inside the image"));
    }
    let (ow, oh) = (w + 2 * side, h + 2);
    let mut out = Tensor4::zeros(n, c, oh, ow);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..ow {
                    let sx = (x + w - side) % w;
                    out.set(ni, ci, y + 1, x, img.at(ni, ci, y, sx));
                }
            }
            let top = img.at(ni, ci, 0, cols[ni].top);
            let bottom = img.at(ni, ci, h - 1, cols[ni].bottom);
            for x in 0..ow {
                out.set(ni, ci, 0, x, top);
                out.set(ni, ci, oh - 1, x, bottom);
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`continuity_pad_with`]: folds gradients of the padded image
/// back onto the source pixels they were copied from.
pub fn continuity_pad_backward<T: Real>(
    grad: &Tensor4<T>,
    side: usize,
    cols: &[PadColumns],
) -> Result<Tensor4<T>> {
    let (n, c, oh, ow) = grad.shape();
    if oh < 3 || ow <= 2 * side || cols.len() != n {
        return Err(invalid("padded gradient shape mismatch"));
    }
    let (h, w) = (oh - 2, ow - 2 * side);
    let mut out = Tensor4::zeros(n, c, h, w);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..ow {
                    let sx = (x + w - side) % w;
                    let v = out.at(ni, ci, y, sx) + grad.at(ni, ci, y + 1, x);
                    out.set(ni, ci, y, sx, v);
                }
            }
            let top: T = (0..ow).map(|x| grad.at(ni, ci, 0, x)).sum();
            let bottom: T = (0..ow).map(|x| grad.at(ni, ci, oh - 1, x)).sum();
            let t = out.at(ni, ci, 0, cols[ni].top) + top;
            out.set(ni, ci, 0, cols[ni].top, t);
            let b = out.at(ni, ci, h - 1, cols[ni].bottom) + bottom;
            out.set(ni, ci, h - 1, cols[ni].bottom, b);
        }
    }
    Ok(out)
}
