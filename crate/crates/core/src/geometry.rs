//! Spherical geometry: camera frames, equirectangular pixel conventions,
//! and snapshot extraction/embedding.
//!
//! World frame: a direction at longitude `θ` and latitude `φ` is
//! `d(θ, φ) = (−cos θ cos φ, sin θ cos φ, −sin φ)`, which makes the viewing
//! axis `z_n = x_n × y_n` of a camera at `(θ_c, φ_c)` equal to `d(θ_c, φ_c)`.
//!
//! Equirectangular pixels: column `u` maps to `θ = 2πu/W − π`, row `v` to
//! `φ = πv/H − π/2`, so row 0 is `φ = −π/2`. Pixel `(x, y)` is sampled at the
//! integer coordinates `(u, v) = (x, y)`.

use std::f64::consts::{FRAC_PI_2, PI};

use crate::error::{invalid, Result};
use crate::image::{EquirectImage, Image, Mask, SnapshotImage};

pub type Vec3 = [f64; 3];

/// Value written outside the embedded snapshot.
pub const BLANK_FILL: f32 = 0.5;

/// Rays with `d · z_n` at or below this are treated as missing the image plane.
pub const FRONT_EPS: f64 = 1e-9;

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

/// Camera viewing direction. No roll.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPose {
    pub theta_c: f64,
    pub phi_c: f64,
}

impl CameraPose {
    /// `theta_c ∈ [−π, π)`, `phi_c ∈ [−π/2, π/2]`.
    pub fn new(theta_c: f64, phi_c: f64) -> Result<Self> {
        if !theta_c.is_finite() || !phi_c.is_finite() {
            return Err(invalid("camera pose must be finite"));
        }
        if !(-PI..PI).contains(&theta_c) || !(-FRAC_PI_2..=FRAC_PI_2).contains(&phi_c) {
            return Err(invalid(format!("camera pose ({theta_c}, {phi_c}) out of range")));
        }
        Ok(Self { theta_c, phi_c })
    }

    /// Builds a pose from degrees, wrapping longitude into `[−180°, 180°)`.
    pub fn from_degrees(lon: f64, lat: f64) -> Result<Self> {
        if !lon.is_finite() || !lat.is_finite() {
            return Err(invalid("camera pose must be finite"));
        }
        let theta = (lon.to_radians() + PI).rem_euclid(2.0 * PI) - PI;
        Self::new(if theta >= PI { -PI } else { theta }, lat.to_radians())
    }

    pub fn front() -> Self {
        Self { theta_c: 0.0, phi_c: 0.0 }
    }
}

/// Perspective image size and focal distance, all in pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SnapshotGeometry {
    pub w1: usize,
    pub h1: usize,
    pub l: f64,
}

impl SnapshotGeometry {
    /// Snapshot size used for 512-wide panoramas.
    pub const REFERENCE: SnapshotGeometry = SnapshotGeometry { w1: 400, h1: 300, l: 100.0 };
    pub const REFERENCE_WIDTH: usize = 512;

    pub fn new(w1: usize, h1: usize, l: f64) -> Result<Self> {
        if w1 == 0 || h1 == 0 || !(l.is_finite() && l > 0.0) {
            return Err(invalid(format!("invalid snapshot geometry {w1}x{h1}, l = {l}")));
        }
        Ok(Self { w1, h1, l })
    }

    /// Reference geometry scaled to a panorama of the given width. Sizes are
    /// rounded to whole pixels; the focal distance keeps the horizontal view
    /// angle exact (`w1 / l` is preserved).
    pub fn scaled_for_width(width: usize) -> Self {
        let s = width as f64 / Self::REFERENCE_WIDTH as f64;
        let r = Self::REFERENCE;
        let w1 = ((r.w1 as f64 * s).round() as usize).max(1);
        let h1 = ((r.h1 as f64 * s).round() as usize).max(1);
        Self { w1, h1, l: w1 as f64 * r.l / r.w1 as f64 }
    }

    fn center(&self) -> (f64, f64) {
        ((self.w1 as f64 - 1.0) / 2.0, (self.h1 as f64 - 1.0) / 2.0)
    }
}

/// Orthonormal camera frame: image right `x_n`, image up `y_n`, viewing axis `z_n`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Basis3 {
    pub x_n: Vec3,
    pub y_n: Vec3,
    pub z_n: Vec3,
}

pub fn camera_basis(pose: CameraPose) -> Result<Basis3> {
    let CameraPose { theta_c: t, phi_c: p } = pose;
    if !t.is_finite() || !p.is_finite() {
        return Err(invalid("camera pose must be finite"));
    }
    let x_n = [-t.sin(), -t.cos(), 0.0];
    let y_n = [-p.sin() * t.cos(), p.sin() * t.sin(), p.cos()];
    Ok(Basis3 { x_n, y_n, z_n: cross(x_n, y_n) })
}

/// Horizontal and vertical view angles of a snapshot.
pub fn view_angles(geom: SnapshotGeometry) -> (f64, f64) {
    (2.0 * (geom.w1 as f64 / (2.0 * geom.l)).atan(), 2.0 * (geom.h1 as f64 / (2.0 * geom.l)).atan())
}

/// Unit direction of a longitude/latitude pair.
#[inline]
pub fn direction(theta: f64, phi: f64) -> Vec3 {
    [-theta.cos() * phi.cos(), theta.sin() * phi.cos(), -phi.sin()]
}

pub fn dir_from_equirect(u: f64, v: f64, width: usize, height: usize) -> Result<Vec3> {
    if !(0.0..width as f64).contains(&u) || !(0.0..=height as f64).contains(&v) {
        return Err(invalid(format!("({u}, {v}) outside a {width}x{height} panorama")));
    }
    Ok(dir_unchecked(u, v, width, height))
}

#[inline]
fn dir_unchecked(u: f64, v: f64, width: usize, height: usize) -> Vec3 {
    let theta = 2.0 * PI * u / width as f64 - PI;
    let phi = PI * v / height as f64 - FRAC_PI_2;
    direction(theta, phi)
}

/// Continuous pixel coordinates of a direction. Non-unit vectors are
/// normalised first.
pub fn equirect_from_dir(d: Vec3, width: usize, height: usize) -> Result<(f64, f64)> {
    let n = norm(d);
    if !(n.is_finite() && n > 0.0) {
        return Err(invalid("direction must be a non-zero finite vector"));
    }
    Ok(equirect_unchecked([d[0] / n, d[1] / n, d[2] / n], width, height))
}

#[inline]
fn equirect_unchecked(d: Vec3, width: usize, height: usize) -> (f64, f64) {
    let theta = d[1].atan2(-d[0]);
    let phi = (-d[2]).clamp(-1.0, 1.0).asin();
    ((theta + PI) * width as f64 / (2.0 * PI), (phi + FRAC_PI_2) * height as f64 / PI)
}

/// Renders a perspective snapshot looking along `pose`.
pub fn extract_snapshot(odi: &EquirectImage, pose: CameraPose, geom: SnapshotGeometry) -> Result<SnapshotImage> {
    let b = camera_basis(pose)?;
    let (cx, cy) = geom.center();
    let (w, h) = (odi.width(), odi.height());
    Ok(Image::from_fn(geom.w1, geom.h1, odi.channels(), |a, row, px| {
        let (da, db) = (a as f64 - cx, cy - row as f64);
        let p = [
            geom.l * b.z_n[0] + da * b.x_n[0] + db * b.y_n[0],
            geom.l * b.z_n[1] + da * b.x_n[1] + db * b.y_n[1],
            geom.l * b.z_n[2] + da * b.x_n[2] + db * b.y_n[2],
        ];
        let n = norm(p);
        let (u, v) = equirect_unchecked([p[0] / n, p[1] / n, p[2] / n], w, h);
        odi.sample_wrapped(u, v, px);
    }))
}

/// A blank panorama carrying a projected snapshot and the mask of the
/// pixels it covers.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedPair {
    pub canvas: EquirectImage,
    pub mask: Mask,
}

/// Snapshot-plane pixel coordinates hit by the ray through equirect pixel
/// `(u, v)`, or `None` when the ray misses the image.
#[inline]
pub fn plane_hit(b: &Basis3, geom: SnapshotGeometry, u: f64, v: f64, width: usize, height: usize) -> Option<(f64, f64)> {
    let d = dir_unchecked(u, v, width, height);
    let dz = dot(d, b.z_n);
    if dz <= FRONT_EPS {
        return None;
    }
    let t = geom.l / dz;
    let (cx, cy) = geom.center();
    let a = t * dot(d, b.x_n) + cx;
    let row = cy - t * dot(d, b.y_n);
    let inside = (0.0..=geom.w1 as f64 - 1.0).contains(&a) && (0.0..=geom.h1 as f64 - 1.0).contains(&row);
    inside.then_some((a, row))
}

/// Projects `snap` into a `width x height` panorama filled with [`BLANK_FILL`].
pub fn embed_snapshot(
    snap: &SnapshotImage,
    pose: CameraPose,
    geom: SnapshotGeometry,
    width: usize,
    height: usize,
) -> Result<EmbeddedPair> {
    if snap.width() != geom.w1 || snap.height() != geom.h1 {
        return Err(invalid(format!(
            "snapshot is {}x{}, geometry expects {}x{}",
            snap.width(),
            snap.height(),
            geom.w1,
            geom.h1
        )));
    }
    let b = camera_basis(pose)?;
    let mut mask = Mask { width, height, data: vec![false; width * height] };
    let mut canvas = EquirectImage::filled(width, height, snap.channels(), BLANK_FILL)?;
    let img = canvas.image_mut();
    for y in 0..height {
        for x in 0..width {
            if let Some((a, row)) = plane_hit(&b, geom, x as f64, y as f64, width, height) {
                snap.sample_clamped(a, row, img.pixel_mut(x, y));
                mask.data[y * width + x] = true;
            }
        }
    }
    Ok(EmbeddedPair { canvas, mask })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: Vec3, b: Vec3, tol: f64) -> bool {
        (0..3).all(|i| (a[i] - b[i]).abs() < tol)
    }

    #[test]
    fn basis_at_reference_poses() {
        let b = camera_basis(CameraPose::new(0.0, 0.0).unwrap()).unwrap();
        assert!(close(b.x_n, [0.0, -1.0, 0.0], 1e-15));
        assert!(close(b.y_n, [0.0, 0.0, 1.0], 1e-15));
        assert!(close(b.z_n, [-1.0, 0.0, 0.0], 1e-15));
        let b = camera_basis(CameraPose::new(FRAC_PI_2, 0.0).unwrap()).unwrap();
        assert!(close(b.x_n, [-1.0, 0.0, 0.0], 1e-15));
        assert!(close(b.y_n, [0.0, 0.0, 1.0], 1e-15));
        assert!(close(b.z_n, [0.0, 1.0, 0.0], 1e-15));
    }

    #[test]
    fn basis_rejects_non_finite() {
        assert!(camera_basis(CameraPose { theta_c: f64::NAN, phi_c: 0.0 }).is_err());
        assert!(CameraPose::new(PI, 0.0).is_err());
        assert!(CameraPose::new(0.0, 2.0).is_err());
    }

    #[test]
    fn z_axis_is_viewing_direction() {
        for (t, p) in [(0.3, -0.4), (-2.0, 1.2), (3.0, 0.0)] {
            let b = camera_basis(CameraPose::new(t, p).unwrap()).unwrap();
            assert!(close(b.z_n, direction(t, p), 1e-12));
        }
    }

    #[test]
    fn view_angle_cases() {
        let (ta, pa) = view_angles(SnapshotGeometry::new(400, 300, 100.0).unwrap());
        assert!((ta - 2.214_297_435_588_181).abs() < 1e-9);
        assert!((pa - 1.965_587_446_494_658).abs() < 1e-9);
        let (ta, _) = view_angles(SnapshotGeometry::new(200, 10, 100.0).unwrap());
        assert!((ta - FRAC_PI_2).abs() < 1e-15);
        let (ta, pa) = view_angles(SnapshotGeometry::new(1, 1, 1e9).unwrap());
        assert!(ta < 1e-6 && pa < 1e-6);
    }

    #[test]
    fn equirect_conventions() {
        let d = dir_from_equirect(32.0, 16.0, 64, 32).unwrap();
        assert!(close(d, [-1.0, 0.0, 0.0], 1e-15));
        for u in [0.0, 13.5, 63.9] {
            assert!(close(dir_from_equirect(u, 0.0, 64, 32).unwrap(), [0.0, 0.0, 1.0], 1e-15));
        }
        let (u, v) = equirect_from_dir([-1.0, 0.0, 0.0], 64, 32).unwrap();
        assert!((u - 32.0).abs() < 1e-12 && (v - 16.0).abs() < 1e-12);
        let (_, v) = equirect_from_dir([0.0, 0.0, -1.0], 64, 32).unwrap();
        assert!((v - 32.0).abs() < 1e-12);
        assert!(dir_from_equirect(64.0, 0.0, 64, 32).is_err());
        assert!(dir_from_equirect(0.0, 32.5, 64, 32).is_err());
        assert!(equirect_from_dir([0.0; 3], 64, 32).is_err());
    }

    #[test]
    fn scaled_geometry_preserves_ratios() {
        let g = SnapshotGeometry::scaled_for_width(128);
        assert_eq!((g.w1, g.h1), (100, 75));
        assert_eq!(g.l, 25.0);
        assert_eq!(view_angles(g), view_angles(SnapshotGeometry::REFERENCE));
        let g = SnapshotGeometry::scaled_for_width(64);
        assert_eq!((g.w1, g.h1), (50, 38));
        assert_eq!(view_angles(g).0, view_angles(SnapshotGeometry::REFERENCE).0);
    }

    #[test]
    fn constant_odi_gives_constant_snapshot() {
        let odi = EquirectImage::filled(64, 32, 3, 0.25).unwrap();
        let snap = extract_snapshot(&odi, CameraPose::new(1.0, 0.3).unwrap(), SnapshotGeometry::new(20, 10, 8.0).unwrap())
            .unwrap();
        assert!(snap.data().iter().all(|v| (*v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn center_pixel_samples_the_camera_direction() {
        let odi = EquirectImage::new(Image::from_fn(64, 32, 1, |x, y, px| {
            px[0] = ((x as f64 * 0.2).sin() * 0.4 + (y as f64 * 0.3).cos() * 0.4 + 0.5) as f32
        }))
        .unwrap();
        let pose = CameraPose::new(0.7, -0.2).unwrap();
        let geom = SnapshotGeometry::new(21, 11, 9.0).unwrap();
        let snap = extract_snapshot(&odi, pose, geom).unwrap();
        let (u, v) = equirect_from_dir(direction(0.7, -0.2), 64, 32).unwrap();
        let mut want = [0.0];
        odi.sample_wrapped(u, v, &mut want);
        assert!((snap.get(10, 5, 0) - want[0]).abs() < 1e-6);
    }

    #[test]
    fn embedded_constant_snapshot() {
        let geom = SnapshotGeometry::scaled_for_width(64);
        let snap = Image::filled(geom.w1, geom.h1, 3, 0.9);
        let pair = embed_snapshot(&snap, CameraPose::front(), geom, 64, 32).unwrap();
        assert!(pair.mask.count() > 0);
        for y in 0..32 {
            for x in 0..64 {
                let want = if pair.mask.get(x, y) { 0.9 } else { BLANK_FILL };
                assert!(pair.canvas.pixel(x, y).iter().all(|v| (*v - want).abs() < 1e-6));
            }
        }
    }

    #[test]
    fn front_mask_is_symmetric_about_center_column() {
        let geom = SnapshotGeometry::scaled_for_width(128);
        let snap = Image::filled(geom.w1, geom.h1, 3, 0.1);
        let pair = embed_snapshot(&snap, CameraPose::front(), geom, 128, 64).unwrap();
        for y in 0..64 {
            for k in 1..64 {
                assert_eq!(pair.mask.get(64 + k, y), pair.mask.get(64 - k, y), "row {y} offset {k}");
            }
        }
    }

    #[test]
    fn embed_rejects_mismatched_snapshot() {
        let geom = SnapshotGeometry::new(10, 8, 5.0).unwrap();
        assert!(embed_snapshot(&Image::filled(9, 8, 3, 0.0), CameraPose::front(), geom, 64, 32).is_err());
    }
}
