//! Reversible affine view augmentations and photometric distortions.
//!
//! An [`AffineAugment`] is a rotation and uniform scale about the image
//! center, stored as the 2x3 matrix mapping output pixel coordinates to
//! source pixel coordinates. Spatial augmentations are invertible and their
//! inverses are applied to feature maps before the dense loss; photometric
//! distortions (brightness, contrast, blur) are per-frame and never inverted.

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, SampleGrid};
use crate::tensor::Tensor4D;
use crate::util::Rng;
use rand::Rng as _;

/// Sampling ranges for [`sample_affine`], tied to the resolution the views
/// are augmented at (rotation and scale pivot on that image's center).
#[derive(Clone, Debug)]
pub struct AffineConfig {
    pub scale_range: (f32, f32),
    pub rotation_deg_range: (f32, f32),
    pub height: usize,
    pub width: usize,
}

impl AffineConfig {
    pub fn new(height: usize, width: usize) -> Self {
        AffineConfig {
            scale_range: (0.9, 1.1),
            rotation_deg_range: (-10.0, 10.0),
            height,
            width,
        }
    }

    /// Degenerate ranges producing the identity augment.
    pub fn identity(height: usize, width: usize) -> Self {
        AffineConfig {
            scale_range: (1.0, 1.0),
            rotation_deg_range: (0.0, 0.0),
            height,
            width,
        }
    }
}

/// An invertible spatial view transform: uniform scale and rotation about the
/// image center. `matrix` maps output pixel coordinates to source pixel
/// coordinates as `[x_src, y_src]^T = A * [x_out, y_out, 1]^T`.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineAugment {
    pub matrix: [f32; 6], // row-major 2x3: [a, b, tx, c, d, ty]
    pub scale: f32,
    pub rotation_deg: f32,
    pub height: usize,
    pub width: usize,
}

const DET_FLOOR: f32 = 1e-6;

impl AffineAugment {
    /// Builds the output-to-source matrix for a scale/rotation about the
    /// center of an `height x width` image.
    ///
    /// Forward augmentation scales the *content* by `scale`, so the sampling
    /// map uses `1/scale` (an output pixel reaches back a shorter distance
    /// when the content is magnified).
    pub fn new(scale: f32, rotation_deg: f32, height: usize, width: usize) -> Result<Self> {
        if scale.abs() < DET_FLOOR {
            return Err(Error::Param(format!("affine scale too small: {scale}")));
        }
        let (cx, cy) = center(height, width);
        let rad = rotation_deg.to_radians();
        let (sin, cos) = (rad.sin(), rad.cos());
        let inv_s = 1.0 / scale;
        // A = T(center) * R(-theta)/s * T(-center): sampling map of a content
        // rotation by +theta and magnification by s.
        let a = cos * inv_s;
        let b = sin * inv_s;
        let c = -sin * inv_s;
        let d = cos * inv_s;
        let tx = cx - a * cx - b * cy;
        let ty = cy - c * cx - d * cy;
        Ok(AffineAugment {
            matrix: [a, b, tx, c, d, ty],
            scale,
            rotation_deg,
            height,
            width,
        })
    }

    pub fn identity(height: usize, width: usize) -> Self {
        AffineAugment::new(1.0, 0.0, height, width).expect("identity is invertible")
    }

    pub fn det(&self) -> f32 {
        let [a, b, _, c, d, _] = self.matrix;
        a * d - b * c
    }

    /// Maps an output-space point to its source-space point.
    pub fn apply_point(&self, x: f32, y: f32) -> (f32, f32) {
        let [a, b, tx, c, d, ty] = self.matrix;
        (a * x + b * y + tx, c * x + d * y + ty)
    }

    pub fn is_identity(&self) -> bool {
        self.scale == 1.0 && self.rotation_deg == 0.0
    }
}

fn center(height: usize, width: usize) -> (f32, f32) {
    ((width as f32 - 1.0) / 2.0, (height as f32 - 1.0) / 2.0)
}

/// Draws scale and rotation uniformly from the configured ranges.
pub fn sample_affine(rng: &mut Rng, config: &AffineConfig) -> AffineAugment {
    let (s0, s1) = config.scale_range;
    let (r0, r1) = config.rotation_deg_range;
    let scale = if s0 == s1 { s0 } else { rng.gen_range(s0..s1) };
    let rot = if r0 == r1 { r0 } else { rng.gen_range(r0..r1) };
    AffineAugment::new(scale, rot, config.height, config.width)
        .expect("sampled scale is bounded away from zero")
}

/// Grid that realizes the augment under `grid_sample`: output pixel `(x, y)`
/// samples the augment's source point.
pub fn affine_to_grid(aug: &AffineAugment, h: usize, w: usize) -> SampleGrid {
    let mut grid = SampleGrid::new(1, h, w);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = aug.apply_point(x as f32, y as f32);
            grid.set(0, y, x, sx, sy);
        }
    }
    grid
}

/// Inverse transform: the 2x2 part is inverted, translation cancels, and the
/// stored scale/rotation flip to `1/s` and `-theta`.
pub fn invert_affine(aug: &AffineAugment) -> Result<AffineAugment> {
    let det = aug.det();
    if det.abs() <= DET_FLOOR {
        return Err(Error::Singular { det });
    }
    AffineAugment::new(
        1.0 / aug.scale,
        -aug.rotation_deg,
        aug.height,
        aug.width,
    )
}

/// Warps an image by the augment (bilinear, zero outside). Returns the warped
/// image and the validity mask.
pub fn apply_affine(image: &Tensor4D, aug: &AffineAugment) -> Result<(Tensor4D, Tensor4D)> {
    let (n, _, h, w) = image.shape();
    let base = affine_to_grid(aug, h, w);
    let mut grid = SampleGrid::new(n, h, w);
    for ni in 0..n {
        let dst = &mut grid.coords[ni * h * w * 2..(ni + 1) * h * w * 2];
        dst.copy_from_slice(&base.coords);
    }
    kernels::grid_sample_fwd(image, &grid)
}

// ---------------------------------------------------------------------------
// photometric
// ---------------------------------------------------------------------------

/// Brightness shift, contrast factor and Gaussian blur sigma.
#[derive(Clone, Debug, PartialEq)]
pub struct PhotometricParams {
    pub brightness: f32,
    pub contrast: f32,
    pub blur_sigma: f32,
}

impl PhotometricParams {
    pub fn identity() -> Self {
        PhotometricParams {
            brightness: 0.0,
            contrast: 1.0,
            blur_sigma: 0.0,
        }
    }
}

/// Sampling ranges for photometric distortion.
#[derive(Clone, Debug)]
pub struct PhotometricConfig {
    pub brightness_range: (f32, f32),
    pub contrast_range: (f32, f32),
    pub blur_sigma_range: (f32, f32),
}

impl Default for PhotometricConfig {
    fn default() -> Self {
        PhotometricConfig {
            brightness_range: (-0.2, 0.2),
            contrast_range: (0.7, 1.3),
            blur_sigma_range: (0.0, 1.2),
        }
    }
}

impl PhotometricConfig {
    pub fn identity() -> Self {
        PhotometricConfig {
            brightness_range: (0.0, 0.0),
            contrast_range: (1.0, 1.0),
            blur_sigma_range: (0.0, 0.0),
        }
    }
}

pub fn sample_photometric(rng: &mut Rng, config: &PhotometricConfig) -> PhotometricParams {
    let draw = |rng: &mut Rng, (lo, hi): (f32, f32)| if lo == hi { lo } else { rng.gen_range(lo..hi) };
    PhotometricParams {
        brightness: draw(rng, config.brightness_range),
        contrast: draw(rng, config.contrast_range),
        blur_sigma: draw(rng, config.blur_sigma_range),
    }
}

/// Normalized 1-D Gaussian taps with radius `ceil(3 * sigma)`.
fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as i32;
    let mut k: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i as f32).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f32 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Contrast about 0.5, brightness shift, clamp to [0, 1], then separable
/// Gaussian blur (edges clamped). Blurring a [0, 1] image stays in [0, 1].
pub fn apply_photometric(image: &Tensor4D, p: &PhotometricParams) -> Result<Tensor4D> {
    if p.blur_sigma < 0.0 {
        return Err(Error::Param(format!(
            "blur sigma must be >= 0, got {}",
            p.blur_sigma
        )));
    }
    let (n, c, h, w) = image.shape();
    let mut out = image.map(|v| ((v - 0.5) * p.contrast + 0.5 + p.brightness).clamp(0.0, 1.0));
    if p.blur_sigma > 0.0 {
        let k = gaussian_kernel(p.blur_sigma);
        let radius = (k.len() / 2) as isize;
        let mut tmp = vec![0.0f32; h * w];
        for ni in 0..n {
            for ci in 0..c {
                let plane = out.plane_mut(ni, ci);
                // Horizontal pass.
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = 0.0f32;
                        for (ki, &kv) in k.iter().enumerate() {
                            let sx = (x as isize + ki as isize - radius).clamp(0, w as isize - 1);
                            acc += kv * plane[y * w + sx as usize];
                        }
                        tmp[y * w + x] = acc;
                    }
                }
                // Vertical pass.
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = 0.0f32;
                        for (ki, &kv) in k.iter().enumerate() {
                            let sy = (y as isize + ki as isize - radius).clamp(0, h as isize - 1);
                            acc += kv * tmp[sy as usize * w + x];
                        }
                        plane[y * w + x] = acc;
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_from_seed;

    #[test]
    fn degenerate_ranges_give_identity() {
        let mut rng = rng_from_seed(0);
        let aug = sample_affine(&mut rng, &AffineConfig::identity(8, 12));
        assert_eq!(aug.matrix, [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn same_seed_same_augment() {
        let cfg = AffineConfig::new(16, 16);
        let a = sample_affine(&mut rng_from_seed(7), &cfg);
        let b = sample_affine(&mut rng_from_seed(7), &cfg);
        assert_eq!(a, b);
    }

    #[test]
    fn sampled_ranges_cover_and_center() {
        let cfg = AffineConfig::new(8, 8);
        let mut rng = rng_from_seed(3);
        let mut min_s = f32::MAX;
        let mut max_s = f32::MIN;
        let mut sum = 0.0f64;
        let n = 10_000;
        for _ in 0..n {
            let a = sample_affine(&mut rng, &cfg);
            min_s = min_s.min(a.scale);
            max_s = max_s.max(a.scale);
            sum += a.scale as f64;
            assert!((0.9..=1.1).contains(&a.scale));
            assert!((-10.0..=10.0).contains(&a.rotation_deg));
        }
        assert!(min_s >= 0.9 && max_s <= 1.1);
        let mean = sum / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean scale {mean}");
    }

    #[test]
    fn identity_augment_gives_identity_grid() {
        let aug = AffineAugment::identity(4, 6);
        let grid = affine_to_grid(&aug, 4, 6);
        let id = SampleGrid::identity(1, 4, 6);
        assert_eq!(grid.coords, id.coords);
    }

    #[test]
    fn double_scale_corner_coordinate() {
        // A 2x content magnification on a 4x4 image: output pixel (0, 0)
        // samples center + (corner - center)/2.
        let aug = AffineAugment::new(2.0, 0.0, 4, 4).unwrap();
        let (sx, sy) = aug.apply_point(0.0, 0.0);
        let c = 1.5f32;
        assert!((sx - (c + (0.0 - c) * 0.5)).abs() < 1e-6);
        assert!((sy - 0.75).abs() < 1e-6);
    }

    #[test]
    fn inverse_composition_is_identity_map() {
        let cfg = AffineConfig::new(24, 32);
        let mut rng = rng_from_seed(11);
        for _ in 0..100 {
            let a = sample_affine(&mut rng, &cfg);
            let inv = invert_affine(&a).unwrap();
            for &(x, y) in &[(0.0f32, 0.0f32), (31.0, 23.0), (11.5, 7.25), (16.0, 12.0)] {
                let (mx, my) = a.apply_point(x, y);
                let (rx, ry) = inv.apply_point(mx, my);
                // Note order: applying inv's matrix then a's matrix composes the
                // coordinate maps; both orders must return to the start.
                assert!((rx - x).abs() < 1e-4 && (ry - y).abs() < 1e-4, "({x},{y}) -> ({rx},{ry})");
            }
        }
    }

    #[test]
    fn rotation_inverse_flips_sign() {
        let a = AffineAugment::new(1.0, 10.0, 16, 16).unwrap();
        let inv = invert_affine(&a).unwrap();
        assert!((inv.rotation_deg + 10.0).abs() < 1e-6);
        // 2x2 part of a * inv is the identity.
        let [a0, b0, _, c0, d0, _] = a.matrix;
        let [a1, b1, _, c1, d1, _] = inv.matrix;
        let prod = [
            a0 * a1 + b0 * c1,
            a0 * b1 + b0 * d1,
            c0 * a1 + d0 * c1,
            c0 * b1 + d0 * d1,
        ];
        assert!((prod[0] - 1.0).abs() < 1e-6);
        assert!(prod[1].abs() < 1e-6);
        assert!(prod[2].abs() < 1e-6);
        assert!((prod[3] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn double_inverse_restores_augment() {
        let mut rng = rng_from_seed(13);
        let cfg = AffineConfig::new(12, 20);
        for _ in 0..50 {
            let a = sample_affine(&mut rng, &cfg);
            let back = invert_affine(&invert_affine(&a).unwrap()).unwrap();
            for (x, y) in a.matrix.iter().zip(back.matrix.iter()) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn photometric_identity_and_blur_of_constant() {
        let mut rng = rng_from_seed(17);
        let img = Tensor4D::rand_uniform(&mut rng, 1, 3, 6, 6, 0.0, 1.0);
        let out = apply_photometric(&img, &PhotometricParams::identity()).unwrap();
        assert_eq!(out, img);
        let c = Tensor4D::full(1, 1, 8, 8, 0.4);
        let blurred = apply_photometric(
            &c,
            &PhotometricParams {
                brightness: 0.0,
                contrast: 1.0,
                blur_sigma: 2.0,
            },
        )
        .unwrap();
        for &v in blurred.data() {
            assert!((v - 0.4).abs() < 1e-6);
        }
    }

    #[test]
    fn impulse_blur_matches_kernel_peak() {
        let mut img = Tensor4D::zeros(1, 1, 15, 15);
        img.set(0, 0, 7, 7, 1.0);
        let sigma = 1.0;
        let out = apply_photometric(
            &img,
            &PhotometricParams {
                brightness: 0.0,
                contrast: 1.0,
                blur_sigma: sigma,
            },
        )
        .unwrap();
        let k = gaussian_kernel(sigma);
        let peak = k[k.len() / 2];
        assert!((out.at(0, 0, 7, 7) - peak * peak).abs() < 1e-4);
    }

    #[test]
    fn negative_sigma_is_an_error() {
        let img = Tensor4D::zeros(1, 1, 2, 2);
        let p = PhotometricParams {
            brightness: 0.0,
            contrast: 1.0,
            blur_sigma: -0.5,
        };
        assert!(apply_photometric(&img, &p).is_err());
    }

    #[test]
    fn photometric_preserves_shape_and_range() {
        let mut rng = rng_from_seed(19);
        let img = Tensor4D::rand_uniform(&mut rng, 2, 3, 5, 7, 0.0, 1.0);
        let cfg = PhotometricConfig::default();
        for _ in 0..20 {
            let p = sample_photometric(&mut rng, &cfg);
            let out = apply_photometric(&img, &p).unwrap();
            assert_eq!(out.shape(), img.shape());
            assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn roundtrip_through_inverse_recovers_interior() {
        // Smooth image, random augment, warp there and back; interior pixels
        // survive the double bilinear resample.
        let img = Tensor4D::from_fn(1, 1, 32, 48, |_, _, y, x| {
            0.5 + 0.3 * ((x as f32) * 0.13).sin() * ((y as f32) * 0.11).cos()
        });
        let mut rng = rng_from_seed(23);
        let cfg = AffineConfig::new(32, 48);
        for _ in 0..100 {
            let a = sample_affine(&mut rng, &cfg);
            let (fwd, _) = apply_affine(&img, &a).unwrap();
            let (back, valid) = apply_affine(&fwd, &invert_affine(&a).unwrap()).unwrap();
            for y in 2..30 {
                for x in 2..46 {
                    if valid.at(0, 0, y, x) == 1.0 {
                        let d = (back.at(0, 0, y, x) - img.at(0, 0, y, x)).abs();
                        assert!(d < 2e-2, "({y},{x}): {d}");
                    }
                }
            }
        }
    }
}
