//! Seeded augmentation of image/pose pairs.
//!
//! Spatial transforms move keypoints with the pixels; mirroring relabels
//! left/right keypoints through the skeleton's swap permutation; noise
//! transforms touch pixels only.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{Keypoint, Pose};
use crate::raster::Raster;
use crate::rng::{self, Rng};

/// Scale, then rotate about `center`, then translate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineSpec {
    /// Degrees; positive turns +x toward +y (clockwise on screen).
    pub rotation: f64,
    pub translation: (f64, f64),
    pub scale: f64,
    pub center: (f64, f64),
}

impl AffineSpec {
    pub fn identity() -> Self {
        AffineSpec {
            rotation: 0.0,
            translation: (0.0, 0.0),
            scale: 1.0,
            center: (0.0, 0.0),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation == 0.0 && self.translation == (0.0, 0.0) && self.scale == 1.0
    }

    /// Row-major homogeneous forward matrix.
    pub fn matrix(&self) -> [[f64; 3]; 3] {
        let (s, c) = self.rotation.to_radians().sin_cos();
        let (a, b) = (self.scale * c, -self.scale * s);
        let (d, e) = (self.scale * s, self.scale * c);
        let (cx, cy) = self.center;
        let (tx, ty) = self.translation;
        [
            [a, b, cx + tx - (a * cx + b * cy)],
            [d, e, cy + ty - (d * cx + e * cy)],
            [0.0, 0.0, 1.0],
        ]
    }

    pub fn forward(&self, x: f64, y: f64) -> (f64, f64) {
        let m = self.matrix();
        (m[0][0] * x + m[0][1] * y + m[0][2], m[1][0] * x + m[1][1] * y + m[1][2])
    }

    fn inverse_matrix(&self) -> [[f64; 3]; 2] {
        let m = self.matrix();
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        let (ia, ib) = (m[1][1] / det, -m[0][1] / det);
        let (id, ie) = (-m[1][0] / det, m[0][0] / det);
        [
            [ia, ib, -(ia * m[0][2] + ib * m[1][2])],
            [id, ie, -(id * m[0][2] + ie * m[1][2])],
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub dropout_fraction: f64,
    pub additive_noise_sigma: f64,
    pub blur_sigma: f64,
    /// Contrast stretch about mid-gray; 1 leaves pixels unchanged.
    pub contrast_factor: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            dropout_fraction: 0.0,
            additive_noise_sigma: 0.0,
            blur_sigma: 0.0,
            contrast_factor: 1.0,
        }
    }
}

/// Closed ranges `(lo, hi)` sampled uniformly; `lo == hi` pins a value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub rotation: (f64, f64),
    /// Translation as a fraction of the frame side, per axis.
    pub translation: (f64, f64),
    pub scale: (f64, f64),
    pub flip_probability: f64,
    pub additive_noise_sigma: (f64, f64),
    pub blur_sigma: (f64, f64),
    pub dropout_fraction: (f64, f64),
    pub contrast_factor: (f64, f64),
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            rotation: (-30.0, 30.0),
            translation: (-0.05, 0.05),
            scale: (0.9, 1.1),
            flip_probability: 0.5,
            additive_noise_sigma: (0.0, 0.03),
            blur_sigma: (0.0, 1.0),
            dropout_fraction: (0.0, 0.02),
            contrast_factor: (0.8, 1.25),
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Every transform pinned to its neutral value.
    pub fn none() -> Self {
        AugmentConfig {
            rotation: (0.0, 0.0),
            translation: (0.0, 0.0),
            scale: (1.0, 1.0),
            flip_probability: 0.0,
            additive_noise_sigma: (0.0, 0.0),
            blur_sigma: (0.0, 0.0),
            dropout_fraction: (0.0, 0.0),
            contrast_factor: (1.0, 1.0),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("rotation", self.rotation),
            ("translation", self.translation),
            ("scale", self.scale),
            ("additive_noise_sigma", self.additive_noise_sigma),
            ("blur_sigma", self.blur_sigma),
            ("dropout_fraction", self.dropout_fraction),
            ("contrast_factor", self.contrast_factor),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::invalid(format!("{name} range ({lo}, {hi})")));
            }
        }
        if self.scale.0 <= 0.0 || self.contrast_factor.0 <= 0.0 {
            return Err(Error::invalid("scale and contrast must be positive"));
        }
        if self.additive_noise_sigma.0 < 0.0 || self.blur_sigma.0 < 0.0 {
            return Err(Error::invalid("noise and blur sigmas must be non-negative"));
        }
        if self.dropout_fraction.0 < 0.0 || self.dropout_fraction.1 > 1.0 {
            return Err(Error::invalid("dropout fraction must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::invalid("flip probability must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentSample {
    pub affine: AffineSpec,
    pub noise: NoiseSpec,
    pub flip: bool,
    pub noise_seed: u64,
}

fn uniform(rng: &mut Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        // still consume a draw so the stream layout does not depend on ranges
        let _: f64 = rng.random();
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Draws a transform set for a `width` x `height` frame. Rotation and
/// scaling pivot on the frame center.
pub fn sample_augmentation(config: &AugmentConfig, width: usize, height: usize, rng: &mut Rng) -> AugmentSample {
    let rotation = uniform(rng, config.rotation);
    let dx = uniform(rng, config.translation) * width as f64;
    let dy = uniform(rng, config.translation) * height as f64;
    let scale = uniform(rng, config.scale);
    let flip = rng.random::<f64>() < config.flip_probability;
    let noise = NoiseSpec {
        contrast_factor: uniform(rng, config.contrast_factor),
        additive_noise_sigma: uniform(rng, config.additive_noise_sigma),
        blur_sigma: uniform(rng, config.blur_sigma),
        dropout_fraction: uniform(rng, config.dropout_fraction),
    };
    AugmentSample {
        affine: AffineSpec {
            rotation,
            translation: (dx, dy),
            scale,
            center: ((width as f64 - 1.0) / 2.0, (height as f64 - 1.0) / 2.0),
        },
        noise,
        flip,
        noise_seed: rng.random(),
    }
}

fn in_frame(x: f64, y: f64, width: usize, height: usize) -> bool {
    x >= -0.5 && y >= -0.5 && x < width as f64 - 0.5 && y < height as f64 - 0.5
}

/// Resamples the image bilinearly through the inverse transform (black
/// outside the source) and moves keypoints by the forward transform.
/// Keypoints landing outside the frame become missing.
pub fn apply_affine(image: &Raster, pose: &Pose, spec: &AffineSpec) -> Result<(Raster, Pose)> {
    if !(spec.scale > 0.0 && spec.scale.is_finite()) {
        return Err(Error::invalid(format!("affine scale {} must be positive", spec.scale)));
    }
    if spec.is_identity() {
        return Ok((image.clone(), pose.clone()));
    }
    let inv = spec.inverse_matrix();
    let out = Raster::from_fn(image.width(), image.height(), |x, y| {
        let (x, y) = (x as f64, y as f64);
        let sx = inv[0][0] * x + inv[0][1] * y + inv[0][2];
        let sy = inv[1][0] * x + inv[1][1] * y + inv[1][2];
        image.sample_zero(sx, sy)
    });
    let (w, h) = (image.width(), image.height());
    let moved = pose.map_points(|k| {
        let (x, y) = spec.forward(k.x, k.y);
        in_frame(x, y, w, h).then_some(Keypoint::new(x, y, k.score))
    });
    Ok((out, moved))
}

/// Mirror about the vertical axis: `x' = (width - 1) - x`, then rows are
/// relabeled so `out[i] = mirrored[swap[i]]`.
pub fn flip_horizontal(image: &Raster, pose: &Pose, swap_permutation: &[usize]) -> (Raster, Pose) {
    let axis = image.width() as f64 - 1.0;
    let mirrored = pose.map_points(|k| Some(Keypoint::new(axis - k.x, k.y, k.score)));
    (image.mirrored(), mirrored.permuted(swap_permutation))
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(image: &Raster, sigma: f64) -> Raster {
    if sigma <= 0.0 {
        return image.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as i64;
    let (w, h) = (image.width() as i64, image.height() as i64);
    let horizontal = Raster::from_fn(w as usize, h as usize, |x, y| {
        kernel
            .iter()
            .enumerate()
            .map(|(i, kv)| kv * image.get((x as i64 + i as i64 - r).clamp(0, w - 1) as usize, y))
            .sum()
    });
    Raster::from_fn(w as usize, h as usize, |x, y| {
        kernel
            .iter()
            .enumerate()
            .map(|(i, kv)| kv * horizontal.get(x, (y as i64 + i as i64 - r).clamp(0, h - 1) as usize))
            .sum()
    })
}

/// Contrast, additive Gaussian noise, blur, then pixel dropout; the result
/// is clamped to `[0, 1]`.
pub fn apply_noise(image: &Raster, spec: &NoiseSpec, seed: u64) -> Raster {
    let mut rng = rng::seeded(seed);
    let mut out = image.clone();
    if spec.contrast_factor != 1.0 {
        out.data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.5 + spec.contrast_factor * (*v - 0.5));
    }
    if spec.additive_noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.additive_noise_sigma).expect("sigma is positive and finite");
        out.data_mut().iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    if spec.blur_sigma > 0.0 {
        out = gaussian_blur(&out, spec.blur_sigma);
    }
    if spec.dropout_fraction > 0.0 {
        let p = spec.dropout_fraction;
        out.data_mut().iter_mut().for_each(|v| {
            if rng.random::<f64>() < p {
                *v = 0.0;
            }
        });
    }
    out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    out
}

/// Applies a drawn sample: affine, optional mirror, then pixel noise.
pub fn apply_sample(image: &Raster, pose: &Pose, sample: &AugmentSample, swap_permutation: &[usize]) -> Result<(Raster, Pose)> {
    let (mut img, mut pose) = apply_affine(image, pose, &sample.affine)?;
    if sample.flip {
        (img, pose) = flip_horizontal(&img, &pose, swap_permutation);
    }
    Ok((apply_noise(&img, &sample.noise, sample.noise_seed), pose))
}

/// Augments one frame with a stream derived from `(config.seed, epoch,
/// frame_id)`, so results do not depend on processing order.
pub fn augment_frame(
    config: &AugmentConfig,
    image: &Raster,
    pose: &Pose,
    swap_permutation: &[usize],
    epoch: u64,
    frame_id: u64,
) -> Result<(Raster, Pose)> {
    let mut rng = rng::stream(config.seed, &[epoch, frame_id]);
    let sample = sample_augmentation(config, image.width(), image.height(), &mut rng);
    apply_sample(image, pose, &sample, swap_permutation)
}

const MARKER_COLORS: [[u8; 3]; 9] = [
    [230, 25, 75],
    [60, 180, 75],
    [255, 225, 25],
    [0, 130, 200],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
    [240, 50, 230],
    [210, 245, 60],
];

/// Tiles image/pose pairs into a `cols`-wide RGB sheet with keypoint
/// markers drawn as small crosses.
pub fn contact_sheet(samples: &[(Raster, Pose)], cols: usize) -> image::RgbImage {
    let cols = cols.max(1);
    let (tw, th) = samples
        .first()
        .map_or((1, 1), |(r, _)| (r.width() as u32, r.height() as u32));
    let rows = samples.len().div_ceil(cols).max(1) as u32;
    let mut sheet = image::RgbImage::new(tw * cols as u32, th * rows);
    for (n, (img, pose)) in samples.iter().enumerate() {
        let ox = (n % cols) as u32 * tw;
        let oy = (n / cols) as u32 * th;
        for y in 0..img.height().min(th as usize) {
            for x in 0..img.width().min(tw as usize) {
                let v = (img.get(x, y).clamp(0.0, 1.0) * 255.0).round() as u8;
                sheet.put_pixel(ox + x as u32, oy + y as u32, image::Rgb([v, v, v]));
            }
        }
        for (k, row) in pose.rows().iter().enumerate() {
            let Some(p) = row else { continue };
            let color = image::Rgb(MARKER_COLORS[k % MARKER_COLORS.len()]);
            let (px, py) = (p.x.round() as i64, p.y.round() as i64);
            for d in -2i64..=2 {
                for (x, y) in [(px + d, py), (px, py + d)] {
                    if x >= 0 && y >= 0 && (x as u32) < tw && (y as u32) < th {
                        sheet.put_pixel(ox + x as u32, oy + y as u32, color);
                    }
                }
            }
        }
    }
    sheet
}
