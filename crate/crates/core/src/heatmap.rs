//! Confidence-map encoding of poses and subpixel decoding back to poses.
//!
//! A stack holds one Gaussian map per keypoint, one limb map per skeleton
//! edge and a final global map (element-wise max of the keypoint maps).
//! Map cell `(u, v)` corresponds to image point `(u * d, v * d)` for
//! downsampling factor `d`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{Keypoint, Pose};
use crate::skeleton::Skeleton;
use crate::tensor::Tensor;

pub const DEFAULT_SIGMA: f64 = 5.0;
pub const DEFAULT_DOWNSAMPLE: usize = 2;
pub const DEFAULT_SCORE_FLOOR: f64 = 0.05;

const DEGENERATE_CURVATURE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapSpec {
    pub sigma: f64,
    pub downsample: usize,
    pub keypoints: usize,
    pub edges: usize,
    /// Channels whose maximum is below this decode to missing rows.
    pub score_floor: f64,
}

impl MapSpec {
    pub fn for_skeleton(skeleton: &Skeleton) -> Self {
        MapSpec {
            sigma: DEFAULT_SIGMA,
            downsample: DEFAULT_DOWNSAMPLE,
            keypoints: skeleton.len(),
            edges: skeleton.edges().len(),
            score_floor: DEFAULT_SCORE_FLOOR,
        }
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn with_downsample(mut self, d: usize) -> Self {
        self.downsample = d;
        self
    }

    pub fn channels(&self) -> usize {
        self.keypoints + self.edges + 1
    }

    pub fn global_channel(&self) -> usize {
        self.keypoints + self.edges
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma must be positive, got {}", self.sigma)));
        }
        if ![1, 2, 4, 8].contains(&self.downsample) {
            return Err(Error::InvalidArgument(format!(
                "downsample must be 1, 2, 4 or 8, got {}",
                self.downsample
            )));
        }
        if !(0.0..=1.0).contains(&self.score_floor) {
            return Err(Error::InvalidArgument(format!("score floor {} outside [0, 1]", self.score_floor)));
        }
        Ok(())
    }

    /// Map dimensions `(width, height)` for a frame, checking divisibility.
    pub fn map_size(&self, width: usize, height: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let d = self.downsample;
        if width % d != 0 || height % d != 0 || width == 0 || height == 0 {
            return Err(Error::Shape(format!(
                "frame {width}x{height} is not divisible by downsample {d}"
            )));
        }
        Ok((width / d, height / d))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceStack {
    pub spec: MapSpec,
    pub maps: Tensor,
}

impl ConfidenceStack {
    pub fn new(spec: MapSpec, maps: Tensor) -> Result<Self> {
        if maps.channels() != spec.channels() {
            return Err(Error::Shape(format!(
                "{} channels, expected {}",
                maps.channels(),
                spec.channels()
            )));
        }
        Ok(ConfidenceStack { spec, maps })
    }

    /// Channels tiled left to right into one grayscale image.
    pub fn tiled(&self) -> image::GrayImage {
        let (c, h, w) = self.maps.shape();
        let mut img = image::GrayImage::new((c * w) as u32, h as u32);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let v = (self.maps.get(ch, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
                    img.put_pixel((ch * w + x) as u32, y as u32, image::Luma([v]));
                }
            }
        }
        img
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.tiled()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                message: e.to_string(),
            })
    }
}

fn gaussian(d2: f64, sigma: f64) -> f64 {
    (-d2 / (2.0 * sigma * sigma)).exp()
}

fn segment_distance2(px: f64, py: f64, a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - a.0) * dx + (py - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    (px - cx).powi(2) + (py - cy).powi(2)
}

pub fn encode(pose: &Pose, width: usize, height: usize, spec: &MapSpec, skeleton: &Skeleton) -> Result<ConfidenceStack> {
    let (mw, mh) = spec.map_size(width, height)?;
    if pose.len() != skeleton.len() || spec.keypoints != skeleton.len() || spec.edges != skeleton.edges().len() {
        return Err(Error::PoseRows {
            expected: skeleton.len(),
            found: pose.len(),
        });
    }
    let d = spec.downsample as f64;
    let sigma = spec.sigma / d;
    let scaled: Vec<Option<(f64, f64)>> = pose.rows().iter().map(|r| r.map(|k| (k.x / d, k.y / d))).collect();
    let mut maps = Tensor::zeros(spec.channels(), mh, mw);

    for (i, p) in scaled.iter().enumerate() {
        let Some((px, py)) = *p else { continue };
        let plane = maps.channel_mut(i);
        for v in 0..mh {
            for u in 0..mw {
                let d2 = (u as f64 - px).powi(2) + (v as f64 - py).powi(2);
                plane[v * mw + u] = gaussian(d2, sigma);
            }
        }
    }
    for (e, &(parent, child)) in skeleton.edges().iter().enumerate() {
        let (Some(a), Some(b)) = (scaled[parent], scaled[child]) else {
            continue;
        };
        let plane = maps.channel_mut(spec.keypoints + e);
        for v in 0..mh {
            for u in 0..mw {
                plane[v * mw + u] = gaussian(segment_distance2(u as f64, v as f64, a, b), sigma);
            }
        }
    }
    let global = spec.global_channel();
    for cell in 0..mw * mh {
        let m = (0..spec.keypoints)
            .map(|i| maps.channel(i)[cell])
            .fold(0.0, f64::max);
        maps.channel_mut(global)[cell] = m;
    }
    ConfidenceStack::new(*spec, maps)
}

/// Quadratic-fit offsets for a peak at `(x, y)` on a `width x height` plane.
/// Axes where the peak touches the border are not refined.
pub fn subpixel_refine(plane: &[f64], width: usize, height: usize, x: usize, y: usize) -> (f64, f64) {
    let at = |xx: usize, yy: usize| plane[yy * width + xx];
    let p = at(x, y);
    let dx = if x > 0 && x + 1 < width {
        quadratic_offset(at(x - 1, y), p, at(x + 1, y))
    } else {
        0.0
    };
    let dy = if y > 0 && y + 1 < height {
        quadratic_offset(at(x, y - 1), p, at(x, y + 1))
    } else {
        0.0
    };
    (dx, dy)
}

/// Vertex of the parabola through `(-1, l), (0, p), (1, r)`, clamped to
/// half a cell.
pub fn quadratic_offset(l: f64, p: f64, r: f64) -> f64 {
    let denom = l - 2.0 * p + r;
    if denom.abs() <= DEGENERATE_CURVATURE {
        return 0.0;
    }
    ((l - r) / (2.0 * denom)).clamp(-0.5, 0.5)
}

pub fn decode(stack: &ConfidenceStack) -> Result<Pose> {
    let spec = &stack.spec;
    let (c, h, w) = stack.maps.shape();
    if c != spec.channels() {
        return Err(Error::Shape(format!("{c} channels, expected {}", spec.channels())));
    }
    let d = spec.downsample as f64;
    let rows = (0..spec.keypoints)
        .map(|i| {
            let plane = stack.maps.channel(i);
            let (best, peak) = plane
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
            if !(peak >= spec.score_floor) {
                return None;
            }
            let (x, y) = (best % w, best / w);
            let (dx, dy) = subpixel_refine(plane, w, h, x, y);
            Some(Keypoint::new((x as f64 + dx) * d, (y as f64 + dy) * d, peak.clamp(0.0, 1.0)))
        })
        .collect();
    Ok(Pose::new(rows))
}
