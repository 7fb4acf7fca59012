//! Procedural test imagery: top-down pig-like blobs with known keypoints,
//! and noisy copies of planted templates for sampler checks.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::pose::{Keypoint, Pose};
use crate::raster::Raster;
use crate::rng;

/// Keypoints in body coordinates `(along, across)` as fractions of the body
/// length, in pig skeleton order. Positive `across` is the animal's left.
const BODY_POINTS: [(f64, f64); 9] = [
    (0.62, 0.0),   // snout
    (0.46, 0.0),   // head
    (0.30, 0.0),   // neck
    (0.20, 0.24),  // forelegL1
    (0.20, -0.24), // forelegR1
    (-0.28, 0.24), // hindlegL1
    (-0.28, -0.24), // hindlegR1
    (-0.46, 0.0),  // tailbase
    (-0.66, 0.08), // tailtip
];

fn soft_disc(d2: f64, radius: f64) -> f64 {
    let d = d2.sqrt();
    1.0 / (1.0 + ((d - radius) / 0.6).exp())
}

/// A `side x side` frame with one pig drawn at a random position, heading
/// and size, fully inside the frame.
pub fn pig_frame(side: usize, seed: u64) -> (Raster, Pose) {
    let mut r = rng::seeded(seed);
    let s = side as f64;
    let length = s * r.random_range(0.42..0.52);
    let heading = r.random_range(0.0..std::f64::consts::TAU);
    let margin = 0.7 * length;
    let cx = r.random_range(margin..s - margin);
    let cy = r.random_range(margin..s - margin);
    let (sin, cos) = heading.sin_cos();
    let to_image = |u: f64, v: f64| (cx + cos * u * length - sin * v * length, cy + sin * u * length + cos * v * length);
    let points: Vec<(f64, f64)> = BODY_POINTS.iter().map(|&(u, v)| to_image(u, v)).collect();
    let background = r.random_range(0.05..0.2);
    let (half_len, half_wid) = (0.42 * length, 0.2 * length);
    let tail = (points[7], points[8]);

    let img = Raster::from_fn(side, side, |x, y| {
        let (px, py) = (x as f64, y as f64);
        let (dx, dy) = (px - cx, py - cy);
        let u = (cos * dx + sin * dy) / half_len;
        let v = (-sin * dx + cos * dy) / half_wid;
        let body = 1.0 / (1.0 + (12.0 * ((u * u + v * v).sqrt() - 1.0)).exp());
        let mut value = background + 0.45 * body;
        let near = |i: usize, radius: f64| {
            let d2 = (px - points[i].0).powi(2) + (py - points[i].1).powi(2);
            soft_disc(d2, radius * length)
        };
        value += 0.15 * near(1, 0.09);
        value += 0.45 * near(0, 0.065);
        // a dark collar marks the neck
        value -= 0.25 * near(2, 0.05);
        // left legs are larger and brighter than right legs
        value += 0.35 * near(3, 0.07) + 0.28 * near(4, 0.05);
        value += 0.35 * near(5, 0.07) + 0.28 * near(6, 0.05);
        // tail as a thin bright segment ending in a tuft
        let (a, b) = tail;
        let (tx, ty) = (b.0 - a.0, b.1 - a.1);
        let t = (((px - a.0) * tx + (py - a.1) * ty) / (tx * tx + ty * ty)).clamp(0.0, 1.0);
        let seg_d2 = (px - a.0 - t * tx).powi(2) + (py - a.1 - t * ty).powi(2);
        value += 0.3 * soft_disc(seg_d2, 0.025 * length + 0.5);
        value += 0.3 * near(8, 0.04);
        value.clamp(0.0, 1.0)
    });
    let pose = Pose::new(points.into_iter().map(|(x, y)| Some(Keypoint::annotated(x, y))).collect());
    (img, pose)
}

/// `count` frames drawn from `templates` random block patterns plus
/// Gaussian pixel noise; returns the frames and each frame's template label.
pub fn planted_templates(count: usize, templates: usize, side: usize, noise_sigma: f64, seed: u64) -> (Vec<Raster>, Vec<usize>) {
    let mut r = rng::seeded(seed);
    let blocks = 8;
    let patterns: Vec<Vec<f64>> = (0..templates)
        .map(|_| (0..blocks * blocks).map(|_| r.random::<f64>()).collect())
        .collect();
    let noise = Normal::new(0.0, noise_sigma).expect("non-negative sigma");
    let cell = side.div_ceil(blocks);
    let mut frames = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let t = r.random_range(0..templates);
        frames.push(Raster::from_fn(side, side, |x, y| {
            (patterns[t][(y / cell) * blocks + x / cell] + noise.sample(&mut r)).clamp(0.0, 1.0)
        }));
        labels.push(t);
    }
    (frames, labels)
}

/// A `frames`-long sequence of predicted poses that drifts smoothly around a
/// small circle with slowly oscillating confidences, except that the whole
/// pose teleports by `jump` times the frame diagonal at each index in
/// `jumps` (alternating direction, so it stays put afterwards).
pub fn smooth_track(frames: usize, side: usize, jumps: &[usize], jump: f64, seed: u64) -> Vec<Pose> {
    let (_, base) = pig_frame(side, seed);
    let s = side as f64;
    let step = jump * s * std::f64::consts::SQRT_2;
    let mut offset = (0.0, 0.0);
    let mut sign = 1.0;
    (0..frames)
        .map(|t| {
            if jumps.contains(&t) {
                offset.0 += sign * step / std::f64::consts::SQRT_2;
                offset.1 += sign * step / std::f64::consts::SQRT_2;
                sign = -sign;
            }
            let phase = std::f64::consts::TAU * t as f64 / frames as f64;
            let (dx, dy) = (0.04 * s * phase.cos() + offset.0, 0.04 * s * phase.sin() + offset.1);
            let rows = base
                .rows()
                .iter()
                .enumerate()
                .map(|(k, p)| {
                    p.map(|p| {
                        let wobble = (std::f64::consts::TAU * t as f64 / 50.0 + k as f64).sin();
                        Keypoint::new(p.x + dx, p.y + dy, 0.8 + 0.05 * wobble)
                    })
                })
                .collect();
            Pose::new(rows)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pig_is_inside_and_deterministic() {
        for seed in 0..50 {
            let (img, pose) = pig_frame(96, seed);
            assert_eq!(pose.present(), 9);
            for k in pose.rows().iter().flatten() {
                assert!(k.x >= 0.0 && k.x <= 95.0 && k.y >= 0.0 && k.y <= 95.0, "seed {seed}: {k:?}");
            }
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_eq!(pig_frame(96, seed).0, img);
        }
    }

    #[test]
    fn paired_legs_straddle_the_spine() {
        let (_, pose) = pig_frame(96, 3);
        let head = pose.get(1).unwrap();
        let tail = pose.get(7).unwrap();
        let left = pose.get(3).unwrap();
        let right = pose.get(4).unwrap();
        let axis = (head.x - tail.x, head.y - tail.y);
        let cross = |p: &Keypoint| axis.0 * (p.y - tail.y) - axis.1 * (p.x - tail.x);
        assert!(cross(left) * cross(right) < 0.0);
    }

    #[test]
    fn templates_are_labelled() {
        let (frames, labels) = planted_templates(30, 5, 16, 0.0, 1);
        assert_eq!(frames.len(), 30);
        for (i, j) in [(0, 1), (2, 3)] {
            assert_eq!(labels[i] == labels[j], frames[i] == frames[j]);
        }
    }

    #[test]
    fn track_jumps_by_the_requested_distance() {
        let track = smooth_track(20, 96, &[10], 0.25, 4);
        let diag = 96.0 * std::f64::consts::SQRT_2;
        let moved = |t: usize| track[t].get(0).unwrap().distance(track[t - 1].get(0).unwrap()) / diag;
        assert!((moved(10) - 0.25).abs() < 0.02, "{}", moved(10));
        assert!(moved(5) < 0.01);
    }
}
