//! Keyframe selection by mini-batch k-means over frame thumbnails.

use rand::seq::index;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;
use crate::rng;

pub const DEFAULT_THUMB_SIDE: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameFeature {
    pub frame_id: u64,
    pub vector: Vec<f64>,
}

/// Flattened `thumb_side`² grayscale thumbnail with values in `[0, 1]`.
pub fn featurize(frame_id: u64, frame: &Raster, thumb_side: usize) -> FrameFeature {
    FrameFeature {
        frame_id,
        vector: frame.resize(thumb_side, thumb_side).into_vec(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CenterInit {
    /// Distinct data points drawn uniformly.
    Uniform,
    /// D²-weighted seeding.
    KMeansPlusPlus,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub k: usize,
    pub batch_size: usize,
    pub reassignment_ratio: f64,
    /// Stop once the summed squared center movement of an iteration is at
    /// most `tol`. Zero disables the test.
    pub tol: f64,
    pub max_iterations: usize,
    pub seed: u64,
    pub verbose: bool,
    pub init: CenterInit,
    /// Use every point once per iteration (in index order) and restart the
    /// per-center counts each iteration. With reassignment off this is
    /// exactly Lloyd's algorithm.
    pub full_batch: bool,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            k: 100,
            batch_size: 100,
            reassignment_ratio: 0.01,
            tol: 0.0,
            max_iterations: 100,
            seed: 0,
            verbose: true,
            init: CenterInit::KMeansPlusPlus,
            full_batch: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub centers: Vec<Vec<f64>>,
    /// Cluster index per input feature, in input order.
    pub assignment: Vec<usize>,
    pub frame_ids: Vec<u64>,
    pub per_center_counts: Vec<usize>,
    /// Sum of squared distances of every point to its assigned center.
    pub inertia: f64,
    pub iterations: usize,
    /// Batch inertia per iteration, filled when `verbose` is set.
    pub iteration_log: Vec<f64>,
}

impl Clustering {
    pub fn cluster_of(&self, frame_id: u64) -> Option<usize> {
        self.frame_ids
            .iter()
            .position(|&id| id == frame_id)
            .map(|i| self.assignment[i])
    }

    /// Per cluster `(size, share of total inertia)`.
    pub fn report(&self, features: &[FrameFeature]) -> Vec<(usize, f64)> {
        let mut per = vec![0.0; self.centers.len()];
        for (f, &c) in features.iter().zip(&self.assignment) {
            per[c] += squared_distance(&f.vector, &self.centers[c]);
        }
        per.iter()
            .zip(&self.per_center_counts)
            .map(|(&inertia, &size)| {
                let share = if self.inertia > 0.0 { inertia / self.inertia } else { 0.0 };
                (size, share)
            })
            .collect()
    }
}

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest center by squared distance; ties go to the lower index.
fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.iter().enumerate() {
        let d = squared_distance(point, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn validate(features: &[FrameFeature], config: &KMeansConfig) -> Result<usize> {
    let first = features.first().ok_or_else(|| Error::invalid("no features to cluster"))?;
    let dim = first.vector.len();
    if dim == 0 {
        return Err(Error::invalid("zero-dimensional features"));
    }
    if config.k == 0 || config.k > features.len() {
        return Err(Error::invalid(format!(
            "k = {} must be in 1..={}",
            config.k,
            features.len()
        )));
    }
    if config.batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    if !(config.reassignment_ratio >= 0.0) || !(config.tol >= 0.0) {
        return Err(Error::invalid("reassignment ratio and tol must be non-negative"));
    }
    for f in features {
        if f.vector.len() != dim {
            return Err(Error::Shape(format!(
                "frame {} has {} dims, expected {dim}",
                f.frame_id,
                f.vector.len()
            )));
        }
        if f.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("frame {} has non-finite features", f.frame_id)));
        }
    }
    Ok(dim)
}

fn init_centers(features: &[FrameFeature], config: &KMeansConfig, rng: &mut rng::Rng) -> Vec<Vec<f64>> {
    let n = features.len();
    match config.init {
        CenterInit::Uniform => index::sample(rng, n, config.k)
            .into_iter()
            .map(|i| features[i].vector.clone())
            .collect(),
        CenterInit::KMeansPlusPlus => {
            // Greedy variant: draw 2 + ln k candidates per step and keep the
            // one that lowers the total potential most.
            let trials = 2 + (config.k as f64).ln() as usize;
            let mut centers = vec![features[rng.random_range(0..n)].vector.clone()];
            let mut d2: Vec<f64> = features
                .par_iter()
                .map(|f| squared_distance(&f.vector, &centers[0]))
                .collect();
            while centers.len() < config.k {
                let total: f64 = d2.iter().sum();
                let candidates: Vec<usize> = (0..trials)
                    .map(|_| {
                        if total > 0.0 {
                            let target = rng.random::<f64>() * total;
                            let mut acc = 0.0;
                            d2.iter()
                                .position(|&d| {
                                    acc += d;
                                    acc > target
                                })
                                .unwrap_or(n - 1)
                        } else {
                            rng.random_range(0..n)
                        }
                    })
                    .collect();
                let mut best: Option<(f64, usize, Vec<f64>)> = None;
                for &c in &candidates {
                    let cand = &features[c].vector;
                    let updated: Vec<f64> = d2
                        .par_iter()
                        .zip(features.par_iter())
                        .map(|(d, f)| d.min(squared_distance(&f.vector, cand)))
                        .collect();
                    let potential: f64 = updated.iter().sum();
                    if best.as_ref().is_none_or(|b| potential < b.0) {
                        best = Some((potential, c, updated));
                    }
                }
                let (_, pick, updated) = best.expect("at least one candidate");
                d2 = updated;
                centers.push(features[pick].vector.clone());
            }
            centers
        }
    }
}

/// Mini-batch k-means with streaming per-center means (learning rate
/// `1 / count`) and reinitialization of starved centers.
///
/// Each iteration samples `batch_size` points with replacement, assigns
/// them to their nearest center and moves that center toward the point.
/// Every `ceil(10 k / batch_size)` iterations any center whose cumulative
/// count is below `reassignment_ratio * (total count / k)` is moved to a
/// random batch point, drawn with probability proportional to its squared
/// distance.
/// Fully deterministic for a given seed.
pub fn minibatch_kmeans(features: &[FrameFeature], config: &KMeansConfig) -> Result<Clustering> {
    let dim = validate(features, config)?;
    let n = features.len();
    let k = config.k;
    let mut rng = rng::seeded(config.seed);
    let mut centers = init_centers(features, config, &mut rng);
    let mut counts = vec![0u64; k];
    let mut iteration_log = Vec::new();
    let mut iterations = 0;
    // Starvation is judged only after roughly 10 hits per center have been
    // drawn; judging earlier discards well-placed centers that simply have
    // not been sampled yet.
    let cadence = if config.full_batch {
        1
    } else {
        (10 * k).div_ceil(config.batch_size).max(1)
    };

    if config.verbose {
        log::info!(
            "minibatch k-means: n={n} dim={dim} k={k} batch={} reassignment_ratio={} tol={} max_iterations={} init={:?}",
            config.batch_size,
            config.reassignment_ratio,
            config.tol,
            config.max_iterations,
            config.init
        );
    }

    for it in 0..config.max_iterations {
        iterations = it + 1;
        let batch: Vec<usize> = if config.full_batch {
            (0..n).collect()
        } else {
            (0..config.batch_size).map(|_| rng.random_range(0..n)).collect()
        };
        let assigned: Vec<(usize, f64)> = batch
            .par_iter()
            .map(|&i| nearest(&features[i].vector, &centers))
            .collect();
        if config.full_batch {
            counts.iter_mut().for_each(|c| *c = 0);
        }

        let previous = centers.clone();
        let mut batch_inertia = 0.0;
        for (&i, &(c, d)) in batch.iter().zip(&assigned) {
            batch_inertia += d;
            counts[c] += 1;
            let rate = 1.0 / counts[c] as f64;
            for (m, x) in centers[c].iter_mut().zip(&features[i].vector) {
                *m += (x - *m) * rate;
            }
        }
        let movement: f64 = centers
            .iter()
            .zip(&previous)
            .map(|(a, b)| squared_distance(a, b))
            .sum();

        if config.reassignment_ratio > 0.0 && iterations % cadence == 0 {
            let total: u64 = counts.iter().sum();
            let threshold = config.reassignment_ratio * total as f64 / k as f64;
            // Replacements are batch points drawn by squared distance to
            // their center, so exactly fitted points are never duplicated.
            let mut weights: Vec<f64> = assigned.iter().map(|&(_, d)| d).collect();
            for c in 0..k {
                if (counts[c] as f64) >= threshold {
                    continue;
                }
                let total_weight: f64 = weights.iter().sum();
                if total_weight <= 0.0 {
                    break;
                }
                let target = rng.random::<f64>() * total_weight;
                let mut acc = 0.0;
                let pick = weights
                    .iter()
                    .position(|&w| {
                        acc += w;
                        acc > target
                    })
                    .unwrap_or(weights.len() - 1);
                centers[c] = features[batch[pick]].vector.clone();
                counts[c] = 0;
                for (w, &i) in weights.iter_mut().zip(&batch) {
                    if i == batch[pick] {
                        *w = 0.0;
                    }
                }
            }
        }

        if config.verbose {
            log::info!("iteration {iterations}: batch inertia {batch_inertia:.6} movement {movement:.3e}");
            iteration_log.push(batch_inertia);
        }
        if config.tol > 0.0 && movement <= config.tol {
            break;
        }
    }

    let final_assign: Vec<(usize, f64)> = features
        .par_iter()
        .map(|f| nearest(&f.vector, &centers))
        .collect();
    let mut per_center_counts = vec![0; k];
    for &(c, _) in &final_assign {
        per_center_counts[c] += 1;
    }
    let inertia = final_assign.iter().map(|&(_, d)| d).sum();
    Ok(Clustering {
        centers,
        assignment: final_assign.iter().map(|&(c, _)| c).collect(),
        frame_ids: features.iter().map(|f| f.frame_id).collect(),
        per_center_counts,
        inertia,
        iterations,
        iteration_log,
    })
}

/// `ceil(0.1 * n / k)`: enough picks per cluster to keep about a tenth of
/// the pool.
pub fn default_per_cluster(n_frames: usize, k: usize) -> usize {
    ((0.10 * n_frames as f64) / k.max(1) as f64).ceil().max(1.0) as usize
}

/// The `per_cluster` members nearest each center (ties by lower frame id),
/// returned sorted by frame id.
pub fn select_keyframes(clustering: &Clustering, features: &[FrameFeature], per_cluster: usize) -> Vec<u64> {
    let mut members: Vec<Vec<(f64, u64)>> = vec![Vec::new(); clustering.centers.len()];
    for (f, &c) in features.iter().zip(&clustering.assignment) {
        let d = squared_distance(&f.vector, &clustering.centers[c]);
        members[c].push((d, f.frame_id));
    }
    let mut out: Vec<u64> = members
        .into_iter()
        .flat_map(|mut m| {
            m.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            m.into_iter().take(per_cluster).map(|(_, id)| id)
        })
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Evenly spaced baseline selection over the sequence.
pub fn select_uniform(frame_ids: &[u64], count: usize) -> Vec<u64> {
    let n = frame_ids.len();
    if count == 0 || n == 0 {
        return Vec::new();
    }
    let count = count.min(n);
    let mut out: Vec<u64> = (0..count).map(|i| frame_ids[i * n / count]).collect();
    out.sort_unstable();
    out.dedup();
    out
}
