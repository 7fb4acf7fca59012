//! Stacked dense-block hourglass for confidence-map regression, with
//! hand-written reverse-mode gradients.
//!
//! Each stack is an encoder-decoder: dense blocks with average-pool
//! transitions on the way down, nearest-neighbor upsampling with skip
//! concatenation on the way up, and a linear 1x1 head. Later stacks see the
//! previous stack's features together with its head output.

mod checkpoint;
mod graph;
pub mod ops;
mod optim;
mod train;

use std::path::Path;

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heatmap::{self, ConfidenceStack, MapSpec};
use crate::pose::Pose;
use crate::raster::Raster;
use crate::rng;
use crate::tensor::Tensor;
use graph::{Graph, NodeId};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{Adam, EarlyStopping, PlateauSchedule};
pub use train::{fit_frame, train, EpochRecord, StopReason, TrainConfig, TrainHistory, TrainSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_side: usize,
    pub stacks: usize,
    pub depth: usize,
    pub block_layers: usize,
    pub growth: usize,
    pub stem_channels: usize,
    pub compression: f64,
    pub output_channels: usize,
    pub downsample: usize,
    pub seed: u64,
}

impl NetworkConfig {
    pub fn for_maps(spec: &MapSpec) -> Self {
        NetworkConfig {
            input_side: 96,
            stacks: 2,
            depth: 2,
            block_layers: 2,
            growth: 8,
            stem_channels: 8,
            compression: 0.5,
            output_channels: spec.channels(),
            downsample: spec.downsample,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.stacks == 0 || self.growth == 0 || self.stem_channels == 0 || self.output_channels == 0 {
            return bad("stacks, growth, stem channels and output channels must be positive".into());
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return bad(format!("compression {} outside (0, 1]", self.compression));
        }
        if ![1, 2, 4, 8].contains(&self.downsample) {
            return bad(format!("downsample must be 1, 2, 4 or 8, got {}", self.downsample));
        }
        let unit = self.downsample << self.depth;
        if self.input_side == 0 || self.input_side % unit != 0 {
            return Err(Error::Shape(format!(
                "input side {} is not divisible by {unit}",
                self.input_side
            )));
        }
        Ok(())
    }

    pub fn output_side(&self) -> usize {
        self.input_side / self.downsample
    }

    fn transition_channels(&self, c: usize) -> usize {
        ((self.compression * c as f64).floor() as usize).max(1)
    }

    /// Every convolution in forward order: `(name, in, out, kernel)`.
    pub fn conv_plan(&self) -> Vec<(String, usize, usize, usize)> {
        let mut plan = vec![("stem".to_string(), 1, self.stem_channels, 3)];
        let dense = |plan: &mut Vec<_>, prefix: &str, c: usize| -> usize {
            let mut c = c;
            for j in 0..self.block_layers {
                plan.push((format!("{prefix}.dense{j}"), c, self.growth, 3));
                c += self.growth;
            }
            c
        };
        let mut stack_in = self.stem_channels;
        for s in 0..self.stacks {
            let mut c = stack_in;
            let mut skips = Vec::new();
            for l in 0..self.depth {
                c = dense(&mut plan, &format!("stack{s}.down{l}"), c);
                skips.push(c);
                let t = self.transition_channels(c);
                plan.push((format!("stack{s}.down{l}.transition"), c, t, 1));
                c = t;
            }
            c = dense(&mut plan, &format!("stack{s}.bottleneck"), c);
            for l in (0..self.depth).rev() {
                plan.push((format!("stack{s}.up{l}"), c, self.growth, 3));
                c = self.growth + skips[l];
            }
            plan.push((format!("stack{s}.head"), c, self.output_channels, 1));
            stack_in = c + self.output_channels;
        }
        plan
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Weights and biases alternate: tensor `2j` is conv `j`'s kernel and
/// `2j + 1` its bias, in [`NetworkConfig::conv_plan`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: NetworkConfig,
    pub tensors: Vec<ParamTensor>,
}

pub type Gradients = Vec<Vec<f64>>;

impl ModelParams {
    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    pub fn scaled(&self, factor: f64) -> ModelParams {
        let mut out = self.clone();
        for t in &mut out.tensors {
            t.data.iter_mut().for_each(|v| *v *= factor);
        }
        out
    }
}

/// He fan-in initialization for kernels, zero biases.
pub fn build(config: &NetworkConfig) -> Result<ModelParams> {
    config.validate()?;
    let mut r = rng::seeded(config.seed);
    let mut tensors = Vec::new();
    for (name, cin, cout, k) in config.conv_plan() {
        let fan_in = (cin * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        tensors.push(ParamTensor {
            name: format!("{name}.weight"),
            shape: vec![cout, cin, k, k],
            data: (0..cout * cin * k * k).map(|_| normal.sample(&mut r)).collect(),
        });
        tensors.push(ParamTensor {
            name: format!("{name}.bias"),
            shape: vec![cout],
            data: vec![0.0; cout],
        });
    }
    Ok(ModelParams {
        config: config.clone(),
        tensors,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Head of the first stack.
    pub intermediate: Tensor,
    /// Head of the last stack.
    pub final_maps: Tensor,
}

struct Forward<'p> {
    graph: Graph<'p>,
    intermediate: NodeId,
    final_head: NodeId,
}

fn run_forward<'p>(params: &'p ModelParams, image: &Tensor) -> Result<Forward<'p>> {
    let cfg = &params.config;
    if image.shape() != (1, cfg.input_side, cfg.input_side) {
        return Err(Error::Shape(format!(
            "input {:?}, expected (1, {side}, {side})",
            image.shape(),
            side = cfg.input_side
        )));
    }
    let mut g = Graph::new(params);
    let mut layer = 0;
    let mut next = || {
        layer += 1;
        layer - 1
    };
    let x = g.input(image.clone());
    let stem = g.conv(x, next());
    let mut x = g.relu(stem);
    for _ in 0..cfg.downsample.trailing_zeros() {
        x = g.pool(x);
    }

    let dense = |g: &mut Graph<'p>, next: &mut dyn FnMut() -> usize, input: NodeId| -> NodeId {
        let mut parts = vec![input];
        for _ in 0..cfg.block_layers {
            let cat = g.concat(&parts);
            let conv = g.conv(cat, next());
            parts.push(g.relu(conv));
        }
        g.concat(&parts)
    };

    let mut stack_in = x;
    let mut heads = Vec::new();
    for _ in 0..cfg.stacks {
        let mut h = stack_in;
        let mut skips = Vec::new();
        for _ in 0..cfg.depth {
            h = dense(&mut g, &mut next, h);
            skips.push(h);
            let t = g.conv(h, next());
            let t = g.relu(t);
            h = g.pool(t);
        }
        h = dense(&mut g, &mut next, h);
        for l in (0..cfg.depth).rev() {
            let up = g.upsample(h);
            let conv = g.conv(up, next());
            let act = g.relu(conv);
            h = g.concat(&[act, skips[l]]);
        }
        let head = g.conv(h, next());
        heads.push(head);
        stack_in = g.concat(&[h, head]);
    }
    Ok(Forward {
        graph: g,
        intermediate: heads[0],
        final_head: *heads.last().expect("at least one stack"),
    })
}

pub fn forward(params: &ModelParams, image: &Tensor) -> Result<ForwardOutput> {
    let f = run_forward(params, image)?;
    Ok(ForwardOutput {
        intermediate: f.graph.value(f.intermediate).clone(),
        final_maps: f.graph.value(f.final_head).clone(),
    })
}

fn check_target(output: &Tensor, target: &Tensor) -> Result<()> {
    if output.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "output {:?} vs target {:?}",
            output.shape(),
            target.shape()
        )));
    }
    Ok(())
}

/// Mean squared error of both heads against the same target, each averaged
/// over the element count of one stack and then summed.
pub fn loss(output: &ForwardOutput, target: &Tensor) -> Result<f64> {
    check_target(&output.final_maps, target)?;
    check_target(&output.intermediate, target)?;
    let n = target.len() as f64;
    let sq = |t: &Tensor| -> f64 {
        t.data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    };
    Ok((sq(&output.final_maps) + sq(&output.intermediate)) / n)
}

/// Loss and parameter gradients for one sample.
pub fn sample_gradients(params: &ModelParams, image: &Tensor, target: &Tensor) -> Result<(f64, Gradients)> {
    let f = run_forward(params, image)?;
    let fin = f.graph.value(f.final_head);
    let inter = f.graph.value(f.intermediate);
    check_target(fin, target)?;
    let n = target.len() as f64;
    let residual = |t: &Tensor| -> Tensor {
        let (c, h, w) = t.shape();
        let data = t.data().iter().zip(target.data()).map(|(a, b)| 2.0 * (a - b) / n).collect();
        Tensor::from_vec(c, h, w, data).expect("same shape")
    };
    let out = ForwardOutput {
        intermediate: inter.clone(),
        final_maps: fin.clone(),
    };
    let value = loss(&out, target)?;
    let seeds = vec![(f.final_head, residual(fin)), (f.intermediate, residual(inter))];
    Ok((value, f.graph.backward(seeds)))
}

/// Mean loss and gradients over a batch. Per-sample work runs in parallel;
/// the reduction happens in batch order so results do not depend on the
/// number of threads.
pub fn batch_gradients(params: &ModelParams, batch: &[(Tensor, Tensor)]) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let per_sample: Vec<(f64, Gradients)> = batch
        .par_iter()
        .map(|(x, y)| sample_gradients(params, x, y))
        .collect::<Result<_>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut grads: Gradients = params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
    for (l, g) in &per_sample {
        total += l;
        for (dst, src) in grads.iter_mut().zip(g) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    for g in &mut grads {
        g.iter_mut().for_each(|v| *v *= scale);
    }
    Ok((total * scale, grads))
}

/// ReLU sign pattern for one forward pass; exposed for numerical gradient
/// checks that must avoid kinks.
pub fn activation_pattern(params: &ModelParams, image: &Tensor) -> Result<Vec<bool>> {
    Ok(run_forward(params, image)?.graph.relu_pattern())
}

/// Decoded pose for a frame already at the network input size.
pub fn predict(params: &ModelParams, image: &Raster, spec: &MapSpec) -> Result<Pose> {
    Ok(predict_with_maps(params, image, spec)?.0)
}

pub fn predict_with_maps(params: &ModelParams, image: &Raster, spec: &MapSpec) -> Result<(Pose, ConfidenceStack)> {
    if spec.channels() != params.config.output_channels || spec.downsample != params.config.downsample {
        return Err(Error::Shape("map spec does not match the network outputs".into()));
    }
    let f = run_forward(params, &Tensor::from_raster(image))?;
    let maps = f.graph.into_value(f.final_head);
    let stack = ConfidenceStack::new(*spec, maps)?;
    Ok((heatmap::decode(&stack)?, stack))
}

/// Predicts on a frame of any size: it is resized to the input side and the
/// decoded coordinates are mapped back to the frame's pixel grid. The maps
/// stay in network output resolution.
pub fn predict_frame(params: &ModelParams, frame: &Raster, spec: &MapSpec) -> Result<(Pose, ConfidenceStack)> {
    let (input, sx, sy) = train::resize_for_input(frame, params.config.input_side);
    let (pose, maps) = predict_with_maps(params, &input, spec)?;
    let pose = pose.map_points(|k| {
        let mut k = *k;
        k.x = (k.x + 0.5) / sx - 0.5;
        k.y = (k.y + 0.5) / sy - 0.5;
        Some(k)
    });
    Ok((pose, maps))
}

pub fn predict_frames(params: &ModelParams, frames: &[Raster], spec: &MapSpec) -> Result<Vec<Pose>> {
    frames
        .par_iter()
        .map(|frame| Ok(predict_frame(params, frame, spec)?.0))
        .collect()
}

pub fn save_params(params: &ModelParams, spec: &MapSpec, skeleton_fingerprint: &str, path: &Path) -> Result<()> {
    save_checkpoint(
        &Checkpoint {
            params: params.clone(),
            map_spec: *spec,
            skeleton_fingerprint: skeleton_fingerprint.to_string(),
        },
        path,
    )
}

#[cfg(test)]
mod tests;
