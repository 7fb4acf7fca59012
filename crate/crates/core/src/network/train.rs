use std::fmt;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::{Adam, EarlyStopping, PlateauSchedule};
use super::{batch_gradients, forward, loss, ModelParams};
use crate::augment::{augment_frame, AugmentConfig};
use crate::error::{Error, Result};
use crate::heatmap::{encode, MapSpec};
use crate::pose::{Keypoint, Pose};
use crate::raster::Raster;
use crate::rng;
use crate::skeleton::Skeleton;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub min_delta: f64,
    pub early_stop_patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            max_epochs: 400,
            learning_rate: 1e-3,
            plateau_factor: 0.2,
            plateau_patience: 20,
            min_delta: 0.0,
            early_stop_patience: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau factor must lie in (0, 1)");
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(self.learning_rate > 0.0) || self.min_delta < 0.0 {
            return bad("learning rate must be positive and min delta non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::EarlyStop => "early_stop",
            StopReason::MaxEpochs => "max_epochs",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    /// Learning rate after this epoch's schedule update.
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub stop_reason: StopReason,
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,lr\n");
        for r in &self.epochs {
            let val = r.val_loss.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, val, r.learning_rate));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub frame_id: u64,
    pub image: Raster,
    pub pose: Pose,
}

/// Bilinear resize to a square side; returns the per-axis scale factors.
pub(crate) fn resize_for_input(frame: &Raster, side: usize) -> (Raster, f64, f64) {
    let sx = side as f64 / frame.width() as f64;
    let sy = side as f64 / frame.height() as f64;
    (frame.resize(side, side), sx, sy)
}

/// Resizes a frame to the network input and moves its keypoints along
/// (pixel-center convention: `x' = (x + 0.5) s - 0.5`).
pub fn fit_frame(frame: &Raster, pose: &Pose, side: usize) -> (Raster, Pose) {
    let (img, sx, sy) = resize_for_input(frame, side);
    let pose = pose.map_points(|k| Some(Keypoint::new((k.x + 0.5) * sx - 0.5, (k.y + 0.5) * sy - 0.5, k.score)));
    (img, pose)
}

struct Prepared<'a> {
    spec: &'a MapSpec,
    skeleton: &'a Skeleton,
    augment: &'a AugmentConfig,
    perm: Vec<usize>,
    side: usize,
}

impl Prepared<'_> {
    fn target(&self, pose: &Pose) -> Result<Tensor> {
        Ok(encode(pose, self.side, self.side, self.spec, self.skeleton)?.maps)
    }

    fn plain(&self, s: &TrainSample) -> Result<(Tensor, Tensor)> {
        let (img, pose) = fit_frame(&s.image, &s.pose, self.side);
        Ok((Tensor::from_raster(&img), self.target(&pose)?))
    }

    fn augmented(&self, s: &TrainSample, epoch: usize) -> Result<(Tensor, Tensor)> {
        let (img, pose) = fit_frame(&s.image, &s.pose, self.side);
        let (img, pose) = augment_frame(self.augment, &img, &pose, &self.perm, epoch as u64, s.frame_id)?;
        Ok((Tensor::from_raster(&img), self.target(&pose)?))
    }
}

/// Trains with Adam, plateau learning-rate decay and early stopping on the
/// validation loss (training loss when there is no validation data), and
/// returns the parameters from the best monitored epoch.
pub fn train(
    initial: ModelParams,
    train_set: &[TrainSample],
    validation_set: &[TrainSample],
    augment: &AugmentConfig,
    spec: &MapSpec,
    skeleton: &Skeleton,
    config: &TrainConfig,
) -> Result<(ModelParams, TrainHistory)> {
    config.validate()?;
    augment.validate()?;
    if train_set.is_empty() {
        return Err(Error::NoAnnotatedFrames);
    }
    if initial.config.output_channels != spec.channels() || initial.config.downsample != spec.downsample {
        return Err(Error::Shape("map spec does not match the network outputs".into()));
    }
    let prep = Prepared {
        spec,
        skeleton,
        augment,
        perm: skeleton.swap_permutation(),
        side: initial.config.input_side,
    };
    let validation: Vec<(Tensor, Tensor)> = validation_set
        .par_iter()
        .map(|s| prep.plain(s))
        .collect::<Result<_>>()?;

    let mut params = initial;
    let mut adam = Adam::new(&params, config.learning_rate);
    let mut plateau = PlateauSchedule::new(config.plateau_factor, config.plateau_patience, config.min_delta);
    let mut early = EarlyStopping::new(config.early_stop_patience, config.min_delta);
    let mut best = (params.clone(), 0usize);
    let mut epochs = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=config.max_epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng::stream(config.seed, &[epoch as u64]));
        let mut weighted = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(Tensor, Tensor)> = chunk
                .par_iter()
                .map(|&i| prep.augmented(&train_set[i], epoch))
                .collect::<Result<_>>()?;
            let (l, grads) = batch_gradients(&params, &batch)?;
            adam.update(&mut params, &grads);
            weighted += l * chunk.len() as f64;
        }
        let train_loss = weighted / train_set.len() as f64;
        let val_loss = if validation.is_empty() {
            None
        } else {
            let losses: Vec<f64> = validation
                .par_iter()
                .map(|(x, y)| loss(&forward(&params, x)?, y))
                .collect::<Result<_>>()?;
            Some(losses.iter().sum::<f64>() / losses.len() as f64)
        };
        let monitored = val_loss.unwrap_or(train_loss);
        adam.learning_rate = plateau.observe(monitored, adam.learning_rate);
        let (improved, stop) = early.observe(monitored);
        if improved {
            best = (params.clone(), epoch);
        }
        log::info!(
            "epoch {epoch}: train_loss {train_loss:.6} val_loss {} lr {:e}",
            val_loss.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into()),
            adam.learning_rate
        );
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            learning_rate: adam.learning_rate,
        });
        if stop {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }
    let (best_params, best_epoch) = best;
    let params = if best_epoch == 0 { params } else { best_params };
    Ok((
        params,
        TrainHistory {
            epochs,
            stop_reason,
            best_epoch,
        },
    ))
}
