//! Shared fixtures for the benchmarks.

use keypose_core::heatmap::MapSpec;
use keypose_core::network::{self, TrainSample};
use keypose_core::sampler::{featurize, FrameFeature};
use keypose_core::{synthetic, ModelParams, NetworkConfig, Skeleton, Tensor};

/// Default-sized network for the pig skeleton.
pub fn default_model() -> (ModelParams, MapSpec, Skeleton) {
    let skeleton = Skeleton::pig();
    let spec = MapSpec::for_skeleton(&skeleton);
    let params = network::build(&NetworkConfig::for_maps(&spec)).expect("default config is valid");
    (params, spec, skeleton)
}

pub fn pig_samples(n: u64, side: usize) -> Vec<TrainSample> {
    (0..n)
        .map(|i| {
            let (image, pose) = synthetic::pig_frame(side, i);
            TrainSample { frame_id: i, image, pose }
        })
        .collect()
}

pub fn template_features(n: usize, thumb: usize) -> Vec<FrameFeature> {
    let (frames, _) = synthetic::planted_templates(n, 100, 64, 0.05, 1);
    frames.iter().enumerate().map(|(i, f)| featurize(i as u64, f, thumb)).collect()
}

pub fn ramp(channels: usize, side: usize) -> Tensor {
    let data = (0..channels * side * side).map(|i| (i % 17) as f64 / 17.0).collect();
    Tensor::from_vec(channels, side, side, data).expect("sizes agree")
}
