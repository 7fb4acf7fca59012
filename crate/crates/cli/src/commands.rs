//! Subcommand bodies. Each returns the dataset root its run should be
//! logged under plus a metrics object.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use keypose_core::analysis::{self, OutlierQueue};
use keypose_core::augment::{self, AugmentConfig};
use keypose_core::dataset::{self, write_atomic, DirLock};
use keypose_core::network::{self, TrainConfig, TrainSample};
use keypose_core::sampler::{self, CenterInit, KMeansConfig};
use keypose_core::{DatasetManifest, MapSpec, NetworkConfig, Pose, Skeleton, SplitRole};
use log::info;
use serde_json::{json, Value};

use crate::args::*;
use crate::{data_err, default_in, CliError, CliResult};

pub const KEYFRAMES_FILE: &str = "keyframes.txt";
pub const CLUSTERS_FILE: &str = "clusters.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const THRESHOLDS_FILE: &str = "thresholds.csv";
pub const KEYPOINT_ERRORS_FILE: &str = "keypoint_errors.csv";
pub const OUTLIER_SCORES_FILE: &str = "outlier_scores.csv";
pub const PREVIEW_FILE: &str = "augment_preview.png";

pub struct Outcome {
    /// Dataset whose run log records this command; `None` for `serve`.
    pub root: Option<PathBuf>,
    pub metrics: Value,
}

pub fn execute(command: &Command) -> CliResult<Outcome> {
    match command {
        Command::Ingest(a) => ingest(a),
        Command::Sample(a) => sample(a),
        Command::AugmentPreview(a) => augment_preview(a),
        Command::Train(a) => train(a),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Outliers(a) => outliers(a),
        Command::Serve(a) => {
            crate::service::serve_blocking(a)?;
            Ok(Outcome {
                root: None,
                metrics: Value::Null,
            })
        }
    }
}

fn logged(root: &Path, metrics: Value) -> CliResult<Outcome> {
    Ok(Outcome {
        root: Some(root.to_path_buf()),
        metrics,
    })
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| data_err(dir, e))?;
    }
    Ok(write_atomic(path, text.as_bytes())?)
}

pub(crate) fn load_manifest(root: &Path) -> CliResult<DatasetManifest> {
    Ok(DatasetManifest::load(root)?)
}

fn ingest(a: &IngestArgs) -> CliResult<Outcome> {
    let src = required(&a.src, "src")?;
    let root = required(&a.root, "root")?;
    let skeleton = match &a.skeleton {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| data_err(path, e))?;
            Skeleton::parse(&text).map_err(|e| data_err(path, e))?
        }
        None => Skeleton::pig(),
    };
    std::fs::create_dir_all(root).map_err(|e| data_err(root, e))?;
    let manifest = dataset::ingest_frames(src, &a.pattern, skeleton, root)?;
    info!("ingested {} frames into {}", manifest.frames.len(), root.display());
    logged(root, json!({ "frames": manifest.frames.len() }))
}

fn sample(a: &SampleArgs) -> CliResult<Outcome> {
    let root = required(&a.root, "root")?;
    let manifest = load_manifest(root)?;
    let ids: Vec<u64> = manifest.frames.iter().map(|f| f.id).collect();
    let per_cluster = a.per_cluster.unwrap_or_else(|| sampler::default_per_cluster(ids.len(), a.k));
    let out_dir = a.out_dir.clone().unwrap_or_else(|| root.clone());

    let (keyframes, metrics) = if a.uniform {
        let keyframes = sampler::select_uniform(&ids, a.k * per_cluster);
        (keyframes, json!({ "method": "uniform" }))
    } else {
        let mut features = Vec::with_capacity(ids.len());
        for &id in &ids {
            features.push(sampler::featurize(id, &manifest.load_frame(root, id)?, a.thumb));
        }
        let config = KMeansConfig {
            k: a.k,
            batch_size: a.batch,
            reassignment_ratio: a.reassignment_ratio,
            tol: a.tol,
            max_iterations: a.iters,
            seed: a.seed,
            verbose: true,
            init: if a.uniform_init { CenterInit::Uniform } else { CenterInit::KMeansPlusPlus },
            full_batch: false,
        };
        let clustering = sampler::minibatch_kmeans(&features, &config)?;
        let mut csv = String::from("cluster_id,size,inertia_share\n");
        for (c, (size, share)) in clustering.report(&features).into_iter().enumerate() {
            csv.push_str(&format!("{c},{size},{share}\n"));
        }
        write_text(&out_dir.join(CLUSTERS_FILE), &csv)?;
        let keyframes = sampler::select_keyframes(&clustering, &features, per_cluster);
        info!(
            "k-means: {} iterations, inertia {:.6}",
            clustering.iterations, clustering.inertia
        );
        let metrics = json!({
            "method": "kmeans",
            "iterations": clustering.iterations,
            "inertia": clustering.inertia,
            "batch_inertia": clustering.iteration_log,
        });
        (keyframes, metrics)
    };
    let list: String = keyframes.iter().map(|id| format!("{id}\n")).collect();
    write_text(&out_dir.join(KEYFRAMES_FILE), &list)?;
    info!("selected {} keyframes", keyframes.len());
    let mut metrics = metrics;
    metrics["selected"] = json!(keyframes.len());
    logged(root, metrics)
}

fn augment_preview(a: &AugmentPreviewArgs) -> CliResult<Outcome> {
    let root = required(&a.root, "root")?;
    let manifest = load_manifest(root)?;
    let id = match a.frame {
        Some(id) => id,
        None => manifest
            .annotated_ids()
            .first()
            .copied()
            .or_else(|| manifest.frames.first().map(|f| f.id))
            .ok_or_else(|| CliError::Data("dataset has no frames".into()))?,
    };
    if a.rows == 0 || a.cols == 0 {
        return Err(CliError::Usage("--rows and --cols must be at least 1".into()));
    }
    let image = manifest.load_frame(root, id)?;
    let pose = manifest
        .pose(id)
        .cloned()
        .unwrap_or_else(|| Pose::missing(manifest.skeleton.len()));
    let config = AugmentConfig {
        seed: a.seed,
        ..AugmentConfig::default()
    };
    let perm = manifest.skeleton.swap_permutation();
    let samples = (0..a.rows * a.cols)
        .map(|i| augment::augment_frame(&config, &image, &pose, &perm, i as u64, id))
        .collect::<Result<Vec<_>, _>>()?;
    let sheet = augment::contact_sheet(&samples, a.cols);
    let out = default_in(root, &a.out, PREVIEW_FILE);
    sheet.save(&out).map_err(|e| data_err(&out, e))?;
    info!("wrote {}", out.display());
    logged(root, json!({ "frame": id, "samples": samples.len() }))
}

fn samples_for(manifest: &DatasetManifest, root: &Path, role: SplitRole) -> CliResult<Vec<TrainSample>> {
    manifest
        .ids_with_role(role)
        .into_iter()
        .map(|id| {
            Ok(TrainSample {
                frame_id: id,
                image: manifest.load_frame(root, id)?,
                pose: manifest.pose(id).cloned().ok_or(keypose_core::Error::UnknownFrame(id))?,
            })
        })
        .collect()
}

fn train(a: &TrainArgs) -> CliResult<Outcome> {
    let root = required(&a.root, "root")?;
    let (manifest, ()) = DatasetManifest::update(root, |m| m.split(a.validation_fraction, a.seed))?;
    let spec = MapSpec::for_skeleton(&manifest.skeleton)
        .with_sigma(a.sigma)
        .with_downsample(a.downsample);
    spec.validate()?;
    let net = NetworkConfig {
        input_side: a.input_side,
        stacks: a.stacks,
        depth: a.depth,
        block_layers: a.block_layers,
        growth: a.growth,
        seed: a.seed,
        ..NetworkConfig::for_maps(&spec)
    };
    let config = TrainConfig {
        batch_size: a.batch_size,
        max_epochs: a.epochs,
        learning_rate: a.learning_rate,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let augment = if a.no_augment {
        AugmentConfig::none()
    } else {
        AugmentConfig {
            seed: a.seed,
            ..AugmentConfig::default()
        }
    };
    let train_set = samples_for(&manifest, root, SplitRole::Train)?;
    let validation_set = samples_for(&manifest, root, SplitRole::Validation)?;
    info!(
        "training on {} frames, validating on {}",
        train_set.len(),
        validation_set.len()
    );
    let initial = network::build(&net)?;
    let (params, history) = network::train(
        initial,
        &train_set,
        &validation_set,
        &augment,
        &spec,
        &manifest.skeleton,
        &config,
    )?;
    let out = default_in(root, &a.out, CHECKPOINT_FILE);
    network::save_params(&params, &spec, &manifest.skeleton.fingerprint(), &out)?;
    write_text(&default_in(root, &a.history, HISTORY_FILE), &history.to_csv())?;
    info!(
        "stopped after {} epochs ({}), best epoch {}",
        history.epochs.len(),
        history.stop_reason,
        history.best_epoch
    );
    logged(
        root,
        json!({
            "train_frames": train_set.len(),
            "validation_frames": validation_set.len(),
            "parameters": params.parameter_count(),
            "stop_reason": history.stop_reason,
            "best_epoch": history.best_epoch,
            "epochs": history.epochs,
        }),
    )
}

fn predict(a: &PredictArgs) -> CliResult<Outcome> {
    let root = required(&a.root, "root")?;
    let manifest = load_manifest(root)?;
    let ckpt_path = default_in(root, &a.checkpoint, CHECKPOINT_FILE);
    let ckpt = network::load_checkpoint(&ckpt_path, &manifest.skeleton.fingerprint())?;
    let ids: Vec<u64> = match a.frames {
        FrameSelection::All => manifest.frames.iter().map(|f| f.id).collect(),
        FrameSelection::Annotated => manifest.annotated_ids(),
    };
    if let Some(dir) = &a.dump_maps {
        std::fs::create_dir_all(dir).map_err(|e| data_err(dir, e))?;
    }
    let mut poses = BTreeMap::new();
    for &id in &ids {
        let frame = manifest.load_frame(root, id)?;
        let (pose, maps) = network::predict_frame(&ckpt.params, &frame, &ckpt.map_spec)?;
        if let Some(dir) = &a.dump_maps {
            maps.save_png(&dir.join(format!("{id:06}.png")))?;
        }
        poses.insert(id, pose);
    }
    let out = default_in(root, &a.out, PREDICTIONS_FILE);
    write_text(&out, &dataset::poses_csv(&manifest.skeleton, &poses))?;
    let detected: usize = poses.values().map(Pose::present).sum();
    info!("predicted {} frames into {}", poses.len(), out.display());
    logged(root, json!({ "frames": poses.len(), "detected_keypoints": detected }))
}

fn read_predictions(manifest: &DatasetManifest, path: &Path) -> CliResult<BTreeMap<u64, Pose>> {
    let text = std::fs::read_to_string(path).map_err(|e| data_err(path, e))?;
    let poses = dataset::parse_poses_csv(&manifest.skeleton, &text).map_err(|e| data_err(path, e))?;
    if let Some(id) = poses.keys().find(|id| manifest.frame(**id).is_none()) {
        return Err(data_err(path, format!("unknown frame id {id}")));
    }
    Ok(poses)
}

fn evaluate(a: &EvaluateArgs) -> CliResult<Outcome> {
    let root = required(&a.root, "root")?;
    let manifest = load_manifest(root)?;
    let path = default_in(root, &a.predictions, PREDICTIONS_FILE);
    let predictions = read_predictions(&manifest, &path)?;
    let ids = manifest.annotated_ids();
    if ids.is_empty() {
        return Err(keypose_core::Error::NoAnnotatedFrames.into());
    }
    let mut preds = Vec::with_capacity(ids.len());
    let mut truth = Vec::with_capacity(ids.len());
    for id in &ids {
        let p = predictions
            .get(id)
            .ok_or_else(|| data_err(&path, format!("no prediction for annotated frame {id}")))?;
        preds.push(p.clone());
        truth.push(manifest.pose(*id).expect("annotated frames have poses").clone());
    }
    let report = analysis::evaluate(&preds, &truth, &manifest.skeleton, a.radius, &analysis::default_thresholds())?;
    let out_dir = a.out_dir.clone().unwrap_or_else(|| root.clone());
    write_text(&out_dir.join(THRESHOLDS_FILE), &report.thresholds_csv())?;
    write_text(&out_dir.join(KEYPOINT_ERRORS_FILE), &report.keypoints_csv())?;
    let rows: Vec<Value> = report
        .rows
        .iter()
        .map(|r| json!({ "threshold": r.threshold, "precision": r.precision, "recall": r.recall, "f_measure": r.f_measure }))
        .collect();
    logged(root, json!({ "frames": ids.len(), "radius": a.radius, "thresholds": rows }))
}

fn outliers(a: &OutliersArgs) -> CliResult<Outcome> {
    let root = required(&a.root, "root")?;
    let manifest = load_manifest(root)?;
    let path = default_in(root, &a.predictions, PREDICTIONS_FILE);
    let predictions = read_predictions(&manifest, &path)?;
    let mut frames: Vec<_> = manifest.frames.iter().filter(|f| predictions.contains_key(&f.id)).collect();
    frames.sort_by_key(|f| (f.source_index, f.id));
    if frames.len() < 2 {
        return Err(data_err(&path, "outlier mining needs predictions for at least 2 frames"));
    }
    let poses: Vec<Pose> = frames.iter().map(|f| predictions[&f.id].clone()).collect();
    let diagonal = (frames[0].width as f64).hypot(frames[0].height as f64);
    let scores = analysis::outlier_scores(&poses, diagonal, a.position_weight)?;
    let peaks = analysis::find_peaks(&scores, a.c, a.min_separation);
    let mut flagged_mask = vec![false; scores.len()];
    for &i in &peaks {
        flagged_mask[i] = true;
    }
    let mut csv = String::from("frame_id,score,flagged\n");
    for ((f, s), flag) in frames.iter().zip(&scores).zip(&flagged_mask) {
        csv.push_str(&format!("{},{},{}\n", f.id, s, u8::from(*flag)));
    }
    let out_dir = a.out_dir.clone().unwrap_or_else(|| root.clone());
    write_text(&out_dir.join(OUTLIER_SCORES_FILE), &csv)?;
    let queue = OutlierQueue {
        flagged: peaks.iter().map(|&i| frames[i].id).collect(),
        prominence_multiplier: a.c,
        min_separation: a.min_separation,
        position_weight: a.position_weight,
    };
    {
        let _lock = DirLock::exclusive(root)?;
        queue.save(root)?;
    }
    info!("flagged {} of {} frames", queue.flagged.len(), frames.len());
    logged(root, json!({ "frames": frames.len(), "flagged": queue.flagged }))
}
