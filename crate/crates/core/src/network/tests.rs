use std::collections::HashMap;

use proptest::prelude::*;
use rand::Rng as _;

use super::*;
use crate::augment::AugmentConfig;
use crate::skeleton::Skeleton;

fn tiny(stacks: usize, seed: u64) -> NetworkConfig {
    NetworkConfig {
        input_side: 16,
        stacks,
        depth: 1,
        block_layers: 2,
        growth: 2,
        stem_channels: 3,
        compression: 0.5,
        output_channels: 4,
        downsample: 2,
        seed,
    }
}

fn random_image(side: usize, seed: u64) -> Tensor {
    let mut r = rng::seeded(seed);
    Tensor::from_vec(1, side, side, (0..side * side).map(|_| r.random::<f64>()).collect()).unwrap()
}

fn with_random_biases(mut p: ModelParams, seed: u64) -> ModelParams {
    let mut r = rng::seeded(seed);
    for t in p.tensors.iter_mut().filter(|t| t.name.ends_with(".bias")) {
        t.data.iter_mut().for_each(|v| *v = r.random_range(-0.2..0.2));
    }
    p
}

// ---- straight-line reference ----

type Img = Vec<Vec<Vec<f64>>>;

fn to_img(t: &Tensor) -> Img {
    let (c, h, w) = t.shape();
    (0..c)
        .map(|ch| (0..h).map(|y| (0..w).map(|x| t.get(ch, y, x)).collect()).collect())
        .collect()
}

fn ref_conv(x: &Img, p: &HashMap<String, &ParamTensor>, name: &str) -> Img {
    let w = p[&format!("{name}.weight")];
    let b = p[&format!("{name}.bias")];
    let (cout, cin, k) = (w.shape[0], w.shape[1], w.shape[2]);
    assert_eq!(x.len(), cin);
    let (h, wd) = (x[0].len() as i64, x[0][0].len() as i64);
    let r = (k / 2) as i64;
    (0..cout)
        .map(|o| {
            (0..h)
                .map(|y| {
                    (0..wd)
                        .map(|xx| {
                            let mut acc = b.data[o];
                            for (i, plane) in x.iter().enumerate() {
                                for ky in 0..k as i64 {
                                    for kx in 0..k as i64 {
                                        let (sy, sx) = (y + ky - r, xx + kx - r);
                                        if sy >= 0 && sy < h && sx >= 0 && sx < wd {
                                            let wi = ((o * cin + i) * k + ky as usize) * k + kx as usize;
                                            acc += w.data[wi] * plane[sy as usize][sx as usize];
                                        }
                                    }
                                }
                            }
                            acc
                        })
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn ref_relu(x: Img) -> Img {
    x.into_iter()
        .map(|p| p.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect())
        .collect()
}

fn ref_pool(x: &Img) -> Img {
    x.iter()
        .map(|p| {
            (0..p.len() / 2)
                .map(|y| {
                    (0..p[0].len() / 2)
                        .map(|xx| (p[2 * y][2 * xx] + p[2 * y][2 * xx + 1] + p[2 * y + 1][2 * xx] + p[2 * y + 1][2 * xx + 1]) / 4.0)
                        .collect()
                })
                .collect()
        })
        .collect()
}

fn ref_up(x: &Img) -> Img {
    x.iter()
        .map(|p| {
            (0..p.len() * 2)
                .map(|y| (0..p[0].len() * 2).map(|xx| p[y / 2][xx / 2]).collect())
                .collect()
        })
        .collect()
}

fn cat(a: &Img, b: &Img) -> Img {
    a.iter().chain(b.iter()).cloned().collect()
}

fn ref_dense(x: &Img, p: &HashMap<String, &ParamTensor>, prefix: &str, layers: usize) -> Img {
    let mut all = x.clone();
    for j in 0..layers {
        let y = ref_relu(ref_conv(&all, p, &format!("{prefix}.dense{j}")));
        all = cat(&all, &y);
    }
    all
}

fn reference_forward(params: &ModelParams, image: &Tensor) -> (Img, Img) {
    let cfg = &params.config;
    let p: HashMap<String, &ParamTensor> = params.tensors.iter().map(|t| (t.name.clone(), t)).collect();
    let mut x = ref_relu(ref_conv(&to_img(image), &p, "stem"));
    let mut d = cfg.downsample;
    while d > 1 {
        x = ref_pool(&x);
        d /= 2;
    }
    let mut heads = Vec::new();
    for s in 0..cfg.stacks {
        let mut skips = Vec::new();
        for l in 0..cfg.depth {
            x = ref_dense(&x, &p, &format!("stack{s}.down{l}"), cfg.block_layers);
            skips.push(x.clone());
            x = ref_pool(&ref_relu(ref_conv(&x, &p, &format!("stack{s}.down{l}.transition"))));
        }
        x = ref_dense(&x, &p, &format!("stack{s}.bottleneck"), cfg.block_layers);
        for l in (0..cfg.depth).rev() {
            let y = ref_relu(ref_conv(&ref_up(&x), &p, &format!("stack{s}.up{l}")));
            x = cat(&y, &skips[l]);
        }
        let head = ref_conv(&x, &p, &format!("stack{s}.head"));
        x = cat(&x, &head);
        heads.push(head);
    }
    (heads[0].clone(), heads.last().unwrap().clone())
}

#[test]
fn forward_matches_reference() {
    for (stacks, seed) in [(1, 1), (2, 2)] {
        let params = with_random_biases(build(&tiny(stacks, seed)).unwrap(), seed + 10);
        let image = random_image(16, seed);
        let out = forward(&params, &image).unwrap();
        let (inter, fin) = reference_forward(&params, &image);
        for (t, r) in [(&out.intermediate, &inter), (&out.final_maps, &fin)] {
            let flat: Vec<f64> = r.iter().flatten().flatten().cloned().collect();
            assert_eq!(t.len(), flat.len());
            for (a, b) in t.data().iter().zip(&flat) {
                assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
            }
        }
    }
}

#[test]
fn parameter_count_closed_form() {
    let spec = MapSpec::for_skeleton(&Skeleton::pig());
    let cfg = NetworkConfig::for_maps(&spec);
    let p = build(&cfg).unwrap();
    let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
    let (g, c17) = (8, 17);
    // stem 1 -> 8
    let mut total = conv(1, 8, 3);
    // stack 1: 8 -> dense 24 -> 12 -> dense 28 -> 14 -> bottleneck 30
    let stack = |input: usize| -> (usize, usize) {
        let mut t = 0;
        let d0 = [input, input + g];
        t += conv(d0[0], g, 3) + conv(d0[1], g, 3);
        let s0 = input + 2 * g;
        let t0 = s0 / 2;
        t += conv(s0, t0, 1);
        t += conv(t0, g, 3) + conv(t0 + g, g, 3);
        let s1 = t0 + 2 * g;
        let t1 = s1 / 2;
        t += conv(s1, t1, 1);
        t += conv(t1, g, 3) + conv(t1 + g, g, 3);
        let bott = t1 + 2 * g;
        t += conv(bott, g, 3);
        t += conv(g + s1, g, 3);
        let feats = g + s0;
        t += conv(feats, c17, 1);
        (t, feats)
    };
    let (t1, f1) = stack(8);
    let (t2, _) = stack(f1 + c17);
    total += t1 + t2;
    assert_eq!(p.parameter_count(), total);
    let heads: Vec<_> = p.tensors.iter().filter(|t| t.name.ends_with("head.weight")).collect();
    assert_eq!(heads.len(), 2);
    assert!(heads.iter().all(|h| h.shape[0] == 17));
}

#[test]
fn build_is_deterministic_and_he_scaled() {
    let cfg = tiny(2, 7);
    let a = build(&cfg).unwrap();
    assert_eq!(a, build(&cfg).unwrap());
    assert_ne!(a, build(&tiny(2, 8)).unwrap());
    assert!(a.tensors.iter().filter(|t| t.name.ends_with(".bias")).all(|t| t.data.iter().all(|&v| v == 0.0)));
    let big = build(&NetworkConfig::for_maps(&MapSpec::for_skeleton(&Skeleton::pig()))).unwrap();
    let w = big.tensors.iter().find(|t| t.name == "stack1.down0.dense0.weight").unwrap();
    let fan_in = (w.shape[1] * 9) as f64;
    let var = w.data.iter().map(|v| v * v).sum::<f64>() / w.data.len() as f64;
    assert!((var * fan_in / 2.0 - 1.0).abs() < 0.15);
}

#[test]
fn invalid_configs_rejected() {
    let mut c = tiny(1, 0);
    c.input_side = 18;
    assert!(build(&c).is_err());
    c = tiny(1, 0);
    c.compression = 0.0;
    assert!(build(&c).is_err());
    c = tiny(0, 0);
    assert!(build(&c).is_err());
    let p = build(&tiny(1, 0)).unwrap();
    assert!(forward(&p, &random_image(8, 0)).is_err());
}

#[test]
fn single_stack_heads_coincide() {
    let p = with_random_biases(build(&tiny(1, 3)).unwrap(), 1);
    let out = forward(&p, &random_image(16, 3)).unwrap();
    assert_eq!(out.intermediate, out.final_maps);
    let target = Tensor::zeros(4, 8, 8);
    let mse: f64 = out.final_maps.data().iter().map(|v| v * v).sum::<f64>() / target.len() as f64;
    assert!((loss(&out, &target).unwrap() - 2.0 * mse).abs() < 1e-12);
}

#[test]
fn zero_weights_give_zero_output() {
    let p = build(&tiny(2, 1)).unwrap().scaled(0.0);
    let out = forward(&p, &random_image(16, 1)).unwrap();
    assert!(out.final_maps.data().iter().all(|&v| v == 0.0));
    assert!(out.intermediate.data().iter().all(|&v| v == 0.0));
}

#[test]
fn loss_examples() {
    let mut r = rng::seeded(5);
    let mut rand_t = || Tensor::from_vec(3, 4, 5, (0..60).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let y = rand_t();
    let same = ForwardOutput {
        intermediate: y.clone(),
        final_maps: y.clone(),
    };
    assert_eq!(loss(&same, &y).unwrap(), 0.0);
    let mut plus = y.clone();
    plus.data_mut().iter_mut().for_each(|v| *v += 1.0);
    let shifted = ForwardOutput {
        intermediate: y.clone(),
        final_maps: plus,
    };
    assert!((loss(&shifted, &y).unwrap() - 1.0).abs() < 1e-12);
    let (a, b) = (rand_t(), rand_t());
    let out = ForwardOutput {
        intermediate: a.clone(),
        final_maps: b.clone(),
    };
    let mut brute = 0.0;
    for c in 0..3 {
        for i in 0..4 {
            for j in 0..5 {
                brute += (b.get(c, i, j) - y.get(c, i, j)).powi(2) + (a.get(c, i, j) - y.get(c, i, j)).powi(2);
            }
        }
    }
    assert!((loss(&out, &y).unwrap() - brute / 60.0).abs() < 1e-12);
    assert!(loss(&out, &Tensor::zeros(3, 4, 4)).is_err());
}

#[test]
fn zero_everything_gives_zero_gradients() {
    let p = build(&tiny(2, 0)).unwrap().scaled(0.0);
    let batch = vec![(Tensor::zeros(1, 16, 16), Tensor::zeros(4, 8, 8))];
    let (l, g) = batch_gradients(&p, &batch).unwrap();
    assert_eq!(l, 0.0);
    assert!(g.iter().flatten().all(|&v| v == 0.0));
}

#[test]
fn duplicated_batch_has_same_gradients() {
    let p = with_random_biases(build(&tiny(2, 4)).unwrap(), 2);
    let sample = (random_image(16, 1), {
        let mut t = Tensor::zeros(4, 8, 8);
        t.set(1, 3, 4, 1.0);
        t
    });
    let other = (random_image(16, 2), Tensor::zeros(4, 8, 8));
    let (l1, g1) = batch_gradients(&p, &[sample.clone(), other.clone()]).unwrap();
    let (l2, g2) = batch_gradients(&p, &[sample.clone(), other.clone(), sample.clone(), other.clone()]).unwrap();
    let (l3, g3) = batch_gradients(&p, &[other, sample]).unwrap();
    assert!((l1 - l2).abs() < 1e-14 && (l1 - l3).abs() < 1e-14);
    for ((a, b), c) in g1.iter().flatten().zip(g2.iter().flatten()).zip(g3.iter().flatten()) {
        assert!((a - b).abs() <= 1e-14 * a.abs().max(1e-3));
        assert!((a - c).abs() <= 1e-14 * a.abs().max(1e-3));
    }
}

/// Central differences for every parameter; skips coordinates where the
/// perturbation flips a ReLU (the loss is not differentiable there).
fn finite_difference_check(params: &ModelParams, image: &Tensor, target: &Tensor) -> (usize, usize) {
    let (_, grads) = sample_gradients(params, image, target).unwrap();
    let base_pattern = activation_pattern(params, image).unwrap();
    let h = 1e-5;
    let mut checked = 0;
    let mut skipped = 0;
    for (ti, t) in params.tensors.iter().enumerate() {
        for i in 0..t.data.len() {
            let eval = |delta: f64| {
                let mut p = params.clone();
                p.tensors[ti].data[i] += delta;
                let out = forward(&p, image).unwrap();
                (loss(&out, target).unwrap(), activation_pattern(&p, image).unwrap())
            };
            let (lp, pp) = eval(h);
            let (lm, pm) = eval(-h);
            if pp != base_pattern || pm != base_pattern {
                skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * h);
            let analytic = grads[ti][i];
            let err = (numeric - analytic).abs();
            assert!(
                err <= 1e-8 || err <= 1e-4 * numeric.abs().max(analytic.abs()),
                "{}[{i}]: analytic {analytic} numeric {numeric}",
                t.name
            );
            checked += 1;
        }
    }
    (checked, skipped)
}

#[test]
fn gradients_match_finite_differences() {
    let params = with_random_biases(build(&tiny(2, 21)).unwrap(), 22);
    let image = random_image(16, 23);
    let mut target = Tensor::zeros(4, 8, 8);
    target.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = ((i * 7) % 11) as f64 / 11.0);
    let (checked, skipped) = finite_difference_check(&params, &image, &target);
    assert!(checked > 0 && skipped * 20 < checked, "checked {checked} skipped {skipped}");
}

#[test]
fn predict_shapes_and_floor() {
    let sk = Skeleton::pig();
    let spec = MapSpec::for_skeleton(&sk);
    let mut cfg = NetworkConfig::for_maps(&spec);
    cfg.input_side = 32;
    cfg.depth = 1;
    let p = build(&cfg).unwrap();
    let img = Raster::from_fn(32, 32, |x, y| ((x + y) % 5) as f64 / 5.0);
    assert_eq!(predict(&p, &img, &spec).unwrap().len(), 9);
    let quiet = p.scaled(1e-3);
    assert_eq!(predict(&quiet, &img, &spec).unwrap().present(), 0);
    // other frame sizes go through the resizing path
    let big = Raster::from_fn(64, 48, |x, _| x as f64 / 64.0);
    let poses = predict_frames(&p, &[big], &spec).unwrap();
    assert_eq!(poses[0].len(), 9);
}

#[test]
fn checkpoint_round_trip_and_skeleton_guard() {
    let dir = tempfile::tempdir().unwrap();
    let sk = Skeleton::pig();
    let spec = MapSpec::for_skeleton(&sk);
    let mut cfg = NetworkConfig::for_maps(&spec);
    cfg.input_side = 32;
    cfg.depth = 1;
    let p = with_random_biases(build(&cfg).unwrap(), 9);
    let path = dir.path().join("model.ckpt");
    save_params(&p, &spec, &sk.fingerprint(), &path).unwrap();
    let first = std::fs::read(&path).unwrap();
    save_params(&p, &spec, &sk.fingerprint(), &path).unwrap();
    assert_eq!(first, std::fs::read(&path).unwrap());
    assert_eq!(&first[..8], &CHECKPOINT_MAGIC);
    let back = load_checkpoint(&path, &sk.fingerprint()).unwrap();
    assert_eq!(back.params, p);
    assert_eq!(back.map_spec, spec);
    let other = Skeleton::parse("name,parent,swap\na,,\nb,a,\n").unwrap();
    assert!(matches!(load_checkpoint(&path, &other.fingerprint()), Err(Error::Checkpoint(_))));
    std::fs::write(&path, &first[..first.len() - 3]).unwrap();
    assert!(load_checkpoint(&path, &sk.fingerprint()).is_err());
    std::fs::write(&path, b"garbage").unwrap();
    assert!(load_checkpoint(&path, &sk.fingerprint()).is_err());
}

fn single_stack_constant_run(max_epochs: usize) -> TrainHistory {
    let sk = Skeleton::pig();
    let spec = MapSpec::for_skeleton(&sk);
    let mut cfg = NetworkConfig::for_maps(&spec);
    cfg.input_side = 16;
    cfg.depth = 1;
    cfg.stacks = 1;
    let frames = vec![TrainSample {
        frame_id: 0,
        image: Raster::new(16, 16),
        pose: Pose::missing(9),
    }];
    let tc = TrainConfig {
        max_epochs,
        ..TrainConfig::default()
    };
    train(build(&cfg).unwrap(), &frames, &[], &AugmentConfig::none(), &spec, &sk, &tc)
        .unwrap()
        .1
}

#[test]
fn constant_loss_schedule() {
    let h = single_stack_constant_run(400);
    assert!(h.epochs.iter().all(|e| e.train_loss == 0.0));
    assert_eq!(h.epochs[19].learning_rate, 1e-3);
    assert_eq!(h.epochs[20].learning_rate, 1e-3 * 0.2);
    assert_eq!(h.epochs[40].learning_rate, 1e-3 * 0.2 * 0.2);
    assert_eq!(h.stop_reason, StopReason::EarlyStop);
    assert_eq!(h.epochs.len(), 101);
    assert_eq!(h.best_epoch, 1);
    assert!(h.epochs.windows(2).all(|w| w[1].learning_rate <= w[0].learning_rate));
    let short = single_stack_constant_run(10);
    assert_eq!(short.stop_reason, StopReason::MaxEpochs);
    let csv = short.to_csv();
    assert!(csv.starts_with("epoch,train_loss,val_loss,lr\n1,0,,0.001\n"));
}

#[test]
fn training_requires_frames() {
    let sk = Skeleton::pig();
    let spec = MapSpec::for_skeleton(&sk);
    let mut cfg = NetworkConfig::for_maps(&spec);
    cfg.input_side = 16;
    cfg.depth = 1;
    let r = train(build(&cfg).unwrap(), &[], &[], &AugmentConfig::none(), &spec, &sk, &TrainConfig::default());
    assert!(matches!(r, Err(Error::NoAnnotatedFrames)));
}

#[test]
fn fit_frame_rescales_coordinates() {
    let img = Raster::new(64, 32);
    let pose = Pose::new(vec![Some(crate::pose::Keypoint::annotated(-0.5, 31.5))]);
    let (small, p) = fit_frame(&img, &pose, 16);
    assert_eq!((small.width(), small.height()), (16, 16));
    let k = p.get(0).unwrap();
    assert_eq!((k.x, k.y), (-0.5, 15.5));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn output_side_is_input_over_downsample(
        depth in 1usize..3,
        d in prop::sample::select(vec![1usize, 2, 4]),
        mult in 1usize..3,
        stacks in 1usize..3,
    ) {
        let side = (d << depth) * mult;
        let cfg = NetworkConfig {
            input_side: side,
            stacks,
            depth,
            block_layers: 1,
            growth: 2,
            stem_channels: 2,
            compression: 0.5,
            output_channels: 3,
            downsample: d,
            seed: 0,
        };
        let p = build(&cfg).unwrap();
        let out = forward(&p, &random_image(side, 1)).unwrap();
        prop_assert_eq!(out.final_maps.shape(), (3, side / d, side / d));
        prop_assert_eq!(cfg.output_side(), side / d);
    }
}
