//! Detection metrics over a score-threshold sweep, and outlier mining from
//! frame-to-frame changes in predicted poses.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::write_atomic;
use crate::error::{Error, Result};
use crate::pose::Pose;
use crate::skeleton::Skeleton;

pub const DEFAULT_MATCH_RADIUS: f64 = 10.0;
pub const DEFAULT_PROMINENCE: f64 = 3.0;
pub const DEFAULT_MIN_SEPARATION: usize = 5;
pub const DEFAULT_POSITION_WEIGHT: f64 = 1.0;
pub const OUTLIERS_FILE: &str = "outliers.json";

/// Thresholds 0.1, 0.2, ..., 0.9.
pub fn default_thresholds() -> Vec<f64> {
    (1..=9).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub threshold: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointError {
    pub name: String,
    /// Frames where both prediction and ground truth have the keypoint.
    pub matched: usize,
    pub mean_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub radius: f64,
    pub rows: Vec<ThresholdRow>,
    pub keypoints: Vec<KeypointError>,
}

impl MatchReport {
    pub fn thresholds_csv(&self) -> String {
        let mut out = String::from("threshold,precision,recall,f_measure\n");
        for r in &self.rows {
            out.push_str(&format!("{:.2},{},{},{}\n", r.threshold, r.precision, r.recall, r.f_measure));
        }
        out
    }

    pub fn keypoints_csv(&self) -> String {
        let mut out = String::from("keypoint,matched,mean_error\n");
        for k in &self.keypoints {
            let e = k.mean_error.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{}\n", k.name, k.matched, e));
        }
        out
    }
}

/// Precision, recall and F-measure with the empty-set conventions:
/// precision is 1 without detections, recall is 1 without ground truth, and
/// F is 0 when both are 0.
pub fn rates(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f)
}

/// A prediction scoring at least the threshold is a detection; it is a true
/// positive when the keypoint is annotated within `radius` pixels.
pub fn evaluate(
    predictions: &[Pose],
    ground_truth: &[Pose],
    skeleton: &Skeleton,
    radius: f64,
    thresholds: &[f64],
) -> Result<MatchReport> {
    if predictions.len() != ground_truth.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} ground truth frames",
            predictions.len(),
            ground_truth.len()
        )));
    }
    let k = skeleton.len();
    for p in predictions.iter().chain(ground_truth) {
        if p.len() != k {
            return Err(Error::PoseRows {
                expected: k,
                found: p.len(),
            });
        }
    }
    let rows = thresholds
        .iter()
        .map(|&t| {
            let (mut tp, mut fp, mut fn_) = (0, 0, 0);
            for (pred, truth) in predictions.iter().zip(ground_truth) {
                for (p, g) in pred.rows().iter().zip(truth.rows()) {
                    let detected = p.filter(|p| p.score >= t);
                    match (detected, g) {
                        (Some(p), Some(g)) if p.distance(g) <= radius => tp += 1,
                        (Some(_), _) => fp += 1,
                        (None, Some(_)) => fn_ += 1,
                        (None, None) => {}
                    }
                }
            }
            let (precision, recall, f_measure) = rates(tp, fp, fn_);
            ThresholdRow {
                threshold: t,
                true_positives: tp,
                false_positives: fp,
                false_negatives: fn_,
                precision,
                recall,
                f_measure,
            }
        })
        .collect();
    let keypoints = (0..k)
        .map(|i| {
            let errors: Vec<f64> = predictions
                .iter()
                .zip(ground_truth)
                .filter_map(|(p, g)| Some(p.get(i)?.distance(g.get(i)?)))
                .collect();
            KeypointError {
                name: skeleton.name(i).to_string(),
                matched: errors.len(),
                mean_error: (!errors.is_empty()).then(|| errors.iter().sum::<f64>() / errors.len() as f64),
            }
        })
        .collect();
    Ok(MatchReport { radius, rows, keypoints })
}

/// Per-frame change score: the largest, over keypoints, of the confidence
/// change plus `position_weight` times the displacement over the frame
/// diagonal. A keypoint missing on either side counts with confidence 0
/// and no displacement. The first frame scores 0.
pub fn outlier_scores(poses: &[Pose], diagonal: f64, position_weight: f64) -> Result<Vec<f64>> {
    if poses.is_empty() {
        return Err(Error::InvalidArgument("empty pose sequence".into()));
    }
    if !(diagonal > 0.0) {
        return Err(Error::InvalidArgument("frame diagonal must be positive".into()));
    }
    let mut scores = vec![0.0];
    for pair in poses.windows(2) {
        let (prev, cur) = (&pair[0], &pair[1]);
        if prev.len() != cur.len() {
            return Err(Error::PoseRows {
                expected: prev.len(),
                found: cur.len(),
            });
        }
        let s = prev
            .rows()
            .iter()
            .zip(cur.rows())
            .map(|(a, b)| {
                let conf = |k: &Option<crate::pose::Keypoint>| k.map_or(0.0, |k| k.score);
                let mut term = (conf(b) - conf(a)).abs();
                if let (Some(a), Some(b)) = (a, b) {
                    term += position_weight * a.distance(b) / diagonal;
                }
                term
            })
            .fold(0.0, f64::max);
        scores.push(s);
    }
    Ok(scores)
}

/// Indices of strict local maxima (a flat top counts once, at its left
/// end; runs touching either end never count) exceeding
/// `mean + c * stddev`, thinned greedily so that kept peaks are at least
/// `min_separation` apart, larger values first and ties to the lower index.
pub fn find_peaks(series: &[f64], prominence_multiplier: f64, min_separation: usize) -> Vec<usize> {
    let n = series.len();
    if n < 3 {
        return Vec::new();
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let var = series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let threshold = mean + prominence_multiplier * var.sqrt();

    let mut candidates = Vec::new();
    let mut start = 0;
    while start < n {
        let mut end = start;
        while end + 1 < n && series[end + 1] == series[start] {
            end += 1;
        }
        let v = series[start];
        if start > 0 && end + 1 < n && series[start - 1] < v && series[end + 1] < v && v > threshold {
            candidates.push(start);
        }
        start = end + 1;
    }

    candidates.sort_by(|&a, &b| series[b].total_cmp(&series[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for c in candidates {
        if kept.iter().all(|&k| k.abs_diff(c) >= min_separation) {
            kept.push(c);
        }
    }
    kept.sort_unstable();
    kept
}

/// Frames queued for human review, with the detector settings that chose
/// them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutlierQueue {
    pub flagged: Vec<u64>,
    pub prominence_multiplier: f64,
    pub min_separation: usize,
    pub position_weight: f64,
}

impl OutlierQueue {
    pub fn save(&self, root: &Path) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        write_atomic(&root.join(OUTLIERS_FILE), json.as_bytes())
    }

    /// The stored queue, or `None` when no outlier run has happened yet.
    pub fn load(root: &Path) -> Result<Option<OutlierQueue>> {
        let path = root.join(OUTLIERS_FILE);
        match std::fs::read(&path) {
            Ok(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::Keypoint;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng as _;

    fn random_instance(r: &mut crate::rng::Rng, frames: usize) -> (Vec<Pose>, Vec<Pose>) {
        let mut preds = Vec::new();
        let mut truth = Vec::new();
        for _ in 0..frames {
            let mut p = Vec::new();
            let mut g = Vec::new();
            for _ in 0..9 {
                let gt = r.random_bool(0.8).then(|| Keypoint::annotated(r.random_range(0.0..96.0), r.random_range(0.0..96.0)));
                g.push(gt);
                let pred = if r.random_bool(0.85) {
                    let (bx, by) = gt.map_or((48.0, 48.0), |k| (k.x, k.y));
                    Some(Keypoint::new(
                        bx + r.random_range(-15.0..15.0),
                        by + r.random_range(-15.0..15.0),
                        r.random::<f64>(),
                    ))
                } else {
                    None
                };
                p.push(pred);
            }
            preds.push(Pose::new(p));
            truth.push(Pose::new(g));
        }
        (preds, truth)
    }

    fn brute_force(preds: &[Pose], truth: &[Pose], r: f64, t: f64) -> (usize, usize, usize) {
        let mut counts = (0, 0, 0);
        for f in 0..preds.len() {
            for k in 0..9 {
                let p = preds[f].get(k);
                let g = truth[f].get(k);
                let is_det = p.is_some() && p.unwrap().score >= t;
                if is_det {
                    let p = p.unwrap();
                    let hit = g.is_some() && ((p.x - g.unwrap().x).powi(2) + (p.y - g.unwrap().y).powi(2)).sqrt() <= r;
                    if hit {
                        counts.0 += 1
                    } else {
                        counts.1 += 1
                    }
                } else if g.is_some() {
                    counts.2 += 1;
                }
            }
        }
        counts
    }

    #[test]
    fn perfect_predictions() {
        let sk = Skeleton::pig();
        let mut r = rng::seeded(1);
        let (_, truth) = random_instance(&mut r, 4);
        let rep = evaluate(&truth, &truth, &sk, 10.0, &default_thresholds()).unwrap();
        for row in &rep.rows {
            assert_eq!((row.precision, row.recall, row.f_measure), (1.0, 1.0, 1.0));
        }
        assert!(rep.keypoints.iter().all(|k| k.mean_error.is_none_or(|e| e == 0.0)));
    }

    #[test]
    fn zero_detection_convention() {
        let sk = Skeleton::pig();
        let truth = vec![Pose::new(vec![Some(Keypoint::annotated(5.0, 5.0)); 9])];
        let preds = vec![Pose::new(vec![Some(Keypoint::new(5.0, 5.0, 0.05)); 9])];
        let rep = evaluate(&preds, &truth, &sk, 10.0, &[0.1]).unwrap();
        assert_eq!((rep.rows[0].precision, rep.rows[0].recall, rep.rows[0].f_measure), (1.0, 0.0, 0.0));
        assert_eq!(rates(0, 0, 0), (1.0, 1.0, 1.0));
        assert_eq!(rates(0, 3, 2), (0.0, 0.0, 0.0));
    }

    #[test]
    fn matches_brute_force() {
        let sk = Skeleton::pig();
        let mut r = rng::seeded(2);
        for _ in 0..50 {
            let (preds, truth) = random_instance(&mut r, 5);
            let rep = evaluate(&preds, &truth, &sk, 10.0, &default_thresholds()).unwrap();
            for row in &rep.rows {
                let (tp, fp, fn_) = brute_force(&preds, &truth, 10.0, row.threshold);
                assert_eq!((row.true_positives, row.false_positives, row.false_negatives), (tp, fp, fn_));
            }
            for w in rep.rows.windows(2) {
                assert!(w[1].recall <= w[0].recall);
            }
        }
    }

    #[test]
    fn evaluate_is_frame_order_independent() {
        let sk = Skeleton::pig();
        let mut r = rng::seeded(3);
        let (mut preds, mut truth) = random_instance(&mut r, 6);
        let a = evaluate(&preds, &truth, &sk, 10.0, &default_thresholds()).unwrap();
        preds.reverse();
        truth.reverse();
        let b = evaluate(&preds, &truth, &sk, 10.0, &default_thresholds()).unwrap();
        assert_eq!(a.rows, b.rows);
    }

    #[test]
    fn evaluate_errors() {
        let sk = Skeleton::pig();
        assert!(evaluate(&[Pose::missing(9)], &[], &sk, 10.0, &[0.5]).is_err());
        assert!(evaluate(&[Pose::missing(3)], &[Pose::missing(3)], &sk, 10.0, &[0.5]).is_err());
    }

    #[test]
    fn report_csvs() {
        let sk = Skeleton::pig();
        let truth = vec![Pose::new(vec![Some(Keypoint::annotated(5.0, 5.0)); 9])];
        let rep = evaluate(&truth, &truth, &sk, 10.0, &default_thresholds()).unwrap();
        let csv = rep.thresholds_csv();
        assert!(csv.starts_with("threshold,precision,recall,f_measure\n0.10,1,1,1\n"));
        assert_eq!(csv.lines().count(), 10);
        assert!(rep.keypoints_csv().contains("\nsnout,1,0\n"));
    }

    #[test]
    fn constant_sequence_scores_zero() {
        let pose = Pose::new(vec![Some(Keypoint::new(3.0, 4.0, 0.7)); 9]);
        let s = outlier_scores(&vec![pose; 10], 100.0, 1.0).unwrap();
        assert!(s.iter().all(|&v| v == 0.0));
        assert!(outlier_scores(&[], 100.0, 1.0).is_err());
    }

    #[test]
    fn confidence_drop_scores_difference() {
        let base = Pose::new(vec![Some(Keypoint::new(3.0, 4.0, 0.9)); 9]);
        let mut seq = vec![base.clone(); 12];
        for p in seq.iter_mut().skip(7) {
            p.rows_mut()[2].as_mut().unwrap().score = 0.1;
        }
        let s = outlier_scores(&seq, 100.0, 1.0).unwrap();
        for (i, v) in s.iter().enumerate() {
            if i == 7 {
                assert!((v - 0.8).abs() < 1e-12);
            } else {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn missing_keypoint_contributes_confidence_only() {
        let a = Pose::new(vec![Some(Keypoint::new(0.0, 0.0, 0.6))]);
        let b = Pose::new(vec![None]);
        let s = outlier_scores(&[a.clone(), b, a], 10.0, 1.0).unwrap();
        assert_eq!(s, vec![0.0, 0.6, 0.6]);
    }

    #[test]
    fn teleport_is_strict_maximum() {
        let diag = 96.0 * 2f64.sqrt();
        let seq: Vec<Pose> = (0..100)
            .map(|t| {
                let x = 20.0 + 10.0 * (t as f64 / 15.0).sin() + if t >= 50 { 0.5 * diag / 2f64.sqrt() } else { 0.0 };
                let y = 40.0 + 5.0 * (t as f64 / 20.0).cos() + if t >= 50 { 0.5 * diag / 2f64.sqrt() } else { 0.0 };
                Pose::new(vec![Some(Keypoint::new(x, y, 0.9)); 9])
            })
            .collect();
        let s = outlier_scores(&seq, diag, 1.0).unwrap();
        assert!(s.iter().enumerate().all(|(i, &v)| i == 50 || v < s[50]));
    }

    #[test]
    fn peak_examples() {
        assert_eq!(find_peaks(&[0.0, 0.0, 5.0, 0.0, 0.0], 1.0, 1), vec![2]);
        let rising: Vec<f64> = (0..20).map(f64::from).collect();
        assert!(find_peaks(&rising, 0.0, 1).is_empty());
        // plateau takes its left end
        let mut s = vec![0.0; 30];
        s[10] = 9.0;
        s[11] = 9.0;
        assert_eq!(find_peaks(&s, 2.0, 1), vec![10]);
        // separation keeps the larger peak
        let mut s = vec![0.0; 40];
        s[10] = 8.0;
        s[12] = 9.0;
        s[30] = 8.5;
        assert_eq!(find_peaks(&s, 1.0, 5), vec![12, 30]);
        // ties go to the lower index
        s[12] = 8.0;
        assert_eq!(find_peaks(&s, 1.0, 5), vec![10, 30]);
        assert!(find_peaks(&[1.0, 2.0], 0.0, 1).is_empty());
    }

    #[test]
    fn queue_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(OutlierQueue::load(dir.path()).unwrap(), None);
        let q = OutlierQueue {
            flagged: vec![4, 9],
            prominence_multiplier: 3.0,
            min_separation: 5,
            position_weight: 1.0,
        };
        q.save(dir.path()).unwrap();
        assert_eq!(OutlierQueue::load(dir.path()).unwrap(), Some(q));
    }

    proptest! {
        #[test]
        fn peaks_sorted_unique_affine_invariant(
            values in prop::collection::vec(0.0f64..1.0, 3..120),
            a in 0.1f64..50.0,
            b in -10.0f64..10.0,
            c in 0.0f64..3.0,
            sep in 1usize..8,
        ) {
            let base = find_peaks(&values, c, sep);
            prop_assert!(base.windows(2).all(|w| w[0] < w[1] && w[1] - w[0] >= sep));
            let scaled: Vec<f64> = values.iter().map(|v| a * v + b).collect();
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64).sqrt();
            let thr = mean + c * sd;
            // skip draws where a value sits within rounding of the threshold
            prop_assume!(values.iter().all(|v| (v - thr).abs() > 1e-9));
            prop_assert_eq!(find_peaks(&scaled, c, sep), base);
        }

        #[test]
        fn recall_monotone(seed in any::<u64>()) {
            let sk = Skeleton::pig();
            let mut r = rng::seeded(seed);
            let (preds, truth) = random_instance(&mut r, 5);
            let rep = evaluate(&preds, &truth, &sk, 10.0, &default_thresholds()).unwrap();
            prop_assert!(rep.rows.windows(2).all(|w| w[1].recall <= w[0].recall));
            prop_assert!(rep.rows.iter().all(|r| (0.0..=1.0).contains(&r.f_measure)));
        }
    }
}
