use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Score recorded for points placed by a human annotator.
pub const HUMAN_SCORE: f64 = 1.0;

/// One located keypoint in image pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, score: f64) -> Self {
        Keypoint { x, y, score }
    }

    pub fn annotated(x: f64, y: f64) -> Self {
        Keypoint::new(x, y, HUMAN_SCORE)
    }

    pub fn distance(&self, other: &Keypoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Per-frame pose: one row per skeleton keypoint, `None` where the point
/// is missing (occluded, unannotated, or below the decode floor).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    rows: Vec<Option<Keypoint>>,
}

impl Pose {
    pub fn new(rows: Vec<Option<Keypoint>>) -> Self {
        Pose { rows }
    }

    pub fn missing(n: usize) -> Self {
        Pose { rows: vec![None; n] }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[Option<Keypoint>] {
        &self.rows
    }

    pub fn rows_mut(&mut self) -> &mut [Option<Keypoint>] {
        &mut self.rows
    }

    pub fn get(&self, i: usize) -> Option<&Keypoint> {
        self.rows.get(i).and_then(Option::as_ref)
    }

    pub fn present(&self) -> usize {
        self.rows.iter().filter(|r| r.is_some()).count()
    }

    /// `out[i] = self[perm[i]]`.
    pub fn permuted(&self, perm: &[usize]) -> Pose {
        Pose {
            rows: perm.iter().map(|&p| self.rows[p]).collect(),
        }
    }

    pub fn map_points(&self, mut f: impl FnMut(&Keypoint) -> Option<Keypoint>) -> Pose {
        Pose {
            rows: self.rows.iter().map(|r| r.as_ref().and_then(&mut f)).collect(),
        }
    }

    /// Rows of `[x, y, score]`; missing rows are `[NaN, NaN, 0]`.
    pub fn to_matrix(&self) -> Vec<[f64; 3]> {
        self.rows
            .iter()
            .map(|r| match r {
                Some(k) => [k.x, k.y, k.score],
                None => [f64::NAN, f64::NAN, 0.0],
            })
            .collect()
    }

    /// Checks row count, finiteness and score range.
    pub fn validate(&self, expected_rows: usize) -> Result<()> {
        if self.rows.len() != expected_rows {
            return Err(Error::PoseRows {
                expected: expected_rows,
                found: self.rows.len(),
            });
        }
        for (i, k) in self.rows.iter().enumerate() {
            if let Some(k) = k {
                if !(k.x.is_finite() && k.y.is_finite()) {
                    return Err(Error::invalid(format!("row {i}: non-finite coordinate")));
                }
                if !(0.0..=1.0).contains(&k.score) {
                    return Err(Error::invalid(format!("row {i}: score {} outside [0, 1]", k.score)));
                }
            }
        }
        Ok(())
    }
}
