//! Shot-structured data: history-window resolution with the gap rule,
//! contiguous train/test splitting, and input standardization.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::indexed_stream;

/// One shot: a time-ordered sequence of (input vector, target profile) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct ShotSeries {
    pub shot_id: String,
    pub timestamps_ms: Vec<f64>,
    /// [T × in_dim], one row per sample.
    pub inputs: Vec<Vec<f64>>,
    /// [T × out_dim], one row per sample.
    pub targets: Vec<Vec<f64>>,
}

impl ShotSeries {
    pub fn len(&self) -> usize {
        self.timestamps_ms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps_ms.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.timestamps_ms.len();
        if self.inputs.len() != t || self.targets.len() != t {
            return Err(Error::Data(format!(
                "shot {:?}: row counts differ (timestamps {t}, inputs {}, targets {})",
                self.shot_id,
                self.inputs.len(),
                self.targets.len()
            )));
        }
        if self.timestamps_ms.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Data(format!(
                "shot {:?}: timestamps not strictly increasing",
                self.shot_id
            )));
        }
        let in_dim = self.inputs.first().map_or(0, Vec::len);
        let out_dim = self.targets.first().map_or(0, Vec::len);
        if self.inputs.iter().any(|r| r.len() != in_dim)
            || self.targets.iter().any(|r| r.len() != out_dim)
        {
            return Err(Error::Data(format!("shot {:?}: ragged rows", self.shot_id)));
        }
        Ok(())
    }
}

/// A sample plus its resolved history context.
///
/// `history` holds exactly `n_history` rows, oldest first; slots that could
/// not be filled (shot start or a broken time gap) are self-padded with
/// copies of the current row and occupy the front of the list, so real
/// history keeps its temporal distance to the current sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleWindow {
    pub current: Vec<f64>,
    pub history: Vec<Vec<f64>>,
    pub target: Vec<f64>,
    pub padded_count: usize,
}

/// Walks backward from `index` collecting up to `n_history` rows, stopping at
/// the first consecutive gap larger than `gap_ms` (everything older is
/// disregarded). History never crosses the shot boundary.
pub fn resolve_window(
    shot: &ShotSeries,
    index: usize,
    n_history: usize,
    gap_ms: f64,
) -> Result<SampleWindow> {
    if index >= shot.len() {
        return Err(Error::Data(format!(
            "index {index} out of range for shot {:?} with {} samples",
            shot.shot_id,
            shot.len()
        )));
    }
    if !(gap_ms > 0.0) {
        return Err(Error::Config(format!("gap_ms must be positive, got {gap_ms}")));
    }
    let mut collected: Vec<usize> = Vec::with_capacity(n_history);
    let mut j = index;
    while collected.len() < n_history && j > 0 {
        if shot.timestamps_ms[j] - shot.timestamps_ms[j - 1] > gap_ms {
            break;
        }
        j -= 1;
        collected.push(j);
    }
    collected.reverse();
    let padded_count = n_history - collected.len();
    let current = shot.inputs[index].clone();
    let mut history = Vec::with_capacity(n_history);
    history.resize(padded_count, current.clone());
    history.extend(collected.iter().map(|&i| shot.inputs[i].clone()));
    Ok(SampleWindow {
        current,
        history,
        target: shot.targets[index].clone(),
        padded_count,
    })
}

/// (shot position in the corpus, sample index within the shot).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRef {
    pub shot: usize,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<SampleRef>,
    pub test: Vec<SampleRef>,
    /// Shots too short to contribute a test block.
    pub skipped_shots: Vec<String>,
}

/// Per shot, carves one contiguous block of `floor(T * test_ratio)` samples
/// as test data. The block start is drawn from a per-shot seeded stream and
/// avoids the first `n_history` indices where possible, so test windows keep
/// real history.
pub fn split_contiguous(
    shots: &[ShotSeries],
    test_ratio: f64,
    n_history: usize,
    seed: u64,
) -> Result<Split> {
    if !(test_ratio > 0.0 && test_ratio < 1.0) {
        return Err(Error::Config(format!(
            "test_ratio must be in (0, 1), got {test_ratio}"
        )));
    }
    let mut split = Split { train: Vec::new(), test: Vec::new(), skipped_shots: Vec::new() };
    for (s, shot) in shots.iter().enumerate() {
        let t = shot.len();
        let block = (t as f64 * test_ratio).floor() as usize;
        if block == 0 {
            split.skipped_shots.push(shot.shot_id.clone());
            split.train.extend((0..t).map(|index| SampleRef { shot: s, index }));
            continue;
        }
        let hi = t - block;
        let lo = n_history.min(hi);
        let start = indexed_stream(seed, s as u64).gen_range(lo..=hi);
        for index in 0..t {
            let r = SampleRef { shot: s, index };
            if index >= start && index < start + block {
                split.test.push(r);
            } else {
                split.train.push(r);
            }
        }
    }
    Ok(split)
}

/// Per-feature affine transform fitted on the training split only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    /// Population standard deviation; entries below 1e-8 are floored to 1 so
    /// constant features pass through centered.
    pub std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-8;

impl Standardizer {
    pub fn fit(rows: &[&[f64]]) -> Result<Self> {
        let first = rows.first().ok_or_else(|| Error::Data("standardizer: empty input".into()))?;
        let dim = first.len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for row in rows {
            for (m, v) in mean.iter_mut().zip(*row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for row in rows {
            for ((s, v), m) in var.iter_mut().zip(*row).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        let std = var
            .iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd < STD_FLOOR {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply_row(&self, row: &mut [f64]) {
        for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = (*v - m) / s;
        }
    }

    pub fn apply_shot(&self, shot: &mut ShotSeries) {
        for row in &mut shot.inputs {
            self.apply_row(row);
        }
    }
}

/// Fits a standardizer on the split's training rows and applies it to every
/// input row of every shot (test rows are transformed with train statistics).
pub fn standardize_corpus(shots: &mut [ShotSeries], split: &Split) -> Result<Standardizer> {
    let rows: Vec<&[f64]> = split
        .train
        .iter()
        .map(|r| shots[r.shot].inputs[r.index].as_slice())
        .collect();
    let std = Standardizer::fit(&rows)?;
    for shot in shots.iter_mut() {
        std.apply_shot(shot);
    }
    Ok(std)
}

/// Resolves windows for every reference, in order.
pub fn build_windows(
    shots: &[ShotSeries],
    refs: &[SampleRef],
    n_history: usize,
    gap_ms: f64,
) -> Result<Vec<SampleWindow>> {
    refs.iter()
        .map(|r| resolve_window(&shots[r.shot], r.index, n_history, gap_ms))
        .collect()
}
