//! Capped RUL targets, sliding windows, noise augmentation and engine-split
//! cross-validation folds.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::FeatureMatrix;

pub const RUL_CAP: u32 = 125;
pub const CAPPED_STRIDE: usize = 6;
pub const EVAL_WINDOWS: usize = 5;
pub const NOISE_SIGMA: f64 = 0.04;
pub const CV_FOLDS: usize = 5;
/// Extra cycles in a holdout segment beyond the window length, giving
/// `EVAL_WINDOWS` validation windows per engine.
pub const HOLDOUT_EXTRA: usize = EVAL_WINDOWS;

/// `min(cap, T - c)` for `1 <= c <= T`.
pub fn piecewise_rul(total_cycles: usize, cycle: usize, cap: u32) -> Result<f64> {
    if cycle < 1 || cycle > total_cycles {
        return Err(Error::invalid(format!(
            "cycle {cycle} outside 1..={total_cycles}"
        )));
    }
    Ok(((total_cycles - cycle) as f64).min(cap as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowSample {
    pub engine_id: u32,
    /// Cycle of the last row. May be below 1 for heavily padded test windows.
    pub end_cycle: i64,
    /// `W x C` row-major.
    pub features: Vec<f64>,
    pub window: usize,
    pub channels: usize,
    /// Absent for test windows.
    pub target: Option<f64>,
}

/// Copies the `W` rows ending at `end_cycle` into `out`, replicating the first
/// row for cycles before 1.
pub fn fill_window(m: &FeatureMatrix, end_cycle: i64, window: usize, out: &mut [f64]) {
    let c = m.channels();
    debug_assert_eq!(out.len(), window * c);
    debug_assert!(end_cycle <= m.rows() as i64);
    for (r, dst) in out.chunks_exact_mut(c).enumerate() {
        let cycle = end_cycle - (window - 1 - r) as i64;
        let idx = cycle.max(1) as usize - 1;
        dst.copy_from_slice(m.row(idx));
    }
}

pub fn extract_window(m: &FeatureMatrix, end_cycle: i64, window: usize) -> Vec<f64> {
    let mut out = vec![0.0; window * m.channels()];
    fill_window(m, end_cycle, window, &mut out);
    out
}

/// A training window without its features: end cycle and target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowEnd {
    pub end_cycle: usize,
    pub target: f64,
}

/// End cycles kept for training: every window with a target below the cap,
/// plus the first capped window and every `capped_stride`-th after it.
pub fn train_window_ends(
    total_cycles: usize,
    window: usize,
    capped_stride: usize,
) -> Result<Vec<WindowEnd>> {
    if window == 0 || capped_stride == 0 {
        return Err(Error::invalid("window and stride must be positive"));
    }
    if total_cycles < window {
        return Err(Error::invalid(format!(
            "trajectory of {total_cycles} cycles is shorter than window {window}"
        )));
    }
    let mut out = Vec::new();
    let mut capped_seen = 0;
    for end in window..=total_cycles {
        let target = piecewise_rul(total_cycles, end, RUL_CAP)?;
        if target >= RUL_CAP as f64 {
            let keep = capped_seen % capped_stride == 0;
            capped_seen += 1;
            if !keep {
                continue;
            }
        }
        out.push(WindowEnd {
            end_cycle: end,
            target,
        });
    }
    Ok(out)
}

pub fn make_train_windows(
    m: &FeatureMatrix,
    engine_id: u32,
    window: usize,
    capped_stride: usize,
) -> Result<Vec<WindowSample>> {
    Ok(train_window_ends(m.rows(), window, capped_stride)?
        .into_iter()
        .map(|w| WindowSample {
            engine_id,
            end_cycle: w.end_cycle as i64,
            features: extract_window(m, w.end_cycle as i64, window),
            window,
            channels: m.channels(),
            target: Some(w.target),
        })
        .collect())
}

/// Windows ending at `T, T-1, ..., T-k+1`, in that order.
pub fn make_eval_windows_last_k(
    m: &FeatureMatrix,
    engine_id: u32,
    window: usize,
    k: usize,
) -> Result<Vec<WindowSample>> {
    if m.rows() < 1 {
        return Err(Error::invalid(format!("engine {engine_id} has no cycles")));
    }
    let t = m.rows() as i64;
    Ok((0..k as i64)
        .map(|j| WindowSample {
            engine_id,
            end_cycle: t - j,
            features: extract_window(m, t - j, window),
            window,
            channels: m.channels(),
            target: None,
        })
        .collect())
}

/// Adds i.i.d. `N(0, sigma^2)` noise in place.
pub fn add_noise(features: &mut [f64], sigma: f64, rng: &mut impl Rng) -> Result<()> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!("noise sigma must be non-negative, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    for v in features {
        *v += normal.sample(rng);
    }
    Ok(())
}

pub fn augment_noise(sample: &WindowSample, sigma: f64, rng: &mut impl Rng) -> Result<WindowSample> {
    let mut out = sample.clone();
    add_noise(&mut out.features, sigma, rng)?;
    Ok(out)
}

/// Which holdout segments are removed from a fold's training windows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExclusionPolicy {
    /// Only the validation-fold engines' segments.
    #[default]
    ValidationFold,
    /// Every engine's segment, in every fold.
    AllEngines,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HoldoutSegment {
    pub start: usize,
    pub len: usize,
}

impl HoldoutSegment {
    pub fn end(&self) -> usize {
        self.start + self.len - 1
    }

    /// Whether a window of length `window` ending at `end_cycle` shares any cycle with the segment.
    pub fn overlaps(&self, end_cycle: usize, window: usize) -> bool {
        end_cycle >= self.start && end_cycle + 1 <= self.end() + window
    }

    /// End cycles of the last `EVAL_WINDOWS` windows inside the segment,
    /// latest first, mirroring the test protocol.
    pub fn window_ends(&self, window: usize) -> Vec<usize> {
        let first = self.start + window - 1;
        (0..EVAL_WINDOWS)
            .map(|j| self.end() - j)
            .filter(|&e| e >= first)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub fold: usize,
    pub window: usize,
    pub train_engine_ids: Vec<u32>,
    pub validation_engine_ids: Vec<u32>,
    /// One segment per engine, keyed by engine id.
    pub holdouts: BTreeMap<u32, HoldoutSegment>,
    pub policy: ExclusionPolicy,
}

impl DatasetSplit {
    pub fn is_validation(&self, engine_id: u32) -> bool {
        self.validation_engine_ids.binary_search(&engine_id).is_ok()
    }

    /// Whether a training window is removed in this fold.
    pub fn excludes(&self, engine_id: u32, end_cycle: usize) -> bool {
        let applies = match self.policy {
            ExclusionPolicy::ValidationFold => self.is_validation(engine_id),
            ExclusionPolicy::AllEngines => true,
        };
        applies
            && self
                .holdouts
                .get(&engine_id)
                .is_some_and(|s| s.overlaps(end_cycle, self.window))
    }

    /// Cycles held out of training in this fold.
    pub fn excluded_time_points(&self) -> usize {
        self.holdouts
            .iter()
            .filter(|(id, _)| self.policy == ExclusionPolicy::AllEngines || self.is_validation(**id))
            .map(|(_, s)| s.len)
            .sum()
    }
}

/// Partitions engines into `k` folds and draws one holdout segment of length
/// `W + 5` per engine. `engines` holds `(engine_id, trajectory length)`.
pub fn make_cv_splits(
    engines: &[(u32, usize)],
    k: usize,
    window: usize,
    policy: ExclusionPolicy,
    rng: &mut impl Rng,
) -> Result<Vec<DatasetSplit>> {
    if k == 0 || engines.len() < k {
        return Err(Error::invalid(format!(
            "{} engines cannot form {k} folds",
            engines.len()
        )));
    }
    let seg_len = window + HOLDOUT_EXTRA;
    let mut holdouts = BTreeMap::new();
    for &(id, len) in engines {
        if len < seg_len {
            return Err(Error::invalid(format!(
                "engine {id} has {len} cycles, fewer than the holdout length {seg_len}"
            )));
        }
        let start = rng.random_range(1..=len - seg_len + 1);
        if holdouts.insert(id, HoldoutSegment { start, len: seg_len }).is_some() {
            return Err(Error::invalid(format!("duplicate engine id {id}")));
        }
    }
    let mut order: Vec<u32> = engines.iter().map(|e| e.0).collect();
    order.shuffle(rng);
    let mut folds = vec![Vec::new(); k];
    for (i, id) in order.into_iter().enumerate() {
        folds[i % k].push(id);
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok((0..k)
        .map(|fold| {
            let mut train: Vec<u32> = folds
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != fold)
                .flat_map(|(_, f)| f.iter().copied())
                .collect();
            train.sort_unstable();
            DatasetSplit {
                fold,
                window,
                train_engine_ids: train,
                validation_engine_ids: folds[fold].clone(),
                holdouts: holdouts.clone(),
                policy,
            }
        })
        .collect())
}

/// Mean fraction of training time points removed per fold.
pub fn holdout_fraction(splits: &[DatasetSplit], total_rows: usize) -> f64 {
    if splits.is_empty() || total_rows == 0 {
        return 0.0;
    }
    splits
        .iter()
        .map(|s| s.excluded_time_points() as f64 / total_rows as f64)
        .sum::<f64>()
        / splits.len() as f64
}
