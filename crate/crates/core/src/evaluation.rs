//! Test protocol, metric reports, block ablation, per-cycle prediction curves
//! and LOWESS smoothing.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{FeatureMatrix, SubsetId};
use crate::metrics::{phm_score, rmse, EvalPair};
use crate::models::Model;
use crate::windowing::{extract_window, make_eval_windows_last_k, WindowSample, EVAL_WINDOWS};

/// Windows evaluated per forward pass.
const PREDICT_CHUNK: usize = 256;

/// Anything that maps windows to RUL estimates.
pub trait RulPredictor {
    fn window(&self) -> usize;

    /// One estimate per window, in order.
    fn predict_windows(&self, windows: &[WindowSample]) -> Result<Vec<f64>>;
}

/// A model with some block latents zeroed.
pub struct Masked<'a> {
    pub model: &'a Model,
    pub mask: &'a [bool],
}

fn predict_chunked(model: &Model, windows: &[WindowSample], mask: Option<&[bool]>) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(PREDICT_CHUNK) {
        let flat: Vec<f64> = chunk.iter().flat_map(|w| w.features.iter().copied()).collect();
        out.extend(model.predict(&flat, mask)?);
    }
    Ok(out)
}

impl RulPredictor for Model {
    fn window(&self) -> usize {
        self.config().window
    }

    fn predict_windows(&self, windows: &[WindowSample]) -> Result<Vec<f64>> {
        predict_chunked(self, windows, None)
    }
}

impl RulPredictor for Masked<'_> {
    fn window(&self) -> usize {
        self.model.config().window
    }

    fn predict_windows(&self, windows: &[WindowSample]) -> Result<Vec<f64>> {
        if self.mask.len() != self.model.num_blocks() {
            return Err(Error::invalid(format!(
                "mask has {} entries for {} blocks",
                self.mask.len(),
                self.model.num_blocks()
            )));
        }
        predict_chunked(self.model, windows, Some(self.mask))
    }
}

/// Combines window predictions `p_j` (window ending `j` cycles before the last)
/// into an estimate at the last cycle: `max(0, mean_j(p_j - j))`.
pub fn combine_last_k(preds: &[f64]) -> f64 {
    let n = preds.len().max(1) as f64;
    let m = preds.iter().enumerate().map(|(j, p)| p - j as f64).sum::<f64>() / n;
    m.max(0.0)
}

/// RUL estimate at the last observed cycle from the last `k` windows.
pub fn predict_engine_rul(
    predictor: &dyn RulPredictor,
    matrix: &FeatureMatrix,
    engine_id: u32,
    k: usize,
) -> Result<f64> {
    let windows = make_eval_windows_last_k(matrix, engine_id, predictor.window(), k)?;
    Ok(combine_last_k(&predictor.predict_windows(&windows)?))
}

/// Final-cycle estimates for many engines in as few forward passes as possible.
pub fn predict_engines(
    predictor: &dyn RulPredictor,
    engines: &[(u32, FeatureMatrix)],
    k: usize,
) -> Result<Vec<f64>> {
    let mut windows = Vec::with_capacity(engines.len() * k);
    for (id, m) in engines {
        windows.extend(make_eval_windows_last_k(m, *id, predictor.window(), k)?);
    }
    let preds = predictor.predict_windows(&windows)?;
    Ok(preds.chunks(k).map(combine_last_k).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EngineResult {
    pub engine_id: u32,
    pub predicted: f64,
    pub truth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub subset: SubsetId,
    /// Path or identifier of the model manifest the predictions came from.
    pub model: Option<String>,
    pub engines: Vec<EngineResult>,
    pub rmse: f64,
    pub score: f64,
    #[serde(default)]
    pub artifacts: Vec<String>,
}

impl EvalReport {
    pub fn from_predictions(
        subset: SubsetId,
        engine_ids: &[u32],
        predicted: &[f64],
        truth: &[u32],
        model: Option<String>,
    ) -> Result<Self> {
        if engine_ids.len() != truth.len() || predicted.len() != truth.len() {
            return Err(Error::CountMismatch {
                subset: subset.to_string(),
                what: "RUL labels",
                expected: engine_ids.len(),
                found: truth.len(),
            });
        }
        let engines: Vec<EngineResult> = engine_ids
            .iter()
            .zip(predicted)
            .zip(truth)
            .map(|((&engine_id, &predicted), &t)| EngineResult {
                engine_id,
                predicted,
                truth: t as f64,
            })
            .collect();
        let mut report = Self {
            subset,
            model,
            engines,
            rmse: 0.0,
            score: 0.0,
            artifacts: Vec::new(),
        };
        (report.rmse, report.score) = report.recompute()?;
        Ok(report)
    }

    pub fn pairs(&self) -> Result<Vec<EvalPair>> {
        self.engines
            .iter()
            .map(|e| EvalPair::new(e.predicted, e.truth))
            .collect()
    }

    /// RMSE and score recomputed from the stored pairs.
    pub fn recompute(&self) -> Result<(f64, f64)> {
        let pairs = self.pairs()?;
        Ok((rmse(&pairs)?, phm_score(&pairs)?))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("engine_id,predicted,truth,error\n");
        for e in &self.engines {
            s.push_str(&format!(
                "{},{:?},{:?},{:?}\n",
                e.engine_id,
                e.predicted,
                e.truth,
                e.predicted - e.truth
            ));
        }
        s
    }

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join(format!("{stem}.json"));
        fs::write(&json, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Predicts every test engine and scores against the label file.
pub fn evaluate_subset(
    predictor: &dyn RulPredictor,
    subset: SubsetId,
    test: &[(u32, FeatureMatrix)],
    labels: &[u32],
) -> Result<EvalReport> {
    if test.len() != labels.len() {
        return Err(Error::CountMismatch {
            subset: subset.to_string(),
            what: "RUL labels",
            expected: test.len(),
            found: labels.len(),
        });
    }
    let preds = predict_engines(predictor, test, EVAL_WINDOWS)?;
    let ids: Vec<u32> = test.iter().map(|t| t.0).collect();
    EvalReport::from_predictions(subset, &ids, &preds, labels, None)
}

/// Window predictions averaged over several models, optionally masked.
pub struct Ensemble<'a> {
    pub models: &'a [Model],
    pub mask: Option<&'a [bool]>,
}

impl RulPredictor for Ensemble<'_> {
    fn window(&self) -> usize {
        self.models.first().map_or(0, |m| m.config().window)
    }

    fn predict_windows(&self, windows: &[WindowSample]) -> Result<Vec<f64>> {
        if self.models.is_empty() {
            return Err(Error::Checkpoint("empty ensemble".into()));
        }
        let mut sum = vec![0.0; windows.len()];
        for m in self.models {
            let preds = match self.mask {
                Some(mask) => Masked { model: m, mask }.predict_windows(windows)?,
                None => m.predict_windows(windows)?,
            };
            sum.iter_mut().zip(preds).for_each(|(s, p)| *s += p);
        }
        Ok(sum.into_iter().map(|s| s / self.models.len() as f64).collect())
    }
}

/// Per-engine estimates averaged over several checkpoints of the same model.
/// Each checkpoint's estimate is clamped before averaging.
pub fn checkpoint_average_predict(
    models: &[Model],
    test: &[(u32, FeatureMatrix)],
    required: usize,
    mask: Option<&[bool]>,
) -> Result<Vec<f64>> {
    if models.len() < required || models.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{} checkpoints available, {required} required for averaging",
            models.len()
        )));
    }
    let mut sum = vec![0.0; test.len()];
    for m in models {
        let preds = match mask {
            Some(mask) => predict_engines(&Masked { model: m, mask }, test, EVAL_WINDOWS)?,
            None => predict_engines(m, test, EVAL_WINDOWS)?,
        };
        for (s, p) in sum.iter_mut().zip(preds) {
            *s += p;
        }
    }
    Ok(sum.into_iter().map(|s| s / models.len() as f64).collect())
}

/// One estimate per cycle `1..=T`, each from the window ending at that cycle.
pub fn trajectory_curve(
    predictor: &dyn RulPredictor,
    matrix: &FeatureMatrix,
    engine_id: u32,
) -> Result<Vec<f64>> {
    let w = predictor.window();
    let windows: Vec<WindowSample> = (1..=matrix.rows() as i64)
        .map(|c| WindowSample {
            engine_id,
            end_cycle: c,
            features: extract_window(matrix, c, w),
            window: w,
            channels: matrix.channels(),
            target: None,
        })
        .collect();
    predictor.predict_windows(&windows)
}

/// Per-cycle curve with the masked blocks' latents zeroed.
pub fn ablate_blocks(model: &Model, matrix: &FeatureMatrix, engine_id: u32, mask: &[bool]) -> Result<Vec<f64>> {
    trajectory_curve(&Masked { model, mask }, matrix, engine_id)
}

/// All `2^P` masks in binary counting order, the unmasked one first.
pub fn all_masks(blocks: usize) -> Vec<Vec<bool>> {
    (0..1usize << blocks)
        .map(|bits| (0..blocks).map(|i| bits >> i & 1 == 1).collect())
        .collect()
}

/// LOWESS over `y` at evenly spaced abscissae.
pub fn lowess_smooth(y: &[f64], frac: f64) -> Result<Vec<f64>> {
    let x: Vec<f64> = (0..y.len()).map(|i| i as f64).collect();
    lowess(&x, y, frac)
}

/// Locally weighted linear regression with tricube weights and no
/// robustness iterations. `x` must be sorted ascending.
pub fn lowess(x: &[f64], y: &[f64], frac: f64) -> Result<Vec<f64>> {
    let n = y.len();
    if x.len() != n {
        return Err(Error::shape("lowess: x and y lengths differ"));
    }
    if n < 3 {
        return Err(Error::invalid(format!("lowess needs at least 3 points, got {n}")));
    }
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(Error::invalid(format!("lowess frac {frac} outside (0, 1]")));
    }
    let r = ((frac * n as f64).ceil() as usize).clamp(3, n);
    let mut out = Vec::with_capacity(n);
    let mut lo = 0;
    for i in 0..n {
        let xi = x[i];
        while lo + r < n && xi - x[lo] > x[lo + r] - xi {
            lo += 1;
        }
        let hi = lo + r;
        let h = (xi - x[lo]).max(x[hi - 1] - xi);
        let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
        let mut w = Vec::with_capacity(r);
        for j in lo..hi {
            let d = if h > 0.0 { (x[j] - xi).abs() / h } else { 0.0 };
            let wj = if d < 1.0 { (1.0 - d * d * d).powi(3) } else { 0.0 };
            w.push(wj);
            sw += wj;
            sx += wj * x[j];
            sy += wj * y[j];
        }
        let (mx, my) = (sx / sw, sy / sw);
        let (mut sxx, mut sxy) = (0.0, 0.0);
        for (j, wj) in (lo..hi).zip(&w) {
            sxx += wj * (x[j] - mx) * (x[j] - mx);
            sxy += wj * (x[j] - mx) * (y[j] - my);
        }
        let fit = if sxx > 1e-12 * sw * (1.0 + mx * mx) {
            my + sxy / sxx * (xi - mx)
        } else {
            my
        };
        out.push(fit);
    }
    Ok(out)
}
