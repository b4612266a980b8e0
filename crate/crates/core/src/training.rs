//! Training protocol: noisy mini-batches, composite loss, AdamW with a
//! triangular cyclic learning rate, engine-split cross-validation to pick the
//! plateau epoch, a full-data retrain, checkpoint-averaged test predictions,
//! and aggregation over seeds.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::evaluation::{checkpoint_average_predict, combine_last_k, EvalReport, RulPredictor};
use crate::ingest::{FeatureMatrix, PreparedSubset, SubsetId};
use crate::losses::{composite_loss_graph, LossWeights};
use crate::metrics::{mean_std, phm_score, rmse, EvalPair};
use crate::models::{Architecture, Model, ModelConfig};
use crate::nn::checkpoint::{load_checkpoint, save_checkpoint};
use crate::nn::{AdamW, AdamWConfig, CyclicLr, Graph, Tensor};
use crate::windowing::{
    add_noise, fill_window, make_cv_splits, piecewise_rul, train_window_ends, DatasetSplit,
    ExclusionPolicy, WindowSample, CAPPED_STRIDE, CV_FOLDS, NOISE_SIGMA, RUL_CAP,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub subset: SubsetId,
    pub model: ModelConfig,
    pub batch_size: usize,
    pub lr_min: f64,
    pub lr_max: f64,
    /// Length of one full triangle of the learning-rate schedule, in epochs.
    pub lr_cycle_epochs: f64,
    /// Per-cycle amplitude decay factor; `None` keeps the amplitude fixed.
    pub lr_decay: Option<f64>,
    pub max_epochs: usize,
    pub noise_sigma: f64,
    pub loss: LossWeights,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seeds: Vec<u64>,
    pub folds: usize,
    pub capped_stride: usize,
    /// Checkpoints averaged from the plateau epoch onwards.
    pub averaged_checkpoints: usize,
    /// Width of the centered moving average used to find the plateau.
    pub smoothing_window: usize,
    pub exclusion: ExclusionPolicy,
    /// Use only the first `n` training and test engines (smoke runs).
    pub max_engines: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_model(SubsetId::FD001, Architecture::Tfim)
    }
}

impl TrainConfig {
    /// Protocol defaults for a subset and architecture.
    pub fn for_model(subset: SubsetId, architecture: Architecture) -> Self {
        let (batch_size, lr_min, lr_max) = if architecture.is_baseline() {
            (128, 1e-4, 5e-4)
        } else {
            (210, 9e-5, 2e-4)
        };
        Self {
            subset,
            model: ModelConfig::new(architecture, subset.default_window()),
            batch_size,
            lr_min,
            lr_max,
            lr_cycle_epochs: 4.0,
            lr_decay: None,
            max_epochs: 120,
            noise_sigma: NOISE_SIGMA,
            loss: LossWeights::default(),
            weight_decay: AdamWConfig::default().weight_decay,
            clip_norm: 5.0,
            seeds: vec![1, 2, 3, 4, 5],
            folds: CV_FOLDS,
            capped_stride: CAPPED_STRIDE,
            averaged_checkpoints: 5,
            smoothing_window: 5,
            exclusion: ExclusionPolicy::default(),
            max_engines: None,
        }
    }

    /// Protocol defaults overlaid with the keys present in `overrides`
    /// (a TOML document using this struct's field names).
    pub fn with_overrides(base: &Self, overrides: &str) -> Result<Self> {
        let patch: toml::Table = toml::from_str(overrides)?;
        let mut merged = toml::Table::try_from(base)?;
        merge_tables(&mut merged, patch);
        let cfg: Self = merged.try_into()?;
        Ok(cfg)
    }

    /// Builds a config with precedence explicit arguments > `file` > defaults.
    /// The defaults depend on the subset and architecture, so those two are
    /// resolved first.
    pub fn resolve(
        file: Option<&str>,
        subset: Option<SubsetId>,
        architecture: Option<Architecture>,
    ) -> Result<Self> {
        let table: toml::Table = match file {
            Some(text) => toml::from_str(text)?,
            None => toml::Table::new(),
        };
        let subset = match subset {
            Some(s) => s,
            None => match table.get("subset").and_then(|v| v.as_str()) {
                Some(s) => s.parse()?,
                None => SubsetId::FD001,
            },
        };
        let architecture = match architecture {
            Some(a) => a,
            None => table
                .get("model")
                .and_then(|m| m.get("architecture"))
                .and_then(|v| v.as_str())
                .ok_or_else(|| Error::invalid("no model architecture given"))?
                .parse()?,
        };
        let base = Self::for_model(subset, architecture);
        let mut cfg = match file {
            Some(text) => Self::with_overrides(&base, text)?,
            None => base,
        };
        cfg.subset = subset;
        cfg.model.architecture = architecture;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        self.model.validate()?;
        self.loss.validate()?;
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr_min > 0.0 && self.lr_min < self.lr_max) {
            return bad(format!("need 0 < lr_min < lr_max, got [{}, {}]", self.lr_min, self.lr_max));
        }
        if self.max_epochs == 0 || self.lr_cycle_epochs <= 0.0 {
            return bad("max_epochs and lr_cycle_epochs must be positive".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma {} is negative", self.noise_sigma));
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if self.folds < 2 {
            return bad("cross-validation needs at least 2 folds".into());
        }
        if self.capped_stride == 0 || self.averaged_checkpoints == 0 || self.smoothing_window == 0 {
            return bad("capped_stride, averaged_checkpoints and smoothing_window must be positive".into());
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(&Sha256::digest(json.as_bytes())[..8])
    }
}

fn merge_tables(base: &mut toml::Table, patch: toml::Table) {
    for (k, v) in patch {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(p)) => merge_tables(b, p),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Independent seed for one purpose of one run.
pub fn derive_seed(seed: u64, purpose: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(purpose.as_bytes());
    h.update(index.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_rmse: Option<f64>,
    pub val_score: Option<f64>,
    /// Learning rate at the last step of the epoch.
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub records: Vec<EpochRecord>,
    pub checkpoints: Vec<PathBuf>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

impl RunHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_rmse,val_score,lr\n");
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{:?},{},{},{:?}",
                r.epoch,
                r.train_loss,
                opt(r.val_rmse),
                opt(r.val_score),
                r.lr
            );
        }
        s
    }

    pub fn val_rmse(&self) -> Option<Vec<f64>> {
        self.records.iter().map(|r| r.val_rmse).collect()
    }
}

/// A training window by reference: engine index, end cycle and target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowRef {
    pub engine: usize,
    pub end_cycle: usize,
    pub target: f64,
}

/// All training windows, minus those a fold excludes.
pub fn training_windows(
    engines: &[(u32, FeatureMatrix)],
    window: usize,
    capped_stride: usize,
    split: Option<&DatasetSplit>,
) -> Result<Vec<WindowRef>> {
    let mut out = Vec::new();
    for (idx, (id, m)) in engines.iter().enumerate() {
        for w in train_window_ends(m.rows(), window, capped_stride)? {
            if split.is_some_and(|s| s.excludes(*id, w.end_cycle)) {
                continue;
            }
            out.push(WindowRef {
                engine: idx,
                end_cycle: w.end_cycle,
                target: w.target,
            });
        }
    }
    Ok(out)
}

/// Estimates at the end of each validation engine's holdout segment and the
/// corresponding capped truth.
pub fn validation_pairs(
    predictor: &dyn RulPredictor,
    engines: &[(u32, FeatureMatrix)],
    split: &DatasetSplit,
) -> Result<Vec<EvalPair>> {
    let w = predictor.window();
    let mut windows = Vec::new();
    let mut truths = Vec::new();
    let mut counts = Vec::new();
    for (id, m) in engines.iter().filter(|(id, _)| split.is_validation(*id)) {
        let seg = split.holdouts.get(id).ok_or_else(|| {
            Error::invalid(format!("validation engine {id} has no holdout segment"))
        })?;
        let ends = seg.window_ends(w);
        counts.push(ends.len());
        for e in ends {
            let mut features = vec![0.0; w * m.channels()];
            fill_window(m, e as i64, w, &mut features);
            windows.push(WindowSample {
                engine_id: *id,
                end_cycle: e as i64,
                features,
                window: w,
                channels: m.channels(),
                target: None,
            });
        }
        truths.push(piecewise_rul(m.rows(), seg.end(), RUL_CAP)?);
    }
    if windows.is_empty() {
        return Ok(Vec::new());
    }
    let preds = predictor.predict_windows(&windows)?;
    let mut pairs = Vec::with_capacity(truths.len());
    let mut off = 0;
    for (n, t) in counts.into_iter().zip(truths) {
        pairs.push(EvalPair::new(combine_last_k(&preds[off..off + n]), t)?);
        off += n;
    }
    Ok(pairs)
}

/// Optimizer state and schedule for one training run.
pub struct Trainer<'c> {
    cfg: &'c TrainConfig,
    optimizer: AdamW,
    schedule: CyclicLr,
    rng: ChaCha8Rng,
    step: u64,
    epoch: usize,
}

impl<'c> Trainer<'c> {
    /// `steps_per_epoch` sets the schedule's period.
    pub fn new(cfg: &'c TrainConfig, model: &Model, steps_per_epoch: usize, seed: u64) -> Self {
        let half = ((cfg.lr_cycle_epochs / 2.0) * steps_per_epoch as f64).round().max(1.0) as u64;
        let mut schedule = CyclicLr::new(cfg.lr_min, cfg.lr_max, half);
        schedule.decay = cfg.lr_decay;
        let optimizer = AdamW::new(
            &model.store,
            AdamWConfig {
                weight_decay: cfg.weight_decay,
                ..AdamWConfig::default()
            },
        );
        Self {
            cfg,
            optimizer,
            schedule,
            rng: ChaCha8Rng::seed_from_u64(seed),
            step: 0,
            epoch: 0,
        }
    }

    /// One optimizer step on a batch; returns the batch loss.
    pub fn step(&mut self, model: &mut Model, features: Vec<f64>, targets: Vec<f64>) -> Result<f64> {
        let cfg = self.cfg;
        let b = targets.len();
        let dropout_seed = self.rng.random::<u64>();
        let (loss, grads) = {
            let mut g = Graph::new(&model.store, true, dropout_seed);
            let x = g.input(Tensor::new(
                vec![b, cfg.model.window, cfg.model.sensors],
                features,
            ));
            let y = g.input(Tensor::new(vec![b, 1], targets));
            let out = model.forward(&mut g, x, None)?;
            let loss = composite_loss_graph(
                &mut g,
                out.prediction,
                &out.block_predictions,
                &out.aux_predictions,
                &out.latents,
                y,
                &cfg.loss,
            );
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    epoch: self.epoch + 1,
                    step: self.step as usize,
                    loss: value,
                });
            }
            (value, g.backward(loss))
        };
        model.store.zero_grad();
        grads.accumulate_into(&mut model.store);
        if cfg.clip_norm > 0.0 {
            model.store.clip_grad_norm(cfg.clip_norm);
        }
        let lr = self.schedule.at(self.step);
        self.optimizer.step(&mut model.store, lr);
        self.step += 1;
        Ok(loss)
    }

    /// One pass over `windows` in shuffled order with fresh noise; returns the
    /// sample-weighted mean loss.
    pub fn epoch(
        &mut self,
        model: &mut Model,
        engines: &[(u32, FeatureMatrix)],
        windows: &[WindowRef],
    ) -> Result<f64> {
        let cfg = self.cfg;
        let w = cfg.model.window;
        let c = cfg.model.sensors;
        let mut order: Vec<usize> = (0..windows.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut features = vec![0.0; batch.len() * w * c];
            let mut targets = Vec::with_capacity(batch.len());
            for (slot, &i) in features.chunks_exact_mut(w * c).zip(batch) {
                let r = windows[i];
                fill_window(&engines[r.engine].1, r.end_cycle as i64, w, slot);
                targets.push(r.target);
            }
            add_noise(&mut features, cfg.noise_sigma, &mut self.rng)?;
            total += self.step(model, features, targets)? * batch.len() as f64;
        }
        self.epoch += 1;
        Ok(total / windows.len().max(1) as f64)
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.at(self.step.saturating_sub(1))
    }
}

/// Trains `model` for `epochs` epochs. With a split, excluded windows are
/// dropped and validation metrics are logged each epoch. `on_epoch` sees the
/// model after every epoch.
pub fn train_model(
    cfg: &TrainConfig,
    model: &mut Model,
    engines: &[(u32, FeatureMatrix)],
    split: Option<&DatasetSplit>,
    epochs: usize,
    seed: u64,
    mut on_epoch: impl FnMut(&Model, &EpochRecord) -> Result<()>,
) -> Result<RunHistory> {
    if let Some((_, m)) = engines.iter().find(|(_, m)| m.channels() != cfg.model.sensors) {
        return Err(Error::shape(format!(
            "engine matrices have {} channels, model expects {}",
            m.channels(),
            cfg.model.sensors
        )));
    }
    let windows = training_windows(engines, cfg.model.window, cfg.capped_stride, split)?;
    if windows.is_empty() {
        return Err(Error::invalid("no training windows"));
    }
    let steps = windows.len().div_ceil(cfg.batch_size);
    let mut trainer = Trainer::new(cfg, model, steps, seed);
    let mut history = RunHistory::default();
    for epoch in 1..=epochs {
        let train_loss = trainer.epoch(model, engines, &windows)?;
        let (val_rmse, val_score) = match split {
            Some(s) => {
                let pairs = validation_pairs(model, engines, s)?;
                if pairs.is_empty() {
                    (None, None)
                } else {
                    (Some(rmse(&pairs)?), Some(phm_score(&pairs)?))
                }
            }
            None => (None, None),
        };
        let record = EpochRecord {
            epoch,
            train_loss,
            val_rmse,
            val_score,
            lr: trainer.current_lr(),
        };
        on_epoch(model, &record)?;
        history.records.push(record);
    }
    Ok(history)
}

/// 1-based epoch minimizing the centered moving average of `val_rmse`
/// (window truncated at the ends); ties go to the earliest epoch.
pub fn select_plateau_epoch(val_rmse: &[f64], window: usize) -> Result<usize> {
    if val_rmse.is_empty() {
        return Err(Error::invalid("empty validation history"));
    }
    let half = window.max(1) / 2;
    let n = val_rmse.len();
    let mut best = (f64::INFINITY, 0);
    for i in 0..n {
        let lo = i.saturating_sub(half);
        let hi = (i + half).min(n - 1);
        let m = val_rmse[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64;
        if m < best.0 {
            best = (m, i);
        }
    }
    Ok(best.1 + 1)
}

/// Element-wise mean of per-fold histories.
pub fn average_histories(histories: &[RunHistory]) -> RunHistory {
    let n = histories.iter().map(|h| h.records.len()).min().unwrap_or(0);
    let k = histories.len() as f64;
    let mean_opt = |vals: Vec<Option<f64>>| -> Option<f64> {
        let v: Option<Vec<f64>> = vals.into_iter().collect();
        v.map(|v| v.iter().sum::<f64>() / k)
    };
    let records = (0..n)
        .map(|e| EpochRecord {
            epoch: e + 1,
            train_loss: histories.iter().map(|h| h.records[e].train_loss).sum::<f64>() / k,
            val_rmse: mean_opt(histories.iter().map(|h| h.records[e].val_rmse).collect()),
            val_score: mean_opt(histories.iter().map(|h| h.records[e].val_score).collect()),
            lr: histories[0].records[e].lr,
        })
        .collect();
    RunHistory {
        records,
        checkpoints: Vec::new(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub plateau_epoch: usize,
    pub cv_history: RunHistory,
    pub retrain_history: RunHistory,
    pub report: EvalReport,
}

fn checkpoint_dir(seed_dir: &Path, epoch: usize) -> PathBuf {
    seed_dir.join("checkpoints").join(format!("epoch-{epoch:03}"))
}

pub fn seed_dir(out: &Path, seed: u64) -> PathBuf {
    out.join(format!("seed-{seed}"))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Applies `max_engines` to a prepared subset.
pub fn limit_engines(data: &PreparedSubset, max_engines: Option<usize>) -> PreparedSubset {
    let mut d = data.clone();
    if let Some(n) = max_engines {
        d.train.truncate(n);
        d.test.truncate(n);
        d.test_rul.truncate(n);
    }
    d
}

/// Full protocol for one seed: CV to pick the plateau epoch, retrain on all
/// training engines, average the checkpoints at the plateau, score the test set.
/// With `out`, checkpoints, histories and the report land in `out/seed-<seed>/`.
pub fn run_seed(cfg: &TrainConfig, data: &PreparedSubset, seed: u64, out: Option<&Path>) -> Result<SeedOutcome> {
    cfg.validate()?;
    let data = limit_engines(data, cfg.max_engines);
    let w = cfg.model.window;
    let lens: Vec<(u32, usize)> = data.train.iter().map(|(id, m)| (*id, m.rows())).collect();
    let mut split_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "splits", 0));
    let splits = make_cv_splits(&lens, cfg.folds, w, cfg.exclusion, &mut split_rng)?;
    let dir = out.map(|o| seed_dir(o, seed));

    let mut fold_histories = Vec::with_capacity(splits.len());
    for split in &splits {
        let f = split.fold as u64;
        let mut model = Model::new(cfg.model.clone(), derive_seed(seed, "init", f))?;
        let h = train_model(
            cfg,
            &mut model,
            &data.train,
            Some(split),
            cfg.max_epochs,
            derive_seed(seed, "train", f),
            |_, _| Ok(()),
        )?;
        if let Some(d) = &dir {
            write(&d.join(format!("cv_fold{}.csv", split.fold)), &h.to_csv())?;
        }
        fold_histories.push(h);
    }
    let cv_history = average_histories(&fold_histories);
    let val = cv_history
        .val_rmse()
        .ok_or_else(|| Error::invalid("cross-validation produced no validation metrics"))?;
    let plateau = select_plateau_epoch(&val, cfg.smoothing_window)?;

    let last = plateau + cfg.averaged_checkpoints - 1;
    let mut model = Model::new(cfg.model.clone(), derive_seed(seed, "init", u64::MAX))?;
    let hash = cfg.model.hash();
    let mut snapshots = Vec::new();
    let mut saved = Vec::new();
    let mut retrain = train_model(
        cfg,
        &mut model,
        &data.train,
        None,
        last,
        derive_seed(seed, "train", u64::MAX),
        |m, rec| {
            if rec.epoch >= plateau {
                snapshots.push(m.clone());
                if let Some(d) = &dir {
                    let p = checkpoint_dir(d, rec.epoch);
                    save_checkpoint(&p, &m.store, &hash, Some(rec.epoch))?;
                    saved.push(p);
                }
            }
            Ok(())
        },
    )?;
    retrain.checkpoints = saved;

    let preds = checkpoint_average_predict(&snapshots, &data.test, cfg.averaged_checkpoints, None)?;
    let ids: Vec<u32> = data.test.iter().map(|t| t.0).collect();
    let mut report = EvalReport::from_predictions(
        data.subset,
        &ids,
        &preds,
        &data.test_rul,
        dir.as_ref().map(|_| "model.json".to_string()),
    )?;
    report.artifacts = retrain
        .checkpoints
        .iter()
        .filter_map(|p| p.strip_prefix(dir.as_deref().unwrap_or(Path::new(""))).ok())
        .map(|p| p.display().to_string())
        .collect();

    if let Some(d) = &dir {
        write(&d.join("model.json"), &serde_json::to_string_pretty(&cfg.model)?)?;
        write(&d.join("cv_history.csv"), &cv_history.to_csv())?;
        write(&d.join("history.csv"), &retrain.to_csv())?;
        report.save(d, "report")?;
    }
    Ok(SeedOutcome {
        seed,
        plateau_epoch: plateau,
        cv_history,
        retrain_history: retrain,
        report,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub plateau_epoch: usize,
    pub rmse: f64,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiRunReport {
    pub subset: SubsetId,
    pub architecture: Architecture,
    pub runs: Vec<SeedMetrics>,
    /// Seeds that aborted, with the error message.
    pub failures: Vec<(u64, String)>,
    pub complete: bool,
    pub rmse_mean: f64,
    pub rmse_std: f64,
    pub score_mean: f64,
    pub score_std: f64,
}

impl MultiRunReport {
    pub fn from_runs(
        subset: SubsetId,
        architecture: Architecture,
        runs: Vec<SeedMetrics>,
        failures: Vec<(u64, String)>,
    ) -> Self {
        let (rmse_mean, rmse_std) = mean_std(&runs.iter().map(|r| r.rmse).collect::<Vec<_>>());
        let (score_mean, score_std) = mean_std(&runs.iter().map(|r| r.score).collect::<Vec<_>>());
        Self {
            subset,
            architecture,
            complete: failures.is_empty() && !runs.is_empty(),
            runs,
            failures,
            rmse_mean,
            rmse_std,
            score_mean,
            score_std,
        }
    }

    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("seed,plateau_epoch,rmse,score\n");
        for r in &self.runs {
            let _ = writeln!(s, "{},{},{:?},{:?}", r.seed, r.plateau_epoch, r.rmse, r.score);
        }
        s
    }
}

/// Runs every seed in `cfg.seeds`; failed seeds are recorded, not fatal.
pub fn multi_run(cfg: &TrainConfig, data: &PreparedSubset, out: Option<&Path>) -> Result<MultiRunReport> {
    cfg.validate()?;
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for &seed in &cfg.seeds {
        match run_seed(cfg, data, seed, out) {
            Ok(o) => runs.push(SeedMetrics {
                seed,
                plateau_epoch: o.plateau_epoch,
                rmse: o.report.rmse,
                score: o.report.score,
            }),
            Err(e) => failures.push((seed, e.to_string())),
        }
    }
    let report = MultiRunReport::from_runs(cfg.subset, cfg.model.architecture, runs, failures);
    if let Some(o) = out {
        write(&o.join("metrics.csv"), &report.metrics_csv())?;
        write(&o.join("summary.json"), &serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report)
}

/// Rebuilds the averaged checkpoints of one seed from `seed_dir`.
pub fn load_seed_models(seed_dir: &Path) -> Result<Vec<Model>> {
    let cfg_path = seed_dir.join("model.json");
    let text = fs::read_to_string(&cfg_path).map_err(|e| Error::io(&cfg_path, e))?;
    let cfg: ModelConfig = serde_json::from_str(&text)?;
    let ck_root = seed_dir.join("checkpoints");
    let mut dirs: Vec<PathBuf> = fs::read_dir(&ck_root)
        .map_err(|e| Error::io(&ck_root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("epoch-")))
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Checkpoint(format!("no checkpoints under {}", ck_root.display())));
    }
    let hash = cfg.hash();
    dirs.iter()
        .map(|d| {
            let mut m = Model::new(cfg.clone(), 0)?;
            load_checkpoint(d, &mut m.store, &hash)?;
            Ok(m)
        })
        .collect()
}

/// Provenance record written once per run directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: TrainConfig,
    pub config_hash: String,
    pub dataset_hash: String,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub tool_version: String,
}

impl RunManifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn new(command: &str, config: &TrainConfig, dataset_hash: String, output_dir: &Path) -> Self {
        Self {
            command: command.to_string(),
            config_hash: config.hash(),
            config: config.clone(),
            dataset_hash,
            seeds: config.seeds.clone(),
            output_dir: output_dir.to_path_buf(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    /// Writes the manifest and a TOML copy of the config. Refuses to
    /// overwrite an existing manifest.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(Self::FILE);
        if path.exists() {
            return Err(Error::invalid(format!(
                "{} already exists; use a fresh output directory",
                path.display()
            )));
        }
        write(&dir.join("config.toml"), &self.config.to_toml()?)?;
        write(&path, &serde_json::to_string_pretty(self)?)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(Self::FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Content hash of the normalized training and test matrices and labels.
pub fn dataset_hash(data: &PreparedSubset) -> String {
    let mut h = Sha256::new();
    h.update(data.subset.to_string().as_bytes());
    for (id, m) in data.train.iter().chain(&data.test) {
        h.update(id.to_le_bytes());
        for v in m.data() {
            h.update(v.to_le_bytes());
        }
    }
    for r in &data.test_rul {
        h.update(r.to_le_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_rules() {
        let dec: Vec<f64> = (0..10).map(|i| 20.0 - i as f64).collect();
        assert_eq!(select_plateau_epoch(&dec, 5).unwrap(), 10);
        let v: Vec<f64> = (0..11).map(|i| (i as f64 - 6.0).abs()).collect();
        assert_eq!(select_plateau_epoch(&v, 5).unwrap(), 7);
        assert_eq!(select_plateau_epoch(&[3.0, 3.0, 3.0], 5).unwrap(), 1);
        assert!(select_plateau_epoch(&[], 5).is_err());
    }

    #[test]
    fn protocol_defaults_by_family() {
        let b = TrainConfig::for_model(SubsetId::FD001, Architecture::Lstm);
        assert_eq!((b.batch_size, b.lr_min, b.lr_max), (128, 1e-4, 5e-4));
        let t = TrainConfig::for_model(SubsetId::FD003, Architecture::Tfim);
        assert_eq!((t.batch_size, t.lr_min, t.lr_max), (210, 9e-5, 2e-4));
        assert_eq!(t.model.window, 40);
        assert_eq!(t.seeds.len(), 5);
    }

    #[test]
    fn overrides_keep_unset_defaults() {
        let base = TrainConfig::for_model(SubsetId::FD001, Architecture::Cnn);
        let cfg = TrainConfig::with_overrides(&base, "max_epochs = 7\n[model]\ndropout = 0.25\n").unwrap();
        assert_eq!(cfg.max_epochs, 7);
        assert_eq!(cfg.model.dropout, 0.25);
        assert_eq!(cfg.batch_size, 128);
        assert_eq!(cfg.model.architecture, Architecture::Cnn);
        let back = TrainConfig::with_overrides(&cfg, &cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn resolve_precedence() {
        let file = "subset = \"FD003\"\nbatch_size = 64\n[model]\narchitecture = \"lstm\"\n";
        let cfg = TrainConfig::resolve(Some(file), None, None).unwrap();
        assert_eq!((cfg.subset, cfg.model.architecture), (SubsetId::FD003, Architecture::Lstm));
        assert_eq!((cfg.batch_size, cfg.lr_max, cfg.model.window), (64, 5e-4, 40));
        let cfg = TrainConfig::resolve(Some(file), Some(SubsetId::FD001), Some(Architecture::Tfm)).unwrap();
        assert_eq!((cfg.subset, cfg.model.architecture, cfg.batch_size), (SubsetId::FD001, Architecture::Tfm, 64));
        assert_eq!(cfg.lr_max, 2e-4);
        assert!(TrainConfig::resolve(None, None, None).is_err());
    }

    #[test]
    fn derived_seeds_differ_by_purpose() {
        assert_ne!(derive_seed(1, "init", 0), derive_seed(1, "train", 0));
        assert_ne!(derive_seed(1, "init", 0), derive_seed(1, "init", 1));
        assert_eq!(derive_seed(9, "x", 3), derive_seed(9, "x", 3));
    }
}
