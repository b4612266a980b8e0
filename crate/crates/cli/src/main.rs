//! `rul`: command-line driver for ingesting C-MAPSS, training, evaluating,
//! ablating and plotting.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use rul_core::evaluation::{
    all_masks, checkpoint_average_predict, lowess_smooth, trajectory_curve, Ensemble, EvalReport,
};
use rul_core::ingest::{
    check_counts, parse_rul_labels, parse_subset, total_rows, write_normalized_cache, PreparedSubset, Split,
    SubsetId,
};
use rul_core::metrics::mean_std;
use rul_core::models::{Architecture, Model};
use rul_core::plot::{LineChart, Series};
use rul_core::reference;
use rul_core::synthetic::{write_synthetic_subset, SyntheticSpec};
use rul_core::training::{
    dataset_hash, limit_engines, load_seed_models, multi_run, seed_dir, MultiRunReport, RunManifest, TrainConfig,
};
use rul_core::windowing::RUL_CAP;

#[derive(Parser)]
#[command(name = "rul", version, about = "Remaining-useful-life models for the C-MAPSS benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a subset, check its counts and write a normalized cache.
    Ingest(IngestArgs),
    /// Run the cross-validated training protocol for one model.
    Train(TrainArgs),
    /// Re-score the test set from a run directory's checkpoints.
    Evaluate(RunArgs),
    /// Zero block latents and compare predictions.
    Ablate(AblateArgs),
    /// Plot the per-cycle prediction curve of one test engine.
    Plot(PlotArgs),
    /// Train with the protocol defaults and compare against published results.
    ReproduceTable(TrainArgs),
    /// Write a synthetic dataset in the C-MAPSS file layout.
    Synth(SynthArgs),
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Directory holding train_FD00X.txt, test_FD00X.txt and RUL_FD00X.txt.
    #[arg(long, env = "CMAPSS_DATA_DIR")]
    data_dir: PathBuf,
    /// Skip the reference trajectory and row count check.
    #[arg(long)]
    no_check: bool,
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    subset: SubsetId,
    /// Where to write the normalized CSV cache and stats sidecar.
    #[arg(long)]
    cache: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    subset: Option<SubsetId>,
    #[arg(long)]
    model: Option<Architecture>,
    /// TOML file overriding protocol defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    #[arg(long)]
    out: PathBuf,
    /// Maximum cross-validation epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Use only the first N training and test engines.
    #[arg(long)]
    engines: Option<usize>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    run_dir: PathBuf,
    #[arg(long, env = "CMAPSS_DATA_DIR")]
    data_dir: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Seed whose checkpoints to use; defaults to the first.
    #[arg(long)]
    seed: Option<u64>,
    /// Test engine for the per-cycle curve.
    #[arg(long)]
    engine: Option<u32>,
    /// Comma-separated 0/1 flags, one per block; 1 zeroes that block.
    #[arg(long, value_delimiter = ',')]
    mask: Option<Vec<u8>>,
    /// Score every mask combination on the test set.
    #[arg(long)]
    all_masks: bool,
}

#[derive(Args)]
struct PlotArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    engine: u32,
    /// LOWESS fraction for an added smoothed curve.
    #[arg(long)]
    smooth: Option<f64>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "FD001")]
    subset: SubsetId,
    /// Engines per split.
    #[arg(long, default_value_t = 10)]
    engines: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Match the FD001 engine count and training row total.
    #[arg(long)]
    fd001_like: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Train(a) => cmd_train(a, "train").map(|_| ()),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Plot(a) => cmd_plot(a),
        Command::ReproduceTable(a) => cmd_reproduce(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_ingest(a: IngestArgs) -> Result<()> {
    let root = &a.data.data_dir;
    let train = parse_subset(root, a.subset, Split::Train)?;
    let test = parse_subset(root, a.subset, Split::Test)?;
    let labels = parse_rul_labels(root, a.subset, test.len())?;
    let meta = a.subset.meta();
    println!("{:<6} {:>12} {:>12} {:>10} {:>10}", "split", "trajectories", "expected", "rows", "expected");
    for (split, t) in [(Split::Train, &train), (Split::Test, &test)] {
        let (et, er) = meta.expected(split);
        println!("{:<6} {:>12} {:>12} {:>10} {:>10}", split, t.len(), et, total_rows(t), er);
    }
    println!("RUL labels: {}", labels.len());
    if !a.data.no_check {
        check_counts(a.subset, Split::Train, &train)?;
        check_counts(a.subset, Split::Test, &test)?;
    }
    if let Some(cache) = &a.cache {
        let data = PreparedSubset::from_trajectories(a.subset, &train, &test, labels)?;
        write_normalized_cache(cache, a.subset, Split::Train, &data.train, &data.stats)?;
        let p = write_normalized_cache(cache, a.subset, Split::Test, &data.test, &data.stats)?;
        println!("normalizer {} cached under {}", data.stats.hash(), p.parent().unwrap_or(cache).display());
    }
    Ok(())
}

fn resolve_config(a: &TrainArgs) -> Result<TrainConfig> {
    let file = match &a.config {
        Some(p) => Some(fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let mut cfg = TrainConfig::resolve(file.as_deref(), a.subset, a.model)
        .context("resolving the training configuration")?;
    if let Some(s) = &a.seed {
        cfg.seeds = s.clone();
    }
    if let Some(e) = a.epochs {
        cfg.max_epochs = e;
    }
    if a.engines.is_some() {
        cfg.max_engines = a.engines;
    }
    if let Some(f) = a.folds {
        cfg.folds = f;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(root: &Path, subset: SubsetId, check: bool) -> Result<PreparedSubset> {
    PreparedSubset::load(root, subset, check).with_context(|| format!("loading {subset} from {}", root.display()))
}

fn cmd_train(a: TrainArgs, command: &str) -> Result<MultiRunReport> {
    let cfg = resolve_config(&a)?;
    let data = load_data(&a.data.data_dir, cfg.subset, !a.data.no_check)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let manifest = RunManifest::new(command, &cfg, dataset_hash(&data), &a.out);
    manifest.write(&a.out)?;
    println!(
        "{} on {}: {} seeds, up to {} epochs, W={}",
        cfg.model.architecture,
        cfg.subset,
        cfg.seeds.len(),
        cfg.max_epochs,
        cfg.model.window
    );
    let report = multi_run(&cfg, &data, Some(&a.out))?;
    for r in &report.runs {
        println!(
            "seed {:>4}: plateau epoch {:>3}  RMSE {:>7.3}  score {:>9.2}",
            r.seed, r.plateau_epoch, r.rmse, r.score
        );
    }
    for (seed, err) in &report.failures {
        eprintln!("seed {seed} failed: {err}");
    }
    if !report.runs.is_empty() {
        println!(
            "RMSE {:.3} ± {:.3}  score {:.2} ± {:.2}",
            report.rmse_mean, report.rmse_std, report.score_mean, report.score_std
        );
    }
    if !report.complete {
        bail!("{} of {} seeds failed", report.failures.len(), cfg.seeds.len());
    }
    Ok(report)
}

fn cmd_reproduce(a: TrainArgs) -> Result<()> {
    let report = cmd_train(a, "reproduce-table")?;
    match reference::lookup(report.subset, report.architecture) {
        Some(r) => {
            let pm = |v: Option<f64>| v.map(|s| format!(" ± {s}")).unwrap_or_default();
            println!("published: RMSE {}{}  score {}{}", r.rmse, pm(r.rmse_std), r.score, pm(r.score_std));
            println!(
                "difference: RMSE {:+.3}  score {:+.2}",
                report.rmse_mean - r.rmse,
                report.score_mean - r.score
            );
        }
        None => println!("no published result for {} on {}", report.architecture, report.subset),
    }
    Ok(())
}

struct RunContext {
    manifest: RunManifest,
    data: PreparedSubset,
}

fn open_run(a: &RunArgs) -> Result<RunContext> {
    let manifest = RunManifest::load(&a.run_dir)?;
    let full = load_data(&a.data_dir, manifest.config.subset, false)?;
    if dataset_hash(&full) != manifest.dataset_hash {
        bail!(
            "data in {} differs from the data the run was trained on",
            a.data_dir.display()
        );
    }
    let data = limit_engines(&full, manifest.config.max_engines);
    Ok(RunContext { manifest, data })
}

fn pick_seed(ctx: &RunContext, seed: Option<u64>) -> Result<u64> {
    match seed {
        Some(s) if ctx.manifest.seeds.contains(&s) => Ok(s),
        Some(s) => bail!("seed {s} is not part of this run ({:?})", ctx.manifest.seeds),
        None => ctx.manifest.seeds.first().copied().ok_or_else(|| anyhow!("run has no seeds")),
    }
}

fn test_engine(ctx: &RunContext, engine: u32) -> Result<usize> {
    ctx.data
        .test
        .iter()
        .position(|(id, _)| *id == engine)
        .ok_or_else(|| anyhow!("unknown test engine id {engine}"))
}

fn score_models(ctx: &RunContext, models: &[Model], mask: Option<&[bool]>) -> Result<EvalReport> {
    let required = ctx.manifest.config.averaged_checkpoints;
    let preds = checkpoint_average_predict(models, &ctx.data.test, required, mask)?;
    let ids: Vec<u32> = ctx.data.test.iter().map(|t| t.0).collect();
    Ok(EvalReport::from_predictions(
        ctx.data.subset,
        &ids,
        &preds,
        &ctx.data.test_rul,
        Some("model.json".into()),
    )?)
}

fn cmd_evaluate(a: RunArgs) -> Result<()> {
    let ctx = open_run(&a)?;
    let mut rmses = Vec::new();
    let mut scores = Vec::new();
    let mut csv = String::from("seed,rmse,score\n");
    for &seed in &ctx.manifest.seeds {
        let dir = seed_dir(&a.run_dir, seed);
        let models = load_seed_models(&dir)?;
        let report = score_models(&ctx, &models, None)?;
        report.save(&dir, "evaluation")?;
        println!("seed {seed:>4}: RMSE {:>7.3}  score {:>9.2}", report.rmse, report.score);
        csv.push_str(&format!("{seed},{:?},{:?}\n", report.rmse, report.score));
        rmses.push(report.rmse);
        scores.push(report.score);
    }
    let (rm, rs) = mean_std(&rmses);
    let (sm, ss) = mean_std(&scores);
    println!("RMSE {rm:.3} ± {rs:.3}  score {sm:.2} ± {ss:.2}");
    let path = a.run_dir.join("evaluation.csv");
    fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn mask_tag(mask: &[bool]) -> String {
    mask.iter().map(|&b| if b { '1' } else { '0' }).collect()
}

/// True RUL of a test engine at every observed cycle.
fn true_curve(ctx: &RunContext, idx: usize) -> Vec<f64> {
    let t = ctx.data.test[idx].1.rows();
    let last = ctx.data.test_rul[idx] as f64;
    (1..=t).map(|c| last + (t - c) as f64).collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let ctx = open_run(&a.run)?;
    let seed = pick_seed(&ctx, a.seed)?;
    let models = load_seed_models(&seed_dir(&a.run.run_dir, seed))?;
    let blocks = models[0].num_blocks();
    if blocks == 0 {
        bail!("{} has no feature blocks to ablate", models[0].config().architecture);
    }
    let out = a.run.run_dir.join("ablation");
    let masks: Vec<Vec<bool>> = if a.all_masks {
        all_masks(blocks)
    } else {
        let raw = a.mask.clone().ok_or_else(|| anyhow!("pass --mask or --all-masks"))?;
        if raw.len() != blocks {
            bail!("mask has {} entries, model has {blocks} blocks", raw.len());
        }
        if raw.iter().any(|&v| v > 1) {
            bail!("mask entries must be 0 or 1");
        }
        vec![raw.iter().map(|&v| v == 1).collect()]
    };
    let mut table = String::from("mask,rmse,score\n");
    for mask in &masks {
        let report = score_models(&ctx, &models, Some(mask))?;
        println!("mask {}: RMSE {:>7.3}  score {:>9.2}", mask_tag(mask), report.rmse, report.score);
        table.push_str(&format!("{},{:?},{:?}\n", mask_tag(mask), report.rmse, report.score));
    }
    write_text(&out.join(format!("seed-{seed}-metrics.csv")), &table)?;

    if let Some(engine) = a.engine {
        let idx = test_engine(&ctx, engine)?;
        let m = &ctx.data.test[idx].1;
        let truth = true_curve(&ctx, idx);
        let base = trajectory_curve(&Ensemble { models: &models, mask: None }, m, engine)?;
        let mut chart = LineChart {
            title: format!("engine {engine}: block ablation"),
            x_label: "cycle".into(),
            y_label: "RUL".into(),
            series: vec![
                Series::from_values("true RUL", &truth).dashed(),
                Series::from_values("no mask", &base),
            ],
            notes: Vec::new(),
        };
        let mut csv = String::from("cycle,true_rul,no_mask");
        let mut curves = Vec::new();
        for mask in masks.iter().filter(|m| m.iter().any(|&b| b)) {
            let c = trajectory_curve(&Ensemble { models: &models, mask: Some(mask) }, m, engine)?;
            csv.push_str(&format!(",mask_{}", mask_tag(mask)));
            chart.series.push(Series::from_values(format!("mask {}", mask_tag(mask)), &c));
            curves.push(c);
        }
        csv.push('\n');
        for i in 0..truth.len() {
            csv.push_str(&format!("{},{:?},{:?}", i + 1, truth[i], base[i]));
            for c in &curves {
                csv.push_str(&format!(",{:?}", c[i]));
            }
            csv.push('\n');
        }
        let stem = format!("seed-{seed}-engine-{engine}");
        write_text(&out.join(format!("{stem}.csv")), &csv)?;
        chart.save(&out.join(format!("{stem}.svg")))?;
        println!("wrote {}", out.join(format!("{stem}.svg")).display());
    }
    Ok(())
}

fn cmd_plot(a: PlotArgs) -> Result<()> {
    let ctx = open_run(&a.run)?;
    let seed = pick_seed(&ctx, a.seed)?;
    let models = load_seed_models(&seed_dir(&a.run.run_dir, seed))?;
    let idx = test_engine(&ctx, a.engine)?;
    let m = &ctx.data.test[idx].1;
    let truth = true_curve(&ctx, idx);
    let capped: Vec<f64> = truth.iter().map(|v| v.min(RUL_CAP as f64)).collect();
    let pred = trajectory_curve(&Ensemble { models: &models, mask: None }, m, a.engine)?;
    let smooth = match a.smooth {
        Some(f) => Some(lowess_smooth(&pred, f)?),
        None => None,
    };
    let last = pred.len() - 1;
    let mut chart = LineChart {
        title: format!("{} engine {}", ctx.data.subset, a.engine),
        x_label: "cycle".into(),
        y_label: "RUL".into(),
        series: vec![
            Series::from_values("true RUL", &truth).dashed(),
            Series::from_values("capped RUL", &capped).dashed(),
            Series::from_values("predicted", &pred),
        ],
        notes: vec![format!("AE at last cycle: {:.2}", (pred[last] - truth[last]).abs())],
    };
    let mut csv = String::from("cycle,true_rul,capped_rul,predicted");
    if let (Some(s), Some(f)) = (&smooth, a.smooth) {
        chart.series.push(Series::from_values(format!("LOWESS {f}"), s));
        csv.push_str(",smoothed");
    }
    csv.push('\n');
    for i in 0..pred.len() {
        csv.push_str(&format!("{},{:?},{:?},{:?}", i + 1, truth[i], capped[i], pred[i]));
        if let Some(s) = &smooth {
            csv.push_str(&format!(",{:?}", s[i]));
        }
        csv.push('\n');
    }
    let stem = match a.smooth {
        Some(_) => format!("seed-{seed}-engine-{}-smoothed", a.engine),
        None => format!("seed-{seed}-engine-{}", a.engine),
    };
    let out = a.run.run_dir.join("plots");
    write_text(&out.join(format!("{stem}.csv")), &csv)?;
    chart.save(&out.join(format!("{stem}.svg")))?;
    println!("wrote {}", out.join(format!("{stem}.svg")).display());
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let spec = if a.fd001_like {
        SyntheticSpec::fd001_like(a.seed)
    } else {
        SyntheticSpec::small(a.engines, a.seed)
    };
    write_synthetic_subset(&a.out, a.subset, &spec)?;
    println!("wrote synthetic {} to {}", a.subset, a.out.display());
    Ok(())
}
