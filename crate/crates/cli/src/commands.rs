use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, ValueEnum};
use lesionattn::analysis::{
    alignment_stats, model_attention, plot_curves, prediction_rows, read_predictions, render_overlay, stratified_sample,
    write_predictions, AlignmentStats, BinarizeMode, ReportBundle,
};
use lesionattn::data::{
    apply_assignment, dataset_summary, generate_synthetic, load_dataset_dir, load_real_dataset, read_assignment,
    save_dataset, split_dataset, write_assignment, DatasetSplit, MalignantSet, SplitPart,
};
use lesionattn::experiment::{
    best_configurations, emit_candidates, grid_search, predict_scores, train_in_dir, Method, RunOptions, RunRecord,
    RunStatus, BEST_CHECKPOINT_FILE, REPORT_FILE,
};
use lesionattn::fairmetrics::{fairness_report, fairness_report_bootstrap, GroupedPredictions};
use lesionattn::model::{Checkpoint, Rann};
use lesionattn::pareto::{pareto_frontier, read_candidates_csv, select_final, write_candidates_csv, SelectionPolicy};
use lesionattn::{Error, Result};
use serde_json::json;

use crate::config::CliConfig;

/// Resolved global options.
pub struct Ctx {
    pub workdir: PathBuf,
    pub config: CliConfig,
}

impl Ctx {
    pub fn path(&self, p: &Path) -> PathBuf {
        self.workdir.join(p)
    }
}

fn io_err(context: String) -> impl FnOnce(std::io::Error) -> Error {
    move |source| Error::Io { context, source }
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(io_err(format!("creating {}", p.display())))
}

fn write_json(p: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(p, text).map_err(io_err(format!("writing {}", p.display())))
}

fn print_json(value: &serde_json::Value) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn parse_key_value(s: &str) -> Result<(&str, &str)> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| Error::InvalidValue(format!("expected key=value, got {s:?}")))
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Part {
    Train,
    Validation,
    Test,
}

impl From<Part> for SplitPart {
    fn from(p: Part) -> Self {
        match p {
            Part::Train => SplitPart::Train,
            Part::Validation => SplitPart::Validation,
            Part::Test => SplitPart::Test,
        }
    }
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// Dataset directory written by `generate` or `ingest`.
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    /// Split assignment CSV written by `split`.
    #[arg(long, default_value = "split.csv")]
    pub split: PathBuf,
}

impl DataArgs {
    fn load(&self, ctx: &Ctx) -> Result<DatasetSplit<f32>> {
        let loaded = load_dataset_dir::<f32>(&ctx.path(&self.data), &MalignantSet::ham())?;
        let assignment = read_assignment(&ctx.path(&self.split))?;
        apply_assignment(loaded.samples, &assignment)
    }
}

/// A trained model, named either by its run directory or a checkpoint file.
#[derive(Args, Debug)]
#[group(required = true, multiple = false)]
pub struct ModelArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

impl ModelArgs {
    fn checkpoint_path(&self, ctx: &Ctx) -> PathBuf {
        match (&self.run, &self.checkpoint) {
            (Some(run), _) => ctx.path(run).join(BEST_CHECKPOINT_FILE),
            (None, Some(c)) => ctx.path(c),
            (None, None) => unreachable!("clap requires one of --run/--checkpoint"),
        }
    }

    fn load(&self, ctx: &Ctx) -> Result<Rann<f32>> {
        Checkpoint::load(&self.checkpoint_path(ctx))?.to_model()
    }

    fn name(&self) -> String {
        let p = self.run.as_ref().or(self.checkpoint.as_ref()).expect("one is set");
        p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
    }

    fn record(&self, ctx: &Ctx) -> Result<Option<RunRecord>> {
        match &self.run {
            Some(run) => {
                let p = ctx.path(run).join(REPORT_FILE);
                if p.exists() {
                    RunRecord::load(&p).map(Some)
                } else {
                    Ok(None)
                }
            }
            None => Ok(None),
        }
    }
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
    #[arg(long)]
    pub n_samples: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long)]
    pub lesion_signal_strength: Option<f64>,
    #[arg(long)]
    pub shortcut_strength: Option<f64>,
    #[arg(long)]
    pub context_dependence: Option<f64>,
    #[arg(long)]
    pub group_label_correlation: Option<f64>,
}

pub fn generate(ctx: &Ctx, a: &GenerateArgs) -> Result<()> {
    let mut spec = ctx.config.data.clone();
    if let Some(v) = a.n_samples {
        spec.n_samples = v;
    }
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    if let Some(v) = a.resolution {
        spec.resolution = v;
    }
    if let Some(v) = a.lesion_signal_strength {
        spec.lesion_signal_strength = v;
    }
    if let Some(v) = a.shortcut_strength {
        spec.shortcut_strength = v;
    }
    if let Some(v) = a.context_dependence {
        spec.context_dependence = v;
    }
    if let Some(v) = a.group_label_correlation {
        spec.group_label_correlation = v;
    }
    let samples = generate_synthetic::<f32>(&spec)?;
    let out = ctx.path(&a.out);
    save_dataset(&samples, &out)?;
    write_json(&out.join("spec.json"), &spec)?;
    print_json(&json!({
        "out": a.out,
        "n_samples": samples.len(),
        "summary": dataset_summary(&samples)?,
    }))
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// Metadata CSV with image_id, diagnosis, sex and age columns.
    #[arg(long)]
    pub metadata: PathBuf,
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// `ham`, `bcn`, or comma-separated diagnosis codes.
    #[arg(long)]
    pub malignant: Option<String>,
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
}

pub fn ingest(ctx: &Ctx, a: &IngestArgs) -> Result<()> {
    let malignant = MalignantSet::parse(a.malignant.as_deref().unwrap_or(&ctx.config.ingest.malignant));
    let masks = a.masks.as_ref().map(|m| ctx.path(m));
    let loaded = load_real_dataset::<f32>(&ctx.path(&a.metadata), &ctx.path(&a.images), masks.as_deref(), &malignant)?;
    save_dataset(&loaded.samples, &ctx.path(&a.out))?;
    print_json(&json!({
        "out": a.out,
        "n_samples": loaded.samples.len(),
        "dropped_missing_sex": loaded.dropped_missing_sex,
        "mask_source": loaded.mask_source,
        "summary": dataset_summary(&loaded.samples)?,
    }))
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[arg(long, default_value = "data")]
    pub data: PathBuf,
    #[arg(long, default_value = "split.csv")]
    pub out: PathBuf,
    /// Train, validation and test shares, e.g. `0.6,0.2,0.2`.
    #[arg(long)]
    pub ratios: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn parse_ratios(s: &str) -> Result<(f64, f64, f64)> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidValue(format!("cannot parse ratios {s:?}")))?;
    match v[..] {
        [a, b, c] => Ok((a, b, c)),
        _ => Err(Error::InvalidValue(format!("expected three ratios, got {s:?}"))),
    }
}

pub fn split(ctx: &Ctx, a: &SplitArgs) -> Result<()> {
    let ratios = match &a.ratios {
        Some(s) => parse_ratios(s)?,
        None => ctx.config.split.ratios,
    };
    let seed = a.seed.unwrap_or(ctx.config.split.seed);
    let loaded = load_dataset_dir::<f32>(&ctx.path(&a.data), &MalignantSet::ham())?;
    let split = split_dataset(loaded.samples, ratios, seed)?;
    write_assignment(&ctx.path(&a.out), &split.assignment())?;
    print_json(&json!({
        "out": a.out,
        "train": split.train.len(),
        "validation": split.validation.len(),
        "test": split.test.len(),
    }))
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub method: Option<Method>,
    /// Directory holding one subdirectory per run.
    #[arg(long, default_value = "runs")]
    pub runs: PathBuf,
    /// Defaults to `<method>_s<seed>`.
    #[arg(long)]
    pub run_id: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Hyperparameter override, repeatable (`--set lr=1e-4`).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Stop after this many epochs, leaving the run resumable.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

pub fn train(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let mut cfg = ctx.config.train.clone();
    if let Some(m) = a.method {
        cfg = cfg.with_method(m);
    }
    for o in &a.overrides {
        let (k, v) = parse_key_value(o)?;
        cfg.set(k, v)?;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let split = a.data.load(ctx)?;
    let run_id = a.run_id.clone().unwrap_or_else(|| format!("{}_s{}", cfg.method, cfg.seed));
    let dir = a.runs.join(&run_id);
    let mut hp = std::collections::BTreeMap::new();
    hp.insert("method".to_string(), cfg.method.to_string());
    for o in &a.overrides {
        let (k, v) = parse_key_value(o)?;
        hp.insert(k.to_string(), v.to_string());
    }
    let options = RunOptions {
        stop_after_epochs: a.stop_after,
    };
    match train_in_dir(&cfg, &split, &ctx.path(&dir), &run_id, hp, options)? {
        RunStatus::Finished(o) => print_json(&json!({
            "run_id": run_id,
            "dir": dir,
            "status": "finished",
            "best_epoch": o.record.best_epoch,
            "epochs_run": o.record.epoch_history.len(),
            "stopped_early": o.record.stopped_early,
            "validation": o.record.validation_report,
            "test": o.record.test_report,
        })),
        RunStatus::Paused { epochs_done } => print_json(&json!({
            "run_id": run_id,
            "dir": dir,
            "status": "paused",
            "epochs_done": epochs_done,
        })),
    }
}

#[derive(Args, Debug)]
pub struct GridArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value = "grid")]
    pub out: PathBuf,
    /// Seeds per grid point.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Grid axis, repeatable (`--axis lr=1e-3,1e-4`); replaces the same key
    /// from the config file.
    #[arg(long = "axis", value_name = "KEY=V1,V2")]
    pub axes: Vec<String>,
    /// Base hyperparameter override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

pub fn gridsearch(ctx: &Ctx, a: &GridArgs) -> Result<()> {
    let mut base = ctx.config.train.clone();
    for o in &a.overrides {
        let (k, v) = parse_key_value(o)?;
        base.set(k, v)?;
    }
    let mut grid = ctx.config.grid();
    for axis in &a.axes {
        let (k, v) = parse_key_value(axis)?;
        grid.insert(k.to_string(), v.split(',').map(|s| s.trim().to_string()).collect());
    }
    let seeds = a.seeds.unwrap_or(ctx.config.gridsearch.seeds);
    let split = a.data.load(ctx)?;
    let out = ctx.path(&a.out);
    create_dir(&out)?;
    let records = grid_search(&base, &grid, &split, seeds, Some(&out))?;
    let candidates = emit_candidates(&records)?;
    let frontier = pareto_frontier(&candidates)?;
    let csv_path = out.join("candidates.csv");
    let file = fs::File::create(&csv_path).map_err(io_err(format!("creating {}", csv_path.display())))?;
    write_candidates_csv(file, &candidates, Some(&frontier))?;
    let best = best_configurations(&records)?;
    let best: std::collections::BTreeMap<String, _> = best.into_iter().map(|(m, b)| (m.to_string(), b)).collect();
    write_json(&out.join("best.json"), &best)?;
    print_json(&json!({
        "runs": records.len(),
        "candidates": a.out.join("candidates.csv"),
        "frontier": frontier.members().iter().map(|c| c.id.clone()).collect::<Vec<_>>(),
        "best": best,
    }))
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value_t = Part::Test)]
    pub part: Part,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Bootstrap resamples for confidence intervals.
    #[arg(long)]
    pub bootstrap: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub bootstrap_seed: u64,
    /// Remove every lesion mask before scoring.
    #[arg(long)]
    pub drop_masks: bool,
    /// Defaults to `eval/<model name>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn evaluate(ctx: &Ctx, a: &EvaluateArgs) -> Result<()> {
    let model = a.model.load(ctx)?;
    let split = a.data.load(ctx)?;
    let mut data = split.part(a.part.into()).to_vec();
    if a.drop_masks {
        for s in &mut data {
            s.mask = None;
        }
    }
    let threshold = match (a.threshold, ctx.config.evaluate.threshold, a.model.record(ctx)?) {
        (Some(t), _, _) | (None, Some(t), _) => t,
        (None, None, Some(r)) => r.config.threshold,
        (None, None, None) => ctx.config.train.threshold,
    };
    let scores = predict_scores(&model, &data)?;
    let preds = GroupedPredictions::new(
        scores.clone(),
        data.iter().map(|s| s.label).collect(),
        data.iter().map(|s| s.group).collect(),
    )?;
    let n_boot = a.bootstrap.unwrap_or(ctx.config.evaluate.bootstrap);
    let report = if n_boot > 0 {
        fairness_report_bootstrap(&preds, threshold, n_boot, a.bootstrap_seed)?
    } else {
        fairness_report(&preds, threshold)?
    };
    let out_rel = a.out.clone().unwrap_or_else(|| Path::new("eval").join(a.model.name()));
    let out = ctx.path(&out_rel);
    create_dir(&out)?;
    let part = SplitPart::from(a.part).name();
    write_json(&out.join(format!("{part}_report.json")), &report)?;
    write_predictions(&out.join(format!("{part}_predictions.csv")), &prediction_rows(&data, &scores)?)?;
    print_json(&json!({
        "out": out_rel,
        "part": part,
        "report": report,
    }))
}

#[derive(Args, Debug)]
pub struct SelectArgs {
    /// CSV with id, p_pred, p_fair and optional hyperparameter columns.
    #[arg(long)]
    pub candidates: PathBuf,
    #[arg(long)]
    pub policy: Option<SelectionPolicy>,
    /// Also write the candidates with an `on_frontier` column here.
    #[arg(long)]
    pub frontier_out: Option<PathBuf>,
}

pub fn select(ctx: &Ctx, a: &SelectArgs) -> Result<()> {
    let path = ctx.path(&a.candidates);
    let file = fs::File::open(&path).map_err(io_err(format!("reading {}", path.display())))?;
    let candidates = read_candidates_csv::<f64, _>(file)?;
    let frontier = pareto_frontier(&candidates)?;
    let chosen = select_final(&frontier, a.policy.unwrap_or(ctx.config.select.policy))?;
    if let Some(f) = &a.frontier_out {
        let p = ctx.path(f);
        let file = fs::File::create(&p).map_err(io_err(format!("creating {}", p.display())))?;
        write_candidates_csv(file, &candidates, Some(&frontier))?;
    }
    println!("{}", chosen.id);
    Ok(())
}

#[derive(Args, Debug)]
pub struct AuditArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, value_enum, default_value_t = Part::Test)]
    pub part: Part,
    #[arg(long)]
    pub mode: Option<BinarizeMode>,
    /// Overlays rendered per (group, label) cell.
    #[arg(long)]
    pub overlays_per_stratum: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Defaults to `audit/<model name>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub const ALIGNMENT_FILE: &str = "alignment.json";

pub fn attn_audit(ctx: &Ctx, a: &AuditArgs) -> Result<()> {
    let model = a.model.load(ctx)?;
    let split = a.data.load(ctx)?;
    let data = split.part(a.part.into());
    let mode = a.mode.unwrap_or(ctx.config.audit.mode);
    let stats = alignment_stats(&model, data, mode)?;
    let out_rel = a.out.clone().unwrap_or_else(|| Path::new("audit").join(a.model.name()));
    let out = ctx.path(&out_rel);
    create_dir(&out.join("overlays"))?;
    write_json(&out.join(ALIGNMENT_FILE), &stats)?;

    let per = a.overlays_per_stratum.unwrap_or(ctx.config.audit.overlays_per_stratum);
    let seed = a.seed.unwrap_or(ctx.config.audit.seed);
    let r = model.config().input_resolution;
    let mut overlays = Vec::new();
    for i in stratified_sample(data, per, seed) {
        let s = &data[i];
        let (attn, _) = model_attention(&model, s)?;
        let image = if s.image.spatial() == (r, r) { s.image.clone() } else { s.image.resized(r, r) };
        let label = if s.label { "pos" } else { "neg" };
        let rel = out_rel.join("overlays").join(format!("{}_{}_{label}.png", s.source_id, s.group.name()));
        render_overlay(&image, &attn, &ctx.path(&rel))?;
        overlays.push(rel);
    }
    print_json(&json!({
        "out": out_rel,
        "mode": mode,
        "n": stats.per_image.len(),
        "median": stats.median,
        "sd": stats.sd,
        "strata": stats.strata,
        "overlays": overlays,
    }))
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// Predictions CSV written by `evaluate`.
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long, default_value = "plots")]
    pub out: PathBuf,
    /// File name prefix; defaults to the predictions file stem.
    #[arg(long)]
    pub stem: Option<String>,
}

pub fn plot(ctx: &Ctx, a: &PlotArgs) -> Result<()> {
    let rows = read_predictions(&ctx.path(&a.predictions))?;
    let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
    let labels: Vec<bool> = rows.iter().map(|r| r.label == 1).collect();
    let stem = a.stem.clone().unwrap_or_else(|| {
        a.predictions
            .file_stem()
            .map(|s| s.to_string_lossy().trim_end_matches("_predictions").to_string())
            .unwrap_or_else(|| "curves".into())
    });
    let files = plot_curves(&scores, &labels, &ctx.path(&a.out), &stem)?;
    let rel = |p: &Path| p.strip_prefix(&ctx.workdir).unwrap_or(p).to_path_buf();
    print_json(&json!({
        "roc_png": rel(&files.roc_png),
        "pr_png": rel(&files.pr_png),
        "roc_csv": rel(&files.roc_csv),
        "pr_csv": rel(&files.pr_csv),
    }))
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Directory whose subdirectories are finished runs.
    #[arg(long, default_value = "runs")]
    pub runs: PathBuf,
    /// Name under which the runs' test reports are filed.
    #[arg(long, default_value = "test")]
    pub cohort: String,
    /// Audit output directory, repeatable; keyed by its directory name.
    #[arg(long)]
    pub audit: Vec<PathBuf>,
    /// Plot file or directory of plot files, repeatable.
    #[arg(long)]
    pub plots: Vec<PathBuf>,
    #[arg(long, default_value = "report.json")]
    pub out: PathBuf,
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(format!("reading {}", dir.display())))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .map_err(io_err(format!("reading {}", dir.display())))?;
    v.sort();
    Ok(v)
}

pub fn report(ctx: &Ctx, a: &ReportArgs) -> Result<()> {
    let mut records = Vec::new();
    for d in sorted_entries(&ctx.path(&a.runs))? {
        let p = d.join(REPORT_FILE);
        if p.is_file() {
            records.push(RunRecord::load(&p)?);
        }
    }
    let mut bundle = ReportBundle::from_runs(&records, &a.cohort)?;
    for dir in &a.audit {
        let rel = dir.join(ALIGNMENT_FILE);
        let text = fs::read_to_string(ctx.path(&rel)).map_err(io_err(format!("reading {}", rel.display())))?;
        let stats: AlignmentStats = serde_json::from_str(&text).map_err(|e| Error::Format {
            path: rel.clone(),
            message: e.to_string(),
        })?;
        let key = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        bundle.alignment.insert(key, stats);
        bundle.files.push(rel);
    }
    for p in &a.plots {
        let full = ctx.path(p);
        if full.is_dir() {
            for f in sorted_entries(&full)? {
                if f.is_file() {
                    bundle.files.push(p.join(f.file_name().expect("listed file")));
                }
            }
        } else {
            bundle.files.push(p.clone());
        }
    }
    bundle.provenance.generated_unix = SystemTime::now().duration_since(UNIX_EPOCH).ok().map(|d| d.as_secs());
    bundle.write(&ctx.workdir, &a.out)?;
    print_json(&json!({
        "out": a.out,
        "methods": bundle.reports.keys().collect::<Vec<_>>(),
        "comparisons": bundle.comparisons,
    }))
}
