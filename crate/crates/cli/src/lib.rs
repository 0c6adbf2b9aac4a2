//! Command implementations behind the `vdc` binary. Each command returns a
//! serializable report; the binary prints it as JSON.

pub mod project;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vdc_core::data::save_cache;
use vdc_core::metrics::{evaluate, stability_report, EvalOptions, MetricsReport, StabilityReport};
use vdc_core::trainer::{load_run, load_run_at, run_id, train, CheckpointBundle, GmmSummary, RunManifest};
use vdc_core::{
    load_dataset, sample_generative, split, Dataset, Error, LossBreakdown, Precision, RunConfig, Scalar,
};

/// Process exit status for a failed command.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        Some(Error::NonFiniteLoss { .. }) => 3,
        _ => 1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SplitChoice {
    Train,
    Test,
    All,
}

fn precision_of(manifest: &RunManifest) -> Result<Precision> {
    match manifest.precision.as_str() {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => bail!("run manifest names unknown precision `{other}`"),
    }
}

/// Loads the configured data and picks one side of the configured split.
pub fn load_split(config: &RunConfig, which: Option<SplitChoice>) -> Result<Dataset> {
    let data = load_dataset(&config.data)?;
    let which = which.unwrap_or(if config.split.is_some() { SplitChoice::Test } else { SplitChoice::All });
    match (which, &config.split) {
        (SplitChoice::All, _) => Ok(data),
        (side, Some(s)) => {
            let (train, test) = split(&data, s.test_fraction, s.seed)?;
            Ok(if side == SplitChoice::Train { train } else { test })
        }
        (side, None) => bail!("config has no [split] section, so there is no {side:?} split; use `--split all`"),
    }
}

fn training_data(config: &RunConfig) -> Result<Dataset> {
    load_split(config, Some(if config.split.is_some() { SplitChoice::Train } else { SplitChoice::All }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub run_dir: Option<PathBuf>,
    pub run_id: String,
    pub precision: Precision,
    pub steps: u64,
    pub final_loss: Option<LossBreakdown>,
    pub gmm: Option<GmmSummary>,
}

fn summarize<T: Scalar>(config: &RunConfig, bundle: &CheckpointBundle<T>) -> TrainSummary {
    TrainSummary {
        run_dir: config.train.checkpoint_dir.clone(),
        run_id: run_id(config),
        precision: config.model.precision,
        steps: bundle.step,
        final_loss: bundle.last_loss,
        gmm: bundle.gmm.clone(),
    }
}

fn train_and_eval<T: Scalar>(
    config: &RunConfig,
    train_data: &Dataset,
    eval_data: &Dataset,
    options: &EvalOptions,
) -> Result<(TrainSummary, MetricsReport)> {
    let bundle = train::<T>(config, train_data, &mut ())?;
    let report = evaluate(&bundle.model, eval_data, options)?;
    Ok((summarize(config, &bundle), report))
}

fn train_eval_dispatch(
    config: &RunConfig,
    train_data: &Dataset,
    eval_data: &Dataset,
    options: &EvalOptions,
) -> Result<(TrainSummary, MetricsReport)> {
    match config.model.precision {
        Precision::F32 => train_and_eval::<f32>(config, train_data, eval_data, options),
        Precision::F64 => train_and_eval::<f64>(config, train_data, eval_data, options),
    }
}

/// Trains one run; without an explicit output directory the run is written
/// to `runs/<run id>`.
pub fn cmd_train(mut config: RunConfig, seed: Option<u64>, out: Option<PathBuf>) -> Result<TrainSummary> {
    if let Some(seed) = seed {
        config.train.seed = seed;
    }
    if let Some(out) = out {
        config.train.checkpoint_dir = Some(out);
    }
    if config.train.checkpoint_dir.is_none() {
        config.train.checkpoint_dir = Some(PathBuf::from("runs").join(run_id(&config)));
    }
    let data = training_data(&config)?;
    info!("training on {} samples of shape {}", data.len(), data.shape);
    let summary = match config.model.precision {
        Precision::F32 => summarize(&config, &train::<f32>(&config, &data, &mut ())?),
        Precision::F64 => summarize(&config, &train::<f64>(&config, &data, &mut ())?),
    };
    Ok(summary)
}

fn eval_loaded<T: Scalar>(run: &Path, step: Option<u64>, data: &Dataset, options: &EvalOptions) -> Result<MetricsReport> {
    let (_, bundle) = load_run_at::<T>(run, step)?;
    Ok(evaluate(&bundle.model, data, options)?)
}

/// Scores the latest checkpoint of a run, or the one written after `step`.
pub fn cmd_eval(
    run: &Path,
    step: Option<u64>,
    which: Option<SplitChoice>,
    importance_samples: usize,
    seed: u64,
) -> Result<MetricsReport> {
    let manifest = RunManifest::load(run)?;
    let data = load_split(&manifest.config, which)?;
    let options = EvalOptions {
        importance_samples,
        seed,
        ..EvalOptions::default()
    };
    match precision_of(&manifest)? {
        Precision::F32 => eval_loaded::<f32>(run, step, &data, &options),
        Precision::F64 => eval_loaded::<f64>(run, step, &data, &options),
    }
}

/// Parses `a..b` or `a..=b` (both inclusive) or a single count.
pub fn parse_k_range(text: &str) -> Result<(usize, usize)> {
    let parse = |s: &str| -> Result<usize> { s.trim().parse().with_context(|| format!("bad cluster count `{s}`")) };
    let (a, b) = match text.split_once("..") {
        Some((a, b)) => (parse(a)?, parse(b.trim_start_matches('='))?),
        None => {
            let k = parse(text)?;
            (k, k)
        }
    };
    ensure!(a <= b, "cluster range {text} is empty");
    ensure!(a >= 2, "cluster range must start at 2 or more, got {a}");
    Ok((a, b))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectKRow {
    pub clusters: usize,
    pub neg_log_px: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nmi: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectKReport {
    pub seed: u64,
    pub importance_samples: usize,
    pub rows: Vec<SelectKRow>,
    /// Cluster count with the lowest `neg_log_px`.
    pub argmin: usize,
}

/// Trains one independent model per cluster count (same seed for all) and
/// scores each by the importance-sampled `−ln p(x)` on held-out data.
pub fn cmd_select_k(
    mut config: RunConfig,
    range: (usize, usize),
    seed: Option<u64>,
    importance_samples: usize,
) -> Result<SelectKReport> {
    ensure!(importance_samples > 0, "select-k needs at least one importance sample");
    if let Some(seed) = seed {
        config.train.seed = seed;
    }
    config.train.checkpoint_dir = None;
    let train_data = training_data(&config)?;
    let eval_data = load_split(&config, None)?;
    let options = EvalOptions {
        importance_samples,
        seed: config.train.seed,
        ..EvalOptions::default()
    };
    let mut rows = Vec::new();
    for c in range.0..=range.1 {
        let mut cfg = config.clone();
        cfg.model.clusters = c;
        cfg.validate()?;
        let (_, report) = train_eval_dispatch(&cfg, &train_data, &eval_data, &options)
            .with_context(|| format!("select-k run with {c} clusters"))?;
        let nll = report.neg_log_px.expect("importance samples requested");
        info!("C = {c}: -ln p(x) = {nll:.4}");
        rows.push(SelectKRow {
            clusters: c,
            neg_log_px: nll,
            accuracy: report.accuracy,
            nmi: report.nmi,
        });
    }
    let argmin = rows
        .iter()
        .min_by(|a, b| a.neg_log_px.total_cmp(&b.neg_log_px))
        .map(|r| r.clusters)
        .expect("non-empty range");
    Ok(SelectKReport {
        seed: config.train.seed,
        importance_samples,
        rows,
        argmin,
    })
}

/// Human-readable sweep table; the minimum is starred.
pub fn render_select_k(report: &SelectKReport) -> String {
    let mut out = String::from("  C   -ln p(x)\n");
    for r in &report.rows {
        let mark = if r.clusters == report.argmin { " *" } else { "" };
        out.push_str(&format!("{:>3}   {:>10.4}{mark}\n", r.clusters, r.neg_log_px));
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerateSummary {
    pub out: PathBuf,
    pub count: usize,
    pub cluster_counts: Vec<usize>,
}

fn column_names(shape: vdc_core::SampleShape) -> Vec<String> {
    let mut names = Vec::with_capacity(shape.len());
    for c in 0..shape.channels {
        for y in 0..shape.height {
            for x in 0..shape.width {
                names.push(if shape.height == 1 {
                    format!("c{c}_t{x}")
                } else {
                    format!("c{c}_y{y}_x{x}")
                });
            }
        }
    }
    names
}

fn generate_loaded<T: Scalar>(
    run: &Path,
    cluster: Option<usize>,
    count: usize,
    seed: u64,
    out: &Path,
) -> Result<GenerateSummary> {
    let (manifest, bundle) = load_run::<T>(run)?;
    let prior = bundle.model.mixture_prior()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batch = sample_generative(&prior, &bundle.model, count, cluster, &mut rng)?;
    let shape = manifest.sample_shape;
    if out.extension().is_some_and(|e| e == "vdc") {
        let ds = Dataset::new(batch.samples.clone(), Some(batch.clusters.clone()), shape, bundle.model.likelihood())?;
        save_cache(&ds, out)?;
    } else {
        let mut w = csv::Writer::from_path(out).with_context(|| format!("creating {}", out.display()))?;
        let mut header = vec!["cluster".to_string()];
        header.extend(column_names(shape));
        w.write_record(&header)?;
        for (row, c) in batch.samples.outer_iter().zip(&batch.clusters) {
            let mut rec = vec![c.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    let mut cluster_counts = vec![0; bundle.model.clusters()];
    for &c in &batch.clusters {
        cluster_counts[c] += 1;
    }
    Ok(GenerateSummary {
        out: out.to_path_buf(),
        count,
        cluster_counts,
    })
}

/// Samples from the learned generative model. A `.vdc` output is written
/// as a tensor cache, anything else as CSV with a `cluster` column.
pub fn cmd_generate(run: &Path, cluster: Option<usize>, count: usize, seed: u64, out: &Path) -> Result<GenerateSummary> {
    let manifest = RunManifest::load(run)?;
    match precision_of(&manifest)? {
        Precision::F32 => generate_loaded::<f32>(run, cluster, count, seed, out),
        Precision::F64 => generate_loaded::<f64>(run, cluster, count, seed, out),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbedSummary {
    pub out: PathBuf,
    pub rows: usize,
    pub latent_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plot: Option<PathBuf>,
}

fn embed_loaded<T: Scalar>(run: &Path, out: &Path, project: bool, plot: Option<&Path>) -> Result<EmbedSummary> {
    let (manifest, bundle) = load_run::<T>(run)?;
    let data = load_dataset(&manifest.config.data)?;
    let pred = bundle.model.predict_chunked(data.samples.view(), 4096)?;
    let d = pred.latents.ncols();
    let projected = if project {
        Some(project::pca_2d(pred.latents.view())?)
    } else {
        None
    };
    let mut w = csv::Writer::from_path(out).with_context(|| format!("creating {}", out.display()))?;
    let mut header = vec!["id".to_string()];
    header.extend((0..d).map(|j| format!("z{j}")));
    header.extend(["cluster".to_string(), "responsibility".to_string()]);
    if data.labels.is_some() {
        header.push("label".to_string());
    }
    if projected.is_some() {
        header.extend(["pc1".to_string(), "pc2".to_string()]);
    }
    w.write_record(&header)?;
    for i in 0..data.len() {
        let mut rec = vec![i.to_string()];
        rec.extend(pred.latents.row(i).iter().map(|v| v.to_string()));
        rec.push(pred.clusters[i].to_string());
        rec.push(pred.confidence[i].to_string());
        if let Some(labels) = &data.labels {
            rec.push(labels[i].to_string());
        }
        if let Some(p) = &projected {
            rec.push(p[[i, 0]].to_string());
            rec.push(p[[i, 1]].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    let plot = match (&projected, plot) {
        (Some(p), path) => {
            let path = path.map(Path::to_path_buf).unwrap_or_else(|| out.with_extension("png"));
            project::scatter_png(p.view(), &pred.clusters, 800, &path)?;
            Some(path)
        }
        (None, Some(_)) => {
            warn!("--plot ignored without --project 2d");
            None
        }
        (None, None) => None,
    };
    Ok(EmbedSummary {
        out: out.to_path_buf(),
        rows: data.len(),
        latent_dim: d,
        plot,
    })
}

/// Exports `(id, z, cluster, max responsibility[, label])` for every sample of the
/// run's dataset, optionally with a PCA projection and scatter plot.
pub fn cmd_embed(run: &Path, out: &Path, project: bool, plot: Option<&Path>) -> Result<EmbedSummary> {
    let manifest = RunManifest::load(run)?;
    match precision_of(&manifest)? {
        Precision::F32 => embed_loaded::<f32>(run, out, project, plot),
        Precision::F64 => embed_loaded::<f64>(run, out, project, plot),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub seed: u64,
    pub summary: TrainSummary,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StabilityOutput {
    pub trials: Vec<TrialResult>,
    pub summary: StabilityReport,
}

/// Runs `trials` trainings with seeds `base_seed, base_seed + 1, …` (or
/// `base_seed` throughout with `same_seed`) and aggregates their metrics.
/// With `out`, trial `i` is written to `out/trial-<i>`.
pub fn cmd_stability(
    mut config: RunConfig,
    trials: usize,
    base_seed: Option<u64>,
    same_seed: bool,
    importance_samples: usize,
    out: Option<&Path>,
) -> Result<StabilityOutput> {
    ensure!(trials >= 2, "stability needs at least 2 trials, got {trials}");
    let base = base_seed.unwrap_or(config.train.seed);
    config.train.checkpoint_dir = None;
    let train_data = training_data(&config)?;
    let eval_data = load_split(&config, None)?;
    let mut results = Vec::new();
    for trial in 0..trials {
        let mut cfg = config.clone();
        cfg.train.seed = if same_seed { base } else { base + trial as u64 };
        cfg.train.checkpoint_dir = out.map(|o| o.join(format!("trial-{trial}")));
        let options = EvalOptions {
            importance_samples,
            seed: cfg.train.seed,
            ..EvalOptions::default()
        };
        let (summary, report) = train_eval_dispatch(&cfg, &train_data, &eval_data, &options)
            .with_context(|| format!("trial {trial} (seed {}) failed", cfg.train.seed))?;
        info!("trial {trial}: accuracy {:?}", report.accuracy);
        results.push(TrialResult {
            trial,
            seed: cfg.train.seed,
            summary,
            report,
        });
    }
    let reports: Vec<MetricsReport> = results.iter().map(|r| r.report.clone()).collect();
    Ok(StabilityOutput {
        summary: stability_report(&reports)?,
        trials: results,
    })
}

/// Writes `value` as pretty JSON to `out`, or to stdout.
pub fn emit_json<S: Serialize>(value: &S, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match out {
        Some(path) => {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            writeln!(stdout, "{text}")?;
            Ok(())
        }
    }
}
