//! Thin command-line front end over the library: each subcommand reads
//! and writes the documented file formats and delegates all computation
//! to library calls.

use clap::{Args, Parser, Subcommand};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use tsrecourse::baselines::explain_baseline;
use tsrecourse::config::{parse_experiment_config, DatasetKind, DetectorKind, parse_anomaly};
use tsrecourse::detector::{train_autoencoder, AnomalyDetector, AutoencoderTrainConfig, Scorer};
use tsrecourse::error::{Error, Result};
use tsrecourse::eval::{
    extract_episodes, lambda_sweep, mix_seed, run_experiment, Episode, TrainedModel,
};
use tsrecourse::gvar::{train_gvar, GvarTrainConfig, PenaltyKind};
use tsrecourse::io::{
    checkpoint_kind, column_names, load_detector, load_gvar, load_predictor, load_recourse,
    read_detection_manifest, read_events_json, read_series_csv, read_stats_json, save_detector,
    save_gvar, save_predictor, save_recourse, write_detection_manifest, write_detections_csv,
    write_events_json, write_experiment_outputs, write_gvar_curve_csv, write_lambda_sweep_outputs,
    write_loss_curve_csv, write_matrix_csv, write_recourse_report, write_series_csv,
    write_stats_json, DetectionManifest, IO_SCHEMA,
};
use tsrecourse::recourse::{explain, train_recourse, ExplainConfig, RecourseTrainConfig};
use tsrecourse::series::{
    apply_standardizer, fit_standardizer, MultivariateSeries, StandardizationStats,
};
use tsrecourse::synth::inject::{inject_anomalies, AnomalySpec};
use tsrecourse::synth::linear::{gen_linear, LinearSystemParams};
use tsrecourse::synth::lv::{gen_lotka_volterra, LotkaVolterraParams};

#[derive(Parser)]
#[command(
    name = "tsrecourse",
    version,
    about = "Anomaly detection and minimal-intervention recourse for multivariate time series"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a dataset, optionally inject anomalies, and write
    /// series.csv, exogenous.csv, and events.json.
    Generate(GenerateArgs),
    /// Fit the lag-network dynamics model on a normal series.
    TrainGvar(TrainGvarArgs),
    /// Build a scorer and calibrate its detection threshold.
    TrainDetector(TrainDetectorArgs),
    /// Score a series and write per-step detections plus the episode index.
    Detect(DetectArgs),
    /// Train the recourse function on detected episodes.
    TrainRecourse(TrainRecourseArgs),
    /// Train a forecast-and-subtract baseline action model.
    TrainBaseline(TrainBaselineArgs),
    /// Produce per-episode intervention reports with a trained model.
    Explain(ExplainArgs),
    /// Run the full multi-seed experiment described by a config file.
    Evaluate(EvaluateArgs),
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Generate(a) => generate(a),
        Command::TrainGvar(a) => cmd_train_gvar(a),
        Command::TrainDetector(a) => cmd_train_detector(a),
        Command::Detect(a) => cmd_detect(a),
        Command::TrainRecourse(a) => cmd_train_recourse(a),
        Command::TrainBaseline(a) => cmd_train_baseline(a),
        Command::Explain(a) => cmd_explain(a),
        Command::Evaluate(a) => cmd_evaluate(a),
    }
}

/// Reads a series and standardizes it with the sidecar when given.
fn read_input_series(path: &Path, stats: Option<&PathBuf>) -> Result<MultivariateSeries> {
    let series = read_series_csv(path)?;
    match stats {
        Some(p) => apply_standardizer(&series, &read_stats_json(p)?),
        None => Ok(series),
    }
}

fn read_stats_or_identity(stats: Option<&PathBuf>, d: usize) -> Result<StandardizationStats> {
    match stats {
        Some(p) => read_stats_json(p),
        None => Ok(StandardizationStats::identity(d)),
    }
}

#[derive(Args)]
struct GenerateArgs {
    /// Generator family: linear or lotka_volterra.
    #[arg(long, default_value = "linear")]
    dataset: String,
    /// Total steps to simulate.
    #[arg(long, default_value_t = 70_000)]
    steps: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Anomaly kind: external_point, external_seq, or structural_seq.
    #[arg(long, default_value = "external_point")]
    anomaly: String,
    /// Fraction of eligible steps that start an anomaly; 0 disables injection.
    #[arg(long, default_value_t = 0.01)]
    rate: f64,
    /// Anomaly magnitude range in units of the clean signal's std.
    #[arg(long, default_value_t = 3.0)]
    mag_lo: f64,
    #[arg(long, default_value_t = 5.0)]
    mag_hi: f64,
    /// First step eligible for injection (defaults to a safety margin,
    /// or to 50 past --split when that is set).
    #[arg(long)]
    eligible_from: Option<usize>,
    /// One past the last step eligible for injection.
    #[arg(long)]
    eligible_to: Option<usize>,
    /// Also write train.csv (steps before the split) and test.csv (the
    /// rest, step 0 = the split). events.json stays in full coordinates;
    /// pass the split as --events-offset to detect.
    #[arg(long)]
    split: Option<usize>,
    /// Directory receiving series.csv, exogenous.csv, and events.json.
    #[arg(long)]
    out_dir: PathBuf,
}

fn generate(a: GenerateArgs) -> Result<()> {
    let dataset: DatasetKind = a.dataset.parse()?;
    fs::create_dir_all(&a.out_dir)?;
    let clean = match dataset {
        DatasetKind::Linear => gen_linear(&LinearSystemParams::sample(a.seed), a.steps)?,
        DatasetKind::LotkaVolterra => {
            gen_lotka_volterra(&LotkaVolterraParams::with_seed(a.seed), a.steps)?
        }
    };
    let dataset = if a.rate > 0.0 {
        let kind = parse_anomaly(&a.anomaly)?;
        let default_from = a.split.map(|s| s + 50);
        let eligible = match (a.eligible_from.or(default_from), a.eligible_to) {
            (None, None) => None,
            (from, to) => Some((from.unwrap_or(0), to.unwrap_or(a.steps))),
        };
        let spec = AnomalySpec {
            magnitude: (a.mag_lo, a.mag_hi),
            eligible,
            ..AnomalySpec::new(kind, a.rate, mix_seed(a.seed, "inject"))
        };
        inject_anomalies(&clean, &spec)?
    } else {
        clean
    };

    write_series_csv(&a.out_dir.join("series.csv"), &dataset.series)?;
    write_matrix_csv(
        &a.out_dir.join("exogenous.csv"),
        &column_names(&dataset.series),
        &dataset.exogenous,
    )?;
    write_events_json(&a.out_dir.join("events.json"), &dataset.injected)?;
    if let Some(split) = a.split {
        if let Some(ev) = dataset.injected.iter().find(|ev| ev.start < split) {
            return Err(Error::Placement(format!(
                "event at {} lands before the split at {split}; raise --eligible-from",
                ev.start
            )));
        }
        let train = dataset.series.slice_steps(0, split)?;
        let test = dataset.series.slice_steps(split, dataset.series.len())?;
        write_series_csv(&a.out_dir.join("train.csv"), &train)?;
        write_series_csv(&a.out_dir.join("test.csv"), &test)?;
    }
    println!(
        "wrote {} steps x {} dims, {} injected events, to {}",
        dataset.series.len(),
        dataset.series.dim(),
        dataset.injected.len(),
        a.out_dir.display()
    );
    Ok(())
}

#[derive(Args)]
struct TrainGvarArgs {
    /// Training series CSV (normal data only).
    #[arg(long)]
    series: PathBuf,
    /// Standardization sidecar to apply before training.
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Fit standardization on the input, save it here, and train on the
    /// standardized values. Mutually exclusive with --stats.
    #[arg(long, conflicts_with = "stats")]
    fit_stats: Option<PathBuf>,
    /// Window length K (number of lags).
    #[arg(long, default_value_t = 5)]
    window: usize,
    #[arg(long, default_value_t = 40)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    /// Sparsity penalty weight on the coefficient matrices.
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    /// Smoothness penalty weight on successive coefficient matrices.
    #[arg(long, default_value_t = 0.1)]
    gamma: f64,
    /// Sparsity penalty form: l1 or l2.
    #[arg(long, default_value = "l2")]
    penalty: String,
    /// Train on squared residual norms instead of plain norms.
    #[arg(long)]
    squared: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Optional per-epoch loss curve CSV.
    #[arg(long)]
    curve: Option<PathBuf>,
}

fn cmd_train_gvar(a: TrainGvarArgs) -> Result<()> {
    let mut series = read_input_series(&a.series, a.stats.as_ref())?;
    if let Some(fit_path) = &a.fit_stats {
        let stats = fit_standardizer(&series)?;
        write_stats_json(fit_path, &stats)?;
        series = apply_standardizer(&series, &stats)?;
    }
    let cfg = GvarTrainConfig {
        lambda_sparsity: a.lambda,
        gamma_smooth: a.gamma,
        penalty_kind: a.penalty.parse::<PenaltyKind>()?,
        squared_residual: a.squared,
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        seed: a.seed,
    };
    let (model, report) = train_gvar(&series, a.window, &cfg)?;
    save_gvar(&a.out, &model)?;
    if let Some(curve) = &a.curve {
        write_gvar_curve_csv(curve, &report.curve)?;
    }
    let last = report.final_record();
    println!(
        "trained {} lags on {} steps; final loss {:.6} (prediction {:.6})",
        a.window,
        series.len(),
        last.total,
        last.prediction
    );
    Ok(())
}

#[derive(Args)]
struct TrainDetectorArgs {
    /// Normal series CSV used for scorer training and threshold calibration.
    #[arg(long)]
    series: PathBuf,
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Scorer kind: residual or autoencoder.
    #[arg(long, default_value = "residual")]
    scorer: String,
    /// Dynamics-model checkpoint (required for the residual scorer).
    #[arg(long)]
    gvar: Option<PathBuf>,
    /// Window length for the autoencoder scorer.
    #[arg(long, default_value_t = 5)]
    window: usize,
    /// Score quantile that sets the threshold.
    #[arg(long, default_value_t = 0.99)]
    quantile: f64,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    /// Std of the denoising corruption applied to autoencoder inputs.
    #[arg(long, default_value_t = 0.1)]
    input_noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_train_detector(a: TrainDetectorArgs) -> Result<()> {
    let series = read_input_series(&a.series, a.stats.as_ref())?;
    let kind: DetectorKind = a.scorer.parse()?;
    let scorer = match kind {
        DetectorKind::Residual => {
            let path = a.gvar.as_ref().ok_or_else(|| {
                Error::Parameter("the residual scorer needs --gvar CHECKPOINT".into())
            })?;
            Scorer::Residual(load_gvar(path)?)
        }
        DetectorKind::Autoencoder => {
            let cfg = AutoencoderTrainConfig {
                epochs: a.epochs,
                batch_size: a.batch_size,
                learning_rate: a.learning_rate,
                input_noise_std: a.input_noise,
                seed: a.seed,
            };
            let (ae, _) = train_autoencoder(&series, a.window, &cfg)?;
            Scorer::Autoencoder(ae)
        }
    };
    let detector = AnomalyDetector::calibrate(scorer, &series, a.quantile)?;
    save_detector(&a.out, &detector)?;
    println!(
        "calibrated {} scorer at quantile {}: tau {:.6}",
        kind,
        a.quantile,
        detector.tau()
    );
    Ok(())
}

#[derive(Args)]
struct DetectArgs {
    /// Series CSV to score (labels, when present, are used for reporting).
    #[arg(long)]
    series: PathBuf,
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Detector checkpoint.
    #[arg(long)]
    detector: PathBuf,
    /// Injected-events JSON; episodes pick up overlapping events.
    #[arg(long)]
    events: Option<PathBuf>,
    /// Amount subtracted from event starts to align them with this series.
    #[arg(long, default_value_t = 0)]
    events_offset: usize,
    /// Per-step output CSV (step, score, label).
    #[arg(long)]
    out_csv: PathBuf,
    /// Run manifest with threshold, quantile, and the episode index.
    #[arg(long)]
    out_manifest: PathBuf,
}

fn cmd_detect(a: DetectArgs) -> Result<()> {
    let series = read_input_series(&a.series, a.stats.as_ref())?;
    let detector = load_detector(&a.detector)?;
    let detections = detector.detect(&series)?;
    write_detections_csv(&a.out_csv, &detections)?;

    let mut events = match &a.events {
        Some(p) => read_events_json(p)?,
        None => Vec::new(),
    };
    for ev in &mut events {
        ev.start = ev.start.checked_sub(a.events_offset).ok_or_else(|| {
            Error::Parameter(format!(
                "event at {} starts before --events-offset {}",
                ev.start, a.events_offset
            ))
        })?;
    }
    let episodes = extract_episodes(&detections, &events);
    let manifest = DetectionManifest {
        schema: IO_SCHEMA,
        tau: detections.tau,
        quantile: detector.quantile(),
        window: detector.k(),
        dim: detector.dim(),
        episodes,
    };
    write_detection_manifest(&a.out_manifest, &manifest)?;

    let flagged = detections.labels.iter().filter(|l| **l).count();
    println!(
        "scored {} steps: {} flagged in {} episodes (tau {:.6})",
        detections.scores.len(),
        flagged,
        manifest.episodes.len(),
        detections.tau
    );
    if let Some(truth) = series.labels() {
        let report = tsrecourse::detector::eval_detection(
            &detections.labels,
            &truth[detections.offset..],
            &detections.scores,
        )?;
        println!(
            "against labels: f1 {:.4} precision {:.4} recall {:.4} auc_pr {:.4} auc_roc {:.4}",
            report.f1, report.precision, report.recall, report.auc_pr, report.auc_roc
        );
    }
    Ok(())
}

#[derive(Args)]
struct TrainRecourseArgs {
    /// Series CSV holding the detected episodes (typically the test region).
    #[arg(long)]
    series: PathBuf,
    #[arg(long)]
    stats: Option<PathBuf>,
    #[arg(long)]
    gvar: PathBuf,
    #[arg(long)]
    detector: PathBuf,
    /// Detection manifest whose episodes provide the training anchors.
    #[arg(long)]
    episodes: PathBuf,
    /// Encoder variant: full, dev_only, or seq_only.
    #[arg(long, default_value = "full")]
    variant: String,
    /// Action-magnitude penalty weight.
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    /// Steps the training episode rolls past its anchor.
    #[arg(long, default_value_t = 1)]
    lookahead: usize,
    /// Action budget per episode.
    #[arg(long, default_value_t = 10)]
    max_actions: usize,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    curve: Option<PathBuf>,
}

fn cmd_train_recourse(a: TrainRecourseArgs) -> Result<()> {
    let series = read_input_series(&a.series, a.stats.as_ref())?;
    let gvar = load_gvar(&a.gvar)?;
    let detector = load_detector(&a.detector)?;
    let manifest = read_detection_manifest(&a.episodes)?;
    let anchors: Vec<usize> = manifest.episodes.iter().map(|e| e.start).collect();
    let cfg = RecourseTrainConfig {
        lambda: a.lambda,
        lookahead: a.lookahead,
        max_actions: a.max_actions,
        epochs: a.epochs,
        learning_rate: a.learning_rate,
        seed: a.seed,
        variant: a.variant.parse()?,
    };
    let (h, curve) = train_recourse(&gvar, &detector, &series, &anchors, &cfg)?;
    save_recourse(&a.out, &h)?;
    if let Some(path) = &a.curve {
        write_loss_curve_csv(path, &curve)?;
    }
    println!(
        "trained {} variant on {} episodes; loss {:.6} -> {:.6}",
        h.variant(),
        anchors.len(),
        curve.first().copied().unwrap_or(f64::NAN),
        curve.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

#[derive(Args)]
struct TrainBaselineArgs {
    /// Predictor kind: mlp, lstm, var, or gvar.
    #[arg(long)]
    kind: String,
    /// Normal series CSV to fit on.
    #[arg(long)]
    series: PathBuf,
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Window length K; the predictor consumes K−1 history rows.
    #[arg(long, default_value_t = 5)]
    window: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    curve: Option<PathBuf>,
}

fn cmd_train_baseline(a: TrainBaselineArgs) -> Result<()> {
    use tsrecourse::baselines::{train_predictor, BaselineTrainConfig, PredictorKind};
    let series = read_input_series(&a.series, a.stats.as_ref())?;
    let kind: PredictorKind = a.kind.parse()?;
    let cfg = BaselineTrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        seed: a.seed,
    };
    let (predictor, curve) = train_predictor(kind, &series, a.window, &cfg)?;
    save_predictor(&a.out, &predictor)?;
    if let Some(path) = &a.curve {
        write_loss_curve_csv(path, &curve)?;
    }
    println!(
        "trained {} predictor on {} steps; final loss {:.6}",
        kind,
        series.len(),
        curve.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

#[derive(Args)]
struct ExplainArgs {
    #[arg(long)]
    series: PathBuf,
    /// Standardization sidecar; also converts reported actions to raw units.
    #[arg(long)]
    stats: Option<PathBuf>,
    #[arg(long)]
    gvar: PathBuf,
    #[arg(long)]
    detector: PathBuf,
    /// Recourse or predictor checkpoint producing the actions.
    #[arg(long)]
    model: PathBuf,
    /// Detection manifest: explain every episode in it.
    #[arg(long, conflicts_with = "episode_start")]
    episodes: Option<PathBuf>,
    /// Explain a single episode starting at this step.
    #[arg(long)]
    episode_start: Option<usize>,
    #[arg(long, default_value_t = 1)]
    lookahead: usize,
    #[arg(long, default_value_t = 10)]
    max_actions: usize,
    /// Directory receiving per-episode report JSON and counterfactual CSV.
    #[arg(long)]
    out_dir: PathBuf,
}

fn cmd_explain(a: ExplainArgs) -> Result<()> {
    let series = read_input_series(&a.series, a.stats.as_ref())?;
    let stats = read_stats_or_identity(a.stats.as_ref(), series.dim())?;
    let gvar = load_gvar(&a.gvar)?;
    let detector = load_detector(&a.detector)?;
    let (model, tag) = match checkpoint_kind(&a.model)?.as_str() {
        "recourse" => {
            let h = load_recourse(&a.model)?;
            let tag = tsrecourse::config::ModelSpec::Recad(h.variant()).to_string();
            (TrainedModel::Learned(h), tag)
        }
        "predictor" => {
            let p = load_predictor(&a.model)?;
            let tag = p.kind().to_string();
            (TrainedModel::Forecast(p), tag)
        }
        other => {
            return Err(Error::Checkpoint(format!(
                "--model must be a recourse or predictor checkpoint, found {other}"
            )))
        }
    };

    let episodes: Vec<Episode> = match (&a.episodes, a.episode_start) {
        (Some(path), None) => read_detection_manifest(path)?.episodes,
        (None, Some(t)) => vec![Episode { start: t, end: t + 1, events: vec![] }],
        _ => {
            return Err(Error::Parameter(
                "pass exactly one of --episodes or --episode-start".into(),
            ))
        }
    };
    fs::create_dir_all(&a.out_dir)?;
    let cfg = ExplainConfig { lookahead: a.lookahead, max_actions: a.max_actions };
    let names = column_names(&series);
    for ep in &episodes {
        let report = match &model {
            TrainedModel::Learned(h) => explain(&gvar, &detector, h, &series, ep.start, &cfg)?,
            TrainedModel::Forecast(p) => {
                explain_baseline(&gvar, &detector, p, &series, ep.start, &cfg)?
            }
        };
        println!(
            "episode {}: flipped {} after {} action(s)",
            ep.start, report.flipped, report.steps_used
        );
        write_recourse_report(&a.out_dir, &tag, ep, &report, &stats, &names)?;
    }
    Ok(())
}

#[derive(Args)]
struct EvaluateArgs {
    /// Experiment config in the documented key: value format.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (manifest.json, tables/, reports/).
    #[arg(long)]
    out_dir: PathBuf,
    /// Comma-separated λ grid; adds a sensitivity sweep over the penalty.
    #[arg(long)]
    lambda_grid: Option<String>,
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let cfg = parse_experiment_config(&fs::read_to_string(&a.config)?)?;
    let result = run_experiment(&cfg)?;
    write_experiment_outputs(&a.out_dir, &result)?;
    print!("{}", result.table.to_csv_string());
    if let Some(det) = &result.detection {
        println!(
            "detection: f1 {:.4} auc_pr {:.4} auc_roc {:.4} over {} runs",
            det.f1.mean, det.auc_pr.mean, det.auc_roc.mean, det.runs
        );
    }
    if !result.failures.is_empty() {
        eprintln!("{} stage(s) failed; see manifest.json", result.failures.len());
    }

    if let Some(grid_text) = &a.lambda_grid {
        let grid: Vec<f64> = grid_text
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Parameter(format!("bad lambda value {s:?}")))
            })
            .collect::<Result<_>>()?;
        let sweep = lambda_sweep(&cfg, &grid)?;
        write_lambda_sweep_outputs(&a.out_dir, &sweep)?;
        println!(
            "lambda sweep: spearman(flipping) {:.3}, spearman(cost) {:.3}, trend holds: {}",
            sweep.spearman_flipping, sweep.spearman_cost, sweep.trend_holds
        );
    }
    println!("outputs in {}", a.out_dir.display());
    Ok(())
}
