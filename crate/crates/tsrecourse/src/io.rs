//! On-disk formats: series CSV, JSON checkpoints, and run output layout.
//!
//! Series CSV carries a header row of dimension names plus an optional
//! trailing `label` column (0/1). Floats print in Rust's shortest
//! round-trip form, so write-then-read reproduces values bitwise.
//!
//! Checkpoints are versioned JSON parameter dumps: `{schema, kind, meta,
//! params}` where every parameter matrix appears with its name and shape.
//! Loading reconstructs the architecture from `meta` and overwrites its
//! weights, refusing files whose kind or shapes disagree.

use crate::baselines::{
    LstmPredictor, MlpPredictor, NormalValuePredictor, PredictorKind, VarPredictor,
};
use crate::detector::{AnomalyDetector, Detections, Scorer, WindowAutoencoder};
use crate::error::{Error, Result};
use crate::eval::{Episode, ExperimentResult, LambdaSweep};
use crate::gvar::{GvarLossRecord, GvarModel};
use crate::recourse::{
    CounterfactualRollout, RecourseFunction, RecourseReport, RecourseVariant,
};
use crate::series::{MultivariateSeries, StandardizationStats};
use crate::synth::inject::InjectedEvent;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

/// Version stamped into every JSON file this module writes.
pub const IO_SCHEMA: u32 = 1;

// ---------------------------------------------------------------------
// Series CSV

/// Column names for a series: its own dimension names, or `x1..xd`.
pub fn column_names(series: &MultivariateSeries) -> Vec<String> {
    match series.dim_names() {
        Some(names) => names.to_vec(),
        None => (1..=series.dim()).map(|i| format!("x{i}")).collect(),
    }
}

/// Serializes a series to CSV: one header row of dimension names (plus
/// `label` when labels are present), one row per step.
pub fn series_csv_string(series: &MultivariateSeries) -> Result<String> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = column_names(series);
    if series.labels().is_some() {
        header.push("label".into());
    }
    wtr.write_record(&header)?;
    for t in 0..series.len() {
        let mut record: Vec<String> =
            series.values().row(t).iter().map(|v| format!("{v}")).collect();
        if let Some(labels) = series.labels() {
            record.push(if labels[t] { "1".into() } else { "0".into() });
        }
        wtr.write_record(&record)?;
    }
    let bytes = wtr.into_inner().map_err(|e| Error::Parameter(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Parameter(e.to_string()))
}

pub fn write_series_csv(path: &Path, series: &MultivariateSeries) -> Result<()> {
    fs::write(path, series_csv_string(series)?)?;
    Ok(())
}

/// Reads a series CSV written by [`write_series_csv`] (or any file in the
/// same shape). A trailing `label` column becomes anomaly labels.
pub fn read_series_csv(path: &Path) -> Result<MultivariateSeries> {
    let mut rdr = csv::Reader::from_path(path)?;
    let header = rdr.headers()?.clone();
    let mut names: Vec<String> = header.iter().map(str::to_string).collect();
    let labeled = names.last().map(|n| n == "label").unwrap_or(false);
    if labeled {
        names.pop();
    }
    let d = names.len();
    if d == 0 {
        return Err(Error::EmptyInput { needed: 1, got: 0 });
    }

    let mut values = Vec::new();
    let mut labels = Vec::new();
    for record in rdr.records() {
        let record = record?;
        if record.len() != d + labeled as usize {
            return Err(Error::ShapeMismatch {
                expected: format!("{} columns", d + labeled as usize),
                got: format!("{} columns", record.len()),
            });
        }
        for field in record.iter().take(d) {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Parameter(format!("bad float {field:?} in series CSV")))?;
            values.push(v);
        }
        if labeled {
            labels.push(match &record[d] {
                "0" => false,
                "1" => true,
                other => {
                    return Err(Error::Parameter(format!(
                        "bad label {other:?} in series CSV, expected 0 or 1"
                    )))
                }
            });
        }
    }
    let t_len = values.len() / d;
    let matrix = Array2::from_shape_vec((t_len, d), values)
        .map_err(|e| Error::Parameter(e.to_string()))?;
    let mut series = MultivariateSeries::new(matrix)?.with_dim_names(names)?;
    if labeled {
        series = series.with_labels(labels)?;
    }
    Ok(series)
}

/// Writes a plain numeric matrix as CSV under the given column names.
pub fn write_matrix_csv(path: &Path, names: &[String], values: &Array2<f64>) -> Result<()> {
    if names.len() != values.ncols() {
        return Err(Error::DimensionMismatch { expected: values.ncols(), got: names.len() });
    }
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(names)?;
    for row in values.rows() {
        let record: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        wtr.write_record(&record)?;
    }
    wtr.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------
// Small JSON files

#[derive(Serialize, Deserialize)]
struct StatsFile {
    schema: u32,
    mean: Vec<f64>,
    std: Vec<f64>,
}

pub fn write_stats_json(path: &Path, stats: &StandardizationStats) -> Result<()> {
    let file = StatsFile {
        schema: IO_SCHEMA,
        mean: stats.mean.clone(),
        std: stats.std.clone(),
    };
    fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn read_stats_json(path: &Path) -> Result<StandardizationStats> {
    let file: StatsFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    check_schema(file.schema)?;
    if file.mean.len() != file.std.len() {
        return Err(Error::DimensionMismatch {
            expected: file.mean.len(),
            got: file.std.len(),
        });
    }
    Ok(StandardizationStats { mean: file.mean, std: file.std })
}

#[derive(Serialize, Deserialize)]
struct EventsFile {
    schema: u32,
    events: Vec<InjectedEvent>,
}

pub fn write_events_json(path: &Path, events: &[InjectedEvent]) -> Result<()> {
    let file = EventsFile { schema: IO_SCHEMA, events: events.to_vec() };
    fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn read_events_json(path: &Path) -> Result<Vec<InjectedEvent>> {
    let file: EventsFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    check_schema(file.schema)?;
    Ok(file.events)
}

/// Run manifest for a detection pass: threshold, quantile, and the
/// abnormal-episode index later stages consume.
#[derive(Serialize, Deserialize)]
pub struct DetectionManifest {
    pub schema: u32,
    pub tau: f64,
    pub quantile: f64,
    pub window: usize,
    pub dim: usize,
    pub episodes: Vec<Episode>,
}

pub fn write_detection_manifest(path: &Path, manifest: &DetectionManifest) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

pub fn read_detection_manifest(path: &Path) -> Result<DetectionManifest> {
    let manifest: DetectionManifest = serde_json::from_str(&fs::read_to_string(path)?)?;
    check_schema(manifest.schema)?;
    Ok(manifest)
}

fn check_schema(schema: u32) -> Result<()> {
    if schema != IO_SCHEMA {
        return Err(Error::Checkpoint(format!(
            "unsupported schema {schema}, this build reads schema {IO_SCHEMA}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------
// Checkpoints

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    schema: u32,
    kind: String,
    meta: serde_json::Value,
    params: Vec<ParamEntry>,
}

fn params_to_entries(params: &crate::nn::Params) -> Vec<ParamEntry> {
    params
        .iter_named()
        .map(|(name, m)| ParamEntry {
            name: name.to_string(),
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.iter().copied().collect(),
        })
        .collect()
}

fn entries_to_pairs(entries: Vec<ParamEntry>) -> Result<Vec<(String, Array2<f64>)>> {
    entries
        .into_iter()
        .map(|e| {
            let m = Array2::from_shape_vec((e.rows, e.cols), e.data).map_err(|_| {
                Error::Checkpoint(format!(
                    "parameter {} does not hold {}x{} values",
                    e.name, e.rows, e.cols
                ))
            })?;
            Ok((e.name, m))
        })
        .collect()
}

fn write_checkpoint(
    path: &Path,
    kind: &str,
    meta: serde_json::Value,
    params: Vec<ParamEntry>,
) -> Result<()> {
    let file = CheckpointFile { schema: IO_SCHEMA, kind: kind.to_string(), meta, params };
    fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

/// Reports what a checkpoint file holds ("gvar", "detector", "recourse",
/// or "predictor") without loading its parameters into a model.
pub fn checkpoint_kind(path: &Path) -> Result<String> {
    let file: CheckpointFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    check_schema(file.schema)?;
    Ok(file.kind)
}

fn read_checkpoint(path: &Path, kind: &str) -> Result<CheckpointFile> {
    let file: CheckpointFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    check_schema(file.schema)?;
    if file.kind != kind {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds a {} model, expected {kind}",
            file.kind
        )));
    }
    Ok(file)
}

#[derive(Serialize, Deserialize)]
struct GvarMeta {
    k: usize,
    dim: usize,
}

pub fn save_gvar(path: &Path, model: &GvarModel) -> Result<()> {
    let meta = serde_json::to_value(GvarMeta { k: model.k(), dim: model.dim() })?;
    write_checkpoint(path, "gvar", meta, params_to_entries(model.params()))
}

pub fn load_gvar(path: &Path) -> Result<GvarModel> {
    let file = read_checkpoint(path, "gvar")?;
    let meta: GvarMeta = serde_json::from_value(file.meta)?;
    let mut model = GvarModel::zeroed(meta.k, meta.dim)?;
    model.params_mut().load_named(&entries_to_pairs(file.params)?)?;
    Ok(model)
}

#[derive(Serialize, Deserialize)]
struct DetectorMeta {
    window: usize,
    dim: usize,
    tau: f64,
    quantile: f64,
    scorer: String,
}

pub fn save_detector(path: &Path, detector: &AnomalyDetector) -> Result<()> {
    let (scorer, params) = match detector.scorer() {
        Scorer::Residual(m) => ("residual", params_to_entries(m.params())),
        Scorer::Autoencoder(ae) => ("autoencoder", params_to_entries(ae.params())),
    };
    let meta = serde_json::to_value(DetectorMeta {
        window: detector.k(),
        dim: detector.dim(),
        tau: detector.tau(),
        quantile: detector.quantile(),
        scorer: scorer.to_string(),
    })?;
    write_checkpoint(path, "detector", meta, params)
}

pub fn load_detector(path: &Path) -> Result<AnomalyDetector> {
    let file = read_checkpoint(path, "detector")?;
    let meta: DetectorMeta = serde_json::from_value(file.meta)?;
    let pairs = entries_to_pairs(file.params)?;
    let scorer = match meta.scorer.as_str() {
        "residual" => {
            let mut m = GvarModel::zeroed(meta.window, meta.dim)?;
            m.params_mut().load_named(&pairs)?;
            Scorer::Residual(m)
        }
        "autoencoder" => {
            let mut ae = WindowAutoencoder::new(meta.window, meta.dim, 0)?;
            ae.params_mut().load_named(&pairs)?;
            Scorer::Autoencoder(ae)
        }
        other => {
            return Err(Error::Checkpoint(format!("unknown scorer kind {other:?}")));
        }
    };
    AnomalyDetector::new(scorer, meta.tau, meta.quantile)
}

#[derive(Serialize, Deserialize)]
struct RecourseMeta {
    window: usize,
    dim: usize,
    variant: RecourseVariant,
}

pub fn save_recourse(path: &Path, h: &RecourseFunction) -> Result<()> {
    let meta = serde_json::to_value(RecourseMeta {
        window: h.k(),
        dim: h.dim(),
        variant: h.variant(),
    })?;
    write_checkpoint(path, "recourse", meta, params_to_entries(h.params()))
}

pub fn load_recourse(path: &Path) -> Result<RecourseFunction> {
    let file = read_checkpoint(path, "recourse")?;
    let meta: RecourseMeta = serde_json::from_value(file.meta)?;
    let mut h = RecourseFunction::new(meta.window, meta.dim, meta.variant, 0)?;
    h.params_mut().load_named(&entries_to_pairs(file.params)?)?;
    Ok(h)
}

#[derive(Serialize, Deserialize)]
struct PredictorMeta {
    model: String,
    window: usize,
    dim: usize,
}

pub fn save_predictor(path: &Path, predictor: &NormalValuePredictor) -> Result<()> {
    let meta = serde_json::to_value(PredictorMeta {
        model: predictor.kind().to_string(),
        window: predictor.window_len(),
        dim: predictor.dim(),
    })?;
    let params = match predictor {
        NormalValuePredictor::Mlp(p) => params_to_entries(&p.params),
        NormalValuePredictor::Lstm(p) => params_to_entries(&p.params),
        NormalValuePredictor::Var(p) => vec![ParamEntry {
            name: "coef".into(),
            rows: p.coef.nrows(),
            cols: p.coef.ncols(),
            data: p.coef.iter().copied().collect(),
        }],
        NormalValuePredictor::Gvar(m) => params_to_entries(m.params()),
    };
    write_checkpoint(path, "predictor", meta, params)
}

pub fn load_predictor(path: &Path) -> Result<NormalValuePredictor> {
    let file = read_checkpoint(path, "predictor")?;
    let meta: PredictorMeta = serde_json::from_value(file.meta)?;
    let kind: PredictorKind = meta
        .model
        .parse()
        .map_err(|_| Error::Checkpoint(format!("unknown predictor kind {:?}", meta.model)))?;
    let pairs = entries_to_pairs(file.params)?;
    match kind {
        PredictorKind::Mlp => {
            let mut p = MlpPredictor::new(meta.window, meta.dim, 0)?;
            p.params.load_named(&pairs)?;
            Ok(NormalValuePredictor::Mlp(p))
        }
        PredictorKind::Lstm => {
            let mut p = LstmPredictor::new(meta.window, meta.dim, 0)?;
            p.params.load_named(&pairs)?;
            Ok(NormalValuePredictor::Lstm(p))
        }
        PredictorKind::Var => {
            let (name, coef) = pairs
                .into_iter()
                .next()
                .ok_or_else(|| Error::Checkpoint("var checkpoint holds no matrix".into()))?;
            if name != "coef" {
                return Err(Error::Checkpoint(format!(
                    "var checkpoint holds {name:?}, expected \"coef\""
                )));
            }
            Ok(NormalValuePredictor::Var(VarPredictor::new(meta.window, meta.dim, coef)?))
        }
        PredictorKind::Gvar => {
            let mut m = GvarModel::zeroed(meta.window + 1, meta.dim)?;
            m.params_mut().load_named(&pairs)?;
            NormalValuePredictor::from_gvar(m)
        }
    }
}

// ---------------------------------------------------------------------
// Run outputs

/// Writes detection output: one row per scored step, `step,score,label`.
pub fn write_detections_csv(path: &Path, detections: &Detections) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["step", "score", "label"])?;
    for (i, (score, label)) in
        detections.scores.iter().zip(&detections.labels).enumerate()
    {
        wtr.write_record(&[
            format!("{}", i + detections.offset),
            format!("{score}"),
            if *label { "1".into() } else { "0".into() },
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_gvar_curve_csv(path: &Path, curve: &[GvarLossRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["epoch", "prediction", "sparsity", "smoothness", "total"])?;
    for r in curve {
        wtr.write_record(&[
            format!("{}", r.epoch),
            format!("{}", r.prediction),
            format!("{}", r.sparsity),
            format!("{}", r.smoothness),
            format!("{}", r.total),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn write_loss_curve_csv(path: &Path, curve: &[f64]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["epoch", "loss"])?;
    for (epoch, loss) in curve.iter().enumerate() {
        wtr.write_record(&[format!("{epoch}"), format!("{loss}")])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Writes a counterfactual trajectory: step index, one column per
/// dimension, and the window score at that step.
pub fn write_counterfactual_csv(
    path: &Path,
    rollout: &CounterfactualRollout,
    dim_names: &[String],
) -> Result<()> {
    if dim_names.len() != rollout.values.ncols() {
        return Err(Error::DimensionMismatch {
            expected: rollout.values.ncols(),
            got: dim_names.len(),
        });
    }
    let mut wtr = csv::Writer::from_path(path)?;
    let mut header = vec!["step".to_string()];
    header.extend(dim_names.iter().cloned());
    header.push("score".into());
    wtr.write_record(&header)?;
    for (l, row) in rollout.values.rows().into_iter().enumerate() {
        let mut record = vec![format!("{}", rollout.start + l)];
        record.extend(row.iter().map(|v| format!("{v}")));
        record.push(format!("{}", rollout.scores[l]));
        wtr.write_record(&record)?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct ActionJson {
    t: usize,
    theta_raw_units: Vec<f64>,
    cost: f64,
}

#[derive(Serialize, Deserialize)]
struct ReportFile {
    schema: u32,
    model: String,
    episode: Episode,
    actions: Vec<ActionJson>,
    flipped: bool,
    steps_used: usize,
    budget_exhausted: bool,
    counterfactual_csv_path: String,
}

/// Writes one episode's recourse report plus its counterfactual CSV next
/// to it. Action vectors, costs, and the trajectory are reported in raw
/// data units; scores stay in the detector's (standardized) frame.
pub fn write_recourse_report(
    dir: &Path,
    model_tag: &str,
    episode: &Episode,
    report: &RecourseReport,
    stats: &StandardizationStats,
    dim_names: &[String],
) -> Result<()> {
    if stats.dim() != report.rollout.values.ncols() {
        return Err(Error::DimensionMismatch {
            expected: report.rollout.values.ncols(),
            got: stats.dim(),
        });
    }
    let mut rollout = report.rollout.clone();
    for (j, mut col) in rollout.values.columns_mut().into_iter().enumerate() {
        col.mapv_inplace(|v| v * stats.std[j] + stats.mean[j]);
    }
    let cf_name = format!("counterfactual_{}_{}.csv", model_tag, episode.start);
    write_counterfactual_csv(&dir.join(&cf_name), &rollout, dim_names)?;
    let actions = report
        .actions
        .iter()
        .map(|a| {
            let theta = a.theta_raw(stats);
            let cost = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
            ActionJson { t: a.t, theta_raw_units: theta.to_vec(), cost }
        })
        .collect();
    let file = ReportFile {
        schema: IO_SCHEMA,
        model: model_tag.to_string(),
        episode: episode.clone(),
        actions,
        flipped: report.flipped,
        steps_used: report.steps_used,
        budget_exhausted: report.budget_exhausted,
        counterfactual_csv_path: cf_name,
    };
    let json_name = format!("episode_{}_{}.json", model_tag, episode.start);
    fs::write(dir.join(json_name), serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

#[derive(Serialize)]
struct ExperimentManifest<'a> {
    schema: u32,
    #[serde(flatten)]
    result: &'a ExperimentResult,
}

/// Writes a full experiment to `dir`: `manifest.json` with every
/// hyperparameter and per-seed numbers, `tables/*.csv`, per-seed
/// `reports/*.json`, and a reusable `config.txt`.
pub fn write_experiment_outputs(dir: &Path, result: &ExperimentResult) -> Result<()> {
    let tables = dir.join("tables");
    let reports = dir.join("reports");
    fs::create_dir_all(&tables)?;
    fs::create_dir_all(&reports)?;

    let manifest = ExperimentManifest { schema: IO_SCHEMA, result };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    fs::write(dir.join("config.txt"), result.config.to_text())?;
    fs::write(tables.join("metrics.csv"), result.table.to_csv_string())?;
    if let Some(det) = &result.detection {
        fs::write(tables.join("detection.csv"), det.to_csv_string())?;
    }
    for run in &result.seed_runs {
        #[derive(Serialize)]
        struct SeedFile<'a> {
            schema: u32,
            #[serde(flatten)]
            run: &'a crate::eval::SeedRun,
        }
        fs::write(
            reports.join(format!("seed_{}.json", run.seed)),
            serde_json::to_string_pretty(&SeedFile { schema: IO_SCHEMA, run })?,
        )?;
    }
    Ok(())
}

#[derive(Serialize)]
struct SweepManifest<'a> {
    schema: u32,
    #[serde(flatten)]
    sweep: &'a LambdaSweep,
}

/// Writes a λ sweep: `lambda_sweep.json` plus a plottable CSV.
pub fn write_lambda_sweep_outputs(dir: &Path, sweep: &LambdaSweep) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = SweepManifest { schema: IO_SCHEMA, sweep };
    fs::write(dir.join("lambda_sweep.json"), serde_json::to_string_pretty(&manifest)?)?;
    let mut csv = String::from("lambda,flipping_ratio,action_cost\n");
    for p in &sweep.points {
        csv.push_str(&format!("{},{},{}\n", p.lambda, p.flipping_ratio, p.action_cost));
    }
    fs::write(dir.join("lambda_sweep.csv"), csv)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::inject::AnomalyKind;
    use ndarray::{arr2, Array1};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn random_series(t: usize, d: usize, labeled: bool, seed: u64) -> MultivariateSeries {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = Array2::from_shape_fn((t, d), |_| rng.gen_range(-3.0..3.0));
        let names = (0..d).map(|i| format!("s{i}")).collect();
        let mut series =
            MultivariateSeries::new(values).unwrap().with_dim_names(names).unwrap();
        if labeled {
            let labels = (0..t).map(|_| rng.gen_bool(0.2)).collect();
            series = series.with_labels(labels).unwrap();
        }
        series
    }

    #[test]
    fn series_csv_round_trips_bitwise() {
        let dir = tempdir().unwrap();
        for labeled in [false, true] {
            let series = random_series(40, 3, labeled, 7);
            let path = dir.path().join("series.csv");
            write_series_csv(&path, &series).unwrap();
            let back = read_series_csv(&path).unwrap();
            assert_eq!(back.values(), series.values());
            assert_eq!(back.labels(), series.labels());
            assert_eq!(back.dim_names(), series.dim_names());
        }
    }

    #[test]
    fn malformed_series_csv_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "a,b\n1.0,nope\n").unwrap();
        assert!(read_series_csv(&path).is_err());
        std::fs::write(&path, "a,b,label\n1.0,2.0,7\n").unwrap();
        assert!(read_series_csv(&path).is_err());
    }

    #[test]
    fn stats_and_events_json_round_trip() {
        let dir = tempdir().unwrap();
        let stats = StandardizationStats { mean: vec![0.5, -1.25], std: vec![2.0, 0.125] };
        let spath = dir.path().join("stats.json");
        write_stats_json(&spath, &stats).unwrap();
        let back = read_stats_json(&spath).unwrap();
        assert_eq!(back.mean, stats.mean);
        assert_eq!(back.std, stats.std);

        let events = vec![InjectedEvent {
            start: 12,
            len: 3,
            dims: vec![0, 2],
            kind: AnomalyKind::ExternalSeq,
            eps: arr2(&[[0.5, 0.0, 1.5], [0.5, 0.0, 1.5], [0.5, 0.0, 1.5]]),
        }];
        let epath = dir.path().join("events.json");
        write_events_json(&epath, &events).unwrap();
        let back = read_events_json(&epath).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].start, 12);
        assert_eq!(back[0].dims, events[0].dims);
        assert_eq!(back[0].eps, events[0].eps);
    }

    #[test]
    fn gvar_checkpoint_round_trips_forecasts_bitwise() {
        let dir = tempdir().unwrap();
        let model = GvarModel::new(4, 3, 11).unwrap();
        let path = dir.path().join("gvar.json");
        save_gvar(&path, &model).unwrap();
        let back = load_gvar(&path).unwrap();
        assert_eq!(back.k(), 4);
        assert_eq!(back.dim(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let window = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
        assert_eq!(back.forecast(&window).unwrap(), model.forecast(&window).unwrap());
    }

    #[test]
    fn detector_checkpoints_round_trip_for_both_scorers() {
        let dir = tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let window = Array2::from_shape_fn((3, 2), |_| rng.gen_range(-1.0..1.0));

        let gvar = GvarModel::new(3, 2, 5).unwrap();
        let residual = AnomalyDetector::new(Scorer::Residual(gvar), 0.75, 0.99).unwrap();
        let path = dir.path().join("residual.json");
        save_detector(&path, &residual).unwrap();
        let back = load_detector(&path).unwrap();
        assert_eq!(back.tau(), 0.75);
        assert_eq!(back.quantile(), 0.99);
        assert_eq!(back.score(&window).unwrap(), residual.score(&window).unwrap());

        let ae = WindowAutoencoder::new(3, 2, 9).unwrap();
        let auto = AnomalyDetector::new(Scorer::Autoencoder(ae), 0.3, 0.95).unwrap();
        let path = dir.path().join("auto.json");
        save_detector(&path, &auto).unwrap();
        let back = load_detector(&path).unwrap();
        assert_eq!(back.score(&window).unwrap(), auto.score(&window).unwrap());
    }

    #[test]
    fn recourse_checkpoint_round_trips_actions_bitwise() {
        use crate::recourse::RecourseVariant;
        let dir = tempdir().unwrap();
        for variant in
            [RecourseVariant::Full, RecourseVariant::DevOnly, RecourseVariant::SeqOnly]
        {
            let h = RecourseFunction::new(5, 3, variant, 21).unwrap();
            let path = dir.path().join("h.json");
            save_recourse(&path, &h).unwrap();
            let back = load_recourse(&path).unwrap();
            assert_eq!(back.variant(), variant);
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let window = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
            let delta = Array1::from_shape_fn(3, |_| rng.gen_range(-1.0..1.0));
            assert_eq!(
                back.predict_action(&window, &delta).unwrap(),
                h.predict_action(&window, &delta).unwrap()
            );
        }
    }

    #[test]
    fn predictor_checkpoints_round_trip_for_every_kind() {
        let dir = tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let history = Array2::from_shape_fn((4, 2), |_| rng.gen_range(-1.0..1.0));

        let coef = Array2::from_shape_fn((1 + 4 * 2, 2), |_| rng.gen_range(-0.5..0.5));
        let predictors = vec![
            NormalValuePredictor::Mlp(MlpPredictor::new(4, 2, 31).unwrap()),
            NormalValuePredictor::Lstm(LstmPredictor::new(4, 2, 32).unwrap()),
            NormalValuePredictor::Var(VarPredictor::new(4, 2, coef).unwrap()),
            NormalValuePredictor::from_gvar(GvarModel::new(5, 2, 33).unwrap()).unwrap(),
        ];
        for p in predictors {
            let path = dir.path().join("p.json");
            save_predictor(&path, &p).unwrap();
            let back = load_predictor(&path).unwrap();
            assert_eq!(back.kind(), p.kind());
            assert_eq!(back.window_len(), 4);
            assert_eq!(back.predict(&history).unwrap(), p.predict(&history).unwrap());
        }
    }

    #[test]
    fn checkpoints_refuse_the_wrong_kind_and_schema() {
        let dir = tempdir().unwrap();
        let model = GvarModel::new(3, 2, 1).unwrap();
        let path = dir.path().join("gvar.json");
        save_gvar(&path, &model).unwrap();
        assert!(matches!(load_recourse(&path), Err(Error::Checkpoint(_))));
        assert!(matches!(load_predictor(&path), Err(Error::Checkpoint(_))));

        let text = std::fs::read_to_string(&path).unwrap().replace("\"schema\":1", "\"schema\":9");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(load_gvar(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn run_output_files_have_the_documented_shapes() {
        let dir = tempdir().unwrap();
        let det = Detections {
            offset: 2,
            series_len: 6,
            tau: 0.5,
            scores: vec![0.1, 0.9, 0.2, 0.6],
            labels: vec![false, true, false, true],
        };
        let dpath = dir.path().join("detections.csv");
        write_detections_csv(&dpath, &det).unwrap();
        let text = std::fs::read_to_string(&dpath).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "step,score,label");
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("2,"));

        let manifest = DetectionManifest {
            schema: IO_SCHEMA,
            tau: det.tau,
            quantile: 0.99,
            window: 3,
            dim: 2,
            episodes: vec![Episode { start: 3, end: 4, events: vec![] }],
        };
        let mpath = dir.path().join("detect_manifest.json");
        write_detection_manifest(&mpath, &manifest).unwrap();
        let back = read_detection_manifest(&mpath).unwrap();
        assert_eq!(back.tau, 0.5);
        assert_eq!(back.episodes.len(), 1);

        write_loss_curve_csv(&dir.path().join("curve.csv"), &[0.5, 0.25]).unwrap();
        let text = std::fs::read_to_string(dir.path().join("curve.csv")).unwrap();
        assert_eq!(text, "epoch,loss\n0,0.5\n1,0.25\n");
    }

    #[test]
    fn experiment_output_layout_is_complete() {
        use crate::config::ExperimentConfig;
        use crate::eval::{MeanStd, MetricsTable, TableRow};
        let dir = tempdir().unwrap();
        let result = ExperimentResult {
            config: ExperimentConfig::default(),
            seed_runs: vec![],
            failures: vec![],
            table: MetricsTable {
                rows: vec![TableRow {
                    model: "recad".into(),
                    flipping_ratio: MeanStd { mean: 0.9, std: None },
                    action_cost: MeanStd { mean: 4.0, std: None },
                    action_step: MeanStd { mean: 1.0, std: None },
                    runs: 1,
                }],
            },
            detection: None,
            notes: vec![],
        };
        write_experiment_outputs(dir.path(), &result).unwrap();
        assert!(dir.path().join("manifest.json").is_file());
        assert!(dir.path().join("config.txt").is_file());
        let table = std::fs::read_to_string(dir.path().join("tables/metrics.csv")).unwrap();
        assert!(table.contains("recad,0.900000,,4.000000,,1.000000,,1"));
        let manifest = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        let value: serde_json::Value = serde_json::from_str(&manifest).unwrap();
        assert_eq!(value["schema"], 1);
        assert!(value["config"]["t_train"].is_number());
        assert!(value["notes"].is_array());
    }
}
