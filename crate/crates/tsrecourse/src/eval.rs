//! Recourse metrics and multi-seed experiment orchestration.
//!
//! The metric denominator is an *episode*: a maximal contiguous run of
//! detected-abnormal steps in one series. Per episode the harness runs the
//! greedy recourse loop, re-derives the counterfactual over the episode's
//! full extent, and counts detected steps whose counterfactual score falls
//! to or below the threshold. Three numbers summarize a model:
//!
//! * flipping ratio: flipped detected steps / all detected steps,
//! * action cost: summed ‖θ‖₂ in raw data units / episode count,
//! * action step: acted steps / episode count.
//!
//! Accounting is pessimistic: unflipped episodes keep their attempted
//! actions and costs in the averages, and an episode with no room to act
//! charges the full action budget.
//!
//! [`run_experiment`] runs the whole pipeline per seed: generate, inject,
//! standardize, train the dynamics model, calibrate the detector, split
//! detected episodes into a recourse-training half and an evaluation half,
//! train every requested model, and aggregate mean ± std across seeds. A
//! failed stage skips that seed (or model) with a recorded reason; the
//! table is built from whatever succeeded.

use crate::baselines::{train_predictor, NormalValuePredictor};
use crate::config::{DatasetKind, DetectorKind, ExperimentConfig, ModelSpec};
use crate::detector::{
    eval_detection, train_autoencoder, AnomalyDetector, DetectionReport, Detections, Scorer,
};
use crate::error::{Error, Result};
use crate::gvar::{train_gvar, GvarModel, GvarTrainConfig};
use crate::recourse::{
    counterfactual_rollout, explain, train_recourse, ExplainConfig, RecourseFunction,
    RecourseReport, RecourseTrainConfig,
};
use crate::series::{
    apply_standardizer, fit_standardizer, MultivariateSeries, StandardizationStats,
};
use crate::synth::inject::{inject_anomalies, AnomalySpec, InjectedEvent};
use crate::synth::linear::{gen_linear, LinearSystemParams};
use crate::synth::lv::{gen_lotka_volterra, LotkaVolterraParams};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Derives a stage-specific seed from the experiment seed, so every stage
/// draws from its own deterministic stream.
pub fn mix_seed(seed: u64, tag: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// A maximal contiguous run of detected-abnormal steps, `[start, end)`,
/// with the injected events it overlaps (empty for false positives).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Episode {
    pub start: usize,
    pub end: usize,
    pub events: Vec<InjectedEvent>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }

    pub fn steps(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

/// Extracts maximal contiguous detected-abnormal runs and attaches the
/// overlapping ground-truth events (which must share the detections'
/// coordinate frame).
pub fn extract_episodes(detections: &Detections, truth_events: &[InjectedEvent]) -> Vec<Episode> {
    let mut episodes = Vec::new();
    let mut run_start: Option<usize> = None;
    for (i, flagged) in detections.labels.iter().enumerate() {
        let t = i + detections.offset;
        match (flagged, run_start) {
            (true, None) => run_start = Some(t),
            (false, Some(s)) => {
                episodes.push((s, t));
                run_start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = run_start {
        episodes.push((s, detections.series_len));
    }
    episodes
        .into_iter()
        .map(|(start, end)| {
            let events = truth_events
                .iter()
                .filter(|ev| ev.start < end && start < ev.end())
                .cloned()
                .collect();
            Episode { start, end, events }
        })
        .collect()
}

/// What happened on one evaluated episode.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub episode: Episode,
    /// Absent when the episode starts too early for any action.
    pub report: Option<RecourseReport>,
    /// Detected steps in the episode whose counterfactual score ≤ τ.
    pub flipped_steps: usize,
    pub detected_steps: usize,
    /// Σ ‖θ‖₂ over the episode's actions, in raw data units.
    pub cost_raw: f64,
    pub acted_steps: usize,
}

/// Episode-level metrics aggregated over one model's outcomes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecourseMetrics {
    pub flipping_ratio: f64,
    pub action_cost: f64,
    pub action_step: f64,
    pub episodes: usize,
    pub detected_steps: usize,
    pub flipped_steps: usize,
    /// Episodes whose whole run was verified normal after recourse.
    pub episodes_flipped: usize,
}

/// Aggregates outcomes into the three recourse metrics. Outcomes are
/// sorted internally, so the result is independent of processing order.
pub fn evaluate_recourse(outcomes: &[EpisodeOutcome]) -> Result<RecourseMetrics> {
    if outcomes.is_empty() {
        return Err(Error::ZeroDenominator("no episodes to evaluate".into()));
    }
    let mut ordered: Vec<&EpisodeOutcome> = outcomes.iter().collect();
    ordered.sort_by_key(|o| (o.episode.start, o.episode.end));

    let episodes = ordered.len();
    let mut detected = 0usize;
    let mut flipped = 0usize;
    let mut cost = 0.0;
    let mut acted = 0usize;
    let mut episodes_flipped = 0usize;
    for o in &ordered {
        detected += o.detected_steps;
        flipped += o.flipped_steps;
        cost += o.cost_raw;
        acted += o.acted_steps;
        if o.report.as_ref().map(|r| r.flipped).unwrap_or(false) {
            episodes_flipped += 1;
        }
    }
    if detected == 0 {
        return Err(Error::ZeroDenominator("no detected abnormal steps".into()));
    }
    Ok(RecourseMetrics {
        flipping_ratio: flipped as f64 / detected as f64,
        action_cost: cost / episodes as f64,
        action_step: acted as f64 / episodes as f64,
        episodes,
        detected_steps: detected,
        flipped_steps: flipped,
        episodes_flipped,
    })
}

/// A trained action producer: the learned recourse function or one of the
/// forecast-then-subtract baselines.
#[derive(Clone, Debug)]
pub enum TrainedModel {
    Learned(RecourseFunction),
    Forecast(NormalValuePredictor),
}

/// Runs greedy recourse on every episode and scores the counterfactual
/// over the episode's full extent (extending the rollout beyond the greedy
/// stop point when the detected run is longer). Costs are converted to raw
/// data units with `stats`.
pub fn run_recourse(
    gvar: &GvarModel,
    detector: &AnomalyDetector,
    model: &TrainedModel,
    series: &MultivariateSeries,
    stats: &StandardizationStats,
    episodes: &[Episode],
    cfg: &ExplainConfig,
) -> Result<Vec<EpisodeOutcome>> {
    let k = gvar.k();
    let mut outcomes = Vec::with_capacity(episodes.len());
    for ep in episodes {
        if ep.is_empty() || ep.end > series.len() {
            return Err(Error::Parameter(format!(
                "episode {}..{} outside series of length {}",
                ep.start,
                ep.end,
                series.len()
            )));
        }
        if ep.start < k {
            // No history to act on; charge the full budget, flip nothing.
            outcomes.push(EpisodeOutcome {
                episode: ep.clone(),
                report: None,
                flipped_steps: 0,
                detected_steps: ep.len(),
                cost_raw: 0.0,
                acted_steps: cfg.max_actions,
            });
            continue;
        }
        let report = match model {
            TrainedModel::Learned(h) => explain(gvar, detector, h, series, ep.start, cfg)?,
            TrainedModel::Forecast(p) => {
                crate::baselines::explain_baseline(gvar, detector, p, series, ep.start, cfg)?
            }
        };
        let greedy_horizon = report.rollout.values.nrows() - 1;
        let wanted = (ep.end - 1 - ep.start).max(greedy_horizon);
        let horizon = wanted.min(series.len() - 1 - ep.start);
        let rollout = if horizon == greedy_horizon {
            report.rollout.clone()
        } else {
            counterfactual_rollout(gvar, detector, series, &report.actions, horizon)?
        };

        let mut flipped = 0usize;
        for s in ep.steps() {
            let l = s - ep.start;
            if l < rollout.scores.len() && rollout.scores[l] <= rollout.tau {
                flipped += 1;
            }
        }
        let cost_raw: f64 = report
            .actions
            .iter()
            .map(|a| {
                a.theta_raw(stats).iter().map(|v| v * v).sum::<f64>().sqrt()
            })
            .sum();
        outcomes.push(EpisodeOutcome {
            episode: ep.clone(),
            flipped_steps: flipped,
            detected_steps: ep.len(),
            cost_raw,
            acted_steps: report.steps_used,
            report: Some(report),
        });
    }
    Ok(outcomes)
}

/// Detection quality without the per-step label vector, for manifests.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DetectionNumbers {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub auc_pr: f64,
    pub auc_roc: f64,
}

impl From<&DetectionReport> for DetectionNumbers {
    fn from(r: &DetectionReport) -> Self {
        DetectionNumbers {
            f1: r.f1,
            precision: r.precision,
            recall: r.recall,
            auc_pr: r.auc_pr,
            auc_roc: r.auc_roc,
        }
    }
}

/// Everything a single seed's pipeline produced that later stages need.
pub struct SeedArtifacts {
    pub seed: u64,
    pub gvar: GvarModel,
    pub detector: AnomalyDetector,
    /// Standardized clean prefix (model training data).
    pub train_std: MultivariateSeries,
    /// Standardized test region with injected anomalies and labels.
    pub test_std: MultivariateSeries,
    pub stats: StandardizationStats,
    pub detections: Detections,
    pub detection: DetectionReport,
    pub episodes: Vec<Episode>,
    pub train_episodes: Vec<Episode>,
    pub eval_episodes: Vec<Episode>,
    /// Content hash of the generated raw series and labels.
    pub data_hash: String,
}

fn sha256_series(series: &MultivariateSeries) -> String {
    let mut hasher = Sha256::new();
    let v = series.values();
    hasher.update((v.nrows() as u64).to_le_bytes());
    hasher.update((v.ncols() as u64).to_le_bytes());
    for x in v.iter() {
        hasher.update(x.to_le_bytes());
    }
    if let Some(labels) = series.labels() {
        for l in labels {
            hasher.update([*l as u8]);
        }
    }
    format!("{:x}", hasher.finalize())
}

/// Generates, injects, standardizes, trains the dynamics model, calibrates
/// the detector, and splits detected episodes for one seed.
pub fn prepare_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedArtifacts> {
    cfg.validate()?;
    let k = cfg.window;
    let t_len = cfg.t_train + cfg.t_test;

    let dataset = match cfg.dataset {
        DatasetKind::Linear => {
            let p = LinearSystemParams::sample(mix_seed(seed, "system"));
            gen_linear(&p, t_len)?
        }
        DatasetKind::LotkaVolterra => {
            let p = LotkaVolterraParams::with_seed(mix_seed(seed, "system"));
            gen_lotka_volterra(&p, t_len)?
        }
    };
    let spec = AnomalySpec {
        magnitude: cfg.magnitude,
        eligible: Some((cfg.t_train + 2 * k, t_len - 2 * k)),
        ..AnomalySpec::new(cfg.anomaly, cfg.rate, mix_seed(seed, "inject"))
    };
    let injected = inject_anomalies(&dataset, &spec)?;
    let data_hash = sha256_series(&injected.series);

    let train_slice = injected.series.slice_steps(0, cfg.t_train)?;
    let stats = fit_standardizer(&train_slice)?;
    let train_std = apply_standardizer(&train_slice, &stats)?;
    let test_slice = injected.series.slice_steps(cfg.t_train, t_len)?;
    let test_std = apply_standardizer(&test_slice, &stats)?;

    let gcfg = GvarTrainConfig { seed: mix_seed(seed, "gvar"), ..cfg.gvar.clone() };
    let (gvar, _) = train_gvar(&train_std, k, &gcfg)?;

    let scorer = match cfg.detector {
        DetectorKind::Residual => Scorer::Residual(gvar.clone()),
        DetectorKind::Autoencoder => {
            let acfg = crate::detector::AutoencoderTrainConfig {
                seed: mix_seed(seed, "autoencoder"),
                ..cfg.autoencoder.clone()
            };
            let (ae, _) = train_autoencoder(&train_std, k, &acfg)?;
            Scorer::Autoencoder(ae)
        }
    };
    let detector = AnomalyDetector::calibrate(scorer, &train_std, cfg.quantile)?;
    let detections = detector.detect(&test_std)?;

    let truth = test_std
        .labels()
        .ok_or_else(|| Error::Parameter("injected test series lost its labels".into()))?;
    let detection = eval_detection(
        &detections.labels,
        &truth[detections.offset..],
        &detections.scores,
    )?;

    // Events in test-slice coordinates.
    let events: Vec<InjectedEvent> = injected
        .injected
        .iter()
        .map(|ev| {
            let mut ev = ev.clone();
            ev.start -= cfg.t_train;
            ev
        })
        .collect();
    let episodes = extract_episodes(&detections, &events);
    if episodes.len() < 2 {
        return Err(Error::Parameter(format!(
            "need at least 2 detected episodes to split, got {}",
            episodes.len()
        )));
    }
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, "split"));
    order.shuffle(&mut rng);
    let n_train = ((episodes.len() as f64 * cfg.train_fraction).round() as usize)
        .clamp(1, episodes.len() - 1);
    let mut train_idx = order[..n_train].to_vec();
    let mut eval_idx = order[n_train..].to_vec();
    train_idx.sort_unstable();
    eval_idx.sort_unstable();
    let train_episodes: Vec<Episode> = train_idx.iter().map(|&i| episodes[i].clone()).collect();
    let eval_episodes: Vec<Episode> = eval_idx.iter().map(|&i| episodes[i].clone()).collect();

    Ok(SeedArtifacts {
        seed,
        gvar,
        detector,
        train_std,
        test_std,
        stats,
        detections,
        detection,
        episodes,
        train_episodes,
        eval_episodes,
        data_hash,
    })
}

/// Trains one comparison model on a prepared seed.
pub fn train_model(
    spec: ModelSpec,
    art: &SeedArtifacts,
    cfg: &ExperimentConfig,
) -> Result<TrainedModel> {
    let tag = spec.to_string();
    match spec {
        ModelSpec::Recad(variant) => {
            let anchors: Vec<usize> = art.train_episodes.iter().map(|e| e.start).collect();
            let rcfg = RecourseTrainConfig {
                variant,
                seed: mix_seed(art.seed, &tag),
                ..cfg.recourse.clone()
            };
            let (h, _) =
                train_recourse(&art.gvar, &art.detector, &art.test_std, &anchors, &rcfg)?;
            Ok(TrainedModel::Learned(h))
        }
        ModelSpec::Baseline(crate::baselines::PredictorKind::Gvar) => {
            Ok(TrainedModel::Forecast(NormalValuePredictor::from_gvar(art.gvar.clone())?))
        }
        ModelSpec::Baseline(kind) => {
            let bcfg = crate::baselines::BaselineTrainConfig {
                seed: mix_seed(art.seed, &tag),
                ..cfg.baseline.clone()
            };
            let (p, _) = train_predictor(kind, &art.train_std, cfg.window, &bcfg)?;
            Ok(TrainedModel::Forecast(p))
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub model: String,
    pub metrics: RecourseMetrics,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub data_hash: String,
    pub tau: f64,
    pub episodes: usize,
    pub train_episodes: usize,
    pub eval_episodes: usize,
    pub detection: DetectionNumbers,
    pub recourse: Vec<ModelMetrics>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub stage: String,
    pub message: String,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; present only with ≥ 2 runs.
    pub std: Option<f64>,
}

pub fn mean_std(xs: &[f64]) -> MeanStd {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let std = if n >= 2 {
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
        Some(var.sqrt())
    } else {
        None
    };
    MeanStd { mean, std }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TableRow {
    pub model: String,
    pub flipping_ratio: MeanStd,
    pub action_cost: MeanStd,
    pub action_step: MeanStd,
    pub runs: usize,
}

/// Per-model mean ± std of the three recourse metrics across seeds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsTable {
    pub rows: Vec<TableRow>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

impl MetricsTable {
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from(
            "model,flipping_ratio_mean,flipping_ratio_std,action_cost_mean,action_cost_std,\
             action_step_mean,action_step_std,runs\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{:.6},{},{:.6},{},{:.6},{},{}\n",
                r.model,
                r.flipping_ratio.mean,
                fmt_opt(r.flipping_ratio.std),
                r.action_cost.mean,
                fmt_opt(r.action_cost.std),
                r.action_step.mean,
                fmt_opt(r.action_step.std),
                r.runs,
            ));
        }
        out
    }

    pub fn row(&self, model: &str) -> Option<&TableRow> {
        self.rows.iter().find(|r| r.model == model)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DetectionSummary {
    pub f1: MeanStd,
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub auc_pr: MeanStd,
    pub auc_roc: MeanStd,
    pub runs: usize,
}

impl DetectionSummary {
    pub fn to_csv_string(&self) -> String {
        format!(
            "metric,mean,std\nf1,{:.6},{}\nprecision,{:.6},{}\nrecall,{:.6},{}\n\
             auc_pr,{:.6},{}\nauc_roc,{:.6},{}\n",
            self.f1.mean,
            fmt_opt(self.f1.std),
            self.precision.mean,
            fmt_opt(self.precision.std),
            self.recall.mean,
            fmt_opt(self.recall.std),
            self.auc_pr.mean,
            fmt_opt(self.auc_pr.std),
            self.auc_roc.mean,
            fmt_opt(self.auc_roc.std),
        )
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub seed_runs: Vec<SeedRun>,
    pub failures: Vec<SeedFailure>,
    pub table: MetricsTable,
    pub detection: Option<DetectionSummary>,
    /// Accounting choices a reader needs to compare these numbers.
    pub notes: Vec<String>,
}

fn accounting_notes() -> Vec<String> {
    vec![
        "one abnormal series = one maximal contiguous run of detected-abnormal steps".into(),
        "unflipped episodes keep their attempted actions and costs in the averages; \
         episodes with no room to act charge the full action budget"
            .into(),
        "action costs are in raw data units (standardization undone); the cost vector is all ones"
            .into(),
    ]
}

fn run_seed(cfg: &ExperimentConfig, seed: u64) -> (Option<SeedRun>, Vec<SeedFailure>) {
    let mut failures = Vec::new();
    let art = match prepare_seed(cfg, seed) {
        Ok(a) => a,
        Err(e) => {
            failures.push(SeedFailure { seed, stage: "prepare".into(), message: e.to_string() });
            return (None, failures);
        }
    };
    let mut recourse_rows = Vec::new();
    for &spec in &cfg.models {
        let tag = spec.to_string();
        let trained = match train_model(spec, &art, cfg) {
            Ok(t) => t,
            Err(e) => {
                failures.push(SeedFailure {
                    seed,
                    stage: format!("train {tag}"),
                    message: e.to_string(),
                });
                continue;
            }
        };
        let outcome = run_recourse(
            &art.gvar,
            &art.detector,
            &trained,
            &art.test_std,
            &art.stats,
            &art.eval_episodes,
            &cfg.explain,
        )
        .and_then(|o| evaluate_recourse(&o));
        match outcome {
            Ok(metrics) => recourse_rows.push(ModelMetrics { model: tag, metrics }),
            Err(e) => failures.push(SeedFailure {
                seed,
                stage: format!("evaluate {tag}"),
                message: e.to_string(),
            }),
        }
    }
    let run = SeedRun {
        seed,
        data_hash: art.data_hash.clone(),
        tau: art.detector.tau(),
        episodes: art.episodes.len(),
        train_episodes: art.train_episodes.len(),
        eval_episodes: art.eval_episodes.len(),
        detection: DetectionNumbers::from(&art.detection),
        recourse: recourse_rows,
    };
    (Some(run), failures)
}

/// Runs the full pipeline for every seed and model in the config and
/// aggregates the results. Seeds run in parallel, one worker per seed,
/// nothing mutable shared; results aggregate in config order, so the
/// output is independent of scheduling. Per-seed and per-model failures
/// are recorded and skipped; the table covers whatever succeeded.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.validate()?;
    let per_seed: Vec<(Option<SeedRun>, Vec<SeedFailure>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = cfg
            .seeds
            .iter()
            .map(|&seed| scope.spawn(move || run_seed(cfg, seed)))
            .collect();
        handles.into_iter().map(|h| h.join().expect("seed worker panicked")).collect()
    });
    let mut seed_runs = Vec::new();
    let mut failures = Vec::new();
    for (run, mut fails) in per_seed {
        seed_runs.extend(run);
        failures.append(&mut fails);
    }

    let mut rows = Vec::new();
    for &spec in &cfg.models {
        let tag = spec.to_string();
        let mut fr = Vec::new();
        let mut ac = Vec::new();
        let mut st = Vec::new();
        for run in &seed_runs {
            if let Some(m) = run.recourse.iter().find(|m| m.model == tag) {
                fr.push(m.metrics.flipping_ratio);
                ac.push(m.metrics.action_cost);
                st.push(m.metrics.action_step);
            }
        }
        if !fr.is_empty() {
            rows.push(TableRow {
                model: tag,
                flipping_ratio: mean_std(&fr),
                action_cost: mean_std(&ac),
                action_step: mean_std(&st),
                runs: fr.len(),
            });
        }
    }

    let detection = if seed_runs.is_empty() {
        None
    } else {
        let get = |f: fn(&DetectionNumbers) -> f64| -> Vec<f64> {
            seed_runs.iter().map(|r| f(&r.detection)).collect()
        };
        Some(DetectionSummary {
            f1: mean_std(&get(|d| d.f1)),
            precision: mean_std(&get(|d| d.precision)),
            recall: mean_std(&get(|d| d.recall)),
            auc_pr: mean_std(&get(|d| d.auc_pr)),
            auc_roc: mean_std(&get(|d| d.auc_roc)),
            runs: seed_runs.len(),
        })
    };

    Ok(ExperimentResult {
        config: cfg.clone(),
        seed_runs,
        failures,
        table: MetricsTable { rows },
        detection,
        notes: accounting_notes(),
    })
}

/// Spearman rank correlation with midranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch { expected: xs.len(), got: ys.len() });
    }
    if xs.len() < 2 {
        return Err(Error::EmptyInput { needed: 2, got: xs.len() });
    }
    let rx = midranks(xs);
    let ry = midranks(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..xs.len() {
        let dx = rx[i] - mx;
        let dy = ry[i] - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::ZeroDenominator("constant ranks in correlation".into()));
    }
    Ok(cov / (vx.sqrt() * vy.sqrt()))
}

fn midranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite values"));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &p in &idx[i..=j] {
            ranks[p] = mid;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LambdaSweepPoint {
    pub lambda: f64,
    pub flipping_ratio: f64,
    pub action_cost: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LambdaSweep {
    pub points: Vec<LambdaSweepPoint>,
    pub spearman_flipping: f64,
    pub spearman_cost: f64,
    /// Both correlations negative: the penalty trades effectiveness for
    /// smaller actions, as intended.
    pub trend_holds: bool,
    pub failures: Vec<SeedFailure>,
}

/// Sweeps the action-penalty weight over `grid`, training the learned
/// recourse function per seed and λ on shared per-seed data and models.
/// Reports per-λ means and the Spearman correlation of λ against both
/// flipping ratio and action cost.
pub fn lambda_sweep(cfg: &ExperimentConfig, grid: &[f64]) -> Result<LambdaSweep> {
    if grid.len() < 4 {
        return Err(Error::Parameter(format!(
            "lambda grid needs at least 4 points, got {}",
            grid.len()
        )));
    }
    if grid.iter().any(|l| !l.is_finite() || *l < 0.0) {
        return Err(Error::Parameter("lambda grid must be finite and ≥ 0".into()));
    }
    // One (grid index, flipping ratio, action cost) triple per λ that ran.
    type SeedPoints = Vec<(usize, f64, f64)>;
    let sweep_seed =
        |seed: u64| -> (SeedPoints, Vec<SeedFailure>) {
            let mut failures = Vec::new();
            let art = match prepare_seed(cfg, seed) {
                Ok(a) => a,
                Err(e) => {
                    failures.push(SeedFailure {
                        seed,
                        stage: "prepare".into(),
                        message: e.to_string(),
                    });
                    return (Vec::new(), failures);
                }
            };
            let anchors: Vec<usize> = art.train_episodes.iter().map(|e| e.start).collect();
            let mut points = Vec::new();
            for (li, &lambda) in grid.iter().enumerate() {
                let rcfg = RecourseTrainConfig {
                    lambda,
                    seed: mix_seed(seed, "recad"),
                    ..cfg.recourse.clone()
                };
                let run =
                    train_recourse(&art.gvar, &art.detector, &art.test_std, &anchors, &rcfg)
                        .and_then(|(h, _)| {
                            run_recourse(
                                &art.gvar,
                                &art.detector,
                                &TrainedModel::Learned(h),
                                &art.test_std,
                                &art.stats,
                                &art.eval_episodes,
                                &cfg.explain,
                            )
                        })
                        .and_then(|o| evaluate_recourse(&o));
                match run {
                    Ok(m) => points.push((li, m.flipping_ratio, m.action_cost)),
                    Err(e) => failures.push(SeedFailure {
                        seed,
                        stage: format!("lambda {lambda}"),
                        message: e.to_string(),
                    }),
                }
            }
            (points, failures)
        };

    // Same worker-per-seed layout as the main experiment.
    let per_seed: Vec<(SeedPoints, Vec<SeedFailure>)> =
        std::thread::scope(|scope| {
            let handles: Vec<_> = cfg
                .seeds
                .iter()
                .map(|&seed| scope.spawn(move || sweep_seed(seed)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("seed worker panicked")).collect()
        });
    let mut failures = Vec::new();
    let mut per_lambda: Vec<(f64, Vec<f64>, Vec<f64>)> =
        grid.iter().map(|&l| (l, Vec::new(), Vec::new())).collect();
    for (points, mut fails) in per_seed {
        for (li, fr, ac) in points {
            per_lambda[li].1.push(fr);
            per_lambda[li].2.push(ac);
        }
        failures.append(&mut fails);
    }

    let mut points = Vec::new();
    for (lambda, fr, ac) in &per_lambda {
        if fr.is_empty() {
            return Err(Error::ZeroDenominator(format!(
                "no successful runs at lambda {lambda}"
            )));
        }
        points.push(LambdaSweepPoint {
            lambda: *lambda,
            flipping_ratio: fr.iter().sum::<f64>() / fr.len() as f64,
            action_cost: ac.iter().sum::<f64>() / ac.len() as f64,
        });
    }
    let lambdas: Vec<f64> = points.iter().map(|p| p.lambda).collect();
    let frs: Vec<f64> = points.iter().map(|p| p.flipping_ratio).collect();
    let acs: Vec<f64> = points.iter().map(|p| p.action_cost).collect();
    let spearman_flipping = spearman(&lambdas, &frs)?;
    let spearman_cost = spearman(&lambdas, &acs)?;
    Ok(LambdaSweep {
        points,
        spearman_flipping,
        spearman_cost,
        trend_holds: spearman_flipping < 0.0 && spearman_cost < 0.0,
        failures,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recourse::RecourseAction;
    use ndarray::{Array1, Array2};

    fn detections(offset: usize, labels: Vec<bool>) -> Detections {
        Detections {
            offset,
            series_len: offset + labels.len(),
            tau: 1.0,
            scores: vec![0.0; labels.len()],
            labels,
        }
    }

    #[test]
    fn episodes_are_maximal_contiguous_runs() {
        let det = detections(
            4,
            vec![false, true, true, false, true, false, false, true, true],
        );
        let eps = extract_episodes(&det, &[]);
        let spans: Vec<(usize, usize)> = eps.iter().map(|e| (e.start, e.end)).collect();
        assert_eq!(spans, vec![(5, 7), (8, 9), (11, 13)]);

        // A run touching the series end still closes.
        let det = detections(2, vec![true, true]);
        let eps = extract_episodes(&det, &[]);
        assert_eq!(eps.len(), 1);
        assert_eq!((eps[0].start, eps[0].end), (2, 4));
    }

    #[test]
    fn episodes_pick_up_their_overlapping_events() {
        use crate::synth::inject::AnomalyKind;
        let det = detections(4, vec![true, true, false, true]);
        let ev = |start: usize, len: usize| InjectedEvent {
            start,
            len,
            dims: vec![0],
            kind: AnomalyKind::ExternalPoint,
            eps: Array2::zeros((len, 2)),
        };
        let eps = extract_episodes(&det, &[ev(5, 1), ev(7, 1), ev(100, 3)]);
        assert_eq!(eps[0].events.len(), 1);
        assert_eq!(eps[0].events[0].start, 5);
        assert_eq!(eps[1].events.len(), 1);
        assert_eq!(eps[1].events[0].start, 7);
    }

    fn outcome(
        start: usize,
        detected: usize,
        flipped: usize,
        cost: f64,
        acted: usize,
    ) -> EpisodeOutcome {
        EpisodeOutcome {
            episode: Episode { start, end: start + detected, events: vec![] },
            report: None,
            flipped_steps: flipped,
            detected_steps: detected,
            cost_raw: cost,
            acted_steps: acted,
        }
    }

    #[test]
    fn flipping_ratio_counts_steps_not_episodes() {
        let outcomes = vec![outcome(10, 6, 6, 1.0, 1), outcome(30, 4, 3, 1.0, 2)];
        let m = evaluate_recourse(&outcomes).unwrap();
        assert_eq!(m.flipping_ratio, 0.9);
        assert_eq!(m.detected_steps, 10);
        assert_eq!(m.flipped_steps, 9);
    }

    #[test]
    fn cost_is_the_root_sum_of_squares_per_action_averaged_over_episodes() {
        let stats = StandardizationStats::identity(4);
        let a = RecourseAction::new(10, Array1::from_vec(vec![3.0, 4.0, 0.0, 0.0]));
        let cost = a.theta_raw(&stats).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert_eq!(cost, 5.0);

        let outcomes = vec![outcome(10, 1, 1, 5.0, 1), outcome(30, 1, 1, 0.0, 1)];
        let m = evaluate_recourse(&outcomes).unwrap();
        assert_eq!(m.action_cost, 2.5);
        assert_eq!(m.action_step, 1.0);

        // Doubling every action doubles the average exactly.
        let doubled = vec![outcome(10, 1, 1, 10.0, 1), outcome(30, 1, 1, 0.0, 1)];
        let md = evaluate_recourse(&doubled).unwrap();
        assert_eq!(md.action_cost, 2.0 * m.action_cost);
    }

    #[test]
    fn exhausted_episodes_charge_their_full_attempt() {
        let outcomes = vec![outcome(10, 3, 0, 12.0, 10)];
        let m = evaluate_recourse(&outcomes).unwrap();
        assert_eq!(m.action_step, 10.0);
        assert_eq!(m.flipping_ratio, 0.0);
    }

    #[test]
    fn metrics_ignore_processing_order_and_decompose() {
        let a = vec![
            outcome(10, 3, 2, 1.5, 2),
            outcome(30, 1, 1, 0.5, 1),
            outcome(50, 5, 0, 7.0, 10),
        ];
        let mut b = a.clone();
        b.reverse();
        let ma = evaluate_recourse(&a).unwrap();
        let mb = evaluate_recourse(&b).unwrap();
        assert_eq!(ma.flipping_ratio, mb.flipping_ratio);
        assert_eq!(ma.action_cost, mb.action_cost);
        assert_eq!(ma.action_step, mb.action_step);
        // Flipped + unflipped = detected.
        let unflipped = ma.detected_steps - ma.flipped_steps;
        assert_eq!(ma.flipped_steps + unflipped, ma.detected_steps);
    }

    #[test]
    fn empty_and_zero_step_inputs_are_rejected() {
        assert!(matches!(evaluate_recourse(&[]), Err(Error::ZeroDenominator(_))));
        let degenerate = vec![EpisodeOutcome {
            episode: Episode { start: 5, end: 5, events: vec![] },
            report: None,
            flipped_steps: 0,
            detected_steps: 0,
            cost_raw: 0.0,
            acted_steps: 0,
        }];
        assert!(matches!(evaluate_recourse(&degenerate), Err(Error::ZeroDenominator(_))));
    }

    #[test]
    fn spearman_matches_hand_ranked_cases() {
        let x = vec![1.0, 2.0, 3.0, 4.0, 5.0];
        let inc = vec![2.0, 4.0, 5.0, 7.0, 11.0];
        let dec = vec![9.0, 6.0, 4.0, 2.0, 1.0];
        assert!((spearman(&x, &inc).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &dec).unwrap() + 1.0).abs() < 1e-12);
        // Tie in y: midranks give the textbook value.
        let y = vec![1.0, 2.0, 2.0, 3.0];
        let x4 = vec![1.0, 2.0, 3.0, 4.0];
        let rho = spearman(&x4, &y).unwrap();
        assert!((rho - 0.9486832980505138).abs() < 1e-9, "rho {rho}");
        assert!(spearman(&x4, &[1.0, 1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn mean_std_withholds_std_for_single_runs() {
        let one = mean_std(&[4.0]);
        assert_eq!(one.mean, 4.0);
        assert!(one.std.is_none());
        let two = mean_std(&[1.0, 3.0]);
        assert_eq!(two.mean, 2.0);
        assert!((two.std.unwrap() - std::f64::consts::SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn null_actions_flip_nothing() {
        // A zero action function reproduces the factual series bitwise, so
        // every detected step keeps its offending score.
        let cfg = small_config(vec![]);
        let art = prepare_seed(&cfg, 3).unwrap();
        let h = RecourseFunction::zero_head(cfg.window, 4, 1).unwrap();
        let outcomes = run_recourse(
            &art.gvar,
            &art.detector,
            &TrainedModel::Learned(h),
            &art.test_std,
            &art.stats,
            &art.eval_episodes,
            &cfg.explain,
        )
        .unwrap();
        let m = evaluate_recourse(&outcomes).unwrap();
        assert_eq!(m.flipping_ratio, 0.0);
        assert_eq!(m.flipped_steps, 0);
    }

    fn small_config(models: Vec<ModelSpec>) -> ExperimentConfig {
        ExperimentConfig {
            t_train: 2_000,
            t_test: 3_000,
            seeds: vec![1, 2],
            models,
            gvar: GvarTrainConfig { epochs: 4, ..Default::default() },
            rate: 0.01,
            ..Default::default()
        }
    }

    #[test]
    fn small_experiment_runs_and_reruns_bit_identically() {
        use crate::baselines::PredictorKind;
        let cfg = small_config(vec![
            ModelSpec::Baseline(PredictorKind::Var),
            ModelSpec::Baseline(PredictorKind::Gvar),
        ]);
        let r1 = run_experiment(&cfg).unwrap();
        let r2 = run_experiment(&cfg).unwrap();
        assert!(r1.failures.is_empty(), "failures: {:?}", r1.failures);
        assert_eq!(r1.table.to_csv_string(), r2.table.to_csv_string());
        assert_eq!(r1.seed_runs.len(), 2);
        for run in &r1.seed_runs {
            assert_eq!(run.recourse.len(), 2);
            for m in &run.recourse {
                assert!(m.metrics.flipping_ratio >= 0.0 && m.metrics.flipping_ratio <= 1.0);
                assert!(m.metrics.action_cost >= 0.0);
            }
        }
        let det = r1.detection.as_ref().unwrap();
        assert!(det.f1.mean.is_finite());
        assert_eq!(det.runs, 2);
        // Two runs: std is present.
        assert!(r1.table.rows[0].flipping_ratio.std.is_some());
        // Same data per seed regardless of model list.
        assert_eq!(r1.seed_runs[0].data_hash, r2.seed_runs[0].data_hash);
    }

    #[test]
    fn lambda_sweep_rejects_short_grids() {
        let cfg = small_config(vec![]);
        assert!(lambda_sweep(&cfg, &[0.1]).is_err());
        assert!(lambda_sweep(&cfg, &[0.1, 0.2, 0.3]).is_err());
        assert!(lambda_sweep(&cfg, &[0.1, 0.2, 0.3, f64::NAN]).is_err());
    }
}
