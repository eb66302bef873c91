//! Experiment configuration: a flat, documented key-value text format and
//! the typed description it parses into.
//!
//! The format is line-oriented: `key: value`, `#` starts a comment, blank
//! lines are ignored, and every file must carry `schema: 1`. Nested
//! training settings use dotted keys (`gvar.epochs: 40`). Unknown or
//! duplicated keys are rejected so typos fail loudly instead of silently
//! running defaults. [`ExperimentConfig::to_text`] writes a full config
//! with every key present, which doubles as the format's documentation.

use crate::baselines::{BaselineTrainConfig, PredictorKind};
use crate::detector::AutoencoderTrainConfig;
use crate::error::{Error, Result};
use crate::gvar::{GvarTrainConfig, PenaltyKind};
use crate::recourse::{ExplainConfig, RecourseTrainConfig, RecourseVariant};
use crate::synth::inject::AnomalyKind;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const CONFIG_SCHEMA: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Linear,
    LotkaVolterra,
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DatasetKind::Linear => f.write_str("linear"),
            DatasetKind::LotkaVolterra => f.write_str("lotka_volterra"),
        }
    }
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(DatasetKind::Linear),
            "lotka_volterra" => Ok(DatasetKind::LotkaVolterra),
            other => Err(Error::Config(format!(
                "unknown dataset {other:?} (expected linear or lotka_volterra)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    Residual,
    Autoencoder,
}

impl std::fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DetectorKind::Residual => f.write_str("residual"),
            DetectorKind::Autoencoder => f.write_str("autoencoder"),
        }
    }
}

impl std::str::FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "residual" => Ok(DetectorKind::Residual),
            "autoencoder" => Ok(DetectorKind::Autoencoder),
            other => Err(Error::Config(format!(
                "unknown detector {other:?} (expected residual or autoencoder)"
            ))),
        }
    }
}

/// One comparison row: the learned recourse function (full or with one
/// encoder branch disabled) or a forecast-then-subtract baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSpec {
    Recad(RecourseVariant),
    Baseline(PredictorKind),
}

impl std::fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelSpec::Recad(RecourseVariant::Full) => f.write_str("recad"),
            ModelSpec::Recad(RecourseVariant::DevOnly) => f.write_str("recad_dev_only"),
            ModelSpec::Recad(RecourseVariant::SeqOnly) => f.write_str("recad_seq_only"),
            ModelSpec::Baseline(kind) => write!(f, "{kind}"),
        }
    }
}

impl std::str::FromStr for ModelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recad" => Ok(ModelSpec::Recad(RecourseVariant::Full)),
            "recad_dev_only" => Ok(ModelSpec::Recad(RecourseVariant::DevOnly)),
            "recad_seq_only" => Ok(ModelSpec::Recad(RecourseVariant::SeqOnly)),
            "mlp" => Ok(ModelSpec::Baseline(PredictorKind::Mlp)),
            "lstm" => Ok(ModelSpec::Baseline(PredictorKind::Lstm)),
            "var" => Ok(ModelSpec::Baseline(PredictorKind::Var)),
            "gvar" => Ok(ModelSpec::Baseline(PredictorKind::Gvar)),
            other => Err(Error::Config(format!(
                "unknown model {other:?} (expected recad, recad_dev_only, recad_seq_only, \
                 mlp, lstm, var, or gvar)"
            ))),
        }
    }
}

pub fn parse_anomaly(s: &str) -> Result<AnomalyKind> {
    match s {
        "external_point" => Ok(AnomalyKind::ExternalPoint),
        "external_seq" => Ok(AnomalyKind::ExternalSeq),
        "structural_seq" => Ok(AnomalyKind::StructuralSeq),
        other => Err(Error::Config(format!(
            "unknown anomaly {other:?} (expected external_point, external_seq, or structural_seq)"
        ))),
    }
}

/// Everything one experiment run needs: data regime, model list, and the
/// per-stage training settings. Seeds inside the nested configs are
/// placeholders; the harness rederives them from the experiment seed and
/// the stage name.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub anomaly: AnomalyKind,
    /// Clean prefix used to fit scalers and train every model.
    pub t_train: usize,
    /// Evaluation region; anomalies are injected only here.
    pub t_test: usize,
    pub seeds: Vec<u64>,
    /// Detector window length K.
    pub window: usize,
    /// Target fraction of abnormal steps in the test region.
    pub rate: f64,
    /// Injection magnitude range, in units of per-dimension std.
    pub magnitude: (f64, f64),
    pub detector: DetectorKind,
    pub quantile: f64,
    /// Fraction of detected episodes used to train the recourse function.
    pub train_fraction: f64,
    pub models: Vec<ModelSpec>,
    pub gvar: GvarTrainConfig,
    pub autoencoder: AutoencoderTrainConfig,
    pub recourse: RecourseTrainConfig,
    pub baseline: BaselineTrainConfig,
    pub explain: ExplainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetKind::Linear,
            anomaly: AnomalyKind::ExternalPoint,
            t_train: 20_000,
            t_test: 50_000,
            seeds: vec![1, 2, 3, 4, 5],
            window: 5,
            rate: 0.01,
            magnitude: (3.0, 5.0),
            detector: DetectorKind::Residual,
            quantile: 0.99,
            train_fraction: 0.5,
            models: vec![
                ModelSpec::Recad(RecourseVariant::Full),
                ModelSpec::Baseline(PredictorKind::Mlp),
                ModelSpec::Baseline(PredictorKind::Lstm),
                ModelSpec::Baseline(PredictorKind::Var),
                ModelSpec::Baseline(PredictorKind::Gvar),
            ],
            gvar: GvarTrainConfig::default(),
            autoencoder: AutoencoderTrainConfig::default(),
            recourse: RecourseTrainConfig::default(),
            baseline: BaselineTrainConfig::default(),
            explain: ExplainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::Config(format!("window must be ≥ 2, got {}", self.window)));
        }
        if self.t_train < 20 * self.window {
            return Err(Error::Config(format!(
                "t_train {} too small for window {}",
                self.t_train, self.window
            )));
        }
        if self.t_test < 20 * self.window {
            return Err(Error::Config(format!(
                "t_test {} too small for window {}",
                self.t_test, self.window
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if !(self.rate > 0.0 && self.rate <= 0.2) {
            return Err(Error::Config(format!("rate must be in (0, 0.2], got {}", self.rate)));
        }
        if !(self.magnitude.0 > 0.0 && self.magnitude.1 >= self.magnitude.0) {
            return Err(Error::Config(format!(
                "magnitude range must satisfy 0 < lo ≤ hi, got {:?}",
                self.magnitude
            )));
        }
        if !(self.quantile > 0.0 && self.quantile < 1.0) {
            return Err(Error::Config(format!(
                "quantile must be in (0, 1), got {}",
                self.quantile
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must be in (0, 1), got {}",
                self.train_fraction
            )));
        }
        let mut tags: Vec<String> = self.models.iter().map(|m| m.to_string()).collect();
        tags.sort();
        tags.dedup();
        if tags.len() != self.models.len() {
            return Err(Error::Config("models must be distinct".into()));
        }
        self.gvar.validate().map_err(|e| Error::Config(format!("gvar: {e}")))?;
        Ok(())
    }

    /// The full config in the text format, every key explicit.
    pub fn to_text(&self) -> String {
        let seeds = self
            .seeds
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let models = self
            .models
            .iter()
            .map(|m| m.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let penalty = match self.gvar.penalty_kind {
            PenaltyKind::L1 => "l1",
            PenaltyKind::L2 => "l2",
        };
        format!(
            "# Experiment description. Lines are `key: value`; `#` comments.\n\
             schema: {CONFIG_SCHEMA}\n\
             \n\
             # Data regime.\n\
             dataset: {dataset}\n\
             anomaly: {anomaly}\n\
             t_train: {t_train}\n\
             t_test: {t_test}\n\
             seeds: {seeds}\n\
             window: {window}\n\
             rate: {rate}\n\
             magnitude: {mag_lo},{mag_hi}\n\
             \n\
             # Detection.\n\
             detector: {detector}\n\
             quantile: {quantile}\n\
             \n\
             # Recourse comparison.\n\
             train_fraction: {train_fraction}\n\
             models: {models}\n\
             \n\
             # Dynamics model training.\n\
             gvar.lambda_sparsity: {g_lambda}\n\
             gvar.gamma_smooth: {g_gamma}\n\
             gvar.penalty: {penalty}\n\
             gvar.squared_residual: {g_sq}\n\
             gvar.epochs: {g_epochs}\n\
             gvar.batch_size: {g_batch}\n\
             gvar.learning_rate: {g_lr}\n\
             \n\
             # Window autoencoder (used when detector: autoencoder).\n\
             autoencoder.epochs: {a_epochs}\n\
             autoencoder.batch_size: {a_batch}\n\
             autoencoder.learning_rate: {a_lr}\n\
             autoencoder.input_noise_std: {a_noise}\n\
             \n\
             # Recourse function training.\n\
             recourse.lambda: {r_lambda}\n\
             recourse.lookahead: {r_look}\n\
             recourse.max_actions: {r_max}\n\
             recourse.epochs: {r_epochs}\n\
             recourse.learning_rate: {r_lr}\n\
             \n\
             # Baseline predictor training.\n\
             baseline.epochs: {b_epochs}\n\
             baseline.batch_size: {b_batch}\n\
             baseline.learning_rate: {b_lr}\n\
             \n\
             # Greedy recourse at evaluation time.\n\
             explain.lookahead: {e_look}\n\
             explain.max_actions: {e_max}\n",
            dataset = self.dataset,
            anomaly = self.anomaly,
            t_train = self.t_train,
            t_test = self.t_test,
            window = self.window,
            rate = self.rate,
            mag_lo = self.magnitude.0,
            mag_hi = self.magnitude.1,
            detector = self.detector,
            quantile = self.quantile,
            train_fraction = self.train_fraction,
            g_lambda = self.gvar.lambda_sparsity,
            g_gamma = self.gvar.gamma_smooth,
            g_sq = self.gvar.squared_residual,
            g_epochs = self.gvar.epochs,
            g_batch = self.gvar.batch_size,
            g_lr = self.gvar.learning_rate,
            a_epochs = self.autoencoder.epochs,
            a_batch = self.autoencoder.batch_size,
            a_lr = self.autoencoder.learning_rate,
            a_noise = self.autoencoder.input_noise_std,
            r_lambda = self.recourse.lambda,
            r_look = self.recourse.lookahead,
            r_max = self.recourse.max_actions,
            r_epochs = self.recourse.epochs,
            r_lr = self.recourse.learning_rate,
            b_epochs = self.baseline.epochs,
            b_batch = self.baseline.batch_size,
            b_lr = self.baseline.learning_rate,
            e_look = self.explain.lookahead,
            e_max = self.explain.max_actions,
        )
    }
}

/// Parses the text format into a config, starting from defaults and
/// overriding every key present. See module docs for the format.
pub fn parse_experiment_config(text: &str) -> Result<ExperimentConfig> {
    let mut map: BTreeMap<String, String> = BTreeMap::new();
    for (ln, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once(':').ok_or_else(|| {
            Error::Config(format!("line {}: expected `key: value`, got {raw:?}", ln + 1))
        })?;
        let (key, value) = (key.trim().to_string(), value.trim().to_string());
        if key.is_empty() || value.is_empty() {
            return Err(Error::Config(format!("line {}: empty key or value", ln + 1)));
        }
        if map.insert(key.clone(), value).is_some() {
            return Err(Error::Config(format!("duplicate key {key:?}")));
        }
    }

    let schema = map
        .remove("schema")
        .ok_or_else(|| Error::Config("missing required key `schema`".into()))?;
    if schema.trim() != CONFIG_SCHEMA.to_string() {
        return Err(Error::Config(format!(
            "unsupported schema {schema:?}, this build reads schema {CONFIG_SCHEMA}"
        )));
    }

    let mut cfg = ExperimentConfig::default();
    let keys: Vec<String> = map.keys().cloned().collect();
    for key in keys {
        let value = map.remove(&key).expect("key listed from the same map");
        apply_key(&mut cfg, &key, &value)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn apply_key(cfg: &mut ExperimentConfig, key: &str, value: &str) -> Result<()> {
    let bad = |what: &str| Error::Config(format!("key {key:?}: cannot parse {value:?} as {what}"));
    let parse_usize = |v: &str| v.parse::<usize>().map_err(|_| bad("an integer"));
    let parse_f64 = |v: &str| v.parse::<f64>().map_err(|_| bad("a number"));
    let parse_bool = |v: &str| v.parse::<bool>().map_err(|_| bad("true or false"));

    match key {
        "dataset" => cfg.dataset = value.parse()?,
        "anomaly" => cfg.anomaly = parse_anomaly(value)?,
        "t_train" => cfg.t_train = parse_usize(value)?,
        "t_test" => cfg.t_test = parse_usize(value)?,
        "seeds" => {
            let mut seeds = Vec::new();
            for part in value.split(',') {
                seeds.push(part.trim().parse::<u64>().map_err(|_| bad("a seed list"))?);
            }
            cfg.seeds = seeds;
        }
        "window" => cfg.window = parse_usize(value)?,
        "rate" => cfg.rate = parse_f64(value)?,
        "magnitude" => {
            let (lo, hi) = value
                .split_once(',')
                .ok_or_else(|| bad("a `lo,hi` pair"))?;
            cfg.magnitude = (
                lo.trim().parse().map_err(|_| bad("a `lo,hi` pair"))?,
                hi.trim().parse().map_err(|_| bad("a `lo,hi` pair"))?,
            );
        }
        "detector" => cfg.detector = value.parse()?,
        "quantile" => cfg.quantile = parse_f64(value)?,
        "train_fraction" => cfg.train_fraction = parse_f64(value)?,
        "models" => {
            let mut models = Vec::new();
            for part in value.split(',') {
                let part = part.trim();
                if !part.is_empty() {
                    models.push(part.parse::<ModelSpec>()?);
                }
            }
            cfg.models = models;
        }
        "gvar.lambda_sparsity" => cfg.gvar.lambda_sparsity = parse_f64(value)?,
        "gvar.gamma_smooth" => cfg.gvar.gamma_smooth = parse_f64(value)?,
        "gvar.penalty" => {
            cfg.gvar.penalty_kind = match value {
                "l1" => PenaltyKind::L1,
                "l2" => PenaltyKind::L2,
                _ => return Err(bad("l1 or l2")),
            }
        }
        "gvar.squared_residual" => cfg.gvar.squared_residual = parse_bool(value)?,
        "gvar.epochs" => cfg.gvar.epochs = parse_usize(value)?,
        "gvar.batch_size" => cfg.gvar.batch_size = parse_usize(value)?,
        "gvar.learning_rate" => cfg.gvar.learning_rate = parse_f64(value)?,
        "autoencoder.epochs" => cfg.autoencoder.epochs = parse_usize(value)?,
        "autoencoder.batch_size" => cfg.autoencoder.batch_size = parse_usize(value)?,
        "autoencoder.learning_rate" => cfg.autoencoder.learning_rate = parse_f64(value)?,
        "autoencoder.input_noise_std" => cfg.autoencoder.input_noise_std = parse_f64(value)?,
        "recourse.lambda" => cfg.recourse.lambda = parse_f64(value)?,
        "recourse.lookahead" => cfg.recourse.lookahead = parse_usize(value)?,
        "recourse.max_actions" => cfg.recourse.max_actions = parse_usize(value)?,
        "recourse.epochs" => cfg.recourse.epochs = parse_usize(value)?,
        "recourse.learning_rate" => cfg.recourse.learning_rate = parse_f64(value)?,
        "baseline.epochs" => cfg.baseline.epochs = parse_usize(value)?,
        "baseline.batch_size" => cfg.baseline.batch_size = parse_usize(value)?,
        "baseline.learning_rate" => cfg.baseline.learning_rate = parse_f64(value)?,
        "explain.lookahead" => cfg.explain.lookahead = parse_usize(value)?,
        "explain.max_actions" => cfg.explain.max_actions = parse_usize(value)?,
        other => {
            return Err(Error::Config(format!("unknown key {other:?}")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_text() {
        let cfg = ExperimentConfig::default();
        let text = cfg.to_text();
        let parsed = parse_experiment_config(&text).unwrap();
        assert_eq!(cfg, parsed);
    }

    #[test]
    fn comments_and_spacing_are_tolerated() {
        let text = "\n# leading comment\nschema: 1\n  t_train :  2000  # trailing\n\nseeds: 7\n";
        let cfg = parse_experiment_config(text).unwrap();
        assert_eq!(cfg.t_train, 2000);
        assert_eq!(cfg.seeds, vec![7]);
        assert_eq!(cfg.rate, ExperimentConfig::default().rate);
    }

    #[test]
    fn schema_is_mandatory_and_checked() {
        assert!(matches!(
            parse_experiment_config("t_train: 2000\n"),
            Err(Error::Config(msg)) if msg.contains("schema")
        ));
        assert!(matches!(
            parse_experiment_config("schema: 2\n"),
            Err(Error::Config(msg)) if msg.contains("schema")
        ));
    }

    #[test]
    fn unknown_and_duplicate_keys_are_rejected()  {
        assert!(matches!(
            parse_experiment_config("schema: 1\nwimdow: 5\n"),
            Err(Error::Config(msg)) if msg.contains("wimdow")
        ));
        assert!(matches!(
            parse_experiment_config("schema: 1\nwindow: 5\nwindow: 6\n"),
            Err(Error::Config(msg)) if msg.contains("duplicate")
        ));
    }

    #[test]
    fn model_tags_cover_every_variant_and_reject_garbage() {
        let all = "recad,recad_dev_only,recad_seq_only,mlp,lstm,var,gvar";
        let text = format!("schema: 1\nmodels: {all}\n");
        let cfg = parse_experiment_config(&text).unwrap();
        assert_eq!(cfg.models.len(), 7);
        let rendered: Vec<String> = cfg.models.iter().map(|m| m.to_string()).collect();
        assert_eq!(rendered.join(","), all);
        assert!(parse_experiment_config("schema: 1\nmodels: resnet\n").is_err());
    }

    #[test]
    fn validation_catches_bad_ranges() {
        let cfg = ExperimentConfig { rate: 0.5, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig { quantile: 1.0, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig { seeds: vec![1, 1], ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig { magnitude: (4.0, 3.0), ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn nested_training_keys_reach_their_structs() {
        let text = "schema: 1\ngvar.penalty: l1\ngvar.squared_residual: true\n\
                    recourse.lambda: 0.7\nbaseline.epochs: 3\nexplain.max_actions: 4\n";
        let cfg = parse_experiment_config(text).unwrap();
        assert_eq!(cfg.gvar.penalty_kind, PenaltyKind::L1);
        assert!(cfg.gvar.squared_residual);
        assert_eq!(cfg.recourse.lambda, 0.7);
        assert_eq!(cfg.baseline.epochs, 3);
        assert_eq!(cfg.explain.max_actions, 4);
    }
}
