//! Score-based anomaly detection over sliding windows.
//!
//! A detector pairs a score function s(W_t) with a calibrated threshold τ:
//! step t is flagged abnormal when s(W_t) > τ, where W_t is the K-row window
//! ending at t. Two scorers are provided:
//!
//! * the residual scorer, ‖x_t − x̂_t‖₂ with the GVAR forecast built from
//!   the window's first K−1 rows (lag nets g_1..g_{K−1});
//! * a flattened-window autoencoder (hidden widths 100-20-100) whose score
//!   is the reconstruction error norm, independent of the causal model.
//!
//! Scores are computed in standardized space. The first K−1 steps of a
//! series carry no window and are reported as unscored, never as normal.

use crate::error::{Error, Result};
use crate::gvar::GvarModel;
use crate::nn::{Act, Adam, Mlp, Params, Staged};
use crate::series::MultivariateSeries;
use crate::tape::{Tape, Var};
use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Quantile of normal-validation scores used for τ unless overridden.
pub const DEFAULT_QUANTILE: f64 = 0.99;

/// Reconstruction network over flattened K×d windows.
#[derive(Clone, Debug)]
pub struct WindowAutoencoder {
    k: usize,
    d: usize,
    net: Mlp,
    params: Params,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoencoderTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Std of Gaussian noise added to inputs during training; the target
    /// stays clean, so the network learns to project onto normal windows.
    pub input_noise_std: f64,
    pub seed: u64,
}

impl Default for AutoencoderTrainConfig {
    fn default() -> Self {
        AutoencoderTrainConfig {
            epochs: 30,
            batch_size: 256,
            learning_rate: 1e-3,
            input_noise_std: 0.1,
            seed: 0,
        }
    }
}

impl WindowAutoencoder {
    pub fn new(k: usize, d: usize, seed: u64) -> Result<Self> {
        if k < 2 || d < 1 {
            return Err(Error::Parameter(format!("need K ≥ 2 and d ≥ 1, got K={k}, d={d}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let flat = k * d;
        let net = Mlp::new(
            &mut params,
            &mut rng,
            "ae",
            &[flat, 100, 20, 100, flat],
            Act::Tanh,
            Act::Identity,
        );
        Ok(WindowAutoencoder { k, d, net, params })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    /// Flattens sliding windows of `values` into rows: row i covers steps
    /// i..i+K, laid out step-major (row-major window).
    fn flatten_windows(&self, values: &Array2<f64>) -> Result<Array2<f64>> {
        let t_len = values.nrows();
        if t_len < self.k {
            return Err(Error::EmptyInput { needed: self.k, got: t_len });
        }
        if values.ncols() != self.d {
            return Err(Error::DimensionMismatch { expected: self.d, got: values.ncols() });
        }
        let n = t_len - self.k + 1;
        let mut out = Array2::zeros((n, self.k * self.d));
        for i in 0..n {
            for r in 0..self.k {
                for j in 0..self.d {
                    out[[i, r * self.d + j]] = values[[i + r, j]];
                }
            }
        }
        Ok(out)
    }
}

/// Trains the autoencoder on all sliding windows of an all-normal,
/// standardized series. Returns the per-epoch mean squared reconstruction
/// error on clean inputs.
pub fn train_autoencoder(
    data: &MultivariateSeries,
    k: usize,
    cfg: &AutoencoderTrainConfig,
) -> Result<(WindowAutoencoder, Vec<f64>)> {
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.learning_rate <= 0.0 {
        return Err(Error::Parameter(
            "need epochs ≥ 1, batch_size ≥ 1, learning_rate > 0".into(),
        ));
    }
    if let Some(labels) = data.labels() {
        if labels.iter().any(|l| *l) {
            return Err(Error::Parameter(
                "training data must contain only normal steps".into(),
            ));
        }
    }
    let mut ae = WindowAutoencoder::new(k, data.dim(), cfg.seed)?;
    let windows = ae.flatten_windows(data.values())?;
    let n = windows.nrows();
    if n < 10 {
        return Err(Error::EmptyInput { needed: 10, got: n });
    }
    let mut adam = Adam::new(&ae.params, cfg.learning_rate);
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let noise = Normal::new(0.0, cfg.input_noise_std.max(0.0)).map_err(|e| {
        Error::Parameter(format!("invalid input noise std: {e}"))
    })?;

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x51_7c_c1_b7_27_22_0a_95);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);
        let mut sq_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut clean = Array2::zeros((chunk.len(), k * ae.d));
            for (row, &wi) in chunk.iter().enumerate() {
                clean.row_mut(row).assign(&windows.row(wi));
            }
            let mut noisy = clean.clone();
            if cfg.input_noise_std > 0.0 {
                noisy.mapv_inplace(|v| v + noise.sample(&mut rng));
            }
            let mut tape = Tape::new();
            let sp = ae.params.stage(&mut tape);
            let input = tape.leaf(noisy);
            let target = tape.leaf(clean);
            let recon = ae.net.forward(&mut tape, &sp, input);
            let resid = tape.sub(target, recon);
            let sq = tape.row_sum_sq(resid);
            let total = tape.sum(sq);
            let loss = tape.scale(total, 1.0 / (chunk.len() * k * ae.d) as f64);
            let loss_val = tape.scalar(loss);
            if !loss_val.is_finite() {
                return Err(Error::Divergence { step: epoch });
            }
            sq_sum += loss_val * chunk.len() as f64;
            let grads_all = tape.backward(loss);
            let grads = sp.grads(&tape, &grads_all);
            adam.step(&mut ae.params, &grads);
        }
        curve.push(sq_sum / n as f64);
    }
    Ok((ae, curve))
}

/// The score function of an [`AnomalyDetector`].
#[derive(Clone, Debug)]
pub enum Scorer {
    /// ‖x_t − x̂_t‖₂ with the forecast from the window's first K−1 rows.
    Residual(GvarModel),
    /// Reconstruction error norm of the flattened window.
    Autoencoder(WindowAutoencoder),
}

impl Scorer {
    pub fn k(&self) -> usize {
        match self {
            Scorer::Residual(m) => m.k(),
            Scorer::Autoencoder(ae) => ae.k(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Scorer::Residual(m) => m.dim(),
            Scorer::Autoencoder(ae) => ae.dim(),
        }
    }

    /// Scores every window of a standardized value matrix; entry i is the
    /// score of the window ending at step K−1+i.
    pub fn score_series(&self, values: &Array2<f64>) -> Result<Vec<f64>> {
        let k = self.k();
        if values.nrows() < k {
            return Err(Error::EmptyInput { needed: k, got: values.nrows() });
        }
        match self {
            Scorer::Residual(model) => {
                let hats = model.forecast_matrix(values, k - 1)?;
                let mut scores = Vec::with_capacity(values.nrows() - k + 1);
                for t in k - 1..values.nrows() {
                    let mut sq = 0.0;
                    for j in 0..model.dim() {
                        let r = values[[t, j]] - hats[[t - (k - 1), j]];
                        sq += r * r;
                    }
                    scores.push(sq.sqrt());
                }
                Ok(scores)
            }
            Scorer::Autoencoder(ae) => {
                let flat = ae.flatten_windows(values)?;
                let mut scores = Vec::with_capacity(flat.nrows());
                const CHUNK: usize = 2048;
                let mut start = 0;
                while start < flat.nrows() {
                    let stop = (start + CHUNK).min(flat.nrows());
                    let block = flat.slice(s![start..stop, ..]).to_owned();
                    let recon = ae.net.forward_plain(&ae.params, &block);
                    for b in 0..stop - start {
                        let mut sq = 0.0;
                        for c in 0..block.ncols() {
                            let r = block[[b, c]] - recon[[b, c]];
                            sq += r * r;
                        }
                        scores.push(sq.sqrt());
                    }
                    start = stop;
                }
                Ok(scores)
            }
        }
    }

    /// Scores one K×d window (standardized).
    pub fn score(&self, window_values: &Array2<f64>) -> Result<f64> {
        let k = self.k();
        if window_values.nrows() != k {
            return Err(Error::ShapeMismatch {
                expected: format!("{k} rows"),
                got: format!("{}", window_values.nrows()),
            });
        }
        let scores = self.score_series(window_values)?;
        Ok(scores[0])
    }
}

/// Score function plus calibrated threshold.
#[derive(Clone, Debug)]
pub struct AnomalyDetector {
    scorer: Scorer,
    tau: f64,
    quantile: f64,
}

/// Per-step detection output. Step `offset + i` has score `scores[i]`;
/// steps before `offset` are unscored.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Detections {
    pub offset: usize,
    pub series_len: usize,
    pub tau: f64,
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl Detections {
    /// `None` for unscored steps (t < offset).
    pub fn label_at(&self, t: usize) -> Option<bool> {
        if t < self.offset || t >= self.series_len {
            None
        } else {
            Some(self.labels[t - self.offset])
        }
    }

    pub fn detected_steps(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| **l)
            .map(|(i, _)| i + self.offset)
            .collect()
    }
}

impl AnomalyDetector {
    pub fn new(scorer: Scorer, tau: f64, quantile: f64) -> Result<Self> {
        if !tau.is_finite() {
            return Err(Error::Parameter(format!("threshold must be finite, got {tau}")));
        }
        Ok(AnomalyDetector { scorer, tau, quantile })
    }

    /// Scores `calibration` (an all-normal standardized series) and sets
    /// τ at the empirical q-quantile of those scores.
    pub fn calibrate(scorer: Scorer, calibration: &MultivariateSeries, q: f64) -> Result<Self> {
        let scores = scorer.score_series(calibration.values())?;
        let tau = calibrate_threshold(&scores, q)?;
        AnomalyDetector::new(scorer, tau, q)
    }

    /// Calibrates on the tail of the training series: the last 10% of its
    /// steps, widened when needed to the minimum the quantile rule accepts.
    pub fn calibrate_on_tail(scorer: Scorer, train: &MultivariateSeries, q: f64) -> Result<Self> {
        let k = scorer.k();
        let len = train.len();
        let wanted = (len.div_ceil(10)).max(MIN_CALIBRATION_SCORES + k - 1);
        let start = len.saturating_sub(wanted);
        Self::calibrate(scorer, &train.slice_steps(start, len)?, q)
    }

    pub fn scorer(&self) -> &Scorer {
        &self.scorer
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn quantile(&self) -> f64 {
        self.quantile
    }

    pub fn k(&self) -> usize {
        self.scorer.k()
    }

    pub fn dim(&self) -> usize {
        self.scorer.dim()
    }

    pub fn set_tau(&mut self, tau: f64) {
        self.tau = tau;
    }

    pub fn score(&self, window_values: &Array2<f64>) -> Result<f64> {
        self.scorer.score(window_values)
    }

    /// Labels every scoreable step of a standardized series:
    /// label[t] = (s(W_t) > τ) for t ≥ K−1.
    pub fn detect(&self, series: &MultivariateSeries) -> Result<Detections> {
        let scores = self.scorer.score_series(series.values())?;
        let labels = scores.iter().map(|s| *s > self.tau).collect();
        Ok(Detections {
            offset: self.k() - 1,
            series_len: series.len(),
            tau: self.tau,
            scores,
            labels,
        })
    }
}

/// Empirical q-quantile with linear interpolation between order statistics:
/// for n sorted scores the quantile sits at rank h = (n−1)·q and
/// interpolates s[⌊h⌋] toward s[⌊h⌋+1]. q=0 gives the minimum, q=1 the
/// maximum. Requires at least 1000 scores.
pub fn calibrate_threshold(scores: &[f64], q: f64) -> Result<f64> {
    if scores.len() < 1000 {
        return Err(Error::TooFewScores { needed: 1000, got: scores.len() });
    }
    quantile_interpolated(scores, q)
}

/// The interpolation rule behind [`calibrate_threshold`], without the
/// calibration-size guard.
pub fn quantile_interpolated(scores: &[f64], q: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyInput { needed: 1, got: 0 });
    }
    if !(0.0..=1.0).contains(&q) || !q.is_finite() {
        return Err(Error::Parameter(format!("quantile must lie in [0, 1], got {q}")));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Parameter("scores must be finite".into()));
    }
    let mut sorted: Vec<f64> = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    if lo + 1 >= sorted.len() {
        return Ok(sorted[sorted.len() - 1]);
    }
    let frac = h - lo as f64;
    Ok(sorted[lo] + frac * (sorted[lo + 1] - sorted[lo]))
}

/// Threshold maximizing F1 against known labels, for reference-table
/// comparisons where quantile calibration is not wanted. Candidates are
/// midpoints between consecutive distinct scores plus one below the
/// minimum and one above the maximum.
pub fn best_f1_threshold(scores: &[f64], truth: &[bool]) -> Result<f64> {
    if scores.len() != truth.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} labels", scores.len()),
            got: format!("{}", truth.len()),
        });
    }
    if truth.iter().all(|t| *t) || truth.iter().all(|t| !*t) {
        return Err(Error::DegenerateLabels(
            "best-F1 threshold needs both classes".into(),
        ));
    }
    let mut sorted: Vec<f64> = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    sorted.dedup();
    let mut candidates = Vec::with_capacity(sorted.len() + 1);
    candidates.push(sorted[0] - 1.0);
    for w in sorted.windows(2) {
        candidates.push(0.5 * (w[0] + w[1]));
    }
    candidates.push(sorted[sorted.len() - 1] + 1.0);

    let mut best = (f64::NEG_INFINITY, candidates[0]);
    for &tau in &candidates {
        let predicted: Vec<bool> = scores.iter().map(|s| *s > tau).collect();
        let f1 = f1_score(&predicted, truth);
        if f1 > best.0 {
            best = (f1, tau);
        }
    }
    Ok(best.1)
}

/// Detection quality on aligned per-step labels.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DetectionReport {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub auc_pr: f64,
    pub auc_roc: f64,
    pub predicted: Vec<bool>,
}

fn f1_score(predicted: &[bool], truth: &[bool]) -> f64 {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (p, t) in predicted.iter().zip(truth.iter()) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Rank-based AUC-ROC with midrank tie handling; equals the probability a
/// random positive outscores a random negative (ties count half).
fn auc_roc(scores: &[f64], truth: &[bool]) -> f64 {
    let n = scores.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    let mut ranks = vec![0.0f64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &id in &idx[i..=j] {
            ranks[id] = avg;
        }
        i = j + 1;
    }
    let pos = truth.iter().filter(|t| **t).count();
    let neg = n - pos;
    let rank_sum: f64 = truth
        .iter()
        .zip(ranks.iter())
        .filter(|(t, _)| **t)
        .map(|(_, r)| *r)
        .sum();
    (rank_sum - pos as f64 * (pos as f64 + 1.0) / 2.0) / (pos as f64 * neg as f64)
}

/// Area under the precision-recall curve as average precision: the sum of
/// precision × recall-increment over score thresholds taken at every
/// distinct score, descending.
fn auc_pr(scores: &[f64], truth: &[bool]) -> f64 {
    let n = scores.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let total_pos = truth.iter().filter(|t| **t).count() as f64;
    let mut tp = 0.0;
    let mut seen = 0.0;
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        for &id in &idx[i..=j] {
            seen += 1.0;
            if truth[id] {
                tp += 1.0;
            }
        }
        let recall = tp / total_pos;
        let precision = tp / seen;
        ap += precision * (recall - prev_recall);
        prev_recall = recall;
        i = j + 1;
    }
    ap
}

/// Standard F1 / AUC-PR / AUC-ROC over aligned step labels. `truth` must
/// contain both classes, otherwise the areas are undefined.
pub fn eval_detection(
    predicted: &[bool],
    truth: &[bool],
    raw_scores: &[f64],
) -> Result<DetectionReport> {
    if predicted.len() != truth.len() || truth.len() != raw_scores.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} aligned entries", predicted.len()),
            got: format!("{} truth, {} scores", truth.len(), raw_scores.len()),
        });
    }
    if predicted.is_empty() {
        return Err(Error::EmptyInput { needed: 1, got: 0 });
    }
    let pos = truth.iter().filter(|t| **t).count();
    if pos == 0 || pos == truth.len() {
        return Err(Error::DegenerateLabels(format!(
            "need both classes in truth, got {pos} positives of {}",
            truth.len()
        )));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    for (p, t) in predicted.iter().zip(truth.iter()) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = tp as f64 / (tp + fn_) as f64;
    let f1 = if tp == 0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(DetectionReport {
        f1,
        precision,
        recall,
        auc_pr: auc_pr(raw_scores, truth),
        auc_roc: auc_roc(raw_scores, truth),
        predicted: predicted.to_vec(),
    })
}

/// Tape handles for a detector staged onto an autodiff tape, so recourse
/// training can differentiate scores with respect to window contents.
pub struct StagedDetector<'a> {
    detector: &'a AnomalyDetector,
    staged: Staged,
}

impl AnomalyDetector {
    /// Stages the scorer's parameters as tape leaves. The parameters stay
    /// frozen; only gradients through the window rows matter to callers.
    pub fn stage(&self, tape: &mut Tape) -> StagedDetector<'_> {
        let staged = match &self.scorer {
            Scorer::Residual(m) => m.params().stage(tape),
            Scorer::Autoencoder(ae) => ae.params.stage(tape),
        };
        StagedDetector { detector: self, staged }
    }
}

impl StagedDetector<'_> {
    /// Scores one window given as K row vars (each 1×d, oldest first).
    /// Returns a 1×1 scalar var.
    pub fn stage_score(&self, tape: &mut Tape, window_rows: &[Var]) -> Var {
        let k = self.detector.k();
        assert_eq!(window_rows.len(), k, "window must have exactly K rows");
        match &self.detector.scorer {
            Scorer::Residual(model) => {
                // Newest lag first: g_1 sees row K−2, g_2 row K−3, ...
                let lag_vars: Vec<Var> = (0..k - 1).map(|i| window_rows[k - 2 - i]).collect();
                let (hat, _) = model.stage_forecast(tape, &self.staged, &lag_vars);
                let resid = tape.sub(window_rows[k - 1], hat);
                tape.row_l2(resid)
            }
            Scorer::Autoencoder(ae) => {
                let flat = tape.concat_cols(window_rows);
                let recon = ae.net.forward(tape, &self.staged, flat);
                let resid = tape.sub(flat, recon);
                tape.row_l2(resid)
            }
        }
    }
}
