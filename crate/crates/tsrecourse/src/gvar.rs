//! Generalized vector autoregression: K lag networks g_1..g_K, each mapping
//! a d-vector to a d×d coefficient matrix, with the one-step forecast
//!
//! ```text
//! x̂_t = Σ_{k=1..K} g_k(x_{t−k}) · x_{t−k}
//! ```
//!
//! Lag index k counts backward from the target step, so g_1 sees the newest
//! lag. Element (i, j) of matrix k is the influence of x^{(j)}_{t−k} on
//! x^{(i)}_t; inspecting the matrices exposes the learned Granger structure.
//!
//! The training objective is a mean unsquared residual norm plus a sparsity
//! penalty on the concatenated coefficient matrices M_t and a smoothness
//! penalty on ‖M_{t+1} − M_t‖₂ between neighboring steps. Minibatches are
//! contiguous time chunks (visited in seeded-random order) so the smoothness
//! term has in-batch neighbors to compare.

use crate::error::{Error, Result};
use crate::nn::{Act, Adam, Mlp, Params, Staged};
use crate::series::MultivariateSeries;
use crate::tape::{Tape, Var};
use ndarray::{s, Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const HIDDEN_WIDTH: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyKind {
    L1,
    L2,
}

impl std::fmt::Display for PenaltyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PenaltyKind::L1 => "l1",
            PenaltyKind::L2 => "l2",
        })
    }
}

impl std::str::FromStr for PenaltyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(PenaltyKind::L1),
            "l2" => Ok(PenaltyKind::L2),
            other => Err(Error::Parameter(format!("unknown penalty {other:?}, use l1 or l2"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GvarTrainConfig {
    pub lambda_sparsity: f64,
    pub gamma_smooth: f64,
    pub penalty_kind: PenaltyKind,
    /// Square the residual norm instead of using ‖·‖₂ as written.
    pub squared_residual: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for GvarTrainConfig {
    fn default() -> Self {
        GvarTrainConfig {
            lambda_sparsity: 0.1,
            gamma_smooth: 0.1,
            penalty_kind: PenaltyKind::L2,
            squared_residual: false,
            epochs: 40,
            batch_size: 256,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl GvarTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_sparsity < 0.0 || self.gamma_smooth < 0.0 {
            return Err(Error::Parameter("penalty weights must be ≥ 0".into()));
        }
        if self.epochs == 0 || self.batch_size < 2 || self.learning_rate <= 0.0 {
            return Err(Error::Parameter(
                "need epochs ≥ 1, batch_size ≥ 2, learning_rate > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Per-epoch loss terms, already weighted by λ and γ.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GvarLossRecord {
    pub epoch: usize,
    pub prediction: f64,
    pub sparsity: f64,
    pub smoothness: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GvarTrainReport {
    pub curve: Vec<GvarLossRecord>,
}

impl GvarTrainReport {
    pub fn final_record(&self) -> &GvarLossRecord {
        self.curve.last().expect("training ran at least one epoch")
    }
}

/// K lag networks, each d → hidden(tanh) → d·d.
#[derive(Clone, Debug)]
pub struct GvarModel {
    k: usize,
    d: usize,
    nets: Vec<Mlp>,
    params: Params,
}

impl GvarModel {
    pub fn new(k: usize, d: usize, seed: u64) -> Result<Self> {
        if k < 1 || d < 1 {
            return Err(Error::Parameter(format!("need K ≥ 1 and d ≥ 1, got K={k}, d={d}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let nets = (1..=k)
            .map(|lag| {
                Mlp::new(
                    &mut params,
                    &mut rng,
                    &format!("g{lag}"),
                    &[d, HIDDEN_WIDTH, d * d],
                    Act::Tanh,
                    Act::Identity,
                )
            })
            .collect();
        Ok(GvarModel { k, d, nets, params })
    }

    /// Model whose g_k ignore their input and return fixed matrices;
    /// hidden layers are zeroed so tanh(0) = 0, and the output bias holds
    /// the flattened matrix. Used to freeze the model to known dynamics.
    pub fn from_constant_matrices(mats: &[Array2<f64>]) -> Result<Self> {
        if mats.is_empty() {
            return Err(Error::EmptyInput { needed: 1, got: 0 });
        }
        let d = mats[0].nrows();
        for m in mats {
            if m.dim() != (d, d) {
                return Err(Error::ShapeMismatch {
                    expected: format!("{d}×{d}"),
                    got: format!("{}×{}", m.nrows(), m.ncols()),
                });
            }
        }
        let mut model = GvarModel::new(mats.len(), d, 0)?;
        for (idx, m) in mats.iter().enumerate() {
            let (hidden, out) = (model.nets[idx].layers[0], model.nets[idx].layers[1]);
            model.params.get_mut(hidden.w).fill(0.0);
            model.params.get_mut(hidden.b).fill(0.0);
            model.params.get_mut(out.w).fill(0.0);
            let bias = model.params.get_mut(out.b);
            for i in 0..d {
                for j in 0..d {
                    bias[[0, i * d + j]] = m[[i, j]];
                }
            }
        }
        Ok(model)
    }

    /// Model that forecasts zero everywhere.
    pub fn zeroed(k: usize, d: usize) -> Result<Self> {
        let mats: Vec<Array2<f64>> = (0..k).map(|_| Array2::zeros((d, d))).collect();
        GvarModel::from_constant_matrices(&mats)
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

    /// Coefficient matrices for a batch of lag vectors: rows of `x` go
    /// through net `lag` (1-based), giving B×(d·d) flattened matrices.
    fn coef_batch(&self, lag: usize, x: &Array2<f64>) -> Array2<f64> {
        self.nets[lag - 1].forward_plain(&self.params, x)
    }

    /// g_k(x)·x for a batch of lag rows: the lag-k additive contribution to
    /// the forecast of the step k ahead of each row.
    pub fn lag_term_plain(&self, k: usize, x: &Array2<f64>) -> Result<Array2<f64>> {
        if k == 0 || k > self.k {
            return Err(Error::Parameter(format!("lag must lie in 1..={}, got {k}", self.k)));
        }
        if x.ncols() != self.d {
            return Err(Error::DimensionMismatch { expected: self.d, got: x.ncols() });
        }
        let coefs = self.coef_batch(k, x);
        Ok(contract(&coefs, x))
    }

    /// Staged version of [`GvarModel::lag_term_plain`] over a B×d var.
    pub(crate) fn stage_lag_term(&self, tape: &mut Tape, sp: &Staged, k: usize, x: Var) -> Var {
        let coefs = self.nets[k - 1].forward(tape, sp, x);
        tape.coef_matvec(coefs, x)
    }

    /// One-step forecast from `n = lags.nrows()` lag rows (oldest first),
    /// using nets g_1..g_n. The full model forecast passes K rows; the
    /// in-window convention passes K−1.
    pub fn forecast_partial(&self, lags: &Array2<f64>) -> Result<Array1<f64>> {
        let n = lags.nrows();
        if n == 0 || n > self.k {
            return Err(Error::ShapeMismatch {
                expected: format!("1..={} lag rows", self.k),
                got: format!("{n}"),
            });
        }
        if lags.ncols() != self.d {
            return Err(Error::DimensionMismatch { expected: self.d, got: lags.ncols() });
        }
        let mut out = Array1::zeros(self.d);
        for k in 1..=n {
            let row = lags.slice(s![n - k..n - k + 1, ..]).to_owned();
            let term = self.lag_term_plain(k, &row)?;
            for i in 0..self.d {
                out[i] += term[[0, i]];
            }
        }
        Ok(out)
    }

    /// One-step forecast from exactly K lag rows, oldest first.
    pub fn forecast(&self, lags: &Array2<f64>) -> Result<Array1<f64>> {
        if lags.nrows() != self.k {
            return Err(Error::ShapeMismatch {
                expected: format!("{} lag rows", self.k),
                got: format!("{}", lags.nrows()),
            });
        }
        self.forecast_partial(lags)
    }

    /// Forecasts every step t ∈ [n_lags, T) of `values` from its `n_lags`
    /// preceding rows. Row r of the result is the forecast for step
    /// n_lags + r. Batched over time for throughput.
    pub fn forecast_matrix(&self, values: &Array2<f64>, n_lags: usize) -> Result<Array2<f64>> {
        if n_lags == 0 || n_lags > self.k {
            return Err(Error::Parameter(format!(
                "n_lags must lie in 1..={}, got {n_lags}",
                self.k
            )));
        }
        let t_len = values.nrows();
        if t_len <= n_lags {
            return Err(Error::EmptyInput { needed: n_lags + 1, got: t_len });
        }
        let b_total = t_len - n_lags;
        let mut out = Array2::zeros((b_total, self.d));
        const CHUNK: usize = 4096;
        let mut start = 0;
        while start < b_total {
            let stop = (start + CHUNK).min(b_total);
            for k in 1..=n_lags {
                let xk = values
                    .slice(s![n_lags + start - k..n_lags + stop - k, ..])
                    .to_owned();
                let term = self.lag_term_plain(k, &xk)?;
                let mut chunk = out.slice_mut(s![start..stop, ..]);
                chunk += &term;
            }
            start = stop;
        }
        Ok(out)
    }

    /// Exogenous input consistent with the observed step under this model:
    /// u_t = x_t − x̂_t, with the forecast from the K rows before `t`.
    pub fn abduct(&self, series: &MultivariateSeries, t: usize) -> Result<Array1<f64>> {
        self.abduct_values(series.values(), t)
    }

    /// [`GvarModel::abduct`] on a bare matrix.
    pub fn abduct_values(&self, values: &Array2<f64>, t: usize) -> Result<Array1<f64>> {
        if t < self.k {
            return Err(Error::InsufficientHistory { t, k: self.k });
        }
        if t >= values.nrows() {
            return Err(Error::Parameter(format!(
                "step {t} outside series of length {}",
                values.nrows()
            )));
        }
        let lags = values.slice(s![t - self.k..t, ..]).to_owned();
        let hat = self.forecast(&lags)?;
        let mut u = Array1::zeros(self.d);
        for j in 0..self.d {
            u[j] = values[[t, j]] - hat[j];
        }
        Ok(u)
    }

    /// The K coefficient matrices that forecast the step following the
    /// window, evaluated at the window's last K rows. Index 0 holds g_1
    /// (newest lag).
    pub fn coefficient_stack(&self, window_values: &Array2<f64>) -> Result<Vec<Array2<f64>>> {
        let n = window_values.nrows();
        if n < self.k {
            return Err(Error::ShapeMismatch {
                expected: format!("≥ {} rows", self.k),
                got: format!("{n}"),
            });
        }
        if window_values.ncols() != self.d {
            return Err(Error::DimensionMismatch { expected: self.d, got: window_values.ncols() });
        }
        let mut stack = Vec::with_capacity(self.k);
        for k in 1..=self.k {
            let row = window_values.slice(s![n - k..n - k + 1, ..]).to_owned();
            let flat = self.coef_batch(k, &row);
            let mut m = Array2::zeros((self.d, self.d));
            for i in 0..self.d {
                for j in 0..self.d {
                    m[[i, j]] = flat[[0, i * self.d + j]];
                }
            }
            stack.push(m);
        }
        Ok(stack)
    }

    /// Stages the forecast graph for a contiguous batch on a tape.
    /// `lag_vars[k−1]` must hold the B×d matrix of the k-th lag rows.
    /// Returns (forecast B×d, concatenated coefficients B×(n·d·d)).
    pub(crate) fn stage_forecast(
        &self,
        tape: &mut Tape,
        sp: &Staged,
        lag_vars: &[Var],
    ) -> (Var, Var) {
        assert!(!lag_vars.is_empty() && lag_vars.len() <= self.k);
        let mut forecast: Option<Var> = None;
        let mut coef_blocks = Vec::with_capacity(lag_vars.len());
        for (idx, &xk) in lag_vars.iter().enumerate() {
            let coefs = self.nets[idx].forward(tape, sp, xk);
            coef_blocks.push(coefs);
            let contrib = tape.coef_matvec(coefs, xk);
            forecast = Some(match forecast {
                Some(acc) => tape.add(acc, contrib),
                None => contrib,
            });
        }
        let stacked = tape.concat_cols(&coef_blocks);
        (forecast.unwrap(), stacked)
    }
}

/// out[b, i] = Σ_j coefs[b, i·d + j] · x[b, j], the plain counterpart of
/// the tape's coefficient-matrix application.
fn contract(coefs: &Array2<f64>, x: &Array2<f64>) -> Array2<f64> {
    let (b_total, d) = x.dim();
    let mut out = Array2::zeros((b_total, d));
    for b in 0..b_total {
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..d {
                acc += coefs[[b, i * d + j]] * x[[b, j]];
            }
            out[[b, i]] = acc;
        }
    }
    out
}

/// Lag-matrix views for a contiguous run of target steps.
/// Target steps are `values[k + start .. k + start + b]`.
fn chunk_lags(values: &Array2<f64>, k: usize, start: usize, b: usize) -> Vec<Array2<f64>> {
    (1..=k)
        .map(|lag| values.slice(s![k + start - lag..k + start + b - lag, ..]).to_owned())
        .collect()
}

/// Stages the full §-style training loss for one contiguous chunk.
/// Returns the scalar loss node and the three weighted term nodes.
fn stage_chunk_loss(
    model: &GvarModel,
    tape: &mut Tape,
    sp: &Staged,
    lag_mats: &[Array2<f64>],
    targets: &Array2<f64>,
    cfg: &GvarTrainConfig,
) -> (Var, [Var; 3]) {
    let b = targets.nrows();
    let lag_vars: Vec<Var> = lag_mats.iter().map(|m| tape.leaf(m.clone())).collect();
    let target_var = tape.leaf(targets.clone());

    let (forecast, stacked) = model.stage_forecast(tape, sp, &lag_vars);
    let resid = tape.sub(target_var, forecast);
    let resid_norms = if cfg.squared_residual {
        tape.row_sum_sq(resid)
    } else {
        tape.row_l2(resid)
    };
    let resid_sum = tape.sum(resid_norms);
    let pred_term = tape.scale(resid_sum, 1.0 / b as f64);

    let sparsity_rows = match cfg.penalty_kind {
        PenaltyKind::L1 => {
            let a = tape.abs(stacked);
            tape.row_sum(a)
        }
        PenaltyKind::L2 => tape.row_l2(stacked),
    };
    let sparsity_sum = tape.sum(sparsity_rows);
    let sparsity_term = tape.scale(sparsity_sum, cfg.lambda_sparsity / b as f64);

    let smooth_term = if b >= 2 && cfg.gamma_smooth > 0.0 {
        let diffs = tape.diff_rows(stacked);
        let norms = tape.row_l2(diffs);
        let sum = tape.sum(norms);
        tape.scale(sum, cfg.gamma_smooth / (b - 1) as f64)
    } else {
        tape.scalar_leaf(0.0)
    };

    let partial = tape.add(pred_term, sparsity_term);
    let total = tape.add(partial, smooth_term);
    (total, [pred_term, sparsity_term, smooth_term])
}

/// Trains a GVAR on an all-normal series (already standardized by the
/// caller). Deterministic given `cfg.seed`.
pub fn train_gvar(
    data: &MultivariateSeries,
    k: usize,
    cfg: &GvarTrainConfig,
) -> Result<(GvarModel, GvarTrainReport)> {
    cfg.validate()?;
    if let Some(labels) = data.labels() {
        if labels.iter().any(|l| *l) {
            return Err(Error::Parameter(
                "training data must contain only normal steps".into(),
            ));
        }
    }
    let t_len = data.len();
    if t_len <= 10 * k {
        return Err(Error::EmptyInput { needed: 10 * k + 1, got: t_len });
    }
    let values = data.values();
    let mut model = GvarModel::new(k, data.dim(), cfg.seed)?;
    let mut adam = Adam::new(&model.params, cfg.learning_rate);
    let n_targets = t_len - k;

    let mut chunk_starts: Vec<usize> = (0..n_targets).step_by(cfg.batch_size).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
        rng.set_stream(epoch as u64 + 1);
        chunk_starts.shuffle(&mut rng);

        let mut sums = [0.0f64; 3];
        let mut weights = [0.0f64; 3];
        for &start in &chunk_starts {
            let b = cfg.batch_size.min(n_targets - start);
            let lag_mats = chunk_lags(values, k, start, b);
            let targets = values.slice(s![k + start..k + start + b, ..]).to_owned();

            let mut tape = Tape::new();
            let sp = model.params.stage(&mut tape);
            let (loss, terms) = stage_chunk_loss(&model, &mut tape, &sp, &lag_mats, &targets, cfg);
            let loss_val = tape.scalar(loss);
            if !loss_val.is_finite() {
                return Err(Error::Divergence { step });
            }
            let grads_all = tape.backward(loss);
            let grads = sp.grads(&tape, &grads_all);
            adam.step(&mut model.params, &grads);
            step += 1;

            for (i, term) in terms.iter().enumerate() {
                let w = if i < 2 { b as f64 } else { (b.max(2) - 1) as f64 };
                sums[i] += tape.scalar(*term) * w;
                weights[i] += w;
            }
        }
        let prediction = sums[0] / weights[0];
        let sparsity = sums[1] / weights[1];
        let smoothness = if weights[2] > 0.0 { sums[2] / weights[2] } else { 0.0 };
        curve.push(GvarLossRecord {
            epoch,
            prediction,
            sparsity,
            smoothness,
            total: prediction + sparsity + smoothness,
        });
    }
    Ok((model, GvarTrainReport { curve }))
}

/// Maximum relative error between analytic and central finite-difference
/// gradients of the full training loss on one contiguous batch.
/// Differences use h = 1e-5; the relative error of a pair (a, n) is
/// |a − n| / max(|a|, |n|, 1e-3).
pub fn gradient_check(
    model: &GvarModel,
    values: &Array2<f64>,
    cfg: &GvarTrainConfig,
) -> Result<f64> {
    let k = model.k;
    if values.nrows() <= k + 1 {
        return Err(Error::EmptyInput { needed: k + 2, got: values.nrows() });
    }
    let b = values.nrows() - k;
    let lag_mats = chunk_lags(values, k, 0, b);
    let targets = values.slice(s![k.., ..]).to_owned();

    let loss_of = |params: &Params| -> f64 {
        let probe = GvarModel {
            k: model.k,
            d: model.d,
            nets: model.nets.clone(),
            params: params.clone(),
        };
        let mut tape = Tape::new();
        let sp = probe.params.stage(&mut tape);
        let (loss, _) = stage_chunk_loss(&probe, &mut tape, &sp, &lag_mats, &targets, cfg);
        tape.scalar(loss)
    };

    let mut tape = Tape::new();
    let sp = model.params.stage(&mut tape);
    let (loss, _) = stage_chunk_loss(model, &mut tape, &sp, &lag_mats, &targets, cfg);
    let grads_all = tape.backward(loss);
    let analytic = sp.grads(&tape, &grads_all);

    let h = 1e-5;
    let mut max_rel = 0.0f64;
    let mut params = model.params.clone();
    for (pi, id) in model.params.ids().enumerate() {
        let base = model.params.get(id).clone();
        for idx in 0..base.len() {
            let (r, c) = (idx / base.ncols(), idx % base.ncols());
            params.get_mut(id)[[r, c]] = base[[r, c]] + h;
            let fp = loss_of(&params);
            params.get_mut(id)[[r, c]] = base[[r, c]] - h;
            let fm = loss_of(&params);
            params.get_mut(id)[[r, c]] = base[[r, c]];
            let num = (fp - fm) / (2.0 * h);
            let ana = analytic[pi][[r, c]];
            let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-3);
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::linear::{gen_linear, LinearSystemParams};
    use rand::Rng;

    fn small_values(rows: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((rows, d), |_| rng.gen_range(-1.5..1.5))
    }

    #[test]
    fn zero_model_forecasts_zero_and_abducts_identity() {
        let model = GvarModel::zeroed(5, 4).unwrap();
        let lags = small_values(5, 4, 1);
        let f = model.forecast(&lags).unwrap();
        assert!(f.iter().all(|v| *v == 0.0));

        let series = MultivariateSeries::new(small_values(30, 4, 2)).unwrap();
        let u = model.abduct(&series, 10).unwrap();
        for j in 0..4 {
            assert_eq!(u[j], series.values()[[10, j]]);
        }
    }

    #[test]
    fn frozen_companion_matrix_reproduces_hand_computed_forecast() {
        let p = LinearSystemParams::new([0.7, -0.4, 0.5, 0.6, -0.3, 0.2, 0.8, -0.5], 0.4, 3)
            .unwrap();
        let a = p.companion_matrix();
        // Lag-1 dynamics as a K=3 model: g_1 = A, deeper lags zero.
        let mats = vec![a.clone(), Array2::zeros((4, 4)), Array2::zeros((4, 4))];
        let model = GvarModel::from_constant_matrices(&mats).unwrap();

        let lags = small_values(3, 4, 4);
        let f = model.forecast(&lags).unwrap();
        for i in 0..4 {
            let hand: f64 = (0..4).map(|j| a[[i, j]] * lags[[2, j]]).sum();
            assert!((f[i] - hand).abs() < 1e-14);
        }
    }

    #[test]
    fn forecast_plus_abduction_reconstructs_the_observation() {
        let model = GvarModel::new(4, 3, 7).unwrap();
        let series = MultivariateSeries::new(small_values(50, 3, 8)).unwrap();
        for t in [4, 20, 49] {
            let u = model.abduct(&series, t).unwrap();
            let lags = series.values().slice(s![t - 4..t, ..]).to_owned();
            let f = model.forecast(&lags).unwrap();
            for j in 0..3 {
                // x − hat rounds once, so the round trip is exact only to
                // one ulp.
                let diff = (f[j] + u[j] - series.values()[[t, j]]).abs();
                assert!(diff < 1e-12, "t={t} j={j} diff={diff}");
            }
        }
        assert!(matches!(
            model.abduct(&series, 3),
            Err(Error::InsufficientHistory { t: 3, k: 4 })
        ));
    }

    #[test]
    fn frozen_model_recovers_stored_exogenous() {
        let p = LinearSystemParams::sample(11);
        let ds = gen_linear(&p, 3000).unwrap();
        let mut mats = vec![p.companion_matrix()];
        for _ in 1..5 {
            mats.push(Array2::zeros((4, 4)));
        }
        let model = GvarModel::from_constant_matrices(&mats).unwrap();
        let mut worst = 0.0f64;
        for t in 5..3000 {
            let u = model.abduct(&ds.series, t).unwrap();
            for j in 0..4 {
                worst = worst.max((u[j] - ds.exogenous[[t, j]]).abs());
            }
        }
        assert!(worst < 1e-10, "worst abduction error {worst}");
    }

    #[test]
    fn forecast_matrix_agrees_with_per_step_forecasts() {
        let model = GvarModel::new(3, 4, 13).unwrap();
        let values = small_values(40, 4, 14);
        for n_lags in [2, 3] {
            let bulk = model.forecast_matrix(&values, n_lags).unwrap();
            for t in n_lags..40 {
                let lags = values.slice(s![t - n_lags..t, ..]).to_owned();
                let single = model.forecast_partial(&lags).unwrap();
                for j in 0..4 {
                    let diff = (bulk[[t - n_lags, j]] - single[j]).abs();
                    assert!(diff < 1e-12, "t={t} j={j} diff={diff}");
                }
            }
        }
    }

    #[test]
    fn coefficient_stack_exposes_dependency_structure() {
        let p = LinearSystemParams::new([0.7, -0.4, 0.5, 0.6, -0.3, 0.2, 0.8, -0.5], 0.4, 3)
            .unwrap();
        let mats = vec![p.companion_matrix(), Array2::zeros((4, 4))];
        let model = GvarModel::from_constant_matrices(&mats).unwrap();
        let stack = model.coefficient_stack(&small_values(6, 4, 15)).unwrap();
        assert_eq!(stack.len(), 2);
        // Second output dimension depends exactly on inputs 1 and 2 at lag 1.
        for j in 0..4 {
            let v = stack[0][[1, j]];
            if j <= 1 {
                assert!(v != 0.0);
            } else {
                assert_eq!(v, 0.0);
            }
        }
        assert!(stack[1].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let cfg = GvarTrainConfig { lambda_sparsity: 0.07, gamma_smooth: 0.13, ..Default::default() };
        for seed in [1, 2] {
            let model = GvarModel::new(3, 3, seed).unwrap();
            let values = small_values(3 + 8, 3, 100 + seed);
            let err = gradient_check(&model, &values, &cfg).unwrap();
            assert!(err < 1e-4, "seed {seed}: max rel err {err}");
        }

        let alt = GvarTrainConfig {
            lambda_sparsity: 0.05,
            gamma_smooth: 0.02,
            penalty_kind: PenaltyKind::L1,
            squared_residual: true,
            ..Default::default()
        };
        let model = GvarModel::new(2, 3, 3).unwrap();
        let values = small_values(2 + 6, 3, 103);
        let err = gradient_check(&model, &values, &alt).unwrap();
        assert!(err < 1e-4, "alt config: max rel err {err}");
    }

    #[test]
    fn trained_model_reaches_the_noise_floor_on_held_out_data() {
        use crate::series::{apply_standardizer, fit_standardizer};

        let p = LinearSystemParams::sample(31);
        let ds = gen_linear(&p, 4000).unwrap();
        let (train, test) = ds.series.split_at(3200).unwrap();
        let stats = fit_standardizer(&train).unwrap();
        let train_z = apply_standardizer(&train, &stats).unwrap();
        let test_z = apply_standardizer(&test, &stats).unwrap();

        let cfg = GvarTrainConfig { epochs: 60, seed: 2, ..Default::default() };
        let (model, report) = train_gvar(&train_z, 5, &cfg).unwrap();
        assert!(report.final_record().total.is_finite());

        // One-step forecasts on unseen data, error measured in raw units.
        // The generator's exogenous noise has variance 0.16 per dimension,
        // which lower-bounds any predictor's mean squared error.
        let hats = model.forecast_matrix(test_z.values(), 5).unwrap();
        let mut sq_sum = 0.0;
        let mut count = 0usize;
        for t in 5..test_z.len() {
            for j in 0..4 {
                let resid_z = test_z.values()[[t, j]] - hats[[t - 5, j]];
                let resid_raw = resid_z * stats.std[j];
                sq_sum += resid_raw * resid_raw;
                count += 1;
            }
        }
        let mse = sq_sum / count as f64;
        assert!(mse <= 1.2 * 0.16, "held-out MSE {mse} above 1.2× the noise floor");
        assert!(mse >= 0.8 * 0.16, "held-out MSE {mse} suspiciously below the noise floor");
    }

    #[test]
    fn zero_model_l2_penalty_gradient_is_exactly_zero() {
        let model = GvarModel::zeroed(2, 3).unwrap();
        let values = small_values(10, 3, 16);
        // Penalty-only loss: drop the prediction term by checking the
        // gradient of sparsity + smoothness at the all-zero stack, which
        // sits at the norm's nondifferentiable point where the chosen
        // subgradient is 0.
        let b = values.nrows() - 2;
        let lag_mats = chunk_lags(&values, 2, 0, b);
        let mut tape = Tape::new();
        let sp = model.params.stage(&mut tape);
        let lag_vars: Vec<Var> = lag_mats.iter().map(|m| tape.leaf(m.clone())).collect();
        let (_, stacked) = model.stage_forecast(&mut tape, &sp, &lag_vars);
        let norms = tape.row_l2(stacked);
        let s1 = tape.sum(norms);
        let diffs = tape.diff_rows(stacked);
        let dn = tape.row_l2(diffs);
        let s2 = tape.sum(dn);
        let penalty = tape.add(s1, s2);
        let grads_all = tape.backward(penalty);
        for g in sp.grads(&tape, &grads_all) {
            assert!(g.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn penalty_free_training_loss_is_nonincreasing_early() {
        let p = LinearSystemParams::sample(21);
        let ds = gen_linear(&p, 800).unwrap();
        let cfg = GvarTrainConfig {
            lambda_sparsity: 0.0,
            gamma_smooth: 0.0,
            epochs: 10,
            batch_size: 4096,
            seed: 5,
            ..Default::default()
        };
        let (_, report) = train_gvar(&ds.series, 3, &cfg).unwrap();
        for w in report.curve.windows(2) {
            assert!(
                w[1].total <= w[0].total + 1e-9,
                "loss increased: {} → {}",
                w[0].total,
                w[1].total
            );
        }
    }

    #[test]
    fn training_rejects_labeled_anomalies() {
        let values = small_values(200, 3, 17);
        let mut labels = vec![false; 200];
        labels[50] = true;
        let series = MultivariateSeries::new(values).unwrap().with_labels(labels).unwrap();
        assert!(train_gvar(&series, 3, &GvarTrainConfig::default()).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let p = LinearSystemParams::sample(23);
        let ds = gen_linear(&p, 500).unwrap();
        let cfg = GvarTrainConfig { epochs: 3, seed: 9, ..Default::default() };
        let (m1, r1) = train_gvar(&ds.series, 3, &cfg).unwrap();
        let (m2, r2) = train_gvar(&ds.series, 3, &cfg).unwrap();
        assert_eq!(r1.final_record().total, r2.final_record().total);
        for (a, b) in m1.params.iter_named().zip(m2.params.iter_named()) {
            assert_eq!(a.1, b.1);
        }
    }
}
