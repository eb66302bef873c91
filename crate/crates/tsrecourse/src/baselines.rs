//! Forecast-then-subtract recourse baselines.
//!
//! Each baseline trains a one-step-ahead predictor of the normal value
//! from the K−1 preceding steps and acts with θ_t = x̃_t − x_t: replace
//! the observation with the forecast. None of them see the downstream
//! effect of an action; they repair one step at a time. Evaluation shares
//! the counterfactual rollout, detector, and stopping logic with the
//! learned recourse function, so reported differences come from action
//! production alone.

use crate::detector::AnomalyDetector;
use crate::error::{Error, Result};
use crate::gvar::{train_gvar, GvarModel, GvarTrainConfig};
use crate::nn::{Act, Adam, Dense, Lstm, Mlp, Params};
use crate::recourse::{explain_with, ExplainConfig, RecourseReport};
use crate::series::MultivariateSeries;
use crate::tape::Tape;
use ndarray::{s, Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const BASELINE_HIDDEN: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictorKind {
    Mlp,
    Lstm,
    Var,
    Gvar,
}

impl std::fmt::Display for PredictorKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            PredictorKind::Mlp => "mlp",
            PredictorKind::Lstm => "lstm",
            PredictorKind::Var => "var",
            PredictorKind::Gvar => "gvar",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for PredictorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(PredictorKind::Mlp),
            "lstm" => Ok(PredictorKind::Lstm),
            "var" => Ok(PredictorKind::Var),
            "gvar" => Ok(PredictorKind::Gvar),
            other => Err(Error::Parameter(format!(
                "unknown predictor kind {other:?} (expected mlp, lstm, var, or gvar)"
            ))),
        }
    }
}

/// Feed-forward predictor over the flattened history,
/// (K−1)·d → 100 → 100 → 100 → d.
#[derive(Clone, Debug)]
pub struct MlpPredictor {
    w: usize,
    d: usize,
    net: Mlp,
    pub params: Params,
}

impl MlpPredictor {
    /// Freshly initialized network; weights are random until trained or
    /// overwritten from a checkpoint.
    pub fn new(w: usize, d: usize, seed: u64) -> Result<Self> {
        if w == 0 || d == 0 {
            return Err(Error::Parameter(format!(
                "need history length ≥ 1 and d ≥ 1, got w={w}, d={d}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let net = Mlp::new(
            &mut params,
            &mut rng,
            "mlp",
            &[w * d, BASELINE_HIDDEN, BASELINE_HIDDEN, BASELINE_HIDDEN, d],
            Act::Tanh,
            Act::Identity,
        );
        Ok(MlpPredictor { w, d, net, params })
    }
}

/// Recurrent predictor: LSTM with hidden width 100 over the K−1 history
/// rows, affine head 100 → d on the final hidden state.
#[derive(Clone, Debug)]
pub struct LstmPredictor {
    w: usize,
    d: usize,
    lstm: Lstm,
    head: Dense,
    pub params: Params,
}

impl LstmPredictor {
    /// Freshly initialized network; weights are random until trained or
    /// overwritten from a checkpoint.
    pub fn new(w: usize, d: usize, seed: u64) -> Result<Self> {
        if w == 0 || d == 0 {
            return Err(Error::Parameter(format!(
                "need history length ≥ 1 and d ≥ 1, got w={w}, d={d}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let lstm = Lstm::new(&mut params, &mut rng, "seq", d, BASELINE_HIDDEN);
        let head = Dense::new(&mut params, &mut rng, "head", BASELINE_HIDDEN, d);
        Ok(LstmPredictor { w, d, lstm, head, params })
    }
}

/// Vector autoregression of order K−1 with intercept, fit by least
/// squares. `coef` is (1 + (K−1)·d) × d: row 0 the intercept, then the
/// lag-1 block, lag-2 block, and so on.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VarPredictor {
    w: usize,
    d: usize,
    pub coef: Array2<f64>,
}

impl VarPredictor {
    pub fn new(w: usize, d: usize, coef: Array2<f64>) -> Result<Self> {
        let expected = (1 + w * d, d);
        if w == 0 || d == 0 || coef.dim() != expected {
            return Err(Error::ShapeMismatch {
                expected: format!("{}x{}", expected.0, expected.1),
                got: format!("{}x{}", coef.nrows(), coef.ncols()),
            });
        }
        Ok(VarPredictor { w, d, coef })
    }

    /// Lag-k coefficient block as a d×d matrix: entry (i, j) multiplies
    /// x_j at lag k in the prediction of dimension i.
    pub fn lag_matrix(&self, lag: usize) -> Result<Array2<f64>> {
        if lag == 0 || lag > self.w {
            return Err(Error::Parameter(format!("lag {lag} outside 1..={}", self.w)));
        }
        let block = self.coef.slice(s![1 + (lag - 1) * self.d..1 + lag * self.d, ..]);
        Ok(block.t().to_owned())
    }

    pub fn intercept(&self) -> Array1<f64> {
        self.coef.row(0).to_owned()
    }
}

/// A one-step-ahead predictor of the normal next value from a (K−1)×d
/// history window.
#[derive(Clone, Debug)]
pub enum NormalValuePredictor {
    Mlp(MlpPredictor),
    Lstm(LstmPredictor),
    Var(VarPredictor),
    Gvar(GvarModel),
}

impl NormalValuePredictor {
    pub fn kind(&self) -> PredictorKind {
        match self {
            NormalValuePredictor::Mlp(_) => PredictorKind::Mlp,
            NormalValuePredictor::Lstm(_) => PredictorKind::Lstm,
            NormalValuePredictor::Var(_) => PredictorKind::Var,
            NormalValuePredictor::Gvar(_) => PredictorKind::Gvar,
        }
    }

    /// Length of the history the predictor consumes (K−1).
    pub fn window_len(&self) -> usize {
        match self {
            NormalValuePredictor::Mlp(p) => p.w,
            NormalValuePredictor::Lstm(p) => p.w,
            NormalValuePredictor::Var(p) => p.w,
            NormalValuePredictor::Gvar(m) => m.k() - 1,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            NormalValuePredictor::Mlp(p) => p.d,
            NormalValuePredictor::Lstm(p) => p.d,
            NormalValuePredictor::Var(p) => p.d,
            NormalValuePredictor::Gvar(m) => m.dim(),
        }
    }

    /// Wraps an already-trained GVAR model: its in-window forecast from
    /// the K−1 available lags is the predicted normal value.
    pub fn from_gvar(model: GvarModel) -> Result<Self> {
        if model.k() < 2 {
            return Err(Error::Parameter("GVAR predictor needs K ≥ 2".into()));
        }
        Ok(NormalValuePredictor::Gvar(model))
    }

    /// Predicted next value from `history` ((K−1)×d, oldest row first).
    pub fn predict(&self, history: &Array2<f64>) -> Result<Array1<f64>> {
        let (w, d) = (self.window_len(), self.dim());
        if history.nrows() != w || history.ncols() != d {
            return Err(Error::ShapeMismatch {
                expected: format!("{w}×{d}"),
                got: format!("{}×{}", history.nrows(), history.ncols()),
            });
        }
        match self {
            NormalValuePredictor::Mlp(p) => {
                let flat = flatten_history(history);
                let out = p.net.forward_plain(&p.params, &flat);
                Ok(out.row(0).to_owned())
            }
            NormalValuePredictor::Lstm(p) => {
                let steps: Vec<Array2<f64>> = (0..w)
                    .map(|r| history.slice(s![r..r + 1, ..]).to_owned())
                    .collect();
                let hidden = p.lstm.forward_plain(&p.params, &steps);
                let out = p.head.forward_plain(&p.params, &hidden);
                Ok(out.row(0).to_owned())
            }
            NormalValuePredictor::Var(p) => {
                let mut pred = p.coef.row(0).to_owned();
                for lag in 1..=w {
                    let row = history.row(w - lag);
                    for i in 0..d {
                        for j in 0..d {
                            pred[i] += p.coef[[1 + (lag - 1) * d + j, i]] * row[j];
                        }
                    }
                }
                Ok(pred)
            }
            NormalValuePredictor::Gvar(m) => m.forecast_partial(&history.to_owned()),
        }
    }
}

/// History rows flattened step-major into a 1×(w·d) input.
fn flatten_history(history: &Array2<f64>) -> Array2<f64> {
    let (w, d) = (history.nrows(), history.ncols());
    let mut flat = Array2::zeros((1, w * d));
    for r in 0..w {
        for c in 0..d {
            flat[[0, r * d + c]] = history[[r, c]];
        }
    }
    flat
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for BaselineTrainConfig {
    fn default() -> Self {
        BaselineTrainConfig { epochs: 30, batch_size: 256, learning_rate: 1e-3, seed: 0 }
    }
}

impl BaselineTrainConfig {
    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Parameter("need epochs ≥ 1 and batch_size ≥ 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Parameter("learning_rate must be > 0".into()));
        }
        Ok(())
    }
}

/// Trains a predictor of the given kind on normal data, using windows of
/// length K−1 to predict the next step. Neural kinds train with Adam on
/// mean squared error; VAR fits by least squares; the GVAR kind trains a
/// fresh K-lag model with matching optimizer settings. Returns the
/// predictor and a per-epoch loss curve (a single in-sample value for
/// VAR).
pub fn train_predictor(
    kind: PredictorKind,
    data: &MultivariateSeries,
    k: usize,
    cfg: &BaselineTrainConfig,
) -> Result<(NormalValuePredictor, Vec<f64>)> {
    cfg.validate()?;
    if k < 2 {
        return Err(Error::Parameter(format!("window length must be ≥ 2, got {k}")));
    }
    if let Some(labels) = data.labels() {
        if labels.iter().any(|l| *l) {
            return Err(Error::Parameter(
                "predictor training requires normal data, but the series has labeled anomalies"
                    .into(),
            ));
        }
    }
    let w = k - 1;
    if data.len() <= w {
        return Err(Error::EmptyInput { needed: w + 1, got: data.len() });
    }
    match kind {
        PredictorKind::Var => {
            let (p, mse) = fit_var(data.values(), w)?;
            Ok((NormalValuePredictor::Var(p), vec![mse]))
        }
        PredictorKind::Gvar => {
            let gcfg = GvarTrainConfig {
                epochs: cfg.epochs,
                batch_size: cfg.batch_size,
                learning_rate: cfg.learning_rate,
                seed: cfg.seed,
                ..Default::default()
            };
            let (model, report) = train_gvar(data, k, &gcfg)?;
            let curve = report.curve.iter().map(|r| r.total).collect();
            Ok((NormalValuePredictor::Gvar(model), curve))
        }
        PredictorKind::Mlp | PredictorKind::Lstm => train_neural(kind, data, w, cfg),
    }
}

fn train_neural(
    kind: PredictorKind,
    data: &MultivariateSeries,
    w: usize,
    cfg: &BaselineTrainConfig,
) -> Result<(NormalValuePredictor, Vec<f64>)> {
    let d = data.dim();
    let values = data.values();

    enum Net {
        Mlp(Mlp),
        Lstm(Lstm, Dense),
    }
    let (mut params, net) = match kind {
        PredictorKind::Mlp => {
            let MlpPredictor { net, params, .. } = MlpPredictor::new(w, d, cfg.seed)?;
            (params, Net::Mlp(net))
        }
        PredictorKind::Lstm => {
            let LstmPredictor { lstm, head, params, .. } = LstmPredictor::new(w, d, cfg.seed)?;
            (params, Net::Lstm(lstm, head))
        }
        _ => unreachable!("neural training only handles mlp and lstm"),
    };

    let mut adam = Adam::new(&params, cfg.learning_rate);
    let mut targets: Vec<usize> = (w..data.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6c62_272e_07bb_0142);
        shuffle_rng.set_stream(epoch as u64 + 1);
        targets.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut weight_sum = 0.0;
        for chunk in targets.chunks(cfg.batch_size) {
            let b = chunk.len();
            let mut target = Array2::zeros((b, d));
            for (row, &t) in chunk.iter().enumerate() {
                target.row_mut(row).assign(&values.row(t));
            }

            let mut tape = Tape::new();
            let sp = params.stage(&mut tape);
            let pred = match &net {
                Net::Mlp(mlp) => {
                    let mut input = Array2::zeros((b, w * d));
                    for (row, &t) in chunk.iter().enumerate() {
                        for r in 0..w {
                            for c in 0..d {
                                input[[row, r * d + c]] = values[[t - w + r, c]];
                            }
                        }
                    }
                    let x = tape.leaf(input);
                    mlp.forward(&mut tape, &sp, x)
                }
                Net::Lstm(lstm, head) => {
                    let steps: Vec<_> = (0..w)
                        .map(|r| {
                            let mut m = Array2::zeros((b, d));
                            for (row, &t) in chunk.iter().enumerate() {
                                m.row_mut(row).assign(&values.row(t - w + r));
                            }
                            tape.leaf(m)
                        })
                        .collect();
                    let hidden = lstm.forward(&mut tape, &sp, &steps);
                    head.forward(&mut tape, &sp, hidden)
                }
            };
            let tgt = tape.leaf(target);
            let resid = tape.sub(pred, tgt);
            let sq = tape.row_sum_sq(resid);
            let total = tape.sum(sq);
            let loss = tape.scale(total, 1.0 / (b * d) as f64);
            let loss_val = tape.scalar(loss);
            if !loss_val.is_finite() {
                return Err(Error::Divergence { step });
            }
            loss_sum += loss_val * b as f64;
            weight_sum += b as f64;
            let grads_all = tape.backward(loss);
            let grads = sp.grads(&tape, &grads_all);
            adam.step(&mut params, &grads);
            step += 1;
        }
        curve.push(loss_sum / weight_sum);
    }

    let predictor = match net {
        Net::Mlp(mlp) => NormalValuePredictor::Mlp(MlpPredictor { w, d, net: mlp, params }),
        Net::Lstm(lstm, head) => {
            NormalValuePredictor::Lstm(LstmPredictor { w, d, lstm, head, params })
        }
    };
    Ok((predictor, curve))
}

/// Least-squares VAR fit: regresses x_t on [1, x_{t−1}, …, x_{t−w}] over
/// every full window, solving the normal equations by Cholesky. Returns
/// the predictor and the in-sample mean squared residual.
fn fit_var(values: &Array2<f64>, w: usize) -> Result<(VarPredictor, f64)> {
    let (t_len, d) = (values.nrows(), values.ncols());
    let n = t_len - w;
    let cols = 1 + w * d;
    if n < cols {
        return Err(Error::EmptyInput { needed: w + cols, got: t_len });
    }

    let mut z = Array2::zeros((n, cols));
    let mut x = Array2::zeros((n, d));
    for (row, t) in (w..t_len).enumerate() {
        z[[row, 0]] = 1.0;
        for lag in 1..=w {
            for j in 0..d {
                z[[row, 1 + (lag - 1) * d + j]] = values[[t - lag, j]];
            }
        }
        x.row_mut(row).assign(&values.row(t));
    }

    let g = z.t().dot(&z);
    let c = z.t().dot(&x);
    let coef = cholesky_solve(&g, &c)?;

    let fitted = z.dot(&coef);
    let mse = (&x - &fitted).mapv(|v| v * v).sum() / (n * d) as f64;
    Ok((VarPredictor { w, d, coef }, mse))
}

/// Solves G·B = C for symmetric positive-definite G via Cholesky.
fn cholesky_solve(g: &Array2<f64>, c: &Array2<f64>) -> Result<Array2<f64>> {
    let n = g.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    let scale = (0..n).map(|i| g[[i, i]].abs()).fold(0.0f64, f64::max).max(1.0);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = g[[i, j]];
            for p in 0..j {
                sum -= l[[i, p]] * l[[j, p]];
            }
            if i == j {
                if sum <= 1e-12 * scale {
                    return Err(Error::Parameter(
                        "singular design matrix in least-squares fit".into(),
                    ));
                }
                l[[i, i]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }

    let m = c.ncols();
    let mut out = Array2::zeros((n, m));
    for col in 0..m {
        // Forward: L·y = c.
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut sum = c[[i, col]];
            for p in 0..i {
                sum -= l[[i, p]] * y[p];
            }
            y[i] = sum / l[[i, i]];
        }
        // Back: Lᵀ·b = y.
        for i in (0..n).rev() {
            let mut sum = y[i];
            for p in i + 1..n {
                sum -= l[[p, i]] * out[[p, col]];
            }
            out[[i, col]] = sum / l[[i, i]];
        }
    }
    Ok(out)
}

/// The baseline recourse action on a K×d window ending at the abnormal
/// step: θ_t = x̃_t − x_t, the predicted normal value minus the observed
/// one.
pub fn baseline_action(
    predictor: &NormalValuePredictor,
    window: &Array2<f64>,
) -> Result<Array1<f64>> {
    let (w, d) = (predictor.window_len(), predictor.dim());
    if window.nrows() != w + 1 || window.ncols() != d {
        return Err(Error::ShapeMismatch {
            expected: format!("{}×{d}", w + 1),
            got: format!("{}×{}", window.nrows(), window.ncols()),
        });
    }
    let history = window.slice(s![..w, ..]).to_owned();
    let mut theta = predictor.predict(&history)?;
    for j in 0..d {
        theta[j] -= window[[w, j]];
    }
    Ok(theta)
}

/// Greedy recourse with a forecast-then-subtract baseline in place of the
/// learned action function. Rollout, scoring, and stopping are the exact
/// code path used for the learned function.
pub fn explain_baseline(
    gvar: &GvarModel,
    detector: &AnomalyDetector,
    predictor: &NormalValuePredictor,
    series: &MultivariateSeries,
    episode_start: usize,
    cfg: &ExplainConfig,
) -> Result<RecourseReport> {
    if predictor.window_len() != gvar.k() - 1 || predictor.dim() != gvar.dim() {
        return Err(Error::Parameter(format!(
            "predictor expects {}×{} history, model windows give {}×{}",
            predictor.window_len(),
            predictor.dim(),
            gvar.k() - 1,
            gvar.dim()
        )));
    }
    explain_with(gvar, detector, series, episode_start, cfg, |win, _delta| {
        baseline_action(predictor, win)
    })
}
