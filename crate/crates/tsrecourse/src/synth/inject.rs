//! Anomaly injection: places non-overlapping events in an eligible region,
//! perturbs the generating process, and resimulates so every downstream
//! ripple is physically consistent.
//!
//! The clean exogenous trace is never modified; external ε values live in
//! the event records and are added during replay. Structural events carry
//! their realized ε = f̃(history) − f(history) rows, recorded after
//! resimulation, so the additive identity x_t = f(x_{t−1}) + u_t + ε_t
//! holds exactly along the anomalous trajectory.

use crate::error::{Error, Result};
use crate::series::MultivariateSeries;
use crate::synth::{labels_from_events, linear, lv, GeneratedDataset, System};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    /// Single-step additive spike on the exogenous input.
    ExternalPoint,
    /// Sustained additive push on the exogenous input over several steps.
    ExternalSeq,
    /// The self term of each affected dimension is sign-flipped and
    /// amplified 1.5× for the event duration.
    StructuralSeq,
}

impl AnomalyKind {
    pub fn is_sequence(&self) -> bool {
        !matches!(self, AnomalyKind::ExternalPoint)
    }
}

impl std::fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AnomalyKind::ExternalPoint => "external_point",
            AnomalyKind::ExternalSeq => "external_seq",
            AnomalyKind::StructuralSeq => "structural_seq",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AnomalySpec {
    pub kind: AnomalyKind,
    /// Target fraction of abnormal steps within the eligible region, ≤ 0.2.
    pub rate: f64,
    /// |ε| per affected dimension, drawn uniformly from this range in units
    /// of that dimension's clean standard deviation; sign is a fair coin.
    pub magnitude: (f64, f64),
    /// Event length range for sequence kinds (inclusive).
    pub seq_len_range: (usize, usize),
    /// Each event perturbs between 1 and this many dimensions.
    pub max_affected_dims: usize,
    /// Minimum clean steps between consecutive events.
    pub min_gap: usize,
    /// Placement region [start, end); defaults to the series minus margins
    /// of 25 steps. σ is estimated from the prefix before `start` when that
    /// prefix is long enough, i.e. from the training region.
    pub eligible: Option<(usize, usize)>,
    pub seed: u64,
}

impl AnomalySpec {
    pub fn new(kind: AnomalyKind, rate: f64, seed: u64) -> Self {
        AnomalySpec {
            kind,
            rate,
            magnitude: (3.0, 5.0),
            seq_len_range: (3, 5),
            max_affected_dims: 3,
            min_gap: 10,
            eligible: None,
            seed,
        }
    }

    fn validate(&self, t_len: usize) -> Result<()> {
        if !(0.0..=0.2).contains(&self.rate) {
            return Err(Error::Parameter(format!("rate must lie in [0, 0.2], got {}", self.rate)));
        }
        let (lo, hi) = self.magnitude;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::Parameter(format!("magnitude range ({lo}, {hi}) must satisfy 0 < lo ≤ hi")));
        }
        if self.kind.is_sequence() {
            let (slo, shi) = self.seq_len_range;
            if slo < 2 || shi < slo {
                return Err(Error::Parameter(format!(
                    "sequence length range ({slo}, {shi}) must satisfy 2 ≤ lo ≤ hi"
                )));
            }
        }
        if self.max_affected_dims == 0 {
            return Err(Error::Parameter("max_affected_dims must be ≥ 1".into()));
        }
        if let Some((s, e)) = self.eligible {
            if s < 1 || e <= s || e > t_len {
                return Err(Error::Parameter(format!(
                    "eligible range {s}..{e} invalid for series of length {t_len}"
                )));
            }
        }
        Ok(())
    }
}

/// One placed anomaly. `eps` rows are full-d (zero off the affected dims):
/// for external kinds the constant push applied to the exogenous input, for
/// structural the realized transition difference at each event step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InjectedEvent {
    pub start: usize,
    pub len: usize,
    pub dims: Vec<usize>,
    pub kind: AnomalyKind,
    pub eps: Array2<f64>,
}

impl InjectedEvent {
    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn covers(&self, t: usize) -> bool {
        t >= self.start && t < self.end()
    }
}

const DEFAULT_MARGIN: usize = 25;

/// Places events per `spec`, perturbs the process, and resimulates.
/// Existing events are kept and never overlapped.
pub fn inject_anomalies(dataset: &GeneratedDataset, spec: &AnomalySpec) -> Result<GeneratedDataset> {
    let t_len = dataset.series.len();
    let d = dataset.series.dim();
    spec.validate(t_len)?;
    if spec.rate == 0.0 {
        return Ok(dataset.clone());
    }

    let (lo_e, hi_e) = spec.eligible.unwrap_or_else(|| {
        (DEFAULT_MARGIN.min(t_len / 4), t_len.saturating_sub(DEFAULT_MARGIN))
    });
    if hi_e <= lo_e + 1 {
        return Err(Error::Placement(format!("eligible region {lo_e}..{hi_e} too small")));
    }

    // Per-dimension scale from the clean prefix (the training region) when
    // one exists, otherwise from the whole clean series.
    let sigma = clean_sigma(&dataset.series, if lo_e >= 100 { lo_e } else { t_len });

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let span = hi_e - lo_e;
    let target = ((spec.rate * span as f64).round() as usize).max(1);
    let allowed_max = (1.2 * target as f64).floor() as usize;

    let mut occupied: Vec<(usize, usize)> = dataset
        .injected
        .iter()
        .map(|ev| (ev.start, ev.end()))
        .collect();
    let mut new_events: Vec<InjectedEvent> = Vec::new();
    let mut covered = 0usize;
    let mut attempts = 0usize;
    let attempt_cap = 1000 + 200 * (target + 1);

    while covered < target {
        let len = match spec.kind {
            AnomalyKind::ExternalPoint => 1,
            _ => rng.gen_range(spec.seq_len_range.0..=spec.seq_len_range.1),
        };
        if covered + len > allowed_max {
            // The next full event would overshoot the ±20% budget.
            break;
        }
        if lo_e + len > hi_e {
            return Err(Error::Placement(format!(
                "event length {len} exceeds eligible span {span}"
            )));
        }
        let start = rng.gen_range(lo_e..=hi_e - len);
        let lo_guard = start.saturating_sub(spec.min_gap);
        let hi_guard = start + len + spec.min_gap;
        let clash = occupied.iter().any(|&(s, e)| lo_guard < e && s < hi_guard);
        if clash {
            attempts += 1;
            if attempts > attempt_cap {
                return Err(Error::Placement(format!(
                    "could not reach rate {} with min_gap {} after {attempts} attempts \
                     ({covered}/{target} steps placed)",
                    spec.rate, spec.min_gap
                )));
            }
            continue;
        }
        occupied.push((start, start + len));

        let n_dims = rng.gen_range(1..=spec.max_affected_dims.min(d));
        let mut dims: Vec<usize> = rand::seq::index::sample(&mut rng, d, n_dims).into_vec();
        dims.sort_unstable();

        let mut eps = Array2::zeros((len, d));
        if !matches!(spec.kind, AnomalyKind::StructuralSeq) {
            for &j in &dims {
                let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let mag = rng.gen_range(spec.magnitude.0..=spec.magnitude.1);
                let value = sign * mag * sigma[j];
                for r in 0..len {
                    eps[[r, j]] = value;
                }
            }
        }
        new_events.push(InjectedEvent { start, len, dims, kind: spec.kind, eps });
        covered += len;
    }

    let realized = covered as f64 / span as f64;
    if (realized - spec.rate).abs() > 0.2 * spec.rate {
        return Err(Error::Placement(format!(
            "realized abnormal rate {realized:.4} outside ±20% of requested {}",
            spec.rate
        )));
    }

    let mut events: Vec<InjectedEvent> = dataset.injected.clone();
    events.extend(new_events);
    events.sort_by_key(|ev| ev.start);

    let values = dataset.system.resimulate(&dataset.exogenous, &events);
    fill_structural_eps(&dataset.system, &values, &dataset.exogenous, &mut events);

    if let System::LotkaVolterra(p) = &dataset.system {
        lv::check_bounded(&values, p.bound)?;
    }
    let labels = labels_from_events(t_len, &events)?;
    let series = MultivariateSeries::new(values)?.with_labels(labels)?;
    let series = match dataset.series.dim_names() {
        Some(names) => series.with_dim_names(names.to_vec())?,
        None => series,
    };
    Ok(GeneratedDataset {
        system: dataset.system.clone(),
        series,
        exogenous: dataset.exogenous.clone(),
        injected: events,
    })
}

/// Population std of each dimension over the first `upto` clean steps.
fn clean_sigma(series: &MultivariateSeries, upto: usize) -> Vec<f64> {
    let x = series.values();
    let n = upto.min(x.nrows());
    let d = x.ncols();
    let mut sigma = vec![0.0; d];
    for (j, s) in sigma.iter_mut().enumerate() {
        let col = x.column(j);
        let mean = col.iter().take(n).sum::<f64>() / n as f64;
        let var = col.iter().take(n).map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        *s = var.sqrt().max(1e-12);
    }
    sigma
}

/// Records ε = realized value − normal one-step transition for every step of
/// every structural event, evaluated along the anomalous trajectory.
fn fill_structural_eps(
    system: &System,
    values: &Array2<f64>,
    exogenous: &Array2<f64>,
    events: &mut [InjectedEvent],
) {
    let d = values.ncols();
    for ev in events.iter_mut() {
        if !matches!(ev.kind, AnomalyKind::StructuralSeq) {
            continue;
        }
        for off in 0..ev.len {
            let t = ev.start + off;
            let prev: Vec<f64> = (0..d).map(|j| values[[t - 1, j]]).collect();
            let u: Vec<f64> = (0..d).map(|j| exogenous[[t, j]]).collect();
            let normal = match system {
                System::Linear(p) => linear::one_step(p, &prev, &u),
                System::LotkaVolterra(p) => lv::one_step(p, &prev, &u),
            };
            for j in 0..d {
                ev.eps[[off, j]] = values[[t, j]] - normal[j];
            }
        }
    }
}
