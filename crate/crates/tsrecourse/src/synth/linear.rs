//! Four-dimensional linear system with lag-1 interactions and no
//! instantaneous effects:
//!
//! ```text
//! x1_t = a1·x1_{t−1}                            + u1_t
//! x2_t = a2·x2_{t−1} + a3·x1_{t−1}              + u2_t
//! x3_t = a4·x3_{t−1} + a5·x2_{t−1}              + u3_t
//! x4_t = a6·x4_{t−1} + a7·x2_{t−1} + a8·x3_{t−1} + u4_t
//! ```
//!
//! with u ~ N(0, noise_std²) i.i.d. and x_0 = u_0. The whole transition is
//! one 4×4 lag-1 matrix ([`LinearSystemParams::companion_matrix`]), which is
//! what oracle tests freeze GVAR coefficients to.

use crate::error::{Error, Result};
use crate::series::MultivariateSeries;
use crate::synth::inject::{AnomalyKind, InjectedEvent};
use crate::synth::{GeneratedDataset, System};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const LINEAR_DIM: usize = 4;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinearSystemParams {
    /// Interaction coefficients a_1..a_8, each with |a| in [0.2, 0.8].
    pub coefficients: [f64; 8],
    /// Standard deviation of the exogenous noise (default 0.4).
    pub noise_std: f64,
    pub seed: u64,
}

impl LinearSystemParams {
    pub fn new(coefficients: [f64; 8], noise_std: f64, seed: u64) -> Result<Self> {
        for (i, a) in coefficients.iter().enumerate() {
            let m = a.abs();
            if !(0.2..=0.8).contains(&m) {
                return Err(Error::Parameter(format!(
                    "coefficient a_{} = {a} outside ±[0.2, 0.8]",
                    i + 1
                )));
            }
        }
        if noise_std < 0.0 || !noise_std.is_finite() {
            return Err(Error::Parameter(format!("noise_std must be finite and ≥ 0, got {noise_std}")));
        }
        Ok(LinearSystemParams { coefficients, noise_std, seed })
    }

    /// Coefficients drawn from U([−0.8,−0.2] ∪ [0.2,0.8]), noise_std 0.4.
    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut coefficients = [0.0; 8];
        for a in coefficients.iter_mut() {
            let mag = rng.gen_range(0.2..=0.8);
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            *a = sign * mag;
        }
        LinearSystemParams { coefficients, noise_std: 0.4, seed }
    }

    /// The lag-1 transition matrix A with x_t = A·x_{t−1} + u_t.
    /// Row i lists the influence of each x^{(j)}_{t−1} on x^{(i)}_t.
    pub fn companion_matrix(&self) -> Array2<f64> {
        let a = &self.coefficients;
        let mut m = Array2::zeros((LINEAR_DIM, LINEAR_DIM));
        m[[0, 0]] = a[0];
        m[[1, 0]] = a[2];
        m[[1, 1]] = a[1];
        m[[2, 1]] = a[4];
        m[[2, 2]] = a[3];
        m[[3, 1]] = a[6];
        m[[3, 2]] = a[7];
        m[[3, 3]] = a[5];
        m
    }

    /// Self-coefficient of dimension `j` (the diagonal of the companion
    /// matrix), which structural interventions rescale.
    pub fn self_coefficient(&self, j: usize) -> f64 {
        [self.coefficients[0], self.coefficients[1], self.coefficients[3], self.coefficients[5]][j]
    }
}

/// Generates T steps, storing every u draw. Labels are all-normal.
pub fn gen_linear(params: &LinearSystemParams, t_len: usize) -> Result<GeneratedDataset> {
    if t_len < 100 {
        return Err(Error::EmptyInput { needed: 100, got: t_len });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut exogenous = Array2::zeros((t_len, LINEAR_DIM));
    if params.noise_std > 0.0 {
        let normal = Normal::new(0.0, params.noise_std)
            .map_err(|e| Error::Parameter(format!("noise distribution: {e}")))?;
        for v in exogenous.iter_mut() {
            *v = normal.sample(&mut rng);
        }
    }
    let values = resimulate(params, &exogenous, &[]);
    let series = MultivariateSeries::new(values)?
        .with_labels(vec![false; t_len])?
        .with_dim_names((1..=LINEAR_DIM).map(|i| format!("x{i}")).collect())?;
    Ok(GeneratedDataset {
        system: System::Linear(params.clone()),
        series,
        exogenous,
        injected: Vec::new(),
    })
}

/// Replays the dynamics from an exogenous trace, applying events.
/// External events add their recorded ε to the input; the structural kind
/// replaces the self-term a_jj·x_j with −1.5·a_jj·x_j on affected dims.
pub fn resimulate(
    params: &LinearSystemParams,
    exogenous: &Array2<f64>,
    events: &[InjectedEvent],
) -> Array2<f64> {
    let t_len = exogenous.nrows();
    let a = params.companion_matrix();
    let mut event_at: Vec<Option<(usize, usize)>> = vec![None; t_len];
    for (ei, ev) in events.iter().enumerate() {
        for (off, slot) in event_at[ev.start..ev.start + ev.len].iter_mut().enumerate() {
            *slot = Some((ei, off));
        }
    }
    let mut x = Array2::zeros((t_len, LINEAR_DIM));
    for j in 0..LINEAR_DIM {
        x[[0, j]] = exogenous[[0, j]];
    }
    for t in 1..t_len {
        for i in 0..LINEAR_DIM {
            let mut v = exogenous[[t, i]];
            for j in 0..LINEAR_DIM {
                v += a[[i, j]] * x[[t - 1, j]];
            }
            x[[t, i]] = v;
        }
        if let Some((ei, off)) = event_at[t] {
            let ev = &events[ei];
            match ev.kind {
                AnomalyKind::ExternalPoint | AnomalyKind::ExternalSeq => {
                    for j in 0..LINEAR_DIM {
                        x[[t, j]] += ev.eps[[off, j]];
                    }
                }
                AnomalyKind::StructuralSeq => {
                    for &j in &ev.dims {
                        x[[t, j]] += -2.5 * params.self_coefficient(j) * x[[t - 1, j]];
                    }
                }
            }
        }
    }
    x
}

/// One normal transition from the previous observed row: A·prev + u, with
/// the same accumulation order as [`resimulate`] so the two agree bitwise.
pub(crate) fn one_step(params: &LinearSystemParams, prev: &[f64], u: &[f64]) -> Vec<f64> {
    let a = params.companion_matrix();
    (0..LINEAR_DIM)
        .map(|i| {
            let mut v = u[i];
            for j in 0..LINEAR_DIM {
                v += a[[i, j]] * prev[j];
            }
            v
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> LinearSystemParams {
        LinearSystemParams::new([0.7, -0.4, 0.5, 0.6, -0.3, 0.2, 0.8, -0.5], 0.4, 9).unwrap()
    }

    #[test]
    fn zero_noise_gives_zero_series() {
        let p = LinearSystemParams::new([0.5; 8], 0.0, 1).unwrap();
        let ds = gen_linear(&p, 200).unwrap();
        assert!(ds.series.values().iter().all(|v| *v == 0.0));
        assert!(ds.exogenous.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn coefficients_outside_band_rejected() {
        assert!(LinearSystemParams::new([0.1, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5], 0.4, 0).is_err());
        assert!(LinearSystemParams::new([0.9, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5], 0.4, 0).is_err());
        assert!(LinearSystemParams::new([-0.2, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5], 0.4, 0).is_ok());
    }

    #[test]
    fn sampled_coefficients_respect_band_and_seed() {
        let p1 = LinearSystemParams::sample(42);
        let p2 = LinearSystemParams::sample(42);
        assert_eq!(p1.coefficients, p2.coefficients);
        for a in p1.coefficients {
            assert!((0.2..=0.8).contains(&a.abs()));
        }
    }

    #[test]
    fn resimulation_from_stored_exogenous_is_exact() {
        let ds = gen_linear(&params(), 5000).unwrap();
        let replay = resimulate(&params(), &ds.exogenous, &[]);
        let max = (ds.series.values() - &replay).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(max == 0.0, "replay deviates by {max}");
    }

    #[test]
    fn generation_is_deterministic_in_seed() {
        let a = gen_linear(&params(), 1000).unwrap();
        let b = gen_linear(&params(), 1000).unwrap();
        assert_eq!(a.series.values(), b.series.values());
        assert_eq!(a.exogenous, b.exogenous);
    }

    #[test]
    fn companion_matrix_matches_equations_by_hand() {
        let p = params();
        let a = p.companion_matrix();
        let x_prev = [1.5, -2.0, 0.5, 3.0];
        // Hand-expanded recurrence, one line per dimension.
        let expect = [
            0.7 * 1.5,
            -0.4 * -2.0 + 0.5 * 1.5,
            0.6 * 0.5 + -0.3 * -2.0,
            0.2 * 3.0 + 0.8 * -2.0 + -0.5 * 0.5,
        ];
        for i in 0..4 {
            let got: f64 = (0..4).map(|j| a[[i, j]] * x_prev[j]).sum();
            assert!((got - expect[i]).abs() < 1e-14, "row {i}: {got} vs {expect:?}");
        }
    }

    #[test]
    fn series_is_stationary_not_exploding() {
        let ds = gen_linear(&params(), 20_000).unwrap();
        let max = ds.series.values().iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(max < 50.0, "linear series should stay bounded, saw {max}");
    }
}
