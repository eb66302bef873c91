//! Seeded synthetic benchmarks with ground-truth exogenous traces.
//!
//! Both generators keep every noise draw they make (the `exogenous` matrix),
//! so any trajectory can be replayed exactly: [`System::resimulate`] with the
//! stored draws and no events reproduces the clean series bit for bit, and
//! with the injected events it reproduces the anomalous series. That replay
//! is the oracle the counterfactual machinery is tested against.
//!
//! Anomaly injection perturbs the *generating process*, not the observed
//! values: external kinds add to the exogenous input and the dynamics carry
//! the disturbance forward; the structural kind swaps the transition function
//! on the affected dimensions for the event duration.

pub mod inject;
pub mod linear;
pub mod lv;

pub use inject::{inject_anomalies, AnomalyKind, AnomalySpec, InjectedEvent};
pub use linear::LinearSystemParams;
pub use lv::LotkaVolterraParams;

use crate::error::Result;
use crate::series::MultivariateSeries;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Which generator produced a dataset, with its full parameterization.
/// Needed to resimulate trajectories under modified inputs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum System {
    Linear(LinearSystemParams),
    LotkaVolterra(LotkaVolterraParams),
}

impl System {
    pub fn dim(&self) -> usize {
        match self {
            System::Linear(_) => 4,
            System::LotkaVolterra(p) => 2 * p.p,
        }
    }

    /// Replays the dynamics from a full T×d exogenous trace, applying the
    /// given events. Deterministic; no randomness is drawn here.
    pub fn resimulate(&self, exogenous: &Array2<f64>, events: &[InjectedEvent]) -> Array2<f64> {
        match self {
            System::Linear(p) => linear::resimulate(p, exogenous, events),
            System::LotkaVolterra(p) => lv::resimulate(p, exogenous, events),
        }
    }
}

/// A generated series together with everything needed to replay or perturb
/// it: the generating system, the clean exogenous draws, and the injected
/// anomaly events (ε values live in the events, never in `exogenous`).
#[derive(Clone, Debug)]
pub struct GeneratedDataset {
    pub system: System,
    pub series: MultivariateSeries,
    pub exogenous: Array2<f64>,
    pub injected: Vec<InjectedEvent>,
}

impl GeneratedDataset {
    /// Step labels implied by the injected events.
    pub fn event_labels(&self) -> Vec<bool> {
        let mut labels = vec![false; self.series.len()];
        for ev in &self.injected {
            labels[ev.start..ev.start + ev.len].fill(true);
        }
        labels
    }

    /// True exogenous input realized at step `t`: the clean draw plus any
    /// event ε covering that step.
    pub fn realized_exogenous_row(&self, t: usize) -> Vec<f64> {
        let d = self.exogenous.ncols();
        let mut row: Vec<f64> = (0..d).map(|j| self.exogenous[[t, j]]).collect();
        for ev in &self.injected {
            if t >= ev.start && t < ev.start + ev.len {
                for (rj, e) in row.iter_mut().zip(ev.eps.row(t - ev.start).iter()) {
                    *rj += e;
                }
            }
        }
        row
    }
}

pub(crate) fn labels_from_events(t_len: usize, events: &[InjectedEvent]) -> Result<Vec<bool>> {
    let mut labels = vec![false; t_len];
    for ev in events {
        labels[ev.start..ev.start + ev.len].fill(true);
    }
    Ok(labels)
}
