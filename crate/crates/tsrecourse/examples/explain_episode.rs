//! Learn a recourse function and explain a detected anomaly episode as a
//! minimal intervention, next to a forecast-then-subtract baseline.
//!
//! Pipeline: generate data with injected anomalies, train the dynamics
//! model and detector on the clean prefix, group detections into episodes,
//! train the action function on half of them, then explain a held-out
//! episode with both the learned function and a VAR baseline. Both go
//! through the identical greedy act-roll-rescore loop; only the policy
//! that proposes theta differs.
//!
//! ```text
//! $ cargo run --release --example explain_episode
//! ```

use tsrecourse::baselines::{explain_baseline, train_predictor, BaselineTrainConfig, PredictorKind};
use tsrecourse::detector::{AnomalyDetector, Scorer};
use tsrecourse::eval::extract_episodes;
use tsrecourse::gvar::{train_gvar, GvarTrainConfig};
use tsrecourse::recourse::{
    explain, train_recourse, ExplainConfig, RecourseReport, RecourseTrainConfig,
};
use tsrecourse::series::{apply_standardizer, fit_standardizer, StandardizationStats};
use tsrecourse::synth::inject::{inject_anomalies, AnomalyKind, AnomalySpec};
use tsrecourse::synth::linear::{gen_linear, LinearSystemParams};

fn describe(tag: &str, report: &RecourseReport, stats: &StandardizationStats) {
    println!("{tag}:");
    println!(
        "  flipped {} with {} action(s), budget exhausted: {}",
        report.flipped, report.steps_used, report.budget_exhausted
    );
    for action in &report.actions {
        let raw = action.theta_raw(stats);
        let cost: f64 = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let cells: Vec<String> = raw.iter().map(|v| format!("{v:+.3}")).collect();
        println!("  t={} theta (raw units) [{}], |theta| {cost:.3}", action.t, cells.join("  "));
    }
    let shown: Vec<String> = report.rollout.scores.iter().map(|s| format!("{s:.2}")).collect();
    println!("  post-action scores {} (tau {:.2})\n", shown.join(" "), report.rollout.tau);
}

fn main() -> tsrecourse::Result<()> {
    let t_train = 4_000;
    let t_len = 9_000;
    let k = 5;

    let clean = gen_linear(&LinearSystemParams::sample(13), t_len)?;
    let spec = AnomalySpec {
        magnitude: (4.0, 5.0),
        eligible: Some((t_train + 100, t_len - 100)),
        ..AnomalySpec::new(AnomalyKind::ExternalPoint, 0.01, 31)
    };
    let injected = inject_anomalies(&clean, &spec)?;
    let stats = fit_standardizer(&injected.series.slice_steps(0, t_train)?)?;
    let standardized = apply_standardizer(&injected.series, &stats)?;
    let train = standardized.slice_steps(0, t_train)?;
    let test = standardized.slice_steps(t_train, t_len)?;

    let (gvar, _) = train_gvar(&train, k, &GvarTrainConfig { epochs: 25, ..Default::default() })?;
    let detector = AnomalyDetector::calibrate(Scorer::Residual(gvar.clone()), &train, 0.99)?;
    let detections = detector.detect(&test)?;

    // Episodes live in test-slice coordinates; shift the event list to match.
    let events: Vec<_> = injected
        .injected
        .iter()
        .map(|ev| {
            let mut ev = ev.clone();
            ev.start -= t_train;
            ev
        })
        .collect();
    let episodes = extract_episodes(&detections, &events);
    println!("{} episodes detected in the test region", episodes.len());

    // Every other episode trains the action function; the rest stay unseen.
    let anchors: Vec<usize> =
        episodes.iter().step_by(2).map(|ep| ep.start).filter(|s| *s >= k).collect();
    let rec_cfg = RecourseTrainConfig { epochs: 80, ..Default::default() };
    let (h, losses) = train_recourse(&gvar, &detector, &test, &anchors, &rec_cfg)?;
    println!(
        "trained action function on {} episodes: loss {:.3} -> {:.3}\n",
        anchors.len(),
        losses[0],
        losses[losses.len() - 1]
    );

    let (var, _) =
        train_predictor(PredictorKind::Var, &train, k, &BaselineTrainConfig::default())?;

    let held_out =
        || episodes.iter().skip(1).step_by(2).filter(|ep| ep.start >= k);
    let target = held_out()
        .find(|ep| !ep.events.is_empty())
        .or_else(|| held_out().next())
        .expect("no held-out episode starts late enough");
    println!(
        "explaining held-out episode t={}..{} ({} injected event(s) overlap it)",
        target.start,
        target.end,
        target.events.len()
    );
    let cfg = ExplainConfig::default();
    let learned = explain(&gvar, &detector, &h, &test, target.start, &cfg)?;
    describe("learned recourse", &learned, &stats);
    let baseline = explain_baseline(&gvar, &detector, &var, &test, target.start, &cfg)?;
    describe("var forecast baseline", &baseline, &stats);
    Ok(())
}
