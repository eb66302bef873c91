//! Roll out "what would the series have done had we intervened" and check
//! the exactness guarantees that make the engine trustworthy.
//!
//! The rollout keeps every per-step disturbance implied by the observed
//! data (abduction), adds the intervention at the acted step (action), and
//! replays the learned dynamics forward (prediction). Because it is
//! computed in difference form, two identities hold to the last bit:
//!
//!   1. a zero action reproduces the observed series exactly, and
//!   2. the acted step equals observation + theta exactly.
//!
//! The example verifies both with bit comparisons, then applies an oracle
//! action (the injected deviation, negated) and watches the acted step's
//! detector score fall back under the threshold. Steps after the action
//! keep the disturbances the observation implies, so a neighbour the model
//! already mispredicted keeps its factual score; the greedy loop in the
//! explain_episode example covers those with follow-up actions.
//!
//! ```text
//! $ cargo run --release --example counterfactual_rollout
//! ```

use ndarray::Array1;
use tsrecourse::detector::{AnomalyDetector, Scorer};
use tsrecourse::gvar::{train_gvar, GvarTrainConfig};
use tsrecourse::recourse::{counterfactual_rollout, RecourseAction};
use tsrecourse::series::{apply_standardizer, fit_standardizer};
use tsrecourse::synth::inject::{inject_anomalies, AnomalyKind, AnomalySpec};
use tsrecourse::synth::linear::{gen_linear, LinearSystemParams};

fn rows_bit_equal(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> bool {
    a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
}

fn main() -> tsrecourse::Result<()> {
    let t_train = 3_000;
    let t_len = 6_000;
    let k = 5;

    let clean = gen_linear(&LinearSystemParams::sample(5), t_len)?;
    let spec = AnomalySpec {
        magnitude: (4.0, 5.0),
        eligible: Some((t_train + 100, t_len - 100)),
        ..AnomalySpec::new(AnomalyKind::ExternalPoint, 0.005, 21)
    };
    let injected = inject_anomalies(&clean, &spec)?;
    let stats = fit_standardizer(&injected.series.slice_steps(0, t_train)?)?;
    let series = apply_standardizer(&injected.series, &stats)?;
    let clean_std = apply_standardizer(&clean.series, &stats)?;

    let train = series.slice_steps(0, t_train)?;
    let (gvar, _) = train_gvar(&train, k, &GvarTrainConfig { epochs: 20, ..Default::default() })?;
    let detector = AnomalyDetector::calibrate(Scorer::Residual(gvar.clone()), &train, 0.99)?;

    let ev = &injected.injected[0];
    let t0 = ev.start;
    let d = series.dim();
    let horizon = 8;
    println!("first injected event: t={t0}, dims {:?}", ev.dims);

    // Null action: the counterfactual must BE the observed series, bitwise.
    let null = vec![RecourseAction::new(t0, Array1::zeros(d))];
    let rollout = counterfactual_rollout(&gvar, &detector, &series, &null, horizon)?;
    let all_equal = (0..=horizon)
        .all(|l| rows_bit_equal(rollout.values.row(l), series.values().row(t0 + l)));
    println!("null action reproduces the observed series bitwise: {all_equal}");
    assert!(all_equal);

    // Additive action: the acted step is observation + theta, bitwise.
    let theta = Array1::from_elem(d, 0.5);
    let acted = vec![RecourseAction::new(t0, theta.clone())];
    let rollout = counterfactual_rollout(&gvar, &detector, &series, &acted, horizon)?;
    let expected = &series.values().row(t0) + &theta;
    let exact = rows_bit_equal(rollout.values.row(0), expected.view());
    println!("acted step equals observation + theta bitwise: {exact}");
    assert!(exact);

    // Oracle action: push the acted step back onto its clean trajectory.
    // For an external point anomaly this is the negated injection.
    let oracle: Array1<f64> =
        &clean_std.values().row(t0).to_owned() - &series.values().row(t0).to_owned();
    let actions = vec![RecourseAction::new(t0, oracle.clone())];
    let rollout = counterfactual_rollout(&gvar, &detector, &series, &actions, horizon)?;
    println!(
        "\noracle action cost |theta| = {:.3}, tau = {:.3}",
        actions[0].cost, rollout.tau
    );
    println!("  step   factual score   counterfactual   flipped");
    for l in 0..=horizon {
        let factual = detector.score(series.slice_steps(t0 + l + 1 - k, t0 + l + 1)?.values())?;
        println!(
            "  t0+{l}   {:>13.3}   {:>14.3}   {}",
            factual, rollout.scores[l], rollout.flipped[l]
        );
    }
    Ok(())
}
