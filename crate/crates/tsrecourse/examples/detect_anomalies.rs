//! Calibrate an anomaly detector and score a contaminated series.
//!
//! Both scorer backends are shown: the forecast-residual scorer reuses
//! the trained coefficient model, while the window autoencoder learns its
//! own notion of a normal window. Each is calibrated to the same clean
//! quantile and evaluated against the injected ground truth.
//!
//! ```text
//! $ cargo run --release --example detect_anomalies
//! ```

use tsrecourse::detector::{
    eval_detection, train_autoencoder, AnomalyDetector, AutoencoderTrainConfig, Scorer,
};
use tsrecourse::gvar::{train_gvar, GvarTrainConfig};
use tsrecourse::series::{apply_standardizer, fit_standardizer};
use tsrecourse::synth::inject::{inject_anomalies, AnomalyKind, AnomalySpec};
use tsrecourse::synth::linear::{gen_linear, LinearSystemParams};

fn main() -> tsrecourse::Result<()> {
    let t_train = 4_000;
    let t_len = 10_000;
    let k = 5;

    let clean = gen_linear(&LinearSystemParams::sample(11), t_len)?;
    let spec = AnomalySpec {
        magnitude: (4.0, 5.0),
        eligible: Some((t_train + 100, t_len - 100)),
        ..AnomalySpec::new(AnomalyKind::ExternalPoint, 0.02, 99)
    };
    let injected = inject_anomalies(&clean, &spec)?;
    let truth = injected.event_labels();
    println!(
        "{} steps, {} injected events, {} abnormal steps after t={t_train}\n",
        t_len,
        injected.injected.len(),
        truth.iter().filter(|l| **l).count()
    );

    // Standardize with statistics from the clean prefix only, then hold
    // that prefix out as the calibration set.
    let stats = fit_standardizer(&injected.series.slice_steps(0, t_train)?)?;
    let standardized = apply_standardizer(&injected.series, &stats)?;
    let train = standardized.slice_steps(0, t_train)?;
    let test = standardized.slice_steps(t_train, t_len)?;
    let test_truth = &truth[t_train..];

    let (gvar, _) = train_gvar(&train, k, &GvarTrainConfig { epochs: 25, ..Default::default() })?;
    let ae_cfg = AutoencoderTrainConfig { epochs: 25, ..Default::default() };
    let (ae, _) = train_autoencoder(&train, k, &ae_cfg)?;

    for (name, scorer) in [
        ("forecast residual", Scorer::Residual(gvar.clone())),
        ("window autoencoder", Scorer::Autoencoder(ae)),
    ] {
        let detector = AnomalyDetector::calibrate(scorer, &train, 0.99)?;
        let detections = detector.detect(&test)?;
        let report = eval_detection(
            &detections.labels,
            &test_truth[detections.offset..],
            &detections.scores,
        )?;
        println!("{name} scorer, tau = {:.3} (clean 0.99-quantile):", detector.tau());
        println!(
            "  f1 {:.3}  precision {:.3}  recall {:.3}  auc-pr {:.3}  auc-roc {:.3}",
            report.f1, report.precision, report.recall, report.auc_pr, report.auc_roc
        );
        println!("  {} steps flagged abnormal\n", detections.detected_steps().len());
    }
    Ok(())
}
