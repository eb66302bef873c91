//! Run the full seeded benchmark harness at a desk-check scale.
//!
//! One call to [`run_experiment`] generates data per seed, trains the
//! dynamics model, detector, recourse function, and the requested
//! baselines, runs recourse over every held-out episode, and aggregates
//! flipping ratio / action cost / action steps across seeds. Seeds run on
//! parallel workers; results are deterministic for a fixed config.
//!
//! ```text
//! $ cargo run --release --example run_benchmark
//! ```

use tsrecourse::baselines::PredictorKind;
use tsrecourse::config::{DatasetKind, DetectorKind, ExperimentConfig, ModelSpec};
use tsrecourse::eval::run_experiment;
use tsrecourse::gvar::GvarTrainConfig;
use tsrecourse::io::write_experiment_outputs;
use tsrecourse::recourse::{RecourseTrainConfig, RecourseVariant};
use tsrecourse::synth::inject::AnomalyKind;

fn main() -> tsrecourse::Result<()> {
    // Small sizes keep this example under a minute; the defaults in
    // ExperimentConfig are the full-scale settings.
    let cfg = ExperimentConfig {
        dataset: DatasetKind::Linear,
        anomaly: AnomalyKind::ExternalPoint,
        t_train: 2_000,
        t_test: 4_000,
        seeds: vec![1, 2, 3],
        rate: 0.02,
        magnitude: (4.0, 5.0),
        detector: DetectorKind::Residual,
        models: vec![
            ModelSpec::Recad(RecourseVariant::Full),
            ModelSpec::Baseline(PredictorKind::Var),
            ModelSpec::Baseline(PredictorKind::Gvar),
        ],
        gvar: GvarTrainConfig { epochs: 10, ..Default::default() },
        recourse: RecourseTrainConfig { epochs: 15, ..Default::default() },
        ..Default::default()
    };

    println!("running {} seeds x {} models...\n", cfg.seeds.len(), cfg.models.len());
    let result = run_experiment(&cfg)?;

    if let Some(detection) = &result.detection {
        println!("detection quality across seeds:");
        print!("{}", detection.to_csv_string());
        println!();
    }
    println!("recourse metrics (mean/std across seeds):");
    print!("{}", result.table.to_csv_string());
    for failure in &result.failures {
        println!("seed {} failed: {}", failure.seed, failure.message);
    }
    println!();
    for note in &result.notes {
        println!("note: {note}");
    }

    let out = std::env::temp_dir().join("tsrecourse-benchmark");
    std::fs::create_dir_all(&out)?;
    write_experiment_outputs(&out, &result)?;
    println!("\nwrote manifest, config, tables/, reports/ to {}", out.display());
    Ok(())
}
