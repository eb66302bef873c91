//! Sweep the action-cost weight and watch the validity/cost trade-off.
//!
//! The recourse loss balances "flip the detector" against "keep actions
//! small" through the weight lambda. Sweeping lambda over a grid while
//! holding everything else fixed should push both the flipping ratio and
//! the action cost down as lambda grows; [`lambda_sweep`] quantifies the
//! trend with Spearman rank correlations over the grid.
//!
//! ```text
//! $ cargo run --release --example tradeoff_sweep
//! ```

use tsrecourse::config::{DatasetKind, DetectorKind, ExperimentConfig, ModelSpec};
use tsrecourse::eval::lambda_sweep;
use tsrecourse::gvar::GvarTrainConfig;
use tsrecourse::recourse::{RecourseTrainConfig, RecourseVariant};
use tsrecourse::synth::inject::AnomalyKind;

fn main() -> tsrecourse::Result<()> {
    let cfg = ExperimentConfig {
        dataset: DatasetKind::Linear,
        anomaly: AnomalyKind::ExternalPoint,
        t_train: 2_000,
        t_test: 4_000,
        seeds: vec![1, 2],
        rate: 0.02,
        magnitude: (4.0, 5.0),
        detector: DetectorKind::Residual,
        // The sweep retrains only the recourse function, so baselines are
        // left out of the model list.
        models: vec![ModelSpec::Recad(RecourseVariant::Full)],
        gvar: GvarTrainConfig { epochs: 10, ..Default::default() },
        recourse: RecourseTrainConfig { epochs: 15, ..Default::default() },
        ..Default::default()
    };

    let grid = [0.02, 0.1, 0.5, 2.5];
    println!("sweeping lambda over {grid:?} with {} seeds each...\n", cfg.seeds.len());
    let sweep = lambda_sweep(&cfg, &grid)?;

    println!("lambda    flipping_ratio    action_cost");
    for point in &sweep.points {
        println!(
            "{:<9} {:>14.3} {:>14.3}",
            point.lambda, point.flipping_ratio, point.action_cost
        );
    }
    println!(
        "\nspearman(lambda, flipping_ratio) = {:+.3}",
        sweep.spearman_flipping
    );
    println!("spearman(lambda, action_cost)    = {:+.3}", sweep.spearman_cost);
    println!("both fall as lambda grows: {}", sweep.trend_holds);
    Ok(())
}
