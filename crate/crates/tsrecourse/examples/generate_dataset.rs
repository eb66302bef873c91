//! Generate synthetic multivariate series and inject labeled anomalies.
//!
//! Builds the two bundled systems (a 4-dim linear VAR and a 20-dim
//! Lotka-Volterra food chain), injects each anomaly kind into the linear
//! one, prints the resulting event table, and writes the labeled series
//! plus its exogenous trace and event list to disk in the formats the
//! rest of the crate reads back.
//!
//! ```text
//! $ cargo run --release --example generate_dataset
//! ```

use tsrecourse::io::{write_events_json, write_series_csv};
use tsrecourse::synth::inject::{inject_anomalies, AnomalyKind, AnomalySpec};
use tsrecourse::synth::linear::{gen_linear, LinearSystemParams};
use tsrecourse::synth::lv::{gen_lotka_volterra, LotkaVolterraParams};

fn main() -> tsrecourse::Result<()> {
    let t_len = 5_000;

    let params = LinearSystemParams::sample(7);
    println!("linear system, coefficients sampled with seed 7:");
    println!("  a = {:?}", params.coefficients.map(|a| (a * 1000.0).round() / 1000.0));
    let clean = gen_linear(&params, t_len)?;
    println!("  {} steps x {} dims, all labels normal\n", clean.series.len(), clean.series.dim());

    let lv = gen_lotka_volterra(&LotkaVolterraParams::with_seed(7), t_len)?;
    println!("lotka-volterra food chain:");
    println!("  {} steps x {} dims (20 species)\n", lv.series.len(), lv.series.dim());

    // Inject each anomaly kind into its own copy of the clean linear data.
    // Point anomalies hit single steps; the sequence kinds run 3-5 steps.
    for kind in [AnomalyKind::ExternalPoint, AnomalyKind::ExternalSeq, AnomalyKind::StructuralSeq] {
        let spec = AnomalySpec {
            magnitude: (3.0, 5.0),
            eligible: Some((1_000, t_len - 100)),
            ..AnomalySpec::new(kind, 0.01, 42)
        };
        let injected = inject_anomalies(&clean, &spec)?;
        let labels = injected.event_labels();
        let abnormal = labels.iter().filter(|l| **l).count();
        println!(
            "{kind}: {} events, {abnormal}/{t_len} abnormal steps ({:.2}%)",
            injected.injected.len(),
            100.0 * abnormal as f64 / t_len as f64
        );
        for ev in injected.injected.iter().take(3) {
            println!(
                "  t={}..{} dims {:?}, first-step eps {:?}",
                ev.start,
                ev.end(),
                ev.dims,
                ev.eps.row(0).iter().map(|e| (e * 100.0).round() / 100.0).collect::<Vec<_>>()
            );
        }
        println!();
    }

    // Persist one injected dataset the way the pipeline expects it: the
    // labeled series, the clean exogenous draws, and the event list.
    let spec = AnomalySpec {
        eligible: Some((1_000, t_len - 100)),
        ..AnomalySpec::new(AnomalyKind::ExternalPoint, 0.01, 42)
    };
    let injected = inject_anomalies(&clean, &spec)?;
    let labeled = injected.series.clone().with_labels(injected.event_labels())?;

    let out = std::env::temp_dir().join("tsrecourse-generate");
    std::fs::create_dir_all(&out)?;
    write_series_csv(&out.join("series.csv"), &labeled)?;
    write_events_json(&out.join("events.json"), &injected.injected)?;
    println!("wrote series.csv and events.json to {}", out.display());
    Ok(())
}
