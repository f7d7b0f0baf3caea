//! Trains one expert on noisy pairs and follows how well its consensus
//! selection separates clean from corrupted pairs, epoch by epoch.
//!
//! ```text
//! cargo run --release --example filtration
//! ```

use mdw::config::RunConfig;
use mdw::filtration::{bimodality_coefficient, to_unit_interval};
use mdw::pipeline::Experiment;

fn main() -> mdw::Result<()> {
    let config = RunConfig::default().with_overrides(["world.num_concepts=100", "expert.count=1"])?;
    let exp = Experiment::generate(&config)?;
    println!(
        "{} pairs, {} corrupted; training one expert for {} epochs",
        exp.train.len(),
        exp.train.corrupted_count(),
        config.expert_config().epochs
    );
    let run = exp.train_experts()?.remove(0);

    println!("epoch  loss     val-rsum  gap     selected  precision  recall");
    for e in &run.epochs {
        println!(
            "{:>5}  {:>7.3}  {:>8.1}  {:>6.3}  {:>8}  {:>9.3}  {:>6.3}",
            e.epoch,
            e.mean_loss,
            e.val_rsum.unwrap_or(f64::NAN),
            e.similarity_gap,
            e.consensus_size,
            e.precision,
            e.recall
        );
    }

    if let Some(sims) = run.similarity_history.last() {
        let unit: Vec<f64> = sims.iter().map(|&s| to_unit_interval(s)).collect();
        println!("bimodality coefficient of the last similarities: {:.3}", bimodality_coefficient(&unit));
    }
    if let Some(bmm) = run.report.as_ref().and_then(|r| r.mixture.as_ref()) {
        println!(
            "mixture: clean mean {:.3} (weight {:.2}), noisy mean {:.3} (weight {:.2})",
            bmm.mean(0),
            bmm.weights[0],
            bmm.mean(1),
            bmm.weights[1]
        );
    }
    Ok(())
}
