//! Distills twenty synthetic pairs from a noisy micro-world and compares
//! students trained on them with students trained on the undistilled
//! starting pairs.
//!
//! ```text
//! RUST_LOG=info cargo run --release --example distill
//! ```

use mdw::config::RunConfig;
use mdw::distillation::Trajectory;
use mdw::pipeline::{seed_selection, Experiment};

fn main() -> mdw::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let config = RunConfig::default();
    let exp = Experiment::generate(&config)?;

    let runs = exp.train_experts()?;
    let trajectories: Vec<Trajectory> = runs.iter().map(|r| r.trajectory.clone()).collect();
    let report = seed_selection(&runs);
    if let Some(r) = report {
        println!("{} pairs in the consensus-clean pool", r.consensus.len());
    }

    let init = exp.initial_distilled(report)?;
    let before = exp.evaluate(&init)?;
    let out = exp.distill(&trajectories, init)?;
    let after = exp.evaluate(&out.distilled)?;

    let head: Vec<f64> = out.losses.iter().take(10).copied().collect();
    let tail: Vec<f64> = out.losses.iter().rev().take(10).copied().collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    println!(
        "matching loss {:.4} -> {:.4} over {} steps ({} skipped)",
        mean(&head),
        mean(&tail),
        out.losses.len(),
        out.skipped
    );
    println!("student learning rate {:.4} -> {:.4}", config.initial_lr, out.distilled.lr());
    println!("rsum before distillation {:.1}, after {:.1}", before.mean.rsum, after.mean.rsum);
    println!(
        "soft labels peak on the diagonal for {:.0}% of rows",
        100.0 * out.distilled.diagonal_argmax_fraction()
    );
    Ok(())
}
