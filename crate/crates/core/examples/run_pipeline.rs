//! Runs every stage into a run directory, the same way the `mdw pipeline`
//! subcommand does, then reads the scores back from CSV.
//!
//! ```text
//! cargo run --release --example run_pipeline -- [run-dir]
//! ```

use mdw::config::RunConfig;
use mdw::eval::read_metrics_csv;
use mdw::pipeline::{run_pipeline, RunDir};

fn main() -> mdw::Result<()> {
    let root = std::env::args().nth(1).unwrap_or_else(|| "runs/example".into());
    let config = RunConfig::default().with_overrides([
        "run.id=example",
        "world.num_concepts=10",
        "data.train_size=200",
        "data.eta=0",
        "expert.count=2",
        "distill.steps=50",
        "eval.seeds=3",
    ])?;
    let dir = RunDir::new(&root);
    for (stage, status) in run_pipeline(&config, &dir, false)? {
        println!("{stage}: {status:?}");
    }
    for row in read_metrics_csv(dir.scores())? {
        if row.metric == "rsum" {
            println!("{} epoch {}: rsum {:.1}", row.stage, row.epoch, row.value);
        }
    }
    println!("artifacts under {}", dir.root().display());
    Ok(())
}
