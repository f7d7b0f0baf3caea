use std::time::{Duration, Instant};

use mdw::config::RunConfig;
use mdw::eval::read_metrics_csv;
use mdw::pipeline::{run_pipeline, RunDir};

/// A clean 200-pair world runs end to end well within five minutes.
#[test]
fn clean_small_world_pipeline_is_quick() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = RunDir::new(tmp.path());
    let config = RunConfig::default()
        .with_overrides(["world.num_concepts=10", "data.train_size=200", "data.eta=0"])
        .unwrap();
    let start = Instant::now();
    run_pipeline(&config, &dir, false).unwrap();
    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(300), "took {elapsed:?}");
    let rsum = read_metrics_csv(dir.scores())
        .unwrap()
        .into_iter()
        .find(|r| r.stage == "eval" && r.metric == "rsum")
        .unwrap();
    assert!(rsum.value > 0.0);
}
