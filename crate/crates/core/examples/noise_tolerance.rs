//! Trains linear probes on increasingly corrupted pairings with the
//! correspondence loss and with the negative-match loss, and compares how
//! much test retrieval each loses.
//!
//! ```text
//! cargo run --release --example noise_tolerance
//! ```

use std::sync::Arc;

use mdw::dataset::{World, WorldParams};
use mdw::encoders::{EncoderPair, LinearEncoder, DEFAULT_TAU};
use mdw::eval::{recall_at_k, train_probe, ProbeConfig, ProbeLoss, DEFAULT_KS};

const SEEDS: u64 = 5;

fn main() -> mdw::Result<()> {
    let world = World::new(WorldParams {
        num_concepts: 20,
        ..WorldParams::default()
    })?;
    let clean = world.sample(500, 1)?;
    let test = world.one_per_concept(2)?;
    let pair = EncoderPair::new(
        Arc::new(LinearEncoder::new(clean.image_shape(), 32)),
        clean.text_dim(),
        0,
        DEFAULT_TAU,
    )?;

    for loss in [ProbeLoss::Correspondence, ProbeLoss::Noncorrespondence] {
        let config = ProbeConfig {
            loss,
            epochs: 20,
            batch_size: 20,
            lr: 0.01,
            tau: DEFAULT_TAU,
        };
        let mut baseline = None;
        for eta in [0.0, 0.3, 0.5] {
            let data = clean.with_pmp(eta, 3)?;
            let mut total = 0.0;
            for seed in 0..SEEDS {
                let model = train_probe(&pair, &data, &config, seed)?;
                total += recall_at_k(&model, &test, &DEFAULT_KS)?.rsum;
            }
            let rsum = total / SEEDS as f64;
            let base = *baseline.get_or_insert(rsum);
            println!(
                "{loss:?} eta={eta:.1}: rsum {rsum:6.1} ({:+.1}% vs clean)",
                100.0 * (rsum - base) / base
            );
        }
    }
    Ok(())
}
