//! Grad-CAM activation maps of a trained expert, drawn next to the
//! concept's discriminative region, and the CEO weights they induce.
//!
//! ```text
//! cargo run --release --example ceo_maps
//! ```

use mdw::config::RunConfig;
use mdw::distillation::{aggregate_maps, fresh_weights, normalize_map};
use mdw::numeric::Tensor;
use mdw::pipeline::{seed_selection, Experiment};

const SHADES: [char; 5] = [' ', '.', ':', '*', '#'];

fn shade(v: f64) -> char {
    SHADES[((v * SHADES.len() as f64) as usize).min(SHADES.len() - 1)]
}

fn main() -> mdw::Result<()> {
    let config = RunConfig::default().with_overrides(["expert.count=1", "distill.size=5", "data.train_size=500"])?;
    let exp = Experiment::generate(&config)?;
    let runs = exp.train_experts()?;
    let expert = &runs[0].model;
    let distilled = exp.initial_distilled(seed_selection(&runs))?;

    let maps = aggregate_maps(
        &exp.pair,
        &expert.params,
        &distilled.images,
        &distilled.texts,
        &distilled.logits,
        3,
    )?;
    let [_, h, w] = distilled.image_shape;
    for (i, map) in maps.iter().enumerate() {
        let concept = exp.train.image_concept(distilled.source[i]);
        let mask = exp.train.region_masks()[concept].clone();
        let unit: Tensor = normalize_map(map);
        let weights = fresh_weights(&unit, config.ceo_config().beta);
        let peak = weights.data().iter().copied().fold(1.0, f64::max);
        println!("pair {i}, concept {concept}: activation | region   (largest weight {peak:.2})");
        for y in 0..h {
            let act: String = (0..w).map(|x| shade(unit.get(y, x))).collect();
            let reg: String = (0..w).map(|x| if mask[y * w + x] { '#' } else { '.' }).collect();
            println!("  {act} | {reg}");
        }
    }
    Ok(())
}
