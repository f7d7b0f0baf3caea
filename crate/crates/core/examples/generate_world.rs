//! Samples a micro-world, corrupts a share of its pairings and writes the
//! result as an MDWB file.
//!
//! ```text
//! cargo run --example generate_world -- [eta] [out.mdwb]
//! ```

use mdw::dataset::{load_dataset, save_dataset, World, WorldParams};

fn main() -> mdw::Result<()> {
    let mut args = std::env::args().skip(1);
    let eta: f64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(0.3);
    let out = args.next().unwrap_or_else(|| "world.mdwb".into());

    let world = World::new(WorldParams {
        num_concepts: 10,
        ..WorldParams::default()
    })?;
    let clean = world.sample(500, 1)?;
    let noisy = clean.with_pmp(eta, 2)?;
    println!(
        "{} pairs over {} concepts, {} corrupted ({} with a mismatched concept)",
        noisy.len(),
        noisy.num_concepts(),
        noisy.corrupted_count(),
        noisy.noisy_count()
    );

    // Discriminative region of concept 0, drawn on the image grid.
    let [_, h, w] = noisy.image_shape();
    let mask = world.region_mask(0);
    for y in 0..h {
        let row: String = (0..w).map(|x| if mask[y * w + x] { '#' } else { '.' }).collect();
        println!("  {row}");
    }

    save_dataset(&noisy, &out)?;
    let back = load_dataset(&out)?;
    println!("wrote {out}; reload identical: {}", back == noisy);
    Ok(())
}
