//! Synthetic micro-worlds.
//!
//! Each concept owns an image template and a text prototype. The template is
//! a shared low-amplitude clutter background with one striped, colored patch
//! whose position, color, stripe orientation and period are drawn per
//! concept. The prototype is a unit vector built from the same attributes
//! through a fixed random map plus a concept-specific random offset, so the
//! two modalities describe the same underlying semantics.

use std::f64::consts::PI;

use mdw_numeric::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::RealDataset;
use crate::error::{contract, Result};

const NUM_ORIENTATIONS: usize = 4;
const PERIODS: [f64; 2] = [2.0, 4.0];
const ATTR_DIM: usize = 3 + NUM_ORIENTATIONS + PERIODS.len() + 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldParams {
    pub num_concepts: usize,
    /// `[channels, height, width]`.
    pub image_shape: [usize; 3],
    pub text_dim: usize,
    /// Std-dev of per-pixel Gaussian noise; text embeddings get noise of the
    /// same expected norm.
    pub intra_concept_noise: f64,
    /// Side length of the discriminative patch.
    pub patch: usize,
    /// Weight of the concept-specific random offset in text prototypes.
    pub text_offset: f64,
    pub seed: u64,
}

impl Default for WorldParams {
    fn default() -> Self {
        Self {
            num_concepts: 8,
            image_shape: [3, 16, 16],
            text_dim: 32,
            intra_concept_noise: 0.1,
            patch: 7,
            text_offset: 1.0,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
struct Concept {
    template: Vec<f64>,
    prototype: Vec<f64>,
    mask: Vec<bool>,
}

/// Concept templates and prototypes from which datasets are sampled.
#[derive(Clone, Debug)]
pub struct World {
    params: WorldParams,
    concepts: Vec<Concept>,
}

fn to_f32(x: f64) -> f64 {
    x as f32 as f64
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

impl World {
    pub fn new(params: WorldParams) -> Result<Self> {
        let [c, h, w] = params.image_shape;
        if c == 0 || h == 0 || w == 0 || params.text_dim == 0 {
            return contract(format!(
                "degenerate world shape {:?} / text dim {}",
                params.image_shape, params.text_dim
            ));
        }
        if params.num_concepts < 2 {
            return contract("a world needs at least two concepts");
        }
        if params.patch == 0 || params.patch > h.min(w) {
            return contract(format!("patch {} does not fit {h}x{w}", params.patch));
        }
        if !(params.intra_concept_noise >= 0.0) {
            return contract("intra-concept noise must be non-negative");
        }

        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        let std = Normal::new(0.0, 1.0).expect("unit normal");

        // Smooth clutter shared by every concept: a few low-frequency waves.
        let mut background = vec![0.0; c * h * w];
        for ch in 0..c {
            let waves: Vec<(f64, f64, f64)> = (0..3)
                .map(|_| {
                    (
                        rng.random_range(0.2..0.8),
                        rng.random_range(0.2..0.8),
                        rng.random_range(0.0..2.0 * PI),
                    )
                })
                .collect();
            for y in 0..h {
                for x in 0..w {
                    let v: f64 = waves
                        .iter()
                        .map(|&(fy, fx, ph)| (fy * y as f64 + fx * x as f64 + ph).sin())
                        .sum::<f64>()
                        / 3.0;
                    background[ch * h * w + y * w + x] = 0.15 + 0.08 * v;
                }
            }
        }

        let attr_map: Vec<f64> = (0..params.text_dim * ATTR_DIM)
            .map(|_| std.sample(&mut rng) / (ATTR_DIM as f64).sqrt())
            .collect();

        let p = params.patch;
        let concepts = (0..params.num_concepts)
            .map(|_| {
                let top = rng.random_range(0..=h - p);
                let left = rng.random_range(0..=w - p);
                let color: Vec<f64> = (0..c).map(|_| rng.random_range(0.35..1.0)).collect();
                let orientation = rng.random_range(0..NUM_ORIENTATIONS);
                let period_ix = rng.random_range(0..PERIODS.len());
                let period = PERIODS[period_ix];

                let mut template = background.clone();
                let mut mask = vec![false; h * w];
                for y in top..top + p {
                    for x in left..left + p {
                        mask[y * w + x] = true;
                        let (fy, fx) = (y as f64, x as f64);
                        let coord = match orientation {
                            0 => fy,
                            1 => fx,
                            2 => fy + fx,
                            _ => fy - fx,
                        };
                        let stripe = 0.55 + 0.45 * (2.0 * PI * coord / period).cos();
                        for ch in 0..c {
                            template[ch * h * w + y * w + x] = color[ch] * stripe;
                        }
                    }
                }
                template.iter_mut().for_each(|v| *v = to_f32(v.clamp(0.0, 1.0)));

                let mut attrs = vec![0.0; ATTR_DIM];
                for (k, col) in color.iter().take(3).enumerate() {
                    attrs[k] = (col - 0.675) * 3.0;
                }
                attrs[3 + orientation] = 1.0;
                attrs[3 + NUM_ORIENTATIONS + period_ix] = 1.0;
                attrs[ATTR_DIM - 2] = (top as f64 / (h - p).max(1) as f64) * 2.0 - 1.0;
                attrs[ATTR_DIM - 1] = (left as f64 / (w - p).max(1) as f64) * 2.0 - 1.0;
                let mut prototype: Vec<f64> = (0..params.text_dim)
                    .map(|d| {
                        let semantic: f64 = (0..ATTR_DIM)
                            .map(|k| attr_map[d * ATTR_DIM + k] * attrs[k])
                            .sum();
                        semantic
                            + params.text_offset * std.sample(&mut rng)
                                / (params.text_dim as f64).sqrt()
                    })
                    .collect();
                normalize(&mut prototype);
                prototype.iter_mut().for_each(|v| *v = to_f32(*v));

                Concept {
                    template,
                    prototype,
                    mask,
                }
            })
            .collect();

        Ok(Self { params, concepts })
    }

    pub fn params(&self) -> &WorldParams {
        &self.params
    }

    pub fn num_concepts(&self) -> usize {
        self.concepts.len()
    }

    pub fn template(&self, concept: usize) -> &[f64] {
        &self.concepts[concept].template
    }

    pub fn prototype(&self, concept: usize) -> &[f64] {
        &self.concepts[concept].prototype
    }

    /// Ground-truth discriminative region of a concept, `h*w` row-major.
    pub fn region_mask(&self, concept: usize) -> &[bool] {
        &self.concepts[concept].mask
    }

    /// `n_pairs` clean pairs with concepts assigned round-robin, then shuffled.
    pub fn sample(&self, n_pairs: usize, seed: u64) -> Result<RealDataset> {
        if n_pairs < self.num_concepts() {
            return contract(format!(
                "n_pairs {n_pairs} smaller than num_concepts {}",
                self.num_concepts()
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut concepts: Vec<usize> = (0..n_pairs).map(|i| i % self.num_concepts()).collect();
        rand::seq::SliceRandom::shuffle(concepts.as_mut_slice(), &mut rng);
        self.render(concepts, &mut rng)
    }

    /// One pair per concept, in concept order.
    pub fn one_per_concept(&self, seed: u64) -> Result<RealDataset> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.render((0..self.num_concepts()).collect(), &mut rng)
    }

    fn render(&self, concepts: Vec<usize>, rng: &mut ChaCha8Rng) -> Result<RealDataset> {
        let [c, h, w] = self.params.image_shape;
        let d_t = self.params.text_dim;
        let sigma = self.params.intra_concept_noise;
        let std = Normal::new(0.0, 1.0).expect("unit normal");
        let text_sigma = sigma / (d_t as f64).sqrt();

        let mut images = Vec::with_capacity(concepts.len() * c * h * w);
        let mut texts = Vec::with_capacity(concepts.len() * d_t);
        for &k in &concepts {
            let concept = &self.concepts[k];
            for &v in &concept.template {
                let noisy = if sigma > 0.0 {
                    (v + sigma * std.sample(rng)).clamp(0.0, 1.0)
                } else {
                    v
                };
                images.push(to_f32(noisy));
            }
            let mut t: Vec<f64> = concept
                .prototype
                .iter()
                .map(|&v| if sigma > 0.0 { v + text_sigma * std.sample(rng) } else { v })
                .collect();
            if sigma > 0.0 {
                normalize(&mut t);
                t.iter_mut().for_each(|v| *v = to_f32(*v));
            }
            texts.extend(t);
        }
        let n = concepts.len();
        let masks = (0..self.num_concepts())
            .map(|k| self.concepts[k].mask.clone())
            .collect();
        RealDataset::from_parts(
            [c, h, w],
            Tensor::new([n, c * h * w], images)?,
            Tensor::new([n, d_t], texts)?,
            (0..n).collect(),
            concepts,
            masks,
        )
    }
}

/// Samples a fresh world and draws `n_pairs` clean pairs from it.
pub fn generate_world(
    num_concepts: usize,
    n_pairs: usize,
    image_shape: [usize; 3],
    text_dim: usize,
    intra_concept_noise: f64,
    seed: u64,
) -> Result<RealDataset> {
    let params = WorldParams {
        num_concepts,
        image_shape,
        text_dim,
        intra_concept_noise,
        patch: WorldParams::default().patch.min(image_shape[1]).min(image_shape[2]),
        seed,
        ..WorldParams::default()
    };
    World::new(params)?.sample(n_pairs, seed.wrapping_add(1))
}
