//! Real (noisy) and distilled datasets.

mod format;
mod world;

use mdw_numeric::Tensor;
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use format::{
    decode_dataset, decode_distilled, decode_header, encode_dataset, encode_distilled, load_dataset, load_distilled, read_manifest, save_dataset, save_distilled,
    write_manifest, Header, Manifest, FORMAT_VERSION, MAGIC,
};
pub(crate) use format::{sidecar_path, Reader, Writer};
pub use world::{generate_world, World, WorldParams};

use crate::error::{contract, Result};
use crate::filtration::SelectionReport;

/// Smallest learning rate a distilled dataset may carry.
pub const MIN_STUDENT_LR: f64 = 1e-6;
/// Student learning rate a fresh distilled dataset starts from.
pub const INITIAL_STUDENT_LR: f64 = 0.1;

/// Image-text pairs with a possibly corrupted pairing.
///
/// Images and texts stay in generation order. The pairing is a permutation:
/// text `i` is presented together with image `pairing[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RealDataset {
    image_shape: [usize; 3],
    images: Tensor,
    texts: Tensor,
    pairing: Vec<usize>,
    noise_mask: Vec<bool>,
    concepts: Vec<usize>,
    region_masks: Vec<Vec<bool>>,
}

impl RealDataset {
    pub fn from_parts(
        image_shape: [usize; 3],
        images: Tensor,
        texts: Tensor,
        pairing: Vec<usize>,
        concepts: Vec<usize>,
        region_masks: Vec<Vec<bool>>,
    ) -> Result<Self> {
        let n = images.rows();
        let [c, h, w] = image_shape;
        if images.cols() != c * h * w {
            return contract(format!(
                "image rows have {} values, shape {image_shape:?} needs {}",
                images.cols(),
                c * h * w
            ));
        }
        if texts.rows() != n || pairing.len() != n || concepts.len() != n {
            return contract("images, texts, pairing and concepts disagree in length");
        }
        let mut seen = vec![false; n];
        for &p in &pairing {
            if p >= n || std::mem::replace(&mut seen[p], true) {
                return contract("pairing is not a permutation");
            }
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return contract("real images must lie in [0, 1]");
        }
        if concepts.iter().any(|&k| k >= region_masks.len())
            || region_masks.iter().any(|m| m.len() != h * w)
        {
            return contract("region masks do not cover every concept");
        }
        let noise_mask = (0..n).map(|i| concepts[pairing[i]] != concepts[i]).collect();
        Ok(Self {
            image_shape,
            images,
            texts,
            pairing,
            noise_mask,
            concepts,
            region_masks,
        })
    }

    pub fn len(&self) -> usize {
        self.pairing.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairing.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn text_dim(&self) -> usize {
        self.texts.cols()
    }

    pub fn num_concepts(&self) -> usize {
        self.region_masks.len()
    }

    /// Images in generation order (not in pairing order).
    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn texts(&self) -> &Tensor {
        &self.texts
    }

    pub fn pairing(&self) -> &[usize] {
        &self.pairing
    }

    /// True where the presented pair's image and text come from different
    /// concepts. Hidden from training; evaluation only.
    pub fn noise_mask(&self) -> &[bool] {
        &self.noise_mask
    }

    pub fn concepts(&self) -> &[usize] {
        &self.concepts
    }

    pub fn region_masks(&self) -> &[Vec<bool>] {
        &self.region_masks
    }

    /// Concept of the image presented with text `i`.
    pub fn image_concept(&self, i: usize) -> usize {
        self.concepts[self.pairing[i]]
    }

    /// Number of pairs whose image was swapped away from its text.
    pub fn corrupted_count(&self) -> usize {
        self.pairing.iter().enumerate().filter(|(i, &p)| *i != p).count()
    }

    pub fn noisy_count(&self) -> usize {
        self.noise_mask.iter().filter(|&&b| b).count()
    }

    /// Images presented with texts `indices`, one row each.
    pub fn paired_images(&self, indices: &[usize]) -> Result<Tensor> {
        let cols = self.images.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(self.images.row_slice(self.pairing[i]));
        }
        Ok(Tensor::new([indices.len(), cols], data)?)
    }

    pub fn text_rows(&self, indices: &[usize]) -> Result<Tensor> {
        let cols = self.texts.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            data.extend_from_slice(self.texts.row_slice(i));
        }
        Ok(Tensor::new([indices.len(), cols], data)?)
    }

    /// Corrupts the pairing of a Bernoulli(`eta`) subset of pairs by
    /// deranging their images among themselves.
    pub fn with_pmp(&self, eta: f64, seed: u64) -> Result<Self> {
        let n = self.len();
        let bound = (n as f64 - 1.0) / n as f64;
        if !(0.0..bound).contains(&eta) {
            return contract(format!(
                "noise ratio {eta} outside the tolerable range [0, (N-1)/N = {bound:.6})"
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let selected: Vec<usize> = (0..n).filter(|_| rng.random_bool(eta)).collect();
        let mut pairing = self.pairing.clone();
        if selected.len() >= 2 {
            let sigma = derangement(selected.len(), &mut rng);
            for (k, &i) in selected.iter().enumerate() {
                pairing[i] = self.pairing[selected[sigma[k]]];
            }
        }
        Self::from_parts(
            self.image_shape,
            self.images.clone(),
            self.texts.clone(),
            pairing,
            self.concepts.clone(),
            self.region_masks.clone(),
        )
    }
}

/// Uniform random permutation of `0..n` without fixed points (`n >= 2`).
fn derangement(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        perm.shuffle(rng);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return perm;
        }
    }
}

pub fn inject_pmp(dataset: &RealDataset, eta: f64, seed: u64) -> Result<RealDataset> {
    dataset.with_pmp(eta, seed)
}

/// Learnable synthetic pairs plus their soft matching logits.
#[derive(Clone, Debug, PartialEq)]
pub struct DistilledDataset {
    pub image_shape: [usize; 3],
    /// `m × (c·h·w)`.
    pub images: Tensor,
    /// `m × d_t`.
    pub texts: Tensor,
    /// `m × m` soft matching logits.
    pub logits: Tensor,
    lr: f64,
    /// Real indices the pairs were initialized from.
    pub source: Vec<usize>,
}

impl DistilledDataset {
    pub fn new(
        image_shape: [usize; 3],
        images: Tensor,
        texts: Tensor,
        logits: Tensor,
        lr: f64,
        source: Vec<usize>,
    ) -> Result<Self> {
        let m = images.rows();
        let [c, h, w] = image_shape;
        if images.cols() != c * h * w || texts.rows() != m || logits.shape() != [m, m] {
            return contract("distilled tensors disagree in shape");
        }
        if !(lr > 0.0) {
            return contract(format!("student learning rate must be positive, got {lr}"));
        }
        Ok(Self {
            image_shape,
            images,
            texts,
            logits,
            lr,
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.images.rows() == 0
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Sets the student learning rate, clamping at [`MIN_STUDENT_LR`].
    pub fn set_lr(&mut self, lr: f64) {
        if lr < MIN_STUDENT_LR {
            log::warn!("student learning rate {lr} clamped to {MIN_STUDENT_LR}");
            self.lr = MIN_STUDENT_LR;
        } else {
            self.lr = lr;
        }
    }

    /// Fraction of rows whose largest logit sits on the diagonal (ties
    /// resolved toward the lower index).
    pub fn diagonal_argmax_fraction(&self) -> f64 {
        let m = self.len();
        let hits = (0..m)
            .filter(|&i| argmax(self.logits.row_slice(i)) == i)
            .count();
        hits as f64 / m as f64
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Starts a distilled set from `m` randomly chosen real pairs, drawn from
/// the report's consensus-clean set when one is given.
pub fn init_distilled(
    dataset: &RealDataset,
    m: usize,
    seed: u64,
    report: Option<&SelectionReport>,
) -> Result<DistilledDataset> {
    if m == 0 || m * 10 > dataset.len() {
        return contract(format!(
            "distilled size {m} must satisfy 1 <= m <= N/10 (N = {})",
            dataset.len()
        ));
    }
    let pool: Vec<usize> = match report {
        Some(r) => r.consensus.clone(),
        None => (0..dataset.len()).collect(),
    };
    if m > pool.len() {
        return contract(format!(
            "distilled size {m} exceeds the clean pool of {}",
            pool.len()
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source: Vec<usize> = index::sample(&mut rng, pool.len(), m)
        .into_iter()
        .map(|k| pool[k])
        .collect();
    DistilledDataset::new(
        dataset.image_shape(),
        dataset.paired_images(&source)?,
        dataset.text_rows(&source)?,
        Tensor::identity(m)?,
        INITIAL_STUDENT_LR,
        source,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world(n: usize, concepts: usize, noise: f64, seed: u64) -> RealDataset {
        generate_world(concepts, n, [3, 16, 16], 32, noise, seed).unwrap()
    }

    #[test]
    fn zero_noise_samples_equal_their_template() {
        let params = WorldParams {
            intra_concept_noise: 0.0,
            ..WorldParams::default()
        };
        let w = World::new(params).unwrap();
        let d = w.sample(40, 3).unwrap();
        for i in 0..d.len() {
            let k = d.concepts()[i];
            assert_eq!(d.images().row_slice(i), w.template(k));
            assert_eq!(d.texts().row_slice(i), w.prototype(k));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(world(50, 5, 0.1, 9), world(50, 5, 0.1, 9));
        assert_ne!(world(50, 5, 0.1, 9), world(50, 5, 0.1, 10));
    }

    #[test]
    fn degenerate_shapes_are_rejected() {
        assert!(generate_world(4, 10, [0, 16, 16], 32, 0.1, 0).is_err());
        assert!(generate_world(4, 10, [3, 16, 16], 0, 0.1, 0).is_err());
        assert!(generate_world(1, 10, [3, 16, 16], 32, 0.1, 0).is_err());
        assert!(generate_world(4, 3, [3, 16, 16], 32, 0.1, 0).is_err());
    }

    #[test]
    fn images_stay_in_unit_interval() {
        let d = world(100, 4, 0.5, 1);
        assert!(d.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_eta_leaves_dataset_unchanged() {
        let d = world(100, 4, 0.1, 1);
        let n = d.with_pmp(0.0, 5).unwrap();
        assert_eq!(d, n);
        assert!(n.noise_mask().iter().all(|b| !b));
    }

    #[test]
    fn corrupted_count_within_three_sigma() {
        let d = world(1000, 50, 0.1, 2);
        for seed in 0..10 {
            let n = d.with_pmp(0.3, seed).unwrap();
            let count = n.corrupted_count();
            assert!((255..=345).contains(&count), "seed {seed}: {count}");
        }
    }

    #[test]
    fn eta_bound_is_enforced() {
        let d = world(10, 2, 0.1, 1);
        assert!(d.with_pmp(0.9, 0).is_err());
        assert!(d.with_pmp(0.89, 0).is_ok());
        assert!(d.with_pmp(-0.1, 0).is_err());
    }

    #[test]
    fn two_element_case_swaps_iff_both_selected() {
        // With N = 2 the bound is eta < 1/2. Enumerate seeds: a pair is either
        // left alone or swapped, never half-corrupted.
        let params = WorldParams {
            num_concepts: 2,
            ..WorldParams::default()
        };
        let d = World::new(params).unwrap().sample(2, 0).unwrap();
        assert!(d.with_pmp(0.5, 0).is_err());
        let mut swapped = 0;
        for seed in 0..200 {
            let n = d.with_pmp(0.45, seed).unwrap();
            match n.corrupted_count() {
                0 => assert_eq!(n.pairing(), d.pairing()),
                2 => {
                    assert_eq!(n.pairing(), &[d.pairing()[1], d.pairing()[0]]);
                    swapped += 1;
                }
                other => panic!("impossible corruption count {other}"),
            }
        }
        // P(both selected) = 0.2025.
        assert!((20..=65).contains(&swapped), "{swapped}");
    }

    #[test]
    fn injection_preserves_image_multiset_and_mask_semantics() {
        let d = world(300, 6, 0.1, 4);
        let n = d.with_pmp(0.4, 8).unwrap();
        assert_eq!(n.images(), d.images());
        let mut p = n.pairing().to_vec();
        p.sort_unstable();
        assert_eq!(p, (0..300).collect::<Vec<_>>());
        for i in 0..n.len() {
            assert_eq!(n.noise_mask()[i], n.image_concept(i) != n.concepts()[i]);
        }
    }

    #[test]
    fn init_distilled_contracts() {
        let d = world(100, 5, 0.1, 1);
        let one = init_distilled(&d, 1, 0, None).unwrap();
        assert_eq!(one.logits.data(), &[1.0]);
        assert_eq!(one.lr(), INITIAL_STUDENT_LR);
        assert!(init_distilled(&d, 11, 0, None).is_err());
        assert_eq!(
            init_distilled(&d, 10, 3, None).unwrap().source,
            init_distilled(&d, 10, 3, None).unwrap().source
        );
        let ten = init_distilled(&d, 10, 3, None).unwrap();
        assert_eq!(ten.logits, Tensor::identity(10).unwrap());
        assert_eq!(ten.diagonal_argmax_fraction(), 1.0);
    }

    #[test]
    fn init_distilled_draws_from_the_clean_pool() {
        let d = world(1000, 10, 0.1, 1);
        let consensus: Vec<usize> = (0..700).map(|i| i + 300).collect();
        let report = SelectionReport::from_sets(consensus.clone(), consensus.clone(), 0.6);
        let dist = init_distilled(&d, 100, 5, Some(&report)).unwrap();
        assert!(dist.source.iter().all(|i| consensus.contains(i)));
        let small = SelectionReport::from_sets(vec![1, 2, 3], vec![1, 2, 3], 0.6);
        assert!(init_distilled(&d, 4, 5, Some(&small)).is_err());
    }

    #[test]
    fn student_lr_is_clamped() {
        let d = world(100, 5, 0.1, 1);
        let mut dist = init_distilled(&d, 2, 0, None).unwrap();
        dist.set_lr(-3.0);
        assert_eq!(dist.lr(), MIN_STUDENT_LR);
    }
}
