//! Clean-pair selection: a global Beta-mixture split of per-pair
//! similarities, a local batch-argmax split, and their intersection.

use mdw_numeric::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::dataset::RealDataset;
use crate::encoders::Model;
use crate::error::{contract, Error, Result};

/// Default posterior threshold of the global partition.
pub const DEFAULT_DELTA: f64 = 0.6;
/// Clipping bound applied after mapping cosine similarities into (0, 1).
pub const SIM_CLIP: f64 = 1e-4;

const CHUNK: usize = 256;
const MIN_VARIANCE: f64 = 1e-10;

/// Cosine similarity of each pair under `model`, in dataset order.
pub fn per_sample_similarities(model: &Model, dataset: &RealDataset) -> Result<Vec<f64>> {
    let n = dataset.len();
    let chunks: Vec<Vec<usize>> = (0..n)
        .collect::<Vec<_>>()
        .chunks(CHUNK)
        .map(|c| c.to_vec())
        .collect();
    let parts: Result<Vec<Vec<f64>>> = chunks
        .par_iter()
        .map(|idx| {
            let (img, txt) = model.embed(&dataset.paired_images(idx)?, &dataset.text_rows(idx)?)?;
            Ok((0..idx.len())
                .map(|r| {
                    img.row_slice(r)
                        .iter()
                        .zip(txt.row_slice(r))
                        .map(|(a, b)| a * b)
                        .sum()
                })
                .collect())
        })
        .collect();
    Ok(parts?.concat())
}

/// Maps a cosine similarity into the open unit interval.
pub fn to_unit_interval(s: f64) -> f64 {
    ((s + 1.0) / 2.0).clamp(SIM_CLIP, 1.0 - SIM_CLIP)
}

/// Sarle's bimodality coefficient; values above 5/9 suggest more than one mode.
pub fn bimodality_coefficient(s: &[f64]) -> f64 {
    let n = s.len() as f64;
    let mean = s.iter().sum::<f64>() / n;
    let m2 = s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m3 = s.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n;
    let m4 = s.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    let skew = m3 / m2.powf(1.5);
    let excess = m4 / (m2 * m2) - 3.0;
    (skew * skew + 1.0) / (excess + 3.0 * (n - 1.0).powi(2) / ((n - 2.0) * (n - 3.0)))
}

fn ln_beta_pdf(x: f64, a: f64, b: f64) -> f64 {
    (a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln() - (ln_gamma(a) + ln_gamma(b) - ln_gamma(a + b))
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Two-component Beta mixture. Component 0 has the higher mean and models
/// clean pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BetaMixture {
    pub weights: [f64; 2],
    pub a: [f64; 2],
    pub b: [f64; 2],
    /// Log-likelihood after each EM iteration.
    pub log_likelihood: Vec<f64>,
}

impl BetaMixture {
    pub fn new(weights: [f64; 2], a: [f64; 2], b: [f64; 2]) -> Result<Self> {
        if weights.iter().any(|&w| !(0.0..=1.0).contains(&w)) || (weights[0] + weights[1] - 1.0).abs() > 1e-9 {
            return contract(format!("mixing weights {weights:?} must form a distribution"));
        }
        if a.iter().chain(&b).any(|&v| !(v > 0.0)) {
            return contract("beta shapes must be positive");
        }
        Ok(Self {
            weights,
            a,
            b,
            log_likelihood: Vec::new(),
        })
    }

    pub fn mean(&self, k: usize) -> f64 {
        self.a[k] / (self.a[k] + self.b[k])
    }

    pub fn ln_density(&self, k: usize, s: f64) -> f64 {
        ln_beta_pdf(s, self.a[k], self.b[k])
    }

    /// Posterior probability that `s` came from the clean component.
    pub fn posterior_clean(&self, s: f64) -> f64 {
        let l0 = self.weights[0].ln() + self.ln_density(0, s);
        let l1 = self.weights[1].ln() + self.ln_density(1, s);
        if l0 == f64::NEG_INFINITY && l1 == f64::NEG_INFINITY {
            return 0.5;
        }
        (l0 - log_sum_exp(l0, l1)).exp()
    }

    pub fn log_likelihood_of(&self, s: &[f64]) -> f64 {
        s.iter()
            .map(|&x| {
                log_sum_exp(
                    self.weights[0].ln() + self.ln_density(0, x),
                    self.weights[1].ln() + self.ln_density(1, x),
                )
            })
            .sum()
    }

    /// Whether the fit effectively has a single component: one dominant
    /// weight, near-equal means, or a mixture density with a single mode.
    pub fn is_collapsed(&self) -> bool {
        self.weights[0].max(self.weights[1]) >= 0.9
            || (self.mean(0) - self.mean(1)).abs() < 0.05
            || self.mixture_is_unimodal()
    }

    /// Whether the mixture density has at most one interior local maximum
    /// on a fine grid.
    pub fn mixture_is_unimodal(&self) -> bool {
        let grid: Vec<f64> = (1..1000)
            .map(|i| {
                let x = i as f64 / 1000.0;
                log_sum_exp(
                    self.weights[0].ln() + self.ln_density(0, x),
                    self.weights[1].ln() + self.ln_density(1, x),
                )
            })
            .collect();
        let peaks = (0..grid.len())
            .filter(|&i| {
                let left = i == 0 || grid[i] > grid[i - 1];
                let right = i + 1 == grid.len() || grid[i] >= grid[i + 1];
                left && right
            })
            .count();
        peaks <= 1
    }
}

pub fn posterior_clean(bmm: &BetaMixture, s: f64) -> f64 {
    bmm.posterior_clean(s)
}

/// Weighted method-of-moments Beta shapes.
fn moment_shapes(s: &[f64], resp: &[f64]) -> Option<(f64, f64)> {
    let w: f64 = resp.iter().sum();
    if w <= 0.0 {
        return None;
    }
    let mean = s.iter().zip(resp).map(|(x, r)| x * r).sum::<f64>() / w;
    let var = s.iter().zip(resp).map(|(x, r)| r * (x - mean).powi(2)).sum::<f64>() / w;
    let var = var.clamp(MIN_VARIANCE, mean * (1.0 - mean) * (1.0 - 1e-6));
    let common = mean * (1.0 - mean) / var - 1.0;
    Some((mean * common, (1.0 - mean) * common))
}

/// Expected complete-data log-likelihood of one component's shapes.
fn component_q(s: &[f64], resp: &[f64], a: f64, b: f64) -> f64 {
    s.iter().zip(resp).map(|(&x, &r)| r * ln_beta_pdf(x, a, b)).sum()
}

/// Fits a two-component Beta mixture to `s ⊂ (0, 1)` by EM.
///
/// The M-step uses weighted moments for the shapes. A moment update that
/// lowers the expected complete-data log-likelihood is backtracked toward
/// the previous shapes, so the log-likelihood never decreases.
pub fn fit_beta_mixture(s: &[f64], max_iter: usize, tol: f64, seed: u64) -> Result<BetaMixture> {
    if s.len() < 10 {
        return contract(format!("need at least 10 similarities, got {}", s.len()));
    }
    if s.iter().any(|&x| !(x > 0.0 && x < 1.0)) {
        return contract("similarities must lie strictly inside (0, 1)");
    }
    let mean = s.iter().sum::<f64>() / s.len() as f64;
    if s.iter().all(|&x| (x - mean).abs() < 1e-12) {
        return Err(Error::Degenerate("all similarities are identical".into()));
    }

    let mut sorted = s.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[sorted.len() / 2];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut resp0: Vec<f64> = s
        .iter()
        .map(|&x| {
            let base: f64 = if x >= median { 1.0 } else { 0.0 };
            (base + rng.random_range(-0.02..0.02)).clamp(0.0, 1.0)
        })
        .collect();

    let mut bmm = BetaMixture {
        weights: [0.5, 0.5],
        a: [1.0, 1.0],
        b: [1.0, 1.0],
        log_likelihood: Vec::new(),
    };
    let mut first = true;
    for _ in 0..max_iter {
        let resp1: Vec<f64> = resp0.iter().map(|r| 1.0 - r).collect();
        let w0 = (resp0.iter().sum::<f64>() / s.len() as f64).clamp(1e-6, 1.0 - 1e-6);
        bmm.weights = [w0, 1.0 - w0];
        for (k, resp) in [&resp0, &resp1].into_iter().enumerate() {
            let Some((a, b)) = moment_shapes(s, resp) else { continue };
            if first {
                bmm.a[k] = a;
                bmm.b[k] = b;
                continue;
            }
            let (a_old, b_old) = (bmm.a[k], bmm.b[k]);
            let q_old = component_q(s, resp, a_old, b_old);
            let mut t = 1.0;
            let (mut a_new, mut b_new) = (a_old, b_old);
            while t > 1e-4 {
                let (ca, cb) = (a_old + t * (a - a_old), b_old + t * (b - b_old));
                if component_q(s, resp, ca, cb) >= q_old {
                    (a_new, b_new) = (ca, cb);
                    break;
                }
                t *= 0.5;
            }
            bmm.a[k] = a_new;
            bmm.b[k] = b_new;
        }
        first = false;

        let ll = bmm.log_likelihood_of(s);
        for (r, &x) in resp0.iter_mut().zip(s) {
            *r = bmm.posterior_clean(x);
        }
        let done = bmm
            .log_likelihood
            .last()
            .is_some_and(|&prev| (ll - prev).abs() < tol);
        bmm.log_likelihood.push(ll);
        if done {
            break;
        }
    }

    if bmm.mean(1) > bmm.mean(0) {
        bmm.weights.swap(0, 1);
        bmm.a.swap(0, 1);
        bmm.b.swap(0, 1);
    }
    if bmm.is_collapsed() {
        log::debug!("beta mixture collapsed to one component: {:?}", bmm.weights);
    }
    Ok(bmm)
}

/// Indices whose clean posterior strictly exceeds `delta`.
pub fn global_partition(posteriors: &[f64], delta: f64) -> Result<Vec<usize>> {
    if !(delta > 0.0 && delta < 1.0) {
        return contract(format!("threshold must lie in (0, 1), got {delta}"));
    }
    Ok(posteriors
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > delta)
        .map(|(i, _)| i)
        .collect())
}

/// Batch positions whose diagonal entry strictly dominates both its row and
/// its column, mapped through `batch` to dataset indices. Ties exclude.
pub fn local_partition(h: &Tensor, batch: &[usize]) -> Result<Vec<usize>> {
    let [r, c] = h.shape();
    if r != c || batch.len() != r {
        return contract(format!("need a square {}x{} matrix, got {r}x{c}", batch.len(), batch.len()));
    }
    Ok((0..r)
        .filter(|&i| {
            let d = h.get(i, i);
            (0..r).all(|j| j == i || (h.get(i, j) < d && h.get(j, i) < d))
        })
        .map(|i| batch[i])
        .collect())
}

/// Sorted intersection of two index sets.
pub fn consensus_select(global: &[usize], local: &[usize]) -> Vec<usize> {
    let mut a = global.to_vec();
    a.sort_unstable();
    a.dedup();
    let mut out: Vec<usize> = local
        .iter()
        .copied()
        .filter(|x| a.binary_search(x).is_ok())
        .collect();
    out.sort_unstable();
    out.dedup();
    if out.is_empty() {
        log::warn!("consensus clean set is empty");
    }
    out
}

/// Precision and recall of `selected` as a clean set against the hidden
/// noise mask.
pub fn selection_quality(selected: &[usize], noise_mask: &[bool]) -> (f64, f64) {
    let clean_total = noise_mask.iter().filter(|&&n| !n).count();
    let hits = selected.iter().filter(|&&i| !noise_mask[i]).count();
    let precision = if selected.is_empty() { 0.0 } else { hits as f64 / selected.len() as f64 };
    let recall = if clean_total == 0 { 0.0 } else { hits as f64 / clean_total as f64 };
    (precision, recall)
}

/// Audit record of one selection round.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    /// Raw cosine similarity per pair.
    pub similarities: Vec<f64>,
    pub posteriors: Vec<f64>,
    pub delta: f64,
    pub global: Vec<usize>,
    pub local: Vec<usize>,
    pub consensus: Vec<usize>,
    pub mixture: Option<BetaMixture>,
}

impl SelectionReport {
    pub fn from_sets(global: Vec<usize>, local: Vec<usize>, delta: f64) -> Self {
        let consensus = consensus_select(&global, &local);
        Self {
            delta,
            global,
            local,
            consensus,
            ..Self::default()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Beta, Distribution};

    fn planted(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hi = Beta::new(8.0, 2.0).unwrap();
        let lo = Beta::new(2.0, 8.0).unwrap();
        (0..n)
            .map(|i| {
                let x: f64 = if i % 2 == 0 { hi.sample(&mut rng) } else { lo.sample(&mut rng) };
                x.clamp(SIM_CLIP, 1.0 - SIM_CLIP)
            })
            .collect()
    }

    #[test]
    fn recovers_planted_mixture() {
        let s = planted(2000, 3);
        let bmm = fit_beta_mixture(&s, 100, 1e-5, 0).unwrap();
        assert!((bmm.mean(0) - 0.8).abs() < 0.05, "{bmm:?}");
        assert!((bmm.mean(1) - 0.2).abs() < 0.05, "{}", bmm.mean(1));
        assert!(bmm.log_likelihood.windows(2).all(|w| w[1] >= w[0] - 1e-9));
        assert!((bmm.weights[0] + bmm.weights[1] - 1.0).abs() < 1e-12);
        assert!(bmm.posterior_clean(0.999) > 0.99);
        assert!(!bmm.is_collapsed());
    }

    #[test]
    fn single_component_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let beta = Beta::new(5.0, 5.0).unwrap();
        let s: Vec<f64> = (0..2000).map(|_| beta.sample(&mut rng)).collect();
        let bmm = fit_beta_mixture(&s, 100, 1e-5, 0).unwrap();
        assert!(bmm.is_collapsed(), "{bmm:?}");
        assert!(bmm.mixture_is_unimodal());
        assert!(bmm.log_likelihood.windows(2).all(|w| w[1] >= w[0] - 1e-9));
    }

    #[test]
    fn degenerate_and_contract_errors() {
        assert!(matches!(fit_beta_mixture(&[0.5; 20], 10, 1e-5, 0), Err(Error::Degenerate(_))));
        assert!(matches!(fit_beta_mixture(&[0.5; 5], 10, 1e-5, 0), Err(Error::Contract(_))));
        let mut s = vec![0.3; 20];
        s[0] = 1.0;
        assert!(fit_beta_mixture(&s, 10, 1e-5, 0).is_err());
    }

    #[test]
    fn posterior_examples() {
        let sym = BetaMixture::new([0.5, 0.5], [8.0, 2.0], [2.0, 8.0]).unwrap();
        assert!((sym.posterior_clean(0.5) - 0.5).abs() < 0.05);
        let equal = BetaMixture::new([0.9, 0.1], [3.0, 3.0], [4.0, 4.0]).unwrap();
        assert!((posterior_clean(&equal, 0.37) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn posterior_crossing_matches_root_of_density_difference() {
        // Oracle: bisection on the density difference of the two components.
        let bmm = BetaMixture::new([0.5, 0.5], [6.0, 2.0], [2.0, 3.0]).unwrap();
        let diff = |x: f64| bmm.ln_density(0, x) - bmm.ln_density(1, x);
        let (mut lo, mut hi) = (0.05, 0.95);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if diff(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((bmm.posterior_clean(lo) - 0.5).abs() < 0.05);
    }

    #[test]
    fn global_partition_examples() {
        assert_eq!(global_partition(&[1.0; 4], 0.6).unwrap(), vec![0, 1, 2, 3]);
        assert!(global_partition(&[0.0; 4], 0.6).unwrap().is_empty());
        assert_eq!(global_partition(&[0.59, 0.6, 0.61], 0.6).unwrap(), vec![2]);
        assert!(global_partition(&[0.5], 1.0).is_err());
    }

    #[test]
    fn local_partition_examples() {
        let eye = Tensor::identity(4).unwrap();
        assert_eq!(local_partition(&eye, &[0, 1, 2, 3]).unwrap(), vec![0, 1, 2, 3]);
        let swapped = Tensor::from_fn([4, 4], |i, j| {
            let src = match i {
                0 => 1,
                1 => 0,
                k => k,
            };
            eye.get(src, j)
        })
        .unwrap();
        assert_eq!(local_partition(&swapped, &[10, 11, 12, 13]).unwrap(), vec![12, 13]);
        let mut tie = eye.to_vec();
        tie[1] = 1.0;
        let tie = Tensor::new([4, 4], tie).unwrap();
        assert!(!local_partition(&tie, &[0, 1, 2, 3]).unwrap().contains(&0));
    }

    #[test]
    fn consensus_examples() {
        assert_eq!(consensus_select(&[1, 2, 3], &[2, 3, 4]), vec![2, 3]);
        assert!(consensus_select(&[1, 2], &[3, 4]).is_empty());
        assert_eq!(consensus_select(&[5, 1, 3], &[3, 5, 1]), vec![1, 3, 5]);
    }

    #[test]
    fn report_json_round_trip() {
        let mut r = SelectionReport::from_sets(vec![1, 2, 3], vec![2, 3, 4], 0.6);
        r.similarities = vec![0.1, -0.3];
        r.mixture = Some(BetaMixture::new([0.4, 0.6], [2.0, 1.0], [1.0, 2.0]).unwrap());
        let back = SelectionReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.consensus, vec![2, 3]);
    }

    #[test]
    fn quality_counts() {
        let mask = [false, true, false, false];
        assert_eq!(selection_quality(&[0, 1], &mask), (0.5, 1.0 / 3.0));
    }

    #[test]
    fn bimodality_separates_shapes() {
        let s = planted(2000, 5);
        assert!(bimodality_coefficient(&s) > 5.0 / 9.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let beta = Beta::new(5.0, 5.0).unwrap();
        let u: Vec<f64> = (0..2000).map(|_| beta.sample(&mut rng)).collect();
        assert!(bimodality_coefficient(&u) < 5.0 / 9.0);
    }
}
