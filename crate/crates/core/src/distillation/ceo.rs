//! Grad-CAM guided per-pixel weighting of distilled image updates.

use mdw_numeric::{Graph, Tensor, Var};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::{similarity_matrix, EncoderPair};
use crate::error::{contract, Result};

/// Largest exponent allowed when forming a weight.
const MAX_EXPONENT: f64 = 700.0;

/// Which expert snapshot of the sampled segment drives the activation maps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CamSnapshot {
    #[default]
    Start,
    Target,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CeoConfig {
    pub enabled: bool,
    /// Refresh interval in distillation steps.
    pub refresh_every: usize,
    pub top_k: usize,
    pub beta: f64,
    /// EMA decay; the share of the old weights kept at each refresh.
    pub rho: f64,
    /// Scale each aggregated map to a unit maximum before weighting.
    pub normalize_map: bool,
    pub cam_at: CamSnapshot,
}

impl Default for CeoConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            refresh_every: 10,
            top_k: 3,
            beta: 1.0,
            rho: 0.9,
            normalize_map: true,
            cam_at: CamSnapshot::Start,
        }
    }
}

impl CeoConfig {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.refresh_every == 0 || self.top_k == 0 {
            return contract("refresh interval and top-k must be positive");
        }
        if !(self.beta > 0.0) {
            return contract(format!("sharpness must be positive, got {}", self.beta));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return contract(format!("EMA decay must lie in [0, 1], got {}", self.rho));
        }
        Ok(())
    }
}

/// Channel weights and the resulting activation map of one image-text pair.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCam {
    pub alpha: Vec<f64>,
    /// `H' × W'`, nonnegative.
    pub map: Tensor,
}

/// Grad-CAM for each image `i` against text `texts_for[i]`.
///
/// The feature maps of image `i` only influence row `i` of the similarity
/// matrix, so one backward pass of `Σ_i H[i, texts_for[i]]` yields every
/// per-image gradient at once.
pub fn gradcam_maps(
    pair: &EncoderPair,
    params: &[Tensor],
    images: &Tensor,
    texts: &Tensor,
    texts_for: &[usize],
) -> Result<Vec<GradCam>> {
    let Some([cf, hf, wf]) = pair.image.feature_grid() else {
        return contract(format!("encoder {} exposes no feature maps", pair.image.name()));
    };
    let b = images.rows();
    if texts_for.len() != b || texts_for.iter().any(|&j| j >= texts.rows()) {
        return contract("text choice per image out of range");
    }
    let g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let img = pair.encode_image(&g, &vars, g.param(images.clone()))?;
    let features = img
        .features
        .ok_or_else(|| crate::Error::Contract("encoder returned no feature maps".into()))?;
    let txt = pair.encode_text(&g, g.constant(texts.clone()))?;
    let h = similarity_matrix(&g, img.embeddings, txt)?;
    let pick = Tensor::from_fn([b, texts.rows()], |i, j| if texts_for[i] == j { 1.0 } else { 0.0 })?;
    let score = g.sum(g.mul(h, g.constant(pick))?)?;
    let grad = g.grads(score, &[features])?.remove(0);
    let feats = g.value(features);
    let hw = hf * wf;
    Ok((0..b)
        .map(|i| {
            let rows = i * hw..(i + 1) * hw;
            let mut alpha = vec![0.0; cf];
            for r in rows.clone() {
                for (a, v) in alpha.iter_mut().zip(grad.row_slice(r)) {
                    *a += v;
                }
            }
            alpha.iter_mut().for_each(|a| *a /= hw as f64);
            let map: Vec<f64> = rows
                .map(|r| {
                    let s: f64 = feats.row_slice(r).iter().zip(&alpha).map(|(f, a)| f * a).sum();
                    s.max(0.0)
                })
                .collect();
            GradCam {
                alpha,
                map: Tensor::new([hf, wf], map).expect("grid-sized map"),
            }
        })
        .collect())
}

/// Grad-CAM of distilled image `i` against distilled text `j`.
pub fn gradcam_map(
    pair: &EncoderPair,
    params: &[Tensor],
    images: &Tensor,
    texts: &Tensor,
    i: usize,
    j: usize,
) -> Result<GradCam> {
    if i >= images.rows() {
        return contract(format!("image index {i} out of range"));
    }
    let one = Tensor::row(images.row_slice(i).to_vec())?;
    Ok(gradcam_maps(pair, params, &one, texts, &[j])?.remove(0))
}

/// Column indices of the `k` largest entries of `row`, ties to the lower index.
pub fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Per-image mean Grad-CAM map over the top-k texts of each logit row.
pub fn aggregate_maps(
    pair: &EncoderPair,
    params: &[Tensor],
    images: &Tensor,
    texts: &Tensor,
    logits: &Tensor,
    top_k: usize,
) -> Result<Vec<Tensor>> {
    let m = images.rows();
    if top_k == 0 || top_k > texts.rows() || logits.shape() != [m, texts.rows()] {
        return contract(format!("top-k {top_k} invalid for {m} distilled pairs"));
    }
    let choices: Vec<Vec<usize>> = (0..m).map(|i| top_k_indices(logits.row_slice(i), top_k)).collect();
    let per_rank = (0..top_k)
        .into_par_iter()
        .map(|r| {
            let cols: Vec<usize> = choices.iter().map(|c| c[r]).collect();
            gradcam_maps(pair, params, images, texts, &cols)
        })
        .collect::<Result<Vec<_>>>()?;
    (0..m)
        .map(|i| {
            let mut acc = per_rank[0][i].map.clone();
            for rank in &per_rank[1..] {
                acc = acc.zip_map(&rank[i].map, |a, b| a + b)?;
            }
            Ok(acc.map(|v| v / top_k as f64))
        })
        .collect()
}

/// Fresh weights `1 + 𝟙[M > μ]·exp(β(M − μ))` for one activation map.
pub fn fresh_weights(map: &Tensor, beta: f64) -> Tensor {
    let mu = map.sum() / map.len() as f64;
    map.map(|v| {
        if v > mu {
            1.0 + (beta * (v - mu)).min(MAX_EXPONENT).exp()
        } else {
            1.0
        }
    })
}

/// Scales a map to unit maximum; all-zero maps are returned unchanged.
pub fn normalize_map(map: &Tensor) -> Tensor {
    let max = map.data().iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        map.map(|v| v / max)
    } else {
        map.clone()
    }
}

/// Per-image weight maps, all entries `≥ 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct CeoState {
    pub config: CeoConfig,
    pub weights: Vec<Tensor>,
    pub refreshes: usize,
}

impl CeoState {
    pub fn new(m: usize, grid: [usize; 2], config: CeoConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            weights: (0..m).map(|_| Tensor::ones(grid)).collect::<std::result::Result<_, _>>()?,
            config,
            refreshes: 0,
        })
    }

    /// Whether a refresh is due before step `step`.
    pub fn due(&self, step: usize) -> bool {
        self.config.enabled && step % self.config.refresh_every == 0
    }

    /// EMA update of image `i`'s weights from its aggregated map.
    pub fn refresh_weights(&mut self, i: usize, map: &Tensor) -> Result<()> {
        let old = &self.weights[i];
        if old.shape() != map.shape() {
            return contract(format!("map {:?} for weights {:?}", map.shape(), old.shape()));
        }
        let fresh = fresh_weights(map, self.config.beta);
        let rho = self.config.rho;
        self.weights[i] = old.zip_map(&fresh, |a, b| (rho * a + (1.0 - rho) * b).max(1.0))?;
        Ok(())
    }

    /// Recomputes every image's map with the given expert parameters.
    pub fn refresh(
        &mut self,
        pair: &EncoderPair,
        params: &[Tensor],
        images: &Tensor,
        texts: &Tensor,
        logits: &Tensor,
    ) -> Result<Vec<Tensor>> {
        let maps = aggregate_maps(pair, params, images, texts, logits, self.config.top_k.min(texts.rows()))?;
        for (i, m) in maps.iter().enumerate() {
            let m = if self.config.normalize_map { normalize_map(m) } else { m.clone() };
            self.refresh_weights(i, &m)?;
        }
        self.refreshes += 1;
        Ok(maps)
    }

    /// Multiplies a `M × (C·H·W)` image gradient by each image's weights,
    /// broadcast over channels.
    pub fn weight_gradient(&self, grad: &Tensor) -> Result<Tensor> {
        let hw = self.weights.first().map_or(1, |w| w.len());
        if grad.rows() != self.weights.len() || grad.cols() % hw != 0 {
            return contract(format!(
                "gradient {:?} does not match {} weight maps of {hw} pixels",
                grad.shape(),
                self.weights.len()
            ));
        }
        Ok(Tensor::from_fn(grad.shape(), |i, c| {
            grad.get(i, c) * self.weights[i].data()[c % hw]
        })?)
    }

    pub fn min_weight(&self) -> f64 {
        self.weights
            .iter()
            .flat_map(|w| w.data().iter().copied())
            .fold(f64::INFINITY, f64::min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{ConvEncoder, DEFAULT_TAU};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn toy() -> (EncoderPair, Vec<Tensor>, Tensor, Tensor) {
        let pair = EncoderPair::new(
            Arc::new(ConvEncoder::new([1, 4, 4], vec![2], 3).unwrap()),
            4,
            5,
            DEFAULT_TAU,
        )
        .unwrap();
        let mut params = pair.image.init_params(2);
        // Nonzero biases keep both channels active.
        params[1] = Tensor::row(vec![0.3, 0.2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let images = Tensor::from_fn([3, 16], |_, _| rng.random_range(0.0..1.0)).unwrap();
        let texts = Tensor::from_fn([3, 4], |_, _| rng.random_range(-1.0..1.0)).unwrap();
        (pair, params, images, texts)
    }

    // Re-evaluates the similarity of image 0 and text `j` from given feature
    // maps, following the encoder head outside the graph.
    fn similarity_from_features(pair: &EncoderPair, params: &[Tensor], feats: &Tensor, text: &[f64]) -> f64 {
        let cf = feats.cols();
        let hw = feats.rows() as f64;
        let pooled: Vec<f64> = (0..cf).map(|k| (0..feats.rows()).map(|r| feats.get(r, k)).sum::<f64>() / hw).collect();
        let proj = &params[2];
        let bias = &params[3];
        let e: Vec<f64> = (0..proj.cols())
            .map(|d| bias.get(0, d) + (0..cf).map(|k| pooled[k] * proj.get(k, d)).sum::<f64>())
            .collect();
        let head = &pair.text_head;
        let t: Vec<f64> = (0..head.cols())
            .map(|d| (0..head.rows()).map(|r| text[r] * head.get(r, d)).sum())
            .collect();
        let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let dot: f64 = e.iter().zip(&t).map(|(a, b)| a * b).sum();
        dot / (n(&e) * n(&t))
    }

    #[test]
    fn channel_weights_match_finite_differences() {
        let (pair, params, images, texts) = toy();
        let cam = gradcam_map(&pair, &params, &images, &texts, 0, 1).unwrap();
        let g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
        let one = Tensor::row(images.row_slice(0).to_vec()).unwrap();
        let feats = g.value(pair.encode_image(&g, &vars, g.constant(one)).unwrap().features.unwrap());
        let text = texts.row_slice(1);
        let eps = 1e-6;
        for k in 0..2 {
            let mut fd = 0.0;
            for r in 0..feats.rows() {
                let bump = |d: f64| {
                    let f = Tensor::from_fn(feats.shape(), |rr, kk| {
                        feats.get(rr, kk) + if rr == r && kk == k { d } else { 0.0 }
                    })
                    .unwrap();
                    similarity_from_features(&pair, &params, &f, text)
                };
                fd += (bump(eps) - bump(-eps)) / (2.0 * eps);
            }
            fd /= feats.rows() as f64;
            let a = cam.alpha[k];
            assert!((a - fd).abs() <= 1e-4 * a.abs().max(fd.abs()).max(1e-8), "channel {k}: {a} vs {fd}");
        }
        assert!(cam.map.data().iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn dead_channel_contributes_nothing() {
        let (pair, mut params, images, texts) = toy();
        // Zero the projection row of channel 1: its gradient vanishes.
        params[2] = Tensor::from_fn(params[2].shape(), |r, c| if r == 1 { 0.0 } else { params[2].get(r, c) }).unwrap();
        let cam = gradcam_map(&pair, &params, &images, &texts, 2, 0).unwrap();
        assert_eq!(cam.alpha[1], 0.0);
    }

    #[test]
    fn aggregation_cases() {
        let (pair, params, images, texts) = toy();
        let id = Tensor::identity(3).unwrap();
        let agg = aggregate_maps(&pair, &params, &images, &texts, &id, 1).unwrap();
        for i in 0..3 {
            let own = gradcam_map(&pair, &params, &images, &texts, i, i).unwrap();
            assert!(agg[i].max_abs_diff(&own.map) < 1e-12);
        }
        let all = aggregate_maps(&pair, &params, &images, &texts, &id, 3).unwrap();
        for i in 0..3 {
            let mut brute = Tensor::zeros([4, 4]).unwrap();
            for j in 0..3 {
                let m = gradcam_map(&pair, &params, &images, &texts, i, j).unwrap().map;
                brute = brute.zip_map(&m, |a, b| a + b / 3.0).unwrap();
            }
            assert!(all[i].max_abs_diff(&brute) < 1e-12);
        }
        assert_eq!(top_k_indices(&[1.0, 2.0, 2.0, 0.0], 2), vec![1, 2]);
    }

    #[test]
    fn weight_rule_cases() {
        let flat = Tensor::full([2, 2], 0.7).unwrap();
        assert!(fresh_weights(&flat, 1.0).data().iter().all(|&v| v == 1.0));
        // Mean 0, one pixel at ln 2 above the mean.
        let l = std::f64::consts::LN_2;
        let m = Tensor::new([1, 4], vec![l, -l / 3.0, -l / 3.0, -l / 3.0]).unwrap();
        let w = fresh_weights(&m, 1.0);
        assert!((w.get(0, 0) - 3.0).abs() < 1e-12);
        assert_eq!(w.get(0, 1), 1.0);

        let cfg = |rho| CeoConfig { rho, ..CeoConfig::default() };
        let mut s = CeoState::new(1, [1, 4], cfg(0.0)).unwrap();
        s.refresh_weights(0, &m).unwrap();
        assert_eq!(s.weights[0], w);
        let mut s = CeoState::new(1, [1, 4], cfg(1.0)).unwrap();
        s.refresh_weights(0, &m).unwrap();
        assert!(s.weights[0].data().iter().all(|&v| v == 1.0));
        let huge = Tensor::new([1, 2], vec![1e6, -1e6]).unwrap();
        let mut s = CeoState::new(1, [1, 2], cfg(0.5)).unwrap();
        s.refresh_weights(0, &huge).unwrap();
        assert!(s.weights[0].is_finite() && s.min_weight() >= 1.0);
    }

    #[test]
    fn gradient_weighting_broadcasts_over_channels() {
        let mut s = CeoState::new(2, [1, 2], CeoConfig::default()).unwrap();
        s.weights[1] = Tensor::row(vec![2.0, 3.0]).unwrap();
        let g = Tensor::ones([2, 4]).unwrap();
        let w = s.weight_gradient(&g).unwrap();
        assert_eq!(w.row_slice(0), &[1.0; 4]);
        assert_eq!(w.row_slice(1), &[2.0, 3.0, 2.0, 3.0]);
        assert!(s.weight_gradient(&Tensor::ones([3, 4]).unwrap()).is_err());
    }
}
