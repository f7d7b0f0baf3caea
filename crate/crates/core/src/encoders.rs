//! Image encoders and the frozen text head that share one embedding space.

use std::fmt::Debug;
use std::sync::Arc;

use mdw_numeric::{Graph, Tensor, Var, PAD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{contract, Result};

/// Default temperature of the matching softmax.
pub const DEFAULT_TAU: f64 = 0.07;
/// Default shared embedding width.
pub const DEFAULT_EMBED_DIM: usize = 32;

/// Output of an image encoder forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ImageForward {
    /// `B × d_e`, unit rows.
    pub embeddings: Var,
    /// Last convolutional feature maps as `(B·H'·W') × C_f`, pixel-major,
    /// when the architecture has any.
    pub features: Option<Var>,
}

/// A trainable image encoder whose parameters live outside it.
pub trait ImageEncoder: Send + Sync + Debug {
    fn name(&self) -> String;
    fn image_shape(&self) -> [usize; 3];
    fn embed_dim(&self) -> usize;
    /// `[C_f, H', W']` of the exposed feature maps.
    fn feature_grid(&self) -> Option<[usize; 3]>;
    fn param_shapes(&self) -> Vec<[usize; 2]>;
    fn init_params(&self, seed: u64) -> Vec<Tensor>;
    /// Encodes a `B × (C·H·W)` batch.
    fn forward(&self, g: &Graph, params: &[Var], images: Var) -> Result<ImageForward>;
}

fn he_uniform(rng: &mut ChaCha8Rng, shape: [usize; 2], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_, _| rng.random_range(-bound..bound)).expect("positive shape")
}

fn check_batch(g: &Graph, images: Var, shape: [usize; 3], params: &[Var], expected: usize) -> Result<usize> {
    let [b, d] = g.shape(images);
    let [c, h, w] = shape;
    if d != c * h * w {
        return contract(format!(
            "image batch has {d} values per row, expected {c}x{h}x{w}"
        ));
    }
    if params.len() != expected {
        return contract(format!("expected {expected} parameter blocks, got {}", params.len()));
    }
    Ok(b)
}

/// im2col index for a 3×3, stride-1, zero-padded convolution.
///
/// `channel_major` inputs are `B × (C·H·W)`; otherwise `(B·H·W) × C`.
fn im2col_index(b: usize, c: usize, h: usize, w: usize, channel_major: bool) -> Vec<u32> {
    let hw = h * w;
    let mut idx = Vec::with_capacity(b * hw * c * 9);
    for n in 0..b {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (yy, xx) = (y + ky, x + kx);
                            if yy < 1 || xx < 1 || yy > h || xx > w {
                                idx.push(PAD);
                                continue;
                            }
                            let p = (yy - 1) * w + (xx - 1);
                            let flat = if channel_major {
                                n * c * hw + ch * hw + p
                            } else {
                                (n * hw + p) * c + ch
                            };
                            idx.push(flat as u32);
                        }
                    }
                }
            }
        }
    }
    idx
}

/// Stacked 3×3 same-padding convolutions with relu, global average pooling
/// and a linear projection. Pixels are centered around zero on entry.
#[derive(Clone, Debug)]
pub struct ConvEncoder {
    image_shape: [usize; 3],
    widths: Vec<usize>,
    embed_dim: usize,
}

impl ConvEncoder {
    pub fn new(image_shape: [usize; 3], widths: Vec<usize>, embed_dim: usize) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) || embed_dim == 0 || image_shape.contains(&0) {
            return contract("conv encoder needs non-empty positive widths and shapes");
        }
        Ok(Self {
            image_shape,
            widths,
            embed_dim,
        })
    }

    /// Two layers of width 8.
    pub fn standard(image_shape: [usize; 3]) -> Self {
        Self::new(image_shape, vec![8, 8], DEFAULT_EMBED_DIM).expect("valid defaults")
    }

    /// Three layers of width 8.
    pub fn deep(image_shape: [usize; 3]) -> Self {
        Self::new(image_shape, vec![8, 8, 8], DEFAULT_EMBED_DIM).expect("valid defaults")
    }

    fn in_channels(&self, layer: usize) -> usize {
        if layer == 0 {
            self.image_shape[0]
        } else {
            self.widths[layer - 1]
        }
    }
}

impl ImageEncoder for ConvEncoder {
    fn name(&self) -> String {
        format!("conv{:?}", self.widths)
    }

    fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn feature_grid(&self) -> Option<[usize; 3]> {
        let [_, h, w] = self.image_shape;
        Some([*self.widths.last().expect("non-empty"), h, w])
    }

    fn param_shapes(&self) -> Vec<[usize; 2]> {
        let mut shapes = Vec::new();
        for (l, &out) in self.widths.iter().enumerate() {
            shapes.push([self.in_channels(l) * 9, out]);
            shapes.push([1, out]);
        }
        shapes.push([*self.widths.last().expect("non-empty"), self.embed_dim]);
        shapes.push([1, self.embed_dim]);
        shapes
    }

    fn init_params(&self, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.param_shapes()
            .into_iter()
            .map(|s| {
                if s[0] == 1 {
                    Tensor::zeros(s).expect("positive shape")
                } else {
                    he_uniform(&mut rng, s, s[0])
                }
            })
            .collect()
    }

    fn forward(&self, g: &Graph, params: &[Var], images: Var) -> Result<ImageForward> {
        let b = check_batch(g, images, self.image_shape, params, self.param_shapes().len())?;
        let [_, h, w] = self.image_shape;
        let hw = h * w;
        let mut x = g.add_scalar(images, -0.5)?;
        for l in 0..self.widths.len() {
            let cin = self.in_channels(l);
            let idx = Arc::new(im2col_index(b, cin, h, w, l == 0));
            let cols = g.gather(x, idx, [b * hw, cin * 9])?;
            let z = g.add(g.matmul(cols, params[2 * l])?, params[2 * l + 1])?;
            x = g.relu(z)?;
        }
        let features = x;
        let cf = *self.widths.last().expect("non-empty");
        let flat = g.reshape(features, [b, hw * cf])?;
        let pool = Tensor::from_fn([hw * cf, cf], |r, c| {
            if r % cf == c {
                1.0 / hw as f64
            } else {
                0.0
            }
        })?;
        let pooled = g.matmul(flat, g.constant(pool))?;
        let k = 2 * self.widths.len();
        let proj = g.add(g.matmul(pooled, params[k])?, params[k + 1])?;
        Ok(ImageForward {
            embeddings: g.l2_normalize_rows(proj)?,
            features: Some(features),
        })
    }
}

/// Single linear map from raw pixels; has no feature maps.
#[derive(Clone, Debug)]
pub struct LinearEncoder {
    image_shape: [usize; 3],
    embed_dim: usize,
}

impl LinearEncoder {
    pub fn new(image_shape: [usize; 3], embed_dim: usize) -> Self {
        Self {
            image_shape,
            embed_dim,
        }
    }
}

impl ImageEncoder for LinearEncoder {
    fn name(&self) -> String {
        "linear".into()
    }

    fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn feature_grid(&self) -> Option<[usize; 3]> {
        None
    }

    fn param_shapes(&self) -> Vec<[usize; 2]> {
        let [c, h, w] = self.image_shape;
        vec![[c * h * w, self.embed_dim], [1, self.embed_dim]]
    }

    fn init_params(&self, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shapes = self.param_shapes();
        vec![
            he_uniform(&mut rng, shapes[0], shapes[0][0]),
            Tensor::zeros(shapes[1]).expect("positive shape"),
        ]
    }

    fn forward(&self, g: &Graph, params: &[Var], images: Var) -> Result<ImageForward> {
        check_batch(g, images, self.image_shape, params, 2)?;
        let z = g.add(g.matmul(images, params[0])?, params[1])?;
        Ok(ImageForward {
            embeddings: g.l2_normalize_rows(z)?,
            features: None,
        })
    }
}

/// Image encoder architecture, a frozen text head and the temperature.
#[derive(Clone, Debug)]
pub struct EncoderPair {
    pub image: Arc<dyn ImageEncoder>,
    /// `d_t × d_e`; never trained.
    pub text_head: Tensor,
    pub tau: f64,
}

impl EncoderPair {
    pub fn new(image: Arc<dyn ImageEncoder>, text_dim: usize, head_seed: u64, tau: f64) -> Result<Self> {
        if text_dim == 0 {
            return contract("text dimension must be positive");
        }
        if !(tau > 0.0) {
            return contract(format!("temperature must be positive, got {tau}"));
        }
        let d_e = image.embed_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(head_seed);
        let normal = Normal::new(0.0, 1.0 / (text_dim as f64).sqrt()).expect("valid std");
        let text_head = Tensor::from_fn([text_dim, d_e], |_, _| normal.sample(&mut rng))?;
        Ok(Self {
            image,
            text_head,
            tau,
        })
    }

    pub fn text_dim(&self) -> usize {
        self.text_head.rows()
    }

    pub fn encode_image(&self, g: &Graph, params: &[Var], images: Var) -> Result<ImageForward> {
        let [c, h, w] = self.image.image_shape();
        if g.shape(images)[1] != c * h * w {
            return contract(format!(
                "expected {c}x{h}x{w} images, got {} values per row",
                g.shape(images)[1]
            ));
        }
        self.image.forward(g, params, images)
    }

    pub fn encode_text(&self, g: &Graph, texts: Var) -> Result<Var> {
        if g.shape(texts)[1] != self.text_dim() {
            return contract(format!(
                "expected text dim {}, got {}",
                self.text_dim(),
                g.shape(texts)[1]
            ));
        }
        let head = g.constant(self.text_head.clone());
        Ok(g.l2_normalize_rows(g.matmul(texts, head)?)?)
    }
}

/// Cosine similarity matrix `img · txtᵀ` of unit-row embeddings.
pub fn similarity_matrix(g: &Graph, img: Var, txt: Var) -> Result<Var> {
    if g.shape(img)[1] != g.shape(txt)[1] {
        return contract(format!(
            "embedding widths differ: {:?} vs {:?}",
            g.shape(img),
            g.shape(txt)
        ));
    }
    Ok(g.matmul(img, g.transpose(txt)?)?)
}

/// An encoder pair together with trained image parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub pair: EncoderPair,
    pub params: Vec<Tensor>,
}

impl Model {
    pub fn new(pair: EncoderPair, params: Vec<Tensor>) -> Result<Self> {
        let shapes = pair.image.param_shapes();
        if shapes.len() != params.len() || shapes.iter().zip(&params).any(|(s, p)| *s != p.shape()) {
            return contract("parameter blocks do not match the encoder architecture");
        }
        Ok(Self { pair, params })
    }

    pub fn init(pair: EncoderPair, seed: u64) -> Self {
        let params = pair.image.init_params(seed);
        Self { pair, params }
    }

    /// Unit-row image and text embeddings as plain tensors.
    pub fn embed(&self, images: &Tensor, texts: &Tensor) -> Result<(Tensor, Tensor)> {
        let g = Graph::new();
        let params: Vec<Var> = self.params.iter().map(|p| g.constant(p.clone())).collect();
        let img = self.pair.encode_image(&g, &params, g.constant(images.clone()))?;
        let txt = self.pair.encode_text(&g, g.constant(texts.clone()))?;
        Ok((g.value(img.embeddings), g.value(txt)))
    }
}

/// Flattens parameter blocks into one vector.
pub fn flatten(params: &[Tensor]) -> Vec<f64> {
    params.iter().flat_map(|p| p.data().iter().copied()).collect()
}

/// Splits a flat vector back into blocks of the given shapes.
pub fn unflatten(flat: &[f64], shapes: &[[usize; 2]]) -> Result<Vec<Tensor>> {
    let total: usize = shapes.iter().map(|s| s[0] * s[1]).sum();
    if total != flat.len() {
        return contract(format!("flat vector of {} for {total} parameters", flat.len()));
    }
    let mut off = 0;
    shapes
        .iter()
        .map(|&s| {
            let n = s[0] * s[1];
            let t = Tensor::new(s, flat[off..off + n].to_vec());
            off += n;
            Ok(t?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair() -> EncoderPair {
        EncoderPair::new(Arc::new(ConvEncoder::standard([3, 8, 8])), 16, 5, DEFAULT_TAU).unwrap()
    }

    fn images(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([n, 3 * 64], |_, _| rng.random_range(0.0..1.0)).unwrap()
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let enc = ConvEncoder::new([2, 4, 5], vec![3], 4).unwrap();
        let params = enc.init_params(1);
        let x = Tensor::new([2, 40], images(2, 3).data()[..80].to_vec()).unwrap();
        let g = Graph::new();
        let p: Vec<Var> = params.iter().map(|t| g.constant(t.clone())).collect();
        let out = enc.forward(&g, &p, g.constant(x.clone())).unwrap();
        let f = g.value(out.features.unwrap());
        let (wt, bias) = (&params[0], &params[1]);
        for n in 0..2 {
            for y in 0..4 {
                for xx in 0..5 {
                    for co in 0..3 {
                        let mut acc = bias.get(0, co);
                        for ci in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                    if sy < 0 || sx < 0 || sy >= 4 || sx >= 5 {
                                        continue;
                                    }
                                    let v = x.get(n, ci * 20 + sy as usize * 5 + sx as usize) - 0.5;
                                    acc += v * wt.get(ci * 9 + ky * 3 + kx, co);
                                }
                            }
                        }
                        let got = f.get(n * 20 + y * 5 + xx, co);
                        assert!((got - acc.max(0.0)).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn embeddings_are_unit_and_deterministic() {
        let p = pair();
        let m = Model::init(p, 3);
        let mut x = images(3, 1).to_vec();
        let row = x[..192].to_vec();
        x[192..384].copy_from_slice(&row);
        let x = Tensor::new([3, 192], x).unwrap();
        let t = Tensor::from_fn([3, 16], |i, j| ((i + 1) * (j + 2)) as f64 % 5.0 - 2.0).unwrap();
        let (ie, te) = m.embed(&x, &t).unwrap();
        for i in 0..3 {
            let n: f64 = ie.row_slice(i).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-9);
            let n: f64 = te.row_slice(i).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-9);
        }
        assert_eq!(ie.row_slice(0), ie.row_slice(1));
        let (ie2, _) = m.embed(&x, &t).unwrap();
        assert!(ie.bit_eq(&ie2));
    }

    #[test]
    fn zero_weights_give_constant_embedding() {
        let p = pair();
        let mut params: Vec<Tensor> = p
            .image
            .param_shapes()
            .into_iter()
            .map(|s| Tensor::zeros(s).unwrap())
            .collect();
        let last = params.len() - 1;
        params[last] = Tensor::full(params[last].shape(), 0.5).unwrap();
        let m = Model::new(p, params).unwrap();
        let (ie, _) = m.embed(&images(4, 2), &Tensor::ones([4, 16]).unwrap()).unwrap();
        for i in 1..4 {
            assert_eq!(ie.row_slice(i), ie.row_slice(0));
        }
    }

    #[test]
    fn wrong_channel_count_is_rejected() {
        let p = pair();
        let g = Graph::new();
        let params: Vec<Var> = p.image.init_params(0).into_iter().map(|t| g.param(t)).collect();
        let bad = g.constant(Tensor::ones([2, 2 * 64]).unwrap());
        assert!(matches!(p.encode_image(&g, &params, bad), Err(crate::Error::Contract(_))));
        let bad_txt = g.constant(Tensor::ones([2, 7]).unwrap());
        assert!(p.encode_text(&g, bad_txt).is_err());
    }

    #[test]
    fn similarity_examples() {
        let g = Graph::new();
        let e = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let h = similarity_matrix(&g, e, e).unwrap();
        assert_eq!(g.value(h), Tensor::identity(2).unwrap());
        let m = Model::init(pair(), 9);
        let (ie, _) = m.embed(&images(5, 4), &Tensor::ones([5, 16]).unwrap()).unwrap();
        let v = g.constant(ie);
        let h = g.value(similarity_matrix(&g, v, v).unwrap());
        for i in 0..5 {
            assert!((h.get(i, i) - 1.0).abs() < 1e-12);
        }
        assert!(h.data().iter().all(|x| x.abs() <= 1.0 + 1e-9));
        let bad = g.constant(Tensor::ones([2, 3]).unwrap());
        assert!(similarity_matrix(&g, e, bad).is_err());
    }

    #[test]
    fn text_head_is_never_a_gradient_target() {
        let p = pair();
        let g = Graph::new();
        let params: Vec<Var> = p.image.init_params(0).into_iter().map(|t| g.param(t)).collect();
        let img = p.encode_image(&g, &params, g.constant(images(3, 5))).unwrap();
        let txt = p.encode_text(&g, g.constant(Tensor::ones([3, 16]).unwrap())).unwrap();
        let h = similarity_matrix(&g, img.embeddings, txt).unwrap();
        assert!(!g.requires_grad(txt));
        assert!(g.requires_grad(h));
    }

    #[test]
    fn flatten_round_trip() {
        let enc = ConvEncoder::deep([3, 8, 8]);
        let params = enc.init_params(4);
        let back = unflatten(&flatten(&params), &enc.param_shapes()).unwrap();
        assert_eq!(back, params);
        assert!(unflatten(&[1.0], &enc.param_shapes()).is_err());
    }
}
