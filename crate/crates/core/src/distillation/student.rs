//! Differentiable student unroll and the trajectory-matching objective.

use mdw_numeric::{Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::encoders::EncoderPair;
use crate::error::{at_step, contract, Error, Result};
use crate::eval::StudentLoss;

/// Smallest expert displacement a segment may have.
pub const MIN_EXPERT_DISPLACEMENT: f64 = 1e-12;

/// In-graph distilled data seen by the student.
#[derive(Clone, Copy, Debug)]
pub struct DistilledVars {
    pub images: Var,
    pub texts: Var,
    pub logits: Var,
    /// `1×1` student learning rate.
    pub lr: Var,
}

/// Batches for one unroll: a fresh permutation, refilled when exhausted.
pub fn unroll_batches(m: usize, batch_size: usize, t2: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    let b = batch_size.clamp(1, m.max(1));
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(rng);
    let mut cursor = 0;
    (0..t2)
        .map(|_| {
            if cursor + b > m {
                order.shuffle(rng);
                cursor = 0;
            }
            let batch = order[cursor..cursor + b].to_vec();
            cursor += b;
            batch
        })
        .collect()
}

/// Runs `batches.len()` differentiable SGD steps from `start` on distilled
/// rows and returns the final parameters as graph nodes.
pub fn train_student_unrolled(
    g: &Graph,
    pair: &EncoderPair,
    start: &[Var],
    data: DistilledVars,
    batches: &[Vec<usize>],
    loss: &StudentLoss,
) -> Result<Vec<Var>> {
    if batches.is_empty() {
        return contract("student unroll needs at least one step");
    }
    let mut params = start.to_vec();
    for (step, batch) in batches.iter().enumerate() {
        let step_result = (|| -> Result<Vec<Var>> {
            let images = g.select_rows(data.images, batch)?;
            let texts = g.select_rows(data.texts, batch)?;
            let logits = g.select(data.logits, batch, batch)?;
            let l = loss.build(g, pair, &params, images, texts, Some(logits))?;
            if !g.item(l)?.is_finite() {
                return Err(Error::NonFiniteLoss { stage: "unroll", step });
            }
            let grads = g.backward(l, &params, true)?;
            Ok(g.sgd_step(&params, &grads, data.lr)?)
        })();
        params = step_result.map_err(at_step("unroll", step))?;
    }
    Ok(params)
}

/// Squared expert displacement `‖θ_0 − θ_T1‖²`.
pub fn expert_displacement(start: &[Tensor], target: &[Tensor]) -> Result<f64> {
    if start.len() != target.len() {
        return contract("start and target have different block counts");
    }
    start
        .iter()
        .zip(target)
        .map(|(a, b)| Ok(a.zip_map(b, |x, y| x - y)?.sq_norm()))
        .sum()
}

/// `‖θ̃ − θ_T1‖² / ‖θ_0 − θ_T1‖²` over all parameter blocks.
pub fn trajectory_matching_loss(g: &Graph, start: &[Tensor], target: &[Tensor], student: &[Var]) -> Result<Var> {
    if student.len() != target.len() {
        return contract("student and target have different block counts");
    }
    let denom = expert_displacement(start, target)?;
    if !(denom > MIN_EXPERT_DISPLACEMENT) {
        return Err(Error::Degenerate(format!("expert displacement {denom:e} too small")));
    }
    let mut total = None;
    for (&s, t) in student.iter().zip(target) {
        let d = g.sub(s, g.constant(t.clone()))?;
        let sq = g.sum(g.mul(d, d)?)?;
        total = Some(match total {
            None => sq,
            Some(acc) => g.add(acc, sq)?,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("no parameter blocks".into()))?;
    Ok(g.scale(total, 1.0 / denom)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{ConvEncoder, DEFAULT_TAU};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn t(v: &[f64]) -> Tensor {
        Tensor::new([1, v.len()], v.to_vec()).unwrap()
    }

    fn value(start: &[f64], target: &[f64], student: &[f64]) -> f64 {
        let g = Graph::new();
        let s = g.constant(t(student));
        let l = trajectory_matching_loss(&g, &[t(start)], &[t(target)], &[s]).unwrap();
        g.item(l).unwrap()
    }

    #[test]
    fn matching_loss_exact_cases() {
        let a = [0.3, -1.0, 2.0];
        let b = [1.3, 0.5, -2.0];
        assert!(value(&a, &b, &b).abs() < 1e-12);
        assert!((value(&a, &b, &a) - 1.0).abs() < 1e-12);
        assert!((value(&[0.0], &[2.0], &[1.0]) - 0.25).abs() < 1e-12);
        let g = Graph::new();
        let s = g.constant(t(&[1.0]));
        assert!(matches!(
            trajectory_matching_loss(&g, &[t(&[1.0])], &[t(&[1.0])], &[s]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn matching_loss_ignores_untouched_blocks() {
        let frozen = Tensor::from_fn([3, 4], |r, c| (r * 4 + c) as f64 * 0.1).unwrap();
        let g = Graph::new();
        let s = g.constant(t(&[0.5, 0.5]));
        let base = trajectory_matching_loss(&g, &[t(&[0.0, 0.0])], &[t(&[1.0, 2.0])], &[s]).unwrap();
        let f = g.constant(frozen.clone());
        let with = trajectory_matching_loss(
            &g,
            &[t(&[0.0, 0.0]), frozen.clone()],
            &[t(&[1.0, 2.0]), frozen],
            &[s, f],
        )
        .unwrap();
        assert_eq!(g.item(base).unwrap(), g.item(with).unwrap());
    }

    #[test]
    fn batches_cover_without_replacement() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = unroll_batches(10, 4, 3, &mut rng);
        assert_eq!(b.len(), 3);
        let mut first_two: Vec<usize> = b[0].iter().chain(&b[1]).copied().collect();
        first_two.sort_unstable();
        first_two.dedup();
        assert_eq!(first_two.len(), 8);
        assert!(b.iter().all(|x| x.len() == 4));
    }

    fn setup() -> (EncoderPair, Vec<Tensor>, Tensor, Tensor) {
        let pair = EncoderPair::new(
            Arc::new(ConvEncoder::new([1, 4, 4], vec![2], 4).unwrap()),
            5,
            3,
            DEFAULT_TAU,
        )
        .unwrap();
        let params = pair.image.init_params(1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let images = Tensor::from_fn([3, 16], |_, _| rng.random_range(-1.0..1.0)).unwrap();
        let texts = Tensor::from_fn([3, 5], |_, _| rng.random_range(-1.0..1.0)).unwrap();
        (pair, params, images, texts)
    }

    fn displacement(lr: f64) -> Vec<f64> {
        let (pair, params, images, texts) = setup();
        let g = Graph::new();
        let start: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
        let data = DistilledVars {
            images: g.param(images),
            texts: g.param(texts),
            logits: g.param(Tensor::identity(3).unwrap()),
            lr: g.param(Tensor::scalar(lr)),
        };
        let out = train_student_unrolled(&g, &pair, &start, data, &[vec![0, 1, 2]], &StudentLoss::default())
            .unwrap();
        out.iter()
            .zip(&params)
            .flat_map(|(&o, p)| {
                let v = g.value(o);
                v.data().iter().zip(p.data()).map(|(a, b)| a - b).collect::<Vec<_>>()
            })
            .collect()
    }

    #[test]
    fn zero_lr_is_identity_and_step_is_linear_in_lr() {
        assert!(displacement(0.0).iter().all(|&d| d == 0.0));
        let one = displacement(0.01);
        let two = displacement(0.02);
        assert!(one.iter().any(|&d| d != 0.0));
        for (a, b) in one.iter().zip(&two) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
        let (pair, params, images, texts) = setup();
        let g = Graph::new();
        let start: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
        let data = DistilledVars {
            images: g.param(images),
            texts: g.param(texts),
            logits: g.param(Tensor::identity(3).unwrap()),
            lr: g.param(Tensor::scalar(0.1)),
        };
        assert!(train_student_unrolled(&g, &pair, &start, data, &[], &StudentLoss::default()).is_err());
    }

    #[test]
    fn unroll_gradient_matches_finite_differences() {
        let (pair, params, images, texts) = setup();
        let batches = vec![vec![0, 1, 2], vec![2, 0, 1]];
        let objective = |imgs: &Tensor| -> (f64, Tensor) {
            let g = Graph::new();
            let start: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
            let iv = g.param(imgs.clone());
            let data = DistilledVars {
                images: iv,
                texts: g.param(texts.clone()),
                logits: g.param(Tensor::identity(3).unwrap()),
                lr: g.param(Tensor::scalar(0.05)),
            };
            let out = train_student_unrolled(&g, &pair, &start, data, &batches, &StudentLoss::default())
                .unwrap();
            let mut total = None;
            for o in out {
                let sq = g.sum(g.mul(o, o).unwrap()).unwrap();
                total = Some(match total {
                    None => sq,
                    Some(a) => g.add(a, sq).unwrap(),
                });
            }
            let total = total.unwrap();
            let grad = g.grads(total, &[iv]).unwrap().remove(0);
            (g.item(total).unwrap(), grad)
        };
        let (_, analytic) = objective(&images);
        let eps = 1e-5;
        for &k in &[0usize, 5, 17, 30, 47] {
            let mut plus = images.to_vec();
            plus[k] += eps;
            let mut minus = images.to_vec();
            minus[k] -= eps;
            let fp = objective(&Tensor::new([3, 16], plus).unwrap()).0;
            let fm = objective(&Tensor::new([3, 16], minus).unwrap()).0;
            let fd = (fp - fm) / (2.0 * eps);
            let a = analytic.data()[k];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            assert!(rel < 1e-3, "pixel {k}: analytic {a} fd {fd}");
        }
    }
}
