//! Expert trajectories, trajectory matching and the distillation loop.

mod ceo;
mod expert;
mod student;
mod trajectory;

pub use ceo::{
    aggregate_maps, fresh_weights, gradcam_map, gradcam_maps, normalize_map, top_k_indices, CamSnapshot,
    CeoConfig, CeoState, GradCam,
};
pub use expert::{global_selection, similarity_gap, train_expert, EpochLog, ExpertConfig, ExpertRun, LnScope};
pub use student::{
    expert_displacement, train_student_unrolled, trajectory_matching_loss, unroll_batches, DistilledVars,
    MIN_EXPERT_DISPLACEMENT,
};
pub use trajectory::{sample_start, StartPoint, Trajectory, TrajectoryMeta, TRAJECTORY_MAGIC};

use mdw_numeric::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DistilledDataset, RealDataset};
use crate::encoders::{unflatten, EncoderPair};
use crate::error::{contract, Error, Result};
use crate::eval::StudentLoss;

/// Trains one expert per seed in parallel, in seed order.
pub fn train_experts(
    pair: &EncoderPair,
    dataset: &RealDataset,
    val: Option<&RealDataset>,
    config: &ExpertConfig,
    seeds: &[u64],
) -> Result<Vec<ExpertRun>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let cfg = ExpertConfig { seed, ..config.clone() };
            train_expert(pair, dataset, val, &cfg)
        })
        .collect()
}

/// Student learning rate that distillation starts from on micro-worlds.
///
/// Larger rates make the unrolled student chaotic: the matching gradient
/// stops agreeing between segments.
pub const DESK_STUDENT_LR: f64 = 0.003;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub steps: usize,
    /// Expert steps per matched segment.
    pub t1: usize,
    /// Student steps per unroll.
    pub t2: usize,
    pub batch_size: usize,
    pub max_start_epoch: usize,
    pub lr_images: f64,
    pub lr_texts: f64,
    pub lr_logits: f64,
    /// Meta learning rate of the student learning rate.
    pub lr_lr: f64,
    /// Student loss inside the unroll; `soft_labels` toggles learned logits.
    pub loss: StudentLoss,
    pub ceo: CeoConfig,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            t1: 1,
            t2: 8,
            batch_size: 20,
            max_start_epoch: 8,
            lr_images: 1.0,
            lr_texts: 0.001,
            lr_logits: 0.1,
            lr_lr: 1e-6,
            loss: StudentLoss::default(),
            ceo: CeoConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug)]
pub struct DistillOutcome {
    pub distilled: DistilledDataset,
    /// Matching loss of every completed step.
    pub losses: Vec<f64>,
    /// Segments skipped because the expert did not move.
    pub skipped: usize,
    pub ceo: Option<CeoState>,
    /// Aggregated activation maps of the last refresh.
    pub last_maps: Option<Vec<Tensor>>,
}

/// Optimizes `init` so that students trained on it follow the experts.
///
/// Each step samples a segment, unrolls a student from its start on the
/// distilled pairs, and descends the matching loss in images, texts,
/// logits and the student learning rate. With CEO on, image gradients are
/// reweighted per pixel by the state's weight maps.
pub fn distill(
    pair: &EncoderPair,
    trajectories: &[Trajectory],
    init: DistilledDataset,
    config: &DistillConfig,
) -> Result<DistillOutcome> {
    if trajectories.is_empty() {
        return contract("distillation needs at least one expert trajectory");
    }
    let shapes = pair.image.param_shapes();
    let dim: usize = shapes.iter().map(|s| s[0] * s[1]).sum();
    if trajectories.iter().any(|t| t.dim() != dim) {
        return contract("trajectory dimension does not match the encoder");
    }
    let m = init.len();
    let mut ceo = if config.ceo.enabled {
        let Some([_, hf, wf]) = pair.image.feature_grid() else {
            return contract(format!("CEO needs feature maps, {} has none", pair.image.name()));
        };
        let [_, h, w] = init.image_shape;
        if [hf, wf] != [h, w] {
            return contract("feature grid must match the image grid for CEO");
        }
        Some(CeoState::new(m, [h, w], config.ceo.clone())?)
    } else {
        None
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut current = init;
    let mut losses = Vec::with_capacity(config.steps);
    let mut skipped = 0;
    let mut last_maps = None;
    for step in 0..config.steps {
        let point = sample_start(trajectories, config.max_start_epoch, config.t1, &mut rng)?;
        let start = unflatten(&point.start, &shapes)?;
        let target = unflatten(&point.target, &shapes)?;
        if let Some(state) = ceo.as_mut().filter(|s| s.due(step)) {
            let cam_params = match state.config.cam_at {
                CamSnapshot::Start => &start,
                CamSnapshot::Target => &target,
            };
            last_maps =
                Some(state.refresh(pair, cam_params, &current.images, &current.texts, &current.logits)?);
        }
        let batches = unroll_batches(m, config.batch_size, config.t2, &mut rng);
        if expert_displacement(&start, &target)? <= MIN_EXPERT_DISPLACEMENT {
            log::warn!("step {step}: expert segment did not move, skipped");
            skipped += 1;
            continue;
        }

        let g = Graph::new();
        let data = DistilledVars {
            images: g.param(current.images.clone()),
            texts: g.param(current.texts.clone()),
            logits: g.param(current.logits.clone()),
            lr: g.param(Tensor::scalar(current.lr())),
        };
        let abort = |current: &DistilledDataset| Error::DistillAborted {
            step,
            last_good: Box::new(current.clone()),
        };
        let outcome = (|| -> Result<(f64, Vec<Tensor>)> {
            let start_vars: Vec<Var> = start.iter().map(|p| g.param(p.clone())).collect();
            let student = train_student_unrolled(&g, pair, &start_vars, data, &batches, &config.loss)?;
            let loss = trajectory_matching_loss(&g, &start, &target, &student)?;
            let value = g.item(loss)?;
            let grads = g.grads(loss, &[data.images, data.texts, data.logits, data.lr])?;
            Ok((value, grads))
        })();
        let (value, grads) = match outcome {
            Ok(v) => v,
            Err(e @ (Error::NonFiniteLoss { .. } | Error::Numeric(_))) => {
                log::error!("step {step}: {e}");
                return Err(abort(&current));
            }
            Err(e) => return Err(e),
        };
        if !value.is_finite() || grads.iter().any(|t| !t.is_finite()) {
            log::error!("step {step}: non-finite matching loss or gradient");
            return Err(abort(&current));
        }

        let image_grad = match &ceo {
            Some(state) => state.weight_gradient(&grads[0])?,
            None => grads[0].clone(),
        };
        current.images = current.images.zip_map(&image_grad, |x, g| x - config.lr_images * g)?;
        current.texts = current.texts.zip_map(&grads[1], |x, g| x - config.lr_texts * g)?;
        current.logits = current.logits.zip_map(&grads[2], |x, g| x - config.lr_logits * g)?;
        let lr = current.lr() - config.lr_lr * grads[3].item()?;
        current.set_lr(lr);
        losses.push(value);
        if step % 10 == 0 {
            log::debug!(
                "distill step {step}: loss {value:.5} lr {:.5} |image grad| {:.4} lr grad {:.3}",
                current.lr(),
                grads[0].sq_norm().sqrt(),
                grads[3].item()?
            );
        }
    }
    Ok(DistillOutcome {
        distilled: current,
        losses,
        skipped,
        ceo,
        last_maps,
    })
}
