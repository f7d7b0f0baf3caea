//! Expert training on noisy pairs with clean-pair filtration.

use mdw_numeric::{Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::trajectory::{Trajectory, TrajectoryMeta};
use crate::dataset::RealDataset;
use crate::encoders::{flatten, similarity_matrix, EncoderPair, Model};
use crate::error::{at_step, contract, Result};
use crate::eval::{recall_at_k, DEFAULT_KS};
use crate::filtration::{
    consensus_select, fit_beta_mixture, global_partition, local_partition, per_sample_similarities,
    selection_quality, to_unit_interval, SelectionReport, DEFAULT_DELTA,
};
use crate::losses::{loss_correspondence, loss_mae, loss_noncorrespondence, loss_noncorrespondence_rows, Labels};

/// Which pairs the negative-match loss covers during expert training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LnScope {
    #[default]
    All,
    /// Only rows outside the batch's consensus-clean set.
    Noisy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub tau: f64,
    pub delta: f64,
    pub use_filtration: bool,
    pub use_ln: bool,
    /// Multiplier on the negative-match loss.
    pub ln_weight: f64,
    pub use_mae: bool,
    pub ln_scope: LnScope,
    /// Snapshot after every optimizer step instead of every epoch.
    pub per_step_snapshots: bool,
    pub bmm_max_iter: usize,
    pub bmm_tol: f64,
    pub seed: u64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 10,
            lr: 0.01,
            tau: crate::encoders::DEFAULT_TAU,
            delta: DEFAULT_DELTA,
            use_filtration: true,
            use_ln: true,
            ln_weight: 1.0,
            use_mae: false,
            ln_scope: LnScope::All,
            per_step_snapshots: false,
            bmm_max_iter: 100,
            bmm_tol: 1e-5,
            seed: 0,
        }
    }
}

impl ExpertConfig {
    /// Plain correspondence training on every pair.
    pub fn vanilla() -> Self {
        Self {
            use_filtration: false,
            use_ln: false,
            ..Self::default()
        }
    }

    fn describe(&self) -> String {
        format!(
            "filtration={} ln={} mae={} scope={:?} tau={} delta={}",
            self.use_filtration, self.use_ln, self.use_mae, self.ln_scope, self.tau, self.delta
        )
    }
}

/// Per-epoch record of an expert run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Retrieval on the validation split after the epoch.
    pub val_rsum: Option<f64>,
    /// Consensus-clean set of the epoch, scored against the hidden mask.
    pub consensus_size: usize,
    pub precision: f64,
    pub recall: f64,
    /// Mean raw similarity of clean pairs minus that of noisy pairs, taken
    /// at the start of the epoch.
    pub similarity_gap: f64,
}

#[derive(Debug)]
pub struct ExpertRun {
    pub trajectory: Trajectory,
    pub model: Model,
    pub epochs: Vec<EpochLog>,
    /// Selection made in the last filtered epoch.
    pub report: Option<SelectionReport>,
    /// Raw similarities at the start of each epoch.
    pub similarity_history: Vec<Vec<f64>>,
}

/// Mean similarity of clean pairs minus that of noisy pairs.
pub fn similarity_gap(sims: &[f64], noise_mask: &[bool]) -> f64 {
    let mean = |noisy: bool| {
        let v: Vec<f64> = sims
            .iter()
            .zip(noise_mask)
            .filter(|(_, &n)| n == noisy)
            .map(|(&s, _)| s)
            .collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    mean(false) - mean(true)
}

/// Global partition from per-sample similarities.
pub fn global_selection(config: &ExpertConfig, sims: Vec<f64>) -> Result<SelectionReport> {
    let unit: Vec<f64> = sims.iter().map(|&s| to_unit_interval(s)).collect();
    let bmm = fit_beta_mixture(&unit, config.bmm_max_iter, config.bmm_tol, config.seed)?;
    let posteriors: Vec<f64> = unit.iter().map(|&s| bmm.posterior_clean(s)).collect();
    let global = global_partition(&posteriors, config.delta)?;
    Ok(SelectionReport {
        similarities: sims,
        posteriors,
        delta: config.delta,
        global,
        local: Vec::new(),
        consensus: Vec::new(),
        mixture: Some(bmm),
    })
}

/// Trains an expert from `config.seed` and records its trajectory.
///
/// With filtration on, the first epoch is a warmup on the negative-match
/// loss. Every later epoch fits the Beta mixture once; each batch then
/// takes the consensus of the global and local partitions, applies the
/// correspondence loss to the clean rows and columns of the batch
/// similarity matrix and the negative-match loss to the whole batch.
pub fn train_expert(
    pair: &EncoderPair,
    dataset: &RealDataset,
    val: Option<&RealDataset>,
    config: &ExpertConfig,
) -> Result<ExpertRun> {
    if config.epochs < 2 {
        return contract(format!("expert needs at least 2 epochs, got {}", config.epochs));
    }
    if config.batch_size < 2 || config.batch_size > dataset.len() {
        return contract(format!("batch size {} outside 2..={}", config.batch_size, dataset.len()));
    }
    let mut model = Model::init(pair.clone(), config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1));
    let mut trajectory = Trajectory::new(TrajectoryMeta {
        seed: config.seed,
        epochs: config.epochs,
        encoder: pair.image.name(),
        param_shapes: pair.image.param_shapes(),
        loss: config.describe(),
        per_epoch: !config.per_step_snapshots,
    });
    trajectory.push(&flatten(&model.params))?;

    let n = dataset.len();
    let mut logs = Vec::new();
    let mut history = Vec::new();
    let mut last_report = None;
    let mut step = 0;
    for epoch in 1..=config.epochs {
        let sims = per_sample_similarities(&model, dataset)?;
        let gap = similarity_gap(&sims, dataset.noise_mask());
        history.push(sims.clone());
        let warmup = config.use_filtration && epoch == 1;
        let mut report = if config.use_filtration && !warmup {
            Some(global_selection(config, sims)?)
        } else {
            None
        };

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut epoch_local = Vec::new();
        let mut epoch_consensus = Vec::new();
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for batch in order.chunks(config.batch_size).filter(|b| b.len() >= 2) {
            let g = Graph::new();
            let params: Vec<Var> = model.params.iter().map(|p| g.param(p.clone())).collect();
            let images = g.constant(dataset.paired_images(batch)?);
            let texts = g.constant(dataset.text_rows(batch)?);
            let img = pair.encode_image(&g, &params, images)?;
            let txt = pair.encode_text(&g, texts)?;
            let h = similarity_matrix(&g, img.embeddings, txt)?;

            let clean_pos: Option<Vec<usize>> = report.as_ref().map(|r| {
                let local = local_partition(&g.value(h), batch).expect("square batch matrix");
                epoch_local.extend_from_slice(&local);
                let cons = consensus_select(&r.global, &local);
                epoch_consensus.extend_from_slice(&cons);
                batch
                    .iter()
                    .enumerate()
                    .filter(|(_, i)| cons.binary_search(i).is_ok())
                    .map(|(p, _)| p)
                    .collect()
            });

            let loss = expert_loss(&g, h, config, warmup, clean_pos.as_deref())
                .map_err(at_step("expert", step))?;
            loss_sum += g.item(loss)?;
            let grads = g.grads(loss, &params).map_err(|e| at_step("expert", step)(e.into()))?;
            for (p, gr) in model.params.iter_mut().zip(&grads) {
                *p = p.zip_map(gr, |a, b| a - config.lr * b)?;
            }
            if model.params.iter().any(|p| !p.is_finite()) {
                return Err(crate::Error::NonFiniteLoss { stage: "expert", step });
            }
            if config.per_step_snapshots {
                trajectory.push(&flatten(&model.params))?;
            }
            batches += 1;
            step += 1;
        }
        if !config.per_step_snapshots {
            trajectory.push(&flatten(&model.params))?;
        }

        let (precision, recall, consensus_size) = match report.as_mut() {
            Some(r) => {
                epoch_local.sort_unstable();
                epoch_consensus.sort_unstable();
                r.local = epoch_local;
                r.consensus = epoch_consensus;
                if r.consensus.is_empty() {
                    log::warn!("epoch {epoch}: empty consensus set, trained on negatives only");
                }
                let (p, rc) = selection_quality(&r.consensus, dataset.noise_mask());
                (p, rc, r.consensus.len())
            }
            None => (0.0, 0.0, 0),
        };
        let val_rsum = match val {
            Some(v) => Some(recall_at_k(&model, v, &DEFAULT_KS)?.rsum),
            None => None,
        };
        let log = EpochLog {
            epoch,
            mean_loss: loss_sum / batches.max(1) as f64,
            val_rsum,
            consensus_size,
            precision,
            recall,
            similarity_gap: gap,
        };
        log::info!(
            "expert seed {} epoch {epoch}: loss {:.4} val {:?} consensus {} (p {:.3} r {:.3}) gap {:.3}",
            config.seed,
            log.mean_loss,
            log.val_rsum,
            log.consensus_size,
            log.precision,
            log.recall,
            log.similarity_gap
        );
        logs.push(log);
        if report.is_some() {
            last_report = report;
        }
    }

    Ok(ExpertRun {
        trajectory,
        model,
        epochs: logs,
        report: last_report,
        similarity_history: history,
    })
}

fn expert_loss(g: &Graph, h: Var, config: &ExpertConfig, warmup: bool, clean: Option<&[usize]>) -> Result<Var> {
    let b = g.shape(h)[0];
    let tau = config.tau;
    let mut terms = Vec::new();
    let negatives = |terms: &mut Vec<Var>| -> Result<()> {
        if config.use_ln {
            let ln = match (config.ln_scope, clean) {
                (LnScope::Noisy, Some(c)) => {
                    let mut include = vec![true; b];
                    c.iter().for_each(|&p| include[p] = false);
                    loss_noncorrespondence_rows(g, h, tau, &include)?
                }
                _ => loss_noncorrespondence(g, h, tau)?,
            };
            terms.push(if config.ln_weight == 1.0 { ln } else { g.scale(ln, config.ln_weight)? });
        }
        if config.use_mae {
            terms.push(loss_mae(g, h, &Labels::hard(g, b)?, tau)?);
        }
        Ok(())
    };

    if warmup {
        negatives(&mut terms)?;
        if terms.is_empty() {
            terms.push(loss_correspondence(g, h, &Labels::hard(g, b)?, tau)?);
        }
    } else {
        match clean {
            Some([]) => {}
            Some(c) => {
                let sub = g.select(h, c, c)?;
                terms.push(loss_correspondence(g, sub, &Labels::hard(g, c.len())?, tau)?);
            }
            None => terms.push(loss_correspondence(g, h, &Labels::hard(g, b)?, tau)?),
        }
        negatives(&mut terms)?;
        if terms.is_empty() {
            return Ok(g.constant(Tensor::scalar(0.0)));
        }
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::generate_world;
    use crate::encoders::{ConvEncoder, DEFAULT_TAU};
    use std::sync::Arc;

    fn pair() -> EncoderPair {
        EncoderPair::new(Arc::new(ConvEncoder::standard([3, 8, 8])), 16, 0, DEFAULT_TAU).unwrap()
    }

    #[test]
    fn snapshot_count_and_frozen_head() {
        let d = generate_world(4, 40, [3, 8, 8], 16, 0.1, 1).unwrap().with_pmp(0.3, 2).unwrap();
        let p = pair();
        let head = p.text_head.clone();
        let cfg = ExpertConfig { epochs: 3, batch_size: 10, lr: 0.05, ..ExpertConfig::default() };
        let run = train_expert(&p, &d, None, &cfg).unwrap();
        assert_eq!(run.trajectory.len(), 4);
        assert_eq!(run.epochs.len(), 3);
        assert_eq!(p.text_head, head);
        assert!(run.report.is_some());
        let per_step = ExpertConfig { per_step_snapshots: true, ..cfg.clone() };
        let run = train_expert(&p, &d, None, &per_step).unwrap();
        assert_eq!(run.trajectory.len(), 1 + 3 * 4);
        assert!(train_expert(&p, &d, None, &ExpertConfig { epochs: 1, ..cfg }).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let d = generate_world(4, 40, [3, 8, 8], 16, 0.1, 1).unwrap();
        let cfg = ExpertConfig { epochs: 2, batch_size: 10, lr: 0.05, ..ExpertConfig::default() };
        let a = train_expert(&pair(), &d, None, &cfg).unwrap();
        let b = train_expert(&pair(), &d, None, &cfg).unwrap();
        assert_eq!(a.trajectory, b.trajectory);
    }

    #[test]
    fn empty_consensus_trains_on_negatives_only() {
        let g = Graph::new();
        let h = g.constant(Tensor::full([3, 3], 0.1).unwrap());
        let cfg = ExpertConfig::default();
        let l = expert_loss(&g, h, &cfg, false, Some(&[])).unwrap();
        let ln = loss_noncorrespondence(&g, h, cfg.tau).unwrap();
        assert_eq!(g.item(l).unwrap(), g.item(ln).unwrap());
    }
}
