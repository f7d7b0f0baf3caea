//! Flat run configuration with dotted stage prefixes.
//!
//! Every knob of every stage lives in one JSON object such as
//! `{"data.eta": 0.3, "ceo.enabled": false}`. Missing keys take their
//! defaults and unknown keys are rejected.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataset::{World, WorldParams};
use crate::distillation::{CamSnapshot, CeoConfig, DistillConfig, ExpertConfig, LnScope, DESK_STUDENT_LR};
use crate::encoders::{ConvEncoder, EncoderPair, DEFAULT_EMBED_DIM, DEFAULT_TAU};
use crate::error::{Error, Result};
use crate::eval::{StudentConfig, StudentLoss, DEFAULT_KS};
use crate::filtration::DEFAULT_DELTA;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(rename = "run.id")]
    pub run_id: String,
    #[serde(rename = "run.seed")]
    pub seed: u64,

    #[serde(rename = "world.num_concepts")]
    pub num_concepts: usize,
    #[serde(rename = "world.image_shape")]
    pub image_shape: [usize; 3],
    #[serde(rename = "world.text_dim")]
    pub text_dim: usize,
    #[serde(rename = "world.noise")]
    pub world_noise: f64,
    #[serde(rename = "world.patch")]
    pub patch: usize,
    #[serde(rename = "world.text_offset")]
    pub text_offset: f64,

    #[serde(rename = "data.train_size")]
    pub train_size: usize,
    /// Fraction of training pairs whose text is swapped for another's.
    #[serde(rename = "data.eta")]
    pub eta: f64,

    #[serde(rename = "encoder.widths")]
    pub widths: Vec<usize>,
    #[serde(rename = "encoder.embed_dim")]
    pub embed_dim: usize,
    #[serde(rename = "encoder.tau")]
    pub tau: f64,

    #[serde(rename = "expert.count")]
    pub experts: usize,
    #[serde(rename = "expert.epochs")]
    pub expert_epochs: usize,
    #[serde(rename = "expert.batch_size")]
    pub expert_batch_size: usize,
    #[serde(rename = "expert.lr")]
    pub expert_lr: f64,
    #[serde(rename = "expert.delta")]
    pub delta: f64,
    #[serde(rename = "expert.use_filtration")]
    pub use_filtration: bool,
    #[serde(rename = "expert.use_ln")]
    pub expert_use_ln: bool,
    #[serde(rename = "expert.use_mae")]
    pub expert_use_mae: bool,
    #[serde(rename = "expert.ln_scope")]
    pub ln_scope: LnScope,
    #[serde(rename = "expert.per_step_snapshots")]
    pub per_step_snapshots: bool,

    /// Number of distilled pairs.
    #[serde(rename = "distill.size")]
    pub distill_size: usize,
    #[serde(rename = "distill.steps")]
    pub distill_steps: usize,
    #[serde(rename = "distill.expert_steps")]
    pub t1: usize,
    #[serde(rename = "distill.student_steps")]
    pub t2: usize,
    #[serde(rename = "distill.batch_size")]
    pub distill_batch_size: usize,
    #[serde(rename = "distill.max_start_epoch")]
    pub max_start_epoch: usize,
    #[serde(rename = "distill.lr_images")]
    pub lr_images: f64,
    #[serde(rename = "distill.lr_texts")]
    pub lr_texts: f64,
    #[serde(rename = "distill.lr_logits")]
    pub lr_logits: f64,
    #[serde(rename = "distill.lr_lr")]
    pub lr_lr: f64,
    #[serde(rename = "distill.initial_lr")]
    pub initial_lr: f64,
    /// Learn the matching logits and train students on their soft labels.
    #[serde(rename = "distill.use_soft_labels")]
    pub use_soft_labels: bool,
    #[serde(rename = "distill.use_ln")]
    pub student_use_ln: bool,
    #[serde(rename = "distill.use_mae")]
    pub student_use_mae: bool,

    #[serde(rename = "ceo.enabled")]
    pub ceo_enabled: bool,
    #[serde(rename = "ceo.refresh_every")]
    pub ceo_refresh_every: usize,
    #[serde(rename = "ceo.top_k")]
    pub ceo_top_k: usize,
    #[serde(rename = "ceo.beta")]
    pub ceo_beta: f64,
    #[serde(rename = "ceo.rho")]
    pub ceo_rho: f64,
    #[serde(rename = "ceo.normalize_map")]
    pub ceo_normalize_map: bool,
    #[serde(rename = "ceo.cam_at")]
    pub ceo_cam_at: CamSnapshot,

    #[serde(rename = "eval.seeds")]
    pub eval_seeds: usize,
    #[serde(rename = "eval.epochs")]
    pub eval_epochs: usize,
    #[serde(rename = "eval.batch_size")]
    pub eval_batch_size: usize,
    #[serde(rename = "eval.histogram_bins")]
    pub histogram_bins: usize,

    /// Root under which run directories are created.
    #[serde(rename = "paths.root")]
    pub root: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let world = WorldParams::default();
        let expert = ExpertConfig::default();
        let distill = DistillConfig::default();
        let ceo = CeoConfig::default();
        let student = StudentConfig::default();
        Self {
            run_id: "mdw".into(),
            seed: 0,
            num_concepts: 20,
            image_shape: world.image_shape,
            text_dim: world.text_dim,
            world_noise: world.intra_concept_noise,
            patch: 10,
            text_offset: world.text_offset,
            train_size: 2000,
            eta: 0.3,
            widths: vec![8, 8],
            embed_dim: DEFAULT_EMBED_DIM,
            tau: DEFAULT_TAU,
            experts: 4,
            expert_epochs: expert.epochs,
            expert_batch_size: expert.batch_size,
            expert_lr: expert.lr,
            delta: DEFAULT_DELTA,
            use_filtration: true,
            expert_use_ln: true,
            expert_use_mae: false,
            ln_scope: LnScope::All,
            per_step_snapshots: false,
            distill_size: 20,
            distill_steps: 150,
            t1: distill.t1,
            t2: distill.t2,
            distill_batch_size: distill.batch_size,
            max_start_epoch: distill.max_start_epoch,
            lr_images: distill.lr_images,
            lr_texts: distill.lr_texts,
            lr_logits: distill.lr_logits,
            lr_lr: distill.lr_lr,
            initial_lr: DESK_STUDENT_LR,
            use_soft_labels: true,
            student_use_ln: true,
            student_use_mae: false,
            ceo_enabled: ceo.enabled,
            ceo_refresh_every: ceo.refresh_every,
            ceo_top_k: ceo.top_k,
            ceo_beta: ceo.beta,
            ceo_rho: ceo.rho,
            ceo_normalize_map: ceo.normalize_map,
            ceo_cam_at: ceo.cam_at,
            eval_seeds: 5,
            eval_epochs: student.epochs,
            eval_batch_size: student.batch_size,
            histogram_bins: 40,
            root: "runs".into(),
        }
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Pretty JSON of the resolved configuration.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Applies `key=value` overrides, where `value` is JSON or a bare string.
    pub fn with_overrides<'a>(&self, pairs: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        let map = value.as_object_mut().expect("config serializes to an object");
        for pair in pairs {
            let (key, raw) = pair
                .split_once('=')
                .ok_or_else(|| bad(format!("override `{pair}` is not key=value")))?;
            let parsed = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.into()));
            map.insert(key.to_string(), parsed);
        }
        let cfg: Self = serde_json::from_value(value).map_err(|e| bad(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return Err(bad(format!("run.id `{}` must be a plain non-empty name", self.run_id)));
        }
        if !(0.0..1.0).contains(&self.eta) {
            return Err(bad(format!("data.eta must lie in [0, 1), got {}", self.eta)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(bad(format!("expert.delta must lie in (0, 1), got {}", self.delta)));
        }
        if !(self.tau > 0.0) {
            return Err(bad(format!("encoder.tau must be positive, got {}", self.tau)));
        }
        let max_k = DEFAULT_KS.iter().max().copied().unwrap_or(1);
        if self.num_concepts < max_k {
            return Err(bad(format!(
                "world.num_concepts must be at least {max_k} so the test split supports every recall cutoff"
            )));
        }
        if self.experts == 0 || self.eval_seeds == 0 {
            return Err(bad("expert.count and eval.seeds must be positive"));
        }
        if self.distill_size == 0 || self.distill_size * 10 > self.train_size {
            return Err(bad(format!(
                "distill.size {} must satisfy 1 <= size <= data.train_size / 10",
                self.distill_size
            )));
        }
        if self.expert_epochs < 2 {
            return Err(bad("expert.epochs must be at least 2"));
        }
        let snapshots = if self.per_step_snapshots {
            self.expert_epochs * self.train_size.div_ceil(self.expert_batch_size.max(1))
        } else {
            self.expert_epochs
        };
        if self.max_start_epoch + self.t1 > snapshots {
            return Err(bad(format!(
                "distill.max_start_epoch + distill.expert_steps exceeds the {snapshots} recorded expert steps"
            )));
        }
        if !(self.initial_lr > 0.0) {
            return Err(bad("distill.initial_lr must be positive"));
        }
        let rates = [
            ("expert.lr", self.expert_lr),
            ("distill.lr_images", self.lr_images),
            ("distill.lr_texts", self.lr_texts),
            ("distill.lr_logits", self.lr_logits),
            ("distill.lr_lr", self.lr_lr),
        ];
        if let Some((k, v)) = rates.iter().find(|(_, v)| !(v.is_finite() && *v >= 0.0)) {
            return Err(bad(format!("{k} must be finite and non-negative, got {v}")));
        }
        self.ceo_config().validate().map_err(|e| bad(e.to_string()))?;
        World::new(self.world_params()).map_err(|e| bad(e.to_string()))?;
        ConvEncoder::new(self.image_shape, self.widths.clone(), self.embed_dim).map_err(|e| bad(e.to_string()))?;
        Ok(())
    }

    pub fn world_params(&self) -> WorldParams {
        WorldParams {
            num_concepts: self.num_concepts,
            image_shape: self.image_shape,
            text_dim: self.text_dim,
            intra_concept_noise: self.world_noise,
            patch: self.patch,
            text_offset: self.text_offset,
            seed: self.seed,
        }
    }

    pub fn encoder_pair(&self) -> Result<EncoderPair> {
        let image = ConvEncoder::new(self.image_shape, self.widths.clone(), self.embed_dim)?;
        EncoderPair::new(Arc::new(image), self.text_dim, self.seed, self.tau)
    }

    /// Expert settings; the per-expert seed is filled in by the caller.
    pub fn expert_config(&self) -> ExpertConfig {
        ExpertConfig {
            epochs: self.expert_epochs,
            batch_size: self.expert_batch_size,
            lr: self.expert_lr,
            tau: self.tau,
            delta: self.delta,
            use_filtration: self.use_filtration,
            use_ln: self.expert_use_ln,
            use_mae: self.expert_use_mae,
            ln_scope: self.ln_scope,
            per_step_snapshots: self.per_step_snapshots,
            ..ExpertConfig::default()
        }
    }

    pub fn ceo_config(&self) -> CeoConfig {
        CeoConfig {
            enabled: self.ceo_enabled,
            refresh_every: self.ceo_refresh_every,
            top_k: self.ceo_top_k,
            beta: self.ceo_beta,
            rho: self.ceo_rho,
            normalize_map: self.ceo_normalize_map,
            cam_at: self.ceo_cam_at,
        }
    }

    pub fn student_loss(&self) -> StudentLoss {
        StudentLoss {
            soft_labels: self.use_soft_labels,
            use_ln: self.student_use_ln,
            use_mae: self.student_use_mae,
            tau: self.tau,
        }
    }

    pub fn distill_config(&self) -> DistillConfig {
        DistillConfig {
            steps: self.distill_steps,
            t1: self.t1,
            t2: self.t2,
            batch_size: self.distill_batch_size,
            max_start_epoch: self.max_start_epoch,
            lr_images: self.lr_images,
            lr_texts: self.lr_texts,
            lr_logits: if self.use_soft_labels { self.lr_logits } else { 0.0 },
            lr_lr: self.lr_lr,
            loss: self.student_loss(),
            ceo: self.ceo_config(),
            seed: self.seed_for(Seed::Distill, 0),
        }
    }

    pub fn student_config(&self) -> StudentConfig {
        StudentConfig {
            epochs: self.eval_epochs,
            batch_size: self.eval_batch_size,
            loss: self.student_loss(),
        }
    }

    /// Turns off filtration, the negative-match loss and CEO, keeping the
    /// learned matching logits.
    pub fn vanilla(&self) -> Self {
        Self {
            use_filtration: false,
            expert_use_ln: false,
            student_use_ln: false,
            ceo_enabled: false,
            ..self.clone()
        }
    }

    pub fn seed_for(&self, stream: Seed, index: u64) -> u64 {
        let base = self.seed.wrapping_mul(1_000_003);
        base.wrapping_add(stream as u64 * 10_000).wrapping_add(index)
    }

    pub fn expert_seeds(&self) -> Vec<u64> {
        (0..self.experts as u64).map(|i| self.seed_for(Seed::Expert, i)).collect()
    }

    pub fn eval_seed_list(&self) -> Vec<u64> {
        (0..self.eval_seeds as u64).map(|i| self.seed_for(Seed::Eval, i)).collect()
    }
}

/// Independent seed streams derived from the run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Seed {
    Train = 1,
    Noise = 2,
    Test = 3,
    Expert = 4,
    Init = 5,
    Distill = 6,
    Eval = 7,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_json(&cfg.to_json().unwrap()).unwrap(), cfg);
        assert_eq!(RunConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_json(r#"{"data.etaa": 0.1}"#).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
        assert!(RunConfig::from_json(r#"{"data.eta": "high"}"#).is_err());
    }

    #[test]
    fn overrides_parse_json_and_strings() {
        let cfg = RunConfig::default()
            .with_overrides(["data.eta=0.5", "run.id=abl", "ceo.enabled=false", "ceo.cam_at=target"])
            .unwrap();
        assert_eq!(cfg.eta, 0.5);
        assert_eq!(cfg.run_id, "abl");
        assert!(!cfg.ceo_enabled);
        assert_eq!(cfg.ceo_cam_at, CamSnapshot::Target);
        assert!(RunConfig::default().with_overrides(["nope=1"]).is_err());
        assert!(RunConfig::default().with_overrides(["data.eta"]).is_err());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for o in ["data.eta=1.0", "world.num_concepts=5", "distill.size=500", "distill.max_start_epoch=10", "encoder.tau=0", "run.id=a/b"] {
            assert!(matches!(RunConfig::default().with_overrides([o]), Err(Error::Config(_))), "{o}");
        }
    }

    #[test]
    fn seed_streams_are_distinct() {
        let cfg = RunConfig::default();
        let mut all: Vec<u64> = cfg.expert_seeds();
        all.extend(cfg.eval_seed_list());
        all.push(cfg.seed_for(Seed::Init, 0));
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), n);
    }

    #[test]
    fn disabled_soft_labels_freeze_the_logits() {
        let cfg = RunConfig { use_soft_labels: false, ..RunConfig::default() };
        assert_eq!(cfg.distill_config().lr_logits, 0.0);
        assert!(!cfg.distill_config().loss.soft_labels);
    }
}
