//! Stage runners over a run directory, and the in-memory experiment they
//! share with the examples.
//!
//! A run directory holds the config echo, a version stamp and every stage's
//! artifacts:
//!
//! ```text
//! config.json  version.json
//! data/train.mdwb  data/test.mdwb
//! experts/expert_<i>.mdwt  experts/metrics.csv  experts/selection.json  experts/similarities.json
//! distill/distilled.mdwb  distill/loss.csv
//! eval/scores.csv  eval/diagnostics.json
//! ```
//!
//! Existing artifacts are never overwritten unless the stage is forced.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Seed};
use crate::dataset::{
    init_distilled, load_dataset, load_distilled, save_dataset, save_distilled, write_manifest, DistilledDataset,
    RealDataset, World,
};
use crate::distillation::{distill, train_experts, DistillOutcome, ExpertRun, Trajectory};
use crate::encoders::EncoderPair;
use crate::error::{io_err, Error, Result};
use crate::eval::{
    export_metrics, recall_at_k, score_rows, similarity_histograms, train_from_scratch, write_metrics_csv,
    Diagnostics, MetricRow, RetrievalScores, DEFAULT_KS,
};
use crate::filtration::SelectionReport;

/// Environment variable that overrides the configured output root.
pub const RUN_ROOT_ENV: &str = "MDW_RUN_ROOT";

/// Generated data and encoders for one configuration.
pub struct Experiment {
    pub config: RunConfig,
    pub pair: EncoderPair,
    pub train: RealDataset,
    pub test: RealDataset,
}

/// Students trained on one distilled set.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub per_seed: Vec<(u64, RetrievalScores)>,
    pub mean: RetrievalScores,
    pub failures: Vec<(u64, String)>,
}

impl Experiment {
    /// Samples the noisy training split and a clean one-per-concept test split.
    pub fn generate(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let world = World::new(config.world_params())?;
        let train = world
            .sample(config.train_size, config.seed_for(Seed::Train, 0))?
            .with_pmp(config.eta, config.seed_for(Seed::Noise, 0))?;
        let test = world.one_per_concept(config.seed_for(Seed::Test, 0))?;
        Self::from_data(config, train, test)
    }

    pub fn from_data(config: &RunConfig, train: RealDataset, test: RealDataset) -> Result<Self> {
        Ok(Self {
            config: config.clone(),
            pair: config.encoder_pair()?,
            train,
            test,
        })
    }

    pub fn train_experts(&self) -> Result<Vec<ExpertRun>> {
        let cfg = &self.config;
        train_experts(&self.pair, &self.train, Some(&self.test), &cfg.expert_config(), &cfg.expert_seeds())
    }

    /// Distilled pairs drawn from `report`'s consensus set, or from all
    /// pairs without one, at the configured starting learning rate.
    pub fn initial_distilled(&self, report: Option<&SelectionReport>) -> Result<DistilledDataset> {
        let cfg = &self.config;
        let mut d = init_distilled(&self.train, cfg.distill_size, cfg.seed_for(Seed::Init, 0), report)?;
        d.set_lr(cfg.initial_lr);
        Ok(d)
    }

    pub fn distill(&self, trajectories: &[Trajectory], init: DistilledDataset) -> Result<DistillOutcome> {
        distill(&self.pair, trajectories, init, &self.config.distill_config())
    }

    /// Trains fresh students on `distilled` and scores them on the test split.
    pub fn evaluate(&self, distilled: &DistilledDataset) -> Result<Evaluation> {
        let cfg = &self.config;
        let trained = train_from_scratch(&self.pair, distilled, &cfg.eval_seed_list(), &cfg.student_config());
        if trained.models.is_empty() {
            return Err(Error::Degenerate(format!(
                "every evaluation seed failed: {:?}",
                trained.failures
            )));
        }
        let per_seed = trained
            .models
            .iter()
            .map(|(s, m)| Ok((*s, recall_at_k(m, &self.test, &DEFAULT_KS)?)))
            .collect::<Result<Vec<_>>>()?;
        let scores: Vec<RetrievalScores> = per_seed.iter().map(|(_, s)| s.clone()).collect();
        Ok(Evaluation {
            mean: RetrievalScores::mean(&scores)?,
            per_seed,
            failures: trained.failures,
        })
    }
}

/// The selection that seeds distillation: the first expert's last report.
pub fn seed_selection(runs: &[ExpertRun]) -> Option<&SelectionReport> {
    runs.first().and_then(|r| r.report.as_ref())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    /// All outputs already existed.
    UpToDate,
}

#[derive(Serialize, Deserialize)]
struct VersionStamp {
    version: String,
    git: String,
}

/// Layout of one run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    /// `<root>/<run.id>`, where the root comes from the environment when set.
    pub fn for_config(config: &RunConfig) -> Self {
        let root = std::env::var_os(RUN_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(&config.root));
        Self::new(root.join(&config.run_id))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn version(&self) -> PathBuf {
        self.root.join("version.json")
    }

    pub fn train(&self) -> PathBuf {
        self.root.join("data/train.mdwb")
    }

    pub fn test(&self) -> PathBuf {
        self.root.join("data/test.mdwb")
    }

    pub fn expert(&self, i: usize) -> PathBuf {
        self.root.join(format!("experts/expert_{i}.mdwt"))
    }

    pub fn expert_metrics(&self) -> PathBuf {
        self.root.join("experts/metrics.csv")
    }

    pub fn selection(&self) -> PathBuf {
        self.root.join("experts/selection.json")
    }

    pub fn similarities(&self) -> PathBuf {
        self.root.join("experts/similarities.json")
    }

    pub fn distilled(&self) -> PathBuf {
        self.root.join("distill/distilled.mdwb")
    }

    /// Last finite state of an aborted distillation.
    pub fn distilled_partial(&self) -> PathBuf {
        self.root.join("distill/distilled.partial.mdwb")
    }

    pub fn distill_loss(&self) -> PathBuf {
        self.root.join("distill/loss.csv")
    }

    pub fn scores(&self) -> PathBuf {
        self.root.join("eval/scores.csv")
    }

    pub fn diagnostics(&self) -> PathBuf {
        self.root.join("eval/diagnostics.json")
    }

    /// Writes the config echo and version stamp, or checks that an existing
    /// echo matches `config`.
    pub fn prepare(&self, config: &RunConfig, force: bool) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(io_err(&self.root))?;
        let echo = config.to_json()?;
        let path = self.config();
        match fs::read_to_string(&path) {
            Ok(existing) if existing == echo => {}
            Ok(_) if !force => {
                return Err(Error::Config(format!(
                    "{} holds a different configuration; pass --force or choose another run.id",
                    self.root.display()
                )))
            }
            Ok(_) => write(&path, echo.as_bytes())?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => write(&path, echo.as_bytes())?,
            Err(e) => return Err(Error::Io { path, source: e }),
        }
        let stamp = VersionStamp {
            version: env!("CARGO_PKG_VERSION").to_string(),
            git: git_describe(),
        };
        write(&self.version(), serde_json::to_string_pretty(&stamp)?.as_bytes())
    }

    fn require(&self, path: &Path, producer: &str) -> Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(Error::MissingArtifact {
                path: path.to_path_buf(),
                hint: format!("run `mdw {producer}` first"),
            })
        }
    }
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write(path, serde_json::to_string_pretty(value)?.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}

/// Decides whether a stage must run given its outputs.
fn should_run(outputs: &[PathBuf], force: bool) -> Result<bool> {
    let present = outputs.iter().filter(|p| p.exists()).count();
    if force || present == 0 {
        return Ok(true);
    }
    if present == outputs.len() {
        return Ok(false);
    }
    let missing: Vec<_> = outputs.iter().filter(|p| !p.exists()).map(|p| p.display().to_string()).collect();
    Err(Error::Config(format!(
        "incomplete stage outputs (missing {}); pass --force to rebuild",
        missing.join(", ")
    )))
}

fn load_experiment(config: &RunConfig, dir: &RunDir) -> Result<Experiment> {
    dir.require(&dir.train(), "gen-data")?;
    dir.require(&dir.test(), "gen-data")?;
    Experiment::from_data(config, load_dataset(dir.train())?, load_dataset(dir.test())?)
}

pub fn gen_data(config: &RunConfig, dir: &RunDir, force: bool) -> Result<StageStatus> {
    dir.prepare(config, force)?;
    if !should_run(&[dir.train(), dir.test()], force)? {
        return Ok(StageStatus::UpToDate);
    }
    let exp = Experiment::generate(config)?;
    for (d, path) in [(&exp.train, dir.train()), (&exp.test, dir.test())] {
        save_dataset(d, &path)?;
        write_manifest(&path, "MDWB", &config.world_params())?;
    }
    log::info!(
        "generated {} training pairs ({} noisy) and {} test pairs",
        exp.train.len(),
        exp.train.noisy_count(),
        exp.test.len()
    );
    Ok(StageStatus::Ran)
}

/// Per-epoch expert metrics as CSV rows.
pub fn expert_rows(run_id: &str, runs: &[ExpertRun]) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for (i, run) in runs.iter().enumerate() {
        let stage = format!("expert-{i}");
        for e in &run.epochs {
            let mut push = |metric: &str, value: f64| rows.push(MetricRow::new(run_id, &stage, e.epoch, metric, value));
            push("mean_loss", e.mean_loss);
            if let Some(v) = e.val_rsum {
                push("val_rsum", v);
            }
            push("consensus_size", e.consensus_size as f64);
            push("precision", e.precision);
            push("recall", e.recall);
            push("similarity_gap", e.similarity_gap);
        }
    }
    rows
}

pub fn train_expert_stage(config: &RunConfig, dir: &RunDir, force: bool) -> Result<StageStatus> {
    dir.prepare(config, force)?;
    let mut outputs: Vec<PathBuf> = (0..config.experts).map(|i| dir.expert(i)).collect();
    outputs.extend([dir.expert_metrics(), dir.similarities()]);
    if config.use_filtration {
        outputs.push(dir.selection());
    }
    if !should_run(&outputs, force)? {
        return Ok(StageStatus::UpToDate);
    }
    let exp = load_experiment(config, dir)?;
    let runs = exp.train_experts()?;
    for (i, run) in runs.iter().enumerate() {
        run.trajectory.save(dir.expert(i))?;
    }
    write_metrics_csv(dir.expert_metrics(), &expert_rows(&config.run_id, &runs))?;
    write_json(&dir.similarities(), &runs[0].similarity_history)?;
    if let Some(report) = seed_selection(&runs) {
        write(&dir.selection(), report.to_json()?.as_bytes())?;
    }
    Ok(StageStatus::Ran)
}

pub fn distill_stage(config: &RunConfig, dir: &RunDir, force: bool) -> Result<StageStatus> {
    dir.prepare(config, force)?;
    if !should_run(&[dir.distilled(), dir.distill_loss()], force)? {
        return Ok(StageStatus::UpToDate);
    }
    let exp = load_experiment(config, dir)?;
    let trajectories = (0..config.experts)
        .map(|i| {
            dir.require(&dir.expert(i), "train-expert")?;
            Trajectory::load(dir.expert(i))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = if config.use_filtration {
        dir.require(&dir.selection(), "train-expert")?;
        let text = fs::read_to_string(dir.selection()).map_err(io_err(dir.selection()))?;
        Some(SelectionReport::from_json(&text)?)
    } else {
        None
    };
    let init = exp.initial_distilled(report.as_ref())?;
    let outcome = match exp.distill(&trajectories, init) {
        Ok(o) => o,
        Err(Error::DistillAborted { step, last_good }) => {
            save_distilled(&last_good, dir.distilled_partial())?;
            return Err(Error::DistillAborted { step, last_good });
        }
        Err(e) => return Err(e),
    };
    save_distilled(&outcome.distilled, dir.distilled())?;
    write_manifest(dir.distilled(), "MDWB", &config.distill_config())?;
    let mut rows: Vec<MetricRow> = outcome
        .losses
        .iter()
        .enumerate()
        .map(|(s, &l)| MetricRow::new(&config.run_id, "distill", s, "matching_loss", l))
        .collect();
    let last = config.distill_steps;
    rows.push(MetricRow::new(&config.run_id, "distill", last, "student_lr", outcome.distilled.lr()));
    rows.push(MetricRow::new(&config.run_id, "distill", last, "skipped_segments", outcome.skipped as f64));
    if let Some(ceo) = &outcome.ceo {
        rows.push(MetricRow::new(&config.run_id, "distill", last, "min_pixel_weight", ceo.min_weight()));
    }
    write_metrics_csv(dir.distill_loss(), &rows)?;
    Ok(StageStatus::Ran)
}

pub fn evaluate_stage(config: &RunConfig, dir: &RunDir, force: bool) -> Result<StageStatus> {
    dir.prepare(config, force)?;
    if !should_run(&[dir.scores(), dir.diagnostics()], force)? {
        return Ok(StageStatus::UpToDate);
    }
    let exp = load_experiment(config, dir)?;
    dir.require(&dir.distilled(), "distill")?;
    dir.require(&dir.similarities(), "train-expert")?;
    let distilled = load_distilled(dir.distilled())?;
    let eval = exp.evaluate(&distilled)?;
    let mut rows = Vec::new();
    for (seed, s) in &eval.per_seed {
        rows.extend(score_rows(&config.run_id, &format!("eval-seed-{seed}"), config.eval_epochs, s));
    }
    rows.extend(score_rows(&config.run_id, "eval", config.eval_epochs, &eval.mean));
    let history: Vec<Vec<f64>> = read_json(&dir.similarities())?;
    let histograms = history
        .iter()
        .enumerate()
        .map(|(e, sims)| similarity_histograms(sims, exp.train.noise_mask(), e + 1, config.histogram_bins))
        .collect::<Result<Vec<_>>>()?;
    let logits = &distilled.logits;
    let diagnostics = Diagnostics {
        logits: (0..logits.rows()).map(|r| logits.row_slice(r).to_vec()).collect(),
        diagonal_argmax_fraction: distilled.diagonal_argmax_fraction(),
        histograms,
    };
    export_metrics(&rows, Some(&diagnostics), dir.scores(), dir.diagnostics())?;
    log::info!("mean R_sum {:.2} over {} seeds", eval.mean.rsum, eval.per_seed.len());
    Ok(StageStatus::Ran)
}

/// Every stage in order.
pub fn run_pipeline(config: &RunConfig, dir: &RunDir, force: bool) -> Result<Vec<(&'static str, StageStatus)>> {
    Ok(vec![
        ("gen-data", gen_data(config, dir, force)?),
        ("train-expert", train_expert_stage(config, dir, force)?),
        ("distill", distill_stage(config, dir, force)?),
        ("evaluate", evaluate_stage(config, dir, force)?),
    ])
}
