//! Training students on distilled pairs and scoring retrieval.

use std::fs;
use std::path::Path;

use mdw_numeric::{Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{DistilledDataset, RealDataset};
use crate::encoders::{similarity_matrix, EncoderPair, Model};
use crate::error::{at_step, contract, io_err, Error, Result};
use crate::losses::{loss_correspondence, loss_mae, loss_noncorrespondence, Labels};

/// Recall cutoffs reported by default.
pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

/// Which loss terms train a student on distilled pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentLoss {
    /// Soft labels from the matching logits instead of one-hot targets.
    pub soft_labels: bool,
    pub use_ln: bool,
    pub use_mae: bool,
    pub tau: f64,
}

impl Default for StudentLoss {
    fn default() -> Self {
        Self {
            soft_labels: true,
            use_ln: true,
            use_mae: false,
            tau: crate::encoders::DEFAULT_TAU,
        }
    }
}

impl StudentLoss {
    /// Student loss on a batch of distilled rows.
    pub(crate) fn build(
        &self,
        g: &Graph,
        pair: &EncoderPair,
        params: &[Var],
        images: Var,
        texts: Var,
        logits: Option<Var>,
    ) -> Result<Var> {
        let img = pair.encode_image(g, params, images)?;
        let txt = pair.encode_text(g, texts)?;
        let h = similarity_matrix(g, img.embeddings, txt)?;
        let b = g.shape(h)[0];
        let labels = match logits {
            Some(l) if self.soft_labels => Labels::soft(g, l, self.tau)?,
            _ => Labels::hard(g, b)?,
        };
        let mut loss = loss_correspondence(g, h, &labels, self.tau)?;
        if self.use_ln {
            loss = g.add(loss, loss_noncorrespondence(g, h, self.tau)?)?;
        }
        if self.use_mae {
            loss = g.add(loss, loss_mae(g, h, &labels, self.tau)?)?;
        }
        Ok(loss)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: StudentLoss,
}

impl Default for StudentConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 20,
            loss: StudentLoss::default(),
        }
    }
}

/// Trains one fresh model on distilled pairs with the distilled learning rate.
pub fn train_student(
    pair: &EncoderPair,
    distilled: &DistilledDataset,
    seed: u64,
    config: &StudentConfig,
) -> Result<Model> {
    let mut params = pair.image.init_params(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_57u64);
    let m = distilled.len();
    let batch = config.batch_size.min(m).max(1);
    let lr = distilled.lr();
    let mut step = 0;
    for _ in 0..config.epochs {
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let g = Graph::new();
            let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
            let images = g.constant(distilled.images.clone());
            let images = g.select_rows(images, chunk)?;
            let texts = g.select_rows(g.constant(distilled.texts.clone()), chunk)?;
            let logits = g.select(g.constant(distilled.logits.clone()), chunk, chunk)?;
            let grads = config
                .loss
                .build(&g, pair, &vars, images, texts, Some(logits))
                .and_then(|loss| Ok(g.grads(loss, &vars)?))
                .map_err(at_step("student", step))?;
            for (p, gr) in params.iter_mut().zip(&grads) {
                *p = p.zip_map(gr, |a, b| a - lr * b)?;
            }
            if params.iter().any(|p| !p.is_finite()) {
                return Err(Error::NonFiniteLoss { stage: "student", step });
            }
            step += 1;
        }
    }
    Model::new(pair.clone(), params)
}

/// Objective of a probe trained directly on real, possibly noisy pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeLoss {
    /// Cross-entropy towards the given pairing.
    Correspondence,
    /// Negative-match loss only.
    Noncorrespondence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub loss: ProbeLoss,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub tau: f64,
}

/// Plain minibatch SGD of a fresh encoder on every pair of `dataset`,
/// noisy ones included.
pub fn train_probe(pair: &EncoderPair, dataset: &RealDataset, config: &ProbeConfig, seed: u64) -> Result<Model> {
    let n = dataset.len();
    if config.batch_size < 2 || config.batch_size > n {
        return contract(format!("probe batch size {} outside 2..={n}", config.batch_size));
    }
    let mut params = pair.image.init_params(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9b0b_e5u64);
    let mut step = 0;
    for _ in 0..config.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks_exact(config.batch_size) {
            let g = Graph::new();
            let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
            let grads = (|| -> Result<Vec<Tensor>> {
                let images = g.constant(dataset.paired_images(chunk)?);
                let texts = g.constant(dataset.text_rows(chunk)?);
                let img = pair.encode_image(&g, &vars, images)?.embeddings;
                let h = similarity_matrix(&g, img, pair.encode_text(&g, texts)?)?;
                let loss = match config.loss {
                    ProbeLoss::Correspondence => {
                        loss_correspondence(&g, h, &Labels::hard(&g, chunk.len())?, config.tau)?
                    }
                    ProbeLoss::Noncorrespondence => loss_noncorrespondence(&g, h, config.tau)?,
                };
                Ok(g.grads(loss, &vars)?)
            })()
            .map_err(at_step("probe", step))?;
            for (p, gr) in params.iter_mut().zip(&grads) {
                *p = p.zip_map(gr, |a, b| a - config.lr * b)?;
            }
            if params.iter().any(|p| !p.is_finite()) {
                return Err(Error::NonFiniteLoss { stage: "probe", step });
            }
            step += 1;
        }
    }
    Model::new(pair.clone(), params)
}

/// Models trained from scratch, one per seed, plus seeds that failed.
#[derive(Debug)]
pub struct TrainedSeeds {
    pub models: Vec<(u64, Model)>,
    pub failures: Vec<(u64, String)>,
}

/// Trains one student per seed in parallel. A seed whose loss turns
/// non-finite is reported in `failures`.
pub fn train_from_scratch(
    pair: &EncoderPair,
    distilled: &DistilledDataset,
    seeds: &[u64],
    config: &StudentConfig,
) -> TrainedSeeds {
    let results: Vec<(u64, Result<Model>)> = seeds
        .par_iter()
        .map(|&s| (s, train_student(pair, distilled, s, config)))
        .collect();
    let mut out = TrainedSeeds {
        models: Vec::new(),
        failures: Vec::new(),
    };
    for (s, r) in results {
        match r {
            Ok(m) => out.models.push((s, m)),
            Err(e) => {
                log::warn!("student seed {s} aborted: {e}");
                out.failures.push((s, e.to_string()));
            }
        }
    }
    out
}

/// Recall at each cutoff in both directions, as percentages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalScores {
    pub ks: Vec<usize>,
    pub i2t: Vec<f64>,
    pub t2i: Vec<f64>,
    pub rsum: f64,
}

impl RetrievalScores {
    /// Element-wise mean of several score sets with the same cutoffs.
    pub fn mean(scores: &[RetrievalScores]) -> Result<Self> {
        let Some(first) = scores.first() else {
            return contract("no scores to average");
        };
        if scores.iter().any(|s| s.ks != first.ks) {
            return contract("score sets use different cutoffs");
        }
        let n = scores.len() as f64;
        let avg = |f: &dyn Fn(&RetrievalScores) -> &Vec<f64>| -> Vec<f64> {
            (0..first.ks.len())
                .map(|k| scores.iter().map(|s| f(s)[k]).sum::<f64>() / n)
                .collect()
        };
        let i2t = avg(&|s| &s.i2t);
        let t2i = avg(&|s| &s.t2i);
        let rsum = i2t.iter().chain(&t2i).sum();
        Ok(Self {
            ks: first.ks.clone(),
            i2t,
            t2i,
            rsum,
        })
    }
}

/// Rank of `target` in `scores` sorted descending, ties toward lower index.
fn rank_of(scores: &[f64], target: usize) -> usize {
    let t = scores[target];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > t || (s == t && j < target))
        .count()
}

/// Recall@K from a similarity matrix whose true matches lie on the diagonal.
pub fn recall_from_similarity(sim: &Tensor, ks: &[usize]) -> Result<RetrievalScores> {
    let [n, c] = sim.shape();
    if n != c {
        return contract("similarity matrix must be square");
    }
    if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > n) {
        return contract(format!("cutoff {k} outside 1..={n}"));
    }
    let cols = sim.transpose();
    let i2t_ranks: Vec<usize> = (0..n).map(|i| rank_of(sim.row_slice(i), i)).collect();
    let t2i_ranks: Vec<usize> = (0..n).map(|j| rank_of(cols.row_slice(j), j)).collect();
    let pct = |ranks: &[usize], k: usize| 100.0 * ranks.iter().filter(|&&r| r < k).count() as f64 / n as f64;
    let i2t: Vec<f64> = ks.iter().map(|&k| pct(&i2t_ranks, k)).collect();
    let t2i: Vec<f64> = ks.iter().map(|&k| pct(&t2i_ranks, k)).collect();
    let rsum = i2t.iter().chain(&t2i).sum();
    Ok(RetrievalScores {
        ks: ks.to_vec(),
        i2t,
        t2i,
        rsum,
    })
}

/// Scores `model` on a clean test split where text `i` matches image `i`.
pub fn recall_at_k(model: &Model, test: &RealDataset, ks: &[usize]) -> Result<RetrievalScores> {
    if test.noisy_count() > 0 || test.corrupted_count() > 0 {
        return contract("test split must be clean");
    }
    let (img, txt) = model.embed(test.images(), test.texts())?;
    recall_from_similarity(&img.matmul(&txt.transpose())?, ks)
}

/// One row of the scalar metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub run_id: String,
    pub stage: String,
    pub epoch: usize,
    pub metric: String,
    pub value: f64,
}

impl MetricRow {
    pub fn new(run_id: &str, stage: &str, epoch: usize, metric: &str, value: f64) -> Self {
        Self {
            run_id: run_id.into(),
            stage: stage.into(),
            epoch,
            metric: metric.into(),
            value,
        }
    }
}

/// Column header of the metrics CSV.
pub const METRIC_COLUMNS: [&str; 5] = ["run_id", "stage", "epoch", "metric", "value"];

/// Expands retrieval scores into metric rows.
pub fn score_rows(run_id: &str, stage: &str, epoch: usize, s: &RetrievalScores) -> Vec<MetricRow> {
    let mut rows = Vec::new();
    for (k, (a, b)) in s.ks.iter().zip(s.i2t.iter().zip(&s.t2i)) {
        rows.push(MetricRow::new(run_id, stage, epoch, &format!("i2t_r{k}"), *a));
        rows.push(MetricRow::new(run_id, stage, epoch, &format!("t2i_r{k}"), *b));
    }
    rows.push(MetricRow::new(run_id, stage, epoch, "rsum", s.rsum));
    rows
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[MetricRow]) -> Result<()> {
    let path = path.as_ref();
    if let Some(v) = rows.iter().find(|r| !r.value.is_finite()) {
        return contract(format!("non-finite metric {} in {}", v.metric, v.stage));
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(METRIC_COLUMNS)?;
    for r in rows {
        w.serialize((&r.run_id, &r.stage, r.epoch, &r.metric, r.value))?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<MetricRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path)?;
    let rows: std::result::Result<Vec<MetricRow>, csv::Error> = r.deserialize().collect();
    Ok(rows?)
}

/// Fixed-width histogram over `[lo, hi]`; values outside are clamped into
/// the edge bins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(values: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Self> {
        if bins == 0 || !(hi > lo) {
            return contract("histogram needs bins > 0 and hi > lo");
        }
        let mut counts = vec![0; bins];
        for &v in values {
            let t = ((v - lo) / (hi - lo) * bins as f64).floor();
            let b = if t.is_nan() { 0 } else { (t.max(0.0) as usize).min(bins - 1) };
            counts[b] += 1;
        }
        Ok(Self { lo, hi, counts })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Similarity histograms split by the hidden noise mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityHistograms {
    pub epoch: usize,
    pub clean: Histogram,
    pub noisy: Histogram,
}

pub fn similarity_histograms(sims: &[f64], noise_mask: &[bool], epoch: usize, bins: usize) -> Result<SimilarityHistograms> {
    if sims.len() != noise_mask.len() {
        return contract("similarities and noise mask differ in length");
    }
    let pick = |noisy: bool| -> Vec<f64> {
        sims.iter()
            .zip(noise_mask)
            .filter(|(_, &n)| n == noisy)
            .map(|(&s, _)| s)
            .collect()
    };
    Ok(SimilarityHistograms {
        epoch,
        clean: Histogram::new(&pick(false), -1.0, 1.0, bins)?,
        noisy: Histogram::new(&pick(true), -1.0, 1.0, bins)?,
    })
}

/// Diagnostics written next to the scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Matching logits, row-major.
    pub logits: Vec<Vec<f64>>,
    pub diagonal_argmax_fraction: f64,
    pub histograms: Vec<SimilarityHistograms>,
}

/// Writes the metrics CSV and, when given, the diagnostics JSON.
pub fn export_metrics(
    rows: &[MetricRow],
    diagnostics: Option<&Diagnostics>,
    csv_path: impl AsRef<Path>,
    json_path: impl AsRef<Path>,
) -> Result<()> {
    write_metrics_csv(csv_path, rows)?;
    if let Some(d) = diagnostics {
        let path = json_path.as_ref();
        fs::write(path, serde_json::to_string_pretty(d)?).map_err(io_err(path))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_world, init_distilled, World, WorldParams};
    use crate::encoders::{ConvEncoder, LinearEncoder, DEFAULT_TAU};
    use std::sync::Arc;

    #[test]
    fn oracle_similarity_gives_perfect_recall() {
        let s = recall_from_similarity(&Tensor::identity(12).unwrap(), &DEFAULT_KS).unwrap();
        assert_eq!(s.i2t, vec![100.0; 3]);
        assert_eq!(s.t2i, vec![100.0; 3]);
        assert_eq!(s.rsum, 600.0);
    }

    #[test]
    fn ties_rank_lower_index_first() {
        let sim = Tensor::full([3, 3], 0.5).unwrap();
        let s = recall_from_similarity(&sim, &[1, 2, 3]).unwrap();
        let third = 100.0 / 3.0;
        assert_eq!(s.i2t, vec![third, 2.0 * third, 100.0]);
        assert!(recall_from_similarity(&sim, &[4]).is_err());
    }

    #[test]
    fn concept_one_hot_encoder_is_perfect_on_one_per_concept_test() {
        let world = World::new(WorldParams { num_concepts: 12, ..WorldParams::default() }).unwrap();
        let test = world.one_per_concept(4).unwrap();
        let onehot = Tensor::from_fn([12, 12], |i, j| (test.concepts()[i] == j) as u8 as f64).unwrap();
        let s = recall_from_similarity(&onehot.matmul(&onehot.transpose()).unwrap(), &DEFAULT_KS).unwrap();
        assert_eq!(s.rsum, 600.0);
    }

    #[test]
    fn random_encoder_is_near_chance() {
        let world = World::new(WorldParams { num_concepts: 100, ..WorldParams::default() }).unwrap();
        let test = world.one_per_concept(1).unwrap();
        let pair = EncoderPair::new(Arc::new(LinearEncoder::new([3, 16, 16], 32)), 32, 0, DEFAULT_TAU).unwrap();
        let mut r1 = Vec::new();
        for seed in 0..20 {
            let s = recall_at_k(&Model::init(pair.clone(), seed), &test, &DEFAULT_KS).unwrap();
            assert!(s.i2t.windows(2).all(|w| w[0] <= w[1]) && s.t2i.windows(2).all(|w| w[0] <= w[1]));
            r1.push(0.5 * (s.i2t[0] + s.t2i[0]));
        }
        let mean = r1.iter().sum::<f64>() / r1.len() as f64;
        assert!((0.0..=5.0).contains(&mean), "{mean}");
    }

    #[test]
    fn equal_seeds_train_identical_students() {
        let d = generate_world(4, 40, [3, 8, 8], 16, 0.1, 3).unwrap();
        let dist = init_distilled(&d, 4, 0, None).unwrap();
        let pair = EncoderPair::new(Arc::new(ConvEncoder::standard([3, 8, 8])), 16, 0, DEFAULT_TAU).unwrap();
        let cfg = StudentConfig { epochs: 3, batch_size: 4, ..StudentConfig::default() };
        let out = train_from_scratch(&pair, &dist, &[7, 7, 8], &cfg);
        assert_eq!(out.models.len(), 3);
        assert_eq!(out.models[0].1.params, out.models[1].1.params);
        assert_ne!(out.models[0].1.params, out.models[2].1.params);
        let zero = StudentConfig { epochs: 0, ..cfg };
        let untrained = train_student(&pair, &dist, 7, &zero).unwrap();
        assert_eq!(untrained.params, pair.image.init_params(7));
    }

    #[test]
    fn metrics_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = recall_from_similarity(&Tensor::identity(10).unwrap(), &DEFAULT_KS).unwrap();
        let rows = score_rows("r", "eval", 0, &s);
        let path = dir.path().join("m.csv");
        write_metrics_csv(&path, &rows).unwrap();
        assert_eq!(read_metrics_csv(&path).unwrap(), rows);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().all(|l| l.split(',').count() == METRIC_COLUMNS.len()));
        let bad = vec![MetricRow::new("r", "x", 0, "m", f64::NAN)];
        assert!(write_metrics_csv(&path, &bad).is_err());
    }

    #[test]
    fn histogram_counts_every_sample() {
        let v: Vec<f64> = (0..97).map(|i| (i as f64 / 48.0) - 1.0).collect();
        let h = Histogram::new(&v, -1.0, 1.0, 10).unwrap();
        assert_eq!(h.total(), 97);
        let sh = similarity_histograms(&v, &vec![false; 97], 1, 8).unwrap();
        assert_eq!(sh.clean.total() + sh.noisy.total(), 97);
    }
}
