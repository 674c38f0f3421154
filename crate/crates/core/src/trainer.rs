//! Epoch orchestration: base loss plus review and summary terms, two
//! backward passes, optional conflict correction, SGD with linear decay,
//! evaluation by shot bucket and the per-run artifacts.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, next_seed, split_classes, stream_rng, ClassSplit, Dataset, Shot, SplitSpec};
use crate::error::{Error, Result};
use crate::kc::{conflict_stats, cos_angle, project_if_conflict, ConflictStats, GradPair, ProjectionRule};
use crate::losses::{bsce_loss, ce_loss, soft_ce, LossOutput};
use crate::matrix::{argmax, Matrix};
use crate::nn::{backward, forward, ModelParams, Sgd};
use crate::par::Execution;
use crate::reflect::{
    per_class_adjacent_kl, reconstruct_labels, review_batch_loss, similarity_matrix, write_matrix_csv,
    EpochCache, FeatureStore, ReviewKind, SoftLabels,
};

/// RNG stream ids under the run seed.
pub const INIT_STREAM: u64 = 10;
pub const SHUFFLE_STREAM: u64 = 11;
pub const AUGMENT_STREAM: u64 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LtrLoss {
    #[default]
    Ce,
    Bsce,
}

impl LtrLoss {
    pub fn as_str(self) -> &'static str {
        match self {
            LtrLoss::Ce => "ce",
            LtrLoss::Bsce => "bsce",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub ltr_loss: LtrLoss,
    pub use_kr: bool,
    pub use_ks: bool,
    pub use_kc: bool,
    /// Replace the distillation review term by logit MSE.
    pub use_mse_ablation: bool,
    pub tau: f64,
    pub alpha: f64,
    pub normalize_soft_labels: bool,
    /// Use the cosine-scaled projection coefficient instead of the orthogonal one.
    pub literal_projection: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden_dim: usize,
    pub lr: f64,
    pub momentum: f64,
    pub sigma_aug: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            ltr_loss: LtrLoss::Ce,
            use_kr: false,
            use_ks: false,
            use_kc: false,
            use_mse_ablation: false,
            tau: 2.0,
            alpha: 0.9,
            normalize_soft_labels: false,
            literal_projection: false,
            epochs: 60,
            batch_size: 64,
            hidden_dim: 64,
            lr: 0.1,
            momentum: 0.9,
            sigma_aug: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// All three reflective components on top of `ltr`.
    pub fn reflective(ltr: LtrLoss) -> Self {
        Self {
            ltr_loss: ltr,
            use_kr: true,
            use_ks: true,
            use_kc: true,
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.use_kr && self.use_mse_ablation {
            return Err(Error::Parameter(
                "the MSE review ablation replaces the distillation review; enable only one".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Parameter(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.tau >= 1.0 && self.tau.is_finite()) {
            return Err(Error::Parameter(format!("tau must be >= 1, got {}", self.tau)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Parameter("epochs and batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Parameter(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Parameter(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.sigma_aug >= 0.0 && self.sigma_aug.is_finite()) {
            return Err(Error::Parameter(format!("sigma_aug must be >= 0, got {}", self.sigma_aug)));
        }
        if self.use_ks && self.hidden_dim == 0 {
            return Err(Error::Parameter(
                "knowledge summary needs rectified features; use a hidden layer (--hidden > 0)".into(),
            ));
        }
        Ok(())
    }

    fn review_kind(&self) -> Option<ReviewKind> {
        if self.use_kr {
            Some(ReviewKind::Distill)
        } else if self.use_mse_ablation {
            Some(ReviewKind::LogitMse)
        } else {
            None
        }
    }

    fn projection_rule(&self) -> ProjectionRule {
        if self.literal_projection {
            ProjectionRule::LiteralCosine
        } else {
            ProjectionRule::Orthogonal
        }
    }
}

/// Everything one optimisation step produced, handed to an epoch observer.
#[derive(Debug)]
pub struct BatchTrace<'a> {
    pub epoch: usize,
    pub batch: usize,
    pub indices: &'a [usize],
    pub review: &'a LossOutput,
    pub summary: &'a LossOutput,
    pub ltr: &'a LossOutput,
    pub loss_total: f64,
    pub g_ltr: &'a [f64],
    pub g_aux: Option<&'a [f64]>,
    pub update: &'a [f64],
    pub conflicted: bool,
    pub conflicts: Option<&'a ConflictStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss_ltr: f64,
    pub loss_kr: f64,
    pub loss_ks: f64,
    /// Mean per-batch fraction of conflicting layers (0 when no auxiliary gradient).
    pub conflict_fraction: f64,
    /// Per layer: fraction of batches in which the layer conflicted.
    pub layer_conflict_rate: Vec<(String, f64)>,
    /// Batches whose whole-vector gradients conflicted.
    pub conflicted_batches: usize,
    pub batches: usize,
    /// Smallest cosine between the applied correction and the base gradient
    /// over projected steps; `None` when correction is off or never applied.
    pub min_aux_alignment: Option<f64>,
}

pub struct Trainer {
    cfg: TrainConfig,
    params: ModelParams,
    opt: Sgd,
    cache: Option<EpochCache>,
    soft_labels: Option<SoftLabels>,
    similarity: Option<Matrix>,
    epoch: usize,
    step: usize,
    total_steps: usize,
    class_counts: Vec<usize>,
    samples: usize,
    shuffle_rng: ChaCha8Rng,
    aug_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, train: &Dataset) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::Parameter("empty training set".into()));
        }
        let params = ModelParams::init(
            train.dim(),
            cfg.hidden_dim,
            train.classes(),
            &mut stream_rng(cfg.seed, INIT_STREAM),
        )?;
        let opt = Sgd::new(params.num_params(), cfg.momentum)?;
        let batches = train.len().div_ceil(cfg.batch_size);
        Ok(Self {
            total_steps: batches * cfg.epochs,
            shuffle_rng: stream_rng(cfg.seed, SHUFFLE_STREAM),
            aug_rng: stream_rng(cfg.seed, AUGMENT_STREAM),
            class_counts: train.class_counts().to_vec(),
            samples: train.len(),
            cfg,
            params,
            opt,
            cache: None,
            soft_labels: None,
            similarity: None,
            epoch: 0,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn cache(&self) -> Option<&EpochCache> {
        self.cache.as_ref()
    }

    /// Replaces the previous-epoch cache, e.g. to inject a constructed one.
    pub fn set_cache(&mut self, cache: EpochCache) -> Result<()> {
        cache
            .logits()
            .ensure_shape("Trainer::set_cache", self.samples, self.params.classes())?;
        self.cache = Some(cache);
        Ok(())
    }

    pub fn soft_labels(&self) -> Option<&SoftLabels> {
        self.soft_labels.as_ref()
    }

    /// Cosine similarity of the last epoch's median class centers.
    pub fn similarity(&self) -> Option<&Matrix> {
        self.similarity.as_ref()
    }

    /// Learning rate for the current step, decayed linearly toward zero.
    pub fn current_lr(&self) -> f64 {
        self.cfg.lr * (1.0 - self.step as f64 / self.total_steps as f64)
    }

    pub fn train_epoch(&mut self, train: &Dataset) -> Result<EpochStats> {
        self.train_epoch_observed(train, |_| {})
    }

    pub fn train_epoch_observed<F>(&mut self, train: &Dataset, mut observe: F) -> Result<EpochStats>
    where
        F: FnMut(&BatchTrace<'_>),
    {
        if train.len() != self.samples || train.class_counts() != self.class_counts.as_slice() {
            return Err(Error::State("training set differs from the one the trainer was built for".into()));
        }
        let cfg = self.cfg.clone();
        let classes = self.params.classes();
        let spans = self.params.layer_spans();
        let review_kind = cfg.review_kind();
        let rule = cfg.projection_rule();

        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.shuffle_rng);

        let mut next_cache = EpochCache::new(train.len(), classes, self.epoch);
        let mut store = FeatureStore::new(classes, self.params.feature_dim());

        let mut sums = (0.0, 0.0, 0.0);
        let mut fraction_sum = 0.0;
        let mut aux_batches = 0usize;
        let mut layer_hits = vec![0usize; spans.len()];
        let mut conflicted_batches = 0;
        let mut min_alignment: Option<f64> = None;
        let mut batches = 0;

        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels()[i]).collect();
            let clean = train.features().gather_rows(idx);
            let x = augment(&clean, cfg.sigma_aug, next_seed(&mut self.aug_rng));
            let rec = forward(&self.params, &x)?;

            let ltr = match cfg.ltr_loss {
                LtrLoss::Ce => ce_loss(&rec.logits, &labels)?,
                LtrLoss::Bsce => bsce_loss(&rec.logits, &labels, &self.class_counts)?,
            };
            let (rows, cols) = rec.logits.shape();
            let review = match (review_kind, self.cache.as_ref()) {
                (Some(kind), Some(cache)) => {
                    Some(review_batch_loss(Some(cache), idx, &rec.logits, cfg.tau, kind)?)
                }
                _ => None,
            };
            let summary = match (cfg.use_ks, self.soft_labels.as_ref()) {
                (true, Some(sl)) => Some(soft_ce(&rec.logits, &sl.targets_for(&labels))?),
                _ => None,
            };
            let aux_active = review.is_some() || summary.is_some();
            let review = review.unwrap_or_else(|| LossOutput::zero(rows, cols));
            let summary = summary.unwrap_or_else(|| LossOutput::zero(rows, cols));
            for (name, v) in [("ltr", ltr.value), ("kr", review.value), ("ks", summary.value)] {
                if !v.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite {name} loss {v} at epoch {}, batch {b}",
                        self.epoch
                    )));
                }
            }

            let g_ltr = backward(&self.params, &rec, &ltr.dlogits)?;
            let mut g_aux = None;
            let mut stats = None;
            let mut conflicted = false;
            let update = if aux_active {
                let aux = backward(&self.params, &rec, &review.dlogits.add(&summary.dlogits)?)?;
                let pair = GradPair::new(g_ltr.clone(), aux, spans.clone())?;
                let s = conflict_stats(&pair);
                fraction_sum += s.fraction;
                aux_batches += 1;
                for (hit, (_, c)) in layer_hits.iter_mut().zip(&s.per_layer) {
                    *hit += usize::from(*c);
                }
                let update = if cfg.use_kc {
                    let proj = project_if_conflict(&pair.g_ltr, &pair.g_aux, rule);
                    if proj.conflicted {
                        let a = cos_angle(&proj.g_aux_hat, &pair.g_ltr);
                        min_alignment = Some(min_alignment.map_or(a, |m: f64| m.min(a)));
                    }
                    conflicted = proj.conflicted;
                    proj.g_rl
                } else {
                    conflicted = cos_angle(&pair.g_aux, &pair.g_ltr) < 0.0;
                    pair.g_aux.iter().zip(&pair.g_ltr).map(|(a, b)| a + b).collect()
                };
                g_aux = Some(pair.g_aux);
                stats = Some(s);
                update
            } else {
                g_ltr.clone()
            };
            conflicted_batches += usize::from(conflicted);

            observe(&BatchTrace {
                epoch: self.epoch,
                batch: b,
                indices: idx,
                review: &review,
                summary: &summary,
                ltr: &ltr,
                loss_total: ltr.value + review.value + summary.value,
                g_ltr: &g_ltr,
                g_aux: g_aux.as_deref(),
                update: &update,
                conflicted,
                conflicts: stats.as_ref(),
            });

            let lr = self.current_lr();
            self.opt.step(&mut self.params, &update, lr).map_err(|e| {
                Error::Numeric(format!("epoch {}, batch {b}: {e}", self.epoch))
            })?;
            self.step += 1;

            next_cache.update(idx, &rec.logits, &labels)?;
            store.push_batch(&rec.features, &labels)?;

            sums.0 += ltr.value;
            sums.1 += review.value;
            sums.2 += summary.value;
            batches += 1;
        }

        self.cache = Some(next_cache);
        let centers = store.drain_centers();
        let sim = similarity_matrix(&centers)?;
        if cfg.use_ks {
            self.soft_labels = Some(reconstruct_labels(&sim, cfg.alpha, cfg.normalize_soft_labels)?);
        }
        self.similarity = Some(sim);

        let nb = batches as f64;
        let stats = EpochStats {
            epoch: self.epoch,
            loss_ltr: sums.0 / nb,
            loss_kr: sums.1 / nb,
            loss_ks: sums.2 / nb,
            conflict_fraction: if aux_batches > 0 { fraction_sum / aux_batches as f64 } else { 0.0 },
            layer_conflict_rate: spans
                .iter()
                .zip(&layer_hits)
                .map(|(s, &h)| (s.name.clone(), if aux_batches > 0 { h as f64 / aux_batches as f64 } else { 0.0 }))
                .collect(),
            conflicted_batches,
            batches,
            min_aux_alignment: min_alignment,
        };
        self.epoch += 1;
        Ok(stats)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub all: f64,
    pub many: f64,
    pub medium: f64,
    pub few: f64,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub accuracy: Accuracy,
    pub logits: Matrix,
}

/// Accuracy of arbitrary logits against labels, bucketed by `split`.
///
/// Empty buckets report NaN. `all` is over samples, not a mean of buckets.
pub fn accuracy_from_logits(logits: &Matrix, labels: &[usize], split: &ClassSplit) -> Result<Accuracy> {
    if labels.is_empty() {
        return Err(Error::Parameter("empty test set".into()));
    }
    if labels.len() != logits.rows() {
        return Err(Error::dim("accuracy labels", logits.rows(), labels.len()));
    }
    let buckets = split.per_class();
    let mut hit = [0usize; 3];
    let mut tot = [0usize; 3];
    let mut all = 0usize;
    for (row, &y) in logits.row_iter().zip(labels) {
        let ok = argmax(row) == y;
        all += usize::from(ok);
        let k = match buckets.get(y) {
            Some(Shot::Many) => 0,
            Some(Shot::Medium) => 1,
            Some(Shot::Few) => 2,
            None => return Err(Error::Parameter(format!("label {y} missing from class split"))),
        };
        hit[k] += usize::from(ok);
        tot[k] += 1;
    }
    let rate = |k: usize| if tot[k] == 0 { f64::NAN } else { hit[k] as f64 / tot[k] as f64 };
    Ok(Accuracy {
        all: all as f64 / labels.len() as f64,
        many: rate(0),
        medium: rate(1),
        few: rate(2),
    })
}

/// Top-1 accuracy overall and per shot bucket.
pub fn evaluate(params: &ModelParams, test: &Dataset, split: &ClassSplit) -> Result<Evaluation> {
    if test.is_empty() {
        return Err(Error::Parameter("empty test set".into()));
    }
    let logits = forward(params, test.features())?.logits;
    let accuracy = accuracy_from_logits(&logits, test.labels(), split)?;
    Ok(Evaluation { accuracy, logits })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub acc_all: f64,
    pub acc_many: f64,
    pub acc_medium: f64,
    pub acc_few: f64,
    pub loss_ltr: f64,
    pub loss_kr: f64,
    pub loss_ks: f64,
    pub conflict_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct RunRecord {
    pub metrics: Vec<EpochMetrics>,
    pub stats: Vec<EpochStats>,
    /// Per-class adjacent-epoch KL on the test set, for epochs 1..
    pub class_kl: Vec<Vec<Option<f64>>>,
    pub similarity: Option<Matrix>,
    pub params: ModelParams,
}

impl RunRecord {
    pub fn last(&self) -> &EpochMetrics {
        self.metrics.last().expect("at least one epoch")
    }
}

/// Trains for `cfg.epochs` epochs, evaluating after each.
pub fn run(cfg: &TrainConfig, train: &Dataset, test: &Dataset) -> Result<RunRecord> {
    if test.classes() != train.classes() || test.dim() != train.dim() {
        return Err(Error::Parameter(format!(
            "test set shape ({} classes, dim {}) differs from training set ({} classes, dim {})",
            test.classes(),
            test.dim(),
            train.classes(),
            train.dim()
        )));
    }
    let split = split_classes(train.class_counts(), SplitSpec::default());
    let mut trainer = Trainer::new(cfg.clone(), train)?;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut stats = Vec::with_capacity(cfg.epochs);
    let mut class_kl = Vec::new();
    let mut prev_logits: Option<Matrix> = None;
    for _ in 0..cfg.epochs {
        let s = trainer.train_epoch(train)?;
        let eval = evaluate(trainer.params(), test, &split)?;
        if let Some(prev) = &prev_logits {
            class_kl.push(per_class_adjacent_kl(prev, &eval.logits, test.labels(), test.classes(), 1.0)?);
        }
        metrics.push(EpochMetrics {
            epoch: s.epoch,
            acc_all: eval.accuracy.all,
            acc_many: eval.accuracy.many,
            acc_medium: eval.accuracy.medium,
            acc_few: eval.accuracy.few,
            loss_ltr: s.loss_ltr,
            loss_kr: s.loss_kr,
            loss_ks: s.loss_ks,
            conflict_fraction: s.conflict_fraction,
        });
        stats.push(s);
        prev_logits = Some(eval.logits);
    }
    Ok(RunRecord {
        metrics,
        stats,
        class_kl,
        similarity: trainer.similarity().cloned(),
        params: trainer.params().clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub train_name: String,
    pub test_name: String,
    pub epochs: usize,
    pub config: TrainConfig,
    pub final_metrics: EpochMetrics,
    pub best_acc_all: f64,
}

pub const METRICS_HEADER: &str =
    "epoch,acc_all,acc_many,acc_medium,acc_few,loss_ltr,loss_kr,loss_ks,conflict_fraction";

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes metrics.csv, conflicts.csv, class_kl.csv, similarity.csv and summary.json.
pub fn write_run_artifacts(out_dir: &Path, record: &RunRecord, summary: &Summary) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for m in &record.metrics {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            m.epoch, m.acc_all, m.acc_many, m.acc_medium, m.acc_few, m.loss_ltr, m.loss_kr, m.loss_ks,
            m.conflict_fraction
        );
    }
    write_file(&out_dir.join("metrics.csv"), &s)?;

    let mut s = String::from("epoch,layer_name,conflicted,fraction\n");
    for st in &record.stats {
        for (name, rate) in &st.layer_conflict_rate {
            let _ = writeln!(s, "{},{},{},{}", st.epoch, name, u8::from(*rate >= 0.5), st.conflict_fraction);
        }
    }
    write_file(&out_dir.join("conflicts.csv"), &s)?;

    let classes = record.params.classes();
    let mut s = String::from("epoch");
    for c in 0..classes {
        let _ = write!(s, ",{c}");
    }
    s.push('\n');
    for (k, row) in record.class_kl.iter().enumerate() {
        let _ = write!(s, "{}", k + 1);
        for v in row {
            match v {
                Some(v) => {
                    let _ = write!(s, ",{v}");
                }
                None => s.push(','),
            }
        }
        s.push('\n');
    }
    write_file(&out_dir.join("class_kl.csv"), &s)?;

    if let Some(sim) = &record.similarity {
        write_matrix_csv(&out_dir.join("similarity.csv"), sim)?;
    }

    let json = serde_json::to_string_pretty(summary)
        .map_err(|e| Error::State(format!("cannot serialise summary: {e}")))?;
    write_file(&out_dir.join("summary.json"), &(json + "\n"))
}

/// Loads both datasets, trains, and writes all artifacts under `out_dir`.
pub fn run_experiment(
    cfg: &TrainConfig,
    train_path: &Path,
    test_path: &Path,
    out_dir: &Path,
) -> Result<Summary> {
    let train = Dataset::load(train_path)?;
    let test = Dataset::load(test_path)?;
    let record = run(cfg, &train, &test)?;
    let summary = summarize(cfg, &train, &test, &record);
    write_run_artifacts(out_dir, &record, &summary)?;
    Ok(summary)
}

pub fn summarize(cfg: &TrainConfig, train: &Dataset, test: &Dataset, record: &RunRecord) -> Summary {
    Summary {
        train_name: train.name().to_string(),
        test_name: test.name().to_string(),
        epochs: record.metrics.len(),
        config: cfg.clone(),
        final_metrics: record.last().clone(),
        best_acc_all: record.metrics.iter().map(|m| m.acc_all).fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Default location of the balanced test set written next to a training file.
pub fn sibling_test_path(train_path: &Path) -> PathBuf {
    let stem = train_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "train".into());
    train_path.with_file_name(format!("{stem}.test.ltds"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationCell {
    pub use_kr: bool,
    pub use_ks: bool,
    pub use_kc: bool,
    pub acc_all: f64,
    pub acc_many: f64,
    pub acc_medium: f64,
    pub acc_few: f64,
    pub per_seed_acc_all: Vec<f64>,
}

impl AblationCell {
    pub fn components(&self) -> usize {
        usize::from(self.use_kr) + usize::from(self.use_ks) + usize::from(self.use_kc)
    }
}

/// The eight on/off combinations of review, summary and correction.
pub fn ablation_configs(base: &TrainConfig) -> Vec<TrainConfig> {
    (0..8u8)
        .map(|bits| TrainConfig {
            use_kr: bits & 1 != 0,
            use_ks: bits & 2 != 0,
            use_kc: bits & 4 != 0,
            use_mse_ablation: false,
            ..base.clone()
        })
        .collect()
}

/// Runs every grid cell for every `(train, test, seed)` job and averages final metrics.
pub fn ablation_grid(base: &TrainConfig, jobs: &[(&Dataset, &Dataset, u64)]) -> Result<Vec<AblationCell>> {
    if jobs.is_empty() {
        return Err(Error::Parameter("ablation needs at least one seed".into()));
    }
    let cells = ablation_configs(base);
    let results = Execution::default().map(cells.len() * jobs.len(), |k| {
        let (cell, job) = (k / jobs.len(), k % jobs.len());
        let (train, test, seed) = jobs[job];
        run(&cells[cell].clone().with_seed(seed), train, test).map(|r| r.last().clone())
    });
    let results: Vec<EpochMetrics> = results.into_iter().collect::<Result<_>>()?;
    let n = jobs.len() as f64;
    Ok(cells
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let ms = &results[i * jobs.len()..(i + 1) * jobs.len()];
            let mean = |f: fn(&EpochMetrics) -> f64| ms.iter().map(f).sum::<f64>() / n;
            AblationCell {
                use_kr: c.use_kr,
                use_ks: c.use_ks,
                use_kc: c.use_kc,
                acc_all: mean(|m| m.acc_all),
                acc_many: mean(|m| m.acc_many),
                acc_medium: mean(|m| m.acc_medium),
                acc_few: mean(|m| m.acc_few),
                per_seed_acc_all: ms.iter().map(|m| m.acc_all).collect(),
            }
        })
        .collect())
}
