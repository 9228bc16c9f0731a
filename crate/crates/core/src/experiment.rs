//! Seeded training runs and the experiments built on them.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Tape;
use crate::checkpoint::save_checkpoint;
use crate::data::{load_dataset, subsample, Dataset, Split};
use crate::error::{Error, Result};
use crate::linear::Linear;
use crate::model::{Dropout, Model, ModelSpec};
use crate::norm::{NormKind, DEFAULT_ALPHA, DEFAULT_EPS};
use crate::optim::{total_loss, Adam, AdamConfig, BetaSchedule, LossBreakdown};
use crate::rng::{SeedRng, Stream};
use crate::tensor::Tensor;

pub const DEFAULT_SEEDS: [u64; 5] = [13, 42, 71, 100, 2024];

/// Everything that determines a training run except the seed.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dataset: Option<PathBuf>,
    pub norm: NormKind,
    pub bottleneck: usize,
    /// Encoder hidden widths; `None` derives them from `d_in` and `bottleneck`.
    pub hidden: Option<Vec<usize>>,
    pub alpha: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub dropout: f64,
    pub beta0: f64,
    pub beta_cap: f64,
    /// Compute and log the KL term but keep it out of the gradient.
    pub detach_kl: bool,
    /// Stratified train-subset size, drawn per seed.
    pub subsample: Option<usize>,
    pub seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            norm: NormKind::KlNorm,
            bottleneck: 32,
            hidden: None,
            alpha: DEFAULT_ALPHA,
            eps: DEFAULT_EPS,
            epochs: 50,
            batch_size: 8,
            adam: AdamConfig::default(),
            dropout: 0.0,
            beta0: 0.01,
            beta_cap: 1.0,
            detach_kl: false,
            subsample: None,
            seeds: DEFAULT_SEEDS.to_vec(),
        }
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl TrainConfig {
    /// Every setting as `(key, value)` in a fixed order, using the config-file keys.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("dataset", self.dataset.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("norm_kind", self.norm.to_string()),
            ("model.bottleneck", self.bottleneck.to_string()),
            ("model.hidden", self.hidden.as_deref().map(join).unwrap_or_else(|| "auto".into())),
            ("model.alpha", self.alpha.to_string()),
            ("model.eps", self.eps.to_string()),
            ("train.epochs", self.epochs.to_string()),
            ("train.batch_size", self.batch_size.to_string()),
            ("train.lr", self.adam.lr.to_string()),
            ("train.adam_beta1", self.adam.beta1.to_string()),
            ("train.adam_beta2", self.adam.beta2.to_string()),
            ("train.adam_eps", self.adam.eps.to_string()),
            ("train.weight_decay", self.adam.weight_decay.to_string()),
            ("train.dropout", self.dropout.to_string()),
            ("train.beta0", self.beta0.to_string()),
            ("train.beta_cap", self.beta_cap.to_string()),
            ("train.detach_kl", self.detach_kl.to_string()),
            ("train.subsample", self.subsample.map(|n| n.to_string()).unwrap_or_else(|| "off".into())),
            ("seeds", join(&self.seeds)),
        ]
    }

    /// 16 hex digits of SHA-256 over every setting except the seed list.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if k != "seeds" {
                h.update(format!("{k}={v}\n"));
            }
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("train.dropout {} must be in [0, 1)", self.dropout)));
        }
        let a = self.adam;
        if !(a.lr > 0.0 && a.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr {} must be positive", a.lr)));
        }
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return Err(Error::Config("Adam betas must be in [0, 1)".into()));
        }
        if !(a.eps > 0.0 && a.weight_decay >= 0.0) {
            return Err(Error::Config("train.adam_eps must be > 0 and train.weight_decay >= 0".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.subsample == Some(0) {
            return Err(Error::Config("train.subsample must be positive".into()));
        }
        BetaSchedule::with_cap(self.beta0, self.beta_cap).map_err(|e| Error::Config(e.to_string()))?;
        self.model_spec(1, 2).validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn schedule(&self) -> Result<BetaSchedule> {
        BetaSchedule::with_cap(self.beta0, self.beta_cap)
    }

    pub fn model_spec(&self, d_in: usize, n_classes: usize) -> ModelSpec {
        let mut spec = ModelSpec::new(d_in, self.bottleneck, self.norm, n_classes);
        if let Some(h) = &self.hidden {
            spec.hidden = h.clone();
        }
        spec.alpha = self.alpha;
        spec.eps = self.eps;
        spec
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let path = self
            .dataset
            .as_ref()
            .ok_or_else(|| Error::Config("no dataset path given (set `dataset = <file>`)".into()))?;
        if !path.exists() {
            return Err(Error::Config(format!("dataset file {} does not exist", path.display())));
        }
        load_dataset(path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub ce: f64,
    pub kl: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Inference-mode losses on the train split after the epoch.
    pub train: LossBreakdown,
    /// Mean of the minibatch objectives minimized during the epoch.
    pub train_batch_mean: f64,
    pub dev: Option<LossBreakdown>,
    pub dev_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    /// Training stopped early; the epochs recorded before this one are kept.
    Diverged { epoch: usize, detail: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub config_digest: String,
    pub epochs: Vec<EpochRecord>,
    pub train_final: Option<EvalMetrics>,
    pub test: Option<EvalMetrics>,
    pub status: RunStatus,
    pub wallclock_secs: f64,
}

impl RunResult {
    pub fn completed(&self) -> bool {
        self.status == RunStatus::Completed
    }

    pub fn last_epoch(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    /// Copy with the wallclock zeroed, for determinism comparisons.
    pub fn without_wallclock(&self) -> Self {
        Self {
            wallclock_secs: 0.0,
            ..self.clone()
        }
    }
}

/// A finished run together with its trained model.
#[derive(Debug, Clone)]
pub struct TrainedRun {
    pub model: Model,
    pub result: RunResult,
}

/// Accuracy and macro-F1 of the row-wise argmax. The F1 average runs over every
/// class that occurs among the labels or the predictions.
pub fn classification_metrics(logits: &Tensor, labels: &[usize]) -> (f64, f64) {
    let c = logits.cols();
    let pred: Vec<usize> = (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            (0..c).fold(0, |best, j| if row[j] > row[best] { j } else { best })
        })
        .collect();
    let n = labels.len().max(1) as f64;
    let correct = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    let (mut f1_sum, mut classes) = (0.0, 0);
    for k in 0..c {
        let tp = pred.iter().zip(labels).filter(|&(&p, &y)| p == k && y == k).count() as f64;
        let pp = pred.iter().filter(|&&p| p == k).count() as f64;
        let ap = labels.iter().filter(|&&y| y == k).count() as f64;
        if pp + ap == 0.0 {
            continue;
        }
        classes += 1;
        f1_sum += 2.0 * tp / (pp + ap);
    }
    (correct as f64 / n, if classes == 0 { 0.0 } else { f1_sum / classes as f64 })
}

/// Inference-mode losses and metrics on `(x, y)`.
pub fn evaluate(model: &Model, x: &Tensor, y: &[usize], beta_t: f64) -> Result<(LossBreakdown, EvalMetrics)> {
    let mut tape = Tape::new();
    let fwd = model.forward_infer(&mut tape, x)?;
    let ce = tape.cross_entropy(fwd.logits, y)?;
    let ce = tape.value(ce).data()[0];
    let kl = fwd.kl.map(|k| tape.value(k.value).data()[0]).unwrap_or(0.0);
    let (accuracy, macro_f1) = classification_metrics(tape.value(fwd.logits), y);
    Ok((
        total_loss(ce, kl, beta_t)?,
        EvalMetrics {
            ce,
            kl,
            accuracy,
            macro_f1,
        },
    ))
}

/// Minibatches over a shuffled order. A trailing batch of one row is dropped,
/// since batch statistics of a single row are degenerate.
fn batches(order: &[usize], size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(size).filter(move |b| b.len() > 1 || order.len() == 1)
}

/// Trains a fresh model on `ds` (subsampled first when configured) for one seed.
pub fn run_on_dataset(cfg: &TrainConfig, ds: &Dataset, seed: u64) -> Result<TrainedRun> {
    cfg.validate()?;
    let started = Instant::now();
    let ds = match cfg.subsample {
        Some(n) => subsample(ds, n, seed)?,
        None => ds.clone(),
    };
    if ds.train.is_empty() {
        return Err(Error::invalid("dataset has no training rows"));
    }
    let spec = cfg.model_spec(ds.d_in(), ds.n_classes);
    let mut model = Model::build(&spec, seed)?;
    let schedule = cfg.schedule()?;
    let mut adam = Adam::new(cfg.adam, model.params());
    let mut shuffle_rng = SeedRng::new(seed, Stream::Shuffle);
    let mut dropout_rng = SeedRng::new(seed, Stream::Dropout);
    let (train_x, train_y) = ds.split(Split::Train);
    let dev = (!ds.dev.is_empty()).then(|| ds.split(Split::Dev));
    let mut order: Vec<usize> = (0..train_y.len()).collect();

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut status = RunStatus::Completed;
    'epochs: for epoch in 1..=cfg.epochs {
        let beta_t = if cfg.detach_kl { 0.0 } else { schedule.beta_at(epoch) };
        shuffle_rng.shuffle(&mut order);
        let (mut objective_sum, mut n_batches) = (0.0, 0usize);
        for idx in batches(&order, cfg.batch_size) {
            let xb = train_x.select_rows(idx);
            let yb: Vec<usize> = idx.iter().map(|&i| train_y[i]).collect();
            let step = (|| -> Result<f64> {
                let mut tape = Tape::new();
                let dropout = Dropout {
                    rate: cfg.dropout,
                    rng: &mut dropout_rng,
                };
                let fwd = model.forward_train(&mut tape, &xb, Some(dropout))?;
                let ce = tape.cross_entropy(fwd.logits, &yb)?;
                let loss = match fwd.kl {
                    Some(kl) if !cfg.detach_kl => {
                        let weighted = tape.scale(kl.value, beta_t)?;
                        tape.add(ce, weighted)?
                    }
                    _ => ce,
                };
                tape.backward(loss)?;
                let grads: Vec<Tensor> = fwd
                    .params
                    .iter()
                    .map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.value(v).shape())))
                    .collect();
                adam.step(model.params_mut(), &grads)?;
                Ok(tape.value(loss).data()[0])
            })();
            match step {
                Ok(v) => {
                    objective_sum += v;
                    n_batches += 1;
                }
                Err(e) if e.is_numerical() => {
                    status = RunStatus::Diverged {
                        epoch,
                        detail: e.to_string(),
                    };
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let record = (|| -> Result<EpochRecord> {
            let (train, _) = evaluate(&model, &train_x, &train_y, beta_t)?;
            let (dev_loss, dev_accuracy) = match &dev {
                Some((x, y)) => {
                    let (l, m) = evaluate(&model, x, y, beta_t)?;
                    (Some(l), Some(m.accuracy))
                }
                None => (None, None),
            };
            Ok(EpochRecord {
                epoch,
                train,
                train_batch_mean: objective_sum / n_batches.max(1) as f64,
                dev: dev_loss,
                dev_accuracy,
            })
        })();
        match record {
            Ok(r) => epochs.push(r),
            Err(e) if e.is_numerical() => {
                status = RunStatus::Diverged {
                    epoch,
                    detail: e.to_string(),
                };
                break;
            }
            Err(e) => return Err(e),
        }
    }

    let final_metrics = |split: Split| -> Option<EvalMetrics> {
        if status != RunStatus::Completed || ds.indices(split).is_empty() {
            return None;
        }
        let (x, y) = ds.split(split);
        evaluate(&model, &x, &y, 0.0).ok().map(|(_, m)| m)
    };
    let train_final = final_metrics(Split::Train);
    let test = final_metrics(Split::Test);
    Ok(TrainedRun {
        result: RunResult {
            seed,
            config_digest: cfg.digest(),
            epochs,
            train_final,
            test,
            status,
            wallclock_secs: started.elapsed().as_secs_f64(),
        },
        model,
    })
}

/// Loads the configured dataset and trains one seed.
pub fn run_experiment(cfg: &TrainConfig, seed: u64) -> Result<TrainedRun> {
    let ds = cfg.load_dataset()?;
    run_on_dataset(cfg, &ds, seed)
}

/// Worker count for parallel seed runs: `KLNORM_THREADS` when set, otherwise rayon's default.
pub fn thread_count() -> usize {
    std::env::var("KLNORM_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(rayon::current_num_threads)
}

/// Runs `f` over `items` in parallel on a pool capped by [`thread_count`].
/// Results keep the input order.
pub fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> Result<R> + Sync + Send) -> Result<Vec<R>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count())
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    pool.install(|| items.par_iter().map(&f).collect())
}

/// One run per seed of `cfg.seeds`, in seed-list order.
pub fn run_seeds(cfg: &TrainConfig, ds: &Dataset) -> Result<Vec<TrainedRun>> {
    par_map(&cfg.seeds, |&seed| run_on_dataset(cfg, ds, seed))
}

/// Writes `runs/<digest>/<seed>.jsonl` (one object per epoch), `<seed>.json`
/// (the full result) and `<seed>.ckpt` under `out`.
pub fn persist_run(out: &Path, run: &TrainedRun) -> Result<PathBuf> {
    let r = &run.result;
    let dir = out.join("runs").join(&r.config_digest);
    std::fs::create_dir_all(&dir)?;
    let mut jsonl = std::fs::File::create(dir.join(format!("{}.jsonl", r.seed)))?;
    for e in &r.epochs {
        let line = serde_json::json!({
            "seed": r.seed,
            "config_digest": r.config_digest,
            "epoch": e.epoch,
            "train": e.train,
            "train_batch_mean": e.train_batch_mean,
            "dev": e.dev,
            "dev_accuracy": e.dev_accuracy,
        });
        writeln!(jsonl, "{line}")?;
    }
    std::fs::write(dir.join(format!("{}.json", r.seed)), serde_json::to_string_pretty(r)?)?;
    save_checkpoint(&run.model, dir.join(format!("{}.ckpt", r.seed)))?;
    Ok(dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
    /// `"mean (std)"` at three decimals.
    pub formatted: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub config_digest: String,
    pub metrics: Vec<MetricSummary>,
}

/// Mean and population standard deviation. Values are summed in sorted order,
/// so the result does not depend on input order.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let mut dev: Vec<f64> = v.iter().map(|x| (x - mean) * (x - mean)).collect();
    dev.sort_by(f64::total_cmp);
    (mean, (dev.iter().sum::<f64>() / n).sqrt())
}

pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.3} ({std:.3})")
}

type Extractor = fn(&RunResult) -> Option<f64>;

const METRICS: [(&str, Extractor); 8] = [
    ("test_accuracy", |r| r.test.map(|m| m.accuracy)),
    ("test_macro_f1", |r| r.test.map(|m| m.macro_f1)),
    ("test_ce", |r| r.test.map(|m| m.ce)),
    ("train_ce", |r| r.last_epoch().map(|e| e.train.ce)),
    ("train_kl", |r| r.last_epoch().map(|e| e.train.kl)),
    ("dev_ce", |r| r.last_epoch().and_then(|e| e.dev).map(|d| d.ce)),
    ("dev_accuracy", |r| r.last_epoch().and_then(|e| e.dev_accuracy)),
    ("dev_gap", |r| r.last_epoch().and_then(|e| Some(e.dev?.ce - e.train.ce))),
];

/// Per-metric mean and population std across seed runs of one configuration.
/// Metrics missing from any run are left out.
pub fn aggregate_seeds(results: &[RunResult]) -> Result<Aggregate> {
    if results.len() < 2 {
        return Err(Error::invalid(format!("aggregate_seeds needs at least 2 runs, got {}", results.len())));
    }
    let digest = &results[0].config_digest;
    if let Some(r) = results.iter().find(|r| &r.config_digest != digest) {
        return Err(Error::invalid(format!(
            "aggregate_seeds: mixed configurations {digest} and {}",
            r.config_digest
        )));
    }
    let metrics = METRICS
        .iter()
        .filter_map(|(name, get)| {
            let values: Option<Vec<f64>> = results.iter().map(get).collect();
            let (mean, std) = mean_std(&values?);
            Some(MetricSummary {
                metric: name.to_string(),
                mean,
                std,
                n_seeds: results.len(),
                formatted: format_mean_std(mean, std),
            })
        })
        .collect();
    Ok(Aggregate {
        config_digest: digest.clone(),
        metrics,
    })
}

pub fn summary_csv(agg: &Aggregate) -> String {
    let mut out = String::from("config_digest,metric,mean,std,n_seeds\n");
    for m in &agg.metrics {
        let _ = writeln!(out, "{},{},{},{},{}", agg.config_digest, m.metric, m.mean, m.std, m.n_seeds);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub beta0: f64,
    /// Seed-mean final train cross-entropy.
    pub train_loss: f64,
    /// Seed-mean final dev cross-entropy.
    pub val_loss: f64,
    pub train_std: f64,
    pub val_std: f64,
}

impl SweepPoint {
    pub fn gap(&self) -> f64 {
        self.val_loss - self.train_loss
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub grid: Vec<f64>,
    pub points: Vec<SweepPoint>,
    pub seeds: Vec<u64>,
}

impl SweepResult {
    /// Grid point with the lowest mean validation loss.
    pub fn best(&self) -> &SweepPoint {
        self.points
            .iter()
            .min_by(|a, b| a.val_loss.total_cmp(&b.val_loss))
            .expect("non-empty grid")
    }

    pub fn at(&self, beta0: f64) -> Option<&SweepPoint> {
        self.points.iter().find(|p| p.beta0 == beta0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("beta0,train_loss,val_loss,gap,train_std,val_std,n_seeds\n");
        for p in &self.points {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                p.beta0,
                p.train_loss,
                p.val_loss,
                p.gap(),
                p.train_std,
                p.val_std,
                self.seeds.len()
            );
        }
        out
    }
}

/// Trains `cfg` for every `β₀` in `grid` and every seed of `cfg.seeds`, and
/// reports seed-mean final train and dev cross-entropy per grid point.
///
/// The annealing cap is raised to `β₀` for grid points above it, so a point
/// such as `β₀ = 100` trains with weight 100 rather than collapsing onto the cap.
pub fn sweep_beta(cfg: &TrainConfig, ds: &Dataset, grid: &[f64]) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::invalid("sweep_beta: empty grid"));
    }
    // written negated so NaN entries are rejected too
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::invalid("sweep_beta: grid must be strictly increasing"));
    }
    if ds.dev.is_empty() {
        return Err(Error::invalid("sweep_beta: dataset has no dev split"));
    }
    let jobs: Vec<(f64, u64)> = grid
        .iter()
        .flat_map(|&b| cfg.seeds.iter().map(move |&s| (b, s)))
        .collect();
    let runs = par_map(&jobs, |&(beta0, seed)| {
        let c = TrainConfig {
            beta0,
            beta_cap: cfg.beta_cap.max(beta0),
            ..cfg.clone()
        };
        let run = run_on_dataset(&c, ds, seed)?.result;
        match (&run.status, run.last_epoch()) {
            (RunStatus::Completed, Some(e)) => Ok((e.train.ce, e.dev.map(|d| d.ce).unwrap_or(f64::NAN))),
            (RunStatus::Diverged { epoch, detail }, _) => Err(Error::Divergence {
                epoch: *epoch,
                detail: format!("beta0={beta0}, seed={seed}: {detail}"),
            }),
            _ => Err(Error::invalid("sweep_beta: run recorded no epochs")),
        }
    })?;
    let per = cfg.seeds.len();
    let points = grid
        .iter()
        .enumerate()
        .map(|(g, &beta0)| {
            let chunk = &runs[g * per..(g + 1) * per];
            let (train_loss, train_std) = mean_std(&chunk.iter().map(|r| r.0).collect::<Vec<_>>());
            let (val_loss, val_std) = mean_std(&chunk.iter().map(|r| r.1).collect::<Vec<_>>());
            SweepPoint {
                beta0,
                train_loss,
                val_loss,
                train_std,
                val_std,
            }
        })
        .collect();
    Ok(SweepResult {
        grid: grid.to_vec(),
        points,
        seeds: cfg.seeds.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            lr: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub train_accuracy: f64,
    pub eval_accuracy: f64,
}

/// Rows of `split` with the class-informative columns shuffled across rows, so
/// only the last (spurious) column still relates to the label.
pub fn spurious_only_view(ds: &Dataset, split: Split, rng: &mut SeedRng) -> (Tensor, Vec<usize>) {
    let (x, y) = ds.split(split);
    let (m, d) = (x.rows(), x.cols());
    let perm = rng.permutation(m);
    let mut out = x.clone();
    for (i, &src) in perm.iter().enumerate() {
        out.data_mut()[i * d..i * d + d - 1].copy_from_slice(&x.row(src)[..d - 1]);
    }
    (out, y)
}

/// Freezes the encoder and normalization of `model`, trains a fresh linear
/// classifier on inference-mode representations of the spurious-only view of
/// the train split, and reports its accuracy on the same view of `eval`.
pub fn bias_probe(model: &Model, ds: &Dataset, cfg: ProbeConfig, eval: Split) -> Result<ProbeResult> {
    if ds.d_in() != model.spec.d_in || ds.n_classes != model.spec.n_classes {
        return Err(Error::invalid(format!(
            "bias_probe: model expects d_in={} classes={}, dataset has d_in={} classes={}",
            model.spec.d_in,
            model.spec.n_classes,
            ds.d_in(),
            ds.n_classes
        )));
    }
    if ds.train.is_empty() || ds.indices(eval).is_empty() {
        return Err(Error::invalid(format!("bias_probe: empty train or {eval} split")));
    }
    let mut rng = SeedRng::new(cfg.seed, Stream::Probe);
    let (xt, yt) = spurious_only_view(ds, Split::Train, &mut rng);
    let (xe, ye) = spurious_only_view(ds, eval, &mut rng);
    let rt = model.encode(&xt)?;
    let re = model.encode(&xe)?;

    let mut probe = Linear::init(model.spec.bottleneck, ds.n_classes, &mut rng);
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        probe.params(),
    );
    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let [w, b] = probe.params();
        let p = [tape.leaf(w.clone()), tape.leaf(b.clone())];
        let x = tape.constant(rt.clone());
        let logits = Linear::apply(&mut tape, x, &p)?;
        let loss = tape.cross_entropy(logits, &yt)?;
        tape.backward(loss)?;
        let grads: Vec<Tensor> = p.iter().map(|&v| tape.grad(v).expect("leaf").clone()).collect();
        adam.step(probe.params_mut().into_iter().collect(), &grads)?;
    }
    let accuracy = |r: &Tensor, y: &[usize]| -> Result<f64> { Ok(classification_metrics(&probe.forward(r)?, y).0) };
    Ok(ProbeResult {
        train_accuracy: accuracy(&rt, &yt)?,
        eval_accuracy: accuracy(&re, &ye)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_synthetic, SyntheticKind, SyntheticSpec};

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            bottleneck: 4,
            epochs: 3,
            seeds: vec![1, 2],
            ..TrainConfig::default()
        }
    }

    fn small_ds() -> Dataset {
        make_synthetic(&SyntheticSpec::new(SyntheticKind::GaussMix, 60, 5, 2, 4)).unwrap()
    }

    #[test]
    fn digest_ignores_seeds_but_not_hyperparameters() {
        let a = small_cfg();
        let b = TrainConfig { seeds: vec![9], ..a.clone() };
        let c = TrainConfig { beta0: 0.02, ..a.clone() };
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
        assert_eq!(a.digest().len(), 16);
    }

    #[test]
    fn aggregate_examples() {
        let (m, s) = mean_std(&[0.6, 0.6, 0.6]);
        assert_eq!(format_mean_std(m, s), "0.600 (0.000)");
        let (m, s) = mean_std(&[0.5, 0.7]);
        assert_eq!(format_mean_std(m, s), "0.600 (0.100)");
        assert!((s - 0.1).abs() < 1e-15);
    }

    #[test]
    fn aggregate_rejects_mixed_digests() {
        let ds = small_ds();
        let a = run_on_dataset(&small_cfg(), &ds, 1).unwrap().result;
        let mut b = a.clone();
        b.config_digest = "other".into();
        assert!(aggregate_seeds(&[a.clone(), b]).is_err());
        assert!(aggregate_seeds(std::slice::from_ref(&a)).is_err());
        let agg = aggregate_seeds(&[a.clone(), a]).unwrap();
        assert!(agg.metrics.iter().any(|m| m.metric == "test_accuracy" && m.std == 0.0));
    }

    #[test]
    fn runs_are_deterministic() {
        let ds = small_ds();
        let a = run_on_dataset(&small_cfg(), &ds, 5).unwrap();
        let b = run_on_dataset(&small_cfg(), &ds, 5).unwrap();
        assert_eq!(a.result.without_wallclock(), b.result.without_wallclock());
        assert_eq!(a.model, b.model);
        assert_eq!(a.result.epochs.len(), 3);
        assert!(a.result.completed());
    }

    #[test]
    fn zero_beta_matches_detached_kl() {
        let ds = small_ds();
        let zero = TrainConfig { beta0: 0.0, ..small_cfg() };
        let detached = TrainConfig { detach_kl: true, ..small_cfg() };
        let a = run_on_dataset(&zero, &ds, 3).unwrap();
        let b = run_on_dataset(&detached, &ds, 3).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.result.test, b.result.test);
    }

    #[test]
    fn metrics_on_known_predictions() {
        let logits = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 0.0]]).unwrap();
        let (acc, f1) = classification_metrics(&logits, &[0, 1, 1, 0]);
        assert_eq!(acc, 0.75);
        // class 0: tp 2, pred 3, actual 2 → 0.8; class 1: tp 1, pred 1, actual 2 → 2/3
        assert!((f1 - (0.8 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn sweep_rejects_bad_grids() {
        let ds = small_ds();
        assert!(sweep_beta(&small_cfg(), &ds, &[]).is_err());
        assert!(sweep_beta(&small_cfg(), &ds, &[0.1, 0.1]).is_err());
    }

    #[test]
    fn probe_sees_spurious_feature_through_identity_encoder() {
        let ds = make_synthetic(&SyntheticSpec::new(SyntheticKind::Biased, 200, 3, 2, 8)).unwrap();
        let mut spec = ModelSpec::new(4, 4, NormKind::None, 2);
        spec.hidden = Vec::new();
        let mut model = Model::build(&spec, 0).unwrap();
        let w = &mut model.encoder[0];
        w.weight = Tensor::new(vec![4, 4], (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect()).unwrap();
        w.bias = Tensor::zeros(&[4]);
        let r = bias_probe(&model, &ds, ProbeConfig::default(), Split::Train).unwrap();
        assert_eq!(r.eval_accuracy, 1.0);
    }
}
