//! Mini-batch training over GraphFeature triples: data-parallel worker
//! threads share one versioned parameter store, each worker owns a fixed
//! shard of the samples, and batch preparation overlaps gradient compute
//! through a two-stage pipeline.
//!
//! Sync mode runs a barrier per global step: every worker contributes one
//! gradient, the store averages them in worker-id order and applies a
//! single optimizer step, so a fixed seed reproduces the run exactly.
//! Async mode applies each gradient the moment it arrives.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{Split, Triple};
use crate::flat::splitmix64;
use crate::graph::GraphError;
use crate::nn::{
    adam_step, backward, forward, sigmoid_ce, softmax_ce, vectorize, AdamState, BatchLabels,
    DropoutSpec, ForwardOpts, Model, ModelGrads, ModelSpec, NnError, TaskKind, VectorizedBatch,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("shard error: {0}")]
    ShardError(String),
    #[error("config error: {0}")]
    ConfigError(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

// ====== Configuration ======

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateMode {
    Sync,
    Async,
}

impl fmt::Display for UpdateMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UpdateMode::Sync => "sync",
            UpdateMode::Async => "async",
        })
    }
}

impl FromStr for UpdateMode {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, TrainError> {
        match s {
            "sync" => Ok(UpdateMode::Sync),
            "async" => Ok(UpdateMode::Async),
            other => Err(TrainError::ConfigError(format!(
                "unknown update mode {other:?}"
            ))),
        }
    }
}

pub const MAX_EPOCHS: usize = 200;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub workers: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub mode: UpdateMode,
    /// Run validation every this many epochs (and always on the last).
    pub eval_every: usize,
    pub dropout: Option<DropoutSpec>,
    /// Edge partitions for forward aggregation.
    pub partitions: usize,
    /// Use per-layer pruned adjacencies during training.
    pub prune: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 50,
            workers: 1,
            lr: 0.01,
            weight_decay: 0.0,
            seed: 0,
            mode: UpdateMode::Sync,
            eval_every: 1,
            dropout: None,
            partitions: 1,
            prune: true,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::ConfigError("batch_size must be >= 1".into()));
        }
        if self.workers == 0 {
            return Err(TrainError::ConfigError("workers must be >= 1".into()));
        }
        if self.epochs == 0 || self.epochs > MAX_EPOCHS {
            return Err(TrainError::ConfigError(format!(
                "epochs must be in 1..={MAX_EPOCHS}"
            )));
        }
        if self.eval_every == 0 {
            return Err(TrainError::ConfigError("eval_every must be >= 1".into()));
        }
        Ok(())
    }
}

// ====== Parameter store ======

struct StoreModel {
    model: Model<f32>,
    adam: AdamState<f32>,
    version: u64,
}

struct SyncState {
    expected: usize,
    slots: Vec<Option<ModelGrads<f32>>>,
    filled: usize,
    generation: u64,
    failed: Option<String>,
}

/// Versioned shared parameters. `pull` hands out a consistent snapshot;
/// pushes apply Adam steps. In sync mode the version moves only once all
/// workers of a step have contributed.
pub struct ParameterStore {
    store: Mutex<StoreModel>,
    sync: Mutex<SyncState>,
    cv: Condvar,
}

impl ParameterStore {
    pub fn new(model: Model<f32>, lr: f64, weight_decay: f64, workers: usize) -> Self {
        let adam = AdamState::new(lr, weight_decay, &model.tensors());
        ParameterStore {
            store: Mutex::new(StoreModel {
                model,
                adam,
                version: 0,
            }),
            sync: Mutex::new(SyncState {
                expected: workers,
                slots: (0..workers).map(|_| None).collect(),
                filled: 0,
                generation: 0,
                failed: None,
            }),
            cv: Condvar::new(),
        }
    }

    pub fn pull(&self) -> (Model<f32>, u64) {
        let s = self.store.lock().unwrap();
        (s.model.clone(), s.version)
    }

    pub fn snapshot(&self) -> Model<f32> {
        self.store.lock().unwrap().model.clone()
    }

    pub fn version(&self) -> u64 {
        self.store.lock().unwrap().version
    }

    fn apply(&self, grads: &ModelGrads<f32>) -> Result<u64, TrainError> {
        let mut s = self.store.lock().unwrap();
        let StoreModel { model, adam, version } = &mut *s;
        adam_step(model.tensors_mut(), &grads.tensors, adam)?;
        *version += 1;
        Ok(*version)
    }

    /// Immediate application (async mode).
    pub fn push_async(&self, grads: &ModelGrads<f32>) -> Result<u64, TrainError> {
        self.apply(grads)
    }

    /// Barrier push: blocks until every worker has contributed, then the
    /// last arrival averages the slots in worker-id order and applies one
    /// optimizer step.
    pub fn push_sync(&self, worker: usize, grads: ModelGrads<f32>) -> Result<u64, TrainError> {
        let mut st = self.sync.lock().unwrap();
        if let Some(msg) = &st.failed {
            return Err(TrainError::ConfigError(format!(
                "training aborted: {msg}"
            )));
        }
        if worker >= st.expected || st.slots[worker].is_some() {
            return Err(TrainError::ConfigError(format!(
                "bad sync push from worker {worker}"
            )));
        }
        st.slots[worker] = Some(grads);
        st.filled += 1;
        if st.filled == st.expected {
            let mut avg: Option<ModelGrads<f32>> = None;
            for slot in st.slots.iter_mut() {
                let g = slot.take().expect("all slots filled");
                match &mut avg {
                    None => avg = Some(g),
                    Some(a) => a.add_assign(&g),
                }
            }
            let mut avg = avg.expect("at least one worker");
            avg.scale(1.0 / st.expected as f32);
            let result = self.apply(&avg);
            st.filled = 0;
            st.generation += 1;
            if let Err(e) = &result {
                st.failed = Some(e.to_string());
            }
            self.cv.notify_all();
            return result;
        }
        let gen = st.generation;
        while st.generation == gen && st.failed.is_none() {
            st = self.cv.wait(st).unwrap();
        }
        if let Some(msg) = &st.failed {
            return Err(TrainError::ConfigError(format!(
                "training aborted: {msg}"
            )));
        }
        drop(st);
        Ok(self.version())
    }

    /// Marks the run as failed and releases any workers parked in
    /// `push_sync` so the error can propagate instead of deadlocking.
    pub fn fail(&self, msg: &str) {
        let mut st = self.sync.lock().unwrap();
        if st.failed.is_none() {
            st.failed = Some(msg.to_string());
        }
        self.cv.notify_all();
    }
}

// ====== Prefetch pipeline ======

/// Two-stage pipeline: `prepare` runs on a producer thread one batch
/// ahead while `compute` consumes on the caller thread, connected by a
/// bounded channel. Output order and values match the sequential run.
pub fn prefetch_pipeline<I, B, R>(
    inputs: I,
    prepare: impl FnMut(I::Item) -> B + Send,
    mut compute: impl FnMut(B) -> R,
) -> Vec<R>
where
    I: IntoIterator + Send,
    I::Item: Send,
    B: Send,
{
    std::thread::scope(|scope| {
        let (tx, rx) = std::sync::mpsc::sync_channel::<B>(1);
        scope.spawn(move || {
            let mut prepare = prepare;
            for item in inputs {
                if tx.send(prepare(item)).is_err() {
                    return; // consumer dropped (propagating a panic)
                }
            }
        });
        let mut out = Vec::new();
        while let Ok(batch) = rx.recv() {
            out.push(compute(batch));
        }
        out
    })
}

// ====== Metrics ======

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Loss,
    Accuracy,
    MicroF1,
    Auc,
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Loss => "loss",
            Metric::Accuracy => "accuracy",
            Metric::MicroF1 => "micro_f1",
            Metric::Auc => "auc",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricPoint {
    pub epoch: usize,
    pub split: Split,
    pub metric: Metric,
    pub value: f64,
}

pub fn history_to_csv(history: &[MetricPoint]) -> String {
    let mut out = String::from("epoch,split,metric,value\n");
    for p in history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.epoch,
            p.split.as_str(),
            p.metric,
            p.value
        ));
    }
    out
}

fn batch_loss_grads(
    model: &Model<f32>,
    batch: &VectorizedBatch<f32>,
    opts: &ForwardOpts<'_>,
) -> Result<(f64, ModelGrads<f32>), TrainError> {
    let (logits, cache) = forward(model, batch, opts)?;
    let (loss, dlogits) = match (&batch.labels, model.task) {
        (BatchLabels::Classes(c), TaskKind::SingleLabel) => softmax_ce(&logits, c)?,
        (BatchLabels::Multi(p), TaskKind::MultiLabel) => sigmoid_ce(&logits, p)?,
        _ => {
            return Err(TrainError::Nn(NnError::SchemaError(
                "batch labels do not match the model task".into(),
            )))
        }
    };
    if !loss.is_finite() {
        return Err(TrainError::Nn(NnError::NumericsError(format!(
            "non-finite training loss {loss}"
        ))));
    }
    let grads = backward(model, batch, &cache, &dlogits)?;
    Ok((loss, grads))
}

/// Scores `model` on labeled triples. Accuracy applies to single-label
/// tasks, micro-F1 thresholds every (sample, class) decision at 0.5, and
/// AUC is the two-class rank statistic over the positive-class margin.
pub fn evaluate(
    model: &Model<f32>,
    triples: &[Triple],
    metric: Metric,
    batch_size: usize,
) -> Result<f64, TrainError> {
    if triples.is_empty() {
        return Err(TrainError::ShardError("no samples to evaluate".into()));
    }
    let batch_size = batch_size.max(1);
    let opts = ForwardOpts::default();

    let mut total_loss = 0.0f64;
    let mut correct = 0usize;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fne = 0usize;
    // (score, is_positive) pairs for AUC.
    let mut ranked: Vec<(f64, bool)> = Vec::new();
    let mut samples = 0usize;

    for chunk in triples.chunks(batch_size) {
        let mut batch = vectorize(chunk)?;
        batch.prune()?;
        let (logits, _) = forward(model, &batch, &opts)?;
        match (&batch.labels, model.task) {
            (BatchLabels::Classes(classes), TaskKind::SingleLabel) => {
                let (loss, _) = softmax_ce(&logits, classes)?;
                total_loss += loss * chunk.len() as f64;
                for (i, &y) in classes.iter().enumerate() {
                    let row = logits.row(i);
                    let mut best = 0usize;
                    for j in 1..row.len() {
                        if row[j] > row[best] {
                            best = j;
                        }
                    }
                    if best == y as usize {
                        correct += 1;
                    }
                    for j in 0..row.len() {
                        let predicted = row[j] > 0.0;
                        let actual = j == y as usize;
                        match (predicted, actual) {
                            (true, true) => tp += 1,
                            (true, false) => fp += 1,
                            (false, true) => fne += 1,
                            (false, false) => {}
                        }
                    }
                    if model.classes() == 2 {
                        ranked.push(((row[1] - row[0]) as f64, y == 1));
                    }
                }
            }
            (BatchLabels::Multi(pos), TaskKind::MultiLabel) => {
                let (loss, _) = sigmoid_ce(&logits, pos)?;
                total_loss += loss * chunk.len() as f64;
                for (i, set) in pos.iter().enumerate() {
                    let row = logits.row(i);
                    for j in 0..row.len() {
                        // sigmoid(z) > 0.5 exactly when z > 0.
                        let predicted = row[j] > 0.0;
                        let actual = set.contains(&(j as u32));
                        match (predicted, actual) {
                            (true, true) => tp += 1,
                            (true, false) => fp += 1,
                            (false, true) => fne += 1,
                            (false, false) => {}
                        }
                    }
                }
            }
            _ => {
                return Err(TrainError::Nn(NnError::SchemaError(
                    "evaluation labels do not match the model task".into(),
                )))
            }
        }
        samples += chunk.len();
    }

    match metric {
        Metric::Loss => Ok(total_loss / samples as f64),
        Metric::Accuracy => {
            if model.task != TaskKind::SingleLabel {
                return Err(TrainError::UndefinedMetric(
                    "accuracy requires a single-label task".into(),
                ));
            }
            Ok(correct as f64 / samples as f64)
        }
        Metric::MicroF1 => {
            let denom = 2 * tp + fp + fne;
            if denom == 0 {
                // No positive labels and no positive predictions.
                return Ok(1.0);
            }
            Ok(2.0 * tp as f64 / denom as f64)
        }
        Metric::Auc => {
            if ranked.is_empty() {
                return Err(TrainError::UndefinedMetric(
                    "auc requires a two-class single-label task".into(),
                ));
            }
            auc_rank(&mut ranked)
        }
    }
}

/// Mann-Whitney rank statistic with midranks for ties.
fn auc_rank(scored: &mut [(f64, bool)]) -> Result<f64, TrainError> {
    let pos = scored.iter().filter(|(_, y)| *y).count();
    let neg = scored.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(TrainError::UndefinedMetric(
            "auc undefined when only one class is present".into(),
        ));
    }
    scored.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < scored.len() {
        let mut j = i;
        while j < scored.len() && scored[j].0 == scored[i].0 {
            j += 1;
        }
        // Ranks are 1-based; tied scores share the average rank.
        let midrank = (i + 1 + j) as f64 / 2.0;
        for s in &scored[i..j] {
            if s.1 {
                rank_sum += midrank;
            }
        }
        i = j;
    }
    let p = pos as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64))
}

// ====== Training loop ======

#[derive(Debug)]
pub struct TrainReport {
    pub model: Model<f32>,
    pub history: Vec<MetricPoint>,
    /// Optimizer steps applied.
    pub final_version: u64,
    /// Sample visits per wall second across all workers; the multi-worker
    /// speedup measure.
    pub samples_per_sec: f64,
}

fn worker_seed(seed: u64, epoch: usize, worker: usize, step: usize) -> u64 {
    splitmix64(
        seed ^ splitmix64(epoch as u64 ^ splitmix64((worker as u64) << 32 | step as u64)),
    )
}

/// Trains `spec` over `samples` with `cfg.workers` threads. Samples are
/// sharded round-robin by index; every epoch each worker shuffles its own
/// shard with a seed derived from (seed, epoch, worker). All workers run
/// the same number of steps per epoch (short shards wrap around) so the
/// sync barrier always sees every worker.
pub fn train(
    samples: &[Triple],
    val: &[Triple],
    spec: &ModelSpec,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    let w = cfg.workers;
    let mut shards: Vec<Vec<&Triple>> = vec![Vec::new(); w];
    for (i, t) in samples.iter().enumerate() {
        shards[i % w].push(t);
    }
    if let Some(empty) = shards.iter().position(|s| s.is_empty()) {
        return Err(TrainError::ShardError(format!(
            "worker {empty} has an empty shard ({} samples across {w} workers)",
            samples.len()
        )));
    }
    let steps_per_epoch = shards
        .iter()
        .map(|s| s.len().div_ceil(cfg.batch_size))
        .max()
        .unwrap();

    let model = Model::init(spec)?;
    let store = Arc::new(ParameterStore::new(model, cfg.lr, cfg.weight_decay, w));
    let mut history = Vec::new();
    let started = std::time::Instant::now();
    let mut total_steps = 0u64;

    for epoch in 1..=cfg.epochs {
        let failed = AtomicBool::new(false);
        // Per-worker mean training loss for this epoch, in worker order.
        let epoch_losses: Vec<Result<f64, TrainError>> = std::thread::scope(|scope| {
            let mut handles = Vec::with_capacity(w);
            for (worker, shard) in shards.iter().enumerate() {
                let store = Arc::clone(&store);
                let failed = &failed;
                let cfg = &cfg;
                handles.push(scope.spawn(move || {
                    let run = || -> Result<f64, TrainError> {
                        let mut order: Vec<usize> = (0..shard.len()).collect();
                        let mut rng = ChaCha8Rng::seed_from_u64(worker_seed(
                            cfg.seed, epoch, worker, 0,
                        ));
                        order.shuffle(&mut rng);

                        // Stage 1 prepares (vectorize + prune) one batch
                        // ahead of the gradient compute in stage 2.
                        let prepare = |step: usize| -> Result<(usize, VectorizedBatch<f32>), TrainError> {
                            let start = step * cfg.batch_size;
                            let picks: Vec<Triple> = (start..start + cfg.batch_size)
                                .map(|i| Triple::clone(shard[order[i % order.len()]]))
                                .collect();
                            let mut batch = vectorize(&picks)?;
                            if cfg.prune {
                                batch.prune()?;
                            }
                            Ok((step, batch))
                        };
                        let compute = |prep: Result<(usize, VectorizedBatch<f32>), TrainError>|
                         -> Result<f64, TrainError> {
                            if failed.load(Ordering::Acquire) {
                                return Err(TrainError::ConfigError(
                                    "another worker failed".into(),
                                ));
                            }
                            let (step, batch) = prep?;
                            let (snapshot, _) = store.pull();
                            let dropout = cfg.dropout.map(|d| DropoutSpec {
                                seed: worker_seed(d.seed ^ cfg.seed, epoch, worker, step),
                                ..d
                            });
                            let opts = ForwardOpts {
                                dropout,
                                ops: None,
                                partitions: cfg.partitions,
                            };
                            let (loss, grads) = batch_loss_grads(&snapshot, &batch, &opts)?;
                            match cfg.mode {
                                UpdateMode::Sync => {
                                    store.push_sync(worker, grads)?;
                                }
                                UpdateMode::Async => {
                                    store.push_async(&grads)?;
                                }
                            }
                            Ok(loss)
                        };
                        let results = prefetch_pipeline(0..steps_per_epoch, prepare, compute);
                        let mut sum = 0.0;
                        for r in results {
                            sum += r?;
                        }
                        Ok(sum / steps_per_epoch as f64)
                    };
                    let out = run();
                    if out.is_err() {
                        failed.store(true, Ordering::Release);
                        store.fail("worker error");
                    }
                    out
                }));
            }
            handles.into_iter().map(|h| h.join().unwrap()).collect()
        });

        let mut train_loss = 0.0;
        for r in epoch_losses {
            train_loss += r?;
        }
        train_loss /= w as f64;
        total_steps += steps_per_epoch as u64;
        history.push(MetricPoint {
            epoch,
            split: Split::Train,
            metric: Metric::Loss,
            value: train_loss,
        });

        if !val.is_empty() && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) {
            let snapshot = store.snapshot();
            let task_metric = match spec.task {
                TaskKind::SingleLabel => Metric::Accuracy,
                TaskKind::MultiLabel => Metric::MicroF1,
            };
            for metric in [Metric::Loss, task_metric] {
                let value = evaluate(&snapshot, val, metric, cfg.batch_size)?;
                history.push(MetricPoint {
                    epoch,
                    split: Split::Val,
                    metric,
                    value,
                });
            }
        }
    }

    let elapsed = started.elapsed().as_secs_f64();
    let visited = total_steps * (cfg.batch_size * w) as u64;
    Ok(TrainReport {
        model: store.snapshot(),
        history,
        final_version: store.version(),
        samples_per_sec: visited as f64 / elapsed.max(1e-9),
    })
}
