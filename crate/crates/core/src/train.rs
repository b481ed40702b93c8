//! Mean-squared-error objective, plain SGD, the epoch loop, evaluation, and
//! float32 checkpointing.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::SampleWindow;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::{forward, ModelConfig, WindowBatch};
use crate::rng::indexed_stream;
use crate::tensor::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Reshuffle the training windows every epoch (train split only).
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr: 0.001, batch_size: 16, epochs: 140, seed: 0, shuffle: true }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// One epoch of metrics. `wall_ms` goes to the metrics stream only; the
/// report file stays byte-identical across reruns of the same seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub test_mse: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub best_test_mse: f64,
    pub best_epoch: usize,
    pub param_count: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub summary: TrainSummary,
}

#[derive(Serialize, Deserialize)]
struct RecordJson {
    epoch: usize,
    train_mse: f64,
    test_mse: f64,
}

#[derive(Serialize, Deserialize)]
struct ReportJson {
    records: Vec<RecordJson>,
    summary: TrainSummary,
}

impl TrainReport {
    /// Deterministic serialization: timing is deliberately excluded.
    pub fn to_json(&self) -> Result<String> {
        let doc = ReportJson {
            records: self
                .records
                .iter()
                .map(|r| RecordJson {
                    epoch: r.epoch,
                    train_mse: r.train_mse,
                    test_mse: r.test_mse,
                })
                .collect(),
            summary: self.summary.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }
}

/// Mean of (pred − gt)² over every scalar entry.
pub fn mse_loss(g: &mut Graph, pred: NodeId, gt: NodeId) -> Result<NodeId> {
    if g.shape(pred) != g.shape(gt) {
        return Err(Error::Shape(format!(
            "mse: prediction shape {:?} != target shape {:?}",
            g.shape(pred),
            g.shape(gt)
        )));
    }
    let diff = g.sub(pred, gt)?;
    let sq = g.square(diff);
    Ok(g.mean_all(sq))
}

/// θ ← θ − lr·∇θ for every parameter, then gradients are zeroed. Rejected if
/// no gradients have been accumulated since the last step.
pub fn sgd_step(store: &mut ParamStore, lr: f64) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Config(format!("lr must be positive, got {lr}")));
    }
    if !store.has_pending_grads() {
        return Err(Error::Config(
            "sgd_step without accumulated gradients; run backward first".into(),
        ));
    }
    for (_, t) in store.iter_mut() {
        let grad = t.grad.as_ref().expect("parameters carry grads");
        for (v, g) in t.data.iter_mut().zip(grad) {
            *v -= lr * g;
        }
    }
    store.zero_grads();
    Ok(())
}

fn batch_ranges(total: usize, batch_size: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..total.div_ceil(batch_size)).map(move |b| {
        let lo = b * batch_size;
        (lo, (lo + batch_size).min(total))
    })
}

/// Per-sample sum of squared errors, accumulated in sample order so the
/// result is independent of batch partitioning.
fn sse_over(
    cfg: &ModelConfig,
    store: &ParamStore,
    windows: &[&SampleWindow],
    batch_size: usize,
) -> Result<f64> {
    let mut sse = 0.0;
    for (lo, hi) in batch_ranges(windows.len(), batch_size) {
        let batch = WindowBatch::from_refs(&windows[lo..hi], cfg)?;
        let mut g = Graph::new();
        let pred = forward(&mut g, store, cfg, &batch)?;
        let out = g.data(pred);
        for (row, gt) in out.chunks(cfg.out_dim).zip(batch.targets.data.chunks(cfg.out_dim)) {
            let row_sse: f64 = row.iter().zip(gt).map(|(p, t)| (p - t) * (p - t)).sum();
            sse += row_sse;
        }
    }
    Ok(sse)
}

/// Mean squared error of the model on `windows`; batched forward passes with
/// no gradient work. The result is invariant to `batch_size` up to 1e-10.
pub fn evaluate(
    cfg: &ModelConfig,
    store: &ParamStore,
    windows: &[SampleWindow],
    batch_size: usize,
) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::Data("evaluate: no windows".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("evaluate: batch_size must be >= 1".into()));
    }
    let refs: Vec<&SampleWindow> = windows.iter().collect();
    let sse = sse_over(cfg, store, &refs, batch_size)?;
    Ok(sse / (windows.len() * cfg.out_dim) as f64)
}

/// Runs the full training loop: per epoch, shuffled minibatches of forward →
/// loss → backward → SGD, then a train-set and test-set evaluation with the
/// epoch's final parameters. The checkpoint with the lowest test MSE is kept
/// in `ckpt_dir` when given. Fully deterministic for a fixed seed.
pub fn train(
    cfg: &ModelConfig,
    train_windows: &[SampleWindow],
    test_windows: &[SampleWindow],
    tcfg: &TrainConfig,
    ckpt_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(TrainReport, ParamStore)> {
    tcfg.validate()?;
    cfg.validate()?;
    if train_windows.is_empty() {
        return Err(Error::Data("train: empty training split".into()));
    }
    if test_windows.is_empty() {
        return Err(Error::Data("train: empty test split".into()));
    }

    let mut store = crate::model::init_params(cfg, tcfg.seed)?;
    let param_count = store.scalar_count();
    let mut order: Vec<usize> = (0..train_windows.len()).collect();
    let mut records: Vec<EpochRecord> = Vec::with_capacity(tcfg.epochs);
    let mut best = (f64::INFINITY, 0usize);

    for epoch in 1..=tcfg.epochs {
        let started = Instant::now();
        if tcfg.shuffle {
            let mut rng = indexed_stream(tcfg.seed, epoch as u64);
            order.shuffle(&mut rng);
        }
        for (b, (lo, hi)) in batch_ranges(order.len(), tcfg.batch_size).enumerate() {
            let refs: Vec<&SampleWindow> =
                order[lo..hi].iter().map(|&i| &train_windows[i]).collect();
            let batch = WindowBatch::from_refs(&refs, cfg)?;
            let mut g = Graph::new();
            let pred = forward(&mut g, &store, cfg, &batch)?;
            let gt = g.leaf(&batch.targets);
            let loss = mse_loss(&mut g, pred, gt)?;
            let loss_val = g.data(loss)[0];
            if !loss_val.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}, batch {b}; training diverged \
                     (consider a lower learning rate)"
                )));
            }
            g.backward(loss)?;
            g.harvest_into(&mut store)?;
            sgd_step(&mut store, tcfg.lr)?;
        }

        let train_refs: Vec<&SampleWindow> = train_windows.iter().collect();
        let train_mse = sse_over(cfg, &store, &train_refs, tcfg.batch_size)?
            / (train_windows.len() * cfg.out_dim) as f64;
        let test_mse = evaluate(cfg, &store, test_windows, tcfg.batch_size)?;

        if test_mse < best.0 {
            best = (test_mse, epoch);
            if let Some(dir) = ckpt_dir {
                save_checkpoint(dir, &store)?;
            }
        }
        let record = EpochRecord {
            epoch,
            train_mse,
            test_mse,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        on_epoch(&record);
        records.push(record);
    }

    let report = TrainReport {
        records,
        summary: TrainSummary {
            best_test_mse: best.0,
            best_epoch: best.1,
            param_count,
            seed: tcfg.seed,
        },
    };
    Ok((report, store))
}

// ── checkpoint format ───────────────────────────────────────────────
//
// <dir>/index.json   name → shape / byte offset / element count, plus the
//                    store seed; parameters in lexicographic name order
// <dir>/params.bin   little-endian IEEE-754 float32, row-major, concatenated

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointIndex {
    file: String,
    dtype: String,
    seed: u64,
    params: Vec<IndexEntry>,
}

pub fn save_checkpoint(dir: &Path, store: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(store.len());
    let mut blob: Vec<u8> = Vec::new();
    for (name, tensor) in store.iter() {
        entries.push(IndexEntry {
            name: name.to_string(),
            shape: tensor.shape.clone(),
            offset: blob.len(),
            len: tensor.data.len(),
        });
        for v in &tensor.data {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let index = CheckpointIndex {
        file: "params.bin".to_string(),
        dtype: "f32".to_string(),
        seed: store.seed(),
        params: entries,
    };
    fs::write(dir.join("index.json"), serde_json::to_string_pretty(&index)?)?;
    fs::write(dir.join("params.bin"), blob)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<ParamStore> {
    let text = fs::read_to_string(dir.join("index.json"))
        .map_err(|e| Error::Data(format!("cannot read checkpoint index in {dir:?}: {e}")))?;
    let index: CheckpointIndex = serde_json::from_str(&text)?;
    if index.dtype != "f32" {
        return Err(Error::Data(format!("unsupported checkpoint dtype {:?}", index.dtype)));
    }
    let blob = fs::read(dir.join(&index.file))?;
    let mut store = ParamStore::new(index.seed);
    for entry in &index.params {
        let bytes = entry.len * 4;
        let start = entry.offset;
        if start + bytes > blob.len() {
            return Err(Error::Data(format!(
                "checkpoint blob too short for parameter {:?}",
                entry.name
            )));
        }
        let data: Vec<f64> = blob[start..start + bytes]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        store.insert(&entry.name, crate::tensor::Tensor::new(entry.shape.clone(), data)?)?;
    }
    if !store.all_finite() {
        return Err(Error::Numeric(format!("checkpoint in {dir:?} holds non-finite values")));
    }
    Ok(store)
}

/// Loads a checkpoint and verifies it matches the configuration's parameter
/// set exactly, naming the first discrepancy.
pub fn load_checkpoint_for(dir: &Path, cfg: &ModelConfig) -> Result<ParamStore> {
    let store = load_checkpoint(dir)?;
    let expect = crate::model::init_params(cfg, store.seed())?;
    for (name, t) in expect.iter() {
        let got = store.get(name).map_err(|_| {
            Error::Data(format!("checkpoint is missing parameter {name:?} required by the config"))
        })?;
        if got.shape != t.shape {
            return Err(Error::Data(format!(
                "checkpoint parameter {name:?} has shape {:?}, config expects {:?}",
                got.shape, t.shape
            )));
        }
    }
    if store.len() != expect.len() {
        return Err(Error::Data(format!(
            "checkpoint holds {} parameters, config expects {}",
            store.len(),
            expect.len()
        )));
    }
    Ok(store)
}
