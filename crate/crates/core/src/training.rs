//! Mini-batch Adam on the MSE objective, early stopping, and checkpoints.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{DataConfig, NormStats, WindowSample};
use crate::error::{Error, Result, TensorError};
use crate::model::{EgpdeNet, ModelConfig, ModelInput};
use crate::ode::SolverConfig;
use crate::par::{self, Execution};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// `(1/B)·Σ_b (1/K)·Σ_k (ŷ − y)²`
pub fn mse_loss<'t>(pred: Var<'t>, truth: Var<'t>) -> Result<Var<'t>, TensorError> {
    if pred.shape() != truth.shape() {
        return Err(TensorError::Shape {
            op: "mse_loss",
            lhs: pred.shape(),
            rhs: truth.shape(),
        });
    }
    let diff = pred.sub(truth)?;
    diff.mul(diff)?.mean()
}

/// Adam with bias correction; moments are kept in parameter-store order.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = |t: &Tensor| Tensor::zeros(t.shape());
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.tensors().iter().map(zeros).collect(),
            v: params.tensors().iter().map(zeros).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Gradients are checked before anything is changed.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Tensor], lr: f64) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Config(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for ((name, p), g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::Config(format!("gradient shape mismatch for {name}")));
            }
            if let Some(index) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::Config(format!(
                    "non-finite gradient for {name} at element {index}"
                )));
            }
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub solver: SolverConfig,
    /// Fan-out for validation forecasts; the reduction order is fixed.
    #[serde(skip)]
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            learning_rate: 1e-3,
            max_epochs: 200,
            patience: 10,
            seed: 0,
            solver: SolverConfig::default(),
            execution: Execution::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        self.solver.validate()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_valid: f64,
    pub stopped_early: bool,
}

impl History {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.into()))?;
        for r in &self.epochs {
            w.serialize(r).map_err(|e| Error::Data(e.into()))?;
        }
        w.flush()
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }
}

/// Tracks the best validation loss and when to stop.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records an epoch's loss; returns whether it is a new best.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> (usize, f64) {
        (self.best_epoch, self.best)
    }
}

fn targets(samples: &[&WindowSample]) -> Tensor {
    let k = samples[0].targets.len();
    let data = samples.iter().flat_map(|s| s.targets.iter().copied()).collect();
    Tensor::from_parts(vec![samples.len(), k], data)
}

/// Loss and gradients of one batch at the training offsets.
pub fn batch_gradients(
    model: &EgpdeNet,
    batch: &[&WindowSample],
    solver: &SolverConfig,
) -> Result<(f64, Vec<Tensor>)> {
    let input = ModelInput::new(batch)?;
    let tape = Tape::new();
    let p = model.params().bind(&tape);
    let pred = model.forecast(&p, &tape, &input, &batch[0].offsets, solver)?.predictions;
    let loss = mse_loss(pred, tape.constant(&targets(batch)))?;
    let value = loss.item();
    let grads = tape.backward(loss)?;
    Ok((value, p.grads(&grads)))
}

const EVAL_CHUNK: usize = 256;

/// Mean squared error at the training offsets, averaged over all windows.
pub fn dataset_mse(model: &EgpdeNet, samples: &[WindowSample], solver: &SolverConfig, exec: Execution) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("no windows to evaluate".into()));
    }
    let chunks: Vec<&[WindowSample]> = samples.chunks(EVAL_CHUNK).collect();
    let sums = par::map(exec, &chunks, |chunk| -> Result<f64> {
        let input = ModelInput::from_windows(chunk)?;
        let pred = model.predict(&input, &chunk[0].offsets, solver)?;
        let refs: Vec<_> = chunk.iter().collect();
        let truth = targets(&refs);
        let k = truth.shape()[1] as f64;
        Ok(pred
            .data()
            .iter()
            .zip(truth.data())
            .map(|(p, t)| (p - t).powi(2))
            .sum::<f64>()
            / k)
    });
    let mut total = 0.0;
    for s in sums {
        total += s?;
    }
    Ok(total / samples.len() as f64)
}

/// Trains `model` in place and leaves it holding the best-validation
/// parameters.
pub fn fit(
    model: &mut EgpdeNet,
    train: &[WindowSample],
    valid: &[WindowSample],
    cfg: &TrainConfig,
) -> Result<History> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Config("training needs non-empty train and validation windows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(model.params());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_params = model.params().clone();
    let mut history = History::default();
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&WindowSample> = idx.iter().map(|&i| &train[i]).collect();
            let diverged = |source: Error| Error::Diverged {
                epoch,
                batch: b,
                source: Box::new(source),
            };
            let (loss, grads) = batch_gradients(model, &batch, &cfg.solver).map_err(diverged)?;
            if !loss.is_finite() {
                return Err(diverged(Error::Tensor(TensorError::NonFinite { op: "mse_loss", index: 0 })));
            }
            adam.step(model.params_mut(), &grads, cfg.learning_rate)
                .map_err(diverged)?;
            loss_sum += loss * batch.len() as f64;
        }
        let valid_loss = dataset_mse(model, valid, &cfg.solver, cfg.execution).map_err(|e| Error::Diverged {
            epoch,
            batch: usize::MAX,
            source: Box::new(e),
        })?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            valid_loss,
        });
        if stopper.observe(epoch, valid_loss) {
            best_params = model.params().clone();
        }
        if stopper.should_stop() {
            history.stopped_early = true;
            break;
        }
    }
    *model.params_mut() = best_params;
    (history.best_epoch, history.best_valid) = stopper.best();
    Ok(history)
}

/// Everything besides the parameters needed to reuse a trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub stats: NormStats,
    pub target: String,
    /// Feature column names in file order (target included).
    pub columns: Vec<String>,
    pub seed: u64,
}

const MAGIC: &[u8; 8] = b"EGPDECKP";
const VERSION: u32 = 1;

/// Binary layout, little-endian throughout:
/// magic, version (u32), meta JSON (u64 length + bytes), tensor count (u32),
/// then per tensor: name (u32 length + UTF-8), rank (u32), dims (u64 each),
/// values (f64 each).
pub fn save_checkpoint(model: &EgpdeNet, meta: &CheckpointMeta, path: impl AsRef<Path>) -> Result<()> {
    if &meta.model != model.config() {
        return Err(Error::Checkpoint("metadata does not describe this model".into()));
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let json = serde_json::to_vec(meta).map_err(|e| Error::Checkpoint(e.to_string()))?;
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    buf.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, t) in model.params().iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let path = path.as_ref();
    let mut file =
        std::fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    file.write_all(&buf)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated file while reading {what} at byte {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| Error::Checkpoint(format!("{what} does not fit in memory")))
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(EgpdeNet, CheckpointMeta)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    decode_checkpoint(&bytes)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(EgpdeNet, CheckpointMeta)> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version} (this build reads {VERSION})"
        )));
    }
    let meta_len = c.len("metadata length")?;
    let meta: CheckpointMeta = serde_json::from_slice(c.take(meta_len, "metadata")?)
        .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    let mut model = EgpdeNet::new(meta.model.clone(), 0)?;
    let count = c.u32("tensor count")? as usize;
    if count != model.params().len() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, file has {count}",
            model.params().len()
        )));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let name_len = c.u32("name length")? as usize;
        let name = std::str::from_utf8(c.take(name_len, "name")?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let id = model
            .params()
            .id(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name:?}")))?;
        if std::mem::replace(&mut seen[id.index()], true) {
            return Err(Error::Checkpoint(format!("parameter {name:?} appears twice")));
        }
        let rank = c.u32("rank")? as usize;
        let shape = (0..rank).map(|_| c.len("dimension")).collect::<Result<Vec<_>>>()?;
        let expected = model.params().get(id).shape();
        if shape != expected {
            return Err(Error::Checkpoint(format!(
                "parameter {name:?} has shape {shape:?}, model expects {expected:?}"
            )));
        }
        let n: usize = shape.iter().product();
        let raw = c.take(n * 8, "values")?;
        let target = model.params_mut().get_mut(id).data_mut();
        for (dst, chunk) in target.iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    if c.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - c.pos
        )));
    }
    Ok((model, meta))
}
