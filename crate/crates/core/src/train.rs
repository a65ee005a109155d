//! Losses, momentum SGD and a deterministic training loop.
//!
//! Given the same model, data, config and seed, [`train_loop`] performs the
//! same floating-point operations in the same order, so final parameters are
//! bit-identical across runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use thiserror::Error;

use crate::autodiff::{log_sum_exp, AutodiffError, GradSet, NodeId, Tape};
use crate::data::{Dataset, Targets};
use crate::graph::{batch_matrix, record_chain, register_params};
use crate::polynet::{init_params, ModelSpec, NormalizationSpec, PolyChain, PolyError, PolyModel};
use crate::rng;
use crate::tensor::DenseTensor;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Poly(#[from] PolyError),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{0}")]
    Mismatch(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite gradient for '{0}'")]
    NonFiniteGradient(String),
    #[error("training diverged at epoch {epoch}, step {step}: {reason}")]
    Diverged {
        epoch: usize,
        step: usize,
        reason: String,
        /// Parameters just before the failing step.
        state: Box<PolyChain>,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Mean of squared differences over all entries.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(TrainError::Mismatch(format!("prediction of length {} vs target of length {}", pred.len(), target.len())));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

/// Softmax cross-entropy `logsumexp(logits) - logits[label]`.
pub fn cross_entropy_loss(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(TrainError::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(TrainError::Mismatch("non-finite logits".into()));
    }
    Ok(log_sum_exp(logits) - logits[label])
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epoch counts after which the rate is multiplied by `lr_decay`.
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 0.0,
            milestones: Vec::new(),
            lr_decay: 0.1,
            seed: 0,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return bad("milestones must be strictly increasing".into());
        }
        if !(self.lr_decay > 0.0) {
            return bad(format!("lr decay factor must be positive, got {}", self.lr_decay));
        }
        Ok(())
    }

    /// Rate in force during epoch `epoch` (1-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| m < epoch).count();
        self.lr * self.lr_decay.powi(passed as i32)
    }
}

/// Momentum buffers keyed by parameter name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SgdState {
    velocity: BTreeMap<String, DenseTensor>,
}

/// One momentum SGD step with decoupled weight decay:
/// `v = μ v + g`, `w -= lr v + lr λ w`.
pub fn sgd_step(params: &mut [(String, &mut DenseTensor)], grads: &GradSet, state: &mut SgdState, lr: f64, cfg: &TrainConfig) -> Result<()> {
    for (name, _) in params.iter() {
        if let Some(g) = grads.get(name) {
            if !g.is_finite() {
                return Err(TrainError::NonFiniteGradient(name.clone()));
            }
        }
    }
    for (name, w) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        if g.shape() != w.shape() {
            return Err(TrainError::Mismatch(format!("gradient for '{name}' has shape {:?}, parameter {:?}", g.shape(), w.shape())));
        }
        let v = state.velocity.entry(name.clone()).or_insert_with(|| DenseTensor::zeros(w.shape()));
        for ((vi, gi), wi) in v.data_mut().iter_mut().zip(g.data()).zip(w.data_mut()) {
            *vi = cfg.momentum * *vi + gi;
            *wi -= lr * *vi + lr * cfg.weight_decay * *wi;
        }
    }
    Ok(())
}

fn check_compatible(chain: &PolyChain, ds: &Dataset) -> Result<()> {
    if chain.input_dim() != ds.input_dim() {
        return Err(TrainError::Mismatch(format!("model takes {} inputs, data has {}", chain.input_dim(), ds.input_dim())));
    }
    if chain.output_dim() != ds.output_dim() {
        return Err(TrainError::Mismatch(format!("model gives {} outputs, data needs {}", chain.output_dim(), ds.output_dim())));
    }
    Ok(())
}

/// Records the mean batch loss for rows `idx` and returns its node.
fn record_loss(tape: &mut Tape, chain: &PolyChain, ds: &Dataset, idx: &[usize]) -> Result<NodeId> {
    let nodes = register_params(tape, chain)?;
    let rows: Vec<&[f64]> = idx.iter().map(|&i| ds.input(i)).collect();
    let z = tape.constant(batch_matrix(&rows));
    let y = record_chain(tape, chain, &nodes, z)?;
    Ok(match &ds.targets {
        Targets::Regression(t) => {
            let tr: Vec<&[f64]> = idx.iter().map(|&i| t.row(i)).collect();
            let target = tape.constant(batch_matrix(&tr));
            let diff = tape.sub(y, target)?;
            let sq = tape.hadamard(diff, diff)?;
            tape.mean(sq)?
        }
        Targets::Classification { labels, .. } => {
            let lse = tape.log_sum_exp(y)?;
            let picked = tape.gather(y, idx.iter().map(|&i| labels[i]).collect())?;
            let nll = tape.sub(lse, picked)?;
            tape.mean(nll)?
        }
    })
}

/// Loss and gradients of the mean loss over rows `idx`.
pub fn batch_gradients(chain: &PolyChain, ds: &Dataset, idx: &[usize]) -> Result<(f64, GradSet)> {
    let mut tape = Tape::new();
    let loss = record_loss(&mut tape, chain, ds, idx)?;
    let value = tape.value(loss).data()[0];
    Ok((value, tape.backward(loss)?))
}

/// Loss (and accuracy for classification) over a whole dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalRow {
    pub loss: f64,
    pub accuracy: Option<f64>,
}

/// Mean loss per sample (MSE averages over every target entry) and accuracy.
pub fn evaluate(model: &impl PolyModel, ds: &Dataset) -> Result<EvalRow> {
    if ds.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if model.input_dim() != ds.input_dim() || model.output_dim() != ds.output_dim() {
        return Err(TrainError::Mismatch(format!(
            "model maps {} -> {}, data has {} inputs and {} outputs",
            model.input_dim(),
            model.output_dim(),
            ds.input_dim(),
            ds.output_dim()
        )));
    }
    let n = ds.len();
    match &ds.targets {
        Targets::Regression(t) => {
            let mut total = 0.0;
            for i in 0..n {
                total += mse_loss(&model.forward(ds.input(i))?, t.row(i))?;
            }
            Ok(EvalRow {
                loss: total / n as f64,
                accuracy: None,
            })
        }
        Targets::Classification { labels, .. } => {
            let (mut total, mut hits) = (0.0, 0usize);
            for i in 0..n {
                let y = model.forward(ds.input(i))?;
                total += cross_entropy_loss(&y, labels[i])?;
                hits += usize::from(argmax(&y) == labels[i]);
            }
            Ok(EvalRow {
                loss: total / n as f64,
                accuracy: Some(hits as f64 / n as f64),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub train_acc: Option<f64>,
    pub val_acc: Option<f64>,
    pub lr: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Metrics {
    pub initial_train_loss: f64,
    pub rows: Vec<MetricsRow>,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,val_loss,train_acc,val_acc,lr,wall_ms";

impl Metrics {
    pub fn final_row(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }

    /// Comma-separated table with [`METRICS_HEADER`]; absent values are empty.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let mut s = format!("{METRICS_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{:.3}",
                r.epoch,
                r.train_loss,
                opt(r.val_loss),
                opt(r.train_acc),
                opt(r.val_acc),
                r.lr,
                r.wall_ms
            );
        }
        s
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub chain: PolyChain,
    pub metrics: Metrics,
}

fn round_to_f32(chain: &mut PolyChain) {
    for (_, t) in chain.trainable_mut() {
        for v in t.data_mut() {
            *v = *v as f32 as f64;
        }
    }
}

/// Trains `chain` in place on `train` with minibatch momentum SGD.
///
/// Each epoch visits the rows in the order of a permutation drawn from
/// substream `epoch` of `cfg.seed`. After the epochs listed in
/// `cfg.milestones` the rate decays and `on_milestone(epoch, &chain)` runs.
/// A non-finite loss or gradient aborts with [`TrainError::Diverged`]
/// carrying the last good parameters.
pub fn train_loop(
    mut chain: PolyChain,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &TrainConfig,
    mut on_milestone: impl FnMut(usize, &PolyChain),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_compatible(&chain, train)?;
    if let Some(v) = val {
        check_compatible(&chain, v)?;
    }
    if cfg.precision == Precision::F32 {
        round_to_f32(&mut chain);
    }
    let mut metrics = Metrics {
        initial_train_loss: evaluate(&chain, train)?.loss,
        rows: Vec::with_capacity(cfg.epochs),
    };
    let mut state = SgdState::default();
    let n = train.len();
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let lr = cfg.lr_at(epoch);
        let order = rng::permutation(&mut rng::substream(cfg.seed, epoch as u64), n);
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let diverged = |reason: String, chain: &PolyChain| TrainError::Diverged {
                epoch,
                step,
                reason,
                state: Box::new(chain.clone()),
            };
            let (loss, grads) = batch_gradients(&chain, train, batch)?;
            if !loss.is_finite() {
                return Err(diverged(format!("loss is {loss}"), &chain));
            }
            let snapshot = chain.clone();
            let mut params = chain.trainable_mut();
            match sgd_step(&mut params, &grads, &mut state, lr, cfg) {
                Ok(()) => {}
                Err(TrainError::NonFiniteGradient(name)) => {
                    return Err(diverged(format!("non-finite gradient for '{name}'"), &snapshot));
                }
                Err(e) => return Err(e),
            }
            if cfg.precision == Precision::F32 {
                round_to_f32(&mut chain);
            }
            if chain.trainable_tensors().iter().any(|(_, t)| !t.is_finite()) {
                return Err(diverged("parameters became non-finite".into(), &snapshot));
            }
        }
        let tr = evaluate(&chain, train)?;
        let va = val.map(|v| evaluate(&chain, v)).transpose()?;
        if !tr.loss.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                step,
                reason: format!("training loss is {}", tr.loss),
                state: Box::new(chain),
            });
        }
        metrics.rows.push(MetricsRow {
            epoch,
            train_loss: tr.loss,
            val_loss: va.map(|r| r.loss),
            train_acc: tr.accuracy,
            val_acc: va.and_then(|r| r.accuracy),
            lr,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });
        if cfg.milestones.contains(&epoch) {
            on_milestone(epoch, &chain);
        }
    }
    Ok(TrainOutcome { chain, metrics })
}

/// Initializes from `spec` (seed `spec.seed`, unset normalization = tanh)
/// and trains.
pub fn train_from_spec(spec: &ModelSpec, train: &Dataset, val: Option<&Dataset>, cfg: &TrainConfig, on_milestone: impl FnMut(usize, &PolyChain)) -> Result<TrainOutcome> {
    let mut spec = spec.clone();
    spec.resolve_norm(NormalizationSpec::tanh());
    let chain = init_params(&spec, spec.seed)?;
    train_loop(chain, train, val, cfg, on_milestone)
}

/// Parameter groups whose gradient is identically zero on `idx`.
pub fn dead_parameters(chain: &PolyChain, ds: &Dataset, idx: &[usize]) -> Result<Vec<String>> {
    let (_, grads) = batch_gradients(chain, ds, idx)?;
    Ok(grads
        .iter()
        .filter(|(_, g)| g.data().iter().all(|&v| v == 0.0))
        .map(|(n, _)| n.to_string())
        .collect())
}
