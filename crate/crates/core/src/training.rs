//! Losses, Adam, the exponential learning-rate schedule and the epoch loop.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gradient_of, Tape, Var};
use crate::csmnet::CsmNet;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::pose::SkeletonSequence;
use crate::rng::{self, Stream};
use crate::sttf::{HeadKind, Pass, SttfModel};
use crate::tensor::Tensor;

/// Samples whose gradients are computed concurrently before being summed in
/// sample order. Fixed, so results do not depend on the thread count.
const GRAD_CHUNK: usize = 8;

/// Something [`fit`] can train.
pub trait Model: Sync {
    type Input: Sync;

    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn head(&self) -> HeadKind;
    /// `1×3` logits or `1×1` score.
    fn forward(&self, tape: &mut Tape, input: &Self::Input, pass: &mut Pass) -> Result<Var>;

    /// Eval-mode outputs.
    fn predict(&self, input: &Self::Input) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, input, &mut Pass::eval())?;
        Ok(tape.value(out).data().to_vec())
    }
}

impl Model for SttfModel {
    type Input = SkeletonSequence;

    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
    fn head(&self) -> HeadKind {
        self.config.head
    }
    fn forward(&self, tape: &mut Tape, input: &SkeletonSequence, pass: &mut Pass) -> Result<Var> {
        SttfModel::forward(self, tape, input, pass)
    }
}

impl Model for CsmNet {
    type Input = Tensor;

    fn params(&self) -> &ParamStore {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
    fn head(&self) -> HeadKind {
        self.config.head
    }
    fn forward(&self, tape: &mut Tape, input: &Tensor, pass: &mut Pass) -> Result<Var> {
        CsmNet::forward(self, tape, input, pass)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Target {
    Class(usize),
    Score(f64),
}

#[derive(Debug, Clone)]
pub struct Example<I> {
    pub input: I,
    pub target: Target,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Mse,
}

impl LossKind {
    pub fn for_head(head: HeadKind) -> Self {
        match head {
            HeadKind::Classify => LossKind::CrossEntropy,
            HeadKind::Regress => LossKind::Mse,
        }
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean over the batch of `-log softmax(logits)[label]`, on the tape.
pub fn cross_entropy_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

/// Mean squared error, on the tape.
pub fn mse_loss(tape: &mut Tape, pred: Var, target: &[f64]) -> Result<Var> {
    tape.mse(pred, target)
}

fn sample_loss(tape: &mut Tape, out: Var, target: Target, kind: LossKind) -> Result<Var> {
    match (kind, target) {
        (LossKind::CrossEntropy, Target::Class(c)) => cross_entropy_loss(tape, out, &[c]),
        (LossKind::Mse, Target::Score(s)) => mse_loss(tape, out, &[s]),
        _ => Err(Error::Data(format!("target {target:?} does not fit loss {kind:?}"))),
    }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient.
pub fn adam_step(params: &mut ParamStore, grads: &HashMap<String, Tensor>, state: &mut AdamState, lr: f64) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (name, theta) in params.iter_mut() {
        let Some(g) = grads.get(name) else { continue };
        if g.shape() != theta.shape() {
            return Err(Error::dim("adam_step", theta.shape(), g.shape()));
        }
        let m = state
            .m
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(theta.shape()));
        let v = state
            .v
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(theta.shape()));
        for (((th, &gi), mi), vi) in theta
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *th -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Epoch loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Multiplicative learning-rate decay per epoch.
    pub decay: f64,
    pub seed: u64,
    /// Fraction of the data held out to pick the best epoch.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 800,
            batch_size: 64,
            lr0: 1e-3,
            decay: 0.98,
            seed: 0,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 {} must be a positive number", self.lr0)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("decay {} outside (0, 1]", self.decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        Ok(())
    }
}

/// `lr0 · decay^epoch`.
pub fn lr_at_epoch(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr0 * cfg.decay.powi(epoch as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Validation accuracy (classification) or MSE (regression).
    pub val_metric: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_loss,val_metric\n");
        for r in &self.epochs {
            let val = r.val_metric.map(|v| format!("{v}")).unwrap_or_default();
            s.push_str(&format!("{},{},{},{}\n", r.epoch, r.lr, r.train_loss, val));
        }
        s
    }
}

/// Holds out `ceil(fraction·n)` examples (seeded) when at least 10 are available.
pub fn split_validation(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    if fraction <= 0.0 || n < 10 {
        return (idx, Vec::new());
    }
    idx.shuffle(&mut rng::stream(seed, Stream::Split, 0));
    let n_val = ((n as f64) * fraction).ceil() as usize;
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Mean loss of `model` (eval mode) over `data`.
pub fn evaluate_loss<M: Model>(model: &M, data: &[Example<M::Input>]) -> Result<f64> {
    let kind = LossKind::for_head(model.head());
    let losses: Vec<f64> = data
        .par_iter()
        .map(|ex| {
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &ex.input, &mut Pass::eval())?;
            let l = sample_loss(&mut tape, out, ex.target, kind)?;
            Ok(tape.value(l).item())
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

/// Validation accuracy or MSE, plus mean loss for tie-breaking.
fn validation_metric<M: Model>(model: &M, data: &[&Example<M::Input>]) -> Result<(f64, f64)> {
    let kind = LossKind::for_head(model.head());
    let per: Vec<(f64, f64)> = data
        .par_iter()
        .map(|ex| {
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &ex.input, &mut Pass::eval())?;
            let pred = tape.value(out).data().to_vec();
            let l = sample_loss(&mut tape, out, ex.target, kind)?;
            let metric = match ex.target {
                Target::Class(c) => f64::from(u8::from(argmax(&pred) == c)),
                Target::Score(s) => (pred[0] - s) * (pred[0] - s),
            };
            Ok((metric, tape.value(l).item()))
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    Ok((per.iter().map(|p| p.0).sum::<f64>() / n, per.iter().map(|p| p.1).sum::<f64>() / n))
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn check_targets<I>(data: &[Example<I>], kind: LossKind) -> Result<()> {
    for (i, ex) in data.iter().enumerate() {
        let ok = match (kind, ex.target) {
            (LossKind::CrossEntropy, Target::Class(c)) => c < 3,
            (LossKind::Mse, Target::Score(s)) => s.is_finite(),
            _ => false,
        };
        if !ok {
            return Err(Error::Data(format!(
                "example {i}: target {:?} does not fit loss {kind:?}",
                ex.target
            )));
        }
    }
    Ok(())
}

/// Mini-batch Adam training with a seeded shuffle per epoch and dropout
/// active. When a validation split exists, the parameters of the best
/// validation epoch are restored at the end.
pub fn fit<M: Model>(model: &mut M, data: &[Example<M::Input>], cfg: &TrainConfig) -> Result<History> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let kind = LossKind::for_head(model.head());
    check_targets(data, kind)?;

    let (mut train_idx, val_idx) = split_validation(data.len(), cfg.val_fraction, cfg.seed);
    let val: Vec<&Example<M::Input>> = val_idx.iter().map(|&i| &data[i]).collect();
    let mut state = AdamState::default();
    let mut history = History {
        epochs: Vec::with_capacity(cfg.epochs),
        best_epoch: cfg.epochs.saturating_sub(1),
    };
    let mut best: Option<((f64, f64), ParamStore)> = None;

    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(cfg, epoch);
        train_idx.shuffle(&mut rng::stream(cfg.seed, Stream::Shuffle, epoch as u64));
        let mut loss_sum = 0.0;
        for batch in train_idx.chunks(cfg.batch_size) {
            let (batch_loss, grads) = batch_gradient(model, data, batch, kind, cfg.seed, epoch)?;
            loss_sum += batch_loss * batch.len() as f64;
            adam_step(model.params_mut(), &grads, &mut state, lr)?;
        }
        let train_loss = loss_sum / train_idx.len() as f64;

        let val_metric = if val.is_empty() {
            None
        } else {
            let (metric, vloss) = validation_metric(model, &val)?;
            // higher accuracy is better; lower MSE is better
            let score = match kind {
                LossKind::CrossEntropy => (metric, -vloss),
                LossKind::Mse => (-metric, -vloss),
            };
            if best.as_ref().is_none_or(|(b, _)| score > *b) {
                best = Some((score, model.params().clone()));
                history.best_epoch = epoch;
            }
            Some(metric)
        };
        log::debug!("epoch {epoch}: lr {lr:.3e} loss {train_loss:.5} val {val_metric:?}");
        history.epochs.push(EpochRecord {
            epoch,
            lr,
            train_loss,
            val_metric,
        });
    }
    if let Some((_, params)) = best {
        *model.params_mut() = params;
    }
    Ok(history)
}

/// Mean loss and mean gradient over one batch. Per-sample dropout streams are
/// keyed by (epoch, sample index).
fn batch_gradient<M: Model>(
    model: &M,
    data: &[Example<M::Input>],
    batch: &[usize],
    kind: LossKind,
    seed: u64,
    epoch: usize,
) -> Result<(f64, HashMap<String, Tensor>)> {
    let mut total: HashMap<String, Tensor> = model
        .params()
        .iter()
        .map(|(n, t)| (n.to_string(), Tensor::zeros(t.shape())))
        .collect();
    let mut loss = 0.0;
    for chunk in batch.chunks(GRAD_CHUNK) {
        let parts: Vec<(f64, HashMap<String, Tensor>)> = chunk
            .par_iter()
            .map(|&i| {
                let ex = &data[i];
                let rng = rng::stream(seed, Stream::Dropout, rng::index2(epoch as u64, i as u64));
                let mut pass = Pass::train(rng);
                let mut tape = Tape::new();
                let out = model.forward(&mut tape, &ex.input, &mut pass)?;
                let l = sample_loss(&mut tape, out, ex.target, kind)?;
                let g = gradient_of(&tape, l, model.params())?;
                Ok((tape.value(l).item(), g))
            })
            .collect::<Result<_>>()?;
        for (l, g) in parts {
            loss += l;
            for (name, acc) in total.iter_mut() {
                for (a, b) in acc.data_mut().iter_mut().zip(g[name].data()) {
                    *a += b;
                }
            }
        }
    }
    let n = batch.len() as f64;
    for t in total.values_mut() {
        t.data_mut().iter_mut().for_each(|x| *x /= n);
    }
    Ok((loss / n, total))
}
