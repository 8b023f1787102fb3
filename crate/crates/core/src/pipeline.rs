//! Glue from labeled sequences to trained models, branch predictions and metrics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::SavedModel;
use crate::csmnet::{CsmConfig, CsmNet};
use crate::error::{Error, Result};
use crate::eval::{
    bin_score, compute_metrics, confusion_normalized, fuse_predictions, Branch, BranchPrediction, FusedPrediction,
    MetricsReport, Output, ScoreBinning,
};
use crate::pose::{Label, SkeletonSequence};
use crate::sttf::{HeadKind, ModelConfig, SttfModel};
use crate::training::{fit, Example, History, Model, Target, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Tfn,
    Csm,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tfn" => Ok(ModelKind::Tfn),
            "csm" => Ok(ModelKind::Csm),
            _ => Err(Error::Config(format!("unknown model kind `{s}` (expected tfn or csm)"))),
        }
    }
}

/// Everything a training run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelKind,
    pub tfn: ModelConfig,
    pub csm: CsmConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelKind::Tfn,
            tfn: ModelConfig::default(),
            csm: CsmConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn head(&self) -> HeadKind {
        match self.model {
            ModelKind::Tfn => self.tfn.head,
            ModelKind::Csm => self.csm.head,
        }
    }
}

/// Training target of a labeled sequence for `head`.
pub fn target_for(seq: &SkeletonSequence, head: HeadKind) -> Result<Target> {
    match (head, seq.label) {
        (HeadKind::Classify, Some(Label::Class(c))) => Ok(Target::Class(c.index())),
        (HeadKind::Regress, Some(Label::Score(s))) => Ok(Target::Score(s)),
        (_, label) => Err(Error::Data(format!(
            "{}: label {label:?} does not suit a {head:?} head",
            seq.source_id
        ))),
    }
}

fn examples<I: Send>(
    seqs: &[SkeletonSequence],
    head: HeadKind,
    input: impl Fn(&SkeletonSequence) -> Result<I> + Sync,
) -> Result<Vec<Example<I>>> {
    seqs.par_iter()
        .map(|s| {
            Ok(Example {
                input: input(s)?,
                target: target_for(s, head)?,
            })
        })
        .collect()
}

/// Builds the configured model from the run seed and fits it to `seqs`.
pub fn train_model(run: &RunConfig, seqs: &[SkeletonSequence]) -> Result<(SavedModel, History)> {
    let seed = run.train.seed;
    match run.model {
        ModelKind::Tfn => {
            let mut m = SttfModel::new(run.tfn.clone(), seed)?;
            let data = examples(seqs, run.tfn.head, |s| Ok(s.clone()))?;
            let h = fit(&mut m, &data, &run.train)?;
            Ok((SavedModel::Tfn(m), h))
        }
        ModelKind::Csm => {
            let mut m = CsmNet::new(run.csm.clone(), seed)?;
            let data = examples(seqs, run.csm.head, |s| m.prepare(s))?;
            let h = fit(&mut m, &data, &run.train)?;
            Ok((SavedModel::Csm(m), h))
        }
    }
}

fn to_output(values: Vec<f64>, head: HeadKind) -> Output {
    match head {
        HeadKind::Classify => Output::Logits(values),
        HeadKind::Regress => Output::Score(values[0]),
    }
}

/// Eval-mode predictions of one model for every sequence, in input order.
pub fn predict_branch(model: &SavedModel, seqs: &[SkeletonSequence]) -> Result<Vec<BranchPrediction>> {
    let head = model.head();
    seqs.par_iter()
        .map(|s| {
            let (branch, values) = match model {
                SavedModel::Tfn(m) => (Branch::Tfn, Model::predict(m, s)?),
                SavedModel::Csm(m) => (Branch::Csm, Model::predict(m, &m.prepare(s)?)?),
            };
            Ok(BranchPrediction {
                branch,
                source_id: s.source_id.clone(),
                output: to_output(values, head),
            })
        })
        .collect()
}

/// Fuses branches and scores the result against the sequence labels.
pub fn evaluate(
    branches: &[Vec<BranchPrediction>],
    seqs: &[SkeletonSequence],
    bins: &ScoreBinning,
) -> Result<(Vec<FusedPrediction>, MetricsReport)> {
    let fused = fuse_predictions(branches, bins)?;
    let by_id: std::collections::HashMap<&str, &SkeletonSequence> =
        seqs.iter().map(|s| (s.source_id.as_str(), s)).collect();
    let mut labels = Vec::with_capacity(fused.len());
    let mut scores = Vec::new();
    let mut targets = Vec::new();
    for f in &fused {
        let seq = by_id
            .get(f.source_id.as_str())
            .ok_or_else(|| Error::Contract(format!("prediction for unknown sample `{}`", f.source_id)))?;
        match (seq.label, f.score) {
            (Some(Label::Class(c)), None) => labels.push(c.index()),
            (Some(Label::Score(t)), Some(s)) => {
                labels.push(bin_score(t, bins).index());
                scores.push(s);
                targets.push(t);
            }
            (label, _) => {
                return Err(Error::Data(format!(
                    "{}: label {label:?} does not match the prediction mode",
                    f.source_id
                )))
            }
        }
    }
    let preds: Vec<usize> = fused.iter().map(|f| f.class.index()).collect();
    let cm = confusion_normalized(&labels, &preds)?;
    let regression = (!scores.is_empty()).then_some((scores.as_slice(), targets.as_slice()));
    let report = compute_metrics(&cm, regression)?;
    Ok((fused, report))
}

/// Gradient check of a whole transformer (dropout off) on a random sequence.
/// The loss is cross-entropy against class 0, or MSE against 5.0 for a
/// regression head.
pub fn transformer_gradcheck(config: &ModelConfig, seed: u64, eps: f64) -> Result<crate::gradcheck::GradCheckReport> {
    use crate::rng::{self, Rng, Stream};
    let config = ModelConfig {
        dropout: 0.0,
        ..config.clone()
    };
    let model = SttfModel::new(config.clone(), seed)?;
    let mut r = rng::stream(seed, Stream::Test, 0);
    let data = (0..config.frames * 4 * config.joints).map(|_| r.random::<f64>()).collect();
    let seq = SkeletonSequence::new(data, config.frames, config.joints, "gradcheck")?;
    crate::gradcheck::check_gradients(
        |tape, p| {
            let m = SttfModel {
                config: config.clone(),
                params: p.clone(),
            };
            let out = m.forward(tape, &seq, &mut crate::sttf::Pass::eval())?;
            match config.head {
                HeadKind::Classify => tape.cross_entropy(out, &[0]),
                HeadKind::Regress => tape.mse(out, &[5.0]),
            }
        },
        &model.params,
        eps,
    )
}
