//! Late fusion, score binning, confusion matrices and summary metrics.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::SyncClass;
use crate::tensor::softmax_in_place;
use crate::training::argmax;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Tfn,
    Csm,
    External,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Tfn => "tfn",
            Branch::Csm => "csm",
            Branch::External => "external",
        }
    }
}

impl std::str::FromStr for Branch {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tfn" => Ok(Branch::Tfn),
            "csm" => Ok(Branch::Csm),
            "external" => Ok(Branch::External),
            _ => Err(Error::Data(format!("unknown branch `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Output {
    Logits(Vec<f64>),
    Score(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchPrediction {
    pub branch: Branch,
    pub source_id: String,
    pub output: Output,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedPrediction {
    pub source_id: String,
    /// Averaged class probabilities (classification only).
    pub probs: Option<Vec<f64>>,
    /// Averaged score (regression only).
    pub score: Option<f64>,
    pub class: SyncClass,
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let mut p = v.to_vec();
    softmax_in_place(&mut p);
    p
}

/// Averages softmax probabilities (or scores) across branches per sample.
/// Every branch must cover the same ids; output follows the first branch's order.
pub fn fuse_predictions(branches: &[Vec<BranchPrediction>], bins: &ScoreBinning) -> Result<Vec<FusedPrediction>> {
    let Some(first) = branches.first() else {
        return Err(Error::Contract("fusion needs at least one branch".into()));
    };
    let indexed: Vec<HashMap<&str, &Output>> = branches
        .iter()
        .map(|b| b.iter().map(|p| (p.source_id.as_str(), &p.output)).collect())
        .collect();
    for (b, map) in branches.iter().zip(&indexed) {
        if b.len() != first.len() || map.len() != b.len() || first.iter().any(|p| !map.contains_key(p.source_id.as_str())) {
            return Err(Error::Contract("branches cover different sample ids".into()));
        }
    }
    let k = branches.len() as f64;
    first
        .iter()
        .map(|p| {
            let outs: Vec<&Output> = indexed.iter().map(|m| m[p.source_id.as_str()]).collect();
            match outs[0] {
                Output::Logits(l0) => {
                    let mut acc = vec![0.0; l0.len()];
                    for o in &outs {
                        let Output::Logits(l) = o else {
                            return Err(Error::Contract("cannot fuse logits with scores".into()));
                        };
                        if l.len() != acc.len() {
                            return Err(Error::Contract("logit widths differ across branches".into()));
                        }
                        for (a, q) in acc.iter_mut().zip(softmax(l)) {
                            *a += q;
                        }
                    }
                    acc.iter_mut().for_each(|a| *a /= k);
                    let class = SyncClass::from_index(argmax(&acc))
                        .ok_or_else(|| Error::Contract(format!("{} classes in logits", acc.len())))?;
                    Ok(FusedPrediction {
                        source_id: p.source_id.clone(),
                        probs: Some(acc),
                        score: None,
                        class,
                    })
                }
                Output::Score(_) => {
                    let mut sum = 0.0;
                    for o in &outs {
                        let Output::Score(s) = o else {
                            return Err(Error::Contract("cannot fuse scores with logits".into()));
                        };
                        sum += s;
                    }
                    let score = sum / k;
                    Ok(FusedPrediction {
                        source_id: p.source_id.clone(),
                        probs: None,
                        score: Some(score),
                        class: bin_score(score, bins),
                    })
                }
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreBinning {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for ScoreBinning {
    fn default() -> Self {
        ScoreBinning { alpha: 7.16, beta: 8.36 }
    }
}

/// `< α` Unsync, `[α, β)` ModSync, `≥ β` Sync.
pub fn bin_score(score: f64, bins: &ScoreBinning) -> SyncClass {
    if score >= bins.beta {
        SyncClass::Sync
    } else if score >= bins.alpha {
        SyncClass::ModSync
    } else {
        SyncClass::Unsync
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    /// Rows are labels, columns predictions.
    pub counts: [[u64; 3]; 3],
    /// Row percentages; all zero for a label that never occurs.
    pub normalized: [[f64; 3]; 3],
    pub empty_rows: [bool; 3],
}

impl ConfusionMatrix {
    pub fn from_counts(counts: [[u64; 3]; 3]) -> Self {
        let mut normalized = [[0.0; 3]; 3];
        let mut empty_rows = [false; 3];
        for (r, row) in counts.iter().enumerate() {
            let total: u64 = row.iter().sum();
            empty_rows[r] = total == 0;
            if total > 0 {
                for (c, &n) in row.iter().enumerate() {
                    normalized[r][c] = 100.0 * n as f64 / total as f64;
                }
            }
        }
        ConfusionMatrix {
            counts,
            normalized,
            empty_rows,
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

pub fn confusion_normalized(labels: &[usize], predictions: &[usize]) -> Result<ConfusionMatrix> {
    if labels.len() != predictions.len() {
        return Err(Error::Contract(format!(
            "{} labels but {} predictions",
            labels.len(),
            predictions.len()
        )));
    }
    let mut counts = [[0u64; 3]; 3];
    for (&l, &p) in labels.iter().zip(predictions) {
        if l > 2 || p > 2 {
            return Err(Error::Contract(format!("class pair ({l}, {p}) outside 0..3")));
        }
        counts[l][p] += 1;
    }
    Ok(ConfusionMatrix::from_counts(counts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Per-class recall in percent.
    pub recall: [f64; 3],
    /// Micro accuracy in percent: trace over total.
    pub accuracy: f64,
    pub macro_f1: f64,
    pub mse: Option<f64>,
    pub confusion: ConfusionMatrix,
}

/// Recall, accuracy and F1 from `cm`; MSE when regression outputs are given.
pub fn compute_metrics(cm: &ConfusionMatrix, regression: Option<(&[f64], &[f64])>) -> Result<MetricsReport> {
    let c = &cm.counts;
    let total = cm.total();
    let trace: u64 = (0..3).map(|i| c[i][i]).sum();
    let mut recall = [0.0; 3];
    let mut f1 = 0.0;
    for k in 0..3 {
        let row: u64 = c[k].iter().sum();
        let col: u64 = (0..3).map(|r| c[r][k]).sum();
        let rec = if row > 0 { c[k][k] as f64 / row as f64 } else { 0.0 };
        let prec = if col > 0 { c[k][k] as f64 / col as f64 } else { 0.0 };
        recall[k] = 100.0 * rec;
        if rec + prec > 0.0 {
            f1 += 2.0 * rec * prec / (rec + prec) / 3.0;
        }
    }
    let mse = match regression {
        None => None,
        Some((pred, target)) => {
            if pred.len() != target.len() || pred.is_empty() {
                return Err(Error::Contract(format!(
                    "{} predictions for {} targets",
                    pred.len(),
                    target.len()
                )));
            }
            let s: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
            Some(s / pred.len() as f64)
        }
    };
    Ok(MetricsReport {
        recall,
        accuracy: if total > 0 { 100.0 * trace as f64 / total as f64 } else { 0.0 },
        macro_f1: f1,
        mse,
        confusion: cm.clone(),
    })
}

impl MetricsReport {
    /// Plain-text summary with the normalized confusion matrix.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10}{:>10}{:>10}{:>10}", "label\\pred", "Sync", "ModSync", "Unsync");
        for (r, class) in SyncClass::ALL.iter().enumerate() {
            let _ = write!(s, "{:<10}", class.name());
            for v in self.confusion.normalized[r] {
                let _ = write!(s, "{v:>10.2}");
            }
            if self.confusion.empty_rows[r] {
                s.push_str("  (no samples)");
            }
            s.push('\n');
        }
        let _ = writeln!(
            s,
            "recall %: {:.2} / {:.2} / {:.2}",
            self.recall[0], self.recall[1], self.recall[2]
        );
        let _ = writeln!(s, "accuracy %: {:.2}", self.accuracy);
        let _ = writeln!(s, "macro F1: {:.4}", self.macro_f1);
        if let Some(m) = self.mse {
            let _ = writeln!(s, "MSE: {m:.4}");
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Predictions CSV
// ---------------------------------------------------------------------------

/// `source_id,branch,p0,p1,p2` with softmax probabilities, or
/// `source_id,branch,score`.
pub fn predictions_to_csv(preds: &[BranchPrediction]) -> String {
    let regression = matches!(preds.first().map(|p| &p.output), Some(Output::Score(_)));
    let mut s = String::from(if regression {
        "source_id,branch,score\n"
    } else {
        "source_id,branch,p0,p1,p2\n"
    });
    for p in preds {
        let _ = write!(s, "{},{}", p.source_id, p.branch.name());
        match &p.output {
            Output::Logits(l) => softmax(l).iter().for_each(|q| {
                let _ = write!(s, ",{q}");
            }),
            Output::Score(v) => {
                let _ = write!(s, ",{v}");
            }
        }
        s.push('\n');
    }
    s
}

/// Parses a predictions CSV. Probabilities are turned back into logits by `ln`,
/// which softmax maps back to the same probabilities.
pub fn predictions_from_csv(text: &str) -> Result<Vec<BranchPrediction>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Data("empty predictions file".into()))?
        .split(',')
        .map(str::trim)
        .collect();
    let regression = match header.as_slice() {
        ["source_id", "branch", "score"] => true,
        ["source_id", "branch", "p0", "p1", "p2"] => false,
        _ => return Err(Error::Data(format!("unrecognized predictions header {header:?}"))),
    };
    lines
        .enumerate()
        .map(|(i, line)| {
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != header.len() {
                return Err(Error::Data(format!("predictions row {}: expected {} columns", i + 1, header.len())));
            }
            let nums = cols[2..]
                .iter()
                .map(|v| {
                    v.parse::<f64>()
                        .ok()
                        .filter(|x| x.is_finite())
                        .ok_or_else(|| Error::Data(format!("predictions row {}: bad number `{v}`", i + 1)))
                })
                .collect::<Result<Vec<f64>>>()?;
            let output = if regression {
                Output::Score(nums[0])
            } else {
                if nums.iter().any(|&p| p < 0.0) {
                    return Err(Error::Data(format!("predictions row {}: negative probability", i + 1)));
                }
                Output::Logits(nums.iter().map(|&p| p.max(f64::MIN_POSITIVE).ln()).collect())
            };
            Ok(BranchPrediction {
                branch: cols[1].parse()?,
                source_id: cols[0].to_string(),
                output,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(id: &str, l: &[f64]) -> BranchPrediction {
        BranchPrediction {
            branch: Branch::Tfn,
            source_id: id.into(),
            output: Output::Logits(l.to_vec()),
        }
    }

    #[test]
    fn fusion_averages_probabilities() {
        let bins = ScoreBinning::default();
        let a = vec![logits("x", &[2.0, 0.0, 0.0])];
        let b = vec![logits("x", &[0.0, 1.0, 0.0])];
        let fused = fuse_predictions(&[a.clone(), b], &bins).unwrap();
        let e2 = 2f64.exp();
        let p0 = (e2 / (e2 + 2.0) + 1.0 / (2.0 + 1f64.exp())) / 2.0;
        assert!((fused[0].probs.as_ref().unwrap()[0] - p0).abs() < 1e-15);
        assert_eq!(fused[0].class, SyncClass::Sync);
        let single = fuse_predictions(&[a.clone()], &bins).unwrap();
        assert_eq!(single[0].probs.as_ref().unwrap(), &softmax(&[2.0, 0.0, 0.0]));
        assert_eq!(fuse_predictions(&[a.clone(), a.clone(), a], &bins).unwrap(), single);
    }

    #[test]
    fn fusion_of_scores_and_misalignment() {
        let bins = ScoreBinning::default();
        let s = |id: &str, v| BranchPrediction {
            branch: Branch::Csm,
            source_id: id.into(),
            output: Output::Score(v),
        };
        let fused = fuse_predictions(&[vec![s("a", 0.4)], vec![s("a", 0.6)]], &bins).unwrap();
        assert_eq!(fused[0].score, Some(0.5));
        assert!(matches!(
            fuse_predictions(&[vec![s("a", 0.4)], vec![s("b", 0.6)]], &bins),
            Err(Error::Contract(_))
        ));
        assert!(fuse_predictions(&[vec![s("a", 0.4)], vec![logits("a", &[0.0; 3])]], &bins).is_err());
    }

    #[test]
    fn binning_rule() {
        let b = ScoreBinning::default();
        assert_eq!(bin_score(7.64, &b), SyncClass::ModSync);
        assert_eq!(bin_score(9.0, &b), SyncClass::Sync);
        assert_eq!(bin_score(5.0, &b), SyncClass::Unsync);
        assert_eq!(bin_score(8.36, &b), SyncClass::Sync);
        assert_eq!(bin_score(7.16, &b), SyncClass::ModSync);
    }

    #[test]
    fn confusion_rows_and_flags() {
        let cm = confusion_normalized(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap();
        assert_eq!(cm.normalized[0], [50.0, 50.0, 0.0]);
        assert_eq!(cm.empty_rows, [false, false, true]);
        assert!(confusion_normalized(&[0], &[]).is_err());
        let perfect = confusion_normalized(&[0, 1, 2], &[0, 1, 2]).unwrap();
        let m = compute_metrics(&perfect, None).unwrap();
        assert_eq!((m.accuracy, m.macro_f1), (100.0, 1.0));
    }

    #[test]
    fn csv_round_trip() {
        let preds = vec![logits("a", &[0.5, -1.0, 2.0]), logits("b", &[0.0, 0.0, 0.0])];
        let back = predictions_from_csv(&predictions_to_csv(&preds)).unwrap();
        for (p, q) in preds.iter().zip(&back) {
            let (Output::Logits(x), Output::Logits(y)) = (&p.output, &q.output) else { panic!() };
            let (px, py) = (softmax(x), softmax(y));
            assert!(px.iter().zip(&py).all(|(u, v)| (u - v).abs() < 1e-12));
        }
        assert!(predictions_from_csv("id,x\n").is_err());
    }
}
