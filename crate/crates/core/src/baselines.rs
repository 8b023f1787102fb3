//! Classical synchrony measures and a linear max-margin classifier over them.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::pose::SkeletonSequence;
use crate::similarity::{compute_csm, SimilarityMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMethod {
    Dtw,
    Corr2d,
    Crossrec,
}

impl BaselineMethod {
    pub fn name(self) -> &'static str {
        match self {
            BaselineMethod::Dtw => "dtw",
            BaselineMethod::Corr2d => "corr2d",
            BaselineMethod::Crossrec => "crossrec",
        }
    }
}

impl std::str::FromStr for BaselineMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dtw" => Ok(BaselineMethod::Dtw),
            "corr2d" => Ok(BaselineMethod::Corr2d),
            "crossrec" => Ok(BaselineMethod::Crossrec),
            _ => Err(Error::Config(format!("unknown baseline method `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineFeatures {
    pub method: BaselineMethod,
    pub vector: Vec<f64>,
    pub source_id: String,
}

// ---------------------------------------------------------------------------
// DTW
// ---------------------------------------------------------------------------

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Unwindowed DTW with Euclidean frame cost.
pub fn dtw_distance<A: AsRef<[f64]>, B: AsRef<[f64]>>(a: &[A], b: &[B]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Data("DTW of an empty sequence".into()));
    }
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m];
    let mut cur = vec![0.0; m];
    for (i, ai) in a.iter().enumerate() {
        for (j, bj) in b.iter().enumerate() {
            let c = euclid(ai.as_ref(), bj.as_ref());
            let best = match (i, j) {
                (0, 0) => 0.0,
                (0, _) => cur[j - 1],
                (_, 0) => prev[0],
                _ => prev[j].min(cur[j - 1]).min(prev[j - 1]),
            };
            cur[j] = c + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m - 1])
}

/// Whole-pose DTW distance followed by one DTW distance per joint.
pub fn dtw_features(seq: &SkeletonSequence) -> Result<BaselineFeatures> {
    let f = seq.frames();
    let a: Vec<&[f64]> = (0..f).map(|t| seq.pose(t, 0)).collect();
    let b: Vec<&[f64]> = (0..f).map(|t| seq.pose(t, 1)).collect();
    let mut vector = vec![dtw_distance(&a, &b)?];
    for k in 0..seq.joints() {
        let ja: Vec<[f64; 2]> = (0..f).map(|t| seq.coord(t, 0, k)).collect();
        let jb: Vec<[f64; 2]> = (0..f).map(|t| seq.coord(t, 1, k)).collect();
        vector.push(dtw_distance(&ja, &jb)?);
    }
    Ok(BaselineFeatures {
        method: BaselineMethod::Dtw,
        vector,
        source_id: seq.source_id.clone(),
    })
}

// ---------------------------------------------------------------------------
// Correlation
// ---------------------------------------------------------------------------

/// Pearson correlation; 0 when either side has no variance.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len());
    let constant = |v: &[f64]| v.iter().all(|&a| a == v[0]);
    if n == 0 || constant(&x[..n]) || constant(&y[..n]) {
        return 0.0;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x[..n].iter().zip(&y[..n]) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Per joint, correlation of the two persons' x then y trajectories.
pub fn correlation_features(seq: &SkeletonSequence) -> BaselineFeatures {
    let mut vector = Vec::with_capacity(2 * seq.joints());
    for k in 0..seq.joints() {
        for c in 0..2 {
            vector.push(pearson(&seq.trajectory(0, k, c), &seq.trajectory(1, k, c)));
        }
    }
    BaselineFeatures {
        method: BaselineMethod::Corr2d,
        vector,
        source_id: seq.source_id.clone(),
    }
}

// ---------------------------------------------------------------------------
// Cross-recurrence
// ---------------------------------------------------------------------------

/// Default recurrence radius: a tenth of the largest pose distance in `csm`.
pub fn default_eps(csm: &SimilarityMatrix) -> f64 {
    0.1 * csm.values().iter().map(|v| -v).fold(0.0, f64::max)
}

/// `[RR, DET, longest diagonal line / f]` of the thresholded matrix.
/// `eps = None` uses [`default_eps`]; a matrix with no spread gets radius 0
/// and only exact matches recur.
pub fn cross_recurrence_features(csm: &SimilarityMatrix, eps: Option<f64>, source_id: &str) -> Result<BaselineFeatures> {
    let eps = match eps {
        Some(e) if !(e > 0.0) => return Err(Error::Parameter(format!("recurrence radius {e} must be positive"))),
        Some(e) => e,
        None => default_eps(csm),
    };
    let n = csm.size();
    let rec = |i: usize, j: usize| -csm.at(i, j) <= eps;
    let mut points = 0usize;
    let mut on_lines = 0usize;
    let mut longest = 0usize;
    // walk each diagonal once, measuring runs
    for d in 0..(2 * n).saturating_sub(1) {
        let (i0, j0) = if d < n { (n - 1 - d, 0) } else { (0, d + 1 - n) };
        let mut run = 0usize;
        let mut flush = |run: usize| {
            if run >= 2 {
                on_lines += run;
            }
            longest = longest.max(run);
        };
        let mut k = 0;
        while i0 + k < n && j0 + k < n {
            if rec(i0 + k, j0 + k) {
                points += 1;
                run += 1;
            } else {
                flush(run);
                run = 0;
            }
            k += 1;
        }
        flush(run);
    }
    let total = (n * n).max(1) as f64;
    let vector = vec![
        points as f64 / total,
        if points > 0 { on_lines as f64 / points as f64 } else { 0.0 },
        longest as f64 / n.max(1) as f64,
    ];
    Ok(BaselineFeatures {
        method: BaselineMethod::Crossrec,
        vector,
        source_id: source_id.to_string(),
    })
}

pub fn extract_features(method: BaselineMethod, seq: &SkeletonSequence, eps: Option<f64>) -> Result<BaselineFeatures> {
    match method {
        BaselineMethod::Dtw => dtw_features(seq),
        BaselineMethod::Corr2d => Ok(correlation_features(seq)),
        BaselineMethod::Crossrec => cross_recurrence_features(&compute_csm(seq)?, eps, &seq.source_id),
    }
}

/// CSV with header `source_id,method,f1..fn`.
pub fn features_to_csv(features: &[BaselineFeatures]) -> String {
    let dim = features.first().map_or(0, |f| f.vector.len());
    let mut s = String::from("source_id,method");
    for i in 1..=dim {
        let _ = write!(s, ",f{i}");
    }
    s.push('\n');
    for f in features {
        let _ = write!(s, "{},{}", f.source_id, f.method.name());
        for v in &f.vector {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

// ---------------------------------------------------------------------------
// Linear classifier
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HingeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub reg: f64,
}

impl Default for HingeConfig {
    fn default() -> Self {
        HingeConfig {
            epochs: 500,
            lr: 0.1,
            reg: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub method: BaselineMethod,
    /// `classes × dim`, acting on standardized features.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// SHA-256 over the training ids and labels.
    pub trained_on: String,
}

impl LinearClassifier {
    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.mean.len() {
            return Err(Error::Contract(format!(
                "feature length {} does not match classifier dimension {}",
                x.len(),
                self.mean.len()
            )));
        }
        let z = standardize(x, &self.mean, &self.std);
        Ok(self
            .weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| dot(w, &z) + b)
            .collect())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn standardize(x: &[f64], mean: &[f64], std: &[f64]) -> Vec<f64> {
    x.iter().zip(mean).zip(std).map(|((v, m), s)| (v - m) / s).collect()
}

fn fingerprint(features: &[BaselineFeatures], labels: &[usize]) -> String {
    let mut h = Sha256::new();
    for (f, l) in features.iter().zip(labels) {
        h.update(f.source_id.as_bytes());
        h.update([0, *l as u8]);
    }
    hex::encode(h.finalize())
}

/// Mean one-vs-rest squared-hinge loss plus the L2 penalty, on standardized data.
pub fn hinge_objective(weights: &[Vec<f64>], bias: &[f64], z: &[Vec<f64>], labels: &[usize], reg: f64) -> f64 {
    let n = z.len() as f64;
    let mut total = 0.0;
    for (c, (w, b)) in weights.iter().zip(bias).enumerate() {
        for (x, &l) in z.iter().zip(labels) {
            let y = if l == c { 1.0 } else { -1.0 };
            let slack = (1.0 - y * (dot(w, x) + b)).max(0.0);
            total += slack * slack / n;
        }
        total += 0.5 * reg * dot(w, w);
    }
    total
}

/// One-vs-rest squared hinge with L2 penalty, full-batch gradient descent from
/// zero weights.
pub fn train_linear_hinge(
    features: &[BaselineFeatures],
    labels: &[usize],
    classes: usize,
    cfg: &HingeConfig,
) -> Result<LinearClassifier> {
    if features.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} feature vectors but {} labels",
            features.len(),
            labels.len()
        )));
    }
    for c in 0..classes {
        if !labels.contains(&c) {
            return Err(Error::Data(format!("class {c} absent from training data")));
        }
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Data(format!("label {bad} out of range for {classes} classes")));
    }
    let method = features[0].method;
    let dim = features[0].vector.len();
    if features.iter().any(|f| f.vector.len() != dim || f.method != method) {
        return Err(Error::Data("feature vectors differ in method or length".into()));
    }

    let n = features.len() as f64;
    let mut mean = vec![0.0; dim];
    for f in features {
        for (m, v) in mean.iter_mut().zip(&f.vector) {
            *m += v / n;
        }
    }
    let mut std = vec![0.0; dim];
    for f in features {
        for ((s, v), m) in std.iter_mut().zip(&f.vector).zip(&mean) {
            *s += (v - m) * (v - m) / n;
        }
    }
    // constant dimensions standardize to 0
    std.iter_mut().for_each(|s| *s = if *s > 0.0 { s.sqrt() } else { 1.0 });
    let z: Vec<Vec<f64>> = features.iter().map(|f| standardize(&f.vector, &mean, &std)).collect();

    let mut weights = vec![vec![0.0; dim]; classes];
    let mut bias = vec![0.0; classes];
    for _ in 0..cfg.epochs {
        for (c, (w, b)) in weights.iter_mut().zip(bias.iter_mut()).enumerate() {
            let mut gw: Vec<f64> = w.iter().map(|v| cfg.reg * v).collect();
            let mut gb = 0.0;
            for (x, &l) in z.iter().zip(labels) {
                let y = if l == c { 1.0 } else { -1.0 };
                let slack = 1.0 - y * (dot(w, x) + *b);
                if slack > 0.0 {
                    let k = -2.0 * slack * y / n;
                    gw.iter_mut().zip(x).for_each(|(g, xi)| *g += k * xi);
                    gb += k;
                }
            }
            w.iter_mut().zip(&gw).for_each(|(wi, g)| *wi -= cfg.lr * g);
            *b -= cfg.lr * gb;
        }
    }
    Ok(LinearClassifier {
        method,
        weights,
        bias,
        mean,
        std,
        trained_on: fingerprint(features, labels),
    })
}

/// Argmax of the affine scores, lowest index on ties.
pub fn predict_linear(clf: &LinearClassifier, features: &BaselineFeatures) -> Result<usize> {
    Ok(crate::training::argmax(&clf.scores(&features.vector)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::MatrixKind;

    fn feats(rows: &[&[f64]]) -> Vec<BaselineFeatures> {
        rows.iter()
            .enumerate()
            .map(|(i, r)| BaselineFeatures {
                method: BaselineMethod::Corr2d,
                vector: r.to_vec(),
                source_id: format!("s{i}"),
            })
            .collect()
    }

    #[test]
    fn dtw_small_cases() {
        assert_eq!(dtw_distance(&[[0.0], [1.0]], &[[1.0], [0.0]]).unwrap(), 2.0);
        let a = [[0.1, 0.2], [0.3, 0.5], [0.9, 0.4]];
        assert_eq!(dtw_distance(&a, &a).unwrap(), 0.0);
        let empty: [[f64; 1]; 0] = [];
        assert!(matches!(dtw_distance(&empty, &[[1.0]]), Err(Error::Data(_))));
    }

    #[test]
    fn correlation_conventions() {
        let traj: Vec<f64> = (0..20).map(|t| 0.5 + 0.3 * (t as f64 * 0.4).sin()).collect();
        assert!((pearson(&traj, &traj) - 1.0).abs() < 1e-12);
        let mirrored: Vec<f64> = traj.iter().map(|v| 1.0 - v).collect();
        assert!((pearson(&traj, &mirrored) + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&traj, &[0.4; 20]), 0.0);
    }

    #[test]
    fn recurrence_threshold_law() {
        let m = SimilarityMatrix::from_values(vec![-0.1, -0.6, -0.6, -0.1], 2, MatrixKind::Cross).unwrap();
        let f = cross_recurrence_features(&m, Some(0.5), "x").unwrap();
        assert_eq!(f.vector, vec![0.5, 1.0, 1.0]);
        assert!(matches!(cross_recurrence_features(&m, Some(0.0), "x"), Err(Error::Parameter(_))));
        let single = SimilarityMatrix::from_values(vec![-0.1, -0.6, -0.6, -0.6], 2, MatrixKind::Cross).unwrap();
        assert_eq!(cross_recurrence_features(&single, Some(0.5), "x").unwrap().vector, vec![0.25, 0.0, 0.5]);
    }

    #[test]
    fn separable_toy_set_is_learned() {
        let f = feats(&[&[0.0, 0.0], &[0.1, 0.2], &[5.0, 0.0], &[5.2, 0.1], &[0.0, 5.0], &[0.2, 5.1]]);
        let labels = [0, 0, 1, 1, 2, 2];
        let clf = train_linear_hinge(&f, &labels, 3, &HingeConfig::default()).unwrap();
        for (x, &l) in f.iter().zip(&labels) {
            assert_eq!(predict_linear(&clf, x).unwrap(), l);
        }
        assert_eq!(clf.trained_on.len(), 64);
    }

    #[test]
    fn constant_features_predict_majority() {
        let f = feats(&[&[1.0], &[1.0], &[1.0], &[1.0], &[1.0], &[1.0], &[1.0]]);
        let labels = [2, 2, 2, 0, 0, 1, 1];
        let clf = train_linear_hinge(&f, &labels, 3, &HingeConfig::default()).unwrap();
        assert_eq!(predict_linear(&clf, &f[0]).unwrap(), 2);
    }

    #[test]
    fn absent_class_and_dimension_errors() {
        let f = feats(&[&[0.0], &[1.0]]);
        assert!(matches!(
            train_linear_hinge(&f, &[0, 1], 3, &HingeConfig::default()),
            Err(Error::Data(_))
        ));
        let clf = train_linear_hinge(&f, &[0, 1], 2, &HingeConfig::default()).unwrap();
        let wrong = feats(&[&[0.0, 1.0]]);
        assert!(matches!(predict_linear(&clf, &wrong[0]), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_weights_follow_bias() {
        let clf = LinearClassifier {
            method: BaselineMethod::Dtw,
            weights: vec![vec![0.0; 2]; 3],
            bias: vec![1.0, 0.0, 0.0],
            mean: vec![0.0; 2],
            std: vec![1.0; 2],
            trained_on: String::new(),
        };
        for x in feats(&[&[3.0, -1.0], &[0.0, 9.0]]) {
            assert_eq!(predict_linear(&clf, &x).unwrap(), 0);
        }
    }

    #[test]
    fn csv_has_header_and_rows() {
        let csv = features_to_csv(&feats(&[&[1.0, 2.0]]));
        assert_eq!(csv, "source_id,method,f1,f2\ns0,corr2d,1,2\n");
    }
}
