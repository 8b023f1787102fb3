//! Cross- and self-similarity matrices between pose sequences.
//!
//! Entry `(i, j)` compares pose `i` of one track with pose `j` of another:
//! `-(1/J)·sqrt(Σ_k ‖a_i[k] − b_j[k]‖²)`, so identical poses score 0 and
//! every other pair scores below 0.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix_io;
use crate::pose::SkeletonSequence;

/// Side length of the CSM-branch input image.
pub const CSM_INPUT_SIDE: usize = 224;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatrixKind {
    Cross,
    SelfSimilarity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    values: Vec<f64>,
    size: usize,
    pub kind: MatrixKind,
}

impl SimilarityMatrix {
    pub fn from_values(values: Vec<f64>, size: usize, kind: MatrixKind) -> Result<Self> {
        if values.len() != size * size {
            return Err(Error::dim("SimilarityMatrix", &[size, size], &[values.len()]));
        }
        Ok(SimilarityMatrix { values, size, kind })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }

    pub fn transpose(&self) -> SimilarityMatrix {
        let n = self.size;
        let values = (0..n * n).map(|idx| self.at(idx % n, idx / n)).collect();
        SimilarityMatrix {
            values,
            size: n,
            kind: self.kind,
        }
    }

    /// Min-max rescaling to [0, 1]; a constant matrix becomes all zeros.
    pub fn min_max_normalized(&self) -> SimilarityMatrix {
        let (lo, hi) = matrix_io::min_max(&self.values);
        let span = hi - lo;
        let values = self
            .values
            .iter()
            .map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 })
            .collect();
        SimilarityMatrix {
            values,
            size: self.size,
            kind: self.kind,
        }
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        matrix_io::write_matrix(path, &self.values, self.size, self.size)
    }
}

/// Pose distance kernel shared by cross and self matrices.
fn pose_distance(a: &[f64], b: &[f64], joints: usize) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    sq.sqrt() / joints as f64
}

fn pairwise(seq: &SkeletonSequence, p: usize, q: usize, kind: MatrixKind) -> Result<SimilarityMatrix> {
    let f = seq.frames();
    if f == 0 {
        return Err(Error::Data("similarity matrix of an empty sequence".into()));
    }
    let j = seq.joints();
    let mut values = vec![0.0; f * f];
    for i in 0..f {
        let a = seq.pose(i, p);
        for (k, out) in values[i * f..(i + 1) * f].iter_mut().enumerate() {
            *out = -pose_distance(a, seq.pose(k, q), j);
        }
    }
    SimilarityMatrix::from_values(values, f, kind)
}

/// Person a (rows) against person b (columns).
pub fn compute_csm(seq: &SkeletonSequence) -> Result<SimilarityMatrix> {
    pairwise(seq, 0, 1, MatrixKind::Cross)
}

/// One person against itself: symmetric with a zero diagonal.
pub fn compute_ssm(seq: &SkeletonSequence, person: usize) -> Result<SimilarityMatrix> {
    if person > 1 {
        return Err(Error::Parameter(format!("person index {person} is not 0 or 1")));
    }
    pairwise(seq, person, person, MatrixKind::SelfSimilarity)
}

/// Nearest-neighbour resize: `out[i][j] = src[⌊i·s/t⌋][⌊j·s/t⌋]`.
pub fn resize_nearest(m: &SimilarityMatrix, target: usize) -> Result<SimilarityMatrix> {
    if target == 0 {
        return Err(Error::Parameter("resize target must be positive".into()));
    }
    let s = m.size;
    if s == 0 {
        return Err(Error::Data("cannot resize an empty matrix".into()));
    }
    let src: Vec<usize> = (0..target).map(|i| i * s / target).collect();
    let mut values = Vec::with_capacity(target * target);
    for &r in &src {
        values.extend(src.iter().map(|&c| m.at(r, c)));
    }
    SimilarityMatrix::from_values(values, target, m.kind)
}

/// Classifier input for the CSM branch: min-max normalized CSM resized to `side`.
pub fn csm_input(seq: &SkeletonSequence, side: usize) -> Result<SimilarityMatrix> {
    resize_nearest(&compute_csm(seq)?.min_max_normalized(), side)
}
