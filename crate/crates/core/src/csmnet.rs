//! Classifier over cross-similarity images.
//!
//! The 224×224 normalized CSM is average-pooled into a coarse grid, then a
//! two-layer perceptron maps it to logits or a score. Pooling is fixed, so
//! inputs are prepared once per sample with [`CsmNet::prepare`].

use serde::{Deserialize, Serialize};

use crate::autodiff::{linear_apply, Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::pose::SkeletonSequence;
use crate::rng::{self, Stream};
use crate::similarity::{csm_input, SimilarityMatrix};
use crate::sttf::{HeadKind, Pass};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsmConfig {
    /// Side of the resized CSM image.
    pub side: usize,
    /// Pooling window; must divide `side`.
    pub pool: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub head: HeadKind,
}

impl Default for CsmConfig {
    fn default() -> Self {
        CsmConfig {
            side: 224,
            pool: 8,
            hidden: 64,
            dropout: 0.5,
            head: HeadKind::Classify,
        }
    }
}

impl CsmConfig {
    pub fn grid(&self) -> usize {
        self.side / self.pool
    }

    pub fn validate(&self) -> Result<()> {
        if self.pool == 0 || self.side == 0 || self.side % self.pool != 0 || self.hidden == 0 {
            return Err(Error::Config(format!(
                "CSM net needs pool dividing side and a positive hidden width, got {self:?}"
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsmNet {
    pub config: CsmConfig,
    pub params: ParamStore,
}

impl CsmNet {
    pub fn new(config: CsmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, Stream::Init, 1);
        let mut p = ParamStore::new(seed);
        let (d, h, k) = (config.grid() * config.grid(), config.hidden, config.head.outputs());
        p.insert_glorot("csm.fc1.w", &[d, h], d, h, &mut rng);
        p.insert("csm.fc1.b", Tensor::zeros(&[h]));
        p.insert_glorot("csm.fc2.w", &[h, k], h, k, &mut rng);
        p.insert("csm.fc2.b", Tensor::zeros(&[k]));
        Ok(CsmNet { config, params: p })
    }

    /// Average-pools a CSM image into the `1 × grid²` network input.
    pub fn pool(&self, m: &SimilarityMatrix) -> Result<Tensor> {
        let (side, pool, g) = (self.config.side, self.config.pool, self.config.grid());
        if m.size() != side {
            return Err(Error::dim("CsmNet::pool", &[m.size(), m.size()], &[side, side]));
        }
        let mut out = vec![0.0; g * g];
        for i in 0..side {
            for j in 0..side {
                out[(i / pool) * g + j / pool] += m.at(i, j);
            }
        }
        let area = (pool * pool) as f64;
        out.iter_mut().for_each(|v| *v /= area);
        Ok(Tensor::from_vec(&[1, g * g], out))
    }

    pub fn prepare(&self, seq: &SkeletonSequence) -> Result<Tensor> {
        self.pool(&csm_input(seq, self.config.side)?)
    }

    pub fn forward(&self, tape: &mut Tape, input: &Tensor, pass: &mut Pass) -> Result<Var> {
        let x = tape.constant(input.clone());
        let p = |tape: &mut Tape, n: &str| tape.param(&self.params, n);
        let (w1, b1) = (p(tape, "csm.fc1.w")?, p(tape, "csm.fc1.b")?);
        let h = linear_apply(tape, x, w1, b1)?;
        let h = tape.gelu(h);
        let h = pass.dropout(tape, h, self.config.dropout)?;
        let (w2, b2) = (p(tape, "csm.fc2.w")?, p(tape, "csm.fc2.b")?);
        linear_apply(tape, h, w2, b2)
    }
}
