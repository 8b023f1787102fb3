//! Spatial-temporal transformer over dyadic skeleton sequences.
//!
//! Each frame's `2·J` joints (person a then person b) become tokens that a
//! spatial transformer mixes; the flattened per-frame embeddings then pass
//! through a temporal transformer across frames, and a mean-pool + linear
//! head produces class logits or a synchrony score.
//!
//! Both transformers use pre-norm residual layers:
//! `x + MHSA(LN(x))` followed by `x + MLP(LN(x))`, MLP width `4·d`, GELU.

use serde::{Deserialize, Serialize};

use crate::autodiff::{linear_apply, Tape, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::pose::SkeletonSequence;
use crate::rng::{self, SeededRng, Stream};
use crate::tensor::Tensor;

const MLP_RATIO: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    /// Three synchrony classes.
    Classify,
    /// One synchrony score.
    Regress,
}

impl HeadKind {
    pub fn outputs(self) -> usize {
        match self {
            HeadKind::Classify => 3,
            HeadKind::Regress => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub frames: usize,
    pub joints: usize,
    /// Embedding width of one joint token.
    pub joint_dim: usize,
    /// Temporal width; must equal the spatial width `2·joints·joint_dim`.
    pub temporal_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub head: HeadKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frames: 81,
            joints: 17,
            joint_dim: 16,
            temporal_dim: 544,
            layers: 4,
            heads: 8,
            dropout: 0.5,
            head: HeadKind::Classify,
        }
    }
}

impl ModelConfig {
    pub fn spatial_tokens(&self) -> usize {
        2 * self.joints
    }

    pub fn spatial_dim(&self) -> usize {
        self.spatial_tokens() * self.joint_dim
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.frames == 0 || self.joints == 0 || self.joint_dim == 0 || self.heads == 0 {
            return bad(format!("zero-sized model dimension in {self:?}"));
        }
        if self.spatial_dim() != self.temporal_dim {
            return bad(format!(
                "spatial width {} (= 2·{}·{}) must equal temporal width {}",
                self.spatial_dim(),
                self.joints,
                self.joint_dim,
                self.temporal_dim
            ));
        }
        for (what, d) in [("joint", self.joint_dim), ("temporal", self.temporal_dim)] {
            if d % self.heads != 0 {
                return bad(format!("{} heads do not divide {what} width {d}", self.heads));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Closed-form number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        let layer = |d: usize| 12 * d * d + 9 * d;
        let (dj, c, f, t) = (self.joint_dim, self.temporal_dim, self.frames, self.spatial_tokens());
        let k = self.head.outputs();
        let spatial = 3 * dj + t * dj + self.layers * layer(dj) + f * c;
        let temporal = f * c + self.layers * layer(c);
        spatial + temporal + c * k + k
    }
}

/// Randomness and bookkeeping for one forward pass.
pub struct Pass {
    pub training: bool,
    rng: SeededRng,
    /// Attention nodes in visiting order: (branch, layer, node).
    pub attention: Vec<(Branch, usize, Var)>,
}

impl Pass {
    pub fn eval() -> Self {
        Pass {
            training: false,
            rng: rng::stream(0, Stream::Dropout, 0),
            attention: Vec::new(),
        }
    }

    pub fn train(rng: SeededRng) -> Self {
        Pass {
            training: true,
            rng,
            attention: Vec::new(),
        }
    }

    pub fn dropout(&mut self, tape: &mut Tape, x: Var, rate: f64) -> Result<Var> {
        tape.dropout(x, rate, self.training, &mut self.rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    Spatial,
    Temporal,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Spatial => "spatial",
            Branch::Temporal => "temporal",
        }
    }
}

/// The four square projections of one attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct MhsaParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_out: Tensor,
}

/// `softmax(QKᵀ/√d)·V` for `n×d` inputs; returns (output, weights).
pub fn scaled_dot_product_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let out = tape.attention(qv, kv, vv, 1, 1, None)?;
    let n = q.rows();
    let (w, _, _) = tape.attention_weights(out).expect("attention node");
    Ok((tape.value(out).clone(), Tensor::from_vec(&[n, n], w.to_vec())))
}

/// Multi-head self-attention on the tape: column-split into `heads`
/// slices, attention per slice, concatenation, output projection.
/// Returns the output and the attention node.
#[allow(clippy::too_many_arguments)]
fn mhsa_on_tape(
    tape: &mut Tape,
    x: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    groups: usize,
    heads: usize,
    dropout: Option<(f64, &mut SeededRng)>,
) -> Result<(Var, Var)> {
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    let dropout = dropout.map(|(r, rng)| (r, rng as &mut dyn rand::RngCore));
    let a = tape.attention(q, k, v, groups, heads, dropout)?;
    Ok((tape.matmul(a, wo)?, a))
}

/// MHSA of an `n×d` input with explicit weights (no dropout).
pub fn mhsa(x: &Tensor, p: &MhsaParams, heads: usize) -> Result<Tensor> {
    let d = x.cols();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("{heads} heads do not divide width {d}")));
    }
    for w in [&p.w_q, &p.w_k, &p.w_v, &p.w_out] {
        if w.shape() != [d, d] {
            return Err(Error::dim("mhsa", x.shape(), w.shape()));
        }
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let [wq, wk, wv, wo] = [&p.w_q, &p.w_k, &p.w_v, &p.w_out].map(|w| tape.constant(w.clone()));
    let (out, _) = mhsa_on_tape(&mut tape, xv, wq, wk, wv, wo, 1, heads, None)?;
    Ok(tape.value(out).clone())
}

fn init_layer(p: &mut ParamStore, prefix: &str, d: usize, rng: &mut SeededRng) {
    for norm in ["norm1", "norm2"] {
        p.insert(&format!("{prefix}.{norm}.gamma"), Tensor::full(&[d], 1.0));
        p.insert(&format!("{prefix}.{norm}.beta"), Tensor::zeros(&[d]));
    }
    for w in ["wq", "wk", "wv", "wo"] {
        p.insert_glorot(&format!("{prefix}.attn.{w}"), &[d, d], d, d, rng);
    }
    let hidden = MLP_RATIO * d;
    p.insert_glorot(&format!("{prefix}.mlp.w1"), &[d, hidden], d, hidden, rng);
    p.insert(&format!("{prefix}.mlp.b1"), Tensor::zeros(&[hidden]));
    p.insert_glorot(&format!("{prefix}.mlp.w2"), &[hidden, d], hidden, d, rng);
    p.insert(&format!("{prefix}.mlp.b2"), Tensor::zeros(&[d]));
}

/// One pre-norm transformer layer over `groups` independent token blocks.
/// Returns the layer output and its attention node.
#[allow(clippy::too_many_arguments)]
pub(crate) fn transformer_layer(
    tape: &mut Tape,
    params: &ParamStore,
    prefix: &str,
    x: Var,
    groups: usize,
    heads: usize,
    dropout: f64,
    pass: &mut Pass,
) -> Result<(Var, Var)> {
    let p = |tape: &mut Tape, name: &str| tape.param(params, &format!("{prefix}.{name}"));

    let (g1, b1) = (p(tape, "norm1.gamma")?, p(tape, "norm1.beta")?);
    let h = tape.layer_norm(x, g1, b1)?;
    let [wq, wk, wv, wo] = [
        p(tape, "attn.wq")?,
        p(tape, "attn.wk")?,
        p(tape, "attn.wv")?,
        p(tape, "attn.wo")?,
    ];
    let attn_dropout = (pass.training && dropout > 0.0).then_some((dropout, &mut pass.rng));
    let (a, attn) = mhsa_on_tape(tape, h, wq, wk, wv, wo, groups, heads, attn_dropout)?;
    let x = tape.add(x, a)?;

    let (g2, b2) = (p(tape, "norm2.gamma")?, p(tape, "norm2.beta")?);
    let h = tape.layer_norm(x, g2, b2)?;
    let (w1, c1) = (p(tape, "mlp.w1")?, p(tape, "mlp.b1")?);
    let h = linear_apply(tape, h, w1, c1)?;
    let h = tape.gelu(h);
    let (w2, c2) = (p(tape, "mlp.w2")?, p(tape, "mlp.b2")?);
    let h = linear_apply(tape, h, w2, c2)?;
    let h = pass.dropout(tape, h, dropout)?;
    Ok((tape.add(x, h)?, attn))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SttfModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl SttfModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, Stream::Init, 0);
        let mut p = ParamStore::new(seed);
        let (dj, c, f, t) = (config.joint_dim, config.temporal_dim, config.frames, config.spatial_tokens());

        p.insert_glorot("spatial.joint_proj.w", &[2, dj], 2, dj, &mut rng);
        p.insert("spatial.joint_proj.b", Tensor::zeros(&[dj]));
        p.insert_glorot("spatial.pos", &[t, dj], t, dj, &mut rng);
        for l in 0..config.layers {
            init_layer(&mut p, &format!("spatial.layer{l}"), dj, &mut rng);
        }
        p.insert_glorot("spatial.frame_pos", &[f, c], f, c, &mut rng);
        p.insert_glorot("temporal.pos", &[f, c], f, c, &mut rng);
        for l in 0..config.layers {
            init_layer(&mut p, &format!("temporal.layer{l}"), c, &mut rng);
        }
        let k = config.head.outputs();
        p.insert_glorot("head.w", &[c, k], c, k, &mut rng);
        p.insert("head.b", Tensor::zeros(&[k]));
        Ok(SttfModel { config, params: p })
    }

    /// Per-frame spatial encoding, `f × c_spa`, including the frame-indexed offset.
    pub fn spatial_forward(&self, tape: &mut Tape, seq: &SkeletonSequence, pass: &mut Pass) -> Result<Var> {
        let e = self.spatial_tokens_forward(tape, seq, pass)?;
        let cfg = &self.config;
        let z = tape.reshape(e, &[cfg.frames, cfg.spatial_dim()])?;
        let frame_pos = tape.param(&self.params, "spatial.frame_pos")?;
        tape.add(z, frame_pos)
    }

    /// Joint tokens after the spatial layers, `(f·2J) × d_joint`, before flattening.
    pub fn spatial_tokens_forward(&self, tape: &mut Tape, seq: &SkeletonSequence, pass: &mut Pass) -> Result<Var> {
        let cfg = &self.config;
        if seq.frames() != cfg.frames || seq.joints() != cfg.joints {
            return Err(Error::Config(format!(
                "sequence is {}x{} (frames x joints), model expects {}x{}",
                seq.frames(),
                seq.joints(),
                cfg.frames,
                cfg.joints
            )));
        }
        let tokens = cfg.spatial_tokens();
        let x = tape.constant(Tensor::from_vec(&[cfg.frames * tokens, 2], seq.data().to_vec()));
        let w = tape.param(&self.params, "spatial.joint_proj.w")?;
        let b = tape.param(&self.params, "spatial.joint_proj.b")?;
        let e = linear_apply(tape, x, w, b)?;
        let pos = tape.param(&self.params, "spatial.pos")?;
        let e = tape.add_tiled(e, pos)?;
        let mut e = pass.dropout(tape, e, cfg.dropout)?;
        for l in 0..cfg.layers {
            let prefix = format!("spatial.layer{l}");
            let (out, attn) =
                transformer_layer(tape, &self.params, &prefix, e, cfg.frames, cfg.heads, cfg.dropout, pass)?;
            pass.attention.push((Branch::Spatial, l, attn));
            e = out;
        }
        Ok(e)
    }

    /// Adds the temporal positional table and runs the temporal layers.
    pub fn temporal_forward(&self, tape: &mut Tape, z: Var, pass: &mut Pass) -> Result<Var> {
        let cfg = &self.config;
        let expect = [cfg.frames, cfg.temporal_dim];
        if tape.value(z).shape() != expect {
            return Err(Error::dim("temporal_forward", tape.value(z).shape(), &expect));
        }
        let pos = tape.param(&self.params, "temporal.pos")?;
        let y = tape.add(z, pos)?;
        let mut y = pass.dropout(tape, y, cfg.dropout)?;
        for l in 0..cfg.layers {
            let prefix = format!("temporal.layer{l}");
            let (out, attn) = transformer_layer(tape, &self.params, &prefix, y, 1, cfg.heads, cfg.dropout, pass)?;
            pass.attention.push((Branch::Temporal, l, attn));
            y = out;
        }
        Ok(y)
    }

    /// Mean-pool over frames, then a linear map: `1×3` logits or `1×1` score.
    pub fn predict_head(&self, tape: &mut Tape, y: Var) -> Result<Var> {
        let pooled = tape.mean_rows(y)?;
        let w = tape.param(&self.params, "head.w")?;
        let b = tape.param(&self.params, "head.b")?;
        linear_apply(tape, pooled, w, b)
    }

    pub fn forward(&self, tape: &mut Tape, seq: &SkeletonSequence, pass: &mut Pass) -> Result<Var> {
        let z = self.spatial_forward(tape, seq, pass)?;
        let y = self.temporal_forward(tape, z, pass)?;
        self.predict_head(tape, y)
    }

    /// Eval-mode prediction values (logits or score).
    pub fn predict(&self, seq: &SkeletonSequence) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, seq, &mut Pass::eval())?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Eval-mode attention weights of every layer and head.
    pub fn export_attention(&self, seq: &SkeletonSequence) -> Result<AttentionMaps> {
        let mut tape = Tape::new();
        let mut pass = Pass::eval();
        self.forward(&mut tape, seq, &mut pass)?;
        let mut maps = AttentionMaps::default();
        for &(branch, layer, var) in &pass.attention {
            let (w, groups, heads) = tape
                .attention_weights(var)
                .ok_or_else(|| Error::Contract("recorded node is not attention".into()))?;
            let n = (w.len() / (groups * heads)).isqrt();
            let per_head = (0..heads)
                .map(|h| {
                    // average over groups (frames) for the spatial branch
                    let mut acc = vec![0.0; n * n];
                    for g in 0..groups {
                        let off = (g * heads + h) * n * n;
                        for (a, &x) in acc.iter_mut().zip(&w[off..off + n * n]) {
                            *a += x;
                        }
                    }
                    acc.iter_mut().for_each(|a| *a /= groups as f64);
                    AttentionMap { size: n, weights: acc }
                })
                .collect();
            match branch {
                Branch::Spatial => maps.spatial.push(per_head),
                Branch::Temporal => maps.temporal.push(per_head),
            }
            debug_assert_eq!(layer, maps.layers(branch) - 1);
        }
        Ok(maps)
    }
}

/// Row-stochastic attention weights of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub size: usize,
    pub weights: Vec<f64>,
}

impl AttentionMap {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.size + j]
    }

    /// Min-max scaled to [0, 1] for display.
    pub fn normalized(&self) -> Vec<f64> {
        let (lo, hi) = crate::matrix_io::min_max(&self.weights);
        let span = hi - lo;
        self.weights
            .iter()
            .map(|&w| if span > 0.0 { (w - lo) / span } else { 0.0 })
            .collect()
    }

    /// Block of queries from `from` attending to keys of `to` (0 = person a,
    /// 1 = person b), each `joints × joints`.
    pub fn person_block(&self, from: usize, to: usize, joints: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(joints * joints);
        for i in 0..joints {
            for j in 0..joints {
                out.push(self.at(from * joints + i, to * joints + j));
            }
        }
        out
    }
}

/// Attention maps indexed `[layer][head]`. Spatial maps are averaged over frames.
#[derive(Debug, Clone, Default)]
pub struct AttentionMaps {
    pub spatial: Vec<Vec<AttentionMap>>,
    pub temporal: Vec<Vec<AttentionMap>>,
}

impl AttentionMaps {
    pub fn layers(&self, branch: Branch) -> usize {
        match branch {
            Branch::Spatial => self.spatial.len(),
            Branch::Temporal => self.temporal.len(),
        }
    }

    /// Every map as (branch, layer, head, map), spatial first.
    pub fn iter(&self) -> impl Iterator<Item = (Branch, usize, usize, &AttentionMap)> {
        [(Branch::Spatial, &self.spatial), (Branch::Temporal, &self.temporal)]
            .into_iter()
            .flat_map(|(b, maps)| {
                maps.iter()
                    .enumerate()
                    .flat_map(move |(l, hs)| hs.iter().enumerate().map(move |(h, m)| (b, l, h, m)))
            })
    }

    /// Writes one file per (branch, layer, head) as `{branch}_l{layer}_h{head}.{ext}`.
    pub fn write(&self, dir: &std::path::Path, ext: &str) -> Result<Vec<std::path::PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.iter()
            .map(|(b, l, h, m)| {
                let path = dir.join(format!("{}_l{l}_h{h}.{ext}", b.name()));
                crate::matrix_io::write_matrix(&path, &m.normalized(), m.size, m.size)?;
                Ok(path)
            })
            .collect()
    }
}
