//! Toy detector head: pooled region features, latent embeddings and
//! prompt-embedding logits in the joint space.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalKind {
    Foreground,
    Background,
}

/// One synthetic region proposal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposalRecord {
    pub id: usize,
    /// `H x W x C` local feature map.
    pub feature_map: Tensor,
    pub gt_class: usize,
    pub kind: ProposalKind,
    pub s_obj: f64,
    pub s_center: f64,
}

impl ProposalRecord {
    pub fn new(
        id: usize,
        feature_map: Tensor,
        gt_class: usize,
        kind: ProposalKind,
        s_obj: f64,
        s_center: f64,
    ) -> Result<Self> {
        if feature_map.rank() != 3 {
            return Err(Error::Shape(format!("feature map must be H x W x C, got {:?}", feature_map.shape())));
        }
        if !feature_map.is_finite() {
            return Err(Error::Domain(format!("proposal {id} has non-finite features")));
        }
        for (name, s) in [("s_obj", s_obj), ("s_center", s_center)] {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Domain(format!("{name} = {s} outside [0, 1]")));
            }
        }
        Ok(ProposalRecord { id, feature_map, gt_class, kind, s_obj, s_center })
    }

    /// `(H, W, C)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.feature_map.shape();
        (s[0], s[1], s[2])
    }

    /// Channel vector `Z_xy`.
    pub fn local_feature(&self, x: usize, y: usize) -> Result<&[f64]> {
        let (h, w, c) = self.dims();
        if x >= h {
            return Err(Error::Index { index: x, extent: h });
        }
        if y >= w {
            return Err(Error::Index { index: y, extent: w });
        }
        let start = (x * w + y) * c;
        Ok(&self.feature_map.data()[start..start + c])
    }

    /// Spatial mean of the feature map.
    pub fn pooled(&self) -> Vec<f64> {
        let (h, w, c) = self.dims();
        let mut out = vec![0.0; c];
        for pos in self.feature_map.data().chunks_exact(c) {
            for (o, v) in out.iter_mut().zip(pos) {
                *o += v;
            }
        }
        let hw = (h * w) as f64;
        out.iter_mut().for_each(|v| *v /= hw);
        out
    }

    pub fn perception_score(&self) -> f64 {
        perception_score(self.s_obj, self.s_center).expect("scores validated on construction")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub joint_dim: usize,
    pub latent_dim: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims { height: 4, width: 4, channels: 16, joint_dim: 32, latent_dim: 16 }
    }
}

/// Learnable class embeddings: `K` knowns, the unknown placeholder at index
/// `K` and background at `K + 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptBank {
    embeddings: Tensor,
    tau: f64,
}

impl PromptBank {
    pub fn new(embeddings: Tensor, tau: f64) -> Result<Self> {
        if embeddings.rank() != 2 || embeddings.shape()[0] < 3 {
            return Err(Error::Shape(format!(
                "prompt bank needs (K + 2) x D with K >= 1, got {:?}",
                embeddings.shape()
            )));
        }
        if !(tau > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        for i in 0..embeddings.shape()[0] {
            let n: f64 = embeddings.row(i).iter().map(|v| v * v).sum();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Degenerate(format!("prompt {i} has norm {}", n.sqrt())));
            }
        }
        Ok(PromptBank { embeddings, tau })
    }

    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn num_known(&self) -> usize {
        self.embeddings.shape()[0] - 2
    }

    pub fn unknown_index(&self) -> usize {
        self.num_known()
    }

    pub fn background_index(&self) -> usize {
        self.num_known() + 1
    }

    pub fn num_classes(&self) -> usize {
        self.embeddings.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.embeddings.shape()[1]
    }

    pub fn set_embeddings(&mut self, embeddings: Tensor) -> Result<()> {
        *self = PromptBank::new(embeddings, self.tau)?;
        Ok(())
    }
}

/// Pool-then-linear map to region features, plus the latent projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHead {
    /// `C x D`
    pool_linear: Tensor,
    /// `D x d_z`
    latent: Tensor,
}

fn orthonormal_rows(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    // Gram-Schmidt on gaussian rows; needs rows <= cols.
    let mut data: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    for i in 0..rows {
        for j in 0..i {
            let (done, rest) = data.split_at_mut(i * cols);
            let prev = &done[j * cols..(j + 1) * cols];
            let cur = &mut rest[..cols];
            let d: f64 = prev.iter().zip(cur.iter()).map(|(a, b)| a * b).sum();
            cur.iter_mut().zip(prev).for_each(|(c, p)| *c -= d * p);
        }
        let row = &mut data[i * cols..(i + 1) * cols];
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        row.iter_mut().for_each(|v| *v /= n);
    }
    Tensor::matrix(rows, cols, data).expect("consistent dims")
}

fn transpose(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = t.data()[i * c + j];
        }
    }
    Tensor::matrix(c, r, out).expect("consistent dims")
}

impl ProjectionHead {
    pub fn new(pool_linear: Tensor, latent: Tensor) -> Result<Self> {
        if pool_linear.rank() != 2 || latent.rank() != 2 || pool_linear.shape()[1] != latent.shape()[0] {
            return Err(Error::Shape(format!(
                "head weights {:?} and {:?} do not chain",
                pool_linear.shape(),
                latent.shape()
            )));
        }
        Ok(ProjectionHead { pool_linear, latent })
    }

    /// Random initialization with orthonormal rows (`C x D`) and orthonormal
    /// columns (`D x d_z`).
    pub fn init(dims: &ModelDims, rng: &mut impl Rng) -> Result<Self> {
        if dims.channels > dims.joint_dim || dims.latent_dim > dims.joint_dim {
            return Err(Error::Config(format!("need channels <= joint_dim and latent_dim <= joint_dim, got {dims:?}")));
        }
        let pool_linear = orthonormal_rows(rng, dims.channels, dims.joint_dim);
        let latent = transpose(&orthonormal_rows(rng, dims.latent_dim, dims.joint_dim));
        ProjectionHead::new(pool_linear, latent)
    }

    pub fn pool_linear(&self) -> &Tensor {
        &self.pool_linear
    }

    pub fn latent(&self) -> &Tensor {
        &self.latent
    }

    pub fn channels(&self) -> usize {
        self.pool_linear.shape()[0]
    }

    pub fn joint_dim(&self) -> usize {
        self.pool_linear.shape()[1]
    }

    pub fn latent_dim(&self) -> usize {
        self.latent.shape()[1]
    }

    pub fn set_weights(&mut self, pool_linear: Tensor, latent: Tensor) -> Result<()> {
        *self = ProjectionHead::new(pool_linear, latent)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Global,
    Local { x: usize, y: usize },
}

/// `K + 2` logits `S(R, T_j) / tau`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogitRow {
    pub values: Vec<f64>,
    pub provenance: Provenance,
}

/// Head and prompts together; everything the forward pass needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointSpaceModel {
    pub head: ProjectionHead,
    pub bank: PromptBank,
}

/// Tape handles for the model parameters.
#[derive(Clone, Copy, Debug)]
pub struct ModelVars {
    pub pool_linear: Var,
    pub latent: Var,
    pub prompts: Var,
}

impl JointSpaceModel {
    pub fn new(head: ProjectionHead, bank: PromptBank) -> Result<Self> {
        if head.joint_dim() != bank.dim() {
            return Err(Error::Shape(format!("head joint dim {} != prompt dim {}", head.joint_dim(), bank.dim())));
        }
        Ok(JointSpaceModel { head, bank })
    }

    /// Records the parameters on `tape`, as leaves when `trainable`.
    pub fn record(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let mut put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        ModelVars {
            pool_linear: put(self.head.pool_linear()),
            latent: put(self.head.latent()),
            prompts: put(self.bank.embeddings()),
        }
    }

    pub fn named_tensors(&self) -> BTreeMap<String, Tensor> {
        BTreeMap::from([
            ("head.pool_linear".to_string(), self.head.pool_linear().clone()),
            ("head.latent".to_string(), self.head.latent().clone()),
            ("prompts".to_string(), self.bank.embeddings().clone()),
        ])
    }

    pub fn from_named_tensors(tensors: &BTreeMap<String, Tensor>, tau: f64) -> Result<Self> {
        let get = |k: &str| {
            tensors.get(k).cloned().ok_or_else(|| Error::Config(format!("checkpoint is missing tensor `{k}`")))
        };
        let head = ProjectionHead::new(get("head.pool_linear")?, get("head.latent")?)?;
        let bank = PromptBank::new(get("prompts")?, tau)?;
        JointSpaceModel::new(head, bank)
    }
}

/// `pooled (N x C) -> R (N x D)`.
pub fn region_features(tape: &mut Tape, pooled: Var, vars: &ModelVars) -> Result<Var> {
    tape.matmul(pooled, vars.pool_linear)
}

/// `R (N x D) -> logits (N x (K + 2))`, each `cos(R_i, T_j) / tau`.
pub fn logits_from_features(tape: &mut Tape, features: Var, prompts: Var, tau: f64) -> Result<Var> {
    let cos = cosine_matrix(tape, features, prompts)?;
    Ok(tape.scale(cos, 1.0 / tau))
}

/// Row-wise cosine similarities between `a (N x D)` and `b (M x D)`.
pub fn cosine_matrix(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let an = tape.normalize(a)?;
    let bn = tape.normalize(b)?;
    let bt = tape.transpose(bn)?;
    tape.matmul(an, bt)
}

/// `R (N x D) -> z (N x d_z)`, unit-norm rows.
pub fn latents_from_features(tape: &mut Tape, features: Var, latent: Var) -> Result<Var> {
    let raw = tape.matmul(features, latent)?;
    tape.normalize(raw)
}

fn check_map(feature_map: &Tensor, head: &ProjectionHead) -> Result<()> {
    if feature_map.rank() != 3 || feature_map.shape()[2] != head.channels() {
        return Err(Error::Shape(format!(
            "feature map {:?} does not match head with {} channels",
            feature_map.shape(),
            head.channels()
        )));
    }
    Ok(())
}

/// `R = mean-pool(Z) . W`.
pub fn pool_project(feature_map: &Tensor, head: &ProjectionHead) -> Result<Vec<f64>> {
    check_map(feature_map, head)?;
    let mut tape = Tape::new();
    let z = tape.constant(feature_map.clone());
    let pooled = tape.mean_pool(z)?;
    let pooled = tape.reshape(pooled, &[1, head.channels()])?;
    let w = tape.constant(head.pool_linear().clone());
    let r = tape.matmul(pooled, w)?;
    Ok(tape.value(r).data().to_vec())
}

pub fn compute_logits(region: &[f64], bank: &PromptBank) -> Result<LogitRow> {
    if region.len() != bank.dim() {
        return Err(Error::Shape(format!(
            "region feature of length {} against prompts of dim {}",
            region.len(),
            bank.dim()
        )));
    }
    if region.iter().all(|&v| v == 0.0) {
        return Err(Error::Degenerate("zero region feature".into()));
    }
    let mut tape = Tape::new();
    let r = tape.constant(Tensor::matrix(1, region.len(), region.to_vec())?);
    let t = tape.constant(bank.embeddings().clone());
    let l = logits_from_features(&mut tape, r, t, bank.tau())?;
    Ok(LogitRow { values: tape.value(l).data().to_vec(), provenance: Provenance::Global })
}

/// Local logits `l'` for the channel vector at `(x, y)`, through the shared
/// linear map with pooling bypassed.
pub fn project_local(
    feature_map: &Tensor,
    position: (usize, usize),
    head: &ProjectionHead,
    bank: &PromptBank,
) -> Result<LogitRow> {
    check_map(feature_map, head)?;
    let (h, w, c) = (feature_map.shape()[0], feature_map.shape()[1], feature_map.shape()[2]);
    let (x, y) = position;
    if x >= h {
        return Err(Error::Index { index: x, extent: h });
    }
    if y >= w {
        return Err(Error::Index { index: y, extent: w });
    }
    let start = (x * w + y) * c;
    let local = Tensor::matrix(1, c, feature_map.data()[start..start + c].to_vec())?;
    let mut tape = Tape::new();
    let z = tape.constant(local);
    let wv = tape.constant(head.pool_linear().clone());
    let r = tape.matmul(z, wv)?;
    let region = tape.value(r).data().to_vec();
    let mut row = compute_logits(&region, bank)?;
    row.provenance = Provenance::Local { x, y };
    Ok(row)
}

/// Unit-norm latent embedding for the visual alignment queue.
pub fn latent_embed(region: &[f64], head: &ProjectionHead) -> Result<Vec<f64>> {
    if region.len() != head.joint_dim() {
        return Err(Error::Shape(format!(
            "region of length {} against head joint dim {}",
            region.len(),
            head.joint_dim()
        )));
    }
    let mut tape = Tape::new();
    let r = tape.constant(Tensor::matrix(1, region.len(), region.to_vec())?);
    let w = tape.constant(head.latent().clone());
    let z = latents_from_features(&mut tape, r, w)?;
    Ok(tape.value(z).data().to_vec())
}

/// Geometric mean of objectness and centerness.
pub fn perception_score(s_obj: f64, s_center: f64) -> Result<f64> {
    for (name, s) in [("s_obj", s_obj), ("s_center", s_center)] {
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::Domain(format!("{name} = {s} outside [0, 1]")));
        }
    }
    Ok((s_obj * s_center).sqrt())
}
