//! Pose decoder and the relative-pose training loss.
//!
//! Pose `k` maps points of cloud `k` into the frame of cloud 0, so pose 0 is
//! the identity by definition and only clouds `1..N` are decoded.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffnum::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::geom3d::{angular_distance, relative, PoseSet, RigidTransform, Rotation3};
use crate::layers::{glorot, init_linear, linear, LEAKY_SLOPE};

pub const PREFIX: &str = "decoder/";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parametrization {
    /// Two 3-vectors orthonormalized by Gram–Schmidt.
    GramSchmidt6,
    /// A 3×3 block projected onto the nearest rotation.
    Procrustes9,
}

impl Parametrization {
    pub fn rotation_features(self) -> usize {
        match self {
            Parametrization::GramSchmidt6 => 6,
            Parametrization::Procrustes9 => 9,
        }
    }

    /// Rotation features of the identity: columns `(1,0,0)`, `(0,1,0)` for
    /// Gram–Schmidt, the row-major identity for Procrustes.
    pub fn identity_features(self) -> Vec<f64> {
        match self {
            Parametrization::GramSchmidt6 => vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0],
            Parametrization::Procrustes9 => vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub hidden: (usize, usize),
    pub parametrization: Parametrization,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            hidden: (256, 128),
            parametrization: Parametrization::GramSchmidt6,
        }
    }
}

impl DecoderConfig {
    /// MLP outputs per cloud: 3 translation values plus the rotation block.
    pub fn output_width(&self) -> usize {
        3 + self.parametrization.rotation_features()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1.0, beta: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || (self.alpha == 0.0 && self.beta == 0.0) {
            return Err(Error::InvalidConfig(format!(
                "loss weights must be non-negative and not both zero: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    #[default]
    Consecutive,
    AllPairs,
}

/// Index pairs `(i, j)` whose relative transforms enter the loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairSelection {
    pairs: Vec<(usize, usize)>,
}

impl PairSelection {
    pub fn new(pairs: Vec<(usize, usize)>, n: usize) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidConfig("empty pair selection".into()));
        }
        if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i == j || i >= n || j >= n) {
            return Err(Error::InvalidConfig(format!("invalid pair ({i}, {j}) for window of {n}")));
        }
        Ok(PairSelection { pairs })
    }

    pub fn from_mode(mode: PairMode, n: usize) -> Result<Self> {
        let pairs = match mode {
            PairMode::Consecutive => (1..n).map(|j| (j - 1, j)).collect(),
            PairMode::AllPairs => (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect(),
        };
        Self::new(pairs, n)
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }
}

pub fn init_params(store: &mut ParamStore, cfg: &DecoderConfig, input_dim: usize, rng: &mut impl Rng) -> Result<()> {
    let (h1, h2) = cfg.hidden;
    if h1 == 0 || h2 == 0 || input_dim == 0 {
        return Err(Error::InvalidConfig(format!("decoder dimensions must be positive: {cfg:?}")));
    }
    init_linear(store, "decoder/l0", input_dim, h1, rng);
    init_linear(store, "decoder/l1", h1, h2, rng);
    let out = cfg.output_width();
    // small head so the first poses stay near the identity
    store.insert("decoder/out/w", glorot(rng, h2, out, 0.1));
    let mut bias = vec![0.0; 3];
    bias.extend(cfg.parametrization.identity_features());
    store.insert("decoder/out/b", Tensor::row(bias));
    Ok(())
}

/// Decoded poses on a tape: `rotations[k]` is `3×3`, `translations[k]` is
/// a `1×3` row.
#[derive(Debug, Clone)]
pub struct DecodedPoses {
    pub rotations: Vec<Var>,
    pub translations: Vec<Var>,
}

impl DecodedPoses {
    pub fn len(&self) -> usize {
        self.rotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rotations.is_empty()
    }

    pub fn to_pose_set(&self, tape: &Tape) -> Result<PoseSet> {
        let poses = self
            .rotations
            .iter()
            .zip(&self.translations)
            .map(|(&r, &t)| {
                let m = Matrix3::from_row_slice(tape.value(r).data());
                let t = tape.value(t).data();
                Ok(RigidTransform::new(Rotation3::renormalize(&m)?, Vector3::new(t[0], t[1], t[2])))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PoseSet::new(poses))
    }
}

/// Maps the `N × dim` descriptors to `N` poses; pose 0 is the identity.
pub fn decode_poses(tape: &mut Tape, params: &ParamStore, cfg: &DecoderConfig, descriptors: Var) -> Result<DecodedPoses> {
    let n = tape.value(descriptors).rows();
    if n == 0 {
        return Err(Error::EmptyCloud);
    }
    let h = linear(tape, params, "decoder/l0", descriptors)?;
    let h = tape.leaky_relu(h, LEAKY_SLOPE);
    let h = linear(tape, params, "decoder/l1", h)?;
    let h = tape.leaky_relu(h, LEAKY_SLOPE);
    let out = linear(tape, params, "decoder/out", h)?;
    let rf = cfg.parametrization.rotation_features();
    let mut rotations = vec![tape.constant(identity3())];
    let mut translations = vec![tape.constant(Tensor::row(vec![0.0; 3]))];
    for k in 1..n {
        let row = tape.slice(out, 0, k, 1)?;
        translations.push(tape.slice(row, 1, 0, 3)?);
        let feats = tape.slice(row, 1, 3, rf)?;
        rotations.push(match cfg.parametrization {
            Parametrization::GramSchmidt6 => tape.gram_schmidt(feats)?,
            Parametrization::Procrustes9 => tape.procrustes(feats)?,
        });
    }
    Ok(DecodedPoses { rotations, translations })
}

fn identity3() -> Tensor {
    Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).expect("3×3")
}

/// Records the weighted relative-pose loss against ground-truth poses.
pub fn loss_on_tape(tape: &mut Tape, pred: &DecodedPoses, truth: &PoseSet, pairs: &PairSelection, w: &LossWeights) -> Result<Var> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch(pred.len(), truth.len()));
    }
    w.validate()?;
    let np = pairs.pairs().len() as f64;
    let mut trans_terms = Vec::new();
    let mut rot_terms = Vec::new();
    for &(i, j) in pairs.pairs() {
        if i >= pred.len() || j >= pred.len() {
            return Err(Error::LengthMismatch(pred.len(), i.max(j) + 1));
        }
        let star = relative(&truth[i], &truth[j]);
        let rit = tape.transpose(pred.rotations[i])?;
        let dr = tape.matmul(rit, pred.rotations[j])?;
        let dt = tape.sub(pred.translations[j], pred.translations[i])?;
        // row-vector form of R_iᵀ (t_j − t_i)
        let dt = tape.matmul(dt, pred.rotations[i])?;
        let st = star.translation;
        let t_star = tape.constant(Tensor::row(vec![st.x, st.y, st.z]));
        let diff = tape.sub(dt, t_star)?;
        trans_terms.push(tape.sum_squares(diff));
        let r_star = tape.constant(matrix_tensor(star.rotation.matrix()));
        rot_terms.push(tape.angular_distance(dr, r_star)?);
    }
    let t = sum_all(tape, &trans_terms)?;
    let r = sum_all(tape, &rot_terms)?;
    let t = tape.scale(t, w.alpha / np);
    let r = tape.scale(r, w.beta / np);
    tape.add(t, r)
}

fn sum_all(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

fn matrix_tensor(m: &Matrix3<f64>) -> Tensor {
    Tensor::matrix(3, 3, (0..9).map(|i| m[(i / 3, i % 3)]).collect()).expect("3×3")
}

/// `α · mean ‖Δt* − Δt‖² + β · mean δ(ΔR*, ΔR)` over the selected pairs.
pub fn loss(pred: &PoseSet, truth: &PoseSet, pairs: &PairSelection, w: &LossWeights) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::LengthMismatch(pred.len(), truth.len()));
    }
    w.validate()?;
    let (mut lt, mut lr) = (0.0, 0.0);
    for &(i, j) in pairs.pairs() {
        if i >= pred.len() || j >= pred.len() {
            return Err(Error::LengthMismatch(pred.len(), i.max(j) + 1));
        }
        let d = relative(&pred[i], &pred[j]);
        let s = relative(&truth[i], &truth[j]);
        lt += (s.translation - d.translation).norm_squared();
        lr += angular_distance(&s.rotation, &d.rotation);
    }
    let np = pairs.pairs().len() as f64;
    Ok(w.alpha * lt / np + w.beta * lr / np)
}
