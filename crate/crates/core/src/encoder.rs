//! Point-cloud encoder: per-point normal lifting, dynamic-graph edge
//! convolutions and farthest-point token reduction.
//!
//! Padding rows are dropped before anything else, so an encoding depends
//! only on the real points of a cloud.

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cloudproc::{farthest_point_sampling, knn, NeighborIndex, PointCloud};
use crate::diffnum::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::{init_linear, linear, LEAKY_SLOPE};

pub const PREFIX: &str = "encoder/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub k_neighbors: usize,
    pub normal_lift_channels: (usize, usize),
    pub edge_conv_channels: Vec<usize>,
    /// M′, rows of the embedding.
    pub tokens_out: usize,
    /// D′, columns of the embedding.
    pub channels_out: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            k_neighbors: 16,
            normal_lift_channels: (32, 32),
            edge_conv_channels: vec![64, 64, 128, 128],
            tokens_out: 64,
            channels_out: 128,
        }
    }
}

impl EncoderConfig {
    /// 1024 tokens × 256 channels.
    pub fn full_scale() -> Self {
        EncoderConfig {
            edge_conv_channels: vec![64, 64, 128, 256],
            tokens_out: 1024,
            channels_out: 256,
            ..Self::default()
        }
    }

    /// Reads the embedding shape the other way round (channels × tokens).
    pub fn with_swapped_shape(mut self) -> Self {
        std::mem::swap(&mut self.tokens_out, &mut self.channels_out);
        if let Some(last) = self.edge_conv_channels.last_mut() {
            *last = self.channels_out;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (a, b) = self.normal_lift_channels;
        if self.k_neighbors == 0
            || a == 0
            || b == 0
            || self.edge_conv_channels.is_empty()
            || self.edge_conv_channels.contains(&0)
            || self.tokens_out == 0
            || self.channels_out == 0
        {
            return Err(Error::InvalidConfig(format!("encoder dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    fn edge_input_width(&self, layer: usize) -> usize {
        if layer == 0 {
            3 + self.normal_lift_channels.1
        } else {
            self.edge_conv_channels[layer - 1]
        }
    }
}

/// Encoder output: `tokens_out × channels_out` rows, padding rows zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub e: Tensor,
    pub mask: Vec<bool>,
}

/// An encoding recorded on a tape.
#[derive(Debug, Clone)]
pub struct EncodedCloud {
    pub tokens: Var,
    pub mask: Vec<bool>,
}

pub fn init_params(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    let (c1, c2) = cfg.normal_lift_channels;
    init_linear(store, "encoder/lift0", 3, c1, rng);
    init_linear(store, "encoder/lift1", c1, c2, rng);
    for (l, &w) in cfg.edge_conv_channels.iter().enumerate() {
        init_linear(store, &format!("encoder/edge{l}"), 2 * cfg.edge_input_width(l), w, rng);
    }
    let concat: usize = cfg.edge_conv_channels.iter().sum();
    init_linear(store, "encoder/proj", concat, cfg.channels_out, rng);
    Ok(())
}

/// Two per-point dense layers with leaky-relu applied to an `M×3` normal
/// array.
pub fn lift_normals(tape: &mut Tape, params: &ParamStore, normals: Var) -> Result<Var> {
    let h = linear(tape, params, "encoder/lift0", normals)?;
    let h = tape.leaky_relu(h, LEAKY_SLOPE);
    let h = linear(tape, params, "encoder/lift1", h)?;
    Ok(tape.leaky_relu(h, LEAKY_SLOPE))
}

/// One edge convolution: `out_i = max_{j∈N(i)} leaky(W·[f_i ; f_j − f_i] + b)`.
///
/// Evaluated as `leaky(max_j (f_i·(Wa − Wb) + f_j·Wb) + b)` with `Wa`, `Wb`
/// the top and bottom halves of `W`, which is the same function and avoids
/// materializing the `M·k × 2F` edge features.
pub fn edge_conv(tape: &mut Tape, params: &ParamStore, layer: usize, x: Var, neighbors: &NeighborIndex) -> Result<Var> {
    let (rows, f) = tape.value(x).dims2()?;
    if neighbors.indices.len() != rows {
        return Err(Error::ShapeMismatch {
            op: "edge_conv",
            lhs: vec![rows, f],
            rhs: vec![neighbors.indices.len(), neighbors.k],
        });
    }
    let w = tape.param(params, &format!("encoder/edge{layer}/w"))?;
    let b = tape.param(params, &format!("encoder/edge{layer}/b"))?;
    let wa = tape.slice(w, 0, 0, f)?;
    let wb = tape.slice(w, 0, f, f)?;
    let wd = tape.sub(wa, wb)?;
    let p = tape.matmul(x, wd)?;
    let q = tape.matmul(x, wb)?;
    let k = neighbors.k;
    let centers: Vec<usize> = (0..rows).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    let pg = tape.gather_rows(p, &centers)?;
    let qg = tape.gather_rows(q, &neighbors.flat())?;
    let s = tape.add(pg, qg)?;
    let m = tape.group_max(s, k)?;
    let m = tape.add_row(m, b)?;
    Ok(tape.leaky_relu(m, LEAKY_SLOPE))
}

/// Records the full encoder for one cloud.
pub fn encode(tape: &mut Tape, params: &ParamStore, cfg: &EncoderConfig, cloud: &PointCloud) -> Result<EncodedCloud> {
    let real = cloud.compact();
    let normals = real
        .normals
        .as_ref()
        .ok_or_else(|| Error::DegenerateCloud("encoder input needs normals".into()))?;
    let n = real.len();
    let k = cfg.k_neighbors;
    if n <= k {
        return Err(Error::InsufficientPoints { needed: k, available: n });
    }
    let coords = flatten(&real.points);
    let coords_t = tape.constant(Tensor::matrix(n, 3, coords.clone())?);
    let normals_t = tape.constant(Tensor::matrix(n, 3, flatten(normals))?);
    let lifted = lift_normals(tape, params, normals_t)?;
    let mut x = tape.concat(&[coords_t, lifted], 1)?;

    let all = vec![true; n];
    let mut outputs = Vec::with_capacity(cfg.edge_conv_channels.len());
    for layer in 0..cfg.edge_conv_channels.len() {
        let graph = if layer == 0 {
            knn(&coords, 3, &all, k)?
        } else {
            let v = tape.value(x);
            knn(v.data(), v.cols(), &all, k)?
        };
        tape.record_branch(&graph.flat());
        x = edge_conv(tape, params, layer, x, &graph)?;
        outputs.push(x);
    }
    let feats = tape.concat(&outputs, 1)?;

    let picks = farthest_point_sampling(&real.points, cfg.tokens_out);
    tape.record_branch(&picks);
    let g = tape.gather_rows(feats, &picks)?;
    let y = linear(tape, params, "encoder/proj", g)?;
    let tokens = tape.pad_rows(y, cfg.tokens_out)?;
    let mut mask = vec![true; picks.len()];
    mask.resize(cfg.tokens_out, false);
    Ok(EncodedCloud { tokens, mask })
}

/// Runs [`encode`] on a private tape and returns the values.
pub fn encode_value(params: &ParamStore, cfg: &EncoderConfig, cloud: &PointCloud) -> Result<EmbeddingMatrix> {
    let mut tape = Tape::new();
    let out = encode(&mut tape, params, cfg, cloud)?;
    Ok(EmbeddingMatrix {
        e: tape.value(out.tokens).clone(),
        mask: out.mask,
    })
}

pub(crate) fn flatten(v: &[Vector3<f64>]) -> Vec<f64> {
    v.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
}
