//! Two-stage attention: multi-head self-attention over the tokens of one
//! cloud, per-cloud feature selection, then multi-head cross-attention over
//! the cloud descriptors of a window with each cloud barred from attending
//! to itself.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffnum::{ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::layers::glorot;

pub const SELF_PREFIX: &str = "attention/self";
pub const CROSS_PREFIX: &str = "attention/cross";

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub heads: usize,
    pub layers: usize,
    pub model_dim: usize,
    /// Layer normalization after each residual sum.
    #[serde(default = "yes")]
    pub layer_norm: bool,
}

fn yes() -> bool {
    true
}

impl AttentionConfig {
    pub fn new(heads: usize, layers: usize, model_dim: usize) -> Self {
        AttentionConfig {
            heads,
            layers,
            model_dim,
            layer_norm: true,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.layers == 0 || self.model_dim == 0 {
            return Err(Error::InvalidConfig(format!("attention dimensions must be positive: {self:?}")));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "model dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Per-channel maximum over the real tokens: one `1×D′` row per cloud.
    MaxPool,
    /// The `S` largest channel values of every token, sorted descending.
    TopS,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub mode: SelectionMode,
    pub s: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            mode: SelectionMode::MaxPool,
            s: 16,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.mode == SelectionMode::TopS && (self.s == 0 || self.s > channels) {
            return Err(Error::InvalidConfig(format!("S must lie in 1..={channels}, got {}", self.s)));
        }
        Ok(())
    }

    /// Width of the per-cloud descriptor fed to cross-attention.
    pub fn descriptor_dim(&self, channels: usize) -> usize {
        match self.mode {
            SelectionMode::MaxPool => channels,
            SelectionMode::TopS => self.s,
        }
    }
}

/// Attention weights of every layer and head, `[layer][head]`.
pub type AttentionWeights = Vec<Vec<Tensor>>;

pub fn init_params(store: &mut ParamStore, prefix: &str, cfg: &AttentionConfig, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    let d = cfg.model_dim;
    for l in 0..cfg.layers {
        for m in ["wq", "wk", "wv", "wo"] {
            store.insert(format!("{prefix}/layer{l}/{m}"), glorot(rng, d, d, 1.0));
        }
        store.insert(format!("{prefix}/layer{l}/bo"), Tensor::zeros(&[1, d]));
        store.insert(format!("{prefix}/layer{l}/ln_gain"), Tensor::full(&[1, d], 1.0));
        store.insert(format!("{prefix}/layer{l}/ln_bias"), Tensor::zeros(&[1, d]));
    }
    Ok(())
}

/// One stack of attention layers over the rows of `x`. `allowed` is the
/// row-major `rows × rows` support of every softmax; `row_mask` zeroes
/// padding rows after each layer.
fn attention_stack(
    tape: &mut Tape,
    params: &ParamStore,
    prefix: &str,
    cfg: &AttentionConfig,
    mut x: Var,
    allowed: &[bool],
    row_mask: Option<&[bool]>,
) -> Result<(Var, AttentionWeights)> {
    cfg.validate()?;
    let (_, d) = tape.value(x).dims2()?;
    if d != cfg.model_dim {
        return Err(Error::ShapeMismatch {
            op: "attention",
            lhs: tape.value(x).shape().to_vec(),
            rhs: vec![cfg.model_dim],
        });
    }
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut weights = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let p = |m: &str| format!("{prefix}/layer{l}/{m}");
        let wq = tape.param(params, &p("wq"))?;
        let wk = tape.param(params, &p("wk"))?;
        let wv = tape.param(params, &p("wv"))?;
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let mut heads = Vec::with_capacity(cfg.heads);
        let mut layer_weights = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let qh = tape.slice(q, 1, h * dh, dh)?;
            let kh = tape.slice(k, 1, h * dh, dh)?;
            let vh = tape.slice(v, 1, h * dh, dh)?;
            let kt = tape.transpose(kh)?;
            let s = tape.matmul(qh, kt)?;
            let s = tape.scale(s, scale);
            let a = tape.masked_softmax_rows(s, allowed)?;
            layer_weights.push(tape.value(a).clone());
            heads.push(tape.matmul(a, vh)?);
        }
        weights.push(layer_weights);
        let o = if heads.len() == 1 { heads[0] } else { tape.concat(&heads, 1)? };
        let wo = tape.param(params, &p("wo"))?;
        let bo = tape.param(params, &p("bo"))?;
        let o = tape.linear(o, wo, bo)?;
        let mut r = tape.add(x, o)?;
        if cfg.layer_norm {
            let gain = tape.param(params, &p("ln_gain"))?;
            let bias = tape.param(params, &p("ln_bias"))?;
            r = tape.layer_norm_rows(r, LN_EPS)?;
            r = tape.mul_row(r, gain)?;
            r = tape.add_row(r, bias)?;
        }
        x = match row_mask {
            Some(m) => tape.mask_rows(r, m)?,
            None => r,
        };
    }
    Ok((x, weights))
}

/// Self-attention within one cloud. Keys are restricted to real tokens and
/// padding rows stay zero.
pub fn self_attention(
    tape: &mut Tape,
    params: &ParamStore,
    cfg: &AttentionConfig,
    tokens: Var,
    mask: &[bool],
) -> Result<(Var, AttentionWeights)> {
    let rows = tape.value(tokens).rows();
    if mask.len() != rows {
        return Err(Error::ShapeMismatch {
            op: "self_attention mask",
            lhs: tape.value(tokens).shape().to_vec(),
            rhs: vec![mask.len()],
        });
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptyCloud);
    }
    let allowed: Vec<bool> = (0..rows).flat_map(|_| mask.iter().copied()).collect();
    attention_stack(tape, params, SELF_PREFIX, cfg, tokens, &allowed, Some(mask))
}

/// Per-cloud selection. Returns `(selected, descriptor)`: the selection
/// itself (`1×D′` or `M′×S`) and the single row handed to cross-attention.
/// In top-S mode that row is the mean of the selected rows over real tokens.
pub fn select_features(tape: &mut Tape, x: Var, mask: &[bool], sel: &SelectionConfig) -> Result<(Var, Var)> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptyCloud);
    }
    match sel.mode {
        SelectionMode::MaxPool => {
            let d = tape.masked_max_rows(x, mask)?;
            Ok((d, d))
        }
        SelectionMode::TopS => {
            let t = tape.top_s_rows(x, sel.s)?;
            let d = tape.masked_mean_rows(t, mask)?;
            Ok((t, d))
        }
    }
}

/// Cross-attention over the `N × dim` descriptors of a window; every softmax
/// excludes the diagonal.
pub fn cross_attention(
    tape: &mut Tape,
    params: &ParamStore,
    cfg: &AttentionConfig,
    descriptors: Var,
) -> Result<(Var, AttentionWeights)> {
    let n = tape.value(descriptors).rows();
    if n < 2 {
        return Err(Error::SingleCloud);
    }
    let allowed: Vec<bool> = (0..n).flat_map(|i| (0..n).map(move |j| i != j)).collect();
    attention_stack(tape, params, CROSS_PREFIX, cfg, descriptors, &allowed, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eye(d: usize) -> Tensor {
        let mut t = Tensor::zeros(&[d, d]);
        for i in 0..d {
            t.data_mut()[i * d + i] = 1.0;
        }
        t
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn plain(prefix: &str, d: usize, wq: Tensor, wk: Tensor, wv: Tensor) -> ParamStore {
        let mut p = ParamStore::new();
        init_params(&mut p, prefix, &AttentionConfig::new(1, 1, d), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        p.insert(format!("{prefix}/layer0/wq"), wq);
        p.insert(format!("{prefix}/layer0/wk"), wk);
        p.insert(format!("{prefix}/layer0/wv"), wv);
        p.insert(format!("{prefix}/layer0/wo"), eye(d));
        p
    }

    fn no_ln(heads: usize, d: usize) -> AttentionConfig {
        AttentionConfig {
            layer_norm: false,
            ..AttentionConfig::new(heads, 1, d)
        }
    }

    #[test]
    fn self_attention_rows_sum_to_one_over_real_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = AttentionConfig::new(2, 2, 4);
        let mut p = ParamStore::new();
        init_params(&mut p, SELF_PREFIX, &cfg, &mut rng).unwrap();
        let mut x = random(&mut rng, 5, 4);
        x.data_mut()[16..].iter_mut().for_each(|v| *v = 0.0);
        let mask = [true, true, true, true, false];
        let mut t = Tape::new();
        let xv = t.constant(x);
        let (y, w) = self_attention(&mut t, &p, &cfg, xv, &mask).unwrap();
        for a in w.iter().flatten() {
            for r in 0..5 {
                let row = a.row_slice(r);
                assert_eq!(row[4], 0.0);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert!(t.value(y).row_slice(4).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_real_token_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = 3;
        let wv = random(&mut rng, d, d);
        let p = plain(SELF_PREFIX, d, random(&mut rng, d, d), random(&mut rng, d, d), wv.clone());
        let e = vec![0.5, -1.0, 2.0];
        let x = Tensor::matrix(2, d, [e.clone(), vec![0.0; d]].concat()).unwrap();
        let mut t = Tape::new();
        let xv = t.constant(x);
        let (y, w) = self_attention(&mut t, &p, &no_ln(1, d), xv, &[true, false]).unwrap();
        assert_eq!(w[0][0].row_slice(0), &[1.0, 0.0]);
        for c in 0..d {
            let v: f64 = (0..d).map(|r| e[r] * wv.get(r, c)).sum();
            assert!((t.value(y).get(0, c) - (e[c] + v)).abs() < 1e-12);
        }
    }

    #[test]
    fn two_token_hand_computed() {
        // 1-d model: q = 2e, k = e, v = 3e, tokens (1, 2)
        let p = plain(
            SELF_PREFIX,
            1,
            Tensor::scalar(2.0),
            Tensor::scalar(1.0),
            Tensor::scalar(3.0),
        );
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
        let (y, w) = self_attention(&mut t, &p, &no_ln(1, 1), x, &[true, true]).unwrap();
        // row 0 scores (2, 4), row 1 scores (4, 8)
        let a0 = 1.0 / (1.0 + 2f64.exp());
        let a1 = 1.0 / (1.0 + 4f64.exp());
        assert!((w[0][0].get(0, 0) - a0).abs() < 1e-15);
        assert!((w[0][0].get(1, 0) - a1).abs() < 1e-15);
        let y0 = 1.0 + a0 * 3.0 + (1.0 - a0) * 6.0;
        let y1 = 2.0 + a1 * 3.0 + (1.0 - a1) * 6.0;
        assert!((t.value(y).get(0, 0) - y0).abs() < 1e-12);
        assert!((t.value(y).get(1, 0) - y1).abs() < 1e-12);
    }

    #[test]
    fn max_pool_per_channel() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(3, 2, vec![1.0, 5.0, 3.0, 2.0, 9.0, 9.0]).unwrap());
        let sel = SelectionConfig::default();
        let (d, _) = select_features(&mut t, x, &[true, true, false], &sel).unwrap();
        assert_eq!(t.value(d).data(), &[3.0, 5.0]);
        assert_eq!(
            select_features(&mut t, x, &[false; 3], &sel).unwrap_err().kind(),
            "EmptyCloud"
        );
    }

    #[test]
    fn top_s_full_sort_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 4, 6);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        for s in [6, 3] {
            let sel = SelectionConfig {
                mode: SelectionMode::TopS,
                s,
            };
            let (top, _) = select_features(&mut t, xv, &[true; 4], &sel).unwrap();
            for r in 0..4 {
                let mut row = x.row_slice(r).to_vec();
                row.sort_by(|a, b| b.partial_cmp(a).unwrap());
                row.truncate(s);
                assert_eq!(t.value(top).row_slice(r), row.as_slice());
            }
        }
    }

    #[test]
    fn cross_attention_two_clouds() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = 3;
        let wv = random(&mut rng, d, d);
        let p = plain(CROSS_PREFIX, d, random(&mut rng, d, d), random(&mut rng, d, d), wv.clone());
        let x = random(&mut rng, 2, d);
        let mut t = Tape::new();
        let xv = t.constant(x.clone());
        let (y, w) = cross_attention(&mut t, &p, &no_ln(1, d), xv).unwrap();
        assert_eq!(w[0][0].data(), &[0.0, 1.0, 1.0, 0.0]);
        for c in 0..d {
            let v: f64 = (0..d).map(|r| x.get(1, r) * wv.get(r, c)).sum();
            assert!((t.value(y).get(0, c) - (x.get(0, c) + v)).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_attention_three_clouds_hand_computed() {
        let p = plain(
            CROSS_PREFIX,
            1,
            Tensor::scalar(1.0),
            Tensor::scalar(1.0),
            Tensor::scalar(1.0),
        );
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(3, 1, vec![0.0, 1.0, 2.0]).unwrap());
        let (_, w) = cross_attention(&mut t, &p, &no_ln(1, 1), x).unwrap();
        let a = &w[0][0];
        // row k scores x_k·x_l over l ≠ k
        let sm = |a: f64, b: f64| (a.exp() / (a.exp() + b.exp()), b.exp() / (a.exp() + b.exp()));
        let expect = [
            [0.0, sm(0.0, 0.0).0, sm(0.0, 0.0).1],
            [sm(0.0, 2.0).0, 0.0, sm(0.0, 2.0).1],
            [sm(0.0, 2.0).0, sm(0.0, 2.0).1, 0.0],
        ];
        for r in 0..3 {
            for c in 0..3 {
                assert!((a.get(r, c) - expect[r][c]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn own_value_does_not_reach_own_output() {
        // zeroing the residual path isolates the attention term; changing
        // descriptor 0 must leave row 0 of that term unchanged
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 2;
        let p = plain(CROSS_PREFIX, d, Tensor::zeros(&[d, d]), Tensor::zeros(&[d, d]), random(&mut rng, d, d));
        let run = |x: Tensor| {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let (y, _) = cross_attention(&mut t, &p, &no_ln(1, d), xv).unwrap();
            (t.value(y).get(0, 0) - x.get(0, 0), t.value(y).get(0, 1) - x.get(0, 1))
        };
        let x = random(&mut rng, 3, d);
        let mut x2 = x.clone();
        x2.data_mut()[0] += 10.0;
        let (a, b) = (run(x), run(x2));
        assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12);
    }

    #[test]
    fn cross_attention_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = AttentionConfig::new(2, 2, 4);
        let mut p = ParamStore::new();
        init_params(&mut p, CROSS_PREFIX, &cfg, &mut rng).unwrap();
        let x = random(&mut rng, 4, 4);
        let perm = [2, 0, 3, 1];
        let px = Tensor::from_rows(&perm.iter().map(|&i| x.row_slice(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let run = |x: Tensor| {
            let mut t = Tape::new();
            let xv = t.constant(x);
            let (y, _) = cross_attention(&mut t, &p, &cfg, xv).unwrap();
            t.value(y).clone()
        };
        let (a, b) = (run(x), run(px));
        for (r, &i) in perm.iter().enumerate() {
            for (u, v) in b.row_slice(r).iter().zip(a.row_slice(i)) {
                assert!((u - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn single_cloud_rejected() {
        let cfg = AttentionConfig::new(1, 1, 2);
        let mut p = ParamStore::new();
        init_params(&mut p, CROSS_PREFIX, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(vec![1.0, 2.0]));
        assert_eq!(cross_attention(&mut t, &p, &cfg, x).unwrap_err().kind(), "SingleCloud");
    }

    #[test]
    fn heads_must_divide_dim() {
        assert!(AttentionConfig::new(3, 1, 8).validate().is_err());
    }
}
