//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the nodes in reverse, so each node is visited exactly once. Values
//! are owned by the tape and never released before it is dropped.
//!
//! Operations that make discrete choices (arg-max routing, top-S sorting,
//! externally supplied neighbor graphs) fold those choices into a branch
//! signature. Two evaluations with equal signatures took the same piecewise
//! branch, which is what the finite-difference checker needs to know.

use nalgebra::{Matrix3, Vector3};

use super::params::ParamStore;
use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use crate::error::{Error, Result};
use crate::geom3d::ProcrustesParts;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(String),
    MatMul(Var, Var),
    Linear(Var, Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Relu(Var),
    LeakyRelu(Var, f64),
    Softmax { x: Var, axis: usize },
    MaskedSoftmaxRows(Var),
    Max { x: Var, axis: usize, arg: Vec<usize> },
    MaskedMaxRows { x: Var, arg: Vec<usize> },
    GroupMax { x: Var, arg: Vec<usize> },
    MaskedMeanRows { x: Var, mask: Vec<bool> },
    Mean(Var),
    Sum(Var),
    SumSquares(Var),
    Mse(Var, Var),
    GatherRows { x: Var, idx: Vec<usize> },
    PadRows(Var),
    MaskRows { x: Var, mask: Vec<bool> },
    TopS { x: Var, idx: Vec<usize> },
    LayerNormRows { x: Var, inv_std: Vec<f64> },
    GramSchmidt { x: Var, cache: GsCache },
    Procrustes { x: Var, parts: Box<ProcrustesCache> },
    AngularDistance { a: Var, b: Var },
}

#[derive(Debug, Clone)]
struct GsCache {
    b1: Vector3<f64>,
    b2: Vector3<f64>,
    a2: Vector3<f64>,
    n1: f64,
    nu: f64,
}

#[derive(Debug, Clone)]
struct ProcrustesCache {
    u: Matrix3<f64>,
    v: Matrix3<f64>,
    sigma: Vector3<f64>,
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    branch: u64,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            branch: FNV_OFFSET,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Hash of all discrete choices made while recording.
    pub fn branch_signature(&self) -> u64 {
        self.branch
    }

    /// Folds externally made discrete choices (e.g. a neighbor graph) into the
    /// branch signature.
    pub fn record_branch(&mut self, choices: &[usize]) {
        for &c in choices {
            self.branch = (self.branch ^ c as u64).wrapping_mul(FNV_PRIME);
        }
        self.branch = (self.branch ^ 0xff).wrapping_mul(FNV_PRIME);
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn v(&self, x: Var) -> &Tensor {
        &self.nodes[x.0].value
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant)
    }

    /// Leaf bound to a named parameter; its gradient accumulates into the
    /// store's slot on `backward`.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        let value = store
            .value(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?
            .clone();
        Ok(self.push(value, Op::Param(name.to_string())))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.v(a), self.v(b));
        let (m, k) = ta.dims2()?;
        let (k2, n) = tb.dims2()?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let out = Tensor::matrix(m, n, matmul(ta.data(), tb.data(), m, k, n))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `x·w + b` with `b` a `1×out` row added to every row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.v(x), self.v(w), self.v(b));
        let (m, k) = tx.dims2()?;
        let (k2, n) = tw.dims2()?;
        if k != k2 {
            return Err(mismatch("linear", tx, tw));
        }
        if tb.shape() != [1, n] {
            return Err(mismatch("linear bias", tw, tb));
        }
        let mut out = matmul(tx.data(), tw.data(), m, k, n);
        for row in out.chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let out = Tensor::matrix(m, n, out)?;
        Ok(self.push(out, Op::Linear(x, w, b)))
    }

    fn zip_with(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.v(a), self.v(b));
        ta.same_shape(tb, op)?;
        Tensor::new(
            ta.shape().to_vec(),
            ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.v(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c))
    }

    fn row_op(&mut self, x: Var, r: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (tx, tr) = (self.v(x), self.v(r));
        let (m, n) = tx.dims2()?;
        if tr.shape() != [1, n] {
            return Err(mismatch(op, tx, tr));
        }
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, rv) in row.iter_mut().zip(tr.data()) {
                *o = f(*o, *rv);
            }
        }
        Tensor::matrix(m, n, out)
    }

    /// Adds a `1×cols` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let out = self.row_op(x, row, "add_row", |a, b| a + b)?;
        Ok(self.push(out, Op::AddRow(x, row)))
    }

    /// Multiplies every row of `x` elementwise by a `1×cols` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let out = self.row_op(x, row, "mul_row", |a, b| a * b)?;
        Ok(self.push(out, Op::MulRow(x, row)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.v(x).transpose()?;
        Ok(self.push(out, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let tx = self.v(x);
        let out = Tensor::new(shape.to_vec(), tx.data().to_vec()).map_err(|_| Error::ShapeMismatch {
            op: "reshape",
            lhs: tx.shape().to_vec(),
            rhs: shape.to_vec(),
        })?;
        Ok(self.push(out, Op::Reshape(x)))
    }

    /// Concatenates 2-d tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.v(*parts.first().ok_or(Error::ShapeMismatch {
            op: "concat",
            lhs: vec![],
            rhs: vec![],
        })?);
        let (r0, c0) = first.dims2()?;
        let mut data = Vec::new();
        let out = match axis {
            0 => {
                let mut rows = 0;
                for &p in parts {
                    let t = self.v(p);
                    let (r, c) = t.dims2()?;
                    if c != c0 {
                        return Err(mismatch("concat", self.v(parts[0]), t));
                    }
                    rows += r;
                    data.extend_from_slice(t.data());
                }
                Tensor::matrix(rows, c0, data)?
            }
            1 => {
                let mut cols = 0;
                for &p in parts {
                    let t = self.v(p);
                    let (r, c) = t.dims2()?;
                    if r != r0 {
                        return Err(mismatch("concat", self.v(parts[0]), t));
                    }
                    cols += c;
                }
                data.reserve(r0 * cols);
                for i in 0..r0 {
                    for &p in parts {
                        data.extend_from_slice(self.v(p).row_slice(i));
                    }
                }
                Tensor::matrix(r0, cols, data)?
            }
            _ => {
                return Err(Error::ShapeMismatch {
                    op: "concat axis",
                    lhs: vec![axis],
                    rhs: vec![0, 1],
                })
            }
        };
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// `len` rows (axis 0) or columns (axis 1) starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = self.v(x);
        let (r, c) = tx.dims2()?;
        let bound = if axis == 0 { r } else { c };
        if axis > 1 || start + len > bound {
            return Err(Error::ShapeMismatch {
                op: "slice",
                lhs: tx.shape().to_vec(),
                rhs: vec![axis, start, len],
            });
        }
        let out = if axis == 0 {
            Tensor::matrix(len, c, tx.data()[start * c..(start + len) * c].to_vec())?
        } else {
            let mut d = Vec::with_capacity(r * len);
            for i in 0..r {
                d.extend_from_slice(&tx.row_slice(i)[start..start + len]);
            }
            Tensor::matrix(r, len, d)?
        };
        Ok(self.push(out, Op::Slice { x, axis, start }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.v(x).map(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.v(x).map(|v| if v > 0.0 { v } else { slope * v });
        self.push(out, Op::LeakyRelu(x, slope))
    }

    /// Softmax along `axis` (0 = down columns, 1 = across rows).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.v(x);
        let (r, c) = tx.dims2()?;
        let allowed = vec![true; r * c];
        let out = if axis == 1 {
            masked_softmax_rows(tx.data(), &allowed, r, c)
        } else {
            let t = tx.transpose()?;
            let s = masked_softmax_rows(t.data(), &allowed, c, r);
            Tensor::matrix(c, r, s)?.transpose()?.into_data()
        };
        let out = Tensor::matrix(r, c, out)?;
        Ok(self.push(out, Op::Softmax { x, axis }))
    }

    /// Row softmax restricted to entries with `allowed = true`; the rest get
    /// weight exactly zero. Rows with no allowed entry are all zero.
    pub fn masked_softmax_rows(&mut self, x: Var, allowed: &[bool]) -> Result<Var> {
        let tx = self.v(x);
        let (r, c) = tx.dims2()?;
        if allowed.len() != r * c {
            return Err(Error::ShapeMismatch {
                op: "masked_softmax_rows",
                lhs: tx.shape().to_vec(),
                rhs: vec![allowed.len()],
            });
        }
        let out = Tensor::matrix(r, c, masked_softmax_rows(tx.data(), allowed, r, c))?;
        Ok(self.push(out, Op::MaskedSoftmaxRows(x)))
    }

    /// Maximum along `axis`; the subgradient goes to the lowest-index
    /// maximizer.
    pub fn max(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.v(x);
        let (r, c) = tx.dims2()?;
        let (out, arg) = if axis == 0 {
            let mask = vec![true; r];
            let (vals, arg) = masked_col_max(tx, &mask).ok_or(Error::EmptyCloud)?;
            (Tensor::matrix(1, c, vals)?, arg)
        } else {
            let mut vals = Vec::with_capacity(r);
            let mut arg = Vec::with_capacity(r);
            for i in 0..r {
                let row = tx.row_slice(i);
                let mut best = 0;
                for j in 1..c {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                vals.push(row[best]);
                arg.push(best);
            }
            (Tensor::matrix(r, 1, vals)?, arg)
        };
        self.record_branch(&arg);
        Ok(self.push(out, Op::Max { x, axis, arg }))
    }

    /// Per-column maximum over the rows with `mask = true` (`1×cols`).
    pub fn masked_max_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let tx = self.v(x);
        let (r, c) = tx.dims2()?;
        if mask.len() != r {
            return Err(Error::ShapeMismatch {
                op: "masked_max_rows",
                lhs: tx.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let (vals, arg) = masked_col_max(tx, mask).ok_or(Error::EmptyCloud)?;
        let out = Tensor::matrix(1, c, vals)?;
        self.record_branch(&arg);
        Ok(self.push(out, Op::MaskedMaxRows { x, arg }))
    }

    /// Per-column maximum over consecutive blocks of `group` rows.
    pub fn group_max(&mut self, x: Var, group: usize) -> Result<Var> {
        let tx = self.v(x);
        let (r, c) = tx.dims2()?;
        if group == 0 || r % group != 0 {
            return Err(Error::ShapeMismatch {
                op: "group_max",
                lhs: tx.shape().to_vec(),
                rhs: vec![group],
            });
        }
        let g = r / group;
        let mut vals = Vec::with_capacity(g * c);
        let mut arg = Vec::with_capacity(g * c);
        for b in 0..g {
            for j in 0..c {
                let mut best = b * group;
                for i in b * group + 1..(b + 1) * group {
                    if tx.data()[i * c + j] > tx.data()[best * c + j] {
                        best = i;
                    }
                }
                vals.push(tx.data()[best * c + j]);
                arg.push(best);
            }
        }
        let out = Tensor::matrix(g, c, vals)?;
        self.record_branch(&arg);
        Ok(self.push(out, Op::GroupMax { x, arg }))
    }

    /// Mean over the rows with `mask = true` (`1×cols`).
    pub fn masked_mean_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let tx = self.v(x);
        let (r, c) = tx.dims2()?;
        let count = mask.iter().filter(|&&m| m).count();
        if mask.len() != r {
            return Err(Error::ShapeMismatch {
                op: "masked_mean_rows",
                lhs: tx.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        if count == 0 {
            return Err(Error::EmptyCloud);
        }
        let mut vals = vec![0.0; c];
        for i in (0..r).filter(|&i| mask[i]) {
            for (v, x) in vals.iter_mut().zip(tx.row_slice(i)) {
                *v += x;
            }
        }
        vals.iter_mut().for_each(|v| *v /= count as f64);
        let out = Tensor::matrix(1, c, vals)?;
        Ok(self.push(
            out,
            Op::MaskedMeanRows {
                x,
                mask: mask.to_vec(),
            },
        ))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.v(x);
        let out = Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64);
        self.push(out, Op::Mean(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.v(x).data().iter().sum());
        self.push(out, Op::Sum(x))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.v(x).data().iter().map(|v| v * v).sum());
        self.push(out, Op::SumSquares(x))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.v(a), self.v(b));
        ta.same_shape(tb, "mse")?;
        let s: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let out = Tensor::scalar(s / ta.numel() as f64);
        Ok(self.push(out, Op::Mse(a, b)))
    }

    /// Rows `idx[0], idx[1], …` of `x`; repeated indices are allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.v(x);
        let (r, c) = tx.dims2()?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::ShapeMismatch {
                op: "gather_rows",
                lhs: tx.shape().to_vec(),
                rhs: vec![bad],
            });
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(tx.row_slice(i));
        }
        let out = Tensor::matrix(idx.len(), c, data)?;
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Appends zero rows up to `total`.
    pub fn pad_rows(&mut self, x: Var, total: usize) -> Result<Var> {
        let tx = self.v(x);
        let (r, c) = tx.dims2()?;
        if total < r {
            return Err(Error::ShapeMismatch {
                op: "pad_rows",
                lhs: tx.shape().to_vec(),
                rhs: vec![total],
            });
        }
        let mut data = tx.data().to_vec();
        data.resize(total * c, 0.0);
        let out = Tensor::matrix(total, c, data)?;
        Ok(self.push(out, Op::PadRows(x)))
    }

    /// Zeroes the rows with `mask = false`.
    pub fn mask_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let tx = self.v(x);
        let (r, c) = tx.dims2()?;
        if mask.len() != r {
            return Err(Error::ShapeMismatch {
                op: "mask_rows",
                lhs: tx.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let mut data = tx.data().to_vec();
        for (i, row) in data.chunks_mut(c).enumerate() {
            if !mask[i] {
                row.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let out = Tensor::matrix(r, c, data)?;
        Ok(self.push(
            out,
            Op::MaskRows {
                x,
                mask: mask.to_vec(),
            },
        ))
    }

    /// The `s` largest entries of each row, sorted descending. Equal values
    /// keep their column order.
    pub fn top_s_rows(&mut self, x: Var, s: usize) -> Result<Var> {
        let tx = self.v(x);
        let (r, c) = tx.dims2()?;
        if s == 0 || s > c {
            return Err(Error::InvalidConfig(format!(
                "top-S needs 1 ≤ S ≤ {c}, got {s}"
            )));
        }
        let mut idx = Vec::with_capacity(r * s);
        let mut data = Vec::with_capacity(r * s);
        let mut order: Vec<usize> = Vec::with_capacity(c);
        for i in 0..r {
            let row = tx.row_slice(i);
            order.clear();
            order.extend(0..c);
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            for &j in &order[..s] {
                idx.push(j);
                data.push(row[j]);
            }
        }
        let out = Tensor::matrix(r, s, data)?;
        self.record_branch(&idx);
        Ok(self.push(out, Op::TopS { x, idx }))
    }

    /// Per-row standardization `(x − μ)/√(σ² + eps)` without affine terms.
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let tx = self.v(x);
        let (r, c) = tx.dims2()?;
        let mut data = tx.data().to_vec();
        let mut inv_std = Vec::with_capacity(r);
        for row in data.chunks_mut(c) {
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mu) * is);
            inv_std.push(is);
        }
        let out = Tensor::matrix(r, c, data)?;
        Ok(self.push(out, Op::LayerNormRows { x, inv_std }))
    }

    /// Maps 6 features (two stacked columns) to a rotation matrix.
    pub fn gram_schmidt(&mut self, x: Var) -> Result<Var> {
        let tx = self.v(x);
        if tx.numel() != 6 {
            return Err(Error::ShapeMismatch {
                op: "gram_schmidt",
                lhs: tx.shape().to_vec(),
                rhs: vec![1, 6],
            });
        }
        let d = tx.data();
        let a1 = Vector3::new(d[0], d[1], d[2]);
        let a2 = Vector3::new(d[3], d[4], d[5]);
        let r = crate::geom3d::gram_schmidt_project(&nalgebra::Matrix3x2::from_columns(&[a1, a2]))?;
        let m = r.matrix();
        let n1 = a1.norm();
        let b1 = a1 / n1;
        let u = a2 - b1 * b1.dot(&a2);
        let cache = GsCache {
            b1,
            b2: m.column(1).into_owned(),
            a2,
            n1,
            nu: u.norm(),
        };
        let out = matrix3_tensor(m);
        Ok(self.push(out, Op::GramSchmidt { x, cache }))
    }

    /// Maps 9 row-major features to the Frobenius-nearest rotation.
    pub fn procrustes(&mut self, x: Var) -> Result<Var> {
        let tx = self.v(x);
        if tx.numel() != 9 {
            return Err(Error::ShapeMismatch {
                op: "procrustes",
                lhs: tx.shape().to_vec(),
                rhs: vec![1, 9],
            });
        }
        let w = Matrix3::from_row_slice(tx.data());
        let parts = ProcrustesParts::new(&w)?;
        let out = matrix3_tensor(&parts.rotation());
        Ok(self.push(
            out,
            Op::Procrustes {
                x,
                parts: Box::new(ProcrustesCache {
                    u: parts.u,
                    v: parts.v,
                    sigma: parts.sigma,
                }),
            },
        ))
    }

    /// Geodesic angle between two 3×3 rotation values via their chordal
    /// distance.
    pub fn angular_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.v(a), self.v(b));
        ta.same_shape(tb, "angular_distance")?;
        if ta.shape() != [3, 3] {
            return Err(mismatch("angular_distance", ta, tb));
        }
        let chord = chord_norm(ta, tb);
        let out = Tensor::scalar(2.0 * (chord / (2.0 * std::f64::consts::SQRT_2)).clamp(0.0, 1.0).asin());
        Ok(self.push(out, Op::AngularDistance { a, b }))
    }

    /// Gradients of a scalar `loss` with respect to every node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let lt = self.v(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut acc = |v: Var, t: Tensor| {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.v(*a), self.v(*b));
                let (m, k) = ta.dims2()?;
                let n = tb.cols();
                acc(*a, Tensor::matrix(m, k, matmul_nt(g.data(), tb.data(), m, n, k))?);
                acc(*b, Tensor::matrix(k, n, matmul_tn(ta.data(), g.data(), m, k, n))?);
            }
            Op::Linear(x, w, b) => {
                let (tx, tw) = (self.v(*x), self.v(*w));
                let (m, k) = tx.dims2()?;
                let n = tw.cols();
                acc(*x, Tensor::matrix(m, k, matmul_nt(g.data(), tw.data(), m, n, k))?);
                acc(*w, Tensor::matrix(k, n, matmul_tn(tx.data(), g.data(), m, k, n))?);
                acc(*b, Tensor::matrix(1, n, col_sums(g))?);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.v(*a), self.v(*b));
                acc(*a, zip(g, tb, |x, y| x * y));
                acc(*b, zip(g, ta, |x, y| x * y));
            }
            Op::Scale(x, c) => acc(*x, g.map(|v| v * c)),
            Op::AddRow(x, r) => {
                acc(*x, g.clone());
                acc(*r, Tensor::matrix(1, g.cols(), col_sums(g))?);
            }
            Op::MulRow(x, r) => {
                let (tx, tr) = (self.v(*x), self.v(*r));
                let c = g.cols();
                let mut gx = g.data().to_vec();
                for row in gx.chunks_mut(c) {
                    for (v, s) in row.iter_mut().zip(tr.data()) {
                        *v *= s;
                    }
                }
                acc(*x, Tensor::new(g.shape().to_vec(), gx)?);
                acc(*r, Tensor::matrix(1, c, col_sums(&zip(g, tx, |a, b| a * b)))?);
            }
            Op::Transpose(x) => acc(*x, g.transpose()?),
            Op::Reshape(x) => acc(*x, Tensor::new(self.v(*x).shape().to_vec(), g.data().to_vec())?),
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.v(p).dims2()?;
                    let part = if *axis == 0 {
                        let cols = g.cols();
                        let t = Tensor::matrix(r, c, g.data()[offset * cols..(offset + r) * cols].to_vec())?;
                        offset += r;
                        t
                    } else {
                        let mut d = Vec::with_capacity(r * c);
                        for i in 0..r {
                            d.extend_from_slice(&g.row_slice(i)[offset..offset + c]);
                        }
                        offset += c;
                        Tensor::matrix(r, c, d)?
                    };
                    acc(p, part);
                }
            }
            Op::Slice { x, axis, start } => {
                let tx = self.v(*x);
                let (_, c) = tx.dims2()?;
                let mut gx = Tensor::zeros(tx.shape());
                let (gr, gc) = g.dims2()?;
                for i in 0..gr {
                    for j in 0..gc {
                        let (si, sj) = if *axis == 0 { (start + i, j) } else { (i, start + j) };
                        gx.data_mut()[si * c + sj] = g.data()[i * gc + j];
                    }
                }
                acc(*x, gx);
            }
            Op::Relu(x) => acc(*x, zip(g, self.v(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 })),
            Op::LeakyRelu(x, s) => acc(*x, zip(g, self.v(*x), |gv, xv| if xv > 0.0 { gv } else { gv * s })),
            Op::Softmax { x, axis } => {
                let (r, c) = out.dims2()?;
                let gx = if *axis == 1 {
                    softmax_rows_backward(out.data(), g.data(), r, c)
                } else {
                    let yt = out.transpose()?;
                    let gt = g.transpose()?;
                    let d = softmax_rows_backward(yt.data(), gt.data(), c, r);
                    Tensor::matrix(c, r, d)?.transpose()?.into_data()
                };
                acc(*x, Tensor::matrix(r, c, gx)?);
            }
            Op::MaskedSoftmaxRows(x) => {
                let (r, c) = out.dims2()?;
                acc(*x, Tensor::matrix(r, c, softmax_rows_backward(out.data(), g.data(), r, c))?);
            }
            Op::Max { x, axis, arg } => {
                let tx = self.v(*x);
                let c = tx.cols();
                let mut gx = Tensor::zeros(tx.shape());
                if *axis == 0 {
                    for (j, &i) in arg.iter().enumerate() {
                        gx.data_mut()[i * c + j] += g.data()[j];
                    }
                } else {
                    for (i, &j) in arg.iter().enumerate() {
                        gx.data_mut()[i * c + j] += g.data()[i];
                    }
                }
                acc(*x, gx);
            }
            Op::MaskedMaxRows { x, arg } => {
                let tx = self.v(*x);
                let c = tx.cols();
                let mut gx = Tensor::zeros(tx.shape());
                for (j, &i) in arg.iter().enumerate() {
                    gx.data_mut()[i * c + j] += g.data()[j];
                }
                acc(*x, gx);
            }
            Op::GroupMax { x, arg } => {
                let tx = self.v(*x);
                let c = tx.cols();
                let mut gx = Tensor::zeros(tx.shape());
                for (o, &i) in arg.iter().enumerate() {
                    gx.data_mut()[i * c + o % c] += g.data()[o];
                }
                acc(*x, gx);
            }
            Op::MaskedMeanRows { x, mask } => {
                let tx = self.v(*x);
                let c = tx.cols();
                let count = mask.iter().filter(|&&m| m).count() as f64;
                let mut gx = Tensor::zeros(tx.shape());
                for (i, row) in gx.data_mut().chunks_mut(c).enumerate() {
                    if mask[i] {
                        for (v, gv) in row.iter_mut().zip(g.data()) {
                            *v = gv / count;
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Mean(x) => {
                let tx = self.v(*x);
                acc(*x, Tensor::full(tx.shape(), g.data()[0] / tx.numel() as f64));
            }
            Op::Sum(x) => acc(*x, Tensor::full(self.v(*x).shape(), g.data()[0])),
            Op::SumSquares(x) => {
                let gv = g.data()[0];
                acc(*x, self.v(*x).map(|v| 2.0 * v * gv));
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (self.v(*a), self.v(*b));
                let scale = 2.0 * g.data()[0] / ta.numel() as f64;
                let d = zip(ta, tb, |x, y| (x - y) * scale);
                acc(*b, d.map(|v| -v));
                acc(*a, d);
            }
            Op::GatherRows { x, idx } => {
                let tx = self.v(*x);
                let c = tx.cols();
                let mut gx = Tensor::zeros(tx.shape());
                for (o, &i) in idx.iter().enumerate() {
                    let dst = &mut gx.data_mut()[i * c..(i + 1) * c];
                    for (d, s) in dst.iter_mut().zip(g.row_slice(o)) {
                        *d += s;
                    }
                }
                acc(*x, gx);
            }
            Op::PadRows(x) => {
                let tx = self.v(*x);
                acc(*x, Tensor::new(tx.shape().to_vec(), g.data()[..tx.numel()].to_vec())?);
            }
            Op::MaskRows { x, mask } => {
                let c = g.cols();
                let mut gx = g.data().to_vec();
                for (i, row) in gx.chunks_mut(c).enumerate() {
                    if !mask[i] {
                        row.iter_mut().for_each(|v| *v = 0.0);
                    }
                }
                acc(*x, Tensor::new(g.shape().to_vec(), gx)?);
            }
            Op::TopS { x, idx } => {
                let tx = self.v(*x);
                let c = tx.cols();
                let s = out.cols();
                let mut gx = Tensor::zeros(tx.shape());
                for (o, &j) in idx.iter().enumerate() {
                    let i = o / s;
                    gx.data_mut()[i * c + j] += g.data()[o];
                }
                acc(*x, gx);
            }
            Op::LayerNormRows { x, inv_std } => {
                let (r, c) = out.dims2()?;
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    let y = out.row_slice(i);
                    let gr = g.row_slice(i);
                    let mean_g = gr.iter().sum::<f64>() / c as f64;
                    let mean_gy = gr.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        gx[i * c + j] = inv_std[i] * (gr[j] - mean_g - y[j] * mean_gy);
                    }
                }
                acc(*x, Tensor::matrix(r, c, gx)?);
            }
            Op::GramSchmidt { x, cache } => {
                let gm = Matrix3::from_row_slice(g.data());
                let (g1, g2, g3) = (
                    gm.column(0).into_owned(),
                    gm.column(1).into_owned(),
                    gm.column(2).into_owned(),
                );
                let GsCache { b1, b2, a2, n1, nu } = cache;
                // b3 = b1 × b2
                let gb1 = g1 + b2.cross(&g3);
                let gb2 = g2 + g3.cross(b1);
                // b2 = u / |u|
                let gu = (gb2 - b2 * b2.dot(&gb2)) / *nu;
                // u = a2 − (b1·a2) b1
                let ga2 = gu - b1 * b1.dot(&gu);
                let gb1 = gb1 - (gu * b1.dot(a2) + a2 * b1.dot(&gu));
                // b1 = a1 / |a1|
                let ga1 = (gb1 - b1 * b1.dot(&gb1)) / *n1;
                let shape = self.v(*x).shape().to_vec();
                acc(
                    *x,
                    Tensor::new(shape, vec![ga1.x, ga1.y, ga1.z, ga2.x, ga2.y, ga2.z])?,
                );
            }
            Op::Procrustes { x, parts } => {
                let pp = ProcrustesParts {
                    u: parts.u,
                    v: parts.v,
                    sigma: parts.sigma,
                };
                let gw = pp.backward(&Matrix3::from_row_slice(g.data()));
                let shape = self.v(*x).shape().to_vec();
                let data = (0..3).flat_map(|r| (0..3).map(move |c| (r, c))).map(|(r, c)| gw[(r, c)]).collect();
                acc(*x, Tensor::new(shape, data)?);
            }
            Op::AngularDistance { a, b } => {
                let (ta, tb) = (self.v(*a), self.v(*b));
                let chord = chord_norm(ta, tb);
                let ratio = chord / (2.0 * std::f64::consts::SQRT_2);
                // dδ/dchord = 1 / (√2·√(1 − ratio²)); zero where the clamp is active
                let scale = if chord > 0.0 && ratio < 1.0 {
                    g.data()[0] / (std::f64::consts::SQRT_2 * (1.0 - ratio * ratio).sqrt() * chord)
                } else {
                    0.0
                };
                let d = zip(ta, tb, |x, y| (x - y) * scale);
                acc(*b, d.map(|v| -v));
                acc(*a, d);
            }
        }
        Ok(())
    }

    /// Names of parameter leaves, in recording order.
    pub(crate) fn param_leaves(&self) -> impl Iterator<Item = (Var, &str)> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match &n.op {
            Op::Param(name) => Some((Var(i), name.as_str())),
            _ => None,
        })
    }
}

/// Per-node gradients produced by [`Tape::gradients`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient at `v`, or `None` if the loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// Runs reverse mode from `loss` and writes parameter gradients into
/// `store`. Every gradient slot is reset first, so parameters the loss does
/// not reach end up with zero gradient.
pub fn backward(tape: &Tape, loss: Var, store: &mut ParamStore) -> Result<()> {
    let grads = tape.gradients(loss)?;
    store.zero_grad();
    for (var, name) in tape.param_leaves() {
        if let Some(g) = grads.get(var) {
            store.accumulate_grad(name, g)?;
        }
    }
    Ok(())
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect(),
    )
    .expect("shapes checked in forward")
}

fn col_sums(t: &Tensor) -> Vec<f64> {
    let c = t.cols();
    let mut s = vec![0.0; c];
    for row in t.data().chunks(c) {
        for (a, b) in s.iter_mut().zip(row) {
            *a += b;
        }
    }
    s
}

fn chord_norm(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn matrix3_tensor(m: &Matrix3<f64>) -> Tensor {
    let data = (0..3).flat_map(|r| (0..3).map(move |c| m[(r, c)])).collect();
    Tensor::matrix(3, 3, data).expect("3×3")
}

fn masked_softmax_rows(x: &[f64], allowed: &[bool], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &x[i * c..(i + 1) * c];
        let ok = &allowed[i * c..(i + 1) * c];
        let mx = row
            .iter()
            .zip(ok)
            .filter(|(_, &a)| a)
            .map(|(v, _)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        if mx == f64::NEG_INFINITY {
            continue;
        }
        let o = &mut out[i * c..(i + 1) * c];
        let mut z = 0.0;
        for j in 0..c {
            if ok[j] {
                o[j] = (row[j] - mx).exp();
                z += o[j];
            }
        }
        o.iter_mut().for_each(|v| *v /= z);
    }
    out
}

fn softmax_rows_backward(y: &[f64], g: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut gx = vec![0.0; r * c];
    for i in 0..r {
        let yr = &y[i * c..(i + 1) * c];
        let gr = &g[i * c..(i + 1) * c];
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for j in 0..c {
            gx[i * c + j] = yr[j] * (gr[j] - dot);
        }
    }
    gx
}

fn masked_col_max(t: &Tensor, mask: &[bool]) -> Option<(Vec<f64>, Vec<usize>)> {
    let c = t.cols();
    let first = mask.iter().position(|&m| m)?;
    let mut vals = t.row_slice(first).to_vec();
    let mut arg = vec![first; c];
    for i in (first + 1..mask.len()).filter(|&i| mask[i]) {
        for (j, &v) in t.row_slice(i).iter().enumerate() {
            if v > vals[j] {
                vals[j] = v;
                arg[j] = i;
            }
        }
    }
    Some((vals, arg))
}
