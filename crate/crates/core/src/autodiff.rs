//! A small tape-based reverse-mode differentiation engine over dense `f64`
//! tensors. It implements exactly the primitives the similarity model
//! needs; there is no broadcasting beyond row-wise bias addition, and every
//! other shape must match exactly.
//!
//! A [`Tape`] owns every tensor created through it. Operations record their
//! inputs so [`Tape::backward`] can sweep the record in reverse and
//! accumulate `d root / d tensor` for every tensor that requires gradients.
//! A tape is a single-owner unit: build a fresh one per batch or per
//! inference call and drop it afterwards. Independent tapes are safe to use
//! from different threads.

use std::cell::{Cell, RefCell};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    BadShape {
        op: &'static str,
        expected: &'static str,
        got: Vec<usize>,
    },
    #[error("{op}: {message}")]
    Invalid { op: &'static str, message: String },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("shape {shape:?} implies {expected} values, got {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("parameter `{0}` registered twice")]
    DuplicateParam(String),
    #[error("finite-difference step {0} outside [1e-7, 1e-3]")]
    BadEpsilon(f64),
}

/// A dense row-major value: shape `[n]` for vectors, `[r, c]` for matrices,
/// `[1]` for scalars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorData {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                expected,
                got: data.len(),
                shape,
            });
        }
        Ok(TensorData { shape, data })
    }

    pub fn scalar(x: f64) -> Self {
        TensorData {
            shape: vec![1],
            data: vec![x],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        TensorData {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        TensorData::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        TensorData {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape == [1]
    }

    /// Rows and columns when 2-D.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }
}

/// Handle to a tensor on its owning tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: TensorId,
        b: TensorId,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(TensorId, TensorId),
    AddRowBias {
        m: TensorId,
        bias: TensorId,
        rows: usize,
        cols: usize,
    },
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    ScalarMul {
        a: TensorId,
        s: TensorId,
    },
    ScaleConst {
        a: TensorId,
        k: f64,
    },
    Concat {
        parts: Vec<TensorId>,
    },
    SumRows {
        m: TensorId,
        rows: usize,
        cols: usize,
    },
    SumCols {
        m: TensorId,
        rows: usize,
        cols: usize,
    },
    SumAll(TensorId),
    Relu(TensorId),
    Sigmoid(TensorId),
    Exp(TensorId),
    Abs(TensorId),
    Pow {
        a: TensorId,
        p: f64,
    },
    PNorm {
        v: TensorId,
        p: f64,
    },
    Cosine {
        u: TensorId,
        v: TensorId,
    },
    RowCosine {
        m: TensorId,
        v: TensorId,
        rows: usize,
        cols: usize,
    },
    NeighborSum {
        h: TensorId,
        edges: Vec<(u32, u32)>,
    },
    Mse {
        pred: TensorId,
        target: TensorId,
    },
    Reshape(TensorId),
}

impl Op {
    fn inputs(&self) -> Vec<TensorId> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::AddRowBias { m, bias, .. } => vec![*m, *bias],
            Op::ScalarMul { a, s } => vec![*a, *s],
            Op::ScaleConst { a, .. } => vec![*a],
            Op::Concat { parts } => parts.clone(),
            Op::SumRows { m, .. } | Op::SumCols { m, .. } => vec![*m],
            Op::SumAll(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Exp(a)
            | Op::Abs(a)
            | Op::Reshape(a) => vec![*a],
            Op::Pow { a, .. } => vec![*a],
            Op::PNorm { v, .. } => vec![*v],
            Op::Cosine { u, v } => vec![*u, *v],
            Op::RowCosine { m, v, .. } => vec![*m, *v],
            Op::NeighborSum { h, .. } => vec![*h],
            Op::Mse { pred, target } => vec![*pred, *target],
        }
    }
}

struct Node {
    value: TensorData,
    op: Op,
    requires_grad: bool,
}

/// Denominator floor for cosine similarity. A zero vector therefore scores
/// similarity 0 against anything instead of producing NaN.
pub const COSINE_EPS: f64 = 1e-8;

/// The operation record. All tensor creation and math goes through `&Tape`
/// methods; interior mutability keeps call sites free of `&mut` plumbing.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Vec<f64>>>,
    /// Input values observed at non-differentiable sites (relu and abs
    /// inputs, p-norm magnitudes), in recording order. Only collected while
    /// tracking is on; finite-difference checks align these across repeated
    /// evaluations of the same function to detect probes that straddle a
    /// kink.
    kink_sites: RefCell<Vec<f64>>,
    track_kinks: Cell<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            kink_sites: RefCell::new(Vec::new()),
            track_kinks: Cell::new(false),
        }
    }

    /// Number of recorded tensors; use with [`Tape::truncate`] to roll back
    /// scratch computation.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Drops every tensor recorded after `mark` and invalidates gradients.
    pub fn truncate(&self, mark: usize) {
        self.nodes.borrow_mut().truncate(mark);
        self.grads.borrow_mut().clear();
    }

    /// Turns kink-site recording on or off. Off by default; training and
    /// inference never pay for it.
    pub fn set_kink_tracking(&self, on: bool) {
        self.track_kinks.set(on);
    }

    /// The recorded kink-site inputs, in recording order.
    pub fn kink_sites(&self) -> Vec<f64> {
        self.kink_sites.borrow().clone()
    }

    fn note_kink(&self, input: f64) {
        if self.track_kinks.get() {
            self.kink_sites.borrow_mut().push(input);
        }
    }

    fn push(&self, value: TensorData, op: Op, leaf_requires_grad: bool) -> TensorId {
        let requires_grad = if matches!(op, Op::Leaf) {
            leaf_requires_grad
        } else {
            let nodes = self.nodes.borrow();
            op.inputs().iter().any(|i| nodes[i.0].requires_grad)
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        TensorId(nodes.len() - 1)
    }

    /// Records a constant input tensor. No gradient flows into it.
    pub fn leaf(&self, value: TensorData) -> TensorId {
        self.push(value, Op::Leaf, false)
    }

    /// Records a trainable input tensor; backward will fill its gradient.
    pub fn param(&self, value: TensorData) -> TensorId {
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar(&self, x: f64) -> TensorId {
        self.leaf(TensorData::scalar(x))
    }

    pub fn shape(&self, id: TensorId) -> Vec<usize> {
        self.nodes.borrow()[id.0].value.shape.clone()
    }

    pub fn value(&self, id: TensorId) -> TensorData {
        self.nodes.borrow()[id.0].value.clone()
    }

    pub fn scalar_value(&self, id: TensorId) -> f64 {
        let nodes = self.nodes.borrow();
        debug_assert!(nodes[id.0].value.is_scalar());
        nodes[id.0].value.data[0]
    }

    /// Gradient of the last [`Tape::backward`] root with respect to `id`.
    /// None until backward has run.
    pub fn grad(&self, id: TensorId) -> Option<TensorData> {
        let grads = self.grads.borrow();
        if grads.is_empty() {
            return None;
        }
        let nodes = self.nodes.borrow();
        Some(TensorData {
            shape: nodes[id.0].value.shape.clone(),
            data: grads[id.0].clone(),
        })
    }

    fn with_values<R>(&self, f: impl FnOnce(&[Node]) -> R) -> R {
        f(&self.nodes.borrow())
    }

    // ---- primitives ----

    /// `a × b` for `[m,k] × [k,n]`; a 1-D left operand is treated as a row
    /// vector and yields a 1-D result.
    pub fn matmul(&self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (value, m, k, n, vector_left) = self.with_values(|nodes| {
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            let (bk, bn) = bv.dims2().ok_or_else(|| TensorError::BadShape {
                op: "matmul",
                expected: "matrix right operand",
                got: bv.shape.clone(),
            })?;
            let (m, k, vector_left) = match av.shape.as_slice() {
                [k] => (1usize, *k, true),
                [m, k] => (*m, *k, false),
                _ => {
                    return Err(TensorError::BadShape {
                        op: "matmul",
                        expected: "vector or matrix left operand",
                        got: av.shape.clone(),
                    })
                }
            };
            if k != bk {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: av.shape.clone(),
                    rhs: bv.shape.clone(),
                });
            }
            let mut out = vec![0.0; m * bn];
            for i in 0..m {
                let arow = &av.data[i * k..(i + 1) * k];
                let orow = &mut out[i * bn..(i + 1) * bn];
                for (kk, &aval) in arow.iter().enumerate() {
                    if aval == 0.0 {
                        continue;
                    }
                    let brow = &bv.data[kk * bn..(kk + 1) * bn];
                    for (o, &bval) in orow.iter_mut().zip(brow) {
                        *o += aval * bval;
                    }
                }
            }
            let shape = if vector_left { vec![bn] } else { vec![m, bn] };
            Ok((TensorData { shape, data: out }, m, k, bn, vector_left))
        })?;
        let _ = vector_left;
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, false))
    }

    pub fn add(&self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let value = self.with_values(|nodes| {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            same_shape("add", av, bv)?;
            Ok(TensorData {
                shape: av.shape.clone(),
                data: av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect(),
            })
        })?;
        Ok(self.push(value, Op::Add(a, b), false))
    }

    /// `[r,c] + [c]`: adds `bias` to every row.
    pub fn add_row_bias(&self, m: TensorId, bias: TensorId) -> Result<TensorId, TensorError> {
        let (value, rows, cols) = self.with_values(|nodes| {
            let (mv, bv) = (&nodes[m.0].value, &nodes[bias.0].value);
            let (rows, cols) = mv.dims2().ok_or_else(|| TensorError::BadShape {
                op: "add_row_bias",
                expected: "matrix left operand",
                got: mv.shape.clone(),
            })?;
            if bv.shape != [cols] {
                return Err(TensorError::ShapeMismatch {
                    op: "add_row_bias",
                    lhs: mv.shape.clone(),
                    rhs: bv.shape.clone(),
                });
            }
            let mut out = mv.data.clone();
            for r in 0..rows {
                for (o, &b) in out[r * cols..(r + 1) * cols].iter_mut().zip(&bv.data) {
                    *o += b;
                }
            }
            Ok((
                TensorData {
                    shape: mv.shape.clone(),
                    data: out,
                },
                rows,
                cols,
            ))
        })?;
        Ok(self.push(value, Op::AddRowBias { m, bias, rows, cols }, false))
    }

    pub fn sub(&self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let value = self.with_values(|nodes| {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            same_shape("sub", av, bv)?;
            Ok(TensorData {
                shape: av.shape.clone(),
                data: av.data.iter().zip(&bv.data).map(|(x, y)| x - y).collect(),
            })
        })?;
        Ok(self.push(value, Op::Sub(a, b), false))
    }

    pub fn mul(&self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let value = self.with_values(|nodes| {
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            same_shape("mul", av, bv)?;
            Ok(TensorData {
                shape: av.shape.clone(),
                data: av.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect(),
            })
        })?;
        Ok(self.push(value, Op::Mul(a, b), false))
    }

    /// Multiplies every element of `a` by the scalar tensor `s`.
    pub fn scalar_mul(&self, a: TensorId, s: TensorId) -> Result<TensorId, TensorError> {
        let value = self.with_values(|nodes| {
            let (av, sv) = (&nodes[a.0].value, &nodes[s.0].value);
            if !sv.is_scalar() {
                return Err(TensorError::BadShape {
                    op: "scalar_mul",
                    expected: "scalar right operand",
                    got: sv.shape.clone(),
                });
            }
            let k = sv.data[0];
            Ok(TensorData {
                shape: av.shape.clone(),
                data: av.data.iter().map(|x| x * k).collect(),
            })
        })?;
        Ok(self.push(value, Op::ScalarMul { a, s }, false))
    }

    /// Multiplies by a compile-time constant; no gradient is tracked for `k`.
    pub fn scale_const(&self, a: TensorId, k: f64) -> Result<TensorId, TensorError> {
        let value = self.with_values(|nodes| {
            let av = &nodes[a.0].value;
            Ok(TensorData {
                shape: av.shape.clone(),
                data: av.data.iter().map(|x| x * k).collect(),
            })
        })?;
        Ok(self.push(value, Op::ScaleConst { a, k }, false))
    }

    /// Concatenates 1-D tensors into one vector.
    pub fn concat(&self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Invalid {
                op: "concat",
                message: "needs at least one input".to_string(),
            });
        }
        let value = self.with_values(|nodes| {
            let mut data = Vec::new();
            for &p in parts {
                let pv = &nodes[p.0].value;
                if pv.shape.len() != 1 {
                    return Err(TensorError::BadShape {
                        op: "concat",
                        expected: "1-D inputs",
                        got: pv.shape.clone(),
                    });
                }
                data.extend_from_slice(&pv.data);
            }
            Ok(TensorData::vector(data))
        })?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
            },
            false,
        ))
    }

    /// Collapses a matrix over its rows: `[r,c] -> [c]`.
    pub fn sum_rows(&self, m: TensorId) -> Result<TensorId, TensorError> {
        let (value, rows, cols) = self.with_values(|nodes| {
            let mv = &nodes[m.0].value;
            let (rows, cols) = mv.dims2().ok_or_else(|| TensorError::BadShape {
                op: "sum_rows",
                expected: "matrix input",
                got: mv.shape.clone(),
            })?;
            let mut out = vec![0.0; cols];
            for r in 0..rows {
                for (o, &x) in out.iter_mut().zip(&mv.data[r * cols..(r + 1) * cols]) {
                    *o += x;
                }
            }
            Ok((TensorData::vector(out), rows, cols))
        })?;
        Ok(self.push(value, Op::SumRows { m, rows, cols }, false))
    }

    /// Collapses a matrix over its columns: `[r,c] -> [r]`.
    pub fn sum_cols(&self, m: TensorId) -> Result<TensorId, TensorError> {
        let (value, rows, cols) = self.with_values(|nodes| {
            let mv = &nodes[m.0].value;
            let (rows, cols) = mv.dims2().ok_or_else(|| TensorError::BadShape {
                op: "sum_cols",
                expected: "matrix input",
                got: mv.shape.clone(),
            })?;
            let out: Vec<f64> = (0..rows)
                .map(|r| mv.data[r * cols..(r + 1) * cols].iter().sum())
                .collect();
            Ok((TensorData::vector(out), rows, cols))
        })?;
        Ok(self.push(value, Op::SumCols { m, rows, cols }, false))
    }

    /// Sum of every element: any shape -> `[1]`.
    pub fn sum_all(&self, a: TensorId) -> Result<TensorId, TensorError> {
        let value = self.with_values(|nodes| {
            Ok(TensorData::scalar(nodes[a.0].value.data.iter().sum()))
        })?;
        Ok(self.push(value, Op::SumAll(a), false))
    }

    pub fn relu(&self, a: TensorId) -> Result<TensorId, TensorError> {
        let value = self.with_values(|nodes| {
            let av = &nodes[a.0].value;
            for &x in &av.data {
                self.note_kink(x);
            }
            Ok(TensorData {
                shape: av.shape.clone(),
                data: av.data.iter().map(|&x| x.max(0.0)).collect(),
            })
        })?;
        Ok(self.push(value, Op::Relu(a), false))
    }

    pub fn sigmoid(&self, a: TensorId) -> Result<TensorId, TensorError> {
        let value = self.with_values(|nodes| {
            let av = &nodes[a.0].value;
            Ok(TensorData {
                shape: av.shape.clone(),
                data: av.data.iter().map(|&x| 1.0 / (1.0 + (-x).exp())).collect(),
            })
        })?;
        Ok(self.push(value, Op::Sigmoid(a), false))
    }

    pub fn exp(&self, a: TensorId) -> Result<TensorId, TensorError> {
        let value = self.with_values(|nodes| {
            let av = &nodes[a.0].value;
            Ok(TensorData {
                shape: av.shape.clone(),
                data: av.data.iter().map(|&x| x.exp()).collect(),
            })
        })?;
        Ok(self.push(value, Op::Exp(a), false))
    }

    pub fn abs(&self, a: TensorId) -> Result<TensorId, TensorError> {
        let value = self.with_values(|nodes| {
            let av = &nodes[a.0].value;
            for &x in &av.data {
                self.note_kink(x);
            }
            Ok(TensorData {
                shape: av.shape.clone(),
                data: av.data.iter().map(|&x| x.abs()).collect(),
            })
        })?;
        Ok(self.push(value, Op::Abs(a), false))
    }

    /// Elementwise `x^p`. Negative bases are rejected for fractional `p`.
    pub fn pow(&self, a: TensorId, p: f64) -> Result<TensorId, TensorError> {
        let value = self.with_values(|nodes| {
            let av = &nodes[a.0].value;
            if p.fract() != 0.0 && av.data.iter().any(|&x| x < 0.0) {
                return Err(TensorError::Invalid {
                    op: "pow",
                    message: format!("negative base with fractional exponent {p}"),
                });
            }
            if p < 2.0 && p != 1.0 {
                for &x in &av.data {
                    self.note_kink(x);
                }
            }
            Ok(TensorData {
                shape: av.shape.clone(),
                data: av.data.iter().map(|&x| x.powf(p)).collect(),
            })
        })?;
        Ok(self.push(value, Op::Pow { a, p }, false))
    }

    /// Minkowski norm of a vector: `(Σ |v_k|^p)^(1/p)`, `[n] -> [1]`.
    /// Requires `p >= 1`.
    pub fn pnorm(&self, v: TensorId, p: f64) -> Result<TensorId, TensorError> {
        if p < 1.0 {
            return Err(TensorError::Invalid {
                op: "pnorm",
                message: format!("order {p} below 1"),
            });
        }
        let value = self.with_values(|nodes| {
            let vv = &nodes[v.0].value;
            if vv.shape.len() != 1 {
                return Err(TensorError::BadShape {
                    op: "pnorm",
                    expected: "1-D input",
                    got: vv.shape.clone(),
                });
            }
            let norm = vv
                .data
                .iter()
                .map(|&x| x.abs().powf(p))
                .sum::<f64>()
                .powf(1.0 / p);
            self.note_kink(norm);
            if p < 2.0 {
                for &x in &vv.data {
                    self.note_kink(x);
                }
            }
            Ok(TensorData::scalar(norm))
        })?;
        Ok(self.push(value, Op::PNorm { v, p }, false))
    }

    /// Cosine similarity of two vectors with the guarded denominator
    /// `max(‖u‖·‖v‖, COSINE_EPS)`.
    pub fn cosine(&self, u: TensorId, v: TensorId) -> Result<TensorId, TensorError> {
        let value = self.with_values(|nodes| {
            let (uv, vv) = (&nodes[u.0].value, &nodes[v.0].value);
            if uv.shape.len() != 1 || vv.shape.len() != 1 {
                return Err(TensorError::BadShape {
                    op: "cosine",
                    expected: "1-D inputs",
                    got: if uv.shape.len() != 1 {
                        uv.shape.clone()
                    } else {
                        vv.shape.clone()
                    },
                });
            }
            same_shape("cosine", uv, vv)?;
            Ok(TensorData::scalar(cosine_guarded(&uv.data, &vv.data)))
        })?;
        Ok(self.push(value, Op::Cosine { u, v }, false))
    }

    /// Cosine similarity of every matrix row against one vector:
    /// `[r,c], [c] -> [r]`.
    pub fn row_cosine(&self, m: TensorId, v: TensorId) -> Result<TensorId, TensorError> {
        let (value, rows, cols) = self.with_values(|nodes| {
            let (mv, vv) = (&nodes[m.0].value, &nodes[v.0].value);
            let (rows, cols) = mv.dims2().ok_or_else(|| TensorError::BadShape {
                op: "row_cosine",
                expected: "matrix left operand",
                got: mv.shape.clone(),
            })?;
            if vv.shape != [cols] {
                return Err(TensorError::ShapeMismatch {
                    op: "row_cosine",
                    lhs: mv.shape.clone(),
                    rhs: vv.shape.clone(),
                });
            }
            let out: Vec<f64> = (0..rows)
                .map(|r| cosine_guarded(&mv.data[r * cols..(r + 1) * cols], &vv.data))
                .collect();
            Ok((TensorData::vector(out), rows, cols))
        })?;
        Ok(self.push(value, Op::RowCosine { m, v, rows, cols }, false))
    }

    /// Sums each node's neighbor rows under an undirected edge list:
    /// `out[k] = Σ_{j adjacent to k} h[j]`.
    pub fn neighbor_sum(
        &self,
        h: TensorId,
        edges: &[(u32, u32)],
    ) -> Result<TensorId, TensorError> {
        let value = self.with_values(|nodes| {
            let hv = &nodes[h.0].value;
            let (rows, cols) = hv.dims2().ok_or_else(|| TensorError::BadShape {
                op: "neighbor_sum",
                expected: "matrix input",
                got: hv.shape.clone(),
            })?;
            for &(u, v) in edges {
                if u as usize >= rows || v as usize >= rows {
                    return Err(TensorError::Invalid {
                        op: "neighbor_sum",
                        message: format!("edge ({u}, {v}) out of range for {rows} rows"),
                    });
                }
            }
            let mut out = vec![0.0; rows * cols];
            for &(u, v) in edges {
                let (u, v) = (u as usize, v as usize);
                for c in 0..cols {
                    out[u * cols + c] += hv.data[v * cols + c];
                    out[v * cols + c] += hv.data[u * cols + c];
                }
            }
            Ok(TensorData {
                shape: vec![rows, cols],
                data: out,
            })
        })?;
        Ok(self.push(
            value,
            Op::NeighborSum {
                h,
                edges: edges.to_vec(),
            },
            false,
        ))
    }

    /// Mean squared error between two same-shape tensors, `-> [1]`.
    pub fn mse(&self, pred: TensorId, target: TensorId) -> Result<TensorId, TensorError> {
        let value = self.with_values(|nodes| {
            let (pv, tv) = (&nodes[pred.0].value, &nodes[target.0].value);
            same_shape("mse", pv, tv)?;
            let n = pv.numel() as f64;
            let sum: f64 = pv
                .data
                .iter()
                .zip(&tv.data)
                .map(|(p, t)| (p - t) * (p - t))
                .sum();
            Ok(TensorData::scalar(sum / n))
        })?;
        Ok(self.push(value, Op::Mse { pred, target }, false))
    }

    /// Reinterprets the data under a new shape with equal element count.
    pub fn reshape(&self, a: TensorId, shape: Vec<usize>) -> Result<TensorId, TensorError> {
        let value = self.with_values(|nodes| {
            let av = &nodes[a.0].value;
            let expected: usize = shape.iter().product();
            if expected != av.numel() {
                return Err(TensorError::DataLength {
                    expected,
                    got: av.numel(),
                    shape: shape.clone(),
                });
            }
            Ok(TensorData {
                shape: shape.clone(),
                data: av.data.clone(),
            })
        })?;
        Ok(self.push(value, Op::Reshape(a), false))
    }

    /// Reverse sweep from a scalar root. Fills the gradient of every tensor
    /// on the tape that requires gradients; contributions from multiple
    /// uses accumulate. May be called again after further recording.
    pub fn backward(&self, root: TensorId) -> Result<(), TensorError> {
        let nodes = self.nodes.borrow();
        if !nodes[root.0].value.is_scalar() {
            return Err(TensorError::NonScalarRoot(nodes[root.0].value.shape.clone()));
        }
        let mut grads: Vec<Vec<f64>> = nodes
            .iter()
            .map(|n| {
                if n.requires_grad {
                    vec![0.0; n.value.numel()]
                } else {
                    Vec::new()
                }
            })
            .collect();
        if !nodes[root.0].requires_grad {
            // Constant root: every gradient is zero, already materialized.
            drop(nodes);
            *self.grads.borrow_mut() = grads;
            return Ok(());
        }
        grads[root.0][0] = 1.0;

        // Safe accumulation helper: gradient slots of non-requiring inputs
        // stay empty and are skipped.
        macro_rules! acc {
            ($grads:ident, $id:expr, $idx:expr, $val:expr) => {
                if !$grads[$id.0].is_empty() {
                    $grads[$id.0][$idx] += $val;
                }
            };
        }

        for i in (0..nodes.len()).rev() {
            if !nodes[i].requires_grad || grads[i].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut grads[i]);
            match &nodes[i].op {
                Op::Leaf => {}
                Op::MatMul { a, b, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    let av = &nodes[a.0].value.data;
                    let bv = &nodes[b.0].value.data;
                    if !grads[a.0].is_empty() {
                        for i_ in 0..m {
                            for kk in 0..k {
                                let mut s = 0.0;
                                let grow = &g[i_ * n..(i_ + 1) * n];
                                let brow = &bv[kk * n..(kk + 1) * n];
                                for (gv, bvv) in grow.iter().zip(brow) {
                                    s += gv * bvv;
                                }
                                grads[a.0][i_ * k + kk] += s;
                            }
                        }
                    }
                    if !grads[b.0].is_empty() {
                        for i_ in 0..m {
                            for kk in 0..k {
                                let aval = av[i_ * k + kk];
                                if aval == 0.0 {
                                    continue;
                                }
                                let grow = &g[i_ * n..(i_ + 1) * n];
                                let brow = &mut grads[b.0][kk * n..(kk + 1) * n];
                                for (bg, gv) in brow.iter_mut().zip(grow) {
                                    *bg += aval * gv;
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for (idx, &gv) in g.iter().enumerate() {
                        acc!(grads, a, idx, gv);
                        acc!(grads, b, idx, gv);
                    }
                }
                Op::AddRowBias { m, bias, rows, cols } => {
                    if !grads[m.0].is_empty() {
                        for (mg, &gv) in grads[m.0].iter_mut().zip(&g) {
                            *mg += gv;
                        }
                    }
                    if !grads[bias.0].is_empty() {
                        for r in 0..*rows {
                            for c in 0..*cols {
                                grads[bias.0][c] += g[r * cols + c];
                            }
                        }
                    }
                }
                Op::Sub(a, b) => {
                    for (idx, &gv) in g.iter().enumerate() {
                        acc!(grads, a, idx, gv);
                        acc!(grads, b, idx, -gv);
                    }
                }
                Op::Mul(a, b) => {
                    let av = nodes[a.0].value.data.clone();
                    let bv = nodes[b.0].value.data.clone();
                    for (idx, &gv) in g.iter().enumerate() {
                        acc!(grads, a, idx, gv * bv[idx]);
                        acc!(grads, b, idx, gv * av[idx]);
                    }
                }
                Op::ScalarMul { a, s } => {
                    let sval = nodes[s.0].value.data[0];
                    let av = &nodes[a.0].value.data;
                    if !grads[a.0].is_empty() {
                        for (idx, &gv) in g.iter().enumerate() {
                            grads[a.0][idx] += gv * sval;
                        }
                    }
                    if !grads[s.0].is_empty() {
                        let mut s_acc = 0.0;
                        for (idx, &gv) in g.iter().enumerate() {
                            s_acc += gv * av[idx];
                        }
                        grads[s.0][0] += s_acc;
                    }
                }
                Op::ScaleConst { a, k } => {
                    for (idx, &gv) in g.iter().enumerate() {
                        acc!(grads, a, idx, gv * k);
                    }
                }
                Op::Concat { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = nodes[p.0].value.numel();
                        if !grads[p.0].is_empty() {
                            for idx in 0..len {
                                grads[p.0][idx] += g[offset + idx];
                            }
                        }
                        offset += len;
                    }
                }
                Op::SumRows { m, rows, cols } => {
                    if !grads[m.0].is_empty() {
                        for r in 0..*rows {
                            for c in 0..*cols {
                                grads[m.0][r * cols + c] += g[c];
                            }
                        }
                    }
                }
                Op::SumCols { m, rows, cols } => {
                    if !grads[m.0].is_empty() {
                        for r in 0..*rows {
                            for c in 0..*cols {
                                grads[m.0][r * cols + c] += g[r];
                            }
                        }
                    }
                }
                Op::SumAll(a) => {
                    if !grads[a.0].is_empty() {
                        let gv = g[0];
                        for ag in grads[a.0].iter_mut() {
                            *ag += gv;
                        }
                    }
                }
                Op::Relu(a) => {
                    let av = &nodes[a.0].value.data;
                    if !grads[a.0].is_empty() {
                        for (idx, &gv) in g.iter().enumerate() {
                            if av[idx] > 0.0 {
                                grads[a.0][idx] += gv;
                            }
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let yv = &nodes[i].value.data;
                    if !grads[a.0].is_empty() {
                        for (idx, &gv) in g.iter().enumerate() {
                            let y = yv[idx];
                            grads[a.0][idx] += gv * y * (1.0 - y);
                        }
                    }
                }
                Op::Exp(a) => {
                    let yv = &nodes[i].value.data;
                    if !grads[a.0].is_empty() {
                        for (idx, &gv) in g.iter().enumerate() {
                            grads[a.0][idx] += gv * yv[idx];
                        }
                    }
                }
                Op::Abs(a) => {
                    let av = &nodes[a.0].value.data;
                    if !grads[a.0].is_empty() {
                        for (idx, &gv) in g.iter().enumerate() {
                            let x = av[idx];
                            if x > 0.0 {
                                grads[a.0][idx] += gv;
                            } else if x < 0.0 {
                                grads[a.0][idx] -= gv;
                            }
                        }
                    }
                }
                Op::Pow { a, p } => {
                    let av = &nodes[a.0].value.data;
                    if !grads[a.0].is_empty() {
                        for (idx, &gv) in g.iter().enumerate() {
                            let x = av[idx];
                            let d = if x == 0.0 && *p > 1.0 {
                                0.0
                            } else {
                                p * x.powf(p - 1.0)
                            };
                            grads[a.0][idx] += gv * d;
                        }
                    }
                }
                Op::PNorm { v, p } => {
                    let vv = &nodes[v.0].value.data;
                    let y = nodes[i].value.data[0];
                    if !grads[v.0].is_empty() && y > 0.0 {
                        let gv = g[0];
                        for (idx, &x) in vv.iter().enumerate() {
                            let d = x.signum() * x.abs().powf(p - 1.0) * y.powf(1.0 - p);
                            grads[v.0][idx] += gv * d;
                        }
                    }
                }
                Op::Cosine { u, v } => {
                    let uv = &nodes[u.0].value.data;
                    let vv = &nodes[v.0].value.data;
                    let gv = g[0];
                    let (du, dv) = cosine_grads(uv, vv);
                    if !grads[u.0].is_empty() {
                        for (idx, d) in du.iter().enumerate() {
                            grads[u.0][idx] += gv * d;
                        }
                    }
                    if !grads[v.0].is_empty() {
                        for (idx, d) in dv.iter().enumerate() {
                            grads[v.0][idx] += gv * d;
                        }
                    }
                }
                Op::RowCosine { m, v, rows, cols } => {
                    let mv = nodes[m.0].value.data.clone();
                    let vv = nodes[v.0].value.data.clone();
                    for r in 0..*rows {
                        let gv = g[r];
                        if gv == 0.0 {
                            continue;
                        }
                        let row = &mv[r * cols..(r + 1) * cols];
                        let (du, dv) = cosine_grads(row, &vv);
                        if !grads[m.0].is_empty() {
                            for (idx, d) in du.iter().enumerate() {
                                grads[m.0][r * cols + idx] += gv * d;
                            }
                        }
                        if !grads[v.0].is_empty() {
                            for (idx, d) in dv.iter().enumerate() {
                                grads[v.0][idx] += gv * d;
                            }
                        }
                    }
                }
                Op::NeighborSum { h, edges } => {
                    if !grads[h.0].is_empty() {
                        let cols = nodes[h.0].value.shape[1];
                        for &(u, v) in edges {
                            let (u, v) = (u as usize, v as usize);
                            for c in 0..cols {
                                grads[h.0][v * cols + c] += g[u * cols + c];
                                grads[h.0][u * cols + c] += g[v * cols + c];
                            }
                        }
                    }
                }
                Op::Mse { pred, target } => {
                    let pv = nodes[pred.0].value.data.clone();
                    let tv = nodes[target.0].value.data.clone();
                    let n = pv.len() as f64;
                    let gv = g[0];
                    for idx in 0..pv.len() {
                        let d = 2.0 * (pv[idx] - tv[idx]) / n;
                        acc!(grads, pred, idx, gv * d);
                        acc!(grads, target, idx, -gv * d);
                    }
                }
                Op::Reshape(a) => {
                    if !grads[a.0].is_empty() {
                        for (idx, &gv) in g.iter().enumerate() {
                            grads[a.0][idx] += gv;
                        }
                    }
                }
            }
            grads[i] = g;
        }
        drop(nodes);
        *self.grads.borrow_mut() = grads;
        Ok(())
    }
}

fn same_shape(op: &'static str, a: &TensorData, b: &TensorData) -> Result<(), TensorError> {
    if a.shape != b.shape {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(())
}

/// Shared forward rule for all cosine paths: `<u,v> / max(‖u‖‖v‖, ε)`.
pub fn cosine_guarded(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    dot / (nu * nv).max(COSINE_EPS)
}

/// Exact gradients of [`cosine_guarded`] with respect to both vectors,
/// including the guarded regime where the denominator is the constant ε.
fn cosine_grads(u: &[f64], v: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let denom = nu * nv;
    if denom < COSINE_EPS {
        let du: Vec<f64> = v.iter().map(|&x| x / COSINE_EPS).collect();
        let dv: Vec<f64> = u.iter().map(|&x| x / COSINE_EPS).collect();
        return (du, dv);
    }
    let du: Vec<f64> = u
        .iter()
        .zip(v)
        .map(|(&ux, &vx)| vx / denom - dot * ux / (nu * nu * denom))
        .collect();
    let dv: Vec<f64> = u
        .iter()
        .zip(v)
        .map(|(&ux, &vx)| ux / denom - dot * vx / (nv * nv * denom))
        .collect();
    (du, dv)
}

/// Ordered collection of named parameter tensors. Registration order is the
/// binding and optimization order, so downstream behavior is deterministic.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    entries: Vec<(String, TensorData)>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    /// Registers a tensor and returns its index. Names must be unique.
    pub fn insert(&mut self, name: &str, value: TensorData) -> Result<usize, TensorError> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(TensorError::DuplicateParam(name.to_string()));
        }
        self.entries.push((name.to_string(), value));
        Ok(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn value(&self, i: usize) -> &TensorData {
        &self.entries[i].1
    }

    pub fn value_mut(&mut self, i: usize) -> &mut TensorData {
        &mut self.entries[i].1
    }

    pub fn get(&self, name: &str) -> Option<&TensorData> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|(n, _)| n == name)
    }

    /// Replaces a named tensor's value, keeping its shape.
    pub fn set(&mut self, name: &str, value: TensorData) -> Result<(), TensorError> {
        let idx = self
            .index_of(name)
            .ok_or_else(|| TensorError::Invalid {
                op: "param_store",
                message: format!("no parameter named `{name}`"),
            })?;
        if self.entries[idx].1.shape != value.shape {
            return Err(TensorError::ShapeMismatch {
                op: "param_store",
                lhs: self.entries[idx].1.shape.clone(),
                rhs: value.shape,
            });
        }
        self.entries[idx].1 = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &TensorData)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    /// Copies every parameter onto a tape as gradient-requiring leaves, in
    /// registration order.
    pub fn bind(&self, tape: &Tape) -> Vec<TensorId> {
        self.entries
            .iter()
            .map(|(_, v)| tape.param(v.clone()))
            .collect()
    }

    /// Total number of scalar coordinates across all tensors.
    pub fn coordinate_count(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.numel()).sum()
    }
}

/// Per-tensor outcome of a finite-difference gradient audit.
#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub skipped: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
    pub skipped: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

/// Which side of a kink an input sits on.
fn kink_side(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// True when the three evaluations of one coordinate (base, +eps, -eps) saw
/// any kink-site input change side. The site lists align positionally
/// because a deterministic `f` records the identical op sequence each run.
fn straddles_kink(base: &[f64], plus: &[f64], minus: &[f64]) -> bool {
    if base.len() != plus.len() || base.len() != minus.len() {
        return true;
    }
    base.iter()
        .zip(plus)
        .zip(minus)
        .any(|((&b, &p), &m)| {
            let (sb, sp, sm) = (kink_side(b), kink_side(p), kink_side(m));
            sb != sp || sb != sm
        })
}

/// Audits analytic gradients of `f` against central finite differences.
///
/// `f` receives a fresh tape plus the bound parameter ids (in store order)
/// and must return a scalar root. Every coordinate is perturbed by ±eps;
/// the relative error is `|analytic − numeric| / max(|analytic|, |numeric|,
/// 1e-8)`, reduced to a maximum per tensor. Coordinates whose probes land
/// on different sides of a recorded kink (relu, abs, p-norm sites within
/// eps-reach of the perturbation) are skipped rather than reported, since a
/// two-sided difference across a subgradient boundary is meaningless.
#[allow(clippy::needless_range_loop)]
pub fn grad_check<F>(
    params: &ParamStore,
    f: F,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&Tape, &[TensorId]) -> Result<TensorId, TensorError>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(TensorError::BadEpsilon(eps));
    }
    let mut work = params.clone();

    let eval = |store: &ParamStore| -> Result<(f64, Vec<f64>), TensorError> {
        let tape = Tape::new();
        tape.set_kink_tracking(true);
        let ids = store.bind(&tape);
        let root = f(&tape, &ids)?;
        let value = tape.scalar_value(root);
        Ok((value, tape.kink_sites()))
    };

    // Analytic pass.
    let tape = Tape::new();
    tape.set_kink_tracking(true);
    let ids = work.bind(&tape);
    let root = f(&tape, &ids)?;
    tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).expect("backward ran").data)
        .collect();
    let base_sites = tape.kink_sites();
    for (t, grads) in analytic.iter().enumerate() {
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(TensorError::NonFinite(format!(
                "analytic gradient of `{}`",
                work.name(t)
            )));
        }
    }
    drop(tape);

    let mut tensors = Vec::with_capacity(work.len());
    let mut max_rel_err: f64 = 0.0;
    let mut total_skipped = 0;
    for t in 0..work.len() {
        let name = work.name(t).to_string();
        let numel = work.value(t).numel();
        let mut tensor_max: f64 = 0.0;
        let mut checked = 0;
        let mut skipped = 0;
        for c in 0..numel {
            let original = work.value(t).data[c];
            work.value_mut(t).data[c] = original + eps;
            let (plus, sites_plus) = eval(&work)?;
            work.value_mut(t).data[c] = original - eps;
            let (minus, sites_minus) = eval(&work)?;
            work.value_mut(t).data[c] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(TensorError::NonFinite(format!(
                    "perturbed evaluation of `{name}`"
                )));
            }
            if straddles_kink(&base_sites, &sites_plus, &sites_minus) {
                skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[t][c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            tensor_max = tensor_max.max(rel);
            checked += 1;
        }
        max_rel_err = max_rel_err.max(tensor_max);
        total_skipped += skipped;
        tensors.push(TensorCheck {
            name,
            max_rel_err: tensor_max,
            checked,
            skipped,
        });
    }
    Ok(GradCheckReport {
        tensors,
        max_rel_err,
        skipped: total_skipped,
        tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Uniform draw bounded away from zero so relu and abs kinks stay far
    /// from finite-difference probes.
    fn away_from_zero(rng: &mut ChaCha8Rng) -> f64 {
        let magnitude = rng.random_range(0.25..1.5);
        if rng.random_range(0.0..1.0) < 0.5 {
            -magnitude
        } else {
            magnitude
        }
    }

    fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> TensorData {
        let n = shape.iter().product();
        TensorData {
            shape,
            data: (0..n).map(|_| away_from_zero(rng)).collect(),
        }
    }

    /// Independent finite-difference audit used to validate backward rules;
    /// deliberately separate from `grad_check`.
    #[allow(clippy::needless_range_loop)]
    fn fd_oracle<F>(inputs: &[TensorData], build: F, tol: f64)
    where
        F: Fn(&Tape, &[TensorId]) -> TensorId,
    {
        let run = |values: &[TensorData]| -> (f64, Vec<Vec<f64>>, Tape, Vec<TensorId>) {
            let tape = Tape::new();
            let ids: Vec<TensorId> = values.iter().map(|v| tape.param(v.clone())).collect();
            let root = build(&tape, &ids);
            tape.backward(root).unwrap();
            let grads = ids
                .iter()
                .map(|&id| tape.grad(id).unwrap().data)
                .collect();
            (tape.scalar_value(root), grads, tape, ids)
        };
        let (_, analytic, _, _) = run(inputs);
        let eps = 1e-5;
        for (t, input) in inputs.iter().enumerate() {
            for c in 0..input.numel() {
                let mut plus = inputs.to_vec();
                plus[t].data[c] += eps;
                let mut minus = inputs.to_vec();
                minus[t].data[c] -= eps;
                let (vp, _, _, _) = run(&plus);
                let (vm, _, _, _) = run(&minus);
                let numeric = (vp - vm) / (2.0 * eps);
                let a = analytic[t][c];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                assert!(
                    rel < tol,
                    "tensor {t} coord {c}: analytic {a} vs numeric {numeric} (rel {rel})"
                );
            }
        }
    }

    #[test]
    fn matmul_shapes() {
        let tape = Tape::new();
        let a = tape.leaf(TensorData::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = tape.leaf(TensorData::matrix(3, 1, vec![1., 0., -1.]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), vec![2, 1]);
        assert_eq!(tape.value(c).data, vec![-2.0, -2.0]);
        let v = tape.leaf(TensorData::vector(vec![1., 1., 1.]));
        let mismatched = tape.matmul(v, a);
        assert!(matches!(
            mismatched,
            Err(TensorError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn vector_matmul_is_row_vector_product() {
        let tape = Tape::new();
        let v = tape.leaf(TensorData::vector(vec![1.0, 2.0]));
        let m = tape.leaf(TensorData::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let out = tape.matmul(v, m).unwrap();
        assert_eq!(tape.shape(out), vec![3]);
        assert_eq!(tape.value(out).data, vec![9.0, 12.0, 15.0]);
    }

    #[test]
    fn cosine_self_is_one_and_zero_vector_guards() {
        let tape = Tape::new();
        let v = tape.leaf(TensorData::vector(vec![0.3, -0.4, 1.2]));
        let z = tape.leaf(TensorData::vector(vec![0.0, 0.0, 0.0]));
        let c = tape.cosine(v, v).unwrap();
        assert!((tape.scalar_value(c) - 1.0).abs() < 1e-15);
        let g = tape.cosine(z, v).unwrap();
        assert_eq!(tape.scalar_value(g), 0.0);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let tape = Tape::new();
        let w = tape.param(TensorData::vector(vec![2.0, -1.0, 5.0]));
        let s = tape.sum_all(w).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap().data, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_mse_matches_closed_form() {
        let tape = Tape::new();
        let w = tape.param(TensorData::vector(vec![1.0, 2.0, 3.0]));
        let t = tape.leaf(TensorData::vector(vec![0.0, 0.0, 6.0]));
        let loss = tape.mse(w, t).unwrap();
        tape.backward(loss).unwrap();
        let g = tape.grad(w).unwrap().data;
        let expected = [2.0 / 3.0, 4.0 / 3.0, -2.0];
        for (a, e) in g.iter().zip(&expected) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn gradient_accumulates_across_uses() {
        let tape = Tape::new();
        let w = tape.param(TensorData::vector(vec![3.0]));
        let double = tape.add(w, w).unwrap();
        let s = tape.sum_all(double).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap().data, vec![2.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let tape = Tape::new();
        let w = tape.param(TensorData::vector(vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(w),
            Err(TensorError::NonScalarRoot(shape)) if shape == vec![2]
        ));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let tape = Tape::new();
        let a = tape.leaf(TensorData::vector(vec![1.0, 2.0]));
        let b = tape.leaf(TensorData::vector(vec![1.0, 2.0, 3.0]));
        let err = tape.add(a, b).unwrap_err();
        assert_eq!(
            err.to_string(),
            "add: incompatible shapes [2] and [3]"
        );
    }

    #[test]
    fn finite_differences_linear_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_tensor(vec![3, 4], &mut rng);
        let b = random_tensor(vec![4, 2], &mut rng);
        fd_oracle(&[a, b], |t, ids| {
            let c = t.matmul(ids[0], ids[1]).unwrap();
            t.sum_all(c).unwrap()
        }, 1e-6);

        let x = random_tensor(vec![5], &mut rng);
        let y = random_tensor(vec![5], &mut rng);
        fd_oracle(&[x, y], |t, ids| {
            let s = t.sub(ids[0], ids[1]).unwrap();
            let m = t.mul(s, ids[0]).unwrap();
            t.sum_all(m).unwrap()
        }, 1e-6);

        let m = random_tensor(vec![3, 2], &mut rng);
        let bias = random_tensor(vec![2], &mut rng);
        fd_oracle(&[m, bias], |t, ids| {
            let x = t.add_row_bias(ids[0], ids[1]).unwrap();
            let r = t.sum_rows(x).unwrap();
            t.sum_all(r).unwrap()
        }, 1e-6);

        let m2 = random_tensor(vec![2, 4], &mut rng);
        fd_oracle(&[m2], |t, ids| {
            let r = t.sum_cols(ids[0]).unwrap();
            t.sum_all(r).unwrap()
        }, 1e-6);
    }

    #[test]
    fn finite_differences_nonlinear_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for op in ["relu", "sigmoid", "exp", "abs"] {
            let x = random_tensor(vec![6], &mut rng);
            fd_oracle(&[x], |t, ids| {
                let y = match op {
                    "relu" => t.relu(ids[0]).unwrap(),
                    "sigmoid" => t.sigmoid(ids[0]).unwrap(),
                    "exp" => t.exp(ids[0]).unwrap(),
                    _ => t.abs(ids[0]).unwrap(),
                };
                t.sum_all(y).unwrap()
            }, 1e-5);
        }

        // Even powers accept signed input; fractional powers need positive.
        let x = random_tensor(vec![5], &mut rng);
        fd_oracle(&[x], |t, ids| {
            let y = t.pow(ids[0], 2.0).unwrap();
            t.sum_all(y).unwrap()
        }, 1e-6);
        let mut pos = random_tensor(vec![5], &mut rng);
        for v in pos.data.iter_mut() {
            *v = v.abs() + 0.5;
        }
        fd_oracle(&[pos], |t, ids| {
            let y = t.pow(ids[0], 2.5).unwrap();
            t.sum_all(y).unwrap()
        }, 1e-5);
    }

    #[test]
    fn finite_differences_norms_and_cosines() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in [1.0, 2.0, 3.0] {
            let v = random_tensor(vec![6], &mut rng);
            fd_oracle(&[v], |t, ids| t.pnorm(ids[0], p).unwrap(), 1e-5);
        }

        let u = random_tensor(vec![5], &mut rng);
        let v = random_tensor(vec![5], &mut rng);
        fd_oracle(&[u, v], |t, ids| t.cosine(ids[0], ids[1]).unwrap(), 1e-5);

        let m = random_tensor(vec![4, 3], &mut rng);
        let w = random_tensor(vec![3], &mut rng);
        fd_oracle(&[m, w], |t, ids| {
            let r = t.row_cosine(ids[0], ids[1]).unwrap();
            t.sum_all(r).unwrap()
        }, 1e-5);
    }

    #[test]
    fn finite_differences_structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = random_tensor(vec![4, 3], &mut rng);
        let edges = [(0u32, 1u32), (1, 2), (2, 3), (0, 3)];
        fd_oracle(&[h], |t, ids| {
            let s = t.neighbor_sum(ids[0], &edges).unwrap();
            let sq = t.mul(s, s).unwrap();
            t.sum_all(sq).unwrap()
        }, 1e-6);

        let a = random_tensor(vec![3], &mut rng);
        let b = random_tensor(vec![2], &mut rng);
        fd_oracle(&[a, b], |t, ids| {
            let c = t.concat(&[ids[0], ids[1]]).unwrap();
            let e = t.exp(c).unwrap();
            t.sum_all(e).unwrap()
        }, 1e-5);

        let x = random_tensor(vec![6], &mut rng);
        let s = random_tensor(vec![1], &mut rng);
        fd_oracle(&[x, s], |t, ids| {
            let y = t.scalar_mul(ids[0], ids[1]).unwrap();
            let r = t.reshape(y, vec![2, 3]).unwrap();
            let c = t.sum_rows(r).unwrap();
            t.sum_all(c).unwrap()
        }, 1e-6);
    }

    #[test]
    fn finite_differences_composite_of_all_primitives() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = random_tensor(vec![3, 4], &mut rng);
        let w = random_tensor(vec![4, 4], &mut rng);
        let bias = random_tensor(vec![4], &mut rng);
        let z = random_tensor(vec![4], &mut rng);
        let edges = [(0u32, 1u32), (1, 2)];
        fd_oracle(&[h, w, bias, z], |t, ids| {
            let agg = t.neighbor_sum(ids[0], &edges).unwrap();
            let mixed = t.add(agg, ids[0]).unwrap();
            let lin = t.matmul(mixed, ids[1]).unwrap();
            let act = t.relu(t.add_row_bias(lin, ids[2]).unwrap()).unwrap();
            let pooled = t.sum_rows(act).unwrap();
            let cos = t.row_cosine(act, ids[3]).unwrap();
            let gamma = t.sum_all(t.abs(cos).unwrap()).unwrap();
            let d = t.sub(pooled, ids[3]).unwrap();
            let nrm = t.pnorm(d, 2.0).unwrap();
            let sim = t.exp(t.scale_const(nrm, -1.0).unwrap()).unwrap();
            let sig = t.sigmoid(sim).unwrap();
            let both = t.concat(&[gamma, sig]).unwrap();
            t.sum_all(both).unwrap()
        }, 1e-4);
    }

    #[test]
    fn repeated_runs_are_bitwise_identical() {
        let run = || -> (u64, Vec<u64>) {
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            let tape = Tape::new();
            let h = tape.param(random_tensor(vec![4, 3], &mut rng));
            let w = tape.param(random_tensor(vec![3, 3], &mut rng));
            let lin = tape.matmul(h, w).unwrap();
            let act = tape.relu(lin).unwrap();
            let pooled = tape.sum_rows(act).unwrap();
            let n = tape.pnorm(pooled, 2.0).unwrap();
            tape.backward(n).unwrap();
            let root_bits = tape.scalar_value(n).to_bits();
            let grad_bits = tape
                .grad(w)
                .unwrap()
                .data
                .iter()
                .map(|x| x.to_bits())
                .collect();
            (root_bits, grad_bits)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn constants_receive_no_gradient_work() {
        let tape = Tape::new();
        let w = tape.param(TensorData::vector(vec![1.0, 2.0]));
        let c = tape.leaf(TensorData::vector(vec![5.0, 7.0]));
        let y = tape.mul(w, c).unwrap();
        let s = tape.sum_all(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap().data, vec![5.0, 7.0]);
        assert!(tape.grad(c).unwrap().data.is_empty());
    }

    #[test]
    fn truncate_rolls_back_scratch_work() {
        let tape = Tape::new();
        let w = tape.param(TensorData::vector(vec![1.0, 2.0]));
        let mark = tape.len();
        for _ in 0..10 {
            let y = tape.mul(w, w).unwrap();
            let _ = tape.sum_all(y).unwrap();
        }
        tape.truncate(mark);
        assert_eq!(tape.len(), mark);
        let y = tape.mul(w, w).unwrap();
        let s = tape.sum_all(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(w).unwrap().data, vec![2.0, 4.0]);
    }

    #[test]
    fn grad_check_linear_function_is_exact() {
        let mut store = ParamStore::new();
        store
            .insert("w", TensorData::vector(vec![0.4, -1.2, 2.0]))
            .unwrap();
        let report = grad_check(
            &store,
            |tape, ids| {
                let c = tape.leaf(TensorData::vector(vec![3.0, -1.0, 0.5]));
                let y = tape.mul(ids[0], c)?;
                tape.sum_all(y)
            },
            1e-5,
            1e-9,
        )
        .unwrap();
        assert!(report.passed(), "max rel err {}", report.max_rel_err);
        assert!(report.max_rel_err < 1e-9);
    }

    #[test]
    fn grad_check_skips_kink_coordinates() {
        let mut store = ParamStore::new();
        // One coordinate exactly at the relu kink.
        store
            .insert("w", TensorData::vector(vec![0.0, 1.0]))
            .unwrap();
        let report = grad_check(
            &store,
            |tape, ids| {
                let y = tape.relu(ids[0])?;
                tape.sum_all(y)
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert_eq!(report.tensors[0].skipped, 1);
        assert_eq!(report.tensors[0].checked, 1);
        assert!(report.passed());
    }

    #[test]
    fn grad_check_rejects_bad_epsilon() {
        let store = ParamStore::new();
        let err = grad_check(&store, |tape, _| Ok(tape.scalar(1.0)), 0.5, 1e-4).unwrap_err();
        assert!(matches!(err, TensorError::BadEpsilon(_)));
    }

    #[test]
    fn param_store_rejects_duplicates_and_preserves_order() {
        let mut store = ParamStore::new();
        store.insert("b", TensorData::scalar(1.0)).unwrap();
        store.insert("a", TensorData::scalar(2.0)).unwrap();
        assert!(matches!(
            store.insert("a", TensorData::scalar(3.0)),
            Err(TensorError::DuplicateParam(_))
        ));
        assert_eq!(store.name(0), "b");
        assert_eq!(store.name(1), "a");
        assert_eq!(store.get("a").unwrap().data, vec![2.0]);
    }
}
