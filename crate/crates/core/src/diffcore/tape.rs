//! Define-by-run reverse-mode tape.
//!
//! Every operation appends a node whose inputs are strictly earlier nodes, so
//! insertion order is a topological order and the backward sweep is a single
//! reverse pass. Forward values are checked for NaN/Inf as they are produced.

use std::cell::RefCell;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels::{gemm_nn, gemm_nt, gemm_tn, sigmoid, transpose_last2};
use super::linalg::{LuFactors, MAX_SOLVE_DIM};
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    index: usize,
    tape: u64,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

/// Vector-Jacobian product for a user-supplied operation: receives the
/// upstream gradient and the input values, returns one gradient per input.
pub type CustomVjp = Box<dyn Fn(&Tensor, &[&Tensor]) -> Vec<Tensor>>;

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { input: usize, axis: usize, start: usize },
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Log(usize),
    Square(usize),
    Clamp { input: usize, lo: f64, hi: f64 },
    Softmax(usize),
    Sum(usize),
    Mean(usize),
    Trace(usize),
    Solve { a: usize, b: usize, lu: LuFactors },
    Custom { inputs: Vec<usize>, name: String, vjp: CustomVjp },
}

impl Op {
    fn name(&self) -> &str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Square(..) => "square",
            Op::Clamp { .. } => "clamp",
            Op::Softmax(..) => "softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Trace(..) => "trace",
            Op::Solve { .. } => "solve_small",
            Op::Custom { name, .. } => name,
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    needs_grad: bool,
}

/// Recorded computation. Single-threaded by construction (`!Sync`).
pub struct Tape {
    id: u64,
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Option<Vec<Option<Tensor>>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// How a binary elementwise op lines up its operands.
#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    /// Right operand repeats over the left operand's leading axes.
    RightRepeats,
    /// Left operand repeats over the right operand's leading axes.
    LeftRepeats,
}

fn broadcast_kind(op: &'static str, a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        Ok(Broadcast::Same)
    } else if a.len() > b.len() && a.ends_with(b) {
        Ok(Broadcast::RightRepeats)
    } else if b.len() > a.len() && b.ends_with(a) {
        Ok(Broadcast::LeftRepeats)
    } else {
        Err(Error::shape(op, format!("cannot broadcast {a:?} with {b:?}")))
    }
}

fn binary_forward(a: &Tensor, b: &Tensor, kind: Broadcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (shape, data) = match kind {
        Broadcast::Same => (
            a.shape(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        ),
        Broadcast::RightRepeats => {
            let bl = b.numel().max(1);
            (
                a.shape(),
                a.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, b.data()[i % bl]))
                    .collect(),
            )
        }
        Broadcast::LeftRepeats => {
            let al = a.numel().max(1);
            (
                b.shape(),
                b.data()
                    .iter()
                    .enumerate()
                    .map(|(i, &y)| f(a.data()[i % al], y))
                    .collect(),
            )
        }
    };
    Tensor::new(shape, data).expect("broadcast shape")
}

/// Sums a full-size gradient down onto a broadcast operand of length `small`.
fn reduce_to(full: &[f64], small: usize, shape: &[usize]) -> Tensor {
    let mut out = vec![0.0; small];
    for chunk in full.chunks(small) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Tensor::new(shape, out).expect("reduce shape")
}

/// Decomposed view of a matmul operand: `[batch.., rows, cols]`.
struct MatDims {
    batch: Vec<usize>,
    rows: usize,
    cols: usize,
}

fn mat_dims(op: &'static str, shape: &[usize]) -> Result<MatDims> {
    if shape.len() < 2 {
        return Err(Error::shape(op, format!("operand {shape:?} must have rank >= 2")));
    }
    let n = shape.len();
    Ok(MatDims {
        batch: shape[..n - 2].to_vec(),
        rows: shape[n - 2],
        cols: shape[n - 1],
    })
}

#[derive(Clone, Copy)]
enum MatBatch {
    /// Both operands share identical batch axes.
    Paired(usize),
    /// Right operand is a plain matrix applied to every batch row block.
    RightShared,
    /// Left operand is a plain matrix applied to every right batch item.
    LeftShared(usize),
}

fn matmul_plan(a: &[usize], b: &[usize]) -> Result<(MatBatch, Vec<usize>, usize, usize, usize)> {
    let da = mat_dims("matmul", a)?;
    let db = mat_dims("matmul", b)?;
    if da.cols != db.rows {
        return Err(Error::shape("matmul", format!("inner dims differ: {a:?} x {b:?}")));
    }
    let (m, k, n) = (da.rows, da.cols, db.cols);
    let (plan, batch) = if da.batch == db.batch {
        (MatBatch::Paired(da.batch.iter().product()), da.batch)
    } else if db.batch.is_empty() {
        (MatBatch::RightShared, da.batch)
    } else if da.batch.is_empty() {
        (MatBatch::LeftShared(db.batch.iter().product()), db.batch)
    } else {
        return Err(Error::shape("matmul", format!("batch axes differ: {a:?} x {b:?}")));
    };
    let mut out = batch;
    out.push(m);
    out.push(n);
    Ok((plan, out, m, k, n))
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(None),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Trainable leaf: receives a gradient on [`Tape::backward`].
    pub fn param(&self, value: Tensor) -> Result<Var> {
        self.leaf(value, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf".into() });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            needs_grad: requires_grad,
        });
        Ok(Var {
            index: nodes.len() - 1,
            tape: self.id,
        })
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.len() {
            return Err(Error::Tape("variable does not belong to this tape".into()));
        }
        Ok(v.index)
    }

    fn push(&self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name().to_string(),
            });
        }
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => {
                nodes[*a].needs_grad || nodes[*b].needs_grad
            }
            Op::Solve { a, b, .. } => nodes[*a].needs_grad || nodes[*b].needs_grad,
            Op::Concat { inputs, .. } | Op::Custom { inputs, .. } => {
                inputs.iter().any(|&i| nodes[i].needs_grad)
            }
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Softmax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Trace(a) => nodes[*a].needs_grad,
            Op::Clamp { input, .. } | Op::Slice { input, .. } => nodes[*input].needs_grad,
        };
        nodes.push(Node {
            value,
            op,
            requires_grad: false,
            needs_grad,
        });
        Ok(Var {
            index: nodes.len() - 1,
            tape: self.id,
        })
    }

    /// Copy of the forward value.
    pub fn value(&self, v: Var) -> Tensor {
        self.nodes.borrow()[v.index].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.index].value.shape().to_vec()
    }

    /// Scalar forward value.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.index].value.item()
    }

    fn unary(&self, x: Var, f: impl Fn(f64) -> f64, op: impl FnOnce(usize) -> Op) -> Result<Var> {
        let i = self.check(x)?;
        let out = self.nodes.borrow()[i].value.map(f);
        self.push(out, op(i))
    }

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[ia].value, &nodes[ib].value);
            let kind = broadcast_kind(name, ta.shape(), tb.shape())?;
            binary_forward(ta, tb, kind, f)
        };
        self.push(out, op(ia, ib))
    }

    /// Elementwise sum; the smaller operand may repeat over leading axes.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |v| v * c, |i| Op::Scale(i, c))
    }

    pub fn neg(&self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&self, x: Var, c: f64) -> Result<Var> {
        self.unary(x, |v| v + c, Op::AddScalar)
    }

    /// `1 - x`
    pub fn one_minus(&self, x: Var) -> Result<Var> {
        let n = self.neg(x)?;
        self.add_scalar(n, 1.0)
    }

    pub fn sigmoid(&self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid)
    }

    pub fn tanh(&self, x: Var) -> Result<Var> {
        self.unary(x, f64::tanh, Op::Tanh)
    }

    pub fn relu(&self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.max(0.0), Op::Relu)
    }

    pub fn exp(&self, x: Var) -> Result<Var> {
        self.unary(x, f64::exp, Op::Exp)
    }

    pub fn log(&self, x: Var) -> Result<Var> {
        self.unary(x, f64::ln, Op::Log)
    }

    pub fn square(&self, x: Var) -> Result<Var> {
        self.unary(x, |v| v * v, Op::Square)
    }

    /// Clamps into `[lo, hi]`; gradient is zero where clamping is active.
    pub fn clamp(&self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(x, |v| v.clamp(lo, hi), |input| Op::Clamp { input, lo, hi })
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[i].value;
            let width = *t.shape().last().ok_or_else(|| Error::shape("softmax", "scalar input"))?;
            let mut data = t.data().to_vec();
            for row in data.chunks_mut(width.max(1)) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                for v in row.iter_mut() {
                    *v /= total;
                }
            }
            Tensor::new(t.shape(), data)?
        };
        self.push(out, Op::Softmax(i))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let total = self.nodes.borrow()[i].value.data().iter().sum();
        self.push(Tensor::scalar(total), Op::Sum(i))
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[i].value;
            t.data().iter().sum::<f64>() / t.numel() as f64
        };
        self.push(Tensor::scalar(out), Op::Mean(i))
    }

    /// `Σ (a - b)²` as a scalar.
    pub fn squared_error(&self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.square(d)?;
        self.sum(sq)
    }

    pub fn trace(&self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[i].value;
            let s = t.shape();
            if s.len() != 2 || s[0] != s[1] {
                return Err(Error::shape("trace", format!("expected square matrix, got {s:?}")));
            }
            (0..s[0]).map(|k| t.data()[k * s[0] + k]).sum()
        };
        self.push(Tensor::scalar(out), Op::Trace(i))
    }

    /// Matrix product over the last two axes. Batch axes must match, or one
    /// side must be a plain matrix shared across the other's batch.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let out = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[ia].value, &nodes[ib].value);
            let (plan, shape, m, k, n) = matmul_plan(ta.shape(), tb.shape())?;
            let mut c = vec![0.0; shape.iter().product()];
            match plan {
                MatBatch::Paired(batch) => {
                    for bi in 0..batch {
                        gemm_nn(
                            &ta.data()[bi * m * k..(bi + 1) * m * k],
                            &tb.data()[bi * k * n..(bi + 1) * k * n],
                            &mut c[bi * m * n..(bi + 1) * m * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
                MatBatch::RightShared => {
                    let rows = ta.numel() / k.max(1);
                    gemm_nn(ta.data(), tb.data(), &mut c, rows, k, n);
                }
                MatBatch::LeftShared(batch) => {
                    for bi in 0..batch {
                        gemm_nn(
                            ta.data(),
                            &tb.data()[bi * k * n..(bi + 1) * k * n],
                            &mut c[bi * m * n..(bi + 1) * m * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Tensor::new(&shape, c)?
        };
        self.push(out, Op::MatMul(ia, ib))
    }

    /// `A^n` by repeated multiplication (`n ≥ 1`).
    pub fn matrix_power(&self, a: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(Error::shape("matrix_power", "exponent must be >= 1"));
        }
        let mut acc = a;
        for _ in 1..n {
            acc = self.matmul(acc, a)?;
        }
        Ok(acc)
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[i].value;
            let d = mat_dims("transpose", t.shape())?;
            let batch: usize = d.batch.iter().product();
            let mut shape = d.batch.clone();
            shape.push(d.cols);
            shape.push(d.rows);
            Tensor::new(&shape, transpose_last2(t.data(), batch, d.rows, d.cols))?
        };
        self.push(out, Op::Transpose(i))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let i = self.check(x)?;
        let out = self.nodes.borrow()[i].value.reshape(shape)?;
        self.push(out, Op::Reshape(i))
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let idx: Vec<usize> = xs.iter().map(|&v| self.check(v)).collect::<Result<_>>()?;
        let out = {
            let nodes = self.nodes.borrow();
            let first = nodes[idx[0]].value.shape().to_vec();
            if axis >= first.len() {
                return Err(Error::shape("concat", format!("axis {axis} out of range for {first:?}")));
            }
            let mut total = 0;
            for &j in &idx {
                let s = nodes[j].value.shape();
                let compatible = s.len() == first.len()
                    && s.iter().zip(&first).enumerate().all(|(ax, (p, q))| ax == axis || p == q);
                if !compatible {
                    return Err(Error::shape("concat", format!("{first:?} vs {s:?} on axis {axis}")));
                }
                total += s[axis];
            }
            let mut shape = first.clone();
            shape[axis] = total;
            let (outer, _, inner) = axis_split(&shape, axis);
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for &j in &idx {
                    let t = &nodes[j].value;
                    let block = t.shape()[axis] * inner;
                    data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
                }
            }
            Tensor::new(&shape, data)?
        };
        self.push(out, Op::Concat { inputs: idx, axis })
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let i = self.check(x)?;
        let out = {
            let nodes = self.nodes.borrow();
            let t = &nodes[i].value;
            let s = t.shape();
            if axis >= s.len() || start + len > s[axis] {
                return Err(Error::shape(
                    "slice",
                    format!("range {start}..{} on axis {axis} of {s:?}", start + len),
                ));
            }
            let (outer, width, inner) = axis_split(s, axis);
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * width * inner + start * inner;
                data.extend_from_slice(&t.data()[base..base + len * inner]);
            }
            let mut shape = s.to_vec();
            shape[axis] = len;
            Tensor::new(&shape, data)?
        };
        self.push(out, Op::Slice { input: i, axis, start })
    }

    /// Selects index `k` along `axis` and drops that axis.
    pub fn select(&self, x: Var, axis: usize, k: usize) -> Result<Var> {
        let s = self.slice(x, axis, k, 1)?;
        let mut shape = self.shape(s);
        shape.remove(axis);
        self.reshape(s, &shape)
    }

    /// Stacks equally shaped inputs along a new `axis`.
    pub fn stack(&self, xs: &[Var], axis: usize) -> Result<Var> {
        let expanded: Vec<Var> = xs
            .iter()
            .map(|&v| {
                let mut shape = self.shape(v);
                if axis > shape.len() {
                    return Err(Error::shape("stack", format!("axis {axis} out of range")));
                }
                shape.insert(axis, 1);
                self.reshape(v, &shape)
            })
            .collect::<Result<_>>()?;
        self.concat(&expanded, axis)
    }

    /// Solves `A·X = B` for a `k×k` matrix `A` (`k ≤ 16`) and `B` of shape
    /// `[.., k, m]`, without forming `A⁻¹`. Differentiable in both inputs.
    pub fn solve_small(&self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (out, lu) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[ia].value, &nodes[ib].value);
            let sa = ta.shape();
            if sa.len() != 2 || sa[0] != sa[1] {
                return Err(Error::shape("solve_small", format!("A must be square, got {sa:?}")));
            }
            let k = sa[0];
            if k > MAX_SOLVE_DIM {
                return Err(Error::shape("solve_small", format!("k = {k} exceeds {MAX_SOLVE_DIM}")));
            }
            let db = mat_dims("solve_small", tb.shape())?;
            if db.rows != k {
                return Err(Error::shape(
                    "solve_small",
                    format!("A {sa:?} incompatible with B {:?}", tb.shape()),
                ));
            }
            let lu = LuFactors::factor(ta.data(), k)?;
            let x = lu.solve_batched(tb.data(), db.cols);
            (Tensor::new(tb.shape(), x)?, lu)
        };
        self.push(out, Op::Solve { a: ia, b: ib, lu })
    }

    /// Records a user-defined operation with a supplied VJP.
    pub fn custom(
        &self,
        name: &str,
        inputs: &[Var],
        value: Tensor,
        vjp: impl Fn(&Tensor, &[&Tensor]) -> Vec<Tensor> + 'static,
    ) -> Result<Var> {
        let idx: Vec<usize> = inputs.iter().map(|&v| self.check(v)).collect::<Result<_>>()?;
        self.push(
            value,
            Op::Custom {
                inputs: idx,
                name: name.to_string(),
                vjp: Box::new(vjp),
            },
        )
    }

    /// Reverse sweep from a scalar root. Fails if gradients from an earlier
    /// sweep are still present; call [`Tape::reset_grads`] first.
    pub fn backward(&self, root: Var) -> Result<()> {
        let r = self.check(root)?;
        if self.grads.borrow().is_some() {
            return Err(Error::Tape(
                "backward already ran on this tape; reset_grads() first".into(),
            ));
        }
        let nodes = self.nodes.borrow();
        if nodes[r].value.numel() != 1 {
            return Err(Error::Tape(format!(
                "backward root must be scalar, got shape {:?}",
                nodes[r].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[r] = Some(Tensor::full(nodes[r].value.shape(), 1.0));

        for idx in (0..=r).rev() {
            let node = &nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (input, contribution) in backprop(&nodes, node, &g)? {
                if !nodes[input].needs_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => {
                        for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contribution),
                }
            }
            // Keep only leaf gradients once the sweep has passed a node.
            if !node.requires_grad {
                grads[idx] = None;
            }
        }
        drop(nodes);
        *self.grads.borrow_mut() = Some(grads);
        Ok(())
    }

    /// Gradient of the last backward root w.r.t. a trainable leaf. Zero if the
    /// root does not depend on it; `None` before backward or for non-leaves.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let grads = self.grads.borrow();
        let grads = grads.as_ref()?;
        let nodes = self.nodes.borrow();
        let node = nodes.get(v.index)?;
        if v.tape != self.id || !node.requires_grad {
            return None;
        }
        Some(
            grads[v.index]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(node.value.shape())),
        )
    }

    pub fn reset_grads(&self) {
        *self.grads.borrow_mut() = None;
    }
}

/// Input gradients of one node given its upstream gradient.
fn backprop(nodes: &[Node], node: &Node, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
    let val = |i: usize| &nodes[i].value;
    let out = &node.value;
    let elementwise = |i: usize, f: &dyn Fn(usize) -> f64| -> Tensor {
        let data = g.data().iter().enumerate().map(|(k, gv)| gv * f(k)).collect();
        Tensor::new(val(i).shape(), data).expect("elementwise grad shape")
    };
    let res = match &node.op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            let (ta, tb) = (val(*a), val(*b));
            let ga = if ta.numel() == g.numel() {
                g.clone()
            } else {
                reduce_to(g.data(), ta.numel(), ta.shape())
            };
            let gb_full: Vec<f64> = g.data().iter().map(|v| sign * v).collect();
            let gb = if tb.numel() == g.numel() {
                Tensor::new(tb.shape(), gb_full)?
            } else {
                reduce_to(&gb_full, tb.numel(), tb.shape())
            };
            vec![(*a, ga), (*b, gb)]
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let n = g.numel();
            let (la, lb) = (ta.numel().max(1), tb.numel().max(1));
            let ga_full: Vec<f64> = (0..n).map(|k| g.data()[k] * tb.data()[k % lb]).collect();
            let gb_full: Vec<f64> = (0..n).map(|k| g.data()[k] * ta.data()[k % la]).collect();
            let fit = |full: Vec<f64>, t: &Tensor| -> Result<Tensor> {
                if t.numel() == n {
                    Tensor::new(t.shape(), full)
                } else {
                    Ok(reduce_to(&full, t.numel(), t.shape()))
                }
            };
            vec![(*a, fit(ga_full, ta)?), (*b, fit(gb_full, tb)?)]
        }
        Op::Scale(a, c) => vec![(*a, g.map(|v| v * c))],
        Op::AddScalar(a) => vec![(*a, g.clone())],
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (plan, _, m, k, n) = matmul_plan(ta.shape(), tb.shape())?;
            let mut ga = vec![0.0; ta.numel()];
            let mut gb = vec![0.0; tb.numel()];
            match plan {
                MatBatch::Paired(batch) => {
                    for bi in 0..batch {
                        let gs = &g.data()[bi * m * n..(bi + 1) * m * n];
                        gemm_nt(gs, &tb.data()[bi * k * n..(bi + 1) * k * n], &mut ga[bi * m * k..(bi + 1) * m * k], m, n, k);
                        gemm_tn(&ta.data()[bi * m * k..(bi + 1) * m * k], gs, &mut gb[bi * k * n..(bi + 1) * k * n], m, k, n);
                    }
                }
                MatBatch::RightShared => {
                    let rows = ta.numel() / k.max(1);
                    gemm_nt(g.data(), tb.data(), &mut ga, rows, n, k);
                    gemm_tn(ta.data(), g.data(), &mut gb, rows, k, n);
                }
                MatBatch::LeftShared(batch) => {
                    for bi in 0..batch {
                        let gs = &g.data()[bi * m * n..(bi + 1) * m * n];
                        gemm_nt(gs, &tb.data()[bi * k * n..(bi + 1) * k * n], &mut ga, m, n, k);
                        gemm_tn(ta.data(), gs, &mut gb[bi * k * n..(bi + 1) * k * n], m, k, n);
                    }
                }
            }
            vec![
                (*a, Tensor::new(ta.shape(), ga)?),
                (*b, Tensor::new(tb.shape(), gb)?),
            ]
        }
        Op::Transpose(a) => {
            let s = out.shape();
            let d = mat_dims("transpose", s)?;
            let batch = d.batch.iter().product();
            vec![(
                *a,
                Tensor::new(val(*a).shape(), transpose_last2(g.data(), batch, d.rows, d.cols))?,
            )]
        }
        Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape())?)],
        Op::Concat { inputs, axis } => {
            let (outer, width, inner) = axis_split(out.shape(), *axis);
            let mut offset = 0;
            let mut res = Vec::with_capacity(inputs.len());
            for &j in inputs {
                let t = val(j);
                let w = t.shape()[*axis];
                let mut data = Vec::with_capacity(t.numel());
                for o in 0..outer {
                    let base = o * width * inner + offset * inner;
                    data.extend_from_slice(&g.data()[base..base + w * inner]);
                }
                offset += w;
                res.push((j, Tensor::new(t.shape(), data)?));
            }
            res
        }
        Op::Slice { input, axis, start } => {
            let t = val(*input);
            let (outer, width, inner) = axis_split(t.shape(), *axis);
            let len = out.shape()[*axis];
            let mut data = vec![0.0; t.numel()];
            for o in 0..outer {
                let base = o * width * inner + start * inner;
                data[base..base + len * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![(*input, Tensor::new(t.shape(), data)?)]
        }
        Op::Sigmoid(a) => vec![(*a, elementwise(*a, &|k| {
            let s = out.data()[k];
            s * (1.0 - s)
        }))],
        Op::Tanh(a) => vec![(*a, elementwise(*a, &|k| {
            let t = out.data()[k];
            1.0 - t * t
        }))],
        Op::Relu(a) => vec![(*a, elementwise(*a, &|k| {
            if val(*a).data()[k] > 0.0 { 1.0 } else { 0.0 }
        }))],
        Op::Exp(a) => vec![(*a, elementwise(*a, &|k| out.data()[k]))],
        Op::Log(a) => vec![(*a, elementwise(*a, &|k| 1.0 / val(*a).data()[k]))],
        Op::Square(a) => vec![(*a, elementwise(*a, &|k| 2.0 * val(*a).data()[k]))],
        Op::Clamp { input, lo, hi } => vec![(*input, elementwise(*input, &|k| {
            let v = val(*input).data()[k];
            if v < *lo || v > *hi { 0.0 } else { 1.0 }
        }))],
        Op::Softmax(a) => {
            let width = *out.shape().last().unwrap_or(&1);
            let mut data = vec![0.0; out.numel()];
            for ((d, y), gv) in data
                .chunks_mut(width.max(1))
                .zip(out.data().chunks(width.max(1)))
                .zip(g.data().chunks(width.max(1)))
            {
                let dot: f64 = y.iter().zip(gv).map(|(a, b)| a * b).sum();
                for ((dv, yv), gg) in d.iter_mut().zip(y).zip(gv) {
                    *dv = yv * (gg - dot);
                }
            }
            vec![(*a, Tensor::new(out.shape(), data)?)]
        }
        Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
        Op::Mean(a) => {
            let t = val(*a);
            vec![(*a, Tensor::full(t.shape(), g.item() / t.numel() as f64))]
        }
        Op::Trace(a) => {
            let n = val(*a).shape()[0];
            let mut t = Tensor::zeros(&[n, n]);
            for k in 0..n {
                t.data_mut()[k * n + k] = g.item();
            }
            vec![(*a, t)]
        }
        Op::Solve { a, b, lu } => {
            // grad_B = A⁻ᵀ·grad_X ; grad_A = -Σ_batch grad_B·Xᵀ
            let tb = val(*b);
            let k = lu.dim();
            let m = *tb.shape().last().expect("solve rank");
            let gb = lu.solve_transpose_batched(g.data(), m);
            let mut ga = vec![0.0; k * k];
            let batch = gb.len() / (k * m).max(1);
            for bi in 0..batch {
                gemm_nt(
                    &gb[bi * k * m..(bi + 1) * k * m],
                    &out.data()[bi * k * m..(bi + 1) * k * m],
                    &mut ga,
                    k,
                    m,
                    k,
                );
            }
            ga.iter_mut().for_each(|v| *v = -*v);
            vec![
                (*a, Tensor::new(&[k, k], ga)?),
                (*b, Tensor::new(tb.shape(), gb)?),
            ]
        }
        Op::Custom { inputs, vjp, name } => {
            let vals: Vec<&Tensor> = inputs.iter().map(|&i| val(i)).collect();
            let gs = vjp(g, &vals);
            if gs.len() != inputs.len() {
                return Err(Error::Tape(format!(
                    "custom op {name} returned {} gradients for {} inputs",
                    gs.len(),
                    inputs.len()
                )));
            }
            for (gi, vi) in gs.iter().zip(&vals) {
                if gi.shape() != vi.shape() {
                    return Err(Error::shape("custom", format!("{name}: gradient shape mismatch")));
                }
            }
            inputs.iter().copied().zip(gs).collect()
        }
    };
    Ok(res)
}
