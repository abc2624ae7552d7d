//! Define-by-run reverse-mode tape.
//!
//! Every op appends a node holding its forward value. Nodes are only ever
//! appended, so recording order is a topological order and the backward pass
//! is a single reverse sweep.

use std::collections::BTreeSet;

use crate::conv::{self, Geometry};
use crate::error::{AutodiffError, Result};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Exp,
    Log,
    Square,
    Softplus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

/// Primitive op categories; used by gradient-check reports and adjoint
/// fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum OpTag {
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    Relu,
    Tanh,
    Exp,
    Log,
    Square,
    Softplus,
    Scale,
    AddScalar,
    Conv2d,
    ConvTranspose2d,
    Sum,
    Mean,
    Concat,
    Slice,
    Minimum,
    Reshape,
    Gate,
}

impl OpTag {
    pub const ALL: [OpTag; 22] = [
        OpTag::MatMul,
        OpTag::Add,
        OpTag::Sub,
        OpTag::Mul,
        OpTag::Div,
        OpTag::Relu,
        OpTag::Tanh,
        OpTag::Exp,
        OpTag::Log,
        OpTag::Square,
        OpTag::Softplus,
        OpTag::Scale,
        OpTag::AddScalar,
        OpTag::Conv2d,
        OpTag::ConvTranspose2d,
        OpTag::Sum,
        OpTag::Mean,
        OpTag::Concat,
        OpTag::Slice,
        OpTag::Minimum,
        OpTag::Reshape,
        OpTag::Gate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpTag::MatMul => "matmul",
            OpTag::Add => "add",
            OpTag::Sub => "sub",
            OpTag::Mul => "mul",
            OpTag::Div => "div",
            OpTag::Relu => "relu",
            OpTag::Tanh => "tanh",
            OpTag::Exp => "exp",
            OpTag::Log => "log",
            OpTag::Square => "square",
            OpTag::Softplus => "softplus",
            OpTag::Scale => "scale",
            OpTag::AddScalar => "add_scalar",
            OpTag::Conv2d => "conv2d",
            OpTag::ConvTranspose2d => "conv_transpose2d",
            OpTag::Sum => "sum",
            OpTag::Mean => "mean",
            OpTag::Concat => "concat",
            OpTag::Slice => "slice",
            OpTag::Minimum => "minimum",
            OpTag::Reshape => "reshape",
            OpTag::Gate => "gate",
        }
    }

    pub fn parse(s: &str) -> Option<OpTag> {
        OpTag::ALL.iter().copied().find(|t| t.name() == s)
    }
}

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Binary(BinaryKind, Var, Var),
    Unary(Activation, Var),
    Scale(Var, F),
    AddScalar(Var),
    Gate(Var, F),
    Conv2d {
        x: Var,
        k: Var,
        bias: Option<Var>,
        geom: Geometry,
        batch: usize,
    },
    ConvTranspose2d {
        x: Var,
        k: Var,
        bias: Option<Var>,
        geom: Geometry,
        batch: usize,
    },
    Reduce(ReduceKind, Var, Vec<usize>),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize, len: usize },
    Minimum(Var, Var),
    Reshape(Var),
}

impl<F> Op<F> {
    fn tag(&self) -> Option<OpTag> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul(..) => OpTag::MatMul,
            Op::Binary(kind, ..) => match kind {
                BinaryKind::Add => OpTag::Add,
                BinaryKind::Sub => OpTag::Sub,
                BinaryKind::Mul => OpTag::Mul,
                BinaryKind::Div => OpTag::Div,
            },
            Op::Unary(kind, _) => match kind {
                Activation::Relu => OpTag::Relu,
                Activation::Tanh => OpTag::Tanh,
                Activation::Exp => OpTag::Exp,
                Activation::Log => OpTag::Log,
                Activation::Square => OpTag::Square,
                Activation::Softplus => OpTag::Softplus,
            },
            Op::Scale(..) => OpTag::Scale,
            Op::AddScalar(_) => OpTag::AddScalar,
            Op::Gate(..) => OpTag::Gate,
            Op::Conv2d { .. } => OpTag::Conv2d,
            Op::ConvTranspose2d { .. } => OpTag::ConvTranspose2d,
            Op::Reduce(ReduceKind::Sum, ..) => OpTag::Sum,
            Op::Reduce(ReduceKind::Mean, ..) => OpTag::Mean,
            Op::Concat(_) => OpTag::Concat,
            Op::Slice { .. } => OpTag::Slice,
            Op::Minimum(..) => OpTag::Minimum,
            Op::Reshape(_) => OpTag::Reshape,
        })
    }
}

#[derive(Debug, Clone)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    param: Option<ParamId>,
}

#[derive(Debug, Clone)]
enum GradMode {
    All,
    Only(BTreeSet<ParamId>),
    Off,
}

#[derive(Debug, Clone)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
    mode: GradMode,
    corrupt: Option<OpTag>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<F: Real>(op: &'static str, data: &[F]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(AutodiffError::NonFinite { op })
    }
}

/// Which operand (if any) is broadcast over the leading axes of the other.
enum Broadcast {
    None,
    Lhs,
    Rhs,
}

fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Broadcast)> {
    if a == b {
        Ok((a.to_vec(), Broadcast::None))
    } else if a.len() > b.len() && a.ends_with(b) {
        Ok((a.to_vec(), Broadcast::Rhs))
    } else if b.len() > a.len() && b.ends_with(a) {
        Ok((b.to_vec(), Broadcast::Lhs))
    } else {
        Err(AutodiffError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

/// Sums `g` (length `k * n`) down to length `n`.
fn sum_leading<F: Real>(g: &[F], n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); n];
    for chunk in g.chunks_exact(n) {
        out.iter_mut().zip(chunk).for_each(|(o, &v)| *o += v);
    }
    out
}

fn softplus<F: Real>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Maps each input flat index to its output flat index for a reduction over `axes`.
fn reduce_index_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect();
    let in_strides = strides(shape);
    let out_strides_full: Vec<usize> = {
        let os = strides(&out_shape);
        let mut j = 0;
        shape
            .iter()
            .enumerate()
            .map(|(i, _)| {
                if axes.contains(&i) {
                    0
                } else {
                    j += 1;
                    os[j - 1]
                }
            })
            .collect()
    };
    let map = (0..numel(shape))
        .map(|flat| {
            shape
                .iter()
                .enumerate()
                .map(|(ax, &d)| ((flat / in_strides[ax]) % d) * out_strides_full[ax])
                .sum()
        })
        .collect();
    (out_shape, map)
}

impl<F: Real> Tape<F> {
    /// Tape on which every parameter leaf participates in gradients.
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            mode: GradMode::All,
            corrupt: None,
        }
    }

    /// Inference tape: nothing requires grad.
    pub fn no_grad() -> Self {
        Tape {
            mode: GradMode::Off,
            ..Self::new()
        }
    }

    /// Only the listed parameters become gradient leaves; every other
    /// parameter is recorded as a constant.
    pub fn with_trainable(ids: impl IntoIterator<Item = ParamId>) -> Self {
        Tape {
            mode: GradMode::Only(ids.into_iter().collect()),
            ..Self::new()
        }
    }

    /// Test fixture: scales the adjoint of every `tag` op by one half.
    pub fn corrupt_adjoint(mut self, tag: OpTag) -> Self {
        self.corrupt = Some(tag);
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    fn push(&mut self, mut value: Tensor<F>, op: Op<F>, param: Option<ParamId>) -> Var {
        value.grad = None;
        self.nodes.push(Node { value, op, param });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, shape: Vec<usize>, data: Vec<F>, op: Op<F>, parents: &[Var]) -> Result<Var> {
        check_finite(op.tag().map(OpTag::name).unwrap_or("leaf"), &data)?;
        let requires_grad = !matches!(self.mode, GradMode::Off)
            && parents.iter().any(|p| self.nodes[p.0].value.requires_grad);
        let mut value = Tensor::new(shape, data)?;
        value.requires_grad = requires_grad;
        Ok(self.push(value, op, None))
    }

    /// Records a tensor leaf; it takes part in gradients iff its
    /// `requires_grad` flag is set (and the tape is not in no-grad mode).
    pub fn leaf(&mut self, mut t: Tensor<F>) -> Var {
        if matches!(self.mode, GradMode::Off) {
            t.requires_grad = false;
        }
        self.push(t, Op::Leaf, None)
    }

    pub fn constant(&mut self, mut t: Tensor<F>) -> Var {
        t.requires_grad = false;
        self.push(t, Op::Leaf, None)
    }

    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        let src = store.get(id);
        let trainable = src.requires_grad
            && match &self.mode {
                GradMode::All => true,
                GradMode::Only(set) => set.contains(&id),
                GradMode::Off => false,
            };
        let mut value = Tensor::new(src.shape().to_vec(), src.data().to_vec())
            .expect("parameter tensors are well formed");
        value.requires_grad = trainable;
        self.push(value, Op::Leaf, Some(id))
    }

    /// Copy of `x` that no gradient flows through.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.clone();
        self.constant(v)
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        F::gemm(
            m,
            k,
            n,
            F::one(),
            self.data(a),
            k as isize,
            1,
            self.data(b),
            n as isize,
            1,
            F::zero(),
            &mut out,
            n as isize,
            1,
        );
        self.push_op(vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let (shape, _) = broadcast(name, self.shape(a), self.shape(b))?;
        let (da, db) = (self.data(a), self.data(b));
        let (na, nb) = (da.len(), db.len());
        let n = numel(&shape);
        let f = |x: F, y: F| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let out: Vec<F> = (0..n).map(|i| f(da[i % na], db[i % nb])).collect();
        self.push_op(shape, out, Op::Binary(kind, a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn activation(&mut self, kind: Activation, x: Var) -> Result<Var> {
        let src = self.data(x);
        if kind == Activation::Log {
            if let Some(&bad) = src.iter().find(|v| **v <= F::zero()) {
                return Err(AutodiffError::NonPositiveLog { value: bad.as_f64() });
            }
        }
        let out: Vec<F> = src
            .iter()
            .map(|&v| match kind {
                Activation::Relu => v.max(F::zero()),
                Activation::Tanh => v.tanh(),
                Activation::Exp => v.exp(),
                Activation::Log => v.ln(),
                Activation::Square => v * v,
                Activation::Softplus => softplus(v),
            })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push_op(shape, out, Op::Unary(kind, x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Relu, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Tanh, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Log, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Square, x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Softplus, x)
    }

    pub fn scale(&mut self, x: Var, c: F) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push_op(shape, out, Op::Scale(x, c), &[x])
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -F::one())
    }

    pub fn add_scalar(&mut self, x: Var, c: F) -> Result<Var> {
        let out = self.data(x).iter().map(|&v| v + c).collect();
        let shape = self.shape(x).to_vec();
        self.push_op(shape, out, Op::AddScalar(x), &[x])
    }

    /// Elementwise `x^2 / (x^2 + eps)`. The adjoint `2 x eps / (x^2 + eps)^2`
    /// is evaluated directly, so it survives at 32-bit where the composed
    /// square/div form cancels to zero.
    pub fn gate(&mut self, x: Var, eps: F) -> Result<Var> {
        if eps <= F::zero() {
            return Err(AutodiffError::InvalidArgument { op: "gate", msg: "eps must be positive".into() });
        }
        let out = self
            .data(x)
            .iter()
            .map(|&v| {
                let sq = v * v;
                sq / (sq + eps)
            })
            .collect();
        let shape = self.shape(x).to_vec();
        self.push_op(shape, out, Op::Gate(x, eps), &[x])
    }

    /// Elementwise minimum of two same-shape tensors. Ties route the
    /// gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(AutodiffError::ShapeMismatch {
                op: "minimum",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| if x <= y { x } else { y })
            .collect();
        let shape = self.shape(a).to_vec();
        self.push_op(shape, out, Op::Minimum(a, b), &[a, b])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.data(x).to_vec();
        self.push_op(shape.to_vec(), data, Op::Reshape(x), &[x])
    }

    pub fn reduce(&mut self, kind: ReduceKind, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let name = match kind {
            ReduceKind::Sum => "sum",
            ReduceKind::Mean => "mean",
        };
        for &ax in axes {
            if ax >= shape.len() {
                return Err(AutodiffError::InvalidAxis {
                    op: name,
                    axis: ax,
                    rank: shape.len(),
                });
            }
        }
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        let (out_shape, map) = reduce_index_map(&shape, &axes);
        let mut out = vec![F::zero(); numel(&out_shape)];
        for (i, &v) in self.data(x).iter().enumerate() {
            out[map[i]] += v;
        }
        if kind == ReduceKind::Mean {
            let count = F::of((self.value(x).len() / out.len()) as f64);
            out.iter_mut().for_each(|v| *v /= count);
        }
        self.push_op(out_shape, out, Op::Reduce(kind, x, axes), &[x])
    }

    pub fn sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceKind::Sum, x, axes)
    }

    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(ReduceKind::Mean, x, axes)
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.sum(x, &axes)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.mean(x, &axes)
    }

    /// Concatenates along the last axis; all leading extents must agree.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = self.shape(inputs[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(s[s.len() - 1]);
        }
        let rows = numel(lead);
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.data(v)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        self.push_op(shape, out, Op::Concat(inputs.to_vec()), inputs)
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let w = *shape.last().ok_or(AutodiffError::InvalidAxis {
            op: "slice",
            axis: 0,
            rank: 0,
        })?;
        if len == 0 || start + len > w {
            return Err(AutodiffError::InvalidArgument {
                op: "slice",
                msg: format!("range {start}..{} outside last extent {w}", start + len),
            });
        }
        let rows = self.value(x).len() / w;
        let src = self.data(x);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * w + start..r * w + start + len]);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len;
        self.push_op(out_shape, out, Op::Slice { x, start, len }, &[x])
    }

    /// Splits an image tensor shape into (batch, channels, h, w, had_batch_axis).
    fn image_dims(&self, op: &'static str, x: Var) -> Result<(usize, usize, usize, usize, bool)> {
        match *self.shape(x) {
            [n, c, h, w] => Ok((n, c, h, w, true)),
            [c, h, w] => Ok((1, c, h, w, false)),
            _ => Err(AutodiffError::InvalidArgument {
                op,
                msg: format!("expected [N,C,H,W] or [C,H,W], got {:?}", self.shape(x)),
            }),
        }
    }

    fn check_bias(&self, op: &'static str, bias: Option<Var>, channels: usize) -> Result<()> {
        if let Some(b) = bias {
            if self.shape(b) != [channels] {
                return Err(AutodiffError::ShapeMismatch {
                    op,
                    lhs: self.shape(b).to_vec(),
                    rhs: vec![channels],
                });
            }
        }
        Ok(())
    }

    /// Valid-padding 2-D convolution. `k` is `[C_out, C_in, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, k: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let (n, c, h, w, batched) = self.image_dims("conv2d", x)?;
        let ks = self.shape(k).to_vec();
        let [co, ci, kh, kw] = ks[..] else {
            return Err(AutodiffError::InvalidArgument {
                op: "conv2d",
                msg: format!("kernel must be 4-d, got {ks:?}"),
            });
        };
        if ci != c {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape(x).to_vec(),
                rhs: ks,
            });
        }
        if stride == 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "conv2d",
                msg: "stride must be >= 1".into(),
            });
        }
        if kh > h || kw > w {
            return Err(AutodiffError::KernelTooLarge {
                kernel: ks,
                input: self.shape(x).to_vec(),
            });
        }
        self.check_bias("conv2d", bias, co)?;
        let geom = Geometry {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            out_h: (h - kh) / stride + 1,
            out_w: (w - kw) / stride + 1,
        };
        let p = geom.positions();
        let mut cols = vec![F::zero(); geom.rows() * n * p];
        conv::im2col(&geom, n, self.data(x), &mut cols);
        let mut tmp = vec![F::zero(); co * n * p];
        F::gemm(
            co,
            geom.rows(),
            n * p,
            F::one(),
            self.data(k),
            geom.rows() as isize,
            1,
            &cols,
            (n * p) as isize,
            1,
            F::zero(),
            &mut tmp,
            (n * p) as isize,
            1,
        );
        let mut out = conv::to_batch_major(&tmp, n, co, p);
        if let Some(b) = bias {
            let bd = self.data(b);
            for (i, chunk) in out.chunks_exact_mut(p).enumerate() {
                let bv = bd[i % co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        let shape = if batched {
            vec![n, co, geom.out_h, geom.out_w]
        } else {
            vec![co, geom.out_h, geom.out_w]
        };
        let mut parents = vec![x, k];
        parents.extend(bias);
        self.push_op(
            shape,
            out,
            Op::Conv2d {
                x,
                k,
                bias,
                geom,
                batch: n,
            },
            &parents,
        )
    }

    /// Transposed convolution (adjoint of [`Tape::conv2d`]). `k` is
    /// `[C_in, C_out, kh, kw]`; `out_hw` must lie in
    /// `[(H-1)*stride + k, (H-1)*stride + k + stride - 1]` per axis.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        k: Var,
        bias: Option<Var>,
        stride: usize,
        out_hw: (usize, usize),
    ) -> Result<Var> {
        let (n, ci, h, w, batched) = self.image_dims("conv_transpose2d", x)?;
        let ks = self.shape(k).to_vec();
        let [kci, co, kh, kw] = ks[..] else {
            return Err(AutodiffError::InvalidArgument {
                op: "conv_transpose2d",
                msg: format!("kernel must be 4-d, got {ks:?}"),
            });
        };
        if kci != ci {
            return Err(AutodiffError::ShapeMismatch {
                op: "conv_transpose2d",
                lhs: self.shape(x).to_vec(),
                rhs: ks,
            });
        }
        if stride == 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "conv_transpose2d",
                msg: "stride must be >= 1".into(),
            });
        }
        let (oh, ow) = out_hw;
        let min_h = (h - 1) * stride + kh;
        let min_w = (w - 1) * stride + kw;
        if oh < min_h || oh >= min_h + stride || ow < min_w || ow >= min_w + stride {
            return Err(AutodiffError::InvalidArgument {
                op: "conv_transpose2d",
                msg: format!("output size {out_hw:?} incompatible with input {h}x{w}"),
            });
        }
        self.check_bias("conv_transpose2d", bias, co)?;
        // Geometry of the equivalent forward conv from the output image.
        let geom = Geometry {
            channels: co,
            height: oh,
            width: ow,
            kh,
            kw,
            stride,
            out_h: h,
            out_w: w,
        };
        let p = h * w;
        let xc = conv::to_channel_major(self.data(x), n, ci, p);
        let mut cols = vec![F::zero(); geom.rows() * n * p];
        // cols = K^T x
        F::gemm(
            geom.rows(),
            ci,
            n * p,
            F::one(),
            self.data(k),
            1,
            geom.rows() as isize,
            &xc,
            (n * p) as isize,
            1,
            F::zero(),
            &mut cols,
            (n * p) as isize,
            1,
        );
        let mut out = vec![F::zero(); n * geom.image_len()];
        conv::col2im(&geom, n, &cols, &mut out);
        if let Some(b) = bias {
            let bd = self.data(b);
            for (i, chunk) in out.chunks_exact_mut(oh * ow).enumerate() {
                let bv = bd[i % co];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        let shape = if batched {
            vec![n, co, oh, ow]
        } else {
            vec![co, oh, ow]
        };
        let mut parents = vec![x, k];
        parents.extend(bias);
        self.push_op(
            shape,
            out,
            Op::ConvTranspose2d {
                x,
                k,
                bias,
                geom,
                batch: n,
            },
            &parents,
        )
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`. Populates `grad` on every
    /// requires-grad node reachable from it; other nodes are untouched.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if numel(&shape) != 1 {
            return Err(AutodiffError::NonScalarLoss { shape });
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        self.nodes[loss.0].value.accumulate_grad(&[F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].value.grad.take() else {
                continue;
            };
            let mut contribs = self.adjoints(i, &g);
            self.nodes[i].value.grad = Some(g);
            if self.corrupt.is_some() && self.nodes[i].op.tag() == self.corrupt {
                let half = F::of(0.5);
                for (_, c) in contribs.iter_mut() {
                    c.iter_mut().for_each(|v| *v *= half);
                }
            }
            for (parent, c) in contribs {
                if self.nodes[parent.0].value.requires_grad {
                    self.nodes[parent.0].value.accumulate_grad(&c);
                }
            }
        }
        Ok(())
    }

    /// Adds the gradients of parameter leaves into `store`.
    pub fn write_param_grads(&self, store: &mut ParamStore<F>) {
        for node in &self.nodes {
            if let (Some(id), Some(g)) = (node.param, node.value.grad.as_ref()) {
                store.get_mut(id).accumulate_grad(g);
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    /// Vector-Jacobian products of node `i` w.r.t. each parent that needs them.
    fn adjoints(&self, i: usize, g: &[F]) -> Vec<(Var, Vec<F>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                if self.wants(a) {
                    let mut da = vec![F::zero(); m * k];
                    // dA = dC * B^T
                    F::gemm(m, n, k, F::one(), g, n as isize, 1, self.data(b), 1, n as isize, F::zero(), &mut da, k as isize, 1);
                    res.push((a, da));
                }
                if self.wants(b) {
                    let mut db = vec![F::zero(); k * n];
                    // dB = A^T * dC
                    F::gemm(k, m, n, F::one(), self.data(a), 1, k as isize, g, n as isize, 1, F::zero(), &mut db, n as isize, 1);
                    res.push((b, db));
                }
            }
            &Op::Binary(kind, a, b) => {
                let (da, db) = (self.data(a), self.data(b));
                let (na, nb) = (da.len(), db.len());
                let n = g.len();
                if self.wants(a) {
                    let full: Vec<F> = (0..n)
                        .map(|j| match kind {
                            BinaryKind::Add | BinaryKind::Sub => g[j],
                            BinaryKind::Mul => g[j] * db[j % nb],
                            BinaryKind::Div => g[j] / db[j % nb],
                        })
                        .collect();
                    res.push((a, if na == n { full } else { sum_leading(&full, na) }));
                }
                if self.wants(b) {
                    let full: Vec<F> = (0..n)
                        .map(|j| match kind {
                            BinaryKind::Add => g[j],
                            BinaryKind::Sub => -g[j],
                            BinaryKind::Mul => g[j] * da[j % na],
                            BinaryKind::Div => {
                                let y = db[j % nb];
                                -g[j] * da[j % na] / (y * y)
                            }
                        })
                        .collect();
                    res.push((b, if nb == n { full } else { sum_leading(&full, nb) }));
                }
            }
            &Op::Unary(kind, x) => {
                if self.wants(x) {
                    let xd = self.data(x);
                    let two = F::of(2.0);
                    let dx = g
                        .iter()
                        .zip(xd)
                        .zip(out)
                        .map(|((&gi, &xi), &yi)| match kind {
                            // subgradient at exactly 0 is 0
                            Activation::Relu => {
                                if xi > F::zero() {
                                    gi
                                } else {
                                    F::zero()
                                }
                            }
                            Activation::Tanh => gi * (F::one() - yi * yi),
                            Activation::Exp => gi * yi,
                            Activation::Log => gi / xi,
                            Activation::Square => gi * two * xi,
                            Activation::Softplus => gi * sigmoid(xi),
                        })
                        .collect();
                    res.push((x, dx));
                }
            }
            &Op::Scale(x, c) => {
                if self.wants(x) {
                    res.push((x, g.iter().map(|&v| v * c).collect()));
                }
            }
            &Op::Gate(x, eps) => {
                if self.wants(x) {
                    let two = F::of(2.0);
                    let dx = g
                        .iter()
                        .zip(self.data(x))
                        .map(|(&gi, &xi)| {
                            let den = xi * xi + eps;
                            gi * two * xi * eps / (den * den)
                        })
                        .collect();
                    res.push((x, dx));
                }
            }
            &Op::AddScalar(x) | &Op::Reshape(x) => {
                if self.wants(x) {
                    res.push((x, g.to_vec()));
                }
            }
            &Op::Minimum(a, b) => {
                let (da, db) = (self.data(a), self.data(b));
                let pick_a: Vec<bool> = da.iter().zip(db).map(|(x, y)| x <= y).collect();
                if self.wants(a) {
                    res.push((a, g.iter().zip(&pick_a).map(|(&v, &p)| if p { v } else { F::zero() }).collect()));
                }
                if self.wants(b) {
                    res.push((b, g.iter().zip(&pick_a).map(|(&v, &p)| if p { F::zero() } else { v }).collect()));
                }
            }
            Op::Reduce(kind, x, axes) => {
                let x = *x;
                if self.wants(x) {
                    let shape = self.shape(x);
                    let (_, map) = reduce_index_map(shape, axes);
                    let scale = match kind {
                        ReduceKind::Sum => F::one(),
                        ReduceKind::Mean => F::one() / F::of((map.len() / g.len()) as f64),
                    };
                    res.push((x, map.iter().map(|&o| g[o] * scale).collect()));
                }
            }
            Op::Concat(inputs) => {
                let total = *node.value.shape().last().unwrap();
                let rows = g.len() / total;
                let mut offset = 0;
                for &v in inputs {
                    let w = *self.shape(v).last().unwrap();
                    if self.wants(v) {
                        let mut dv = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dv.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        res.push((v, dv));
                    }
                    offset += w;
                }
            }
            &Op::Slice { x, start, len } => {
                if self.wants(x) {
                    let w = *self.shape(x).last().unwrap();
                    let rows = g.len() / len;
                    let mut dx = vec![F::zero(); rows * w];
                    for r in 0..rows {
                        dx[r * w + start..r * w + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                    }
                    res.push((x, dx));
                }
            }
            &Op::Conv2d {
                x,
                k,
                bias,
                geom,
                batch,
            } => {
                let p = geom.positions();
                let co = self.shape(k)[0];
                let gc = conv::to_channel_major(g, batch, co, p);
                if self.wants(k) {
                    let mut cols = vec![F::zero(); geom.rows() * batch * p];
                    conv::im2col(&geom, batch, self.data(x), &mut cols);
                    let mut dk = vec![F::zero(); co * geom.rows()];
                    // dK = dOut * cols^T
                    F::gemm(co, batch * p, geom.rows(), F::one(), &gc, (batch * p) as isize, 1, &cols, 1, (batch * p) as isize, F::zero(), &mut dk, geom.rows() as isize, 1);
                    res.push((k, dk));
                }
                if self.wants(x) {
                    let mut dcols = vec![F::zero(); geom.rows() * batch * p];
                    // dcols = K^T * dOut
                    F::gemm(geom.rows(), co, batch * p, F::one(), self.data(k), 1, geom.rows() as isize, &gc, (batch * p) as isize, 1, F::zero(), &mut dcols, (batch * p) as isize, 1);
                    let mut dx = vec![F::zero(); batch * geom.image_len()];
                    conv::col2im(&geom, batch, &dcols, &mut dx);
                    res.push((x, dx));
                }
                if let Some(b) = bias.filter(|&b| self.wants(b)) {
                    res.push((b, gc.chunks_exact(batch * p).map(|c| c.iter().copied().sum()).collect()));
                }
            }
            &Op::ConvTranspose2d {
                x,
                k,
                bias,
                geom,
                batch,
            } => {
                let p = geom.positions();
                let ci = self.shape(k)[0];
                let mut dcols = vec![F::zero(); geom.rows() * batch * p];
                conv::im2col(&geom, batch, g, &mut dcols);
                if self.wants(x) {
                    let mut dxc = vec![F::zero(); ci * batch * p];
                    // dx = K * dcols
                    F::gemm(ci, geom.rows(), batch * p, F::one(), self.data(k), geom.rows() as isize, 1, &dcols, (batch * p) as isize, 1, F::zero(), &mut dxc, (batch * p) as isize, 1);
                    res.push((x, conv::to_batch_major(&dxc, batch, ci, p)));
                }
                if self.wants(k) {
                    let xc = conv::to_channel_major(self.data(x), batch, ci, p);
                    let mut dk = vec![F::zero(); ci * geom.rows()];
                    // dK = x * dcols^T
                    F::gemm(ci, batch * p, geom.rows(), F::one(), &xc, (batch * p) as isize, 1, &dcols, 1, (batch * p) as isize, F::zero(), &mut dk, geom.rows() as isize, 1);
                    res.push((k, dk));
                }
                if let Some(b) = bias.filter(|&b| self.wants(b)) {
                    let co = geom.channels;
                    let plane = geom.height * geom.width;
                    let mut db = vec![F::zero(); co];
                    for (i, chunk) in g.chunks_exact(plane).enumerate() {
                        db[i % co] += chunk.iter().copied().sum();
                    }
                    res.push((b, db));
                }
            }
        }
        res
    }
}
