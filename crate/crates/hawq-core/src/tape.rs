//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! The backward pass does not produce raw numbers: it records the gradient
//! computation as new nodes on the same tape. Gradients are therefore
//! differentiable themselves, which is what makes Hessian-vector products
//! exact -- differentiate gᵀv a second time instead of finite-differencing.
//!
//! Every operation's VJP is expressed in terms of the tape's own op set, so
//! the op set is closed under differentiation. Two conventions make the
//! piecewise ops well-defined: relu'(0) = 0 with a zero second derivative
//! everywhere, and the straight-through estimator for fake quantization
//! (gradient passes where |z| <= clip_max, zero outside, zero second
//! derivative).

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims};
use crate::quant::Quantizer;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    ScalarMul(f64),
    Recip,
    Exp,
    Ln,
    Relu,
    /// Elementwise product with a constant 0/1 mask baked at emission time.
    MaskMul(Arc<Vec<f64>>),
    Matmul,
    Transpose,
    Reshape(Vec<usize>),
    RowSum,
    ColSum,
    BroadcastCols(usize),
    BroadcastRows(usize),
    SumAll,
    BroadcastScalar(Vec<usize>),
    GatherLabels(Arc<Vec<usize>>),
    ScatterLabels {
        labels: Arc<Vec<usize>>,
        classes: usize,
    },
    Conv2d(ConvDims),
    Conv2dGradInput(ConvDims),
    Conv2dGradKernel(ConvDims),
    FakeQuant(Quantizer),
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add => "add",
        Op::Sub => "sub",
        Op::Mul => "mul",
        Op::ScalarMul(_) => "scalar_mul",
        Op::Recip => "recip",
        Op::Exp => "exp",
        Op::Ln => "ln",
        Op::Relu => "relu",
        Op::MaskMul(_) => "mask_mul",
        Op::Matmul => "matmul",
        Op::Transpose => "transpose",
        Op::Reshape(_) => "reshape",
        Op::RowSum => "row_sum",
        Op::ColSum => "col_sum",
        Op::BroadcastCols(_) => "broadcast_cols",
        Op::BroadcastRows(_) => "broadcast_rows",
        Op::SumAll => "sum_all",
        Op::BroadcastScalar(_) => "broadcast_scalar",
        Op::GatherLabels(_) => "gather_labels",
        Op::ScatterLabels { .. } => "scatter_labels",
        Op::Conv2d(_) => "conv2d",
        Op::Conv2dGradInput(_) => "conv2d_grad_input",
        Op::Conv2dGradKernel(_) => "conv2d_grad_kernel",
        Op::FakeQuant(_) => "fake_quant",
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to the tape's grad-tracked leaves.
///
/// Entries hold node ids, not detached numbers: the gradient tensors remain
/// live tape nodes and can be differentiated again.
#[derive(Debug, Clone)]
pub struct GradientMap {
    entries: Vec<(NodeId, NodeId)>,
}

impl GradientMap {
    pub fn grad_node(&self, param: NodeId) -> Option<NodeId> {
        self.entries.iter().find(|(p, _)| *p == param).map(|(_, g)| *g)
    }

    /// (parameter, gradient) pairs in leaf registration order.
    pub fn entries(&self) -> &[(NodeId, NodeId)] {
        &self.entries
    }
}

/// Define-by-run tape. Nodes are appended in topological order; every node's
/// inputs precede it, so replaying the tape front to back reproduces the
/// recorded values bit for bit.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grad_leaves: Vec<NodeId>,
    backward_passes: usize,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Number of completed backward passes (the probe budget's cost unit).
    pub fn backward_passes(&self) -> usize {
        self.backward_passes
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn check_id(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::NotOnTape(id.0));
        }
        Ok(())
    }

    fn t(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name(&op) });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
        });
        Ok(id)
    }

    /// Register a differentiable leaf (a parameter).
    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad: true,
        });
        self.grad_leaves.push(id);
        Ok(id)
    }

    /// Register a constant (data, labels-as-floats, detached values).
    pub fn constant(&mut self, value: Tensor) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "constant" });
        }
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad: false,
        });
        Ok(id)
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.t(a).shape() != self.t(b).shape() {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.t(a).shape(), self.t(b).shape()),
            });
        }
        Ok(())
    }

    fn zip_elems(
        &mut self,
        op: Op,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        let elems: Vec<f64> = self
            .t(a)
            .elems()
            .iter()
            .zip(self.t(b).elems())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.t(a).shape().to_vec(), elems)?;
        self.push(op, vec![a, b], value)
    }

    fn map_elems(&mut self, op: Op, a: NodeId, f: impl Fn(f64) -> f64) -> Result<NodeId> {
        let elems: Vec<f64> = self.t(a).elems().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(self.t(a).shape().to_vec(), elems)?;
        self.push(op, vec![a], value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_id(a)?;
        self.check_id(b)?;
        self.same_shape("add", a, b)?;
        self.zip_elems(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_id(a)?;
        self.check_id(b)?;
        self.same_shape("sub", a, b)?;
        self.zip_elems(Op::Sub, a, b, |x, y| x - y)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_id(a)?;
        self.check_id(b)?;
        self.same_shape("mul", a, b)?;
        self.zip_elems(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn scalar_mul(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.check_id(a)?;
        self.map_elems(Op::ScalarMul(c), a, |x| c * x)
    }

    pub fn recip(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_id(a)?;
        self.map_elems(Op::Recip, a, |x| 1.0 / x)
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_id(a)?;
        self.map_elems(Op::Exp, a, f64::exp)
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_id(a)?;
        self.map_elems(Op::Ln, a, f64::ln)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_id(a)?;
        self.map_elems(Op::Relu, a, |x| x.max(0.0))
    }

    fn mask_mul(&mut self, g: NodeId, mask: Arc<Vec<f64>>) -> Result<NodeId> {
        debug_assert_eq!(self.t(g).numel(), mask.len());
        let elems: Vec<f64> = self
            .t(g)
            .elems()
            .iter()
            .zip(mask.iter())
            .map(|(&x, &m)| x * m)
            .collect();
        let value = Tensor::new(self.t(g).shape().to_vec(), elems)?;
        self.push(Op::MaskMul(mask), vec![g], value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_id(a)?;
        self.check_id(b)?;
        let (sa, sb) = (self.t(a).shape(), self.t(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{sa:?} x {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.t(a).elems(), self.t(b).elems(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        self.push(Op::Matmul, vec![a, b], value)
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_id(a)?;
        let s = self.t(a).shape();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                detail: format!("expected rank 2, got {s:?}"),
            });
        }
        let (m, n) = (s[0], s[1]);
        let out = kernels::transpose(self.t(a).elems(), m, n);
        let value = Tensor::new(vec![n, m], out)?;
        self.push(Op::Transpose, vec![a], value)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.check_id(a)?;
        let numel: usize = shape.iter().product();
        if shape.contains(&0) || numel != self.t(a).numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", self.t(a).shape()),
            });
        }
        let value = Tensor::new(shape.clone(), self.t(a).elems().to_vec())?;
        self.push(Op::Reshape(shape), vec![a], value)
    }

    /// Collapse all trailing dimensions: [n, d1, d2, ...] -> [n, d1*d2*...].
    pub fn batch_flatten(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_id(a)?;
        let s = self.t(a).shape();
        if s.len() < 2 {
            return Err(Error::ShapeMismatch {
                op: "batch_flatten",
                detail: format!("expected rank >= 2, got {s:?}"),
            });
        }
        let rest: usize = s[1..].iter().product();
        let target = vec![s[0], rest];
        self.reshape(a, target)
    }

    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_id(a)?;
        let s = self.t(a).shape();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "row_sum",
                detail: format!("expected rank 2, got {s:?}"),
            });
        }
        let (m, n) = (s[0], s[1]);
        let src = self.t(a).elems();
        let out: Vec<f64> = (0..m).map(|i| src[i * n..(i + 1) * n].iter().sum()).collect();
        let value = Tensor::new(vec![m], out)?;
        self.push(Op::RowSum, vec![a], value)
    }

    pub fn col_sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_id(a)?;
        let s = self.t(a).shape();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "col_sum",
                detail: format!("expected rank 2, got {s:?}"),
            });
        }
        let (m, n) = (s[0], s[1]);
        let src = self.t(a).elems();
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += src[i * n + j];
            }
        }
        let value = Tensor::new(vec![n], out)?;
        self.push(Op::ColSum, vec![a], value)
    }

    pub fn broadcast_cols(&mut self, a: NodeId, n: usize) -> Result<NodeId> {
        self.check_id(a)?;
        let s = self.t(a).shape();
        if s.len() != 1 || n == 0 {
            return Err(Error::ShapeMismatch {
                op: "broadcast_cols",
                detail: format!("expected rank 1 and n >= 1, got {s:?}, n={n}"),
            });
        }
        let m = s[0];
        let src = self.t(a).elems();
        let mut out = Vec::with_capacity(m * n);
        for &v in src {
            out.extend(std::iter::repeat_n(v, n));
        }
        let value = Tensor::new(vec![m, n], out)?;
        self.push(Op::BroadcastCols(n), vec![a], value)
    }

    pub fn broadcast_rows(&mut self, a: NodeId, m: usize) -> Result<NodeId> {
        self.check_id(a)?;
        let s = self.t(a).shape();
        if s.len() != 1 || m == 0 {
            return Err(Error::ShapeMismatch {
                op: "broadcast_rows",
                detail: format!("expected rank 1 and m >= 1, got {s:?}, m={m}"),
            });
        }
        let n = s[0];
        let src = self.t(a).elems();
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(src);
        }
        let value = Tensor::new(vec![m, n], out)?;
        self.push(Op::BroadcastRows(m), vec![a], value)
    }

    pub fn sum_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.check_id(a)?;
        let total: f64 = self.t(a).elems().iter().sum();
        self.push(Op::SumAll, vec![a], Tensor::scalar(total))
    }

    pub fn broadcast_scalar(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.check_id(a)?;
        if !self.t(a).is_scalar() {
            return Err(Error::ShapeMismatch {
                op: "broadcast_scalar",
                detail: format!("expected scalar, got {:?}", self.t(a).shape()),
            });
        }
        let v = self.t(a).scalar_value();
        let numel: usize = shape.iter().product();
        let value = Tensor::new(shape.clone(), vec![v; numel])?;
        self.push(Op::BroadcastScalar(shape), vec![a], value)
    }

    /// Arithmetic mean of all elements, as a scalar node.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.t(a).numel();
        let s = self.sum_all(a)?;
        self.scalar_mul(s, 1.0 / n as f64)
    }

    /// out[i] = a[i, labels[i]] for a [m, classes] input.
    pub fn gather_labels(&mut self, a: NodeId, labels: Arc<Vec<usize>>) -> Result<NodeId> {
        self.check_id(a)?;
        let s = self.t(a).shape();
        if s.len() != 2 || labels.len() != s[0] {
            return Err(Error::ShapeMismatch {
                op: "gather_labels",
                detail: format!("shape {s:?}, {} labels", labels.len()),
            });
        }
        let classes = s[1];
        for &l in labels.iter() {
            if l >= classes {
                return Err(Error::LabelOutOfRange { label: l, classes });
            }
        }
        let src = self.t(a).elems();
        let out: Vec<f64> = labels.iter().enumerate().map(|(i, &l)| src[i * classes + l]).collect();
        let value = Tensor::new(vec![s[0]], out)?;
        self.push(Op::GatherLabels(labels), vec![a], value)
    }

    fn scatter_labels(
        &mut self,
        g: NodeId,
        labels: Arc<Vec<usize>>,
        classes: usize,
    ) -> Result<NodeId> {
        let m = self.t(g).numel();
        debug_assert_eq!(m, labels.len());
        let src = self.t(g).elems();
        let mut out = vec![0.0; m * classes];
        for (i, &l) in labels.iter().enumerate() {
            out[i * classes + l] = src[i];
        }
        let value = Tensor::new(vec![m, classes], out)?;
        self.push(Op::ScatterLabels { labels, classes }, vec![g], value)
    }

    /// Valid 2-D convolution with symmetric zero padding, stride 1.
    /// x: [n, c_in, h, w], k: [c_out, c_in, kh, kw].
    pub fn conv2d(&mut self, x: NodeId, k: NodeId, pad: usize) -> Result<NodeId> {
        self.check_id(x)?;
        self.check_id(k)?;
        let (sx, sk) = (self.t(x).shape(), self.t(k).shape());
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[1] {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("x {sx:?}, k {sk:?}"),
            });
        }
        let dims = ConvDims {
            batch: sx[0],
            c_in: sx[1],
            h: sx[2],
            w: sx[3],
            c_out: sk[0],
            kh: sk[2],
            kw: sk[3],
            pad,
        };
        if dims.h + 2 * pad < dims.kh || dims.w + 2 * pad < dims.kw {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel {:?} larger than padded input {sx:?}", sk),
            });
        }
        self.conv_forward_node(x, k, dims)
    }

    fn conv_forward_node(&mut self, x: NodeId, k: NodeId, d: ConvDims) -> Result<NodeId> {
        let out = kernels::conv_forward(self.t(x).elems(), self.t(k).elems(), d);
        let value = Tensor::new(vec![d.batch, d.c_out, d.out_h(), d.out_w()], out)?;
        self.push(Op::Conv2d(d), vec![x, k], value)
    }

    fn conv_grad_input_node(&mut self, g: NodeId, k: NodeId, d: ConvDims) -> Result<NodeId> {
        let out = kernels::conv_grad_input(self.t(g).elems(), self.t(k).elems(), d);
        let value = Tensor::new(vec![d.batch, d.c_in, d.h, d.w], out)?;
        self.push(Op::Conv2dGradInput(d), vec![g, k], value)
    }

    fn conv_grad_kernel_node(&mut self, x: NodeId, g: NodeId, d: ConvDims) -> Result<NodeId> {
        let out = kernels::conv_grad_kernel(self.t(x).elems(), self.t(g).elems(), d);
        let value = Tensor::new(vec![d.c_out, d.c_in, d.kh, d.kw], out)?;
        self.push(Op::Conv2dGradKernel(d), vec![x, g], value)
    }

    /// Forward emits Q(z); backward is the straight-through estimator.
    pub fn fake_quant(&mut self, z: NodeId, q: Quantizer) -> Result<NodeId> {
        self.check_id(z)?;
        let elems: Vec<f64> = self.t(z).elems().iter().map(|&v| q.apply(v)).collect();
        let value = Tensor::new(self.t(z).shape().to_vec(), elems)?;
        self.push(Op::FakeQuant(q), vec![z], value)
    }

    /// x[m,n] + b[n] broadcast over rows.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_id(x)?;
        let s = self.t(x).shape();
        if s.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                detail: format!("expected rank 2, got {s:?}"),
            });
        }
        let m = s[0];
        let bb = self.broadcast_rows(b, m)?;
        self.add(x, bb)
    }

    /// Mean softmax cross-entropy over the batch.
    ///
    /// Composed from differentiable primitives via the log-sum-exp identity
    /// with a detached per-row max shift (exact for the value and for all
    /// derivatives, since LSE(x) = m + LSE(x - m) for any constant m).
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.check_id(logits)?;
        let s = self.t(logits).shape();
        if s.len() != 2 || labels.len() != s[0] {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                detail: format!("logits {s:?}, {} labels", labels.len()),
            });
        }
        let (m, classes) = (s[0], s[1]);
        for &l in labels {
            if l >= classes {
                return Err(Error::LabelOutOfRange { label: l, classes });
            }
        }
        let row_max: Vec<f64> = {
            let src = self.t(logits).elems();
            (0..m)
                .map(|i| src[i * classes..(i + 1) * classes].iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)))
                .collect()
        };
        let mx = self.constant(Tensor::from_vec(row_max))?;
        let mxb = self.broadcast_cols(mx, classes)?;
        let shifted = self.sub(logits, mxb)?;
        let e = self.exp(shifted)?;
        let se = self.row_sum(e)?;
        let lnse = self.ln(se)?;
        let lse = self.add(lnse, mx)?;
        let labels = Arc::new(labels.to_vec());
        let picked = self.gather_labels(logits, labels)?;
        let per_example = self.sub(lse, picked)?;
        let total = self.sum_all(per_example)?;
        self.scalar_mul(total, 1.0 / m as f64)
    }

    /// Reverse pass from a scalar loss. Gradient computation is recorded on
    /// the tape, so the returned gradients can be differentiated again.
    pub fn backward(&mut self, loss: NodeId) -> Result<GradientMap> {
        self.check_id(loss)?;
        if !self.t(loss).is_scalar() {
            return Err(Error::LossNotScalar(self.t(loss).shape().to_vec()));
        }
        self.backward_passes += 1;
        let bound = loss.0 + 1;
        let mut grads: Vec<Option<NodeId>> = vec![None; bound];
        let seed = self.constant(Tensor::scalar(1.0))?;
        grads[loss.0] = Some(seed);

        for i in (0..bound).rev() {
            let Some(upstream) = grads[i] else { continue };
            if self.nodes[i].inputs.is_empty() || !self.nodes[i].requires_grad {
                continue;
            }
            let contribs = self.emit_vjp(i, upstream)?;
            for (input, contrib) in contribs {
                debug_assert!(input.0 < i);
                grads[input.0] = Some(match grads[input.0] {
                    Some(acc) => self.add(acc, contrib)?,
                    None => contrib,
                });
            }
        }

        let leaves = self.grad_leaves.clone();
        let mut entries = Vec::with_capacity(leaves.len());
        for leaf in leaves {
            let g = match grads.get(leaf.0).copied().flatten() {
                Some(g) => g,
                None => self.constant(Tensor::zeros(self.t(leaf).shape().to_vec()))?,
            };
            debug_assert_eq!(self.t(leaf).shape(), self.t(g).shape());
            entries.push((leaf, g));
        }
        Ok(GradientMap { entries })
    }

    /// Emit gradient contributions of node `i` into its inputs.
    fn emit_vjp(&mut self, i: usize, up: NodeId) -> Result<Vec<(NodeId, NodeId)>> {
        let op = self.nodes[i].op.clone();
        let inputs = self.nodes[i].inputs.clone();
        let rg = |t: &Tape, id: NodeId| t.nodes[id.0].requires_grad;
        let mut out = Vec::with_capacity(2);
        match op {
            Op::Leaf => {}
            Op::Add => {
                for &a in &inputs {
                    if rg(self, a) {
                        out.push((a, up));
                    }
                }
            }
            Op::Sub => {
                let (a, b) = (inputs[0], inputs[1]);
                if rg(self, a) {
                    out.push((a, up));
                }
                if rg(self, b) {
                    let neg = self.scalar_mul(up, -1.0)?;
                    out.push((b, neg));
                }
            }
            Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                if rg(self, a) {
                    let g = self.mul(up, b)?;
                    out.push((a, g));
                }
                if rg(self, b) {
                    let g = self.mul(up, a)?;
                    out.push((b, g));
                }
            }
            Op::ScalarMul(c) => {
                let a = inputs[0];
                if rg(self, a) {
                    let g = self.scalar_mul(up, c)?;
                    out.push((a, g));
                }
            }
            Op::Recip => {
                // d(1/a) = -u / a² = -u * out * out
                let a = inputs[0];
                if rg(self, a) {
                    let self_id = NodeId(i);
                    let sq = self.mul(self_id, self_id)?;
                    let prod = self.mul(up, sq)?;
                    let g = self.scalar_mul(prod, -1.0)?;
                    out.push((a, g));
                }
            }
            Op::Exp => {
                let a = inputs[0];
                if rg(self, a) {
                    let g = self.mul(up, NodeId(i))?;
                    out.push((a, g));
                }
            }
            Op::Ln => {
                let a = inputs[0];
                if rg(self, a) {
                    let r = self.recip(a)?;
                    let g = self.mul(up, r)?;
                    out.push((a, g));
                }
            }
            Op::Relu => {
                // relu'(0) = 0; the mask is constant, so the second
                // derivative through this path is zero everywhere.
                let a = inputs[0];
                if rg(self, a) {
                    let mask: Arc<Vec<f64>> = Arc::new(
                        self.t(a).elems().iter().map(|&x| if x > 0.0 { 1.0 } else { 0.0 }).collect(),
                    );
                    let g = self.mask_mul(up, mask)?;
                    out.push((a, g));
                }
            }
            Op::MaskMul(mask) => {
                let a = inputs[0];
                if rg(self, a) {
                    let g = self.mask_mul(up, mask)?;
                    out.push((a, g));
                }
            }
            Op::Matmul => {
                let (a, b) = (inputs[0], inputs[1]);
                if rg(self, a) {
                    let bt = self.transpose(b)?;
                    let g = self.matmul(up, bt)?;
                    out.push((a, g));
                }
                if rg(self, b) {
                    let at = self.transpose(a)?;
                    let g = self.matmul(at, up)?;
                    out.push((b, g));
                }
            }
            Op::Transpose => {
                let a = inputs[0];
                if rg(self, a) {
                    let g = self.transpose(up)?;
                    out.push((a, g));
                }
            }
            Op::Reshape(_) => {
                let a = inputs[0];
                if rg(self, a) {
                    let orig = self.t(a).shape().to_vec();
                    let g = self.reshape(up, orig)?;
                    out.push((a, g));
                }
            }
            Op::RowSum => {
                let a = inputs[0];
                if rg(self, a) {
                    let n = self.t(a).shape()[1];
                    let g = self.broadcast_cols(up, n)?;
                    out.push((a, g));
                }
            }
            Op::ColSum => {
                let a = inputs[0];
                if rg(self, a) {
                    let m = self.t(a).shape()[0];
                    let g = self.broadcast_rows(up, m)?;
                    out.push((a, g));
                }
            }
            Op::BroadcastCols(_) => {
                let a = inputs[0];
                if rg(self, a) {
                    let g = self.row_sum(up)?;
                    out.push((a, g));
                }
            }
            Op::BroadcastRows(_) => {
                let a = inputs[0];
                if rg(self, a) {
                    let g = self.col_sum(up)?;
                    out.push((a, g));
                }
            }
            Op::SumAll => {
                let a = inputs[0];
                if rg(self, a) {
                    let shape = self.t(a).shape().to_vec();
                    let g = self.broadcast_scalar(up, shape)?;
                    out.push((a, g));
                }
            }
            Op::BroadcastScalar(_) => {
                let a = inputs[0];
                if rg(self, a) {
                    let g = self.sum_all(up)?;
                    out.push((a, g));
                }
            }
            Op::GatherLabels(labels) => {
                let a = inputs[0];
                if rg(self, a) {
                    let classes = self.t(a).shape()[1];
                    let g = self.scatter_labels(up, labels, classes)?;
                    out.push((a, g));
                }
            }
            Op::ScatterLabels { labels, .. } => {
                let a = inputs[0];
                if rg(self, a) {
                    let g = self.gather_labels(up, labels)?;
                    out.push((a, g));
                }
            }
            Op::Conv2d(d) => {
                let (x, k) = (inputs[0], inputs[1]);
                if rg(self, x) {
                    let g = self.conv_grad_input_node(up, k, d)?;
                    out.push((x, g));
                }
                if rg(self, k) {
                    let g = self.conv_grad_kernel_node(x, up, d)?;
                    out.push((k, g));
                }
            }
            Op::Conv2dGradInput(d) => {
                let (g_in, k) = (inputs[0], inputs[1]);
                if rg(self, g_in) {
                    let g = self.conv_forward_node(up, k, d)?;
                    out.push((g_in, g));
                }
                if rg(self, k) {
                    let g = self.conv_grad_kernel_node(up, g_in, d)?;
                    out.push((k, g));
                }
            }
            Op::Conv2dGradKernel(d) => {
                let (x, g_in) = (inputs[0], inputs[1]);
                if rg(self, x) {
                    let g = self.conv_grad_input_node(g_in, up, d)?;
                    out.push((x, g));
                }
                if rg(self, g_in) {
                    let g = self.conv_forward_node(x, up, d)?;
                    out.push((g_in, g));
                }
            }
            Op::FakeQuant(q) => {
                // straight-through estimator
                let z = inputs[0];
                if rg(self, z) {
                    let clip = q.clip_max();
                    let mask: Arc<Vec<f64>> = Arc::new(
                        self.t(z)
                            .elems()
                            .iter()
                            .map(|&v| if v.abs() <= clip { 1.0 } else { 0.0 })
                            .collect(),
                    );
                    let g = self.mask_mul(up, mask)?;
                    out.push((z, g));
                }
            }
        }
        Ok(out)
    }

    /// Hv for the block spanned by `params`, by differentiating gᵀv.
    ///
    /// `grads` must come from a previous [`Tape::backward`] call on this
    /// tape; `v` is flattened in `params` order.
    pub fn grad_dot_v_backward(
        &mut self,
        grads: &GradientMap,
        params: &[NodeId],
        v: &[f64],
    ) -> Result<Tensor> {
        let total: usize = params.iter().map(|&p| self.t(p).numel()).sum();
        if total != v.len() {
            return Err(Error::ShapeMismatch {
                op: "grad_dot_v_backward",
                detail: format!("block has {total} parameters, v has {}", v.len()),
            });
        }
        let mut acc: Option<NodeId> = None;
        let mut offset = 0;
        for &p in params {
            self.check_id(p)?;
            let numel = self.t(p).numel();
            let shape = self.t(p).shape().to_vec();
            let g = grads.grad_node(p).ok_or_else(|| Error::ShapeMismatch {
                op: "grad_dot_v_backward",
                detail: format!("no gradient recorded for parameter node {}", p.0),
            })?;
            let v_slice = Tensor::new(shape, v[offset..offset + numel].to_vec())?;
            let vc = self.constant(v_slice)?;
            let prod = self.mul(g, vc)?;
            let term = self.sum_all(prod)?;
            acc = Some(match acc {
                Some(a) => self.add(a, term)?,
                None => term,
            });
            offset += numel;
        }
        let gv = acc.ok_or_else(|| Error::ShapeMismatch {
            op: "grad_dot_v_backward",
            detail: "empty parameter block".into(),
        })?;
        let hv_map = self.backward(gv)?;
        let mut out = Vec::with_capacity(total);
        for &p in params {
            match hv_map.grad_node(p) {
                Some(h) => out.extend_from_slice(self.t(h).elems()),
                None => out.extend(std::iter::repeat_n(0.0, self.t(p).numel())),
            }
        }
        Ok(Tensor::from_vec(out))
    }

    /// Re-execute every recorded op from the leaf values and check that the
    /// stored values are reproduced bit for bit.
    pub fn replay_consistent(&self) -> Result<bool> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = if node.inputs.is_empty() {
                node.value.clone()
            } else {
                let ins: Vec<&Tensor> = node.inputs.iter().map(|&id| &values[id.0]).collect();
                eval_op(&node.op, &ins)?
            };
            if v != node.value {
                return Ok(false);
            }
            values.push(v);
        }
        Ok(true)
    }
}

/// Pure re-evaluation of an op from input values (replay path).
fn eval_op(op: &Op, ins: &[&Tensor]) -> Result<Tensor> {
    let zip = |a: &Tensor, b: &Tensor, f: fn(f64, f64) -> f64| -> Result<Tensor> {
        let elems = a.elems().iter().zip(b.elems()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), elems)
    };
    match op {
        Op::Leaf => unreachable!("leaves replay from stored values"),
        Op::Add => zip(ins[0], ins[1], |x, y| x + y),
        Op::Sub => zip(ins[0], ins[1], |x, y| x - y),
        Op::Mul => zip(ins[0], ins[1], |x, y| x * y),
        Op::ScalarMul(c) => {
            let c = *c;
            Tensor::new(
                ins[0].shape().to_vec(),
                ins[0].elems().iter().map(|&x| c * x).collect(),
            )
        }
        Op::Recip => Tensor::new(
            ins[0].shape().to_vec(),
            ins[0].elems().iter().map(|&x| 1.0 / x).collect(),
        ),
        Op::Exp => Tensor::new(
            ins[0].shape().to_vec(),
            ins[0].elems().iter().map(|&x| x.exp()).collect(),
        ),
        Op::Ln => Tensor::new(
            ins[0].shape().to_vec(),
            ins[0].elems().iter().map(|&x| x.ln()).collect(),
        ),
        Op::Relu => Tensor::new(
            ins[0].shape().to_vec(),
            ins[0].elems().iter().map(|&x| x.max(0.0)).collect(),
        ),
        Op::MaskMul(mask) => Tensor::new(
            ins[0].shape().to_vec(),
            ins[0].elems().iter().zip(mask.iter()).map(|(&x, &m)| x * m).collect(),
        ),
        Op::Matmul => {
            let (sa, sb) = (ins[0].shape(), ins[1].shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            Tensor::new(vec![m, n], kernels::matmul(ins[0].elems(), ins[1].elems(), m, k, n))
        }
        Op::Transpose => {
            let s = ins[0].shape();
            Tensor::new(vec![s[1], s[0]], kernels::transpose(ins[0].elems(), s[0], s[1]))
        }
        Op::Reshape(shape) => Tensor::new(shape.clone(), ins[0].elems().to_vec()),
        Op::RowSum => {
            let s = ins[0].shape();
            let (m, n) = (s[0], s[1]);
            let src = ins[0].elems();
            Tensor::new(
                vec![m],
                (0..m).map(|i| src[i * n..(i + 1) * n].iter().sum()).collect(),
            )
        }
        Op::ColSum => {
            let s = ins[0].shape();
            let (m, n) = (s[0], s[1]);
            let src = ins[0].elems();
            let mut out = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    out[j] += src[i * n + j];
                }
            }
            Tensor::new(vec![n], out)
        }
        Op::BroadcastCols(n) => {
            let m = ins[0].numel();
            let mut out = Vec::with_capacity(m * n);
            for &v in ins[0].elems() {
                out.extend(std::iter::repeat_n(v, *n));
            }
            Tensor::new(vec![m, *n], out)
        }
        Op::BroadcastRows(m) => {
            let n = ins[0].numel();
            let mut out = Vec::with_capacity(m * n);
            for _ in 0..*m {
                out.extend_from_slice(ins[0].elems());
            }
            Tensor::new(vec![*m, n], out)
        }
        Op::SumAll => Ok(Tensor::scalar(ins[0].elems().iter().sum())),
        Op::BroadcastScalar(shape) => {
            let v = ins[0].scalar_value();
            let numel = shape.iter().product();
            Tensor::new(shape.clone(), vec![v; numel])
        }
        Op::GatherLabels(labels) => {
            let classes = ins[0].shape()[1];
            let src = ins[0].elems();
            Tensor::new(
                vec![labels.len()],
                labels.iter().enumerate().map(|(i, &l)| src[i * classes + l]).collect(),
            )
        }
        Op::ScatterLabels { labels, classes } => {
            let src = ins[0].elems();
            let mut out = vec![0.0; labels.len() * classes];
            for (i, &l) in labels.iter().enumerate() {
                out[i * classes + l] = src[i];
            }
            Tensor::new(vec![labels.len(), *classes], out)
        }
        Op::Conv2d(d) => Tensor::new(
            vec![d.batch, d.c_out, d.out_h(), d.out_w()],
            kernels::conv_forward(ins[0].elems(), ins[1].elems(), *d),
        ),
        Op::Conv2dGradInput(d) => Tensor::new(
            vec![d.batch, d.c_in, d.h, d.w],
            kernels::conv_grad_input(ins[0].elems(), ins[1].elems(), *d),
        ),
        Op::Conv2dGradKernel(d) => Tensor::new(
            vec![d.c_out, d.c_in, d.kh, d.kw],
            kernels::conv_grad_kernel(ins[0].elems(), ins[1].elems(), *d),
        ),
        Op::FakeQuant(q) => Tensor::new(
            ins[0].shape().to_vec(),
            ins[0].elems().iter().map(|&v| q.apply(v)).collect(),
        ),
    }
}
