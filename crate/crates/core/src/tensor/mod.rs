//! Dense f64 tensors and a reverse-mode differentiation tape.
//!
//! Every learnable computation in the crate is expressed through [`Tape`]
//! operations. Tensors are row-major, 64-bit, with explicit shapes; the only
//! implicit broadcast is the per-channel bias add. Backward rules live in
//! [`kernels`] next to their forward counterparts so each pair can be audited
//! in one place.

mod kernels;

pub mod gradcheck;

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

/// Dense N-dimensional array of 64-bit floats in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![0.0; n])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1], vec![value])
    }

    /// Standard-normal entries drawn from `rng` in index order.
    pub fn randn<R: Rng>(shape: &[usize], rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Tensor::new(shape.to_vec(), data)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    /// Surfaces the NaN/Inf error state.
    pub fn validate(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite { context: context.to_string() })
        }
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

/// One recorded primitive with its backward rule selector.
///
/// Input ids always refer to earlier tape entries, so a single reverse sweep
/// visits every node after all of its consumers.
#[derive(Debug, Clone)]
pub(crate) enum Node {
    Leaf,
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Div { a: TensorId, b: TensorId },
    Scale { a: TensorId, c: f64 },
    AddConst { a: TensorId },
    /// Tensor times a scalar ([1]-shaped) tensor.
    MulS { a: TensorId, s: TensorId },
    /// Tensor plus a scalar ([1]-shaped) tensor.
    AddS { a: TensorId, s: TensorId },
    Abs { a: TensorId },
    Silu { a: TensorId },
    Sum { a: TensorId },
    Conv2d { x: TensorId, w: TensorId, bias: TensorId, stride: usize, pad: usize },
    TemporalConv { x: TensorId, w: TensorId },
    Down2 { x: TensorId },
    Up2 { x: TensorId },
    ChannelNorm { x: TensorId, gamma: TensorId, beta: TensorId, eps: f64 },
    ConcatC { parts: Vec<TensorId> },
    ConcatF { parts: Vec<TensorId> },
    SliceF { x: TensorId, start: usize },
    AddChannelBias { x: TensorId, bias: TensorId },
    Reshape { x: TensorId },
    SelectRow { table: TensorId, row: usize },
    DiffH { x: TensorId },
    DiffW { x: TensorId },
}

/// Reverse-mode tape: an append-only record of primitive operations.
///
/// The tape owns every produced tensor; ops return [`TensorId`] handles.
/// With `grad_enabled == false` (see [`Tape::no_grad`]) forward values are
/// computed but nothing is recorded, which keeps inference memory flat.
pub struct Tape {
    vals: Vec<Tensor>,
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { vals: Vec::new(), nodes: Vec::new(), grad_enabled: true }
    }

    /// A tape that evaluates forward passes without recording backward rules.
    pub fn no_grad() -> Self {
        Tape { vals: Vec::new(), nodes: Vec::new(), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    /// Insert a tensor as a leaf (an input or parameter).
    pub fn leaf(&mut self, t: Tensor) -> TensorId {
        self.push(t, Node::Leaf)
    }

    /// Insert a non-differentiable constant.
    pub fn constant(&mut self, t: Tensor) -> TensorId {
        let mut t = t;
        t.requires_grad = false;
        self.push(t, Node::Leaf)
    }

    /// Copy a value, severing it from the graph: no gradient flows through.
    pub fn detach(&mut self, x: TensorId) -> TensorId {
        let mut t = self.vals[x.0].clone();
        t.requires_grad = false;
        t.grad = None;
        self.push(t, Node::Leaf)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.vals[id.0]
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.vals[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.vals[id.0].data
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.vals[id.0].grad.as_deref()
    }

    /// Clone the value out of the tape as a standalone tensor.
    pub fn extract(&self, id: TensorId) -> Tensor {
        let v = &self.vals[id.0];
        Tensor::new(v.shape.clone(), v.data.clone())
    }

    fn push(&mut self, t: Tensor, node: Node) -> TensorId {
        let id = TensorId(self.vals.len());
        self.vals.push(t);
        self.nodes.push(if self.grad_enabled { node } else { Node::Leaf });
        id
    }

    fn out(&mut self, shape: Vec<usize>, data: Vec<f64>, node: Node) -> TensorId {
        let mut t = Tensor::new(shape, data);
        // Reachability: an op output needs a gradient iff any input does.
        t.requires_grad = self.grad_enabled
            && kernels::node_inputs(&node).iter().any(|id| self.vals[id.0].requires_grad);
        self.push(t, node)
    }

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.vals[a.0].shape == self.vals[b.0].shape {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                op,
                lhs: self.vals[a.0].shape.clone(),
                rhs: self.vals[b.0].shape.clone(),
            })
        }
    }

    // ── Elementwise ─────────────────────────────────────────────────

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("add", a, b)?;
        let data = kernels::zip(&self.vals[a.0].data, &self.vals[b.0].data, |x, y| x + y);
        Ok(self.out(self.vals[a.0].shape.clone(), data, Node::Add { a, b }))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("sub", a, b)?;
        let data = kernels::zip(&self.vals[a.0].data, &self.vals[b.0].data, |x, y| x - y);
        Ok(self.out(self.vals[a.0].shape.clone(), data, Node::Sub { a, b }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("mul", a, b)?;
        let data = kernels::zip(&self.vals[a.0].data, &self.vals[b.0].data, |x, y| x * y);
        Ok(self.out(self.vals[a.0].shape.clone(), data, Node::Mul { a, b }))
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("div", a, b)?;
        let data = kernels::zip(&self.vals[a.0].data, &self.vals[b.0].data, |x, y| x / y);
        Ok(self.out(self.vals[a.0].shape.clone(), data, Node::Div { a, b }))
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let data = self.vals[a.0].data.iter().map(|x| x * c).collect();
        self.out(self.vals[a.0].shape.clone(), data, Node::Scale { a, c })
    }

    pub fn add_const(&mut self, a: TensorId, c: f64) -> TensorId {
        let data = self.vals[a.0].data.iter().map(|x| x + c).collect();
        self.out(self.vals[a.0].shape.clone(), data, Node::AddConst { a })
    }

    /// Multiply a tensor by a `[1]`-shaped scalar tensor.
    pub fn mul_scalar(&mut self, a: TensorId, s: TensorId) -> Result<TensorId> {
        self.expect_scalar("mul_scalar", s)?;
        let sv = self.vals[s.0].data[0];
        let data = self.vals[a.0].data.iter().map(|x| x * sv).collect();
        Ok(self.out(self.vals[a.0].shape.clone(), data, Node::MulS { a, s }))
    }

    /// Add a `[1]`-shaped scalar tensor to every element.
    pub fn add_scalar(&mut self, a: TensorId, s: TensorId) -> Result<TensorId> {
        self.expect_scalar("add_scalar", s)?;
        let sv = self.vals[s.0].data[0];
        let data = self.vals[a.0].data.iter().map(|x| x + sv).collect();
        Ok(self.out(self.vals[a.0].shape.clone(), data, Node::AddS { a, s }))
    }

    pub fn abs(&mut self, a: TensorId) -> TensorId {
        let data = self.vals[a.0].data.iter().map(|x| x.abs()).collect();
        self.out(self.vals[a.0].shape.clone(), data, Node::Abs { a })
    }

    pub fn silu(&mut self, a: TensorId) -> TensorId {
        let data = self.vals[a.0].data.iter().map(|&x| kernels::silu(x)).collect();
        self.out(self.vals[a.0].shape.clone(), data, Node::Silu { a })
    }

    // ── Reductions ──────────────────────────────────────────────────

    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.vals[a.0].data.iter().sum();
        self.out(vec![1], vec![s], Node::Sum { a })
    }

    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let n = self.vals[a.0].numel() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    // ── Structured ops ──────────────────────────────────────────────

    /// 2D cross-correlation over `[B,Cin,H,W]` with kernel `[Cout,Cin,k,k]`.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        bias: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        let (shape, data) = kernels::conv2d_forward(
            &self.vals[x.0],
            &self.vals[w.0],
            &self.vals[bias.0],
            stride,
            pad,
        )?;
        Ok(self.out(shape, data, Node::Conv2d { x, w, bias, stride, pad }))
    }

    /// Depthwise convolution along the frame axis of `[M,C,H,W]`, reflect-padded,
    /// with weights `[C,k]` (k odd). Mixes information across frames only.
    pub fn temporal_conv(&mut self, x: TensorId, w: TensorId) -> Result<TensorId> {
        let (shape, data) = kernels::temporal_conv_forward(&self.vals[x.0], &self.vals[w.0])?;
        Ok(self.out(shape, data, Node::TemporalConv { x, w }))
    }

    /// 2x2 mean pooling of `[M,C,H,W]`; spatial extents must be even.
    pub fn down2(&mut self, x: TensorId) -> Result<TensorId> {
        let (shape, data) = kernels::down2_forward(&self.vals[x.0])?;
        Ok(self.out(shape, data, Node::Down2 { x }))
    }

    /// Nearest-neighbor 2x upsampling of `[M,C,H,W]`.
    pub fn up2(&mut self, x: TensorId) -> Result<TensorId> {
        let (shape, data) = kernels::up2_forward(&self.vals[x.0])?;
        Ok(self.out(shape, data, Node::Up2 { x }))
    }

    /// Per-(sample, channel) mean-0/var-1 over the spatial extent with a
    /// learned per-channel affine.
    pub fn channel_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let (shape, data) = kernels::channel_norm_forward(
            &self.vals[x.0],
            &self.vals[gamma.0],
            &self.vals[beta.0],
            eps,
        )?;
        Ok(self.out(shape, data, Node::ChannelNorm { x, gamma, beta, eps }))
    }

    /// Concatenate `[M,C_i,H,W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        let vals: Vec<&Tensor> = parts.iter().map(|p| &self.vals[p.0]).collect();
        let (shape, data) = kernels::concat_channels_forward(&vals)?;
        Ok(self.out(shape, data, Node::ConcatC { parts: parts.to_vec() }))
    }

    /// Concatenate along axis 0 (the frame axis).
    pub fn concat_frames(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        let vals: Vec<&Tensor> = parts.iter().map(|p| &self.vals[p.0]).collect();
        let (shape, data) = kernels::concat_frames_forward(&vals)?;
        Ok(self.out(shape, data, Node::ConcatF { parts: parts.to_vec() }))
    }

    /// Take frames `start..start+len` along axis 0.
    pub fn slice_frames(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (shape, data) = kernels::slice_frames_forward(&self.vals[x.0], start, len)?;
        Ok(self.out(shape, data, Node::SliceF { x, start }))
    }

    /// Add a `[C]` bias to every spatial position of `[M,C,H,W]`.
    pub fn add_channel_bias(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (shape, data) = kernels::add_channel_bias_forward(&self.vals[x.0], &self.vals[bias.0])?;
        Ok(self.out(shape, data, Node::AddChannelBias { x, bias }))
    }

    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != self.vals[x.0].numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.vals[x.0].shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.vals[x.0].data.clone();
        Ok(self.out(shape.to_vec(), data, Node::Reshape { x }))
    }

    /// Select row `row` of a `[R,D]` table; the embedding-lookup primitive.
    pub fn select_row(&mut self, table: TensorId, row: usize) -> Result<TensorId> {
        let t = &self.vals[table.0];
        if t.shape.len() != 2 || row >= t.shape[0] {
            return Err(Error::invalid(
                "select_row",
                format!("row {} of table shape {:?}", row, t.shape),
            ));
        }
        let d = t.shape[1];
        let data = t.data[row * d..(row + 1) * d].to_vec();
        Ok(self.out(vec![d], data, Node::SelectRow { table, row }))
    }

    /// Forward difference along H: `out[.., i, :] = x[.., i+1, :] - x[.., i, :]`.
    pub fn diff_h(&mut self, x: TensorId) -> Result<TensorId> {
        let (shape, data) = kernels::diff_h_forward(&self.vals[x.0])?;
        Ok(self.out(shape, data, Node::DiffH { x }))
    }

    /// Forward difference along W.
    pub fn diff_w(&mut self, x: TensorId) -> Result<TensorId> {
        let (shape, data) = kernels::diff_w_forward(&self.vals[x.0])?;
        Ok(self.out(shape, data, Node::DiffW { x }))
    }

    fn expect_scalar(&self, op: &'static str, s: TensorId) -> Result<()> {
        if self.vals[s.0].numel() == 1 {
            Ok(())
        } else {
            Err(Error::invalid(op, format!("expected scalar, got shape {:?}", self.vals[s.0].shape)))
        }
    }

    // ── Backward ────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Every tensor reachable from `loss`
    /// receives `d loss / d tensor` in its `grad` field; repeated calls
    /// accumulate.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.is_empty() {
            return Err(Error::invalid("backward", "empty tape"));
        }
        if !self.grad_enabled {
            return Err(Error::invalid("backward", "tape was created with no_grad"));
        }
        if self.vals[loss.0].numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.vals[loss.0].shape),
            ));
        }

        let n = loss.0 + 1;
        let mut grads: Vec<Vec<f64>> = (0..n).map(|i| vec![0.0; self.vals[i].numel()]).collect();
        grads[loss.0][0] = 1.0;

        for i in (0..n).rev() {
            if matches!(self.nodes[i], Node::Leaf) || !self.vals[i].requires_grad {
                continue;
            }
            if grads[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = std::mem::take(&mut grads[i]);
            kernels::backward_node(&self.nodes[i], &self.vals, &g, &mut grads);
            grads[i] = g;
        }

        for i in 0..n {
            let v = &mut self.vals[i];
            if matches!(self.nodes[i], Node::Leaf) && v.requires_grad {
                match v.grad.as_mut() {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&grads[i]) {
                            *a += g;
                        }
                    }
                    None => v.grad = Some(std::mem::take(&mut grads[i])),
                }
            }
        }
        Ok(())
    }
}
