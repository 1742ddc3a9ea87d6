//! Reverse-mode autodiff tape.
//!
//! A [`Graph`] owns every tensor produced during a forward pass. Each
//! operation validates its input shapes, computes its output eagerly, and
//! records what it needs for the backward pass (pooling argmaxes, batch-norm
//! statistics). [`Graph::backward`] then walks the tape in reverse from a
//! scalar node, accumulating gradients into every tensor on the path whose
//! ancestors require them. Nodes with no trainable ancestors are skipped
//! entirely, which is what makes frozen sub-networks free during training.

use super::ops;
use super::Tensor;
use crate::{Error, Real, Result};

/// Handle to a node in a [`Graph`]. Only meaningful for the graph that
/// produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Whether batch normalization uses batch statistics (training) or frozen
/// running statistics (evaluation).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// User-defined differentiable operation (used for the k-space
/// data-fidelity projection, which lives outside this module).
pub trait CustomOp<T: Real>: Send + Sync {
    /// Name used in error messages.
    fn name(&self) -> &str;
    /// Computes the output from the input tensors.
    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;
    /// Given the inputs, the forward output, and the output gradient,
    /// returns one gradient buffer per input (`None` for inputs that do
    /// not receive gradients).
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &[T],
    ) -> Result<Vec<Option<Vec<T>>>>;
}

/// Saved batch statistics for a training-mode batch-norm node.
struct BnSaved<T> {
    mean: Vec<T>,
    var: Vec<T>,
    inv_std: Vec<T>,
}

enum Op<T: Real> {
    Leaf,
    Relu,
    Add,
    Scale(T),
    Reshape,
    SumAll,
    Conv2d { k: usize, co: usize },
    ConvT2d { co: usize },
    MaxPool2 { argmax: Vec<u32> },
    Upsample2x,
    SoftmaxCh,
    BatchNorm { mode: BnMode, saved: Option<BnSaved<T>>, inv_std_eval: Vec<T> },
    ConcatCh,
    SqDiffSum { target: Vec<T> },
    NllOneHot { labels: Vec<u32>, floor: T },
    Custom(Box<dyn CustomOp<T>>),
}

struct Node<T: Real> {
    op: Op<T>,
    inputs: Vec<NodeId>,
    value: Tensor<T>,
    needs_grad: bool,
}

/// Tape of executed operations with eager forward evaluation.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Interprets a shape as `(batch, height, width, channels)`.
/// Rank-3 tensors are `[H, W, C]` with an implicit batch of one.
fn spatial_dims(shape: &[usize], context: &str) -> Result<(usize, usize, usize, usize)> {
    match shape[..] {
        [h, w, c] => Ok((1, h, w, c)),
        [b, h, w, c] => Ok((b, h, w, c)),
        _ => Err(Error::shape(context, "[H, W, C] or [B, H, W, C]", format!("{shape:?}"))),
    }
}

impl<T: Real> Graph<T> {
    /// Empty tape.
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// True when no nodes have been recorded.
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a tensor as a leaf node; it participates in gradient
    /// accumulation iff `t.requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor<T>) -> NodeId {
        let needs = t.requires_grad;
        self.push(Op::Leaf, vec![], t, needs)
    }

    /// Inserts a tensor as a non-differentiable constant.
    pub fn constant(&mut self, mut t: Tensor<T>) -> NodeId {
        t.requires_grad = false;
        self.push(Op::Leaf, vec![], t, false)
    }

    /// The forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of a node, if any backward pass reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].value.grad.as_deref()
    }

    /// Replaces a leaf's value in place (used to rebind inputs when timing
    /// repeated forwards); shape must match and the node must be a leaf.
    pub fn set_leaf(&mut self, id: NodeId, t: Tensor<T>) -> Result<()> {
        let node = &mut self.nodes[id.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::Invalid("set_leaf on a non-leaf node".into()));
        }
        if node.value.shape() != t.shape() {
            return Err(Error::shape(
                "set_leaf",
                format!("{:?}", node.value.shape()),
                format!("{:?}", t.shape()),
            ));
        }
        node.needs_grad = t.requires_grad;
        node.value = t;
        Ok(())
    }

    fn push(&mut self, op: Op<T>, inputs: Vec<NodeId>, value: Tensor<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            inputs,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn any_needs_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    fn check_id(&self, id: NodeId, context: &str) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(Error::Invalid(format!("{context}: node id out of range")));
        }
        Ok(())
    }

    // -- element-wise and structural ops ------------------------------------

    /// Element-wise `max(x, 0)`.
    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.map(|v| if v > T::zero() { v } else { T::zero() });
        let needs = self.nodes[x.0].needs_grad;
        self.push(Op::Relu, vec![x], v, needs)
    }

    /// Element-wise sum of two same-shaped tensors.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        if sa != sb {
            return Err(Error::shape("add", format!("{sa:?}"), format!("{sb:?}")));
        }
        let mut data = self.nodes[a.0].value.data().to_vec();
        ops::axpy_into(&mut data, self.nodes[b.0].value.data());
        let v = Tensor::new(sa.to_vec(), data)?;
        let needs = self.any_needs_grad(&[a, b]);
        Ok(self.push(Op::Add, vec![a, b], v, needs))
    }

    /// Multiplies every element by a compile-time-known constant.
    pub fn scale(&mut self, x: NodeId, alpha: T) -> NodeId {
        let v = self.nodes[x.0].value.map(|v| v * alpha);
        let needs = self.nodes[x.0].needs_grad;
        self.push(Op::Scale(alpha), vec![x], v, needs)
    }

    /// Reinterprets the data under a new shape with equal element count.
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let v = self.nodes[x.0].value.reshaped(shape)?;
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(Op::Reshape, vec![x], v, needs))
    }

    /// Sum of all elements, as a rank-0 scalar node.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let mut s = T::zero();
        for &v in self.nodes[x.0].value.data() {
            s = s + v;
        }
        let needs = self.nodes[x.0].needs_grad;
        self.push(Op::SumAll, vec![x], Tensor::scalar(s), needs)
    }

    // -- spatial ops ---------------------------------------------------------

    /// Same-size 2-D convolution with zero padding, stride 1.
    ///
    /// `x` is `[H,W,Cin]` or `[B,H,W,Cin]`, `w` is `[k,k,Cin,Cout]` with
    /// `k` one of 1 or 3, `b` is `[Cout]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let dims = spatial_dims(self.nodes[x.0].value.shape(), "conv2d input")?;
        let ws = self.nodes[w.0].value.shape();
        let (k, ci, co) = match ws[..] {
            [k0, k1, ci, co] if k0 == k1 && (k0 == 1 || k0 == 3) => (k0, ci, co),
            _ => {
                return Err(Error::shape(
                    "conv2d weights",
                    "[k, k, Cin, Cout] with k in {1, 3}",
                    format!("{ws:?}"),
                ))
            }
        };
        if ci != dims.3 {
            return Err(Error::shape(
                "conv2d",
                format!("input with {ci} channels"),
                format!("{} channels", dims.3),
            ));
        }
        let bs = self.nodes[b.0].value.shape();
        if bs != [co] {
            return Err(Error::shape("conv2d bias", format!("[{co}]"), format!("{bs:?}")));
        }
        let data = ops::conv2d_fwd(
            self.nodes[x.0].value.data(),
            dims,
            self.nodes[w.0].value.data(),
            k,
            co,
            self.nodes[b.0].value.data(),
        );
        let mut shape = self.nodes[x.0].value.shape().to_vec();
        *shape.last_mut().expect("spatial shape") = co;
        let v = Tensor::new(shape, data)?;
        let needs = self.any_needs_grad(&[x, w, b]);
        Ok(self.push(Op::Conv2d { k, co }, vec![x, w, b], v, needs))
    }

    /// Transposed 2-D convolution, 3x3 kernel, stride 2: doubles H and W.
    ///
    /// `x` is `[H,W,Cin]` or `[B,H,W,Cin]`, `w` is `[3,3,Cin,Cout]`,
    /// `b` is `[Cout]`.
    pub fn conv2d_transposed(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let dims = spatial_dims(self.nodes[x.0].value.shape(), "conv2d_transposed input")?;
        let ws = self.nodes[w.0].value.shape();
        let (ci, co) = match ws[..] {
            [3, 3, ci, co] => (ci, co),
            _ => {
                return Err(Error::shape(
                    "conv2d_transposed weights",
                    "[3, 3, Cin, Cout]",
                    format!("{ws:?}"),
                ))
            }
        };
        if ci != dims.3 {
            return Err(Error::shape(
                "conv2d_transposed",
                format!("input with {ci} channels"),
                format!("{} channels", dims.3),
            ));
        }
        let bs = self.nodes[b.0].value.shape();
        if bs != [co] {
            return Err(Error::shape(
                "conv2d_transposed bias",
                format!("[{co}]"),
                format!("{bs:?}"),
            ));
        }
        let data = ops::convt2d_fwd(
            self.nodes[x.0].value.data(),
            dims,
            self.nodes[w.0].value.data(),
            co,
            self.nodes[b.0].value.data(),
        );
        let shape = match self.nodes[x.0].value.shape()[..] {
            [h, w_, _] => vec![2 * h, 2 * w_, co],
            [b_, h, w_, _] => vec![b_, 2 * h, 2 * w_, co],
            _ => unreachable!("validated above"),
        };
        let v = Tensor::new(shape, data)?;
        let needs = self.any_needs_grad(&[x, w, b]);
        Ok(self.push(Op::ConvT2d { co }, vec![x, w, b], v, needs))
    }

    /// 2x2 max pooling with stride 2; requires even spatial dimensions.
    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let dims = spatial_dims(self.nodes[x.0].value.shape(), "maxpool2 input")?;
        let (_, h, w, _) = dims;
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                "maxpool2",
                "even, non-zero H and W",
                format!("H={h}, W={w}"),
            ));
        }
        let (data, argmax) = ops::maxpool2_fwd(self.nodes[x.0].value.data(), dims);
        let shape = match self.nodes[x.0].value.shape()[..] {
            [h, w, c] => vec![h / 2, w / 2, c],
            [b, h, w, c] => vec![b, h / 2, w / 2, c],
            _ => unreachable!("validated above"),
        };
        let v = Tensor::new(shape, data)?;
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(Op::MaxPool2 { argmax }, vec![x], v, needs))
    }

    /// Bilinear 2x upsampling with half-pixel sample centers and clamped
    /// borders; doubles H and W.
    pub fn upsample_bilinear2x(&mut self, x: NodeId) -> Result<NodeId> {
        let dims = spatial_dims(self.nodes[x.0].value.shape(), "upsample_bilinear2x input")?;
        if dims.1 == 0 || dims.2 == 0 {
            return Err(Error::shape(
                "upsample_bilinear2x",
                "non-zero H and W",
                format!("H={}, W={}", dims.1, dims.2),
            ));
        }
        let data = ops::upsample2x_fwd(self.nodes[x.0].value.data(), dims);
        let shape = match self.nodes[x.0].value.shape()[..] {
            [h, w, c] => vec![2 * h, 2 * w, c],
            [b, h, w, c] => vec![b, 2 * h, 2 * w, c],
            _ => unreachable!("validated above"),
        };
        let v = Tensor::new(shape, data)?;
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(Op::Upsample2x, vec![x], v, needs))
    }

    /// Softmax over the channel axis, per spatial position.
    pub fn softmax_channels(&mut self, x: NodeId) -> Result<NodeId> {
        let (_, _, _, c) = spatial_dims(self.nodes[x.0].value.shape(), "softmax_channels input")?;
        if c == 0 {
            return Err(Error::shape("softmax_channels", "C >= 1", "C=0".to_string()));
        }
        let data = ops::softmax_ch_fwd(self.nodes[x.0].value.data(), c);
        let v = Tensor::new(self.nodes[x.0].value.shape().to_vec(), data)?;
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(Op::SoftmaxCh, vec![x], v, needs))
    }

    // -- batch normalization --------------------------------------------------

    fn bn_check_params(&self, x: NodeId, ids: &[(NodeId, &str)], context: &str) -> Result<usize> {
        let (_, _, _, c) = spatial_dims(self.nodes[x.0].value.shape(), context)?;
        for &(id, name) in ids {
            let s = self.nodes[id.0].value.shape();
            if s != [c] {
                return Err(Error::shape(
                    format!("{context} {name}"),
                    format!("[{c}]"),
                    format!("{s:?}"),
                ));
            }
        }
        Ok(c)
    }

    /// Batch normalization using statistics of the current batch.
    ///
    /// Normalizes per channel over all batch and spatial positions, then
    /// applies `gamma * xhat + beta`. The batch mean/variance are retained
    /// on the node for the trainer's running-statistics update (see
    /// [`Graph::bn_batch_stats`]).
    pub fn batchnorm_train(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> Result<NodeId> {
        let c = self.bn_check_params(x, &[(gamma, "gamma"), (beta, "beta")], "batchnorm_train")?;
        let xv = self.nodes[x.0].value.data();
        let (mean, var) = ops::bn_stats(xv, c);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let data = ops::bn_apply(
            xv,
            c,
            &mean,
            &inv_std,
            self.nodes[gamma.0].value.data(),
            self.nodes[beta.0].value.data(),
        );
        let v = Tensor::new(self.nodes[x.0].value.shape().to_vec(), data)?;
        let needs = self.any_needs_grad(&[x, gamma, beta]);
        Ok(self.push(
            Op::BatchNorm {
                mode: BnMode::Train,
                saved: Some(BnSaved { mean, var, inv_std }),
                inv_std_eval: vec![],
            },
            vec![x, gamma, beta],
            v,
            needs,
        ))
    }

    /// Batch normalization using frozen running statistics.
    ///
    /// `mean` and `var` must be constant nodes; gradients never flow into
    /// them.
    pub fn batchnorm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: NodeId,
        var: NodeId,
        eps: T,
    ) -> Result<NodeId> {
        let c = self.bn_check_params(
            x,
            &[(gamma, "gamma"), (beta, "beta"), (mean, "mean"), (var, "var")],
            "batchnorm_eval",
        )?;
        if self.nodes[mean.0].needs_grad || self.nodes[var.0].needs_grad {
            return Err(Error::Invalid(
                "batchnorm_eval: running statistics must be constants, not trainable tensors".into(),
            ));
        }
        let inv_std: Vec<T> = self.nodes[var.0]
            .value
            .data()
            .iter()
            .map(|&v| T::one() / (v + eps).sqrt())
            .collect();
        let data = ops::bn_apply(
            self.nodes[x.0].value.data(),
            c,
            self.nodes[mean.0].value.data(),
            &inv_std,
            self.nodes[gamma.0].value.data(),
            self.nodes[beta.0].value.data(),
        );
        let v = Tensor::new(self.nodes[x.0].value.shape().to_vec(), data)?;
        let needs = self.any_needs_grad(&[x, gamma, beta]);
        Ok(self.push(
            Op::BatchNorm {
                mode: BnMode::Eval,
                saved: None,
                inv_std_eval: inv_std,
            },
            vec![x, gamma, beta, mean, var],
            v,
            needs,
        ))
    }

    /// Batch mean and variance computed by a [`Graph::batchnorm_train`]
    /// node, for running-statistics updates.
    pub fn bn_batch_stats(&self, id: NodeId) -> Result<(&[T], &[T])> {
        match &self.nodes[id.0].op {
            Op::BatchNorm { saved: Some(s), .. } => Ok((&s.mean, &s.var)),
            _ => Err(Error::Invalid(
                "bn_batch_stats: node is not a training-mode batch norm".into(),
            )),
        }
    }

    // -- concatenation ---------------------------------------------------------

    /// Concatenates tensors along the channel axis. All inputs must share
    /// batch and spatial dimensions; zero-channel inputs are allowed and
    /// contribute nothing.
    pub fn concat_channels(&mut self, xs: &[NodeId]) -> Result<NodeId> {
        if xs.is_empty() {
            return Err(Error::Invalid("concat_channels: no inputs".into()));
        }
        for &x in xs {
            self.check_id(x, "concat_channels")?;
        }
        let first = self.nodes[xs[0].0].value.shape();
        let rank = first.len();
        let (b0, h0, w0, _) = spatial_dims(first, "concat_channels input")?;
        let mut c_total = 0usize;
        for &x in xs {
            let s = self.nodes[x.0].value.shape();
            let (b, h, w, c) = spatial_dims(s, "concat_channels input")?;
            if s.len() != rank || (b, h, w) != (b0, h0, w0) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("{first:?} up to channels"),
                    format!("{s:?}"),
                ));
            }
            c_total += c;
        }
        let rows = b0 * h0 * w0;
        let mut data = Vec::with_capacity(rows * c_total);
        for row in 0..rows {
            for &x in xs {
                let t = &self.nodes[x.0].value;
                let c = *t.shape().last().expect("spatial rank");
                data.extend_from_slice(&t.data()[row * c..(row + 1) * c]);
            }
        }
        let mut shape = first.to_vec();
        *shape.last_mut().expect("spatial rank") = c_total;
        let v = Tensor::new(shape, data)?;
        let needs = self.any_needs_grad(xs);
        Ok(self.push(Op::ConcatCh, xs.to_vec(), v, needs))
    }

    // -- losses ------------------------------------------------------------------

    /// Sum of squared differences against a fixed target:
    /// `sum_i (x_i - t_i)^2`, as a scalar node.
    pub fn sq_diff_sum(&mut self, x: NodeId, target: &Tensor<T>) -> Result<NodeId> {
        if self.nodes[x.0].value.shape() != target.shape() {
            return Err(Error::shape(
                "sq_diff_sum",
                format!("{:?}", self.nodes[x.0].value.shape()),
                format!("{:?}", target.shape()),
            ));
        }
        let mut s = T::zero();
        for (&a, &t) in self.nodes[x.0].value.data().iter().zip(target.data()) {
            let d = a - t;
            s = s + d * d;
        }
        let needs = self.nodes[x.0].needs_grad;
        Ok(self.push(
            Op::SqDiffSum {
                target: target.data().to_vec(),
            },
            vec![x],
            Tensor::scalar(s),
            needs,
        ))
    }

    /// Pixel-wise negative log likelihood of one-hot labels under channel
    /// probabilities: `-sum_pixels ln(max(p[label], floor))`, as a scalar.
    ///
    /// `probs` is `[H,W,C]` or `[B,H,W,C]` (e.g. a softmax output);
    /// `labels` has one entry per spatial position, each `< C`. The floor
    /// keeps the logarithm finite when a probability underflows.
    pub fn nll_one_hot(&mut self, probs: NodeId, labels: &[u32], floor: T) -> Result<NodeId> {
        let (b, h, w, c) = spatial_dims(self.nodes[probs.0].value.shape(), "nll_one_hot input")?;
        if labels.len() != b * h * w {
            return Err(Error::shape(
                "nll_one_hot labels",
                format!("{} entries", b * h * w),
                format!("{}", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= c) {
            return Err(Error::Invalid(format!(
                "nll_one_hot: label {bad} out of range for {c} classes"
            )));
        }
        if floor <= T::zero() {
            return Err(Error::Invalid("nll_one_hot: floor must be positive".into()));
        }
        let p = self.nodes[probs.0].value.data();
        let mut s = T::zero();
        for (row, &l) in labels.iter().enumerate() {
            let v = p[row * c + l as usize];
            let v = if v > floor { v } else { floor };
            s = s - v.ln();
        }
        let needs = self.nodes[probs.0].needs_grad;
        Ok(self.push(
            Op::NllOneHot {
                labels: labels.to_vec(),
                floor,
            },
            vec![probs],
            Tensor::scalar(s),
            needs,
        ))
    }

    // -- custom ops -----------------------------------------------------------------

    /// Records a user-defined operation; its forward runs immediately.
    pub fn apply_custom(&mut self, op: Box<dyn CustomOp<T>>, inputs: &[NodeId]) -> Result<NodeId> {
        for &x in inputs {
            self.check_id(x, op.name())?;
        }
        let refs: Vec<&Tensor<T>> = inputs.iter().map(|id| &self.nodes[id.0].value).collect();
        let v = op.forward(&refs)?;
        let needs = self.any_needs_grad(inputs);
        Ok(self.push(Op::Custom(op), inputs.to_vec(), v, needs))
    }

    // -- backward -----------------------------------------------------------------

    /// Reverse pass from a scalar node.
    ///
    /// Gradients are *added* to each reached tensor's `grad` buffer, so a
    /// second identical backward pass exactly doubles every gradient.
    /// Nodes whose ancestors contain no gradient-requiring tensors are
    /// skipped. Rejects non-scalar roots.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.check_id(loss, "backward")?;
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Invalid(format!(
                "backward requires a scalar node, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut ws: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        ws[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                ws[i] = None;
                continue;
            }
            let Some(g) = ws[i].take() else { continue };
            for (j, gj) in self.input_grads(i, &g)? {
                match &mut ws[j] {
                    Some(acc) => ops::axpy_into(acc, &gj),
                    slot @ None => *slot = Some(gj),
                }
            }
            let node = &mut self.nodes[i];
            match &mut node.value.grad {
                Some(acc) => ops::axpy_into(acc, &g),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    /// Per-input gradient contributions for node `i`, given its output
    /// gradient. Inputs that do not need gradients are omitted.
    fn input_grads(&self, i: usize, g: &[T]) -> Result<Vec<(usize, Vec<T>)>> {
        let node = &self.nodes[i];
        let needs = |id: NodeId| self.nodes[id.0].needs_grad;
        let ins = &node.inputs;
        let mut out: Vec<(usize, Vec<T>)> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Relu => {
                if needs(ins[0]) {
                    let y = node.value.data();
                    let dx = g
                        .iter()
                        .zip(y)
                        .map(|(&gv, &yv)| if yv > T::zero() { gv } else { T::zero() })
                        .collect();
                    out.push((ins[0].0, dx));
                }
            }
            Op::Add => {
                for &x in ins {
                    if needs(x) {
                        out.push((x.0, g.to_vec()));
                    }
                }
            }
            Op::Scale(alpha) => {
                if needs(ins[0]) {
                    out.push((ins[0].0, g.iter().map(|&v| v * *alpha).collect()));
                }
            }
            Op::Reshape => {
                if needs(ins[0]) {
                    out.push((ins[0].0, g.to_vec()));
                }
            }
            Op::SumAll => {
                if needs(ins[0]) {
                    out.push((ins[0].0, vec![g[0]; self.nodes[ins[0].0].value.len()]));
                }
            }
            Op::Conv2d { k, co } => {
                let x = &self.nodes[ins[0].0].value;
                let dims = spatial_dims(x.shape(), "conv2d backward")?;
                let (dx, dw, db) = ops::conv2d_bwd(
                    x.data(),
                    dims,
                    self.nodes[ins[1].0].value.data(),
                    *k,
                    *co,
                    g,
                    needs(ins[0]),
                    needs(ins[1]),
                    needs(ins[2]),
                );
                if let Some(dx) = dx {
                    out.push((ins[0].0, dx));
                }
                if let Some(dw) = dw {
                    out.push((ins[1].0, dw));
                }
                if let Some(db) = db {
                    out.push((ins[2].0, db));
                }
            }
            Op::ConvT2d { co } => {
                let x = &self.nodes[ins[0].0].value;
                let dims = spatial_dims(x.shape(), "conv2d_transposed backward")?;
                let (dx, dw, db) = ops::convt2d_bwd(
                    x.data(),
                    dims,
                    self.nodes[ins[1].0].value.data(),
                    *co,
                    g,
                    needs(ins[0]),
                    needs(ins[1]),
                    needs(ins[2]),
                );
                if let Some(dx) = dx {
                    out.push((ins[0].0, dx));
                }
                if let Some(dw) = dw {
                    out.push((ins[1].0, dw));
                }
                if let Some(db) = db {
                    out.push((ins[2].0, db));
                }
            }
            Op::MaxPool2 { argmax } => {
                if needs(ins[0]) {
                    out.push((
                        ins[0].0,
                        ops::maxpool2_bwd(self.nodes[ins[0].0].value.len(), argmax, g),
                    ));
                }
            }
            Op::Upsample2x => {
                if needs(ins[0]) {
                    let dims = spatial_dims(self.nodes[ins[0].0].value.shape(), "upsample backward")?;
                    out.push((ins[0].0, ops::upsample2x_bwd(dims, g)));
                }
            }
            Op::SoftmaxCh => {
                if needs(ins[0]) {
                    let c = *node.value.shape().last().expect("softmax rank");
                    out.push((ins[0].0, ops::softmax_ch_bwd(node.value.data(), c, g)));
                }
            }
            Op::BatchNorm { mode, saved, inv_std_eval } => {
                let x = &self.nodes[ins[0].0].value;
                let c = *x.shape().last().expect("bn rank");
                let gamma = self.nodes[ins[1].0].value.data();
                let (dx, dgamma, dbeta) = match mode {
                    BnMode::Train => {
                        let s = saved.as_ref().expect("train-mode stats saved at forward");
                        ops::bn_bwd_train(x.data(), c, &s.mean, &s.inv_std, gamma, g, needs(ins[0]))
                    }
                    BnMode::Eval => {
                        let mean = self.nodes[ins[3].0].value.data();
                        ops::bn_bwd_eval(x.data(), c, mean, inv_std_eval, gamma, g, needs(ins[0]))
                    }
                };
                if let Some(dx) = dx {
                    out.push((ins[0].0, dx));
                }
                if needs(ins[1]) {
                    out.push((ins[1].0, dgamma));
                }
                if needs(ins[2]) {
                    out.push((ins[2].0, dbeta));
                }
            }
            Op::ConcatCh => {
                let cs: Vec<usize> = ins
                    .iter()
                    .map(|x| *self.nodes[x.0].value.shape().last().expect("spatial rank"))
                    .collect();
                let c_total: usize = cs.iter().sum();
                let rows = if c_total == 0 { 0 } else { g.len() / c_total };
                for (slot, &x) in ins.iter().enumerate() {
                    if !needs(x) {
                        continue;
                    }
                    let c = cs[slot];
                    let offset: usize = cs[..slot].iter().sum();
                    let mut dx = Vec::with_capacity(rows * c);
                    for row in 0..rows {
                        let base = row * c_total + offset;
                        dx.extend_from_slice(&g[base..base + c]);
                    }
                    out.push((x.0, dx));
                }
            }
            Op::SqDiffSum { target } => {
                if needs(ins[0]) {
                    let two_g = T::from_f64(2.0) * g[0];
                    let dx = self.nodes[ins[0].0]
                        .value
                        .data()
                        .iter()
                        .zip(target)
                        .map(|(&a, &t)| two_g * (a - t))
                        .collect();
                    out.push((ins[0].0, dx));
                }
            }
            Op::NllOneHot { labels, floor } => {
                if needs(ins[0]) {
                    let p = self.nodes[ins[0].0].value.data();
                    let c = *self.nodes[ins[0].0].value.shape().last().expect("rank");
                    let mut dx = vec![T::zero(); p.len()];
                    for (row, &l) in labels.iter().enumerate() {
                        let idx = row * c + l as usize;
                        // Below the floor the clamped log is constant.
                        if p[idx] > *floor {
                            dx[idx] = -g[0] / p[idx];
                        }
                    }
                    out.push((ins[0].0, dx));
                }
            }
            Op::Custom(op) => {
                let refs: Vec<&Tensor<T>> = ins.iter().map(|id| &self.nodes[id.0].value).collect();
                let grads = op.backward(&refs, &node.value, g)?;
                if grads.len() != ins.len() {
                    return Err(Error::Invalid(format!(
                        "custom op {}: backward returned {} gradients for {} inputs",
                        op.name(),
                        grads.len(),
                        ins.len()
                    )));
                }
                for (x, gx) in ins.iter().zip(grads) {
                    if let Some(gx) = gx {
                        if needs(*x) {
                            if gx.len() != self.nodes[x.0].value.len() {
                                return Err(Error::Invalid(format!(
                                    "custom op {}: gradient length mismatch",
                                    op.name()
                                )));
                            }
                            out.push((x.0, gx));
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}
