//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Each forward op appends a node holding its output value and enough saved
//! context for the backward rule. Nodes reference only earlier nodes, so
//! creation order is a topological order and [`Tape::backward`] walks it in
//! reverse. Gradients accumulate by summation when a node feeds several
//! consumers. A tape drives exactly one backward pass; a second call is an
//! error until a new forward pass is built.

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{fmt_shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        kernels: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    },
    MaxPool2x2 {
        input: NodeId,
        argmax: Vec<u32>,
    },
    GlobalAvgPool {
        input: NodeId,
    },
    Dense {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Relu {
        input: NodeId,
    },
    Flatten {
        input: NodeId,
    },
    Add {
        lhs: NodeId,
        rhs: NodeId,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
    SelectLogit {
        logits: NodeId,
        row: usize,
        class: usize,
    },
    SumAll {
        input: NodeId,
    },
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f32>,
    grad: Option<Vec<f32>>,
    needs_grad: bool,
}

/// Forward tape plus backward driver.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    conv_kernel_grad_fault: f32,
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
            conv_kernel_grad_fault: 1.0,
        }
    }

    /// Multiply all convolution kernel gradients by `scale`. Used to verify
    /// that gradient checking detects a broken backward rule; leave at 1.0
    /// for correct behavior.
    #[doc(hidden)]
    pub fn inject_conv_kernel_grad_fault(&mut self, scale: f32) {
        self.conv_kernel_grad_fault = scale;
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f32>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            shape,
            value,
            grad: None,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// Register an input or parameter tensor as a leaf.
    pub fn leaf(&mut self, tensor: &Tensor, requires_grad: bool) -> NodeId {
        self.push(
            Op::Leaf,
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            requires_grad,
        )
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: NodeId) -> &[f32] {
        &self.nodes[id.0].value
    }

    /// Gradient of the node, if backward reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Force gradient retention for an intermediate activation (e.g. the
    /// feature maps consumed by Grad-CAM). Must be called before the node is
    /// used downstream.
    pub fn retain_grad(&mut self, id: NodeId) {
        self.nodes[id.0].needs_grad = true;
    }

    /// 3x3 cross-correlation with bias.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernels: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let (bsz, cin, h, w) = dims4(self, input, "conv2d input")?;
        let kshape = self.shape(kernels);
        let (cout, kcin, kh, kw) = match *kshape {
            [a, b, c, d] => (a, b, c, d),
            _ => {
                return Err(Error::shape(
                    "conv2d kernels",
                    "[cout, cin, 3, 3]",
                    fmt_shape(kshape),
                ))
            }
        };
        if (kh, kw) != (3, 3) {
            return Err(Error::Config(format!(
                "conv2d supports only 3x3 kernels, got {kh}x{kw}"
            )));
        }
        if kcin != cin {
            return Err(Error::shape(
                "conv2d kernels",
                format!("cin = {cin}"),
                format!("cin = {kcin}"),
            ));
        }
        if self.shape(bias) != [cout] {
            return Err(Error::shape(
                "conv2d bias",
                format!("[{cout}]"),
                fmt_shape(self.shape(bias)),
            ));
        }
        let oh = ops::conv2d_out_extent(h, stride, padding).ok_or_else(|| {
            Error::Config(format!(
                "conv2d output height is not a positive integer for H={h}, stride={stride}, padding={padding}"
            ))
        })?;
        let ow = ops::conv2d_out_extent(w, stride, padding).ok_or_else(|| {
            Error::Config(format!(
                "conv2d output width is not a positive integer for W={w}, stride={stride}, padding={padding}"
            ))
        })?;

        let mut out = vec![0.0f32; bsz * cout * oh * ow];
        ops::conv2d_forward(
            self.value(input),
            bsz,
            cin,
            h,
            w,
            self.value(kernels),
            cout,
            self.value(bias),
            stride,
            padding,
            &mut out,
            oh,
            ow,
        );
        let needs = self.needs(&[input, kernels, bias]);
        Ok(self.push(
            Op::Conv2d {
                input,
                kernels,
                bias,
                stride,
                padding,
            },
            vec![bsz, cout, oh, ow],
            out,
            needs,
        ))
    }

    /// 2x2 max pooling with stride 2. Spatial extents must be even.
    pub fn maxpool2x2(&mut self, input: NodeId) -> Result<NodeId> {
        let (bsz, c, h, w) = dims4(self, input, "maxpool2x2 input")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Config(format!(
                "maxpool2x2 requires even spatial extents, got {h}x{w}"
            )));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0f32; bsz * c * oh * ow];
        let mut argmax = Vec::new();
        ops::maxpool2x2_forward(self.value(input), bsz, c, h, w, &mut out, &mut argmax);
        let needs = self.needs(&[input]);
        Ok(self.push(
            Op::MaxPool2x2 { input, argmax },
            vec![bsz, c, oh, ow],
            out,
            needs,
        ))
    }

    /// Spatial mean per channel: [B, C, H, W] -> [B, C].
    pub fn global_avg_pool(&mut self, input: NodeId) -> Result<NodeId> {
        let (bsz, c, h, w) = dims4(self, input, "global_avg_pool input")?;
        let mut out = vec![0.0f32; bsz * c];
        ops::global_avg_pool_forward(self.value(input), bsz, c, h * w, &mut out);
        let needs = self.needs(&[input]);
        Ok(self.push(Op::GlobalAvgPool { input }, vec![bsz, c], out, needs))
    }

    /// Affine map: input [B, N], weight [M, N], bias [M] -> [B, M].
    pub fn dense(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let (bsz, n) = dims2(self, input, "dense input")?;
        let (m, wn) = dims2(self, weight, "dense weight")?;
        if wn != n {
            return Err(Error::shape(
                "dense weight",
                format!("[m, {n}]"),
                fmt_shape(self.shape(weight)),
            ));
        }
        if self.shape(bias) != [m] {
            return Err(Error::shape(
                "dense bias",
                format!("[{m}]"),
                fmt_shape(self.shape(bias)),
            ));
        }
        let mut out = vec![0.0f32; bsz * m];
        ops::dense_forward(
            self.value(input),
            bsz,
            n,
            self.value(weight),
            m,
            self.value(bias),
            &mut out,
        );
        let needs = self.needs(&[input, weight, bias]);
        Ok(self.push(
            Op::Dense {
                input,
                weight,
                bias,
            },
            vec![bsz, m],
            out,
            needs,
        ))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let mut out = vec![0.0f32; self.value(input).len()];
        ops::relu_forward(self.value(input), &mut out);
        let shape = self.shape(input).to_vec();
        let needs = self.needs(&[input]);
        self.push(Op::Relu { input }, shape, out, needs)
    }

    /// [B, C, H, W] -> [B, C*H*W].
    pub fn flatten(&mut self, input: NodeId) -> Result<NodeId> {
        let (bsz, c, h, w) = dims4(self, input, "flatten input")?;
        let out = self.value(input).to_vec();
        let needs = self.needs(&[input]);
        Ok(self.push(Op::Flatten { input }, vec![bsz, c * h * w], out, needs))
    }

    /// Elementwise sum of two same-shaped nodes.
    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        if self.shape(lhs) != self.shape(rhs) {
            return Err(Error::shape(
                "add",
                fmt_shape(self.shape(lhs)),
                fmt_shape(self.shape(rhs)),
            ));
        }
        let out: Vec<f32> = self
            .value(lhs)
            .iter()
            .zip(self.value(rhs))
            .map(|(a, b)| a + b)
            .collect();
        let shape = self.shape(lhs).to_vec();
        let needs = self.needs(&[lhs, rhs]);
        Ok(self.push(Op::Add { lhs, rhs }, shape, out, needs))
    }

    /// Mean cross-entropy over the batch plus the softmax probabilities.
    /// Probabilities are returned as a plain tensor; gradients flow through
    /// the loss node only.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
    ) -> Result<(NodeId, Tensor)> {
        let (bsz, classes) = dims2(self, logits, "softmax_cross_entropy logits")?;
        if labels.len() != bsz {
            return Err(Error::shape(
                "softmax_cross_entropy labels",
                format!("{bsz} labels"),
                format!("{} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes,
            });
        }
        let mut probs = vec![0.0f32; bsz * classes];
        let loss = ops::softmax_cross_entropy_forward(
            self.value(logits),
            bsz,
            classes,
            labels,
            &mut probs,
        );
        let probs_tensor = Tensor::from_vec(&[bsz, classes], probs.clone())?;
        let needs = self.needs(&[logits]);
        let id = self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            vec![1],
            vec![loss],
            needs,
        );
        Ok((id, probs_tensor))
    }

    /// Pick one pre-softmax logit as a scalar (the Grad-CAM class score).
    pub fn select_logit(&mut self, logits: NodeId, row: usize, class: usize) -> Result<NodeId> {
        let (bsz, classes) = dims2(self, logits, "select_logit logits")?;
        if row >= bsz {
            return Err(Error::Config(format!(
                "select_logit row {row} out of range for batch {bsz}"
            )));
        }
        if class >= classes {
            return Err(Error::LabelOutOfRange {
                label: class,
                classes,
            });
        }
        let v = self.value(logits)[row * classes + class];
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Op::SelectLogit {
                logits,
                row,
                class,
            },
            vec![1],
            vec![v],
            needs,
        ))
    }

    /// Sum of every element, as a scalar node.
    pub fn sum_all(&mut self, input: NodeId) -> NodeId {
        let v = ops::sum_all(self.value(input));
        let needs = self.needs(&[input]);
        self.push(Op::SumAll { input }, vec![1], vec![v], needs)
    }

    /// Reverse pass from a scalar loss node. Populates gradients on every
    /// node that requires them and is reachable from the loss.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.consumed {
            return Err(Error::BackwardConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                "scalar loss",
                fmt_shape(self.shape(loss)),
            ));
        }
        self.consumed = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);

        let fault = self.conv_kernel_grad_fault;
        for id in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(id);
            let node = &rest[0];
            if !node.needs_grad {
                continue;
            }
            let Some(grad) = node.grad.as_ref() else {
                continue;
            };
            match &node.op {
                Op::Leaf => {}
                Op::Conv2d {
                    input,
                    kernels,
                    bias,
                    stride,
                    padding,
                } => {
                    let [bsz, cout, oh, ow] = dims4_of(&node.shape);
                    let [_, cin, h, w] = dims4_of(&before[input.0].shape);
                    if before[kernels.0].needs_grad {
                        let dk = grad_buf(before, *kernels);
                        // Split borrows: take the buffer out while reading inputs.
                        let mut dk_buf = std::mem::take(dk);
                        ops::conv2d_backward_kernels(
                            grad,
                            bsz,
                            cout,
                            oh,
                            ow,
                            &before[input.0].value,
                            cin,
                            h,
                            w,
                            *stride,
                            *padding,
                            &mut dk_buf,
                            fault,
                        );
                        before[kernels.0].grad = Some(dk_buf);
                    }
                    if before[bias.0].needs_grad {
                        let db = grad_buf(before, *bias);
                        ops::conv2d_backward_bias(grad, bsz, cout, oh * ow, db);
                    }
                    if before[input.0].needs_grad {
                        let din = grad_buf(before, *input);
                        let mut din_buf = std::mem::take(din);
                        ops::conv2d_backward_input(
                            grad,
                            bsz,
                            cout,
                            oh,
                            ow,
                            &before[kernels.0].value,
                            cin,
                            *stride,
                            *padding,
                            &mut din_buf,
                            h,
                            w,
                        );
                        before[input.0].grad = Some(din_buf);
                    }
                }
                Op::MaxPool2x2 { input, argmax } => {
                    if before[input.0].needs_grad {
                        let din = grad_buf(before, *input);
                        ops::maxpool2x2_backward(grad, argmax, din);
                    }
                }
                Op::GlobalAvgPool { input } => {
                    if before[input.0].needs_grad {
                        let [bsz, c, h, w] = dims4_of(&before[input.0].shape);
                        let din = grad_buf(before, *input);
                        ops::global_avg_pool_backward(grad, bsz, c, h * w, din);
                    }
                }
                Op::Dense {
                    input,
                    weight,
                    bias,
                } => {
                    let [bsz, m] = dims2_of(&node.shape);
                    let n = before[input.0].shape[1];
                    if before[weight.0].needs_grad {
                        let dw = grad_buf(before, *weight);
                        let mut dw_buf = std::mem::take(dw);
                        ops::dense_backward_weight(
                            grad,
                            bsz,
                            m,
                            &before[input.0].value,
                            n,
                            &mut dw_buf,
                        );
                        before[weight.0].grad = Some(dw_buf);
                    }
                    if before[bias.0].needs_grad {
                        let db = grad_buf(before, *bias);
                        ops::dense_backward_bias(grad, bsz, m, db);
                    }
                    if before[input.0].needs_grad {
                        let din = grad_buf(before, *input);
                        let mut din_buf = std::mem::take(din);
                        ops::dense_backward_input(
                            grad,
                            bsz,
                            m,
                            &before[weight.0].value,
                            n,
                            &mut din_buf,
                        );
                        before[input.0].grad = Some(din_buf);
                    }
                }
                Op::Relu { input } => {
                    if before[input.0].needs_grad {
                        let din = grad_buf(before, *input);
                        let mut din_buf = std::mem::take(din);
                        ops::relu_backward(grad, &before[input.0].value, &mut din_buf);
                        before[input.0].grad = Some(din_buf);
                    }
                }
                Op::Flatten { input } => {
                    if before[input.0].needs_grad {
                        let din = grad_buf(before, *input);
                        for (d, g) in din.iter_mut().zip(grad) {
                            *d += *g;
                        }
                    }
                }
                Op::Add { lhs, rhs } => {
                    for side in [*lhs, *rhs] {
                        if before[side.0].needs_grad {
                            let d = grad_buf(before, side);
                            for (dv, g) in d.iter_mut().zip(grad) {
                                *dv += *g;
                            }
                        }
                    }
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    if before[logits.0].needs_grad {
                        let [bsz, classes] = dims2_of(&before[logits.0].shape);
                        let g = grad[0];
                        let dl = grad_buf(before, *logits);
                        ops::softmax_cross_entropy_backward(g, probs, bsz, classes, labels, dl);
                    }
                }
                Op::SelectLogit { logits, row, class } => {
                    if before[logits.0].needs_grad {
                        let classes = before[logits.0].shape[1];
                        let g = grad[0];
                        let dl = grad_buf(before, *logits);
                        dl[row * classes + class] += g;
                    }
                }
                Op::SumAll { input } => {
                    if before[input.0].needs_grad {
                        let g = grad[0];
                        let din = grad_buf(before, *input);
                        for d in din.iter_mut() {
                            *d += g;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn grad_buf(nodes: &mut [Node], id: NodeId) -> &mut Vec<f32> {
    let len = nodes[id.0].value.len();
    nodes[id.0].grad.get_or_insert_with(|| vec![0.0; len])
}

fn dims4(tape: &Tape, id: NodeId, context: &str) -> Result<(usize, usize, usize, usize)> {
    match *tape.shape(id) {
        [a, b, c, d] => Ok((a, b, c, d)),
        ref s => Err(Error::shape(context, "4-d tensor (NCHW)", fmt_shape(s))),
    }
}

fn dims2(tape: &Tape, id: NodeId, context: &str) -> Result<(usize, usize)> {
    match *tape.shape(id) {
        [a, b] => Ok((a, b)),
        ref s => Err(Error::shape(context, "2-d tensor", fmt_shape(s))),
    }
}

fn dims4_of(shape: &[usize]) -> [usize; 4] {
    [shape[0], shape[1], shape[2], shape[3]]
}

fn dims2_of(shape: &[usize]) -> [usize; 2] {
    [shape[0], shape[1]]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f32>) -> Tensor {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn conv_all_ones_padding_one() {
        let mut tape = Tape::new();
        let input = tape.leaf(&t(&[1, 1, 3, 3], vec![1.0; 9]), false);
        let kernels = tape.leaf(&t(&[1, 1, 3, 3], vec![1.0; 9]), false);
        let bias = tape.leaf(&t(&[1], vec![0.0]), false);
        let out = tape.conv2d(input, kernels, bias, 1, 1).unwrap();
        assert_eq!(
            tape.value(out),
            &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]
        );
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let mut tape = Tape::new();
        let data: Vec<f32> = (0..16).map(|i| i as f32 * 0.5).collect();
        let input = tape.leaf(&t(&[1, 1, 4, 4], data.clone()), false);
        let mut delta = vec![0.0f32; 9];
        delta[4] = 1.0;
        let kernels = tape.leaf(&t(&[1, 1, 3, 3], delta), false);
        let bias = tape.leaf(&t(&[1], vec![0.0]), false);
        let out = tape.conv2d(input, kernels, bias, 1, 1).unwrap();
        assert_eq!(tape.value(out), data.as_slice());
    }

    #[test]
    fn conv_rejects_bad_geometry() {
        let mut tape = Tape::new();
        let input = tape.leaf(&t(&[1, 1, 4, 4], vec![0.0; 16]), false);
        let kernels = tape.leaf(&t(&[1, 1, 3, 3], vec![0.0; 9]), false);
        let bias = tape.leaf(&t(&[1], vec![0.0]), false);
        // (4 + 0 - 3) % 2 != 0 -> non-integral output extent.
        assert!(matches!(
            tape.conv2d(input, kernels, bias, 2, 0),
            Err(Error::Config(_))
        ));
        let wrong_cin = tape.leaf(&t(&[1, 2, 3, 3], vec![0.0; 18]), false);
        assert!(tape.conv2d(input, wrong_cin, bias, 1, 1).is_err());
    }

    #[test]
    fn maxpool_single_window() {
        let mut tape = Tape::new();
        let input = tape.leaf(&t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]), true);
        let out = tape.maxpool2x2(input).unwrap();
        assert_eq!(tape.value(out), &[4.0]);
    }

    #[test]
    fn maxpool_tie_routes_gradient_to_first_element() {
        let mut tape = Tape::new();
        let input = tape.leaf(&t(&[1, 1, 2, 2], vec![7.0; 4]), true);
        let out = tape.maxpool2x2(input).unwrap();
        assert_eq!(tape.value(out), &[7.0]);
        let loss = tape.sum_all(out);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(input).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_rejects_odd_extent() {
        let mut tape = Tape::new();
        let input = tape.leaf(&t(&[1, 1, 3, 3], vec![0.0; 9]), false);
        assert!(matches!(tape.maxpool2x2(input), Err(Error::Config(_))));
    }

    #[test]
    fn global_avg_pool_means() {
        let mut tape = Tape::new();
        let input = tape.leaf(&t(&[1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]), true);
        let out = tape.global_avg_pool(input).unwrap();
        assert_eq!(tape.value(out), &[4.0]);
        let loss = tape.sum_all(out);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(input).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn dense_identity_and_simple_case() {
        let mut tape = Tape::new();
        let input = tape.leaf(&t(&[1, 2], vec![2.0, 3.0]), false);
        let eye = tape.leaf(&t(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]), false);
        let zero = tape.leaf(&t(&[2], vec![0.0, 0.0]), false);
        let out = tape.dense(input, eye, zero).unwrap();
        assert_eq!(tape.value(out), &[2.0, 3.0]);

        let weight = tape.leaf(&t(&[1, 2], vec![1.0, 1.0]), false);
        let bias = tape.leaf(&t(&[1], vec![1.0]), false);
        let out = tape.dense(input, weight, bias).unwrap();
        assert_eq!(tape.value(out), &[6.0]);
    }

    #[test]
    fn relu_forward_values() {
        let mut tape = Tape::new();
        let input = tape.leaf(&t(&[3], vec![-1.0, 0.0, 2.0]), false);
        let out = tape.relu(input);
        assert_eq!(tape.value(out), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_uniform_logits() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&t(&[1, 4], vec![0.3; 4]), false);
        let (loss, probs) = tape.softmax_cross_entropy(logits, &[2]).unwrap();
        for &p in probs.data() {
            assert!((p - 0.25).abs() < 1e-6);
        }
        assert!((tape.value(loss)[0] - 4.0f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn softmax_confident_correct_logit() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&t(&[1, 3], vec![1000.0, 0.0, 0.0]), false);
        let (loss, probs) = tape.softmax_cross_entropy(logits, &[0]).unwrap();
        assert!(tape.value(loss)[0].abs() < 1e-6);
        assert!((probs.data()[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_rejects_out_of_range_label() {
        let mut tape = Tape::new();
        let logits = tape.leaf(&t(&[1, 3], vec![0.0; 3]), false);
        assert!(matches!(
            tape.softmax_cross_entropy(logits, &[3]),
            Err(Error::LabelOutOfRange { .. })
        ));
    }

    #[test]
    fn backward_dense_closed_form() {
        // loss = mean CE(softmax(x W^T + b), y) over a single sample;
        // dW = (p - onehot) x^T, db = p - onehot.
        let mut tape = Tape::new();
        let input = tape.leaf(&t(&[1, 2], vec![0.5, -1.0]), false);
        let weight = tape.leaf(&t(&[2, 2], vec![0.2, -0.1, 0.05, 0.3]), true);
        let bias = tape.leaf(&t(&[2], vec![0.0, 0.1]), true);
        let logits = tape.dense(input, weight, bias).unwrap();
        let (loss, probs) = tape.softmax_cross_entropy(logits, &[1]).unwrap();
        tape.backward(loss).unwrap();
        let p = probs.data();
        let expected_db = [p[0], p[1] - 1.0];
        let db = tape.grad(bias).unwrap();
        for (a, e) in db.iter().zip(&expected_db) {
            assert!((a - e).abs() < 1e-6);
        }
        let dw = tape.grad(weight).unwrap();
        let x = [0.5f32, -1.0];
        for r in 0..2 {
            for c in 0..2 {
                assert!((dw[r * 2 + c] - expected_db[r] * x[c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn fan_out_gradients_sum() {
        // y = sum(x + x): dy/dx = 2 everywhere.
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2, 2], vec![1.0, -2.0, 3.0, 0.5]), true);
        let doubled = tape.add(x, x).unwrap();
        let loss = tape.sum_all(doubled);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0; 4]);
    }

    #[test]
    fn backward_twice_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[1], vec![1.0]), true);
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::BackwardConsumed)));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], vec![1.0, 2.0]), true);
        assert!(matches!(
            tape.backward(x),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn frozen_leaves_get_no_gradients() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t(&[2], vec![1.0, 2.0]), false);
        let loss = tape.sum_all(x);
        tape.backward(loss).unwrap();
        assert!(tape.grad(x).is_none());
    }
}
