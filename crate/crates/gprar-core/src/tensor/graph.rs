//! Computation descriptions: a static DAG of tensor operations.
//!
//! A [`GraphSpec`] is built once per model, with all shapes inferred and
//! frozen at build time. Execution (`exec`) then interprets the node list
//! forward and backward. Nodes only reference earlier nodes, so the vector
//! order is already topological.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::{Error, Result};

/// Index of a node inside its graph.
pub type NodeId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PadMode {
    /// Zero padding of (k-1)/2 per side (stride 1) or the stride-aware
    /// equivalent, preserving `ceil(T/stride)` output steps.
    Same,
    /// No padding; output shrinks by k-1.
    Valid,
}

/// One tensor operation. Leading axis is always time where applicable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Op {
    /// Externally bound tensor with a declared shape.
    Input { name: String },
    /// Trainable tensor owned by a `ModelParams` store.
    Param { name: String },
    /// Immutable tensor baked into the graph (adjacency matrices etc).
    Constant { index: usize },
    /// 2-D product: [m,k] x [k,n] -> [m,n].
    MatMul { lhs: NodeId, rhs: NodeId },
    /// Per-frame left product by a constant matrix: M[K,K] . X[T,K,C].
    FrameLeftMul { matrix: NodeId, features: NodeId },
    /// Per-frame right product: X[T,K,C] . W[C,C'].
    FrameRightMul { features: NodeId, weight: NodeId },
    /// Elementwise sum of two same-shape tensors.
    Add { lhs: NodeId, rhs: NodeId },
    /// Broadcast a rank-1 bias over the trailing axis.
    AddBias { x: NodeId, bias: NodeId },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    /// Per-channel temporal filter on [T,K,C] with kernel [C,k], stride 1,
    /// length-preserving zero padding. Realizes the temporal edge span.
    TemporalConvDepthwise { x: NodeId, kernel: NodeId },
    /// Dense 1-D convolution on [T,Ci] with kernel [Co,Ci,k].
    TemporalConv { x: NodeId, kernel: NodeId, stride: usize, pad: PadMode },
    /// Transposed 1-D convolution on [T,Ci] with kernel [Ci,Co,k];
    /// output length (T-1)*stride + k - 2*crop.
    TemporalDeconv { x: NodeId, kernel: NodeId, stride: usize, crop: usize },
    /// Concatenate along the trailing axis.
    ConcatLast { parts: Vec<NodeId> },
    /// Slice along the trailing axis.
    SliceLast { x: NodeId, start: usize, len: usize },
    /// Slice along the leading (time) axis.
    SliceTime { x: NodeId, start: usize, len: usize },
    /// Row-major reinterpretation.
    Reshape { x: NodeId, shape: Vec<usize> },
    /// [T,K,C] -> [T,C], mean over the joint axis.
    MeanJoints { x: NodeId },
    /// [T,C] -> [1,C], mean over the time axis.
    MeanTime { x: NodeId },
    /// Midpoint of two joint rows' first two channels: [T,K,C>=2] -> [T,2].
    HipMidpoint { x: NodeId, left: usize, right: usize },
    /// Multiply by a fixed scalar.
    Scale { x: NodeId, factor: f64 },
    /// Sum of squared differences over all elements -> scalar.
    SquaredError { pred: NodeId, target: NodeId },
    /// Softmax cross-entropy of logits against a one-hot target -> scalar.
    SoftmaxCrossEntropy { logits: NodeId, target: NodeId },
}

impl Op {
    /// Nodes this op reads from.
    pub fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Input { .. } | Param { .. } | Constant { .. } => vec![],
            MatMul { lhs, rhs } | Add { lhs, rhs } => vec![*lhs, *rhs],
            FrameLeftMul { matrix, features } => vec![*matrix, *features],
            FrameRightMul { features, weight } => vec![*features, *weight],
            AddBias { x, bias } => vec![*x, *bias],
            Relu { x } | Sigmoid { x } | Reshape { x, .. } | MeanJoints { x }
            | MeanTime { x } | HipMidpoint { x, .. } | Scale { x, .. }
            | SliceLast { x, .. } | SliceTime { x, .. } => vec![*x],
            TemporalConvDepthwise { x, kernel } => vec![*x, *kernel],
            TemporalConv { x, kernel, .. } => vec![*x, *kernel],
            TemporalDeconv { x, kernel, .. } => vec![*x, *kernel],
            ConcatLast { parts } => parts.clone(),
            SquaredError { pred, target } => vec![*pred, *target],
            SoftmaxCrossEntropy { logits, target } => vec![*logits, *target],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct Node {
    pub op: Op,
    /// Human-readable tag used in error messages.
    pub label: String,
    pub shape: Vec<usize>,
}

/// Immutable computation description with frozen shapes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraphSpec {
    pub(crate) nodes: Vec<Node>,
    pub(crate) constants: Vec<Tensor>,
    pub(crate) outputs: Vec<(String, NodeId)>,
    /// (name, shape, fan_in, fan_out) for every Param node, in first-use order.
    pub(crate) params: Vec<ParamDecl>,
    pub(crate) inputs: Vec<(String, Vec<usize>)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl GraphSpec {
    pub fn node_shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn output_id(&self, name: &str) -> Result<NodeId> {
        self.outputs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .ok_or_else(|| Error::Graph(format!("graph has no output named '{name}'")))
    }

    pub fn param_decls(&self) -> &[ParamDecl] {
        &self.params
    }

    pub fn input_decls(&self) -> &[(String, Vec<usize>)] {
        &self.inputs
    }
}

/// Builds a [`GraphSpec`] node by node, inferring shapes eagerly so that
/// mismatches are reported at the node that introduces them.
pub struct GraphBuilder {
    nodes: Vec<Node>,
    constants: Vec<Tensor>,
    outputs: Vec<(String, NodeId)>,
    params: Vec<ParamDecl>,
    inputs: Vec<(String, Vec<usize>)>,
}

impl Default for GraphBuilder {
    fn default() -> Self {
        Self::new()
    }
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            constants: Vec::new(),
            outputs: Vec::new(),
            params: Vec::new(),
            inputs: Vec::new(),
        }
    }

    fn push(&mut self, op: Op, label: impl Into<String>, shape: Vec<usize>) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { op, label: label.into(), shape });
        id
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    fn err(&self, label: &str, msg: String) -> Error {
        Error::Graph(format!("node '{label}': {msg}"))
    }

    pub fn input(&mut self, name: &str, shape: Vec<usize>) -> NodeId {
        self.inputs.push((name.to_string(), shape.clone()));
        self.push(Op::Input { name: name.to_string() }, name, shape)
    }

    /// Declares a trainable tensor. `fan_in`/`fan_out` drive initialization.
    pub fn param(&mut self, name: &str, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> NodeId {
        self.params.push(ParamDecl {
            name: name.to_string(),
            shape: shape.clone(),
            fan_in,
            fan_out,
        });
        self.push(Op::Param { name: name.to_string() }, name, shape)
    }

    pub fn constant(&mut self, label: &str, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        let index = self.constants.len();
        self.constants.push(value);
        self.push(Op::Constant { index }, label, shape)
    }

    pub fn matmul(&mut self, label: &str, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        let (a, b) = (self.shape(lhs).to_vec(), self.shape(rhs).to_vec());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(self.err(label, format!("matmul shapes {a:?} x {b:?} do not conform")));
        }
        let shape = vec![a[0], b[1]];
        Ok(self.push(Op::MatMul { lhs, rhs }, label, shape))
    }

    pub fn frame_left_mul(&mut self, label: &str, matrix: NodeId, features: NodeId) -> Result<NodeId> {
        let (m, f) = (self.shape(matrix).to_vec(), self.shape(features).to_vec());
        if m.len() != 2 || m[0] != m[1] || f.len() != 3 || f[1] != m[1] {
            return Err(self.err(label, format!("frame-left-mul {m:?} . {f:?} does not conform")));
        }
        Ok(self.push(Op::FrameLeftMul { matrix, features }, label, f))
    }

    pub fn frame_right_mul(&mut self, label: &str, features: NodeId, weight: NodeId) -> Result<NodeId> {
        let (f, w) = (self.shape(features).to_vec(), self.shape(weight).to_vec());
        if f.len() != 3 || w.len() != 2 || f[2] != w[0] {
            return Err(self.err(label, format!("frame-right-mul {f:?} . {w:?} does not conform")));
        }
        let shape = vec![f[0], f[1], w[1]];
        Ok(self.push(Op::FrameRightMul { features, weight }, label, shape))
    }

    pub fn add(&mut self, label: &str, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        if self.shape(lhs) != self.shape(rhs) {
            let msg = format!(
                "add shapes {:?} vs {:?} differ",
                self.shape(lhs),
                self.shape(rhs)
            );
            return Err(self.err(label, msg));
        }
        let shape = self.shape(lhs).to_vec();
        Ok(self.push(Op::Add { lhs, rhs }, label, shape))
    }

    pub fn add_bias(&mut self, label: &str, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xs, bs) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if bs.len() != 1 || xs.last() != Some(&bs[0]) {
            return Err(self.err(label, format!("bias {bs:?} does not match trailing axis of {xs:?}")));
        }
        Ok(self.push(Op::AddBias { x, bias }, label, xs))
    }

    pub fn relu(&mut self, label: &str, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::Relu { x }, label, shape)
    }

    pub fn sigmoid(&mut self, label: &str, x: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::Sigmoid { x }, label, shape)
    }

    pub fn temporal_conv_depthwise(&mut self, label: &str, x: NodeId, kernel: NodeId) -> Result<NodeId> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if xs.len() != 3 || ks.len() != 2 || ks[0] != xs[2] {
            return Err(self.err(label, format!("depthwise kernel {ks:?} does not fit input {xs:?}")));
        }
        if ks[1] % 2 == 0 {
            return Err(self.err(label, format!("temporal span {} must be odd", ks[1])));
        }
        Ok(self.push(Op::TemporalConvDepthwise { x, kernel }, label, xs))
    }

    pub fn temporal_conv(
        &mut self,
        label: &str,
        x: NodeId,
        kernel: NodeId,
        stride: usize,
        pad: PadMode,
    ) -> Result<NodeId> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if xs.len() != 2 || ks.len() != 3 || ks[1] != xs[1] {
            return Err(self.err(label, format!("conv kernel {ks:?} does not fit input {xs:?}")));
        }
        let (t, k) = (xs[0], ks[2]);
        let pad_total = match pad {
            PadMode::Same => k - 1,
            PadMode::Valid => 0,
        };
        if t + pad_total < k {
            return Err(self.err(label, format!("input length {t} shorter than kernel {k}")));
        }
        let out_t = (t + pad_total - k) / stride + 1;
        Ok(self.push(Op::TemporalConv { x, kernel, stride, pad }, label, vec![out_t, ks[0]]))
    }

    pub fn temporal_deconv(
        &mut self,
        label: &str,
        x: NodeId,
        kernel: NodeId,
        stride: usize,
        crop: usize,
    ) -> Result<NodeId> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if xs.len() != 2 || ks.len() != 3 || ks[0] != xs[1] {
            return Err(self.err(label, format!("deconv kernel {ks:?} does not fit input {xs:?}")));
        }
        let full = (xs[0] - 1) * stride + ks[2];
        if full < 2 * crop + 1 {
            return Err(self.err(label, format!("crop {crop} exceeds deconv output {full}")));
        }
        let out_t = full - 2 * crop;
        Ok(self.push(Op::TemporalDeconv { x, kernel, stride, crop }, label, vec![out_t, ks[1]]))
    }

    pub fn concat_last(&mut self, label: &str, parts: Vec<NodeId>) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(self.err(label, "concat of zero parts".into()));
        }
        let lead = self.shape(parts[0]).to_vec();
        let rank = lead.len();
        let mut last = 0;
        for &p in &parts {
            let s = self.shape(p);
            if s.len() != rank || s[..rank - 1] != lead[..rank - 1] {
                return Err(self.err(label, format!("concat parts {lead:?} vs {s:?} disagree")));
            }
            last += s[rank - 1];
        }
        let mut shape = lead;
        shape[rank - 1] = last;
        Ok(self.push(Op::ConcatLast { parts }, label, shape))
    }

    pub fn slice_last(&mut self, label: &str, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let mut shape = self.shape(x).to_vec();
        let rank = shape.len();
        if start + len > shape[rank - 1] || len == 0 {
            return Err(self.err(label, format!("slice {start}..{} out of {:?}", start + len, shape)));
        }
        shape[rank - 1] = len;
        Ok(self.push(Op::SliceLast { x, start, len }, label, shape))
    }

    pub fn slice_time(&mut self, label: &str, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let mut shape = self.shape(x).to_vec();
        if start + len > shape[0] || len == 0 {
            return Err(self.err(label, format!("time slice {start}..{} out of {:?}", start + len, shape)));
        }
        shape[0] = len;
        Ok(self.push(Op::SliceTime { x, start, len }, label, shape))
    }

    pub fn reshape(&mut self, label: &str, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let numel: usize = shape.iter().product();
        if numel != self.shape(x).iter().product::<usize>() {
            return Err(self.err(label, format!("reshape {:?} -> {shape:?} changes size", self.shape(x))));
        }
        Ok(self.push(Op::Reshape { x, shape: shape.clone() }, label, shape))
    }

    pub fn mean_joints(&mut self, label: &str, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(self.err(label, format!("expected [T,K,C], got {s:?}")));
        }
        Ok(self.push(Op::MeanJoints { x }, label, vec![s[0], s[2]]))
    }

    pub fn mean_time(&mut self, label: &str, x: NodeId) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(self.err(label, format!("expected [T,C], got {s:?}")));
        }
        Ok(self.push(Op::MeanTime { x }, label, vec![1, s[1]]))
    }

    pub fn hip_midpoint(&mut self, label: &str, x: NodeId, left: usize, right: usize) -> Result<NodeId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[2] < 2 || left >= s[1] || right >= s[1] {
            return Err(self.err(label, format!("hip indices ({left},{right}) invalid for {s:?}")));
        }
        Ok(self.push(Op::HipMidpoint { x, left, right }, label, vec![s[0], 2]))
    }

    pub fn scale(&mut self, label: &str, x: NodeId, factor: f64) -> NodeId {
        let shape = self.shape(x).to_vec();
        self.push(Op::Scale { x, factor }, label, shape)
    }

    pub fn squared_error(&mut self, label: &str, pred: NodeId, target: NodeId) -> Result<NodeId> {
        if self.shape(pred) != self.shape(target) {
            let msg = format!(
                "squared-error shapes {:?} vs {:?} differ",
                self.shape(pred),
                self.shape(target)
            );
            return Err(self.err(label, msg));
        }
        Ok(self.push(Op::SquaredError { pred, target }, label, vec![1]))
    }

    pub fn softmax_cross_entropy(&mut self, label: &str, logits: NodeId, target: NodeId) -> Result<NodeId> {
        let (ls, ts) = (self.shape(logits).to_vec(), self.shape(target).to_vec());
        let classes: usize = ls.iter().product();
        if ts.iter().product::<usize>() != classes || classes < 2 {
            return Err(self.err(label, format!("logits {ls:?} vs one-hot target {ts:?} disagree")));
        }
        Ok(self.push(Op::SoftmaxCrossEntropy { logits, target }, label, vec![1]))
    }

    /// Registers a named output.
    pub fn output(&mut self, name: &str, id: NodeId) {
        self.outputs.push((name.to_string(), id));
    }

    pub fn finish(self) -> GraphSpec {
        GraphSpec {
            nodes: self.nodes,
            constants: self.constants,
            outputs: self.outputs,
            params: self.params,
            inputs: self.inputs,
        }
    }
}
