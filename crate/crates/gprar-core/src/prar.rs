//! The pose encoder and its two decoder branches (pose reconstruction and
//! action recognition), built from spatiotemporal graph-convolution layers.
//!
//! Each layer applies, per frame, a normalized-adjacency spatial step
//! `f <- sum_p (M_p . f) W_p`, then a depthwise temporal convolution across
//! frames (same joint, consecutive frames), then ReLU, with an optional
//! residual connection when channel counts match. Model coordinates are
//! normalized by image size on the way in and denormalized on the way out, so
//! callers always speak pixels.

use serde::{Deserialize, Serialize};

use crate::skeleton::{
    build_adjacency, build_layout, NormalizedAdjacency, PartitionStrategy, SkeletonLayout,
    SkeletonSequence,
};
use crate::tensor::{
    forward, GraphBuilder, GraphSpec, ModelParams, NodeId, Tensor, TensorMap,
};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// One spatiotemporal graph-convolution layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct STGCNLayerConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Span of the temporal convolution; odd so padding preserves T.
    pub temporal_kernel: usize,
    /// Adds the layer input to the output when channel counts match.
    pub has_residual: bool,
}

impl STGCNLayerConfig {
    pub fn new(in_channels: usize, out_channels: usize, temporal_kernel: usize, has_residual: bool) -> Self {
        Self { in_channels, out_channels, temporal_kernel, has_residual }
    }
}

/// Full architecture description: skeleton preset, layer stacks, class count,
/// and the pixel frame size used to normalize coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PRARConfig {
    pub layout_preset: String,
    pub strategy: PartitionStrategy,
    pub t_obs: usize,
    pub class_count: usize,
    /// (width, height) in pixels; divides x and y on model input.
    pub image_size: (f64, f64),
    pub encoder: Vec<STGCNLayerConfig>,
    pub recon_decoder: Vec<STGCNLayerConfig>,
    pub action_decoder: Vec<STGCNLayerConfig>,
}

impl PRARConfig {
    /// The default desk-scale architecture on the 18-joint skeleton.
    pub fn standard(class_count: usize, image_size: (f64, f64)) -> Self {
        let k = 9;
        Self {
            layout_preset: "coco18".into(),
            strategy: PartitionStrategy::Uniform,
            t_obs: 10,
            class_count,
            image_size,
            encoder: vec![
                STGCNLayerConfig::new(3, 32, k, false),
                STGCNLayerConfig::new(32, 64, k, false),
                STGCNLayerConfig::new(64, 64, k, true),
            ],
            recon_decoder: vec![
                STGCNLayerConfig::new(64, 64, k, true),
                STGCNLayerConfig::new(64, 32, k, false),
                STGCNLayerConfig::new(32, 16, k, false),
                STGCNLayerConfig::new(16, 3, k, false),
            ],
            action_decoder: vec![
                STGCNLayerConfig::new(64, 64, k, true),
                STGCNLayerConfig::new(64, 64, k, true),
                STGCNLayerConfig::new(64, 64, k, true),
                STGCNLayerConfig::new(64, 32, k, false),
            ],
        }
    }

    /// A small 5-joint model for gradient checks and fast tests.
    pub fn toy(class_count: usize) -> Self {
        let k = 3;
        Self {
            layout_preset: "toy5".into(),
            strategy: PartitionStrategy::Uniform,
            t_obs: 10,
            class_count,
            image_size: (64.0, 48.0),
            encoder: vec![
                STGCNLayerConfig::new(3, 8, k, false),
                STGCNLayerConfig::new(8, 8, k, true),
                STGCNLayerConfig::new(8, 8, k, true),
            ],
            recon_decoder: vec![
                STGCNLayerConfig::new(8, 8, k, true),
                STGCNLayerConfig::new(8, 8, k, true),
                STGCNLayerConfig::new(8, 6, k, false),
                STGCNLayerConfig::new(6, 3, k, false),
            ],
            action_decoder: vec![
                STGCNLayerConfig::new(8, 8, k, true),
                STGCNLayerConfig::new(8, 8, k, true),
                STGCNLayerConfig::new(8, 8, k, true),
                STGCNLayerConfig::new(8, 6, k, false),
            ],
        }
    }

    /// Channels produced by the encoder (the width of the shared feature).
    pub fn encoded_channels(&self) -> usize {
        self.encoder.last().map_or(0, |l| l.out_channels)
    }

    /// Channels of the per-frame action feature (last action-decoder width).
    pub fn action_channels(&self) -> usize {
        self.action_decoder.last().map_or(0, |l| l.out_channels)
    }

    fn validate(&self, layout: &SkeletonLayout) -> Result<()> {
        if self.encoder.len() != 3 {
            return Err(Error::Config(format!(
                "encoder must have exactly 3 layers, got {}",
                self.encoder.len()
            )));
        }
        for (name, stack) in [("reconstruction", &self.recon_decoder), ("action", &self.action_decoder)] {
            if stack.len() != 4 {
                return Err(Error::Config(format!(
                    "{name} decoder must have exactly 4 layers, got {}",
                    stack.len()
                )));
            }
        }
        if self.encoder[0].in_channels != 3 {
            return Err(Error::Config("encoder input must be 3 channels (x, y, confidence)".into()));
        }
        if self.recon_decoder[3].out_channels != 3 {
            return Err(Error::Config("reconstruction decoder must end in 3 channels".into()));
        }
        let chains = [
            ("encoder", &self.encoder, 3),
            ("recon_decoder", &self.recon_decoder, self.encoded_channels()),
            ("action_decoder", &self.action_decoder, self.encoded_channels()),
        ];
        for (name, stack, mut expect) in chains {
            for (i, layer) in stack.iter().enumerate() {
                if layer.in_channels != expect {
                    return Err(Error::Config(format!(
                        "{name} layer {i} expects {} input channels but the previous layer emits {expect}",
                        layer.in_channels
                    )));
                }
                if layer.temporal_kernel % 2 == 0 || layer.temporal_kernel == 0 {
                    return Err(Error::Config(format!(
                        "{name} layer {i} temporal kernel {} must be odd",
                        layer.temporal_kernel
                    )));
                }
                expect = layer.out_channels;
            }
        }
        if self.class_count < 2 {
            return Err(Error::Config("need at least 2 action classes".into()));
        }
        if self.t_obs < 2 {
            return Err(Error::Config("t_obs must be at least 2".into()));
        }
        if self.image_size.0 <= 0.0 || self.image_size.1 <= 0.0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        let _ = layout;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Layer wiring
// ---------------------------------------------------------------------------

/// Adds adjacency partitions to a builder as constants; shared by every layer.
pub(crate) fn adjacency_nodes(b: &mut GraphBuilder, adjacency: &NormalizedAdjacency) -> Vec<NodeId> {
    adjacency
        .partitions()
        .iter()
        .enumerate()
        .map(|(p, m)| b.constant(&format!("adj{p}"), m.clone()))
        .collect()
}

/// Wires one graph-conv layer from already-created weight nodes:
/// spatial partition sum, depthwise temporal convolution, optional ReLU,
/// optional residual. Returns the output node.
fn wire_layer(
    b: &mut GraphBuilder,
    prefix: &str,
    x: NodeId,
    adj_nodes: &[NodeId],
    w_nodes: &[NodeId],
    tk_node: NodeId,
    residual: bool,
    apply_relu: bool,
) -> Result<NodeId> {
    let mut spatial: Option<NodeId> = None;
    for (p, (&adj, &w)) in adj_nodes.iter().zip(w_nodes).enumerate() {
        let mixed = b.frame_left_mul(&format!("{prefix}.mix{p}"), adj, x)?;
        let term = b.frame_right_mul(&format!("{prefix}.proj{p}"), mixed, w)?;
        spatial = Some(match spatial {
            None => term,
            Some(acc) => b.add(&format!("{prefix}.sum{p}"), acc, term)?,
        });
    }
    let spatial = spatial.ok_or_else(|| Error::Graph("layer needs at least one partition".into()))?;
    let temporal = b.temporal_conv_depthwise(&format!("{prefix}.temporal"), spatial, tk_node)?;
    let mut out = if apply_relu {
        b.relu(&format!("{prefix}.relu"), temporal)
    } else {
        temporal
    };
    if residual {
        out = b.add(&format!("{prefix}.res"), out, x)?;
    }
    Ok(out)
}

/// Declares the trainable weights of one layer and wires it. Weight names are
/// `{prefix}.w{p}` (one per adjacency partition) and `{prefix}.tk`.
fn param_layer(
    b: &mut GraphBuilder,
    prefix: &str,
    x: NodeId,
    adj_nodes: &[NodeId],
    layer: &STGCNLayerConfig,
    apply_relu: bool,
) -> Result<NodeId> {
    let w_nodes: Vec<NodeId> = (0..adj_nodes.len())
        .map(|p| {
            b.param(
                &format!("{prefix}.w{p}"),
                vec![layer.in_channels, layer.out_channels],
                layer.in_channels,
                layer.out_channels,
            )
        })
        .collect();
    let tk = b.param(
        &format!("{prefix}.tk"),
        vec![layer.out_channels, layer.temporal_kernel],
        layer.temporal_kernel,
        layer.temporal_kernel,
    );
    let residual = layer.has_residual && layer.in_channels == layer.out_channels;
    wire_layer(b, prefix, x, adj_nodes, &w_nodes, tk, residual, apply_relu)
}

/// One spatiotemporal graph convolution applied eagerly to a feature tensor,
/// with explicit weights. `weights` holds one `[C_in, C_out]` matrix per
/// adjacency partition; `temporal_kernel` is `[C_out, span]`.
pub fn st_graph_conv(
    features: &Tensor,
    adjacency: &NormalizedAdjacency,
    layer: &STGCNLayerConfig,
    weights: &[Tensor],
    temporal_kernel: &Tensor,
) -> Result<Tensor> {
    let shape = features.shape();
    if shape.len() != 3 || shape[2] != layer.in_channels {
        return Err(Error::ShapeMismatch(format!(
            "features {shape:?} do not carry {} input channels",
            layer.in_channels
        )));
    }
    if weights.len() != adjacency.partitions().len() {
        return Err(Error::ShapeMismatch(format!(
            "{} weight matrices for {} partitions",
            weights.len(),
            adjacency.partitions().len()
        )));
    }
    let mut b = GraphBuilder::new();
    let x = b.input("x", shape.to_vec());
    let adj_nodes = adjacency_nodes(&mut b, adjacency);
    let w_nodes: Vec<NodeId> = weights
        .iter()
        .enumerate()
        .map(|(p, w)| b.constant(&format!("w{p}"), w.clone()))
        .collect();
    let tk = b.constant("tk", temporal_kernel.clone());
    let residual = layer.has_residual && layer.in_channels == layer.out_channels;
    let out = wire_layer(&mut b, "layer", x, &adj_nodes, &w_nodes, tk, residual, true)?;
    b.output("out", out);
    let spec = b.finish();
    let inputs = TensorMap::from([("x".to_string(), features.clone())]);
    let mut result = forward(&spec, &inputs, &ModelParams::new(0))?;
    Ok(result.remove("out").expect("declared output"))
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Everything `infer` produces in a single forward pass.
#[derive(Debug, Clone)]
pub struct PrarInference {
    /// Encoded pose feature, `[T, K, C_enc]`.
    pub encoded: Tensor,
    /// Reconstructed (denoised, completed) pose sequence in pixels.
    pub recon: SkeletonSequence,
    /// Per-frame action feature, `[T, C_act]`.
    pub action_seq: Tensor,
    /// Class logits.
    pub logits: Vec<f64>,
}

/// Index of the largest logit; ties resolve to the lowest index.
pub fn predicted_class(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    best
}

/// The encoder + two-decoder model with its parameters and prebuilt graphs.
#[derive(Clone)]
pub struct PRARModel {
    config: PRARConfig,
    layout: SkeletonLayout,
    adjacency: NormalizedAdjacency,
    encode_spec: GraphSpec,
    recon_spec: GraphSpec,
    act_spec: GraphSpec,
    infer_spec: GraphSpec,
    train_spec: GraphSpec,
    params: ModelParams,
}

impl PRARModel {
    pub fn new(config: PRARConfig, rng_seed: u64) -> Result<Self> {
        let layout = build_layout(&config.layout_preset)?;
        config.validate(&layout)?;
        let adjacency = build_adjacency(&layout, config.strategy);
        let k = layout.joint_count();
        let t = config.t_obs;
        let c_enc = config.encoded_channels();

        let encode_spec = {
            let mut b = GraphBuilder::new();
            let pose = b.input("pose", vec![t, k, 3]);
            let adj = adjacency_nodes(&mut b, &adjacency);
            let enc = build_encoder(&mut b, &config, pose, &adj)?;
            b.output("encoded", enc);
            b.finish()
        };
        let recon_spec = {
            let mut b = GraphBuilder::new();
            let enc = b.input("encoded", vec![t, k, c_enc]);
            let adj = adjacency_nodes(&mut b, &adjacency);
            let recon = build_recon(&mut b, &config, enc, &adj)?;
            b.output("recon", recon);
            b.finish()
        };
        let act_spec = {
            let mut b = GraphBuilder::new();
            let enc = b.input("encoded", vec![t, k, c_enc]);
            let adj = adjacency_nodes(&mut b, &adjacency);
            let (action_seq, logits) = build_action(&mut b, &config, enc, &adj)?;
            b.output("action_seq", action_seq);
            b.output("logits", logits);
            b.finish()
        };
        let infer_spec = {
            let mut b = GraphBuilder::new();
            let pose = b.input("pose", vec![t, k, 3]);
            let adj = adjacency_nodes(&mut b, &adjacency);
            let enc = build_encoder(&mut b, &config, pose, &adj)?;
            let recon = build_recon(&mut b, &config, enc, &adj)?;
            let (action_seq, logits) = build_action(&mut b, &config, enc, &adj)?;
            b.output("encoded", enc);
            b.output("recon", recon);
            b.output("action_seq", action_seq);
            b.output("logits", logits);
            b.finish()
        };
        let train_spec = {
            let mut b = GraphBuilder::new();
            let pose = b.input("pose", vec![t, k, 3]);
            let target = b.input("target", vec![t, k, 3]);
            let label = b.input("label", vec![config.class_count]);
            let adj = adjacency_nodes(&mut b, &adjacency);
            let enc = build_encoder(&mut b, &config, pose, &adj)?;
            let recon = build_recon(&mut b, &config, enc, &adj)?;
            let (_action_seq, logits) = build_action(&mut b, &config, enc, &adj)?;
            // the training reconstruction loss is the element *mean* in
            // normalized coordinates, keeping gradient magnitudes (and the
            // default learning rate) independent of sequence size
            let sq = b.squared_error("loss_r_sum", recon, target)?;
            let loss_r = b.scale("loss_r", sq, 1.0 / (t * k * 3) as f64);
            let loss_a = b.softmax_cross_entropy("loss_a", logits, label)?;
            let loss = b.add("loss", loss_r, loss_a)?;
            b.output("loss", loss);
            b.output("loss_r", loss_r);
            b.output("loss_a", loss_a);
            b.output("recon", recon);
            b.output("logits", logits);
            b.finish()
        };

        let mut params = ModelParams::new(rng_seed);
        params.register_graph(&train_spec)?;
        params.register_graph(&infer_spec)?;
        Ok(Self {
            config,
            layout,
            adjacency,
            encode_spec,
            recon_spec,
            act_spec,
            infer_spec,
            train_spec,
            params,
        })
    }

    pub fn config(&self) -> &PRARConfig {
        &self.config
    }

    pub fn layout(&self) -> &SkeletonLayout {
        &self.layout
    }

    pub fn adjacency(&self) -> &NormalizedAdjacency {
        &self.adjacency
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    /// The stage-1 loss graph: inputs `pose`, `target`, `label`; outputs
    /// `loss`, `loss_r`, `loss_a`, `recon`, `logits`.
    pub fn train_spec(&self) -> &GraphSpec {
        &self.train_spec
    }

    /// Splits the borrow so an optimizer can step the parameters while
    /// holding the loss graph.
    pub(crate) fn train_parts(&mut self) -> (&GraphSpec, &mut ModelParams) {
        (&self.train_spec, &mut self.params)
    }

    /// Graph from `pose` to every inference output; used when composing with
    /// downstream models.
    pub fn infer_spec(&self) -> &GraphSpec {
        &self.infer_spec
    }

    /// Normalized `[T, K, 3]` model input for an observation.
    pub fn pose_input(&self, obs: &SkeletonSequence) -> Result<Tensor> {
        if obs.frames() != self.config.t_obs || obs.joint_count() != self.layout.joint_count() {
            return Err(Error::ShapeMismatch(format!(
                "observation is {}x{} joints, model expects {}x{}",
                obs.frames(),
                obs.joint_count(),
                self.config.t_obs,
                self.layout.joint_count()
            )));
        }
        let (w, h) = self.config.image_size;
        Ok(obs.to_tensor_scaled(w, h))
    }

    /// Runs the encoder: observation in pixels to `[T, K, C_enc]` features.
    pub fn encode(&self, obs: &SkeletonSequence) -> Result<Tensor> {
        let inputs = TensorMap::from([("pose".to_string(), self.pose_input(obs)?)]);
        let mut out = forward(&self.encode_spec, &inputs, &self.params)?;
        Ok(out.remove("encoded").expect("declared output"))
    }

    /// Decodes an encoded feature into a complete pose sequence in pixels;
    /// every joint is marked observed and confidence lies in [0,1].
    pub fn reconstruct(&self, encoded: &Tensor) -> Result<SkeletonSequence> {
        let inputs = TensorMap::from([("encoded".to_string(), encoded.clone())]);
        let mut out = forward(&self.recon_spec, &inputs, &self.params)?;
        let (w, h) = self.config.image_size;
        SkeletonSequence::from_tensor_scaled(&out.remove("recon").expect("declared output"), w, h)
    }

    /// Decodes an encoded feature into the per-frame action feature and the
    /// class logits.
    pub fn recognize(&self, encoded: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let inputs = TensorMap::from([("encoded".to_string(), encoded.clone())]);
        let mut out = forward(&self.act_spec, &inputs, &self.params)?;
        let logits = out.remove("logits").expect("declared output").values().to_vec();
        Ok((out.remove("action_seq").expect("declared output"), logits))
    }

    /// One forward pass through encoder and both decoders.
    pub fn infer(&self, obs: &SkeletonSequence) -> Result<PrarInference> {
        let inputs = TensorMap::from([("pose".to_string(), self.pose_input(obs)?)]);
        let mut out = forward(&self.infer_spec, &inputs, &self.params)?;
        let (w, h) = self.config.image_size;
        let recon =
            SkeletonSequence::from_tensor_scaled(&out.remove("recon").expect("declared output"), w, h)?;
        Ok(PrarInference {
            encoded: out.remove("encoded").expect("declared output"),
            recon,
            action_seq: out.remove("action_seq").expect("declared output"),
            logits: out.remove("logits").expect("declared output").values().to_vec(),
        })
    }
}

pub(crate) fn build_encoder(
    b: &mut GraphBuilder,
    config: &PRARConfig,
    pose: NodeId,
    adj: &[NodeId],
) -> Result<NodeId> {
    let mut x = pose;
    for (i, layer) in config.encoder.iter().enumerate() {
        x = param_layer(b, &format!("prar.enc{i}"), x, adj, layer, true)?;
    }
    Ok(x)
}

pub(crate) fn build_recon(
    b: &mut GraphBuilder,
    config: &PRARConfig,
    encoded: NodeId,
    adj: &[NodeId],
) -> Result<NodeId> {
    let mut x = encoded;
    let last = config.recon_decoder.len() - 1;
    for (i, layer) in config.recon_decoder.iter().enumerate() {
        // the final layer is linear in x/y with a sigmoid on confidence,
        // applied below, instead of the usual ReLU
        x = param_layer(b, &format!("prar.rec{i}"), x, adj, layer, i != last)?;
    }
    let xy = b.slice_last("recon.xy", x, 0, 2)?;
    let c_raw = b.slice_last("recon.c_raw", x, 2, 1)?;
    let c = b.sigmoid("recon.c", c_raw);
    b.concat_last("recon.joined", vec![xy, c])
}

pub(crate) fn build_action(
    b: &mut GraphBuilder,
    config: &PRARConfig,
    encoded: NodeId,
    adj: &[NodeId],
) -> Result<(NodeId, NodeId)> {
    let mut x = encoded;
    for (i, layer) in config.action_decoder.iter().enumerate() {
        x = param_layer(b, &format!("prar.act{i}"), x, adj, layer, true)?;
    }
    let action_seq = b.mean_joints("act.pool_joints", x)?;
    let pooled = b.mean_time("act.pool_time", action_seq)?;
    let c_act = config.action_channels();
    let fw = b.param("prar.fcn.w", vec![c_act, config.class_count], c_act, config.class_count);
    let fb = b.param("prar.fcn.b", vec![config.class_count], c_act, config.class_count);
    let projected = b.matmul("act.fcn", pooled, fw)?;
    let biased = b.add_bias("act.fcn_bias", projected, fb)?;
    let logits = b.reshape("act.logits", biased, vec![config.class_count])?;
    Ok((action_seq, logits))
}

// ---------------------------------------------------------------------------
// Losses (pixel-space, single sample)
// ---------------------------------------------------------------------------

/// Reconstruction loss: sum over frames and joints of the squared L2
/// difference of the full (x, y, confidence) triplets.
pub fn loss_reconstruction(recon: &SkeletonSequence, target: &SkeletonSequence) -> Result<f64> {
    if recon.frames() != target.frames() || recon.joint_count() != target.joint_count() {
        return Err(Error::ShapeMismatch(format!(
            "reconstruction {}x{} vs target {}x{}",
            recon.frames(),
            recon.joint_count(),
            target.frames(),
            target.joint_count()
        )));
    }
    let mut acc = 0.0;
    for t in 0..recon.frames() {
        for j in 0..recon.joint_count() {
            let a = recon.get(t, j);
            let b = target.get(t, j);
            for c in 0..3 {
                let d = a[c] - b[c];
                acc += d * d;
            }
        }
    }
    Ok(acc)
}

/// Action loss: softmax cross-entropy of the logits against the true class.
pub fn loss_action(logits: &[f64], true_class: usize) -> Result<f64> {
    if true_class >= logits.len() {
        return Err(Error::Config(format!(
            "class {true_class} out of range for {} logits",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[true_class])
}

/// The multi-task objective: reconstruction plus action loss, unweighted.
pub fn loss_multitask(
    recon: &SkeletonSequence,
    target: &SkeletonSequence,
    logits: &[f64],
    true_class: usize,
) -> Result<f64> {
    Ok(loss_reconstruction(recon, target)? + loss_action(logits, true_class)?)
}
