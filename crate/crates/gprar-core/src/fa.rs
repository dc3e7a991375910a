//! Grid optical flow and the feature aggregator: a temporal-convolution
//! encoder-decoder that fuses location, pose, confidence/flow, and action
//! streams into a predicted future trajectory.
//!
//! Every input stream is reshaped to `[T_obs, channels]`, embedded by its own
//! small convolution, concatenated channel-wise, squeezed through a strided
//! encoder, and deconvolved back out to `[T_pred, 2]` coordinates. Which
//! streams exist is part of the model configuration, so ablating a stream
//! shrinks the network rather than feeding it zeros.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::skeleton::{extract_location, SkeletonLayout, SkeletonSequence, Trajectory};
use crate::tensor::{
    forward, GraphBuilder, GraphSpec, ModelParams, NodeId, PadMode, Tensor, TensorMap,
};
use crate::{Error, Result};

pub const GRID_ROWS: usize = 3;
pub const GRID_COLS: usize = 4;
pub const GRID_CELLS: usize = GRID_ROWS * GRID_COLS;

// ---------------------------------------------------------------------------
// Optical flow
// ---------------------------------------------------------------------------

/// Dense per-pixel displacement field: T frames of W x H (dx, dy) vectors,
/// in pixels per frame. Stored as f32 to keep large corpora affordable.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    frames: usize,
    width: usize,
    height: usize,
    /// layout: [t][y][x][2]
    data: Vec<f32>,
}

impl FlowField {
    pub fn new(frames: usize, width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        let n = frames * width * height * 2;
        if data.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "flow field {frames}x{width}x{height} needs {n} values, got {}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("flow field".into()));
        }
        Ok(Self { frames, width, height, data })
    }

    /// Builds a field by sampling `f(t, x, y) -> (dx, dy)` at every pixel.
    pub fn from_fn(
        frames: usize,
        width: usize,
        height: usize,
        f: impl Fn(usize, usize, usize) -> (f64, f64),
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(frames * width * height * 2);
        for t in 0..frames {
            for y in 0..height {
                for x in 0..width {
                    let (dx, dy) = f(t, x, y);
                    data.push(dx as f32);
                    data.push(dy as f32);
                }
            }
        }
        Self::new(frames, width, height, data)
    }

    /// A constant (camera-pan) field, one vector per frame.
    pub fn uniform(width: usize, height: usize, per_frame: &[(f64, f64)]) -> Result<Self> {
        let frames = per_frame.len();
        Self::from_fn(frames, width, height, |t, _, _| per_frame[t])
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, t: usize, x: usize, y: usize) -> (f64, f64) {
        let i = ((t * self.height + y) * self.width + x) * 2;
        (f64::from(self.data[i]), f64::from(self.data[i + 1]))
    }

    /// Writes the flat binary form: magic, version, T/W/H, then f32 data,
    /// all little-endian.
    pub fn save_bin(&self, path: &Path) -> Result<()> {
        let mut file = BufWriter::new(std::fs::File::create(path)?);
        file.write_all(b"GFLO")?;
        file.write_all(&1_u32.to_le_bytes())?;
        for dim in [self.frames, self.width, self.height] {
            file.write_all(&(dim as u32).to_le_bytes())?;
        }
        for v in &self.data {
            file.write_all(&v.to_le_bytes())?;
        }
        file.flush()?;
        Ok(())
    }

    pub fn load_bin(path: &Path) -> Result<Self> {
        let mut file = BufReader::new(std::fs::File::open(path)?);
        let mut header = [0_u8; 20];
        file.read_exact(&mut header)
            .map_err(|_| Error::Parse(format!("{}: truncated flow header", path.display())))?;
        if &header[0..4] != b"GFLO" {
            return Err(Error::Parse(format!("{}: not a flow file", path.display())));
        }
        let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().unwrap()) as usize;
        if word(4) != 1 {
            return Err(Error::Parse(format!("{}: unsupported flow version {}", path.display(), word(4))));
        }
        let (frames, width, height) = (word(8), word(12), word(16));
        let n = frames * width * height * 2;
        let mut raw = vec![0_u8; n * 4];
        file.read_exact(&mut raw)
            .map_err(|_| Error::Parse(format!("{}: truncated flow data", path.display())))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Self::new(frames, width, height, data)
    }
}

/// Per-frame mean flow over a fixed 3-row x 4-column partition of the image.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFlow {
    frames: usize,
    /// layout: [t][cell], cells row-major
    values: Vec<(f64, f64)>,
}

impl GridFlow {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn get(&self, t: usize, cell: usize) -> (f64, f64) {
        self.values[t * GRID_CELLS + cell]
    }

    /// `[T, 24]` tensor: per frame, (dx, dy) for each of the 12 cells.
    pub fn to_tensor(&self) -> Tensor {
        let values = self.values.iter().flat_map(|(dx, dy)| [*dx, *dy]).collect();
        Tensor::new(vec![self.frames, 2 * GRID_CELLS], values).expect("sized by construction")
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut file = BufWriter::new(std::fs::File::create(path)?);
        writeln!(file, "t,cell,dx,dy")?;
        for t in 0..self.frames {
            for cell in 0..GRID_CELLS {
                let (dx, dy) = self.get(t, cell);
                writeln!(file, "{t},{cell},{dx},{dy}")?;
            }
        }
        file.flush()?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut values = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if i == 0 {
                if line.trim() != "t,cell,dx,dy" {
                    return Err(Error::Parse(format!("{}: bad grid-flow header", path.display())));
                }
                continue;
            }
            let cells: Vec<&str> = line.trim().split(',').collect();
            if cells.len() != 4 {
                return Err(Error::Parse(format!("{}: bad row '{line}'", path.display())));
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse()
                    .map_err(|_| Error::Parse(format!("{}: bad number '{s}'", path.display())))
            };
            values.push((parse(cells[2])?, parse(cells[3])?));
        }
        if values.len() % GRID_CELLS != 0 {
            return Err(Error::Parse(format!("{}: row count not a multiple of {GRID_CELLS}", path.display())));
        }
        Ok(Self { frames: values.len() / GRID_CELLS, values })
    }
}

/// Averages the pixel flow inside each cell of the 3x4 grid. Cell (r, c)
/// covers the half-open pixel rectangle with column bounds
/// `floor(c*W/4) .. floor((c+1)*W/4)` and row bounds `floor(r*H/3) ..
/// floor((r+1)*H/3)`, so every pixel lands in exactly one cell.
pub fn grid_flow(flow: &FlowField) -> Result<GridFlow> {
    if flow.frames() == 0 {
        return Err(Error::Config("flow field has no frames".into()));
    }
    if flow.width() < GRID_COLS || flow.height() < GRID_ROWS {
        return Err(Error::Config(format!(
            "image {}x{} too small for a {GRID_COLS}x{GRID_ROWS} grid",
            flow.width(),
            flow.height()
        )));
    }
    let col_bound = |c: usize| c * flow.width() / GRID_COLS;
    let row_bound = |r: usize| r * flow.height() / GRID_ROWS;
    let mut values = Vec::with_capacity(flow.frames() * GRID_CELLS);
    for t in 0..flow.frames() {
        for r in 0..GRID_ROWS {
            for c in 0..GRID_COLS {
                let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
                for y in row_bound(r)..row_bound(r + 1) {
                    for x in col_bound(c)..col_bound(c + 1) {
                        let (dx, dy) = flow.get(t, x, y);
                        sx += dx;
                        sy += dy;
                        n += 1.0;
                    }
                }
                values.push((sx / n, sy / n));
            }
        }
    }
    Ok(GridFlow { frames: flow.frames(), values })
}

// ---------------------------------------------------------------------------
// Streams
// ---------------------------------------------------------------------------

/// The input feature streams the aggregator can consume.
///
/// * `X`  — location extracted from the raw observation
/// * `Xr` — location extracted from the reconstructed pose
/// * `P`  — the raw observed pose, flattened
/// * `Pr` — the reconstructed pose, flattened
/// * `C`  — grid optical flow (camera egomotion)
/// * `A`  — the per-frame action feature
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StreamKind {
    X,
    Xr,
    P,
    Pr,
    C,
    A,
}

impl StreamKind {
    pub const ALL: [StreamKind; 6] =
        [StreamKind::X, StreamKind::Xr, StreamKind::P, StreamKind::Pr, StreamKind::C, StreamKind::A];

    /// The short feature code used in reports and on the command line.
    pub fn code(self) -> &'static str {
        match self {
            StreamKind::X => "X",
            StreamKind::Xr => "XR",
            StreamKind::P => "P",
            StreamKind::Pr => "PR",
            StreamKind::C => "C",
            StreamKind::A => "A",
        }
    }

    /// Lowercase stem used in parameter and input names.
    fn stem(self) -> &'static str {
        match self {
            StreamKind::X => "x",
            StreamKind::Xr => "xr",
            StreamKind::P => "p",
            StreamKind::Pr => "pr",
            StreamKind::C => "c",
            StreamKind::A => "a",
        }
    }

    /// Graph input name for this stream.
    pub fn input_name(self) -> String {
        format!("stream_{}", self.stem())
    }

    pub fn parse(code: &str) -> Result<Self> {
        StreamKind::ALL
            .into_iter()
            .find(|k| k.code() == code)
            .ok_or_else(|| Error::Parse(format!("unknown feature code '{code}'")))
    }
}

/// Parses a subset expression such as `XR+PR+C` into a canonically ordered,
/// duplicate-free stream list.
pub fn parse_streams(expr: &str) -> Result<Vec<StreamKind>> {
    let mut streams = Vec::new();
    for code in expr.split('+') {
        let kind = StreamKind::parse(code.trim())?;
        if streams.contains(&kind) {
            return Err(Error::Parse(format!("duplicate feature code '{}' in '{expr}'", kind.code())));
        }
        streams.push(kind);
    }
    if streams.is_empty() {
        return Err(Error::Parse(format!("empty feature subset '{expr}'")));
    }
    streams.sort();
    Ok(streams)
}

/// Renders a stream list back to its `A+B+C` form.
pub fn streams_code(streams: &[StreamKind]) -> String {
    streams.iter().map(|s| s.code()).collect::<Vec<_>>().join("+")
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Aggregator architecture: which streams exist, horizon lengths, and the
/// (small, fixed-depth) channel widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FAConfig {
    pub t_obs: usize,
    pub t_pred: usize,
    /// Canonically ordered, duplicate-free.
    pub streams: Vec<StreamKind>,
    pub joint_count: usize,
    /// Channel width of the action feature a paired pose model emits.
    pub action_channels: usize,
    pub image_size: (f64, f64),
    /// Per-stream embedding width.
    pub embed_channels: usize,
    /// Joint encoder widths (second layer runs at stride 2).
    pub encoder_channels: (usize, usize),
    /// Width between the two decoder deconvolutions.
    pub decoder_mid_channels: usize,
    /// When set, the decoder output is an offset from the last observed
    /// location rather than an absolute coordinate.
    pub offset_mode: bool,
}

impl FAConfig {
    /// Desk-scale default widths for the 18-joint skeleton.
    pub fn standard(
        streams: Vec<StreamKind>,
        joint_count: usize,
        action_channels: usize,
        image_size: (f64, f64),
    ) -> Self {
        Self {
            t_obs: 10,
            t_pred: 10,
            streams,
            joint_count,
            action_channels,
            image_size,
            embed_channels: 16,
            encoder_channels: (64, 96),
            decoder_mid_channels: 32,
            offset_mode: false,
        }
    }

    /// A small variant for gradient checks and fast tests (5-joint skeleton).
    pub fn toy(streams: Vec<StreamKind>, action_channels: usize) -> Self {
        Self {
            t_obs: 10,
            t_pred: 10,
            streams,
            joint_count: 5,
            action_channels,
            image_size: (64.0, 48.0),
            embed_channels: 6,
            encoder_channels: (12, 16),
            decoder_mid_channels: 8,
            offset_mode: false,
        }
    }

    /// Input channel width of one stream.
    pub fn stream_width(&self, kind: StreamKind) -> usize {
        match kind {
            StreamKind::X | StreamKind::Xr => 2,
            StreamKind::P | StreamKind::Pr => self.joint_count * 3,
            StreamKind::C => 2 * GRID_CELLS,
            StreamKind::A => self.action_channels,
        }
    }

    /// Encoded-feature time length (the stride-2 layer halves T, rounding up).
    pub fn t_enc(&self) -> usize {
        (self.t_obs - 1) / 2 + 1
    }

    fn validate(&self) -> Result<()> {
        if self.streams.is_empty() {
            return Err(Error::Config("aggregator needs at least one input stream".into()));
        }
        let mut sorted = self.streams.clone();
        sorted.sort();
        sorted.dedup();
        if sorted != self.streams {
            return Err(Error::Config(format!(
                "streams must be canonically ordered and unique, got {}",
                streams_code(&self.streams)
            )));
        }
        if self.t_obs < 2 || self.t_pred < 2 {
            return Err(Error::Config("t_obs and t_pred must be at least 2".into()));
        }
        // decoder timeline: t_enc -> deconv(k4, s2, crop 1) -> deconv(k3, s1, crop 1)
        let after_first = (self.t_enc() - 1) * 2 + 4 - 2;
        let after_second = after_first + 3 - 1 - 2;
        if after_second != self.t_pred {
            return Err(Error::Config(format!(
                "decoder emits {after_second} frames from t_obs={}, but t_pred={}",
                self.t_obs, self.t_pred
            )));
        }
        if self.joint_count == 0 || self.action_channels == 0 {
            return Err(Error::Config("joint and action channel counts must be positive".into()));
        }
        if self.embed_channels == 0
            || self.encoder_channels.0 == 0
            || self.encoder_channels.1 == 0
            || self.decoder_mid_channels == 0
        {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.image_size.0 <= 0.0 || self.image_size.1 <= 0.0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Graph assembly
// ---------------------------------------------------------------------------

/// Declares one graph input per configured stream.
pub(crate) fn declare_stream_inputs(
    b: &mut GraphBuilder,
    config: &FAConfig,
) -> BTreeMap<StreamKind, NodeId> {
    config
        .streams
        .iter()
        .map(|&kind| {
            let node = b.input(&kind.input_name(), vec![config.t_obs, config.stream_width(kind)]);
            (kind, node)
        })
        .collect()
}

/// One temporal conv + bias + optional ReLU.
fn conv_block(
    b: &mut GraphBuilder,
    name: &str,
    x: NodeId,
    c_in: usize,
    c_out: usize,
    span: usize,
    stride: usize,
    relu: bool,
) -> Result<NodeId> {
    let k = b.param(&format!("fa.{name}.k"), vec![c_out, c_in, span], c_in * span, c_out * span);
    let bias = b.param(&format!("fa.{name}.b"), vec![c_out], c_in, c_out);
    let conv = b.temporal_conv(&format!("fa.{name}.conv"), x, k, stride, PadMode::Same)?;
    let biased = b.add_bias(&format!("fa.{name}.bias"), conv, bias)?;
    Ok(if relu { b.relu(&format!("fa.{name}.relu"), biased) } else { biased })
}

/// Embeds, concatenates, and encodes the streams, then decodes the future
/// trajectory. Returns (encoded, prediction) nodes.
pub(crate) fn append_network(
    b: &mut GraphBuilder,
    config: &FAConfig,
    stream_nodes: &BTreeMap<StreamKind, NodeId>,
) -> Result<(NodeId, NodeId)> {
    let mut embedded = Vec::new();
    for &kind in &config.streams {
        let &node = stream_nodes.get(&kind).ok_or_else(|| {
            Error::Graph(format!("no input node wired for stream {}", kind.code()))
        })?;
        let width = config.stream_width(kind);
        let emb = conv_block(
            b,
            &format!("emb_{}", kind.stem()),
            node,
            width,
            config.embed_channels,
            3,
            1,
            true,
        )?;
        embedded.push(emb);
    }
    let joined = b.concat_last("fa.join", embedded)?;
    let joined_width = config.embed_channels * config.streams.len();
    let (c1, c2) = config.encoder_channels;
    let enc1 = conv_block(b, "enc1", joined, joined_width, c1, 3, 1, true)?;
    let encoded = conv_block(b, "enc2", enc1, c1, c2, 3, 2, true)?;

    let mid = config.decoder_mid_channels;
    let dk1 = b.param("fa.dec1.k", vec![c2, mid, 4], c2 * 4, mid * 4);
    let db1 = b.param("fa.dec1.b", vec![mid], c2, mid);
    let dec1 = b.temporal_deconv("fa.dec1.deconv", encoded, dk1, 2, 1)?;
    let dec1 = b.add_bias("fa.dec1.bias", dec1, db1)?;
    let dec1 = b.relu("fa.dec1.relu", dec1);
    let dk2 = b.param("fa.dec2.k", vec![mid, 2, 3], mid * 3, 2 * 3);
    let db2 = b.param("fa.dec2.b", vec![2], mid, 2);
    let dec2 = b.temporal_deconv("fa.dec2.deconv", dec1, dk2, 1, 1)?;
    let pred = b.add_bias("fa.dec2.bias", dec2, db2)?;
    Ok((encoded, pred))
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Pieces a caller can derive stream inputs from. Only the sources required
/// by the model's configured streams need to be present.
pub struct StreamSource<'a> {
    pub observed: &'a SkeletonSequence,
    pub recon: Option<&'a SkeletonSequence>,
    pub action_seq: Option<&'a Tensor>,
    pub grid: Option<&'a GridFlow>,
    pub layout: &'a SkeletonLayout,
}

/// The feature-aggregator network with its parameters and prebuilt graphs.
#[derive(Clone)]
pub struct FAModel {
    config: FAConfig,
    encode_spec: GraphSpec,
    decode_spec: GraphSpec,
    full_spec: GraphSpec,
    train_spec: GraphSpec,
    params: ModelParams,
}

impl FAModel {
    pub fn new(config: FAConfig, rng_seed: u64) -> Result<Self> {
        config.validate()?;
        let encode_spec = {
            let mut b = GraphBuilder::new();
            let streams = declare_stream_inputs(&mut b, &config);
            let (encoded, _) = append_network(&mut b, &config, &streams)?;
            b.output("fa_encoded", encoded);
            b.finish()
        };
        let decode_spec = {
            let mut b = GraphBuilder::new();
            let encoded = b.input("fa_encoded", vec![config.t_enc(), config.encoder_channels.1]);
            // rebuild only the decoder on top of a provided encoding
            let mid = config.decoder_mid_channels;
            let c2 = config.encoder_channels.1;
            let dk1 = b.param("fa.dec1.k", vec![c2, mid, 4], c2 * 4, mid * 4);
            let db1 = b.param("fa.dec1.b", vec![mid], c2, mid);
            let dec1 = b.temporal_deconv("fa.dec1.deconv", encoded, dk1, 2, 1)?;
            let dec1 = b.add_bias("fa.dec1.bias", dec1, db1)?;
            let dec1 = b.relu("fa.dec1.relu", dec1);
            let dk2 = b.param("fa.dec2.k", vec![mid, 2, 3], mid * 3, 2 * 3);
            let db2 = b.param("fa.dec2.b", vec![2], mid, 2);
            let dec2 = b.temporal_deconv("fa.dec2.deconv", dec1, dk2, 1, 1)?;
            let pred = b.add_bias("fa.dec2.bias", dec2, db2)?;
            b.output("pred", pred);
            b.finish()
        };
        let full_spec = {
            let mut b = GraphBuilder::new();
            let streams = declare_stream_inputs(&mut b, &config);
            let (encoded, pred) = append_network(&mut b, &config, &streams)?;
            b.output("fa_encoded", encoded);
            b.output("pred", pred);
            b.finish()
        };
        let train_spec = {
            let mut b = GraphBuilder::new();
            let streams = declare_stream_inputs(&mut b, &config);
            let (_, pred) = append_network(&mut b, &config, &streams)?;
            let future = b.input("future", vec![config.t_pred, 2]);
            // element mean in normalized coordinates (see the pose model's
            // training loss for the rationale)
            let sq = b.squared_error("loss_pred_sum", pred, future)?;
            let loss = b.scale("loss_pred", sq, 1.0 / (config.t_pred * 2) as f64);
            b.output("loss_pred", loss);
            b.output("pred", pred);
            b.finish()
        };
        let mut params = ModelParams::new(rng_seed);
        params.register_graph(&train_spec)?;
        Ok(Self { config, encode_spec, decode_spec, full_spec, train_spec, params })
    }

    pub fn config(&self) -> &FAConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    /// The loss graph: stream inputs plus `future`, outputs `loss_pred` and
    /// `pred`.
    pub fn train_spec(&self) -> &GraphSpec {
        &self.train_spec
    }

    /// Splits the borrow so an optimizer can step the parameters while
    /// holding the loss graph.
    pub(crate) fn train_parts(&mut self) -> (&GraphSpec, &mut ModelParams) {
        (&self.train_spec, &mut self.params)
    }

    /// Stream inputs to both `fa_encoded` and `pred`.
    pub fn full_spec(&self) -> &GraphSpec {
        &self.full_spec
    }

    /// Builds the normalized input map for the configured streams from raw
    /// sources. Missing required sources and frame-count mismatches are
    /// errors.
    pub fn inputs_from(&self, src: &StreamSource) -> Result<TensorMap> {
        let t = self.config.t_obs;
        let mut map = TensorMap::new();
        for &kind in &self.config.streams {
            let tensor = stream_tensor(&self.config, kind, src)?;
            if tensor.shape()[0] != t {
                return Err(Error::ShapeMismatch(format!(
                    "stream {} spans {} frames, expected {t}",
                    kind.code(),
                    tensor.shape()[0]
                )));
            }
            map.insert(kind.input_name(), tensor);
        }
        Ok(map)
    }

    /// Channel-wise aggregation of the full-model streams: grid flow, the
    /// reconstructed pose, its location track, and the action feature.
    pub fn aggregate(
        &self,
        grid: &GridFlow,
        recon: &SkeletonSequence,
        location: &Trajectory,
        action: &Tensor,
    ) -> Result<Tensor> {
        let (w, h) = self.config.image_size;
        let mut map = TensorMap::new();
        for &kind in &self.config.streams {
            let tensor = match kind {
                StreamKind::Xr => location_tensor(location, w, h)?,
                StreamKind::Pr => pose_tensor(recon, w, h)?,
                StreamKind::C => {
                    let mut t = grid.to_tensor();
                    for pair in t.values_mut().chunks_mut(2) {
                        pair[0] /= w;
                        pair[1] /= h;
                    }
                    t
                }
                StreamKind::A => action.clone(),
                other => {
                    return Err(Error::Config(format!(
                        "aggregate() covers the reconstructed-feature streams; configure inputs_from for {}",
                        other.code()
                    )))
                }
            };
            map.insert(kind.input_name(), tensor);
        }
        self.encode_streams(&map)
    }

    /// Runs the embedding + encoder stacks over prepared stream inputs.
    pub fn encode_streams(&self, inputs: &TensorMap) -> Result<Tensor> {
        let mut out = forward(&self.encode_spec, inputs, &self.params)?;
        Ok(out.remove("fa_encoded").expect("declared output"))
    }

    /// Decodes an encoded feature into a `t_pred`-point pixel trajectory.
    pub fn predict(&self, encoded: &Tensor) -> Result<Trajectory> {
        let inputs = TensorMap::from([("fa_encoded".to_string(), encoded.clone())]);
        let mut out = forward(&self.decode_spec, &inputs, &self.params)?;
        Ok(self.trajectory_from(&out.remove("pred").expect("declared output")))
    }

    /// One pass from stream inputs to the predicted trajectory.
    pub fn predict_streams(&self, inputs: &TensorMap) -> Result<Trajectory> {
        let mut out = forward(&self.full_spec, inputs, &self.params)?;
        Ok(self.trajectory_from(&out.remove("pred").expect("declared output")))
    }

    /// Like [`predict_streams`](Self::predict_streams), but resolves the
    /// offset-mode output back to an absolute pixel trajectory.
    pub fn predict_resolved(&self, inputs: &TensorMap, last_observed: (f64, f64)) -> Result<Trajectory> {
        let mut out = forward(&self.full_spec, inputs, &self.params)?;
        Ok(self.resolve_prediction(&out.remove("pred").expect("declared output"), last_observed))
    }

    /// Denormalizes a `[t_pred, 2]` network output into pixels.
    pub fn trajectory_from(&self, pred: &Tensor) -> Trajectory {
        let (w, h) = self.config.image_size;
        Trajectory::new(pred.values().chunks(2).map(|p| (p[0] * w, p[1] * h)).collect())
    }

    /// Normalized `[t_pred, 2]` training target for a future trajectory
    /// (offset by the last observed location in offset mode).
    pub fn future_target(&self, future: &Trajectory, last_observed: (f64, f64)) -> Result<Tensor> {
        if future.len() != self.config.t_pred {
            return Err(Error::ShapeMismatch(format!(
                "future has {} points, expected {}",
                future.len(),
                self.config.t_pred
            )));
        }
        let (w, h) = self.config.image_size;
        let (ox, oy) = if self.config.offset_mode { last_observed } else { (0.0, 0.0) };
        let values = future
            .points()
            .iter()
            .flat_map(|(x, y)| [(x - ox) / w, (y - oy) / h])
            .collect();
        Tensor::new(vec![self.config.t_pred, 2], values)
    }

    /// Inverse of [`future_target`](Self::future_target): maps a network
    /// output back to an absolute pixel trajectory.
    pub fn resolve_prediction(&self, pred: &Tensor, last_observed: (f64, f64)) -> Trajectory {
        let base = self.trajectory_from(pred);
        if !self.config.offset_mode {
            return base;
        }
        Trajectory::new(
            base.points()
                .iter()
                .map(|(x, y)| (x + last_observed.0, y + last_observed.1))
                .collect(),
        )
    }
}

/// One normalized stream tensor from raw sources; errors if the source the
/// stream needs is absent.
pub(crate) fn stream_tensor(config: &FAConfig, kind: StreamKind, src: &StreamSource) -> Result<Tensor> {
    let (w, h) = config.image_size;
    match kind {
        StreamKind::X => location_tensor(&extract_location(src.observed, src.layout), w, h),
        StreamKind::Xr => {
            let recon = src
                .recon
                .ok_or_else(|| Error::Config("stream XR needs a reconstructed pose".into()))?;
            location_tensor(&extract_location(recon, src.layout), w, h)
        }
        StreamKind::P => pose_tensor(src.observed, w, h),
        StreamKind::Pr => {
            let recon = src
                .recon
                .ok_or_else(|| Error::Config("stream PR needs a reconstructed pose".into()))?;
            pose_tensor(recon, w, h)
        }
        StreamKind::C => {
            let grid =
                src.grid.ok_or_else(|| Error::Config("stream C needs grid flow".into()))?;
            let mut t = grid.to_tensor();
            for pair in t.values_mut().chunks_mut(2) {
                pair[0] /= w;
                pair[1] /= h;
            }
            Ok(t)
        }
        StreamKind::A => Ok(src
            .action_seq
            .ok_or_else(|| Error::Config("stream A needs an action feature".into()))?
            .clone()),
    }
}

fn location_tensor(traj: &Trajectory, w: f64, h: f64) -> Result<Tensor> {
    let values = traj.points().iter().flat_map(|(x, y)| [x / w, y / h]).collect();
    Tensor::new(vec![traj.len(), 2], values)
}

fn pose_tensor(seq: &SkeletonSequence, w: f64, h: f64) -> Result<Tensor> {
    let t = seq.frames();
    let k = seq.joint_count();
    seq.to_tensor_scaled(w, h).reshaped(vec![t, k * 3])
}

/// Prediction loss: sum over timesteps of the squared L2 distance between
/// predicted and ground-truth points.
pub fn loss_prediction(pred: &Trajectory, target: &Trajectory) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::ShapeMismatch(format!(
            "trajectory lengths {} vs {}",
            pred.len(),
            target.len()
        )));
    }
    let mut acc = 0.0;
    for (a, b) in pred.points().iter().zip(target.points()) {
        let dx = a.0 - b.0;
        let dy = a.1 - b.1;
        acc += dx * dx + dy * dy;
    }
    Ok(acc)
}
