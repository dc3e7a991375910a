//! Forward and reverse-mode interpreters for [`GraphSpec`].
//!
//! Forward walks the node list in order (already topological); backward walks
//! it in reverse, accumulating vector-Jacobian products into per-node buffers
//! and harvesting gradients at `Param` nodes. Both are pure functions of
//! (inputs, params), so repeated calls are bitwise identical.

use std::collections::BTreeMap;

use super::graph::{GraphSpec, Op, PadMode};
use super::{ModelParams, Tensor, TensorMap};
use crate::{Error, Result};

/// Parameter name -> flat gradient.
pub type GradMap = BTreeMap<String, Vec<f64>>;

/// Evaluates every named output of the graph.
///
/// Errors if an input is missing or has the wrong shape, or if any output
/// contains a non-finite value.
pub fn forward(spec: &GraphSpec, inputs: &TensorMap, params: &ModelParams) -> Result<TensorMap> {
    let values = eval_nodes(spec, inputs, params)?;
    let mut out = TensorMap::new();
    for (name, id) in &spec.outputs {
        let t = &values[*id];
        if !t.all_finite() {
            return Err(Error::NonFinite(format!("output '{name}'")));
        }
        out.insert(name.clone(), t.clone());
    }
    Ok(out)
}

/// Runs forward then reverse-mode accumulation from the named scalar output.
/// Returns the loss value and the gradient of the loss for every parameter
/// the loss depends on.
pub fn loss_and_grads(
    spec: &GraphSpec,
    inputs: &TensorMap,
    params: &ModelParams,
    loss: &str,
) -> Result<(f64, GradMap)> {
    let loss_id = spec.output_id(loss)?;
    let values = eval_nodes(spec, inputs, params)?;
    if !values[loss_id].is_scalar() {
        return Err(Error::Graph(format!(
            "loss output '{loss}' has shape {:?}, expected scalar",
            values[loss_id].shape()
        )));
    }
    let loss_value = values[loss_id].values()[0];
    if !loss_value.is_finite() {
        return Err(Error::NonFinite(format!("loss '{loss}'")));
    }
    let grads = backprop(spec, &values, loss_id, 1.0)?;
    Ok((loss_value, grads))
}

/// Accumulates `seed * dloss/dparam` into the stored gradients of `params`.
/// Returns the loss value. Callers are responsible for zeroing gradients
/// beforehand (sgd_step zeroes them after each update).
pub fn backward(
    spec: &GraphSpec,
    inputs: &TensorMap,
    params: &mut ModelParams,
    loss: &str,
    seed: f64,
) -> Result<f64> {
    let (loss_value, grads) = loss_and_grads(spec, inputs, params, loss)?;
    params.accumulate(&grads, seed)?;
    Ok(loss_value)
}

/// Like [`backward`], but returns every declared graph output, letting a
/// training step log loss components without paying for a second forward
/// pass.
pub fn backward_outputs(
    spec: &GraphSpec,
    inputs: &TensorMap,
    params: &mut ModelParams,
    loss: &str,
    seed: f64,
) -> Result<TensorMap> {
    let loss_id = spec.output_id(loss)?;
    let values = eval_nodes(spec, inputs, params)?;
    if !values[loss_id].is_scalar() {
        return Err(Error::Graph(format!(
            "loss output '{loss}' has shape {:?}, expected scalar",
            values[loss_id].shape()
        )));
    }
    if !values[loss_id].values()[0].is_finite() {
        return Err(Error::NonFinite(format!("loss '{loss}'")));
    }
    let grads = backprop(spec, &values, loss_id, 1.0)?;
    params.accumulate(&grads, seed)?;
    let mut out = TensorMap::new();
    for (name, id) in &spec.outputs {
        let t = &values[*id];
        if !t.all_finite() {
            return Err(Error::NonFinite(format!("output '{name}'")));
        }
        out.insert(name.clone(), t.clone());
    }
    Ok(out)
}

fn eval_nodes(spec: &GraphSpec, inputs: &TensorMap, params: &ModelParams) -> Result<Vec<Tensor>> {
    let mut values: Vec<Tensor> = Vec::with_capacity(spec.nodes.len());
    for node in &spec.nodes {
        let t = match &node.op {
            Op::Input { name } => {
                let t = inputs.get(name).ok_or_else(|| {
                    Error::Graph(format!("missing input '{name}' for node '{}'", node.label))
                })?;
                if t.shape() != node.shape.as_slice() {
                    return Err(Error::ShapeMismatch(format!(
                        "input '{name}' has shape {:?}, node '{}' expects {:?}",
                        t.shape(),
                        node.label,
                        node.shape
                    )));
                }
                t.clone()
            }
            Op::Param { name } => {
                let t = params.get(name)?;
                if t.shape() != node.shape.as_slice() {
                    return Err(Error::ShapeMismatch(format!(
                        "parameter '{name}' has shape {:?}, node '{}' expects {:?}",
                        t.shape(),
                        node.label,
                        node.shape
                    )));
                }
                t.clone()
            }
            Op::Constant { index } => spec.constants[*index].clone(),
            op => eval_op(op, &node.shape, &values),
        };
        debug_assert_eq!(t.shape(), node.shape.as_slice(), "node '{}'", node.label);
        values.push(t);
    }
    Ok(values)
}

fn eval_op(op: &Op, out_shape: &[usize], values: &[Tensor]) -> Tensor {
    let mut out = Tensor::zeros(out_shape);
    match op {
        Op::MatMul { lhs, rhs } => {
            let (a, b) = (&values[*lhs], &values[*rhs]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            matmul_into(a.values(), b.values(), out.values_mut(), m, k, n);
        }
        Op::FrameLeftMul { matrix, features } => {
            let (m, x) = (&values[*matrix], &values[*features]);
            let (t_len, joints, ch) = dims3(x);
            let mv = m.values();
            let xv = x.values();
            let ov = out.values_mut();
            for t in 0..t_len {
                let frame = &xv[t * joints * ch..(t + 1) * joints * ch];
                let oframe = &mut ov[t * joints * ch..(t + 1) * joints * ch];
                for i in 0..joints {
                    let orow = &mut oframe[i * ch..(i + 1) * ch];
                    for j in 0..joints {
                        let coeff = mv[i * joints + j];
                        if coeff == 0.0 {
                            continue;
                        }
                        let xrow = &frame[j * ch..(j + 1) * ch];
                        for (o, xval) in orow.iter_mut().zip(xrow) {
                            *o += coeff * xval;
                        }
                    }
                }
            }
        }
        Op::FrameRightMul { features, weight } => {
            let (x, w) = (&values[*features], &values[*weight]);
            let (t_len, joints, ch) = dims3(x);
            let c_out = w.shape()[1];
            // rows of [T*K, C] times W[C, C']
            matmul_into(x.values(), w.values(), out.values_mut(), t_len * joints, ch, c_out);
        }
        Op::Add { lhs, rhs } => {
            for ((o, a), b) in out
                .values_mut()
                .iter_mut()
                .zip(values[*lhs].values())
                .zip(values[*rhs].values())
            {
                *o = a + b;
            }
        }
        Op::AddBias { x, bias } => {
            let b = values[*bias].values();
            let c = b.len();
            for (orow, xrow) in out
                .values_mut()
                .chunks_mut(c)
                .zip(values[*x].values().chunks(c))
            {
                for ((o, xv), bv) in orow.iter_mut().zip(xrow).zip(b) {
                    *o = xv + bv;
                }
            }
        }
        Op::Relu { x } => {
            for (o, v) in out.values_mut().iter_mut().zip(values[*x].values()) {
                *o = v.max(0.0);
            }
        }
        Op::Sigmoid { x } => {
            for (o, v) in out.values_mut().iter_mut().zip(values[*x].values()) {
                *o = sigmoid(*v);
            }
        }
        Op::TemporalConvDepthwise { x, kernel } => {
            let (xt, kt) = (&values[*x], &values[*kernel]);
            let (t_len, joints, ch) = dims3(xt);
            let span = kt.shape()[1];
            let pad = (span - 1) / 2;
            let (xv, kv, ov) = (xt.values(), kt.values(), out.values_mut());
            let frame = joints * ch;
            for t in 0..t_len {
                let oframe = &mut ov[t * frame..(t + 1) * frame];
                for d in 0..span {
                    let ts = t + d;
                    if ts < pad || ts - pad >= t_len {
                        continue;
                    }
                    let sframe = &xv[(ts - pad) * frame..(ts - pad + 1) * frame];
                    for j in 0..joints {
                        for c in 0..ch {
                            oframe[j * ch + c] += sframe[j * ch + c] * kv[c * span + d];
                        }
                    }
                }
            }
        }
        Op::TemporalConv { x, kernel, stride, pad } => {
            let (xt, kt) = (&values[*x], &values[*kernel]);
            let (t_in, c_in) = (xt.shape()[0], xt.shape()[1]);
            let (c_out, span) = (kt.shape()[0], kt.shape()[2]);
            let t_out = out_shape[0];
            let pad_left = match pad {
                PadMode::Same => (span - 1) / 2,
                PadMode::Valid => 0,
            };
            let (xv, kv, ov) = (xt.values(), kt.values(), out.values_mut());
            for to in 0..t_out {
                let orow = &mut ov[to * c_out..(to + 1) * c_out];
                for d in 0..span {
                    let ts = to * stride + d;
                    if ts < pad_left || ts - pad_left >= t_in {
                        continue;
                    }
                    let xrow = &xv[(ts - pad_left) * c_in..(ts - pad_left + 1) * c_in];
                    for (co, o) in orow.iter_mut().enumerate() {
                        let krow = &kv[(co * c_in) * span..];
                        let mut acc = 0.0;
                        for (ci, xval) in xrow.iter().enumerate() {
                            acc += xval * krow[ci * span + d];
                        }
                        *o += acc;
                    }
                }
            }
        }
        Op::TemporalDeconv { x, kernel, stride, crop } => {
            let (xt, kt) = (&values[*x], &values[*kernel]);
            let (t_in, c_in) = (xt.shape()[0], xt.shape()[1]);
            let (c_out, span) = (kt.shape()[1], kt.shape()[2]);
            let t_out = out_shape[0];
            let (xv, kv, ov) = (xt.values(), kt.values(), out.values_mut());
            for t in 0..t_in {
                let xrow = &xv[t * c_in..(t + 1) * c_in];
                for d in 0..span {
                    let tp = t * stride + d;
                    if tp < *crop || tp - crop >= t_out {
                        continue;
                    }
                    let orow = &mut ov[(tp - crop) * c_out..(tp - crop + 1) * c_out];
                    for (ci, xval) in xrow.iter().enumerate() {
                        if *xval == 0.0 {
                            continue;
                        }
                        let krow = &kv[(ci * c_out) * span..];
                        for (co, o) in orow.iter_mut().enumerate() {
                            *o += xval * krow[co * span + d];
                        }
                    }
                }
            }
        }
        Op::ConcatLast { parts } => {
            let rank = out_shape.len();
            let total = out_shape[rank - 1];
            let lead: usize = out_shape[..rank - 1].iter().product();
            let ov = out.values_mut();
            let mut offset = 0;
            for &p in parts {
                let pt = &values[p];
                let width = pt.shape()[rank - 1];
                for row in 0..lead {
                    ov[row * total + offset..row * total + offset + width]
                        .copy_from_slice(&pt.values()[row * width..(row + 1) * width]);
                }
                offset += width;
            }
        }
        Op::SliceLast { x, start, len } => {
            let xt = &values[*x];
            let rank = xt.shape().len();
            let width = xt.shape()[rank - 1];
            let lead: usize = xt.shape()[..rank - 1].iter().product();
            let ov = out.values_mut();
            for row in 0..lead {
                ov[row * len..(row + 1) * len]
                    .copy_from_slice(&xt.values()[row * width + start..row * width + start + len]);
            }
        }
        Op::SliceTime { x, start, len } => {
            let xt = &values[*x];
            let step: usize = xt.shape()[1..].iter().product();
            out.values_mut()
                .copy_from_slice(&xt.values()[start * step..(start + len) * step]);
        }
        Op::Reshape { x, .. } => {
            out.values_mut().copy_from_slice(values[*x].values());
        }
        Op::MeanJoints { x } => {
            let xt = &values[*x];
            let (t_len, joints, ch) = dims3(xt);
            let inv = 1.0 / joints as f64;
            let (xv, ov) = (xt.values(), out.values_mut());
            for t in 0..t_len {
                let orow = &mut ov[t * ch..(t + 1) * ch];
                for j in 0..joints {
                    let xrow = &xv[(t * joints + j) * ch..(t * joints + j + 1) * ch];
                    for (o, xval) in orow.iter_mut().zip(xrow) {
                        *o += xval * inv;
                    }
                }
            }
        }
        Op::MeanTime { x } => {
            let xt = &values[*x];
            let (t_len, ch) = (xt.shape()[0], xt.shape()[1]);
            let inv = 1.0 / t_len as f64;
            let ov = out.values_mut();
            for row in xt.values().chunks(ch) {
                for (o, xval) in ov.iter_mut().zip(row) {
                    *o += xval * inv;
                }
            }
        }
        Op::HipMidpoint { x, left, right } => {
            let xt = &values[*x];
            let (t_len, _joints, ch) = dims3(xt);
            let (xv, ov) = (xt.values(), out.values_mut());
            let joints = xt.shape()[1];
            for t in 0..t_len {
                let l = (t * joints + left) * ch;
                let r = (t * joints + right) * ch;
                ov[t * 2] = 0.5 * (xv[l] + xv[r]);
                ov[t * 2 + 1] = 0.5 * (xv[l + 1] + xv[r + 1]);
            }
        }
        Op::Scale { x, factor } => {
            for (o, v) in out.values_mut().iter_mut().zip(values[*x].values()) {
                *o = factor * v;
            }
        }
        Op::SquaredError { pred, target } => {
            let mut acc = 0.0;
            for (p, t) in values[*pred].values().iter().zip(values[*target].values()) {
                let d = p - t;
                acc += d * d;
            }
            out.values_mut()[0] = acc;
        }
        Op::SoftmaxCrossEntropy { logits, target } => {
            let z = values[*logits].values();
            let y = values[*target].values();
            let lse = log_sum_exp(z);
            let dot: f64 = y.iter().zip(z).map(|(a, b)| a * b).sum();
            out.values_mut()[0] = lse - dot;
        }
        Op::Input { .. } | Op::Param { .. } | Op::Constant { .. } => unreachable!(),
    }
    out
}

/// Reverse sweep from `loss_id`, seeding with `seed`. Only nodes that are both
/// reachable from the loss and lie on a path from some parameter get buffers.
fn backprop(spec: &GraphSpec, values: &[Tensor], loss_id: usize, seed: f64) -> Result<GradMap> {
    let n = spec.nodes.len();
    // needs[i]: some parameter feeds node i
    let mut needs = vec![false; n];
    for (i, node) in spec.nodes.iter().enumerate() {
        needs[i] = matches!(node.op, Op::Param { .. })
            || node.op.inputs().iter().any(|&j| needs[j]);
    }
    // reach[i]: node i feeds the loss
    let mut reach = vec![false; n];
    reach[loss_id] = true;
    for i in (0..n).rev() {
        if reach[i] {
            for j in spec.nodes[i].op.inputs() {
                reach[j] = true;
            }
        }
    }
    let active: Vec<bool> = needs.iter().zip(&reach).map(|(a, b)| *a && *b).collect();

    let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
    if active[loss_id] {
        grads[loss_id] = Some(vec![seed]);
    }

    let mut out = GradMap::new();
    for i in (0..n).rev() {
        let Some(g) = grads[i].take() else { continue };
        let node = &spec.nodes[i];
        match &node.op {
            Op::Param { name } => {
                // a param may appear at several nodes; sum contributions
                match out.get_mut(name) {
                    Some(existing) => {
                        for (dst, src) in existing.iter_mut().zip(&g) {
                            *dst += src;
                        }
                    }
                    None => {
                        out.insert(name.clone(), g);
                    }
                }
                continue;
            }
            Op::Input { .. } | Op::Constant { .. } => continue,
            op => {
                backprop_op(op, &node.shape, values, &g, &mut grads, &active);
            }
        }
    }
    Ok(out)
}

fn grad_buf<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    active: &[bool],
    id: usize,
    numel: usize,
) -> Option<&'a mut [f64]> {
    if !active[id] {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![0.0; numel]).as_mut_slice())
}

#[allow(clippy::too_many_lines)]
fn backprop_op(
    op: &Op,
    out_shape: &[usize],
    values: &[Tensor],
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
    active: &[bool],
) {
    match op {
        Op::MatMul { lhs, rhs } => {
            let (a, b) = (&values[*lhs], &values[*rhs]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            if let Some(da) = grad_buf(grads, active, *lhs, m * k) {
                // dA = g . B^T
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += g[i * n + j] * b.values()[p * n + j];
                        }
                        da[i * k + p] += acc;
                    }
                }
            }
            if let Some(db) = grad_buf(grads, active, *rhs, k * n) {
                // dB = A^T . g
                for p in 0..k {
                    for i in 0..m {
                        let coeff = a.values()[i * k + p];
                        if coeff == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            db[p * n + j] += coeff * g[i * n + j];
                        }
                    }
                }
            }
        }
        Op::FrameLeftMul { matrix, features } => {
            let m = &values[*matrix];
            let x = &values[*features];
            let (t_len, joints, ch) = dims3(x);
            let frame = joints * ch;
            if let Some(dx) = grad_buf(grads, active, *features, x.numel()) {
                let mv = m.values();
                for t in 0..t_len {
                    let gframe = &g[t * frame..(t + 1) * frame];
                    let dframe = &mut dx[t * frame..(t + 1) * frame];
                    for j in 0..joints {
                        let drow = &mut dframe[j * ch..(j + 1) * ch];
                        for i in 0..joints {
                            let coeff = mv[i * joints + j];
                            if coeff == 0.0 {
                                continue;
                            }
                            let grow = &gframe[i * ch..(i + 1) * ch];
                            for (d, gv) in drow.iter_mut().zip(grow) {
                                *d += coeff * gv;
                            }
                        }
                    }
                }
            }
        }
        Op::FrameRightMul { features, weight } => {
            let (x, w) = (&values[*features], &values[*weight]);
            let (t_len, joints, ch) = dims3(x);
            let c_out = w.shape()[1];
            let rows = t_len * joints;
            if let Some(dx) = grad_buf(grads, active, *features, x.numel()) {
                // dX = g . W^T
                let wv = w.values();
                for r in 0..rows {
                    let grow = &g[r * c_out..(r + 1) * c_out];
                    let drow = &mut dx[r * ch..(r + 1) * ch];
                    for (c, d) in drow.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for (j, gv) in grow.iter().enumerate() {
                            acc += gv * wv[c * c_out + j];
                        }
                        *d += acc;
                    }
                }
            }
            if let Some(dw) = grad_buf(grads, active, *weight, w.numel()) {
                // dW = X^T . g
                let xv = x.values();
                for r in 0..rows {
                    let xrow = &xv[r * ch..(r + 1) * ch];
                    let grow = &g[r * c_out..(r + 1) * c_out];
                    for (c, xval) in xrow.iter().enumerate() {
                        if *xval == 0.0 {
                            continue;
                        }
                        let dwrow = &mut dw[c * c_out..(c + 1) * c_out];
                        for (d, gv) in dwrow.iter_mut().zip(grow) {
                            *d += xval * gv;
                        }
                    }
                }
            }
        }
        Op::Add { lhs, rhs } => {
            for &id in &[*lhs, *rhs] {
                if let Some(d) = grad_buf(grads, active, id, g.len()) {
                    for (dst, src) in d.iter_mut().zip(g) {
                        *dst += src;
                    }
                }
            }
        }
        Op::AddBias { x, bias } => {
            if let Some(dx) = grad_buf(grads, active, *x, g.len()) {
                for (dst, src) in dx.iter_mut().zip(g) {
                    *dst += src;
                }
            }
            let c = values[*bias].numel();
            if let Some(db) = grad_buf(grads, active, *bias, c) {
                for row in g.chunks(c) {
                    for (d, gv) in db.iter_mut().zip(row) {
                        *d += gv;
                    }
                }
            }
        }
        Op::Relu { x } => {
            if let Some(dx) = grad_buf(grads, active, *x, g.len()) {
                for ((d, gv), xv) in dx.iter_mut().zip(g).zip(values[*x].values()) {
                    if *xv > 0.0 {
                        *d += gv;
                    }
                }
            }
        }
        Op::Sigmoid { x } => {
            if let Some(dx) = grad_buf(grads, active, *x, g.len()) {
                for ((d, gv), xv) in dx.iter_mut().zip(g).zip(values[*x].values()) {
                    let s = sigmoid(*xv);
                    *d += gv * s * (1.0 - s);
                }
            }
        }
        Op::TemporalConvDepthwise { x, kernel } => {
            let (xt, kt) = (&values[*x], &values[*kernel]);
            let (t_len, joints, ch) = dims3(xt);
            let span = kt.shape()[1];
            let pad = (span - 1) / 2;
            let frame = joints * ch;
            if let Some(dx) = grad_buf(grads, active, *x, xt.numel()) {
                let kv = kt.values();
                for t in 0..t_len {
                    let gframe = &g[t * frame..(t + 1) * frame];
                    for d in 0..span {
                        let ts = t + d;
                        if ts < pad || ts - pad >= t_len {
                            continue;
                        }
                        let dframe = &mut dx[(ts - pad) * frame..(ts - pad + 1) * frame];
                        for j in 0..joints {
                            for c in 0..ch {
                                dframe[j * ch + c] += gframe[j * ch + c] * kv[c * span + d];
                            }
                        }
                    }
                }
            }
            if let Some(dk) = grad_buf(grads, active, *kernel, kt.numel()) {
                let xv = xt.values();
                for t in 0..t_len {
                    let gframe = &g[t * frame..(t + 1) * frame];
                    for d in 0..span {
                        let ts = t + d;
                        if ts < pad || ts - pad >= t_len {
                            continue;
                        }
                        let sframe = &xv[(ts - pad) * frame..(ts - pad + 1) * frame];
                        for j in 0..joints {
                            for c in 0..ch {
                                dk[c * span + d] += sframe[j * ch + c] * gframe[j * ch + c];
                            }
                        }
                    }
                }
            }
        }
        Op::TemporalConv { x, kernel, stride, pad } => {
            let (xt, kt) = (&values[*x], &values[*kernel]);
            let (t_in, c_in) = (xt.shape()[0], xt.shape()[1]);
            let (c_out, span) = (kt.shape()[0], kt.shape()[2]);
            let t_out = out_shape[0];
            let pad_left = match pad {
                PadMode::Same => (span - 1) / 2,
                PadMode::Valid => 0,
            };
            if let Some(dx) = grad_buf(grads, active, *x, xt.numel()) {
                let kv = kt.values();
                for to in 0..t_out {
                    let grow = &g[to * c_out..(to + 1) * c_out];
                    for d in 0..span {
                        let ts = to * stride + d;
                        if ts < pad_left || ts - pad_left >= t_in {
                            continue;
                        }
                        let drow = &mut dx[(ts - pad_left) * c_in..(ts - pad_left + 1) * c_in];
                        for (co, gv) in grow.iter().enumerate() {
                            if *gv == 0.0 {
                                continue;
                            }
                            let krow = &kv[(co * c_in) * span..];
                            for (ci, dv) in drow.iter_mut().enumerate() {
                                *dv += gv * krow[ci * span + d];
                            }
                        }
                    }
                }
            }
            if let Some(dk) = grad_buf(grads, active, *kernel, kt.numel()) {
                let xv = xt.values();
                for to in 0..t_out {
                    let grow = &g[to * c_out..(to + 1) * c_out];
                    for d in 0..span {
                        let ts = to * stride + d;
                        if ts < pad_left || ts - pad_left >= t_in {
                            continue;
                        }
                        let xrow = &xv[(ts - pad_left) * c_in..(ts - pad_left + 1) * c_in];
                        for (co, gv) in grow.iter().enumerate() {
                            if *gv == 0.0 {
                                continue;
                            }
                            for (ci, xval) in xrow.iter().enumerate() {
                                dk[(co * c_in + ci) * span + d] += gv * xval;
                            }
                        }
                    }
                }
            }
        }
        Op::TemporalDeconv { x, kernel, stride, crop } => {
            let (xt, kt) = (&values[*x], &values[*kernel]);
            let (t_in, c_in) = (xt.shape()[0], xt.shape()[1]);
            let (c_out, span) = (kt.shape()[1], kt.shape()[2]);
            let t_out = out_shape[0];
            if let Some(dx) = grad_buf(grads, active, *x, xt.numel()) {
                let kv = kt.values();
                for t in 0..t_in {
                    let drow = &mut dx[t * c_in..(t + 1) * c_in];
                    for d in 0..span {
                        let tp = t * stride + d;
                        if tp < *crop || tp - crop >= t_out {
                            continue;
                        }
                        let grow = &g[(tp - crop) * c_out..(tp - crop + 1) * c_out];
                        for (ci, dv) in drow.iter_mut().enumerate() {
                            let krow = &kv[(ci * c_out) * span..];
                            let mut acc = 0.0;
                            for (co, gv) in grow.iter().enumerate() {
                                acc += gv * krow[co * span + d];
                            }
                            *dv += acc;
                        }
                    }
                }
            }
            if let Some(dk) = grad_buf(grads, active, *kernel, kt.numel()) {
                let xv = xt.values();
                for t in 0..t_in {
                    let xrow = &xv[t * c_in..(t + 1) * c_in];
                    for d in 0..span {
                        let tp = t * stride + d;
                        if tp < *crop || tp - crop >= t_out {
                            continue;
                        }
                        let grow = &g[(tp - crop) * c_out..(tp - crop + 1) * c_out];
                        for (ci, xval) in xrow.iter().enumerate() {
                            if *xval == 0.0 {
                                continue;
                            }
                            for (co, gv) in grow.iter().enumerate() {
                                dk[(ci * c_out + co) * span + d] += xval * gv;
                            }
                        }
                    }
                }
            }
        }
        Op::ConcatLast { parts } => {
            let rank = out_shape.len();
            let total = out_shape[rank - 1];
            let lead: usize = out_shape[..rank - 1].iter().product();
            let mut offset = 0;
            for &p in parts {
                let width = values[p].shape()[rank - 1];
                if let Some(dp) = grad_buf(grads, active, p, values[p].numel()) {
                    for row in 0..lead {
                        for w in 0..width {
                            dp[row * width + w] += g[row * total + offset + w];
                        }
                    }
                }
                offset += width;
            }
        }
        Op::SliceLast { x, start, len } => {
            let xt = &values[*x];
            let rank = xt.shape().len();
            let width = xt.shape()[rank - 1];
            let lead: usize = xt.shape()[..rank - 1].iter().product();
            if let Some(dx) = grad_buf(grads, active, *x, xt.numel()) {
                for row in 0..lead {
                    for w in 0..*len {
                        dx[row * width + start + w] += g[row * len + w];
                    }
                }
            }
        }
        Op::SliceTime { x, start, len } => {
            let xt = &values[*x];
            let step: usize = xt.shape()[1..].iter().product();
            if let Some(dx) = grad_buf(grads, active, *x, xt.numel()) {
                for (dst, src) in dx[start * step..(start + len) * step].iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
        Op::Reshape { x, .. } => {
            if let Some(dx) = grad_buf(grads, active, *x, g.len()) {
                for (dst, src) in dx.iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
        Op::MeanJoints { x } => {
            let xt = &values[*x];
            let (t_len, joints, ch) = dims3(xt);
            let inv = 1.0 / joints as f64;
            if let Some(dx) = grad_buf(grads, active, *x, xt.numel()) {
                for t in 0..t_len {
                    let grow = &g[t * ch..(t + 1) * ch];
                    for j in 0..joints {
                        let drow = &mut dx[(t * joints + j) * ch..(t * joints + j + 1) * ch];
                        for (d, gv) in drow.iter_mut().zip(grow) {
                            *d += gv * inv;
                        }
                    }
                }
            }
        }
        Op::MeanTime { x } => {
            let xt = &values[*x];
            let (t_len, ch) = (xt.shape()[0], xt.shape()[1]);
            let inv = 1.0 / t_len as f64;
            if let Some(dx) = grad_buf(grads, active, *x, xt.numel()) {
                for drow in dx.chunks_mut(ch) {
                    for (d, gv) in drow.iter_mut().zip(g) {
                        *d += gv * inv;
                    }
                }
            }
        }
        Op::HipMidpoint { x, left, right } => {
            let xt = &values[*x];
            let (t_len, joints, ch) = dims3(xt);
            if let Some(dx) = grad_buf(grads, active, *x, xt.numel()) {
                for t in 0..t_len {
                    for &j in &[*left, *right] {
                        let base = (t * joints + j) * ch;
                        dx[base] += 0.5 * g[t * 2];
                        dx[base + 1] += 0.5 * g[t * 2 + 1];
                    }
                }
            }
        }
        Op::Scale { x, factor } => {
            if let Some(dx) = grad_buf(grads, active, *x, g.len()) {
                for (d, gv) in dx.iter_mut().zip(g) {
                    *d += factor * gv;
                }
            }
        }
        Op::SquaredError { pred, target } => {
            let gv = g[0];
            let (p, t) = (&values[*pred], &values[*target]);
            if let Some(dp) = grad_buf(grads, active, *pred, p.numel()) {
                for ((d, pv), tv) in dp.iter_mut().zip(p.values()).zip(t.values()) {
                    *d += 2.0 * gv * (pv - tv);
                }
            }
            if let Some(dt) = grad_buf(grads, active, *target, t.numel()) {
                for ((d, pv), tv) in dt.iter_mut().zip(p.values()).zip(t.values()) {
                    *d -= 2.0 * gv * (pv - tv);
                }
            }
        }
        Op::SoftmaxCrossEntropy { logits, target } => {
            let gv = g[0];
            let z = values[*logits].values();
            let y = values[*target].values();
            if let Some(dz) = grad_buf(grads, active, *logits, z.len()) {
                let lse = log_sum_exp(z);
                for ((d, zv), yv) in dz.iter_mut().zip(z).zip(y) {
                    let p = (zv - lse).exp();
                    *d += gv * (p - yv);
                }
            }
        }
        Op::Input { .. } | Op::Param { .. } | Op::Constant { .. } => unreachable!(),
    }
}

#[inline]
fn dims3(t: &Tensor) -> (usize, usize, usize) {
    let s = t.shape();
    (s[0], s[1], s[2])
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn matmul_into(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::GraphBuilder;

    fn params_for(spec: &GraphSpec, seed: u64) -> ModelParams {
        let mut p = ModelParams::new(seed);
        p.register_graph(spec).unwrap();
        p
    }

    #[test]
    fn matmul_identity() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", vec![2, 2]);
        let eye = b.constant("eye", Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let y = b.matmul("y", x, eye).unwrap();
        b.output("y", y);
        let spec = b.finish();
        let inputs = TensorMap::from([(
            "x".to_string(),
            Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(),
        )]);
        let out = forward(&spec, &inputs, &ModelParams::new(0)).unwrap();
        assert_eq!(out["y"].values(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn relu_definition() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", vec![3]);
        let y = b.relu("y", x);
        b.output("y", y);
        let spec = b.finish();
        let inputs = TensorMap::from([("x".to_string(), Tensor::from_vec(vec![-1.0, 0.0, 2.0]))]);
        let out = forward(&spec, &inputs, &ModelParams::new(0)).unwrap();
        assert_eq!(out["y"].values(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn temporal_conv_sliding_sum() {
        // kernel [1,1,1], valid padding, input [1,2,3,4] -> [6,9]
        let mut b = GraphBuilder::new();
        let x = b.input("x", vec![4, 1]);
        let k = b.constant("k", Tensor::new(vec![1, 1, 3], vec![1.0, 1.0, 1.0]).unwrap());
        let y = b.temporal_conv("y", x, k, 1, PadMode::Valid).unwrap();
        b.output("y", y);
        let spec = b.finish();
        let inputs = TensorMap::from([(
            "x".to_string(),
            Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        )]);
        let out = forward(&spec, &inputs, &ModelParams::new(0)).unwrap();
        assert_eq!(out["y"].values(), &[6.0, 9.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", vec![3, 2, 2]);
        let w = b.param("w", vec![2, 4], 2, 4);
        let h = b.frame_right_mul("h", x, w).unwrap();
        let y = b.sigmoid("y", h);
        b.output("y", y);
        let spec = b.finish();
        let params = params_for(&spec, 9);
        let inputs = TensorMap::from([(
            "x".to_string(),
            Tensor::new(vec![3, 2, 2], (0..12).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap(),
        )]);
        let a = forward(&spec, &inputs, &params).unwrap();
        let b2 = forward(&spec, &inputs, &params).unwrap();
        assert_eq!(a["y"], b2["y"]);
    }

    #[test]
    fn missing_input_names_offender() {
        let mut b = GraphBuilder::new();
        let x = b.input("pose", vec![2]);
        b.output("x", x);
        let spec = b.finish();
        let err = forward(&spec, &TensorMap::new(), &ModelParams::new(0)).unwrap_err();
        assert!(err.to_string().contains("pose"));
    }

    #[test]
    fn backward_square() {
        // loss = w^2 at w=3 -> grad 6
        let mut b = GraphBuilder::new();
        let w = b.param("w", vec![1, 1], 1, 1);
        let sq = b.matmul("sq", w, w).unwrap();
        b.output("loss", sq);
        let spec = b.finish();
        let mut params = params_for(&spec, 0);
        params.set("w", Tensor::new(vec![1, 1], vec![3.0]).unwrap()).unwrap();
        let loss = backward(&spec, &TensorMap::new(), &mut params, "loss", 1.0).unwrap();
        assert_eq!(loss, 9.0);
        assert_eq!(params.grad("w").unwrap(), &[6.0]);
    }

    #[test]
    fn backward_mse_linear() {
        // loss = (w*x - y)^2, w=1, x=2, y=0 -> d/dw (2w)^2 = 8w = 8
        let mut b = GraphBuilder::new();
        let w = b.param("w", vec![1, 1], 1, 1);
        let x = b.input("x", vec![1, 1]);
        let y = b.input("y", vec![1, 1]);
        let pred = b.matmul("pred", w, x).unwrap();
        let loss = b.squared_error("loss", pred, y).unwrap();
        b.output("loss", loss);
        let spec = b.finish();
        let mut params = params_for(&spec, 0);
        params.set("w", Tensor::new(vec![1, 1], vec![1.0]).unwrap()).unwrap();
        let inputs = TensorMap::from([
            ("x".to_string(), Tensor::new(vec![1, 1], vec![2.0]).unwrap()),
            ("y".to_string(), Tensor::new(vec![1, 1], vec![0.0]).unwrap()),
        ]);
        let loss = backward(&spec, &inputs, &mut params, "loss", 1.0).unwrap();
        assert_eq!(loss, 4.0);
        assert_eq!(params.grad("w").unwrap(), &[8.0]);
    }

    #[test]
    fn dead_relu_path_gives_zero_grads() {
        // all-zero input through relu -> zero gradients for downstream weights
        let mut b = GraphBuilder::new();
        let x = b.input("x", vec![1, 3]);
        let r = b.relu("r", x);
        let w = b.param("w", vec![3, 1], 3, 1);
        let pred = b.matmul("pred", r, w).unwrap();
        let y = b.input("y", vec![1, 1]);
        let loss = b.squared_error("loss", pred, y).unwrap();
        b.output("loss", loss);
        let spec = b.finish();
        let mut params = params_for(&spec, 5);
        let inputs = TensorMap::from([
            ("x".to_string(), Tensor::zeros(&[1, 3])),
            ("y".to_string(), Tensor::new(vec![1, 1], vec![0.0]).unwrap()),
        ]);
        backward(&spec, &inputs, &mut params, "loss", 1.0).unwrap();
        assert_eq!(params.grad("w").unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn loss_must_be_scalar() {
        let mut b = GraphBuilder::new();
        let w = b.param("w", vec![2, 2], 2, 2);
        b.output("loss", w);
        let spec = b.finish();
        let params = params_for(&spec, 0);
        assert!(loss_and_grads(&spec, &TensorMap::new(), &params, "loss").is_err());
    }

    #[test]
    fn backward_of_sum_is_sum_of_backwards() {
        let mut b = GraphBuilder::new();
        let w = b.param("w", vec![1, 4], 1, 4);
        let a = b.input("a", vec![4, 1]);
        let c = b.input("c", vec![4, 1]);
        let ya = b.matmul("ya", w, a).unwrap();
        let yc = b.matmul("yc", w, c).unwrap();
        let ta = b.input("ta", vec![1, 1]);
        let tc = b.input("tc", vec![1, 1]);
        let la = b.squared_error("la", ya, ta).unwrap();
        let lc = b.squared_error("lc", yc, tc).unwrap();
        let lsum = b.add("lsum", la, lc).unwrap();
        b.output("la", la);
        b.output("lc", lc);
        b.output("lsum", lsum);
        let spec = b.finish();
        let params = params_for(&spec, 3);
        let inputs = TensorMap::from([
            ("a".to_string(), Tensor::new(vec![4, 1], vec![1.0, -2.0, 0.5, 3.0]).unwrap()),
            ("c".to_string(), Tensor::new(vec![4, 1], vec![0.2, 1.0, -1.0, 2.0]).unwrap()),
            ("ta".to_string(), Tensor::new(vec![1, 1], vec![1.0]).unwrap()),
            ("tc".to_string(), Tensor::new(vec![1, 1], vec![-1.0]).unwrap()),
        ]);
        let (_, gsum) = loss_and_grads(&spec, &inputs, &params, "lsum").unwrap();
        let (_, ga) = loss_and_grads(&spec, &inputs, &params, "la").unwrap();
        let (_, gc) = loss_and_grads(&spec, &inputs, &params, "lc").unwrap();
        for (i, v) in gsum["w"].iter().enumerate() {
            assert!((v - (ga["w"][i] + gc["w"][i])).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_ce_uniform_logits() {
        // uniform logits over 2 classes -> ln 2
        let mut b = GraphBuilder::new();
        let z = b.input("z", vec![2]);
        let y = b.input("y", vec![2]);
        let l = b.softmax_cross_entropy("l", z, y).unwrap();
        b.output("l", l);
        let spec = b.finish();
        let inputs = TensorMap::from([
            ("z".to_string(), Tensor::from_vec(vec![0.5, 0.5])),
            ("y".to_string(), Tensor::from_vec(vec![1.0, 0.0])),
        ]);
        let out = forward(&spec, &inputs, &ModelParams::new(0)).unwrap();
        assert!((out["l"].item().unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
    }
}
