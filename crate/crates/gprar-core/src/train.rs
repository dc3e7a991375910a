//! Two-stage SGD training.
//!
//! Stage 1 fits the pose model on its multi-task loss (reconstruction +
//! recognition). Stage 2 fits the prediction loss: in *adaptive* mode the
//! pose model is stitched into one composite graph with the aggregator and
//! both receive gradients; in *frozen* mode the pose model's outputs are
//! cached per sample and only the aggregator trains.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fa::{self, FAModel, StreamKind, StreamSource};
use crate::prar::{self, PRARModel};
use crate::skeleton::extract_location;
use crate::synth::Corpus;
use crate::tensor::{
    backward_outputs, forward, load_checkpoint, save_checkpoint, GraphBuilder, GraphSpec,
    ModelParams, Tensor, TensorMap,
};
use crate::{mix_seed, Error, Result};

// ---------------------------------------------------------------------------
// Configuration and schedule
// ---------------------------------------------------------------------------

/// Optimizer settings shared by both stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Initial learning rate.
    pub lr0: f64,
    /// Multiplier applied every `decay_every` epochs.
    pub decay_factor: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    /// Stage 2 only: backpropagate into the pose model.
    pub adaptive: bool,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            lr0: 0.01,
            decay_factor: 0.1,
            decay_every: 10,
            batch_size: 16,
            adaptive: true,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.decay_every == 0 {
            return Err(Error::Config("decay interval must be positive".into()));
        }
        if !(self.lr0 >= 0.0 && self.decay_factor > 0.0) {
            return Err(Error::Config(format!(
                "bad learning-rate settings lr0={} decay={}",
                self.lr0, self.decay_factor
            )));
        }
        Ok(())
    }
}

/// Step-decay schedule: `lr0 * decay_factor^floor(epoch / decay_every)`.
pub fn lr_schedule(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr0 * cfg.decay_factor.powi((epoch / cfg.decay_every) as i32)
}

// ---------------------------------------------------------------------------
// Loss curves
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Mean tracked losses over one split for one epoch; `values` aligns with
/// the report's `columns`.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub epoch: usize,
    pub split: Split,
    pub values: Vec<f64>,
}

/// Everything a training run reports back: the per-epoch loss curve and
/// which epoch validated best.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Column names for `CurveRow::values`, e.g. `["L", "L_r", "L_a"]`.
    pub columns: Vec<String>,
    pub curve: Vec<CurveRow>,
    pub best_epoch: Option<usize>,
}

impl TrainReport {
    fn rows(&self, split: Split) -> impl Iterator<Item = &CurveRow> {
        self.curve.iter().filter(move |r| r.split == split)
    }

    /// Mean total loss over the final epoch's training pass.
    pub fn final_train_loss(&self) -> Option<f64> {
        self.rows(Split::Train).last().map(|r| r.values[0])
    }

    pub fn final_val_loss(&self) -> Option<f64> {
        self.rows(Split::Val).last().map(|r| r.values[0])
    }

    pub fn val_loss_at(&self, epoch: usize) -> Option<f64> {
        self.rows(Split::Val).find(|r| r.epoch == epoch).map(|r| r.values[0])
    }

    /// Writes the curve as `epoch,split,<columns...>` CSV.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(file, "epoch,split,{}", self.columns.join(","))?;
        for row in &self.curve {
            let values: Vec<String> = row.values.iter().map(f64::to_string).collect();
            writeln!(file, "{},{},{}", row.epoch, row.split.name(), values.join(","))?;
        }
        file.flush()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// The SGD engine
// ---------------------------------------------------------------------------

/// Tracked outputs: (column name, graph output name). The first entry is the
/// loss being optimized.
type Tracked<'a> = &'a [(&'a str, &'a str)];

/// Shuffled mini-batch SGD over prebuilt per-sample input maps. Returns the
/// curve and the best-validation parameter snapshot (`None` when there is no
/// validation split).
fn run_sgd(
    spec: &GraphSpec,
    params: &mut ModelParams,
    train_inputs: &[TensorMap],
    val_inputs: &[TensorMap],
    cfg: &TrainConfig,
    tracked: Tracked,
) -> Result<(TrainReport, Option<(usize, ModelParams)>)> {
    cfg.validate()?;
    if train_inputs.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let loss_name = tracked[0].1;
    let mut curve = Vec::new();
    let mut best: Option<(usize, f64, ModelParams)> = None;
    let mut order: Vec<usize> = (0..train_inputs.len()).collect();
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(cfg, epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.rng_seed, epoch as u64));
        order.shuffle(&mut rng);
        let mut sums = vec![0.0; tracked.len()];
        for batch in order.chunks(cfg.batch_size) {
            let weight = 1.0 / batch.len() as f64;
            for &i in batch {
                let out = backward_outputs(spec, &train_inputs[i], params, loss_name, weight)?;
                for (j, (_, name)) in tracked.iter().enumerate() {
                    sums[j] += out[*name].item()?;
                }
            }
            params.sgd_step(lr);
        }
        let n = train_inputs.len() as f64;
        curve.push(CurveRow {
            epoch,
            split: Split::Train,
            values: sums.iter().map(|s| s / n).collect(),
        });
        if !val_inputs.is_empty() {
            let row = eval_means(spec, params, val_inputs, tracked)?;
            let total = row[0];
            if best.as_ref().map_or(true, |(_, b, _)| total < *b) {
                best = Some((epoch, total, params.clone()));
            }
            curve.push(CurveRow { epoch, split: Split::Val, values: row });
        }
    }
    let report = TrainReport {
        columns: tracked.iter().map(|(c, _)| c.to_string()).collect(),
        curve,
        best_epoch: best.as_ref().map(|(e, _, _)| *e),
    };
    Ok((report, best.map(|(e, _, p)| (e, p))))
}

/// Forward passes over a split (parallel across samples, summed in index
/// order so results stay deterministic); returns the mean of each tracked
/// output.
fn eval_means(
    spec: &GraphSpec,
    params: &ModelParams,
    inputs: &[TensorMap],
    tracked: Tracked,
) -> Result<Vec<f64>> {
    let per_sample: Vec<Vec<f64>> = inputs
        .par_iter()
        .map(|map| {
            let out = forward(spec, map, params)?;
            tracked.iter().map(|(_, name)| out[*name].item()).collect()
        })
        .collect::<Result<_>>()?;
    let n = inputs.len() as f64;
    let mut means = vec![0.0; tracked.len()];
    for row in &per_sample {
        for (m, v) in means.iter_mut().zip(row) {
            *m += v;
        }
    }
    means.iter_mut().for_each(|m| *m /= n);
    Ok(means)
}

// ---------------------------------------------------------------------------
// Stage 1
// ---------------------------------------------------------------------------

fn one_hot(index: usize, classes: usize) -> Result<Tensor> {
    if index >= classes {
        return Err(Error::Config(format!(
            "action label {index} outside the model's {classes} classes"
        )));
    }
    let mut values = vec![0.0; classes];
    values[index] = 1.0;
    Tensor::new(vec![classes], values)
}

fn stage1_inputs(model: &PRARModel, corpus: &Corpus) -> Result<(Vec<TensorMap>, Vec<TensorMap>)> {
    let t_obs = model.config().t_obs;
    let classes = model.config().class_count;
    let build = |indices: &[usize]| -> Result<Vec<TensorMap>> {
        indices
            .iter()
            .map(|&i| {
                let sample = &corpus.samples[i];
                let mut map = TensorMap::new();
                map.insert("pose".into(), model.pose_input(&sample.observed)?);
                map.insert("target".into(), model.pose_input(&sample.clean.truncated(t_obs)?)?);
                map.insert("label".into(), one_hot(sample.action.index(), classes)?);
                Ok(map)
            })
            .collect()
    };
    Ok((build(&corpus.train_indices)?, build(&corpus.val_indices)?))
}

/// Stage-1 training of the pose model on reconstruction + recognition.
///
/// The model keeps its **final**-epoch parameters (they seed stage 2); the
/// best-validation snapshot goes to `checkpoint_best.json` when an output
/// directory is given, next to `curve.csv` and `checkpoint_final.json`.
pub fn pretrain_prar(
    model: &mut PRARModel,
    corpus: &Corpus,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    let (train_inputs, val_inputs) = stage1_inputs(model, corpus)?;
    let (spec, params) = model.train_parts();
    let tracked: Tracked = &[("L", "loss"), ("L_r", "loss_r"), ("L_a", "loss_a")];
    let (report, best) = run_sgd(spec, params, &train_inputs, &val_inputs, cfg, tracked)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        report.save_csv(&dir.join("curve.csv"))?;
        crate::report::save_curve_plot(&report, &dir.join("curve.svg"))?;
        save_checkpoint(model.params(), &dir.join("checkpoint_final.json"))?;
        let best_params = best.as_ref().map_or(model.params(), |(_, p)| p);
        save_checkpoint(best_params, &dir.join("checkpoint_best.json"))?;
    }
    Ok(report)
}

/// Loads a checkpoint into the model, copying every shape-matching entry.
/// The classifier head (`prar.fcn.*`) may differ in shape — say, a checkpoint
/// trained against a different class count — and then keeps its fresh
/// initialization. Returns the names that were *not* copied. Any other
/// mismatch is an error and leaves the model untouched.
pub fn warm_start(model: &mut PRARModel, checkpoint: &Path) -> Result<Vec<String>> {
    let loaded = load_checkpoint(checkpoint)?;
    let mut staged = model.params().clone();
    let skipped = staged.copy_matching(&loaded, |name| name.starts_with("prar.fcn."))?;
    *model.params_mut() = staged;
    Ok(skipped)
}

// ---------------------------------------------------------------------------
// Stage 2
// ---------------------------------------------------------------------------

pub(crate) fn check_pairing(prar: &PRARModel, fa: &FAModel) -> Result<()> {
    let (p, f) = (prar.config(), fa.config());
    if p.t_obs != f.t_obs {
        return Err(Error::Config(format!(
            "pose model observes {} frames, aggregator {}",
            p.t_obs, f.t_obs
        )));
    }
    if p.image_size != f.image_size {
        return Err(Error::Config("pose model and aggregator disagree on image size".into()));
    }
    if prar.layout().joint_count() != f.joint_count {
        return Err(Error::Config(format!(
            "pose model has {} joints, aggregator expects {}",
            prar.layout().joint_count(),
            f.joint_count
        )));
    }
    if p.action_channels() != f.action_channels {
        return Err(Error::Config(format!(
            "action feature is {}-channel, aggregator expects {}",
            p.action_channels(),
            f.action_channels
        )));
    }
    Ok(())
}

/// Builds the end-to-end graph: pose input through the pose model, its
/// reconstruction/action outputs wired straight into the aggregator streams,
/// and the prediction loss on top. Raw streams (X, P, C) stay graph inputs.
/// The returned parameters hold both models' entries.
pub fn build_composite(prar: &PRARModel, fa: &FAModel) -> Result<(GraphSpec, ModelParams)> {
    check_pairing(prar, fa)?;
    let t = prar.config().t_obs;
    let k = prar.layout().joint_count();
    let mut b = GraphBuilder::new();
    let pose = b.input("pose", vec![t, k, 3]);
    let adj = prar::adjacency_nodes(&mut b, prar.adjacency());
    let enc = prar::build_encoder(&mut b, prar.config(), pose, &adj)?;
    let recon = prar::build_recon(&mut b, prar.config(), enc, &adj)?;
    let (action_seq, _logits) = prar::build_action(&mut b, prar.config(), enc, &adj)?;
    let (left, right) = prar.layout().hip_pair();
    let mut streams = BTreeMap::new();
    for &kind in &fa.config().streams {
        let node = match kind {
            StreamKind::Xr => b.hip_midpoint("comp.xr", recon, left, right)?,
            StreamKind::Pr => b.reshape("comp.pr", recon, vec![t, k * 3])?,
            StreamKind::A => action_seq,
            StreamKind::X | StreamKind::P | StreamKind::C => {
                b.input(&kind.input_name(), vec![t, fa.config().stream_width(kind)])
            }
        };
        streams.insert(kind, node);
    }
    let (_, pred) = fa::append_network(&mut b, fa.config(), &streams)?;
    let future = b.input("future", vec![fa.config().t_pred, 2]);
    let sq = b.squared_error("loss_pred_sum", pred, future)?;
    let loss = b.scale("loss_pred", sq, 1.0 / (fa.config().t_pred * 2) as f64);
    b.output("loss_pred", loss);
    b.output("pred", pred);
    let spec = b.finish();

    let mut params = ModelParams::new(prar.params().rng_seed());
    params.register_graph(&spec)?;
    params.copy_matching(prar.params(), |name| !name.starts_with("prar."))?;
    params.copy_matching(fa.params(), |name| !name.starts_with("fa."))?;
    Ok((spec, params))
}

/// The reference a sample's prediction is made relative to in offset mode:
/// the last observed location.
fn last_observed(prar: &PRARModel, sample: &crate::synth::Sample) -> (f64, f64) {
    *extract_location(&sample.observed, prar.layout())
        .points()
        .last()
        .expect("observations span at least two frames")
}

/// Per-sample graph inputs for stage 2, split into (train, val). With
/// `composite` set they target the end-to-end graph from
/// [`build_composite`]; otherwise the aggregator's own training graph, with
/// the pose model's stream outputs precomputed.
pub fn stage2_inputs(
    prar: &PRARModel,
    fa: &FAModel,
    corpus: &Corpus,
    composite: bool,
) -> Result<(Vec<TensorMap>, Vec<TensorMap>)> {
    let build = |indices: &[usize]| -> Result<Vec<TensorMap>> {
        indices
            .par_iter()
            .map(|&i| {
                let sample = &corpus.samples[i];
                let grid = fa::grid_flow(&sample.flow)?;
                let mut map = if composite {
                    let mut map = TensorMap::new();
                    map.insert("pose".into(), prar.pose_input(&sample.observed)?);
                    let src = StreamSource {
                        observed: &sample.observed,
                        recon: None,
                        action_seq: None,
                        grid: Some(&grid),
                        layout: prar.layout(),
                    };
                    for &kind in &fa.config().streams {
                        if matches!(kind, StreamKind::X | StreamKind::P | StreamKind::C) {
                            map.insert(kind.input_name(), fa::stream_tensor(fa.config(), kind, &src)?);
                        }
                    }
                    map
                } else {
                    let inference = prar.infer(&sample.observed)?;
                    let src = StreamSource {
                        observed: &sample.observed,
                        recon: Some(&inference.recon),
                        action_seq: Some(&inference.action_seq),
                        grid: Some(&grid),
                        layout: prar.layout(),
                    };
                    fa.inputs_from(&src)?
                };
                map.insert(
                    "future".into(),
                    fa.future_target(&sample.future, last_observed(prar, sample))?,
                );
                Ok(map)
            })
            .collect()
    };
    Ok((build(&corpus.train_indices)?, build(&corpus.val_indices)?))
}

/// The frozen stage-2 arm: caches the pose model's stream outputs per sample
/// and fits the aggregator alone. Shared with the study harnesses so a
/// harness variant trains bit-identically to the plain frozen pipeline.
pub(crate) fn train_frozen_fa(
    prar: &PRARModel,
    fa: &mut FAModel,
    corpus: &Corpus,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let tracked: Tracked = &[("L_pred", "loss_pred")];
    let (train_inputs, val_inputs) = stage2_inputs(prar, fa, corpus, false)?;
    let (spec, params) = fa.train_parts();
    let (report, _) = run_sgd(spec, params, &train_inputs, &val_inputs, cfg, tracked)?;
    Ok(report)
}

/// Stage-2 training of the prediction loss. Adaptive mode updates both
/// models through the composite graph; frozen mode caches the pose model's
/// stream outputs per sample and leaves its parameters untouched.
pub fn train_full(
    prar: &mut PRARModel,
    fa: &mut FAModel,
    corpus: &Corpus,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    check_pairing(prar, fa)?;
    let report = if cfg.adaptive {
        let tracked: Tracked = &[("L_pred", "loss_pred")];
        let (spec, mut params) = build_composite(prar, fa)?;
        let (train_inputs, val_inputs) = stage2_inputs(prar, fa, corpus, true)?;
        let (report, _) = run_sgd(&spec, &mut params, &train_inputs, &val_inputs, cfg, tracked)?;
        prar.params_mut().copy_matching(&params, |_| false)?;
        fa.params_mut().copy_matching(&params, |_| false)?;
        report
    } else {
        train_frozen_fa(prar, fa, corpus, cfg)?
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        report.save_csv(&dir.join("curve.csv"))?;
        crate::report::save_curve_plot(&report, &dir.join("curve.svg"))?;
        save_checkpoint(prar.params(), &dir.join("checkpoint_prar.json"))?;
        save_checkpoint(fa.params(), &dir.join("checkpoint_fa.json"))?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fa::FAConfig;
    use crate::prar::PRARConfig;
    use crate::synth::{gen_sample, ActionClass, ScenarioConfig};
    use crate::tensor::finite_diff_check;

    fn toy_scenario(action: ActionClass, seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            action,
            layout_preset: "toy5".to_string(),
            root_velocity: match action {
                ActionClass::Standing | ActionClass::Bending => (0.0, 0.0),
                _ => (1.5, 0.0),
            },
            rng_seed: seed,
            ..ScenarioConfig::default()
        }
    }

    fn toy_corpus(n: usize, val: usize) -> Corpus {
        let samples: Vec<_> = (0..n)
            .map(|i| {
                let action = if i % 2 == 0 { ActionClass::Walking } else { ActionClass::Standing };
                gen_sample(&toy_scenario(action, 100 + i as u64)).unwrap()
            })
            .collect();
        Corpus {
            samples,
            train_indices: (0..n - val).collect(),
            val_indices: (n - val..n).collect(),
            rng_seed: 0,
        }
    }

    fn toy_prar(seed: u64) -> PRARModel {
        PRARModel::new(PRARConfig::toy(2), seed).unwrap()
    }

    fn toy_fa(seed: u64) -> FAModel {
        let streams = vec![StreamKind::Xr, StreamKind::Pr, StreamKind::C, StreamKind::A];
        FAModel::new(FAConfig::toy(streams, 6), seed).unwrap()
    }

    #[test]
    fn schedule_matches_step_decay() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(&cfg, 0), 0.01);
        assert!((lr_schedule(&cfg, 10) - 0.001).abs() < 1e-15);
        assert!((lr_schedule(&cfg, 49) - 1e-6).abs() < 1e-15);
        for e in 1..60 {
            assert!(lr_schedule(&cfg, e) <= lr_schedule(&cfg, e - 1));
        }
    }

    #[test]
    fn single_sample_loss_decreases_monotonically() {
        let mut model = toy_prar(7);
        let corpus = Corpus {
            samples: vec![gen_sample(&toy_scenario(ActionClass::Walking, 5)).unwrap()],
            train_indices: vec![0],
            val_indices: vec![],
            rng_seed: 0,
        };
        let cfg = TrainConfig { epochs: 25, batch_size: 1, ..TrainConfig::default() };
        let report = pretrain_prar(&mut model, &corpus, &cfg, None).unwrap();
        let losses: Vec<f64> = report.curve.iter().map(|r| r.values[0]).collect();
        for pair in losses.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-9, "loss rose: {} -> {}", pair[0], pair[1]);
        }
        assert!(losses.last().unwrap() < &(losses[0] * 0.9));
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut model = toy_prar(3);
        let before = model.params().clone();
        let corpus = toy_corpus(4, 1);
        let cfg = TrainConfig { epochs: 2, lr0: 0.0, batch_size: 2, ..TrainConfig::default() };
        pretrain_prar(&mut model, &corpus, &cfg, None).unwrap();
        for ((name_a, a), (name_b, b)) in before.iter_values().zip(model.params().iter_values()) {
            assert_eq!(name_a, name_b);
            assert_eq!(a, b, "{name_a} moved under lr 0");
        }
    }

    #[test]
    fn identical_runs_produce_identical_curves() {
        let corpus = toy_corpus(6, 2);
        let cfg = TrainConfig { epochs: 3, batch_size: 2, ..TrainConfig::default() };
        let run = |seed| {
            let mut model = toy_prar(seed);
            pretrain_prar(&mut model, &corpus, &cfg, None).unwrap()
        };
        assert_eq!(run(13), run(13));
        assert_ne!(run(13).curve, run(14).curve);
    }

    #[test]
    fn empty_training_split_is_an_error() {
        let mut corpus = toy_corpus(2, 1);
        corpus.train_indices.clear();
        let mut model = toy_prar(0);
        assert!(pretrain_prar(&mut model, &corpus, &TrainConfig::default(), None).is_err());
    }

    #[test]
    fn curve_csv_lists_every_epoch_and_split() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = toy_corpus(4, 1);
        let cfg = TrainConfig { epochs: 2, batch_size: 2, ..TrainConfig::default() };
        let mut model = toy_prar(1);
        pretrain_prar(&mut model, &corpus, &cfg, Some(dir.path())).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("curve.csv")).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "epoch,split,L,L_r,L_a");
        assert_eq!(lines.len(), 1 + 2 * 2); // header + (train, val) per epoch
        assert!(dir.path().join("checkpoint_final.json").exists());
        assert!(dir.path().join("checkpoint_best.json").exists());
    }

    #[test]
    fn warm_start_round_trips_own_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let mut donor = toy_prar(21);
        // make the donor's weights differ from any fresh init
        let corpus = toy_corpus(4, 0);
        let cfg = TrainConfig { epochs: 1, batch_size: 2, ..TrainConfig::default() };
        pretrain_prar(&mut donor, &corpus, &cfg, None).unwrap();
        save_checkpoint(donor.params(), &path).unwrap();

        let mut fresh = toy_prar(99);
        let skipped = warm_start(&mut fresh, &path).unwrap();
        assert!(skipped.is_empty());
        for ((_, a), (_, b)) in donor.params().iter_values().zip(fresh.params().iter_values()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn warm_start_reinitializes_a_mismatched_head() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let donor = PRARModel::new(PRARConfig::toy(4), 21).unwrap();
        save_checkpoint(donor.params(), &path).unwrap();

        let mut model = toy_prar(50);
        let fresh_head = model.params().get("prar.fcn.w").unwrap().clone();
        let skipped = warm_start(&mut model, &path).unwrap();
        assert_eq!(skipped, vec!["prar.fcn.b".to_string(), "prar.fcn.w".to_string()]);
        // head kept its fresh init; a body weight came from the donor
        assert_eq!(model.params().get("prar.fcn.w").unwrap(), &fresh_head);
        assert_eq!(
            model.params().get("prar.enc0.w0").unwrap(),
            donor.params().get("prar.enc0.w0").unwrap()
        );
    }

    #[test]
    fn warm_start_rejects_garbage_and_leaves_model_alone() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, b"{ not a checkpoint").unwrap();
        let mut model = toy_prar(2);
        let before = model.params().clone();
        assert!(warm_start(&mut model, &path).is_err());
        for ((_, a), (_, b)) in before.iter_values().zip(model.params().iter_values()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn warm_start_rejects_incompatible_bodies() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let donor = PRARModel::new(PRARConfig::standard(2, (64.0, 48.0)), 0).unwrap();
        save_checkpoint(donor.params(), &path).unwrap();
        let mut model = toy_prar(0);
        assert!(warm_start(&mut model, &path).is_err());
    }

    #[test]
    fn frozen_training_leaves_the_pose_model_bitwise_unchanged() {
        let mut prar = toy_prar(5);
        let mut fa = toy_fa(6);
        let snapshot = prar.params().clone();
        let corpus = toy_corpus(5, 1);
        let cfg = TrainConfig { epochs: 2, batch_size: 2, adaptive: false, ..TrainConfig::default() };
        let report = train_full(&mut prar, &mut fa, &corpus, &cfg, None).unwrap();
        assert_eq!(report.columns, vec!["L_pred"]);
        for ((_, a), (_, b)) in snapshot.iter_values().zip(prar.params().iter_values()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn adaptive_training_reaches_both_models() {
        let mut prar = toy_prar(5);
        let mut fa = toy_fa(6);
        let prar_before = prar.params().clone();
        let fa_before = fa.params().clone();
        let corpus = toy_corpus(5, 1);
        let cfg = TrainConfig { epochs: 2, batch_size: 2, adaptive: true, ..TrainConfig::default() };
        let report = train_full(&mut prar, &mut fa, &corpus, &cfg, None).unwrap();
        assert!(report.final_train_loss().unwrap().is_finite());
        let moved = |before: &ModelParams, after: &ModelParams| {
            before.iter_values().zip(after.iter_values()).any(|((_, a), (_, b))| a != b)
        };
        assert!(moved(&prar_before, prar.params()), "pose model never updated");
        assert!(moved(&fa_before, fa.params()), "aggregator never updated");
    }

    #[test]
    fn composite_graph_passes_gradient_check() {
        let prar = toy_prar(11);
        let fa = toy_fa(12);
        let (spec, params) = build_composite(&prar, &fa).unwrap();
        // nonzero pan keeps every stream away from the exact ReLU kink that
        // an all-zero flow would park the zero-initialized biases on
        let scenario =
            ScenarioConfig { camera_pan: (0.5, 0.25), ..toy_scenario(ActionClass::Walking, 33) };
        let corpus = Corpus {
            samples: vec![gen_sample(&scenario).unwrap()],
            train_indices: vec![0],
            val_indices: vec![],
            rng_seed: 0,
        };
        let (inputs, _) = stage2_inputs(&prar, &fa, &corpus, true).unwrap();
        let worst = finite_diff_check(&spec, &inputs[0], &params, "loss_pred", 1e-6).unwrap();
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn overfitting_one_walker_drives_pixel_error_down() {
        let mut prar = toy_prar(8);
        let mut fa = toy_fa(9);
        let sample = gen_sample(&toy_scenario(ActionClass::Walking, 77)).unwrap();
        let corpus = Corpus {
            samples: vec![sample.clone()],
            train_indices: vec![0],
            val_indices: vec![],
            rng_seed: 0,
        };
        let cfg = TrainConfig {
            epochs: 400,
            lr0: 0.3,
            decay_factor: 0.5,
            decay_every: 120,
            batch_size: 1,
            adaptive: false,
            rng_seed: 4,
        };
        train_full(&mut prar, &mut fa, &corpus, &cfg, None).unwrap();

        let inference = prar.infer(&sample.observed).unwrap();
        let grid = fa::grid_flow(&sample.flow).unwrap();
        let src = StreamSource {
            observed: &sample.observed,
            recon: Some(&inference.recon),
            action_seq: Some(&inference.action_seq),
            grid: Some(&grid),
            layout: prar.layout(),
        };
        let inputs = fa.inputs_from(&src).unwrap();
        let pred = fa.predict_streams(&inputs).unwrap();
        let loss = fa::loss_prediction(&pred, &sample.future).unwrap();
        assert!(loss / 10.0 < 1.0, "pixel loss per point {} after overfit", loss / 10.0);
    }

    #[test]
    fn mismatched_pairings_are_rejected() {
        let prar = toy_prar(0);
        // the toy pose model emits a 6-channel action feature; expecting 5
        // must not type-check at composition time
        let fa = FAModel::new(FAConfig::toy(vec![StreamKind::A], 5), 0).unwrap();
        assert!(build_composite(&prar, &fa).is_err());
    }
}
