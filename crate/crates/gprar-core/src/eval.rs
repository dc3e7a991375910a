//! Displacement metrics, baseline predictors, and the study harnesses built
//! on them: observation-mode comparison, the feature-ablation grid, and the
//! occlusion sweep.
//!
//! All errors are in pixels. Evaluation is parallel across samples but keeps
//! index order, so reports are deterministic for a fixed corpus and model.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::fa::{grid_flow, streams_code, FAConfig, FAModel, GridFlow, StreamKind, StreamSource};
use crate::prar::{PRARModel, PrarInference};
use crate::report::{save_line_plot, PlotSeries};
use crate::skeleton::{build_layout, extract_location, SkeletonSequence, Trajectory};
use crate::synth::{gen_sample, Corpus, Sample};
use crate::train::{check_pairing, train_frozen_fa, Split, TrainConfig};
use crate::{Error, Result};

/// First line of every report CSV this module writes.
pub const REPORT_CSV_VERSION: &str = "gprar-report-v1";

/// Neighbor count for the temporal KNN imputer.
pub const KNN_K_DEFAULT: usize = 5;

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Per-timestep Euclidean distances between two equal-length trajectories.
fn point_distances(a: &Trajectory, b: &Trajectory) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!(
            "trajectory lengths {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::ShapeMismatch("displacement error of empty trajectories".into()));
    }
    Ok(a.points()
        .iter()
        .zip(b.points())
        .map(|((ax, ay), (bx, by))| ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt())
        .collect())
}

/// Average displacement error: mean per-timestep Euclidean distance.
pub fn ade(a: &Trajectory, b: &Trajectory) -> Result<f64> {
    let d = point_distances(a, b)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Final displacement error: Euclidean distance at the last timestep.
pub fn fde(a: &Trajectory, b: &Trajectory) -> Result<f64> {
    let d = point_distances(a, b)?;
    Ok(*d.last().expect("nonempty checked"))
}

// ---------------------------------------------------------------------------
// Baselines
// ---------------------------------------------------------------------------

/// Constant-velocity baseline: the velocity between the last two observed
/// locations, extrapolated linearly for `t_pred` steps.
pub fn const_vel(obs: &Trajectory, t_pred: usize) -> Result<Trajectory> {
    if obs.len() < 2 {
        return Err(Error::Config(format!(
            "constant-velocity extrapolation needs two observed points, got {}",
            obs.len()
        )));
    }
    let pts = obs.points();
    let (x1, y1) = pts[pts.len() - 1];
    let (x0, y0) = pts[pts.len() - 2];
    let (vx, vy) = (x1 - x0, y1 - y0);
    Ok(Trajectory::new(
        (1..=t_pred).map(|k| (x1 + k as f64 * vx, y1 + k as f64 * vy)).collect(),
    ))
}

/// Temporal KNN imputation: each missing joint entry becomes the mean of
/// that joint's values in its `k` temporally nearest observed frames, ties
/// broken toward earlier frames. Imputed entries are marked observed.
/// Observed entries are never modified; a joint observed in no frame at all
/// keeps its zero placeholder and stays masked.
pub fn knn_impute(seq: &SkeletonSequence, k: usize) -> SkeletonSequence {
    let frames = seq.frames();
    let jc = seq.joint_count();
    let k = k.max(1);
    let mut joints: Vec<[f64; 3]> = Vec::with_capacity(frames * jc);
    let mut mask: Vec<bool> = Vec::with_capacity(frames * jc);
    for t in 0..frames {
        for j in 0..jc {
            joints.push(seq.get(t, j));
            mask.push(seq.is_observed(t, j));
        }
    }
    for j in 0..jc {
        let observed_at: Vec<usize> = (0..frames).filter(|&t| seq.is_observed(t, j)).collect();
        if observed_at.is_empty() {
            continue;
        }
        for t in 0..frames {
            if seq.is_observed(t, j) {
                continue;
            }
            let mut order = observed_at.clone();
            order.sort_by_key(|&s| (s.abs_diff(t), s));
            let take = order.len().min(k);
            let mut value = [0.0; 3];
            for &s in &order[..take] {
                let v = seq.get(s, j);
                for (acc, c) in value.iter_mut().zip(v) {
                    *acc += c;
                }
            }
            value.iter_mut().for_each(|c| *c /= take as f64);
            joints[t * jc + j] = value;
            mask[t * jc + j] = true;
        }
    }
    SkeletonSequence::new(frames, jc, joints, mask).expect("dimensions preserved")
}

// ---------------------------------------------------------------------------
// Mode comparison
// ---------------------------------------------------------------------------

/// What the predictor gets to see of each sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// The occluded, jittered observation as recorded.
    Noisy,
    /// The observation with missing joints KNN-imputed first.
    Preprocessed,
    /// The clean ground-truth observation window.
    Complete,
}

impl EvalMode {
    pub const ALL: [EvalMode; 3] = [EvalMode::Noisy, EvalMode::Preprocessed, EvalMode::Complete];

    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Noisy => "noisy",
            EvalMode::Preprocessed => "preprocessed",
            EvalMode::Complete => "complete",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        EvalMode::ALL
            .into_iter()
            .find(|m| m.name() == name)
            .ok_or_else(|| Error::Parse(format!("unknown observation mode '{name}'")))
    }
}

/// Which model produces the future trajectory.
#[derive(Clone, Copy)]
pub enum Predictor<'a> {
    ConstVel,
    Gprar { prar: &'a PRARModel, fa: &'a FAModel },
}

impl Predictor<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Predictor::ConstVel => "const_vel",
            Predictor::Gprar { .. } => "gprar",
        }
    }
}

/// One evaluated sample, in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub sample: usize,
    pub ade: f64,
    pub fde: f64,
}

/// Per-sample displacement errors plus the keys they were produced under.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub predictor: String,
    pub mode: String,
    /// Feature subset code of the aggregator, `-` for baselines.
    pub streams: String,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    /// Arithmetic mean of the per-sample ADE values (NaN when empty).
    pub fn mean_ade(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.ade))
    }

    /// Arithmetic mean of the per-sample FDE values (NaN when empty).
    pub fn mean_fde(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.fde))
    }

    /// Writes `sample,predictor,mode,streams,ade,fde` rows under a version
    /// comment.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(file, "# {REPORT_CSV_VERSION}")?;
        writeln!(file, "sample,predictor,mode,streams,ade,fde")?;
        for row in &self.rows {
            writeln!(
                file,
                "{},{},{},{},{},{}",
                row.sample, self.predictor, self.mode, self.streams, row.ade, row.fde
            )?;
        }
        file.flush()?;
        Ok(())
    }
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len();
    values.sum::<f64>() / n as f64
}

/// The observation a predictor sees under a given mode.
fn mode_observation(sample: &Sample, mode: EvalMode, knn_k: usize) -> Result<SkeletonSequence> {
    Ok(match mode {
        EvalMode::Noisy => sample.observed.clone(),
        EvalMode::Preprocessed => knn_impute(&sample.observed, knn_k),
        EvalMode::Complete => sample.clean.truncated(sample.observed.frames())?,
    })
}

/// Full-pipeline prediction for one observation, with the pose model's
/// inference passed in so callers can share it across aggregator variants.
fn gprar_predict(
    prar: &PRARModel,
    fa: &FAModel,
    seq: &SkeletonSequence,
    inference: &PrarInference,
    grid: &GridFlow,
) -> Result<Trajectory> {
    let src = StreamSource {
        observed: seq,
        recon: Some(&inference.recon),
        action_seq: Some(&inference.action_seq),
        grid: Some(grid),
        layout: prar.layout(),
    };
    let inputs = fa.inputs_from(&src)?;
    let last = extract_location(seq, prar.layout()).last().unwrap_or((0.0, 0.0));
    fa.predict_resolved(&inputs, last)
}

/// Evaluates a predictor over one corpus split under an observation mode.
/// Writes `report.csv` (one row per sample) when given an output directory.
pub fn run_eval(
    predictor: Predictor<'_>,
    corpus: &Corpus,
    split: Split,
    mode: EvalMode,
    knn_k: usize,
    out_dir: Option<&Path>,
) -> Result<EvalReport> {
    if let Predictor::Gprar { prar, fa } = predictor {
        check_pairing(prar, fa)?;
    }
    let indices = match split {
        Split::Train => &corpus.train_indices,
        Split::Val => &corpus.val_indices,
    };
    let rows: Vec<EvalRow> = indices
        .par_iter()
        .map(|&i| {
            let sample = &corpus.samples[i];
            let seq = mode_observation(sample, mode, knn_k)?;
            let pred = match predictor {
                Predictor::ConstVel => {
                    let layout = build_layout(&sample.config.layout_preset)?;
                    const_vel(&extract_location(&seq, &layout), sample.future.len())?
                }
                Predictor::Gprar { prar, fa } => {
                    let grid = grid_flow(&sample.flow)?;
                    let inference = prar.infer(&seq)?;
                    gprar_predict(prar, fa, &seq, &inference, &grid)?
                }
            };
            Ok(EvalRow {
                sample: i,
                ade: ade(&pred, &sample.future)?,
                fde: fde(&pred, &sample.future)?,
            })
        })
        .collect::<Result<_>>()?;
    let streams = match predictor {
        Predictor::ConstVel => "-".to_string(),
        Predictor::Gprar { fa, .. } => streams_code(&fa.config().streams),
    };
    let report = EvalReport {
        predictor: predictor.name().to_string(),
        mode: mode.name().to_string(),
        streams,
        rows,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        report.save_csv(&dir.join("report.csv"))?;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Feature ablation
// ---------------------------------------------------------------------------

/// One trained-and-evaluated feature subset.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub streams: String,
    /// Scalar parameter count of the subset's aggregator.
    pub params: usize,
    pub ade: f64,
    pub fde: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, streams: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.streams == streams)
    }

    /// Writes `streams,params,ade,fde` rows under a version comment.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(file, "# {REPORT_CSV_VERSION}")?;
        writeln!(file, "streams,params,ade,fde")?;
        for row in &self.rows {
            writeln!(file, "{},{},{},{}", row.streams, row.params, row.ade, row.fde)?;
        }
        file.flush()?;
        Ok(())
    }
}

/// Builds and trains one aggregator variant restricted to `subset`, frozen
/// on top of the given pose model. The variant inherits every width from
/// `fa_base` and both its initialization and batch order from
/// `cfg.rng_seed`, so the base subset reproduces the plain frozen pipeline
/// bit for bit.
fn train_variant(
    prar: &PRARModel,
    fa_base: &FAConfig,
    subset: &[StreamKind],
    corpus: &Corpus,
    cfg: &TrainConfig,
) -> Result<FAModel> {
    let mut streams = subset.to_vec();
    streams.sort();
    let config = FAConfig { streams, ..fa_base.clone() };
    let mut fa = FAModel::new(config, cfg.rng_seed)?;
    check_pairing(prar, &fa)?;
    train_frozen_fa(prar, &mut fa, corpus, cfg)?;
    Ok(fa)
}

/// Trains one aggregator variant per feature subset (pose model frozen) and
/// scores each on the validation split under noisy observations. Writes
/// `ablation.csv` when given an output directory.
pub fn ablation_grid(
    prar: &PRARModel,
    fa_base: &FAConfig,
    corpus: &Corpus,
    subsets: &[Vec<StreamKind>],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<AblationTable> {
    if subsets.is_empty() {
        return Err(Error::Config("ablation needs at least one feature subset".into()));
    }
    let mut rows = Vec::new();
    for subset in subsets {
        let fa = train_variant(prar, fa_base, subset, corpus, cfg)?;
        let eval = run_eval(
            Predictor::Gprar { prar, fa: &fa },
            corpus,
            Split::Val,
            EvalMode::Noisy,
            KNN_K_DEFAULT,
            None,
        )?;
        rows.push(AblationRow {
            streams: streams_code(&fa.config().streams),
            params: fa.params().scalar_count(),
            ade: eval.mean_ade(),
            fde: eval.mean_fde(),
        });
    }
    let table = AblationTable { rows };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        table.save_csv(&dir.join("ablation.csv"))?;
    }
    Ok(table)
}

// ---------------------------------------------------------------------------
// Occlusion sweep
// ---------------------------------------------------------------------------

/// Mean validation ADE of one variant at one occlusion ratio.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub variant: String,
    pub ratio: f64,
    pub ade: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    /// Variant-major: all ratios of the first variant, then the next.
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn ade_at(&self, variant: &str, ratio: f64) -> Option<f64> {
        self.rows.iter().find(|r| r.variant == variant && r.ratio == ratio).map(|r| r.ade)
    }

    /// One plot series per variant, in row order.
    pub fn series(&self) -> Vec<PlotSeries> {
        let mut series: Vec<PlotSeries> = Vec::new();
        for row in &self.rows {
            match series.iter_mut().find(|s| s.label == row.variant) {
                Some(s) => s.points.push((row.ratio, row.ade)),
                None => series.push(PlotSeries::new(row.variant.clone(), vec![(row.ratio, row.ade)])),
            }
        }
        series
    }

    /// Writes `variant,ratio,ade` rows under a version comment.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(file, "# {REPORT_CSV_VERSION}")?;
        writeln!(file, "variant,ratio,ade")?;
        for row in &self.rows {
            writeln!(file, "{},{},{}", row.variant, row.ratio, row.ade)?;
        }
        file.flush()?;
        Ok(())
    }
}

/// Trains each variant once on the corpus as generated, then re-masks the
/// validation observations at every requested ratio and scores each variant
/// on them. The generator draws its occlusion mask after the jitter, so a
/// re-masked observation differs from the original only at masked entries.
/// Writes `sweep.csv` and `sweep.svg` when given an output directory.
pub fn occlusion_sweep(
    prar: &PRARModel,
    fa_base: &FAConfig,
    corpus: &Corpus,
    variants: &[Vec<StreamKind>],
    ratios: &[f64],
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<SweepTable> {
    if variants.is_empty() || ratios.is_empty() {
        return Err(Error::Config("occlusion sweep needs at least one variant and one ratio".into()));
    }
    for &r in ratios {
        if !(0.0..=1.0).contains(&r) || !r.is_finite() {
            return Err(Error::Config(format!("occlusion ratio {r} outside [0, 1]")));
        }
    }
    let trained: Vec<FAModel> = variants
        .iter()
        .map(|subset| train_variant(prar, fa_base, subset, corpus, cfg))
        .collect::<Result<_>>()?;
    // The flow images don't depend on the mask; prepare their grids once.
    let grids: Vec<GridFlow> = corpus
        .val_indices
        .par_iter()
        .map(|&i| grid_flow(&corpus.samples[i].flow))
        .collect::<Result<_>>()?;
    let mut cells = vec![vec![0.0f64; ratios.len()]; trained.len()];
    for (ri, &ratio) in ratios.iter().enumerate() {
        let observed: Vec<SkeletonSequence> = corpus
            .val_indices
            .par_iter()
            .map(|&i| {
                let mut scenario = corpus.samples[i].config.clone();
                scenario.occlusion_ratio = ratio;
                Ok(gen_sample(&scenario)?.observed)
            })
            .collect::<Result<_>>()?;
        let inferences: Vec<PrarInference> =
            observed.par_iter().map(|seq| prar.infer(seq)).collect::<Result<_>>()?;
        for (vi, fa) in trained.iter().enumerate() {
            let ades: Vec<f64> = corpus
                .val_indices
                .par_iter()
                .enumerate()
                .map(|(j, &i)| {
                    let pred = gprar_predict(prar, fa, &observed[j], &inferences[j], &grids[j])?;
                    ade(&pred, &corpus.samples[i].future)
                })
                .collect::<Result<_>>()?;
            cells[vi][ri] = mean(ades.iter().copied());
        }
    }
    let mut rows = Vec::new();
    for (vi, fa) in trained.iter().enumerate() {
        let code = streams_code(&fa.config().streams);
        for (ri, &ratio) in ratios.iter().enumerate() {
            rows.push(SweepRow { variant: code.clone(), ratio, ade: cells[vi][ri] });
        }
    }
    let table = SweepTable { rows };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        table.save_csv(&dir.join("sweep.csv"))?;
        save_line_plot(
            &dir.join("sweep.svg"),
            "prediction error vs occlusion",
            "occlusion ratio",
            "mean ade (px)",
            &table.series(),
        )?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prar::PRARConfig;
    use crate::synth::{gen_corpus, ActionClass, ScenarioConfig};
    use std::collections::BTreeMap;

    fn traj(points: &[(f64, f64)]) -> Trajectory {
        Trajectory::new(points.to_vec())
    }

    #[test]
    fn ade_matches_worked_examples() {
        let a = traj(&[(1.0, 2.0), (3.0, 4.0)]);
        assert_eq!(ade(&a, &a).unwrap(), 0.0);
        let b = traj(&[(4.0, 6.0), (6.0, 8.0)]);
        assert_eq!(ade(&a, &b).unwrap(), 5.0);
        let c = traj(&[(0.0, 0.0), (0.0, 0.0)]);
        let d = traj(&[(0.0, 1.0), (0.0, 3.0)]);
        assert_eq!(ade(&c, &d).unwrap(), 2.0);
        assert_eq!(ade(&d, &c).unwrap(), 2.0);
    }

    #[test]
    fn fde_matches_worked_examples() {
        let a = traj(&[(1.0, 1.0), (2.0, 2.0)]);
        assert_eq!(fde(&a, &a).unwrap(), 0.0);
        let b = traj(&[(9.0, 9.0), (5.0, 6.0)]);
        assert_eq!(fde(&a, &b).unwrap(), 5.0);
        let single = traj(&[(2.0, 3.0)]);
        let other = traj(&[(5.0, 7.0)]);
        assert_eq!(fde(&single, &other).unwrap(), ade(&single, &other).unwrap());
    }

    #[test]
    fn metrics_reject_mismatched_or_empty_trajectories() {
        let a = traj(&[(0.0, 0.0)]);
        let b = traj(&[(0.0, 0.0), (1.0, 1.0)]);
        assert!(ade(&a, &b).is_err());
        assert!(fde(&a, &b).is_err());
        let empty = traj(&[]);
        assert!(ade(&empty, &empty).is_err());
    }

    #[test]
    fn const_vel_extrapolates_the_last_velocity() {
        let obs = traj(&[(9.0, 9.0), (0.0, 0.0), (1.0, 0.0)]);
        let pred = const_vel(&obs, 3).unwrap();
        assert_eq!(pred.points(), &[(2.0, 0.0), (3.0, 0.0), (4.0, 0.0)]);
        let still = traj(&[(2.0, 5.0), (2.0, 5.0)]);
        let pred = const_vel(&still, 4).unwrap();
        assert!(pred.points().iter().all(|&p| p == (2.0, 5.0)));
        assert!(const_vel(&traj(&[(1.0, 1.0)]), 3).is_err());
    }

    #[test]
    fn const_vel_is_exact_on_linear_motion() {
        let cfg = ScenarioConfig {
            layout_preset: "toy5".to_string(),
            root_velocity: (1.25, -0.5),
            camera_pan: (0.5, 0.25),
            rng_seed: 11,
            ..ScenarioConfig::default()
        };
        let sample = gen_sample(&cfg).unwrap();
        let layout = build_layout("toy5").unwrap();
        let obs = extract_location(&sample.clean.truncated(cfg.t_obs).unwrap(), &layout);
        let pred = const_vel(&obs, cfg.t_pred).unwrap();
        assert_eq!(ade(&pred, &sample.future).unwrap(), 0.0);
    }

    fn seq_from(values: &[(f64, f64, bool)]) -> SkeletonSequence {
        let joints: Vec<[f64; 3]> =
            values.iter().map(|&(x, y, m)| if m { [x, y, 1.0] } else { [0.0, 0.0, 0.0] }).collect();
        let mask = values.iter().map(|v| v.2).collect();
        SkeletonSequence::new(values.len(), 1, joints, mask).unwrap()
    }

    #[test]
    fn knn_impute_averages_the_nearest_observed_frames() {
        let seq = seq_from(&[
            (0.0, 9.0, true),
            (2.0, 9.0, true),
            (4.0, 9.0, true),
            (6.0, 9.0, true),
            (10.0, 10.0, true),
            (0.0, 0.0, false),
            (12.0, 10.0, true),
        ]);
        let filled = knn_impute(&seq, 2);
        assert_eq!(filled.get(5, 0), [11.0, 10.0, 1.0]);
        assert!(filled.is_observed(5, 0));
        for t in [0, 1, 2, 3, 4, 6] {
            assert_eq!(filled.get(t, 0), seq.get(t, 0));
        }
    }

    #[test]
    fn knn_impute_is_identity_on_complete_sequences() {
        let seq = seq_from(&[(1.0, 2.0, true), (3.0, 4.0, true)]);
        assert_eq!(knn_impute(&seq, 5), seq);
    }

    #[test]
    fn knn_impute_leaves_never_observed_joints_at_zero() {
        let seq = seq_from(&[(0.0, 0.0, false), (0.0, 0.0, false)]);
        let filled = knn_impute(&seq, 3);
        assert_eq!(filled, seq);
        assert!(!filled.is_observed(0, 0));
    }

    #[test]
    fn knn_impute_breaks_distance_ties_toward_earlier_frames() {
        let seq = seq_from(&[
            (0.0, 0.0, false),
            (0.0, 0.0, false),
            (0.0, 0.0, false),
            (1.0, 5.0, true),
            (0.0, 0.0, false),
            (0.0, 0.0, false),
            (0.0, 0.0, false),
            (9.0, 5.0, true),
        ]);
        let filled = knn_impute(&seq, 1);
        // Frame 5 is two steps from both observations; the earlier one wins.
        assert_eq!(filled.get(5, 0), [1.0, 5.0, 1.0]);
        assert_eq!(filled.get(6, 0), [9.0, 5.0, 1.0]);
    }

    fn toy_base(occlusion: f64, jitter: f64) -> ScenarioConfig {
        ScenarioConfig {
            layout_preset: "toy5".to_string(),
            occlusion_ratio: occlusion,
            jitter_sigma: jitter,
            ..ScenarioConfig::default()
        }
    }

    fn walking_corpus(n: usize, occlusion: f64, jitter: f64, seed: u64) -> Corpus {
        let mix = BTreeMap::from([(ActionClass::Walking, 1.0)]);
        gen_corpus(n, &mix, &toy_base(occlusion, jitter), seed).unwrap()
    }

    fn toy_models(streams: Vec<StreamKind>, seed: u64) -> (PRARModel, FAModel) {
        let prar = PRARModel::new(PRARConfig::toy(2), seed).unwrap();
        let fa = FAModel::new(FAConfig::toy(streams, prar.config().action_channels()), seed + 1).unwrap();
        (prar, fa)
    }

    #[test]
    fn const_vel_in_complete_mode_is_exact_on_a_linear_corpus() {
        let corpus = walking_corpus(10, 0.3, 2.0, 21);
        let report =
            run_eval(Predictor::ConstVel, &corpus, Split::Val, EvalMode::Complete, KNN_K_DEFAULT, None)
                .unwrap();
        assert_eq!(report.mean_ade(), 0.0);
        assert_eq!(report.mean_fde(), 0.0);
    }

    #[test]
    fn report_covers_the_validation_split_and_round_trips_to_csv() {
        let corpus = walking_corpus(10, 0.3, 1.0, 3);
        let (prar, fa) = toy_models(vec![StreamKind::X, StreamKind::C], 7);
        let dir = tempfile::tempdir().unwrap();
        let report = run_eval(
            Predictor::Gprar { prar: &prar, fa: &fa },
            &corpus,
            Split::Val,
            EvalMode::Noisy,
            KNN_K_DEFAULT,
            Some(dir.path()),
        )
        .unwrap();
        assert_eq!(report.rows.len(), corpus.val_indices.len());
        let row_ids: Vec<usize> = report.rows.iter().map(|r| r.sample).collect();
        assert_eq!(row_ids, corpus.val_indices);
        assert!(report.rows.iter().all(|r| r.ade >= 0.0 && r.fde >= 0.0));

        let text = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("# gprar-report-v1"));
        assert_eq!(lines.next(), Some("sample,predictor,mode,streams,ade,fde"));
        assert_eq!(lines.count(), corpus.val_indices.len());
        assert!(text.contains(",gprar,noisy,X+C,"));

        let again = run_eval(
            Predictor::Gprar { prar: &prar, fa: &fa },
            &corpus,
            Split::Val,
            EvalMode::Noisy,
            KNN_K_DEFAULT,
            None,
        )
        .unwrap();
        assert_eq!(report, again);
    }

    /// Walkers with varied velocities and per-sample occlusion ratios, so a
    /// model trained on it has seen clean and corrupted inputs alike.
    fn mixed_occlusion_corpus(n: usize, jitter: f64) -> Corpus {
        let speeds = [(0.75, 0.25), (1.25, -0.25), (1.75, 0.0), (-1.0, 0.25), (-1.5, -0.25), (2.0, 0.5)];
        let ratios = [0.0, 0.2, 0.4];
        let samples: Vec<Sample> = (0..n)
            .map(|i| {
                gen_sample(&ScenarioConfig {
                    layout_preset: "toy5".to_string(),
                    root_velocity: speeds[i % speeds.len()],
                    occlusion_ratio: ratios[i % ratios.len()],
                    jitter_sigma: jitter,
                    rng_seed: 1000 + i as u64,
                    ..ScenarioConfig::default()
                })
                .unwrap()
            })
            .collect();
        let val = n / 5;
        Corpus {
            samples,
            train_indices: (0..n - val).collect(),
            val_indices: (n - val..n).collect(),
            rng_seed: 0,
        }
    }

    #[test]
    fn complete_mode_beats_noisy_for_a_trained_model() {
        let corpus = mixed_occlusion_corpus(24, 1.5);
        let (prar, mut fa) = toy_models(vec![StreamKind::X, StreamKind::Xr], 9);
        let cfg = TrainConfig {
            epochs: 100,
            lr0: 0.05,
            decay_every: 40,
            batch_size: 8,
            adaptive: false,
            rng_seed: 4,
            ..TrainConfig::default()
        };
        train_frozen_fa(&prar, &mut fa, &corpus, &cfg).unwrap();
        let predictor = Predictor::Gprar { prar: &prar, fa: &fa };
        let noisy =
            run_eval(predictor, &corpus, Split::Val, EvalMode::Noisy, KNN_K_DEFAULT, None).unwrap();
        let complete =
            run_eval(predictor, &corpus, Split::Val, EvalMode::Complete, KNN_K_DEFAULT, None).unwrap();
        assert!(
            complete.mean_ade() <= noisy.mean_ade(),
            "complete {} vs noisy {}",
            complete.mean_ade(),
            noisy.mean_ade()
        );
    }

    #[test]
    fn ablation_base_subset_matches_the_plain_frozen_pipeline() {
        let corpus = walking_corpus(10, 0.3, 1.0, 17);
        let full = vec![StreamKind::X, StreamKind::Xr, StreamKind::Pr, StreamKind::C, StreamKind::A];
        let (prar, _) = toy_models(vec![StreamKind::X], 13);
        let fa_base = FAConfig::toy(full.clone(), prar.config().action_channels());
        let cfg = TrainConfig { epochs: 8, adaptive: false, rng_seed: 13, ..TrainConfig::default() };

        let table =
            ablation_grid(&prar, &fa_base, &corpus, &[full.clone(), vec![StreamKind::Xr]], &cfg, None)
                .unwrap();
        assert_eq!(table.rows.len(), 2);
        assert_eq!(table.rows[0].streams, "X+XR+PR+C+A");
        assert_eq!(table.rows[1].streams, "XR");
        assert!(table.rows[1].params < table.rows[0].params);

        let mut fa = FAModel::new(fa_base.clone(), cfg.rng_seed).unwrap();
        train_frozen_fa(&prar, &mut fa, &corpus, &cfg).unwrap();
        let reference = run_eval(
            Predictor::Gprar { prar: &prar, fa: &fa },
            &corpus,
            Split::Val,
            EvalMode::Noisy,
            KNN_K_DEFAULT,
            None,
        )
        .unwrap();
        assert_eq!(table.rows[0].ade, reference.mean_ade());
        assert_eq!(table.rows[0].fde, reference.mean_fde());
        assert_eq!(table.rows[0].params, fa.params().scalar_count());
    }

    #[test]
    fn ablation_rejects_empty_or_duplicate_subsets() {
        let corpus = walking_corpus(5, 0.2, 0.5, 2);
        let (prar, _) = toy_models(vec![StreamKind::X], 1);
        let fa_base = FAConfig::toy(vec![StreamKind::X], prar.config().action_channels());
        let cfg = TrainConfig { epochs: 1, adaptive: false, ..TrainConfig::default() };
        assert!(ablation_grid(&prar, &fa_base, &corpus, &[], &cfg, None).is_err());
        let dup = vec![vec![StreamKind::X, StreamKind::X]];
        assert!(ablation_grid(&prar, &fa_base, &corpus, &dup, &cfg, None).is_err());
    }

    #[test]
    fn remasking_at_a_new_ratio_changes_only_masked_entries() {
        let mut cfg = toy_base(0.4, 1.5);
        cfg.rng_seed = 33;
        let occluded = gen_sample(&cfg).unwrap();
        cfg.occlusion_ratio = 0.0;
        let unmasked = gen_sample(&cfg).unwrap();
        assert_eq!(occluded.clean, unmasked.clean);
        let seq = &occluded.observed;
        for t in 0..seq.frames() {
            for j in 0..seq.joint_count() {
                if seq.is_observed(t, j) {
                    assert_eq!(seq.get(t, j), unmasked.observed.get(t, j));
                } else {
                    assert_eq!(seq.get(t, j), [0.0, 0.0, 0.0]);
                }
            }
        }
    }

    #[test]
    fn sweep_grid_is_complete_and_ratio_zero_matches_unoccluded_eval() {
        let corpus = walking_corpus(10, 0.3, 1.0, 29);
        let (prar, _) = toy_models(vec![StreamKind::X], 19);
        let fa_base = FAConfig::toy(vec![StreamKind::X], prar.config().action_channels());
        let variants = vec![
            vec![StreamKind::X, StreamKind::P],
            vec![StreamKind::Xr, StreamKind::Pr, StreamKind::C],
        ];
        let ratios = [0.0, 0.5];
        let cfg = TrainConfig { epochs: 6, adaptive: false, rng_seed: 23, ..TrainConfig::default() };
        let dir = tempfile::tempdir().unwrap();
        let table =
            occlusion_sweep(&prar, &fa_base, &corpus, &variants, &ratios, &cfg, Some(dir.path()))
                .unwrap();

        let labels: Vec<(&str, f64)> =
            table.rows.iter().map(|r| (r.variant.as_str(), r.ratio)).collect();
        assert_eq!(
            labels,
            [("X+P", 0.0), ("X+P", 0.5), ("XR+PR+C", 0.0), ("XR+PR+C", 0.5)]
        );

        // At ratio zero the re-masked observations are the jitter-only ones,
        // so the sweep cell must equal a plain evaluation on them.
        let mut unmasked = corpus.clone();
        for &i in &unmasked.val_indices.clone() {
            let mut scenario = unmasked.samples[i].config.clone();
            scenario.occlusion_ratio = 0.0;
            unmasked.samples[i].observed = gen_sample(&scenario).unwrap().observed;
        }
        let fa = train_variant(&prar, &fa_base, &variants[0], &corpus, &cfg).unwrap();
        let reference = run_eval(
            Predictor::Gprar { prar: &prar, fa: &fa },
            &unmasked,
            Split::Val,
            EvalMode::Noisy,
            KNN_K_DEFAULT,
            None,
        )
        .unwrap();
        assert_eq!(table.ade_at("X+P", 0.0).unwrap(), reference.mean_ade());

        let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
        assert_eq!(csv.lines().count(), 2 + table.rows.len());
        assert!(csv.starts_with("# gprar-report-v1\nvariant,ratio,ade\n"));
        let svg = std::fs::read_to_string(dir.path().join("sweep.svg")).unwrap();
        assert!(svg.contains("X+P") && svg.contains("XR+PR+C"));

        let again =
            occlusion_sweep(&prar, &fa_base, &corpus, &variants, &ratios, &cfg, None).unwrap();
        assert_eq!(table, again);
    }

    #[test]
    fn sweep_rejects_out_of_range_ratios_and_empty_requests() {
        let corpus = walking_corpus(5, 0.2, 0.5, 2);
        let (prar, _) = toy_models(vec![StreamKind::X], 1);
        let fa_base = FAConfig::toy(vec![StreamKind::X], prar.config().action_channels());
        let cfg = TrainConfig { epochs: 1, adaptive: false, ..TrainConfig::default() };
        let variant = vec![vec![StreamKind::X]];
        assert!(occlusion_sweep(&prar, &fa_base, &corpus, &variant, &[1.5], &cfg, None).is_err());
        assert!(occlusion_sweep(&prar, &fa_base, &corpus, &variant, &[], &cfg, None).is_err());
        assert!(occlusion_sweep(&prar, &fa_base, &corpus, &[], &[0.0], &cfg, None).is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for mode in EvalMode::ALL {
            assert_eq!(EvalMode::parse(mode.name()).unwrap(), mode);
        }
        assert!(EvalMode::parse("garbage").is_err());
    }
}
