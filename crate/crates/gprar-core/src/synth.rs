//! Synthetic pedestrian generator: kinematic skeleton clips with known
//! future trajectories, action labels, and camera-motion flow, plus corpus
//! assembly with detector-style noise and occlusion.
//!
//! The figure is a fixed base pose attached to a root (mid-hip) that
//! translates at a constant velocity; limbs swing sinusoidally with
//! action-specific phase patterns, and the bending class adds a rigid
//! forward-pitch ramp of the upper body. Root start positions and velocities
//! snap to 1/64-pixel steps so linear tracks — and anything extrapolated
//! from them — stay exact in floating point.

use std::collections::BTreeMap;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fa::FlowField;
use crate::skeleton::{
    build_layout, extract_location, load_pose_jsonl, mask_joints, save_pose_jsonl,
    SkeletonSequence, Trajectory,
};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Action classes
// ---------------------------------------------------------------------------

/// The synthetic action vocabulary. The first two classes form the
/// binary-label setting; all four form the multi-class setting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionClass {
    Walking,
    Standing,
    Bending,
    Running,
}

impl ActionClass {
    pub const ALL: [ActionClass; 4] =
        [ActionClass::Walking, ActionClass::Standing, ActionClass::Bending, ActionClass::Running];

    pub fn name(self) -> &'static str {
        match self {
            ActionClass::Walking => "walking",
            ActionClass::Standing => "standing",
            ActionClass::Bending => "bending",
            ActionClass::Running => "running",
        }
    }

    /// Stable label index used as the classifier target.
    pub fn index(self) -> usize {
        match self {
            ActionClass::Walking => 0,
            ActionClass::Standing => 1,
            ActionClass::Bending => 2,
            ActionClass::Running => 3,
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        ActionClass::ALL
            .into_iter()
            .find(|c| c.name() == name)
            .ok_or_else(|| Error::Parse(format!("unknown action class '{name}'")))
    }
}

/// Parses a class mix such as `walking=0.5,standing=0.5`.
pub fn parse_mix(expr: &str) -> Result<BTreeMap<ActionClass, f64>> {
    let mut mix = BTreeMap::new();
    for part in expr.split(',') {
        let (name, weight) = part
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("mix entry '{part}' is not name=weight")))?;
        let class = ActionClass::parse(name.trim())?;
        let weight: f64 = weight
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("bad mix weight '{weight}'")))?;
        if mix.insert(class, weight).is_some() {
            return Err(Error::Parse(format!("class '{}' listed twice", class.name())));
        }
    }
    Ok(mix)
}

// ---------------------------------------------------------------------------
// Scenario configuration
// ---------------------------------------------------------------------------

/// Everything needed to generate one clip deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub action: ActionClass,
    pub layout_preset: String,
    /// Root velocity in pixels/frame (world motion; camera pan adds on top).
    pub root_velocity: (f64, f64),
    /// Limb swing rate in cycles/frame.
    pub gait_frequency: f64,
    /// Limb swing extent in pixels.
    pub gait_amplitude: f64,
    /// Camera pan velocity in pixels/frame; also the uniform flow vector.
    pub camera_pan: (f64, f64),
    pub image_size: (usize, usize),
    pub t_obs: usize,
    pub t_pred: usize,
    pub rng_seed: u64,
    pub occlusion_ratio: f64,
    pub jitter_sigma: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            action: ActionClass::Walking,
            layout_preset: "coco18".to_string(),
            root_velocity: (1.5, 0.0),
            gait_frequency: 0.1,
            gait_amplitude: 3.0,
            camera_pan: (0.0, 0.0),
            image_size: (64, 48),
            t_obs: 10,
            t_pred: 10,
            rng_seed: 0,
            occlusion_ratio: 0.0,
            jitter_sigma: 1.5,
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_obs < 2 || self.t_pred < 2 {
            return Err(Error::Config("t_obs and t_pred must be at least 2".into()));
        }
        if self.gait_frequency < 0.0 || self.gait_amplitude < 0.0 || self.jitter_sigma < 0.0 {
            return Err(Error::Config("frequencies, amplitudes and sigma must be nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.occlusion_ratio) {
            return Err(Error::Config(format!(
                "occlusion ratio {} outside [0, 1]",
                self.occlusion_ratio
            )));
        }
        if self.image_size.0 < 4 || self.image_size.1 < 3 {
            return Err(Error::Config(format!(
                "image {}x{} too small",
                self.image_size.0, self.image_size.1
            )));
        }
        let moving = self.root_velocity != (0.0, 0.0);
        match self.action {
            ActionClass::Walking | ActionClass::Running if !moving => Err(Error::Config(format!(
                "{} requires a nonzero root velocity",
                self.action.name()
            ))),
            ActionClass::Standing if moving => {
                Err(Error::Config("standing requires zero root velocity".into()))
            }
            _ => Ok(()),
        }
    }

    fn total_frames(&self) -> usize {
        self.t_obs + self.t_pred
    }
}

// ---------------------------------------------------------------------------
// Figure tables
// ---------------------------------------------------------------------------

/// How one joint hangs off the root and moves with the gait.
struct JointMotion {
    /// Rest offset from the root, in figure units (x right, y down).
    offset: (f64, f64),
    /// Fraction of the gait amplitude this joint swings by (0 = rigid).
    swing_weight: f64,
    /// Gait phase; opposite limbs are a half-cycle apart.
    swing_phase: f64,
    /// Upper-body joints pitch forward during bending.
    upper: bool,
}

const PHASE_A: f64 = 0.0;
const PHASE_B: f64 = std::f64::consts::PI;

/// Joint table plus the pivot the upper body pitches around while bending.
/// The pivot sits on the joint that joins the upper group to the rest of the
/// skeleton, so the pitch rotation leaves every edge length untouched.
fn figure(preset: &str) -> Result<(Vec<JointMotion>, (f64, f64))> {
    let j = |offset: (f64, f64), swing_weight: f64, swing_phase: f64, upper: bool| JointMotion {
        offset,
        swing_weight,
        swing_phase,
        upper,
    };
    match preset {
        "coco18" => Ok((vec![
            j((0.0, -7.5), 0.0, PHASE_A, true),   // nose
            j((0.0, -6.0), 0.0, PHASE_A, true),   // neck
            j((-1.6, -5.8), 0.0, PHASE_A, true),  // right shoulder
            j((-1.8, -3.8), 0.35, PHASE_A, true), // right elbow
            j((-2.0, -1.8), 0.7, PHASE_A, true),  // right wrist
            j((1.6, -5.8), 0.0, PHASE_B, true),   // left shoulder
            j((1.8, -3.8), 0.35, PHASE_B, true),  // left elbow
            j((2.0, -1.8), 0.7, PHASE_B, true),   // left wrist
            j((-1.0, 0.0), 0.0, PHASE_B, false),  // right hip
            j((-1.05, 2.8), 0.5, PHASE_B, false), // right knee
            j((-1.1, 5.6), 1.0, PHASE_B, false),  // right ankle
            j((1.0, 0.0), 0.0, PHASE_A, false),   // left hip
            j((1.05, 2.8), 0.5, PHASE_A, false),  // left knee
            j((1.1, 5.6), 1.0, PHASE_A, false),   // left ankle
            j((-0.4, -7.8), 0.0, PHASE_A, true),  // right eye
            j((0.4, -7.8), 0.0, PHASE_A, true),   // left eye
            j((-0.8, -7.6), 0.0, PHASE_A, true),  // right ear
            j((0.8, -7.6), 0.0, PHASE_A, true),   // left ear
        ], (0.0, -6.0))), // pivot: neck
        "toy5" => Ok((vec![
            j((0.0, -6.0), 0.0, PHASE_A, true), // head
            j((-2.0, 0.0), 0.0, PHASE_A, false), // right hip
            j((0.0, -2.0), 0.0, PHASE_A, false), // belly
            j((2.0, 0.0), 0.0, PHASE_A, false), // left hip
            j((0.0, 5.0), 1.0, PHASE_A, false), // foot
        ], (-2.0, 0.0))), // pivot: the head's neighbor joint
        other => Err(Error::Config(format!("no figure table for layout preset '{other}'"))),
    }
}

/// Snaps a value to the nearest 1/64 pixel.
fn dyadic(x: f64) -> f64 {
    (x * 64.0).round() / 64.0
}

// ---------------------------------------------------------------------------
// Sample generation
// ---------------------------------------------------------------------------

/// One generated clip with its ground truth and degraded observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Noise-free pose over all `t_obs + t_pred` frames.
    pub clean: SkeletonSequence,
    /// First `t_obs` frames after jitter and occlusion.
    pub observed: SkeletonSequence,
    /// Mid-hip track over the last `t_pred` frames.
    pub future: Trajectory,
    pub action: ActionClass,
    /// Camera-motion field over the observed frames.
    pub flow: FlowField,
    /// The exact recipe, kept so degradations can be re-applied at other
    /// settings.
    pub config: ScenarioConfig,
}

/// Generates one clip from its scenario recipe.
pub fn gen_sample(cfg: &ScenarioConfig) -> Result<Sample> {
    cfg.validate()?;
    let layout = build_layout(&cfg.layout_preset)?;
    let (joints_spec, pivot) = figure(&cfg.layout_preset)?;
    if joints_spec.len() != layout.joint_count() {
        return Err(Error::Config(format!(
            "figure table for '{}' disagrees with its layout",
            cfg.layout_preset
        )));
    }
    let (w, h) = (cfg.image_size.0 as f64, cfg.image_size.1 as f64);
    let total = cfg.total_frames();
    let scale = h / 16.0;

    let (amplitude, frequency) = match cfg.action {
        ActionClass::Standing => (0.0, cfg.gait_frequency),
        ActionClass::Running => (1.5 * cfg.gait_amplitude, 2.0 * cfg.gait_frequency),
        _ => (cfg.gait_amplitude, cfg.gait_frequency),
    };
    let velocity = (
        dyadic(cfg.root_velocity.0 + cfg.camera_pan.0),
        dyadic(cfg.root_velocity.1 + cfg.camera_pan.1),
    );
    // start so the track straddles the image center
    let root0 = (
        dyadic(w / 2.0 - velocity.0 * (total - 1) as f64 / 2.0),
        dyadic(h * 0.55 - velocity.1 * (total - 1) as f64 / 2.0),
    );
    // bending pitches the upper body forward by up to 60 degrees
    let pitch_rate = match cfg.action {
        ActionClass::Bending => std::f64::consts::FRAC_PI_3 / (total - 1) as f64,
        _ => 0.0,
    };

    let mut joints = Vec::with_capacity(total * joints_spec.len());
    for t in 0..total {
        let root = (root0.0 + velocity.0 * t as f64, root0.1 + velocity.1 * t as f64);
        let (sin_p, cos_p) = (pitch_rate * t as f64).sin_cos();
        let gait = std::f64::consts::TAU * frequency * t as f64;
        for spec in &joints_spec {
            let (mut ox, mut oy) = (spec.offset.0 * scale, spec.offset.1 * scale);
            if spec.upper {
                let (rx, ry) = (ox - pivot.0 * scale, oy - pivot.1 * scale);
                ox = pivot.0 * scale + rx * cos_p - ry * sin_p;
                oy = pivot.1 * scale + rx * sin_p + ry * cos_p;
            }
            let swing = amplitude * spec.swing_weight * (gait + spec.swing_phase).sin();
            joints.push([root.0 + ox + swing, root.1 + oy, 1.0]);
        }
    }
    let k = joints_spec.len();
    let clean = SkeletonSequence::new(total, k, joints, vec![true; total * k])?;

    let track = extract_location(&clean, &layout);
    let future = Trajectory::new(track.points()[cfg.t_obs..].to_vec());

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut observed = clean.truncated(cfg.t_obs)?;
    if cfg.jitter_sigma > 0.0 {
        let mut jittered = Vec::with_capacity(cfg.t_obs * k);
        for t in 0..cfg.t_obs {
            for j in 0..k {
                let [x, y, c] = observed.get(t, j);
                let dx: f64 = rng.sample::<f64, _>(StandardNormal) * cfg.jitter_sigma;
                let dy: f64 = rng.sample::<f64, _>(StandardNormal) * cfg.jitter_sigma;
                jittered.push([x + dx, y + dy, c]);
            }
        }
        observed = SkeletonSequence::new(cfg.t_obs, k, jittered, vec![true; cfg.t_obs * k])?;
    }
    let mask_seed = rng.random::<u64>();
    let observed = mask_joints(&observed, cfg.occlusion_ratio, mask_seed)?;

    let flow = FlowField::uniform(cfg.image_size.0, cfg.image_size.1, &vec![cfg.camera_pan; cfg.t_obs])?;
    Ok(Sample { clean, observed, future, action: cfg.action, flow, config: cfg.clone() })
}

// ---------------------------------------------------------------------------
// Corpus generation
// ---------------------------------------------------------------------------

/// A generated dataset with its train/validation split.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub samples: Vec<Sample>,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    pub rng_seed: u64,
}

impl Corpus {
    pub fn train(&self) -> impl Iterator<Item = &Sample> {
        self.train_indices.iter().map(|&i| &self.samples[i])
    }

    pub fn val(&self) -> impl Iterator<Item = &Sample> {
        self.val_indices.iter().map(|&i| &self.samples[i])
    }
}

/// Per-sample seed, mixed so neighboring indices decorrelate.
fn sample_seed(corpus_seed: u64, index: usize) -> u64 {
    crate::mix_seed(corpus_seed, index as u64 + 1)
}

/// Draws one scenario: a class from the mix, then class-appropriate motion
/// parameters around the base recipe.
fn draw_scenario(
    base: &ScenarioConfig,
    mix: &BTreeMap<ActionClass, f64>,
    seed: u64,
) -> ScenarioConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pick = rng.random::<f64>();
    let mut action = *mix.keys().next_back().expect("validated nonempty");
    for (&class, &weight) in mix {
        if pick < weight {
            action = class;
            break;
        }
        pick -= weight;
    }
    let speed_range = match action {
        ActionClass::Walking => 0.75..2.0,
        ActionClass::Running => 2.5..4.0,
        ActionClass::Standing | ActionClass::Bending => 0.0..0.0,
    };
    let velocity = if speed_range.is_empty() {
        (0.0, 0.0)
    } else {
        let speed = rng.random_range(speed_range);
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        (dyadic(sign * speed), dyadic(rng.random_range(-0.2..0.2)))
    };
    let frequency = rng.random_range(0.06..0.14);
    let amplitude = base.gait_amplitude * rng.random_range(0.5..1.5);
    let camera_pan =
        (pan_from(&mut rng, base.camera_pan.0), pan_from(&mut rng, base.camera_pan.1));
    ScenarioConfig {
        action,
        root_velocity: velocity,
        gait_frequency: frequency,
        gait_amplitude: amplitude,
        camera_pan,
        rng_seed: rng.random::<u64>(),
        ..base.clone()
    }
}

/// Uniform draw in ±extent, snapped to the dyadic grid; zero extent stays
/// exactly zero.
fn pan_from(rng: &mut ChaCha8Rng, extent: f64) -> f64 {
    if extent == 0.0 {
        0.0
    } else {
        dyadic(rng.random_range(-extent.abs()..extent.abs()))
    }
}

/// Generates `n` samples with randomized per-sample scenarios and an 80/20
/// train/validation split (the last fifth, rounded up, validates).
pub fn gen_corpus(
    n: usize,
    mix: &BTreeMap<ActionClass, f64>,
    base: &ScenarioConfig,
    rng_seed: u64,
) -> Result<Corpus> {
    if n == 0 {
        return Err(Error::Config("corpus size must be positive".into()));
    }
    if mix.is_empty() {
        return Err(Error::Config("class mix is empty".into()));
    }
    let total: f64 = mix.values().sum();
    if mix.values().any(|&w| w < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("class mix must be nonnegative and sum to 1, sums to {total}")));
    }
    base.validate().or_else(|_| {
        // the base recipe's own action/velocity pairing is irrelevant; it is
        // overwritten per sample, so only the shared fields need to hold
        ScenarioConfig { action: ActionClass::Walking, root_velocity: (1.0, 0.0), ..base.clone() }
            .validate()
    })?;
    let samples: Vec<Sample> = (0..n)
        .into_par_iter()
        .map(|i| gen_sample(&draw_scenario(base, mix, sample_seed(rng_seed, i))))
        .collect::<Result<_>>()?;
    let val_len = n.div_ceil(5);
    Ok(Corpus {
        samples,
        train_indices: (0..n - val_len).collect(),
        val_indices: (n - val_len..n).collect(),
        rng_seed,
    })
}

// ---------------------------------------------------------------------------
// Corpus persistence
// ---------------------------------------------------------------------------

const CORPUS_VERSION: &str = "gprar-corpus-v1";

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: String,
    rng_seed: u64,
    train_indices: Vec<usize>,
    val_indices: Vec<usize>,
    configs: Vec<ScenarioConfig>,
}

fn sample_dir(dir: &Path, index: usize) -> std::path::PathBuf {
    dir.join(format!("sample_{index:05}"))
}

impl Corpus {
    /// Writes the manifest plus one directory per sample (poses as JSON
    /// lines, the future track as CSV, flow as the binary field).
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let manifest = Manifest {
            format_version: CORPUS_VERSION.to_string(),
            rng_seed: self.rng_seed,
            train_indices: self.train_indices.clone(),
            val_indices: self.val_indices.clone(),
            configs: self.samples.iter().map(|s| s.config.clone()).collect(),
        };
        let mut file = BufWriter::new(std::fs::File::create(dir.join("manifest.json"))?);
        serde_json::to_writer_pretty(&mut file, &manifest)?;
        file.write_all(b"\n")?;
        file.flush()?;
        for (i, sample) in self.samples.iter().enumerate() {
            let sdir = sample_dir(dir, i);
            std::fs::create_dir_all(&sdir)?;
            save_pose_jsonl(&sample.clean, &sdir.join("clean.jsonl"))?;
            save_pose_jsonl(&sample.observed, &sdir.join("observed.jsonl"))?;
            sample.future.save_csv(&sdir.join("future.csv"))?;
            sample.flow.save_bin(&sdir.join("flow.bin"))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let file = std::fs::File::open(dir.join("manifest.json"))?;
        let manifest: Manifest = serde_json::from_reader(std::io::BufReader::new(file))?;
        if manifest.format_version != CORPUS_VERSION {
            return Err(Error::Parse(format!(
                "unsupported corpus version '{}'",
                manifest.format_version
            )));
        }
        let mut samples = Vec::with_capacity(manifest.configs.len());
        for (i, cfg) in manifest.configs.iter().enumerate() {
            let sdir = sample_dir(dir, i);
            samples.push(Sample {
                clean: load_pose_jsonl(&sdir.join("clean.jsonl"))?,
                observed: load_pose_jsonl(&sdir.join("observed.jsonl"))?,
                future: Trajectory::load_csv(&sdir.join("future.csv"))?,
                flow: FlowField::load_bin(&sdir.join("flow.bin"))?,
                action: cfg.action,
                config: cfg.clone(),
            });
        }
        let n = samples.len();
        for &i in manifest.train_indices.iter().chain(&manifest.val_indices) {
            if i >= n {
                return Err(Error::Parse(format!("split index {i} outside corpus of {n}")));
            }
        }
        Ok(Corpus {
            samples,
            train_indices: manifest.train_indices,
            val_indices: manifest.val_indices,
            rng_seed: manifest.rng_seed,
        })
    }
}
