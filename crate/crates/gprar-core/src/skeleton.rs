//! Skeleton layouts, normalized graph adjacency, joint masking, and pose I/O.
//!
//! A skeleton is an undirected graph over joints; spatial edges connect
//! anatomically adjacent joints within a frame. Temporal connectivity (same
//! joint across consecutive frames) is *not* represented here — it is realized
//! by the temporal span of each graph-convolution layer.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Layout
// ---------------------------------------------------------------------------

/// An undirected joint graph plus the hip pair used for location extraction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkeletonLayout {
    joint_names: Vec<String>,
    edges: Vec<(usize, usize)>,
    hip_pair: (usize, usize),
}

impl SkeletonLayout {
    /// Validates that edges reference real joints, the graph is connected,
    /// and the hip indices are distinct and in range.
    pub fn new(
        joint_names: Vec<String>,
        edges: Vec<(usize, usize)>,
        hip_pair: (usize, usize),
    ) -> Result<Self> {
        let k = joint_names.len();
        if k == 0 {
            return Err(Error::Config("layout needs at least one joint".into()));
        }
        for &(a, b) in &edges {
            if a >= k || b >= k {
                return Err(Error::Config(format!(
                    "edge ({a},{b}) references a joint outside 0..{k}"
                )));
            }
            if a == b {
                return Err(Error::Config(format!("self-edge ({a},{b}) not allowed")));
            }
        }
        if hip_pair.0 >= k || hip_pair.1 >= k || (k > 1 && hip_pair.0 == hip_pair.1) {
            return Err(Error::Config(format!("invalid hip pair {hip_pair:?} for {k} joints")));
        }
        let layout = Self { joint_names, edges, hip_pair };
        if !layout.is_connected() {
            return Err(Error::Config("skeleton graph must be connected".into()));
        }
        Ok(layout)
    }

    pub fn joint_count(&self) -> usize {
        self.joint_names.len()
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// (left hip, right hip)
    pub fn hip_pair(&self) -> (usize, usize) {
        self.hip_pair
    }

    fn is_connected(&self) -> bool {
        let k = self.joint_count();
        let mut seen = vec![false; k];
        let mut queue = VecDeque::from([0_usize]);
        seen[0] = true;
        while let Some(i) = queue.pop_front() {
            for &(a, b) in &self.edges {
                let other = if a == i {
                    b
                } else if b == i {
                    a
                } else {
                    continue;
                };
                if !seen[other] {
                    seen[other] = true;
                    queue.push_back(other);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(&mut file, self)?;
        file.write_all(b"\n")?;
        file.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let raw: SkeletonLayout = serde_json::from_reader(BufReader::new(file))?;
        Self::new(raw.joint_names, raw.edges, raw.hip_pair)
    }
}

/// Returns a named layout preset: `coco18` (the standard 18-joint body model)
/// or `toy5` (a 5-joint chain for tests).
pub fn build_layout(preset: &str) -> Result<SkeletonLayout> {
    match preset {
        "coco18" => {
            let names = [
                "nose", "neck", "right_shoulder", "right_elbow", "right_wrist",
                "left_shoulder", "left_elbow", "left_wrist", "right_hip", "right_knee",
                "right_ankle", "left_hip", "left_knee", "left_ankle", "right_eye",
                "left_eye", "right_ear", "left_ear",
            ];
            let edges = vec![
                (0, 1),
                (1, 2),
                (2, 3),
                (3, 4),
                (1, 5),
                (5, 6),
                (6, 7),
                (1, 8),
                (8, 9),
                (9, 10),
                (1, 11),
                (11, 12),
                (12, 13),
                (0, 14),
                (14, 16),
                (0, 15),
                (15, 17),
            ];
            SkeletonLayout::new(names.iter().map(|s| s.to_string()).collect(), edges, (11, 8))
        }
        "toy5" => {
            let names = ["j0", "j1", "j2", "j3", "j4"];
            let edges = vec![(0, 1), (1, 2), (2, 3), (3, 4)];
            SkeletonLayout::new(names.iter().map(|s| s.to_string()).collect(), edges, (1, 3))
        }
        other => Err(Error::Config(format!("unknown layout preset '{other}'"))),
    }
}

// ---------------------------------------------------------------------------
// Normalized adjacency
// ---------------------------------------------------------------------------

/// How to split the neighbor set into partition groups, each with its own
/// learnable weight matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionStrategy {
    /// One partition holding self plus all 1-hop neighbors.
    Uniform,
    /// Two partitions: the joint itself, then its 1-hop neighbors.
    Distance,
}

/// One or more K*K nonnegative matrices, each symmetric-degree normalized:
/// entry (i,j) of a partition with adjacency A is A[i][j] / sqrt(d_i * d_j),
/// where degrees count self-loops of the *combined* graph. The normalization
/// keeps features from blowing up as they diffuse over the skeleton.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    partitions: Vec<Tensor>,
}

impl NormalizedAdjacency {
    pub fn partitions(&self) -> &[Tensor] {
        &self.partitions
    }

    pub fn joint_count(&self) -> usize {
        self.partitions[0].shape()[0]
    }
}

/// Builds the normalized adjacency stack for a layout.
pub fn build_adjacency(layout: &SkeletonLayout, strategy: PartitionStrategy) -> NormalizedAdjacency {
    let k = layout.joint_count();
    // degrees of A + I
    let mut degree = vec![1.0_f64; k];
    for &(a, b) in layout.edges() {
        degree[a] += 1.0;
        degree[b] += 1.0;
    }
    let norm = |raw: &[f64]| -> Tensor {
        let mut values = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                if raw[i * k + j] != 0.0 {
                    values[i * k + j] = raw[i * k + j] / (degree[i] * degree[j]).sqrt();
                }
            }
        }
        Tensor::new(vec![k, k], values).expect("square matrix")
    };
    let mut neighbors = vec![0.0; k * k];
    for &(a, b) in layout.edges() {
        neighbors[a * k + b] = 1.0;
        neighbors[b * k + a] = 1.0;
    }
    let partitions = match strategy {
        PartitionStrategy::Uniform => {
            let mut combined = neighbors;
            for i in 0..k {
                combined[i * k + i] = 1.0;
            }
            vec![norm(&combined)]
        }
        PartitionStrategy::Distance => {
            let mut selfs = vec![0.0; k * k];
            for i in 0..k {
                selfs[i * k + i] = 1.0;
            }
            vec![norm(&selfs), norm(&neighbors)]
        }
    };
    NormalizedAdjacency { partitions }
}

// ---------------------------------------------------------------------------
// Sequences
// ---------------------------------------------------------------------------

/// A pose track: T frames of K joints, each joint an (x, y, confidence)
/// triplet in pixels, plus an observation mask. Missing joints always carry
/// the sentinel value (0, 0, 0).
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSequence {
    frames: usize,
    joints_per_frame: usize,
    joints: Vec<[f64; 3]>,
    mask: Vec<bool>,
}

impl SkeletonSequence {
    /// Builds a sequence, enforcing the missing-value sentinel and the
    /// confidence range.
    pub fn new(frames: usize, joints_per_frame: usize, joints: Vec<[f64; 3]>, mask: Vec<bool>) -> Result<Self> {
        let n = frames * joints_per_frame;
        if joints.len() != n || mask.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "sequence needs {n} joints/mask entries, got {} and {}",
                joints.len(),
                mask.len()
            )));
        }
        for (i, (j, m)) in joints.iter().zip(&mask).enumerate() {
            if !m && *j != [0.0, 0.0, 0.0] {
                return Err(Error::Config(format!(
                    "masked joint {i} must carry (0,0,0), got {j:?}"
                )));
            }
            if !(0.0..=1.0).contains(&j[2]) {
                return Err(Error::Config(format!(
                    "confidence of joint {i} out of [0,1]: {}",
                    j[2]
                )));
            }
        }
        Ok(Self { frames, joints_per_frame, joints, mask })
    }

    /// All joints observed with confidence 1 at the given positions.
    pub fn fully_observed(frames: usize, joints_per_frame: usize, xy: Vec<(f64, f64)>) -> Result<Self> {
        let joints = xy.into_iter().map(|(x, y)| [x, y, 1.0]).collect();
        let mask = vec![true; frames * joints_per_frame];
        Self::new(frames, joints_per_frame, joints, mask)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joint_count(&self) -> usize {
        self.joints_per_frame
    }

    pub fn get(&self, t: usize, j: usize) -> [f64; 3] {
        self.joints[t * self.joints_per_frame + j]
    }

    pub fn is_observed(&self, t: usize, j: usize) -> bool {
        self.mask[t * self.joints_per_frame + j]
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// First `frames` frames as a new sequence.
    pub fn truncated(&self, frames: usize) -> Result<Self> {
        if frames > self.frames {
            return Err(Error::ShapeMismatch(format!(
                "cannot truncate {}-frame sequence to {frames}",
                self.frames
            )));
        }
        let n = frames * self.joints_per_frame;
        Self::new(frames, self.joints_per_frame, self.joints[..n].to_vec(), self.mask[..n].to_vec())
    }

    /// Dense [T, K, 3] tensor of the raw pixel values (missing joints zero).
    pub fn to_tensor(&self) -> Tensor {
        let values = self.joints.iter().flatten().copied().collect();
        Tensor::new(vec![self.frames, self.joints_per_frame, 3], values).expect("sized by construction")
    }

    /// Like [`to_tensor`](Self::to_tensor) but with x divided by `w` and y by
    /// `h`, mapping on-screen coordinates into roughly [0,1] for model input.
    pub fn to_tensor_scaled(&self, w: f64, h: f64) -> Tensor {
        let mut t = self.to_tensor();
        for joint in t.values_mut().chunks_mut(3) {
            joint[0] /= w;
            joint[1] /= h;
        }
        t
    }

    /// Interprets a [T, K, 3] tensor of normalized coordinates as a fully
    /// observed sequence in pixels, clamping confidence into [0,1].
    pub fn from_tensor_scaled(t: &Tensor, w: f64, h: f64) -> Result<Self> {
        let shape = t.shape();
        if shape.len() != 3 || shape[2] != 3 {
            return Err(Error::ShapeMismatch(format!(
                "expected [T,K,3] tensor, got {shape:?}"
            )));
        }
        let joints = t
            .values()
            .chunks(3)
            .map(|j| [j[0] * w, j[1] * h, j[2].clamp(0.0, 1.0)])
            .collect();
        Self::new(shape[0], shape[1], joints, vec![true; shape[0] * shape[1]])
    }
}

/// Per frame, forces `floor(ratio * K)` distinct random joints to the missing
/// value. Selection depends only on (seed, frame index), so re-masking an
/// already-masked sequence with the same arguments changes nothing.
pub fn mask_joints(seq: &SkeletonSequence, occlusion_ratio: f64, rng_seed: u64) -> Result<SkeletonSequence> {
    if !(0.0..=1.0).contains(&occlusion_ratio) {
        return Err(Error::Config(format!(
            "occlusion ratio must be in [0,1], got {occlusion_ratio}"
        )));
    }
    let k = seq.joint_count();
    let drop = (occlusion_ratio * k as f64).floor() as usize;
    let mut out = seq.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    for t in 0..seq.frames() {
        // partial Fisher-Yates: first `drop` entries are the masked joints
        let mut order: Vec<usize> = (0..k).collect();
        for i in 0..drop.min(k) {
            let j = rng.random_range(i..k);
            order.swap(i, j);
        }
        for &j in &order[..drop] {
            let idx = t * k + j;
            out.joints[idx] = [0.0, 0.0, 0.0];
            out.mask[idx] = false;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Trajectories and location extraction
// ---------------------------------------------------------------------------

/// An ordered list of (x, y) pixel locations, one per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    points: Vec<(f64, f64)>,
}

impl Trajectory {
    pub fn new(points: Vec<(f64, f64)>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn last(&self) -> Option<(f64, f64)> {
        self.points.last().copied()
    }

    /// Writes the `t,x,y` CSV form.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut file = BufWriter::new(std::fs::File::create(path)?);
        writeln!(file, "t,x,y")?;
        for (t, (x, y)) in self.points.iter().enumerate() {
            writeln!(file, "{t},{x},{y}")?;
        }
        file.flush()?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut points = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if i == 0 {
                if line.trim() != "t,x,y" {
                    return Err(Error::Parse(format!(
                        "{}: expected header 't,x,y', got '{line}'",
                        path.display()
                    )));
                }
                continue;
            }
            let cells: Vec<&str> = line.trim().split(',').collect();
            if cells.len() != 3 {
                return Err(Error::Parse(format!("{}: bad row '{line}'", path.display())));
            }
            let x: f64 = cells[1]
                .parse()
                .map_err(|_| Error::Parse(format!("{}: bad x '{}'", path.display(), cells[1])))?;
            let y: f64 = cells[2]
                .parse()
                .map_err(|_| Error::Parse(format!("{}: bad y '{}'", path.display(), cells[2])))?;
            points.push((x, y));
        }
        Ok(Self { points })
    }
}

/// Per-frame root location: the midpoint of the two hips when both are
/// observed, else the mean of all observed joints, else the origin.
pub fn extract_location(seq: &SkeletonSequence, layout: &SkeletonLayout) -> Trajectory {
    let (left, right) = layout.hip_pair();
    let points = (0..seq.frames())
        .map(|t| {
            if seq.is_observed(t, left) && seq.is_observed(t, right) {
                let l = seq.get(t, left);
                let r = seq.get(t, right);
                return (0.5 * (l[0] + r[0]), 0.5 * (l[1] + r[1]));
            }
            let mut sum = (0.0, 0.0);
            let mut count = 0.0;
            for j in 0..seq.joint_count() {
                if seq.is_observed(t, j) {
                    let v = seq.get(t, j);
                    sum.0 += v[0];
                    sum.1 += v[1];
                    count += 1.0;
                }
            }
            if count > 0.0 {
                (sum.0 / count, sum.1 / count)
            } else {
                (0.0, 0.0)
            }
        })
        .collect();
    Trajectory::new(points)
}

// ---------------------------------------------------------------------------
// Pose file I/O (JSON lines, one frame per line)
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct FrameRow {
    frame: usize,
    joints: Vec<[f64; 3]>,
    mask: Vec<bool>,
}

pub fn save_pose_jsonl(seq: &SkeletonSequence, path: &Path) -> Result<()> {
    let mut file = BufWriter::new(std::fs::File::create(path)?);
    let k = seq.joint_count();
    for t in 0..seq.frames() {
        let row = FrameRow {
            frame: t,
            joints: seq.joints[t * k..(t + 1) * k].to_vec(),
            mask: seq.mask[t * k..(t + 1) * k].to_vec(),
        };
        serde_json::to_writer(&mut file, &row)?;
        file.write_all(b"\n")?;
    }
    file.flush()?;
    Ok(())
}

pub fn load_pose_jsonl(path: &Path) -> Result<SkeletonSequence> {
    let file = std::fs::File::open(path)?;
    let mut joints = Vec::new();
    let mut mask = Vec::new();
    let mut k = None;
    let mut frames = 0;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row: FrameRow = serde_json::from_str(&line)
            .map_err(|e| Error::Parse(format!("{} line {}: {e}", path.display(), i + 1)))?;
        if row.frame != frames {
            return Err(Error::Parse(format!(
                "{} line {}: expected frame {frames}, got {}",
                path.display(),
                i + 1,
                row.frame
            )));
        }
        let expected = *k.get_or_insert(row.joints.len());
        if row.joints.len() != expected || row.mask.len() != expected {
            return Err(Error::Parse(format!(
                "{} line {}: inconsistent joint count",
                path.display(),
                i + 1
            )));
        }
        joints.extend(row.joints);
        mask.extend(row.mask);
        frames += 1;
    }
    let k = k.ok_or_else(|| Error::Parse(format!("{}: empty pose file", path.display())))?;
    SkeletonSequence::new(frames, k, joints, mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coco18_has_standard_edge_count() {
        let layout = build_layout("coco18").unwrap();
        assert_eq!(layout.joint_count(), 18);
        assert_eq!(layout.edges().len(), 17);
    }

    #[test]
    fn toy5_is_a_chain() {
        let layout = build_layout("toy5").unwrap();
        assert_eq!(layout.joint_count(), 5);
        assert_eq!(layout.edges(), &[(0, 1), (1, 2), (2, 3), (3, 4)]);
    }

    #[test]
    fn unknown_preset_is_an_error() {
        assert!(build_layout("bogus").is_err());
    }

    #[test]
    fn toy5_uniform_adjacency_entry() {
        // deg(0)=2, deg(1)=3 with self-loops -> entry (0,1) = 1/sqrt(6)
        let layout = build_layout("toy5").unwrap();
        let adj = build_adjacency(&layout, PartitionStrategy::Uniform);
        assert_eq!(adj.partitions().len(), 1);
        let m = adj.partitions()[0].values();
        assert!((m[1] - 1.0 / 6.0_f64.sqrt()).abs() < 1e-12);
        assert!((m[0] - 0.5).abs() < 1e-12); // (0,0): 1/sqrt(2*2)
    }

    #[test]
    fn single_joint_adjacency_is_identity() {
        let layout = SkeletonLayout::new(vec!["only".into()], vec![], (0, 0)).unwrap();
        let adj = build_adjacency(&layout, PartitionStrategy::Uniform);
        assert_eq!(adj.partitions()[0].values(), &[1.0]);
    }

    #[test]
    fn adjacency_is_symmetric() {
        for preset in ["toy5", "coco18"] {
            let layout = build_layout(preset).unwrap();
            for strategy in [PartitionStrategy::Uniform, PartitionStrategy::Distance] {
                let adj = build_adjacency(&layout, strategy);
                for p in adj.partitions() {
                    let k = layout.joint_count();
                    for i in 0..k {
                        for j in 0..k {
                            assert_eq!(p.values()[i * k + j], p.values()[j * k + i]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn distance_strategy_splits_self_and_neighbors() {
        let layout = build_layout("toy5").unwrap();
        let adj = build_adjacency(&layout, PartitionStrategy::Distance);
        assert_eq!(adj.partitions().len(), 2);
        let selfs = adj.partitions()[0].values();
        let neigh = adj.partitions()[1].values();
        assert!((selfs[0] - 0.5).abs() < 1e-12); // 1/deg(0)
        assert_eq!(neigh[0], 0.0);
        assert!((neigh[1] - 1.0 / 6.0_f64.sqrt()).abs() < 1e-12);
    }

    fn demo_seq() -> SkeletonSequence {
        let layout = build_layout("toy5").unwrap();
        let k = layout.joint_count();
        let xy = (0..3 * k).map(|i| (i as f64, 2.0 * i as f64)).collect();
        SkeletonSequence::fully_observed(3, k, xy).unwrap()
    }

    #[test]
    fn mask_ratio_zero_is_identity() {
        let seq = demo_seq();
        assert_eq!(mask_joints(&seq, 0.0, 7).unwrap(), seq);
    }

    #[test]
    fn mask_ratio_one_hides_everything() {
        let seq = demo_seq();
        let masked = mask_joints(&seq, 1.0, 7).unwrap();
        for t in 0..masked.frames() {
            for j in 0..masked.joint_count() {
                assert!(!masked.is_observed(t, j));
                assert_eq!(masked.get(t, j), [0.0, 0.0, 0.0]);
            }
        }
    }

    #[test]
    fn mask_half_of_18_hides_nine_per_frame() {
        let layout = build_layout("coco18").unwrap();
        let k = layout.joint_count();
        let xy = (0..2 * k).map(|i| (i as f64, i as f64)).collect();
        let seq = SkeletonSequence::fully_observed(2, k, xy).unwrap();
        let masked = mask_joints(&seq, 0.5, 3).unwrap();
        for t in 0..2 {
            let hidden = (0..k).filter(|&j| !masked.is_observed(t, j)).count();
            assert_eq!(hidden, 9);
        }
    }

    #[test]
    fn mask_is_idempotent_per_seed() {
        let seq = demo_seq();
        let once = mask_joints(&seq, 0.4, 11).unwrap();
        let twice = mask_joints(&once, 0.4, 11).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn location_from_hips() {
        let layout = build_layout("toy5").unwrap();
        let mut xy = vec![(0.0, 0.0); 5];
        xy[1] = (10.0, 20.0); // left hip
        xy[3] = (14.0, 20.0); // right hip
        let seq = SkeletonSequence::fully_observed(1, 5, xy).unwrap();
        let traj = extract_location(&seq, &layout);
        assert_eq!(traj.points()[0], (12.0, 20.0));
    }

    #[test]
    fn location_falls_back_to_observed_mean() {
        let layout = build_layout("toy5").unwrap();
        let joints = vec![
            [2.0, 2.0, 1.0],
            [0.0, 0.0, 0.0], // left hip hidden
            [4.0, 4.0, 1.0],
            [0.0, 0.0, 0.0], // right hip hidden
            [0.0, 0.0, 0.0],
        ];
        let mask = vec![true, false, true, false, false];
        let seq = SkeletonSequence::new(1, 5, joints, mask).unwrap();
        let traj = extract_location(&seq, &layout);
        assert_eq!(traj.points()[0], (3.0, 3.0));
    }

    #[test]
    fn location_of_empty_frame_is_origin() {
        let layout = build_layout("toy5").unwrap();
        let seq = SkeletonSequence::new(1, 5, vec![[0.0; 3]; 5], vec![false; 5]).unwrap();
        let traj = extract_location(&seq, &layout);
        assert_eq!(traj.points()[0], (0.0, 0.0));
    }

    #[test]
    fn pose_jsonl_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pose.jsonl");
        let seq = mask_joints(&demo_seq(), 0.4, 5).unwrap();
        save_pose_jsonl(&seq, &path).unwrap();
        let loaded = load_pose_jsonl(&path).unwrap();
        assert_eq!(loaded, seq);
    }

    #[test]
    fn layout_json_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("layout.json");
        let layout = build_layout("coco18").unwrap();
        layout.save(&path).unwrap();
        assert_eq!(SkeletonLayout::load(&path).unwrap(), layout);
    }

    #[test]
    fn trajectory_csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("traj.csv");
        let traj = Trajectory::new(vec![(1.5, -2.25), (3.0, 4.125)]);
        traj.save_csv(&path).unwrap();
        assert_eq!(Trajectory::load_csv(&path).unwrap(), traj);
    }
}
