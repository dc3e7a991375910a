//! Randomized invariant checks over the geometry, masking, imputation, and
//! metric layers, plus frozen-output guards for the two toy models.

use std::collections::BTreeSet;

use gprar_core::eval::{ade, const_vel, fde, knn_impute};
use gprar_core::fa::{
    grid_flow, FAConfig, FAModel, FlowField, StreamSource, GRID_CELLS, GRID_COLS, GRID_ROWS,
};
use gprar_core::prar::{PRARConfig, PRARModel};
use gprar_core::skeleton::{
    build_adjacency, extract_location, mask_joints, PartitionStrategy, SkeletonLayout,
    SkeletonSequence, Trajectory,
};
use gprar_core::synth::{gen_sample, ActionClass, ScenarioConfig};
use proptest::prelude::*;

/// Random connected skeletons: a spanning tree over 2..=12 joints with a few
/// extra edges and an arbitrary distinct hip pair.
fn arb_layout() -> impl Strategy<Value = SkeletonLayout> {
    (2usize..=12)
        .prop_flat_map(|k| {
            (
                Just(k),
                proptest::collection::vec(any::<prop::sample::Index>(), k - 1),
                proptest::collection::vec(
                    (any::<prop::sample::Index>(), any::<prop::sample::Index>()),
                    0..=3,
                ),
                any::<prop::sample::Index>(),
            )
        })
        .prop_map(|(k, parents, extras, hip)| {
            let mut edges: BTreeSet<(usize, usize)> = parents
                .iter()
                .enumerate()
                .map(|(i, p)| (p.index(i + 1), i + 1))
                .collect();
            for (a, b) in extras {
                let (a, b) = (a.index(k), b.index(k));
                if a != b {
                    edges.insert((a.min(b), a.max(b)));
                }
            }
            let names = (0..k).map(|i| format!("j{i}")).collect();
            let h = hip.index(k);
            SkeletonLayout::new(names, edges.into_iter().collect(), (h, (h + 1) % k))
                .expect("generated layouts are connected and in range")
        })
}

/// A fully observed sequence degraded by `mask_joints`, together with the
/// clean original and the masking arguments.
#[allow(clippy::type_complexity)]
fn arb_masked_seq() -> impl Strategy<Value = (SkeletonSequence, SkeletonSequence, f64, u64)> {
    (1usize..=8, 1usize..=6)
        .prop_flat_map(|(t, k)| {
            (
                Just((t, k)),
                proptest::collection::vec((-200.0..200.0f64, -200.0..200.0f64), t * k),
                0.0..=1.0f64,
                any::<u64>(),
            )
        })
        .prop_map(|((t, k), xy, ratio, seed)| {
            let clean = SkeletonSequence::fully_observed(t, k, xy).expect("sized to t*k");
            let masked = mask_joints(&clean, ratio, seed).expect("ratio in [0,1]");
            (clean, masked, ratio, seed)
        })
}

fn arb_trajectory_pair() -> impl Strategy<Value = (Trajectory, Trajectory)> {
    (1usize..=12)
        .prop_flat_map(|n| {
            let pts = || proptest::collection::vec((-500.0..500.0f64, -500.0..500.0f64), n);
            (pts(), pts())
        })
        .prop_map(|(a, b)| (Trajectory::new(a), Trajectory::new(b)))
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

proptest! {
    #[test]
    fn adjacency_partitions_are_symmetric_and_nonnegative(layout in arb_layout()) {
        for strategy in [PartitionStrategy::Uniform, PartitionStrategy::Distance] {
            let adj = build_adjacency(&layout, strategy);
            let k = adj.joint_count();
            for part in adj.partitions() {
                let v = part.values();
                for i in 0..k {
                    for j in 0..k {
                        prop_assert!(v[i * k + j] >= 0.0);
                        prop_assert!((v[i * k + j] - v[j * k + i]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn distance_partitions_sum_to_the_uniform_matrix(layout in arb_layout()) {
        let uniform = build_adjacency(&layout, PartitionStrategy::Uniform);
        let distance = build_adjacency(&layout, PartitionStrategy::Distance);
        let k = uniform.joint_count();
        let whole = uniform.partitions()[0].values();
        for idx in 0..k * k {
            let sum: f64 = distance.partitions().iter().map(|p| p.values()[idx]).sum();
            prop_assert!((sum - whole[idx]).abs() < 1e-12);
        }
    }

    #[test]
    fn adjacency_row_sums_stay_within_the_degree_bound(layout in arb_layout()) {
        let adj = build_adjacency(&layout, PartitionStrategy::Uniform);
        let k = adj.joint_count();
        let mut degree = vec![1.0_f64; k];
        for &(a, b) in layout.edges() {
            degree[a] += 1.0;
            degree[b] += 1.0;
        }
        let v = adj.partitions()[0].values();
        for i in 0..k {
            let row: f64 = v[i * k..(i + 1) * k].iter().sum();
            prop_assert!(row > 0.0);
            // each neighbor contributes 1/sqrt(d_i d_j) <= 1/sqrt(d_i)
            prop_assert!(row <= degree[i].sqrt() + 1e-12);
        }
    }

    #[test]
    fn remasking_with_the_same_arguments_is_a_fixed_point(
        (_, masked, ratio, seed) in arb_masked_seq()
    ) {
        let again = mask_joints(&masked, ratio, seed).expect("ratio in [0,1]");
        prop_assert_eq!(again, masked);
    }

    #[test]
    fn masking_at_ratio_zero_changes_nothing((clean, _, _, seed) in arb_masked_seq()) {
        let out = mask_joints(&clean, 0.0, seed).expect("ratio in [0,1]");
        prop_assert_eq!(out, clean);
    }

    #[test]
    fn masking_drops_the_floor_count_and_preserves_survivors(
        (clean, masked, ratio, _) in arb_masked_seq()
    ) {
        let k = clean.joint_count();
        let drop = (ratio * k as f64).floor() as usize;
        for t in 0..clean.frames() {
            let hidden = (0..k).filter(|&j| !masked.is_observed(t, j)).count();
            prop_assert_eq!(hidden, drop);
            for j in 0..k {
                if masked.is_observed(t, j) {
                    prop_assert_eq!(masked.get(t, j), clean.get(t, j));
                } else {
                    prop_assert_eq!(masked.get(t, j), [0.0, 0.0, 0.0]);
                }
            }
        }
    }

    #[test]
    fn imputation_never_touches_observed_entries(
        (_, masked, _, _) in arb_masked_seq(),
        k in 1usize..=7,
    ) {
        let filled = knn_impute(&masked, k);
        for t in 0..masked.frames() {
            for j in 0..masked.joint_count() {
                if masked.is_observed(t, j) {
                    prop_assert!(filled.is_observed(t, j));
                    prop_assert_eq!(filled.get(t, j), masked.get(t, j));
                }
            }
        }
    }

    #[test]
    fn imputed_values_stay_inside_the_observed_range(
        (_, masked, _, _) in arb_masked_seq(),
        k in 1usize..=7,
    ) {
        let filled = knn_impute(&masked, k);
        for j in 0..masked.joint_count() {
            let seen: Vec<[f64; 3]> = (0..masked.frames())
                .filter(|&t| masked.is_observed(t, j))
                .map(|t| masked.get(t, j))
                .collect();
            for t in 0..masked.frames() {
                if masked.is_observed(t, j) {
                    continue;
                }
                if seen.is_empty() {
                    // a joint observed nowhere has no neighbors to average
                    prop_assert!(!filled.is_observed(t, j));
                    prop_assert_eq!(filled.get(t, j), [0.0, 0.0, 0.0]);
                    continue;
                }
                prop_assert!(filled.is_observed(t, j));
                let value = filled.get(t, j);
                for c in 0..3 {
                    let lo = seen.iter().map(|v| v[c]).fold(f64::INFINITY, f64::min);
                    let hi = seen.iter().map(|v| v[c]).fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(value[c] >= lo - 1e-9 && value[c] <= hi + 1e-9);
                }
            }
        }
    }

    #[test]
    fn displacement_errors_are_symmetric((a, b) in arb_trajectory_pair()) {
        let tol = 1e-12;
        prop_assert!((ade(&a, &b).unwrap() - ade(&b, &a).unwrap()).abs() < tol);
        prop_assert!((fde(&a, &b).unwrap() - fde(&b, &a).unwrap()).abs() < tol);
    }

    #[test]
    fn displacement_errors_vanish_on_identical_tracks((a, _) in arb_trajectory_pair()) {
        prop_assert_eq!(ade(&a, &a).unwrap(), 0.0);
        prop_assert_eq!(fde(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn displacement_errors_ignore_a_common_translation(
        (a, b) in arb_trajectory_pair(),
        dx in -300.0..300.0f64,
        dy in -300.0..300.0f64,
    ) {
        let shift = |t: &Trajectory| {
            Trajectory::new(t.points().iter().map(|&(x, y)| (x + dx, y + dy)).collect())
        };
        prop_assert!((ade(&shift(&a), &shift(&b)).unwrap() - ade(&a, &b).unwrap()).abs() < 1e-8);
        prop_assert!((fde(&shift(&a), &shift(&b)).unwrap() - fde(&a, &b).unwrap()).abs() < 1e-8);
    }

    #[test]
    fn ade_lies_between_the_extreme_pointwise_distances((a, b) in arb_trajectory_pair()) {
        let dists: Vec<f64> = a
            .points()
            .iter()
            .zip(b.points())
            .map(|(&p, &q)| dist(p, q))
            .collect();
        let lo = dists.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = dists.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mean = ade(&a, &b).unwrap();
        prop_assert!(mean >= lo - 1e-12 && mean <= hi + 1e-12);
        prop_assert!((fde(&a, &b).unwrap() - dists[dists.len() - 1]).abs() < 1e-12);
    }

    #[test]
    fn const_vel_is_exact_on_linear_integer_tracks(
        x0 in -100i32..=100,
        y0 in -100i32..=100,
        vx in -20i32..=20,
        vy in -20i32..=20,
        t_obs in 2usize..=10,
        t_pred in 1usize..=6,
    ) {
        let pts: Vec<(f64, f64)> = (0..t_obs + t_pred)
            .map(|t| (f64::from(x0 + vx * t as i32), f64::from(y0 + vy * t as i32)))
            .collect();
        let obs = Trajectory::new(pts[..t_obs].to_vec());
        let pred = const_vel(&obs, t_pred).expect("two points suffice");
        prop_assert_eq!(pred.points(), &pts[t_obs..]);
    }

    #[test]
    fn grid_cell_means_conserve_the_total_flow(
        (frames, w, h, data) in (1usize..=3, 4usize..=9, 3usize..=7).prop_flat_map(|(t, w, h)| {
            (
                Just(t),
                Just(w),
                Just(h),
                proptest::collection::vec(-8.0..8.0f32, t * w * h * 2),
            )
        })
    ) {
        let flow = FlowField::new(frames, w, h, data).expect("sized to t*w*h*2");
        let grid = grid_flow(&flow).expect("image covers the grid");
        let col = |c: usize| c * w / GRID_COLS;
        let row = |r: usize| r * h / GRID_ROWS;
        for t in 0..frames {
            let mut weighted = (0.0, 0.0);
            for r in 0..GRID_ROWS {
                for c in 0..GRID_COLS {
                    let area = ((row(r + 1) - row(r)) * (col(c + 1) - col(c))) as f64;
                    let (dx, dy) = grid.get(t, r * GRID_COLS + c);
                    weighted.0 += dx * area;
                    weighted.1 += dy * area;
                }
            }
            let mut total = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let (dx, dy) = flow.get(t, x, y);
                    total.0 += dx;
                    total.1 += dy;
                }
            }
            prop_assert!((weighted.0 - total.0).abs() < 1e-9 * (1.0 + total.0.abs()));
            prop_assert!((weighted.1 - total.1).abs() < 1e-9 * (1.0 + total.1.abs()));
        }
    }

    #[test]
    fn uniform_flow_reduces_to_the_pan_vector_in_every_cell(
        frames in 1usize..=4,
        w in 4usize..=10,
        h in 3usize..=8,
        pan in (-4.0..4.0f64, -4.0..4.0f64),
    ) {
        let pans = vec![pan; frames];
        let flow = FlowField::uniform(w, h, &pans).expect("finite pan");
        let grid = grid_flow(&flow).expect("image covers the grid");
        for t in 0..frames {
            // compare against the stored (f32-rounded) vector, not the input
            let stored = flow.get(t, 0, 0);
            for cell in 0..GRID_CELLS {
                let (dx, dy) = grid.get(t, cell);
                prop_assert!((dx - stored.0).abs() < 1e-12);
                prop_assert!((dy - stored.1).abs() < 1e-12);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Frozen toy-model outputs
// ---------------------------------------------------------------------------

fn golden_scenario() -> ScenarioConfig {
    ScenarioConfig {
        action: ActionClass::Walking,
        layout_preset: "toy5".to_string(),
        root_velocity: (1.25, 0.0),
        camera_pan: (0.25, 0.125),
        image_size: (64, 48),
        t_obs: 10,
        t_pred: 10,
        rng_seed: 7,
        occlusion_ratio: 0.2,
        ..ScenarioConfig::default()
    }
}

fn assert_close(actual: &[f64], frozen: &[f64]) {
    assert_eq!(actual.len(), frozen.len(), "value count drifted");
    for (i, (a, f)) in actual.iter().zip(frozen).enumerate() {
        assert!(
            (a - f).abs() <= 1e-12 * (1.0 + f.abs()),
            "value {i} drifted: {a:?} vs frozen {f:?}\nfull actual: {actual:?}"
        );
    }
}

/// Frozen pose-model outputs for a seed-7 toy model on a fixed clip. Any
/// change to initialization, graph diffusion, or the convolution stack that
/// alters numerics shows up here before it can silently skew the benchmarks.
#[test]
fn toy_pose_model_reproduces_frozen_outputs() {
    let sample = gen_sample(&golden_scenario()).expect("valid scenario");
    let model = PRARModel::new(PRARConfig::toy(2), 7).expect("valid config");
    let inference = model.infer(&sample.observed).expect("matching shapes");

    assert_close(&inference.logits, &[0.19008687879689326, -0.20278704814741136]);
    let recon0 = inference.recon.get(0, 0);
    assert_close(
        &recon0,
        &[-14.879753705679743, -3.0860405425730892, 0.4998882586736803],
    );
}

/// Frozen aggregator output for a seed-7 toy model fed by the pose model
/// above: the first and last predicted points of the trajectory.
#[test]
fn toy_aggregator_reproduces_frozen_outputs() {
    let sample = gen_sample(&golden_scenario()).expect("valid scenario");
    let prar = PRARModel::new(PRARConfig::toy(2), 7).expect("valid config");
    let inference = prar.infer(&sample.observed).expect("matching shapes");
    let grid = grid_flow(&sample.flow).expect("image covers the grid");

    let streams = gprar_core::fa::parse_streams("X+XR+PR+C+A").expect("known codes");
    let config = FAConfig::toy(streams, prar.config().action_channels());
    let fa = FAModel::new(config, 7).expect("valid config");
    let src = StreamSource {
        observed: &sample.observed,
        recon: Some(&inference.recon),
        action_seq: Some(&inference.action_seq),
        grid: Some(&grid),
        layout: prar.layout(),
    };
    let inputs = fa.inputs_from(&src).expect("all sources present");
    let last = extract_location(&sample.observed, prar.layout())
        .last()
        .expect("nonempty track");
    let pred = fa.predict_resolved(&inputs, last).expect("matching shapes");

    assert_eq!(pred.len(), 10);
    let (x0, y0) = pred.points()[0];
    let (x9, y9) = pred.points()[9];
    assert_close(
        &[x0, y0, x9, y9],
        &[
            -0.8982202479064534,
            0.2025904739436135,
            1.7042491455695088,
            -3.468508215107488,
        ],
    );
}
