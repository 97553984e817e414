mod common;

use common::*;
use tacit::analysis::{
    analyze_trajectory, detect_transition, emergence_curve, fraction_simultaneous, iou,
    path_recall, red_mask_u8, segment_onsets, steps_sweep, summarize_transitions, Thresholds,
};
use tacit::image::Image;
use tacit::maze::{generate_maze, generate_pair, solve_maze, DATASET_SIZES};
use tacit::sampler::FnField;

const STEPS: usize = 100;

fn case(i: usize) -> (tacit::maze::PairSample, tacit::maze::SolutionPath) {
    let size = DATASET_SIZES[i % DATASET_SIZES.len()];
    let seed = 1000 + i as u64;
    let path = solve_maze(&generate_maze(size, seed).unwrap()).unwrap();
    (generate_pair(size, seed, 64).unwrap(), path)
}

#[test]
fn planted_switch_is_recovered() {
    let dt = 1.0 / STEPS as f64;
    let mut reports = Vec::new();
    for i in 0..50 {
        let (pair, _) = case(i);
        let traj = switch_trajectory(&pair, STEPS, 0.7);
        let gt = red_mask_u8(&pair.target);
        let (_, r) = analyze_trajectory(i, &traj, &gt, Thresholds::default()).unwrap();
        let onset = r.transition.onset.unwrap();
        assert!((onset - 0.7).abs() <= dt + 1e-12, "case {i}: onset {onset}");
        assert!(r.transition.width.unwrap() <= 2.0 * dt + 1e-12);
        assert_eq!(r.final_recall, 1.0);
        assert_eq!(r.final_iou, 1.0);
        reports.push(r);
    }
    let s = summarize_transitions(&reports);
    assert!((s.onset.unwrap().mean - 0.7).abs() < 1e-9);
    assert!(s.onset.unwrap().std < 1e-9);
    assert_eq!(s.never_emerged, 0);
}

#[test]
fn sequential_and_simultaneous_emergence_are_told_apart() {
    let mut seq = Vec::new();
    let mut all = Vec::new();
    for i in 0..50 {
        let (pair, path) = case(i);
        let size = pair.size as usize;
        let a = staged_trajectory(&pair, &path, STEPS, [0.3, 0.5, 0.7]);
        let b = staged_trajectory(&pair, &path, STEPS, [0.6, 0.6, 0.6]);
        let ra = segment_onsets(i, &a, &path, size, 64).unwrap();
        let rb = segment_onsets(i, &b, &path, size, 64).unwrap();
        assert_eq!(ra.onsets, [Some(0.3), Some(0.5), Some(0.7)], "case {i}");
        assert!(!ra.simultaneous);
        assert!(rb.simultaneous, "case {i}: {:?}", rb.onsets);
        seq.push(ra);
        all.push(rb);
    }
    assert_eq!(fraction_simultaneous(&seq), 0.0);
    assert_eq!(fraction_simultaneous(&all), 1.0);
}

#[test]
fn curve_is_a_step_function_for_a_planted_switch() {
    let (pair, _) = case(3);
    let traj = switch_trajectory(&pair, 10, 0.7);
    let curve = emergence_curve(&traj, &red_mask_u8(&pair.target)).unwrap();
    assert_eq!(curve.len(), 11);
    for (t, r) in &curve {
        assert_eq!(*r, if *t >= 0.7 - 1e-12 { 1.0 } else { 0.0 }, "t={t}");
    }
    let tr = detect_transition(&curve, Thresholds::default());
    assert_eq!(tr.onset, Some(0.7));
    assert_eq!(tr.width, Some(0.0));
}

#[test]
fn never_emerging_trajectory_has_no_onset() {
    let (pair, _) = case(0);
    let traj = switch_trajectory(&pair, 10, 2.0);
    let (_, r) =
        analyze_trajectory(0, &traj, &red_mask_u8(&pair.target), Thresholds::default()).unwrap();
    assert!(r.transition.never_emerged());
    assert_eq!(r.final_recall, 0.0);
}

#[test]
fn metrics_on_identical_and_disjoint_masks() {
    let (pair, _) = case(1);
    let gt = red_mask_u8(&pair.target);
    let none = red_mask_u8(&pair.input);
    assert_eq!(iou(&gt, &gt).unwrap(), 1.0);
    assert_eq!(iou(&none, &gt).unwrap(), 0.0);
    assert_eq!(iou(&none, &none).unwrap(), 1.0);
    assert_eq!(path_recall(&gt, &gt).unwrap(), 1.0);
    assert!(path_recall(&gt, &none).is_err());
}

#[test]
fn oracle_field_sweep_is_flat_at_the_cap() {
    // v = x1 - x0 for the pair whose input is x: Euler lands on the target
    // exactly for every N.
    let pairs: Vec<_> = (0..4).map(|i| generate_pair(11, i, 32).unwrap()).collect();
    let targets: Vec<(Image<f32>, Image<f32>)> = pairs
        .iter()
        .map(|p| (p.input.to_float(), p.target.to_float()))
        .collect();
    let field = FnField(|x: &Image<f32>, _t: f64| {
        let (x0, x1) = targets
            .iter()
            .min_by(|a, b| {
                let d = |y: &Image<f32>| {
                    y.data
                        .iter()
                        .zip(&x.data)
                        .map(|(p, q)| (p - q).abs())
                        .sum::<f32>()
                };
                d(&a.0).total_cmp(&d(&b.0))
            })
            .unwrap();
        tacit::flow::velocity_target(x0, x1).unwrap()
    });
    let rows = steps_sweep(&field, &pairs, &[1], 2).unwrap();
    assert_eq!(rows[0].iou, 1.0);
    assert_eq!(rows[0].psnr, tacit::analysis::PSNR_CAP_DB);
}
