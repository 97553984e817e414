//! Emergence metrics over sampling trajectories.
//!
//! A pixel counts as "red" when `R > 0.5` and `G, B < 0.5`. Recall, IoU,
//! PSNR and L2 compare predictions with ground truth; the trajectory
//! analyses track when recall rises along `t`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::image::{tile_grid, Image, ImageError, ImageU8};
use crate::maze::{cells_pixel_mask, PairSample, SolutionPath};
use crate::sampler::{euler_sample_batch, EulerOptions, SampleError, Trajectory, VelocityField};
use crate::tensor::Scalar;

/// Reported in place of `+∞` when prediction and truth are identical.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Step counts swept by default.
pub const SWEEP_STEPS: [usize; 5] = [5, 10, 20, 50, 100];

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("recall is undefined for an empty ground-truth mask")]
    EmptyGroundTruth,
    #[error("mask shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("trajectory has no states")]
    EmptyTrajectory,
    #[error("solution path has {0} interior cells, need at least 3")]
    PathTooShort(usize),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RedMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl RedMask {
    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), height * width);
        Self {
            height,
            width,
            bits,
        }
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    fn check(&self, other: &Self) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(AnalysisError::ShapeMismatch(
                (self.height, self.width),
                (other.height, other.width),
            ));
        }
        Ok(())
    }

    fn intersection(&self, other: &Self) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| **a && **b)
            .count()
    }

    fn restrict(&self, keep: &[bool]) -> Self {
        Self {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().zip(keep).map(|(a, k)| *a && *k).collect(),
        }
    }
}

pub fn red_mask<T: Scalar>(image: &Image<T>) -> RedMask {
    assert_eq!(image.channels, 3, "red mask needs an RGB image");
    let plane = image.height * image.width;
    let half = T::from_f64(0.5);
    let (r, rest) = image.data.split_at(plane);
    let (g, b) = rest.split_at(plane);
    let bits = (0..plane)
        .map(|i| r[i] > half && g[i] < half && b[i] < half)
        .collect();
    RedMask {
        height: image.height,
        width: image.width,
        bits,
    }
}

pub fn red_mask_u8(image: &ImageU8) -> RedMask {
    red_mask(&image.to_float::<f32>())
}

/// `|pred ∩ gt| / |gt|`.
pub fn path_recall(pred: &RedMask, gt: &RedMask) -> Result<f64> {
    pred.check(gt)?;
    let n = gt.count();
    if n == 0 {
        return Err(AnalysisError::EmptyGroundTruth);
    }
    Ok(pred.intersection(gt) as f64 / n as f64)
}

/// `|∩| / |∪|`, 1 when both masks are empty.
pub fn iou(pred: &RedMask, gt: &RedMask) -> Result<f64> {
    pred.check(gt)?;
    let inter = pred.intersection(gt);
    let union = pred.count() + gt.count() - inter;
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Mean squared error.
pub fn l2_distance<T: Scalar>(pred: &Image<T>, gt: &Image<T>) -> Result<f64> {
    pred.check_same_shape(gt)?;
    let sum: f64 = pred
        .data
        .iter()
        .zip(&gt.data)
        .map(|(a, b)| {
            let d = a.as_f64() - b.as_f64();
            d * d
        })
        .sum();
    Ok(sum / pred.data.len().max(1) as f64)
}

/// `10·log₁₀(1/MSE)`; `+∞` for identical images.
pub fn psnr<T: Scalar>(pred: &Image<T>, gt: &Image<T>) -> Result<f64> {
    let mse = l2_distance(pred, gt)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

pub fn cap_psnr(db: f64) -> f64 {
    db.min(PSNR_CAP_DB)
}

/// `(t, recall)` for every recorded state, masking the state clamped to `[0, 1]`.
pub fn emergence_curve<T: Scalar>(traj: &Trajectory<T>, gt: &RedMask) -> Result<Vec<(f64, f64)>> {
    if traj.is_empty() {
        return Err(AnalysisError::EmptyTrajectory);
    }
    traj.states
        .iter()
        .map(|(t, x)| Ok((*t, path_recall(&red_mask(&x.clamp01()), gt)?)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Thresholds {
    pub onset: f64,
    pub completion: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            onset: 0.05,
            completion: 0.95,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transition {
    pub onset: Option<f64>,
    pub completion: Option<f64>,
    pub width: Option<f64>,
    pub recall_at_onset: Option<f64>,
}

impl Transition {
    /// True when recall never passed the onset threshold.
    pub fn never_emerged(&self) -> bool {
        self.onset.is_none()
    }
}

pub fn detect_transition(curve: &[(f64, f64)], th: Thresholds) -> Transition {
    let onset = curve.iter().find(|(_, r)| *r > th.onset).copied();
    let completion = curve
        .iter()
        .find(|(_, r)| *r > th.completion)
        .map(|(t, _)| *t);
    Transition {
        onset: onset.map(|(t, _)| t),
        completion,
        width: match (onset, completion) {
            (Some((a, _)), Some(b)) => Some(b - a),
            _ => None,
        },
        recall_at_onset: onset.map(|(_, r)| r),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionReport {
    pub sample: usize,
    pub transition: Transition,
    pub final_recall: f64,
    pub final_iou: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

/// Population mean and standard deviation of the present values.
pub fn mean_std(values: impl IntoIterator<Item = Option<f64>>) -> Option<MeanStd> {
    let v: Vec<f64> = values.into_iter().flatten().collect();
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Some(MeanStd {
        mean,
        std: var.sqrt(),
        count: v.len(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionSummary {
    pub onset: Option<MeanStd>,
    pub completion: Option<MeanStd>,
    pub width: Option<MeanStd>,
    pub recall_at_onset: Option<MeanStd>,
    pub final_recall: Option<MeanStd>,
    pub final_iou: Option<MeanStd>,
    pub never_emerged: usize,
}

pub fn summarize_transitions(reports: &[TransitionReport]) -> TransitionSummary {
    let field = |f: fn(&TransitionReport) -> Option<f64>| mean_std(reports.iter().map(f));
    TransitionSummary {
        onset: field(|r| r.transition.onset),
        completion: field(|r| r.transition.completion),
        width: field(|r| r.transition.width),
        recall_at_onset: field(|r| r.transition.recall_at_onset),
        final_recall: field(|r| Some(r.final_recall)),
        final_iou: field(|r| Some(r.final_iou)),
        never_emerged: reports
            .iter()
            .filter(|r| r.transition.never_emerged())
            .count(),
    }
}

/// Full per-sample transition analysis of a recorded trajectory.
pub fn analyze_trajectory<T: Scalar>(
    sample: usize,
    traj: &Trajectory<T>,
    gt: &RedMask,
    th: Thresholds,
) -> Result<(Vec<(f64, f64)>, TransitionReport)> {
    let curve = emergence_curve(traj, gt)?;
    let last = red_mask(&traj.last().ok_or(AnalysisError::EmptyTrajectory)?.clamp01());
    let report = TransitionReport {
        sample,
        transition: detect_transition(&curve, th),
        final_recall: path_recall(&last, gt)?,
        final_iou: iou(&last, gt)?,
    };
    Ok((curve, report))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentReport {
    pub sample: usize,
    /// Onsets of the start, middle and end thirds of the path.
    pub onsets: [Option<f64>; 3],
    pub simultaneous: bool,
}

/// Splits `n` items into three contiguous runs, remainder going to the
/// earlier runs.
pub fn thirds(n: usize) -> [std::ops::Range<usize>; 3] {
    let base = n / 3;
    let extra = n % 3;
    let len = |i: usize| base + usize::from(i < extra);
    let a = len(0);
    let b = a + len(1);
    [0..a, a..b, b..n]
}

/// Segment recall threshold for declaring a third "emerged".
pub const SEGMENT_THRESHOLD: f64 = 0.5;

/// Onset of each path third and whether they coincide within one step.
///
/// Thirds are taken over the red (interior) path cells in order from entry
/// to exit; the green endpoints are excluded.
pub fn segment_onsets<T: Scalar>(
    sample: usize,
    traj: &Trajectory<T>,
    path: &SolutionPath,
    size: usize,
    resolution: usize,
) -> Result<SegmentReport> {
    if traj.is_empty() {
        return Err(AnalysisError::EmptyTrajectory);
    }
    let interior = path.interior();
    if interior.len() < 3 {
        return Err(AnalysisError::PathTooShort(interior.len()));
    }
    let masks: Vec<RedMask> = thirds(interior.len())
        .into_iter()
        .map(|r| {
            RedMask::from_bits(
                resolution,
                resolution,
                cells_pixel_mask(&interior[r], size, resolution),
            )
        })
        .collect();
    let preds: Vec<(f64, RedMask)> = traj
        .states
        .iter()
        .map(|(t, x)| (*t, red_mask(&x.clamp01())))
        .collect();
    let mut onsets = [None; 3];
    for (slot, gt) in onsets.iter_mut().zip(&masks) {
        for (t, pred) in &preds {
            if path_recall(&pred.restrict(&gt.bits), gt)? > SEGMENT_THRESHOLD {
                *slot = Some(*t);
                break;
            }
        }
    }
    let tol = 1.0 / traj.steps.max(1) as f64 + 1e-12;
    let simultaneous = match onsets {
        [Some(a), Some(b), Some(c)] => a.max(b).max(c) - a.min(b).min(c) <= tol,
        _ => false,
    };
    Ok(SegmentReport {
        sample,
        onsets,
        simultaneous,
    })
}

pub fn fraction_simultaneous(reports: &[SegmentReport]) -> f64 {
    if reports.is_empty() {
        return 0.0;
    }
    reports.iter().filter(|r| r.simultaneous).count() as f64 / reports.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSweepRow {
    pub steps: usize,
    pub iou: f64,
    /// Mean of per-sample PSNR, each capped at [`PSNR_CAP_DB`].
    pub psnr: f64,
}

/// Mean IoU and PSNR of `N`-step samples for every `N` in `steps`.
pub fn steps_sweep<F: VelocityField<f32> + ?Sized>(
    field: &F,
    samples: &[PairSample],
    steps: &[usize],
    chunk: usize,
) -> Result<Vec<StepSweepRow>> {
    let inputs: Vec<Image<f32>> = samples.iter().map(|s| s.input.to_float()).collect();
    let targets: Vec<Image<f32>> = samples.iter().map(|s| s.target.to_float()).collect();
    let gts: Vec<RedMask> = targets.iter().map(red_mask).collect();
    let mut rows = Vec::with_capacity(steps.len());
    for &n in steps {
        let (mut iou_sum, mut psnr_sum) = (0.0, 0.0);
        for start in (0..inputs.len()).step_by(chunk.max(1)) {
            let end = (start + chunk.max(1)).min(inputs.len());
            let refs: Vec<&Image<f32>> = inputs[start..end].iter().collect();
            let outs = euler_sample_batch(field, &refs, EulerOptions::new(n))?;
            for (k, out) in outs.iter().enumerate() {
                let i = start + k;
                iou_sum += iou(&red_mask(&out.output), &gts[i])?;
                psnr_sum += cap_psnr(psnr(&out.output, &targets[i])?);
            }
        }
        let count = inputs.len().max(1) as f64;
        rows.push(StepSweepRow {
            steps: n,
            iou: iou_sum / count,
            psnr: psnr_sum / count,
        });
    }
    Ok(rows)
}

/// Tiles the trajectory states left to right, `cols` per row.
pub fn trajectory_grid<T: Scalar>(traj: &Trajectory<T>, cols: usize) -> ImageU8 {
    let cells: Vec<ImageU8> = traj.states.iter().map(|(_, x)| x.to_u8()).collect();
    tile_grid(&cells, cols, 1)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| AnalysisError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// `sample,t,recall`
pub fn write_emergence_csv(path: &Path, curves: &[(usize, Vec<(f64, f64)>)]) -> Result<()> {
    let mut s = String::from("sample,t,recall\n");
    for (sample, curve) in curves {
        for (t, r) in curve {
            writeln!(s, "{sample},{t},{r}").unwrap();
        }
    }
    write_text(path, &s)
}

/// One row per sample; absent values are empty fields.
pub fn write_transition_csv(path: &Path, reports: &[TransitionReport]) -> Result<()> {
    let mut s =
        String::from("sample,onset,completion,width,recall_at_onset,final_recall,final_iou\n");
    for r in reports {
        let tr = &r.transition;
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.sample,
            opt(tr.onset),
            opt(tr.completion),
            opt(tr.width),
            opt(tr.recall_at_onset),
            r.final_recall,
            r.final_iou
        )
        .unwrap();
    }
    write_text(path, &s)
}

pub fn write_segments_csv(path: &Path, reports: &[SegmentReport]) -> Result<()> {
    let mut s = String::from("sample,onset_start,onset_middle,onset_end,simultaneous\n");
    for r in reports {
        let [a, b, c] = r.onsets;
        writeln!(
            s,
            "{},{},{},{},{}",
            r.sample,
            opt(a),
            opt(b),
            opt(c),
            r.simultaneous
        )
        .unwrap();
    }
    write_text(path, &s)
}

/// `N,iou,psnr`
pub fn write_sweep_csv(path: &Path, rows: &[StepSweepRow]) -> Result<()> {
    let mut s = String::from("N,iou,psnr\n");
    for r in rows {
        writeln!(s, "{},{},{}", r.steps, r.iou, r.psnr).unwrap();
    }
    write_text(path, &s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;

    fn mask(bits: &[u8]) -> RedMask {
        RedMask::from_bits(1, bits.len(), bits.iter().map(|&b| b == 1).collect())
    }

    fn rgb(px: [f32; 3]) -> Image<f32> {
        Image::from_vec(3, 1, 1, px.to_vec()).unwrap()
    }

    #[test]
    fn red_thresholds() {
        assert!(red_mask(&rgb([0.6, 0.4, 0.4])).bits[0]);
        assert!(!red_mask(&rgb([0.6, 0.6, 0.4])).bits[0]);
        assert_eq!(
            red_mask(&Image::from_vec(3, 2, 2, vec![1.0f32; 12]).unwrap()).count(),
            0
        );
    }

    #[test]
    fn recall_cases() {
        let gt = mask(&[1, 1, 1, 1, 0, 0, 0, 0, 0]);
        let pred = mask(&[1, 1, 0, 0, 1, 1, 1, 0, 0]);
        assert_eq!(path_recall(&pred, &gt).unwrap(), 0.5);
        assert_eq!(path_recall(&gt, &gt).unwrap(), 1.0);
        assert_eq!(path_recall(&mask(&[0; 9]), &gt).unwrap(), 0.0);
        assert!(matches!(
            path_recall(&gt, &mask(&[0; 9])),
            Err(AnalysisError::EmptyGroundTruth)
        ));
    }

    #[test]
    fn iou_cases() {
        // ∩ = 2, ∪ = 5
        let a = mask(&[1, 1, 1, 0, 0, 0]);
        let b = mask(&[1, 1, 0, 1, 1, 0]);
        assert_eq!(iou(&a, &b).unwrap(), 0.4);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        assert_eq!(iou(&mask(&[1, 0]), &mask(&[0, 1])).unwrap(), 0.0);
        assert_eq!(iou(&mask(&[0, 0]), &mask(&[0, 0])).unwrap(), 1.0);
    }

    #[test]
    fn psnr_and_l2() {
        let a = Image::from_vec(1, 1, 4, vec![0.0f64; 4]).unwrap();
        let b = Image::from_vec(1, 1, 4, vec![0.1f64; 4]).unwrap();
        assert!((l2_distance(&a, &b).unwrap() - 0.01).abs() < 1e-15);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let ones = Image::from_vec(1, 1, 4, vec![1.0f64; 4]).unwrap();
        assert_eq!(psnr(&a, &ones).unwrap(), 0.0);
        assert_eq!(cap_psnr(psnr(&a, &a).unwrap()), 99.0);
    }

    #[test]
    fn thirds_give_remainder_to_earlier_segments() {
        assert_eq!(thirds(7), [0..3, 3..5, 5..7]);
        assert_eq!(thirds(8), [0..3, 3..6, 6..8]);
        assert_eq!(thirds(9), [0..3, 3..6, 6..9]);
    }

    #[test]
    fn step_curve_transition() {
        let curve: Vec<(f64, f64)> = (0..=50)
            .map(|i| {
                let t = i as f64 / 50.0;
                (
                    t,
                    match i {
                        0..=34 => 0.0,
                        35 => 0.5,
                        _ => 1.0,
                    },
                )
            })
            .collect();
        let tr = detect_transition(&curve, Thresholds::default());
        assert_eq!(tr.onset, Some(0.7));
        assert_eq!(tr.completion, Some(36.0 / 50.0));
        assert_eq!(tr.recall_at_onset, Some(0.5));
        assert!((tr.width.unwrap() - 0.02).abs() < 1e-12);
        let flat: Vec<(f64, f64)> = curve.iter().map(|(t, _)| (*t, 0.0)).collect();
        let tr = detect_transition(&flat, Thresholds::default());
        assert!(tr.never_emerged() && tr.completion.is_none());
    }

    #[test]
    fn mean_std_skips_absent() {
        let s = mean_std([Some(1.0), None, Some(3.0)]).unwrap();
        assert_eq!((s.mean, s.std, s.count), (2.0, 1.0, 2));
        assert!(mean_std([None]).is_none());
    }
}
