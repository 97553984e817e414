//! Recall curves and transition points of a checkpoint on held-out mazes.
//!
//! ```text
//! cargo run --release --example emergence -- <ckpt> [pairs] [steps]
//! ```

use std::path::PathBuf;

use tacit::analysis::{analyze_trajectory, red_mask_u8, summarize_transitions, Thresholds};
use tacit::dataset::heldout_pairs;
use tacit::flow::load_checkpoint;
use tacit::image::Image;
use tacit::sampler::{euler_sample_batch, EulerOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let ckpt = PathBuf::from(
        args.next()
            .ok_or("usage: emergence <ckpt> [pairs] [steps]")?,
    );
    let n: usize = args.next().map_or(Ok(16), |s| s.parse())?;
    let steps: usize = args.next().map_or(Ok(50), |s| s.parse())?;

    let params = load_checkpoint(&ckpt, None)?.params;
    let pairs = heldout_pairs(0, n, &[11], params.config.resolution)?;
    let inputs: Vec<Image<f32>> = pairs.iter().map(|p| p.input.to_float()).collect();
    let refs: Vec<&Image<f32>> = inputs.iter().collect();
    let outs = euler_sample_batch(&params, &refs, EulerOptions::new(steps).recording())?;

    let mut reports = Vec::new();
    for (i, (out, pair)) in outs.iter().zip(&pairs).enumerate() {
        let traj = out.trajectory.as_ref().expect("recorded");
        let (_, r) =
            analyze_trajectory(i, traj, &red_mask_u8(&pair.target), Thresholds::default())?;
        println!(
            "sample {i:>2}: onset {:?} width {:?} final IoU {:.3}",
            r.transition.onset, r.transition.width, r.final_iou
        );
        reports.push(r);
    }
    let s = summarize_transitions(&reports);
    if let Some(o) = s.onset {
        println!("onset {:.3} ± {:.3} over {}", o.mean, o.std, o.count);
    }
    println!("never emerged: {}/{}", s.never_emerged, reports.len());
    Ok(())
}
