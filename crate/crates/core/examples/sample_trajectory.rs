//! Samples one held-out maze with a checkpoint and writes every Euler state.
//!
//! ```text
//! cargo run --release --example sample_trajectory -- <ckpt> [steps] [out_dir]
//! ```

use std::path::PathBuf;

use tacit::analysis::{iou, red_mask, red_mask_u8, trajectory_grid};
use tacit::dataset::heldout_pairs;
use tacit::flow::load_checkpoint;
use tacit::sampler::{euler_sample, export_trajectory, EulerOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let ckpt = PathBuf::from(
        args.next()
            .ok_or("usage: sample_trajectory <ckpt> [steps] [out_dir]")?,
    );
    let steps: usize = args.next().map_or(Ok(10), |s| s.parse())?;
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/trajectory".into()));

    let params = load_checkpoint(&ckpt, None)?.params;
    let res = params.config.resolution;
    let pair = heldout_pairs(0, 1, &[11], res)?.remove(0);
    let sample = euler_sample(
        &params,
        &pair.input.to_float(),
        EulerOptions::new(steps).recording(),
    )?;
    let traj = sample.trajectory.expect("recorded");

    export_trajectory(&traj, &out)?;
    trajectory_grid(&traj, steps + 1).write_ppm(out.join("grid.ppm"))?;
    pair.target.write_ppm(out.join("target.ppm"))?;
    let score = iou(&red_mask(&sample.output), &red_mask_u8(&pair.target))?;
    println!("{} states in {}, IoU {score:.3}", traj.len(), out.display());
    Ok(())
}
