//! IoU and PSNR of a checkpoint against the number of Euler steps.
//!
//! ```text
//! cargo run --release --example step_sweep -- <ckpt> [pairs]
//! ```

use std::path::PathBuf;

use tacit::analysis::{steps_sweep, SWEEP_STEPS};
use tacit::dataset::heldout_pairs;
use tacit::flow::load_checkpoint;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let ckpt = PathBuf::from(args.next().ok_or("usage: step_sweep <ckpt> [pairs]")?);
    let n: usize = args.next().map_or(Ok(32), |s| s.parse())?;

    let params = load_checkpoint(&ckpt, None)?.params;
    let pairs = heldout_pairs(0, n, &[11], params.config.resolution)?;
    println!("{:>4} {:>7} {:>8}", "N", "IoU", "PSNR");
    for row in steps_sweep(&params, &pairs, &SWEEP_STEPS, 32)? {
        println!("{:>4} {:>7.4} {:>8.2}", row.steps, row.iou, row.psnr);
    }
    Ok(())
}
