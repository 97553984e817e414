//! Writes a small multi-size dataset and streams one epoch back.
//!
//! ```text
//! cargo run --release --example generate_shards -- [out_dir] [count]
//! ```

use std::path::PathBuf;

use tacit::dataset::{generate_dataset, iter_epoch, GenerateConfig};
use tacit::maze::DATASET_SIZES;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/shards".into()));
    let count: usize = args.next().map_or(Ok(500), |s| s.parse())?;

    let cfg = GenerateConfig {
        count,
        sizes: DATASET_SIZES.to_vec(),
        seed: 0,
        resolution: 64,
        shard_size: 128,
    };
    let summary = generate_dataset(&cfg, &out)?;
    for (size, n) in &summary.per_size {
        println!("size {size:>2}: {n} pairs");
    }
    println!("{} shards in {}", summary.shards.len(), out.display());

    let it = iter_epoch(&out, 32, 0, 0, 1)?;
    let meter = it.meter();
    let mut batches = 0;
    let mut samples = 0;
    for batch in it {
        samples += batch?.len();
        batches += 1;
    }
    println!(
        "epoch 0: {samples} samples in {batches} batches, peak {} shards resident",
        meter.peak()
    );
    Ok(())
}
