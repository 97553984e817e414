//! Generates a small size-11 dataset and trains the desk preset on it.
//!
//! ```text
//! cargo run --release --example train_desk -- [out_dir] [epochs] [pairs]
//! ```

use std::path::PathBuf;
use std::time::Instant;

use tacit::dataset::{generate_dataset, GenerateConfig};
use tacit::flow::{train_with, TrainConfig};
use tacit::model::ModelConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "target/desk-run".into()));
    let epochs: u32 = args.next().map_or(Ok(10), |s| s.parse())?;
    let pairs: usize = args.next().map_or(Ok(5000), |s| s.parse())?;

    let data = out.join("data");
    let gen = GenerateConfig {
        count: pairs,
        sizes: vec![11],
        seed: 1,
        resolution: ModelConfig::desk().resolution,
        shard_size: 1000,
    };
    let summary = generate_dataset(&gen, &data)?;
    println!("{} pairs in {} shards", summary.count, summary.shards.len());

    let mut cfg = TrainConfig::desk(data, out.join("run"));
    cfg.epochs = epochs;
    let start = Instant::now();
    let report = train_with(&cfg, |row| {
        let l2 = row
            .heldout_l2
            .map(|v| format!("{v:.5}"))
            .unwrap_or_default();
        println!(
            "epoch {:>3}  loss {:.6}  held-out L2 {l2:>8}  [{:.0?}]",
            row.epoch,
            row.loss,
            start.elapsed()
        );
    })?;
    let first = report.log.rows.first().map(|r| r.loss).unwrap_or(f64::NAN);
    let last = report.log.rows.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!("loss ratio epoch 1 / last: {:.1}x", first / last);
    Ok(())
}
