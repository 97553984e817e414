//! Sharded binary storage of maze pairs and shuffled epoch streaming.
//!
//! Shard layout, all integers little-endian:
//!
//! ```text
//! "TACD" | version u16 | count u32 | resolution u16
//! count × ( size u16 | seed u64 | input res·res·3 u8 | target res·res·3 u8 )
//! ```
//!
//! Shards are named `batch_%05d.tacd`. An epoch visits shards in a seeded
//! order and each shard's samples in a seeded order; at most two shards are
//! in memory at once (the one being consumed and one prefetched).

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread::JoinHandle;

use thiserror::Error;

use crate::image::ImageU8;
use crate::maze::{generate_pair, validate_size, MazeError, PairSample};
use crate::rng;

pub const MAGIC: &[u8; 4] = b"TACD";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 12;
pub const EXTENSION: &str = "tacd";

/// Seeds with this bit set are reserved for held-out evaluation pairs.
pub const HELDOUT_BIT: u64 = 1 << 63;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: bad magic {found:?}")]
    BadMagic { path: PathBuf, found: [u8; 4] },
    #[error("{path}: truncated ({needed} bytes needed, {available} available)")]
    Truncated {
        path: PathBuf,
        needed: usize,
        available: usize,
    },
    #[error("{path}: version {found}, expected {VERSION}")]
    VersionMismatch { path: PathBuf, found: u16 },
    #[error("{path}: {extra} trailing bytes after {count} records")]
    TrailingBytes {
        path: PathBuf,
        count: usize,
        extra: usize,
    },
    #[error("mixed resolutions in one shard: {first} and {other}")]
    MixedResolution { first: usize, other: usize },
    #[error("{0}: no .tacd shards")]
    NoShards(PathBuf),
    #[error("batch size must be at least 1")]
    ZeroBatch,
    #[error("{0}")]
    InvalidConfig(String),
    #[error("prefetch worker stopped unexpectedly")]
    WorkerLost,
    #[error(transparent)]
    Maze(#[from] MazeError),
}

pub type Result<T> = std::result::Result<T, DatasetError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Bytes per record at a given resolution.
pub fn record_len(resolution: usize) -> usize {
    10 + 2 * resolution * resolution * 3
}

pub fn shard_name(index: usize) -> String {
    format!("batch_{index:05}.{EXTENSION}")
}

pub fn encode_batch(samples: &[PairSample]) -> Result<Vec<u8>> {
    let res = samples.first().map_or(0, |s| s.input.height);
    for s in samples {
        for img in [&s.input, &s.target] {
            if img.height != res || img.width != res {
                return Err(DatasetError::MixedResolution {
                    first: res,
                    other: img.height.max(img.width),
                });
            }
        }
    }
    let mut out = Vec::with_capacity(HEADER_LEN + samples.len() * record_len(res));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    out.extend_from_slice(&(res as u16).to_le_bytes());
    for s in samples {
        out.extend_from_slice(&s.size.to_le_bytes());
        out.extend_from_slice(&s.seed.to_le_bytes());
        out.extend_from_slice(&s.input.data);
        out.extend_from_slice(&s.target.data);
    }
    Ok(out)
}

pub fn decode_batch(bytes: &[u8], path: &Path) -> Result<Vec<PairSample>> {
    let truncated = |needed: usize| DatasetError::Truncated {
        path: path.to_path_buf(),
        needed,
        available: bytes.len(),
    };
    if bytes.len() < 4 {
        return Err(truncated(HEADER_LEN));
    }
    if &bytes[..4] != MAGIC {
        return Err(DatasetError::BadMagic {
            path: path.to_path_buf(),
            found: bytes[..4].try_into().unwrap(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(truncated(HEADER_LEN));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(DatasetError::VersionMismatch {
            path: path.to_path_buf(),
            found: version,
        });
    }
    let count = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let res = u16::from_le_bytes([bytes[10], bytes[11]]) as usize;
    let rec = record_len(res);
    let needed = HEADER_LEN + count * rec;
    if bytes.len() < needed {
        return Err(truncated(needed));
    }
    if bytes.len() > needed {
        return Err(DatasetError::TrailingBytes {
            path: path.to_path_buf(),
            count,
            extra: bytes.len() - needed,
        });
    }
    let img = res * res * 3;
    let mut out = Vec::with_capacity(count);
    for r in bytes[HEADER_LEN..].chunks_exact(rec) {
        let size = u16::from_le_bytes([r[0], r[1]]);
        let seed = u64::from_le_bytes(r[2..10].try_into().unwrap());
        let input = ImageU8 {
            height: res,
            width: res,
            data: r[10..10 + img].to_vec(),
        };
        let target = ImageU8 {
            height: res,
            width: res,
            data: r[10 + img..].to_vec(),
        };
        out.push(PairSample {
            input,
            target,
            size,
            seed,
        });
    }
    Ok(out)
}

pub fn write_batch(samples: &[PairSample], path: &Path) -> Result<()> {
    let bytes = encode_batch(samples)?;
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    w.write_all(&bytes).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn read_batch(path: &Path) -> Result<Vec<PairSample>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(path))?;
    decode_batch(&bytes, path)
}

/// Shard paths in `dir`, sorted by name.
pub fn list_shards(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == EXTENSION))
        .collect();
    if out.is_empty() {
        return Err(DatasetError::NoShards(dir.to_path_buf()));
    }
    out.sort();
    Ok(out)
}

/// Seed of the `i`-th training pair; bit 63 is always clear.
pub fn training_seed(base: u64, i: u64) -> u64 {
    rng::derive_seed(base, 0, i) & !HELDOUT_BIT
}

/// Seed of the `i`-th held-out pair; bit 63 is always set.
pub fn heldout_seed(base: u64, i: u64) -> u64 {
    rng::derive_seed(base, 1, i) | HELDOUT_BIT
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenerateConfig {
    pub count: usize,
    pub sizes: Vec<usize>,
    pub seed: u64,
    pub resolution: usize,
    pub shard_size: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenerateSummary {
    pub shards: Vec<PathBuf>,
    pub count: usize,
    /// `(size, pairs)` in the order of the config.
    pub per_size: Vec<(usize, usize)>,
}

/// The `i`-th pair of a dataset: sizes cycle through `sizes`.
pub fn dataset_pair(cfg: &GenerateConfig, i: usize) -> Result<PairSample> {
    let size = cfg.sizes[i % cfg.sizes.len()];
    Ok(generate_pair(
        size,
        training_seed(cfg.seed, i as u64),
        cfg.resolution,
    )?)
}

/// `count` held-out pairs, disjoint from every training seed.
pub fn heldout_pairs(
    base: u64,
    count: usize,
    sizes: &[usize],
    resolution: usize,
) -> Result<Vec<PairSample>> {
    (0..count)
        .map(|i| {
            Ok(generate_pair(
                sizes[i % sizes.len()],
                heldout_seed(base, i as u64),
                resolution,
            )?)
        })
        .collect()
}

pub fn generate_dataset(cfg: &GenerateConfig, out_dir: &Path) -> Result<GenerateSummary> {
    if cfg.sizes.is_empty() || cfg.shard_size == 0 {
        return Err(DatasetError::InvalidConfig(
            "need at least one size and a positive shard size".into(),
        ));
    }
    for &s in &cfg.sizes {
        validate_size(s)?;
    }
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let n_shards = cfg.count.div_ceil(cfg.shard_size).max(1);
    let mut shards = Vec::with_capacity(n_shards);
    for k in 0..n_shards {
        let range = k * cfg.shard_size..((k + 1) * cfg.shard_size).min(cfg.count);
        let samples = range
            .map(|i| dataset_pair(cfg, i))
            .collect::<Result<Vec<_>>>()?;
        let path = out_dir.join(shard_name(k));
        write_batch(&samples, &path)?;
        shards.push(path);
    }
    let per_size = cfg
        .sizes
        .iter()
        .enumerate()
        .map(|(k, &s)| (s, (k..cfg.count).step_by(cfg.sizes.len()).count()))
        .collect();
    Ok(GenerateSummary {
        shards,
        count: cfg.count,
        per_size,
    })
}

/// Shard visiting order and per-shard shuffle seeds for one epoch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpochPlan {
    pub shard_order: Vec<usize>,
    /// Indexed by shard, not by visiting position.
    pub sample_seeds: Vec<u64>,
}

pub fn plan_epoch(shards: usize, epoch: u64, base_seed: u64) -> EpochPlan {
    let mut order: Vec<usize> = (0..shards).collect();
    let mut r = rng::seeded(rng::derive_seed(base_seed, epoch, 0));
    rng::shuffle(&mut r, &mut order);
    let sample_seeds = (0..shards as u64)
        .map(|k| rng::derive_seed(base_seed, epoch, k + 1))
        .collect();
    EpochPlan {
        shard_order: order,
        sample_seeds,
    }
}

/// Counts shards currently materialized by an epoch stream.
#[derive(Debug, Default)]
pub struct ResidencyMeter {
    current: AtomicUsize,
    peak: AtomicUsize,
}

impl ResidencyMeter {
    fn acquire(&self) {
        let now = self.current.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now, Ordering::SeqCst);
    }

    fn release(&self) {
        self.current.fetch_sub(1, Ordering::SeqCst);
    }

    pub fn peak(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }
}

fn load_shuffled(path: &Path, seed: u64, meter: &ResidencyMeter) -> Result<Vec<PairSample>> {
    let mut samples = read_batch(path)?;
    meter.acquire();
    rng::shuffle(&mut rng::seeded(seed), &mut samples);
    Ok(samples)
}

enum Source {
    Inline {
        jobs: std::vec::IntoIter<(PathBuf, u64)>,
    },
    Prefetch {
        rx: Receiver<Result<Vec<PairSample>>>,
        handle: Option<JoinHandle<()>>,
    },
}

/// Stream of minibatches for one epoch. Not shareable between consumers.
pub struct EpochIter {
    source: Source,
    current: std::vec::IntoIter<PairSample>,
    holding: bool,
    batch_size: usize,
    meter: Arc<ResidencyMeter>,
    failed: bool,
}

impl EpochIter {
    pub fn meter(&self) -> Arc<ResidencyMeter> {
        Arc::clone(&self.meter)
    }

    fn next_shard(&mut self) -> Option<Result<Vec<PairSample>>> {
        match &mut self.source {
            Source::Inline { jobs } => {
                let (path, seed) = jobs.next()?;
                Some(load_shuffled(&path, seed, &self.meter))
            }
            Source::Prefetch { rx, handle } => match rx.recv() {
                Ok(r) => Some(r),
                Err(_) => {
                    let panicked = handle.take().is_some_and(|h| h.join().is_err());
                    panicked.then_some(Err(DatasetError::WorkerLost))
                }
            },
        }
    }

    fn drop_current(&mut self) {
        if self.holding {
            self.meter.release();
            self.holding = false;
        }
    }
}

impl Iterator for EpochIter {
    type Item = Result<Vec<PairSample>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed {
            return None;
        }
        let mut batch = Vec::with_capacity(self.batch_size);
        while batch.len() < self.batch_size {
            if let Some(s) = self.current.next() {
                batch.push(s);
                continue;
            }
            self.drop_current();
            match self.next_shard() {
                Some(Ok(samples)) => {
                    self.current = samples.into_iter();
                    self.holding = true;
                }
                Some(Err(e)) => {
                    self.failed = true;
                    return Some(Err(e));
                }
                None => break,
            }
        }
        if self.current.len() == 0 {
            self.drop_current();
        }
        (!batch.is_empty()).then_some(Ok(batch))
    }
}

impl Drop for EpochIter {
    fn drop(&mut self) {
        self.drop_current();
        if let Source::Prefetch { rx, handle } = &mut self.source {
            // Unblock the worker, then wait for it.
            let (_, dead) = sync_channel(0);
            drop(std::mem::replace(rx, dead));
            if let Some(h) = handle.take() {
                let _ = h.join();
            }
        }
    }
}

/// Minibatches covering every sample in `dir` exactly once.
///
/// With `workers == 0` shards load on the calling thread; otherwise one
/// background thread reads the next shard while the current one is consumed.
pub fn iter_epoch(
    dir: &Path,
    batch_size: usize,
    epoch: u64,
    base_seed: u64,
    workers: usize,
) -> Result<EpochIter> {
    if batch_size == 0 {
        return Err(DatasetError::ZeroBatch);
    }
    let shards = list_shards(dir)?;
    let plan = plan_epoch(shards.len(), epoch, base_seed);
    let jobs: Vec<(PathBuf, u64)> = plan
        .shard_order
        .iter()
        .map(|&k| (shards[k].clone(), plan.sample_seeds[k]))
        .collect();
    let meter = Arc::new(ResidencyMeter::default());
    let source = if workers == 0 {
        Source::Inline {
            jobs: jobs.into_iter(),
        }
    } else {
        let (tx, rx) = sync_channel(0);
        let m = Arc::clone(&meter);
        let handle = std::thread::spawn(move || {
            for (path, seed) in jobs {
                let r = load_shuffled(&path, seed, &m);
                let failed = r.is_err();
                if let Err(std::sync::mpsc::SendError(Ok(_))) = tx.send(r) {
                    m.release();
                    return;
                }
                if failed {
                    return;
                }
            }
        });
        Source::Prefetch {
            rx,
            handle: Some(handle),
        }
    };
    Ok(EpochIter {
        source,
        current: Vec::new().into_iter(),
        holding: false,
        batch_size,
        meter,
        failed: false,
    })
}
