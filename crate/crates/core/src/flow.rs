//! Rectified-flow training.
//!
//! For a pair `(x₀, x₁)` and `t ~ U(0, 1)` the model sees
//! `x_t = (1−t)·x₀ + t·x₁` and regresses the constant velocity `x₁ − x₀`
//! under a mean squared error. Checkpoints use a small binary format
//! (`TCKP`) holding the config, every parameter tensor by name, and
//! optionally the Adam moments.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::{l2_distance, AnalysisError};
use crate::dataset::{heldout_pairs, iter_epoch, DatasetError};
use crate::image::{Image, ImageError};
use crate::maze::PairSample;
use crate::model::{
    forward_tape, init_params, pos_encoding_2d, stack_patches, ModelConfig, ModelError,
    ModelParams, ParamTree,
};
use crate::rng;
use crate::sampler::{euler_sample_batch, EulerOptions, SampleError};
use crate::tensor::{AdamConfig, AdamState, Scalar, Tape, Tensor, TensorError};

pub const CKPT_MAGIC: &[u8; 4] = b"TCKP";
pub const CKPT_VERSION: u16 = 1;
pub const LOSS_CSV: &str = "loss.csv";
pub const LATEST_CKPT: &str = "latest.tckp";

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("timestep {0} outside [0, 1]")]
    InvalidTimestep(f64),
    #[error("non-finite loss {loss} at step {step} (t = {ts:?})")]
    NonFiniteLoss { step: u64, loss: f64, ts: Vec<f64> },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: String, reason: String },
    #[error("checkpoint config {found:?} does not match expected {expected:?}")]
    ConfigMismatch {
        expected: Box<ModelConfig>,
        found: Box<ModelConfig>,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

pub type Result<T> = std::result::Result<T, FlowError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FlowError + '_ {
    move |source| FlowError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// `(1−t)·x₀ + t·x₁`, exact at both endpoints.
pub fn interpolate<T: Scalar>(x0: &Image<T>, x1: &Image<T>, t: f64) -> Result<Image<T>> {
    x0.check_same_shape(x1)?;
    if !(0.0..=1.0).contains(&t) {
        return Err(FlowError::InvalidTimestep(t));
    }
    let mut out = x0.clone();
    if t == 0.0 {
        return Ok(out);
    }
    if t == 1.0 {
        return Ok(x1.clone());
    }
    let (a, b) = (T::from_f64(1.0 - t), T::from_f64(t));
    for (o, &y) in out.data.iter_mut().zip(&x1.data) {
        *o = a * *o + b * y;
    }
    Ok(out)
}

/// `x₁ − x₀`.
pub fn velocity_target<T: Scalar>(x0: &Image<T>, x1: &Image<T>) -> Result<Image<T>> {
    x0.check_same_shape(x1)?;
    let mut out = x1.clone();
    for (o, &a) in out.data.iter_mut().zip(&x0.data) {
        *o = *o - a;
    }
    Ok(out)
}

/// Fraction of entries where `v = 0`.
pub fn zero_velocity_fraction<T: Scalar>(v: &Image<T>) -> f64 {
    v.data.iter().filter(|x| x.is_zero()).count() as f64 / v.data.len().max(1) as f64
}

/// Batch loss and, when requested, gradients for every trainable tensor in
/// canonical order.
pub fn flow_loss<T: Scalar>(
    params: &ModelParams<T>,
    x0s: &[Image<T>],
    x1s: &[Image<T>],
    ts: &[f64],
    with_grads: bool,
) -> Result<(f64, Option<Vec<Tensor<T>>>)> {
    let cfg = &params.config;
    let mut xts = Vec::with_capacity(ts.len());
    let mut vs = Vec::with_capacity(ts.len());
    for ((x0, x1), &t) in x0s.iter().zip(x1s).zip(ts) {
        xts.push(interpolate(x0, x1, t)?);
        vs.push(velocity_target(x0, x1)?);
    }
    let xt_refs: Vec<&Image<T>> = xts.iter().collect();
    let v_refs: Vec<&Image<T>> = vs.iter().collect();
    // MSE is invariant under the patch permutation, so compare in patch layout.
    let target = stack_patches(cfg, &v_refs)?;
    let patches = stack_patches(cfg, &xt_refs)?;

    let mut tape = Tape::new();
    let (vars, pred) = forward_tape(params, &mut tape, patches, ts, with_grads)?;
    let target = tape.constant(target);
    let loss_var = tape.mse_loss(pred, target)?;
    let loss = tape.value(loss_var).data()[0].as_f64();
    if !with_grads {
        return Ok((loss, None));
    }
    let mut grads = tape.backward(loss_var)?;
    let out = vars
        .flat()
        .into_iter()
        .zip(params.tree.flat())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    Ok((loss, Some(out)))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub ts: Vec<f64>,
}

/// One Adam update on a minibatch, drawing `t ~ U(0, 1)` per sample from `rng`.
pub fn train_step(
    batch: &[PairSample],
    params: &mut ModelParams<f32>,
    adam: &mut AdamState<f32>,
    rng: &mut rng::Rng,
) -> Result<StepStats> {
    let ts: Vec<f64> = batch.iter().map(|_| rng::unit_f64(rng)).collect();
    let x0s: Vec<Image<f32>> = batch.iter().map(|s| s.input.to_float()).collect();
    let x1s: Vec<Image<f32>> = batch.iter().map(|s| s.target.to_float()).collect();
    let (loss, grads) = flow_loss(params, &x0s, &x1s, &ts, true)?;
    let grads = grads.expect("gradients requested");
    if !loss.is_finite() || grads.iter().any(|g| !g.all_finite()) {
        return Err(FlowError::NonFiniteLoss {
            step: adam.step,
            loss,
            ts,
        });
    }
    let grad_refs: Vec<&Tensor<f32>> = grads.iter().collect();
    adam.update(&mut params.tree.flat_mut(), &grad_refs)?;
    Ok(StepStats { loss, ts })
}

/// Seeded generator for the timestep draws of global step `step`.
pub fn step_rng(seed: u64, step: u64) -> rng::Rng {
    rng::seeded(rng::derive_seed(rng::mix64(seed ^ 0x7469_6d65), step, 0))
}

/// Mean over pairs of the MSE between the `steps`-step Euler sample and the target.
pub fn heldout_l2<T: Scalar>(
    params: &ModelParams<T>,
    pairs: &[PairSample],
    steps: usize,
    chunk: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for group in pairs.chunks(chunk.max(1)) {
        let x0s: Vec<Image<T>> = group.iter().map(|s| s.input.to_float()).collect();
        let refs: Vec<&Image<T>> = x0s.iter().collect();
        let outs = euler_sample_batch(params, &refs, EulerOptions::new(steps))?;
        for (out, s) in outs.iter().zip(group) {
            total += l2_distance(&out.output, &s.target.to_float())?;
        }
    }
    Ok(total / pairs.len().max(1) as f64)
}

// ---------------------------------------------------------------------------
// Checkpoints

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub adam: Option<AdamState<f32>>,
    /// Completed epochs.
    pub epoch: u32,
    pub running_loss: f64,
}

fn config_fields(c: &ModelConfig) -> [usize; 8] {
    [
        c.resolution,
        c.patch_size,
        c.hidden_dim,
        c.blocks,
        c.heads,
        c.head_dim,
        c.mlp_dim,
        c.time_freq_dim,
    ]
}

fn put_f32s(out: &mut Vec<u8>, t: &Tensor<f32>) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let cfg = &ck.params.config;
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    for f in config_fields(cfg) {
        out.extend_from_slice(&(f as u32).to_le_bytes());
    }
    out.extend_from_slice(&ck.epoch.to_le_bytes());
    out.extend_from_slice(&ck.running_loss.to_le_bytes());

    let mut named: Vec<(String, &Tensor<f32>)> = vec![("pos_embed".into(), &ck.params.pos_embed)];
    named.extend(ck.params.named());
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        put_f32s(&mut out, t);
    }

    match &ck.adam {
        None => out.push(0),
        Some(a) => {
            out.push(1);
            out.extend_from_slice(&a.step.to_le_bytes());
            for v in [a.config.lr, a.config.beta1, a.config.beta2, a.config.eps] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            for t in a.m.iter().chain(&a.v) {
                put_f32s(&mut out, t);
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, reason: impl Into<String>) -> FlowError {
        FlowError::CorruptCheckpoint {
            path: self.path.to_string(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.corrupt(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32s(&mut self, shape: &[usize]) -> Result<Tensor<f32>> {
        let n: usize = shape.iter().product();
        let raw = self.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::new(shape.to_vec(), data)?)
    }
}

/// Parses a checkpoint. With `expected`, a different stored config is a
/// [`FlowError::ConfigMismatch`].
pub fn decode_checkpoint(
    bytes: &[u8],
    path: &str,
    expected: Option<&ModelConfig>,
) -> Result<Checkpoint> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    if r.take(4).ok() != Some(CKPT_MAGIC.as_slice()) {
        return Err(r.corrupt("bad magic"));
    }
    let version = r.u16()?;
    if version != CKPT_VERSION {
        return Err(r.corrupt(format!("version {version}, expected {CKPT_VERSION}")));
    }
    let mut f = [0usize; 8];
    for v in &mut f {
        *v = r.u32()? as usize;
    }
    let config = ModelConfig {
        resolution: f[0],
        patch_size: f[1],
        hidden_dim: f[2],
        blocks: f[3],
        heads: f[4],
        head_dim: f[5],
        mlp_dim: f[6],
        time_freq_dim: f[7],
    };
    if let Some(e) = expected {
        if *e != config {
            return Err(FlowError::ConfigMismatch {
                expected: Box::new(*e),
                found: Box::new(config),
            });
        }
    }
    config.validate().map_err(|e| r.corrupt(e.to_string()))?;
    let epoch = r.u32()?;
    let running_loss = r.f64()?;

    let mut layout = vec![(
        "pos_embed".to_string(),
        vec![config.tokens(), config.hidden_dim],
    )];
    layout.extend(config.layout());
    let count = r.u32()? as usize;
    if count != layout.len() {
        return Err(r.corrupt(format!("{count} tensors, expected {}", layout.len())));
    }
    let mut tensors = Vec::with_capacity(count);
    for (want_name, want_shape) in &layout {
        let len = r.u16()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| r.corrupt("tensor name is not UTF-8"))?;
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if &name != want_name || &shape != want_shape {
            return Err(r.corrupt(format!(
                "found {name} {shape:?}, expected {want_name} {want_shape:?}"
            )));
        }
        tensors.push(r.f32s(&shape)?);
    }
    let mut tensors = tensors.into_iter();
    let pos_embed = tensors.next().unwrap();
    if pos_embed != pos_encoding_2d(config.grid_side(), config.hidden_dim)? {
        return Err(r.corrupt("positional table differs from the fixed encoding"));
    }
    let tree = ParamTree::from_flat(&config, tensors.collect()).expect("layout checked");

    let adam = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let cfg = AdamConfig {
                lr: r.f64()?,
                beta1: r.f64()?,
                beta2: r.f64()?,
                eps: r.f64()?,
            };
            let shapes: Vec<Vec<usize>> = config.layout().into_iter().map(|(_, s)| s).collect();
            let m = shapes
                .iter()
                .map(|s| r.f32s(s))
                .collect::<Result<Vec<_>>>()?;
            let v = shapes
                .iter()
                .map(|s| r.f32s(s))
                .collect::<Result<Vec<_>>>()?;
            Some(AdamState {
                config: cfg,
                step,
                m,
                v,
            })
        }
        b => return Err(r.corrupt(format!("bad optimizer flag {b}"))),
    };
    if r.pos != bytes.len() {
        return Err(r.corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint {
        params: ModelParams {
            config,
            pos_embed,
            tree,
        },
        adam,
        epoch,
        running_loss,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(ck)).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_checkpoint(&bytes, &path.display().to_string(), expected)
}

// ---------------------------------------------------------------------------
// Loss log

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRow {
    pub epoch: u32,
    pub loss: f64,
    pub heldout_l2: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossLog {
    pub rows: Vec<LossRow>,
}

impl LossLog {
    pub fn push(&mut self, row: LossRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            if row.epoch <= last.epoch {
                return Err(FlowError::Config(format!(
                    "loss log epoch {} after {}",
                    row.epoch, last.epoch
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,heldout_l2\n");
        for r in &self.rows {
            let l2 = r.heldout_l2.map(|v| v.to_string()).unwrap_or_default();
            writeln!(s, "{},{},{}", r.epoch, r.loss, l2).unwrap();
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let bad = |line: &str| FlowError::Config(format!("bad loss log line {line:?}"));
        let mut log = Self::default();
        for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 3 {
                return Err(bad(line));
            }
            log.push(LossRow {
                epoch: f[0].parse().map_err(|_| bad(line))?,
                loss: f[1].parse().map_err(|_| bad(line))?,
                heldout_l2: if f[2].is_empty() {
                    None
                } else {
                    Some(f[2].parse().map_err(|_| bad(line))?)
                },
            })?;
        }
        Ok(log)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse_csv(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn checkpoint_l2(&self) -> Vec<(u32, f64)> {
        self.rows
            .iter()
            .filter_map(|r| r.heldout_l2.map(|l| (r.epoch, l)))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Training loop

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: u32,
    pub checkpoint_every: u32,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    /// Number of held-out pairs used for the L2 metric.
    pub heldout: usize,
    pub heldout_sizes: Vec<usize>,
    pub eval_steps: usize,
    pub workers: usize,
    pub resume: Option<PathBuf>,
}

impl TrainConfig {
    /// Full-size recipe: batch 256, lr 1e-4, checkpoints every 5 epochs.
    pub fn paper(data_dir: PathBuf, out_dir: PathBuf) -> Self {
        Self {
            model: ModelConfig::paper(),
            lr: 1e-4,
            batch_size: 256,
            epochs: 100,
            checkpoint_every: 5,
            seed: 0,
            data_dir,
            out_dir,
            heldout: 256,
            heldout_sizes: crate::maze::DATASET_SIZES.to_vec(),
            eval_steps: 10,
            workers: 1,
            resume: None,
        }
    }

    pub fn desk(data_dir: PathBuf, out_dir: PathBuf) -> Self {
        Self {
            model: ModelConfig::desk(),
            batch_size: 32,
            epochs: 10,
            checkpoint_every: 1,
            heldout_sizes: vec![11],
            ..Self::paper(data_dir, out_dir)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(FlowError::Config(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        if self.batch_size == 0 || self.checkpoint_every == 0 || self.eval_steps == 0 {
            return Err(FlowError::Config(
                "batch size, checkpoint interval and eval steps must be at least 1".into(),
            ));
        }
        if self.heldout > 0 && self.heldout_sizes.is_empty() {
            return Err(FlowError::Config("held-out sizes are empty".into()));
        }
        Ok(())
    }
}

pub fn checkpoint_name(epoch: u32) -> String {
    format!("ckpt_epoch_{epoch:03}.tckp")
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: LossLog,
    pub checkpoints: Vec<PathBuf>,
    pub params: ModelParams<f32>,
}

pub fn train(config: &TrainConfig) -> Result<TrainReport> {
    train_with(config, |_| {})
}

/// Runs the epoch loop, calling `on_epoch` after each epoch's log row.
pub fn train_with(config: &TrainConfig, mut on_epoch: impl FnMut(&LossRow)) -> Result<TrainReport> {
    config.validate()?;
    let out = &config.out_dir;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let log_path = out.join(LOSS_CSV);

    let (mut params, mut adam, start, mut log) = match &config.resume {
        Some(path) => {
            let ck = load_checkpoint(path, Some(&config.model))?;
            let adam = ck.adam.unwrap_or_else(|| {
                AdamState::new(AdamConfig::with_lr(config.lr), ck.params.tree.flat())
            });
            let mut log = if log_path.exists() {
                LossLog::read(&log_path)?
            } else {
                LossLog::default()
            };
            log.rows.retain(|r| r.epoch <= ck.epoch);
            (ck.params, adam, ck.epoch, log)
        }
        None => {
            let params = init_params::<f32>(&config.model, config.seed)?;
            let adam = AdamState::new(AdamConfig::with_lr(config.lr), params.tree.flat());
            (params, adam, 0, LossLog::default())
        }
    };
    adam.config.lr = config.lr;

    let heldout = heldout_pairs(
        config.seed,
        config.heldout,
        &config.heldout_sizes,
        config.model.resolution,
    )?;
    let mut checkpoints = Vec::new();

    for epoch in start..config.epochs {
        let (mut sum, mut n) = (0.0, 0usize);
        for batch in iter_epoch(
            &config.data_dir,
            config.batch_size,
            epoch as u64,
            config.seed,
            config.workers,
        )? {
            let batch = batch?;
            let mut r = step_rng(config.seed, adam.step);
            let stats = train_step(&batch, &mut params, &mut adam, &mut r)?;
            sum += stats.loss * batch.len() as f64;
            n += batch.len();
        }
        let done = epoch + 1;
        let mean = sum / n.max(1) as f64;
        let checkpoint = done % config.checkpoint_every == 0 || done == config.epochs;
        let heldout_l2 = if checkpoint && !heldout.is_empty() {
            Some(heldout_l2(
                &params,
                &heldout,
                config.eval_steps,
                config.batch_size,
            )?)
        } else {
            None
        };
        if checkpoint {
            let ck = Checkpoint {
                params: params.clone(),
                adam: Some(adam.clone()),
                epoch: done,
                running_loss: mean,
            };
            let path = out.join(checkpoint_name(done));
            save_checkpoint(&ck, &path)?;
            fs::copy(&path, out.join(LATEST_CKPT)).map_err(io_err(&path))?;
            checkpoints.push(path);
        }
        let row = LossRow {
            epoch: done,
            loss: mean,
            heldout_l2,
        };
        log.push(row)?;
        log.write(&log_path)?;
        log::info!(
            "epoch {done}: loss {mean:.6e}{}",
            heldout_l2
                .map(|l| format!(", held-out L2 {l:.6e}"))
                .unwrap_or_default()
        );
        on_epoch(&row);
    }
    Ok(TrainReport {
        log,
        checkpoints,
        params,
    })
}
