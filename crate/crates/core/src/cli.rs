//! Command-line front end.
//!
//! Every command writes a `run.json` next to its outputs recording the
//! command name, the crate version, the effective seed and every parsed
//! argument. Failures print `error: <category>: <message>` and exit 1;
//! usage errors exit 2.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::analysis::{self, AnalysisError, Thresholds};
use crate::dataset::{self, DatasetError, GenerateConfig};
use crate::flow::{self, FlowError, TrainConfig};
use crate::image::{tile_grid, ImageError, ImageU8};
use crate::maze::{generate_maze, solve_maze, MazeError, PairSample};
use crate::model::{ModelConfig, ModelError, ModelParams};
use crate::sampler::{self, EulerOptions, SampleError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Desk,
}

impl Preset {
    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Paper => ModelConfig::paper(),
            Preset::Desk => ModelConfig::desk(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "tacit", version, about = "Maze reasoning with rectified flow")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write maze/solution pairs to `batch_%05d.tacd` shards.
    Generate(GenerateArgs),
    /// Train the velocity model on a shard directory.
    Train(TrainArgs),
    /// Integrate one input image with a trained checkpoint.
    Sample(SampleArgs),
    /// Trajectory analyses on held-out pairs.
    Analyze {
        #[command(subcommand)]
        what: AnalyzeCommand,
    },
    /// Evaluation metrics.
    Eval {
        #[command(subcommand)]
        what: EvalCommand,
    },
    /// Image summaries.
    Plot {
        #[command(subcommand)]
        what: PlotCommand,
    },
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Recall curves and transition points.
    Emergence(AnalyzeArgs),
    /// Onsets of the start, middle and end thirds of each path.
    Segments(AnalyzeArgs),
    /// IoU and PSNR against the number of Euler steps.
    Sweep(SweepArgs),
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Mean squared distance between sampled and true solutions.
    L2(EvalL2Args),
}

#[derive(Debug, Subcommand)]
pub enum PlotCommand {
    /// Tile the frames of a recorded trajectory into one image.
    Grid(GridArgs),
}

fn sizes_parser(s: &str) -> Result<usize, String> {
    s.parse::<usize>().map_err(|e| e.to_string())
}

#[derive(Debug, Args, Serialize)]
pub struct GenerateArgs {
    #[arg(long)]
    pub count: usize,
    /// Maze sizes, cycled over the pairs.
    #[arg(long, value_delimiter = ',', default_value = "11,15,21,25,31", value_parser = sizes_parser)]
    pub sizes: Vec<usize>,
    #[arg(long, env = "TACIT_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "paper")]
    pub preset: Preset,
    /// Image side; defaults to the preset's model resolution.
    #[arg(long)]
    pub resolution: Option<usize>,
    #[arg(long, default_value_t = 10_000)]
    pub shard_size: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "paper")]
    pub preset: Preset,
    #[arg(long)]
    pub epochs: Option<u32>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub checkpoint_every: Option<u32>,
    #[arg(long, env = "TACIT_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub heldout: Option<usize>,
    #[arg(long, value_delimiter = ',', value_parser = sizes_parser)]
    pub heldout_sizes: Option<Vec<usize>>,
    #[arg(long)]
    pub eval_steps: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    /// Directory for `step_%03d.ppm` frames and `trajectory.csv`.
    #[arg(long)]
    pub record: Option<PathBuf>,
    /// Where to write the clipped result.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub clip_each_step: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct HeldoutArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Number of held-out pairs.
    #[arg(long, default_value_t = 20)]
    pub n: usize,
    #[arg(long, value_delimiter = ',', default_value = "11", value_parser = sizes_parser)]
    pub sizes: Vec<usize>,
    #[arg(long, env = "TACIT_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 32)]
    pub chunk: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct AnalyzeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub heldout: HeldoutArgs,
    #[arg(long, default_value_t = 50)]
    pub steps: usize,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    pub onset: f64,
    #[arg(long, default_value_t = 0.95)]
    pub completion: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub heldout: HeldoutArgs,
    #[arg(long, value_delimiter = ',', default_value = "5,10,20,50,100", value_parser = sizes_parser)]
    pub steps_list: Vec<usize>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalL2Args {
    #[command(flatten)]
    #[serde(flatten)]
    pub heldout: HeldoutArgs,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct GridArgs {
    /// Directory holding `step_%03d.ppm` frames.
    #[arg(long)]
    pub traj: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 11)]
    pub cols: usize,
}

/// A failure with a stable one-word category.
#[derive(Debug)]
pub struct CliError {
    pub category: &'static str,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "error: {}: {}", self.category, self.message)
    }
}

impl CliError {
    fn new(category: &'static str, message: impl ToString) -> Self {
        Self {
            category,
            message: message.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::new("io", e)
    }
}

impl From<MazeError> for CliError {
    fn from(e: MazeError) -> Self {
        Self::new("maze", e)
    }
}

impl From<ImageError> for CliError {
    fn from(e: ImageError) -> Self {
        Self::new("image", e)
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        Self::new("model", e)
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Io { .. } => Self::new("io", e),
            DatasetError::Maze(_) => Self::new("maze", e),
            _ => Self::new("data", e),
        }
    }
}

impl From<SampleError> for CliError {
    fn from(e: SampleError) -> Self {
        match e {
            SampleError::Model(m) => m.into(),
            SampleError::Io { .. } => Self::new("io", e),
            _ => Self::new("sample", e),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Sample(s) => s.into(),
            AnalysisError::Io { .. } => Self::new("io", e),
            _ => Self::new("analysis", e),
        }
    }
}

impl From<FlowError> for CliError {
    fn from(e: FlowError) -> Self {
        match e {
            FlowError::CorruptCheckpoint { .. } | FlowError::ConfigMismatch { .. } => {
                Self::new("checkpoint", e)
            }
            FlowError::NonFiniteLoss { .. } => Self::new("numeric", e),
            FlowError::Config(_) => Self::new("config", e),
            FlowError::Io { .. } => Self::new("io", e),
            FlowError::Dataset(d) => d.into(),
            FlowError::Model(m) => m.into(),
            FlowError::Sample(s) => s.into(),
            FlowError::Analysis(a) => a.into(),
            _ => Self::new("train", e),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Serialize)]
struct RunRecord<'a, A: Serialize> {
    command: &'a str,
    version: &'a str,
    seed: Option<u64>,
    args: &'a A,
}

fn write_run_json<A: Serialize>(
    dir: &Path,
    command: &str,
    seed: Option<u64>,
    args: &A,
) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    let rec = RunRecord {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed,
        args,
    };
    let mut text = serde_json::to_string_pretty(&rec).map_err(|e| CliError::new("io", e))?;
    text.push('\n');
    fs::write(dir.join("run.json"), text)?;
    Ok(())
}

fn load_model(path: &Path) -> CliResult<ModelParams<f32>> {
    Ok(flow::load_checkpoint(path, None)?.params)
}

fn heldout(args: &HeldoutArgs, resolution: usize) -> CliResult<Vec<PairSample>> {
    if args.sizes.is_empty() {
        return Err(CliError::new("usage", "--sizes is empty"));
    }
    Ok(dataset::heldout_pairs(
        args.seed,
        args.n,
        &args.sizes,
        resolution,
    )?)
}

fn cmd_generate(a: &GenerateArgs) -> CliResult<()> {
    let cfg = GenerateConfig {
        count: a.count,
        sizes: a.sizes.clone(),
        seed: a.seed,
        resolution: a.resolution.unwrap_or(a.preset.model().resolution),
        shard_size: a.shard_size,
    };
    let summary = dataset::generate_dataset(&cfg, &a.out)?;
    write_run_json(&a.out, "generate", Some(a.seed), a)?;
    println!(
        "wrote {} pairs to {} shard(s) in {}",
        summary.count,
        summary.shards.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: &TrainArgs) -> CliResult<()> {
    let mut cfg = match a.preset {
        Preset::Paper => TrainConfig::paper(a.data.clone(), a.out.clone()),
        Preset::Desk => TrainConfig::desk(a.data.clone(), a.out.clone()),
    };
    cfg.seed = a.seed;
    cfg.workers = a.workers;
    cfg.resume = a.resume.clone();
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    if let Some(v) = a.heldout {
        cfg.heldout = v;
    }
    if let Some(v) = &a.heldout_sizes {
        cfg.heldout_sizes = v.clone();
    }
    if let Some(v) = a.eval_steps {
        cfg.eval_steps = v;
    }
    write_run_json(&a.out, "train", Some(a.seed), a)?;
    let report = flow::train_with(&cfg, |row| {
        let l2 = row
            .heldout_l2
            .map(|v| format!(" heldout_l2={v:.6e}"))
            .unwrap_or_default();
        println!("epoch={} loss={:.6e}{l2}", row.epoch, row.loss);
    })?;
    println!(
        "{} checkpoint(s) in {}",
        report.checkpoints.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_sample(a: &SampleArgs) -> CliResult<()> {
    let params = load_model(&a.ckpt)?;
    let x0 = ImageU8::read_ppm(&a.input)?.to_float::<f32>();
    let opts = EulerOptions {
        steps: a.steps,
        record: a.record.is_some(),
        clip_each_step: a.clip_each_step,
    };
    let out = sampler::euler_sample(&params, &x0, opts)?;
    if let (Some(dir), Some(tr)) = (&a.record, &out.trajectory) {
        sampler::export_trajectory(tr, dir)?;
        write_run_json(dir, "sample", None, a)?;
    }
    if let Some(path) = &a.output {
        out.output.to_u8().write_ppm(path)?;
        if a.record.is_none() {
            let dir = path
                .parent()
                .filter(|p| !p.as_os_str().is_empty())
                .unwrap_or(Path::new("."));
            write_run_json(dir, "sample", None, a)?;
        }
    }
    Ok(())
}

fn record_trajectories(
    params: &ModelParams<f32>,
    pairs: &[PairSample],
    steps: usize,
    chunk: usize,
) -> CliResult<Vec<sampler::Trajectory<f32>>> {
    let mut out = Vec::with_capacity(pairs.len());
    for group in pairs.chunks(chunk.max(1)) {
        let x0s: Vec<_> = group.iter().map(|s| s.input.to_float::<f32>()).collect();
        let refs: Vec<_> = x0s.iter().collect();
        for s in sampler::euler_sample_batch(params, &refs, EulerOptions::new(steps).recording())? {
            out.push(s.trajectory.expect("recording enabled"));
        }
    }
    Ok(out)
}

fn cmd_emergence(a: &AnalyzeArgs) -> CliResult<()> {
    let params = load_model(&a.heldout.ckpt)?;
    let pairs = heldout(&a.heldout, params.config.resolution)?;
    let trajs = record_trajectories(&params, &pairs, a.steps, a.heldout.chunk)?;
    let th = Thresholds {
        onset: a.onset,
        completion: a.completion,
    };
    let mut curves = Vec::new();
    let mut reports = Vec::new();
    for (i, (tr, pair)) in trajs.iter().zip(&pairs).enumerate() {
        let gt = analysis::red_mask_u8(&pair.target);
        let (curve, report) = analysis::analyze_trajectory(i, tr, &gt, th)?;
        curves.push((i, curve));
        reports.push(report);
    }
    fs::create_dir_all(&a.out)?;
    analysis::write_emergence_csv(&a.out.join("emergence.csv"), &curves)?;
    analysis::write_transition_csv(&a.out.join("transition.csv"), &reports)?;
    for (i, tr) in trajs.iter().take(4).enumerate() {
        let cols = a.steps.min(10) + 1;
        analysis::trajectory_grid(tr, cols).write_ppm(a.out.join(format!("grid_{i:03}.ppm")))?;
    }
    write_run_json(&a.out, "analyze emergence", Some(a.heldout.seed), a)?;
    let s = analysis::summarize_transitions(&reports);
    let fmt = |m: Option<analysis::MeanStd>| {
        m.map_or("n/a".to_string(), |m| {
            format!("{:.3} ± {:.3}", m.mean, m.std)
        })
    };
    println!("onset t*      {}", fmt(s.onset));
    println!("width         {}", fmt(s.width));
    println!("recall@onset  {}", fmt(s.recall_at_onset));
    println!("final recall  {}", fmt(s.final_recall));
    println!("final IoU     {}", fmt(s.final_iou));
    println!("never emerged {}/{}", s.never_emerged, reports.len());
    Ok(())
}

fn cmd_segments(a: &AnalyzeArgs) -> CliResult<()> {
    let params = load_model(&a.heldout.ckpt)?;
    let res = params.config.resolution;
    let pairs = heldout(&a.heldout, res)?;
    let trajs = record_trajectories(&params, &pairs, a.steps, a.heldout.chunk)?;
    let mut reports = Vec::new();
    for (i, (tr, pair)) in trajs.iter().zip(&pairs).enumerate() {
        let size = pair.size as usize;
        let path = solve_maze(&generate_maze(size, pair.seed)?)?;
        reports.push(analysis::segment_onsets(i, tr, &path, size, res)?);
    }
    fs::create_dir_all(&a.out)?;
    analysis::write_segments_csv(&a.out.join("segments.csv"), &reports)?;
    write_run_json(&a.out, "analyze segments", Some(a.heldout.seed), a)?;
    println!(
        "simultaneous {}/{} ({:.1}%)",
        reports.iter().filter(|r| r.simultaneous).count(),
        reports.len(),
        100.0 * analysis::fraction_simultaneous(&reports)
    );
    Ok(())
}

fn cmd_sweep(a: &SweepArgs) -> CliResult<()> {
    let params = load_model(&a.heldout.ckpt)?;
    let pairs = heldout(&a.heldout, params.config.resolution)?;
    let rows = analysis::steps_sweep(&params, &pairs, &a.steps_list, a.heldout.chunk)?;
    fs::create_dir_all(&a.out)?;
    analysis::write_sweep_csv(&a.out.join("sweep.csv"), &rows)?;
    write_run_json(&a.out, "analyze sweep", Some(a.heldout.seed), a)?;
    for r in &rows {
        println!("N={:<4} iou={:.4} psnr={:.2}", r.steps, r.iou, r.psnr);
    }
    Ok(())
}

fn cmd_eval_l2(a: &EvalL2Args) -> CliResult<()> {
    let params = load_model(&a.heldout.ckpt)?;
    let pairs = heldout(&a.heldout, params.config.resolution)?;
    let l2 = flow::heldout_l2(&params, &pairs, a.steps, a.heldout.chunk)?;
    fs::create_dir_all(&a.out)?;
    fs::write(
        a.out.join("l2.csv"),
        format!("n,steps,l2\n{},{},{}\n", pairs.len(), a.steps, l2),
    )?;
    write_run_json(&a.out, "eval l2", Some(a.heldout.seed), a)?;
    println!("l2={l2:.6e}");
    Ok(())
}

fn cmd_grid(a: &GridArgs) -> CliResult<()> {
    let mut frames: Vec<PathBuf> = fs::read_dir(&a.traj)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("step_") && n.ends_with(".ppm"))
        })
        .collect();
    frames.sort();
    if frames.is_empty() {
        return Err(CliError::new(
            "data",
            format!("{}: no step_*.ppm frames", a.traj.display()),
        ));
    }
    let cells = frames
        .iter()
        .map(ImageU8::read_ppm)
        .collect::<Result<Vec<_>, _>>()?;
    tile_grid(&cells, a.cols.max(1), 1).write_ppm(&a.out)?;
    let dir = a
        .out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    write_run_json(dir, "plot grid", None, a)?;
    Ok(())
}

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Analyze { what } => match what {
            AnalyzeCommand::Emergence(a) => cmd_emergence(a),
            AnalyzeCommand::Segments(a) => cmd_segments(a),
            AnalyzeCommand::Sweep(a) => cmd_sweep(a),
        },
        Command::Eval { what } => match what {
            EvalCommand::L2(a) => cmd_eval_l2(a),
        },
        Command::Plot { what } => match what {
            PlotCommand::Grid(a) => cmd_grid(a),
        },
    }
}

/// Parses `argv` (including the program name), runs the command and
/// returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_subcommand_is_a_usage_error() {
        assert_eq!(dispatch(["tacit", "frobnicate"]), 2);
        assert_eq!(dispatch(["tacit", "generate", "--bogus"]), 2);
    }

    #[test]
    fn help_exits_zero() {
        assert_eq!(dispatch(["tacit", "--help"]), 0);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
