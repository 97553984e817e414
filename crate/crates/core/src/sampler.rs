//! Deterministic Euler integration of a velocity field.
//!
//! `x ← x + f(x, i/N)/N` for `i = 0..N`, then clip to `[0, 1]`. Only the
//! final output is clipped; intermediate trajectory states keep the raw
//! running value.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::image::{Image, ImageError};
use crate::model::{model_forward_batch, ModelError, ModelParams};
use crate::tensor::Scalar;

#[derive(Debug, Error)]
pub enum SampleError {
    #[error("step count must be at least 1")]
    ZeroSteps,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, SampleError>;

/// Anything that maps a batch of states and timesteps to velocities.
pub trait VelocityField<T: Scalar> {
    fn velocity_batch(&self, xs: &[&Image<T>], ts: &[f64]) -> Result<Vec<Image<T>>>;
}

impl<T: Scalar> VelocityField<T> for ModelParams<T> {
    fn velocity_batch(&self, xs: &[&Image<T>], ts: &[f64]) -> Result<Vec<Image<T>>> {
        Ok(model_forward_batch(self, xs, ts)?)
    }
}

/// Adapts a per-sample closure `f(x, t)` into a [`VelocityField`].
pub struct FnField<F>(pub F);

impl<T: Scalar, F: Fn(&Image<T>, f64) -> Image<T>> VelocityField<T> for FnField<F> {
    fn velocity_batch(&self, xs: &[&Image<T>], ts: &[f64]) -> Result<Vec<Image<T>>> {
        Ok(xs.iter().zip(ts).map(|(x, &t)| (self.0)(x, t)).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EulerOptions {
    pub steps: usize,
    pub record: bool,
    /// Clip after every step instead of only at the end.
    pub clip_each_step: bool,
}

impl EulerOptions {
    pub fn new(steps: usize) -> Self {
        Self {
            steps,
            record: false,
            clip_each_step: false,
        }
    }

    pub fn recording(mut self) -> Self {
        self.record = true;
        self
    }
}

impl Default for EulerOptions {
    fn default() -> Self {
        Self::new(10)
    }
}

/// States at `t = i/N`, `i = 0..=N`. The first is the input, the last the
/// clipped output; the ones in between are unclipped.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T> {
    pub steps: usize,
    pub states: Vec<(f64, Image<T>)>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn last(&self) -> Option<&Image<T>> {
        self.states.last().map(|(_, x)| x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput<T> {
    /// Clipped result `x̂₁`.
    pub output: Image<T>,
    /// Running state after the last step, before the final clip.
    pub unclipped: Image<T>,
    pub trajectory: Option<Trajectory<T>>,
}

/// `t_i = i/N` evaluated in `f64`.
pub fn time_grid(steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| i as f64 / steps as f64).collect()
}

/// Integrates several samples in lock step, one batched field call per step.
pub fn euler_sample_batch<T: Scalar, F: VelocityField<T> + ?Sized>(
    field: &F,
    x0s: &[&Image<T>],
    opts: EulerOptions,
) -> Result<Vec<SampleOutput<T>>> {
    if opts.steps == 0 {
        return Err(SampleError::ZeroSteps);
    }
    let n = opts.steps;
    let dt = T::from_f64(1.0 / n as f64);
    let grid = time_grid(n);
    let mut xs: Vec<Image<T>> = x0s.iter().map(|x| (*x).clone()).collect();
    let mut trajs: Vec<Vec<(f64, Image<T>)>> = if opts.record {
        xs.iter().map(|x| vec![(0.0, x.clone())]).collect()
    } else {
        Vec::new()
    };

    for &t in &grid[..n] {
        let refs: Vec<&Image<T>> = xs.iter().collect();
        let vs = field.velocity_batch(&refs, &vec![t; xs.len()])?;
        for (x, v) in xs.iter_mut().zip(&vs) {
            x.check_same_shape(v)?;
            for (a, &b) in x.data.iter_mut().zip(&v.data) {
                *a = *a + b * dt;
            }
            if opts.clip_each_step {
                *x = x.clamp01();
            }
        }
        if opts.record {
            for (tr, x) in trajs.iter_mut().zip(&xs) {
                tr.push((0.0, x.clone()));
            }
        }
    }

    let mut out = Vec::with_capacity(xs.len());
    let mut trajs = trajs.into_iter();
    for x in xs {
        let clipped = x.clamp01();
        let trajectory = trajs.next().map(|mut states| {
            for (i, s) in states.iter_mut().enumerate() {
                s.0 = grid[i];
            }
            states[n].1 = clipped.clone();
            Trajectory { steps: n, states }
        });
        out.push(SampleOutput {
            output: clipped,
            unclipped: x,
            trajectory,
        });
    }
    Ok(out)
}

pub fn euler_sample<T: Scalar, F: VelocityField<T> + ?Sized>(
    field: &F,
    x0: &Image<T>,
    opts: EulerOptions,
) -> Result<SampleOutput<T>> {
    Ok(euler_sample_batch(field, &[x0], opts)?.remove(0))
}

/// Writes `step_%03d.ppm` per state (clamped for display) and
/// `trajectory.csv` with `step,t` rows.
pub fn export_trajectory<T: Scalar>(traj: &Trajectory<T>, dir: &Path) -> Result<()> {
    let io = |e| SampleError::Io {
        path: dir.display().to_string(),
        source: e,
    };
    fs::create_dir_all(dir).map_err(io)?;
    let mut csv = String::from("step,t\n");
    for (i, (t, state)) in traj.states.iter().enumerate() {
        state
            .to_u8()
            .write_ppm(dir.join(format!("step_{i:03}.ppm")))?;
        writeln!(csv, "{i},{t}").unwrap();
    }
    fs::write(dir.join("trajectory.csv"), csv).map_err(io)?;
    Ok(())
}
