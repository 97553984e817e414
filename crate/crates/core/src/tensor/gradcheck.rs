use super::{Result, Tensor, TensorError};
use crate::rng;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Number of randomly chosen parameter entries to probe.
    pub probes: usize,
    /// Central-difference step.
    pub h: f64,
    /// Denominator floor for the relative error, so entries whose true
    /// gradient is ~0 are judged on absolute error instead.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            probes: 20,
            h: 1e-4,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Probe {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
    pub max_rel_error: f64,
}

/// Compares `analytic` gradients against central differences of `forward`,
/// evaluated in `f64`, on randomly probed entries of `params`.
///
/// The tensor is drawn uniformly first and then an entry within it, so small
/// tensors such as biases are probed as often as large weight matrices.
/// Fails if two evaluations at the unperturbed point disagree.
pub fn finite_diff_check<F>(
    mut forward: F,
    params: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    config: GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    if params.len() != analytic.len()
        || params
            .iter()
            .zip(analytic)
            .any(|(p, g)| p.shape() != g.shape())
    {
        return Err(TensorError::InvalidArgument {
            op: "finite_diff_check",
            reason: "analytic gradients do not match parameter shapes".into(),
        });
    }
    let candidates: Vec<usize> = (0..params.len())
        .filter(|&i| !params[i].is_empty())
        .collect();
    if candidates.is_empty() {
        return Err(TensorError::InvalidArgument {
            op: "finite_diff_check",
            reason: "no parameters to probe".into(),
        });
    }

    let mut work = params.to_vec();
    let first = forward(&work);
    let second = forward(&work);
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NonDeterministic { first, second });
    }

    let mut rng = rng::seeded(config.seed);
    let mut probes = Vec::with_capacity(config.probes);
    for _ in 0..config.probes {
        let tensor = candidates[rng::bounded_index(&mut rng, candidates.len())];
        let index = rng::bounded_index(&mut rng, work[tensor].len());
        let orig = work[tensor].data()[index];

        work[tensor].data_mut()[index] = orig + config.h;
        let plus = forward(&work);
        work[tensor].data_mut()[index] = orig - config.h;
        let minus = forward(&work);
        work[tensor].data_mut()[index] = orig;

        let numeric = (plus - minus) / (2.0 * config.h);
        let analytic = analytic[tensor].data()[index];
        let denom = analytic.abs().max(numeric.abs()).max(config.abs_floor);
        probes.push(Probe {
            tensor,
            index,
            analytic,
            numeric,
            rel_error: (analytic - numeric).abs() / denom,
        });
    }
    let max_rel_error = probes.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        probes,
        max_rel_error,
    })
}
