//! Prefix-preserved chunk sampling and prior-chunk construction.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numerics::{Matrix, Rng};
use crate::policy::{integrate, ActionChunk, ChunkRole, VelocityField};
use crate::remac::{prefix_mask, PrefixMask};

/// Start state for the next chunk: the unexecuted tail of the previous
/// chunk, shifted to the front, followed by zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorChunk {
    pub chunk: ActionChunk,
    /// Rows copied from the previous chunk (`P − h`).
    pub valid_rows: usize,
    pub source: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FreezeLength {
    /// Freeze the first `d̂` rows.
    Delay,
    /// Freeze the whole overlap with the previous chunk, `P − h` rows.
    Overlap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FirstChunkInit {
    Zeros,
    Gaussian,
}

/// Value of the prior rows that have no previous action to inherit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorFill {
    /// Raw zero actions.
    Zero,
    /// Zero in the policy's normalized action space (the dataset action mean).
    NormalizedZero,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub freeze: FreezeLength,
    pub first_chunk: FirstChunkInit,
    pub prior_fill: PriorFill,
    pub integration_steps: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            freeze: FreezeLength::Delay,
            first_chunk: FirstChunkInit::Gaussian,
            prior_fill: PriorFill::NormalizedZero,
            integration_steps: 10,
        }
    }
}

impl SamplerConfig {
    /// Prior chunk for the next request under this configuration.
    pub fn prior<V: VelocityField + ?Sized>(
        &self,
        field: &V,
        prev: &ActionChunk,
        exec_horizon: usize,
        source: usize,
    ) -> Result<PriorChunk> {
        let horizon = field.chunk_spec().horizon;
        match self.prior_fill {
            PriorFill::Zero => build_prior(prev, exec_horizon, horizon, source),
            PriorFill::NormalizedZero => {
                build_prior_filled(prev, exec_horizon, horizon, source, &field.normalizer().act_mean)
            }
        }
    }

    /// Number of frozen rows for a delay estimate and execution horizon.
    pub fn frozen_rows(&self, delay_estimate: usize, exec_horizon: usize, horizon: usize) -> usize {
        let rows = match self.freeze {
            FreezeLength::Delay => delay_estimate,
            FreezeLength::Overlap => horizon.saturating_sub(exec_horizon),
        };
        rows.min(horizon - 1)
    }
}

pub fn build_prior(prev: &ActionChunk, exec_horizon: usize, horizon: usize, source: usize) -> Result<PriorChunk> {
    let zeros = vec![0.0; prev.values.cols()];
    build_prior_filled(prev, exec_horizon, horizon, source, &zeros)
}

/// `build_prior` with the rows past the overlap set to `fill` instead of zero.
pub fn build_prior_filled(
    prev: &ActionChunk,
    exec_horizon: usize,
    horizon: usize,
    source: usize,
    fill: &[f64],
) -> Result<PriorChunk> {
    if !(1..=horizon).contains(&exec_horizon) {
        return Err(Error::Horizon(format!("h={exec_horizon} outside 1..={horizon}")));
    }
    check_dim("previous chunk rows", horizon, prev.values.rows())?;
    let cols = prev.values.cols();
    check_dim("fill row", cols, fill.len())?;
    let valid = horizon - exec_horizon;
    let mut values = Matrix::zeros(horizon, cols);
    for k in 0..horizon {
        let row = if k < valid {
            prev.values.row(k + exec_horizon)
        } else {
            fill
        };
        values.row_mut(k).copy_from_slice(row);
    }
    Ok(PriorChunk {
        chunk: ActionChunk {
            role: ChunkRole::Prior,
            values,
        },
        valid_rows: valid,
        source,
    })
}

/// Euler integration from the prior in which rows outside the mask are held
/// at their prior values; only masked-in rows receive velocity updates.
pub fn prefix_preserved_integrate<V: VelocityField + ?Sized>(
    field: &V,
    obs: &[f64],
    prior: &PriorChunk,
    mask: &PrefixMask,
    n: usize,
) -> Result<ActionChunk> {
    guided_integrate(field, obs, prior, mask, Some(mask), n, |_, _, _| {})
}

/// Shared loop for prefix-frozen sampling. `velocity_mask` is what the
/// network sees; `hook(step, state, prior)` runs after each Euler update.
pub(crate) fn guided_integrate<V, F>(
    field: &V,
    obs: &[f64],
    prior: &PriorChunk,
    freeze: &PrefixMask,
    velocity_mask: Option<&PrefixMask>,
    n: usize,
    mut hook: F,
) -> Result<ActionChunk>
where
    V: VelocityField + ?Sized,
    F: FnMut(usize, &mut Matrix, &Matrix),
{
    if n == 0 {
        return Err(Error::InvalidArgument("integration steps must be >= 1".into()));
    }
    let spec = field.chunk_spec();
    check_dim("mask length", prior.chunk.values.rows(), freeze.len())?;
    check_dim("prior rows", spec.horizon, prior.chunk.values.rows())?;
    let dt = 1.0 / n as f64;
    let mut state = ActionChunk {
        role: ChunkRole::Intermediate,
        values: prior.chunk.values.clone(),
    };
    for step in 0..n {
        let tau = step as f64 * dt;
        let v = field.velocity(&state, obs, tau, velocity_mask)?;
        for k in 0..spec.horizon {
            if !freeze.is_active(k) {
                continue;
            }
            for (a, dv) in state.values.row_mut(k).iter_mut().zip(v.values.row(k)) {
                *a += dt * dv;
            }
        }
        hook(step, &mut state.values, &prior.chunk.values);
    }
    if !state.values.is_finite() {
        return Err(Error::NonFinite("sampled chunk".into()));
    }
    state.role = ChunkRole::PretrainedSample;
    Ok(state)
}

/// The chunk issued before anything has been executed: plain integration
/// from zeros or Gaussian noise, with the unmasked conditioning.
pub fn first_chunk<V: VelocityField + ?Sized>(
    field: &V,
    obs: &[f64],
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<ActionChunk> {
    let spec = field.chunk_spec();
    let start = match cfg.first_chunk {
        FirstChunkInit::Zeros => {
            let empty = ActionChunk::zeros(spec, ChunkRole::Prior);
            ActionChunk {
                role: ChunkRole::Prior,
                values: cfg.prior(field, &empty, spec.horizon, 0)?.chunk.values,
            }
        }
        FirstChunkInit::Gaussian => gaussian_start(field, rng),
    };
    let mask = prefix_mask(0, spec.horizon)?;
    integrate(field, obs, &start, cfg.integration_steps, Some(&mask))
}

/// Gaussian start state in raw action units.
pub fn gaussian_start<V: VelocityField + ?Sized>(field: &V, rng: &mut Rng) -> ActionChunk {
    let spec = field.chunk_spec();
    let z: Vec<f64> = (0..spec.chunk_len()).map(|_| rng.normal()).collect();
    ActionChunk {
        role: ChunkRole::Prior,
        values: field.normalizer().denorm_chunk(&z, spec.horizon),
    }
}
