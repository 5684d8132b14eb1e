//! Pipeline stages shared by the CLI and the tests: data generation,
//! pretraining and fine-tuning, each seeded from one master seed.

use crate::adapters::{AdaptedPolicy, AdapterConfig};
use crate::envs::{generate_dataset, Dataset, EnvConfig};
use crate::error::Result;
use crate::numerics::rng::streams;
use crate::numerics::Rng;
use crate::policy::{pretrain, ChunkSpec, Normalizer, PolicyParams, PretrainConfig, PretrainLog};
use crate::remac::{remac_train, TrainConfig, TrainLog};

use super::io::{round_adapter_to_f32, round_to_f32};

pub fn generate(env: &EnvConfig, episodes: usize, spec: &ChunkSpec, master: u64) -> Result<Dataset> {
    generate_dataset(env, episodes, spec.horizon, master)
}

/// Pretrain a base policy. Weights are rounded to their stored precision so a
/// reloaded checkpoint behaves identically.
pub fn pretrain_base(
    dataset: &Dataset,
    spec: ChunkSpec,
    cfg: &PretrainConfig,
    master: u64,
) -> Result<(PolicyParams, PretrainLog)> {
    let norm = Normalizer::from_dataset(dataset)?;
    let init = PolicyParams::init(
        spec,
        dataset.header.obs_dim,
        &cfg.hidden,
        norm,
        &mut Rng::new(master, streams::INIT),
    )?;
    let (mut params, log) = pretrain(init, dataset, cfg, &Rng::new(master, streams::PRETRAIN))?;
    round_to_f32(&mut params);
    Ok((params, log))
}

pub struct FineTuned {
    /// Unmerged adapter, rounded to its stored precision.
    pub adapter: AdaptedPolicy,
    /// Base with the adapter folded in.
    pub merged: PolicyParams,
    pub log: TrainLog,
}

pub fn finetune(
    base: &PolicyParams,
    dataset: &Dataset,
    train: &TrainConfig,
    adapter: &AdapterConfig,
    master: u64,
) -> Result<FineTuned> {
    let (mut adapted, log) = remac_train(base, adapter, train, dataset, &Rng::new(master, streams::CURRICULUM))?;
    round_adapter_to_f32(&mut adapted);
    let merged = merge_copy(&adapted)?;
    Ok(FineTuned {
        adapter: adapted,
        merged,
        log,
    })
}

/// Merged parameters, leaving the adapter itself unmerged.
pub fn merge_copy(adapted: &AdaptedPolicy) -> Result<PolicyParams> {
    adapted.clone().merge()
}
