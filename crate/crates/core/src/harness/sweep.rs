//! Delay/horizon sweeps, the kinematics comparison and the ablation matrix.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{AblationAxis, ExperimentConfig, KinematicsConfig};
use super::metrics::{
    average_over_horizons, episode_stats, kinematic_trace, summarize, EpisodeStats, KinematicTrace, MetricsSummary,
};
use super::pipeline::finetune;
use crate::adapters::AdapterConfig;
use crate::envs::{Dataset, EnvConfig};
use crate::error::{Error, Result};
use crate::numerics::rng::streams;
use crate::numerics::Rng;
use crate::policy::{ChunkSpec, PolicyParams};
use crate::remac::{LossWeights, MaskIntervalSchedule, SigmaSchedule, TrainConfig};
use crate::runtime::{
    run_episode, valid_horizons, Corruption, DelaySpec, EpisodeSetup, ExecStrategy, StrategyKind, StrategyParams,
};
use crate::sampler::FreezeLength;

/// One evaluated row: a strategy bound to the policy it runs.
#[derive(Clone)]
pub struct Arm<'a> {
    pub label: String,
    pub kind: StrategyKind,
    pub policy: &'a PolicyParams,
    pub params: StrategyParams,
}

impl<'a> Arm<'a> {
    pub fn new(kind: StrategyKind, policy: &'a PolicyParams, params: StrategyParams) -> Self {
        Self {
            label: kind.name().to_string(),
            kind,
            policy,
            params,
        }
    }
}

/// Delay grid and episode budget shared by every arm of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalGrid {
    pub spec: ChunkSpec,
    pub delays: Vec<usize>,
    pub episodes: usize,
    pub dt_ms: f64,
    pub window: usize,
    pub corruption: Corruption,
    pub max_delay: usize,
}

impl EvalGrid {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            spec: cfg.chunk,
            delays: cfg.sweep.delays.clone(),
            episodes: cfg.sweep.episodes,
            dt_ms: cfg.sweep.dt_ms,
            window: cfg.sweep.window,
            corruption: Corruption::None,
            max_delay: cfg.robustness.max_delay,
        }
    }

    fn delay_spec(&self, d: usize) -> DelaySpec {
        DelaySpec {
            corruption: self.corruption,
            max_delay: self.max_delay,
            window: self.window,
            ..DelaySpec::for_delay(d, self.dt_ms)
        }
    }
}

/// Environment seed of episode `i` in cell `(d, h)`. Every strategy sees the
/// same seeds, so comparisons are paired.
pub fn episode_seed(master: u64, d: usize, h: usize, i: usize) -> u64 {
    Rng::new(master, streams::EVAL)
        .fork_path(&[d as u64, h as u64, i as u64])
        .next_u64()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepOutput {
    /// One row per (arm, d, h).
    pub cells: Vec<MetricsSummary>,
    /// One row per (arm, d), averaged over valid horizons.
    pub per_delay: Vec<MetricsSummary>,
    pub episodes: Vec<EpisodeStats>,
}

impl SweepOutput {
    pub fn per_delay_row(&self, label: &str, d: usize) -> Option<&MetricsSummary> {
        self.per_delay.iter().find(|m| m.strategy == label && m.d == d)
    }

    pub fn extend(&mut self, other: SweepOutput) {
        self.cells.extend(other.cells);
        self.per_delay.extend(other.per_delay);
        self.episodes.extend(other.episodes);
    }
}

fn run_cell(
    env: &EnvConfig,
    arm: &Arm<'_>,
    grid: &EvalGrid,
    d: usize,
    h: usize,
    master: u64,
) -> Result<Vec<EpisodeStats>> {
    let mut strategy = ExecStrategy::new(arm.kind);
    strategy.params = arm.params;
    // delay is fixed per cell, so guided sampling carries no latency surcharge
    strategy.params.rtc_latency_surcharge = 0.0;
    let setup = EpisodeSetup {
        env,
        policy: arm.policy,
        strategy,
        spec: ChunkSpec {
            exec_horizon: h,
            ..grid.spec
        },
        delay: grid.delay_spec(d),
    };
    (0..grid.episodes)
        .into_par_iter()
        .map(|i| {
            let seed = episode_seed(master, d, h, i);
            run_episode(setup, seed).map(|r| episode_stats(&arm.label, &r))
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_cell(format!("{} d={d} h={h}", arm.label)))
}

/// Every arm at every delay and valid execution horizon.
pub fn run_grid(env: &EnvConfig, arms: &[Arm<'_>], grid: &EvalGrid, master: u64) -> Result<SweepOutput> {
    if arms.is_empty() {
        return Err(Error::InvalidArgument("a sweep needs at least one strategy".into()));
    }
    let mut out = SweepOutput::default();
    for arm in arms {
        for &d in &grid.delays {
            let hs = valid_horizons(d, grid.spec.horizon);
            if hs.is_empty() {
                return Err(Error::Horizon(format!("no valid execution horizon for d={d}")));
            }
            let mut cells = Vec::with_capacity(hs.len());
            for h in hs {
                let stats = run_cell(env, arm, grid, d, h, master)?;
                cells.push(summarize(&stats)?);
                out.episodes.extend(stats);
            }
            out.per_delay.push(average_over_horizons(&cells)?);
            out.cells.extend(cells);
        }
    }
    Ok(out)
}

/// The configured strategies, with REMAC running the fine-tuned policy.
pub fn sweep_arms<'a>(
    cfg: &ExperimentConfig,
    base: &'a PolicyParams,
    remac: Option<&'a PolicyParams>,
) -> Result<Vec<Arm<'a>>> {
    cfg.sweep
        .strategies
        .iter()
        .map(|&kind| {
            let policy = if kind == StrategyKind::Remac {
                remac.ok_or_else(|| Error::InvalidArgument("the remac strategy needs a fine-tuned policy".into()))?
            } else {
                base
            };
            Ok(Arm::new(kind, policy, cfg.strategy))
        })
        .collect()
}

/// REMAC with corrupted delay estimates, labelled `remac-<corruption>`.
pub fn run_robustness(
    cfg: &ExperimentConfig,
    env: &EnvConfig,
    remac: &PolicyParams,
    master: u64,
) -> Result<SweepOutput> {
    let grid = EvalGrid {
        corruption: cfg.robustness.corruption,
        ..EvalGrid::from_config(cfg)
    };
    let arm = Arm {
        label: format!("remac-{}", cfg.robustness.corruption.name()),
        ..Arm::new(StrategyKind::Remac, remac, cfg.strategy)
    };
    run_grid(env, &[arm], &grid, master)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KinematicsRow {
    pub strategy: String,
    pub episodes: usize,
    pub boundary_j: f64,
    pub within_j: f64,
    pub mean_speed: f64,
    pub mean_accel: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KinematicsReport {
    pub delay_ticks: usize,
    /// Seeds on which both strategies succeeded.
    pub shared_seeds: Vec<u64>,
    pub rows: Vec<KinematicsRow>,
    /// Per-tick traces of the first shared seed, one per strategy.
    pub traces: Vec<(String, KinematicTrace)>,
}

impl KinematicsReport {
    pub fn row(&self, label: &str) -> Option<&KinematicsRow> {
        self.rows.iter().find(|r| r.strategy == label)
    }
}

/// Synchronous execution vs. REMAC under an injected latency, over the
/// episodes both complete.
pub fn run_kinematics(
    env: &EnvConfig,
    base: &PolicyParams,
    remac: &PolicyParams,
    params: StrategyParams,
    kc: &KinematicsConfig,
    spec: ChunkSpec,
    master: u64,
) -> Result<KinematicsReport> {
    let delay = DelaySpec {
        dt_ms: kc.dt_ms,
        injection_ms: kc.injection_ms,
        ..DelaySpec::default()
    };
    let d = delay.delay_ticks(0.0)?;
    let spec = ChunkSpec {
        exec_horizon: kc.exec_horizon,
        ..spec
    };
    let arms = [
        Arm::new(StrategyKind::Sync, base, params),
        Arm::new(StrategyKind::Remac, remac, params),
    ];
    let seeds: Vec<u64> = (0..kc.episodes)
        .map(|i| episode_seed(master, d, kc.exec_horizon, i))
        .collect();
    let mut runs = Vec::new();
    for arm in &arms {
        let mut strategy = ExecStrategy::new(arm.kind);
        strategy.params = arm.params;
        let setup = EpisodeSetup {
            env,
            policy: arm.policy,
            strategy,
            spec,
            delay,
        };
        let records = seeds
            .par_iter()
            .map(|&s| run_episode(setup, s))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.in_cell(format!("kinematics {}", arm.label)))?;
        runs.push(records);
    }
    let shared: Vec<usize> = (0..seeds.len())
        .filter(|&i| runs.iter().all(|r| r[i].success))
        .collect();
    let mut rows = Vec::new();
    let mut traces = Vec::new();
    for (arm, records) in arms.iter().zip(&runs) {
        let stats: Vec<EpisodeStats> = shared.iter().map(|&i| episode_stats(&arm.label, &records[i])).collect();
        let (bj, bc, wj, wc, sp, ac, n) = stats.iter().fold((0.0, 0, 0.0, 0, 0.0, 0.0, 0), |a, s| {
            (
                a.0 + s.boundary_jump_sum,
                a.1 + s.boundary_count,
                a.2 + s.within_jump_sum,
                a.3 + s.within_count,
                a.4 + s.speed_sum,
                a.5 + s.accel_sum,
                a.6 + s.ticks,
            )
        });
        let div = |x: f64, c: usize| if c == 0 { 0.0 } else { x / c as f64 };
        rows.push(KinematicsRow {
            strategy: arm.label.clone(),
            episodes: stats.len(),
            boundary_j: div(bj, bc),
            within_j: div(wj, wc),
            mean_speed: div(sp, n),
            mean_accel: div(ac, n),
        });
        if let Some(&i) = shared.first() {
            traces.push((arm.label.clone(), kinematic_trace(&records[i])));
        }
    }
    Ok(KinematicsReport {
        delay_ticks: d,
        shared_seeds: shared.iter().map(|&i| seeds[i]).collect(),
        rows,
        traces,
    })
}

/// One cell of the ablation matrix: how to fine-tune (if at all) and how to
/// deploy.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationVariant {
    pub axis: AblationAxis,
    pub label: String,
    pub training: Option<(TrainConfig, AdapterConfig)>,
    pub deploy: StrategyKind,
    pub params: StrategyParams,
}

/// Variants along one axis. Component-stack rows add one ingredient at a
/// time; the other axes vary one setting of the full recipe.
pub fn ablation_variants(cfg: &ExperimentConfig, axis: AblationAxis) -> Vec<AblationVariant> {
    let full = (cfg.train.clone(), cfg.adapter.clone());
    let variant = |label: &str, training: Option<(TrainConfig, AdapterConfig)>, deploy, params| AblationVariant {
        axis,
        label: label.to_string(),
        training,
        deploy,
        params,
    };
    let params = cfg.strategy;
    match axis {
        AblationAxis::ComponentStack => {
            let no_delta = LossWeights {
                delta: 0.0,
                ..cfg.train.loss_weights
            };
            let lora_only = TrainConfig {
                mask_interval: MaskIntervalSchedule {
                    q_max: 0,
                    q_min: 0,
                    ..cfg.train.mask_interval
                },
                sigma: SigmaSchedule::ConstantOne,
                loss_weights: no_delta,
                ..cfg.train.clone()
            };
            let lora_adapter = AdapterConfig {
                mask_embedding: false,
                ..cfg.adapter.clone()
            };
            let prefix = TrainConfig {
                sigma: SigmaSchedule::ConstantOne,
                loss_weights: no_delta,
                ..cfg.train.clone()
            };
            let curriculum = TrainConfig {
                loss_weights: no_delta,
                ..cfg.train.clone()
            };
            vec![
                variant("naive", None, StrategyKind::NaiveAsync, params),
                variant(
                    "+lora",
                    Some((lora_only, lora_adapter)),
                    StrategyKind::NaiveAsync,
                    params,
                ),
                variant(
                    "+prefix-masking",
                    Some((prefix, cfg.adapter.clone())),
                    StrategyKind::Remac,
                    params,
                ),
                variant(
                    "+curriculum",
                    Some((curriculum, cfg.adapter.clone())),
                    StrategyKind::Remac,
                    params,
                ),
                variant("+delta-loss", Some(full), StrategyKind::Remac, params),
            ]
        }
        AblationAxis::SigmaSchedule => [
            SigmaSchedule::PiecewiseLinear,
            SigmaSchedule::ConstantOne,
            SigmaSchedule::ConstantZero,
        ]
        .into_iter()
        .map(|s| {
            let t = TrainConfig {
                sigma: s,
                ..cfg.train.clone()
            };
            variant(s.name(), Some((t, cfg.adapter.clone())), StrategyKind::Remac, params)
        })
        .collect(),
        AblationAxis::QInterval => cfg
            .ablation
            .q_intervals
            .iter()
            .map(|&(q_max, q_min)| {
                let t = TrainConfig {
                    mask_interval: MaskIntervalSchedule {
                        q_max,
                        q_min,
                        ..cfg.train.mask_interval
                    },
                    ..cfg.train.clone()
                };
                variant(
                    &format!("q{q_max}-{q_min}"),
                    Some((t, cfg.adapter.clone())),
                    StrategyKind::Remac,
                    params,
                )
            })
            .collect(),
        AblationAxis::MaskEmbedding => [true, false]
            .into_iter()
            .map(|on| {
                let a = AdapterConfig {
                    mask_embedding: on,
                    ..cfg.adapter.clone()
                };
                let label = if on { "mask-embedding" } else { "raw-mask" };
                variant(label, Some((cfg.train.clone(), a)), StrategyKind::Remac, params)
            })
            .collect(),
        AblationAxis::FreezeLength => [FreezeLength::Delay, FreezeLength::Overlap]
            .into_iter()
            .map(|f| {
                let mut p = params;
                p.sampler.freeze = f;
                let label = match f {
                    FreezeLength::Delay => "freeze-delay",
                    FreezeLength::Overlap => "freeze-overlap",
                };
                variant(label, Some(full.clone()), StrategyKind::Remac, p)
            })
            .collect(),
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AblationOutput {
    /// Per-d rows labelled `<axis>/<variant>`.
    pub sweep: SweepOutput,
    pub variants: Vec<(AblationAxis, String)>,
}

impl AblationOutput {
    pub fn success(&self, axis: AblationAxis, label: &str, d: usize) -> Option<f64> {
        let key = format!("{}/{label}", axis.name());
        self.sweep.per_delay_row(&key, d).map(|m| m.success_rate)
    }
}

fn recipe_key(train: &TrainConfig, adapter: &AdapterConfig) -> String {
    serde_json::to_string(&(train, adapter)).expect("plain config")
}

/// Fine-tune one adapter per distinct training recipe and sweep every
/// variant at the ablation delays. The base policy serves untrained rows;
/// `full`, when given, is the merged policy already trained with the
/// configured recipe and seed.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    env: &EnvConfig,
    base: &PolicyParams,
    dataset: &Dataset,
    full: Option<&PolicyParams>,
    master: u64,
) -> Result<AblationOutput> {
    let grid = EvalGrid {
        delays: cfg.ablation.delays.clone(),
        episodes: cfg.ablation.episodes,
        ..EvalGrid::from_config(cfg)
    };
    let mut trained: HashMap<String, PolicyParams> = HashMap::new();
    if let Some(p) = full {
        trained.insert(recipe_key(&cfg.train, &cfg.adapter), p.clone());
    }
    let mut out = AblationOutput::default();
    for &axis in &cfg.ablation.axes {
        for v in ablation_variants(cfg, axis) {
            let policy = match &v.training {
                None => base.clone(),
                Some((t, a)) => {
                    let key = recipe_key(t, a);
                    if let Some(p) = trained.get(&key) {
                        p.clone()
                    } else {
                        let run = finetune(base, dataset, t, a, master)?;
                        trained.insert(key, run.merged.clone());
                        run.merged
                    }
                }
            };
            let arm = Arm {
                label: format!("{}/{}", axis.name(), v.label),
                kind: v.deploy,
                policy: &policy,
                params: v.params,
            };
            out.sweep.extend(run_grid(env, &[arm], &grid, master)?);
            out.variants.push((axis, v.label));
        }
    }
    Ok(out)
}
