//! Discrete-event simulation of synchronous and asynchronous chunk
//! execution, delay models and the execution strategies.

use serde::{Deserialize, Serialize};

use crate::envs::{env_reset, env_step, EnvConfig, ACTION_DIM};
use crate::error::{Error, Result};
use crate::numerics::rng::streams;
use crate::numerics::{Matrix, Rng};
use crate::policy::{integrate, ActionChunk, ChunkSpec, VelocityField};
use crate::remac::prefix_mask;
use crate::sampler::{first_chunk, gaussian_start, guided_integrate, prefix_preserved_integrate, SamplerConfig};

/// Probability that a spiky corruption replaces the delay by its maximum.
pub const SPIKE_PROB: f64 = 0.10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Corruption {
    None,
    Noisy,
    Spiky,
    NoisySpiky,
}

impl Corruption {
    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Noisy => "noisy",
            Self::Spiky => "spiky",
            Self::NoisySpiky => "noisy-spiky",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DelaySpec {
    /// Controller period in simulated ms.
    pub dt_ms: f64,
    /// Inference latency in simulated ms.
    pub base_ms: f64,
    pub injection_ms: f64,
    pub corruption: Corruption,
    /// Largest delay a corrupted estimate may report.
    pub max_delay: usize,
    /// Number of recent measurements the estimate looks at.
    pub window: usize,
}

impl Default for DelaySpec {
    fn default() -> Self {
        Self {
            dt_ms: 20.0,
            base_ms: 0.0,
            injection_ms: 0.0,
            corruption: Corruption::None,
            max_delay: 4,
            window: 3,
        }
    }
}

impl DelaySpec {
    /// Latency that lands exactly on `d` controller ticks.
    pub fn for_delay(d: usize, dt_ms: f64) -> Self {
        Self {
            dt_ms,
            base_ms: d as f64 * dt_ms,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt_ms > 0.0) {
            return Err(Error::InvalidArgument("controller period must be > 0".into()));
        }
        if !(self.base_ms >= 0.0 && self.injection_ms >= 0.0) {
            return Err(Error::InvalidArgument("latencies must be >= 0".into()));
        }
        if self.window == 0 {
            return Err(Error::InvalidArgument("delay window must be >= 1".into()));
        }
        Ok(())
    }

    /// Latency of one inference call, with a proportional surcharge.
    pub fn latency_ms(&self, surcharge: f64) -> f64 {
        (self.base_ms + self.injection_ms) * (1.0 + surcharge)
    }

    pub fn delay_ticks(&self, surcharge: f64) -> Result<usize> {
        discretize_delay(self.latency_ms(surcharge), self.dt_ms)
    }
}

pub fn discretize_delay(latency_ms: f64, dt_ms: f64) -> Result<usize> {
    if !(dt_ms > 0.0) {
        return Err(Error::InvalidArgument(format!("controller period {dt_ms} must be > 0")));
    }
    if !(latency_ms >= 0.0) || !latency_ms.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "latency {latency_ms} must be finite and >= 0"
        )));
    }
    Ok((latency_ms / dt_ms).floor() as usize)
}

/// Ticks a synchronous controller waits for one inference call.
pub fn sync_idle_ticks(latency_ms: f64, dt_ms: f64) -> Result<usize> {
    discretize_delay(latency_ms, dt_ms)?;
    Ok((latency_ms / dt_ms).ceil() as usize)
}

pub fn corrupt_delay(true_d: usize, corruption: Corruption, max_d: usize, rng: &mut Rng) -> usize {
    let noisy = |d: usize, rng: &mut Rng| {
        let shifted = d as i64 + rng.int_inclusive(0, 2) as i64 - 1;
        shifted.clamp(0, max_d as i64) as usize
    };
    let spiky = |d: usize, rng: &mut Rng| if rng.bernoulli(SPIKE_PROB) { max_d } else { d };
    match corruption {
        Corruption::None => true_d,
        Corruption::Noisy => noisy(true_d, rng),
        Corruption::Spiky => spiky(true_d, rng),
        Corruption::NoisySpiky => {
            let d = noisy(true_d, rng);
            spiky(d, rng)
        }
    }
}

/// Max over the last `window` measured delays.
pub fn estimate_delay(history: &[usize], window: usize) -> Result<usize> {
    if history.is_empty() {
        return Err(Error::EmptyHistory);
    }
    let start = history.len().saturating_sub(window.max(1));
    Ok(*history[start..].iter().max().expect("non-empty"))
}

/// Client-side delay estimate with a fallback before any measurement.
#[derive(Clone, Debug)]
pub struct DelayEstimator {
    pub window: usize,
    pub prior: usize,
    history: Vec<usize>,
}

impl DelayEstimator {
    pub fn new(window: usize, prior: usize) -> Self {
        Self {
            window,
            prior,
            history: Vec::new(),
        }
    }

    pub fn record(&mut self, measured: usize) {
        self.history.push(measured);
    }

    /// The estimate and whether it came from the configured prior.
    pub fn estimate(&self) -> (usize, bool) {
        match estimate_delay(&self.history, self.window) {
            Ok(d) => (d, false),
            Err(_) => (self.prior, true),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HorizonCheck {
    Ok,
    /// `h < max(1, d)`: the next chunk would be requested before the
    /// previous one arrived.
    TooShort {
        min: usize,
    },
    /// `h > P − d`: the current chunk runs out before the next one arrives.
    TooLong {
        max: usize,
    },
}

impl HorizonCheck {
    pub fn is_ok(self) -> bool {
        self == HorizonCheck::Ok
    }
}

pub fn validate_horizon(h: usize, d: usize, horizon: usize) -> HorizonCheck {
    let min = d.max(1);
    if h < min {
        return HorizonCheck::TooShort { min };
    }
    let max = horizon.saturating_sub(d);
    if h > max {
        return HorizonCheck::TooLong { max };
    }
    HorizonCheck::Ok
}

pub fn valid_horizons(d: usize, horizon: usize) -> Vec<usize> {
    (1..=horizon)
        .filter(|&h| validate_horizon(h, d, horizon).is_ok())
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    Sync,
    NaiveAsync,
    TemporalEnsemble,
    RtcLite,
    Remac,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Sync => "sync",
            Self::NaiveAsync => "naive-async",
            Self::TemporalEnsemble => "temporal-ensemble",
            Self::RtcLite => "rtc-lite",
            Self::Remac => "remac",
        }
    }

    pub fn is_async(self) -> bool {
        self != Self::Sync
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategyParams {
    /// Temporal-ensemble decay per chunk of age.
    pub te_decay: f64,
    pub rtc_beta: f64,
    pub rtc_soft_width: usize,
    /// Extra latency of guided sampling, as a fraction of the base latency.
    pub rtc_latency_surcharge: f64,
    pub sampler: SamplerConfig,
}

impl Default for StrategyParams {
    fn default() -> Self {
        Self {
            te_decay: 0.01,
            rtc_beta: 0.5,
            rtc_soft_width: 2,
            rtc_latency_surcharge: 0.6,
            sampler: SamplerConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExecStrategy {
    pub kind: StrategyKind,
    pub params: StrategyParams,
}

impl ExecStrategy {
    pub fn new(kind: StrategyKind) -> Self {
        Self {
            kind,
            params: StrategyParams::default(),
        }
    }

    pub fn surcharge(&self) -> f64 {
        if self.kind == StrategyKind::RtcLite {
            self.params.rtc_latency_surcharge
        } else {
            0.0
        }
    }
}

/// Normalized `exp(−m·age)` average of the proposals covering a tick.
/// `proposals` holds `(age, action)`, newest chunk at age 0.
pub fn temporal_ensemble_action(proposals: &[(usize, &[f64])], decay: f64) -> Result<Vec<f64>> {
    if proposals.is_empty() {
        return Err(Error::InvalidArgument("no chunk covers this tick".into()));
    }
    let dim = proposals[0].1.len();
    let mut out = vec![0.0; dim];
    let mut total = 0.0;
    for (age, a) in proposals {
        let w = (-decay * *age as f64).exp();
        total += w;
        for (o, v) in out.iter_mut().zip(a.iter()) {
            *o += w * v;
        }
    }
    out.iter_mut().for_each(|o| *o /= total);
    Ok(out)
}

/// Simplified guided sampling: rows before `d` are frozen to the prior and
/// the next `soft_width` rows are pulled toward it with a linearly fading
/// weight after every Euler step.
pub fn rtc_lite_integrate<V: VelocityField + ?Sized>(
    field: &V,
    obs: &[f64],
    prior: &crate::sampler::PriorChunk,
    d: usize,
    beta: f64,
    soft_width: usize,
    n: usize,
) -> Result<ActionChunk> {
    let horizon = field.chunk_spec().horizon;
    let mask = prefix_mask(d.min(horizon - 1), horizon)?;
    let d = mask.delay();
    let valid = prior.valid_rows;
    guided_integrate(field, obs, prior, &mask, Some(&mask), n, |_, state, prior| {
        if soft_width == 0 {
            return;
        }
        for k in d..(d + soft_width).min(valid).min(horizon) {
            let w = beta * (1.0 - (k - d) as f64 / soft_width as f64);
            for (a, p) in state.row_mut(k).iter_mut().zip(prior.row(k)) {
                *a += w * (p - *a);
            }
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: usize,
    pub observation: Vec<f64>,
    pub action: [f64; 2],
    /// Chunk the action came from; `None` while a synchronous controller idles.
    pub chunk: Option<usize>,
    pub index: usize,
    pub queue_depth: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChunkRecord {
    pub id: usize,
    pub request_tick: usize,
    pub arrival_tick: usize,
    pub delay: usize,
    pub delay_estimate: usize,
    pub estimate_from_prior: bool,
    pub frozen_rows: usize,
    pub actions: Matrix,
    /// Start state used by prefix-frozen samplers.
    pub prior: Option<Matrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub seed: u64,
    pub strategy: StrategyKind,
    pub exec_horizon: usize,
    pub delay: usize,
    pub success: bool,
    pub collided: bool,
    /// Tick at which the episode ended (the cap for failures).
    pub completion_tick: usize,
    pub ticks: Vec<TickRecord>,
    pub chunks: Vec<ChunkRecord>,
}

impl EpisodeRecord {
    pub fn idle_ticks(&self) -> usize {
        self.ticks.iter().filter(|t| t.chunk.is_none()).count()
    }
}

/// Everything an episode needs besides the seed.
#[derive(Clone, Copy)]
pub struct EpisodeSetup<'a> {
    pub env: &'a EnvConfig,
    /// Base policy for the baselines, merged fine-tuned policy for REMAC.
    pub policy: &'a dyn VelocityField,
    pub strategy: ExecStrategy,
    pub spec: ChunkSpec,
    pub delay: DelaySpec,
}

struct LiveChunk {
    id: usize,
    start: usize,
    actions: Matrix,
}

struct Episode<'a> {
    setup: EpisodeSetup<'a>,
    sampler_rng: Rng,
    delay_rng: Rng,
    estimator: DelayEstimator,
    delay: usize,
    record: EpisodeRecord,
}

impl Episode<'_> {
    fn request(&mut self, id: usize, tick: usize, obs: &[f64], prev: Option<&LiveChunk>) -> Result<LiveChunk> {
        let EpisodeSetup {
            policy,
            strategy,
            spec,
            delay,
            ..
        } = self.setup;
        let h = spec.exec_horizon;
        let p = spec.horizon;
        let n = spec.integration_steps;
        let mut rng = self.sampler_rng.fork(id as u64);
        let (est, from_prior) = self.estimator.estimate();
        let reported = corrupt_delay(est, delay.corruption, delay.max_delay, &mut self.delay_rng);
        // a chunk can never be late by more than the overlap it inherits
        let reported = reported.min(p - h);
        let mut frozen = 0;
        let mut prior_rows = None;
        let actions = match (strategy.kind, prev) {
            (StrategyKind::Remac, None) => first_chunk(policy, obs, &strategy.params.sampler, &mut rng)?,
            (StrategyKind::Remac, Some(prev)) => {
                let prior = strategy.params.sampler.prior(policy, &chunk_of(prev), h, prev.id)?;
                frozen = strategy.params.sampler.frozen_rows(reported, h, p);
                let mask = prefix_mask(frozen, p)?;
                prior_rows = Some(prior.chunk.values.clone());
                prefix_preserved_integrate(policy, obs, &prior, &mask, n)?
            }
            (StrategyKind::RtcLite, Some(prev)) => {
                let prior = strategy.params.sampler.prior(policy, &chunk_of(prev), h, prev.id)?;
                frozen = reported.min(p - 1);
                prior_rows = Some(prior.chunk.values.clone());
                rtc_lite_integrate(
                    policy,
                    obs,
                    &prior,
                    frozen,
                    strategy.params.rtc_beta,
                    strategy.params.rtc_soft_width,
                    n,
                )?
            }
            _ => integrate(policy, obs, &gaussian_start(policy, &mut rng), n, None)?,
        };
        let warm = prev.is_none() && strategy.kind.is_async();
        let arrival = if warm { tick } else { tick + self.delay };
        self.record.chunks.push(ChunkRecord {
            id,
            request_tick: tick,
            arrival_tick: arrival,
            delay: arrival - tick,
            delay_estimate: reported,
            estimate_from_prior: from_prior,
            frozen_rows: frozen,
            actions: actions.values.clone(),
            prior: prior_rows,
        });
        Ok(LiveChunk {
            id,
            start: tick,
            actions: actions.values,
        })
    }
}

fn chunk_of(c: &LiveChunk) -> ActionChunk {
    ActionChunk {
        role: crate::policy::ChunkRole::PretrainedSample,
        values: c.actions.clone(),
    }
}

fn action_row(m: &Matrix, k: usize) -> [f64; 2] {
    let r = m.row(k);
    [r[0], r[1]]
}

/// Simulate one episode under a strategy, returning the full trace.
pub fn run_episode(setup: EpisodeSetup<'_>, seed: u64) -> Result<EpisodeRecord> {
    setup.spec.validate()?;
    setup.delay.validate()?;
    if setup.spec.action_dim != ACTION_DIM {
        return Err(Error::Dimension {
            context: "policy action dim",
            expected: ACTION_DIM,
            got: setup.spec.action_dim,
        });
    }
    let delay = setup.delay.delay_ticks(setup.strategy.surcharge())?;
    let h = setup.spec.exec_horizon;
    let p = setup.spec.horizon;
    if setup.strategy.kind.is_async() {
        if let check @ (HorizonCheck::TooShort { .. } | HorizonCheck::TooLong { .. }) = validate_horizon(h, delay, p) {
            return Err(Error::Horizon(format!("h={h}, d={delay}, P={p}: {check:?}")));
        }
    }
    let mut ep = Episode {
        setup,
        sampler_rng: Rng::new(seed, streams::SAMPLER),
        delay_rng: Rng::new(seed, streams::DELAY),
        estimator: DelayEstimator::new(setup.delay.window, delay),
        delay,
        record: EpisodeRecord {
            seed,
            strategy: setup.strategy.kind,
            exec_horizon: h,
            delay,
            success: false,
            collided: false,
            completion_tick: setup.env.max_steps,
            ticks: Vec::new(),
            chunks: Vec::new(),
        },
    };
    let mut env = env_reset(setup.env, seed);

    if setup.strategy.kind == StrategyKind::Sync {
        let idle = sync_idle_ticks(setup.delay.latency_ms(0.0), setup.delay.dt_ms)?;
        let mut tick = 0;
        let mut id = 0;
        'outer: loop {
            let obs = env.observation();
            let chunk = ep.request(id, tick, &obs, None)?;
            // the controller waits for the result with zero command
            let plan: Vec<Option<usize>> = (0..idle).map(|_| None).chain((0..h).map(Some)).collect();
            for step in plan {
                let action = step.map_or([0.0, 0.0], |k| action_row(&chunk.actions, k));
                ep.record.ticks.push(TickRecord {
                    tick,
                    observation: env.observation(),
                    action,
                    chunk: step.map(|_| id),
                    index: step.unwrap_or(0),
                    queue_depth: step.map_or(h, |k| h - k),
                });
                let out = env_step(&mut env, &action)?;
                tick += 1;
                if out.done {
                    ep.record.success = out.success;
                    ep.record.collided = out.collided;
                    ep.record.completion_tick = if out.success { tick } else { setup.env.max_steps };
                    break 'outer;
                }
            }
            id += 1;
        }
        return Ok(ep.record);
    }

    let mut arrived: Vec<LiveChunk> = Vec::new();
    let mut pending: Vec<(usize, LiveChunk)> = Vec::new();
    let mut next_id = 0;
    let mut next_request = 0;
    let te = setup.strategy.kind == StrategyKind::TemporalEnsemble;
    for tick in 0..setup.env.max_steps {
        let absorb = |pending: &mut Vec<(usize, LiveChunk)>, arrived: &mut Vec<LiveChunk>, ep: &mut Episode| {
            while let Some(pos) = pending.iter().position(|(at, _)| *at == tick) {
                let (_, c) = pending.remove(pos);
                if c.id > 0 {
                    ep.estimator.record(ep.delay);
                }
                arrived.push(c);
            }
        };
        absorb(&mut pending, &mut arrived, &mut ep);
        if tick == next_request {
            let obs = env.observation();
            let chunk = ep.request(next_id, tick, &obs, arrived.last())?;
            let arrival = ep.record.chunks.last().expect("just pushed").arrival_tick;
            pending.push((arrival, chunk));
            next_id += 1;
            next_request += h;
        }
        absorb(&mut pending, &mut arrived, &mut ep);

        let current = arrived.last().expect("first chunk is warm-started");
        let index = tick - current.start;
        if index >= p {
            return Err(Error::QueueUnderrun {
                tick,
                chunk_id: current.id,
                index,
                horizon: p,
            });
        }
        let action = if te {
            let newest = current.id;
            let proposals: Vec<(usize, &[f64])> = arrived
                .iter()
                .filter(|c| tick - c.start < p)
                .map(|c| (newest - c.id, c.actions.row(tick - c.start)))
                .collect();
            let a = temporal_ensemble_action(&proposals, setup.strategy.params.te_decay)?;
            [a[0], a[1]]
        } else {
            action_row(&current.actions, index)
        };
        if !(action[0].is_finite() && action[1].is_finite()) {
            return Err(Error::NonFinite(format!("action at tick {tick}")));
        }
        ep.record.ticks.push(TickRecord {
            tick,
            observation: env.observation(),
            action,
            chunk: Some(current.id),
            index,
            queue_depth: p - index,
        });
        // chunks that can no longer contribute are dropped
        let current_id = current.id;
        arrived.retain(|c| c.id == current_id || tick + 1 - c.start < p);
        let out = env_step(&mut env, &action)?;
        if out.done {
            ep.record.success = out.success;
            ep.record.collided = out.collided;
            ep.record.completion_tick = if out.success { tick + 1 } else { setup.env.max_steps };
            break;
        }
    }
    Ok(ep.record)
}
