//! Flow-matching action-chunk policy: velocity field, Euler integration and
//! pretraining on expert chunks.
//!
//! The network works in normalized coordinates. Its input is the
//! concatenation `[chunk (P·D) | observation | time features | mask features (P)]`.
//! Public entry points take raw action chunks; the velocity returned is in
//! raw action units, so Euler steps in raw space match steps in normalized
//! space exactly.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::mask_features;
use crate::envs::Dataset;
use crate::error::{check_dim, Error, Result};
use crate::numerics::{Adam, AdamConfig, DenseNet, Matrix, NetGrads, Rng};
use crate::remac::PrefixMask;

/// Raw flow time plus sin/cos at four frequencies.
pub const TIME_FEATURES: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChunkSpec {
    /// Prediction horizon `P`.
    pub horizon: usize,
    pub action_dim: usize,
    /// Execution horizon `h`.
    pub exec_horizon: usize,
    /// Euler steps `n`.
    pub integration_steps: usize,
}

impl Default for ChunkSpec {
    fn default() -> Self {
        Self {
            horizon: 8,
            action_dim: 2,
            exec_horizon: 4,
            integration_steps: 10,
        }
    }
}

impl ChunkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.action_dim == 0 {
            return Err(Error::InvalidArgument("P and D must be >= 1".into()));
        }
        if !(1..=self.horizon).contains(&self.exec_horizon) {
            return Err(Error::InvalidArgument(format!(
                "execution horizon {} outside 1..={}",
                self.exec_horizon, self.horizon
            )));
        }
        if self.integration_steps == 0 {
            return Err(Error::InvalidArgument("integration steps must be >= 1".into()));
        }
        Ok(())
    }

    pub fn chunk_len(&self) -> usize {
        self.horizon * self.action_dim
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChunkRole {
    GroundTruth,
    PretrainedSample,
    Mixed,
    Prior,
    Intermediate,
}

/// `P × D` action matrix tagged with the role it plays.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionChunk {
    pub role: ChunkRole,
    pub values: Matrix,
}

impl ActionChunk {
    pub fn new(role: ChunkRole, values: Matrix) -> Result<Self> {
        if !values.is_finite() {
            return Err(Error::NonFinite("action chunk".into()));
        }
        Ok(Self { role, values })
    }

    pub fn zeros(spec: &ChunkSpec, role: ChunkRole) -> Self {
        Self {
            role,
            values: Matrix::zeros(spec.horizon, spec.action_dim),
        }
    }

    pub fn horizon(&self) -> usize {
        self.values.rows()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        self.values.row(k)
    }

    fn check(&self, spec: &ChunkSpec) -> Result<()> {
        check_dim("chunk rows", spec.horizon, self.values.rows())?;
        check_dim("chunk cols", spec.action_dim, self.values.cols())
    }
}

/// Affine feature scaling: `(x - mean) / std`. Observations are z-scored;
/// actions are mapped onto [-1, 1] by their central quantile band, so a chunk
/// reused as a flow start stays inside the Gaussian prior's typical set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub obs_mean: Vec<f64>,
    pub obs_std: Vec<f64>,
    pub act_mean: Vec<f64>,
    pub act_std: Vec<f64>,
}

/// Tail mass excluded on each side when fitting the action band.
const ACTION_QUANTILE: f64 = 0.01;

/// Midpoint and half-width of the central quantile band `[q, 1 - q]` per column.
fn quantile_band(columns: usize, rows: impl Iterator<Item = Vec<f64>>, q: f64) -> (Vec<f64>, Vec<f64>) {
    let mut cols: Vec<Vec<f64>> = vec![Vec::new(); columns];
    for r in rows {
        for (c, v) in cols.iter_mut().zip(&r) {
            c.push(*v);
        }
    }
    cols.into_iter()
        .map(|mut c| {
            if c.is_empty() {
                return (0.0, 1.0);
            }
            c.sort_by(f64::total_cmp);
            let at = |f: f64| c[((c.len() - 1) as f64 * f).round() as usize];
            let (lo, hi) = (at(q), at(1.0 - q));
            let half = 0.5 * (hi - lo);
            (0.5 * (hi + lo), if half < 1e-8 { 1.0 } else { half })
        })
        .unzip()
}

fn mean_std(columns: usize, rows: impl Iterator<Item = Vec<f64>> + Clone) -> (Vec<f64>, Vec<f64>) {
    let mut n = 0usize;
    let mut mean = vec![0.0; columns];
    for r in rows.clone() {
        n += 1;
        for (m, v) in mean.iter_mut().zip(&r) {
            *m += v;
        }
    }
    let n = n.max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; columns];
    for r in rows {
        for ((s, v), m) in var.iter_mut().zip(&r).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var
        .into_iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            // constant features (e.g. an always-present obstacle flag)
            if sd < 1e-8 {
                1.0
            } else {
                sd
            }
        })
        .collect();
    (mean, std)
}

impl Normalizer {
    pub fn identity(obs_dim: usize, action_dim: usize) -> Self {
        Self {
            obs_mean: vec![0.0; obs_dim],
            obs_std: vec![1.0; obs_dim],
            act_mean: vec![0.0; action_dim],
            act_std: vec![1.0; action_dim],
        }
    }

    pub fn from_dataset(ds: &Dataset) -> Result<Self> {
        if ds.pairs.is_empty() {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        let d = ds.header.action_dim;
        let (obs_mean, obs_std) = mean_std(ds.header.obs_dim, ds.pairs.iter().map(|p| p.observation.clone()));
        let (act_mean, act_std) = quantile_band(
            d,
            ds.pairs
                .iter()
                .flat_map(|p| (0..p.actions.rows()).map(move |k| p.actions.row(k).to_vec())),
            ACTION_QUANTILE,
        );
        Ok(Self {
            obs_mean,
            obs_std,
            act_mean,
            act_std,
        })
    }

    pub fn norm_obs(&self, obs: &[f64]) -> Vec<f64> {
        obs.iter()
            .zip(self.obs_mean.iter().zip(&self.obs_std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    pub fn norm_chunk(&self, chunk: &Matrix) -> Vec<f64> {
        let d = self.act_mean.len();
        chunk
            .as_slice()
            .iter()
            .enumerate()
            .map(|(i, x)| (x - self.act_mean[i % d]) / self.act_std[i % d])
            .collect()
    }

    pub fn denorm_chunk(&self, flat: &[f64], rows: usize) -> Matrix {
        let d = self.act_mean.len();
        let data = flat
            .iter()
            .enumerate()
            .map(|(i, x)| x * self.act_std[i % d] + self.act_mean[i % d])
            .collect();
        Matrix::from_vec(rows, d, data).expect("shape")
    }

    /// Velocities are differences, so only the scale applies.
    pub fn denorm_velocity(&self, flat: &[f64], rows: usize) -> Matrix {
        let d = self.act_std.len();
        let data = flat.iter().enumerate().map(|(i, x)| x * self.act_std[i % d]).collect();
        Matrix::from_vec(rows, d, data).expect("shape")
    }
}

pub fn time_features(tau: f64) -> [f64; TIME_FEATURES] {
    let mut f = [0.0; TIME_FEATURES];
    f[0] = tau;
    for k in 0..4 {
        let w = std::f64::consts::PI * (1u32 << k) as f64 * tau;
        f[1 + 2 * k] = w.sin();
        f[2 + 2 * k] = w.cos();
    }
    f
}

/// Column ranges of the network input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InputLayout {
    pub chunk: (usize, usize),
    pub obs: (usize, usize),
    pub time: (usize, usize),
    pub mask: (usize, usize),
}

impl InputLayout {
    pub fn new(spec: &ChunkSpec, obs_dim: usize) -> Self {
        let c = spec.chunk_len();
        let o = c + obs_dim;
        let t = o + TIME_FEATURES;
        Self {
            chunk: (0, c),
            obs: (c, o),
            time: (o, t),
            mask: (t, t + spec.horizon),
        }
    }

    pub fn width(&self) -> usize {
        self.mask.1
    }

    pub fn assemble(&self, chunk_n: &[f64], obs_n: &[f64], tau: f64, mask_feats: &[f64]) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.width());
        x.extend_from_slice(chunk_n);
        x.extend_from_slice(obs_n);
        x.extend_from_slice(&time_features(tau));
        x.extend_from_slice(mask_feats);
        debug_assert_eq!(x.len(), self.width());
        x
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub spec: ChunkSpec,
    pub obs_dim: usize,
    pub norm: Normalizer,
    pub net: DenseNet,
    /// Learned mask embedding carried over from a merged adapter.
    pub mask_projection: Option<Matrix>,
}

/// Anything that can produce a flow estimate for a chunk state.
pub trait VelocityField: Sync {
    fn chunk_spec(&self) -> &ChunkSpec;
    fn normalizer(&self) -> &Normalizer;
    /// Flow in raw action units.
    fn velocity(&self, state: &ActionChunk, obs: &[f64], tau: f64, mask: Option<&PrefixMask>) -> Result<ActionChunk>;
}

impl PolicyParams {
    /// Fresh velocity network. Mask-feature columns of the first layer start
    /// at zero so the base policy ignores that slot.
    pub fn init(spec: ChunkSpec, obs_dim: usize, hidden: &[usize], norm: Normalizer, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        check_dim("normalizer obs", obs_dim, norm.obs_mean.len())?;
        check_dim("normalizer actions", spec.action_dim, norm.act_mean.len())?;
        let layout = InputLayout::new(&spec, obs_dim);
        let mut dims = vec![layout.width()];
        dims.extend_from_slice(hidden);
        dims.push(spec.chunk_len());
        let mut net = DenseNet::new(&dims, rng)?;
        let w = &mut net.layers[0].weight;
        for r in 0..w.rows() {
            for c in layout.mask.0..layout.mask.1 {
                w.set(r, c, 0.0);
            }
        }
        Ok(Self {
            spec,
            obs_dim,
            norm,
            net,
            mask_projection: None,
        })
    }

    pub fn layout(&self) -> InputLayout {
        InputLayout::new(&self.spec, self.obs_dim)
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.net.validate()?;
        check_dim("net input", self.layout().width(), self.net.input_dim())?;
        check_dim("net output", self.spec.chunk_len(), self.net.output_dim())?;
        if self.norm.obs_std.iter().chain(&self.norm.act_std).any(|s| !(*s > 0.0)) {
            return Err(Error::InvalidArgument("normalizer std must be > 0".into()));
        }
        Ok(())
    }

    /// Network output in normalized units for a normalized chunk state.
    pub fn raw_velocity(&self, chunk_n: &[f64], obs_n: &[f64], tau: f64, mask_feats: &[f64]) -> Result<Vec<f64>> {
        let x = self.layout().assemble(chunk_n, obs_n, tau, mask_feats);
        self.net.predict(&x)
    }

    /// Draw `A⁰` from the standard Gaussian in normalized coordinates.
    pub fn sample_prior(&self, rng: &mut Rng) -> ActionChunk {
        let z: Vec<f64> = (0..self.spec.chunk_len()).map(|_| rng.normal()).collect();
        ActionChunk {
            role: ChunkRole::Intermediate,
            values: self.norm.denorm_chunk(&z, self.spec.horizon),
        }
    }

    pub fn mask_features(&self, mask: Option<&PrefixMask>) -> Vec<f64> {
        match mask {
            Some(m) => mask_features(m, self.mask_projection.as_ref()),
            None => vec![0.0; self.spec.horizon],
        }
    }
}

impl VelocityField for PolicyParams {
    fn chunk_spec(&self) -> &ChunkSpec {
        &self.spec
    }

    fn normalizer(&self) -> &Normalizer {
        &self.norm
    }

    fn velocity(&self, state: &ActionChunk, obs: &[f64], tau: f64, mask: Option<&PrefixMask>) -> Result<ActionChunk> {
        state.check(&self.spec)?;
        check_dim("observation", self.obs_dim, obs.len())?;
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::InvalidArgument(format!("flow time {tau} outside [0, 1]")));
        }
        if !state.values.is_finite() || obs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("velocity input".into()));
        }
        if let Some(m) = mask {
            check_dim("mask length", self.spec.horizon, m.len())?;
        }
        let chunk_n = self.norm.norm_chunk(&state.values);
        let obs_n = self.norm.norm_obs(obs);
        let out = self.raw_velocity(&chunk_n, &obs_n, tau, &self.mask_features(mask))?;
        Ok(ActionChunk {
            role: ChunkRole::Intermediate,
            values: self.norm.denorm_velocity(&out, self.spec.horizon),
        })
    }
}

/// Euler integration of the flow from `a0` over `τ = 0, 1/n, …, (n−1)/n`.
pub fn integrate<V: VelocityField + ?Sized>(
    field: &V,
    obs: &[f64],
    a0: &ActionChunk,
    n: usize,
    mask: Option<&PrefixMask>,
) -> Result<ActionChunk> {
    if n == 0 {
        return Err(Error::InvalidArgument("integration steps must be >= 1".into()));
    }
    let dt = 1.0 / n as f64;
    let mut state = ActionChunk {
        role: ChunkRole::Intermediate,
        values: a0.values.clone(),
    };
    for step in 0..n {
        let tau = step as f64 * dt;
        let v = field.velocity(&state, obs, tau, mask)?;
        for (a, dv) in state.values.as_mut_slice().iter_mut().zip(v.values.as_slice()) {
            *a += dt * dv;
        }
    }
    if !state.values.is_finite() {
        return Err(Error::NonFinite("integrated chunk".into()));
    }
    state.role = ChunkRole::PretrainedSample;
    Ok(state)
}

/// Euler integration in normalized coordinates, used inside training loops.
pub fn integrate_normalized(
    params: &PolicyParams,
    obs_n: &[f64],
    z: &[f64],
    n: usize,
    mask_feats: &[f64],
) -> Result<Vec<f64>> {
    let dt = 1.0 / n as f64;
    let mut a = z.to_vec();
    for step in 0..n {
        let v = params.raw_velocity(&a, obs_n, step as f64 * dt, mask_feats)?;
        for (x, dv) in a.iter_mut().zip(&v) {
            *x += dt * dv;
        }
    }
    Ok(a)
}

/// One point on the straight noise-to-data path.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample {
    pub s: f64,
    pub noise: Vec<f64>,
    pub state: Vec<f64>,
    pub target: Vec<f64>,
}

pub fn flow_sample_at(target_chunk: &[f64], noise: Vec<f64>, s: f64) -> FlowSample {
    let state = noise
        .iter()
        .zip(target_chunk)
        .map(|(z, a)| (1.0 - s) * z + s * a)
        .collect();
    let target = noise.iter().zip(target_chunk).map(|(z, a)| a - z).collect();
    FlowSample {
        s,
        noise,
        state,
        target,
    }
}

/// `A⁰ ~ N(0, I)`, `s ~ U[0, 1]`, `Aˢ = (1−s)A⁰ + s·A`, `u = A − A⁰`.
pub fn make_flow_sample(target_chunk: &[f64], rng: &mut Rng) -> FlowSample {
    let noise: Vec<f64> = target_chunk.iter().map(|_| rng.normal()).collect();
    let s = rng.uniform();
    flow_sample_at(target_chunk, noise, s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Cosine decay of the learning rate down to this fraction of its start.
    pub final_lr_fraction: f64,
    pub hidden: Vec<usize>,
}

/// Cosine interpolation from `lr` to `lr·final_fraction` over training.
pub fn cosine_lr(lr: f64, final_fraction: f64, progress: f64) -> f64 {
    let c = 0.5 * (1.0 + (std::f64::consts::PI * progress.clamp(0.0, 1.0)).cos());
    lr * (final_fraction + (1.0 - final_fraction) * c)
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            batch_size: 64,
            adam: AdamConfig {
                lr: 1e-2,
                ..AdamConfig::default()
            },
            final_lr_fraction: 0.1,
            hidden: vec![64, 64, 64],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub epoch_loss: Vec<f64>,
}

/// Normalized copy of a dataset: `(obs_n, chunk_n)` per pair.
pub fn normalize_dataset(norm: &Normalizer, ds: &Dataset) -> Vec<(Vec<f64>, Vec<f64>)> {
    ds.pairs
        .iter()
        .map(|p| (norm.norm_obs(&p.observation), norm.norm_chunk(&p.actions)))
        .collect()
}

pub(crate) fn shuffled(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.int_inclusive(0, i);
        idx.swap(i, j);
    }
    idx
}

/// Fixed partition used for parallel gradient accumulation; independent of
/// the thread count so results do not depend on it.
pub(crate) const GRAD_GROUP: usize = 8;

/// Minibatch Adam on the flow-matching regression loss.
pub fn pretrain(
    mut params: PolicyParams,
    dataset: &Dataset,
    cfg: &PretrainConfig,
    rng: &Rng,
) -> Result<(PolicyParams, PretrainLog)> {
    if dataset.pairs.is_empty() {
        return Err(Error::InvalidArgument("pretraining needs a non-empty dataset".into()));
    }
    params.validate()?;
    let data = normalize_dataset(&params.norm, dataset);
    let layout = params.layout();
    let zeros_mask = vec![0.0; params.spec.horizon];
    let out_dim = params.spec.chunk_len() as f64;
    let batch_size = cfg.batch_size.max(1);
    let mut adam = Adam::new(cfg.adam);
    let total_steps = (cfg.epochs * data.len().div_ceil(batch_size)).max(1);
    let mut log = PretrainLog {
        epoch_loss: Vec::with_capacity(cfg.epochs),
    };

    for epoch in 0..cfg.epochs {
        let mut order_rng = rng.fork_path(&[epoch as u64, u64::MAX]);
        let order = shuffled(data.len(), &mut order_rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for (b, batch) in order.chunks(batch_size).enumerate() {
            let net = &params.net;
            let parts: Vec<Result<(NetGrads, f64)>> = batch
                .par_chunks(GRAD_GROUP)
                .enumerate()
                .map(|(g, group)| {
                    let mut acc = NetGrads::zeros_like(net);
                    let mut loss = 0.0;
                    for (k, &i) in group.iter().enumerate() {
                        let mut r = rng.fork_path(&[epoch as u64, b as u64, (g * GRAD_GROUP + k) as u64]);
                        let (obs_n, chunk_n) = &data[i];
                        let fs = make_flow_sample(chunk_n, &mut r);
                        let x = layout.assemble(&fs.state, obs_n, fs.s, &zeros_mask);
                        let (y, cache) = net.forward(&x)?;
                        let mut dy = Vec::with_capacity(y.len());
                        for (yi, ui) in y.iter().zip(&fs.target) {
                            let e = yi - ui;
                            loss += e * e / out_dim;
                            dy.push(2.0 * e / out_dim);
                        }
                        let (g, _) = net.backward(&cache, &dy)?;
                        acc.accumulate(&g, 1.0);
                    }
                    Ok((acc, loss))
                })
                .collect();
            let mut total = NetGrads::zeros_like(net);
            let mut batch_loss = 0.0;
            for part in parts {
                let (g, l) = part?;
                total.accumulate(&g, 1.0 / batch.len() as f64);
                batch_loss += l;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    loss: batch_loss,
                });
            }
            epoch_loss += batch_loss;
            seen += batch.len();
            adam.config.lr = cosine_lr(
                cfg.adam.lr,
                cfg.final_lr_fraction,
                adam.steps() as f64 / total_steps as f64,
            );
            apply_net_grads(&mut adam, &mut params.net, &total)?;
        }
        log.epoch_loss.push(epoch_loss / seen as f64);
    }
    Ok((params, log))
}

fn apply_net_grads(adam: &mut Adam, net: &mut DenseNet, grads: &NetGrads) -> Result<()> {
    let flat: Vec<&[f64]> = grads
        .layers
        .iter()
        .flat_map(|l| [l.weight.as_slice(), l.bias.as_slice()])
        .collect();
    let mut blocks = net.params_mut();
    adam.step(&mut blocks, &flat)
}

/// Mean flow-matching loss over a dataset with a fixed noise stream.
pub fn evaluate_fm_loss(params: &PolicyParams, dataset: &Dataset, rng: &Rng) -> Result<f64> {
    let data = normalize_dataset(&params.norm, dataset);
    let layout = params.layout();
    let zeros_mask = vec![0.0; params.spec.horizon];
    let mut total = 0.0;
    for (i, (obs_n, chunk_n)) in data.iter().enumerate() {
        let mut r = rng.fork(i as u64);
        let fs = make_flow_sample(chunk_n, &mut r);
        let y = params
            .net
            .predict(&layout.assemble(&fs.state, obs_n, fs.s, &zeros_mask))?;
        total += y.iter().zip(&fs.target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64;
    }
    Ok(total / data.len().max(1) as f64)
}
