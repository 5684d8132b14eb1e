//! Masked action-chunk fine-tuning: prefix masks, the masked and residual
//! flow-matching losses, the self-conditioning curriculum, delay-interval
//! annealing and the adapter training loop.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdaptedPolicy, AdapterConfig, AdapterGrads};
use crate::envs::Dataset;
use crate::error::{check_dim, Error, Result};
use crate::numerics::{Adam, AdamConfig, Rng};
use crate::policy::{integrate_normalized, make_flow_sample, normalize_dataset, shuffled, PolicyParams, GRAD_GROUP};

/// Indicator `1[k ≥ d]` over chunk rows.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PrefixMask {
    delay: usize,
    bits: Vec<u8>,
}

impl PrefixMask {
    pub fn delay(&self) -> usize {
        self.delay
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn is_active(&self, k: usize) -> bool {
        self.bits[k] == 1
    }

    /// Row weights as floats, the form the losses consume.
    pub fn weights(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| b as f64).collect()
    }
}

pub fn prefix_mask(delay: usize, horizon: usize) -> Result<PrefixMask> {
    if horizon == 0 || delay >= horizon {
        return Err(Error::InvalidArgument(format!(
            "mask delay {delay} outside 0..={} for horizon {horizon}",
            horizon.saturating_sub(1)
        )));
    }
    Ok(PrefixMask {
        delay,
        bits: (0..horizon).map(|k| (k >= delay) as u8).collect(),
    })
}

fn check_loss_shapes(a: &[f64], b: &[f64], weights: &[f64], action_dim: usize) -> Result<()> {
    check_dim("flow estimate", b.len(), a.len())?;
    if action_dim == 0 {
        return Err(Error::InvalidArgument("action_dim must be >= 1".into()));
    }
    check_dim("mask length", a.len() / action_dim, weights.len())?;
    check_dim("flow length", weights.len() * action_dim, a.len())
}

fn denominator(weights: &[f64]) -> f64 {
    weights.iter().sum::<f64>().max(1.0)
}

/// Masked flow-matching loss for one chunk: row-weighted squared error
/// divided by `max(1, Σ mask)`. Flows are flat row-major `P·D` slices.
pub fn masked_fm_loss(u_hat: &[f64], u: &[f64], weights: &[f64], action_dim: usize) -> Result<f64> {
    check_loss_shapes(u_hat, u, weights, action_dim)?;
    let mut total = 0.0;
    for (k, &w) in weights.iter().enumerate() {
        let row: f64 = (0..action_dim)
            .map(|j| {
                let e = u_hat[k * action_dim + j] - u[k * action_dim + j];
                e * e
            })
            .sum();
        total += w * row;
    }
    Ok(total / denominator(weights))
}

/// Gradient of [`masked_fm_loss`] with respect to `u_hat`.
pub fn masked_fm_grad(u_hat: &[f64], u: &[f64], weights: &[f64], action_dim: usize) -> Result<Vec<f64>> {
    check_loss_shapes(u_hat, u, weights, action_dim)?;
    let den = denominator(weights);
    Ok(u_hat
        .iter()
        .zip(u)
        .enumerate()
        .map(|(i, (a, b))| 2.0 * weights[i / action_dim] * (a - b) / den)
        .collect())
}

/// Residual alignment loss, evaluated as written: the masked correction
/// `m(û − ũ)` is matched against the masked residual `m(u − ũ)`.
pub fn delta_loss(u_hat: &[f64], u_base: &[f64], u: &[f64], weights: &[f64], action_dim: usize) -> Result<f64> {
    check_loss_shapes(u_hat, u, weights, action_dim)?;
    check_dim("base flow", u.len(), u_base.len())?;
    let mut total = 0.0;
    for (i, ((a, t), b)) in u_hat.iter().zip(u).zip(u_base).enumerate() {
        let w = weights[i / action_dim];
        let e = w * (t - b) - w * (a - b);
        total += e * e;
    }
    Ok(total / denominator(weights))
}

/// Gradient of [`delta_loss`] with respect to `u_hat`.
pub fn delta_grad(u_hat: &[f64], u_base: &[f64], u: &[f64], weights: &[f64], action_dim: usize) -> Result<Vec<f64>> {
    check_loss_shapes(u_hat, u, weights, action_dim)?;
    check_dim("base flow", u.len(), u_base.len())?;
    let den = denominator(weights);
    Ok(u_hat
        .iter()
        .zip(u)
        .zip(u_base)
        .enumerate()
        .map(|(i, ((a, t), b))| {
            let w = weights[i / action_dim];
            let e = w * (t - b) - w * (a - b);
            -2.0 * w * e / den
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub masked: f64,
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            masked: 0.01,
            delta: 0.01,
        }
    }
}

pub fn total_loss(masked: f64, delta: f64, weights: LossWeights) -> f64 {
    weights.masked * masked + weights.delta * delta
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub masked: f64,
    pub delta: f64,
    pub total: f64,
    pub weights: LossWeights,
}

impl LossBreakdown {
    pub fn new(masked: f64, delta: f64, weights: LossWeights) -> Result<Self> {
        let total = total_loss(masked, delta, weights);
        if !(masked.is_finite() && delta.is_finite() && total.is_finite()) {
            return Err(Error::NonFinite("loss breakdown".into()));
        }
        Ok(Self {
            masked,
            delta,
            total,
            weights,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SigmaSchedule {
    PiecewiseLinear,
    Linear,
    Cosine,
    Step,
    ConstantOne,
    ConstantZero,
}

/// Length of the ground-truth warm-up plateau of the default schedule.
pub const WARMUP_FRACTION: f64 = 0.2;

impl SigmaSchedule {
    pub fn name(self) -> &'static str {
        match self {
            Self::PiecewiseLinear => "piecewise-linear",
            Self::Linear => "linear",
            Self::Cosine => "cosine",
            Self::Step => "step",
            Self::ConstantOne => "constant-1",
            Self::ConstantZero => "constant-0",
        }
    }
}

/// Probability of feeding the ground-truth chunk at a point of training.
pub fn curriculum_sigma(progress: f64, kind: SigmaSchedule) -> f64 {
    let p = progress.clamp(0.0, 1.0);
    match kind {
        SigmaSchedule::PiecewiseLinear => {
            if p < WARMUP_FRACTION {
                1.0
            } else {
                (1.0 - (p - WARMUP_FRACTION) / (1.0 - WARMUP_FRACTION)).max(0.0)
            }
        }
        SigmaSchedule::Linear => 1.0 - p,
        SigmaSchedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * p).cos()),
        SigmaSchedule::Step => {
            if p < 0.5 {
                1.0
            } else {
                0.0
            }
        }
        SigmaSchedule::ConstantOne => 1.0,
        SigmaSchedule::ConstantZero => 0.0,
    }
}

/// Returns the ground-truth chunk with probability `σ`, otherwise the
/// pretrained sample. The flag reports which one was picked.
pub fn self_condition_mix<'a>(gt: &'a [f64], sampled: &'a [f64], sigma: f64, rng: &mut Rng) -> (&'a [f64], bool) {
    if rng.bernoulli(sigma.clamp(0.0, 1.0)) {
        (gt, true)
    } else {
        (sampled, false)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DelayResample {
    Epoch,
    Batch,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskIntervalSchedule {
    pub q_max: usize,
    pub q_min: usize,
    /// Fraction of training over which the lower bound falls to `q_min`.
    pub anneal_fraction: f64,
}

impl Default for MaskIntervalSchedule {
    fn default() -> Self {
        Self {
            q_max: 4,
            q_min: 0,
            anneal_fraction: 0.5,
        }
    }
}

impl MaskIntervalSchedule {
    pub fn validate(&self, horizon: usize) -> Result<()> {
        if self.q_min > self.q_max || self.q_max + 1 > horizon {
            return Err(Error::InvalidArgument(format!(
                "mask interval needs 0 <= q_min ({}) <= q_max ({}) <= P-1 ({})",
                self.q_min,
                self.q_max,
                horizon.saturating_sub(1)
            )));
        }
        if !(self.anneal_fraction > 0.0 && self.anneal_fraction <= 1.0) {
            return Err(Error::InvalidArgument("anneal fraction must be in (0, 1]".into()));
        }
        Ok(())
    }

    /// Current lower bound of the delay interval.
    pub fn lower(&self, progress: f64) -> usize {
        let frac = (progress.clamp(0.0, 1.0) / self.anneal_fraction).min(1.0);
        let span = (self.q_max - self.q_min) as f64;
        (self.q_max as f64 - span * frac).round() as usize
    }

    /// Every delay the schedule can produce.
    pub fn delay_set(&self) -> Vec<usize> {
        (self.q_min..=self.q_max).collect()
    }
}

pub fn sample_delay(progress: f64, schedule: &MaskIntervalSchedule, rng: &mut Rng) -> usize {
    rng.int_inclusive(schedule.lower(progress), schedule.q_max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub mask_interval: MaskIntervalSchedule,
    pub sigma: SigmaSchedule,
    pub loss_weights: LossWeights,
    pub delay_resample: DelayResample,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            adam: AdamConfig {
                lr: 2e-3,
                ..AdamConfig::default()
            },
            mask_interval: MaskIntervalSchedule::default(),
            sigma: SigmaSchedule::PiecewiseLinear,
            loss_weights: LossWeights::default(),
            delay_resample: DelayResample::Batch,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub delays: Vec<usize>,
    pub sigma: f64,
    pub masked: f64,
    pub delta: f64,
    pub total: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain record") + "\n")
            .collect()
    }
}

struct SampleOut {
    grads: AdapterGrads,
    masked: f64,
    delta: f64,
}

/// Adapter fine-tuning on top of a frozen base policy.
pub fn remac_train(
    base: &PolicyParams,
    adapter_cfg: &AdapterConfig,
    cfg: &TrainConfig,
    dataset: &Dataset,
    rng: &Rng,
) -> Result<(AdaptedPolicy, TrainLog)> {
    if dataset.pairs.is_empty() {
        return Err(Error::InvalidArgument("fine-tuning needs a non-empty dataset".into()));
    }
    base.validate()?;
    cfg.mask_interval.validate(base.spec.horizon)?;
    let mut adapted = AdaptedPolicy::attach(base.clone(), adapter_cfg, &mut rng.fork(u64::MAX))?;
    let data = normalize_dataset(&base.norm, dataset);
    let spec = base.spec;
    let batch_size = cfg.batch_size.max(1);
    let n_batches = data.len().div_ceil(batch_size);
    let total_steps = (cfg.epochs * n_batches).max(1);
    let zeros_mask = vec![0.0; spec.horizon];
    let layout = base.layout();
    let mut adam = Adam::new(cfg.adam);
    let mut log = TrainLog::default();

    for epoch in 0..cfg.epochs {
        let mut order_rng = rng.fork_path(&[epoch as u64, u64::MAX]);
        let order = shuffled(data.len(), &mut order_rng);
        let mut delay_rng = rng.fork_path(&[epoch as u64, u64::MAX - 1]);
        let epoch_delay = sample_delay(epoch as f64 / cfg.epochs as f64, &cfg.mask_interval, &mut delay_rng);
        let mut delays = BTreeSet::new();
        let (mut sum_m, mut sum_d, mut sum_sigma, mut sum_norm) = (0.0, 0.0, 0.0, 0.0);

        for (b, batch) in order.chunks(batch_size).enumerate() {
            let step = epoch * n_batches + b;
            let progress = step as f64 / total_steps as f64;
            let delay = match cfg.delay_resample {
                DelayResample::Epoch => epoch_delay,
                DelayResample::Batch => sample_delay(progress, &cfg.mask_interval, &mut delay_rng),
            };
            delays.insert(delay);
            let mask = prefix_mask(delay, spec.horizon)?;
            let weights = mask.weights();
            let sigma = curriculum_sigma(progress, cfg.sigma);
            sum_sigma += sigma;

            let model = &adapted;
            let parts: Vec<Result<SampleOut>> = batch
                .par_chunks(GRAD_GROUP)
                .enumerate()
                .map(|(g, group)| {
                    let mut acc = model.zero_grads();
                    let (mut lm, mut ld) = (0.0, 0.0);
                    for (k, &i) in group.iter().enumerate() {
                        let mut r = rng.fork_path(&[epoch as u64, b as u64, (g * GRAD_GROUP + k) as u64]);
                        let (obs_n, gt) = &data[i];
                        let z: Vec<f64> = gt.iter().map(|_| r.normal()).collect();
                        let sampled = integrate_normalized(base, obs_n, &z, spec.integration_steps, &zeros_mask)?;
                        let (mixed, _) = self_condition_mix(gt, &sampled, sigma, &mut r);
                        let fs = make_flow_sample(mixed, &mut r);
                        let (u_hat, cache) = model.forward_train(&fs.state, obs_n, fs.s, Some(&mask))?;
                        let u_base = base
                            .net
                            .predict(&layout.assemble(&fs.state, obs_n, fs.s, &zeros_mask))?;
                        let d = spec.action_dim;
                        lm += masked_fm_loss(&u_hat, &fs.target, &weights, d)?;
                        ld += delta_loss(&u_hat, &u_base, &fs.target, &weights, d)?;
                        let gm = masked_fm_grad(&u_hat, &fs.target, &weights, d)?;
                        let gd = delta_grad(&u_hat, &u_base, &fs.target, &weights, d)?;
                        let dy: Vec<f64> = gm
                            .iter()
                            .zip(&gd)
                            .map(|(a, c)| cfg.loss_weights.masked * a + cfg.loss_weights.delta * c)
                            .collect();
                        acc.accumulate(&model.backward_train(&cache, &dy)?, 1.0);
                    }
                    Ok(SampleOut {
                        grads: acc,
                        masked: lm,
                        delta: ld,
                    })
                })
                .collect();

            let mut grads = adapted.zero_grads();
            let (mut bm, mut bd) = (0.0, 0.0);
            let scale = 1.0 / batch.len() as f64;
            for part in parts {
                let part = part?;
                grads.accumulate(&part.grads, scale);
                bm += part.masked;
                bd += part.delta;
            }
            let batch_total = total_loss(bm, bd, cfg.loss_weights) * scale;
            if !batch_total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    loss: batch_total,
                });
            }
            sum_m += bm;
            sum_d += bd;
            sum_norm += grads.norm();
            adapted.apply_grads(&mut adam, &grads)?;
        }
        let n = data.len() as f64;
        let (masked, delta) = (sum_m / n, sum_d / n);
        log.epochs.push(EpochRecord {
            epoch,
            delays: delays.into_iter().collect(),
            sigma: sum_sigma / n_batches as f64,
            masked,
            delta,
            total: total_loss(masked, delta, cfg.loss_weights),
            grad_norm: sum_norm / n_batches as f64,
        });
    }
    Ok((adapted, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_examples() {
        assert_eq!(prefix_mask(0, 4).unwrap().bits(), &[1, 1, 1, 1]);
        assert_eq!(prefix_mask(1, 3).unwrap().bits(), &[0, 1, 1]);
        assert_eq!(prefix_mask(2, 3).unwrap().bits(), &[0, 0, 1]);
        assert!(prefix_mask(3, 3).is_err());
        assert!(prefix_mask(0, 0).is_err());
    }

    #[test]
    fn masked_loss_examples() {
        let m = prefix_mask(1, 2).unwrap().weights();
        assert_eq!(masked_fm_loss(&[0.0, 0.0], &[1.0, 3.0], &m, 1).unwrap(), 9.0);
        assert_eq!(masked_fm_loss(&[1.0, 3.0], &[1.0, 3.0], &m, 1).unwrap(), 0.0);
        assert_eq!(masked_fm_loss(&[5.0, 1.0], &[1.0, 3.0], &[0.0, 0.0], 1).unwrap(), 0.0);
        assert!(masked_fm_loss(&[0.0; 3], &[0.0; 2], &m, 1).is_err());
        assert!(masked_fm_loss(&[0.0; 4], &[0.0; 4], &m, 1).is_err());
    }

    #[test]
    fn delta_loss_examples() {
        let m = prefix_mask(0, 2).unwrap().weights();
        let u = [1.0, -2.0, 0.5, 4.0];
        assert_eq!(delta_loss(&u, &[9.0, 9.0, 9.0, 9.0], &u, &m, 2).unwrap(), 0.0);
        let u_hat = [0.0, 1.0, 2.0, 3.0];
        let lm = masked_fm_loss(&u_hat, &u, &m, 2).unwrap();
        assert_eq!(delta_loss(&u_hat, &[0.0; 4], &u, &m, 2).unwrap(), lm);
    }

    #[test]
    fn total_loss_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss(0.0, 0.0, w), 0.0);
        assert!((total_loss(2.0, 2.0, w) - 0.04).abs() < 1e-15);
        let only_masked = LossWeights {
            masked: 0.01,
            delta: 0.0,
        };
        assert_eq!(total_loss(3.0, 100.0, only_masked), 0.03);
        assert!(LossBreakdown::new(f64::NAN, 0.0, w).is_err());
    }

    #[test]
    fn loss_gradients_match_differences() {
        let mut rng = Rng::new(3, 0);
        for d in 0..4 {
            let m = prefix_mask(d, 4).unwrap().weights();
            let u: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
            let ub: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
            let uh: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
            let f = |p: &[f64]| {
                (
                    masked_fm_loss(p, &u, &m, 2).unwrap() + 0.5 * delta_loss(p, &ub, &u, &m, 2).unwrap(),
                    masked_fm_grad(p, &u, &m, 2)
                        .unwrap()
                        .iter()
                        .zip(delta_grad(p, &ub, &u, &m, 2).unwrap())
                        .map(|(a, b)| a + 0.5 * b)
                        .collect(),
                )
            };
            assert!(crate::numerics::grad_check(f, &uh, 1e-6) < 1e-6);
        }
    }

    #[test]
    fn sigma_examples() {
        let pl = SigmaSchedule::PiecewiseLinear;
        assert_eq!(curriculum_sigma(0.1, pl), 1.0);
        assert_eq!(curriculum_sigma(1.0, pl), 0.0);
        assert!((curriculum_sigma(0.6, pl) - 0.5).abs() < 1e-12);
        for kind in [pl, SigmaSchedule::Linear, SigmaSchedule::Cosine, SigmaSchedule::Step] {
            assert_eq!(curriculum_sigma(0.0, kind), 1.0, "{}", kind.name());
            assert!(curriculum_sigma(1.0, kind).abs() < 1e-12, "{}", kind.name());
        }
        assert_eq!(curriculum_sigma(0.7, SigmaSchedule::ConstantOne), 1.0);
        assert_eq!(curriculum_sigma(0.0, SigmaSchedule::ConstantZero), 0.0);
    }

    #[test]
    fn mix_extremes_and_frequency() {
        let gt = [1.0, 2.0];
        let s = [3.0, 4.0];
        let mut rng = Rng::new(0, 3);
        for _ in 0..100 {
            assert_eq!(self_condition_mix(&gt, &s, 1.0, &mut rng).0, &gt);
            assert_eq!(self_condition_mix(&gt, &s, 0.0, &mut rng).0, &s);
        }
        let hits = (0..10_000)
            .filter(|_| self_condition_mix(&gt, &s, 0.5, &mut rng).1)
            .count();
        let f = hits as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&f), "{f}");
    }

    #[test]
    fn delay_schedule_examples() {
        let sched = MaskIntervalSchedule::default();
        let mut rng = Rng::new(1, 3);
        for _ in 0..200 {
            assert_eq!(sample_delay(0.0, &sched, &mut rng), 4);
        }
        let fixed = MaskIntervalSchedule {
            q_max: 2,
            q_min: 2,
            anneal_fraction: 0.5,
        };
        for _ in 0..200 {
            assert_eq!(sample_delay(0.7, &fixed, &mut rng), 2);
        }
        assert_eq!(sched.lower(0.25), 2);
        assert_eq!(sched.lower(0.9), 0);
        assert!(MaskIntervalSchedule { q_max: 8, ..sched }.validate(8).is_err());
        assert!(MaskIntervalSchedule { q_min: 5, ..sched }.validate(8).is_err());
    }

    #[test]
    fn delay_uniform_at_end_chi_square() {
        let sched = MaskIntervalSchedule::default();
        let mut rng = Rng::new(2, 3);
        let mut counts = [0usize; 5];
        let n = 10_000;
        for _ in 0..n {
            counts[sample_delay(1.0, &sched, &mut rng)] += 1;
        }
        let expected = n as f64 / 5.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 4 degrees of freedom, p = 0.01 critical value
        assert!(chi2 < 13.277, "chi2 {chi2} counts {counts:?}");
    }
}
