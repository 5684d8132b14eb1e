//! Episode statistics and per-cell summaries: success, completion time and
//! action-stream kinematics split at chunk boundaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::runtime::EpisodeRecord;

/// Observation slots holding the robot velocity.
const VELOCITY_SLOTS: (usize, usize) = (2, 3);

/// Compact per-episode result; everything a summary needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub strategy: String,
    pub d: usize,
    pub h: usize,
    pub seed: u64,
    pub success: bool,
    pub collided: bool,
    pub completion_tick: usize,
    pub boundary_jump_sum: f64,
    pub boundary_count: usize,
    pub within_jump_sum: f64,
    pub within_count: usize,
    pub speed_sum: f64,
    pub accel_sum: f64,
    pub ticks: usize,
}

fn norm2(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Per-tick kinematics of one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct KinematicTrace {
    pub speed: Vec<f64>,
    /// `|v_t − v_{t−1}|`, zero at the first tick.
    pub accel: Vec<f64>,
    /// `|a_t − a_{t−1}|`, zero at the first tick.
    pub jump: Vec<f64>,
    /// Whether tick `t` switches to a different action source than `t − 1`.
    pub boundary: Vec<bool>,
}

pub fn kinematic_trace(record: &EpisodeRecord) -> KinematicTrace {
    let n = record.ticks.len();
    let mut out = KinematicTrace {
        speed: Vec::with_capacity(n),
        accel: Vec::with_capacity(n),
        jump: Vec::with_capacity(n),
        boundary: Vec::with_capacity(n),
    };
    let vel = |k: usize| {
        let o = &record.ticks[k].observation;
        [o[VELOCITY_SLOTS.0], o[VELOCITY_SLOTS.1]]
    };
    for (k, t) in record.ticks.iter().enumerate() {
        out.speed.push(norm2(vel(k), [0.0, 0.0]));
        if k == 0 {
            out.accel.push(0.0);
            out.jump.push(0.0);
            out.boundary.push(false);
        } else {
            let prev = &record.ticks[k - 1];
            out.accel.push(norm2(vel(k), vel(k - 1)));
            out.jump.push(norm2(t.action, prev.action));
            out.boundary.push(t.chunk != prev.chunk);
        }
    }
    out
}

/// Reduce a full trace to its statistics under a display label.
pub fn episode_stats(label: &str, record: &EpisodeRecord) -> EpisodeStats {
    let k = kinematic_trace(record);
    let mut s = EpisodeStats {
        strategy: label.to_string(),
        d: record.delay,
        h: record.exec_horizon,
        seed: record.seed,
        success: record.success,
        collided: record.collided,
        completion_tick: record.completion_tick,
        boundary_jump_sum: 0.0,
        boundary_count: 0,
        within_jump_sum: 0.0,
        within_count: 0,
        speed_sum: k.speed.iter().sum(),
        accel_sum: k.accel.iter().sum(),
        ticks: k.speed.len(),
    };
    for t in 1..k.jump.len() {
        if k.boundary[t] {
            s.boundary_jump_sum += k.jump[t];
            s.boundary_count += 1;
        } else {
            s.within_jump_sum += k.jump[t];
            s.within_count += 1;
        }
    }
    s
}

/// One row of a summary table. `h = None` marks an average over horizons.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub strategy: String,
    pub d: usize,
    pub h: Option<usize>,
    pub episodes: usize,
    pub success_rate: f64,
    /// Mean completion tick with failures counted at the episode cap.
    pub mean_ticks: f64,
    pub boundary_j: f64,
    pub within_j: f64,
    pub mean_speed: f64,
    pub mean_accel: f64,
}

fn ratio(sum: f64, count: usize) -> f64 {
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Summary of one (strategy, d, h) cell.
pub fn summarize(stats: &[EpisodeStats]) -> Result<MetricsSummary> {
    let first = stats
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot summarize zero episodes".into()))?;
    if stats
        .iter()
        .any(|s| s.strategy != first.strategy || s.d != first.d || s.h != first.h)
    {
        return Err(Error::InvalidArgument(
            "episodes from different cells in one summary".into(),
        ));
    }
    let n = stats.len();
    let sum = |f: &dyn Fn(&EpisodeStats) -> f64| stats.iter().map(f).sum::<f64>();
    let count = |f: &dyn Fn(&EpisodeStats) -> usize| stats.iter().map(f).sum::<usize>();
    let ticks = count(&|s| s.ticks);
    Ok(MetricsSummary {
        strategy: first.strategy.clone(),
        d: first.d,
        h: Some(first.h),
        episodes: n,
        success_rate: stats.iter().filter(|s| s.success).count() as f64 / n as f64,
        mean_ticks: sum(&|s| s.completion_tick as f64) / n as f64,
        boundary_j: ratio(sum(&|s| s.boundary_jump_sum), count(&|s| s.boundary_count)),
        within_j: ratio(sum(&|s| s.within_jump_sum), count(&|s| s.within_count)),
        mean_speed: ratio(sum(&|s| s.speed_sum), ticks),
        mean_accel: ratio(sum(&|s| s.accel_sum), ticks),
    })
}

/// Summary of raw episode traces (all from one cell).
pub fn compute_metrics(label: &str, records: &[EpisodeRecord]) -> Result<MetricsSummary> {
    let stats: Vec<EpisodeStats> = records.iter().map(|r| episode_stats(label, r)).collect();
    summarize(&stats)
}

/// Per-d row: unweighted mean of the per-h cell summaries.
pub fn average_over_horizons(cells: &[MetricsSummary]) -> Result<MetricsSummary> {
    let first = cells
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot average zero cells".into()))?;
    if cells.iter().any(|c| c.strategy != first.strategy || c.d != first.d) {
        return Err(Error::InvalidArgument(
            "cells from different strategies or delays".into(),
        ));
    }
    let n = cells.len() as f64;
    let mean = |f: fn(&MetricsSummary) -> f64| cells.iter().map(f).sum::<f64>() / n;
    Ok(MetricsSummary {
        strategy: first.strategy.clone(),
        d: first.d,
        h: None,
        episodes: cells.iter().map(|c| c.episodes).sum(),
        success_rate: mean(|c| c.success_rate),
        mean_ticks: mean(|c| c.mean_ticks),
        boundary_j: mean(|c| c.boundary_j),
        within_j: mean(|c| c.within_j),
        mean_speed: mean(|c| c.mean_speed),
        mean_accel: mean(|c| c.mean_accel),
    })
}

/// Summary CSV row with the documented column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: String,
    pub d: usize,
    /// Execution horizon, or `avg` for the mean over valid horizons.
    pub h_or_avg: String,
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_ticks: f64,
    #[serde(rename = "boundary_J")]
    pub boundary_j: f64,
    #[serde(rename = "within_J")]
    pub within_j: f64,
}

/// Fixed-precision rounding so CSV text is stable across platforms.
fn fixed(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

impl From<&MetricsSummary> for SummaryRow {
    fn from(m: &MetricsSummary) -> Self {
        Self {
            strategy: m.strategy.clone(),
            d: m.d,
            h_or_avg: m.h.map_or_else(|| "avg".to_string(), |h| h.to_string()),
            episodes: m.episodes,
            success_rate: fixed(m.success_rate),
            mean_ticks: fixed(m.mean_ticks),
            boundary_j: fixed(m.boundary_j),
            within_j: fixed(m.within_j),
        }
    }
}
