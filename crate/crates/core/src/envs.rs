//! Planar point-mass environments with scripted experts.
//!
//! Two variants share one double-integrator world in the arena `[-1, 1]²`:
//! `point-reach` (static goal that occasionally jumps) and `track-intercept`
//! (goal drifting with piecewise-constant velocity). An optional circular
//! obstacle sits between start and goal; the scripted expert passes it on the
//! left or on the right according to a per-episode coin, which gives the
//! demonstrations two latent modes.

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numerics::{Matrix, Rng};

pub const ARENA: f64 = 1.0;
pub const DT_ENV: f64 = 1.0;
pub const DRAG: f64 = 0.1;
pub const ACTION_DIM: usize = 2;
pub const OBS_DIM: usize = 14;

const MIN_START_GOAL: f64 = 0.5;
const MIN_START_GOAL_WITH_OBSTACLE: f64 = 0.9;
const SPAWN_BOX: f64 = 0.9;
// With an obstacle, starts sit in a band on the left and goals in a band on
// the right, so the obstacle always separates them.
const LANE_INNER: f64 = 0.6;
const LANE_OUTER: f64 = 0.85;
const LANE_HALF_WIDTH: f64 = 0.6;

fn goal_lane_point(rng: &mut Rng) -> V2 {
    [
        rng.uniform_range(LANE_INNER, LANE_OUTER),
        rng.uniform_range(-LANE_HALF_WIDTH, LANE_HALF_WIDTH),
    ]
}

type V2 = [f64; 2];

fn sub(a: V2, b: V2) -> V2 {
    [a[0] - b[0], a[1] - b[1]]
}
fn add(a: V2, b: V2) -> V2 {
    [a[0] + b[0], a[1] + b[1]]
}
fn scale(a: V2, s: f64) -> V2 {
    [a[0] * s, a[1] * s]
}
fn norm(a: V2) -> f64 {
    a[0].hypot(a[1])
}
fn perp_left(a: V2) -> V2 {
    [-a[1], a[0]]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    PointReach,
    TrackIntercept,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetourSide {
    Left,
    Right,
}

impl DetourSide {
    fn sign(self) -> f64 {
        match self {
            DetourSide::Left => 1.0,
            DetourSide::Right => -1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpertConfig {
    /// Cruise speed (arena units per tick).
    pub max_speed: f64,
    /// Distance below which the commanded speed ramps down linearly.
    pub slow_radius: f64,
    /// Velocity-tracking gain.
    pub gain: f64,
    /// Clearance added to the obstacle radius when planning a detour.
    pub margin: f64,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            max_speed: 0.04,
            slow_radius: 0.25,
            gain: 0.3,
            margin: 0.1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub variant: Variant,
    /// Std of the Gaussian velocity perturbation per tick.
    pub dyn_noise: f64,
    /// Per-tick probability that the goal teleports (point-reach).
    pub goal_jump_prob: f64,
    pub obstacle: bool,
    pub obstacle_radius_min: f64,
    pub obstacle_radius_max: f64,
    pub max_steps: usize,
    pub success_tol: f64,
    /// Per-tick probability that the goal picks a new drift velocity
    /// (track-intercept).
    pub goal_turn_prob: f64,
    pub goal_max_speed: f64,
    pub expert: ExpertConfig,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self::point_reach()
    }
}

impl EnvConfig {
    pub fn point_reach() -> Self {
        Self {
            variant: Variant::PointReach,
            dyn_noise: 0.004,
            goal_jump_prob: 0.01,
            obstacle: true,
            obstacle_radius_min: 0.1,
            obstacle_radius_max: 0.16,
            max_steps: 300,
            success_tol: 0.05,
            goal_turn_prob: 0.0,
            goal_max_speed: 0.0,
            expert: ExpertConfig::default(),
        }
    }

    pub fn track_intercept() -> Self {
        Self {
            variant: Variant::TrackIntercept,
            goal_jump_prob: 0.0,
            goal_turn_prob: 0.05,
            goal_max_speed: 0.012,
            ..Self::point_reach()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} = {p} is not a probability")))
            }
        };
        prob("goal_jump_prob", self.goal_jump_prob)?;
        prob("goal_turn_prob", self.goal_turn_prob)?;
        if !(self.success_tol > 0.0) {
            return Err(Error::InvalidArgument("success_tol must be > 0".into()));
        }
        if !(self.dyn_noise >= 0.0) {
            return Err(Error::InvalidArgument("dyn_noise must be >= 0".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidArgument("max_steps must be >= 1".into()));
        }
        if self.obstacle && !(0.0 < self.obstacle_radius_min && self.obstacle_radius_min <= self.obstacle_radius_max) {
            return Err(Error::InvalidArgument("bad obstacle radius range".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: V2,
    pub radius: f64,
}

#[derive(Clone, Debug)]
pub struct EnvState {
    pub position: V2,
    pub velocity: V2,
    pub goal: V2,
    pub goal_velocity: V2,
    pub obstacle: Option<Obstacle>,
    pub mode: DetourSide,
    pub tick: usize,
    pub cfg: EnvConfig,
    pub rng: Rng,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepOutcome {
    pub done: bool,
    pub success: bool,
    pub collided: bool,
}

fn in_box(p: V2, b: f64) -> bool {
    p[0].abs() <= b && p[1].abs() <= b
}

pub fn env_reset(cfg: &EnvConfig, seed: u64) -> EnvState {
    let mut rng = Rng::new(seed, crate::numerics::rng::streams::DATA);
    let min_dist = if cfg.obstacle {
        MIN_START_GOAL_WITH_OBSTACLE
    } else {
        MIN_START_GOAL
    };
    loop {
        let (start, goal) = if cfg.obstacle {
            let start = [
                rng.uniform_range(-LANE_OUTER, -LANE_INNER),
                rng.uniform_range(-LANE_HALF_WIDTH, LANE_HALF_WIDTH),
            ];
            (start, goal_lane_point(&mut rng))
        } else {
            let mut draw = || {
                [
                    rng.uniform_range(-SPAWN_BOX, SPAWN_BOX),
                    rng.uniform_range(-SPAWN_BOX, SPAWN_BOX),
                ]
            };
            (draw(), draw())
        };
        let gap = sub(goal, start);
        if norm(gap) < min_dist {
            continue;
        }
        let obstacle = if cfg.obstacle {
            let frac = rng.uniform_range(0.4, 0.6);
            let jitter = rng.uniform_range(-0.04, 0.04);
            let dir = scale(gap, 1.0 / norm(gap));
            let center = add(add(start, scale(gap, frac)), scale(perp_left(dir), jitter));
            let radius = rng.uniform_range(cfg.obstacle_radius_min, cfg.obstacle_radius_max);
            let clearance = radius + cfg.expert.margin + 0.05;
            if norm(sub(start, center)) < clearance || norm(sub(goal, center)) < clearance {
                continue;
            }
            Some(Obstacle { center, radius })
        } else {
            None
        };
        let goal_velocity = match cfg.variant {
            Variant::TrackIntercept => random_drift(&mut rng, cfg.goal_max_speed),
            Variant::PointReach => [0.0, 0.0],
        };
        let mode = if rng.bernoulli(0.5) {
            DetourSide::Left
        } else {
            DetourSide::Right
        };
        return EnvState {
            position: start,
            velocity: [0.0, 0.0],
            goal,
            goal_velocity,
            obstacle,
            mode,
            tick: 0,
            cfg: *cfg,
            rng,
        };
    }
}

fn random_drift(rng: &mut Rng, max_speed: f64) -> V2 {
    let angle = rng.uniform_range(0.0, std::f64::consts::TAU);
    let speed = rng.uniform_range(0.0, max_speed);
    [speed * angle.cos(), speed * angle.sin()]
}

impl EnvState {
    pub fn observation(&self) -> Vec<f64> {
        let rel_goal = sub(self.goal, self.position);
        let (rel_obs, radius, flag) = match self.obstacle {
            Some(o) => (sub(o.center, self.position), o.radius, 1.0),
            None => ([0.0, 0.0], 0.0, 0.0),
        };
        vec![
            self.position[0],
            self.position[1],
            self.velocity[0],
            self.velocity[1],
            self.goal[0],
            self.goal[1],
            rel_goal[0],
            rel_goal[1],
            self.goal_velocity[0],
            self.goal_velocity[1],
            rel_obs[0],
            rel_obs[1],
            radius,
            flag,
        ]
    }

    pub fn distance_to_goal(&self) -> f64 {
        norm(sub(self.goal, self.position))
    }

    fn collides(&self) -> bool {
        self.obstacle
            .is_some_and(|o| norm(sub(self.position, o.center)) < o.radius)
    }

    fn blocked(&self, from: V2, to: V2) -> Option<Obstacle> {
        let o = self.obstacle?;
        let inflated = o.radius + self.cfg.expert.margin;
        let seg = sub(to, from);
        let len2 = seg[0] * seg[0] + seg[1] * seg[1];
        let s = if len2 > 0.0 {
            ((o.center[0] - from[0]) * seg[0] + (o.center[1] - from[1]) * seg[1]) / len2
        } else {
            0.0
        };
        let closest = add(from, scale(seg, s.clamp(0.0, 1.0)));
        (norm(sub(closest, o.center)) < inflated).then_some(o)
    }

    /// Point the expert is currently steering toward.
    pub fn expert_waypoint(&self) -> V2 {
        let ex = &self.cfg.expert;
        let mut target = self.goal;
        if self.cfg.variant == Variant::TrackIntercept {
            let lead = (self.distance_to_goal() / ex.max_speed).min(20.0);
            target = add(target, scale(self.goal_velocity, lead));
            target = [
                target[0].clamp(-SPAWN_BOX, SPAWN_BOX),
                target[1].clamp(-SPAWN_BOX, SPAWN_BOX),
            ];
        }
        if let Some(o) = self.blocked(self.position, target) {
            let dir = sub(target, self.position);
            let n = norm(dir).max(1e-9);
            let side = scale(perp_left(scale(dir, 1.0 / n)), self.mode.sign());
            target = add(o.center, scale(side, o.radius + ex.margin + 0.05));
        }
        target
    }
}

/// Scripted expert: velocity tracking toward the current waypoint with drag
/// compensation.
pub fn expert_action(state: &EnvState) -> [f64; 2] {
    let ex = &state.cfg.expert;
    let err = sub(state.expert_waypoint(), state.position);
    let dist = norm(err);
    let speed = ex.max_speed * (dist / ex.slow_radius).min(1.0);
    let desired = if dist > 1e-12 {
        scale(err, speed / dist)
    } else {
        [0.0, 0.0]
    };
    let a = add(
        scale(sub(desired, state.velocity), ex.gain),
        scale(state.velocity, DRAG),
    );
    [a[0].clamp(-1.0, 1.0), a[1].clamp(-1.0, 1.0)]
}

pub fn env_step(state: &mut EnvState, action: &[f64]) -> Result<StepOutcome> {
    check_dim("action", ACTION_DIM, action.len())?;
    let a = [action[0].clamp(-1.0, 1.0), action[1].clamp(-1.0, 1.0)];
    let cfg = state.cfg;

    let mut pos = add(state.position, scale(state.velocity, DT_ENV));
    let mut vel = add(state.velocity, scale(sub(a, scale(state.velocity, DRAG)), DT_ENV));
    if cfg.dyn_noise > 0.0 {
        vel[0] += cfg.dyn_noise * state.rng.normal();
        vel[1] += cfg.dyn_noise * state.rng.normal();
    }
    for k in 0..2 {
        if pos[k].abs() > ARENA {
            pos[k] = pos[k].clamp(-ARENA, ARENA);
            vel[k] = 0.0;
        }
    }
    state.position = pos;
    state.velocity = vel;

    match cfg.variant {
        Variant::PointReach => {
            if cfg.goal_jump_prob > 0.0 && state.rng.bernoulli(cfg.goal_jump_prob) {
                state.goal = sample_free_point(state);
            }
        }
        Variant::TrackIntercept => {
            if state.rng.bernoulli(cfg.goal_turn_prob) {
                state.goal_velocity = random_drift(&mut state.rng, cfg.goal_max_speed);
            }
            let mut g = add(state.goal, state.goal_velocity);
            for k in 0..2 {
                if g[k].abs() > SPAWN_BOX {
                    g[k] = g[k].clamp(-SPAWN_BOX, SPAWN_BOX);
                    state.goal_velocity[k] = -state.goal_velocity[k];
                }
            }
            state.goal = g;
        }
    }
    state.tick += 1;

    if state.collides() {
        return Ok(StepOutcome {
            done: true,
            success: false,
            collided: true,
        });
    }
    let success = state.distance_to_goal() < cfg.success_tol;
    Ok(StepOutcome {
        done: success || state.tick >= cfg.max_steps,
        success,
        collided: false,
    })
}

fn sample_free_point(state: &mut EnvState) -> V2 {
    loop {
        let p = if state.obstacle.is_some() {
            goal_lane_point(&mut state.rng)
        } else {
            [
                state.rng.uniform_range(-SPAWN_BOX, SPAWN_BOX),
                state.rng.uniform_range(-SPAWN_BOX, SPAWN_BOX),
            ]
        };
        let clear = state
            .obstacle
            .is_none_or(|o| norm(sub(p, o.center)) > o.radius + state.cfg.expert.margin + 0.05);
        if clear && in_box(p, SPAWN_BOX) {
            return p;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub observations: Vec<Vec<f64>>,
    pub actions: Vec<[f64; 2]>,
    pub seed: u64,
    pub variant: Variant,
    pub mode: DetourSide,
}

impl Demonstration {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Roll out the expert. Returns the demonstration and whether it succeeded.
pub fn expert_rollout(cfg: &EnvConfig, seed: u64) -> Result<(Demonstration, StepOutcome)> {
    let mut state = env_reset(cfg, seed);
    let mut demo = Demonstration {
        observations: Vec::new(),
        actions: Vec::new(),
        seed,
        variant: cfg.variant,
        mode: state.mode,
    };
    loop {
        let obs = state.observation();
        let a = expert_action(&state);
        let out = env_step(&mut state, &a)?;
        demo.observations.push(obs);
        demo.actions.push(a);
        if out.done {
            return Ok((demo, out));
        }
    }
}

/// One supervision pair: observation and the next `P` expert actions.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkPair {
    pub observation: Vec<f64>,
    /// `P × D`.
    pub actions: Matrix,
    /// Number of trailing rows that repeat the final action.
    pub padded: u8,
}

/// Stride-1 chunk extraction with tail padding by repeating the last action.
pub fn chunk_demonstration(demo: &Demonstration, horizon: usize) -> Result<Vec<ChunkPair>> {
    if horizon == 0 || horizon > u8::MAX as usize {
        return Err(Error::InvalidArgument(format!(
            "prediction horizon {horizon} out of range"
        )));
    }
    let Some(last) = demo.actions.last().copied() else {
        return Ok(Vec::new());
    };
    let len = demo.len();
    Ok((0..len)
        .map(|t| {
            let actions = Matrix::from_fn(horizon, ACTION_DIM, |k, j| {
                demo.actions.get(t + k).copied().unwrap_or(last)[j]
            });
            ChunkPair {
                observation: demo.observations[t].clone(),
                actions,
                padded: (t + horizon).saturating_sub(len) as u8,
            }
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema_version: u32,
    pub env: EnvConfig,
    pub horizon: usize,
    pub action_dim: usize,
    pub obs_dim: usize,
    pub seed: u64,
    pub episodes: usize,
    pub attempted: usize,
    pub pairs: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub pairs: Vec<ChunkPair>,
}

pub const DATASET_SCHEMA_VERSION: u32 = 1;
const MAX_EXPERT_FAILURE_RATE: f64 = 0.2;

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Roll out `n_episodes` expert episodes and chunk the successful ones.
/// Values are rounded to `f32` so the on-disk form is lossless.
pub fn generate_dataset(cfg: &EnvConfig, n_episodes: usize, horizon: usize, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    if n_episodes == 0 {
        return Err(Error::InvalidArgument("n_episodes must be >= 1".into()));
    }
    let base = Rng::new(seed, crate::numerics::rng::streams::DATA);
    let mut pairs = Vec::new();
    let mut kept = 0;
    for i in 0..n_episodes {
        let ep_seed = base.fork(i as u64).next_u64();
        let (mut demo, outcome) = expert_rollout(cfg, ep_seed)?;
        if !outcome.success {
            continue;
        }
        kept += 1;
        for o in &mut demo.observations {
            o.iter_mut().for_each(|v| *v = round_f32(*v));
        }
        for a in &mut demo.actions {
            a.iter_mut().for_each(|v| *v = round_f32(*v));
        }
        pairs.extend(chunk_demonstration(&demo, horizon)?);
    }
    let failures = n_episodes - kept;
    let rate = failures as f64 / n_episodes as f64;
    if rate > MAX_EXPERT_FAILURE_RATE {
        return Err(Error::ExpertFailure {
            rate,
            limit: MAX_EXPERT_FAILURE_RATE,
            failures,
            attempts: n_episodes,
        });
    }
    Ok(Dataset {
        header: DatasetHeader {
            schema_version: DATASET_SCHEMA_VERSION,
            env: *cfg,
            horizon,
            action_dim: ACTION_DIM,
            obs_dim: OBS_DIM,
            seed,
            episodes: kept,
            attempted: n_episodes,
            pairs: pairs.len(),
        },
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> EnvConfig {
        EnvConfig {
            dyn_noise: 0.0,
            goal_jump_prob: 0.0,
            ..EnvConfig::point_reach()
        }
    }

    #[test]
    fn reset_is_deterministic() {
        let cfg = EnvConfig::point_reach();
        let a = env_reset(&cfg, 17);
        let b = env_reset(&cfg, 17);
        assert_eq!(a.position, b.position);
        assert_eq!(a.goal, b.goal);
        assert_eq!(a.obstacle, b.obstacle);
        assert_eq!(a.mode, b.mode);
    }

    #[test]
    fn resets_stay_in_arena() {
        for variant in [EnvConfig::point_reach(), EnvConfig::track_intercept()] {
            for seed in 0..1000 {
                let s = env_reset(&variant, seed);
                assert!(in_box(s.position, ARENA) && in_box(s.goal, ARENA));
                assert!(norm(sub(s.goal, s.position)) >= MIN_START_GOAL);
            }
        }
    }

    #[test]
    fn goal_constant_without_jumps() {
        let cfg = quiet();
        let mut s = env_reset(&cfg, 3);
        let g = s.goal;
        for _ in 0..100 {
            env_step(&mut s, &[0.01, -0.01]).unwrap();
            assert_eq!(s.goal, g);
        }
    }

    #[test]
    fn zero_action_at_rest_stays_put() {
        let cfg = quiet();
        let mut s = env_reset(&cfg, 5);
        let p = s.position;
        env_step(&mut s, &[0.0, 0.0]).unwrap();
        assert_eq!(s.position, p);
    }

    #[test]
    fn success_at_goal() {
        let cfg = quiet();
        let mut s = env_reset(&cfg, 6);
        s.position = s.goal;
        let out = env_step(&mut s, &[0.0, 0.0]).unwrap();
        assert!(out.success && out.done && !out.collided);
    }

    #[test]
    fn collision_is_a_failure() {
        let cfg = quiet();
        let mut s = env_reset(&cfg, 8);
        let o = s.obstacle.unwrap();
        s.position = o.center;
        s.goal = o.center;
        let out = env_step(&mut s, &[0.0, 0.0]).unwrap();
        assert!(out.done && out.collided && !out.success);
    }

    #[test]
    fn noiseless_dynamics_are_deterministic() {
        let cfg = EnvConfig {
            goal_jump_prob: 0.0,
            dyn_noise: 0.0,
            ..EnvConfig::track_intercept()
        };
        let mut a = env_reset(&cfg, 2);
        let mut b = env_reset(&cfg, 2);
        b.rng = Rng::new(999, 999);
        let actions = [[0.01, 0.0], [0.0, 0.02], [-0.03, 0.01]];
        for act in actions.iter().cycle().take(30) {
            env_step(&mut a, act).unwrap();
            env_step(&mut b, act).unwrap();
        }
        assert_eq!(a.position, b.position);
        assert_eq!(a.velocity, b.velocity);
    }

    #[test]
    fn expert_idle_at_goal() {
        let mut s = env_reset(&quiet(), 1);
        s.position = s.goal;
        s.velocity = [0.0, 0.0];
        let a = expert_action(&s);
        assert!(norm(a) < 1e-12);
    }

    #[test]
    fn expert_heads_right_toward_goal() {
        let cfg = EnvConfig {
            obstacle: false,
            ..quiet()
        };
        let mut s = env_reset(&cfg, 1);
        s.position = [-0.5, 0.2];
        s.goal = [0.5, 0.2];
        s.velocity = [0.0, 0.0];
        let a = expert_action(&s);
        assert!(a[0] > 0.0);
        assert_eq!(a[1], 0.0);
    }

    #[test]
    fn opposite_modes_mirror_around_centered_obstacle() {
        let cfg = quiet();
        let lateral = |mode| {
            let mut s = env_reset(&cfg, 0);
            s.position = [-0.6, 0.0];
            s.velocity = [0.0, 0.0];
            s.goal = [0.6, 0.0];
            s.obstacle = Some(Obstacle {
                center: [0.0, 0.0],
                radius: 0.15,
            });
            s.mode = mode;
            let mut ys = Vec::new();
            for _ in 0..60 {
                let a = expert_action(&s);
                let out = env_step(&mut s, &a).unwrap();
                ys.push(s.position[1]);
                assert!(!out.collided);
                if out.done {
                    break;
                }
            }
            ys
        };
        let left = lateral(DetourSide::Left);
        let right = lateral(DetourSide::Right);
        assert_eq!(left.len(), right.len());
        let peak = left.iter().cloned().fold(0.0, f64::max);
        assert!(peak > 0.15, "left detour should pass above the obstacle: {peak}");
        for (l, r) in left.iter().zip(&right) {
            assert!((l + r).abs() < 1e-12, "{l} vs {r}");
        }
    }

    #[test]
    fn chunking_counts_and_padding() {
        let demo = Demonstration {
            observations: (0..10).map(|i| vec![i as f64]).collect(),
            actions: (0..10).map(|i| [i as f64, -(i as f64)]).collect(),
            seed: 0,
            variant: Variant::PointReach,
            mode: DetourSide::Left,
        };
        let pairs = chunk_demonstration(&demo, 8).unwrap();
        assert_eq!(pairs.len(), 10);
        let padded = pairs.iter().filter(|p| p.padded > 0).count();
        assert_eq!(padded, 7);
        let last = &pairs[9];
        assert_eq!(last.padded, 7);
        assert!((0..8).all(|k| last.actions.row(k) == [9.0, -9.0]));

        let single = chunk_demonstration(&demo, 1).unwrap();
        for (t, p) in single.iter().enumerate() {
            assert_eq!(p.actions.row(0), demo.actions[t]);
            assert_eq!(p.padded, 0);
        }
    }

    #[test]
    fn noiseless_replay_reproduces_success() {
        let cfg = quiet();
        for seed in 0..20 {
            let (demo, out) = expert_rollout(&cfg, seed).unwrap();
            assert!(out.success, "seed {seed}");
            let mut s = env_reset(&cfg, seed);
            let mut last = None;
            for a in &demo.actions {
                last = Some(env_step(&mut s, a).unwrap());
            }
            assert!(last.unwrap().success);
        }
    }

    #[test]
    fn dataset_is_deterministic() {
        let cfg = EnvConfig::point_reach();
        let a = generate_dataset(&cfg, 5, 8, 11).unwrap();
        let b = generate_dataset(&cfg, 5, 8, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.pairs.iter().all(|p| p.actions.shape() == (8, 2)));
    }

    #[test]
    fn misconfigured_env_fails_generation() {
        let cfg = EnvConfig {
            max_steps: 3,
            ..EnvConfig::point_reach()
        };
        assert!(matches!(
            generate_dataset(&cfg, 10, 4, 0),
            Err(Error::ExpertFailure { .. })
        ));
    }
}
