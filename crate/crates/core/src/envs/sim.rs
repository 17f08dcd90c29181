//! 2D point-mass tasks: a target on a circular orbit, a goal behind a wall
//! with two gaps, and a static reach target.

use std::f64::consts::TAU;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_for, Purpose};

/// Frames in the observation history.
pub const HISTORY: usize = 4;
/// Per-frame features: agent position, agent velocity, target position.
pub const FRAME_DIM: usize = 6;
pub const ACTION_DIM: usize = 2;
/// Length of every observation vector.
pub const OBS_DIM: usize = HISTORY * FRAME_DIM + ACTION_DIM;
/// Throughput window in controller steps.
pub const THROUGHPUT_WINDOW: usize = 256;

const ARENA: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    MovingTarget,
    Fork,
    StaticReach,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::MovingTarget => "moving_target",
            EnvKind::Fork => "fork",
            EnvKind::StaticReach => "static_reach",
        }
    }
}

/// Wall band `|y| < wall_half_width` with gaps centred at `x = ±gap_x`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForkGeometry {
    pub wall_half_width: f64,
    pub gap_x: f64,
    pub gap_half_width: f64,
    pub start: [f64; 2],
    pub goal: [f64; 2],
    /// Below this height the expert climbs straight up before committing.
    pub decision_y: f64,
}

impl Default for ForkGeometry {
    fn default() -> Self {
        ForkGeometry {
            wall_half_width: 0.03,
            gap_x: 0.5,
            gap_half_width: 0.15,
            start: [0.0, -0.8],
            goal: [0.0, 0.7],
            decision_y: -0.45,
        }
    }
}

/// PD gains of the scripted expert.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertGains {
    pub kp: f64,
    pub kd: f64,
    /// Controller steps the tracked target point is advanced by.
    pub lookahead: usize,
}

/// Simulation constants of one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub env: EnvKind,
    /// Controller period in simulated seconds.
    pub dt: f64,
    pub action_noise_std: f64,
    pub episode_len: usize,
    /// Angular speed of the orbiting target (rad/s).
    pub target_speed: f64,
    pub orbit_radius: f64,
    pub success_radius: f64,
    pub success_hold: usize,
    /// Acceleration at full actuation.
    pub accel: f64,
    /// Per-step velocity retention factor.
    pub damping: f64,
    pub expert: ExpertGains,
    pub fork: ForkGeometry,
    pub seed: u64,
}

impl EnvConfig {
    /// Shipped constants for each task.
    pub fn preset(env: EnvKind) -> Self {
        let base = EnvConfig {
            env,
            dt: 0.05,
            action_noise_std: 0.1,
            episode_len: THROUGHPUT_WINDOW,
            target_speed: 0.0,
            orbit_radius: 0.5,
            success_radius: 0.08,
            success_hold: 10,
            accel: 3.0,
            damping: 0.85,
            expert: ExpertGains {
                kp: 15.0,
                kd: 3.0,
                lookahead: 0,
            },
            fork: ForkGeometry::default(),
            seed: 0,
        };
        match env {
            EnvKind::MovingTarget => EnvConfig {
                target_speed: 1.2,
                ..base
            },
            EnvKind::Fork => EnvConfig {
                success_radius: 0.1,
                success_hold: 3,
                expert: ExpertGains {
                    kp: 8.0,
                    kd: 2.5,
                    lookahead: 0,
                },
                ..base
            },
            EnvKind::StaticReach => base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("env.dt", self.dt),
            ("env.success_radius", self.success_radius),
            ("env.accel", self.accel),
            ("env.orbit_radius", self.orbit_radius),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if !(self.action_noise_std >= 0.0 && self.action_noise_std.is_finite()) {
            return Err(Error::config("env.action_noise_std", "must be >= 0"));
        }
        if !(self.target_speed >= 0.0 && self.target_speed.is_finite()) {
            return Err(Error::config("env.target_speed", "must be >= 0"));
        }
        if !(self.damping > 0.0 && self.damping < 1.0) {
            return Err(Error::config("env.damping", "must lie in (0, 1)"));
        }
        if self.episode_len == 0 {
            return Err(Error::config("env.episode_len", "must be positive"));
        }
        if self.success_hold == 0 {
            return Err(Error::config("env.success_hold", "must be positive"));
        }
        let f = &self.fork;
        if !(f.wall_half_width > 0.0 && f.gap_half_width > 0.0 && f.gap_x - f.gap_half_width > 0.0) {
            return Err(Error::config("env.fork", "gaps must be disjoint and the wall non-empty"));
        }
        Ok(())
    }

    /// Agent speed at which full actuation is balanced by damping.
    pub fn terminal_speed(&self) -> f64 {
        self.accel * self.dt / (1.0 - self.damping)
    }
}

/// Outcome of one controller step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepOutcome {
    /// The episode ended early (fork wall contact).
    pub done: bool,
    /// A task was completed on this step.
    pub success: bool,
}

/// Full simulator state, including its private noise stream.
#[derive(Clone, Debug)]
pub struct EnvState {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
    pub target: [f64; 2],
    /// Orbit phase of the moving target; 0 for the other tasks.
    pub phase: f64,
    /// Fork only: which gap the current task's expert uses (-1 or +1).
    pub side: i8,
    pub hold: usize,
    pub completed: usize,
    pub steps: usize,
    pub crashed: bool,
    pub prev_action: [f64; 2],
    history: Vec<[f64; FRAME_DIM]>,
    rng: ChaCha8Rng,
}

fn orbit(cfg: &EnvConfig, phase: f64) -> [f64; 2] {
    [cfg.orbit_radius * phase.cos(), cfg.orbit_radius * phase.sin()]
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

impl EnvState {
    /// Deterministic initial state for `seed`.
    pub fn reset(cfg: &EnvConfig, seed: u64) -> Self {
        let mut rng = stream_for(cfg.seed, Purpose::EnvReset, &[seed]);
        let mut st = EnvState {
            pos: [0.0; 2],
            vel: [0.0; 2],
            target: [0.0; 2],
            phase: 0.0,
            side: 1,
            hold: 0,
            completed: 0,
            steps: 0,
            crashed: false,
            prev_action: [0.0; 2],
            history: Vec::with_capacity(HISTORY),
            rng: stream_for(cfg.seed, Purpose::EnvNoise, &[seed]),
        };
        match cfg.env {
            EnvKind::MovingTarget => {
                st.pos = [rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8)];
                st.phase = rng.gen_range(0.0..TAU);
                st.target = orbit(cfg, st.phase);
            }
            EnvKind::StaticReach => {
                st.pos = [rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8)];
                st.target = [rng.gen_range(-0.7..0.7), rng.gen_range(-0.7..0.7)];
            }
            EnvKind::Fork => st.fork_restart(cfg, fork_start(cfg, &mut rng)),
        }
        st.history = vec![st.frame(); HISTORY];
        st
    }

    fn fork_restart(&mut self, cfg: &EnvConfig, (pos, side): ([f64; 2], i8)) {
        self.pos = pos;
        self.vel = [0.0; 2];
        self.target = cfg.fork.goal;
        self.side = side;
    }

    fn frame(&self) -> [f64; FRAME_DIM] {
        [
            self.pos[0],
            self.pos[1],
            self.vel[0],
            self.vel[1],
            self.target[0],
            self.target[1],
        ]
    }

    /// Oldest frame first, then the previous action.
    pub fn observation(&self) -> Vec<f64> {
        let mut obs = Vec::with_capacity(OBS_DIM);
        for f in &self.history {
            obs.extend_from_slice(f);
        }
        obs.extend_from_slice(&self.prev_action);
        obs
    }

    pub fn speed(&self) -> f64 {
        self.vel[0].hypot(self.vel[1])
    }

    /// Advances the simulation by one controller step.
    pub fn step(&mut self, cfg: &EnvConfig, action: [f64; 2]) -> Result<StepOutcome> {
        if action.iter().any(|a| !(-1.0..=1.0).contains(a)) {
            return Err(Error::contract(format!("action {action:?} outside [-1, 1]")));
        }
        if self.crashed {
            return Err(Error::contract("step after episode end"));
        }
        let mut noisy = [0.0; 2];
        for (n, a) in noisy.iter_mut().zip(action) {
            let e: f64 = self.rng.sample(StandardNormal);
            *n = (a + cfg.action_noise_std * e).clamp(-1.0, 1.0);
        }
        let before = self.pos;
        for i in 0..2 {
            self.vel[i] = cfg.damping * self.vel[i] + cfg.accel * cfg.dt * noisy[i];
            let p = self.pos[i] + cfg.dt * self.vel[i];
            if p.abs() > ARENA {
                self.pos[i] = p.clamp(-ARENA, ARENA);
                self.vel[i] = 0.0;
            } else {
                self.pos[i] = p;
            }
        }
        self.prev_action = action;
        self.steps += 1;
        let mut out = StepOutcome::default();
        match cfg.env {
            EnvKind::MovingTarget => {
                self.phase = (self.phase + cfg.target_speed * cfg.dt).rem_euclid(TAU);
                self.target = orbit(cfg, self.phase);
            }
            EnvKind::Fork => {
                if hits_wall(&cfg.fork, before, self.pos) {
                    self.crashed = true;
                    out.done = true;
                }
            }
            EnvKind::StaticReach => {}
        }
        if !out.done {
            if dist(self.pos, self.target) < cfg.success_radius {
                self.hold += 1;
                if self.hold >= cfg.success_hold {
                    out.success = true;
                    self.completed += 1;
                    self.hold = 0;
                    self.new_task(cfg);
                }
            } else {
                self.hold = 0;
            }
        }
        self.history.remove(0);
        self.history.push(self.frame());
        Ok(out)
    }

    /// Re-randomizes the task after a success; the episode continues.
    fn new_task(&mut self, cfg: &EnvConfig) {
        match cfg.env {
            EnvKind::MovingTarget => {
                self.phase = self.rng.gen_range(0.0..TAU);
                self.target = orbit(cfg, self.phase);
            }
            EnvKind::StaticReach => {
                self.target = [self.rng.gen_range(-0.7..0.7), self.rng.gen_range(-0.7..0.7)];
            }
            EnvKind::Fork => {
                let start = fork_start(cfg, &mut self.rng);
                self.fork_restart(cfg, start);
            }
        }
    }

    /// Clean action of the scripted expert.
    pub fn expert_action(&self, cfg: &EnvConfig) -> [f64; 2] {
        self.expert_action_via(cfg, self.side)
    }

    /// Expert action with the fork gap chosen explicitly.
    pub fn expert_action_via(&self, cfg: &EnvConfig, side: i8) -> [f64; 2] {
        let g = cfg.expert;
        let (tp, tv) = match cfg.env {
            EnvKind::MovingTarget => {
                let ph = self.phase + cfg.target_speed * cfg.dt * g.lookahead as f64;
                let w = cfg.target_speed * cfg.orbit_radius;
                (orbit(cfg, ph), [-w * ph.sin(), w * ph.cos()])
            }
            EnvKind::StaticReach => (self.target, [0.0; 2]),
            EnvKind::Fork => (fork_waypoint(&cfg.fork, self.pos, side), [0.0; 2]),
        };
        let ff = (1.0 - cfg.damping) / (cfg.accel * cfg.dt);
        let mut u = [0.0; 2];
        for i in 0..2 {
            u[i] = (g.kp * (tp[i] - self.pos[i]) + g.kd * (tv[i] - self.vel[i]) + ff * tv[i]).clamp(-1.0, 1.0);
        }
        u
    }
}

fn fork_start(cfg: &EnvConfig, rng: &mut ChaCha8Rng) -> ([f64; 2], i8) {
    let f = &cfg.fork;
    let pos = [
        f.start[0] + rng.gen_range(-0.05..0.05),
        f.start[1] + rng.gen_range(-0.05..0.05),
    ];
    (pos, if rng.gen_bool(0.5) { 1 } else { -1 })
}

fn fork_waypoint(f: &ForkGeometry, p: [f64; 2], side: i8) -> [f64; 2] {
    let gx = f64::from(side) * f.gap_x;
    if p[1] > f.wall_half_width {
        f.goal
    } else if p[1] < f.decision_y {
        [0.0, f.decision_y + 0.2]
    } else if (p[0] - gx).abs() < 0.06 && p[1] > -0.25 {
        [gx, 0.25]
    } else {
        [gx, -0.15]
    }
}

fn in_gap(f: &ForkGeometry, x: f64) -> bool {
    (x.abs() - f.gap_x).abs() < f.gap_half_width
}

/// Whether the segment `a -> b` touches the wall band outside a gap.
fn hits_wall(f: &ForkGeometry, a: [f64; 2], b: [f64; 2]) -> bool {
    let w = f.wall_half_width;
    let (lo, hi) = (a[1].min(b[1]), a[1].max(b[1]));
    if hi <= -w || lo >= w {
        return false;
    }
    let x_at = |y: f64| {
        if (b[1] - a[1]).abs() < 1e-15 {
            a[0]
        } else {
            a[0] + (b[0] - a[0]) * (y - a[1]) / (b[1] - a[1])
        }
    };
    // portion of the segment inside the band; gaps are intervals, so both
    // ends lying in the same gap covers the whole portion
    let x0 = x_at(lo.max(-w));
    let x1 = x_at(hi.min(w));
    !(in_gap(f, x0) && in_gap(f, x1) && x0.signum() == x1.signum())
}

/// Tasks completed per 256 steps over `steps` simulated steps.
pub fn throughput(completed: usize, steps: usize) -> f64 {
    if steps == 0 {
        return 0.0;
    }
    completed as f64 * THROUGHPUT_WINDOW as f64 / steps as f64
}

/// Per-episode outcome of an expert rollout.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeStats {
    pub completed: usize,
    pub crashed: bool,
    pub steps: usize,
}

impl EpisodeStats {
    pub fn solved(&self) -> bool {
        self.completed > 0
    }
}

/// Rolls the expert for one episode.
pub fn expert_episode(cfg: &EnvConfig, seed: u64) -> Result<EpisodeStats> {
    let mut st = EnvState::reset(cfg, seed);
    for _ in 0..cfg.episode_len {
        let a = st.expert_action(cfg);
        if st.step(cfg, a)?.done {
            break;
        }
    }
    Ok(EpisodeStats {
        completed: st.completed,
        crashed: st.crashed,
        steps: cfg.episode_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn throughput_examples() {
        assert_eq!(throughput(0, 256), 0.0);
        assert_eq!(throughput(3, 256), 3.0);
        assert_eq!(throughput(1, 512), 0.5);
    }

    #[test]
    fn wall_segments() {
        let f = ForkGeometry::default();
        assert!(hits_wall(&f, [0.0, -0.05], [0.0, 0.05]));
        assert!(!hits_wall(&f, [0.5, -0.05], [0.5, 0.05]));
        assert!(!hits_wall(&f, [-0.45, -0.05], [-0.55, 0.05]));
        assert!(hits_wall(&f, [0.45, -0.05], [0.3, 0.05]));
        assert!(!hits_wall(&f, [0.0, -0.2], [0.0, -0.1]));
    }

    #[test]
    fn observation_layout() {
        let cfg = EnvConfig::preset(EnvKind::StaticReach);
        let st = EnvState::reset(&cfg, 3);
        let obs = st.observation();
        assert_eq!(obs.len(), OBS_DIM);
        assert_eq!(&obs[..FRAME_DIM], &obs[FRAME_DIM..2 * FRAME_DIM]);
    }
}
