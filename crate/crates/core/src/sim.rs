//! Planar manipulation-analogue environments.
//!
//! Three deterministic tasks on the square workspace `[-1, 1]²`:
//!
//! * `slide_block`: push a block onto a goal. While the effector is within
//!   `contact_radius` of the block and the push-engage channel `a2` is
//!   positive, the block moves with the effector.
//! * `peg_insert`: grasp a small peg (`a3 > 0` while in contact), carry it,
//!   and release it (`a3 <= 0`) within a tight tolerance of the goal.
//! * `close_box`: rotate the effector angle `φ` down onto the lid angle `θ`
//!   and drive the lid closed. For this task `effector[0]` holds `φ`,
//!   `block[0]` holds `θ`, and the remaining coordinates are zero.
//!
//! Variation factors act through [`DynamicsParams`]: size and friction change
//! the dynamics, camera and light corrupt the learner's observation, and
//! textures/colors become constant distractor features. The scripted expert
//! reads the true state; learners only see [`observe`].

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use thiserror::Error;

use crate::registry::{EnvironmentConfig, TaskId};
use crate::seed;

pub const HORIZON: u32 = 100;
pub const SPEED_SCALE: f64 = 0.05;
/// Proportional gain of the scripted expert (saturating at ±1).
pub const EXPERT_GAIN: f64 = 5.0;
/// Distance to the approach point below which the expert starts pushing.
pub const APPROACH_TOL: f64 = 0.02;
pub const ACTION_DIM: usize = 4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("step called on a finished episode (t = {0})")]
    EpisodeDone(u32),
    #[error("policy failure: {0}")]
    Policy(String),
}

/// Factor-derived dynamics and observation model of one environment.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsParams {
    pub task: TaskId,
    pub contact_radius: f64,
    pub speed_scale: f64,
    pub friction_coeff: f64,
    pub obs_bias: [f64; 2],
    pub obs_gain: f64,
    pub distractor_features: [f64; 4],
    pub success_eps: f64,
    pub horizon: u32,
}

impl DynamicsParams {
    /// Per-step displacement for a saturated command.
    pub fn step_length(&self) -> f64 {
        self.speed_scale * self.friction_coeff
    }
}

/// Half-width of the distractor feature range. Full-width [-1, 1] features
/// let a 40-client federation memorize per-client offsets instead of the
/// task and wreck test-environment generalization.
pub const DISTRACTOR_AMPLITUDE: f64 = 0.25;

fn distractors(cfg: &EnvironmentConfig) -> [f64; 4] {
    let f = &cfg.factors;
    let mut words = vec![
        u64::from(f.background_texture_id),
        u64::from(f.object_texture_id),
        u64::from(f.table_texture_id),
    ];
    words.extend(f.object_color.iter().map(|c| c.to_bits()));
    words.extend(f.table_color.iter().map(|c| c.to_bits()));
    let h = seed::mix_all(0x4449_5354_5241_4354, &words);
    let mut out = [0.0; 4];
    for (k, d) in out.iter_mut().enumerate() {
        let u = (seed::mix(h, k as u64) >> 11) as f64 / (1u64 << 53) as f64;
        *d = DISTRACTOR_AMPLITUDE * (2.0 * u - 1.0);
    }
    out
}

/// Deterministic factor → dynamics mapping.
pub fn derive_dynamics(cfg: &EnvironmentConfig) -> DynamicsParams {
    let f = &cfg.factors;
    let size = f.object_size_scale;
    let (contact_radius, success_eps) = match cfg.task {
        TaskId::SlideBlock => (0.08 * size, 0.10),
        TaskId::PegInsert => (0.04 * size, 0.02),
        TaskId::CloseBox => (0.06 * size, 0.05),
    };
    DynamicsParams {
        task: cfg.task,
        contact_radius,
        speed_scale: SPEED_SCALE,
        friction_coeff: 0.7 + 0.3 * f.friction_u,
        obs_bias: [f.camera_pose_delta[0], f.camera_pose_delta[1]],
        obs_gain: 0.75 + f.light_color.iter().sum::<f64>() / 3.0,
        distractor_features: distractors(cfg),
        success_eps,
        horizon: HORIZON,
    }
}

/// Observation length for a task.
pub fn obs_dim(task: TaskId) -> usize {
    match task {
        TaskId::SlideBlock | TaskId::PegInsert => 10,
        TaskId::CloseBox => 8,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimState {
    pub effector: [f64; 2],
    pub block: [f64; 2],
    pub goal: [f64; 2],
    pub carried: bool,
    pub t: u32,
}

/// Four-channel command; see the module docs for channel meanings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Action(pub [f64; 4]);

impl Action {
    pub const ZERO: Action = Action([0.0; 4]);

    pub fn clamped(self) -> Self {
        Action(self.0.map(|a| a.clamp(-1.0, 1.0)))
    }

    pub fn from_slice(values: &[f64]) -> Result<Self, SimError> {
        <[f64; 4]>::try_from(values).map(Action).map_err(|_| {
            SimError::Policy(format!(
                "policy returned {} outputs, expected 4",
                values.len()
            ))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub state: SimState,
    pub done: bool,
    pub success: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpisodeResult {
    pub success: bool,
    pub steps_taken: u32,
    pub final_distance: f64,
    pub episode_seed: u64,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn clamp_ws(p: [f64; 2]) -> [f64; 2] {
    p.map(|v| v.clamp(-1.0, 1.0))
}

fn sat(v: f64) -> f64 {
    v.clamp(-1.0, 1.0)
}

/// Samples the initial poses for an episode.
pub fn reset(task: TaskId, episode_seed: u64) -> SimState {
    let mut rng = seed::rng(episode_seed);
    match task {
        TaskId::SlideBlock | TaskId::PegInsert => {
            let (block, goal) = loop {
                let block = [rng.gen_range(-0.4..=0.4), rng.gen_range(-0.4..=0.4)];
                let goal = [rng.gen_range(-0.8..=0.8), rng.gen_range(-0.8..=0.8)];
                if dist(block, goal) >= 0.3 {
                    break (block, goal);
                }
            };
            SimState {
                effector: [rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)],
                block,
                goal,
                carried: false,
                t: 0,
            }
        }
        TaskId::CloseBox => SimState {
            effector: [FRAC_PI_2, 0.0],
            block: [rng.gen_range(0.8..=1.5), 0.0],
            goal: [0.0, 0.0],
            carried: false,
            t: 0,
        },
    }
}

/// Distance of the state from task completion.
pub fn goal_distance(state: &SimState, task: TaskId) -> f64 {
    match task {
        TaskId::CloseBox => state.block[0],
        _ => dist(state.block, state.goal),
    }
}

fn is_success(state: &SimState, dynamics: &DynamicsParams) -> bool {
    let d = goal_distance(state, dynamics.task);
    match dynamics.task {
        TaskId::PegInsert => d <= dynamics.success_eps && !state.carried,
        _ => d <= dynamics.success_eps,
    }
}

/// Advances one step. Fails when the horizon has been reached.
pub fn step(
    state: &SimState,
    action: Action,
    dynamics: &DynamicsParams,
) -> Result<StepResult, SimError> {
    if state.t >= dynamics.horizon {
        return Err(SimError::EpisodeDone(state.t));
    }
    let a = action.clamped().0;
    let k = dynamics.step_length();
    let mut next = *state;
    match dynamics.task {
        TaskId::SlideBlock | TaskId::PegInsert => {
            let e = state.effector;
            let moved = clamp_ws([e[0] + k * a[0], e[1] + k * a[1]]);
            let disp = [moved[0] - e[0], moved[1] - e[1]];
            let contact = dist(e, state.block) <= dynamics.contact_radius;
            let drag = |b: [f64; 2]| clamp_ws([b[0] + disp[0], b[1] + disp[1]]);
            if dynamics.task == TaskId::SlideBlock {
                if contact && a[2] > 0.0 {
                    next.block = drag(state.block);
                }
            } else {
                if contact && a[3] > 0.0 {
                    next.carried = true;
                }
                if next.carried {
                    next.block = drag(state.block);
                }
                if a[3] <= 0.0 {
                    next.carried = false;
                }
            }
            next.effector = moved;
        }
        TaskId::CloseBox => {
            let phi = state.effector[0];
            let theta = state.block[0];
            let phi_next = (phi + k * a[0]).clamp(0.0, FRAC_PI_2);
            if (phi - theta).abs() <= dynamics.contact_radius {
                next.block[0] = theta.min(phi_next);
            }
            next.effector[0] = phi_next;
        }
    }
    next.t = state.t + 1;
    let success = is_success(&next, dynamics);
    Ok(StepResult {
        state: next,
        done: success || next.t == dynamics.horizon,
        success,
    })
}

/// Corrupted learner observation.
pub fn observe(state: &SimState, dynamics: &DynamicsParams) -> Vec<f64> {
    let g = dynamics.obs_gain;
    let [bx, by] = dynamics.obs_bias;
    let mut obs = Vec::with_capacity(obs_dim(dynamics.task));
    match dynamics.task {
        TaskId::SlideBlock | TaskId::PegInsert => {
            for p in [state.effector, state.block, state.goal] {
                obs.push(g * (p[0] + bx));
                obs.push(g * (p[1] + by));
            }
        }
        TaskId::CloseBox => {
            let theta = state.block[0];
            obs.push(g * (theta + bx));
            obs.push(g * (state.effector[0] + bx));
            obs.push(theta.sin());
            obs.push(theta.cos());
        }
    }
    obs.extend_from_slice(&dynamics.distractor_features);
    obs
}

fn unit(v: [f64; 2]) -> [f64; 2] {
    let n = v[0].hypot(v[1]);
    if n < 1e-12 {
        [0.0, 0.0]
    } else {
        [v[0] / n, v[1] / n]
    }
}

/// Approach field around the block: a counter-clockwise orbit of radius
/// `ORBIT` that collapses onto the block only in the sector behind it
/// (opposite the unit goal direction `u`), so contact is made moving along `u`.
fn circulate(e: [f64; 2], b: [f64; 2], u: [f64; 2]) -> [f64; 2] {
    const ORBIT: f64 = 0.25;
    const RADIAL_GAIN: f64 = 6.0;
    let d = [e[0] - b[0], e[1] - b[1]];
    let rho = d[0].hypot(d[1]);
    if rho < 1e-12 {
        return u;
    }
    let dh = [d[0] / rho, d[1] / rho];
    let rear = [-u[0], -u[1]];
    let tau = std::f64::consts::TAU;
    let quarter = std::f64::consts::FRAC_PI_2;
    let phi = (rear[0] * dh[1] - rear[1] * dh[0])
        .atan2(rear[0] * dh[0] + rear[1] * dh[1])
        .rem_euclid(tau);
    let target = ORBIT * (phi / quarter).min((tau - phi) / quarter).min(1.0);
    let radial = RADIAL_GAIN * (target - rho);
    let swirl = (0.5 * phi).sin();
    [
        radial * dh[0] - swirl * dh[1],
        radial * dh[1] + swirl * dh[0],
    ]
}

/// Scripted expert acting on the true state.
pub fn expert_action(state: &SimState, dynamics: &DynamicsParams) -> Action {
    let toward = |from: [f64; 2], to: [f64; 2]| {
        [
            sat(EXPERT_GAIN * (to[0] - from[0])),
            sat(EXPERT_GAIN * (to[1] - from[1])),
        ]
    };
    let r = dynamics.contact_radius;
    let (e, b, g) = (state.effector, state.block, state.goal);
    match dynamics.task {
        TaskId::CloseBox => {
            if state.block[0] <= dynamics.success_eps {
                Action::ZERO
            } else {
                Action([-1.0, 0.0, 0.0, 0.0])
            }
        }
        TaskId::SlideBlock => {
            if dist(b, g) <= dynamics.success_eps {
                return Action([0.0, 0.0, -1.0, 0.0]);
            }
            let u = unit([g[0] - b[0], g[1] - b[1]]);
            if dist(e, b) <= r {
                return Action([u[0], u[1], 1.0, 0.0]);
            }
            let v = circulate(e, b, u);
            Action([sat(v[0]), sat(v[1]), 1.0, 0.0])
        }
        TaskId::PegInsert => {
            let release = dist(b, g) <= 0.5 * dynamics.success_eps;
            if state.carried || dist(e, b) <= r {
                let c = toward(b, g);
                let grip = if release { -1.0 } else { 1.0 };
                Action([c[0], c[1], 0.0, grip])
            } else {
                let u = unit([g[0] - b[0], g[1] - b[1]]);
                let q = [b[0] - 0.5 * r * u[0], b[1] - 0.5 * r * u[1]];
                let c = toward(e, q);
                Action([c[0], c[1], 0.0, -1.0])
            }
        }
    }
}

/// Anything that maps an observation to an action. The true state is passed
/// alongside for privileged controllers; learned policies must ignore it.
pub trait Policy {
    fn act(
        &mut self,
        obs: &[f64],
        state: &SimState,
        dynamics: &DynamicsParams,
    ) -> Result<Action, SimError>;
}

/// The scripted expert as a [`Policy`].
#[derive(Debug, Clone, Copy, Default)]
pub struct Expert;

impl Policy for Expert {
    fn act(
        &mut self,
        _: &[f64],
        state: &SimState,
        dynamics: &DynamicsParams,
    ) -> Result<Action, SimError> {
        Ok(expert_action(state, dynamics))
    }
}

impl<F> Policy for F
where
    F: FnMut(&[f64]) -> Result<Action, SimError>,
{
    fn act(&mut self, obs: &[f64], _: &SimState, _: &DynamicsParams) -> Result<Action, SimError> {
        self(obs)
    }
}

/// One environment instance with episode bookkeeping.
#[derive(Debug, Clone)]
pub struct Simulator {
    dynamics: DynamicsParams,
    state: SimState,
    done: bool,
    success: bool,
    episode_seed: u64,
}

impl Simulator {
    pub fn new(cfg: &EnvironmentConfig, episode_seed: u64) -> Self {
        Self::with_dynamics(derive_dynamics(cfg), episode_seed)
    }

    pub fn with_dynamics(dynamics: DynamicsParams, episode_seed: u64) -> Self {
        let state = reset(dynamics.task, episode_seed);
        Self {
            dynamics,
            state,
            done: false,
            success: false,
            episode_seed,
        }
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn dynamics(&self) -> &DynamicsParams {
        &self.dynamics
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn observe(&self) -> Vec<f64> {
        observe(&self.state, &self.dynamics)
    }

    pub fn step(&mut self, action: Action) -> Result<StepResult, SimError> {
        if self.done {
            return Err(SimError::EpisodeDone(self.state.t));
        }
        let result = step(&self.state, action, &self.dynamics)?;
        self.state = result.state;
        self.done = result.done;
        self.success = result.success;
        Ok(result)
    }

    pub fn result(&self) -> EpisodeResult {
        EpisodeResult {
            success: self.success,
            steps_taken: self.state.t,
            final_distance: goal_distance(&self.state, self.dynamics.task),
            episode_seed: self.episode_seed,
        }
    }
}

/// Recorded (observation, clamped action) pairs of one episode.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub observations: Vec<f64>,
    pub actions: Vec<f64>,
}

fn run_episode<P: Policy + ?Sized>(
    policy: &mut P,
    dynamics: &DynamicsParams,
    episode_seed: u64,
    mut record: Option<&mut Trajectory>,
) -> Result<EpisodeResult, SimError> {
    let mut sim = Simulator::with_dynamics(dynamics.clone(), episode_seed);
    while !sim.is_done() {
        let obs = sim.observe();
        let action = policy.act(&obs, sim.state(), &sim.dynamics)?.clamped();
        if let Some(traj) = record.as_deref_mut() {
            traj.observations.extend_from_slice(&obs);
            traj.actions.extend_from_slice(&action.0);
        }
        sim.step(action)?;
    }
    Ok(sim.result())
}

/// Runs one episode to completion.
pub fn rollout<P: Policy + ?Sized>(
    policy: &mut P,
    cfg: &EnvironmentConfig,
    episode_seed: u64,
) -> Result<EpisodeResult, SimError> {
    run_episode(policy, &derive_dynamics(cfg), episode_seed, None)
}

/// [`rollout`] with precomputed dynamics.
pub fn rollout_with<P: Policy + ?Sized>(
    policy: &mut P,
    dynamics: &DynamicsParams,
    episode_seed: u64,
) -> Result<EpisodeResult, SimError> {
    run_episode(policy, dynamics, episode_seed, None)
}

/// Runs one episode and records every observation and action.
pub fn record_rollout<P: Policy + ?Sized>(
    policy: &mut P,
    dynamics: &DynamicsParams,
    episode_seed: u64,
) -> Result<(EpisodeResult, Trajectory), SimError> {
    let mut traj = Trajectory::default();
    let result = run_episode(policy, dynamics, episode_seed, Some(&mut traj))?;
    Ok((result, traj))
}

/// Expert driven through a miscalibrated actuator: every channel carries a
/// constant offset drawn once per episode, uniform in
/// `[-amplitude, amplitude]`. Closed-loop coarse tasks absorb the offset;
/// precision tasks expose it. Used to compare task difficulty.
#[derive(Debug, Clone)]
pub struct NoisyExpert {
    offset: [f64; 4],
}

impl NoisyExpert {
    pub fn new(amplitude: f64, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        Self {
            offset: [0.0; 4].map(|_| rng.gen_range(-amplitude..=amplitude)),
        }
    }

    pub fn offset(&self) -> [f64; 4] {
        self.offset
    }
}

impl Policy for NoisyExpert {
    fn act(
        &mut self,
        _: &[f64],
        state: &SimState,
        dynamics: &DynamicsParams,
    ) -> Result<Action, SimError> {
        let mut a = expert_action(state, dynamics).0;
        for (v, o) in a.iter_mut().zip(self.offset) {
            *v += o;
        }
        Ok(Action(a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::{sample_environments, Split, VariationFactors};

    fn plain_env(task: TaskId) -> EnvironmentConfig {
        EnvironmentConfig {
            client_id: 0,
            task,
            factors: VariationFactors {
                background_texture_id: 1,
                object_texture_id: 2,
                table_texture_id: 3,
                camera_pose_delta: [0.0; 3],
                light_color: [0.25; 3],
                object_color: [0.5; 3],
                table_color: [0.5; 3],
                object_size_scale: 1.0,
                friction_u: 1.0,
            },
            split: Split::Train,
            base_seed: 0,
        }
    }

    fn dyn_plain(task: TaskId) -> DynamicsParams {
        let mut d = derive_dynamics(&plain_env(task));
        d.distractor_features = [0.0; 4];
        d
    }

    #[test]
    fn dynamics_mapping_endpoints() {
        let mut cfg = plain_env(TaskId::SlideBlock);
        cfg.factors.friction_u = 0.0;
        assert_eq!(derive_dynamics(&cfg).friction_coeff, 0.7);
        cfg.factors.friction_u = 1.0;
        assert_eq!(derive_dynamics(&cfg).friction_coeff, 1.0);
        assert_eq!(derive_dynamics(&cfg).obs_bias, [0.0, 0.0]);
        assert_eq!(derive_dynamics(&cfg), derive_dynamics(&cfg));
        assert!((derive_dynamics(&cfg).obs_gain - 1.0).abs() < 1e-15);
    }

    #[test]
    fn reset_is_deterministic_and_separated() {
        for task in [TaskId::SlideBlock, TaskId::PegInsert] {
            assert_eq!(reset(task, 5), reset(task, 5));
            let mut seen = std::collections::HashSet::new();
            for s in 0..1000 {
                let st = reset(task, s);
                assert!(dist(st.block, st.goal) >= 0.3);
                assert!(seen.insert((st.block[0].to_bits(), st.goal[0].to_bits())));
            }
        }
        let lid = reset(TaskId::CloseBox, 3);
        assert!((0.8..=1.5).contains(&lid.block[0]));
        assert_eq!(lid.effector[0], FRAC_PI_2);
    }

    #[test]
    fn zero_action_only_advances_time() {
        for task in TaskId::ALL {
            let d = dyn_plain(task);
            let s = reset(task, 11);
            let r = step(&s, Action::ZERO, &d).unwrap();
            assert_eq!(r.state, SimState { t: 1, ..s });
        }
    }

    #[test]
    fn pushing_moves_block_by_effector_displacement() {
        let d = dyn_plain(TaskId::SlideBlock);
        let s = SimState {
            effector: [0.0, 0.0],
            block: [0.0, 0.0],
            goal: [0.8, 0.0],
            carried: false,
            t: 0,
        };
        let r = step(&s, Action([1.0, 0.0, 1.0, 0.0]), &d).unwrap();
        assert!((r.state.block[0] - 0.05).abs() < 1e-15);
        let r = step(&s, Action([1.0, 0.0, -1.0, 0.0]), &d).unwrap();
        assert_eq!(r.state.block, [0.0, 0.0]);
    }

    #[test]
    fn peg_success_requires_release() {
        let d = dyn_plain(TaskId::PegInsert);
        let s = SimState {
            effector: [0.3, 0.3],
            block: [0.3, 0.3],
            goal: [0.3, 0.3],
            carried: true,
            t: 0,
        };
        let held = step(&s, Action([0.0, 0.0, 0.0, 1.0]), &d).unwrap();
        assert!(!held.success && held.state.carried);
        let released = step(&held.state, Action([0.0, 0.0, 0.0, -1.0]), &d).unwrap();
        assert!(released.success && released.done);
        assert_eq!(released.state.block, [0.3, 0.3]);
    }

    #[test]
    fn step_after_horizon_fails() {
        let d = dyn_plain(TaskId::SlideBlock);
        let s = SimState {
            t: HORIZON,
            ..reset(TaskId::SlideBlock, 0)
        };
        assert!(matches!(
            step(&s, Action::ZERO, &d),
            Err(SimError::EpisodeDone(_))
        ));
        let mut sim = Simulator::with_dynamics(d, 1);
        while !sim.is_done() {
            sim.step(Action::ZERO).unwrap();
        }
        assert!(sim.step(Action::ZERO).is_err());
    }

    #[test]
    fn observation_layout() {
        let d = dyn_plain(TaskId::SlideBlock);
        let s = reset(TaskId::SlideBlock, 4);
        let o = observe(&s, &d);
        let mut raw = vec![];
        for p in [s.effector, s.block, s.goal] {
            raw.extend_from_slice(&p);
        }
        raw.extend_from_slice(&[0.0; 4]);
        assert_eq!(o, raw);

        let mut bright = d.clone();
        bright.obs_gain = 1.25;
        let ob = observe(&s, &bright);
        for i in 0..6 {
            assert_eq!(ob[i], 1.25 * o[i]);
        }

        let mut other = plain_env(TaskId::SlideBlock);
        other.factors.object_texture_id = 200;
        let a = observe(&s, &derive_dynamics(&plain_env(TaskId::SlideBlock)));
        let b = observe(&s, &derive_dynamics(&other));
        assert_eq!(a[..6], b[..6]);
        assert_ne!(a[6..], b[6..]);
        assert_eq!(
            observe(&reset(TaskId::CloseBox, 1), &dyn_plain(TaskId::CloseBox)).len(),
            8
        );
    }

    #[test]
    fn expert_signs() {
        let d = dyn_plain(TaskId::SlideBlock);
        let at_goal = SimState {
            effector: [0.5, 0.5],
            block: [0.1, 0.1],
            goal: [0.1, 0.1],
            carried: false,
            t: 0,
        };
        let a = expert_action(&at_goal, &d);
        assert_eq!(&a.0[..2], &[0.0, 0.0]);
        let far_left = SimState {
            effector: [-0.9, 0.0],
            block: [0.2, 0.0],
            goal: [0.7, 0.0],
            carried: false,
            t: 0,
        };
        assert!(expert_action(&far_left, &d).0[0] > 0.0);
    }

    #[test]
    fn rollouts_are_deterministic() {
        let cfg = plain_env(TaskId::SlideBlock);
        let a = rollout(&mut Expert, &cfg, 9).unwrap();
        assert_eq!(a, rollout(&mut Expert, &cfg, 9).unwrap());
        assert!(a.success);

        let start = reset(TaskId::SlideBlock, 9);
        let mut zero = |_: &[f64]| Ok::<_, SimError>(Action::ZERO);
        let r = rollout(&mut zero, &cfg, 9).unwrap();
        assert!(!r.success);
        assert_eq!(r.steps_taken, HORIZON);
        assert_eq!(r.final_distance, dist(start.block, start.goal));
    }

    #[test]
    fn expert_reading_clean_observations_succeeds() {
        // With zero corruption the observation carries the true positions.
        let d = dyn_plain(TaskId::SlideBlock);
        let mut from_obs = |obs: &[f64]| {
            let s = SimState {
                effector: [obs[0], obs[1]],
                block: [obs[2], obs[3]],
                goal: [obs[4], obs[5]],
                carried: false,
                t: 0,
            };
            Ok(expert_action(&s, &d))
        };
        for seed in 0..20 {
            assert!(rollout_with(&mut from_obs, &d, seed).unwrap().success);
        }
    }

    #[test]
    fn workspace_closure_under_random_actions() {
        let reg = sample_environments(TaskId::PegInsert, 4, 3).unwrap();
        let mut rng = seed::rng(77);
        for task in TaskId::ALL {
            for env in &reg.environments {
                let mut cfg = env.clone();
                cfg.task = task;
                let d = derive_dynamics(&cfg);
                let mut s = reset(task, rng.gen());
                for _ in 0..2500 {
                    let a = Action([0; 4].map(|_| rng.gen_range(-1.5..1.5)));
                    let r = step(&s, a, &d).unwrap();
                    s = r.state;
                    for v in s.effector.iter().chain(&s.block) {
                        assert!(v.is_finite());
                        if task == TaskId::CloseBox {
                            assert!((0.0..=FRAC_PI_2).contains(v));
                        } else {
                            assert!((-1.0..=1.0).contains(v));
                        }
                    }
                    if r.done {
                        s = reset(task, rng.gen());
                    }
                }
            }
        }
    }
}
