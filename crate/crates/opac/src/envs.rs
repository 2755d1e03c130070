//! Desk-scale environments: pendulum swing-up and a 2-D point-mass, plus a
//! seeded random finite-MDP generator for the tabular experiments.
//!
//! Environments are registered by name: `"pendulum"`, `"pointmass"`, and
//! `"random-mdp:<seed>:<n_states>:<n_actions>"`.

use crate::policy::ActionBounds;
use crate::rng::rng_from;
use crate::tabular::FiniteMdp;
use rand::Rng;
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("action[{index}] is not finite: {value}")]
    NonFiniteAction { index: usize, value: f64 },
    #[error("unknown environment '{0}'")]
    UnknownEnv(String),
    #[error("'{name}' is not a continuous-control environment")]
    NotContinuous { name: String },
    #[error("bad environment spec '{spec}': {reason}")]
    BadSpec { spec: String, reason: String },
}

/// Static description of a continuous environment.
#[derive(Debug, Clone)]
pub struct EnvSpec {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub bounds: ActionBounds,
    pub max_episode_steps: usize,
}

/// Result of one environment step. Episodes cut off by the step limit report
/// `done = true` together with `truncated = true`, so callers can bootstrap
/// through the artificial terminal.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub truncated: bool,
}

pub trait Env: Send {
    fn spec(&self) -> &EnvSpec;
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> Result<StepOutcome, EnvError>;
}

fn check_finite(action: &[f64]) -> Result<(), EnvError> {
    for (index, &value) in action.iter().enumerate() {
        if !value.is_finite() {
            return Err(EnvError::NonFiniteAction { index, value });
        }
    }
    Ok(())
}

/// Wrap an angle into (-pi, pi].
fn wrap_angle(x: f64) -> f64 {
    x - 2.0 * PI * ((x - PI) / (2.0 * PI)).ceil()
}

/// Torque-limited pendulum swing-up. Angle 0 is upright; the agent must pump
/// energy because the torque bound cannot lift the pendulum directly.
pub struct Pendulum {
    spec: EnvSpec,
    theta: f64,
    theta_dot: f64,
    steps: usize,
}

impl Pendulum {
    pub const GRAVITY: f64 = 10.0;
    pub const LENGTH: f64 = 1.0;
    pub const MASS: f64 = 1.0;
    pub const DT: f64 = 0.05;
    pub const MAX_TORQUE: f64 = 2.0;
    pub const MAX_SPEED: f64 = 8.0;
    pub const MAX_STEPS: usize = 500;

    pub fn new() -> Self {
        Pendulum {
            spec: EnvSpec {
                obs_dim: 3,
                action_dim: 1,
                bounds: ActionBounds::symmetric(1, Self::MAX_TORQUE),
                max_episode_steps: Self::MAX_STEPS,
            },
            theta: PI,
            theta_dot: 0.0,
            steps: 0,
        }
    }

    /// Deterministically place the pendulum (used by tests).
    pub fn set_state(&mut self, theta: f64, theta_dot: f64) {
        self.theta = wrap_angle(theta);
        self.theta_dot = theta_dot.clamp(-Self::MAX_SPEED, Self::MAX_SPEED);
        self.steps = 0;
    }

    pub fn state(&self) -> (f64, f64) {
        (self.theta, self.theta_dot)
    }

    fn obs(&self) -> Vec<f64> {
        vec![self.theta.cos(), self.theta.sin(), self.theta_dot]
    }
}

impl Default for Pendulum {
    fn default() -> Self {
        Self::new()
    }
}

impl Env for Pendulum {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = rng_from(seed, 0x70656e64);
        // theta uniform in (-pi, pi], velocity uniform in [-1, 1].
        self.theta = PI - rng.gen::<f64>() * 2.0 * PI;
        self.theta_dot = rng.gen::<f64>() * 2.0 - 1.0;
        self.steps = 0;
        self.obs()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome, EnvError> {
        check_finite(action)?;
        let torque = action[0].clamp(-Self::MAX_TORQUE, Self::MAX_TORQUE);

        // Cost on the pre-step state, as in the classic swing-up task.
        let reward = -(self.theta * self.theta
            + 0.1 * self.theta_dot * self.theta_dot
            + 0.001 * torque * torque);

        let (g, l, m, dt) = (Self::GRAVITY, Self::LENGTH, Self::MASS, Self::DT);
        // Gravity term -(3g/2l) * sin(theta + pi) written as +sin(theta), so
        // the upright equilibrium is preserved exactly in floating point.
        let accel = (3.0 * g / (2.0 * l)) * self.theta.sin() + 3.0 * torque / (m * l * l);
        self.theta_dot = (self.theta_dot + accel * dt).clamp(-Self::MAX_SPEED, Self::MAX_SPEED);
        self.theta = wrap_angle(self.theta + self.theta_dot * dt);
        self.steps += 1;

        let truncated = self.steps >= Self::MAX_STEPS;
        Ok(StepOutcome {
            obs: self.obs(),
            reward,
            done: truncated,
            truncated,
        })
    }
}

/// 2-D point-mass pushed by bounded acceleration toward a fixed goal.
/// Reaching the goal region is a real terminal; the step cap truncates.
pub struct PointMass {
    spec: EnvSpec,
    pos: [f64; 2],
    vel: [f64; 2],
    steps: usize,
}

impl PointMass {
    pub const DT: f64 = 0.1;
    pub const MAX_SPEED: f64 = 2.0;
    pub const GOAL: [f64; 2] = [1.0, 1.0];
    pub const GOAL_RADIUS: f64 = 0.1;
    pub const MAX_STEPS: usize = 200;

    pub fn new() -> Self {
        PointMass {
            spec: EnvSpec {
                obs_dim: 4,
                action_dim: 2,
                bounds: ActionBounds::symmetric(2, 1.0),
                max_episode_steps: Self::MAX_STEPS,
            },
            pos: [0.0; 2],
            vel: [0.0; 2],
            steps: 0,
        }
    }

    fn obs(&self) -> Vec<f64> {
        vec![self.pos[0], self.pos[1], self.vel[0], self.vel[1]]
    }

    fn goal_distance(&self) -> f64 {
        let dx = self.pos[0] - Self::GOAL[0];
        let dy = self.pos[1] - Self::GOAL[1];
        (dx * dx + dy * dy).sqrt()
    }
}

impl Default for PointMass {
    fn default() -> Self {
        Self::new()
    }
}

impl Env for PointMass {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, _seed: u64) -> Vec<f64> {
        self.pos = [0.0; 2];
        self.vel = [0.0; 2];
        self.steps = 0;
        self.obs()
    }

    fn step(&mut self, action: &[f64]) -> Result<StepOutcome, EnvError> {
        check_finite(action)?;
        let mut accel = [action[0], action[1]];
        self.spec.bounds.clip(&mut accel);
        for ((v, p), a) in self.vel.iter_mut().zip(&mut self.pos).zip(&accel) {
            *v = (*v + a * Self::DT).clamp(-Self::MAX_SPEED, Self::MAX_SPEED);
            *p = (*p + *v * Self::DT).clamp(-3.0, 3.0);
        }
        self.steps += 1;

        let dist = self.goal_distance();
        let reward = -(dist * dist + 0.01 * (accel[0] * accel[0] + accel[1] * accel[1]));
        let reached = dist < Self::GOAL_RADIUS;
        let truncated = !reached && self.steps >= Self::MAX_STEPS;
        Ok(StepOutcome {
            obs: self.obs(),
            reward,
            done: reached || truncated,
            truncated,
        })
    }
}

/// Seeded dense random MDP: strictly positive transition rows (so the chain is
/// ergodic), mean rewards uniform in [-1, 1], Gaussian reward noise, and no
/// terminal states.
pub fn random_mdp(seed: u64, n_states: usize, n_actions: usize, gamma: f64) -> FiniteMdp {
    let mut rng = rng_from(seed, 0x6d_64_70);
    let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
    for _ in 0..n_states * n_actions {
        let mut row: Vec<f64> = (0..n_states).map(|_| rng.gen::<f64>() + 0.05).collect();
        let sum: f64 = row.iter().sum();
        for p in row.iter_mut() {
            *p /= sum;
        }
        // Force the row to sum to exactly 1 despite rounding.
        let partial: f64 = row[..n_states - 1].iter().sum();
        row[n_states - 1] = 1.0 - partial;
        transition.extend(row);
    }
    let reward: Vec<f64> = (0..n_states * n_actions)
        .map(|_| rng.gen::<f64>() * 2.0 - 1.0)
        .collect();
    FiniteMdp::new(
        n_states,
        n_actions,
        transition,
        reward,
        vec![false; n_states],
        gamma,
        0.1,
    )
}

/// Entry resolved from the environment registry.
pub enum RegistryEntry {
    Continuous(Box<dyn Env>),
    Tabular(FiniteMdp),
}

/// Resolve an environment name. Random MDPs default to gamma = 0.9.
pub fn lookup(name: &str) -> Result<RegistryEntry, EnvError> {
    match name {
        "pendulum" => Ok(RegistryEntry::Continuous(Box::new(Pendulum::new()))),
        "pointmass" => Ok(RegistryEntry::Continuous(Box::new(PointMass::new()))),
        _ if name.starts_with("random-mdp:") => {
            let parts: Vec<&str> = name.split(':').collect();
            if parts.len() != 4 {
                return Err(EnvError::BadSpec {
                    spec: name.to_string(),
                    reason: "expected random-mdp:<seed>:<n_states>:<n_actions>".into(),
                });
            }
            let parse = |s: &str, what: &str| {
                s.parse::<u64>().map_err(|_| EnvError::BadSpec {
                    spec: name.to_string(),
                    reason: format!("{what} must be an integer, got '{s}'"),
                })
            };
            let seed = parse(parts[1], "seed")?;
            let n_states = parse(parts[2], "n_states")? as usize;
            let n_actions = parse(parts[3], "n_actions")? as usize;
            if n_states == 0 || n_actions == 0 {
                return Err(EnvError::BadSpec {
                    spec: name.to_string(),
                    reason: "state and action counts must be positive".into(),
                });
            }
            Ok(RegistryEntry::Tabular(random_mdp(
                seed, n_states, n_actions, 0.9,
            )))
        }
        other => Err(EnvError::UnknownEnv(other.to_string())),
    }
}

/// Resolve a continuous environment or fail.
pub fn make_env(name: &str) -> Result<Box<dyn Env>, EnvError> {
    match lookup(name)? {
        RegistryEntry::Continuous(env) => Ok(env),
        RegistryEntry::Tabular(_) => Err(EnvError::NotContinuous {
            name: name.to_string(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pendulum_reset_is_deterministic_per_seed() {
        let mut env = Pendulum::new();
        let a = env.reset(42);
        let b = env.reset(42);
        assert_eq!(a, b);
        assert_ne!(a, env.reset(43));
    }

    #[test]
    fn pendulum_observation_is_on_the_unit_circle() {
        let mut env = Pendulum::new();
        for seed in 0..20 {
            let obs = env.reset(seed);
            assert!((obs[0] * obs[0] + obs[1] * obs[1] - 1.0).abs() < 1e-12);
            assert!((-1.0..=1.0).contains(&obs[2]));
        }
    }

    #[test]
    fn upright_rest_is_an_equilibrium() {
        let mut env = Pendulum::new();
        env.set_state(0.0, 0.0);
        let out = env.step(&[0.0]).unwrap();
        let (theta, theta_dot) = env.state();
        assert_eq!(theta, 0.0);
        assert_eq!(theta_dot, 0.0);
        assert_eq!(out.reward, 0.0);
    }

    #[test]
    fn hanging_rest_is_an_equilibrium() {
        // sin(pi) is ~1e-16 in f64, so allow round-off drift at the bottom.
        let mut env = Pendulum::new();
        env.set_state(PI, 0.0);
        for _ in 0..100 {
            env.step(&[0.0]).unwrap();
        }
        let (theta, theta_dot) = env.state();
        assert!((theta.abs() - PI).abs() < 1e-12);
        assert!(theta_dot.abs() < 1e-12);
    }

    #[test]
    fn pendulum_reward_is_never_positive() {
        let mut env = Pendulum::new();
        let mut rng = rng_from(7, 0);
        env.reset(7);
        for _ in 0..2000 {
            let a = [rng.gen::<f64>() * 4.0 - 2.0];
            let out = env.step(&a).unwrap();
            assert!(out.reward <= 0.0);
            if out.done {
                env.reset(rng.gen());
            }
        }
    }

    #[test]
    fn pendulum_dynamics_are_deterministic() {
        let mut a = Pendulum::new();
        let mut b = Pendulum::new();
        a.set_state(1.2, -0.7);
        b.set_state(1.2, -0.7);
        let oa = a.step(&[0.9]).unwrap();
        let ob = b.step(&[0.9]).unwrap();
        assert_eq!(oa.obs, ob.obs);
        assert_eq!(oa.reward, ob.reward);
    }

    #[test]
    fn pendulum_truncates_at_the_step_cap() {
        let mut env = Pendulum::new();
        env.reset(0);
        for i in 1..=Pendulum::MAX_STEPS {
            let out = env.step(&[0.0]).unwrap();
            assert_eq!(out.done, i == Pendulum::MAX_STEPS);
            assert_eq!(out.truncated, i == Pendulum::MAX_STEPS);
        }
    }

    #[test]
    fn non_finite_action_is_rejected() {
        let mut env = Pendulum::new();
        env.reset(0);
        assert!(matches!(
            env.step(&[f64::NAN]),
            Err(EnvError::NonFiniteAction { .. })
        ));
    }

    #[test]
    fn energy_gain_per_step_is_bounded_by_torque_power() {
        // E = KE + PE for the rod; the continuous-time bound is
        // torque_bound * max_speed * dt = 0.8, with headroom for the
        // semi-implicit discretization (measured well under 0.4).
        let energy =
            |theta: f64, theta_dot: f64| (1.0 / 6.0) * theta_dot * theta_dot + 5.0 * theta.cos();
        let bound = Pendulum::MAX_TORQUE * Pendulum::MAX_SPEED * Pendulum::DT;
        let mut rng = rng_from(13, 0);
        let mut env = Pendulum::new();
        for _ in 0..5000 {
            let theta = rng.gen::<f64>() * 2.0 * PI - PI;
            let theta_dot = rng.gen::<f64>() * 16.0 - 8.0;
            env.set_state(theta, theta_dot);
            let e0 = energy(env.state().0, env.state().1);
            env.step(&[rng.gen::<f64>() * 4.0 - 2.0]).unwrap();
            let e1 = energy(env.state().0, env.state().1);
            assert!(
                e1 - e0 <= bound + 0.4,
                "energy jump {} from ({theta}, {theta_dot})",
                e1 - e0
            );
        }
    }

    #[test]
    fn point_mass_resets_to_origin_at_rest() {
        let mut env = PointMass::new();
        assert_eq!(env.reset(123), vec![0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn point_mass_reaching_goal_is_terminal_not_truncated() {
        let mut env = PointMass::new();
        env.reset(0);
        let mut last = None;
        for _ in 0..PointMass::MAX_STEPS {
            let out = env.step(&[1.0, 1.0]).unwrap();
            let done = out.done;
            last = Some(out);
            if done {
                break;
            }
        }
        let out = last.unwrap();
        assert!(
            out.done && !out.truncated,
            "goal run should terminate early"
        );
    }

    #[test]
    fn registry_resolves_all_names() {
        assert!(matches!(
            lookup("pendulum"),
            Ok(RegistryEntry::Continuous(_))
        ));
        assert!(matches!(
            lookup("pointmass"),
            Ok(RegistryEntry::Continuous(_))
        ));
        match lookup("random-mdp:5:6:3") {
            Ok(RegistryEntry::Tabular(mdp)) => {
                assert_eq!(mdp.n_states, 6);
                assert_eq!(mdp.n_actions, 3);
            }
            other => panic!("unexpected {:?}", other.is_ok()),
        }
        assert!(lookup("nope").is_err());
        assert!(lookup("random-mdp:1:2").is_err());
        assert!(make_env("random-mdp:1:2:2").is_err());
    }

    #[test]
    fn random_mdp_rows_are_exact_distributions() {
        let mdp = random_mdp(9, 7, 4, 0.9);
        for s in 0..7 {
            for a in 0..4 {
                let sum: f64 = mdp.transition_probs(s, a).iter().sum();
                assert!((sum - 1.0).abs() < 1e-15);
            }
        }
    }
}
