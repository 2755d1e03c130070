//! The off-policy training loop: three-critic updates against a shared
//! target, delayed policy/target/temperature updates, and the SAC/TD3
//! baseline variants expressed through configuration.

use crate::diffcore::{DiffArray, Tape};
use crate::ensemble::{critic_loss_grad, shared_q_target, CriticTriple, TargetStrategy};
use crate::envs::{Env, EnvError, EnvSpec};
use crate::nets::{polyak_update, Activation, ActorNet, Adam};
use crate::policy::{
    deterministic_action, sample_reparam, sample_reparam_on_tape, target_action, ActionBounds,
    SmoothingSpec,
};
use crate::replay::{RingBuffer, Transition};
use crate::rng::{fill_standard_normal, rng_from, split_seed, standard_normal};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Temperature floor; keeps alpha positive under gradient descent.
pub const ALPHA_MIN: f64 = 1e-4;

/// Exploration noise std (pre-scale) for the deterministic-policy baseline.
const TD3_EXPLORE_SIGMA: f64 = 0.1;

#[derive(Debug, Error)]
#[error("environment fault at step {step}: {source}")]
pub struct TrainError {
    pub step: u64,
    #[source]
    pub source: EnvError,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Opac,
    Sac,
    Td3,
}

impl Variant {
    /// Whether the policy head is stochastic.
    pub fn stochastic(self) -> bool {
        self != Variant::Td3
    }

    /// Whether the entropy temperature is used and auto-tuned.
    pub fn tunes_alpha(self) -> bool {
        self != Variant::Td3
    }

    /// Smoothing noise on target actions is off only for SAC.
    pub fn smooths_targets(self) -> bool {
        self != Variant::Sac
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Opac => "opac",
            Variant::Sac => "sac",
            Variant::Td3 => "td3",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "opac" => Ok(Variant::Opac),
            "sac" => Ok(Variant::Sac),
            "td3" => Ok(Variant::Td3),
            other => Err(format!("unknown algorithm '{other}'")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AgentConfig {
    pub variant: Variant,
    /// Aggregation for the three-critic variants; SAC/TD3 always use MinPair.
    pub strategy: TargetStrategy,
    pub gamma: f64,
    /// Polyak retention coefficient: target <- tau*target + (1-tau)*model.
    pub tau: f64,
    pub batch_size: usize,
    pub policy_delay: u64,
    /// Minimum-entropy target in nats; None means -(action dim).
    pub entropy_target: Option<f64>,
    pub initial_alpha: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub alpha_lr: f64,
    pub start_steps: u64,
    pub update_every: u64,
    pub replay_capacity: usize,
    pub hidden: Vec<usize>,
    /// Target-smoothing noise std and clip, in pre-scale units.
    pub smoothing_sigma: f64,
    pub smoothing_clip: f64,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            variant: Variant::Opac,
            strategy: TargetStrategy::MedianThree,
            gamma: 0.99,
            tau: 0.995,
            batch_size: 256,
            policy_delay: 2,
            entropy_target: None,
            initial_alpha: 0.2,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            alpha_lr: 3e-4,
            start_steps: 10_000,
            update_every: 1,
            replay_capacity: 1_000_000,
            hidden: vec![256, 256],
            smoothing_sigma: 0.2,
            smoothing_clip: 0.5,
        }
    }
}

impl AgentConfig {
    /// The aggregation actually used, after variant overrides.
    pub fn effective_strategy(&self) -> TargetStrategy {
        match self.variant {
            Variant::Opac => self.strategy,
            _ => TargetStrategy::MinPair,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(format!("gamma must be in [0, 1), got {}", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(format!("tau must be in [0, 1], got {}", self.tau));
        }
        if self.policy_delay < 1 {
            return Err("policy_delay must be >= 1".into());
        }
        if self.batch_size < 1 {
            return Err("batch_size must be >= 1".into());
        }
        if self.update_every < 1 {
            return Err("update_every must be >= 1".into());
        }
        if self.hidden.is_empty() {
            return Err("at least one hidden layer is required".into());
        }
        if self.variant == Variant::Opac && self.strategy == TargetStrategy::MinPair {
            return Err("opac uses mean2 or median3, not minpair".into());
        }
        if self.initial_alpha <= 0.0 {
            return Err("initial_alpha must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum ActMode {
    Explore,
    Exploit,
}

/// One diagnostics record per gradient update. Fields that a variant does not
/// produce on a given step are None (e.g. the third critic under MinPair, or
/// the policy loss between delayed updates).
#[derive(Debug, Clone)]
pub struct UpdateDiagnostics {
    pub grad_step: u64,
    pub critic_losses: [Option<f64>; 3],
    pub policy_loss: Option<f64>,
    pub alpha: f64,
    pub entropy: Option<f64>,
}

/// All mutable training state: model and target networks, the temperature,
/// optimizer moments, and the step counters.
pub struct AgentState {
    pub config: AgentConfig,
    pub actor: ActorNet,
    pub actor_target: ActorNet,
    pub critics: CriticTriple,
    pub alpha: f64,
    pub grad_steps: u64,
    pub env_steps: u64,
    pub obs_dim: usize,
    pub action_dim: usize,
    bounds: ActionBounds,
    actor_opt: Adam,
    critic_opts: [Adam; 3],
    entropy_estimate: Option<f64>,
}

impl AgentState {
    pub fn new(config: AgentConfig, env_spec: &EnvSpec, seed: u64) -> Self {
        config.validate().expect("invalid agent config");
        let (obs_dim, action_dim) = (env_spec.obs_dim, env_spec.action_dim);
        let activation = Activation::Relu;
        let actor = ActorNet::new(
            obs_dim,
            action_dim,
            &config.hidden,
            activation,
            split_seed(seed, 0xac_10),
        );
        let actor_target = actor.clone();
        let critics = CriticTriple::new(
            obs_dim,
            action_dim,
            &config.hidden,
            activation,
            split_seed(seed, 0xc1_10),
        );
        let actor_sizes: Vec<usize> = actor
            .params()
            .iter()
            .flat_map(|p| p.arrays().map(|a| a.numel()))
            .collect();
        let actor_opt = Adam::new(config.actor_lr, &actor_sizes);
        let critic_opts =
            std::array::from_fn(|i| Adam::for_params(config.critic_lr, critics.models[i].params()));
        let alpha = if config.variant.tunes_alpha() {
            config.initial_alpha.max(ALPHA_MIN)
        } else {
            0.0
        };
        AgentState {
            alpha,
            actor,
            actor_target,
            critics,
            grad_steps: 0,
            env_steps: 0,
            obs_dim,
            action_dim,
            bounds: env_spec.bounds.clone(),
            actor_opt,
            critic_opts,
            entropy_estimate: None,
            config,
        }
    }

    pub fn bounds(&self) -> &ActionBounds {
        &self.bounds
    }

    /// Entropy floor the temperature steers toward.
    pub fn entropy_target(&self) -> f64 {
        self.config
            .entropy_target
            .unwrap_or(-(self.action_dim as f64))
    }

    fn smoothing_spec(&self) -> SmoothingSpec {
        let sigma = if self.config.variant.smooths_targets() {
            self.config.smoothing_sigma
        } else {
            0.0
        };
        SmoothingSpec::new(sigma, self.config.smoothing_clip, self.bounds.clone())
    }

    /// Behavior policy. During warmup, exploration is uniform over the action
    /// box; afterwards it samples the policy (or, for the deterministic-head
    /// baseline, perturbs the mean action with clipped-to-bounds noise).
    pub fn act<R: Rng>(&self, obs: &[f64], mode: ActMode, rng: &mut R) -> Vec<f64> {
        if matches!(mode, ActMode::Explore) && self.env_steps < self.config.start_steps {
            return self.bounds.sample_uniform(rng);
        }
        let states = DiffArray::row(obs.to_vec());
        let (mu, log_std) = self.actor.forward_values(&states);
        match mode {
            ActMode::Exploit => deterministic_action(mu.data(), &self.bounds),
            ActMode::Explore => {
                if self.config.variant.stochastic() {
                    let mut eps = vec![0.0; self.action_dim];
                    fill_standard_normal(rng, &mut eps);
                    sample_reparam(mu.data(), log_std.data(), &eps, &self.bounds).action
                } else {
                    let mut a = deterministic_action(mu.data(), &self.bounds);
                    for (i, v) in a.iter_mut().enumerate() {
                        *v += self.bounds.halfwidth(i) * TD3_EXPLORE_SIGMA * standard_normal(rng);
                    }
                    self.bounds.clip(&mut a);
                    a
                }
            }
        }
    }

    /// Shared targets for a batch: smoothed target actions, aggregated target
    /// critic values, and `y = r + gamma(1-d)(agg - alpha*logp')`. Time-limit
    /// truncations bootstrap (d = 0).
    pub fn compute_targets<R: Rng>(
        &self,
        batch: &[&Transition],
        rng: &mut R,
    ) -> (Vec<f64>, Vec<f64>) {
        let s_next = stack(batch, |t| &t.next_state, self.obs_dim);
        let (a_next, logp_next) = target_action(
            &self.actor_target,
            &s_next,
            &self.smoothing_spec(),
            self.config.variant.stochastic(),
            rng,
        );
        let sa_next = concat_rows(&s_next, &a_next);
        let agg = self
            .critics
            .aggregated_target_q(&sa_next, self.config.effective_strategy());

        let y = batch
            .iter()
            .zip(agg.iter().zip(&logp_next))
            .map(|(t, (&g, &lp))| {
                let bellman_done = t.done && !t.truncated;
                shared_q_target(t.reward, bellman_done, self.config.gamma, g, self.alpha, lp)
            })
            .collect();
        (y, logp_next)
    }

    /// Reparameterized policy loss `mean(alpha*logp - Q_1(s, pi(s)))` with
    /// gradients for the actor parameters; the first critic's parameters are
    /// treated as constants. Returns (loss, gradients, per-row log-probs).
    pub fn policy_loss_with_grads(
        &self,
        states: &DiffArray,
        eps: &DiffArray,
    ) -> (f64, Vec<DiffArray>, Vec<f64>) {
        policy_loss_core(
            &self.actor,
            &self.critics.models[0],
            self.alpha,
            &self.bounds,
            states,
            eps,
        )
    }

    /// Temperature step for `J(alpha) = E[-alpha*logp - alpha*H0]`:
    /// the gradient is `mean(-logp) - H0`, i.e. entropy estimate minus
    /// target, and alpha descends it with a positivity floor.
    pub fn alpha_update(&mut self, logp_batch: &[f64]) -> f64 {
        assert!(!logp_batch.is_empty());
        let entropy = -logp_batch.iter().sum::<f64>() / logp_batch.len() as f64;
        let grad = entropy - self.entropy_target();
        self.alpha = (self.alpha - self.config.alpha_lr * grad).max(ALPHA_MIN);
        self.alpha
    }

    /// One gradient update: every active critic steps toward the shared
    /// target; on delayed steps the policy, temperature, and all target
    /// networks follow.
    pub fn update_step<R: Rng>(&mut self, batch: &[&Transition], rng: &mut R) -> UpdateDiagnostics {
        assert!(!batch.is_empty(), "update_step requires a non-empty batch");
        let strategy = self.config.effective_strategy();
        let (y, _) = self.compute_targets(batch, rng);

        let states = stack(batch, |t| &t.state, self.obs_dim);
        let actions = stack(batch, |t| &t.action, self.action_dim);
        let sa = concat_rows(&states, &actions);

        let mut critic_losses = [None, None, None];
        let active = strategy.active_critics();
        for ((model, opt), slot) in self.critics.models[..active]
            .iter_mut()
            .zip(&mut self.critic_opts)
            .zip(&mut critic_losses)
        {
            let (loss, grads) = critic_loss_grad(model, &sa, &y).expect("critic loss");
            opt.step(model.params_mut().arrays_mut(), &grads);
            *slot = Some(loss);
        }

        let delayed = self.grad_steps.is_multiple_of(self.config.policy_delay);
        let mut policy_loss = None;
        if delayed {
            let mut eps = DiffArray::zeros(vec![batch.len(), self.action_dim]);
            if self.config.variant.stochastic() {
                fill_standard_normal(rng, eps.data_mut());
            }
            let (loss, grads, logp) = self.policy_loss_with_grads(&states, &eps);
            self.actor_opt.step(
                self.actor
                    .params_mut()
                    .into_iter()
                    .flat_map(|p| p.arrays_mut()),
                &grads,
            );
            policy_loss = Some(loss);

            if self.config.variant.tunes_alpha() {
                self.entropy_estimate = Some(-logp.iter().sum::<f64>() / logp.len() as f64);
                self.alpha_update(&logp);
            }

            let tau = self.config.tau;
            for (t, m) in self
                .actor_target
                .params_mut()
                .into_iter()
                .zip(self.actor.params())
            {
                polyak_update(t, m, tau);
            }
            for i in 0..strategy.active_critics() {
                polyak_update(
                    self.critics.targets[i].params_mut(),
                    self.critics.models[i].params(),
                    tau,
                );
            }
        }

        let diag = UpdateDiagnostics {
            grad_step: self.grad_steps,
            critic_losses,
            policy_loss,
            alpha: self.alpha,
            entropy: self.entropy_estimate,
        };
        self.grad_steps += 1;
        diag
    }
}

/// The reparameterized policy objective on a fresh tape: samples actions
/// through the actor, scores them with the given critic, and differentiates
/// `mean(alpha*logp - Q(s, a))` with respect to the actor parameters only.
pub fn policy_loss_core(
    actor: &ActorNet,
    critic: &crate::nets::CriticNet,
    alpha: f64,
    bounds: &ActionBounds,
    states: &DiffArray,
    eps: &DiffArray,
) -> (f64, Vec<DiffArray>, Vec<f64>) {
    let mut tape = Tape::new();
    let taped_actor = actor.register(&mut tape);
    let s = tape.leaf(states.clone());
    let (mu, log_std) = actor
        .forward(&mut tape, &taped_actor, s)
        .expect("actor forward");
    let sample = sample_reparam_on_tape(&mut tape, mu, log_std, eps, bounds).expect("sample");
    let q = critic
        .forward_split(&mut tape, s, sample.action)
        .expect("critic forward");
    let ent_term = tape.scale(sample.log_prob, alpha);
    let neg_q = tape.scale(q, -1.0);
    let per_row = tape.add(ent_term, neg_q).expect("loss terms");
    let loss = tape.mean(per_row);
    let grads = tape.backward(loss).expect("policy backward");

    let grad_arrays: Vec<DiffArray> = taped_actor
        .leaf_ids()
        .iter()
        .map(|&id| grads.get_or_zeros(id, tape.value(id).shape()))
        .collect();
    let logp = tape.value(sample.log_prob).data().to_vec();
    (tape.value(loss).item(), grad_arrays, logp)
}

/// Stack one field of a transition batch into a (batch, dim) array.
fn stack(batch: &[&Transition], field: impl Fn(&Transition) -> &[f64], dim: usize) -> DiffArray {
    let mut data = Vec::with_capacity(batch.len() * dim);
    for t in batch {
        let row = field(t);
        assert_eq!(row.len(), dim, "transition dimension mismatch");
        data.extend_from_slice(row);
    }
    DiffArray::matrix(batch.len(), dim, data)
}

/// Row-wise concatenation of two (batch, *) arrays.
fn concat_rows(a: &DiffArray, b: &DiffArray) -> DiffArray {
    let (rows, ca, cb) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    assert_eq!(rows, b.shape()[0]);
    let mut data = Vec::with_capacity(rows * (ca + cb));
    for r in 0..rows {
        data.extend_from_slice(&a.data()[r * ca..(r + 1) * ca]);
        data.extend_from_slice(&b.data()[r * cb..(r + 1) * cb]);
    }
    DiffArray::matrix(rows, ca + cb, data)
}

/// Observer hooks for the training loop.
pub trait TrainObserver {
    fn on_step(&mut self, _state: &AgentState, _env_step: u64) {}
    fn on_update(&mut self, _state: &AgentState, _diag: &UpdateDiagnostics) {}
}

/// No-op observer.
pub struct NullObserver;

impl TrainObserver for NullObserver {}

/// Runs the interaction/update loop for `total_steps` environment steps.
/// Deterministic given the seed: exploration, replay sampling, update noise,
/// and episode resets each draw from their own derived stream.
pub fn train(
    state: &mut AgentState,
    env: &mut dyn Env,
    buffer: &mut RingBuffer,
    total_steps: u64,
    seed: u64,
    observer: &mut dyn TrainObserver,
) -> Result<(), TrainError> {
    let mut rng_act: ChaCha8Rng = rng_from(seed, 0x61_63_74);
    let mut rng_batch: ChaCha8Rng = rng_from(seed, 0x62_61_74);
    let mut rng_update: ChaCha8Rng = rng_from(seed, 0x757064);

    let mut episode: u64 = 0;
    let mut obs = env.reset(split_seed(seed, 0xe0_00 + episode));
    for step in 0..total_steps {
        let action = state.act(&obs, ActMode::Explore, &mut rng_act);
        let out = env
            .step(&action)
            .map_err(|source| TrainError { step, source })?;
        buffer.push(Transition {
            state: obs,
            action,
            reward: out.reward,
            next_state: out.obs.clone(),
            done: out.done,
            truncated: out.truncated,
        });
        obs = if out.done {
            episode += 1;
            env.reset(split_seed(seed, 0xe0_00 + episode))
        } else {
            out.obs
        };
        state.env_steps += 1;
        observer.on_step(state, state.env_steps);

        if state.env_steps >= state.config.start_steps
            && buffer.len() >= state.config.batch_size
            && state.env_steps.is_multiple_of(state.config.update_every)
        {
            for _ in 0..state.config.update_every {
                let batch = buffer.sample(state.config.batch_size, &mut rng_batch);
                let diag = state.update_step(&batch, &mut rng_update);
                observer.on_update(state, &diag);
            }
        }
    }
    Ok(())
}
