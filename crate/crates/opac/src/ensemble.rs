//! Three-critic value machinery: conservative target aggregation, the shared
//! Q-target, and per-critic regression losses.

use crate::diffcore::{DiffArray, DiffError, Tape};
use crate::nets::CriticNet;

/// How the three critics' evaluations are folded into one target value.
///
/// `MinPair` is the two-critic baseline rule (SAC/TD3); it ignores the third
/// critic entirely.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetStrategy {
    MeanSmallerTwo,
    MedianThree,
    MinPair,
}

impl TargetStrategy {
    /// Number of critics the strategy trains and evaluates.
    pub fn active_critics(self) -> usize {
        match self {
            TargetStrategy::MinPair => 2,
            _ => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TargetStrategy::MeanSmallerTwo => "mean2",
            TargetStrategy::MedianThree => "median3",
            TargetStrategy::MinPair => "minpair",
        }
    }
}

impl std::str::FromStr for TargetStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean2" => Ok(TargetStrategy::MeanSmallerTwo),
            "median3" => Ok(TargetStrategy::MedianThree),
            "minpair" => Ok(TargetStrategy::MinPair),
            other => Err(format!("unknown target strategy '{other}'")),
        }
    }
}

/// Fold three critic values into one target estimate.
pub fn aggregate(q1: f64, q2: f64, q3: f64, strategy: TargetStrategy) -> f64 {
    match strategy {
        TargetStrategy::MinPair => q1.min(q2),
        TargetStrategy::MeanSmallerTwo | TargetStrategy::MedianThree => {
            let mut v = [q1, q2, q3];
            v.sort_by(f64::total_cmp);
            if strategy == TargetStrategy::MeanSmallerTwo {
                0.5 * (v[0] + v[1])
            } else {
                v[1]
            }
        }
    }
}

/// The shared target `y = r + gamma * (1 - d) * (agg - alpha * logp_next)`.
/// Terminal transitions bootstrap nothing.
pub fn shared_q_target(
    r: f64,
    done: bool,
    gamma: f64,
    agg: f64,
    alpha: f64,
    logp_next: f64,
) -> f64 {
    debug_assert!((0.0..1.0).contains(&gamma));
    debug_assert!(alpha >= 0.0);
    if done {
        r
    } else {
        r + gamma * (agg - alpha * logp_next)
    }
}

/// Model and target networks for the critic ensemble. Index i of `models`
/// shares its architecture with index i of `targets`.
#[derive(Debug, Clone)]
pub struct CriticTriple {
    pub models: [CriticNet; 3],
    pub targets: [CriticNet; 3],
}

impl CriticTriple {
    /// Three independently seeded critics; targets start equal to models.
    pub fn new(
        obs_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        activation: crate::nets::Activation,
        seed: u64,
    ) -> Self {
        let make = |i: u64| {
            CriticNet::new(
                obs_dim,
                action_dim,
                hidden,
                activation,
                crate::rng::split_seed(seed, 100 + i),
            )
        };
        let models = [make(0), make(1), make(2)];
        let targets = models.clone();
        CriticTriple { models, targets }
    }

    /// Aggregated target-network values for a (batch, obs+act) input, one per
    /// row. Only the critics the strategy uses are evaluated.
    pub fn aggregated_target_q(&self, sa: &DiffArray, strategy: TargetStrategy) -> Vec<f64> {
        let q1 = self.targets[0].q_values(sa);
        let q2 = self.targets[1].q_values(sa);
        match strategy {
            TargetStrategy::MinPair => q1
                .iter()
                .zip(&q2)
                .map(|(&a, &b)| aggregate(a, b, 0.0, strategy))
                .collect(),
            _ => {
                let q3 = self.targets[2].q_values(sa);
                q1.iter()
                    .zip(&q2)
                    .zip(&q3)
                    .map(|((&a, &b), &c)| aggregate(a, b, c, strategy))
                    .collect()
            }
        }
    }
}

/// Mean-squared-error loss of one critic against fixed targets, with
/// gradients for its parameters in canonical array order.
pub fn critic_loss_grad(
    critic: &CriticNet,
    sa: &DiffArray,
    y: &[f64],
) -> Result<(f64, Vec<DiffArray>), DiffError> {
    let batch = sa.shape()[0];
    if batch != y.len() {
        return Err(DiffError::ShapeMismatch {
            op: "critic_loss",
            lhs: sa.shape().to_vec(),
            rhs: vec![y.len()],
        });
    }
    let mut tape = Tape::new();
    let taped = critic.register(&mut tape);
    let x = tape.leaf(sa.clone());
    let q = critic.forward(&mut tape, &taped, x)?;
    let y_leaf = tape.leaf(DiffArray::matrix(batch, 1, y.to_vec()));
    let neg_y = tape.scale(y_leaf, -1.0);
    let diff = tape.add(q, neg_y)?;
    let sq = tape.square(diff);
    let loss = tape.mean(sq);
    let grads = tape.backward(loss)?;
    let grad_arrays = taped
        .leaf_ids()
        .iter()
        .map(|&id| grads.get_or_zeros(id, tape.value(id).shape()))
        .collect();
    Ok((tape.value(loss).item(), grad_arrays))
}

/// Losses for every active critic against the same shared targets.
pub fn critic_losses(
    triple: &CriticTriple,
    sa: &DiffArray,
    y: &[f64],
    strategy: TargetStrategy,
) -> Result<Vec<(f64, Vec<DiffArray>)>, DiffError> {
    triple.models[..strategy.active_critics()]
        .iter()
        .map(|c| critic_loss_grad(c, sa, y))
        .collect()
}
