//! Finite-MDP clipped triple Q-learning and the exact value-iteration oracle
//! its convergence is checked against.
//!
//! Three tables are kept and all of them are updated on every step toward the
//! same target `y = r + gamma * g(Q_A(s', a*), Q_B(s', a*), Q_C(s', a*))`,
//! where `a*` maximizes `Q_A(s', .)` and `g` is the aggregation strategy.

use crate::ensemble::{aggregate, TargetStrategy};
use crate::rng::{rng_from, standard_normal};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Tabular MDP with dense transition probabilities and mean rewards.
/// Sampled rewards get zero-mean Gaussian noise of std `reward_noise`;
/// the optimal Q-function depends only on the means.
#[derive(Debug, Clone)]
pub struct FiniteMdp {
    pub n_states: usize,
    pub n_actions: usize,
    transition: Vec<f64>,
    reward: Vec<f64>,
    terminal: Vec<bool>,
    pub gamma: f64,
    pub reward_noise: f64,
}

impl FiniteMdp {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        terminal: Vec<bool>,
        gamma: f64,
        reward_noise: f64,
    ) -> Self {
        assert!(n_states >= 1 && n_actions >= 1);
        assert!((0.0..1.0).contains(&gamma));
        assert_eq!(transition.len(), n_states * n_actions * n_states);
        assert_eq!(reward.len(), n_states * n_actions);
        assert_eq!(terminal.len(), n_states);
        assert!(reward_noise >= 0.0);
        for s in 0..n_states {
            for a in 0..n_actions {
                let row = &transition[(s * n_actions + a) * n_states..][..n_states];
                let sum: f64 = row.iter().sum();
                assert!(
                    (sum - 1.0).abs() < 1e-12,
                    "P[{s}][{a}] sums to {sum}, expected 1"
                );
                assert!(row.iter().all(|&p| p >= 0.0));
            }
        }
        FiniteMdp {
            n_states,
            n_actions,
            transition,
            reward,
            terminal,
            gamma,
            reward_noise,
        }
    }

    pub fn transition_probs(&self, s: usize, a: usize) -> &[f64] {
        &self.transition[(s * self.n_actions + a) * self.n_states..][..self.n_states]
    }

    pub fn mean_reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn is_terminal(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn sample_next<R: Rng>(&self, s: usize, a: usize, rng: &mut R) -> usize {
        let probs = self.transition_probs(s, a);
        let draw: f64 = rng.gen();
        let mut acc = 0.0;
        for (s2, &p) in probs.iter().enumerate() {
            acc += p;
            if draw < acc {
                return s2;
            }
        }
        self.n_states - 1
    }

    pub fn sample_reward<R: Rng>(&self, s: usize, a: usize, rng: &mut R) -> f64 {
        self.mean_reward(s, a) + self.reward_noise * standard_normal(rng)
    }
}

/// The three value tables, each indexed by `s * n_actions + a`.
#[derive(Debug, Clone)]
pub struct QTables {
    pub q: [Vec<f64>; 3],
    n_actions: usize,
}

impl QTables {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        QTables {
            q: std::array::from_fn(|_| vec![0.0; n_states * n_actions]),
            n_actions,
        }
    }

    /// Three distinct uniform[-1, 1] tables. Identical initialization would
    /// keep the tables equal forever (they always regress toward the same
    /// target), which degenerates every aggregation strategy to standard
    /// Q-learning; distinct starts actually exercise it.
    pub fn random<R: Rng>(n_states: usize, n_actions: usize, rng: &mut R) -> Self {
        QTables {
            q: std::array::from_fn(|_| {
                (0..n_states * n_actions)
                    .map(|_| rng.gen::<f64>() * 2.0 - 1.0)
                    .collect()
            }),
            n_actions,
        }
    }

    pub fn get(&self, table: usize, s: usize, a: usize) -> f64 {
        self.q[table][s * self.n_actions + a]
    }

    /// Greedy action under table A, ties broken toward the lowest index.
    pub fn argmax_a(&self, s: usize) -> usize {
        let row = &self.q[0][s * self.n_actions..][..self.n_actions];
        let mut best = 0;
        for (a, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = a;
            }
        }
        best
    }

    /// Max over actions of table A at state `s`.
    pub fn max_a(&self, s: usize) -> f64 {
        let row = &self.q[0][s * self.n_actions..][..self.n_actions];
        row.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// The target value one triple-Q update regresses toward.
pub fn triple_q_target(
    tables: &QTables,
    r: f64,
    s_next: usize,
    terminal_next: bool,
    gamma: f64,
    strategy: TargetStrategy,
) -> f64 {
    if terminal_next {
        return r;
    }
    let a_star = tables.argmax_a(s_next);
    let g = aggregate(
        tables.get(0, s_next, a_star),
        tables.get(1, s_next, a_star),
        tables.get(2, s_next, a_star),
        strategy,
    );
    r + gamma * g
}

/// One clipped-triple-Q update: all three tables move toward the same target
/// at (s, a); every other entry is untouched.
#[allow(clippy::too_many_arguments)]
pub fn triple_q_step(
    tables: &mut QTables,
    s: usize,
    a: usize,
    r: f64,
    s_next: usize,
    terminal_next: bool,
    gamma: f64,
    lr: f64,
    strategy: TargetStrategy,
) {
    assert!((0.0..=1.0).contains(&lr));
    let y = triple_q_target(tables, r, s_next, terminal_next, gamma, strategy);
    let idx = s * tables.n_actions + a;
    for table in tables.q.iter_mut() {
        table[idx] = (1.0 - lr) * table[idx] + lr * y;
    }
}

/// Exact Q* by repeated Bellman optimality backups until the sup-norm
/// residual drops below `tol`. This is the oracle convergence is tested
/// against, so it is deliberately plain.
pub fn value_iteration(mdp: &FiniteMdp, tol: f64) -> Vec<f64> {
    assert!(tol > 0.0);
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let mut q = vec![0.0; ns * na];
    loop {
        let next = bellman_backup(mdp, &q);
        let residual = q
            .iter()
            .zip(&next)
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0, f64::max);
        q = next;
        if residual < tol {
            return q;
        }
    }
}

/// One application of the Bellman optimality operator.
pub fn bellman_backup(mdp: &FiniteMdp, q: &[f64]) -> Vec<f64> {
    let (ns, na) = (mdp.n_states, mdp.n_actions);
    let max_q = |s: usize| -> f64 {
        q[s * na..(s + 1) * na]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let mut out = vec![0.0; ns * na];
    for s in 0..ns {
        for a in 0..na {
            let mut v = mdp.mean_reward(s, a);
            for (s2, &p) in mdp.transition_probs(s, a).iter().enumerate() {
                if p > 0.0 && !mdp.is_terminal(s2) {
                    v += mdp.gamma * p * max_q(s2);
                }
            }
            out[s * na + a] = v;
        }
    }
    out
}

pub fn sup_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Behavior and learning-rate schedule for the convergence runs: epsilon-
/// greedy over table A with per-pair learning rates `1 / (1 + decay * visits)`,
/// which satisfies the Robbins-Monro conditions for every pair visited
/// infinitely often.
#[derive(Debug, Clone)]
pub struct Schedule {
    pub epsilon: f64,
    pub lr_decay: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            epsilon: 0.3,
            lr_decay: 0.01,
        }
    }
}

/// Sup-norm errors of the three tables against Q* at one checkpoint.
#[derive(Debug, Clone, Copy)]
pub struct ErrorPoint {
    pub step: usize,
    pub sup_error: [f64; 3],
}

/// Runs triple Q-learning on `mdp` and records `||Q_X - Q*||_inf` every
/// `record_every` steps (plus the final step).
pub fn run_convergence_experiment(
    mdp: &FiniteMdp,
    strategy: TargetStrategy,
    schedule: &Schedule,
    steps: usize,
    record_every: usize,
    seed: u64,
) -> Vec<ErrorPoint> {
    assert!(record_every > 0);
    let q_star = value_iteration(mdp, 1e-10);
    let mut rng: ChaCha8Rng = rng_from(seed, 0x74_61_62);
    let mut tables = QTables::random(mdp.n_states, mdp.n_actions, &mut rng);
    let mut visits = vec![0u64; mdp.n_states * mdp.n_actions];

    let mut out = Vec::with_capacity(steps / record_every + 1);
    let mut state = rng.gen_range(0..mdp.n_states);
    for step in 1..=steps {
        let action = if rng.gen::<f64>() < schedule.epsilon {
            rng.gen_range(0..mdp.n_actions)
        } else {
            tables.argmax_a(state)
        };
        let r = mdp.sample_reward(state, action, &mut rng);
        let s_next = mdp.sample_next(state, action, &mut rng);
        let idx = state * mdp.n_actions + action;
        let lr = 1.0 / (1.0 + schedule.lr_decay * visits[idx] as f64);
        visits[idx] += 1;
        triple_q_step(
            &mut tables,
            state,
            action,
            r,
            s_next,
            mdp.is_terminal(s_next),
            mdp.gamma,
            lr,
            strategy,
        );
        state = if mdp.is_terminal(s_next) {
            rng.gen_range(0..mdp.n_states)
        } else {
            s_next
        };

        if step % record_every == 0 || step == steps {
            out.push(ErrorPoint {
                step,
                sup_error: std::array::from_fn(|i| sup_norm_diff(&tables.q[i], &q_star)),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::random_mdp;

    fn single_state_mdp(gamma: f64) -> FiniteMdp {
        FiniteMdp::new(1, 1, vec![1.0], vec![1.0], vec![false], gamma, 0.0)
    }

    #[test]
    fn geometric_series_fixed_point() {
        let mut tables = QTables::zeros(1, 1);
        for _ in 0..2000 {
            triple_q_step(
                &mut tables,
                0,
                0,
                1.0,
                0,
                false,
                0.9,
                0.1,
                TargetStrategy::MedianThree,
            );
        }
        for t in 0..3 {
            assert!((tables.get(t, 0, 0) - 10.0).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        let mut tables = QTables::zeros(2, 2);
        tables.q[0][0] = 5.0;
        let before = tables.clone();
        triple_q_step(
            &mut tables,
            0,
            0,
            1.0,
            1,
            false,
            0.9,
            0.0,
            TargetStrategy::MeanSmallerTwo,
        );
        for t in 0..3 {
            assert_eq!(tables.q[t], before.q[t]);
        }
    }

    #[test]
    fn identical_tables_reduce_to_standard_q_learning() {
        let mut tables = QTables::zeros(3, 2);
        for t in 0..3 {
            tables.q[t] = vec![1.0, -0.5, 2.0, 0.25, -1.0, 0.75];
        }
        for strategy in [
            TargetStrategy::MeanSmallerTwo,
            TargetStrategy::MedianThree,
            TargetStrategy::MinPair,
        ] {
            let y = triple_q_target(&tables, 0.5, 1, false, 0.9, strategy);
            let standard = 0.5 + 0.9 * tables.max_a(1);
            assert_eq!(y, standard);
        }
    }

    #[test]
    fn exactly_one_cell_changes_per_table() {
        let mdp = random_mdp(3, 4, 3, 0.9);
        let mut tables = QTables::zeros(4, 3);
        for t in 0..3 {
            for (i, v) in tables.q[t].iter_mut().enumerate() {
                *v = (i as f64) * 0.1 + t as f64;
            }
        }
        let before = tables.clone();
        triple_q_step(
            &mut tables,
            2,
            1,
            0.3,
            0,
            mdp.is_terminal(0),
            0.9,
            0.5,
            TargetStrategy::MedianThree,
        );
        for t in 0..3 {
            let diffs: Vec<usize> = (0..12)
                .filter(|&i| tables.q[t][i] != before.q[t][i])
                .collect();
            assert_eq!(diffs, vec![2 * 3 + 1]);
        }
    }

    #[test]
    fn identically_initialized_tables_stay_equal_forever() {
        let mdp = random_mdp(8, 5, 3, 0.9);
        let mut tables = QTables::zeros(5, 3);
        let mut rng = rng_from(2, 0);
        let mut s = 0;
        for _ in 0..500 {
            let a = rng.gen_range(0..3);
            let r = mdp.sample_reward(s, a, &mut rng);
            let s2 = mdp.sample_next(s, a, &mut rng);
            triple_q_step(
                &mut tables,
                s,
                a,
                r,
                s2,
                false,
                0.9,
                0.2,
                TargetStrategy::MeanSmallerTwo,
            );
            s = s2;
            assert_eq!(tables.q[0], tables.q[1]);
            assert_eq!(tables.q[1], tables.q[2]);
        }
    }

    #[test]
    fn value_iteration_closed_forms() {
        let q = value_iteration(&single_state_mdp(0.9), 1e-10);
        assert!((q[0] - 10.0).abs() < 1e-8);

        let zero = FiniteMdp::new(2, 2, vec![0.5; 8], vec![0.0; 4], vec![false; 2], 0.9, 0.0);
        let q = value_iteration(&zero, 1e-10);
        assert!(q.iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn value_iteration_is_a_bellman_fixed_point() {
        let mdp = random_mdp(17, 6, 3, 0.9);
        let q = value_iteration(&mdp, 1e-10);
        let again = bellman_backup(&mdp, &q);
        assert!(sup_norm_diff(&q, &again) < 1e-9);
    }

    #[test]
    fn gamma_zero_converges_to_the_reward_table() {
        let mdp = random_mdp(5, 4, 2, 0.0);
        let pts = run_convergence_experiment(
            &mdp,
            TargetStrategy::MedianThree,
            &Schedule::default(),
            60_000,
            60_000,
            1,
        );
        let final_err = pts.last().unwrap().sup_error[0];
        // With gamma = 0 the targets are noisy rewards; the schedule averages
        // the noise away.
        assert!(final_err < 0.05, "sup error vs R table: {final_err}");
    }

    #[test]
    fn uniform_random_behavior_still_converges() {
        let mdp = random_mdp(9, 5, 3, 0.9);
        let schedule = Schedule {
            epsilon: 1.0,
            lr_decay: 0.01,
        };
        let pts = run_convergence_experiment(
            &mdp,
            TargetStrategy::MeanSmallerTwo,
            &schedule,
            150_000,
            150_000,
            3,
        );
        let q_star = value_iteration(&mdp, 1e-10);
        let scale = q_star.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        let final_err = pts.last().unwrap().sup_error[0];
        assert!(final_err < 0.05 * scale, "err {final_err} vs 5% of {scale}");
    }

    #[test]
    fn conservative_targets_average_below_max_based_targets() {
        // Winner's-curse check: over one fixed trajectory the aggregated
        // targets should average at or below standard max-based targets.
        let mdp = random_mdp(23, 6, 3, 0.9);
        let mut rng = rng_from(23, 1);
        let mut tables = QTables::random(6, 3, &mut rng);
        let mut visits = [0u64; 18];
        let mut s = 0usize;
        let (mut sum_g, mut sum_max) = (0.0, 0.0);
        let steps = 50_000;
        for _ in 0..steps {
            let a = if rng.gen::<f64>() < 0.3 {
                rng.gen_range(0..3)
            } else {
                tables.argmax_a(s)
            };
            let r = mdp.sample_reward(s, a, &mut rng);
            let s2 = mdp.sample_next(s, a, &mut rng);
            sum_g += triple_q_target(&tables, r, s2, false, 0.9, TargetStrategy::MeanSmallerTwo);
            sum_max += r + 0.9 * tables.max_a(s2);
            let idx = s * 3 + a;
            let lr = 1.0 / (1.0 + 0.01 * visits[idx] as f64);
            visits[idx] += 1;
            triple_q_step(
                &mut tables,
                s,
                a,
                r,
                s2,
                false,
                0.9,
                lr,
                TargetStrategy::MeanSmallerTwo,
            );
            s = s2;
        }
        assert!(
            sum_g / steps as f64 <= sum_max / steps as f64,
            "mean g-target {} above mean max-target {}",
            sum_g / steps as f64,
            sum_max / steps as f64
        );
    }

    #[test]
    fn sup_error_trend_is_non_increasing_over_exponential_checkpoints() {
        // Averaged over 10 seeds; per-step monotonicity is not claimed.
        let mdp = random_mdp(31, 6, 3, 0.9);
        let checkpoints = [1_000usize, 2_000, 4_000, 8_000, 16_000, 32_000, 64_000];
        let mut avg = vec![0.0; checkpoints.len()];
        for seed in 0..10 {
            let pts = run_convergence_experiment(
                &mdp,
                TargetStrategy::MedianThree,
                &Schedule::default(),
                64_000,
                1_000,
                seed,
            );
            for (i, &cp) in checkpoints.iter().enumerate() {
                let p = pts.iter().find(|p| p.step == cp).unwrap();
                avg[i] += p.sup_error[0] / 10.0;
            }
        }
        for w in avg.windows(2) {
            assert!(
                w[1] <= w[0] * 1.02,
                "average sup error rose across checkpoints: {avg:?}"
            );
        }
    }
}
