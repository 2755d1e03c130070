//! Squashed-Gaussian stochastic policy: reparameterized sampling, exact
//! log-density with the tanh change-of-variables correction, and smoothed
//! target actions for the shared Q-target.
//!
//! Pre-squash samples are `u = mu + exp(log_std) * eps`; actions are
//! `center + halfwidth * tanh(u)` per dimension, so every emitted action lies
//! inside the bounds. The density correction `log(1 - tanh(u)^2)` is computed
//! as `2 * (ln 2 - u - softplus(-2u))`, which stays accurate for |u| >> 1.

use crate::diffcore::{DiffArray, DiffError, NodeId, Tape};
use crate::nets::ActorNet;
use crate::rng::fill_standard_normal;
use rand::Rng;
use thiserror::Error;

const LOG_2PI: f64 = 1.8378770664093453; // ln(2*pi)
const LN_2: f64 = std::f64::consts::LN_2;

/// Margin keeping inverse-squashed values inside the open tanh image.
const SQUASH_EPS: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("action[{index}] = {value} outside bounds [{low}, {high}]")]
    ActionOutOfBounds {
        index: usize,
        value: f64,
        low: f64,
        high: f64,
    },
}

/// Per-dimension closed action interval.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionBounds {
    low: Vec<f64>,
    high: Vec<f64>,
}

impl ActionBounds {
    pub fn new(low: Vec<f64>, high: Vec<f64>) -> Self {
        assert_eq!(low.len(), high.len());
        assert!(!low.is_empty());
        for (l, h) in low.iter().zip(&high) {
            assert!(l.is_finite() && h.is_finite() && l < h);
        }
        ActionBounds { low, high }
    }

    /// Symmetric bounds [-b, b] in every dimension.
    pub fn symmetric(dim: usize, b: f64) -> Self {
        ActionBounds::new(vec![-b; dim], vec![b; dim])
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }

    pub fn low(&self) -> &[f64] {
        &self.low
    }

    pub fn high(&self) -> &[f64] {
        &self.high
    }

    pub fn center(&self, i: usize) -> f64 {
        0.5 * (self.low[i] + self.high[i])
    }

    pub fn halfwidth(&self, i: usize) -> f64 {
        0.5 * (self.high[i] - self.low[i])
    }

    pub fn contains(&self, action: &[f64]) -> bool {
        action.len() == self.dim()
            && action
                .iter()
                .enumerate()
                .all(|(i, &a)| a >= self.low[i] && a <= self.high[i])
    }

    pub fn clip(&self, action: &mut [f64]) {
        for (i, a) in action.iter_mut().enumerate() {
            *a = a.clamp(self.low[i], self.high[i]);
        }
    }

    /// Uniform draw, for warmup exploration.
    pub fn sample_uniform<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.dim())
            .map(|i| self.low[i] + rng.gen::<f64>() * (self.high[i] - self.low[i]))
            .collect()
    }
}

/// One reparameterized draw.
#[derive(Debug, Clone)]
pub struct ActionSample {
    pub pre_squash: Vec<f64>,
    pub action: Vec<f64>,
    pub log_prob: f64,
}

/// Target-action smoothing parameters; `sigma` and `clip` are in pre-scale
/// units (fractions of the half-width).
#[derive(Debug, Clone)]
pub struct SmoothingSpec {
    pub sigma: f64,
    pub clip: f64,
    pub bounds: ActionBounds,
}

impl SmoothingSpec {
    pub fn new(sigma: f64, clip: f64, bounds: ActionBounds) -> Self {
        assert!(sigma >= 0.0 && clip > 0.0);
        SmoothingSpec {
            sigma,
            clip,
            bounds,
        }
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `log(1 - tanh(u)^2)` without catastrophic cancellation.
fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (LN_2 - u - softplus(-2.0 * u))
}

/// Log-density of an unsquashed Gaussian at `u`.
pub fn gaussian_log_prob(mu: &[f64], log_std: &[f64], u: &[f64]) -> f64 {
    mu.iter()
        .zip(log_std)
        .zip(u)
        .map(|((&m, &ls), &ui)| {
            let z = (ui - m) * (-ls).exp();
            -0.5 * LOG_2PI - ls - 0.5 * z * z
        })
        .sum()
}

/// Squashed log-density given the pre-squash value `u`.
fn squashed_log_prob_from_u(mu: &[f64], log_std: &[f64], u: &[f64], bounds: &ActionBounds) -> f64 {
    let mut lp = gaussian_log_prob(mu, log_std, u);
    for (i, &ui) in u.iter().enumerate() {
        lp -= log_one_minus_tanh_sq(ui);
        lp -= bounds.halfwidth(i).ln();
    }
    lp
}

/// Draw `a = squash(mu + exp(log_std) * eps)` with its exact log-density.
pub fn sample_reparam(
    mu: &[f64],
    log_std: &[f64],
    eps: &[f64],
    bounds: &ActionBounds,
) -> ActionSample {
    assert_eq!(mu.len(), bounds.dim());
    assert_eq!(mu.len(), log_std.len());
    assert_eq!(mu.len(), eps.len());
    let u: Vec<f64> = mu
        .iter()
        .zip(log_std)
        .zip(eps)
        .map(|((&m, &ls), &e)| m + ls.exp() * e)
        .collect();
    let action: Vec<f64> = u
        .iter()
        .enumerate()
        .map(|(i, &ui)| bounds.center(i) + bounds.halfwidth(i) * ui.tanh())
        .collect();
    let log_prob = squashed_log_prob_from_u(mu, log_std, &u, bounds);
    ActionSample {
        pre_squash: u,
        action,
        log_prob,
    }
}

/// Log-density of `action` under the squashed Gaussian. The normalized value
/// is pulled into the open tanh image before the inverse, so densities at the
/// clipped boundary stay finite.
pub fn log_prob_of(
    mu: &[f64],
    log_std: &[f64],
    action: &[f64],
    bounds: &ActionBounds,
) -> Result<f64, PolicyError> {
    assert_eq!(mu.len(), bounds.dim());
    assert_eq!(action.len(), bounds.dim());
    for (i, &a) in action.iter().enumerate() {
        if a < bounds.low()[i] || a > bounds.high()[i] {
            return Err(PolicyError::ActionOutOfBounds {
                index: i,
                value: a,
                low: bounds.low()[i],
                high: bounds.high()[i],
            });
        }
    }
    let u: Vec<f64> = action
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let t = (a - bounds.center(i)) / bounds.halfwidth(i);
            t.clamp(-1.0 + SQUASH_EPS, 1.0 - SQUASH_EPS).atanh()
        })
        .collect();
    Ok(squashed_log_prob_from_u(mu, log_std, &u, bounds))
}

/// Noise-free evaluation action: squashed mean scaled to bounds.
pub fn deterministic_action(mu: &[f64], bounds: &ActionBounds) -> Vec<f64> {
    mu.iter()
        .enumerate()
        .map(|(i, &m)| bounds.center(i) + bounds.halfwidth(i) * m.tanh())
        .collect()
}

/// Adds clipped smoothing noise (pre-scale units) to one action and clips the
/// result back into bounds.
pub fn apply_smoothing(action: &[f64], raw_noise: &[f64], spec: &SmoothingSpec) -> Vec<f64> {
    action
        .iter()
        .enumerate()
        .map(|(i, &a)| {
            let n = (raw_noise[i] * spec.sigma).clamp(-spec.clip, spec.clip);
            let hw = spec.bounds.halfwidth(i);
            (a + hw * n).clamp(spec.bounds.low()[i], spec.bounds.high()[i])
        })
        .collect()
}

/// Smoothed target actions and their log-density under the target policy.
///
/// `stochastic = false` uses the squashed mean (deterministic-head variants).
/// The density is evaluated at the final perturbed-and-clipped action, exactly
/// as the shared Q-target consumes it.
pub fn target_action<R: Rng>(
    actor_target: &ActorNet,
    s_next: &DiffArray,
    spec: &SmoothingSpec,
    stochastic: bool,
    rng: &mut R,
) -> (DiffArray, Vec<f64>) {
    let batch = s_next.shape()[0];
    let dim = spec.bounds.dim();
    let (mu, log_std) = actor_target.forward_values(s_next);

    let mut actions = Vec::with_capacity(batch * dim);
    let mut log_probs = Vec::with_capacity(batch);
    let mut eps = vec![0.0; dim];
    let mut noise = vec![0.0; dim];
    for r in 0..batch {
        let mu_r = &mu.data()[r * dim..(r + 1) * dim];
        let ls_r = &log_std.data()[r * dim..(r + 1) * dim];
        let base = if stochastic {
            fill_standard_normal(rng, &mut eps);
            sample_reparam(mu_r, ls_r, &eps, &spec.bounds).action
        } else {
            deterministic_action(mu_r, &spec.bounds)
        };
        let a = if spec.sigma > 0.0 {
            fill_standard_normal(rng, &mut noise);
            apply_smoothing(&base, &noise, spec)
        } else {
            base
        };
        let lp =
            log_prob_of(mu_r, ls_r, &a, &spec.bounds).expect("smoothed action clipped into bounds");
        log_probs.push(lp);
        actions.extend_from_slice(&a);
    }
    (DiffArray::matrix(batch, dim, actions), log_probs)
}

/// A reparameterized sample recorded on the tape: `action` is (batch, dim),
/// `log_prob` is a (batch, 1) column. Gradients flow to `mu` and `log_std`.
pub struct TapedSample {
    pub action: NodeId,
    pub log_prob: NodeId,
}

/// Builds the squashed sample and its log-density on the tape with `eps`
/// held constant, so backward gives the pathwise derivative.
pub fn sample_reparam_on_tape(
    tape: &mut Tape,
    mu: NodeId,
    log_std: NodeId,
    eps: &DiffArray,
    bounds: &ActionBounds,
) -> Result<TapedSample, DiffError> {
    let shape = tape.value(mu).shape().to_vec();
    let (batch, dim) = (shape[0], shape[1]);
    assert_eq!(dim, bounds.dim());
    assert_eq!(tape.value(log_std).shape(), shape.as_slice());
    assert_eq!(eps.shape(), shape.as_slice());

    let tile = |vals: Vec<f64>| {
        let mut data = Vec::with_capacity(batch * dim);
        for _ in 0..batch {
            data.extend_from_slice(&vals);
        }
        DiffArray::matrix(batch, dim, data)
    };
    let centers = tile((0..dim).map(|i| bounds.center(i)).collect());
    let halfwidths = tile((0..dim).map(|i| bounds.halfwidth(i)).collect());

    // u = mu + exp(log_std) * eps
    let eps_node = tape.leaf(eps.clone());
    let std = tape.exp(log_std);
    let noise = tape.mul(std, eps_node)?;
    let u = tape.add(mu, noise)?;

    // action = center + halfwidth * tanh(u)
    let t = tape.tanh(u);
    let hw = tape.leaf(halfwidths);
    let scaled = tape.mul(t, hw)?;
    let cn = tape.leaf(centers);
    let action = tape.add(scaled, cn)?;

    // Gaussian term: -0.5*ln(2pi) - log_std - 0.5*eps^2 per element. With u a
    // function of (mu, log_std) the quadratic term's total derivative is zero,
    // so eps enters only as data.
    let gauss_const: Vec<f64> = eps
        .data()
        .iter()
        .map(|&e| -0.5 * (LOG_2PI + e * e))
        .collect();
    let gc = tape.leaf(DiffArray::matrix(batch, dim, gauss_const));
    let neg_ls = tape.scale(log_std, -1.0);
    let gauss = tape.add(gc, neg_ls)?;

    // Squash correction: -log(1 - tanh(u)^2) = 2u + 2*softplus(-2u) - 2*ln2,
    // with softplus(x) = relu(x) + ln(1 + exp(-|x|)).
    let x = tape.scale(u, -2.0);
    let rp = tape.relu(x);
    let xneg = tape.scale(x, -1.0);
    let rn = tape.relu(xneg);
    let absx = tape.add(rp, rn)?;
    let negabs = tape.scale(absx, -1.0);
    let ex = tape.exp(negabs);
    let ones = tape.leaf(DiffArray::matrix(batch, dim, vec![1.0; batch * dim]));
    let onepex = tape.add(ex, ones)?;
    let lg = tape.log(onepex)?;
    let sp = tape.add(rp, lg)?;
    let two_u = tape.scale(u, 2.0);
    let two_sp = tape.scale(sp, 2.0);
    let corr_pos = tape.add(two_u, two_sp)?;
    let ln2 = tape.leaf(DiffArray::matrix(
        batch,
        dim,
        vec![-2.0 * LN_2; batch * dim],
    ));
    let correction = tape.add(corr_pos, ln2)?;

    // Per-element log-density, then a row sum via matmul with a ones column,
    // plus the constant -sum(ln halfwidth).
    let elem = tape.add(gauss, correction)?;
    let ones_col = tape.leaf(DiffArray::matrix(dim, 1, vec![1.0; dim]));
    let row_sum = tape.matmul(elem, ones_col)?;
    let hw_offset: f64 = (0..dim).map(|i| -bounds.halfwidth(i).ln()).sum();
    let offset = tape.leaf(DiffArray::matrix(batch, 1, vec![hw_offset; batch]));
    let log_prob = tape.add(row_sum, offset)?;

    Ok(TapedSample { action, log_prob })
}
