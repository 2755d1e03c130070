//! MLP actor and critic networks: parameter stores, seeded initialization,
//! tape-based forward passes, Polyak target updates, and the Adam optimizer
//! used for all gradient-trained parameters.

use crate::diffcore::{DiffArray, DiffError, NodeId, Tape};
use crate::rng::rng_from;
use rand::Rng;

/// Clamp range for the actor's log-std head.
pub const LOGSTD_MIN: f64 = -20.0;
pub const LOGSTD_MAX: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

/// Architecture of one dense network: `input -> hidden... -> output`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, output_dim: usize) -> Self {
        let spec = MlpSpec {
            input_dim,
            hidden,
            output_dim,
            activation: Activation::Relu,
        };
        assert!(spec.input_dim >= 1 && spec.output_dim >= 1);
        assert!(spec.hidden.iter().all(|&h| h >= 1));
        spec
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    /// Layer dimensions as (fan_in, fan_out) pairs.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims: Vec<usize> = Vec::with_capacity(self.hidden.len() + 2);
        dims.push(self.input_dim);
        dims.extend(&self.hidden);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// Ordered (weight, bias) pairs for one dense network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    layers: Vec<(DiffArray, DiffArray)>,
}

/// Weights uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)], biases zero,
/// deterministic per seed.
pub fn init_params(spec: &MlpSpec, seed: u64) -> ParamSet {
    let mut rng = rng_from(seed, 0x70_61_72_61_6d);
    let layers = spec
        .layer_dims()
        .iter()
        .map(|&(fan_in, fan_out)| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng.gen::<f64>() * 2.0 * bound - bound)
                .collect();
            (
                DiffArray::matrix(fan_in, fan_out, w),
                DiffArray::row(vec![0.0; fan_out]),
            )
        })
        .collect();
    ParamSet { layers }
}

impl ParamSet {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Flat views in canonical order (w0, b0, w1, b1, ...).
    pub fn arrays(&self) -> impl Iterator<Item = &DiffArray> {
        self.layers.iter().flat_map(|(w, b)| [w, b])
    }

    pub fn arrays_mut(&mut self) -> impl Iterator<Item = &mut DiffArray> {
        self.layers.iter_mut().flat_map(|(w, b)| [w, b])
    }

    pub fn from_arrays(arrays: Vec<DiffArray>) -> Self {
        assert!(arrays.len().is_multiple_of(2));
        let mut layers = Vec::with_capacity(arrays.len() / 2);
        let mut it = arrays.into_iter();
        while let (Some(w), Some(b)) = (it.next(), it.next()) {
            layers.push((w, b));
        }
        ParamSet { layers }
    }

    pub fn n_params(&self) -> usize {
        self.arrays().map(|a| a.numel()).sum()
    }

    /// Register every array as a tape leaf, in canonical order.
    pub fn register(&self, tape: &mut Tape) -> TapedParams {
        let ids = self
            .layers
            .iter()
            .map(|(w, b)| (tape.leaf(w.clone()), tape.leaf(b.clone())))
            .collect();
        TapedParams { ids }
    }

    /// Collect the flattened parameter vector (for finite-difference checks).
    pub fn flatten(&self) -> Vec<f64> {
        self.arrays().flat_map(|a| a.data().to_vec()).collect()
    }

    /// Overwrite parameters from a flat vector in canonical order.
    pub fn load_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for arr in self.arrays_mut() {
            let n = arr.numel();
            arr.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len());
    }
}

/// Node ids of one ParamSet's leaves on a live tape.
pub struct TapedParams {
    ids: Vec<(NodeId, NodeId)>,
}

impl TapedParams {
    pub fn leaf_ids(&self) -> Vec<NodeId> {
        self.ids.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

fn apply_activation(tape: &mut Tape, x: NodeId, act: Activation) -> NodeId {
    match act {
        Activation::Relu => tape.relu(x),
        Activation::Tanh => tape.tanh(x),
    }
}

/// x @ w + b on the tape.
fn affine(tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
    let xw = tape.matmul(x, w)?;
    tape.add(xw, b)
}

/// Forward through all layers with the activation on hidden layers only.
fn forward_mlp(
    tape: &mut Tape,
    taped: &TapedParams,
    x: NodeId,
    activation: Activation,
) -> Result<NodeId, DiffError> {
    let last = taped.ids.len() - 1;
    let mut h = x;
    for (i, &(w, b)) in taped.ids.iter().enumerate() {
        h = affine(tape, h, w, b)?;
        if i < last {
            h = apply_activation(tape, h, activation);
        }
    }
    Ok(h)
}

/// Stochastic policy network: a shared trunk and two linear heads producing
/// the Gaussian mean and (clamped) log standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorNet {
    pub obs_dim: usize,
    pub action_dim: usize,
    activation: Activation,
    trunk: ParamSet,
    mean_head: ParamSet,
    logstd_head: ParamSet,
}

/// Tape registration of a whole actor.
pub struct TapedActor {
    trunk: TapedParams,
    mean_head: TapedParams,
    logstd_head: TapedParams,
    activation: Activation,
}

impl TapedActor {
    pub fn leaf_ids(&self) -> Vec<NodeId> {
        let mut ids = self.trunk.leaf_ids();
        ids.extend(self.mean_head.leaf_ids());
        ids.extend(self.logstd_head.leaf_ids());
        ids
    }
}

impl ActorNet {
    pub fn new(
        obs_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        activation: Activation,
        seed: u64,
    ) -> Self {
        assert!(!hidden.is_empty(), "actor needs at least one hidden layer");
        let last = *hidden.last().unwrap();
        let trunk_spec = MlpSpec::new(obs_dim, hidden[..hidden.len() - 1].to_vec(), last)
            .with_activation(activation);
        let head_spec = MlpSpec::new(last, vec![], action_dim);
        ActorNet {
            obs_dim,
            action_dim,
            activation,
            trunk: init_params(&trunk_spec, rng_from(seed, 1).gen()),
            mean_head: init_params(&head_spec, rng_from(seed, 2).gen()),
            logstd_head: init_params(&head_spec, rng_from(seed, 3).gen()),
        }
    }

    /// Rebuild an actor from its three parameter groups (checkpoint path).
    pub fn from_parts(
        activation: Activation,
        trunk: ParamSet,
        mean_head: ParamSet,
        logstd_head: ParamSet,
    ) -> Self {
        let obs_dim = trunk.layers[0].0.shape()[0];
        let action_dim = mean_head.layers[0].0.shape()[1];
        assert_eq!(mean_head.n_layers(), 1);
        assert_eq!(logstd_head.n_layers(), 1);
        ActorNet {
            obs_dim,
            action_dim,
            activation,
            trunk,
            mean_head,
            logstd_head,
        }
    }

    pub fn register(&self, tape: &mut Tape) -> TapedActor {
        TapedActor {
            trunk: self.trunk.register(tape),
            mean_head: self.mean_head.register(tape),
            logstd_head: self.logstd_head.register(tape),
            activation: self.activation,
        }
    }

    /// Forward a batch of states to (mu, log_std) nodes; log_std is clamped
    /// to [LOGSTD_MIN, LOGSTD_MAX].
    pub fn forward(
        &self,
        tape: &mut Tape,
        taped: &TapedActor,
        states: NodeId,
    ) -> Result<(NodeId, NodeId), DiffError> {
        // Trunk applies the activation after every layer, heads are linear.
        let mut h = states;
        for &(w, b) in &taped.trunk.ids {
            h = affine(tape, h, w, b)?;
            h = apply_activation(tape, h, taped.activation);
        }
        let (mw, mb) = taped.mean_head.ids[0];
        let mu = affine(tape, h, mw, mb)?;
        let (lw, lb) = taped.logstd_head.ids[0];
        let raw = affine(tape, h, lw, lb)?;
        let log_std = tape.clamp(raw, LOGSTD_MIN, LOGSTD_MAX);
        Ok((mu, log_std))
    }

    /// Value-only forward on a scratch tape.
    pub fn forward_values(&self, states: &DiffArray) -> (DiffArray, DiffArray) {
        let mut tape = Tape::new();
        let taped = self.register(&mut tape);
        let s = tape.leaf(states.clone());
        let (mu, ls) = self
            .forward(&mut tape, &taped, s)
            .expect("actor forward on validated shapes");
        (tape.value(mu).clone(), tape.value(ls).clone())
    }

    pub fn params(&self) -> [&ParamSet; 3] {
        [&self.trunk, &self.mean_head, &self.logstd_head]
    }

    pub fn params_mut(&mut self) -> [&mut ParamSet; 3] {
        [&mut self.trunk, &mut self.mean_head, &mut self.logstd_head]
    }
}

/// Soft Q-network mapping a concatenated (state, action) batch to one scalar
/// per row.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticNet {
    pub obs_dim: usize,
    pub action_dim: usize,
    activation: Activation,
    params: ParamSet,
}

pub struct TapedCritic {
    params: TapedParams,
    activation: Activation,
}

impl TapedCritic {
    pub fn leaf_ids(&self) -> Vec<NodeId> {
        self.params.leaf_ids()
    }
}

impl CriticNet {
    pub fn new(
        obs_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        activation: Activation,
        seed: u64,
    ) -> Self {
        let spec =
            MlpSpec::new(obs_dim + action_dim, hidden.to_vec(), 1).with_activation(activation);
        CriticNet {
            obs_dim,
            action_dim,
            activation,
            params: init_params(&spec, rng_from(seed, 4).gen()),
        }
    }

    /// Rebuild a critic from its parameters (checkpoint path). The action
    /// dimension cannot be recovered from shapes alone, so it is passed in.
    pub fn from_parts(activation: Activation, action_dim: usize, params: ParamSet) -> Self {
        let in_dim = params.layers[0].0.shape()[0];
        assert!(action_dim < in_dim);
        CriticNet {
            obs_dim: in_dim - action_dim,
            action_dim,
            activation,
            params,
        }
    }

    pub fn register(&self, tape: &mut Tape) -> TapedCritic {
        TapedCritic {
            params: self.params.register(tape),
            activation: self.activation,
        }
    }

    /// Forward with the (state, action) concatenation done by the caller;
    /// returns the (batch, 1) Q column.
    pub fn forward(
        &self,
        tape: &mut Tape,
        taped: &TapedCritic,
        states_actions: NodeId,
    ) -> Result<NodeId, DiffError> {
        forward_mlp(tape, &taped.params, states_actions, taped.activation)
    }

    /// Forward with the action as a differentiable tape node. The first-layer
    /// weight is split into state and action blocks so the concatenation
    /// becomes `s @ W_s + a @ W_a`, letting gradients reach the action.
    pub fn forward_split(
        &self,
        tape: &mut Tape,
        states: NodeId,
        actions: NodeId,
    ) -> Result<NodeId, DiffError> {
        let (w1, b1) = &self.params.layers[0];
        let h = w1.shape()[1];
        let w_s = DiffArray::matrix(self.obs_dim, h, w1.data()[..self.obs_dim * h].to_vec());
        let w_a = DiffArray::matrix(self.action_dim, h, w1.data()[self.obs_dim * h..].to_vec());
        let (ws, wa, b1) = (tape.leaf(w_s), tape.leaf(w_a), tape.leaf(b1.clone()));
        let sw = tape.matmul(states, ws)?;
        let aw = tape.matmul(actions, wa)?;
        let lin = tape.add(sw, aw)?;
        let mut hnode = tape.add(lin, b1)?;
        hnode = apply_activation(tape, hnode, self.activation);

        let last = self.params.layers.len() - 1;
        for (i, (w, b)) in self.params.layers.iter().enumerate().skip(1) {
            let (w, b) = (tape.leaf(w.clone()), tape.leaf(b.clone()));
            hnode = affine(tape, hnode, w, b)?;
            if i < last {
                hnode = apply_activation(tape, hnode, self.activation);
            }
        }
        Ok(hnode)
    }

    /// Q values for a concatenated (batch, obs+act) input, no tape kept.
    pub fn q_values(&self, states_actions: &DiffArray) -> Vec<f64> {
        let mut tape = Tape::new();
        let taped = self.register(&mut tape);
        let x = tape.leaf(states_actions.clone());
        let q = self
            .forward(&mut tape, &taped, x)
            .expect("critic forward on validated shapes");
        tape.value(q).data().to_vec()
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

/// In-place Polyak blend: `target <- tau * target + (1 - tau) * model`.
/// Here `tau` is the retention coefficient, so `tau = 1` keeps the target
/// frozen and `tau = 0` copies the model outright.
pub fn polyak_update(target: &mut ParamSet, model: &ParamSet, tau: f64) {
    assert!((0.0..=1.0).contains(&tau), "tau must be in [0, 1]");
    for (t, m) in target.arrays_mut().zip(model.arrays()) {
        assert_eq!(t.shape(), m.shape(), "polyak shape mismatch");
        for (tv, &mv) in t.data_mut().iter_mut().zip(m.data()) {
            *tv = tau * *tv + (1.0 - tau) * mv;
        }
    }
}

/// Adam over the arrays of one ParamSet-like parameter group.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params(lr: f64, params: &ParamSet) -> Self {
        let sizes: Vec<usize> = params.arrays().map(|a| a.numel()).collect();
        Adam::new(lr, &sizes)
    }

    /// One bias-corrected update; `grads` must line up with the arrays the
    /// optimizer was sized for.
    pub fn step<'a>(
        &mut self,
        params: impl Iterator<Item = &'a mut DiffArray>,
        grads: &[DiffArray],
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut idx = 0;
        for arr in params {
            let g = grads[idx].data();
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            assert_eq!(g.len(), m.len(), "adam gradient size mismatch");
            for ((p, mi), (vi, &gi)) in arr
                .data_mut()
                .iter_mut()
                .zip(m.iter_mut())
                .zip(v.iter_mut().zip(g))
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            idx += 1;
        }
        assert_eq!(idx, grads.len());
    }
}
