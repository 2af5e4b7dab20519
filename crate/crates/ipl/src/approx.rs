//! Learnable function representations: dense tables and a small MLP with
//! hand-implemented reverse-mode gradients, plus the Adam optimizer.
//!
//! All math is double precision so oracle comparisons at 1e-5..1e-10
//! tolerances are meaningful. Hidden activations are tanh, keeping every
//! loss smooth for finite-difference checks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::Policy;

/// What a parameter block parameterizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Q,
    V,
    Policy,
    Reward,
}

/// Flat parameter vector with a role tag. Shape metadata lives on the
/// function that owns the block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub role: Role,
    pub values: Vec<f64>,
}

impl ParamBlock {
    pub fn zeros(role: Role, len: usize) -> Self {
        Self {
            role,
            values: vec![0.0; len],
        }
    }
}

/// Evaluation point for a learnable function.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Input {
    State(usize),
    StateAction(usize, usize),
}

/// Table shape: [state][action] or [state].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableShape {
    StateAction { n_states: usize, n_actions: usize },
    State { n_states: usize },
}

/// Dense table viewed as a differentiable function; the gradient of a cell
/// read is one-hot at that cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularFn {
    pub shape: TableShape,
    pub block: ParamBlock,
}

impl TabularFn {
    pub fn zeros(role: Role, shape: TableShape) -> Self {
        let len = match shape {
            TableShape::StateAction { n_states, n_actions } => n_states * n_actions,
            TableShape::State { n_states } => n_states,
        };
        Self {
            shape,
            block: ParamBlock::zeros(role, len),
        }
    }

    fn index(&self, input: &Input) -> usize {
        match (self.shape, input) {
            (TableShape::StateAction { n_states, n_actions }, Input::StateAction(s, a)) => {
                assert!(*s < n_states && *a < n_actions, "index out of range");
                s * n_actions + a
            }
            (TableShape::State { n_states }, Input::State(s)) => {
                assert!(*s < n_states, "index out of range");
                *s
            }
            _ => panic!("input kind does not match table shape"),
        }
    }
}

/// Maps an (state) or (state, action) input to a feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Featurizer {
    /// one-hot(state); dimension n_states.
    StateOneHot { n_states: usize },
    /// one-hot(state) concatenated with one-hot(action).
    StateActionOneHot { n_states: usize, n_actions: usize },
}

impl Featurizer {
    pub fn dim(&self) -> usize {
        match self {
            Featurizer::StateOneHot { n_states } => *n_states,
            Featurizer::StateActionOneHot { n_states, n_actions } => n_states + n_actions,
        }
    }

    pub fn features(&self, input: &Input) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        match (self, input) {
            (Featurizer::StateOneHot { n_states }, Input::State(s)) => {
                assert!(*s < *n_states, "state out of range");
                x[*s] = 1.0;
            }
            (Featurizer::StateActionOneHot { n_states, n_actions }, Input::StateAction(s, a)) => {
                assert!(*s < *n_states && *a < *n_actions, "index out of range");
                x[*s] = 1.0;
                x[n_states + a] = 1.0;
            }
            _ => panic!("input kind does not match featurizer"),
        }
        x
    }
}

/// Feed-forward MLP: tanh hidden layers, linear output.
///
/// Parameter layout, per layer: row-major weights (fan_in x fan_out), then
/// biases (fan_out).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpFn {
    pub featurizer: Featurizer,
    /// Layer widths including input and output: [d_in, h_1, ..., d_out].
    pub layer_sizes: Vec<usize>,
    pub block: ParamBlock,
}

impl MlpFn {
    pub fn zeros(role: Role, featurizer: Featurizer, hidden: &[usize], out_dim: usize) -> Self {
        let mut layer_sizes = vec![featurizer.dim()];
        layer_sizes.extend_from_slice(hidden);
        layer_sizes.push(out_dim);
        let count = mlp_param_count(&layer_sizes);
        Self {
            featurizer,
            layer_sizes,
            block: ParamBlock::zeros(role, count),
        }
    }

    /// Xavier-uniform init for hidden symmetry breaking.
    pub fn init_xavier(&mut self, rng: &mut impl Rng) {
        let mut offset = 0;
        for l in 0..self.layer_sizes.len() - 1 {
            let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let scale = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for i in 0..fan_in * fan_out {
                self.block.values[offset + i] = rng.gen_range(-scale..=scale);
            }
            offset += fan_in * fan_out + fan_out; // biases stay zero
        }
    }

    pub fn out_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Forward pass on a raw feature vector.
    pub fn forward_features(&self, features: &[f64]) -> Vec<f64> {
        assert_eq!(features.len(), self.layer_sizes[0], "feature dim mismatch");
        let mut activation = features.to_vec();
        let mut offset = 0;
        let last = self.layer_sizes.len() - 2;
        for l in 0..self.layer_sizes.len() - 1 {
            let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let w = &self.block.values[offset..offset + fan_in * fan_out];
            let b = &self.block.values[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            let mut next = b.to_vec();
            for i in 0..fan_in {
                let xi = activation[i];
                if xi != 0.0 {
                    for j in 0..fan_out {
                        next[j] += xi * w[i * fan_out + j];
                    }
                }
            }
            if l != last {
                for v in next.iter_mut() {
                    *v = v.tanh();
                }
            }
            activation = next;
            offset += fan_in * fan_out + fan_out;
        }
        activation
    }

    /// Reverse-mode gradient on a raw feature vector: accumulates
    /// d(upstream . output)/d(params) into `grad`.
    pub fn accumulate_grad_features(&self, features: &[f64], upstream: &[f64], grad: &mut [f64]) {
        assert_eq!(grad.len(), self.block.values.len(), "grad buffer size mismatch");
        // Forward pass, caching post-activation values per layer.
        let n_layers = self.layer_sizes.len() - 1;
        let mut activations: Vec<Vec<f64>> = Vec::with_capacity(n_layers + 1);
        activations.push(features.to_vec());
        let mut offsets = Vec::with_capacity(n_layers);
        let mut offset = 0;
        for l in 0..n_layers {
            offsets.push(offset);
            let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let w = &self.block.values[offset..offset + fan_in * fan_out];
            let b = &self.block.values[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
            let prev = &activations[l];
            let mut next = b.to_vec();
            for i in 0..fan_in {
                let xi = prev[i];
                if xi != 0.0 {
                    for j in 0..fan_out {
                        next[j] += xi * w[i * fan_out + j];
                    }
                }
            }
            if l != n_layers - 1 {
                for v in next.iter_mut() {
                    *v = v.tanh();
                }
            }
            activations.push(next);
            offset += fan_in * fan_out + fan_out;
        }
        // Backward pass.
        let mut delta = upstream.to_vec();
        for l in (0..n_layers).rev() {
            let (fan_in, fan_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let off = offsets[l];
            let prev = &activations[l];
            // Weight and bias grads.
            for j in 0..fan_out {
                let dj = delta[j];
                if dj == 0.0 {
                    continue;
                }
                for i in 0..fan_in {
                    grad[off + i * fan_out + j] += prev[i] * dj;
                }
                grad[off + fan_in * fan_out + j] += dj;
            }
            if l == 0 {
                break;
            }
            // Propagate to previous layer through the tanh of layer l-1's output.
            let w = &self.block.values[off..off + fan_in * fan_out];
            let mut prev_delta = vec![0.0; fan_in];
            for i in 0..fan_in {
                let mut acc = 0.0;
                for j in 0..fan_out {
                    acc += w[i * fan_out + j] * delta[j];
                }
                // prev[i] = tanh(z); d tanh/dz = 1 - tanh^2.
                prev_delta[i] = acc * (1.0 - prev[i] * prev[i]);
            }
            delta = prev_delta;
        }
    }
}

fn mlp_param_count(layer_sizes: &[usize]) -> usize {
    layer_sizes
        .windows(2)
        .map(|w| (w[0] + 1) * w[1])
        .sum()
}

/// Q-function parameterized through policy logits:
/// Q(s,a) = alpha * (log softmax(theta)(s,a) - log mu(a|s)).
///
/// This is the contextual-bandit view where the policy *is* the Q-function;
/// gradients flow through the log-softmax into the logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyLogRatioFn {
    pub n_states: usize,
    pub n_actions: usize,
    pub alpha: f64,
    log_mu: Vec<f64>,
    pub block: ParamBlock,
}

impl PolicyLogRatioFn {
    pub fn new(mu: &Policy, alpha: f64) -> Result<Self> {
        if alpha <= 0.0 {
            return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
        }
        let (ns, na) = (mu.n_states(), mu.n_actions());
        let mut log_mu = Vec::with_capacity(ns * na);
        for s in 0..ns {
            for a in 0..na {
                let p = mu.prob(s, a);
                if p <= 0.0 {
                    return Err(Error::Evaluation(format!(
                        "reference policy has zero mass on action {a} in state {s}"
                    )));
                }
                log_mu.push(p.ln());
            }
        }
        Ok(Self {
            n_states: ns,
            n_actions: na,
            alpha,
            log_mu,
            block: ParamBlock::zeros(Role::Q, ns * na),
        })
    }

    fn log_softmax_row(&self, s: usize) -> Vec<f64> {
        let row = &self.block.values[s * self.n_actions..(s + 1) * self.n_actions];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        row.iter().map(|x| x - lse).collect()
    }

    pub fn value(&self, s: usize, a: usize) -> f64 {
        let log_pi = self.log_softmax_row(s);
        self.alpha * (log_pi[a] - self.log_mu[s * self.n_actions + a])
    }

    pub fn accumulate_grad(&self, s: usize, a: usize, upstream: f64, grad: &mut [f64]) {
        let log_pi = self.log_softmax_row(s);
        for b in 0..self.n_actions {
            let softmax_b = log_pi[b].exp();
            let indicator = if b == a { 1.0 } else { 0.0 };
            grad[s * self.n_actions + b] += upstream * self.alpha * (indicator - softmax_b);
        }
    }

    /// The policy the logits encode.
    pub fn policy(&self) -> Policy {
        let probs = (0..self.n_states)
            .map(|s| self.log_softmax_row(s).iter().map(|l| l.exp()).collect())
            .collect();
        Policy::new(probs).expect("softmax rows are normalized")
    }
}

/// A learnable scalar-valued function of (state) or (state, action).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Approximator {
    Tabular(TabularFn),
    Mlp(MlpFn),
    /// Policy-parameterized Q for the contextual-bandit reduction.
    PolicyLogRatio(PolicyLogRatioFn),
}

impl Approximator {
    pub fn tabular_q(role: Role, n_states: usize, n_actions: usize) -> Self {
        Approximator::Tabular(TabularFn::zeros(role, TableShape::StateAction { n_states, n_actions }))
    }

    pub fn tabular_v(n_states: usize) -> Self {
        Approximator::Tabular(TabularFn::zeros(Role::V, TableShape::State { n_states }))
    }

    pub fn role(&self) -> Role {
        self.block().role
    }

    pub fn block(&self) -> &ParamBlock {
        match self {
            Approximator::Tabular(t) => &t.block,
            Approximator::Mlp(m) => &m.block,
            Approximator::PolicyLogRatio(p) => &p.block,
        }
    }

    pub fn params(&self) -> &[f64] {
        &self.block().values
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            Approximator::Tabular(t) => &mut t.block.values,
            Approximator::Mlp(m) => &mut m.block.values,
            Approximator::PolicyLogRatio(p) => &mut p.block.values,
        }
    }

    /// Exact count of learnable scalars.
    pub fn param_count(&self) -> usize {
        self.params().len()
    }

    /// Scalar evaluation. For MLPs the first output unit is read.
    pub fn forward(&self, input: &Input) -> f64 {
        match self {
            Approximator::Tabular(t) => t.block.values[t.index(input)],
            Approximator::Mlp(m) => m.forward_features(&m.featurizer.features(input))[0],
            Approximator::PolicyLogRatio(p) => match input {
                Input::StateAction(s, a) => p.value(*s, *a),
                Input::State(_) => panic!("policy-log-ratio Q needs a state-action input"),
            },
        }
    }

    /// Accumulate d(upstream * forward(input)) / d(params) into `grad`.
    pub fn accumulate_grad(&self, input: &Input, upstream: f64, grad: &mut [f64]) {
        match self {
            Approximator::Tabular(t) => grad[t.index(input)] += upstream,
            Approximator::Mlp(m) => {
                let mut up = vec![0.0; m.out_dim()];
                up[0] = upstream;
                m.accumulate_grad_features(&m.featurizer.features(input), &up, grad);
            }
            Approximator::PolicyLogRatio(p) => match input {
                Input::StateAction(s, a) => p.accumulate_grad(*s, *a, upstream, grad),
                Input::State(_) => panic!("policy-log-ratio Q needs a state-action input"),
            },
        }
    }

    /// Policy logits for a state (policy-role functions).
    pub fn logits(&self, state: usize) -> Vec<f64> {
        match self {
            Approximator::Tabular(t) => match t.shape {
                TableShape::StateAction { n_actions, .. } => {
                    t.block.values[state * n_actions..(state + 1) * n_actions].to_vec()
                }
                TableShape::State { .. } => panic!("state-shaped table has no logits"),
            },
            Approximator::Mlp(m) => m.forward_features(&m.featurizer.features(&Input::State(state))),
            Approximator::PolicyLogRatio(p) => p.log_softmax_row(state),
        }
    }

    /// Accumulate gradient of (upstream . logits(state)) into `grad`.
    pub fn accumulate_logit_grad(&self, state: usize, upstream: &[f64], grad: &mut [f64]) {
        match self {
            Approximator::Tabular(t) => match t.shape {
                TableShape::StateAction { n_actions, .. } => {
                    for (a, u) in upstream.iter().enumerate() {
                        grad[state * n_actions + a] += u;
                    }
                }
                TableShape::State { .. } => panic!("state-shaped table has no logits"),
            },
            Approximator::Mlp(m) => {
                m.accumulate_grad_features(&m.featurizer.features(&Input::State(state)), upstream, grad)
            }
            Approximator::PolicyLogRatio(_) => panic!("log-ratio fn is not a policy head"),
        }
    }

    /// Polyak-average `source` into self: p <- (1 - rate) * p + rate * source.
    pub fn polyak_from(&mut self, source: &Approximator, rate: f64) {
        let src = source.params().to_vec();
        for (p, s) in self.params_mut().iter_mut().zip(src) {
            *p = (1.0 - rate) * *p + rate * s;
        }
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Adam with bias correction. Deterministic: no hidden RNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update: params <- params - lr * m_hat / (sqrt(v_hat) + eps).
    /// Non-finite gradients are surfaced as errors, never clamped.
    pub fn apply(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        assert_eq!(params.len(), grad.len(), "param/grad length mismatch");
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence(format!(
                "non-finite gradient at optimizer step {}",
                self.step + 1
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Central finite differences oracle: gradient of `f` at `params` with
/// perturbation `h` per coordinate. Independent of every analytic path.
pub fn central_difference_gradient(
    mut f: impl FnMut(&[f64]) -> f64,
    params: &[f64],
    h: f64,
) -> Vec<f64> {
    let mut point = params.to_vec();
    let mut grad = vec![0.0; params.len()];
    for i in 0..params.len() {
        let orig = point[i];
        point[i] = orig + h;
        let up = f(&point);
        point[i] = orig - h;
        let down = f(&point);
        point[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Relative error between two gradient vectors: ||a - b|| / max(1, ||a||, ||b||).
pub fn gradient_relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn zero_mlp_outputs_zero() {
        let f = Approximator::Mlp(MlpFn::zeros(
            Role::Q,
            Featurizer::StateActionOneHot { n_states: 3, n_actions: 2 },
            &[8, 8],
            1,
        ));
        for s in 0..3 {
            for a in 0..2 {
                assert_eq!(f.forward(&Input::StateAction(s, a)), 0.0);
            }
        }
    }

    #[test]
    fn tabular_forward_reads_cell_and_grad_is_one_hot() {
        let mut f = Approximator::tabular_q(Role::Q, 2, 3);
        f.params_mut()[1 * 3 + 2] = 4.5;
        assert_eq!(f.forward(&Input::StateAction(1, 2)), 4.5);
        let mut grad = vec![0.0; 6];
        f.accumulate_grad(&Input::StateAction(1, 2), 2.0, &mut grad);
        assert_eq!(grad, vec![0.0, 0.0, 0.0, 0.0, 0.0, 2.0]);
    }

    #[test]
    fn single_hidden_unit_matches_hand_evaluation() {
        // w = 1, b = 0, v = 2, output bias 0: f(x) = 2 tanh(x).
        let mut mlp = MlpFn::zeros(Role::Q, Featurizer::StateOneHot { n_states: 1 }, &[1], 1);
        mlp.block.values = vec![1.0, 0.0, 2.0, 0.0];
        for x in [-1.5, -0.2, 0.0, 0.7, 3.0] {
            let y = mlp.forward_features(&[x])[0];
            assert!((y - 2.0 * x.tanh()).abs() < 1e-15);
        }
    }

    #[test]
    fn linear_mlp_gradient_is_feature_vector() {
        let mlp = MlpFn::zeros(Role::Q, Featurizer::StateOneHot { n_states: 4 }, &[], 1);
        let feats = [0.0, 1.0, 0.0, 0.0];
        let mut grad = vec![0.0; mlp.block.values.len()];
        mlp.accumulate_grad_features(&feats, &[1.0], &mut grad);
        // Weight grads equal features, bias grad is 1.
        assert_eq!(grad, vec![0.0, 1.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(8);
        for trial in 0..25 {
            let featurizer = Featurizer::StateActionOneHot { n_states: 4, n_actions: 3 };
            let mut mlp = MlpFn::zeros(Role::Q, featurizer, &[6, 5], 1);
            mlp.init_xavier(&mut rng);
            for p in mlp.block.values.iter_mut() {
                *p += rng.gen_range(-0.1..0.1); // nonzero biases too
            }
            let s = rng.gen_range(0..4);
            let a = rng.gen_range(0..3);
            let feats = featurizer.features(&Input::StateAction(s, a));
            let mut analytic = vec![0.0; mlp.block.values.len()];
            mlp.accumulate_grad_features(&feats, &[1.0], &mut analytic);
            let template = mlp.clone();
            let numeric = central_difference_gradient(
                |p| {
                    let mut probe = template.clone();
                    probe.block.values.copy_from_slice(p);
                    probe.forward_features(&feats)[0]
                },
                &mlp.block.values,
                1e-5,
            );
            let err = gradient_relative_error(&analytic, &numeric);
            assert!(err <= 1e-5, "trial {trial}: relative error {err}");
        }
    }

    #[test]
    fn policy_log_ratio_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(9);
        let mu = Policy::new(vec![vec![0.2, 0.3, 0.5], vec![0.6, 0.2, 0.2]]).unwrap();
        let mut f = PolicyLogRatioFn::new(&mu, 1.7).unwrap();
        for p in f.block.values.iter_mut() {
            *p = rng.gen_range(-1.0..1.0);
        }
        let (s, a) = (1, 2);
        let mut analytic = vec![0.0; 6];
        f.accumulate_grad(s, a, 1.0, &mut analytic);
        let template = f.clone();
        let numeric = central_difference_gradient(
            |p| {
                let mut probe = template.clone();
                probe.block.values.copy_from_slice(p);
                probe.value(s, a)
            },
            &f.block.values,
            1e-6,
        );
        assert!(gradient_relative_error(&analytic, &numeric) <= 1e-6);
    }

    #[test]
    fn adam_zero_grad_leaves_params_unchanged() {
        let mut params = vec![1.0, -2.0];
        let mut adam = AdamState::new(2, 0.1);
        adam.apply(&mut params, &[0.0, 0.0]).unwrap();
        assert_eq!(params, vec![1.0, -2.0]);
    }

    #[test]
    fn adam_constant_grad_step_approaches_lr() {
        let mut params = vec![0.0];
        let lr = 0.01;
        let mut adam = AdamState::new(1, lr);
        let mut prev = params[0];
        let mut last_step = 0.0;
        for _ in 0..500 {
            adam.apply(&mut params, &[3.7]).unwrap();
            last_step = (params[0] - prev).abs();
            prev = params[0];
        }
        assert!((last_step - lr).abs() < 1e-6, "step {last_step}");
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut params = vec![0.0];
        let mut adam = AdamState::new(1, 0.1);
        assert!(adam.apply(&mut params, &[f64::NAN]).is_err());
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut params = vec![0.5, -0.5];
            let mut adam = AdamState::new(2, 0.05);
            for i in 0..100 {
                let g = [params[0] + i as f64 * 0.01, params[1] * 2.0];
                adam.apply(&mut params, &g).unwrap();
            }
            params
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn param_counts() {
        // Two hidden layers of 64: (d+1)*64 + 65*64 + 65.
        let d = 7;
        let mlp = Approximator::Mlp(MlpFn::zeros(
            Role::Reward,
            Featurizer::StateOneHot { n_states: d },
            &[64, 64],
            1,
        ));
        assert_eq!(mlp.param_count(), (d + 1) * 64 + 65 * 64 + 65);
        let q = Approximator::tabular_q(Role::Q, 5, 3);
        assert_eq!(q.param_count(), 15);
    }

    #[test]
    fn param_count_survives_serialization() {
        let mut rng = StdRng::seed_from_u64(0);
        let mut mlp = MlpFn::zeros(
            Role::Q,
            Featurizer::StateActionOneHot { n_states: 3, n_actions: 2 },
            &[4],
            1,
        );
        mlp.init_xavier(&mut rng);
        let f = Approximator::Mlp(mlp);
        let text = f.to_json_string().unwrap();
        let back = Approximator::from_json_str(&text).unwrap();
        assert_eq!(f.param_count(), back.param_count());
        assert_eq!(f, back);
    }
}
