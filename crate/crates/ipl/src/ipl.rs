//! The core algorithm: inverse soft-Bellman operator, implicit preference
//! model, regularized preference loss, and the XQL/IQL/AWAC trainer variants
//! with advantage-weighted policy extraction.
//!
//! The Q-function is trained so that its induced implicit reward
//! r_Q = Q - gamma E[V] matches the expert's preferences under a
//! Bradley-Terry model, plus an L2 regularizer on r_Q that pins the
//! otherwise shift-invariant optimum. No reward network is ever learned.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::approx::{Approximator, Featurizer, Input, MlpFn, Role};
use crate::data::{
    subsample_batch, PreferencePair, RankingQuery, SegmentDiscount, Transition, TransitionDataset,
};
use crate::error::{Error, Result};
use crate::metrics::{MetricsLog, MetricsRow};
use crate::mdp::{evaluate_policy_return, Policy, QTable, TabularMdp};
use crate::util::logistic;

/// Exponent clip for the linex value loss: z <= Z_MAX before exponentiation.
pub const Z_MAX: f64 = 10.0;
/// Clip on advantage-weighted regression weights in MLP mode.
pub const WEIGHT_MAX: f64 = 100.0;

/// Which off-policy RL algorithm supplies the value target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Linex value loss; V converges to the KL-soft value.
    Xql,
    /// Asymmetric expectile value loss.
    Iql,
    /// No value network: V is estimated from the policy and Q.
    Awac,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::Xql => write!(f, "xql"),
            Variant::Iql => write!(f, "iql"),
            Variant::Awac => write!(f, "awac"),
        }
    }
}

/// Function representation for Q, V, and the policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Backbone {
    /// Dense tables; next-state expectations are computed exactly from the
    /// transition rows and the policy is extracted in closed form.
    Tabular,
    /// One-hot-featurized MLPs; expectations use the single observed next
    /// state and V regresses against a Polyak-averaged target copy of Q.
    Mlp { hidden: Vec<usize> },
}

/// All hyperparameters of an IPL run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IplConfig {
    pub variant: Variant,
    pub backbone: Backbone,
    /// Regularization weight on the implicit reward.
    pub lambda: f64,
    /// KL temperature for the XQL value loss and soft policies.
    pub alpha: f64,
    /// AWR extraction temperature.
    pub beta: f64,
    /// Expectile for the IQL value loss.
    pub tau: f64,
    pub gamma: f64,
    /// Segment length of the preference data.
    pub k: usize,
    /// Subsample length for the augmentation; s = k disables it.
    pub s: usize,
    pub pref_batch_size: usize,
    pub offline_batch_size: usize,
    pub q_lr: f64,
    pub v_lr: f64,
    pub policy_lr: f64,
    /// Final learning-rate fraction; rates decay geometrically from lr to
    /// lr * lr_final_fraction across training. 1.0 keeps them constant.
    pub lr_final_fraction: f64,
    pub total_steps: usize,
    pub eval_interval: usize,
    /// Polyak rate for the target Q copy (MLP mode only).
    pub target_update_rate: f64,
    /// Mixing rate of the tabular AWAC policy toward its AWR extraction;
    /// the tabular analog of a slow policy-gradient head. The policy is
    /// trainer state, not learnable parameters.
    pub awac_policy_rate: f64,
    /// Regularize r_Q over every (s,a) instead of the data support
    /// (tabular only; required by the convergence-oracle comparisons).
    pub regularize_full_space: bool,
    pub discount_in_segment: bool,
    /// Mean |r_Q| beyond which training aborts.
    pub divergence_bound: f64,
    pub seed: u64,
}

impl Default for IplConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Iql,
            backbone: Backbone::Tabular,
            lambda: 0.5,
            alpha: 2.0,
            beta: 3.0,
            tau: 0.7,
            gamma: 0.99,
            k: 25,
            s: 16,
            pref_batch_size: 16,
            offline_batch_size: 256,
            q_lr: 3e-4,
            v_lr: 3e-4,
            policy_lr: 3e-4,
            lr_final_fraction: 1.0,
            total_steps: 20_000,
            eval_interval: 500,
            target_update_rate: 0.005,
            awac_policy_rate: 0.05,
            regularize_full_space: false,
            discount_in_segment: false,
            divergence_bound: 1e4,
            seed: 0,
        }
    }
}

impl IplConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.alpha <= 0.0 || self.beta <= 0.0 {
            return Err(Error::Config("alpha and beta must be positive".into()));
        }
        if !(0.0 < self.tau && self.tau < 1.0) {
            return Err(Error::Config(format!("tau must be in (0,1), got {}", self.tau)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must be in [0,1), got {}", self.gamma)));
        }
        if self.k == 0 || self.s == 0 || self.s > self.k {
            return Err(Error::Config(format!(
                "segment lengths must satisfy 1 <= s <= k, got s={}, k={}",
                self.s, self.k
            )));
        }
        if self.total_steps == 0 || self.eval_interval == 0 {
            return Err(Error::Config("step counts must be positive".into()));
        }
        if self.pref_batch_size == 0 {
            return Err(Error::Config("pref_batch_size must be positive".into()));
        }
        if !(0.0 < self.lr_final_fraction && self.lr_final_fraction <= 1.0) {
            return Err(Error::Config("lr_final_fraction must be in (0,1]".into()));
        }
        if !(0.0 < self.awac_policy_rate && self.awac_policy_rate <= 1.0) {
            return Err(Error::Config("awac_policy_rate must be in (0,1]".into()));
        }
        if self.regularize_full_space && !matches!(self.backbone, Backbone::Tabular) {
            return Err(Error::Config(
                "full-space regularization needs the tabular backbone".into(),
            ));
        }
        if self.divergence_bound <= 0.0 {
            return Err(Error::Config("divergence_bound must be positive".into()));
        }
        Ok(())
    }

    pub fn segment_discount(&self) -> SegmentDiscount {
        if self.discount_in_segment {
            SegmentDiscount::On { gamma: self.gamma }
        } else {
            SegmentDiscount::Off
        }
    }
}

/// How E_{s'}[V(s')] is taken inside the inverse Bellman operator.
#[derive(Clone, Copy)]
pub enum ValueExpectation<'a> {
    /// Exact expectation over the transition row (tabular mode).
    Exact(&'a TabularMdp),
    /// The single observed next state (MLP mode).
    Sampled,
}

/// Read-only view of the value target V^targ. The Q-step never propagates
/// gradients through it (semi-gradient).
pub enum ValueTarget<'a> {
    /// A learned state-value function.
    Learned(&'a Approximator),
    /// AWAC: V(s) estimated as E_{a~pi}[Q(s,a)] with no V parameters.
    FromPolicy {
        q: &'a Approximator,
        policy: &'a Policy,
    },
    /// A fixed table (oracle comparisons).
    Table(&'a crate::mdp::VTable),
}

impl ValueTarget<'_> {
    pub fn at(&self, state: usize) -> f64 {
        match self {
            ValueTarget::Learned(v) => v.forward(&Input::State(state)),
            ValueTarget::FromPolicy { q, policy } => value_estimate_awac(q, policy, state),
            ValueTarget::Table(v) => v[state],
        }
    }
}

/// AWAC value estimate: E_{a~pi(.|s)}[Q(s,a)]; exact for discrete actions.
pub fn value_estimate_awac(q: &Approximator, policy: &Policy, state: usize) -> f64 {
    (0..policy.n_actions())
        .map(|a| {
            let p = policy.prob(state, a);
            if p == 0.0 {
                0.0
            } else {
                p * q.forward(&Input::StateAction(state, a))
            }
        })
        .sum()
}

/// Apply the inverse soft-Bellman operator to a batch of transitions:
/// r_Q(s,a) = Q(s,a) - gamma * E_or_sample[V^targ(s')].
pub fn implicit_reward(
    q: &Approximator,
    value_target: &ValueTarget,
    gamma: f64,
    transitions: &[Transition],
    expectation: &ValueExpectation,
) -> Vec<f64> {
    match expectation {
        ValueExpectation::Exact(mdp) => {
            let v_all: Vec<f64> = (0..mdp.n_states()).map(|s| value_target.at(s)).collect();
            transitions
                .iter()
                .map(|t| {
                    let ev: f64 = mdp
                        .transition_row(t.state, t.action)
                        .iter()
                        .zip(&v_all)
                        .map(|(p, v)| p * v)
                        .sum();
                    q.forward(&Input::StateAction(t.state, t.action)) - gamma * ev
                })
                .collect()
        }
        ValueExpectation::Sampled => transitions
            .iter()
            .map(|t| {
                q.forward(&Input::StateAction(t.state, t.action))
                    - gamma * value_target.at(t.next_state)
            })
            .collect(),
    }
}

/// Implicit reward over the whole state-action space with exact
/// expectations (tabular mode).
pub fn implicit_reward_table(
    q: &Approximator,
    value_target: &ValueTarget,
    gamma: f64,
    mdp: &TabularMdp,
) -> QTable {
    let v_all: Vec<f64> = (0..mdp.n_states()).map(|s| value_target.at(s)).collect();
    QTable::from_fn(mdp.n_states(), mdp.n_actions(), |s, a| {
        let ev: f64 = mdp
            .transition_row(s, a)
            .iter()
            .zip(&v_all)
            .map(|(p, v)| p * v)
            .sum();
        q.forward(&Input::StateAction(s, a)) - gamma * ev
    })
}

/// Per-timestep implicit rewards for both sides of a preference batch,
/// aligned with the segment structure.
#[derive(Debug, Clone)]
pub struct ImplicitRewardBatch {
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl ImplicitRewardBatch {
    pub fn compute(
        q: &Approximator,
        value_target: &ValueTarget,
        gamma: f64,
        pairs: &[PreferencePair],
        expectation: &ValueExpectation,
    ) -> Self {
        let side = |pick: fn(&PreferencePair) -> &crate::data::Segment| -> Vec<Vec<f64>> {
            pairs
                .iter()
                .map(|pair| {
                    let transitions: Vec<Transition> = pick(pair)
                        .transitions()
                        .map(|(state, action, next_state)| Transition {
                            state,
                            action,
                            next_state,
                        })
                        .collect();
                    implicit_reward(q, value_target, gamma, &transitions, expectation)
                })
                .collect()
        };
        Self {
            first: side(|p| &p.first),
            second: side(|p| &p.second),
        }
    }
}

/// Preference logit of a pair given its per-timestep implicit rewards:
/// sum_t w_t r_Q(s1_t, a1_t) - sum_t w_t r_Q(s2_t, a2_t).
pub fn preference_logit(first: &[f64], second: &[f64], discount: SegmentDiscount) -> f64 {
    let weighted = |xs: &[f64]| -> f64 {
        xs.iter()
            .enumerate()
            .map(|(t, r)| discount.weight(t) * r)
            .sum()
    };
    weighted(first) - weighted(second)
}

/// Binary cross-entropy on logits, stable for all finite inputs:
/// max(z,0) - z*y + log(1 + exp(-|z|)).
pub fn preference_bce(logit: f64, y: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&y));
    logit.max(0.0) - logit * y + (-logit.abs()).exp().ln_1p()
}

/// Where the L2 regularizer on implicit rewards is evaluated.
pub enum RegularizerSupport<'a> {
    /// Mean square over every (s,a) — the convex-oracle convention.
    FullSpace(&'a QTable),
    /// Equal weighting between the preference and offline batches; a side
    /// that is empty cedes its weight to the other.
    Batches {
        pref: &'a [f64],
        offline: &'a [f64],
    },
}

/// psi(r_Q): mean of squared implicit rewards on the chosen support.
pub fn l2_regularizer(support: &RegularizerSupport) -> Result<f64> {
    let mean_sq = |xs: &[f64]| xs.iter().map(|r| r * r).sum::<f64>() / xs.len() as f64;
    match support {
        RegularizerSupport::FullSpace(table) => {
            let xs = table.as_slice();
            if xs.is_empty() {
                return Err(Error::Config("empty regularizer support".into()));
            }
            Ok(mean_sq(xs))
        }
        RegularizerSupport::Batches { pref, offline } => match (pref.is_empty(), offline.is_empty()) {
            (true, true) => Err(Error::Config("empty regularizer support".into())),
            (false, true) => Ok(mean_sq(pref)),
            (true, false) => Ok(mean_sq(offline)),
            (false, false) => Ok(0.5 * mean_sq(pref) + 0.5 * mean_sq(offline)),
        },
    }
}

/// Output of one Q-step objective evaluation.
#[derive(Debug, Clone)]
pub struct QStepReport {
    /// pref_loss + lambda * reg_value.
    pub loss: f64,
    pub pref_loss: f64,
    pub reg_value: f64,
    /// Gradient w.r.t. the Q parameters only.
    pub grad: Vec<f64>,
}

/// The regularized preference loss and its gradient w.r.t. Q:
/// mean-BCE over the preference batch plus lambda * psi(r_Q).
/// V^targ is held fixed; gradients flow through the implicit reward into Q.
pub fn ipl_loss(
    q: &Approximator,
    value_target: &ValueTarget,
    config: &IplConfig,
    pref_batch: &[PreferencePair],
    offline_batch: &[Transition],
    expectation: &ValueExpectation,
) -> Result<QStepReport> {
    if pref_batch.is_empty() {
        return Err(Error::Config("preference batch is empty".into()));
    }
    let discount = config.segment_discount();
    let mut grad = vec![0.0; q.param_count()];
    let rewards = ImplicitRewardBatch::compute(q, value_target, config.gamma, pref_batch, expectation);

    // Preference term.
    let m = pref_batch.len() as f64;
    let mut pref_loss = 0.0;
    for (i, pair) in pref_batch.iter().enumerate() {
        let logit = preference_logit(&rewards.first[i], &rewards.second[i], discount);
        pref_loss += preference_bce(logit, pair.label);
        let dlogit = (logistic(logit) - pair.label) / m;
        for (t, (state, action, _)) in pair.first.transitions().enumerate() {
            q.accumulate_grad(&Input::StateAction(state, action), dlogit * discount.weight(t), &mut grad);
        }
        for (t, (state, action, _)) in pair.second.transitions().enumerate() {
            q.accumulate_grad(&Input::StateAction(state, action), -dlogit * discount.weight(t), &mut grad);
        }
    }
    pref_loss /= m;

    // Regularizer term.
    let mut reg_value = 0.0;
    if config.lambda > 0.0 {
        match (&config.backbone, config.regularize_full_space, expectation) {
            (Backbone::Tabular, true, ValueExpectation::Exact(mdp)) => {
                let table = implicit_reward_table(q, value_target, config.gamma, mdp);
                reg_value = l2_regularizer(&RegularizerSupport::FullSpace(&table))?;
                let n = (mdp.n_states() * mdp.n_actions()) as f64;
                for s in 0..mdp.n_states() {
                    for a in 0..mdp.n_actions() {
                        let upstream = config.lambda * 2.0 * table[(s, a)] / n;
                        q.accumulate_grad(&Input::StateAction(s, a), upstream, &mut grad);
                    }
                }
            }
            _ => {
                // Support mode: r_Q on the preference timesteps and the offline batch.
                let pref_values: Vec<f64> = rewards
                    .first
                    .iter()
                    .chain(rewards.second.iter())
                    .flatten()
                    .copied()
                    .collect();
                let offline_values = implicit_reward(q, value_target, config.gamma, offline_batch, expectation);
                reg_value = l2_regularizer(&RegularizerSupport::Batches {
                    pref: &pref_values,
                    offline: &offline_values,
                })?;
                let pref_weight = if offline_values.is_empty() { 1.0 } else { 0.5 };
                let offline_weight = if pref_values.is_empty() { 1.0 } else { 0.5 };
                if !pref_values.is_empty() {
                    let scale = config.lambda * pref_weight * 2.0 / pref_values.len() as f64;
                    let mut flat = 0;
                    for (i, pair) in pref_batch.iter().enumerate() {
                        for (t, (state, action, _)) in pair.first.transitions().enumerate() {
                            q.accumulate_grad(
                                &Input::StateAction(state, action),
                                scale * rewards.first[i][t],
                                &mut grad,
                            );
                            flat += 1;
                        }
                    }
                    for (i, pair) in pref_batch.iter().enumerate() {
                        for (t, (state, action, _)) in pair.second.transitions().enumerate() {
                            q.accumulate_grad(
                                &Input::StateAction(state, action),
                                scale * rewards.second[i][t],
                                &mut grad,
                            );
                            flat += 1;
                        }
                    }
                    debug_assert_eq!(flat, pref_values.len());
                }
                if !offline_values.is_empty() {
                    let scale = config.lambda * offline_weight * 2.0 / offline_values.len() as f64;
                    for (t, r) in offline_batch.iter().zip(&offline_values) {
                        q.accumulate_grad(&Input::StateAction(t.state, t.action), scale * r, &mut grad);
                    }
                }
            }
        }
    }

    let loss = pref_loss + config.lambda * reg_value;
    if !loss.is_finite() {
        return Err(Error::Divergence(format!(
            "non-finite preference loss over a batch of {} pairs (lambda = {})",
            pref_batch.len(),
            config.lambda
        )));
    }
    Ok(QStepReport {
        loss,
        pref_loss,
        reg_value,
        grad,
    })
}

/// Plackett-Luce negative log-likelihood Q-step (the rankings analog of
/// `ipl_loss`): -log P_Q(tau) averaged over queries, plus lambda * psi.
/// Stage terms use log-sum-exp; for K = 2 this equals the pairwise BCE.
pub fn ranking_loss(
    q: &Approximator,
    value_target: &ValueTarget,
    config: &IplConfig,
    ranking_batch: &[RankingQuery],
    offline_batch: &[Transition],
    expectation: &ValueExpectation,
) -> Result<QStepReport> {
    if ranking_batch.is_empty() {
        return Err(Error::Config("ranking batch is empty".into()));
    }
    let discount = config.segment_discount();
    let mut grad = vec![0.0; q.param_count()];
    let m = ranking_batch.len() as f64;
    let mut nll = 0.0;
    let mut pref_support: Vec<f64> = Vec::new();

    for query in ranking_batch {
        // Per-segment implicit rewards and returns.
        let per_step: Vec<Vec<f64>> = query
            .segments
            .iter()
            .map(|seg| {
                let transitions: Vec<Transition> = seg
                    .transitions()
                    .map(|(state, action, next_state)| Transition {
                        state,
                        action,
                        next_state,
                    })
                    .collect();
                implicit_reward(q, value_target, config.gamma, &transitions, expectation)
            })
            .collect();
        pref_support.extend(per_step.iter().flatten());
        let returns: Vec<f64> = per_step
            .iter()
            .map(|rs| rs.iter().enumerate().map(|(t, r)| discount.weight(t) * r).sum())
            .collect();
        // d nll / d return_j accumulated over stages.
        let mut dreturns = vec![0.0; returns.len()];
        let kq = query.permutation.len();
        for stage in 0..kq {
            let remaining = &query.permutation[stage..];
            let max = remaining
                .iter()
                .map(|&j| returns[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = remaining.iter().map(|&j| (returns[j] - max).exp()).sum();
            nll += (max + denom.ln() - returns[query.permutation[stage]]) / m;
            for &j in remaining {
                let softmax = (returns[j] - max).exp() / denom;
                dreturns[j] += softmax / m;
            }
            dreturns[query.permutation[stage]] -= 1.0 / m;
        }
        for (j, seg) in query.segments.iter().enumerate() {
            for (t, (state, action, _)) in seg.transitions().enumerate() {
                q.accumulate_grad(
                    &Input::StateAction(state, action),
                    dreturns[j] * discount.weight(t),
                    &mut grad,
                );
            }
        }
    }

    let mut reg_value = 0.0;
    if config.lambda > 0.0 {
        match (&config.backbone, config.regularize_full_space, expectation) {
            (Backbone::Tabular, true, ValueExpectation::Exact(mdp)) => {
                let table = implicit_reward_table(q, value_target, config.gamma, mdp);
                reg_value = l2_regularizer(&RegularizerSupport::FullSpace(&table))?;
                let n = (mdp.n_states() * mdp.n_actions()) as f64;
                for s in 0..mdp.n_states() {
                    for a in 0..mdp.n_actions() {
                        q.accumulate_grad(
                            &Input::StateAction(s, a),
                            config.lambda * 2.0 * table[(s, a)] / n,
                            &mut grad,
                        );
                    }
                }
            }
            _ => {
                let offline_values = implicit_reward(q, value_target, config.gamma, offline_batch, expectation);
                reg_value = l2_regularizer(&RegularizerSupport::Batches {
                    pref: &pref_support,
                    offline: &offline_values,
                })?;
                let pref_weight = if offline_values.is_empty() { 1.0 } else { 0.5 };
                if !pref_support.is_empty() {
                    let scale = config.lambda * pref_weight * 2.0 / pref_support.len() as f64;
                    let mut idx = 0;
                    for query in ranking_batch {
                        for seg in &query.segments {
                            for (t, (state, action, next_state)) in seg.transitions().enumerate() {
                                let _ = t;
                                let r = match expectation {
                                    ValueExpectation::Sampled => {
                                        q.forward(&Input::StateAction(state, action))
                                            - config.gamma * value_target.at(next_state)
                                    }
                                    ValueExpectation::Exact(mdp) => {
                                        let v_row: f64 = mdp
                                            .transition_row(state, action)
                                            .iter()
                                            .enumerate()
                                            .map(|(sp, p)| p * value_target.at(sp))
                                            .sum();
                                        q.forward(&Input::StateAction(state, action)) - config.gamma * v_row
                                    }
                                };
                                debug_assert!((r - pref_support[idx]).abs() < 1e-12);
                                idx += 1;
                                q.accumulate_grad(&Input::StateAction(state, action), scale * r, &mut grad);
                            }
                        }
                    }
                }
                if !offline_values.is_empty() {
                    let offline_weight = if pref_support.is_empty() { 1.0 } else { 0.5 };
                    let scale = config.lambda * offline_weight * 2.0 / offline_values.len() as f64;
                    for (t, r) in offline_batch.iter().zip(&offline_values) {
                        q.accumulate_grad(&Input::StateAction(t.state, t.action), scale * r, &mut grad);
                    }
                }
            }
        }
    }

    let loss = nll + config.lambda * reg_value;
    if !loss.is_finite() {
        return Err(Error::Divergence("non-finite ranking loss".into()));
    }
    Ok(QStepReport {
        loss,
        pref_loss: nll,
        reg_value,
        grad,
    })
}

/// One value-step objective evaluation: loss and gradient w.r.t. V.
#[derive(Debug, Clone)]
pub struct ValueStepReport {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Linex (extreme-Q) value loss over state-action rows:
/// mean of exp(min(z, Z_MAX)) - z - 1 with z = (Q(s,a) - V(s)) / alpha.
/// Its population minimizer is the KL-soft value alpha*log E[e^{Q/alpha}].
pub fn linex_value_loss(
    v: &Approximator,
    q_target: &Approximator,
    alpha: f64,
    rows: &[(usize, usize)],
) -> Result<ValueStepReport> {
    if rows.is_empty() {
        return Err(Error::Config("value batch is empty".into()));
    }
    let n = rows.len() as f64;
    let mut grad = vec![0.0; v.param_count()];
    let mut loss = 0.0;
    for &(s, a) in rows {
        let z = (q_target.forward(&Input::StateAction(s, a)) - v.forward(&Input::State(s))) / alpha;
        let zc = z.min(Z_MAX);
        loss += zc.exp() - z - 1.0;
        let dz = if z < Z_MAX { zc.exp() - 1.0 } else { -1.0 };
        v.accumulate_grad(&Input::State(s), -dz / (alpha * n), &mut grad);
    }
    loss /= n;
    if !loss.is_finite() {
        return Err(Error::Divergence("linex value loss overflowed despite clipping".into()));
    }
    Ok(ValueStepReport { loss, grad })
}

/// Asymmetric expectile value loss: mean of |tau - 1(u < 0)| u^2 with
/// u = Q(s,a) - V(s). tau = 0.5 recovers half the MSE.
pub fn expectile_value_loss(
    v: &Approximator,
    q_target: &Approximator,
    tau: f64,
    rows: &[(usize, usize)],
) -> Result<ValueStepReport> {
    if rows.is_empty() {
        return Err(Error::Config("value batch is empty".into()));
    }
    let n = rows.len() as f64;
    let mut grad = vec![0.0; v.param_count()];
    let mut loss = 0.0;
    for &(s, a) in rows {
        let u = q_target.forward(&Input::StateAction(s, a)) - v.forward(&Input::State(s));
        let w = if u < 0.0 { 1.0 - tau } else { tau };
        loss += w * u * u;
        v.accumulate_grad(&Input::State(s), -2.0 * w * u / n, &mut grad);
    }
    loss /= n;
    if !loss.is_finite() {
        return Err(Error::Divergence("non-finite expectile value loss".into()));
    }
    Ok(ValueStepReport { loss, grad })
}

/// Empirical (s,a) visit counts of a dataset; the behavior distribution
/// that anchors AWR extraction.
#[derive(Debug, Clone)]
pub struct StateActionCounts {
    n_states: usize,
    n_actions: usize,
    counts: Vec<f64>,
}

impl StateActionCounts {
    pub fn new(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            counts: vec![0.0; n_states * n_actions],
        }
    }

    pub fn from_data(
        pairs: &[PreferencePair],
        transitions: &[Transition],
        n_states: usize,
        n_actions: usize,
    ) -> Self {
        let mut counts = Self::new(n_states, n_actions);
        for pair in pairs {
            for seg in [&pair.first, &pair.second] {
                for (s, a, _) in seg.transitions() {
                    counts.counts[s * n_actions + a] += 1.0;
                }
            }
        }
        for t in transitions {
            counts.counts[t.state * n_actions + t.action] += 1.0;
        }
        counts
    }

    pub fn count(&self, s: usize, a: usize) -> f64 {
        self.counts[s * self.n_actions + a]
    }

    pub fn state_total(&self, s: usize) -> f64 {
        (0..self.n_actions).map(|a| self.count(s, a)).sum()
    }

    /// Normalized per-state behavior distribution; unvisited states uniform.
    pub fn behavior_policy(&self) -> Policy {
        let probs = (0..self.n_states)
            .map(|s| {
                let total = self.state_total(s);
                if total == 0.0 {
                    vec![1.0 / self.n_actions as f64; self.n_actions]
                } else {
                    (0..self.n_actions).map(|a| self.count(s, a) / total).collect()
                }
            })
            .collect();
        Policy::new(probs).expect("normalized rows")
    }
}

/// Closed-form AWR extraction: pi(a|s) proportional to
/// count(s,a) * exp(beta * (Q(s,a) - V(s))), computed in log space with
/// per-state max subtraction. States with no data fall back to uniform.
pub fn extract_policy_awr(
    q: &Approximator,
    value: &ValueTarget,
    beta: f64,
    counts: &StateActionCounts,
) -> Policy {
    let (ns, na) = (counts.n_states, counts.n_actions);
    let probs = (0..ns)
        .map(|s| {
            if counts.state_total(s) == 0.0 {
                return vec![1.0 / na as f64; na];
            }
            let vs = value.at(s);
            let scores: Vec<f64> = (0..na)
                .map(|a| {
                    if counts.count(s, a) == 0.0 {
                        f64::NEG_INFINITY
                    } else {
                        counts.count(s, a).ln() + beta * (q.forward(&Input::StateAction(s, a)) - vs)
                    }
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = scores.iter().map(|x| (x - m).exp()).collect();
            let total: f64 = weights.iter().sum();
            weights.iter().map(|w| w / total).collect()
        })
        .collect();
    Policy::new(probs).expect("normalized rows")
}

/// Advantage-weighted log-likelihood step for an MLP policy head:
/// loss = -mean of min(e^{beta (Q - V)}, WEIGHT_MAX) * log pi(a|s).
pub fn awr_policy_step(
    policy_net: &Approximator,
    q_target: &Approximator,
    value: &ValueTarget,
    beta: f64,
    rows: &[(usize, usize)],
) -> Result<ValueStepReport> {
    if rows.is_empty() {
        return Err(Error::Config("policy batch is empty".into()));
    }
    let n = rows.len() as f64;
    let mut grad = vec![0.0; policy_net.param_count()];
    let mut loss = 0.0;
    for &(s, a) in rows {
        let adv = q_target.forward(&Input::StateAction(s, a)) - value.at(s);
        let w = (beta * adv).exp().min(WEIGHT_MAX);
        let logits = policy_net.logits(s);
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        loss -= w * (logits[a] - lse) / n;
        // d(-w log pi(a))/d logit_b = -w (1{b=a} - softmax_b).
        let upstream: Vec<f64> = (0..logits.len())
            .map(|b| {
                let softmax_b = (logits[b] - lse).exp();
                let indicator = if b == a { 1.0 } else { 0.0 };
                -w * (indicator - softmax_b) / n
            })
            .collect();
        policy_net.accumulate_logit_grad(s, &upstream, &mut grad);
    }
    if !loss.is_finite() {
        return Err(Error::Divergence("non-finite AWR policy loss".into()));
    }
    Ok(ValueStepReport { loss, grad })
}

/// Final parameters, metrics, and bookkeeping of a training run.
#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub q: Approximator,
    pub v: Option<Approximator>,
    pub policy_net: Option<Approximator>,
    pub policy: Policy,
    pub metrics: MetricsLog,
    pub config: IplConfig,
    pub learnable_params: usize,
    pub steps_run: usize,
    pub wall_ms: u128,
}

/// The IPL training loop. Owns its parameters; single-threaded and fully
/// deterministic under the config seed.
pub struct Trainer {
    config: IplConfig,
    mdp: TabularMdp,
    pairs: Vec<PreferencePair>,
    rankings: Vec<RankingQuery>,
    offline: Vec<Transition>,
    counts: StateActionCounts,
    q: Approximator,
    q_target: Option<Approximator>,
    q_opt: crate::approx::AdamState,
    v: Option<Approximator>,
    v_opt: Option<crate::approx::AdamState>,
    policy_net: Option<Approximator>,
    policy_opt: Option<crate::approx::AdamState>,
    current_policy: Policy,
    oracle_rstar: Option<QTable>,
    rng: StdRng,
}

impl Trainer {
    pub fn new(
        config: IplConfig,
        pref_dataset: &crate::data::Dataset,
        offline_dataset: &TransitionDataset,
        mdp_for_eval: &TabularMdp,
    ) -> Result<Self> {
        config.validate()?;
        let (ns, na) = (mdp_for_eval.n_states(), mdp_for_eval.n_actions());
        if pref_dataset.pairs.is_empty() && pref_dataset.rankings.is_empty() {
            return Err(Error::Config("preference dataset is empty".into()));
        }
        for pair in &pref_dataset.pairs {
            pair.first.validate_ids(ns, na)?;
            pair.second.validate_ids(ns, na)?;
            if pair.k() != config.k {
                return Err(Error::Config(format!(
                    "pair has k = {}, config expects {}",
                    pair.k(),
                    config.k
                )));
            }
        }
        for query in &pref_dataset.rankings {
            for seg in &query.segments {
                seg.validate_ids(ns, na)?;
            }
        }
        offline_dataset.validate_ids(ns, na)?;

        let counts = StateActionCounts::from_data(
            &pref_dataset.pairs,
            &offline_dataset.transitions,
            ns,
            na,
        );
        let mut rng = StdRng::seed_from_u64(config.seed);
        let (q, v, policy_net, q_target) = match &config.backbone {
            Backbone::Tabular => {
                let q = Approximator::tabular_q(Role::Q, ns, na);
                // AWAC has no V parameters; its value estimate reads a
                // Polyak-averaged target copy of Q so transient spikes in
                // the live Q cannot feed straight back into the targets.
                let (v, q_target) = match config.variant {
                    Variant::Awac => (None, Some(q.clone())),
                    _ => (Some(Approximator::tabular_v(ns)), None),
                };
                (q, v, None, q_target)
            }
            Backbone::Mlp { hidden } => {
                let sa = Featurizer::StateActionOneHot { n_states: ns, n_actions: na };
                let st = Featurizer::StateOneHot { n_states: ns };
                let mut q_net = MlpFn::zeros(Role::Q, sa, hidden, 1);
                q_net.init_xavier(&mut rng);
                let q = Approximator::Mlp(q_net);
                let v = match config.variant {
                    Variant::Awac => None,
                    _ => {
                        let mut v_net = MlpFn::zeros(Role::V, st, hidden, 1);
                        v_net.init_xavier(&mut rng);
                        Some(Approximator::Mlp(v_net))
                    }
                };
                let mut p_net = MlpFn::zeros(Role::Policy, st, hidden, na);
                p_net.init_xavier(&mut rng);
                (q.clone(), v, Some(Approximator::Mlp(p_net)), Some(q))
            }
        };
        let q_opt = crate::approx::AdamState::new(q.param_count(), config.q_lr);
        let v_opt = v.as_ref().map(|f| crate::approx::AdamState::new(f.param_count(), config.v_lr));
        let policy_opt = policy_net
            .as_ref()
            .map(|f| crate::approx::AdamState::new(f.param_count(), config.policy_lr));
        let current_policy = counts.behavior_policy();
        Ok(Self {
            config,
            mdp: mdp_for_eval.clone(),
            pairs: pref_dataset.pairs.clone(),
            rankings: pref_dataset.rankings.clone(),
            offline: offline_dataset.transitions.clone(),
            counts,
            q,
            q_target,
            q_opt,
            v,
            v_opt,
            policy_net,
            policy_opt,
            current_policy,
            oracle_rstar: None,
            rng,
        })
    }

    /// Attach an oracle reward table; the metrics log then reports
    /// sup|T*Q - r*| at every evaluation point.
    pub fn attach_oracle_reward(&mut self, rstar: QTable) {
        self.oracle_rstar = Some(rstar);
    }

    /// Exact count of learnable scalars across all parameter blocks.
    pub fn param_count(&self) -> usize {
        self.q.param_count()
            + self.v.as_ref().map_or(0, |f| f.param_count())
            + self.policy_net.as_ref().map_or(0, |f| f.param_count())
    }

    fn expectation(&self) -> ValueExpectation<'_> {
        match self.config.backbone {
            Backbone::Tabular => ValueExpectation::Exact(&self.mdp),
            Backbone::Mlp { .. } => ValueExpectation::Sampled,
        }
    }

    fn sample_pairs(&mut self) -> Vec<PreferencePair> {
        if self.pairs.is_empty() {
            return Vec::new();
        }
        if self.config.pref_batch_size >= self.pairs.len() {
            return self.pairs.clone();
        }
        (0..self.config.pref_batch_size)
            .map(|_| self.pairs[self.rng.gen_range(0..self.pairs.len())].clone())
            .collect()
    }

    fn sample_rankings(&mut self) -> Vec<RankingQuery> {
        if self.rankings.is_empty() {
            return Vec::new();
        }
        if self.config.pref_batch_size >= self.rankings.len() {
            return self.rankings.clone();
        }
        (0..self.config.pref_batch_size)
            .map(|_| self.rankings[self.rng.gen_range(0..self.rankings.len())].clone())
            .collect()
    }

    fn sample_offline(&mut self) -> Vec<Transition> {
        if self.offline.is_empty() {
            return Vec::new();
        }
        if self.config.offline_batch_size >= self.offline.len() {
            return self.offline.clone();
        }
        (0..self.config.offline_batch_size)
            .map(|_| self.offline[self.rng.gen_range(0..self.offline.len())])
            .collect()
    }

    /// Policy snapshot: closed-form AWR in tabular mode (AWAC reports its
    /// live damped policy), the policy net's softmax in MLP mode.
    pub fn extracted_policy(&self) -> Policy {
        match &self.policy_net {
            Some(net) => {
                let na = self.mdp.n_actions();
                let probs = (0..self.mdp.n_states())
                    .map(|s| {
                        let logits = net.logits(s);
                        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let ws: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
                        let total: f64 = ws.iter().sum();
                        (0..na).map(|a| ws[a] / total).collect()
                    })
                    .collect();
                Policy::new(probs).expect("softmax rows")
            }
            None if self.config.variant == Variant::Awac => self.current_policy.clone(),
            None => {
                let value = self.value_target_for_extraction();
                extract_policy_awr(&self.q, &value, self.config.beta, &self.counts)
            }
        }
    }

    fn value_target_for_extraction(&self) -> ValueTarget<'_> {
        match (&self.v, self.config.variant) {
            (Some(v), _) => ValueTarget::Learned(v),
            (None, _) => ValueTarget::FromPolicy {
                q: &self.q,
                policy: &self.current_policy,
            },
        }
    }

    fn value_rows(&self, pref_batch: &[PreferencePair], offline_batch: &[Transition]) -> Vec<(usize, usize)> {
        let mut rows: Vec<(usize, usize)> = Vec::new();
        for pair in pref_batch {
            for seg in [&pair.first, &pair.second] {
                for (s, a, _) in seg.transitions() {
                    rows.push((s, a));
                }
            }
        }
        for t in offline_batch {
            rows.push((t.state, t.action));
        }
        rows
    }

    /// Run the configured number of steps and return the artifacts.
    pub fn run(&mut self) -> Result<TrainArtifacts> {
        let start = std::time::Instant::now();
        let mut metrics = MetricsLog::new();
        let total = self.config.total_steps;
        let mut last_q;
        let mut last_value_loss;
        for step in 1..=total {
            // Geometric learning-rate schedule.
            let frac = if total > 1 {
                (step - 1) as f64 / (total - 1) as f64
            } else {
                0.0
            };
            let decay = self.config.lr_final_fraction.powf(frac);
            self.q_opt.lr = self.config.q_lr * decay;
            if let Some(opt) = self.v_opt.as_mut() {
                opt.lr = self.config.v_lr * decay;
            }
            if let Some(opt) = self.policy_opt.as_mut() {
                opt.lr = self.config.policy_lr * decay;
            }

            let raw_pairs = self.sample_pairs();
            let pref_batch = if raw_pairs.is_empty() {
                Vec::new()
            } else if self.config.s < self.config.k {
                subsample_batch(&raw_pairs, self.config.s, &mut self.rng)?
            } else {
                raw_pairs
            };
            let ranking_batch = if self.pairs.is_empty() { self.sample_rankings() } else { Vec::new() };
            let offline_batch = self.sample_offline();

            // AWAC's value baseline is its live policy; nudge it toward the
            // AWR extraction instead of replacing it, mirroring the slow
            // policy head of the gradient variants.
            if self.config.variant == Variant::Awac && self.policy_net.is_none() {
                let target = {
                    let q_for_policy = self.q_target.as_ref().unwrap_or(&self.q);
                    let value = ValueTarget::FromPolicy {
                        q: q_for_policy,
                        policy: &self.current_policy,
                    };
                    extract_policy_awr(q_for_policy, &value, self.config.beta, &self.counts)
                };
                let rate = self.config.awac_policy_rate;
                let probs = (0..self.mdp.n_states())
                    .map(|s| {
                        (0..self.mdp.n_actions())
                            .map(|a| {
                                (1.0 - rate) * self.current_policy.prob(s, a) + rate * target.prob(s, a)
                            })
                            .collect()
                    })
                    .collect();
                self.current_policy = Policy::new(probs)?;
            }

            // Q-step.
            last_q = {
                let value_target = match (&self.v, self.config.variant) {
                    (Some(v), _) => ValueTarget::Learned(v),
                    (None, _) => ValueTarget::FromPolicy {
                        q: self.q_target.as_ref().unwrap_or(&self.q),
                        policy: &self.current_policy,
                    },
                };
                let expectation = self.expectation();
                if !pref_batch.is_empty() {
                    ipl_loss(&self.q, &value_target, &self.config, &pref_batch, &offline_batch, &expectation)?
                } else {
                    ranking_loss(
                        &self.q,
                        &value_target,
                        &self.config,
                        &ranking_batch,
                        &offline_batch,
                        &expectation,
                    )?
                }
            };
            self.q_opt.apply(self.q.params_mut(), &last_q.grad)?;

            // V-step.
            let rows = self.value_rows(&pref_batch, &offline_batch);
            if let (Some(v), Some(opt)) = (&mut self.v, &mut self.v_opt) {
                let q_for_v: &Approximator = self.q_target.as_ref().unwrap_or(&self.q);
                let report = match self.config.variant {
                    Variant::Xql => linex_value_loss(v, q_for_v, self.config.alpha, &rows)?,
                    Variant::Iql => expectile_value_loss(v, q_for_v, self.config.tau, &rows)?,
                    Variant::Awac => unreachable!("AWAC has no value parameters"),
                };
                last_value_loss = report.loss;
                opt.apply(v.params_mut(), &report.grad)?;
            } else {
                last_value_loss = 0.0;
            }

            // Target network and policy net updates (MLP mode).
            if let Some(target) = self.q_target.as_mut() {
                target.polyak_from(&self.q, self.config.target_update_rate);
            }
            if let (Some(net), Some(opt)) = (&self.policy_net, &mut self.policy_opt) {
                let value = match (&self.v, self.config.variant) {
                    (Some(v), _) => ValueTarget::Learned(v),
                    (None, _) => ValueTarget::FromPolicy {
                        q: self.q_target.as_ref().unwrap_or(&self.q),
                        policy: &self.current_policy,
                    },
                };
                let report = awr_policy_step(net, &self.q, &value, self.config.beta, &rows)?;
                let grad = report.grad;
                let net = self.policy_net.as_mut().unwrap();
                opt.apply(net.params_mut(), &grad)?;
            }
            if self.config.variant == Variant::Awac && self.policy_net.is_some() {
                self.current_policy = self.extracted_policy();
            }

            // Evaluation and divergence detection.
            if step % self.config.eval_interval == 0 || step == total {
                let row = self.evaluate(step, &last_q, last_value_loss, &pref_batch, &offline_batch)?;
                if row.mean_abs_implicit_reward > self.config.divergence_bound {
                    return Err(Error::Divergence(format!(
                        "mean |r_Q| = {:.3e} exceeded bound {:.1e} at step {} (lambda = {})",
                        row.mean_abs_implicit_reward,
                        self.config.divergence_bound,
                        step,
                        self.config.lambda
                    )));
                }
                metrics.push(row);
            }
        }
        let policy = self.extracted_policy();
        Ok(TrainArtifacts {
            q: self.q.clone(),
            v: self.v.clone(),
            policy_net: self.policy_net.clone(),
            policy,
            metrics,
            config: self.config.clone(),
            learnable_params: self.param_count(),
            steps_run: total,
            wall_ms: start.elapsed().as_millis(),
        })
    }

    fn evaluate(
        &self,
        step: usize,
        last_q: &QStepReport,
        last_value_loss: f64,
        pref_batch: &[PreferencePair],
        offline_batch: &[Transition],
    ) -> Result<MetricsRow> {
        let value_target = self.value_target_for_extraction();
        let (mean_abs, max_abs, gap) = match self.config.backbone {
            Backbone::Tabular => {
                let table = implicit_reward_table(&self.q, &value_target, self.config.gamma, &self.mdp);
                let xs = table.as_slice();
                let mean = xs.iter().map(|r| r.abs()).sum::<f64>() / xs.len() as f64;
                let max = xs.iter().map(|r| r.abs()).fold(0.0, f64::max);
                let gap = self.oracle_rstar.as_ref().map(|rstar| table.sup_distance(rstar));
                (mean, max, gap)
            }
            Backbone::Mlp { .. } => {
                let expectation = self.expectation();
                let mut values = implicit_reward(
                    &self.q,
                    &value_target,
                    self.config.gamma,
                    offline_batch,
                    &expectation,
                );
                for pair in pref_batch {
                    for seg in [&pair.first, &pair.second] {
                        let transitions: Vec<Transition> = seg
                            .transitions()
                            .map(|(state, action, next_state)| Transition { state, action, next_state })
                            .collect();
                        values.extend(implicit_reward(
                            &self.q,
                            &value_target,
                            self.config.gamma,
                            &transitions,
                            &expectation,
                        ));
                    }
                }
                let n = values.len().max(1) as f64;
                let mean = values.iter().map(|r| r.abs()).sum::<f64>() / n;
                let max = values.iter().map(|r| r.abs()).fold(0.0, f64::max);
                (mean, max, None)
            }
        };
        let policy = self.extracted_policy();
        let gt_return = evaluate_policy_return(&self.mdp, &policy, &self.mdp.expert_reward_table())?;
        Ok(MetricsRow {
            step,
            pref_loss: last_q.pref_loss,
            reg_value: last_q.reg_value,
            value_loss: last_value_loss,
            mean_abs_implicit_reward: mean_abs,
            max_abs_implicit_reward: max_abs,
            gt_return,
            oracle_reward_gap: gap,
        })
    }
}

/// Convenience wrapper over `Trainer` matching the module-level contract.
pub fn train_ipl(
    config: &IplConfig,
    pref_dataset: &crate::data::Dataset,
    offline_dataset: &TransitionDataset,
    mdp_for_eval: &TabularMdp,
) -> Result<TrainArtifacts> {
    Trainer::new(config.clone(), pref_dataset, offline_dataset, mdp_for_eval)?.run()
}
