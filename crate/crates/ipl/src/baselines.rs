//! Baselines for head-to-head comparison: the two-phase explicit-reward
//! pipeline (Markovian reward + IQL) and the contextual-bandit DPO
//! reduction, which IPL collapses to when segments have length one and a
//! shared context.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::approx::{AdamState, Approximator, Featurizer, Input, MlpFn, PolicyLogRatioFn, Role};
use crate::data::{
    subsample_batch, Dataset, LabelMode, PreferencePair, Segment, SegmentDiscount, Transition,
    TransitionDataset,
};
use crate::error::{Error, Result};
use crate::ipl::{
    expectile_value_loss, extract_policy_awr, ipl_loss, Backbone, IplConfig, StateActionCounts,
    TrainArtifacts, ValueExpectation, ValueTarget, Variant,
};
use crate::metrics::{MetricsLog, MetricsRow};
use crate::mdp::{evaluate_policy_return, Policy, QTable, TabularMdp, VTable};
use crate::util::logistic;

/// Two-phase baseline configuration: a reward-model fit followed by
/// standard offline RL on its labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MrConfig {
    pub reward_steps: usize,
    pub reward_lr: f64,
    /// Explicit L2 weight on reward outputs (mirror of the IPL regularizer;
    /// weight decay is a poor proxy here).
    pub reward_lambda: f64,
    /// Offline RL phase; the reward phase borrows k, s, batch size,
    /// backbone, and the discount flag from it.
    pub rl: IplConfig,
}

impl Default for MrConfig {
    fn default() -> Self {
        Self {
            reward_steps: 20_000,
            reward_lr: 3e-4,
            reward_lambda: 0.5,
            rl: IplConfig {
                variant: Variant::Iql,
                ..IplConfig::default()
            },
        }
    }
}

/// A learned explicit reward function plus its training curve.
#[derive(Debug, Clone)]
pub struct RewardModel {
    pub function: Approximator,
    /// (step, bce, regularizer value) samples.
    pub train_log: Vec<(usize, f64, f64)>,
}

impl RewardModel {
    pub fn value(&self, s: usize, a: usize) -> f64 {
        self.function.forward(&Input::StateAction(s, a))
    }

    pub fn table(&self, n_states: usize, n_actions: usize) -> QTable {
        QTable::from_fn(n_states, n_actions, |s, a| self.value(s, a))
    }
}

/// Fit an explicit Markovian reward by BCE on the preference data with the
/// same subsampling augmentation IPL uses. With gamma pinned to zero
/// through a zero value target, the shared preference loss reduces to
/// plain reward-difference logistic regression.
pub fn train_reward_mr(
    pref_dataset: &Dataset,
    config: &MrConfig,
    mdp: &TabularMdp,
) -> Result<RewardModel> {
    if pref_dataset.pairs.is_empty() {
        return Err(Error::Config("reward training needs preference pairs".into()));
    }
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let mut rng = StdRng::seed_from_u64(config.rl.seed.wrapping_add(0x5eed_0001));
    let mut reward_fn = match &config.rl.backbone {
        Backbone::Tabular => Approximator::tabular_q(Role::Reward, ns, na),
        Backbone::Mlp { hidden } => {
            let mut net = MlpFn::zeros(
                Role::Reward,
                Featurizer::StateActionOneHot { n_states: ns, n_actions: na },
                hidden,
                1,
            );
            net.init_xavier(&mut rng);
            Approximator::Mlp(net)
        }
    };
    // The value target is identically zero, so r_theta(s,a) plays the role
    // of the implicit reward directly.
    let zero_v = VTable::zeros(ns);
    let synth = IplConfig {
        lambda: config.reward_lambda,
        total_steps: config.reward_steps.max(1),
        q_lr: config.reward_lr,
        eval_interval: usize::MAX,
        ..config.rl.clone()
    };
    synth.validate()?;
    let mut opt = AdamState::new(reward_fn.param_count(), config.reward_lr);
    let mut train_log = Vec::new();
    let log_every = (config.reward_steps / 50).max(1);
    for step in 1..=config.reward_steps {
        let batch: Vec<PreferencePair> = if synth.pref_batch_size >= pref_dataset.pairs.len() {
            pref_dataset.pairs.clone()
        } else {
            (0..synth.pref_batch_size)
                .map(|_| pref_dataset.pairs[rng.gen_range(0..pref_dataset.pairs.len())].clone())
                .collect()
        };
        let batch = if synth.s < synth.k {
            subsample_batch(&batch, synth.s, &mut rng)?
        } else {
            batch
        };
        let report = ipl_loss(
            &reward_fn,
            &ValueTarget::Table(&zero_v),
            &synth,
            &batch,
            &[],
            &ValueExpectation::Exact(mdp),
        )?;
        opt.apply(reward_fn.params_mut(), &report.grad)?;
        if step % log_every == 0 || step == config.reward_steps {
            train_log.push((step, report.pref_loss, report.reg_value));
        }
    }
    Ok(RewardModel {
        function: reward_fn,
        train_log,
    })
}

/// Offline IQL on explicit reward labels: Q regresses toward
/// r_theta(s,a) + gamma E[V(s')], V fits the expectile, and the policy is
/// extracted by advantage-weighted regression.
pub fn train_iql_with_reward(
    reward_model: &RewardModel,
    transition_dataset: &TransitionDataset,
    config: &IplConfig,
    mdp_for_eval: &TabularMdp,
) -> Result<TrainArtifacts> {
    config.validate()?;
    if transition_dataset.transitions.is_empty() {
        return Err(Error::Config("offline dataset is empty".into()));
    }
    let (ns, na) = (mdp_for_eval.n_states(), mdp_for_eval.n_actions());
    transition_dataset.validate_ids(ns, na)?;
    let start = std::time::Instant::now();
    let mut rng = StdRng::seed_from_u64(config.seed);
    let (mut q, mut v, mut q_target, mut policy_net) = match &config.backbone {
        Backbone::Tabular => (
            Approximator::tabular_q(Role::Q, ns, na),
            Approximator::tabular_v(ns),
            None,
            None,
        ),
        Backbone::Mlp { hidden } => {
            let sa = Featurizer::StateActionOneHot { n_states: ns, n_actions: na };
            let st = Featurizer::StateOneHot { n_states: ns };
            let mut q_net = MlpFn::zeros(Role::Q, sa, hidden, 1);
            q_net.init_xavier(&mut rng);
            let mut v_net = MlpFn::zeros(Role::V, st, hidden, 1);
            v_net.init_xavier(&mut rng);
            let mut p_net = MlpFn::zeros(Role::Policy, st, hidden, na);
            p_net.init_xavier(&mut rng);
            let q = Approximator::Mlp(q_net);
            (q.clone(), Approximator::Mlp(v_net), Some(q), Some(Approximator::Mlp(p_net)))
        }
    };
    let mut q_opt = AdamState::new(q.param_count(), config.q_lr);
    let mut v_opt = AdamState::new(v.param_count(), config.v_lr);
    let mut policy_opt = policy_net
        .as_ref()
        .map(|f| AdamState::new(f.param_count(), config.policy_lr));
    let counts = StateActionCounts::from_data(&[], &transition_dataset.transitions, ns, na);
    let learnable_params = q.param_count()
        + v.param_count()
        + policy_net.as_ref().map_or(0, |f| f.param_count())
        + reward_model.function.param_count();

    let mut metrics = MetricsLog::new();
    let reward_table = reward_model.table(ns, na);
    let total = config.total_steps;
    for step in 1..=total {
        let frac = if total > 1 { (step - 1) as f64 / (total - 1) as f64 } else { 0.0 };
        let decay = config.lr_final_fraction.powf(frac);
        q_opt.lr = config.q_lr * decay;
        v_opt.lr = config.v_lr * decay;
        if let Some(opt) = policy_opt.as_mut() {
            opt.lr = config.policy_lr * decay;
        }
        let batch: Vec<Transition> = if config.offline_batch_size >= transition_dataset.transitions.len() {
            transition_dataset.transitions.clone()
        } else {
            (0..config.offline_batch_size)
                .map(|_| transition_dataset.transitions[rng.gen_range(0..transition_dataset.transitions.len())])
                .collect()
        };

        // Q-step: squared regression toward r_theta + gamma E[V'] (semi-gradient).
        let mut grad = vec![0.0; q.param_count()];
        let mut loss = 0.0;
        {
            let n = batch.len() as f64;
            for t in &batch {
                let target = match config.backbone {
                    Backbone::Tabular => {
                        let ev: f64 = mdp_for_eval
                            .transition_row(t.state, t.action)
                            .iter()
                            .enumerate()
                            .map(|(sp, p)| p * v.forward(&Input::State(sp)))
                            .sum();
                        reward_model.value(t.state, t.action) + config.gamma * ev
                    }
                    Backbone::Mlp { .. } => {
                        reward_model.value(t.state, t.action)
                            + config.gamma * v.forward(&Input::State(t.next_state))
                    }
                };
                let diff = q.forward(&Input::StateAction(t.state, t.action)) - target;
                loss += diff * diff / n;
                q.accumulate_grad(&Input::StateAction(t.state, t.action), 2.0 * diff / n, &mut grad);
            }
        }
        if !loss.is_finite() {
            return Err(Error::Divergence("non-finite Q regression loss".into()));
        }
        q_opt.apply(q.params_mut(), &grad)?;

        // V-step (expectile).
        let rows: Vec<(usize, usize)> = batch.iter().map(|t| (t.state, t.action)).collect();
        let q_for_v = q_target.as_ref().unwrap_or(&q);
        let v_report = expectile_value_loss(&v, q_for_v, config.tau, &rows)?;
        v_opt.apply(v.params_mut(), &v_report.grad)?;

        if let Some(target) = q_target.as_mut() {
            target.polyak_from(&q, config.target_update_rate);
        }
        if let (Some(net), Some(opt)) = (&mut policy_net, &mut policy_opt) {
            let report =
                crate::ipl::awr_policy_step(net, &q, &ValueTarget::Learned(&v), config.beta, &rows)?;
            opt.apply(net.params_mut(), &report.grad)?;
        }

        if step % config.eval_interval == 0 || step == total {
            let policy = match &policy_net {
                Some(net) => softmax_policy(net, ns, na),
                None => extract_policy_awr(&q, &ValueTarget::Learned(&v), config.beta, &counts),
            };
            let gt_return =
                evaluate_policy_return(mdp_for_eval, &policy, &mdp_for_eval.expert_reward_table())?;
            let abs: Vec<f64> = reward_table.as_slice().iter().map(|r| r.abs()).collect();
            metrics.push(MetricsRow {
                step,
                pref_loss: loss,
                reg_value: 0.0,
                value_loss: v_report.loss,
                mean_abs_implicit_reward: abs.iter().sum::<f64>() / abs.len() as f64,
                max_abs_implicit_reward: abs.iter().cloned().fold(0.0, f64::max),
                gt_return,
                oracle_reward_gap: None,
            });
        }
    }
    let policy = match &policy_net {
        Some(net) => softmax_policy(net, ns, na),
        None => extract_policy_awr(&q, &ValueTarget::Learned(&v), config.beta, &counts),
    };
    Ok(TrainArtifacts {
        q,
        v: Some(v),
        policy_net,
        policy,
        metrics,
        config: config.clone(),
        learnable_params,
        steps_run: total,
        wall_ms: start.elapsed().as_millis(),
    })
}

fn softmax_policy(net: &Approximator, n_states: usize, n_actions: usize) -> Policy {
    let probs = (0..n_states)
        .map(|s| {
            let logits = net.logits(s);
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let ws: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
            let total: f64 = ws.iter().sum();
            (0..n_actions).map(|a| ws[a] / total).collect()
        })
        .collect();
    Policy::new(probs).expect("softmax rows")
}

/// Contextual bandit: same-context preference pairs over single-step
/// segments, a reference policy, and the hidden scoring reward.
#[derive(Debug, Clone)]
pub struct BanditProblem {
    pub n_contexts: usize,
    pub n_actions: usize,
    pub mu: Policy,
    /// Hidden expert reward used by the labeler.
    pub reward: QTable,
    pub pairs: Vec<PreferencePair>,
}

impl BanditProblem {
    pub fn validate(&self) -> Result<()> {
        for pair in &self.pairs {
            if pair.k() != 1 {
                return Err(Error::Config("bandit pairs must use length-1 segments".into()));
            }
            if pair.first.states[0] != pair.second.states[0] {
                return Err(Error::Config(
                    "bandit pairs must share the context between segments".into(),
                ));
            }
        }
        Ok(())
    }

    /// Expected one-step reward of a policy under uniform contexts.
    pub fn expected_reward(&self, policy: &Policy) -> f64 {
        let mut total = 0.0;
        for s in 0..self.n_contexts {
            for a in 0..self.n_actions {
                total += policy.prob(s, a) * self.reward[(s, a)];
            }
        }
        total / self.n_contexts as f64
    }
}

/// Single-step segment at (context, action); the recorded next state is the
/// context itself (there is no successor in a bandit).
pub fn bandit_segment(context: usize, action: usize) -> Segment {
    Segment::new(vec![context, context], vec![action]).expect("valid shape")
}

/// Random bandit with exhaustive same-context action pairs labeled from a
/// hidden uniform reward.
pub fn make_random_bandit(
    n_contexts: usize,
    n_actions: usize,
    reward_scale: f64,
    mode: LabelMode,
    seed: u64,
) -> Result<BanditProblem> {
    if n_contexts == 0 || n_actions < 2 {
        return Err(Error::Config("bandit needs >= 1 context and >= 2 actions".into()));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let reward = QTable::from_fn(n_contexts, n_actions, |_, _| {
        rng.gen_range(-reward_scale..=reward_scale)
    });
    let mut pairs = Vec::new();
    for s in 0..n_contexts {
        for a1 in 0..n_actions {
            for a2 in a1 + 1..n_actions {
                pairs.push(crate::data::label_pair(
                    bandit_segment(s, a1),
                    bandit_segment(s, a2),
                    &reward,
                    mode,
                    SegmentDiscount::Off,
                    &mut rng,
                )?);
            }
        }
    }
    let bandit = BanditProblem {
        n_contexts,
        n_actions,
        mu: Policy::uniform(n_contexts, n_actions),
        reward,
        pairs,
    };
    bandit.validate()?;
    Ok(bandit)
}

/// DPO loss over same-context pairs:
/// -mean BCE(alpha [log pi/mu (a1|s) - log pi/mu (a2|s)], y), with the
/// gradient taken w.r.t. the policy logits. This path is written directly
/// from the log-ratio formula, independent of the shared IPL loss code.
pub fn dpo_loss(
    policy_logits: &Approximator,
    mu: &Policy,
    pairs: &[PreferencePair],
    alpha: f64,
) -> Result<(f64, Vec<f64>)> {
    if alpha <= 0.0 {
        return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
    }
    if pairs.is_empty() {
        return Err(Error::Config("DPO needs at least one pair".into()));
    }
    let n_actions = mu.n_actions();
    let mut grad = vec![0.0; policy_logits.param_count()];
    let mut loss = 0.0;
    let m = pairs.len() as f64;
    for pair in pairs {
        let s = pair.first.states[0];
        if pair.second.states[0] != s {
            return Err(Error::Config("DPO pairs must share the context".into()));
        }
        let (a1, a2) = (pair.first.actions[0], pair.second.actions[0]);
        for a in [a1, a2] {
            if mu.prob(s, a) <= 0.0 {
                return Err(Error::Evaluation(format!(
                    "mu has zero probability on action {a} in context {s}"
                )));
            }
        }
        let logits = policy_logits.logits(s);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        let log_pi = |a: usize| logits[a] - lse;
        let z = alpha * (log_pi(a1) - mu.prob(s, a1).ln()) - alpha * (log_pi(a2) - mu.prob(s, a2).ln());
        loss += crate::ipl::preference_bce(z, pair.label) / m;
        let dz = (logistic(z) - pair.label) / m;
        // d log pi(a|s) / d logit_b = 1{a=b} - softmax_b.
        let upstream: Vec<f64> = (0..n_actions)
            .map(|b| {
                let softmax_b = (logits[b] - lse).exp();
                let d1 = if b == a1 { 1.0 } else { 0.0 };
                let d2 = if b == a2 { 1.0 } else { 0.0 };
                dz * alpha * ((d1 - softmax_b) - (d2 - softmax_b))
            })
            .collect();
        policy_logits.accumulate_logit_grad(s, &upstream, &mut grad);
    }
    if !loss.is_finite() {
        return Err(Error::Divergence("non-finite DPO loss".into()));
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpoConfig {
    pub alpha: f64,
    pub lr: f64,
    pub steps: usize,
    pub eval_interval: usize,
    pub seed: u64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            lr: 0.05,
            steps: 2000,
            eval_interval: 100,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DpoArtifacts {
    pub policy: Policy,
    pub metrics: MetricsLog,
}

/// Train a tabular softmax policy on the DPO loss (full batch, Adam).
pub fn train_dpo(bandit: &BanditProblem, config: &DpoConfig) -> Result<DpoArtifacts> {
    bandit.validate()?;
    let mut logits = Approximator::tabular_q(Role::Policy, bandit.n_contexts, bandit.n_actions);
    let mut opt = AdamState::new(logits.param_count(), config.lr);
    let mut metrics = MetricsLog::new();
    for step in 1..=config.steps {
        let (loss, grad) = dpo_loss(&logits, &bandit.mu, &bandit.pairs, config.alpha)?;
        opt.apply(logits.params_mut(), &grad)?;
        if step % config.eval_interval.max(1) == 0 || step == config.steps {
            let policy = softmax_policy(&logits, bandit.n_contexts, bandit.n_actions);
            metrics.push(MetricsRow {
                step,
                pref_loss: loss,
                reg_value: 0.0,
                value_loss: 0.0,
                mean_abs_implicit_reward: 0.0,
                max_abs_implicit_reward: 0.0,
                gt_return: bandit.expected_reward(&policy),
                oracle_reward_gap: None,
            });
        }
    }
    Ok(DpoArtifacts {
        policy: softmax_policy(&logits, bandit.n_contexts, bandit.n_actions),
        metrics,
    })
}

/// Train IPL on the bandit with the Q-function parameterized through the
/// policy log-ratio (lambda = 0, gamma = 0), the setting where IPL and DPO
/// coincide. Gradients flow through the shared preference-loss machinery.
pub fn train_ipl_bandit(bandit: &BanditProblem, config: &DpoConfig) -> Result<Policy> {
    bandit.validate()?;
    let mut q = Approximator::PolicyLogRatio(PolicyLogRatioFn::new(&bandit.mu, config.alpha)?);
    let mut opt = AdamState::new(q.param_count(), config.lr);
    let synth = IplConfig {
        variant: Variant::Xql,
        backbone: Backbone::Tabular,
        lambda: 0.0,
        gamma: 0.0,
        alpha: config.alpha,
        k: 1,
        s: 1,
        pref_batch_size: bandit.pairs.len().max(1),
        total_steps: config.steps.max(1),
        seed: config.seed,
        ..IplConfig::default()
    };
    synth.validate()?;
    let zero_v = VTable::zeros(bandit.n_contexts);
    for _ in 0..config.steps {
        let report = ipl_loss(
            &q,
            &ValueTarget::Table(&zero_v),
            &synth,
            &bandit.pairs,
            &[],
            &ValueExpectation::Sampled,
        )?;
        opt.apply(q.params_mut(), &report.grad)?;
    }
    match &q {
        Approximator::PolicyLogRatio(f) => Ok(f.policy()),
        _ => unreachable!(),
    }
}

/// Loss and gradient of the IPL objective on a bandit with the
/// policy-parameterized Q, for direct comparison against `dpo_loss`.
pub fn ipl_bandit_loss(
    policy_logits_q: &PolicyLogRatioFn,
    bandit: &BanditProblem,
    lambda: f64,
) -> Result<(f64, Vec<f64>)> {
    let q = Approximator::PolicyLogRatio(policy_logits_q.clone());
    let synth = IplConfig {
        variant: Variant::Xql,
        backbone: Backbone::Tabular,
        lambda,
        gamma: 0.0,
        alpha: policy_logits_q.alpha,
        k: 1,
        s: 1,
        pref_batch_size: bandit.pairs.len().max(1),
        ..IplConfig::default()
    };
    let zero_v = VTable::zeros(bandit.n_contexts);
    let report = ipl_loss(
        &q,
        &ValueTarget::Table(&zero_v),
        &synth,
        &bandit.pairs,
        &[],
        &ValueExpectation::Sampled,
    )?;
    Ok((report.loss, report.grad))
}

