//! Exact solvers that ground the convergence claims: the convex r* solver
//! (regularized preference logistic regression by Newton's method), the
//! bijection verifier for the inverse Bellman operator, variant-matched
//! optimal control on the oracle reward, and the end-to-end comparator.
//!
//! The oracle shares the learner's objective convention — mean BCE over
//! pairs plus lambda times the mean-square implicit reward — so the same
//! lambda means the same optimum on both sides.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::approx::{Approximator, Role};
use crate::data::{PreferencePair, SegmentDiscount};
use crate::error::{Error, Result};
use crate::ipl::{
    extract_policy_awr, implicit_reward_table, preference_bce, IplConfig, StateActionCounts,
    TrainArtifacts, ValueTarget, Variant,
};
use crate::mdp::{
    evaluate_policy_return, exact_q_evaluation, policy_transition_matrix, soft_value_iteration,
    Policy, QTable, TabularMdp, VTable, MAX_VI_ITERS,
};
use crate::util::logistic;

/// Gradient sup-norm at which the Newton solver declares convergence.
pub const ORACLE_GRAD_TOL: f64 = 1e-10;

/// Preference comparisons as a design matrix over the reward vector
/// r in R^{|S||A|}: row i accumulates +w_t at first-segment visits and
/// -w_t at second-segment visits, so X_i . r is exactly the preference
/// logit of pair i under reward r.
#[derive(Debug, Clone)]
pub struct ComparisonDesign {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub n_states: usize,
    pub n_actions: usize,
    pub discount: SegmentDiscount,
}

pub fn build_design(
    pairs: &[PreferencePair],
    n_states: usize,
    n_actions: usize,
    discount: SegmentDiscount,
) -> Result<ComparisonDesign> {
    let n = n_states * n_actions;
    let mut x = DMatrix::zeros(pairs.len(), n);
    let mut y = DVector::zeros(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        pair.first.validate_ids(n_states, n_actions)?;
        pair.second.validate_ids(n_states, n_actions)?;
        for (t, (s, a, _)) in pair.first.transitions().enumerate() {
            x[(i, s * n_actions + a)] += discount.weight(t);
        }
        for (t, (s, a, _)) in pair.second.transitions().enumerate() {
            x[(i, s * n_actions + a)] -= discount.weight(t);
        }
        y[i] = pair.label;
    }
    Ok(ComparisonDesign {
        x,
        y,
        n_states,
        n_actions,
        discount,
    })
}

/// The unique minimizer of the regularized preference loss, with solver
/// diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleReport {
    pub rstar: QTable,
    /// Sup-norm of the objective gradient at rstar.
    pub grad_sup_norm: f64,
    /// Smallest eigenvalue of the exact Hessian at rstar; strict convexity
    /// demands it stay >= 2 lambda / n.
    pub hessian_min_eig: f64,
    pub iterations: usize,
    pub lambda: f64,
    pub discount_in_segment: bool,
}

impl OracleReport {
    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Minimize (1/m) sum_i BCE(X_i . r, y_i) + (lambda/n_total) ||r||^2 by
/// Newton's method with the exact Hessian (1/m) X^T D X + (2 lambda/n) I,
/// to gradient sup-norm 1e-10. Requires lambda > 0 for strict convexity.
pub fn solve_rstar(design: &ComparisonDesign, lambda: f64, n_total: usize) -> Result<OracleReport> {
    if lambda <= 0.0 {
        return Err(Error::Config(format!(
            "oracle requires lambda > 0 for strict convexity, got {lambda}"
        )));
    }
    let n = design.x.ncols();
    if n_total != n {
        return Err(Error::Config(format!(
            "n_total = {n_total} does not match the design dimension {n}"
        )));
    }
    let m = design.x.nrows();
    let reg = 2.0 * lambda / n_total as f64;
    let mut r = DVector::zeros(n);

    let objective = |r: &DVector<f64>| -> f64 {
        let mut val = lambda / n_total as f64 * r.dot(r);
        if m > 0 {
            let z = &design.x * r;
            for i in 0..m {
                val += preference_bce(z[i], design.y[i]) / m as f64;
            }
        }
        val
    };
    let gradient = |r: &DVector<f64>| -> DVector<f64> {
        let mut g = reg * r;
        if m > 0 {
            let z = &design.x * r;
            let residual = DVector::from_fn(m, |i, _| (logistic(z[i]) - design.y[i]) / m as f64);
            g += design.x.transpose() * residual;
        }
        g
    };
    let hessian = |r: &DVector<f64>| -> DMatrix<f64> {
        let mut h = DMatrix::identity(n, n) * reg;
        if m > 0 {
            let z = &design.x * r;
            for i in 0..m {
                let p = logistic(z[i]);
                let d = p * (1.0 - p) / m as f64;
                let row = design.x.row(i);
                // h += d * row^T row
                for c1 in 0..n {
                    let v1 = row[c1];
                    if v1 == 0.0 {
                        continue;
                    }
                    for c2 in 0..n {
                        let v2 = row[c2];
                        if v2 != 0.0 {
                            h[(c1, c2)] += d * v1 * v2;
                        }
                    }
                }
            }
        }
        h
    };

    let mut iterations = 0;
    let mut g = gradient(&r);
    let mut current = objective(&r);
    while g.amax() > ORACLE_GRAD_TOL {
        iterations += 1;
        if iterations > 200 {
            return Err(Error::Numerics(format!(
                "Newton failed to converge; gradient sup-norm {:.3e} after {} iterations",
                g.amax(),
                iterations - 1
            )));
        }
        let h = hessian(&r);
        let step = h
            .clone()
            .lu()
            .solve(&g)
            .ok_or_else(|| Error::Numerics("singular Hessian in Newton solve".into()))?;
        // Backtracking line search on the objective. Near the optimum the
        // predicted decrease sinks below f64 resolution of the objective;
        // accept the step on a no-increase test there.
        let slope = g.dot(&step);
        let float_floor = 1e-14 * (1.0 + current.abs());
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let candidate = &r - t * &step;
            let value = objective(&candidate);
            if value <= current - 1e-4 * t * slope || value <= current + float_floor {
                r = candidate;
                current = value;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return Err(Error::Numerics("Newton line search stalled".into()));
        }
        g = gradient(&r);
    }

    let h = hessian(&r);
    let eigenvalues = h.symmetric_eigen().eigenvalues;
    let min_eig = eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let rstar = QTable::from_fn(design.n_states, design.n_actions, |s, a| {
        r[s * design.n_actions + a]
    });
    Ok(OracleReport {
        rstar,
        grad_sup_norm: g.amax(),
        hessian_min_eig: min_eig,
        iterations,
        lambda,
        discount_in_segment: matches!(design.discount, SegmentDiscount::On { .. }),
    })
}

/// Lemma-1 bijection check: Q = (I - gamma P^pi)^{-1} r, then
/// r' = (I - gamma P^pi) Q; returns sup|r - r'|.
pub fn verify_bijection(mdp: &TabularMdp, policy: &Policy, reward: &QTable) -> Result<f64> {
    let na = mdp.n_actions();
    let q = exact_q_evaluation(mdp, policy, reward)?;
    let p = policy_transition_matrix(mdp, policy);
    let n = mdp.n_states() * na;
    let q_vec = DVector::from_fn(n, |i, _| q[(i / na, i % na)]);
    let r_vec = DVector::from_fn(n, |i, _| reward[(i / na, i % na)]);
    let r_back = &q_vec - mdp.discount() * (p * &q_vec);
    Ok((r_back - r_vec).amax())
}

/// Optimal KL-regularized control for the oracle reward (soft value
/// iteration); the policy the XQL variant converges to.
pub fn oracle_policy(
    mdp: &TabularMdp,
    rstar: &QTable,
    alpha: f64,
    mu: &Policy,
) -> Result<(QTable, VTable, Policy)> {
    soft_value_iteration(mdp, rstar, alpha, mu)
}

/// Weighted expectile of a discrete set, by bisection on the monotone
/// stationarity condition sum_a w_a |tau - 1(q_a < v)| (q_a - v) = 0.
pub fn weighted_expectile(values: &[f64], weights: &[f64], tau: f64) -> f64 {
    debug_assert_eq!(values.len(), weights.len());
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (v, w) in values.iter().zip(weights) {
        if *w > 0.0 {
            lo = lo.min(*v);
            hi = hi.max(*v);
        }
    }
    if lo >= hi {
        return lo;
    }
    let balance = |v: f64| -> f64 {
        values
            .iter()
            .zip(weights)
            .map(|(q, w)| {
                let u = q - v;
                let scale = if u < 0.0 { 1.0 - tau } else { tau };
                w * scale * u
            })
            .sum()
    };
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if balance(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * (1.0 + lo.abs().max(hi.abs())) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Expectile value iteration: V(s) = expectile_tau of Q(s,.) under the
/// behavior weights, Q = r + gamma E[V(s')]. The fixed point the IQL
/// variant's alternating updates converge to.
pub fn expectile_value_iteration(
    mdp: &TabularMdp,
    reward: &QTable,
    tau: f64,
    mu: &Policy,
) -> Result<(QTable, VTable)> {
    if !(0.0 < tau && tau < 1.0) {
        return Err(Error::Config(format!("tau must be in (0,1), got {tau}")));
    }
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let value = |q: &QTable, s: usize| weighted_expectile(q.row(s), mu.row(s), tau);
    let mut q = QTable::zeros(ns, na);
    let mut converged = false;
    for _ in 0..MAX_VI_ITERS {
        let v: Vec<f64> = (0..ns).map(|s| value(&q, s)).collect();
        let next = QTable::from_fn(ns, na, |s, a| {
            let ev: f64 = mdp
                .transition_row(s, a)
                .iter()
                .zip(&v)
                .map(|(p, vs)| p * vs)
                .sum();
            reward[(s, a)] + mdp.discount() * ev
        });
        let residual = next.sup_distance(&q);
        q = next;
        if residual < 1e-13 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerics("expectile value iteration did not converge".into()));
    }
    let v = VTable::from_vec((0..ns).map(|s| value(&q, s)).collect());
    Ok((q, v))
}

/// Variant-matched optimal policy for a given reward: the exact fixed point
/// of the value scheme the trainer uses, with the trainer's own AWR
/// extraction over the same data counts.
#[derive(Debug, Clone)]
pub struct OraclePolicyResult {
    pub q: QTable,
    pub v: VTable,
    pub policy: Policy,
    pub variant: Variant,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
}

pub fn oracle_policy_for_variant(
    mdp: &TabularMdp,
    rstar: &QTable,
    config: &IplConfig,
    counts: &StateActionCounts,
) -> Result<OraclePolicyResult> {
    let behavior = counts.behavior_policy();
    let (q, v) = match config.variant {
        Variant::Xql => {
            let (q, v, _) = soft_value_iteration(mdp, rstar, config.alpha, &behavior)?;
            (q, v)
        }
        Variant::Iql => expectile_value_iteration(mdp, rstar, config.tau, &behavior)?,
        Variant::Awac => awac_fixed_point(mdp, rstar, config.beta, counts)?,
    };
    let q_fn = approximator_from_qtable(Role::Q, &q);
    let policy = extract_policy_awr(&q_fn, &ValueTarget::Table(&v), config.beta, counts);
    Ok(OraclePolicyResult {
        q,
        v,
        policy,
        variant: config.variant,
        alpha: config.alpha,
        beta: config.beta,
        tau: config.tau,
    })
}

/// AWAC's coupled fixed point: policy evaluation under pi, V = E_pi[Q],
/// pi = AWR extraction. Iterated to policy convergence.
fn awac_fixed_point(
    mdp: &TabularMdp,
    reward: &QTable,
    beta: f64,
    counts: &StateActionCounts,
) -> Result<(QTable, VTable)> {
    let ns = mdp.n_states();
    let mut policy = counts.behavior_policy();
    for _ in 0..10_000 {
        let q = exact_q_evaluation(mdp, &policy, reward)?;
        let v = VTable::from_vec(
            (0..ns)
                .map(|s| {
                    (0..mdp.n_actions())
                        .map(|a| policy.prob(s, a) * q[(s, a)])
                        .sum()
                })
                .collect(),
        );
        let q_fn = approximator_from_qtable(Role::Q, &q);
        let next = extract_policy_awr(&q_fn, &ValueTarget::Table(&v), beta, counts);
        let mut delta: f64 = 0.0;
        for s in 0..ns {
            for a in 0..mdp.n_actions() {
                delta = delta.max((next.prob(s, a) - policy.prob(s, a)).abs());
            }
        }
        policy = next;
        if delta < 1e-13 {
            let q = exact_q_evaluation(mdp, &policy, reward)?;
            let v = VTable::from_vec(
                (0..ns)
                    .map(|s| {
                        (0..mdp.n_actions())
                            .map(|a| policy.prob(s, a) * q[(s, a)])
                            .sum()
                    })
                    .collect(),
            );
            return Ok((q, v));
        }
    }
    Err(Error::Numerics("AWAC fixed-point iteration did not converge".into()))
}

/// Wrap a dense table as a read-only approximator.
pub fn approximator_from_qtable(role: Role, table: &QTable) -> Approximator {
    let mut f = Approximator::tabular_q(role, table.n_states(), table.n_actions());
    f.params_mut().copy_from_slice(table.as_slice());
    f
}

/// Gaps between a trained run and the oracle solution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GapReport {
    /// sup|T*Q - r*| on the regularized support.
    pub reward_gap_sup: f64,
    /// max_s KL(pi_trained || pi*).
    pub max_state_kl: f64,
    /// |ground-truth return(pi_trained) - ground-truth return(pi*)|.
    pub return_gap_abs: f64,
}

impl GapReport {
    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Compare trained artifacts against the oracle. Refuses mismatched
/// configurations (lambda, discount flag, variant temperature) — a
/// comparison across different objectives would be meaningless.
pub fn compare_to_oracle(
    artifacts: &TrainArtifacts,
    oracle: &OracleReport,
    oracle_policy_result: &OraclePolicyResult,
    mdp: &TabularMdp,
    counts: &StateActionCounts,
) -> Result<GapReport> {
    let config = &artifacts.config;
    if oracle.lambda != config.lambda {
        return Err(Error::Config(format!(
            "comparison refused: oracle lambda {} vs trained {}",
            oracle.lambda, config.lambda
        )));
    }
    if oracle.discount_in_segment != config.discount_in_segment {
        return Err(Error::Config(
            "comparison refused: segment discount flags differ".into(),
        ));
    }
    if oracle_policy_result.variant != config.variant {
        return Err(Error::Config(format!(
            "comparison refused: oracle policy is for {} but the run used {}",
            oracle_policy_result.variant, config.variant
        )));
    }
    let temp_matches = match config.variant {
        Variant::Xql => oracle_policy_result.alpha == config.alpha,
        Variant::Iql => oracle_policy_result.tau == config.tau,
        Variant::Awac => true,
    } && oracle_policy_result.beta == config.beta;
    if !temp_matches {
        return Err(Error::Config(
            "comparison refused: variant temperatures differ".into(),
        ));
    }

    let value_target = match &artifacts.v {
        Some(v) => ValueTarget::Learned(v),
        None => ValueTarget::FromPolicy {
            q: &artifacts.q,
            policy: &artifacts.policy,
        },
    };
    let trained_rq = implicit_reward_table(&artifacts.q, &value_target, config.gamma, mdp);
    let reward_gap_sup = if config.regularize_full_space {
        trained_rq.sup_distance(&oracle.rstar)
    } else {
        // Uniqueness only holds where the regularizer applied: the support.
        let mut gap: f64 = 0.0;
        for s in 0..mdp.n_states() {
            for a in 0..mdp.n_actions() {
                if counts.count(s, a) > 0.0 {
                    gap = gap.max((trained_rq[(s, a)] - oracle.rstar[(s, a)]).abs());
                }
            }
        }
        gap
    };
    let max_state_kl = artifacts.policy.max_state_kl(&oracle_policy_result.policy);
    let reward_table = mdp.expert_reward_table();
    let trained_return = evaluate_policy_return(mdp, &artifacts.policy, &reward_table)?;
    let oracle_return = evaluate_policy_return(mdp, &oracle_policy_result.policy, &reward_table)?;
    Ok(GapReport {
        reward_gap_sup,
        max_state_kl,
        return_gap_abs: (trained_return - oracle_return).abs(),
    })
}
