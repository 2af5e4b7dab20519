//! Finite MDPs with exact linear-algebra policy evaluation and exact
//! KL-regularized optimal control.
//!
//! Everything here is deterministic given its inputs; stochastic operations
//! take an explicit seed. Tensors are dense `Vec`s — instances stay at desk
//! scale (at most a few hundred state-action pairs) so exactness beats speed.

use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::util::{sample_categorical, weighted_log_sum_exp};

/// Tolerance for probability rows summing to one.
pub const PROB_TOL: f64 = 1e-12;
/// Sup-norm tolerance for exact solves and fixed points.
pub const SOLVE_TOL: f64 = 1e-10;
/// Iteration cap for value iteration; contraction guarantees convergence
/// long before this unless the config is pathological.
pub const MAX_VI_ITERS: usize = 100_000;

/// Ground-truth tabular environment. The expert reward is hidden from
/// learners; only labelers and evaluation code may read it.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    /// transition[s][a][s'] — each row a probability distribution.
    transition: Vec<Vec<Vec<f64>>>,
    /// expert_reward[s][a].
    expert_reward: Vec<Vec<f64>>,
    discount: f64,
    initial_dist: Vec<f64>,
    metadata: MdpMetadata,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdpMetadata {
    pub generator: String,
    pub seed: u64,
}

/// Serialized form; field names are the on-disk contract.
#[derive(Serialize, Deserialize)]
struct MdpJson {
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    transition: Vec<Vec<Vec<f64>>>,
    expert_reward: Vec<Vec<f64>>,
    initial_dist: Vec<f64>,
    metadata: MdpMetadata,
}

impl TabularMdp {
    pub fn new(
        transition: Vec<Vec<Vec<f64>>>,
        expert_reward: Vec<Vec<f64>>,
        discount: f64,
        initial_dist: Vec<f64>,
        metadata: MdpMetadata,
    ) -> Result<Self> {
        let n_states = transition.len();
        if n_states == 0 {
            return Err(Error::Config("MDP needs at least one state".into()));
        }
        let n_actions = transition[0].len();
        if n_actions == 0 {
            return Err(Error::Config("MDP needs at least one action".into()));
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::Config(format!(
                "discount must satisfy 0 <= gamma < 1, got {discount}"
            )));
        }
        if expert_reward.len() != n_states || initial_dist.len() != n_states {
            return Err(Error::Config("reward/initial_dist shape mismatch".into()));
        }
        for (s, rows) in transition.iter().enumerate() {
            if rows.len() != n_actions || expert_reward[s].len() != n_actions {
                return Err(Error::Config(format!("ragged tensors at state {s}")));
            }
            for (a, row) in rows.iter().enumerate() {
                if row.len() != n_states {
                    return Err(Error::Config(format!("transition[{s}][{a}] has wrong length")));
                }
                check_distribution(row, &format!("transition[{s}][{a}]"))?;
            }
        }
        check_distribution(&initial_dist, "initial_dist")?;
        Ok(Self {
            n_states,
            n_actions,
            transition,
            expert_reward,
            discount,
            initial_dist,
            metadata,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    pub fn metadata(&self) -> &MdpMetadata {
        &self.metadata
    }

    pub fn transition_row(&self, state: usize, action: usize) -> &[f64] {
        &self.transition[state][action]
    }

    pub fn expert_reward(&self, state: usize, action: usize) -> f64 {
        self.expert_reward[state][action]
    }

    /// Copy of the hidden expert reward as a table (for labelers and oracles).
    pub fn expert_reward_table(&self) -> QTable {
        let mut q = QTable::zeros(self.n_states, self.n_actions);
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                q[(s, a)] = self.expert_reward[s][a];
            }
        }
        q
    }

    pub fn to_json_string(&self) -> Result<String> {
        let doc = MdpJson {
            n_states: self.n_states,
            n_actions: self.n_actions,
            gamma: self.discount,
            transition: self.transition.clone(),
            expert_reward: self.expert_reward.clone(),
            initial_dist: self.initial_dist.clone(),
            metadata: self.metadata.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let doc: MdpJson = serde_json::from_str(text)?;
        Self::new(
            doc.transition,
            doc.expert_reward,
            doc.gamma,
            doc.initial_dist,
            doc.metadata,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json_string()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }
}

fn check_distribution(row: &[f64], what: &str) -> Result<()> {
    let mut sum = 0.0;
    for &p in row {
        if !(p >= 0.0) {
            return Err(Error::Config(format!("{what} has negative entry {p}")));
        }
        sum += p;
    }
    if (sum - 1.0).abs() > PROB_TOL {
        return Err(Error::Config(format!("{what} sums to {sum}, expected 1")));
    }
    Ok(())
}

/// Stochastic policy as a dense [state][action] table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy {
    probs: Vec<Vec<f64>>,
}

impl Policy {
    pub fn new(probs: Vec<Vec<f64>>) -> Result<Self> {
        for (s, row) in probs.iter().enumerate() {
            check_distribution(row, &format!("policy row {s}"))?;
        }
        Ok(Self { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        let p = 1.0 / n_actions as f64;
        Self {
            probs: vec![vec![p; n_actions]; n_states],
        }
    }

    /// Deterministic policy choosing `actions[s]` in state s.
    pub fn deterministic(n_actions: usize, actions: &[usize]) -> Self {
        let probs = actions
            .iter()
            .map(|&a| {
                let mut row = vec![0.0; n_actions];
                row[a] = 1.0;
                row
            })
            .collect();
        Self { probs }
    }

    pub fn n_states(&self) -> usize {
        self.probs.len()
    }

    pub fn n_actions(&self) -> usize {
        self.probs[0].len()
    }

    pub fn prob(&self, state: usize, action: usize) -> f64 {
        self.probs[state][action]
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.probs[state]
    }

    /// Greedy action per state (ties go to the lowest index).
    pub fn greedy_actions(&self) -> Vec<usize> {
        self.probs
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap()
            })
            .collect()
    }

    /// max_s KL(self(·|s) || other(·|s)). Infinite if self puts mass where other has none.
    pub fn max_state_kl(&self, other: &Policy) -> f64 {
        let mut worst: f64 = 0.0;
        for s in 0..self.n_states() {
            let mut kl = 0.0;
            for a in 0..self.n_actions() {
                let p = self.probs[s][a];
                if p > 0.0 {
                    kl += p * (p / other.probs[s][a]).ln();
                }
            }
            worst = worst.max(kl);
        }
        worst
    }
}

/// Dense action-value table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
}

impl QTable {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self {
            n_states,
            n_actions,
            values: vec![0.0; n_states * n_actions],
        }
    }

    pub fn from_fn(n_states: usize, n_actions: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut q = Self::zeros(n_states, n_actions);
        for s in 0..n_states {
            for a in 0..n_actions {
                q[(s, a)] = f(s, a);
            }
        }
        q
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn row(&self, state: usize) -> &[f64] {
        &self.values[state * self.n_actions..(state + 1) * self.n_actions]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn sup_distance(&self, other: &QTable) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Index<(usize, usize)> for QTable {
    type Output = f64;
    fn index(&self, (s, a): (usize, usize)) -> &f64 {
        &self.values[s * self.n_actions + a]
    }
}

impl std::ops::IndexMut<(usize, usize)> for QTable {
    fn index_mut(&mut self, (s, a): (usize, usize)) -> &mut f64 {
        &mut self.values[s * self.n_actions + a]
    }
}

/// Dense state-value table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VTable {
    values: Vec<f64>,
}

impl VTable {
    pub fn zeros(n_states: usize) -> Self {
        Self {
            values: vec![0.0; n_states],
        }
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

impl std::ops::Index<usize> for VTable {
    type Output = f64;
    fn index(&self, s: usize) -> &f64 {
        &self.values[s]
    }
}

impl std::ops::IndexMut<usize> for VTable {
    fn index_mut(&mut self, s: usize) -> &mut f64 {
        &mut self.values[s]
    }
}

/// A rollout: `states` has one more entry than `actions`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn transitions(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        (0..self.actions.len()).map(move |t| (self.states[t], self.actions[t], self.states[t + 1]))
    }
}

/// Garnet-style random MDP: transitions are Dirichlet(1) over a random
/// support of `branching_factor` next states, rewards uniform in
/// [-reward_scale, reward_scale], initial distribution uniform.
pub fn make_random_mdp(
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    branching_factor: usize,
    reward_scale: f64,
    seed: u64,
) -> Result<TabularMdp> {
    if n_states < 2 || n_actions < 2 {
        return Err(Error::Config(format!(
            "random MDP needs n_states >= 2 and n_actions >= 2, got {n_states}x{n_actions}"
        )));
    }
    if branching_factor < 1 || branching_factor > n_states {
        return Err(Error::Config(format!(
            "branching_factor must be in [1, {n_states}], got {branching_factor}"
        )));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let mut transition = vec![vec![vec![0.0; n_states]; n_actions]; n_states];
    let mut expert_reward = vec![vec![0.0; n_actions]; n_states];
    for s in 0..n_states {
        for a in 0..n_actions {
            let support = rand::seq::index::sample(&mut rng, n_states, branching_factor);
            // Dirichlet(1) via normalized Exp(1) draws.
            let mut weights = Vec::with_capacity(branching_factor);
            let mut total = 0.0;
            for _ in 0..branching_factor {
                let e = -(1.0 - rng.gen::<f64>()).ln();
                weights.push(e);
                total += e;
            }
            for (i, idx) in support.iter().enumerate() {
                transition[s][a][idx] = weights[i] / total;
            }
            expert_reward[s][a] = rng.gen_range(-reward_scale..=reward_scale);
        }
    }
    let initial = vec![1.0 / n_states as f64; n_states];
    TabularMdp::new(
        transition,
        expert_reward,
        gamma,
        initial,
        MdpMetadata {
            generator: format!("random-{n_states}x{n_actions}-b{branching_factor}"),
            seed,
        },
    )
}

/// Grid actions, in index order.
pub const GRID_ACTIONS: [&str; 4] = ["up", "down", "left", "right"];

/// width x height gridworld with 4 actions. The goal cell is absorbing
/// (self-loop, reward 0 once there); the step that moves into the goal
/// earns +1, every other step from a non-goal cell earns -step_penalty.
/// With probability slip_prob the executed action is replaced by a
/// uniformly random one.
pub fn make_gridworld(
    width: usize,
    height: usize,
    goal_cell: usize,
    step_penalty: f64,
    slip_prob: f64,
    gamma: f64,
    seed: u64,
) -> Result<TabularMdp> {
    let n_states = width * height;
    if width == 0 || height == 0 {
        return Err(Error::Config("grid dimensions must be positive".into()));
    }
    if goal_cell >= n_states {
        return Err(Error::Config(format!(
            "goal_cell {goal_cell} outside {width}x{height} grid"
        )));
    }
    if !(0.0..1.0).contains(&slip_prob) {
        return Err(Error::Config(format!("slip_prob must be in [0,1), got {slip_prob}")));
    }
    let n_actions = 4;
    let intended_move = |cell: usize, action: usize| -> usize {
        let (x, y) = (cell % width, cell / width);
        let (nx, ny) = match action {
            0 => (x, y.saturating_sub(1)),
            1 => (x, (y + 1).min(height - 1)),
            2 => (x.saturating_sub(1), y),
            3 => ((x + 1).min(width - 1), y),
            _ => unreachable!(),
        };
        ny * width + nx
    };
    let mut transition = vec![vec![vec![0.0; n_states]; n_actions]; n_states];
    let mut expert_reward = vec![vec![0.0; n_actions]; n_states];
    for s in 0..n_states {
        for a in 0..n_actions {
            if s == goal_cell {
                transition[s][a][s] = 1.0;
                expert_reward[s][a] = 0.0;
                continue;
            }
            for executed in 0..n_actions {
                let p = if executed == a {
                    1.0 - slip_prob + slip_prob / 4.0
                } else {
                    slip_prob / 4.0
                };
                transition[s][a][intended_move(s, executed)] += p;
            }
            expert_reward[s][a] = if intended_move(s, a) == goal_cell {
                1.0
            } else {
                -step_penalty
            };
        }
    }
    // Start anywhere but the goal.
    let n_start = n_states - 1;
    let initial: Vec<f64> = (0..n_states)
        .map(|s| if s == goal_cell { 0.0 } else { 1.0 / n_start as f64 })
        .collect();
    TabularMdp::new(
        transition,
        expert_reward,
        gamma,
        initial,
        MdpMetadata {
            generator: format!("gridworld-{width}x{height}-goal{goal_cell}"),
            seed,
        },
    )
}

/// State-action transition matrix P^pi of size (|S||A|) x (|S||A|):
/// P[(s,a)][(s',a')] = transition[s][a][s'] * policy[s'][a'].
pub fn policy_transition_matrix(mdp: &TabularMdp, policy: &Policy) -> DMatrix<f64> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    assert_eq!(policy.n_states(), ns, "policy/mdp state count mismatch");
    assert_eq!(policy.n_actions(), na, "policy/mdp action count mismatch");
    let n = ns * na;
    DMatrix::from_fn(n, n, |row, col| {
        let (s, a) = (row / na, row % na);
        let (sp, ap) = (col / na, col % na);
        mdp.transition_row(s, a)[sp] * policy.prob(sp, ap)
    })
}

/// Exact policy evaluation: solve Q = r + gamma P^pi Q by LU factorization.
/// Fails if the verified Bellman residual exceeds the solve tolerance.
pub fn exact_q_evaluation(mdp: &TabularMdp, policy: &Policy, reward: &QTable) -> Result<QTable> {
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let n = ns * na;
    let p = policy_transition_matrix(mdp, policy);
    let system = DMatrix::identity(n, n) - mdp.discount() * &p;
    let r = DVector::from_fn(n, |i, _| reward[(i / na, i % na)]);
    let q_vec = system
        .lu()
        .solve(&r)
        .ok_or_else(|| Error::Numerics("LU solve of (I - gamma P) failed".into()))?;
    let residual = (&r + mdp.discount() * (&p * &q_vec) - &q_vec)
        .iter()
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    if residual > SOLVE_TOL {
        return Err(Error::Numerics(format!(
            "Bellman residual {residual:.3e} exceeds {SOLVE_TOL:.1e}"
        )));
    }
    Ok(QTable::from_fn(ns, na, |s, a| q_vec[s * na + a]))
}

/// KL-regularized optimal control against reference policy `mu`:
///   V(s) = alpha * log E_{a~mu}[exp(Q(s,a)/alpha)],  Q = r + gamma E[V(s')],
/// solved by value iteration to sup-norm residual below `SOLVE_TOL`.
/// The optimal policy is pi*(a|s) proportional to mu(a|s) exp(Q(s,a)/alpha).
pub fn soft_value_iteration(
    mdp: &TabularMdp,
    reward: &QTable,
    alpha: f64,
    mu: &Policy,
) -> Result<(QTable, VTable, Policy)> {
    if alpha <= 0.0 {
        return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
    }
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let soft_v = |q: &QTable, s: usize| -> f64 {
        let scaled: Vec<f64> = q.row(s).iter().map(|x| x / alpha).collect();
        alpha * weighted_log_sum_exp(&scaled, mu.row(s))
    };
    let mut q = QTable::zeros(ns, na);
    let mut converged = false;
    let mut residual = f64::INFINITY;
    for _ in 0..MAX_VI_ITERS {
        let v: Vec<f64> = (0..ns).map(|s| soft_v(&q, s)).collect();
        let next = QTable::from_fn(ns, na, |s, a| {
            let ev: f64 = mdp
                .transition_row(s, a)
                .iter()
                .zip(&v)
                .map(|(p, vs)| p * vs)
                .sum();
            reward[(s, a)] + mdp.discount() * ev
        });
        residual = next.sup_distance(&q);
        q = next;
        if residual < SOLVE_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numerics(format!(
            "soft value iteration did not converge; residual {residual:.3e}"
        )));
    }
    let v = VTable::from_vec((0..ns).map(|s| soft_v(&q, s)).collect());
    let mut probs = vec![vec![0.0; na]; ns];
    for s in 0..ns {
        let row = q.row(s);
        let m = row
            .iter()
            .zip(mu.row(s))
            .filter(|(_, w)| **w > 0.0)
            .map(|(x, _)| *x)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for a in 0..na {
            let w = mu.prob(s, a) * ((row[a] - m) / alpha).exp();
            probs[s][a] = w;
            total += w;
        }
        for p in probs[s].iter_mut() {
            *p /= total;
        }
    }
    Ok((q, v, Policy::new(probs)?))
}

/// Sample a reward-free trajectory of `horizon` steps.
pub fn rollout(mdp: &TabularMdp, policy: &Policy, horizon: usize, seed: u64) -> Trajectory {
    assert!(horizon >= 1, "horizon must be at least 1");
    let mut rng = StdRng::seed_from_u64(seed);
    let mut states = Vec::with_capacity(horizon + 1);
    let mut actions = Vec::with_capacity(horizon);
    let mut s = sample_categorical(mdp.initial_dist(), &mut rng);
    states.push(s);
    for _ in 0..horizon {
        let a = sample_categorical(policy.row(s), &mut rng);
        let sp = sample_categorical(mdp.transition_row(s, a), &mut rng);
        actions.push(a);
        states.push(sp);
        s = sp;
    }
    Trajectory { states, actions }
}

/// Exact expected discounted return of `policy` under `reward`,
/// averaged over the initial distribution. No sampling.
pub fn evaluate_policy_return(mdp: &TabularMdp, policy: &Policy, reward: &QTable) -> Result<f64> {
    let q = exact_q_evaluation(mdp, policy, reward)?;
    let mut total = 0.0;
    for s in 0..mdp.n_states() {
        let v: f64 = (0..mdp.n_actions()).map(|a| policy.prob(s, a) * q[(s, a)]).sum();
        total += mdp.initial_dist()[s] * v;
    }
    Ok(total)
}

/// Exact KL-regularized value of `policy`:
///   V = E_pi[r - alpha log(pi/mu) + gamma V(s')],
/// solved as a linear system. Used to check monotone policy improvement.
pub fn evaluate_soft_policy_value(
    mdp: &TabularMdp,
    policy: &Policy,
    reward: &QTable,
    alpha: f64,
    mu: &Policy,
) -> Result<f64> {
    let ns = mdp.n_states();
    let mut c = DVector::zeros(ns);
    let mut p_pi = DMatrix::zeros(ns, ns);
    for s in 0..ns {
        for a in 0..mdp.n_actions() {
            let pi = policy.prob(s, a);
            if pi == 0.0 {
                continue;
            }
            let mu_sa = mu.prob(s, a);
            if mu_sa == 0.0 {
                return Err(Error::Evaluation(format!(
                    "policy puts mass on action {a} in state {s} where mu is zero"
                )));
            }
            c[s] += pi * (reward[(s, a)] - alpha * (pi / mu_sa).ln());
            for (sp, t) in mdp.transition_row(s, a).iter().enumerate() {
                p_pi[(s, sp)] += pi * t;
            }
        }
    }
    let system = DMatrix::identity(ns, ns) - mdp.discount() * p_pi;
    let v = system
        .lu()
        .solve(&c)
        .ok_or_else(|| Error::Numerics("soft value solve failed".into()))?;
    Ok(mdp
        .initial_dist()
        .iter()
        .enumerate()
        .map(|(s, p)| p * v[s])
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain_2() -> TabularMdp {
        // Two states; action 0 stays, action 1 moves to the other state.
        let transition = vec![
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![vec![0.0, 1.0], vec![1.0, 0.0]],
        ];
        let reward = vec![vec![0.0, 1.0], vec![0.5, 0.0]];
        TabularMdp::new(
            transition,
            reward,
            0.9,
            vec![0.5, 0.5],
            MdpMetadata {
                generator: "chain-2".into(),
                seed: 0,
            },
        )
        .unwrap()
    }

    #[test]
    fn random_mdp_rows_are_stochastic() {
        let mdp = make_random_mdp(2, 2, 0.9, 2, 1.0, 0).unwrap();
        for s in 0..2 {
            for a in 0..2 {
                let sum: f64 = mdp.transition_row(s, a).iter().sum();
                assert!((sum - 1.0).abs() <= PROB_TOL);
            }
        }
    }

    #[test]
    fn random_mdp_is_deterministic_under_seed() {
        let a = make_random_mdp(5, 3, 0.99, 5, 1.0, 7).unwrap();
        let b = make_random_mdp(5, 3, 0.99, 5, 1.0, 7).unwrap();
        assert_eq!(a, b);
        let c = make_random_mdp(5, 3, 0.99, 5, 1.0, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn random_mdp_rejects_bad_sizes() {
        assert!(make_random_mdp(1, 2, 0.9, 1, 1.0, 0).is_err());
        assert!(make_random_mdp(3, 2, 0.9, 4, 1.0, 0).is_err());
    }

    #[test]
    fn gridworld_deterministic_rows_are_one_hot() {
        let mdp = make_gridworld(3, 3, 8, 0.0, 0.0, 0.9, 0).unwrap();
        for s in 0..9 {
            for a in 0..4 {
                let row = mdp.transition_row(s, a);
                assert_eq!(row.iter().filter(|p| **p == 1.0).count(), 1);
                assert_eq!(row.iter().filter(|p| **p == 0.0).count(), 8);
            }
        }
    }

    #[test]
    fn gridworld_rejects_out_of_range_goal() {
        assert!(make_gridworld(3, 3, 9, 0.0, 0.0, 0.9, 0).is_err());
    }

    #[test]
    fn gridworld_shortest_path_return_matches_distance_formula() {
        // 3x3, goal at top-left corner, deterministic moves, no step penalty.
        let gamma = 0.9;
        let mdp = make_gridworld(3, 3, 0, 0.0, 0.0, gamma, 0).unwrap();
        // Shortest-path policy: move left if possible else up.
        let actions: Vec<usize> = (0..9).map(|s| if s % 3 > 0 { 2 } else { 0 }).collect();
        let policy = Policy::deterministic(4, &actions);
        let q = exact_q_evaluation(&mdp, &policy, &mdp.expert_reward_table()).unwrap();
        for s in 0..9 {
            let d = (s % 3) + (s / 3);
            let v: f64 = (0..4).map(|a| policy.prob(s, a) * q[(s, a)]).sum();
            let expected = if d == 0 { 0.0 } else { gamma.powi(d as i32 - 1) };
            assert!(
                (v - expected).abs() < 1e-10,
                "cell {s} distance {d}: got {v}, expected {expected}"
            );
        }
    }

    #[test]
    fn one_by_two_grid_optimal_action_is_right() {
        let mdp = make_gridworld(2, 1, 1, 0.0, 0.0, 0.3, 0).unwrap();
        let (q, _, policy) =
            soft_value_iteration(&mdp, &mdp.expert_reward_table(), 0.1, &Policy::uniform(2, 4)).unwrap();
        // From the left cell, "right" (action 3) dominates.
        assert!(q[(0, 3)] > q[(0, 0)]);
        assert!(policy.prob(0, 3) > 0.99);
    }

    #[test]
    fn transition_matrix_rows_sum_to_one_and_match_loops() {
        let mdp = make_random_mdp(3, 2, 0.9, 3, 1.0, 11).unwrap();
        let policy = Policy::uniform(3, 2);
        let p = policy_transition_matrix(&mdp, &policy);
        for row in 0..6 {
            let sum: f64 = (0..6).map(|c| p[(row, c)]).sum();
            assert!((sum - 1.0).abs() <= PROB_TOL);
        }
        // Independent double-loop computation.
        for s in 0..3 {
            for a in 0..2 {
                for sp in 0..3 {
                    for ap in 0..2 {
                        let direct = mdp.transition_row(s, a)[sp] * policy.prob(sp, ap);
                        assert_eq!(p[(s * 2 + a, sp * 2 + ap)], direct);
                    }
                }
            }
        }
    }

    #[test]
    fn q_evaluation_gamma_zero_returns_reward() {
        let transition = vec![
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![vec![0.0, 1.0], vec![1.0, 0.0]],
        ];
        let mdp = TabularMdp::new(
            transition,
            vec![vec![0.3, -0.7], vec![0.1, 0.0]],
            0.0,
            vec![0.5, 0.5],
            MdpMetadata {
                generator: "test".into(),
                seed: 0,
            },
        )
        .unwrap();
        let q = exact_q_evaluation(&mdp, &Policy::uniform(2, 2), &mdp.expert_reward_table()).unwrap();
        assert_eq!(q[(0, 0)], 0.3);
        assert_eq!(q[(0, 1)], -0.7);
    }

    #[test]
    fn q_evaluation_constant_reward_is_geometric_series() {
        let mdp = chain_2();
        let c = 0.25;
        let reward = QTable::from_fn(2, 2, |_, _| c);
        let q = exact_q_evaluation(&mdp, &Policy::uniform(2, 2), &reward).unwrap();
        for s in 0..2 {
            for a in 0..2 {
                assert!((q[(s, a)] - c / (1.0 - 0.9)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn q_evaluation_matches_iterative_policy_evaluation() {
        let mdp = make_random_mdp(4, 2, 0.9, 3, 1.0, 5).unwrap();
        let policy = Policy::uniform(4, 2);
        let reward = mdp.expert_reward_table();
        let q = exact_q_evaluation(&mdp, &policy, &reward).unwrap();
        // Fixed-point iteration oracle.
        let mut iter_q = QTable::zeros(4, 2);
        for _ in 0..10_000 {
            iter_q = QTable::from_fn(4, 2, |s, a| {
                let mut ev = 0.0;
                for (sp, p) in mdp.transition_row(s, a).iter().enumerate() {
                    for ap in 0..2 {
                        ev += p * policy.prob(sp, ap) * iter_q[(sp, ap)];
                    }
                }
                reward[(s, a)] + 0.9 * ev
            });
        }
        assert!(q.sup_distance(&iter_q) < 1e-8);
    }

    #[test]
    fn soft_vi_bandit_closed_form() {
        // Single effective state via gamma = 0; two actions with r = (0, alpha*ln 2).
        let alpha = 0.7;
        let transition = vec![vec![vec![1.0, 0.0], vec![1.0, 0.0]], vec![
            vec![1.0, 0.0],
            vec![1.0, 0.0],
        ]];
        let mdp = TabularMdp::new(
            transition,
            vec![vec![0.0, alpha * 2.0_f64.ln()], vec![0.0, 0.0]],
            0.0,
            vec![1.0, 0.0],
            MdpMetadata {
                generator: "bandit".into(),
                seed: 0,
            },
        )
        .unwrap();
        let (_, _, policy) =
            soft_value_iteration(&mdp, &mdp.expert_reward_table(), alpha, &Policy::uniform(2, 2)).unwrap();
        assert!((policy.prob(0, 0) - 1.0 / 3.0).abs() < 1e-10);
        assert!((policy.prob(0, 1) - 2.0 / 3.0).abs() < 1e-10);
    }

    #[test]
    fn soft_vi_zero_reward_recovers_mu() {
        let mdp = chain_2();
        let mu = Policy::new(vec![vec![0.3, 0.7], vec![0.6, 0.4]]).unwrap();
        let (_, _, policy) =
            soft_value_iteration(&mdp, &QTable::zeros(2, 2), 5.0, &mu).unwrap();
        for s in 0..2 {
            for a in 0..2 {
                assert!((policy.prob(s, a) - mu.prob(s, a)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn soft_vi_policy_matches_closed_form_per_state() {
        // KL between returned policy and mu(a|s) e^{Q/alpha} normalization <= 1e-10.
        let mdp = make_random_mdp(4, 3, 0.95, 3, 1.0, 2).unwrap();
        let alpha = 0.5;
        let mu = Policy::uniform(4, 3);
        let (q, _, policy) = soft_value_iteration(&mdp, &mdp.expert_reward_table(), alpha, &mu).unwrap();
        for s in 0..4 {
            let m = q.row(s).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = (0..3)
                .map(|a| mu.prob(s, a) * ((q[(s, a)] - m) / alpha).exp())
                .collect();
            let total: f64 = weights.iter().sum();
            let mut kl = 0.0;
            for a in 0..3 {
                let p = policy.prob(s, a);
                kl += p * (p / (weights[a] / total)).ln();
            }
            assert!(kl.abs() <= 1e-10);
        }
    }

    #[test]
    fn rollout_follows_deterministic_dynamics() {
        let mdp = chain_2();
        // Always action 1: flip between states each step.
        let policy = Policy::deterministic(2, &[1, 1]);
        let t = rollout(&mdp, &policy, 5, 0);
        for i in 0..5 {
            assert_eq!(t.states[i + 1], 1 - t.states[i]);
            assert_eq!(t.actions[i], 1);
        }
    }

    #[test]
    fn rollout_is_deterministic_under_seed() {
        let mdp = make_random_mdp(4, 2, 0.9, 3, 1.0, 1).unwrap();
        let policy = Policy::uniform(4, 2);
        assert_eq!(rollout(&mdp, &policy, 50, 9), rollout(&mdp, &policy, 50, 9));
    }

    #[test]
    fn rollout_frequencies_match_stationary_distribution() {
        // 2-state chain under a stochastic policy; stationary dist from the
        // state transition matrix eigenvector.
        let mdp = chain_2();
        let policy = Policy::new(vec![vec![0.4, 0.6], vec![0.7, 0.3]]).unwrap();
        // State-level chain: P(s'|s) = sum_a pi(a|s) T(s,a,s').
        let p01 = 0.6; // from state 0, action 1 moves
        let p10 = 0.3;
        // pi_0 * p01 = pi_1 * p10.
        let stat0 = p10 / (p01 + p10);
        let t = rollout(&mdp, &policy, 10_000, 123);
        let count0 = t.states.iter().filter(|s| **s == 0).count() as f64;
        let freq0 = count0 / t.states.len() as f64;
        assert!((freq0 - stat0).abs() < 0.02, "freq {freq0} vs stationary {stat0}");
    }

    #[test]
    fn policy_return_constant_rewards() {
        let mdp = chain_2();
        let policy = Policy::uniform(2, 2);
        let zero = evaluate_policy_return(&mdp, &policy, &QTable::zeros(2, 2)).unwrap();
        assert_eq!(zero, 0.0);
        let one = evaluate_policy_return(&mdp, &policy, &QTable::from_fn(2, 2, |_, _| 1.0)).unwrap();
        assert!((one - 1.0 / (1.0 - 0.9)).abs() < 1e-10);
    }

    #[test]
    fn policy_return_matches_monte_carlo() {
        let mdp = make_random_mdp(3, 2, 0.9, 2, 1.0, 42).unwrap();
        let policy = Policy::new(vec![vec![0.2, 0.8], vec![0.5, 0.5], vec![0.9, 0.1]]).unwrap();
        let reward = mdp.expert_reward_table();
        let exact = evaluate_policy_return(&mdp, &policy, &reward).unwrap();
        let n = 100_000;
        let horizon = 300; // gamma^300 ~ 2e-14
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for i in 0..n {
            let t = rollout(&mdp, &policy, horizon, 1_000_000 + i);
            let mut ret = 0.0;
            let mut w = 1.0;
            for (s, a, _) in t.transitions() {
                ret += w * reward[(s, a)];
                w *= 0.9;
            }
            sum += ret;
            sum_sq += ret * ret;
        }
        let mean = sum / n as f64;
        let var = (sum_sq / n as f64 - mean * mean).max(0.0);
        let se = (var / n as f64).sqrt();
        assert!(
            (exact - mean).abs() <= 3.0 * se,
            "exact {exact} vs MC {mean} +- {se}"
        );
    }

    #[test]
    fn mdp_json_round_trip_is_value_exact() {
        let mdp = make_random_mdp(5, 3, 0.99, 5, 1.0, 7).unwrap();
        let text = mdp.to_json_string().unwrap();
        let back = TabularMdp::from_json_str(&text).unwrap();
        assert_eq!(mdp, back);
    }

    #[test]
    fn soft_policy_value_matches_plain_return_at_mu() {
        // At pi = mu the KL penalty vanishes.
        let mdp = chain_2();
        let mu = Policy::uniform(2, 2);
        let soft = evaluate_soft_policy_value(&mdp, &mu, &mdp.expert_reward_table(), 1.0, &mu).unwrap();
        let plain = evaluate_policy_return(&mdp, &mu, &mdp.expert_reward_table()).unwrap();
        assert!((soft - plain).abs() < 1e-10);
    }
}
