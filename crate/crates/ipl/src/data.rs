//! Behavior segments, scripted preference/ranking labeling, subsampling
//! augmentation, and JSON-lines dataset persistence.
//!
//! Labelers take explicit RNG state and never touch global randomness, so
//! dataset generation is reproducible bit-for-bit under a fixed seed.

use rand::rngs::StdRng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::mdp::{QTable, Trajectory};
use crate::util::logistic;

/// Whether per-step returns inside a segment are discounted.
///
/// The undiscounted form is the default for preference models; the
/// discounted form weights step t by gamma^t. Labelers and trainers must be
/// configured with the same variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum SegmentDiscount {
    Off,
    On { gamma: f64 },
}

impl SegmentDiscount {
    pub fn weight(&self, t: usize) -> f64 {
        match self {
            SegmentDiscount::Off => 1.0,
            SegmentDiscount::On { gamma } => gamma.powi(t as i32),
        }
    }
}

/// A length-k snippet of a trajectory: k+1 states and k actions.
///
/// `source_trajectory` and `start_index` are provenance bookkeeping; they are
/// not persisted and do not participate in equality.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Segment {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
    #[serde(skip)]
    pub source_trajectory: usize,
    #[serde(skip)]
    pub start_index: usize,
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.states == other.states && self.actions == other.actions
    }
}

impl Segment {
    pub fn new(states: Vec<usize>, actions: Vec<usize>) -> Result<Self> {
        if states.len() != actions.len() + 1 {
            return Err(Error::Config(format!(
                "segment needs len(states) = len(actions) + 1, got {} and {}",
                states.len(),
                actions.len()
            )));
        }
        Ok(Self {
            states,
            actions,
            source_trajectory: 0,
            start_index: 0,
        })
    }

    /// Number of steps (k).
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// (s_t, a_t, s_{t+1}) triples.
    pub fn transitions(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        (0..self.actions.len()).map(move |t| (self.states[t], self.actions[t], self.states[t + 1]))
    }

    /// Sub-segment of `len` steps starting at `start`.
    pub fn slice(&self, start: usize, len: usize) -> Segment {
        Segment {
            states: self.states[start..start + len + 1].to_vec(),
            actions: self.actions[start..start + len].to_vec(),
            source_trajectory: self.source_trajectory,
            start_index: self.start_index + start,
        }
    }

    pub fn validate_ids(&self, n_states: usize, n_actions: usize) -> Result<()> {
        if self.states.iter().any(|s| *s >= n_states) || self.actions.iter().any(|a| *a >= n_actions) {
            return Err(Error::Config("segment references out-of-range ids".into()));
        }
        Ok(())
    }
}

/// Two equal-length segments and a label y in [0,1]; y = 1 means the first
/// segment is preferred. Fractional labels encode soft preferences or ties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub first: Segment,
    pub second: Segment,
    pub label: f64,
}

impl PreferencePair {
    pub fn new(first: Segment, second: Segment, label: f64) -> Result<Self> {
        if first.len() != second.len() {
            return Err(Error::Config(format!(
                "preference pair segments must have equal length, got {} and {}",
                first.len(),
                second.len()
            )));
        }
        if !(0.0..=1.0).contains(&label) {
            return Err(Error::Config(format!("label must be in [0,1], got {label}")));
        }
        Ok(Self { first, second, label })
    }

    pub fn k(&self) -> usize {
        self.first.len()
    }
}

/// K segments and a permutation ordering them from most to least preferred.
/// The permutation stores 0-based indices into `segments`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingQuery {
    pub segments: Vec<Segment>,
    pub permutation: Vec<usize>,
}

impl RankingQuery {
    pub fn new(segments: Vec<Segment>, permutation: Vec<usize>) -> Result<Self> {
        let n = segments.len();
        let mut seen = vec![false; n];
        if permutation.len() != n {
            return Err(Error::Config("permutation length mismatch".into()));
        }
        for &i in &permutation {
            if i >= n || seen[i] {
                return Err(Error::Config("permutation is not a bijection".into()));
            }
            seen[i] = true;
        }
        if n > 0 {
            let k = segments[0].len();
            if segments.iter().any(|s| s.len() != k) {
                return Err(Error::Config("ranked segments must share a length".into()));
            }
        }
        Ok(Self { segments, permutation })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: usize,
    pub action: usize,
    pub next_state: usize,
}

/// Reward-free offline transitions with a provenance tag for the behavior
/// policy that generated them.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionDataset {
    pub transitions: Vec<Transition>,
    pub behavior_policy_id: String,
}

impl TransitionDataset {
    pub fn from_trajectories(trajectories: &[Trajectory], behavior_policy_id: &str) -> Self {
        let transitions = trajectories
            .iter()
            .flat_map(|t| t.transitions())
            .map(|(state, action, next_state)| Transition {
                state,
                action,
                next_state,
            })
            .collect();
        Self {
            transitions,
            behavior_policy_id: behavior_policy_id.to_string(),
        }
    }

    /// Offline data taken from the preference pairs themselves
    /// (D_o = transitions appearing inside D_p).
    pub fn from_pairs(pairs: &[PreferencePair]) -> Self {
        let mut transitions = Vec::new();
        for pair in pairs {
            for seg in [&pair.first, &pair.second] {
                for (state, action, next_state) in seg.transitions() {
                    transitions.push(Transition {
                        state,
                        action,
                        next_state,
                    });
                }
            }
        }
        Self {
            transitions,
            behavior_policy_id: "pairs".to_string(),
        }
    }

    /// One transition per (s,a) cell, next states sampled from the dynamics.
    /// Gives exhaustive, uniformly-counted coverage for tabular experiments.
    pub fn full_support(mdp: &crate::mdp::TabularMdp, seed: u64) -> Self {
        use rand::SeedableRng;
        let mut rng = StdRng::seed_from_u64(seed);
        let mut transitions = Vec::new();
        for state in 0..mdp.n_states() {
            for action in 0..mdp.n_actions() {
                let next_state = crate::util::sample_categorical(mdp.transition_row(state, action), &mut rng);
                transitions.push(Transition {
                    state,
                    action,
                    next_state,
                });
            }
        }
        Self {
            transitions,
            behavior_policy_id: "full-support".to_string(),
        }
    }

    pub fn validate_ids(&self, n_states: usize, n_actions: usize) -> Result<()> {
        for t in &self.transitions {
            if t.state >= n_states || t.next_state >= n_states || t.action >= n_actions {
                return Err(Error::Config("transition references out-of-range ids".into()));
            }
        }
        Ok(())
    }
}

/// Everything a JSON-lines dataset file can hold.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub pairs: Vec<PreferencePair>,
    pub rankings: Vec<RankingQuery>,
    pub transitions: Vec<Transition>,
}

/// How `label_pair` turns segment returns into a label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    /// y ~ Bernoulli(bradley_terry_prob).
    Bernoulli,
    /// y = 1 iff R1 > R2; ties labeled 0.5.
    Argmax,
    /// y = bradley_terry_prob exactly.
    Soft,
}

/// Draw n segments of length k with uniformly random (trajectory, start)
/// positions among all valid placements. Trajectories shorter than k are
/// skipped; it is an error if none qualifies.
pub fn sample_segments(
    trajectories: &[Trajectory],
    k: usize,
    n: usize,
    rng: &mut StdRng,
) -> Result<Vec<Segment>> {
    if k == 0 {
        return Err(Error::Config("segment length k must be at least 1".into()));
    }
    // Valid (trajectory, start) placements, weighted by count.
    let mut placements: Vec<(usize, usize)> = Vec::new(); // (traj index, n_starts)
    let mut total = 0usize;
    for (i, t) in trajectories.iter().enumerate() {
        if t.len() >= k {
            let starts = t.len() - k + 1;
            placements.push((i, starts));
            total += starts;
        }
    }
    if total == 0 {
        return Err(Error::Config(format!(
            "segment length {k} exceeds every trajectory length"
        )));
    }
    let mut segments = Vec::with_capacity(n);
    for _ in 0..n {
        let mut pick = rng.gen_range(0..total);
        let mut chosen = placements[0].0;
        let mut start = 0;
        for &(ti, starts) in &placements {
            if pick < starts {
                chosen = ti;
                start = pick;
                break;
            }
            pick -= starts;
        }
        let t = &trajectories[chosen];
        let mut seg = Segment::new(
            t.states[start..start + k + 1].to_vec(),
            t.actions[start..start + k].to_vec(),
        )?;
        seg.source_trajectory = chosen;
        seg.start_index = start;
        segments.push(seg);
    }
    Ok(segments)
}

/// Sum of per-step rewards along the segment, optionally gamma^t weighted.
pub fn segment_return(segment: &Segment, reward: &QTable, discount: SegmentDiscount) -> f64 {
    segment
        .actions
        .iter()
        .enumerate()
        .map(|(t, &a)| discount.weight(t) * reward[(segment.states[t], a)])
        .sum()
}

/// P[first preferred] = exp(R1) / (exp(R1) + exp(R2)), computed as
/// logistic(R1 - R2) for stability.
pub fn bradley_terry_prob(return1: f64, return2: f64) -> f64 {
    logistic(return1 - return2)
}

/// Label a pair of segments using the hidden reward.
pub fn label_pair(
    first: Segment,
    second: Segment,
    reward: &QTable,
    mode: LabelMode,
    discount: SegmentDiscount,
    rng: &mut StdRng,
) -> Result<PreferencePair> {
    let r1 = segment_return(&first, reward, discount);
    let r2 = segment_return(&second, reward, discount);
    let label = match mode {
        LabelMode::Bernoulli => {
            let p = bradley_terry_prob(r1, r2);
            if rng.gen::<f64>() < p {
                1.0
            } else {
                0.0
            }
        }
        LabelMode::Argmax => {
            if r1 > r2 {
                1.0
            } else if r2 > r1 {
                0.0
            } else {
                0.5
            }
        }
        LabelMode::Soft => bradley_terry_prob(r1, r2),
    };
    PreferencePair::new(first, second, label)
}

/// Sample a Plackett-Luce ranking: at each stage pick among the remaining
/// segments with probability proportional to exp(return).
pub fn label_ranking(
    segments: Vec<Segment>,
    reward: &QTable,
    discount: SegmentDiscount,
    rng: &mut StdRng,
) -> Result<RankingQuery> {
    if segments.len() < 2 {
        return Err(Error::Config("rankings need at least two segments".into()));
    }
    let returns: Vec<f64> = segments
        .iter()
        .map(|s| segment_return(s, reward, discount))
        .collect();
    let mut remaining: Vec<usize> = (0..segments.len()).collect();
    let mut permutation = Vec::with_capacity(segments.len());
    while !remaining.is_empty() {
        let m = remaining
            .iter()
            .map(|&i| returns[i])
            .fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = remaining.iter().map(|&i| (returns[i] - m).exp()).collect();
        let pick = crate::util::sample_categorical(&weights, rng);
        permutation.push(remaining.remove(pick));
    }
    RankingQuery::new(segments, permutation)
}

/// Noiseless ranking: segments sorted by return, best first (ties keep
/// index order).
pub fn label_ranking_argmax(
    segments: Vec<Segment>,
    reward: &QTable,
    discount: SegmentDiscount,
) -> Result<RankingQuery> {
    if segments.len() < 2 {
        return Err(Error::Config("rankings need at least two segments".into()));
    }
    let returns: Vec<f64> = segments
        .iter()
        .map(|s| segment_return(s, reward, discount))
        .collect();
    let mut permutation: Vec<usize> = (0..segments.len()).collect();
    permutation.sort_by(|&a, &b| returns[b].partial_cmp(&returns[a]).unwrap().then(a.cmp(&b)));
    RankingQuery::new(segments, permutation)
}

/// Truncate every pair in the batch to `s` steps at one shared start offset
/// drawn uniformly from {0, ..., k - s}. Labels are unchanged.
pub fn subsample_batch(
    pairs: &[PreferencePair],
    s: usize,
    rng: &mut StdRng,
) -> Result<Vec<PreferencePair>> {
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let k = pairs[0].k();
    if pairs.iter().any(|p| p.k() != k) {
        return Err(Error::Config("subsample_batch requires a uniform segment length".into()));
    }
    if s == 0 || s > k {
        return Err(Error::Config(format!(
            "subsample length must satisfy 1 <= s <= k, got s={s}, k={k}"
        )));
    }
    if s == k {
        return Ok(pairs.to_vec());
    }
    let start = rng.gen_range(0..=k - s);
    pairs
        .iter()
        .map(|p| {
            PreferencePair::new(p.first.slice(start, s), p.second.slice(start, s), p.label)
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Record {
    Pair {
        k: usize,
        seg1: SegmentJson,
        seg2: SegmentJson,
        y: f64,
    },
    Ranking {
        segments: Vec<SegmentJson>,
        perm: Vec<usize>,
    },
    Transition {
        s: usize,
        a: usize,
        sp: usize,
    },
}

#[derive(Serialize, Deserialize)]
struct SegmentJson {
    states: Vec<usize>,
    actions: Vec<usize>,
}

impl From<&Segment> for SegmentJson {
    fn from(seg: &Segment) -> Self {
        SegmentJson {
            states: seg.states.clone(),
            actions: seg.actions.clone(),
        }
    }
}

impl SegmentJson {
    fn into_segment(self) -> Result<Segment> {
        Segment::new(self.states, self.actions)
    }
}

/// Write a dataset as JSON lines: one record per pair, ranking, and
/// transition, in that order.
pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for pair in &dataset.pairs {
        let record = Record::Pair {
            k: pair.k(),
            seg1: (&pair.first).into(),
            seg2: (&pair.second).into(),
            y: pair.label,
        };
        writeln!(out, "{}", serde_json::to_string(&record)?)?;
    }
    for ranking in &dataset.rankings {
        let record = Record::Ranking {
            segments: ranking.segments.iter().map(SegmentJson::from).collect(),
            perm: ranking.permutation.clone(),
        };
        writeln!(out, "{}", serde_json::to_string(&record)?)?;
    }
    for t in &dataset.transitions {
        let record = Record::Transition {
            s: t.state,
            a: t.action,
            sp: t.next_state,
        };
        writeln!(out, "{}", serde_json::to_string(&record)?)?;
    }
    out.flush()?;
    Ok(())
}

/// Load a JSON-lines dataset; malformed lines report their line number.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut dataset = Dataset::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        match record {
            Record::Pair { k, seg1, seg2, y } => {
                let first = seg1.into_segment()?;
                if first.len() != k {
                    return Err(Error::Parse {
                        line: idx + 1,
                        message: format!("declared k={k} but segment has {} steps", first.len()),
                    });
                }
                dataset.pairs.push(PreferencePair::new(first, seg2.into_segment()?, y)?);
            }
            Record::Ranking { segments, perm } => {
                let segments = segments
                    .into_iter()
                    .map(SegmentJson::into_segment)
                    .collect::<Result<Vec<_>>>()?;
                dataset.rankings.push(RankingQuery::new(segments, perm)?);
            }
            Record::Transition { s, a, sp } => dataset.transitions.push(Transition {
                state: s,
                action: a,
                next_state: sp,
            }),
        }
    }
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{make_random_mdp, rollout, Policy};
    use rand::SeedableRng;

    fn seg(states: &[usize], actions: &[usize]) -> Segment {
        Segment::new(states.to_vec(), actions.to_vec()).unwrap()
    }

    #[test]
    fn exact_length_trajectory_yields_single_segment() {
        let t = Trajectory {
            states: vec![0, 1, 2],
            actions: vec![1, 0],
        };
        let mut rng = StdRng::seed_from_u64(0);
        let segs = sample_segments(&[t.clone()], 2, 8, &mut rng).unwrap();
        assert_eq!(segs.len(), 8);
        for s in segs {
            assert_eq!(s.states, t.states);
            assert_eq!(s.actions, t.actions);
        }
    }

    #[test]
    fn k1_segments_are_single_transitions() {
        let t = Trajectory {
            states: vec![0, 1, 0, 1],
            actions: vec![1, 1, 1],
        };
        let mut rng = StdRng::seed_from_u64(0);
        for s in sample_segments(&[t], 1, 20, &mut rng).unwrap() {
            assert_eq!(s.len(), 1);
            assert_eq!(s.states.len(), 2);
        }
    }

    #[test]
    fn sampling_balances_equal_length_trajectories() {
        let t0 = Trajectory {
            states: vec![0; 21],
            actions: vec![0; 20],
        };
        let t1 = Trajectory {
            states: vec![1; 21],
            actions: vec![0; 20],
        };
        let mut rng = StdRng::seed_from_u64(7);
        let segs = sample_segments(&[t0, t1], 5, 10_000, &mut rng).unwrap();
        let n0 = segs.iter().filter(|s| s.states[0] == 0).count() as f64;
        // binomial(10k, 0.5): 3 sigma = 3 * sqrt(10000 * 0.25) = 150.
        assert!((n0 - 5000.0).abs() < 150.0, "count {n0}");
    }

    #[test]
    fn sample_segments_rejects_oversized_k() {
        let t = Trajectory {
            states: vec![0, 1],
            actions: vec![0],
        };
        let mut rng = StdRng::seed_from_u64(0);
        assert!(sample_segments(&[t], 2, 1, &mut rng).is_err());
    }

    #[test]
    fn segment_return_basics() {
        let reward = QTable::from_fn(2, 2, |_, _| 1.0);
        let s = seg(&[0, 1, 0, 1], &[0, 1, 0]);
        assert_eq!(segment_return(&s, &QTable::zeros(2, 2), SegmentDiscount::Off), 0.0);
        assert_eq!(segment_return(&s, &reward, SegmentDiscount::Off), 3.0);
        let d = segment_return(&s, &reward, SegmentDiscount::On { gamma: 0.9 });
        assert!((d - 2.71).abs() < 1e-12);
    }

    #[test]
    fn bradley_terry_matches_logistic() {
        assert_eq!(bradley_terry_prob(3.0, 3.0), 0.5);
        assert!((bradley_terry_prob(1.0, 0.0) - 0.7310585786300049).abs() < 1e-12);
        // Shift by a constant: difference of returns is unchanged bit-for-bit
        // on exactly-representable inputs.
        assert_eq!(bradley_terry_prob(2.0, 1.0), bradley_terry_prob(102.0, 101.0));
    }

    #[test]
    fn bt_symmetry_sums_to_one() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..200 {
            let a = rng.gen_range(-50.0..50.0);
            let b = rng.gen_range(-50.0..50.0);
            assert!((bradley_terry_prob(a, b) + bradley_terry_prob(b, a) - 1.0).abs() <= 1e-15);
        }
    }

    #[test]
    fn argmax_labels() {
        let reward = QTable::from_fn(2, 2, |s, a| (s + a) as f64);
        let mut rng = StdRng::seed_from_u64(0);
        let hi = seg(&[1, 1], &[1]);
        let lo = seg(&[0, 0], &[0]);
        let p = label_pair(hi.clone(), lo.clone(), &reward, LabelMode::Argmax, SegmentDiscount::Off, &mut rng)
            .unwrap();
        assert_eq!(p.label, 1.0);
        let tie = label_pair(hi.clone(), hi, &reward, LabelMode::Argmax, SegmentDiscount::Off, &mut rng)
            .unwrap();
        assert_eq!(tie.label, 0.5);
    }

    #[test]
    fn bernoulli_labels_concentrate_at_logistic() {
        let reward = QTable::from_fn(2, 2, |s, _| s as f64);
        let hi = seg(&[1, 1], &[0]);
        let lo = seg(&[0, 0], &[0]);
        let mut rng = StdRng::seed_from_u64(3);
        let n = 10_000;
        let mut sum = 0.0;
        for _ in 0..n {
            sum += label_pair(hi.clone(), lo.clone(), &reward, LabelMode::Bernoulli, SegmentDiscount::Off, &mut rng)
                .unwrap()
                .label;
        }
        let p = 0.7310585786300049;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((sum / n as f64 - p).abs() < 3.0 * sigma);
    }

    #[test]
    fn labels_invariant_to_reward_shift() {
        // Integer-valued rewards keep all float arithmetic exact.
        let base = QTable::from_fn(3, 2, |s, a| (2 * s) as f64 - a as f64);
        let shifted = QTable::from_fn(3, 2, |s, a| base[(s, a)] + 3.0);
        let s1 = seg(&[0, 1, 2], &[0, 1]);
        let s2 = seg(&[2, 1, 0], &[1, 0]);
        for mode in [LabelMode::Argmax, LabelMode::Soft] {
            let mut rng_a = StdRng::seed_from_u64(9);
            let mut rng_b = StdRng::seed_from_u64(9);
            let a = label_pair(s1.clone(), s2.clone(), &base, mode, SegmentDiscount::Off, &mut rng_a).unwrap();
            let b = label_pair(s1.clone(), s2.clone(), &shifted, mode, SegmentDiscount::Off, &mut rng_b).unwrap();
            assert_eq!(a.label, b.label);
        }
    }

    #[test]
    fn two_way_ranking_reduces_to_bradley_terry() {
        let reward = QTable::from_fn(2, 2, |s, _| s as f64);
        let hi = seg(&[1, 1], &[0]);
        let lo = seg(&[0, 0], &[0]);
        let mut rng = StdRng::seed_from_u64(17);
        let n = 10_000;
        let mut hi_first = 0usize;
        for _ in 0..n {
            let r = label_ranking(vec![hi.clone(), lo.clone()], &reward, SegmentDiscount::Off, &mut rng)
                .unwrap();
            if r.permutation[0] == 0 {
                hi_first += 1;
            }
        }
        let p = bradley_terry_prob(1.0, 0.0);
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((hi_first as f64 / n as f64 - p).abs() < 3.0 * sigma);
    }

    #[test]
    fn equal_returns_give_uniform_rankings() {
        let reward = QTable::zeros(2, 2);
        let segs: Vec<Segment> = (0..3).map(|i| seg(&[i % 2, 0], &[0])).collect();
        let mut rng = StdRng::seed_from_u64(23);
        let n = 10_000;
        let mut counts = std::collections::BTreeMap::new();
        for _ in 0..n {
            let r = label_ranking(segs.clone(), &reward, SegmentDiscount::Off, &mut rng).unwrap();
            *counts.entry(r.permutation.clone()).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 6);
        let expected = n as f64 / 6.0;
        let chi2: f64 = counts
            .values()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        // chi-square(5 dof) 99th percentile.
        assert!(chi2 < 15.0863, "chi2 {chi2}");
    }

    #[test]
    fn separated_returns_give_modal_ranking() {
        let reward = QTable::from_fn(3, 1, |s, _| match s {
            0 => 10.0,
            1 => 0.0,
            _ => -10.0,
        });
        let segs: Vec<Segment> = (0..3).map(|i| seg(&[i, i], &[0])).collect();
        let mut rng = StdRng::seed_from_u64(29);
        let n = 1000;
        let modal = (0..n)
            .filter(|_| {
                label_ranking(segs.clone(), &reward, SegmentDiscount::Off, &mut rng)
                    .unwrap()
                    .permutation
                    == vec![0, 1, 2]
            })
            .count();
        assert!(modal as f64 > 0.99 * n as f64, "modal count {modal}");
    }

    #[test]
    fn subsample_identity_and_single_step() {
        let reward = QTable::zeros(4, 2);
        let mut rng = StdRng::seed_from_u64(1);
        let s1 = seg(&[0, 1, 2, 3], &[0, 1, 0]);
        let s2 = seg(&[3, 2, 1, 0], &[1, 0, 1]);
        let pair = label_pair(s1, s2, &reward, LabelMode::Argmax, SegmentDiscount::Off, &mut rng).unwrap();
        let pairs = vec![pair.clone()];
        let same = subsample_batch(&pairs, 3, &mut rng).unwrap();
        assert_eq!(same[0], pair);
        let one = subsample_batch(&pairs, 1, &mut rng).unwrap();
        assert_eq!(one[0].k(), 1);
        assert_eq!(one[0].first.start_index, one[0].second.start_index);
        assert_eq!(one[0].label, pair.label);
    }

    #[test]
    fn subsample_start_offsets_are_uniform() {
        // Benchmark setting: k = 100, s = 64 gives offsets in {0..36}.
        let states: Vec<usize> = (0..101).map(|i| i % 2).collect();
        let actions = vec![0usize; 100];
        let s1 = Segment::new(states.clone(), actions.clone()).unwrap();
        let s2 = Segment::new(states, actions).unwrap();
        let pair = PreferencePair::new(s1, s2, 1.0).unwrap();
        let pairs = vec![pair];
        let mut rng = StdRng::seed_from_u64(4);
        let n = 10_000;
        let mut counts = vec![0usize; 37];
        for _ in 0..n {
            let batch = subsample_batch(&pairs, 64, &mut rng).unwrap();
            counts[batch[0].first.start_index] += 1;
        }
        let p = 1.0 / 37.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for (start, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - n as f64 * p).abs() < 3.0 * sigma,
                "start {start} count {c}"
            );
        }
    }

    #[test]
    fn subsample_rejects_oversized_s() {
        let pair = PreferencePair::new(seg(&[0, 1], &[0]), seg(&[1, 0], &[1]), 1.0).unwrap();
        let mut rng = StdRng::seed_from_u64(0);
        assert!(subsample_batch(&[pair], 2, &mut rng).is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");

        // Empty dataset round-trips to empty.
        save_dataset(&path, &Dataset::default()).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), Dataset::default());

        // Mixed dataset with 1k pairs sampled from real rollouts.
        let mdp = make_random_mdp(4, 3, 0.9, 2, 1.0, 0).unwrap();
        let policy = Policy::uniform(4, 3);
        let trajectories: Vec<_> = (0..4).map(|i| rollout(&mdp, &policy, 40, i)).collect();
        let mut rng = StdRng::seed_from_u64(11);
        let reward = mdp.expert_reward_table();
        let mut dataset = Dataset::default();
        let segs = sample_segments(&trajectories, 5, 2000, &mut rng).unwrap();
        for chunk in segs.chunks(2) {
            dataset.pairs.push(
                label_pair(
                    chunk[0].clone(),
                    chunk[1].clone(),
                    &reward,
                    LabelMode::Soft,
                    SegmentDiscount::Off,
                    &mut rng,
                )
                .unwrap(),
            );
        }
        assert_eq!(dataset.pairs.len(), 1000);
        dataset.rankings.push(
            label_ranking(
                sample_segments(&trajectories, 5, 4, &mut rng).unwrap(),
                &reward,
                SegmentDiscount::Off,
                &mut rng,
            )
            .unwrap(),
        );
        dataset.transitions = TransitionDataset::from_trajectories(&trajectories, "uniform").transitions;
        save_dataset(&path, &dataset).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), dataset);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"type\":\"transition\",\"s\":0,\"a\":0,\"sp\":1}\nnot json\n",
        )
        .unwrap();
        match load_dataset(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
