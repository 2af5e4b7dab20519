//! Experiment orchestration: config parsing, seeded env -> data -> train ->
//! oracle pipelines, CSV/JSON outputs, and multi-run summaries.
//!
//! A pipeline is a pure function of (config, seed): rerunning the same
//! config produces byte-identical metrics CSVs. Every run directory carries
//! a manifest naming the config hash its files were produced from.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::baselines::{
    dpo_loss, train_dpo, train_iql_with_reward, train_reward_mr, BanditProblem,
    DpoConfig, MrConfig,
};
use crate::data::{
    label_pair, label_ranking, label_ranking_argmax, sample_segments, save_dataset, Dataset,
    LabelMode, Segment, SegmentDiscount, TransitionDataset,
};
use crate::error::{Error, Result};
use crate::ipl::{Backbone, IplConfig, StateActionCounts, Trainer, Variant};
use crate::metrics::MetricsLog;
use crate::mdp::{
    evaluate_policy_return, make_gridworld, make_random_mdp, rollout, soft_value_iteration, Policy,
    TabularMdp,
};
use crate::oracle::{
    build_design, compare_to_oracle, oracle_policy_for_variant, solve_rstar,
};
use rand::rngs::StdRng;
use rand::SeedableRng;

/// Which environment to build.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EnvSpec {
    Random {
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        branching_factor: usize,
        reward_scale: f64,
        seed: u64,
    },
    Gridworld {
        width: usize,
        height: usize,
        goal_cell: usize,
        step_penalty: f64,
        slip_prob: f64,
        gamma: f64,
        seed: u64,
    },
    File {
        path: String,
    },
}

impl EnvSpec {
    pub fn build(&self) -> Result<TabularMdp> {
        match self {
            EnvSpec::Random {
                n_states,
                n_actions,
                gamma,
                branching_factor,
                reward_scale,
                seed,
            } => make_random_mdp(*n_states, *n_actions, *gamma, *branching_factor, *reward_scale, *seed),
            EnvSpec::Gridworld {
                width,
                height,
                goal_cell,
                step_penalty,
                slip_prob,
                gamma,
                seed,
            } => make_gridworld(*width, *height, *goal_cell, *step_penalty, *slip_prob, *gamma, *seed),
            EnvSpec::File { path } => TabularMdp::load(Path::new(path)),
        }
    }

    /// Short label used for grouping in summaries.
    pub fn label(&self) -> String {
        match self {
            EnvSpec::Random { n_states, n_actions, .. } => format!("random-{n_states}x{n_actions}"),
            EnvSpec::Gridworld { width, height, .. } => format!("gridworld-{width}x{height}"),
            EnvSpec::File { path } => Path::new(path)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.clone()),
        }
    }

    fn set_seed(&mut self, seed: u64) {
        match self {
            EnvSpec::Random { seed: s, .. } | EnvSpec::Gridworld { seed: s, .. } => *s = seed,
            EnvSpec::File { .. } => {}
        }
    }
}

/// Behavior policy that generates the offline trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum BehaviorSpec {
    Uniform,
    /// KL-soft optimal policy on the hidden reward at the given temperature;
    /// produces higher-quality coverage.
    SoftOptimal { alpha: f64 },
}

/// Where the offline transition set D_o comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OfflineSource {
    Trajectories,
    /// D_o = transitions appearing inside the preference pairs.
    Pairs,
    /// One transition per (s,a) cell; uniform exhaustive coverage.
    FullSupport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub n_pairs: usize,
    pub n_rankings: usize,
    pub ranking_size: usize,
    pub k: usize,
    pub labeler: LabelMode,
    pub discount_in_segment: bool,
    pub n_trajectories: usize,
    pub horizon: usize,
    pub behavior: BehaviorSpec,
    pub offline_source: OfflineSource,
    /// Replace sampled pairs with every unordered (s,a) vs (s',a') pair as
    /// length-1 segments; requires k = 1. Used by the convergence tests.
    pub exhaustive_k1_pairs: bool,
    /// Force both segments of a pair to start from the same state
    /// (contextual-bandit data for DPO).
    pub pairs_share_context: bool,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_pairs: 500,
            n_rankings: 0,
            ranking_size: 3,
            k: 25,
            labeler: LabelMode::Argmax,
            discount_in_segment: false,
            n_trajectories: 50,
            horizon: 100,
            behavior: BehaviorSpec::Uniform,
            offline_source: OfflineSource::Trajectories,
            exhaustive_k1_pairs: false,
            pairs_share_context: false,
            seed: 0,
        }
    }
}

/// Training method plus its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum AlgorithmSpec {
    IplXql(IplConfig),
    IplIql(IplConfig),
    IplAwac(IplConfig),
    MrIql(MrConfig),
    Dpo(DpoConfig),
}

impl AlgorithmSpec {
    pub fn method_name(&self) -> &'static str {
        match self {
            AlgorithmSpec::IplXql(_) => "ipl-xql",
            AlgorithmSpec::IplIql(_) => "ipl-iql",
            AlgorithmSpec::IplAwac(_) => "ipl-awac",
            AlgorithmSpec::MrIql(_) => "mr-iql",
            AlgorithmSpec::Dpo(_) => "dpo",
        }
    }

    /// Reinterpret the current hyperparameters under another method, as the
    /// CLI's --variant flag requests.
    pub fn with_method(&self, name: &str) -> Result<AlgorithmSpec> {
        let ipl = match self {
            AlgorithmSpec::IplXql(c) | AlgorithmSpec::IplIql(c) | AlgorithmSpec::IplAwac(c) => c.clone(),
            AlgorithmSpec::MrIql(c) => c.rl.clone(),
            AlgorithmSpec::Dpo(_) => IplConfig::default(),
        };
        let with_variant = |variant: Variant| IplConfig { variant, ..ipl.clone() };
        Ok(match name {
            "ipl-xql" => AlgorithmSpec::IplXql(with_variant(Variant::Xql)),
            "ipl-iql" => AlgorithmSpec::IplIql(with_variant(Variant::Iql)),
            "ipl-awac" => AlgorithmSpec::IplAwac(with_variant(Variant::Awac)),
            "mr-iql" => AlgorithmSpec::MrIql(match self {
                AlgorithmSpec::MrIql(c) => c.clone(),
                _ => MrConfig {
                    rl: with_variant(Variant::Iql),
                    ..MrConfig::default()
                },
            }),
            "dpo" => AlgorithmSpec::Dpo(match self {
                AlgorithmSpec::Dpo(c) => c.clone(),
                _ => DpoConfig {
                    alpha: ipl.alpha,
                    seed: ipl.seed,
                    ..DpoConfig::default()
                },
            }),
            other => {
                return Err(Error::Config(format!(
                    "unknown variant '{other}' (expected ipl-xql|ipl-iql|ipl-awac|mr-iql|dpo)"
                )))
            }
        })
    }

    fn seed_mut(&mut self) -> &mut u64 {
        match self {
            AlgorithmSpec::IplXql(c) | AlgorithmSpec::IplIql(c) | AlgorithmSpec::IplAwac(c) => &mut c.seed,
            AlgorithmSpec::MrIql(c) => &mut c.rl.seed,
            AlgorithmSpec::Dpo(c) => &mut c.seed,
        }
    }
}

/// A full experiment: environment, dataset, algorithm, oracle toggle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub environment: EnvSpec,
    #[serde(default)]
    pub dataset: DatasetSpec,
    pub algorithm: AlgorithmSpec,
    #[serde(default)]
    pub oracle: bool,
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    /// Derive all stage seeds from one master seed.
    pub fn with_master_seed(mut self, seed: u64) -> Self {
        self.environment.set_seed(seed);
        self.dataset.seed = seed.wrapping_add(1000);
        *self.algorithm.seed_mut() = seed.wrapping_add(2000);
        self
    }

    /// Hex-truncated SHA-256 of the canonical config JSON.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        hex[..16].to_string()
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.exhaustive_k1_pairs && self.dataset.k != 1 {
            return Err(Error::Config("exhaustive pair mode requires k = 1".into()));
        }
        match &self.algorithm {
            AlgorithmSpec::IplXql(c) | AlgorithmSpec::IplIql(c) | AlgorithmSpec::IplAwac(c) => {
                if self.oracle && !(c.regularize_full_space && matches!(c.backbone, Backbone::Tabular)) {
                    return Err(Error::Config(
                        "oracle comparisons require the tabular backbone with full-space regularization"
                            .into(),
                    ));
                }
            }
            AlgorithmSpec::MrIql(c) => {
                if self.oracle && !(c.rl.regularize_full_space && matches!(c.rl.backbone, Backbone::Tabular)) {
                    return Err(Error::Config(
                        "oracle comparisons require the tabular backbone with full-space regularization"
                            .into(),
                    ));
                }
            }
            AlgorithmSpec::Dpo(_) => {
                if !self.dataset.pairs_share_context || self.dataset.k != 1 {
                    return Err(Error::Config(
                        "DPO needs k = 1 pairs that share the context (set pairs_share_context)".into(),
                    ));
                }
                if self.oracle {
                    return Err(Error::Config("no oracle is defined for the DPO method".into()));
                }
            }
        }
        Ok(())
    }
}

pub fn behavior_policy(mdp: &TabularMdp, spec: &BehaviorSpec) -> Result<Policy> {
    match spec {
        BehaviorSpec::Uniform => Ok(Policy::uniform(mdp.n_states(), mdp.n_actions())),
        BehaviorSpec::SoftOptimal { alpha } => {
            let mu = Policy::uniform(mdp.n_states(), mdp.n_actions());
            let (_, _, policy) = soft_value_iteration(mdp, &mdp.expert_reward_table(), *alpha, &mu)?;
            Ok(policy)
        }
    }
}

/// Generate the preference dataset and the offline transitions for an
/// environment, per spec. Deterministic under the dataset seed.
pub fn generate_dataset(mdp: &TabularMdp, spec: &DatasetSpec) -> Result<(Dataset, TransitionDataset)> {
    let mut rng = StdRng::seed_from_u64(spec.seed);
    let discount = if spec.discount_in_segment {
        SegmentDiscount::On { gamma: mdp.discount() }
    } else {
        SegmentDiscount::Off
    };
    let reward = mdp.expert_reward_table();
    let behavior = behavior_policy(mdp, &spec.behavior)?;
    let trajectories: Vec<_> = (0..spec.n_trajectories)
        .map(|i| rollout(mdp, &behavior, spec.horizon, spec.seed.wrapping_add(1 + i as u64)))
        .collect();

    let mut dataset = Dataset::default();
    if spec.exhaustive_k1_pairs {
        // Every unordered state-action pair, as single-step segments with
        // sampled successor states.
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let mut cells = Vec::new();
        for s in 0..ns {
            for a in 0..na {
                let sp = crate::util::sample_categorical(mdp.transition_row(s, a), &mut rng);
                cells.push(Segment::new(vec![s, sp], vec![a])?);
            }
        }
        for i in 0..cells.len() {
            for j in i + 1..cells.len() {
                if spec.pairs_share_context && cells[i].states[0] != cells[j].states[0] {
                    continue;
                }
                dataset.pairs.push(label_pair(
                    cells[i].clone(),
                    cells[j].clone(),
                    &reward,
                    spec.labeler,
                    discount,
                    &mut rng,
                )?);
            }
        }
    } else if spec.n_pairs > 0 {
        if spec.pairs_share_context {
            // Rejection-sample segment pairs with a common start state.
            let mut made = 0;
            let mut guard = 0;
            while made < spec.n_pairs {
                guard += 1;
                if guard > spec.n_pairs * 10_000 {
                    return Err(Error::Config(
                        "could not find enough same-context segment pairs".into(),
                    ));
                }
                let segs = sample_segments(&trajectories, spec.k, 2, &mut rng)?;
                if segs[0].states[0] != segs[1].states[0] {
                    continue;
                }
                dataset.pairs.push(label_pair(
                    segs[0].clone(),
                    segs[1].clone(),
                    &reward,
                    spec.labeler,
                    discount,
                    &mut rng,
                )?);
                made += 1;
            }
        } else {
            let segs = sample_segments(&trajectories, spec.k, 2 * spec.n_pairs, &mut rng)?;
            for chunk in segs.chunks(2) {
                dataset.pairs.push(label_pair(
                    chunk[0].clone(),
                    chunk[1].clone(),
                    &reward,
                    spec.labeler,
                    discount,
                    &mut rng,
                )?);
            }
        }
    }
    for _ in 0..spec.n_rankings {
        let segs = sample_segments(&trajectories, spec.k, spec.ranking_size, &mut rng)?;
        let query = match spec.labeler {
            LabelMode::Argmax => label_ranking_argmax(segs, &reward, discount)?,
            _ => label_ranking(segs, &reward, discount, &mut rng)?,
        };
        dataset.rankings.push(query);
    }

    let offline = match spec.offline_source {
        OfflineSource::Trajectories => TransitionDataset::from_trajectories(&trajectories, "behavior"),
        OfflineSource::Pairs => TransitionDataset::from_pairs(&dataset.pairs),
        OfflineSource::FullSupport => TransitionDataset::full_support(mdp, spec.seed.wrapping_add(999)),
    };
    dataset.transitions = offline.transitions.clone();
    Ok((dataset, offline))
}

/// Per-run manifest: the config hash every artifact in the directory was
/// produced from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub method: String,
    pub task: String,
    pub n_pairs: usize,
    pub files: Vec<String>,
}

/// Outcome of a successful run, with the paths that matter.
#[derive(Debug)]
pub struct RunOutputs {
    pub dir: PathBuf,
    pub config_hash: String,
    pub final_return: f64,
    pub metrics: MetricsLog,
}

fn ipl_effective_config(base: &IplConfig, dataset: &DatasetSpec, mdp: &TabularMdp) -> IplConfig {
    let mut c = base.clone();
    c.gamma = mdp.discount();
    c.k = dataset.k;
    c.s = c.s.min(dataset.k).max(1);
    c.discount_in_segment = dataset.discount_in_segment;
    c
}

fn segment_discount(dataset: &DatasetSpec, mdp: &TabularMdp) -> SegmentDiscount {
    if dataset.discount_in_segment {
        SegmentDiscount::On { gamma: mdp.discount() }
    } else {
        SegmentDiscount::Off
    }
}

/// Run the full pipeline into `out`: env, data, training, metrics, and (if
/// enabled) the oracle comparison. Artifacts are written as they are
/// produced; any stage error aborts with a stage-tagged message.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<RunOutputs> {
    config.validate()?;
    std::fs::create_dir_all(out)?;
    let hash = config.hash();
    let stage = stage_err;

    std::fs::write(
        out.join("config_echo.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "config_hash": hash,
            "config": config,
        }))?,
    )?;

    let mdp = config.environment.build().map_err(|e| stage("gen-env", e))?;
    mdp.save(&out.join("mdp.json"))?;

    let (dataset, offline) =
        generate_dataset(&mdp, &config.dataset).map_err(|e| stage("gen-data", e))?;
    save_dataset(&out.join("dataset.jsonl"), &dataset)?;

    let mut files = vec![
        "config_echo.json".to_string(),
        "mdp.json".to_string(),
        "dataset.jsonl".to_string(),
    ];

    let metrics = match &config.algorithm {
        AlgorithmSpec::IplXql(c) | AlgorithmSpec::IplIql(c) | AlgorithmSpec::IplAwac(c) => {
            let effective = ipl_effective_config(c, &config.dataset, &mdp);
            std::fs::write(out.join("train_config.json"), serde_json::to_string_pretty(&effective)?)?;
            files.push("train_config.json".to_string());
            let mut trainer = Trainer::new(effective.clone(), &dataset, &offline, &mdp)
                .map_err(|e| stage("train", e))?;
            let oracle_report = if config.oracle {
                let design = build_design(
                    &dataset.pairs,
                    mdp.n_states(),
                    mdp.n_actions(),
                    segment_discount(&config.dataset, &mdp),
                )
                .map_err(|e| stage("oracle", e))?;
                let report = solve_rstar(&design, effective.lambda, mdp.n_states() * mdp.n_actions())
                    .map_err(|e| stage("oracle", e))?;
                trainer.attach_oracle_reward(report.rstar.clone());
                Some(report)
            } else {
                None
            };
            let artifacts = trainer.run().map_err(|e| stage("train", e))?;
            std::fs::write(out.join("q.json"), artifacts.q.to_json_string()?)?;
            if let Some(v) = &artifacts.v {
                std::fs::write(out.join("v.json"), v.to_json_string()?)?;
                files.push("v.json".to_string());
            }
            std::fs::write(out.join("policy.json"), serde_json::to_string_pretty(&artifacts.policy)?)?;
            files.extend(["q.json".to_string(), "policy.json".to_string()]);
            if let Some(report) = oracle_report {
                std::fs::write(out.join("oracle_report.json"), report.to_json_string()?)?;
                let counts = StateActionCounts::from_data(
                    &dataset.pairs,
                    &offline.transitions,
                    mdp.n_states(),
                    mdp.n_actions(),
                );
                let oracle_policy = oracle_policy_for_variant(&mdp, &report.rstar, &effective, &counts)
                    .map_err(|e| stage("oracle", e))?;
                let gaps = compare_to_oracle(&artifacts, &report, &oracle_policy, &mdp, &counts)
                    .map_err(|e| stage("oracle", e))?;
                std::fs::write(out.join("gap_report.json"), gaps.to_json_string()?)?;
                files.extend(["oracle_report.json".to_string(), "gap_report.json".to_string()]);
            }
            artifacts.metrics
        }
        AlgorithmSpec::MrIql(c) => {
            let rl = ipl_effective_config(&c.rl, &config.dataset, &mdp);
            let mr = MrConfig { rl, ..c.clone() };
            std::fs::write(out.join("train_config.json"), serde_json::to_string_pretty(&mr)?)?;
            files.push("train_config.json".to_string());
            let reward_model = train_reward_mr(&dataset, &mr, &mdp).map_err(|e| stage("train", e))?;
            std::fs::write(out.join("reward.json"), reward_model.function.to_json_string()?)?;
            files.push("reward.json".to_string());
            if config.oracle {
                let design = build_design(
                    &dataset.pairs,
                    mdp.n_states(),
                    mdp.n_actions(),
                    segment_discount(&config.dataset, &mdp),
                )
                .map_err(|e| stage("oracle", e))?;
                let report = solve_rstar(&design, mr.reward_lambda, mdp.n_states() * mdp.n_actions())
                    .map_err(|e| stage("oracle", e))?;
                let gap = reward_model
                    .table(mdp.n_states(), mdp.n_actions())
                    .sup_distance(&report.rstar);
                std::fs::write(out.join("oracle_report.json"), report.to_json_string()?)?;
                std::fs::write(
                    out.join("gap_report.json"),
                    serde_json::to_string_pretty(&serde_json::json!({ "reward_gap_sup": gap }))?,
                )?;
                files.extend(["oracle_report.json".to_string(), "gap_report.json".to_string()]);
            }
            let artifacts = train_iql_with_reward(&reward_model, &offline, &mr.rl, &mdp)
                .map_err(|e| stage("train", e))?;
            std::fs::write(out.join("q.json"), artifacts.q.to_json_string()?)?;
            if let Some(v) = &artifacts.v {
                std::fs::write(out.join("v.json"), v.to_json_string()?)?;
                files.push("v.json".to_string());
            }
            std::fs::write(out.join("policy.json"), serde_json::to_string_pretty(&artifacts.policy)?)?;
            files.extend(["q.json".to_string(), "policy.json".to_string()]);
            artifacts.metrics
        }
        AlgorithmSpec::Dpo(c) => {
            std::fs::write(out.join("train_config.json"), serde_json::to_string_pretty(c)?)?;
            files.push("train_config.json".to_string());
            let bandit = BanditProblem {
                n_contexts: mdp.n_states(),
                n_actions: mdp.n_actions(),
                mu: behavior_policy(&mdp, &config.dataset.behavior)?,
                reward: mdp.expert_reward_table(),
                pairs: dataset.pairs.clone(),
            };
            let artifacts = train_dpo(&bandit, c).map_err(|e| stage("train", e))?;
            std::fs::write(out.join("policy.json"), serde_json::to_string_pretty(&artifacts.policy)?)?;
            files.push("policy.json".to_string());
            artifacts.metrics
        }
    };

    metrics.write_csv(&out.join("metrics.csv"), Some(&format!("config_hash: {hash}")))?;
    files.push("metrics.csv".to_string());

    let manifest = RunManifest {
        config_hash: hash.clone(),
        method: config.algorithm.method_name().to_string(),
        task: config.environment.label(),
        n_pairs: config.dataset.n_pairs,
        files,
    };
    std::fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;

    let final_return = metrics.last().map(|r| r.gt_return).unwrap_or(0.0);
    Ok(RunOutputs {
        dir: out.to_path_buf(),
        config_hash: hash,
        final_return,
        metrics,
    })
}

/// Prefix an error with the pipeline stage it came from, keeping its kind
/// (and therefore the exit code).
fn stage_err(name: &str, e: Error) -> Error {
    let msg = format!("[{name}] {e}");
    match e {
        Error::Divergence(_) => Error::Divergence(msg),
        Error::Numerics(_) => Error::Numerics(msg),
        _ => Error::Config(msg),
    }
}

/// One row of the cross-run summary: best checkpoint of the seed-averaged
/// learning curve, with the across-seed spread at that checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub task: String,
    pub method: String,
    pub n_pairs: usize,
    pub seeds: usize,
    pub best_step: usize,
    pub mean_best_return: f64,
    pub std_best_return: f64,
}

/// Summarize completed runs grouped by (task, method, n_pairs). The best
/// checkpoint is the maximum of the across-seed mean curve; the reported
/// std is the population std across seeds at that checkpoint. Missing or
/// unreadable runs are reported, never fabricated.
pub fn compare_runs(run_dirs: &[PathBuf]) -> Result<(Vec<RunSummary>, Vec<String>)> {
    let mut problems = Vec::new();
    let mut groups: BTreeMap<(String, String, usize), Vec<MetricsLog>> = BTreeMap::new();
    for dir in run_dirs {
        let manifest_path = dir.join("manifest.json");
        let metrics_path = dir.join("metrics.csv");
        if !manifest_path.exists() || !metrics_path.exists() {
            problems.push(format!("{}: missing manifest or metrics", dir.display()));
            continue;
        }
        let manifest: RunManifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
        match MetricsLog::read_csv(&metrics_path) {
            Ok(log) if !log.is_empty() => {
                groups
                    .entry((manifest.task, manifest.method, manifest.n_pairs))
                    .or_default()
                    .push(log);
            }
            Ok(_) => problems.push(format!("{}: empty metrics", dir.display())),
            Err(e) => problems.push(format!("{}: {e}", dir.display())),
        }
    }
    let mut summaries = Vec::new();
    for ((task, method, n_pairs), logs) in groups {
        let steps: Vec<usize> = logs[0].rows().iter().map(|r| r.step).collect();
        if logs.iter().any(|l| {
            l.rows().len() != steps.len()
                || l.rows().iter().zip(&steps).any(|(r, s)| r.step != *s)
        }) {
            problems.push(format!(
                "{task}/{method}/{n_pairs}: runs disagree on evaluation steps; skipped"
            ));
            continue;
        }
        let n_seeds = logs.len();
        let mut best_idx = 0;
        let mut best_mean = f64::NEG_INFINITY;
        for idx in 0..steps.len() {
            let mean: f64 =
                logs.iter().map(|l| l.rows()[idx].gt_return).sum::<f64>() / n_seeds as f64;
            if mean > best_mean {
                best_mean = mean;
                best_idx = idx;
            }
        }
        let values: Vec<f64> = logs.iter().map(|l| l.rows()[best_idx].gt_return).collect();
        let mean = values.iter().sum::<f64>() / n_seeds as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n_seeds as f64;
        summaries.push(RunSummary {
            task,
            method,
            n_pairs,
            seeds: n_seeds,
            best_step: steps[best_idx],
            mean_best_return: mean,
            std_best_return: var.sqrt(),
        });
    }
    Ok((summaries, problems))
}

/// Render the summary as CSV (best-checkpoint convention, stated in the
/// header to avoid confusion with final-step reporting).
pub fn summary_csv(summaries: &[RunSummary]) -> String {
    let mut out = String::from(
        "# reporting: best checkpoint of the seed-averaged learning curve\ntask,method,n_pairs,seeds,best_step,mean_best_return,std_best_return\n",
    );
    for s in summaries {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            s.task, s.method, s.n_pairs, s.seeds, s.best_step, s.mean_best_return, s.std_best_return
        ));
    }
    out
}

/// A sweep: a base experiment and axes of dotted-path overrides, expanded
/// as a cartesian product.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    pub base: ExperimentConfig,
    pub axes: Vec<SweepAxis>,
    /// Worker threads; runs are independent and share nothing.
    #[serde(default = "default_workers")]
    pub workers: usize,
}

fn default_workers() -> usize {
    4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepAxis {
    /// Dotted path into the experiment config JSON, e.g. "algorithm.lambda"
    /// or "dataset.n_pairs". "seed" re-seeds the whole pipeline.
    pub param: String,
    pub values: Vec<serde_json::Value>,
}

fn set_by_path(root: &mut serde_json::Value, path: &str, value: serde_json::Value) -> Result<()> {
    let mut cursor = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let map = cursor
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("config path '{path}' crosses a non-object")))?;
        if i == parts.len() - 1 {
            if !map.contains_key(*part) {
                return Err(Error::Config(format!("config path '{path}' not found")));
            }
            map.insert(part.to_string(), value);
            return Ok(());
        }
        cursor = map
            .get_mut(*part)
            .ok_or_else(|| Error::Config(format!("config path '{path}' not found")))?;
    }
    unreachable!()
}

/// Expand the sweep into concrete experiment configs with run names.
pub fn expand_sweep(sweep: &SweepConfig) -> Result<Vec<(String, ExperimentConfig)>> {
    let mut combos: Vec<(String, serde_json::Value)> =
        vec![(String::new(), serde_json::to_value(&sweep.base)?)];
    for axis in &sweep.axes {
        let mut next = Vec::new();
        for (name, value) in &combos {
            for v in &axis.values {
                let mut candidate = value.clone();
                if axis.param == "seed" {
                    let seed = v
                        .as_u64()
                        .ok_or_else(|| Error::Config("seed values must be integers".into()))?;
                    let config: ExperimentConfig = serde_json::from_value(candidate.clone())?;
                    candidate = serde_json::to_value(config.with_master_seed(seed))?;
                } else {
                    set_by_path(&mut candidate, &axis.param, v.clone())?;
                }
                let tag = format!("{}-{}", axis.param.replace('.', "_"), render_value(v));
                let name = if name.is_empty() { tag } else { format!("{name}__{tag}") };
                next.push((name, candidate));
            }
        }
        combos = next;
    }
    combos
        .into_iter()
        .enumerate()
        .map(|(i, (name, value))| {
            let config: ExperimentConfig = serde_json::from_value(value)?;
            let dir = if name.is_empty() {
                format!("run_{i:03}")
            } else {
                format!("run_{i:03}__{name}")
            };
            Ok((dir, config))
        })
        .collect()
}

fn render_value(v: &serde_json::Value) -> String {
    match v {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string().replace('.', "p"),
    }
}

/// Run every sweep combination under `out`, in parallel worker threads.
/// Returns the run directories; any individual failure is reported and the
/// first one is returned as the overall error after all runs finish.
pub fn run_sweep(sweep: &SweepConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let runs = expand_sweep(sweep)?;
    std::fs::create_dir_all(out)?;
    let workers = sweep.workers.max(1);
    let results: Vec<(PathBuf, Result<RunOutputs>)> = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for chunk in runs.chunks(runs.len().div_ceil(workers)) {
            let chunk: Vec<(String, ExperimentConfig)> = chunk.to_vec();
            let out = out.to_path_buf();
            handles.push(scope.spawn(move || {
                chunk
                    .into_iter()
                    .map(|(dir, config)| {
                        let run_dir = out.join(&dir);
                        let outcome = run_experiment(&config, &run_dir);
                        (run_dir, outcome)
                    })
                    .collect::<Vec<_>>()
            }));
        }
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut dirs = Vec::new();
    let mut first_error = None;
    for (dir, outcome) in results {
        match outcome {
            Ok(_) => dirs.push(dir),
            Err(e) => {
                eprintln!("sweep run {} failed: {e}", dir.display());
                if first_error.is_none() {
                    let prefixed = stage_err("sweep", e);
                    first_error = Some(prefixed);
                }
            }
        }
    }
    match first_error {
        Some(e) => Err(e),
        None => Ok(dirs),
    }
}

/// DPO loss re-export for the CLI and examples (keeps the harness the only
/// module the binary needs).
pub fn dpo_loss_of(bandit: &BanditProblem, logits: &crate::approx::Approximator, alpha: f64) -> Result<f64> {
    Ok(dpo_loss(logits, &bandit.mu, &bandit.pairs, alpha)?.0)
}

/// Convenience used by tests and examples: soft-optimal ground-truth return
/// of an environment at temperature alpha (the target the learners chase).
pub fn soft_optimal_return(mdp: &TabularMdp, alpha: f64) -> Result<f64> {
    let mu = Policy::uniform(mdp.n_states(), mdp.n_actions());
    let (_, _, pi) = soft_value_iteration(mdp, &mdp.expert_reward_table(), alpha, &mu)?;
    evaluate_policy_return(mdp, &pi, &mdp.expert_reward_table())
}

/// Exhaustive noiseless preference data over a tabular MDP plus uniform
/// full-support offline transitions: the Theorem-1 test fixture.
pub fn exhaustive_k1_fixture(mdp: &TabularMdp, seed: u64) -> Result<(Dataset, TransitionDataset)> {
    let spec = DatasetSpec {
        exhaustive_k1_pairs: true,
        k: 1,
        n_pairs: 0,
        labeler: LabelMode::Argmax,
        offline_source: OfflineSource::FullSupport,
        seed,
        ..DatasetSpec::default()
    };
    generate_dataset(mdp, &spec)
}

/// Scripted-preference gridworld fixture used by the parity and
/// data-scaling studies.
pub fn gridworld_fixture(
    mdp: &TabularMdp,
    n_pairs: usize,
    k: usize,
    seed: u64,
) -> Result<(Dataset, TransitionDataset)> {
    let spec = DatasetSpec {
        n_pairs,
        k,
        labeler: LabelMode::Argmax,
        n_trajectories: 60,
        horizon: 120,
        seed,
        ..DatasetSpec::default()
    };
    generate_dataset(mdp, &spec)
}

