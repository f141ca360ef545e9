//! Experiment orchestration. The harness is the only code that holds true
//! task MDPs: it builds seeded tasks, hands training code nothing but
//! datasets and meta-models, and scores the resulting policies exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MerpoError, Result};
use crate::mdp::{expected_return, StochasticPolicy, TabularMdp};
use crate::merpo::{adapt_in_context, task_contexts, train_from, MerpoConfig, MetaState, TaskResult};
use crate::model::{train_meta_model, MetaModelParams, ModelConfig, ModelParams};
use crate::rac::{solve, PolicyEvaluator, RacConfig, RacTraceRow, RhoSource, TaskContext};
use crate::rng::SeedStream;
use crate::tasks::{collect_dataset, make_behavior_policy, sample_task, BehaviorQuality, OfflineDataset, TaskFamily, TaskShape};
use crate::textio::fmt_real;

pub const CSV_SCHEMA_VERSION: u32 = 1;
pub const OUTPUT_ROOT_ENV: &str = "MERPO_OUTPUT_ROOT";
/// `f` used when the model branch is switched off.
pub const NO_MODEL_F: f64 = 1.0 - 1e-9;

pub const RAC_COLUMNS: [&str; 7] = ["iter", "J_true", "nu", "div_beta", "div_c", "beta", "lambda"];
pub const MERPO_COLUMNS: [&str; 5] = ["iter", "mean_test_return", "mean_alpha", "mean_beta", "mean_lambda"];

/// A true task MDP. Training code never receives one; it only answers
/// return queries and draws datasets.
pub struct HiddenTask {
    mdp: TabularMdp,
}

impl HiddenTask {
    pub fn new(mdp: TabularMdp) -> Self {
        Self { mdp }
    }

    pub fn shape(&self) -> TaskShape {
        self.mdp.shape()
    }

    /// Draw an offline dataset with `behavior`.
    pub fn collect(
        &self,
        behavior: &StochasticPolicy,
        quality: BehaviorQuality,
        task_id: usize,
        n: usize,
        seed: u64,
    ) -> Result<OfflineDataset> {
        collect_dataset(&self.mdp, behavior, quality, task_id, n, seed)
    }

    pub fn behavior_policy(&self, quality: BehaviorQuality, temperature: f64) -> Result<StochasticPolicy> {
        make_behavior_policy(&self.mdp, quality, temperature)
    }

    pub(crate) fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }
}

impl PolicyEvaluator for HiddenTask {
    fn true_return(&self, policy: &StochasticPolicy) -> Result<f64> {
        expected_return(&self.mdp, policy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaPolicyKind {
    /// Expert policy of a sibling task.
    Expert,
    /// Medium policy of a sibling task.
    Medium,
    Random,
}

/// A family of seeded single-task problems. Task indices below
/// `prior_tasks` train the meta-model, index `prior_tasks` is the sibling
/// task that supplies expert or medium meta-policies, and seed `k` maps to
/// task `prior_tasks + 1 + k`. Seed `k` uses data quality
/// `data_qualities[k % len]` and meta-policy `meta_policies[(k / len) % len']`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub family: TaskFamily,
    pub prior_tasks: usize,
    pub prior_quality: BehaviorQuality,
    pub n_transitions: usize,
    pub behavior_temperature: f64,
    pub data_qualities: Vec<BehaviorQuality>,
    pub meta_policies: Vec<MetaPolicyKind>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            family: TaskFamily::new(crate::tasks::FamilyKind::GridworldWind, 4, (-0.4, 0.4), 1000),
            prior_tasks: 10,
            prior_quality: BehaviorQuality::Medium,
            n_transitions: 5000,
            behavior_temperature: 0.1,
            data_qualities: vec![BehaviorQuality::Random, BehaviorQuality::Medium, BehaviorQuality::Expert],
            meta_policies: vec![MetaPolicyKind::Expert, MetaPolicyKind::Medium, MetaPolicyKind::Random],
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.data_qualities.is_empty() || self.meta_policies.is_empty() {
            return Err(MerpoError::Config("scenario needs at least one data quality and meta-policy".into()));
        }
        if self.n_transitions == 0 {
            return Err(MerpoError::Config("n_transitions must be positive".into()));
        }
        if !(self.behavior_temperature > 0.0) {
            return Err(MerpoError::Config("behavior_temperature must be positive".into()));
        }
        Ok(())
    }

    pub fn data_quality(&self, seed: u64) -> BehaviorQuality {
        self.data_qualities[(seed % self.data_qualities.len() as u64) as usize]
    }

    pub fn meta_kind(&self, seed: u64) -> MetaPolicyKind {
        let k = seed / self.data_qualities.len() as u64;
        self.meta_policies[(k % self.meta_policies.len() as u64) as usize]
    }
}

/// One seeded task: the hidden MDP, what the solver may see, and the
/// reference returns.
pub struct TaskInstance {
    pub hidden: HiddenTask,
    pub data: OfflineDataset,
    pub ctx: TaskContext,
    pub pi_beta: StochasticPolicy,
    pub pi_c: StochasticPolicy,
    pub data_quality: BehaviorQuality,
    pub meta_kind: MetaPolicyKind,
    pub j_beta: f64,
    pub j_c: f64,
}

/// A scenario with its meta-model trained once for all seeds.
pub struct PreparedScenario {
    pub config: ScenarioConfig,
    pub shape: TaskShape,
    pub meta_model: MetaModelParams,
    pub model_cfg: ModelConfig,
    sibling_expert: StochasticPolicy,
    sibling_medium: StochasticPolicy,
}

impl PreparedScenario {
    pub fn new(config: &ScenarioConfig, model_cfg: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let shape = config.family.shape();
        let temp = config.behavior_temperature;
        let data: Vec<OfflineDataset> = (0..config.prior_tasks)
            .map(|k| {
                let task = HiddenTask::new(sample_task(&config.family, k)?);
                let pb = task.behavior_policy(config.prior_quality, temp)?;
                task.collect(&pb, config.prior_quality, k, config.n_transitions, config.family.seed ^ (k as u64 + 1) << 20)
            })
            .collect::<Result<_>>()?;
        let zero = ModelParams::zeros(shape.n_states, shape.n_actions);
        let meta_model = if data.is_empty() {
            zero
        } else {
            train_meta_model(&data, &zero, model_cfg)?
        };
        let sibling = HiddenTask::new(sample_task(&config.family, config.prior_tasks)?);
        Ok(Self {
            config: config.clone(),
            shape,
            meta_model,
            model_cfg: model_cfg.clone(),
            sibling_expert: sibling.behavior_policy(BehaviorQuality::Expert, temp)?,
            sibling_medium: sibling.behavior_policy(BehaviorQuality::Medium, temp)?,
        })
    }

    pub fn meta_policy(&self, kind: MetaPolicyKind) -> StochasticPolicy {
        match kind {
            MetaPolicyKind::Expert => self.sibling_expert.clone(),
            MetaPolicyKind::Medium => self.sibling_medium.clone(),
            MetaPolicyKind::Random => StochasticPolicy::uniform(self.shape.n_states, self.shape.n_actions),
        }
    }

    pub fn instance(&self, seed: u64) -> Result<TaskInstance> {
        self.instance_with(seed, self.config.data_quality(seed), self.config.meta_kind(seed))
    }

    pub fn instance_with(&self, seed: u64, quality: BehaviorQuality, meta: MetaPolicyKind) -> Result<TaskInstance> {
        let cfg = &self.config;
        let idx = cfg.prior_tasks + 1 + seed as usize;
        let hidden = HiddenTask::new(sample_task(&cfg.family, idx)?);
        let pi_beta = hidden.behavior_policy(quality, cfg.behavior_temperature)?;
        let data = hidden.collect(&pi_beta, quality, idx, cfg.n_transitions, seed)?;
        let ctx = TaskContext::fit(&data, &self.shape, &self.meta_model, &self.model_cfg, SeedStream::new(seed).named("model"))?;
        let pi_c = self.meta_policy(meta);
        Ok(TaskInstance {
            j_beta: hidden.true_return(&pi_beta)?,
            j_c: hidden.true_return(&pi_c)?,
            hidden,
            data,
            ctx,
            pi_beta,
            pi_c,
            data_quality: quality,
            meta_kind: meta,
        })
    }

    /// Exact return of the RAC policy for every `(alpha, seed)`;
    /// `out[i][k]` belongs to `alphas[i]` and `seeds[k]`.
    pub fn rac_returns(&self, rac: &RacConfig, iters: usize, alphas: &[f64], seeds: &[u64]) -> Result<Vec<Vec<f64>>> {
        let per_seed: Vec<Vec<f64>> = seeds
            .par_iter()
            .map(|&seed| {
                let inst = self.instance(seed)?;
                alphas
                    .iter()
                    .map(|&alpha| inst.rac_return(&RacConfig { alpha, ..rac.clone() }, iters, seed))
                    .collect()
            })
            .collect::<Result<_>>()?;
        Ok((0..alphas.len()).map(|i| per_seed.iter().map(|r| r[i]).collect()).collect())
    }
}

impl TaskInstance {
    pub fn rac_return(&self, rac: &RacConfig, iters: usize, seed: u64) -> Result<f64> {
        let st = solve(&self.ctx, &self.pi_c, rac, iters, SeedStream::new(seed), None, &mut Vec::new())?;
        self.hidden.true_return(&st.policy)
    }

    pub fn rac_trace(&self, rac: &RacConfig, iters: usize, seed: u64) -> Result<Vec<RacTraceRow>> {
        let mut trace = Vec::new();
        solve(&self.ctx, &self.pi_c, rac, iters, SeedStream::new(seed), Some(&self.hidden), &mut trace)?;
        Ok(trace)
    }
}

/// Training and test tasks for meta-training runs. Per seed the family seed is
/// offset by the run seed, training tasks take indices `0..n_train_tasks`
/// and test tasks the next `n_test_tasks`.
pub struct MetaTaskSet {
    pub shape: TaskShape,
    pub train_data: Vec<OfflineDataset>,
    pub meta_model: MetaModelParams,
    test: Vec<(HiddenTask, OfflineDataset)>,
}

impl MetaTaskSet {
    pub fn build(cfg: &ExperimentConfig, seed: u64, quality: Option<BehaviorQuality>) -> Result<Self> {
        let sc = &cfg.scenario;
        let family = TaskFamily {
            seed: sc.family.seed.wrapping_add(seed.wrapping_mul(0x9E37_79B9)),
            ..sc.family.clone()
        };
        let shape = family.shape();
        let make = |idx: usize, q: BehaviorQuality| -> Result<(HiddenTask, OfflineDataset)> {
            let task = HiddenTask::new(sample_task(&family, idx)?);
            let pb = task.behavior_policy(q, sc.behavior_temperature)?;
            let data = task.collect(&pb, q, idx, sc.n_transitions, family.seed ^ (idx as u64) << 24)?;
            Ok((task, data))
        };
        let pick = |list: &[BehaviorQuality], k: usize| quality.unwrap_or(list[k % list.len()]);
        let train_data: Vec<OfflineDataset> = (0..cfg.n_train_tasks)
            .map(|k| make(k, pick(&sc.data_qualities, k)).map(|(_, d)| d))
            .collect::<Result<_>>()?;
        let test = (0..cfg.n_test_tasks)
            .map(|j| make(cfg.n_train_tasks + j, pick(&cfg.test_qualities, j)))
            .collect::<Result<_>>()?;
        let zero = ModelParams::zeros(shape.n_states, shape.n_actions);
        let meta_model = train_meta_model(&train_data, &zero, &cfg.merpo.model)?;
        Ok(Self {
            shape,
            train_data,
            meta_model,
            test,
        })
    }

    pub fn test_contexts(&self, model_cfg: &ModelConfig, seed: SeedStream) -> Result<Vec<TaskContext>> {
        let data: Vec<OfflineDataset> = self.test.iter().map(|(_, d)| d.clone()).collect();
        task_contexts(&data, &self.shape, &self.meta_model, model_cfg, seed)
    }

    /// Exact return on each test task after adapting from `state`.
    pub fn test_returns(&self, contexts: &[TaskContext], state: &MetaState, cfg: &MerpoConfig, seed: SeedStream) -> Result<Vec<f64>> {
        contexts
            .par_iter()
            .zip(&self.test)
            .enumerate()
            .map(|(j, (ctx, (task, _)))| {
                let st = adapt_in_context(ctx, state, cfg, cfg.adapt_steps, seed.child(j as u64), None, &mut Vec::new())?;
                task.true_return(&st.policy)
            })
            .collect()
    }

    pub fn mean_test_return(&self, contexts: &[TaskContext], state: &MetaState, cfg: &MerpoConfig, seed: SeedStream) -> Result<f64> {
        let returns = self.test_returns(contexts, state, cfg, seed)?;
        Ok(returns.iter().sum::<f64>() / returns.len().max(1) as f64)
    }

    pub fn test_tasks(&self) -> impl Iterator<Item = &HiddenTask> {
        self.test.iter().map(|(t, _)| t)
    }

    /// Exact returns of the test tasks' behavior policies.
    pub fn test_behavior_returns(&self, temperature: f64) -> Result<Vec<f64>> {
        self.test
            .iter()
            .map(|(task, data)| task.true_return(&task.behavior_policy(data.quality, temperature)?))
            .collect()
    }
}

/// Meta-train on a task set and score the test tasks every `eval_every`
/// outer iterations (and at the start and end). Rows follow
/// [`MERPO_COLUMNS`].
pub fn merpo_run(tasks: &MetaTaskSet, cfg: &MerpoConfig, eval_every: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let root = SeedStream::new(seed);
    let contexts = task_contexts(&tasks.train_data, &tasks.shape, &tasks.meta_model, &cfg.model, root.named("train-models"))?;
    let test_ctx = tasks.test_contexts(&cfg.model, root.named("test-models"))?;
    let eval_seed = root.named("test");
    let state = MetaState::new(&tasks.shape, contexts.len(), cfg);
    let mut rows = vec![merpo_row(&state, tasks.mean_test_return(&test_ctx, &state, cfg, eval_seed.child(0))?)];
    let outer = cfg.outer_iters;
    let mut observer = |st: &MetaState, _: &[TaskResult]| -> Result<()> {
        if st.iter.is_multiple_of(eval_every.max(1)) || st.iter == outer {
            let j = tasks.mean_test_return(&test_ctx, st, cfg, eval_seed.child(st.iter as u64))?;
            rows.push(merpo_row(st, j));
        }
        Ok(())
    };
    train_from(&contexts, state, cfg, root.named("merpo"), &mut observer)?;
    Ok(rows)
}

/// One [`MERPO_COLUMNS`] row.
pub fn merpo_row(st: &MetaState, j: f64) -> Vec<f64> {
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    vec![
        st.iter as f64,
        j,
        mean(&st.alpha_per_task),
        mean(&st.beta_per_task),
        mean(&st.lambda_per_task),
    ]
}

/// MerPO with the model branch switched off: data-only backups and `rho`
/// taken at dataset states.
pub fn no_model_config(cfg: &MerpoConfig) -> MerpoConfig {
    MerpoConfig {
        rac: RacConfig {
            f: NO_MODEL_F,
            rho_source: RhoSource::DataStates,
            ..cfg.rac.clone()
        },
        ..cfg.clone()
    }
}

/// The no-model ablation as a run record.
pub fn no_model_ablation(cfg: &ExperimentConfig, seed: u64) -> RunRecord {
    let run = || -> Result<Vec<Vec<f64>>> {
        let tasks = MetaTaskSet::build(cfg, seed, None)?;
        merpo_run(&tasks, &no_model_config(&cfg.merpo), cfg.eval_every, seed)
    };
    RunRecord::from_rows(cfg, "no_model", seed, &MERPO_COLUMNS, 1, run())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SuiteKind {
    /// COMBO (alpha = 1), COMBO-3 (alpha = 0) and RAC on single tasks.
    RacComparison,
    AlphaSweep,
    /// MerPO with fixed alpha against MerPO with adaptive alpha.
    MerpoAdaptive,
    /// MerPO against the meta-only baseline (alpha = 0) and the no-model run.
    Ablations,
    /// MerPO trained and tested on each data quality separately.
    DataQuality,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub suite: SuiteKind,
    pub seeds: Vec<u64>,
    /// Relative paths are resolved against `$MERPO_OUTPUT_ROOT` when set.
    pub output_dir: PathBuf,
    pub scenario: ScenarioConfig,
    pub n_train_tasks: usize,
    pub n_test_tasks: usize,
    pub test_qualities: Vec<BehaviorQuality>,
    pub alphas: Vec<f64>,
    pub rac_iters: usize,
    pub eval_every: usize,
    pub merpo: MerpoConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            suite: SuiteKind::RacComparison,
            seeds: (0..20).collect(),
            output_dir: PathBuf::from("results"),
            scenario: ScenarioConfig::default(),
            n_train_tasks: 8,
            n_test_tasks: 4,
            test_qualities: vec![BehaviorQuality::Random, BehaviorQuality::Medium, BehaviorQuality::Expert],
            alphas: vec![0.0, 0.4, 0.7, 1.0],
            rac_iters: 40,
            eval_every: 5,
            merpo: MerpoConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| MerpoError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn read_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_toml(&std::fs::read_to_string(path).map_err(|e| crate::error::io_at(path, e))?)
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.merpo.validate()?;
        let bad = |m: &str| Err(MerpoError::Config(m.to_string()));
        if self.alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return bad("alphas must lie in [0, 1]");
        }
        if matches!(self.suite, SuiteKind::MerpoAdaptive | SuiteKind::Ablations | SuiteKind::DataQuality)
            && (self.n_train_tasks == 0 || self.n_test_tasks == 0 || self.test_qualities.is_empty())
        {
            return bad("meta-training suites need training tasks, test tasks and test qualities");
        }
        if self.suite == SuiteKind::AlphaSweep && self.alphas.is_empty() {
            return bad("alpha_sweep needs at least one alpha");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form; key order in the source file does
    /// not matter.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => PathBuf::from(root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub experiment: String,
    pub seed: u64,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    /// Column holding the headline metric.
    pub metric: usize,
    pub error: Option<String>,
}

impl RunRecord {
    fn from_rows(cfg: &ExperimentConfig, experiment: &str, seed: u64, columns: &[&str], metric: usize, rows: Result<Vec<Vec<f64>>>) -> Self {
        match rows {
            Ok(rows) => Self {
                rows,
                error: None,
                ..Self::failed(cfg, experiment, seed, columns, metric, String::new())
            },
            Err(e) => Self::failed(cfg, experiment, seed, columns, metric, e.to_string()),
        }
    }

    fn failed(cfg: &ExperimentConfig, experiment: &str, seed: u64, columns: &[&str], metric: usize, error: String) -> Self {
        Self {
            config_hash: cfg.hash(),
            experiment: experiment.to_string(),
            seed,
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            metric,
            error: Some(error),
        }
    }

    /// Headline metric of the last row, or `None` for a failed run.
    pub fn final_value(&self) -> Option<f64> {
        self.rows.last().map(|r| r[self.metric])
    }

    pub fn file_name(&self) -> String {
        format!("{}_seed{}.csv", self.experiment, self.seed)
    }

    pub fn to_csv(&self) -> String {
        let mut out = csv_preamble();
        if !self.config_hash.is_empty() {
            let _ = writeln!(out, "# config_hash {}\n# seed {}", self.config_hash, self.seed);
        }
        out.push_str(&self.columns.join(","));
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(i, v)| if i == 0 { format!("{}", *v as u64) } else { fmt_real(*v) })
                .collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

fn csv_preamble() -> String {
    format!("# merpo csv schema {CSV_SCHEMA_VERSION}\n")
}

fn rac_rows(trace: &[RacTraceRow]) -> Vec<Vec<f64>> {
    trace
        .iter()
        .map(|r| vec![r.iter as f64, r.j_true, r.nu, r.div_beta, r.div_c, r.beta, r.lambda])
        .collect()
}

/// Per-iteration CSV text for a RAC trace, one row per iteration.
pub fn rac_trace_csv(trace: &[RacTraceRow]) -> String {
    let rec = RunRecord {
        config_hash: String::new(),
        experiment: String::new(),
        seed: 0,
        columns: RAC_COLUMNS.iter().map(|c| c.to_string()).collect(),
        rows: rac_rows(trace),
        metric: 1,
        error: None,
    };
    rec.to_csv()
}

/// The (experiment, alpha) pairs a single-task suite runs.
fn rac_experiments(cfg: &ExperimentConfig) -> Vec<(String, f64)> {
    match cfg.suite {
        SuiteKind::RacComparison => vec![
            ("combo".into(), 1.0),
            ("combo3".into(), 0.0),
            ("rac".into(), cfg.merpo.alpha_init),
        ],
        _ => cfg.alphas.iter().map(|a| (format!("alpha{a}"), *a)).collect(),
    }
}

fn meta_experiments(cfg: &ExperimentConfig) -> Vec<(String, MerpoConfig, Option<BehaviorQuality>)> {
    let base = MerpoConfig {
        adaptive_alpha: false,
        ..cfg.merpo.clone()
    };
    match cfg.suite {
        SuiteKind::MerpoAdaptive => vec![
            ("merpo".into(), base.clone(), None),
            ("merpo_adp".into(), MerpoConfig { adaptive_alpha: true, ..base }, None),
        ],
        SuiteKind::Ablations => vec![
            ("merpo".into(), base.clone(), None),
            ("meta_only".into(), meta_only_config(&base), None),
            ("no_model".into(), no_model_config(&base), None),
        ],
        SuiteKind::DataQuality => cfg
            .scenario
            .data_qualities
            .iter()
            .map(|q| (format!("merpo_{q}"), base.clone(), Some(*q)))
            .collect(),
        _ => Vec::new(),
    }
}

/// Meta-only regularization: alpha fixed at 0.
pub fn meta_only_config(cfg: &MerpoConfig) -> MerpoConfig {
    MerpoConfig {
        adaptive_alpha: false,
        alpha_init: 0.0,
        ..cfg.clone()
    }
}

/// Run every (experiment, seed) cell. A failing cell is recorded with its
/// error and the rest of the suite continues.
pub fn run_suite(cfg: &ExperimentConfig) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    if cfg.seeds.is_empty() {
        return Ok(Vec::new());
    }
    match cfg.suite {
        SuiteKind::RacComparison | SuiteKind::AlphaSweep => {
            let scenario = PreparedScenario::new(&cfg.scenario, &cfg.merpo.model)?;
            let exps = rac_experiments(cfg);
            let per_seed: Vec<Vec<RunRecord>> = cfg
                .seeds
                .par_iter()
                .map(|&seed| match scenario.instance(seed) {
                    Ok(inst) => exps
                        .iter()
                        .map(|(name, alpha)| {
                            let rac = RacConfig { alpha: *alpha, ..cfg.merpo.rac.clone() };
                            let rows = inst.rac_trace(&rac, cfg.rac_iters, seed).map(|t| rac_rows(&t));
                            RunRecord::from_rows(cfg, name, seed, &RAC_COLUMNS, 1, rows)
                        })
                        .collect(),
                    Err(e) => exps
                        .iter()
                        .map(|(name, _)| RunRecord::failed(cfg, name, seed, &RAC_COLUMNS, 1, e.to_string()))
                        .collect(),
                })
                .collect();
            Ok(regroup(per_seed, exps.len()))
        }
        SuiteKind::MerpoAdaptive | SuiteKind::Ablations | SuiteKind::DataQuality => {
            let exps = meta_experiments(cfg);
            let cells: Vec<(usize, u64)> = (0..exps.len()).flat_map(|e| cfg.seeds.iter().map(move |&s| (e, s))).collect();
            let records = cells
                .par_iter()
                .map(|&(e, seed)| {
                    let (name, mcfg, quality) = &exps[e];
                    let rows = MetaTaskSet::build(cfg, seed, *quality).and_then(|t| merpo_run(&t, mcfg, cfg.eval_every, seed));
                    RunRecord::from_rows(cfg, name, seed, &MERPO_COLUMNS, 1, rows)
                })
                .collect();
            Ok(records)
        }
    }
}

/// Seed-major records into experiment-major order.
fn regroup(per_seed: Vec<Vec<RunRecord>>, n_exp: usize) -> Vec<RunRecord> {
    let mut out = Vec::with_capacity(per_seed.len() * n_exp);
    for e in 0..n_exp {
        for recs in &per_seed {
            out.push(recs[e].clone());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub experiment: String,
    pub n: usize,
    pub failed: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

/// Per-iteration mean and std of the headline metric for one experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Series {
    pub experiment: String,
    pub points: Vec<(f64, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    pub series: Vec<Series>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean, population std, min and max of each experiment's final metric over
/// seeds, plus per-iteration series. When several experiments share the
/// `merpo_` prefix (one per data quality), a `best_quality` row holds the
/// largest of their means.
pub fn summarize(records: &[RunRecord]) -> Summary {
    let mut groups: BTreeMap<&str, Vec<&RunRecord>> = BTreeMap::new();
    let mut order = Vec::new();
    for r in records {
        if !groups.contains_key(r.experiment.as_str()) {
            order.push(r.experiment.as_str());
        }
        groups.entry(&r.experiment).or_default().push(r);
    }
    let mut rows = Vec::new();
    let mut series = Vec::new();
    for name in order {
        let recs = &groups[name];
        let finals: Vec<f64> = recs.iter().filter_map(|r| r.final_value()).collect();
        let (mean, std) = mean_std(&finals);
        rows.push(SummaryRow {
            experiment: name.to_string(),
            n: finals.len(),
            failed: recs.len() - finals.len(),
            mean,
            std,
            min: finals.iter().copied().fold(f64::INFINITY, f64::min),
            max: finals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        });
        let mut by_iter: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
        for r in recs.iter().filter(|r| r.error.is_none()) {
            for row in &r.rows {
                by_iter.entry(row[0] as u64).or_default().push(row[r.metric]);
            }
        }
        series.push(Series {
            experiment: name.to_string(),
            points: by_iter
                .into_iter()
                .map(|(it, v)| {
                    let (m, s) = mean_std(&v);
                    (it as f64, m, s)
                })
                .collect(),
        });
    }
    let quality_rows: Vec<&SummaryRow> = rows.iter().filter(|r| r.experiment.starts_with("merpo_") && r.experiment != "merpo_adp").collect();
    if quality_rows.len() > 1 {
        let best = quality_rows.iter().max_by(|a, b| a.mean.total_cmp(&b.mean)).expect("non-empty");
        rows.push(SummaryRow {
            experiment: "best_quality".into(),
            ..(*best).clone()
        });
    }
    Summary { rows, series }
}

impl Summary {
    pub fn to_csv(&self) -> String {
        let mut out = csv_preamble();
        out.push_str("experiment,n,failed,mean,std,min,max\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.experiment,
                r.n,
                r.failed,
                fmt_real(r.mean),
                fmt_real(r.std),
                fmt_real(r.min),
                fmt_real(r.max)
            );
        }
        out
    }

    /// Plot data: x = iteration, y = mean, band = +-std.
    pub fn plot_csv(&self) -> String {
        let mut out = csv_preamble();
        out.push_str("experiment,iter,mean,std\n");
        for s in &self.series {
            for (it, m, sd) in &s.points {
                let _ = writeln!(out, "{},{},{},{}", s.experiment, *it as u64, fmt_real(*m), fmt_real(*sd));
            }
        }
        out
    }
}

/// Write one CSV per cell, `summary.csv` and `plot_data.csv` into `dir`.
pub fn write_outputs(dir: &Path, records: &[RunRecord]) -> Result<Summary> {
    std::fs::create_dir_all(dir)?;
    for r in records {
        std::fs::write(dir.join(r.file_name()), r.to_csv())?;
        if let Some(e) = &r.error {
            std::fs::write(dir.join(r.file_name().replace(".csv", ".error.txt")), e)?;
        }
    }
    let summary = summarize(records);
    std::fs::write(dir.join("summary.csv"), summary.to_csv())?;
    std::fs::write(dir.join("plot_data.csv"), summary.plot_csv())?;
    Ok(summary)
}

/// Read the cell CSVs written by [`write_outputs`] back into records.
pub fn read_records(dir: &Path) -> Result<Vec<RunRecord>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
            name.ends_with(".csv") && name.contains("_seed")
        })
        .collect();
    paths.sort();
    paths.iter().map(|p| parse_record(p)).collect()
}

fn parse_record(path: &Path) -> Result<RunRecord> {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    let (experiment, seed) = stem
        .rsplit_once("_seed")
        .and_then(|(e, s)| s.parse().ok().map(|s| (e.to_string(), s)))
        .ok_or_else(|| MerpoError::Parse { line: 0, msg: format!("bad cell file name {stem}") })?;
    let text = std::fs::read_to_string(path).map_err(|e| crate::error::io_at(path, e))?;
    let config_hash = text
        .lines()
        .find_map(|l| l.strip_prefix("# config_hash "))
        .unwrap_or_default()
        .to_string();
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.starts_with('#') && !l.is_empty());
    let (_, header) = lines.next().ok_or_else(|| MerpoError::Parse { line: 1, msg: "empty CSV".into() })?;
    let columns: Vec<String> = header.split(',').map(str::to_string).collect();
    let metric = columns
        .iter()
        .position(|c| c == "J_true" || c == "mean_test_return")
        .ok_or_else(|| MerpoError::Parse { line: 1, msg: "no metric column".into() })?;
    let mut rows = Vec::new();
    for (ln, line) in lines {
        let row: Vec<f64> = line
            .split(',')
            .map(|x| x.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| MerpoError::Parse { line: ln + 1, msg: "bad number".into() })?;
        if row.len() != columns.len() {
            return Err(MerpoError::Parse { line: ln + 1, msg: "wrong column count".into() });
        }
        rows.push(row);
    }
    let error_path = path.with_file_name(format!("{stem}.error.txt"));
    let error = std::fs::read_to_string(&error_path).ok();
    Ok(RunRecord {
        config_hash,
        experiment,
        seed,
        columns,
        rows,
        metric,
        error,
    })
}
