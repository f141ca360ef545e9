//! Meta-training across tasks: per-task RAC inner loops, the meta-policy and
//! meta-Q updates, per-task adaptive `alpha`, and adaptation to a new task.
//!
//! Nothing here sees a true task MDP. Returns are measured by the caller
//! through the observer passed to [`train_merpo`].

use ndarray::Array2;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MerpoError, Result};
use crate::mdp::{log_prob_row, QTable, StochasticPolicy};
use crate::model::{MetaModelParams, ModelConfig};
use crate::rac::{divergences, rac_iterations, PolicyEvaluator, RacConfig, RacState, RacTraceRow, TaskContext};
use crate::rng::SeedStream;
use crate::tasks::{OfflineDataset, TaskShape};
use crate::textio::{self, Document};

const ARMIJO: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MerpoConfig {
    pub task_batch_size: usize,
    /// RAC iterations per task per outer iteration.
    pub inner_steps: usize,
    pub outer_iters: usize,
    pub outer_lr: f64,
    pub meta_q_lr: f64,
    pub adaptive_alpha: bool,
    pub alpha_init: f64,
    pub alpha_lr: f64,
    pub alpha_bounds: (f64, f64),
    /// Start every inner loop from `q_meta` instead of zeros.
    pub init_from_q_meta: bool,
    /// RAC iterations when adapting to a new task.
    pub adapt_steps: usize,
    pub model: ModelConfig,
    pub rac: RacConfig,
}

impl Default for MerpoConfig {
    fn default() -> Self {
        Self {
            task_batch_size: 4,
            inner_steps: 10,
            outer_iters: 30,
            outer_lr: 1.0,
            meta_q_lr: 0.5,
            adaptive_alpha: false,
            alpha_init: 0.4,
            alpha_lr: 1e-4,
            alpha_bounds: (0.1, 0.5),
            init_from_q_meta: true,
            adapt_steps: 100,
            model: ModelConfig::default(),
            rac: RacConfig::default(),
        }
    }
}

impl MerpoConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.alpha_bounds;
        let bad = |m: &str| Err(MerpoError::Config(m.to_string()));
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
            return bad("alpha_bounds must be an interval inside [0, 1]");
        }
        if self.task_batch_size == 0 {
            return bad("task_batch_size must be positive");
        }
        if !(self.outer_lr > 0.0) || !(0.0..=1.0).contains(&self.meta_q_lr) {
            return bad("outer_lr must be positive and meta_q_lr in [0, 1]");
        }
        if !(self.alpha_lr >= 0.0) || !(0.0..=1.0).contains(&self.alpha_init) {
            return bad("alpha_lr must be non-negative and alpha_init in [0, 1]");
        }
        self.rac.validate()
    }

    /// `alpha_init` projected into the bounds when alpha is adaptive.
    pub fn starting_alpha(&self) -> f64 {
        if self.adaptive_alpha {
            self.alpha_init.clamp(self.alpha_bounds.0, self.alpha_bounds.1)
        } else {
            self.alpha_init
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaState {
    pub pi_c: StochasticPolicy,
    pub q_meta: QTable,
    pub alpha_per_task: Vec<f64>,
    pub beta_per_task: Vec<f64>,
    pub lambda_per_task: Vec<f64>,
    pub iter: usize,
}

impl MetaState {
    pub fn new(shape: &TaskShape, n_tasks: usize, cfg: &MerpoConfig) -> Self {
        Self {
            pi_c: StochasticPolicy::uniform(shape.n_states, shape.n_actions),
            q_meta: QTable::zeros(shape.n_states, shape.n_actions),
            alpha_per_task: vec![cfg.starting_alpha(); n_tasks],
            beta_per_task: vec![cfg.rac.beta; n_tasks],
            lambda_per_task: vec![cfg.rac.lambda; n_tasks],
            iter: 0,
        }
    }

    pub fn to_doc(&self) -> Document {
        let (s, a) = self.pi_c.probs().dim();
        let n = self.alpha_per_task.len();
        let mut doc = Document::new("merpo-meta-state");
        doc.scalar("shape", format!("{s} {a}"))
            .scalar("iter", self.iter)
            .table("pi_c_logits", s, a, textio::flat(self.pi_c.logits()))
            .table("q_meta", s, a, textio::flat(&self.q_meta.values))
            .table("alpha", 1, n, self.alpha_per_task.clone())
            .table("beta", 1, n, self.beta_per_task.clone())
            .table("lambda", 1, n, self.lambda_per_task.clone());
        doc
    }

    pub fn from_doc(doc: &Document) -> Result<Self> {
        doc.expect_kind("merpo-meta-state")?;
        let (s, a) = textio::shape(doc)?;
        let row = |name: &str| -> Result<Vec<f64>> {
            let (r, _, v) = doc.get_table(name)?;
            if r != 1 {
                return Err(MerpoError::Parse { line: 0, msg: format!("table {name} must have one row") });
            }
            Ok(v.to_vec())
        };
        let state = Self {
            pi_c: StochasticPolicy::from_logits(textio::table2(doc, "pi_c_logits", s, a)?)?,
            q_meta: QTable::new(textio::table2(doc, "q_meta", s, a)?),
            alpha_per_task: row("alpha")?,
            beta_per_task: row("beta")?,
            lambda_per_task: row("lambda")?,
            iter: doc.get_parsed("iter")?,
        };
        let n = state.alpha_per_task.len();
        if state.beta_per_task.len() != n || state.lambda_per_task.len() != n {
            return Err(MerpoError::Parse { line: 0, msg: "per-task tables differ in length".into() });
        }
        Ok(state)
    }
}

/// What one task hands back to the meta step after its inner loop.
#[derive(Debug, Clone)]
pub struct TaskResult {
    pub task: usize,
    pub policy: StochasticPolicy,
    pub q: QTable,
    pub rho_state: ndarray::Array1<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub div_beta: f64,
    pub div_c: f64,
}

/// Batch mean of `lambda (1 - alpha) sum_s rho(s) KL(pi_n(s) || pi_c(s))`.
pub fn meta_policy_objective(pi_c: &StochasticPolicy, results: &[TaskResult]) -> f64 {
    let mut total = 0.0;
    for r in results {
        let w = r.lambda * (1.0 - r.alpha);
        if w == 0.0 {
            continue;
        }
        for s in 0..pi_c.n_states() {
            if r.rho_state[s] == 0.0 {
                continue;
            }
            let lp = log_prob_row(&r.policy, s);
            let lc = log_prob_row(pi_c, s);
            let kl: f64 = (0..pi_c.n_actions())
                .map(|a| {
                    let p = r.policy.prob(s, a);
                    if p > 0.0 {
                        p * (lp[a] - lc[a])
                    } else {
                        0.0
                    }
                })
                .sum();
            total += w * r.rho_state[s] * kl;
        }
    }
    total / results.len() as f64
}

/// Gradient of [`meta_policy_objective`] with respect to the logits of `pi_c`.
pub fn meta_policy_gradient(pi_c: &StochasticPolicy, results: &[TaskResult]) -> Array2<f64> {
    let (ns, na) = pi_c.probs().dim();
    let mut g = Array2::zeros((ns, na));
    for r in results {
        let w = r.lambda * (1.0 - r.alpha);
        for s in 0..ns {
            let ws = w * r.rho_state[s];
            for a in 0..na {
                g[[s, a]] += ws * (pi_c.prob(s, a) - r.policy.prob(s, a));
            }
        }
    }
    g / results.len() as f64
}

/// One natural-gradient step on the meta-policy logits: for each state the
/// direction is `(p_bar - pi_c) / pi_c`, where `p_bar` is the weighted average
/// of the task policies, so a unit step is a Newton step on the KL. The step
/// is halved until it decreases the objective.
pub fn meta_policy_step(pi_c: &StochasticPolicy, results: &[TaskResult], lr: f64) -> Result<StochasticPolicy> {
    if results.is_empty() {
        return Err(MerpoError::InvalidArgument("meta step needs at least one task result".into()));
    }
    let (ns, na) = pi_c.probs().dim();
    let grad = meta_policy_gradient(pi_c, results);
    let mut dir = Array2::zeros((ns, na));
    let mut slope = 0.0;
    for s in 0..ns {
        let w: f64 = results.iter().map(|r| r.lambda * (1.0 - r.alpha) * r.rho_state[s]).sum::<f64>() / results.len() as f64;
        if w <= 0.0 {
            continue;
        }
        for a in 0..na {
            let d = -grad[[s, a]] / (w * pi_c.prob(s, a));
            dir[[s, a]] = if d.is_finite() { d } else { -grad[[s, a]] / w };
        }
    }
    for (d, g) in dir.iter().zip(&grad) {
        slope += d * g;
    }
    if slope >= 0.0 {
        return Ok(pi_c.clone());
    }
    let base = meta_policy_objective(pi_c, results);
    let mut step = lr;
    for _ in 0..MAX_HALVINGS {
        let cand = StochasticPolicy::from_logits(pi_c.logits() + &(&dir * step))?;
        let val = meta_policy_objective(&cand, results);
        if val.is_finite() && val <= base + ARMIJO * step * slope {
            return Ok(cand);
        }
        step *= 0.5;
    }
    Ok(pi_c.clone())
}

/// `q_meta - xi (q_meta - mean(task_qs))`.
pub fn meta_q_step(q_meta: &QTable, task_qs: &[QTable], xi: f64) -> Result<QTable> {
    if task_qs.is_empty() {
        return Err(MerpoError::InvalidArgument("meta-Q step needs at least one task Q".into()));
    }
    let mut mean = Array2::<f64>::zeros(q_meta.values.dim());
    for q in task_qs {
        if q.values.dim() != mean.dim() {
            return Err(MerpoError::ShapeMismatch("task Q does not match meta-Q".into()));
        }
        mean += &q.values;
    }
    mean /= task_qs.len() as f64;
    Ok(QTable::new(&q_meta.values - &((&q_meta.values - &mean) * xi)))
}

/// One clipped descent step on `(1 - alpha)(div_beta - div_c)`.
pub fn adapt_alpha(alpha: f64, div_beta: f64, div_c: f64, lr: f64, bounds: (f64, f64)) -> f64 {
    (alpha + lr * (div_beta - div_c)).clamp(bounds.0, bounds.1)
}

/// Called after every outer iteration with the updated state.
pub trait MetaObserver {
    fn after_iteration(&mut self, state: &MetaState, results: &[TaskResult]) -> Result<()>;
}

impl<F: FnMut(&MetaState, &[TaskResult]) -> Result<()>> MetaObserver for F {
    fn after_iteration(&mut self, state: &MetaState, results: &[TaskResult]) -> Result<()> {
        self(state, results)
    }
}

/// Adapt a model for every training task from the meta-model.
pub fn task_contexts(
    datasets: &[OfflineDataset],
    shape: &TaskShape,
    meta_model: &MetaModelParams,
    model_cfg: &ModelConfig,
    seed: SeedStream,
) -> Result<Vec<TaskContext>> {
    datasets
        .par_iter()
        .enumerate()
        .map(|(n, d)| {
            TaskContext::fit(d, shape, meta_model, model_cfg, seed.child(n as u64)).map_err(|e| MerpoError::Task {
                task: n,
                source: Box::new(e),
            })
        })
        .collect()
}

fn inner_loop(
    ctx: &TaskContext,
    state: &MetaState,
    n: usize,
    cfg: &MerpoConfig,
    seed: SeedStream,
) -> Result<TaskResult> {
    let alpha = state.alpha_per_task[n];
    let rac_cfg = RacConfig { alpha, ..cfg.rac.clone() };
    let q0 = if cfg.init_from_q_meta {
        state.q_meta.clone()
    } else {
        QTable::zeros(ctx.shape.n_states, ctx.shape.n_actions)
    };
    let mut start = RacState::new(state.pi_c.clone(), q0, &rac_cfg);
    start.beta = state.beta_per_task[n];
    start.lambda = state.lambda_per_task[n];
    let mut trace = Vec::new();
    let out = rac_iterations(ctx, &state.pi_c, start, &rac_cfg, cfg.inner_steps, seed, None, &mut trace)?;
    let rho_state = ctx.policy_marginal(&out.policy, &rac_cfg, &mut seed.named("rho").rng())?.state_marginal();
    let (div_beta, div_c) = divergences(&out.policy, &ctx.behavior, &state.pi_c, &rho_state, rac_cfg.variant);
    if !out.beta.is_finite() || !out.lambda.is_finite() {
        return Err(MerpoError::NonFinite("dual variables".into()));
    }
    Ok(TaskResult {
        task: n,
        policy: out.policy,
        q: out.q,
        rho_state,
        alpha,
        beta: out.beta,
        lambda: out.lambda,
        div_beta,
        div_c,
    })
}

/// Meta-train from offline datasets only. Each outer iteration draws a batch
/// of tasks without replacement (reshuffling once every task has been seen),
/// runs the inner RAC loops, then updates per-task `alpha`, the meta-policy and
/// the meta-Q in task order.
pub fn train_merpo(
    datasets: &[OfflineDataset],
    shape: &TaskShape,
    meta_model: &MetaModelParams,
    cfg: &MerpoConfig,
    seed: SeedStream,
    observer: &mut dyn MetaObserver,
) -> Result<MetaState> {
    cfg.validate()?;
    if datasets.is_empty() {
        return Err(MerpoError::InvalidArgument("no training tasks".into()));
    }
    let contexts = task_contexts(datasets, shape, meta_model, &cfg.model, seed.named("models"))?;
    let state = MetaState::new(shape, datasets.len(), cfg);
    train_from(&contexts, state, cfg, seed, observer)
}

/// [`train_merpo`] on already adapted task contexts, continuing from `state`.
pub fn train_from(
    contexts: &[TaskContext],
    mut state: MetaState,
    cfg: &MerpoConfig,
    seed: SeedStream,
    observer: &mut dyn MetaObserver,
) -> Result<MetaState> {
    cfg.validate()?;
    let n_tasks = contexts.len();
    if state.alpha_per_task.len() != n_tasks {
        return Err(MerpoError::ShapeMismatch("meta state has a different task count".into()));
    }
    let batch_size = cfg.task_batch_size.min(n_tasks);
    let mut order: Vec<usize> = Vec::new();
    let mut shuffle_rng = seed.named("batches").rng();
    for _ in 0..cfg.outer_iters {
        let k = state.iter;
        let mut batch = Vec::with_capacity(batch_size);
        let mut deferred = Vec::new();
        while batch.len() < batch_size {
            if order.is_empty() {
                order = (0..n_tasks).collect();
                order.shuffle(&mut shuffle_rng);
            }
            let n = order.pop().expect("refilled above");
            if batch.contains(&n) {
                deferred.push(n);
            } else {
                batch.push(n);
            }
        }
        order.extend(deferred.into_iter().rev());
        let iter_seed = seed.named("inner").child(k as u64);
        let results: Vec<TaskResult> = batch
            .par_iter()
            .map(|&n| {
                inner_loop(&contexts[n], &state, n, cfg, iter_seed.child(n as u64))
                    .map_err(|e| MerpoError::Task { task: n, source: Box::new(e) })
            })
            .collect::<Result<_>>()?;
        for r in &results {
            state.beta_per_task[r.task] = r.beta;
            state.lambda_per_task[r.task] = r.lambda;
            if cfg.adaptive_alpha {
                state.alpha_per_task[r.task] = adapt_alpha(r.alpha, r.div_beta, r.div_c, cfg.alpha_lr, cfg.alpha_bounds);
            }
        }
        state.pi_c = meta_policy_step(&state.pi_c, &results, cfg.outer_lr)?;
        let qs: Vec<QTable> = results.iter().map(|r| r.q.clone()).collect();
        state.q_meta = meta_q_step(&state.q_meta, &qs, cfg.meta_q_lr)?;
        state.iter += 1;
        observer.after_iteration(&state, &results)?;
    }
    Ok(state)
}

/// Adapt to a new task from its dataset: fit the model from the meta-model,
/// then run `steps` RAC iterations starting from the meta-policy and meta-Q.
/// With `adaptive_alpha` the task's alpha is updated after every iteration.
pub fn adapt_new_task(
    state: &MetaState,
    meta_model: &MetaModelParams,
    data: &OfflineDataset,
    shape: &TaskShape,
    cfg: &MerpoConfig,
    steps: usize,
    seed: SeedStream,
    evaluator: Option<&dyn PolicyEvaluator>,
    trace: &mut Vec<RacTraceRow>,
) -> Result<RacState> {
    cfg.validate()?;
    let ctx = TaskContext::fit(data, shape, meta_model, &cfg.model, seed.named("model"))?;
    adapt_in_context(&ctx, state, cfg, steps, seed, evaluator, trace)
}

/// [`adapt_new_task`] with an already fitted task context.
pub fn adapt_in_context(
    ctx: &TaskContext,
    state: &MetaState,
    cfg: &MerpoConfig,
    steps: usize,
    seed: SeedStream,
    evaluator: Option<&dyn PolicyEvaluator>,
    trace: &mut Vec<RacTraceRow>,
) -> Result<RacState> {
    if !state.pi_c.same_shape(&ctx.behavior.floored_policy()) {
        return Err(MerpoError::ShapeMismatch("meta-policy does not match task".into()));
    }
    let mut alpha = cfg.starting_alpha();
    let rac_cfg = RacConfig { alpha, ..cfg.rac.clone() };
    let q0 = if cfg.init_from_q_meta {
        state.q_meta.clone()
    } else {
        QTable::zeros(ctx.shape.n_states, ctx.shape.n_actions)
    };
    let mut current = RacState::new(state.pi_c.clone(), q0, &rac_cfg);
    let seed = seed.named("adapt");
    if !cfg.adaptive_alpha {
        return rac_iterations(ctx, &state.pi_c, current, &rac_cfg, steps, seed, evaluator, trace);
    }
    for k in 0..steps {
        let step_cfg = RacConfig { alpha, ..cfg.rac.clone() };
        let mut rows = Vec::new();
        current = rac_iterations(ctx, &state.pi_c, current, &step_cfg, 1, seed.child(k as u64), evaluator, &mut rows)?;
        for mut row in rows {
            row.iter = k;
            alpha = adapt_alpha(alpha, row.div_beta, row.div_c, cfg.alpha_lr, cfg.alpha_bounds);
            trace.push(row);
        }
    }
    Ok(current)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::state_tv;
    use crate::model::ModelParams;
    use crate::tasks::{collect_dataset, make_behavior_policy, sample_tasks, BehaviorQuality, FamilyKind, TaskFamily};
    use ndarray::Array1;
    use proptest::prelude::*;

    fn result(policy: StochasticPolicy, rho: Array1<f64>, alpha: f64, lambda: f64) -> TaskResult {
        let (s, a) = policy.probs().dim();
        TaskResult {
            task: 0,
            policy,
            q: QTable::zeros(s, a),
            rho_state: rho,
            alpha,
            beta: 0.0,
            lambda,
            div_beta: 0.0,
            div_c: 0.0,
        }
    }

    fn random_policy(seed: u64, s: usize, a: usize, scale: f64) -> StochasticPolicy {
        use rand_distr::{Distribution, Normal};
        let mut rng = SeedStream::new(seed).rng();
        let n = Normal::new(0.0, scale).unwrap();
        StochasticPolicy::from_logits(Array2::from_shape_fn((s, a), |_| n.sample(&mut rng))).unwrap()
    }

    fn max_state_tv(p: &StochasticPolicy, q: &StochasticPolicy) -> f64 {
        (0..p.n_states()).map(|s| state_tv(p, q, s)).fold(0.0, f64::max)
    }

    #[test]
    fn meta_step_is_still_at_task_policy() {
        let pc = random_policy(1, 4, 3, 1.0);
        let rs = vec![result(pc.clone(), Array1::from_elem(4, 0.25), 0.4, 5.0); 3];
        let next = meta_policy_step(&pc, &rs, 1.0).unwrap();
        assert!(next.probs().iter().zip(pc.probs()).all(|(x, y)| (x - y).abs() <= 1e-12));
    }

    #[test]
    fn repeated_meta_steps_reach_single_task_policy() {
        let target = random_policy(2, 5, 4, 1.5);
        let rho = Array1::from(vec![0.4, 0.3, 0.2, 0.05, 0.05]);
        let rs = vec![result(target.clone(), rho, 0.4, 0.3)];
        let mut pc = StochasticPolicy::uniform(5, 4);
        for _ in 0..200 {
            pc = meta_policy_step(&pc, &rs, 1.0).unwrap();
        }
        assert!(max_state_tv(&pc, &target) < 1e-8);
    }

    #[test]
    fn two_symmetric_tasks_average() {
        let p1 = StochasticPolicy::from_probs(&ndarray::array![[0.7, 0.2, 0.1], [0.1, 0.1, 0.8]]).unwrap();
        let p2 = StochasticPolicy::from_probs(&ndarray::array![[0.1, 0.2, 0.7], [0.8, 0.1, 0.1]]).unwrap();
        let rho = Array1::from(vec![0.5, 0.5]);
        let rs = vec![result(p1.clone(), rho.clone(), 0.4, 1.0), result(p2.clone(), rho, 0.4, 1.0)];
        let mut pc = random_policy(3, 2, 3, 1.0);
        for _ in 0..200 {
            pc = meta_policy_step(&pc, &rs, 1.0).unwrap();
        }
        let avg = (p1.probs() + p2.probs()) / 2.0;
        assert!(pc.probs().iter().zip(&avg).all(|(x, y)| (x - y).abs() < 1e-8));
    }

    #[test]
    fn alpha_one_tasks_leave_meta_policy_alone() {
        let pc = random_policy(4, 3, 2, 1.0);
        let rs = vec![result(random_policy(5, 3, 2, 1.0), Array1::from_elem(3, 1.0 / 3.0), 1.0, 5.0)];
        assert_eq!(meta_policy_step(&pc, &rs, 1.0).unwrap(), pc);
        assert!(meta_policy_step(&pc, &[], 1.0).is_err());
    }

    #[test]
    fn meta_gradient_matches_finite_differences() {
        let pc = random_policy(6, 3, 4, 1.0);
        let rs = vec![
            result(random_policy(7, 3, 4, 1.0), Array1::from(vec![0.2, 0.5, 0.3]), 0.3, 2.0),
            result(random_policy(8, 3, 4, 1.0), Array1::from(vec![0.6, 0.1, 0.3]), 0.1, 0.5),
        ];
        let g = meta_policy_gradient(&pc, &rs);
        let h = 1e-6;
        for s in 0..3 {
            for a in 0..4 {
                let mut up = pc.logits().clone();
                up[[s, a]] += h;
                let mut dn = pc.logits().clone();
                dn[[s, a]] -= h;
                let fd = (meta_policy_objective(&StochasticPolicy::from_logits(up).unwrap(), &rs)
                    - meta_policy_objective(&StochasticPolicy::from_logits(dn).unwrap(), &rs))
                    / (2.0 * h);
                assert!((fd - g[[s, a]]).abs() < 1e-8, "({s},{a}) fd {fd} vs {}", g[[s, a]]);
            }
        }
    }

    #[test]
    fn meta_q_step_cases() {
        let q0 = QTable::new(ndarray::array![[1.0, 2.0], [3.0, 4.0]]);
        let qs = vec![QTable::new(ndarray::array![[0.0, 0.0], [1.0, 1.0]]), QTable::new(ndarray::array![[2.0, 4.0], [1.0, 3.0]])];
        assert_eq!(meta_q_step(&q0, &qs, 1.0).unwrap().values, ndarray::array![[1.0, 2.0], [1.0, 2.0]]);
        assert_eq!(meta_q_step(&q0, &qs, 0.0).unwrap(), q0);
        assert_eq!(meta_q_step(&q0, &[q0.clone(), q0.clone()], 0.3).unwrap(), q0);
        assert!(meta_q_step(&q0, &[], 0.5).is_err());
    }

    #[test]
    fn adapt_alpha_cases() {
        assert_eq!(adapt_alpha(0.3, 0.2, 0.2, 0.1, (0.1, 0.5)), 0.3);
        assert!(adapt_alpha(0.3, 0.5, 0.1, 0.1, (0.1, 0.5)) > 0.3);
        assert_eq!(adapt_alpha(0.49, 10.0, 0.0, 1.0, (0.1, 0.5)), 0.5);
        assert_eq!(adapt_alpha(0.11, 0.0, 10.0, 1.0, (0.1, 0.5)), 0.1);
    }

    fn small_setup(n_tasks: usize, seed: u64) -> (Vec<OfflineDataset>, TaskShape) {
        let fam = TaskFamily::new(FamilyKind::GridworldWind, 3, (-0.3, 0.3), seed);
        let tasks = sample_tasks(&fam, n_tasks).unwrap();
        let data = tasks
            .iter()
            .enumerate()
            .map(|(i, m)| {
                let pb = make_behavior_policy(m, BehaviorQuality::Medium, 0.1).unwrap();
                collect_dataset(m, &pb, BehaviorQuality::Medium, i, 800, seed + i as u64).unwrap()
            })
            .collect();
        (data, fam.shape())
    }

    fn quick_cfg() -> MerpoConfig {
        MerpoConfig {
            task_batch_size: 2,
            inner_steps: 2,
            outer_iters: 4,
            adaptive_alpha: true,
            alpha_lr: 0.5,
            model: ModelConfig {
                adaptation_steps: 5,
                ..Default::default()
            },
            rac: RacConfig {
                improve_steps: 5,
                eval_sweeps: 200,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn zero_outer_iterations_return_the_initial_state() {
        let (data, shape) = small_setup(3, 11);
        let cfg = MerpoConfig { outer_iters: 0, ..quick_cfg() };
        let phi = ModelParams::zeros(shape.n_states, shape.n_actions);
        let st = train_merpo(&data, &shape, &phi, &cfg, SeedStream::new(1), &mut |_: &MetaState, _: &[TaskResult]| Ok(())).unwrap();
        assert_eq!(st, MetaState::new(&shape, 3, &cfg));
    }

    #[test]
    fn training_is_deterministic_and_alpha_stays_in_bounds() {
        let (data, shape) = small_setup(3, 12);
        let cfg = quick_cfg();
        let phi = ModelParams::zeros(shape.n_states, shape.n_actions);
        let mut seen = Vec::new();
        let mut observer = |st: &MetaState, rs: &[TaskResult]| {
            assert_eq!(rs.len(), 2);
            assert!(st.alpha_per_task.iter().all(|a| (0.1..=0.5).contains(a)));
            seen.push(st.iter);
            Ok(())
        };
        let a = train_merpo(&data, &shape, &phi, &cfg, SeedStream::new(5), &mut observer).unwrap();
        let b = train_merpo(&data, &shape, &phi, &cfg, SeedStream::new(5), &mut |_: &MetaState, _: &[TaskResult]| Ok(())).unwrap();
        assert_eq!(seen, vec![1, 2, 3, 4]);
        assert_eq!(a, b);
        assert_ne!(a.pi_c, StochasticPolicy::uniform(shape.n_states, shape.n_actions));
        assert!(a.alpha_per_task.iter().any(|&x| x != 0.4));
    }

    #[test]
    fn zero_adaptation_steps_return_the_meta_policy() {
        let (data, shape) = small_setup(2, 13);
        let cfg = quick_cfg();
        let mut st = MetaState::new(&shape, 2, &cfg);
        st.pi_c = random_policy(9, shape.n_states, shape.n_actions, 1.0);
        let phi = ModelParams::zeros(shape.n_states, shape.n_actions);
        let out = adapt_new_task(&st, &phi, &data[0], &shape, &cfg, 0, SeedStream::new(2), None, &mut Vec::new()).unwrap();
        assert_eq!(out.policy, st.pi_c);
    }

    #[test]
    fn batches_cover_every_task_each_epoch() {
        let (data, shape) = small_setup(5, 14);
        let cfg = MerpoConfig { task_batch_size: 2, outer_iters: 5, ..quick_cfg() };
        let phi = ModelParams::zeros(shape.n_states, shape.n_actions);
        let mut counts = vec![0; 5];
        train_merpo(&data, &shape, &phi, &cfg, SeedStream::new(3), &mut |_: &MetaState, rs: &[TaskResult]| {
            assert_ne!(rs[0].task, rs[1].task);
            for r in rs {
                counts[r.task] += 1;
            }
            Ok(())
        })
        .unwrap();
        assert_eq!(counts, vec![2; 5]);
    }

    #[test]
    fn bad_bounds_are_config_errors() {
        let cfg = MerpoConfig { alpha_bounds: (0.6, 0.5), ..Default::default() };
        assert!(matches!(cfg.validate(), Err(MerpoError::Config(_))));
    }

    #[test]
    fn meta_state_round_trips() {
        let shape = TaskShape { n_states: 3, n_actions: 2, gamma: 0.9, r_max: 1.0 };
        let mut st = MetaState::new(&shape, 4, &MerpoConfig::default());
        st.pi_c = random_policy(10, 3, 2, 2.0);
        st.q_meta = QTable::new(Array2::from_shape_fn((3, 2), |(s, a)| s as f64 / 7.0 - a as f64));
        st.lambda_per_task[2] = 0.123;
        st.iter = 17;
        let back = MetaState::from_doc(&Document::parse(&st.to_doc().render()).unwrap()).unwrap();
        assert_eq!(back, st);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn meta_step_decreases_the_objective(seed in 0u64..10_000, n in 1usize..4, lr in 0.01f64..4.0) {
            let pc = random_policy(seed, 4, 3, 1.0);
            let rs: Vec<_> = (0..n)
                .map(|k| {
                    let mut rng = SeedStream::new(seed).child(k as u64).rng();
                    let rho = Array1::from_shape_fn(4, |_| rand::Rng::random::<f64>(&mut rng) + 0.01);
                    let rho = &rho / rho.sum();
                    result(random_policy(seed * 7 + k as u64, 4, 3, 2.0), rho, 0.2 + 0.1 * k as f64, 1.0 + k as f64)
                })
                .collect();
            let next = meta_policy_step(&pc, &rs, lr).unwrap();
            let before = meta_policy_objective(&pc, &rs);
            let after = meta_policy_objective(&next, &rs);
            prop_assert!(after < before, "{after} !< {before}");
        }
    }
}
