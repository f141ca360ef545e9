//! Within-task solver: conservative evaluation over an interpolation of the
//! empirical and learnt MDPs, then policy improvement regularized toward both
//! the behavior policy and a meta-policy.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::distr::{weighted::WeightedIndex, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{MerpoError, Result};
use crate::mdp::{discounted_marginal, log_prob_row, MarginalDist, QTable, StochasticPolicy, TabularMdp};
use crate::model::{fit_ensemble, MetaModelParams, ModelConfig};
use crate::rng::SeedStream;
use crate::tasks::{induce_empirical, EmpiricalMdp, OfflineDataset, TaskShape};

/// Smallest `d_f` used as a divisor.
pub const D_F_FLOOR: f64 = 1e-12;
/// Floor on the behavior conditional inside the closed-form update.
pub const BEHAVIOR_FLOOR: f64 = 1e-10;
const EXPONENT_CLAMP: f64 = 50.0;
const DIVERGENCE_PATIENCE: usize = 50;
const ARMIJO: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImprovementVariant {
    TvTheory,
    KlPractical,
}

/// When the learnt-model marginal `rho` is recomputed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoRefresh {
    PerIteration,
    PerImprovementStep,
}

/// Where `rho` comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoSource {
    /// Discounted marginal of the policy in the learnt MDP.
    LearntModel,
    /// `rollouts` sampled model rollouts of `rollout_horizon` steps from
    /// dataset states.
    SampledRollouts { rollouts: usize },
    /// Dataset states with the policy's actions, no model at all.
    DataStates,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RacConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub f: f64,
    pub eval_sweeps: usize,
    pub eval_tol: f64,
    pub improve_steps: usize,
    /// Initial per-state step of the line search.
    pub improve_lr: f64,
    pub rollout_horizon: usize,
    pub rho_source: RhoSource,
    pub rho_refresh: RhoRefresh,
    pub auto_beta: bool,
    pub tau: f64,
    pub beta_lr: f64,
    /// Dual ascent on `log beta` instead of `beta`.
    pub log_beta: bool,
    pub auto_lambda: bool,
    pub d_target: f64,
    pub lambda_lr: f64,
    pub variant: ImprovementVariant,
    /// Q is clipped to `q_clip * r_max / (1 - gamma)`.
    pub q_clip: f64,
}

impl Default for RacConfig {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            beta: 1.0,
            lambda: 5.0,
            f: 0.5,
            eval_sweeps: 1000,
            eval_tol: 1e-8,
            improve_steps: 20,
            improve_lr: 1.0,
            rollout_horizon: 1,
            rho_source: RhoSource::LearntModel,
            rho_refresh: RhoRefresh::PerIteration,
            auto_beta: true,
            tau: 5.0,
            beta_lr: 1e-3,
            log_beta: true,
            auto_lambda: true,
            d_target: 0.05,
            lambda_lr: 1.0,
            variant: ImprovementVariant::KlPractical,
            q_clip: 10.0,
        }
    }
}

impl RacConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MerpoError::Config(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(self.f > 0.0 && self.f < 1.0) {
            return bad(format!("f {} must lie strictly inside (0, 1)", self.f));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) || !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("beta and lambda must be finite and non-negative".into());
        }
        if !(self.improve_lr > 0.0) || !(self.eval_tol > 0.0) || !(self.q_clip > 0.0) {
            return bad("improve_lr, eval_tol and q_clip must be positive".into());
        }
        if !(self.beta_lr >= 0.0) || !(self.lambda_lr >= 0.0) || !(self.d_target >= 0.0) {
            return bad("dual learning rates and d_target must be non-negative".into());
        }
        if let RhoSource::SampledRollouts { rollouts } = self.rho_source {
            if rollouts == 0 || self.rollout_horizon == 0 {
                return bad("sampled rollouts need rollouts > 0 and rollout_horizon > 0".into());
            }
        }
        Ok(())
    }
}

/// Empirical behavior conditional `pi_beta_hat(a|s)` and the state weights
/// the behavior-cloning term uses.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorRef {
    /// Rows sum to one; uniform on states without data.
    pub probs: Array2<f64>,
    pub state_weights: Array1<f64>,
}

impl BehaviorRef {
    pub fn from_dataset(data: &OfflineDataset) -> Self {
        let (ns, na) = (data.n_states(), data.n_actions());
        let mut probs = Array2::from_elem((ns, na), 1.0 / na as f64);
        for s in 0..ns {
            let n: u64 = data.count_sa().row(s).sum();
            if n > 0 {
                for a in 0..na {
                    probs[[s, a]] = data.count_sa()[[s, a]] as f64 / n as f64;
                }
            }
        }
        Self {
            probs,
            state_weights: data.state_freq(),
        }
    }

    pub fn from_policy(policy: &StochasticPolicy, state_weights: Array1<f64>) -> Self {
        Self {
            probs: policy.probs().clone(),
            state_weights,
        }
    }

    pub fn supported(&self, s: usize) -> bool {
        self.state_weights[s] > 0.0
    }

    /// Floored and renormalized, so every action has positive mass.
    pub fn floored_policy(&self) -> StochasticPolicy {
        let mut p = self.probs.mapv(|x| x.max(BEHAVIOR_FLOOR));
        for mut row in p.rows_mut() {
            let z = row.sum();
            row.mapv_inplace(|x| x / z);
        }
        StochasticPolicy::from_probs(&p).expect("normalized rows")
    }
}

/// Everything the solver knows about one task: the dataset's empirical MDP,
/// the learnt MDP and the dataset marginal.
#[derive(Debug, Clone)]
pub struct TaskContext {
    pub shape: TaskShape,
    pub empirical: EmpiricalMdp,
    pub learnt: TabularMdp,
    pub data_marginal: MarginalDist,
    pub behavior: BehaviorRef,
    start_states: Vec<usize>,
}

impl TaskContext {
    /// Fit a model ensemble from the meta-model and build the learnt MDP.
    pub fn fit(
        data: &OfflineDataset,
        shape: &TaskShape,
        meta_model: &MetaModelParams,
        model_cfg: &ModelConfig,
        seed: SeedStream,
    ) -> Result<Self> {
        let ensemble = fit_ensemble(data, meta_model, model_cfg, seed)?;
        let learnt = ensemble.learnt_mdp(shape, data.state_freq())?;
        Self::with_learnt(data, shape, learnt)
    }

    /// Use a given learnt MDP; its start distribution is replaced by the
    /// start distribution estimated from the dataset.
    pub fn with_learnt(data: &OfflineDataset, shape: &TaskShape, learnt: TabularMdp) -> Result<Self> {
        let empirical = induce_empirical(data, shape)?;
        if !learnt.same_shape(&empirical.mdp) {
            return Err(MerpoError::ShapeMismatch("learnt MDP does not match the dataset".into()));
        }
        let learnt = learnt.with_init_dist(data.start_estimate(shape.gamma))?;
        Ok(Self {
            shape: *shape,
            empirical,
            learnt,
            data_marginal: data.marginal()?,
            behavior: BehaviorRef::from_dataset(data),
            start_states: data.transitions().iter().map(|t| t.s).collect(),
        })
    }

    /// `rho` for `policy` according to `cfg.rho_source`.
    pub fn policy_marginal<R: Rng + ?Sized>(
        &self,
        policy: &StochasticPolicy,
        cfg: &RacConfig,
        rng: &mut R,
    ) -> Result<MarginalDist> {
        match cfg.rho_source {
            RhoSource::LearntModel => discounted_marginal(&self.learnt, policy),
            RhoSource::DataStates => {
                let ds = self.data_marginal.state_marginal();
                let w = Array2::from_shape_fn(policy.probs().dim(), |(s, a)| ds[s] * policy.prob(s, a));
                MarginalDist::from_weights(w)
            }
            RhoSource::SampledRollouts { rollouts } => {
                sampled_marginal(&self.learnt, policy, &self.start_states, rollouts, cfg.rollout_horizon, rng)
            }
        }
    }
}

/// Visit frequencies of `rollouts` model rollouts of `horizon` steps from
/// uniformly drawn start states.
pub fn sampled_marginal<R: Rng + ?Sized>(
    learnt: &TabularMdp,
    policy: &StochasticPolicy,
    starts: &[usize],
    rollouts: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<MarginalDist> {
    let (ns, na) = (learnt.n_states(), learnt.n_actions());
    if starts.is_empty() {
        return Err(MerpoError::InvalidArgument("no rollout start states".into()));
    }
    let action_dists: Vec<WeightedIndex<f64>> = (0..ns)
        .map(|s| WeightedIndex::new(policy.probs().row(s).iter().copied()).expect("valid policy row"))
        .collect();
    let next_dists: Vec<WeightedIndex<f64>> = (0..ns * na)
        .map(|i| {
            WeightedIndex::new(learnt.transition().slice(ndarray::s![i / na, i % na, ..]).iter().copied())
                .expect("valid transition row")
        })
        .collect();
    let mut counts = Array2::zeros((ns, na));
    for _ in 0..rollouts {
        let mut s = starts[rng.random_range(0..starts.len())];
        for _ in 0..horizon {
            let a = action_dists[s].sample(rng);
            counts[[s, a]] += 1.0;
            s = next_dists[s * na + a].sample(rng);
        }
    }
    MarginalDist::from_weights(counts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyReport {
    pub rho: MarginalDist,
    pub d: MarginalDist,
    pub d_f: MarginalDist,
    pub nu: f64,
}

/// `d_f = f d + (1 - f) rho`.
pub fn mix_marginals(d: &MarginalDist, rho: &MarginalDist, f: f64) -> Array2<f64> {
    d.dist() * f + rho.dist() * (1.0 - f)
}

/// `nu(rho, f) = E_rho[(rho - d) / d_f]`.
pub fn nu(rho: &MarginalDist, d: &MarginalDist, f: f64) -> f64 {
    let d_f = mix_marginals(d, rho, f);
    ndarray::Zip::from(rho.dist())
        .and(d.dist())
        .and(&d_f)
        .fold(0.0, |acc, &r, &dd, &m| acc + r * (r - dd) / m.max(D_F_FLOOR))
}

pub fn penalty_report(
    policy: &StochasticPolicy,
    data_marginal: &MarginalDist,
    learnt: &TabularMdp,
    f: f64,
) -> Result<PenaltyReport> {
    if !(f > 0.0 && f < 1.0) {
        return Err(MerpoError::InvalidArgument(format!("f {f} must lie strictly inside (0, 1)")));
    }
    let rho = discounted_marginal(learnt, policy)?;
    report_from(rho, data_marginal.clone(), f)
}

fn report_from(rho: MarginalDist, d: MarginalDist, f: f64) -> Result<PenaltyReport> {
    let d_f = MarginalDist::from_weights(mix_marginals(&d, &rho, f))?;
    let nu = nu(&rho, &d, f);
    Ok(PenaltyReport { rho, d, d_f, nu })
}

/// Per-pair penalty `beta (rho - d) / d_f`.
pub fn penalty_table(rho: &MarginalDist, d: &MarginalDist, f: f64, beta: f64) -> Array2<f64> {
    let d_f = mix_marginals(d, rho, f);
    ndarray::Zip::from(rho.dist())
        .and(d.dist())
        .and(&d_f)
        .map_collect(|&r, &dd, &m| beta * (r - dd) / m.max(D_F_FLOOR))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOutcome {
    pub q: QTable,
    pub sweeps: usize,
    pub residual: f64,
}

/// Conservative evaluation from `q0` with a fixed `rho`.
pub fn conservative_evaluate_from(
    policy: &StochasticPolicy,
    emp: &TabularMdp,
    learnt: &TabularMdp,
    rho: &MarginalDist,
    d: &MarginalDist,
    cfg: &RacConfig,
    q0: &QTable,
) -> Result<EvalOutcome> {
    cfg.validate()?;
    if !emp.same_shape(learnt) || q0.values.dim() != (emp.n_states(), emp.n_actions()) {
        return Err(MerpoError::ShapeMismatch("evaluation inputs differ in shape".into()));
    }
    let pen = penalty_table(rho, d, cfg.f, cfg.beta);
    let bound = cfg.q_clip * emp.q_bound();
    let f = cfg.f;
    let mut q = q0.values.clone();
    let mut b_emp = Array2::zeros(q.raw_dim());
    let mut b_learnt = Array2::zeros(q.raw_dim());
    let (mut residual, mut growing, mut sweeps) = (f64::INFINITY, 0usize, 0usize);
    while sweeps < cfg.eval_sweeps {
        let v = QTable::new(q.clone()).state_values(policy);
        emp.backup_into(&v, &mut b_emp);
        learnt.backup_into(&v, &mut b_learnt);
        let mut change = 0.0f64;
        ndarray::Zip::from(&mut q)
            .and(&b_emp)
            .and(&b_learnt)
            .and(&pen)
            .for_each(|q, &be, &bl, &p| {
                let new = (f * be + (1.0 - f) * bl - p).clamp(-bound, bound);
                change = change.max((new - *q).abs());
                *q = new;
            });
        sweeps += 1;
        if !change.is_finite() {
            return Err(MerpoError::NonFinite(format!("conservative Q at sweep {sweeps}")));
        }
        growing = if change > residual { growing + 1 } else { 0 };
        residual = change;
        if growing >= DIVERGENCE_PATIENCE {
            return Err(MerpoError::Divergence { sweep: sweeps, residual });
        }
        if residual < cfg.eval_tol {
            break;
        }
    }
    Ok(EvalOutcome {
        q: QTable::new(q),
        sweeps,
        residual,
    })
}

/// Conservative evaluation of `policy` from zero, with `rho` the policy's
/// marginal in `learnt` and `d` the marginal of the dataset behind `emp`.
pub fn conservative_evaluate(
    policy: &StochasticPolicy,
    emp: &EmpiricalMdp,
    learnt: &TabularMdp,
    cfg: &RacConfig,
) -> Result<QTable> {
    let rho = discounted_marginal(learnt, policy)?;
    let d = MarginalDist::from_weights(ndarray::Zip::from(&emp.counts).and(&emp.support).map_collect(
        |&c, &vis| if vis { c } else { 0.0 },
    ))?;
    let q0 = QTable::zeros(policy.n_states(), policy.n_actions());
    Ok(conservative_evaluate_from(policy, &emp.mdp, learnt, &rho, &d, cfg, &q0)?.q)
}

/// Inputs to one improvement call.
#[derive(Debug, Clone, Copy)]
pub struct ImproveInputs<'a> {
    pub q: &'a QTable,
    pub behavior: &'a BehaviorRef,
    pub pi_c: &'a StochasticPolicy,
    /// State weights of the Q and meta-policy terms.
    pub rho_state: &'a Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImproveOutcome {
    pub policy: StochasticPolicy,
    /// Objective before the first step and after every step.
    pub objective_trace: Vec<f64>,
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let lse = m + z.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    z.iter().map(|x| x - lse).collect()
}

struct StateTerms<'a> {
    q: ndarray::ArrayView1<'a, f64>,
    pb: ndarray::ArrayView1<'a, f64>,
    log_pc: Vec<f64>,
    rho: f64,
    d: f64,
}

/// Per-state objective of the practical variant:
/// `rho E_pi[Q] + lambda alpha d E_pb[log pi] - lambda (1 - alpha) rho KL(pi || pi_c)`.
fn kl_state_objective(t: &StateTerms, logp: &[f64], alpha: f64, lambda: f64) -> f64 {
    let (q_term, kl) = q_and_kl(t, logp);
    let mut total = t.rho * q_term;
    if alpha > 0.0 {
        let bc: f64 = t.pb.iter().zip(logp).filter(|(p, _)| **p > 0.0).map(|(p, l)| p * l).sum();
        total += lambda * alpha * t.d * bc;
    }
    total - lambda * (1.0 - alpha) * t.rho * kl
}

fn q_and_kl(t: &StateTerms, logp: &[f64]) -> (f64, f64) {
    let mut q_term = 0.0;
    let mut kl = 0.0;
    for a in 0..logp.len() {
        let p = logp[a].exp();
        q_term += p * t.q[a];
        kl += p * (logp[a] - t.log_pc[a]);
    }
    (q_term, kl)
}

/// Logit-space gradient and an ascent direction for one state. The direction
/// is the Fisher-preconditioned gradient when it is well scaled and the plain
/// gradient otherwise.
fn ascent_direction(t: &StateTerms, logp: &[f64], alpha: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let na = logp.len();
    let p: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    // Derivative in pi of the Q and meta-policy terms (constants dropped).
    let g1: Vec<f64> = (0..na)
        .map(|a| t.rho * t.q[a] - lambda * (1.0 - alpha) * t.rho * (logp[a] - t.log_pc[a]))
        .collect();
    let g1_bar: f64 = (0..na).map(|a| p[a] * g1[a]).sum();
    let w = lambda * alpha * t.d;
    let grad: Vec<f64> = (0..na)
        .map(|a| {
            let bc = if w > 0.0 { w * (t.pb[a] - p[a]) } else { 0.0 };
            p[a] * (g1[a] - g1_bar) + bc
        })
        .collect();
    let natural: Vec<f64> = (0..na)
        .map(|a| {
            let bc = if w > 0.0 { w * t.pb[a] / p[a] } else { 0.0 };
            g1[a] + bc
        })
        .collect();
    let n_bar: f64 = (0..na).map(|a| p[a] * natural[a]).sum();
    let natural: Vec<f64> = natural.iter().map(|g| g - n_bar).collect();
    if natural.iter().all(|x| x.is_finite() && x.abs() < 1e8) {
        (grad, natural)
    } else {
        let dir = grad.clone();
        (grad, dir)
    }
}

fn state_terms<'a>(inputs: &'a ImproveInputs, s: usize) -> StateTerms<'a> {
    StateTerms {
        q: inputs.q.values.row(s),
        pb: inputs.behavior.probs.row(s),
        log_pc: log_prob_row(inputs.pi_c, s),
        rho: inputs.rho_state[s],
        d: inputs.behavior.state_weights[s],
    }
}

fn check_improve(inputs: &ImproveInputs, current: &StochasticPolicy) -> Result<()> {
    let dim = current.probs().dim();
    if inputs.q.values.dim() != dim
        || inputs.behavior.probs.dim() != dim
        || inputs.pi_c.probs().dim() != dim
        || inputs.rho_state.len() != dim.0
        || inputs.behavior.state_weights.len() != dim.0
    {
        return Err(MerpoError::ShapeMismatch("improvement inputs differ in shape".into()));
    }
    if !inputs.q.is_finite() {
        return Err(MerpoError::NonFinite("Q values".into()));
    }
    Ok(())
}

/// Value of the improvement objective selected by `cfg.variant`.
pub fn improvement_objective(inputs: &ImproveInputs, policy: &StochasticPolicy, cfg: &RacConfig) -> f64 {
    (0..policy.n_states())
        .map(|s| {
            let t = state_terms(inputs, s);
            let logp = log_prob_row(policy, s);
            match cfg.variant {
                ImprovementVariant::KlPractical => kl_state_objective(&t, &logp, cfg.alpha, cfg.lambda),
                ImprovementVariant::TvTheory => {
                    let pb = inputs.behavior.floored_policy();
                    tv_state_objective(&logp, t.q.as_slice().unwrap(), &log_prob_row(&pb, s), &t.log_pc, cfg.alpha, cfg.lambda)
                }
            }
        })
        .sum()
}

/// `E_rho[Q] - lambda KL(pi || pi_c)`, the meta-regularized objective
/// without a behavior term.
pub fn meta_regularized_objective(
    q: &QTable,
    rho_state: &Array1<f64>,
    pi_c: &StochasticPolicy,
    policy: &StochasticPolicy,
    lambda: f64,
) -> f64 {
    (0..policy.n_states())
        .map(|s| {
            let t = StateTerms {
                q: q.values.row(s),
                pb: q.values.row(s),
                log_pc: log_prob_row(pi_c, s),
                rho: rho_state[s],
                d: 0.0,
            };
            let (q_term, kl) = q_and_kl(&t, &log_prob_row(policy, s));
            t.rho * q_term - lambda * t.rho * kl
        })
        .sum()
}

/// Per-state objective whose exact maximizer is the closed-form update:
/// `E_pi[Q] - lambda (alpha KL(pi || pb) + (1 - alpha) KL(pi || pi_c))`.
pub fn tv_state_objective(logp: &[f64], q: &[f64], log_pb: &[f64], log_pc: &[f64], alpha: f64, lambda: f64) -> f64 {
    let mut total = 0.0;
    for a in 0..logp.len() {
        let p = logp[a].exp();
        if p == 0.0 {
            continue;
        }
        total += p * q[a];
        if lambda > 0.0 {
            total -= lambda * p * (alpha * (logp[a] - log_pb[a]) + (1.0 - alpha) * (logp[a] - log_pc[a]));
        }
    }
    total
}

fn improve_tv(inputs: &ImproveInputs, current: &StochasticPolicy, cfg: &RacConfig) -> Result<StochasticPolicy> {
    let pb = inputs.behavior.floored_policy();
    if cfg.lambda == 0.0 {
        return Ok(StochasticPolicy::greedy(inputs.q));
    }
    let (ns, na) = current.probs().dim();
    let mut logits = Array2::zeros((ns, na));
    for s in 0..ns {
        let lpb = log_prob_row(&pb, s);
        let lpc = log_prob_row(inputs.pi_c, s);
        let e: Vec<f64> = (0..na)
            .map(|a| cfg.alpha * lpb[a] + (1.0 - cfg.alpha) * lpc[a] + inputs.q.values[[s, a]] / cfg.lambda)
            .collect();
        let m = e.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        for a in 0..na {
            logits[[s, a]] = (e[a] - m).max(-EXPONENT_CLAMP);
        }
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(MerpoError::NonFinite("closed-form policy logits".into()));
    }
    StochasticPolicy::from_logits(logits)
}

fn improve_kl(inputs: &ImproveInputs, current: &StochasticPolicy, cfg: &RacConfig) -> Result<ImproveOutcome> {
    let (ns, na) = current.probs().dim();
    let mut logits = current.logits().clone();
    let terms: Vec<StateTerms> = (0..ns).map(|s| state_terms(inputs, s)).collect();
    let mut step = vec![cfg.improve_lr; ns];
    let mut values: Vec<f64> = (0..ns)
        .map(|s| kl_state_objective(&terms[s], &log_softmax(logits.row(s).as_slice().unwrap()), cfg.alpha, cfg.lambda))
        .collect();
    let mut trace = vec![values.iter().sum()];
    for _ in 0..cfg.improve_steps {
        for s in 0..ns {
            let t = &terms[s];
            if t.rho == 0.0 && t.d == 0.0 {
                continue;
            }
            let z: Vec<f64> = logits.row(s).to_vec();
            let logp = log_softmax(&z);
            let (grad, dir) = ascent_direction(t, &logp, cfg.alpha, cfg.lambda);
            let slope: f64 = grad.iter().zip(&dir).map(|(g, d)| g * d).sum();
            if !(slope > 0.0) {
                if !slope.is_finite() {
                    return Err(MerpoError::NonFinite(format!("policy gradient at state {s}")));
                }
                continue;
            }
            let mut eta = step[s];
            for _ in 0..MAX_HALVINGS {
                let cand: Vec<f64> = (0..na).map(|a| z[a] + eta * dir[a]).collect();
                let value = kl_state_objective(t, &log_softmax(&cand), cfg.alpha, cfg.lambda);
                if value.is_finite() && value >= values[s] + ARMIJO * eta * slope {
                    logits.row_mut(s).assign(&Array1::from(cand));
                    values[s] = value;
                    step[s] = (eta * 2.0).min(1e12);
                    break;
                }
                eta *= 0.5;
            }
            if eta < step[s] * 0.5 {
                step[s] = eta.max(f64::MIN_POSITIVE);
            }
        }
        trace.push(values.iter().sum());
    }
    if logits.iter().any(|x| x.is_nan()) {
        return Err(MerpoError::NonFinite("policy logits".into()));
    }
    Ok(ImproveOutcome {
        policy: StochasticPolicy::from_logits(logits)?,
        objective_trace: trace,
    })
}

/// Improve `current` with the variant selected by `cfg`.
pub fn improve_policy_traced(
    inputs: &ImproveInputs,
    current: &StochasticPolicy,
    cfg: &RacConfig,
) -> Result<ImproveOutcome> {
    check_improve(inputs, current)?;
    match cfg.variant {
        ImprovementVariant::KlPractical => improve_kl(inputs, current, cfg),
        ImprovementVariant::TvTheory => {
            let policy = improve_tv(inputs, current, cfg)?;
            let objective_trace = vec![improvement_objective(inputs, &policy, cfg)];
            Ok(ImproveOutcome {
                policy,
                objective_trace,
            })
        }
    }
}

pub fn improve_policy(inputs: &ImproveInputs, current: &StochasticPolicy, cfg: &RacConfig) -> Result<StochasticPolicy> {
    Ok(improve_policy_traced(inputs, current, cfg)?.policy)
}

/// `(div_beta, div_c)` in the metric of `variant`: KL for the practical
/// variant, total variation for the theory variant. The behavior divergence is
/// weighted by dataset states and the meta-policy divergence by `rho`.
pub fn divergences(
    policy: &StochasticPolicy,
    behavior: &BehaviorRef,
    pi_c: &StochasticPolicy,
    rho_state: &Array1<f64>,
    variant: ImprovementVariant,
) -> (f64, f64) {
    let (ns, na) = policy.probs().dim();
    let mut div_b = 0.0;
    let mut div_c = 0.0;
    for s in 0..ns {
        let lp = log_prob_row(policy, s);
        let lpc = log_prob_row(pi_c, s);
        let (mut b, mut c) = (0.0, 0.0);
        for a in 0..na {
            let p = policy.prob(s, a);
            let pb = behavior.probs[[s, a]];
            match variant {
                ImprovementVariant::KlPractical => {
                    if pb > 0.0 {
                        b += pb * (pb.ln() - lp[a]);
                    }
                    c += p * (lp[a] - lpc[a]);
                }
                ImprovementVariant::TvTheory => {
                    b += 0.5 * (p - pb).abs();
                    c += 0.5 * (p - pi_c.prob(s, a)).abs();
                }
            }
        }
        div_b += behavior.state_weights[s] * b.max(0.0);
        div_c += rho_state[s] * c.max(0.0);
    }
    (div_b, div_c)
}

/// Dual step on `beta`: `max(0, beta + lr (E_rho[Q] - E_D[Q] - tau))`.
pub fn tune_beta(q: &QTable, rho: &MarginalDist, d: &MarginalDist, beta: f64, tau: f64, lr: f64) -> f64 {
    (beta + lr * beta_gap(q, rho, d, tau)).max(0.0)
}

/// Bounds `tune_log_beta` keeps `beta` inside; the step cannot reach zero
/// and would otherwise overflow on a large gap.
pub const LOG_BETA_RANGE: (f64, f64) = (1e-8, 1e6);

/// The same step taken on `log beta`.
pub fn tune_log_beta(q: &QTable, rho: &MarginalDist, d: &MarginalDist, beta: f64, tau: f64, lr: f64) -> f64 {
    let (lo, hi) = LOG_BETA_RANGE;
    (beta.max(lo).ln() + lr * beta_gap(q, rho, d, tau)).exp().clamp(lo, hi)
}

fn beta_gap(q: &QTable, rho: &MarginalDist, d: &MarginalDist, tau: f64) -> f64 {
    rho.expect(&q.values) - d.expect(&q.values) - tau
}

/// Dual step on `lambda` toward `d_target`.
pub fn tune_lambda(div_beta: f64, div_c: f64, alpha: f64, lambda: f64, d_target: f64, lr: f64) -> f64 {
    (lambda + lr * (alpha * (div_beta - d_target) + (1.0 - alpha) * (div_c - d_target))).max(0.0)
}

/// Read-only access to a policy's true return, supplied by whoever owns the
/// true task. The solver never sees the MDP behind it.
pub trait PolicyEvaluator: Sync {
    fn true_return(&self, policy: &StochasticPolicy) -> Result<f64>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct RacState {
    pub policy: StochasticPolicy,
    pub q: QTable,
    pub beta: f64,
    pub lambda: f64,
}

impl RacState {
    pub fn new(policy: StochasticPolicy, q: QTable, cfg: &RacConfig) -> Self {
        Self {
            policy,
            q,
            beta: cfg.beta,
            lambda: cfg.lambda,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RacTraceRow {
    pub iter: usize,
    /// `NaN` without an evaluator.
    pub j_true: f64,
    pub nu: f64,
    pub div_beta: f64,
    pub div_c: f64,
    pub beta: f64,
    pub lambda: f64,
}

/// `iters` rounds of evaluate, tune, improve from `state`.
pub fn rac_iterations(
    ctx: &TaskContext,
    pi_c: &StochasticPolicy,
    mut state: RacState,
    cfg: &RacConfig,
    iters: usize,
    seed: SeedStream,
    evaluator: Option<&dyn PolicyEvaluator>,
    trace: &mut Vec<RacTraceRow>,
) -> Result<RacState> {
    cfg.validate()?;
    let d = &ctx.data_marginal;
    for it in 0..iters {
        let mut rng = seed.child(it as u64).rng();
        let mut rho = ctx.policy_marginal(&state.policy, cfg, &mut rng)?;
        if cfg.auto_beta {
            state.beta = if cfg.log_beta {
                tune_log_beta(&state.q, &rho, d, state.beta, cfg.tau, cfg.beta_lr)
            } else {
                tune_beta(&state.q, &rho, d, state.beta, cfg.tau, cfg.beta_lr)
            };
        }
        let step_cfg = RacConfig {
            beta: state.beta,
            lambda: state.lambda,
            ..cfg.clone()
        };
        state.q = conservative_evaluate_from(&state.policy, &ctx.empirical.mdp, &ctx.learnt, &rho, d, &step_cfg, &state.q)?.q;
        let nu_now = nu(&rho, d, cfg.f);
        match cfg.rho_refresh {
            RhoRefresh::PerIteration => {
                let rho_state = rho.state_marginal();
                let inputs = ImproveInputs {
                    q: &state.q,
                    behavior: &ctx.behavior,
                    pi_c,
                    rho_state: &rho_state,
                };
                state.policy = improve_policy(&inputs, &state.policy, &step_cfg)?;
            }
            RhoRefresh::PerImprovementStep => {
                let one = RacConfig {
                    improve_steps: 1,
                    ..step_cfg.clone()
                };
                for _ in 0..cfg.improve_steps.max(1) {
                    let rho_state = rho.state_marginal();
                    let inputs = ImproveInputs {
                        q: &state.q,
                        behavior: &ctx.behavior,
                        pi_c,
                        rho_state: &rho_state,
                    };
                    state.policy = improve_policy(&inputs, &state.policy, &one)?;
                    rho = ctx.policy_marginal(&state.policy, cfg, &mut rng)?;
                }
            }
        }
        let rho_state = ctx.policy_marginal(&state.policy, cfg, &mut rng)?.state_marginal();
        let (div_beta, div_c) = divergences(&state.policy, &ctx.behavior, pi_c, &rho_state, cfg.variant);
        if cfg.auto_lambda {
            state.lambda = tune_lambda(div_beta, div_c, cfg.alpha, state.lambda, cfg.d_target, cfg.lambda_lr);
        }
        let j_true = match evaluator {
            Some(e) => e.true_return(&state.policy)?,
            None => f64::NAN,
        };
        trace.push(RacTraceRow {
            iter: it,
            j_true,
            nu: nu_now,
            div_beta,
            div_c,
            beta: state.beta,
            lambda: state.lambda,
        });
    }
    Ok(state)
}

/// Starting policy of a standalone run: the meta-policy, or the empirical
/// behavior policy when `alpha = 1` leaves the meta-policy unused.
pub fn initial_policy(ctx: &TaskContext, pi_c: &StochasticPolicy, cfg: &RacConfig) -> StochasticPolicy {
    if cfg.alpha >= 1.0 {
        ctx.behavior.floored_policy()
    } else {
        pi_c.clone()
    }
}

/// Fit the task model, then run `outer_iters` solver rounds from the
/// initial policy and a zero Q table.
#[allow(clippy::too_many_arguments)]
pub fn run_rac(
    data: &OfflineDataset,
    shape: &TaskShape,
    meta_model: &MetaModelParams,
    model_cfg: &ModelConfig,
    pi_c: &StochasticPolicy,
    cfg: &RacConfig,
    outer_iters: usize,
    seed: SeedStream,
) -> Result<(StochasticPolicy, QTable)> {
    let ctx = TaskContext::fit(data, shape, meta_model, model_cfg, seed.named("model"))?;
    let state = solve(&ctx, pi_c, cfg, outer_iters, seed, None, &mut Vec::new())?;
    Ok((state.policy, state.q))
}

/// Solver rounds on a prepared task from the standard starting point.
pub fn solve(
    ctx: &TaskContext,
    pi_c: &StochasticPolicy,
    cfg: &RacConfig,
    outer_iters: usize,
    seed: SeedStream,
    evaluator: Option<&dyn PolicyEvaluator>,
    trace: &mut Vec<RacTraceRow>,
) -> Result<RacState> {
    cfg.validate()?;
    if !pi_c.same_shape(&ctx.behavior.floored_policy()) {
        return Err(MerpoError::ShapeMismatch("meta-policy does not match task".into()));
    }
    let start = RacState::new(
        initial_policy(ctx, pi_c, cfg),
        QTable::zeros(ctx.shape.n_states, ctx.shape.n_actions),
        cfg,
    );
    rac_iterations(ctx, pi_c, start, cfg, outer_iters, seed.named("rac"), evaluator, trace)
}
