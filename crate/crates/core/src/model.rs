//! Tabular dynamics and reward models: maximum-likelihood fitting with a
//! proximal pull toward a meta-model, first-order meta-model training and
//! small validation-selected ensembles.

use ndarray::{Array1, Array2, Array3, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{MerpoError, Result};
use crate::mdp::TabularMdp;
use crate::rng::SeedStream;
use crate::tasks::{OfflineDataset, TaskShape};
use crate::textio::{self, Document};

/// Per-task model: next-state logits and a per-pair reward estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub trans_logits: Array3<f64>,
    pub reward_est: Array2<f64>,
}

/// The meta-model has the same parameterization as a task model.
pub type MetaModelParams = ModelParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Proximal weight `eta` on `||theta - phi||^2`.
    pub eta: f64,
    /// Gradient steps per task adaptation.
    pub adaptation_steps: usize,
    /// Task-model learning rate.
    pub task_lr: f64,
    /// Meta-model interpolation rate `xi_1`.
    pub meta_lr: f64,
    pub meta_iters: usize,
    pub ensemble_members: usize,
    pub ensemble_select: usize,
    /// Std-dev of the Gaussian jitter added to each member's starting point.
    pub ensemble_jitter: f64,
    pub train_frac: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            eta: 1e-4,
            adaptation_steps: 25,
            task_lr: 1.0,
            meta_lr: 5e-2,
            meta_iters: 100,
            ensemble_members: 3,
            ensemble_select: 2,
            ensemble_jitter: 0.01,
            train_frac: 0.9,
        }
    }
}

impl ModelParams {
    /// Uniform transitions, zero reward.
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self {
            trans_logits: Array3::zeros((n_states, n_actions, n_states)),
            reward_est: Array2::zeros((n_states, n_actions)),
        }
    }

    /// Gaussian logits and rewards with standard deviation `scale`.
    pub fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, scale: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, scale).expect("finite scale");
        Self {
            trans_logits: Array3::from_shape_fn((n_states, n_actions, n_states), |_| normal.sample(rng)),
            reward_est: Array2::from_shape_fn((n_states, n_actions), |_| normal.sample(rng)),
        }
    }

    pub fn n_states(&self) -> usize {
        self.reward_est.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.reward_est.ncols()
    }

    fn same_shape(&self, other: &ModelParams) -> bool {
        self.trans_logits.dim() == other.trans_logits.dim()
    }

    /// Softmax over next states for every `(s, a)`.
    pub fn transition_probs(&self) -> Array3<f64> {
        let mut p = self.trans_logits.clone();
        for mut row in p.lanes_mut(Axis(2)) {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let z = row.sum();
            row.mapv_inplace(|x| x / z);
        }
        p
    }

    /// The learnt MDP; rewards are clipped to `[-r_max, r_max]`.
    pub fn to_mdp(&self, shape: &TaskShape, init_dist: Array1<f64>) -> Result<TabularMdp> {
        let r = self.reward_est.mapv(|r| r.clamp(-shape.r_max, shape.r_max));
        TabularMdp::new(self.transition_probs(), r, init_dist, shape.gamma, shape.r_max)
    }

    pub fn sq_distance(&self, other: &ModelParams) -> f64 {
        let t: f64 = Zip::from(&self.trans_logits)
            .and(&other.trans_logits)
            .fold(0.0, |acc, a, b| acc + (a - b) * (a - b));
        let r: f64 = Zip::from(&self.reward_est)
            .and(&other.reward_est)
            .fold(0.0, |acc, a, b| acc + (a - b) * (a - b));
        t + r
    }

    pub fn max_abs_diff(&self, other: &ModelParams) -> f64 {
        self.trans_logits
            .iter()
            .zip(other.trans_logits.iter())
            .chain(self.reward_est.iter().zip(other.reward_est.iter()))
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    fn is_finite(&self) -> bool {
        self.trans_logits.iter().chain(self.reward_est.iter()).all(|x| x.is_finite())
    }

    fn axpy(&mut self, alpha: f64, dir: &ModelParams) {
        self.trans_logits.scaled_add(alpha, &dir.trans_logits);
        self.reward_est.scaled_add(alpha, &dir.reward_est);
    }

    pub fn to_doc(&self) -> Document {
        let (s, a) = (self.n_states(), self.n_actions());
        let mut doc = Document::new("merpo-mdp");
        doc.scalar("shape", format!("{s} {a}"))
            .scalar("logits", true)
            .table("transition", s * a, s, textio::flat(&self.trans_logits))
            .table("reward", s, a, textio::flat(&self.reward_est));
        doc
    }

    pub fn from_doc(doc: &Document) -> Result<Self> {
        doc.expect_kind("merpo-mdp")?;
        if doc.get("logits")? != "true" {
            return Err(MerpoError::Parse {
                line: 0,
                msg: "model checkpoints store logits".into(),
            });
        }
        let (s, a) = textio::shape(doc)?;
        Ok(Self {
            trans_logits: textio::table3(doc, "transition", s, a)?,
            reward_est: textio::table2(doc, "reward", s, a)?,
        })
    }
}

fn check_data(model: &ModelParams, data: &OfflineDataset) -> Result<()> {
    if data.is_empty() {
        return Err(MerpoError::InvalidArgument("dataset is empty".into()));
    }
    if (data.n_states(), data.n_actions()) != (model.n_states(), model.n_actions()) {
        return Err(MerpoError::ShapeMismatch("model does not match dataset".into()));
    }
    Ok(())
}

/// Mean over tuples of `-log T(s'|s,a) + (r - r_hat(s,a))^2 / 2`.
pub fn nll(model: &ModelParams, data: &OfflineDataset) -> Result<f64> {
    check_data(model, data)?;
    let n = data.len() as f64;
    let (ns, na) = (model.n_states(), model.n_actions());
    let mut total = 0.0;
    for s in 0..ns {
        for a in 0..na {
            let c = data.count_sa()[[s, a]];
            if c == 0 {
                continue;
            }
            let logits = model.trans_logits.slice(ndarray::s![s, a, ..]);
            let m = logits.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            for s2 in 0..ns {
                let k = data.count_sas()[[s, a, s2]];
                if k > 0 {
                    total += k as f64 * (lse - logits[s2]);
                }
            }
            let rh = model.reward_est[[s, a]];
            total += 0.5
                * (data.reward_sq_sum_sa()[[s, a]] - 2.0 * rh * data.reward_sum_sa()[[s, a]] + c as f64 * rh * rh);
        }
    }
    Ok(total / n)
}

/// `nll(model) + eta * ||model - anchor||^2`.
pub fn proximal_objective(model: &ModelParams, data: &OfflineDataset, anchor: &ModelParams, eta: f64) -> Result<f64> {
    if !model.same_shape(anchor) {
        return Err(MerpoError::ShapeMismatch("anchor shape".into()));
    }
    Ok(nll(model, data)? + eta * model.sq_distance(anchor))
}

/// Analytic gradient of [`proximal_objective`].
pub fn proximal_gradient(
    model: &ModelParams,
    data: &OfflineDataset,
    anchor: &ModelParams,
    eta: f64,
) -> Result<ModelParams> {
    check_data(model, data)?;
    if !model.same_shape(anchor) {
        return Err(MerpoError::ShapeMismatch("anchor shape".into()));
    }
    let n = data.len() as f64;
    let probs = model.transition_probs();
    let counts = data.count_sa().mapv(|c| c as f64);
    let mut g_t = Array3::zeros(model.trans_logits.raw_dim());
    Zip::indexed(&mut g_t).and(&probs).for_each(|(s, a, s2), g, &p| {
        *g = (counts[[s, a]] * p - data.count_sas()[[s, a, s2]] as f64) / n;
    });
    let g_r = Zip::from(&model.reward_est)
        .and(&counts)
        .and(data.reward_sum_sa())
        .map_collect(|&rh, &c, &rs| (c * rh - rs) / n);
    let mut grad = ModelParams {
        trans_logits: g_t,
        reward_est: g_r,
    };
    if eta != 0.0 {
        grad.trans_logits.zip_mut_with(&(&model.trans_logits - &anchor.trans_logits), |g, d| *g += 2.0 * eta * d);
        grad.reward_est.zip_mut_with(&(&model.reward_est - &anchor.reward_est), |g, d| *g += 2.0 * eta * d);
    }
    Ok(grad)
}

/// `steps` full-batch gradient steps on the proximal objective, starting at
/// `start` and anchored at `anchor`.
///
/// Each `(s, a)` block of the gradient is divided by that block's curvature
/// bound `n(s,a)/N + 2 eta`, so `lr = 1` solves the reward part in one step
/// and any `lr < 2` is stable whatever the dataset size.
pub fn fit_model(
    data: &OfflineDataset,
    start: &ModelParams,
    anchor: &ModelParams,
    eta: f64,
    steps: usize,
    lr: f64,
) -> Result<ModelParams> {
    if !(lr > 0.0) {
        return Err(MerpoError::InvalidArgument(format!("model lr {lr} must be positive")));
    }
    if !(eta >= 0.0) {
        return Err(MerpoError::InvalidArgument(format!("eta {eta} must be non-negative")));
    }
    check_data(start, data)?;
    let n = data.len() as f64;
    let precond = data.count_sa().mapv(|c| {
        let curv = c as f64 / n + 2.0 * eta;
        if curv > 0.0 { 1.0 / curv } else { 0.0 }
    });
    let mut theta = start.clone();
    for step in 0..steps {
        let mut g = proximal_gradient(&theta, data, anchor, eta)?;
        for ((s, a, _), x) in g.trans_logits.indexed_iter_mut() {
            *x *= precond[[s, a]];
        }
        g.reward_est *= &precond;
        theta.axpy(-lr, &g);
        if !theta.is_finite() {
            return Err(MerpoError::NonFinite(format!("model parameters after step {step} (lr {lr})")));
        }
    }
    Ok(theta)
}

/// Adapt a task model from the meta-model.
pub fn fit_task_model(
    data: &OfflineDataset,
    init: &MetaModelParams,
    eta: f64,
    steps: usize,
    lr: f64,
) -> Result<ModelParams> {
    fit_model(data, init, init, eta, steps, lr)
}

/// First-order proximal meta-learning of the model: adapt every task from
/// `phi`, then move `phi` toward the mean of the adapted parameters.
pub fn train_meta_model(
    datasets: &[OfflineDataset],
    init: &MetaModelParams,
    cfg: &ModelConfig,
) -> Result<MetaModelParams> {
    if datasets.is_empty() {
        return Err(MerpoError::InvalidArgument("meta-model training needs a dataset".into()));
    }
    let mut phi = init.clone();
    let inv_n = 1.0 / datasets.len() as f64;
    for _ in 0..cfg.meta_iters {
        let mut mean = ModelParams::zeros(phi.n_states(), phi.n_actions());
        for (i, d) in datasets.iter().enumerate() {
            let theta = fit_task_model(d, &phi, cfg.eta, cfg.adaptation_steps, cfg.task_lr)
                .map_err(|e| MerpoError::Task {
                    task: i,
                    source: Box::new(e),
                })?;
            mean.axpy(inv_n, &theta);
        }
        // phi <- phi - xi (phi - mean)
        let mut step = phi.clone();
        step.axpy(-1.0, &mean);
        phi.axpy(-cfg.meta_lr, &step);
    }
    Ok(phi)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelEnsemble {
    pub members: Vec<ModelParams>,
    /// Indices into `members`, best validation NLL first.
    pub selected: Vec<usize>,
    pub validation_nll: Vec<f64>,
}

impl ModelEnsemble {
    /// Draw one selected member uniformly.
    pub fn sample_member<R: Rng + ?Sized>(&self, rng: &mut R) -> &ModelParams {
        &self.members[self.selected[rng.random_range(0..self.selected.len())]]
    }

    /// The MDP seen by rollouts that pick a selected member uniformly at each
    /// step: the average of the selected members' dynamics and rewards.
    pub fn learnt_mdp(&self, shape: &TaskShape, init_dist: Array1<f64>) -> Result<TabularMdp> {
        let k = self.selected.len() as f64;
        let first = &self.members[self.selected[0]];
        let mut t = Array3::zeros(first.trans_logits.raw_dim());
        let mut r = Array2::zeros(first.reward_est.raw_dim());
        for &i in &self.selected {
            let m = &self.members[i];
            t.scaled_add(1.0 / k, &m.transition_probs());
            r.scaled_add(1.0 / k, &m.reward_est.mapv(|x| x.clamp(-shape.r_max, shape.r_max)));
        }
        for mut row in t.lanes_mut(Axis(2)) {
            let z = row.sum();
            row.mapv_inplace(|p| p / z);
        }
        TabularMdp::new(t, r, init_dist, shape.gamma, shape.r_max)
    }
}

/// Train `cfg.ensemble_members` models on a train split from jittered
/// starting points and keep the `cfg.ensemble_select` best on the held-out
/// split.
pub fn fit_ensemble(
    data: &OfflineDataset,
    init: &MetaModelParams,
    cfg: &ModelConfig,
    seed: SeedStream,
) -> Result<ModelEnsemble> {
    if cfg.ensemble_members == 0 || cfg.ensemble_select == 0 {
        return Err(MerpoError::InvalidArgument("ensemble needs at least one member".into()));
    }
    let (train, val) = if data.len() >= 2 {
        data.split(cfg.train_frac, seed.named("split"))?
    } else {
        (data.clone(), data.clone())
    };
    let (train, val) = match (train.is_empty(), val.is_empty()) {
        (false, false) => (train, val),
        _ => (data.clone(), data.clone()),
    };
    let mut members = Vec::with_capacity(cfg.ensemble_members);
    let mut validation_nll = Vec::with_capacity(cfg.ensemble_members);
    for m in 0..cfg.ensemble_members {
        let mut start = init.clone();
        if cfg.ensemble_jitter > 0.0 {
            let jitter = ModelParams::random(
                init.n_states(),
                init.n_actions(),
                cfg.ensemble_jitter,
                &mut seed.child(m as u64).rng(),
            );
            start.axpy(1.0, &jitter);
        }
        let theta = fit_model(&train, &start, init, cfg.eta, cfg.adaptation_steps, cfg.task_lr)?;
        validation_nll.push(nll(&theta, &val)?);
        members.push(theta);
    }
    let mut order: Vec<usize> = (0..members.len()).collect();
    order.sort_by(|&a, &b| validation_nll[a].total_cmp(&validation_nll[b]).then(a.cmp(&b)));
    order.truncate(cfg.ensemble_select.min(members.len()));
    Ok(ModelEnsemble {
        members,
        selected: order,
        validation_nll,
    })
}
