//! Exact tabular MDP machinery: representation, policy evaluation by
//! dynamic programming, discounted marginals and policy divergences.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;
use rand_distr::{Distribution, Gamma};

use crate::error::{MerpoError, Result};

/// Tolerance on probability rows and initial distributions.
pub const PROB_TOL: f64 = 1e-10;
/// Default residual for [`exact_q`].
pub const EVAL_TOL: f64 = 1e-10;
/// Iteration cap for Bellman evaluation.
pub const EVAL_MAX_ITERS: usize = 100_000;
/// Logits are kept within this distance of the row maximum so that every
/// probability stays strictly positive in `f64`.
pub const LOGIT_FLOOR: f64 = -700.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    transition: Array3<f64>,
    reward: Array2<f64>,
    init_dist: Array1<f64>,
    gamma: f64,
    r_max: f64,
}

impl TabularMdp {
    pub fn new(
        transition: Array3<f64>,
        reward: Array2<f64>,
        init_dist: Array1<f64>,
        gamma: f64,
        r_max: f64,
    ) -> Result<Self> {
        let (n_states, n_actions, n_next) = transition.dim();
        if n_states == 0 || n_actions == 0 {
            return Err(MerpoError::InvalidMdp("empty state or action space".into()));
        }
        if n_next != n_states {
            return Err(MerpoError::InvalidMdp(format!(
                "transition has {n_next} next states for {n_states} states"
            )));
        }
        if reward.dim() != (n_states, n_actions) || init_dist.len() != n_states {
            return Err(MerpoError::InvalidMdp("reward or init_dist shape mismatch".into()));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(MerpoError::InvalidMdp(format!("gamma {gamma} outside (0, 1)")));
        }
        if !(r_max > 0.0 && r_max.is_finite()) {
            return Err(MerpoError::InvalidMdp(format!("r_max {r_max} must be positive")));
        }
        for s in 0..n_states {
            for a in 0..n_actions {
                let row = transition.slice(ndarray::s![s, a, ..]);
                if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
                    return Err(MerpoError::InvalidMdp(format!("negative transition at ({s}, {a})")));
                }
                let sum: f64 = row.sum();
                if (sum - 1.0).abs() > PROB_TOL {
                    return Err(MerpoError::InvalidMdp(format!(
                        "transition row ({s}, {a}) sums to {sum}"
                    )));
                }
                let r = reward[[s, a]];
                if !r.is_finite() || r.abs() > r_max {
                    return Err(MerpoError::InvalidMdp(format!(
                        "reward ({s}, {a}) = {r} exceeds r_max {r_max}"
                    )));
                }
            }
        }
        if init_dist.iter().any(|&p| !(p >= 0.0)) || (init_dist.sum() - 1.0).abs() > PROB_TOL {
            return Err(MerpoError::InvalidMdp("init_dist is not a distribution".into()));
        }
        Ok(Self {
            n_states,
            n_actions,
            transition: transition.as_standard_layout().to_owned(),
            reward: reward.as_standard_layout().to_owned(),
            init_dist,
            gamma,
            r_max,
        })
    }

    /// Random MDP with Dirichlet(1) transition rows, uniform rewards in
    /// `[-r_max, r_max]` and a Dirichlet(1) initial distribution.
    pub fn random<R: Rng + ?Sized>(
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        r_max: f64,
        rng: &mut R,
    ) -> Self {
        let mut transition = Array3::zeros((n_states, n_actions, n_states));
        for s in 0..n_states {
            for a in 0..n_actions {
                let row = dirichlet_ones(n_states, rng);
                transition.slice_mut(ndarray::s![s, a, ..]).assign(&Array1::from(row));
            }
        }
        let reward = Array2::from_shape_fn((n_states, n_actions), |_| rng.random_range(-r_max..=r_max));
        let init = Array1::from(dirichlet_ones(n_states, rng));
        Self::new(transition, reward, init, gamma, r_max).expect("random MDP is valid by construction")
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn transition(&self) -> &Array3<f64> {
        &self.transition
    }

    pub fn reward(&self) -> &Array2<f64> {
        &self.reward
    }

    pub fn init_dist(&self) -> &Array1<f64> {
        &self.init_dist
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    /// Largest possible |Q| under exact evaluation.
    pub fn q_bound(&self) -> f64 {
        self.r_max / (1.0 - self.gamma)
    }

    pub fn same_shape(&self, other: &TabularMdp) -> bool {
        self.n_states == other.n_states && self.n_actions == other.n_actions
    }

    /// Copy of this MDP with a different initial distribution.
    pub fn with_init_dist(&self, init_dist: Array1<f64>) -> Result<Self> {
        Self::new(
            self.transition.clone(),
            self.reward.clone(),
            init_dist,
            self.gamma,
            self.r_max,
        )
    }

    /// Copy of this MDP with a different reward table.
    pub fn with_reward(&self, reward: Array2<f64>) -> Result<Self> {
        Self::new(
            self.transition.clone(),
            reward,
            self.init_dist.clone(),
            self.gamma,
            self.r_max,
        )
    }

    /// `out[s, a] = r(s, a) + gamma * sum_s' T(s'|s, a) v(s')`.
    pub(crate) fn backup_into(&self, v: &[f64], out: &mut Array2<f64>) {
        let ns = self.n_states;
        let t = self.transition.as_slice().expect("standard layout");
        let r = self.reward.as_slice().expect("standard layout");
        let o = out.as_slice_mut().expect("standard layout");
        for (idx, (o, &r)) in o.iter_mut().zip(r).enumerate() {
            let row = &t[idx * ns..(idx + 1) * ns];
            let ev: f64 = row.iter().zip(v).map(|(p, v)| p * v).sum();
            *o = r + self.gamma * ev;
        }
    }

    /// `out[s, a] = sum_s' T(s'|s, a) v(s')` without reward or discount.
    pub(crate) fn expect_next(&self, v: &[f64]) -> Array2<f64> {
        let ns = self.n_states;
        let t = self.transition.as_slice().expect("standard layout");
        Array2::from_shape_fn((self.n_states, self.n_actions), |(s, a)| {
            let idx = s * self.n_actions + a;
            t[idx * ns..(idx + 1) * ns].iter().zip(v).map(|(p, v)| p * v).sum()
        })
    }

    /// State-to-state transition matrix under `policy`.
    pub fn policy_transition(&self, policy: &StochasticPolicy) -> Array2<f64> {
        let mut p = Array2::zeros((self.n_states, self.n_states));
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let w = policy.probs[[s, a]];
                let row = self.transition.slice(ndarray::s![s, a, ..]);
                p.row_mut(s).scaled_add(w, &row);
            }
        }
        p
    }
}

fn dirichlet_ones<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let g = Gamma::new(1.0, 1.0).expect("valid gamma");
    let mut v: Vec<f64> = (0..n).map(|_| g.sample(rng)).collect();
    let s: f64 = v.iter().sum();
    if s <= 0.0 {
        return vec![1.0 / n as f64; n];
    }
    v.iter_mut().for_each(|x| *x /= s);
    v
}

/// Softmax policy over a table of logits. Every action has strictly
/// positive probability.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticPolicy {
    logits: Array2<f64>,
    probs: Array2<f64>,
}

impl StochasticPolicy {
    pub fn from_logits(logits: Array2<f64>) -> Result<Self> {
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(MerpoError::NonFinite("policy logits".into()));
        }
        if logits.nrows() == 0 || logits.ncols() == 0 {
            return Err(MerpoError::InvalidPolicy("empty logits table".into()));
        }
        let mut logits = logits.as_standard_layout().to_owned();
        let mut probs = Array2::zeros(logits.raw_dim());
        for (mut lrow, mut prow) in logits.rows_mut().into_iter().zip(probs.rows_mut()) {
            let m = lrow.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            lrow.mapv_inplace(|x| (x - m).max(LOGIT_FLOOR));
            let z: f64 = lrow.iter().map(|x| x.exp()).sum();
            prow.iter_mut().zip(lrow.iter()).for_each(|(p, &l)| *p = l.exp() / z);
        }
        Ok(Self { logits, probs })
    }

    /// Policy with the given action probabilities; zeros are floored so the
    /// result keeps full support.
    pub fn from_probs(probs: &Array2<f64>) -> Result<Self> {
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(MerpoError::InvalidPolicy("negative or non-finite probability".into()));
        }
        for (s, row) in probs.rows().into_iter().enumerate() {
            let sum = row.sum();
            if (sum - 1.0).abs() > 1e-8 {
                return Err(MerpoError::InvalidPolicy(format!("row {s} sums to {sum}")));
            }
        }
        Self::from_logits(probs.mapv(|p| if p > 0.0 { p.ln() } else { LOGIT_FLOOR }))
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self::from_logits(Array2::zeros((n_states, n_actions))).expect("zeros are finite")
    }

    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }

    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[[s, a]]
    }

    pub fn n_states(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.probs.ncols()
    }

    pub fn same_shape(&self, other: &StochasticPolicy) -> bool {
        self.probs.dim() == other.probs.dim()
    }

    /// Natural-log probabilities (row-normalized logits).
    pub fn log_probs(&self) -> Array2<f64> {
        let mut out = self.logits.clone();
        for mut row in out.rows_mut() {
            let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
            row.mapv_inplace(|x| x - lse);
        }
        out
    }

    /// Greedy policy with respect to `q`, ties broken toward the lowest action.
    /// The argmax gets all but `LOGIT_FLOOR`-suppressed mass.
    pub fn greedy(q: &QTable) -> Self {
        let logits = Array2::from_shape_fn(q.values.dim(), |(s, a)| {
            let row = q.values.row(s);
            let best = argmax(row.iter().copied());
            if a == best {
                0.0
            } else {
                LOGIT_FLOOR
            }
        });
        Self::from_logits(logits).expect("finite")
    }
}

pub(crate) fn argmax<I: Iterator<Item = f64>>(it: I) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in it.enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    pub values: Array2<f64>,
}

impl QTable {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        Self {
            values: Array2::zeros((n_states, n_actions)),
        }
    }

    pub fn new(values: Array2<f64>) -> Self {
        Self { values }
    }

    /// `V(s) = sum_a pi(a|s) Q(s, a)`.
    pub fn state_values(&self, policy: &StochasticPolicy) -> Vec<f64> {
        self.values
            .rows()
            .into_iter()
            .zip(policy.probs().rows())
            .map(|(q, p)| q.dot(&p))
            .collect()
    }

    pub fn max_abs_diff(&self, other: &QTable) -> f64 {
        self.values
            .iter()
            .zip(other.values.iter())
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }
}

/// Distribution over state-action pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalDist {
    dist: Array2<f64>,
}

impl MarginalDist {
    pub fn new(dist: Array2<f64>) -> Result<Self> {
        if dist.iter().any(|&p| !(p >= 0.0)) {
            return Err(MerpoError::InvalidArgument("negative marginal mass".into()));
        }
        let sum = dist.sum();
        if (sum - 1.0).abs() > 1e-8 {
            return Err(MerpoError::InvalidArgument(format!("marginal sums to {sum}")));
        }
        Ok(Self { dist })
    }

    /// Normalizes a non-negative table.
    pub fn from_weights(mut weights: Array2<f64>) -> Result<Self> {
        weights.mapv_inplace(|w| w.max(0.0));
        let sum = weights.sum();
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(MerpoError::InvalidArgument("marginal has no mass".into()));
        }
        weights /= sum;
        Self::new(weights)
    }

    pub fn dist(&self) -> &Array2<f64> {
        &self.dist
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.dist[[s, a]]
    }

    /// Marginal over states.
    pub fn state_marginal(&self) -> Array1<f64> {
        self.dist.sum_axis(Axis(1))
    }

    /// `E_{(s,a)~self}[q(s,a)]`.
    pub fn expect(&self, q: &Array2<f64>) -> f64 {
        (&self.dist * q).sum()
    }

    pub fn total_variation(&self, other: &MarginalDist) -> f64 {
        0.5 * self
            .dist
            .iter()
            .zip(other.dist.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }
}

/// Exact `Q^pi` by iterating the Bellman evaluation operator until the
/// max-norm change drops below `tol`.
pub fn exact_q(mdp: &TabularMdp, policy: &StochasticPolicy, tol: f64) -> Result<QTable> {
    check_policy_shape(mdp, policy)?;
    if !(tol > 0.0) {
        return Err(MerpoError::InvalidArgument(format!("tol {tol} must be positive")));
    }
    let mut q = QTable::zeros(mdp.n_states, mdp.n_actions);
    let mut next = q.values.clone();
    let mut residual = f64::INFINITY;
    for _ in 0..EVAL_MAX_ITERS {
        let v = q.state_values(policy);
        mdp.backup_into(&v, &mut next);
        residual = next
            .iter()
            .zip(q.values.iter())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        std::mem::swap(&mut q.values, &mut next);
        if !residual.is_finite() {
            break;
        }
        if residual < tol {
            return Ok(q);
        }
    }
    Err(MerpoError::NonConvergence {
        iterations: EVAL_MAX_ITERS,
        residual,
    })
}

/// Optimal action values by value iteration.
pub fn value_iteration(mdp: &TabularMdp, tol: f64) -> Result<QTable> {
    let mut q = QTable::zeros(mdp.n_states, mdp.n_actions);
    let mut next = q.values.clone();
    let mut residual = f64::INFINITY;
    for _ in 0..EVAL_MAX_ITERS {
        let v: Vec<f64> = q
            .values
            .rows()
            .into_iter()
            .map(|r| r.fold(f64::NEG_INFINITY, |m, &x| m.max(x)))
            .collect();
        mdp.backup_into(&v, &mut next);
        residual = next
            .iter()
            .zip(q.values.iter())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        std::mem::swap(&mut q.values, &mut next);
        if residual < tol {
            return Ok(q);
        }
    }
    Err(MerpoError::NonConvergence {
        iterations: EVAL_MAX_ITERS,
        residual,
    })
}

/// `J(M, pi) = E_{s0 ~ mu0}[V^pi(s0)]`.
pub fn expected_return(mdp: &TabularMdp, policy: &StochasticPolicy) -> Result<f64> {
    let q = exact_q(mdp, policy, EVAL_TOL)?;
    let v = q.state_values(policy);
    Ok(mdp.init_dist.iter().zip(&v).map(|(m, v)| m * v).sum())
}

/// Normalized discounted state-action visitation of `policy` in `mdp`.
///
/// Solves `(I - gamma P_pi^T) d = (1 - gamma) mu0` directly and falls back to
/// power iteration when the solve fails or returns an invalid distribution.
pub fn discounted_marginal(mdp: &TabularMdp, policy: &StochasticPolicy) -> Result<MarginalDist> {
    check_policy_shape(mdp, policy)?;
    let n = mdp.n_states;
    let p = mdp.policy_transition(policy);
    let g = mdp.gamma;
    let a = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 } - g * p[[j, i]]);
    let b = DVector::from_iterator(n, mdp.init_dist.iter().map(|m| (1.0 - g) * m));
    let state = match a.lu().solve(&b) {
        Some(x) if x.iter().all(|v| v.is_finite() && *v > -1e-9) => x.iter().copied().collect(),
        _ => power_iteration_marginal(mdp, &p),
    };
    state_action_marginal(&state, policy)
}

fn power_iteration_marginal(mdp: &TabularMdp, p: &Array2<f64>) -> Vec<f64> {
    let g = mdp.gamma;
    let mut x: Vec<f64> = mdp.init_dist.to_vec();
    for _ in 0..EVAL_MAX_ITERS {
        let mut next: Vec<f64> = mdp.init_dist.iter().map(|m| (1.0 - g) * m).collect();
        for (i, xi) in x.iter().enumerate() {
            for (j, nj) in next.iter_mut().enumerate() {
                *nj += g * xi * p[[i, j]];
            }
        }
        let diff = x.iter().zip(&next).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        x = next;
        if diff < 1e-15 {
            break;
        }
    }
    x
}

fn state_action_marginal(state: &[f64], policy: &StochasticPolicy) -> Result<MarginalDist> {
    let d = Array2::from_shape_fn(policy.probs.dim(), |(s, a)| state[s].max(0.0) * policy.probs[[s, a]]);
    MarginalDist::from_weights(d)
}

/// The MDP with dynamics `f T1 + (1 - f) T2` and reward `f r1 + (1 - f) r2`.
pub fn f_interpolant(m1: &TabularMdp, m2: &TabularMdp, f: f64) -> Result<TabularMdp> {
    if !m1.same_shape(m2) {
        return Err(MerpoError::ShapeMismatch("f_interpolant operands differ in shape".into()));
    }
    if m1.gamma != m2.gamma {
        return Err(MerpoError::InvalidArgument("f_interpolant operands differ in gamma".into()));
    }
    if !(0.0..=1.0).contains(&f) {
        return Err(MerpoError::InvalidArgument(format!("f = {f} outside [0, 1]")));
    }
    if f == 1.0 {
        return Ok(m1.clone());
    }
    if f == 0.0 {
        return Ok(m2.clone());
    }
    // b + f (a - b) keeps interpolating an MDP with itself bit-exact.
    let mix = |a: f64, b: f64| b + f * (a - b);
    let mut transition = m2.transition.clone();
    transition.zip_mut_with(&m1.transition, |b, &a| *b = mix(a, *b));
    let mut reward = m2.reward.clone();
    reward.zip_mut_with(&m1.reward, |b, &a| *b = mix(a, *b));
    let mut init = m2.init_dist.clone();
    init.zip_mut_with(&m1.init_dist, |b, &a| *b = mix(a, *b));
    TabularMdp::new(transition, reward, init, m1.gamma, m1.r_max.max(m2.r_max))
}

fn check_policy_shape(mdp: &TabularMdp, policy: &StochasticPolicy) -> Result<()> {
    if policy.probs.dim() != (mdp.n_states, mdp.n_actions) {
        return Err(MerpoError::ShapeMismatch(format!(
            "policy {:?} vs MDP ({}, {})",
            policy.probs.dim(),
            mdp.n_states,
            mdp.n_actions
        )));
    }
    Ok(())
}

fn check_pair(p1: &StochasticPolicy, p2: &StochasticPolicy) -> Result<()> {
    if !p1.same_shape(p2) {
        return Err(MerpoError::ShapeMismatch("policies differ in shape".into()));
    }
    Ok(())
}

/// Total variation between the action distributions at one state.
pub fn state_tv(p1: &StochasticPolicy, p2: &StochasticPolicy, s: usize) -> f64 {
    0.5 * p1
        .probs
        .row(s)
        .iter()
        .zip(p2.probs.row(s).iter())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
}

/// `max_s TV(p1(.|s), p2(.|s))`.
pub fn max_tv_distance(p1: &StochasticPolicy, p2: &StochasticPolicy) -> Result<f64> {
    check_pair(p1, p2)?;
    Ok((0..p1.n_states())
        .map(|s| state_tv(p1, p2, s))
        .fold(0.0, f64::max))
}

/// `KL(p1(.|s) || p2(.|s))` at a single state.
pub fn state_kl(p1: &StochasticPolicy, p2: &StochasticPolicy, s: usize) -> f64 {
    let lp1 = log_prob_row(p1, s);
    let lp2 = log_prob_row(p2, s);
    p1.probs
        .row(s)
        .iter()
        .zip(lp1.iter().zip(&lp2))
        .map(|(p, (l1, l2))| if *p > 0.0 { p * (l1 - l2) } else { 0.0 })
        .sum::<f64>()
        .max(0.0)
}

pub(crate) fn log_prob_row(p: &StochasticPolicy, s: usize) -> Vec<f64> {
    let row = p.logits.row(s);
    let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

/// State-weighted KL `sum_s w(s) KL(p1(.|s) || p2(.|s))`, with `w` the state
/// marginal of `weights`.
pub fn kl_divergence(p1: &StochasticPolicy, p2: &StochasticPolicy, weights: &MarginalDist) -> Result<f64> {
    check_pair(p1, p2)?;
    let w = weights.state_marginal();
    if w.len() != p1.n_states() {
        return Err(MerpoError::ShapeMismatch("weights do not match policy states".into()));
    }
    Ok((0..p1.n_states())
        .filter(|&s| w[s] > 0.0)
        .map(|s| w[s] * state_kl(p1, p2, s))
        .sum())
}

/// `D_CQL(p1, p2)(s) = sum_a p1(a|s) (p1(a|s) / p2(a|s) - 1)`.
pub fn d_cql(p1: &StochasticPolicy, p2: &StochasticPolicy, s: usize) -> Result<f64> {
    check_pair(p1, p2)?;
    if s >= p1.n_states() {
        return Err(MerpoError::InvalidArgument(format!("state {s} out of range")));
    }
    let v: f64 = p1
        .probs
        .row(s)
        .iter()
        .zip(p2.probs.row(s).iter())
        .map(|(a, b)| a * (a / b - 1.0))
        .sum();
    Ok(v.max(0.0))
}
