//! Numeric checks of the safe-improvement conditions and the interpolant
//! return bound on concrete instances, with exact dynamic programming as
//! ground truth.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{MerpoError, Result};
use crate::harness::PreparedScenario;
use crate::mdp::{
    discounted_marginal, exact_q, expected_return, f_interpolant, kl_divergence, max_tv_distance, MarginalDist,
    StochasticPolicy, TabularMdp,
};
use crate::rac::{penalty_report, RacConfig};

const DEFINED_FLOOR: f64 = 1e-12;
const EXACT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TheoremReport {
    pub nu_pi: f64,
    pub nu_beta: f64,
    pub nu_pi_c: f64,
    /// Max-state total variation between the policy and the behavior policy.
    pub d_tv: f64,
    /// Data-weighted KL(policy || behavior), the divergence used in practice.
    pub d_kl: f64,
    pub epsilon: Option<f64>,
    /// Open interval `(max(1/2 - eps, 0), 1/2)`; absent when eps is undefined
    /// or negative.
    pub alpha_window: Option<(f64, f64)>,
    pub alpha_used: f64,
    pub condition_met: bool,
    pub reason: Option<String>,
    pub j_policy: f64,
    pub j_beta: f64,
    pub j_meta: f64,
    pub improved_over_beta: bool,
    pub improved_over_meta: bool,
}

/// `beta (nu_pi - nu_beta) / (2 lambda (1 - gamma) D)`, or `None` when the
/// denominator vanishes.
pub fn epsilon(nu_pi: f64, nu_beta: f64, beta: f64, lambda: f64, gamma: f64, d_tv: f64) -> Option<f64> {
    let denom = 2.0 * lambda * (1.0 - gamma) * d_tv;
    if d_tv < DEFINED_FLOOR || !(denom > 0.0) {
        return None;
    }
    Some(beta * (nu_pi - nu_beta) / denom)
}

pub fn alpha_window(eps: f64) -> Option<(f64, f64)> {
    (eps >= 0.0).then(|| ((0.5 - eps).max(0.0), 0.5))
}

#[allow(clippy::too_many_arguments)]
pub fn check_theorem1(
    mdp: &TabularMdp,
    policy: &StochasticPolicy,
    pi_beta: &StochasticPolicy,
    pi_c: &StochasticPolicy,
    learnt: &TabularMdp,
    data_marginal: &MarginalDist,
    cfg: &RacConfig,
) -> Result<TheoremReport> {
    let nu_of = |p: &StochasticPolicy| penalty_report(p, data_marginal, learnt, cfg.f).map(|r| r.nu);
    let nu_pi = nu_of(policy)?;
    let nu_beta = nu_of(pi_beta)?;
    let nu_pi_c = nu_of(pi_c)?;
    let d_tv = max_tv_distance(policy, pi_beta)?;
    let d_kl = kl_divergence(policy, pi_beta, data_marginal)?;
    let eps = epsilon(nu_pi, nu_beta, cfg.beta, cfg.lambda, mdp.gamma(), d_tv);
    let window = eps.and_then(alpha_window);
    let mut reason = None;
    if eps.is_none() {
        reason = Some(if d_tv < DEFINED_FLOOR {
            "policy equals the behavior policy, epsilon undefined".to_string()
        } else {
            "lambda is zero, epsilon undefined".to_string()
        });
    } else if nu_pi - nu_beta <= 0.0 {
        reason = Some("nu(policy) does not exceed nu(behavior)".into());
    } else if !window.is_some_and(|(lo, hi)| cfg.alpha > lo && cfg.alpha < hi) {
        reason = Some(format!("alpha {} outside the window", cfg.alpha));
    }
    let j_policy = expected_return(mdp, policy)?;
    let j_beta = expected_return(mdp, pi_beta)?;
    let j_meta = expected_return(mdp, pi_c)?;
    Ok(TheoremReport {
        nu_pi,
        nu_beta,
        nu_pi_c,
        d_tv,
        d_kl,
        epsilon: eps,
        alpha_window: window,
        alpha_used: cfg.alpha,
        condition_met: reason.is_none(),
        reason,
        j_policy,
        j_beta,
        j_meta,
        improved_over_beta: j_policy >= j_beta,
        improved_over_meta: j_policy >= j_meta,
    })
}

/// Concentration constants of the dataset assumption. Only the sampling-error
/// bound below uses them; [`check_lemma1`] works with exact quantities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssumptionConstants {
    pub c_t: f64,
    pub c_r: f64,
}

impl Default for AssumptionConstants {
    fn default() -> Self {
        Self { c_t: 1.0, c_r: 1.0 }
    }
}

impl AssumptionConstants {
    /// `C_{r,T} = C_r / r_max + C_T`.
    pub fn c_rt(&self, r_max: f64) -> f64 {
        self.c_r / r_max + self.c_t
    }

    /// Bound on `|B_emp Q - B Q|` at a pair seen `count` times.
    pub fn backup_error_bound(&self, count: f64, r_max: f64, gamma: f64) -> f64 {
        self.c_rt(r_max) * r_max / ((1.0 - gamma) * count.sqrt())
    }

    /// Pairs where the empirical model breaks the assumed concentration:
    /// `||T_emp - T||_1 > C_T / sqrt(n)` or `|r_emp - r| > C_r / sqrt(n)`.
    pub fn violations(&self, truth: &TabularMdp, empirical: &TabularMdp, counts: &Array2<f64>) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for s in 0..truth.n_states() {
            for a in 0..truth.n_actions() {
                let n = counts[[s, a]];
                if n <= 0.0 {
                    continue;
                }
                let l1: f64 = (0..truth.n_states())
                    .map(|t| (truth.transition()[[s, a, t]] - empirical.transition()[[s, a, t]]).abs())
                    .sum();
                let dr = (truth.reward()[[s, a]] - empirical.reward()[[s, a]]).abs();
                if l1 > self.c_t / n.sqrt() || dr > self.c_r / n.sqrt() {
                    out.push((s, a));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LemmaOneReport {
    pub j_interp: f64,
    pub j_true: f64,
    pub eta_bound: f64,
    pub eta_terms: [f64; 4],
    pub holds: bool,
}

/// Compare the return in `f m1 + (1 - f) m2` (started from `m`'s start
/// distribution) with the return in `m`.
pub fn check_lemma1(
    m: &TabularMdp,
    m1: &TabularMdp,
    m2: &TabularMdp,
    f: f64,
    policy: &StochasticPolicy,
) -> Result<LemmaOneReport> {
    if !m.same_shape(m1) || !m.same_shape(m2) {
        return Err(MerpoError::ShapeMismatch("lemma MDPs differ in shape".into()));
    }
    if m1.gamma() != m.gamma() || m2.gamma() != m.gamma() {
        return Err(MerpoError::InvalidArgument("lemma MDPs differ in gamma".into()));
    }
    let interp = f_interpolant(m1, m2, f)?.with_init_dist(m.init_dist().clone())?;
    let j_interp = expected_return(&interp, policy)?;
    let j_true = expected_return(m, policy)?;
    let terms = eta_terms(m, m1, m2, f, policy)?;
    let eta = terms.iter().sum::<f64>();
    Ok(LemmaOneReport {
        j_interp,
        j_true,
        eta_bound: eta,
        eta_terms: terms,
        holds: (j_interp - j_true).abs() <= eta + 1e-9,
    })
}

pub fn eta_terms(m: &TabularMdp, m1: &TabularMdp, m2: &TabularMdp, f: f64, policy: &StochasticPolicy) -> Result<[f64; 4]> {
    let g = m.gamma();
    let (ns, na) = (m.n_states(), m.n_actions());
    let mut tv = 0.0f64;
    for s in 0..ns {
        for a in 0..na {
            let row: f64 = (0..ns)
                .map(|t| (m2.transition()[[s, a, t]] - m.transition()[[s, a, t]]).abs())
                .sum();
            tv = tv.max(0.5 * row);
        }
    }
    let q = exact_q(m, policy, EXACT_TOL)?;
    let v = q.state_values(policy);
    let d = discounted_marginal(m, policy)?;
    let dyn_gap = &m.expect_next(&v) - &m1.expect_next(&v);
    let model_term = d.expect(&dyn_gap).abs();
    let r_gap = |other: &TabularMdp| d.expect(&(m.reward() - other.reward()).mapv(f64::abs));
    Ok([
        2.0 * g * (1.0 - f) / (1.0 - g).powi(2) * m.r_max() * tv,
        g * f / (1.0 - g) * model_term,
        f / (1.0 - g) * r_gap(m1),
        (1.0 - f) / (1.0 - g) * r_gap(m2),
    ])
}

/// `m` blended toward a random MDP: transitions `(1 - eps) T + eps T'` and
/// rewards moved by at most `eps r_max`, clipped to `[-r_max, r_max]`.
pub fn perturbed_mdp<R: Rng + ?Sized>(m: &TabularMdp, eps: f64, rng: &mut R) -> Result<TabularMdp> {
    let other = TabularMdp::random(m.n_states(), m.n_actions(), m.gamma(), m.r_max(), rng);
    let t = m.transition() * (1.0 - eps) + other.transition() * eps;
    let r_max = m.r_max();
    let r = m.reward().mapv(|x| (x + eps * r_max * rng.random_range(-1.0..=1.0)).clamp(-r_max, r_max));
    TabularMdp::new(t, r, m.init_dist().clone(), m.gamma(), r_max)
}

/// A random instance of the kind the bound is applied to: `m1` and `m2` are
/// estimates of `m` at random accuracy.
pub fn random_lemma_instance<R: Rng + ?Sized>(
    rng: &mut R,
) -> Result<(TabularMdp, TabularMdp, TabularMdp, f64, StochasticPolicy)> {
    let ns = rng.random_range(2..=6);
    let na = rng.random_range(1..=3);
    let gamma = rng.random_range(0.5..0.95);
    let m = TabularMdp::random(ns, na, gamma, 1.0, rng);
    let e1 = rng.random_range(0.0..1.0);
    let e2 = rng.random_range(0.0..1.0);
    let m1 = perturbed_mdp(&m, e1, rng)?;
    let m2 = perturbed_mdp(&m, e2, rng)?;
    let f = rng.random_range(0.0..1.0);
    let normal = Normal::new(0.0, 1.5).expect("valid");
    let policy = StochasticPolicy::from_logits(Array2::from_shape_fn((ns, na), |_| normal.sample(rng)))?;
    Ok((m, m1, m2, f, policy))
}

/// Exact returns of RAC policies per alpha and seed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlphaSweep {
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    /// `returns[i][k]` is the return at `alphas[i]` on `seeds[k]`.
    pub returns: Vec<Vec<f64>>,
}

impl AlphaSweep {
    pub fn means(&self) -> Vec<f64> {
        self.returns.iter().map(|r| r.iter().sum::<f64>() / r.len().max(1) as f64).collect()
    }

    /// Index of the alpha with the largest mean return, if it beats every
    /// other alpha strictly.
    pub fn strict_peak(&self) -> Option<usize> {
        let m = self.means();
        let best = (0..m.len()).max_by(|&i, &j| m[i].total_cmp(&m[j]))?;
        m.iter().enumerate().all(|(i, v)| i == best || *v < m[best]).then_some(best)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,seed,return\n");
        for (a, row) in self.alphas.iter().zip(&self.returns) {
            for (s, j) in self.seeds.iter().zip(row) {
                out.push_str(&format!("{a},{s},{}\n", crate::textio::fmt_real(*j)));
            }
        }
        out
    }
}

/// Run RAC for every alpha on every seeded task of `scenario`.
pub fn alpha_sweep(
    scenario: &PreparedScenario,
    rac: &RacConfig,
    iters: usize,
    alphas: &[f64],
    seeds: &[u64],
) -> Result<AlphaSweep> {
    let returns = scenario.rac_returns(rac, iters, alphas, seeds)?;
    Ok(AlphaSweep {
        alphas: alphas.to_vec(),
        seeds: seeds.to_vec(),
        returns,
    })
}

/// Theorem checks on seeded scenario tasks: RAC is run for `iters`
/// iterations and the check uses its final `beta` and `lambda`.
pub fn theorem1_suite(scenario: &PreparedScenario, rac: &RacConfig, iters: usize, seeds: &[u64]) -> Result<Vec<(u64, TheoremReport)>> {
    use rayon::prelude::*;
    seeds
        .par_iter()
        .map(|&seed| {
            let inst = scenario.instance(seed)?;
            let st = crate::rac::solve(&inst.ctx, &inst.pi_c, rac, iters, crate::rng::SeedStream::new(seed), None, &mut Vec::new())?;
            let cfg = RacConfig {
                beta: st.beta,
                lambda: st.lambda,
                ..rac.clone()
            };
            let rep = check_theorem1(inst.hidden.mdp(), &st.policy, &inst.pi_beta, &inst.pi_c, &inst.ctx.learnt, &inst.ctx.data_marginal, &cfg)?;
            Ok((seed, rep))
        })
        .collect()
}

/// `n` random lemma instances drawn from one seed.
pub fn lemma1_suite(n: usize, seed: u64) -> Result<Vec<LemmaOneReport>> {
    let mut rng = crate::rng::SeedStream::new(seed).named("lemma1").rng();
    (0..n)
        .map(|_| {
            let (m, m1, m2, f, pi) = random_lemma_instance(&mut rng)?;
            check_lemma1(&m, &m1, &m2, f, &pi)
        })
        .collect()
}

pub fn theorem_csv(reports: &[(u64, TheoremReport)]) -> String {
    use crate::textio::fmt_real as r;
    let mut out = String::from(
        "seed,nu_pi,nu_beta,nu_pi_c,d_tv,d_kl,epsilon,alpha_lo,alpha_hi,alpha_used,condition_met,j_policy,j_beta,j_meta,improved_over_beta,improved_over_meta\n",
    );
    for (seed, t) in reports {
        let opt = |x: Option<f64>| x.map(r).unwrap_or_else(|| "NaN".into());
        out.push_str(&format!(
            "{seed},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r(t.nu_pi),
            r(t.nu_beta),
            r(t.nu_pi_c),
            r(t.d_tv),
            r(t.d_kl),
            opt(t.epsilon),
            opt(t.alpha_window.map(|w| w.0)),
            opt(t.alpha_window.map(|w| w.1)),
            t.alpha_used,
            t.condition_met,
            r(t.j_policy),
            r(t.j_beta),
            r(t.j_meta),
            t.improved_over_beta,
            t.improved_over_meta
        ));
    }
    out
}

pub fn lemma_csv(reports: &[LemmaOneReport]) -> String {
    use crate::textio::fmt_real as r;
    let mut out = String::from("instance,j_interp,j_true,eta,eta_dyn2,eta_dyn1,eta_r1,eta_r2,holds\n");
    for (i, l) in reports.iter().enumerate() {
        let t = l.eta_terms;
        out.push_str(&format!(
            "{i},{},{},{},{},{},{},{},{}\n",
            r(l.j_interp),
            r(l.j_true),
            r(l.eta_bound),
            r(t[0]),
            r(t[1]),
            r(t[2]),
            r(t[3]),
            l.holds
        ));
    }
    out
}
