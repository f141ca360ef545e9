//! Acceptance suite. Every criterion prints one PASS/FAIL line; the test
//! fails if any criterion does. Run with
//! `cargo test -p merpo --test acceptance -- --nocapture` to see the table
//! on success too.

use std::time::{Duration, Instant};

use merpo::harness::*;
use merpo::mdp::{discounted_marginal, MarginalDist, QTable, StochasticPolicy, TabularMdp};
use merpo::merpo::{task_contexts, train_from, MerpoConfig, MetaState, TaskResult};
use merpo::model::{fit_task_model, nll, proximal_gradient, proximal_objective, ModelConfig, ModelParams};
use merpo::rac::*;
use merpo::rng::SeedStream;
use merpo::tasks::{BehaviorQuality, OfflineDataset};
use merpo::theory::lemma1_suite;
use ndarray::{Array1, Array2};
use rand::Rng;

const C1_TOL: f64 = 1e-10;
const C1_SWEEPS: usize = 300;
const C2_NU_FLOOR: f64 = -1e-10;
const C2_MONO_SLACK: f64 = 1e-12;
const C4_BC_TV: f64 = 0.01;
const C4_EMPIRICAL_TOL: f64 = 1e-6;
const C5_SLACK_FRAC: f64 = 0.01;
const C5_SAFE_RATE: f64 = 0.85;
const C6_WIN_RATE: f64 = 0.80;
const C9_WIN_RATE: f64 = 0.80;
const C11_P: f64 = 0.05;
const C13_REL_TOL: f64 = 1e-4;
const C13_ABS_FLOOR: f64 = 1e-9;
const RAC_ITERS: usize = 40;

/// Desk-scale RAC settings shared by C5 to C10.
fn desk_rac() -> RacConfig {
    RacConfig {
        alpha: 0.4,
        beta: 0.01,
        lambda: 0.02,
        f: 0.3,
        auto_beta: true,
        log_beta: true,
        tau: 2.0,
        beta_lr: 0.5,
        auto_lambda: true,
        d_target: 0.1,
        lambda_lr: 0.01,
        variant: ImprovementVariant::KlPractical,
        ..Default::default()
    }
}

fn desk_experiment() -> ExperimentConfig {
    ExperimentConfig {
        seeds: (0..20).collect(),
        rac_iters: RAC_ITERS,
        merpo: MerpoConfig {
            rac: desk_rac(),
            adapt_steps: 40,
            ..Default::default()
        },
        ..Default::default()
    }
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn run(id: &str, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let t0 = Instant::now();
    let out = f();
    let took = t0.elapsed();
    let in_time = limit.is_none_or(|l| took <= l);
    let pass = out.pass && in_time;
    let limit_note = match limit {
        Some(l) => format!(" limit {:.0}s", l.as_secs_f64()),
        None => String::new(),
    };
    println!(
        "{id:<4} {:<4} {name:<34} {} [{:.1}s{limit_note}]",
        if pass { "PASS" } else { "FAIL" },
        out.detail,
        took.as_secs_f64()
    );
    pass
}

fn random_policy<R: Rng>(ns: usize, na: usize, rng: &mut R) -> StochasticPolicy {
    StochasticPolicy::from_logits(Array2::from_shape_fn((ns, na), |_| rng.random_range(-2.0..2.0))).unwrap()
}

fn random_marginal<R: Rng>(ns: usize, na: usize, rng: &mut R, sparsity: f64) -> MarginalDist {
    let w = Array2::from_shape_fn((ns, na), |_| if rng.random::<f64>() < sparsity { 0.0 } else { rng.random::<f64>() });
    let w = if w.sum() > 0.0 { w } else { Array2::ones((ns, na)) };
    MarginalDist::from_weights(w).unwrap()
}

/// Straight loops over the raw tables, no shared helpers.
fn oracle_eval(
    pi: &StochasticPolicy,
    emp: &TabularMdp,
    learnt: &TabularMdp,
    rho: &MarginalDist,
    d: &MarginalDist,
    f: f64,
    beta: f64,
    clip: f64,
    sweeps: usize,
) -> Array2<f64> {
    let (ns, na) = (emp.n_states(), emp.n_actions());
    let bound = clip * emp.r_max() / (1.0 - emp.gamma());
    let mut q = Array2::<f64>::zeros((ns, na));
    for _ in 0..sweeps {
        let mut v = vec![0.0; ns];
        for s in 0..ns {
            for a in 0..na {
                v[s] += pi.prob(s, a) * q[[s, a]];
            }
        }
        let mut next = Array2::<f64>::zeros((ns, na));
        for s in 0..ns {
            for a in 0..na {
                let mut be = emp.reward()[[s, a]];
                let mut bl = learnt.reward()[[s, a]];
                for s2 in 0..ns {
                    be += emp.gamma() * emp.transition()[[s, a, s2]] * v[s2];
                    bl += learnt.gamma() * learnt.transition()[[s, a, s2]] * v[s2];
                }
                let r = rho.get(s, a);
                let dd = d.get(s, a);
                let df = (f * dd + (1.0 - f) * r).max(1e-12);
                let pen = beta * (r - dd) / df;
                next[[s, a]] = (f * be + (1.0 - f) * bl - pen).clamp(-bound, bound);
            }
        }
        q = next;
    }
    q
}

fn c1() -> Outcome {
    let mut worst = 0.0f64;
    for i in 0..25u64 {
        let mut rng = SeedStream::new(1000 + i).rng();
        let ns = rng.random_range(2..9);
        let na = rng.random_range(1..5);
        let gamma = rng.random_range(0.5..0.95);
        let emp = TabularMdp::random(ns, na, gamma, 1.0, &mut rng);
        let learnt = TabularMdp::random(ns, na, gamma, 1.0, &mut rng);
        let pi = random_policy(ns, na, &mut rng);
        let rho = random_marginal(ns, na, &mut rng, 0.0);
        let d = random_marginal(ns, na, &mut rng, 0.3);
        let cfg = RacConfig {
            f: rng.random_range(0.05..0.95),
            beta: rng.random_range(0.0..2.0),
            eval_sweeps: C1_SWEEPS,
            eval_tol: f64::MIN_POSITIVE,
            ..Default::default()
        };
        let q0 = QTable::zeros(ns, na);
        let got = conservative_evaluate_from(&pi, &emp, &learnt, &rho, &d, &cfg, &q0).unwrap();
        let want = oracle_eval(&pi, &emp, &learnt, &rho, &d, cfg.f, cfg.beta, cfg.q_clip, got.sweeps);
        let diff = (&got.q.values - &want).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        worst = worst.max(diff);
    }
    Outcome {
        pass: worst <= C1_TOL,
        detail: format!("max |Q - oracle| {worst:.2e} over 25 instances (tol {C1_TOL:.0e})"),
    }
}

fn c2() -> Outcome {
    let grid: Vec<f64> = (1..20).map(|k| k as f64 * 0.05).collect();
    let (mut min_nu, mut worst_drop) = (f64::INFINITY, 0.0f64);
    let mut bad = 0;
    for i in 0..200u64 {
        let mut rng = SeedStream::new(2000 + i).rng();
        let ns = rng.random_range(2..8);
        let na = rng.random_range(1..4);
        let learnt = TabularMdp::random(ns, na, rng.random_range(0.5..0.95), 1.0, &mut rng);
        let pi = random_policy(ns, na, &mut rng);
        let rho = discounted_marginal(&learnt, &pi).unwrap();
        let d = random_marginal(ns, na, &mut rng, 0.4);
        let nus: Vec<f64> = grid.iter().map(|&f| nu(&rho, &d, f)).collect();
        let lo = nus.iter().copied().fold(f64::INFINITY, f64::min);
        let drop = nus.windows(2).map(|w| w[0] - w[1]).fold(0.0f64, f64::max);
        min_nu = min_nu.min(lo);
        worst_drop = worst_drop.max(drop);
        if lo < C2_NU_FLOOR || drop > C2_MONO_SLACK {
            bad += 1;
        }
    }
    Outcome {
        pass: bad == 0,
        detail: format!("min nu {min_nu:.2e}, largest decrease in f {worst_drop:.2e}, {bad}/200 bad"),
    }
}

fn c3() -> Outcome {
    let reps = lemma1_suite(100, 3000).unwrap();
    let bad = reps.iter().filter(|r| !r.holds).count();
    let tight = reps.iter().map(|r| (r.j_interp - r.j_true).abs() / r.eta_bound.max(1e-300)).fold(0.0f64, f64::max);
    Outcome {
        pass: bad == 0 && reps.len() == 100,
        detail: format!("{bad} violations in {} instances (max |gap|/bound {tight:.3})", reps.len()),
    }
}

fn c4() -> Outcome {
    let sc = PreparedScenario::new(&ScenarioConfig::default(), &ModelConfig::default()).unwrap();
    let inst = sc.instance_with(0, BehaviorQuality::Medium, MetaPolicyKind::Expert).unwrap();
    let ctx = &inst.ctx;

    let bc_cfg = RacConfig {
        alpha: 1.0,
        lambda: 1e6,
        auto_lambda: false,
        ..desk_rac()
    };
    let st = solve(ctx, &inst.pi_c, &bc_cfg, 5, SeedStream::new(4), None, &mut Vec::new()).unwrap();
    let pb = ctx.behavior.floored_policy();
    let bc_tv = (0..ctx.shape.n_states)
        .filter(|&s| ctx.behavior.supported(s))
        .map(|s| merpo::mdp::state_tv(&st.policy, &pb, s))
        .fold(0.0f64, f64::max);

    let mut rng = SeedStream::new(44).rng();
    let (ns, na) = (ctx.shape.n_states, ctx.shape.n_actions);
    let q = QTable::new(Array2::from_shape_fn((ns, na), |_| rng.random_range(0.0..3.0)));
    let pi = random_policy(ns, na, &mut rng);
    let rho_state = Array1::from_shape_fn(ns, |_| rng.random::<f64>());
    let inputs = ImproveInputs {
        q: &q,
        behavior: &ctx.behavior,
        pi_c: &inst.pi_c,
        rho_state: &rho_state,
    };
    let meta_cfg = RacConfig {
        alpha: 0.0,
        lambda: 1.7,
        ..desk_rac()
    };
    let a = improvement_objective(&inputs, &pi, &meta_cfg);
    let b = meta_regularized_objective(&q, &rho_state, &inst.pi_c, &pi, 1.7);
    let bit_match = a.to_bits() == b.to_bits();

    let near_one = RacConfig {
        f: 1.0 - 1e-9,
        beta: 0.5,
        eval_tol: 1e-13,
        ..Default::default()
    };
    let rho = discounted_marginal(&ctx.learnt, &pi).unwrap();
    let got = conservative_evaluate_from(&pi, &ctx.empirical.mdp, &ctx.learnt, &rho, &ctx.data_marginal, &near_one, &QTable::zeros(ns, na)).unwrap();
    let only_emp = conservative_evaluate_from(
        &pi,
        &ctx.empirical.mdp,
        &ctx.empirical.mdp,
        &rho,
        &ctx.data_marginal,
        &near_one,
        &QTable::zeros(ns, na),
    )
    .unwrap();
    let emp_gap = got.q.max_abs_diff(&only_emp.q);

    Outcome {
        pass: bc_tv <= C4_BC_TV && bit_match && emp_gap <= C4_EMPIRICAL_TOL,
        detail: format!("BC max TV {bc_tv:.2e}; alpha=0 bit-match {bit_match}; f->1 gap {emp_gap:.2e}"),
    }
}

fn c5(sc: &PreparedScenario) -> Outcome {
    let seeds: Vec<u64> = (0..100).collect();
    let alphas = [0.4, 0.9];
    let returns = sc.rac_returns(&desk_rac(), RAC_ITERS, &alphas, &seeds).unwrap();
    let mut safe = [0usize; 2];
    for (k, &seed) in seeds.iter().enumerate() {
        let inst = sc.instance(seed).unwrap();
        let shape = inst.hidden.shape();
        let floor = inst.j_beta.max(inst.j_c) - C5_SLACK_FRAC * shape.r_max / (1.0 - shape.gamma);
        for i in 0..2 {
            if returns[i][k] >= floor {
                safe[i] += 1;
            }
        }
    }
    let rate = safe[0] as f64 / 100.0;
    Outcome {
        pass: rate >= C5_SAFE_RATE && safe[1] < safe[0],
        detail: format!("safe on {}/100 at alpha 0.4, {}/100 at alpha 0.9", safe[0], safe[1]),
    }
}

fn wins(a: &[f64], b: &[f64]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x >= y).count()
}

fn c6() -> Outcome {
    let model = ModelConfig::default();
    let seeds: Vec<u64> = (0..50).collect();
    let random_meta = ScenarioConfig {
        meta_policies: vec![MetaPolicyKind::Random],
        ..Default::default()
    };
    let sc = PreparedScenario::new(&random_meta, &model).unwrap();
    let r = sc.rac_returns(&desk_rac(), RAC_ITERS, &[0.4, 0.0], &seeds).unwrap();
    let vs_combo3 = wins(&r[0], &r[1]);
    let good_meta_poor_data = ScenarioConfig {
        meta_policies: vec![MetaPolicyKind::Expert],
        data_qualities: vec![BehaviorQuality::Random],
        ..Default::default()
    };
    let sc = PreparedScenario::new(&good_meta_poor_data, &model).unwrap();
    let r = sc.rac_returns(&desk_rac(), RAC_ITERS, &[0.4, 1.0], &seeds).unwrap();
    let vs_combo = wins(&r[0], &r[1]);
    let need = (C6_WIN_RATE * 50.0).ceil() as usize;
    Outcome {
        pass: vs_combo3 >= need && vs_combo >= need,
        detail: format!("RAC >= COMBO-3 on {vs_combo3}/50 (random meta), RAC >= COMBO on {vs_combo}/50 (good meta, poor data)"),
    }
}

fn c7(sc: &PreparedScenario) -> Outcome {
    let seeds: Vec<u64> = (0..100).collect();
    let alphas = [0.0, 0.4, 0.7, 1.0];
    let sweep = merpo::theory::alpha_sweep(sc, &desk_rac(), RAC_ITERS, &alphas, &seeds).unwrap();
    let means = sweep.means();
    let peak = sweep.strict_peak();
    let shown: Vec<String> = alphas.iter().zip(&means).map(|(a, m)| format!("{a}:{m:.4}")).collect();
    Outcome {
        pass: peak == Some(1),
        detail: format!("mean return by alpha over {} seeds [{}]", seeds.len(), shown.join(" ")),
    }
}

struct MetaRuns {
    fixed: Vec<f64>,
    adaptive: Vec<f64>,
    meta_only: Vec<f64>,
    no_model: Vec<f64>,
    alpha_violations: usize,
    alpha_range: (f64, f64),
}

fn final_return(tasks: &MetaTaskSet, cfg: &MerpoConfig, seed: u64) -> f64 {
    let rows = merpo_run(tasks, cfg, cfg.outer_iters, seed).unwrap();
    rows.last().unwrap()[1]
}

fn meta_runs() -> MetaRuns {
    use rayon::prelude::*;
    let exp = desk_experiment();
    let fixed_cfg = MerpoConfig {
        adaptive_alpha: false,
        ..exp.merpo.clone()
    };
    let adp_cfg = MerpoConfig {
        adaptive_alpha: true,
        ..fixed_cfg.clone()
    };
    let per_seed: Vec<[f64; 4]> = exp
        .seeds
        .par_iter()
        .map(|&seed| {
            let tasks = MetaTaskSet::build(&exp, seed, None).unwrap();
            [
                final_return(&tasks, &fixed_cfg, seed),
                final_return(&tasks, &adp_cfg, seed),
                final_return(&tasks, &meta_only_config(&fixed_cfg), seed),
                final_return(&tasks, &no_model_config(&fixed_cfg), seed),
            ]
        })
        .collect();
    // Separate pass over the adaptive runs that watches every alpha_n.
    let bounds = adp_cfg.alpha_bounds;
    let traj: Vec<(usize, f64, f64)> = exp
        .seeds
        .par_iter()
        .map(|&seed| {
            let tasks = MetaTaskSet::build(&exp, seed, None).unwrap();
            let root = SeedStream::new(seed);
            let ctx = task_contexts(&tasks.train_data, &tasks.shape, &tasks.meta_model, &adp_cfg.model, root.named("train-models")).unwrap();
            let state = MetaState::new(&tasks.shape, ctx.len(), &adp_cfg);
            let (mut bad, mut lo, mut hi) = (0usize, f64::INFINITY, f64::NEG_INFINITY);
            let mut watch = |st: &MetaState, _: &[TaskResult]| -> merpo::Result<()> {
                for &a in &st.alpha_per_task {
                    lo = lo.min(a);
                    hi = hi.max(a);
                    if !(bounds.0..=bounds.1).contains(&a) {
                        bad += 1;
                    }
                }
                Ok(())
            };
            train_from(&ctx, state, &adp_cfg, root.named("merpo"), &mut watch).unwrap();
            (bad, lo, hi)
        })
        .collect();
    let col = |k: usize| per_seed.iter().map(|r| r[k]).collect::<Vec<f64>>();
    MetaRuns {
        fixed: col(0),
        adaptive: col(1),
        meta_only: col(2),
        no_model: col(3),
        alpha_violations: traj.iter().map(|t| t.0).sum(),
        alpha_range: (
            traj.iter().map(|t| t.1).fold(f64::INFINITY, f64::min),
            traj.iter().map(|t| t.2).fold(f64::NEG_INFINITY, f64::max),
        ),
    }
}

fn c8(m: &MetaRuns) -> Outcome {
    let (mf, sf) = mean_std(&m.fixed);
    let (ma, sa) = mean_std(&m.adaptive);
    let pooled = ((sf * sf + sa * sa) / 2.0).sqrt();
    Outcome {
        pass: ma >= mf - pooled && m.alpha_violations == 0,
        detail: format!(
            "Adp {ma:.4} vs fixed {mf:.4} (pooled std {pooled:.4}); alpha in [{:.4}, {:.4}], {} violations",
            m.alpha_range.0, m.alpha_range.1, m.alpha_violations
        ),
    }
}

fn c9(m: &MetaRuns) -> Outcome {
    let w = m.fixed.iter().zip(&m.meta_only).filter(|(a, b)| a > b).count();
    let n = m.fixed.len();
    Outcome {
        pass: w as f64 >= C9_WIN_RATE * n as f64,
        detail: format!(
            "MerPO beats meta-only baseline on {w}/{n} seeds (means {:.4} vs {:.4})",
            mean_std(&m.fixed).0,
            mean_std(&m.meta_only).0
        ),
    }
}

fn c10(m: &MetaRuns) -> Outcome {
    let (a, b) = (mean_std(&m.fixed).0, mean_std(&m.no_model).0);
    Outcome {
        pass: a > b,
        detail: format!("MerPO {a:.4} vs no-model {b:.4}"),
    }
}

/// One-sided sign test: P(X >= k) for X ~ Binomial(n, 1/2).
fn sign_test_p(k: usize, n: usize) -> f64 {
    let mut total = 0.0;
    for j in k..=n {
        let mut c = 1.0;
        for i in 0..j {
            c *= (n - i) as f64 / (i + 1) as f64;
        }
        total += c;
    }
    total / 2f64.powi(n as i32)
}

fn c11() -> Outcome {
    let model_cfg = ModelConfig::default();
    let sc_cfg = ScenarioConfig {
        n_transitions: 300,
        ..Default::default()
    };
    let held = PreparedScenario::new(&sc_cfg, &model_cfg).unwrap();
    let scratch = ModelParams::zeros(held.shape.n_states, held.shape.n_actions);
    let mut better = 0;
    let (mut sum_meta, mut sum_scratch) = (0.0, 0.0);
    for k in 0..20u64 {
        let inst = held.instance_with(500 + k, BehaviorQuality::Medium, MetaPolicyKind::Random).unwrap();
        let (train, val): (OfflineDataset, OfflineDataset) = inst.data.split(0.5, SeedStream::new(k)).unwrap();
        let steps = model_cfg.adaptation_steps;
        let from_meta = fit_task_model(&train, &held.meta_model, model_cfg.eta, steps, model_cfg.task_lr).unwrap();
        let from_zero = fit_task_model(&train, &scratch, model_cfg.eta, steps, model_cfg.task_lr).unwrap();
        let (a, b) = (nll(&from_meta, &val).unwrap(), nll(&from_zero, &val).unwrap());
        sum_meta += a;
        sum_scratch += b;
        if a <= b {
            better += 1;
        }
    }
    let p = sign_test_p(better, 20);
    Outcome {
        pass: p < C11_P,
        detail: format!(
            "meta <= scratch held-out NLL on {better}/20 tasks, sign test p {p:.2e} (mean {:.3} vs {:.3})",
            sum_meta / 20.0,
            sum_scratch / 20.0
        ),
    }
}

fn c12() -> Outcome {
    let mut cfg = ExperimentConfig::from_toml(
        r#"
seeds = [0, 1, 2]
rac_iters = 5
n_train_tasks = 3
n_test_tasks = 2
eval_every = 1
[scenario]
prior_tasks = 3
n_transitions = 600
[merpo]
outer_iters = 3
inner_steps = 2
adapt_steps = 3
task_batch_size = 2
"#,
    )
    .unwrap();
    let mut identical = true;
    let mut n_files = 0;
    for suite in [SuiteKind::RacComparison, SuiteKind::AlphaSweep, SuiteKind::MerpoAdaptive, SuiteKind::Ablations] {
        cfg.suite = suite;
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_outputs(d1.path(), &run_suite(&cfg).unwrap()).unwrap();
        write_outputs(d2.path(), &run_suite(&cfg).unwrap()).unwrap();
        let read = |d: &std::path::Path| {
            let mut v: Vec<(String, Vec<u8>)> = std::fs::read_dir(d)
                .unwrap()
                .map(|e| {
                    let p = e.unwrap().path();
                    (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
                })
                .collect();
            v.sort();
            v
        };
        let (a, b) = (read(d1.path()), read(d2.path()));
        n_files += a.len();
        identical &= a == b;
    }
    Outcome {
        pass: identical,
        detail: format!("{n_files} CSV files over 4 suites, bit-identical on rerun: {identical}"),
    }
}

fn c13() -> Outcome {
    let sc = PreparedScenario::new(
        &ScenarioConfig {
            n_transitions: 800,
            ..Default::default()
        },
        &ModelConfig::default(),
    )
    .unwrap();
    let (ns, na) = (sc.shape.n_states, sc.shape.n_actions);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for k in 0..10u64 {
        let mut rng = SeedStream::new(1300 + k).rng();
        let data = sc.instance_with(k, BehaviorQuality::Random, MetaPolicyKind::Random).unwrap().data;
        let theta = ModelParams::random(ns, na, 1.0, &mut rng);
        let anchor = ModelParams::random(ns, na, 1.0, &mut rng);
        let eta = rng.random_range(0.0..0.5);
        let g = proximal_gradient(&theta, &data, &anchor, eta).unwrap();
        let obj = |p: &ModelParams| proximal_objective(p, &data, &anchor, eta).unwrap();
        let mut check = |analytic: f64, bump: &dyn Fn(&mut ModelParams, f64)| {
            let (mut up, mut down) = (theta.clone(), theta.clone());
            bump(&mut up, h);
            bump(&mut down, -h);
            let fd = (obj(&up) - obj(&down)) / (2.0 * h);
            let err = (analytic - fd).abs() / (analytic.abs().max(fd.abs()) + C13_ABS_FLOOR / C13_REL_TOL);
            worst = worst.max(err);
        };
        for _ in 0..20 {
            let (s, a, s2) = (rng.random_range(0..ns), rng.random_range(0..na), rng.random_range(0..ns));
            check(g.trans_logits[[s, a, s2]], &|p, d| p.trans_logits[[s, a, s2]] += d);
            check(g.reward_est[[s, a]], &|p, d| p.reward_est[[s, a]] += d);
        }
    }
    Outcome {
        pass: worst <= C13_REL_TOL,
        detail: format!("max relative error {worst:.2e} at 10 points x 40 coordinates (tol {C13_REL_TOL:.0e})"),
    }
}

#[test]
fn acceptance() {
    let secs = Duration::from_secs;
    let mut ok = vec![run("C1", "oracle equivalence", Some(secs(10)), c1)];
    ok.push(run("C2", "penalty properties", Some(secs(30)), c2));
    ok.push(run("C3", "interpolated return bound", Some(secs(60)), c3));
    ok.push(run("C4", "degenerate reductions", None, c4));
    let scenario = PreparedScenario::new(&ScenarioConfig::default(), &ModelConfig::default()).unwrap();
    ok.push(run("C5", "safe policy improvement", Some(secs(300)), || c5(&scenario)));
    ok.push(run("C6", "RAC vs COMBO / COMBO-3", Some(secs(600)), c6));
    ok.push(run("C7", "alpha sweep peaks at 0.4", None, || c7(&scenario)));
    let t0 = Instant::now();
    let meta = meta_runs();
    println!("     (meta-training runs for C8-C10: {:.1}s)", t0.elapsed().as_secs_f64());
    ok.push(run("C8", "adaptive alpha", None, || c8(&meta)));
    ok.push(run("C9", "MerPO vs meta-only baseline", None, || c9(&meta)));
    ok.push(run("C10", "MerPO vs no-model ablation", None, || c10(&meta)));
    ok.push(run("C11", "meta-model benefit", None, c11));
    ok.push(run("C12", "determinism", None, c12));
    ok.push(run("C13", "model gradient check", None, c13));
    let failed: Vec<String> = ok.iter().enumerate().filter(|(_, p)| !**p).map(|(i, _)| format!("C{}", i + 1)).collect();
    println!("{} of {} criteria pass", ok.len() - failed.len(), ok.len());
    assert!(failed.is_empty(), "failed: {}", failed.join(", "));
}
