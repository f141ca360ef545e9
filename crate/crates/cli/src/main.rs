use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use merpo::harness::{
    merpo_row, rac_trace_csv, read_records, run_suite, write_outputs, ExperimentConfig, HiddenTask, MetaTaskSet, PreparedScenario, RunRecord,
    MERPO_COLUMNS, OUTPUT_ROOT_ENV,
};
use merpo::merpo::{adapt_new_task, task_contexts, train_from, MerpoConfig, MetaState, TaskResult};
use merpo::model::ModelParams;
use merpo::rac::{solve, ImprovementVariant, RacConfig};
use merpo::rng::SeedStream;
use merpo::tasks::{sample_tasks, BehaviorQuality, FamilyKind, OfflineDataset, TaskFamily};
use merpo::textio::{mdp_from_doc, mdp_to_doc, policy_from_doc, policy_to_doc, q_to_doc, Document};
use merpo::theory::{alpha_sweep, lemma1_suite, lemma_csv, theorem1_suite, theorem_csv};
use merpo::{MerpoError, StochasticPolicy};

#[derive(Parser)]
#[command(name = "merpo", version, about = "Tabular offline meta-RL experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample tasks from a family and write each task, its behavior policy and dataset.
    GenData {
        #[arg(long, value_enum, default_value = "gridworld-wind")]
        family: Family,
        #[arg(long, default_value_t = 4)]
        size: usize,
        #[arg(long, default_value_t = 0.4)]
        range: f64,
        #[arg(long, default_value_t = 1000)]
        family_seed: u64,
        #[arg(long, default_value_t = 4)]
        tasks: usize,
        #[arg(long, default_value = "medium")]
        quality: BehaviorQuality,
        #[arg(long, default_value_t = 5000)]
        transitions: usize,
        #[arg(long, default_value_t = 0.1)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run RAC on one dataset; the task file is used only to report true returns.
    TrainRac {
        #[arg(long)]
        task: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Meta-policy file; uniform when absent.
        #[arg(long)]
        meta_policy: Option<PathBuf>,
        /// Meta-model checkpoint; zero logits when absent.
        #[arg(long)]
        meta_model: Option<PathBuf>,
        /// TOML file with RAC settings; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        f: Option<f64>,
        #[arg(long, value_enum)]
        variant: Option<Variant>,
        #[arg(long, default_value_t = 40)]
        iters: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Meta-train on the experiment's training tasks.
    TrainMerpo {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write a checkpoint every K outer iterations.
        #[arg(long, default_value_t = 10)]
        checkpoint_every: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Adapt a trained meta-policy to a new dataset.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        meta_model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// True task, used only for the J_true column.
        #[arg(long)]
        task: PathBuf,
        /// Experiment TOML supplying the MerPO settings; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Numeric theory checks.
    CheckTheory {
        #[arg(long, value_enum)]
        suite: TheorySuite,
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Experiment TOML for the scenario and RAC settings.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a benchmark suite described by an experiment TOML.
    RunSuite {
        #[arg(long)]
        config: PathBuf,
    },
    /// Recompute summary.csv and plot_data.csv from a suite's cell CSVs.
    Summarize {
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    GridworldWind,
    PointGridGoal,
    RewardFlip,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    TvTheory,
    KlPractical,
}

#[derive(Clone, Copy, ValueEnum)]
enum TheorySuite {
    Theorem1,
    Lemma1,
    AlphaSweep,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                MerpoError::Config(_) | MerpoError::Parse { .. } => ExitCode::from(2),
                _ => ExitCode::from(3),
            }
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> MerpoError {
    MerpoError::Config(e.to_string())
}

fn read_policy(path: &Path) -> merpo::Result<StochasticPolicy> {
    policy_from_doc(&Document::read_file(path)?)
}

fn read_experiment(path: &Path) -> merpo::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    ExperimentConfig::from_toml(&text)
}

fn run(cmd: Command) -> merpo::Result<()> {
    match cmd {
        Command::GenData {
            family,
            size,
            range,
            family_seed,
            tasks,
            quality,
            transitions,
            temperature,
            seed,
            out,
        } => {
            let kind = match family {
                Family::GridworldWind => FamilyKind::GridworldWind,
                Family::PointGridGoal => FamilyKind::PointGridGoal,
                Family::RewardFlip => FamilyKind::RewardFlip,
            };
            let fam = TaskFamily::new(kind, size, (-range, range), family_seed);
            std::fs::create_dir_all(&out)?;
            for (i, mdp) in sample_tasks(&fam, tasks)?.into_iter().enumerate() {
                mdp_to_doc(&mdp).write_file(out.join(format!("task{i}.mdp")))?;
                let task = HiddenTask::new(mdp);
                let pb = task.behavior_policy(quality, temperature)?;
                policy_to_doc(&pb).write_file(out.join(format!("behavior{i}.policy")))?;
                task.collect(&pb, quality, i, transitions, seed.wrapping_add(i as u64))?
                    .write_file(out.join(format!("data{i}.txt")))?;
            }
            println!("wrote {tasks} tasks to {}", out.display());
        }
        Command::TrainRac {
            task,
            data,
            meta_policy,
            meta_model,
            config,
            alpha,
            beta,
            lambda,
            f,
            variant,
            iters,
            seed,
            out,
        } => {
            let mut cfg = match config {
                Some(p) => toml::from_str::<RacConfig>(&std::fs::read_to_string(p)?).map_err(config_err)?,
                None => RacConfig::default(),
            };
            cfg.alpha = alpha.unwrap_or(cfg.alpha);
            cfg.beta = beta.unwrap_or(cfg.beta);
            cfg.lambda = lambda.unwrap_or(cfg.lambda);
            cfg.f = f.unwrap_or(cfg.f);
            if let Some(v) = variant {
                cfg.variant = match v {
                    Variant::TvTheory => ImprovementVariant::TvTheory,
                    Variant::KlPractical => ImprovementVariant::KlPractical,
                };
            }
            cfg.validate()?;
            let hidden = HiddenTask::new(mdp_from_doc(&Document::read_file(&task)?)?);
            let shape = hidden.shape();
            let data = OfflineDataset::read_file(&data)?;
            let pi_c = match meta_policy {
                Some(p) => read_policy(&p)?,
                None => StochasticPolicy::uniform(shape.n_states, shape.n_actions),
            };
            let phi = match meta_model {
                Some(p) => ModelParams::from_doc(&Document::read_file(p)?)?,
                None => ModelParams::zeros(shape.n_states, shape.n_actions),
            };
            let ctx = merpo::rac::TaskContext::fit(&data, &shape, &phi, &Default::default(), SeedStream::new(seed).named("model"))?;
            let mut trace = Vec::new();
            let st = solve(&ctx, &pi_c, &cfg, iters, SeedStream::new(seed), Some(&hidden), &mut trace)?;
            std::fs::create_dir_all(&out)?;
            policy_to_doc(&st.policy).write_file(out.join("policy.txt"))?;
            q_to_doc(&st.q).write_file(out.join("q.txt"))?;
            std::fs::write(out.join("trace.csv"), rac_trace_csv(&trace))?;
            if let Some(last) = trace.last() {
                println!("J_true {:.6} after {} iterations", last.j_true, trace.len());
            }
        }
        Command::TrainMerpo {
            config,
            seed,
            checkpoint_every,
            out,
        } => {
            let cfg = read_experiment(&config)?;
            let out = out.unwrap_or_else(|| cfg.resolved_output_dir());
            std::fs::create_dir_all(&out)?;
            let tasks = MetaTaskSet::build(&cfg, seed, None)?;
            tasks.meta_model.to_doc().write_file(out.join("meta_model.txt"))?;
            let mcfg: &MerpoConfig = &cfg.merpo;
            let root = SeedStream::new(seed);
            let contexts = task_contexts(&tasks.train_data, &tasks.shape, &tasks.meta_model, &mcfg.model, root.named("train-models"))?;
            let test_ctx = tasks.test_contexts(&mcfg.model, root.named("test-models"))?;
            let eval_seed = root.named("test");
            let state = MetaState::new(&tasks.shape, contexts.len(), mcfg);
            let rows = std::cell::RefCell::new(Vec::new());
            let push_row = |st: &MetaState| -> merpo::Result<()> {
                let j = tasks.mean_test_return(&test_ctx, st, mcfg, eval_seed.child(st.iter as u64))?;
                println!("iter {:>4}  mean test return {j:.4}", st.iter);
                rows.borrow_mut().push(merpo_row(st, j));
                Ok(())
            };
            push_row(&state)?;
            let outer = mcfg.outer_iters;
            let every = cfg.eval_every.max(1);
            let mut observer = |st: &MetaState, _: &[TaskResult]| -> merpo::Result<()> {
                if st.iter.is_multiple_of(every) || st.iter == outer {
                    push_row(st)?;
                }
                if checkpoint_every > 0 && st.iter.is_multiple_of(checkpoint_every) {
                    st.to_doc().write_file(out.join(format!("checkpoint_{:05}.txt", st.iter)))?;
                }
                Ok(())
            };
            let fin = train_from(&contexts, state, mcfg, root.named("merpo"), &mut observer)?;
            fin.to_doc().write_file(out.join("meta_state.txt"))?;
            let record = RunRecord {
                config_hash: cfg.hash(),
                experiment: "merpo".into(),
                seed,
                columns: MERPO_COLUMNS.iter().map(|c| c.to_string()).collect(),
                rows: rows.into_inner(),
                metric: 1,
                error: None,
            };
            std::fs::write(out.join("train.csv"), record.to_csv())?;
        }
        Command::Adapt {
            checkpoint,
            meta_model,
            data,
            task,
            config,
            steps,
            seed,
            out,
        } => {
            let mcfg = match config {
                Some(p) => read_experiment(&p)?.merpo,
                None => MerpoConfig::default(),
            };
            let state = MetaState::from_doc(&Document::read_file(&checkpoint)?)?;
            let phi = ModelParams::from_doc(&Document::read_file(&meta_model)?)?;
            let hidden = HiddenTask::new(mdp_from_doc(&Document::read_file(&task)?)?);
            let data = OfflineDataset::read_file(&data)?;
            let mut trace = Vec::new();
            let steps = steps.unwrap_or(mcfg.adapt_steps);
            let st = adapt_new_task(&state, &phi, &data, &hidden.shape(), &mcfg, steps, SeedStream::new(seed), Some(&hidden), &mut trace)?;
            std::fs::create_dir_all(&out)?;
            policy_to_doc(&st.policy).write_file(out.join("policy.txt"))?;
            q_to_doc(&st.q).write_file(out.join("q.txt"))?;
            std::fs::write(out.join("trace.csv"), rac_trace_csv(&trace))?;
            if let Some(last) = trace.last() {
                println!("J_true {:.6} after {steps} steps", last.j_true);
            }
        }
        Command::CheckTheory { suite, seeds, config, out } => {
            let cfg = match config {
                Some(p) => read_experiment(&p)?,
                None => ExperimentConfig::default(),
            };
            std::fs::create_dir_all(&out)?;
            let seed_list: Vec<u64> = (0..seeds).collect();
            match suite {
                TheorySuite::Lemma1 => {
                    let reps = lemma1_suite(seeds as usize, 0)?;
                    std::fs::write(out.join("lemma1.csv"), lemma_csv(&reps))?;
                    let bad = reps.iter().filter(|r| !r.holds).count();
                    println!("lemma1: {bad} violations in {} instances", reps.len());
                }
                TheorySuite::Theorem1 => {
                    let sc = PreparedScenario::new(&cfg.scenario, &cfg.merpo.model)?;
                    let rac = RacConfig { alpha: cfg.merpo.alpha_init, ..cfg.merpo.rac.clone() };
                    let reps = theorem1_suite(&sc, &rac, cfg.rac_iters, &seed_list)?;
                    std::fs::write(out.join("theorem1.csv"), theorem_csv(&reps))?;
                    let both = reps.iter().filter(|(_, r)| r.improved_over_beta && r.improved_over_meta).count();
                    let met = reps.iter().filter(|(_, r)| r.condition_met).count();
                    println!("theorem1: improved over both on {both}/{}, condition met on {met}", reps.len());
                }
                TheorySuite::AlphaSweep => {
                    let sc = PreparedScenario::new(&cfg.scenario, &cfg.merpo.model)?;
                    let sweep = alpha_sweep(&sc, &cfg.merpo.rac, cfg.rac_iters, &cfg.alphas, &seed_list)?;
                    std::fs::write(out.join("alpha_sweep.csv"), sweep.to_csv())?;
                    for (a, m) in sweep.alphas.iter().zip(sweep.means()) {
                        println!("alpha {a:<5} mean return {m:.4}");
                    }
                }
            }
        }
        Command::RunSuite { config } => {
            let cfg = read_experiment(&config)?;
            let dir = cfg.resolved_output_dir();
            if cfg.seeds.is_empty() {
                eprintln!("warning: empty seed list, nothing to run");
                return Ok(());
            }
            let records = run_suite(&cfg)?;
            let summary = write_outputs(&dir, &records)?;
            print_summary(&summary);
            let failed: usize = summary.rows.iter().map(|r| r.failed).sum();
            if failed > 0 {
                eprintln!("{failed} cells failed; see *.error.txt in {}", dir.display());
            }
            println!("results in {} (set {OUTPUT_ROOT_ENV} to move relative output dirs)", dir.display());
        }
        Command::Summarize { dir } => {
            let records = read_records(&dir)?;
            let summary = write_outputs(&dir, &records)?;
            print_summary(&summary);
        }
    }
    Ok(())
}

fn print_summary(summary: &merpo::harness::Summary) {
    println!("{:<16} {:>4} {:>10} {:>10} {:>10} {:>10}", "experiment", "n", "mean", "std", "min", "max");
    for r in &summary.rows {
        println!(
            "{:<16} {:>4} {:>10.4} {:>10.4} {:>10.4} {:>10.4}",
            r.experiment, r.n, r.mean, r.std, r.min, r.max
        );
    }
}
