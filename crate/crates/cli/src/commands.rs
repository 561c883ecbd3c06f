use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, LevelFilter};
use turntree_core::gradcheck::{run_gradcheck, GradcheckOptions};
use turntree_core::trainer::{evaluate, leaf_response};
use turntree_core::{assign_credit, Error as CoreError, PolicyParams, RolloutTree, StepReport, Task, Trainer};

use crate::config::{ConfigError, RunConfig};
use crate::{Cli, Command, RunArgs};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{context}: {source}")]
    Io { context: String, source: std::io::Error },
    #[error("gradient check failed: {0}")]
    Gradcheck(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) | Self::Core(CoreError::Config(_)) => 2,
            _ => 1,
        }
    }
}

fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> CliError {
    let context = context.into();
    move |source| CliError::Io { context, source }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let verbosity = cli.verbose;
    match cli.command {
        Command::Train(args) => {
            let cfg = load(&args, verbosity)?;
            train(&cfg, &args)
        }
        Command::Rollout { run, n_trees, checkpoint } => {
            let cfg = load(&run, verbosity)?;
            rollout(&cfg, &run, n_trees, checkpoint.as_deref())
        }
        Command::Eval { run, checkpoint, hops, tasks } => {
            let cfg = load(&run, verbosity)?;
            let env = cfg.environment()?;
            let params = initial_params(&cfg, checkpoint.as_deref())?;
            let hops = hops.unwrap_or(cfg.hops[0]);
            let n = tasks.unwrap_or(cfg.eval_tasks);
            let rate = evaluate(&params, &env, n, hops, cfg.eval_seed)?;
            println!("success {rate:.4} over {n} tasks ({hops} hops)");
            Ok(())
        }
        Command::Gradcheck { config, instances, seed, corrupt } => {
            let level = match config {
                Some(path) => RunConfig::load(&path, std::env::vars())?.log_level,
                None => "info".into(),
            };
            init_logging(&level, verbosity);
            gradcheck(instances, seed, corrupt)
        }
    }
}

fn load(args: &RunArgs, verbosity: u8) -> Result<RunConfig, CliError> {
    let cfg = RunConfig::load(&args.config, std::env::vars())?;
    init_logging(&cfg.log_level, verbosity);
    Ok(cfg)
}

fn init_logging(level: &str, verbosity: u8) {
    let base: LevelFilter = level.parse().unwrap_or(LevelFilter::Info);
    let level = match verbosity {
        0 => base,
        1 => base.max(LevelFilter::Debug),
        _ => LevelFilter::Trace,
    };
    // a second initialisation (in tests) is harmless
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
}

fn workers(args: &RunArgs) -> usize {
    if args.deterministic {
        1
    } else {
        args.workers.max(1)
    }
}

/// Zero policy from the config, or a checkpoint (binary or JSON, detected by magic).
fn initial_params(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<PolicyParams, CliError> {
    match checkpoint.or(cfg.init_checkpoint.as_deref()) {
        Some(path) => read_checkpoint(path),
        None => Ok(PolicyParams::new(
            cfg.policy.feature_buckets,
            cfg.environment()?.vocab().size(),
            cfg.policy.context_window,
            cfg.seeds.init,
        )?),
    }
}

pub fn read_checkpoint(path: &Path) -> Result<PolicyParams, CliError> {
    let bytes = fs::read(path).map_err(io(format!("reading checkpoint {}", path.display())))?;
    if bytes.starts_with(turntree_core::policy::CHECKPOINT_MAGIC) {
        Ok(PolicyParams::read_binary(bytes.as_slice())?)
    } else {
        let text = String::from_utf8(bytes)
            .map_err(|e| CoreError::Checkpoint(format!("{}: {e}", path.display())))?;
        Ok(PolicyParams::from_json(&text)?)
    }
}

fn write_checkpoint(params: &PolicyParams, stem: &Path) -> Result<(), CliError> {
    let json = stem.with_extension("json");
    fs::write(&json, params.to_json()?).map_err(io(format!("writing {}", json.display())))?;
    let bin = stem.with_extension("bin");
    let f = File::create(&bin).map_err(io(format!("writing {}", bin.display())))?;
    let mut w = BufWriter::new(f);
    params.write_binary(&mut w)?;
    w.flush().map_err(io(format!("writing {}", bin.display())))?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io(format!("creating {}", dir.display())))
}

fn trainer(cfg: &RunConfig, args: &RunArgs, checkpoint: Option<&Path>) -> Result<Trainer, CliError> {
    let params = initial_params(cfg, checkpoint)?;
    Ok(Trainer::new(cfg.train_config(), cfg.environment()?)?
        .with_params(params)?
        .with_workers(workers(args))?)
}

/// Credits each tree with its leaf rewards and renders it as JSONL.
fn credited_jsonl(trainer: &Trainer, tasks: &[Task], trees: &[RolloutTree], first_index: usize) -> Result<String, CliError> {
    let mut out = String::new();
    for (b, (task, tree)) in tasks.iter().zip(trees).enumerate() {
        let rewards: Vec<f64> = tree
            .leaf_ids()
            .into_iter()
            .map(|leaf| trainer.env().score_outcome(task, &leaf_response(tree, leaf)))
            .collect();
        let credited = assign_credit(tree, &rewards, &trainer.config().credit)?;
        out.push_str(&credited.to_jsonl(first_index + b)?);
    }
    Ok(out)
}

fn train(cfg: &RunConfig, args: &RunArgs) -> Result<(), CliError> {
    let out_dir = &cfg.output_dir;
    create_dir(out_dir)?;
    let ckpt_dir = out_dir.join("checkpoints");
    create_dir(&ckpt_dir)?;
    let mut trainer = trainer(cfg, args, None)?;

    let csv_path = out_dir.join("metrics.csv");
    let mut csv = BufWriter::new(File::create(&csv_path).map_err(io(format!("creating {}", csv_path.display())))?);
    writeln!(csv, "{}", StepReport::CSV_HEADER).map_err(io("writing metrics.csv"))?;
    let mut trees_out = if cfg.trees_every > 0 {
        let p = out_dir.join("trees.jsonl");
        Some(BufWriter::new(File::create(&p).map_err(io(format!("creating {}", p.display())))?))
    } else {
        None
    };

    for step in 0..cfg.total_steps {
        let out = match trainer.train_step() {
            Ok(out) => out,
            Err(CoreError::NonFiniteGradient { step, dump }) => {
                let p = out_dir.join(format!("abort_step{step}.jsonl"));
                fs::write(&p, &dump).map_err(io(format!("writing {}", p.display())))?;
                return Err(CoreError::NonFiniteGradient { step, dump: format!("see {}", p.display()) }.into());
            }
            Err(e) => return Err(e.into()),
        };
        let mut report = out.report.clone();
        if args.deterministic {
            report.ms = 0;
        }
        writeln!(csv, "{}", report.csv_row()).map_err(io("writing metrics.csv"))?;
        if let Some(w) = trees_out.as_mut() {
            if (step + 1) % cfg.trees_every == 0 {
                let text = credited_jsonl(&trainer, &out.tasks, &out.trees, step * cfg.batch_size)?;
                w.write_all(text.as_bytes()).map_err(io("writing trees.jsonl"))?;
            }
        }
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            write_checkpoint(trainer.params(), &ckpt_dir.join(format!("step_{:06}", step + 1)))?;
        }
        let level = if (step + 1) % 100 == 0 { log::Level::Info } else { log::Level::Debug };
        log::log!(
            level,
            "step {} reward {:.3} success {:.3} J {:.4} clip {:.3} h_turn {:.3} entropy {:.3}",
            report.step, report.mean_reward, report.success, report.objective, report.clip_fraction,
            report.h_turn, report.mean_entropy
        );
    }
    csv.flush().map_err(io("writing metrics.csv"))?;
    if let Some(mut w) = trees_out {
        w.flush().map_err(io("writing trees.jsonl"))?;
    }
    write_checkpoint(trainer.params(), &ckpt_dir.join("final"))?;
    if cfg.total_steps > 0 {
        let rate = trainer.evaluate(cfg.eval_tasks, cfg.hops[0], cfg.eval_seed)?;
        info!("greedy success after {} steps: {rate:.4}", cfg.total_steps);
    }
    Ok(())
}

fn rollout(cfg: &RunConfig, args: &RunArgs, n_trees: usize, checkpoint: Option<&Path>) -> Result<(), CliError> {
    create_dir(&cfg.output_dir)?;
    let path: PathBuf = cfg.output_dir.join("trees.jsonl");
    if n_trees == 0 {
        fs::write(&path, "").map_err(io(format!("writing {}", path.display())))?;
        println!("trees 0 leaves 0");
        return Ok(());
    }
    let mut rc = cfg.clone();
    rc.batch_size = n_trees;
    let trainer = trainer(&rc, args, checkpoint)?;
    let tasks = trainer.tasks_for(0)?;
    let trees = trainer.build_trees(0, &tasks, trainer.params());
    fs::write(&path, credited_jsonl(&trainer, &tasks, &trees, 0)?)
        .map_err(io(format!("writing {}", path.display())))?;

    let leaves: Vec<usize> = trees.iter().map(|t| t.leaf_ids().len()).collect();
    let entropies: Vec<f64> = trees
        .iter()
        .flat_map(|t| t.nodes().iter().filter_map(|n| n.entropy))
        .collect();
    let mean_entropy = if entropies.is_empty() { 0.0 } else { entropies.iter().sum::<f64>() / entropies.len() as f64 };
    let shortfalls = trees.iter().filter(|t| !t.shortfalls().is_empty()).count();
    println!(
        "trees {n_trees} leaves {} (min {}, max {}) mean node entropy {mean_entropy:.4} trees with shortfall {shortfalls}",
        leaves.iter().sum::<usize>(),
        leaves.iter().min().unwrap(),
        leaves.iter().max().unwrap(),
    );
    Ok(())
}

fn gradcheck(instances: usize, seed: u64, corrupt: bool) -> Result<(), CliError> {
    let opts = GradcheckOptions { instances, seed, corrupt, ..Default::default() };
    let checks = run_gradcheck(&opts)?;
    let mut failures = Vec::new();
    for c in &checks {
        let status = if c.passed(opts.tolerance) { "ok" } else { "FAIL" };
        println!("{:<5} max relative error {:.3e} over {} instances  {status}", c.objective.name(), c.max_rel_error, instances);
        if !c.passed(opts.tolerance) {
            let w = c.worst.as_ref().expect("a failing check has a worst coordinate");
            failures.push(format!(
                "{}: instance {} bucket {} token {} analytic {:.9e} numeric {:.9e}",
                c.objective.name(), w.instance, w.bucket, w.token, w.analytic, w.numeric
            ));
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Gradcheck(failures.join("; ")))
    }
}
