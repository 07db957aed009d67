use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use adaptsim::harness::config::RunConfig;
use adaptsim::harness::{
    self, report, run_rangeshift_sweep, run_stepsize_sweep, run_table, shift_label, shifted_space,
    stepsize_label, target_by_name, Budget, HarnessError, Manifest, Method, NamedTarget, Oracle,
    ResultRow, RunOutput,
};
use adaptsim::pendulum::{RewardMap, RewardModel};
use adaptsim::pipeline::{
    load_checkpoint, meta_train_with, save_checkpoint, Checkpoint, MetaConfig,
};

#[derive(Parser)]
#[command(
    name = "adaptsim",
    version,
    about = "Task-driven simulation-parameter adaptation for a double pendulum"
)]
struct Cli {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for CSV and manifest output.
    #[arg(long, global = true, default_value = "results")]
    output_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train an adaptation policy and save a checkpoint.
    MetaTrain {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Checkpoint path; defaults to the configured checkpoint directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Override the number of inner adaptation steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        delta: Option<f64>,
        /// Replace the second-mass range, as `lo,hi`.
        #[arg(long, value_parser = parse_range)]
        m2_range: Option<(f64, f64)>,
    },
    /// Adapt to one target with a meta-trained checkpoint.
    Adapt {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        target: TargetArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a non-learned baseline on one target.
    Baseline {
        /// UDR, SysID-Bayes, SysID-Point, SysID-Bayes-State or SysID-Point-State.
        #[arg(long, value_parser = parse_method)]
        method: Method,
        #[command(flatten)]
        target: TargetArg,
    },
    /// Best reward over a lattice of matched policies.
    Oracle {
        #[command(flatten)]
        target: TargetArg,
        #[arg(long, default_value_t = 9)]
        resolution: usize,
    },
    /// Every configured method on every configured target.
    Table {
        /// Meta-train checkpoints that do not exist yet.
        #[arg(long)]
        train_missing: bool,
    },
    /// AdaptSim curves for several step sizes.
    SweepStepsize {
        #[arg(long)]
        train_missing: bool,
    },
    /// AdaptSim and identification baselines for shifted parameter ranges.
    SweepRangeshift {
        #[arg(long)]
        train_missing: bool,
    },
    /// Per-method, per-target summary of a results CSV.
    Report {
        #[arg(long)]
        input: PathBuf,
    },
}

#[derive(clap::Args)]
struct TargetArg {
    /// WD or OOD-1 .. OOD-4.
    #[arg(long, conflicts_with = "params")]
    target: Option<String>,
    /// Explicit target as `m1,m2,b1,b2`.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    params: Option<Vec<f64>>,
}

impl TargetArg {
    fn resolve(&self) -> Result<NamedTarget, String> {
        match (&self.target, &self.params) {
            (Some(name), _) => target_by_name(name).ok_or_else(|| format!("unknown target {name}")),
            (None, Some(p)) if p.len() == 4 => {
                Ok(NamedTarget::new("custom", [p[0], p[1], p[2], p[3]]))
            }
            (None, Some(_)) => Err("--params takes exactly four values".into()),
            (None, None) => Err("pass --target NAME or --params m1,m2,b1,b2".into()),
        }
    }
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected lo,hi")?;
    let lo: f64 = a.trim().parse().map_err(|e| format!("{e}"))?;
    let hi: f64 = b.trim().parse().map_err(|e| format!("{e}"))?;
    if !(lo < hi) {
        return Err("lo must be below hi".into());
    }
    Ok((lo, hi))
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::parse(s).ok_or_else(|| format!("unknown method {s}"))
}

type Result<T, E = Box<dyn std::error::Error>> = std::result::Result<T, E>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn train(meta: &MetaConfig, seed: u64, path: &Path) -> Result<Checkpoint> {
    let model = RewardModel::calibrate(meta.task.clone());
    let episodes = meta.episodes();
    eprintln!(
        "meta-training seed {seed}: {episodes} episodes -> {}",
        path.display()
    );
    let mut done = 0usize;
    let out = meta_train_with(meta, &model, seed, |_| {
        done += 1;
        if done.is_multiple_of(50) || done == episodes {
            eprintln!("  episode {done}/{episodes}");
        }
    });
    save_checkpoint(path, &out.checkpoint)?;
    Ok(out.checkpoint)
}

fn obtain(
    meta: &MetaConfig,
    seed: u64,
    path: &Path,
    train_missing: bool,
    command: String,
) -> Result<Checkpoint> {
    if path.exists() {
        return load(path);
    }
    if train_missing {
        return train(meta, seed, path);
    }
    Err(HarnessError::MissingCheckpoint {
        what: path.display().to_string(),
        command: format!("{command}, or rerun with --train-missing"),
    }
    .into())
}

fn load(path: &Path) -> Result<Checkpoint> {
    load_checkpoint(path).map_err(|e| format!("{}: {e}", path.display()).into())
}

fn config_flag(cli_config: &Option<PathBuf>) -> String {
    cli_config
        .as_ref()
        .map(|p| format!(" --config {}", p.display()))
        .unwrap_or_default()
}

fn map_name(map: &RewardMap) -> &'static str {
    match map {
        RewardMap::Relative { .. } => "relative",
        RewardMap::Absolute { .. } => "absolute",
    }
}

fn write_outputs(
    dir: &Path,
    stem: &str,
    out: &RunOutput,
    seeds: &[u64],
    model: &RewardModel,
    checkpoints: BTreeMap<String, String>,
    config: &RunConfig,
) -> Result<()> {
    let csv = dir.join(format!("{stem}.csv"));
    report::write_results(&csv, &out.rows)?;
    let manifest = Manifest {
        experiment: stem.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seeds: seeds.to_vec(),
        reward_map: map_name(&model.map).into(),
        reward_constant: model.map.constant(),
        bounds: out.bounds.clone(),
        checkpoints,
        config: serde_json::to_value(config)?,
    };
    report::write_manifest(&dir.join(format!("{stem}.manifest.json")), &manifest)?;
    print_summary(&out.rows);
    eprintln!("wrote {}", csv.display());
    Ok(())
}

fn print_summary(rows: &[ResultRow]) {
    println!(
        "{:<12} {:<20} {:<22} {:>5} {:>8} {:>8}",
        "experiment", "method", "target", "seeds", "raw", "norm"
    );
    for s in harness::summarize(rows) {
        println!(
            "{:<12} {:<20} {:<22} {:>5} {:>8.4} {:>8.4}",
            s.experiment, s.method, s.target, s.seeds, s.mean_raw, s.mean_norm
        );
    }
}

fn checkpoint_note(path: &Path) -> String {
    match std::fs::read(path) {
        Ok(bytes) => format!("{} crc32={:08x}", path.display(), crc32fast::hash(&bytes)),
        Err(_) => path.display().to_string(),
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cflag = config_flag(&cli.config);
    let mut oracle = Oracle::new(cfg.cache_dir.clone());
    let model = RewardModel::calibrate(cfg.experiment.task.clone());

    match cli.command {
        Command::MetaTrain {
            seed,
            checkpoint,
            steps,
            delta,
            m2_range,
        } => {
            let mut meta = cfg.meta.clone();
            if let Some(k) = steps {
                meta.total_steps = k;
            }
            if let Some(d) = delta {
                meta.delta = d;
            }
            if let Some(r) = m2_range {
                meta.space = shifted_space(r);
            }
            meta.validate()?;
            let path = checkpoint.unwrap_or_else(|| match (delta, m2_range) {
                (_, Some(r)) => cfg.shift_checkpoint_path(r, seed),
                (Some(d), None) => cfg.stepsize_checkpoint_path(d, seed),
                (None, None) => cfg.checkpoint_path(seed),
            });
            train(&meta, seed, &path)?;
            println!("{}", checkpoint_note(&path));
        }
        Command::Adapt {
            checkpoint,
            target,
            seed,
        } => {
            let t = target.resolve()?;
            let ck = load(&checkpoint)?;
            let model = harness::checkpoint_model(&ck);
            let budget = Budget {
                n_chains: ck.config.n_chains,
                horizon: ck.config.adapt_horizon,
            };
            let run = harness::run_adaptsim(&model, &ck, &t.env(), budget, seed);
            let b = harness::bounds(
                &mut oracle,
                &model,
                &ck.config.space,
                &t.env(),
                cfg.experiment.oracle_resolution,
            );
            for (i, r) in run.per_iteration.iter().enumerate() {
                println!("iteration {i:>2}  reward {r:.4}");
            }
            println!(
                "best {:.4}  normalized {}  (UDR {:.4}, oracle {:.4})",
                run.best,
                normalized(run.best, b),
                b.lower,
                b.upper
            );
        }
        Command::Baseline { method, target } => {
            let t = target.resolve()?;
            let space = &cfg.experiment.space;
            let b = harness::bounds(
                &mut oracle,
                &model,
                space,
                &t.env(),
                cfg.experiment.oracle_resolution,
            );
            let best = match method {
                Method::Udr => b.lower,
                Method::AdaptSim => {
                    return Err("AdaptSim is not a baseline; use the adapt subcommand".into())
                }
                m => {
                    let run = harness::run_sysid(
                        m,
                        &model,
                        space,
                        &t.env(),
                        cfg.experiment.budget,
                        &cfg.experiment.sysid,
                    );
                    for (i, r) in run.per_iteration.iter().enumerate() {
                        println!("iteration {i:>2}  reward {r:.4}");
                    }
                    run.best
                }
            };
            println!(
                "{} best {:.4}  normalized {}",
                method.name(),
                best,
                normalized(best, b)
            );
        }
        Command::Oracle { target, resolution } => {
            let t = target.resolve()?;
            let best = oracle.best(&model, &cfg.experiment.space, &t.env(), resolution);
            println!("{} oracle {:.6} (grid {resolution}^4)", t.name, best);
        }
        Command::Table { train_missing } => {
            let exp = &cfg.experiment;
            let mut cks = BTreeMap::new();
            let mut notes = BTreeMap::new();
            if exp.methods.contains(&Method::AdaptSim) {
                for &seed in &exp.seeds {
                    let path = cfg.checkpoint_path(seed);
                    let cmd = format!("adaptsim meta-train{cflag} --seed {seed}");
                    cks.insert(seed, obtain(&cfg.meta, seed, &path, train_missing, cmd)?);
                    notes.insert(seed.to_string(), checkpoint_note(&path));
                }
            }
            let out = run_table(exp, &cks, &mut oracle)?;
            let stem = exp.name.clone();
            write_outputs(
                &cli.output_dir,
                &stem,
                &out,
                &exp.seeds,
                &model,
                notes,
                &cfg,
            )?;
        }
        Command::SweepStepsize { train_missing } => {
            let target = sweep_target(&cfg)?;
            let mut cks = BTreeMap::new();
            let mut notes = BTreeMap::new();
            for &delta in &cfg.sweep.deltas {
                let meta = MetaConfig {
                    delta,
                    ..cfg.meta.clone()
                };
                meta.validate()?;
                for &seed in &cfg.experiment.seeds {
                    let path = cfg.stepsize_checkpoint_path(delta, seed);
                    let cmd = format!("adaptsim meta-train{cflag} --delta {delta} --seed {seed}");
                    let label = stepsize_label(delta);
                    cks.insert(
                        (label.clone(), seed),
                        obtain(&meta, seed, &path, train_missing, cmd)?,
                    );
                    notes.insert(format!("{label}/{seed}"), checkpoint_note(&path));
                }
            }
            let out = run_stepsize_sweep(
                &cfg.sweep.deltas,
                &cfg.experiment.seeds,
                &target,
                cfg.experiment.budget,
                &cfg.experiment.task,
                cfg.experiment.oracle_resolution,
                &cks,
                &mut oracle,
            )?;
            write_outputs(
                &cli.output_dir,
                "stepsize",
                &out,
                &cfg.experiment.seeds,
                &model,
                notes,
                &cfg,
            )?;
        }
        Command::SweepRangeshift { train_missing } => {
            let target = sweep_target(&cfg)?;
            let mut cks = BTreeMap::new();
            let mut notes = BTreeMap::new();
            for &shift in &cfg.sweep.shifts {
                let meta = MetaConfig {
                    space: shifted_space(shift),
                    ..cfg.meta.clone()
                };
                meta.validate()?;
                for &seed in &cfg.experiment.seeds {
                    let path = cfg.shift_checkpoint_path(shift, seed);
                    let cmd = format!(
                        "adaptsim meta-train{cflag} --m2-range {},{} --seed {seed}",
                        shift.0, shift.1
                    );
                    let label = shift_label(shift);
                    cks.insert(
                        (label.clone(), seed),
                        obtain(&meta, seed, &path, train_missing, cmd)?,
                    );
                    notes.insert(format!("{label}/{seed}"), checkpoint_note(&path));
                }
            }
            let out = run_rangeshift_sweep(
                &cfg.sweep.shifts,
                &cfg.experiment.seeds,
                &target,
                cfg.experiment.budget,
                &cfg.experiment.task,
                &cfg.experiment.sysid,
                cfg.experiment.oracle_resolution,
                &cks,
                &mut oracle,
            )?;
            write_outputs(
                &cli.output_dir,
                "rangeshift",
                &out,
                &cfg.experiment.seeds,
                &model,
                notes,
                &cfg,
            )?;
        }
        Command::Report { input } => {
            let rows = report::read_results(&input)?;
            print_summary(&rows);
        }
    }
    Ok(())
}

/// Normalized reward, or `n/a` when the baseline already matches the oracle.
fn normalized(raw: f64, b: harness::Bounds) -> String {
    harness::normalize_report(raw, b.lower, b.upper)
        .map(|v| format!("{v:.4}"))
        .unwrap_or_else(|_| "n/a".into())
}

fn sweep_target(cfg: &RunConfig) -> Result<NamedTarget> {
    target_by_name(&cfg.sweep.target)
        .or_else(|| {
            cfg.experiment
                .targets
                .iter()
                .find(|t| t.name == cfg.sweep.target)
                .cloned()
        })
        .ok_or_else(|| format!("unknown sweep target {}", cfg.sweep.target).into())
}
