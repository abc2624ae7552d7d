use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use cnav_autodiff::OpTag;
use cnav_core::checkpoint;
use cnav_core::eval::{delta_rows, run_suite, write_delta_csv, write_table_csv, write_table_json, EvalRow, SuiteResult};
use cnav_core::gradcheck;
use cnav_core::trainer::Trainer;
use cnav_core::RunConfig;
use cnav_sim::{build_scene, write_agents_csv, write_geometry_csv, write_trajectory_csv, ScenarioSpec, WorldConfig};

#[derive(Parser)]
#[command(name = "cnav", version, about = "Depth-camera multi-UAV navigation with causal feature selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy; writes checkpoints, metrics.jsonl and the resolved config.
    Train {
        /// Run config (JSON). Defaults apply to every omitted field.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed and CNAV_SEED.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long, conflicts_with = "config")]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a scenario suite with the deterministic policy.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON list of scenario specs; defaults to the suite stored in the checkpoint config.
        #[arg(long)]
        suite: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Second checkpoint evaluated on the same suite; adds a delta table.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Finite-difference check of every op and loss at 64-bit.
    Gradcheck {
        /// Width multiplier for the tiny test networks.
        #[arg(long, default_value_t = 1)]
        scale: usize,
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Scenario utilities.
    Scenario {
        #[command(subcommand)]
        command: ScenarioCommand,
    },
}

#[derive(Subcommand)]
enum ScenarioCommand {
    /// Export obstacle geometry and agent starts/goals as CSV.
    Preview {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// World config (JSON); defaults otherwise.
        #[arg(long)]
        world: Option<PathBuf>,
    },
}

/// Failures in what the user supplied exit with 2, everything else with 1.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

trait UsageContext<T> {
    fn usage(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> UsageContext<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into()))
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

fn env_seed() -> Result<Option<u64>, Failure> {
    match std::env::var("CNAV_SEED") {
        Ok(s) => s.trim().parse().map(Some).with_context(|| format!("CNAV_SEED `{s}` is not an unsigned integer")).usage(),
        Err(_) => Ok(None),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {what} {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("invalid {what} {}", path.display()))
}

fn train(config: Option<PathBuf>, out: PathBuf, seed: Option<u64>, resume: Option<PathBuf>) -> Result<(), Failure> {
    let seed = match seed {
        Some(s) => Some(s),
        None => env_seed()?,
    };
    let mut trainer = match resume {
        Some(path) => {
            let loaded = checkpoint::load(&path).usage()?;
            if seed.is_some_and(|s| s != loaded.config.seed) {
                return Err(Failure::Usage(anyhow!("--seed cannot change the seed of a resumed run")));
            }
            Trainer::resume(loaded, Some(&out))?
        }
        None => {
            let mut cfg = match &config {
                Some(path) => RunConfig::load(path).usage()?,
                None => RunConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cfg.validate().usage()?;
            Trainer::new(cfg, Some(&out))?
        }
    };
    let summary = trainer.run()?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn print_table(title: &str, rows: &[EvalRow]) {
    println!("{title}");
    println!("{:<20} {:>8} {:>8} {:>10} {:>10} {:>8} {:>8}", "scene", "success", "spl", "extra", "extra_sd", "speed", "speed_sd");
    let f = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
    for r in rows {
        println!(
            "{:<20} {:>8.1} {:>8.1} {:>10} {:>10} {:>8.3} {:>8.3}",
            r.scene,
            r.success_rate,
            r.spl,
            f(r.extra_mean),
            f(r.extra_std),
            r.speed_mean,
            r.speed_std
        );
    }
}

fn write_suite(dir: &Path, prefix: &str, res: &SuiteResult) -> anyhow::Result<()> {
    write_table_csv(&res.rows, &dir.join(format!("{prefix}metrics.csv")))?;
    write_table_json(&res.rows, &dir.join(format!("{prefix}metrics.json")))?;
    for (row, traj) in res.rows.iter().zip(&res.trajectories) {
        let name: String = row.scene.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '_' }).collect();
        write_trajectory_csv(traj, &dir.join(format!("{prefix}trajectories_{name}.csv")))?;
    }
    Ok(())
}

fn eval(
    checkpoint_path: PathBuf,
    suite: Option<PathBuf>,
    episodes: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    baseline: Option<PathBuf>,
) -> Result<(), Failure> {
    // Everything is loaded before any output is written.
    let ours = checkpoint::load(&checkpoint_path).usage()?;
    let base = baseline.as_deref().map(checkpoint::load).transpose().usage()?;
    let specs: Vec<ScenarioSpec> = match &suite {
        Some(path) => read_json(path, "suite").usage()?,
        None if !ours.config.eval.suite.is_empty() => ours.config.eval.suite.clone(),
        None => vec![ours.config.scenario.clone()],
    };
    if specs.is_empty() {
        return Err(Failure::Usage(anyhow!("the suite has no scenarios")));
    }
    let episodes = episodes.unwrap_or(ours.config.eval.episodes);
    let seed = match seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let world = &ours.config.world;
    let keep = out.is_some();
    let res = run_suite(&ours.model, world, &specs, episodes, seed, keep)?;
    let base_res = match &base {
        Some(b) => Some(run_suite(&b.model, world, &specs, episodes, seed, keep)?),
        None => None,
    };
    print_table(&format!("{}", checkpoint_path.display()), &res.rows);
    if let Some(b) = &base_res {
        print_table("baseline", &b.rows);
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
        write_suite(&dir, "", &res)?;
        if let Some(b) = &base_res {
            write_suite(&dir, "baseline_", b)?;
            write_delta_csv(&delta_rows(&res.rows, &b.rows)?, &dir.join("delta.csv"))?;
        }
    }
    Ok(())
}

fn gradcheck_cmd(scale: usize, corrupt: Option<String>) -> Result<(), Failure> {
    let tag = match corrupt {
        Some(name) => Some(OpTag::parse(&name).ok_or_else(|| Failure::Usage(anyhow!("unknown op `{name}`")))?),
        None => None,
    };
    if scale == 0 {
        return Err(Failure::Usage(anyhow!("--scale must be at least 1")));
    }
    let rows = gradcheck::run(scale, tag)?;
    println!("{:<28} {:>12} {:>8}  status", "component", "max_rel_err", "checked");
    for r in &rows {
        println!(
            "{:<28} {:>12.3e} {:>8}  {}",
            r.component,
            r.max_rel_err,
            r.checked,
            if r.pass { "ok" } else { "FAIL" }
        );
    }
    let failed: Vec<&str> = rows.iter().filter(|r| !r.pass).map(|r| r.component.as_str()).collect();
    if !failed.is_empty() {
        return Err(anyhow!("gradient check above {:e} in: {}", gradcheck::TOLERANCE, failed.join(", ")).into());
    }
    Ok(())
}

fn preview(spec: PathBuf, out: PathBuf, world: Option<PathBuf>) -> Result<(), Failure> {
    let spec: ScenarioSpec = read_json(&spec, "scenario spec").usage()?;
    let world: WorldConfig = match &world {
        Some(p) => read_json(p, "world config").usage()?,
        None => WorldConfig::default(),
    };
    world.validate().usage()?;
    let scene = build_scene(&spec, &world).usage()?;
    std::fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    write_geometry_csv(&scene.shapes, &out.join("geometry.csv"))?;
    write_agents_csv(&scene.placements, &out.join("agents.csv"))?;
    println!("{} shapes, {} agents written to {}", scene.shapes.len(), scene.placements.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, out, seed, resume } => train(config, out, seed, resume),
        Command::Eval { checkpoint, suite, episodes, seed, out, baseline } => {
            eval(checkpoint, suite, episodes, seed, out, baseline)
        }
        Command::Gradcheck { scale, corrupt } => gradcheck_cmd(scale, corrupt),
        Command::Scenario { command: ScenarioCommand::Preview { spec, out, world } } => preview(spec, out, world),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
