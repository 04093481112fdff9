use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use qdiff::harness::{
    self, presets::figure_dir, reproduce, Budget, ExperimentConfig, FigureId, ReproduceOptions, RunManifest,
};
use qdiff::persist::{inspect_qtable, load_qtable, load_qtable_for, save_qtable};
use qdiff::qlearn::{greedy_policy, run_q_learning};

#[derive(Parser)]
#[command(name = "qdiff", version, about = "Quantized Q-learning for controlled diffusions")]
struct Cli {
    /// Output root.
    #[arg(long, global = true, env = "QDIFF_OUT", default_value = "qdiff-out")]
    out: PathBuf,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Experiment TOML.
    #[arg(long, short)]
    config: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Learn a Q-table and greedy policy.
    Learn(ConfigArg),
    /// Evaluate the greedy policy of a stored Q-table.
    Evaluate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        qtable: PathBuf,
    },
    /// Learn and evaluate.
    Run(ConfigArg),
    /// Vanishing-discount sweep.
    Sweep {
        #[command(flatten)]
        config: ConfigArg,
        /// Discount factors, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = harness::presets::SWEEP_FACTORS)]
        factors: Vec<f64>,
    },
    /// Quantization error bounds as CSV on stdout.
    Bounds {
        /// Bound constants (TOML); unset fields take unit defaults.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Interior bin counts, comma separated.
        #[arg(long, value_delimiter = ',', default_values_t = [4.0, 16.0, 64.0, 256.0, 1024.0])]
        m: Vec<f64>,
        /// Fixed cube side; default balances it against M.
        #[arg(long)]
        side: Option<f64>,
    },
    /// Regenerate a preset figure or table.
    Reproduce {
        /// fig1..fig5 or table1_sweep.
        id: FigureId,
        /// Small budget for a quick check.
        #[arg(long)]
        smoke: bool,
    },
    /// Q-table files.
    Qtable {
        #[command(subcommand)]
        action: QtableCommand,
    },
}

#[derive(Subcommand)]
enum QtableCommand {
    /// Learn under a config and write only the Q-table.
    Save {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        to: PathBuf,
    },
    /// Load a Q-table and print its greedy policy.
    Load {
        path: PathBuf,
        /// Check the stored discretization against this config.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Print a summary of a Q-table file.
    Inspect { path: PathBuf },
}

/// Writes to stdout; a closed pipe is not an error.
fn emit_stdout(text: &str) -> Result<()> {
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::from_path(path)?;
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn report(m: &RunManifest, dir: &Path) -> bool {
    for s in &m.stages {
        match &s.message {
            Some(msg) if !s.ok => eprintln!("stage {} failed: {msg}", s.name),
            _ => eprintln!("stage {} ok ({:.1}s)", s.name, s.seconds),
        }
    }
    for t in &m.trends {
        eprintln!("trend {} {}: {}", t.name, if t.passed { "holds" } else { "FAILS" }, t.detail);
    }
    println!("{}", dir.join("manifest.json").display());
    m.succeeded()
}

fn run(cli: Cli) -> Result<bool> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("building thread pool")?;
    }
    match cli.command {
        Command::Learn(c) => {
            let cfg = load_config(&c.config, cli.seed)?;
            let o = harness::run_stages(&cfg, &cli.out, false)?;
            Ok(report(&o.manifest, &o.dir))
        }
        Command::Run(c) => {
            let cfg = load_config(&c.config, cli.seed)?;
            let o = harness::run_detailed(&cfg, &cli.out)?;
            if let Some(row) = &o.result {
                let e = row.estimate();
                let (lo, hi) = e.ci95();
                eprintln!("{} cost {:.6} [{lo:.6}, {hi:.6}]", row.criterion.label(), e.mean);
            }
            Ok(report(&o.manifest, &o.dir))
        }
        Command::Evaluate { config, qtable } => {
            let cfg = load_config(&config.config, cli.seed)?;
            let m = harness::evaluate_stored(&cfg, &cli.out, &qtable)?;
            Ok(report(&m, &harness::output_dir(&cfg, &cli.out)))
        }
        Command::Sweep { config, factors } => {
            let cfg = load_config(&config.config, cli.seed)?;
            let m = harness::sweep_config(&cfg, &cli.out, &factors)?;
            Ok(report(&m, &harness::output_dir(&cfg, &cli.out)))
        }
        Command::Bounds { params, m, side } => {
            let text = match params {
                Some(p) => std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?,
                None => String::new(),
            };
            let p = harness::bound_params_from_toml(&text)?;
            emit_stdout(&harness::bounds_csv(&p, &m, side)?)?;
            Ok(true)
        }
        Command::Reproduce { id, smoke } => {
            let mut opts = ReproduceOptions::new(&cli.out, if smoke { Budget::Smoke } else { Budget::Full });
            if let Some(s) = cli.seed {
                opts.seed = s;
            }
            let m = reproduce(id, &opts)?;
            Ok(report(&m, &figure_dir(&cli.out, id)))
        }
        Command::Qtable { action } => qtable(action, cli.seed),
    }
}

fn qtable(action: QtableCommand, seed: Option<u64>) -> Result<bool> {
    match action {
        QtableCommand::Save { config, to } => {
            let cfg = load_config(&config.config, seed)?;
            let r = cfg.resolve()?;
            let out = run_q_learning(&r.model, &r.sim, &r.quantizer, &r.grid, &r.learn, r.variant)?;
            save_qtable(&to, &r.quantizer, &r.grid, &out.table)?;
            println!("{}", to.display());
            Ok(true)
        }
        QtableCommand::Load { path, config } => {
            let stored = match config {
                Some(c) => {
                    let r = load_config(&c, seed)?.resolve()?;
                    load_qtable_for(&path, &r.quantizer, &r.grid)?
                }
                None => load_qtable(&path)?,
            };
            let policy = greedy_policy(&stored.table);
            let mut text = String::from("bin,action,value\n");
            for (bin, &a) in policy.actions.iter().enumerate() {
                let u: Vec<String> = stored.grid.point(a).iter().map(|v| format!("{v}")).collect();
                text.push_str(&format!("{bin},{a},{}\n", u.join(" ")));
            }
            emit_stdout(&text)?;
            Ok(true)
        }
        QtableCommand::Inspect { path } => {
            let stored = load_qtable(&path)?;
            emit_stdout(&inspect_qtable(&stored))?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
