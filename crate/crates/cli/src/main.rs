use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use lsr_core::env::Maze;
use lsr_core::eval::{eval_starts, evaluate, probe_skills};
use lsr_core::harness::{self, RunConfig};
use lsr_core::plot::emit_plots;
use lsr_core::rng::{stream, Stream};
use lsr_core::sac::SacAgent;

#[derive(Parser)]
#[command(name = "lsr", about = "Reset-free skill learning experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train every seed of a config, resuming where snapshots exist.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Train only this seed instead of the config's list.
        #[arg(long)]
        seed: Option<u64>,
        /// Output root, replacing the config's `out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override a key, e.g. `--set game.lambda=0.2`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Re-evaluate the checkpoints of one seed directory (`<run>/seed_N`).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "standard15")]
        protocol: String,
    },
    /// Render SVG figures for a finished run.
    Plot {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long, default_value_t = 2.0)]
        maze_cell_size: f64,
    },
    /// Train the cartesian product of grid axes, e.g. `--grid game.lambda=0,0.5`.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, required = true)]
        grid: Vec<String>,
        /// Only print the expanded run names.
        #[arg(long)]
        dry_run: bool,
    },
}

fn load(config: &PathBuf, overrides: &[String]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    if overrides.is_empty() {
        return Ok(harness::parse_config(&text)?);
    }
    let mut sweep = harness::sweep_configs(&text, overrides)?;
    if sweep.len() != 1 {
        bail!("--set takes a single value per key");
    }
    let mut cfg = sweep.remove(0);
    cfg.name = harness::parse_config(&text)?.name;
    Ok(cfg)
}

fn train(cfg: &RunConfig) -> Result<()> {
    let (root, outcomes) = harness::run_experiment(cfg)?;
    for o in &outcomes {
        let last = o.rows.iter().rev().find_map(|r| r.eval_success);
        println!(
            "seed {}: iterations {} final success {} first >= 0.7 at {}",
            o.seed,
            o.final_state.iteration,
            last.map_or("-".into(), |s| format!("{s:.2}")),
            o.iterations_to(0.7).map_or("never".into(), |i| i.to_string()),
        );
        for (task, run, baseline, _) in &o.hierarchy {
            let norm = |r: &lsr_core::hrl::HierarchyRun| r.curve.last().map_or(f64::NAN, |e| e.normalized_return);
            println!(
                "  {}: normalized return {:.3} (random skills {})",
                task.name(),
                norm(run),
                baseline.as_ref().map_or("-".into(), |b| format!("{:.3}", norm(b))),
            );
        }
    }
    println!("outputs in {}", root.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().cmd {
        Cmd::Train {
            config,
            seed,
            out,
            overrides,
        } => {
            let mut cfg = load(&config, &overrides)?;
            if let Some(s) = seed {
                cfg.seeds = vec![s];
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            train(&cfg)
        }
        Cmd::Sweep { config, grid, dry_run } => {
            let text = std::fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            for cfg in harness::sweep_configs(&text, &grid)? {
                println!("{}", cfg.name);
                if !dry_run {
                    train(&cfg)?;
                }
            }
            Ok(())
        }
        Cmd::Eval { checkpoint, protocol } => {
            let run_dir = checkpoint.parent().context("checkpoint directory has no parent run directory")?;
            let mut cfg = harness::load_config(&run_dir.join("config.toml"))?;
            cfg.eval_protocol = protocol;
            cfg.validate()?;
            let seed = checkpoint
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_prefix("seed_"))
                .and_then(|n| n.parse().ok())
                .with_context(|| format!("{} is not a seed_N directory", checkpoint.display()))?;
            let sac = cfg.game.sac_config();
            let ckpt = checkpoint.join("checkpoints");
            let open = |name: &str| -> Result<SacAgent> {
                let path = ckpt.join(name);
                let f = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
                Ok(SacAgent::read_checkpoint(&mut BufReader::new(f), &sac)?)
            };
            let forward = open("forward.lsra")?;
            let mut rng = stream(seed, Stream::Eval);
            let r = evaluate(&forward, &cfg.protocol(), &mut rng)?;
            println!("success {:.3} mean final distance {:.3}", r.success_rate, r.mean_final_distance);
            if let Ok(reset) = open("reset.lsra") {
                let probe = probe_skills(&reset, &eval_starts(), cfg.game.t_reset, cfg.eval_skill_repeats, &mut rng)?;
                println!("skill endpoint dispersion {:.3}", probe.dispersion()?);
            }
            Ok(())
        }
        Cmd::Plot { run_dir, maze_cell_size } => {
            let maze = Maze::medium(maze_cell_size);
            for p in emit_plots(&run_dir, maze.layout())? {
                info!("wrote {}", p.display());
            }
            Ok(())
        }
    }
}
