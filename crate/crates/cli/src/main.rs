use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use cdrl_core::harness::{
    default_run_dir, divergence_probe, eval_mode_study, metrics_dir, render_probe, render_table, run_experiment,
    run_sweep, sweep_table, ProbeNet, RunConfig, SweepGrid, PROBE_GRID,
};
use cdrl_core::Error;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cdrl", version, about = "Policy-gradient training with consistent dropout")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one configuration and stream metrics.
    Train {
        #[arg(long)]
        alg: Option<String>,
        #[arg(long)]
        env: Option<String>,
        #[arg(long)]
        dropout: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        steps: Option<usize>,
        /// A positive threshold, or `none` to disable.
        #[arg(long)]
        target_kl: Option<String>,
        #[arg(long)]
        marg_samples: Option<usize>,
        /// `mlp` or `gpt`.
        #[arg(long)]
        arch: Option<String>,
        /// `desk` (default) or `full`.
        #[arg(long)]
        preset: Option<String>,
        /// TOML file of config keys.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Extra `key=value` overrides, applied last.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Output directory (`CDRL_METRICS_DIR` takes precedence).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print the resolved configuration and exit.
        #[arg(long)]
        dry_run: bool,
    },
    /// Compare two fresh-mask passes over random inputs at each dropout level.
    Probe {
        #[arg(long, default_value = "mlp-cont")]
        net: String,
        #[arg(long, default_value_t = 1000)]
        states: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated dropout levels.
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
    },
    /// Run a grid of configurations and print the relative-performance table.
    Sweep {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Deterministic evaluation of checkpoints.
    Eval {
        #[arg(long, required = true, num_args = 1..)]
        checkpoint: Vec<PathBuf>,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        /// `on`, `off`, or omit to report both and the relative improvement.
        #[arg(long)]
        eval_dropout: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn kv(key: &str, raw: &str) -> anyhow::Result<toml::Table> {
    let line = format!("{key} = {raw}");
    match line.parse::<toml::Table>() {
        Ok(t) => Ok(t),
        Err(_) => Ok(format!("{key} = {}", toml::Value::String(raw.to_string())).parse()?),
    }
}

fn train_config(
    flags: Vec<(&str, Option<String>)>,
    config: Option<PathBuf>,
    set: Vec<String>,
) -> anyhow::Result<RunConfig> {
    let mut layers = Vec::new();
    if let Some(path) = config {
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        layers.push(text.parse::<toml::Table>().map_err(|e| Error::Config {
            key: path.display().to_string(),
            reason: e.message().to_string(),
        })?);
    }
    for (key, value) in flags {
        if let Some(v) = value {
            layers.push(kv(key, &v)?);
        }
    }
    for s in set {
        let (k, v) = s.split_once('=').ok_or_else(|| Error::Config {
            key: s.clone(),
            reason: "expected KEY=VALUE".into(),
        })?;
        layers.push(kv(k.trim(), v.trim())?);
    }
    Ok(RunConfig::resolve(&layers)?)
}

fn exit_for(err: &anyhow::Error) -> ExitCode {
    match err.downcast_ref::<Error>() {
        Some(Error::Config { .. }) => ExitCode::from(2),
        Some(Error::NonFinite(_) | Error::DegeneratePosterior) => ExitCode::from(3),
        _ => ExitCode::FAILURE,
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.cmd {
        Cmd::Train {
            alg,
            env,
            dropout,
            seed,
            steps,
            target_kl,
            marg_samples,
            arch,
            preset,
            config,
            set,
            out,
            dry_run,
        } => {
            let flags = vec![
                ("preset", preset),
                ("alg", alg),
                ("env", env),
                ("arch", arch),
                ("dropout", dropout.map(|v| v.to_string())),
                ("seed", seed.map(|v| v.to_string())),
                ("total_steps", steps.map(|v| v.to_string())),
                ("target_kl", target_kl),
                ("marg_samples", marg_samples.map(|v| v.to_string())),
            ];
            let cfg = train_config(flags, config, set)?;
            if dry_run {
                print!("{}", cfg.to_toml_string());
                return Ok(ExitCode::SUCCESS);
            }
            let dir = metrics_dir(out.unwrap_or_else(|| default_run_dir(&cfg)));
            let res = run_experiment(&cfg, &dir)?;
            let last = res.records.last();
            println!(
                "{} updates, {} steps, final-third return {}, last eval {}, min logp {:.3}{}",
                res.records.len(),
                res.steps,
                res.final_third_return.map_or("n/a".into(), |r| format!("{r:.3}")),
                last.and_then(|r| r.eval_return)
                    .map_or("n/a".into(), |r| format!("{r:.3}")),
                res.min_batch_logp,
                if res.diverged || res.aborted.is_some() {
                    ", numeric divergence flagged"
                } else {
                    ""
                }
            );
            println!("metrics in {}", dir.display());
            Ok(if res.diverged || res.aborted.is_some() {
                ExitCode::from(3)
            } else {
                ExitCode::SUCCESS
            })
        }
        Cmd::Probe {
            net,
            states,
            seed,
            grid,
        } => {
            let net: ProbeNet = net.parse()?;
            let grid = grid.unwrap_or_else(|| PROBE_GRID.to_vec());
            let rows = divergence_probe(net, &grid, states, 100, seed)?;
            print!("{}", render_probe(net, &rows));
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Sweep { grid, out } => {
            let text = std::fs::read_to_string(&grid).with_context(|| format!("reading {}", grid.display()))?;
            let g = SweepGrid::from_toml_str(&text)?;
            let root = metrics_dir(out.unwrap_or_else(|| PathBuf::from("runs/sweep")));
            let results = run_sweep(&g, &root)?;
            let cells = sweep_table(g.env, &results)?;
            let mut w = csv::Writer::from_path(root.join("table.csv"))?;
            for c in &cells {
                w.write_record([
                    c.alg.to_string(),
                    c.p.to_string(),
                    c.mean.to_string(),
                    c.std.to_string(),
                ])?;
            }
            w.flush()?;
            print!("{}", render_table(&cells));
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Eval {
            checkpoint,
            episodes,
            eval_dropout,
            seed,
        } => {
            let rows = eval_mode_study(&checkpoint, episodes, seed)?;
            let mode = eval_dropout
                .map(|m| m.parse::<cdrl_core::harness::EvalMode>())
                .transpose()?;
            for r in rows {
                let path = r.checkpoint.display();
                match mode {
                    Some(cdrl_core::harness::EvalMode::DropoutOn) => println!("{path}\tp={}\t{:.4}", r.p, r.dropout_on),
                    Some(cdrl_core::harness::EvalMode::DropoutOff) => {
                        println!("{path}\tp={}\t{:.4}", r.p, r.dropout_off)
                    }
                    None => println!(
                        "{path}\tp={}\ton={:.4}\toff={:.4}\timprovement={:+.1}%",
                        r.p,
                        r.dropout_on,
                        r.dropout_off,
                        100.0 * r.improvement
                    ),
                }
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_for(&e)
        }
    }
}
