use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::run::{load_checkpoint, run_experiment};
use crate::algos::Algorithm;
use crate::envs::{normalized_score, EnvKind};
use crate::error::{Error, Result};
use crate::rollout::evaluate;

/// Grid of runs: every algorithm at every dropout level for every seed.
/// `overrides` holds extra config keys applied to each run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub env: EnvKind,
    pub algs: Vec<Algorithm>,
    pub dropouts: Vec<f64>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub overrides: toml::Table,
}

impl SweepGrid {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::config("grid", e.message()))
    }

    pub fn config(&self, alg: Algorithm, p: f64, seed: u64) -> Result<RunConfig> {
        let mut t = toml::Table::new();
        t.insert("env".into(), toml::Value::String(self.env.to_string()));
        t.insert("alg".into(), toml::Value::String(alg.to_string()));
        t.insert("dropout".into(), toml::Value::Float(p));
        t.insert("seed".into(), toml::Value::Integer(seed as i64));
        RunConfig::resolve(&[self.overrides.clone(), t])
    }
}

/// Final-third training return of one finished run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub alg: Algorithm,
    pub p: f64,
    pub seed: u64,
    pub final_return: f64,
    pub unstable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepCell {
    pub alg: Algorithm,
    pub p: f64,
    pub mean: f64,
    pub std: f64,
    pub scores: Vec<f64>,
}

/// Runs every grid cell, writing each run under `root`.
pub fn run_sweep(grid: &SweepGrid, root: &Path) -> Result<Vec<RunResult>> {
    let mut out = Vec::new();
    for &alg in &grid.algs {
        for &p in &grid.dropouts {
            for &seed in &grid.seeds {
                let cfg = grid.config(alg, p, seed)?;
                let run = run_experiment(&cfg, &root.join(format!("{alg}-p{p}-s{seed}")))?;
                out.push(RunResult {
                    alg,
                    p,
                    seed,
                    final_return: run.final_third_return.unwrap_or(f64::NAN),
                    unstable: run.unstable(f64::NEG_INFINITY),
                });
            }
        }
    }
    Ok(out)
}

/// Normalizes each run against the mean of the same algorithm's p = 0 runs
/// and aggregates per (algorithm, p) cell. Runs without a finite return
/// score as the random reference.
pub fn sweep_table(env: EnvKind, results: &[RunResult]) -> Result<Vec<SweepCell>> {
    let random = env.spec().random_return;
    let mut cells: BTreeMap<(usize, u64), (Algorithm, f64, Vec<f64>)> = BTreeMap::new();
    for r in results {
        let key = (Algorithm::ALL.iter().position(|a| *a == r.alg).unwrap(), r.p.to_bits());
        cells
            .entry(key)
            .or_insert((r.alg, r.p, Vec::new()))
            .2
            .push(r.final_return);
    }
    let mut out = Vec::new();
    for (alg, p, returns) in cells.values() {
        let base: Vec<f64> = results
            .iter()
            .filter(|r| r.alg == *alg && r.p == 0.0 && r.final_return.is_finite())
            .map(|r| r.final_return)
            .collect();
        if base.is_empty() {
            return Err(Error::Reference(format!("no finite p = 0 baseline for {alg}")));
        }
        let baseline = base.iter().sum::<f64>() / base.len() as f64;
        let scores = returns
            .iter()
            .map(|&x| normalized_score(if x.is_finite() { x } else { random }, random, baseline))
            .collect::<Result<Vec<_>>>()?;
        let n = scores.len() as f64;
        let mean = scores.iter().sum::<f64>() / n;
        let std = (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
        out.push(SweepCell {
            alg: *alg,
            p: *p,
            mean,
            std,
            scores,
        });
    }
    Ok(out)
}

pub fn render_table(cells: &[SweepCell]) -> String {
    let mut ps: Vec<f64> = cells.iter().map(|c| c.p).collect();
    ps.sort_by(f64::total_cmp);
    ps.dedup();
    let mut s = format!("{:<10}", "p");
    let mut algs: Vec<Algorithm> = cells.iter().map(|c| c.alg).collect();
    algs.dedup();
    for a in &algs {
        s += &format!("{:>16}", a.to_string());
    }
    s.push('\n');
    for p in ps {
        s += &format!("{p:<10}");
        for a in &algs {
            match cells.iter().find(|c| c.alg == *a && c.p == p) {
                Some(c) => s += &format!("{:>16}", format!("{:.2} ± {:.2}", c.mean, c.std)),
                None => s += &format!("{:>16}", "-"),
            }
        }
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalModeRow {
    pub checkpoint: PathBuf,
    pub p: f64,
    pub dropout_on: f64,
    pub dropout_off: f64,
    /// `(off − on) / |on|`.
    pub improvement: f64,
}

/// Deterministic evaluation of each checkpoint with dropout enabled and
/// disabled over the same episodes.
pub fn eval_mode_study(checkpoints: &[PathBuf], episodes: usize, seed: u64) -> Result<Vec<EvalModeRow>> {
    checkpoints
        .iter()
        .map(|path| {
            let (cfg, actor, _) = load_checkpoint(path)?;
            let on = evaluate(&actor, cfg.env, seed, episodes, true)?;
            let off = evaluate(&actor, cfg.env, seed, episodes, false)?;
            let improvement = if on == off { 0.0 } else { (off - on) / on.abs() };
            Ok(EvalModeRow {
                checkpoint: path.clone(),
                p: cfg.dropout,
                dropout_on: on,
                dropout_off: off,
                improvement,
            })
        })
        .collect()
}
