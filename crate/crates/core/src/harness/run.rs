use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{EvalMode, RunConfig};
use super::metrics::{final_third_return, MetricsRecord, MetricsWriter};
use crate::algos::Learner;
use crate::autodiff::Checkpoint;
use crate::error::{Error, Result};
use crate::nets::{Actor, Critic};
use crate::rollout::{evaluate, Collector};
use crate::seeding::{stream, Stream};

pub const METRICS_DIR_ENV: &str = "CDRL_METRICS_DIR";

/// `$CDRL_METRICS_DIR` when set, otherwise `fallback`.
pub fn metrics_dir(fallback: impl Into<PathBuf>) -> PathBuf {
    std::env::var_os(METRICS_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| fallback.into())
}

pub fn default_run_dir(cfg: &RunConfig) -> PathBuf {
    PathBuf::from("runs").join(format!("{}-{}-p{}-s{}", cfg.alg, cfg.env, cfg.dropout, cfg.seed))
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub records: Vec<MetricsRecord>,
    pub steps: usize,
    /// Some update skipped a step on a non-finite loss or gradient.
    pub diverged: bool,
    /// The run stopped early on a numeric error.
    pub aborted: Option<String>,
    pub final_third_return: Option<f64>,
    pub min_batch_logp: f64,
    pub dir: PathBuf,
}

impl RunOutcome {
    pub fn checkpoint_path(&self) -> PathBuf {
        self.dir.join("final.ckpt")
    }

    pub fn unstable(&self, logp_floor: f64) -> bool {
        self.diverged || self.aborted.is_some() || self.min_batch_logp < logp_floor
    }
}

#[derive(Serialize, Deserialize)]
struct Descriptor {
    config: RunConfig,
}

/// Builds freshly initialized networks for `cfg`.
pub fn build_nets(cfg: &RunConfig) -> Result<(Actor, Critic)> {
    let mut rng = stream(cfg.seed, Stream::Init, 0);
    let actor = Actor::new(cfg.actor_spec(), &mut rng)?;
    let critic = Critic::new(cfg.critic_spec(), &mut rng)?;
    Ok((actor, critic))
}

pub fn save_checkpoint(path: &Path, cfg: &RunConfig, actor: &Actor, critic: &Critic) -> Result<()> {
    let desc = serde_json::to_string(&Descriptor { config: cfg.clone() }).map_err(|e| Error::Format(e.to_string()))?;
    let mut ck = Checkpoint::new(desc);
    actor.write_params(&mut ck);
    critic.write_params(&mut ck);
    ck.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(RunConfig, Actor, Critic)> {
    let ck = Checkpoint::load(path)?;
    let desc: Descriptor = serde_json::from_str(&ck.descriptor).map_err(|e| Error::Format(e.to_string()))?;
    let (mut actor, mut critic) = build_nets(&desc.config)?;
    actor.load_params(&ck)?;
    critic.load_params(&ck)?;
    Ok((desc.config, actor, critic))
}

fn is_numeric(e: &Error) -> bool {
    matches!(
        e,
        Error::NonFinite(_) | Error::DegeneratePosterior | Error::Domain { .. }
    )
}

/// Trains per `cfg`, streaming one metrics record per update into `dir`
/// and writing `final.ckpt` and `config.toml` next to them.
pub fn run_experiment(cfg: &RunConfig, dir: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml_string())?;
    let (mut actor, mut critic) = build_nets(cfg)?;
    let (aopt, copt) = cfg.optimizers(&actor, &critic);
    let mut learner = Learner::new(cfg.update_config(), aopt, copt, cfg.seed)?;
    let mut collector = Collector::new(cfg.env, cfg.seed, cfg.workers, cfg.context_block());
    let mut writer = MetricsWriter::create(dir)?;
    let mut out = RunOutcome {
        records: Vec::new(),
        steps: 0,
        diverged: false,
        aborted: None,
        final_third_return: None,
        min_batch_logp: f64::INFINITY,
        dir: dir.to_path_buf(),
    };
    let updates = cfg.updates();
    for u in 0..updates {
        let mut step = || -> Result<MetricsRecord> {
            let mut buf = collector.collect(&actor, &critic, cfg.steps_per_worker())?;
            buf.finalize(cfg.gamma, cfg.lambda, cfg.adv_norm)?;
            let report = learner.update(cfg.alg, &buf, &mut actor, &mut critic)?;
            out.steps += buf.len();
            Ok(MetricsRecord::new(u, out.steps, &buf.completed_returns, &report))
        };
        let mut rec = match step() {
            Ok(r) => r,
            Err(e) if is_numeric(&e) => {
                out.aborted = Some(e.to_string());
                break;
            }
            Err(e) => return Err(e),
        };
        let last = u + 1 == updates;
        if last || (cfg.eval_every > 0 && (u + 1) % cfg.eval_every == 0) {
            let on = evaluate(&actor, cfg.env, cfg.seed, cfg.eval_episodes, true);
            let off = evaluate(&actor, cfg.env, cfg.seed, cfg.eval_episodes, false);
            match (on, off) {
                (Ok(on), Ok(off)) => {
                    rec.eval_return_dropout_on = Some(on);
                    rec.eval_return_dropout_off = Some(off);
                    rec.eval_return = Some(match cfg.eval_dropout {
                        EvalMode::DropoutOn => on,
                        EvalMode::DropoutOff => off,
                    });
                }
                (Err(e), _) | (_, Err(e)) if is_numeric(&e) => out.aborted = Some(e.to_string()),
                (Err(e), _) | (_, Err(e)) => return Err(e),
            }
        }
        out.diverged |= rec.diverged;
        out.min_batch_logp = out.min_batch_logp.min(rec.min_batch_logp);
        writer.write(&rec)?;
        out.records.push(rec);
        if out.aborted.is_some() || !actor.store().is_finite() || !critic.store().is_finite() {
            out.aborted.get_or_insert_with(|| "non-finite parameters".into());
            break;
        }
    }
    writer.finish()?;
    save_checkpoint(&out.checkpoint_path(), cfg, &actor, &critic)?;
    out.final_third_return = final_third_return(&out.records);
    Ok(out)
}
