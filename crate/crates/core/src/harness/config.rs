use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize};

use crate::algos::{Algorithm, MaskPolicy, Optimizer, UpdateConfig};
use crate::envs::EnvKind;
use crate::error::{Error, Result};
use crate::nets::{ActorSpec, Arch, CriticSpec, GptConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Mlp,
    Gpt,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Full-size reference hyperparameters.
    Full,
    /// Smaller budgets calibrated for single-core runs on the toy tasks.
    Desk,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalMode {
    #[serde(rename = "on")]
    DropoutOn,
    #[serde(rename = "off")]
    DropoutOff,
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "on" => Ok(EvalMode::DropoutOn),
            "off" => Ok(EvalMode::DropoutOff),
            _ => Err(Error::config(
                "eval_dropout",
                format!("expected `on` or `off`, got `{s}`"),
            )),
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::DropoutOn => "on",
            EvalMode::DropoutOff => "off",
        })
    }
}

fn optional_kl<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Kl {
        Value(f64),
        Word(String),
    }
    match Kl::deserialize(d)? {
        Kl::Value(v) => Ok(Some(v)),
        Kl::Word(w) if w == "none" => Ok(None),
        Kl::Word(w) => Err(serde::de::Error::custom(format!(
            "expected a number or \"none\", got \"{w}\""
        ))),
    }
}

/// Every knob of a training run. Unknown keys are rejected.
///
/// `steps_per_epoch` counts steps per worker for A2C and total steps (split
/// evenly across workers) for PPO.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub alg: Algorithm,
    pub env: EnvKind,
    pub arch: ArchKind,
    pub dropout: f64,
    pub critic_dropout: bool,
    pub critic_consistent: bool,
    pub seed: u64,
    pub total_steps: usize,
    pub workers: usize,
    pub steps_per_epoch: usize,
    pub lr: f64,
    pub critic_lr: f64,
    pub grad_steps: usize,
    pub minibatch: usize,
    pub hidden: usize,
    pub block: usize,
    pub layers: usize,
    pub heads: usize,
    pub ent_coef: f64,
    pub vf_coef: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub max_grad_norm: f64,
    pub rms_alpha: f64,
    pub rms_eps: f64,
    pub adv_norm: bool,
    pub clip_ratio: f64,
    #[serde(default, deserialize_with = "optional_kl", skip_serializing_if = "Option::is_none")]
    pub target_kl: Option<f64>,
    pub marg_samples: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub eval_dropout: EvalMode,
}

impl RunConfig {
    /// Reference defaults. Pointmass uses the continuous-control settings,
    /// corridor the discrete ones, and `arch = gpt` the transformer ones.
    pub fn full(alg: Algorithm, env: EnvKind, arch: ArchKind) -> Self {
        let discrete = env == EnvKind::Corridor;
        let mut c = RunConfig {
            preset: Preset::Full,
            alg,
            env,
            arch,
            dropout: 0.0,
            critic_dropout: false,
            critic_consistent: true,
            seed: 0,
            total_steps: if discrete { 300_000 } else { 200_000 },
            workers: 16,
            steps_per_epoch: 4096,
            lr: 3e-4,
            critic_lr: 3e-4,
            grad_steps: 16,
            minibatch: 64,
            hidden: if discrete { 512 } else { 64 },
            block: 1,
            layers: 4,
            heads: 4,
            ent_coef: if discrete { 0.0 } else { 0.01 },
            vf_coef: 0.5,
            gamma: 0.99,
            lambda: if discrete { 0.95 } else { 0.97 },
            max_grad_norm: 0.5,
            rms_alpha: 0.99,
            rms_eps: 3e-6,
            adv_norm: !discrete,
            clip_ratio: 0.2,
            target_kl: match alg {
                Algorithm::Ppo | Algorithm::A2c | Algorithm::A2cConsistent => None,
                Algorithm::PpoConsistent | Algorithm::PpoMarginal => Some(0.01),
            },
            marg_samples: 10,
            eval_every: 10,
            eval_episodes: 10,
            eval_dropout: EvalMode::DropoutOff,
        };
        if discrete {
            c.lr = 1e-4;
            c.critic_lr = 1e-4;
        }
        if !alg.is_ppo() {
            c.steps_per_epoch = if discrete { 5 } else { 80 };
            c.lr = if discrete { 1e-4 } else { 7e-4 };
            c.critic_lr = if discrete { 1e-4 } else { 7e-4 };
            c.ent_coef = 0.01;
            c.lambda = 0.95;
        }
        if arch == ArchKind::Gpt {
            c.lr = 3e-4;
            c.critic_lr = 7e-4;
            c.steps_per_epoch = 1024;
            c.grad_steps = 128;
            c.hidden = 64;
            c.ent_coef = 0.01;
            c.lambda = 0.97;
            c.block = 8;
            c.target_kl = Some(0.01);
        }
        c
    }

    /// Desk-scale variant: fewer workers and smaller networks so a full run
    /// takes seconds to a couple of minutes on one core.
    pub fn desk(alg: Algorithm, env: EnvKind, arch: ArchKind) -> Self {
        let mut c = Self::full(alg, env, arch);
        c.preset = Preset::Desk;
        c.hidden = 64;
        c.eval_every = 0;
        if alg.is_ppo() {
            c.workers = 4;
            c.steps_per_epoch = 512;
            c.lr = 3e-3;
            c.critic_lr = 3e-3;
        } else {
            c.workers = 8;
            c.steps_per_epoch = 40;
            c.lr = 2e-3;
            c.critic_lr = 2e-3;
        }
        if env == EnvKind::Corridor {
            c.ent_coef = 0.01;
            c.adv_norm = true;
            if !alg.is_ppo() {
                c.steps_per_epoch = 20;
            }
        }
        if arch == ArchKind::Gpt {
            c.hidden = 32;
            c.layers = 2;
            c.block = 4;
            c.grad_steps = 16;
        }
        c
    }

    pub fn base(preset: Preset, alg: Algorithm, env: EnvKind, arch: ArchKind) -> Self {
        match preset {
            Preset::Full => Self::full(alg, env, arch),
            Preset::Desk => Self::desk(alg, env, arch),
        }
    }

    /// Resolves layered key/value tables (later layers win) on top of the
    /// preset chosen by the merged `preset`, `alg`, `env` and `arch` keys.
    pub fn resolve(layers: &[toml::Table]) -> Result<Self> {
        let mut merged = toml::Table::new();
        for layer in layers {
            for (k, v) in layer {
                merged.insert(k.clone(), v.clone());
            }
        }
        fn pick<T: for<'de> Deserialize<'de>>(t: &toml::Table, key: &str, default: T) -> Result<T> {
            match t.get(key) {
                None => Ok(default),
                Some(v) => v
                    .clone()
                    .try_into()
                    .map_err(|e: toml::de::Error| Error::config(key, e.message())),
            }
        }
        let preset = pick(&merged, "preset", Preset::Desk)?;
        let alg = pick(&merged, "alg", Algorithm::PpoConsistent)?;
        let env = pick(&merged, "env", EnvKind::Pointmass)?;
        let arch = pick(&merged, "arch", ArchKind::Mlp)?;
        let base = Self::base(preset, alg, env, arch);
        let mut table = toml::Table::try_from(&base).map_err(|e| Error::config("config", e.to_string()))?;
        for (k, v) in merged {
            if !table.contains_key(&k) && k != "target_kl" {
                return Err(Error::config(k, "unknown key"));
            }
            table.insert(k, v);
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config("config", e.message()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let t: toml::Table = s
            .parse()
            .map_err(|e: toml::de::Error| Error::config("config", e.message()))?;
        Self::resolve(&[t])
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, reason: &str| if ok { Ok(()) } else { Err(Error::config(key, reason)) };
        check((0.0..1.0).contains(&self.dropout), "dropout", "must lie in [0, 1)")?;
        check(self.workers >= 1, "workers", "must be at least 1")?;
        check(self.steps_per_epoch >= 1, "steps_per_epoch", "must be positive")?;
        check(self.lr > 0.0 && self.lr.is_finite(), "lr", "must be positive")?;
        check(
            self.critic_lr > 0.0 && self.critic_lr.is_finite(),
            "critic_lr",
            "must be positive",
        )?;
        check(self.grad_steps >= 1, "grad_steps", "must be positive")?;
        check(self.minibatch >= 1, "minibatch", "must be positive")?;
        check(self.hidden >= 1, "hidden", "must be positive")?;
        check(self.block >= 1, "block", "must be positive")?;
        check(self.layers >= 1, "layers", "must be positive")?;
        check(
            self.heads >= 1 && self.hidden.is_multiple_of(self.heads),
            "heads",
            "must divide hidden",
        )?;
        check((0.0..=1.0).contains(&self.gamma), "gamma", "must lie in [0, 1]")?;
        check((0.0..=1.0).contains(&self.lambda), "lambda", "must lie in [0, 1]")?;
        check(self.max_grad_norm > 0.0, "max_grad_norm", "must be positive")?;
        check(
            self.clip_ratio > 0.0 && self.clip_ratio < 1.0,
            "clip_ratio",
            "must lie in (0, 1)",
        )?;
        check(
            self.target_kl.is_none_or(|k| k > 0.0),
            "target_kl",
            "must be positive or \"none\"",
        )?;
        check(self.marg_samples >= 1, "marg_samples", "must be at least 1")?;
        check(self.eval_episodes >= 1, "eval_episodes", "must be positive")?;
        check(
            self.arch == ArchKind::Mlp || self.block >= 1,
            "block",
            "must be positive",
        )?;
        Ok(())
    }

    /// Steps each worker collects per update.
    pub fn steps_per_worker(&self) -> usize {
        if self.alg.is_ppo() {
            self.steps_per_epoch.div_ceil(self.workers)
        } else {
            self.steps_per_epoch
        }
    }

    pub fn steps_per_update(&self) -> usize {
        self.steps_per_worker() * self.workers
    }

    pub fn updates(&self) -> usize {
        self.total_steps / self.steps_per_update()
    }

    pub fn actor_spec(&self) -> ActorSpec {
        let env = self.env.spec();
        ActorSpec {
            obs_dim: env.obs_dim,
            space: env.action,
            arch: match self.arch {
                ArchKind::Mlp => Arch::Mlp {
                    hidden: vec![self.hidden; 2],
                },
                ArchKind::Gpt => Arch::Gpt(GptConfig {
                    d_model: self.hidden,
                    layers: self.layers,
                    heads: self.heads,
                    block: self.block,
                }),
            },
            p: self.dropout,
        }
    }

    pub fn critic_spec(&self) -> CriticSpec {
        CriticSpec {
            obs_dim: self.env.spec().obs_dim,
            hidden: vec![self.hidden; 2],
            p: if self.critic_dropout { self.dropout } else { 0.0 },
        }
    }

    /// Context window the collector maintains.
    pub fn context_block(&self) -> usize {
        match self.arch {
            ArchKind::Mlp => 1,
            ArchKind::Gpt => self.block,
        }
    }

    pub fn update_config(&self) -> UpdateConfig {
        let (actor_masks, critic_masks) = match self.alg {
            Algorithm::A2c | Algorithm::Ppo => (MaskPolicy::Fresh, MaskPolicy::Fresh),
            Algorithm::A2cConsistent | Algorithm::PpoConsistent => (MaskPolicy::Replay, self.critic_policy()),
            Algorithm::PpoMarginal => (MaskPolicy::Marginal(self.marg_samples), self.critic_policy()),
        };
        UpdateConfig {
            actor_masks,
            critic_masks,
            clip_ratio: self.clip_ratio,
            grad_steps: if self.alg.is_ppo() { self.grad_steps } else { 1 },
            minibatch: self.minibatch,
            target_kl: self.target_kl,
            ent_coef: self.ent_coef,
            vf_coef: self.vf_coef,
            max_grad_norm: self.max_grad_norm,
        }
    }

    fn critic_policy(&self) -> MaskPolicy {
        if self.critic_consistent {
            MaskPolicy::Replay
        } else {
            MaskPolicy::Fresh
        }
    }

    /// RMSProp for A2C, Adam for PPO.
    pub fn optimizers(&self, actor: &crate::nets::Actor, critic: &crate::nets::Critic) -> (Optimizer, Optimizer) {
        if self.alg.is_ppo() {
            (
                Optimizer::adam(actor.store(), self.lr),
                Optimizer::adam(critic.store(), self.critic_lr),
            )
        } else {
            (
                Optimizer::rmsprop(actor.store(), self.lr, self.rms_alpha, self.rms_eps),
                Optimizer::rmsprop(critic.store(), self.critic_lr, self.rms_alpha, self.rms_eps),
            )
        }
    }
}
