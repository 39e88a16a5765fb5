//! Bundled toy environments and relative scoring.

mod corridor;
mod pointmass;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use corridor::Corridor;
pub use pointmass::{scripted_action, PointMass};

pub mod constants {
    pub mod pointmass {
        pub use crate::envs::pointmass::{ACTION_COST, DT, FRICTION, HORIZON, OPTIMAL_RETURN, RANDOM_RETURN};
    }
    pub mod corridor {
        pub use crate::envs::corridor::{CAP, CELLS, OPTIMAL_RETURN, RANDOM_RETURN, STEP_COST};
    }
}

use crate::error::{Error, Result};
use crate::nets::{Action, ActionSpace};
use crate::seeding::{stream, Stream, StreamRng};

#[derive(Clone, Debug, PartialEq)]
pub struct EnvStep {
    pub next_obs: Vec<f64>,
    pub reward: f64,
    /// Episode over, by termination or by the time limit.
    pub done: bool,
    /// Episode over because a terminal state was reached.
    pub terminal: bool,
    pub episode_len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub name: &'static str,
    pub obs_dim: usize,
    pub action: ActionSpace,
    /// Symmetric bound of every continuous action component.
    pub action_bound: Option<f64>,
    pub max_episode_len: usize,
    pub optimal_return: f64,
    pub random_return: f64,
}

pub trait Env {
    fn spec(&self) -> EnvSpec;
    fn reset(&mut self) -> Vec<f64>;
    fn step(&mut self, action: &Action) -> Result<EnvStep>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvKind {
    Pointmass,
    Corridor,
}

impl EnvKind {
    pub fn spec(self) -> EnvSpec {
        match self {
            EnvKind::Pointmass => pointmass::spec(),
            EnvKind::Corridor => corridor::spec(),
        }
    }

    /// Environment instance for `worker`, with its own random stream.
    pub fn make(self, seed: u64, worker: u64) -> Box<dyn Env + Send> {
        self.make_with(stream(seed, Stream::Env, worker))
    }

    pub fn make_with(self, rng: StreamRng) -> Box<dyn Env + Send> {
        match self {
            EnvKind::Pointmass => Box::new(PointMass::new(rng)),
            EnvKind::Corridor => Box::new(Corridor::new()),
        }
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pointmass" => Ok(EnvKind::Pointmass),
            "corridor" => Ok(EnvKind::Corridor),
            other => Err(Error::config("env", format!("unknown environment `{other}`"))),
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.spec().name)
    }
}

/// `(x - random) / (baseline - random)`: 0 at the random reference, 1 at the
/// baseline.
pub fn normalized_score(mean_return: f64, random: f64, baseline: f64) -> Result<f64> {
    if baseline.is_nan() || random.is_nan() || baseline <= random {
        return Err(Error::Reference(format!(
            "baseline return {baseline} does not exceed random return {random}"
        )));
    }
    Ok((mean_return - random) / (baseline - random))
}

/// Runs one episode with `policy` choosing actions from observations.
pub fn rollout_episode(env: &mut dyn Env, mut policy: impl FnMut(&[f64]) -> Action) -> Result<f64> {
    let mut obs = env.reset();
    let mut ret = 0.0;
    loop {
        let step = env.step(&policy(&obs))?;
        ret += step.reward;
        if step.done {
            return Ok(ret);
        }
        obs = step.next_obs;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointmass_examples() {
        let mut env = PointMass::new(stream(0, Stream::Env, 0));
        env.reset();
        env.set_state([0.4, -0.2], [0.0, 0.0], [0.4, -0.2]);
        let s = env.step(&Action::Continuous(vec![0.0, 0.0])).unwrap();
        assert_eq!(s.reward, 0.0);
        assert_eq!(env.position(), [0.4, -0.2]);
        assert_eq!(s.next_obs.len(), 6);

        let mut env = PointMass::new(stream(0, Stream::Env, 0));
        env.reset();
        let clipped = env.step(&Action::Continuous(vec![5.0, -5.0])).unwrap();
        let mut env2 = PointMass::new(stream(0, Stream::Env, 0));
        env2.reset();
        assert_eq!(env2.step(&Action::Continuous(vec![1.0, -1.0])).unwrap(), clipped);
        assert!(env.step(&Action::Discrete(0)).is_err());
    }

    #[test]
    fn pointmass_horizon_and_determinism() {
        let run = || {
            let mut env = EnvKind::Pointmass.make(5, 2);
            let mut obs = env.reset();
            let mut trace = vec![];
            for t in 0..200 {
                let a = Action::Continuous(vec![(t as f64 * 0.1).sin(), obs[4]]);
                let s = env.step(&a).unwrap();
                assert!(s.reward <= 0.0);
                assert_eq!(s.done, t == 199);
                assert!(!s.terminal);
                trace.push(s.reward);
                obs = s.next_obs;
            }
            trace
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn corridor_examples() {
        let mut env = Corridor::new();
        let right = rollout_episode(&mut env, |_| Action::Discrete(1)).unwrap();
        assert!((right - 0.89).abs() < 1e-12);
        let noop = rollout_episode(&mut env, |_| Action::Discrete(2)).unwrap();
        assert!((noop + 1.0).abs() < 1e-12);
        env.reset();
        assert!(matches!(env.step(&Action::Discrete(4)), Err(Error::Contract(_))));
        let s = env.step(&Action::Discrete(0)).unwrap();
        assert_eq!(s.next_obs[0], 1.0);
    }

    #[test]
    fn normalized_score_contract() {
        assert_eq!(normalized_score(5.0, -1.0, 5.0).unwrap(), 1.0);
        assert_eq!(normalized_score(-1.0, -1.0, 5.0).unwrap(), 0.0);
        assert!(matches!(normalized_score(0.0, 1.0, 1.0), Err(Error::Reference(_))));
    }

    #[test]
    fn references_are_separated() {
        let pm = EnvKind::Pointmass.spec();
        assert!(pm.optimal_return > pm.random_return);
        assert!(pm.random_return.abs() >= 10.0 * pm.optimal_return.abs());
        let c = EnvKind::Corridor.spec();
        assert!(c.optimal_return > c.random_return);
        assert_eq!("corridor".parse::<EnvKind>().unwrap(), EnvKind::Corridor);
        assert!("cartpole".parse::<EnvKind>().is_err());
    }
}
