use super::{Env, EnvSpec, EnvStep};
use crate::error::{Error, Result};
use crate::nets::{Action, ActionSpace};

pub const CELLS: usize = 12;
pub const CAP: usize = 100;
pub const STEP_COST: f64 = 0.01;
pub const LEFT: usize = 0;
pub const RIGHT: usize = 1;

/// Mean return of the always-right policy.
pub const OPTIMAL_RETURN: f64 = 0.89;
/// Mean return of uniform random actions over 10⁴ episodes.
pub const RANDOM_RETURN: f64 = -0.728_001;

pub fn spec() -> EnvSpec {
    EnvSpec {
        name: "corridor",
        obs_dim: CELLS,
        action: ActionSpace::Discrete { n: 4 },
        action_bound: None,
        max_episode_len: CAP,
        optimal_return: OPTIMAL_RETURN,
        random_return: RANDOM_RETURN,
    }
}

/// One-dimensional corridor: start at the left wall, reward at the right
/// end. Actions 2 and 3 do nothing.
#[derive(Clone, Debug, Default)]
pub struct Corridor {
    cell: usize,
    t: usize,
}

impl Corridor {
    pub fn new() -> Self {
        Self::default()
    }

    fn obs(&self) -> Vec<f64> {
        let mut o = vec![0.0; CELLS];
        o[self.cell] = 1.0;
        o
    }
}

impl Env for Corridor {
    fn spec(&self) -> EnvSpec {
        spec()
    }

    fn reset(&mut self) -> Vec<f64> {
        self.cell = 0;
        self.t = 0;
        self.obs()
    }

    fn step(&mut self, action: &Action) -> Result<EnvStep> {
        let a = action
            .as_discrete()
            .filter(|&a| a < 4)
            .ok_or_else(|| Error::Contract(format!("invalid corridor action {action:?}")))?;
        match a {
            LEFT => self.cell = self.cell.saturating_sub(1),
            RIGHT => self.cell += 1,
            _ => {}
        }
        self.t += 1;
        let arrived = self.cell == CELLS - 1;
        let reward = if arrived { 1.0 } else { 0.0 } - STEP_COST;
        Ok(EnvStep {
            next_obs: self.obs(),
            reward,
            done: arrived || self.t >= CAP,
            terminal: arrived,
            episode_len: self.t,
        })
    }
}
