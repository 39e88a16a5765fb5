use rand::Rng;

use super::{Env, EnvSpec, EnvStep};
use crate::error::{Error, Result};
use crate::nets::{Action, ActionSpace};
use crate::seeding::StreamRng;

pub const DT: f64 = 0.05;
pub const FRICTION: f64 = 0.1;
pub const HORIZON: usize = 200;
pub const ACTION_COST: f64 = 0.01;

/// Mean return of [`scripted_action`] over env seeds 0..100.
pub const OPTIMAL_RETURN: f64 = -12.854_618_099_873_539;
/// Mean return of uniform random actions over env seeds 0..100.
pub const RANDOM_RETURN: f64 = -144.491_411_615_570_77;

pub fn spec() -> EnvSpec {
    EnvSpec {
        name: "pointmass",
        obs_dim: 6,
        action: ActionSpace::Continuous { dim: 2 },
        action_bound: Some(1.0),
        max_episode_len: HORIZON,
        optimal_return: OPTIMAL_RETURN,
        random_return: RANDOM_RETURN,
    }
}

/// A unit point mass with linear friction chasing a goal on the plane.
#[derive(Clone, Debug)]
pub struct PointMass {
    rng: StreamRng,
    pos: [f64; 2],
    vel: [f64; 2],
    goal: [f64; 2],
    t: usize,
}

impl PointMass {
    pub fn new(rng: StreamRng) -> Self {
        PointMass {
            rng,
            pos: [0.0; 2],
            vel: [0.0; 2],
            goal: [0.0; 2],
            t: 0,
        }
    }

    /// Places the mass and goal explicitly.
    pub fn set_state(&mut self, pos: [f64; 2], vel: [f64; 2], goal: [f64; 2]) {
        self.pos = pos;
        self.vel = vel;
        self.goal = goal;
        self.t = 0;
    }

    pub fn position(&self) -> [f64; 2] {
        self.pos
    }

    fn obs(&self) -> Vec<f64> {
        vec![
            self.pos[0],
            self.pos[1],
            self.vel[0],
            self.vel[1],
            self.goal[0] - self.pos[0],
            self.goal[1] - self.pos[1],
        ]
    }
}

/// Proportional-derivative controller toward the goal, read from an observation.
pub fn scripted_action(obs: &[f64]) -> Action {
    let a = (0..2)
        .map(|i| (8.0 * obs[4 + i] - 4.0 * obs[2 + i]).clamp(-1.0, 1.0))
        .collect();
    Action::Continuous(a)
}

impl Env for PointMass {
    fn spec(&self) -> EnvSpec {
        spec()
    }

    fn reset(&mut self) -> Vec<f64> {
        self.pos = [0.0; 2];
        self.vel = [0.0; 2];
        self.goal = [self.rng.random_range(-1.0..=1.0), self.rng.random_range(-1.0..=1.0)];
        self.t = 0;
        self.obs()
    }

    fn step(&mut self, action: &Action) -> Result<EnvStep> {
        let a = action
            .as_continuous()
            .filter(|a| a.len() == 2)
            .ok_or_else(|| Error::Contract("pointmass expects a 2-d continuous action".into()))?;
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("pointmass action".into()));
        }
        let a = [a[0].clamp(-1.0, 1.0), a[1].clamp(-1.0, 1.0)];
        let mut dist2 = 0.0;
        for (i, ai) in a.iter().enumerate() {
            self.pos[i] += DT * self.vel[i];
            self.vel[i] += DT * ai - FRICTION * self.vel[i];
            dist2 += (self.pos[i] - self.goal[i]).powi(2);
        }
        let reward = -dist2 - ACTION_COST * (a[0] * a[0] + a[1] * a[1]);
        self.t += 1;
        Ok(EnvStep {
            next_obs: self.obs(),
            reward,
            done: self.t >= HORIZON,
            terminal: false,
            episode_len: self.t,
        })
    }
}
