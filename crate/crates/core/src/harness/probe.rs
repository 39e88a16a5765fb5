use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::nets::{Action, ActionSpace, Actor, ActorSpec, Arch, GptConfig, MaskSource};
use crate::seeding::{stream, Stream};

pub const PROBE_GRID: [f64; 6] = [0.0, 0.1, 0.25, 0.5, 0.75, 0.9];
pub const PROBE_OBS_DIM: usize = 8;
pub const PROBE_ACTIONS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeNet {
    MlpContinuous,
    MlpDiscrete,
    Gpt,
}

impl FromStr for ProbeNet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp-cont" => Ok(ProbeNet::MlpContinuous),
            "mlp-disc" => Ok(ProbeNet::MlpDiscrete),
            "gpt" => Ok(ProbeNet::Gpt),
            _ => Err(Error::config("net", format!("unknown probe network `{s}`"))),
        }
    }
}

impl fmt::Display for ProbeNet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProbeNet::MlpContinuous => "mlp-cont",
            ProbeNet::MlpDiscrete => "mlp-disc",
            ProbeNet::Gpt => "gpt",
        })
    }
}

impl ProbeNet {
    pub fn spec(self, p: f64) -> ActorSpec {
        let (space, arch) = match self {
            ProbeNet::MlpContinuous => (
                ActionSpace::Continuous { dim: PROBE_ACTIONS },
                Arch::Mlp { hidden: vec![64, 64] },
            ),
            ProbeNet::MlpDiscrete => (
                ActionSpace::Discrete { n: PROBE_ACTIONS },
                Arch::Mlp { hidden: vec![64, 64] },
            ),
            ProbeNet::Gpt => (
                ActionSpace::Continuous { dim: PROBE_ACTIONS },
                Arch::Gpt(GptConfig::default()),
            ),
        };
        ActorSpec {
            obs_dim: PROBE_OBS_DIM,
            space,
            arch,
            p,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeRow {
    pub p: f64,
    pub d_mean: f64,
    pub d_std: f64,
    pub logp_mean: f64,
    pub logp_std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, v.sqrt())
}

fn distance(a: &Action, b: &Action) -> f64 {
    match (a, b) {
        (Action::Continuous(x), Action::Continuous(y)) => {
            x.iter().zip(y).map(|(x, y)| (x - y).abs()).sum::<f64>() / x.len() as f64
        }
        (Action::Discrete(x), Action::Discrete(y)) => f64::from(u8::from(x != y)),
        _ => unreachable!("actions come from the same network"),
    }
}

/// Compares mode actions of two fresh-mask passes over the same input for
/// each dropout level in `grid`.
///
/// Every row uses the same initial weights (drawn from `seed`) and the same
/// inputs: standard-normal observations, a full context window for GPT. The
/// first and second passes draw masks from separate streams, so the result
/// does not depend on `batch`, the number of inputs evaluated per tape.
/// Continuous distances average over action dimensions before the mean and
/// standard deviation over inputs are taken.
pub fn divergence_probe(net: ProbeNet, grid: &[f64], states: usize, batch: usize, seed: u64) -> Result<Vec<ProbeRow>> {
    if states == 0 || batch == 0 {
        return Err(Error::config("states", "must be positive"));
    }
    let window = match net {
        ProbeNet::Gpt => GptConfig::default().block,
        _ => 1,
    };
    let mut srng = stream(seed, Stream::Probe, 0);
    let inputs: Vec<Vec<f64>> = (0..states)
        .map(|_| {
            (0..window * PROBE_OBS_DIM)
                .map(|_| srng.sample(StandardNormal))
                .collect()
        })
        .collect();
    let mut rows = Vec::with_capacity(grid.len());
    for (k, &p) in grid.iter().enumerate() {
        let actor = Actor::new(net.spec(p), &mut stream(seed, Stream::Init, 0))?;
        let mut r0 = stream(seed, Stream::Probe, 2 * k as u64 + 1);
        let mut r1 = stream(seed, Stream::Probe, 2 * k as u64 + 2);
        let (mut ds, mut lps) = (Vec::with_capacity(states), Vec::with_capacity(states));
        for chunk in inputs.chunks(batch) {
            let refs: Vec<&[f64]> = chunk.iter().map(Vec::as_slice).collect();
            let mut tape = Tape::new();
            let first = actor.forward(&mut tape, &refs, MaskSource::Fresh(&mut r0))?;
            let second = actor.forward(&mut tape, &refs, MaskSource::Fresh(&mut r1))?;
            for b in 0..chunk.len() {
                let d0 = first.dist.element(&tape, b);
                let d1 = second.dist.element(&tape, b);
                let a0 = d0.mode();
                ds.push(distance(&a0, &d1.mode()));
                lps.push(d1.log_prob(&a0)?);
            }
        }
        let (d_mean, d_std) = mean_std(&ds);
        let (logp_mean, logp_std) = mean_std(&lps);
        rows.push(ProbeRow {
            p,
            d_mean,
            d_std,
            logp_mean,
            logp_std,
        });
    }
    Ok(rows)
}

pub fn render_probe(net: ProbeNet, rows: &[ProbeRow]) -> String {
    let mut s = format!(
        "{:<10} {:>6} {:>18} {:>20}\n",
        "net", "p", "d(a0,a1)", "log pi(a0|s,m1)"
    );
    for r in rows {
        s += &format!(
            "{:<10} {:>6.2} {:>8.4} ± {:<7.4} {:>9.4} ± {:<8.4}\n",
            net.to_string(),
            r.p,
            r.d_mean,
            r.d_std,
            r.logp_mean,
            r.logp_std
        );
    }
    s
}
