use crate::error::{Error, Result};

/// Per-step inputs to advantage estimation, in time order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaeStep {
    pub reward: f64,
    pub value: f64,
    pub done: bool,
    pub terminal: bool,
    /// Value of the next state when the trajectory is cut here (time limit
    /// or end of a worker segment).
    pub bootstrap: Option<f64>,
}

/// Generalized advantage estimation over a flat sequence of segments.
///
/// The successor value is 0 after a terminal step, the bootstrap when one
/// is recorded, and otherwise the value of the following step. The
/// recursion restarts after any step that is done or bootstrapped.
/// Returns `(advantages, returns)` with `returns = advantages + values`.
pub fn gae(steps: &[GaeStep], gamma: f64, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(0.0..=1.0).contains(&gamma) || !(0.0..=1.0).contains(&lambda) {
        return Err(Error::config(
            "gae",
            format!("gamma {gamma} and lambda {lambda} must lie in [0, 1]"),
        ));
    }
    let n = steps.len();
    if let Some(last) = steps.last() {
        if !last.done && last.bootstrap.is_none() {
            return Err(Error::Contract("final step is neither done nor bootstrapped".into()));
        }
    }
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let s = steps[t];
        let next_v = if s.terminal {
            0.0
        } else if let Some(b) = s.bootstrap {
            b
        } else if s.done {
            0.0
        } else {
            steps[t + 1].value
        };
        let delta = s.reward + gamma * next_v - s.value;
        let carry = !s.done && s.bootstrap.is_none();
        running = delta + if carry { gamma * lambda * running } else { 0.0 };
        adv[t] = running;
    }
    let ret = adv.iter().zip(steps).map(|(a, s)| a + s.value).collect();
    Ok((adv, ret))
}

/// Shifts and scales `xs` to mean 0 and standard deviation 1.
pub fn normalize(xs: &mut [f64]) {
    if xs.len() < 2 {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let denom = if std > 1e-12 { std } else { 1.0 };
    xs.iter_mut().for_each(|x| *x = (*x - mean) / denom);
}
