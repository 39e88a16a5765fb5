use crate::autodiff::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub enum OptimizerState {
    RmsProp {
        alpha: f64,
        eps: f64,
        avg_sq: Vec<Vec<f64>>,
    },
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        step: u64,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub lr: f64,
    pub state: OptimizerState,
}

fn zeros_like(store: &ParamStore) -> Vec<Vec<f64>> {
    store.tensors().iter().map(|t| vec![0.0; t.numel()]).collect()
}

impl Optimizer {
    pub fn rmsprop(store: &ParamStore, lr: f64, alpha: f64, eps: f64) -> Self {
        Optimizer {
            lr,
            state: OptimizerState::RmsProp {
                alpha,
                eps,
                avg_sq: zeros_like(store),
            },
        }
    }

    pub fn adam(store: &ParamStore, lr: f64) -> Self {
        Optimizer {
            lr,
            state: OptimizerState::Adam {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                step: 0,
                m: zeros_like(store),
                v: zeros_like(store),
            },
        }
    }

    /// Applies one update from the gradients accumulated in `store`.
    /// Parameters without a gradient are treated as having a zero gradient.
    pub fn step(&mut self, store: &mut ParamStore) {
        let lr = self.lr;
        match &mut self.state {
            OptimizerState::RmsProp { alpha, eps, avg_sq } => {
                for (t, sq) in store.tensors_mut().iter_mut().zip(avg_sq.iter_mut()) {
                    let g = t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
                    for ((p, s), g) in t.data_mut().iter_mut().zip(sq.iter_mut()).zip(&g) {
                        *s = *alpha * *s + (1.0 - *alpha) * g * g;
                        *p -= lr * g / (*s + *eps).sqrt();
                    }
                }
            }
            OptimizerState::Adam {
                beta1,
                beta2,
                eps,
                step,
                m,
                v,
            } => {
                *step += 1;
                let bc1 = 1.0 - beta1.powi(*step as i32);
                let bc2 = 1.0 - beta2.powi(*step as i32);
                for ((t, mt), vt) in store.tensors_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                    let g = t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
                    for (((p, mi), vi), g) in t.data_mut().iter_mut().zip(mt.iter_mut()).zip(vt.iter_mut()).zip(&g) {
                        *mi = *beta1 * *mi + (1.0 - *beta1) * g;
                        *vi = *beta2 * *vi + (1.0 - *beta2) * g * g;
                        *p -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + *eps);
                    }
                }
            }
        }
    }
}
