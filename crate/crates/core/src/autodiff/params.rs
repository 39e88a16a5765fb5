use std::sync::atomic::{AtomicU64, Ordering};

use super::tape::Tape;
use super::tensor::Tensor;

static NEXT_STORE_UID: AtomicU64 = AtomicU64::new(1);

fn fresh_uid() -> u64 {
    NEXT_STORE_UID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of trainable tensors.
///
/// Each store carries a process-unique id so that a [`Tape`] can tell which
/// leaves belong to which store when gradients are absorbed. Cloning yields
/// a store with a new id.
#[derive(Debug)]
pub struct ParamStore {
    uid: u64,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        ParamStore {
            uid: fresh_uid(),
            names: self.names.clone(),
            tensors: self.tensors.clone(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            uid: fresh_uid(),
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor.requiring_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Adds the gradients accumulated on `tape` for this store's leaves into
    /// each parameter's gradient accumulator.
    pub fn absorb(&mut self, tape: &Tape) {
        for (idx, grad) in tape.param_grads(self.uid) {
            self.tensors[idx].accumulate_grad(grad);
        }
    }

    /// Flattened gradients this store's leaves received on `tape`, without
    /// touching the stored accumulators. Unbound parameters contribute zeros.
    pub fn flat_grads_on(&self, tape: &Tape) -> Vec<f64> {
        let mut out: Vec<Vec<f64>> = self.tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
        for (idx, g) in tape.param_grads(self.uid) {
            out[idx].iter_mut().zip(g).for_each(|(o, g)| *o += g);
        }
        out.concat()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter_map(Tensor::grad)
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales gradients so their global L2 norm is at most `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        let coef = max_norm / (norm + 1e-6);
        if coef < 1.0 {
            for t in &mut self.tensors {
                if let Some(g) = t.grad_mut() {
                    g.iter_mut().for_each(|v| *v *= coef);
                }
            }
        }
        norm
    }

    /// Flattened copy of every parameter value, in store order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Flattened gradients (zeros where no gradient has been accumulated).
    pub fn flat_grads(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| match t.grad() {
                Some(g) => g.to_vec(),
                None => vec![0.0; t.numel()],
            })
            .collect()
    }

    pub fn set_flat_values(&mut self, values: &[f64]) {
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.numel();
            t.data_mut().copy_from_slice(&values[off..off + n]);
            off += n;
        }
        assert_eq!(off, values.len(), "flat parameter length mismatch");
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}
