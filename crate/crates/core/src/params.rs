//! Named parameter storage and per-pass binding onto a tape.

use std::cell::RefCell;

use rand::Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Forward-pass mode; only affects batch normalisation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

/// Trainable parameters plus non-trainable buffers (running statistics),
/// both addressed by unique dotted names in registration order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<(String, Tensor)>,
    buffers: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn check_unique(&self, name: &str) {
        let taken = self.params.iter().chain(&self.buffers).any(|(n, _)| n == name);
        assert!(!taken, "parameter name `{name}` registered twice");
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        self.check_unique(&name);
        self.params.push((name, value));
        ParamId(self.params.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> BufferId {
        let name = name.into();
        self.check_unique(&name);
        self.buffers.push((name, value));
        BufferId(self.buffers.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].1
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.params[id.0];
        if slot.1.shape() != value.shape() {
            return Err(Error::Dimension(format!(
                "parameter `{}` has shape {:?}, got {:?}",
                slot.0,
                slot.1.shape(),
                value.shape()
            )));
        }
        slot.1 = value;
        Ok(())
    }

    pub fn buffer(&self, id: BufferId) -> &Tensor {
        &self.buffers[id.0].1
    }

    pub(crate) fn set_buffer(&mut self, id: BufferId, value: Tensor) {
        self.buffers[id.0].1 = value;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn find_buffer(&self, name: &str) -> Option<BufferId> {
        self.buffers.iter().position(|(n, _)| n == name).map(BufferId)
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.buffers.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    /// Parameter values in registration order.
    pub fn values(&self) -> Vec<Tensor> {
        self.params.iter().map(|(_, t)| t.clone()).collect()
    }
}

/// Binding of a [`ParamStore`] to a tape for one forward pass.
pub struct Ctx<'t, 's> {
    tape: &'t Tape,
    store: &'s ParamStore,
    vars: Vec<Var<'t>>,
    mode: Mode,
    buffer_updates: RefCell<Vec<(BufferId, Tensor)>>,
}

impl<'t, 's> Ctx<'t, 's> {
    /// Binds every parameter; `trainable` decides whether they collect gradients.
    pub fn new(tape: &'t Tape, store: &'s ParamStore, mode: Mode, trainable: bool) -> Self {
        let vars = store.params.iter().map(|(_, t)| tape.leaf(t.clone(), trainable)).collect();
        Ctx { tape, store, vars, mode, buffer_updates: RefCell::new(Vec::new()) }
    }

    /// Binds externally supplied parameter values (same order as the store).
    pub fn with_vars(tape: &'t Tape, store: &'s ParamStore, vars: Vec<Var<'t>>, mode: Mode) -> Self {
        assert_eq!(vars.len(), store.len(), "one variable per stored parameter");
        Ctx { tape, store, vars, mode, buffer_updates: RefCell::new(Vec::new()) }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn p(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    pub fn buffer(&self, id: BufferId) -> &'s Tensor {
        self.store.buffer(id)
    }

    pub(crate) fn queue_buffer_update(&self, id: BufferId, value: Tensor) {
        self.buffer_updates.borrow_mut().push((id, value));
    }

    /// Running-statistic updates produced by training-mode batch norms.
    pub fn take_buffer_updates(&self) -> Vec<(BufferId, Tensor)> {
        std::mem::take(&mut self.buffer_updates.borrow_mut())
    }
}

/// Applies queued buffer updates to the store.
pub fn apply_buffer_updates(store: &mut ParamStore, updates: Vec<(BufferId, Tensor)>) {
    for (id, value) in updates {
        store.set_buffer(id, value);
    }
}

/// Normal entries with standard deviation `1/sqrt(fan_in)`.
pub fn fan_in_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::randn(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

/// An `rows×cols` matrix (`rows <= cols`) with orthonormal rows, from
/// modified Gram-Schmidt on Gaussian vectors.
pub fn orthonormal_rows<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    assert!(rows <= cols, "cannot fit {rows} orthonormal rows in dimension {cols}");
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while basis.len() < rows {
        let mut v = Tensor::randn(&[cols], 1.0, rng).into_data();
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    Tensor::from_parts(vec![rows, cols], basis.concat())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthonormality() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = orthonormal_rows(5, 9, &mut rng);
        for i in 0..5 {
            for j in 0..5 {
                let dot: f64 = (0..9).map(|k| q.at(&[i, k]) * q.at(&[j, k])).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    #[should_panic(expected = "registered twice")]
    fn duplicate_names_panic() {
        let mut s = ParamStore::new();
        s.add("a", Tensor::zeros(&[1]));
        s.add_buffer("a", Tensor::zeros(&[1]));
    }

    #[test]
    fn set_checks_shape() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::zeros(&[2]));
        assert!(s.set(id, Tensor::zeros(&[3])).is_err());
        s.set(id, Tensor::ones(&[2])).unwrap();
        assert_eq!(s.num_scalars(), 2);
        assert_eq!(s.find("w"), Some(id));
    }
}
