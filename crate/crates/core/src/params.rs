//! Named parameter storage, deterministic initialization, and tape binding.
//!
//! Parameters live outside the tape so the tape can be rebuilt every step.
//! A forward pass binds each parameter it touches as a fresh leaf through a
//! [`ParamSession`]; after backward, the session harvests leaf gradients
//! back into the registry, where the optimizer reads them.
//!
//! Names use dotted paths (`backbone.fc1.w`, `expert.2.head.b`, `global.
//! query`); the prefix identifies the parameter group a value belongs to.

use crate::tensor::{Tape, Tensor, TensorId};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("duplicate parameter name {0:?}")]
    DuplicateName(String),
    #[error("unknown parameter name {0:?}")]
    UnknownName(String),
    #[error("flat vector has {got} entries, registry holds {expected}")]
    FlatLength { got: usize, expected: usize },
}

/// Handle to one parameter in a [`ParamRegistry`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone)]
struct Param {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
    momentum: Vec<f64>,
}

/// Insertion-ordered collection of named parameters with their gradient
/// and momentum buffers.
#[derive(Debug, Default, Clone)]
pub struct ParamRegistry {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

impl ParamRegistry {
    pub fn new() -> Self {
        ParamRegistry::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId, ParamError> {
        if self.by_name.contains_key(name) {
            return Err(ParamError::DuplicateName(name.to_string()));
        }
        let id = ParamId(self.params.len());
        let numel = value.numel();
        self.params.push(Param {
            name: name.to_string(),
            value,
            grad: vec![0.0; numel],
            momentum: vec![0.0; numel],
        });
        self.by_name.insert(name.to_string(), id);
        Ok(id)
    }

    /// Glorot-uniform weight matrix [rows, cols]: entries drawn from
    /// U(−limit, limit) with limit = √(6 / (rows + cols)), in row-major
    /// order off the supplied stream.
    pub fn glorot(
        &mut self,
        name: &str,
        rows: usize,
        cols: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamId, ParamError> {
        let limit = (6.0 / (rows + cols) as f64).sqrt();
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        self.add(name, Tensor::new(vec![rows, cols], data).expect("shape matches data"))
    }

    pub fn zeros(&mut self, name: &str, shape: Vec<usize>) -> Result<ParamId, ParamError> {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: Vec<usize>) -> Result<ParamId, ParamError> {
        let numel = shape.iter().product();
        self.add(
            name,
            Tensor::new(shape, vec![1.0; numel]).expect("shape matches data"),
        )
    }

    pub fn id(&self, name: &str) -> Result<ParamId, ParamError> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| ParamError::UnknownName(name.to_string()))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].grad
    }

    pub fn momentum(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].momentum
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) {
        for (dst, &g) in self.params[id.0].grad.iter_mut().zip(grad) {
            *dst += g;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn total_entries(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Parameter ids in insertion order (which is construction order and
    /// therefore deterministic for a given model configuration).
    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    /// Ids whose dotted name starts with `prefix`.
    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.ids().filter(move |&id| self.name(id).starts_with(prefix))
    }

    /// All values concatenated in insertion order.
    pub fn flatten_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_entries());
        for p in &self.params {
            out.extend_from_slice(p.value.data());
        }
        out
    }

    /// All gradients concatenated in insertion order.
    pub fn flatten_grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_entries());
        for p in &self.params {
            out.extend_from_slice(&p.grad);
        }
        out
    }

    /// Overwrite all values from a flat vector laid out like
    /// [`ParamRegistry::flatten_values`].
    pub fn load_values(&mut self, flat: &[f64]) -> Result<(), ParamError> {
        if flat.len() != self.total_entries() {
            return Err(ParamError::FlatLength {
                got: flat.len(),
                expected: self.total_entries(),
            });
        }
        let mut offset = 0;
        for p in &mut self.params {
            let numel = p.value.numel();
            let shape = p.value.shape().to_vec();
            p.value = Tensor::new(shape, flat[offset..offset + numel].to_vec())
                .expect("shape unchanged");
            offset += numel;
        }
        Ok(())
    }

    pub(crate) fn momentum_mut(&mut self, id: ParamId) -> (&mut Tensor, &[f64], &mut Vec<f64>) {
        let p = &mut self.params[id.0];
        (&mut p.value, &p.grad, &mut p.momentum)
    }

    pub(crate) fn set_momentum(&mut self, id: ParamId, momentum: Vec<f64>) {
        self.params[id.0].momentum = momentum;
    }
}

/// Per-forward binding of registry parameters onto a tape.
#[derive(Default)]
pub struct ParamSession {
    bound: Vec<(ParamId, TensorId)>,
}

impl ParamSession {
    pub fn new() -> Self {
        ParamSession::default()
    }

    /// Bind a parameter as a requires_grad leaf, reusing the existing leaf
    /// if this parameter was already bound on this session.
    pub fn bind(&mut self, tape: &mut Tape, reg: &ParamRegistry, id: ParamId) -> TensorId {
        if let Some(&(_, tid)) = self.bound.iter().find(|&&(pid, _)| pid == id) {
            return tid;
        }
        let tid = tape.leaf(reg.value(id).clone(), true);
        self.bound.push((id, tid));
        tid
    }

    /// Add each bound leaf's tape gradient into the registry buffers.
    pub fn harvest(&self, tape: &Tape, reg: &mut ParamRegistry) {
        for &(pid, tid) in &self.bound {
            if let Some(g) = tape.grad(tid) {
                reg.accumulate_grad(pid, g);
            }
        }
    }

    pub fn bound_len(&self) -> usize {
        self.bound.len()
    }
}

/// Borrowed bundle of everything a forward pass needs: the tape being
/// recorded, the registry values, and the session tracking bindings.
pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    pub reg: &'a ParamRegistry,
    pub sess: &'a mut ParamSession,
}

impl<'a> Forward<'a> {
    pub fn new(tape: &'a mut Tape, reg: &'a ParamRegistry, sess: &'a mut ParamSession) -> Self {
        Forward { tape, reg, sess }
    }

    pub fn bind(&mut self, id: ParamId) -> TensorId {
        self.sess.bind(self.tape, self.reg, id)
    }

    /// x·W (+ b) for x [rows, d_in], W [d_in, d_out], b [d_out].
    pub fn linear(
        &mut self,
        x: TensorId,
        w: ParamId,
        b: Option<ParamId>,
    ) -> Result<TensorId, crate::tensor::TensorError> {
        let w = self.bind(w);
        let y = self.tape.matmul(x, w)?;
        match b {
            Some(b) => {
                let b = self.bind(b);
                self.tape.add_broadcast(y, b)
            }
            None => Ok(y),
        }
    }

    /// Token-wise affine map on x [B, n, d_in] -> [B, n, d_out].
    pub fn linear_tokens(
        &mut self,
        x: TensorId,
        w: ParamId,
        b: Option<ParamId>,
    ) -> Result<TensorId, crate::tensor::TensorError> {
        self.linear(x, w, b)
    }
}

/// Independent ChaCha stream derived from a master seed and a label, so
/// different components (per-expert init, per-domain data, shuffling)
/// draw from non-overlapping deterministic sequences.
pub fn derive_rng(master_seed: u64, label: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(fnv1a(label));
    rng
}

fn fnv1a(s: &str) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in s.bytes() {
        hash ^= u64::from(byte);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn names_are_unique_and_lookup_works() {
        let mut reg = ParamRegistry::new();
        let id = reg.zeros("backbone.fc1.w", vec![2, 3]).unwrap();
        assert_eq!(reg.id("backbone.fc1.w").unwrap(), id);
        assert!(matches!(
            reg.zeros("backbone.fc1.w", vec![2, 3]),
            Err(ParamError::DuplicateName(_))
        ));
        assert!(matches!(reg.id("nope"), Err(ParamError::UnknownName(_))));
    }

    #[test]
    fn glorot_respects_limit_and_is_seeded() {
        let mut rng_a = derive_rng(7, "expert.0");
        let mut rng_b = derive_rng(7, "expert.0");
        let mut reg_a = ParamRegistry::new();
        let mut reg_b = ParamRegistry::new();
        let a = reg_a.glorot("w", 16, 24, &mut rng_a).unwrap();
        let b = reg_b.glorot("w", 16, 24, &mut rng_b).unwrap();
        assert_eq!(reg_a.value(a).data(), reg_b.value(b).data());
        let limit = (6.0 / 40.0f64).sqrt();
        assert!(reg_a.value(a).data().iter().all(|&v| v.abs() < limit));
        // Not degenerate: entries differ.
        let d = reg_a.value(a).data();
        assert!(d.iter().any(|&v| (v - d[0]).abs() > 1e-9));
    }

    #[test]
    fn derived_streams_differ_by_label_and_seed() {
        let mut a = derive_rng(7, "expert.0");
        let mut b = derive_rng(7, "expert.1");
        let mut c = derive_rng(8, "expert.0");
        let xs: Vec<u64> = (0..4).map(|_| a.next_u64()).collect();
        let ys: Vec<u64> = (0..4).map(|_| b.next_u64()).collect();
        let zs: Vec<u64> = (0..4).map(|_| c.next_u64()).collect();
        assert_ne!(xs, ys);
        assert_ne!(xs, zs);
    }

    #[test]
    fn session_binds_once_and_harvests_grads() {
        let mut reg = ParamRegistry::new();
        let pid = reg
            .add("w", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        let mut tape = Tape::new();
        let mut session = ParamSession::new();
        let t1 = session.bind(&mut tape, &reg, pid);
        let t2 = session.bind(&mut tape, &reg, pid);
        assert_eq!(t1, t2);
        assert_eq!(session.bound_len(), 1);
        let loss = tape.mean(t1);
        tape.backward(loss).unwrap();
        session.harvest(&tape, &mut reg);
        assert_eq!(reg.grad(pid), &[0.5, 0.5]);
        session.harvest(&tape, &mut reg);
        assert_eq!(reg.grad(pid), &[1.0, 1.0]);
        reg.zero_grads();
        assert_eq!(reg.grad(pid), &[0.0, 0.0]);
    }

    #[test]
    fn flatten_and_load_roundtrip() {
        let mut reg = ParamRegistry::new();
        reg.add("a", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        reg.add("b", Tensor::new(vec![1], vec![3.0]).unwrap())
            .unwrap();
        let flat = reg.flatten_values();
        assert_eq!(flat, vec![1.0, 2.0, 3.0]);
        reg.load_values(&[4.0, 5.0, 6.0]).unwrap();
        assert_eq!(reg.flatten_values(), vec![4.0, 5.0, 6.0]);
        assert!(matches!(
            reg.load_values(&[0.0]),
            Err(ParamError::FlatLength { got: 1, expected: 3 })
        ));
    }

    #[test]
    fn prefix_selection_finds_groups() {
        let mut reg = ParamRegistry::new();
        reg.zeros("backbone.w", vec![1]).unwrap();
        reg.zeros("expert.0.w", vec![1]).unwrap();
        reg.zeros("expert.1.w", vec![1]).unwrap();
        reg.zeros("global.q", vec![1]).unwrap();
        assert_eq!(reg.ids_with_prefix("expert.").count(), 2);
        assert_eq!(reg.ids_with_prefix("expert.1.").count(), 1);
        assert_eq!(reg.ids_with_prefix("backbone.").count(), 1);
    }
}
