//! Dense CHW tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable value plus an optional record of the operation
//! that produced it; alive outputs keep their inputs alive, forming a DAG.
//! Node ids are allocated monotonically, so an op's output always has a larger
//! id than its inputs and "descending id" is a valid reverse-topological
//! order — that is the whole scheduling story of [`Tensor::backward`].
//!
//! Gradients accumulate additively and persist until [`Tensor::zero_grad`],
//! so calling backward twice doubles leaf gradients by design. Only leaves
//! created with [`Tensor::with_grad`] and the subgraphs that feed the loss are
//! visited; frozen inputs (e.g. a pinned surrogate) cost nothing.

mod ops;
mod optim;

pub use ops::{
    avg_pool2d, batch_norm2d, concat_channels, conv2d, fully_connected, global_avg_pool,
    haar2_forward, haar2_inverse, upsample_nearest2x, Activation, BnStats, Mode, Reduce,
};
pub use optim::{adam_step, Adam, AdamState};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use rand_core::RngCore;
use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

pub(crate) struct Inner<S: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RwLock<Vec<S>>,
    grad: Mutex<Option<Vec<S>>>,
    requires_grad: bool,
    op: Option<ops::Op<S>>,
}

pub struct Tensor<S: Scalar> {
    inner: Arc<Inner<S>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl<S: Scalar> Tensor<S> {
    pub(crate) fn build(shape: Vec<usize>, data: Vec<S>, op: Option<ops::Op<S>>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Arc::new(Inner {
                id: fresh_id(),
                shape,
                data: RwLock::new(data),
                grad: Mutex::new(None),
                requires_grad: false,
                op,
            }),
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} wants {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Self::build(shape.to_vec(), data, None))
    }

    pub fn from_f64_slice(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| S::lit(v)).collect())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(shape.to_vec(), vec![S::zero(); shape.iter().product()], None)
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        Self::build(shape.to_vec(), vec![v; shape.iter().product()], None)
    }

    pub fn scalar(v: S) -> Self {
        Self::build(vec![1], vec![v], None)
    }

    /// Leaf filled i.i.d. uniform from [lo, hi), consuming one f64 per element.
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl RngCore) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| S::lit(crate::rng::uniform(rng, lo, hi)))
            .collect();
        Self::build(shape.to_vec(), data, None)
    }

    /// Mark this leaf as trainable. Must be called before the tensor is used
    /// in any op; graph outputs themselves are never trainable.
    pub fn with_grad(self) -> Self {
        assert!(
            self.inner.op.is_none(),
            "with_grad applies to leaves, not op outputs"
        );
        let data = self.inner.data.read().unwrap().clone();
        Tensor {
            inner: Arc::new(Inner {
                id: fresh_id(),
                shape: self.inner.shape.clone(),
                data: RwLock::new(data),
                grad: Mutex::new(None),
                requires_grad: true,
                op: None,
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub(crate) fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match *self.inner.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            ref s => Err(Error::shape(op, format!("expected 4-D NxCxHxW tensor, got {:?}", s))),
        }
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match *self.inner.shape.as_slice() {
            [n, f] => Ok((n, f)),
            ref s => Err(Error::shape(op, format!("expected 2-D NxF tensor, got {:?}", s))),
        }
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.inner.data.read().unwrap().clone()
    }

    pub fn with_data<R>(&self, f: impl FnOnce(&[S]) -> R) -> R {
        f(&self.inner.data.read().unwrap())
    }

    pub(crate) fn data(&self) -> std::sync::RwLockReadGuard<'_, Vec<S>> {
        self.inner.data.read().unwrap()
    }

    /// Replace the stored values (same element count). Used by optimizers,
    /// checkpoint loading and finite-difference probes; does not touch the
    /// recorded graph.
    pub fn set_data(&self, data: Vec<S>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::shape(
                "set_data",
                format!("tensor holds {} elements, got {}", self.numel(), data.len()),
            ));
        }
        *self.inner.data.write().unwrap() = data;
        Ok(())
    }

    pub(crate) fn map_data_mut(&self, f: impl FnOnce(&mut [S])) {
        f(&mut self.inner.data.write().unwrap())
    }

    pub fn item(&self) -> Result<S> {
        if self.numel() != 1 {
            return Err(Error::shape(
                "item",
                format!("expected a 1-element tensor, got shape {:?}", self.shape()),
            ));
        }
        Ok(self.inner.data.read().unwrap()[0])
    }

    /// Copy of the accumulated gradient, if any.
    pub fn grad(&self) -> Option<Vec<S>> {
        self.inner.grad.lock().unwrap().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().unwrap() = None;
    }

    /// Add `delta` into the gradient buffer (allocating zeros on first use).
    pub fn accumulate_grad(&self, delta: &[S]) -> Result<()> {
        if delta.len() != self.numel() {
            return Err(Error::shape(
                "accumulate_grad",
                format!("tensor holds {} elements, got {}", self.numel(), delta.len()),
            ));
        }
        let mut guard = self.inner.grad.lock().unwrap();
        let g = guard.get_or_insert_with(|| vec![S::zero(); delta.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi = *gi + *di;
        }
        Ok(())
    }

    /// Value-only copy with no graph history and no grad flag.
    pub fn detach(&self) -> Self {
        Self::build(self.inner.shape.clone(), self.to_vec(), None)
    }

    pub(crate) fn op(&self) -> Option<&ops::Op<S>> {
        self.inner.op.as_ref()
    }

    /// Reverse-mode sweep from a scalar loss. Gradients land additively on
    /// every trainable leaf the loss depends on; subgraphs that cannot reach
    /// a trainable leaf are skipped entirely.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss(self.shape().to_vec()));
        }

        // Gather every reachable tensor once.
        let mut all: Vec<Tensor<S>> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.id()) {
                continue;
            }
            if let Some(op) = t.op() {
                for input in op.inputs() {
                    stack.push(input);
                }
            }
            all.push(t);
        }

        // Ids ascend from inputs to outputs, so one ascending pass settles
        // "can this node reach a trainable leaf".
        all.sort_unstable_by_key(|t| t.id());
        let mut contributes: HashMap<u64, bool> = HashMap::with_capacity(all.len());
        for t in &all {
            let c = t.requires_grad()
                || t.op()
                    .map(|op| op.inputs().iter().any(|i| contributes[&i.id()]))
                    .unwrap_or(false);
            contributes.insert(t.id(), c);
        }

        if !contributes[&self.id()] {
            return Ok(()); // loss depends on no trainable leaf; nothing to do
        }

        // In-flight gradients live in a map for the duration of this sweep;
        // only trainable leaves keep a persistent (accumulating) buffer, so
        // repeated backward calls never double-count through stale state.
        let mut flow: HashMap<u64, Vec<S>> = HashMap::new();
        flow.insert(self.id(), vec![S::one()]);
        let needs = |t: &Tensor<S>| contributes.get(&t.id()).copied().unwrap_or(false);
        for t in all.iter().rev() {
            if !contributes[&t.id()] {
                continue;
            }
            let gout = match flow.remove(&t.id()) {
                Some(g) => g,
                None => continue, // no consumer fed it a gradient
            };
            if t.op().is_some() {
                let mut sink = |input: &Tensor<S>, delta: Vec<S>| {
                    debug_assert_eq!(delta.len(), input.numel());
                    match flow.entry(input.id()) {
                        std::collections::hash_map::Entry::Occupied(mut e) => {
                            for (a, d) in e.get_mut().iter_mut().zip(&delta) {
                                *a = *a + *d;
                            }
                        }
                        std::collections::hash_map::Entry::Vacant(v) => {
                            v.insert(delta);
                        }
                    }
                };
                ops::backprop_node(t, &gout, &needs, &mut sink)?;
            } else if t.requires_grad() {
                t.accumulate_grad(&gout)?;
            }
        }
        Ok(())
    }
}

/// Named, ordered collection of trainable leaves. Order is insertion order
/// and defines the optimizer-state and checkpoint layouts.
pub struct ParamSet<S: Scalar> {
    items: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet { items: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, t: &Tensor<S>) -> Result<()> {
        let name = name.into();
        if self.items.iter().any(|(n, _)| *n == name) {
            return Err(Error::DuplicateParam(name));
        }
        if !t.requires_grad() {
            return Err(Error::invalid(format!(
                "parameter '{name}' is not marked trainable"
            )));
        }
        self.items.push((name, t.clone()));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.items.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.items.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn zero_grad(&self) {
        for (_, t) in &self.items {
            t.zero_grad();
        }
    }

    pub fn numel(&self) -> usize {
        self.items.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Little-endian concatenation of all values in set order.
    pub fn value_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.numel() * S::BYTES);
        for (_, t) in &self.items {
            for v in t.data().iter() {
                v.write_le(&mut out);
            }
        }
        out
    }

    /// Hex SHA-256 over [`Self::value_bytes`]; cheap identity for "did these
    /// weights change" audits and report metadata.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let digest = Sha256::digest(self.value_bytes());
        let mut s = String::with_capacity(64);
        for b in digest {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }
}
