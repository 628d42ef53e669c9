//! Named parameter storage and the per-forward binding of parameters into a
//! graph.
//!
//! Every learnable tensor lives in one [`ParamRegistry`] under a stable name.
//! The registry's insertion order is the canonical iteration order for the
//! optimizer and the checkpoint writer, which keeps training deterministic.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Result, RiaError};
use crate::graph::{Graph, TensorId};
use crate::tensor::{Elem, Tensor};

/// Handle to a parameter slot in a [`ParamRegistry`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

pub struct Param<E: Elem> {
    pub name: String,
    pub value: Tensor<E>,
}

pub struct ParamRegistry<E: Elem> {
    params: Vec<Param<E>>,
    by_name: HashMap<String, usize>,
}

impl<E: Elem> Default for ParamRegistry<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> ParamRegistry<E> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<E>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name `{name}`"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id.0);
        self.params.push(Param { name, value });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<E> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    /// Parameters in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<E>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) initialization.
pub fn init_uniform<E: Elem>(
    rng: &mut ChaCha12Rng,
    shape: &[usize],
    fan_in: usize,
) -> Tensor<E> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<E> = (0..numel)
        .map(|_| E::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::new(shape, data).expect("init shape is valid")
}

/// One forward/backward pass: a graph plus the lazy binding of registry
/// parameters into it. Binding the same parameter twice yields the same
/// graph leaf, so shared tables accumulate gradient across all their uses.
pub struct Session<'a, E: Elem> {
    pub graph: Graph<E>,
    registry: &'a ParamRegistry<E>,
    bound: Vec<Option<TensorId>>,
    trainable: bool,
}

impl<'a, E: Elem> Session<'a, E> {
    pub fn new(registry: &'a ParamRegistry<E>, trainable: bool) -> Self {
        Self {
            graph: Graph::new(),
            bound: vec![None; registry.len()],
            registry,
            trainable,
        }
    }

    pub fn param(&mut self, id: ParamId) -> TensorId {
        if let Some(t) = self.bound[id.0] {
            return t;
        }
        let t = self
            .graph
            .leaf(self.registry.get(id).clone(), self.trainable);
        self.bound[id.0] = Some(t);
        t
    }

    pub fn registry(&self) -> &ParamRegistry<E> {
        self.registry
    }

    /// Run backward from `loss` and collect per-parameter gradients for
    /// every parameter that was bound in this session.
    pub fn backward(&mut self, loss: TensorId) -> Result<GradStore<E>> {
        self.graph.backward(loss)?;
        let mut store = GradStore::new(self.registry.len());
        for (slot, bound) in self.bound.iter().enumerate() {
            if let Some(t) = bound {
                if let Some(g) = self.graph.grad(*t) {
                    if let Some(&bad) = g.iter().find(|v| !v.is_finite()) {
                        return Err(RiaError::Training {
                            param: self.registry.name(ParamId(slot)).to_string(),
                            detail: format!("non-finite gradient {bad}"),
                        });
                    }
                    store.accumulate(ParamId(slot), g);
                }
            }
        }
        Ok(store)
    }
}

/// Gradient buffers aligned with a [`ParamRegistry`]. Accumulation order is
/// the caller's invocation order, which training keeps fixed.
pub struct GradStore<E: Elem> {
    grads: Vec<Option<Vec<E>>>,
}

impl<E: Elem> GradStore<E> {
    pub fn new(len: usize) -> Self {
        Self {
            grads: (0..len).map(|_| None).collect(),
        }
    }

    pub fn accumulate(&mut self, id: ParamId, g: &[E]) {
        match &mut self.grads[id.0] {
            Some(buf) => {
                for (dst, &v) in buf.iter_mut().zip(g) {
                    *dst = *dst + v;
                }
            }
            None => self.grads[id.0] = Some(g.to_vec()),
        }
    }

    pub fn merge(&mut self, other: &GradStore<E>) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, c: E) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v = *v * c;
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[E]> {
        self.grads[id.0].as_deref()
    }

    pub fn touched(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|_| ParamId(i)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn shared_binding_accumulates_gradient_once_per_use() {
        let mut reg = ParamRegistry::<f64>::new();
        let w = reg.add("w", Tensor::scalar(3.0));
        let mut sess = Session::new(&reg, true);
        let a = sess.param(w);
        let b = sess.param(w);
        assert_eq!(a, b);
        let prod = sess.graph.mul(a, b).unwrap(); // w^2
        let grads = sess.backward(prod).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[6.0]);
    }

    #[test]
    fn init_respects_bound_and_seed() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let t: Tensor<f64> = init_uniform(&mut rng, &[4, 4], 4);
        assert!(t.data().iter().all(|v| v.abs() <= 0.5));
        let mut rng2 = ChaCha12Rng::seed_from_u64(9);
        let t2: Tensor<f64> = init_uniform(&mut rng2, &[4, 4], 4);
        assert_eq!(t, t2);
    }
}
