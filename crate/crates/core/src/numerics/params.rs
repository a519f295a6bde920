use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle into a [`ParamStore`]. Two modules holding the same id share storage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<R> {
    pub name: String,
    pub value: Tensor<R>,
    pub grad: Option<Tensor<R>>,
    pub frozen: bool,
}

/// Named parameter tensors with gradient slots.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<R = f32> {
    params: Vec<Parameter<R>>,
    by_name: HashMap<String, ParamId>,
}

pub const INIT_STD: f64 = 0.02;

/// Truncated normal (re-drawn beyond two standard deviations).
pub fn truncated_normal<R: Real, G: Rng + ?Sized>(rng: &mut G, shape: &[usize], std: f64) -> Tensor<R> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break R::of(z * std);
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<R>) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            grad: None,
            frozen: false,
        });
        id
    }

    pub fn add_normal<G: Rng + ?Sized>(&mut self, name: impl Into<String>, shape: &[usize], rng: &mut G) -> ParamId {
        let t = truncated_normal(rng, shape, INIT_STD);
        self.add(name, t)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn add_ones(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::full(shape, R::one()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<R> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<R> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<R> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<R> {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<R>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn set_frozen_prefix(&mut self, prefix: &str, frozen: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.frozen = frozen;
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds `grad` into the parameter's gradient slot.
    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[R]) {
        let p = &mut self.params[id.0];
        if p.frozen {
            return;
        }
        let slot = p
            .grad
            .get_or_insert_with(|| Tensor::zeros(p.value.shape()));
        for (g, &d) in slot.data_mut().iter_mut().zip(grad) {
            *g += d;
        }
    }

    pub fn scale_grads(&mut self, factor: R) {
        for g in self.params.iter_mut().filter_map(|p| p.grad.as_mut()) {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }

    /// Copies every tensor whose name starts with `prefix` from `source`.
    /// Shapes must agree; missing tensors are an error.
    pub fn load_prefix(&mut self, source: &[(String, Tensor<f32>)], prefix: &str) -> Result<usize> {
        let lookup: HashMap<&str, &Tensor<f32>> =
            source.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut loaded = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            let src = lookup.get(p.name.as_str()).ok_or_else(|| Error::Load {
                name: p.name.clone(),
                reason: "missing from checkpoint".into(),
            })?;
            if src.shape() != p.value.shape() {
                return Err(Error::Load {
                    name: p.name.clone(),
                    reason: format!(
                        "checkpoint shape {:?} != model shape {:?}",
                        src.shape(),
                        p.value.shape()
                    ),
                });
            }
            p.value = src.cast();
            loaded += 1;
        }
        Ok(loaded)
    }

    pub fn to_named_f32(&self) -> Vec<(String, Tensor<f32>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.cast()))
            .collect()
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(Tensor::cast),
                    frozen: p.frozen,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// SHA-256 over names and little-endian values of every parameter under `prefix`.
    pub fn digest(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            h.update(p.name.as_bytes());
            for v in p.value.data() {
                h.update(v.as_f64().to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }
}
