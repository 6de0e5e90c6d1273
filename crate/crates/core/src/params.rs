//! Named parameter collections.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Gradients, Graph, Tensor, Var};

/// Named tensors in a fixed (lexicographic) order. Values are shared so
/// binding them as tape constants does not copy.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<R> {
    map: BTreeMap<String, Arc<Tensor<R>>>,
}

/// A [`ParamStore`] bound onto one tape.
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Gradients keyed by parameter name.
    pub fn collect_grads<R: Real>(&self, grads: &Gradients<R>) -> BTreeMap<String, Tensor<R>> {
        self.vars
            .iter()
            .filter_map(|(k, &v)| grads.get(v).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}

impl<R: Real> ParamStore<R> {
    pub fn new() -> Self {
        ParamStore { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<R>) {
        self.map.insert(name.into(), Arc::new(t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<R>> {
        self.map.get(name).map(|a| a.as_ref())
    }

    pub fn require(&self, name: &str) -> Result<&Arc<Tensor<R>>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<R>> {
        self.map.get_mut(name).map(Arc::make_mut)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|k| k.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<R>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    /// Places every tensor on the tape, as trainable leaves or constants.
    pub fn bind<'a>(&self, g: &mut Graph<'a, R>, trainable: bool) -> BoundParams {
        let vars = self
            .map
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    g.param_arc(v.clone())
                } else {
                    g.constant_arc(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        BoundParams { vars }
    }

    pub fn to_map(&self) -> BTreeMap<String, Tensor<R>> {
        self.map.iter().map(|(k, v)| (k.clone(), (**v).clone())).collect()
    }

    pub fn from_map(map: BTreeMap<String, Tensor<R>>) -> Self {
        ParamStore {
            map: map.into_iter().map(|(k, v)| (k, Arc::new(v))).collect(),
        }
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            map: self.map.iter().map(|(k, v)| (k.clone(), Arc::new(v.cast()))).collect(),
        }
    }

    /// Order-sensitive digest of names, shapes and bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (k, v) in &self.map {
            for b in k.bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
            h ^= v.fingerprint();
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

/// Global L2 norm over a gradient map.
pub fn global_norm<R: Real>(grads: &BTreeMap<String, Tensor<R>>) -> f64 {
    grads
        .values()
        .map(|g| g.norm_sq().as_f64())
        .sum::<f64>()
        .sqrt()
}

/// `acc += g` key by key; keys missing from `acc` are inserted.
pub fn accumulate<R: Real>(acc: &mut BTreeMap<String, Tensor<R>>, g: BTreeMap<String, Tensor<R>>) {
    for (k, v) in g {
        match acc.get_mut(&k) {
            Some(a) => a.add_assign(&v),
            None => {
                acc.insert(k, v);
            }
        }
    }
}

pub fn scale_all<R: Real>(grads: &mut BTreeMap<String, Tensor<R>>, s: R) {
    for g in grads.values_mut() {
        g.scale_in_place(s);
    }
}

/// Flattened inner product over matching keys.
pub fn dot_all<R: Real>(a: &BTreeMap<String, Tensor<R>>, b: &BTreeMap<String, Tensor<R>>) -> f64 {
    a.iter()
        .map(|(k, x)| b.get(k).map_or(0.0, |y| x.dot(y).as_f64()))
        .sum()
}
