//! Named parameter storage shared by every network.
//!
//! Networks do not own their weights; they read them by name from a
//! [`ParamStore`] through a per-pass [`Binding`], which decides which
//! entries become trainable graph leaves.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::Arc;

use lcnerf_autograd::{Element, Var};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T: Element> {
    entries: BTreeMap<String, Arc<ArrayD<T>>>,
}

impl<T: Element> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<T>) {
        self.entries.insert(name.into(), Arc::new(value));
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<T>> {
        self.entries.get(name).map(|a| a.as_ref())
    }

    pub fn get_arc(&self, name: &str) -> Option<&Arc<ArrayD<T>>> {
        self.entries.get(name)
    }

    /// Mutable access; copies on write if the storage is shared.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<T>> {
        self.entries.get_mut(name).map(Arc::make_mut)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.entries.values().map(|a| a.len()).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Arc::new(v.mapv(|x| U::of(x.as_f64())))))
                .collect(),
        }
    }

    /// Entries whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), Arc::clone(v)))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: &ParamStore<T>) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), Arc::clone(v));
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|a| a.iter().all(|x| x.is_finite()))
    }
}

/// Per-pass view of a [`ParamStore`] as graph leaves.
pub struct Binding<'s, T: Element> {
    store: &'s ParamStore<T>,
    trainable: Box<dyn Fn(&str) -> bool + 's>,
    vars: RefCell<BTreeMap<String, Var<T>>>,
}

impl<'s, T: Element> Binding<'s, T> {
    /// Every parameter is a constant.
    pub fn frozen(store: &'s ParamStore<T>) -> Self {
        Self::with(store, |_| false)
    }

    /// Parameters matching `trainable` become differentiable leaves.
    pub fn with(store: &'s ParamStore<T>, trainable: impl Fn(&str) -> bool + 's) -> Self {
        Self {
            store,
            trainable: Box::new(trainable),
            vars: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn var(&self, name: &str) -> Var<T> {
        if let Some(v) = self.vars.borrow().get(name) {
            return v.clone();
        }
        let arc = self
            .store
            .get_arc(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from store"));
        let v = Var::from_arc(Arc::clone(arc), (self.trainable)(name));
        self.vars.borrow_mut().insert(name.to_string(), v.clone());
        v
    }

    /// Trainable leaves touched so far, in name order.
    pub fn trainable_vars(&self) -> Vec<(String, Var<T>)> {
        self.vars
            .borrow()
            .iter()
            .filter(|(_, v)| v.requires_grad())
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }
}

/// Gradients keyed by parameter name.
pub type Grads<T> = BTreeMap<String, ArrayD<T>>;

pub(crate) fn uniform<T: Element, R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> ArrayD<T> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || T::of(rng.gen_range(-bound..=bound)))
}

pub(crate) fn zeros<T: Element>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::zeros(IxDyn(shape))
}

/// Global L2 norm over a set of gradients.
pub fn grad_norm<T: Element>(grads: &Grads<T>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.iter())
        .map(|x| {
            let x = x.as_f64();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}
