use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::Arc;

use ndarray::{ArrayD, IxDyn};

use crate::Element;

pub(crate) type BackwardFn<T> =
    Box<dyn Fn(&[Var<T>], &Var<T>, &Var<T>, &[bool]) -> Vec<Option<Var<T>>>>;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Whether operations executed on this thread currently record a graph.
pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|c| c.get())
}

struct GradModeGuard(bool);

impl GradModeGuard {
    fn set(enabled: bool) -> Self {
        let prev = GRAD_ENABLED.with(|c| c.replace(enabled));
        GradModeGuard(prev)
    }
}

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|c| c.set(self.0));
    }
}

/// Run `f` without recording any graph; every result is a constant.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let _guard = GradModeGuard::set(false);
    f()
}

struct Node<T: Element> {
    id: u64,
    value: Arc<ArrayD<T>>,
    requires_grad: bool,
    parents: Vec<Var<T>>,
    backward: Option<BackwardFn<T>>,
}

/// A node in the computation graph.
pub struct Var<T: Element>(Rc<Node<T>>);

impl<T: Element> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Element> fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Element> Var<T> {
    fn leaf(value: Arc<ArrayD<T>>, requires_grad: bool) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad,
            parents: Vec::new(),
            backward: None,
        }))
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(value: ArrayD<T>) -> Self {
        Self::leaf(Arc::new(value), false)
    }

    /// Trainable leaf.
    pub fn param(value: ArrayD<T>) -> Self {
        Self::leaf(Arc::new(value), true)
    }

    /// Leaf sharing storage with an existing array.
    pub fn from_arc(value: Arc<ArrayD<T>>, requires_grad: bool) -> Self {
        Self::leaf(value, requires_grad)
    }

    pub fn scalar(x: T) -> Self {
        Self::constant(ArrayD::from_elem(IxDyn(&[]), x))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::constant(ArrayD::zeros(IxDyn(shape)))
    }

    pub(crate) fn from_op<F>(value: ArrayD<T>, parents: Vec<Var<T>>, backward: F) -> Self
    where
        F: Fn(&[Var<T>], &Var<T>, &Var<T>, &[bool]) -> Vec<Option<Var<T>>> + 'static,
    {
        let requires_grad = grad_enabled() && parents.iter().any(Var::requires_grad);
        if requires_grad {
            Var(Rc::new(Node {
                id: next_id(),
                value: Arc::new(value),
                requires_grad,
                parents,
                backward: Some(Box::new(backward)),
            }))
        } else {
            Self::constant(value)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &ArrayD<T> {
        &self.0.value
    }

    pub fn arc(&self) -> Arc<ArrayD<T>> {
        Arc::clone(&self.0.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn ndim(&self) -> usize {
        self.0.value.ndim()
    }

    pub fn len(&self) -> usize {
        self.0.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.value.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::leaf(self.arc(), false)
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.len(), 1, "item() on tensor of shape {:?}", self.shape());
        *self.0.value.iter().next().expect("one element")
    }
}

/// Gradients of `output` (summed over its elements) with respect to `wrt`.
///
/// With `create_graph` the returned gradients are themselves differentiable.
/// Inputs unreachable from `output` get an all-zero constant.
pub fn grad<T: Element>(output: &Var<T>, wrt: &[&Var<T>], create_graph: bool) -> Vec<Var<T>> {
    let zeros = |w: &Var<T>| Var::zeros(w.shape());
    if !output.requires_grad() {
        return wrt.iter().map(|w| zeros(w)).collect();
    }

    // Post-order DFS: every node appears after all of its parents.
    let mut order: Vec<Var<T>> = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Var<T>, usize)> = vec![(output.clone(), 0)];
    visited.insert(output.id());
    while let Some((node, idx)) = stack.pop() {
        if idx < node.0.parents.len() {
            let parent = node.0.parents[idx].clone();
            stack.push((node, idx + 1));
            if parent.requires_grad() && visited.insert(parent.id()) {
                stack.push((parent, 0));
            }
        } else {
            order.push(node);
        }
    }

    let wrt_ids: HashSet<u64> = wrt.iter().map(|w| w.id()).collect();
    let mut leads: HashMap<u64, bool> = HashMap::with_capacity(order.len());
    for node in &order {
        let l = wrt_ids.contains(&node.id())
            || node
                .0
                .parents
                .iter()
                .any(|p| leads.get(&p.id()).copied().unwrap_or(false));
        leads.insert(node.id(), l);
    }

    let _guard = GradModeGuard::set(create_graph);
    let mut grads: HashMap<u64, Var<T>> = HashMap::new();
    grads.insert(
        output.id(),
        Var::constant(ArrayD::from_elem(IxDyn(output.shape()), T::one())),
    );

    for node in order.iter().rev() {
        if !leads[&node.id()] {
            continue;
        }
        let g = if wrt_ids.contains(&node.id()) {
            grads.get(&node.id()).cloned()
        } else {
            grads.remove(&node.id())
        };
        let (Some(g), Some(backward)) = (g, node.0.backward.as_ref()) else {
            continue;
        };
        let need: Vec<bool> = node
            .0
            .parents
            .iter()
            .map(|p| p.requires_grad() && leads.get(&p.id()).copied().unwrap_or(false))
            .collect();
        if !need.iter().any(|&n| n) {
            continue;
        }
        let parent_grads = backward(&node.0.parents, node, &g, &need);
        debug_assert_eq!(parent_grads.len(), node.0.parents.len());
        for ((parent, pg), needed) in node.0.parents.iter().zip(parent_grads).zip(need) {
            let Some(pg) = pg else { continue };
            if !needed {
                continue;
            }
            debug_assert_eq!(pg.shape(), parent.shape(), "gradient shape mismatch");
            match grads.remove(&parent.id()) {
                Some(acc) => {
                    grads.insert(parent.id(), acc.add(&pg));
                }
                None => {
                    grads.insert(parent.id(), pg);
                }
            }
        }
    }

    wrt.iter()
        .map(|w| grads.get(&w.id()).cloned().unwrap_or_else(|| zeros(w)))
        .collect()
}
