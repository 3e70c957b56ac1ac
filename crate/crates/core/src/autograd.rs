//! Reverse-mode differentiation over a linear tape.
//!
//! Every differentiable op records one node holding its parents and a
//! backward closure. [`Tape::backward`] walks the nodes in exact reverse
//! order, accumulating parameter gradients into a [`ParamStore`] (`+=`) and
//! returning gradients for any other tracked leaves.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T: Scalar = f32> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Ordered, uniquely named collection of learnable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Scalar = f32> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(
                "param",
                format!("duplicate parameter name `{name}`"),
            ));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        let grad = Tensor::zeros_like(&value);
        self.params.push(Param { name, value, grad });
        Ok(ParamId(id))
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].grad
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar weights.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    /// Same names and values in another element type, with zeroed grads.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: Tensor::zeros(p.value.shape()),
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// A value flowing through the tape. Cheap to clone.
///
/// `id` is `None` for constants and for everything computed while the tape
/// is not recording.
#[derive(Clone, Debug)]
pub struct Var<T: Scalar = f32> {
    id: Option<usize>,
    value: Rc<Tensor<T>>,
}

impl<T: Scalar> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    pub(crate) fn rc(&self) -> Rc<Tensor<T>> {
        Rc::clone(&self.value)
    }
}

/// Backward closure: receives the output gradient and a per-parent mask of
/// which input gradients are needed; returns one optional gradient per parent.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T: Scalar> {
    parents: Vec<Option<usize>>,
    backward: Option<BackwardFn<T>>,
    param: Option<ParamId>,
}

pub struct Tape<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A tape that records nothing: ops only compute values.
    pub fn inference() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        Var {
            id: None,
            value: Rc::new(value),
        }
    }

    /// A tracked leaf whose gradient is returned by [`Tape::backward`].
    pub fn leaf(&self, value: Tensor<T>) -> Var<T> {
        if !self.recording {
            return self.constant(value);
        }
        let id = self.push_node(Node {
            parents: Vec::new(),
            backward: None,
            param: None,
        });
        Var {
            id: Some(id),
            value: Rc::new(value),
        }
    }

    /// Snapshot of a parameter as a tracked leaf; its gradient accumulates
    /// into the store on backward.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var<T> {
        let value = store.value(id).clone();
        if !self.recording {
            return self.constant(value);
        }
        let node = self.push_node(Node {
            parents: Vec::new(),
            backward: None,
            param: Some(id),
        });
        Var {
            id: Some(node),
            value: Rc::new(value),
        }
    }

    fn push_node(&self, node: Node<T>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Records an op result. The closure is dropped unused when nothing
    /// upstream is tracked.
    pub(crate) fn record(
        &self,
        value: Tensor<T>,
        parents: &[&Var<T>],
        backward: impl Fn(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>> + 'static,
    ) -> Var<T> {
        let tracked = self.recording && parents.iter().any(|p| p.id.is_some());
        if !tracked {
            return self.constant(value);
        }
        let id = self.push_node(Node {
            parents: parents.iter().map(|p| p.id).collect(),
            backward: Some(Box::new(backward)),
            param: None,
        });
        Var {
            id: Some(id),
            value: Rc::new(value),
        }
    }

    /// Propagates `d loss / d node` backwards through every recorded op.
    ///
    /// Parameter gradients are added to `store`; gradients of leaves created
    /// with [`Tape::leaf`] are returned.
    pub fn backward(&self, loss: &Var<T>, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        self.backward_into(loss, Some(store))
    }

    /// With `store = None` parameter gradients are dropped.
    fn backward_into(&self, loss: &Var<T>, mut store: Option<&mut ParamStore<T>>) -> Result<Gradients<T>> {
        if loss.value.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be a scalar, got shape {:?}", loss.shape()),
            ));
        }
        let mut leaf_grads = HashMap::new();
        let Some(root) = loss.id else {
            return Ok(Gradients { grads: leaf_grads });
        };
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::full(loss.shape(), T::one()));

        for id in (0..=root).rev() {
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let node = &nodes[id];
            if let Some(pid) = node.param {
                if let Some(store) = store.as_deref_mut() {
                    let p = store.params.get_mut(pid.0).ok_or_else(|| {
                        Error::invalid("backward", format!("parameter {} is not in the store", pid.0))
                    })?;
                    p.grad.add_assign(&grad)?;
                }
                continue;
            }
            let Some(backward) = &node.backward else {
                leaf_grads.insert(id, grad);
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(Option::is_some).collect();
            let parent_grads = backward(&grad, &needs)?;
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, pg) in node.parents.iter().zip(parent_grads) {
                let (Some(p), Some(pg)) = (parent, pg) else {
                    continue;
                };
                match &mut grads[*p] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot => *slot = Some(pg),
                }
            }
        }
        Ok(Gradients { grads: leaf_grads })
    }
}

/// Gradients of non-parameter leaves after a backward pass.
#[derive(Debug, Default)]
pub struct Gradients<T: Scalar = f32> {
    grads: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `var`, or `None` if the loss does not depend on it.
    pub fn get(&self, var: &Var<T>) -> Option<&Tensor<T>> {
        var.id.and_then(|id| self.grads.get(&id))
    }
}

/// Relative error used by the finite-difference checks:
/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central-difference check of the gradient of a scalar function of `x`.
///
/// Returns the largest relative error over all coordinates. Parameters read
/// by `f` are held fixed.
pub fn fd_grad_check<T, F>(f: F, x: &Tensor<T>, h: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&Tape<T>, &Var<T>) -> Result<Var<T>>,
{
    check_step(h)?;
    let tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let loss = f(&tape, &leaf)?;
    let grads = tape.backward_into(&loss, None)?;
    let analytic = grads
        .get(&leaf)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros_like(x));

    let eval = |x: Tensor<T>| -> Result<f64> {
        let tape = Tape::inference();
        let v = tape.constant(x);
        Ok(f(&tape, &v)?.value().item()?.as_f64())
    };

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = T::from_f64(orig.as_f64() + h);
        let plus = eval(probe.clone())?;
        probe.data_mut()[i] = T::from_f64(orig.as_f64() - h);
        let minus = eval(probe.clone())?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max(relative_error(analytic.data()[i].as_f64(), numeric));
    }
    Ok(worst)
}

/// Central-difference check of every parameter coordinate in `store`.
///
/// `f` builds the loss from parameters on the given tape. Returns the worst
/// relative error together with the name of the parameter it occurred in.
pub fn fd_grad_check_params<T, F>(f: F, store: &ParamStore<T>, h: f64) -> Result<(f64, String)>
where
    T: Scalar,
    F: Fn(&Tape<T>, &ParamStore<T>) -> Result<Var<T>>,
{
    check_step(h)?;
    let mut work = store.clone();
    work.zero_grads();
    let tape = Tape::new();
    let loss = f(&tape, &work)?;
    tape.backward(&loss, &mut work)?;
    drop(tape);

    let eval = |s: &ParamStore<T>| -> Result<f64> {
        let tape = Tape::inference();
        Ok(f(&tape, s)?.value().item()?.as_f64())
    };

    let mut worst = (0.0f64, String::new());
    let ids: Vec<ParamId> = work.ids().collect();
    for id in ids {
        for i in 0..work.value(id).numel() {
            let orig = work.value(id).data()[i];
            work.value_mut(id).data_mut()[i] = T::from_f64(orig.as_f64() + h);
            let plus = eval(&work)?;
            work.value_mut(id).data_mut()[i] = T::from_f64(orig.as_f64() - h);
            let minus = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let err = relative_error(work.grad(id).data()[i].as_f64(), numeric);
            if err > worst.0 {
                worst = (err, work.get(id).name.clone());
            }
        }
    }
    Ok(worst)
}

fn check_step(h: f64) -> Result<()> {
    if !(1e-4..=1e-2).contains(&h) {
        return Err(Error::invalid(
            "fd_grad_check",
            format!("step {h} outside [1e-4, 1e-2]"),
        ));
    }
    Ok(())
}
