//! Dense f32 tensors with reverse-mode differentiation.
//!
//! A [`Tensor`] is an immutable n-dimensional array (row-major) with an
//! optional gradient buffer. Ops record a dynamic tape: each result holds a
//! grad-fn node pointing back at its inputs, and [`Tensor::backward`] walks
//! the graph in reverse topological order, accumulating gradients into every
//! reachable tensor that requires them.
//!
//! Data buffers never change after creation; only grad buffers are mutated
//! (behind a mutex), so sharing tensors across threads is safe and a
//! forward pass never invalidates another.

mod ops;
pub(crate) mod scalar;

pub use ops::{concat_seq, cross_entropy_label_smoothed};

use crate::error::{Error, Result};
use std::cell::Cell;
use std::collections::HashSet;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

thread_local! {
    static NO_GRAD_DEPTH: Cell<u32> = const { Cell::new(0) };
}

/// Runs `f` with tape recording disabled. Ops executed inside produce
/// untracked tensors, which keeps inference passes from retaining
/// activations.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    NO_GRAD_DEPTH.with(|d| d.set(d.get() + 1));
    let out = f();
    NO_GRAD_DEPTH.with(|d| d.set(d.get() - 1));
    out
}

pub(crate) fn grad_enabled() -> bool {
    NO_GRAD_DEPTH.with(|d| d.get()) == 0
}

/// One node of the recorded tape. `backward` receives the gradient of the
/// loss w.r.t. this node's output and accumulates into the parents.
pub(crate) trait GradFn: Send + Sync {
    fn parents(&self) -> Vec<Tensor>;
    fn backward(&self, grad: &[f32]);
}

struct TensorInner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Mutex<Option<Vec<f32>>>,
    grad_fn: Option<Box<dyn GradFn>>,
}

/// Dense f32 array handle. Cloning is cheap (shared buffer).
#[derive(Clone)]
pub struct Tensor {
    inner: Arc<TensorInner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn build(shape: Vec<usize>, data: Vec<f32>, requires_grad: bool, grad_fn: Option<Box<dyn GradFn>>) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Arc::new(TensorInner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data,
                requires_grad,
                grad: Mutex::new(None),
                grad_fn,
            }),
        }
    }

    /// Leaf tensor from raw data. Errors if `data` does not fill `shape`.
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                op: "from_vec",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor::build(shape.to_vec(), data, false, None))
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let numel = shape.iter().product();
        Tensor::build(shape.to_vec(), vec![0.0; numel], false, None)
    }

    pub fn full(shape: &[usize], value: f32) -> Tensor {
        let numel = shape.iter().product();
        Tensor::build(shape.to_vec(), vec![value; numel], false, None)
    }

    pub fn scalar(value: f32) -> Tensor {
        Tensor::build(vec![1], vec![value], false, None)
    }

    /// Marks a leaf as a gradient target. Consumes the handle; if the buffer
    /// is shared the data is copied.
    pub fn tracked(self) -> Tensor {
        match Arc::try_unwrap(self.inner) {
            Ok(inner) => Tensor::build(inner.shape, inner.data, true, None),
            Err(arc) => Tensor::build(arc.shape.clone(), arc.data.clone(), true, None),
        }
    }

    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f32>, grad_fn: Box<dyn GradFn>) -> Tensor {
        Tensor::build(shape, data, true, Some(grad_fn))
    }

    pub(crate) fn untracked(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
        Tensor::build(shape, data, false, None)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.inner.data
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub(crate) fn id(&self) -> u64 {
        self.inner.id
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.numel(), 1);
        self.inner.data[0]
    }

    /// Current gradient, if any backward pass has reached this tensor.
    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.lock().unwrap().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock().unwrap() = None;
    }

    pub(crate) fn accumulate_grad(&self, g: &[f32]) {
        debug_assert_eq!(g.len(), self.numel());
        let mut slot = self.inner.grad.lock().unwrap();
        match slot.as_mut() {
            Some(acc) => {
                for (a, &v) in acc.iter_mut().zip(g) {
                    *a += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    fn take_grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.lock().unwrap().take()
    }

    /// Reverse-mode differentiation from a scalar loss.
    ///
    /// Gradients of leaves (parameters, tracked inputs) accumulate across
    /// calls; intermediate node gradients are consumed and cleared, so a
    /// fresh forward pass always starts clean.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        // Reverse post-order over the parent DAG = consumers before producers.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(f) = &t.inner.grad_fn {
                for p in f.parents() {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push((p, false));
                    }
                }
            }
        }

        *self.inner.grad.lock().unwrap() = Some(vec![1.0]);
        for t in order.iter().rev() {
            if let Some(f) = &t.inner.grad_fn {
                // Present by construction: every non-leaf in the order has had
                // all of its consumers processed first.
                if let Some(g) = t.take_grad() {
                    f.backward(&g);
                }
            }
        }
        Ok(())
    }
}

/// Named, trainable tensor. The handle is shared between the model (which
/// reads the current value each forward pass) and the optimizer (which swaps
/// in updated values).
#[derive(Clone)]
pub struct Parameter {
    inner: Arc<ParamInner>,
}

struct ParamInner {
    name: String,
    value: Mutex<Tensor>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor) -> Parameter {
        Parameter {
            inner: Arc::new(ParamInner {
                name: name.into(),
                value: Mutex::new(value.tracked()),
            }),
        }
    }

    pub fn name(&self) -> &str {
        &self.inner.name
    }

    /// Current value handle; gradients from subsequent backward passes land
    /// on exactly this tensor.
    pub fn value(&self) -> Tensor {
        self.inner.value.lock().unwrap().clone()
    }

    /// Replaces the value (optimizer update). The new tensor starts with a
    /// clean gradient buffer.
    pub fn set_value(&self, t: Tensor) {
        *self.inner.value.lock().unwrap() = t.tracked();
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.value().numel()
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.value().grad()
    }

    pub fn zero_grad(&self) {
        self.value().zero_grad();
    }

    /// In-place scale of the current gradient (global-norm clipping).
    pub fn scale_grad(&self, factor: f32) {
        let v = self.value();
        let mut slot = v.inner.grad.lock().unwrap();
        if let Some(g) = slot.as_mut() {
            for x in g.iter_mut() {
                *x *= factor;
            }
        }
    }
}

impl std::fmt::Debug for Parameter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Parameter")
            .field("name", &self.inner.name)
            .field("shape", &self.shape())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::from_vec(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::from_vec(&[2, 2], vec![1.0; 4]).is_ok());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let p = Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap().tracked();
        let loss = p.sum();
        loss.backward().unwrap();
        assert_eq!(p.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_quadratic() {
        let p = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().tracked();
        let loss = p.mul(&p).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(p.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn repeated_backward_accumulates_on_leaves() {
        let p = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap().tracked();
        let loss = p.sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(p.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let p = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap().tracked();
        let out = p.silu();
        assert!(matches!(out.backward(), Err(Error::Usage(_))));
    }

    #[test]
    fn shared_subexpression_gets_both_contributions() {
        // loss = sum(p + p) => dp = 2
        let p = Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap().tracked();
        let loss = p.add(&p).unwrap().sum();
        loss.backward().unwrap();
        assert_eq!(p.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn no_grad_suppresses_tape() {
        let p = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap().tracked();
        let out = no_grad(|| p.silu());
        assert!(!out.requires_grad());
    }

    #[test]
    fn tensors_and_parameters_cross_threads() {
        fn assert_send_sync<T: Send + Sync>() {}
        assert_send_sync::<Tensor>();
        assert_send_sync::<Parameter>();
    }

    #[test]
    fn parameter_value_swap_keeps_name() {
        let p = Parameter::new("w", Tensor::zeros(&[2]));
        p.set_value(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        assert_eq!(p.name(), "w");
        assert_eq!(p.value().data(), &[1.0, 2.0]);
        assert!(p.value().requires_grad());
    }
}
