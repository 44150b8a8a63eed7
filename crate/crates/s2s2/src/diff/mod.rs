//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! Tensors are immutable after construction and form a define-by-run graph:
//! each op output keeps handles to its parents plus a closure that scatters
//! the output gradient back into them. `backward` on a scalar loss walks the
//! graph in reverse topological order. Analytic gradients are validated
//! against central differences by [`grad_check`], which runs in 64-bit.

mod ops;

pub use ops::{
    add, concat_channels, consistency_loss, conv2d, cosine_distance, maxpool2x, relu, scale,
    soft_dice_loss, softmax_cross_entropy, sum, upsample_nearest2x,
};

use std::cell::{RefCell, RefMut};
use std::collections::HashSet;
use std::fmt::{Debug, Display};
use std::rc::Rc;

use thiserror::Error;

use crate::rng::Rng;

/// Scalar element type; training uses `f32`, verification and gradient
/// checks use `f64`.
pub trait Element:
    num_traits::Float + Debug + Display + std::iter::Sum + 'static
{
    fn from_f64(x: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Element for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Element for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn into_f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite values produced by {0}")]
    NonFinite(&'static str),
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type DiffResult<V> = Result<V, DiffError>;

type BackwardFn<T> = Box<dyn Fn(&[T], &[Tensor<T>])>;

struct Op<T: Element> {
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Inner<T: Element> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<T>>>,
    op: Option<Op<T>>,
}

/// Dense n-dimensional tensor; cheap to clone (shared storage).
pub struct Tensor<T: Element = f32>(Rc<Inner<T>>);

impl<T: Element> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Element> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> DiffResult<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(DiffError::ShapeMismatch(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        check_finite("from_vec", &data)?;
        Ok(Tensor(Rc::new(Inner {
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            op: None,
        })))
    }

    pub fn scalar(value: T) -> Self {
        Tensor(Rc::new(Inner {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: RefCell::new(None),
            op: None,
        }))
    }

    pub fn zeros(shape: Vec<usize>, requires_grad: bool) -> Self {
        let numel: usize = shape.iter().product();
        Tensor(Rc::new(Inner {
            shape,
            data: vec![T::zero(); numel],
            requires_grad,
            grad: RefCell::new(None),
            op: None,
        }))
    }

    /// Uniform in [lo, hi). Values are drawn in f64 and narrowed, so the
    /// bit pattern for a given seed is identical in both precisions.
    pub fn rand_uniform(
        shape: Vec<usize>,
        lo: f64,
        hi: f64,
        rng: &mut Rng,
        requires_grad: bool,
    ) -> Self {
        let numel: usize = shape.iter().product();
        let data: Vec<T> = (0..numel)
            .map(|_| T::from_f64(rng.uniform(lo, hi)))
            .collect();
        Tensor(Rc::new(Inner {
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            op: None,
        }))
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        let requires_grad = parents.iter().any(|p| p.0.requires_grad);
        let op = if requires_grad {
            Some(Op { parents, backward })
        } else {
            None
        };
        Tensor(Rc::new(Inner {
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            op,
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[T] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.0.data.len() == 1
    }

    pub fn item(&self) -> T {
        debug_assert!(self.is_scalar());
        self.0.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn clear_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Gradient buffer, allocated as zeros on first use.
    pub(crate) fn grad_mut(&self) -> RefMut<'_, Vec<T>> {
        let mut g = self.0.grad.borrow_mut();
        if g.is_none() {
            *g = Some(vec![T::zero(); self.0.data.len()]);
        }
        RefMut::map(g, |o| o.as_mut().expect("just filled"))
    }

    /// Elementwise sum; shapes must match.
    pub fn add(&self, other: &Tensor<T>) -> DiffResult<Tensor<T>> {
        ops::add(self, other)
    }

    /// Multiply every element by a constant.
    pub fn scale(&self, factor: f64) -> DiffResult<Tensor<T>> {
        ops::scale(self, factor)
    }

    /// Populate gradients of every tensor on a grad path from this scalar.
    pub fn backward(&self) -> DiffResult<()> {
        if !self.is_scalar() {
            return Err(DiffError::NonScalarLoss(self.0.shape.clone()));
        }
        if !self.0.requires_grad {
            return Ok(());
        }
        let order = topo_order(self);
        self.grad_mut()[0] = T::one();
        for node in order.iter().rev() {
            if let Some(op) = &node.0.op {
                let g = node
                    .0
                    .grad
                    .borrow()
                    .clone()
                    .unwrap_or_else(|| vec![T::zero(); node.0.data.len()]);
                (op.backward)(&g, &op.parents);
            }
        }
        Ok(())
    }
}

/// Post-order over the grad-carrying subgraph, parents before children.
fn topo_order<T: Element>(root: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut order = Vec::new();
    let mut visited: HashSet<*const Inner<T>> = HashSet::new();
    // (node, expanded)
    let mut stack: Vec<(Tensor<T>, bool)> = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        let key = Rc::as_ptr(&node.0);
        if expanded {
            order.push(node);
            continue;
        }
        if visited.contains(&key) || !node.0.requires_grad {
            continue;
        }
        visited.insert(key);
        stack.push((node.clone(), true));
        if let Some(op) = &node.0.op {
            for p in &op.parents {
                stack.push((p.clone(), false));
            }
        }
    }
    order
}

pub(crate) fn check_finite<T: Element>(op: &'static str, data: &[T]) -> DiffResult<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(DiffError::NonFinite(op))
    }
}

/// Max relative error between analytic and central-difference gradients,
/// over every element of every parameter. 64-bit only.
pub fn grad_check<F>(f: F, params: &[Tensor<f64>], h: f64) -> DiffResult<f64>
where
    F: Fn(&[Tensor<f64>]) -> DiffResult<Tensor<f64>>,
{
    for p in params {
        p.clear_grad();
    }
    let loss = f(params)?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let eval = |ps: &[Tensor<f64>]| -> DiffResult<f64> { Ok(f(ps)?.item()) };
    let mut max_rel = 0.0f64;
    for (i, p) in params.iter().enumerate() {
        for j in 0..p.numel() {
            let perturbed = |delta: f64| -> DiffResult<f64> {
                let mut data = p.data().to_vec();
                data[j] += delta;
                let mut ps: Vec<Tensor<f64>> = params.to_vec();
                ps[i] = Tensor::from_vec(p.shape().to_vec(), data, true)?;
                eval(&ps)
            };
            let numeric = (perturbed(h)? - perturbed(-h)?) / (2.0 * h);
            let rel = (analytic[i][j] - numeric).abs() / numeric.abs().max(1.0);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
