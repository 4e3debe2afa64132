//! Dense f32 tensors with a reverse-mode differentiation graph.
//!
//! A [`Tensor`] is an immutable, reference-counted node. Operations whose
//! inputs require gradients record a backward rule and their inputs; the graph
//! is implicit in those references and is linearized into a [`Graph`] when
//! [`backward`] runs. Gradients accumulate on every tensor that requires them
//! until [`Tensor::zero_grad`] is called.
//!
//! Reductions (dot products, norms, variances, softmax denominators) accumulate
//! in f64 and round once on output.

mod gemm;
mod gradcheck;
pub mod memory;
mod ops;

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

pub use gradcheck::{grad_check, GradCheckReport};
pub use ops::*;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

/// Backward rule: given the output gradient, the output values and the input
/// tensors, return one optional gradient per input (None when that input does
/// not require a gradient).
pub(crate) type BackwardFn = Box<dyn Fn(&[f32], &[f32], &[Tensor]) -> Vec<Option<Vec<f32>>>>;

pub(crate) struct OpRecord {
    name: &'static str,
    inputs: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f32>>>,
    op: Option<OpRecord>,
}

impl Drop for Node {
    fn drop(&mut self) {
        memory::release(self.data.len());
    }
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("op", &self.0.op.as_ref().map(|o| o.name))
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn build(data: Vec<f32>, shape: Vec<usize>, requires_grad: bool, op: Option<OpRecord>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        memory::acquire(data.len());
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            grad: RefCell::new(None),
            op,
        }))
    }

    /// Constant (non-differentiable) tensor.
    pub fn new(data: Vec<f32>, shape: &[usize]) -> Result<Self> {
        Self::check_shape(&data, shape)?;
        Ok(Self::build(data, shape.to_vec(), false, None))
    }

    /// Leaf tensor that accumulates gradients.
    pub fn param(data: Vec<f32>, shape: &[usize]) -> Result<Self> {
        Self::check_shape(&data, shape)?;
        Ok(Self::build(data, shape.to_vec(), true, None))
    }

    pub fn scalar(value: f32) -> Self {
        Self::build(vec![value], vec![1], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::build(vec![0.0; numel(shape)], shape.to_vec(), false, None)
    }

    fn check_shape(data: &[f32], shape: &[usize]) -> Result<()> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::contract(
                "tensor",
                format!("shape {shape:?} must have positive extents"),
            ));
        }
        if numel(shape) != data.len() {
            return Err(Error::dim("tensor", shape, &[data.len()]));
        }
        Ok(())
    }

    /// Result of an operation. Records the backward rule only when some input
    /// requires a gradient.
    pub(crate) fn from_op(
        data: Vec<f32>,
        shape: Vec<usize>,
        name: &'static str,
        inputs: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        let requires_grad = inputs.iter().any(Tensor::requires_grad);
        let op = requires_grad.then(|| OpRecord {
            name,
            inputs,
            backward,
        });
        Self::build(data, shape, requires_grad, op)
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.0.data
    }

    pub fn len(&self) -> usize {
        self.0.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.data.is_empty()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.op.is_none()
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.0.op.as_ref().map(|o| o.name)
    }

    pub fn item(&self) -> Result<f32> {
        if self.len() != 1 {
            return Err(Error::contract(
                "item",
                format!("tensor of shape {:?} is not a scalar", self.shape()),
            ));
        }
        Ok(self.0.data[0])
    }

    pub fn grad(&self) -> Option<Ref<'_, Vec<f32>>> {
        let g = self.0.grad.borrow();
        if g.is_some() {
            Some(Ref::map(g, |g| g.as_ref().unwrap()))
        } else {
            None
        }
    }

    pub fn take_grad(&self) -> Option<Vec<f32>> {
        self.0.grad.borrow_mut().take()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Same values, detached from the graph.
    pub fn detach(&self) -> Tensor {
        Self::build(self.0.data.clone(), self.0.shape.clone(), false, None)
    }

    fn accumulate(&self, g: Vec<f32>) {
        if !self.0.requires_grad {
            return;
        }
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            None => *slot = Some(g),
        }
    }

    pub(crate) fn id(&self) -> u64 {
        self.0.id
    }
}

/// Operation records reachable from a root, in topological order (inputs
/// before the records that consume them).
pub struct Graph {
    records: Vec<Tensor>,
}

impl Graph {
    pub fn from_root(root: &Tensor) -> Self {
        let mut records = Vec::new();
        let mut visited = HashSet::new();
        // iterative post-order DFS; recursion depth would otherwise track graph depth
        let mut stack: Vec<(Tensor, usize)> = vec![(root.clone(), 0)];
        while let Some((node, child)) = stack.pop() {
            if child == 0 && !visited.insert(node.id()) {
                continue;
            }
            let inputs = node.0.op.as_ref().map(|o| &o.inputs);
            match inputs {
                Some(inputs) if child < inputs.len() => {
                    let next = inputs[child].clone();
                    stack.push((node, child + 1));
                    if next.requires_grad() && !visited.contains(&next.id()) {
                        stack.push((next, 0));
                    }
                }
                _ => {
                    if node.0.op.is_some() {
                        records.push(node);
                    }
                }
            }
        }
        Graph { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn op_names(&self) -> Vec<&'static str> {
        self.records.iter().filter_map(Tensor::op_name).collect()
    }
}

/// Backpropagates from a scalar root, seeding d(root)/d(root) = 1.
pub fn backward(root: &Tensor) -> Result<()> {
    backward_scaled(root, 1.0)
}

/// Backpropagates `seed · d(root)/d(·)`; used for loss scaling.
pub fn backward_scaled(root: &Tensor, seed: f32) -> Result<()> {
    if root.len() != 1 {
        return Err(Error::contract(
            "backward",
            format!("root must be scalar, got shape {:?}", root.shape()),
        ));
    }
    if !root.requires_grad() {
        return Err(Error::contract(
            "backward",
            "root is not connected to any tensor that requires a gradient",
        ));
    }
    let graph = Graph::from_root(root);
    root.accumulate(vec![seed]);
    for node in graph.records.iter().rev() {
        let op = node.0.op.as_ref().expect("graph holds op records only");
        // intermediate gradients are consumed here; leaves keep theirs
        let Some(g) = node.0.grad.borrow_mut().take() else {
            continue;
        };
        let grads = (op.backward)(&g, &node.0.data, &op.inputs);
        debug_assert_eq!(grads.len(), op.inputs.len(), "{}", op.name);
        for (input, grad) in op.inputs.iter().zip(grads) {
            if let Some(grad) = grad {
                debug_assert_eq!(grad.len(), input.len(), "{}", op.name);
                input.accumulate(grad);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_gradient() {
        let x = Tensor::param(vec![3.0], &[1]).unwrap();
        let y = sum(&mul(&x, &x).unwrap());
        backward(&y).unwrap();
        assert_eq!(x.grad().unwrap().as_slice(), &[6.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let x = Tensor::param(vec![1.5], &[1]).unwrap();
        let y = add(&x, &x).unwrap();
        backward(&y).unwrap();
        assert_eq!(x.grad().unwrap().as_slice(), &[2.0]);
    }

    #[test]
    fn repeated_backward_accumulates_until_zeroed() {
        let x = Tensor::param(vec![2.0], &[1]).unwrap();
        for _ in 0..2 {
            let y = mul(&x, &x).unwrap();
            backward(&y).unwrap();
        }
        assert_eq!(x.grad().unwrap()[0], 8.0);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn constants_never_accumulate() {
        let c = Tensor::new(vec![1.0, 2.0], &[2]).unwrap();
        let x = Tensor::param(vec![3.0, 4.0], &[2]).unwrap();
        backward(&sum(&mul(&c, &x).unwrap())).unwrap();
        assert!(c.grad().is_none());
        assert_eq!(x.grad().unwrap().as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = scale(&x, 2.0);
        assert!(matches!(backward(&y), Err(Error::Contract { .. })));
    }

    #[test]
    fn graph_is_topological_and_visits_once() {
        let x = Tensor::param(vec![0.5, -1.0], &[2]).unwrap();
        let a = exp(&x);
        let b = mul(&a, &a).unwrap();
        let c = add(&b, &a).unwrap();
        let root = sum(&c);
        let graph = Graph::from_root(&root);
        assert_eq!(graph.op_names(), vec!["exp", "mul", "add", "sum"]);
        let ids: Vec<u64> = graph.records.iter().map(Tensor::id).collect();
        let unique: HashSet<_> = ids.iter().collect();
        assert_eq!(unique.len(), ids.len());
        // every input of a record precedes it or is a leaf
        for (i, rec) in graph.records.iter().enumerate() {
            for input in &rec.0.op.as_ref().unwrap().inputs {
                if !input.is_leaf() {
                    let j = ids.iter().position(|&id| id == input.id()).unwrap();
                    assert!(j < i);
                }
            }
        }
    }

    #[test]
    fn shape_must_match_data() {
        assert!(matches!(
            Tensor::new(vec![1.0; 5], &[2, 3]),
            Err(Error::Dimension { .. })
        ));
        assert!(Tensor::new(vec![], &[0]).is_err());
    }
}
