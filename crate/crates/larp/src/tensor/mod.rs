//! Dense 64-bit tensor engine with taped reverse-mode differentiation.
//!
//! A [`Tape`] records every forward operation as a node; [`Tape::backward`]
//! replays the record in reverse and accumulates gradients into every node
//! that requires them. Repeated backward calls without [`Tape::zero_grad`]
//! accumulate additively; after a reset the first result is reproduced
//! bitwise. Graphs are single-threaded; independent tapes are independent.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use crate::error::{Error, Result};

pub mod gradcheck;
pub mod io;
pub mod ops;

use ops::{Op, OpCtx};

/// Shape plus row-major values, shared cheaply between nodes.
#[derive(Clone, Debug)]
pub struct Buf {
    pub shape: Vec<usize>,
    pub values: Arc<Vec<f64>>,
}

impl Buf {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "shape {:?} does not match {} values",
            shape,
            values.len()
        );
        Buf { shape, values: Arc::new(values) }
    }

    pub fn scalar(v: f64) -> Self {
        Buf::new(vec![1], vec![v])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Rows and columns of a rank-2 buffer.
    pub fn dims2(&self) -> Option<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Some((*r, *c)),
            _ => None,
        }
    }
}

struct Node {
    buf: Buf,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Option<Box<dyn Op>>,
    inputs: Vec<usize>,
    param: Option<usize>,
}

/// Recording tape. Clones share the same node arena.
#[derive(Clone)]
pub struct Tape {
    nodes: Rc<RefCell<Vec<Node>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to one node on a tape.
#[derive(Clone)]
pub struct Tensor {
    tape: Tape,
    pub id: usize,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor").field("id", &self.id).field("shape", &self.shape()).finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Rc::new(RefCell::new(Vec::new())) }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    fn push(&self, node: Node) -> Tensor {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Tensor { tape: self.clone(), id: nodes.len() - 1 }
    }

    /// New leaf from an owned buffer.
    pub fn leaf(&self, buf: Buf, requires_grad: bool) -> Tensor {
        self.push(Node { buf, grad: None, requires_grad, op: None, inputs: Vec::new(), param: None })
    }

    /// Constant leaf (never receives gradient).
    pub fn constant(&self, shape: Vec<usize>, values: Vec<f64>) -> Tensor {
        self.leaf(Buf::new(shape, values), false)
    }

    pub fn constant_buf(&self, buf: Buf) -> Tensor {
        self.leaf(buf, false)
    }

    /// Leaf bound to a parameter-store slot, so its gradient can be collected
    /// by index after backward.
    pub fn param_leaf(&self, buf: Buf, param: usize, requires_grad: bool) -> Tensor {
        self.push(Node { buf, grad: None, requires_grad, op: None, inputs: Vec::new(), param: Some(param) })
    }

    pub(crate) fn push_op(&self, op: Box<dyn Op>, inputs: &[&Tensor], out: Buf) -> Tensor {
        #[cfg(debug_assertions)]
        {
            for (i, v) in out.values.iter().enumerate() {
                debug_assert!(v.is_finite(), "{}: non-finite output at element {}", op.name(), i);
            }
        }
        let requires = inputs.iter().any(|t| t.requires_grad());
        let ids = inputs.iter().map(|t| t.id).collect();
        self.push(Node { buf: out, grad: None, requires_grad: requires, op: Some(op), inputs: ids, param: None })
    }

    /// Reverse pass from a scalar root. Gradients accumulate additively into
    /// every node with `requires_grad`; call [`Tape::zero_grad`] to reset.
    pub fn backward(&self, root: &Tensor) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        let root_id = root.id;
        let root_shape = nodes[root_id].buf.shape.clone();
        if nodes[root_id].buf.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got shape {root_shape:?}"),
            ));
        }
        if !nodes[root_id].requires_grad {
            return Ok(());
        }
        // Pass-local flows; merged into persistent grads at the end so that a
        // second backward adds exactly one more copy of d(root)/d(node).
        let mut flow: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        flow[root_id] = Some(vec![1.0]);
        for i in (0..=root_id).rev() {
            if flow[i].is_none() {
                continue;
            }
            let node = &nodes[i];
            let Some(op) = &node.op else { continue };
            let input_ids = node.inputs.clone();
            let contributions = {
                let out_grad = flow[i].as_deref().unwrap();
                let input_bufs: Vec<&Buf> = input_ids.iter().map(|&j| &nodes[j].buf).collect();
                let needs: Vec<bool> = input_ids.iter().map(|&j| nodes[j].requires_grad).collect();
                let ctx = OpCtx { inputs: &input_bufs, output: &nodes[i].buf, out_grad, needs: &needs };
                op.backward(&ctx)
            };
            debug_assert_eq!(contributions.len(), input_ids.len());
            for (j, contrib) in input_ids.iter().zip(contributions) {
                let Some(c) = contrib else { continue };
                debug_assert_eq!(c.len(), nodes[*j].buf.len(), "grad length for input of {}", {
                    nodes[i].op.as_ref().map(|o| o.name()).unwrap_or("leaf")
                });
                match &mut flow[*j] {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&c) {
                            *a += b;
                        }
                    }
                    slot => *slot = Some(c),
                }
            }
        }
        for (i, f) in flow.into_iter().enumerate() {
            let Some(f) = f else { continue };
            let node = &mut nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &mut node.grad {
                Some(g) => {
                    for (a, b) in g.iter_mut().zip(&f) {
                        *a += b;
                    }
                }
                slot => *slot = Some(f),
            }
        }
        Ok(())
    }

    /// Drop all accumulated gradients.
    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    /// Collected `(param_slot, gradient)` pairs for parameter-bound leaves,
    /// in leaf creation order. Leaves without gradient yield zeros.
    pub fn param_grads(&self) -> Vec<(usize, Vec<f64>)> {
        let nodes = self.nodes.borrow();
        let mut out = Vec::new();
        for node in nodes.iter() {
            if let Some(p) = node.param {
                let g = node.grad.clone().unwrap_or_else(|| vec![0.0; node.buf.len()]);
                out.push((p, g));
            }
        }
        out
    }
}

impl Tensor {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].buf.shape.clone()
    }

    pub fn buf(&self) -> Buf {
        self.tape.nodes.borrow()[self.id].buf.clone()
    }

    /// Shared handle to the values (cheap).
    pub fn values(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.tape.nodes.borrow()[self.id].buf.values)
    }

    pub fn scalar(&self) -> f64 {
        let nodes = self.tape.nodes.borrow();
        debug_assert_eq!(nodes[self.id].buf.len(), 1);
        nodes[self.id].buf.values[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.tape.nodes.borrow()[self.id].grad.clone()
    }

    /// Copy of this tensor's values as a fresh leaf with no history.
    /// Forward value is identical; no gradient flows through.
    pub fn detach(&self) -> Tensor {
        self.tape.constant_buf(self.buf())
    }
}

#[cfg(test)]
mod tests {
    use super::ops;
    use super::*;

    #[test]
    fn backward_rejects_non_scalar_root() {
        let tape = Tape::new();
        let x = tape.leaf(Buf::new(vec![2], vec![1.0, 2.0]), true);
        let err = tape.backward(&x).unwrap_err();
        assert!(err.to_string().contains("[2]"), "{err}");
    }

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Buf::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]), true);
        let s = ops::sum_all(&x).unwrap();
        tape.backward(&s).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn half_norm_sq_gradient_is_x() {
        let tape = Tape::new();
        let vals = vec![1.0, -2.0, 3.0, 0.25];
        let x = tape.leaf(Buf::new(vec![4], vals.clone()), true);
        let sq = ops::mul(&x, &x).unwrap();
        let s = ops::scale(&ops::sum_all(&sq).unwrap(), 0.5).unwrap();
        tape.backward(&s).unwrap();
        assert_eq!(x.grad().unwrap(), vals);
    }

    #[test]
    fn backward_twice_accumulates_then_reset_reproduces() {
        let tape = Tape::new();
        let x = tape.leaf(Buf::new(vec![3], vec![2.0, 4.0, 8.0]), true);
        let s = ops::sum_all(&ops::mul(&x, &x).unwrap()).unwrap();
        tape.backward(&s).unwrap();
        let first = x.grad().unwrap();
        tape.backward(&s).unwrap();
        let doubled = x.grad().unwrap();
        for (a, b) in first.iter().zip(&doubled) {
            assert_eq!(*b, 2.0 * *a);
        }
        tape.zero_grad();
        tape.backward(&s).unwrap();
        assert_eq!(x.grad().unwrap(), first);
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Buf::new(vec![2], vec![3.0, 5.0]), true);
        let d = x.detach();
        assert_eq!(*d.values(), *x.values());
        let s = ops::sum_all(&ops::mul(&d, &d).unwrap()).unwrap();
        tape.backward(&s).unwrap();
        assert!(x.grad().is_none());
    }
}
