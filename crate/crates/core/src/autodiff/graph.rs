//! Dynamically built reverse-mode differentiation graph.
//!
//! Nodes record the op, the inputs that carry gradient flow, and the saved
//! activations listed in the op policy table. Saved buffers are charged to
//! the ledger at creation and released either progressively as backward
//! consumes them or when the node is dropped, whichever comes first. A
//! graph can be differentiated once; afterwards its buffers are gone and a
//! second pass reports that the graph was released.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, Weak};

use super::ledger::Ledger;
use super::ops::{self, Op};
use super::tensor::{Precision, Tensor, TensorInner};
use crate::error::{Error, Result};

static NEXT_NODE_ID: AtomicU64 = AtomicU64::new(1);

struct SavedState {
    bufs: Vec<Vec<f64>>,
    charged: usize,
    spent: bool,
}

pub(crate) struct Node {
    id: u64,
    /// `None` marks a leaf variable.
    op: Option<Op>,
    precision: Precision,
    input_shapes: Vec<Vec<usize>>,
    input_nodes: Vec<Option<Arc<Node>>>,
    saved: Mutex<SavedState>,
    retain: AtomicBool,
    owner: Mutex<Weak<TensorInner>>,
    ledger: Ledger,
    tag: &'static str,
}

impl Node {
    pub(crate) fn leaf(
        precision: Precision,
        shape: Vec<usize>,
        ledger: Ledger,
        tag: &'static str,
    ) -> Arc<Node> {
        Arc::new(Node {
            id: NEXT_NODE_ID.fetch_add(1, Ordering::Relaxed),
            op: None,
            precision,
            input_shapes: vec![shape],
            input_nodes: vec![],
            saved: Mutex::new(SavedState {
                bufs: vec![],
                charged: 0,
                spent: false,
            }),
            retain: AtomicBool::new(false),
            owner: Mutex::new(Weak::new()),
            ledger,
            tag,
        })
    }

    pub(crate) fn is_leaf(&self) -> bool {
        self.op.is_none()
    }

    pub(crate) fn set_retain(&self) {
        self.retain.store(true, Ordering::Relaxed);
    }

    fn retained(&self) -> bool {
        self.retain.load(Ordering::Relaxed)
    }

    pub(crate) fn set_owner(&self, owner: Weak<TensorInner>) {
        *self.owner.lock().unwrap() = owner;
    }

    fn owner_tensor(&self) -> Option<Tensor> {
        self.owner
            .lock()
            .unwrap()
            .upgrade()
            .map(|inner| Tensor { inner })
    }
}

impl Drop for Node {
    fn drop(&mut self) {
        let st = self.saved.get_mut().unwrap();
        if st.charged > 0 {
            self.ledger.release(self.tag, st.charged);
            st.charged = 0;
        }
    }
}

/// Evaluate `op` on `inputs`, recording a graph node when any input
/// carries gradient flow. The ledger is charged for the op's saved
/// activations per the policy table.
pub fn apply(op: Op, inputs: &[&Tensor]) -> Result<Tensor> {
    let precision = inputs
        .first()
        .map(|t| t.precision())
        .ok_or_else(|| Error::Shape {
            op: op.name(),
            message: "no inputs".into(),
        })?;
    if let Some(bad) = inputs.iter().find(|t| t.precision() != precision) {
        return Err(Error::Precision(format!(
            "{}: inputs mix {} and {}",
            op.name(),
            precision,
            bad.precision()
        )));
    }

    let shapes: Vec<&[usize]> = inputs.iter().map(|t| t.shape()).collect();
    let out_shape = ops::output_shape(&op, &shapes)?;

    let guards: Vec<_> = inputs
        .iter()
        .map(|t| t.inner.values.read().unwrap())
        .collect();
    let slices: Vec<&[f64]> = guards.iter().map(|g| g.as_slice()).collect();
    let mut evaluated = ops::forward(&op, &slices, &shapes);
    drop(guards);
    precision.quantize_slice(&mut evaluated.values);

    let out = Tensor::constant(&out_shape, evaluated.values, precision)?;

    let input_nodes: Vec<Option<Arc<Node>>> = inputs.iter().map(|t| t.node()).collect();
    if input_nodes.iter().any(Option::is_some) {
        let ledger = input_nodes
            .iter()
            .flatten()
            .next()
            .map(|n| n.ledger.clone())
            .unwrap();
        for buf in &mut evaluated.saved {
            precision.quantize_slice(buf);
        }
        let charged: usize = evaluated.saved.iter().map(Vec::len).sum();
        let tag = op.name();
        ledger.charge(tag, charged);
        let node = Arc::new(Node {
            id: NEXT_NODE_ID.fetch_add(1, Ordering::Relaxed),
            op: Some(op),
            precision,
            input_shapes: shapes.iter().map(|s| s.to_vec()).collect(),
            input_nodes,
            saved: Mutex::new(SavedState {
                bufs: evaluated.saved,
                charged,
                spent: false,
            }),
            retain: AtomicBool::new(false),
            owner: Mutex::new(Weak::new()),
            ledger,
            tag,
        });
        out.attach_node(node);
    }
    Ok(out)
}

/// Backpropagate from a scalar root, incrementing the gradient buffer of
/// every reachable leaf variable and every retained node's tensor.
/// Releases the graph's saved activations as it goes.
pub fn backward(root: &Tensor) -> Result<()> {
    if !root.is_scalar() {
        return Err(Error::NonScalarRoot {
            shape: root.shape().to_vec(),
        });
    }
    let node = root.node().ok_or(Error::NoNode {
        context: "backward",
    })?;
    run_backward(node, vec![1.0])
}

/// Backpropagate from a non-scalar node with a caller-supplied cotangent:
/// parameter gradients are incremented by `seedᵀ · ∂node/∂param`.
pub fn backward_from(start: &Tensor, seed: &Tensor) -> Result<()> {
    let node = start.node().ok_or(Error::NoNode {
        context: "backward_from",
    })?;
    if seed.shape() != start.shape() {
        return Err(Error::Shape {
            op: "backward_from",
            message: format!(
                "seed shape {:?} does not match node shape {:?}",
                seed.shape(),
                start.shape()
            ),
        });
    }
    run_backward(node, seed.values())
}

fn run_backward(root: Arc<Node>, seed: Vec<f64>) -> Result<()> {
    // Reachable subgraph, keyed by creation id. Ids increase along the
    // dataflow direction, so descending id order is a valid reverse
    // topological order and fixes the accumulation order deterministically.
    let mut nodes: BTreeMap<u64, Arc<Node>> = BTreeMap::new();
    let mut stack = vec![root.clone()];
    while let Some(n) = stack.pop() {
        if nodes.insert(n.id, n.clone()).is_none() {
            for input in n.input_nodes.iter().flatten() {
                stack.push(input.clone());
            }
        }
    }

    let mut adjoints: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    adjoints.insert(root.id, seed);

    while let Some((&id, _)) = adjoints.last_key_value() {
        let out_grad = adjoints.remove(&id).unwrap();
        let node = &nodes[&id];

        if node.is_leaf() || node.retained() {
            if let Some(owner) = node.owner_tensor() {
                owner.accumulate_grad(&out_grad);
            }
        }
        if node.is_leaf() {
            continue;
        }

        let bufs = {
            let mut st = node.saved.lock().unwrap();
            if st.spent {
                return Err(Error::GraphReleased);
            }
            st.spent = true;
            if st.charged > 0 {
                node.ledger.release(node.tag, st.charged);
                st.charged = 0;
            }
            std::mem::take(&mut st.bufs)
        };

        let shapes: Vec<&[usize]> = node.input_shapes.iter().map(|s| s.as_slice()).collect();
        let wants: Vec<bool> = node.input_nodes.iter().map(Option::is_some).collect();
        let op = node.op.as_ref().unwrap();
        let input_grads = ops::vjp(op, &bufs, &shapes, &out_grad, &wants)?;

        for (grad, input) in input_grads.into_iter().zip(&node.input_nodes) {
            let (Some(mut grad), Some(input)) = (grad, input) else {
                continue;
            };
            node.precision.quantize_slice(&mut grad);
            match adjoints.entry(input.id) {
                std::collections::btree_map::Entry::Vacant(e) => {
                    e.insert(grad);
                }
                std::collections::btree_map::Entry::Occupied(mut e) => {
                    let acc = e.get_mut();
                    for (a, g) in acc.iter_mut().zip(&grad) {
                        *a = node.precision.quantize(*a + g);
                    }
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::api::*;

    fn ledger() -> Ledger {
        Ledger::new()
    }

    fn var(shape: &[usize], vals: Vec<f64>, ledger: &Ledger) -> Tensor {
        Tensor::variable(shape, vals, Precision::F64, ledger, "test").unwrap()
    }

    #[test]
    fn linear_form_gradient_is_x() {
        // J = Σᵢ wᵢ xᵢ as [1,n]·[n,1]
        let ledger = ledger();
        let w = var(&[1, 4], vec![0.5, -1.0, 2.0, 3.0], &ledger);
        let x = Tensor::constant(&[4, 1], vec![1.0, 2.0, 3.0, 4.0], Precision::F64).unwrap();
        let j = matmul(&w, &x).unwrap();
        backward(&j).unwrap();
        assert_eq!(w.grad().unwrap(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn cross_entropy_gradient_identity() {
        // Uniform logits, one-hot target t: grad = [1/V,…] − onehot(t).
        let ledger = ledger();
        let v = 5;
        let logits = var(&[1, v], vec![0.0; v], &ledger);
        let j = cross_entropy(&logits, &[2], usize::MAX).unwrap();
        backward(&j).unwrap();
        let g = logits.grad().unwrap();
        for (i, &gv) in g.iter().enumerate() {
            let expect = 1.0 / v as f64 - if i == 2 { 1.0 } else { 0.0 };
            assert!((gv - expect).abs() < 1e-12, "coord {i}: {gv} vs {expect}");
        }
    }

    #[test]
    fn sever_is_value_preserving_and_blocks_gradient() {
        let ledger = ledger();
        let x = var(&[2, 2], vec![1.0, 2.0, 3.0, 4.0], &ledger);
        let y = scale(&x, 3.0).unwrap();
        let s = y.sever();
        assert_eq!(s.values(), y.values());
        assert!(!s.has_node());

        // f(sever(y)) assigns no gradient to x.
        s.watch(&ledger, "s").unwrap();
        let j = sum_all(&s).unwrap();
        backward(&j).unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0; 4]);
        assert_eq!(s.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn severed_chain_releases_ledger_on_drop() {
        let ledger = ledger();
        let x = var(&[2, 2], vec![1.0; 4], &ledger);
        let base = ledger.live();
        let a = mul(&x, &x).unwrap(); // saves 2 inputs: 8 scalars
        let b = gelu(&a).unwrap(); // saves input: 4 scalars
        let s = b.sever();
        assert_eq!(ledger.live(), base + 12);
        drop(a);
        drop(b);
        assert_eq!(ledger.live(), base);
        assert_eq!(s.values().len(), 4);
    }

    #[test]
    fn mark_retain_populates_intermediate_grad() {
        // J = Σ (H ⊙ A) with constant A → H.grad = A.
        let ledger = ledger();
        let x = var(&[2, 3], vec![1.0, -2.0, 0.5, 3.0, 1.5, -1.0], &ledger);
        let h = gelu(&x).unwrap();
        h.mark_retain().unwrap();
        let a_vals = vec![2.0, 4.0, 8.0, 16.0, 32.0, 64.0];
        let a = Tensor::constant(&[2, 3], a_vals.clone(), Precision::F64).unwrap();
        let j = sum_all(&mul(&h, &a).unwrap()).unwrap();
        backward(&j).unwrap();
        assert_eq!(h.grad().unwrap(), a_vals);
    }

    #[test]
    fn mark_retain_without_node_fails() {
        let t = Tensor::constant(&[2], vec![1.0, 2.0], Precision::F64).unwrap();
        assert!(matches!(t.mark_retain(), Err(Error::NoNode { .. })));
    }

    #[test]
    fn backward_from_bilinear_form() {
        // node = W·x, seed s → grad(W) = s·xᵀ
        let ledger = ledger();
        let w = var(&[2, 2], vec![1.0, 2.0, 3.0, 4.0], &ledger);
        let x = Tensor::constant(&[2, 1], vec![5.0, 6.0], Precision::F64).unwrap();
        let y = matmul(&w, &x).unwrap();
        let seed = Tensor::constant(&[2, 1], vec![10.0, 20.0], Precision::F64).unwrap();
        backward_from(&y, &seed).unwrap();
        assert_eq!(w.grad().unwrap(), vec![50.0, 60.0, 100.0, 120.0]);
    }

    #[test]
    fn backward_from_zero_seed_changes_nothing() {
        let ledger = ledger();
        let w = var(&[2, 2], vec![1.0, 2.0, 3.0, 4.0], &ledger);
        let x = Tensor::constant(&[2, 1], vec![5.0, 6.0], Precision::F64).unwrap();
        let y = matmul(&w, &x).unwrap();
        let seed = Tensor::zeros(&[2, 1], Precision::F64).unwrap();
        backward_from(&y, &seed).unwrap();
        assert_eq!(w.grad().unwrap(), vec![0.0; 4]);
    }

    #[test]
    fn backward_from_shape_mismatch_fails() {
        let ledger = ledger();
        let w = var(&[2, 2], vec![1.0; 4], &ledger);
        let x = Tensor::constant(&[2, 1], vec![1.0, 1.0], Precision::F64).unwrap();
        let y = matmul(&w, &x).unwrap();
        let seed = Tensor::zeros(&[3, 1], Precision::F64).unwrap();
        assert!(backward_from(&y, &seed).is_err());
    }

    #[test]
    fn non_scalar_backward_root_fails() {
        let ledger = ledger();
        let x = var(&[2, 2], vec![1.0; 4], &ledger);
        let y = scale(&x, 2.0).unwrap();
        assert!(matches!(
            backward(&y),
            Err(Error::NonScalarRoot { .. })
        ));
    }

    #[test]
    fn second_backward_reports_released_graph() {
        let ledger = ledger();
        let x = var(&[2, 2], vec![1.0, 2.0, 3.0, 4.0], &ledger);
        let j = sum_all(&mul(&x, &x).unwrap()).unwrap();
        backward(&j).unwrap();
        assert!(matches!(backward(&j), Err(Error::GraphReleased)));
    }

    #[test]
    fn backward_releases_saved_buffers_from_ledger() {
        let ledger = ledger();
        let x = var(&[4, 4], vec![0.5; 16], &ledger);
        let base = ledger.live();
        let y = softmax_rows(&gelu(&x).unwrap()).unwrap();
        let j = sum_all(&y).unwrap();
        assert!(ledger.live() > base);
        backward(&j).unwrap();
        assert_eq!(ledger.live(), base);
    }

    #[test]
    fn gradient_accumulates_across_backward_calls() {
        let ledger = ledger();
        let w = var(&[1, 2], vec![1.0, 2.0], &ledger);
        let x = Tensor::constant(&[2, 1], vec![3.0, 4.0], Precision::F64).unwrap();
        backward(&matmul(&w, &x).unwrap()).unwrap();
        backward(&matmul(&w, &x).unwrap()).unwrap();
        assert_eq!(w.grad().unwrap(), vec![6.0, 8.0]);
        w.zero_grad();
        assert_eq!(w.grad().unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn deterministic_bitwise_gradients() {
        let run = || {
            let ledger = Ledger::new();
            let x = var(&[3, 3], (0..9).map(|i| (i as f64).sin()).collect(), &ledger);
            let h = softmax_rows(&matmul(&x, &x).unwrap()).unwrap();
            let j = sum_all(&mul(&h, &h).unwrap()).unwrap();
            backward(&j).unwrap();
            x.grad().unwrap()
        };
        let a = run();
        let b = run();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
    }
}
