//! Dense row-major tensors with optional gradient buffers and graph linkage.

use std::sync::{Arc, Mutex, RwLock, Weak};

use serde::{Deserialize, Serialize};

use super::graph::Node;
use super::ledger::Ledger;
use crate::error::{Error, Result};

/// Arithmetic width of a tensor.
///
/// Storage is always `f64`; in `F32` mode every op output, saved activation
/// and gradient contribution is rounded through `f32` after each primitive,
/// so results match single-precision arithmetic deterministically. All
/// correctness tests run in `F64`, where arithmetic is exact double
/// precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    #[inline]
    pub fn quantize(self, v: f64) -> f64 {
        match self {
            Precision::F64 => v,
            Precision::F32 => v as f32 as f64,
        }
    }

    pub fn quantize_slice(self, vs: &mut [f64]) {
        if self == Precision::F32 {
            for v in vs.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }

    /// Bytes per scalar in serialized form.
    pub fn byte_width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Precision::F32 => write!(f, "f32"),
            Precision::F64 => write!(f, "f64"),
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" | "32" => Ok(Precision::F32),
            "f64" | "64" => Ok(Precision::F64),
            other => Err(Error::Config(format!(
                "unknown precision '{other}' (expected f32 or f64)"
            ))),
        }
    }
}

pub(crate) struct TensorInner {
    pub(crate) shape: Vec<usize>,
    pub(crate) precision: Precision,
    pub(crate) values: Arc<RwLock<Vec<f64>>>,
    pub(crate) grad: Mutex<Option<Vec<f64>>>,
    pub(crate) node: Mutex<Option<Arc<Node>>>,
}

/// N-dimensional value container; the unit of all numeric computation.
///
/// Cloning is shallow: clones share values, gradient buffer and node.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) inner: Arc<TensorInner>,
}

fn shape_len(shape: &[usize]) -> Result<usize> {
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::InvalidArg(format!(
            "tensor dimensions must be positive, got {shape:?}"
        )));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    /// A value-only tensor: no node, no gradient flow.
    pub fn constant(shape: &[usize], mut values: Vec<f64>, precision: Precision) -> Result<Self> {
        let n = shape_len(shape)?;
        if values.len() != n {
            return Err(Error::InvalidArg(format!(
                "shape {shape:?} needs {n} values, got {}",
                values.len()
            )));
        }
        precision.quantize_slice(&mut values);
        Ok(Self {
            inner: Arc::new(TensorInner {
                shape: shape.to_vec(),
                precision,
                values: Arc::new(RwLock::new(values)),
                grad: Mutex::new(None),
                node: Mutex::new(None),
            }),
        })
    }

    /// A leaf variable: participates in differentiation and accumulates
    /// gradients into a pre-zeroed buffer.
    pub fn variable(
        shape: &[usize],
        values: Vec<f64>,
        precision: Precision,
        ledger: &Ledger,
        tag: &'static str,
    ) -> Result<Self> {
        let t = Self::constant(shape, values, precision)?;
        let n = t.len();
        *t.inner.grad.lock().unwrap() = Some(vec![0.0; n]);
        let node = Node::leaf(precision, t.shape().to_vec(), ledger.clone(), tag);
        node.set_owner(Arc::downgrade(&t.inner));
        *t.inner.node.lock().unwrap() = Some(node);
        Ok(t)
    }

    pub fn scalar(v: f64, precision: Precision) -> Self {
        Self::constant(&[1], vec![v], precision).unwrap()
    }

    pub fn zeros(shape: &[usize], precision: Precision) -> Result<Self> {
        let n = shape_len(shape)?;
        Self::constant(shape, vec![0.0; n], precision)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        self.len() == 1
    }

    pub fn precision(&self) -> Precision {
        self.inner.precision
    }

    /// Copy of the value buffer.
    pub fn values(&self) -> Vec<f64> {
        self.inner.values.read().unwrap().clone()
    }

    /// Run `f` against the value slice without copying.
    pub fn with_values<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.inner.values.read().unwrap())
    }

    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.inner.values.read().unwrap()[0]
    }

    /// Overwrite values in place (optimizer updates). Length must match.
    pub fn set_values(&self, mut values: Vec<f64>) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::InvalidArg(format!(
                "set_values: expected {} values, got {}",
                self.len(),
                values.len()
            )));
        }
        self.inner.precision.quantize_slice(&mut values);
        *self.inner.values.write().unwrap() = values;
        Ok(())
    }

    /// Add `eps` to one value coordinate (finite-difference probes).
    pub fn nudge(&self, index: usize, eps: f64) -> Result<()> {
        if index >= self.len() {
            return Err(Error::InvalidArg(format!(
                "nudge index {index} out of bounds for {} values",
                self.len()
            )));
        }
        let mut vals = self.inner.values.write().unwrap();
        vals[index] = self.inner.precision.quantize(vals[index] + eps);
        Ok(())
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.lock().unwrap().clone()
    }

    /// Reset the gradient buffer to zeros (allocating it if absent).
    pub fn zero_grad(&self) {
        let n = self.len();
        *self.inner.grad.lock().unwrap() = Some(vec![0.0; n]);
    }

    /// Replace the gradient buffer wholesale.
    pub fn set_grad(&self, mut grad: Vec<f64>) {
        debug_assert_eq!(grad.len(), self.len());
        self.inner.precision.quantize_slice(&mut grad);
        *self.inner.grad.lock().unwrap() = Some(grad);
    }

    pub fn value_at(&self, index: usize) -> f64 {
        self.inner.values.read().unwrap()[index]
    }

    pub fn set_value_at(&self, index: usize, v: f64) {
        self.inner.values.write().unwrap()[index] = self.inner.precision.quantize(v);
    }

    /// In-place `grad += delta`, quantized to the tensor's precision.
    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        let mut guard = self.inner.grad.lock().unwrap();
        let grad = guard.get_or_insert_with(|| vec![0.0; self.len()]);
        debug_assert_eq!(grad.len(), delta.len());
        let p = self.inner.precision;
        for (g, d) in grad.iter_mut().zip(delta) {
            *g = p.quantize(*g + d);
        }
    }

    pub fn has_node(&self) -> bool {
        self.inner.node.lock().unwrap().is_some()
    }

    pub(crate) fn node(&self) -> Option<Arc<Node>> {
        self.inner.node.lock().unwrap().clone()
    }

    /// Value-identical tensor disconnected from the computation graph.
    /// Shares the value buffer; once the original (and anything else
    /// holding its subgraph) is dropped, the subgraph's saved activations
    /// are released from the ledger.
    pub fn sever(&self) -> Tensor {
        Tensor {
            inner: Arc::new(TensorInner {
                shape: self.inner.shape.clone(),
                precision: self.inner.precision,
                values: Arc::clone(&self.inner.values),
                grad: Mutex::new(None),
                node: Mutex::new(None),
            }),
        }
    }

    /// Attach a leaf node to a node-less tensor, making it a gradient root
    /// for subsequent backward passes. No-op if the tensor is already a
    /// leaf variable.
    pub fn watch(&self, ledger: &Ledger, tag: &'static str) -> Result<()> {
        let mut node_guard = self.inner.node.lock().unwrap();
        if let Some(existing) = node_guard.as_ref() {
            if existing.is_leaf() {
                return Ok(());
            }
            return Err(Error::InvalidArg(
                "watch: tensor already has a non-leaf graph node".into(),
            ));
        }
        let n = self.len();
        *self.inner.grad.lock().unwrap() = Some(vec![0.0; n]);
        let node = Node::leaf(
            self.inner.precision,
            self.inner.shape.clone(),
            ledger.clone(),
            tag,
        );
        node.set_owner(Arc::downgrade(&self.inner));
        *node_guard = Some(node);
        Ok(())
    }

    /// Request that backward populate this tensor's gradient even though it
    /// is not a parameter.
    pub fn mark_retain(&self) -> Result<()> {
        let node = self
            .node()
            .ok_or(Error::NoNode {
                context: "mark_retain",
            })?;
        let n = self.len();
        let mut guard = self.inner.grad.lock().unwrap();
        if guard.is_none() {
            *guard = Some(vec![0.0; n]);
        }
        drop(guard);
        node.set_retain();
        Ok(())
    }

    pub(crate) fn attach_node(&self, node: Arc<Node>) {
        node.set_owner(Arc::downgrade(&self.inner));
        *self.inner.node.lock().unwrap() = Some(node);
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("precision", &self.inner.precision)
            .field("has_node", &self.has_node())
            .finish()
    }
}
