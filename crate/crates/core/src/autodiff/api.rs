//! Thin named wrappers over [`apply`](super::graph::apply) for each catalog op.

use super::graph::apply;
use super::ops::Op;
use super::tensor::Tensor;
use crate::error::Result;

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    apply(Op::MatMul, &[a, b])
}

/// Elementwise add; also accepts `[r,c] + [c]` row broadcast for biases.
pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    apply(Op::Add, &[a, b])
}

pub fn scale(a: &Tensor, factor: f64) -> Result<Tensor> {
    apply(Op::Scale { factor }, &[a])
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    apply(Op::Mul, &[a, b])
}

pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
    apply(Op::SoftmaxRows, &[a])
}

pub fn layer_norm_rows(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    apply(Op::LayerNormRows { eps }, &[x, gamma, beta])
}

pub fn gelu(a: &Tensor) -> Result<Tensor> {
    apply(Op::Gelu, &[a])
}

pub fn embed_rows(table: &Tensor, ids: &[usize]) -> Result<Tensor> {
    apply(Op::EmbedRows { ids: ids.to_vec() }, &[table])
}

pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    apply(Op::ConcatRows, parts)
}

pub fn slice_rows(a: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    apply(Op::SliceRows { start, end }, &[a])
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    apply(Op::Transpose, &[a])
}

pub fn sum_all(a: &Tensor) -> Result<Tensor> {
    apply(Op::SumAll, &[a])
}

/// Mean cross-entropy over rows whose target is not `pad_id`.
pub fn cross_entropy(logits: &Tensor, targets: &[usize], pad_id: usize) -> Result<Tensor> {
    apply(
        Op::CrossEntropy {
            targets: targets.to_vec(),
            pad_id,
        },
        &[logits],
    )
}
