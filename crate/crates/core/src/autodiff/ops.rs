//! The closed op catalog: forward kernels, backward rules, and the
//! saved-activation policy the ledger charges.
//!
//! | op             | signature                      | saves for backward      | charge        |
//! |----------------|--------------------------------|-------------------------|---------------|
//! | matmul         | [m,k]·[k,n] → [m,n]            | both inputs             | m·k + k·n     |
//! | add            | [..]+[..] or [r,c]+[c] → [..]  | nothing                 | 0             |
//! | scale          | α·[..] → [..]                  | nothing                 | 0             |
//! | mul            | [..]⊙[..] → [..]               | both inputs             | 2·n           |
//! | softmax_rows   | [r,c] → [r,c]                  | its output              | r·c           |
//! | layer_norm_rows| ([r,c],[c],[c]) → [r,c]        | x̂, inv_std, γ           | r·c + r + c   |
//! | gelu           | [..] → [..]                    | its input               | n             |
//! | embed_rows     | [v,d] → [len,d]                | nothing (ids are attrs) | 0             |
//! | concat_rows    | ([r₁,c],…) → [Σr,c]            | nothing                 | 0             |
//! | slice_rows     | [r,c] → [e−s,c]                | nothing                 | 0             |
//! | transpose      | [r,c] → [c,r]                  | nothing                 | 0             |
//! | sum_all        | [..] → [1]                     | nothing                 | 0             |
//! | cross_entropy  | [m,v] → [1]                    | softmax probabilities   | m·v           |
//!
//! Integer attributes (embedding ids, loss targets, slice bounds) are part
//! of the op definition, not activations, and are never charged.

use crate::error::{Error, Result};

/// Operation tag plus its attributes.
#[derive(Debug, Clone)]
pub enum Op {
    MatMul,
    Add,
    Scale { factor: f64 },
    Mul,
    SoftmaxRows,
    LayerNormRows { eps: f64 },
    Gelu,
    EmbedRows { ids: Vec<usize> },
    ConcatRows,
    SliceRows { start: usize, end: usize },
    Transpose,
    SumAll,
    CrossEntropy { targets: Vec<usize>, pad_id: usize },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Scale { .. } => "scale",
            Op::Mul => "mul",
            Op::SoftmaxRows => "softmax_rows",
            Op::LayerNormRows { .. } => "layer_norm_rows",
            Op::Gelu => "gelu",
            Op::EmbedRows { .. } => "embed_rows",
            Op::ConcatRows => "concat_rows",
            Op::SliceRows { .. } => "slice_rows",
            Op::Transpose => "transpose",
            Op::SumAll => "sum_all",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

fn shape_err(op: &Op, message: String) -> Error {
    Error::Shape {
        op: op.name(),
        message,
    }
}

fn want_2d<'s>(op: &Op, shape: &'s [usize], which: &str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        other => Err(shape_err(
            op,
            format!("{which} must be 2-D, got shape {other:?}"),
        )),
    }
}

/// Validate input shapes for `op` and return the output shape.
pub fn output_shape(op: &Op, shapes: &[&[usize]]) -> Result<Vec<usize>> {
    let arity_err = |n: usize| {
        shape_err(
            op,
            format!("expected {n} input(s), got {}", shapes.len()),
        )
    };
    match op {
        Op::MatMul => {
            if shapes.len() != 2 {
                return Err(arity_err(2));
            }
            let (m, k) = want_2d(op, shapes[0], "lhs")?;
            let (k2, n) = want_2d(op, shapes[1], "rhs")?;
            if k != k2 {
                return Err(shape_err(
                    op,
                    format!("inner dimensions disagree: [{m},{k}] vs [{k2},{n}]"),
                ));
            }
            Ok(vec![m, n])
        }
        Op::Add => {
            if shapes.len() != 2 {
                return Err(arity_err(2));
            }
            if shapes[0] == shapes[1] {
                return Ok(shapes[0].to_vec());
            }
            // Row broadcast: [r,c] + [c].
            if let ([r, c], [c2]) = (shapes[0], shapes[1]) {
                if c == c2 {
                    return Ok(vec![*r, *c]);
                }
            }
            Err(shape_err(
                op,
                format!("incompatible shapes {:?} and {:?}", shapes[0], shapes[1]),
            ))
        }
        Op::Scale { .. } | Op::Gelu => {
            if shapes.len() != 1 {
                return Err(arity_err(1));
            }
            Ok(shapes[0].to_vec())
        }
        Op::Mul => {
            if shapes.len() != 2 {
                return Err(arity_err(2));
            }
            if shapes[0] != shapes[1] {
                return Err(shape_err(
                    op,
                    format!("shapes must match: {:?} vs {:?}", shapes[0], shapes[1]),
                ));
            }
            Ok(shapes[0].to_vec())
        }
        Op::SoftmaxRows => {
            if shapes.len() != 1 {
                return Err(arity_err(1));
            }
            let (r, c) = want_2d(op, shapes[0], "input")?;
            Ok(vec![r, c])
        }
        Op::LayerNormRows { .. } => {
            if shapes.len() != 3 {
                return Err(arity_err(3));
            }
            let (r, c) = want_2d(op, shapes[0], "input")?;
            if shapes[1] != [c] || shapes[2] != [c] {
                return Err(shape_err(
                    op,
                    format!(
                        "gamma/beta must both be [{c}], got {:?} and {:?}",
                        shapes[1], shapes[2]
                    ),
                ));
            }
            Ok(vec![r, c])
        }
        Op::EmbedRows { ids } => {
            if shapes.len() != 1 {
                return Err(arity_err(1));
            }
            let (v, d) = want_2d(op, shapes[0], "table")?;
            if ids.is_empty() {
                return Err(shape_err(op, "id list is empty".into()));
            }
            if let Some(bad) = ids.iter().find(|&&id| id >= v) {
                return Err(shape_err(
                    op,
                    format!("id {bad} out of range for table with {v} rows"),
                ));
            }
            Ok(vec![ids.len(), d])
        }
        Op::ConcatRows => {
            if shapes.is_empty() {
                return Err(shape_err(op, "needs at least one input".into()));
            }
            let (mut rows, c) = want_2d(op, shapes[0], "input 0")?;
            for (i, s) in shapes.iter().enumerate().skip(1) {
                let (r, c2) = want_2d(op, s, "input")?;
                if c2 != c {
                    return Err(shape_err(
                        op,
                        format!("input {i} has {c2} columns, expected {c}"),
                    ));
                }
                rows += r;
            }
            Ok(vec![rows, c])
        }
        Op::SliceRows { start, end } => {
            if shapes.len() != 1 {
                return Err(arity_err(1));
            }
            let (r, c) = want_2d(op, shapes[0], "input")?;
            if start >= end || *end > r {
                return Err(shape_err(
                    op,
                    format!("invalid row range [{start},{end}) for {r} rows"),
                ));
            }
            Ok(vec![end - start, c])
        }
        Op::Transpose => {
            if shapes.len() != 1 {
                return Err(arity_err(1));
            }
            let (r, c) = want_2d(op, shapes[0], "input")?;
            Ok(vec![c, r])
        }
        Op::SumAll => {
            if shapes.len() != 1 {
                return Err(arity_err(1));
            }
            Ok(vec![1])
        }
        Op::CrossEntropy { targets, pad_id } => {
            if shapes.len() != 1 {
                return Err(arity_err(1));
            }
            let (m, v) = want_2d(op, shapes[0], "logits")?;
            if targets.len() != m {
                return Err(shape_err(
                    op,
                    format!("{} targets for {m} logit rows", targets.len()),
                ));
            }
            let mut live = 0usize;
            for &t in targets {
                if t == *pad_id {
                    continue;
                }
                if t >= v {
                    return Err(shape_err(
                        op,
                        format!("target id {t} out of range for {v} classes"),
                    ));
                }
                live += 1;
            }
            if live == 0 {
                return Err(shape_err(op, "all target positions are padding".into()));
            }
            Ok(vec![1])
        }
    }
}

/// `c += a · b` for row-major [m,k]·[k,n].
pub fn matmul_accum(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn transpose_into(x: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Output of a forward evaluation: values plus whatever the backward rule
/// needs, in the order documented in the policy table.
pub struct Evaluated {
    pub values: Vec<f64>,
    pub saved: Vec<Vec<f64>>,
}

/// Evaluate `op` on raw value slices. Shapes must already be validated via
/// [`output_shape`].
pub fn forward(op: &Op, inputs: &[&[f64]], shapes: &[&[usize]]) -> Evaluated {
    match op {
        Op::MatMul => {
            let (m, k) = (shapes[0][0], shapes[0][1]);
            let n = shapes[1][1];
            let mut out = vec![0.0; m * n];
            matmul_accum(inputs[0], inputs[1], &mut out, m, k, n);
            Evaluated {
                values: out,
                saved: vec![inputs[0].to_vec(), inputs[1].to_vec()],
            }
        }
        Op::Add => {
            let mut out = inputs[0].to_vec();
            if shapes[0] == shapes[1] {
                for (o, &b) in out.iter_mut().zip(inputs[1]) {
                    *o += b;
                }
            } else {
                let c = shapes[1][0];
                for (chunk, _) in out.chunks_mut(c).zip(0..) {
                    for (o, &b) in chunk.iter_mut().zip(inputs[1]) {
                        *o += b;
                    }
                }
            }
            Evaluated {
                values: out,
                saved: vec![],
            }
        }
        Op::Scale { factor } => Evaluated {
            values: inputs[0].iter().map(|&v| v * factor).collect(),
            saved: vec![],
        },
        Op::Mul => Evaluated {
            values: inputs[0]
                .iter()
                .zip(inputs[1])
                .map(|(&a, &b)| a * b)
                .collect(),
            saved: vec![inputs[0].to_vec(), inputs[1].to_vec()],
        },
        Op::SoftmaxRows => {
            let c = shapes[0][1];
            let mut out = inputs[0].to_vec();
            for row in out.chunks_mut(c) {
                softmax_row(row);
            }
            Evaluated {
                saved: vec![out.clone()],
                values: out,
            }
        }
        Op::LayerNormRows { eps } => {
            let (r, c) = (shapes[0][0], shapes[0][1]);
            let x = inputs[0];
            let gamma = inputs[1];
            let beta = inputs[2];
            let mut out = vec![0.0; r * c];
            let mut xhat = vec![0.0; r * c];
            let mut inv_std = vec![0.0; r];
            for i in 0..r {
                let row = &x[i * c..(i + 1) * c];
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std[i] = inv;
                for j in 0..c {
                    let xh = (row[j] - mean) * inv;
                    xhat[i * c + j] = xh;
                    out[i * c + j] = gamma[j] * xh + beta[j];
                }
            }
            Evaluated {
                values: out,
                saved: vec![xhat, inv_std, gamma.to_vec()],
            }
        }
        Op::Gelu => Evaluated {
            values: inputs[0].iter().map(|&v| gelu(v)).collect(),
            saved: vec![inputs[0].to_vec()],
        },
        Op::EmbedRows { ids } => {
            let d = shapes[0][1];
            let table = inputs[0];
            let mut out = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                out.extend_from_slice(&table[id * d..(id + 1) * d]);
            }
            Evaluated {
                values: out,
                saved: vec![],
            }
        }
        Op::ConcatRows => {
            let mut out = Vec::new();
            for input in inputs {
                out.extend_from_slice(input);
            }
            Evaluated {
                values: out,
                saved: vec![],
            }
        }
        Op::SliceRows { start, end } => {
            let c = shapes[0][1];
            Evaluated {
                values: inputs[0][start * c..end * c].to_vec(),
                saved: vec![],
            }
        }
        Op::Transpose => {
            let (r, c) = (shapes[0][0], shapes[0][1]);
            Evaluated {
                values: transpose_into(inputs[0], r, c),
                saved: vec![],
            }
        }
        Op::SumAll => Evaluated {
            values: vec![inputs[0].iter().sum()],
            saved: vec![],
        },
        Op::CrossEntropy { targets, pad_id } => {
            let (m, v) = (shapes[0][0], shapes[0][1]);
            let logits = inputs[0];
            let mut probs = logits.to_vec();
            for row in probs.chunks_mut(v) {
                softmax_row(row);
            }
            let mut total = 0.0;
            let mut live = 0usize;
            for (i, &t) in targets.iter().enumerate() {
                if t == *pad_id {
                    continue;
                }
                let row = &logits[i * v..(i + 1) * v];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
                total += lse - row[t];
                live += 1;
            }
            debug_assert!(live > 0);
            debug_assert_eq!(m, targets.len());
            Evaluated {
                values: vec![total / live as f64],
                saved: vec![probs],
            }
        }
    }
}

/// Vector-Jacobian products: gradient of each input given the output
/// cotangent. Entries are computed only where `wants` is true.
pub fn vjp(
    op: &Op,
    saved: &[Vec<f64>],
    shapes: &[&[usize]],
    out_grad: &[f64],
    wants: &[bool],
) -> Result<Vec<Option<Vec<f64>>>> {
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; shapes.len()];
    match op {
        Op::MatMul => {
            let (m, k) = (shapes[0][0], shapes[0][1]);
            let n = shapes[1][1];
            let (a, b) = (&saved[0], &saved[1]);
            if wants[0] {
                // dA[i,kk] = Σ_j dC[i,j] · B[kk,j]
                let mut da = vec![0.0; m * k];
                for i in 0..m {
                    let gr = &out_grad[i * n..(i + 1) * n];
                    for kk in 0..k {
                        let brow = &b[kk * n..(kk + 1) * n];
                        da[i * k + kk] = gr.iter().zip(brow).map(|(&g, &bv)| g * bv).sum();
                    }
                }
                grads[0] = Some(da);
            }
            if wants[1] {
                // dB[kk,j] = Σ_i A[i,kk] · dC[i,j]
                let mut db = vec![0.0; k * n];
                for i in 0..m {
                    let gr = &out_grad[i * n..(i + 1) * n];
                    for kk in 0..k {
                        let av = a[i * k + kk];
                        if av == 0.0 {
                            continue;
                        }
                        let dbrow = &mut db[kk * n..(kk + 1) * n];
                        for (dv, &g) in dbrow.iter_mut().zip(gr) {
                            *dv += av * g;
                        }
                    }
                }
                grads[1] = Some(db);
            }
        }
        Op::Add => {
            if wants[0] {
                grads[0] = Some(out_grad.to_vec());
            }
            if wants[1] {
                if shapes[0] == shapes[1] {
                    grads[1] = Some(out_grad.to_vec());
                } else {
                    let c = shapes[1][0];
                    let mut db = vec![0.0; c];
                    for chunk in out_grad.chunks(c) {
                        for (dv, &g) in db.iter_mut().zip(chunk) {
                            *dv += g;
                        }
                    }
                    grads[1] = Some(db);
                }
            }
        }
        Op::Scale { factor } => {
            if wants[0] {
                grads[0] = Some(out_grad.iter().map(|&g| g * factor).collect());
            }
        }
        Op::Mul => {
            if wants[0] {
                grads[0] = Some(out_grad.iter().zip(&saved[1]).map(|(&g, &b)| g * b).collect());
            }
            if wants[1] {
                grads[1] = Some(out_grad.iter().zip(&saved[0]).map(|(&g, &a)| g * a).collect());
            }
        }
        Op::SoftmaxRows => {
            if wants[0] {
                let c = shapes[0][1];
                let y = &saved[0];
                let mut dx = vec![0.0; y.len()];
                for (i, row) in y.chunks(c).enumerate() {
                    let gr = &out_grad[i * c..(i + 1) * c];
                    let dot: f64 = gr.iter().zip(row).map(|(&g, &yv)| g * yv).sum();
                    for j in 0..c {
                        dx[i * c + j] = row[j] * (gr[j] - dot);
                    }
                }
                grads[0] = Some(dx);
            }
        }
        Op::LayerNormRows { .. } => {
            let (r, c) = (shapes[0][0], shapes[0][1]);
            let (xhat, inv_std, gamma) = (&saved[0], &saved[1], &saved[2]);
            if wants[0] {
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    let gr = &out_grad[i * c..(i + 1) * c];
                    let xh = &xhat[i * c..(i + 1) * c];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..c {
                        let dxh = gr[j] * gamma[j];
                        m1 += dxh;
                        m2 += dxh * xh[j];
                    }
                    m1 /= c as f64;
                    m2 /= c as f64;
                    for j in 0..c {
                        let dxh = gr[j] * gamma[j];
                        dx[i * c + j] = inv_std[i] * (dxh - m1 - xh[j] * m2);
                    }
                }
                grads[0] = Some(dx);
            }
            if wants[1] {
                let mut dg = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        dg[j] += out_grad[i * c + j] * xhat[i * c + j];
                    }
                }
                grads[1] = Some(dg);
            }
            if wants[2] {
                let mut db = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        db[j] += out_grad[i * c + j];
                    }
                }
                grads[2] = Some(db);
            }
        }
        Op::Gelu => {
            if wants[0] {
                grads[0] = Some(
                    out_grad
                        .iter()
                        .zip(&saved[0])
                        .map(|(&g, &x)| g * gelu_grad(x))
                        .collect(),
                );
            }
        }
        Op::EmbedRows { ids } => {
            if wants[0] {
                let (v, d) = (shapes[0][0], shapes[0][1]);
                let mut dt = vec![0.0; v * d];
                for (row, &id) in ids.iter().enumerate() {
                    let gr = &out_grad[row * d..(row + 1) * d];
                    let trow = &mut dt[id * d..(id + 1) * d];
                    for (tv, &g) in trow.iter_mut().zip(gr) {
                        *tv += g;
                    }
                }
                grads[0] = Some(dt);
            }
        }
        Op::ConcatRows => {
            let c = shapes[0][1];
            let mut row_off = 0usize;
            for (i, shape) in shapes.iter().enumerate() {
                let rows = shape[0];
                if wants[i] {
                    grads[i] = Some(out_grad[row_off * c..(row_off + rows) * c].to_vec());
                }
                row_off += rows;
            }
        }
        Op::SliceRows { start, end } => {
            if wants[0] {
                let (r, c) = (shapes[0][0], shapes[0][1]);
                let mut dx = vec![0.0; r * c];
                dx[start * c..end * c].copy_from_slice(out_grad);
                grads[0] = Some(dx);
            }
        }
        Op::Transpose => {
            if wants[0] {
                let (r, c) = (shapes[0][0], shapes[0][1]);
                // out_grad has shape [c, r]; transpose back.
                grads[0] = Some(transpose_into(out_grad, c, r));
            }
        }
        Op::SumAll => {
            if wants[0] {
                let n: usize = shapes[0].iter().product();
                grads[0] = Some(vec![out_grad[0]; n]);
            }
        }
        Op::CrossEntropy { targets, pad_id } => {
            if wants[0] {
                let (m, v) = (shapes[0][0], shapes[0][1]);
                let probs = &saved[0];
                let live = targets.iter().filter(|&&t| t != *pad_id).count();
                let scale = out_grad[0] / live as f64;
                let mut dl = vec![0.0; m * v];
                for (i, &t) in targets.iter().enumerate() {
                    if t == *pad_id {
                        continue;
                    }
                    let prow = &probs[i * v..(i + 1) * v];
                    let drow = &mut dl[i * v..(i + 1) * v];
                    for (dv, &p) in drow.iter_mut().zip(prow) {
                        *dv = p * scale;
                    }
                    drow[t] -= scale;
                }
                grads[0] = Some(dl);
            }
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_passthrough() {
        let op = Op::MatMul;
        let eye = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let a = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let shapes: Vec<&[usize]> = vec![&[3, 3], &[3, 2]];
        let out = forward(&op, &[&eye, &a], &shapes);
        assert_eq!(out.values, a);
    }

    #[test]
    fn softmax_symmetry() {
        let op = Op::SoftmaxRows;
        let shapes: Vec<&[usize]> = vec![&[1, 2]];
        let out = forward(&op, &[&[0.0, 0.0]], &shapes);
        assert_eq!(out.values, vec![0.5, 0.5]);
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let op = Op::LayerNormRows { eps: 1e-5 };
        let x = vec![5.0; 4];
        let gamma = vec![1.0; 4];
        let beta = vec![0.0; 4];
        let shapes: Vec<&[usize]> = vec![&[1, 4], &[4], &[4]];
        let out = forward(&op, &[&x, &gamma, &beta], &shapes);
        for v in out.values {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn shape_errors_name_op_and_dims() {
        let err = output_shape(&Op::MatMul, &[&[2, 3], &[4, 5]]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "{msg}");
        assert!(msg.contains('3') && msg.contains('4'), "{msg}");
    }

    #[test]
    fn cross_entropy_all_pad_rejected() {
        let op = Op::CrossEntropy {
            targets: vec![0, 0],
            pad_id: 0,
        };
        assert!(output_shape(&op, &[&[2, 4]]).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_v() {
        let v = 7usize;
        let op = Op::CrossEntropy {
            targets: vec![3],
            pad_id: 0,
        };
        let logits = vec![0.25; v];
        let shape = [1, v];
        let shapes: Vec<&[usize]> = vec![&shape];
        let out = forward(&op, &[&logits], &shapes);
        assert!((out.values[0] - (v as f64).ln()).abs() < 1e-12);
    }
}
