//! Chunked training with gradient caching.
//!
//! `cached_step` runs the three-phase procedure: encode every chunk with its
//! graph severed (only the outputs survive), run the decoder forward and
//! backward once with the concatenated hidden matrix watched so ∂J/∂H is
//! cached at the encoder boundary, then re-encode each chunk with its graph
//! retained and push the matching rows of the cached gradient back through
//! it. The parameter gradients equal those of `reference_step`, which keeps
//! every chunk graph alive and differentiates the whole graph at once — the
//! caching trainer trades a second encoder pass for never holding more than
//! one chunk's intermediate activations.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{backward, backward_from, concat_rows, Ledger, Precision, Tensor};
use crate::data::{Example, PAD_ID, RESERVED};
use crate::error::{Error, Result};
use crate::model::{sequence_loss, EncodeMode, EncoderStates, ModelConfig, ModelParams};
use crate::optim::{adamw_step, lr_at, AdamState, TrainConfig};
use crate::rng::substream;

/// Decomposition of an `doc_len`-token document into contiguous,
/// non-overlapping spans of nominal size `chunk_size`; the last span may be
/// short so no token is ever dropped.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkPlan {
    pub doc_len: usize,
    pub chunk_size: usize,
    pub spans: Vec<(usize, usize)>,
}

impl ChunkPlan {
    pub fn chunk_count(&self) -> usize {
        self.spans.len()
    }
}

pub fn make_chunk_plan(doc_len: usize, chunk_size: usize) -> Result<ChunkPlan> {
    if doc_len == 0 || chunk_size == 0 {
        return Err(Error::InvalidArg(format!(
            "chunk plan needs positive doc_len and chunk_size, got {doc_len} and {chunk_size}"
        )));
    }
    let mut spans = Vec::with_capacity(doc_len.div_ceil(chunk_size));
    let mut start = 0;
    while start < doc_len {
        let end = (start + chunk_size).min(doc_len);
        spans.push((start, end));
        start = end;
    }
    Ok(ChunkPlan {
        doc_len,
        chunk_size,
        spans,
    })
}

/// Everything one training step reports: the loss, a snapshot of the
/// per-parameter gradient buffers after the step, forward-invocation
/// counts, and the peak live-activation count inside the step.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub loss: f64,
    pub grads: BTreeMap<String, Vec<f64>>,
    pub encoder_forwards: u64,
    pub decoder_forwards: u64,
    pub ledger_peak: u64,
}

/// Knobs for `cached_step_opts`; the defaults reproduce `cached_step`.
#[derive(Debug, Clone)]
pub struct StepOptions {
    /// Chunk encodes run in waves of this many parallel workers; gradients
    /// are bitwise identical to the serial order because severing and
    /// backward accumulation stay serialized in ascending chunk index.
    pub workers: usize,
    /// Processing order for the recompute phase (testing hook; gradients
    /// must agree with span order up to accumulation noise).
    pub chunk_order: Option<Vec<usize>>,
    /// Corrupt one cached-gradient slice before the recompute phase
    /// (negative-control hook for the gradient checker).
    pub corrupt_cached_slice: bool,
}

impl Default for StepOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            chunk_order: None,
            corrupt_cached_slice: false,
        }
    }
}

fn teacher_forcing(example: &Example) -> Result<(&[usize], &[usize])> {
    if example.target.len() < 2 {
        return Err(Error::InvalidArg(format!(
            "target must have at least 2 tokens (bos + eos), got {}",
            example.target.len()
        )));
    }
    let prefix = &example.target[..example.target.len() - 1];
    let labels = &example.target[1..];
    Ok((prefix, labels))
}

/// Encode all chunks severed, optionally in parallel waves. Within a wave
/// the graphs are built concurrently and then severed serially in span
/// order, so values, gradients, and ledger totals are deterministic.
fn encode_severed(
    params: &ModelParams,
    tokens: &[usize],
    plan: &ChunkPlan,
    workers: usize,
) -> Result<EncoderStates> {
    if workers <= 1 {
        return params.encode_document(tokens, plan, EncodeMode::Severed);
    }
    let mut severed = Vec::with_capacity(plan.chunk_count());
    for wave in plan.spans.chunks(workers) {
        let built: Vec<Result<Tensor>> = wave
            .par_iter()
            .map(|&(start, end)| params.encode_chunk(&tokens[start..end]))
            .collect();
        for h in built {
            let h = h?;
            severed.push(h.sever()); // chunk graph drops here, in span order
        }
    }
    let refs: Vec<&Tensor> = severed.iter().collect();
    let h = concat_rows(&refs)?;
    Ok(EncoderStates {
        h,
        cached_grad: None,
        plan: plan.clone(),
    })
}

/// The gradient-caching training step. See the module docs for the three
/// phases. Gradients accumulate into the parameters' existing buffers;
/// call `zero_grads` first unless accumulation is intended.
pub fn cached_step(params: &ModelParams, example: &Example, chunk_size: usize) -> Result<GradReport> {
    cached_step_opts(params, example, chunk_size, &StepOptions::default())
}

pub fn cached_step_opts(
    params: &ModelParams,
    example: &Example,
    chunk_size: usize,
    opts: &StepOptions,
) -> Result<GradReport> {
    let ledger = params.ledger().clone();
    let enc0 = params.enc_forward_count();
    let dec0 = params.dec_forward_count();
    let scope = ledger.open_scope("cached_step");
    let result = cached_step_inner(params, example, chunk_size, opts);
    let peak = ledger.close_scope(scope)?;
    let loss = result?;
    Ok(GradReport {
        loss,
        grads: params.grads_snapshot(),
        encoder_forwards: params.enc_forward_count() - enc0,
        decoder_forwards: params.dec_forward_count() - dec0,
        ledger_peak: peak,
    })
}

fn cached_step_inner(
    params: &ModelParams,
    example: &Example,
    chunk_size: usize,
    opts: &StepOptions,
) -> Result<f64> {
    let (prefix, labels) = teacher_forcing(example)?;
    let plan = make_chunk_plan(example.source.len(), chunk_size)?;
    let d = params.config().d_model;
    let precision = params.precision();

    // Phase 1: chunk encodes with intermediate graphs discarded.
    let mut states = encode_severed(params, &example.source, &plan, opts.workers)?;

    // Phase 2: decoder forward/backward; the watched hidden matrix caches
    // ∂J/∂H at the encoder boundary.
    states.h.watch(params.ledger(), "H")?;
    states.h.mark_retain()?;
    let logits = params.decode_logits(&states, prefix)?;
    let loss = sequence_loss(&logits, labels, PAD_ID)?;
    backward(&loss)?;
    let mut cached = states.h.grad().expect("watched tensor has grad");
    if opts.corrupt_cached_slice {
        // Negative control: damage the middle chunk's slice.
        let (start, end) = plan.spans[plan.chunk_count() / 2];
        for v in &mut cached[start * d..end * d] {
            *v = *v * 1.5 + 1e-3;
        }
    }
    states.cached_grad = Some(cached);

    // Phase 3: re-encode each chunk and continue the interrupted backward
    // pass from its slice of the cached gradient.
    let order: Vec<usize> = match &opts.chunk_order {
        Some(order) => {
            let mut sorted = order.clone();
            sorted.sort_unstable();
            if sorted != (0..plan.chunk_count()).collect::<Vec<_>>() {
                return Err(Error::InvalidArg(format!(
                    "chunk_order must be a permutation of 0..{}",
                    plan.chunk_count()
                )));
            }
            order.clone()
        }
        None => (0..plan.chunk_count()).collect(),
    };

    let run_chunk_backward = |k: usize, h_k: Tensor| -> Result<()> {
        let (start, end) = plan.spans[k];
        let seed_vals = states.cached_grad_slice(k, d)?.to_vec();
        let seed = Tensor::constant(&[end - start, d], seed_vals, precision)?;
        backward_from(&h_k, &seed)
    };

    if opts.workers <= 1 {
        for &k in &order {
            let (start, end) = plan.spans[k];
            let h_k = params.encode_chunk(&example.source[start..end])?;
            run_chunk_backward(k, h_k)?;
        }
    } else {
        for wave in order.chunks(opts.workers) {
            let built: Vec<(usize, Result<Tensor>)> = wave
                .par_iter()
                .map(|&k| {
                    let (start, end) = plan.spans[k];
                    (k, params.encode_chunk(&example.source[start..end]))
                })
                .collect();
            for (k, h_k) in built {
                run_chunk_backward(k, h_k?)?;
            }
        }
    }
    Ok(loss.item())
}

/// Whole-graph baseline: retained-mode document encode, one backward over
/// everything. Same function as `cached_step` in exact arithmetic.
pub fn reference_step(
    params: &ModelParams,
    example: &Example,
    chunk_size: usize,
) -> Result<GradReport> {
    let ledger = params.ledger().clone();
    let enc0 = params.enc_forward_count();
    let dec0 = params.dec_forward_count();
    let scope = ledger.open_scope("reference_step");
    let result = (|| -> Result<f64> {
        let (prefix, labels) = teacher_forcing(example)?;
        let plan = make_chunk_plan(example.source.len(), chunk_size)?;
        let states = params.encode_document(&example.source, &plan, EncodeMode::Retained)?;
        let logits = params.decode_logits(&states, prefix)?;
        let loss = sequence_loss(&logits, labels, PAD_ID)?;
        backward(&loss)?;
        Ok(loss.item())
    })();
    let peak = ledger.close_scope(scope)?;
    let loss = result?;
    Ok(GradReport {
        loss,
        grads: params.grads_snapshot(),
        encoder_forwards: params.enc_forward_count() - enc0,
        decoder_forwards: params.dec_forward_count() - dec0,
        ledger_peak: peak,
    })
}

/// Loss under the current parameter values, computed on a detached view so
/// no graph is built.
pub fn loss_value(params: &ModelParams, example: &Example, chunk_size: usize) -> Result<f64> {
    let view = params.inference_view();
    let (prefix, labels) = teacher_forcing(example)?;
    let plan = make_chunk_plan(example.source.len(), chunk_size)?;
    let states = view.encode_document(&example.source, &plan, EncodeMode::Severed)?;
    let logits = view.decode_logits(&states, prefix)?;
    Ok(sequence_loss(&logits, labels, PAD_ID)?.item())
}

/// Central finite differences (J(θ+ε) − J(θ−ε)) / 2ε on the named
/// coordinates, re-running the model per probe. Requires 64-bit precision.
pub fn fd_gradient(
    params: &ModelParams,
    example: &Example,
    chunk_size: usize,
    coords: &[(String, usize)],
    eps: f64,
) -> Result<Vec<f64>> {
    if eps <= 0.0 {
        return Err(Error::InvalidArg("fd_gradient needs eps > 0".into()));
    }
    if params.precision() != Precision::F64 {
        return Err(Error::InvalidArg(
            "fd_gradient requires 64-bit precision".into(),
        ));
    }
    let mut out = Vec::with_capacity(coords.len());
    for (name, idx) in coords {
        let t = params
            .get(name)
            .ok_or_else(|| Error::InvalidArg(format!("unknown parameter {name}")))?;
        if *idx >= t.len() {
            return Err(Error::InvalidArg(format!(
                "coordinate {idx} out of bounds for {name} ({} values)",
                t.len()
            )));
        }
        let orig = t.value_at(*idx);
        t.set_value_at(*idx, orig + eps);
        let plus = loss_value(params, example, chunk_size)?;
        t.set_value_at(*idx, orig - eps);
        let minus = loss_value(params, example, chunk_size)?;
        t.set_value_at(*idx, orig);
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

/// Per-step log record; `wall_ms` is the only non-deterministic field.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    pub ledger_peak: u64,
    pub enc_calls: u64,
    pub wall_ms: f64,
}

/// Gradient-accumulating training loop: each optimizer step averages
/// `effective_batch_size` per-example gradients from `cached_step`, then
/// applies one AdamW update. Example order reshuffles per epoch from the
/// "order" sub-stream of the seed. `on_step` sees every step's metrics
/// along with the live parameters and optimizer state (for checkpointing).
pub fn train_loop(
    params: &ModelParams,
    cfg: &TrainConfig,
    dataset: &[Example],
    workers: usize,
    mut on_step: impl FnMut(&StepMetrics, &ModelParams, &AdamState) -> Result<()>,
) -> Result<Vec<StepMetrics>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    let micro_steps = cfg.effective_batch_size;
    let opts = StepOptions {
        workers: workers.max(1),
        ..StepOptions::default()
    };
    let mut order_rng = substream(cfg.seed, "order");
    let mut queue: Vec<usize> = Vec::new();
    let mut state = AdamState::new(params);
    let mut log = Vec::with_capacity(cfg.max_steps as usize);
    params.zero_grads();

    for step in 1..=cfg.max_steps {
        let t0 = Instant::now();
        let enc0 = params.enc_forward_count();
        let ledger = params.ledger().clone();
        let scope = ledger.open_scope("train_step");
        let mut loss_sum = 0.0;
        let body = (|| -> Result<()> {
            for _ in 0..micro_steps {
                if queue.is_empty() {
                    queue = (0..dataset.len()).collect();
                    queue.shuffle(&mut order_rng);
                }
                let idx = queue.pop().unwrap();
                loss_sum +=
                    cached_step_opts(params, &dataset[idx], cfg.chunk_size, &opts)?.loss;
            }
            // Average rather than sum so the learning rate keeps its meaning
            // independent of the accumulation factor.
            params.scale_grads(1.0 / micro_steps as f64);
            adamw_step(params, &mut state, step, cfg)?;
            params.zero_grads();
            Ok(())
        })();
        let peak = ledger.close_scope(scope)?;
        body?;
        let metrics = StepMetrics {
            step,
            loss: loss_sum / micro_steps as f64,
            lr: lr_at(step, cfg),
            ledger_peak: peak,
            enc_calls: params.enc_forward_count() - enc0,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        };
        on_step(&metrics, params, &state)?;
        log.push(metrics);
    }
    Ok(log)
}

/// Configuration for the gradient-equivalence matrix run by `grad-check`
/// and the acceptance suite.
#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    pub d_values: Vec<usize>,
    pub layer_values: Vec<usize>,
    pub k_values: Vec<usize>,
    pub chunk_size: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub target_len: usize,
    pub fd_coords: usize,
    pub fd_eps: f64,
    pub seed: u64,
    pub corrupt_cached_slice: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            d_values: vec![8, 16],
            layer_values: vec![1, 2],
            k_values: vec![1, 2, 3, 5],
            chunk_size: 8,
            heads: 2,
            vocab_size: 23,
            target_len: 8,
            fd_coords: 50,
            fd_eps: 1e-5,
            seed: 17,
            corrupt_cached_slice: false,
        }
    }
}

/// FD acceptance bound: |fd − grad| ≤ FD_ATOL + FD_RTOL·|grad| per sampled
/// coordinate (reported as the ratio of the two sides).
pub const FD_ATOL: f64 = 1e-8;
pub const FD_RTOL: f64 = 1e-5;
/// Gradient-equivalence bound between the caching and whole-graph trainers.
pub const EQUIVALENCE_RTOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct GradCheckRow {
    pub d: usize,
    pub layers: usize,
    pub k: usize,
    pub divisible: bool,
    pub doc_len: usize,
    pub loss_bitwise: bool,
    /// max over parameters of |cached − reference| / max(|cached|, |reference|, 1e-12)
    pub max_rel: f64,
    pub worst_param: String,
    /// Bitwise gradient equality (required when k == 1).
    pub bitwise: bool,
    /// max over sampled coordinates of |fd − grad| / (FD_ATOL + FD_RTOL·|grad|)
    pub fd_max_scaled: f64,
    pub fd_coords: usize,
    pub cached_enc_calls: u64,
    pub reference_enc_calls: u64,
    pub cached_peak: u64,
    pub reference_peak: u64,
    pub pass: bool,
}

impl GradCheckRow {
    pub fn describe(&self) -> String {
        format!(
            "d={} layers={} K={} L={}{}",
            self.d,
            self.layers,
            self.k,
            self.doc_len,
            if self.divisible { "" } else { " (remainder)" }
        )
    }
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

fn compare_grad_maps(
    cached: &BTreeMap<String, Vec<f64>>,
    reference: &BTreeMap<String, Vec<f64>>,
) -> (f64, String, bool) {
    let mut max_rel = 0.0;
    let mut worst = String::new();
    let mut bitwise = true;
    for (name, c) in cached {
        let r = &reference[name];
        for (cv, rv) in c.iter().zip(r) {
            if cv.to_bits() != rv.to_bits() {
                bitwise = false;
            }
            let rel = rel_diff(*cv, *rv);
            if rel > max_rel {
                max_rel = rel;
                worst = name.clone();
            }
        }
    }
    (max_rel, worst, bitwise)
}

/// Run the full gradient-equivalence matrix: for every (d, layers, K,
/// divisible) cell, compare `cached_step` against `reference_step`, check
/// the reference against central finite differences, and record the
/// encoder-invocation counts and ledger peaks.
pub fn grad_check_matrix(cfg: &GradCheckConfig) -> Result<Vec<GradCheckRow>> {
    let mut rows = Vec::new();
    for &d in &cfg.d_values {
        for &layers in &cfg.layer_values {
            for &k in &cfg.k_values {
                for divisible in [true, false] {
                    rows.push(run_grad_check_cell(cfg, d, layers, k, divisible)?);
                }
            }
        }
    }
    Ok(rows)
}

fn run_grad_check_cell(
    cfg: &GradCheckConfig,
    d: usize,
    layers: usize,
    k: usize,
    divisible: bool,
) -> Result<GradCheckRow> {
    let c = cfg.chunk_size;
    let doc_len = if divisible {
        k * c
    } else {
        // Shorten so the last chunk carries a remainder but K is unchanged.
        (k * c).saturating_sub(3).max(1)
    };
    let model_cfg = ModelConfig {
        vocab_size: cfg.vocab_size,
        d_model: d,
        heads: cfg.heads,
        enc_layers: layers,
        dec_layers: layers,
        c_max: c.max(cfg.target_len),
        tie_embeddings: d % 16 == 0,
        seed: cfg.seed ^ (d as u64) << 8 ^ (layers as u64) << 4 ^ (k as u64),
    };
    let ledger = Ledger::new();
    let params = ModelParams::init(&model_cfg, Precision::F64, &ledger)?;

    let label = format!("example-{d}-{layers}-{k}-{divisible}");
    let mut rng = substream(cfg.seed, &label);
    let source: Vec<usize> = (0..doc_len)
        .map(|_| RESERVED + rng.random_range(0..cfg.vocab_size - RESERVED))
        .collect();
    let mut target = vec![crate::data::BOS_ID];
    for _ in 0..cfg.target_len - 2 {
        target.push(RESERVED + rng.random_range(0..cfg.vocab_size - RESERVED));
    }
    target.push(crate::data::EOS_ID);
    let example = Example {
        source,
        target,
        meta: None,
    };

    params.zero_grads();
    let opts = StepOptions {
        corrupt_cached_slice: cfg.corrupt_cached_slice,
        ..StepOptions::default()
    };
    let cached = cached_step_opts(&params, &example, c, &opts)?;
    params.zero_grads();
    let reference = reference_step(&params, &example, c)?;

    let (max_rel, worst_param, bitwise) = compare_grad_maps(&cached.grads, &reference.grads);
    let loss_bitwise = cached.loss.to_bits() == reference.loss.to_bits();

    // Finite differences against the reference gradients.
    let coords = sample_coords(&params, cfg.fd_coords, cfg.seed, &label);
    let fd = fd_gradient(&params, &example, c, &coords, cfg.fd_eps)?;
    let mut fd_max_scaled: f64 = 0.0;
    for ((name, idx), fd_v) in coords.iter().zip(&fd) {
        let g = reference.grads[name][*idx];
        let scaled = (fd_v - g).abs() / (FD_ATOL + FD_RTOL * g.abs());
        fd_max_scaled = fd_max_scaled.max(scaled);
    }

    let counts_ok =
        cached.encoder_forwards == 2 * k as u64 && reference.encoder_forwards == k as u64;
    let pass = max_rel <= EQUIVALENCE_RTOL
        && (k != 1 || bitwise)
        && fd_max_scaled <= 1.0
        && counts_ok
        && loss_bitwise;

    Ok(GradCheckRow {
        d,
        layers,
        k,
        divisible,
        doc_len,
        loss_bitwise,
        max_rel,
        worst_param,
        bitwise,
        fd_max_scaled,
        fd_coords: coords.len(),
        cached_enc_calls: cached.encoder_forwards,
        reference_enc_calls: reference.encoder_forwards,
        cached_peak: cached.ledger_peak,
        reference_peak: reference.ledger_peak,
        pass,
    })
}

fn sample_coords(
    params: &ModelParams,
    n: usize,
    seed: u64,
    label: &str,
) -> Vec<(String, usize)> {
    let sizes: Vec<(String, usize)> = params
        .named()
        .iter()
        .map(|(name, t)| (name.clone(), t.len()))
        .collect();
    let total: usize = sizes.iter().map(|(_, s)| s).sum();
    let mut rng = substream(seed, &format!("fd-coords-{label}"));
    let mut picked = std::collections::BTreeSet::new();
    while picked.len() < n.min(total) {
        picked.insert(rng.random_range(0..total));
    }
    picked
        .into_iter()
        .map(|mut flat| {
            for (name, size) in &sizes {
                if flat < *size {
                    return (name.clone(), flat);
                }
                flat -= size;
            }
            unreachable!("flat index within total")
        })
        .collect()
}
