//! Miniature transformer encoder-decoder.
//!
//! The encoder contextualizes each chunk independently (self-attention never
//! crosses a chunk boundary, and positions restart at 0 for every chunk);
//! the decoder runs causal self-attention over the target prefix and
//! cross-attention over the full concatenated encoder output, so every
//! decoder position can read every chunk. Cross-attention carries no chunk
//! identity: memory rows are position-agnostic, which makes decoder logits
//! invariant to reordering whole (chunk, span) blocks.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    add, concat_rows, cross_entropy, embed_rows, gelu, layer_norm_rows, matmul, scale,
    slice_rows, softmax_rows, transpose, Ledger, Precision, Tensor,
};
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::trainer::ChunkPlan;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
/// Additive pre-softmax mask value for disallowed attention edges.
const MASK_NEG: f64 = -1e30;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Backbone context capacity: positional rows, max chunk length, and
    /// max decode length.
    pub c_max: usize,
    pub tie_embeddings: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 128,
            d_model: 32,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            c_max: 64,
            tie_embeddings: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("c_max", self.c_max),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads ({}) must divide d_model ({})",
                self.heads, self.d_model
            )));
        }
        Ok(())
    }
}

struct AttnParams {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
}

struct FfnParams {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

struct LnParams {
    gamma: Tensor,
    beta: Tensor,
}

struct EncoderLayer {
    attn: AttnParams,
    ffn: FfnParams,
    ln1: LnParams,
    ln2: LnParams,
}

struct DecoderLayer {
    self_attn: AttnParams,
    cross_attn: AttnParams,
    ffn: FfnParams,
    ln1: LnParams,
    ln2: LnParams,
    ln3: LnParams,
}

/// Concatenated encoder output for one document, plus the gradient cached
/// at the encoder boundary by the decoder's backward pass.
pub struct EncoderStates {
    /// L×d hidden matrix, rows in span order.
    pub h: Tensor,
    /// ∂J/∂H, written once by the caching trainer and read-only afterwards.
    pub cached_grad: Option<Vec<f64>>,
    pub plan: ChunkPlan,
}

impl EncoderStates {
    pub fn seq_len(&self) -> usize {
        self.h.shape()[0]
    }

    /// Rows of the cached gradient matching span `k`.
    pub fn cached_grad_slice(&self, k: usize, d_model: usize) -> Result<&[f64]> {
        let grad = self.cached_grad.as_ref().ok_or(Error::NoNode {
            context: "cached_grad not populated",
        })?;
        let (start, end) = self.plan.spans[k];
        Ok(&grad[start * d_model..end * d_model])
    }
}

/// How `encode_document` treats per-chunk graphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodeMode {
    /// Sever each chunk's output and release its graph before encoding the
    /// next chunk.
    Severed,
    /// Keep all chunk graphs alive (the whole-graph baseline).
    Retained,
}

/// All named parameter tensors, each a leaf variable with a gradient
/// accumulator, plus forward-invocation counters.
pub struct ModelParams {
    config: ModelConfig,
    precision: Precision,
    ledger: Ledger,
    token_embedding: Tensor,
    pos_table: Tensor,
    enc: Vec<EncoderLayer>,
    dec: Vec<DecoderLayer>,
    out_proj: Option<Tensor>,
    named: Vec<(String, Tensor)>,
    enc_calls: AtomicU64,
    dec_calls: AtomicU64,
}

struct ParamBuilder<'a> {
    named: Vec<(String, Tensor)>,
    precision: Precision,
    ledger: &'a Ledger,
    rng: rand_chacha::ChaCha8Rng,
    normal: Normal<f64>,
    d: usize,
    hidden: usize,
}

impl ParamBuilder<'_> {
    fn weight(&mut self, name: String, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let vals: Vec<f64> = (0..n).map(|_| self.rng.sample(self.normal)).collect();
        let t = Tensor::variable(shape, vals, self.precision, self.ledger, "param").unwrap();
        self.named.push((name, t.clone()));
        t
    }

    fn fill(&mut self, name: String, shape: &[usize], value: f64) -> Tensor {
        let n: usize = shape.iter().product();
        let t = Tensor::variable(shape, vec![value; n], self.precision, self.ledger, "param")
            .unwrap();
        self.named.push((name, t.clone()));
        t
    }

    fn attn(&mut self, prefix: &str) -> AttnParams {
        let d = self.d;
        AttnParams {
            wq: self.weight(format!("{prefix}.wq"), &[d, d]),
            wk: self.weight(format!("{prefix}.wk"), &[d, d]),
            wv: self.weight(format!("{prefix}.wv"), &[d, d]),
            wo: self.weight(format!("{prefix}.wo"), &[d, d]),
        }
    }

    fn ffn(&mut self, prefix: &str) -> FfnParams {
        let (d, hidden) = (self.d, self.hidden);
        FfnParams {
            w1: self.weight(format!("{prefix}.w1"), &[d, hidden]),
            b1: self.fill(format!("{prefix}.b1"), &[hidden], 0.0),
            w2: self.weight(format!("{prefix}.w2"), &[hidden, d]),
            b2: self.fill(format!("{prefix}.b2"), &[d], 0.0),
        }
    }

    fn ln(&mut self, prefix: &str) -> LnParams {
        let d = self.d;
        LnParams {
            gamma: self.fill(format!("{prefix}.gamma"), &[d], 1.0),
            beta: self.fill(format!("{prefix}.beta"), &[d], 0.0),
        }
    }
}

impl ModelParams {
    pub fn init(config: &ModelConfig, precision: Precision, ledger: &Ledger) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let v = config.vocab_size;
        let mut b = ParamBuilder {
            named: Vec::new(),
            precision,
            ledger,
            rng: substream(config.seed, "init"),
            normal: Normal::new(0.0, INIT_STD).expect("valid std"),
            d,
            hidden: 4 * d,
        };

        let token_embedding = b.weight("token_embedding".into(), &[v, d]);
        let pos_table = b.weight("pos_table".into(), &[config.c_max, d]);

        let mut enc = Vec::with_capacity(config.enc_layers);
        for i in 0..config.enc_layers {
            let p = format!("enc.{i}");
            enc.push(EncoderLayer {
                attn: b.attn(&format!("{p}.attn")),
                ffn: b.ffn(&format!("{p}.ffn")),
                ln1: b.ln(&format!("{p}.ln1")),
                ln2: b.ln(&format!("{p}.ln2")),
            });
        }

        let mut dec = Vec::with_capacity(config.dec_layers);
        for i in 0..config.dec_layers {
            let p = format!("dec.{i}");
            dec.push(DecoderLayer {
                self_attn: b.attn(&format!("{p}.attn")),
                cross_attn: b.attn(&format!("{p}.cross")),
                ffn: b.ffn(&format!("{p}.ffn")),
                ln1: b.ln(&format!("{p}.ln1")),
                ln2: b.ln(&format!("{p}.ln2")),
                ln3: b.ln(&format!("{p}.ln3")),
            });
        }

        let out_proj = if config.tie_embeddings {
            None
        } else {
            Some(b.weight("out_proj".into(), &[d, v]))
        };

        Ok(Self {
            config: config.clone(),
            precision,
            ledger: ledger.clone(),
            token_embedding,
            pos_table,
            enc,
            dec,
            out_proj,
            named: b.named,
            enc_calls: AtomicU64::new(0),
            dec_calls: AtomicU64::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    /// Parameters in canonical order.
    pub fn named(&self) -> &[(String, Tensor)] {
        &self.named
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.named
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn enc_forward_count(&self) -> u64 {
        self.enc_calls.load(Ordering::Relaxed)
    }

    pub fn dec_forward_count(&self) -> u64 {
        self.dec_calls.load(Ordering::Relaxed)
    }

    /// Reset every gradient buffer to zeros. Never called implicitly:
    /// gradients otherwise accumulate across backward passes.
    pub fn zero_grads(&self) {
        for (_, t) in &self.named {
            t.zero_grad();
        }
    }

    /// Multiply every gradient buffer in place (micro-batch averaging).
    pub fn scale_grads(&self, factor: f64) {
        for (_, t) in &self.named {
            if let Some(mut g) = t.grad() {
                for v in &mut g {
                    *v = self.precision.quantize(*v * factor);
                }
                t.set_grad(g);
            }
        }
    }

    /// Copy of all gradient buffers, keyed by parameter name.
    pub fn grads_snapshot(&self) -> std::collections::BTreeMap<String, Vec<f64>> {
        self.named
            .iter()
            .map(|(n, t)| (n.clone(), t.grad().unwrap_or_default()))
            .collect()
    }

    /// Detached copy for inference: shares parameter values but carries no
    /// graph nodes, so forward passes build no graph and charge no ledger.
    pub fn inference_view(&self) -> ModelParams {
        let detach_attn = |a: &AttnParams| AttnParams {
            wq: a.wq.sever(),
            wk: a.wk.sever(),
            wv: a.wv.sever(),
            wo: a.wo.sever(),
        };
        let detach_ffn = |f: &FfnParams| FfnParams {
            w1: f.w1.sever(),
            b1: f.b1.sever(),
            w2: f.w2.sever(),
            b2: f.b2.sever(),
        };
        let detach_ln = |l: &LnParams| LnParams {
            gamma: l.gamma.sever(),
            beta: l.beta.sever(),
        };
        ModelParams {
            config: self.config.clone(),
            precision: self.precision,
            ledger: self.ledger.clone(),
            token_embedding: self.token_embedding.sever(),
            pos_table: self.pos_table.sever(),
            enc: self
                .enc
                .iter()
                .map(|l| EncoderLayer {
                    attn: detach_attn(&l.attn),
                    ffn: detach_ffn(&l.ffn),
                    ln1: detach_ln(&l.ln1),
                    ln2: detach_ln(&l.ln2),
                })
                .collect(),
            dec: self
                .dec
                .iter()
                .map(|l| DecoderLayer {
                    self_attn: detach_attn(&l.self_attn),
                    cross_attn: detach_attn(&l.cross_attn),
                    ffn: detach_ffn(&l.ffn),
                    ln1: detach_ln(&l.ln1),
                    ln2: detach_ln(&l.ln2),
                    ln3: detach_ln(&l.ln3),
                })
                .collect(),
            out_proj: self.out_proj.as_ref().map(Tensor::sever),
            named: self
                .named
                .iter()
                .map(|(n, t)| (n.clone(), t.sever()))
                .collect(),
            enc_calls: AtomicU64::new(0),
            dec_calls: AtomicU64::new(0),
        }
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::InvalidArg(format!(
                "token id {bad} out of range for vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn layer_norm(&self, x: &Tensor, ln: &LnParams) -> Result<Tensor> {
        layer_norm_rows(x, &ln.gamma, &ln.beta, LN_EPS)
    }

    /// Multi-head scaled dot-product attention. `mask` is added to the
    /// pre-softmax scores of every head.
    fn attention(
        &self,
        q_in: &Tensor,
        kv_in: &Tensor,
        p: &AttnParams,
        mask: Option<&Tensor>,
    ) -> Result<Tensor> {
        let heads = self.config.heads;
        let dh = self.config.d_model / heads;
        let q = matmul(q_in, &p.wq)?;
        let k = matmul(kv_in, &p.wk)?;
        let v = matmul(kv_in, &p.wv)?;
        // Heads are column blocks; carve them out as row blocks of the
        // transposed projections.
        let qt = transpose(&q)?;
        let kt = transpose(&k)?;
        let vt = transpose(&v)?;
        let mut head_ctx_t = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = transpose(&slice_rows(&qt, h * dh, (h + 1) * dh)?)?; // n×dh
            let kh_t = slice_rows(&kt, h * dh, (h + 1) * dh)?; // dh×m
            let vh = transpose(&slice_rows(&vt, h * dh, (h + 1) * dh)?)?; // m×dh
            let mut scores = scale(&matmul(&qh, &kh_t)?, 1.0 / (dh as f64).sqrt())?;
            if let Some(mask) = mask {
                scores = add(&scores, mask)?;
            }
            let probs = softmax_rows(&scores)?;
            head_ctx_t.push(transpose(&matmul(&probs, &vh)?)?); // dh×n
        }
        let refs: Vec<&Tensor> = head_ctx_t.iter().collect();
        let ctx = transpose(&concat_rows(&refs)?)?; // n×d
        matmul(&ctx, &p.wo)
    }

    fn causal_mask(&self, n: usize) -> Tensor {
        let mut vals = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                vals[i * n + j] = MASK_NEG;
            }
        }
        Tensor::constant(&[n, n], vals, self.precision).unwrap()
    }

    fn ffn(&self, x: &Tensor, p: &FfnParams) -> Result<Tensor> {
        let h = gelu(&add(&matmul(x, &p.w1)?, &p.b1)?)?;
        add(&matmul(&h, &p.w2)?, &p.b2)
    }

    fn embed(&self, ids: &[usize]) -> Result<Tensor> {
        let emb = embed_rows(&self.token_embedding, ids)?;
        let pos = slice_rows(&self.pos_table, 0, ids.len())?;
        add(&emb, &pos)
    }

    /// Encode one chunk of at most `c_max` tokens. Self-attention spans only
    /// this chunk; positions are 0..c−1 regardless of where the chunk sits
    /// in the document.
    pub fn encode_chunk(&self, tokens: &[usize]) -> Result<Tensor> {
        if tokens.is_empty() {
            return Err(Error::InvalidArg("encode_chunk: empty chunk".into()));
        }
        if tokens.len() > self.config.c_max {
            return Err(Error::InvalidArg(format!(
                "chunk of {} tokens exceeds backbone capacity c_max={}",
                tokens.len(),
                self.config.c_max
            )));
        }
        self.check_ids(tokens)?;
        self.enc_calls.fetch_add(1, Ordering::Relaxed);

        let mut x = self.embed(tokens)?;
        for layer in &self.enc {
            let normed = self.layer_norm(&x, &layer.ln1)?;
            x = add(&x, &self.attention(&normed, &normed, &layer.attn, None)?)?;
            let normed = self.layer_norm(&x, &layer.ln2)?;
            x = add(&x, &self.ffn(&normed, &layer.ffn)?)?;
        }
        Ok(x)
    }

    /// Encode a whole document chunk by chunk in span order and concatenate
    /// the per-chunk hidden states. In severed mode each chunk's graph is
    /// released before the next chunk runs; in retained mode all graphs stay
    /// live. The returned values are identical either way.
    pub fn encode_document(
        &self,
        tokens: &[usize],
        plan: &ChunkPlan,
        mode: EncodeMode,
    ) -> Result<EncoderStates> {
        if plan.doc_len != tokens.len() {
            return Err(Error::InvalidArg(format!(
                "chunk plan covers {} tokens but document has {}",
                plan.doc_len,
                tokens.len()
            )));
        }
        let mut chunks = Vec::with_capacity(plan.spans.len());
        for &(start, end) in &plan.spans {
            let h = self.encode_chunk(&tokens[start..end])?;
            chunks.push(match mode {
                EncodeMode::Severed => h.sever(), // drops the chunk graph here
                EncodeMode::Retained => h,
            });
        }
        let refs: Vec<&Tensor> = chunks.iter().collect();
        let h = concat_rows(&refs)?;
        Ok(EncoderStates {
            h,
            cached_grad: None,
            plan: plan.clone(),
        })
    }

    /// Decoder forward: causal self-attention over the target prefix,
    /// cross-attention over all rows of the encoder output, logits over the
    /// vocabulary for every prefix position.
    pub fn decode_logits(&self, states: &EncoderStates, prefix: &[usize]) -> Result<Tensor> {
        if prefix.is_empty() {
            return Err(Error::InvalidArg("decode_logits: empty prefix".into()));
        }
        if prefix.len() > self.config.c_max {
            return Err(Error::InvalidArg(format!(
                "target prefix of {} tokens exceeds decoder capacity c_max={}",
                prefix.len(),
                self.config.c_max
            )));
        }
        self.check_ids(prefix)?;
        self.dec_calls.fetch_add(1, Ordering::Relaxed);

        let mask = self.causal_mask(prefix.len());
        let mut x = self.embed(prefix)?;
        for layer in &self.dec {
            let normed = self.layer_norm(&x, &layer.ln1)?;
            x = add(&x, &self.attention(&normed, &normed, &layer.self_attn, Some(&mask))?)?;
            let normed = self.layer_norm(&x, &layer.ln2)?;
            x = add(&x, &self.attention(&normed, &states.h, &layer.cross_attn, None)?)?;
            let normed = self.layer_norm(&x, &layer.ln3)?;
            x = add(&x, &self.ffn(&normed, &layer.ffn)?)?;
        }
        match &self.out_proj {
            Some(w) => matmul(&x, w),
            None => matmul(&x, &transpose(&self.token_embedding)?),
        }
    }
}

/// Mean token-level cross-entropy over non-pad target positions. Pad
/// positions contribute nothing to the value or the gradient.
pub fn sequence_loss(logits: &Tensor, targets: &[usize], pad_id: usize) -> Result<Tensor> {
    cross_entropy(logits, targets, pad_id)
}
