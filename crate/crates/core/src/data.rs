//! Synthetic long-document summarization tasks, vocabulary, and dataset I/O.
//!
//! The needle task plants distinct marker tokens uniformly through a filler
//! document; the target lists them in document order, one sentence per
//! marker. The copy task asks for the first and last `span` tokens, so the
//! head half is solvable under truncation and the tail half is not.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::rng::substream;

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;
/// Number of reserved ids at the bottom of every vocabulary.
pub const RESERVED: usize = 4;
pub const RESERVED_TOKENS: [&str; RESERVED] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Sentence separator emitted by the generators; an ordinary vocab token.
pub const SEP_TOKEN: &str = ".";

/// One training/evaluation pair of token-id sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub source: Vec<usize>,
    pub target: Vec<usize>,
    pub meta: Option<Value>,
}

impl Example {
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.source.is_empty() {
            return Err(Error::InvalidArg("example has empty source".into()));
        }
        if self.target.is_empty() {
            return Err(Error::InvalidArg("example has empty target".into()));
        }
        for &id in self.source.iter().chain(&self.target) {
            if id >= vocab_size {
                return Err(Error::InvalidArg(format!(
                    "token id {id} out of range for vocabulary of {vocab_size}"
                )));
            }
        }
        Ok(())
    }

    /// `(position, token id)` pairs recorded by the needle generator.
    pub fn needle_annotations(&self) -> Option<Vec<(usize, usize)>> {
        let needles = self.meta.as_ref()?.get("needles")?.as_array()?;
        let mut out = Vec::with_capacity(needles.len());
        for n in needles {
            let pos = n.get("pos")?.as_u64()? as usize;
            let id = n.get("id")?.as_u64()? as usize;
            out.push((pos, id));
        }
        Some(out)
    }
}

/// Bidirectional token map with stable reserved ids.
#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Build from non-reserved tokens in id order (id = RESERVED + position).
    pub fn from_tokens(extra: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        for tok in extra {
            if tok.is_empty() || tok.chars().any(char::is_whitespace) {
                return Err(Error::InvalidArg(format!(
                    "invalid vocab token {tok:?} (empty or contains whitespace)"
                )));
            }
            if index.contains_key(&tok) {
                return Err(Error::InvalidArg(format!("duplicate vocab token {tok:?}")));
            }
            index.insert(tok.clone(), tokens.len());
            tokens.push(tok);
        }
        Ok(Self { tokens, index })
    }

    /// Total size including reserved ids.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn sep_id(&self) -> Option<usize> {
        self.id(SEP_TOKEN)
    }

    /// Whitespace-tokenize and map to ids; unknown tokens become `<unk>`.
    /// Returns the ids and the number of unknown substitutions.
    pub fn encode(&self, text: &str) -> (Vec<usize>, usize) {
        let mut unk = 0;
        let ids = text
            .split_whitespace()
            .map(|t| {
                self.id(t).unwrap_or_else(|| {
                    unk += 1;
                    UNK_ID
                })
            })
            .collect();
        (ids, unk)
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One non-reserved token per line; line number = id − RESERVED.
    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for tok in &self.tokens[RESERVED..] {
            out.push_str(tok);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_tokens(text.lines().filter(|l| !l.is_empty()).map(String::from))
    }
}

/// Frequency-ranked vocabulary from whitespace-tokenized text files:
/// tokens sorted by (count desc, token asc) after the reserved ids.
pub fn build_vocab(paths: &[impl AsRef<Path>]) -> Result<Vocab> {
    let mut counts: HashMap<String, u64> = HashMap::new();
    for path in paths {
        let text = fs::read_to_string(path.as_ref())?;
        for tok in text.split_whitespace() {
            if RESERVED_TOKENS.contains(&tok) {
                continue;
            }
            *counts.entry(tok.to_string()).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(Error::InvalidArg("empty corpus: no tokens found".into()));
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocab::from_tokens(ranked.into_iter().map(|(t, _)| t))
}

fn sample_distinct(rng: &mut rand_chacha::ChaCha8Rng, n: usize, bound: usize) -> Vec<usize> {
    debug_assert!(n <= bound);
    let mut seen = std::collections::HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let v = rng.random_range(0..bound);
        if seen.insert(v) {
            out.push(v);
        }
    }
    out
}

/// Vocabulary layout shared by the generators: reserved ids, the sentence
/// separator, `n_markers` marker tokens, then filler tokens up to `total`.
fn task_vocab(total: usize, n_markers: usize) -> Result<Vocab> {
    let needed = RESERVED + 1 + n_markers + 1; // sep + markers + ≥1 filler
    if total < needed {
        return Err(Error::InvalidArg(format!(
            "vocab budget {total} too small: need ≥ {needed} \
             ({RESERVED} reserved + separator + {n_markers} markers + ≥1 filler)"
        )));
    }
    let n_fillers = total - RESERVED - 1 - n_markers;
    let mut tokens = vec![SEP_TOKEN.to_string()];
    tokens.extend((0..n_markers).map(|i| format!("n{i:02}")));
    tokens.extend((0..n_fillers).map(|i| format!("w{i:03}")));
    Vocab::from_tokens(tokens)
}

/// Needle task: each source is filler tokens with `n_needles` distinct
/// markers planted at positions drawn uniformly over the document; the
/// target is the markers in document order, one per sentence. The marker
/// pool holds `2·n_needles` tokens so a model that has never seen a needle
/// cannot recall it by guessing. Deterministic in `seed`.
pub fn gen_needle_task(
    seed: u64,
    n_examples: usize,
    doc_len: usize,
    n_needles: usize,
    vocab_size: usize,
) -> Result<(Vocab, Vec<Example>)> {
    if doc_len == 0 {
        return Err(Error::InvalidArg("doc_len must be positive".into()));
    }
    if doc_len < n_needles {
        return Err(Error::InvalidArg(format!(
            "cannot place {n_needles} needles in {doc_len} tokens"
        )));
    }
    let pool = 2 * n_needles;
    let vocab = task_vocab(vocab_size, pool)?;
    if n_needles >= vocab_size.saturating_sub(RESERVED) {
        return Err(Error::InvalidArg(format!(
            "n_needles {n_needles} must be below vocab budget {vocab_size} minus reserved ids"
        )));
    }
    let marker_base = RESERVED + 1;
    let filler_base = marker_base + pool;
    let n_fillers = vocab.len() - filler_base;

    let mut rng = substream(seed, "needle");
    let mut examples = Vec::with_capacity(n_examples);
    for _ in 0..n_examples {
        let mut source: Vec<usize> = (0..doc_len)
            .map(|_| filler_base + rng.random_range(0..n_fillers))
            .collect();
        let mut placed: Vec<(usize, usize)> = sample_distinct(&mut rng, n_needles, doc_len)
            .into_iter()
            .zip(
                sample_distinct(&mut rng, n_needles, pool)
                    .into_iter()
                    .map(|m| marker_base + m),
            )
            .collect();
        placed.sort_unstable_by_key(|&(pos, _)| pos);
        for &(pos, id) in &placed {
            source[pos] = id;
        }
        let sep = vocab.sep_id().unwrap();
        let mut target = vec![BOS_ID];
        for &(_, id) in &placed {
            target.push(id);
            target.push(sep);
        }
        target.push(EOS_ID);
        let meta = json!({
            "needles": placed
                .iter()
                .map(|&(pos, id)| json!({"pos": pos, "id": id, "token": vocab.token(id).unwrap()}))
                .collect::<Vec<_>>(),
        });
        let ex = Example {
            source,
            target,
            meta: Some(meta),
        };
        ex.validate(vocab.len())?;
        examples.push(ex);
    }
    Ok((vocab, examples))
}

/// Copy task: the target is the first `span` and last `span` tokens of the
/// source. The head half is trivially solvable after truncation; the tail
/// half is impossible without the end of the document.
pub fn gen_copy_task(
    seed: u64,
    n_examples: usize,
    doc_len: usize,
    span: usize,
    vocab_size: usize,
) -> Result<(Vocab, Vec<Example>)> {
    if span == 0 || doc_len < span {
        return Err(Error::InvalidArg(format!(
            "copy span {span} invalid for doc_len {doc_len}"
        )));
    }
    let vocab = task_vocab(vocab_size, 0)?;
    let filler_base = RESERVED + 1;
    let n_fillers = vocab.len() - filler_base;
    let sep = vocab.sep_id().unwrap();

    let mut rng = substream(seed, "copy");
    let mut examples = Vec::with_capacity(n_examples);
    for _ in 0..n_examples {
        let source: Vec<usize> = (0..doc_len)
            .map(|_| filler_base + rng.random_range(0..n_fillers))
            .collect();
        let mut target = vec![BOS_ID];
        target.extend_from_slice(&source[..span]);
        target.push(sep);
        target.extend_from_slice(&source[doc_len - span..]);
        target.push(EOS_ID);
        let ex = Example {
            source,
            target,
            meta: Some(json!({"span": span})),
        };
        ex.validate(vocab.len())?;
        examples.push(ex);
    }
    Ok((vocab, examples))
}

/// Write one JSON object per line: `{"source": "...", "target": "...",
/// "meta": {...}}` with space-separated token surfaces.
pub fn write_jsonl(path: &Path, examples: &[Example], vocab: &Vocab) -> Result<()> {
    let mut file = fs::File::create(path)?;
    for ex in examples {
        let mut obj = json!({
            "source": vocab.decode(&ex.source),
            "target": vocab.decode(&ex.target),
        });
        if let Some(meta) = &ex.meta {
            obj["meta"] = meta.clone();
        }
        writeln!(file, "{obj}")?;
    }
    Ok(())
}

/// Read a JSONL dataset. Malformed lines fail with their line number;
/// unknown tokens become `<unk>` with one logged warning per file.
pub fn read_jsonl(path: &Path, vocab: &Vocab) -> Result<Vec<Example>> {
    let file = fs::File::open(path)?;
    let display = path.display().to_string();
    let mut examples = Vec::new();
    let mut unk_total = 0usize;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Dataset {
            path: display.clone(),
            line: lineno,
            message,
        };
        let value: Value =
            serde_json::from_str(&line).map_err(|e| bad(format!("invalid JSON: {e}")))?;
        let field = |k: &str| -> Result<&str> {
            value
                .get(k)
                .and_then(Value::as_str)
                .ok_or_else(|| bad(format!("missing or non-string field \"{k}\"")))
        };
        let (source, unk_s) = vocab.encode(field("source")?);
        let (target, unk_t) = vocab.encode(field("target")?);
        unk_total += unk_s + unk_t;
        let ex = Example {
            source,
            target,
            meta: value.get("meta").cloned(),
        };
        ex.validate(vocab.len())
            .map_err(|e| bad(e.to_string()))?;
        examples.push(ex);
    }
    if unk_total > 0 {
        log::warn!("{display}: {unk_total} unknown token(s) replaced with <unk>");
    }
    Ok(examples)
}

/// Truncate sources in place to at most `max_len` tokens (the truncation
/// baseline regime).
pub fn truncate_sources(examples: &mut [Example], max_len: usize) {
    for ex in examples {
        ex.source.truncate(max_len.max(1));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn needle_zero_needles_gives_bos_eos_target() {
        let (_, examples) = gen_needle_task(7, 3, 16, 0, 12).unwrap();
        for ex in &examples {
            assert_eq!(ex.target, vec![BOS_ID, EOS_ID]);
        }
    }

    #[test]
    fn needle_meta_matches_source_content() {
        let (_, examples) = gen_needle_task(11, 20, 64, 5, 40).unwrap();
        for ex in &examples {
            let needles = ex.needle_annotations().unwrap();
            assert_eq!(needles.len(), 5);
            for (pos, id) in needles {
                assert_eq!(ex.source[pos], id);
            }
        }
    }

    #[test]
    fn needle_targets_list_markers_in_document_order() {
        let (vocab, examples) = gen_needle_task(3, 10, 48, 4, 40).unwrap();
        let sep = vocab.sep_id().unwrap();
        for ex in &examples {
            let needles = ex.needle_annotations().unwrap();
            let mut expect = vec![BOS_ID];
            for (_, id) in needles {
                expect.push(id);
                expect.push(sep);
            }
            expect.push(EOS_ID);
            assert_eq!(ex.target, expect);
        }
    }

    #[test]
    fn needle_generation_is_deterministic() {
        let (_, a) = gen_needle_task(5, 8, 32, 3, 30).unwrap();
        let (_, b) = gen_needle_task(5, 8, 32, 3, 30).unwrap();
        assert_eq!(a, b);
        let (_, c) = gen_needle_task(6, 8, 32, 3, 30).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn needle_positions_are_uniform() {
        // Pooled positions over 1000 examples, 10 equal bins, chi-squared
        // test with 9 degrees of freedom: statistic below 21.666 keeps the
        // uniformity hypothesis at p > 0.01.
        let l = 256;
        let (_, examples) = gen_needle_task(42, 1000, l, 8, 64).unwrap();
        let mut bins = [0f64; 10];
        let mut total = 0f64;
        for ex in &examples {
            for (pos, _) in ex.needle_annotations().unwrap() {
                bins[pos * 10 / l] += 1.0;
                total += 1.0;
            }
        }
        let expected = total / 10.0;
        let chi2: f64 = bins.iter().map(|&o| (o - expected).powi(2) / expected).sum();
        assert!(chi2 < 21.666, "chi-squared {chi2} too large: {bins:?}");
    }

    #[test]
    fn needle_infeasible_params_fail() {
        assert!(gen_needle_task(1, 1, 4, 8, 64).is_err()); // more needles than tokens
        assert!(gen_needle_task(1, 1, 64, 8, 10).is_err()); // vocab too small
    }

    #[test]
    fn copy_span_one_len_two_targets_both_tokens() {
        let (vocab, examples) = gen_copy_task(9, 5, 2, 1, 12).unwrap();
        let sep = vocab.sep_id().unwrap();
        for ex in &examples {
            assert_eq!(
                ex.target,
                vec![BOS_ID, ex.source[0], sep, ex.source[1], EOS_ID]
            );
        }
    }

    #[test]
    fn copy_tail_is_last_span_of_source() {
        let (_, examples) = gen_copy_task(13, 5, 40, 4, 20).unwrap();
        for ex in &examples {
            let tail = &ex.target[ex.target.len() - 5..ex.target.len() - 1];
            assert_eq!(tail, &ex.source[36..40]);
        }
    }

    #[test]
    fn copy_tail_random_guessing_is_at_chance() {
        // A guesser drawing uniformly over the filler alphabet matches a
        // tail token with probability 1/F.
        use rand::Rng;
        let v = 20;
        let (vocab, examples) = gen_copy_task(21, 50, 32, 4, v).unwrap();
        let n_fillers = vocab.len() - RESERVED - 1;
        let chance = 1.0 / n_fillers as f64;
        let mut rng = crate::rng::substream(99, "guess");
        let mut hits = 0u64;
        let mut trials = 0u64;
        for ex in &examples {
            for &t in &ex.source[28..] {
                for _ in 0..40 {
                    let guess = RESERVED + 1 + rng.random_range(0..n_fillers);
                    if guess == t {
                        hits += 1;
                    }
                    trials += 1;
                }
            }
        }
        let acc = hits as f64 / trials as f64;
        assert!(
            (acc - chance).abs() < 0.02,
            "random-guess accuracy {acc} should be near {chance}"
        );
    }

    #[test]
    fn jsonl_round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let (vocab, examples) = gen_needle_task(17, 6, 24, 2, 24).unwrap();
        write_jsonl(&path, &examples, &vocab).unwrap();
        let back = read_jsonl(&path, &vocab).unwrap();
        assert_eq!(examples, back);
    }

    #[test]
    fn jsonl_empty_file_is_empty_set() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        let vocab = Vocab::from_tokens(["a".to_string()]).unwrap();
        assert!(read_jsonl(&path, &vocab).unwrap().is_empty());
    }

    #[test]
    fn jsonl_missing_target_names_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"source\": \"a\", \"target\": \"a\"}\n{\"source\": \"a\"}\n",
        )
        .unwrap();
        let vocab = Vocab::from_tokens(["a".to_string()]).unwrap();
        let err = read_jsonl(&path, &vocab).unwrap_err().to_string();
        assert!(err.contains(":2:"), "{err}");
        assert!(err.contains("target"), "{err}");
    }

    #[test]
    fn jsonl_unknown_token_becomes_unk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("unk.jsonl");
        std::fs::write(&path, "{\"source\": \"a zzz\", \"target\": \"a\"}\n").unwrap();
        let vocab = Vocab::from_tokens(["a".to_string()]).unwrap();
        let examples = read_jsonl(&path, &vocab).unwrap();
        assert_eq!(examples[0].source, vec![RESERVED, UNK_ID]);
    }

    #[test]
    fn build_vocab_orders_by_frequency_then_token() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.txt");
        std::fs::write(&path, "b a a c b a\nc x").unwrap();
        let vocab = build_vocab(&[&path]).unwrap();
        // a:3, b:2, c:2, x:1 — ties broken lexicographically.
        assert_eq!(vocab.token(RESERVED), Some("a"));
        assert_eq!(vocab.token(RESERVED + 1), Some("b"));
        assert_eq!(vocab.token(RESERVED + 2), Some("c"));
        assert_eq!(vocab.token(RESERVED + 3), Some("x"));
    }

    #[test]
    fn build_vocab_empty_corpus_fails() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.txt");
        std::fs::write(&path, "").unwrap();
        assert!(build_vocab(&[&path]).is_err());
    }

    #[test]
    fn build_vocab_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.txt");
        std::fs::write(&path, "q w e r t y q w e q").unwrap();
        let a = build_vocab(&[&path]).unwrap();
        let b = build_vocab(&[&path]).unwrap();
        assert_eq!(a.tokens, b.tokens);
    }
}
