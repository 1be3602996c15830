use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, Vocabulary, REF_CLOSE, REF_OPEN, RET};
use super::ModelError;
use crate::corpus::RefEntry;
use crate::nn::{ParamSet, Real, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_context: usize,
    pub d_ff: usize,
}

impl ModelConfig {
    /// Desk-scale shape: d = 64, two layers, four heads, 256-token context.
    pub fn desk(vocab_size: usize) -> Self {
        Self { vocab_size, d_model: 64, n_layers: 2, n_heads: 4, max_context: 256, d_ff: 256 }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.max_context < 32 {
            return fail(format!("max_context {} below 32", self.max_context));
        }
        if self.vocab_size < super::vocab::SPECIALS.len() || self.d_ff == 0 || self.n_layers == 0 {
            return fail("vocab_size, d_ff and n_layers must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Unit-norm query vector read at a [RET] position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEmbedding {
    pub vector: Vec<f32>,
    pub source_position: usize,
}

/// Unit-norm reference vector read at the closing reference delimiter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefEmbedding {
    pub ref_id: String,
    pub vector: Vec<f32>,
}

pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let dot: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f32 = a.iter().map(|x| x * x).sum::<f32>().sqrt();
    let nb: f32 = b.iter().map(|x| x * x).sum::<f32>().sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Per-layer parameter indices into the model's [`ParamSet`].
#[derive(Debug, Clone, Copy)]
struct LayerIdx {
    ln1_gain: usize,
    ln1_bias: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    ln2_gain: usize,
    ln2_bias: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// The shared generator/retriever: one decoder-only transformer that yields
/// next-token logits, [RET] query embeddings and reference embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct ScholarLm<T: Real = f32> {
    config: ModelConfig,
    params: ParamSet<T>,
}

/// Tape handles for every parameter of a model, in [`ParamSet`] order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

pub struct Forward {
    /// (length, vocab) next-token logits; absent when only hidden states were requested.
    pub logits: Option<Var>,
    /// (length, d) final-layer hidden states after the output normalization.
    pub hidden: Var,
}

fn normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    // Box-Muller.
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

const TOK_IDX: usize = 0;
const POS_IDX: usize = 1;

impl ScholarLm<f32> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, v, f) = (config.d_model, config.vocab_size, config.d_ff);
        let std = 0.02;
        let out_std = std / (2.0 * config.n_layers as f64).sqrt();
        let mut randn = |shape: Vec<usize>, s: f64| {
            let n = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| normal(&mut rng, s) as f32).collect()).expect("shape")
        };
        let mut params = ParamSet::new();
        params.push("tok_emb", randn(vec![v, d], std));
        params.push("pos_emb", randn(vec![config.max_context, d], std));
        for l in 0..config.n_layers {
            let p = format!("layers.{l}");
            params.push(format!("{p}.ln1.gain"), Tensor::filled(vec![d], 1.0));
            params.push(format!("{p}.ln1.bias"), Tensor::zeros(vec![d]));
            params.push(format!("{p}.attn.wq"), randn(vec![d, d], std));
            params.push(format!("{p}.attn.wk"), randn(vec![d, d], std));
            params.push(format!("{p}.attn.wv"), randn(vec![d, d], std));
            params.push(format!("{p}.attn.wo"), randn(vec![d, d], out_std));
            params.push(format!("{p}.ln2.gain"), Tensor::filled(vec![d], 1.0));
            params.push(format!("{p}.ln2.bias"), Tensor::zeros(vec![d]));
            params.push(format!("{p}.ff.w1"), randn(vec![d, f], std));
            params.push(format!("{p}.ff.b1"), Tensor::zeros(vec![f]));
            params.push(format!("{p}.ff.w2"), randn(vec![f, d], out_std));
            params.push(format!("{p}.ff.b2"), Tensor::zeros(vec![d]));
        }
        params.push("ln_f.gain", Tensor::filled(vec![d], 1.0));
        params.push("ln_f.bias", Tensor::zeros(vec![d]));
        params.push("lm_head.w", randn(vec![d, v], std));
        params.push("lm_head.b", Tensor::zeros(vec![v]));
        Ok(Self { config, params })
    }

    /// Returns the L2-normalized final hidden state at the [RET] that ends
    /// `tokens`.
    pub fn embed_query(&self, tokens: &[TokenId]) -> Result<QueryEmbedding, ModelError> {
        if tokens.last() != Some(&RET) {
            return Err(ModelError::NotRetTerminated);
        }
        let pos = tokens.len() - 1;
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let q = self.query_rows(&mut tape, &bound, tokens, &[pos])?;
        Ok(QueryEmbedding { vector: tape.value(q).data().to_vec(), source_position: pos })
    }

    pub fn embed_reference(
        &self,
        vocab: &Vocabulary,
        entry: &RefEntry,
        content_budget: usize,
    ) -> Result<RefEmbedding, ModelError> {
        let mut out = self.embed_references(vocab, std::slice::from_ref(entry), content_budget)?;
        Ok(out.remove(0))
    }

    /// Batched form of [`Self::embed_reference`]; row i equals the single call on `entries[i]`.
    pub fn embed_references(
        &self,
        vocab: &Vocabulary,
        entries: &[RefEntry],
        content_budget: usize,
    ) -> Result<Vec<RefEmbedding>, ModelError> {
        if entries.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let seqs = entries
            .iter()
            .map(|e| reference_sequence(vocab, e, content_budget, self.config.max_context))
            .collect::<Result<Vec<_>, _>>()?;
        let rows = self.reference_rows(&mut tape, &bound, &seqs)?;
        let d = self.config.d_model;
        let data = tape.value(rows).data();
        Ok(entries
            .iter()
            .enumerate()
            .map(|(i, e)| RefEmbedding { ref_id: e.ref_id.clone(), vector: data[i * d..(i + 1) * d].to_vec() })
            .collect())
    }

    /// Next-token logits at every position.
    pub fn logits(&self, tokens: &[TokenId]) -> Result<Tensor<f32>, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &bound, tokens, true)?;
        Ok(tape.value(out.logits.expect("requested")).clone())
    }

    /// Logits at the final position only, plus the hidden state there.
    pub fn last_logits(&self, tokens: &[TokenId]) -> Result<Vec<f32>, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind_frozen(&mut tape);
        let out = self.forward(&mut tape, &bound, tokens, false)?;
        let last = tape.select_rows(out.hidden, &[tokens.len() - 1])?;
        let logits = self.head(&mut tape, &bound, last)?;
        Ok(tape.value(logits).data().to_vec())
    }
}

impl<T: Real> ScholarLm<T> {
    pub fn from_params(config: ModelConfig, params: ParamSet<T>) -> Result<Self, ModelError> {
        config.validate()?;
        let reference = ScholarLm::<f32>::init(config, 0)?;
        if reference.params.names() != params.names() {
            return Err(ModelError::Config("parameter names do not match the configured layout".into()));
        }
        for ((name, a), b) in reference.params.iter().zip(params.tensors()) {
            if a.shape() != b.shape() {
                return Err(ModelError::Config(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> ScholarLm<U> {
        ScholarLm { config: self.config, params: self.params.cast() }
    }

    /// Registers every parameter as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound { vars: self.params.tensors().iter().map(|t| tape.param(t.clone())).collect() }
    }

    /// Registers every parameter as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        Bound { vars: self.params.tensors().iter().map(|t| tape.constant(t.clone())).collect() }
    }

    /// Gradients accumulated on `tape` for each parameter (zeros where none).
    pub fn collect_grads(&self, tape: &Tape<T>, bound: &Bound) -> Vec<Vec<T>> {
        bound
            .vars
            .iter()
            .zip(self.params.tensors())
            .map(|(v, t)| tape.grad(*v).map_or_else(|| vec![T::zero(); t.len()], <[T]>::to_vec))
            .collect()
    }

    fn layer(&self, l: usize) -> LayerIdx {
        let base = 2 + l * 12;
        LayerIdx {
            ln1_gain: base,
            ln1_bias: base + 1,
            wq: base + 2,
            wk: base + 3,
            wv: base + 4,
            wo: base + 5,
            ln2_gain: base + 6,
            ln2_bias: base + 7,
            w1: base + 8,
            b1: base + 9,
            w2: base + 10,
            b2: base + 11,
        }
    }

    fn tail(&self) -> usize {
        2 + self.config.n_layers * 12
    }

    pub fn check_tokens(&self, tokens: &[TokenId]) -> Result<(), ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        if tokens.len() > self.config.max_context {
            return Err(ModelError::ContextOverflow { len: tokens.len(), limit: self.config.max_context });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(ModelError::TokenOutOfRange { id: bad, vocab: self.config.vocab_size });
        }
        Ok(())
    }

    /// Causal forward pass. Position t attends only to positions ≤ t.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        tokens: &[TokenId],
        with_logits: bool,
    ) -> Result<Forward, ModelError> {
        self.check_tokens(tokens)?;
        let p = &bound.vars;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let tok = tape.select_rows(p[TOK_IDX], &ids)?;
        let pos = tape.select_rows(p[POS_IDX], &positions)?;
        let mut x = tape.add(tok, pos)?;

        let dh = self.config.head_dim();
        let inv_sqrt = T::of(1.0 / (dh as f64).sqrt());
        for l in 0..self.config.n_layers {
            let li = self.layer(l);
            let h = tape.layer_norm(x, p[li.ln1_gain], p[li.ln1_bias])?;
            let q = tape.matmul(h, p[li.wq])?;
            let k = tape.matmul(h, p[li.wk])?;
            let v = tape.matmul(h, p[li.wv])?;
            let mut heads = Vec::with_capacity(self.config.n_heads);
            for head in 0..self.config.n_heads {
                let qh = tape.slice_cols(q, head * dh, dh)?;
                let kh = tape.slice_cols(k, head * dh, dh)?;
                let vh = tape.slice_cols(v, head * dh, dh)?;
                let scores = tape.matmul_nt(qh, kh)?;
                let scores = tape.scale(scores, inv_sqrt);
                let att = tape.causal_softmax(scores)?;
                heads.push(tape.matmul(att, vh)?);
            }
            let cat = tape.concat_cols(&heads)?;
            let att_out = tape.matmul(cat, p[li.wo])?;
            x = tape.add(x, att_out)?;

            let h2 = tape.layer_norm(x, p[li.ln2_gain], p[li.ln2_bias])?;
            let f = tape.matmul(h2, p[li.w1])?;
            let f = tape.add_row_bias(f, p[li.b1])?;
            let f = tape.gelu(f);
            let f = tape.matmul(f, p[li.w2])?;
            let f = tape.add_row_bias(f, p[li.b2])?;
            x = tape.add(x, f)?;
        }
        let t = self.tail();
        let hidden = tape.layer_norm(x, p[t], p[t + 1])?;
        let logits = if with_logits { Some(self.head(tape, bound, hidden)?) } else { None };
        Ok(Forward { logits, hidden })
    }

    fn head(&self, tape: &mut Tape<T>, bound: &Bound, hidden: Var) -> Result<Var, ModelError> {
        let t = self.tail();
        let logits = tape.matmul(hidden, bound.vars[t + 2])?;
        Ok(tape.add_row_bias(logits, bound.vars[t + 3])?)
    }

    /// Normalized hidden rows at `positions` of one sequence.
    pub fn query_rows(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        tokens: &[TokenId],
        positions: &[usize],
    ) -> Result<Var, ModelError> {
        let out = self.forward(tape, bound, tokens, false)?;
        let rows = tape.select_rows(out.hidden, positions)?;
        Ok(tape.l2_normalize_rows(rows)?)
    }

    /// One normalized row per reference sequence, read at its final token.
    pub fn reference_rows(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        sequences: &[Vec<TokenId>],
    ) -> Result<Var, ModelError> {
        let mut rows = Vec::with_capacity(sequences.len());
        for seq in sequences {
            let out = self.forward(tape, bound, seq, false)?;
            rows.push(tape.select_rows(out.hidden, &[seq.len() - 1])?);
        }
        let cat = tape.concat_rows(&rows)?;
        Ok(tape.l2_normalize_rows(cat)?)
    }
}

/// Title then abstract tokens, truncated to `budget` tokens in total.
pub fn reference_content(vocab: &Vocabulary, entry: &RefEntry, budget: usize) -> Vec<TokenId> {
    let mut toks = vocab.encode(&entry.title);
    toks.extend(vocab.encode(&entry.abstract_text));
    toks.truncate(budget);
    toks
}

/// `REF_OPEN · title · abstract · REF_CLOSE`, the sequence a reference is
/// encoded from.
pub fn reference_sequence(
    vocab: &Vocabulary,
    entry: &RefEntry,
    budget: usize,
    max_context: usize,
) -> Result<Vec<TokenId>, ModelError> {
    if entry.title.trim().is_empty() {
        return Err(ModelError::EmptyTitle(entry.ref_id.clone()));
    }
    let mut seq = vec![REF_OPEN];
    seq.extend(reference_content(vocab, entry, budget.min(max_context.saturating_sub(2))));
    seq.push(REF_CLOSE);
    Ok(seq)
}
