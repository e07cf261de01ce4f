//! Forward pass of the toy decoder on top of [`Graph`].
//!
//! Every block computes `x' = x + attn(LN_a(x)) + mlp(LN_m(x))` with the two
//! sublayers reading the same input. Attention is multi-query: per-head
//! queries, one shared key and value projection. Several sequences can be
//! packed into one pass; each gets its own causal segment and positions.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use ndarray::{Array1, Array2, Axis};

use super::config::{Activation, ModelConfig, Positional};
use super::params::ModelParams;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

/// Offsets added to head outputs before the output projection, keyed by
/// `(layer, head)`. Each vector has length `d_model / n_heads`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct HeadPatch {
    pub entries: BTreeMap<(usize, usize), Array1<f64>>,
}

impl HeadPatch {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, layer: usize, head: usize, offset: Array1<f64>) -> Option<Array1<f64>> {
        self.entries.insert((layer, head), offset)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let dh = config.head_dim();
        for (&(l, h), w) in &self.entries {
            if l >= config.n_layers || h >= config.n_heads {
                return Err(Error::Application(format!("head position ({l}, {h}) outside the model")));
            }
            if w.len() != dh {
                return Err(Error::Application(format!(
                    "offset for ({l}, {h}) has length {}, expected {dh}",
                    w.len()
                )));
            }
            if w.iter().any(|x| !x.is_finite()) {
                return Err(Error::Application(format!("offset for ({l}, {h}) is not finite")));
            }
        }
        Ok(())
    }
}

/// Parameters plus an optional removable head patch.
#[derive(Clone, Copy, Debug)]
pub struct ModelRef<'a> {
    pub params: &'a ModelParams,
    pub patch: Option<&'a HeadPatch>,
}

impl<'a> ModelRef<'a> {
    pub fn plain(params: &'a ModelParams) -> Self {
        Self { params, patch: None }
    }

    pub fn patched(params: &'a ModelParams, patch: &'a HeadPatch) -> Self {
        Self {
            params,
            patch: Some(patch),
        }
    }
}

/// Activations to record during [`forward`].
#[derive(Clone, Debug, Default)]
pub struct TraceRequest {
    /// `(layer, position)` of post-activation MLP keys.
    pub mlp_keys: BTreeSet<(usize, usize)>,
    /// `(layer, head, position)` of head outputs (before any patch offset).
    pub head_outputs: BTreeSet<(usize, usize, usize)>,
    /// `(layer, position)` of block outputs.
    pub residuals: BTreeSet<(usize, usize)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Traces {
    pub mlp_keys: BTreeMap<(usize, usize), Array1<f64>>,
    pub head_outputs: BTreeMap<(usize, usize, usize), Array1<f64>>,
    pub residuals: BTreeMap<(usize, usize), Array1<f64>>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Row `r` is the next-token distribution after position `r`.
    pub probs: Array2<f64>,
    pub traces: Traces,
}

/// One or more token sequences laid out for a packed forward pass.
#[derive(Clone, Debug)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub segments: Vec<Range<usize>>,
    pub positions: Vec<usize>,
}

impl Batch {
    pub fn new<S: AsRef<[usize]>>(seqs: &[S], config: &ModelConfig) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut segments = Vec::with_capacity(seqs.len());
        let mut positions = Vec::new();
        for seq in seqs {
            let seq = seq.as_ref();
            if seq.is_empty() {
                return Err(Error::Input("empty token sequence".into()));
            }
            if seq.len() > config.max_seq_len {
                return Err(Error::Input(format!(
                    "sequence of {} tokens exceeds max_seq_len {}",
                    seq.len(),
                    config.max_seq_len
                )));
            }
            if let Some(&bad) = seq.iter().find(|&&t| t >= config.vocab_size) {
                return Err(Error::Input(format!(
                    "token id {bad} outside vocabulary of {}",
                    config.vocab_size
                )));
            }
            let start = tokens.len();
            tokens.extend_from_slice(seq);
            positions.extend(0..seq.len());
            segments.push(start..tokens.len());
        }
        Ok(Self {
            tokens,
            segments,
            positions,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub struct BoundLayer {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub w_in: Var,
    pub w_out: Var,
    pub ln_attn_gain: Var,
    pub ln_attn_bias: Var,
    pub ln_mlp_gain: Var,
    pub ln_mlp_bias: Var,
}

/// Model weights registered as graph leaves.
pub struct BoundParams {
    pub embedding: Var,
    pub pos_embedding: Option<Var>,
    pub layers: Vec<BoundLayer>,
    pub ln_final_gain: Var,
    pub ln_final_bias: Var,
    pub unembedding: Var,
}

impl BoundParams {
    /// Registers every tensor of `params` in `g` without copying. With
    /// `trainable` the tensors are gradient leaves.
    pub fn bind<'a>(params: &'a ModelParams, g: &mut Graph<'a>, trainable: bool) -> Self {
        let mut reg = |t: &'a Array2<f64>| if trainable { g.leaf_ref(t) } else { g.constant_ref(t) };
        let embedding = reg(&params.embedding);
        let pos_embedding = params.pos_embedding.as_ref().map(&mut reg);
        let layers = params
            .layers
            .iter()
            .map(|l| BoundLayer {
                w_q: reg(&l.w_q),
                w_k: reg(&l.w_k),
                w_v: reg(&l.w_v),
                w_o: reg(&l.w_o),
                w_in: reg(&l.w_in),
                w_out: reg(&l.w_out),
                ln_attn_gain: reg(&l.ln_attn_gain),
                ln_attn_bias: reg(&l.ln_attn_bias),
                ln_mlp_gain: reg(&l.ln_mlp_gain),
                ln_mlp_bias: reg(&l.ln_mlp_bias),
            })
            .collect();
        Self {
            embedding,
            pos_embedding,
            layers,
            ln_final_gain: reg(&params.ln_final_gain),
            ln_final_bias: reg(&params.ln_final_bias),
            unembedding: reg(&params.unembedding),
        }
    }

    /// Leaves in [`ModelParams::named_tensors`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.embedding];
        out.extend(self.pos_embedding);
        for l in &self.layers {
            out.extend([
                l.w_q,
                l.w_k,
                l.w_v,
                l.w_o,
                l.w_in,
                l.w_out,
                l.ln_attn_gain,
                l.ln_attn_bias,
                l.ln_mlp_gain,
                l.ln_mlp_bias,
            ]);
        }
        out.extend([self.ln_final_gain, self.ln_final_bias, self.unembedding]);
        out
    }
}

/// Graph-level edits applied during a forward pass.
#[derive(Clone, Debug, Default)]
pub struct Interventions {
    /// `(layer, head, 1 x dh offset)` added to the head output at every row.
    pub head_offsets: Vec<(usize, usize, Var)>,
    /// `(layer, row, 1 x d vector)` added to the block output at one row.
    pub residual_offsets: Vec<(usize, usize, Var)>,
    /// `(layer, d_ff x d matrix)` added to that layer's `w_out`.
    pub w_out_deltas: Vec<(usize, Var)>,
}

impl Interventions {
    /// Constant offsets for every entry of `patch`.
    pub fn from_patch(g: &mut Graph<'_>, patch: &HeadPatch) -> Self {
        let head_offsets = patch
            .entries
            .iter()
            .map(|(&(l, h), w)| (l, h, g.constant(w.clone().insert_axis(Axis(0)))))
            .collect();
        Self {
            head_offsets,
            ..Self::default()
        }
    }
}

/// Handles to the intermediate values of one block.
pub struct LayerTap {
    /// Block input `x^{l-1}`.
    pub input: Var,
    /// Post-activation MLP keys (`N x d_ff`).
    pub keys: Var,
    /// Head outputs before offsets and output projection (`N x d`).
    pub heads: Var,
    /// The attention node; holds the attention probabilities.
    pub attention: Var,
    /// Block output `x^l`.
    pub output: Var,
}

pub struct ForwardGraph {
    pub logits: Var,
    pub log_probs: Var,
    pub layers: Vec<LayerTap>,
}

/// Builds the forward computation for `batch` into `g`.
pub fn forward_graph(
    g: &mut Graph<'_>,
    config: &ModelConfig,
    bound: &BoundParams,
    batch: &Batch,
    hooks: &Interventions,
) -> ForwardGraph {
    let dh = config.head_dim();
    let n_heads = config.n_heads;
    let mut x = g.gather(bound.embedding, &batch.tokens);
    if let Some(pos) = bound.pos_embedding {
        let p = g.gather(pos, &batch.positions);
        x = g.add(x, p);
    }
    let mut taps = Vec::with_capacity(config.n_layers);
    for (li, layer) in bound.layers.iter().enumerate() {
        let input = x;
        let (attn_in, mlp_in) = if config.layernorm {
            (
                g.layer_norm(x, layer.ln_attn_gain, layer.ln_attn_bias),
                g.layer_norm(x, layer.ln_mlp_gain, layer.ln_mlp_bias),
            )
        } else {
            (x, x)
        };

        let mut q = g.matmul(attn_in, layer.w_q);
        let mut k = g.matmul(attn_in, layer.w_k);
        let v = g.matmul(attn_in, layer.w_v);
        if config.positional == Positional::Rotary {
            q = g.rope(q, dh, &batch.positions);
            k = g.rope(k, dh, &batch.positions);
        }
        let attention = g.mq_attention(q, k, v, n_heads, &batch.segments);
        let heads = attention;
        let offsets: Vec<_> = hooks.head_offsets.iter().filter(|o| o.0 == li).collect();
        let patched = if offsets.is_empty() {
            heads
        } else {
            let parts: Vec<Var> = (0..n_heads)
                .map(|h| match offsets.iter().find(|o| o.1 == h) {
                    Some(o) => o.2,
                    None => g.constant(Array2::zeros((1, dh))),
                })
                .collect();
            let row = g.concat_cols(&parts);
            g.add_row(heads, row)
        };
        let a = g.matmul(patched, layer.w_o);

        let pre = g.matmul(mlp_in, layer.w_in);
        let keys = match config.activation {
            Activation::Gelu => g.gelu(pre),
            Activation::Relu => g.relu(pre),
        };
        let mut m = g.matmul(keys, layer.w_out);
        for &(_, delta) in hooks.w_out_deltas.iter().filter(|d| d.0 == li) {
            let extra = g.matmul(keys, delta);
            m = g.add(m, extra);
        }

        let xa = g.add(x, a);
        x = g.add(xa, m);
        for &(_, row, v) in hooks.residual_offsets.iter().filter(|o| o.0 == li) {
            x = g.add_to_row(x, row, v);
        }
        taps.push(LayerTap {
            input,
            keys,
            heads,
            attention,
            output: x,
        });
    }
    let final_in = if config.layernorm {
        g.layer_norm(x, bound.ln_final_gain, bound.ln_final_bias)
    } else {
        x
    };
    let logits = g.matmul(final_in, bound.unembedding);
    let log_probs = g.log_softmax(logits);
    ForwardGraph {
        logits,
        log_probs,
        layers: taps,
    }
}

fn validate_trace(trace: &TraceRequest, config: &ModelConfig, len: usize) -> Result<()> {
    let bad = |what: &str| Err(Error::Input(format!("trace request out of range: {what}")));
    for &(l, p) in trace.mlp_keys.iter().chain(&trace.residuals) {
        if l >= config.n_layers || p >= len {
            return bad(&format!("layer {l}, position {p}"));
        }
    }
    for &(l, h, p) in &trace.head_outputs {
        if l >= config.n_layers || h >= config.n_heads || p >= len {
            return bad(&format!("layer {l}, head {h}, position {p}"));
        }
    }
    Ok(())
}

/// Next-token distributions for every position of `tokens`, with optional
/// head patch and activation capture.
pub fn forward(
    params: &ModelParams,
    tokens: &[usize],
    patch: Option<&HeadPatch>,
    trace: Option<&TraceRequest>,
) -> Result<ForwardOutput> {
    let config = &params.config;
    let batch = Batch::new(&[tokens], config)?;
    if let Some(t) = trace {
        validate_trace(t, config, tokens.len())?;
    }
    if let Some(p) = patch {
        p.validate(config)?;
    }
    let mut g = Graph::new();
    let bound = BoundParams::bind(params, &mut g, false);
    let hooks = patch.map(|p| Interventions::from_patch(&mut g, p)).unwrap_or_default();
    let fw = forward_graph(&mut g, config, &bound, &batch, &hooks);
    let probs = g.value(fw.log_probs).mapv(f64::exp);
    let mut traces = Traces::default();
    if let Some(t) = trace {
        let dh = config.head_dim();
        for &(l, p) in &t.mlp_keys {
            traces.mlp_keys.insert((l, p), g.value(fw.layers[l].keys).row(p).to_owned());
        }
        for &(l, p) in &t.residuals {
            traces.residuals.insert((l, p), g.value(fw.layers[l].output).row(p).to_owned());
        }
        for &(l, h, p) in &t.head_outputs {
            let row = g.value(fw.layers[l].heads).row(p);
            traces
                .head_outputs
                .insert((l, h, p), row.slice(ndarray::s![h * dh..(h + 1) * dh]).to_owned());
        }
    }
    Ok(ForwardOutput { probs, traces })
}

/// `log P(continuation | prompt)` summed over continuation tokens.
pub fn sequence_logprob(
    params: &ModelParams,
    prompt: &[usize],
    continuation: &[usize],
    patch: Option<&HeadPatch>,
) -> Result<f64> {
    if continuation.is_empty() {
        return Ok(0.0);
    }
    let scores = score_continuations(ModelRef { params, patch }, &[(prompt, continuation)])?;
    Ok(scores[0].logprob)
}

/// Log probability of a continuation and whether greedy decoding from the
/// prompt reproduces it token for token.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ContinuationScore {
    pub logprob: f64,
    pub greedy_match: bool,
}

/// Scores many `(prompt, continuation)` pairs in one packed pass.
pub fn score_continuations<P: AsRef<[usize]>, C: AsRef<[usize]>>(
    model: ModelRef<'_>,
    pairs: &[(P, C)],
) -> Result<Vec<ContinuationScore>> {
    let params = model.params;
    let config = &params.config;
    let mut seqs = Vec::with_capacity(pairs.len());
    for (p, c) in pairs {
        let (p, c) = (p.as_ref(), c.as_ref());
        if p.is_empty() {
            return Err(Error::Input("prompt must contain at least one token".into()));
        }
        let mut s = p.to_vec();
        s.extend_from_slice(c);
        seqs.push(s);
    }
    if seqs.is_empty() {
        return Ok(Vec::new());
    }
    let batch = Batch::new(&seqs, config)?;
    if let Some(p) = model.patch {
        p.validate(config)?;
    }
    let mut g = Graph::new();
    let bound = BoundParams::bind(params, &mut g, false);
    let hooks = model.patch.map(|p| Interventions::from_patch(&mut g, p)).unwrap_or_default();
    let fw = forward_graph(&mut g, config, &bound, &batch, &hooks);
    let lp = g.value(fw.log_probs);
    Ok(pairs
        .iter()
        .zip(&batch.segments)
        .map(|((p, c), seg)| {
            let (p, c) = (p.as_ref(), c.as_ref());
            let mut logprob = 0.0;
            let mut greedy_match = true;
            for (t, &tok) in c.iter().enumerate() {
                let row = lp.row(seg.start + p.len() - 1 + t);
                logprob += row[tok];
                if argmax(row.iter().copied()) != tok {
                    greedy_match = false;
                }
            }
            ContinuationScore { logprob, greedy_match }
        })
        .collect())
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}
