//! Fixed-context-window feedforward language model.
//!
//! The next-token distribution depends on the last `window` tokens of
//! `prompt ++ response`, left-padded with BOS:
//!
//! ```text
//! logits = W2 · tanh(W1 · concat(E[c_1], …, E[c_k]) + b1) + b2
//! ```
//!
//! Responses are generated under a [`ResponseGrammar`] that masks tokens the
//! grammar forbids at each position. Masked logits are shifted by
//! [`MASK_LOGIT`] so they carry exactly zero probability.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{self, Graph, NodeId, Tensor};

/// Additive logit for disallowed tokens; `exp` underflows to exactly zero.
pub const MASK_LOGIT: f64 = -1e9;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: usize, vocab: usize },
    #[error("invalid policy shape: {0}")]
    Shape(String),
    #[error("invalid response: {0}")]
    Response(String),
    #[error(transparent)]
    Autodiff(#[from] autodiff::AutodiffError),
}

pub type Result<T> = std::result::Result<T, PolicyError>;

/// Token layout: content ids `0..content`, then BOS, EOS and an optional separator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    content: usize,
    separator: bool,
}

impl Vocab {
    pub fn new(content: usize, separator: bool) -> Result<Self> {
        if content == 0 {
            return Err(PolicyError::Shape(
                "vocabulary needs at least one content token".into(),
            ));
        }
        Ok(Self { content, separator })
    }

    /// Ten digits, BOS, EOS and a separator: 13 tokens.
    pub fn digits() -> Self {
        Self {
            content: 10,
            separator: true,
        }
    }

    pub fn size(&self) -> usize {
        self.content + 2 + usize::from(self.separator)
    }

    pub fn content_tokens(&self) -> usize {
        self.content
    }

    pub fn bos(&self) -> usize {
        self.content
    }

    pub fn eos(&self) -> usize {
        self.content + 1
    }

    pub fn sep(&self) -> Option<usize> {
        self.separator.then_some(self.content + 2)
    }

    pub fn is_content(&self, token: usize) -> bool {
        token < self.content
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Self::digits()
    }
}

/// Architecture extents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PolicyShape {
    pub vocab: Vocab,
    pub window: usize,
    pub embed: usize,
    pub hidden: usize,
}

impl Default for PolicyShape {
    fn default() -> Self {
        Self {
            vocab: Vocab::digits(),
            window: 4,
            embed: 16,
            hidden: 64,
        }
    }
}

/// Offsets of each block inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    total: usize,
}

impl PolicyShape {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.embed == 0 || self.hidden == 0 {
            return Err(PolicyShape::shape_error(self));
        }
        Ok(())
    }

    fn shape_error(&self) -> PolicyError {
        PolicyError::Shape(format!(
            "window {}, embed {}, hidden {} must all be positive",
            self.window, self.embed, self.hidden
        ))
    }

    fn layout(&self) -> Layout {
        let v = self.vocab.size();
        let w1 = v * self.embed;
        let b1 = w1 + self.window * self.embed * self.hidden;
        let w2 = b1 + self.hidden;
        let b2 = w2 + self.hidden * v;
        Layout {
            w1,
            b1,
            w2,
            b2,
            total: b2 + v,
        }
    }

    /// `V·d + k·d·h + h + h·V + V`.
    pub fn param_count(&self) -> usize {
        self.layout().total
    }
}

/// Flat parameter vector plus its architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    shape: PolicyShape,
    values: Vec<f64>,
}

impl PolicyParams {
    /// Uniform in `[-scale, scale]` from a ChaCha stream keyed by `seed`.
    pub fn init(shape: PolicyShape, seed: u64, scale: f64) -> Result<Self> {
        shape.validate()?;
        if !(scale >= 0.0) || !scale.is_finite() {
            return Err(PolicyError::Shape(format!("init scale {scale} must be >= 0")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values = (0..shape.param_count())
            .map(|_| {
                let u: f64 = rng.gen();
                (2.0 * u - 1.0) * scale
            })
            .collect();
        Ok(Self { shape, values })
    }

    pub fn from_values(shape: PolicyShape, values: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        if values.len() != shape.param_count() {
            return Err(PolicyError::Shape(format!(
                "expected {} parameters, got {}",
                shape.param_count(),
                values.len()
            )));
        }
        Ok(Self { shape, values })
    }

    pub fn shape(&self) -> &PolicyShape {
        &self.shape
    }

    pub fn vocab(&self) -> Vocab {
        self.shape.vocab
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Plain (non-recorded) logits for one left-padded context of `window` ids.
    pub fn logits(&self, context: &[usize]) -> Result<Vec<f64>> {
        let s = &self.shape;
        let v = s.vocab.size();
        if context.len() != s.window {
            return Err(PolicyError::Shape(format!(
                "context of length {} for window {}",
                context.len(),
                s.window
            )));
        }
        let lay = s.layout();
        let mut input = Vec::with_capacity(s.window * s.embed);
        for &tok in context {
            if tok >= v {
                return Err(PolicyError::TokenOutOfRange { token: tok, vocab: v });
            }
            input.extend_from_slice(&self.values[tok * s.embed..(tok + 1) * s.embed]);
        }
        // Accumulation order mirrors `Graph::matmul` followed by `add_bias`.
        let w1 = &self.values[lay.w1..lay.b1];
        let mut hidden = vec![0.0; s.hidden];
        for (p, &x) in input.iter().enumerate() {
            for (hj, &w) in hidden.iter_mut().zip(&w1[p * s.hidden..(p + 1) * s.hidden]) {
                *hj += x * w;
            }
        }
        for (hj, &b) in hidden.iter_mut().zip(&self.values[lay.b1..lay.w2]) {
            *hj = (*hj + b).tanh();
        }
        let w2 = &self.values[lay.w2..lay.b2];
        let mut out = vec![0.0; v];
        for (p, &x) in hidden.iter().enumerate() {
            for (o, &w) in out.iter_mut().zip(&w2[p * v..(p + 1) * v]) {
                *o += x * w;
            }
        }
        for (o, &b) in out.iter_mut().zip(&self.values[lay.b2..lay.total]) {
            *o += b;
        }
        Ok(out)
    }
}

/// Records the model on `graph` for `n` contexts (flattened, `n × window`),
/// reading parameters from the flat leaf `theta`. Returns `[n × V]` logits.
pub fn forward_logits(
    graph: &mut Graph,
    shape: &PolicyShape,
    theta: NodeId,
    contexts: &[usize],
) -> Result<NodeId> {
    let v = shape.vocab.size();
    let lay = shape.layout();
    if !contexts.len().is_multiple_of(shape.window) {
        return Err(PolicyError::Shape(format!(
            "{} context ids is not a multiple of window {}",
            contexts.len(),
            shape.window
        )));
    }
    if let Some(&tok) = contexts.iter().find(|&&t| t >= v) {
        return Err(PolicyError::TokenOutOfRange { token: tok, vocab: v });
    }
    let n = contexts.len() / shape.window;
    let (d, h, k) = (shape.embed, shape.hidden, shape.window);
    let emb = graph.slice(theta, 0, vec![v, d])?;
    let w1 = graph.slice(theta, lay.w1, vec![k * d, h])?;
    let b1 = graph.slice(theta, lay.b1, vec![h])?;
    let w2 = graph.slice(theta, lay.w2, vec![h, v])?;
    let b2 = graph.slice(theta, lay.b2, vec![v])?;
    let rows = graph.gather_rows(emb, contexts)?;
    let x = graph.reshape(rows, vec![n, k * d])?;
    let pre = graph.matmul(x, w1)?;
    let pre = graph.add_bias(pre, b1)?;
    let hid = graph.tanh(pre)?;
    let out = graph.matmul(hid, w2)?;
    Ok(graph.add_bias(out, b2)?)
}

/// Which tokens may appear at each response position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResponseGrammar {
    /// Any non-BOS token; stops at EOS or after `max_len` tokens.
    Free { max_len: usize },
    /// Exactly `content_len` content tokens, then a forced EOS.
    Fixed { content_len: usize },
}

impl ResponseGrammar {
    pub fn max_len(&self) -> usize {
        match *self {
            ResponseGrammar::Free { max_len } => max_len,
            ResponseGrammar::Fixed { content_len } => content_len + 1,
        }
    }

    pub fn allows(&self, vocab: &Vocab, position: usize, token: usize) -> bool {
        match *self {
            ResponseGrammar::Free { .. } => token != vocab.bos() && token < vocab.size(),
            ResponseGrammar::Fixed { content_len } => {
                if position < content_len {
                    vocab.is_content(token)
                } else {
                    token == vocab.eos()
                }
            }
        }
    }

    /// Additive mask row: 0 for allowed tokens, [`MASK_LOGIT`] otherwise.
    pub fn mask_row(&self, vocab: &Vocab, position: usize) -> Vec<f64> {
        (0..vocab.size())
            .map(|t| {
                if self.allows(vocab, position, t) {
                    0.0
                } else {
                    MASK_LOGIT
                }
            })
            .collect()
    }

    /// True when the grammar leaves exactly one admissible token.
    pub fn is_forced(&self, vocab: &Vocab, position: usize) -> bool {
        (0..vocab.size())
            .filter(|&t| self.allows(vocab, position, t))
            .count()
            == 1
    }
}

/// One generated response with the sampling policy's log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledResponse {
    pub tokens: Vec<usize>,
    pub old_logprobs: Vec<f64>,
    /// Next-token entropy at each position under the sampling policy.
    pub entropies: Vec<f64>,
    /// Positions where the grammar left a real choice.
    pub free: Vec<bool>,
}

impl SampledResponse {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Last `window` tokens of `prompt ++ response[..upto]`, left-padded with BOS.
pub fn context_at(
    vocab: &Vocab,
    window: usize,
    prompt: &[usize],
    response: &[usize],
    upto: usize,
) -> Vec<usize> {
    let total = prompt.len() + upto;
    let mut ctx = Vec::with_capacity(window);
    for i in 0..window {
        // position in the concatenated stream, counted back from `total`
        let back = window - i;
        if back > total {
            ctx.push(vocab.bos());
        } else {
            let pos = total - back;
            ctx.push(if pos < prompt.len() {
                prompt[pos]
            } else {
                response[pos - prompt.len()]
            });
        }
    }
    ctx
}

fn masked_logprobs(params: &PolicyParams, ctx: &[usize], mask: &[f64], temperature: f64) -> Result<Vec<f64>> {
    let logits = params.logits(ctx)?;
    let masked: Vec<f64> = logits.iter().zip(mask).map(|(l, m)| l + m).collect();
    Ok(autodiff::log_softmax_row(&masked, temperature))
}

fn entropy_of(logprobs: &[f64]) -> f64 {
    let mut h = 0.0;
    for &lp in logprobs {
        let p = lp.exp();
        if p > 0.0 {
            h -= p * lp;
        }
    }
    h.max(0.0)
}

/// Autoregressive categorical sampling.
pub fn sample_sequence<R: Rng + ?Sized>(
    params: &PolicyParams,
    prompt: &[usize],
    grammar: ResponseGrammar,
    temperature: f64,
    rng: &mut R,
) -> Result<SampledResponse> {
    if !(temperature > 0.0) {
        return Err(PolicyError::Shape(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let vocab = params.vocab();
    let max_len = grammar.max_len();
    if max_len == 0 {
        return Err(PolicyError::Shape("max_len must be at least 1".into()));
    }
    let mut out = SampledResponse {
        tokens: Vec::new(),
        old_logprobs: Vec::new(),
        entropies: Vec::new(),
        free: Vec::new(),
    };
    for pos in 0..max_len {
        let ctx = context_at(&vocab, params.shape.window, prompt, &out.tokens, pos);
        let lp = masked_logprobs(params, &ctx, &grammar.mask_row(&vocab, pos), temperature)?;
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut choice = None;
        let mut last_allowed = 0;
        for (t, &l) in lp.iter().enumerate() {
            if !grammar.allows(&vocab, pos, t) {
                continue;
            }
            last_allowed = t;
            acc += l.exp();
            if u < acc {
                choice = Some(t);
                break;
            }
        }
        let tok = choice.unwrap_or(last_allowed);
        out.tokens.push(tok);
        out.old_logprobs.push(lp[tok]);
        out.entropies.push(entropy_of(&lp));
        out.free.push(!grammar.is_forced(&vocab, pos));
        if tok == vocab.eos() {
            break;
        }
    }
    Ok(out)
}

/// Highest-probability response; evaluation utilities only.
pub fn greedy_sequence(
    params: &PolicyParams,
    prompt: &[usize],
    grammar: ResponseGrammar,
) -> Result<Vec<usize>> {
    let vocab = params.vocab();
    let mut tokens = Vec::new();
    for pos in 0..grammar.max_len() {
        let ctx = context_at(&vocab, params.shape.window, prompt, &tokens, pos);
        let lp = masked_logprobs(params, &ctx, &grammar.mask_row(&vocab, pos), 1.0)?;
        let mut best = None;
        for (t, &l) in lp.iter().enumerate() {
            if grammar.allows(&vocab, pos, t) && best.is_none_or(|(_, b)| l > b) {
                best = Some((t, l));
            }
        }
        let (tok, _) = best.ok_or_else(|| PolicyError::Response("grammar admits no token".into()))?;
        tokens.push(tok);
        if tok == vocab.eos() {
            break;
        }
    }
    Ok(tokens)
}

/// Per-position model inputs for a batch of (prompt, response) pairs.
#[derive(Debug, Clone, Default)]
pub struct ScoringInputs {
    pub contexts: Vec<usize>,
    pub targets: Vec<usize>,
    pub masks: Vec<f64>,
}

impl ScoringInputs {
    pub fn push_response(
        &mut self,
        shape: &PolicyShape,
        prompt: &[usize],
        tokens: &[usize],
        grammar: ResponseGrammar,
    ) -> Result<()> {
        let vocab = shape.vocab;
        if tokens.len() > grammar.max_len() {
            return Err(PolicyError::Response(format!(
                "response of {} tokens exceeds grammar limit {}",
                tokens.len(),
                grammar.max_len()
            )));
        }
        for (pos, &tok) in tokens.iter().enumerate() {
            if !grammar.allows(&vocab, pos, tok) {
                return Err(PolicyError::Response(format!(
                    "token {tok} not admissible at position {pos}"
                )));
            }
            self.contexts
                .extend(context_at(&vocab, shape.window, prompt, tokens, pos));
            self.targets.push(tok);
            self.masks.extend(grammar.mask_row(&vocab, pos));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

/// Differentiable per-token `log π(o_t | q, o_<t)` for every scored position.
pub fn record_logprobs(
    graph: &mut Graph,
    shape: &PolicyShape,
    theta: NodeId,
    inputs: &ScoringInputs,
    temperature: f64,
) -> Result<NodeId> {
    let v = shape.vocab.size();
    let logits = forward_logits(graph, shape, theta, &inputs.contexts)?;
    let mask = graph.constant(Tensor::matrix(inputs.len(), v, inputs.masks.clone())?);
    let masked = graph.add(logits, mask)?;
    let lp = graph.log_softmax(masked, temperature)?;
    Ok(graph.pick(lp, &inputs.targets)?)
}

/// Per-token log-probabilities of `tokens` under `params` (no recording).
pub fn sequence_logprobs(
    params: &PolicyParams,
    prompt: &[usize],
    tokens: &[usize],
    grammar: ResponseGrammar,
) -> Result<Vec<f64>> {
    let mut inputs = ScoringInputs::default();
    inputs.push_response(&params.shape, prompt, tokens, grammar)?;
    score_inputs(params, &inputs)
}

/// Non-recorded log-probabilities for prepared inputs.
pub fn score_inputs(params: &PolicyParams, inputs: &ScoringInputs) -> Result<Vec<f64>> {
    let v = params.vocab().size();
    let k = params.shape.window;
    (0..inputs.len())
        .map(|i| {
            let lp = masked_logprobs(
                params,
                &inputs.contexts[i * k..(i + 1) * k],
                &inputs.masks[i * v..(i + 1) * v],
                1.0,
            )?;
            Ok(lp[inputs.targets[i]])
        })
        .collect()
}

/// Average next-token entropy over the free positions of `responses`.
pub fn mean_token_entropy(responses: &[&SampledResponse]) -> Result<f64> {
    if responses.is_empty() {
        return Err(PolicyError::Response("entropy of an empty batch".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for r in responses {
        for (h, &free) in r.entropies.iter().zip(&r.free) {
            if free {
                total += h;
                count += 1;
            }
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Recomputes per-position entropies of `tokens` under `params`.
pub fn position_entropies(
    params: &PolicyParams,
    prompt: &[usize],
    tokens: &[usize],
    grammar: ResponseGrammar,
) -> Result<Vec<f64>> {
    let vocab = params.vocab();
    (0..tokens.len())
        .map(|pos| {
            let ctx = context_at(&vocab, params.shape.window, prompt, tokens, pos);
            let lp = masked_logprobs(params, &ctx, &grammar.mask_row(&vocab, pos), 1.0)?;
            Ok(entropy_of(&lp))
        })
        .collect()
}
