//! Clipped-surrogate objectives: static clipping, Clip-High, and elastic
//! trust regions.
//!
//! The elastic band is symmetric, `(1 − ε_t, 1 + ε_t)`. Its sign-dependent
//! effect comes from the min/clip construction: with `A > 0` only the upper
//! bound can bind, with `A < 0` only the lower bound can, so a larger `ε_t`
//! for positive advantages loosens the ceiling while a smaller `ε_t` for
//! negative advantages raises the floor.

pub mod diagnostics;
pub mod theory;

use std::fmt;
use std::str::FromStr;

use crate::advantage::{GroupStats, RolloutGroup};
use crate::autodiff::{self, Graph, NodeId, Tensor};
use crate::policy::{self, PolicyParams, PolicyShape, ScoringInputs};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("invalid clip strategy: {0}")]
    Strategy(String),
    #[error("empty batch or group: {0}")]
    Empty(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Policy(#[from] policy::PolicyError),
    #[error(transparent)]
    Autodiff(#[from] autodiff::AutodiffError),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    Standard,
    Inverse,
    MicroOnly,
    MacroOnly,
}

impl Direction {
    pub fn name(&self) -> &'static str {
        match self {
            Direction::Standard => "standard",
            Direction::Inverse => "inverse",
            Direction::MicroOnly => "micro-only",
            Direction::MacroOnly => "macro-only",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Direction {
    type Err = ObjectiveError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Direction::Standard),
            "inverse" => Ok(Direction::Inverse),
            "micro-only" => Ok(Direction::MicroOnly),
            "macro-only" => Ok(Direction::MacroOnly),
            other => Err(ObjectiveError::Strategy(format!("unknown direction '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElasticParams {
    pub base: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub direction: Direction,
}

impl Default for ElasticParams {
    fn default() -> Self {
        Self {
            base: 0.2,
            lambda1: 0.1,
            lambda2: 0.1,
            direction: Direction::Standard,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClipStrategy {
    Static { epsilon: f64 },
    ClipHigh { low: f64, high: f64 },
    Elastic(ElasticParams),
}

impl ClipStrategy {
    pub fn grpo() -> Self {
        ClipStrategy::Static { epsilon: 0.2 }
    }

    pub fn clip_high() -> Self {
        ClipStrategy::ClipHigh { low: 0.2, high: 0.28 }
    }

    pub fn etr() -> Self {
        ClipStrategy::Elastic(ElasticParams::default())
    }

    pub fn validate(&self) -> Result<()> {
        let non_negative = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(ObjectiveError::Strategy(format!(
                    "{name} = {v} must be finite and >= 0"
                )))
            }
        };
        match *self {
            ClipStrategy::Static { epsilon } => non_negative("epsilon", epsilon),
            ClipStrategy::ClipHigh { low, high } => {
                non_negative("epsilon_low", low)?;
                non_negative("epsilon_high", high)
            }
            ClipStrategy::Elastic(p) => {
                non_negative("epsilon_base", p.base)?;
                non_negative("lambda1", p.lambda1)?;
                non_negative("lambda2", p.lambda2)?;
                if !(p.base - p.lambda1 > 0.0) {
                    return Err(ObjectiveError::Strategy(format!(
                        "epsilon_base - lambda1 = {} must be > 0 or the band can invert",
                        p.base - p.lambda1
                    )));
                }
                Ok(())
            }
        }
    }

    pub fn is_elastic(&self) -> bool {
        matches!(self, ClipStrategy::Elastic(_))
    }
}

/// `S(A)`: `λ1·tanh(A)`, negated for the inverse direction, zero for macro-only.
pub fn micro_adjustment(advantage: f64, lambda1: f64, direction: Direction) -> f64 {
    match direction {
        Direction::Standard | Direction::MicroOnly => lambda1 * advantage.tanh(),
        Direction::Inverse => -(lambda1 * advantage.tanh()),
        Direction::MacroOnly => 0.0,
    }
}

/// `G(p)`: `λ2·4p(1 − p)`, zero for micro-only.
pub fn macro_adjustment(pass_rate: f64, lambda2: f64, direction: Direction) -> f64 {
    match direction {
        Direction::MicroOnly => 0.0,
        _ => lambda2 * 4.0 * pass_rate * (1.0 - pass_rate),
    }
}

/// `ε_t = ε_base + S(A) + G(p)`.
pub fn dynamic_epsilon(advantage: f64, pass_rate: f64, params: &ElasticParams) -> f64 {
    params.base
        + micro_adjustment(advantage, params.lambda1, params.direction)
        + macro_adjustment(pass_rate, params.lambda2, params.direction)
}

/// Ratio bounds `(lo, hi)` for a token with advantage `A` in a group with pass rate `p`.
pub fn clip_bounds(strategy: &ClipStrategy, advantage: f64, pass_rate: f64) -> (f64, f64) {
    match strategy {
        ClipStrategy::Static { epsilon } => (1.0 - epsilon, 1.0 + epsilon),
        ClipStrategy::ClipHigh { low, high } => (1.0 - low, 1.0 + high),
        ClipStrategy::Elastic(p) => {
            let eps = dynamic_epsilon(advantage, pass_rate, p);
            (1.0 - eps, 1.0 + eps)
        }
    }
}

/// Value of `min(r·A, clip(r, lo, hi)·A)` and whether the clipped branch won.
pub fn token_surrogate_value(ratio: f64, advantage: f64, lo: f64, hi: f64) -> (f64, bool) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(lo, hi) * advantage;
    if clipped < unclipped {
        (clipped, true)
    } else {
        (unclipped, false)
    }
}

/// Records the per-token surrogate on `graph`. `ratio` and the returned node
/// share shape with `advantage`, `lo` and `hi`.
pub fn token_surrogate(
    graph: &mut Graph,
    ratio: NodeId,
    advantage: &Tensor,
    lo: &Tensor,
    hi: &Tensor,
) -> Result<NodeId> {
    let adv = graph.constant(advantage.clone());
    let unclipped = graph.mul(ratio, adv)?;
    let clamped = graph.clip(ratio, lo, hi)?;
    let clipped = graph.mul(clamped, adv)?;
    Ok(graph.minimum(unclipped, clipped)?)
}

/// Per-token `u − log u − 1` with `u = π_ref/π_θ`.
pub fn kl_estimate(logp: f64, logp_ref: f64) -> f64 {
    let log_u = logp_ref - logp;
    log_u.exp() - log_u - 1.0
}

/// Records the per-token KL estimator; gradient flows through `logp` only.
pub fn kl_to_reference(graph: &mut Graph, logp: NodeId, logp_ref: &Tensor) -> Result<NodeId> {
    let reference = graph.constant(logp_ref.clone());
    let log_u = graph.sub(reference, logp)?;
    let u = graph.exp(log_u)?;
    let one = graph.constant(Tensor::scalar(1.0));
    let t = graph.sub(u, log_u)?;
    Ok(graph.sub(t, one)?)
}

/// A rollout group with its statistics and frozen reference scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredGroup {
    pub group: RolloutGroup,
    pub stats: GroupStats,
    /// `log π_ref` per response token.
    pub ref_logprobs: Vec<Vec<f64>>,
}

impl ScoredGroup {
    pub fn new(group: RolloutGroup, stats: GroupStats, ref_logprobs: Vec<Vec<f64>>) -> Result<Self> {
        if ref_logprobs.len() != group.size()
            || ref_logprobs
                .iter()
                .zip(&group.responses)
                .any(|(r, resp)| r.len() != resp.len())
        {
            return Err(ObjectiveError::Contract(
                "reference log-probs do not match the responses".into(),
            ));
        }
        if stats.advantages.len() != group.size() {
            return Err(ObjectiveError::Contract(
                "one advantage per response required".into(),
            ));
        }
        Ok(Self {
            group,
            stats,
            ref_logprobs,
        })
    }
}

/// Flattened per-token view of a batch of groups under one strategy.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub inputs: ScoringInputs,
    pub old_logprobs: Vec<f64>,
    pub ref_logprobs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub pass_rates: Vec<f64>,
    /// `1 / (groups · G · |o_i|)`.
    pub weights: Vec<f64>,
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    /// `ε_t` per token for elastic strategies.
    pub epsilons: Option<Vec<f64>>,
    /// `(group, response)` owning each token.
    pub owners: Vec<(usize, usize)>,
}

impl TokenBatch {
    pub fn new(groups: &[ScoredGroup], shape: &PolicyShape, strategy: &ClipStrategy) -> Result<Self> {
        strategy.validate()?;
        if groups.is_empty() {
            return Err(ObjectiveError::Empty("batch has no groups".into()));
        }
        let n_groups = groups.len() as f64;
        let mut b = TokenBatch {
            inputs: ScoringInputs::default(),
            old_logprobs: Vec::new(),
            ref_logprobs: Vec::new(),
            advantages: Vec::new(),
            pass_rates: Vec::new(),
            weights: Vec::new(),
            lo: Vec::new(),
            hi: Vec::new(),
            epsilons: strategy.is_elastic().then(Vec::new),
            owners: Vec::new(),
        };
        for (gi, sg) in groups.iter().enumerate() {
            let g = &sg.group;
            if g.responses.is_empty() {
                return Err(ObjectiveError::Empty(format!("group {gi} has no responses")));
            }
            let grammar = g.prompt.grammar();
            let size = g.size() as f64;
            for (ri, resp) in g.responses.iter().enumerate() {
                if resp.is_empty() {
                    return Err(ObjectiveError::Empty(format!(
                        "response {ri} of group {gi} is empty"
                    )));
                }
                b.inputs
                    .push_response(shape, &g.prompt.tokens, &resp.tokens, grammar)?;
                let adv = sg.stats.advantages[ri];
                let p = sg.stats.pass_rate;
                let (lo, hi) = clip_bounds(strategy, adv, p);
                let w = 1.0 / (n_groups * size * resp.len() as f64);
                for t in 0..resp.len() {
                    b.old_logprobs.push(resp.old_logprobs[t]);
                    b.ref_logprobs.push(sg.ref_logprobs[ri][t]);
                    b.advantages.push(adv);
                    b.pass_rates.push(p);
                    b.weights.push(w);
                    b.lo.push(lo);
                    b.hi.push(hi);
                    b.owners.push((gi, ri));
                    if let (Some(eps), ClipStrategy::Elastic(params)) = (b.epsilons.as_mut(), strategy) {
                        eps.push(dynamic_epsilon(adv, p, params));
                    }
                }
            }
        }
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

/// Objective parts. `total = surrogate − β·KL` is maximized.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub surrogate: f64,
    pub kl: f64,
    pub total: f64,
    pub clipped_tokens: usize,
    pub total_tokens: usize,
    pub epsilons: Option<Vec<f64>>,
}

impl LossBreakdown {
    pub fn clip_fraction(&self) -> f64 {
        if self.total_tokens == 0 {
            0.0
        } else {
            self.clipped_tokens as f64 / self.total_tokens as f64
        }
    }

    pub fn mean_epsilon(&self) -> Option<f64> {
        self.epsilons
            .as_ref()
            .filter(|e| !e.is_empty())
            .map(|e| e.iter().sum::<f64>() / e.len() as f64)
    }
}

/// Nodes of a recorded objective.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveNodes {
    pub logprobs: NodeId,
    pub ratio: NodeId,
    pub surrogate: NodeId,
    pub kl: NodeId,
    pub total: NodeId,
}

/// Records `J = Σ_t w_t·min(r_t A_t, clip(r_t) A_t) − β Σ_t w_t·KL_t`.
pub fn record_objective(
    graph: &mut Graph,
    shape: &PolicyShape,
    theta: NodeId,
    batch: &TokenBatch,
    beta: f64,
) -> Result<ObjectiveNodes> {
    if batch.is_empty() {
        return Err(ObjectiveError::Empty("token batch".into()));
    }
    let logprobs = policy::record_logprobs(graph, shape, theta, &batch.inputs, 1.0)?;
    let old = graph.constant(Tensor::vector(batch.old_logprobs.clone()));
    let log_ratio = graph.sub(logprobs, old)?;
    let ratio = graph.exp(log_ratio)?;
    let per_token = token_surrogate(
        graph,
        ratio,
        &Tensor::vector(batch.advantages.clone()),
        &Tensor::vector(batch.lo.clone()),
        &Tensor::vector(batch.hi.clone()),
    )?;
    let weights = graph.constant(Tensor::vector(batch.weights.clone()));
    let weighted = graph.mul(per_token, weights)?;
    let surrogate = graph.sum(weighted)?;
    let kl_tok = kl_to_reference(graph, logprobs, &Tensor::vector(batch.ref_logprobs.clone()))?;
    let kl_weighted = graph.mul(kl_tok, weights)?;
    let kl = graph.sum(kl_weighted)?;
    let beta_node = graph.constant(Tensor::scalar(beta));
    let penalty = graph.mul(kl, beta_node)?;
    let total = graph.sub(surrogate, penalty)?;
    Ok(ObjectiveNodes {
        logprobs,
        ratio,
        surrogate,
        kl,
        total,
    })
}

/// Reads the breakdown off a recorded objective.
pub fn breakdown(graph: &Graph, nodes: &ObjectiveNodes, batch: &TokenBatch) -> LossBreakdown {
    let ratios = graph.value(nodes.ratio).data();
    let clipped_tokens = (0..batch.len())
        .filter(|&i| token_surrogate_value(ratios[i], batch.advantages[i], batch.lo[i], batch.hi[i]).1)
        .count();
    let scalar = |id| graph.value(id).data()[0];
    LossBreakdown {
        surrogate: scalar(nodes.surrogate),
        kl: scalar(nodes.kl),
        total: scalar(nodes.total),
        clipped_tokens,
        total_tokens: batch.len(),
        epsilons: batch.epsilons.clone(),
    }
}

/// Objective value parts and `∂J/∂θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveEval {
    pub breakdown: LossBreakdown,
    pub gradient: Vec<f64>,
    pub ratios: Vec<f64>,
}

pub fn batch_objective(params: &PolicyParams, batch: &TokenBatch, beta: f64) -> Result<ObjectiveEval> {
    let mut graph = Graph::new();
    let theta = graph.param(Tensor::vector(params.values().to_vec()));
    let nodes = record_objective(&mut graph, params.shape(), theta, batch, beta)?;
    let grads = graph.backward(nodes.total)?;
    let gradient = grads
        .get(theta)
        .map(|t| t.data().to_vec())
        .unwrap_or_else(|| vec![0.0; params.len()]);
    Ok(ObjectiveEval {
        breakdown: breakdown(&graph, &nodes, batch),
        gradient,
        ratios: graph.value(nodes.ratio).data().to_vec(),
    })
}
