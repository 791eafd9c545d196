//! Rollout → group statistics → advantages → thresholds → objective → update.

mod config;
mod eval;
mod optimizer;

pub use config::{Method, StrategyKind, TrainConfig};
pub use eval::{eval_prompts, evaluate, exact_success_probability, EvalEntry, EvalReport};
pub use optimizer::{clip_grad_norm, AdamConfig, AdamW, OptimizerState};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::advantage::{GroupStats, RolloutGroup};
use crate::metrics_io::{MetricsLog, StepMetrics};
use crate::objectives::{self, ScoredGroup, TokenBatch};
use crate::policy::{self, PolicyParams, SampledResponse};
use crate::tasks::{self, TaskSuite};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite {what} at step {step}, epoch {epoch}\n{dump}")]
    NonFinite {
        what: &'static str,
        step: usize,
        epoch: usize,
        dump: String,
    },
    #[error(transparent)]
    Objective(#[from] objectives::ObjectiveError),
    #[error(transparent)]
    Policy(#[from] policy::PolicyError),
    #[error(transparent)]
    Task(#[from] tasks::TaskError),
    #[error(transparent)]
    Advantage(#[from] crate::advantage::AdvantageError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream keyed by `(seed, a, b)`.
pub fn stream_seed(seed: u64, a: u64, b: u64) -> u64 {
    mix(mix(mix(seed) ^ a) ^ b.rotate_left(32))
}

/// Samples one group for a prompt and scores it against the reference policy.
pub fn rollout_group(
    policy: &PolicyParams,
    reference: &PolicyParams,
    prompt: tasks::Prompt,
    group_size: usize,
    xi: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ScoredGroup> {
    let vocab = policy.vocab();
    let grammar = prompt.grammar();
    let mut responses: Vec<SampledResponse> = Vec::with_capacity(group_size);
    let mut rewards = Vec::with_capacity(group_size);
    for _ in 0..group_size {
        let r = policy::sample_sequence(policy, &prompt.tokens, grammar, 1.0, rng)?;
        rewards.push(tasks::reward(tasks::verify(&prompt, &r.tokens, &vocab)));
        responses.push(r);
    }
    let refs = responses
        .iter()
        .map(|r| policy::sequence_logprobs(reference, &prompt.tokens, &r.tokens, grammar))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let stats = GroupStats::from_rewards(&rewards, xi)?;
    let group = RolloutGroup::new(prompt, responses, rewards)?;
    Ok(ScoredGroup::new(group, stats, refs)?)
}

/// `groups_per_step` groups, each on its own stream `(seed, step, group)`.
pub fn rollout_batch(
    policy: &PolicyParams,
    reference: &PolicyParams,
    suite: &TaskSuite,
    config: &TrainConfig,
    step: usize,
) -> Result<Vec<ScoredGroup>> {
    let vocab = policy.vocab();
    (0..config.groups_per_step)
        .into_par_iter()
        .map(|gi| {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, step as u64, gi as u64));
            let spec = suite.pick(&mut rng);
            let prompt = tasks::generate_prompt(spec, &vocab, &mut rng)?;
            rollout_group(policy, reference, prompt, config.group_size, config.xi, &mut rng)
        })
        .collect()
}

fn describe_group(index: usize, g: &ScoredGroup) -> String {
    let mut s = format!(
        "group {index}: prompt {:?}, rewards {:?}, advantages {:?}, pass rate {}\n",
        g.group.prompt.tokens, g.group.rewards, g.stats.advantages, g.stats.pass_rate
    );
    for (i, r) in g.group.responses.iter().enumerate() {
        s.push_str(&format!(
            "  response {i}: tokens {:?} old {:?} ref {:?}\n",
            r.tokens, r.old_logprobs, g.ref_logprobs[i]
        ));
    }
    s
}

fn non_finite_dump(batch: &[ScoredGroup], tokens: &TokenBatch, ratios: &[f64]) -> String {
    let offender = ratios
        .iter()
        .position(|r| !r.is_finite())
        .map(|i| tokens.owners[i].0)
        .unwrap_or(0);
    describe_group(offender, &batch[offender])
}

/// Batch-level quantities that do not depend on the update.
fn rollout_summary(batch: &[ScoredGroup]) -> (f64, f64, f64) {
    let responses: Vec<&SampledResponse> = batch.iter().flat_map(|g| g.group.responses.iter()).collect();
    let entropy = policy::mean_token_entropy(&responses).unwrap_or(0.0);
    let resp_len = responses.iter().map(|r| r.len() as f64).sum::<f64>() / responses.len().max(1) as f64;
    let pass_rate = batch.iter().map(|g| g.stats.pass_rate).sum::<f64>() / batch.len().max(1) as f64;
    (entropy, resp_len, pass_rate)
}

/// One policy update on a rollout batch, reusing it for `inner_epochs` passes.
pub fn train_step(
    policy: &mut PolicyParams,
    opt: &mut AdamW,
    batch: &[ScoredGroup],
    config: &TrainConfig,
    step: usize,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(TrainError::Config("empty rollout batch".into()));
    }
    let strategy = config.strategy();
    let tokens = TokenBatch::new(batch, policy.shape(), &strategy)?;
    let (entropy, resp_len, pass_rate) = rollout_summary(batch);
    let epochs = config.inner_epochs;
    let (mut total, mut surrogate, mut kl) = (0.0, 0.0, 0.0);
    let (mut clipped, mut counted) = (0usize, 0usize);
    let mut mean_eps = None;
    for epoch in 0..epochs {
        let eval = objectives::batch_objective(policy, &tokens, config.kl_coef)?;
        let b = &eval.breakdown;
        if !b.total.is_finite() || eval.gradient.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::NonFinite {
                what: "objective",
                step,
                epoch,
                dump: non_finite_dump(batch, &tokens, &eval.ratios),
            });
        }
        total += b.total;
        surrogate += b.surrogate;
        kl += b.kl;
        clipped += b.clipped_tokens;
        counted += b.total_tokens;
        mean_eps = b.mean_epsilon();
        let mut loss_grad: Vec<f64> = eval.gradient.iter().map(|g| -g).collect();
        clip_grad_norm(&mut loss_grad, config.grad_clip);
        opt.step(policy.values_mut(), &loss_grad);
        if !policy.is_finite() {
            return Err(TrainError::NonFinite {
                what: "parameters",
                step,
                epoch,
                dump: non_finite_dump(batch, &tokens, &eval.ratios),
            });
        }
    }
    let e = epochs as f64;
    Ok(StepMetrics {
        step,
        total: total / e,
        surrogate: surrogate / e,
        kl: kl / e,
        entropy,
        clip_frac: if counted == 0 {
            0.0
        } else {
            clipped as f64 / counted as f64
        },
        mean_eps,
        resp_len,
        pass_rate,
        eval: None,
    })
}

/// Result of [`run_training`].
#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub log: MetricsLog,
    pub params: PolicyParams,
    pub optimizer: AdamW,
}

pub fn run_training(config: &TrainConfig) -> Result<TrainingOutcome> {
    run_training_observed(config, |_| {})
}

/// [`run_training`] with a callback after every recorded step.
pub fn run_training_observed<F>(config: &TrainConfig, mut observe: F) -> Result<TrainingOutcome>
where
    F: FnMut(&StepMetrics),
{
    config.validate()?;
    let shape = config.policy_shape();
    let mut params = PolicyParams::init(shape, config.seed, config.init_scale)?;
    let reference = params.clone();
    let mut opt = AdamW::new(config.adam(), params.len());
    let eval_set = eval_prompts(
        &config.suite,
        &shape.vocab,
        config.eval_prompts,
        stream_seed(config.seed, u64::MAX, 0),
    )?;
    let mut log = MetricsLog::new(
        config.suite.specs().iter().map(|s| s.label()).collect(),
        config.eval_n,
    );
    for step in 0..config.steps {
        let batch = rollout_batch(&params, &reference, &config.suite, config, step)?;
        let mut metrics = train_step(&mut params, &mut opt, &batch, config, step)?;
        let last = step + 1 == config.steps;
        if last || (config.eval_every > 0 && (step + 1) % config.eval_every == 0) {
            let seed = stream_seed(config.seed, u64::MAX - 1, step as u64);
            metrics.eval = Some(evaluate(&params, &config.suite, &eval_set, config.eval_n, seed)?);
        }
        observe(&metrics);
        log.push(metrics);
    }
    Ok(TrainingOutcome {
        log,
        params,
        optimizer: opt,
    })
}
