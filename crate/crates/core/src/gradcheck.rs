//! Finite-difference verification of the full objective for every method.
//!
//! Batches are small and randomized: a random old policy samples the
//! responses, rewards are random signs with both outcomes present in every
//! group, and the current policy is a random perturbation of the old one so
//! ratios spread across the clip boundaries. Batches with a ratio within
//! [`KINK_MARGIN`] of a boundary are redrawn, since the objective has a kink
//! there and central differences straddling it are meaningless.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::advantage::{GroupStats, RolloutGroup};
use crate::autodiff::{self, Graph, Tensor};
use crate::objectives::{self, ScoredGroup, TokenBatch};
use crate::policy::{self, PolicyParams, PolicyShape};
use crate::tasks::{self, TaskSuite};
use crate::trainer::{stream_seed, Method, TrainConfig, TrainError};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const KINK_MARGIN: f64 = 1e-3;
const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckOptions {
    pub batches: usize,
    pub groups: usize,
    pub group_size: usize,
    pub shape: PolicyShape,
    pub init_scale: f64,
    pub perturbation: f64,
    pub seed: u64,
}

impl GradcheckOptions {
    /// Small batches on a reduced model so every coordinate can be differenced.
    pub fn from_config(config: &TrainConfig) -> Self {
        let mut shape = config.policy_shape();
        shape.embed = shape.embed.min(4);
        shape.hidden = shape.hidden.min(6);
        Self {
            batches: 3,
            groups: 2,
            group_size: 4,
            shape,
            init_scale: 0.5,
            perturbation: 0.15,
            seed: config.seed,
        }
    }
}

/// Worst coordinate seen for one method.
#[derive(Debug, Clone, PartialEq)]
pub struct WorstCase {
    pub batch: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantReport {
    pub method: Method,
    pub max_error: f64,
    pub worst: WorstCase,
    pub tokens: usize,
    pub clipped_tokens: usize,
    /// Every clipped token had exactly zero surrogate gradient w.r.t. its ratio.
    pub clipped_zero_grad: bool,
}

impl VariantReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_error < tolerance && self.clipped_zero_grad
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub variants: Vec<VariantReport>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.variants.iter().all(|v| v.passed(self.tolerance))
    }

    pub fn max_error(&self) -> f64 {
        self.variants.iter().map(|v| v.max_error).fold(0.0, f64::max)
    }
}

/// Old policy, current policy, reference policy and the scored groups.
#[derive(Debug, Clone)]
pub struct PerturbedBatch {
    pub old: PolicyParams,
    pub current: PolicyParams,
    pub groups: Vec<ScoredGroup>,
}

fn perturb(params: &PolicyParams, scale: f64, rng: &mut ChaCha8Rng) -> Result<PolicyParams, TrainError> {
    let values = params
        .values()
        .iter()
        .map(|v| v + scale * (2.0 * rng.gen::<f64>() - 1.0))
        .collect();
    Ok(PolicyParams::from_values(*params.shape(), values)?)
}

/// Random groups sampled from a random old policy, with random mixed rewards.
pub fn perturbed_batch(
    options: &GradcheckOptions,
    suite: &TaskSuite,
    seed: u64,
    xi: f64,
) -> Result<PerturbedBatch, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let old = PolicyParams::init(options.shape, rng.gen(), options.init_scale)?;
    let reference = perturb(&old, options.perturbation, &mut rng)?;
    let current = perturb(&old, options.perturbation, &mut rng)?;
    let vocab = old.vocab();
    let mut groups = Vec::with_capacity(options.groups);
    for _ in 0..options.groups {
        let prompt = tasks::generate_prompt(suite.pick(&mut rng), &vocab, &mut rng)?;
        let responses = (0..options.group_size)
            .map(|_| policy::sample_sequence(&old, &prompt.tokens, prompt.grammar(), 1.0, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        let mut rewards: Vec<f64> = (0..options.group_size)
            .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
            .collect();
        rewards[0] = 1.0;
        rewards[1] = -1.0;
        let refs = responses
            .iter()
            .map(|r| policy::sequence_logprobs(&reference, &prompt.tokens, &r.tokens, prompt.grammar()))
            .collect::<Result<Vec<_>, _>>()?;
        let stats = GroupStats::from_rewards(&rewards, xi)?;
        let group = RolloutGroup::new(prompt, responses, rewards)?;
        groups.push(ScoredGroup::new(group, stats, refs)?);
    }
    Ok(PerturbedBatch { old, current, groups })
}

fn near_kink(ratios: &[f64], batch: &TokenBatch) -> bool {
    ratios
        .iter()
        .zip(batch.lo.iter().zip(&batch.hi))
        .any(|(&r, (&lo, &hi))| (r - lo).abs() < KINK_MARGIN || (r - hi).abs() < KINK_MARGIN)
}

/// Checks one method on one batch. `None` when the batch sits on a kink.
fn check_batch(
    batch: &PerturbedBatch,
    method: Method,
    config: &TrainConfig,
) -> Result<Option<(autodiff::FiniteDiffReport, usize, usize, bool)>, TrainError> {
    let cfg = method.apply(config);
    let shape = *batch.current.shape();
    let tokens = TokenBatch::new(&batch.groups, &shape, &cfg.strategy())?;
    let beta = cfg.kl_coef;

    let mut graph = Graph::new();
    let theta = graph.param(Tensor::vector(batch.current.values().to_vec()));
    let nodes = objectives::record_objective(&mut graph, &shape, theta, &tokens, beta)?;
    let ratios = graph.value(nodes.ratio).data().to_vec();
    if near_kink(&ratios, &tokens) {
        return Ok(None);
    }
    let grads = graph
        .backward(nodes.surrogate)
        .map_err(objectives::ObjectiveError::from)?;
    let ratio_grad = grads
        .get(nodes.ratio)
        .map(|t| t.data().to_vec())
        .unwrap_or_default();
    let mut clipped = 0;
    let mut zero_ok = true;
    for (i, &r) in ratios.iter().enumerate() {
        let (_, is_clipped) =
            objectives::token_surrogate_value(r, tokens.advantages[i], tokens.lo[i], tokens.hi[i]);
        if is_clipped {
            clipped += 1;
            zero_ok &= ratio_grad.get(i).copied().unwrap_or(0.0) == 0.0;
        }
    }

    let report = autodiff::finite_diff_report(
        |g, th| {
            objectives::record_objective(g, &shape, th, &tokens, beta)
                .map(|n| n.total)
                .map_err(|e| autodiff::AutodiffError::Contract(e.to_string()))
        },
        batch.current.values(),
        FD_STEP,
    )
    .map_err(objectives::ObjectiveError::from)?;
    Ok(Some((report, tokens.len(), clipped, zero_ok)))
}

/// Runs every method on `options.batches` perturbed batches.
pub fn run_gradcheck(
    config: &TrainConfig,
    options: &GradcheckOptions,
) -> Result<GradcheckReport, TrainError> {
    let mut variants = Vec::with_capacity(Method::ALL.len());
    for (mi, method) in Method::ALL.into_iter().enumerate() {
        let mut v = VariantReport {
            method,
            max_error: 0.0,
            worst: WorstCase {
                batch: 0,
                index: 0,
                analytic: 0.0,
                numeric: 0.0,
            },
            tokens: 0,
            clipped_tokens: 0,
            clipped_zero_grad: true,
        };
        let mut done = 0;
        let mut attempt = 0u64;
        while done < options.batches {
            if attempt > 100 * options.batches as u64 {
                return Err(TrainError::Config(
                    "could not draw batches away from the clip boundaries".into(),
                ));
            }
            let seed = stream_seed(options.seed, mi as u64, attempt);
            attempt += 1;
            let batch = perturbed_batch(options, &config.suite, seed, config.xi)?;
            let Some((report, tokens, clipped, zero_ok)) = check_batch(&batch, method, config)? else {
                continue;
            };
            if report.max_error >= v.max_error {
                v.max_error = report.max_error;
                v.worst = WorstCase {
                    batch: done,
                    index: report.worst_index,
                    analytic: report.analytic[report.worst_index],
                    numeric: report.numeric[report.worst_index],
                };
            }
            v.tokens += tokens;
            v.clipped_tokens += clipped;
            v.clipped_zero_grad &= zero_ok;
            done += 1;
        }
        variants.push(v);
    }
    Ok(GradcheckReport {
        variants,
        tolerance: GRADCHECK_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::CORRUPT_TANH_GRAD;

    fn quick() -> (TrainConfig, GradcheckOptions) {
        let config = TrainConfig::default();
        let mut options = GradcheckOptions::from_config(&config);
        options.batches = 1;
        (config, options)
    }

    #[test]
    fn all_variants_pass() {
        let (config, options) = quick();
        let report = run_gradcheck(&config, &options).unwrap();
        assert_eq!(report.variants.len(), 6);
        assert!(report.passed(), "{report:#?}");
        assert!(report.variants.iter().any(|v| v.clipped_tokens > 0));
    }

    #[test]
    fn corrupted_tanh_derivative_is_caught() {
        let (config, options) = quick();
        CORRUPT_TANH_GRAD.with(|c| c.set(true));
        let report = run_gradcheck(&config, &options);
        CORRUPT_TANH_GRAD.with(|c| c.set(false));
        let report = report.unwrap();
        assert!(!report.passed());
        assert!(report.max_error() > 1e-2, "{}", report.max_error());
    }
}
