//! Group statistics and normalized advantages.

use crate::policy::SampledResponse;
use crate::tasks::Prompt;

/// Default ξ in `(r − mean) / (std + ξ)`.
pub const DEFAULT_XI: f64 = 1e-6;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum AdvantageError {
    #[error("group needs at least 2 responses, got {0}")]
    GroupTooSmall(usize),
    #[error("{responses} responses but {rewards} rewards")]
    RewardCount { responses: usize, rewards: usize },
    #[error("xi must be positive, got {0}")]
    Xi(f64),
    #[error("empty batch")]
    Empty,
}

/// G responses to one prompt with their ±1 rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub prompt: Prompt,
    pub responses: Vec<SampledResponse>,
    pub rewards: Vec<f64>,
}

impl RolloutGroup {
    pub fn new(
        prompt: Prompt,
        responses: Vec<SampledResponse>,
        rewards: Vec<f64>,
    ) -> Result<Self, AdvantageError> {
        if responses.len() < 2 {
            return Err(AdvantageError::GroupTooSmall(responses.len()));
        }
        if responses.len() != rewards.len() {
            return Err(AdvantageError::RewardCount {
                responses: responses.len(),
                rewards: rewards.len(),
            });
        }
        Ok(Self {
            prompt,
            responses,
            rewards,
        })
    }

    pub fn size(&self) -> usize {
        self.responses.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupStats {
    pub mean: f64,
    pub std: f64,
    pub pass_rate: f64,
    pub advantages: Vec<f64>,
}

impl GroupStats {
    pub fn from_rewards(rewards: &[f64], xi: f64) -> Result<Self, AdvantageError> {
        if rewards.is_empty() {
            return Err(AdvantageError::Empty);
        }
        let (mean, std) = mean_std(rewards);
        Ok(Self {
            mean,
            std,
            pass_rate: pass_rate(rewards)?,
            advantages: normalize_advantages(rewards, xi)?,
        })
    }

    /// Bernoulli variance `p(1 − p)` of the pass indicator.
    pub fn pass_variance(&self) -> f64 {
        self.pass_rate * (1.0 - self.pass_rate)
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Fraction of strictly positive rewards.
pub fn pass_rate(rewards: &[f64]) -> Result<f64, AdvantageError> {
    if rewards.is_empty() {
        return Err(AdvantageError::Empty);
    }
    let hits = rewards.iter().filter(|&&r| r > 0.0).count();
    Ok(hits as f64 / rewards.len() as f64)
}

/// `(r_i − mean) / (std + ξ)` with the population standard deviation.
pub fn normalize_advantages(rewards: &[f64], xi: f64) -> Result<Vec<f64>, AdvantageError> {
    if !(xi > 0.0) {
        return Err(AdvantageError::Xi(xi));
    }
    if rewards.is_empty() {
        return Err(AdvantageError::Empty);
    }
    let (mean, std) = mean_std(rewards);
    Ok(rewards.iter().map(|r| (r - mean) / (std + xi)).collect())
}

/// Every token of response `i` carries `A_i`.
pub fn broadcast_advantage(stats: &GroupStats, lengths: &[usize]) -> Result<Vec<Vec<f64>>, AdvantageError> {
    if lengths.is_empty() {
        return Err(AdvantageError::Empty);
    }
    if lengths.len() != stats.advantages.len() {
        return Err(AdvantageError::RewardCount {
            responses: lengths.len(),
            rewards: stats.advantages.len(),
        });
    }
    Ok(stats
        .advantages
        .iter()
        .zip(lengths)
        .map(|(&a, &len)| vec![a; len])
        .collect())
}
