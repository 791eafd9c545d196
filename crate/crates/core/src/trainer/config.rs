use std::fmt;
use std::str::FromStr;

use super::optimizer::AdamConfig;
use super::TrainError;
use crate::objectives::{ClipStrategy, Direction, ElasticParams};
use crate::policy::{PolicyShape, Vocab};
use crate::tasks::TaskSuite;

/// Which threshold family the run uses. The numeric parameters live on
/// [`TrainConfig`] so every family sees the same keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StrategyKind {
    Static,
    ClipHigh,
    Elastic,
}

impl StrategyKind {
    pub fn name(&self) -> &'static str {
        match self {
            StrategyKind::Static => "static",
            StrategyKind::ClipHigh => "cliphigh",
            StrategyKind::Elastic => "elastic",
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "static" => Ok(StrategyKind::Static),
            "cliphigh" => Ok(StrategyKind::ClipHigh),
            "elastic" => Ok(StrategyKind::Elastic),
            other => Err(TrainError::Config(format!("unknown strategy '{other}'"))),
        }
    }
}

/// Named baselines and ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Grpo,
    ClipHigh,
    Etr,
    EtrMicro,
    EtrMacro,
    EtrInverse,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Grpo,
        Method::ClipHigh,
        Method::Etr,
        Method::EtrMicro,
        Method::EtrMacro,
        Method::EtrInverse,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Grpo => "grpo",
            Method::ClipHigh => "cliphigh",
            Method::Etr => "etr",
            Method::EtrMicro => "etr-micro",
            Method::EtrMacro => "etr-macro",
            Method::EtrInverse => "etr-inverse",
        }
    }

    /// Rewrites the strategy keys of `config`, keeping its `epsilon_*` and `lambda*` values
    /// except where the ablation zeroes one.
    pub fn apply(&self, config: &TrainConfig) -> TrainConfig {
        let mut c = config.clone();
        match self {
            Method::Grpo => c.strategy = StrategyKind::Static,
            Method::ClipHigh => c.strategy = StrategyKind::ClipHigh,
            Method::Etr => {
                c.strategy = StrategyKind::Elastic;
                c.direction = Direction::Standard;
            }
            Method::EtrMicro => {
                c.strategy = StrategyKind::Elastic;
                c.direction = Direction::Standard;
                c.lambda2 = 0.0;
            }
            Method::EtrMacro => {
                c.strategy = StrategyKind::Elastic;
                c.direction = Direction::Standard;
                c.lambda1 = 0.0;
            }
            Method::EtrInverse => {
                c.strategy = StrategyKind::Elastic;
                c.direction = Direction::Inverse;
            }
        }
        c
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| TrainError::Config(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: usize,
    pub groups_per_step: usize,
    pub group_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub kl_coef: f64,
    pub inner_epochs: usize,
    pub strategy: StrategyKind,
    /// Static ε, the low side for clip-higher, and ε_base for elastic.
    pub epsilon_base: f64,
    pub epsilon_high: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub direction: Direction,
    pub xi: f64,
    pub suite: TaskSuite,
    pub max_response_len: usize,
    pub eval_every: usize,
    pub eval_n: usize,
    pub eval_prompts: usize,
    pub init_scale: f64,
    pub context_window: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            steps: 300,
            groups_per_step: 16,
            group_size: 8,
            learning_rate: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            kl_coef: 0.001,
            inner_epochs: 2,
            strategy: StrategyKind::Elastic,
            epsilon_base: 0.2,
            epsilon_high: 0.28,
            lambda1: 0.1,
            lambda2: 0.1,
            direction: Direction::Standard,
            xi: 1e-6,
            suite: TaskSuite::mixed(),
            max_response_len: 8,
            eval_every: 50,
            eval_n: 32,
            eval_prompts: 64,
            init_scale: 0.1,
            context_window: 4,
            embed_dim: 16,
            hidden_dim: 64,
        }
    }
}

impl TrainConfig {
    pub fn strategy(&self) -> ClipStrategy {
        match self.strategy {
            StrategyKind::Static => ClipStrategy::Static {
                epsilon: self.epsilon_base,
            },
            StrategyKind::ClipHigh => ClipStrategy::ClipHigh {
                low: self.epsilon_base,
                high: self.epsilon_high,
            },
            StrategyKind::Elastic => ClipStrategy::Elastic(ElasticParams {
                base: self.epsilon_base,
                lambda1: self.lambda1,
                lambda2: self.lambda2,
                direction: self.direction,
            }),
        }
    }

    pub fn policy_shape(&self) -> PolicyShape {
        PolicyShape {
            vocab: Vocab::digits(),
            window: self.context_window,
            embed: self.embed_dim,
            hidden: self.hidden_dim,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Checks every invariant. The message names the offending key.
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |msg: String| Err(TrainError::Config(msg));
        let finite_non_negative = |key: &str, v: f64| -> Result<(), TrainError> {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(TrainError::Config(format!("{key} = {v} must be finite and >= 0")))
            }
        };
        let positive = |key: &str, v: f64| -> Result<(), TrainError> {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(TrainError::Config(format!("{key} = {v} must be finite and > 0")))
            }
        };
        if self.steps == 0 {
            return fail("steps must be >= 1".into());
        }
        if self.groups_per_step == 0 {
            return fail("groups_per_step must be >= 1".into());
        }
        if self.group_size < 2 {
            return fail(format!("group_size = {} must be >= 2", self.group_size));
        }
        if self.inner_epochs == 0 {
            return fail("inner_epochs must be >= 1".into());
        }
        positive("learning_rate", self.learning_rate)?;
        for (key, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return fail(format!("{key} = {v} must lie in [0, 1)"));
            }
        }
        positive("adam_eps", self.adam_eps)?;
        finite_non_negative("weight_decay", self.weight_decay)?;
        positive("grad_clip", self.grad_clip)?;
        finite_non_negative("kl_coef", self.kl_coef)?;
        positive("xi", self.xi)?;
        finite_non_negative("epsilon_high", self.epsilon_high)?;
        self.strategy()
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        // the elastic keys are checked even when unused so a config stays valid across methods
        finite_non_negative("lambda1", self.lambda1)?;
        finite_non_negative("lambda2", self.lambda2)?;
        if !(self.epsilon_base - self.lambda1 > 0.0) {
            return fail(format!(
                "epsilon_base - lambda1 = {} must be > 0 or the band can invert",
                self.epsilon_base - self.lambda1
            ));
        }
        if self.eval_n == 0 {
            return fail("eval_n must be >= 1".into());
        }
        if self.eval_prompts == 0 {
            return fail("eval_prompts must be >= 1".into());
        }
        finite_non_negative("init_scale", self.init_scale)?;
        self.policy_shape()
            .validate()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        let needed = self.suite.max_content_len() + 1;
        if self.max_response_len < needed {
            return fail(format!(
                "max_response_len = {} cannot fit the suite's longest response ({needed} tokens)",
                self.max_response_len
            ));
        }
        Ok(())
    }
}
