//! Synthetic tasks with outcome-only verification.
//!
//! Prompt encodings over the digit vocabulary (`S` = separator, `E` = EOS):
//!
//! | family    | prompt                  | response                         |
//! |-----------|-------------------------|----------------------------------|
//! | DIGIT-SUM | `S × k, target`         | `k` digits summing to target mod 10 |
//! | PARITY    | `bits…, E`              | one digit equal to the XOR       |
//! | COPY      | `pattern…, S`           | the pattern                      |
//!
//! Every response is exactly the family's content length followed by EOS;
//! see [`Prompt::grammar`].

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::policy::{ResponseGrammar, Vocab};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TaskError {
    #[error("invalid task spec: {0}")]
    Spec(String),
    #[error("vocabulary needs 10 digit tokens and a separator")]
    Vocab,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskFamily {
    DigitSum,
    Parity,
    Copy,
}

impl TaskFamily {
    pub fn name(&self) -> &'static str {
        match self {
            TaskFamily::DigitSum => "digit_sum",
            TaskFamily::Parity => "parity",
            TaskFamily::Copy => "copy",
        }
    }
}

impl fmt::Display for TaskFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskFamily {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "digit_sum" | "digit-sum" => Ok(TaskFamily::DigitSum),
            "parity" => Ok(TaskFamily::Parity),
            "copy" => Ok(TaskFamily::Copy),
            other => Err(TaskError::Spec(format!("unknown task family '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskSpec {
    pub family: TaskFamily,
    pub difficulty: usize,
    pub weight: f64,
}

impl TaskSpec {
    pub fn new(family: TaskFamily, difficulty: usize, weight: f64) -> Result<Self, TaskError> {
        if difficulty == 0 {
            return Err(TaskError::Spec("difficulty must be at least 1".into()));
        }
        if !(weight >= 0.0) || !weight.is_finite() {
            return Err(TaskError::Spec(format!("weight {weight} must be non-negative")));
        }
        Ok(Self {
            family,
            difficulty,
            weight,
        })
    }

    /// Short label such as `copy_k2`.
    pub fn label(&self) -> String {
        format!("{}_k{}", self.family, self.difficulty)
    }

    /// Response content length this task demands.
    pub fn content_len(&self) -> usize {
        match self.family {
            TaskFamily::Parity => 1,
            TaskFamily::DigitSum | TaskFamily::Copy => self.difficulty,
        }
    }
}

/// Weighted mixture of task specs.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSuite {
    specs: Vec<TaskSpec>,
}

impl TaskSuite {
    pub fn new(specs: Vec<TaskSpec>) -> Result<Self, TaskError> {
        if specs.is_empty() {
            return Err(TaskError::Spec("suite is empty".into()));
        }
        let total: f64 = specs.iter().map(|s| s.weight).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(TaskError::Spec(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(Self { specs })
    }

    /// Easy, mid and hard tasks mixed evenly.
    pub fn mixed() -> Self {
        let specs = [
            (TaskFamily::Parity, 2),
            (TaskFamily::DigitSum, 1),
            (TaskFamily::DigitSum, 2),
            (TaskFamily::Copy, 2),
        ]
        .into_iter()
        .map(|(family, difficulty)| TaskSpec {
            family,
            difficulty,
            weight: 0.25,
        })
        .collect();
        Self { specs }
    }

    pub fn single(family: TaskFamily, difficulty: usize) -> Result<Self, TaskError> {
        Self::new(vec![TaskSpec::new(family, difficulty, 1.0)?])
    }

    pub fn specs(&self) -> &[TaskSpec] {
        &self.specs
    }

    pub fn max_content_len(&self) -> usize {
        self.specs.iter().map(TaskSpec::content_len).max().unwrap_or(0)
    }

    /// Draws a spec by mixture weight.
    pub fn pick<R: Rng + ?Sized>(&self, rng: &mut R) -> &TaskSpec {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for spec in &self.specs {
            acc += spec.weight;
            if u < acc {
                return spec;
            }
        }
        self.specs
            .iter()
            .rev()
            .find(|s| s.weight > 0.0)
            .unwrap_or(&self.specs[0])
    }

    /// `family:k:weight` entries joined by commas.
    pub fn render(&self) -> String {
        self.specs
            .iter()
            .map(|s| format!("{}:{}:{}", s.family, s.difficulty, s.weight))
            .collect::<Vec<_>>()
            .join(",")
    }
}

impl FromStr for TaskSuite {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut specs = Vec::new();
        for entry in s.split(',').map(str::trim).filter(|e| !e.is_empty()) {
            let parts: Vec<&str> = entry.split(':').collect();
            let [family, k, w] = parts.as_slice() else {
                return Err(TaskError::Spec(format!(
                    "entry '{entry}' is not family:difficulty:weight"
                )));
            };
            let k = k
                .parse::<usize>()
                .map_err(|_| TaskError::Spec(format!("bad difficulty in '{entry}'")))?;
            let w = w
                .parse::<f64>()
                .map_err(|_| TaskError::Spec(format!("bad weight in '{entry}'")))?;
            specs.push(TaskSpec::new(family.parse()?, k, w)?);
        }
        Self::new(specs)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    DigitSum { target: usize, length: usize },
    Parity { bits: Vec<usize> },
    Copy { pattern: Vec<usize> },
}

impl Payload {
    pub fn family(&self) -> TaskFamily {
        match self {
            Payload::DigitSum { .. } => TaskFamily::DigitSum,
            Payload::Parity { .. } => TaskFamily::Parity,
            Payload::Copy { .. } => TaskFamily::Copy,
        }
    }

    pub fn content_len(&self) -> usize {
        match self {
            Payload::DigitSum { length, .. } => *length,
            Payload::Parity { .. } => 1,
            Payload::Copy { pattern } => pattern.len(),
        }
    }

    pub fn encode(&self, vocab: &Vocab) -> Result<Vec<usize>, TaskError> {
        let sep = vocab.sep().ok_or(TaskError::Vocab)?;
        if vocab.content_tokens() < 10 {
            return Err(TaskError::Vocab);
        }
        Ok(match self {
            Payload::DigitSum { target, length } => {
                let mut t = vec![sep; *length];
                t.push(*target);
                t
            }
            Payload::Parity { bits } => {
                let mut t = bits.clone();
                t.push(vocab.eos());
                t
            }
            Payload::Copy { pattern } => {
                let mut t = pattern.clone();
                t.push(sep);
                t
            }
        })
    }

    /// Inverse of [`Payload::encode`].
    pub fn decode(tokens: &[usize], vocab: &Vocab) -> Option<Self> {
        let sep = vocab.sep()?;
        let (&last, body) = tokens.split_last()?;
        if last == vocab.eos() {
            (!body.is_empty() && body.iter().all(|&b| b < 2)).then(|| Payload::Parity { bits: body.to_vec() })
        } else if last == sep {
            (!body.is_empty() && body.iter().all(|&t| t < 10)).then(|| Payload::Copy {
                pattern: body.to_vec(),
            })
        } else if last < 10 {
            (!body.is_empty() && body.iter().all(|&t| t == sep)).then_some(Payload::DigitSum {
                target: last,
                length: body.len(),
            })
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prompt {
    pub payload: Payload,
    pub tokens: Vec<usize>,
}

impl Prompt {
    pub fn new(payload: Payload, vocab: &Vocab) -> Result<Self, TaskError> {
        let tokens = payload.encode(vocab)?;
        Ok(Self { payload, tokens })
    }

    pub fn family(&self) -> TaskFamily {
        self.payload.family()
    }

    pub fn grammar(&self) -> ResponseGrammar {
        ResponseGrammar::Fixed {
            content_len: self.payload.content_len(),
        }
    }
}

/// Uniform random instance of `spec`.
pub fn generate_prompt<R: Rng + ?Sized>(
    spec: &TaskSpec,
    vocab: &Vocab,
    rng: &mut R,
) -> Result<Prompt, TaskError> {
    let k = spec.difficulty;
    let payload = match spec.family {
        TaskFamily::DigitSum => Payload::DigitSum {
            target: rng.gen_range(0..10),
            length: k,
        },
        TaskFamily::Parity => Payload::Parity {
            bits: (0..k).map(|_| rng.gen_range(0..2)).collect(),
        },
        TaskFamily::Copy => Payload::Copy {
            pattern: (0..k).map(|_| rng.gen_range(0..10)).collect(),
        },
    };
    Prompt::new(payload, vocab)
}

/// Outcome check. Malformed responses are simply incorrect.
pub fn verify(prompt: &Prompt, response: &[usize], vocab: &Vocab) -> bool {
    let Some((&last, body)) = response.split_last() else {
        return false;
    };
    if last != vocab.eos() || body.iter().any(|&t| t >= 10) {
        return false;
    }
    match &prompt.payload {
        Payload::DigitSum { target, length } => {
            body.len() == *length && body.iter().sum::<usize>() % 10 == *target
        }
        Payload::Parity { bits } => {
            let xor = bits.iter().fold(0, |acc, &b| acc ^ b);
            body == [xor]
        }
        Payload::Copy { pattern } => body == pattern.as_slice(),
    }
}

/// +1 for correct, −1 for incorrect.
pub fn reward(correct: bool) -> f64 {
    if correct {
        1.0
    } else {
        -1.0
    }
}
