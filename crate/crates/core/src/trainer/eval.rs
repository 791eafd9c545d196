//! Mean@N and Best@N over a fixed prompt set.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{stream_seed, Result, TrainError};
use crate::policy::{self, context_at, PolicyParams, ResponseGrammar, Vocab};
use crate::tasks::{self, Prompt, TaskSuite};

/// `count` prompts per suite entry, in suite order.
pub fn eval_prompts(suite: &TaskSuite, vocab: &Vocab, count: usize, seed: u64) -> Result<Vec<Vec<Prompt>>> {
    suite
        .specs()
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, i as u64, 0));
            (0..count)
                .map(|_| Ok(tasks::generate_prompt(spec, vocab, &mut rng)?))
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalEntry {
    pub label: String,
    pub mean: f64,
    pub best: f64,
}

/// Per-entry results and their suite-weighted averages.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub entries: Vec<EvalEntry>,
    pub mean: f64,
    pub best: f64,
}

/// Draws `n` samples at temperature 1 for every prompt in `prompts`.
pub fn evaluate(
    params: &PolicyParams,
    suite: &TaskSuite,
    prompts: &[Vec<Prompt>],
    n: usize,
    seed: u64,
) -> Result<EvalReport> {
    if n == 0 {
        return Err(TrainError::Config("evaluation needs N >= 1".into()));
    }
    if prompts.len() != suite.specs().len() {
        return Err(TrainError::Config(format!(
            "{} prompt sets for {} suite entries",
            prompts.len(),
            suite.specs().len()
        )));
    }
    let vocab = params.vocab();
    let mut entries = Vec::with_capacity(prompts.len());
    let (mut mean, mut best) = (0.0, 0.0);
    for (ei, (spec, set)) in suite.specs().iter().zip(prompts).enumerate() {
        if set.is_empty() {
            return Err(TrainError::Config(format!(
                "no eval prompts for {}",
                spec.label()
            )));
        }
        let counts = set
            .par_iter()
            .enumerate()
            .map(|(pi, prompt)| {
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, ei as u64, pi as u64));
                let mut correct = 0usize;
                for _ in 0..n {
                    let r = policy::sample_sequence(params, &prompt.tokens, prompt.grammar(), 1.0, &mut rng)?;
                    correct += usize::from(tasks::verify(prompt, &r.tokens, &vocab));
                }
                Ok(correct)
            })
            .collect::<Result<Vec<usize>>>()?;
        let total: usize = counts.iter().sum();
        let e = EvalEntry {
            label: spec.label(),
            mean: total as f64 / (n * set.len()) as f64,
            best: counts.iter().filter(|&&c| c > 0).count() as f64 / set.len() as f64,
        };
        mean += spec.weight * e.mean;
        best += spec.weight * e.best;
        entries.push(e);
    }
    Ok(EvalReport { entries, mean, best })
}

/// Probability that one temperature-1 sample for `prompt` verifies, by
/// enumerating every admissible response. Cost grows as `10^k`.
pub fn exact_success_probability(params: &PolicyParams, prompt: &Prompt) -> Result<f64> {
    let vocab = params.vocab();
    let grammar = prompt.grammar();
    let mut prefix = Vec::with_capacity(grammar.max_len());
    enumerate(params, prompt, &vocab, grammar, &mut prefix, 0.0)
}

fn enumerate(
    params: &PolicyParams,
    prompt: &Prompt,
    vocab: &Vocab,
    grammar: ResponseGrammar,
    prefix: &mut Vec<usize>,
    logp: f64,
) -> Result<f64> {
    let pos = prefix.len();
    let ctx = context_at(vocab, params.shape().window, &prompt.tokens, prefix, pos);
    let logits = params.logits(&ctx)?;
    let masked: Vec<f64> = logits
        .iter()
        .zip(grammar.mask_row(vocab, pos))
        .map(|(l, m)| l + m)
        .collect();
    let lp = crate::autodiff::log_softmax_row(&masked, 1.0);
    let mut total = 0.0;
    for tok in (0..vocab.size()).filter(|&t| grammar.allows(vocab, pos, t)) {
        let next = logp + lp[tok];
        prefix.push(tok);
        if tok == vocab.eos() || prefix.len() == grammar.max_len() {
            if tasks::verify(prompt, prefix, vocab) {
                total += next.exp();
            }
        } else {
            total += enumerate(params, prompt, vocab, grammar, prefix, next)?;
        }
        prefix.pop();
    }
    Ok(total)
}
