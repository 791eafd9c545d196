//! Flat `key = value` configuration with `#` comments.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use super::{MetricsIoError, Result};
use crate::trainer::TrainConfig;

/// Every accepted key, in canonical render order.
pub const CONFIG_KEYS: [&str; 28] = [
    "seed",
    "steps",
    "groups_per_step",
    "group_size",
    "learning_rate",
    "beta1",
    "beta2",
    "adam_eps",
    "weight_decay",
    "grad_clip",
    "kl_coef",
    "inner_epochs",
    "strategy",
    "epsilon_base",
    "epsilon_high",
    "lambda1",
    "lambda2",
    "direction",
    "xi",
    "suite",
    "max_response_len",
    "eval_every",
    "eval_n",
    "eval_prompts",
    "init_scale",
    "context_window",
    "embed_dim",
    "hidden_dim",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| format!("bad value '{value}' for {key}: {e}"))
}

fn set_key(c: &mut TrainConfig, key: &str, value: &str) -> std::result::Result<(), String> {
    match key {
        "seed" => c.seed = parse_value(key, value)?,
        "steps" => c.steps = parse_value(key, value)?,
        "groups_per_step" => c.groups_per_step = parse_value(key, value)?,
        "group_size" => c.group_size = parse_value(key, value)?,
        "learning_rate" => c.learning_rate = parse_value(key, value)?,
        "beta1" => c.beta1 = parse_value(key, value)?,
        "beta2" => c.beta2 = parse_value(key, value)?,
        "adam_eps" => c.adam_eps = parse_value(key, value)?,
        "weight_decay" => c.weight_decay = parse_value(key, value)?,
        "grad_clip" => c.grad_clip = parse_value(key, value)?,
        "kl_coef" => c.kl_coef = parse_value(key, value)?,
        "inner_epochs" => c.inner_epochs = parse_value(key, value)?,
        "strategy" => c.strategy = parse_value(key, value)?,
        "epsilon_base" => c.epsilon_base = parse_value(key, value)?,
        "epsilon_high" => c.epsilon_high = parse_value(key, value)?,
        "lambda1" => c.lambda1 = parse_value(key, value)?,
        "lambda2" => c.lambda2 = parse_value(key, value)?,
        "direction" => c.direction = parse_value(key, value)?,
        "xi" => c.xi = parse_value(key, value)?,
        "suite" => c.suite = parse_value(key, value)?,
        "max_response_len" => c.max_response_len = parse_value(key, value)?,
        "eval_every" => c.eval_every = parse_value(key, value)?,
        "eval_n" => c.eval_n = parse_value(key, value)?,
        "eval_prompts" => c.eval_prompts = parse_value(key, value)?,
        "init_scale" => c.init_scale = parse_value(key, value)?,
        "context_window" => c.context_window = parse_value(key, value)?,
        "embed_dim" => c.embed_dim = parse_value(key, value)?,
        "hidden_dim" => c.hidden_dim = parse_value(key, value)?,
        other => return Err(format!("unknown key '{other}'")),
    }
    Ok(())
}

fn split_entry(text: &str) -> Option<(&str, &str)> {
    let (k, v) = text.split_once('=')?;
    let (k, v) = (k.trim(), v.trim());
    (!k.is_empty() && !v.is_empty()).then_some((k, v))
}

/// Parses onto `base`, then validates. Errors name the offending line; an
/// invariant spanning several keys names the last line that set one of them.
pub fn parse_config_onto(base: TrainConfig, text: &str) -> Result<TrainConfig> {
    let mut config = base;
    let mut lines: HashMap<&str, usize> = HashMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = split_entry(content).ok_or_else(|| MetricsIoError::ConfigLine {
            line,
            message: format!("expected 'key = value', found '{content}'"),
        })?;
        if lines.contains_key(key) {
            return Err(MetricsIoError::ConfigLine {
                line,
                message: format!("duplicate key '{key}'"),
            });
        }
        set_key(&mut config, key, value).map_err(|message| MetricsIoError::ConfigLine { line, message })?;
        let canonical = CONFIG_KEYS.iter().find(|k| **k == key).copied().unwrap_or("");
        lines.insert(canonical, line);
    }
    config.validate().map_err(|e| {
        let message = e.to_string();
        let line = CONFIG_KEYS
            .iter()
            .filter(|k| mentions(&message, k))
            .filter_map(|k| lines.get(k).copied())
            .max();
        match line {
            Some(line) => MetricsIoError::ConfigLine { line, message },
            None => MetricsIoError::Config(message),
        }
    })?;
    Ok(config)
}

fn mentions(message: &str, key: &str) -> bool {
    message
        .split(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
        .any(|w| w == key)
}

/// Defaults for every omitted key.
pub fn parse_config(text: &str) -> Result<TrainConfig> {
    parse_config_onto(TrainConfig::default(), text)
}

/// Applies one `key=value` override and revalidates.
pub fn apply_override(config: &TrainConfig, entry: &str) -> Result<TrainConfig> {
    let (key, value) = split_entry(entry)
        .ok_or_else(|| MetricsIoError::Config(format!("override '{entry}' is not key=value")))?;
    let mut c = config.clone();
    set_key(&mut c, key, value).map_err(MetricsIoError::Config)?;
    c.validate().map_err(|e| MetricsIoError::Config(e.to_string()))?;
    Ok(c)
}

/// Every key in canonical order. Floats use the shortest round-tripping form.
pub fn render_config(c: &TrainConfig) -> String {
    let mut out = String::new();
    let value = |key: &str| -> String {
        match key {
            "seed" => c.seed.to_string(),
            "steps" => c.steps.to_string(),
            "groups_per_step" => c.groups_per_step.to_string(),
            "group_size" => c.group_size.to_string(),
            "learning_rate" => c.learning_rate.to_string(),
            "beta1" => c.beta1.to_string(),
            "beta2" => c.beta2.to_string(),
            "adam_eps" => c.adam_eps.to_string(),
            "weight_decay" => c.weight_decay.to_string(),
            "grad_clip" => c.grad_clip.to_string(),
            "kl_coef" => c.kl_coef.to_string(),
            "inner_epochs" => c.inner_epochs.to_string(),
            "strategy" => c.strategy.to_string(),
            "epsilon_base" => c.epsilon_base.to_string(),
            "epsilon_high" => c.epsilon_high.to_string(),
            "lambda1" => c.lambda1.to_string(),
            "lambda2" => c.lambda2.to_string(),
            "direction" => c.direction.to_string(),
            "xi" => c.xi.to_string(),
            "suite" => c.suite.render(),
            "max_response_len" => c.max_response_len.to_string(),
            "eval_every" => c.eval_every.to_string(),
            "eval_n" => c.eval_n.to_string(),
            "eval_prompts" => c.eval_prompts.to_string(),
            "init_scale" => c.init_scale.to_string(),
            "context_window" => c.context_window.to_string(),
            "embed_dim" => c.embed_dim.to_string(),
            "hidden_dim" => c.hidden_dim.to_string(),
            _ => unreachable!("key list and renderer disagree"),
        }
    };
    for key in CONFIG_KEYS {
        let _ = writeln!(out, "{key} = {}", value(key));
    }
    out
}

/// SHA-256 of [`render_config`].
pub fn config_digest(c: &TrainConfig) -> [u8; 32] {
    Sha256::digest(render_config(c).as_bytes()).into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objectives::Direction;
    use crate::trainer::StrategyKind;

    #[test]
    fn empty_file_gives_defaults() {
        let c = parse_config("").unwrap();
        assert_eq!(c, TrainConfig::default());
        assert_eq!((c.epsilon_base, c.lambda1, c.lambda2), (0.2, 0.1, 0.1));
        assert_eq!((c.kl_coef, c.group_size), (0.001, 8));
    }

    #[test]
    fn comments_and_whitespace() {
        let c = parse_config("# header\n\n  steps = 12   # trailing\nstrategy=static\ndirection = inverse\n")
            .unwrap();
        assert_eq!(c.steps, 12);
        assert_eq!(c.strategy, StrategyKind::Static);
        assert_eq!(c.direction, Direction::Inverse);
    }

    #[test]
    fn errors_name_the_line() {
        let err = parse_config("steps = 3\nlambda1 = -0.1\n").unwrap_err();
        assert!(matches!(err, MetricsIoError::ConfigLine { line: 2, .. }), "{err}");
        let err = parse_config("# c\nepsilon_base = 0.05\n").unwrap_err();
        assert!(matches!(err, MetricsIoError::ConfigLine { line: 2, .. }), "{err}");
        let err = parse_config("\n\nbogus = 1\n").unwrap_err();
        assert_eq!(err.to_string(), "line 3: unknown key 'bogus'");
        let err = parse_config("steps\n").unwrap_err();
        assert!(matches!(err, MetricsIoError::ConfigLine { line: 1, .. }));
    }

    #[test]
    fn render_parse_identity() {
        let mut c = TrainConfig::default();
        assert_eq!(parse_config(&render_config(&c)).unwrap(), c);
        c.learning_rate = 0.1 + 0.2;
        c.suite = "copy:1:0.3,parity:3:0.7".parse().unwrap();
        c.strategy = StrategyKind::ClipHigh;
        c.seed = u64::MAX;
        let text = render_config(&c);
        assert_eq!(parse_config(&text).unwrap(), c);
        assert_eq!(render_config(&parse_config(&text).unwrap()), text);
    }

    #[test]
    fn digest_tracks_content() {
        let a = TrainConfig::default();
        let b = TrainConfig { seed: 2, ..a.clone() };
        assert_eq!(config_digest(&a), config_digest(&a.clone()));
        assert_ne!(config_digest(&a), config_digest(&b));
    }

    #[test]
    fn overrides() {
        let c = apply_override(&TrainConfig::default(), "steps=1").unwrap();
        assert_eq!(c.steps, 1);
        assert!(apply_override(&c, "steps=0").is_err());
        assert!(apply_override(&c, "nokey=1").is_err());
        assert!(apply_override(&c, "steps").is_err());
    }
}
