//! Step records, CSV output, SVG plots, checkpoints and the flat config format.

mod checkpoint;
mod config;
mod plot;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, LoadedCheckpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{
    apply_override, config_digest, parse_config, parse_config_onto, render_config, CONFIG_KEYS,
};
pub use plot::{render_lineplot, render_svg, Series};

use std::fmt::Write as _;
use std::path::Path;

use crate::trainer::EvalReport;

#[derive(Debug, thiserror::Error)]
pub enum MetricsIoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint config digest does not match the current config")]
    DigestMismatch,
    #[error("line {line}: {message}")]
    ConfigLine { line: usize, message: String },
    #[error("config: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, MetricsIoError>;

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub total: f64,
    pub surrogate: f64,
    pub kl: f64,
    pub entropy: f64,
    pub clip_frac: f64,
    /// Elastic strategies only.
    pub mean_eps: Option<f64>,
    pub resp_len: f64,
    pub pass_rate: f64,
    pub eval: Option<EvalReport>,
}

/// Append-only, step-ordered record of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    labels: Vec<String>,
    eval_n: usize,
    rows: Vec<StepMetrics>,
}

impl MetricsLog {
    /// `labels` name the per-entry eval columns.
    pub fn new(labels: Vec<String>, eval_n: usize) -> Self {
        Self {
            labels,
            eval_n,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: StepMetrics) {
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[StepMetrics] {
        &self.rows
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn columns(&self) -> Vec<String> {
        let mut cols: Vec<String> = BASE_COLUMNS.iter().map(|s| s.to_string()).collect();
        let n = self.eval_n;
        cols.push(format!("mean@{n}"));
        cols.push(format!("best@{n}"));
        for l in &self.labels {
            cols.push(format!("mean@{n}_{l}"));
            cols.push(format!("best@{n}_{l}"));
        }
        cols
    }

    /// The most recent row carrying evaluation results.
    pub fn last_eval(&self) -> Option<&EvalReport> {
        self.rows.iter().rev().find_map(|r| r.eval.as_ref())
    }
}

pub const BASE_COLUMNS: [&str; 9] = [
    "step",
    "total",
    "surrogate",
    "kl",
    "entropy",
    "clip_frac",
    "mean_eps",
    "resp_len",
    "pass_rate",
];

/// Nine significant digits. Fixed notation for moderate magnitudes, scientific otherwise.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.8e}");
    let exp: i32 = sci[sci.find('e').unwrap_or(0) + 1..].parse().unwrap_or(0);
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp) as usize;
        format!("{x:.decimals$}")
    } else {
        sci
    }
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(format_sig9).unwrap_or_default()
}

pub fn render_metrics_csv(log: &MetricsLog) -> Result<String> {
    if log.rows.is_empty() {
        return Err(MetricsIoError::Contract("metrics log is empty".into()));
    }
    let mut out = log.columns().join(",");
    out.push('\n');
    for r in &log.rows {
        let mut cells = vec![
            r.step.to_string(),
            format_sig9(r.total),
            format_sig9(r.surrogate),
            format_sig9(r.kl),
            format_sig9(r.entropy),
            format_sig9(r.clip_frac),
            opt_cell(r.mean_eps),
            format_sig9(r.resp_len),
            format_sig9(r.pass_rate),
        ];
        cells.push(opt_cell(r.eval.as_ref().map(|e| e.mean)));
        cells.push(opt_cell(r.eval.as_ref().map(|e| e.best)));
        for (i, _) in log.labels.iter().enumerate() {
            let entry = r.eval.as_ref().and_then(|e| e.entries.get(i));
            cells.push(opt_cell(entry.map(|e| e.mean)));
            cells.push(opt_cell(entry.map(|e| e.best)));
        }
        let _ = writeln!(out, "{}", cells.join(","));
    }
    Ok(out)
}

pub fn write_metrics_csv(log: &MetricsLog, path: &Path) -> Result<()> {
    let text = render_metrics_csv(log)?;
    std::fs::write(path, text)?;
    Ok(())
}
