//! Static-threshold mismatch diagnostics. No gradients.
//!
//! Micro mismatch uses the local optimum `|r* − 1| = |A|/β` (unit
//! proportionality constant) and flags tokens whose ideal step leaves the
//! static band. Macro mismatch reports how widely the pass-indicator
//! variance `p(1 − p)` differs across groups that all share one threshold.

use crate::advantage::GroupStats;

/// One group's statistics and per-response lengths.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSummary {
    pub stats: GroupStats,
    pub lengths: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlaggedToken {
    pub group: usize,
    pub response: usize,
    pub token: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MismatchReport {
    pub flagged: Vec<FlaggedToken>,
    pub total_tokens: usize,
    pub min_variance: f64,
    pub max_variance: f64,
}

impl MismatchReport {
    pub fn micro_mismatches(&self) -> usize {
        self.flagged.len()
    }

    /// `max − min` of `p(1 − p)` across groups.
    pub fn macro_spread(&self) -> f64 {
        self.max_variance - self.min_variance
    }
}

pub fn static_mismatch_report(groups: &[GroupSummary], epsilon: f64, beta: f64) -> MismatchReport {
    let mut flagged = Vec::new();
    let mut total_tokens = 0;
    let mut min_variance = f64::INFINITY;
    let mut max_variance = f64::NEG_INFINITY;
    for (gi, g) in groups.iter().enumerate() {
        let var = g.stats.pass_variance();
        min_variance = min_variance.min(var);
        max_variance = max_variance.max(var);
        for (ri, (&a, &len)) in g.stats.advantages.iter().zip(&g.lengths).enumerate() {
            total_tokens += len;
            let ideal_step = a.abs() / beta;
            if ideal_step > epsilon {
                flagged.extend((0..len).map(|token| FlaggedToken {
                    group: gi,
                    response: ri,
                    token,
                }));
            }
        }
    }
    if groups.is_empty() {
        min_variance = 0.0;
        max_variance = 0.0;
    }
    MismatchReport {
        flagged,
        total_tokens,
        min_variance,
        max_variance,
    }
}
