//! Numeric checks of the square-root threshold scaling and of the quadratic
//! KL approximation `−log r ≈ −(r − 1) + ½(r − 1)²`.

use super::{ObjectiveError, Result};

/// `ε_base·√ρ`, the radius allowed by a constraint weighted by `1/ρ`.
pub fn theoretical_epsilon(rho: f64, base: f64) -> Result<f64> {
    if !(rho >= 1.0) {
        return Err(ObjectiveError::Contract(format!("rho = {rho} must be >= 1")));
    }
    Ok(base * rho.sqrt())
}

/// `|−log r − (−(r − 1) + ½(r − 1)²)|`.
pub fn kl_quadratic_residual(r: f64) -> Result<f64> {
    if !(r > 0.0) {
        return Err(ObjectiveError::Contract(format!("ratio {r} must be positive")));
    }
    let x = r - 1.0;
    Ok((-x.ln_1p() - (-x + 0.5 * x * x)).abs())
}

/// Lagrange remainder bound `|r − 1|³ / (3·min(r, 1)³)`.
pub fn cubic_remainder_bound(r: f64) -> f64 {
    let x = (r - 1.0).abs();
    let m = r.min(1.0);
    x * x * x / (3.0 * m * m * m)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualRow {
    pub ratio: f64,
    pub residual: f64,
    pub bound: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LimitRow {
    pub ratio: f64,
    /// `residual / |r − 1|³`, which tends to 1/3.
    pub normalized: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RhoRow {
    pub rho: f64,
    pub epsilon: f64,
    pub scale: f64,
    pub expected_scale: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoryReport {
    pub residuals: Vec<ResidualRow>,
    pub dense_grid_ok: bool,
    pub limits: Vec<LimitRow>,
    pub rhos: Vec<RhoRow>,
}

impl TheoryReport {
    pub fn all_hold(&self) -> bool {
        self.dense_grid_ok
            && self.residuals.iter().all(|r| r.holds)
            && self.limits.iter().all(|r| r.holds)
            && self.rhos.iter().all(|r| r.holds)
    }
}

pub const RATIO_SWEEP: [f64; 6] = [0.5, 0.8, 0.9, 1.1, 1.2, 1.5];
pub const RHO_SWEEP: [f64; 4] = [1.0, 2.0, 4.0, 9.0];

/// Runs every sweep with `ε_base`.
pub fn run_theory_checks(base: f64) -> Result<TheoryReport> {
    let residual_row = |r: f64| -> Result<ResidualRow> {
        let residual = kl_quadratic_residual(r)?;
        let bound = cubic_remainder_bound(r);
        Ok(ResidualRow {
            ratio: r,
            residual,
            bound,
            holds: residual <= bound,
        })
    };
    let residuals = RATIO_SWEEP
        .iter()
        .map(|&r| residual_row(r))
        .collect::<Result<Vec<_>>>()?;

    let mut dense_grid_ok = true;
    for i in 0..=1000 {
        let r = 0.5 + i as f64 / 1000.0;
        dense_grid_ok &= residual_row(r)?.holds;
    }

    let mut limits = Vec::new();
    for exp in 1..=4 {
        let h = 10f64.powi(-exp);
        for r in [1.0 + h, 1.0 - h] {
            let x = (r - 1.0).abs();
            let normalized = kl_quadratic_residual(r)? / (x * x * x);
            // the 5% window applies once |r − 1| ≤ 1e-2
            let holds = exp < 2 || (normalized - 1.0 / 3.0).abs() <= 0.05 / 3.0;
            limits.push(LimitRow {
                ratio: r,
                normalized,
                holds,
            });
        }
    }

    let rhos = RHO_SWEEP
        .iter()
        .map(|&rho| {
            let epsilon = theoretical_epsilon(rho, base)?;
            let scale = epsilon / base;
            let expected_scale = rho.sqrt();
            let holds = (scale - expected_scale).abs() <= 1e-12
                && ((epsilon * epsilon) / (base * base) - rho).abs() <= 1e-12 * rho;
            Ok(RhoRow {
                rho,
                epsilon,
                scale,
                expected_scale,
                holds,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(TheoryReport {
        residuals,
        dense_grid_ok,
        limits,
        rhos,
    })
}
