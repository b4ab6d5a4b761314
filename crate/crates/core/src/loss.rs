//! Loss families and the empirical index estimators used in simulations.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    Median,
    Quantile { tau: f64 },
    /// Levels `tau_j = j / (levels + 1)`, one free intercept per level.
    CompositeQuantile { levels: usize },
    Expectile { tau: f64 },
    LeastSquares,
}

impl LossKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LossKind::Quantile { tau } | LossKind::Expectile { tau } => {
                if !(tau > 0.0 && tau < 1.0) {
                    return Err(Error::InvalidConfig(format!(
                        "index tau must lie strictly inside (0, 1), got {tau}"
                    )));
                }
            }
            LossKind::CompositeQuantile { levels } if levels == 0 => {
                return Err(Error::InvalidConfig(
                    "composite quantile needs at least one level".into(),
                ))
            }
            _ => {}
        }
        Ok(())
    }

    /// Quantile levels for the check-loss families; empty for expectiles.
    pub fn quantile_levels(&self) -> Vec<f64> {
        match *self {
            LossKind::Median => vec![0.5],
            LossKind::Quantile { tau } => vec![tau],
            LossKind::CompositeQuantile { levels } => composite_levels(levels),
            LossKind::Expectile { .. } | LossKind::LeastSquares => Vec::new(),
        }
    }

    /// Expectile index, `Some` only for the squared-loss families.
    pub fn expectile_index(&self) -> Option<f64> {
        match *self {
            LossKind::Expectile { tau } => Some(tau),
            LossKind::LeastSquares => Some(0.5),
            _ => None,
        }
    }

    /// Whether the loss is piecewise linear (handled by the LP solver).
    pub fn is_check_loss(&self) -> bool {
        self.expectile_index().is_none()
    }

    pub fn intercept_count(&self) -> usize {
        match *self {
            LossKind::CompositeQuantile { levels } => levels,
            _ => 0,
        }
    }

    /// Loss of a single residual; composite losses sum the levels with
    /// intercepts given separately through [`LossKind::loss_with_intercepts`].
    pub fn loss(&self, u: f64) -> f64 {
        match *self {
            LossKind::Median => check_loss(0.5, u),
            LossKind::Quantile { tau } => check_loss(tau, u),
            LossKind::CompositeQuantile { levels } => composite_levels(levels)
                .into_iter()
                .map(|t| check_loss(t, u))
                .sum(),
            LossKind::Expectile { tau } => expectile_loss(tau, u),
            LossKind::LeastSquares => expectile_loss(0.5, u),
        }
    }

    /// Loss of residual `u` before intercepts are subtracted.
    pub fn loss_with_intercepts(&self, u: f64, intercepts: &[f64]) -> f64 {
        match *self {
            LossKind::CompositeQuantile { levels } => composite_levels(levels)
                .into_iter()
                .zip(intercepts)
                .map(|(t, b)| check_loss(t, u - b))
                .sum(),
            _ => self.loss(u - intercepts.first().copied().unwrap_or(0.0)),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Median => "median",
            LossKind::Quantile { .. } => "quantile",
            LossKind::CompositeQuantile { .. } => "composite_quantile",
            LossKind::Expectile { .. } => "expectile",
            LossKind::LeastSquares => "least_squares",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LossKind::Quantile { tau } | LossKind::Expectile { tau } => {
                write!(f, "{}(tau={tau})", self.name())
            }
            LossKind::CompositeQuantile { levels } => write!(f, "{}(J={levels})", self.name()),
            _ => f.write_str(self.name()),
        }
    }
}

/// Loss family without its index; the index is supplied or estimated later.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossFamily {
    Median,
    Quantile,
    CompositeQuantile,
    Expectile,
    LeastSquares,
}

impl LossFamily {
    pub fn name(&self) -> &'static str {
        match self {
            LossFamily::Median => "median",
            LossFamily::Quantile => "quantile",
            LossFamily::CompositeQuantile => "composite_quantile",
            LossFamily::Expectile => "expectile",
            LossFamily::LeastSquares => "least_squares",
        }
    }

    /// `tau` is the index for quantile/expectile families; `levels` is `J`.
    pub fn with_index(&self, tau: f64, levels: usize) -> LossKind {
        match self {
            LossFamily::Median => LossKind::Median,
            LossFamily::Quantile => LossKind::Quantile { tau },
            LossFamily::CompositeQuantile => LossKind::CompositeQuantile { levels },
            LossFamily::Expectile => LossKind::Expectile { tau },
            LossFamily::LeastSquares => LossKind::LeastSquares,
        }
    }
}

impl FromStr for LossFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "median" | "lad" => Ok(LossFamily::Median),
            "quantile" => Ok(LossFamily::Quantile),
            "composite_quantile" | "cqr" => Ok(LossFamily::CompositeQuantile),
            "expectile" => Ok(LossFamily::Expectile),
            "least_squares" | "ls" => Ok(LossFamily::LeastSquares),
            other => Err(Error::InvalidConfig(format!("unknown loss family `{other}`"))),
        }
    }
}

impl fmt::Display for LossFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn composite_levels(levels: usize) -> Vec<f64> {
    (1..=levels)
        .map(|j| j as f64 / (levels as f64 + 1.0))
        .collect()
}

/// `rho_tau(u) = u (tau - 1{u <= 0})`.
#[inline]
pub fn check_loss(tau: f64, u: f64) -> f64 {
    if u <= 0.0 {
        u * (tau - 1.0)
    } else {
        u * tau
    }
}

/// `|tau - 1{u < 0}| u^2`.
#[inline]
pub fn expectile_loss(tau: f64, u: f64) -> f64 {
    if u < 0.0 {
        (1.0 - tau) * u * u
    } else {
        tau * u * u
    }
}

/// Derivative of `t -> rho_tau(u - t)` at `t = 0`.
#[inline]
pub fn expectile_grad(tau: f64, u: f64) -> f64 {
    if u >= 0.0 {
        -2.0 * tau * u
    } else {
        -2.0 * (1.0 - tau) * u
    }
}

#[inline]
pub fn expectile_hess(tau: f64, u: f64) -> f64 {
    if u >= 0.0 {
        2.0 * tau
    } else {
        2.0 * (1.0 - tau)
    }
}

/// Empirical expectile index at which zero is the expectile of `residuals`:
/// `S- / (S- - S+)` with `S-`, `S+` the sums of negative and positive residuals.
pub fn estimate_expectile_index(residuals: &[f64]) -> Result<f64> {
    let negative: f64 = residuals.iter().filter(|e| **e < 0.0).sum();
    let positive: f64 = residuals.iter().filter(|e| **e > 0.0).sum();
    if negative == 0.0 || positive == 0.0 {
        return Err(Error::DegenerateSample(
            "residuals must contain both signs".into(),
        ));
    }
    Ok(negative / (negative - positive))
}

/// Empirical distribution function of `residuals` at zero (strict).
pub fn estimate_quantile_index(residuals: &[f64]) -> Result<f64> {
    if residuals.is_empty() {
        return Err(Error::DegenerateSample("no residuals".into()));
    }
    let below = residuals.iter().filter(|e| **e < 0.0).count();
    Ok(below as f64 / residuals.len() as f64)
}
