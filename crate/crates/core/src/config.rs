//! TOML run configuration: one section per stage, keys mirrored by the
//! command-line flags.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::aggregate::AggregationPlan;
use crate::error::{Error, Result};
use crate::loss::{LossFamily, LossKind};
use crate::solver::{FitConfig, FitOptions};
use crate::tuning::{BicVariant, LambdaRule, PenaltyMode};

/// `[fit]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSection {
    pub method: LossFamily,
    /// Index of the quantile or expectile loss.
    pub tau: f64,
    /// Levels of the composite quantile loss.
    pub levels: usize,
    /// Fixed penalty; mutually exclusive with `bic`.
    pub lambda: Option<f64>,
    /// Default grid position `j` at the fitting sample size.
    pub grid_index: Option<usize>,
    /// Select the penalty by BIC over the default grid.
    pub bic: bool,
    pub penalty_mode: PenaltyMode,
    pub bic_variant: BicVariant,
    pub gamma: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub weight_floor: Option<f64>,
    pub beta_floor: f64,
    pub fit_intercept: bool,
}

impl Default for FitSection {
    fn default() -> Self {
        let o = FitOptions::default();
        Self {
            method: LossFamily::Median,
            tau: 0.5,
            levels: 10,
            lambda: None,
            grid_index: None,
            bic: false,
            penalty_mode: PenaltyMode::default(),
            bic_variant: BicVariant::default(),
            gamma: o.gamma,
            max_iter: o.max_iter,
            tol: o.tol,
            weight_floor: o.weight_floor,
            beta_floor: o.beta_floor,
            fit_intercept: o.fit_intercept,
        }
    }
}

impl FitSection {
    pub fn loss(&self) -> LossKind {
        self.method.with_index(self.tau, self.levels)
    }

    pub fn options(&self) -> FitOptions {
        FitOptions {
            gamma: self.gamma,
            max_iter: self.max_iter,
            tol: self.tol,
            weight_floor: self.weight_floor,
            beta_floor: self.beta_floor,
            fit_intercept: self.fit_intercept,
        }
    }

    /// Fit configuration at penalty zero; the rule supplies the penalty.
    pub fn fit_config(&self) -> Result<FitConfig> {
        let c = self.options().config(self.loss(), 0.0);
        c.validate()?;
        Ok(c)
    }

    /// Penalty rule; a fixed lambda together with `bic` is rejected. With
    /// nothing set the penalty is zero.
    pub fn lambda_rule(&self) -> Result<LambdaRule> {
        let chosen = usize::from(self.lambda.is_some())
            + usize::from(self.grid_index.is_some())
            + usize::from(self.bic);
        if chosen > 1 {
            return Err(Error::InvalidConfig(
                "lambda, grid_index and bic are mutually exclusive".into(),
            ));
        }
        let rule = if self.bic {
            LambdaRule::Bic {
                penalty_mode: self.penalty_mode,
                variant: self.bic_variant,
            }
        } else if let Some(j) = self.grid_index {
            LambdaRule::GridIndex { j }
        } else {
            LambdaRule::Value {
                lambda: self.lambda.unwrap_or(0.0),
            }
        };
        rule.validate()?;
        Ok(rule)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub fit: FitSection,
    pub aggregation: AggregationPlan,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            fit: FitSection::default(),
            aggregation: AggregationPlan::new(1),
        }
    }
}

pub fn load_toml<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_toml(&text).map_err(|e| match e {
        Error::InvalidConfig(msg) => Error::InvalidConfig(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_toml<T: DeserializeOwned>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
}
