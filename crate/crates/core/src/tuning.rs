//! Penalty grids and BIC-type selection of the tuning parameter.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SurvivalDataset;
use crate::error::{Error, Result};
use crate::km::IpcwWeights;
use crate::loss::LossKind;
use crate::solver::{fit_adaptive_lasso, fit_unpenalized, objective_value, EstimatorResult, FitConfig};

pub const GRID_SIZE: usize = 20;

/// Sample-size factor of the support penalty `|A| log(m) / m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PenaltyMode {
    /// `m = n`, the number of observations.
    #[default]
    LogNOverN,
    /// `m` is the number of uncensored observations.
    LogNuOverNu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BicVariant {
    /// Loss at the candidate divided by the loss at the unpenalized fit.
    #[default]
    LossRatio,
    /// Composite quantile only: log of the mean weighted absolute residual
    /// over all levels.
    LogMeanAbsolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BicConfig {
    pub penalty_mode: PenaltyMode,
    pub variant: BicVariant,
    pub grid: Vec<f64>,
}

impl BicConfig {
    /// Default grid for sample size `n` with the given penalty mode.
    pub fn for_sample_size(n: usize, penalty_mode: PenaltyMode) -> Result<Self> {
        Ok(Self {
            penalty_mode,
            variant: BicVariant::LossRatio,
            grid: lambda_grid(n)?,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::InvalidConfig("lambda grid is empty".into()));
        }
        if self.grid.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::InvalidConfig("lambda grid values must be finite and >= 0".into()));
        }
        if self.grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidConfig("lambda grid must be strictly increasing".into()));
        }
        Ok(())
    }
}

/// `lambda_j = n^(1/2 - 1/(10 j))`, `j = 1..20`.
pub fn lambda_grid(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::InvalidConfig(format!(
            "lambda grid needs n >= 2, got {n}"
        )));
    }
    Ok((1..=GRID_SIZE).map(|j| grid_value(n, j)).collect())
}

/// Single grid value for index `j >= 1`.
pub fn grid_value(n: usize, j: usize) -> f64 {
    (n as f64).powf(0.5 - 1.0 / (10.0 * j as f64))
}

fn penalty_size(dataset: &SurvivalDataset, mode: PenaltyMode) -> Result<f64> {
    let m = match mode {
        PenaltyMode::LogNOverN => dataset.n(),
        PenaltyMode::LogNuOverNu => dataset.events(),
    };
    if m == 0 {
        return Err(Error::DegenerateSample("no uncensored observations".into()));
    }
    Ok(m as f64)
}

fn weighted_loss(
    dataset: &SurvivalDataset,
    weights: &IpcwWeights,
    loss: &LossKind,
    fit: &EstimatorResult,
) -> Result<f64> {
    let zeros = vec![0.0; dataset.p()];
    objective_value(dataset, weights, loss, 0.0, &zeros, &fit.beta, &fit.intercepts)
}

fn log_mean_absolute(
    dataset: &SurvivalDataset,
    weights: &IpcwWeights,
    fit: &EstimatorResult,
) -> Result<f64> {
    if fit.intercepts.is_empty() {
        return Err(Error::InvalidConfig(
            "log-mean-absolute BIC needs the composite quantile loss".into(),
        ));
    }
    let mut total = 0.0;
    for i in 0..dataset.n() {
        let wi = weights.w[i];
        if wi == 0.0 {
            continue;
        }
        let fit_i: f64 = dataset.row(i).iter().zip(&fit.beta).map(|(x, b)| x * b).sum();
        let r = dataset.y()[i].ln() - fit_i;
        total += fit.intercepts.iter().map(|b| wi * (r - b).abs()).sum::<f64>();
    }
    let mean = total / (dataset.n() * fit.intercepts.len()) as f64;
    if mean <= 0.0 {
        return Err(Error::ZeroNormalizer);
    }
    Ok(mean.ln())
}

/// `L(beta_hat) / L(beta_tilde) + |A| log(m) / m`.
pub fn bic_score(
    dataset: &SurvivalDataset,
    weights: &IpcwWeights,
    result: &EstimatorResult,
    unpenalized: &EstimatorResult,
    loss: &LossKind,
    config: &BicConfig,
) -> Result<f64> {
    let m = penalty_size(dataset, config.penalty_mode)?;
    let complexity = result.support_size() as f64 * m.ln() / m;
    let fit_term = match config.variant {
        BicVariant::LossRatio => {
            let base = weighted_loss(dataset, weights, loss, unpenalized)?;
            if base == 0.0 {
                return Err(Error::ZeroNormalizer);
            }
            weighted_loss(dataset, weights, loss, result)? / base
        }
        BicVariant::LogMeanAbsolute => log_mean_absolute(dataset, weights, result)?,
    };
    Ok(fit_term + complexity)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BicEntry {
    pub lambda: f64,
    /// `+inf` when the fit at this grid point failed.
    pub score: f64,
    pub support_size: usize,
    pub result: Option<EstimatorResult>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BicPath {
    pub entries: Vec<BicEntry>,
    pub best_index: usize,
    pub unpenalized: EstimatorResult,
}

impl BicPath {
    pub fn best(&self) -> &BicEntry {
        &self.entries[self.best_index]
    }

    pub fn best_result(&self) -> &EstimatorResult {
        self.best()
            .result
            .as_ref()
            .expect("best entry always holds a fit")
    }

    pub fn write_csv_to<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "lambda,score,support_size")?;
        for e in &self.entries {
            writeln!(out, "{},{},{}", e.lambda, e.score, e.support_size)?;
        }
        Ok(())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv_to(&mut file).map_err(|e| Error::io(path, e))
    }
}

/// First index of the smallest finite score, so ties go to the smaller
/// lambda on an increasing grid.
pub fn argmin_first(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        if s.is_finite() && best.map_or(true, |b| *s < scores[b]) {
            best = Some(i);
        }
    }
    best
}

/// Fits once without penalty, then once per grid point, and picks the
/// minimal BIC score.
pub fn select_lambda(
    dataset: &SurvivalDataset,
    weights: &IpcwWeights,
    config: &FitConfig,
    bic: &BicConfig,
) -> Result<BicPath> {
    bic.validate()?;
    let unpenalized = fit_unpenalized(dataset, weights, config)?;
    path_from_pilot(dataset, weights, config, bic, unpenalized)
}

/// As [`select_lambda`], reusing an existing unpenalized fit.
pub fn path_from_pilot(
    dataset: &SurvivalDataset,
    weights: &IpcwWeights,
    config: &FitConfig,
    bic: &BicConfig,
    unpenalized: EstimatorResult,
) -> Result<BicPath> {
    bic.validate()?;
    let outcomes: Vec<Result<(EstimatorResult, f64)>> = bic
        .grid
        .par_iter()
        .map(|&lambda| {
            let fit = fit_adaptive_lasso(dataset, weights, &config.with_lambda(lambda), &unpenalized.beta)?;
            let score = bic_score(dataset, weights, &fit, &unpenalized, &config.loss, bic)?;
            Ok((fit, score))
        })
        .collect();

    let mut entries = Vec::with_capacity(outcomes.len());
    let mut first_error = None;
    for (&lambda, outcome) in bic.grid.iter().zip(outcomes) {
        entries.push(match outcome {
            Ok((fit, score)) => BicEntry {
                lambda,
                score,
                support_size: fit.support_size(),
                result: Some(fit),
                error: None,
            },
            Err(e) => {
                log::warn!("grid point lambda={lambda} failed: {e}");
                let entry = BicEntry {
                    lambda,
                    score: f64::INFINITY,
                    support_size: 0,
                    result: None,
                    error: Some(e.to_string()),
                };
                first_error.get_or_insert(e);
                entry
            }
        });
    }
    let scores: Vec<f64> = entries.iter().map(|e| e.score).collect();
    match argmin_first(&scores) {
        Some(best_index) => Ok(BicPath {
            entries,
            best_index,
            unpenalized,
        }),
        None => Err(first_error.unwrap_or(Error::NoConvergence("no grid point succeeded".into()))),
    }
}

/// How the penalty level of a fit is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum LambdaRule {
    /// A fixed value.
    Value { lambda: f64 },
    /// The `j`-th default grid value at the fitting sample size.
    GridIndex { j: usize },
    /// BIC over the default grid at the fitting sample size.
    Bic {
        #[serde(default)]
        penalty_mode: PenaltyMode,
        #[serde(default)]
        variant: BicVariant,
    },
}

impl Default for LambdaRule {
    fn default() -> Self {
        LambdaRule::Bic {
            penalty_mode: PenaltyMode::LogNOverN,
            variant: BicVariant::LossRatio,
        }
    }
}

impl LambdaRule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LambdaRule::Value { lambda } if !(lambda >= 0.0 && lambda.is_finite()) => Err(
                Error::InvalidConfig(format!("lambda must be finite and >= 0, got {lambda}")),
            ),
            LambdaRule::GridIndex { j } if !(1..=GRID_SIZE).contains(&j) => Err(
                Error::InvalidConfig(format!("grid index must be in 1..={GRID_SIZE}, got {j}")),
            ),
            _ => Ok(()),
        }
    }

    pub fn bic_config(&self, n: usize) -> Result<Option<BicConfig>> {
        match *self {
            LambdaRule::Bic {
                penalty_mode,
                variant,
            } => Ok(Some(BicConfig {
                penalty_mode,
                variant,
                grid: lambda_grid(n)?,
            })),
            _ => Ok(None),
        }
    }
}

/// Pilot fit, final fit and, under a BIC rule, the whole path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TunedFit {
    pub lambda: f64,
    pub result: EstimatorResult,
    pub unpenalized: EstimatorResult,
    pub path: Option<BicPath>,
}

impl TunedFit {
    /// Grid position (1-based) of the chosen lambda under a BIC rule.
    pub fn grid_choice(&self) -> Option<usize> {
        self.path.as_ref().map(|p| p.best_index + 1)
    }
}

pub fn fit_with_rule(
    dataset: &SurvivalDataset,
    weights: &IpcwWeights,
    config: &FitConfig,
    rule: &LambdaRule,
) -> Result<TunedFit> {
    rule.validate()?;
    let unpenalized = fit_unpenalized(dataset, weights, config)?;
    match rule {
        LambdaRule::Value { lambda } => fixed(dataset, weights, config, *lambda, unpenalized),
        LambdaRule::GridIndex { j } => {
            fixed(dataset, weights, config, grid_value(dataset.n(), *j), unpenalized)
        }
        LambdaRule::Bic { .. } => {
            let bic = rule.bic_config(dataset.n())?.expect("bic rule");
            let path = path_from_pilot(dataset, weights, config, &bic, unpenalized.clone())?;
            Ok(TunedFit {
                lambda: path.best().lambda,
                result: path.best_result().clone(),
                unpenalized,
                path: Some(path),
            })
        }
    }
}

fn fixed(
    dataset: &SurvivalDataset,
    weights: &IpcwWeights,
    config: &FitConfig,
    lambda: f64,
    unpenalized: EstimatorResult,
) -> Result<TunedFit> {
    let result = fit_adaptive_lasso(dataset, weights, &config.with_lambda(lambda), &unpenalized.beta)?;
    Ok(TunedFit {
        lambda,
        result,
        unpenalized,
        path: None,
    })
}
