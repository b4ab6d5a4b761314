//! Weighted unpenalized and adaptive-LASSO fits for every loss family.
//!
//! Check-loss families (median, quantile, composite quantile) go through an
//! interior-point LP solver; expectile and least squares through coordinate
//! descent. Responses are always `log Y`.

mod cd;
mod lp;

use serde::{Deserialize, Serialize};

use crate::data::SurvivalDataset;
use crate::error::{Error, Result};
use crate::km::IpcwWeights;
use crate::loss::LossKind;

/// Coefficients with `|beta_j|` below this are reported as exact zeros by
/// the LP path.
pub const ZERO_THRESHOLD: f64 = 1e-10;

const LP_MAX_ITER: usize = 200;
const LP_RELATIVE_GAP: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub loss: LossKind,
    pub lambda: f64,
    /// Power of the adaptive weights `|beta_tilde_j|^-gamma`.
    pub gamma: f64,
    pub max_iter: usize,
    /// Coordinate-change threshold of the coordinate-descent solver.
    pub tol: f64,
    /// Floor on the censoring survival curve in the IPCW weights; `None`
    /// means `1 / n` of the sample the curve is fitted on.
    pub weight_floor: Option<f64>,
    /// Floor on `|beta_tilde_j|` inside the adaptive weights.
    pub beta_floor: f64,
    /// Adds one free intercept for the single-index families. Composite
    /// quantile always carries one intercept per level.
    pub fit_intercept: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Median,
            lambda: 0.0,
            gamma: 1.0,
            max_iter: 10_000,
            tol: 1e-8,
            weight_floor: None,
            beta_floor: 1e-10,
            fit_intercept: false,
        }
    }
}

impl FitConfig {
    pub fn new(loss: LossKind) -> Self {
        Self {
            loss,
            ..Self::default()
        }
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        Self {
            lambda,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if !(self.gamma > 0.0) {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        if !(self.tol > 0.0) {
            return bad(format!("tol must be positive, got {}", self.tol));
        }
        if !(self.beta_floor > 0.0) {
            return bad(format!("beta_floor must be positive, got {}", self.beta_floor));
        }
        if self.max_iter == 0 {
            return bad("max_iter must be at least 1".into());
        }
        if let Some(f) = self.weight_floor {
            if !(f > 0.0 && f <= 1.0) {
                return bad(format!("weight_floor must lie in (0, 1], got {f}"));
            }
        }
        Ok(())
    }

    /// Number of intercepts the fitted model carries.
    pub fn intercept_count(&self) -> usize {
        match self.loss {
            LossKind::CompositeQuantile { levels } => levels,
            _ => usize::from(self.fit_intercept),
        }
    }
}

/// Solver settings shared by every loss; combined with a loss and a penalty
/// level into a [`FitConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub gamma: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub weight_floor: Option<f64>,
    pub beta_floor: f64,
    pub fit_intercept: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        let c = FitConfig::default();
        Self {
            gamma: c.gamma,
            max_iter: c.max_iter,
            tol: c.tol,
            weight_floor: c.weight_floor,
            beta_floor: c.beta_floor,
            fit_intercept: c.fit_intercept,
        }
    }
}

impl FitOptions {
    pub fn config(&self, loss: LossKind, lambda: f64) -> FitConfig {
        FitConfig {
            loss,
            lambda,
            gamma: self.gamma,
            max_iter: self.max_iter,
            tol: self.tol,
            weight_floor: self.weight_floor,
            beta_floor: self.beta_floor,
            fit_intercept: self.fit_intercept,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorResult {
    pub beta: Vec<f64>,
    pub intercepts: Vec<f64>,
    pub support: Vec<usize>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Optimality certificate: the largest dual-box violation for the LP
    /// families, the largest subgradient residual for the squared families.
    pub kkt_residual: f64,
}

impl EstimatorResult {
    pub fn support_size(&self) -> usize {
        self.support.len()
    }
}

pub fn support_of(beta: &[f64]) -> Vec<usize> {
    (0..beta.len()).filter(|&j| beta[j] != 0.0).collect()
}

/// `omega_j = 1 / max(|beta_tilde_j|, floor)^gamma`.
pub fn adaptive_weights(beta_tilde: &[f64], gamma: f64, floor: f64) -> Vec<f64> {
    beta_tilde
        .iter()
        .map(|b| b.abs().max(floor).powf(-gamma))
        .collect()
}

/// Rows with positive weight, ready for either solver.
struct Design {
    p: usize,
    intercepts: usize,
    x: Vec<f64>,
    y: Vec<f64>,
    w: Vec<f64>,
}

impl Design {
    fn new(dataset: &SurvivalDataset, weights: &IpcwWeights, config: &FitConfig) -> Result<Self> {
        let n = dataset.n();
        if weights.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: weights.len(),
            });
        }
        let p = dataset.p();
        let mut design = Design {
            p,
            intercepts: config.intercept_count(),
            x: Vec::new(),
            y: Vec::new(),
            w: Vec::new(),
        };
        for i in 0..n {
            let wi = weights.w[i];
            if !(wi >= 0.0) || !wi.is_finite() {
                return Err(Error::InvalidData(format!("weight {i} is {wi}")));
            }
            if wi > 0.0 {
                design.x.extend_from_slice(dataset.row(i));
                design.y.push(dataset.y()[i].ln());
                design.w.push(wi);
            }
        }
        if design.w.is_empty() {
            return Err(Error::DegenerateWeights);
        }
        Ok(design)
    }

    fn m(&self) -> usize {
        self.w.len()
    }

    fn dim(&self) -> usize {
        self.intercepts + self.p
    }

    fn lp_rows(&self, loss: &LossKind, penalty: &[f64]) -> lp::LpRows {
        let d = self.dim();
        let levels = loss.quantile_levels();
        let mut rows = lp::LpRows::new(d);
        let mut buf = vec![0.0; d];
        for (j, &tau) in levels.iter().enumerate() {
            for i in 0..self.m() {
                let c = self.w[i];
                buf.iter_mut().for_each(|v| *v = 0.0);
                if self.intercepts > 0 {
                    buf[j.min(self.intercepts - 1)] = c;
                }
                for (b, x) in buf[self.intercepts..]
                    .iter_mut()
                    .zip(&self.x[i * self.p..(i + 1) * self.p])
                {
                    *b = c * x;
                }
                rows.push(&buf, c * self.y[i], tau);
            }
        }
        for (k, &mu) in penalty.iter().enumerate() {
            if mu > 0.0 {
                rows.push_penalty(self.intercepts + k, mu);
            }
        }
        rows
    }

    fn squared_problem(&self, tau: f64, penalty: &[f64]) -> cd::SquaredProblem {
        let n = self.m();
        let d = self.dim();
        let mut cols = vec![0.0; d * n];
        if self.intercepts == 1 {
            cols[..n].iter_mut().for_each(|v| *v = 1.0);
        }
        for i in 0..n {
            for k in 0..self.p {
                cols[(self.intercepts + k) * n + i] = self.x[i * self.p + k];
            }
        }
        let mut pen = vec![0.0; self.intercepts];
        pen.extend_from_slice(penalty);
        cd::SquaredProblem {
            n,
            d,
            cols,
            y: self.y.clone(),
            w: self.w.clone(),
            tau,
            pen,
        }
    }

    /// For the intercept-free check-loss problem, whether `beta = 0`
    /// satisfies the subgradient condition; avoids an LP solve at large
    /// penalties.
    fn zero_is_optimal(&self, loss: &LossKind, penalty: &[f64]) -> bool {
        if self.intercepts > 0 || self.y.iter().any(|v| *v == 0.0) {
            return false;
        }
        let mut g = vec![0.0; self.p];
        for tau in loss.quantile_levels() {
            for i in 0..self.m() {
                let psi = self.w[i] * if self.y[i] > 0.0 { tau } else { tau - 1.0 };
                for (gk, x) in g.iter_mut().zip(&self.x[i * self.p..(i + 1) * self.p]) {
                    *gk += psi * x;
                }
            }
        }
        g.iter().zip(penalty).all(|(gk, mu)| gk.abs() <= *mu)
    }
}

fn solve(
    design: &Design,
    config: &FitConfig,
    penalty: &[f64],
    init: Option<&[f64]>,
) -> Result<EstimatorResult> {
    let d = design.dim();
    let h = design.intercepts;
    let (theta, iterations, converged, kkt_residual) = if config.loss.is_check_loss() {
        if design.zero_is_optimal(&config.loss, penalty) {
            (vec![0.0; d], 0, true, 0.0)
        } else {
            let rows = design.lp_rows(&config.loss, penalty);
            let sol = lp::solve(&rows, LP_MAX_ITER.min(config.max_iter), LP_RELATIVE_GAP);
            let mut theta = sol.theta;
            for t in &mut theta[h..] {
                if t.abs() < ZERO_THRESHOLD {
                    *t = 0.0;
                }
            }
            let certified = sol.dual_violation <= 1e-9;
            (theta, sol.iterations, sol.converged || certified, sol.dual_violation)
        }
    } else {
        let tau = config.loss.expectile_index().unwrap_or(0.5);
        let problem = design.squared_problem(tau, penalty);
        let start = match init {
            Some(beta) => {
                let mut t = vec![0.0; h];
                t.extend_from_slice(beta);
                t
            }
            None => vec![0.0; d],
        };
        let out = problem.solve(&start, config.max_iter, config.tol);
        let kkt = problem.kkt_residual(&out.theta);
        (out.theta, out.iterations, out.converged, kkt)
    };

    let intercepts = theta[..h].to_vec();
    let beta = theta[h..].to_vec();
    let objective = penalized_objective(design, &config.loss, penalty, &beta, &intercepts);
    if !objective.is_finite() {
        return Err(Error::NoConvergence(format!(
            "{} fit produced a non-finite objective",
            config.loss
        )));
    }
    if !converged {
        log::warn!(
            "{} fit stopped after {iterations} iterations without converging",
            config.loss
        );
    }
    Ok(EstimatorResult {
        support: support_of(&beta),
        beta,
        intercepts,
        objective,
        iterations,
        converged,
        kkt_residual,
    })
}

fn penalized_objective(
    design: &Design,
    loss: &LossKind,
    penalty: &[f64],
    beta: &[f64],
    intercepts: &[f64],
) -> f64 {
    let mut total = 0.0;
    for i in 0..design.m() {
        let fit: f64 = design.x[i * design.p..(i + 1) * design.p]
            .iter()
            .zip(beta)
            .map(|(x, b)| x * b)
            .sum();
        total += design.w[i] * loss.loss_with_intercepts(design.y[i] - fit, intercepts);
    }
    total
        + penalty
            .iter()
            .zip(beta)
            .map(|(m, b)| m * b.abs())
            .sum::<f64>()
}

/// Minimizes the weighted empirical loss of `log Y` without a penalty.
pub fn fit_unpenalized(
    dataset: &SurvivalDataset,
    weights: &IpcwWeights,
    config: &FitConfig,
) -> Result<EstimatorResult> {
    config.validate()?;
    let design = Design::new(dataset, weights, config)?;
    solve(&design, config, &vec![0.0; design.p], None)
}

/// Minimizes the weighted empirical loss plus
/// `lambda * sum_j |beta_j| / max(|beta_tilde_j|, beta_floor)^gamma`.
pub fn fit_adaptive_lasso(
    dataset: &SurvivalDataset,
    weights: &IpcwWeights,
    config: &FitConfig,
    beta_tilde: &[f64],
) -> Result<EstimatorResult> {
    config.validate()?;
    if beta_tilde.len() != dataset.p() {
        return Err(Error::DimensionMismatch {
            expected: dataset.p(),
            found: beta_tilde.len(),
        });
    }
    let design = Design::new(dataset, weights, config)?;
    let penalty: Vec<f64> = adaptive_weights(beta_tilde, config.gamma, config.beta_floor)
        .into_iter()
        .map(|w| config.lambda * w)
        .collect();
    solve(&design, config, &penalty, Some(beta_tilde))
}

/// Exact penalized objective
/// `sum_i w_i rho(log Y_i - b - X_i' beta) + lambda * sum_j omega_j |beta_j|`.
pub fn objective_value(
    dataset: &SurvivalDataset,
    weights: &IpcwWeights,
    loss: &LossKind,
    lambda: f64,
    adaptive_weights: &[f64],
    beta: &[f64],
    intercepts: &[f64],
) -> Result<f64> {
    let p = dataset.p();
    for (expected, found) in [
        (dataset.n(), weights.len()),
        (p, adaptive_weights.len()),
        (p, beta.len()),
    ] {
        if expected != found {
            return Err(Error::DimensionMismatch { expected, found });
        }
    }
    let max_intercepts = loss.intercept_count().max(1);
    if intercepts.len() > max_intercepts
        || (loss.intercept_count() > 0 && intercepts.len() != loss.intercept_count())
    {
        return Err(Error::DimensionMismatch {
            expected: loss.intercept_count(),
            found: intercepts.len(),
        });
    }
    let mut total = 0.0;
    for i in 0..dataset.n() {
        let wi = weights.w[i];
        if wi == 0.0 {
            continue;
        }
        let fit: f64 = dataset.row(i).iter().zip(beta).map(|(x, b)| x * b).sum();
        total += wi * loss.loss_with_intercepts(dataset.y()[i].ln() - fit, intercepts);
    }
    let penalty: f64 = adaptive_weights
        .iter()
        .zip(beta)
        .map(|(w, b)| w * b.abs())
        .sum();
    Ok(total + lambda * penalty)
}
