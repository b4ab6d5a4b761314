//! Divide-and-conquer estimation: interleaved groups, one adaptive-LASSO fit
//! per group, a support vote and averaging of the voted coordinates.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SurvivalDataset;
use crate::error::{Error, Result};
use crate::km::{weights_with_floor, IpcwWeights};
use crate::solver::{support_of, EstimatorResult, FitConfig};
use crate::tuning::{argmin_first, fit_with_rule, LambdaRule, TunedFit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdRule {
    /// `w = floor(sqrt(K))`.
    SqrtK,
}

/// Minimum number of group votes a coordinate needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VoteThreshold {
    Fixed(usize),
    Rule(ThresholdRule),
}

impl Default for VoteThreshold {
    fn default() -> Self {
        VoteThreshold::Rule(ThresholdRule::SqrtK)
    }
}

impl VoteThreshold {
    pub fn resolve(&self, k: usize) -> usize {
        match *self {
            VoteThreshold::Fixed(w) => w,
            VoteThreshold::Rule(ThresholdRule::SqrtK) => integer_sqrt(k),
        }
    }
}

fn integer_sqrt(k: usize) -> usize {
    let mut r = (k as f64).sqrt() as usize;
    while r * r > k {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= k {
        r += 1;
    }
    r
}

/// Which observations the censoring curve of a group is fitted on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KmScope {
    /// Each group fits its own curve.
    #[default]
    PerGroup,
    /// One curve on the full data, shared by all groups.
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregationPlan {
    pub k: usize,
    #[serde(default)]
    pub threshold: VoteThreshold,
    /// Tune each group separately; otherwise all groups share the grid
    /// point with the best mean BIC (fixed rules are always shared).
    #[serde(default = "default_true")]
    pub per_group_tuning: bool,
    #[serde(default)]
    pub km_scope: KmScope,
}

fn default_true() -> bool {
    true
}

impl AggregationPlan {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            threshold: VoteThreshold::default(),
            per_group_tuning: true,
            km_scope: KmScope::PerGroup,
        }
    }

    pub fn with_threshold(mut self, w: usize) -> Self {
        self.threshold = VoteThreshold::Fixed(w);
        self
    }

    pub fn vote_threshold(&self) -> usize {
        self.threshold.resolve(self.k)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("K must be at least 1".into()));
        }
        let w = self.vote_threshold();
        if w < 1 || w > self.k {
            return Err(Error::InvalidConfig(format!(
                "vote threshold must lie in 1..={}, got {w}",
                self.k
            )));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        format!("K={},w={}", self.k, self.vote_threshold())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupAssignment {
    pub groups: Vec<Vec<usize>>,
    pub n_used: usize,
    pub dropped: usize,
}

impl GroupAssignment {
    pub fn k(&self) -> usize {
        self.groups.len()
    }

    pub fn group_size(&self) -> usize {
        self.n_used / self.k()
    }
}

/// Group `k` (0-based) holds observations `k, K + k, 2K + k, ...`; the last
/// `n mod K` observations are left out.
pub fn interleaved_split(n: usize, k: usize) -> Result<GroupAssignment> {
    if k == 0 || k > n {
        return Err(Error::InvalidK { n, k });
    }
    let size = n / k;
    let n_used = size * k;
    let dropped = n - n_used;
    if dropped > 0 {
        log::warn!("dropping the last {dropped} of {n} observations to form {k} equal groups");
    }
    let groups = (0..k)
        .map(|g| (0..size).map(|m| m * k + g).collect())
        .collect();
    Ok(GroupAssignment {
        groups,
        n_used,
        dropped,
    })
}

/// Coordinates selected by at least `w` groups.
pub fn vote_support(group_supports: &[Vec<usize>], p: usize, w: usize) -> (Vec<usize>, Vec<usize>) {
    let counts = vote_counts(group_supports, p);
    let voted = (0..p).filter(|&j| counts[j] >= w).collect();
    (voted, counts)
}

pub fn vote_counts(group_supports: &[Vec<usize>], p: usize) -> Vec<usize> {
    let mut counts = vec![0; p];
    for support in group_supports {
        for &j in support {
            counts[j] += 1;
        }
    }
    counts
}

/// Mean of the group coefficients on the voted coordinates, zero elsewhere.
pub fn aggregate(group_betas: &[&[f64]], voted_support: &[usize]) -> Result<Vec<f64>> {
    let Some(first) = group_betas.first() else {
        return Err(Error::InvalidConfig("no group results to aggregate".into()));
    };
    let p = first.len();
    for b in group_betas {
        if b.len() != p {
            return Err(Error::DimensionMismatch {
                expected: p,
                found: b.len(),
            });
        }
    }
    let k = group_betas.len() as f64;
    let mut out = vec![0.0; p];
    for &j in voted_support {
        if j >= p {
            return Err(Error::DimensionMismatch {
                expected: p,
                found: j + 1,
            });
        }
        out[j] = group_betas.iter().map(|b| b[j]).sum::<f64>() / k;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupFit {
    pub group: usize,
    pub size: usize,
    pub lambda: f64,
    /// 1-based grid position of the chosen lambda under a BIC rule.
    pub grid_choice: Option<usize>,
    pub result: EstimatorResult,
    pub unpenalized: EstimatorResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedResult {
    pub k: usize,
    pub threshold: usize,
    pub n_used: usize,
    pub dropped: usize,
    pub beta_check: Vec<f64>,
    pub support: Vec<usize>,
    pub voted_support: Vec<usize>,
    pub vote_counts: Vec<usize>,
    pub groups: Vec<GroupFit>,
}

impl AggregatedResult {
    pub fn group_supports(&self) -> Vec<Vec<usize>> {
        self.groups.iter().map(|g| g.result.support.clone()).collect()
    }
}

/// Aggregated fit at the fixed penalty `config.lambda`.
pub fn fit_aggregated(
    dataset: &SurvivalDataset,
    plan: &AggregationPlan,
    config: &FitConfig,
) -> Result<AggregatedResult> {
    fit_aggregated_with(
        dataset,
        plan,
        config,
        &LambdaRule::Value {
            lambda: config.lambda,
        },
    )
}

struct GroupData {
    dataset: SurvivalDataset,
    weights: IpcwWeights,
}

pub fn fit_aggregated_with(
    dataset: &SurvivalDataset,
    plan: &AggregationPlan,
    config: &FitConfig,
    rule: &LambdaRule,
) -> Result<AggregatedResult> {
    plan.validate()?;
    config.validate()?;
    rule.validate()?;
    let split = interleaved_split(dataset.n(), plan.k)?;
    let global = match plan.km_scope {
        KmScope::Global => Some(weights_with_floor(dataset, config.weight_floor)?),
        KmScope::PerGroup => None,
    };
    let wrap = |group: usize| move |e: Error| Error::Group {
        group,
        source: Box::new(e),
    };

    let groups: Vec<GroupData> = split
        .groups
        .iter()
        .enumerate()
        .map(|(g, idx)| {
            let ds = dataset.subset(idx).map_err(wrap(g))?;
            let weights = match &global {
                Some(w) => w.subset(idx),
                None => weights_with_floor(&ds, config.weight_floor).map_err(wrap(g))?,
            };
            Ok(GroupData {
                dataset: ds,
                weights,
            })
        })
        .collect::<Result<_>>()?;

    let shared_bic = matches!(rule, LambdaRule::Bic { .. }) && !plan.per_group_tuning;
    let fits: Vec<TunedFit> = groups
        .par_iter()
        .enumerate()
        .map(|(g, gd)| fit_with_rule(&gd.dataset, &gd.weights, config, rule).map_err(wrap(g)))
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<_>>()?;
    let fits = if shared_bic {
        share_best_grid_point(fits)?
    } else {
        fits
    };

    let supports: Vec<Vec<usize>> = fits.iter().map(|f| f.result.support.clone()).collect();
    let threshold = plan.vote_threshold();
    let (voted_support, vote_counts) = vote_support(&supports, dataset.p(), threshold);
    let betas: Vec<&[f64]> = fits.iter().map(|f| f.result.beta.as_slice()).collect();
    let beta_check = aggregate(&betas, &voted_support)?;

    Ok(AggregatedResult {
        k: plan.k,
        threshold,
        n_used: split.n_used,
        dropped: split.dropped,
        support: support_of(&beta_check),
        beta_check,
        voted_support,
        vote_counts,
        groups: fits
            .into_iter()
            .enumerate()
            .map(|(g, f)| GroupFit {
                group: g,
                size: split.groups[g].len(),
                lambda: f.lambda,
                grid_choice: f.grid_choice(),
                result: f.result,
                unpenalized: f.unpenalized,
            })
            .collect(),
    })
}

/// Replaces each group's BIC choice by the grid point with the lowest mean
/// score across groups. A grid point that failed anywhere has an infinite
/// mean and is never chosen.
fn share_best_grid_point(fits: Vec<TunedFit>) -> Result<Vec<TunedFit>> {
    let paths: Vec<_> = fits.iter().filter_map(|f| f.path.as_ref()).collect();
    let len = paths[0].entries.len();
    let mean: Vec<f64> = (0..len)
        .map(|i| paths.iter().map(|p| p.entries[i].score).sum::<f64>() / paths.len() as f64)
        .collect();
    let best = argmin_first(&mean)
        .ok_or_else(|| Error::NoConvergence("no grid point succeeded in every group".into()))?;
    Ok(fits
        .into_iter()
        .map(|mut f| {
            if let Some(path) = f.path.as_mut() {
                path.best_index = best;
                f.lambda = path.best().lambda;
                f.result = path.best_result().clone();
            }
            f
        })
        .collect())
}
