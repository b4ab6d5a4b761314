//! Monte Carlo studies of the aggregated and full-data estimators:
//! selection error rates, active-set bias, normality diagnostics, BIC
//! choice histograms and wall-clock timings.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::aggregate::{fit_aggregated_with, AggregationPlan};
use crate::data::{
    default_censoring_bound, derive_seed, generate_with_latent, GenerationSpec, LatentDraws,
    SurvivalDataset,
};
use crate::error::{Error, Result};
use crate::km::weights_with_floor;
use crate::loss::{estimate_expectile_index, estimate_quantile_index, LossFamily, LossKind};
use crate::solver::FitOptions;
use crate::tuning::{fit_with_rule, LambdaRule, GRID_SIZE};

/// A loss family with either a fixed index or one estimated per replication
/// from the generated errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodSpec {
    pub family: LossFamily,
    /// Index for quantile and expectile; estimated from the latent errors
    /// when absent.
    #[serde(default)]
    pub tau: Option<f64>,
    /// Number of composite quantile levels.
    #[serde(default = "default_levels")]
    pub levels: usize,
}

fn default_levels() -> usize {
    10
}

impl MethodSpec {
    pub fn new(family: LossFamily) -> Self {
        Self {
            family,
            tau: None,
            levels: default_levels(),
        }
    }

    /// Concrete loss for one replication.
    pub fn loss(&self, latent_errors: &[f64]) -> Result<LossKind> {
        let tau = match (self.tau, self.family) {
            (Some(t), _) => t,
            (None, LossFamily::Expectile) => estimate_expectile_index(latent_errors)?,
            (None, LossFamily::Quantile) => estimate_quantile_index(latent_errors)?,
            (None, _) => 0.5,
        };
        let loss = self.family.with_index(tau, self.levels);
        loss.validate()?;
        Ok(loss)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationSpec {
    pub replications: usize,
    pub generation: GenerationSpec,
    pub methods: Vec<MethodSpec>,
    pub plans: Vec<AggregationPlan>,
    #[serde(default)]
    pub lambda_rule: LambdaRule,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub compare_full_data: bool,
    /// Upper bound of the uniform censoring law; calibrated to the target
    /// censoring rate when absent.
    #[serde(default)]
    pub censoring_bound: Option<f64>,
    #[serde(default)]
    pub fit: FitOptions,
}

impl SimulationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::InvalidConfig("replications must be at least 1".into()));
        }
        if self.plans.is_empty() {
            return Err(Error::InvalidConfig("at least one aggregation plan is required".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::InvalidConfig("at least one method is required".into()));
        }
        self.generation.validate()?;
        for plan in &self.plans {
            plan.validate()?;
            if plan.k > self.generation.n {
                return Err(Error::InvalidK {
                    n: self.generation.n,
                    k: plan.k,
                });
            }
        }
        for m in &self.methods {
            if let Some(t) = m.tau {
                m.family.with_index(t, m.levels).validate()?;
            } else if m.family == LossFamily::CompositeQuantile && m.levels == 0 {
                return Err(Error::InvalidConfig("composite quantile needs levels >= 1".into()));
            }
        }
        if let Some(c) = self.censoring_bound {
            if !(c > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "censoring bound must be positive, got {c}"
                )));
            }
        }
        self.lambda_rule.validate()?;
        self.fit.config(LossKind::Median, 0.0).validate()
    }

    fn resolved_censoring_bound(&self) -> Result<f64> {
        match self.censoring_bound {
            Some(c) => Ok(c),
            None => default_censoring_bound(&self.generation),
        }
    }

    /// Cells in report order: every (method, plan), then full-data fits.
    fn cells(&self) -> Vec<(usize, Option<usize>)> {
        let mut cells = Vec::new();
        for m in 0..self.methods.len() {
            for p in 0..self.plans.len() {
                cells.push((m, Some(p)));
            }
        }
        if self.compare_full_data {
            for m in 0..self.methods.len() {
                cells.push((m, None));
            }
        }
        cells
    }
}

/// `(100 / M) sum_m |{j in A : b_j = 0}| / |A|`.
pub fn metric_false_zeros(estimates: &[Vec<f64>], active_set: &[usize]) -> Result<f64> {
    if active_set.is_empty() {
        return Err(Error::EmptyActiveSet);
    }
    if estimates.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, found: 0 });
    }
    let misses: usize = estimates
        .iter()
        .map(|b| active_set.iter().filter(|&&j| b[j] == 0.0).count())
        .sum();
    Ok(100.0 * misses as f64 / (active_set.len() * estimates.len()) as f64)
}

/// `(100 / M) sum_m |{j not in A : b_j != 0}| / |A^c|`.
pub fn metric_false_nonzeros(estimates: &[Vec<f64>], active_set: &[usize], p: usize) -> Result<f64> {
    let inactive: Vec<usize> = (0..p).filter(|j| !active_set.contains(j)).collect();
    if inactive.is_empty() {
        return Err(Error::FullActiveSet);
    }
    if estimates.is_empty() {
        return Err(Error::TooFewSamples { needed: 1, found: 0 });
    }
    let hits: usize = estimates
        .iter()
        .map(|b| inactive.iter().filter(|&&j| b[j] != 0.0).count())
        .sum();
    Ok(100.0 * hits as f64 / (inactive.len() * estimates.len()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalitySummary {
    pub std_dev: f64,
    /// Anderson-Darling statistic with the small-sample correction
    /// `A^2 (1 + 0.75/n + 2.25/n^2)` for estimated mean and variance.
    pub ad_statistic: f64,
    pub p_value: f64,
}

pub const MIN_NORMALITY_SAMPLES: usize = 20;

/// Standard deviation and Anderson-Darling normality test.
pub fn normality_summary(deviations: &[f64]) -> Result<NormalitySummary> {
    let n = deviations.len();
    if n < MIN_NORMALITY_SAMPLES {
        return Err(Error::TooFewSamples {
            needed: MIN_NORMALITY_SAMPLES,
            found: n,
        });
    }
    let nf = n as f64;
    let mean = deviations.iter().sum::<f64>() / nf;
    let var = deviations.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let sd = var.sqrt();
    if !(sd > 0.0) || !sd.is_finite() {
        return Err(Error::DegenerateSample("deviations have zero variance".into()));
    }
    let std_normal = Normal::new(0.0, 1.0).expect("standard normal");
    let mut z: Vec<f64> = deviations
        .iter()
        .map(|d| std_normal.cdf((d - mean) / sd).clamp(1e-300, 1.0 - 1e-16))
        .collect();
    z.sort_by(f64::total_cmp);
    let s: f64 = (0..n)
        .map(|i| (2 * i + 1) as f64 * (z[i].ln() + (1.0 - z[n - 1 - i]).ln()))
        .sum();
    let a2 = -nf - s / nf;
    let a = a2 * (1.0 + 0.75 / nf + 2.25 / (nf * nf));
    let p = if a >= 0.6 {
        (1.2937 - 5.709 * a + 0.0186 * a * a).exp()
    } else if a >= 0.34 {
        (0.9177 - 4.279 * a - 1.38 * a * a).exp()
    } else if a >= 0.2 {
        1.0 - (-8.318 + 42.796 * a - 59.938 * a * a).exp()
    } else {
        1.0 - (-13.436 + 101.14 * a - 223.73 * a * a).exp()
    };
    Ok(NormalitySummary {
        std_dev: sd,
        ad_statistic: a,
        p_value: p.clamp(0.0, 1.0),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordinateNormality {
    pub coordinate: usize,
    pub summary: Option<NormalitySummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub method: String,
    pub family: LossFamily,
    /// Mean loss index over replications, when the family has one.
    pub mean_tau: Option<f64>,
    /// Plan label, or `full` for the full-data estimator.
    pub plan: String,
    pub k: usize,
    pub threshold: usize,
    pub replications: usize,
    pub false_zero_pct: f64,
    pub false_nonzero_pct: f64,
    /// Mean `||(b - beta0)_A||_1`.
    pub l1_bias_active: f64,
    /// Mean `||(b - beta0)_A||_2`.
    pub l2_error_active: f64,
    pub mean_support_size: f64,
    /// `sqrt(n) (b_j - beta0_j)` per active coordinate, one entry per
    /// replication.
    pub deviations: Vec<Vec<f64>>,
    pub normality: Vec<CoordinateNormality>,
    /// Counts of the chosen grid position `j = 1..20` over all fits in the
    /// cell (per group for aggregated plans); empty without a BIC rule.
    pub bic_histogram: Vec<usize>,
    /// Wall-clock time; kept out of the JSON so reports are reproducible.
    #[serde(skip)]
    pub mean_fit_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedReplication {
    pub index: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub replications_requested: usize,
    pub replications_completed: usize,
    pub n: usize,
    pub p: usize,
    pub active_set: Vec<usize>,
    pub censoring_bound: f64,
    pub mean_censoring_rate: f64,
    pub lambda_rule: LambdaRule,
    pub master_seed: u64,
    pub cells: Vec<CellReport>,
    pub failures: Vec<FailedReplication>,
}

struct CellOutcome {
    estimate: Vec<f64>,
    tau: Option<f64>,
    grid_choices: Vec<usize>,
    seconds: f64,
}

struct Replication {
    censoring_rate: f64,
    cells: Vec<CellOutcome>,
}

fn run_replication(
    spec: &SimulationSpec,
    c1: f64,
    seed: u64,
) -> Result<Replication> {
    let mut generation = spec.generation.clone();
    generation.seed = seed;
    let (dataset, latent): (SurvivalDataset, LatentDraws) = generate_with_latent(&generation, c1)?;
    let losses: Vec<LossKind> = spec
        .methods
        .iter()
        .map(|m| m.loss(&latent.errors))
        .collect::<Result<_>>()?;
    let full_weights = if spec.compare_full_data {
        Some(weights_with_floor(&dataset, spec.fit.weight_floor)?)
    } else {
        None
    };

    let mut cells = Vec::new();
    for (m, plan) in spec.cells() {
        let loss = losses[m];
        let config = spec.fit.config(loss, 0.0);
        let start = Instant::now();
        let (estimate, grid_choices) = match plan {
            Some(p) => {
                let agg = fit_aggregated_with(&dataset, &spec.plans[p], &config, &spec.lambda_rule)?;
                let choices = agg.groups.iter().filter_map(|g| g.grid_choice).collect();
                (agg.beta_check, choices)
            }
            None => {
                let weights = full_weights.as_ref().expect("full-data weights");
                let fit = fit_with_rule(&dataset, weights, &config, &spec.lambda_rule)?;
                let choice = fit.grid_choice().into_iter().collect();
                (fit.result.beta, choice)
            }
        };
        cells.push(CellOutcome {
            estimate,
            tau: match loss {
                LossKind::Quantile { tau } | LossKind::Expectile { tau } => Some(tau),
                _ => None,
            },
            grid_choices,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(Replication {
        censoring_rate: 1.0 - dataset.event_fraction(),
        cells,
    })
}

pub fn run_study(spec: &SimulationSpec) -> Result<SimulationReport> {
    spec.validate()?;
    let c1 = spec.resolved_censoring_bound()?;
    let outcomes: Vec<(usize, u64, Result<Replication>)> = (0..spec.replications)
        .into_par_iter()
        .map(|r| {
            let seed = derive_seed(spec.master_seed, r as u64);
            (r, seed, run_replication(spec, c1, seed))
        })
        .collect();

    let mut done = Vec::new();
    let mut failures = Vec::new();
    for (index, seed, outcome) in outcomes {
        match outcome {
            Ok(rep) => done.push(rep),
            Err(e) => {
                log::warn!("replication {index} (seed {seed}) failed: {e}");
                failures.push(FailedReplication {
                    index,
                    seed,
                    error: e.to_string(),
                });
            }
        }
    }
    if done.is_empty() {
        return Err(Error::NoConvergence(format!(
            "all {} replications failed",
            spec.replications
        )));
    }

    let active = spec.generation.active_set();
    let beta0 = &spec.generation.beta0;
    let p = spec.generation.p;
    let root_n = (spec.generation.n as f64).sqrt();
    let bic = matches!(spec.lambda_rule, LambdaRule::Bic { .. });

    let mut cells = Vec::new();
    for (c, (m, plan)) in spec.cells().into_iter().enumerate() {
        let estimates: Vec<Vec<f64>> = done.iter().map(|r| r.cells[c].estimate.clone()).collect();
        let count = estimates.len() as f64;
        let method = &spec.methods[m];
        let (label, k, threshold) = match plan {
            Some(pi) => {
                let pl = &spec.plans[pi];
                (pl.label(), pl.k, pl.vote_threshold())
            }
            None => ("full".to_string(), 1, 1),
        };
        let false_zero_pct = if active.is_empty() {
            0.0
        } else {
            metric_false_zeros(&estimates, &active)?
        };
        let false_nonzero_pct = if active.len() == p {
            0.0
        } else {
            metric_false_nonzeros(&estimates, &active, p)?
        };
        let l1 = estimates
            .iter()
            .map(|b| active.iter().map(|&j| (b[j] - beta0[j]).abs()).sum::<f64>())
            .sum::<f64>()
            / count;
        let l2 = estimates
            .iter()
            .map(|b| active.iter().map(|&j| (b[j] - beta0[j]).powi(2)).sum::<f64>().sqrt())
            .sum::<f64>()
            / count;
        let support = estimates
            .iter()
            .map(|b| b.iter().filter(|v| **v != 0.0).count() as f64)
            .sum::<f64>()
            / count;
        let deviations: Vec<Vec<f64>> = active
            .iter()
            .map(|&j| estimates.iter().map(|b| root_n * (b[j] - beta0[j])).collect())
            .collect();
        let normality = active
            .iter()
            .zip(&deviations)
            .map(|(&j, d)| CoordinateNormality {
                coordinate: j,
                summary: normality_summary(d).ok(),
            })
            .collect();
        let mut histogram = if bic { vec![0; GRID_SIZE] } else { Vec::new() };
        for r in &done {
            for &g in &r.cells[c].grid_choices {
                histogram[g - 1] += 1;
            }
        }
        let taus: Vec<f64> = done.iter().filter_map(|r| r.cells[c].tau).collect();
        cells.push(CellReport {
            method: method_label(method),
            family: method.family,
            mean_tau: (!taus.is_empty()).then(|| taus.iter().sum::<f64>() / taus.len() as f64),
            plan: label,
            k,
            threshold,
            replications: done.len(),
            false_zero_pct,
            false_nonzero_pct,
            l1_bias_active: l1,
            l2_error_active: l2,
            mean_support_size: support,
            deviations,
            normality,
            bic_histogram: histogram,
            mean_fit_seconds: done.iter().map(|r| r.cells[c].seconds).sum::<f64>() / count,
        });
    }

    Ok(SimulationReport {
        replications_requested: spec.replications,
        replications_completed: done.len(),
        n: spec.generation.n,
        p,
        active_set: active,
        censoring_bound: c1,
        mean_censoring_rate: done.iter().map(|r| r.censoring_rate).sum::<f64>() / done.len() as f64,
        lambda_rule: spec.lambda_rule.clone(),
        master_seed: spec.master_seed,
        cells,
        failures,
    })
}

fn method_label(m: &MethodSpec) -> String {
    match (m.family, m.tau) {
        (LossFamily::CompositeQuantile, _) => format!("composite_quantile(J={})", m.levels),
        (LossFamily::Quantile | LossFamily::Expectile, Some(t)) => format!("{}(tau={t})", m.family),
        (LossFamily::Quantile | LossFamily::Expectile, None) => format!("{}(tau=estimated)", m.family),
        (f, _) => f.to_string(),
    }
}

impl SimulationReport {
    pub fn write_selection_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(
            out,
            "method,plan,K,w,replications,false_zero_pct,false_nonzero_pct,l1_bias_active,l2_error_active,mean_support_size"
        )?;
        for c in &self.cells {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                c.method,
                c.plan,
                c.k,
                c.threshold,
                c.replications,
                c.false_zero_pct,
                c.false_nonzero_pct,
                c.l1_bias_active,
                c.l2_error_active,
                c.mean_support_size
            )?;
        }
        Ok(())
    }

    pub fn write_deviations_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "method,plan,replication,coordinate,deviation")?;
        for c in &self.cells {
            for (a, devs) in self.active_set.iter().zip(&c.deviations) {
                for (r, d) in devs.iter().enumerate() {
                    writeln!(out, "{},{},{},{},{}", c.method, c.plan, r, a + 1, d)?;
                }
            }
        }
        Ok(())
    }

    pub fn write_normality_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "method,plan,coordinate,std_dev,ad_statistic,p_value")?;
        for c in &self.cells {
            for n in &c.normality {
                match &n.summary {
                    Some(s) => writeln!(
                        out,
                        "{},{},{},{},{},{}",
                        c.method,
                        c.plan,
                        n.coordinate + 1,
                        s.std_dev,
                        s.ad_statistic,
                        s.p_value
                    )?,
                    None => writeln!(out, "{},{},{},,,", c.method, c.plan, n.coordinate + 1)?,
                }
            }
        }
        Ok(())
    }

    pub fn write_bic_histogram_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "method,plan,j,count")?;
        for c in &self.cells {
            for (j, count) in c.bic_histogram.iter().enumerate() {
                writeln!(out, "{},{},{},{}", c.method, c.plan, j + 1, count)?;
            }
        }
        Ok(())
    }

    pub fn write_timings_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "method,plan,mean_fit_seconds")?;
        for c in &self.cells {
            writeln!(out, "{},{},{}", c.method, c.plan, c.mean_fit_seconds)?;
        }
        Ok(())
    }

    /// Writes `report.json` and the CSV tables into `dir`; on failure every
    /// file written so far is removed.
    pub fn write_outputs(&self, dir: impl AsRef<Path>) -> Result<Vec<std::path::PathBuf>> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        let result = self.write_all(dir, &mut written);
        if result.is_err() {
            for f in &written {
                let _ = std::fs::remove_file(f);
            }
        }
        result.map(|_| written)
    }

    fn write_all(&self, dir: &Path, written: &mut Vec<std::path::PathBuf>) -> Result<()> {
        type Writer = fn(&SimulationReport, &mut Vec<u8>) -> std::io::Result<()>;
        let json: Writer = |r, out| {
            serde_json::to_writer_pretty(&mut *out, r)?;
            out.push(b'\n');
            Ok(())
        };
        let files: [(&str, Writer); 6] = [
            ("report.json", json),
            ("selection.csv", |r, o| r.write_selection_csv(o)),
            ("deviations.csv", |r, o| r.write_deviations_csv(o)),
            ("normality.csv", |r, o| r.write_normality_csv(o)),
            ("bic_histogram.csv", |r, o| r.write_bic_histogram_csv(o)),
            ("timings.csv", |r, o| r.write_timings_csv(o)),
        ];
        for (name, write) in files {
            let path = dir.join(name);
            let mut buf = Vec::new();
            write(self, &mut buf).map_err(|e| Error::io(&path, e))?;
            written.push(path.clone());
            std::fs::write(&path, buf).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Settings of the wall-clock comparison across group counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSpec {
    pub generation: GenerationSpec,
    pub methods: Vec<MethodSpec>,
    pub ks: Vec<usize>,
    #[serde(default = "default_bench_threshold")]
    pub threshold: usize,
    #[serde(default = "default_bench_rule")]
    pub lambda_rule: LambdaRule,
    #[serde(default)]
    pub fit: FitOptions,
}

fn default_bench_threshold() -> usize {
    5
}

fn default_bench_rule() -> LambdaRule {
    LambdaRule::GridIndex { j: 1 }
}

impl BenchSpec {
    /// Expectile, median and quantile at `n`, `p`, `K in {1, 5, 25, 50}`.
    pub fn reference_design(n: usize, p: usize, seed: u64) -> Self {
        Self {
            generation: GenerationSpec::reference_design(n, p, seed),
            methods: [LossFamily::Expectile, LossFamily::Median, LossFamily::Quantile]
                .into_iter()
                .map(MethodSpec::new)
                .collect(),
            ks: vec![1, 5, 25, 50],
            threshold: default_bench_threshold(),
            lambda_rule: default_bench_rule(),
            fit: FitOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub k: usize,
    /// Method label or `total`.
    pub phase: String,
    pub seconds: f64,
}

/// Times the aggregated pipeline (weights, pilot and penalized fits, vote)
/// for every `K`; a `K = 1` row is always included as the full-data
/// baseline.
pub fn timing_benchmark(spec: &BenchSpec) -> Result<Vec<TimingRow>> {
    let (dataset, latent) = generate_with_latent(&spec.generation, default_censoring_bound(&spec.generation)?)?;
    let mut ks = spec.ks.clone();
    if !ks.contains(&1) {
        ks.insert(0, 1);
    }
    let mut rows = Vec::new();
    for &k in &ks {
        let w = spec.threshold.min(k).max(1);
        let plan = AggregationPlan::new(k).with_threshold(w);
        let mut total = 0.0;
        for method in &spec.methods {
            let config = spec.fit.config(method.loss(&latent.errors)?, 0.0);
            let start = Instant::now();
            fit_aggregated_with(&dataset, &plan, &config, &spec.lambda_rule)?;
            let seconds = start.elapsed().as_secs_f64().max(f64::MIN_POSITIVE);
            total += seconds;
            rows.push(TimingRow {
                k,
                phase: method_label(method),
                seconds,
            });
        }
        rows.push(TimingRow {
            k,
            phase: "total".into(),
            seconds: total,
        });
    }
    Ok(rows)
}

pub fn write_timing_csv<W: Write>(rows: &[TimingRow], out: &mut W) -> std::io::Result<()> {
    writeln!(out, "K,phase,seconds")?;
    for r in rows {
        writeln!(out, "{},{},{}", r.k, r.phase, r.seconds)?;
    }
    Ok(())
}
