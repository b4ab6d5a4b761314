//! Right-censored observations, CSV ingestion and synthetic data.
//!
//! A dataset holds `n` triples `(y, delta, x)` where `y = min(T, C)` is the
//! observed follow-up time, `delta = 1{T <= C}` and `x` the `p` covariates.
//! The synthetic generator follows the accelerated failure time design
//! `log T = b0 + x'beta + eps` with Gaussian covariates, standard (max)
//! Gumbel errors and `C ~ Uniform[0, c1]`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gumbel, Open01, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One right-censored observation.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub y: f64,
    pub delta: bool,
    pub x: Vec<f64>,
}

/// Immutable collection of observations sharing the covariate dimension.
///
/// Covariates are stored row-major so a row is a contiguous slice.
#[derive(Debug, Clone, PartialEq)]
pub struct SurvivalDataset {
    y: Vec<f64>,
    delta: Vec<bool>,
    x: Vec<f64>,
    p: usize,
}

impl SurvivalDataset {
    pub fn new(observations: Vec<Observation>) -> Result<Self> {
        let first = observations
            .first()
            .ok_or_else(|| Error::InvalidData("dataset has no observations".into()))?;
        let p = first.x.len();
        let n = observations.len();
        let mut y = Vec::with_capacity(n);
        let mut delta = Vec::with_capacity(n);
        let mut x = Vec::with_capacity(n * p);
        for (i, obs) in observations.into_iter().enumerate() {
            if obs.x.len() != p {
                return Err(Error::InvalidData(format!(
                    "observation {i} has {} covariates, expected {p}",
                    obs.x.len()
                )));
            }
            y.push(obs.y);
            delta.push(obs.delta);
            x.extend_from_slice(&obs.x);
        }
        Self::from_parts(y, delta, x, p)
    }

    /// Builds a dataset from column vectors and a row-major covariate block.
    pub fn from_parts(y: Vec<f64>, delta: Vec<bool>, x: Vec<f64>, p: usize) -> Result<Self> {
        let n = y.len();
        if n == 0 {
            return Err(Error::InvalidData("dataset has no observations".into()));
        }
        if delta.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: delta.len(),
            });
        }
        if x.len() != n * p {
            return Err(Error::DimensionMismatch {
                expected: n * p,
                found: x.len(),
            });
        }
        if let Some(i) = y.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidData(format!(
                "observation {i}: follow-up time {} is not a positive finite number",
                y[i]
            )));
        }
        if let Some(k) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidData(format!(
                "observation {}: covariate {} is not finite",
                k / p.max(1),
                k % p.max(1) + 1
            )));
        }
        Ok(Self { y, delta, x, p })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn delta(&self) -> &[bool] {
        &self.delta
    }

    /// Row-major `n x p` covariate block.
    pub fn covariates(&self) -> &[f64] {
        &self.x
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    pub fn observation(&self, i: usize) -> Observation {
        Observation {
            y: self.y[i],
            delta: self.delta[i],
            x: self.row(i).to_vec(),
        }
    }

    pub fn log_y(&self) -> Vec<f64> {
        self.y.iter().map(|v| v.ln()).collect()
    }

    /// Number of observed failures.
    pub fn events(&self) -> usize {
        self.delta.iter().filter(|d| **d).count()
    }

    pub fn event_fraction(&self) -> f64 {
        self.events() as f64 / self.n() as f64
    }

    /// Copies the rows listed in `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut y = Vec::with_capacity(indices.len());
        let mut delta = Vec::with_capacity(indices.len());
        let mut x = Vec::with_capacity(indices.len() * self.p);
        for &i in indices {
            if i >= self.n() {
                return Err(Error::InvalidData(format!(
                    "row index {i} out of range for {} observations",
                    self.n()
                )));
            }
            y.push(self.y[i]);
            delta.push(self.delta[i]);
            x.extend_from_slice(self.row(i));
        }
        Self::from_parts(y, delta, x, self.p)
    }
}

/// Reads a dataset with header `y,delta,x1,...,xp`.
pub fn load_csv(path: impl AsRef<Path>) -> Result<SurvivalDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file)
}

pub fn read_csv<R: std::io::Read>(reader: R) -> Result<SurvivalDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| Error::InvalidData(format!("cannot read header: {e}")))?
        .clone();
    let column = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let y_col = column("y")?;
    let delta_col = column("delta")?;
    let covariate_cols = header
        .iter()
        .filter(|h| h.starts_with('x') && h[1..].parse::<usize>().is_ok())
        .count();
    if covariate_cols == 0 {
        return Err(Error::MissingColumn("x1".into()));
    }
    let x_cols = (1..=covariate_cols)
        .map(|j| column(&format!("x{j}")))
        .collect::<Result<Vec<_>>>()?;
    let width = header.len();
    let p = x_cols.len();

    let mut y = Vec::new();
    let mut delta = Vec::new();
    let mut x = Vec::new();
    for (k, record) in rdr.records().enumerate() {
        // header is line 1
        let line = k + 2;
        let record = record.map_err(|e| Error::InvalidData(format!("line {line}: {e}")))?;
        if record.len() != width {
            return Err(Error::RaggedRow {
                line,
                expected: width,
                found: record.len(),
            });
        }
        let number = |s: &str| {
            s.parse::<f64>().map_err(|_| Error::BadNumber {
                line,
                value: s.to_string(),
            })
        };
        let yi = number(&record[y_col])?;
        if !(yi > 0.0) || !yi.is_finite() {
            return Err(Error::NonPositiveTime { line, value: yi });
        }
        let di = match &record[delta_col] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::NonBinaryDelta {
                    line,
                    value: other.to_string(),
                })
            }
        };
        y.push(yi);
        delta.push(di);
        for &c in &x_cols {
            x.push(number(&record[c])?);
        }
    }
    SurvivalDataset::from_parts(y, delta, x, p)
}

pub fn write_csv(dataset: &SurvivalDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_csv_to(dataset, &mut out).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Floats are written in shortest round-trip form, so reading back is exact.
pub fn write_csv_to<W: Write>(dataset: &SurvivalDataset, out: &mut W) -> std::io::Result<()> {
    write!(out, "y,delta")?;
    for j in 1..=dataset.p() {
        write!(out, ",x{j}")?;
    }
    writeln!(out)?;
    for i in 0..dataset.n() {
        write!(out, "{},{}", dataset.y[i], u8::from(dataset.delta[i]))?;
        for v in dataset.row(i) {
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ErrorFamily {
    /// Max-Gumbel, CDF `exp(-exp(-x))`.
    #[default]
    StandardGumbel,
}

/// Parameters of the synthetic accelerated failure time design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationSpec {
    pub n: usize,
    pub p: usize,
    pub beta0: Vec<f64>,
    #[serde(default)]
    pub intercept: f64,
    #[serde(default = "default_design_mean")]
    pub design_mean: f64,
    #[serde(default)]
    pub error_family: ErrorFamily,
    #[serde(default = "default_censoring_rate")]
    pub target_censoring_rate: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_design_mean() -> f64 {
    1.0
}

fn default_censoring_rate() -> f64 {
    0.25
}

impl GenerationSpec {
    /// `beta0 = (1, -2, 0, ..., 0)`, `N(1, 1)` design, no intercept, 25% censoring.
    pub fn reference_design(n: usize, p: usize, seed: u64) -> Self {
        let mut beta0 = vec![0.0; p];
        if p > 0 {
            beta0[0] = 1.0;
        }
        if p > 1 {
            beta0[1] = -2.0;
        }
        Self {
            n,
            p,
            beta0,
            intercept: 0.0,
            design_mean: 1.0,
            error_family: ErrorFamily::StandardGumbel,
            target_censoring_rate: 0.25,
            seed,
        }
    }

    pub fn active_set(&self) -> Vec<usize> {
        (0..self.p).filter(|&j| self.beta0[j] != 0.0).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidConfig("n must be at least 1".into()));
        }
        if self.beta0.len() != self.p {
            return Err(Error::InvalidConfig(format!(
                "beta0 has {} entries, p = {}",
                self.beta0.len(),
                self.p
            )));
        }
        if !(0.0..1.0).contains(&self.target_censoring_rate) {
            return Err(Error::InvalidConfig(format!(
                "target censoring rate {} outside [0, 1)",
                self.target_censoring_rate
            )));
        }
        if self.beta0.iter().any(|b| !b.is_finite())
            || !self.intercept.is_finite()
            || !self.design_mean.is_finite()
        {
            return Err(Error::InvalidConfig("non-finite generation parameter".into()));
        }
        Ok(())
    }
}

/// Unobserved quantities behind a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDraws {
    pub errors: Vec<f64>,
    pub failure_times: Vec<f64>,
    pub censoring_times: Vec<f64>,
}

/// Draws covariates, error and censoring uniform for one observation, in that order.
fn draw_observation<R: Rng>(
    spec: &GenerationSpec,
    rng: &mut R,
    x: &mut Vec<f64>,
) -> (f64, f64, f64) {
    let gumbel = Gumbel::new(0.0, 1.0).expect("unit scale");
    let mut linear = spec.intercept;
    for j in 0..spec.p {
        let z: f64 = StandardNormal.sample(rng);
        let xj = spec.design_mean + z;
        linear += spec.beta0[j] * xj;
        x.push(xj);
    }
    let eps = match spec.error_family {
        ErrorFamily::StandardGumbel => gumbel.sample(rng),
    };
    let u: f64 = Open01.sample(rng);
    (eps, (linear + eps).exp(), u)
}

/// Generates a dataset with censoring bound `c1`; `f64::INFINITY` disables censoring.
pub fn generate_dataset(spec: &GenerationSpec, c1: f64) -> Result<SurvivalDataset> {
    generate_with_latent(spec, c1).map(|(d, _)| d)
}

pub fn generate_with_latent(
    spec: &GenerationSpec,
    c1: f64,
) -> Result<(SurvivalDataset, LatentDraws)> {
    spec.validate()?;
    if !(c1 > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "censoring bound must be positive, got {c1}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.n;
    let mut x = Vec::with_capacity(n * spec.p);
    let mut y = Vec::with_capacity(n);
    let mut delta = Vec::with_capacity(n);
    let mut latent = LatentDraws {
        errors: Vec::with_capacity(n),
        failure_times: Vec::with_capacity(n),
        censoring_times: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let (eps, t, u) = draw_observation(spec, &mut rng, &mut x);
        let c = if c1.is_finite() { c1 * u } else { f64::INFINITY };
        // underflow of exp() would give a zero time
        let t = t.max(f64::MIN_POSITIVE);
        y.push(t.min(c));
        delta.push(t <= c);
        latent.errors.push(eps);
        latent.failure_times.push(t);
        latent.censoring_times.push(c);
    }
    Ok((SurvivalDataset::from_parts(y, delta, x, spec.p)?, latent))
}

const CALIBRATION_SAMPLE: usize = 200_000;
const CALIBRATION_SEED: u64 = 0xC0FF_EE00_2545_F491;

/// Fixed Monte Carlo sample of failure times used to tune the censoring bound.
#[derive(Debug, Clone)]
pub struct CensoringCalibrator {
    failure_times: Vec<f64>,
}

impl CensoringCalibrator {
    pub fn new(spec: &GenerationSpec) -> Result<Self> {
        Self::with_sample_size(spec, CALIBRATION_SAMPLE)
    }

    pub fn with_sample_size(spec: &GenerationSpec, size: usize) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(CALIBRATION_SEED);
        let mut scratch = Vec::with_capacity(spec.p);
        let failure_times = (0..size)
            .map(|_| {
                scratch.clear();
                draw_observation(spec, &mut rng, &mut scratch).1
            })
            .collect();
        Ok(Self { failure_times })
    }

    /// Monte Carlo estimate of `P(C < T)` for `C ~ Uniform[0, c1]`.
    ///
    /// Uses `E[min(T, c1) / c1]`, the conditional expectation of the censoring
    /// indicator given `T`; it is continuous and non-increasing in `c1`.
    pub fn fraction_at(&self, c1: f64) -> f64 {
        if !c1.is_finite() {
            return 0.0;
        }
        let total: f64 = self
            .failure_times
            .iter()
            .map(|&t| (t / c1).min(1.0))
            .sum();
        total / self.failure_times.len() as f64
    }

    pub fn calibrate(&self, target_rate: f64, tol: f64) -> Result<f64> {
        if !(target_rate > 0.0 && target_rate < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "target censoring rate must lie in (0, 1), got {target_rate}"
            )));
        }
        let mut lo = 1.0;
        let mut hi = 1.0;
        let mut steps = 0;
        while self.fraction_at(lo) < target_rate {
            lo *= 0.5;
            steps += 1;
            if steps > 200 {
                return Err(Error::NoConvergence(
                    "could not bracket censoring bound from below".into(),
                ));
            }
        }
        steps = 0;
        while self.fraction_at(hi) > target_rate {
            hi *= 2.0;
            steps += 1;
            if steps > 200 {
                return Err(Error::NoConvergence(
                    "could not bracket censoring bound from above".into(),
                ));
            }
        }
        // geometric bisection down to a relative bracket width of 1e-12
        for _ in 0..200 {
            if hi / lo - 1.0 < 1e-12 {
                break;
            }
            let mid = (lo * hi).sqrt();
            if self.fraction_at(mid) > target_rate {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let c1 = (lo * hi).sqrt();
        let achieved = self.fraction_at(c1);
        if (achieved - target_rate).abs() > tol {
            return Err(Error::NoConvergence(format!(
                "censoring fraction {achieved:.5} misses target {target_rate} by more than {tol}"
            )));
        }
        Ok(c1)
    }
}

/// Bound `c1` whose censoring fraction matches `target_rate` within `tol`.
pub fn calibrate_censoring_bound(spec: &GenerationSpec, target_rate: f64, tol: f64) -> Result<f64> {
    CensoringCalibrator::new(spec)?.calibrate(target_rate, tol)
}

/// Censoring bound implied by the design's own target rate (`inf` when it is zero).
pub fn default_censoring_bound(spec: &GenerationSpec) -> Result<f64> {
    if spec.target_censoring_rate == 0.0 {
        spec.validate()?;
        return Ok(f64::INFINITY);
    }
    calibrate_censoring_bound(spec, spec.target_censoring_rate, 1e-3)
}

/// Seed of replication `index` under `master`; a pure function so parallel
/// runs reproduce serial ones.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix(splitmix(master) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03))
}
