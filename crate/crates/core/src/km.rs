//! Product-limit estimate of the censoring survival function `G(t) = P(C > t)`
//! and the inverse-probability-of-censoring weights built from it.
//!
//! Censorings play the role of "deaths": the curve jumps only at censored
//! follow-up times. At tied times failures are removed from the risk set
//! before the censorings.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SurvivalDataset;
use crate::error::{Error, Result};

/// Right-continuous step function; `1` before the first jump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CensoringSurvivalCurve {
    pub jump_times: Vec<f64>,
    pub values: Vec<f64>,
    pub n_fit: usize,
}

impl CensoringSurvivalCurve {
    pub fn evaluate(&self, t: f64) -> f64 {
        // number of jumps at or before t
        let k = self.jump_times.partition_point(|&s| s <= t);
        if k == 0 {
            1.0
        } else {
            self.values[k - 1]
        }
    }

    pub fn write_csv_to<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "time,survival")?;
        writeln!(out, "0,1")?;
        for (t, g) in self.jump_times.iter().zip(&self.values) {
            writeln!(out, "{t},{g}")?;
        }
        Ok(())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv_to(&mut file).map_err(|e| Error::io(path, e))
    }
}

pub fn fit_censoring_km(dataset: &SurvivalDataset) -> CensoringSurvivalCurve {
    let y = dataset.y();
    let delta = dataset.delta();
    let n = dataset.n();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| y[a].total_cmp(&y[b]));

    let mut jump_times = Vec::new();
    let mut values = Vec::new();
    let mut survival = 1.0;
    let mut at_risk = n;
    let mut k = 0;
    while k < n {
        let t = y[order[k]];
        let mut failures = 0;
        let mut censored = 0;
        while k < n && y[order[k]] == t {
            if delta[order[k]] {
                failures += 1;
            } else {
                censored += 1;
            }
            k += 1;
        }
        if censored > 0 {
            let exposed = at_risk - failures;
            survival *= (exposed - censored) as f64 / exposed as f64;
            jump_times.push(t);
            values.push(survival);
        }
        at_risk -= failures + censored;
    }
    CensoringSurvivalCurve {
        jump_times,
        values,
        n_fit: n,
    }
}

/// Per-observation weights `delta_i / max(G(Y_i), floor)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IpcwWeights {
    pub w: Vec<f64>,
    pub floor_used: f64,
}

impl IpcwWeights {
    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> IpcwWeights {
        IpcwWeights {
            w: indices.iter().map(|&i| self.w[i]).collect(),
            floor_used: self.floor_used,
        }
    }

    /// Same weights multiplied by `factor > 0`.
    pub fn scaled(&self, factor: f64) -> IpcwWeights {
        IpcwWeights {
            w: self.w.iter().map(|v| v * factor).collect(),
            floor_used: self.floor_used,
        }
    }
}

pub fn ipcw_weights(
    dataset: &SurvivalDataset,
    curve: &CensoringSurvivalCurve,
    floor: f64,
) -> Result<IpcwWeights> {
    if !(floor > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "weight floor must be positive, got {floor}"
        )));
    }
    let w: Vec<f64> = dataset
        .y()
        .iter()
        .zip(dataset.delta())
        .map(|(&y, &d)| {
            if d {
                1.0 / curve.evaluate(y).max(floor)
            } else {
                0.0
            }
        })
        .collect();
    if w.iter().all(|v| *v == 0.0) {
        return Err(Error::DegenerateWeights);
    }
    Ok(IpcwWeights {
        w,
        floor_used: floor,
    })
}

/// Fits the censoring curve on `dataset` and weights it with floor `1 / n`.
pub fn default_weights(dataset: &SurvivalDataset) -> Result<IpcwWeights> {
    weights_with_floor(dataset, None)
}

/// Fits the censoring curve on `dataset`; a missing floor means `1 / n`.
pub fn weights_with_floor(dataset: &SurvivalDataset, floor: Option<f64>) -> Result<IpcwWeights> {
    let curve = fit_censoring_km(dataset);
    ipcw_weights(dataset, &curve, floor.unwrap_or(1.0 / curve.n_fit as f64))
}
