//! Weighted check-loss regression as a linear program.
//!
//! Minimizes `sum_i rho_{tau_i}(b_i - a_i' theta)` over `theta`. Observation
//! weights are folded into the rows beforehand (`rho` is positively
//! homogeneous) and an adaptive-LASSO term `mu_k |theta_k|` enters as the
//! pseudo-row `a = 2 mu_k e_k, b = 0, tau = 1/2`, whose two split residuals
//! are the auxiliary nonnegative variables of the penalty.
//!
//! The bounded dual `max b'v  s.t.  A'v = A'(1 - tau), 0 <= v <= 1` is solved
//! with a Mehrotra predictor-corrector (Frisch-Newton) interior-point method;
//! the primal coefficients are the negated dual multipliers of the equality
//! constraint. The interior iterate is then moved to an optimal vertex so
//! that zero coefficients come out exactly zero.

use nalgebra::{DMatrix, DVector};

use crate::loss::check_loss;

const STEP_DAMPING: f64 = 0.99995;

/// Rows of the LP; `a` is row-major `m x d`.
#[derive(Debug, Clone, Default)]
pub(crate) struct LpRows {
    pub d: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub tau: Vec<f64>,
    /// Coordinate penalized by each pseudo-row, `None` for data rows.
    pub pseudo: Vec<Option<usize>>,
}

impl LpRows {
    pub fn new(d: usize) -> Self {
        Self {
            d,
            ..Self::default()
        }
    }

    pub fn m(&self) -> usize {
        self.b.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.a[i * self.d..(i + 1) * self.d]
    }

    pub fn push(&mut self, row: &[f64], b: f64, tau: f64) {
        debug_assert_eq!(row.len(), self.d);
        self.a.extend_from_slice(row);
        self.b.push(b);
        self.tau.push(tau);
        self.pseudo.push(None);
    }

    pub fn push_penalty(&mut self, coord: usize, mu: f64) {
        let start = self.a.len();
        self.a.resize(start + self.d, 0.0);
        self.a[start + coord] = 2.0 * mu;
        self.b.push(0.0);
        self.tau.push(0.5);
        self.pseudo.push(Some(coord));
    }

    fn residual(&self, i: usize, theta: &[f64]) -> f64 {
        self.b[i] - dot(self.row(i), theta)
    }

    pub fn objective(&self, theta: &[f64]) -> f64 {
        (0..self.m())
            .map(|i| check_loss(self.tau[i], self.residual(i, theta)))
            .sum()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LpSolution {
    pub theta: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Largest violation of the dual box at the returned vertex; zero
    /// certifies optimality.
    pub dual_violation: f64,
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Lower triangle of `sum_i q_i a_i a_i'`.
fn weighted_gram(rows: &LpRows, q: &[f64]) -> DMatrix<f64> {
    let d = rows.d;
    let mut g = vec![0.0; d * d];
    for (i, &qi) in q.iter().enumerate() {
        let r = rows.row(i);
        for j in 0..d {
            let v = qi * r[j];
            if v == 0.0 {
                continue;
            }
            let gj = &mut g[j * d..j * d + j + 1];
            for (gk, rk) in gj.iter_mut().zip(&r[..=j]) {
                *gk += v * rk;
            }
        }
    }
    let mut m = DMatrix::zeros(d, d);
    for j in 0..d {
        for k in 0..=j {
            m[(j, k)] = g[j * d + k];
            m[(k, j)] = g[j * d + k];
        }
    }
    m
}

struct Factor(nalgebra::Cholesky<f64, nalgebra::Dyn>);

impl Factor {
    fn new(mut m: DMatrix<f64>) -> Option<Self> {
        if let Some(c) = m.clone().cholesky() {
            return Some(Factor(c));
        }
        let d = m.nrows();
        let scale = (0..d).map(|j| m[(j, j)].abs()).fold(0.0, f64::max).max(1e-300);
        let mut ridge = 1e-13 * scale;
        for _ in 0..8 {
            for j in 0..d {
                m[(j, j)] += ridge;
            }
            if let Some(c) = m.clone().cholesky() {
                return Some(Factor(c));
            }
            ridge *= 100.0;
        }
        None
    }

    fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        self.0
            .solve(&DVector::from_column_slice(rhs))
            .as_slice()
            .to_vec()
    }
}

/// Largest step in `[0, inf)` keeping `v + step * dv >= 0`.
fn max_step(v: &[f64], dv: &[f64]) -> f64 {
    v.iter()
        .zip(dv)
        .filter(|(_, d)| **d < 0.0)
        .map(|(x, d)| -x / d)
        .fold(1e20, f64::min)
}

fn accumulate(rows: &LpRows, coef: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rows.d];
    for (i, &c) in coef.iter().enumerate() {
        if c == 0.0 {
            continue;
        }
        for (o, a) in out.iter_mut().zip(rows.row(i)) {
            *o += c * a;
        }
    }
    out
}

pub(crate) fn solve(rows: &LpRows, max_iter: usize, rel_gap: f64) -> LpSolution {
    let m = rows.m();
    let d = rows.d;
    if d == 0 {
        return LpSolution {
            theta: Vec::new(),
            iterations: 0,
            converged: true,
            dual_violation: 0.0,
        };
    }
    // dual variable v in [0, 1] with slack s = 1 - v
    let mut x: Vec<f64> = rows.tau.iter().map(|t| 1.0 - t).collect();
    let mut s: Vec<f64> = rows.tau.clone();
    let c: Vec<f64> = rows.b.iter().map(|v| -v).collect();

    // least-squares start
    let ones = vec![1.0; m];
    let gram = weighted_gram(rows, &ones);
    let Some(factor) = Factor::new(gram) else {
        return degenerate_solution(rows);
    };
    let mut y = factor.solve(&accumulate(rows, &c));

    // dual slacks with z - w = c - A'y, both strictly positive
    let mut r: Vec<f64> = (0..m).map(|i| c[i] - dot(rows.row(i), &y)).collect();
    let shift = 1e-3 * r.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-8);
    let mut z: Vec<f64> = r.iter().map(|v| v.max(0.0) + shift).collect();
    let mut w: Vec<f64> = r.iter().map(|v| (-v).max(0.0) + shift).collect();

    let mut q = vec![0.0; m];
    let mut dx = vec![0.0; m];
    let mut ds = vec![0.0; m];
    let mut dz = vec![0.0; m];
    let mut dw = vec![0.0; m];
    let mut iterations = 0;
    let mut converged = false;

    loop {
        // complementarity equals the duality gap at feasible iterates and
        // does not suffer from cancellation
        let gap = dot(&z, &x) + dot(&w, &s);
        let scale = rows.objective(&y.iter().map(|v| -v).collect::<Vec<_>>()).abs();
        if gap <= rel_gap * scale.max(1.0) {
            converged = true;
            break;
        }
        if iterations >= max_iter {
            break;
        }
        iterations += 1;

        for i in 0..m {
            q[i] = 1.0 / (z[i] / x[i] + w[i] / s[i]);
            r[i] = z[i] - w[i];
        }
        let Some(factor) = Factor::new(weighted_gram(rows, &q)) else {
            break;
        };
        let qr: Vec<f64> = q.iter().zip(&r).map(|(a, b)| a * b).collect();
        let mut rhs = accumulate(rows, &qr);
        let mut dy = factor.solve(&rhs);
        for i in 0..m {
            dx[i] = q[i] * (dot(rows.row(i), &dy) - r[i]);
            ds[i] = -dx[i];
            dz[i] = -z[i] * (dx[i] / x[i] + 1.0);
            dw[i] = -w[i] * (ds[i] / s[i] + 1.0);
        }
        let mut fp = (STEP_DAMPING * max_step(&x, &dx).min(max_step(&s, &ds))).min(1.0);
        let mut fd = (STEP_DAMPING * max_step(&w, &dw).min(max_step(&z, &dz))).min(1.0);

        if fp.min(fd) < 1.0 {
            // Mehrotra corrector
            let mu0 = dot(&z, &x) + dot(&w, &s);
            let mut g = 0.0;
            for i in 0..m {
                g += (z[i] + fd * dz[i]) * (x[i] + fp * dx[i])
                    + (w[i] + fd * dw[i]) * (s[i] + fp * ds[i]);
            }
            let mu = mu0 * (g / mu0).powi(3) / (2.0 * m as f64);
            let mut corr = vec![0.0; m];
            let mut xi = vec![0.0; m];
            let mut dxdz = vec![0.0; m];
            let mut dsdw = vec![0.0; m];
            for i in 0..m {
                dxdz[i] = dx[i] * dz[i];
                dsdw[i] = ds[i] * dw[i];
                xi[i] = mu * (1.0 / x[i] - 1.0 / s[i]);
                corr[i] = q[i] * (dxdz[i] - dsdw[i] - xi[i]);
            }
            for (rh, cv) in rhs.iter_mut().zip(accumulate(rows, &corr)) {
                *rh += cv;
            }
            dy = factor.solve(&rhs);
            for i in 0..m {
                dx[i] = q[i] * (dot(rows.row(i), &dy) + xi[i] - r[i] - dxdz[i] + dsdw[i]);
                ds[i] = -dx[i];
                dz[i] = mu / x[i] - z[i] - z[i] * dx[i] / x[i] - dxdz[i];
                dw[i] = mu / s[i] - w[i] - w[i] * ds[i] / s[i] - dsdw[i];
            }
            fp = (STEP_DAMPING * max_step(&x, &dx).min(max_step(&s, &ds))).min(1.0);
            fd = (STEP_DAMPING * max_step(&w, &dw).min(max_step(&z, &dz))).min(1.0);
        }

        for i in 0..m {
            x[i] += fp * dx[i];
            s[i] += fp * ds[i];
            w[i] += fd * dw[i];
            z[i] += fd * dz[i];
        }
        for (yj, dyj) in y.iter_mut().zip(&dy) {
            *yj += fd * dyj;
        }
        if !(fp > 0.0 && fd > 0.0) || y.iter().any(|v| !v.is_finite()) {
            // numerical breakdown: keep the last sound iterate
            for (yj, dyj) in y.iter_mut().zip(&dy) {
                *yj -= fd * dyj;
            }
            break;
        }
    }

    let interior: Vec<f64> = y.iter().map(|v| -v).collect();
    let interior_objective = rows.objective(&interior);
    let tolerance = 1e-9 * interior_objective.abs().max(1.0);

    // Rank rows by how far their dual sits inside (0, 1), then by residual.
    let mut by_dual: Vec<usize> = (0..m).collect();
    by_dual.sort_by(|&i, &j| x[j].min(s[j]).total_cmp(&x[i].min(s[i])));
    let mut by_residual: Vec<usize> = (0..m).collect();
    let abs_res: Vec<f64> = (0..m).map(|i| rows.residual(i, &interior).abs()).collect();
    by_residual.sort_by(|&i, &j| abs_res[i].total_cmp(&abs_res[j]));

    let mut best: Option<(Vec<f64>, f64, Vec<usize>)> = None;
    for order in [&by_dual, &by_residual] {
        if let Some((theta, basis)) = vertex_from_order(rows, order) {
            let obj = rows.objective(&theta);
            if obj <= interior_objective + tolerance
                && best.as_ref().map_or(true, |(_, b, _)| obj < *b)
            {
                best = Some((theta, obj, basis));
            }
        }
    }
    match best {
        Some((theta, _, basis)) => {
            let dual_violation = dual_certificate(rows, &theta, &basis);
            LpSolution {
                theta,
                iterations,
                converged,
                dual_violation,
            }
        }
        None => {
            log::debug!("vertex recovery failed; returning interior point");
            LpSolution {
                theta: interior,
                iterations,
                converged,
                dual_violation: f64::NAN,
            }
        }
    }
}

fn degenerate_solution(rows: &LpRows) -> LpSolution {
    LpSolution {
        theta: vec![0.0; rows.d],
        iterations: 0,
        converged: false,
        dual_violation: f64::NAN,
    }
}

/// Picks `d` linearly independent rows following `order` and returns the
/// vertex where their residuals vanish. Pseudo-rows pin their coordinate to
/// exactly zero.
fn vertex_from_order(rows: &LpRows, order: &[usize]) -> Option<(Vec<f64>, Vec<usize>)> {
    let d = rows.d;
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(d);
    let mut chosen = Vec::with_capacity(d);
    for &i in order {
        if chosen.len() == d {
            break;
        }
        let row = rows.row(i);
        let norm = dot(row, row).sqrt();
        if norm == 0.0 {
            continue;
        }
        let mut v = row.to_vec();
        for _ in 0..2 {
            for e in &basis {
                let proj = dot(&v, e);
                for (vk, ek) in v.iter_mut().zip(e) {
                    *vk -= proj * ek;
                }
            }
        }
        let rest = dot(&v, &v).sqrt();
        if rest > 1e-9 * norm {
            v.iter_mut().for_each(|vk| *vk /= rest);
            basis.push(v);
            chosen.push(i);
        }
    }
    if chosen.len() < d {
        return None;
    }
    let mut pinned = vec![false; d];
    let mut data_rows = Vec::new();
    for &i in &chosen {
        match rows.pseudo[i] {
            Some(k) => pinned[k] = true,
            None => data_rows.push(i),
        }
    }
    let free: Vec<usize> = (0..d).filter(|k| !pinned[*k]).collect();
    let mut theta = vec![0.0; d];
    if !free.is_empty() {
        if free.len() != data_rows.len() {
            return None;
        }
        let f = free.len();
        let mat = DMatrix::from_fn(f, f, |r, c| rows.row(data_rows[r])[free[c]]);
        let rhs = DVector::from_iterator(f, data_rows.iter().map(|&i| rows.b[i]));
        let sol = mat.lu().solve(&rhs)?;
        if sol.iter().any(|v| !v.is_finite()) {
            return None;
        }
        for (k, v) in free.iter().zip(sol.iter()) {
            theta[*k] = *v;
        }
    }
    Some((theta, chosen))
}

/// Solves for the basis duals that balance the subgradient of the nonbasic
/// rows and reports how far they fall outside `[tau - 1, tau]`.
fn dual_certificate(rows: &LpRows, theta: &[f64], basis: &[usize]) -> f64 {
    let d = rows.d;
    let mut in_basis = vec![false; rows.m()];
    for &i in basis {
        in_basis[i] = true;
    }
    let mut fixed = vec![0.0; rows.m()];
    for i in 0..rows.m() {
        if in_basis[i] {
            continue;
        }
        let r = rows.residual(i, theta);
        fixed[i] = if r > 0.0 { rows.tau[i] } else { rows.tau[i] - 1.0 };
    }
    let target = accumulate(rows, &fixed);
    let mat = DMatrix::from_fn(d, d, |r, c| rows.row(basis[c])[r]);
    let rhs = DVector::from_iterator(d, target.iter().map(|v| -v));
    let Some(duals) = mat.lu().solve(&rhs) else {
        return f64::NAN;
    };
    basis
        .iter()
        .zip(duals.iter())
        .map(|(&i, &v)| {
            let lo = rows.tau[i] - 1.0;
            let hi = rows.tau[i];
            (lo - v).max(v - hi).max(0.0)
        })
        .fold(0.0, f64::max)
}
