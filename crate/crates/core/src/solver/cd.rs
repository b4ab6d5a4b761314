//! Weighted asymmetric least squares with an adaptive-LASSO penalty:
//! `sum_i w_i |tau - 1{r_i < 0}| r_i^2 + sum_k pen_k |theta_k|`, `r = y - X theta`.
//!
//! Cyclic coordinate descent. Each coordinate subproblem is a convex
//! piecewise quadratic whose derivative is piecewise linear, so it is solved
//! exactly by a bracketed Newton iteration after the soft-threshold test.
//! A converged iterate is finished with a Newton solve on the active set at
//! a fixed residual sign pattern, which lands on the exact optimum whenever
//! the pattern is already right.

use nalgebra::{DMatrix, DVector};

/// Design stored column-major for cheap coordinate sweeps.
pub(crate) struct SquaredProblem {
    pub n: usize,
    pub d: usize,
    pub cols: Vec<f64>,
    pub y: Vec<f64>,
    pub w: Vec<f64>,
    pub tau: f64,
    /// Penalty per coordinate; zero for unpenalized columns.
    pub pen: Vec<f64>,
}

pub(crate) struct CdOutcome {
    pub theta: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl SquaredProblem {
    fn col(&self, k: usize) -> &[f64] {
        &self.cols[k * self.n..(k + 1) * self.n]
    }

    #[inline]
    fn kappa(&self, r: f64) -> f64 {
        if r < 0.0 {
            1.0 - self.tau
        } else {
            self.tau
        }
    }

    pub fn residuals(&self, theta: &[f64]) -> Vec<f64> {
        let mut r = self.y.clone();
        for (k, &t) in theta.iter().enumerate() {
            if t != 0.0 {
                for (ri, x) in r.iter_mut().zip(self.col(k)) {
                    *ri -= x * t;
                }
            }
        }
        r
    }

    pub fn objective(&self, theta: &[f64]) -> f64 {
        let r = self.residuals(theta);
        let loss: f64 = r
            .iter()
            .zip(&self.w)
            .map(|(&ri, &wi)| wi * self.kappa(ri) * ri * ri)
            .sum();
        loss + theta
            .iter()
            .zip(&self.pen)
            .map(|(t, p)| p * t.abs())
            .sum::<f64>()
    }

    /// Derivative of the smooth part along coordinate `k` after moving it by
    /// `step`, with the matching right second derivative.
    fn directional(&self, k: usize, r: &[f64], step: f64) -> (f64, f64) {
        let mut g = 0.0;
        let mut h = 0.0;
        for ((&ri, &x), &wi) in r.iter().zip(self.col(k)).zip(&self.w) {
            if x == 0.0 || wi == 0.0 {
                continue;
            }
            let rs = ri - x * step;
            // right derivative: residual is decreasing in step when x > 0
            let kap = if rs < 0.0 || (rs == 0.0 && x > 0.0) {
                1.0 - self.tau
            } else {
                self.tau
            };
            let a = wi * kap * x;
            g -= 2.0 * a * rs;
            h += 2.0 * a * x;
        }
        (g, h)
    }

    /// Subgradient residual of the full objective at `theta`.
    pub fn kkt_residual(&self, theta: &[f64]) -> f64 {
        let r = self.residuals(theta);
        let mut worst: f64 = 0.0;
        for k in 0..self.d {
            let (g, _) = self.directional(k, &r, 0.0);
            let v = if theta[k] != 0.0 {
                (g + self.pen[k] * theta[k].signum()).abs()
            } else {
                (g.abs() - self.pen[k]).max(0.0)
            };
            worst = worst.max(v);
        }
        worst
    }

    /// Exact minimizer over coordinate `k`, with every other coordinate fixed.
    fn coordinate_min(&self, k: usize, r: &[f64], current: f64) -> f64 {
        let pen = self.pen[k];
        // derivative of the smooth part as a function of the new value t
        let at = |t: f64| self.directional(k, r, t - current);
        if pen > 0.0 {
            let (g0, h0) = at(0.0);
            if h0 == 0.0 && g0 == 0.0 {
                return 0.0;
            }
            if g0.abs() <= pen {
                return 0.0;
            }
            if g0 < -pen {
                self.root(&at, pen, 0.0, f64::INFINITY, current.max(0.0))
            } else {
                self.root(&at, -pen, f64::NEG_INFINITY, 0.0, current.min(0.0))
            }
        } else {
            let (_, h) = at(current);
            if h == 0.0 {
                return current;
            }
            self.root(&at, 0.0, f64::NEG_INFINITY, f64::INFINITY, current)
        }
    }

    /// Root of the nondecreasing piecewise-linear map `t -> g(t) + shift` on
    /// `(lo, hi)`, started from `start`.
    fn root(
        &self,
        at: &impl Fn(f64) -> (f64, f64),
        shift: f64,
        mut lo: f64,
        mut hi: f64,
        start: f64,
    ) -> f64 {
        let mut t = start.clamp(lo, hi);
        if !t.is_finite() {
            t = 0.0;
        }
        for _ in 0..200 {
            let (g, h) = at(t);
            let f = g + shift;
            if f == 0.0 {
                return t;
            }
            if f < 0.0 {
                lo = lo.max(t);
            } else {
                hi = hi.min(t);
            }
            let newton = if h > 0.0 { t - f / h } else { f64::NAN };
            let next = if newton.is_finite() && newton > lo && newton < hi {
                newton
            } else if lo.is_finite() && hi.is_finite() {
                0.5 * (lo + hi)
            } else if lo.is_finite() {
                lo + (lo - t).abs().max(1.0)
            } else {
                hi - (hi - t).abs().max(1.0)
            };
            if (next - t).abs() <= 1e-15 * (1.0 + t.abs()) {
                return next;
            }
            t = next;
        }
        t
    }

    fn sweep(&self, theta: &mut [f64], r: &mut [f64], coords: &[usize]) -> f64 {
        let mut max_change: f64 = 0.0;
        for &k in coords {
            let old = theta[k];
            let new = self.coordinate_min(k, r, old);
            let change = new - old;
            if change != 0.0 {
                for (ri, x) in r.iter_mut().zip(self.col(k)) {
                    *ri -= x * change;
                }
                theta[k] = new;
                max_change = max_change.max(change.abs());
            }
        }
        max_change
    }

    pub fn solve(&self, init: &[f64], max_iter: usize, tol: f64) -> CdOutcome {
        let mut theta = init.to_vec();
        if self.pen.iter().all(|p| *p == 0.0) {
            if let Some(t) = self.sign_pattern_newton(&theta, 50) {
                if self.objective(&t) <= self.objective(&theta) {
                    theta = t;
                }
            }
        }
        let mut r = self.residuals(&theta);
        let all: Vec<usize> = (0..self.d).collect();
        let mut iterations = 0;
        let mut converged = false;
        let mut previous = self.objective(&theta);

        'outer: while iterations < max_iter {
            iterations += 1;
            let change = self.sweep(&mut theta, &mut r, &all);
            self.check_descent(&theta, &mut previous);
            if change < tol {
                converged = true;
                break;
            }
            // cycle on the active set until it settles, then re-check all
            let active: Vec<usize> = (0..self.d)
                .filter(|&k| theta[k] != 0.0 || self.pen[k] == 0.0)
                .collect();
            loop {
                if iterations >= max_iter {
                    break 'outer;
                }
                iterations += 1;
                let change = self.sweep(&mut theta, &mut r, &active);
                self.check_descent(&theta, &mut previous);
                if change < tol {
                    break;
                }
            }
        }

        if let Some(polished) = self.polish(&theta) {
            theta = polished;
        }
        CdOutcome {
            theta,
            iterations,
            converged,
        }
    }

    fn check_descent(&self, theta: &[f64], previous: &mut f64) {
        if cfg!(debug_assertions) {
            let now = self.objective(theta);
            debug_assert!(
                now <= *previous + 1e-9 * previous.abs().max(1.0),
                "coordinate descent increased the objective: {previous} -> {now}"
            );
            *previous = now;
        }
    }

    /// Newton solve restricted to the nonzero and unpenalized coordinates,
    /// iterated until the residual sign pattern stops changing.
    fn sign_pattern_newton(&self, theta: &[f64], rounds: usize) -> Option<Vec<f64>> {
        let free: Vec<usize> = (0..self.d)
            .filter(|&k| theta[k] != 0.0 || self.pen[k] == 0.0)
            .collect();
        let mut current = theta.to_vec();
        let mut r = self.residuals(&current);
        for _ in 0..rounds {
            let f = free.len();
            let mut m = DMatrix::<f64>::zeros(f, f);
            let mut v = DVector::<f64>::zeros(f);
            for i in 0..self.n {
                let a = self.w[i] * self.kappa(r[i]);
                if a == 0.0 {
                    continue;
                }
                for (p, &kp) in free.iter().enumerate() {
                    let xp = self.cols[kp * self.n + i];
                    if xp == 0.0 {
                        continue;
                    }
                    v[p] += a * xp * self.y[i];
                    for (q, &kq) in free.iter().enumerate().take(p + 1) {
                        m[(p, q)] += a * xp * self.cols[kq * self.n + i];
                    }
                }
            }
            for p in 0..f {
                for q in 0..p {
                    m[(q, p)] = m[(p, q)];
                }
                let k = free[p];
                v[p] -= 0.5 * self.pen[k] * current[k].signum();
            }
            let sol = m.cholesky()?.solve(&v);
            let mut next = vec![0.0; self.d];
            for (p, &k) in free.iter().enumerate() {
                next[k] = sol[p];
            }
            if free
                .iter()
                .any(|&k| self.pen[k] > 0.0 && next[k].signum() != current[k].signum())
            {
                return None;
            }
            let r_next = self.residuals(&next);
            let stable = r
                .iter()
                .zip(&r_next)
                .zip(&self.w)
                .all(|((a, b), &wi)| wi == 0.0 || (*a < 0.0) == (*b < 0.0));
            current = next;
            r = r_next;
            if stable {
                return Some(current);
            }
        }
        None
    }

    fn polish(&self, theta: &[f64]) -> Option<Vec<f64>> {
        let candidate = self.sign_pattern_newton(theta, 5)?;
        let r = self.residuals(&candidate);
        for k in 0..self.d {
            if candidate[k] == 0.0 && self.pen[k] > 0.0 {
                let (g, _) = self.directional(k, &r, 0.0);
                if g.abs() > self.pen[k] * (1.0 + 1e-12) {
                    return None;
                }
            }
        }
        let before = self.objective(theta);
        let after = self.objective(&candidate);
        (after <= before + 1e-12 * before.abs().max(1.0)).then_some(candidate)
    }
}
