//! Solvers checked against independent reference computations.

use censlasso::data::{generate_dataset, GenerationSpec, Observation};
use censlasso::km::{default_weights, IpcwWeights};
use censlasso::loss::{check_loss, expectile_loss, LossKind};
use censlasso::solver::{
    adaptive_weights, fit_adaptive_lasso, fit_unpenalized, objective_value, FitConfig,
};
use censlasso::SurvivalDataset;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_dataset(n: usize, p: usize, seed: u64) -> (SurvivalDataset, IpcwWeights) {
    let mut spec = GenerationSpec::reference_design(n, p, seed);
    spec.beta0 = (0..p).map(|j| if j < 2 { [1.0, -2.0][j] } else { 0.0 }).collect();
    let ds = generate_dataset(&spec, 12.0).unwrap();
    let w = default_weights(&ds).unwrap();
    (ds, w)
}

/// Naive penalized check-loss objective.
fn naive_check_objective(
    ds: &SurvivalDataset,
    w: &IpcwWeights,
    tau: f64,
    penalty: &[f64],
    beta: &[f64],
) -> f64 {
    let mut total = 0.0;
    for i in 0..ds.n() {
        let mut fit = 0.0;
        for j in 0..ds.p() {
            fit += ds.row(i)[j] * beta[j];
        }
        total += w.w[i] * check_loss(tau, ds.y()[i].ln() - fit);
    }
    for j in 0..ds.p() {
        total += penalty[j] * beta[j].abs();
    }
    total
}

/// Minimum of the penalized check-loss objective by enumerating every
/// vertex: each choice of `p` rows among data rows and penalty rows whose
/// residuals are set to zero.
fn vertex_minimum(ds: &SurvivalDataset, w: &IpcwWeights, tau: f64, penalty: &[f64]) -> f64 {
    let p = ds.p();
    let mut rows: Vec<(Vec<f64>, f64)> = Vec::new();
    for i in 0..ds.n() {
        if w.w[i] > 0.0 {
            rows.push((ds.row(i).to_vec(), ds.y()[i].ln()));
        }
    }
    for j in 0..p {
        if penalty[j] > 0.0 {
            let mut e = vec![0.0; p];
            e[j] = 1.0;
            rows.push((e, 0.0));
        }
    }
    let mut best = f64::INFINITY;
    let mut idx: Vec<usize> = (0..p).collect();
    loop {
        let a = DMatrix::from_fn(p, p, |r, c| rows[idx[r]].0[c]);
        let b = DVector::from_iterator(p, idx.iter().map(|&i| rows[i].1));
        if a.determinant().abs() > 1e-12 {
            if let Some(sol) = a.lu().solve(&b) {
                let beta: Vec<f64> = sol.iter().copied().collect();
                best = best.min(naive_check_objective(ds, w, tau, penalty, &beta));
            }
        }
        // next combination
        let mut k = p;
        loop {
            if k == 0 {
                return best;
            }
            k -= 1;
            if idx[k] < rows.len() - p + k {
                idx[k] += 1;
                for m in k + 1..p {
                    idx[m] = idx[m - 1] + 1;
                }
                break;
            }
        }
    }
}

#[test]
fn check_loss_fits_reach_vertex_minimum() {
    for seed in 0..30 {
        let (ds, w) = small_dataset(30, 3, seed);
        for loss in [LossKind::Median, LossKind::Quantile { tau: 0.3 }] {
            let tau = loss.quantile_levels()[0];
            let config = FitConfig::new(loss);
            let pilot = fit_unpenalized(&ds, &w, &config).unwrap();
            let oracle0 = vertex_minimum(&ds, &w, tau, &[0.0; 3]);
            assert!(pilot.objective <= oracle0 + 1e-9, "seed {seed}: {} vs {oracle0}", pilot.objective);
            for lambda in [0.3, 2.0] {
                let fit = fit_adaptive_lasso(&ds, &w, &config.with_lambda(lambda), &pilot.beta).unwrap();
                let penalty: Vec<f64> = adaptive_weights(&pilot.beta, 1.0, 1e-10)
                    .iter()
                    .map(|o| lambda * o)
                    .collect();
                let oracle = vertex_minimum(&ds, &w, tau, &penalty);
                assert!(
                    fit.objective <= oracle + 1e-9 * oracle.max(1.0),
                    "seed {seed} lambda {lambda}: {} vs {oracle}",
                    fit.objective
                );
                assert!(fit.kkt_residual <= 1e-9);
            }
        }
    }
}

#[test]
fn least_squares_matches_normal_equations() {
    for seed in 0..10 {
        let (ds, w) = small_dataset(200, 5, seed);
        let fit = fit_unpenalized(&ds, &w, &FitConfig::new(LossKind::LeastSquares)).unwrap();
        let p = ds.p();
        let mut xtx = DMatrix::<f64>::zeros(p, p);
        let mut xty = DVector::<f64>::zeros(p);
        for i in 0..ds.n() {
            let x = ds.row(i);
            for a in 0..p {
                xty[a] += w.w[i] * x[a] * ds.y()[i].ln();
                for b in 0..p {
                    xtx[(a, b)] += w.w[i] * x[a] * x[b];
                }
            }
        }
        let oracle = xtx.lu().solve(&xty).unwrap();
        for j in 0..p {
            assert!((fit.beta[j] - oracle[j]).abs() < 1e-8, "seed {seed} coord {j}");
        }
    }
}

#[test]
fn expectile_fits_satisfy_kkt() {
    for seed in 0..20 {
        let (ds, w) = small_dataset(100, 4, seed);
        let config = FitConfig::new(LossKind::Expectile { tau: 0.37 });
        let pilot = fit_unpenalized(&ds, &w, &config).unwrap();
        assert!(pilot.kkt_residual <= 1e-6 * ds.n() as f64);
        for lambda in [0.1, 1.0, 10.0] {
            let fit = fit_adaptive_lasso(&ds, &w, &config.with_lambda(lambda), &pilot.beta).unwrap();
            assert!(fit.converged);
            assert!(fit.kkt_residual <= 1e-6 * ds.n() as f64, "{}", fit.kkt_residual);
        }
    }
}

#[test]
fn composite_with_one_level_is_median_with_intercept() {
    for seed in 0..5 {
        let (ds, w) = small_dataset(80, 3, seed);
        let cqr = fit_unpenalized(&ds, &w, &FitConfig::new(LossKind::CompositeQuantile { levels: 1 })).unwrap();
        let mut median = FitConfig::new(LossKind::Median);
        median.fit_intercept = true;
        let med = fit_unpenalized(&ds, &w, &median).unwrap();
        assert!((cqr.objective - med.objective).abs() < 1e-10);
        for j in 0..3 {
            assert!((cqr.beta[j] - med.beta[j]).abs() < 1e-9);
        }
        assert!((cqr.intercepts[0] - med.intercepts[0]).abs() < 1e-9);
    }
}

#[test]
fn composite_quantile_shares_slopes() {
    let (ds, w) = small_dataset(300, 3, 7);
    let fit = fit_unpenalized(&ds, &w, &FitConfig::new(LossKind::CompositeQuantile { levels: 5 })).unwrap();
    assert_eq!(fit.intercepts.len(), 5);
    assert!(fit.intercepts.windows(2).all(|p| p[0] <= p[1]));
    assert!((fit.beta[0] - 1.0).abs() < 0.5 && (fit.beta[1] + 2.0).abs() < 0.5);
}

#[test]
fn zero_penalty_equals_unpenalized_and_huge_penalty_zeroes() {
    let losses = [
        LossKind::Median,
        LossKind::Quantile { tau: 0.37 },
        LossKind::CompositeQuantile { levels: 3 },
        LossKind::Expectile { tau: 0.4 },
        LossKind::LeastSquares,
    ];
    let (ds, w) = small_dataset(150, 4, 3);
    for loss in losses {
        let config = FitConfig::new(loss);
        let pilot = fit_unpenalized(&ds, &w, &config).unwrap();
        assert_eq!(pilot.support.len(), 4, "{loss}");
        let same = fit_adaptive_lasso(&ds, &w, &config, &pilot.beta).unwrap();
        for j in 0..4 {
            assert!((same.beta[j] - pilot.beta[j]).abs() <= 1e-8, "{loss}");
        }
        let none = fit_adaptive_lasso(&ds, &w, &config.with_lambda(1e8), &pilot.beta).unwrap();
        assert!(none.beta.iter().all(|b| *b == 0.0), "{loss}: {:?}", none.beta);
        assert!(none.support.is_empty());
    }
}

#[test]
fn intercept_only_median_picks_middle_value() {
    let ys = [3.0, 1.0, 4.0, 1.5, 9.0, 2.6, 5.0];
    let ds = SurvivalDataset::new(
        ys.iter()
            .map(|&y| Observation {
                y,
                delta: true,
                x: vec![1.0],
            })
            .collect(),
    )
    .unwrap();
    let w = IpcwWeights {
        w: vec![1.0; 7],
        floor_used: 1.0,
    };
    let fit = fit_unpenalized(&ds, &w, &FitConfig::new(LossKind::Median)).unwrap();
    assert_eq!(fit.beta[0], 3.0f64.ln());
}

#[test]
fn objective_matches_naive_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (ds, w) = small_dataset(40, 3, 5);
    for loss in [
        LossKind::Median,
        LossKind::Quantile { tau: 0.2 },
        LossKind::Expectile { tau: 0.7 },
        LossKind::CompositeQuantile { levels: 2 },
    ] {
        let beta: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let omega: Vec<f64> = (0..3).map(|_| rng.gen_range(0.1..3.0)).collect();
        let intercepts: Vec<f64> = (0..loss.intercept_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let lambda = 1.7;
        let got = objective_value(&ds, &w, &loss, lambda, &omega, &beta, &intercepts).unwrap();
        let mut want = 0.0;
        for i in 0..ds.n() {
            let x = ds.row(i);
            let u = ds.y()[i].ln() - (x[0] * beta[0] + x[1] * beta[1] + x[2] * beta[2]);
            let l = match loss {
                LossKind::Median => check_loss(0.5, u),
                LossKind::Quantile { tau } => check_loss(tau, u),
                LossKind::Expectile { tau } => expectile_loss(tau, u),
                LossKind::CompositeQuantile { .. } => {
                    check_loss(1.0 / 3.0, u - intercepts[0]) + check_loss(2.0 / 3.0, u - intercepts[1])
                }
                LossKind::LeastSquares => unreachable!(),
            };
            want += w.w[i] * l;
        }
        for j in 0..3 {
            want += lambda * omega[j] * beta[j].abs();
        }
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{loss}");
    }
}

#[test]
fn objective_special_cases() {
    let (ds, w) = small_dataset(30, 2, 1);
    let loss = LossKind::Median;
    let zero = objective_value(&ds, &w, &loss, 5.0, &[1.0, 2.0], &[0.0, 0.0], &[]).unwrap();
    let pure = objective_value(&ds, &w, &loss, 0.0, &[1.0, 2.0], &[0.0, 0.0], &[]).unwrap();
    assert_eq!(zero, pure);

    // responses exactly on the line log y = x' beta
    let beta = [0.5, -0.25];
    let rows: Vec<Observation> = (0..10)
        .map(|i| {
            let x = vec![i as f64 / 3.0, 1.0 - i as f64 / 7.0];
            let y = (x[0] * beta[0] + x[1] * beta[1]).exp();
            Observation { y, delta: true, x }
        })
        .collect();
    let ds = SurvivalDataset::new(rows).unwrap();
    let w = IpcwWeights {
        w: vec![1.0; 10],
        floor_used: 0.1,
    };
    let v = objective_value(&ds, &w, &loss, 2.0, &[1.0, 4.0], &beta, &[]).unwrap();
    assert!((v - 2.0 * (0.5 + 4.0 * 0.25)).abs() < 1e-12);
}

#[test]
fn permuting_rows_leaves_fit_unchanged() {
    let (ds, w) = small_dataset(120, 4, 9);
    let mut order: Vec<usize> = (0..ds.n()).collect();
    order.reverse();
    order.swap(3, 77);
    let ds2 = ds.subset(&order).unwrap();
    let w2 = w.subset(&order);
    for loss in [LossKind::Quantile { tau: 0.4 }, LossKind::Expectile { tau: 0.4 }] {
        let config = FitConfig::new(loss).with_lambda(0.5);
        let pilot = fit_unpenalized(&ds, &w, &config).unwrap();
        let a = fit_adaptive_lasso(&ds, &w, &config, &pilot.beta).unwrap();
        let b = fit_adaptive_lasso(&ds2, &w2, &config, &pilot.beta).unwrap();
        for j in 0..4 {
            assert!((a.beta[j] - b.beta[j]).abs() <= 1e-8, "{loss}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn support_matches_nonzero_coefficients(seed in 0u64..1000, lambda in 0.0f64..20.0) {
        let (ds, w) = small_dataset(60, 4, seed);
        for loss in [LossKind::Quantile { tau: 0.37 }, LossKind::Expectile { tau: 0.4 }] {
            let config = FitConfig::new(loss);
            let pilot = fit_unpenalized(&ds, &w, &config).unwrap();
            let fit = fit_adaptive_lasso(&ds, &w, &config.with_lambda(lambda), &pilot.beta).unwrap();
            let nonzero: Vec<usize> = (0..4).filter(|&j| fit.beta[j] != 0.0).collect();
            prop_assert_eq!(&fit.support, &nonzero);
            prop_assert!(fit.objective.is_finite());
            prop_assert!(fit.objective <= pilot.objective + lambda * adaptive_weights(&pilot.beta, 1.0, 1e-10)
                .iter().zip(&pilot.beta).map(|(o, b)| o * b.abs()).sum::<f64>() + 1e-9);
        }
    }
}
