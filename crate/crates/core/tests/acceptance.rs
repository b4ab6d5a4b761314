//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any hard criterion fails. Pass criterion numbers as
//! arguments to run a subset, e.g. `cargo test --test acceptance -- 1 7 8`.
//!
//! Criteria:
//!  1. K=1 aggregation equals the full-data fit to 1e-12 (random n <= 500, p <= 20), under a minute.
//!  2. n=1000, p=10, M=100, BIC with (log n)/n: no false zeros, false non-zeros <= 5%.
//!  3. n=1e4, p=50, K in {5, 25}, w=floor(sqrt K), M=50, expectile: no false zeros,
//!     false non-zeros <= 1%, active l1 bias within 2x of full data and stable in K.
//!  4. Slope of log mean active l2 error against log n over {1e3, 3e3, 1e4}, K=10, in [-0.65, -0.35].
//!  5. M=200, n=1e4, p=50, K=10, w=3: Anderson-Darling p > 0.01 on the active deviations.
//!  6. n=1000: BIC picks j in {1, 2, 3} in at least 60% of 100 replications.
//!  7. >= 50 instances, n=30, p=3: check-loss objective <= 0.01-grid minimum + 1e-3,
//!     expectile KKT residual <= 1e-6 n.
//!  8. Kaplan-Meier equals a brute-force product-limit oracle on 20 tied datasets.
//!  9. Timing at n=1e5, p=50: some K in {25, 50} beats K=1 (soft below 4 cores).

use std::collections::BTreeSet;
use std::time::Instant;

use censlasso::aggregate::{fit_aggregated, AggregationPlan};
use censlasso::data::{generate_dataset, GenerationSpec, Observation};
use censlasso::km::{default_weights, fit_censoring_km, IpcwWeights};
use censlasso::loss::{check_loss, LossFamily, LossKind};
use censlasso::simulation::{
    run_study, timing_benchmark, BenchSpec, CellReport, MethodSpec, SimulationReport,
    SimulationSpec,
};
use censlasso::solver::{adaptive_weights, fit_adaptive_lasso, fit_unpenalized, FitConfig};
use censlasso::tuning::LambdaRule;
use censlasso::SurvivalDataset;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, PartialEq)]
enum Verdict {
    Pass,
    Fail,
    /// Reported but not enforced.
    Soft(bool),
}

struct Outcome {
    id: u8,
    verdict: Verdict,
    detail: String,
}

impl Outcome {
    fn new(id: u8, pass: bool, detail: String) -> Self {
        let verdict = if pass { Verdict::Pass } else { Verdict::Fail };
        Self { id, verdict, detail }
    }

    fn line(&self) -> String {
        let tag = match self.verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => "FAIL",
            Verdict::Soft(true) => "PASS (soft)",
            Verdict::Soft(false) => "FAIL (soft, not enforced)",
        };
        format!("criterion {}: {tag}: {}", self.id, self.detail)
    }
}

fn study(
    n: usize,
    p: usize,
    replications: usize,
    families: &[LossFamily],
    plans: Vec<AggregationPlan>,
    full: bool,
    seed: u64,
) -> SimulationSpec {
    SimulationSpec {
        replications,
        generation: GenerationSpec::reference_design(n, p, 0),
        methods: families.iter().map(|&f| MethodSpec::new(f)).collect(),
        plans,
        lambda_rule: LambdaRule::default(),
        master_seed: seed,
        compare_full_data: full,
        censoring_bound: None,
        fit: Default::default(),
    }
}

fn run(spec: &SimulationSpec) -> SimulationReport {
    let start = Instant::now();
    let report = run_study(spec).expect("study runs");
    eprintln!(
        "  [n={} p={} M={}: {:.1}s, {} failed replications]",
        spec.generation.n,
        spec.generation.p,
        spec.replications,
        start.elapsed().as_secs_f64(),
        report.failures.len()
    );
    report
}

fn cell<'a>(report: &'a SimulationReport, family: LossFamily, plan: &str) -> &'a CellReport {
    report
        .cells
        .iter()
        .find(|c| c.family == family && c.plan == plan)
        .expect("cell present")
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    let losses = [
        LossKind::Median,
        LossKind::Quantile { tau: 0.35 },
        LossKind::Expectile { tau: 0.3 },
        LossKind::LeastSquares,
        LossKind::CompositeQuantile { levels: 3 },
    ];
    for case in 0..20 {
        let n = rng.gen_range(40..=500);
        let p = rng.gen_range(2..=20);
        let spec = GenerationSpec::reference_design(n, p, rng.gen());
        let ds = generate_dataset(&spec, rng.gen_range(3.0..30.0)).unwrap();
        let loss = losses[case % losses.len()];
        let lambda = rng.gen_range(0.0..8.0);
        let config = FitConfig::new(loss).with_lambda(lambda);
        let w = default_weights(&ds).unwrap();
        let pilot = fit_unpenalized(&ds, &w, &config).unwrap();
        let full = fit_adaptive_lasso(&ds, &w, &config, &pilot.beta).unwrap();
        let agg = fit_aggregated(&ds, &AggregationPlan::new(1).with_threshold(1), &config).unwrap();
        for (a, b) in agg.beta_check.iter().zip(&full.beta) {
            worst = worst.max((a - b).abs());
        }
        cases += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        1,
        worst <= 1e-12 && secs < 60.0,
        format!("{cases} datasets, max |K=1 minus full| = {worst:.1e} (<= 1e-12), {secs:.1}s (< 60s)"),
    )
}

/// Selection study at n = 1000; also feeds the BIC concentration check.
fn selection_study() -> SimulationReport {
    let families = [LossFamily::Expectile, LossFamily::Median, LossFamily::Quantile];
    run(&study(1000, 10, 100, &families, vec![AggregationPlan::new(1)], false, 202))
}

fn criterion_2(report: &SimulationReport) -> Outcome {
    let mut pass = report.failures.is_empty();
    let mut parts = Vec::new();
    for family in [LossFamily::Expectile, LossFamily::Median, LossFamily::Quantile] {
        let c = cell(report, family, "K=1,w=1");
        pass &= c.false_zero_pct == 0.0 && c.false_nonzero_pct <= 5.0;
        parts.push(format!(
            "{family} fz {:.2}% fnz {:.2}%",
            c.false_zero_pct, c.false_nonzero_pct
        ));
    }
    Outcome::new(
        2,
        pass,
        format!("{} (need fz = 0, fnz <= 5%)", parts.join("; ")),
    )
}

fn criterion_3() -> Outcome {
    let plans = vec![
        AggregationPlan::new(5),
        AggregationPlan::new(25),
    ];
    let report = run(&study(10_000, 50, 50, &[LossFamily::Expectile], plans, true, 303));
    let full = cell(&report, LossFamily::Expectile, "full");
    let mut pass = report.failures.is_empty() && full.false_zero_pct == 0.0;
    let mut l1 = Vec::new();
    let mut parts = Vec::new();
    for plan in ["K=5,w=2", "K=25,w=5"] {
        let c = cell(&report, LossFamily::Expectile, plan);
        pass &= c.false_zero_pct == 0.0
            && c.false_nonzero_pct <= 1.0
            && c.l1_bias_active <= 2.0 * full.l1_bias_active;
        l1.push(c.l1_bias_active);
        parts.push(format!(
            "{plan} fz {:.1}% fnz {:.2}% l1 {:.3}",
            c.false_zero_pct, c.false_nonzero_pct, c.l1_bias_active
        ));
    }
    let spread = l1.iter().cloned().fold(f64::MIN, f64::max) / l1.iter().cloned().fold(f64::MAX, f64::min);
    pass &= spread <= 2.0;
    Outcome::new(
        3,
        pass,
        format!(
            "{}; full-data l1 {:.3}; l1 ratio across K {:.2} (need fz = 0, fnz <= 1%, l1 <= 2x full, ratio <= 2)",
            parts.join("; "),
            full.l1_bias_active,
            spread
        ),
    )
}

/// The K=10 study at n = 1e4 shared by the rate and normality checks.
fn rate_study(n: usize, replications: usize, censoring: f64, seed: u64) -> SimulationReport {
    let mut spec = study(
        n,
        50,
        replications,
        &[LossFamily::Expectile, LossFamily::Quantile],
        vec![AggregationPlan::new(10)],
        false,
        seed,
    );
    spec.generation.target_censoring_rate = censoring;
    run(&spec)
}

fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let mx = xs.iter().sum::<f64>() / xs.len() as f64;
    let my = ys.iter().sum::<f64>() / ys.len() as f64;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

fn rate_slopes(reports: &[(usize, &SimulationReport)]) -> Vec<(LossFamily, f64, Vec<f64>)> {
    let xs: Vec<f64> = reports.iter().map(|(n, _)| (*n as f64).ln()).collect();
    [LossFamily::Expectile, LossFamily::Quantile]
        .into_iter()
        .map(|family| {
            let errors: Vec<f64> = reports
                .iter()
                .map(|(_, r)| cell(r, family, "K=10,w=3").l2_error_active)
                .collect();
            let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
            (family, slope(&xs, &ys), errors)
        })
        .collect()
}

fn describe_slopes(slopes: &[(LossFamily, f64, Vec<f64>)]) -> String {
    slopes
        .iter()
        .map(|(f, s, e)| {
            let errs: Vec<String> = e.iter().map(|v| format!("{v:.4}")).collect();
            format!("{f} slope {s:.3} (l2 {})", errs.join(" / "))
        })
        .collect::<Vec<_>>()
        .join("; ")
}

fn criterion_4(at_ten_thousand: &SimulationReport) -> Outcome {
    let small = rate_study(1_000, 200, 0.25, 404);
    let mid = rate_study(3_000, 200, 0.25, 405);
    let slopes = rate_slopes(&[(1_000, &small), (3_000, &mid), (10_000, at_ten_thousand)]);
    let pass = slopes.iter().all(|(_, s, _)| (-0.65..=-0.35).contains(s));
    Outcome::new(
        4,
        pass,
        format!(
            "25% censoring, n = 1e3 / 3e3 / 1e4: {} (need slope in [-0.65, -0.35])",
            describe_slopes(&slopes)
        ),
    )
}

/// Same rate check without censoring, where every failure time is observable.
fn rate_without_censoring() -> String {
    let reports: Vec<(usize, SimulationReport)> = [1_000, 3_000, 10_000]
        .into_iter()
        .map(|n| (n, rate_study(n, 50, 0.0, 406)))
        .collect();
    let refs: Vec<(usize, &SimulationReport)> = reports.iter().map(|(n, r)| (*n, r)).collect();
    describe_slopes(&rate_slopes(&refs))
}

fn criterion_5(report: &SimulationReport) -> Outcome {
    let mut pass = report.failures.is_empty();
    let mut parts = Vec::new();
    for family in [LossFamily::Expectile, LossFamily::Quantile] {
        let c = cell(report, family, "K=10,w=3");
        for n in &c.normality {
            match n.summary {
                Some(s) => {
                    pass &= s.p_value > 0.01;
                    parts.push(format!(
                        "{family} beta{} sd {:.2} p {:.3}",
                        n.coordinate + 1,
                        s.std_dev,
                        s.p_value
                    ));
                }
                None => {
                    pass = false;
                    parts.push(format!("{family} beta{} degenerate", n.coordinate + 1));
                }
            }
        }
    }
    Outcome::new(
        5,
        pass,
        format!("M=200, n=1e4, K=10: {} (need p > 0.01)", parts.join("; ")),
    )
}

fn criterion_6(report: &SimulationReport) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for family in [LossFamily::Expectile, LossFamily::Quantile] {
        let h = &cell(report, family, "K=1,w=1").bic_histogram;
        let total: usize = h.iter().sum();
        let low: usize = h[..3].iter().sum();
        let share = low as f64 / total as f64;
        pass &= total == 100 && share >= 0.6;
        parts.push(format!("{family} {:.0}% of {total}", 100.0 * share));
    }
    Outcome::new(
        6,
        pass,
        format!("BIC choice in j = 1..3: {} (need >= 60%)", parts.join("; ")),
    )
}

fn small_instance(seed: u64) -> (SurvivalDataset, IpcwWeights) {
    let spec = GenerationSpec::reference_design(30, 3, seed);
    let ds = generate_dataset(&spec, 12.0).unwrap();
    let w = default_weights(&ds).unwrap();
    (ds, w)
}

fn check_objective(ds: &SurvivalDataset, w: &IpcwWeights, tau: f64, pen: &[f64], beta: &[f64]) -> f64 {
    let mut total = 0.0;
    for i in 0..ds.n() {
        let fit: f64 = (0..3).map(|j| ds.row(i)[j] * beta[j]).sum();
        total += w.w[i] * check_loss(tau, ds.y()[i].ln() - fit);
    }
    total + (0..3).map(|j| pen[j] * beta[j].abs()).sum::<f64>()
}

/// Exact minimizer by enumerating every basic solution: three of the data
/// or penalty rows held at zero residual.
fn vertex_minimizer(ds: &SurvivalDataset, w: &IpcwWeights, tau: f64, pen: &[f64]) -> Vec<f64> {
    let mut rows: Vec<([f64; 3], f64)> = (0..ds.n())
        .filter(|&i| w.w[i] > 0.0)
        .map(|i| ([ds.row(i)[0], ds.row(i)[1], ds.row(i)[2]], ds.y()[i].ln()))
        .collect();
    for j in 0..3 {
        if pen[j] > 0.0 {
            let mut e = [0.0; 3];
            e[j] = 1.0;
            rows.push((e, 0.0));
        }
    }
    let mut best = (f64::INFINITY, vec![0.0; 3]);
    let m = rows.len();
    for a in 0..m {
        for b in a + 1..m {
            for c in b + 1..m {
                let mat = DMatrix::from_fn(3, 3, |r, k| [rows[a].0, rows[b].0, rows[c].0][r][k]);
                if mat.determinant().abs() < 1e-12 {
                    continue;
                }
                let rhs = DVector::from_vec(vec![rows[a].1, rows[b].1, rows[c].1]);
                if let Some(sol) = mat.lu().solve(&rhs) {
                    let beta: Vec<f64> = sol.iter().copied().collect();
                    let v = check_objective(ds, w, tau, pen, &beta);
                    if v < best.0 {
                        best = (v, beta);
                    }
                }
            }
        }
    }
    best.1
}

/// Minimum over the 0.01-spaced grid covering a +-0.3 box around `centre`.
fn grid_minimum(ds: &SurvivalDataset, w: &IpcwWeights, tau: f64, pen: &[f64], centre: &[f64]) -> f64 {
    let snap = |v: f64| (v * 100.0).round() / 100.0;
    let mut best = f64::INFINITY;
    for a in -30..=30 {
        for b in -30..=30 {
            for c in -30..=30 {
                let beta = [
                    snap(centre[0]) + a as f64 * 0.01,
                    snap(centre[1]) + b as f64 * 0.01,
                    snap(centre[2]) + c as f64 * 0.01,
                ];
                best = best.min(check_objective(ds, w, tau, pen, &beta));
            }
        }
    }
    best
}

/// Largest subgradient violation of the penalized expectile objective.
fn expectile_kkt(ds: &SurvivalDataset, w: &IpcwWeights, tau: f64, pen: &[f64], beta: &[f64]) -> f64 {
    let mut grad = [0.0; 3];
    for i in 0..ds.n() {
        let r = ds.y()[i].ln() - (0..3).map(|j| ds.row(i)[j] * beta[j]).sum::<f64>();
        let slope = 2.0 * if r < 0.0 { 1.0 - tau } else { tau } * r;
        for j in 0..3 {
            grad[j] -= w.w[i] * slope * ds.row(i)[j];
        }
    }
    (0..3)
        .map(|j| {
            if beta[j] != 0.0 {
                (grad[j] + pen[j] * beta[j].signum()).abs()
            } else {
                (grad[j].abs() - pen[j]).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let instances = 50;
    let mut worst_gap = f64::NEG_INFINITY;
    let mut worst_kkt: f64 = 0.0;
    let mut pass = true;
    for seed in 0..instances {
        let (ds, w) = small_instance(7000 + seed);
        let lambda = rng.gen_range(0.0..4.0);
        let tau = rng.gen_range(0.2..0.8);
        for loss in [LossKind::Median, LossKind::Quantile { tau }] {
            let t = loss.quantile_levels()[0];
            let config = FitConfig::new(loss).with_lambda(lambda);
            let pilot = fit_unpenalized(&ds, &w, &config).unwrap();
            let fit = fit_adaptive_lasso(&ds, &w, &config, &pilot.beta).unwrap();
            let pen: Vec<f64> = adaptive_weights(&pilot.beta, 1.0, 1e-10)
                .iter()
                .map(|o| lambda * o)
                .collect();
            let exact = vertex_minimizer(&ds, &w, t, &pen);
            let grid = grid_minimum(&ds, &w, t, &pen, &exact);
            let solver = check_objective(&ds, &w, t, &pen, &fit.beta);
            worst_gap = worst_gap.max(solver - grid);
            pass &= solver <= grid + 1e-3;
        }
        let config = FitConfig::new(LossKind::Expectile { tau }).with_lambda(lambda);
        let pilot = fit_unpenalized(&ds, &w, &config).unwrap();
        let fit = fit_adaptive_lasso(&ds, &w, &config, &pilot.beta).unwrap();
        let pen: Vec<f64> = adaptive_weights(&pilot.beta, 1.0, 1e-10)
            .iter()
            .map(|o| lambda * o)
            .collect();
        let kkt = expectile_kkt(&ds, &w, tau, &pen, &fit.beta);
        worst_kkt = worst_kkt.max(kkt);
        pass &= kkt <= 1e-6 * ds.n() as f64;
    }
    Outcome::new(
        7,
        pass,
        format!(
            "{instances} instances x (median, quantile, expectile): max solver minus grid minimum {worst_gap:.2e} (<= 1e-3), max expectile KKT {worst_kkt:.1e} (<= {:.0e})",
            1e-6 * 30.0
        ),
    )
}

fn product_limit(points: &[(f64, bool)], t: f64) -> f64 {
    let times: BTreeSet<u64> = points
        .iter()
        .filter(|p| p.0 <= t)
        .map(|p| p.0.to_bits())
        .collect();
    let mut g = 1.0;
    let mut sorted: Vec<f64> = times.into_iter().map(f64::from_bits).collect();
    sorted.sort_by(f64::total_cmp);
    for s in sorted {
        let censored = points.iter().filter(|p| p.0 == s && !p.1).count();
        if censored > 0 {
            let failures = points.iter().filter(|p| p.0 == s && p.1).count();
            let at_risk = points.iter().filter(|p| p.0 >= s).count() - failures;
            g *= (at_risk - censored) as f64 / at_risk as f64;
        }
    }
    g
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut mismatches = 0;
    let mut checks = 0;
    let mut tied = 0;
    for _ in 0..20 {
        let n = rng.gen_range(2..=12);
        let points: Vec<(f64, bool)> = (0..n)
            .map(|_| (rng.gen_range(1..=4) as f64, rng.gen_bool(0.5)))
            .collect();
        let distinct: BTreeSet<u64> = points.iter().map(|p| p.0.to_bits()).collect();
        tied += usize::from(distinct.len() < n);
        let ds = SurvivalDataset::new(
            points
                .iter()
                .map(|&(y, delta)| Observation { y, delta, x: vec![0.0] })
                .collect(),
        )
        .unwrap();
        let curve = fit_censoring_km(&ds);
        for t in [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 9.0] {
            checks += 1;
            if curve.evaluate(t) != product_limit(&points, t) {
                mismatches += 1;
            }
        }
    }
    Outcome::new(
        8,
        mismatches == 0 && tied > 0,
        format!("20 datasets ({tied} with ties), {checks} evaluations, {mismatches} mismatches (need exact equality)"),
    )
}

fn criterion_9() -> Outcome {
    let cores = std::thread::available_parallelism().map_or(1, |c| c.get());
    let mut spec = BenchSpec::reference_design(100_000, 50, 909);
    spec.ks = vec![1, 25, 50];
    let rows = timing_benchmark(&spec).expect("benchmark runs");
    let total = |k: usize| {
        rows.iter()
            .find(|r| r.k == k && r.phase == "total")
            .map(|r| r.seconds)
            .unwrap()
    };
    let (t1, t25, t50) = (total(1), total(25), total(50));
    let faster = t25.min(t50) < t1;
    let detail = format!(
        "total seconds K=1 {t1:.1}, K=25 {t25:.1}, K=50 {t50:.1} on {cores} core(s) (need some K > 1 below K=1)"
    );
    Outcome {
        id: 9,
        verdict: if cores >= 4 {
            if faster { Verdict::Pass } else { Verdict::Fail }
        } else {
            Verdict::Soft(faster)
        },
        detail,
    }
}

fn main() {
    let selected: BTreeSet<u8> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let wanted = |id: u8| selected.is_empty() || selected.contains(&id);
    let mut outcomes: Vec<Outcome> = Vec::new();
    let mut report = |o: Outcome| {
        println!("{}", o.line());
        outcomes.push(o);
    };

    for (id, check) in [(1, criterion_1 as fn() -> Outcome), (7, criterion_7), (8, criterion_8)] {
        if wanted(id) {
            report(check());
        }
    }
    if wanted(2) || wanted(6) {
        let selection = selection_study();
        if wanted(2) {
            report(criterion_2(&selection));
        }
        if wanted(6) {
            report(criterion_6(&selection));
        }
    }
    if wanted(3) {
        report(criterion_3());
    }
    if wanted(4) || wanted(5) {
        let shared = rate_study(10_000, 200, 0.25, 505);
        if wanted(5) {
            report(criterion_5(&shared));
        }
        if wanted(4) {
            report(criterion_4(&shared));
            println!(
                "criterion 4 diagnostic (not enforced): without censoring, M=50: {}",
                rate_without_censoring()
            );
        }
    }
    if wanted(9) {
        report(criterion_9());
    }

    outcomes.sort_by_key(|o| o.id);
    println!("\nacceptance summary");
    for o in &outcomes {
        println!("{}", o.line());
    }
    let failed: Vec<u8> = outcomes
        .iter()
        .filter(|o| o.verdict == Verdict::Fail)
        .map(|o| o.id)
        .collect();
    if failed.is_empty() {
        println!("all enforced criteria passed");
    } else {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
