//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the binary exits non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};

use tsjm::cox::{build_counting_process, log_partial_likelihood, BreslowBaseline, CountingProcessRow, CoxOptions};
use tsjm::data::{Dataset, LongitudinalObservation, SurvivalRecord};
use tsjm::design::MarkerSpec;
use tsjm::mcmc::{
    cumulative_hazard, fit_one_marker_jm, FitOptions, FixedBlocks, JointModelParams, OneMarkerModel, PiecewiseBaseline,
};
use tsjm::metrics::{ipcw_auc, ipcw_brier, MetricInput};
use tsjm::predict::{cumulative_incidence, predict_first_order, queries_from_dataset, PredictionSettings};
use tsjm::sim::{simulate_dataset, SimScenario};
use tsjm::study::{run_study, StudyConfig, StudyMethod, StudyReport};
use tsjm::two_stage::{fit_true, fit_tsjm, rubin_pool, TwoStageOptions};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rel_norm(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-8)
}

// ---------------------------------------------------------------- criterion 1

#[derive(Debug, Clone)]
struct CoxCase {
    times: Vec<f64>,
    events: Vec<bool>,
    base: Vec<Vec<f64>>,
    slopes: Vec<Vec<f64>>,
    theta: Vec<f64>,
}

fn cox_case() -> impl Strategy<Value = CoxCase> {
    (5usize..=60, 1usize..=3).prop_flat_map(|(n, p)| {
        (
            // Times on a coarse grid so ties are common.
            proptest::collection::vec(1u32..=20, n),
            proptest::collection::vec(proptest::bool::weighted(0.7), n),
            proptest::collection::vec(proptest::collection::vec(-2.0..2.0f64, p), n),
            proptest::collection::vec(proptest::collection::vec(-1.0..1.0f64, p), n),
            proptest::collection::vec(-1.0..1.0f64, p),
        )
            .prop_map(|(t, events, base, slopes, theta)| CoxCase {
                times: t.into_iter().map(|k| k as f64 * 0.25).collect(),
                events,
                base,
                slopes,
                theta,
            })
    })
}

fn cox_rows(case: &CoxCase) -> Vec<CountingProcessRow> {
    let survival: Vec<SurvivalRecord> = case
        .times
        .iter()
        .zip(&case.events)
        .enumerate()
        .map(|(i, (&time, &e))| SurvivalRecord {
            subject: format!("s{i}"),
            time,
            cause: e as u32,
            covariates: vec![],
        })
        .collect();
    build_counting_process(&survival, 1, |i, t| {
        Ok(case.base[i].iter().zip(&case.slopes[i]).map(|(a, b)| a + b * t).collect())
    })
    .unwrap()
}

fn criterion_1() -> Outcome {
    let mut runner = TestRunner::new_with_rng(
        Config {
            cases: 50,
            failure_persistence: None,
            ..Config::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    );
    let worst = std::cell::Cell::new([0.0f64; 3]);
    let bump = |k: usize, v: f64| {
        let mut w = worst.get();
        w[k] = w[k].max(v);
        worst.set(w);
    };
    let result = runner.run(&cox_case(), |case| {
        let rows = cox_rows(&case);
        if !rows.iter().any(|r| r.event) {
            return Ok(());
        }
        let p = case.theta.len();
        let pl = log_partial_likelihood(&rows, &case.theta).unwrap();
        let h = 1e-5;
        let mut fd_grad = vec![0.0; p];
        let mut fd_hess = vec![0.0; p * p];
        for a in 0..p {
            let mut up = case.theta.clone();
            let mut dn = case.theta.clone();
            up[a] += h;
            dn[a] -= h;
            let lu = log_partial_likelihood(&rows, &up).unwrap();
            let ld = log_partial_likelihood(&rows, &dn).unwrap();
            fd_grad[a] = (lu.value - ld.value) / (2.0 * h);
            for b in 0..p {
                fd_hess[a * p + b] = (lu.gradient[b] - ld.gradient[b]) / (2.0 * h);
            }
        }
        let grad: Vec<f64> = pl.gradient.iter().copied().collect();
        let hess: Vec<f64> = (0..p * p).map(|k| pl.hessian[(k / p, k % p)]).collect();
        let eg = rel_norm(&grad, &fd_grad);
        let eh = rel_norm(&hess, &fd_hess);
        bump(0, eg);
        bump(1, eh);
        prop_assert!(eg < 1e-6, "gradient error {eg}");
        prop_assert!(eh < 1e-6, "hessian error {eh}");

        // Null model: each event contributes -log(size of its risk set).
        let null = log_partial_likelihood(&rows, &vec![0.0; p]).unwrap().value;
        let mut expected = 0.0;
        for i in 0..case.times.len() {
            if case.events[i] {
                let r = case.times.iter().filter(|&&t| t >= case.times[i]).count();
                expected -= (r as f64).ln();
            }
        }
        let en = (null - expected).abs() / expected.abs().max(1.0);
        bump(2, en);
        prop_assert!(en < 1e-13, "null model {null} vs {expected}");
        Ok(())
    });
    let [worst_grad, worst_hess, worst_null] = worst.get();
    let detail = format!(
        "50 datasets, max rel. error gradient {worst_grad:.2e}, Hessian {worst_hess:.2e}, null model {worst_null:.1e}"
    );
    match result {
        Ok(()) => Ok(detail),
        Err(e) => Err(format!("{detail}; {e}")),
    }
}

// ---------------------------------------------------------------- criterion 2

/// Mean and batch-means standard error of a chain.
fn batch_mean(xs: &[f64], batches: usize) -> (f64, f64) {
    let size = xs.len() / batches;
    let means: Vec<f64> = (0..batches)
        .map(|k| xs[k * size..(k + 1) * size].iter().sum::<f64>() / size as f64)
        .collect();
    let m = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (m, (var / batches as f64).sqrt())
}

struct ConjugateFixture {
    data: Dataset,
    sigma2: f64,
    sigma: DMatrix<f64>,
}

fn conjugate_fixture(n: usize, with_markers: bool) -> ConjugateFixture {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.5]);
    let sigma2: f64 = 0.8;
    let exp = Exp::new(0.4).unwrap();
    let mut long = Vec::new();
    let mut surv = Vec::new();
    for i in 0..n {
        let subject = format!("p{i:02}");
        let t: f64 = exp.sample(&mut rng);
        let (time, cause) = if t < 3.0 { (t, 1) } else { (3.0, 0) };
        if with_markers {
            let b0: f64 = rng.sample::<f64, _>(StandardNormal);
            let b1: f64 = 0.5 * rng.sample::<f64, _>(StandardNormal);
            for j in 0..4 {
                let s = 0.5 * j as f64;
                if s <= time {
                    let e: f64 = rng.sample(StandardNormal);
                    long.push(LongitudinalObservation {
                        subject: subject.clone(),
                        marker: 1,
                        time: s,
                        value: 1.0 + b0 + (0.5 + b1) * s + sigma2.sqrt() * e,
                    });
                }
            }
        }
        surv.push(SurvivalRecord {
            subject,
            time,
            cause,
            covariates: vec![],
        });
    }
    let data = Dataset::new(long, surv, vec![MarkerSpec::linear(1, "y", &[])], vec![]).unwrap();
    ConjugateFixture { data, sigma2, sigma }
}

/// Closed-form posterior of `(beta, b_1, ..., b_n)` for the linear mixed
/// model with known variances and a `N(0, v I)` prior on beta.
fn gaussian_posterior(fx: &ConjugateFixture, prior_var: f64) -> (DVector<f64>, DMatrix<f64>) {
    let n = fx.data.n_subjects();
    let q = 2 + 2 * n;
    let mut prec = DMatrix::zeros(q, q);
    prec[(0, 0)] = 1.0 / prior_var;
    prec[(1, 1)] = 1.0 / prior_var;
    let sinv = fx.sigma.clone().try_inverse().unwrap();
    for i in 0..n {
        prec.view_mut((2 + 2 * i, 2 + 2 * i), (2, 2)).copy_from(&sinv);
    }
    let mut rhs = DVector::zeros(q);
    for obs in fx.data.longitudinal() {
        let i = fx.data.subject_index(&obs.subject).unwrap();
        let mut a = DVector::zeros(q);
        a[0] = 1.0;
        a[1] = obs.time;
        a[2 + 2 * i] = 1.0;
        a[3 + 2 * i] = obs.time;
        prec += &a * a.transpose() / fx.sigma2;
        rhs += &a * (obs.value / fx.sigma2);
    }
    let cov = prec.try_inverse().unwrap();
    (&cov * rhs, cov)
}

fn conjugate_options(fx: &ConjugateFixture) -> FitOptions {
    let mut opts = FitOptions::default();
    opts.chain.iterations = 22_000;
    opts.chain.burn_in = 2_000;
    opts.chain.thin = 1;
    opts.chain.seed = 5;
    opts.fixed = FixedBlocks {
        sigma2: Some(fx.sigma2),
        sigma: Some(fx.sigma.clone()),
        alpha: Some(vec![0.0]),
        ..FixedBlocks::default()
    };
    opts
}

fn criterion_2() -> Outcome {
    const BATCHES: usize = 40;
    let mut notes = Vec::new();
    let mut failed = Vec::new();

    // Longitudinal part: beta and the random effects of the first subjects.
    let fx = conjugate_fixture(30, true);
    let opts = conjugate_options(&fx);
    let spec = fx.data.marker_specs()[0].clone();
    let post = fit_one_marker_jm(&fx.data, 1, &spec, &opts).map_err(|e| e.to_string())?;
    let (mean, cov) = gaussian_posterior(&fx, opts.priors.coef_variance);
    let mut chains: Vec<(String, usize, Vec<f64>)> = Vec::new();
    for a in 0..2 {
        chains.push((format!("beta{a}"), a, post.draws.iter().map(|d| d.beta[a]).collect()));
    }
    for i in 0..3 {
        for a in 0..2 {
            chains.push((
                format!("b[{i}][{a}]"),
                2 + 2 * i + a,
                post.random_effect_draws[i].iter().map(|b| b[a]).collect(),
            ));
        }
    }
    let mut worst = 0.0f64;
    for (name, k, xs) in &chains {
        let (m, se) = batch_mean(xs, BATCHES);
        let z = (m - mean[*k]).abs() / se;
        let sq: Vec<f64> = xs.iter().map(|x| (x - mean[*k]).powi(2)).collect();
        let (v, vse) = batch_mean(&sq, BATCHES);
        let zv = (v - cov[(*k, *k)]).abs() / vse;
        worst = worst.max(z).max(zv);
        if z > 3.0 || zv > 3.0 {
            failed.push(format!("{name}: mean z={z:.2}, var z={zv:.2}"));
        }
    }
    notes.push(format!("beta/b max |z| {worst:.2}"));

    // Survival only: no marker rows, alpha fixed at 0, so each height is
    // Gamma(a + d_j, b + exposure_j) a posteriori.
    let fx = conjugate_fixture(80, false);
    let opts = conjugate_options(&fx);
    let spec = fx.data.marker_specs()[0].clone();
    let post = fit_one_marker_jm(&fx.data, 1, &spec, &opts).map_err(|e| e.to_string())?;
    let base = post.draws[0].baseline.clone().ok_or("no baseline in the fit")?;
    let mut worst = 0.0f64;
    for j in 0..base.n_intervals() {
        let (lo, hi) = (base.knots[j], base.knots[j + 1]);
        let mut d = 0.0;
        let mut exposure = 0.0;
        for rec in fx.data.survival() {
            exposure += (rec.time.min(hi) - lo).max(0.0);
            if rec.cause == 1 && rec.time > lo && rec.time <= hi {
                d += 1.0;
            }
        }
        let shape = opts.priors.baseline_shape + d;
        let rate = opts.priors.baseline_rate + exposure;
        let xs: Vec<f64> = post.draws.iter().map(|p| p.baseline.as_ref().unwrap().heights[j]).collect();
        let (m, se) = batch_mean(&xs, BATCHES);
        let z = (m - shape / rate).abs() / se;
        let sq: Vec<f64> = xs.iter().map(|x| (x - shape / rate).powi(2)).collect();
        let (v, vse) = batch_mean(&sq, BATCHES);
        let zv = (v - shape / (rate * rate)).abs() / vse;
        worst = worst.max(z).max(zv);
        if z > 3.0 || zv > 3.0 {
            failed.push(format!("lambda{j}: mean z={z:.2}, var z={zv:.2}"));
        }
    }
    notes.push(format!("lambda max |z| {worst:.2}"));
    if failed.is_empty() {
        Ok(notes.join(", "))
    } else {
        Err(format!("{}; {}", notes.join(", "), failed.join("; ")))
    }
}

// ---------------------------------------------------------------- criterion 3

/// `int_lo^hi exp(k s) ds`.
fn exp_integral(k: f64, lo: f64, hi: f64) -> f64 {
    if k == 0.0 {
        hi - lo
    } else {
        (k * lo).exp() * (k * (hi - lo)).exp_m1() / k
    }
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let names = vec!["w".to_string(), "x".to_string()];
    let spec = MarkerSpec::linear(1, "y", &["x"]);
    let model = OneMarkerModel::new(&spec, &names[..1], &names).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let mut u = |a: f64, b: f64| rng.random_range(a..b);
        let beta = vec![u(-1.0, 1.0), u(-1.0, 1.0), u(-1.0, 1.0)];
        let b = [u(-1.0, 1.0), u(-1.0, 1.0)];
        let alpha = u(-1.5, 1.5);
        let gamma = u(-1.0, 1.0);
        let covariates = [u(-1.0, 1.0), u(-1.0, 1.0)];
        let end = u(1.0, 5.0);
        let mut inner: Vec<f64> = (0..4).map(|_| u(0.05, 0.95) * end).collect();
        inner.sort_by(f64::total_cmp);
        let mut knots = vec![0.0];
        knots.extend(inner);
        knots.push(end);
        let heights: Vec<f64> = (0..5).map(|_| u(0.1, 2.0)).collect();
        let t = u(0.0, end);
        let params = JointModelParams {
            beta: beta.clone(),
            sigma2: 1.0,
            sigma: DMatrix::identity(2, 2),
            gamma: vec![gamma],
            alpha: vec![alpha],
            baseline: Some(PiecewiseBaseline::new(knots.clone(), heights.clone()).map_err(|e| e.to_string())?),
        };
        let got = cumulative_hazard(&params, &b, &model, &covariates, t).map_err(|e| e.to_string())?;

        // eta(s) = a + c s with the covariate folded into the intercept.
        let a = beta[0] + b[0] + beta[2] * covariates[1];
        let c = beta[1] + b[1];
        let mut expected = 0.0;
        for j in 0..5 {
            let (lo, hi) = (knots[j], knots[j + 1].min(t));
            if hi > lo {
                expected += heights[j] * exp_integral(alpha * c, lo, hi);
            }
        }
        expected *= (gamma * covariates[0] + alpha * a).exp();
        worst = worst.max((got - expected).abs() / expected);
    }
    check(worst < 1e-10, format!("100 draws, max rel. error {worst:.2e}"))
}

// ---------------------------------------------------------------- criterion 4

fn criterion_4() -> Outcome {
    let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-14 * y.abs().max(1.0));
    // Three imputations of two coefficients.
    let est = vec![vec![1.0, 2.0], vec![2.0, 2.0], vec![4.0, 2.0]];
    let within = vec![vec![0.5, 0.1], vec![0.25, 0.2], vec![0.75, 0.3]];
    let p = rubin_pool(&est, &within).map_err(|e| e.to_string())?;
    // mean (7/3, 2); W (0.5, 0.2);
    // B_1 = ((4/3)^2 + (1/3)^2 + (5/3)^2) / 2 = 7/3, B_2 = 0;
    // T = W + (4/3) B = (0.5 + 28/9, 0.2).
    let ok = close(&p.mean, &[7.0 / 3.0, 2.0])
        && close(&p.within, &[0.5, 0.2])
        && close(&p.between, &[7.0 / 3.0, 0.0])
        && close(&p.total, &[0.5 + 28.0 / 9.0, 0.2]);
    // Identical estimates: B = 0 and T = W.
    let same = rubin_pool(&[vec![0.3], vec![0.3]], &[vec![0.02], vec![0.04]]).map_err(|e| e.to_string())?;
    let ok_zero = same.between == vec![0.0] && close(&same.total, &[0.03]) && close(&same.mean, &[0.3]);
    check(
        ok && ok_zero,
        format!("pooled {:?} / {:?} / {:?} / {:?}; B=0 case T={:?}", p.mean, p.within, p.between, p.total, same.total),
    )
}

// ------------------------------------------------------------- criteria 5, 6

fn study() -> Result<StudyReport, String> {
    let mut cfg = StudyConfig {
        replicates: 20,
        scenario: SimScenario::new(2.0, vec![-0.5, -0.5, 0.5, 0.5], 0.1, 0.5),
        ..StudyConfig::default()
    };
    cfg.fit.stage1.chain.iterations = 2000;
    cfg.fit.stage1.chain.burn_in = 1000;
    cfg.fit.stage1.chain.thin = 1;
    run_study(&cfg).map_err(|e| e.to_string())
}

fn rb(report: &StudyReport, method: StudyMethod, k: usize) -> f64 {
    report
        .parameters
        .iter()
        .find(|p| p.method == method && p.parameter == format!("alpha{}", k + 1))
        .map_or(f64::NAN, |p| p.relative_bias)
}

fn criterion_5(report: &StudyReport) -> Outcome {
    let get = |m| (0..4).map(|k| rb(report, m, k)).collect::<Vec<_>>();
    let (tsjm, mts, truth) = (get(StudyMethod::Tsjm), get(StudyMethod::Mts), get(StudyMethod::True));
    let a = mts[0] < 0.0 && mts[0].abs() > 0.10;
    let better = (0..4).filter(|&k| tsjm[k].abs() < mts[k].abs()).count();
    let c = truth.iter().all(|r| r.abs() < 0.10);
    check(
        a && better >= 3 && c && report.failures.is_empty(),
        format!(
            "RB TSJM {tsjm:.3?}, MTS {mts:.3?}, TRUE {truth:.3?}; (a) {a}, (b) {better}/4, (c) {c}, failed fits {}",
            report.failures.len()
        ),
    )
}

fn criterion_6(report: &StudyReport) -> Outcome {
    let auc = |m: StudyMethod, s: f64| {
        report
            .metrics
            .iter()
            .find(|x| x.method == m && x.landmark == s)
            .map_or(f64::NAN, |x| x.auc_mean)
    };
    let mut ok = true;
    let mut parts = Vec::new();
    for s in [0.0, 0.25, 0.5] {
        let (t, m) = (auc(StudyMethod::Tsjm, s), auc(StudyMethod::Mts, s));
        ok &= t > m;
        parts.push(format!("s={s}: TSJM {t:.4} vs MTS {m:.4}"));
    }
    check(ok, parts.join(", "))
}

// ---------------------------------------------------------------- criterion 7

fn criterion_7() -> Outcome {
    let mut scenario = SimScenario::default();
    scenario.n = 40;
    scenario.seed = 9;
    let sim = simulate_dataset(&scenario).map_err(|e| e.to_string())?;
    let mut opts = TwoStageOptions::default();
    opts.stage1.chain.iterations = 300;
    opts.stage1.chain.burn_in = 150;
    opts.stage1.chain.thin = 1;
    opts.imputations = 2;
    let mut model = fit_tsjm(&sim.data, &opts).map_err(|e| e.to_string())?;

    // theta = 0 and Breslow steps of lambda h on a dyadic grid: the step
    // hazard integrates a constant hazard exactly.
    let h = 1.0 / 64.0;
    let grid: Vec<f64> = (1..=128).map(|k| k as f64 * h).collect();
    let constant = |lambda: f64| BreslowBaseline {
        times: grid.clone(),
        increments: vec![lambda * h; grid.len()],
    };
    let (l1, l2) = (0.8, 0.3);
    model.stage2.estimates.iter_mut().for_each(|v| *v = 0.0);
    model.stage2.baseline = constant(l1);
    let mut other = model.clone();
    other.event_of_interest = 2;
    other.stage2.baseline = constant(l2);

    let settings = PredictionSettings::default();
    let mut worst_single = 0.0f64;
    let mut worst_sum = 0.0f64;
    let mut worst_cif = 0.0f64;
    for (s, t) in [(0.0, 0.5), (0.25, 0.5), (0.5, 1.0)] {
        let queries = queries_from_dataset(&sim.data, &model, s, t).map_err(|e| e.to_string())?;
        for q in queries.iter().take(5) {
            let pi = predict_first_order(&model, q, &settings).map_err(|e| e.to_string())?.point;
            worst_single = worst_single.max((pi - (1.0 - (-l1 * t).exp())).abs());
            let ci = cumulative_incidence(&[model.clone(), other.clone()], q, &settings).map_err(|e| e.to_string())?;
            let total = ci.incidence.iter().sum::<f64>() + ci.survival;
            worst_sum = worst_sum.max((total - 1.0).abs());
            let all = 1.0 - (-(l1 + l2) * t).exp();
            worst_cif = worst_cif
                .max((ci.incidence[0] - l1 / (l1 + l2) * all).abs())
                .max((ci.incidence[1] - l2 / (l1 + l2) * all).abs())
                .max((ci.survival - (-(l1 + l2) * t).exp()).abs());
        }
    }
    check(
        worst_single < 1e-10 && worst_sum < 1e-10 && worst_cif < 1e-10,
        format!("max error: risk {worst_single:.1e}, CIF sum {worst_sum:.1e}, CIF closed form {worst_cif:.1e}"),
    )
}

// ---------------------------------------------------------------- criterion 8

/// Brute-force IPCW estimates: censoring Kaplan-Meier by explicit products,
/// weights per subject and an explicit double sum over pairs.
fn oracle(preds: &[f64], times: &[f64], causes: &[u32], s: f64, t: f64, cause: u32) -> (f64, f64) {
    let idx: Vec<usize> = (0..times.len()).filter(|&i| times[i] > s).collect();
    let u: Vec<f64> = idx.iter().map(|&i| times[i] - s).collect();
    let cens: Vec<bool> = idx.iter().map(|&i| causes[i] == 0).collect();
    let g = |x: f64, strict: bool| {
        let mut prod = 1.0;
        let mut cs: Vec<f64> = (0..u.len()).filter(|&j| cens[j]).map(|j| u[j]).collect();
        cs.sort_by(f64::total_cmp);
        cs.dedup();
        for c in cs {
            if c < x || (!strict && c == x) {
                let at_risk = u.iter().filter(|&&v| v >= c).count() as f64;
                let d = (0..u.len()).filter(|&j| cens[j] && u[j] == c).count() as f64;
                prod *= 1.0 - d / at_risk;
            }
        }
        prod
    };
    let w: Vec<f64> = (0..u.len())
        .map(|j| {
            if u[j] > t {
                1.0 / g(t, false)
            } else if cens[j] {
                0.0
            } else {
                1.0 / g(u[j], true)
            }
        })
        .collect();
    let case: Vec<bool> = (0..u.len()).map(|j| u[j] <= t && causes[idx[j]] == cause).collect();
    let (mut num, mut den) = (0.0, 0.0);
    for a in 0..u.len() {
        for b in 0..u.len() {
            if case[a] && !case[b] && w[a] > 0.0 && w[b] > 0.0 {
                let (pa, pb) = (preds[idx[a]], preds[idx[b]]);
                let c = if pa > pb {
                    1.0
                } else if pa == pb {
                    0.5
                } else {
                    0.0
                };
                num += w[a] * w[b] * c;
                den += w[a] * w[b];
            }
        }
    }
    let bs = (0..u.len())
        .map(|j| w[j] * (case[j] as u8 as f64 - preds[idx[j]]).powi(2))
        .sum::<f64>()
        / u.len() as f64;
    (num / den, bs)
}

fn criterion_8() -> Outcome {
    let input = |preds: &[f64], times: &[f64], causes: &[u32], s: f64, t: f64| MetricInput {
        predictions: preds.to_vec(),
        times: times.to_vec(),
        causes: causes.to_vec(),
        landmark: s,
        window: t,
        event_of_interest: 1,
    };
    let mut worst = 0.0f64;

    // Uncensored: plain empirical concordance and mean squared error.
    let preds = [0.9, 0.1, 0.7, 0.4, 0.4, 0.6, 0.2, 0.8, 0.4, 0.3];
    let times = [0.3, 2.0, 0.8, 1.4, 0.6, 1.9, 0.2, 0.9, 1.2, 0.5];
    let causes = [1, 1, 1, 1, 2, 1, 1, 1, 1, 2];
    for (s, t) in [(0.0, 1.0), (0.25, 0.5), (0.4, 1.0)] {
        let at: Vec<usize> = (0..10).filter(|&i| times[i] > s).collect();
        let case = |i: usize| times[i] - s <= t && causes[i] == 1;
        let (mut num, mut den) = (0.0, 0.0);
        for &a in &at {
            for &b in &at {
                if case(a) && !case(b) {
                    den += 1.0;
                    num += if preds[a] > preds[b] {
                        1.0
                    } else if preds[a] == preds[b] {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        let bs = at.iter().map(|&i| (case(i) as u8 as f64 - preds[i]).powi(2)).sum::<f64>() / at.len() as f64;
        let inp = input(&preds, &times, &causes, s, t);
        let auc = ipcw_auc(&inp).map_err(|e| e.to_string())?.value;
        let brier = ipcw_brier(&inp).map_err(|e| e.to_string())?.value;
        worst = worst.max((auc - num / den).abs()).max((brier - bs).abs());
    }
    let uncensored = worst;

    // Censored n = 8: tied event and censoring time, a competing event in
    // the window, tied predictions and one subject gone before the landmark.
    let preds = [0.9, 0.8, 0.3, 0.5, 0.6, 0.5, 0.2, 0.5];
    let times = [0.2, 0.5, 0.7, 0.9, 0.9, 1.1, 1.5, 2.0];
    let causes = [1, 1, 0, 1, 0, 2, 0, 1];
    let mut worst = 0.0f64;
    for (s, t) in [(0.3, 1.0), (0.0, 1.0), (0.3, 0.6)] {
        let (auc_o, bs_o) = oracle(&preds, &times, &causes, s, t, 1);
        let inp = input(&preds, &times, &causes, s, t);
        let auc = ipcw_auc(&inp).map_err(|e| e.to_string())?.value;
        let brier = ipcw_brier(&inp).map_err(|e| e.to_string())?.value;
        worst = worst.max((auc - auc_o).abs()).max((brier - bs_o).abs());
    }
    check(
        uncensored < 1e-14 && worst < 1e-12,
        format!("uncensored max diff {uncensored:.1e}, censored oracle max diff {worst:.1e}"),
    )
}

// ---------------------------------------------------------------- criterion 9

fn criterion_9() -> Outcome {
    let scenario = SimScenario::default();
    let sim = simulate_dataset(&scenario).map_err(|e| e.to_string())?;
    let data = &sim.data;
    let n = data.n_subjects();
    let censored = data.survival().iter().filter(|r| r.cause == 0).count() as f64 / n as f64;
    let mut counts = vec![0usize; n * scenario.n_markers];
    for obs in data.longitudinal() {
        let i = data.subject_index(&obs.subject).unwrap();
        counts[i * scenario.n_markers + (obs.marker as usize - 1)] += 1;
    }
    counts.sort_unstable();
    let median = counts[counts.len() / 2];

    let true_b = sim.truth.random_effects_for(data).map_err(|e| e.to_string())?;
    let fit = fit_true(data, &scenario.beta, &true_b, 1, &[], &CoxOptions::default()).map_err(|e| e.to_string())?;
    let se = fit.standard_errors();
    let z: Vec<f64> = (0..4).map(|k| (fit.coefficients[k] - scenario.alpha[k]) / se[k]).collect();
    check(
        n == 1000 && (censored - 0.70).abs() <= 0.05 && median == 5 && z.iter().all(|z| z.abs() < 3.0),
        format!("n={n}, censored {censored:.3}, median measurements {median}, TRUE alpha z {z:.2?}"),
    )
}

fn run(label: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let out = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let secs = start.elapsed().as_secs_f64();
    match out {
        Ok(d) => {
            println!("criterion {label}: PASS ({d}) [{secs:.1}s]");
            true
        }
        Err(d) => {
            println!("criterion {label}: FAIL ({d}) [{secs:.1}s]");
            false
        }
    }
}

fn main() {
    // Only the whole-target form of `cargo test` runs this binary; a name
    // filter aimed at other targets skips it.
    if std::env::args().skip(1).any(|a| !a.starts_with('-')) {
        return;
    }
    let mut ok = true;
    ok &= run("1", criterion_1);
    ok &= run("2", criterion_2);
    ok &= run("3", criterion_3);
    ok &= run("4", criterion_4);
    let report = study();
    match &report {
        Ok(r) => {
            ok &= run("5", || criterion_5(r));
            ok &= run("6", || criterion_6(r));
        }
        Err(e) => {
            println!("criterion 5: FAIL (study failed: {e})");
            println!("criterion 6: FAIL (study failed: {e})");
            ok = false;
        }
    }
    ok &= run("7", criterion_7);
    ok &= run("8", criterion_8);
    ok &= run("9", criterion_9);
    if !ok {
        std::process::exit(1);
    }
}
