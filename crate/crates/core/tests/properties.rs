use approx::assert_relative_eq;
use nalgebra::DMatrix;
use proptest::prelude::*;

use tsjm::cox::{breslow, fit_cox, log_partial_likelihood, time_fixed_rows, CoxOptions};
use tsjm::data::{read_dataset, split_train_validation, write_dataset, Dataset, LongitudinalObservation, Schema, SurvivalRecord};
use tsjm::design::MarkerSpec;
use tsjm::mcmc::{cumulative_hazard, log_likelihood_subject, JointModelParams, OneMarkerModel, PiecewiseBaseline};
use tsjm::metrics::{ipcw_auc, ipcw_brier, KaplanMeier, MetricInput};
use tsjm::sim::{simulate_dataset, SimScenario};
use tsjm::two_stage::{imputation_indices, rubin_pool};

fn survival_strategy(max_n: usize) -> impl Strategy<Value = Vec<(f64, u32, f64)>> {
    proptest::collection::vec((1u32..=40, 0u32..=2, -2.0..2.0f64), 4..=max_n)
        .prop_map(|v| v.into_iter().map(|(t, c, x)| (t as f64 * 0.1, c, x)).collect())
}

fn records(rows: &[(f64, u32, f64)]) -> Vec<SurvivalRecord> {
    rows.iter()
        .enumerate()
        .map(|(i, &(time, cause, x))| SurvivalRecord {
            subject: format!("id{i}"),
            time,
            cause,
            covariates: vec![x],
        })
        .collect()
}

fn small_dataset(rows: &[(f64, u32, f64)], values: &[f64]) -> Dataset {
    let surv = records(rows);
    let mut long = Vec::new();
    for (i, rec) in surv.iter().enumerate() {
        for (j, marker) in [1u32, 2].iter().enumerate() {
            let time = rec.time * j as f64 / 2.0;
            long.push(LongitudinalObservation {
                subject: rec.subject.clone(),
                marker: *marker,
                time,
                value: values[(i + j) % values.len()],
            });
        }
    }
    Dataset::new(long, surv, vec![], vec!["x".into()]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn dataset_text_round_trip(rows in survival_strategy(12), values in proptest::collection::vec(-1e3..1e3f64, 1..8)) {
        let data = small_dataset(&rows, &values);
        let (mut long, mut surv) = (Vec::new(), Vec::new());
        write_dataset(&data, &mut long, &mut surv, ',').unwrap();
        let schema = Schema { covariate_columns: vec!["x".into()], ..Schema::default() };
        let back = read_dataset(&long[..], &surv[..], &schema).unwrap();
        prop_assert_eq!(back, data);
    }

    #[test]
    fn split_is_disjoint_and_exhaustive(rows in survival_strategy(30), frac in 0.1..0.9f64, seed in 0u64..1000) {
        let data = small_dataset(&rows, &[1.0]);
        let (a, b) = split_train_validation(&data, frac, seed).unwrap();
        let mut ids: Vec<String> = a.survival().iter().chain(b.survival()).map(|r| r.subject.clone()).collect();
        prop_assert_eq!(ids.len(), data.n_subjects());
        ids.sort();
        ids.dedup();
        prop_assert_eq!(ids.len(), data.n_subjects());
        for obs in a.longitudinal() {
            prop_assert!(a.subject_index(&obs.subject).is_some());
        }
    }

    #[test]
    fn cumulative_hazard_starts_at_zero_and_grows(
        beta in proptest::collection::vec(-1.0..1.0f64, 2),
        b in proptest::collection::vec(-1.0..1.0f64, 2),
        alpha in -2.0..2.0f64,
        heights in proptest::collection::vec(0.01..3.0f64, 3),
        times in proptest::collection::vec(0.0..3.0f64, 2..10),
    ) {
        let spec = MarkerSpec::linear(1, "y", &[]);
        let model = OneMarkerModel::new(&spec, &[], &[]).unwrap();
        let params = JointModelParams {
            beta,
            sigma2: 1.0,
            sigma: DMatrix::identity(2, 2),
            gamma: vec![],
            alpha: vec![alpha],
            baseline: Some(PiecewiseBaseline::new(vec![0.0, 1.0, 2.0, 3.0], heights).unwrap()),
        };
        prop_assert_eq!(cumulative_hazard(&params, &b, &model, &[], 0.0).unwrap(), 0.0);
        let mut ts = times;
        ts.sort_by(f64::total_cmp);
        let vals: Vec<f64> = ts.iter().map(|&t| cumulative_hazard(&params, &b, &model, &[], t).unwrap()).collect();
        for w in vals.windows(2) {
            prop_assert!(w[1] >= w[0]);
        }
    }

    #[test]
    fn duplicated_measurements_double_the_longitudinal_term(
        ys in proptest::collection::vec(-3.0..3.0f64, 1..5),
        b in proptest::collection::vec(-1.0..1.0f64, 2),
        event in proptest::bool::ANY,
    ) {
        let spec = MarkerSpec::linear(1, "y", &[]);
        let model = OneMarkerModel::new(&spec, &[], &[]).unwrap();
        let params = JointModelParams {
            beta: vec![0.3, -0.2],
            sigma2: 0.7,
            sigma: DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]),
            gamma: vec![],
            alpha: vec![0.4],
            baseline: Some(PiecewiseBaseline::new(vec![0.0, 1.5, 3.0], vec![0.5, 1.2]).unwrap()),
        };
        let rec = SurvivalRecord { subject: "a".into(), time: 2.5, cause: event as u32, covariates: vec![] };
        let hist: Vec<(f64, f64)> = ys.iter().enumerate().map(|(j, &y)| (0.5 * j as f64, y)).collect();
        let doubled: Vec<(f64, f64)> = hist.iter().chain(&hist).copied().collect();
        let none = log_likelihood_subject(&params, &b, &[], &rec, &model, 1).unwrap();
        let once = log_likelihood_subject(&params, &b, &hist, &rec, &model, 1).unwrap();
        let twice = log_likelihood_subject(&params, &b, &doubled, &rec, &model, 1).unwrap();
        assert_relative_eq!(twice - none, 2.0 * (once - none), max_relative = 1e-12, epsilon = 1e-12);
    }

    #[test]
    fn cox_fit_is_scale_equivariant(rows in survival_strategy(40), c in 0.2..5.0f64) {
        let surv = records(&rows);
        prop_assume!(surv.iter().filter(|r| r.cause == 1).count() >= 3);
        let xs: Vec<Vec<f64>> = surv.iter().map(|r| r.covariates.clone()).collect();
        let scaled: Vec<Vec<f64>> = xs.iter().map(|x| vec![x[0] * c]).collect();
        let a = time_fixed_rows(&surv, 1, &xs);
        let s = time_fixed_rows(&surv, 1, &scaled);
        let names = ["x".to_string()];
        let (fa, fs) = match (fit_cox(&a, &names, None, &CoxOptions::default()), fit_cox(&s, &names, None, &CoxOptions::default())) {
            (Ok(fa), Ok(fs)) => (fa, fs),
            // Separated samples fail for both scalings.
            (Err(_), Err(_)) => return Ok(()),
            (fa, fs) => return Err(TestCaseError::fail(format!("{:?} vs {:?}", fa.err(), fs.err()))),
        };
        assert_relative_eq!(fs.coefficients[0] * c, fa.coefficients[0], max_relative = 1e-8, epsilon = 1e-9);
        let la = log_partial_likelihood(&a, &fa.coefficients).unwrap().value;
        let ls = log_partial_likelihood(&s, &fs.coefficients).unwrap().value;
        assert_relative_eq!(la, ls, max_relative = 1e-8, epsilon = 1e-9);
        let ba = breslow(&a, &fa.coefficients).unwrap();
        let bs = breslow(&s, &fs.coefficients).unwrap();
        prop_assert_eq!(&ba.times, &bs.times);
        for (x, y) in ba.increments.iter().zip(&bs.increments) {
            assert_relative_eq!(x, y, max_relative = 1e-8);
        }
    }

    #[test]
    fn breslow_is_a_nondecreasing_step_at_event_times(rows in survival_strategy(40), theta in -1.0..1.0f64) {
        let surv = records(&rows);
        let xs: Vec<Vec<f64>> = surv.iter().map(|r| r.covariates.clone()).collect();
        let cp = time_fixed_rows(&surv, 1, &xs);
        prop_assume!(cp.iter().any(|r| r.event));
        let base = breslow(&cp, &[theta]).unwrap();
        prop_assert!(base.increments.iter().all(|d| *d > 0.0));
        for t in &base.times {
            prop_assert!(surv.iter().any(|r| r.cause == 1 && r.time == *t));
        }
        prop_assert!(base.times.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn rubin_total_identity_and_order_invariance(
        est in proptest::collection::vec(proptest::collection::vec(-5.0..5.0f64, 3), 2..8),
        var in proptest::collection::vec(proptest::collection::vec(0.0..2.0f64, 3), 8),
    ) {
        let m = est.len();
        let within = var[..m].to_vec();
        let p = rubin_pool(&est, &within).unwrap();
        for j in 0..3 {
            prop_assert_eq!(p.total[j], p.within[j] + (1.0 + 1.0 / m as f64) * p.between[j]);
            prop_assert!(p.between[j] >= 0.0);
        }
        let (mut er, mut wr) = (est.clone(), within.clone());
        er.reverse();
        wr.reverse();
        let q = rubin_pool(&er, &wr).unwrap();
        for j in 0..3 {
            assert_relative_eq!(p.mean[j], q.mean[j], epsilon = 1e-12);
            assert_relative_eq!(p.total[j], q.total[j], max_relative = 1e-12, epsilon = 1e-12);
        }
    }

    #[test]
    fn imputation_indices_are_sorted_and_in_range(d in 1usize..500, m in 1usize..50) {
        let idx = imputation_indices(d, m);
        prop_assert_eq!(idx.len(), m);
        prop_assert!(idx.iter().all(|&i| i < d));
        prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
        if m <= d {
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn kaplan_meier_is_a_nonincreasing_survival_curve(
        pts in proptest::collection::vec((1u32..30, proptest::bool::ANY), 1..40),
        probe in proptest::collection::vec(0.0..4.0f64, 5),
    ) {
        let times: Vec<f64> = pts.iter().map(|p| p.0 as f64 * 0.1).collect();
        let events: Vec<bool> = pts.iter().map(|p| p.1).collect();
        let km = KaplanMeier::fit(&times, &events);
        prop_assert!(km.survival.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(km.survival.iter().all(|s| (0.0..=1.0).contains(s)));
        for t in probe {
            prop_assert!(km.before(t) >= km.at(t));
        }
    }

    #[test]
    fn auc_ignores_increasing_transforms_and_brier_relabeling(
        rows in survival_strategy(30),
        preds in proptest::collection::vec(0.0..1.0f64, 30),
        s in 0.0..1.0f64,
    ) {
        let n = rows.len();
        let input = MetricInput {
            predictions: preds[..n].to_vec(),
            times: rows.iter().map(|r| r.0).collect(),
            causes: rows.iter().map(|r| r.1).collect(),
            landmark: s,
            window: 1.0,
            event_of_interest: 1,
        };
        let Ok(auc) = ipcw_auc(&input) else { return Ok(()) };
        prop_assert!((0.0..=1.0).contains(&auc.value));
        let squashed = MetricInput {
            predictions: input.predictions.iter().map(|p| p.powi(3)).collect(),
            ..input.clone()
        };
        assert_relative_eq!(ipcw_auc(&squashed).unwrap().value, auc.value, epsilon = 1e-12);

        let bs = ipcw_brier(&input).unwrap().value;
        prop_assert!(bs >= 0.0);
        let mut order: Vec<usize> = (0..n).collect();
        order.reverse();
        let relabeled = MetricInput {
            predictions: order.iter().map(|&i| input.predictions[i]).collect(),
            times: order.iter().map(|&i| input.times[i]).collect(),
            causes: order.iter().map(|&i| input.causes[i]).collect(),
            ..input.clone()
        };
        assert_relative_eq!(ipcw_brier(&relabeled).unwrap().value, bs, epsilon = 1e-12);
        let doubled = MetricInput {
            predictions: input.predictions.repeat(2),
            times: input.times.repeat(2),
            causes: input.causes.repeat(2),
            ..input.clone()
        };
        assert_relative_eq!(ipcw_brier(&doubled).unwrap().value, bs, epsilon = 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 8, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn simulated_rows_end_by_the_survival_time(seed in 0u64..10_000, n in 5usize..60) {
        let scenario = SimScenario { n, seed, ..SimScenario::default() };
        let sim = simulate_dataset(&scenario).unwrap();
        for obs in sim.data.longitudinal() {
            let i = sim.data.subject_index(&obs.subject).unwrap();
            prop_assert!(obs.time <= sim.data.survival()[i].time);
        }
        let again = simulate_dataset(&scenario).unwrap();
        prop_assert_eq!(sim.data, again.data);
    }
}
