use approx::assert_relative_eq;

use tsjm::cox::{fit_cox, time_fixed_rows, CoxOptions};
use tsjm::data::Dataset;
use tsjm::design::MarkerDesign;
use tsjm::predict::{
    cumulative_incidence, predict_first_order, predict_monte_carlo, queries_from_dataset, PredictionQuery,
    PredictionSettings,
};
use tsjm::sim::{simulate_dataset, SimScenario, SimulatedData};
use tsjm::two_stage::{fit_mts, fit_true, fit_tsjm, Method, TwoStageModel, TwoStageOptions};

fn quick_options() -> TwoStageOptions {
    let mut opts = TwoStageOptions::default();
    opts.stage1.chain.iterations = 400;
    opts.stage1.chain.burn_in = 200;
    opts.stage1.chain.thin = 2;
    opts.imputations = 4;
    opts
}

fn simulated(n: usize, seed: u64) -> SimulatedData {
    let scenario = SimScenario {
        n,
        seed,
        ..SimScenario::default()
    };
    simulate_dataset(&scenario).unwrap()
}

fn pool(threads: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap()
}

#[test]
fn bundle_round_trip_and_thread_count_independence() {
    let sim = simulated(80, 4);
    let opts = quick_options();
    let single = pool(1).install(|| fit_tsjm(&sim.data, &opts)).unwrap();
    let multi = pool(3).install(|| fit_tsjm(&sim.data, &opts)).unwrap();
    assert_eq!(single, multi);
    assert_eq!(single.method, Method::Tsjm);
    assert_eq!(single.stage2.m(), 4);

    let dir = tempfile::tempdir().unwrap();
    single.save(dir.path()).unwrap();
    let loaded = TwoStageModel::load(dir.path()).unwrap();
    assert_eq!(loaded, single);
}

#[test]
fn marker_order_only_permutes_coefficients() {
    let sim = simulated(80, 6);
    let opts = quick_options();
    let forward = fit_mts(&sim.data, &opts).unwrap();
    let mut specs = sim.data.marker_specs().to_vec();
    specs.reverse();
    let reversed_data: Dataset = sim.data.clone().with_marker_specs(specs).unwrap();
    let reversed = fit_mts(&reversed_data, &opts).unwrap();
    let k = forward.stage2.estimates.len();
    for j in 0..k {
        assert_relative_eq!(forward.stage2.estimates[j], reversed.stage2.estimates[k - 1 - j], max_relative = 1e-8);
        assert_relative_eq!(
            forward.stage2.total[(j, j)],
            reversed.stage2.total[(k - 1 - j, k - 1 - j)],
            max_relative = 1e-8
        );
    }
}

#[test]
fn constant_trajectories_reduce_to_a_time_fixed_fit() {
    let sim = simulated(300, 8);
    let data = &sim.data;
    // No time trend in the fixed or random effects: eta is constant per subject.
    let beta: Vec<Vec<f64>> = vec![vec![-0.5, 0.0, 0.5, 0.5]; 4];
    let true_b: Vec<Vec<Vec<f64>>> = sim
        .truth
        .random_effects_for(data)
        .unwrap()
        .into_iter()
        .map(|per| per.into_iter().map(|b| vec![b[0], 0.0]).collect())
        .collect();
    let td = fit_true(data, &beta, &true_b, 1, &[], &CoxOptions::default()).unwrap();

    let designs: Vec<MarkerDesign> = data
        .marker_specs()
        .iter()
        .map(|s| MarkerDesign::new(s, data.covariate_names()).unwrap())
        .collect();
    let eta0: Vec<Vec<f64>> = data
        .survival()
        .iter()
        .zip(&true_b)
        .map(|(rec, bs)| {
            designs
                .iter()
                .zip(&beta)
                .zip(bs)
                .map(|((d, be), b)| d.trajectory(be, b, &rec.covariates).unwrap().value(0.0))
                .collect()
        })
        .collect();
    let rows = time_fixed_rows(data.survival(), 1, &eta0);
    let names: Vec<String> = (1..=4).map(|k| format!("m{k}")).collect();
    let fixed = fit_cox(&rows, &names, None, &CoxOptions::default()).unwrap();
    for (a, b) in td.coefficients.iter().zip(&fixed.coefficients) {
        assert_relative_eq!(a, b, max_relative = 1e-8);
    }
}

fn risk_queries(model: &TwoStageModel, data: &Dataset, s: f64, t: f64) -> Vec<PredictionQuery> {
    queries_from_dataset(data, model, s, t).unwrap().into_iter().take(8).collect()
}

#[test]
fn predictions_are_probabilities_that_grow_with_the_window() {
    let sim = simulated(120, 12);
    let model = fit_tsjm(&sim.data, &quick_options()).unwrap();
    let settings = PredictionSettings {
        draws: 20,
        inner_draws: 2,
        ..PredictionSettings::default()
    };
    let mut other = model.clone();
    other.event_of_interest = 2;
    for s in [0.0, 0.3] {
        let short = risk_queries(&model, &sim.data, s, 0.25);
        let long = risk_queries(&model, &sim.data, s, 0.75);
        for (qs, ql) in short.iter().zip(&long) {
            let a = predict_first_order(&model, qs, &settings).unwrap().point;
            let b = predict_first_order(&model, ql, &settings).unwrap().point;
            assert!((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b));
            assert!(b >= a, "{} at s={s}: {a} > {b}", qs.subject);

            let mc = predict_monte_carlo(&model, ql, &settings).unwrap();
            assert!(mc.draws.iter().all(|p| (0.0..=1.0).contains(p)));
            assert!(mc.lower.unwrap() <= mc.point && mc.point <= mc.upper.unwrap());

            let ci = cumulative_incidence(&[model.clone(), other.clone()], ql, &settings).unwrap();
            let total: f64 = ci.incidence.iter().sum::<f64>() + ci.survival;
            assert!((total - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn raising_the_marker_does_not_lower_risk_under_positive_association() {
    let scenario = SimScenario {
        n: 200,
        seed: 21,
        ..SimScenario::new(1.0, vec![0.8], 0.0, 0.5)
    };
    let sim = simulate_dataset(&scenario).unwrap();
    let model = fit_tsjm(&sim.data, &quick_options()).unwrap();
    assert!(model.stage2.estimates[0] > 0.0);
    let settings = PredictionSettings::default();
    for q in risk_queries(&model, &sim.data, 0.0, 0.5) {
        let base = predict_first_order(&model, &q, &settings).unwrap().point;
        let mut up = q.clone();
        for h in &mut up.histories {
            h.iter_mut().for_each(|(_, y)| *y += 1.0);
        }
        let raised = predict_first_order(&model, &up, &settings).unwrap().point;
        assert!(raised >= base, "{}: {raised} < {base}", q.subject);
    }
}
