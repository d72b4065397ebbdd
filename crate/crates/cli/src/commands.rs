//! The five subcommands. Each takes a fully merged [`RunConfig`], writes its
//! artifacts plus a copy of the configuration, and logs progress to stderr.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use tsjm::cox::CoxFit;
use tsjm::data::{load_dataset, read_survival, save_dataset, Dataset, SurvivalRecord};
use tsjm::design::MarkerSpec;
use tsjm::metrics::{compare_auc, compare_brier, ipcw_auc, ipcw_brier, MetricInput};
use tsjm::predict::{
    predict_batch, predict_cif, queries_from_dataset, query_for_subject, read_predictions, read_queries,
    write_predictions, PredictionQuery, PredictionRecord, RiskPrediction,
};
use tsjm::sim::{simulate_replicate, SimTruth, COVARIATES};
use tsjm::study::run_study;
use tsjm::two_stage::{fit_mts, fit_true, fit_tsjm, TwoStageModel};

use crate::config::{DataConfig, FitMethod, RunConfig};
use crate::error::CliError;

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, CliError> {
    p.as_deref()
        .ok_or_else(|| CliError::Usage(format!("no {what} file given")))
}

/// Loads the dataset and binds the configured marker models.
pub fn load_data(cfg: &DataConfig) -> Result<Dataset, CliError> {
    let data = load_dataset(
        required(&cfg.longitudinal, "longitudinal")?,
        required(&cfg.survival, "survival")?,
        &cfg.schema,
    )?;
    let specs: Vec<MarkerSpec> = if !cfg.markers.is_empty() {
        cfg.markers.clone()
    } else if !cfg.marker_covariates.is_empty() {
        let covs: Vec<&str> = cfg.marker_covariates.iter().map(String::as_str).collect();
        data.marker_specs()
            .iter()
            .map(|s| MarkerSpec::linear(s.marker, s.name.clone(), &covs))
            .collect()
    } else {
        return Ok(data);
    };
    Ok(data.with_marker_specs(specs)?)
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<(), CliError> {
    let sim_cfg = &cfg.simulate;
    sim_cfg.scenario.validate()?;
    if sim_cfg.replicates == 0 {
        return Err(CliError::Usage("replicates must be at least 1".into()));
    }
    fs::create_dir_all(&sim_cfg.out)?;
    let width = sim_cfg.replicates.to_string().len().max(3);
    (0..sim_cfg.replicates)
        .into_par_iter()
        .map(|r| -> Result<(), CliError> {
            let sim = simulate_replicate(&sim_cfg.scenario, r as u64)?;
            let dir = sim_cfg.out.join(format!("rep{:0width$}", r + 1));
            fs::create_dir_all(&dir)?;
            save_dataset(&sim.data, &dir.join("longitudinal.csv"), &dir.join("survival.csv"))?;
            sim.truth.to_writer(BufWriter::new(File::create(dir.join("truth.json"))?))?;

            // A configuration that fits this replicate as it stands.
            let mut rep = cfg.clone();
            let covariates: Vec<String> = COVARIATES.iter().map(|c| c.to_string()).collect();
            rep.data = DataConfig {
                longitudinal: Some("longitudinal.csv".into()),
                survival: Some("survival.csv".into()),
                truth: Some("truth.json".into()),
                schema: tsjm::data::default_schema(&covariates),
                markers: Vec::new(),
                marker_covariates: covariates,
            };
            rep.simulate.scenario = sim.truth.scenario.clone();
            rep.simulate.replicates = 1;
            rep.simulate.out = ".".into();
            rep.fit.out = "model".into();
            rep.predict.model = "model".into();
            rep.predict.out = "predictions.csv".into();
            rep.evaluate.predictions = "predictions.csv".into();
            rep.evaluate.out = "metrics.csv".into();
            rep.evaluate.comparison_out = "comparison.csv".into();
            rep.save(&dir.join("run_config.toml"))?;
            log::info!(
                "replicate {}: {} subjects, {} events",
                r + 1,
                sim.data.n_subjects(),
                sim.data.survival().iter().filter(|s| s.cause != 0).count()
            );
            Ok(())
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(())
}

fn fit_report(model: &TwoStageModel, seconds: f64) -> String {
    let mut out = String::new();
    let s2 = &model.stage2;
    let _ = writeln!(out, "method: {}", model.method);
    let _ = writeln!(out, "imputations: {}", s2.m());
    let _ = writeln!(out, "seconds: {seconds:.2}");
    let _ = writeln!(out);
    let _ = writeln!(out, "{:<20} {:>10} {:>10} {:>10} {:>10}", "covariate", "estimate", "se", "lower", "upper");
    let se = s2.standard_errors();
    for (j, name) in s2.covariate_names.iter().enumerate() {
        let (lo, hi) = s2.interval(j, 1.959_963_984_540_054);
        let _ = writeln!(out, "{name:<20} {:>10.4} {:>10.4} {lo:>10.4} {hi:>10.4}", s2.estimates[j], se[j]);
    }
    let _ = writeln!(out);
    for post in &model.stage1 {
        let acc: Vec<String> = post
            .meta
            .acceptance
            .iter()
            .map(|(block, a)| format!("{block}={a:.3}"))
            .collect();
        let _ = writeln!(out, "marker {} acceptance: {}", post.marker_spec.marker, acc.join(" "));
        for w in &post.meta.warnings {
            let _ = writeln!(out, "marker {} warning: {w}", post.marker_spec.marker);
        }
    }
    out
}

fn true_report(fit: &CoxFit, seconds: f64) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "method: true");
    let _ = writeln!(out, "seconds: {seconds:.2}");
    let _ = writeln!(out, "iterations: {}", fit.iterations);
    let _ = writeln!(out);
    let _ = writeln!(out, "{:<20} {:>10} {:>10}", "covariate", "estimate", "se");
    for ((name, c), s) in fit.covariate_names.iter().zip(&fit.coefficients).zip(fit.standard_errors()) {
        let _ = writeln!(out, "{name:<20} {c:>10.4} {s:>10.4}");
    }
    out
}

pub fn cmd_fit(cfg: &RunConfig) -> Result<(), CliError> {
    let data = load_data(&cfg.data)?;
    let opts = &cfg.fit.options;
    let out = &cfg.fit.out;
    let start = Instant::now();
    match cfg.fit.method {
        FitMethod::Tsjm | FitMethod::Mts => {
            let model = if cfg.fit.method == FitMethod::Tsjm {
                fit_tsjm(&data, opts)?
            } else {
                fit_mts(&data, opts)?
            };
            let seconds = start.elapsed().as_secs_f64();
            log::info!("{} fit finished in {seconds:.1}s", model.method);
            model.save(out)?;
            fs::write(out.join("report.txt"), fit_report(&model, seconds))?;
        }
        FitMethod::True => {
            let path = required(&cfg.data.truth, "truth")?;
            let truth = SimTruth::from_reader(File::open(path)?)?;
            let b = truth.random_effects_for(&data)?;
            let fit = fit_true(
                &data,
                &truth.scenario.beta,
                &b,
                opts.stage1.event_of_interest,
                &opts.stage2_covariates,
                &opts.cox,
            )?;
            let seconds = start.elapsed().as_secs_f64();
            fs::create_dir_all(out)?;
            serde_json::to_writer_pretty(BufWriter::new(File::create(out.join("true_fit.json"))?), &fit)?;
            fs::write(out.join("report.txt"), true_report(&fit, seconds))?;
        }
    }
    cfg.save(&out.join("run_config.toml"))
}

fn build_queries(cfg: &RunConfig, data: &Dataset, model: &TwoStageModel) -> Result<Vec<PredictionQuery>, CliError> {
    let p = &cfg.predict;
    if let Some(path) = &p.queries {
        let rows = read_queries(File::open(path)?)?;
        return rows
            .iter()
            .map(|r| query_for_subject(data, model, &r.subject, r.landmark, r.window).map_err(CliError::from))
            .collect();
    }
    if p.landmarks.is_empty() {
        return Err(CliError::Usage("no landmarks and no query file given".into()));
    }
    let mut out = Vec::new();
    for &s in &p.landmarks {
        out.extend(queries_from_dataset(data, model, s, p.window)?);
    }
    Ok(out)
}

pub fn cmd_predict(cfg: &RunConfig) -> Result<(), CliError> {
    let p = &cfg.predict;
    let data = load_data(&cfg.data)?;
    let model = TwoStageModel::load(&p.model)?;
    let queries = build_queries(cfg, &data, &model)?;
    let preds: Vec<RiskPrediction> = if p.competing.is_empty() {
        predict_batch(&model, &queries, p.algorithm, &p.settings)?
    } else {
        let cause = model.event_of_interest;
        let mut models = vec![model];
        for dir in &p.competing {
            models.push(TwoStageModel::load(dir)?);
        }
        queries
            .par_iter()
            .map(|q| predict_cif(&models, q, cause, &p.settings))
            .collect::<tsjm::Result<Vec<_>>>()?
    };
    log::info!("{} predictions", preds.len());
    if let Some(dir) = p.out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    write_predictions(BufWriter::new(File::create(&p.out)?), &preds)?;
    cfg.save(&sidecar(&p.out))
}

fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".config.toml");
    path.with_file_name(name)
}

type GroupKey = (u64, u64);

fn key(landmark: f64, window: f64) -> GroupKey {
    (landmark.to_bits(), window.to_bits())
}

/// Predictions grouped by `(landmark, window)`, keyed by subject.
fn group(records: &[PredictionRecord]) -> Result<BTreeMap<GroupKey, (String, Vec<&PredictionRecord>)>, CliError> {
    let mut groups: BTreeMap<GroupKey, (String, Vec<&PredictionRecord>)> = BTreeMap::new();
    for r in records {
        let g = groups
            .entry(key(r.landmark, r.window))
            .or_insert_with(|| (r.method.clone(), Vec::new()));
        if g.0 != r.method {
            return Err(CliError::Data(format!(
                "predictions at landmark {} mix methods {} and {}",
                r.landmark, g.0, r.method
            )));
        }
        g.1.push(r);
    }
    for (_, recs) in groups.values_mut() {
        recs.sort_by(|a, b| a.subject.cmp(&b.subject));
        if recs.windows(2).any(|w| w[0].subject == w[1].subject) {
            return Err(CliError::Data("duplicate subject within a prediction group".into()));
        }
    }
    Ok(groups)
}

fn metric_input(
    recs: &[&PredictionRecord],
    survival: &HashMap<&str, &SurvivalRecord>,
    event_of_interest: u32,
) -> Result<MetricInput, CliError> {
    let mut input = MetricInput {
        predictions: Vec::with_capacity(recs.len()),
        times: Vec::with_capacity(recs.len()),
        causes: Vec::with_capacity(recs.len()),
        landmark: recs[0].landmark,
        window: recs[0].window,
        event_of_interest,
    };
    for r in recs {
        let s = survival
            .get(r.subject.as_str())
            .ok_or_else(|| CliError::Data(format!("subject {} has no survival record", r.subject)))?;
        input.predictions.push(r.point);
        input.times.push(s.time);
        input.causes.push(s.cause);
    }
    Ok(input)
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<(), CliError> {
    let e = &cfg.evaluate;
    let records = read_predictions(File::open(&e.predictions)?)?;
    let surv_records = read_survival(File::open(required(&cfg.data.survival, "survival")?)?, &cfg.data.schema)?;
    let survival: HashMap<&str, &SurvivalRecord> = surv_records.iter().map(|r| (r.subject.as_str(), r)).collect();
    let groups = group(&records)?;

    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(&e.out)?));
    w.write_record(["method", "landmark", "window", "metric", "value", "se", "n_at_risk", "n_cases"])?;
    let mut inputs = BTreeMap::new();
    for (k, (method, recs)) in &groups {
        let input = metric_input(recs, &survival, e.event_of_interest)?;
        for (name, est) in [("auc", ipcw_auc(&input)), ("brier", ipcw_brier(&input))] {
            match est {
                Ok(m) => w.write_record([
                    method.clone(),
                    input.landmark.to_string(),
                    input.window.to_string(),
                    name.to_string(),
                    m.value.to_string(),
                    m.se.to_string(),
                    m.n_at_risk.to_string(),
                    m.n_cases.to_string(),
                ])?,
                Err(err) => log::warn!("{name} at landmark {}: {err}", input.landmark),
            }
        }
        inputs.insert(*k, input);
    }
    w.flush()?;

    let Some(other_path) = &e.compare else {
        return cfg.save(&sidecar(&e.out));
    };
    let other_records = read_predictions(File::open(other_path)?)?;
    let other = group(&other_records)?;
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(&e.comparison_out)?));
    w.write_record(["landmark", "window", "metric", "first", "second", "difference", "se", "p_value"])?;
    for (k, input) in &inputs {
        let Some((_, recs)) = other.get(k) else {
            return Err(CliError::Data(format!(
                "second predictions file has no rows for landmark {}",
                input.landmark
            )));
        };
        let first_subjects: Vec<&str> = groups[k].1.iter().map(|r| r.subject.as_str()).collect();
        let second_subjects: Vec<&str> = recs.iter().map(|r| r.subject.as_str()).collect();
        if first_subjects != second_subjects {
            return Err(CliError::Data(format!(
                "prediction files cover different subjects at landmark {}",
                input.landmark
            )));
        }
        let second: Vec<f64> = recs.iter().map(|r| r.point).collect();
        for (name, cmp) in [("auc", compare_auc(input, &second)), ("brier", compare_brier(input, &second))] {
            match cmp {
                Ok(c) => w.write_record([
                    input.landmark.to_string(),
                    input.window.to_string(),
                    name.to_string(),
                    c.first.to_string(),
                    c.second.to_string(),
                    c.difference.to_string(),
                    c.se.to_string(),
                    c.p_value.to_string(),
                ])?,
                Err(err) => log::warn!("{name} comparison at landmark {}: {err}", input.landmark),
            }
        }
    }
    w.flush()?;
    cfg.save(&sidecar(&e.out))
}

pub fn cmd_study(cfg: &RunConfig) -> Result<(), CliError> {
    let out = &cfg.study.out;
    fs::create_dir_all(out)?;
    let start = Instant::now();
    let report = run_study(&cfg.study.settings)?;
    log::info!("study finished in {:.1}s", start.elapsed().as_secs_f64());
    fs::write(out.join("report.txt"), report.render())?;
    serde_json::to_writer_pretty(BufWriter::new(File::create(out.join("report.json"))?), &report)?;
    cfg.save(&out.join("run_config.toml"))
}
