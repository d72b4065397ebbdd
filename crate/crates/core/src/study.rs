//! Replicate simulation study: simulate, split, fit every method on the
//! learning part, predict on the validation part and summarise estimation
//! and prediction accuracy across replicates.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cox::CoxFit;
use crate::data::{split_train_validation, Dataset};
use crate::design::{MarkerDesign, Trajectory};
use crate::error::{Error, Result};
use crate::metrics::{ipcw_auc, ipcw_brier, MetricInput};
use crate::predict::{predict_batch, queries_from_dataset, PredictionMethod, PredictionSettings};
use crate::sim::{simulate_replicate, SimScenario, SimTruth};
use crate::two_stage::{fit_mts, fit_true, fit_tsjm, TwoStageModel, TwoStageOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyMethod {
    Tsjm,
    Mts,
    /// Cox model on the true marker trajectories.
    True,
}

impl std::fmt::Display for StudyMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StudyMethod::Tsjm => "TSJM",
            StudyMethod::Mts => "MTS",
            StudyMethod::True => "TRUE",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    pub scenario: SimScenario,
    pub replicates: usize,
    /// Fraction of subjects in the learning sample.
    pub train_fraction: f64,
    pub methods: Vec<StudyMethod>,
    pub fit: TwoStageOptions,
    pub landmarks: Vec<f64>,
    pub window: f64,
    pub prediction: PredictionMethod,
    pub prediction_settings: PredictionSettings,
    /// Nominal level of the intervals used for coverage.
    pub level: f64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            scenario: SimScenario::default(),
            replicates: 100,
            train_fraction: 0.5,
            methods: vec![StudyMethod::Tsjm, StudyMethod::Mts, StudyMethod::True],
            fit: TwoStageOptions::default(),
            landmarks: vec![0.0, 0.25, 0.5],
            window: 0.5,
            prediction: PredictionMethod::FirstOrder,
            prediction_settings: PredictionSettings::default(),
            level: 0.95,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        if self.replicates == 0 || self.methods.is_empty() {
            return Err(Error::InvalidArgument("study needs at least one replicate and one method".into()));
        }
        if !(self.level > 0.0 && self.level < 1.0) {
            return Err(Error::InvalidArgument("interval level must be in (0,1)".into()));
        }
        if !(self.window > 0.0) || self.landmarks.iter().any(|s| !(*s >= 0.0)) {
            return Err(Error::InvalidArgument("landmarks must be >= 0 and the window positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub landmark: f64,
    pub window: f64,
    pub auc: Option<f64>,
    pub brier: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub replicate: usize,
    pub method: StudyMethod,
    pub estimates: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub seconds: f64,
    pub metrics: Vec<HorizonMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub method: StudyMethod,
    pub parameter: String,
    pub truth: f64,
    pub mean: f64,
    pub relative_bias: f64,
    pub rmse: f64,
    pub coverage: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub method: StudyMethod,
    pub landmark: f64,
    pub window: f64,
    pub auc_mean: f64,
    pub auc_sd: f64,
    pub brier_mean: f64,
    pub brier_sd: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub results: Vec<MethodResult>,
    pub failures: Vec<(usize, StudyMethod, String)>,
    pub parameters: Vec<ParameterSummary>,
    pub metrics: Vec<MetricSummary>,
}

fn z_value(level: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::standard().inverse_cdf(0.5 + level / 2.0)
}

/// Trajectories from the simulation truth, ordered like `data`.
fn true_trajectories(data: &Dataset, truth: &SimTruth) -> Result<Vec<Vec<Trajectory>>> {
    let designs = data
        .marker_specs()
        .iter()
        .map(|s| MarkerDesign::new(s, data.covariate_names()))
        .collect::<Result<Vec<_>>>()?;
    let b = truth.random_effects_for(data)?;
    data.survival()
        .iter()
        .zip(&b)
        .map(|(rec, bs)| {
            designs
                .iter()
                .zip(&truth.scenario.beta)
                .zip(bs)
                .map(|((d, beta), b)| d.trajectory(beta, b, &rec.covariates))
                .collect()
        })
        .collect()
}

/// Risk in `(s, s+t]` under a current-value Cox fit with known trajectories.
fn true_risk(fit: &CoxFit, traj: &[Trajectory], landmark: f64, window: f64) -> f64 {
    let cum: f64 = fit
        .baseline
        .steps_in(landmark, landmark + window)
        .map(|(tau, d)| {
            let lp: f64 = fit.coefficients.iter().zip(traj).map(|(a, tr)| a * tr.value(tau)).sum();
            d * lp.exp()
        })
        .sum();
    (-(-cum).exp_m1()).clamp(0.0, 1.0)
}

fn horizon_metrics(valid: &Dataset, preds: &[(usize, f64)], landmark: f64, window: f64, eoi: u32) -> HorizonMetrics {
    let surv = valid.survival();
    let input = MetricInput {
        predictions: preds.iter().map(|p| p.1).collect(),
        times: preds.iter().map(|p| surv[p.0].time).collect(),
        causes: preds.iter().map(|p| surv[p.0].cause).collect(),
        landmark,
        window,
        event_of_interest: eoi,
    };
    HorizonMetrics {
        landmark,
        window,
        auc: ipcw_auc(&input).ok().map(|m| m.value),
        brier: ipcw_brier(&input).ok().map(|m| m.value),
    }
}

fn two_stage_result(
    cfg: &StudyConfig,
    replicate: usize,
    method: StudyMethod,
    model: &TwoStageModel,
    valid: &Dataset,
    seconds: f64,
) -> Result<MethodResult> {
    let z = z_value(cfg.level);
    let s2 = &model.stage2;
    let (lower, upper) = (0..s2.estimates.len()).map(|j| s2.interval(j, z)).unzip();
    let eoi = model.event_of_interest;
    let mut metrics = Vec::with_capacity(cfg.landmarks.len());
    for &s in &cfg.landmarks {
        let queries = queries_from_dataset(valid, model, s, cfg.window)?;
        let preds = predict_batch(model, &queries, cfg.prediction, &cfg.prediction_settings)?;
        let pairs: Vec<(usize, f64)> = preds
            .iter()
            .map(|p| (valid.subject_index(&p.subject).expect("query subject"), p.point))
            .collect();
        metrics.push(horizon_metrics(valid, &pairs, s, cfg.window, eoi));
    }
    Ok(MethodResult {
        replicate,
        method,
        estimates: s2.estimates.clone(),
        lower,
        upper,
        seconds,
        metrics,
    })
}

fn true_result(
    cfg: &StudyConfig,
    replicate: usize,
    train: &Dataset,
    valid: &Dataset,
    truth: &SimTruth,
) -> Result<MethodResult> {
    let start = Instant::now();
    let eoi = cfg.fit.stage1.event_of_interest;
    let b = truth.random_effects_for(train)?;
    let fit = fit_true(train, &truth.scenario.beta, &b, eoi, &[], &cfg.fit.cox)?;
    let seconds = start.elapsed().as_secs_f64();
    let z = z_value(cfg.level);
    let se = fit.standard_errors();
    let traj = true_trajectories(valid, truth)?;
    let metrics = cfg
        .landmarks
        .iter()
        .map(|&s| {
            let pairs: Vec<(usize, f64)> = valid
                .survival()
                .iter()
                .enumerate()
                .filter(|(_, r)| r.time > s)
                .map(|(i, _)| (i, true_risk(&fit, &traj[i], s, cfg.window)))
                .collect();
            horizon_metrics(valid, &pairs, s, cfg.window, eoi)
        })
        .collect();
    Ok(MethodResult {
        replicate,
        method: StudyMethod::True,
        lower: fit.coefficients.iter().zip(&se).map(|(c, s)| c - z * s).collect(),
        upper: fit.coefficients.iter().zip(&se).map(|(c, s)| c + z * s).collect(),
        estimates: fit.coefficients,
        seconds,
        metrics,
    })
}

/// Runs every configured method on one replicate. Failures of single
/// methods are returned alongside the successes.
pub fn run_replicate(cfg: &StudyConfig, replicate: usize) -> Result<Vec<std::result::Result<MethodResult, (StudyMethod, Error)>>> {
    let sim = simulate_replicate(&cfg.scenario, replicate as u64)?;
    let split_seed = cfg.scenario.seed.wrapping_add(replicate as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let (train, valid) = split_train_validation(&sim.data, cfg.train_fraction, split_seed)?;
    let mut fit = cfg.fit.clone();
    fit.stage1.chain.seed = fit.stage1.chain.seed.wrapping_add(replicate as u64);
    Ok(cfg
        .methods
        .iter()
        .map(|&method| {
            let out = match method {
                StudyMethod::True => true_result(cfg, replicate, &train, &valid, &sim.truth),
                StudyMethod::Tsjm | StudyMethod::Mts => {
                    let start = Instant::now();
                    let model = if method == StudyMethod::Tsjm {
                        fit_tsjm(&train, &fit)
                    } else {
                        fit_mts(&train, &fit)
                    };
                    model.and_then(|m| {
                        two_stage_result(cfg, replicate, method, &m, &valid, start.elapsed().as_secs_f64())
                    })
                }
            };
            out.map_err(|e| (method, e))
        })
        .collect())
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = v.iter().sum::<f64>() / n;
    let sd = if v.len() > 1 {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        f64::NAN
    };
    (mean, sd)
}

/// Relative bias, RMSE and coverage per method and association parameter,
/// and mean (SD) of AUC and Brier score per method and landmark.
pub fn summarize(cfg: &StudyConfig, results: &[MethodResult]) -> (Vec<ParameterSummary>, Vec<MetricSummary>) {
    let alpha = &cfg.scenario.alpha;
    let mut parameters = Vec::new();
    let mut metrics = Vec::new();
    for &method in &cfg.methods {
        let rows: Vec<&MethodResult> = results.iter().filter(|r| r.method == method).collect();
        if rows.is_empty() {
            continue;
        }
        for (k, &truth) in alpha.iter().enumerate() {
            let est: Vec<f64> = rows.iter().map(|r| r.estimates[k]).collect();
            let (mean, _) = mean_sd(&est);
            let n = est.len() as f64;
            let rmse = (est.iter().map(|e| (e - truth).powi(2)).sum::<f64>() / n).sqrt();
            let covered = rows.iter().filter(|r| r.lower[k] <= truth && truth <= r.upper[k]).count();
            parameters.push(ParameterSummary {
                method,
                parameter: format!("alpha{}", k + 1),
                truth,
                mean,
                relative_bias: (mean - truth) / truth,
                rmse,
                coverage: covered as f64 / n,
                n: est.len(),
            });
        }
        for (h, &s) in cfg.landmarks.iter().enumerate() {
            let auc: Vec<f64> = rows.iter().filter_map(|r| r.metrics[h].auc).collect();
            let bs: Vec<f64> = rows.iter().filter_map(|r| r.metrics[h].brier).collect();
            let (auc_mean, auc_sd) = mean_sd(&auc);
            let (brier_mean, brier_sd) = mean_sd(&bs);
            metrics.push(MetricSummary {
                method,
                landmark: s,
                window: cfg.window,
                auc_mean,
                auc_sd,
                brier_mean,
                brier_sd,
                n: auc.len(),
            });
        }
    }
    (parameters, metrics)
}

/// Runs all replicates in parallel and summarises them. Results are sorted
/// by replicate and method, so scheduling does not change the report.
pub fn run_study(cfg: &StudyConfig) -> Result<StudyReport> {
    cfg.validate()?;
    let per_rep = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| {
            let out = run_replicate(cfg, r);
            log::info!("replicate {} done", r);
            out.map(|v| (r, v))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut results = Vec::new();
    let mut failures = Vec::new();
    for (r, outs) in per_rep {
        for o in outs {
            match o {
                Ok(res) => results.push(res),
                Err((m, e)) => {
                    log::warn!("replicate {r} {m}: {e}");
                    failures.push((r, m, e.to_string()));
                }
            }
        }
    }
    results.sort_by(|a, b| (a.replicate, a.method).cmp(&(b.replicate, b.method)));
    let (parameters, metrics) = summarize(cfg, &results);
    Ok(StudyReport {
        results,
        failures,
        parameters,
        metrics,
    })
}

impl StudyReport {
    /// Plain-text tables of the parameter and prediction summaries.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<6} {:<8} {:>8} {:>8} {:>8} {:>8} {:>6} {:>4}", "method", "param", "truth", "mean", "RB", "RMSE", "CR", "n");
        for p in &self.parameters {
            let _ = writeln!(
                out,
                "{:<6} {:<8} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>6.2} {:>4}",
                p.method.to_string(),
                p.parameter,
                p.truth,
                p.mean,
                p.relative_bias,
                p.rmse,
                p.coverage,
                p.n
            );
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<6} {:>5} {:>5} {:>16} {:>16}", "method", "s", "t", "AUC mean (SD)", "BS mean (SD)");
        for m in &self.metrics {
            let _ = writeln!(
                out,
                "{:<6} {:>5.2} {:>5.2} {:>7.3} ({:>6.3}) {:>7.3} ({:>6.3})",
                m.method.to_string(),
                m.landmark,
                m.window,
                m.auc_mean,
                m.auc_sd,
                m.brier_mean,
                m.brier_sd
            );
        }
        if !self.failures.is_empty() {
            let _ = writeln!(out);
            for (r, m, e) in &self.failures {
                let _ = writeln!(out, "replicate {r} {m} failed: {e}");
            }
        }
        out
    }
}
