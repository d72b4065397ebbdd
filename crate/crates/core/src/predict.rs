//! Dynamic risk prediction from a fitted two-stage model.
//!
//! The conditional risk of an event in `(s, s+t]` given survival to `s` is
//! `1 - S(s+t)/S(s)`, where `S` comes from the stage-2 Breslow baseline and
//! the predicted marker trajectories:
//!
//! ```text
//! log S(u) = - sum_{tau <= u} dLambda_0(tau) exp{gamma'w + sum_k alpha_k' g_k(eta_k(tau))}
//! ```

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, SubjectId};
use crate::design::{MarkerDesign, Trajectory};
use crate::error::{Error, Result};
use crate::mcmc::{predict_random_effects, Conditioning, JointModelParams, OneMarkerModel, RandomEffectSettings};
use crate::two_stage::{imputation_indices, Method, TwoStageModel};

/// One subject to predict for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionQuery {
    pub subject: SubjectId,
    /// Per marker (in the model's marker order) the `(time, value)` history.
    pub histories: Vec<Vec<(f64, f64)>>,
    /// Full baseline covariate vector in the model's covariate order.
    pub covariates: Vec<f64>,
    pub landmark: f64,
    pub window: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionMethod {
    FirstOrder,
    MonteCarlo,
}

impl std::fmt::Display for PredictionMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PredictionMethod::FirstOrder => "first_order",
            PredictionMethod::MonteCarlo => "monte_carlo",
        })
    }
}

impl std::str::FromStr for PredictionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first_order" | "first-order" => Ok(PredictionMethod::FirstOrder),
            "monte_carlo" | "monte-carlo" => Ok(PredictionMethod::MonteCarlo),
            _ => Err(Error::InvalidArgument(format!("unknown prediction method '{s}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskPrediction {
    pub subject: SubjectId,
    pub landmark: f64,
    pub window: f64,
    pub method: PredictionMethod,
    /// First-order value, or the mean over Monte-Carlo draws.
    pub point: f64,
    /// Monte-Carlo standard error of the mean (`sd / sqrt(L)`).
    pub se: Option<f64>,
    /// Standard deviation over Monte-Carlo draws.
    pub sd: Option<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    #[serde(skip)]
    pub draws: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictionSettings {
    /// Chain settings for random-effect prediction (first order).
    pub random_effects: RandomEffectSettings,
    /// Number of posterior draws `L` (Monte Carlo).
    pub draws: usize,
    /// Random-effect draws averaged per posterior draw (Monte Carlo).
    pub inner_draws: usize,
    pub seed: u64,
}

impl Default for PredictionSettings {
    fn default() -> Self {
        PredictionSettings {
            random_effects: RandomEffectSettings::default(),
            draws: 200,
            inner_draws: 10,
            seed: 1,
        }
    }
}

/// Stage-2 pieces needed to evaluate `S`.
struct Stage2View<'a> {
    model: &'a TwoStageModel,
    designs: Vec<MarkerDesign>,
    one_marker: Vec<OneMarkerModel>,
    omega_index: Vec<usize>,
}

impl<'a> Stage2View<'a> {
    fn new(model: &'a TwoStageModel) -> Result<Self> {
        if model.marker_specs.is_empty() {
            return Err(Error::InvalidArgument("model has no markers".into()));
        }
        let designs = model
            .marker_specs
            .iter()
            .map(|s| MarkerDesign::new(s, &model.covariate_names))
            .collect::<Result<Vec<_>>>()?;
        let one_marker = model
            .stage1
            .iter()
            .map(|p| p.model())
            .collect::<Result<Vec<_>>>()?;
        let omega_index = model
            .options
            .stage2_covariates
            .iter()
            .map(|n| {
                model
                    .covariate_names
                    .iter()
                    .position(|c| c == n)
                    .ok_or_else(|| Error::Validation(format!("unknown stage-2 covariate '{n}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Stage2View {
            model,
            designs,
            one_marker,
            omega_index,
        })
    }

    fn check_query(&self, q: &PredictionQuery) -> Result<()> {
        if q.histories.len() != self.designs.len() {
            return Err(Error::InvalidArgument(format!(
                "query has {} marker histories, model has {} markers",
                q.histories.len(),
                self.designs.len()
            )));
        }
        if q.covariates.len() != self.model.covariate_names.len() {
            return Err(Error::InvalidArgument("query covariates do not match the model".into()));
        }
        if !(q.landmark >= 0.0) || !(q.window > 0.0) || !q.window.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "need landmark >= 0 and window > 0, got ({}, {})",
                q.landmark, q.window
            )));
        }
        if q.histories.iter().flatten().any(|&(t, _)| t > q.landmark) {
            return Err(Error::InvalidArgument(format!(
                "subject {}: history extends past the landmark",
                q.subject
            )));
        }
        let limit = self.model.stage2.baseline.last_time();
        if q.landmark + q.window > limit {
            return Err(Error::Extrapolation {
                requested: q.landmark + q.window,
                limit,
            });
        }
        Ok(())
    }

    fn conditioning(&self, q: &PredictionQuery) -> Conditioning {
        match self.model.method {
            Method::Tsjm if q.landmark > 0.0 => Conditioning::Survived { landmark: q.landmark },
            _ => Conditioning::None,
        }
    }

    /// Mean predicted random effects for every marker under `params`.
    fn random_effects(
        &self,
        params: &[JointModelParams],
        q: &PredictionQuery,
        settings: &RandomEffectSettings,
        seed: u64,
    ) -> Result<Vec<Vec<f64>>> {
        let cond = self.conditioning(q);
        (0..self.designs.len())
            .map(|k| {
                let s = RandomEffectSettings {
                    seed: seed.wrapping_add(k as u64),
                    ..settings.clone()
                };
                predict_random_effects(&params[k], &self.one_marker[k], &q.histories[k], &q.covariates, cond, &s)
                    .map(|r| r.mean)
                    .map_err(|e| e.in_marker(self.model.marker_specs[k].marker))
            })
            .collect()
    }

    fn trajectories(&self, params: &[JointModelParams], b: &[Vec<f64>], covariates: &[f64]) -> Result<Vec<Trajectory>> {
        self.designs
            .iter()
            .zip(params)
            .zip(b)
            .map(|((d, p), b)| d.trajectory(&p.beta, b, covariates))
            .collect()
    }

    /// Stage-2 hazard increments `(tau, dLambda(tau))` for `tau` in `(s, s+t]`.
    fn increments(&self, traj: &[Trajectory], q: &PredictionQuery) -> Vec<(f64, f64)> {
        let s2 = &self.model.stage2;
        let theta = &s2.estimates;
        let mut base_lp = 0.0;
        for (j, &c) in self.omega_index.iter().enumerate() {
            base_lp += theta[j] * q.covariates[c];
        }
        let offset = self.omega_index.len();
        s2.baseline
            .steps_in(q.landmark, q.landmark + q.window)
            .map(|(tau, d)| {
                let mut lp = base_lp;
                let mut j = offset;
                for (spec, tr) in self.model.marker_specs.iter().zip(traj) {
                    let (v, sl) = tr.value_and_slope(tau);
                    let (g, n) = spec.association.components(v, sl);
                    for gc in &g[..n] {
                        lp += theta[j] * gc;
                        j += 1;
                    }
                }
                (tau, d * lp.exp())
            })
            .collect()
    }
}

fn risk_from_increments(inc: &[(f64, f64)]) -> f64 {
    let cum: f64 = inc.iter().map(|(_, d)| d).sum();
    (-(-cum).exp_m1()).clamp(0.0, 1.0)
}

fn query_seed(base: u64, subject: &str) -> u64 {
    // FNV-1a over the subject id keeps per-query streams independent of order.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in subject.bytes() {
        h ^= byte as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    base ^ h
}

/// First-order prediction: plug in stage-1 posterior means and the mean
/// predicted random effects.
pub fn predict_first_order(model: &TwoStageModel, query: &PredictionQuery, settings: &PredictionSettings) -> Result<RiskPrediction> {
    let view = Stage2View::new(model)?;
    first_order_with(&view, &model.point_params(), query, settings)
}

fn first_order_with(
    view: &Stage2View,
    params: &[JointModelParams],
    query: &PredictionQuery,
    settings: &PredictionSettings,
) -> Result<RiskPrediction> {
    view.check_query(query)?;
    let b = view.random_effects(params, query, &settings.random_effects, query_seed(settings.seed, &query.subject))?;
    let traj = view.trajectories(params, &b, &query.covariates)?;
    Ok(RiskPrediction {
        subject: query.subject.clone(),
        landmark: query.landmark,
        window: query.window,
        method: PredictionMethod::FirstOrder,
        point: risk_from_increments(&view.increments(&traj, query)),
        se: None,
        sd: None,
        lower: None,
        upper: None,
        draws: Vec::new(),
    })
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Monte-Carlo prediction over `L` stage-1 posterior draws: for each draw the
/// random effects are re-predicted (averaging `inner_draws` values) and the
/// risk recomputed. Reports the mean, its Monte-Carlo SE, the SD and the
/// 2.5% / 97.5% percentiles of the draws.
pub fn predict_monte_carlo(model: &TwoStageModel, query: &PredictionQuery, settings: &PredictionSettings) -> Result<RiskPrediction> {
    if settings.draws < 2 || settings.inner_draws == 0 {
        return Err(Error::InvalidArgument("Monte-Carlo prediction needs L >= 2 and inner draws >= 1".into()));
    }
    let view = Stage2View::new(model)?;
    view.check_query(query)?;
    let n_post = model.stage1.iter().map(|p| p.n_draws()).min().unwrap_or(0);
    if n_post == 0 {
        return Err(Error::InvalidArgument("model carries no stage-1 draws".into()));
    }
    let base_seed = query_seed(settings.seed, &query.subject);
    let inner = RandomEffectSettings {
        draws: settings.inner_draws,
        ..settings.random_effects.clone()
    };
    let mut draws = Vec::with_capacity(settings.draws);
    for (l, d) in imputation_indices(n_post, settings.draws).into_iter().enumerate() {
        let params: Vec<JointModelParams> = model.stage1.iter().map(|p| p.draws[d].clone()).collect();
        let seed = base_seed.wrapping_add((l as u64 + 1).wrapping_mul(0x9E37_79B9));
        let b = view.random_effects(&params, query, &inner, seed)?;
        let traj = view.trajectories(&params, &b, &query.covariates)?;
        draws.push(risk_from_increments(&view.increments(&traj, query)));
    }
    let n = draws.len() as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let sd = (draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut sorted = draws.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(RiskPrediction {
        subject: query.subject.clone(),
        landmark: query.landmark,
        window: query.window,
        method: PredictionMethod::MonteCarlo,
        point: mean,
        se: Some(sd / n.sqrt()),
        sd: Some(sd),
        lower: Some(percentile(&sorted, 0.025)),
        upper: Some(percentile(&sorted, 0.975)),
        draws,
    })
}

pub fn predict(
    model: &TwoStageModel,
    query: &PredictionQuery,
    method: PredictionMethod,
    settings: &PredictionSettings,
) -> Result<RiskPrediction> {
    match method {
        PredictionMethod::FirstOrder => predict_first_order(model, query, settings),
        PredictionMethod::MonteCarlo => predict_monte_carlo(model, query, settings),
    }
}

/// Predictions for many queries, computed in parallel; the result order and
/// values do not depend on scheduling.
pub fn predict_batch(
    model: &TwoStageModel,
    queries: &[PredictionQuery],
    method: PredictionMethod,
    settings: &PredictionSettings,
) -> Result<Vec<RiskPrediction>> {
    queries.par_iter().map(|q| predict(model, q, method, settings)).collect()
}

/// Cumulative incidences of every cause in `(s, s+t]` given survival to `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct CumulativeIncidence {
    /// Causes in the order of the supplied models.
    pub causes: Vec<u32>,
    pub incidence: Vec<f64>,
    /// `S(s+t)/S(s)` from all causes combined.
    pub survival: f64,
}

/// Cause-specific first-order cumulative incidences. Each cause contributes
/// its own stage-2 step hazard; at a jump time `tau` the all-cause survival
/// drops by `exp(-dLambda(tau))` and the drop is shared among causes in
/// proportion to their increments, so incidences and survival sum to one.
pub fn cumulative_incidence(
    models: &[TwoStageModel],
    query: &PredictionQuery,
    settings: &PredictionSettings,
) -> Result<CumulativeIncidence> {
    let first = models
        .first()
        .ok_or_else(|| Error::InvalidArgument("no cause-specific models given".into()))?;
    for m in models {
        if m.marker_specs != first.marker_specs || m.covariate_names != first.covariate_names {
            return Err(Error::InvalidArgument(
                "cause-specific models differ in markers or covariates".into(),
            ));
        }
    }
    let mut causes: Vec<u32> = models.iter().map(|m| m.event_of_interest).collect();
    causes.sort_unstable();
    causes.dedup();
    if causes.len() != models.len() {
        return Err(Error::InvalidArgument("two models share a cause".into()));
    }
    let mut per_cause = Vec::with_capacity(models.len());
    for m in models {
        let view = Stage2View::new(m)?;
        if m.stage2.baseline.times.is_empty() {
            // A cause never observed contributes no hazard.
            per_cause.push(Vec::new());
            continue;
        }
        view.check_query(query)?;
        let params = m.point_params();
        let b = view.random_effects(&params, query, &settings.random_effects, query_seed(settings.seed, &query.subject))?;
        let traj = view.trajectories(&params, &b, &query.covariates)?;
        per_cause.push(view.increments(&traj, query));
    }
    let mut times: Vec<f64> = per_cause.iter().flatten().map(|(t, _)| *t).collect();
    times.sort_by(f64::total_cmp);
    times.dedup();
    let mut cursor = vec![0usize; models.len()];
    let mut surv = 1.0;
    let mut incidence = vec![0.0; models.len()];
    let mut d = vec![0.0; models.len()];
    for tau in times {
        for (c, inc) in per_cause.iter().enumerate() {
            d[c] = 0.0;
            if cursor[c] < inc.len() && inc[cursor[c]].0 == tau {
                d[c] = inc[cursor[c]].1;
                cursor[c] += 1;
            }
        }
        let total: f64 = d.iter().sum();
        if total <= 0.0 {
            continue;
        }
        let drop = -surv * (-total).exp_m1();
        for (ci, dc) in incidence.iter_mut().zip(&d) {
            *ci += drop * dc / total;
        }
        surv -= drop;
    }
    Ok(CumulativeIncidence {
        causes: models.iter().map(|m| m.event_of_interest).collect(),
        incidence,
        survival: surv,
    })
}

/// Cause-specific risk of `cause` in `(s, s+t]` given survival to `s`.
pub fn predict_cif(
    models: &[TwoStageModel],
    query: &PredictionQuery,
    cause: u32,
    settings: &PredictionSettings,
) -> Result<RiskPrediction> {
    let ci = cumulative_incidence(models, query, settings)?;
    let c = ci
        .causes
        .iter()
        .position(|&c| c == cause)
        .ok_or_else(|| Error::InvalidArgument(format!("no model for cause {cause}")))?;
    Ok(RiskPrediction {
        subject: query.subject.clone(),
        landmark: query.landmark,
        window: query.window,
        method: PredictionMethod::FirstOrder,
        point: ci.incidence[c].clamp(0.0, 1.0),
        se: None,
        sd: None,
        lower: None,
        upper: None,
        draws: Vec::new(),
    })
}

/// Queries for every subject of `data` still at risk at `landmark`, with
/// histories cut at the landmark. Markers follow `model`'s order.
pub fn queries_from_dataset(data: &Dataset, model: &TwoStageModel, landmark: f64, window: f64) -> Result<Vec<PredictionQuery>> {
    if data.covariate_names() != model.covariate_names.as_slice() {
        return Err(Error::InvalidArgument("dataset covariates differ from the model's".into()));
    }
    let histories: Vec<Vec<Vec<(f64, f64)>>> = model
        .marker_specs
        .iter()
        .map(|s| data.marker_histories(s.marker))
        .collect();
    Ok(data
        .survival()
        .iter()
        .enumerate()
        .filter(|(_, r)| r.time > landmark)
        .map(|(i, r)| PredictionQuery {
            subject: r.subject.clone(),
            histories: histories
                .iter()
                .map(|h| h[i].iter().copied().filter(|&(t, _)| t <= landmark).collect())
                .collect(),
            covariates: r.covariates.clone(),
            landmark,
            window,
        })
        .collect())
}

/// Query for one subject of `data` with its histories cut at `landmark`.
pub fn query_for_subject(
    data: &Dataset,
    model: &TwoStageModel,
    subject: &str,
    landmark: f64,
    window: f64,
) -> Result<PredictionQuery> {
    if data.covariate_names() != model.covariate_names.as_slice() {
        return Err(Error::InvalidArgument("dataset covariates differ from the model's".into()));
    }
    let i = data
        .subject_index(subject)
        .ok_or_else(|| Error::Validation(format!("unknown subject {subject}")))?;
    Ok(PredictionQuery {
        subject: subject.to_string(),
        histories: model
            .marker_specs
            .iter()
            .map(|s| {
                let mut h: Vec<(f64, f64)> = data
                    .longitudinal()
                    .iter()
                    .filter(|o| o.subject == subject && o.marker == s.marker && o.time <= landmark)
                    .map(|o| (o.time, o.value))
                    .collect();
                h.sort_by(|a, b| a.0.total_cmp(&b.0));
                h
            })
            .collect(),
        covariates: data.survival()[i].covariates.clone(),
        landmark,
        window,
    })
}

/// One line of a query file: `subject,landmark,window`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRow {
    pub subject: SubjectId,
    pub landmark: f64,
    pub window: f64,
}

pub fn read_queries<R: Read>(input: R) -> Result<Vec<QueryRow>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let mut out = Vec::new();
    for (line, row) in rdr.deserialize::<QueryRow>().enumerate() {
        let row = row?;
        if !(row.landmark >= 0.0) || !row.landmark.is_finite() || !(row.window > 0.0) || !row.window.is_finite() {
            return Err(Error::Validation(format!(
                "query row {}: need landmark >= 0 and window > 0",
                line + 2
            )));
        }
        out.push(row);
    }
    Ok(out)
}

/// Flat record of the predictions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub subject: SubjectId,
    pub method: String,
    pub landmark: f64,
    pub window: f64,
    pub point: f64,
    pub se: Option<f64>,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
}

impl From<&RiskPrediction> for PredictionRecord {
    fn from(p: &RiskPrediction) -> Self {
        PredictionRecord {
            subject: p.subject.clone(),
            method: p.method.to_string(),
            landmark: p.landmark,
            window: p.window,
            point: p.point,
            se: p.se,
            lower: p.lower,
            upper: p.upper,
        }
    }
}

pub fn write_predictions<W: Write>(out: W, preds: &[RiskPrediction]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in preds {
        w.serialize(PredictionRecord::from(p))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions<R: Read>(input: R) -> Result<Vec<PredictionRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let mut out = Vec::new();
    for (line, rec) in rdr.deserialize::<PredictionRecord>().enumerate() {
        let rec = rec?;
        if !(0.0..=1.0).contains(&rec.point) {
            return Err(Error::Validation(format!("prediction row {}: risk outside [0, 1]", line + 2)));
        }
        if !(rec.landmark >= 0.0) || !(rec.window > 0.0) {
            return Err(Error::Validation(format!("prediction row {}: invalid landmark/window", line + 2)));
        }
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn risk_from_increments_is_complement_of_survival() {
        let inc = [(0.1, 0.2), (0.3, 0.1)];
        assert!((risk_from_increments(&inc) - (1.0 - (-0.3f64).exp())).abs() < 1e-15);
        assert_eq!(risk_from_increments(&[]), 0.0);
    }

    #[test]
    fn percentile_interpolates() {
        let v = [0.0, 1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&v, 0.5), 2.0);
        assert!((percentile(&v, 0.025) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn query_file_round_trip() {
        let q = read_queries("subject,landmark,window\na,0.5,0.5\n b , 0 , 1\n".as_bytes()).unwrap();
        assert_eq!(q.len(), 2);
        assert_eq!(q[1].subject, "b");
        assert!(read_queries("subject,landmark,window\na,-1,0.5\n".as_bytes()).is_err());
    }

    #[test]
    fn predictions_file_round_trip() {
        let p = RiskPrediction {
            subject: "x".into(),
            landmark: 0.25,
            window: 0.5,
            method: PredictionMethod::MonteCarlo,
            point: 0.3,
            se: Some(0.01),
            sd: Some(0.1),
            lower: Some(0.1),
            upper: Some(0.5),
            draws: vec![],
        };
        let mut buf = Vec::new();
        write_predictions(&mut buf, &[p.clone()]).unwrap();
        let back = read_predictions(buf.as_slice()).unwrap();
        assert_eq!(back, vec![PredictionRecord::from(&p)]);
    }

    #[test]
    fn method_names_parse() {
        assert_eq!("first-order".parse::<PredictionMethod>().unwrap(), PredictionMethod::FirstOrder);
        assert!("other".parse::<PredictionMethod>().is_err());
    }
}
