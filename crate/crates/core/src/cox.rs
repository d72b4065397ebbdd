//! Cox proportional-hazards regression with time-varying covariates in
//! counting-process form, Breslow ties and the Breslow baseline hazard.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::SurvivalRecord;
use crate::error::{Error, Result};
use crate::linalg::{cholesky, condition_number, spd_inverse};

/// Coefficients beyond this magnitude are taken as a sign of monotone
/// likelihood.
pub const SEPARATION_LIMIT: f64 = 50.0;

/// One at-risk interval `(start, stop]` of a subject, with the covariate
/// values in effect over it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountingProcessRow {
    pub subject: usize,
    pub start: f64,
    pub stop: f64,
    pub event: bool,
    pub covariates: Vec<f64>,
}

/// Sorted distinct times at which the event of interest occurs.
pub fn distinct_event_times(survival: &[SurvivalRecord], event_of_interest: u32) -> Vec<f64> {
    let mut t: Vec<f64> = survival
        .iter()
        .filter(|r| r.is_event(event_of_interest))
        .map(|r| r.time)
        .collect();
    t.sort_by(f64::total_cmp);
    t.dedup();
    t
}

/// Splits every subject's follow-up at the distinct event times. The
/// covariates of a row are `covariate_fn(subject, stop)`. The partial
/// likelihood only looks at covariates at event times, so this grid is exact.
pub fn build_counting_process<F>(
    survival: &[SurvivalRecord],
    event_of_interest: u32,
    mut covariate_fn: F,
) -> Result<Vec<CountingProcessRow>>
where
    F: FnMut(usize, f64) -> Result<Vec<f64>>,
{
    let grid = distinct_event_times(survival, event_of_interest);
    let mut rows = Vec::new();
    for (i, rec) in survival.iter().enumerate() {
        let mut start = 0.0;
        let inner = grid.partition_point(|&t| t < rec.time);
        for &stop in grid[..inner].iter().chain(std::iter::once(&rec.time)) {
            if stop <= start {
                continue;
            }
            let covariates = covariate_fn(i, stop)?;
            if let Some(bad) = covariates.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "covariate {bad} of subject {} at time {stop}",
                    rec.subject
                )));
            }
            rows.push(CountingProcessRow {
                subject: i,
                start,
                stop,
                event: stop == rec.time && rec.is_event(event_of_interest),
                covariates,
            });
            start = stop;
        }
    }
    Ok(rows)
}

/// One row per subject over `(0, T_i]` with fixed covariates.
pub fn time_fixed_rows(
    survival: &[SurvivalRecord],
    event_of_interest: u32,
    covariates: &[Vec<f64>],
) -> Vec<CountingProcessRow> {
    survival
        .iter()
        .zip(covariates)
        .enumerate()
        .map(|(i, (rec, x))| CountingProcessRow {
            subject: i,
            start: 0.0,
            stop: rec.time,
            event: rec.is_event(event_of_interest),
            covariates: x.clone(),
        })
        .collect()
}

/// For every distinct event time: the rows with an event there and the rows
/// at risk (`start < t <= stop`).
#[derive(Clone, Debug)]
pub struct RiskSetIndex {
    pub times: Vec<f64>,
    pub events: Vec<Vec<usize>>,
    pub at_risk: Vec<Vec<usize>>,
}

impl RiskSetIndex {
    pub fn new(rows: &[CountingProcessRow]) -> Result<Self> {
        let mut times: Vec<f64> = rows.iter().filter(|r| r.event).map(|r| r.stop).collect();
        times.sort_by(f64::total_cmp);
        times.dedup();
        let mut events = vec![Vec::new(); times.len()];
        let mut at_risk = vec![Vec::new(); times.len()];
        let p = rows.first().map_or(0, |r| r.covariates.len());
        for (k, r) in rows.iter().enumerate() {
            if !(r.start < r.stop) || !r.start.is_finite() || !r.stop.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "row {k}: interval ({}, {}] is empty or non-finite",
                    r.start, r.stop
                )));
            }
            if r.covariates.len() != p {
                return Err(Error::InvalidArgument(format!("row {k}: covariate length differs")));
            }
            let lo = times.partition_point(|&t| t <= r.start);
            let hi = times.partition_point(|&t| t <= r.stop);
            for j in lo..hi {
                at_risk[j].push(k);
            }
            if r.event {
                let j = times.partition_point(|&t| t < r.stop);
                events[j].push(k);
            }
        }
        Ok(RiskSetIndex { times, events, at_risk })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartialLikelihood {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

fn linear_predictors(rows: &[CountingProcessRow], theta: &[f64]) -> Vec<f64> {
    rows.iter()
        .map(|r| r.covariates.iter().zip(theta).map(|(x, b)| x * b).sum())
        .collect()
}

fn evaluate(rows: &[CountingProcessRow], index: &RiskSetIndex, theta: &[f64]) -> PartialLikelihood {
    let p = theta.len();
    let lp = linear_predictors(rows, theta);
    let mut value = 0.0;
    let mut gradient = DVector::zeros(p);
    let mut hessian = DMatrix::zeros(p, p);
    let mut mean = vec![0.0; p];
    for ((events, risk), _) in index.events.iter().zip(&index.at_risk).zip(&index.times) {
        let d = events.len() as f64;
        let shift = risk.iter().map(|&k| lp[k]).fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        mean.iter_mut().for_each(|m| *m = 0.0);
        for &k in risk {
            let w = (lp[k] - shift).exp();
            denom += w;
            for (m, x) in mean.iter_mut().zip(&rows[k].covariates) {
                *m += w * x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= denom);
        // Weighted covariance of covariates in the risk set, centred for
        // stability.
        for &k in risk {
            let w = (lp[k] - shift).exp() / denom;
            let x = &rows[k].covariates;
            for a in 0..p {
                let da = x[a] - mean[a];
                for b in 0..=a {
                    hessian[(a, b)] -= d * w * da * (x[b] - mean[b]);
                }
            }
        }
        for &k in events {
            value += lp[k];
            for (g, x) in gradient.iter_mut().zip(&rows[k].covariates) {
                *g += x;
            }
        }
        value -= d * (shift + denom.ln());
        for (g, m) in gradient.iter_mut().zip(&mean) {
            *g -= d * m;
        }
    }
    for a in 0..p {
        for b in 0..a {
            hessian[(b, a)] = hessian[(a, b)];
        }
    }
    PartialLikelihood {
        value,
        gradient,
        hessian,
    }
}

/// Log partial likelihood with Breslow ties, its gradient and Hessian.
pub fn log_partial_likelihood(rows: &[CountingProcessRow], theta: &[f64]) -> Result<PartialLikelihood> {
    let index = RiskSetIndex::new(rows)?;
    if rows.first().is_some_and(|r| r.covariates.len() != theta.len()) {
        return Err(Error::InvalidArgument("coefficient length differs from covariates".into()));
    }
    Ok(evaluate(rows, &index, theta))
}

/// Breslow cumulative baseline hazard as a step function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BreslowBaseline {
    pub times: Vec<f64>,
    pub increments: Vec<f64>,
}

impl BreslowBaseline {
    pub fn cumulative(&self, t: f64) -> f64 {
        let n = self.times.partition_point(|&x| x <= t);
        self.increments[..n].iter().sum()
    }

    pub fn last_time(&self) -> f64 {
        self.times.last().copied().unwrap_or(0.0)
    }

    /// `(time, increment)` pairs with `from < time <= to`.
    pub fn steps_in(&self, from: f64, to: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let lo = self.times.partition_point(|&x| x <= from);
        let hi = self.times.partition_point(|&x| x <= to);
        self.times[lo..hi]
            .iter()
            .copied()
            .zip(self.increments[lo..hi].iter().copied())
    }
}

/// `d(t) / sum_{R(t)} exp(theta'x)` at every event time.
pub fn breslow(rows: &[CountingProcessRow], theta: &[f64]) -> Result<BreslowBaseline> {
    let index = RiskSetIndex::new(rows)?;
    Ok(breslow_indexed(rows, &index, theta))
}

fn breslow_indexed(rows: &[CountingProcessRow], index: &RiskSetIndex, theta: &[f64]) -> BreslowBaseline {
    let lp = linear_predictors(rows, theta);
    let increments = index
        .events
        .iter()
        .zip(&index.at_risk)
        .map(|(events, risk)| {
            let shift = risk.iter().map(|&k| lp[k]).fold(f64::NEG_INFINITY, f64::max);
            let lse = shift + risk.iter().map(|&k| (lp[k] - shift).exp()).sum::<f64>().ln();
            ((events.len() as f64).ln() - lse).exp()
        })
        .collect();
    BreslowBaseline {
        times: index.times.clone(),
        increments,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoxOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for CoxOptions {
    fn default() -> Self {
        CoxOptions {
            tol: 1e-8,
            max_iter: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoxFit {
    pub covariate_names: Vec<String>,
    pub coefficients: Vec<f64>,
    /// Inverse of the negative Hessian at the optimum.
    pub covariance: DMatrix<f64>,
    pub log_partial_likelihood: f64,
    pub baseline: BreslowBaseline,
    pub iterations: usize,
    pub gradient_norm: f64,
}

impl CoxFit {
    pub fn standard_errors(&self) -> Vec<f64> {
        (0..self.coefficients.len())
            .map(|j| self.covariance[(j, j)].max(0.0).sqrt())
            .collect()
    }

    pub fn linear_predictor(&self, x: &[f64]) -> f64 {
        self.coefficients.iter().zip(x).map(|(b, v)| b * v).sum()
    }
}

fn newton_step(pl: &PartialLikelihood) -> Result<DVector<f64>> {
    let neg = -&pl.hessian;
    match cholesky(&neg, "negative Hessian") {
        Ok(l) => {
            let y = l.solve_lower_triangular(&pl.gradient).expect("nonsingular factor");
            Ok(l.transpose().solve_upper_triangular(&y).expect("nonsingular factor"))
        }
        Err(_) => Err(Error::Singular {
            context: "Cox information matrix".into(),
            condition: condition_number(&neg),
        }),
    }
}

fn check_separation(theta: &[f64], names: &[String]) -> Result<()> {
    if let Some((j, v)) = theta.iter().enumerate().find(|(_, v)| v.abs() > SEPARATION_LIMIT || !v.is_finite()) {
        return Err(Error::Separation {
            covariate: names.get(j).cloned().unwrap_or_else(|| format!("x{j}")),
            value: *v,
        });
    }
    Ok(())
}

/// Maximizes the partial likelihood by Newton-Raphson with step halving.
pub fn fit_cox(
    rows: &[CountingProcessRow],
    covariate_names: &[String],
    init: Option<&[f64]>,
    opts: &CoxOptions,
) -> Result<CoxFit> {
    let index = RiskSetIndex::new(rows)?;
    if index.times.is_empty() {
        return Err(Error::InvalidArgument("Cox fit needs at least one event".into()));
    }
    let p = rows[0].covariates.len();
    if covariate_names.len() != p {
        return Err(Error::InvalidArgument(format!(
            "{} covariate names for {p} covariates",
            covariate_names.len()
        )));
    }
    let mut theta = match init {
        Some(v) if v.len() != p => return Err(Error::InvalidArgument("initial value has wrong length".into())),
        Some(v) => v.to_vec(),
        None => vec![0.0; p],
    };
    let mut pl = evaluate(rows, &index, &theta);
    let mut iterations = 0;
    if p > 0 {
        let mut converged = false;
        let mut last_change = f64::INFINITY;
        while iterations < opts.max_iter {
            iterations += 1;
            let step = newton_step(&pl)?;
            let mut scale = 1.0;
            let mut accepted = None;
            for _ in 0..40 {
                let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + scale * s).collect();
                let next = evaluate(rows, &index, &cand);
                if next.value.is_finite() && next.value >= pl.value - 1e-12 * pl.value.abs().max(1.0) {
                    accepted = Some((cand, next));
                    break;
                }
                scale *= 0.5;
            }
            let Some((cand, next)) = accepted else {
                // No ascent possible along the Newton direction: at the optimum
                // up to rounding.
                converged = true;
                break;
            };
            last_change = (next.value - pl.value).abs();
            theta = cand;
            pl = next;
            check_separation(&theta, covariate_names)?;
            if last_change < opts.tol {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NotConverged {
                iterations,
                last_change,
            });
        }
        // Polish: the convergence test is on the objective, so one or two more
        // pure Newton steps bring the gradient down to rounding level.
        for _ in 0..3 {
            if pl.gradient.amax() < 1e-10 {
                break;
            }
            let step = newton_step(&pl)?;
            let cand: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + s).collect();
            let next = evaluate(rows, &index, &cand);
            if !(next.value >= pl.value - 1e-12 * pl.value.abs().max(1.0)) || next.gradient.amax() >= pl.gradient.amax() {
                break;
            }
            theta = cand;
            pl = next;
        }
    }
    let covariance = if p > 0 {
        spd_inverse(&(-&pl.hessian), "Cox information matrix")
            .map_err(|_| Error::Singular {
                context: "Cox information matrix".into(),
                condition: condition_number(&(-&pl.hessian)),
            })?
            .0
    } else {
        DMatrix::zeros(0, 0)
    };
    // A monotone likelihood can flatten out before the coefficient reaches the
    // limit; it then shows up as a vanishing information on the standardized
    // scale.
    for j in 0..p {
        let n = rows.len() as f64;
        let mean = rows.iter().map(|r| r.covariates[j]).sum::<f64>() / n;
        let sd = (rows.iter().map(|r| (r.covariates[j] - mean).powi(2)).sum::<f64>() / n).sqrt();
        if sd * covariance[(j, j)].max(0.0).sqrt() > 100.0 {
            return Err(Error::Separation {
                covariate: covariate_names[j].clone(),
                value: theta[j],
            });
        }
    }
    Ok(CoxFit {
        covariate_names: covariate_names.to_vec(),
        baseline: breslow_indexed(rows, &index, &theta),
        coefficients: theta,
        covariance,
        log_partial_likelihood: pl.value,
        iterations,
        gradient_norm: pl.gradient.norm(),
    })
}
