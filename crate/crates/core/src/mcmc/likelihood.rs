//! Subject-level log-likelihood terms and the cumulative hazard.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use super::{JointModelParams, OneMarkerModel, PiecewiseBaseline};
use crate::data::SurvivalRecord;
use crate::design::{trajectory_from_map, Association, Trajectory};
use crate::error::{Error, Result};
use crate::linalg::spd_inverse;
use crate::quadrature;

/// One subject's data laid out for repeated likelihood evaluation.
#[derive(Clone, Debug)]
pub(crate) struct SubjectTerms {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub z: DMatrix<f64>,
    fixed_map: Vec<(usize, f64)>,
    random_powers: Vec<usize>,
    degree: usize,
    pub omega: Vec<f64>,
    pub horizon: f64,
    pub event: bool,
    /// Baseline interval containing the horizon.
    pub event_interval: usize,
    /// Quadrature nodes `(u, w)` per baseline interval overlapping [0, horizon].
    pub pieces: Vec<(usize, Vec<(f64, f64)>)>,
}

impl SubjectTerms {
    /// `horizon` is the end of the survival contribution (observed time, or
    /// landmark for conditioning on survival); `knots` may be absent for a
    /// model without survival part.
    pub fn new(
        model: &OneMarkerModel,
        history: &[(f64, f64)],
        covariates: &[f64],
        horizon: f64,
        event: bool,
        knots: Option<&PiecewiseBaseline>,
    ) -> Result<Self> {
        let q = model.design.n_fixed();
        let p = model.design.n_random();
        let n = history.len();
        let mut x = DMatrix::zeros(n, q);
        let mut z = DMatrix::zeros(n, p);
        let mut y = DVector::zeros(n);
        for (r, &(t, v)) in history.iter().enumerate() {
            let row = model.design.row(t, covariates)?;
            for j in 0..q {
                x[(r, j)] = row.x[j];
            }
            for j in 0..p {
                z[(r, j)] = row.z[j];
            }
            y[r] = v;
        }
        let mut pieces = Vec::new();
        let mut event_interval = 0;
        if let Some(base) = knots {
            if horizon > base.end() {
                return Err(Error::Extrapolation {
                    requested: horizon,
                    limit: base.end(),
                });
            }
            event_interval = base.interval(horizon).unwrap_or(0);
            for j in 0..base.n_intervals() {
                let lo = base.knots[j];
                let hi = base.knots[j + 1].min(horizon);
                if hi > lo {
                    pieces.push((j, quadrature::nodes_on(lo, hi).collect()));
                }
            }
        }
        Ok(SubjectTerms {
            y,
            x,
            z,
            fixed_map: model.design.fixed_polynomial_map(covariates)?,
            random_powers: model.design.random_powers(),
            degree: model.design.degree(),
            omega: model.omega(covariates),
            horizon,
            event,
            event_interval,
            pieces,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn trajectory(&self, beta: &[f64], b: &[f64]) -> Trajectory {
        trajectory_from_map(&self.fixed_map, &self.random_powers, self.degree, beta, b)
    }

    /// Fills `ints[j]` with `int exp{alpha' g(eta(u))} du` over interval j
    /// clipped to [0, horizon] and returns `alpha' g(eta(horizon))`.
    pub fn hazard_integrals(&self, traj: &Trajectory, alpha: &[f64], assoc: Association, ints: &mut [f64]) -> f64 {
        ints.iter_mut().for_each(|v| *v = 0.0);
        for (j, nodes) in &self.pieces {
            let mut acc = 0.0;
            for &(u, w) in nodes {
                let (v, s) = match assoc {
                    Association::CurrentValue => (traj.value(u), 0.0),
                    _ => traj.value_and_slope(u),
                };
                acc += w * assoc.linear_predictor(alpha, v, s).exp();
            }
            ints[*j] = acc;
        }
        let (v, s) = traj.value_and_slope(self.horizon);
        assoc.linear_predictor(alpha, v, s)
    }

    pub fn gamma_lp(&self, gamma: &[f64]) -> f64 {
        self.omega.iter().zip(gamma).map(|(w, g)| w * g).sum()
    }

    /// `delta (log lambda_j + gamma'w + g_end) - exp(gamma'w) sum_j lambda_j I_j`.
    pub fn survival_loglik(&self, ints: &[f64], g_end: f64, heights: &[f64], gamma_lp: f64) -> f64 {
        let cum: f64 = ints.iter().zip(heights).map(|(i, l)| i * l).sum();
        let mut ll = -gamma_lp.exp() * cum;
        if self.event {
            ll += heights[self.event_interval].ln() + gamma_lp + g_end;
        }
        ll
    }

    /// Residual vector `y - X beta - Z b`.
    pub fn residuals(&self, beta: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
        &self.y - &self.x * beta - &self.z * b
    }

    pub fn longitudinal_loglik(&self, beta: &DVector<f64>, b: &DVector<f64>, sigma2: f64) -> f64 {
        if self.y.is_empty() {
            return 0.0;
        }
        let r = self.residuals(beta, b);
        -0.5 * self.y.len() as f64 * (2.0 * PI * sigma2).ln() - 0.5 * r.norm_squared() / sigma2
    }
}

pub(crate) fn mvn_log_density(b: &DVector<f64>, sigma_inv: &DMatrix<f64>, logdet: f64) -> f64 {
    let p = b.len() as f64;
    -0.5 * (b.transpose() * sigma_inv * b)[(0, 0)] - 0.5 * (p * (2.0 * PI).ln() + logdet)
}

fn check_b(model: &OneMarkerModel, b: &[f64]) -> Result<()> {
    if b.len() != model.design.n_random() {
        return Err(Error::InvalidArgument(format!(
            "random effect has length {}, model needs {}",
            b.len(),
            model.design.n_random()
        )));
    }
    Ok(())
}

fn baseline_of(params: &JointModelParams) -> Result<&PiecewiseBaseline> {
    params
        .baseline
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("parameters have no survival part".into()))
}

/// `Lambda_i(t | w, b) = int_0^t lambda_0(u) exp{gamma'w + alpha' g(eta(u))} du`
/// with 15-point Gauss-Legendre quadrature on every baseline interval.
pub fn cumulative_hazard(
    params: &JointModelParams,
    b: &[f64],
    model: &OneMarkerModel,
    covariates: &[f64],
    t: f64,
) -> Result<f64> {
    check_b(model, b)?;
    let base = baseline_of(params)?;
    if !(t >= 0.0) {
        return Err(Error::InvalidArgument(format!("time must be >= 0, got {t}")));
    }
    let terms = SubjectTerms::new(model, &[], covariates, t, false, Some(base))?;
    let traj = terms.trajectory(&params.beta, b);
    let mut ints = vec![0.0; base.n_intervals()];
    terms.hazard_integrals(&traj, &params.alpha, model.design.association(), &mut ints);
    let cum: f64 = ints.iter().zip(&base.heights).map(|(i, l)| i * l).sum();
    Ok(terms.gamma_lp(&params.gamma).exp() * cum)
}

/// Sum of Gaussian log-densities of the marker observations.
pub fn longitudinal_log_likelihood(
    params: &JointModelParams,
    b: &[f64],
    model: &OneMarkerModel,
    history: &[(f64, f64)],
    covariates: &[f64],
) -> Result<f64> {
    check_b(model, b)?;
    let terms = SubjectTerms::new(model, history, covariates, 0.0, false, None)?;
    Ok(terms.longitudinal_loglik(
        &DVector::from_column_slice(&params.beta),
        &DVector::from_column_slice(b),
        params.sigma2,
    ))
}

/// `delta log lambda_i(T) - Lambda_i(T)` for the cause of interest; other
/// causes count as censoring.
pub fn survival_log_likelihood(
    params: &JointModelParams,
    b: &[f64],
    model: &OneMarkerModel,
    record: &SurvivalRecord,
    event_of_interest: u32,
) -> Result<f64> {
    check_b(model, b)?;
    let base = baseline_of(params)?;
    let terms = SubjectTerms::new(
        model,
        &[],
        &record.covariates,
        record.time,
        record.is_event(event_of_interest),
        Some(base),
    )?;
    let traj = terms.trajectory(&params.beta, b);
    let mut ints = vec![0.0; base.n_intervals()];
    let g_end = terms.hazard_integrals(&traj, &params.alpha, model.design.association(), &mut ints);
    Ok(terms.survival_loglik(&ints, g_end, &base.heights, terms.gamma_lp(&params.gamma)))
}

/// `log phi_p(b; 0, Sigma)`.
pub fn random_effect_log_prior(params: &JointModelParams, b: &[f64]) -> Result<f64> {
    let (inv, logdet) = spd_inverse(&params.sigma, "random-effect covariance")?;
    if b.len() != inv.nrows() {
        return Err(Error::InvalidArgument("random effect dimension mismatch".into()));
    }
    Ok(mvn_log_density(&DVector::from_column_slice(b), &inv, logdet))
}

/// Log of the subject's joint-likelihood integrand: longitudinal terms,
/// survival terms and the random-effect density.
pub fn log_likelihood_subject(
    params: &JointModelParams,
    b: &[f64],
    history: &[(f64, f64)],
    record: &SurvivalRecord,
    model: &OneMarkerModel,
    event_of_interest: u32,
) -> Result<f64> {
    if history.iter().any(|&(t, _)| t > record.time) {
        return Err(Error::InvalidArgument("measurement after the survival time".into()));
    }
    let ll = longitudinal_log_likelihood(params, b, model, history, &record.covariates)?
        + survival_log_likelihood(params, b, model, record, event_of_interest)?
        + random_effect_log_prior(params, b)?;
    if !ll.is_finite() {
        return Err(Error::NonFinite("subject log-likelihood".into()));
    }
    Ok(ll)
}
