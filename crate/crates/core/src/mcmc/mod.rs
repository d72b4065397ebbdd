//! Bayesian one-marker joint model (and plain linear mixed model) fitted by
//! Metropolis-within-Gibbs.
//!
//! The joint model links a Gaussian mixed model for one marker,
//!
//! ```text
//! y_ij = x(s_ij)' beta + z(s_ij)' b_i + e_ij,   e_ij ~ N(0, sigma2),  b_i ~ N(0, Sigma)
//! ```
//!
//! with a proportional hazard carrying the marker's current value and/or
//! slope,
//!
//! ```text
//! lambda_i(t) = lambda_0(t) exp{gamma' w_i + alpha' g(eta_i(t))}
//! ```
//!
//! where `lambda_0` is piecewise constant.

mod likelihood;
mod random_effects;
mod sampler;

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::SubjectId;
use crate::design::{MarkerDesign, MarkerSpec};
use crate::error::{Error, Result};

pub use likelihood::{
    cumulative_hazard, log_likelihood_subject, longitudinal_log_likelihood, random_effect_log_prior,
    survival_log_likelihood,
};
pub use random_effects::{predict_random_effects, Conditioning, RandomEffectPrediction, RandomEffectSettings};
pub use sampler::{fit_lmm, fit_one_marker_jm};

/// Piecewise-constant baseline hazard, `lambda_0(t) = heights[j]` on
/// `(knots[j], knots[j+1]]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseBaseline {
    pub knots: Vec<f64>,
    pub heights: Vec<f64>,
}

impl PiecewiseBaseline {
    pub fn new(knots: Vec<f64>, heights: Vec<f64>) -> Result<Self> {
        if knots.len() < 2 || knots[0] != 0.0 {
            return Err(Error::InvalidArgument("baseline knots must start at 0 and define >= 1 interval".into()));
        }
        if knots.windows(2).any(|w| !(w[1] > w[0])) || !knots.iter().all(|k| k.is_finite()) {
            return Err(Error::InvalidArgument("baseline knots must be strictly increasing".into()));
        }
        if heights.len() != knots.len() - 1 {
            return Err(Error::InvalidArgument(format!(
                "{} heights for {} intervals",
                heights.len(),
                knots.len() - 1
            )));
        }
        if heights.iter().any(|h| !(*h > 0.0) || !h.is_finite()) {
            return Err(Error::InvalidArgument("baseline heights must be positive".into()));
        }
        Ok(PiecewiseBaseline { knots, heights })
    }

    /// Knots for `n_intervals` intervals with interior knots at empirical
    /// quantiles of the event times and the last knot at `1.01 * max_time`.
    pub fn quantile_knots(event_times: &[f64], max_time: f64, n_intervals: usize) -> Vec<f64> {
        let end = 1.01 * max_time;
        let mut knots = vec![0.0];
        if n_intervals > 1 && !event_times.is_empty() {
            let mut ev = event_times.to_vec();
            ev.sort_by(f64::total_cmp);
            let n = ev.len();
            for j in 1..n_intervals {
                let h = (n - 1) as f64 * j as f64 / n_intervals as f64;
                let lo = h.floor() as usize;
                let hi = (lo + 1).min(n - 1);
                let q = ev[lo] + (h - lo as f64) * (ev[hi] - ev[lo]);
                if q > *knots.last().expect("non-empty") && q < end {
                    knots.push(q);
                }
            }
        }
        knots.push(end);
        knots
    }

    pub fn n_intervals(&self) -> usize {
        self.heights.len()
    }

    pub fn end(&self) -> f64 {
        *self.knots.last().expect("validated")
    }

    /// Index of the interval containing `t` (t = 0 maps to the first one).
    pub fn interval(&self, t: f64) -> Option<usize> {
        if !(t >= 0.0) || t > self.end() {
            return None;
        }
        Some(self.knots[1..].partition_point(|&k| k < t).min(self.n_intervals() - 1))
    }

    pub fn hazard(&self, t: f64) -> Result<f64> {
        self.interval(t).map(|j| self.heights[j]).ok_or(Error::Extrapolation {
            requested: t,
            limit: self.end(),
        })
    }

    pub fn cumulative(&self, t: f64) -> Result<f64> {
        if t > self.end() {
            return Err(Error::Extrapolation {
                requested: t,
                limit: self.end(),
            });
        }
        Ok((0..self.n_intervals())
            .map(|j| self.heights[j] * (t.min(self.knots[j + 1]) - self.knots[j]).max(0.0))
            .sum())
    }
}

/// Parameters of one joint model (or mixed model when the survival part is
/// absent).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointModelParams {
    pub beta: Vec<f64>,
    pub sigma2: f64,
    pub sigma: DMatrix<f64>,
    pub gamma: Vec<f64>,
    pub alpha: Vec<f64>,
    pub baseline: Option<PiecewiseBaseline>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorSpec {
    /// Variance of the zero-mean normal priors on beta, gamma and alpha.
    pub coef_variance: f64,
    pub baseline_shape: f64,
    pub baseline_rate: f64,
    pub sigma2_shape: f64,
    pub sigma2_rate: f64,
    /// Inverse-Wishart degrees of freedom; `None` means the dimension.
    pub wishart_df: Option<f64>,
    /// Inverse-Wishart scale; `None` means the identity.
    pub wishart_scale: Option<DMatrix<f64>>,
}

impl Default for PriorSpec {
    fn default() -> Self {
        PriorSpec {
            coef_variance: 100.0,
            baseline_shape: 0.01,
            baseline_rate: 0.01,
            sigma2_shape: 0.01,
            sigma2_rate: 0.01,
            wishart_df: None,
            wishart_scale: None,
        }
    }
}

impl PriorSpec {
    pub fn validate(&self, p: usize) -> Result<()> {
        let pos = [
            self.coef_variance,
            self.baseline_shape,
            self.baseline_rate,
            self.sigma2_shape,
            self.sigma2_rate,
        ];
        if pos.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidArgument("prior hyperparameters must be positive".into()));
        }
        if let Some(df) = self.wishart_df {
            if df < p as f64 {
                return Err(Error::InvalidArgument(format!("wishart_df {df} < dimension {p}")));
            }
        }
        if let Some(s) = &self.wishart_scale {
            if s.nrows() != p || s.ncols() != p {
                return Err(Error::InvalidArgument(format!("wishart_scale must be {p}x{p}")));
            }
            crate::linalg::cholesky(s, "wishart_scale")?;
        }
        Ok(())
    }

    pub(crate) fn wishart(&self, p: usize) -> (f64, DMatrix<f64>) {
        (
            self.wishart_df.unwrap_or(p as f64),
            self.wishart_scale.clone().unwrap_or_else(|| DMatrix::identity(p, p)),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainSettings {
    /// Total iterations including burn-in.
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
}

impl Default for ChainSettings {
    fn default() -> Self {
        ChainSettings {
            iterations: 10_000,
            burn_in: 5_000,
            thin: 5,
            seed: 1,
        }
    }
}

impl ChainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.iterations <= self.burn_in {
            return Err(Error::InvalidArgument(format!(
                "iterations ({}) must exceed burn-in ({})",
                self.iterations, self.burn_in
            )));
        }
        if self.thin == 0 {
            return Err(Error::InvalidArgument("thinning must be >= 1".into()));
        }
        Ok(())
    }

    pub fn kept_draws(&self) -> usize {
        (self.iterations - self.burn_in).div_ceil(self.thin)
    }
}

/// Parameter blocks held fixed at the given values during sampling.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixedBlocks {
    pub sigma2: Option<f64>,
    pub sigma: Option<DMatrix<f64>>,
    pub alpha: Option<Vec<f64>>,
    pub gamma: Option<Vec<f64>>,
    pub baseline_heights: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    pub priors: PriorSpec,
    pub chain: ChainSettings,
    /// Number of baseline-hazard intervals.
    pub n_intervals: usize,
    /// Baseline covariates entering the hazard (gamma).
    pub survival_covariates: Vec<String>,
    pub event_of_interest: u32,
    pub fixed: FixedBlocks,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            priors: PriorSpec::default(),
            chain: ChainSettings::default(),
            n_intervals: 5,
            survival_covariates: Vec::new(),
            event_of_interest: 1,
            fixed: FixedBlocks::default(),
        }
    }
}

/// A marker spec plus the hazard covariates, bound to a covariate layout.
#[derive(Clone, Debug, PartialEq)]
pub struct OneMarkerModel {
    pub design: MarkerDesign,
    pub survival_covariates: Vec<String>,
    survival_index: Vec<usize>,
}

impl OneMarkerModel {
    pub fn new(spec: &MarkerSpec, survival_covariates: &[String], covariate_names: &[String]) -> Result<Self> {
        let survival_index = survival_covariates
            .iter()
            .map(|name| {
                covariate_names
                    .iter()
                    .position(|c| c == name)
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown survival covariate '{name}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(OneMarkerModel {
            design: MarkerDesign::new(spec, covariate_names)?,
            survival_covariates: survival_covariates.to_vec(),
            survival_index,
        })
    }

    pub fn omega(&self, covariates: &[f64]) -> Vec<f64> {
        self.survival_index.iter().map(|&i| covariates[i]).collect()
    }

    pub fn n_alpha(&self) -> usize {
        self.design.association().n_components()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Joint,
    Mixed,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainMeta {
    pub seed: u64,
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Post-burn-in acceptance rate of every Metropolis block.
    pub acceptance: Vec<(String, f64)>,
    pub warnings: Vec<String>,
}

/// Thinned post-burn-in draws of a one-marker fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointPosterior {
    pub kind: ModelKind,
    pub marker_spec: MarkerSpec,
    pub survival_covariates: Vec<String>,
    pub covariate_names: Vec<String>,
    pub event_of_interest: u32,
    pub subjects: Vec<SubjectId>,
    pub draws: Vec<JointModelParams>,
    /// `random_effect_draws[i][d]` is subject i's random effect at draw d.
    pub random_effect_draws: Vec<Vec<Vec<f64>>>,
    pub meta: ChainMeta,
}

fn mean_of(vs: impl Iterator<Item = Vec<f64>>) -> Vec<f64> {
    let mut n = 0usize;
    let mut acc: Vec<f64> = Vec::new();
    for v in vs {
        if acc.is_empty() {
            acc = vec![0.0; v.len()];
        }
        for (a, x) in acc.iter_mut().zip(&v) {
            *a += x;
        }
        n += 1;
    }
    acc.iter_mut().for_each(|a| *a /= n.max(1) as f64);
    acc
}

impl JointPosterior {
    pub fn model(&self) -> Result<OneMarkerModel> {
        OneMarkerModel::new(&self.marker_spec, &self.survival_covariates, &self.covariate_names)
    }

    pub fn n_draws(&self) -> usize {
        self.draws.len()
    }

    /// Posterior means of all parameters.
    pub fn point_estimate(&self) -> JointModelParams {
        let first = &self.draws[0];
        let n = self.draws.len() as f64;
        let mut sigma = DMatrix::zeros(first.sigma.nrows(), first.sigma.ncols());
        for d in &self.draws {
            sigma += &d.sigma;
        }
        sigma /= n;
        JointModelParams {
            beta: mean_of(self.draws.iter().map(|d| d.beta.clone())),
            sigma2: self.draws.iter().map(|d| d.sigma2).sum::<f64>() / n,
            sigma,
            gamma: mean_of(self.draws.iter().map(|d| d.gamma.clone())),
            alpha: mean_of(self.draws.iter().map(|d| d.alpha.clone())),
            baseline: first.baseline.as_ref().map(|b| PiecewiseBaseline {
                knots: b.knots.clone(),
                heights: mean_of(
                    self.draws
                        .iter()
                        .map(|d| d.baseline.as_ref().expect("homogeneous draws").heights.clone()),
                ),
            }),
        }
    }

    /// Posterior mean of subject `i`'s random effects.
    pub fn random_effect_mean(&self, i: usize) -> Vec<f64> {
        mean_of(self.random_effect_draws[i].iter().cloned())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        serde_json::to_writer(BufWriter::new(File::create(path)?), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_reader(BufReader::new(File::open(path)?))
    }

    /// Decodes and structurally validates a serialized posterior.
    pub fn from_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let post: JointPosterior = serde_json::from_reader(reader)?;
        post.validate()?;
        Ok(post)
    }

    pub fn validate(&self) -> Result<()> {
        let model = self.model().map_err(|e| Error::Validation(e.to_string()))?;
        if self.draws.is_empty() {
            return Err(Error::Validation("posterior has no draws".into()));
        }
        if self.random_effect_draws.len() != self.subjects.len() {
            return Err(Error::Validation("random-effect draws do not match subjects".into()));
        }
        let (q, p) = (model.design.n_fixed(), model.design.n_random());
        for d in &self.draws {
            if d.beta.len() != q || d.sigma.nrows() != p || d.sigma.ncols() != p || !(d.sigma2 > 0.0) {
                return Err(Error::Validation("posterior draw has inconsistent dimensions".into()));
            }
            if self.kind == ModelKind::Joint {
                let Some(b) = &d.baseline else {
                    return Err(Error::Validation("joint-model draw lacks a baseline".into()));
                };
                PiecewiseBaseline::new(b.knots.clone(), b.heights.clone())
                    .map_err(|e| Error::Validation(e.to_string()))?;
                if d.alpha.len() != model.n_alpha() || d.gamma.len() != self.survival_covariates.len() {
                    return Err(Error::Validation("joint-model draw has wrong association/covariate sizes".into()));
                }
            }
        }
        for r in &self.random_effect_draws {
            if r.len() != self.draws.len() || r.iter().any(|b| b.len() != p) {
                return Err(Error::Validation("random-effect draws misaligned with parameter draws".into()));
            }
        }
        Ok(())
    }
}
