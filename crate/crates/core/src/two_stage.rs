//! Two-stage fitting: one-marker models at stage 1, a Cox model with the
//! predicted trajectories as time-varying covariates at stage 2, pooled over
//! posterior imputations with Rubin's rules.

use std::fs;
use std::io::BufReader;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cox::{breslow, build_counting_process, fit_cox, BreslowBaseline, CountingProcessRow, CoxFit, CoxOptions};
use crate::data::Dataset;
use crate::design::{MarkerDesign, MarkerSpec, Trajectory};
use crate::error::{Error, Result};
use crate::mcmc::{fit_lmm, fit_one_marker_jm, FitOptions, JointModelParams, JointPosterior};

/// Version of the on-disk model bundle layout.
pub const BUNDLE_SCHEMA: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// One-marker joint models at stage 1.
    Tsjm,
    /// Linear mixed models at stage 1.
    Mts,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Tsjm => "tsjm",
            Method::Mts => "mts",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TwoStageOptions {
    /// Stage-1 settings; the chain seed is offset per marker.
    pub stage1: FitOptions,
    /// Number of posterior imputations pooled at stage 2.
    pub imputations: usize,
    /// Baseline covariates entering the stage-2 Cox model.
    pub stage2_covariates: Vec<String>,
    pub cox: CoxOptions,
}

impl Default for TwoStageOptions {
    fn default() -> Self {
        TwoStageOptions {
            stage1: FitOptions::default(),
            imputations: 10,
            stage2_covariates: Vec::new(),
            cox: CoxOptions::default(),
        }
    }
}

/// Rubin's rules for M estimates of a coefficient vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RubinPool {
    pub mean: Vec<f64>,
    pub within: Vec<f64>,
    pub between: Vec<f64>,
    pub total: Vec<f64>,
}

/// `mean = sum theta_m / M`, `W = sum W_m / M`,
/// `B = sum (theta_m - mean)^2 / (M - 1)`, `T = W + (1 + 1/M) B`.
pub fn rubin_pool(estimates: &[Vec<f64>], within: &[Vec<f64>]) -> Result<RubinPool> {
    let m = estimates.len();
    if m < 2 {
        return Err(Error::InvalidArgument(format!("pooling needs at least 2 estimates, got {m}")));
    }
    if within.len() != m {
        return Err(Error::InvalidArgument("estimates and variances differ in count".into()));
    }
    let p = estimates[0].len();
    if estimates.iter().chain(within).any(|v| v.len() != p) {
        return Err(Error::InvalidArgument("estimate vectors differ in length".into()));
    }
    let mf = m as f64;
    let mean: Vec<f64> = (0..p).map(|j| estimates.iter().map(|e| e[j]).sum::<f64>() / mf).collect();
    let w: Vec<f64> = (0..p).map(|j| within.iter().map(|e| e[j]).sum::<f64>() / mf).collect();
    let b: Vec<f64> = (0..p)
        .map(|j| estimates.iter().map(|e| (e[j] - mean[j]).powi(2)).sum::<f64>() / (mf - 1.0))
        .collect();
    let total = w.iter().zip(&b).map(|(w, b)| w + (1.0 + 1.0 / mf) * b).collect();
    Ok(RubinPool {
        mean,
        within: w,
        between: b,
        total,
    })
}

/// Matrix form of the pooling rules (covariances instead of variances).
fn rubin_pool_matrix(fits: &[CoxFit]) -> (Vec<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let m = fits.len() as f64;
    let p = fits[0].coefficients.len();
    let mut mean = vec![0.0; p];
    let mut within = DMatrix::zeros(p, p);
    for f in fits {
        for (a, c) in mean.iter_mut().zip(&f.coefficients) {
            *a += c / m;
        }
        within += &f.covariance / m;
    }
    let mut between = DMatrix::zeros(p, p);
    for f in fits {
        let d = nalgebra::DVector::from_iterator(p, f.coefficients.iter().zip(&mean).map(|(c, m)| c - m));
        between += &d * d.transpose() / (m - 1.0);
    }
    let total = &within + &between * (1.0 + 1.0 / m);
    (mean, within, between, total)
}

/// The subject-specific trajectory `eta(t) = x(t)'beta + z(t)'b` with its
/// exact time derivative.
pub fn trajectory_fn(params: &JointModelParams, b: &[f64], design: &MarkerDesign, covariates: &[f64]) -> Result<Trajectory> {
    design.trajectory(&params.beta, b, covariates)
}

/// Names of the stage-2 coefficients: baseline covariates, then every
/// association component of every marker in marker order.
pub fn stage2_names(stage2_covariates: &[String], specs: &[MarkerSpec]) -> Vec<String> {
    let mut names = stage2_covariates.to_vec();
    for spec in specs {
        let label = if spec.name.is_empty() {
            format!("marker{}", spec.marker)
        } else {
            spec.name.clone()
        };
        for c in spec.association.labels() {
            names.push(format!("{label}.{c}"));
        }
    }
    names
}

fn covariate_positions(data: &Dataset, names: &[String]) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|n| {
            data.covariate_names()
                .iter()
                .position(|c| c == n)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown stage-2 covariate '{n}'")))
        })
        .collect()
}

/// Stage-2 counting-process rows from per-subject, per-marker trajectories.
pub fn stage2_rows(
    data: &Dataset,
    event_of_interest: u32,
    stage2_covariates: &[String],
    specs: &[MarkerSpec],
    trajectories: &[Vec<Trajectory>],
) -> Result<Vec<CountingProcessRow>> {
    let pos = covariate_positions(data, stage2_covariates)?;
    let survival = data.survival();
    build_counting_process(survival, event_of_interest, |i, t| {
        let mut x: Vec<f64> = pos.iter().map(|&j| survival[i].covariates[j]).collect();
        for (spec, traj) in specs.iter().zip(&trajectories[i]) {
            let (v, s) = traj.value_and_slope(t);
            let (g, n) = spec.association.components(v, s);
            x.extend_from_slice(&g[..n]);
        }
        Ok(x)
    })
}

/// Stage-2 Cox fit on known trajectories (e.g. the simulation truth).
pub fn fit_with_trajectories(
    data: &Dataset,
    event_of_interest: u32,
    stage2_covariates: &[String],
    specs: &[MarkerSpec],
    trajectories: &[Vec<Trajectory>],
    cox: &CoxOptions,
) -> Result<CoxFit> {
    let rows = stage2_rows(data, event_of_interest, stage2_covariates, specs, trajectories)?;
    fit_cox(&rows, &stage2_names(stage2_covariates, specs), None, cox)
}

/// Stage-2 fit with the true fixed effects and random effects: `true_beta[k]`
/// for marker k and `true_b[i][k]` for subject i.
pub fn fit_true(
    data: &Dataset,
    true_beta: &[Vec<f64>],
    true_b: &[Vec<Vec<f64>>],
    event_of_interest: u32,
    stage2_covariates: &[String],
    cox: &CoxOptions,
) -> Result<CoxFit> {
    let specs = data.marker_specs();
    if true_beta.len() != specs.len() || true_b.len() != data.n_subjects() {
        return Err(Error::InvalidArgument("truth does not match the dataset layout".into()));
    }
    let designs = specs
        .iter()
        .map(|s| MarkerDesign::new(s, data.covariate_names()))
        .collect::<Result<Vec<_>>>()?;
    let trajectories = data
        .survival()
        .iter()
        .zip(true_b)
        .map(|(rec, bs)| {
            designs
                .iter()
                .zip(true_beta)
                .zip(bs)
                .map(|((d, beta), b)| d.trajectory(beta, b, &rec.covariates))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    fit_with_trajectories(data, event_of_interest, stage2_covariates, specs, &trajectories, cox)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PooledCoxFit {
    pub covariate_names: Vec<String>,
    /// Pooled estimate, the mean over imputation fits.
    pub estimates: Vec<f64>,
    pub within: DMatrix<f64>,
    pub between: DMatrix<f64>,
    pub total: DMatrix<f64>,
    /// Breslow baseline at the pooled estimate on the posterior-mean covariates.
    pub baseline: BreslowBaseline,
    /// Fit on posterior-mean trajectories (diagnostic).
    pub point_fit: CoxFit,
    pub imputation_fits: Vec<CoxFit>,
    /// Thinned-chain draw used by every imputation.
    pub draw_indices: Vec<usize>,
    /// True when more imputations than draws were requested.
    pub with_replacement: bool,
}

impl PooledCoxFit {
    pub fn m(&self) -> usize {
        self.imputation_fits.len()
    }

    pub fn standard_errors(&self) -> Vec<f64> {
        (0..self.estimates.len()).map(|j| self.total[(j, j)].max(0.0).sqrt()).collect()
    }

    /// Normal-approximation interval `estimate +- z sqrt(T_jj)`.
    pub fn interval(&self, j: usize, z: f64) -> (f64, f64) {
        let se = self.total[(j, j)].max(0.0).sqrt();
        (self.estimates[j] - z * se, self.estimates[j] + z * se)
    }

    pub fn pool(&self) -> RubinPool {
        let p = self.estimates.len();
        RubinPool {
            mean: self.estimates.clone(),
            within: (0..p).map(|j| self.within[(j, j)]).collect(),
            between: (0..p).map(|j| self.between[(j, j)]).collect(),
            total: (0..p).map(|j| self.total[(j, j)]).collect(),
        }
    }
}

/// Systematic draw indices `floor(m D / M)`; repeats when `M > D`.
pub fn imputation_indices(n_draws: usize, m: usize) -> Vec<usize> {
    (0..m).map(|j| j * n_draws / m).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoStageModel {
    pub method: Method,
    pub marker_specs: Vec<MarkerSpec>,
    pub covariate_names: Vec<String>,
    pub event_of_interest: u32,
    pub options: TwoStageOptions,
    #[serde(skip)]
    pub stage1: Vec<JointPosterior>,
    pub stage2: PooledCoxFit,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    schema: u32,
    method: Method,
    marker_specs: Vec<MarkerSpec>,
    covariate_names: Vec<String>,
    event_of_interest: u32,
    options: TwoStageOptions,
    stage1_files: Vec<String>,
    stage2_file: String,
}

impl TwoStageModel {
    /// Stage-1 posterior-mean parameters per marker.
    pub fn point_params(&self) -> Vec<JointModelParams> {
        self.stage1.iter().map(JointPosterior::point_estimate).collect()
    }

    /// Writes the bundle: `manifest.json`, one posterior per marker and the
    /// stage-2 fit.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let stage1_files: Vec<String> = self
            .marker_specs
            .iter()
            .map(|s| format!("stage1_marker{}.json", s.marker))
            .collect();
        for (post, file) in self.stage1.iter().zip(&stage1_files) {
            post.save(&dir.join(file))?;
        }
        let stage2_file = "stage2.json".to_string();
        fs::write(dir.join(&stage2_file), serde_json::to_string_pretty(&self.stage2)?)?;
        let manifest = Manifest {
            schema: BUNDLE_SCHEMA,
            method: self.method,
            marker_specs: self.marker_specs.clone(),
            covariate_names: self.covariate_names.clone(),
            event_of_interest: self.event_of_interest,
            options: self.options.clone(),
            stage1_files,
            stage2_file,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Self::read_manifest(fs::File::open(dir.join("manifest.json"))?)?;
        let stage1 = manifest
            .stage1_files
            .iter()
            .map(|f| JointPosterior::load(&dir.join(bundle_file(f)?)))
            .collect::<Result<Vec<_>>>()?;
        let stage2: PooledCoxFit =
            serde_json::from_reader(BufReader::new(fs::File::open(dir.join(bundle_file(&manifest.stage2_file)?))?))?;
        let model = TwoStageModel {
            method: manifest.method,
            marker_specs: manifest.marker_specs,
            covariate_names: manifest.covariate_names,
            event_of_interest: manifest.event_of_interest,
            options: manifest.options,
            stage1,
            stage2,
        };
        model.validate()?;
        Ok(model)
    }

    fn read_manifest<R: std::io::Read>(reader: R) -> Result<Manifest> {
        let manifest: Manifest = serde_json::from_reader(reader)?;
        if manifest.schema != BUNDLE_SCHEMA {
            return Err(Error::Validation(format!("unsupported bundle schema {}", manifest.schema)));
        }
        if manifest.stage1_files.len() != manifest.marker_specs.len() {
            return Err(Error::Validation("manifest lists a posterior per marker".into()));
        }
        for f in manifest.stage1_files.iter().chain(std::iter::once(&manifest.stage2_file)) {
            bundle_file(f)?;
        }
        Ok(manifest)
    }

    /// Decodes and checks a bundle manifest without touching other files.
    pub fn check_manifest<R: std::io::Read>(reader: R) -> Result<()> {
        Self::read_manifest(reader).map(|_| ())
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage1.len() != self.marker_specs.len() {
            return Err(Error::Validation("one stage-1 posterior per marker expected".into()));
        }
        for (post, spec) in self.stage1.iter().zip(&self.marker_specs) {
            if post.marker_spec != *spec {
                return Err(Error::Validation(format!("posterior for marker {} does not match its spec", spec.marker)));
            }
        }
        let names = stage2_names(&self.options.stage2_covariates, &self.marker_specs);
        let p = names.len();
        let s2 = &self.stage2;
        if s2.covariate_names != names || s2.estimates.len() != p || s2.total.nrows() != p || s2.total.ncols() != p {
            return Err(Error::Validation("stage-2 fit does not match the marker layout".into()));
        }
        if s2.baseline.times.len() != s2.baseline.increments.len()
            || s2.baseline.times.windows(2).any(|w| !(w[1] > w[0]))
            || s2.baseline.increments.iter().any(|v| !(*v >= 0.0))
        {
            return Err(Error::Validation("stage-2 baseline is not a valid step function".into()));
        }
        Ok(())
    }
}

/// Bundle files are plain names inside the bundle directory.
fn bundle_file(name: &str) -> Result<&str> {
    if name.is_empty() || name.contains(['/', '\\']) || name == ".." || name == "." {
        return Err(Error::Validation(format!("invalid bundle file name '{name}'")));
    }
    Ok(name)
}

// Keyed by marker id so that reordering the markers leaves every chain unchanged.
fn marker_seed(base: u64, marker: u32) -> u64 {
    base.wrapping_add((marker as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn stage1(data: &Dataset, method: Method, opts: &TwoStageOptions) -> Result<Vec<JointPosterior>> {
    let specs = data.marker_specs();
    if specs.is_empty() {
        return Err(Error::InvalidArgument("dataset has no markers".into()));
    }
    specs
        .par_iter()
        .map(|spec| {
            let mut fo = opts.stage1.clone();
            fo.chain.seed = marker_seed(opts.stage1.chain.seed, spec.marker);
            match method {
                Method::Tsjm => fit_one_marker_jm(data, spec.marker, spec, &fo),
                Method::Mts => fit_lmm(data, spec.marker, spec, &fo),
            }
        })
        .collect()
}

fn trajectories_for<F>(data: &Dataset, designs: &[MarkerDesign], mut pick: F) -> Result<Vec<Vec<Trajectory>>>
where
    F: FnMut(usize, usize) -> (Vec<f64>, Vec<f64>),
{
    data.survival()
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            designs
                .iter()
                .enumerate()
                .map(|(k, d)| {
                    let (beta, b) = pick(k, i);
                    d.trajectory(&beta, &b, &rec.covariates)
                })
                .collect()
        })
        .collect()
}

/// Stage 2 given fitted stage-1 posteriors.
pub fn fit_stage2(data: &Dataset, posteriors: &[JointPosterior], opts: &TwoStageOptions) -> Result<PooledCoxFit> {
    let specs: Vec<MarkerSpec> = posteriors.iter().map(|p| p.marker_spec.clone()).collect();
    let eoi = opts.stage1.event_of_interest;
    let names = stage2_names(&opts.stage2_covariates, &specs);
    if opts.imputations < 2 {
        return Err(Error::InvalidArgument("at least 2 imputations are needed".into()));
    }
    for post in posteriors {
        if post.subjects.len() != data.n_subjects()
            || post.subjects.iter().zip(data.survival()).any(|(a, r)| *a != r.subject)
        {
            return Err(Error::InvalidArgument(format!(
                "marker {}: posterior subjects differ from the dataset",
                post.marker_spec.marker
            )));
        }
    }
    let designs = specs
        .iter()
        .map(|s| MarkerDesign::new(s, data.covariate_names()))
        .collect::<Result<Vec<_>>>()?;

    let points: Vec<JointModelParams> = posteriors.iter().map(JointPosterior::point_estimate).collect();
    let point_traj = trajectories_for(data, &designs, |k, i| {
        (points[k].beta.clone(), posteriors[k].random_effect_mean(i))
    })?;
    let point_rows = stage2_rows(data, eoi, &opts.stage2_covariates, &specs, &point_traj)?;
    let point_fit = fit_cox(&point_rows, &names, None, &opts.cox)?;

    let n_draws = posteriors.iter().map(JointPosterior::n_draws).min().unwrap_or(0);
    let m = opts.imputations;
    let draw_indices = imputation_indices(n_draws, m);
    let imputation_fits = draw_indices
        .par_iter()
        .enumerate()
        .map(|(j, &d)| {
            let traj = trajectories_for(data, &designs, |k, i| {
                (
                    posteriors[k].draws[d].beta.clone(),
                    posteriors[k].random_effect_draws[i][d].clone(),
                )
            })?;
            let rows = stage2_rows(data, eoi, &opts.stage2_covariates, &specs, &traj)?;
            fit_cox(&rows, &names, Some(&point_fit.coefficients), &opts.cox).map_err(|e| e.in_imputation(j))
        })
        .collect::<Result<Vec<_>>>()?;

    let (estimates, within, between, total) = rubin_pool_matrix(&imputation_fits);
    let baseline = breslow(&point_rows, &estimates)?;
    Ok(PooledCoxFit {
        covariate_names: names,
        estimates,
        within,
        between,
        total,
        baseline,
        point_fit,
        imputation_fits,
        draw_indices,
        with_replacement: m > n_draws,
    })
}

fn fit_two_stage(data: &Dataset, method: Method, opts: &TwoStageOptions) -> Result<TwoStageModel> {
    let posteriors = stage1(data, method, opts)?;
    let stage2 = fit_stage2(data, &posteriors, opts)?;
    Ok(TwoStageModel {
        method,
        marker_specs: data.marker_specs().to_vec(),
        covariate_names: data.covariate_names().to_vec(),
        event_of_interest: opts.stage1.event_of_interest,
        options: opts.clone(),
        stage1: posteriors,
        stage2,
    })
}

/// Two-stage joint modeling: one-marker joint models at stage 1.
pub fn fit_tsjm(data: &Dataset, opts: &TwoStageOptions) -> Result<TwoStageModel> {
    fit_two_stage(data, Method::Tsjm, opts)
}

/// Multiple two-stage comparator: linear mixed models at stage 1.
pub fn fit_mts(data: &Dataset, opts: &TwoStageOptions) -> Result<TwoStageModel> {
    fit_two_stage(data, Method::Mts, opts)
}
