//! Metropolis-within-Gibbs sampler for the one-marker joint model.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use super::likelihood::{mvn_log_density, SubjectTerms};
use super::{ChainMeta, FitOptions, JointModelParams, JointPosterior, ModelKind, OneMarkerModel, PiecewiseBaseline};
use crate::data::Dataset;
use crate::design::MarkerSpec;
use crate::error::{Error, Result};
use crate::linalg::{cholesky, mvn_from_cholesky, sample_inverse_wishart, spd_inverse, standard_normal_vector};

const TARGET_MULTI: f64 = 0.234;
const TARGET_SCALAR: f64 = 0.44;

/// Robbins-Monro scale adaptation for one Metropolis block.
#[derive(Clone, Debug)]
struct Adapt {
    log_scale: f64,
    target: f64,
    accepted: usize,
    proposed: usize,
}

impl Adapt {
    fn new(scale: f64, target: f64) -> Self {
        Adapt {
            log_scale: scale.ln(),
            target,
            accepted: 0,
            proposed: 0,
        }
    }

    fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    fn record(&mut self, accepted: bool, iter: usize, burn_in: usize) {
        if iter < burn_in {
            let gain = (1.0 + iter as f64).powf(-0.6);
            self.log_scale += gain * (accepted as u8 as f64 - self.target);
            self.log_scale = self.log_scale.clamp(-30.0, 10.0);
        } else {
            self.proposed += 1;
            self.accepted += accepted as usize;
        }
    }

    fn rate(&self) -> f64 {
        if self.proposed == 0 {
            f64::NAN
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

fn accept<R: Rng>(log_ratio: f64, rng: &mut R) -> bool {
    log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio
}

struct Subject {
    terms: SubjectTerms,
    ztz: DMatrix<f64>,
    ints: Vec<f64>,
    g_end: f64,
    gamma_lp: f64,
}

impl Subject {
    fn surv_ll(&self, heights: &[f64]) -> f64 {
        self.terms.survival_loglik(&self.ints, self.g_end, heights, self.gamma_lp)
    }
}

struct Chain<'a> {
    model: &'a OneMarkerModel,
    opts: &'a FitOptions,
    joint: bool,
    /// True when beta and b do not enter the survival part.
    decoupled: bool,
    subjects: Vec<Subject>,
    xtx: DMatrix<f64>,
    n_obs: usize,
    events_per_interval: Vec<f64>,
    beta: DVector<f64>,
    b: Vec<DVector<f64>>,
    sigma2: f64,
    sigma: DMatrix<f64>,
    gamma: Vec<f64>,
    alpha: Vec<f64>,
    baseline: Option<PiecewiseBaseline>,
    b_adapt: Vec<Adapt>,
    beta_adapt: Adapt,
    alpha_adapt: Vec<Adapt>,
    gamma_adapt: Vec<Adapt>,
    scratch: Vec<f64>,
}

impl<'a> Chain<'a> {
    fn new(data: &Dataset, marker: u32, model: &'a OneMarkerModel, opts: &'a FitOptions, joint: bool) -> Result<Self> {
        let eoi = opts.event_of_interest;
        let histories = data.marker_histories(marker);
        let records = data.survival();
        let q = model.design.n_fixed();
        let p = model.design.n_random();

        let baseline = if joint {
            let events: Vec<f64> = records.iter().filter(|r| r.is_event(eoi)).map(|r| r.time).collect();
            let max_time = records.iter().map(|r| r.time).fold(0.0, f64::max);
            let knots = PiecewiseBaseline::quantile_knots(&events, max_time, opts.n_intervals);
            let j = knots.len() - 1;
            let heights = match &opts.fixed.baseline_heights {
                Some(h) if h.len() != j => {
                    return Err(Error::InvalidArgument(format!(
                        "{} fixed baseline heights for {j} intervals",
                        h.len()
                    )))
                }
                Some(h) => h.clone(),
                None => vec![1.0; j],
            };
            Some(PiecewiseBaseline::new(knots, heights)?)
        } else {
            None
        };

        let mut subjects = Vec::with_capacity(records.len());
        let mut xtx = DMatrix::zeros(q, q);
        let mut xty = DVector::zeros(q);
        let mut n_obs = 0;
        for (rec, hist) in records.iter().zip(&histories) {
            let terms = SubjectTerms::new(model, hist, &rec.covariates, rec.time, joint && rec.is_event(eoi), baseline.as_ref())?;
            xtx += terms.x.transpose() * &terms.x;
            xty += terms.x.transpose() * &terms.y;
            n_obs += terms.n_obs();
            subjects.push(Subject {
                ztz: terms.z.transpose() * &terms.z,
                ints: vec![0.0; baseline.as_ref().map_or(0, |b| b.n_intervals())],
                g_end: 0.0,
                gamma_lp: 0.0,
                terms,
            });
        }

        let n_alpha = if joint { model.n_alpha() } else { 0 };
        let n_gamma = if joint { model.survival_covariates.len() } else { 0 };
        let alpha = match &opts.fixed.alpha {
            Some(a) if joint && a.len() != n_alpha => {
                return Err(Error::InvalidArgument(format!("{} fixed alpha values, model has {n_alpha}", a.len())))
            }
            Some(a) if joint => a.clone(),
            _ => vec![0.0; n_alpha],
        };
        let gamma = match &opts.fixed.gamma {
            Some(g) if joint && g.len() != n_gamma => {
                return Err(Error::InvalidArgument(format!("{} fixed gamma values, model has {n_gamma}", g.len())))
            }
            Some(g) if joint => g.clone(),
            _ => vec![0.0; n_gamma],
        };
        let decoupled = !joint || (opts.fixed.alpha.is_some() && alpha.iter().all(|a| *a == 0.0));

        // Least-squares start for beta.
        let mut beta = DVector::zeros(q);
        let mut sigma2 = 1.0;
        if n_obs > 0 {
            let ridge = &xtx + DMatrix::identity(q, q) * 1e-8;
            if let Some(sol) = ridge.cholesky().map(|c| c.solve(&xty)) {
                beta = sol;
            }
            let ssr: f64 = subjects
                .iter()
                .map(|s| (&s.terms.y - &s.terms.x * &beta).norm_squared())
                .sum();
            if n_obs > q && ssr > 0.0 {
                sigma2 = ssr / (n_obs - q) as f64;
            }
        }
        if let Some(s2) = opts.fixed.sigma2 {
            if !(s2 > 0.0) {
                return Err(Error::InvalidArgument("fixed sigma2 must be positive".into()));
            }
            sigma2 = s2;
        }
        let sigma = match &opts.fixed.sigma {
            Some(s) => {
                if s.nrows() != p || s.ncols() != p {
                    return Err(Error::InvalidArgument(format!("fixed Sigma must be {p}x{p}")));
                }
                cholesky(s, "fixed Sigma")?;
                s.clone()
            }
            None => DMatrix::identity(p, p),
        };

        let mut events_per_interval = Vec::new();
        if let Some(base) = &baseline {
            events_per_interval = vec![0.0; base.n_intervals()];
            for s in &subjects {
                if s.terms.event {
                    events_per_interval[s.terms.event_interval] += 1.0;
                }
            }
        }

        let n = subjects.len();
        let mut chain = Chain {
            model,
            opts,
            joint,
            decoupled,
            subjects,
            xtx,
            n_obs,
            events_per_interval,
            beta,
            b: vec![DVector::zeros(p); n],
            sigma2,
            sigma,
            gamma,
            alpha,
            baseline,
            b_adapt: vec![Adapt::new(2.38 / (p as f64).sqrt(), TARGET_MULTI); n],
            beta_adapt: Adapt::new(2.38 / (q as f64).sqrt(), TARGET_MULTI),
            alpha_adapt: vec![Adapt::new(0.1, TARGET_SCALAR); n_alpha],
            gamma_adapt: vec![Adapt::new(0.1, TARGET_SCALAR); n_gamma],
            scratch: Vec::new(),
        };
        if chain.joint {
            chain.refresh_survival();
            if chain.opts.fixed.baseline_heights.is_none() {
                // Start the baseline at its conditional mode-ish value.
                let rates = chain.exposure();
                let base = chain.baseline.as_mut().expect("joint");
                for (j, h) in base.heights.iter_mut().enumerate() {
                    *h = ((chain.opts.priors.baseline_shape + chain.events_per_interval[j])
                        / (chain.opts.priors.baseline_rate + rates[j]))
                        .max(1e-300);
                }
            }
        }
        Ok(chain)
    }

    fn assoc(&self) -> crate::design::Association {
        self.model.design.association()
    }

    fn refresh_survival(&mut self) {
        let assoc = self.assoc();
        let beta = self.beta.as_slice().to_vec();
        for (s, b) in self.subjects.iter_mut().zip(&self.b) {
            let traj = s.terms.trajectory(&beta, b.as_slice());
            s.g_end = s.terms.hazard_integrals(&traj, &self.alpha, assoc, &mut s.ints);
            s.gamma_lp = s.terms.gamma_lp(&self.gamma);
        }
    }

    /// `sum_i exp(gamma'w_i) I_ij` for every interval j.
    fn exposure(&self) -> Vec<f64> {
        let j = self.events_per_interval.len();
        let mut e = vec![0.0; j];
        for s in &self.subjects {
            let w = s.gamma_lp.exp();
            for (ej, ij) in e.iter_mut().zip(&s.ints) {
                *ej += w * ij;
            }
        }
        e
    }

    fn heights(&self) -> &[f64] {
        self.baseline.as_ref().map_or(&[], |b| &b.heights)
    }

    fn update_b(&mut self, iter: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        let (sigma_inv, logdet) = spd_inverse(&self.sigma, "random-effect covariance")?;
        let assoc = self.assoc();
        let beta = self.beta.as_slice().to_vec();
        let burn_in = self.opts.chain.burn_in;
        let heights = self.baseline.as_ref().map(|b| b.heights.clone()).unwrap_or_default();
        for i in 0..self.subjects.len() {
            let s = &self.subjects[i];
            let r0 = &s.terms.y - &s.terms.x * &self.beta;
            let zr = s.terms.z.transpose() * &r0;
            let prec = &sigma_inv + &s.ztz / self.sigma2;
            let (cov, _) = spd_inverse(&prec, "random-effect conditional precision")?;
            let l = cholesky(&cov, "random-effect conditional covariance")?;
            if self.decoupled {
                let mean = &cov * &zr / self.sigma2;
                self.b[i] = mvn_from_cholesky(&mean, &l, rng);
                continue;
            }
            let cur = &self.b[i];
            let scale = self.b_adapt[i].scale();
            let prop = cur + (&l * standard_normal_vector(cur.len(), rng)) * scale;
            let long = |b: &DVector<f64>| -> f64 {
                -0.5 * (r0.norm_squared() - 2.0 * b.dot(&zr) + (b.transpose() * &s.ztz * b)[(0, 0)]) / self.sigma2
            };
            let traj = s.terms.trajectory(&beta, prop.as_slice());
            self.scratch.resize(s.ints.len(), 0.0);
            let mut ints = std::mem::take(&mut self.scratch);
            let g_end = s.terms.hazard_integrals(&traj, &self.alpha, assoc, &mut ints);
            let surv_new = s.terms.survival_loglik(&ints, g_end, &heights, s.gamma_lp);
            let log_ratio = long(&prop) + surv_new + mvn_log_density(&prop, &sigma_inv, logdet)
                - long(cur)
                - s.surv_ll(&heights)
                - mvn_log_density(cur, &sigma_inv, logdet);
            let ok = log_ratio.is_finite() && accept(log_ratio, rng);
            if ok {
                let s = &mut self.subjects[i];
                std::mem::swap(&mut s.ints, &mut ints);
                s.g_end = g_end;
                self.b[i] = prop;
            }
            self.scratch = ints;
            self.b_adapt[i].record(ok, iter, burn_in);
        }
        Ok(())
    }

    /// `sum_i X_i'(y_i - Z_i b_i)`.
    fn beta_rhs(&self) -> DVector<f64> {
        let q = self.beta.len();
        let mut c = DVector::zeros(q);
        for (s, b) in self.subjects.iter().zip(&self.b) {
            if s.terms.n_obs() > 0 {
                c += s.terms.x.transpose() * (&s.terms.y - &s.terms.z * b);
            }
        }
        c
    }

    fn update_beta(&mut self, iter: usize, rng: &mut ChaCha8Rng) -> Result<()> {
        let q = self.beta.len();
        if q == 0 {
            return Ok(());
        }
        let c = self.beta_rhs();
        let prec = &self.xtx / self.sigma2 + DMatrix::identity(q, q) / self.opts.priors.coef_variance;
        let (cov, _) = spd_inverse(&prec, "fixed-effect conditional precision")?;
        let l = cholesky(&cov, "fixed-effect conditional covariance")?;
        if self.decoupled {
            let mean = &cov * &c / self.sigma2;
            self.beta = mvn_from_cholesky(&mean, &l, rng);
            return Ok(());
        }
        let prop = &self.beta + (&l * standard_normal_vector(q, rng)) * self.beta_adapt.scale();
        let log_target_long = |beta: &DVector<f64>| -> f64 {
            -0.5 * ((beta.transpose() * &self.xtx * beta)[(0, 0)] - 2.0 * beta.dot(&c)) / self.sigma2
                - 0.5 * beta.norm_squared() / self.opts.priors.coef_variance
        };
        let assoc = self.assoc();
        let heights = self.heights();
        let beta_new = prop.as_slice();
        let mut new_ints = Vec::with_capacity(self.subjects.len());
        let mut delta = log_target_long(&prop) - log_target_long(&self.beta);
        for (s, b) in self.subjects.iter().zip(&self.b) {
            let traj = s.terms.trajectory(beta_new, b.as_slice());
            let mut ints = vec![0.0; s.ints.len()];
            let g_end = s.terms.hazard_integrals(&traj, &self.alpha, assoc, &mut ints);
            delta += s.terms.survival_loglik(&ints, g_end, heights, s.gamma_lp) - s.surv_ll(heights);
            new_ints.push((ints, g_end));
        }
        let ok = delta.is_finite() && accept(delta, rng);
        if ok {
            for (s, (ints, g)) in self.subjects.iter_mut().zip(new_ints) {
                s.ints = ints;
                s.g_end = g;
            }
            self.beta = prop;
        }
        self.beta_adapt.record(ok, iter, self.opts.chain.burn_in);
        Ok(())
    }

    fn update_sigma2(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        if self.opts.fixed.sigma2.is_some() || self.n_obs == 0 {
            return Ok(());
        }
        let ssr: f64 = self
            .subjects
            .iter()
            .zip(&self.b)
            .map(|(s, b)| s.terms.residuals(&self.beta, b).norm_squared())
            .sum();
        let shape = self.opts.priors.sigma2_shape + 0.5 * self.n_obs as f64;
        let rate = self.opts.priors.sigma2_rate + 0.5 * ssr;
        let g = Gamma::new(shape, 1.0 / rate).map_err(|e| Error::NonFinite(format!("sigma2 update: {e}")))?;
        let prec: f64 = g.sample(rng);
        let s2 = 1.0 / prec.max(f64::MIN_POSITIVE);
        if !s2.is_finite() {
            return Err(Error::NonFinite("residual variance draw".into()));
        }
        self.sigma2 = s2;
        Ok(())
    }

    fn update_sigma(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        if self.opts.fixed.sigma.is_some() {
            return Ok(());
        }
        let p = self.sigma.nrows();
        let (df, mut scale) = self.opts.priors.wishart(p);
        for b in &self.b {
            scale += b * b.transpose();
        }
        self.sigma = sample_inverse_wishart(df + self.b.len() as f64, &scale, rng)?;
        Ok(())
    }

    fn update_gamma(&mut self, iter: usize, rng: &mut ChaCha8Rng) {
        if !self.joint || self.opts.fixed.gamma.is_some() {
            return;
        }
        let var = self.opts.priors.coef_variance;
        for k in 0..self.gamma.len() {
            let old = self.gamma[k];
            let new = old + self.gamma_adapt[k].scale() * { let z: f64 = StandardNormal.sample(rng); z };
            let heights = self.heights();
            let mut delta = -0.5 * (new * new - old * old) / var;
            let mut lps = Vec::with_capacity(self.subjects.len());
            for s in &self.subjects {
                let w = s.terms.omega[k];
                let lp = s.gamma_lp + (new - old) * w;
                let cum: f64 = s.ints.iter().zip(heights).map(|(i, l)| i * l).sum();
                if s.terms.event {
                    delta += (new - old) * w;
                }
                delta -= (lp.exp() - s.gamma_lp.exp()) * cum;
                lps.push(lp);
            }
            let ok = delta.is_finite() && accept(delta, rng);
            if ok {
                self.gamma[k] = new;
                for (s, lp) in self.subjects.iter_mut().zip(lps) {
                    s.gamma_lp = lp;
                }
            }
            self.gamma_adapt[k].record(ok, iter, self.opts.chain.burn_in);
        }
    }

    fn update_alpha(&mut self, iter: usize, rng: &mut ChaCha8Rng) {
        if !self.joint || self.opts.fixed.alpha.is_some() {
            return;
        }
        let var = self.opts.priors.coef_variance;
        let assoc = self.assoc();
        let beta = self.beta.as_slice().to_vec();
        for k in 0..self.alpha.len() {
            let old = self.alpha[k];
            let mut alpha_new = self.alpha.clone();
            alpha_new[k] = old + self.alpha_adapt[k].scale() * { let z: f64 = StandardNormal.sample(rng); z };
            let heights = self.heights();
            let mut delta = -0.5 * (alpha_new[k].powi(2) - old * old) / var;
            let mut new_ints = Vec::with_capacity(self.subjects.len());
            for (s, b) in self.subjects.iter().zip(&self.b) {
                let traj = s.terms.trajectory(&beta, b.as_slice());
                let mut ints = vec![0.0; s.ints.len()];
                let g_end = s.terms.hazard_integrals(&traj, &alpha_new, assoc, &mut ints);
                delta += s.terms.survival_loglik(&ints, g_end, heights, s.gamma_lp) - s.surv_ll(heights);
                new_ints.push((ints, g_end));
            }
            let ok = delta.is_finite() && accept(delta, rng);
            if ok {
                self.alpha = alpha_new;
                for (s, (ints, g)) in self.subjects.iter_mut().zip(new_ints) {
                    s.ints = ints;
                    s.g_end = g;
                }
            }
            self.alpha_adapt[k].record(ok, iter, self.opts.chain.burn_in);
        }
    }

    fn update_baseline(&mut self, rng: &mut ChaCha8Rng) -> Result<()> {
        if !self.joint || self.opts.fixed.baseline_heights.is_some() {
            return Ok(());
        }
        let exposure = self.exposure();
        let (a, r) = (self.opts.priors.baseline_shape, self.opts.priors.baseline_rate);
        let base = self.baseline.as_mut().expect("joint");
        for (j, h) in base.heights.iter_mut().enumerate() {
            let g = Gamma::new(a + self.events_per_interval[j], 1.0 / (r + exposure[j]))
                .map_err(|e| Error::NonFinite(format!("baseline update: {e}")))?;
            let v: f64 = g.sample(rng);
            *h = v.max(1e-300);
        }
        Ok(())
    }

    fn params(&self) -> JointModelParams {
        JointModelParams {
            beta: self.beta.as_slice().to_vec(),
            sigma2: self.sigma2,
            sigma: self.sigma.clone(),
            gamma: self.gamma.clone(),
            alpha: self.alpha.clone(),
            baseline: self.baseline.clone(),
        }
    }

    fn acceptance(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        if !self.decoupled {
            let (acc, prop) = self
                .b_adapt
                .iter()
                .fold((0, 0), |(a, p), ad| (a + ad.accepted, p + ad.proposed));
            if prop > 0 {
                out.push(("b".to_string(), acc as f64 / prop as f64));
            }
            out.push(("beta".to_string(), self.beta_adapt.rate()));
        }
        if self.joint && self.opts.fixed.alpha.is_none() {
            for (k, a) in self.alpha_adapt.iter().enumerate() {
                out.push((format!("alpha[{}]", self.assoc().labels()[k]), a.rate()));
            }
        }
        if self.joint && self.opts.fixed.gamma.is_none() {
            for (k, a) in self.gamma_adapt.iter().enumerate() {
                out.push((format!("gamma[{}]", self.model.survival_covariates[k]), a.rate()));
            }
        }
        out
    }
}

fn check_spec(data: &Dataset, marker: u32, spec: &MarkerSpec) -> Result<()> {
    if spec.marker != marker {
        return Err(Error::InvalidArgument(format!(
            "spec is for marker {} but marker {marker} was requested",
            spec.marker
        )));
    }
    if data.n_subjects() == 0 {
        return Err(Error::InvalidArgument("dataset has no subjects".into()));
    }
    Ok(())
}

fn run(data: &Dataset, marker: u32, spec: &MarkerSpec, opts: &FitOptions, joint: bool) -> Result<JointPosterior> {
    check_spec(data, marker, spec)?;
    opts.chain.validate()?;
    opts.priors.validate(spec.n_random())?;
    let survival_covariates = if joint { opts.survival_covariates.clone() } else { Vec::new() };
    let model = OneMarkerModel::new(spec, &survival_covariates, data.covariate_names())?;
    let mut chain = Chain::new(data, marker, &model, opts, joint)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.chain.seed);

    let settings = &opts.chain;
    let n = data.n_subjects();
    let kept = settings.kept_draws();
    let mut draws = Vec::with_capacity(kept);
    let mut b_draws = vec![Vec::with_capacity(kept); n];
    for iter in 0..settings.iterations {
        chain.update_b(iter, &mut rng)?;
        chain.update_beta(iter, &mut rng)?;
        chain.update_sigma2(&mut rng)?;
        chain.update_sigma(&mut rng)?;
        chain.update_gamma(iter, &mut rng);
        chain.update_alpha(iter, &mut rng);
        chain.update_baseline(&mut rng)?;
        if iter >= settings.burn_in && (iter - settings.burn_in) % settings.thin == 0 {
            draws.push(chain.params());
            for (out, b) in b_draws.iter_mut().zip(&chain.b) {
                out.push(b.as_slice().to_vec());
            }
        }
    }

    let acceptance = chain.acceptance();
    let mut warnings = Vec::new();
    for (name, rate) in &acceptance {
        if !(0.1..=0.6).contains(rate) {
            let msg = format!("marker {marker}: acceptance rate of {name} is {rate:.3} after adaptation");
            log::warn!("{msg}");
            warnings.push(msg);
        }
    }

    Ok(JointPosterior {
        kind: if joint { ModelKind::Joint } else { ModelKind::Mixed },
        marker_spec: spec.clone(),
        survival_covariates,
        covariate_names: data.covariate_names().to_vec(),
        event_of_interest: opts.event_of_interest,
        subjects: data.survival().iter().map(|r| r.subject.clone()).collect(),
        draws,
        random_effect_draws: b_draws,
        meta: ChainMeta {
            seed: settings.seed,
            iterations: settings.iterations,
            burn_in: settings.burn_in,
            thin: settings.thin,
            acceptance,
            warnings,
        },
    })
}

/// Samples the posterior of the joint model for one marker and the event of
/// interest (other causes are treated as censoring).
pub fn fit_one_marker_jm(data: &Dataset, marker: u32, spec: &MarkerSpec, opts: &FitOptions) -> Result<JointPosterior> {
    run(data, marker, spec, opts, true).map_err(|e| e.in_marker(marker))
}

/// Samples the posterior of the linear mixed model for one marker, ignoring
/// the survival outcome. Survival-related options are ignored.
pub fn fit_lmm(data: &Dataset, marker: u32, spec: &MarkerSpec, opts: &FitOptions) -> Result<JointPosterior> {
    run(data, marker, spec, opts, false).map_err(|e| e.in_marker(marker))
}
