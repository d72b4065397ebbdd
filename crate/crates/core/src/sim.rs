//! Synthetic multi-marker joint data.
//!
//! Markers follow a linear mixed model with random intercepts and slopes
//! whose covariance has exchangeable within-marker and between-marker
//! blocks. Event times come from a proportional hazards model driven by the
//! current marker values, generated with the permutational algorithm:
//! marginal times are drawn first and then matched to subjects.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, LongitudinalObservation, SurvivalRecord};
use crate::design::MarkerSpec;
use crate::error::{Error, Result};
use crate::linalg::{cholesky, mvn_from_cholesky, symmetrize};

/// Number of fixed effects per marker: intercept, time, x1, x2.
pub const N_FIXED: usize = 4;
/// Random intercept and slope per marker.
pub const N_RANDOM: usize = 2;

pub const COVARIATES: [&str; 2] = ["x1", "x2"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimScenario {
    pub n: usize,
    pub n_markers: usize,
    /// Fixed effects (intercept, time, x1, x2) per marker.
    pub beta: Vec<Vec<f64>>,
    pub alpha: Vec<f64>,
    /// Residual variance per marker.
    pub sigma2: Vec<f64>,
    /// Correlation between random effects of different markers.
    pub rho_between: f64,
    /// Correlation between the intercept and slope of one marker.
    pub rho_within: f64,
    pub grid: Vec<f64>,
    /// Target fraction of censored subjects.
    pub censoring_target: f64,
    /// Administrative censoring time.
    pub horizon: f64,
    /// Upper end of the uniform censoring distribution.
    pub censoring_upper: f64,
    /// Constant baseline hazard; calibrated to the censoring target when absent.
    pub baseline_hazard: Option<f64>,
    pub seed: u64,
}

impl Default for SimScenario {
    fn default() -> Self {
        SimScenario::new(2.0, vec![-0.5, -0.5, 0.5, 0.5], 0.1, 0.5)
    }
}

impl SimScenario {
    /// Four-marker design with beta = (-0.5, 0.5, 0.5, 0.5) for every marker,
    /// n = 1000 and measurements at 0, 0.2, ..., 2.
    pub fn new(sigma2: f64, alpha: Vec<f64>, rho_between: f64, rho_within: f64) -> Self {
        let k = alpha.len();
        SimScenario {
            n: 1000,
            n_markers: k,
            beta: vec![vec![-0.5, 0.5, 0.5, 0.5]; k],
            alpha,
            sigma2: vec![sigma2; k],
            rho_between,
            rho_within,
            grid: (0..=10).map(|i| i as f64 * 0.2).collect(),
            censoring_target: 0.70,
            horizon: 2.0,
            censoring_upper: 2.5,
            baseline_hazard: None,
            seed: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.n_markers;
        if self.n == 0 || k == 0 {
            return Err(Error::InvalidArgument("scenario needs at least one subject and one marker".into()));
        }
        if self.beta.len() != k || self.alpha.len() != k || self.sigma2.len() != k {
            return Err(Error::InvalidArgument(format!(
                "beta, alpha and sigma2 must have one entry per marker ({k})"
            )));
        }
        if self.beta.iter().any(|b| b.len() != N_FIXED) {
            return Err(Error::InvalidArgument(format!("each beta needs {N_FIXED} entries")));
        }
        let finite = self
            .beta
            .iter()
            .flatten()
            .chain(&self.alpha)
            .chain(&self.sigma2)
            .all(|v| v.is_finite());
        if !finite || self.sigma2.iter().any(|s| *s < 0.0) {
            return Err(Error::InvalidArgument("scenario parameters must be finite, sigma2 >= 0".into()));
        }
        if self.grid.is_empty() || self.grid[0] < 0.0 || self.grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidArgument("measurement grid must be non-negative and strictly increasing".into()));
        }
        if !(self.horizon > 0.0) || !(self.censoring_upper > 0.0) {
            return Err(Error::InvalidArgument("censoring horizons must be positive".into()));
        }
        if !(self.censoring_target > 0.0 && self.censoring_target < 1.0) {
            return Err(Error::InvalidArgument("censoring target must be in (0,1)".into()));
        }
        if let Some(h) = self.baseline_hazard {
            if !(h > 0.0) || !h.is_finite() {
                return Err(Error::InvalidArgument("baseline hazard must be positive".into()));
            }
        }
        build_sigma(k, N_RANDOM, self.rho_within, self.rho_between)?;
        Ok(())
    }

    pub fn sigma(&self) -> Result<DMatrix<f64>> {
        build_sigma(self.n_markers, N_RANDOM, self.rho_within, self.rho_between)
    }

    /// Probability that the marginal event time precedes censoring.
    pub fn event_probability(&self, lambda: f64) -> f64 {
        let a = self.horizon.min(self.censoring_upper);
        let h = self.censoring_upper;
        let surv = (-lambda * a).exp();
        // int_0^a lambda e^{-lambda t} (1 - t/h) dt
        (1.0 - surv) - (1.0 - surv * (1.0 + lambda * a)) / (lambda * h)
    }

    /// Constant baseline hazard, either given or found by bisection so that
    /// the expected censored fraction matches the target.
    pub fn calibrated_hazard(&self) -> Result<f64> {
        if let Some(h) = self.baseline_hazard {
            return Ok(h);
        }
        let target = 1.0 - self.censoring_target;
        let (mut lo, mut hi) = (1e-8, 1.0);
        while self.event_probability(hi) < target {
            hi *= 2.0;
            if hi > 1e8 {
                return Err(Error::InvalidArgument(format!(
                    "censoring target {} is unreachable with this censoring distribution",
                    self.censoring_target
                )));
            }
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.event_probability(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    pub fn marker_specs(&self) -> Vec<MarkerSpec> {
        (1..=self.n_markers as u32)
            .map(|k| MarkerSpec::linear(k, format!("y{k}"), &COVARIATES))
            .collect()
    }
}

/// Block covariance for `k` markers with `p` random effects each: unit
/// variances, within-marker correlation `rho_within` and every
/// between-marker entry equal to `rho_between`.
pub fn build_sigma(k: usize, p: usize, rho_within: f64, rho_between: f64) -> Result<DMatrix<f64>> {
    if k == 0 || p == 0 {
        return Err(Error::InvalidArgument("need at least one marker and one random effect".into()));
    }
    let d = k * p;
    let mut s = DMatrix::from_fn(d, d, |i, j| {
        if i == j {
            1.0
        } else if i / p == j / p {
            rho_within
        } else {
            rho_between
        }
    });
    symmetrize(&mut s);
    cholesky(&s, "random-effects covariance")?;
    Ok(s)
}

/// Subject-level latent quantities.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent {
    pub covariates: Vec<[f64; 2]>,
    /// Stacked random effects (b0, b1 for marker 1, then marker 2, ...).
    pub b: Vec<DVector<f64>>,
}

impl Latent {
    /// True marker trajectory of subject `i`, marker `k` (0-based), at `t`.
    pub fn eta(&self, scenario: &SimScenario, i: usize, k: usize, t: f64) -> f64 {
        let beta = &scenario.beta[k];
        let [x1, x2] = self.covariates[i];
        let b = &self.b[i];
        beta[0] + beta[1] * t + beta[2] * x1 + beta[3] * x2 + b[N_RANDOM * k] + b[N_RANDOM * k + 1] * t
    }

    fn log_hazard(&self, scenario: &SimScenario, i: usize, t: f64) -> f64 {
        (0..scenario.n_markers)
            .map(|k| scenario.alpha[k] * self.eta(scenario, i, k, t))
            .sum()
    }
}

pub fn subject_id(i: usize) -> String {
    format!("s{:04}", i + 1)
}

/// Covariates, random effects and complete-grid observations. Rows are not
/// yet truncated at the survival time.
pub fn simulate_markers<R: Rng + ?Sized>(
    scenario: &SimScenario,
    rng: &mut R,
) -> Result<(Vec<LongitudinalObservation>, Latent)> {
    scenario.validate()?;
    let l = cholesky(&scenario.sigma()?, "random-effects covariance")?;
    let zero = DVector::zeros(scenario.n_markers * N_RANDOM);
    let mut covariates = Vec::with_capacity(scenario.n);
    let mut b = Vec::with_capacity(scenario.n);
    for _ in 0..scenario.n {
        let x1 = if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 };
        let z: f64 = StandardNormal.sample(rng);
        covariates.push([x1, 0.5 * z]);
        b.push(mvn_from_cholesky(&zero, &l, rng));
    }
    let latent = Latent { covariates, b };
    let mut rows = Vec::with_capacity(scenario.n * scenario.n_markers * scenario.grid.len());
    for i in 0..scenario.n {
        let id = subject_id(i);
        for k in 0..scenario.n_markers {
            let sd = scenario.sigma2[k].sqrt();
            for &t in &scenario.grid {
                let e: f64 = StandardNormal.sample(rng);
                rows.push(LongitudinalObservation {
                    subject: id.clone(),
                    marker: k as u32 + 1,
                    time: t,
                    value: latent.eta(scenario, i, k, t) + sd * e,
                });
            }
        }
    }
    Ok((rows, latent))
}

/// Permutational assignment of event and censoring times. Marginal times are
/// `min(T0, C)` with `T0 ~ Exp(lambda0)` and `C = min(U(0, upper), horizon)`;
/// in increasing order each event time goes to a remaining subject drawn with
/// probability proportional to its hazard at that time, and each censoring
/// time to a remaining subject drawn uniformly.
pub fn simulate_event_times<R: Rng + ?Sized>(
    scenario: &SimScenario,
    latent: &Latent,
    rng: &mut R,
) -> Result<Vec<SurvivalRecord>> {
    scenario.validate()?;
    let n = scenario.n;
    if latent.b.len() != n || latent.covariates.len() != n {
        return Err(Error::InvalidArgument("latent quantities do not match the scenario size".into()));
    }
    let lambda = scenario.calibrated_hazard()?;
    let mut times: Vec<(f64, bool)> = (0..n)
        .map(|_| {
            let t0 = -(1.0 - rng.random::<f64>()).ln() / lambda;
            let u = scenario.censoring_upper * (1.0 - rng.random::<f64>());
            let c = u.min(scenario.horizon);
            if t0 < c {
                (t0, true)
            } else {
                (c, false)
            }
        })
        .collect();
    times.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut remaining: Vec<usize> = (0..n).collect();
    let mut assigned: Vec<Option<(f64, bool)>> = vec![None; n];
    let mut weights = Vec::with_capacity(n);
    for &(t, event) in &times {
        let pos = if event {
            weights.clear();
            weights.extend(remaining.iter().map(|&i| latent.log_hazard(scenario, i, t)));
            let max = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return Err(Error::NonFinite("simulated hazard".into()));
            }
            let mut total = 0.0;
            for w in weights.iter_mut() {
                *w = (*w - max).exp();
                total += *w;
            }
            let mut u = rng.random::<f64>() * total;
            let mut pick = weights.len() - 1;
            for (j, w) in weights.iter().enumerate() {
                if u < *w {
                    pick = j;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.random_range(0..remaining.len())
        };
        let i = remaining.swap_remove(pos);
        assigned[i] = Some((t, event));
    }

    Ok(assigned
        .into_iter()
        .enumerate()
        .map(|(i, a)| {
            let (time, event) = a.expect("every subject receives a time");
            SurvivalRecord {
                subject: subject_id(i),
                time,
                cause: u32::from(event),
                covariates: latent.covariates[i].to_vec(),
            }
        })
        .collect())
}

/// Ground truth behind a simulated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    pub scenario: SimScenario,
    pub baseline_hazard: f64,
    pub subjects: Vec<String>,
    /// Per subject, per marker (b0, b1).
    pub random_effects: Vec<Vec<Vec<f64>>>,
}

impl SimTruth {
    /// Random effects ordered like the subjects of `data`.
    pub fn random_effects_for(&self, data: &Dataset) -> Result<Vec<Vec<Vec<f64>>>> {
        let index: std::collections::HashMap<&str, usize> =
            self.subjects.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        data.survival()
            .iter()
            .map(|rec| {
                index
                    .get(rec.subject.as_str())
                    .map(|&i| self.random_effects[i].clone())
                    .ok_or_else(|| Error::Validation(format!("subject {} is not in the truth file", rec.subject)))
            })
            .collect()
    }

    pub fn to_writer<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }

    pub fn from_reader<R: Read>(input: R) -> Result<Self> {
        let truth: SimTruth = serde_json::from_reader(input)?;
        truth.scenario.validate()?;
        let k = truth.scenario.n_markers;
        if truth.subjects.len() != truth.random_effects.len()
            || truth.random_effects.iter().any(|b| b.len() != k || b.iter().any(|v| v.len() != N_RANDOM))
        {
            return Err(Error::Validation("truth file has inconsistent random effects".into()));
        }
        Ok(truth)
    }
}

#[derive(Clone, Debug)]
pub struct SimulatedData {
    pub data: Dataset,
    pub truth: SimTruth,
    pub latent: Latent,
}

/// Simulates one dataset from `scenario.seed`.
pub fn simulate_dataset(scenario: &SimScenario) -> Result<SimulatedData> {
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let (rows, latent) = simulate_markers(scenario, &mut rng)?;
    let survival = simulate_event_times(scenario, &latent, &mut rng)?;
    let per_subject = scenario.n_markers * scenario.grid.len();
    let rows = rows
        .into_iter()
        .enumerate()
        .filter(|(j, r)| r.time <= survival[j / per_subject].time)
        .map(|(_, r)| r)
        .collect();
    let data = Dataset::new(
        rows,
        survival,
        scenario.marker_specs(),
        COVARIATES.iter().map(|c| c.to_string()).collect(),
    )?;
    let truth = SimTruth {
        scenario: scenario.clone(),
        baseline_hazard: scenario.calibrated_hazard()?,
        subjects: (0..scenario.n).map(subject_id).collect(),
        random_effects: latent
            .b
            .iter()
            .map(|b| b.as_slice().chunks(N_RANDOM).map(|c| c.to_vec()).collect())
            .collect(),
    };
    Ok(SimulatedData { data, truth, latent })
}

/// Replicate `r` uses seed `scenario.seed + r`.
pub fn simulate_replicate(scenario: &SimScenario, replicate: u64) -> Result<SimulatedData> {
    let mut s = scenario.clone();
    s.seed = scenario.seed.wrapping_add(replicate);
    simulate_dataset(&s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize, alpha: Vec<f64>) -> SimScenario {
        let mut s = SimScenario::new(1.0, alpha, 0.1, 0.5);
        s.n = n;
        s
    }

    #[test]
    fn sigma_blocks() {
        let one = build_sigma(1, 2, 0.5, 0.1).unwrap();
        assert_eq!(one, DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]));
        let s = build_sigma(4, 2, 0.5, 0.1).unwrap();
        assert_eq!(s.nrows(), 8);
        assert_eq!(s[(0, 1)], 0.5);
        assert_eq!(s[(0, 2)], 0.1);
        assert_eq!(s[(3, 6)], 0.1);
        assert_eq!(s[(6, 7)], 0.5);
        for v in s.iter() {
            assert!([1.0, 0.5, 0.1].contains(v));
        }
    }

    #[test]
    fn strong_correlation_still_spd() {
        let s = build_sigma(4, 2, 0.8, 0.6).unwrap();
        let min = s.symmetric_eigenvalues().min();
        assert!(min > 0.0);
    }

    #[test]
    fn incompatible_correlations_rejected() {
        let err = build_sigma(4, 2, 0.2, 0.9).unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite { minor, .. } if minor > 2));
    }

    #[test]
    fn calibration_hits_expected_event_rate() {
        let s = SimScenario::default();
        let lambda = s.calibrated_hazard().unwrap();
        assert!((s.event_probability(lambda) - 0.30).abs() < 1e-12);
        // Monte-Carlo check of the closed form.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = 200_000;
        let hits = (0..m)
            .filter(|_| {
                let t0 = -(1.0 - rng.random::<f64>()).ln() / lambda;
                let c = (2.5 * rng.random::<f64>()).min(2.0);
                t0 < c
            })
            .count();
        assert!((hits as f64 / m as f64 - 0.30).abs() < 0.005);
    }

    #[test]
    fn noise_free_rows_equal_eta() {
        let mut s = small(20, vec![0.3, -0.3]);
        s.sigma2 = vec![0.0, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (rows, latent) = simulate_markers(&s, &mut rng).unwrap();
        assert_eq!(rows.len(), 20 * 2 * 11);
        for r in rows {
            let i: usize = r.subject[1..].parse::<usize>().unwrap() - 1;
            let eta = latent.eta(&s, i, r.marker as usize - 1, r.time);
            assert_eq!(r.value, eta);
        }
    }

    #[test]
    fn random_effect_covariance_recovered() {
        let s = small(10_000, vec![0.0; 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (_, latent) = simulate_markers(&s, &mut rng).unwrap();
        let d = 8;
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for b in &latent.b {
            cov += b * b.transpose();
        }
        cov /= latent.b.len() as f64;
        let sigma = s.sigma().unwrap();
        let rel = (&cov - &sigma).norm() / sigma.norm();
        assert!(rel < 0.05, "relative error {rel}");
    }

    #[test]
    fn baseline_variance_decomposition() {
        let mut s = small(20_000, vec![0.0]);
        s.beta = vec![vec![0.0, 0.5, 0.0, 0.0]];
        s.sigma2 = vec![2.0];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (rows, _) = simulate_markers(&s, &mut rng).unwrap();
        let y0: Vec<f64> = rows.iter().filter(|r| r.time == 0.0).map(|r| r.value).collect();
        let mean = y0.iter().sum::<f64>() / y0.len() as f64;
        let var = y0.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (y0.len() - 1) as f64;
        assert!((var - 3.0).abs() < 0.1, "variance {var}");
    }

    #[test]
    fn deterministic_under_seed() {
        let s = small(50, vec![0.5, -0.5]);
        let a = simulate_dataset(&s).unwrap();
        let b = simulate_dataset(&s).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.truth, b.truth);
        let c = simulate_replicate(&s, 1).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn rows_truncated_at_survival_time() {
        let s = small(200, vec![0.5, -0.5]);
        let sim = simulate_dataset(&s).unwrap();
        let surv = sim.data.survival();
        for r in sim.data.longitudinal() {
            let i = sim.data.subject_index(&r.subject).unwrap();
            assert!(r.time <= surv[i].time);
        }
    }

    /// Kolmogorov-Smirnov distance between a sample and a distribution that
    /// is continuous below `atom` and puts its remaining mass at `atom`.
    fn ks(sample: &mut [f64], cdf: impl Fn(f64) -> f64, atom: f64) -> f64 {
        sample.sort_by(f64::total_cmp);
        let n = sample.len() as f64;
        let below = sample.iter().filter(|t| **t < atom).count();
        let d = sample[..below]
            .iter()
            .enumerate()
            .map(|(j, &x)| {
                let f = cdf(x);
                (f - j as f64 / n).abs().max(((j + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        d.max((below as f64 / n - cdf(atom)).abs())
    }

    #[test]
    fn null_association_gives_exchangeable_assignment() {
        let s = small(400, vec![0.0, 0.0]);
        let lambda = s.calibrated_hazard().unwrap();
        let cdf = |t: f64| 1.0 - (-lambda * t).exp() * (1.0 - t / s.censoring_upper);
        let mut rejections = 0;
        for rep in 0..20 {
            let sim = simulate_replicate(&s, rep).unwrap();
            // Times of subjects with a high first random intercept.
            let mut sel: Vec<f64> = sim
                .data
                .survival()
                .iter()
                .zip(&sim.latent.b)
                .filter(|(_, b)| b[0] > 0.0)
                .map(|(r, _)| r.time)
                .collect();
            let crit = 1.628 / (sel.len() as f64).sqrt();
            if ks(&mut sel, cdf, s.horizon) > crit {
                rejections += 1;
            }
        }
        assert!(rejections <= 2, "{rejections} rejections out of 20");
    }

    #[test]
    fn strong_slope_association_shortens_times() {
        let mut s = small(1000, vec![2.0, 0.0]);
        s.censoring_target = 0.5;
        let sim = simulate_dataset(&s).unwrap();
        let mut pairs: Vec<(f64, f64)> = sim
            .latent
            .b
            .iter()
            .zip(sim.data.survival())
            .map(|(b, r)| (b[1], r.time))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let dec = pairs.len() / 10;
        let mean = |p: &[(f64, f64)]| p.iter().map(|v| v.1).sum::<f64>() / p.len() as f64;
        let low = mean(&pairs[..dec]);
        let high = mean(&pairs[pairs.len() - dec..]);
        assert!(high < low, "top decile {high} vs bottom {low}");
    }

    #[test]
    fn truth_round_trip_and_subset_lookup() {
        let s = small(30, vec![0.5, -0.5]);
        let sim = simulate_dataset(&s).unwrap();
        let mut buf = Vec::new();
        sim.truth.to_writer(&mut buf).unwrap();
        let back = SimTruth::from_reader(buf.as_slice()).unwrap();
        assert_eq!(back, sim.truth);
        let sub = sim.data.subset(&[4, 2]).unwrap();
        let b = back.random_effects_for(&sub).unwrap();
        // subsets keep the original subject order
        assert_eq!(b[1], sim.truth.random_effects[4]);
        assert_eq!(b[0][1][1], sim.latent.b[2][3]);
    }

    #[test]
    fn invalid_scenarios_rejected() {
        let mut s = SimScenario::default();
        s.grid = vec![0.0, 0.5, 0.5];
        assert!(s.validate().is_err());
        let mut s = SimScenario::default();
        s.alpha.pop();
        assert!(s.validate().is_err());
        let s = SimScenario::new(1.0, vec![0.0; 4], 0.9, 0.2);
        assert!(matches!(s.validate(), Err(Error::NotPositiveDefinite { .. })));
    }
}
