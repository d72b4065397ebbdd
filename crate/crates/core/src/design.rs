//! Marker model specifications and design vectors.
//!
//! Every marker trajectory is a polynomial in time whose coefficients are
//! linear in the fixed and random effects:
//!
//! ```text
//! eta(t) = x(t)' beta + z(t)' b
//! ```
//!
//! Fixed-effect terms may also carry time-invariant covariates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FixedTerm {
    Intercept,
    /// `t^degree`, degree >= 1.
    Time { degree: u32 },
    /// A named baseline covariate (constant in time).
    Covariate { name: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RandomTerm {
    Intercept,
    Time { degree: u32 },
}

impl RandomTerm {
    fn power(&self) -> usize {
        match self {
            RandomTerm::Intercept => 0,
            RandomTerm::Time { degree } => *degree as usize,
        }
    }
}

/// Which functional of the marker trajectory enters the hazard.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Association {
    CurrentValue,
    CurrentSlope,
    Both,
}

impl Association {
    pub fn n_components(self) -> usize {
        match self {
            Association::Both => 2,
            _ => 1,
        }
    }

    /// Labels of the association components in coefficient order.
    pub fn labels(self) -> &'static [&'static str] {
        match self {
            Association::CurrentValue => &["value"],
            Association::CurrentSlope => &["slope"],
            Association::Both => &["value", "slope"],
        }
    }

    /// Association functionals `g(t)` of a trajectory, in coefficient order.
    pub fn components(self, value: f64, slope: f64) -> ([f64; 2], usize) {
        match self {
            Association::CurrentValue => ([value, 0.0], 1),
            Association::CurrentSlope => ([slope, 0.0], 1),
            Association::Both => ([value, slope], 2),
        }
    }

    /// `sum_c alpha_c g_c(t)`.
    pub fn linear_predictor(self, alpha: &[f64], value: f64, slope: f64) -> f64 {
        match self {
            Association::CurrentValue => alpha[0] * value,
            Association::CurrentSlope => alpha[0] * slope,
            Association::Both => alpha[0] * value + alpha[1] * slope,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkerSpec {
    pub marker: u32,
    #[serde(default)]
    pub name: String,
    pub fixed: Vec<FixedTerm>,
    pub random: Vec<RandomTerm>,
    pub association: Association,
}

impl MarkerSpec {
    /// Random intercept and slope model with fixed intercept, slope and the
    /// given covariates, associated through the current value.
    pub fn linear(marker: u32, name: impl Into<String>, covariates: &[&str]) -> Self {
        Self::polynomial(marker, name, 1, covariates)
    }

    /// Fixed and random polynomial in time up to `degree`.
    pub fn polynomial(marker: u32, name: impl Into<String>, degree: u32, covariates: &[&str]) -> Self {
        let mut fixed = vec![FixedTerm::Intercept];
        let mut random = vec![RandomTerm::Intercept];
        for d in 1..=degree {
            fixed.push(FixedTerm::Time { degree: d });
            random.push(RandomTerm::Time { degree: d });
        }
        fixed.extend(covariates.iter().map(|c| FixedTerm::Covariate {
            name: c.to_string(),
        }));
        MarkerSpec {
            marker,
            name: name.into(),
            fixed,
            random,
            association: Association::CurrentValue,
        }
    }

    pub fn with_association(mut self, association: Association) -> Self {
        self.association = association;
        self
    }

    pub fn n_fixed(&self) -> usize {
        self.fixed.len()
    }

    pub fn n_random(&self) -> usize {
        self.random.len()
    }

    pub fn covariate_names(&self) -> impl Iterator<Item = &str> {
        self.fixed.iter().filter_map(|t| match t {
            FixedTerm::Covariate { name } => Some(name.as_str()),
            _ => None,
        })
    }

    fn max_degree(&self) -> usize {
        let f = self.fixed.iter().map(|t| match t {
            FixedTerm::Time { degree } => *degree as usize,
            _ => 0,
        });
        let r = self.random.iter().map(RandomTerm::power);
        f.chain(r).max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.random.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "marker {} needs at least one random-effect term",
                self.marker
            )));
        }
        let zero_degree = self
            .fixed
            .iter()
            .any(|t| matches!(t, FixedTerm::Time { degree: 0 }))
            || self.random.iter().any(|t| matches!(t, RandomTerm::Time { degree: 0 }));
        if zero_degree {
            return Err(Error::InvalidArgument(
                "time terms must have degree >= 1 (use the intercept term)".into(),
            ));
        }
        for (i, a) in self.fixed.iter().enumerate() {
            if self.fixed[..i].contains(a) {
                return Err(Error::InvalidArgument(format!(
                    "marker {}: duplicated fixed term {a:?}",
                    self.marker
                )));
            }
        }
        for (i, a) in self.random.iter().enumerate() {
            if self.random[..i].contains(a) {
                return Err(Error::InvalidArgument(format!(
                    "marker {}: duplicated random term {a:?}",
                    self.marker
                )));
            }
        }
        Ok(())
    }
}

/// Design vectors at one time point.
#[derive(Clone, Debug, PartialEq)]
pub struct DesignRow {
    pub x: Vec<f64>,
    pub dx_dt: Vec<f64>,
    pub z: Vec<f64>,
    pub dz_dt: Vec<f64>,
}

fn power_and_derivative(t: f64, p: usize) -> (f64, f64) {
    match p {
        0 => (1.0, 0.0),
        _ => (t.powi(p as i32), p as f64 * t.powi(p as i32 - 1)),
    }
}

/// Design vectors of `spec` at `time`. `covariates` holds the values of the
/// spec's covariate terms, in the order they appear among the fixed terms.
pub fn design_row(spec: &MarkerSpec, time: f64, covariates: &[f64]) -> Result<DesignRow> {
    if !(time >= 0.0) || !time.is_finite() {
        return Err(Error::InvalidArgument(format!("design time must be >= 0, got {time}")));
    }
    let n_cov = spec.covariate_names().count();
    if covariates.len() != n_cov {
        return Err(Error::InvalidArgument(format!(
            "marker {} expects {n_cov} covariates, got {}",
            spec.marker,
            covariates.len()
        )));
    }
    let mut cov = covariates.iter();
    let mut x = Vec::with_capacity(spec.n_fixed());
    let mut dx = Vec::with_capacity(spec.n_fixed());
    for term in &spec.fixed {
        let (v, d) = match term {
            FixedTerm::Intercept => (1.0, 0.0),
            FixedTerm::Time { degree } => power_and_derivative(time, *degree as usize),
            FixedTerm::Covariate { .. } => (*cov.next().expect("counted above"), 0.0),
        };
        x.push(v);
        dx.push(d);
    }
    let (z, dz) = spec
        .random
        .iter()
        .map(|t| power_and_derivative(time, t.power()))
        .unzip();
    Ok(DesignRow {
        x,
        dx_dt: dx,
        z,
        dz_dt: dz,
    })
}

/// Polynomial trajectory `eta(t) = sum_d coeffs[d] t^d`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub coeffs: Vec<f64>,
}

impl Trajectory {
    pub fn value(&self, t: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * t + c)
    }

    pub fn slope(&self, t: f64) -> f64 {
        let n = self.coeffs.len();
        if n < 2 {
            return 0.0;
        }
        let mut acc = 0.0;
        for d in (1..n).rev() {
            acc = acc * t + d as f64 * self.coeffs[d];
        }
        acc
    }

    pub fn value_and_slope(&self, t: f64) -> (f64, f64) {
        (self.value(t), self.slope(t))
    }
}

/// A marker spec bound to a dataset's covariate layout.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkerDesign {
    pub spec: MarkerSpec,
    covariate_index: Vec<usize>,
    n_covariates: usize,
    degree: usize,
}

impl MarkerDesign {
    pub fn new(spec: &MarkerSpec, covariate_names: &[String]) -> Result<Self> {
        spec.validate()?;
        let covariate_index = spec
            .covariate_names()
            .map(|name| {
                covariate_names.iter().position(|c| c == name).ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "marker {} uses unknown covariate '{name}'",
                        spec.marker
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MarkerDesign {
            degree: spec.max_degree(),
            spec: spec.clone(),
            covariate_index,
            n_covariates: covariate_names.len(),
        })
    }

    pub fn n_fixed(&self) -> usize {
        self.spec.n_fixed()
    }

    pub fn n_random(&self) -> usize {
        self.spec.n_random()
    }

    pub fn association(&self) -> Association {
        self.spec.association
    }

    fn check_covariates(&self, covariates: &[f64]) -> Result<()> {
        if covariates.len() != self.n_covariates {
            return Err(Error::InvalidArgument(format!(
                "expected {} covariates, got {}",
                self.n_covariates,
                covariates.len()
            )));
        }
        Ok(())
    }

    /// Design vectors from a full dataset covariate vector.
    pub fn row(&self, time: f64, covariates: &[f64]) -> Result<DesignRow> {
        self.check_covariates(covariates)?;
        let own: Vec<f64> = self.covariate_index.iter().map(|&i| covariates[i]).collect();
        design_row(&self.spec, time, &own)
    }

    /// For every fixed term, the power of `t` it multiplies and its constant
    /// factor (1, or the covariate value).
    pub fn fixed_polynomial_map(&self, covariates: &[f64]) -> Result<Vec<(usize, f64)>> {
        self.check_covariates(covariates)?;
        let mut cov = self.covariate_index.iter();
        Ok(self
            .spec
            .fixed
            .iter()
            .map(|t| match t {
                FixedTerm::Intercept => (0, 1.0),
                FixedTerm::Time { degree } => (*degree as usize, 1.0),
                FixedTerm::Covariate { .. } => (0, covariates[*cov.next().expect("bound")]),
            })
            .collect())
    }

    pub fn random_powers(&self) -> Vec<usize> {
        self.spec.random.iter().map(RandomTerm::power).collect()
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    /// Subject-specific trajectory for fixed effects `beta` and random effects `b`.
    pub fn trajectory(&self, beta: &[f64], b: &[f64], covariates: &[f64]) -> Result<Trajectory> {
        if beta.len() != self.n_fixed() || b.len() != self.n_random() {
            return Err(Error::InvalidArgument(format!(
                "marker {}: expected {} fixed and {} random effects, got {} and {}",
                self.spec.marker,
                self.n_fixed(),
                self.n_random(),
                beta.len(),
                b.len()
            )));
        }
        let map = self.fixed_polynomial_map(covariates)?;
        Ok(trajectory_from_map(&map, &self.random_powers(), self.degree, beta, b))
    }
}

pub(crate) fn trajectory_from_map(
    fixed_map: &[(usize, f64)],
    random_powers: &[usize],
    degree: usize,
    beta: &[f64],
    b: &[f64],
) -> Trajectory {
    let mut coeffs = vec![0.0; degree + 1];
    for (&(p, m), &bj) in fixed_map.iter().zip(beta) {
        coeffs[p] += m * bj;
    }
    for (&p, &bj) in random_powers.iter().zip(b) {
        coeffs[p] += bj;
    }
    Trajectory { coeffs }
}
