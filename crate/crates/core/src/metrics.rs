//! Inverse-probability-of-censoring-weighted (IPCW) estimators of the
//! time-dependent AUC and Brier score for predictions of an event in
//! `(s, s+t]`, with influence-function standard errors.
//!
//! Among subjects still at risk at the landmark `s`, with `u = T - s`:
//!
//! * a case has the event of interest at `u <= t` and weight `1/G(u-)`;
//! * a control is event-free at `t` and has weight `1/G(t)`;
//! * a failure from another cause at `u <= t` is a control with weight `1/G(u-)`;
//! * a subject censored at `u <= t` has weight 0,
//!
//! where `G` is the Kaplan-Meier estimate of the censoring survival among the
//! at-risk subjects.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricInput {
    pub predictions: Vec<f64>,
    pub times: Vec<f64>,
    /// 0 for censored, otherwise the event cause.
    pub causes: Vec<u32>,
    pub landmark: f64,
    pub window: f64,
    pub event_of_interest: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricEstimate {
    pub value: f64,
    pub se: f64,
    pub n_at_risk: usize,
    pub n_cases: usize,
    /// Influence-function values of the at-risk subjects.
    #[serde(skip)]
    pub influence: Vec<f64>,
}

/// Kaplan-Meier step function.
#[derive(Clone, Debug, PartialEq)]
pub struct KaplanMeier {
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
}

impl KaplanMeier {
    /// Estimate from times and event indicators (`true` = the counted event).
    pub fn fit(times: &[f64], events: &[bool]) -> Self {
        let mut order: Vec<usize> = (0..times.len()).collect();
        order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
        let mut at_risk = times.len();
        let mut s = 1.0;
        let mut out_t = Vec::new();
        let mut out_s = Vec::new();
        let mut k = 0;
        while k < order.len() {
            let t = times[order[k]];
            let mut d = 0;
            let mut m = 0;
            while k + m < order.len() && times[order[k + m]] == t {
                d += events[order[k + m]] as usize;
                m += 1;
            }
            if d > 0 {
                s *= 1.0 - d as f64 / at_risk as f64;
                out_t.push(t);
                out_s.push(s);
            }
            at_risk -= m;
            k += m;
        }
        KaplanMeier {
            times: out_t,
            survival: out_s,
        }
    }

    /// `S(t)`, right-continuous.
    pub fn at(&self, t: f64) -> f64 {
        let n = self.times.partition_point(|&x| x <= t);
        if n == 0 {
            1.0
        } else {
            self.survival[n - 1]
        }
    }

    /// `S(t-)`.
    pub fn before(&self, t: f64) -> f64 {
        let n = self.times.partition_point(|&x| x < t);
        if n == 0 {
            1.0
        } else {
            self.survival[n - 1]
        }
    }
}

/// Weights, case indicators and KM influence terms for the at-risk sample.
struct Weighted {
    pred: Vec<f64>,
    case: Vec<bool>,
    weight: Vec<f64>,
    /// Time at which the subject's weight evaluates `G`, and whether it is a
    /// left limit.
    eval: Vec<(f64, bool)>,
    u: Vec<f64>,
    censored: Vec<bool>,
    /// Distinct censoring times with `dLambda_C / ybar` accumulated.
    cens_times: Vec<f64>,
    cens_cum: Vec<f64>,
}

impl Weighted {
    fn new(input: &MetricInput) -> Result<Self> {
        let n = input.predictions.len();
        if input.times.len() != n || input.causes.len() != n {
            return Err(Error::InvalidArgument("predictions, times and causes differ in length".into()));
        }
        if !(input.landmark >= 0.0) || !(input.window > 0.0) {
            return Err(Error::InvalidArgument("need landmark >= 0 and window > 0".into()));
        }
        if input.predictions.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument("predictions must lie in [0, 1]".into()));
        }
        let keep: Vec<usize> = (0..n).filter(|&i| input.times[i] > input.landmark).collect();
        if keep.is_empty() {
            return Err(Error::InvalidArgument("no subject at risk at the landmark".into()));
        }
        let u: Vec<f64> = keep.iter().map(|&i| input.times[i] - input.landmark).collect();
        let censored: Vec<bool> = keep.iter().map(|&i| input.causes[i] == 0).collect();
        let km = KaplanMeier::fit(&u, &censored);
        let t = input.window;
        let mut weight = Vec::with_capacity(keep.len());
        let mut case = Vec::with_capacity(keep.len());
        let mut eval = Vec::with_capacity(keep.len());
        for (j, &i) in keep.iter().enumerate() {
            let (w_at, left) = if u[j] > t {
                (t, false)
            } else if censored[j] {
                (f64::NAN, false)
            } else {
                (u[j], true)
            };
            let w = if w_at.is_nan() {
                0.0
            } else {
                let g = if left { km.before(w_at) } else { km.at(w_at) };
                if !(g > 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "censoring survival estimate is 0 at {w_at}; weights undefined"
                    )));
                }
                1.0 / g
            };
            weight.push(w);
            case.push(u[j] <= t && input.causes[i] == input.event_of_interest && input.causes[i] != 0);
            eval.push((w_at, left));
        }

        // Cumulative censoring hazard divided by the at-risk fraction.
        let m = u.len() as f64;
        let mut order: Vec<usize> = (0..u.len()).collect();
        order.sort_by(|&a, &b| u[a].total_cmp(&u[b]));
        let mut cens_times = Vec::new();
        let mut cens_cum = Vec::new();
        let mut acc = 0.0;
        let mut at_risk = u.len();
        let mut k = 0;
        while k < order.len() {
            let v = u[order[k]];
            let mut c = 0;
            let mut r = 0;
            while k + r < order.len() && u[order[k + r]] == v {
                c += censored[order[k + r]] as usize;
                r += 1;
            }
            if c > 0 {
                let y = at_risk as f64;
                acc += (c as f64 / y) / (y / m);
                cens_times.push(v);
                cens_cum.push(acc);
            }
            at_risk -= r;
            k += r;
        }

        Ok(Weighted {
            pred: keep.iter().map(|&i| input.predictions[i]).collect(),
            case,
            weight,
            eval,
            u,
            censored,
            cens_times,
            cens_cum,
        })
    }

    fn n(&self) -> usize {
        self.u.len()
    }

    /// Accumulated `dLambda_C / ybar` over `[0, v]` (or `[0, v)`).
    fn cum(&self, v: f64, left: bool) -> f64 {
        let n = if left {
            self.cens_times.partition_point(|&x| x < v)
        } else {
            self.cens_times.partition_point(|&x| x <= v)
        };
        if n == 0 {
            0.0
        } else {
            self.cens_cum[n - 1]
        }
    }

    /// Influence of subject k on `log(1/G)` at the evaluation point `(v, left)`:
    /// `int_0^v dM_k^C / ybar`.
    #[cfg(test)]
    fn psi(&self, k: usize, v: f64, left: bool) -> f64 {
        let n = self.n() as f64;
        let uk = self.u[k];
        let within = if left { uk < v } else { uk <= v };
        let mut out = 0.0;
        if self.censored[k] && within {
            let y = self.u.iter().filter(|&&x| x >= uk).count() as f64;
            out += n / y;
        }
        // Compensator over [0, min(u_k, v)] (u_k included when inside).
        let (end, end_left) = if within { (uk, false) } else { (v, left) };
        out - self.cum(end, end_left)
    }

    /// `sum_i c_i psi_k(eval_i) / n` for every k: the KM part of the
    /// influence of a weighted sum with coefficients `c_i` on the weights.
    fn km_term(&self, coef: &[f64]) -> Vec<f64> {
        let n = self.n();
        let mut out = vec![0.0; n];
        let active: Vec<usize> = (0..n).filter(|&i| coef[i] != 0.0 && self.weight[i] > 0.0).collect();
        // Number at risk at each u_k, precomputed.
        let mut sorted = self.u.clone();
        sorted.sort_by(f64::total_cmp);
        let at_risk: Vec<f64> = self
            .u
            .iter()
            .map(|&x| (n - sorted.partition_point(|&y| y < x)) as f64)
            .collect();
        for (k, o) in out.iter_mut().enumerate() {
            let uk = self.u[k];
            let mut acc = 0.0;
            for &i in &active {
                let (v, left) = self.eval[i];
                let within = if left { uk < v } else { uk <= v };
                let mut psi = 0.0;
                if self.censored[k] && within {
                    psi += n as f64 / at_risk[k];
                }
                let (end, end_left) = if within { (uk, false) } else { (v, left) };
                psi -= self.cum(end, end_left);
                acc += coef[i] * psi;
            }
            *o = acc / n as f64;
        }
        out
    }
}

fn se_from_influence(inf: &[f64]) -> f64 {
    let n = inf.len() as f64;
    (inf.iter().map(|v| v * v).sum::<f64>()).sqrt() / n
}

fn concordance(a: f64, b: f64) -> f64 {
    if a > b {
        1.0
    } else if a == b {
        0.5
    } else {
        0.0
    }
}

/// IPCW time-dependent AUC: weighted concordance over case/control pairs.
pub fn ipcw_auc(input: &MetricInput) -> Result<MetricEstimate> {
    let w = Weighted::new(input)?;
    auc_from(&w)
}

fn auc_from(w: &Weighted) -> Result<MetricEstimate> {
    let n = w.n();
    let cases: Vec<usize> = (0..n).filter(|&i| w.case[i] && w.weight[i] > 0.0).collect();
    let controls: Vec<usize> = (0..n).filter(|&i| !w.case[i] && w.weight[i] > 0.0).collect();
    if cases.is_empty() || controls.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "AUC needs cases and controls, got {} and {}",
            cases.len(),
            controls.len()
        )));
    }
    // Row/column sums of the pair kernels per subject.
    let mut num_part = vec![0.0; n];
    let mut den_part = vec![0.0; n];
    let mut num = 0.0;
    let mut den = 0.0;
    for &i in &cases {
        for &j in &controls {
            let ww = w.weight[i] * w.weight[j];
            let c = ww * concordance(w.pred[i], w.pred[j]);
            num += c;
            den += ww;
            num_part[i] += c;
            num_part[j] += c;
            den_part[i] += ww;
            den_part[j] += ww;
        }
    }
    let nf = n as f64;
    let auc = num / den;
    let den = den / (nf * nf);
    // Ratio of U-statistics: IF = (IF_num - AUC IF_den) / den, with the KM
    // contribution through the weights.
    let coef: Vec<f64> = (0..n).map(|i| (num_part[i] - auc * den_part[i]) / nf).collect();
    let km = w.km_term(&coef);
    let influence: Vec<f64> = (0..n)
        .map(|k| ((num_part[k] - auc * den_part[k]) / nf + km[k]) / den)
        .collect();
    Ok(MetricEstimate {
        value: auc,
        se: se_from_influence(&influence),
        n_at_risk: n,
        n_cases: cases.len(),
        influence,
    })
}

/// IPCW Brier score `(1/n) sum w_i (D_i - p_i)^2` over the at-risk sample.
pub fn ipcw_brier(input: &MetricInput) -> Result<MetricEstimate> {
    let w = Weighted::new(input)?;
    brier_from(&w)
}

fn brier_from(w: &Weighted) -> Result<MetricEstimate> {
    let n = w.n();
    let nf = n as f64;
    let terms: Vec<f64> = (0..n)
        .map(|i| w.weight[i] * ((w.case[i] as u8 as f64) - w.pred[i]).powi(2))
        .collect();
    let bs = terms.iter().sum::<f64>() / nf;
    let km = w.km_term(&terms);
    let influence: Vec<f64> = (0..n).map(|k| terms[k] - bs + km[k]).collect();
    Ok(MetricEstimate {
        value: bs,
        se: se_from_influence(&influence),
        n_at_risk: n,
        n_cases: w.case.iter().filter(|c| **c).count(),
        influence,
    })
}

/// Paired Wald comparison of two prediction rules on the same subjects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub first: f64,
    pub second: f64,
    pub difference: f64,
    pub se: f64,
    pub p_value: f64,
}

fn compare(a: &MetricEstimate, b: &MetricEstimate) -> Result<Comparison> {
    let diff = a.value - b.value;
    let inf: Vec<f64> = a.influence.iter().zip(&b.influence).map(|(x, y)| x - y).collect();
    let se = se_from_influence(&inf);
    let p_value = if diff == 0.0 {
        1.0
    } else if se == 0.0 {
        0.0
    } else {
        let z = (diff / se).abs();
        let normal = Normal::new(0.0, 1.0).map_err(|e| Error::NonFinite(e.to_string()))?;
        2.0 * (1.0 - normal.cdf(z))
    };
    Ok(Comparison {
        first: a.value,
        second: b.value,
        difference: diff,
        se,
        p_value,
    })
}

fn paired(input: &MetricInput, other: &[f64]) -> Result<(Weighted, Weighted)> {
    if other.len() != input.predictions.len() {
        return Err(Error::InvalidArgument("prediction vectors differ in length".into()));
    }
    let b = MetricInput {
        predictions: other.to_vec(),
        ..input.clone()
    };
    Ok((Weighted::new(input)?, Weighted::new(&b)?))
}

/// Compares the AUC of `input.predictions` against `other` on the same data.
pub fn compare_auc(input: &MetricInput, other: &[f64]) -> Result<Comparison> {
    let (a, b) = paired(input, other)?;
    compare(&auc_from(&a)?, &auc_from(&b)?)
}

/// Compares the Brier score of `input.predictions` against `other`.
pub fn compare_brier(input: &MetricInput, other: &[f64]) -> Result<Comparison> {
    let (a, b) = paired(input, other)?;
    compare(&brier_from(&a)?, &brier_from(&b)?)
}
