//! Random-effect prediction for one subject with the model parameters held
//! fixed.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::likelihood::{mvn_log_density, SubjectTerms};
use super::{JointModelParams, OneMarkerModel};
use crate::error::{Error, Result};
use crate::linalg::{cholesky, mvn_from_cholesky, spd_inverse, standard_normal_vector};

/// What the random-effect posterior conditions on besides the marker history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Conditioning {
    /// Marker history only.
    None,
    /// Event-free up to the landmark: `T* > s`.
    Survived { landmark: f64 },
    /// The observed survival outcome `(t, delta)`.
    Observed { time: f64, event: bool },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomEffectSettings {
    pub burn_in: usize,
    pub draws: usize,
    pub thin: usize,
    pub seed: u64,
}

impl Default for RandomEffectSettings {
    fn default() -> Self {
        RandomEffectSettings {
            burn_in: 200,
            draws: 500,
            thin: 1,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RandomEffectPrediction {
    pub draws: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    /// Post-burn-in acceptance rate (1 for exact Gaussian draws).
    pub acceptance: f64,
}

/// Draws from `b | history, conditioning, params`. Without survival
/// conditioning the posterior is Gaussian and sampled exactly (the mean is
/// returned in closed form); otherwise a random-walk chain is run, started at
/// the Gaussian conditional mean.
pub fn predict_random_effects(
    params: &JointModelParams,
    model: &OneMarkerModel,
    history: &[(f64, f64)],
    covariates: &[f64],
    conditioning: Conditioning,
    settings: &RandomEffectSettings,
) -> Result<RandomEffectPrediction> {
    if settings.draws == 0 || settings.thin == 0 {
        return Err(Error::InvalidArgument("need draws >= 1 and thin >= 1".into()));
    }
    let (horizon, event) = match conditioning {
        Conditioning::None => (0.0, false),
        Conditioning::Survived { landmark } => (landmark, false),
        Conditioning::Observed { time, event } => (time, event),
    };
    if !(horizon >= 0.0) {
        return Err(Error::InvalidArgument(format!("conditioning time must be >= 0, got {horizon}")));
    }
    let survival = !matches!(conditioning, Conditioning::None);
    if survival && history.iter().any(|&(t, _)| t > horizon) {
        return Err(Error::InvalidArgument("marker history extends past the conditioning time".into()));
    }
    let knots = if survival {
        Some(
            params
                .baseline
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("survival conditioning needs a joint model".into()))?,
        )
    } else {
        None
    };
    if params.beta.len() != model.design.n_fixed() || params.alpha.len() != if survival { model.n_alpha() } else { params.alpha.len() } {
        return Err(Error::InvalidArgument("parameters do not match the marker model".into()));
    }
    let terms = SubjectTerms::new(model, history, covariates, horizon, event, knots)?;
    let beta = DVector::from_column_slice(&params.beta);
    let (sigma_inv, logdet) = spd_inverse(&params.sigma, "random-effect covariance")?;
    let r0 = &terms.y - &terms.x * &beta;
    let ztz = terms.z.transpose() * &terms.z;
    let zr = terms.z.transpose() * &r0;
    let (cov, _) = spd_inverse(&(&sigma_inv + &ztz / params.sigma2), "random-effect conditional precision")?;
    let l = cholesky(&cov, "random-effect conditional covariance")?;
    let gmean = &cov * &zr / params.sigma2;
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);

    if !survival {
        let draws: Vec<Vec<f64>> = (0..settings.draws)
            .map(|_| mvn_from_cholesky(&gmean, &l, &mut rng).as_slice().to_vec())
            .collect();
        return Ok(RandomEffectPrediction {
            draws,
            mean: gmean.as_slice().to_vec(),
            acceptance: 1.0,
        });
    }

    let heights = &knots.expect("survival").heights;
    let gamma_lp = terms.gamma_lp(&params.gamma);
    let assoc = model.design.association();
    let mut ints = vec![0.0; heights.len()];
    let mut log_target = |b: &DVector<f64>| -> f64 {
        let traj = terms.trajectory(&params.beta, b.as_slice());
        let g_end = terms.hazard_integrals(&traj, &params.alpha, assoc, &mut ints);
        let long = -0.5 * (r0.norm_squared() - 2.0 * b.dot(&zr) + (b.transpose() * &ztz * b)[(0, 0)]) / params.sigma2;
        long + terms.survival_loglik(&ints, g_end, heights, gamma_lp) + mvn_log_density(b, &sigma_inv, logdet)
    };

    let p = gmean.len();
    let mut cur = gmean.clone();
    let mut cur_lp = log_target(&cur);
    if !cur_lp.is_finite() {
        return Err(Error::NonFinite("random-effect target density".into()));
    }
    let mut log_scale = (2.38 / (p as f64).sqrt()).ln();
    let total = settings.burn_in + settings.draws * settings.thin;
    let mut draws = Vec::with_capacity(settings.draws);
    let mut mean = vec![0.0; p];
    let mut accepted = 0usize;
    for iter in 0..total {
        let prop = &cur + (&l * standard_normal_vector(p, &mut rng)) * log_scale.exp();
        let prop_lp = log_target(&prop);
        let ratio = prop_lp - cur_lp;
        let ok = ratio.is_finite() && (ratio >= 0.0 || rng.random::<f64>().ln() < ratio);
        if ok {
            cur = prop;
            cur_lp = prop_lp;
        }
        if iter < settings.burn_in {
            log_scale += (1.0 + iter as f64).powf(-0.6) * (ok as u8 as f64 - 0.234);
        } else {
            accepted += ok as usize;
            if (iter - settings.burn_in) % settings.thin == 0 {
                for (m, v) in mean.iter_mut().zip(cur.iter()) {
                    *m += v;
                }
                draws.push(cur.as_slice().to_vec());
            }
        }
    }
    let n = draws.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(RandomEffectPrediction {
        draws,
        mean,
        acceptance: accepted as f64 / (total - settings.burn_in) as f64,
    })
}
