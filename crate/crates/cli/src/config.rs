//! Run configuration: one TOML file with a section per command. Relative
//! paths are resolved against the directory holding the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tsjm::data::Schema;
use tsjm::design::MarkerSpec;
use tsjm::predict::{PredictionMethod, PredictionSettings};
use tsjm::sim::SimScenario;
use tsjm::study::StudyConfig;
use tsjm::two_stage::TwoStageOptions;

use crate::error::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Worker threads; all cores when absent.
    pub threads: Option<usize>,
    pub data: DataConfig,
    pub simulate: SimulateConfig,
    pub fit: FitConfig,
    pub predict: PredictConfig,
    pub evaluate: EvaluateConfig,
    pub study: StudySection,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub longitudinal: Option<PathBuf>,
    pub survival: Option<PathBuf>,
    /// Simulation truth, needed by `fit --method true`.
    pub truth: Option<PathBuf>,
    pub schema: Schema,
    /// Explicit marker models. When empty every marker gets a random
    /// intercept and slope model with `marker_covariates` as fixed effects.
    pub markers: Vec<MarkerSpec>,
    pub marker_covariates: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub scenario: SimScenario,
    pub replicates: usize,
    pub out: PathBuf,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        SimulateConfig {
            scenario: SimScenario::default(),
            replicates: 1,
            out: PathBuf::from("simulations"),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum FitMethod {
    #[default]
    Tsjm,
    Mts,
    /// Cox model on the true trajectories of a simulated dataset.
    True,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub method: FitMethod,
    pub out: PathBuf,
    pub options: TwoStageOptions,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            method: FitMethod::Tsjm,
            out: PathBuf::from("model"),
            options: TwoStageOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictConfig {
    pub model: PathBuf,
    /// Bundles for the other causes; switches to cumulative incidences.
    pub competing: Vec<PathBuf>,
    /// `subject,landmark,window` rows; otherwise every subject at risk at
    /// each landmark is predicted.
    pub queries: Option<PathBuf>,
    pub landmarks: Vec<f64>,
    pub window: f64,
    pub algorithm: PredictionMethod,
    pub settings: PredictionSettings,
    pub out: PathBuf,
}

impl Default for PredictConfig {
    fn default() -> Self {
        PredictConfig {
            model: PathBuf::from("model"),
            competing: Vec::new(),
            queries: None,
            landmarks: vec![0.0],
            window: 0.5,
            algorithm: PredictionMethod::FirstOrder,
            settings: PredictionSettings::default(),
            out: PathBuf::from("predictions.csv"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub predictions: PathBuf,
    /// Second predictions file for paired comparisons.
    pub compare: Option<PathBuf>,
    pub event_of_interest: u32,
    pub out: PathBuf,
    pub comparison_out: PathBuf,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            predictions: PathBuf::from("predictions.csv"),
            compare: None,
            event_of_interest: 1,
            out: PathBuf::from("metrics.csv"),
            comparison_out: PathBuf::from("comparison.csv"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudySection {
    pub out: PathBuf,
    #[serde(flatten)]
    pub settings: StudyConfig,
}

impl Default for StudySection {
    fn default() -> Self {
        StudySection {
            out: PathBuf::from("study"),
            settings: StudyConfig::default(),
        }
    }
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("configuration: {e}")))
    }

    /// Reads a configuration file and resolves its relative paths.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.rebase(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    pub fn rebase(&mut self, base: &Path) {
        let d = &mut self.data;
        for p in [&mut d.longitudinal, &mut d.survival, &mut d.truth].into_iter().flatten() {
            rebase(base, p);
        }
        rebase(base, &mut self.simulate.out);
        rebase(base, &mut self.fit.out);
        rebase(base, &mut self.predict.model);
        self.predict.competing.iter_mut().for_each(|p| rebase(base, p));
        if let Some(q) = &mut self.predict.queries {
            rebase(base, q);
        }
        rebase(base, &mut self.predict.out);
        rebase(base, &mut self.evaluate.predictions);
        if let Some(c) = &mut self.evaluate.compare {
            rebase(base, c);
        }
        rebase(base, &mut self.evaluate.out);
        rebase(base, &mut self.evaluate.comparison_out);
        rebase(base, &mut self.study.out);
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Usage(format!("cannot serialize configuration: {e}")))
    }

    /// Writes the configuration next to an artifact.
    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = RunConfig::from_toml_str(
            r#"
            threads = 2
            [fit]
            method = "mts"
            [fit.options.stage1.chain]
            iterations = 300
            burn_in = 100
            [study]
            replicates = 5
            out = "here"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.threads, Some(2));
        assert_eq!(cfg.fit.method, FitMethod::Mts);
        assert_eq!(cfg.fit.options.stage1.chain.iterations, 300);
        assert_eq!(cfg.fit.options.stage1.chain.thin, 5);
        assert_eq!(cfg.fit.options.imputations, 10);
        assert_eq!(cfg.study.settings.replicates, 5);
        assert_eq!(cfg.study.out, PathBuf::from("here"));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_toml_str("[fit]\nmethd = 'mts'"), Err(CliError::Usage(_))));
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let mut cfg = RunConfig::from_toml_str("[data]\nsurvival = 'surv.csv'\nlongitudinal = '/abs/long.csv'").unwrap();
        cfg.rebase(Path::new("/runs/a"));
        assert_eq!(cfg.data.survival.unwrap(), PathBuf::from("/runs/a/surv.csv"));
        assert_eq!(cfg.data.longitudinal.unwrap(), PathBuf::from("/abs/long.csv"));
    }
}
