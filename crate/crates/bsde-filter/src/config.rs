//! Experiment configuration: a flat TOML file with one `[section]` of
//! `key = value` pairs per concern. See the repository README for the
//! documented grammar and the `configs/` directory for the shipped
//! experiment files.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::bsdef::{BsdefConfig, ExpectationMode};
use crate::density::BandScales;
use crate::error::{Error, Result};
use crate::models::{
    cubic_root_observation, lennard_jones_model, linear_model, linear_observation, lorenz96_model,
    synthetic_model, ObservationModel, StateModel,
};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub model: ModelSection,
    pub observation: ObservationSection,
    pub time: TimeSection,
    pub init: InitSection,
    #[serde(default)]
    pub filters: FiltersSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    pub seed: u64,
    pub repeats: usize,
    pub out: Option<PathBuf>,
    /// When set, write per-step mixture/cloud checkpoints for the bsdef runs.
    #[serde(default)]
    pub checkpoints: bool,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// "synthetic", "lennard-jones", "lorenz96" or "ou".
    pub name: String,
    /// Diagonal diffusion scale (sigma = c I).
    pub sigma: f64,
    /// State dimension for lorenz96/ou; synthetic and lennard-jones are 2-D.
    pub d: Option<usize>,
    /// synthetic: drift scale.
    pub alpha: Option<f64>,
    /// lennard-jones: potential parameters.
    pub a: Option<f64>,
    pub b: Option<f64>,
    /// lorenz96: forcing constant.
    pub forcing: Option<f64>,
    /// ou: mean-reversion rate, drift b(x) = -theta x.
    pub theta: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationSection {
    /// "linear" or "cubic-root".
    pub kind: String,
    /// Observation noise standard deviation (same for every component).
    pub std: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSection {
    pub t_end: f64,
    pub dt: f64,
    /// Truth integration sub-steps per observation gap.
    #[serde(default = "default_substeps")]
    pub substeps: usize,
}

fn default_substeps() -> usize {
    10
}

/// A per-dimension value given either as one scalar (broadcast) or a full
/// vector.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum Broadcast {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl Broadcast {
    pub fn expand(&self, d: usize) -> Result<Vec<f64>> {
        match self {
            Broadcast::Scalar(v) => Ok(vec![*v; d]),
            Broadcast::Vector(v) if v.len() == d => Ok(v.clone()),
            Broadcast::Vector(v) => Err(Error::Config(format!(
                "expected {d} components, got {}",
                v.len()
            ))),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSection {
    /// Mean of the truth's initial condition; a scalar broadcasts over all
    /// dimensions, a vector gives each component.
    pub truth_mean: Broadcast,
    /// Std of the Gaussian draw around truth_mean (0 gives a fixed start).
    #[serde(default)]
    pub truth_std: f64,
    /// Std of the perturbation producing the filter's initial guess.
    pub guess_std: f64,
    /// Spread of the filter prior around the guess; defaults to guess_std.
    pub prior_std: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiltersSection {
    pub bsdef: Option<BsdefSection>,
    pub apf: Option<ApfSection>,
    pub enkf: Option<EnkfSection>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BsdefSection {
    pub n_samples: usize,
    pub n_kernels: usize,
    #[serde(default = "default_fp_iterations")]
    pub fp_iterations: usize,
    #[serde(default = "default_sgd_iterations")]
    pub sgd_iterations: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_init_weight")]
    pub init_weight: f64,
    #[serde(default = "default_init_bandwidth")]
    pub init_bandwidth: f64,
    /// "batch" (default), "single", or a positive integer for a fully
    /// computed Monte Carlo expectation with that many samples.
    #[serde(default)]
    pub expectation: Option<toml::Value>,
    /// Bandwidth band lower bound, multiple of the value-weighted std.
    #[serde(default = "default_band_lo")]
    pub band_lo: f64,
    /// Bandwidth band upper bound, multiple of the value-weighted std.
    #[serde(default = "default_band_hi")]
    pub band_hi: f64,
    /// Bandwidth floor as a fraction of the unweighted cloud spread.
    #[serde(default)]
    pub spread_floor: f64,
    /// Degenerate-update threshold as a fraction of N (0 disables).
    #[serde(default)]
    pub ess_threshold: f64,
}

fn default_fp_iterations() -> usize {
    10
}
fn default_sgd_iterations() -> usize {
    100
}
fn default_lr() -> f64 {
    1e-2
}
fn default_init_weight() -> f64 {
    1.0
}
fn default_init_bandwidth() -> f64 {
    1.0
}
fn default_band_lo() -> f64 {
    BandScales::default().lo
}
fn default_band_hi() -> f64 {
    BandScales::default().hi
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApfSection {
    pub particles: usize,
    #[serde(default = "default_n_aux")]
    pub n_aux: usize,
}

fn default_n_aux() -> usize {
    10
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnkfSection {
    pub ensemble: usize,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_str(&text)
    }

    #[allow(clippy::should_implement_trait)]
    pub fn from_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Number of observation steps; `n_steps * dt` must equal `t_end`.
    pub fn n_steps(&self) -> usize {
        (self.time.t_end / self.time.dt).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.experiment.repeats == 0 {
            return Err(Error::Config("repeats must be >= 1".into()));
        }
        if !(self.time.dt > 0.0) || !(self.time.t_end > 0.0) {
            return Err(Error::Config("dt and t_end must be positive".into()));
        }
        let n = self.n_steps();
        if n == 0 || (n as f64 * self.time.dt - self.time.t_end).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "t_end = {} is not an integer number of dt = {} steps",
                self.time.t_end, self.time.dt
            )));
        }
        if self.time.substeps == 0 {
            return Err(Error::Config("substeps must be >= 1".into()));
        }
        if !(self.init.guess_std >= 0.0) || !(self.init.truth_std >= 0.0) {
            return Err(Error::Config("init stds must be nonnegative".into()));
        }
        if let Some(p) = self.init.prior_std {
            if !(p > 0.0) {
                return Err(Error::Config("prior_std must be positive".into()));
            }
        }
        if self.filters.bsdef.is_none() && self.filters.apf.is_none() && self.filters.enkf.is_none()
        {
            return Err(Error::Config(
                "at least one filter must be configured".into(),
            ));
        }
        // constructing the models validates the model section
        let (model, _) = self.build_models()?;
        self.init.truth_mean.expand(model.dim)?;
        if let Some(b) = &self.filters.bsdef {
            self.bsdef_config(b, 0)?;
        }
        if let Some(a) = &self.filters.apf {
            if a.particles == 0 || a.n_aux == 0 {
                return Err(Error::Config("apf particles and n_aux must be >= 1".into()));
            }
        }
        if let Some(e) = &self.filters.enkf {
            if e.ensemble < 2 {
                return Err(Error::Config("enkf ensemble must be >= 2".into()));
            }
        }
        let _ = model;
        Ok(())
    }

    pub fn build_models(&self) -> Result<(StateModel, ObservationModel)> {
        let m = &self.model;
        let need = |v: Option<f64>, key: &str| {
            v.ok_or_else(|| Error::Config(format!("model '{}' needs '{key}'", m.name)))
        };
        let model = match m.name.as_str() {
            "synthetic" => synthetic_model(need(m.alpha, "alpha")?, m.sigma)?,
            "lennard-jones" => lennard_jones_model(need(m.a, "a")?, need(m.b, "b")?, m.sigma)?,
            "lorenz96" => {
                let d =
                    m.d.ok_or_else(|| Error::Config("lorenz96 needs 'd'".into()))?;
                lorenz96_model(d, need(m.forcing, "forcing")?, m.sigma)?
            }
            "ou" => {
                let d = m.d.unwrap_or(1);
                linear_model(d, need(m.theta, "theta")?, m.sigma)?
            }
            other => return Err(Error::Config(format!("unknown model '{other}'"))),
        };
        let obs = match self.observation.kind.as_str() {
            "linear" => linear_observation(model.dim, self.observation.std)?,
            "cubic-root" => cubic_root_observation(model.dim, self.observation.std)?,
            other => return Err(Error::Config(format!("unknown observation kind '{other}'"))),
        };
        Ok((model, obs))
    }

    pub fn bsdef_config(&self, section: &BsdefSection, seed: u64) -> Result<BsdefConfig> {
        let expectation = match &section.expectation {
            None => ExpectationMode::Batch,
            Some(toml::Value::String(s)) if s == "batch" => ExpectationMode::Batch,
            Some(toml::Value::String(s)) if s == "single" => ExpectationMode::Single,
            Some(toml::Value::Integer(m)) if *m >= 1 => {
                ExpectationMode::FullMonteCarlo(*m as usize)
            }
            Some(v) => {
                return Err(Error::Config(format!(
                    "expectation must be \"batch\", \"single\" or a positive integer, got {v}"
                )))
            }
        };
        let cfg = BsdefConfig {
            n_samples: section.n_samples,
            n_kernels: section.n_kernels,
            fp_iterations: section.fp_iterations,
            sgd_iterations: section.sgd_iterations,
            lr: section.lr,
            dt: self.time.dt,
            seed,
            init_weight: section.init_weight,
            init_bandwidth: section.init_bandwidth,
            expectation,
            band: BandScales {
                lo: section.band_lo,
                hi: section.band_hi,
                spread_floor: section.spread_floor,
            },
            ess_threshold: section.ess_threshold,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const MINIMAL: &str = r#"
[experiment]
name = "test"
seed = 1
repeats = 2

[model]
name = "ou"
theta = 1.0
sigma = 0.3
d = 1

[observation]
kind = "linear"
std = 0.2

[time]
t_end = 0.5
dt = 0.1

[init]
truth_mean = 0.0
guess_std = 0.2

[filters.bsdef]
n_samples = 50
n_kernels = 3
"#;

    #[test]
    fn minimal_config_parses() {
        let cfg = ExperimentConfig::from_str(MINIMAL).unwrap();
        assert_eq!(cfg.n_steps(), 5);
        let (model, obs) = cfg.build_models().unwrap();
        assert_eq!(model.dim, 1);
        assert_eq!(obs.obs_dim, 1);
    }

    #[test]
    fn misaligned_horizon_rejected() {
        let bad = MINIMAL.replace("t_end = 0.5", "t_end = 0.55");
        assert!(matches!(
            ExperimentConfig::from_str(&bad),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn unknown_model_rejected() {
        let bad = MINIMAL.replace("name = \"ou\"", "name = \"pendulum\"");
        assert!(ExperimentConfig::from_str(&bad).is_err());
    }

    #[test]
    fn missing_filter_section_rejected() {
        let bad = MINIMAL.split("[filters.bsdef]").next().unwrap().to_string();
        assert!(ExperimentConfig::from_str(&bad).is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = format!("{MINIMAL}\nn_bogus = 3\n");
        assert!(ExperimentConfig::from_str(&bad).is_err());
    }

    #[test]
    fn zero_repeats_rejected() {
        let bad = MINIMAL.replace("repeats = 2", "repeats = 0");
        assert!(ExperimentConfig::from_str(&bad).is_err());
    }
}
