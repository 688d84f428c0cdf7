use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fom::FomSettings;
use crate::ml::MlSettings;
use crate::opt::OptSettings;
use crate::parameter::ParameterDomain;
use crate::rb::PodSettings;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// Parametrized heat equation with ML, reduced-basis and full-order stages.
    #[default]
    Parabolic,
    /// Multistart minimization with a surrogate and a full-objective stage.
    Optdemo,
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "parabolic" => Ok(Scenario::Parabolic),
            "optdemo" => Ok(Scenario::Optdemo),
            other => Err(Error::config(format!("unknown scenario '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxConfig {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Dumps {
    /// Full-order trajectory of the first query (parabolic only).
    pub trajectory: Option<PathBuf>,
    /// Final reduced basis (parabolic only).
    pub basis: Option<PathBuf>,
    /// Final training set of the cheapest stage.
    pub training: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub results_path: PathBuf,
    /// JSON summary; skipped when absent.
    pub summary_path: Option<PathBuf>,
    pub dumps: Dumps,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            results_path: PathBuf::from("results.csv"),
            summary_path: None,
            dumps: Dumps::default(),
        }
    }
}

/// Everything a run needs. Every key is optional in JSON; `{}` is the
/// default parabolic experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: Scenario,
    /// Acceptance tolerance of the parabolic hierarchy. The opt-demo uses
    /// `opt.TOL_grad` instead.
    pub tolerance: f64,
    pub n_queries: usize,
    pub seed: u64,
    /// Defaults to `[0.1, 10]^Q` (parabolic) or `[-5, 5]^2` (opt-demo).
    #[serde(rename = "box")]
    pub parameter_box: Option<BoxConfig>,
    pub fom: FomSettings,
    pub rb: PodSettings,
    pub ml: MlSettings,
    pub opt: OptSettings,
    /// When false, levels never learn from each other.
    pub adaptation: bool,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scenario: Scenario::Parabolic,
            tolerance: 1e-3,
            n_queries: 400,
            seed: 42,
            parameter_box: None,
            fom: FomSettings::default(),
            rb: PodSettings::default(),
            ml: MlSettings::default(),
            opt: OptSettings::default(),
            adaptation: true,
            output: OutputConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))?;
        Ok(config)
    }

    /// Reads a config file. A missing file is an I/O error, bad content a
    /// configuration error.
    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn domain(&self) -> Result<ParameterDomain> {
        match (&self.parameter_box, self.scenario) {
            (Some(b), _) => ParameterDomain::new(b.lo.clone(), b.hi.clone()),
            (None, Scenario::Parabolic) => ParameterDomain::uniform(self.fom.q, 0.1, 10.0),
            (None, Scenario::Optdemo) => ParameterDomain::uniform(2, -5.0, 5.0),
        }
        .map_err(|e| Error::config(e.to_string()))
    }

    /// Tolerance that decides acceptance in this scenario.
    pub fn tolerance(&self) -> f64 {
        match self.scenario {
            Scenario::Parabolic => self.tolerance,
            Scenario::Optdemo => self.opt.tol_grad,
        }
    }

    pub fn set_tolerance(&mut self, tolerance: f64) {
        match self.scenario {
            Scenario::Parabolic => self.tolerance = tolerance,
            Scenario::Optdemo => self.opt.tol_grad = tolerance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let tol = self.tolerance();
        if !(tol >= 0.0) {
            return Err(Error::config(format!("tolerance must be nonnegative, got {tol}")));
        }
        let domain = self.domain()?;
        match self.scenario {
            Scenario::Parabolic => {
                if domain.dim() != self.fom.q {
                    return Err(Error::config(format!(
                        "box has {} components but Q = {}",
                        domain.dim(),
                        self.fom.q
                    )));
                }
                if domain.lo.iter().any(|lo| !(*lo > 0.0)) {
                    return Err(Error::config("diffusivity bounds must be positive"));
                }
                self.rb.validate()?;
                self.ml.validate()?;
                self.ml.input_scaling.check(&domain)?;
            }
            Scenario::Optdemo => {
                if domain.dim() != 2 {
                    return Err(Error::config("the opt-demo objective is two-dimensional"));
                }
                self.opt.validate()?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_default_experiment() {
        let c = RunConfig::from_json("{}").unwrap();
        assert_eq!(c, RunConfig::default());
        c.validate().unwrap();
        assert_eq!(c.domain().unwrap(), ParameterDomain::uniform(2, 0.1, 10.0).unwrap());
    }

    #[test]
    fn nested_keys_use_the_documented_names() {
        let c = RunConfig::from_json(
            r#"{"scenario": "optdemo", "n_queries": 7, "box": {"lo": [-1, -1], "hi": [1, 1]},
                "fom": {"n_h": 10, "K": 5}, "rb": {"N_max": 9},
                "ml": {"lengthscale": {"fixed": 0.2}},
                "opt": {"TOL_grad": 0.01, "delay_s": 0},
                "output": {"results_path": "x.csv", "dumps": {"training": "t.csv"}}}"#,
        )
        .unwrap();
        assert_eq!(c.scenario, Scenario::Optdemo);
        assert_eq!((c.fom.n_h, c.fom.k_steps, c.fom.q), (10, 5, 2));
        assert_eq!(c.rb.n_max, 9);
        assert_eq!(c.tolerance(), 0.01);
        assert_eq!(c.output.dumps.training, Some(PathBuf::from("t.csv")));
        c.validate().unwrap();
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"bogus": 1}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json("not json"), Err(Error::Config(_))));
        let c = RunConfig {
            tolerance: -1.0,
            ..RunConfig::default()
        };
        assert!(c.validate().is_err());
        let mut c = RunConfig {
            parameter_box: Some(BoxConfig {
                lo: vec![1.0, 2.0],
                hi: vec![2.0, 2.0],
            }),
            ..RunConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.parameter_box = Some(BoxConfig {
            lo: vec![-1.0, 1.0],
            hi: vec![2.0, 2.0],
        });
        assert!(c.validate().is_err());
        c.parameter_box = Some(BoxConfig {
            lo: vec![1.0, 1.0],
            hi: vec![2.0, 2.0],
        });
        c.fom.q = 3;
        assert!(c.validate().is_err(), "box dimension must match Q");
        c.parameter_box = None;
        assert!(c.validate().is_ok());
    }
}
