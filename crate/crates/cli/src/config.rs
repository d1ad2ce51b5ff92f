//! Run configuration: TOML sections with Table 1 defaults.

use ossbb::estimators::{PriceEstimator, SimConfig};
use ossbb::greeks::{Estimator, GreekMethod};
use ossbb::model::{Cev, Gbm, OptionSpec};
use ossbb::schemes::Scheme;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub option: OptionSection,
    pub sim: SimSection,
    pub price: PriceSection,
    pub greeks: GreeksSection,
    pub mlmc: MlmcSection,
    pub converge: ConvergeSection,
    pub oracle: OracleSection,
    pub figures: FiguresSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Gbm,
    Cev,
}

/// `kind` has no default once the section is written out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elasticity: Option<f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: ModelKind::Gbm,
            rate: None,
            vol: None,
            scale: None,
            elasticity: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptionSection {
    pub spot: f64,
    pub strike: f64,
    pub barrier: f64,
    pub t0: f64,
    pub maturity: f64,
}

impl Default for OptionSection {
    fn default() -> Self {
        Self {
            spot: 1.0,
            strike: 1.0,
            barrier: 1.1,
            t0: 0.0,
            maturity: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub n_steps: usize,
    pub n_paths: u64,
    pub scheme: String,
    pub seed: u64,
    pub discount: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    /// Adds a wall-time column; off by default so reports are reproducible.
    pub timing: bool,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            n_steps: 64,
            n_paths: 100_000,
            scheme: "milstein".into(),
            seed: 0,
            discount: true,
            threads: None,
            timing: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriceSection {
    pub estimators: Vec<String>,
}

impl Default for PriceSection {
    fn default() -> Self {
        Self {
            estimators: vec!["oss_bb".into()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GreeksSection {
    pub estimator: String,
    /// `pathwise`, `first_fd`, `second_fd` or `second_fd_of_pathwise`.
    pub method: String,
    pub components: Vec<String>,
    pub step: f64,
}

impl Default for GreeksSection {
    fn default() -> Self {
        Self {
            estimator: "oss_bb".into(),
            method: "pathwise".into(),
            components: vec!["S0".into()],
            step: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlmcSection {
    pub epsilon: f64,
    pub n0: usize,
    pub max_level: usize,
    pub initial_samples: u64,
}

impl Default for MlmcSection {
    fn default() -> Self {
        Self {
            epsilon: 2e-4,
            n0: 4,
            max_level: 12,
            initial_samples: 1_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergeSection {
    pub estimators: Vec<String>,
    pub n_grid: Vec<usize>,
    pub initial_paths: u64,
    pub max_paths: u64,
    pub resolution: f64,
    pub confirm_factor: u64,
    /// Reference price; the closed form is used when absent (GBM only).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<f64>,
}

impl Default for ConvergeSection {
    fn default() -> Self {
        Self {
            estimators: vec!["baseline".into(), "bb".into(), "oss_bb".into()],
            n_grid: vec![8, 16, 32, 64],
            initial_paths: 100_000,
            max_paths: 50_000_000,
            resolution: 5.0,
            confirm_factor: 4,
            reference: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    pub check_steps: usize,
    pub check_paths: u64,
    /// Agreement required between closed form and check run, in standard errors.
    pub tolerance: f64,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            check_steps: 1 << 14,
            check_paths: 10_000_000,
            tolerance: 3.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FiguresSection {
    /// Path counts swept by fig1 and fig2.
    pub path_grid: Vec<u64>,
    /// Independent repetitions behind each MSE in fig1 and fig2.
    pub repeats: u64,
    pub fd_step: f64,
    pub gamma_paths: u64,
    pub s0_min: f64,
    pub s0_max: f64,
    pub s0_points: usize,
    pub max_level: usize,
    pub level_paths: u64,
}

impl Default for FiguresSection {
    fn default() -> Self {
        Self {
            path_grid: vec![1_000, 10_000, 100_000],
            repeats: 10,
            fd_step: 1e-3,
            gamma_paths: 100_000,
            s0_min: 0.8,
            s0_max: 1.09,
            s0_points: 30,
            max_level: 8,
            level_paths: 100_000,
        }
    }
}

/// A model chosen at run time.
#[derive(Clone, Debug)]
pub enum AnyModel {
    Gbm(Gbm),
    Cev(Cev),
}

fn config_err(e: ossbb::Error) -> CliError {
    CliError::Config(e.to_string())
}

fn required(value: Option<f64>, key: &str) -> Result<f64, CliError> {
    value.ok_or_else(|| CliError::Config(format!("missing required key `model.{key}` for kind = \"cev\"")))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.resolve()?;
        Ok(cfg)
    }

    /// Fills model defaults and rejects keys that do not belong to the model kind.
    pub fn resolve(&mut self) -> Result<(), CliError> {
        let m = &mut self.model;
        m.rate.get_or_insert(0.05);
        match m.kind {
            ModelKind::Gbm => {
                m.vol.get_or_insert(0.2);
                if let Some(key) = [("scale", m.scale), ("elasticity", m.elasticity)]
                    .iter()
                    .find_map(|(k, v)| v.map(|_| *k))
                {
                    return Err(CliError::Config(format!("key `model.{key}` is not valid for kind = \"gbm\"")));
                }
            }
            ModelKind::Cev => {
                required(m.scale, "scale")?;
                required(m.elasticity, "elasticity")?;
                if m.vol.is_some() {
                    return Err(CliError::Config("key `model.vol` is not valid for kind = \"cev\"".into()));
                }
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn build_model(&self) -> Result<AnyModel, CliError> {
        let m = &self.model;
        let rate = m.rate.unwrap_or(0.05);
        match m.kind {
            ModelKind::Gbm => Gbm::new(rate, m.vol.unwrap_or(0.2)).map(AnyModel::Gbm),
            ModelKind::Cev => Cev::new(rate, required(m.scale, "scale")?, required(m.elasticity, "elasticity")?)
                .map(AnyModel::Cev),
        }
        .map_err(config_err)
    }

    pub fn build_option(&self) -> Result<OptionSpec, CliError> {
        let o = &self.option;
        OptionSpec::new(o.spot, o.strike, o.barrier, o.t0, o.maturity).map_err(config_err)
    }

    pub fn scheme(&self) -> Result<Scheme, CliError> {
        self.sim.scheme.parse().map_err(config_err)
    }

    pub fn build_sim(&self) -> Result<SimConfig, CliError> {
        let s = &self.sim;
        let mut cfg = SimConfig::new(s.n_steps, s.n_paths)
            .map_err(config_err)?
            .with_seed(s.seed)
            .with_scheme(self.scheme()?)
            .with_discount(s.discount);
        cfg.threads = s.threads;
        cfg.validate().map_err(config_err)?;
        Ok(cfg)
    }

    pub fn price_estimators(&self) -> Result<Vec<PriceEstimator>, CliError> {
        parse_list(&self.price.estimators, "price.estimators")
    }

    pub fn greek_estimator(&self) -> Result<Estimator, CliError> {
        self.greeks.estimator.parse().map_err(config_err)
    }

    pub fn greek_method(&self) -> Result<GreekMethod, CliError> {
        self.greeks.method.parse().map_err(config_err)
    }
}

pub fn parse_list<T: std::str::FromStr<Err = ossbb::Error>>(items: &[String], key: &str) -> Result<Vec<T>, CliError> {
    if items.is_empty() {
        return Err(CliError::Config(format!("`{key}` must not be empty")));
    }
    items.iter().map(|s| s.parse().map_err(config_err)).collect()
}
