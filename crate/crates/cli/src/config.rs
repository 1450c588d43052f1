use cgbp_core::cgbp::{geometric_grid, refined_grid};
use serde::Deserialize;

use crate::CliError;

/// What to do when BP fails to converge at some grid point.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Unconverged {
    /// Write the row with `converged = false` and exit 0.
    #[default]
    Flag,
    /// Write everything, then exit with the numerical-failure code.
    Fail,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TemperatureGrid {
    List { values: Vec<f64> },
    Geometric { hi: f64, lo: f64, points: usize },
    /// `per_decade` points per decade, `band_per_decade` inside `band`.
    Refined { hi: f64, lo: f64, per_decade: usize, band: [f64; 2], band_per_decade: usize },
}

impl TemperatureGrid {
    pub fn resolve(&self) -> Result<Vec<f64>, CliError> {
        let grid = match self {
            TemperatureGrid::List { values } => values.clone(),
            TemperatureGrid::Geometric { hi, lo, points } => geometric_grid(*hi, *lo, *points)?,
            TemperatureGrid::Refined { hi, lo, per_decade, band, band_per_decade } => {
                if *per_decade == 0 || *band_per_decade == 0 {
                    return Err(CliError::Config("points per decade must be positive".into()));
                }
                refined_grid(*hi, *lo, *per_decade, (band[0], band[1]), *band_per_decade)?
            }
        };
        if grid.is_empty() {
            return Err(CliError::Config("temperature grid is empty".into()));
        }
        if grid.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(CliError::Config("temperatures must be positive and finite".into()));
        }
        if grid.windows(2).any(|w| w[1] >= w[0]) {
            return Err(CliError::Config("temperatures must be strictly decreasing".into()));
        }
        Ok(grid)
    }
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Transverse field.
    pub b: f64,
}

fn default_tol() -> f64 {
    1e-10
}

fn default_max_iter() -> usize {
    1000
}

fn default_sweeps() -> usize {
    200
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BpSection {
    pub l: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainBpConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub on_unconverged: Unconverged,
    pub model: ModelSection,
    pub bp: BpSection,
    pub temperatures: TemperatureGrid,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeSection {
    pub depth: usize,
    pub instances: usize,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseGrid {
    pub b: Vec<f64>,
    pub t: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpinGlassConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    pub tree: TreeSection,
    pub grid: PhaseGrid,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CgbpSection {
    pub levels: usize,
    pub chi: usize,
    pub l: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_sweeps")]
    pub mera_sweeps: usize,
    /// Start the disentanglers from a random rotation drawn from the seed.
    #[serde(default)]
    pub mera_restart: bool,
}

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CgbpFileConfig {
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub on_unconverged: Unconverged,
    pub model: ModelSection,
    pub cgbp: CgbpSection,
    pub temperatures: TemperatureGrid,
}

pub fn parse<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T, CliError> {
    toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
}

pub fn check_field(b: f64) -> Result<(), CliError> {
    if !b.is_finite() {
        return Err(CliError::Config(format!("field {b} is not finite")));
    }
    Ok(())
}

impl SpinGlassConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.grid.b.is_empty() || self.grid.t.is_empty() {
            return Err(CliError::Config("field and temperature lists must be non-empty".into()));
        }
        for &b in &self.grid.b {
            check_field(b)?;
        }
        if self.grid.t.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(CliError::Config("temperatures must be positive and finite".into()));
        }
        if self.tree.instances == 0 {
            return Err(CliError::Config("at least one instance is required".into()));
        }
        if self.tree.depth == 0 {
            return Err(CliError::Config("tree depth must be at least 1".into()));
        }
        Ok(())
    }
}
