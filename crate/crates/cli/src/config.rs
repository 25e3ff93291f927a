use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context as _, Result};
use esnmpc::models::ModelSpec;
use esnmpc::mpc::MpcConfig;
use esnmpc::plants::PlantSpec;
use esnmpc::sweep::{default_grid, Axis, GridSpec};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

/// One experiment: plant, data recipe, model or sweep, controller and seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub plant: PlantConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub mpc: MpcConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceConfig>,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantConfig {
    pub id: String,
    /// Overrides of named physical constants.
    #[serde(default)]
    pub constants: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub seed: u64,
    /// Truncates the training recipe to this many control steps.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_steps: Option<usize>,
    pub validation_steps: usize,
    /// Training-noise variance as a fraction of each state's variance; 0 disables noise.
    pub noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { seed: 0, train_steps: None, validation_steps: 5000, noise: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub seed: u64,
    /// Base configuration; defaults to `[model]`, then to the family's default grid.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<ModelSpec>,
    /// Family whose default grid is used when no axes are given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<String>,
    #[serde(default)]
    pub axes: Vec<Axis>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceConfig {
    pub set_points: Vec<Vec<f64>>,
    /// Seconds per set point.
    pub durations: Vec<f64>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        cfg.validate().with_context(|| format!("invalid config {}", path.display()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn plant_spec(&self) -> Result<PlantSpec> {
        let mut plant = PlantSpec::from_id(&self.plant.id)?;
        for (k, v) in &self.plant.constants {
            plant.set_constant(k, *v)?;
        }
        Ok(plant)
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            bail!("seed list is empty");
        }
        let plant = self.plant_spec()?;
        if !(self.data.noise >= 0.0 && self.data.noise.is_finite()) {
            bail!("noise must be a non-negative number");
        }
        self.mpc.validate()?;
        if let Some(r) = &self.reference {
            if r.set_points.len() != r.durations.len() || r.set_points.is_empty() {
                bail!("reference needs one duration per set point");
            }
            if r.durations.iter().any(|d| !(*d > 0.0)) {
                bail!("reference segments need positive durations");
            }
            if let Some(p) = r.set_points.iter().find(|p| p.len() != plant.n_y()) {
                bail!("set point {p:?} does not match the {}-dimensional measurement", plant.n_y());
            }
        }
        if let Some(s) = &self.sweep {
            self.grid_of(s)?.validate()?;
        }
        Ok(())
    }

    fn grid_of(&self, s: &SweepConfig) -> Result<GridSpec> {
        let base = s.base.clone().or_else(|| self.model.clone());
        match (base, s.axes.is_empty()) {
            (Some(base), false) => Ok(GridSpec { base, axes: s.axes.clone() }),
            (base, true) => {
                let family = s
                    .family
                    .clone()
                    .or_else(|| base.as_ref().map(|b| b.family().to_string()))
                    .context("sweep needs axes, a base model or a family")?;
                Ok(default_grid(&family)?)
            }
            (None, false) => bail!("sweep axes need a base model"),
        }
    }

    pub fn grid(&self) -> Result<GridSpec> {
        let s = self.sweep.as_ref().context("config has no [sweep] section")?;
        self.grid_of(s)
    }

    /// Set points and durations of the tracking task, defaulting to the plant's own task.
    pub fn task(&self, plant: &PlantSpec) -> (Vec<DVector<f64>>, Vec<f64>) {
        match &self.reference {
            Some(r) => (
                r.set_points.iter().map(|p| DVector::from_column_slice(p)).collect(),
                r.durations.clone(),
            ),
            None => plant.default_control_task(),
        }
    }
}

/// Parses `N`, `N..M` (exclusive), `N..=M` or a comma list.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let num = |t: &str| t.trim().parse::<u64>().with_context(|| format!("bad seed {t:?}"));
    let seeds = if let Some((a, b)) = s.split_once("..=") {
        (num(a)?..=num(b)?).collect()
    } else if let Some((a, b)) = s.split_once("..") {
        (num(a)?..num(b)?).collect()
    } else {
        s.split(',').map(num).collect::<Result<Vec<_>>>()?
    };
    if seeds.is_empty() {
        bail!("seed range {s:?} is empty");
    }
    Ok(seeds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_ranges() {
        assert_eq!(parse_seeds("0..3").unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_seeds("2..=4").unwrap(), vec![2, 3, 4]);
        assert_eq!(parse_seeds("5,1").unwrap(), vec![5, 1]);
        assert!(parse_seeds("3..3").is_err());
        assert!(parse_seeds("x").is_err());
    }

    #[test]
    fn minimal_config_round_trips() {
        let text = r#"
            seeds = [1, 2]
            [plant]
            id = "lorenz"
            [model]
            family = "esn"
            n_r = 50
        "#;
        let cfg: RunConfig = toml::from_str(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.mpc, MpcConfig::default());
        let back: RunConfig = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn reference_dimension_is_checked() {
        let text = r#"
            [plant]
            id = "spring_mass"
            [reference]
            set_points = [[1.0, 2.0]]
            durations = [5.0]
        "#;
        let cfg: RunConfig = toml::from_str(text).unwrap();
        assert!(cfg.validate().is_err());
    }
}
