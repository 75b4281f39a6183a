//! `key = value` run configuration.
//!
//! A file may set any network key (`levels`, `variant`, `input_size`, ...),
//! any training key (`lr_start`, `batch_size`, `seed`, ...) and the run keys
//! below. `preset = toy|full` is applied before every other key, wherever it
//! appears. Blank lines and `#` comments are ignored.
//!
//! | key            | meaning                                             |
//! |----------------|-----------------------------------------------------|
//! | `dataset`      | dataset directory                                   |
//! | `fovea_radius` | target disc radius in input pixels (default scales with size) |
//! | `split`        | `holdout` (train/val/test) or `all` (every sample in every role) |
//! | `out`          | output directory                                    |
//! | `reproducible` | recorded for provenance of the run                  |

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use hba_core::data::fovea_radius_for;
use hba_core::model::{NetworkConfig, Variant};
use hba_core::train::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SplitMode {
    /// Seeded train/validation/test partition.
    #[default]
    Holdout,
    /// Train, validate and test on the whole dataset.
    All,
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitMode::Holdout => "holdout",
            SplitMode::All => "all",
        })
    }
}

impl FromStr for SplitMode {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "holdout" => Ok(SplitMode::Holdout),
            "all" => Ok(SplitMode::All),
            _ => bail!("unknown split `{s}` (expected holdout or all)"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub dataset: Option<PathBuf>,
    pub fovea_radius: Option<f64>,
    pub split: SplitMode,
    pub out: PathBuf,
    pub reproducible: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            network: NetworkConfig::toy(Variant::HbaAll),
            train: TrainConfig::default(),
            dataset: None,
            fovea_radius: None,
            split: SplitMode::Holdout,
            out: PathBuf::from("runs/default"),
            reproducible: false,
        }
    }
}

fn parse_line(line: &str) -> Result<Option<(&str, &str)>> {
    let line = line.trim();
    if line.is_empty() || line.starts_with('#') {
        return Ok(None);
    }
    let (k, v) = line.split_once('=').with_context(|| format!("expected key=value, got `{line}`"))?;
    Ok(Some((k.trim(), v.trim())))
}

impl RunConfig {
    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn fovea_radius(&self) -> f64 {
        self.fovea_radius.unwrap_or_else(|| fovea_radius_for(self.network.input_size))
    }

    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        let variant = self.network.variant;
        self.network = match name {
            "toy" => NetworkConfig::toy(variant),
            "full" => NetworkConfig::full_scale(variant),
            _ => bail!("unknown preset `{name}` (expected toy or full)"),
        };
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.network.set(key, value)? || self.train.set(key, value)? {
            return Ok(());
        }
        match key {
            "preset" => self.apply_preset(value)?,
            "dataset" => self.dataset = (!value.is_empty()).then(|| PathBuf::from(value)),
            "fovea_radius" => {
                self.fovea_radius = if value == "auto" {
                    None
                } else {
                    Some(value.parse().map_err(|_| anyhow::anyhow!("bad value `{value}` for fovea_radius"))?)
                }
            }
            "split" => self.split = value.parse()?,
            "out" => self.out = PathBuf::from(value),
            "reproducible" => {
                self.reproducible = value.parse().map_err(|_| anyhow::anyhow!("bad value `{value}` for reproducible"))?
            }
            _ => bail!("unknown config key `{key}`"),
        }
        Ok(())
    }

    /// Applies `text` on top of `self`.
    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        let pairs: Vec<(&str, &str)> = text.lines().filter_map(|l| parse_line(l).transpose()).collect::<Result<_>>()?;
        for (k, v) in pairs.iter().filter(|(k, _)| *k == "preset") {
            self.set(k, v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| *k != "preset") {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.merge_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        RunConfig::from_text(&text).with_context(|| format!("in config {}", path.display()))
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        self.merge_text(&overrides.join("\n"))
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        if let Some(r) = self.fovea_radius {
            if !(r > 0.0 && r.is_finite()) {
                bail!("fovea_radius must be > 0, got {r}");
            }
        }
        Ok(())
    }

    /// Every setting, explicitly; reading it back yields an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# network\n");
        for (k, v) in self.network.to_pairs() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out.push_str("\n# training\n");
        for (k, v) in self.train.to_pairs() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out.push_str("\n# run\n");
        let dataset = self.dataset.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        out.push_str(&format!("dataset = {dataset}\n"));
        let radius = self.fovea_radius.map(|r| format!("{r:?}")).unwrap_or_else(|| "auto".into());
        out.push_str(&format!("fovea_radius = {radius}\n"));
        out.push_str(&format!("split = {}\n", self.split));
        out.push_str(&format!("out = {}\n", self.out.display()));
        out.push_str(&format!("reproducible = {}\n", self.reproducible));
        out
    }
}
