//! Experiment configuration. Every section rejects unknown keys, and the
//! whole document is validated before any run starts.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use trsbts_core::dgp::{simulate_heston, simulate_hopf, HestonConfig, HopfConfig};
use trsbts_core::generator::{ComponentConfig, CouplingConfig, JointConfig, LinkConfig};
use trsbts_core::scoring::{EnergyScoreConfig, EntropicConfig};
use trsbts_core::CoarsePath;

use crate::error::{CliError, Result};
use crate::heston::{heston_levels, HestonSection};
use crate::io::read_paths;
use crate::ladder::LadderSection;
use crate::select::SelectSection;
use crate::sweep::SweepSection;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dgp: Option<DgpSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSection>,
    /// One entry per adjacent pair of levels; absent pairs are uncoupled.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub coupling: Vec<CouplingConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scoring: Option<ScoringSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generate: Option<GenerateSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ladder: Option<LadderSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heston: Option<HestonSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub select_reference: Option<SelectSection>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DgpSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hopf: Option<HopfConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heston: Option<HestonConfig>,
    #[serde(default = "one")]
    pub n_paths: usize,
    /// Held-out paths simulated after the training ones.
    #[serde(default)]
    pub n_validation: usize,
}

fn one() -> usize {
    1
}

/// CSV path files, one per level, deepest level first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub dt: f64,
    pub levels: Vec<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<Vec<PathBuf>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    /// Deepest level first; the last level is the observed state.
    pub levels: Vec<ComponentConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub links: Vec<LinkConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoringSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub energy: Option<EnergyScoreConfig>,
    /// Score windows with the enriched position and increment features.
    #[serde(default)]
    pub enriched: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropic: Option<EntropicConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    /// Number of real states handed over as warm start.
    pub warm: usize,
    /// Total length of each generated path, warm start included.
    pub horizon: usize,
    /// Generate from the first `n_paths` data paths; all when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_paths: Option<usize>,
}

/// Training and optional held-out paths, `[level][path]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub train: Vec<Vec<CoarsePath>>,
    pub validation: Option<Vec<Vec<CoarsePath>>>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| CliError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file; relative data paths are resolved against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if let (Some(data), Some(base)) = (cfg.data.as_mut(), path.parent()) {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            };
            data.levels.iter_mut().for_each(fix);
            if let Some(v) = data.validation.as_mut() {
                v.iter_mut().for_each(fix);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(d) = &self.dgp {
            if d.hopf.is_some() == d.heston.is_some() {
                return Err(CliError::config("dgp: give exactly one of `hopf` and `heston`"));
            }
            if let Some(h) = &d.hopf {
                h.validate()?;
            }
            if let Some(h) = &d.heston {
                h.validate()?;
            }
            if d.n_paths == 0 {
                return Err(CliError::config("dgp.n_paths must be positive"));
            }
        }
        if let Some(d) = &self.data {
            if !(d.dt > 0.0) || d.levels.is_empty() {
                return Err(CliError::config("data: dt must be positive and at least one level given"));
            }
            if d.validation.as_ref().is_some_and(|v| v.len() != d.levels.len()) {
                return Err(CliError::config("data.validation must list one file per level"));
            }
        }
        if self.model.is_some() {
            self.joint_config()?.validate()?;
        }
        if let Some(s) = &self.scoring {
            if let Some(e) = &s.energy {
                e.validate()?;
            }
            if let Some(e) = &s.entropic {
                e.validate()?;
            }
        }
        if let Some(g) = &self.generate {
            if g.warm == 0 || g.horizon == 0 {
                return Err(CliError::config("generate.warm and generate.horizon must be positive"));
            }
        }
        if let Some(s) = &self.sweep {
            s.validate()?;
        }
        if let Some(l) = &self.ladder {
            l.validate()?;
        }
        if let Some(h) = &self.heston {
            h.validate()?;
        }
        if let Some(s) = &self.select_reference {
            s.validate()?;
        }
        Ok(())
    }

    pub fn model(&self) -> Result<&ModelSection> {
        self.model.as_ref().ok_or_else(|| CliError::config("missing `model` section"))
    }

    /// The model section with its couplings, uncoupled where not given.
    pub fn joint_config(&self) -> Result<JointConfig> {
        let m = self.model()?;
        let pairs = m.levels.len().saturating_sub(1);
        if self.coupling.len() > pairs {
            return Err(CliError::config(format!(
                "{} coupling entries for {pairs} level pairs",
                self.coupling.len()
            )));
        }
        let mut couplings = self.coupling.clone();
        couplings.resize(pairs, CouplingConfig::NONE);
        Ok(JointConfig {
            levels: m.levels.clone(),
            links: m.links.clone(),
            couplings,
        })
    }

    pub fn output_dir(&self, flag: Option<&Path>) -> Result<PathBuf> {
        flag.map(Path::to_path_buf)
            .or_else(|| self.output_dir.clone())
            .ok_or_else(|| CliError::config("no output directory: pass --out or set `output_dir`"))
    }

    pub fn seed(&self, flag: Option<u64>) -> u64 {
        flag.or_else(|| self.seeds.first().copied()).unwrap_or(0)
    }

    /// Training data for `n_levels` levels, read from `data` or simulated
    /// from `dgp` with the given seed.
    pub fn dataset(&self, n_levels: usize, seed: u64) -> Result<Dataset> {
        if let Some(d) = &self.data {
            if d.levels.len() != n_levels {
                return Err(CliError::config(format!(
                    "data lists {} levels, the model has {n_levels}",
                    d.levels.len()
                )));
            }
            let read = |files: &[PathBuf]| -> Result<Vec<Vec<CoarsePath>>> {
                files.iter().map(|f| read_paths(f, d.dt)).collect()
            };
            return Ok(Dataset {
                train: read(&d.levels)?,
                validation: d.validation.as_deref().map(read).transpose()?,
            });
        }
        let g = self
            .dgp
            .as_ref()
            .ok_or_else(|| CliError::config("need a `data` or a `dgp` section"))?;
        let ids: Vec<u64> = (0..g.n_paths as u64).collect();
        let held: Vec<u64> = (g.n_paths as u64..(g.n_paths + g.n_validation) as u64).collect();
        if let Some(h) = &g.hopf {
            if n_levels != 1 {
                return Err(CliError::config("the Hopf generator feeds single-level models only"));
            }
            let cfg = HopfConfig { seed, ..h.clone() };
            let sim = |ids: &[u64]| -> Result<Vec<Vec<CoarsePath>>> {
                Ok(vec![ids.iter().map(|&k| simulate_hopf(&cfg, k)).collect::<Result<_, _>>()?])
            };
            return Ok(Dataset {
                train: sim(&ids)?,
                validation: if held.is_empty() { None } else { Some(sim(&held)?) },
            });
        }
        let cfg = HestonConfig {
            seed,
            ..g.heston.clone().expect("validated")
        };
        let sim = |ids: &[u64]| -> Result<Vec<CoarsePath>> {
            Ok(ids
                .iter()
                .map(|&k| simulate_heston(&cfg, k).map(|p| p.0))
                .collect::<Result<Vec<_>, _>>()?)
        };
        let (train, x_var) = heston_levels(&sim(&ids)?, n_levels, None)?;
        let validation = if held.is_empty() {
            None
        } else {
            Some(heston_levels(&sim(&held)?, n_levels, Some(x_var))?.0)
        };
        Ok(Dataset { train, validation })
    }
}
