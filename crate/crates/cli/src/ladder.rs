//! Three-phase hyperparameter ladder. Phase 1 tunes the covariance levels
//! on the descriptor path (scored through its symmetric square root),
//! Phase 2 the state level at a longer horizon with Phase 1 frozen, and
//! Phase 3 the couplings with the enriched score at the longest horizon.

use std::path::Path;

use serde::{Deserialize, Serialize};
use trsbts_core::conditioning::{ConditioningSpec, Normalization};
use trsbts_core::generator::{fit_joint, ComponentConfig, CouplingConfig, JointConfig};
use trsbts_core::linalg::{psd_project, sym_sqrt, unvech, vech, vech_dim};
use trsbts_core::path::fmt_f64;
use trsbts_core::rng::stream_id;
use trsbts_core::scoring::{energy_score_windows_mapped, EnergyScoreConfig, FeatureStats, WindowFeatures};
use trsbts_core::CoarsePath;

use crate::config::ModelSection;
use crate::error::{CliError, Result};
use crate::io::{write_csv_atomic, write_json};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseGrid {
    pub horizon: usize,
    pub bandwidths: Vec<f64>,
    /// Memory lengths; the configured value when empty.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub p_max: Vec<usize>,
    /// PCR thresholds (Phase 1); the configured conditioning when empty.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub pcr_thresholds: Vec<f64>,
    /// Spectral floors (Phase 2); the configured value when empty.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub epsilons: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingGrid {
    pub horizon: usize,
    pub rho_x: Vec<f64>,
    pub rho_y: Vec<f64>,
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LadderSection {
    pub phase1: PhaseGrid,
    pub phase2: PhaseGrid,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase3: Option<CouplingGrid>,
    #[serde(default = "default_continuations")]
    pub continuations: usize,
    #[serde(default = "one")]
    pub stride: usize,
}

fn default_continuations() -> usize {
    8
}
fn one() -> usize {
    1
}

impl LadderSection {
    pub fn validate(&self) -> Result<()> {
        let mut prev = 0;
        let mut hs = vec![("phase1", self.phase1.horizon), ("phase2", self.phase2.horizon)];
        if let Some(p) = &self.phase3 {
            hs.push(("phase3", p.horizon));
        }
        for (name, h) in hs {
            if h <= prev {
                return Err(CliError::config(format!(
                    "non-increasing horizons: {name} horizon {h} must exceed the previous phase's {prev}"
                )));
            }
            prev = h;
        }
        for g in [&self.phase1, &self.phase2] {
            if g.bandwidths.is_empty() || g.bandwidths.iter().any(|h| !(*h > 0.0)) {
                return Err(CliError::config("ladder bandwidth grids must be non-empty and positive"));
            }
            if g.pcr_thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) || g.epsilons.iter().any(|e| !(*e > 0.0)) {
                return Err(CliError::config("ladder thresholds must lie in (0, 1] and epsilons be positive"));
            }
        }
        if let Some(p) = &self.phase3 {
            if p.rho_x.is_empty() || p.rho_y.is_empty() || p.alpha.is_empty() {
                return Err(CliError::config("ladder.phase3 grids must be non-empty"));
            }
        }
        if self.continuations == 0 || self.stride == 0 {
            return Err(CliError::config("ladder continuations and stride must be positive"));
        }
        Ok(())
    }
}

/// One evaluated grid point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Trial {
    pub phase: usize,
    pub label: String,
    pub score: f64,
    pub n_windows: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LadderOutput {
    pub config: JointConfig,
    pub trials: Vec<Trial>,
}

/// The fragment written by the ladder; parses as an experiment config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LadderFragment {
    pub model: ModelSection,
    pub coupling: Vec<CouplingConfig>,
}

fn or_current<T: Clone>(grid: &[T], current: T) -> Vec<T> {
    if grid.is_empty() {
        vec![current]
    } else {
        grid.to_vec()
    }
}

fn threshold_of(c: &ComponentConfig) -> Option<f64> {
    match c.conditioning {
        ConditioningSpec::Pcr { threshold, .. } => Some(threshold),
        _ => None,
    }
}

fn with_threshold(c: &mut ComponentConfig, t: f64) {
    match &mut c.conditioning {
        ConditioningSpec::Pcr { threshold, .. } => *threshold = t,
        other => {
            *other = ConditioningSpec::Pcr {
                threshold: t,
                normalization: Normalization::Blockwise,
            }
        }
    }
}

/// `vech(√M)` of a descriptor row; other rows pass through.
fn sqrt_view(x: &[f64]) -> trsbts_core::Result<Vec<f64>> {
    if vech_dim(x.len()).is_none() {
        return Ok(x.to_vec());
    }
    Ok(vech(&sym_sqrt(&psd_project(&unvech(x)?))?))
}

fn identity_view(x: &[f64]) -> trsbts_core::Result<Vec<f64>> {
    Ok(x.to_vec())
}

struct Scorer<'a> {
    train: &'a [Vec<CoarsePath>],
    val: &'a [Vec<CoarsePath>],
    sec: &'a LadderSection,
    seed: u64,
}

impl Scorer<'_> {
    /// Pooled mean window score of the model built from the first
    /// `cfg.levels.len()` levels over every validation path.
    fn score(
        &self,
        cfg: &JointConfig,
        horizon: usize,
        features: &WindowFeatures,
        view: fn(&[f64]) -> trsbts_core::Result<Vec<f64>>,
        phase: u64,
    ) -> Result<(f64, usize)> {
        let n = cfg.levels.len();
        let model = fit_joint(self.train[..n].to_vec(), cfg)?;
        let p_mem = cfg.levels.iter().map(ComponentConfig::min_index).max().unwrap_or(0);
        let ecfg = EnergyScoreConfig {
            p_mem,
            k: horizon,
            l: self.sec.continuations,
            stride: self.sec.stride,
            normalize_by_sqrt_q: true,
            coords: None,
        };
        let (mut acc, mut count) = (0.0, 0usize);
        for p in 0..self.val[0].len() {
            let levels: Vec<CoarsePath> = self.val[..n].iter().map(|l| l[p].clone()).collect();
            let s = energy_score_windows_mapped(&model, &levels, &ecfg, features, stream_id(&[self.seed, phase, p as u64]), &view)?;
            acc += s.iter().sum::<f64>();
            count += s.len();
        }
        Ok((acc / count as f64, count))
    }
}

fn pick<T>(trials: &mut Vec<Trial>, phase: usize, cands: Vec<(String, T)>, mut eval: impl FnMut(&T) -> Result<(f64, usize)>) -> Result<T> {
    let mut best: Option<(f64, T)> = None;
    for (label, c) in cands {
        let (score, n_windows) = eval(&c)?;
        eprintln!("ladder phase {phase} {label} score={score:.6}");
        trials.push(Trial {
            phase,
            label,
            score,
            n_windows,
        });
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            best = Some((score, c));
        }
    }
    Ok(best.expect("non-empty grid").1)
}

pub fn run_ladder(
    base: &JointConfig,
    sec: &LadderSection,
    train: &[Vec<CoarsePath>],
    val: &[Vec<CoarsePath>],
    seed: u64,
) -> Result<LadderOutput> {
    sec.validate()?;
    base.validate()?;
    let n = base.levels.len();
    if train.len() != n || val.len() != n || val[0].is_empty() {
        return Err(CliError::data("the ladder needs training and validation paths for every level"));
    }
    let scorer = Scorer { train, val, sec, seed };
    let mut cfg = base.clone();
    let mut trials = Vec::new();

    // Phase 1: every covariance level shares the grid point; the model is
    // cut below the state level and scored on its top (descriptor) level.
    if n > 1 {
        let g = &sec.phase1;
        let cur = &cfg.levels[n - 2];
        let mut cands = Vec::new();
        for &h in &g.bandwidths {
            for &p in &or_current(&g.p_max, cur.p_max) {
                for &t in &or_current(&g.pcr_thresholds.iter().map(|&t| Some(t)).collect::<Vec<_>>(), threshold_of(cur)) {
                    let mut c = cfg.clone();
                    for l in &mut c.levels[..n - 1] {
                        l.kernel.bandwidth = h;
                        l.p_max = p;
                        if let Some(t) = t {
                            with_threshold(l, t);
                        }
                    }
                    cands.push((format!("h={h} p={p} threshold={}", t.map_or("-".into(), |t| t.to_string())), c));
                }
            }
        }
        cfg = pick(&mut trials, 1, cands, |c| {
            let cut = JointConfig {
                levels: c.levels[..n - 1].to_vec(),
                links: c.links[..n - 2].to_vec(),
                couplings: vec![CouplingConfig::NONE; n - 2],
            };
            scorer.score(&cut, g.horizon, &WindowFeatures::Basic, sqrt_view, 1)
        })?;
    }

    // Phase 2: the state level, uncoupled.
    {
        let g = &sec.phase2;
        let cur = &cfg.levels[n - 1];
        let mut cands = Vec::new();
        for &h in &g.bandwidths {
            for &p in &or_current(&g.p_max, cur.p_max) {
                for &e in &or_current(&g.epsilons, cur.bridge.epsilon) {
                    let mut c = cfg.clone();
                    let top = &mut c.levels[n - 1];
                    top.kernel.bandwidth = h;
                    top.p_max = p;
                    top.bridge.epsilon = e;
                    cands.push((format!("h={h} p={p} eps={e}"), c));
                }
            }
        }
        cfg = pick(&mut trials, 2, cands, |c| {
            let uncoupled = JointConfig {
                couplings: vec![CouplingConfig::NONE; n - 1],
                ..c.clone()
            };
            scorer.score(&uncoupled, g.horizon, &WindowFeatures::Basic, identity_view, 2)
        })?;
        cfg.couplings = vec![CouplingConfig::NONE; n - 1];
    }

    // Phase 3: couplings, shared by every adjacent pair.
    if let (Some(g), true) = (&sec.phase3, n > 1) {
        let stats = FeatureStats::fit(&train[n - 1])?;
        let mut cands = Vec::new();
        for &rho_x in &g.rho_x {
            for &rho_y in &g.rho_y {
                for &alpha in &g.alpha {
                    let cc = CouplingConfig { rho_x, rho_y, alpha };
                    cc.validate()?;
                    let mut c = cfg.clone();
                    c.couplings = vec![cc; n - 1];
                    cands.push((format!("rho_x={rho_x} rho_y={rho_y} alpha={alpha}"), c));
                }
            }
        }
        cfg = pick(&mut trials, 3, cands, |c| {
            scorer.score(c, g.horizon, &WindowFeatures::Enriched(stats), identity_view, 3)
        })?;
    }
    Ok(LadderOutput { config: cfg, trials })
}

pub fn fragment(cfg: &JointConfig) -> LadderFragment {
    LadderFragment {
        model: ModelSection {
            levels: cfg.levels.clone(),
            links: cfg.links.clone(),
        },
        coupling: cfg.couplings.clone(),
    }
}

pub fn write_ladder(dir: &Path, out: &LadderOutput) -> Result<()> {
    write_json(&dir.join("ladder.json"), &fragment(&out.config))?;
    write_csv_atomic(&dir.join("ladder_trials.csv"), |w| {
        w.write_record(["phase", "candidate", "score", "n_windows"])?;
        for t in &out.trials {
            w.write_record([t.phase.to_string(), t.label.clone(), fmt_f64(t.score), t.n_windows.to_string()])?;
        }
        Ok(())
    })
}
