//! Ambient-dimension sweep on the Hopf generator: per (d, seed, variant)
//! the bandwidth, memory and PCR threshold are picked on a validation
//! block and the one-step energy score is reported on the test block.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use trsbts_core::bridge::BridgeStepConfig;
use trsbts_core::conditioning::{ConditioningSpec, KernelConfig, KernelVariant, Normalization};
use trsbts_core::dgp::{hopf_bayes_floor, simulate_hopf, HopfConfig};
use trsbts_core::generator::{fit_single, ComponentConfig, ReferenceSpec};
use trsbts_core::path::fmt_f64;
use trsbts_core::rng::stream_id;
use trsbts_core::scoring::{energy_score_path, EnergyScoreConfig, WindowFeatures};
use trsbts_core::CoarsePath;

use crate::error::{CliError, Result};
use crate::io::write_csv_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    ClassicNoPcr,
    ClassicPcr,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::ClassicNoPcr => "classic_no_pcr",
            Variant::ClassicPcr => "classic_pcr",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub dims: Vec<usize>,
    /// Training atoms per cell.
    #[serde(default = "default_atoms")]
    pub target_atoms: usize,
    /// Train and validation fractions of the time axis; the rest is test.
    #[serde(default = "default_split")]
    pub split: [f64; 2],
    #[serde(default = "default_variants")]
    pub variants: Vec<Variant>,
    pub bandwidths: Vec<f64>,
    #[serde(default = "default_p_max")]
    pub p_max: Vec<usize>,
    #[serde(default = "default_thresholds")]
    pub pcr_thresholds: Vec<f64>,
    #[serde(default = "default_kernel")]
    pub kernel: KernelVariant,
    #[serde(default)]
    pub normalization: Normalization,
    #[serde(default = "default_bridge")]
    pub bridge: BridgeStepConfig,
    #[serde(default = "default_continuations")]
    pub continuations: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    /// Monte Carlo draws per conditioning state for the Bayes floor.
    #[serde(default = "default_floor_mc")]
    pub floor_mc: usize,
}

fn default_atoms() -> usize {
    1500
}
fn default_split() -> [f64; 2] {
    [0.70, 0.15]
}
fn default_variants() -> Vec<Variant> {
    vec![Variant::ClassicNoPcr, Variant::ClassicPcr]
}
fn default_p_max() -> Vec<usize> {
    vec![1]
}
fn default_thresholds() -> Vec<f64> {
    vec![0.9]
}
fn default_kernel() -> KernelVariant {
    KernelVariant::QuarticCompact
}
fn default_bridge() -> BridgeStepConfig {
    BridgeStepConfig {
        n_inner: 4,
        epsilon: 1e-6,
        drift_clip: None,
    }
}
fn default_continuations() -> usize {
    16
}
fn default_stride() -> usize {
    1
}
fn default_floor_mc() -> usize {
    200
}

impl SweepSection {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 2) || self.dims.is_empty() {
            return Err(CliError::config("sweep.dims must be non-empty with every d >= 2"));
        }
        let [a, b] = self.split;
        if !(a > 0.0 && b > 0.0 && a + b < 1.0) {
            return Err(CliError::config("sweep.split must be positive fractions summing below 1"));
        }
        if self.bandwidths.is_empty() || self.bandwidths.iter().any(|h| !(*h > 0.0)) {
            return Err(CliError::config("sweep.bandwidths must be non-empty and positive"));
        }
        if self.p_max.is_empty() || self.pcr_thresholds.is_empty() || self.variants.is_empty() {
            return Err(CliError::config("sweep.p_max, sweep.pcr_thresholds and sweep.variants must be non-empty"));
        }
        if self.pcr_thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(CliError::config("sweep.pcr_thresholds must lie in (0, 1]"));
        }
        if self.target_atoms < 10 || self.continuations == 0 || self.stride == 0 || self.floor_mc == 0 {
            return Err(CliError::config("sweep: target_atoms >= 10 and positive continuations, stride, floor_mc"));
        }
        self.bridge.validate()?;
        Ok(())
    }

    fn p_hist(&self) -> usize {
        self.p_max.iter().copied().max().unwrap_or(0)
    }

    /// `(train, validation, total)` coarse step counts.
    pub fn blocks(&self) -> (usize, usize, usize) {
        let n_tr = self.target_atoms + self.p_hist();
        let total = (n_tr as f64 / self.split[0]).ceil() as usize;
        let n_val = (total as f64 * self.split[1]).round() as usize;
        (n_tr, n_val, total)
    }

    fn grid(&self, v: Variant) -> Vec<(f64, usize, Option<f64>)> {
        let thresholds: Vec<Option<f64>> = match v {
            Variant::ClassicNoPcr => vec![None],
            Variant::ClassicPcr => self.pcr_thresholds.iter().map(|&t| Some(t)).collect(),
        };
        let mut out = Vec::new();
        for &h in &self.bandwidths {
            for &p in &self.p_max {
                for &t in &thresholds {
                    out.push((h, p, t));
                }
            }
        }
        out
    }

    fn component(&self, h: f64, p: usize, threshold: Option<f64>) -> ComponentConfig {
        let conditioning = match threshold {
            Some(threshold) => ConditioningSpec::Pcr {
                threshold,
                normalization: self.normalization,
            },
            None => ConditioningSpec::Full {
                normalization: self.normalization,
            },
        };
        ComponentConfig {
            p_max: p,
            conditioning,
            kernel: KernelConfig {
                variant: self.kernel,
                bandwidth: h,
                anchor_bandwidth: None,
            },
            bridge: self.bridge.clone(),
            wls: None,
            reference: ReferenceSpec::Empirical,
        }
    }

    fn score_config(&self) -> EnergyScoreConfig {
        EnergyScoreConfig {
            p_mem: self.p_hist(),
            k: 1,
            l: self.continuations,
            stride: self.stride,
            normalize_by_sqrt_q: true,
            coords: Some(vec![0, 1]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub d: usize,
    pub seed: u64,
    pub variant: Variant,
    pub score: f64,
    pub bayes_floor: f64,
    pub n_atoms: usize,
    pub n_test_windows: usize,
    pub bandwidth: f64,
    pub p_max: usize,
    pub pcr_threshold: Option<f64>,
    pub validation_score: f64,
}

pub const SWEEP_HEADER: [&str; 11] = [
    "d",
    "seed",
    "variant",
    "score",
    "bayes_floor",
    "n_atoms",
    "n_test_windows",
    "bandwidth",
    "p_max",
    "pcr_threshold",
    "validation_score",
];

pub const PLOT_HEADER: [&str; 6] = ["d", "variant", "score_mean", "score_err", "floor_mean", "n_seeds"];

/// Test-block conditioning states and the Bayes floor of one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct FloorRow {
    pub seed: u64,
    pub bayes_floor: f64,
    pub n_states: usize,
}

pub struct SweepOutput {
    pub rows: Vec<SweepRow>,
    pub floors: Vec<FloorRow>,
}

fn simulate(base: &HopfConfig, sec: &SweepSection, d: usize, seed: u64) -> Result<CoarsePath> {
    let (_, _, total) = sec.blocks();
    let cfg = HopfConfig {
        dim: d,
        seed,
        years: total as f64 * base.dt,
        ..base.clone()
    };
    let p = simulate_hopf(&cfg, 0)?;
    debug_assert_eq!(p.len(), total + 1);
    Ok(p)
}

/// Sub-path whose windows (starting after `p_hist` lead-in states) target
/// exactly the steps `from+1 ..= to`.
fn block(path: &CoarsePath, p_hist: usize, from: usize, to: usize) -> CoarsePath {
    path.window(from - p_hist, to + 1)
}

fn floor_for(base: &HopfConfig, sec: &SweepSection, seed: u64) -> Result<FloorRow> {
    let (n_tr, n_val, total) = sec.blocks();
    // The signal block does not depend on d.
    let path = simulate(base, sec, 2, seed)?;
    let test = block(&path, sec.p_hist(), n_tr + n_val, total);
    let cfg = sec.score_config();
    let states: Vec<Vec<f64>> = cfg.windows(test.len()).iter().map(|&i| test.states[i].clone()).collect();
    let hopf = HopfConfig {
        dim: 2,
        seed,
        ..base.clone()
    };
    let f = hopf_bayes_floor(&hopf, &states, sec.floor_mc, stream_id(&[seed, 0xf1]))?;
    Ok(FloorRow {
        seed,
        bayes_floor: f,
        n_states: states.len(),
    })
}

pub fn run_cell(base: &HopfConfig, sec: &SweepSection, d: usize, seed: u64, v: Variant, floor: f64) -> Result<SweepRow> {
    let (n_tr, n_val, total) = sec.blocks();
    let ph = sec.p_hist();
    let path = simulate(base, sec, d, seed)?;
    let train = path.window(0, n_tr + 1);
    let val = block(&path, ph, n_tr, n_tr + n_val);
    let test = block(&path, ph, n_tr + n_val, total);
    let scfg = sec.score_config();
    let key = stream_id(&[seed, d as u64, v as u64]);

    let mut best: Option<(f64, (f64, usize, Option<f64>))> = None;
    for (h, p, t) in sec.grid(v) {
        let fc = fit_single(vec![train.clone()], &sec.component(h, p, t))?;
        let (s, _) = energy_score_path(&fc, std::slice::from_ref(&val), &scfg, &WindowFeatures::Basic, key)?;
        if best.as_ref().is_none_or(|(b, _)| s < *b) {
            best = Some((s, (h, p, t)));
        }
    }
    let (val_score, (h, p, t)) = best.expect("non-empty grid");
    let fc = fit_single(vec![train], &sec.component(h, p, t))?;
    let (score, n) = energy_score_path(&fc, &[test], &scfg, &WindowFeatures::Basic, key ^ 1)?;
    Ok(SweepRow {
        d,
        seed,
        variant: v,
        score,
        bayes_floor: floor,
        n_atoms: fc.n_atoms(),
        n_test_windows: n,
        bandwidth: h,
        p_max: p,
        pcr_threshold: t,
        validation_score: val_score,
    })
}

pub fn run_sweep(base: &HopfConfig, sec: &SweepSection, seeds: &[u64]) -> Result<SweepOutput> {
    sec.validate()?;
    if seeds.is_empty() {
        return Err(CliError::config("the sweep needs at least one seed"));
    }
    let floors: Vec<FloorRow> = seeds.par_iter().map(|&s| floor_for(base, sec, s)).collect::<Result<_>>()?;
    let mut cells = Vec::new();
    for &d in &sec.dims {
        for (k, &seed) in seeds.iter().enumerate() {
            for &v in &sec.variants {
                cells.push((d, seed, v, floors[k].bayes_floor));
            }
        }
    }
    let rows = cells
        .par_iter()
        .map(|&(d, seed, v, floor)| {
            let r = run_cell(base, sec, d, seed, v, floor)?;
            eprintln!(
                "sweep d={d} seed={seed} variant={} score={:.5} floor={floor:.5} h={} p={}",
                v.name(),
                r.score,
                r.bandwidth,
                r.p_max
            );
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepOutput { rows, floors })
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

pub fn write_sweep(dir: &Path, out: &SweepOutput) -> Result<()> {
    write_csv_atomic(&dir.join("sweep_dim.csv"), |w| {
        w.write_record(SWEEP_HEADER)?;
        for r in &out.rows {
            w.write_record([
                r.d.to_string(),
                r.seed.to_string(),
                r.variant.name().to_string(),
                fmt_f64(r.score),
                fmt_f64(r.bayes_floor),
                r.n_atoms.to_string(),
                r.n_test_windows.to_string(),
                fmt_f64(r.bandwidth),
                r.p_max.to_string(),
                opt(r.pcr_threshold),
                fmt_f64(r.validation_score),
            ])?;
        }
        Ok(())
    })?;
    write_csv_atomic(&dir.join("bayes_floor.csv"), |w| {
        w.write_record(["seed", "bayes_floor", "n_states"])?;
        for f in &out.floors {
            w.write_record([f.seed.to_string(), fmt_f64(f.bayes_floor), f.n_states.to_string()])?;
        }
        Ok(())
    })?;
    write_csv_atomic(&dir.join("sweep_plot.csv"), |w| {
        w.write_record(PLOT_HEADER)?;
        for (d, v, mean, err, floor, n) in plot_points(out) {
            w.write_record([
                d.to_string(),
                v.name().to_string(),
                fmt_f64(mean),
                fmt_f64(err),
                fmt_f64(floor),
                n.to_string(),
            ])?;
        }
        Ok(())
    })
}

/// Per (d, variant): mean score, its standard error across seeds, mean
/// floor and the number of seeds.
pub fn plot_points(out: &SweepOutput) -> Vec<(usize, Variant, f64, f64, f64, usize)> {
    let mut keys: Vec<(usize, Variant)> = out.rows.iter().map(|r| (r.d, r.variant)).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|(d, v)| {
            let rs: Vec<&SweepRow> = out.rows.iter().filter(|r| r.d == d && r.variant == v).collect();
            let n = rs.len() as f64;
            let mean = rs.iter().map(|r| r.score).sum::<f64>() / n;
            let var = if rs.len() > 1 {
                rs.iter().map(|r| (r.score - mean).powi(2)).sum::<f64>() / (n - 1.0)
            } else {
                0.0
            };
            let floor = rs.iter().map(|r| r.bayes_floor).sum::<f64>() / n;
            (d, v, mean, (var / n).sqrt(), floor, rs.len())
        })
        .collect()
}
