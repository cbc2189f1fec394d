//! Heston parameter recovery: a three-layer model (hybrid frame, then
//! cumulative covariance descriptor, then the state) is fitted on a
//! training pool, held-out paths are continued from a real warm start, and
//! per-path parameter estimates of real and synthetic paths are compared.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use trsbts_core::bridge::{BridgeStepConfig, NoiseMode};
use trsbts_core::conditioning::{ConditioningSpec, KernelConfig, Normalization};
use trsbts_core::descriptor::{cumulative_avg_cov, hybrid_frame_encode};
use trsbts_core::dgp::{estimate_heston, simulate_heston, HestonConfig, HestonEstimate};
use trsbts_core::generator::{
    fit_joint, fit_single, generate_joint, generate_single, BackwardMap, ComponentConfig, CouplingConfig, JointConfig,
    LinkConfig, ReferenceSpec,
};
use trsbts_core::path::fmt_f64;
use trsbts_core::rng;
use trsbts_core::scoring::energy_distance;
use trsbts_core::CoarsePath;

use crate::error::{CliError, Result};
use crate::io::write_csv_atomic;

const TR_STREAM: u64 = 0x7472;
const BASELINE_STREAM: u64 = 0xba5e;
const CONTROL_STREAM: u64 = 0xc0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HestonSection {
    #[serde(default = "default_train")]
    pub n_train: usize,
    #[serde(default = "default_val")]
    pub n_val: usize,
    /// Real history handed to the generator, in coarse states.
    #[serde(default = "default_warm")]
    pub warm: usize,
    /// Three-layer model; the built-in default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<JointConfig>,
    /// Single-level baseline with a frozen reference.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<ComponentConfig>,
    /// The control cloud is simulated with every θ multiplied by this.
    #[serde(default = "default_control")]
    pub control_theta_scale: f64,
}

fn default_train() -> usize {
    32
}
fn default_val() -> usize {
    16
}
fn default_warm() -> usize {
    32
}
fn default_control() -> f64 {
    2.0
}

impl Default for HestonSection {
    fn default() -> Self {
        HestonSection {
            n_train: default_train(),
            n_val: default_val(),
            warm: default_warm(),
            model: None,
            baseline: None,
            control_theta_scale: default_control(),
        }
    }
}

fn level(eps: f64, h: f64) -> ComponentConfig {
    ComponentConfig {
        p_max: 1,
        conditioning: ConditioningSpec::Pcr {
            threshold: 0.95,
            normalization: Normalization::Blockwise,
        },
        kernel: KernelConfig::gaussian(h),
        bridge: BridgeStepConfig {
            n_inner: 4,
            epsilon: eps,
            drift_clip: None,
        },
        wls: None,
        reference: ReferenceSpec::Empirical,
    }
}

/// Frame, descriptor and state levels joined by the ribbon and unvech maps.
pub fn default_three_layer() -> JointConfig {
    JointConfig {
        levels: vec![level(1e-8, 0.5), level(1e-10, 0.5), level(1e-7, 0.5)],
        links: vec![
            LinkConfig {
                map: BackwardMap::Ribbon { scale: None },
                latent: true,
            },
            LinkConfig {
                map: BackwardMap::Unvech,
                latent: true,
            },
        ],
        couplings: vec![CouplingConfig::NONE; 2],
    }
}

/// The state level of the default model with an identity reference.
pub fn default_baseline() -> ComponentConfig {
    ComponentConfig {
        reference: ReferenceSpec::Identity { scale: 1.0 },
        ..level(1e-7, 0.5)
    }
}

impl HestonSection {
    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 || self.n_val == 0 || self.warm < 2 {
            return Err(CliError::config("heston: n_train, n_val positive and warm >= 2"));
        }
        if !(self.control_theta_scale > 0.0) {
            return Err(CliError::config("heston.control_theta_scale must be positive"));
        }
        if let Some(m) = &self.model {
            m.validate()?;
            if m.levels.len() != 3 {
                return Err(CliError::config("heston.model must have three levels"));
            }
        }
        if let Some(b) = &self.baseline {
            b.validate()?;
        }
        Ok(())
    }
}

/// Splits `(log S, V)` paths into aligned levels from coarse index 1:
/// one level is the state itself (from index 0), two add the vech rows of
/// the cumulative average covariance, three add its hybrid frame. The
/// frame normaliser defaults to the mean final trace over `paths`.
pub fn heston_levels(paths: &[CoarsePath], n_levels: usize, x_var: Option<f64>) -> Result<(Vec<Vec<CoarsePath>>, f64)> {
    if !(1..=3).contains(&n_levels) {
        return Err(CliError::config(format!("{n_levels} levels; Heston data supports 1 to 3")));
    }
    if n_levels == 1 {
        return Ok((vec![paths.to_vec()], x_var.unwrap_or(1.0)));
    }
    let dt = paths.first().ok_or_else(|| CliError::data("no Heston paths"))?.dt;
    let cums = paths
        .iter()
        .map(|p| cumulative_avg_cov(p, dt))
        .collect::<Result<Vec<_>, _>>()?;
    let x_var = match x_var {
        Some(v) => v,
        None => cums.iter().map(|c| c.descriptors.last().map_or(0.0, |m| m.trace())).sum::<f64>() / cums.len() as f64,
    };
    let mut desc = Vec::new();
    let mut frames = Vec::new();
    let mut state = Vec::new();
    for (p, c) in paths.iter().zip(&cums) {
        desc.push(CoarsePath::new(dt, c.packed.clone())?);
        state.push(CoarsePath::new(dt, p.states[1..].to_vec())?);
        if n_levels == 3 {
            let rows = c
                .descriptors
                .iter()
                .map(|m| hybrid_frame_encode(m, x_var).map(|f| f.to_vec()))
                .collect::<Result<Vec<_>, _>>()?;
            frames.push(CoarsePath::new(dt, rows)?);
        }
    }
    let levels = if n_levels == 3 { vec![frames, desc, state] } else { vec![desc, state] };
    Ok((levels, x_var))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Real,
    Trsbts,
    Baseline,
    Control,
}

impl Source {
    pub fn name(self) -> &'static str {
        match self {
            Source::Real => "real",
            Source::Trsbts => "trsbts",
            Source::Baseline => "baseline",
            Source::Control => "control",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateRow {
    pub path: usize,
    pub source: Source,
    pub estimate: HestonEstimate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HestonOutput {
    pub estimates: Vec<EstimateRow>,
    /// `(metric, value)` in a fixed order.
    pub summary: Vec<(String, f64)>,
}

impl HestonOutput {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.summary.iter().find(|(k, _)| k == name).map(|(_, v)| *v)
    }
}

fn cloud(rows: &[EstimateRow], s: Source) -> Vec<HestonEstimate> {
    rows.iter().filter(|r| r.source == s).map(|r| r.estimate).collect()
}

/// Each parameter divided by its spread in the real cloud.
fn standardised(c: &[HestonEstimate], scale: &[f64; 4]) -> Vec<Vec<f64>> {
    c.iter()
        .map(|e| e.as_array().iter().zip(scale).map(|(v, s)| v / s).collect())
        .collect()
}

fn spread(c: &[HestonEstimate]) -> [f64; 4] {
    let n = c.len() as f64;
    let mut out = [1.0; 4];
    for (j, o) in out.iter_mut().enumerate() {
        let m = c.iter().map(|e| e.as_array()[j]).sum::<f64>() / n;
        let sd = (c.iter().map(|e| (e.as_array()[j] - m).powi(2)).sum::<f64>() / n).sqrt();
        if sd > 0.0 {
            *o = sd;
        }
    }
    out
}

pub fn run_heston(dgp: &HestonConfig, sec: &HestonSection, seed: u64) -> Result<HestonOutput> {
    sec.validate()?;
    let cfg = HestonConfig { seed, ..dgp.clone() };
    cfg.validate()?;
    let t = cfg.steps;
    if sec.warm >= t || t < 32 {
        return Err(CliError::config(format!("heston: need warm < steps and steps >= 32, got warm {} steps {t}", sec.warm)));
    }
    let n_all = (sec.n_train + sec.n_val) as u64;
    let raw = (0..n_all)
        .into_par_iter()
        .map(|k| simulate_heston(&cfg, k).map(|p| p.0))
        .collect::<Result<Vec<_>, _>>()?;
    let (train_raw, val_raw) = raw.split_at(sec.n_train);
    let (train, x_var) = heston_levels(train_raw, 3, None)?;
    let (val, _) = heston_levels(val_raw, 3, Some(x_var))?;

    let model_cfg = sec.model.clone().unwrap_or_else(default_three_layer);
    let model = fit_joint(train.clone(), &model_cfg)?;
    let base_cfg = sec.baseline.clone().unwrap_or_else(default_baseline);
    let baseline = fit_single(train[2].clone(), &base_cfg)?;

    let h = sec.warm;
    let per_path = (0..sec.n_val)
        .into_par_iter()
        .map(|k| -> Result<[EstimateRow; 3]> {
            let real = &val[2][k];
            let warm: Vec<Vec<Vec<f64>>> = val.iter().map(|l| l[k].states[..h].to_vec()).collect();
            let mut r = rng::derived(seed, &[TR_STREAM, k as u64]);
            let tr = generate_joint(&model, &warm, real.len(), &mut r, NoiseMode::On)?;
            let mut r = rng::derived(seed, &[BASELINE_STREAM, k as u64]);
            let bl = generate_single(&baseline, &real.states[..h], real.len(), &mut r, NoiseMode::On)?;
            let row = |source, p: &CoarsePath| -> Result<EstimateRow> {
                Ok(EstimateRow {
                    path: k,
                    source,
                    estimate: estimate_heston(p, cfg.dt)?,
                })
            };
            Ok([row(Source::Real, real)?, row(Source::Trsbts, &tr[2])?, row(Source::Baseline, &bl)?])
        })
        .collect::<Result<Vec<_>>>()?;

    let control_cfg = HestonConfig {
        theta: cfg.theta * sec.control_theta_scale,
        prior: cfg.prior.map(|mut p| {
            p.theta = (p.theta.0 * sec.control_theta_scale, p.theta.1 * sec.control_theta_scale);
            p
        }),
        seed: rng::stream_id(&[seed, CONTROL_STREAM]),
        ..cfg.clone()
    };
    let control = (0..sec.n_val)
        .into_par_iter()
        .map(|k| -> Result<EstimateRow> {
            let (p, _) = simulate_heston(&control_cfg, k as u64)?;
            Ok(EstimateRow {
                path: k,
                source: Source::Control,
                estimate: estimate_heston(&p.window(1, p.len()), cfg.dt)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut estimates: Vec<EstimateRow> = per_path.into_iter().flatten().collect();
    estimates.extend(control);
    let real = cloud(&estimates, Source::Real);
    let scale = spread(&real);
    let theta = |c: &[HestonEstimate]| c.iter().map(|e| vec![e.theta]).collect::<Vec<_>>();
    let mut summary = vec![("x_variance".to_string(), x_var)];
    for s in [Source::Trsbts, Source::Baseline, Source::Control] {
        let c = cloud(&estimates, s);
        summary.push((format!("ed_theta_{}", s.name()), energy_distance(&theta(&real), &theta(&c))?));
    }
    for s in [Source::Trsbts, Source::Baseline, Source::Control] {
        let c = cloud(&estimates, s);
        summary.push((
            format!("ed_params_{}", s.name()),
            energy_distance(&standardised(&real, &scale), &standardised(&c, &scale))?,
        ));
    }
    for s in [Source::Real, Source::Trsbts, Source::Baseline, Source::Control] {
        let c = cloud(&estimates, s);
        summary.push((
            format!("mean_theta_{}", s.name()),
            c.iter().map(|e| e.theta).sum::<f64>() / c.len() as f64,
        ));
    }
    Ok(HestonOutput { estimates, summary })
}

pub const ESTIMATE_HEADER: [&str; 7] = ["path", "source", "kappa", "theta", "xi", "rho", "kappa_clamped"];

pub fn write_heston(dir: &Path, out: &HestonOutput) -> Result<()> {
    write_csv_atomic(&dir.join("heston_estimates.csv"), |w| {
        w.write_record(ESTIMATE_HEADER)?;
        for r in &out.estimates {
            let e = &r.estimate;
            w.write_record([
                r.path.to_string(),
                r.source.name().to_string(),
                fmt_f64(e.kappa),
                fmt_f64(e.theta),
                fmt_f64(e.xi),
                fmt_f64(e.rho),
                u8::from(e.kappa_clamped).to_string(),
            ])?;
        }
        Ok(())
    })?;
    write_csv_atomic(&dir.join("heston_summary.csv"), |w| {
        w.write_record(["metric", "value"])?;
        for (k, v) in &out.summary {
            w.write_record([k.as_str(), &fmt_f64(*v)])?;
        }
        Ok(())
    })
}
