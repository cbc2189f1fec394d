//! Validation scores: predictive energy scores (basic and enriched), the
//! conditional kernel transition score, entropic NLL selection/validation,
//! and score reports.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::descriptor::DescriptorPath;
use crate::error::{Error, Result};
use crate::generator::{generate_joint, generate_single, FittedComponent, JointModel};
use crate::bridge::NoiseMode;
use crate::linalg::{mahalanobis_sq, spectral_floor, FlooredPsd, SymMatrix};
use crate::path::{fmt_f64, CoarsePath};
use crate::rng::{self, Rng};

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `(1/L)Σ‖ẑ_ℓ − z‖ − (1/(2L²))ΣΣ‖ẑ_ℓ − ẑ_ℓ'‖`.
pub fn energy_score_window(ensemble: &[Vec<f64>], observed: &[f64]) -> Result<f64> {
    let l = ensemble.len();
    if l == 0 {
        return Err(Error::EmptyInput("energy-score ensemble"));
    }
    if let Some(bad) = ensemble.iter().find(|e| e.len() != observed.len()) {
        return Err(Error::DimMismatch {
            expected: observed.len(),
            got: bad.len(),
        });
    }
    let lf = l as f64;
    let first = ensemble.iter().map(|e| dist(e, observed)).sum::<f64>() / lf;
    let mut pair = 0.0;
    for a in 0..l {
        for b in a + 1..l {
            pair += dist(&ensemble[a], &ensemble[b]);
        }
    }
    // Each unordered pair appears twice in the double sum.
    Ok(first - pair / (lf * lf))
}

/// Energy distance `2E‖X−Y‖ − E‖X−X′‖ − E‖Y−Y′‖` between two clouds
/// (V-statistic form, non-negative).
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput("energy-distance cloud"));
    }
    let mean_pair = |x: &[Vec<f64>], y: &[Vec<f64>]| {
        x.iter().map(|u| y.iter().map(|v| dist(u, v)).sum::<f64>()).sum::<f64>() / (x.len() * y.len()) as f64
    };
    Ok((2.0 * mean_pair(a, b) - mean_pair(a, a) - mean_pair(b, b)).max(0.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnergyScoreConfig {
    pub p_mem: usize,
    #[serde(rename = "horizon")]
    pub k: usize,
    #[serde(rename = "continuations")]
    pub l: usize,
    pub stride: usize,
    #[serde(default)]
    pub normalize_by_sqrt_q: bool,
    /// Coordinates of the scored level entering the score; all when absent.
    #[serde(default)]
    pub coords: Option<Vec<usize>>,
}

impl EnergyScoreConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.l == 0 || self.stride == 0 {
            return Err(Error::Config("horizon, continuations and stride must be positive".into()));
        }
        Ok(())
    }

    /// Window start indices `p_mem, p_mem + s, … ≤ n − K` for a path of
    /// `len` states (`n = len − 1`).
    pub fn windows(&self, len: usize) -> Vec<usize> {
        let n = len.saturating_sub(1);
        if len == 0 || n < self.k || self.p_mem > n - self.k {
            return Vec::new();
        }
        (self.p_mem..=n - self.k).step_by(self.stride).collect()
    }
}

/// Training-set spread used by the enriched features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub sigma_pos: f64,
    pub sigma_inc: f64,
}

fn rms_std(rows: &[Vec<f64>]) -> f64 {
    let n = rows.len() as f64;
    let d = rows.first().map_or(0, Vec::len);
    let mut var = 0.0;
    for j in 0..d {
        let m = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        var += rows.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n;
    }
    (var / d.max(1) as f64).sqrt()
}

impl FeatureStats {
    /// Root-mean-square coordinate standard deviations of states and of
    /// increments over the training paths.
    pub fn fit(paths: &[CoarsePath]) -> Result<Self> {
        let states: Vec<Vec<f64>> = paths.iter().flat_map(|p| p.states.iter().cloned()).collect();
        let incs: Vec<Vec<f64>> = paths.iter().flat_map(|p| p.increments()).collect();
        if states.is_empty() || incs.is_empty() {
            return Err(Error::InsufficientData("no states for feature statistics".into()));
        }
        let s = FeatureStats {
            sigma_pos: rms_std(&states),
            sigma_inc: rms_std(&incs),
        };
        if !(s.sigma_pos > 0.0 && s.sigma_inc > 0.0) {
            return Err(Error::ZeroVariance);
        }
        Ok(s)
    }
}

/// Per step: `X_r/(σ_pos√d)` then `vec(ΔX_r ΔX_rᵀ)/(σ_inc·d)`, with `ΔX_1`
/// taken from the state preceding the window.
pub fn enriched_features(prev: &[f64], window: &[Vec<f64>], stats: Option<&FeatureStats>) -> Result<Vec<f64>> {
    let s = stats.ok_or(Error::MissingStats)?;
    let d = prev.len();
    let (a, b) = (1.0 / (s.sigma_pos * (d as f64).sqrt()), 1.0 / (s.sigma_inc * d as f64));
    let mut out = Vec::with_capacity(window.len() * (d + d * d));
    let mut last = prev;
    for x in window {
        if x.len() != d {
            return Err(Error::DimMismatch { expected: d, got: x.len() });
        }
        out.extend(x.iter().map(|v| v * a));
        let inc: Vec<f64> = x.iter().zip(last).map(|(u, v)| u - v).collect();
        for i in 0..d {
            for j in 0..d {
                out.push(inc[i] * inc[j] * b);
            }
        }
        last = x;
    }
    Ok(out)
}

/// How windows are vectorised before scoring.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WindowFeatures {
    Basic,
    Enriched(FeatureStats),
}

/// Anything that continues a real history autoregressively.
pub trait Forecaster: Sync {
    /// `history[level]` holds equal-length state blocks, deepest level
    /// first; returns `k` continuation states of the last level.
    fn forecast(&self, history: &[Vec<Vec<f64>>], k: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>>;
}

impl Forecaster for FittedComponent {
    fn forecast(&self, history: &[Vec<Vec<f64>>], k: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
        let h = history.last().ok_or(Error::EmptyInput("history"))?;
        let out = generate_single(self, h, h.len() + k, rng, NoiseMode::On)?;
        Ok(out.states[h.len()..].to_vec())
    }
}

impl Forecaster for JointModel {
    fn forecast(&self, history: &[Vec<Vec<f64>>], k: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
        let len = history.first().map_or(0, Vec::len);
        let out = generate_joint(self, history, len + k, rng, NoiseMode::On)?;
        let top = out.last().ok_or(Error::EmptyInput("levels"))?;
        Ok(top.states[len..].to_vec())
    }
}

fn window_vector(prev: &[f64], states: &[Vec<f64>], coords: Option<&[usize]>, f: &WindowFeatures) -> Result<Vec<f64>> {
    let pick = |x: &[f64]| -> Vec<f64> {
        match coords {
            Some(c) => c.iter().map(|&j| x[j]).collect(),
            None => x.to_vec(),
        }
    };
    let sel: Vec<Vec<f64>> = states.iter().map(|x| pick(x)).collect();
    match f {
        WindowFeatures::Basic => Ok(sel.concat()),
        WindowFeatures::Enriched(s) => enriched_features(&pick(prev), &sel, Some(s)),
    }
}

/// Per-window scores, in window order.
pub fn energy_score_windows<F: Forecaster + ?Sized>(
    model: &F,
    levels: &[CoarsePath],
    cfg: &EnergyScoreConfig,
    features: &WindowFeatures,
    seed: u64,
) -> Result<Vec<f64>> {
    energy_score_windows_mapped(model, levels, cfg, features, seed, &|x: &[f64]| Ok(x.to_vec()))
}

/// [`energy_score_windows`] with every observed and forecast state passed
/// through `map` before coordinates are picked and features built.
pub fn energy_score_windows_mapped<F, M>(
    model: &F,
    levels: &[CoarsePath],
    cfg: &EnergyScoreConfig,
    features: &WindowFeatures,
    seed: u64,
    map: &M,
) -> Result<Vec<f64>>
where
    F: Forecaster + ?Sized,
    M: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    cfg.validate()?;
    let top = levels.last().ok_or(Error::EmptyInput("validation levels"))?;
    if levels.iter().any(|l| l.len() != top.len()) {
        return Err(Error::shape("validation levels differ in length"));
    }
    let windows = cfg.windows(top.len());
    if windows.is_empty() {
        return Err(Error::TooShort {
            needed: cfg.p_mem + cfg.k + 1,
            got: top.len(),
        });
    }
    let coords = cfg.coords.as_deref();
    let map_all = |xs: &[Vec<f64>]| xs.iter().map(|x| map(x)).collect::<Result<Vec<_>>>();
    windows
        .par_iter()
        .map(|&i| {
            let hist: Vec<Vec<Vec<f64>>> = levels.iter().map(|l| l.states[i - cfg.p_mem..=i].to_vec()).collect();
            let prev = map(&top.states[i])?;
            let obs = window_vector(&prev, &map_all(&top.states[i + 1..=i + cfg.k])?, coords, features)?;
            let mut ens = Vec::with_capacity(cfg.l);
            for c in 0..cfg.l {
                let mut r = rng::derived(seed, &[i as u64, c as u64]);
                let fut = model.forecast(&hist, cfg.k, &mut r)?;
                ens.push(window_vector(&prev, &map_all(&fut)?, coords, features)?);
            }
            let q = obs.len() as f64;
            let (ens, obs) = if cfg.normalize_by_sqrt_q {
                let s = q.sqrt();
                (
                    ens.into_iter().map(|e| e.into_iter().map(|v| v / s).collect()).collect(),
                    obs.into_iter().map(|v| v / s).collect(),
                )
            } else {
                (ens, obs)
            };
            energy_score_window(&ens, &obs)
        })
        .collect()
}

/// Mean energy score over the admissible windows of one validation path
/// and the number of windows.
pub fn energy_score_path<F: Forecaster + ?Sized>(
    model: &F,
    levels: &[CoarsePath],
    cfg: &EnergyScoreConfig,
    features: &WindowFeatures,
    seed: u64,
) -> Result<(f64, usize)> {
    let s = energy_score_windows(model, levels, cfg, features, seed)?;
    Ok((s.iter().sum::<f64>() / s.len() as f64, s.len()))
}

/// Type-7 quantile (linear interpolation between order statistics).
pub fn quantile(values: &[f64], alpha: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput("quantile sample"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = (v.len() - 1) as f64 * alpha.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Ok(v[lo] + (h - lo as f64) * (v[hi] - v[lo]))
}

/// Median of pairwise distances between `S⁻¹`-scaled atoms.
pub fn median_bandwidth(atoms: &[Vec<f64>], scale: &[f64]) -> Result<f64> {
    let scaled: Vec<Vec<f64>> = atoms
        .iter()
        .map(|a| a.iter().zip(scale).map(|(x, s)| x / s).collect())
        .collect();
    let mut d = Vec::new();
    for i in 0..scaled.len() {
        for j in i + 1..scaled.len() {
            d.push(dist(&scaled[i], &scaled[j]));
        }
    }
    let m = quantile(&d, 0.5)?;
    if m > 0.0 {
        Ok(m)
    } else {
        Err(Error::ZeroVariance)
    }
}

/// `Σ w_m w_ℓ k(Z_m, Z_ℓ) − 2 Σ w_m k(Z_m, z)` with the Gaussian kernel
/// on `S⁻¹`-scaled coordinates (`scale` is the diagonal of `S`).
pub fn conditional_kernel_score(
    weights: &[f64],
    atoms: &[Vec<f64>],
    observed: &[f64],
    sigma_k: f64,
    scale: &[f64],
) -> Result<f64> {
    if weights.len() != atoms.len() {
        return Err(Error::shape(format!("{} weights for {} atoms", weights.len(), atoms.len())));
    }
    let d = observed.len();
    if scale.len() != d || atoms.iter().any(|a| a.len() != d) {
        return Err(Error::shape("atoms, observation and normaliser differ in dimension"));
    }
    let k = |a: &[f64], b: &[f64]| {
        let s: f64 = a.iter().zip(b).zip(scale).map(|((x, y), s)| ((x - y) / s).powi(2)).sum();
        (-s / (2.0 * sigma_k * sigma_k)).exp()
    };
    let mut self_term = 0.0;
    for (wa, a) in weights.iter().zip(atoms) {
        for (wb, b) in weights.iter().zip(atoms) {
            self_term += wa * wb * k(a, b);
        }
    }
    let cross: f64 = weights.iter().zip(atoms).map(|(w, a)| w * k(a, observed)).sum();
    Ok(self_term - 2.0 * cross)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntropicConfig {
    pub eps: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_alpha() -> f64 {
    0.9
}

impl EntropicConfig {
    pub fn new(eps: f64) -> Self {
        EntropicConfig { eps, alpha: 0.9 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps > 0.0) || !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("entropic eps {} / alpha {} out of range", self.eps, self.alpha)));
        }
        Ok(())
    }
}

/// Gaussian negative log-density of `delta` under `N(0, Σ_ε·dt)`.
pub fn entropic_nll_step(sigma: &FlooredPsd, dt: f64, delta: &[f64]) -> Result<f64> {
    let d = sigma.dim() as f64;
    let quad = mahalanobis_sq(delta, sigma)? / dt;
    Ok(0.5 * (sigma.logdet() + d * dt.ln()) + 0.5 * quad + 0.5 * d * (2.0 * std::f64::consts::PI).ln())
}

/// Candidate covariance families for the entropic selection rule.
#[derive(Debug, Clone, PartialEq)]
pub enum DescriptorFamily {
    /// One rate for every step of every path.
    Constant(SymMatrix),
    /// One descriptor stream per path; the step `i → i+1` uses the
    /// descriptor at index `i` and steps without one are skipped.
    PerPath(Vec<DescriptorPath>),
}

fn path_means(family: &DescriptorFamily, paths: &[CoarsePath], eps: f64) -> Result<Vec<f64>> {
    let constant = match family {
        DescriptorFamily::Constant(m) => Some(spectral_floor(m, eps)),
        DescriptorFamily::PerPath(d) => {
            if d.len() != paths.len() {
                return Err(Error::shape(format!("{} descriptor streams for {} paths", d.len(), paths.len())));
            }
            None
        }
    };
    paths
        .iter()
        .enumerate()
        .map(|(p, path)| {
            let mut acc = 0.0;
            let mut n = 0usize;
            for (i, inc) in path.increments().iter().enumerate() {
                let nll = match (&constant, family) {
                    (Some(c), _) => entropic_nll_step(c, path.dt, inc)?,
                    (None, DescriptorFamily::PerPath(d)) => match d[p].at(i) {
                        Some(m) => entropic_nll_step(&spectral_floor(m, eps), path.dt, inc)?,
                        None => continue,
                    },
                    _ => unreachable!(),
                };
                acc += nll;
                n += 1;
            }
            if n == 0 {
                return Err(Error::InsufficientData(format!("path {p} has no scored step")));
            }
            Ok(acc / n as f64)
        })
        .collect()
}

/// α-quantile across paths of the per-path mean step NLL.
pub fn entropic_family_score(family: &DescriptorFamily, paths: &[CoarsePath], cfg: &EntropicConfig) -> Result<f64> {
    cfg.validate()?;
    if paths.is_empty() {
        return Err(Error::EmptyInput("paths"));
    }
    quantile(&path_means(family, paths, cfg.eps)?, cfg.alpha)
}

/// Index of the family with the smallest score (lowest index on ties) and
/// every family's score.
pub fn entropic_select(
    candidates: &[DescriptorFamily],
    paths: &[CoarsePath],
    cfg: &EntropicConfig,
) -> Result<(usize, Vec<f64>)> {
    if candidates.is_empty() {
        return Err(Error::EmptyInput("candidate families"));
    }
    let scores = candidates
        .iter()
        .map(|c| entropic_family_score(c, paths, cfg))
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (k, s) in scores.iter().enumerate() {
        if *s < scores[best] {
            best = k;
        }
    }
    Ok((best, scores))
}

/// Entropic adherence of generated descriptor streams to observed paths.
pub fn entropic_validate(generated: &[DescriptorPath], observed: &[CoarsePath], cfg: &EntropicConfig) -> Result<f64> {
    if generated.len() != observed.len() {
        return Err(Error::shape(format!(
            "{} descriptor streams for {} paths",
            generated.len(),
            observed.len()
        )));
    }
    entropic_family_score(&DescriptorFamily::PerPath(generated.to_vec()), observed, cfg)
}

/// One row of a score report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub config_id: String,
    pub score_name: String,
    pub value: f64,
    pub n_windows: usize,
    pub seed: u64,
}

pub fn write_score_report<W: Write>(w: W, rows: &[ScoreRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["config_id", "score_name", "value", "n_windows", "seed"])
        .map_err(|e| Error::Parse(e.to_string()))?;
    for r in rows {
        out.write_record([
            r.config_id.clone(),
            r.score_name.clone(),
            fmt_f64(r.value),
            r.n_windows.to_string(),
            r.seed.to_string(),
        ])
        .map_err(|e| Error::Parse(e.to_string()))?;
    }
    out.flush()?;
    Ok(())
}
