//! Synthetic data: a Hopf oscillator embedded in a noisy ambient space and
//! a Heston system with per-path parameters, plus per-path Heston
//! estimators.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::path::CoarsePath;
use crate::rng::{self, Rng};

const SIGNAL_STREAM: u64 = 1;
const PERP_STREAM: u64 = 2;
const HESTON_STREAM: u64 = 3;
const PRIOR_STREAM: u64 = 4;

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HopfConfig {
    pub dim: usize,
    pub dt: f64,
    pub years: f64,
    pub omega: f64,
    pub sigma_signal: f64,
    pub lambda_perp: f64,
    pub sigma_perp: f64,
    pub substeps: usize,
    pub seed: u64,
}

impl Default for HopfConfig {
    fn default() -> Self {
        HopfConfig {
            dim: 4,
            dt: 1.0 / 250.0,
            years: 4.0,
            omega: 2.0 * std::f64::consts::PI,
            sigma_signal: 1.0,
            lambda_perp: 50.0,
            sigma_perp: 1.0,
            substeps: 32,
            seed: 0,
        }
    }
}

impl HopfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config(format!("Hopf needs dim >= 2, got {}", self.dim)));
        }
        if !(self.dt > 0.0 && self.years > 0.0 && self.lambda_perp > 0.0) || self.substeps == 0 {
            return Err(Error::Config("Hopf dt, years, lambda_perp and substeps must be positive".into()));
        }
        if self.sigma_signal < 0.0 || self.sigma_perp < 0.0 {
            return Err(Error::Config("Hopf noise scales must be non-negative".into()));
        }
        Ok(())
    }

    pub fn n_steps(&self) -> usize {
        (self.years / self.dt).round() as usize
    }

    /// Stationary variance of each perpendicular coordinate.
    pub fn perp_variance(&self) -> f64 {
        self.sigma_perp * self.sigma_perp / (2.0 * self.lambda_perp)
    }
}

/// One coarse step of the signal block by fine Euler substeps.
pub fn hopf_signal_step(cfg: &HopfConfig, x: [f64; 2], rng: &mut Rng) -> [f64; 2] {
    let h = cfg.dt / cfg.substeps as f64;
    let sh = cfg.sigma_signal * h.sqrt();
    let [mut a, mut b] = x;
    // The rotation is applied exactly; the radial drift and the noise take
    // an Euler step. Plain Euler on the rotation inflates the radius by
    // about ω²h/2.
    let (c, s) = ((cfg.omega * h).cos(), (cfg.omega * h).sin());
    for _ in 0..cfg.substeps {
        let g = 1.0 + (1.0 - a * a - b * b) * h;
        let (za, zb) = if sh > 0.0 { (normal(rng), normal(rng)) } else { (0.0, 0.0) };
        let (ra, rb) = (g * a + sh * za, g * b + sh * zb);
        a = c * ra - s * rb;
        b = s * ra + c * rb;
    }
    [a, b]
}

/// Hopf path with `n_steps() + 1` states, started at `(1, 0)` with the
/// perpendicular block drawn from its stationary law. The signal and
/// perpendicular blocks use disjoint streams keyed by `path_id`.
pub fn simulate_hopf(cfg: &HopfConfig, path_id: u64) -> Result<CoarsePath> {
    cfg.validate()?;
    let mut sig = rng::derived(cfg.seed, &[SIGNAL_STREAM, path_id]);
    let mut perp = rng::derived(cfg.seed, &[PERP_STREAM, path_id]);
    let decay = (-cfg.lambda_perp * cfg.dt).exp();
    let sd_stat = cfg.perp_variance().sqrt();
    let sd_step = (cfg.perp_variance() * (1.0 - decay * decay)).sqrt();
    let mut x = [1.0, 0.0];
    let mut y: Vec<f64> = (2..cfg.dim).map(|_| sd_stat * normal(&mut perp)).collect();
    let n = cfg.n_steps();
    let mut states = Vec::with_capacity(n + 1);
    for k in 0..=n {
        if k > 0 {
            x = hopf_signal_step(cfg, x, &mut sig);
            for v in y.iter_mut() {
                *v = decay * *v + sd_step * normal(&mut perp);
            }
        }
        let mut s = Vec::with_capacity(cfg.dim);
        s.extend_from_slice(&x);
        s.extend_from_slice(&y);
        states.push(s);
    }
    CoarsePath::new(cfg.dt, states)
}

/// Monte Carlo estimate of the one-step energy score of the true
/// transition on the signal coordinates, normalised by `√2`, averaged over
/// the given conditioning states: `E‖X−z‖ − ½E‖X−X′‖` with `X, X′, z`
/// independent draws from the transition.
pub fn hopf_bayes_floor(cfg: &HopfConfig, states: &[Vec<f64>], n_mc: usize, seed: u64) -> Result<f64> {
    if states.is_empty() || n_mc == 0 {
        return Err(Error::EmptyInput("floor conditioning states"));
    }
    let mut acc = 0.0;
    for (k, s) in states.iter().enumerate() {
        let mut r = rng::derived(seed, &[k as u64]);
        let x0 = [s[0], s[1]];
        let mut loc = 0.0;
        for _ in 0..n_mc {
            let a = hopf_signal_step(cfg, x0, &mut r);
            let b = hopf_signal_step(cfg, x0, &mut r);
            let z = hopf_signal_step(cfg, x0, &mut r);
            let d = |u: [f64; 2], v: [f64; 2]| ((u[0] - v[0]).powi(2) + (u[1] - v[1]).powi(2)).sqrt();
            loc += d(a, z) - 0.5 * d(a, b);
        }
        acc += loc / n_mc as f64;
    }
    Ok(acc / states.len() as f64 / 2f64.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HestonParams {
    pub kappa: f64,
    pub theta: f64,
    pub xi: f64,
    pub rho: f64,
}

/// Uniform ranges for per-path parameter draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HestonPrior {
    pub kappa: (f64, f64),
    pub theta: (f64, f64),
    pub xi: (f64, f64),
    pub rho: (f64, f64),
}

impl Default for HestonPrior {
    fn default() -> Self {
        HestonPrior {
            kappa: (1.0, 4.0),
            theta: (0.02, 0.08),
            xi: (0.2, 0.5),
            rho: (-0.8, -0.3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HestonConfig {
    pub mu: f64,
    pub kappa: f64,
    pub theta: f64,
    pub xi: f64,
    pub rho: f64,
    /// When set, `(κ, θ, ξ, ρ)` are drawn per path and the fixed values are
    /// ignored.
    pub prior: Option<HestonPrior>,
    pub steps: usize,
    pub dt: f64,
    pub s0: f64,
    /// Initial variance; `θ` of the path when absent.
    pub v0: Option<f64>,
    pub substeps: usize,
    pub seed: u64,
}

impl Default for HestonConfig {
    fn default() -> Self {
        HestonConfig {
            mu: 0.05,
            kappa: 2.0,
            theta: 0.04,
            xi: 0.3,
            rho: -0.6,
            prior: None,
            steps: 252,
            dt: 1.0 / 252.0,
            s0: 100.0,
            v0: None,
            substeps: 16,
            seed: 0,
        }
    }
}

impl HestonConfig {
    fn check(p: &HestonParams) -> Result<()> {
        if !(p.kappa > 0.0 && p.theta > 0.0 && p.xi >= 0.0 && p.rho.abs() <= 1.0) {
            return Err(Error::Config(format!("invalid Heston parameters {p:?}")));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        Self::check(&self.fixed())?;
        if let Some(p) = &self.prior {
            for (lo, hi) in [p.kappa, p.theta, p.xi, p.rho] {
                if !(lo <= hi) {
                    return Err(Error::Config(format!("empty prior range ({lo}, {hi})")));
                }
            }
            Self::check(&HestonParams {
                kappa: p.kappa.0,
                theta: p.theta.0,
                xi: p.xi.0,
                rho: p.rho.0,
            })?;
            Self::check(&HestonParams {
                kappa: p.kappa.1,
                theta: p.theta.1,
                xi: p.xi.1,
                rho: p.rho.1,
            })?;
        }
        if !(self.dt > 0.0 && self.s0 > 0.0) || self.substeps == 0 || self.steps == 0 {
            return Err(Error::Config("Heston dt, s0, steps and substeps must be positive".into()));
        }
        Ok(())
    }

    pub fn fixed(&self) -> HestonParams {
        HestonParams {
            kappa: self.kappa,
            theta: self.theta,
            xi: self.xi,
            rho: self.rho,
        }
    }

    /// Parameters of path `path_id`.
    pub fn params(&self, path_id: u64) -> HestonParams {
        match &self.prior {
            None => self.fixed(),
            Some(p) => {
                let mut r = rng::derived(self.seed, &[PRIOR_STREAM, path_id]);
                let mut u = |(lo, hi): (f64, f64)| if hi > lo { r.random_range(lo..hi) } else { lo };
                HestonParams {
                    kappa: u(p.kappa),
                    theta: u(p.theta),
                    xi: u(p.xi),
                    rho: u(p.rho),
                }
            }
        }
    }
}

/// Heston path of `ζ = (log S, V)` with `steps + 1` states by
/// full-truncation Euler, and the parameters it was drawn with.
pub fn simulate_heston(cfg: &HestonConfig, path_id: u64) -> Result<(CoarsePath, HestonParams)> {
    cfg.validate()?;
    let p = cfg.params(path_id);
    let mut r = rng::derived(cfg.seed, &[HESTON_STREAM, path_id]);
    let h = cfg.dt / cfg.substeps as f64;
    let sq = h.sqrt();
    let rho_c = (1.0 - p.rho * p.rho).max(0.0).sqrt();
    let mut ls = cfg.s0.ln();
    let mut v = cfg.v0.unwrap_or(p.theta);
    let mut states = Vec::with_capacity(cfg.steps + 1);
    states.push(vec![ls, v]);
    for _ in 0..cfg.steps {
        for _ in 0..cfg.substeps {
            let (z1, z2) = (normal(&mut r), normal(&mut r));
            let zv = p.rho * z1 + rho_c * z2;
            let vp = v.max(0.0);
            ls += (cfg.mu - 0.5 * vp) * h + vp.sqrt() * sq * z1;
            v += p.kappa * (p.theta - vp) * h + p.xi * vp.sqrt() * sq * zv;
        }
        states.push(vec![ls, v]);
    }
    Ok((CoarsePath::new(cfg.dt, states)?, p))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HestonEstimate {
    pub kappa: f64,
    pub theta: f64,
    pub xi: f64,
    pub rho: f64,
    /// `κ̂` hit a clamp bound (degenerate regression).
    pub kappa_clamped: bool,
}

impl HestonEstimate {
    pub fn as_array(&self) -> [f64; 4] {
        [self.kappa, self.theta, self.xi, self.rho]
    }
}

pub const KAPPA_BOUNDS: (f64, f64) = (1e-3, 1e3);
const V_FLOOR: f64 = 1e-10;
/// Floor of the normalising variance in `ρ̂`, as a fraction of `θ̂`.
const RHO_NORM_FLOOR: f64 = 0.01;

/// Moment and AR(1) regression estimates of `(κ, θ, ξ, ρ)` from one path
/// of `(log S, V)`.
pub fn estimate_heston(path: &CoarsePath, dt: f64) -> Result<HestonEstimate> {
    if path.len() < 32 {
        return Err(Error::DegeneratePath("Heston estimation needs at least 32 states"));
    }
    if path.dim() != 2 || !(dt > 0.0) {
        return Err(Error::DegeneratePath("expected (log S, V) states and positive dt"));
    }
    let v: Vec<f64> = path.states.iter().map(|s| s[1].max(V_FLOOR)).collect();
    let ls: Vec<f64> = path.states.iter().map(|s| s[0]).collect();
    if v.iter().chain(&ls).any(|x| !x.is_finite()) {
        return Err(Error::DegeneratePath("non-finite state"));
    }
    let n = v.len() as f64;
    let theta = v.iter().sum::<f64>() / n;

    let (x, y) = (&v[..v.len() - 1], &v[1..]);
    let m = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / m, y.iter().sum::<f64>() / m);
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    // A flat variance series carries no mean-reversion information.
    let slope = if sxx > 1e-20 * m * mx * mx { sxy / sxx } else { 0.0 };
    let raw = if slope > 0.0 { -slope.ln() / dt } else { f64::INFINITY };
    let kappa = raw.clamp(KAPPA_BOUNDS.0, KAPPA_BOUNDS.1);
    let kappa_clamped = !(raw > KAPPA_BOUNDS.0 && raw < KAPPA_BOUNDS.1);
    let intercept = my - slope * mx;
    let resid: Vec<f64> = x.iter().zip(y).map(|(a, b)| b - intercept - slope * a).collect();
    let var_r = resid.iter().map(|e| e * e).sum::<f64>() / m;
    let xi = (var_r / (theta * dt)).sqrt();

    let mut es = Vec::with_capacity(x.len());
    let mut ev = Vec::with_capacity(x.len());
    // Near-zero variances would turn single steps into huge outliers.
    let v_norm = RHO_NORM_FLOOR * theta;
    for k in 0..x.len() {
        let s = (x[k].max(v_norm) * dt).sqrt();
        es.push((ls[k + 1] - ls[k] + 0.5 * x[k] * dt) / s);
        ev.push(resid[k] / s);
    }
    let rho = correlation(&es, &ev);
    Ok(HestonEstimate {
        kappa,
        theta,
        xi,
        rho,
        kappa_clamped,
    })
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa > 0.0 && sbb > 0.0 {
        (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
    } else {
        0.0
    }
}
