//! Empirical regularised potential, its log-gradient drift, and the inner
//! Euler–Maruyama integration of one coarse interval.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::conditioning::TerminalSurrogate;
use crate::error::{Error, Result};
use crate::linalg::mat_vec;
use crate::reference::FrozenInterval;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeStepConfig {
    pub n_inner: usize,
    pub epsilon: f64,
    #[serde(default)]
    pub drift_clip: Option<f64>,
}

impl BridgeStepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_inner == 0 {
            return Err(Error::Config("n_inner must be at least 1".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if self.drift_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("drift_clip must be positive".into()));
        }
        Ok(())
    }
}

/// Noise switch; `Off` exists for deterministic tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseMode {
    #[default]
    On,
    Off,
}

/// Surrogate atoms in the whitened coordinates of one interval.
struct Whitened {
    log_w: Vec<f64>,
    atoms: Vec<Vec<f64>>,
    norms: Vec<f64>,
}

impl Whitened {
    fn new(fi: &FrozenInterval, sur: &TerminalSurrogate) -> Result<Self> {
        if sur.is_empty() {
            return Err(Error::EmptySurrogate);
        }
        if sur.dim() != fi.dim() {
            return Err(Error::DimMismatch {
                expected: fi.dim(),
                got: sur.dim(),
            });
        }
        let w = fi.cov.inv_sqrt();
        let atoms: Vec<Vec<f64>> = sur.atoms.iter().map(|a| mat_vec(w, a)).collect();
        let norms = atoms.iter().map(|a| a.iter().map(|v| v * v).sum()).collect();
        Ok(Whitened {
            log_w: sur.weights.iter().map(|w| w.ln()).collect(),
            atoms,
            norms,
        })
    }

    /// Log-terms `log w_m + log Φ_m` at whitened offset `y = W(x − anchor)`.
    fn log_terms(&self, fi: &FrozenInterval, alpha: f64, y: &[f64]) -> Vec<f64> {
        let beta = fi.duration();
        let pre = 0.5 * fi.dim() as f64 * (beta / alpha).ln();
        self.atoms
            .iter()
            .zip(&self.norms)
            .zip(&self.log_w)
            .map(|((a, n), lw)| {
                let q: f64 = a.iter().zip(y).map(|(a, y)| (a - y).powi(2)).sum();
                lw - q / (2.0 * alpha) + n / (2.0 * beta) + pre
            })
            .collect()
    }

    fn offset(fi: &FrozenInterval, x: &[f64]) -> Vec<f64> {
        let dx: Vec<f64> = x.iter().zip(&fi.anchor).map(|(x, a)| x - a).collect();
        mat_vec(fi.cov.inv_sqrt(), &dx)
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|l| (l - m).exp()).sum::<f64>().ln()
}

fn check_x(fi: &FrozenInterval, x: &[f64]) -> Result<()> {
    if x.len() != fi.dim() {
        return Err(Error::DimMismatch {
            expected: fi.dim(),
            got: x.len(),
        });
    }
    Ok(())
}

pub fn log_empirical_potential(
    fi: &FrozenInterval,
    sur: &TerminalSurrogate,
    t: f64,
    x: &[f64],
) -> Result<f64> {
    let alpha = fi.remaining(t)?;
    check_x(fi, x)?;
    let wh = Whitened::new(fi, sur)?;
    let y = Whitened::offset(fi, x);
    Ok(log_sum_exp(&wh.log_terms(fi, alpha, &y)))
}

pub fn empirical_potential(fi: &FrozenInterval, sur: &TerminalSurrogate, t: f64, x: &[f64]) -> Result<f64> {
    log_empirical_potential(fi, sur, t, x).map(f64::exp)
}

fn drift_from(fi: &FrozenInterval, sur: &TerminalSurrogate, wh: &Whitened, alpha: f64, x: &[f64]) -> Vec<f64> {
    let y = Whitened::offset(fi, x);
    let terms = wh.log_terms(fi, alpha, &y);
    let lse = log_sum_exp(&terms);
    let mut target = fi.anchor.clone();
    for (l, a) in terms.iter().zip(&sur.atoms) {
        let r = (l - lse).exp();
        if r > 0.0 {
            for (t, v) in target.iter_mut().zip(a) {
                *t += r * v;
            }
        }
    }
    target.iter().zip(x).map(|(t, x)| (t - x) / alpha).collect()
}

/// `A^ε ∇ₓ log Ĥ`, assembled from potential-reweighted responsibilities.
pub fn empirical_drift(fi: &FrozenInterval, sur: &TerminalSurrogate, t: f64, x: &[f64]) -> Result<Vec<f64>> {
    let alpha = fi.remaining(t)?;
    check_x(fi, x)?;
    let wh = Whitened::new(fi, sur)?;
    Ok(drift_from(fi, sur, &wh, alpha, x))
}

/// Diagonal limit at the interval start: `(1/β)·Σ w_m δ_m`.
pub fn boundary_drift(fi: &FrozenInterval, sur: &TerminalSurrogate) -> Result<Vec<f64>> {
    if sur.is_empty() {
        return Err(Error::EmptySurrogate);
    }
    let beta = fi.duration();
    Ok(sur.mean().into_iter().map(|m| m / beta).collect())
}

fn clip(b: &mut [f64], c: Option<f64>, remaining: f64) {
    if let Some(c) = c {
        let cap = c / remaining.sqrt();
        let n = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > cap {
            for v in b.iter_mut() {
                *v *= cap / n;
            }
        }
    }
}

/// Integrates one coarse interval from its left state and returns the state
/// at `t_end`.
pub fn step_interval<R: Rng + ?Sized>(
    fi: &FrozenInterval,
    sur: &TerminalSurrogate,
    cfg: &BridgeStepConfig,
    x0: &[f64],
    rng: &mut R,
    noise: NoiseMode,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_x(fi, x0)?;
    let wh = Whitened::new(fi, sur)?;
    let d = fi.dim();
    let n = cfg.n_inner;
    let dtau = fi.duration() / n as f64;
    let sqrt_dtau = dtau.sqrt();
    let f = fi.cov.sqrt();
    let mut x = x0.to_vec();
    let mut xi = vec![0.0; d];
    for r in 0..n {
        let tau = fi.t_start + r as f64 * dtau;
        let alpha = fi.duration() - r as f64 * dtau;
        let mut b = if r == 0 {
            boundary_drift(fi, sur)?
        } else {
            drift_from(fi, sur, &wh, alpha, &x)
        };
        clip(&mut b, cfg.drift_clip, fi.t_end - tau);
        if noise == NoiseMode::On {
            for v in xi.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let z = mat_vec(f, &xi);
            for k in 0..d {
                x[k] += b[k] * dtau + z[k] * sqrt_dtau;
            }
        } else {
            for k in 0..d {
                x[k] += b[k] * dtau;
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { step: r });
        }
    }
    Ok(x)
}
