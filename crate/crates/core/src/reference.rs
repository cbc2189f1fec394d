//! Intervalwise frozen Gaussian references.
//!
//! On `[t_start, t_end)` the reference diffuses with the constant floored
//! covariance `A^ε`. The coherent Doob kernel ratio compares the transition
//! density to the interval's terminal point from `(t, x)` with the one from
//! the interval's left state; both share `A^ε`, so the normalisations cancel
//! and everything is evaluated as a single exponential in log space.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{self, mat_vec, quad_form, FlooredPsd, SymMatrix};

#[derive(Debug, Clone)]
pub struct FrozenInterval {
    pub t_start: f64,
    pub t_end: f64,
    pub cov: Arc<FlooredPsd>,
    pub anchor: Vec<f64>,
}

impl FrozenInterval {
    pub fn new(t_start: f64, t_end: f64, cov: Arc<FlooredPsd>, anchor: Vec<f64>) -> Result<Self> {
        if !(t_end > t_start) {
            return Err(Error::Config(format!(
                "interval must have positive duration: [{t_start}, {t_end})"
            )));
        }
        if cov.dim() != anchor.len() {
            return Err(Error::DimMismatch {
                expected: cov.dim(),
                got: anchor.len(),
            });
        }
        Ok(FrozenInterval {
            t_start,
            t_end,
            cov,
            anchor,
        })
    }

    pub fn dim(&self) -> usize {
        self.anchor.len()
    }

    /// Interval length `β`.
    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }

    /// Remaining time `α = t_end − t`, checking `t ∈ [t_start, t_end)`.
    pub fn remaining(&self, t: f64) -> Result<f64> {
        if t < self.t_start || t >= self.t_end {
            return Err(Error::TimeOutOfRange {
                t,
                start: self.t_start,
                end: self.t_end,
            });
        }
        Ok(self.t_end - t)
    }

    fn check(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                got: v.len(),
            });
        }
        Ok(())
    }
}

/// `log Φ^ε(t, x, δ)`.
pub fn log_kernel_ratio(fi: &FrozenInterval, t: f64, x: &[f64], delta: &[f64]) -> Result<f64> {
    let alpha = fi.remaining(t)?;
    fi.check(x)?;
    fi.check(delta)?;
    let beta = fi.duration();
    let r: Vec<f64> = (0..fi.dim())
        .map(|k| fi.anchor[k] + delta[k] - x[k])
        .collect();
    let q_now = quad_form(fi.cov.inv(), &r);
    let q_start = quad_form(fi.cov.inv(), delta);
    let d = fi.dim() as f64;
    Ok(-q_now / (2.0 * alpha) + q_start / (2.0 * beta) + 0.5 * d * (beta / alpha).ln())
}

pub fn kernel_ratio(fi: &FrozenInterval, t: f64, x: &[f64], delta: &[f64]) -> Result<f64> {
    log_kernel_ratio(fi, t, x, delta).map(f64::exp)
}

/// `∇ₓ log Φ^ε = (1/α)·(A^ε)⁻¹·(anchor + δ − x)`.
pub fn kernel_ratio_grad(
    fi: &FrozenInterval,
    t: f64,
    x: &[f64],
    delta: &[f64],
) -> Result<Vec<f64>> {
    let alpha = fi.remaining(t)?;
    fi.check(x)?;
    fi.check(delta)?;
    let r: Vec<f64> = (0..fi.dim())
        .map(|k| fi.anchor[k] + delta[k] - x[k])
        .collect();
    Ok(mat_vec(fi.cov.inv(), &r)
        .into_iter()
        .map(|g| g / alpha)
        .collect())
}

/// Covariance cumulant `Γ` given at knots and linear in between.
#[derive(Debug, Clone)]
pub struct CumulantPath {
    knots: Vec<f64>,
    gammas: Vec<SymMatrix>,
}

impl CumulantPath {
    pub fn new(knots: Vec<f64>, gammas: Vec<SymMatrix>) -> Result<Self> {
        if knots.len() < 2 || knots.len() != gammas.len() {
            return Err(Error::KnotMismatch(format!(
                "{} knots for {} cumulants (need ≥ 2, equal counts)",
                knots.len(),
                gammas.len()
            )));
        }
        if knots.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::KnotMismatch("knots must be strictly ascending".into()));
        }
        let d = gammas[0].dim();
        if gammas.iter().any(|g| g.dim() != d) {
            return Err(Error::KnotMismatch("cumulants differ in dimension".into()));
        }
        if gammas[0].norm_fro() > 1e-12 {
            return Err(Error::KnotMismatch("cumulant must vanish at the first knot".into()));
        }
        for w in gammas.windows(2) {
            let step = w[1].sub(&w[0]);
            if step.min_eig() < -1e-10 * step.norm_op().max(1.0) {
                return Err(Error::KnotMismatch("cumulant is not PSD-nondecreasing".into()));
            }
        }
        Ok(CumulantPath { knots, gammas })
    }

    /// The one-piece frozen cumulant `Γ_t = ((t − S)/Δ)·C`.
    pub fn one_piece(t_start: f64, t_end: f64, terminal: SymMatrix) -> Result<Self> {
        let d = terminal.dim();
        Self::new(vec![t_start, t_end], vec![SymMatrix::zeros(d), terminal])
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn t_start(&self) -> f64 {
        self.knots[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.knots.last().expect("≥ 2 knots")
    }

    pub fn terminal(&self) -> &SymMatrix {
        self.gammas.last().expect("≥ 2 knots")
    }

    pub fn dim(&self) -> usize {
        self.gammas[0].dim()
    }

    pub fn gamma_at(&self, t: f64) -> Result<DMatrix<f64>> {
        if t < self.t_start() || t > self.t_end() {
            return Err(Error::TimeOutOfRange {
                t,
                start: self.t_start(),
                end: self.t_end(),
            });
        }
        let k = match self.knots.iter().rposition(|&s| s <= t) {
            Some(k) if k + 1 < self.knots.len() => k,
            _ => return Ok(self.terminal().matrix().clone()),
        };
        let (s0, s1) = (self.knots[k], self.knots[k + 1]);
        let w = (t - s0) / (s1 - s0);
        Ok(self.gammas[k].matrix() * (1.0 - w) + self.gammas[k + 1].matrix() * w)
    }
}

/// Mean of the Gaussian bridge from `x` at `t_start` to `z` at `t_end`:
/// `x + Γ(t)·C⁺·(z − x)`.
pub fn frozen_bridge_mean(cum: &CumulantPath, t: f64, x: &[f64], z: &[f64]) -> Result<Vec<f64>> {
    let d = cum.dim();
    for v in [x, z] {
        if v.len() != d {
            return Err(Error::DimMismatch {
                expected: d,
                got: v.len(),
            });
        }
    }
    let c = cum.terminal();
    let c_pinv = linalg::pinv(c);
    let dz: Vec<f64> = z.iter().zip(x).map(|(a, b)| a - b).collect();
    let projected = mat_vec(&(c.matrix() * &c_pinv), &dz);
    let residual: f64 = dz
        .iter()
        .zip(&projected)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let norm = dz.iter().map(|a| a * a).sum::<f64>().sqrt();
    if residual > 1e-8 * norm {
        return Err(Error::EndpointOffLeaf {
            residual: residual / norm,
        });
    }
    let gamma = cum.gamma_at(t)?;
    let shift = mat_vec(&(gamma * c_pinv), &dz);
    Ok(x.iter().zip(shift).map(|(a, s)| a + s).collect())
}

/// `sup_t ‖(Γ_fine(t) − Γ_coarse(t))·C^{+1/2}‖_op` over the knots of
/// `fine`, where both paths interpolate linearly and `fine` refines `coarse`.
pub fn cumulant_interp_error(coarse: &CumulantPath, fine: &CumulantPath) -> Result<f64> {
    if coarse.dim() != fine.dim() {
        return Err(Error::KnotMismatch("dimensions differ".into()));
    }
    let tol = 1e-12 * (1.0 + fine.t_end().abs());
    for &k in coarse.knots() {
        if !fine.knots().iter().any(|&f| (f - k).abs() <= tol) {
            return Err(Error::KnotMismatch(format!(
                "coarse knot {k} missing from the refinement"
            )));
        }
    }
    if (coarse.t_start() - fine.t_start()).abs() > tol || (coarse.t_end() - fine.t_end()).abs() > tol
    {
        return Err(Error::KnotMismatch("paths cover different intervals".into()));
    }
    let c = fine.terminal();
    if c.dist_fro(coarse.terminal()) > 1e-10 * c.norm_fro().max(1.0) {
        return Err(Error::KnotMismatch("terminal cumulants differ".into()));
    }
    let c_half = linalg::pinv_sqrt(c);
    let mut sup = 0.0f64;
    for &t in fine.knots() {
        let t = t.clamp(coarse.t_start(), coarse.t_end());
        let diff = fine.gamma_at(t)? - coarse.gamma_at(t)?;
        sup = sup.max(linalg::op_norm(&(diff * &c_half)));
    }
    Ok(sup)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::spectral_floor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn interval(cov: SymMatrix, eps: f64, anchor: Vec<f64>, t0: f64, t1: f64) -> FrozenInterval {
        FrozenInterval::new(t0, t1, Arc::new(spectral_floor(&cov, eps)), anchor).unwrap()
    }

    /// Full Gaussian log-density of the increment `δ` from `(t, x)`, using a
    /// Cholesky solve of the floored covariance.
    fn log_density(fi: &FrozenInterval, t: f64, x: &[f64], delta: &[f64]) -> f64 {
        let d = fi.dim();
        let tau = fi.t_end - t;
        let cov = fi.cov.matrix() * tau;
        let chol = cov.clone().cholesky().unwrap();
        let r = nalgebra::DVector::from_fn(d, |k, _| fi.anchor[k] + delta[k] - x[k]);
        let sol = chol.solve(&r);
        let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        -0.5 * r.dot(&sol) - 0.5 * logdet - 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln()
    }

    #[test]
    fn ratio_is_one_at_interval_start() {
        let fi = interval(SymMatrix::diag(&[2.0, 0.5]), 0.01, vec![0.3, -1.0], 0.0, 1.0);
        for delta in [[0.0, 0.0], [1.0, -2.0], [5.0, 3.0]] {
            let r = kernel_ratio(&fi, 0.0, &fi.anchor.clone(), &delta).unwrap();
            assert!((r - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn ratio_prefactor_at_half_time() {
        let d = 3;
        let fi = interval(SymMatrix::identity(d), 0.01, vec![0.0; d], 0.0, 2.0);
        let r = kernel_ratio(&fi, 1.0, &[0.0; 3], &[0.0; 3]).unwrap();
        assert!((r - 2f64.powf(d as f64 / 2.0)).abs() < 1e-13);
    }

    #[test]
    fn ratio_matches_two_density_quotient() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let b = DMatrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0));
            let cov = SymMatrix::new(&b * b.transpose());
            let anchor: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fi = interval(cov, 0.05, anchor, 0.0, 1.0);
            let t = rng.random_range(0.0..0.9);
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let delta: Vec<f64> = (0..3).map(|_| rng.random_range(-0.5..0.5)).collect();
            let got = log_kernel_ratio(&fi, t, &x, &delta).unwrap();
            let want = log_density(&fi, t, &x, &delta)
                - log_density(&fi, 0.0, &fi.anchor.clone(), &delta);
            assert!((got - want).abs() < 1e-9 * (1.0 + want.abs()), "{got} vs {want}");
        }
    }

    #[test]
    fn ratio_rejects_times_outside_interval() {
        let fi = interval(SymMatrix::identity(1), 0.1, vec![0.0], 0.0, 1.0);
        assert!(matches!(
            kernel_ratio(&fi, 1.0, &[0.0], &[0.0]),
            Err(Error::TimeOutOfRange { .. })
        ));
        assert!(kernel_ratio(&fi, -0.1, &[0.0], &[0.0]).is_err());
    }

    #[test]
    fn gradient_examples_and_finite_differences() {
        let fi = interval(SymMatrix::identity(1), 1e-6, vec![0.0], 0.0, 2.0);
        let g = kernel_ratio_grad(&fi, 1.0, &[1.0], &[2.0]).unwrap();
        assert!((g[0] - 1.0).abs() < 1e-14);
        let fi2 = interval(SymMatrix::diag(&[1.0, 3.0]), 0.1, vec![0.2, 0.1], 0.0, 1.0);
        let g = kernel_ratio_grad(&fi2, 0.5, &[1.2, 0.6], &[1.0, 0.5]).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-14));

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let h = 1e-5;
        for _ in 0..50 {
            let b = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
            let fi = interval(SymMatrix::new(&b * b.transpose()), 0.1, vec![0.0; 3], 0.0, 1.0);
            let t = rng.random_range(0.0..0.8);
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let delta: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g = kernel_ratio_grad(&fi, t, &x, &delta).unwrap();
            let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            for k in 0..3 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += h;
                xm[k] -= h;
                let fd = (log_kernel_ratio(&fi, t, &xp, &delta).unwrap()
                    - log_kernel_ratio(&fi, t, &xm, &delta).unwrap())
                    / (2.0 * h);
                assert!((fd - g[k]).abs() <= 1e-6 * gnorm.max(1.0), "{fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn log_ratio_is_concave_in_delta() {
        // Hessian in δ is -(1/α − 1/β)·A⁻¹, negative definite for α < β.
        let fi = interval(SymMatrix::diag(&[1.0, 0.2]), 0.05, vec![0.0, 0.0], 0.0, 1.0);
        let (t, x) = (0.4, [0.3, -0.2]);
        let alpha = fi.t_end - t;
        assert!(1.0 / alpha - 1.0 / fi.duration() > 0.0);
        let h = 1e-3;
        for k in 0..2 {
            let mut dp = [0.1, 0.1];
            let mut dm = [0.1, 0.1];
            dp[k] += h;
            dm[k] -= h;
            let f0 = log_kernel_ratio(&fi, t, &x, &[0.1, 0.1]).unwrap();
            let fp = log_kernel_ratio(&fi, t, &x, &dp).unwrap();
            let fm = log_kernel_ratio(&fi, t, &x, &dm).unwrap();
            let second = (fp - 2.0 * f0 + fm) / (h * h);
            let want = -(1.0 / alpha - 1.0) * fi.cov.inv()[(k, k)];
            assert!(second < 0.0);
            assert!((second - want).abs() < 1e-4 * want.abs());
        }
    }

    #[test]
    fn ratio_is_floor_independent_on_the_leaf() {
        // Rank-2 covariance in R³; anchor, x − anchor and δ on its range.
        let v1 = [1.0, 0.0, 1.0];
        let v2 = [0.0, 2.0, 0.0];
        let cov = SymMatrix::outer(&v1).add(&SymMatrix::outer(&v2));
        let lam_min = cov.eig().values[1];
        let anchor = vec![0.5, -0.5, 0.5];
        let on_leaf = |a: f64, b: f64| -> Vec<f64> { (0..3).map(|k| a * v1[k] + b * v2[k]).collect() };
        let x: Vec<f64> = anchor.iter().zip(on_leaf(0.2, -0.1)).map(|(a, b)| a + b).collect();
        let delta = on_leaf(0.4, 0.3);
        let a = interval(cov.clone(), 0.1 * lam_min, anchor.clone(), 0.0, 1.0);
        let b = interval(cov, 0.01 * lam_min, anchor, 0.0, 1.0);
        let ra = kernel_ratio(&a, 0.3, &x, &delta).unwrap();
        let rb = kernel_ratio(&b, 0.3, &x, &delta).unwrap();
        assert!((ra / rb - 1.0).abs() < 1e-10);
    }

    #[test]
    fn one_piece_bridge_mean_is_linear() {
        let c = SymMatrix::diag(&[2.0, 0.5]);
        let cum = CumulantPath::one_piece(1.0, 3.0, c).unwrap();
        let (x, z) = ([0.0, 1.0], [2.0, -1.0]);
        for t in [1.0, 1.5, 2.2, 3.0] {
            let m = frozen_bridge_mean(&cum, t, &x, &z).unwrap();
            let w = (t - 1.0) / 2.0;
            for k in 0..2 {
                assert!((m[k] - (x[k] + w * (z[k] - x[k]))).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn bridge_mean_hits_endpoint_and_rejects_off_leaf() {
        let c = SymMatrix::outer(&[1.0, 1.0]);
        let cum = CumulantPath::one_piece(0.0, 1.0, c).unwrap();
        let m = frozen_bridge_mean(&cum, 1.0, &[0.0, 0.0], &[0.7, 0.7]).unwrap();
        assert!((m[0] - 0.7).abs() < 1e-12 && (m[1] - 0.7).abs() < 1e-12);
        assert!(matches!(
            frozen_bridge_mean(&cum, 0.5, &[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::EndpointOffLeaf { .. })
        ));
    }

    #[test]
    fn two_knot_bridge_mean_matches_hand_evaluation() {
        // Γ(t) = diag(t², t) on [0, 1], sampled at {0, 0.5, 1}.
        let g = |t: f64| SymMatrix::diag(&[t * t, t]);
        let cum = CumulantPath::new(vec![0.0, 0.5, 1.0], vec![g(0.0), g(0.5), g(1.0)]).unwrap();
        let (x, z) = ([1.0, 2.0], [3.0, 6.0]);
        // t = 0.25: Γ^P = diag(0.125, 0.25); C⁺ = I.
        let m = frozen_bridge_mean(&cum, 0.25, &x, &z).unwrap();
        assert!((m[0] - (1.0 + 0.125 * 2.0)).abs() < 1e-13);
        assert!((m[1] - (2.0 + 0.25 * 4.0)).abs() < 1e-13);
        // t = 0.75: Γ^P = diag(0.625, 0.75).
        let m = frozen_bridge_mean(&cum, 0.75, &x, &z).unwrap();
        assert!((m[0] - (1.0 + 0.625 * 2.0)).abs() < 1e-13);
        assert!((m[1] - (2.0 + 0.75 * 4.0)).abs() < 1e-13);
    }

    #[test]
    fn cumulant_error_examples() {
        let g = |t: f64| SymMatrix::diag(&[t * t, t]);
        let knots: Vec<f64> = (0..=10).map(|k| k as f64 / 10.0).collect();
        let fine = CumulantPath::new(knots.clone(), knots.iter().map(|&t| g(t)).collect()).unwrap();
        assert_eq!(cumulant_interp_error(&fine, &fine).unwrap(), 0.0);

        let lin = |t: f64| SymMatrix::diag(&[2.0 * t, t]);
        let fine_lin =
            CumulantPath::new(knots.clone(), knots.iter().map(|&t| lin(t)).collect()).unwrap();
        let coarse_lin = CumulantPath::one_piece(0.0, 1.0, lin(1.0)).unwrap();
        assert!(cumulant_interp_error(&coarse_lin, &fine_lin).unwrap() < 1e-14);

        // Dense-grid oracle over 1000 sample times.
        let coarse = CumulantPath::one_piece(0.0, 1.0, g(1.0)).unwrap();
        let eta = cumulant_interp_error(&coarse, &fine).unwrap();
        let c_half = linalg::pinv_sqrt(fine.terminal());
        let dense = (0..=1000)
            .map(|k| {
                let t = k as f64 / 1000.0;
                let diff = fine.gamma_at(t).unwrap() - coarse.gamma_at(t).unwrap();
                linalg::op_norm(&(diff * &c_half))
            })
            .fold(0.0, f64::max);
        assert!(eta > 0.2);
        assert!((eta - dense).abs() < 1e-12);

        let bad = CumulantPath::new(vec![0.0, 0.33, 1.0], vec![g(0.0), g(0.33), g(1.0)]).unwrap();
        assert!(matches!(
            cumulant_interp_error(&bad, &fine),
            Err(Error::KnotMismatch(_))
        ));
    }

    #[test]
    fn bridge_mean_stability_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let d = 3;
            let n = 8;
            // Random nondecreasing cumulant: sums of random PSD increments.
            let mut gammas = vec![SymMatrix::zeros(d)];
            for _ in 0..n {
                let b = DMatrix::from_fn(d, 2, |_, _| rng.random_range(-1.0..1.0));
                let inc = SymMatrix::new(&b * b.transpose());
                gammas.push(gammas.last().unwrap().add(&inc));
            }
            let knots: Vec<f64> = (0..=n).map(|k| k as f64 / n as f64).collect();
            let fine = CumulantPath::new(knots.clone(), gammas.clone()).unwrap();
            let mid = n / 2;
            let coarse = CumulantPath::new(
                vec![0.0, knots[mid], 1.0],
                vec![gammas[0].clone(), gammas[mid].clone(), gammas[n].clone()],
            )
            .unwrap();
            let eta = cumulant_interp_error(&coarse, &fine).unwrap();
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let z: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let dz: Vec<f64> = z.iter().zip(&x).map(|(a, b)| a - b).collect();
            let r = mat_vec(&linalg::pinv_sqrt(fine.terminal()), &dz)
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            for k in 0..=200 {
                let t = k as f64 / 200.0;
                let m = frozen_bridge_mean(&fine, t, &x, &z).unwrap();
                let mp = frozen_bridge_mean(&coarse, t, &x, &z).unwrap();
                let gap = m
                    .iter()
                    .zip(&mp)
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                assert!(gap <= eta * r * (1.0 + 1e-9) + 1e-12);
            }
        }
    }
}
