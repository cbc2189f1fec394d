//! Degenerate-PSD linear algebra.
//!
//! [`SymMatrix`] is a dense symmetric matrix with a lazily cached spectral
//! decomposition; [`FlooredPsd`] is the spectrally floored, uniformly
//! elliptic version of a PSD matrix together with the inverse, square root
//! and log-determinant every downstream Gaussian computation needs.
//!
//! Eigenvalues are always reported in ascending order. Eigenvectors of
//! repeated eigenvalues are not canonicalised, so only reconstructed
//! matrices are meaningful to compare.

use std::fmt;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Relative tolerance below which a negative eigenvalue is still treated as
/// rounding noise around a PSD matrix.
pub const PSD_TOLERANCE: f64 = 1e-6;

/// Relative eigenvalue cutoff used by Moore–Penrose pseudo-inverses.
pub const PINV_CUTOFF: f64 = 1e-12;

/// Spectral decomposition with eigenvalues ascending and eigenvectors stored
/// as the matching columns of `vectors`.
#[derive(Debug, Clone)]
pub struct Eigen {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

impl Eigen {
    fn of(m: &DMatrix<f64>) -> Self {
        let n = m.nrows();
        let se = SymmetricEigen::new(m.clone());
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| se.eigenvalues[a].total_cmp(&se.eigenvalues[b]));
        let values = order.iter().map(|&k| se.eigenvalues[k]).collect();
        let vectors = DMatrix::from_fn(n, n, |i, j| se.eigenvectors[(i, order[j])]);
        Eigen { values, vectors }
    }

    /// `Q · diag(f(λ)) · Qᵀ`, symmetrised.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let mapped: Vec<f64> = self.values.iter().map(|&l| f(l)).collect();
        compose(&self.vectors, &mapped)
    }
}

fn compose(q: &DMatrix<f64>, diag: &[f64]) -> DMatrix<f64> {
    let mut scaled = q.clone();
    for (j, &d) in diag.iter().enumerate() {
        scaled.column_mut(j).scale_mut(d);
    }
    symmetrize(scaled * q.transpose())
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    DMatrix::from_fn(n, n, |i, j| 0.5 * (m[(i, j)] + m[(j, i)]))
}

/// Dense symmetric matrix with a cached eigendecomposition.
pub struct SymMatrix {
    m: DMatrix<f64>,
    eig: OnceLock<Eigen>,
}

impl SymMatrix {
    /// Symmetrises `m` as `(m + mᵀ)/2`.
    ///
    /// # Panics
    /// If `m` is not square.
    pub fn new(m: DMatrix<f64>) -> Self {
        assert_eq!(m.nrows(), m.ncols(), "SymMatrix requires a square matrix");
        SymMatrix {
            m: symmetrize(m),
            eig: OnceLock::new(),
        }
    }

    fn with_eigen(m: DMatrix<f64>, eig: Eigen) -> Self {
        let cell = OnceLock::new();
        let _ = cell.set(eig);
        SymMatrix { m, eig: cell }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != n) {
            return Err(Error::DimMismatch {
                expected: n,
                got: bad.len(),
            });
        }
        Ok(Self::new(DMatrix::from_fn(n, n, |i, j| rows[i][j])))
    }

    pub fn from_fn(n: usize, f: impl FnMut(usize, usize) -> f64) -> Self {
        Self::new(DMatrix::from_fn(n, n, f))
    }

    pub fn identity(n: usize) -> Self {
        Self::new(DMatrix::identity(n, n))
    }

    pub fn zeros(n: usize) -> Self {
        Self::new(DMatrix::zeros(n, n))
    }

    pub fn diag(d: &[f64]) -> Self {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(d)))
    }

    /// `v · vᵀ`.
    pub fn outer(v: &[f64]) -> Self {
        let n = v.len();
        Self::new(DMatrix::from_fn(n, n, |i, j| v[i] * v[j]))
    }

    /// Builds `Q · diag(values) · Qᵀ`.
    pub fn from_spectrum(values: &[f64], vectors: &DMatrix<f64>) -> Self {
        Self::new(compose(vectors, values))
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.m[(i, j)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim())
            .map(|i| (0..self.dim()).map(|j| self.m[(i, j)]).collect())
            .collect()
    }

    pub fn eig(&self) -> &Eigen {
        self.eig.get_or_init(|| Eigen::of(&self.m))
    }

    pub fn min_eig(&self) -> f64 {
        self.eig().values.first().copied().unwrap_or(0.0)
    }

    pub fn max_eig(&self) -> f64 {
        self.eig().values.last().copied().unwrap_or(0.0)
    }

    /// Spectral norm.
    pub fn norm_op(&self) -> f64 {
        let e = &self.eig().values;
        e.first()
            .map(|l| l.abs())
            .unwrap_or(0.0)
            .max(e.last().map(|l| l.abs()).unwrap_or(0.0))
    }

    pub fn norm_fro(&self) -> f64 {
        self.m.norm()
    }

    pub fn trace(&self) -> f64 {
        self.m.trace()
    }

    pub fn dist_fro(&self, other: &SymMatrix) -> f64 {
        (&self.m - &other.m).norm()
    }

    pub fn scale(&self, s: f64) -> SymMatrix {
        SymMatrix::new(&self.m * s)
    }

    pub fn add(&self, other: &SymMatrix) -> SymMatrix {
        SymMatrix::new(&self.m + &other.m)
    }

    pub fn sub(&self, other: &SymMatrix) -> SymMatrix {
        SymMatrix::new(&self.m - &other.m)
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        mat_vec(&self.m, v)
    }
}

impl Clone for SymMatrix {
    fn clone(&self) -> Self {
        SymMatrix {
            m: self.m.clone(),
            eig: self.eig.clone(),
        }
    }
}

impl PartialEq for SymMatrix {
    fn eq(&self, other: &Self) -> bool {
        self.m == other.m
    }
}

impl fmt::Debug for SymMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SymMatrix")
            .field("rows", &self.to_rows())
            .finish()
    }
}

#[derive(Serialize, Deserialize)]
struct PackedSym {
    dim: usize,
    vech: Vec<f64>,
}

impl Serialize for SymMatrix {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        PackedSym {
            dim: self.dim(),
            vech: vech(self),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SymMatrix {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let p = PackedSym::deserialize(d)?;
        let m = unvech(&p.vech).map_err(serde::de::Error::custom)?;
        if m.dim() != p.dim {
            return Err(serde::de::Error::custom("vech length does not match dim"));
        }
        Ok(m)
    }
}

pub(crate) fn mat_vec(m: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    debug_assert_eq!(m.ncols(), v.len());
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)] * v[j]).sum())
        .collect()
}

pub(crate) fn quad_form(m: &DMatrix<f64>, v: &[f64]) -> f64 {
    let n = v.len();
    let mut acc = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            row += m[(i, j)] * v[j];
        }
        acc += v[i] * row;
    }
    acc
}

/// Spectrally floored PSD matrix: eigenvalues `λ ↦ max(λ⁺, ε)`.
#[derive(Clone)]
pub struct FlooredPsd {
    base: SymMatrix,
    epsilon: f64,
    floored_eigs: Vec<f64>,
    logdet: f64,
    floored: DMatrix<f64>,
    inv: DMatrix<f64>,
    sqrt: DMatrix<f64>,
    inv_sqrt: DMatrix<f64>,
}

impl FlooredPsd {
    /// PSD projection of the input.
    pub fn base(&self) -> &SymMatrix {
        &self.base
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    /// Floored eigenvalues, ascending.
    pub fn floored_eigs(&self) -> &[f64] {
        &self.floored_eigs
    }

    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    /// The floored matrix itself.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.floored
    }

    pub fn inv(&self) -> &DMatrix<f64> {
        &self.inv
    }

    pub fn sqrt(&self) -> &DMatrix<f64> {
        &self.sqrt
    }

    pub fn inv_sqrt(&self) -> &DMatrix<f64> {
        &self.inv_sqrt
    }

    /// Floor of `s · M` at `s · ε` for `s > 0`; the eigenbasis is shared.
    pub fn scaled(&self, s: f64) -> FlooredPsd {
        assert!(s > 0.0, "scale must be positive");
        let eig = self.base.eig();
        let base_vals: Vec<f64> = eig.values.iter().map(|l| l * s).collect();
        let base = SymMatrix::with_eigen(
            symmetrize(self.base.matrix() * s),
            Eigen {
                values: base_vals,
                vectors: eig.vectors.clone(),
            },
        );
        let f: Vec<f64> = self.floored_eigs.iter().map(|l| l * s).collect();
        Self::assemble(base, self.epsilon * s, f)
    }

    fn assemble(base: SymMatrix, epsilon: f64, floored_eigs: Vec<f64>) -> FlooredPsd {
        let q = &base.eig().vectors;
        let inv_d: Vec<f64> = floored_eigs.iter().map(|l| 1.0 / l).collect();
        let sqrt_d: Vec<f64> = floored_eigs.iter().map(|l| l.sqrt()).collect();
        let isq_d: Vec<f64> = floored_eigs.iter().map(|l| 1.0 / l.sqrt()).collect();
        FlooredPsd {
            logdet: floored_eigs.iter().map(|l| l.ln()).sum(),
            floored: compose(q, &floored_eigs),
            inv: compose(q, &inv_d),
            sqrt: compose(q, &sqrt_d),
            inv_sqrt: compose(q, &isq_d),
            floored_eigs,
            epsilon,
            base,
        }
    }
}

impl fmt::Debug for FlooredPsd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FlooredPsd")
            .field("epsilon", &self.epsilon)
            .field("floored_eigs", &self.floored_eigs)
            .finish()
    }
}

/// Frobenius-nearest PSD matrix: negative eigenvalues clamped to zero.
pub fn psd_project(m: &SymMatrix) -> SymMatrix {
    let eig = m.eig();
    let clamped: Vec<f64> = eig.values.iter().map(|&l| l.max(0.0)).collect();
    let mat = compose(&eig.vectors, &clamped);
    SymMatrix::with_eigen(
        mat,
        Eigen {
            values: clamped,
            vectors: eig.vectors.clone(),
        },
    )
}

/// Spectral floor at `eps`, applied after the PSD projection.
///
/// # Panics
/// If `eps` is not strictly positive.
pub fn spectral_floor(m: &SymMatrix, eps: f64) -> FlooredPsd {
    assert!(eps > 0.0, "spectral floor requires eps > 0");
    let base = psd_project(m);
    let floored = base.eig().values.iter().map(|&l| l.max(eps)).collect();
    FlooredPsd::assemble(base, eps, floored)
}

/// Canonical symmetric square root of a PSD matrix.
pub fn sym_sqrt(m: &SymMatrix) -> Result<SymMatrix> {
    let eig = m.eig();
    let min = m.min_eig();
    if min < -PSD_TOLERANCE * m.norm_op().max(1.0) {
        return Err(Error::NotPsd { min_eig: min });
    }
    Ok(SymMatrix::new(eig.map(|l| l.max(0.0).sqrt())))
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimMismatch { expected, got });
    }
    Ok(())
}

/// Squared Mahalanobis norm `vᵀ G⁻¹ v` in the floored metric.
pub fn mahalanobis_sq(v: &[f64], g: &FlooredPsd) -> Result<f64> {
    check_dim(g.dim(), v.len())?;
    Ok(quad_form(g.inv(), v).max(0.0))
}

pub fn mahalanobis(v: &[f64], g: &FlooredPsd) -> Result<f64> {
    mahalanobis_sq(v, g).map(f64::sqrt)
}

/// `‖log(a^{-1/2} b a^{-1/2})‖_op`, the affine-invariant log-spectral
/// distance between two floored matrices.
pub fn log_spectral_dist(a: &FlooredPsd, b: &FlooredPsd) -> Result<f64> {
    check_dim(a.dim(), b.dim())?;
    if a.matrix() == b.matrix() {
        return Ok(0.0);
    }
    let s = SymMatrix::new(a.inv_sqrt() * b.matrix() * a.inv_sqrt());
    Ok(s.eig()
        .values
        .iter()
        .map(|l| l.max(f64::MIN_POSITIVE).ln().abs())
        .fold(0.0, f64::max))
}

/// Moore–Penrose pseudo-inverse `M⁺` (eigenvalues below
/// `PINV_CUTOFF · λ_max` treated as zero).
pub fn pinv(m: &SymMatrix) -> DMatrix<f64> {
    let cut = PINV_CUTOFF * m.norm_op();
    m.eig()
        .map(|l| if l > cut && l > 0.0 { 1.0 / l } else { 0.0 })
}

/// `(M⁺)^{1/2}`.
pub fn pinv_sqrt(m: &SymMatrix) -> DMatrix<f64> {
    let cut = PINV_CUTOFF * m.norm_op();
    m.eig()
        .map(|l| if l > cut && l > 0.0 { 1.0 / l.sqrt() } else { 0.0 })
}

/// Largest singular value of a general matrix.
pub fn op_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .singular_values()
        .iter()
        .copied()
        .fold(0.0, f64::max)
}

/// Column-major lower-triangle packing: for `[[a,b],[b,c]]` returns
/// `(a, b, c)`.
pub fn vech(m: &SymMatrix) -> Vec<f64> {
    let d = m.dim();
    let mut out = Vec::with_capacity(d * (d + 1) / 2);
    for j in 0..d {
        for i in j..d {
            out.push(m.get(i, j));
        }
    }
    out
}

/// Dimension `d` with `d(d+1)/2 == len`, if any.
pub fn vech_dim(len: usize) -> Option<usize> {
    let d = (((8 * len + 1) as f64).sqrt() as usize).saturating_sub(1) / 2;
    (d..=d + 1).find(|&k| k * (k + 1) / 2 == len && k > 0)
}

pub fn unvech(row: &[f64]) -> Result<SymMatrix> {
    let d = vech_dim(row.len()).ok_or(Error::BadLength(row.len()))?;
    let mut m = DMatrix::zeros(d, d);
    let mut k = 0;
    for j in 0..d {
        for i in j..d {
            m[(i, j)] = row[k];
            m[(j, i)] = row[k];
            k += 1;
        }
    }
    // Exact: both triangles already agree, so symmetrising is a no-op.
    Ok(SymMatrix {
        m,
        eig: OnceLock::new(),
    })
}
