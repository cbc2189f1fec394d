//! Reductions of the conditioning past and Nadaraya–Watson weights.
//!
//! Two conditioning geometries are supported. The block PCR variant maps
//! the present anchor, the latent descriptor and each past increment
//! through fixed principal projections and scores candidates with a
//! product kernel over blocks. The reference-aware variant compares
//! increments in the query's own floored cumulants and feeds a single
//! pseudo-distance into a univariate kernel.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, mahalanobis_sq, FlooredPsd, SymMatrix};

/// Candidates kept by the uniform fallback when every logweight is excluded.
pub const FALLBACK_NEAREST: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcrReducer {
    pub mean: Vec<f64>,
    /// Orthonormal principal directions, one per row, leading first.
    pub components: Vec<Vec<f64>>,
    /// Per-component standard deviations.
    pub scales: Vec<f64>,
    pub explained_threshold: f64,
}

impl PcrReducer {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Principal coordinates of `v − mean`.
    pub fn project(&self, v: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(v).zip(&self.mean).map(|((c, v), m)| c * (v - m)).sum())
            .collect()
    }

    /// Principal coordinates of a difference (no centring).
    pub fn project_diff(&self, v: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(v).map(|(c, v)| c * v).sum())
            .collect()
    }

    /// `Πᵀ Π`, the orthogonal projector onto the retained span.
    pub fn projector(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut p = DMatrix::zeros(d, d);
        for c in &self.components {
            let v = DVector::from_column_slice(c);
            p += &v * v.transpose();
        }
        p
    }
}

fn sample_covariance(samples: &[Vec<f64>]) -> Result<(Vec<f64>, SymMatrix)> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!("{n} samples for PCR")));
    }
    let d = samples[0].len();
    if samples.iter().any(|s| s.len() != d) {
        return Err(Error::shape("PCR samples differ in dimension"));
    }
    let mut mean = vec![0.0; d];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v / n as f64;
        }
    }
    let mut cov = DMatrix::zeros(d, d);
    for s in samples {
        let c = DVector::from_iterator(d, s.iter().zip(&mean).map(|(v, m)| v - m));
        cov += &c * c.transpose();
    }
    Ok((mean, SymMatrix::new(cov / (n - 1) as f64)))
}

fn reducer_from_cov(mean: Vec<f64>, cov: &SymMatrix, threshold: f64, keep_all: bool) -> Result<PcrReducer> {
    let eig = cov.eig();
    let d = cov.dim();
    let values: Vec<f64> = eig.values.iter().rev().map(|l| l.max(0.0)).collect();
    let total: f64 = values.iter().sum();
    if total < 1e-14 {
        return Err(Error::DegenerateData);
    }
    let k = if keep_all {
        d
    } else {
        let mut acc = 0.0;
        let mut k = d;
        for (j, v) in values.iter().enumerate() {
            acc += v;
            if acc >= threshold * total * (1.0 - 1e-12) {
                k = j + 1;
                break;
            }
        }
        k
    };
    let top = values[0];
    let components = (0..k)
        .map(|j| eig.vectors.column(d - 1 - j).iter().copied().collect())
        .collect();
    let scales = values[..k]
        .iter()
        .map(|v| v.max(1e-12 * top).sqrt())
        .collect();
    Ok(PcrReducer {
        mean,
        components,
        scales,
        explained_threshold: threshold,
    })
}

/// Principal reducer keeping the fewest leading components whose
/// cumulative variance share reaches `threshold`.
pub fn pcr_fit(samples: &[Vec<f64>], threshold: f64) -> Result<PcrReducer> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Config(format!("PCR threshold {threshold} outside (0, 1]")));
    }
    let (mean, cov) = sample_covariance(samples)?;
    reducer_from_cov(mean, &cov, threshold, false)
}

/// Full-rank rotation onto the sample eigenbasis; distances are unchanged.
pub fn pcr_fit_full(samples: &[Vec<f64>]) -> Result<PcrReducer> {
    let (mean, cov) = sample_covariance(samples)?;
    reducer_from_cov(mean, &cov, 1.0, true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DriftModel {
    #[default]
    LocallyConstant,
    LinearInTime,
}

impl DriftModel {
    pub fn theta_dim(&self, d: usize) -> usize {
        match self {
            DriftModel::LocallyConstant => d,
            DriftModel::LinearInTime => 2 * d,
        }
    }
}

/// Weighted least-squares drift summary over a past window. Increments are
/// ordered oldest first; the linear model uses time index `k = 0..L`.
pub fn wls_drift(increments: &[Vec<f64>], cumulants: &[Arc<FlooredPsd>], model: DriftModel) -> Result<Vec<f64>> {
    let l = increments.len();
    if l == 0 {
        return Err(Error::EmptyInput("WLS window"));
    }
    if cumulants.len() != l {
        return Err(Error::shape(format!("{l} increments, {} cumulants", cumulants.len())));
    }
    let d = increments[0].len();
    let q = model.theta_dim(d);
    if q > l * d {
        return Err(Error::SingularDesign);
    }
    let mut normal = DMatrix::<f64>::zeros(q, q);
    let mut rhs = DVector::<f64>::zeros(q);
    for (k, (dx, c)) in increments.iter().zip(cumulants).enumerate() {
        if dx.len() != d || c.dim() != d {
            return Err(Error::DimMismatch { expected: d, got: dx.len().max(c.dim()) });
        }
        let w = c.inv();
        let wdx = DVector::from_vec(linalg::mat_vec(w, dx));
        let feats: &[f64] = match model {
            DriftModel::LocallyConstant => &[1.0],
            DriftModel::LinearInTime => &[1.0, k as f64],
        };
        for (a, fa) in feats.iter().enumerate() {
            rhs.rows_mut(a * d, d).axpy(*fa, &wdx, 1.0);
            for (b, fb) in feats.iter().enumerate() {
                let mut blk = normal.view_mut((a * d, b * d), (d, d));
                blk += w * (fa * fb);
            }
        }
    }
    let ridge = 1e-10 * normal.trace();
    for j in 0..q {
        normal[(j, j)] += ridge;
    }
    let chol = normal.cholesky().ok_or(Error::SingularDesign)?;
    let theta = chol.solve(&rhs);
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularDesign);
    }
    Ok(theta.iter().copied().collect())
}

/// The macro-variable of one query or training sample.
#[derive(Debug, Clone, Default)]
pub struct ConditioningSummary {
    pub anchor: Vec<f64>,
    /// Past increments, newest last.
    pub past_increments: Vec<Vec<f64>>,
    pub latent: Vec<f64>,
    /// Floored cumulants aligned with `past_increments`; may be empty.
    pub frozen_cumulants: Vec<Arc<FlooredPsd>>,
    pub wls_theta: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum KernelVariant {
    Gaussian,
    QuarticCompact,
    TruncatedGaussian { radius: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub variant: KernelVariant,
    pub bandwidth: f64,
    /// Bandwidth of the anchor block; `None` uses `bandwidth`.
    #[serde(default)]
    pub anchor_bandwidth: Option<f64>,
}

impl KernelConfig {
    pub fn gaussian(h: f64) -> Self {
        KernelConfig {
            variant: KernelVariant::Gaussian,
            bandwidth: h,
            anchor_bandwidth: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok_h = self.bandwidth > 0.0 && self.anchor_bandwidth.is_none_or(|h| h > 0.0);
        let ok_r = match self.variant {
            KernelVariant::TruncatedGaussian { radius } => radius > 0.0,
            _ => true,
        };
        if ok_h && ok_r {
            Ok(())
        } else {
            Err(Error::Config("kernel bandwidths and radius must be positive".into()))
        }
    }

    pub fn anchor_h(&self) -> f64 {
        self.anchor_bandwidth.unwrap_or(self.bandwidth)
    }
}

pub fn kernel_logweight(cfg: &KernelConfig, dist: f64) -> f64 {
    let h = cfg.bandwidth;
    let u2 = (dist / h).powi(2);
    match cfg.variant {
        KernelVariant::Gaussian => -0.5 * u2,
        KernelVariant::QuarticCompact => {
            if u2 < 1.0 {
                (1.0 - u2).ln()
            } else {
                f64::NEG_INFINITY
            }
        }
        KernelVariant::TruncatedGaussian { radius } => {
            if dist <= h * radius {
                -0.5 * u2
            } else {
                f64::NEG_INFINITY
            }
        }
    }
}

pub fn stable_softmax(logweights: &[f64]) -> Result<Vec<f64>> {
    let max = logweights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::AllExcluded);
    }
    let mut w: Vec<f64> = logweights.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    for v in &mut w {
        *v /= total;
    }
    Ok(w)
}

/// Softmax with the uniform fallback over the `FALLBACK_NEAREST` smallest
/// distances (ties to the lower index).
pub fn weights_with_fallback(logweights: &[f64], dists: &[f64]) -> Result<Vec<f64>> {
    match stable_softmax(logweights) {
        Err(Error::AllExcluded) => {
            if dists.is_empty() {
                return Err(Error::EmptySurrogate);
            }
            let mut order: Vec<usize> = (0..dists.len()).collect();
            order.sort_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(a.cmp(&b)));
            let keep = FALLBACK_NEAREST.min(order.len());
            let mut w = vec![0.0; dists.len()];
            for &j in &order[..keep] {
                w[j] = 1.0 / keep as f64;
            }
            Ok(w)
        }
        other => other,
    }
}

/// Product-kernel logweight over blocks: each block contributes its own
/// kernel factor in bandwidth-scaled coordinates.
pub fn product_logweight(variant: KernelVariant, block_sq: impl Iterator<Item = f64>) -> f64 {
    match variant {
        KernelVariant::Gaussian => -0.5 * block_sq.sum::<f64>(),
        KernelVariant::QuarticCompact => {
            let mut acc = 0.0;
            for u2 in block_sq {
                if u2 >= 1.0 {
                    return f64::NEG_INFINITY;
                }
                acc += (1.0 - u2).ln();
            }
            acc
        }
        KernelVariant::TruncatedGaussian { radius } => {
            let s: f64 = block_sq.sum();
            if s <= radius * radius {
                -0.5 * s
            } else {
                f64::NEG_INFINITY
            }
        }
    }
}

/// Gaussian PCR logweight `−½‖Π_X Δx‖²_Λ − ½Σ_q‖Π_Δ ΔΔx_q‖²_Λ` for one
/// candidate, given projected coordinates and isotropic block bandwidths.
pub fn pcr_logweights(
    query_blocks: &[Vec<f64>],
    candidates: &[Vec<Vec<f64>>],
    bandwidths: &[f64],
) -> Result<Vec<f64>> {
    if bandwidths.len() != query_blocks.len() {
        return Err(Error::shape("one bandwidth per block"));
    }
    candidates
        .iter()
        .map(|c| {
            if c.len() != query_blocks.len() {
                return Err(Error::shape("candidate block count differs from query"));
            }
            let mut acc = 0.0;
            for ((q, c), h) in query_blocks.iter().zip(c).zip(bandwidths) {
                if q.len() != c.len() {
                    return Err(Error::shape("block dimension mismatch"));
                }
                acc += q.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / (h * h);
            }
            Ok(-0.5 * acc)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// One scale shared by every block.
    Joint,
    /// One scale per block, the root of its leading variance.
    #[default]
    Blockwise,
    /// Each principal coordinate whitened separately.
    Componentwise,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum AnchorMetric {
    /// `‖Δ‖ / scale`.
    Isotropic { scale: f64 },
    /// `Σ w_k Δ_k²`.
    Weighted { weights: Vec<f64> },
    /// Mahalanobis in the query's newest floored cumulant.
    Descriptor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceAwareConfig {
    pub anchor: AnchorMetric,
    #[serde(default = "one")]
    pub latent_scale: f64,
    #[serde(default = "one")]
    pub theta_scale: f64,
    #[serde(default = "yes")]
    pub log_spectral: bool,
}

fn one() -> f64 {
    1.0
}

fn yes() -> bool {
    true
}

/// Which summary components a distance or logweight includes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Terms {
    pub latent: bool,
}

impl Terms {
    pub const ALL: Terms = Terms { latent: true };
    pub const NO_LATENT: Terms = Terms { latent: false };
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| (a - b).powi(2)).sum()
}

/// Squared reference-aware pseudo-distance.
pub fn pseudo_distance_sq(
    cfg: &ReferenceAwareConfig,
    query: &ConditioningSummary,
    sample: &ConditioningSummary,
    terms: Terms,
) -> Result<f64> {
    if query.anchor.len() != sample.anchor.len() {
        return Err(Error::shape("anchor dimensions differ"));
    }
    let diff: Vec<f64> = query.anchor.iter().zip(&sample.anchor).map(|(a, b)| a - b).collect();
    let mut total = match &cfg.anchor {
        AnchorMetric::Isotropic { scale } => sq_dist(&query.anchor, &sample.anchor) / (scale * scale),
        AnchorMetric::Weighted { weights } => {
            if weights.len() != diff.len() {
                return Err(Error::shape("anchor weights length"));
            }
            weights.iter().zip(&diff).map(|(w, v)| w * v * v).sum()
        }
        AnchorMetric::Descriptor => {
            let c = query
                .frozen_cumulants
                .last()
                .ok_or_else(|| Error::shape("descriptor anchor metric needs a query cumulant"))?;
            mahalanobis_sq(&diff, c)?
        }
    };

    let pq = query.past_increments.len();
    let ps = sample.past_increments.len();
    let n = pq.min(ps);
    let has_cq = query.frozen_cumulants.len() == pq;
    let has_cs = sample.frozen_cumulants.len() == ps;
    if !has_cq && n > 0 {
        return Err(Error::shape("query cumulants must align with its increments"));
    }
    for j in 0..n {
        let (a, b) = (&query.past_increments[pq - 1 - j], &sample.past_increments[ps - 1 - j]);
        if a.len() != b.len() {
            return Err(Error::shape("increment dimensions differ"));
        }
        let cq = &query.frozen_cumulants[pq - 1 - j];
        let dv: Vec<f64> = a.iter().zip(b).map(|(a, b)| a - b).collect();
        total += mahalanobis_sq(&dv, cq)?;
        if cfg.log_spectral && has_cs {
            let ls = linalg::log_spectral_dist(cq, &sample.frozen_cumulants[ps - 1 - j])?;
            total += ls * ls;
        }
    }

    if terms.latent && !query.latent.is_empty() && !sample.latent.is_empty() {
        if query.latent.len() != sample.latent.len() {
            return Err(Error::shape("latent dimensions differ"));
        }
        total += sq_dist(&query.latent, &sample.latent) / cfg.latent_scale.powi(2);
    }
    if !query.wls_theta.is_empty() && !sample.wls_theta.is_empty() {
        if query.wls_theta.len() != sample.wls_theta.len() {
            return Err(Error::shape("drift summaries differ in dimension"));
        }
        total += sq_dist(&query.wls_theta, &sample.wls_theta) / cfg.theta_scale.powi(2);
    }
    Ok(total)
}

pub fn pseudo_distance(
    cfg: &ReferenceAwareConfig,
    query: &ConditioningSummary,
    sample: &ConditioningSummary,
) -> Result<f64> {
    pseudo_distance_sq(cfg, query, sample, Terms::ALL).map(f64::sqrt)
}

/// How a level conditions its kernel regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum ConditioningSpec {
    /// Block PCR with an explained-variance threshold.
    Pcr {
        threshold: f64,
        #[serde(default)]
        normalization: Normalization,
    },
    /// Raw coordinates with the same block scaling and no truncation.
    Full {
        #[serde(default)]
        normalization: Normalization,
    },
    ReferenceAware(ReferenceAwareConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockMap {
    pub reducer: PcrReducer,
    /// Divisor per retained coordinate.
    pub scale: Vec<f64>,
}

impl BlockMap {
    fn apply(&self, v: &[f64], out: &mut Vec<f64>) {
        for (c, s) in self.reducer.project(v).into_iter().zip(&self.scale) {
            out.push(c / s);
        }
    }

    fn k(&self) -> usize {
        self.scale.len()
    }
}

/// Fitted block PCR geometry: anchor, optional latent, and a shared
/// increment reducer applied to each lag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockPcr {
    pub anchor: BlockMap,
    pub latent: Option<BlockMap>,
    pub increment: Option<BlockMap>,
    pub theta: Option<BlockMap>,
}

/// A block without spread (one sample, or constant) carries no geometry to
/// learn; it falls back to unit-scaled raw coordinates around its mean.
fn fit_block(samples: &[Vec<f64>], threshold: Option<f64>) -> Result<PcrReducer> {
    let fitted = match threshold {
        Some(t) => pcr_fit(samples, t),
        None => pcr_fit_full(samples),
    };
    match fitted {
        Err(Error::DegenerateData | Error::InsufficientData(_)) if !samples.is_empty() => {
            let d = samples[0].len();
            let n = samples.len() as f64;
            let mean = (0..d).map(|j| samples.iter().map(|s| s[j]).sum::<f64>() / n).collect();
            Ok(PcrReducer {
                mean,
                components: (0..d).map(|j| (0..d).map(|i| f64::from(u8::from(i == j))).collect()).collect(),
                scales: vec![1.0; d],
                explained_threshold: threshold.unwrap_or(1.0),
            })
        }
        other => other,
    }
}

impl BlockPcr {
    pub fn fit(
        summaries: &[ConditioningSummary],
        threshold: Option<f64>,
        normalization: Normalization,
    ) -> Result<Self> {
        let anchors: Vec<Vec<f64>> = summaries.iter().map(|s| s.anchor.clone()).collect();
        let anchor = fit_block(&anchors, threshold)?;
        let latents: Vec<Vec<f64>> = summaries
            .iter()
            .filter(|s| !s.latent.is_empty())
            .map(|s| s.latent.clone())
            .collect();
        let latent = if latents.is_empty() {
            None
        } else {
            Some(fit_block(&latents, threshold)?)
        };
        let incs: Vec<Vec<f64>> = summaries
            .iter()
            .flat_map(|s| s.past_increments.iter().cloned())
            .collect();
        let increment = if incs.is_empty() {
            None
        } else {
            Some(fit_block(&incs, threshold)?)
        };
        let thetas: Vec<Vec<f64>> = summaries
            .iter()
            .filter(|s| !s.wls_theta.is_empty())
            .map(|s| s.wls_theta.clone())
            .collect();
        let theta = if thetas.is_empty() {
            None
        } else {
            Some(fit_block(&thetas, threshold)?)
        };

        let reducers = [Some(&anchor), latent.as_ref(), increment.as_ref(), theta.as_ref()];
        let joint = reducers
            .iter()
            .flatten()
            .map(|r| r.scales[0])
            .fold(0.0, f64::max);
        let map = |r: PcrReducer| {
            let scale = match normalization {
                Normalization::Joint => vec![joint; r.k()],
                Normalization::Blockwise => vec![r.scales[0]; r.k()],
                Normalization::Componentwise => r.scales.clone(),
            };
            BlockMap { reducer: r, scale }
        };
        Ok(BlockPcr {
            anchor: map(anchor),
            latent: latent.map(map),
            increment: increment.map(map),
            theta: theta.map(map),
        })
    }

    /// Flattened features `[anchor | latent | theta | newest increment | …]`
    /// and the block boundaries.
    pub fn features(&self, s: &ConditioningSummary) -> Features {
        let mut v = Vec::new();
        let mut ends = Vec::new();
        self.anchor.apply(&s.anchor, &mut v);
        ends.push(v.len());
        if let Some(m) = &self.latent {
            if !s.latent.is_empty() {
                m.apply(&s.latent, &mut v);
            }
            ends.push(v.len());
        }
        if let Some(m) = &self.theta {
            if !s.wls_theta.is_empty() {
                m.apply(&s.wls_theta, &mut v);
            }
            ends.push(v.len());
        }
        let fixed = ends.len();
        if let Some(m) = &self.increment {
            for inc in s.past_increments.iter().rev() {
                m.apply(inc, &mut v);
                ends.push(v.len());
            }
        }
        Features { values: v, ends, fixed }
    }

    fn latent_block(&self) -> Option<usize> {
        self.latent.as_ref().map(|_| 1)
    }

    pub fn retained(&self) -> Vec<usize> {
        [Some(&self.anchor), self.latent.as_ref(), self.increment.as_ref(), self.theta.as_ref()]
            .iter()
            .map(|m| m.map_or(0, |m| m.k()))
            .collect()
    }
}

/// Flattened block coordinates of one summary.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub values: Vec<f64>,
    /// Exclusive end offset of each block.
    pub ends: Vec<usize>,
    /// Number of non-increment blocks at the front.
    pub fixed: usize,
}

impl Features {
    fn block(&self, b: usize) -> &[f64] {
        let start = if b == 0 { 0 } else { self.ends[b - 1] };
        &self.values[start..self.ends[b]]
    }
}

/// A fitted conditioning geometry plus its kernel.
#[derive(Debug, Clone)]
pub enum Conditioner {
    Pcr(BlockPcr),
    ReferenceAware(ReferenceAwareConfig),
}

/// Candidate cloud prepared for repeated weight evaluation.
#[derive(Debug, Clone)]
pub enum Prepared {
    Pcr(Vec<Features>),
    ReferenceAware(Vec<ConditioningSummary>),
}

impl Prepared {
    pub fn len(&self) -> usize {
        match self {
            Prepared::Pcr(f) => f.len(),
            Prepared::ReferenceAware(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Conditioner {
    pub fn fit(spec: &ConditioningSpec, summaries: &[ConditioningSummary]) -> Result<Self> {
        match spec {
            ConditioningSpec::Pcr { threshold, normalization } => {
                Ok(Conditioner::Pcr(BlockPcr::fit(summaries, Some(*threshold), *normalization)?))
            }
            ConditioningSpec::Full { normalization } => {
                Ok(Conditioner::Pcr(BlockPcr::fit(summaries, None, *normalization)?))
            }
            ConditioningSpec::ReferenceAware(cfg) => Ok(Conditioner::ReferenceAware(cfg.clone())),
        }
    }

    pub fn prepare(&self, summaries: &[ConditioningSummary]) -> Prepared {
        match self {
            Conditioner::Pcr(b) => Prepared::Pcr(summaries.iter().map(|s| b.features(s)).collect()),
            Conditioner::ReferenceAware(_) => Prepared::ReferenceAware(summaries.to_vec()),
        }
    }

    /// Logweights and scaled distances of every candidate against `query`.
    pub fn logweights(
        &self,
        kernel: &KernelConfig,
        query: &ConditioningSummary,
        cands: &Prepared,
        terms: Terms,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        match (self, cands) {
            (Conditioner::Pcr(b), Prepared::Pcr(feats)) => {
                let q = b.features(query);
                let skip = if terms.latent { None } else { b.latent_block() };
                let ha = kernel.anchor_h();
                let h = kernel.bandwidth;
                let mut lw = Vec::with_capacity(feats.len());
                let mut dist = Vec::with_capacity(feats.len());
                let mut sq = Vec::with_capacity(q.ends.len());
                for c in feats {
                    if c.fixed != q.fixed {
                        return Err(Error::shape("candidate and query block layouts differ"));
                    }
                    sq.clear();
                    for blk in 0..q.fixed {
                        if Some(blk) == skip {
                            continue;
                        }
                        let (a, bb) = (q.block(blk), c.block(blk));
                        if a.is_empty() || bb.is_empty() {
                            continue;
                        }
                        let hb = if blk == 0 { ha } else { h };
                        sq.push(sq_dist(a, bb) / (hb * hb));
                    }
                    let n_inc = (q.ends.len() - q.fixed).min(c.ends.len() - c.fixed);
                    for j in 0..n_inc {
                        let blk = q.fixed + j;
                        sq.push(sq_dist(q.block(blk), c.block(blk)) / (h * h));
                    }
                    dist.push(sq.iter().sum::<f64>().sqrt());
                    lw.push(product_logweight(kernel.variant, sq.iter().copied()));
                }
                Ok((lw, dist))
            }
            (Conditioner::ReferenceAware(cfg), Prepared::ReferenceAware(samples)) => {
                let mut lw = Vec::with_capacity(samples.len());
                let mut dist = Vec::with_capacity(samples.len());
                for s in samples {
                    let d = pseudo_distance_sq(cfg, query, s, terms)?.sqrt();
                    lw.push(kernel_logweight(kernel, d));
                    dist.push(d);
                }
                Ok((lw, dist))
            }
            _ => Err(Error::shape("prepared candidates do not match the conditioner")),
        }
    }

    /// Anchor-only Gaussian logweights against a present state.
    pub fn anchor_logweights(&self, kernel: &KernelConfig, anchor: &[f64], cands: &Prepared) -> Result<Vec<f64>> {
        let h = kernel.anchor_h();
        match (self, cands) {
            (Conditioner::Pcr(b), Prepared::Pcr(feats)) => {
                let mut q = Vec::new();
                b.anchor.apply(anchor, &mut q);
                Ok(feats
                    .iter()
                    .map(|c| -0.5 * sq_dist(&q, c.block(0)) / (h * h))
                    .collect())
            }
            (Conditioner::ReferenceAware(cfg), Prepared::ReferenceAware(samples)) => samples
                .iter()
                .map(|s| {
                    if s.anchor.len() != anchor.len() {
                        return Err(Error::shape("anchor dimensions differ"));
                    }
                    let d2 = match &cfg.anchor {
                        AnchorMetric::Weighted { weights } => weights
                            .iter()
                            .zip(anchor.iter().zip(&s.anchor))
                            .map(|(w, (a, b))| w * (a - b).powi(2))
                            .sum(),
                        AnchorMetric::Isotropic { scale } => sq_dist(anchor, &s.anchor) / (scale * scale),
                        AnchorMetric::Descriptor => sq_dist(anchor, &s.anchor),
                    };
                    Ok(-0.5 * d2 / (h * h))
                })
                .collect(),
            _ => Err(Error::shape("prepared candidates do not match the conditioner")),
        }
    }
}

/// Weighted atom cloud of the empirical terminal law.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalSurrogate {
    pub weights: Vec<f64>,
    pub atoms: Vec<Vec<f64>>,
    pub source_indices: Vec<usize>,
}

impl TerminalSurrogate {
    /// Keeps only atoms with positive weight.
    pub fn from_weights(weights: &[f64], atoms: &[Vec<f64>]) -> Result<Self> {
        if weights.len() != atoms.len() {
            return Err(Error::shape("weights and atoms differ in length"));
        }
        let mut s = TerminalSurrogate {
            weights: Vec::new(),
            atoms: Vec::new(),
            source_indices: Vec::new(),
        };
        for (j, (&w, a)) in weights.iter().zip(atoms).enumerate() {
            if w > 0.0 {
                s.weights.push(w);
                s.atoms.push(a.clone());
                s.source_indices.push(j);
            }
        }
        if s.weights.is_empty() {
            return Err(Error::EmptySurrogate);
        }
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.atoms.first().map_or(0, Vec::len)
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim()];
        for (w, a) in self.weights.iter().zip(&self.atoms) {
            for (m, v) in m.iter_mut().zip(a) {
                *m += w * v;
            }
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::spectral_floor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn floored(diag: &[f64]) -> Arc<FlooredPsd> {
        Arc::new(spectral_floor(&SymMatrix::diag(diag), 1e-9))
    }

    fn gauss(rng: &mut ChaCha8Rng) -> f64 {
        StandardNormal.sample(rng)
    }

    #[test]
    fn pcr_recovers_low_rank_span() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let samples: Vec<Vec<f64>> = (0..500)
            .map(|_| vec![2.0 * gauss(&mut rng), gauss(&mut rng), 0.0, 0.0])
            .collect();
        let r = pcr_fit(&samples, 0.99).unwrap();
        assert_eq!(r.k(), 2);
        let p = r.projector();
        let mut want = DMatrix::zeros(4, 4);
        want[(0, 0)] = 1.0;
        want[(1, 1)] = 1.0;
        assert!((p.clone() - want).norm() < 1e-10);
        assert!((&p * &p - &p).norm() < 1e-10);
        assert!((p.transpose() - &p).norm() < 1e-12);

        let full: Vec<Vec<f64>> = (0..200)
            .map(|_| (0..3).map(|_| gauss(&mut rng)).collect())
            .collect();
        assert_eq!(pcr_fit(&full, 1.0).unwrap().k(), 3);

        let flat = vec![vec![1.0, 1.0]; 10];
        assert!(matches!(pcr_fit(&flat, 0.9), Err(Error::DegenerateData)));
        let jitter: Vec<Vec<f64>> = (0..10).map(|k| vec![1.0 + 1e-3 * k as f64, 1.0]).collect();
        assert_eq!(pcr_fit(&jitter, 0.9).unwrap().k(), 1);
    }

    #[test]
    fn pcr_components_are_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let samples: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..5).map(|_| gauss(&mut rng)).collect())
            .collect();
        let r = pcr_fit(&samples, 0.8).unwrap();
        for (a, ca) in r.components.iter().enumerate() {
            for (b, cb) in r.components.iter().enumerate() {
                let dot: f64 = ca.iter().zip(cb).map(|(x, y)| x * y).sum();
                assert!((dot - if a == b { 1.0 } else { 0.0 }).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn wls_examples() {
        let eye = |d: usize| Arc::new(spectral_floor(&SymMatrix::identity(d), 1e-9));
        let v = vec![0.5, -1.0];
        let th = wls_drift(&[v.clone(), v.clone(), v.clone()], &[eye(2), eye(2), eye(2)], DriftModel::LocallyConstant).unwrap();
        assert!((th[0] - 0.5).abs() < 1e-9 && (th[1] + 1.0).abs() < 1e-9);
        let th = wls_drift(&[vec![0.0], vec![2.0]], &[eye(1), eye(1)], DriftModel::LocallyConstant).unwrap();
        assert!((th[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn wls_constant_is_precision_weighted_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 2;
        let incs: Vec<Vec<f64>> = (0..6).map(|_| (0..d).map(|_| gauss(&mut rng)).collect()).collect();
        let cums: Vec<Arc<FlooredPsd>> = (0..6)
            .map(|_| {
                let b = DMatrix::from_fn(d, d, |_, _| gauss(&mut rng));
                Arc::new(spectral_floor(&SymMatrix::new(&b * b.transpose()), 0.1))
            })
            .collect();
        let th = wls_drift(&incs, &cums, DriftModel::LocallyConstant).unwrap();
        let mut p = DMatrix::zeros(d, d);
        let mut r = DVector::zeros(d);
        for (x, c) in incs.iter().zip(&cums) {
            p += c.inv();
            r += c.inv() * DVector::from_column_slice(x);
        }
        let want = p.lu().solve(&r).unwrap();
        for k in 0..d {
            assert!((th[k] - want[k]).abs() < 1e-10 * (1.0 + want[k].abs()));
        }
    }

    #[test]
    fn wls_linear_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (t0, t1) = (0.3, -0.05);
        let incs: Vec<Vec<f64>> = (0..40).map(|k| vec![t0 + t1 * k as f64 + 0.01 * gauss(&mut rng)]).collect();
        let w: Vec<f64> = (0..40).map(|k| 1.0 + 0.1 * (k % 3) as f64).collect();
        let cums: Vec<Arc<FlooredPsd>> = w.iter().map(|c| floored(&[*c])).collect();
        let th = wls_drift(&incs, &cums, DriftModel::LinearInTime).unwrap();
        // Closed-form 2×2 weighted regression.
        let (mut s0, mut s1, mut s2, mut r0, mut r1) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (k, (x, c)) in incs.iter().zip(&w).enumerate() {
            let (k, iw) = (k as f64, 1.0 / c);
            s0 += iw;
            s1 += iw * k;
            s2 += iw * k * k;
            r0 += iw * x[0];
            r1 += iw * k * x[0];
        }
        let det = s0 * s2 - s1 * s1;
        let a = (s2 * r0 - s1 * r1) / det;
        let b = (s0 * r1 - s1 * r0) / det;
        assert!((th[0] - a).abs() < 1e-7 && (th[1] - b).abs() < 1e-7);
        assert!((th[0] - t0).abs() < 0.02 && (th[1] - t1).abs() < 1e-3);
        assert!(matches!(
            wls_drift(&incs[..1], &cums[..1], DriftModel::LinearInTime),
            Err(Error::SingularDesign)
        ));
    }

    fn summary(anchor: Vec<f64>, incs: Vec<Vec<f64>>, cum: &[f64]) -> ConditioningSummary {
        let n = incs.len();
        ConditioningSummary {
            anchor,
            past_increments: incs,
            latent: vec![],
            frozen_cumulants: (0..n).map(|_| floored(cum)).collect(),
            wls_theta: vec![],
        }
    }

    #[test]
    fn pseudo_distance_examples() {
        let cfg = ReferenceAwareConfig {
            anchor: AnchorMetric::Isotropic { scale: 1.0 },
            latent_scale: 1.0,
            theta_scale: 1.0,
            log_spectral: true,
        };
        let q = summary(vec![0.0], vec![vec![1.0], vec![3.0]], &[4.0]);
        assert_eq!(pseudo_distance(&cfg, &q, &q).unwrap(), 0.0);
        let s = summary(vec![0.0], vec![vec![1.0], vec![1.0]], &[4.0]);
        assert!((pseudo_distance(&cfg, &q, &s).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pseudo_distance_mixed_case_matches_term_sum() {
        let cfg = ReferenceAwareConfig {
            anchor: AnchorMetric::Weighted { weights: vec![0.0, 2.0] },
            latent_scale: 0.5,
            theta_scale: 2.0,
            log_spectral: true,
        };
        let mut q = summary(vec![1.0, 2.0], vec![vec![0.1, 0.2], vec![0.3, -0.1], vec![0.0, 0.5]], &[1.0, 2.0]);
        q.latent = vec![1.0, 0.0];
        q.wls_theta = vec![0.2];
        let mut s = summary(vec![5.0, 1.0], vec![vec![0.4, 0.2], vec![-0.1, 0.1]], &[2.0, 2.0]);
        s.latent = vec![0.0, 1.0];
        s.wls_theta = vec![-0.2];
        let got = pseudo_distance(&cfg, &q, &s).unwrap();
        let anchor = 2.0 * 1.0;
        // Newest pair: q(0,0.5) vs s(-0.1,0.1); then q(0.3,-0.1) vs s(0.4,0.2).
        let inc = (0.1f64.powi(2) / 1.0 + 0.4f64.powi(2) / 2.0) + (0.1f64.powi(2) / 1.0 + 0.3f64.powi(2) / 2.0);
        let ls = 2.0 * 2f64.ln().powi(2);
        let latent = 2.0 / 0.25;
        let theta = 0.16 / 4.0;
        let want = (anchor + inc + ls + latent + theta).sqrt();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }

    #[test]
    fn kernel_examples() {
        let g = KernelConfig::gaussian(0.7);
        assert_eq!(kernel_logweight(&g, 0.0), 0.0);
        let q = KernelConfig {
            variant: KernelVariant::QuarticCompact,
            bandwidth: 2.0,
            anchor_bandwidth: None,
        };
        assert_eq!(kernel_logweight(&q, 2.0), f64::NEG_INFINITY);
        assert!((kernel_logweight(&q, 2.0 / 2f64.sqrt()) - 0.5f64.ln()).abs() < 1e-15);
        let t = KernelConfig {
            variant: KernelVariant::TruncatedGaussian { radius: 2.0 },
            bandwidth: 1.0,
            anchor_bandwidth: None,
        };
        assert_eq!(kernel_logweight(&t, 1.5), -1.125);
        assert_eq!(kernel_logweight(&t, 2.5), f64::NEG_INFINITY);
    }

    #[test]
    fn softmax_examples() {
        let w = stable_softmax(&[3.0, 3.0, 3.0]).unwrap();
        assert!(w.iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-15));
        let w = stable_softmax(&[0.0, -1000.0]).unwrap();
        assert_eq!(w[0], 1.0);
        assert!(w[1] >= 0.0 && w[1] < 1e-300);
        let w = stable_softmax(&[1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
        for (k, v) in w.iter().enumerate() {
            assert!((v - (k + 1) as f64 / 6.0).abs() < 1e-15);
        }
        let w = stable_softmax(&[f64::NEG_INFINITY, 0.0]).unwrap();
        assert_eq!(w, vec![0.0, 1.0]);
        assert!(matches!(stable_softmax(&[f64::NEG_INFINITY; 3]), Err(Error::AllExcluded)));
    }

    #[test]
    fn fallback_keeps_sixteen_nearest() {
        let lw = vec![f64::NEG_INFINITY; 40];
        let dists: Vec<f64> = (0..40).map(|k| ((k * 7) % 40) as f64).collect();
        let w = weights_with_fallback(&lw, &dists).unwrap();
        let kept: Vec<usize> = (0..40).filter(|&k| w[k] > 0.0).collect();
        assert_eq!(kept.len(), 16);
        assert!(kept.iter().all(|&k| dists[k] < 16.0));
        assert!(kept.iter().all(|&k| w[k] == 1.0 / 16.0));
    }

    #[test]
    fn pcr_logweight_examples() {
        let q = vec![vec![0.0]];
        let lw = pcr_logweights(&q, &[vec![vec![0.0]], vec![vec![1.0]]], &[1.0]).unwrap();
        assert_eq!(lw, vec![0.0, -0.5]);
        let q2 = vec![vec![0.0], vec![0.0]];
        let lw = pcr_logweights(&q2, &[vec![vec![1.0], vec![2.0]]], &[1.0, 1.0]).unwrap();
        assert_eq!(lw, vec![-2.5]);
        assert!(pcr_logweights(&q2, &[vec![vec![1.0]]], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn block_pcr_logweights_match_term_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mk = |rng: &mut ChaCha8Rng| {
            let incs = (0..3).map(|_| (0..3).map(|_| gauss(rng)).collect()).collect();
            let mut s = summary((0..3).map(|_| gauss(rng)).collect(), incs, &[1.0, 1.0, 1.0]);
            s.latent = vec![gauss(rng), gauss(rng)];
            s
        };
        let train: Vec<ConditioningSummary> = (0..50).map(|_| mk(&mut rng)).collect();
        let spec = ConditioningSpec::Full { normalization: Normalization::Componentwise };
        let cond = Conditioner::fit(&spec, &train).unwrap();
        let prep = cond.prepare(&train);
        let kernel = KernelConfig {
            variant: KernelVariant::Gaussian,
            bandwidth: 0.8,
            anchor_bandwidth: Some(1.3),
        };
        let q = mk(&mut rng);
        let (lw, _) = cond.logweights(&kernel, &q, &prep, Terms::ALL).unwrap();
        let Conditioner::Pcr(b) = &cond else { unreachable!() };
        let blocks = |s: &ConditioningSummary| {
            let mut out = Vec::new();
            let proj = |m: &BlockMap, v: &[f64]| -> Vec<f64> {
                m.reducer.project(v).iter().zip(&m.scale).map(|(c, s)| c / s).collect()
            };
            out.push(proj(&b.anchor, &s.anchor));
            out.push(proj(b.latent.as_ref().unwrap(), &s.latent));
            for inc in s.past_increments.iter().rev() {
                out.push(proj(b.increment.as_ref().unwrap(), inc));
            }
            out
        };
        let cands: Vec<Vec<Vec<f64>>> = train.iter().map(blocks).collect();
        let want = pcr_logweights(&blocks(&q), &cands, &[1.3, 0.8, 0.8, 0.8, 0.8]).unwrap();
        for (a, b) in lw.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10 * (1.0 + b.abs()));
        }
        // Query identical to a candidate scores zero.
        let (lw, _) = cond.logweights(&kernel, &train[7], &prep, Terms::ALL).unwrap();
        assert_eq!(lw[7], 0.0);
    }

    #[test]
    fn quartic_product_kernel_excludes_outside_support() {
        assert_eq!(
            product_logweight(KernelVariant::QuarticCompact, [0.1, 1.0].into_iter()),
            f64::NEG_INFINITY
        );
        let v = product_logweight(KernelVariant::QuarticCompact, [0.5, 0.5].into_iter());
        assert!((v - 2.0 * 0.5f64.ln()).abs() < 1e-15);
    }
}
