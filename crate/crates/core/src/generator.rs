//! Fitting per-level components, computing terminal surrogates, coupling
//! adjacent levels, and the single-level and joint generation loops.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bridge::{step_interval, BridgeStepConfig, NoiseMode};
use crate::conditioning::{
    weights_with_fallback, wls_drift, BlockPcr, Conditioner, ConditioningSpec, ConditioningSummary, DriftModel,
    KernelConfig, Prepared, TerminalSurrogate, Terms,
};
use crate::descriptor::{hybrid_frame_decode, HybridFrame};
use crate::error::{Error, Result};
use crate::linalg::{psd_project, spectral_floor, unvech, vech, FlooredPsd, SymMatrix};
use crate::path::{read_paths_csv, write_paths_csv, CoarsePath};
use crate::reference::FrozenInterval;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WlsSpec {
    pub model: DriftModel,
    pub window: usize,
}

/// Frozen reference rate of a level that is not driven by a lower level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum ReferenceSpec {
    /// `scale · I`.
    Identity { scale: f64 },
    /// Realised covariance of the training increments per unit time.
    #[default]
    Empirical,
    /// Explicit rate matrix in vech form.
    Matrix { vech: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentConfig {
    pub p_max: usize,
    pub conditioning: ConditioningSpec,
    pub kernel: KernelConfig,
    pub bridge: BridgeStepConfig,
    #[serde(default)]
    pub wls: Option<WlsSpec>,
    #[serde(default)]
    pub reference: ReferenceSpec,
}

impl ComponentConfig {
    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        self.bridge.validate()?;
        if let Some(w) = &self.wls {
            if w.window == 0 {
                return Err(Error::Config("WLS window must be at least 1".into()));
            }
        }
        Ok(())
    }

    /// First coarse index with a complete memory block.
    pub fn min_index(&self) -> usize {
        self.p_max.max(self.wls.as_ref().map_or(0, |w| w.window))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingConfig {
    pub rho_x: f64,
    pub rho_y: f64,
    pub alpha: f64,
}

impl CouplingConfig {
    pub const NONE: CouplingConfig = CouplingConfig {
        rho_x: 0.0,
        rho_y: 0.0,
        alpha: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("rho_x", self.rho_x), ("rho_y", self.rho_y), ("alpha", self.alpha)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// `Σ c_k ℓ_k` where a zero coefficient drops its term entirely and an
/// excluded term with positive coefficient excludes the mix.
fn mix(terms: &[(f64, &[f64])], n: usize) -> Vec<f64> {
    (0..n)
        .map(|j| {
            let mut acc = 0.0;
            for (c, l) in terms {
                if *c != 0.0 {
                    if l[j] == f64::NEG_INFINITY {
                        return f64::NEG_INFINITY;
                    }
                    acc += c * l[j];
                }
            }
            acc
        })
        .collect()
}

/// Mixed logweights `(ℓ̄X, ℓ̄F)` of an upper level X and the level F below.
pub fn couple_logweights(lx: &[f64], lf: &[f64], lx0: &[f64], cc: &CouplingConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = lx.len();
    if lf.len() != n || lx0.len() != n {
        return Err(Error::shape(format!(
            "coupled logweights need one candidate set: {n}, {}, {}",
            lf.len(),
            lx0.len()
        )));
    }
    if cc.rho_x == 0.0 && cc.rho_y == 0.0 {
        return Ok((lx.to_vec(), lf.to_vec()));
    }
    let bx = mix(&[(1.0 - cc.rho_x, lx), (cc.rho_x, lf)], n);
    let bf = mix(
        &[
            (1.0 - cc.rho_y, lf),
            (cc.rho_y * (1.0 - cc.alpha), lx),
            (cc.rho_y * cc.alpha, lx0),
        ],
        n,
    );
    Ok((bx, bf))
}

/// Reference rates seen by a level during training.
#[derive(Debug, Clone, PartialEq)]
pub enum ReferenceStream {
    Constant(SymMatrix),
    /// Raw PSD rate of interval `i → i+1`, per path.
    PerStep(Vec<Vec<SymMatrix>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub paths: Vec<CoarsePath>,
    /// Latent descriptor used when stepping from index `i`, per path.
    pub latents: Option<Vec<Vec<Vec<f64>>>>,
    pub references: ReferenceStream,
}

/// Realised covariance per unit time, `Σ ΔxΔxᵀ / (n·dt)`.
pub fn realized_rate(paths: &[CoarsePath]) -> Result<SymMatrix> {
    let d = paths.first().map(CoarsePath::dim).ok_or(Error::EmptyInput("training paths"))?;
    let mut acc = nalgebra::DMatrix::<f64>::zeros(d, d);
    let mut n = 0usize;
    let mut dt = 1.0;
    for p in paths {
        dt = p.dt;
        for inc in p.increments() {
            let v = nalgebra::DVector::from_vec(inc);
            acc += &v * v.transpose();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InsufficientData("no increments".into()));
    }
    Ok(SymMatrix::new(acc / (n as f64 * dt)))
}

pub fn reference_rate(spec: &ReferenceSpec, paths: &[CoarsePath]) -> Result<SymMatrix> {
    let d = paths.first().map(CoarsePath::dim).ok_or(Error::EmptyInput("training paths"))?;
    match spec {
        ReferenceSpec::Identity { scale } => Ok(SymMatrix::identity(d).scale(*scale)),
        ReferenceSpec::Empirical => realized_rate(paths),
        ReferenceSpec::Matrix { vech } => {
            let m = unvech(vech)?;
            if m.dim() != d {
                return Err(Error::DimMismatch { expected: d, got: m.dim() });
            }
            Ok(m)
        }
    }
}

/// History of one level: states, per-interval floored rates, latents.
#[derive(Debug, Clone, Default)]
pub struct History {
    pub states: Vec<Vec<f64>>,
    /// Floored rate of interval `k → k+1`.
    pub rates: Vec<Arc<FlooredPsd>>,
    pub latents: Vec<Option<Vec<f64>>>,
}

/// One level's fitted model.
#[derive(Debug, Clone)]
pub struct FittedComponent {
    pub config: ComponentConfig,
    pub dt: f64,
    pub dim: usize,
    pub min_index: usize,
    pub summaries: Vec<ConditioningSummary>,
    pub atoms: Vec<Vec<f64>>,
    /// `(path, index)` of each candidate.
    pub sources: Vec<(usize, usize)>,
    pub conditioner: Conditioner,
    prepared: Prepared,
    constant_rate: Option<Arc<FlooredPsd>>,
    training: TrainingSet,
}

fn floor_rate(rate: &SymMatrix, eps: f64) -> Arc<FlooredPsd> {
    Arc::new(spectral_floor(&psd_project(rate), eps))
}

impl FittedComponent {
    pub fn training(&self) -> &TrainingSet {
        &self.training
    }

    pub fn n_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn constant_rate(&self) -> Option<&Arc<FlooredPsd>> {
        self.constant_rate.as_ref()
    }

    pub fn epsilon(&self) -> f64 {
        self.config.bridge.epsilon
    }

    /// Conditioning summary at index `i` of a history.
    pub fn summary_at(&self, h: &History, i: usize, latent: Option<&[f64]>) -> Result<ConditioningSummary> {
        build_summary(&self.config, self.dt, h, i, latent)
    }

    pub fn logweights(&self, query: &ConditioningSummary, terms: Terms) -> Result<(Vec<f64>, Vec<f64>)> {
        self.conditioner.logweights(&self.config.kernel, query, &self.prepared, terms)
    }

    pub fn anchor_logweights(&self, anchor: &[f64]) -> Result<Vec<f64>> {
        self.conditioner.anchor_logweights(&self.config.kernel, anchor, &self.prepared)
    }

    pub fn surrogate_from(&self, logweights: &[f64], dists: &[f64]) -> Result<TerminalSurrogate> {
        let w = weights_with_fallback(logweights, dists)?;
        TerminalSurrogate::from_weights(&w, &self.atoms)
    }

    /// Surrogate for a query plus the raw logweights used for coupling.
    pub fn compute_surrogate(&self, query: &ConditioningSummary) -> Result<(TerminalSurrogate, Vec<f64>)> {
        let (lw, dist) = self.logweights(query, Terms::ALL)?;
        Ok((self.surrogate_from(&lw, &dist)?, lw))
    }

    /// Bridges interval `i → i+1` from `x_i` under the given floored rate.
    pub fn advance<R: Rng + ?Sized>(
        &self,
        x: &[f64],
        i: usize,
        sur: &TerminalSurrogate,
        rate: Arc<FlooredPsd>,
        rng: &mut R,
        noise: NoiseMode,
    ) -> Result<Vec<f64>> {
        let fi = FrozenInterval::new(i as f64 * self.dt, (i + 1) as f64 * self.dt, rate, x.to_vec())?;
        step_interval(&fi, sur, &self.config.bridge, x, rng, noise)
    }
}

fn build_summary(cfg: &ComponentConfig, dt: f64, h: &History, i: usize, latent: Option<&[f64]>) -> Result<ConditioningSummary> {
    if i >= h.states.len() {
        return Err(Error::TooShort {
            needed: i + 1,
            got: h.states.len(),
        });
    }
    let cumulant = |k: usize| -> Result<Arc<FlooredPsd>> {
        h.rates
            .get(k)
            .map(|r| Arc::new(r.scaled(dt)))
            .ok_or_else(|| Error::shape(format!("no reference for interval {k}")))
    };
    let p = cfg.p_max.min(i);
    let mut past = Vec::with_capacity(p);
    let mut cums = Vec::with_capacity(p);
    for k in i + 1 - p..=i {
        past.push(h.states[k].iter().zip(&h.states[k - 1]).map(|(a, b)| a - b).collect());
        cums.push(cumulant(k - 1)?);
    }
    let wls_theta = match &cfg.wls {
        Some(w) => {
            if i < w.window {
                return Err(Error::TooShort {
                    needed: w.window + 1,
                    got: i + 1,
                });
            }
            let mut incs = Vec::with_capacity(w.window);
            let mut wc = Vec::with_capacity(w.window);
            for k in i + 1 - w.window..=i {
                incs.push(h.states[k].iter().zip(&h.states[k - 1]).map(|(a, b)| a - b).collect());
                wc.push(cumulant(k - 1)?);
            }
            wls_drift(&incs, &wc, w.model)?
        }
        None => Vec::new(),
    };
    Ok(ConditioningSummary {
        anchor: h.states[i].clone(),
        past_increments: past,
        latent: latent.map(<[f64]>::to_vec).unwrap_or_default(),
        frozen_cumulants: cums,
        wls_theta,
    })
}

fn training_history(train: &TrainingSet, p: usize, eps: f64, constant: &Option<Arc<FlooredPsd>>) -> Result<History> {
    let path = &train.paths[p];
    let rates = match (&train.references, constant) {
        (ReferenceStream::Constant(_), Some(c)) => vec![c.clone(); path.len().saturating_sub(1)],
        (ReferenceStream::PerStep(per), _) => {
            let r = per.get(p).ok_or_else(|| Error::shape("one reference stream per path"))?;
            if r.len() + 1 < path.len() {
                return Err(Error::shape(format!("path {p}: {} references for {} states", r.len(), path.len())));
            }
            r.iter().map(|m| floor_rate(m, eps)).collect()
        }
        _ => unreachable!("constant stream always has a floored rate"),
    };
    let latents = match &train.latents {
        Some(l) => {
            let l = l.get(p).ok_or_else(|| Error::shape("one latent stream per path"))?;
            l.iter().cloned().map(Some).collect()
        }
        None => Vec::new(),
    };
    Ok(History {
        states: path.states.clone(),
        rates,
        latents,
    })
}

/// Builds every admissible `(path, index)` candidate, `index ≥ min_index`,
/// and fits the conditioning reducers.
pub fn fit_component(train: TrainingSet, config: &ComponentConfig, min_index: Option<usize>) -> Result<FittedComponent> {
    config.validate()?;
    let first = train.paths.first().ok_or(Error::EmptyInput("training paths"))?;
    let (dt, dim) = (first.dt, first.dim());
    if train.paths.iter().any(|p| p.dim() != dim || p.dt != dt) {
        return Err(Error::shape("training paths differ in dimension or dt"));
    }
    let min_index = min_index.unwrap_or(0).max(config.min_index());
    let eps = config.bridge.epsilon;
    let constant_rate = match &train.references {
        ReferenceStream::Constant(m) => {
            if m.dim() != dim {
                return Err(Error::DimMismatch { expected: dim, got: m.dim() });
            }
            Some(floor_rate(m, eps))
        }
        ReferenceStream::PerStep(_) => None,
    };
    let mut summaries = Vec::new();
    let mut atoms = Vec::new();
    let mut sources = Vec::new();
    for (p, path) in train.paths.iter().enumerate() {
        let h = training_history(&train, p, eps, &constant_rate)?;
        for i in min_index..path.len().saturating_sub(1) {
            let latent = match &train.latents {
                Some(_) => Some(
                    h.latents
                        .get(i)
                        .cloned()
                        .flatten()
                        .ok_or_else(|| Error::shape(format!("path {p}: missing latent at {i}")))?,
                ),
                None => None,
            };
            summaries.push(build_summary(config, dt, &h, i, latent.as_deref())?);
            atoms.push(path.states[i + 1].iter().zip(&path.states[i]).map(|(a, b)| a - b).collect());
            sources.push((p, i));
        }
    }
    if summaries.is_empty() {
        return Err(Error::InsufficientData(format!(
            "paths need more than {} states for one training atom",
            min_index + 1
        )));
    }
    let conditioner = Conditioner::fit(&config.conditioning, &summaries)?;
    let prepared = conditioner.prepare(&summaries);
    Ok(FittedComponent {
        config: config.clone(),
        dt,
        dim,
        min_index,
        summaries,
        atoms,
        sources,
        conditioner,
        prepared,
        constant_rate,
        training: train,
    })
}

/// Fits a single level with its own frozen reference.
pub fn fit_single(paths: Vec<CoarsePath>, config: &ComponentConfig) -> Result<FittedComponent> {
    let rate = reference_rate(&config.reference, &paths)?;
    fit_component(
        TrainingSet {
            paths,
            latents: None,
            references: ReferenceStream::Constant(rate),
        },
        config,
        None,
    )
}

fn warm_history(fc: &FittedComponent, warm: &[Vec<f64>]) -> Result<History> {
    let rate = fc
        .constant_rate
        .clone()
        .ok_or_else(|| Error::Unsupported("single-level generation needs a constant reference".into()))?;
    if warm.is_empty() {
        return Err(Error::EmptyInput("warm history"));
    }
    if let Some(bad) = warm.iter().find(|s| s.len() != fc.dim) {
        return Err(Error::DimMismatch { expected: fc.dim, got: bad.len() });
    }
    Ok(History {
        states: warm.to_vec(),
        rates: vec![rate; warm.len() - 1],
        latents: Vec::new(),
    })
}

/// Closed-loop generation of one level from a warm history to `horizon`
/// states.
pub fn generate_single<R: Rng + ?Sized>(
    fc: &FittedComponent,
    warm: &[Vec<f64>],
    horizon: usize,
    rng: &mut R,
    noise: NoiseMode,
) -> Result<CoarsePath> {
    let mut h = warm_history(fc, warm)?;
    let rate = fc.constant_rate.clone().expect("checked by warm_history");
    if h.states.len() >= horizon {
        h.states.truncate(horizon.max(1));
        return CoarsePath::new(fc.dt, h.states);
    }
    while h.states.len() < horizon {
        let i = h.states.len() - 1;
        let q = fc.summary_at(&h, i, None)?;
        let (sur, _) = fc.compute_surrogate(&q)?;
        let next = fc.advance(&h.states[i], i, &sur, rate.clone(), rng, noise)?;
        h.states.push(next);
        h.rates.push(rate.clone());
    }
    CoarsePath::new(fc.dt, h.states)
}

/// Map from a lower level's state to the raw reference rate of the level
/// above.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum BackwardMap {
    /// The lower state is a vech row: unpack and project.
    Unvech,
    /// The lower state is a hybrid-frame row: rank-one rate `c·g gᵀ` along
    /// the unit vech `g` of the decoded ribbon. `scale: None` calibrates `c`
    /// as the mean squared increment rate of the upper level's training data.
    Ribbon {
        #[serde(default)]
        scale: Option<f64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkConfig {
    pub map: BackwardMap,
    /// Whether the upper level conditions on the lower state as latent.
    #[serde(default = "default_true")]
    pub latent: bool,
}

fn default_true() -> bool {
    true
}

/// A link with its calibrated constant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedLink {
    pub map: BackwardMap,
    pub latent: bool,
    pub ribbon_scale: f64,
}

impl FittedLink {
    /// Raw PSD rate handed to the upper level.
    pub fn raw_rate(&self, lower: &[f64]) -> Result<SymMatrix> {
        match self.map {
            BackwardMap::Unvech => Ok(psd_project(&unvech(lower)?)),
            BackwardMap::Ribbon { .. } => {
                let ribbon = hybrid_frame_decode(&HybridFrame::from_vec(lower)?)?;
                let g = vech(&ribbon);
                let n = g.iter().map(|x| x * x).sum::<f64>().sqrt();
                if !(n > 0.0) {
                    return Ok(SymMatrix::zeros(g.len()));
                }
                let g: Vec<f64> = g.iter().map(|x| x / n).collect();
                Ok(SymMatrix::outer(&g).scale(self.ribbon_scale))
            }
        }
    }

    pub fn rate(&self, lower: &[f64], eps: f64) -> Result<Arc<FlooredPsd>> {
        Ok(Arc::new(spectral_floor(&self.raw_rate(lower)?, eps)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointConfig {
    /// Deepest level first; the last level is the observed state.
    pub levels: Vec<ComponentConfig>,
    /// `links[k]` maps level `k` onto level `k+1`.
    pub links: Vec<LinkConfig>,
    /// `couplings[k]` mixes levels `k` (lower) and `k+1` (upper).
    pub couplings: Vec<CouplingConfig>,
}

impl JointConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.levels.len();
        if n == 0 || n > 3 {
            return Err(Error::Config(format!("{n} levels; supported are 1 to 3")));
        }
        if self.links.len() + 1 != n || self.couplings.len() + 1 != n {
            return Err(Error::Config("need one link and one coupling per adjacent pair of levels".into()));
        }
        for l in &self.levels {
            l.validate()?;
        }
        for c in &self.couplings {
            c.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum JointLevel {
    Fitted(FittedComponent),
    /// A level frozen at a constant state; consumes no randomness.
    Constant(Vec<f64>),
}

impl JointLevel {
    fn fitted(&self) -> Option<&FittedComponent> {
        match self {
            JointLevel::Fitted(f) => Some(f),
            JointLevel::Constant(_) => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct JointModel {
    pub levels: Vec<JointLevel>,
    pub links: Vec<FittedLink>,
    pub couplings: Vec<CouplingConfig>,
}

/// Fits every level on aligned training paths (`paths[level][path]`).
pub fn fit_joint(paths: Vec<Vec<CoarsePath>>, config: &JointConfig) -> Result<JointModel> {
    config.validate()?;
    if paths.len() != config.levels.len() {
        return Err(Error::Config(format!(
            "{} path sets for {} levels",
            paths.len(),
            config.levels.len()
        )));
    }
    let n_paths = paths[0].len();
    for (l, set) in paths.iter().enumerate() {
        if set.len() != n_paths || set.iter().zip(&paths[0]).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::shape(format!("level {l}: paths not aligned with level 0")));
        }
    }
    let min_index = config.levels.iter().map(ComponentConfig::min_index).max().unwrap_or(0);
    let mut links = Vec::new();
    for (k, lc) in config.links.iter().enumerate() {
        let ribbon_scale = match lc.map {
            BackwardMap::Ribbon { scale: Some(c) } => c,
            BackwardMap::Ribbon { scale: None } => {
                let upper = &paths[k + 1];
                let (mut acc, mut n) = (0.0, 0usize);
                for p in upper {
                    for inc in p.increments() {
                        acc += inc.iter().map(|v| v * v).sum::<f64>() / p.dt;
                        n += 1;
                    }
                }
                if n == 0 {
                    return Err(Error::InsufficientData("no increments for the ribbon scale".into()));
                }
                acc / n as f64
            }
            BackwardMap::Unvech => 0.0,
        };
        links.push(FittedLink {
            map: lc.map.clone(),
            latent: lc.latent,
            ribbon_scale,
        });
    }
    let mut levels = Vec::new();
    for (l, (set, cfg)) in paths.into_iter().zip(&config.levels).enumerate() {
        let train = if l == 0 {
            let rate = reference_rate(&cfg.reference, &set)?;
            TrainingSet {
                paths: set,
                latents: None,
                references: ReferenceStream::Constant(rate),
            }
        } else {
            let link = &links[l - 1];
            let lower = match &levels[l - 1] {
                JointLevel::Fitted(f) => &f.training.paths,
                JointLevel::Constant(_) => unreachable!("fit_joint only builds fitted levels"),
            };
            let mut rates = Vec::with_capacity(set.len());
            let mut lats = Vec::with_capacity(set.len());
            for lp in lower.iter() {
                let r = (1..lp.len())
                    .map(|i| link.raw_rate(&lp.states[i]))
                    .collect::<Result<Vec<_>>>()?;
                rates.push(r);
                lats.push(lp.states[1..].to_vec());
            }
            TrainingSet {
                paths: set,
                latents: link.latent.then_some(lats),
                references: ReferenceStream::PerStep(rates),
            }
        };
        levels.push(JointLevel::Fitted(fit_component(train, cfg, Some(min_index))?));
    }
    Ok(JointModel {
        levels,
        links,
        couplings: config.couplings.clone(),
    })
}

/// One reference handed to level `level` for interval `step → step+1`.
#[derive(Debug, Clone, Copy)]
pub struct ReferenceEvent<'a> {
    pub level: usize,
    pub step: usize,
    pub lower_state: &'a [f64],
    pub rate: &'a FlooredPsd,
}

impl JointModel {
    pub fn dt(&self) -> Result<f64> {
        self.levels
            .iter()
            .find_map(|l| l.fitted().map(|f| f.dt))
            .ok_or_else(|| Error::Config("joint model has no fitted level".into()))
    }

    fn base_rate(&self) -> Result<Arc<FlooredPsd>> {
        match &self.levels[0] {
            JointLevel::Fitted(f) => f
                .constant_rate
                .clone()
                .ok_or_else(|| Error::Unsupported("deepest level needs a constant reference".into())),
            JointLevel::Constant(_) => Ok(Arc::new(spectral_floor(&SymMatrix::identity(1), 1.0))),
        }
    }

    fn warm_histories(&self, warm: &[Vec<Vec<f64>>]) -> Result<Vec<History>> {
        let n = self.levels.len();
        if warm.len() != n {
            return Err(Error::shape(format!("{} warm histories for {n} levels", warm.len())));
        }
        let len = warm[0].len();
        if len == 0 || warm.iter().any(|w| w.len() != len) {
            return Err(Error::shape("warm histories must be non-empty and of equal length"));
        }
        let base = self.base_rate()?;
        let mut out = Vec::with_capacity(n);
        for (l, w) in warm.iter().enumerate() {
            if let JointLevel::Constant(c) = &self.levels[l] {
                if w.iter().any(|s| s != c) {
                    return Err(Error::shape(format!("level {l} is constant; warm history must repeat it")));
                }
            }
            let (rates, latents) = if l == 0 {
                (vec![base.clone(); len - 1], Vec::new())
            } else {
                let link = &self.links[l - 1];
                let eps = self.levels[l].fitted().map_or(1.0, FittedComponent::epsilon);
                let rates = (1..len)
                    .map(|i| link.rate(&warm[l - 1][i], eps))
                    .collect::<Result<Vec<_>>>()?;
                let lats = (1..len).map(|i| link.latent.then(|| warm[l - 1][i].clone())).collect();
                (rates, lats)
            };
            out.push(History {
                states: w.clone(),
                rates,
                latents,
            });
        }
        Ok(out)
    }
}

/// Joint closed-loop generation; see [`generate_joint_observed`].
pub fn generate_joint<R: Rng + ?Sized>(
    model: &JointModel,
    warm: &[Vec<Vec<f64>>],
    horizon: usize,
    rng: &mut R,
    noise: NoiseMode,
) -> Result<Vec<CoarsePath>> {
    generate_joint_observed(model, warm, horizon, rng, noise, &mut |_| {})
}

/// Per coarse step, the deepest level moves first; each new latent state is
/// mapped into the frozen reference of the level above. Adjacent levels mix
/// logweights: the lower level's weights see the upper level's
/// latent-free weights and present-anchor weights, and the upper level's
/// weights see the lower level's raw weights.
pub fn generate_joint_observed<R: Rng + ?Sized>(
    model: &JointModel,
    warm: &[Vec<Vec<f64>>],
    horizon: usize,
    rng: &mut R,
    noise: NoiseMode,
    observer: &mut dyn FnMut(ReferenceEvent<'_>),
) -> Result<Vec<CoarsePath>> {
    let dt = model.dt()?;
    let mut hs = model.warm_histories(warm)?;
    let n = model.levels.len();
    if let Some(counts) = {
        let c: Vec<usize> = model.levels.iter().filter_map(|l| l.fitted().map(|f| f.n_atoms())).collect();
        c.windows(2).any(|w| w[0] != w[1]).then_some(c)
    } {
        let coupled = model.couplings.iter().any(|c| c.rho_x != 0.0 || c.rho_y != 0.0);
        if coupled {
            return Err(Error::shape(format!("coupled levels need one candidate set, got {counts:?}")));
        }
    }
    let base = model.base_rate()?;

    while hs[0].states.len() < horizon {
        let i = hs[0].states.len() - 1;
        // Latent-free and present-anchor weights of every upper level, from
        // the histories at index i.
        let mut upper_nolat: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut upper_anchor: Vec<Option<Vec<f64>>> = vec![None; n];
        for l in 1..n {
            let c = &model.couplings[l - 1];
            if c.rho_y == 0.0 {
                continue;
            }
            if let (Some(f), true) = (model.levels[l].fitted(), model.levels[l - 1].fitted().is_some()) {
                if c.alpha < 1.0 {
                    let q = f.summary_at(&hs[l], i, None)?;
                    upper_nolat[l] = Some(f.logweights(&q, Terms::NO_LATENT)?.0);
                }
                if c.alpha > 0.0 {
                    upper_anchor[l] = Some(f.anchor_logweights(&hs[l].states[i])?);
                }
            }
        }

        let mut lower_raw: Option<Vec<f64>> = None;
        for l in 0..n {
            let (rate, latent) = if l == 0 {
                (base.clone(), None)
            } else {
                let link = &model.links[l - 1];
                let lower_new = hs[l - 1].states[i + 1].clone();
                let eps = model.levels[l].fitted().map_or(1.0, FittedComponent::epsilon);
                let rate = link.rate(&lower_new, eps)?;
                observer(ReferenceEvent {
                    level: l,
                    step: i,
                    lower_state: &lower_new,
                    rate: &rate,
                });
                (rate, link.latent.then_some(lower_new))
            };
            let next = match &model.levels[l] {
                JointLevel::Constant(c) => {
                    lower_raw = None;
                    c.clone()
                }
                JointLevel::Fitted(f) => {
                    let q = f.summary_at(&hs[l], i, latent.as_deref())?;
                    let (raw, dist) = f.logweights(&q, Terms::ALL)?;
                    let mut lw = raw.clone();
                    if l > 0 {
                        let c = &model.couplings[l - 1];
                        if let (Some(lf), true) = (&lower_raw, c.rho_x != 0.0) {
                            lw = mix(&[(1.0 - c.rho_x, &lw), (c.rho_x, lf)], lw.len());
                        }
                    }
                    if l + 1 < n {
                        let c = &model.couplings[l];
                        if c.rho_y != 0.0 && model.levels[l + 1].fitted().is_some() {
                            let zeros;
                            let lx: &[f64] = match &upper_nolat[l + 1] {
                                Some(v) => v,
                                None => {
                                    zeros = vec![0.0; lw.len()];
                                    &zeros
                                }
                            };
                            let lx0: &[f64] = upper_anchor[l + 1].as_deref().unwrap_or(lx);
                            lw = mix(
                                &[
                                    (1.0 - c.rho_y, &lw),
                                    (c.rho_y * (1.0 - c.alpha), lx),
                                    (c.rho_y * c.alpha, lx0),
                                ],
                                lw.len(),
                            );
                        }
                    }
                    let sur = f.surrogate_from(&lw, &dist)?;
                    lower_raw = Some(raw);
                    f.advance(&hs[l].states[i], i, &sur, rate.clone(), rng, noise)?
                }
            };
            let h = &mut hs[l];
            h.states.push(next);
            h.rates.push(rate);
            if l > 0 && model.links[l - 1].latent {
                let lat = hs[l - 1].states[i + 1].clone();
                hs[l].latents.push(Some(lat));
            } else if l > 0 {
                hs[l].latents.push(None);
            }
        }
    }
    hs.into_iter()
        .map(|mut h| {
            h.states.truncate(horizon.max(1));
            CoarsePath::new(dt, h.states)
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ComponentManifest {
    kind: String,
    config: ComponentConfig,
    dt: f64,
    dim: usize,
    min_index: usize,
    n_atoms: usize,
    constant_rate: Option<Vec<f64>>,
    has_latents: bool,
    reducers: Option<BlockPcr>,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn rows_as_paths(dt: f64, rows: &[Vec<Vec<f64>>]) -> Result<Vec<CoarsePath>> {
    rows.iter().map(|r| CoarsePath::new(dt, r.clone())).collect()
}

fn write_rows(path: &Path, dt: f64, rows: &[Vec<Vec<f64>>]) -> Result<()> {
    let mut buf = Vec::new();
    write_paths_csv(&mut buf, &rows_as_paths(dt, rows)?)?;
    write_atomic(path, &buf)
}

fn read_rows(path: &Path, dt: f64) -> Result<Vec<Vec<Vec<f64>>>> {
    let f = std::io::BufReader::new(fs::File::open(path)?);
    Ok(read_paths_csv(f, dt)?.into_iter().map(|p| p.states).collect())
}

impl FittedComponent {
    /// Writes `manifest.json` and the CSV tables into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let reducers = match &self.conditioner {
            Conditioner::Pcr(b) => Some(b.clone()),
            Conditioner::ReferenceAware(_) => None,
        };
        let constant_rate = match &self.training.references {
            ReferenceStream::Constant(m) => Some(vech(m)),
            ReferenceStream::PerStep(_) => None,
        };
        let manifest = ComponentManifest {
            kind: "component".into(),
            config: self.config.clone(),
            dt: self.dt,
            dim: self.dim,
            min_index: self.min_index,
            n_atoms: self.atoms.len(),
            constant_rate,
            has_latents: self.training.latents.is_some(),
            reducers,
        };
        write_atomic(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
        let mut buf = Vec::new();
        write_paths_csv(&mut buf, &self.training.paths)?;
        write_atomic(&dir.join("paths.csv"), &buf)?;
        if let Some(l) = &self.training.latents {
            write_rows(&dir.join("latents.csv"), self.dt, l)?;
        }
        if let ReferenceStream::PerStep(r) = &self.training.references {
            let rows: Vec<Vec<Vec<f64>>> = r.iter().map(|p| p.iter().map(vech).collect()).collect();
            write_rows(&dir.join("references.csv"), self.dt, &rows)?;
        }
        let mut atoms: Vec<Vec<Vec<f64>>> = vec![Vec::new(); self.training.paths.len()];
        for ((p, _), a) in self.sources.iter().zip(&self.atoms) {
            atoms[*p].push(a.clone());
        }
        write_rows(&dir.join("atoms.csv"), self.dt, &atoms)?;
        Ok(())
    }

    /// Rebuilds a saved component and checks it against the stored tables.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: ComponentManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.kind != "component" {
            return Err(Error::Parse(format!("not a component manifest: {}", manifest.kind)));
        }
        let dt = manifest.dt;
        let f = std::io::BufReader::new(fs::File::open(dir.join("paths.csv"))?);
        let paths = read_paths_csv(f, dt)?;
        let latents = if manifest.has_latents {
            Some(read_rows(&dir.join("latents.csv"), dt)?)
        } else {
            None
        };
        let references = match &manifest.constant_rate {
            Some(v) => ReferenceStream::Constant(unvech(v)?),
            None => ReferenceStream::PerStep(
                read_rows(&dir.join("references.csv"), dt)?
                    .iter()
                    .map(|p| p.iter().map(|r| unvech(r)).collect::<Result<Vec<_>>>())
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        let fc = fit_component(
            TrainingSet {
                paths,
                latents,
                references,
            },
            &manifest.config,
            Some(manifest.min_index),
        )?;
        let stored: Vec<Vec<f64>> = read_rows(&dir.join("atoms.csv"), dt)?.into_iter().flatten().collect();
        let reducers = match &fc.conditioner {
            Conditioner::Pcr(b) => Some(b),
            Conditioner::ReferenceAware(_) => None,
        };
        if fc.n_atoms() != manifest.n_atoms || stored != fc.atoms || reducers != manifest.reducers.as_ref() {
            return Err(Error::Parse(format!("model in {} is inconsistent with its tables", dir.display())));
        }
        Ok(fc)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JointManifest {
    kind: String,
    links: Vec<FittedLink>,
    couplings: Vec<CouplingConfig>,
    constants: Vec<Option<Vec<f64>>>,
}

impl JointModel {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let constants = self
            .levels
            .iter()
            .map(|l| match l {
                JointLevel::Constant(c) => Some(c.clone()),
                JointLevel::Fitted(_) => None,
            })
            .collect();
        let manifest = JointManifest {
            kind: "joint".into(),
            links: self.links.clone(),
            couplings: self.couplings.clone(),
            constants,
        };
        for (k, l) in self.levels.iter().enumerate() {
            if let JointLevel::Fitted(f) = l {
                f.save(&dir.join(format!("level{k}")))?;
            }
        }
        write_atomic(&dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: JointManifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        if manifest.kind != "joint" {
            return Err(Error::Parse(format!("not a joint manifest: {}", manifest.kind)));
        }
        let levels = manifest
            .constants
            .iter()
            .enumerate()
            .map(|(k, c)| match c {
                Some(c) => Ok(JointLevel::Constant(c.clone())),
                None => FittedComponent::load(&dir.join(format!("level{k}"))).map(JointLevel::Fitted),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(JointModel {
            levels,
            links: manifest.links,
            couplings: manifest.couplings,
        })
    }
}

/// Kind recorded in a model directory's manifest.
pub fn model_kind(dir: &Path) -> Result<String> {
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    v.get("kind")
        .and_then(|k| k.as_str())
        .map(str::to_owned)
        .ok_or_else(|| Error::Parse("manifest has no kind".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::{KernelVariant, Normalization};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(p: usize, h: f64) -> ComponentConfig {
        ComponentConfig {
            p_max: p,
            conditioning: ConditioningSpec::Full {
                normalization: Normalization::Blockwise,
            },
            kernel: KernelConfig::gaussian(h),
            bridge: BridgeStepConfig {
                n_inner: 4,
                epsilon: 1e-3,
                drift_clip: None,
            },
            wls: None,
            reference: ReferenceSpec::Empirical,
        }
    }

    fn random_paths(seed: u64, n: usize, t: usize, d: usize) -> Vec<CoarsePath> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let mut x = vec![0.0; d];
                let states = (0..t)
                    .map(|_| {
                        let s = x.clone();
                        for v in x.iter_mut() {
                            *v += 0.1 * rng.random_range(-1.0..1.0) - 0.05 * *v;
                        }
                        s
                    })
                    .collect();
                CoarsePath::new(0.1, states).unwrap()
            })
            .collect()
    }

    #[test]
    fn atom_counts() {
        let p = 3;
        let fc = fit_single(random_paths(1, 1, p + 2, 2), &cfg(p, 1.0)).unwrap();
        assert_eq!(fc.n_atoms(), 1);
        let fc = fit_single(random_paths(2, 5, 40, 2), &cfg(p, 1.0)).unwrap();
        assert_eq!(fc.n_atoms(), 5 * (40 - p - 1));
        assert!(matches!(
            fit_single(random_paths(3, 2, p + 1, 2), &cfg(p, 1.0)),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn coupling_examples() {
        let lx = vec![0.0, -1.0, f64::NEG_INFINITY];
        let lf = vec![-2.0, f64::NEG_INFINITY, -0.5];
        let lx0 = vec![-0.1, -0.2, -0.3];
        let (a, b) = couple_logweights(&lx, &lf, &lx0, &CouplingConfig::NONE).unwrap();
        assert_eq!((a, b), (lx.clone(), lf.clone()));
        let c = CouplingConfig {
            rho_x: 1.0,
            rho_y: 0.0,
            alpha: 0.3,
        };
        assert_eq!(couple_logweights(&lx, &lf, &lx0, &c).unwrap().0, lf);
        let c = CouplingConfig {
            rho_x: 0.0,
            rho_y: 1.0,
            alpha: 1.0,
        };
        assert_eq!(couple_logweights(&lx, &lf, &lx0, &c).unwrap().1, lx0);
        let c = CouplingConfig {
            rho_x: 0.5,
            rho_y: 0.5,
            alpha: 0.5,
        };
        let (a, b) = couple_logweights(&lx, &lf, &lx0, &c).unwrap();
        assert_eq!(a, vec![-1.0, f64::NEG_INFINITY, f64::NEG_INFINITY]);
        assert_eq!(b[1], f64::NEG_INFINITY);
        assert_eq!(b[2], f64::NEG_INFINITY);
        assert!(couple_logweights(&lx, &lf[..2], &lx0, &c).is_err());
    }

    #[test]
    fn surrogate_concentrates_and_splits() {
        let paths = random_paths(4, 3, 30, 2);
        let fc = fit_single(paths, &cfg(2, 1e-4)).unwrap();
        let (sur, _) = fc.compute_surrogate(&fc.summaries[10]).unwrap();
        let w = sur.source_indices.iter().position(|&j| j == 10).map(|k| sur.weights[k]).unwrap();
        assert!(w >= 0.99);

        // Two candidates mirrored around the query.
        let path = CoarsePath::new(1.0, vec![vec![0.0], vec![1.0], vec![0.0], vec![-1.0], vec![0.0]]).unwrap();
        let mut c = cfg(0, 1.0);
        c.reference = ReferenceSpec::Identity { scale: 1.0 };
        let fc = fit_single(vec![path], &c).unwrap();
        let q = ConditioningSummary {
            anchor: vec![0.5],
            ..Default::default()
        };
        let (lw, _) = fc.logweights(&q, Terms::ALL).unwrap();
        assert_eq!(lw[0], lw[1]);
    }

    #[test]
    fn quartic_fallback_keeps_nearest() {
        let paths = random_paths(5, 4, 30, 2);
        let mut c = cfg(1, 1e-6);
        c.kernel.variant = KernelVariant::QuarticCompact;
        let fc = fit_single(paths, &c).unwrap();
        let mut q = fc.summaries[0].clone();
        q.anchor = vec![50.0, 50.0];
        let (sur, lw) = fc.compute_surrogate(&q).unwrap();
        assert!(lw.iter().all(|l| *l == f64::NEG_INFINITY));
        assert_eq!(sur.len(), 16);
        assert!(sur.weights.iter().all(|w| *w == 1.0 / 16.0));
    }

    #[test]
    fn short_horizons_echo_warm_history() {
        let paths = random_paths(6, 3, 30, 2);
        let fc = fit_single(paths.clone(), &cfg(2, 0.5)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let one = generate_single(&fc, &paths[0].states[..1], 1, &mut rng, NoiseMode::On).unwrap();
        assert_eq!(one.states, paths[0].states[..1].to_vec());
        let warm = &paths[0].states[..5];
        let echo = generate_single(&fc, warm, 5, &mut rng, NoiseMode::On).unwrap();
        assert_eq!(echo.states, warm.to_vec());
    }

    #[test]
    fn staircase_is_memorised() {
        let states: Vec<Vec<f64>> = (0..20).map(|k| vec![0.1 * k as f64]).collect();
        let path = CoarsePath::new(1.0, states.clone()).unwrap();
        let fc = fit_single(vec![path], &cfg(2, 1e-3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = generate_single(&fc, &states[..3], 20, &mut rng, NoiseMode::Off).unwrap();
        for (a, b) in out.states.iter().zip(&states) {
            assert!((a[0] - b[0]).abs() < 1e-9);
        }
    }

    #[test]
    fn cold_start_uses_available_memory() {
        let paths = random_paths(7, 3, 30, 2);
        let fc = fit_single(paths.clone(), &cfg(3, 0.5)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let out = generate_single(&fc, &paths[1].states[..1], 10, &mut rng, NoiseMode::On).unwrap();
        assert_eq!(out.len(), 10);
    }

    #[test]
    fn save_load_reproduces_surrogates() {
        let dir = tempfile::tempdir().unwrap();
        let paths = random_paths(8, 3, 25, 2);
        let mut c = cfg(2, 0.3);
        c.conditioning = ConditioningSpec::Pcr {
            threshold: 0.9,
            normalization: Normalization::Componentwise,
        };
        let fc = fit_single(paths, &c).unwrap();
        fc.save(dir.path()).unwrap();
        let back = FittedComponent::load(dir.path()).unwrap();
        let q = fc.summaries[7].clone();
        let (a, la) = fc.compute_surrogate(&q).unwrap();
        let (b, lb) = back.compute_surrogate(&q).unwrap();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        assert_eq!(model_kind(dir.path()).unwrap(), "component");
    }
}
