//! Subcommand bodies. Each takes the validated config plus the command-line
//! overrides and writes its tables under the output directory.

use std::path::{Path, PathBuf};

use trsbts_core::bridge::NoiseMode;
use trsbts_core::generator::{fit_joint, fit_single, generate_joint, generate_single, model_kind, FittedComponent, JointModel};
use trsbts_core::rng::{self, Rng};
use trsbts_core::scoring::{
    energy_score_path, write_score_report, EntropicConfig, FeatureStats, Forecaster, ScoreRow, WindowFeatures,
};
use trsbts_core::CoarsePath;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::heston::{run_heston, write_heston};
use crate::io::{write_atomic, write_paths};
use crate::ladder::{run_ladder, write_ladder};
use crate::select::{run_select, write_selection};
use crate::sweep::{run_sweep, write_sweep};

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    /// Model directory for `generate` and `validate`; `<out>/model` when
    /// absent.
    pub model: Option<PathBuf>,
}

pub enum LoadedModel {
    Single(FittedComponent),
    Joint(JointModel),
}

impl LoadedModel {
    pub fn load(dir: &Path) -> Result<Self> {
        match model_kind(dir)?.as_str() {
            "component" => Ok(LoadedModel::Single(FittedComponent::load(dir)?)),
            "joint" => Ok(LoadedModel::Joint(JointModel::load(dir)?)),
            other => Err(CliError::data(format!("unknown model kind `{other}`"))),
        }
    }

    pub fn n_levels(&self) -> usize {
        match self {
            LoadedModel::Single(_) => 1,
            LoadedModel::Joint(m) => m.levels.len(),
        }
    }

    /// Training paths of the observed (last) level.
    pub fn top_training(&self) -> Option<&[CoarsePath]> {
        match self {
            LoadedModel::Single(f) => Some(&f.training().paths),
            LoadedModel::Joint(m) => m.levels.last().and_then(|l| match l {
                trsbts_core::generator::JointLevel::Fitted(f) => Some(f.training().paths.as_slice()),
                trsbts_core::generator::JointLevel::Constant(_) => None,
            }),
        }
    }

    pub fn generate(&self, warm: &[Vec<Vec<f64>>], horizon: usize, rng: &mut Rng) -> Result<Vec<CoarsePath>> {
        Ok(match self {
            LoadedModel::Single(f) => vec![generate_single(f, &warm[0], horizon, rng, NoiseMode::On)?],
            LoadedModel::Joint(m) => generate_joint(m, warm, horizon, rng, NoiseMode::On)?,
        })
    }
}

impl Forecaster for LoadedModel {
    fn forecast(&self, history: &[Vec<Vec<f64>>], k: usize, rng: &mut Rng) -> trsbts_core::Result<Vec<Vec<f64>>> {
        match self {
            LoadedModel::Single(f) => f.forecast(history, k, rng),
            LoadedModel::Joint(m) => m.forecast(history, k, rng),
        }
    }
}

fn model_dir(opts: &RunOptions, out: &Path) -> PathBuf {
    opts.model.clone().unwrap_or_else(|| out.join("model"))
}

/// Fits the configured levels and writes the model directory.
pub fn cmd_fit(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<PathBuf> {
    let out = cfg.output_dir(opts.out.as_deref())?;
    let joint = cfg.joint_config()?;
    let data = cfg.dataset(joint.levels.len(), cfg.seed(opts.seed))?;
    let dir = model_dir(opts, &out);
    if joint.levels.len() == 1 {
        let fc = fit_single(data.train.into_iter().next().expect("one level"), &joint.levels[0])?;
        fc.save(&dir)?;
    } else {
        fit_joint(data.train, &joint)?.save(&dir)?;
    }
    Ok(dir)
}

/// Continues data paths from their first `warm` states.
pub fn cmd_generate(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<PathBuf>> {
    let out = cfg.output_dir(opts.out.as_deref())?;
    let g = cfg
        .generate
        .as_ref()
        .ok_or_else(|| CliError::config("missing `generate` section"))?;
    let model = LoadedModel::load(&model_dir(opts, &out))?;
    let seed = cfg.seed(opts.seed);
    let data = cfg.dataset(model.n_levels(), seed)?;
    let source = data.validation.unwrap_or(data.train);
    let n = g.n_paths.unwrap_or(source[0].len()).min(source[0].len());
    let mut levels: Vec<Vec<CoarsePath>> = vec![Vec::with_capacity(n); model.n_levels()];
    for p in 0..n {
        if source.iter().any(|l| l[p].len() < g.warm) {
            return Err(CliError::data(format!("path {p} is shorter than the warm start {}", g.warm)));
        }
        let warm: Vec<Vec<Vec<f64>>> = source.iter().map(|l| l[p].states[..g.warm].to_vec()).collect();
        let mut r = rng::derived(seed, &[p as u64]);
        for (k, path) in model.generate(&warm, g.horizon, &mut r)?.into_iter().enumerate() {
            levels[k].push(path);
        }
    }
    let mut files = Vec::new();
    for (k, paths) in levels.iter().enumerate() {
        let f = out.join(format!("generated_level{k}.csv"));
        write_paths(&f, paths)?;
        files.push(f);
    }
    Ok(files)
}

/// Energy score of a saved model on held-out paths.
pub fn cmd_validate(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<PathBuf> {
    let out = cfg.output_dir(opts.out.as_deref())?;
    let sc = cfg
        .scoring
        .as_ref()
        .and_then(|s| s.energy.clone().map(|e| (e, s.enriched)))
        .ok_or_else(|| CliError::config("missing `scoring.energy` section"))?;
    let model = LoadedModel::load(&model_dir(opts, &out))?;
    let seed = cfg.seed(opts.seed);
    let data = cfg.dataset(model.n_levels(), seed)?;
    let val = data
        .validation
        .ok_or_else(|| CliError::config("validation needs held-out paths (data.validation or dgp.n_validation)"))?;
    let features = if sc.1 {
        let train = model.top_training().ok_or_else(|| CliError::data("the model has no fitted observed level"))?;
        WindowFeatures::Enriched(FeatureStats::fit(train)?)
    } else {
        WindowFeatures::Basic
    };
    let name = format!("energy_k{}", sc.0.k);
    let mut rows = Vec::new();
    let (mut acc, mut count) = (0.0, 0usize);
    for p in 0..val[0].len() {
        let levels: Vec<CoarsePath> = val.iter().map(|l| l[p].clone()).collect();
        let (s, n) = energy_score_path(&model, &levels, &sc.0, &features, rng::stream_id(&[seed, p as u64]))?;
        acc += s * n as f64;
        count += n;
        rows.push(ScoreRow {
            config_id: format!("path{p}"),
            score_name: name.clone(),
            value: s,
            n_windows: n,
            seed,
        });
    }
    rows.push(ScoreRow {
        config_id: "all".into(),
        score_name: name,
        value: acc / count as f64,
        n_windows: count,
        seed,
    });
    let mut buf = Vec::new();
    write_score_report(&mut buf, &rows)?;
    let f = out.join("validation_scores.csv");
    write_atomic(&f, &buf)?;
    Ok(f)
}

pub fn cmd_sweep_dim(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<PathBuf> {
    let out = cfg.output_dir(opts.out.as_deref())?;
    let sec = cfg.sweep.as_ref().ok_or_else(|| CliError::config("missing `sweep` section"))?;
    let base = cfg.dgp.as_ref().and_then(|d| d.hopf.clone()).unwrap_or_default();
    let seeds = match opts.seed {
        Some(s) => vec![s],
        None if cfg.seeds.is_empty() => vec![0],
        None => cfg.seeds.clone(),
    };
    let res = run_sweep(&base, sec, &seeds)?;
    write_sweep(&out, &res)?;
    Ok(out.join("sweep_dim.csv"))
}

pub fn cmd_ladder(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<PathBuf> {
    let out = cfg.output_dir(opts.out.as_deref())?;
    let sec = cfg.ladder.as_ref().ok_or_else(|| CliError::config("missing `ladder` section"))?;
    let joint = cfg.joint_config()?;
    let seed = cfg.seed(opts.seed);
    let data = cfg.dataset(joint.levels.len(), seed)?;
    let val = data
        .validation
        .ok_or_else(|| CliError::config("the ladder needs held-out paths (data.validation or dgp.n_validation)"))?;
    let res = run_ladder(&joint, sec, &data.train, &val, seed)?;
    write_ladder(&out, &res)?;
    Ok(out.join("ladder.json"))
}

pub fn cmd_heston(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<PathBuf> {
    let out = cfg.output_dir(opts.out.as_deref())?;
    let dgp = cfg.dgp.as_ref().and_then(|d| d.heston.clone()).unwrap_or_default();
    let sec = cfg.heston.clone().unwrap_or_default();
    let res = run_heston(&dgp, &sec, cfg.seed(opts.seed))?;
    write_heston(&out, &res)?;
    Ok(out.join("heston_summary.csv"))
}

/// Returns the selected candidate's name.
pub fn cmd_select_reference(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<String> {
    let out = cfg.output_dir(opts.out.as_deref())?;
    let sec = cfg
        .select_reference
        .as_ref()
        .ok_or_else(|| CliError::config("missing `select_reference` section"))?;
    let ecfg = sec
        .entropic
        .or_else(|| cfg.scoring.as_ref().and_then(|s| s.entropic))
        .unwrap_or_else(|| EntropicConfig::new(1e-8));
    let n_levels = cfg.model.as_ref().map_or(1, |m| m.levels.len());
    let data = cfg.dataset(n_levels, cfg.seed(opts.seed))?;
    let top = data.train.last().expect("at least one level");
    let s = run_select(sec, top, &ecfg)?;
    write_selection(&out, &s)?;
    Ok(s.names[s.chosen].clone())
}
