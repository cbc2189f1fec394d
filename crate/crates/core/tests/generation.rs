//! End-to-end generation contracts: golden runs, joint determinism, the
//! dynamic-reference hook, and degenerations to the single-level loop.

use std::path::PathBuf;

use trsbts_core::bridge::{BridgeStepConfig, NoiseMode};
use trsbts_core::conditioning::{ConditioningSpec, KernelConfig, Normalization};
use trsbts_core::descriptor::cumulative_avg_cov;
use trsbts_core::dgp::{simulate_heston, simulate_hopf, HestonConfig, HopfConfig};
use trsbts_core::generator::*;
use trsbts_core::linalg::{psd_project, spectral_floor, unvech, vech, SymMatrix};
use trsbts_core::path::write_paths_csv;
use trsbts_core::rng;
use trsbts_core::CoarsePath;

fn component(p: usize, h: f64, eps: f64) -> ComponentConfig {
    ComponentConfig {
        p_max: p,
        conditioning: ConditioningSpec::Pcr {
            threshold: 0.95,
            normalization: Normalization::Blockwise,
        },
        kernel: KernelConfig::gaussian(h),
        bridge: BridgeStepConfig {
            n_inner: 8,
            epsilon: eps,
            drift_clip: None,
        },
        wls: None,
        reference: ReferenceSpec::Empirical,
    }
}

fn golden(name: &str, paths: &[CoarsePath]) {
    let mut buf = Vec::new();
    write_paths_csv(&mut buf, paths).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let file = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("TRSBTS_BLESS").is_some() {
        std::fs::create_dir_all(file.parent().unwrap()).unwrap();
        std::fs::write(&file, &text).unwrap();
    }
    let want = std::fs::read_to_string(&file).unwrap_or_else(|_| panic!("missing golden file {}", file.display()));
    assert_eq!(text, want, "{name} drifted from its golden file");
}

fn hopf_model() -> (FittedComponent, Vec<CoarsePath>) {
    let cfg = HopfConfig {
        dim: 3,
        years: 0.4,
        seed: 5,
        ..HopfConfig::default()
    };
    let paths: Vec<CoarsePath> = (0..3).map(|k| simulate_hopf(&cfg, k).unwrap()).collect();
    (fit_single(paths.clone(), &component(2, 0.5, 1e-4)).unwrap(), paths)
}

#[test]
fn generate_single_matches_golden_file() {
    let (fc, paths) = hopf_model();
    let mut r = rng::stream(42, 0);
    let out = generate_single(&fc, &paths[0].states[..3], 25, &mut r, NoiseMode::On).unwrap();
    assert_eq!(out.len(), 25);
    assert_eq!(out.states[..3], paths[0].states[..3]);
    golden("generate_single.csv", &[out]);
}

/// Two aligned levels: the cumulative realised covariance of a Heston path
/// (vech rows) and the path itself, both from coarse index 1.
fn two_level_data(n: u64, steps: usize) -> Vec<Vec<CoarsePath>> {
    let cfg = HestonConfig {
        steps,
        seed: 9,
        ..HestonConfig::default()
    };
    let mut desc = Vec::new();
    let mut state = Vec::new();
    for k in 0..n {
        let (p, _) = simulate_heston(&cfg, k).unwrap();
        let m = cumulative_avg_cov(&p, cfg.dt).unwrap();
        desc.push(CoarsePath::new(cfg.dt, m.packed.clone()).unwrap());
        state.push(CoarsePath::new(cfg.dt, p.states[1..].to_vec()).unwrap());
    }
    vec![desc, state]
}

fn joint_config(coupling: CouplingConfig) -> JointConfig {
    JointConfig {
        levels: vec![component(1, 0.8, 1e-7), component(1, 0.8, 1e-6)],
        links: vec![LinkConfig {
            map: BackwardMap::Unvech,
            latent: true,
        }],
        couplings: vec![coupling],
    }
}

fn warm(data: &[Vec<CoarsePath>], path: usize, len: usize) -> Vec<Vec<Vec<f64>>> {
    data.iter().map(|l| l[path].states[..len].to_vec()).collect()
}

#[test]
fn generate_joint_matches_golden_files_and_is_deterministic() {
    let data = two_level_data(4, 40);
    let coupled = CouplingConfig {
        rho_x: 0.3,
        rho_y: 0.2,
        alpha: 0.5,
    };
    let model = fit_joint(data.clone(), &joint_config(coupled)).unwrap();
    let w = warm(&data, 0, 4);
    let a = generate_joint(&model, &w, 20, &mut rng::stream(3, 0), NoiseMode::On).unwrap();
    let b = generate_joint(&model, &w, 20, &mut rng::stream(3, 0), NoiseMode::On).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 2);
    assert!(a.iter().all(|p| p.len() == 20));
    golden("generate_joint_level0.csv", &a[..1]);
    golden("generate_joint_level1.csv", &a[1..]);
}

#[test]
fn state_level_receives_the_floored_projected_descriptor() {
    let data = two_level_data(3, 40);
    let model = fit_joint(data.clone(), &joint_config(CouplingConfig::NONE)).unwrap();
    let mut seen = 0;
    let out = generate_joint_observed(
        &model,
        &warm(&data, 1, 3),
        15,
        &mut rng::stream(1, 1),
        NoiseMode::On,
        &mut |ev| {
            assert_eq!(ev.level, 1);
            let expect = spectral_floor(&psd_project(&unvech(ev.lower_state).unwrap()), 1e-6);
            assert_eq!(ev.rate.matrix(), expect.matrix());
            assert_eq!(ev.rate.epsilon(), 1e-6);
            seen += 1;
        },
    )
    .unwrap();
    assert_eq!(seen, 15 - 3);
    // The lower state handed over is the newly generated one.
    assert_eq!(out[0].len(), 15);
}

#[test]
fn constant_covariance_level_reduces_to_single_generation() {
    let data = two_level_data(3, 40);
    let c = SymMatrix::from_rows(&[vec![0.02, -0.01], vec![-0.01, 0.03]]).unwrap();
    let cfg = component(2, 0.7, 1e-6);
    let states = data[1].clone();

    let single = fit_component(
        TrainingSet {
            paths: states.clone(),
            latents: None,
            references: ReferenceStream::Constant(c.clone()),
        },
        &cfg,
        None,
    )
    .unwrap();
    let per_step = states.iter().map(|p| vec![c.clone(); p.len() - 1]).collect();
    let upper = fit_component(
        TrainingSet {
            paths: states.clone(),
            latents: None,
            references: ReferenceStream::PerStep(per_step),
        },
        &cfg,
        None,
    )
    .unwrap();
    let model = JointModel {
        levels: vec![JointLevel::Constant(vech(&c)), JointLevel::Fitted(upper)],
        links: vec![FittedLink {
            map: BackwardMap::Unvech,
            latent: false,
            ribbon_scale: 0.0,
        }],
        couplings: vec![CouplingConfig::NONE],
    };
    let w = &states[2].states[..3];
    let joint_warm = vec![vec![vech(&c); 3], w.to_vec()];
    let a = generate_single(&single, w, 18, &mut rng::stream(8, 0), NoiseMode::On).unwrap();
    let b = generate_joint(&model, &joint_warm, 18, &mut rng::stream(8, 0), NoiseMode::On).unwrap();
    assert_eq!(a, b[1]);
    assert!(b[0].states.iter().all(|s| *s == vech(&c)));
}

#[test]
fn warm_start_of_full_length_echoes_history() {
    let data = two_level_data(3, 30);
    let model = fit_joint(data.clone(), &joint_config(CouplingConfig::NONE)).unwrap();
    let w = warm(&data, 0, 10);
    let out = generate_joint(&model, &w, 10, &mut rng::stream(0, 0), NoiseMode::On).unwrap();
    for (l, p) in out.iter().enumerate() {
        assert_eq!(p.states, w[l]);
    }
}

#[test]
fn saved_models_reload_to_identical_generation() {
    let dir = tempfile::tempdir().unwrap();
    let data = two_level_data(3, 30);
    let coupled = CouplingConfig {
        rho_x: 0.5,
        rho_y: 0.5,
        alpha: 0.25,
    };
    let model = fit_joint(data.clone(), &joint_config(coupled)).unwrap();
    model.save(dir.path()).unwrap();
    assert_eq!(model_kind(dir.path()).unwrap(), "joint");
    let back = JointModel::load(dir.path()).unwrap();
    let w = warm(&data, 2, 3);
    let a = generate_joint(&model, &w, 12, &mut rng::stream(4, 0), NoiseMode::On).unwrap();
    let b = generate_joint(&back, &w, 12, &mut rng::stream(4, 0), NoiseMode::On).unwrap();
    assert_eq!(a, b);

    let (fc, paths) = hopf_model();
    let d2 = tempfile::tempdir().unwrap();
    fc.save(d2.path()).unwrap();
    let again = FittedComponent::load(d2.path()).unwrap();
    let x = generate_single(&fc, &paths[1].states[..3], 10, &mut rng::stream(2, 0), NoiseMode::On).unwrap();
    let y = generate_single(&again, &paths[1].states[..3], 10, &mut rng::stream(2, 0), NoiseMode::On).unwrap();
    assert_eq!(x, y);
}

#[test]
fn tampered_atom_table_is_rejected() {
    let (fc, _) = hopf_model();
    let dir = tempfile::tempdir().unwrap();
    fc.save(dir.path()).unwrap();
    let f = dir.path().join("atoms.csv");
    let text = std::fs::read_to_string(&f).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_owned).collect();
    lines[1] = lines[1].replacen(",0,", ",0,1", 1);
    std::fs::write(&f, lines.join("\n") + "\n").unwrap();
    assert!(FittedComponent::load(dir.path()).is_err());
}

#[test]
fn ribbon_link_matches_descriptor_reference() {
    use trsbts_core::descriptor::{hybrid_frame_encode, ribbon_reference};
    let m = SymMatrix::from_rows(&[vec![0.04, 0.01], vec![0.01, 0.02]]).unwrap();
    let row = hybrid_frame_encode(&m, 0.05).unwrap().to_vec();
    let link = FittedLink {
        map: BackwardMap::Ribbon { scale: None },
        latent: true,
        ribbon_scale: 0.7,
    };
    let a = link.rate(&row, 1e-5).unwrap();
    let b = ribbon_reference(&row, 0.7, 1e-5).unwrap();
    assert_eq!(a.matrix(), b.matrix());
}
