//! Fixtures shared by the benchmarks.

use trsbts_core::bridge::BridgeStepConfig;
use trsbts_core::conditioning::{ConditioningSpec, KernelConfig, KernelVariant, Normalization};
use trsbts_core::dgp::{simulate_hopf, HopfConfig};
use trsbts_core::generator::{fit_single, ComponentConfig, FittedComponent, ReferenceSpec};
use trsbts_core::CoarsePath;

/// One Hopf path of `years` in ambient dimension `dim`.
pub fn hopf_path(dim: usize, years: f64) -> CoarsePath {
    let cfg = HopfConfig {
        dim,
        years,
        seed: 1,
        ..HopfConfig::default()
    };
    simulate_hopf(&cfg, 0).expect("valid config")
}

pub fn component(pcr: bool) -> ComponentConfig {
    let normalization = Normalization::Blockwise;
    ComponentConfig {
        p_max: 1,
        conditioning: if pcr {
            ConditioningSpec::Pcr {
                threshold: 0.9,
                normalization,
            }
        } else {
            ConditioningSpec::Full { normalization }
        },
        kernel: KernelConfig {
            variant: KernelVariant::QuarticCompact,
            bandwidth: 0.5,
            anchor_bandwidth: None,
        },
        bridge: BridgeStepConfig {
            n_inner: 4,
            epsilon: 1e-6,
            drift_clip: None,
        },
        wls: None,
        reference: ReferenceSpec::Empirical,
    }
}

pub fn hopf_model(dim: usize, years: f64, pcr: bool) -> (FittedComponent, CoarsePath) {
    let p = hopf_path(dim, years);
    (fit_single(vec![p.clone()], &component(pcr)).expect("fit"), p)
}
