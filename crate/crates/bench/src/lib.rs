//! Shared fixtures for the criterion benches.

use qpair::bhpe::BhpeConfig;
use qpair::harness::default_config;
use qpair::source::Campaign;
use qpair::{Basis, PhysicalModel};

pub fn reference_model() -> PhysicalModel {
    default_config().model().expect("default physics is valid")
}

pub fn reference_bhpe(states: u64) -> BhpeConfig {
    default_config()
        .bhpe_config(states, 1)
        .expect("default config is valid")
}

/// The first Jxy-stage z-basis campaign at the default `τ₁₁`.
pub fn reference_campaign(states: u64) -> Campaign {
    let cfg = default_config();
    Campaign {
        label: "bench_zz".into(),
        tau: cfg.tau11(),
        ensemble: cfg.ensembles.jxy_step1,
        basis: Basis::ZZ,
        states,
        preps: 1,
    }
}
