//! Fixtures shared by the benchmarks.

use revhmc_core::harness::config::{DiffusionSpec, ModelSpec, PotentialSpec};
use revhmc_core::harness::{ExperimentConfig, ExperimentKind};
use revhmc_core::model::RmhmcHamiltonian;

/// The double-well model with the cosine-squared diffusion.
pub fn double_well() -> (ExperimentConfig, RmhmcHamiltonian) {
    let cfg = ExperimentConfig::preset(ExperimentKind::DoublewellHistogram);
    let model = cfg.model.build().expect("preset model");
    (cfg, model)
}

/// The stiff circle potential with the isotropic or anisotropic field.
pub fn circle(anisotropic: bool) -> (ExperimentConfig, RmhmcHamiltonian) {
    let cfg = ExperimentConfig::preset(ExperimentKind::CircleTv);
    let diffusion = if anisotropic {
        DiffusionSpec::Anisotropic { dim: 2, eps: 0.1 }
    } else {
        DiffusionSpec::Isotropic { dim: 2, eps: 0.1 }
    };
    let model = ModelSpec { potential: PotentialSpec::Circle { stiffness: 100.0 }, diffusion }.build().expect("preset model");
    (cfg, model)
}
