//! Numerical laboratory for determinantal Coulomb-gas ensembles on the
//! complex plane.  (Module set under construction.)

pub mod basis;
pub mod ensemble;
pub mod envelope;
pub mod equilibrium;
pub mod error;
pub mod ldp;
pub mod rate;
pub mod weights;

pub use basis::{orthonormalize, SectionBasis};
pub use ensemble::{
    empirical, hamiltonian, ln_factorial, log_joint_density, partition_function_exact,
    read_sample_dump, sample_exact, sample_mcmc, write_sample_dump, Configuration,
    EmpiricalMeasure, EnsembleSpec, ExactSampler, McmcOutcome, SampleDumpHeader,
};
pub use envelope::{
    envelope_monotone_check, energy_radial, envelope_radial, radial_curvature,
    radial_curvature_interior, radial_pairing, MonotoneReport, RadialMeasure, RadialProfile,
    LAB_T_NODES, LAB_T_SPAN,
};
pub use equilibrium::{
    dirichlet_form, energy_field, equilibrium_qp, equilibrium_qp_capped, field_curvature,
    green_kernel, log_kernel, ma_radial, potential_of_measure, potential_on_grid, weighted_energy,
    GridMeasure, PotentialField, QpReport,
};
pub use error::{LabError, Result};
pub use ldp::{
    deviation_csv, deviation_probability, equilibrium_measure, fekete_ascent, free_energy_csv,
    free_energy_curve, localization_mass, rate_fit, rate_prediction, wilson_interval,
    DeviationExperiment, DeviationRow, DeviationSide, FeketeOutcome, FreeEnergyCurve,
    FreeEnergyRow, RateFit, RatePrediction, SamplerKind, TestFunction,
};
pub use rate::{
    entropy_dirichlet, entropy_green, entropy_legendre, envelope_energy, radial_green_weight,
    radialize, rate_functional, EnergyReport, EntropyRoute, ENTROPY_CUTOFF,
};
pub use weights::{GrowthClass, MeasureGrid, Reference, Region, WeightSpec};

/// Number of particles paired with scaling degree `k`: the dimension of
/// the degree-`k` polynomial space on the line, `k + 1`.
pub fn particle_count(k: u32) -> usize {
    k as usize + 1
}

/// Reads the thread-count override from `LOGGAS_THREADS`, if set.
///
/// Returns `None` when the variable is absent or unparsable; callers fall
/// back to the rayon default in that case.
pub fn thread_override() -> Option<usize> {
    std::env::var("LOGGAS_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn particle_count_is_dimension_of_degree_k_space() {
        assert_eq!(particle_count(0), 1);
        assert_eq!(particle_count(16), 17);
        assert_eq!(particle_count(64), 65);
    }
}
