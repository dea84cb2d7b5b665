//! Synthetic data, Monte Carlo validation and the overlap-resampling sweep.

mod dgp;
mod mc;
mod sweep;

pub use dgp::{
    analytic_att, generate_pooled, generate_with_seed, oracle_att, Assignment, DgpSpec, Nonlinearity, SimulatedSample,
};
pub use mc::{run_mc, simulation_nuisances, McConfig, McReport, McResult, NuisanceSource};
pub use sweep::{
    beta_resample, resample_probabilities, sweep_beta, ResampleConfig, SweepConfig, SweepReport, SweepRow,
};
