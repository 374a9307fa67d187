//! Synthetic district heating network with thermal storage, plus the
//! excitation signals and demand scenarios used to exercise it.

mod model;
mod scenario;
mod signals;

pub use model::{PlantModel, PlantParams, StepReport, CP_WATER};
pub use scenario::{
    collect_dataset, collect_regime, generate_scenario, ExcitationConfig, Scenario, ScenarioConfig,
    RETURN_UPPER, SUPPLY_UPPER,
};
pub use signals::{derive_seed, generate_load_profile, generate_mprbs, MprbsConfig, Regime};
