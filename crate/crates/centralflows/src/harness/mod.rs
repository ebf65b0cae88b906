//! Experiment orchestration: TOML configs, side-by-side discrete and flow
//! runs, CSV/JSON output, parameter sweeps and the `check` suite.

mod check;
mod config;
mod record;
mod run;
mod sweep;

pub use check::{canonical_configs, invariant_checks, random_sdcp, run_check, CheckOutcome, CheckReport};
pub use config::{
    set_dotted, ExperimentConfig, FlowKind, MethodConfig, ObjectiveConfig, ObjectiveKind, OutputConfig, QuadraticSpec,
    RunConfig,
};
pub use record::{read_csv, write_csv, TrajectoryRecord, COLUMNS, SCHEMA_VERSION};
pub use run::{run_experiment, warm_start, Constants, Experiment, Metadata, SubstepStats};
pub use sweep::{expand, run_sweep, Variation};
