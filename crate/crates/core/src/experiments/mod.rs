//! Configuration, the behavior-policy robustness study, the α sweep,
//! N-revision evaluation, CSV output and the `srpo` command line.

mod cli;
pub mod config;
pub mod report;
pub mod revision;
pub mod runs;

pub use cli::cli_main;
pub use config::{ExperimentConfig, Method, MuSpec, RhoSpec};
pub use report::{emit_csv, AlphaRow, EvalReport, RunRecord};
pub use revision::{
    eval_revision_curve, eval_revision_curve_from, eval_revision_curve_marginal, kernel_power_row, revise,
    revise_with_rng, revision_distributions,
};
pub use runs::{run_alpha_sweep, run_fig2};
