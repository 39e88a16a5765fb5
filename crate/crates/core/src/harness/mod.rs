//! Run configuration, the training driver, metrics, the mask-divergence
//! probe and the sweep and evaluation-mode studies.

mod config;
mod metrics;
mod probe;
mod run;
mod study;

pub use config::{ArchKind, EvalMode, Preset, RunConfig};
pub use metrics::{final_third_return, read_jsonl, MetricsRecord, MetricsWriter};
pub use probe::{divergence_probe, render_probe, ProbeNet, ProbeRow, PROBE_ACTIONS, PROBE_GRID, PROBE_OBS_DIM};
pub use run::{
    build_nets, default_run_dir, load_checkpoint, metrics_dir, run_experiment, save_checkpoint, RunOutcome,
    METRICS_DIR_ENV,
};
pub use study::{eval_mode_study, render_table, run_sweep, sweep_table, EvalModeRow, RunResult, SweepCell, SweepGrid};
