//! Experiment harness around [`protofed_core`]: config files, dataset
//! loading, metrics emission, baseline modes and the verification suite.

pub mod accept;
pub mod config_file;
pub mod emit;
pub mod idx;

use std::path::Path;

use protofed_core::data::{gen_blobs, LabeledPool};
use protofed_core::fed::{run_experiment_on, AggMode, DatasetSpec};
use protofed_core::metrics::MetricsLog;

pub use config_file::{apply_override, finalize, parse_config_text, HarnessConfig, IdxPaths};
pub use protofed_core as core;

/// Resolve the sample pool named by the configuration.
pub fn resolve_pool(cfg: &HarnessConfig) -> Result<LabeledPool, String> {
    match &cfg.core.dataset {
        DatasetSpec::Blobs(spec) => Ok(gen_blobs(spec)),
        DatasetSpec::External => {
            let idx = cfg
                .idx
                .as_ref()
                .ok_or("dataset.kind = idx requires dataset.images and dataset.labels")?;
            idx::load_idx(&idx.images, &idx.labels, idx.max_n).map_err(|e| e.to_string())
        }
    }
}

/// Run one experiment under the given aggregation mode (the configured mode
/// for `None`).
pub fn baseline_run(cfg: &HarnessConfig, mode: Option<AggMode>) -> Result<MetricsLog, String> {
    let pool = resolve_pool(cfg)?;
    let mut core_cfg = cfg.core.clone();
    if let Some(mode) = mode {
        core_cfg.agg_mode = mode;
    }
    run_experiment_on(&core_cfg, &pool).map_err(|e| e.to_string())
}

/// Run the configured experiment and write all output files.
pub fn run_to_dir(cfg: &HarnessConfig, out_dir: &Path) -> Result<MetricsLog, String> {
    let log = baseline_run(cfg, None)?;
    emit::emit_metrics(&log, out_dir).map_err(|e| e.to_string())?;
    Ok(log)
}
