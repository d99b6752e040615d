//! Dataset ingestion, client simulation, batch experiments and artifact
//! export.

mod config;
mod experiment;
mod gridio;
mod manifest;
mod selftest;
pub mod synth;
mod wav;

pub use config::{parse_feature_list, ExperimentConfig};
pub use experiment::{
    attack_shared_gradient, format_summary, mean_std, read_report_csv, reconstruct_waveform,
    run_experiment, simulate_client, summarize, write_report_csv, write_summary_csv, ExperimentOutcome,
    ExportRow, Pathway, ReportRow, SummaryRow,
};
pub use gridio::{grid_from_text, grid_to_text, read_grid, write_grid};
pub use selftest::{run_selftest, Check};
pub use manifest::{build_manifest, dataset_root, DatasetManifest, ManifestEntry, Split, DATA_ROOT_ENV};
pub use wav::{load_wav, write_wav, PCM16_SCALE};
