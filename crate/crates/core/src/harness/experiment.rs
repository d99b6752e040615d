//! Batch experiments: client simulation, attack, reconstruction, scoring,
//! report and artifact export.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::gridio::write_grid;
use super::manifest::{DatasetManifest, ManifestEntry};
use super::wav::{load_wav, write_wav};
use crate::dsp::{extract_features, CmvnStats, FeatureGrid, FeatureKind, FrontendConfig, Waveform};
use crate::error::{Error, Result};
use crate::grad::{param_gradients, GradientSet};
use crate::inversion::{invert_features, AttackConfig, AttackResult};
use crate::metrics::{mse_feature, mse_waveform, stoi, ReconstructionReport};
use crate::model::{init_params, Label, ModelParams};
use crate::recon::{mel_to_waveform, mfcc_to_waveform, GriffinLimConfig, StatsMode};

/// Where the reconstructed features come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pathway {
    /// Ground-truth features (waveform reconstruction only).
    Features,
    /// Features recovered from the shared gradient.
    Gradient,
}

impl Pathway {
    pub fn name(self) -> &'static str {
        match self {
            Pathway::Features => "features",
            Pathway::Gradient => "gradient",
        }
    }
}

impl fmt::Display for Pathway {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Pathway {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "features" => Ok(Pathway::Features),
            "gradient" => Ok(Pathway::Gradient),
            other => Err(Error::Config(format!("unknown pathway {other:?}"))),
        }
    }
}

/// The client's local step: extract features and differentiate the loss
/// with respect to every parameter. Only the gradient leaves this function.
pub fn simulate_client(
    params: &ModelParams,
    wave: &Waveform,
    label: Label,
    kind: FeatureKind,
    cfg: &FrontendConfig,
) -> Result<GradientSet> {
    let fe = FrontendConfig {
        feature_kind: kind,
        ..cfg.clone()
    };
    let (features, _) = extract_features(wave, &fe)?;
    param_gradients(params, &features, label)
}

/// The attacker's view: the serialized gradient and the public model.
pub fn attack_shared_gradient(
    shared: &[u8],
    params: &ModelParams,
    kind: FeatureKind,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    let target = GradientSet::read_from(shared)?;
    invert_features(&target, params, kind, cfg)
}

/// Waveform from a feature grid of any kind. `stats` is consulted only for
/// MFCC grids under [`StatsMode::Oracle`] or [`StatsMode::DatasetAverage`].
pub fn reconstruct_waveform(
    grid: &FeatureGrid,
    frontend: &FrontendConfig,
    glc: &GriffinLimConfig,
    mode: StatsMode,
    stats: Option<&CmvnStats>,
) -> Result<Waveform> {
    let fe = FrontendConfig {
        feature_kind: grid.kind(),
        ..frontend.clone()
    };
    let fb = fe.filterbank()?;
    match grid.kind() {
        FeatureKind::MelDb | FeatureKind::MelPower => mel_to_waveform(grid, &fb, glc),
        FeatureKind::MfccCmvn => mfcc_to_waveform(grid, mode, stats, &fb, glc),
    }
}

/// One report line. Metric columns are empty when they do not apply (the
/// features pathway has no attack loss or label) or when the row failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub sample_id: String,
    pub word: String,
    pub feature_kind: FeatureKind,
    pub pathway: Pathway,
    pub f_mse: Option<f64>,
    pub w_mse: Option<f64>,
    pub stoi: Option<f64>,
    pub final_loss: Option<f64>,
    pub label_ok: Option<bool>,
    pub seconds: f64,
    pub error: Option<String>,
}

impl ReportRow {
    pub fn from_report(report: &ReconstructionReport, pathway: Pathway) -> Self {
        Self {
            sample_id: report.sample_id.clone(),
            word: report.true_label.word().to_string(),
            feature_kind: report.feature_kind,
            pathway,
            f_mse: Some(report.f_mse),
            w_mse: Some(report.w_mse),
            stoi: Some(report.stoi),
            final_loss: report.final_objective,
            label_ok: report.restored_label.map(|l| l == report.true_label),
            seconds: report.seconds,
            error: None,
        }
    }

    fn failed(entry: &ManifestEntry, kind: FeatureKind, pathway: Pathway, err: &Error, seconds: f64) -> Self {
        Self {
            sample_id: entry.sample_id(),
            word: entry.label.word().to_string(),
            feature_kind: kind,
            pathway,
            f_mse: None,
            w_mse: None,
            stoi: None,
            final_loss: None,
            label_ok: None,
            seconds,
            error: Some(format!("{}: {err}", err.tag())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub feature_kind: FeatureKind,
    pub pathway: Pathway,
    pub n: usize,
    pub failed: usize,
    pub f_mse_mean: f64,
    pub f_mse_std: f64,
    pub w_mse_mean: f64,
    pub w_mse_std: f64,
    pub stoi_mean: f64,
    pub stoi_std: f64,
    /// Fraction of restored labels that were correct; empty for the
    /// features pathway.
    pub label_acc: Option<f64>,
}

/// Mean and population standard deviation; NaN for an empty slice.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Groups rows by (feature kind, pathway) in order of first appearance.
pub fn summarize(rows: &[ReportRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(FeatureKind, Pathway)> = Vec::new();
    for r in rows {
        if !keys.contains(&(r.feature_kind, r.pathway)) {
            keys.push((r.feature_kind, r.pathway));
        }
    }
    keys.into_iter()
        .map(|(kind, pathway)| {
            let group: Vec<&ReportRow> = rows
                .iter()
                .filter(|r| r.feature_kind == kind && r.pathway == pathway)
                .collect();
            let ok: Vec<&&ReportRow> = group.iter().filter(|r| r.error.is_none()).collect();
            let col = |f: fn(&ReportRow) -> Option<f64>| {
                mean_std(&ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
            };
            let (f_mse_mean, f_mse_std) = col(|r| r.f_mse);
            let (w_mse_mean, w_mse_std) = col(|r| r.w_mse);
            let (stoi_mean, stoi_std) = col(|r| r.stoi);
            let labels: Vec<bool> = ok.iter().filter_map(|r| r.label_ok).collect();
            let label_acc = (!labels.is_empty())
                .then(|| labels.iter().filter(|&&b| b).count() as f64 / labels.len() as f64);
            SummaryRow {
                feature_kind: kind,
                pathway,
                n: ok.len(),
                failed: group.len() - ok.len(),
                f_mse_mean,
                f_mse_std,
                w_mse_mean,
                w_mse_std,
                stoi_mean,
                stoi_std,
                label_acc,
            }
        })
        .collect()
}

/// Fixed-width text table of a summary, one line per group.
pub fn format_summary(summary: &[SummaryRow]) -> String {
    let mut out = format!(
        "{:<10} {:<9} {:>4} {:>5}  {:>23}  {:>23}  {:>17}  {:>6}\n",
        "feature", "pathway", "n", "fail", "F-MSE", "W-MSE", "STOI", "label"
    );
    for s in summary {
        let label = s
            .label_acc
            .map(|a| format!("{:.3}", a))
            .unwrap_or_else(|| "-".into());
        out.push_str(&format!(
            "{:<10} {:<9} {:>4} {:>5}  {:>10.4e} ± {:>10.4e}  {:>10.4e} ± {:>10.4e}  {:>7.4} ± {:>7.4}  {:>6}\n",
            s.feature_kind.name(),
            s.pathway.name(),
            s.n,
            s.failed,
            s.f_mse_mean,
            s.f_mse_std,
            s.w_mse_mean,
            s.w_mse_std,
            s.stoi_mean,
            s.stoi_std,
            label
        ));
    }
    out
}

pub fn write_report_csv(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_summary_csv(path: &Path, summary: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in summary {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

/// One exported reconstruction, paths relative to the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportRow {
    pub sample_id: String,
    pub feature_kind: FeatureKind,
    pub pathway: Pathway,
    pub original_wav: PathBuf,
    pub reconstructed_wav: PathBuf,
    pub grid: PathBuf,
}

/// Rows, summary and export list of a finished experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutcome {
    pub rows: Vec<ReportRow>,
    pub summary: Vec<SummaryRow>,
    pub exports: Vec<ExportRow>,
}

/// Per-sample artifacts held until the collector writes them.
struct Artifact {
    export: ExportRow,
    wave: Waveform,
    grid: FeatureGrid,
}

struct SampleOutput {
    rows: Vec<ReportRow>,
    original: Option<(PathBuf, Waveform)>,
    artifacts: Vec<Artifact>,
}

struct Shared<'a> {
    cfg: &'a ExperimentConfig,
    params: ModelParams,
    /// Leave-one-out dataset-average CMVN statistics, per sample.
    loo_stats: Vec<Option<CmvnStats>>,
}

fn file_stem(sample_id: &str, kind: FeatureKind, pathway: Pathway) -> String {
    format!("{sample_id}_{}_{}", kind.name(), pathway.name())
}

/// Statistics used to undo MFCC normalization on the gradient pathway.
fn gradient_stats(mode: StatsMode, own: Option<&CmvnStats>, loo: Option<&CmvnStats>) -> Option<CmvnStats> {
    match mode {
        StatsMode::Oracle => own.cloned(),
        StatsMode::DatasetAverage => loo.cloned(),
        StatsMode::Identity => None,
    }
}

fn run_pathway(
    shared: &Shared<'_>,
    entry: &ManifestEntry,
    index: usize,
    wave: &Waveform,
    kind: FeatureKind,
    pathway: Pathway,
) -> Result<(ReconstructionReport, FeatureGrid, Waveform)> {
    let cfg = shared.cfg;
    let start = Instant::now();
    let fe = FrontendConfig {
        feature_kind: kind,
        ..cfg.frontend.clone()
    };
    let (truth, own_stats) = extract_features(wave, &fe)?;
    let (grid, mode, stats, final_objective, restored_label) = match pathway {
        Pathway::Features => (truth.clone(), StatsMode::Oracle, own_stats.clone(), None, None),
        Pathway::Gradient => {
            let target = simulate_client(&shared.params, wave, entry.label, kind, &cfg.frontend)?;
            let mut bytes = Vec::new();
            target.write_to(&mut bytes)?;
            drop(target);
            let attack = AttackConfig {
                seed: cfg.attack.seed.wrapping_add(1000 * index as u64),
                ..cfg.attack.clone()
            };
            let result = attack_shared_gradient(&bytes, &shared.params, kind, &attack)?;
            let mut mode = cfg.stats_mode;
            let loo = shared.loo_stats[index].as_ref();
            if mode == StatsMode::DatasetAverage && loo.is_none() {
                log::warn!("{}: no other samples to average statistics over; using identity", entry.sample_id());
                mode = StatsMode::Identity;
            }
            let stats = gradient_stats(mode, own_stats.as_ref(), loo);
            (result.grid, mode, stats, Some(result.final_objective), Some(result.label))
        }
    };
    let recon = reconstruct_waveform(&grid, &cfg.frontend, &cfg.griffin_lim, mode, stats.as_ref())?;
    let report = ReconstructionReport {
        sample_id: entry.sample_id(),
        feature_kind: kind,
        f_mse: mse_feature(&grid, &truth)?,
        w_mse: mse_waveform(wave, &recon)?,
        stoi: stoi(wave, &recon)?,
        final_objective,
        restored_label,
        true_label: entry.label,
        seconds: start.elapsed().as_secs_f64(),
    };
    Ok((report, grid, recon))
}

fn run_sample(shared: &Shared<'_>, entry: &ManifestEntry, index: usize) -> SampleOutput {
    let cfg = shared.cfg;
    let sample_id = entry.sample_id();
    let original_rel = PathBuf::from("wav").join(format!("{sample_id}_original.wav"));
    let mut pathways = Vec::new();
    for &kind in &cfg.features {
        if cfg.baseline {
            pathways.push((kind, Pathway::Features));
        }
        pathways.push((kind, Pathway::Gradient));
    }

    let wave = match load_wav(&entry.path) {
        Ok(w) => w,
        Err(e) => {
            let rows = pathways
                .iter()
                .map(|&(k, p)| ReportRow::failed(entry, k, p, &e, 0.0))
                .collect();
            return SampleOutput {
                rows,
                original: None,
                artifacts: Vec::new(),
            };
        }
    };

    let mut rows = Vec::new();
    let mut artifacts = Vec::new();
    for (kind, pathway) in pathways {
        let start = Instant::now();
        match run_pathway(shared, entry, index, &wave, kind, pathway) {
            Ok((report, grid, recon)) => {
                log::info!(
                    "{sample_id} {kind} {pathway}: stoi {:.4} f_mse {:.3e} ({:.1}s)",
                    report.stoi,
                    report.f_mse,
                    report.seconds
                );
                rows.push(ReportRow::from_report(&report, pathway));
                let stem = file_stem(&sample_id, kind, pathway);
                artifacts.push(Artifact {
                    export: ExportRow {
                        sample_id: sample_id.clone(),
                        feature_kind: kind,
                        pathway,
                        original_wav: original_rel.clone(),
                        reconstructed_wav: PathBuf::from("wav").join(format!("{stem}.wav")),
                        grid: PathBuf::from("grids").join(format!("{stem}.slkg")),
                    },
                    wave: recon,
                    grid,
                });
            }
            Err(e) => {
                log::warn!("{sample_id} {kind} {pathway} failed: {e}");
                rows.push(ReportRow::failed(entry, kind, pathway, &e, start.elapsed().as_secs_f64()));
            }
        }
    }
    SampleOutput {
        rows,
        original: Some((original_rel, wave)),
        artifacts,
    }
}

/// Leave-one-out averages of per-utterance MFCC statistics: entry `i`
/// averages every other readable sample. `None` where nothing is left.
fn leave_one_out_stats(manifest: &DatasetManifest, frontend: &FrontendConfig) -> Vec<Option<CmvnStats>> {
    let fe = FrontendConfig {
        feature_kind: FeatureKind::MfccCmvn,
        ..frontend.clone()
    };
    let own: Vec<Option<CmvnStats>> = manifest
        .entries()
        .iter()
        .map(|e| {
            load_wav(&e.path)
                .and_then(|w| extract_features(&w, &fe))
                .ok()
                .and_then(|(_, s)| s)
        })
        .collect();
    (0..own.len())
        .map(|i| {
            CmvnStats::average(
                own.iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .filter_map(|(_, s)| s.as_ref()),
            )
        })
        .collect()
}

fn write_exports(dir: &Path, cfg: &ExperimentConfig, manifest: &DatasetManifest, outputs: &[SampleOutput], outcome: &ExperimentOutcome) -> Result<()> {
    fs::create_dir_all(dir.join("wav"))?;
    fs::create_dir_all(dir.join("grids"))?;
    fs::write(dir.join("config.txt"), cfg.to_kv_string())?;

    let mut m = csv::Writer::from_path(dir.join("manifest.csv"))?;
    m.write_record(["sample_id", "path", "word", "split"])?;
    for e in manifest.entries() {
        m.write_record([
            e.sample_id(),
            e.path.display().to_string(),
            e.label.word().to_string(),
            e.split.name().to_string(),
        ])?;
    }
    m.flush()?;

    for out in outputs {
        if let Some((rel, wave)) = &out.original {
            write_wav(dir.join(rel), wave)?;
        }
        for a in &out.artifacts {
            write_wav(dir.join(&a.export.reconstructed_wav), &a.wave)?;
            write_grid(BufWriter::new(File::create(dir.join(&a.export.grid))?), &a.grid)?;
        }
    }
    write_report_csv(&dir.join("report.csv"), &outcome.rows)?;
    write_summary_csv(&dir.join("summary.csv"), &outcome.summary)?;
    let mut e = csv::Writer::from_path(dir.join("exports.csv"))?;
    for x in &outcome.exports {
        e.serialize(x)?;
    }
    e.flush()?;
    let mut table = File::create(dir.join("summary.txt"))?;
    table.write_all(format_summary(&outcome.summary).as_bytes())?;
    Ok(())
}

/// Runs every manifest entry through the configured pathways.
///
/// Samples are processed on a pool of `cfg.jobs` workers; results are
/// collected in manifest order, so the report does not depend on
/// scheduling. Per-sample failures become rows with an `error` tag.
pub fn run_experiment(manifest: &DatasetManifest, cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let shared = Shared {
        cfg,
        params: init_params(cfg.model_seed),
        loo_stats: if cfg.features.contains(&FeatureKind::MfccCmvn)
            && cfg.stats_mode == StatsMode::DatasetAverage
        {
            leave_one_out_stats(manifest, &cfg.frontend)
        } else {
            vec![None; manifest.len()]
        },
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let outputs: Vec<SampleOutput> = pool.install(|| {
        use rayon::prelude::*;
        manifest
            .entries()
            .par_iter()
            .enumerate()
            .map(|(i, e)| run_sample(&shared, e, i))
            .collect()
    });

    let rows: Vec<ReportRow> = outputs.iter().flat_map(|o| o.rows.iter().cloned()).collect();
    let exports = outputs
        .iter()
        .flat_map(|o| o.artifacts.iter().map(|a| a.export.clone()))
        .collect();
    let outcome = ExperimentOutcome {
        summary: summarize(&rows),
        rows,
        exports,
    };
    if let Some(dir) = &cfg.out_dir {
        write_exports(dir, cfg, manifest, &outputs, &outcome)?;
    }
    Ok(outcome)
}
