use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use speechleak::dsp::CmvnStats;
use speechleak::harness::{
    self, build_manifest, dataset_root, format_summary, load_wav, read_grid, read_report_csv,
    reconstruct_waveform, run_experiment, run_selftest, simulate_client, summarize, write_grid,
    write_summary_csv, write_wav, ExperimentConfig,
};
use speechleak::recon::StatsMode;
use speechleak::{
    extract_features, init_params, invert_features, metrics, FeatureKind, FrontendConfig, Label,
};

#[derive(Parser, Debug)]
#[command(name = "speechleak", version, about = "Gradient-inversion attack on a keyword-spotting CNN")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Attack one utterance and write its loss trace.
    Attack(AttackArgs),
    /// Run a batch experiment over a Speech Commands style directory.
    Experiment(ExperimentArgs),
    /// Reconstruct a waveform from a feature-grid file.
    InvertFeatures(InvertArgs),
    /// Aggregate report CSVs into a summary table.
    Report(ReportArgs),
    /// Run the finite-difference and DSP oracle suite.
    Selftest(SelftestArgs),
}

/// Settings shared by `attack` and `experiment`; each flag overrides the
/// corresponding key of `--config`.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    trials: Option<usize>,
    /// mel, mel_power, mfcc, both, or a comma-separated list.
    #[arg(long)]
    feature: Option<String>,
    /// oracle, dataset or identity.
    #[arg(long)]
    stats_mode: Option<String>,
    #[arg(long)]
    init_scale: Option<f64>,
    #[arg(long)]
    gl_iters: Option<usize>,
    /// Worker threads (0 = available parallelism).
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Extra `key=value` settings, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Overrides {
    fn into_config(self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                ExperimentConfig::from_kv_str(&text)?
            }
            None => ExperimentConfig::default(),
        };
        let flags: [(&str, Option<String>); 11] = [
            ("seed", self.seed.map(|v| v.to_string())),
            ("iterations", self.iterations.map(|v| v.to_string())),
            ("lambda", self.lambda.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("trials", self.trials.map(|v| v.to_string())),
            ("feature", self.feature),
            ("stats_mode", self.stats_mode),
            ("init_scale", self.init_scale.map(|v| v.to_string())),
            ("gl_iters", self.gl_iters.map(|v| v.to_string())),
            ("jobs", self.jobs.map(|v| v.to_string())),
            ("out", self.out.map(|p| p.display().to_string())),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got {kv:?}"))?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct AttackArgs {
    /// Utterance to attack; defaults to the bundled synthetic sample of `--word`.
    #[arg(long)]
    input: Option<PathBuf>,
    /// True label; inferred from the parent directory name when omitted.
    #[arg(long)]
    word: Option<String>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
struct ExperimentArgs {
    /// Dataset root (<root>/<word>/*.wav); the SPEECHLEAK_DATA variable wins.
    #[arg(long)]
    data_root: Option<PathBuf>,
    /// Generate and use the ten-utterance synthetic corpus.
    #[arg(long, conflicts_with = "data_root")]
    synthetic: bool,
    /// Number of samples.
    #[arg(long)]
    n: Option<usize>,
    /// Skip the ground-truth-feature comparison rows.
    #[arg(long)]
    no_baseline: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args, Debug)]
struct InvertArgs {
    /// Feature grid written by `attack` or `experiment`.
    grid: PathBuf,
    /// Output WAV.
    #[arg(long, default_value = "reconstructed.wav")]
    out: PathBuf,
    /// How to undo MFCC normalization: oracle, dataset or identity.
    #[arg(long, default_value = "identity")]
    stats_mode: StatsMode,
    /// Original utterance, for oracle statistics.
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Directory of WAVs whose averaged statistics serve the dataset mode.
    #[arg(long)]
    reference_root: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// One or more report CSVs.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    /// Also write the summary as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SelftestArgs {
    /// Smaller finite-difference samples.
    #[arg(long)]
    quick: bool,
}

fn attack(args: AttackArgs) -> Result<()> {
    let cfg = args.overrides.into_config()?;
    cfg.validate()?;
    let out = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("speechleak-attack"));
    fs::create_dir_all(&out)?;

    let word = match (&args.word, &args.input) {
        (Some(w), _) => w.clone(),
        (None, Some(p)) => p
            .parent()
            .and_then(Path::file_name)
            .map(|s| s.to_string_lossy().into_owned())
            .ok_or_else(|| anyhow!("cannot infer the label of {}; pass --word", p.display()))?,
        (None, None) => "yes".to_string(),
    };
    let label = Label::from_word(&word).ok_or_else(|| anyhow!("{word:?} is not one of the ten keywords"))?;
    let wave = match &args.input {
        Some(p) => load_wav(p)?,
        None => harness::synth::synthetic_utterance(label),
    };
    let kind = *cfg.features.first().expect("validated non-empty");

    let params = init_params(cfg.model_seed);
    let target = simulate_client(&params, &wave, label, kind, &cfg.frontend)?;
    let start = Instant::now();
    let result = invert_features(&target, &params, kind, &cfg.attack)?;
    let secs = start.elapsed().as_secs_f64();

    let mut trace = csv::Writer::from_path(out.join("trace.csv"))?;
    trace.write_record(["iteration", "objective"])?;
    for (i, v) in result.trace.iter().enumerate() {
        trace.write_record([(i + 1).to_string(), format!("{v:e}")])?;
    }
    trace.flush()?;

    let fe = FrontendConfig {
        feature_kind: kind,
        ..cfg.frontend.clone()
    };
    let (truth, own) = extract_features(&wave, &fe)?;
    let stats = match cfg.stats_mode {
        StatsMode::Oracle => own,
        // A single utterance has no reference set to average over.
        StatsMode::DatasetAverage | StatsMode::Identity => None,
    };
    let mode = if cfg.stats_mode == StatsMode::Oracle {
        StatsMode::Oracle
    } else {
        StatsMode::Identity
    };
    let recon = reconstruct_waveform(&result.grid, &cfg.frontend, &cfg.griffin_lim, mode, stats.as_ref())?;
    write_grid(BufWriter::new(File::create(out.join("recovered.slkg"))?), &result.grid)?;
    fs::write(out.join("recovered.txt"), harness::grid_to_text(&result.grid))?;
    write_wav(out.join("original.wav"), &wave)?;
    write_wav(out.join("reconstructed.wav"), &recon)?;
    fs::write(out.join("config.txt"), cfg.to_kv_string())?;

    println!("label      restored {} (true {})", result.label.word(), label.word());
    println!("objective  {:.6e} after {} iterations, trial {}", result.final_objective, result.trace.len(), result.trial);
    println!("f_mse      {:.6e}", metrics::mse_feature(&result.grid, &truth)?);
    println!("w_mse      {:.6e}", metrics::mse_waveform(&wave, &recon)?);
    match metrics::stoi(&wave, &recon) {
        Ok(s) => println!("stoi       {s:.4}"),
        Err(e) => println!("stoi       n/a ({e})"),
    }
    println!("seconds    {secs:.1}");
    println!("outputs    {}", out.display());
    Ok(())
}

fn experiment(args: ExperimentArgs) -> Result<()> {
    let mut cfg = args.overrides.into_config()?;
    if let Some(n) = args.n {
        cfg.set("n", &n.to_string())?;
    }
    if args.no_baseline {
        cfg.baseline = false;
    }
    let out = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("speechleak-out"));
    cfg.out_dir = Some(out.clone());
    let root = if args.synthetic {
        let corpus = out.join("corpus");
        harness::synth::write_synthetic_corpus(&corpus)?;
        corpus
    } else {
        dataset_root(args.data_root.as_deref().or(cfg.data_root.as_deref())).ok_or_else(|| {
            anyhow!(
                "no dataset root: pass --data-root, set {}, or use --synthetic",
                harness::DATA_ROOT_ENV
            )
        })?
    };
    cfg.data_root = Some(root.clone());
    cfg.validate()?;
    let manifest = build_manifest(&root, cfg.manifest_seed, cfg.n_samples)?;
    eprintln!("running {} samples from {}", manifest.len(), root.display());
    let outcome = run_experiment(&manifest, &cfg)?;
    print!("{}", format_summary(&outcome.summary));
    let failed = outcome.rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        eprintln!("{failed} row(s) failed; see the error column of report.csv");
    }
    println!("outputs in {}", out.display());
    Ok(())
}

fn wav_paths(root: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(root)? {
        let path = entry?.path();
        if path.is_dir() {
            wav_paths(&path, out)?;
        } else if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
            out.push(path);
        }
    }
    Ok(())
}

fn invert(args: InvertArgs) -> Result<()> {
    let grid = read_grid(File::open(&args.grid).with_context(|| format!("opening {}", args.grid.display()))?)?;
    let frontend = FrontendConfig::with_kind(FeatureKind::MfccCmvn);
    let stats: Option<CmvnStats> = match (grid.kind(), args.stats_mode) {
        (FeatureKind::MfccCmvn, StatsMode::Oracle) => {
            let reference = args
                .reference
                .as_ref()
                .ok_or_else(|| anyhow!("oracle statistics need --reference <wav>"))?;
            extract_features(&load_wav(reference)?, &frontend)?.1
        }
        (FeatureKind::MfccCmvn, StatsMode::DatasetAverage) => {
            let root = args
                .reference_root
                .as_ref()
                .ok_or_else(|| anyhow!("dataset statistics need --reference-root <dir>"))?;
            let mut paths = Vec::new();
            wav_paths(root, &mut paths)?;
            paths.sort();
            let all = paths
                .iter()
                .map(|p| Ok(extract_features(&load_wav(p)?, &frontend)?.1.expect("mfcc has stats")))
                .collect::<Result<Vec<_>>>()?;
            Some(CmvnStats::average(&all).ok_or_else(|| anyhow!("no WAV files under {}", root.display()))?)
        }
        _ => None,
    };
    let defaults = FrontendConfig::default();
    let glc = speechleak::GriffinLimConfig::from_frontend(&defaults);
    let wave = reconstruct_waveform(&grid, &defaults, &glc, args.stats_mode, stats.as_ref())?;
    write_wav(&args.out, &wave)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let mut rows = Vec::new();
    for path in &args.reports {
        rows.extend(read_report_csv(path).with_context(|| format!("reading {}", path.display()))?);
    }
    if rows.is_empty() {
        bail!("no report rows");
    }
    let summary = summarize(&rows);
    print!("{}", format_summary(&summary));
    if let Some(out) = &args.out {
        write_summary_csv(out, &summary)?;
    }
    Ok(())
}

fn selftest(args: SelftestArgs) -> Result<()> {
    let checks = run_selftest(args.quick);
    let mut stdout = std::io::stdout().lock();
    for c in &checks {
        writeln!(
            stdout,
            "{} {:<48} {:>4}/{:<4} {}",
            if c.ok() { "PASS" } else { "FAIL" },
            c.name,
            c.passed,
            c.total,
            c.detail
        )?;
    }
    let failed = checks.iter().filter(|c| !c.ok()).count();
    writeln!(stdout, "{} of {} checks passed", checks.len() - failed, checks.len())?;
    if failed > 0 {
        bail!("{failed} selftest check(s) failed");
    }
    Ok(())
}

/// One line, `error[<tag>]: <message>`, so scripts can match on the tag.
fn error_line(err: &anyhow::Error) -> String {
    let tag = err
        .chain()
        .find_map(|e| {
            e.downcast_ref::<speechleak::Error>()
                .map(speechleak::Error::tag)
                .or_else(|| e.downcast_ref::<std::io::Error>().map(|_| "io"))
        })
        .unwrap_or("cli");
    let message = format!("{err:#}").replace('\n', " ");
    format!("error[{tag}]: {message}")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let outcome = match cli.command {
        Command::Attack(a) => attack(a),
        Command::Experiment(a) => experiment(a),
        Command::InvertFeatures(a) => invert(a),
        Command::Report(a) => report(a),
        Command::Selftest(a) => selftest(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
