//! Experiment configuration and its `key = value` file format.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dsp::{FeatureKind, FrontendConfig};
use crate::error::{Error, Result};
use crate::inversion::AttackConfig;
use crate::recon::{GriffinLimConfig, PhaseInit, StatsMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Feature kinds to run, in report order.
    pub features: Vec<FeatureKind>,
    /// Front-end settings; `feature_kind` is overridden per run.
    pub frontend: FrontendConfig,
    pub attack: AttackConfig,
    /// STFT geometry and de-emphasis follow `frontend`.
    pub griffin_lim: GriffinLimConfig,
    pub model_seed: u64,
    pub manifest_seed: u64,
    pub n_samples: usize,
    pub out_dir: Option<PathBuf>,
    /// How the gradient pathway undoes MFCC normalization. The
    /// features-only baseline always uses the utterance's own statistics.
    pub stats_mode: StatsMode,
    /// Worker threads; 0 means available parallelism.
    pub jobs: usize,
    pub data_root: Option<PathBuf>,
    /// Also reconstruct from ground-truth features for comparison rows.
    pub baseline: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let frontend = FrontendConfig::default();
        Self {
            features: vec![FeatureKind::MelDb],
            griffin_lim: GriffinLimConfig::from_frontend(&frontend),
            frontend,
            attack: AttackConfig::default(),
            model_seed: 0,
            manifest_seed: 0,
            n_samples: 10,
            out_dir: None,
            stats_mode: StatsMode::DatasetAverage,
            jobs: 0,
            data_root: None,
            baseline: true,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean {value:?} for `{key}`"))),
    }
}

/// `mel`, `mfcc`, `mel_power`, `both` (= mel + mfcc) or a comma list.
pub fn parse_feature_list(value: &str) -> Result<Vec<FeatureKind>> {
    let mut kinds = Vec::new();
    for part in value.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let add: Vec<FeatureKind> = if part.eq_ignore_ascii_case("both") {
            vec![FeatureKind::MelDb, FeatureKind::MfccCmvn]
        } else {
            vec![part.parse()?]
        };
        for k in add {
            if !kinds.contains(&k) {
                kinds.push(k);
            }
        }
    }
    if kinds.is_empty() {
        return Err(Error::Config("empty feature list".into()));
    }
    Ok(kinds)
}

fn parse_phase(value: &str) -> Result<PhaseInit> {
    match value.split_once(':') {
        None if value == "zeros" => Ok(PhaseInit::Zeros),
        Some(("random", seed)) => Ok(PhaseInit::Random(parse("gl_phase", seed)?)),
        _ => Err(Error::Config(format!(
            "bad phase init {value:?} (expected zeros or random:<seed>)"
        ))),
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Config("sample count must be at least 1".into()));
        }
        if self.features.is_empty() {
            return Err(Error::Config("no feature kind selected".into()));
        }
        self.frontend.validate()?;
        self.attack.validate()?;
        self.griffin_lim.validate()
    }

    fn sync_griffin_lim(&mut self) {
        let derived = GriffinLimConfig::from_frontend(&self.frontend);
        self.griffin_lim = GriffinLimConfig {
            n_iter: self.griffin_lim.n_iter,
            phase_init: self.griffin_lim.phase_init,
            ..derived
        };
    }

    /// Applies one setting. `seed` sets the model, attack and manifest
    /// seeds together; the individual keys override it.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let fe = &mut self.frontend;
        match key.trim() {
            "seed" => {
                let s = parse(key, value)?;
                self.model_seed = s;
                self.attack.seed = s;
                self.manifest_seed = s;
            }
            "model_seed" => self.model_seed = parse(key, value)?,
            "attack_seed" => self.attack.seed = parse(key, value)?,
            "manifest_seed" => self.manifest_seed = parse(key, value)?,
            "n" | "n_samples" => self.n_samples = parse(key, value)?,
            "feature" | "features" => self.features = parse_feature_list(value)?,
            "stats_mode" => self.stats_mode = value.parse()?,
            "iterations" => self.attack.iterations = parse(key, value)?,
            "lr" | "learning_rate" => self.attack.learning_rate = parse(key, value)?,
            "lambda" => self.attack.lambda = parse(key, value)?,
            "trials" => self.attack.trials = parse(key, value)?,
            "init_scale" => self.attack.init_scale = parse(key, value)?,
            "adam_beta1" => self.attack.adam_beta1 = parse(key, value)?,
            "adam_beta2" => self.attack.adam_beta2 = parse(key, value)?,
            "adam_epsilon" => self.attack.adam_epsilon = parse(key, value)?,
            "gl_iters" => self.griffin_lim.n_iter = parse(key, value)?,
            "gl_phase" => self.griffin_lim.phase_init = parse_phase(value)?,
            "preemph" => fe.preemph_coeff = parse(key, value)?,
            "n_fft" => fe.n_fft = parse(key, value)?,
            "win_length" => fe.win_length = parse(key, value)?,
            "hop_length" => fe.hop_length = parse(key, value)?,
            "n_mels" => fe.n_mels_spec = parse(key, value)?,
            "n_mels_mfcc" => fe.n_mels_mfcc = parse(key, value)?,
            "n_mfcc" => fe.n_mfcc = parse(key, value)?,
            "fmin" => fe.fmin = parse(key, value)?,
            "fmax" => fe.fmax = parse(key, value)?,
            "db_floor" => fe.db_floor = parse(key, value)?,
            "jobs" => self.jobs = parse(key, value)?,
            "out" => self.out_dir = Some(PathBuf::from(value)),
            "data_root" => self.data_root = Some(PathBuf::from(value)),
            "baseline" => self.baseline = parse_bool(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        self.sync_griffin_lim();
        Ok(())
    }

    /// Parses `key = value` lines on top of the defaults. Blank lines and
    /// `#` comments are ignored.
    pub fn from_kv_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_kv_str(text)?;
        Ok(cfg)
    }

    pub fn apply_kv_str(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(())
    }

    /// Every effective parameter in the `key = value` format; reading it
    /// back reproduces this configuration.
    pub fn to_kv_string(&self) -> String {
        let fe = &self.frontend;
        let a = &self.attack;
        let features: Vec<&str> = self.features.iter().map(|k| k.name()).collect();
        let phase = match self.griffin_lim.phase_init {
            PhaseInit::Zeros => "zeros".to_string(),
            PhaseInit::Random(s) => format!("random:{s}"),
        };
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("features", features.join(","));
        kv("n_samples", self.n_samples.to_string());
        kv("model_seed", self.model_seed.to_string());
        kv("attack_seed", a.seed.to_string());
        kv("manifest_seed", self.manifest_seed.to_string());
        kv("stats_mode", self.stats_mode.name().to_string());
        kv("iterations", a.iterations.to_string());
        kv("learning_rate", format!("{:?}", a.learning_rate));
        kv("lambda", format!("{:?}", a.lambda));
        kv("trials", a.trials.to_string());
        kv("init_scale", format!("{:?}", a.init_scale));
        kv("adam_beta1", format!("{:?}", a.adam_beta1));
        kv("adam_beta2", format!("{:?}", a.adam_beta2));
        kv("adam_epsilon", format!("{:?}", a.adam_epsilon));
        kv("gl_iters", self.griffin_lim.n_iter.to_string());
        kv("gl_phase", phase);
        kv("preemph", format!("{:?}", fe.preemph_coeff));
        kv("n_fft", fe.n_fft.to_string());
        kv("win_length", fe.win_length.to_string());
        kv("hop_length", fe.hop_length.to_string());
        kv("n_mels", fe.n_mels_spec.to_string());
        kv("n_mels_mfcc", fe.n_mels_mfcc.to_string());
        kv("n_mfcc", fe.n_mfcc.to_string());
        kv("fmin", format!("{:?}", fe.fmin));
        kv("fmax", format!("{:?}", fe.fmax));
        kv("db_floor", format!("{:?}", fe.db_floor));
        kv("jobs", self.jobs.to_string());
        kv("baseline", self.baseline.to_string());
        if let Some(p) = &self.out_dir {
            kv("out", p.display().to_string());
        }
        if let Some(p) = &self.data_root {
            kv("data_root", p.display().to_string());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn echo_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("feature", "both").unwrap();
        cfg.set("seed", "42").unwrap();
        cfg.set("lr", "0.05").unwrap();
        cfg.set("gl_phase", "random:7").unwrap();
        cfg.set("out", "/tmp/x").unwrap();
        let back = ExperimentConfig::from_kv_str(&cfg.to_kv_string()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn seed_sets_all_and_specific_keys_override() {
        let cfg = ExperimentConfig::from_kv_str("seed = 3\nmodel_seed = 9 # trailing\n").unwrap();
        assert_eq!((cfg.model_seed, cfg.attack.seed, cfg.manifest_seed), (9, 3, 3));
    }

    #[test]
    fn frontend_changes_follow_into_griffin_lim() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("gl_iters", "5").unwrap();
        cfg.set("hop_length", "256").unwrap();
        assert_eq!((cfg.griffin_lim.hop_length, cfg.griffin_lim.n_iter), (256, 5));
    }

    #[test]
    fn bad_input_rejected() {
        assert!(ExperimentConfig::from_kv_str("iterations = many").is_err());
        assert!(ExperimentConfig::from_kv_str("colour = red").is_err());
        assert!(ExperimentConfig::from_kv_str("just words").is_err());
        assert!(parse_feature_list(" , ").is_err());
        let zero = ExperimentConfig {
            n_samples: 0,
            ..Default::default()
        };
        assert!(zero.validate().is_err());
    }

    #[test]
    fn feature_list_forms() {
        assert_eq!(
            parse_feature_list("both").unwrap(),
            [FeatureKind::MelDb, FeatureKind::MfccCmvn]
        );
        assert_eq!(
            parse_feature_list("mfcc,mel_power,mfcc").unwrap(),
            [FeatureKind::MfccCmvn, FeatureKind::MelPower]
        );
    }
}
