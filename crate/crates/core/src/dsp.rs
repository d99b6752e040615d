//! Forward acoustic front-end: waveform → log-mel or CMVN-normalized MFCC grid.

use std::fmt;

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stft::Stft;

pub const SAMPLE_RATE: u32 = 16_000;
/// One second at [`SAMPLE_RATE`].
pub const NUM_SAMPLES: usize = 16_000;
/// Model input side length (bands/coefficients and frames).
pub const GRID_SIDE: usize = 32;

/// Mono audio at 16 kHz with finite samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Result<Self> {
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("waveform"));
        }
        Ok(Self { samples })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            samples: vec![0.0; len],
        }
    }

    /// Zero-pads or truncates to exactly `len` samples.
    pub fn fit_to(mut self, len: usize) -> Self {
        self.samples.resize(len, 0.0);
        self
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * gain).collect(),
        }
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureKind {
    /// Log-mel spectrogram in dB, 32 bands.
    #[serde(rename = "mel")]
    MelDb,
    /// The same 32-band mel spectrogram left in the power domain.
    #[serde(rename = "mel_power")]
    MelPower,
    /// 32 MFCCs from a 128-band log-mel, per-utterance CMVN.
    #[serde(rename = "mfcc")]
    MfccCmvn,
}

impl FeatureKind {
    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::MelDb => "mel",
            FeatureKind::MelPower => "mel_power",
            FeatureKind::MfccCmvn => "mfcc",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            FeatureKind::MelDb => 0,
            FeatureKind::MfccCmvn => 1,
            FeatureKind::MelPower => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(FeatureKind::MelDb),
            1 => Some(FeatureKind::MfccCmvn),
            2 => Some(FeatureKind::MelPower),
            _ => None,
        }
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for FeatureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mel" | "mel_db" | "melspec" => Ok(FeatureKind::MelDb),
            "mel_power" | "mel-power" | "melpower" => Ok(FeatureKind::MelPower),
            "mfcc" | "mfcc_cmvn" => Ok(FeatureKind::MfccCmvn),
            other => Err(Error::Config(format!("unknown feature kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontendConfig {
    pub preemph_coeff: f64,
    pub win_length: usize,
    pub hop_length: usize,
    pub n_fft: usize,
    pub n_mels_spec: usize,
    pub n_mels_mfcc: usize,
    pub n_mfcc: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub db_floor: f64,
    pub feature_kind: FeatureKind,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            preemph_coeff: 0.97,
            win_length: 2048,
            hop_length: 512,
            n_fft: 2048,
            n_mels_spec: 32,
            n_mels_mfcc: 128,
            n_mfcc: 32,
            fmin: 0.0,
            fmax: 8000.0,
            db_floor: 1e-10,
            feature_kind: FeatureKind::MelDb,
        }
    }
}

impl FrontendConfig {
    pub fn with_kind(kind: FeatureKind) -> Self {
        Self {
            feature_kind: kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(0.0..1.0).contains(&self.preemph_coeff) {
            return bad("preemph_coeff must lie in [0, 1)");
        }
        if self.n_fft < self.win_length || self.hop_length == 0 || self.hop_length > self.win_length
        {
            return bad("require n_fft >= win_length >= hop_length > 0");
        }
        if self.n_mfcc > self.n_mels_mfcc {
            return bad("n_mfcc must not exceed n_mels_mfcc");
        }
        if self.fmax > SAMPLE_RATE as f64 / 2.0 || self.fmin < 0.0 || self.fmin >= self.fmax {
            return bad("require 0 <= fmin < fmax <= nyquist");
        }
        if !(self.db_floor > 0.0) {
            return bad("db_floor must be positive");
        }
        Ok(())
    }

    pub fn stft(&self) -> Result<Stft> {
        Stft::new(self.n_fft, self.win_length, self.hop_length)
    }

    /// Number of mel bands feeding the configured feature kind.
    pub fn n_mels(&self) -> usize {
        match self.feature_kind {
            FeatureKind::MelDb | FeatureKind::MelPower => self.n_mels_spec,
            FeatureKind::MfccCmvn => self.n_mels_mfcc,
        }
    }

    pub fn filterbank(&self) -> Result<MelFilterbank> {
        build_mel_filterbank(self.n_mels(), self.n_fft, self.fmin, self.fmax)
    }
}

/// Feature matrix, rows = bands or coefficients, columns = frames.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    values: Array2<f64>,
    kind: FeatureKind,
}

impl FeatureGrid {
    pub fn new(values: Array2<f64>, kind: FeatureKind) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature grid"));
        }
        Ok(Self { values, kind })
    }

    pub fn zeros(kind: FeatureKind) -> Self {
        Self {
            values: Array2::zeros((GRID_SIDE, GRID_SIDE)),
            kind,
        }
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Array2<f64> {
        &mut self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Row-major view of the cells.
    pub fn as_slice(&self) -> &[f64] {
        self.values
            .as_slice()
            .expect("feature grids are stored in standard layout")
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        self.values
            .as_slice_mut()
            .expect("feature grids are stored in standard layout")
    }

    pub fn from_row_major(
        rows: usize,
        cols: usize,
        data: Vec<f64>,
        kind: FeatureKind,
    ) -> Result<Self> {
        let len = data.len();
        let values = Array2::from_shape_vec((rows, cols), data)
            .map_err(|_| Error::shape("feature grid", format!("{rows}x{cols}"), len))?;
        Self::new(values, kind)
    }

    pub fn check_model_shape(&self) -> Result<()> {
        if self.dim() != (GRID_SIDE, GRID_SIDE) {
            return Err(Error::shape(
                "model input",
                format!("{GRID_SIDE}x{GRID_SIDE}"),
                format!("{}x{}", self.dim().0, self.dim().1),
            ));
        }
        Ok(())
    }
}

/// Triangular mel filters, `n_mels × (n_fft/2 + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelFilterbank {
    weights: Array2<f64>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn n_mels(&self) -> usize {
        self.weights.nrows()
    }

    pub fn n_bins(&self) -> usize {
        self.weights.ncols()
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    /// `weights · power`.
    pub fn apply(&self, power: &Array2<f64>) -> Result<Array2<f64>> {
        if power.nrows() != self.n_bins() {
            return Err(Error::shape(
                "filterbank product",
                self.n_bins(),
                power.nrows(),
            ));
        }
        Ok(self.weights.dot(power))
    }
}

/// Power spectrogram, `bins × frames`.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSpectrogram {
    pub values: Array2<f64>,
}

/// Per-utterance CMVN statistics, one entry per coefficient row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmvnStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl CmvnStats {
    pub fn identity(n: usize) -> Self {
        Self {
            mean: vec![0.0; n],
            std: vec![1.0; n],
        }
    }

    /// Element-wise average of several utterances' statistics.
    pub fn average<'a>(stats: impl IntoIterator<Item = &'a CmvnStats>) -> Option<Self> {
        let mut count = 0usize;
        let mut acc: Option<CmvnStats> = None;
        for s in stats {
            count += 1;
            match acc.as_mut() {
                None => acc = Some(s.clone()),
                Some(a) => {
                    a.mean.iter_mut().zip(&s.mean).for_each(|(x, y)| *x += y);
                    a.std.iter_mut().zip(&s.std).for_each(|(x, y)| *x += y);
                }
            }
        }
        acc.map(|mut a| {
            let n = count as f64;
            a.mean.iter_mut().for_each(|x| *x /= n);
            a.std.iter_mut().for_each(|x| *x /= n);
            a
        })
    }
}

/// Floor applied to CMVN standard deviations.
pub const CMVN_STD_FLOOR: f64 = 1e-8;

/// `y[0] = x[0]`, `y[t] = x[t] - coeff * x[t-1]`.
pub fn preemphasize(wave: &Waveform, coeff: f64) -> Waveform {
    let x = wave.samples();
    let samples = (0..x.len())
        .map(|t| {
            if t == 0 {
                x[0]
            } else {
                x[t] - coeff * x[t - 1]
            }
        })
        .collect();
    Waveform { samples }
}

/// Inverse of [`preemphasize`]: `y[t] = x[t] + coeff * y[t-1]`.
pub fn deemphasize(samples: &[f64], coeff: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(samples.len());
    let mut prev = 0.0;
    for &s in samples {
        prev = s + coeff * prev;
        out.push(prev);
    }
    out
}

/// Magnitude-squared STFT of the waveform as given (no pre-emphasis).
pub fn stft_power(wave: &Waveform, cfg: &FrontendConfig) -> Result<PowerSpectrogram> {
    let spec = cfg.stft()?.forward(wave.samples())?;
    Ok(PowerSpectrogram {
        values: spec.mapv(|c| c.norm_sqr()),
    })
}

/// Slaney mel scale: linear below 1 kHz, logarithmic above.
pub fn hz_to_mel(hz: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if hz >= MIN_LOG_HZ {
        min_log_mel + (hz / MIN_LOG_HZ).ln() / logstep
    } else {
        hz / F_SP
    }
}

pub fn mel_to_hz(mel: f64) -> f64 {
    const F_SP: f64 = 200.0 / 3.0;
    const MIN_LOG_HZ: f64 = 1000.0;
    let min_log_mel = MIN_LOG_HZ / F_SP;
    let logstep = 6.4f64.ln() / 27.0;
    if mel >= min_log_mel {
        MIN_LOG_HZ * (logstep * (mel - min_log_mel)).exp()
    } else {
        F_SP * mel
    }
}

/// Area-normalized triangular filters on the Slaney mel scale.
pub fn build_mel_filterbank(
    n_mels: usize,
    n_fft: usize,
    fmin: f64,
    fmax: f64,
) -> Result<MelFilterbank> {
    let nyquist = SAMPLE_RATE as f64 / 2.0;
    if n_mels == 0 {
        return Err(Error::Config("n_mels must be at least 1".into()));
    }
    if fmax > nyquist {
        return Err(Error::Config(format!(
            "fmax {fmax} exceeds nyquist {nyquist}"
        )));
    }
    if !(fmin >= 0.0 && fmin < fmax) {
        return Err(Error::Config(format!(
            "require 0 <= fmin < fmax, got {fmin}..{fmax}"
        )));
    }
    let n_bins = n_fft / 2 + 1;
    let fft_freqs: Vec<f64> = (0..n_bins)
        .map(|k| k as f64 * SAMPLE_RATE as f64 / n_fft as f64)
        .collect();
    let (mel_lo, mel_hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();

    let mut weights = Array2::zeros((n_mels, n_bins));
    for m in 0..n_mels {
        let (lo, center, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        let enorm = 2.0 / (hi - lo);
        for (k, &f) in fft_freqs.iter().enumerate() {
            let rising = (f - lo) / (center - lo);
            let falling = (hi - f) / (hi - center);
            weights[[m, k]] = rising.min(falling).max(0.0) * enorm;
        }
        if weights.row(m).iter().all(|&w| w <= 0.0) {
            return Err(Error::Config(format!(
                "mel filter {m} ({lo:.1}-{hi:.1} Hz) covers no fft bin; use fewer bands or a longer fft"
            )));
        }
    }
    Ok(MelFilterbank {
        weights,
        centers_hz: edges[1..=n_mels].to_vec(),
    })
}

/// `10·log10(max(x, floor))`.
pub fn power_to_db(x: &Array2<f64>, floor: f64) -> Array2<f64> {
    x.mapv(|v| 10.0 * v.max(floor).log10())
}

/// Rows `0..n_out` of the orthonormal DCT-II matrix of size `n_in`.
pub fn dct_ortho_matrix(n_out: usize, n_in: usize) -> Array2<f64> {
    let n = n_in as f64;
    Array2::from_shape_fn((n_out, n_in), |(k, i)| {
        let scale = if k == 0 {
            (1.0 / n).sqrt()
        } else {
            (2.0 / n).sqrt()
        };
        scale * (std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / (2.0 * n)).cos()
    })
}

fn mel_power(wave: &Waveform, cfg: &FrontendConfig, n_mels: usize) -> Result<Array2<f64>> {
    cfg.validate()?;
    let emphasized = preemphasize(wave, cfg.preemph_coeff);
    let power = stft_power(&emphasized, cfg)?;
    let fb = build_mel_filterbank(n_mels, cfg.n_fft, cfg.fmin, cfg.fmax)?;
    fb.apply(&power.values)
}

fn log_mel(wave: &Waveform, cfg: &FrontendConfig, n_mels: usize) -> Result<Array2<f64>> {
    Ok(power_to_db(&mel_power(wave, cfg, n_mels)?, cfg.db_floor))
}

/// Pre-emphasis, power STFT, 32-band mel, dB.
pub fn mel_spectrogram_db(wave: &Waveform, cfg: &FrontendConfig) -> Result<FeatureGrid> {
    FeatureGrid::new(log_mel(wave, cfg, cfg.n_mels_spec)?, FeatureKind::MelDb)
}

/// Pre-emphasis, power STFT, 32-band mel, no log compression.
pub fn mel_spectrogram_power(wave: &Waveform, cfg: &FrontendConfig) -> Result<FeatureGrid> {
    FeatureGrid::new(mel_power(wave, cfg, cfg.n_mels_spec)?, FeatureKind::MelPower)
}

/// MFCCs before CMVN: orthonormal DCT-II of the 128-band dB mel, first
/// `n_mfcc` coefficients.
pub fn mfcc_unnormalized(wave: &Waveform, cfg: &FrontendConfig) -> Result<Array2<f64>> {
    let db = log_mel(wave, cfg, cfg.n_mels_mfcc)?;
    Ok(dct_ortho_matrix(cfg.n_mfcc, cfg.n_mels_mfcc).dot(&db))
}

/// Per-row standardization with population std floored at [`CMVN_STD_FLOOR`].
pub fn cmvn(coeffs: &Array2<f64>) -> (Array2<f64>, CmvnStats) {
    let mean: Array1<f64> = coeffs
        .mean_axis(Axis(1))
        .unwrap_or_else(|| Array1::zeros(coeffs.nrows()));
    let std: Array1<f64> = coeffs
        .std_axis(Axis(1), 0.0)
        .mapv(|s| s.max(CMVN_STD_FLOOR));
    let mut out = coeffs.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        row.mapv_inplace(|v| (v - mean[i]) / std[i]);
    }
    (
        out,
        CmvnStats {
            mean: mean.to_vec(),
            std: std.to_vec(),
        },
    )
}

pub fn mfcc(wave: &Waveform, cfg: &FrontendConfig) -> Result<(FeatureGrid, CmvnStats)> {
    let (normalized, stats) = cmvn(&mfcc_unnormalized(wave, cfg)?);
    Ok((FeatureGrid::new(normalized, FeatureKind::MfccCmvn)?, stats))
}

/// `value[i][j] · std[i] + mean[i]`.
pub fn cmvn_apply_inverse(grid: &FeatureGrid, stats: &CmvnStats) -> Result<FeatureGrid> {
    if grid.kind() != FeatureKind::MfccCmvn {
        return Err(Error::KindMismatch {
            expected: FeatureKind::MfccCmvn.name(),
            actual: grid.kind().name(),
        });
    }
    let rows = grid.dim().0;
    if stats.mean.len() != rows || stats.std.len() != rows {
        return Err(Error::shape(
            "cmvn stats",
            rows,
            stats.mean.len().min(stats.std.len()),
        ));
    }
    if stats.std.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Config("cmvn std entries must be positive".into()));
    }
    let mut values = grid.values().clone();
    for (i, mut row) in values.rows_mut().into_iter().enumerate() {
        row.mapv_inplace(|v| v * stats.std[i] + stats.mean[i]);
    }
    FeatureGrid::new(values, FeatureKind::MfccCmvn)
}

/// Features for the configured kind, plus CMVN statistics for MFCC.
pub fn extract_features(
    wave: &Waveform,
    cfg: &FrontendConfig,
) -> Result<(FeatureGrid, Option<CmvnStats>)> {
    match cfg.feature_kind {
        FeatureKind::MelDb => Ok((mel_spectrogram_db(wave, cfg)?, None)),
        FeatureKind::MelPower => Ok((mel_spectrogram_power(wave, cfg)?, None)),
        FeatureKind::MfccCmvn => {
            let (grid, stats) = mfcc(wave, cfg)?;
            Ok((grid, Some(stats)))
        }
    }
}
