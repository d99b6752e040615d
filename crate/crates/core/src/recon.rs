//! Waveform reconstruction from feature grids: dB → power, MFCC → mel,
//! mel → linear power by non-negative least squares, and Griffin-Lim phase
//! estimation.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dsp::{
    cmvn_apply_inverse, dct_ortho_matrix, deemphasize, FeatureGrid, FeatureKind, FrontendConfig,
    MelFilterbank, NUM_SAMPLES,
};
use crate::error::{Error, Result};
use crate::stft::Stft;
use crate::Waveform;

/// Linear STFT magnitudes, `bins × frames`, all entries finite and `>= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeSpectrogram(Array2<f64>);

impl MagnitudeSpectrogram {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("magnitude spectrogram"));
        }
        if values.iter().any(|&v| v < 0.0) {
            return Err(Error::Config("magnitudes must be non-negative".into()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_values(self) -> Array2<f64> {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PhaseInit {
    Zeros,
    Random(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GriffinLimConfig {
    pub n_iter: usize,
    pub n_fft: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub phase_init: PhaseInit,
    /// Output length in samples.
    pub length: usize,
    /// Coefficient of the de-emphasis filter applied after reconstruction.
    pub deemphasis: f64,
}

impl Default for GriffinLimConfig {
    fn default() -> Self {
        Self::from_frontend(&FrontendConfig::default())
    }
}

impl GriffinLimConfig {
    pub fn from_frontend(cfg: &FrontendConfig) -> Self {
        Self {
            n_iter: 32,
            n_fft: cfg.n_fft,
            win_length: cfg.win_length,
            hop_length: cfg.hop_length,
            phase_init: PhaseInit::Random(0),
            length: NUM_SAMPLES,
            deemphasis: cfg.preemph_coeff,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_iter == 0 {
            return Err(Error::Config("griffin-lim needs at least one iteration".into()));
        }
        if self.length < 2 {
            return Err(Error::SignalTooShort {
                len: self.length,
                min: 2,
            });
        }
        Stft::new(self.n_fft, self.win_length, self.hop_length).map(|_| ())
    }
}

/// How MFCC normalization is undone before inversion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatsMode {
    /// The utterance's own statistics.
    Oracle,
    /// Statistics averaged over a reference set of utterances.
    #[serde(rename = "dataset")]
    DatasetAverage,
    /// Treat the grid as already unnormalized.
    Identity,
}

impl StatsMode {
    pub fn name(self) -> &'static str {
        match self {
            StatsMode::Oracle => "oracle",
            StatsMode::DatasetAverage => "dataset",
            StatsMode::Identity => "identity",
        }
    }
}

impl fmt::Display for StatsMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StatsMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracle" => Ok(StatsMode::Oracle),
            "dataset" | "dataset-average" | "dataset_average" => Ok(StatsMode::DatasetAverage),
            "identity" => Ok(StatsMode::Identity),
            other => Err(Error::Config(format!(
                "unknown stats mode {other:?} (expected oracle, dataset or identity)"
            ))),
        }
    }
}

/// `10^(x / 10)` element-wise.
pub fn db_to_power(db: &Array2<f64>) -> Array2<f64> {
    db.mapv(|x| 10f64.powf(x / 10.0))
}

fn require_kind(grid: &FeatureGrid, kind: FeatureKind) -> Result<()> {
    if grid.kind() == kind {
        Ok(())
    } else {
        Err(Error::KindMismatch {
            expected: kind.name(),
            actual: grid.kind().name(),
        })
    }
}

/// Undo CMVN, zero-pad the cepstrum to `n_mels` coefficients, apply the
/// orthonormal DCT-III and convert dB to power. Returns `n_mels × frames`.
///
/// `stats` is required for [`StatsMode::Oracle`] and
/// [`StatsMode::DatasetAverage`] and ignored for [`StatsMode::Identity`].
pub fn mfcc_to_mel(
    grid: &FeatureGrid,
    mode: StatsMode,
    stats: Option<&crate::dsp::CmvnStats>,
    n_mels: usize,
) -> Result<Array2<f64>> {
    require_kind(grid, FeatureKind::MfccCmvn)?;
    let coeffs = match mode {
        StatsMode::Identity => grid.values().clone(),
        StatsMode::Oracle | StatsMode::DatasetAverage => {
            let stats = stats.ok_or_else(|| {
                Error::Config(format!("stats mode {mode} needs cmvn statistics"))
            })?;
            cmvn_apply_inverse(grid, stats)?.into_values()
        }
    };
    let n_coeffs = coeffs.nrows();
    if n_coeffs > n_mels {
        return Err(Error::shape("cepstrum length", format!("<= {n_mels}"), n_coeffs));
    }
    // Rows of the truncated DCT-II are orthonormal, so its transpose is the
    // inverse transform of the zero-padded cepstrum.
    let dct = dct_ortho_matrix(n_coeffs, n_mels);
    Ok(db_to_power(&dct.t().dot(&coeffs)))
}

/// Largest eigenvalue of `BᵀB` (equivalently of `BBᵀ`) by power iteration.
fn gram_spectral_norm(b: &Array2<f64>) -> f64 {
    let bbt = b.dot(&b.t());
    let n = bbt.nrows();
    let mut v = ndarray::Array1::from_elem(n, 1.0 / (n as f64).sqrt());
    let mut lambda = 0.0;
    for _ in 0..200 {
        let w = bbt.dot(&v);
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = v.dot(&w);
        v = w / norm;
    }
    lambda
}

/// Iterations of the projected-gradient NNLS solver.
pub const NNLS_ITERATIONS: usize = 500;

/// Non-negative `S` minimizing `‖M − B S‖²_F`, by projected gradient with
/// step `1 / ‖BᵀB‖₂` from `S = 0`. Also returns the residual norm after
/// every iteration (non-increasing).
pub fn nnls_solve(
    mel_power: &Array2<f64>,
    weights: &Array2<f64>,
    iterations: usize,
) -> Result<(Array2<f64>, Vec<f64>)> {
    if mel_power.nrows() != weights.nrows() {
        return Err(Error::shape("mel rows", weights.nrows(), mel_power.nrows()));
    }
    if mel_power.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("mel power"));
    }
    let b = weights;
    let bt = b.t();
    let lipschitz = gram_spectral_norm(b);
    let mut s = Array2::<f64>::zeros((b.ncols(), mel_power.ncols()));
    let mut residuals = Vec::with_capacity(iterations);
    if lipschitz == 0.0 {
        return Ok((s, vec![frob(mel_power); iterations]));
    }
    let step = 1.0 / lipschitz;
    // Gradient Bᵀ(BS − M) through the thin factor rather than the
    // n_bins × n_bins Gram matrix.
    let mut r = -mel_power;
    for _ in 0..iterations {
        let grad = bt.dot(&r);
        Zip::from(&mut s).and(&grad).for_each(|s, &g| {
            *s = (*s - step * g).max(0.0);
        });
        r = b.dot(&s) - mel_power;
        residuals.push(frob(&r));
    }
    Ok((s, residuals))
}

fn frob(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Linear STFT magnitudes whose mel projection best matches `mel_power`.
pub fn nnls_mel_to_stft(mel_power: &Array2<f64>, filterbank: &MelFilterbank) -> Result<MagnitudeSpectrogram> {
    let (power, _) = nnls_solve(mel_power, filterbank.weights(), NNLS_ITERATIONS)?;
    MagnitudeSpectrogram::new(power.mapv(f64::sqrt))
}

/// Spectral convergence `‖|X| − mag‖ / ‖mag‖` over the full (two-sided)
/// spectrum: interior bins count twice, DC and Nyquist once.
pub fn spectral_convergence(spec: &Array2<Complex64>, mag: &Array2<f64>) -> f64 {
    let n_bins = mag.nrows();
    let weight = |k: usize| if k == 0 || k == n_bins - 1 { 1.0 } else { 2.0 };
    let (mut num, mut den) = (0.0, 0.0);
    for (((k, _), &m), x) in mag.indexed_iter().zip(spec.iter()) {
        let d = x.norm() - m;
        num += weight(k) * d * d;
        den += weight(k) * m * m;
    }
    if den == 0.0 {
        0.0
    } else {
        (num / den).sqrt()
    }
}

/// Griffin-Lim phase reconstruction, returning the waveform (without
/// de-emphasis) and the spectral convergence after every iteration.
///
/// Iterates on the padded signal so each ISTFT/STFT pair is an exact
/// projection; the padding is trimmed only at the end.
pub fn griffin_lim_traced(mag: &MagnitudeSpectrogram, cfg: &GriffinLimConfig) -> Result<(Waveform, Vec<f64>)> {
    cfg.validate()?;
    let stft = Stft::new(cfg.n_fft, cfg.win_length, cfg.hop_length)?;
    let target = mag.values();
    let n_frames = stft.n_frames(cfg.length);
    if target.dim() != (stft.n_bins(), n_frames) {
        return Err(Error::shape(
            "griffin-lim magnitudes",
            format!("{}x{}", stft.n_bins(), n_frames),
            format!("{}x{}", target.nrows(), target.ncols()),
        ));
    }
    let padded_len = stft.padded_len(cfg.length);
    let half = cfg.n_fft / 2;
    let coverage = stft.window_square_sum(n_frames, padded_len);
    let uncovered = coverage[half..half + cfg.length]
        .iter()
        .filter(|&&w| w <= f64::MIN_POSITIVE)
        .count();
    if uncovered > 0 {
        return Err(Error::ZeroWindowSum(uncovered));
    }

    let mut spec: Array2<Complex64> = match cfg.phase_init {
        PhaseInit::Zeros => target.mapv(|m| Complex64::new(m, 0.0)),
        PhaseInit::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            target.mapv(|m| Complex64::from_polar(m, rng.random_range(0.0..2.0 * PI)))
        }
    };
    let mut trace = Vec::with_capacity(cfg.n_iter);
    let mut signal = stft.inverse_padded(&spec, padded_len);
    for _ in 0..cfg.n_iter {
        let estimate = stft.forward_padded(&signal, n_frames);
        trace.push(spectral_convergence(&estimate, target));
        Zip::from(&mut spec)
            .and(&estimate)
            .and(target)
            .for_each(|out, est, &m| {
                let norm = est.norm();
                *out = if norm > 0.0 {
                    est * (m / norm)
                } else {
                    Complex64::new(m, 0.0)
                };
            });
        signal = stft.inverse_padded(&spec, padded_len);
    }
    let wave = Waveform::new(signal[half..half + cfg.length].to_vec())?;
    Ok((wave, trace))
}

pub fn griffin_lim(mag: &MagnitudeSpectrogram, cfg: &GriffinLimConfig) -> Result<Waveform> {
    Ok(griffin_lim_traced(mag, cfg)?.0)
}

fn power_to_waveform(mel_power: &Array2<f64>, fb: &MelFilterbank, glc: &GriffinLimConfig) -> Result<Waveform> {
    let mag = nnls_mel_to_stft(mel_power, fb)?;
    let wave = griffin_lim(&mag, glc)?;
    Waveform::new(deemphasize(wave.samples(), glc.deemphasis))
}

/// Mel grid (dB or power) → power → NNLS → Griffin-Lim → de-emphasis.
///
/// Negative entries of a power-domain grid (an attack can overshoot below
/// zero) are clamped to zero before the NNLS stage.
pub fn mel_to_waveform(grid: &FeatureGrid, fb: &MelFilterbank, glc: &GriffinLimConfig) -> Result<Waveform> {
    if grid.dim().0 != fb.n_mels() {
        return Err(Error::shape("mel grid rows", fb.n_mels(), grid.dim().0));
    }
    let power = match grid.kind() {
        FeatureKind::MelDb => db_to_power(grid.values()),
        FeatureKind::MelPower => grid.values().mapv(|v| v.max(0.0)),
        FeatureKind::MfccCmvn => {
            return Err(Error::KindMismatch {
                expected: FeatureKind::MelDb.name(),
                actual: grid.kind().name(),
            })
        }
    };
    power_to_waveform(&power, fb, glc)
}

/// MFCC grid → mel power (see [`mfcc_to_mel`]) → NNLS → Griffin-Lim →
/// de-emphasis. `fb` is the filterbank the cepstrum was computed from.
pub fn mfcc_to_waveform(
    grid: &FeatureGrid,
    mode: StatsMode,
    stats: Option<&crate::dsp::CmvnStats>,
    fb: &MelFilterbank,
    glc: &GriffinLimConfig,
) -> Result<Waveform> {
    let mel = mfcc_to_mel(grid, mode, stats, fb.n_mels())?;
    power_to_waveform(&mel, fb, glc)
}
