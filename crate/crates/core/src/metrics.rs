//! Leakage metrics: feature and waveform MSE, short-time objective
//! intelligibility (STOI) and cosine similarity of speaker embeddings.

use std::f64::consts::PI;

use ndarray::{Array2, ArrayView1};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dsp::{FeatureGrid, FeatureKind, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::model::Label;
use crate::Waveform;

/// Mean squared difference over all cells.
pub fn mse_feature(a: &FeatureGrid, b: &FeatureGrid) -> Result<f64> {
    if a.kind() != b.kind() {
        return Err(Error::KindMismatch {
            expected: a.kind().name(),
            actual: b.kind().name(),
        });
    }
    if a.dim() != b.dim() {
        return Err(Error::shape(
            "feature mse",
            format!("{:?}", a.dim()),
            format!("{:?}", b.dim()),
        ));
    }
    let n = a.as_slice().len() as f64;
    Ok(a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// Mean squared sample difference, no gain normalization or alignment.
pub fn mse_waveform(reference: &Waveform, degraded: &Waveform) -> Result<f64> {
    if reference.len() != degraded.len() {
        return Err(Error::shape("waveform mse", reference.len(), degraded.len()));
    }
    if reference.is_empty() {
        return Err(Error::SignalTooShort { len: 0, min: 1 });
    }
    Ok(reference
        .samples()
        .iter()
        .zip(degraded.samples())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / reference.len() as f64)
}

/// `a·b / (‖a‖ ‖b‖)`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("embedding", a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(Error::ZeroNorm);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Parses embedding vectors, one per non-empty line, values separated by
/// whitespace or commas. Lines starting with `#` are skipped.
pub fn parse_embeddings(text: &str) -> Result<Vec<Vec<f64>>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(n, line)| {
            line.split(|c: char| c == ',' || c.is_whitespace())
                .filter(|t| !t.is_empty())
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|e| Error::Format(format!("line {}: {t:?}: {e}", n + 1)))
                })
                .collect()
        })
        .collect()
}

/// Constants of the intelligibility measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoiConfig {
    /// Internal sample rate.
    pub fs: u32,
    pub frame_len: usize,
    pub hop: usize,
    pub n_fft: usize,
    pub num_bands: usize,
    /// Centre of the lowest one-third-octave band, Hz.
    pub min_freq: f64,
    /// Frames per analysis segment (384 ms at the defaults).
    pub segment_frames: usize,
    /// Lower signal-to-distortion bound for clipping, dB.
    pub beta_db: f64,
    /// Frames more than this many dB below the loudest frame are dropped.
    pub dyn_range_db: f64,
}

impl Default for StoiConfig {
    fn default() -> Self {
        Self {
            fs: 10_000,
            frame_len: 256,
            hop: 128,
            n_fft: 512,
            num_bands: 15,
            min_freq: 150.0,
            segment_frames: 30,
            beta_db: -15.0,
            dyn_range_db: 40.0,
        }
    }
}

/// Hann window of `n` points without the zero end points.
fn hann_inner(n: usize) -> Vec<f64> {
    (1..=n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (n + 1) as f64).cos())
        .collect()
}

/// One-third-octave band matrix, `num_bands × (n_fft/2 + 1)`; band edges
/// snap to the nearest FFT bin and the upper edge bin is excluded.
pub fn third_octave_bands(fs: u32, n_fft: usize, num_bands: usize, min_freq: f64) -> Array2<f64> {
    let n_bins = n_fft / 2 + 1;
    let freqs: Vec<f64> = (0..n_bins).map(|k| k as f64 * fs as f64 / n_fft as f64).collect();
    let nearest = |f: f64| {
        let mut best = 0;
        for (k, &fk) in freqs.iter().enumerate() {
            if (fk - f).powi(2) < (freqs[best] - f).powi(2) {
                best = k;
            }
        }
        best
    };
    let mut obm = Array2::zeros((num_bands, n_bins));
    for band in 0..num_bands {
        let k = band as f64;
        let lo = nearest(min_freq * 2f64.powf((2.0 * k - 1.0) / 6.0));
        let hi = nearest(min_freq * 2f64.powf((2.0 * k + 1.0) / 6.0));
        for bin in lo..hi {
            obm[[band, bin]] = 1.0;
        }
    }
    obm
}

/// Rational resampler with a Kaiser-windowed sinc low-pass (60 dB design
/// rejection, cutoff at the lower Nyquist frequency, roll-off width a tenth
/// of the cutoff), applied in polyphase form and compensated for the filter
/// delay. This is the filter design used by common open-source STOI
/// implementations, so scores stay comparable with theirs.
pub struct Resampler {
    up: usize,
    down: usize,
    taps: Vec<f64>,
}

impl Resampler {
    const REJECTION_DB: f64 = 60.0;

    pub fn new(fs_in: u32, fs_out: u32) -> Self {
        let g = gcd(fs_in as usize, fs_out as usize);
        let (up, down) = (fs_out as usize / g, fs_in as usize / g);
        let cutoff = 1.0 / (2.0 * up.max(down) as f64); // cycles per upsampled sample
        let roll_off = cutoff / 10.0;
        let half = ((Self::REJECTION_DB - 8.0) / (28.714 * roll_off)).ceil() as usize;
        let beta = 0.1102 * (Self::REJECTION_DB - 8.7);
        let i0b = bessel_i0(beta);
        let mut taps: Vec<f64> = (0..=2 * half)
            .map(|n| {
                let t = n as f64 - half as f64;
                let x = 2.0 * cutoff * t;
                let sinc = if t == 0.0 { 1.0 } else { (PI * x).sin() / (PI * x) };
                let r = t / half as f64;
                sinc * bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / i0b
            })
            .collect();
        // unit gain at DC after zero-stuffing
        let sum: f64 = taps.iter().sum();
        taps.iter_mut().for_each(|h| *h *= up as f64 / sum);
        Self { up, down, taps }
    }

    pub fn process(&self, x: &[f64]) -> Vec<f64> {
        let out_len = (x.len() * self.up).div_ceil(self.down);
        let delay = (self.taps.len() - 1) / 2;
        (0..out_len)
            .map(|m| {
                // y[m] = Σ_n x[n] h[m·down − n·up + delay]
                let pos = m * self.down + delay;
                let mut acc = 0.0;
                let mut phase = pos % self.up;
                let mut n = pos / self.up;
                while phase < self.taps.len() {
                    if n < x.len() {
                        acc += x[n] * self.taps[phase];
                    }
                    if n == 0 {
                        break;
                    }
                    n -= 1;
                    phase += self.up;
                }
                acc
            })
            .collect()
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..60 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < 1e-17 * sum {
            break;
        }
    }
    sum
}

fn frames(x: &[f64], window: &[f64], hop: usize) -> Vec<Vec<f64>> {
    let len = window.len();
    if x.len() <= len {
        return Vec::new();
    }
    (0..x.len() - len)
        .step_by(hop)
        .map(|s| x[s..s + len].iter().zip(window).map(|(a, w)| a * w).collect())
        .collect()
}

fn overlap_add(frames: &[Vec<f64>], hop: usize) -> Vec<f64> {
    let Some(first) = frames.first() else {
        return Vec::new();
    };
    let mut out = vec![0.0; (frames.len() - 1) * hop + first.len()];
    for (i, f) in frames.iter().enumerate() {
        for (k, v) in f.iter().enumerate() {
            out[i * hop + k] += v;
        }
    }
    out
}

/// Drops frames of `x` more than `dyn_range_db` below its loudest frame,
/// together with the same frames of `y`, and re-synthesizes both by
/// overlap-add.
fn remove_silent_frames(x: &[f64], y: &[f64], cfg: &StoiConfig) -> (Vec<f64>, Vec<f64>) {
    let w = hann_inner(cfg.frame_len);
    let xf = frames(x, &w, cfg.hop);
    let yf = frames(y, &w, cfg.hop);
    let energy: Vec<f64> = xf
        .iter()
        .map(|f| 20.0 * (f.iter().map(|v| v * v).sum::<f64>().sqrt() + f64::EPSILON).log10())
        .collect();
    let max = energy.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if xf.iter().all(|f| f.iter().all(|&v| v == 0.0)) {
        return (Vec::new(), Vec::new());
    }
    let keep: Vec<usize> = (0..xf.len())
        .filter(|&i| max - cfg.dyn_range_db - energy[i] < 0.0)
        .collect();
    let pick = |f: &[Vec<f64>]| keep.iter().map(|&i| f[i].clone()).collect::<Vec<_>>();
    (overlap_add(&pick(&xf), cfg.hop), overlap_add(&pick(&yf), cfg.hop))
}

/// Band envelopes `sqrt(OBM · |STFT|²)`, `num_bands × frames`. Frames start
/// every `hop` samples while a full frame fits strictly before the end.
fn band_envelopes(x: &[f64], obm: &Array2<f64>, cfg: &StoiConfig) -> Array2<f64> {
    let w = hann_inner(cfg.frame_len);
    let n_frames = if x.len() > cfg.frame_len {
        (x.len() - cfg.frame_len).div_ceil(cfg.hop)
    } else {
        0
    };
    let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
    let n_bins = cfg.n_fft / 2 + 1;
    let mut power = Array2::zeros((n_bins, n_frames));
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.n_fft];
    for t in 0..n_frames {
        buf.iter_mut().for_each(|b| *b = Complex64::new(0.0, 0.0));
        let s = t * cfg.hop;
        for k in 0..cfg.frame_len {
            buf[k].re = x[s + k] * w[k];
        }
        fft.process(&mut buf);
        for k in 0..n_bins {
            power[[k, t]] = buf[k].norm_sqr();
        }
    }
    obm.dot(&power).mapv(f64::sqrt)
}

fn center_and_normalize(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt() + f64::EPSILON;
    v.iter_mut().for_each(|x| *x /= norm);
}

fn norm(v: ArrayView1<f64>) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Short-time objective intelligibility of `degraded` against `reference`,
/// both at the front-end sample rate.
pub fn stoi(reference: &Waveform, degraded: &Waveform) -> Result<f64> {
    stoi_with(reference, degraded, &StoiConfig::default())
}

pub fn stoi_with(reference: &Waveform, degraded: &Waveform, cfg: &StoiConfig) -> Result<f64> {
    if reference.len() != degraded.len() {
        return Err(Error::shape("stoi signals", reference.len(), degraded.len()));
    }
    let (x, y) = if cfg.fs == SAMPLE_RATE {
        (reference.samples().to_vec(), degraded.samples().to_vec())
    } else {
        let rs = Resampler::new(SAMPLE_RATE, cfg.fs);
        (rs.process(reference.samples()), rs.process(degraded.samples()))
    };
    let (x, y) = remove_silent_frames(&x, &y, cfg);
    if x.is_empty() {
        return Err(Error::Silent);
    }
    let obm = third_octave_bands(cfg.fs, cfg.n_fft, cfg.num_bands, cfg.min_freq);
    let xt = band_envelopes(&x, &obm, cfg);
    let yt = band_envelopes(&y, &obm, cfg);
    let n = cfg.segment_frames;
    let frames = xt.ncols();
    if frames < n {
        return Err(Error::SignalTooShort {
            len: x.len(),
            min: n * cfg.hop + cfg.frame_len,
        });
    }
    let clip = 10f64.powf(-cfg.beta_db / 20.0);
    let mut total = 0.0;
    let segments = frames - n + 1;
    for m in n..=frames {
        for band in 0..cfg.num_bands {
            let xs = xt.row(band);
            let ys = yt.row(band);
            let xseg = xs.slice(ndarray::s![m - n..m]);
            let yseg = ys.slice(ndarray::s![m - n..m]);
            let scale = norm(xseg) / (norm(yseg) + f64::EPSILON);
            let mut yp: Vec<f64> = yseg
                .iter()
                .zip(xseg.iter())
                .map(|(&yv, &xv)| (yv * scale).min(xv * (1.0 + clip)))
                .collect();
            let mut xp = xseg.to_vec();
            center_and_normalize(&mut yp);
            center_and_normalize(&mut xp);
            total += yp.iter().zip(&xp).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    Ok(total / (segments * cfg.num_bands) as f64)
}

/// Per-sample scores for one reconstruction pathway.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub sample_id: String,
    pub feature_kind: FeatureKind,
    pub f_mse: f64,
    pub w_mse: f64,
    pub stoi: f64,
    pub final_objective: Option<f64>,
    pub restored_label: Option<Label>,
    pub true_label: Label,
    pub seconds: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(seed: u64, n: usize, amp: f64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| amp * rng.random_range(-1.0..1.0)).collect()
    }

    /// Amplitude-modulated harmonic signal with speech-like envelope.
    fn babble(seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f0 = rng.random_range(100.0..200.0);
        Waveform::new(
            (0..16000)
                .map(|t| {
                    let ts = t as f64 / 16000.0;
                    let env = 0.6 + 0.4 * (2.0 * PI * 4.0 * ts).sin();
                    let s: f64 = (1..12)
                        .map(|h| (2.0 * PI * f0 * h as f64 * ts).sin() / h as f64)
                        .sum();
                    0.1 * env * s
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn mse_examples() {
        let a = FeatureGrid::zeros(FeatureKind::MelDb);
        let b = FeatureGrid::new(Array2::from_elem((32, 32), 2.0), FeatureKind::MelDb).unwrap();
        assert_eq!(mse_feature(&a, &a).unwrap(), 0.0);
        assert_eq!(mse_feature(&a, &b).unwrap(), 4.0);
        assert!(mse_feature(&a, &FeatureGrid::zeros(FeatureKind::MfccCmvn)).is_err());

        let z = Waveform::zeros(16000);
        let c = Waveform::new(vec![0.1; 16000]).unwrap();
        assert!((mse_waveform(&z, &c).unwrap() - 0.01).abs() < 1e-15);
        assert!(mse_waveform(&z, &Waveform::zeros(10)).is_err());
        let sine: Vec<f64> = (0..16000).map(|t| (2.0 * PI * 100.0 * t as f64 / 16000.0).sin()).collect();
        let neg: Vec<f64> = sine.iter().map(|v| -v).collect();
        let w = mse_waveform(&Waveform::new(sine).unwrap(), &Waveform::new(neg).unwrap()).unwrap();
        assert!((w - 2.0).abs() < 1e-9);
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 5.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[0.3, -0.2], &[0.9, -0.6]).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroNorm)));
    }

    #[test]
    fn parses_embedding_text() {
        let v = parse_embeddings("# header\n1.0, 2.5 -3\n\n4 5 6\n").unwrap();
        assert_eq!(v, vec![vec![1.0, 2.5, -3.0], vec![4.0, 5.0, 6.0]]);
        assert!(parse_embeddings("1.0 abc").is_err());
    }

    #[test]
    fn band_matrix_layout() {
        let obm = third_octave_bands(10_000, 512, 15, 150.0);
        assert_eq!(obm.dim(), (15, 257));
        // every band non-empty and bands do not overlap
        for b in 0..15 {
            assert!(obm.row(b).sum() >= 1.0);
        }
        for k in 0..257 {
            assert!(obm.column(k).sum() <= 1.0);
        }
        // lowest band: 150·2^(-1/6) ≈ 133.6 Hz → bin 7, 150·2^(1/6) ≈ 168.4 Hz → bin 9
        assert_eq!(obm.row(0).iter().position(|&v| v == 1.0), Some(7));
        assert_eq!(obm.row(0).sum(), 2.0);
    }

    #[test]
    fn resampler_passes_band_and_rejects_alias() {
        let rs = Resampler::new(16000, 10000);
        let sine = |f: f64| -> Vec<f64> { (0..16000).map(|t| (2.0 * PI * f * t as f64 / 16000.0).sin()).collect() };
        let rms = |v: &[f64]| (v[2000..8000].iter().map(|x| x * x).sum::<f64>() / 6000.0).sqrt();
        let pass = rs.process(&sine(1000.0));
        assert_eq!(pass.len(), 10000);
        assert!((rms(&pass) - 0.5f64.sqrt()).abs() < 0.01, "{}", rms(&pass));
        // 1 kHz stays aligned: compare against the ideal sample values
        for m in 2000..2010 {
            let ideal = (2.0 * PI * 1000.0 * m as f64 / 10000.0).sin();
            assert!((pass[m] - ideal).abs() < 1e-2);
        }
        let stop = rs.process(&sine(6500.0));
        assert!(rms(&stop) < 1e-3 * 0.5f64.sqrt() * 1.5, "{}", rms(&stop));
    }

    #[test]
    fn identical_signals_score_one() {
        let x = babble(1);
        assert!((stoi(&x, &x).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gain_invariance() {
        let x = babble(2);
        let n = noise(3, 16000, 0.02);
        let y = Waveform::new(x.samples().iter().zip(&n).map(|(a, b)| a + b).collect()).unwrap();
        let base = stoi(&x, &y).unwrap();
        for g in [0.5, 0.8, 1.7, 2.0] {
            assert!((stoi(&x, &y.scaled(g)).unwrap() - base).abs() < 1e-6);
        }
    }

    #[test]
    fn noise_scores_low() {
        let x = babble(4);
        let n = Waveform::new(noise(5, 16000, 1.0)).unwrap();
        let n = n.scaled(x.rms() / n.rms());
        let s = stoi(&x, &n).unwrap();
        assert!(s < 0.3, "{s}");
    }

    #[test]
    fn silence_rejected() {
        let z = Waveform::zeros(16000);
        let r = stoi(&z, &z);
        assert!(r.is_err());
    }
}
