//! Centered short-time Fourier transform with reflection padding, and its
//! least-squares inverse.
//!
//! Spectra are laid out `bins × frames` with `n_fft / 2 + 1` one-sided bins.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Periodic Hamming window of length `n`.
pub fn hamming(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect()
}

/// Index into a signal of length `len` with numpy-style "reflect" extension
/// (edge sample not repeated). Requires `len >= 2`.
fn reflect_index(i: isize, len: usize) -> usize {
    let period = 2 * (len as isize - 1);
    let mut k = i.rem_euclid(period);
    if k >= len as isize {
        k = period - k;
    }
    k as usize
}

#[derive(Clone)]
pub struct Stft {
    n_fft: usize,
    hop: usize,
    /// Analysis/synthesis window, zero-padded and centered to `n_fft`.
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Stft {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Stft")
            .field("n_fft", &self.n_fft)
            .field("hop", &self.hop)
            .finish()
    }
}

impl Stft {
    pub fn new(n_fft: usize, win_length: usize, hop: usize) -> Result<Self> {
        if n_fft < 2 || win_length == 0 || win_length > n_fft || hop == 0 || hop > win_length {
            return Err(Error::Config(format!(
                "invalid stft geometry: n_fft={n_fft} win_length={win_length} hop={hop}"
            )));
        }
        let mut window = vec![0.0; n_fft];
        let offset = (n_fft - win_length) / 2;
        window[offset..offset + win_length].copy_from_slice(&hamming(win_length));
        let mut planner = FftPlanner::new();
        Ok(Self {
            n_fft,
            hop,
            window,
            fft: planner.plan_fft_forward(n_fft),
            ifft: planner.plan_fft_inverse(n_fft),
        })
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// Frames produced for a signal of `len` samples under centered framing.
    pub fn n_frames(&self, len: usize) -> usize {
        1 + len / self.hop
    }

    pub fn padded_len(&self, len: usize) -> usize {
        len + 2 * (self.n_fft / 2)
    }

    /// Reflection-pads `n_fft / 2` samples on each side.
    pub fn pad(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() < 2 {
            return Err(Error::SignalTooShort {
                len: x.len(),
                min: 2,
            });
        }
        let half = (self.n_fft / 2) as isize;
        Ok((-half..x.len() as isize + half)
            .map(|i| x[reflect_index(i, x.len())])
            .collect())
    }

    /// Complex STFT of `x` with centered framing.
    pub fn forward(&self, x: &[f64]) -> Result<Array2<Complex64>> {
        let padded = self.pad(x)?;
        Ok(self.forward_padded(&padded, self.n_frames(x.len())))
    }

    /// STFT of an already padded signal; frame `t` starts at `t * hop`.
    pub fn forward_padded(&self, padded: &[f64], n_frames: usize) -> Array2<Complex64> {
        let n_bins = self.n_bins();
        let mut out = Array2::zeros((n_bins, n_frames));
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        for t in 0..n_frames {
            let start = t * self.hop;
            for (k, b) in buf.iter_mut().enumerate() {
                let s = padded.get(start + k).copied().unwrap_or(0.0);
                *b = Complex64::new(s * self.window[k], 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (k, v) in buf.iter().take(n_bins).enumerate() {
                out[[k, t]] = *v;
            }
        }
        out
    }

    /// Sum of squared windows at every sample of a padded signal of
    /// `padded_len` samples covered by `n_frames` frames.
    pub fn window_square_sum(&self, n_frames: usize, padded_len: usize) -> Vec<f64> {
        let mut acc = vec![0.0; padded_len];
        for t in 0..n_frames {
            let start = t * self.hop;
            for (k, w) in self.window.iter().enumerate() {
                if let Some(a) = acc.get_mut(start + k) {
                    *a += w * w;
                }
            }
        }
        acc
    }

    /// Least-squares inverse STFT onto a padded-domain signal of
    /// `padded_len` samples. Samples not covered by any window are zero.
    pub fn inverse_padded(&self, spec: &Array2<Complex64>, padded_len: usize) -> Vec<f64> {
        let (n_bins, n_frames) = spec.dim();
        debug_assert_eq!(n_bins, self.n_bins());
        let mut acc = vec![0.0; padded_len];
        let mut buf = vec![Complex64::new(0.0, 0.0); self.n_fft];
        let mut scratch = vec![Complex64::new(0.0, 0.0); self.ifft.get_inplace_scratch_len()];
        let scale = 1.0 / self.n_fft as f64;
        for t in 0..n_frames {
            for k in 0..n_bins {
                buf[k] = spec[[k, t]];
            }
            // Hermitian completion; DC and Nyquist bins are forced real.
            buf[0].im = 0.0;
            if self.n_fft % 2 == 0 {
                buf[self.n_fft / 2].im = 0.0;
            }
            for k in n_bins..self.n_fft {
                buf[k] = buf[self.n_fft - k].conj();
            }
            self.ifft.process_with_scratch(&mut buf, &mut scratch);
            let start = t * self.hop;
            for (k, v) in buf.iter().enumerate() {
                if let Some(a) = acc.get_mut(start + k) {
                    *a += v.re * scale * self.window[k];
                }
            }
        }
        let norm = self.window_square_sum(n_frames, padded_len);
        for (a, n) in acc.iter_mut().zip(norm) {
            *a = if n > f64::MIN_POSITIVE { *a / n } else { 0.0 };
        }
        acc
    }

    /// Inverse STFT trimmed back to a signal of `len` samples.
    pub fn inverse(&self, spec: &Array2<Complex64>, len: usize) -> Result<Vec<f64>> {
        let padded_len = self.padded_len(len);
        let half = self.n_fft / 2;
        let norm = self.window_square_sum(spec.ncols(), padded_len);
        let uncovered = norm[half..half + len]
            .iter()
            .filter(|&&n| n <= f64::MIN_POSITIVE)
            .count();
        if uncovered > 0 {
            return Err(Error::ZeroWindowSum(uncovered));
        }
        let full = self.inverse_padded(spec, padded_len);
        Ok(full[half..half + len].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_matches_numpy_convention() {
        // np.pad([0,1,2,3], 3, mode="reflect") -> [3,2,1,0,1,2,3,2,1,0]
        let idx: Vec<usize> = (-3..7).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(idx, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }

    #[test]
    fn frame_count_for_one_second() {
        let stft = Stft::new(2048, 2048, 512).unwrap();
        assert_eq!(stft.n_frames(16000), 32);
        let x = vec![0.1; 16000];
        assert_eq!(stft.forward(&x).unwrap().dim(), (1025, 32));
    }

    #[test]
    fn inverse_recovers_signal() {
        let stft = Stft::new(2048, 2048, 512).unwrap();
        let x: Vec<f64> = (0..16000)
            .map(|i| ((i * 7919) % 101) as f64 / 50.0 - 1.0)
            .collect();
        let spec = stft.forward(&x).unwrap();
        let y = stft.inverse(&spec, x.len()).unwrap();
        let err = x
            .iter()
            .zip(&y)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-10, "max error {err}");
    }

    #[test]
    fn rejects_tiny_signal() {
        let stft = Stft::new(8, 8, 2).unwrap();
        assert!(matches!(
            stft.forward(&[1.0]),
            Err(Error::SignalTooShort { .. })
        ));
    }
}
