//! Synthetic ten-word mini corpus so smoke runs need no external download.
//!
//! Recipe for word index `k` (vocabulary order, 0..10), one second at 16 kHz:
//!
//! * a voiced burst from 0.25 s to 0.75 s under a Hann envelope, with
//!   fundamental `f0 = 110 + 15·k` Hz and harmonics `h = 1..=24` below 7 kHz;
//! * harmonic `h` has amplitude `(1/h) · (1 + 4·g(h·f0, F1) + 2·g(h·f0, F2))`,
//!   where `g(f, F) = exp(-((f − F)/150)²)`, `F1 = 300 + 60·k`,
//!   `F2 = 2400 − 120·k`;
//! * a slow 4 Hz vibrato of ±2 % on `f0`;
//! * white noise, uniform in ±0.003, seeded with `k`, over the whole clip;
//! * the sum is peak-normalized to 0.5 and written as 16-bit PCM.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::wav::write_wav;
use crate::dsp::{Waveform, NUM_SAMPLES, SAMPLE_RATE};
use crate::error::Result;
use crate::model::{Label, WORDS};

/// Waveform for one vocabulary word, following the module recipe.
pub fn synthetic_utterance(label: Label) -> Waveform {
    let k = label.index() as f64;
    let fs = SAMPLE_RATE as f64;
    let f0 = 110.0 + 15.0 * k;
    let (f1, f2) = (300.0 + 60.0 * k, 2400.0 - 120.0 * k);
    let g = |f: f64, centre: f64| (-((f - centre) / 150.0).powi(2)).exp();
    let (start, stop) = (NUM_SAMPLES / 4, 3 * NUM_SAMPLES / 4);

    let mut rng = ChaCha8Rng::seed_from_u64(label.index() as u64);
    let mut phase = 0.0;
    let mut out = vec![0.0; NUM_SAMPLES];
    for (t, y) in out.iter_mut().enumerate() {
        let tf = t as f64 / fs;
        let inst_f0 = f0 * (1.0 + 0.02 * (2.0 * PI * 4.0 * tf).sin());
        phase += 2.0 * PI * inst_f0 / fs;
        if (start..stop).contains(&t) {
            let env = (PI * (t - start) as f64 / (stop - start) as f64).sin().powi(2);
            let mut v = 0.0;
            for h in 1..=24 {
                let fh = h as f64 * f0;
                if fh >= 7000.0 {
                    break;
                }
                let amp = (1.0 + 4.0 * g(fh, f1) + 2.0 * g(fh, f2)) / h as f64;
                v += amp * (h as f64 * phase).sin();
            }
            *y = env * v;
        }
        *y += rng.random_range(-0.003..0.003);
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    out.iter_mut().for_each(|v| *v *= 0.5 / peak);
    Waveform::new(out).expect("finite synthetic samples")
}

/// Writes `<root>/<word>/synthetic.wav` for every vocabulary word.
pub fn write_synthetic_corpus(root: &Path) -> Result<()> {
    for (i, word) in WORDS.iter().enumerate() {
        let dir = root.join(word);
        fs::create_dir_all(&dir)?;
        let label = Label::new(i)?;
        write_wav(dir.join("synthetic.wav"), &synthetic_utterance(label))?;
    }
    Ok(())
}
