//! STOI against values produced by the `pystoi` reference implementation
//! (pystoi 0.4, `stoi(x, y, 16000)`, non-extended) on the bundled speech
//! clips. Two degradations with closed-form definitions are used so the
//! degraded signals can be rebuilt here bit-for-bit:
//!
//! * `lowpass`: 9-tap moving average, zero-padded, centred
//!   (`numpy.convolve(x, ones(9) / 9, "same")`);
//! * `shift`: circular shift by 400 samples, then gain 0.5
//!   (`numpy.roll(x, 400) * 0.5`).

use std::path::PathBuf;

use speechleak::harness::load_wav;
use speechleak::{stoi, Waveform};

const REFERENCE: [(&str, f64, f64); 20] = [
    ("down/cards004_003600.wav", 0.994300042030, 0.803326152541),
    ("down/librivox_0890_033600.wav", 0.983318668277, 0.621770846842),
    ("go/librivox_0870_012000.wav", 0.987615819546, 0.658874274298),
    ("go/librivox_0930_021600.wav", 0.982198582168, 0.578240597683),
    ("left/cards005_003200.wav", 0.991341980808, 0.700329361246),
    ("left/librivox_0920_003600.wav", 0.977805865320, 0.604842935410),
    ("no/cards002_002000.wav", 0.984850414749, 0.736548784670),
    ("no/librivox_0870_050400.wav", 0.984620826263, 0.678374519638),
    ("off/arctic_a0009_003600.wav", 0.985083524451, 0.690512399840),
    ("off/librivox_0880_025600.wav", 0.989691972042, 0.647209381881),
    ("on/arctic_a0007_025600.wav", 0.987246845635, 0.488949116331),
    ("on/librivox_0880_006800.wav", 0.989413123214, 0.615162174776),
    ("right/arctic_a0007_006800.wav", 0.993211176703, 0.568389882362),
    ("right/librivox_0920_019600.wav", 0.984459508665, 0.639885019144),
    ("stop/arctic_a0009_021200.wav", 0.982962495106, 0.579854865170),
    ("stop/librivox_0930_004800.wav", 0.981495781374, 0.484340471002),
    ("up/cards003_002400.wav", 0.995179203366, 0.576629541031),
    ("up/librivox_0890_012000.wav", 0.986026064641, 0.593591796912),
    ("yes/cards001_000800.wav", 0.994281652341, 0.620042230676),
    ("yes/librivox_0870_028000.wav", 0.990826869014, 0.627729583386),
];

/// The reference values are printed with 12 decimals; the remaining gap
/// comes from summation order in the resampler and FFTs.
const TOLERANCE: f64 = 1e-6;

fn fixture(rel: &str) -> Waveform {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures/speech").join(rel);
    load_wav(&path).unwrap()
}

fn moving_average_9(x: &[f64]) -> Vec<f64> {
    let n = x.len() as isize;
    (0..n)
        .map(|i| (i - 4..=i + 4).filter(|j| (0..n).contains(j)).map(|j| x[j as usize]).sum::<f64>() / 9.0)
        .collect()
}

fn roll_half(x: &[f64], shift: usize) -> Vec<f64> {
    let n = x.len();
    (0..n).map(|i| 0.5 * x[(i + n - shift) % n]).collect()
}

#[test]
fn lowpass_matches_pystoi() {
    for (rel, expected, _) in REFERENCE {
        let x = fixture(rel);
        let y = Waveform::new(moving_average_9(x.samples())).unwrap();
        let got = stoi(&x, &y).unwrap();
        assert!((got - expected).abs() < TOLERANCE, "{rel}: {got:.12} vs {expected:.12}");
    }
}

#[test]
fn shifted_half_gain_matches_pystoi() {
    for (rel, _, expected) in REFERENCE {
        let x = fixture(rel);
        let y = Waveform::new(roll_half(x.samples(), 400)).unwrap();
        let got = stoi(&x, &y).unwrap();
        assert!((got - expected).abs() < TOLERANCE, "{rel}: {got:.12} vs {expected:.12}");
    }
}
