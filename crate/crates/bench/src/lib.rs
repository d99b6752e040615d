//! Inputs shared by the benchmarks.

use speechleak::harness::synth::synthetic_utterance;
use speechleak::inversion::gaussian_grid;
use speechleak::{extract_features, FeatureGrid, FeatureKind, FrontendConfig, Label, Waveform};

/// The synthetic "yes" utterance.
pub fn utterance() -> Waveform {
    synthetic_utterance(Label::from_word("yes").expect("vocabulary word"))
}

pub fn features(kind: FeatureKind) -> FeatureGrid {
    extract_features(&utterance(), &FrontendConfig::with_kind(kind))
        .expect("one-second utterance")
        .0
}

/// A candidate grid as the attack would start from it.
pub fn candidate(kind: FeatureKind) -> FeatureGrid {
    gaussian_grid(1, 0.1, kind)
}
