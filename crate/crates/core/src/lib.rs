//! Gradient-inversion attack on a small keyword-spotting CNN.
//!
//! Pipeline: waveform → log-mel or MFCC feature grid → simulated client
//! gradient → feature reconstruction by gradient matching → waveform
//! reconstruction (mel inversion + Griffin-Lim) → quality metrics.

pub mod dsp;
pub mod error;
pub mod grad;
pub mod harness;
pub mod inversion;
mod kernels;
pub mod metrics;
pub mod model;
pub mod recon;
pub mod stft;

pub use dsp::{extract_features, FeatureGrid, FeatureKind, FrontendConfig, Waveform};
pub use error::{Error, Result};
pub use grad::{
    attack_objective, attack_objective_input_grad, attack_objective_with_pattern, finite_diff_grad, objective_and_input_grad,
    param_gradients, tv_norm, GradientSet, InputGradient,
};
pub use model::{
    activation_pattern, cross_entropy_loss, forward, forward_with_pattern, init_params, kink_margin, ActivationPattern,
    Label, Logits, ModelParams, ParamSet, PARAM_COUNT,
};
pub use inversion::{adam_update, invert_features, restore_label, AdamState, AttackConfig, AttackResult};
pub use metrics::{cosine_similarity, mse_feature, mse_waveform, stoi, ReconstructionReport};
pub use recon::{
    db_to_power, griffin_lim, mel_to_waveform, mfcc_to_mel, mfcc_to_waveform, nnls_mel_to_stft,
    GriffinLimConfig, MagnitudeSpectrogram, PhaseInit, StatsMode,
};
