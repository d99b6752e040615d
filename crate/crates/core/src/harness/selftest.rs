//! Quick oracle suite behind the `selftest` command: finite-difference
//! checks of both differentiation paths plus DSP and solver sanity checks,
//! all on synthetic data.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::synth::synthetic_utterance;
use crate::dsp::{build_mel_filterbank, extract_features, FeatureGrid, FeatureKind, FrontendConfig};
use crate::grad::{attack_objective, attack_objective_input_grad, param_gradients};
use crate::inversion::{gaussian_grid, restore_label};
use crate::metrics::stoi;
use crate::model::{
    activation_pattern, cross_entropy_loss, forward, init_params, Label, ModelParams, ParamSet, NUM_CLASSES,
};
use crate::recon::{db_to_power, griffin_lim_traced, nnls_solve, GriffinLimConfig, MagnitudeSpectrogram, NNLS_ITERATIONS};
use crate::dsp::{power_to_db, stft_power};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: usize,
    pub total: usize,
    pub detail: String,
}

impl Check {
    pub fn ok(&self) -> bool {
        self.passed == self.total
    }
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn random_triple(rng: &mut ChaCha8Rng) -> (ModelParams, FeatureGrid, Label) {
    let params = init_params(rng.random());
    let grid = gaussian_grid(rng.random(), 1.0, FeatureKind::MelDb);
    (params, grid, Label::new(rng.random_range(0..NUM_CLASSES)).expect("in range"))
}

fn with_param(params: &ModelParams, field: usize, idx: usize, delta: f64) -> ModelParams {
    let mut set: ParamSet = params.clone().into_inner();
    set.tensors_mut()[field][idx] += delta;
    ModelParams::new(set).expect("same shapes")
}

/// Central differences are only compared where both probes keep every ReLU
/// and pooling decision of the base point; other coordinates are redrawn.
const MAX_REDRAWS: usize = 50;

fn param_fd(seed: u64, triples: usize, per_field: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = 1e-6;
    let (mut passed, mut total, mut worst) = (0, 0, 0.0f64);
    for _ in 0..triples {
        let (params, grid, label) = random_triple(&mut rng);
        let grads = param_gradients(&params, &grid, label).expect("valid triple");
        let base = activation_pattern(&params, &grid).expect("valid");
        let loss = |p: &ModelParams| cross_entropy_loss(&forward(p, &grid).expect("valid"), label);
        for field in 0..8 {
            let len = grads.tensors()[field].len();
            for _ in 0..per_field {
                for _ in 0..MAX_REDRAWS {
                    let idx = rng.random_range(0..len);
                    let (up_p, down_p) = (with_param(&params, field, idx, eps), with_param(&params, field, idx, -eps));
                    let stable = [&up_p, &down_p]
                        .iter()
                        .all(|p| activation_pattern(p, &grid).is_ok_and(|a| a == base));
                    if !stable {
                        continue;
                    }
                    let fd = (loss(&up_p) - loss(&down_p)) / (2.0 * eps);
                    let e = rel_err(grads.tensors()[field][idx], fd, 1e-8);
                    worst = worst.max(e);
                    total += 1;
                    passed += usize::from(e <= 1e-4);
                    break;
                }
            }
        }
    }
    Check {
        name: "parameter gradient vs finite differences",
        passed,
        total,
        detail: format!("worst relative error {worst:.2e} (bound 1e-4)"),
    }
}

fn input_fd(seed: u64, triples: usize, cells: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = 1e-5;
    let (mut passed, mut total, mut worst) = (0, 0, 0.0f64);
    for _ in 0..triples {
        let (params, truth, label) = random_triple(&mut rng);
        let target = param_gradients(&params, &truth, label).expect("valid triple");
        let cand = gaussian_grid(rng.random(), 1.0, FeatureKind::MelDb);
        let base = activation_pattern(&params, &cand).expect("valid");
        let an = attack_objective_input_grad(&cand, &target, &params, label, 1e-3).expect("valid");
        for _ in 0..cells {
            for _ in 0..MAX_REDRAWS {
                let idx = rng.random_range(0..cand.as_slice().len());
                let mut up = cand.clone();
                up.as_mut_slice()[idx] += eps;
                let mut down = cand.clone();
                down.as_mut_slice()[idx] -= eps;
                let stable = [&up, &down]
                    .iter()
                    .all(|g| activation_pattern(&params, g).is_ok_and(|a| a == base));
                if !stable {
                    continue;
                }
                let fu = attack_objective(&up, &target, &params, label, 1e-3).expect("valid");
                let fdn = attack_objective(&down, &target, &params, label, 1e-3).expect("valid");
                let fd = (fu - fdn) / (2.0 * eps);
                let e = rel_err(an.values().as_slice().expect("standard layout")[idx], fd, 1e-8);
                worst = worst.max(e);
                total += 1;
                passed += usize::from(e <= 1e-3);
                break;
            }
        }
    }
    Check {
        name: "attack input gradient vs finite differences",
        passed,
        total,
        detail: format!("worst relative error {worst:.2e} (bound 1e-3)"),
    }
}

fn label_restoration(seed: u64, draws: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut passed = 0;
    for _ in 0..draws {
        let params = init_params(rng.random());
        let grid = gaussian_grid(rng.random(), 1.0, FeatureKind::MelDb);
        let label = Label::new(rng.random_range(0..NUM_CLASSES)).expect("in range");
        let g = param_gradients(&params, &grid, label).expect("valid");
        passed += usize::from(restore_label(&g) == label);
    }
    Check {
        name: "label restoration",
        passed,
        total: draws,
        detail: String::new(),
    }
}

fn dsp_checks() -> Vec<Check> {
    let mut out = Vec::new();
    let wave = synthetic_utterance(Label::new(0).expect("in range"));

    let s = stoi(&wave, &wave).unwrap_or(f64::NAN);
    out.push(Check {
        name: "stoi(x, x) = 1",
        passed: usize::from((s - 1.0).abs() <= 1e-6),
        total: 1,
        detail: format!("{s:.9}"),
    });

    let cfg = FrontendConfig::default();
    let fb = build_mel_filterbank(cfg.n_mels_spec, cfg.n_fft, cfg.fmin, cfg.fmax).expect("default filterbank");
    let power = stft_power(&wave, &cfg).expect("one second").values;
    let mel = fb.apply(&power).expect("shapes");
    let back = db_to_power(&power_to_db(&mel, cfg.db_floor));
    let worst = mel
        .iter()
        .zip(back.iter())
        .filter(|(m, _)| **m > cfg.db_floor)
        .map(|(m, b)| rel_err(*m, *b, 0.0))
        .fold(0.0, f64::max);
    out.push(Check {
        name: "dB round trip above the floor",
        passed: usize::from(worst < 1e-9),
        total: 1,
        detail: format!("worst relative error {worst:.2e}"),
    });

    let mut kinds_ok = 0;
    for kind in [FeatureKind::MelDb, FeatureKind::MelPower, FeatureKind::MfccCmvn] {
        let fe = FrontendConfig::with_kind(kind);
        let ok = extract_features(&wave, &fe).is_ok_and(|(g, _)| g.dim() == (32, 32) && g.kind() == kind);
        kinds_ok += usize::from(ok);
    }
    out.push(Check {
        name: "32x32 grids for every feature kind",
        passed: kinds_ok,
        total: 3,
        detail: String::new(),
    });

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let s0 = ndarray::Array2::from_shape_simple_fn((fb.n_bins(), 32), || rng.random_range(0.1..1.0));
    let m = fb.weights().dot(&s0);
    let (_, residuals) = nnls_solve(&m, fb.weights(), NNLS_ITERATIONS).expect("shapes");
    let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    let rel = residuals.last().copied().unwrap_or(f64::NAN) / norm;
    let monotone = residuals.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12));
    out.push(Check {
        name: "NNLS on a constructed instance",
        passed: usize::from(monotone) + usize::from(rel < 1e-3),
        total: 2,
        detail: format!("relative residual {rel:.2e}, monotone {monotone}"),
    });

    let glc = GriffinLimConfig::default();
    let mag = MagnitudeSpectrogram::new(power.mapv(f64::sqrt)).expect("finite");
    let gl_ok = griffin_lim_traced(&mag, &glc)
        .is_ok_and(|(_, trace)| trace.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9)));
    out.push(Check {
        name: "Griffin-Lim spectral convergence non-increasing",
        passed: usize::from(gl_ok),
        total: 1,
        detail: String::new(),
    });
    out
}

/// Runs the whole suite; `quick` trims the finite-difference sample sizes.
pub fn run_selftest(quick: bool) -> Vec<Check> {
    let (triples, per) = if quick { (2, 2) } else { (5, 5) };
    let mut checks = vec![
        param_fd(1, triples, per),
        input_fd(2, triples, per * 2),
        label_restoration(3, if quick { 20 } else { 100 }),
    ];
    checks.extend(dsp_checks());
    checks
}
