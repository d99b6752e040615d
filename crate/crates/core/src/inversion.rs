//! Feature reconstruction from a shared gradient: analytic label restoration
//! followed by Adam on the gradient-matching objective, over several
//! independently initialized trials.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::{FeatureGrid, FeatureKind, GRID_SIDE};
use crate::error::{Error, Result};
use crate::grad::{objective_and_input_grad, GradientSet, InputGradient};
use crate::model::{Label, ModelParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Weight of the total-variation prior.
    pub lambda: f64,
    pub trials: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Standard deviation of the Gaussian initialization. The default of
    /// 0.1 matters: unit-variance starts leave border regions of the grid
    /// stuck in poor local minima of the matching objective.
    pub init_scale: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            iterations: 8000,
            learning_rate: 0.01,
            lambda: 0.001,
            trials: 2,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            init_scale: 0.1,
        }
    }
}

impl AttackConfig {
    /// Zero iterations is accepted: the attack then just scores its random
    /// initialization, which keeps smoke runs of the full pipeline cheap.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.trials == 0 {
            return bad("trials must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be non-negative");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_epsilon > 0.0) {
            return bad("adam epsilon must be positive");
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return bad("init scale must be non-negative");
        }
        Ok(())
    }
}

/// Adam moment estimates for one candidate grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Array2<f64>,
    pub v: Array2<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(dim: (usize, usize)) -> Self {
        Self {
            m: Array2::zeros(dim),
            v: Array2::zeros(dim),
            step: 0,
        }
    }

    /// One bias-corrected Adam step, in place.
    pub fn apply(&mut self, grid: &mut FeatureGrid, gradient: &InputGradient, cfg: &AttackConfig) -> Result<()> {
        let g = gradient.values();
        if g.dim() != grid.dim() || self.m.dim() != grid.dim() || self.v.dim() != grid.dim() {
            return Err(Error::shape(
                "adam update",
                format!("{:?}", grid.dim()),
                format!("{:?}", g.dim()),
            ));
        }
        if !gradient.is_finite() {
            return Err(Error::NonFinite("adam gradient"));
        }
        self.step += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powf(self.step as f64);
        let c2 = 1.0 - b2.powf(self.step as f64);
        let x = grid.values_mut();
        ndarray::Zip::from(x)
            .and(&mut self.m)
            .and(&mut self.v)
            .and(g)
            .for_each(|x, m, v, &g| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *x -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_epsilon);
            });
        Ok(())
    }
}

/// Functional form of [`AdamState::apply`].
pub fn adam_update(
    state: &AdamState,
    grid: &FeatureGrid,
    gradient: &InputGradient,
    cfg: &AttackConfig,
) -> Result<(AdamState, FeatureGrid)> {
    let (mut state, mut grid) = (state.clone(), grid.clone());
    state.apply(&mut grid, gradient, cfg)?;
    Ok((state, grid))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub grid: FeatureGrid,
    pub label: Label,
    /// Objective at `grid`; equal to the last trace entry when iterations > 0.
    pub final_objective: f64,
    /// Objective after each Adam step of the winning trial.
    pub trace: Vec<f64>,
    pub trial: usize,
    /// Final objective per trial, `None` for diverged trials.
    pub trial_objectives: Vec<Option<f64>>,
}

/// Label of a single-sample gradient: the final-layer bias gradient is
/// `softmax − onehot`, so the true class is its only negative entry.
pub fn restore_label(target: &GradientSet) -> Label {
    let g = &target.fc2_b;
    let negatives = g.iter().filter(|&&v| v < 0.0).count();
    if negatives > 1 {
        log::warn!("{negatives} negative output-bias gradients; input is probably not a single-sample gradient");
    }
    let idx = g
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v < g[best] { i } else { best });
    Label::new(idx).expect("output layer has NUM_CLASSES entries")
}

/// Standard-normal grid scaled by `scale`, row-major draw order.
pub fn gaussian_grid(seed: u64, scale: f64, kind: FeatureKind) -> FeatureGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = Array2::from_shape_simple_fn((GRID_SIDE, GRID_SIDE), || {
        let z: f64 = StandardNormal.sample(&mut rng);
        scale * z
    });
    FeatureGrid::new(values, kind).expect("finite gaussian grid")
}

struct Trial {
    grid: FeatureGrid,
    objective: f64,
    trace: Vec<f64>,
}

fn run_trial(
    target: &GradientSet,
    params: &ModelParams,
    label: Label,
    kind: FeatureKind,
    cfg: &AttackConfig,
    trial: usize,
) -> Result<Trial> {
    let mut grid = gaussian_grid(cfg.seed.wrapping_add(trial as u64), cfg.init_scale, kind);
    let mut state = AdamState::new(grid.dim());
    let mut trace = Vec::with_capacity(cfg.iterations);
    let (mut value, mut grad) = objective_and_input_grad(&grid, target, params, label, cfg.lambda)?;
    for it in 0..cfg.iterations {
        state.apply(&mut grid, &grad, cfg)?;
        (value, grad) = objective_and_input_grad(&grid, target, params, label, cfg.lambda)?;
        trace.push(value);
        if it % 1000 == 999 {
            log::debug!("trial {trial} iteration {} objective {value:.6e}", it + 1);
        }
    }
    Ok(Trial {
        grid,
        objective: value,
        trace,
    })
}

/// Recovers a feature grid whose gradient matches `target`.
///
/// Every trial starts from its own Gaussian draw (seed `cfg.seed + t`);
/// trials whose objective becomes non-finite are dropped, and the trial
/// with the lowest final objective wins (ties go to the lower index).
pub fn invert_features(
    target: &GradientSet,
    params: &ModelParams,
    kind: FeatureKind,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    cfg.validate()?;
    target.check_shapes()?;
    let label = restore_label(target);
    let outcomes: Vec<Result<Trial>> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| run_trial(target, params, label, kind, cfg, t))
        .collect();

    let mut best: Option<(usize, Trial)> = None;
    let mut trial_objectives = Vec::with_capacity(outcomes.len());
    let mut failures = Vec::new();
    for (t, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(trial) => {
                trial_objectives.push(Some(trial.objective));
                if best.as_ref().is_none_or(|(_, b)| trial.objective < b.objective) {
                    best = Some((t, trial));
                }
            }
            Err(e) => {
                log::warn!("attack trial {t} aborted: {e}");
                trial_objectives.push(None);
                failures.push(format!("trial {t}: {e}"));
            }
        }
    }
    let (trial, won) = best.ok_or_else(|| Error::AttackFailed(failures.join("; ")))?;
    Ok(AttackResult {
        grid: won.grid,
        label,
        final_objective: won.objective,
        trace: won.trace,
        trial,
        trial_objectives,
    })
}
