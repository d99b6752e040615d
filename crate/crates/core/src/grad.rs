//! Exact parameter gradients of the classification loss, the
//! gradient-matching attack objective, and the objective's gradient with
//! respect to the candidate feature grid.
//!
//! The input gradient differentiates through the parameter-gradient
//! computation itself, so it is a second-order quantity. It is hand-derived
//! for this architecture: the backward pass is written out explicitly and
//! then differentiated in reverse, with ReLU masks and max-pool selections
//! frozen from the forward pass (ReLU'(0) = 0, ReLU'' = 0).
//!
//! conv2 deltas are only ever nonzero at the unit each pooling window
//! selected, so they are stored per pooled unit (12544 entries) rather than
//! per conv2 output.

use std::ops::{Deref, DerefMut};

use ndarray::Array2;

use crate::dsp::{FeatureGrid, GRID_SIDE};
use crate::error::{Error, Result};
use crate::kernels::{
    axpy, axpy2, conv3x3, conv3x3_kernel_grad, conv3x3_transpose, dot, dot2,
    kernel_from_output_major, kernel_to_output_major, matvec, matvec_t,
};
use crate::model::{
    forward_cached, pattern_of, softmax, ActivationPattern, Activations, Label, ModelParams, ParamSet, C1, C2, FIELD_LENS, FLAT,
    HIDDEN, NUM_CLASSES, S0, S1, S2,
};

/// Gradients of the loss with respect to every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet(ParamSet);

impl GradientSet {
    pub fn new(set: ParamSet) -> Result<Self> {
        set.check_shapes()?;
        if !set.all_finite() {
            return Err(Error::NonFinite("gradient set"));
        }
        Ok(Self(set))
    }

    pub fn zeros() -> Self {
        Self(ParamSet::zeros())
    }

    pub fn into_inner(self) -> ParamSet {
        self.0
    }

    /// Sum over all tensors of squared element differences.
    ///
    /// Compensated: a plain running sum over 1.6M terms drifts by ~1e-13
    /// relative, which finite differences of the attack objective amplify
    /// into visible gradient error at small steps.
    pub fn squared_distance(&self, other: &GradientSet) -> f64 {
        let mut acc = LaneSum::default();
        for (a, b) in self.tensors().iter().zip(other.tensors().iter()) {
            acc.add_squared_diffs(a, b);
        }
        acc.total()
    }

    pub fn write_to<W: std::io::Write>(&self, w: W) -> Result<()> {
        self.0.write_to(w)
    }

    pub fn read_from<R: std::io::Read>(r: R) -> Result<Self> {
        Self::new(ParamSet::read_from(r)?)
    }
}

impl Deref for GradientSet {
    type Target = ParamSet;
    fn deref(&self) -> &ParamSet {
        &self.0
    }
}

impl DerefMut for GradientSet {
    fn deref_mut(&mut self) -> &mut ParamSet {
        &mut self.0
    }
}

/// Gradient of a scalar function with respect to a feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct InputGradient(pub Array2<f64>);

impl InputGradient {
    pub fn values(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// First-order backward pass state needed by the second-order pass.
struct Backward {
    probs: [f64; NUM_CLASSES],
    delta4: [f64; NUM_CLASSES],
    /// conv2 pre-activation deltas per pooled unit, zero where inactive.
    d2: Vec<f64>,
    delta1: Vec<f64>,
    /// fc1 weight gradient is materialized only when no target is streamed.
    grads: ParamSet,
    fc1_match: Option<Fc1Match>,
}

/// Contribution of the fc1 weight block `h δ3ᵀ` to the match term and to
/// the adjoints of `δ3` and `h`.
struct Fc1Match {
    value: f64,
    bar_delta3: Vec<f64>,
    bar_h: Vec<f64>,
}

/// Offset of pooled unit `k`'s conv2 input patch row `kh` in the `30×30×32`
/// activation, and the matching row in an output-major conv2 kernel.
#[inline]
fn patch_offsets(pos: u32, k: usize, kh: usize) -> (usize, usize) {
    let (i, j) = (pos as usize / S2, pos as usize % S2);
    let o = k % C2;
    (((i + kh) * S1 + j) * C1, (o * 9 + kh * 3) * C1)
}

const PATCH: usize = 3 * C1;

/// First-order backward pass. With `fc1_target`, the fc1 weight gradient
/// is compared against the target row by row instead of being stored.
fn backward(
    params: &ModelParams,
    acts: &Activations,
    label: Label,
    w2_om: &[f64],
    fc1_target: Option<&[f64]>,
) -> Backward {
    let probs = softmax(&acts.z4);
    let mut delta4 = probs;
    delta4[label.index()] -= 1.0;

    let [a, b, c, d, _, f, g, h] = FIELD_LENS.map(|n| vec![0.0; n]);
    let mut grads = ParamSet {
        conv1_w: a,
        conv1_b: b,
        conv2_w: c,
        conv2_b: d,
        fc1_w: if fc1_target.is_some() {
            Vec::new()
        } else {
            vec![0.0; FIELD_LENS[4]]
        },
        fc1_b: f,
        fc2_w: g,
        fc2_b: h,
    };
    grads.fc2_b.copy_from_slice(&delta4);
    for m in 0..HIDDEN {
        let a = acts.a3[m];
        for n in 0..NUM_CLASSES {
            grads.fc2_w[m * NUM_CLASSES + n] = a * delta4[n];
        }
    }

    let delta_a3 = matvec(&params.fc2_w, HIDDEN, NUM_CLASSES, &delta4);
    let delta3: Vec<f64> = delta_a3
        .iter()
        .zip(&acts.z3)
        .map(|(&d, &z)| if z > 0.0 { d } else { 0.0 })
        .collect();
    grads.fc1_b.copy_from_slice(&delta3);

    // δh = W3 δ3, fused with the fc1 weight gradient h δ3ᵀ.
    let mut delta_h = vec![0.0; FLAT];
    let fc1_match = match fc1_target {
        None => {
            for k in 0..FLAT {
                let row = k * HIDDEN..(k + 1) * HIDDEN;
                delta_h[k] = dot(&params.fc1_w[row.clone()], &delta3);
                let hk = acts.h[k];
                if hk != 0.0 {
                    axpy(&mut grads.fc1_w[row], hk, &delta3);
                }
            }
            None
        }
        Some(target) => {
            let mut m = Fc1Match {
                value: 0.0,
                bar_delta3: vec![0.0; HIDDEN],
                bar_h: vec![0.0; FLAT],
            };
            let mut diff = [0.0; HIDDEN];
            for k in 0..FLAT {
                let row = k * HIDDEN..(k + 1) * HIDDEN;
                delta_h[k] = dot(&params.fc1_w[row.clone()], &delta3);
                let hk = acts.h[k];
                for ((d, &t), &g) in diff.iter_mut().zip(&target[row]).zip(&delta3) {
                    *d = hk * g - t;
                }
                m.value += dot(&diff, &diff);
                if hk != 0.0 {
                    axpy(&mut m.bar_delta3, 2.0 * hk, &diff);
                }
                m.bar_h[k] = 2.0 * dot(&diff, &delta3);
            }
            Some(m)
        }
    };

    let d2: Vec<f64> = delta_h
        .iter()
        .zip(&acts.pool_active)
        .map(|(&d, &active)| if active { d } else { 0.0 })
        .collect();

    let mut g2_om = vec![0.0; 9 * C1 * C2];
    let mut delta_a1 = vec![0.0; S1 * S1 * C1];
    for (k, &d) in d2.iter().enumerate() {
        if d == 0.0 {
            continue;
        }
        grads.conv2_b[k % C2] += d;
        for kh in 0..3 {
            let (a, w) = patch_offsets(acts.pool_pos[k], k, kh);
            axpy(&mut delta_a1[a..a + PATCH], d, &w2_om[w..w + PATCH]);
            axpy(&mut g2_om[w..w + PATCH], d, &acts.a1[a..a + PATCH]);
        }
    }
    grads.conv2_w = kernel_from_output_major(&g2_om, C1, C2);

    let delta1: Vec<f64> = delta_a1
        .iter()
        .zip(&acts.z1)
        .map(|(&d, &z)| if z > 0.0 { d } else { 0.0 })
        .collect();
    grads.conv1_w = conv3x3_kernel_grad(&acts.x, S0, S0, 1, &delta1, C1);
    for (idx, &d) in delta1.iter().enumerate() {
        grads.conv1_b[idx % C1] += d;
    }

    Backward {
        probs,
        delta4,
        d2,
        delta1,
        grads,
        fc1_match,
    }
}

fn check_activations(acts: &Activations) -> Result<()> {
    if acts.z4.iter().all(|v| v.is_finite()) && acts.h.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("network activations"))
    }
}

/// Exact gradients of `cross_entropy_loss(forward(params, grid), label)`.
pub fn param_gradients(
    params: &ModelParams,
    grid: &FeatureGrid,
    label: Label,
) -> Result<GradientSet> {
    Ok(gradients_and_activations(params, grid, label)?.0)
}

fn gradients_and_activations(
    params: &ModelParams,
    grid: &FeatureGrid,
    label: Label,
) -> Result<(GradientSet, Activations)> {
    grid.check_model_shape()?;
    let acts = forward_cached(params, grid.as_slice());
    check_activations(&acts)?;
    let w2_om = kernel_to_output_major(&params.conv2_w, C1, C2);
    let grads = GradientSet::new(backward(params, &acts, label, &w2_om, None).grads)?;
    Ok((grads, acts))
}

/// Anisotropic total variation: absolute forward differences along rows
/// plus along columns, no wraparound.
pub fn tv_norm(grid: &FeatureGrid) -> f64 {
    tv_of(grid.values())
}

pub(crate) fn tv_of(x: &Array2<f64>) -> f64 {
    let (r, c) = x.dim();
    let mut acc = 0.0;
    for i in 0..r {
        for j in 0..c {
            if j + 1 < c {
                acc += (x[[i, j + 1]] - x[[i, j]]).abs();
            }
            if i + 1 < r {
                acc += (x[[i + 1, j]] - x[[i, j]]).abs();
            }
        }
    }
    acc
}

/// Subgradient of [`tv_norm`], using `sign(0) = 0`.
pub fn tv_subgradient(x: &Array2<f64>) -> Array2<f64> {
    let (r, c) = x.dim();
    let mut g = Array2::zeros((r, c));
    let sign = |d: f64| {
        if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    for i in 0..r {
        for j in 0..c {
            if j + 1 < c {
                let s = sign(x[[i, j + 1]] - x[[i, j]]);
                g[[i, j + 1]] += s;
                g[[i, j]] -= s;
            }
            if i + 1 < r {
                let s = sign(x[[i + 1, j]] - x[[i, j]]);
                g[[i + 1, j]] += s;
                g[[i, j]] -= s;
            }
        }
    }
    g
}

fn check_objective_inputs(
    candidate: &FeatureGrid,
    target: &GradientSet,
    lambda: f64,
) -> Result<()> {
    candidate.check_model_shape()?;
    target.check_shapes()?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!(
            "lambda must be finite and >= 0, got {lambda}"
        )));
    }
    Ok(())
}

/// Compensated (TwoSum) accumulation in four independent lanes, so the
/// inner loop has no branches and no serial dependency between lanes.
#[derive(Default)]
struct LaneSum {
    sum: [f64; 4],
    carry: [f64; 4],
}

impl LaneSum {
    #[inline]
    fn push(&mut self, lane: usize, v: f64) {
        let s = self.sum[lane];
        let t = s + v;
        let bp = t - s;
        self.carry[lane] += (s - (t - bp)) + (v - bp);
        self.sum[lane] = t;
    }

    fn add_squared_diffs(&mut self, a: &[f64], b: &[f64]) {
        let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
        let (ra, rb) = (ca.remainder(), cb.remainder());
        for (x, y) in ca.zip(cb) {
            for lane in 0..4 {
                let d = x[lane] - y[lane];
                self.push(lane, d * d);
            }
        }
        for (lane, (x, y)) in ra.iter().zip(rb).enumerate() {
            self.push(lane, (x - y) * (x - y));
        }
    }

    fn total(&self) -> f64 {
        compensated_sum(self.sum.iter().chain(&self.carry).copied())
    }
}

/// Neumaier's compensated summation.
pub(crate) fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let (mut sum, mut carry) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        carry += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + carry
}

/// `‖target − ∇θ L(f(candidate), label)‖² + λ·TV(candidate)`, computed
/// from fully materialized parameter gradients.
pub fn attack_objective(
    candidate: &FeatureGrid,
    target: &GradientSet,
    params: &ModelParams,
    label: Label,
    lambda: f64,
) -> Result<f64> {
    Ok(attack_objective_with_pattern(candidate, target, params, label, lambda)?.0)
}

/// [`attack_objective`] together with the activation pattern of the
/// candidate, from one forward pass. Finite-difference checks use the
/// pattern to confirm that both sides of a step share a linear region.
pub fn attack_objective_with_pattern(
    candidate: &FeatureGrid,
    target: &GradientSet,
    params: &ModelParams,
    label: Label,
    lambda: f64,
) -> Result<(f64, ActivationPattern)> {
    check_objective_inputs(candidate, target, lambda)?;
    let (g, acts) = gradients_and_activations(params, candidate, label)?;
    Ok((g.squared_distance(target) + lambda * tv_norm(candidate), pattern_of(&acts)))
}

/// Gradient of [`attack_objective`] with respect to every candidate cell.
pub fn attack_objective_input_grad(
    candidate: &FeatureGrid,
    target: &GradientSet,
    params: &ModelParams,
    label: Label,
    lambda: f64,
) -> Result<InputGradient> {
    Ok(objective_and_input_grad(candidate, target, params, label, lambda)?.1)
}

/// Value and input gradient of the attack objective in one pass. The fc1
/// weight gradient is never materialized; its mismatch is streamed row by
/// row against the target.
pub fn objective_and_input_grad(
    candidate: &FeatureGrid,
    target: &GradientSet,
    params: &ModelParams,
    label: Label,
    lambda: f64,
) -> Result<(f64, InputGradient)> {
    check_objective_inputs(candidate, target, lambda)?;
    let acts = forward_cached(params, candidate.as_slice());
    check_activations(&acts)?;
    let w2_om = kernel_to_output_major(&params.conv2_w, C1, C2);
    let bw = backward(params, &acts, label, &w2_om, Some(&target.fc1_w));
    let g = &bw.grads;

    // Adjoints of each parameter gradient: 2 (g − target).
    let mut value = 0.0;
    let mut adjoint = |g: &[f64], t: &[f64]| -> Vec<f64> {
        g.iter()
            .zip(t)
            .map(|(a, b)| {
                let d = a - b;
                value += d * d;
                2.0 * d
            })
            .collect()
    };
    let bar_w1 = adjoint(&g.conv1_w, &target.conv1_w);
    let bar_b1 = adjoint(&g.conv1_b, &target.conv1_b);
    let bar_w2 = adjoint(&g.conv2_w, &target.conv2_w);
    let bar_b2 = adjoint(&g.conv2_b, &target.conv2_b);
    let bar_b3 = adjoint(&g.fc1_b, &target.fc1_b);
    let bar_w4 = adjoint(&g.fc2_w, &target.fc2_w);
    let bar_b4 = adjoint(&g.fc2_b, &target.fc2_b);
    let bar_w2_om = kernel_to_output_major(&bar_w2, C1, C2);

    let fc1 = bw.fc1_match.expect("streamed fc1 match");
    value += fc1.value;
    let mut bar_delta3 = bar_b3;
    axpy(&mut bar_delta3, 1.0, &fc1.bar_delta3);
    let mut bar_h = fc1.bar_h;

    let mut bar_x = conv3x3_transpose(&bw.delta1, S1, S1, C1, &bar_w1, 1);
    let bar_delta1 = conv3x3(&acts.x, S0, S0, 1, &bar_w1, Some(&bar_b1), C1);
    let bar_delta_a1: Vec<f64> = bar_delta1
        .iter()
        .zip(&acts.z1)
        .map(|(&d, &z)| if z > 0.0 { d } else { 0.0 })
        .collect();

    // Adjoint of the conv2 deltas, gathered at the pooled units.
    let mut bar_delta_h = vec![0.0; FLAT];
    for k in 0..FLAT {
        if !acts.pool_active[k] {
            continue;
        }
        let mut acc = bar_b2[k % C2];
        for kh in 0..3 {
            let (a, w) = patch_offsets(acts.pool_pos[k], k, kh);
            acc += dot2(
                &bar_delta_a1[a..a + PATCH],
                &w2_om[w..w + PATCH],
                &acts.a1[a..a + PATCH],
                &bar_w2_om[w..w + PATCH],
            );
        }
        bar_delta_h[k] = acc;
    }

    let back = matvec_t(&params.fc1_w, FLAT, HIDDEN, &bar_delta_h);
    axpy(&mut bar_delta3, 1.0, &back);
    let bar_delta_a3: Vec<f64> = bar_delta3
        .iter()
        .zip(&acts.z3)
        .map(|(&d, &z)| if z > 0.0 { d } else { 0.0 })
        .collect();

    let mut bar_delta4 = [0.0; NUM_CLASSES];
    let from_w4 = matvec_t(&params.fc2_w, HIDDEN, NUM_CLASSES, &bar_delta_a3);
    let from_gw4 = matvec_t(&bar_w4, HIDDEN, NUM_CLASSES, &acts.a3);
    for n in 0..NUM_CLASSES {
        bar_delta4[n] = from_w4[n] + from_gw4[n] + bar_b4[n];
    }
    let mut bar_a3 = matvec(&bar_w4, HIDDEN, NUM_CLASSES, &bw.delta4);

    let s = &bw.probs;
    let s_dot: f64 = s.iter().zip(&bar_delta4).map(|(a, b)| a * b).sum();
    let bar_z4: Vec<f64> = (0..NUM_CLASSES)
        .map(|n| s[n] * (bar_delta4[n] - s_dot))
        .collect();
    axpy(
        &mut bar_a3,
        1.0,
        &matvec(&params.fc2_w, HIDDEN, NUM_CLASSES, &bar_z4),
    );
    let bar_z3: Vec<f64> = bar_a3
        .iter()
        .zip(&acts.z3)
        .map(|(&d, &z)| if z > 0.0 { d } else { 0.0 })
        .collect();
    axpy(
        &mut bar_h,
        1.0,
        &matvec(&params.fc1_w, FLAT, HIDDEN, &bar_z3),
    );

    let mut bar_a1 = vec![0.0; S1 * S1 * C1];
    for k in 0..FLAT {
        if !acts.pool_active[k] {
            continue;
        }
        let (d, zb) = (bw.d2[k], bar_h[k]);
        for kh in 0..3 {
            let (a, w) = patch_offsets(acts.pool_pos[k], k, kh);
            axpy2(
                &mut bar_a1[a..a + PATCH],
                d,
                &bar_w2_om[w..w + PATCH],
                zb,
                &w2_om[w..w + PATCH],
            );
        }
    }
    let bar_z1: Vec<f64> = bar_a1
        .iter()
        .zip(&acts.z1)
        .map(|(&d, &z)| if z > 0.0 { d } else { 0.0 })
        .collect();
    axpy(
        &mut bar_x,
        1.0,
        &conv3x3_transpose(&bar_z1, S1, S1, C1, &params.conv1_w, 1),
    );

    let mut grad =
        Array2::from_shape_vec((GRID_SIDE, GRID_SIDE), bar_x).expect("32x32 input gradient");
    if lambda > 0.0 {
        grad.scaled_add(lambda, &tv_subgradient(candidate.values()));
        value += lambda * tv_norm(candidate);
    }
    let grad = InputGradient(grad);
    if !value.is_finite() || !grad.is_finite() {
        return Err(Error::NonFinite("attack objective"));
    }
    Ok((value, grad))
}

/// Central differences `(f(x + εe) − f(x − εe)) / 2ε` for every cell.
pub fn finite_diff_grad<F>(mut f: F, grid: &FeatureGrid, epsilon: f64) -> Result<InputGradient>
where
    F: FnMut(&FeatureGrid) -> f64,
{
    if !(epsilon > 0.0) {
        return Err(Error::Config(
            "finite-difference step must be positive".into(),
        ));
    }
    let mut probe = grid.clone();
    let mut out = Array2::zeros(grid.dim());
    for idx in 0..grid.as_slice().len() {
        let orig = probe.as_slice()[idx];
        probe.as_mut_slice()[idx] = orig + epsilon;
        let up = f(&probe);
        probe.as_mut_slice()[idx] = orig - epsilon;
        let down = f(&probe);
        probe.as_mut_slice()[idx] = orig;
        out.as_slice_mut().expect("standard layout")[idx] = (up - down) / (2.0 * epsilon);
    }
    Ok(InputGradient(out))
}
