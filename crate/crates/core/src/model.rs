//! Keyword-spotting CNN: two 3×3 convolutions, 2×2 max-pooling and two
//! fully connected layers, on a 32×32 single-channel feature grid.
//!
//! Layout conventions (all row-major):
//!
//! | tensor    | shape                       |
//! |-----------|-----------------------------|
//! | `conv1_w` | `[3][3][1][32]`             |
//! | `conv2_w` | `[3][3][32][64]`            |
//! | `fc1_w`   | `[12544][128]`              |
//! | `fc2_w`   | `[128][10]`                 |
//!
//! Activations are channel-last; the flatten after pooling walks
//! `(row, col, channel)` with the channel fastest.

use std::io::{Read, Write};
use std::ops::{Deref, DerefMut};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{FeatureGrid, GRID_SIDE};
use crate::error::{Error, Result};
use crate::kernels::{conv3x3, matvec_t};

pub const C1: usize = 32;
pub const C2: usize = 64;
pub const S0: usize = GRID_SIDE;
pub const S1: usize = S0 - 2;
pub const S2: usize = S1 - 2;
pub const SP: usize = S2 / 2;
pub const FLAT: usize = SP * SP * C2;
pub const HIDDEN: usize = 128;
pub const NUM_CLASSES: usize = 10;

pub const FIELD_NAMES: [&str; 8] = [
    "conv1_w", "conv1_b", "conv2_w", "conv2_b", "fc1_w", "fc1_b", "fc2_w", "fc2_b",
];
pub const FIELD_LENS: [usize; 8] = [
    9 * C1,
    C1,
    9 * C1 * C2,
    C2,
    FLAT * HIDDEN,
    HIDDEN,
    HIDDEN * NUM_CLASSES,
    NUM_CLASSES,
];
pub const PARAM_COUNT: usize = 1_625_866;
const _: () = assert!(
    9 * C1 + C1 + 9 * C1 * C2 + C2 + FLAT * HIDDEN + HIDDEN + HIDDEN * NUM_CLASSES + NUM_CLASSES
        == PARAM_COUNT
);

pub const WORDS: [&str; NUM_CLASSES] = [
    "yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go",
];

/// One of the ten keyword classes; serialized as its word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Label(u8);

impl From<Label> for String {
    fn from(l: Label) -> String {
        l.word().to_string()
    }
}

impl TryFrom<String> for Label {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        Label::from_word(&s).ok_or_else(|| Error::Format(format!("unknown word label {s:?}")))
    }
}

impl Label {
    pub fn new(index: usize) -> Result<Self> {
        if index < NUM_CLASSES {
            Ok(Label(index as u8))
        } else {
            Err(Error::Config(format!("label index {index} out of range")))
        }
    }

    pub fn from_word(word: &str) -> Option<Self> {
        WORDS
            .iter()
            .position(|w| *w == word)
            .map(|i| Label(i as u8))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn word(self) -> &'static str {
        WORDS[self.index()]
    }
}

/// One tensor per layer field, shapes fixed by [`FIELD_LENS`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub conv1_w: Vec<f64>,
    pub conv1_b: Vec<f64>,
    pub conv2_w: Vec<f64>,
    pub conv2_b: Vec<f64>,
    pub fc1_w: Vec<f64>,
    pub fc1_b: Vec<f64>,
    pub fc2_w: Vec<f64>,
    pub fc2_b: Vec<f64>,
}

impl ParamSet {
    pub fn zeros() -> Self {
        let [a, b, c, d, e, f, g, h] = FIELD_LENS.map(|n| vec![0.0; n]);
        Self {
            conv1_w: a,
            conv1_b: b,
            conv2_w: c,
            conv2_b: d,
            fc1_w: e,
            fc1_b: f,
            fc2_w: g,
            fc2_b: h,
        }
    }

    pub fn tensors(&self) -> [&[f64]; 8] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.fc1_w,
            &self.fc1_b,
            &self.fc2_w,
            &self.fc2_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 8] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.fc1_w,
            &mut self.fc1_b,
            &mut self.fc2_w,
            &mut self.fc2_b,
        ]
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn check_shapes(&self) -> Result<()> {
        for ((t, &n), name) in self.tensors().iter().zip(&FIELD_LENS).zip(&FIELD_NAMES) {
            if t.len() != n {
                return Err(Error::shape(
                    "parameter tensor",
                    format!("{name}: {n}"),
                    t.len(),
                ));
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.len() != PARAM_COUNT {
            return Err(Error::shape("flat parameters", PARAM_COUNT, flat.len()));
        }
        let mut out = Self::zeros();
        let mut offset = 0;
        for t in out.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(out)
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum()
    }

    const MAGIC: &'static [u8; 4] = b"SLKP";
    const VERSION: u32 = 1;

    /// Little-endian blob: magic, `u32` version, `u64` count, then every
    /// value as `f64` in field order.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&Self::VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.len() * 8);
        for v in self.tensors().iter().flat_map(|t| t.iter()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut head = [0u8; 16];
        r.read_exact(&mut head)?;
        if &head[..4] != Self::MAGIC {
            return Err(Error::Format("bad parameter magic".into()));
        }
        let version = u32::from_le_bytes(head[4..8].try_into().unwrap());
        if version != Self::VERSION {
            return Err(Error::Format(format!(
                "unsupported parameter version {version}"
            )));
        }
        let count = u64::from_le_bytes(head[8..16].try_into().unwrap()) as usize;
        if count != PARAM_COUNT {
            return Err(Error::Format(format!(
                "parameter count {count}, expected {PARAM_COUNT}"
            )));
        }
        let mut bytes = vec![0u8; count * 8];
        r.read_exact(&mut bytes)?;
        let flat: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::from_flat(&flat)
    }
}

/// Network weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams(ParamSet);

impl ModelParams {
    pub fn new(set: ParamSet) -> Result<Self> {
        set.check_shapes()?;
        if !set.all_finite() {
            return Err(Error::NonFinite("model parameters"));
        }
        Ok(Self(set))
    }

    pub fn zeros() -> Self {
        Self(ParamSet::zeros())
    }

    pub fn into_inner(self) -> ParamSet {
        self.0
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        self.0.write_to(w)
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        Self::new(ParamSet::read_from(r)?)
    }
}

impl Deref for ModelParams {
    type Target = ParamSet;
    fn deref(&self) -> &ParamSet {
        &self.0
    }
}

impl DerefMut for ModelParams {
    fn deref_mut(&mut self) -> &mut ParamSet {
        &mut self.0
    }
}

/// He-uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
pub fn init_params(seed: u64) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParamSet::zeros();
    let mut fill = |t: &mut Vec<f64>, fan_in: usize| {
        let bound = (6.0 / fan_in as f64).sqrt();
        t.iter_mut()
            .for_each(|v| *v = rng.random_range(-bound..bound));
    };
    fill(&mut set.conv1_w, 9);
    fill(&mut set.conv2_w, 9 * C1);
    fill(&mut set.fc1_w, FLAT);
    fill(&mut set.fc2_w, HIDDEN);
    debug_assert_eq!(set.len(), PARAM_COUNT);
    ModelParams(set)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Logits(pub [f64; NUM_CLASSES]);

impl Logits {
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for i in 1..NUM_CLASSES {
            if self.0[i] > self.0[best] {
                best = i;
            }
        }
        best
    }

    pub fn softmax(&self) -> [f64; NUM_CLASSES] {
        softmax(&self.0)
    }
}

pub(crate) fn softmax(z: &[f64; NUM_CLASSES]) -> [f64; NUM_CLASSES] {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out = z.map(|v| (v - max).exp());
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub(crate) struct Activations {
    pub x: Vec<f64>,
    /// conv1 pre-activation, `30×30×32`.
    pub z1: Vec<f64>,
    pub a1: Vec<f64>,
    /// conv2 pre-activation, `28×28×64`.
    pub z2: Vec<f64>,
    /// Per pooled unit: pixel index `row * 28 + col` of the selected input.
    pub pool_pos: Vec<u32>,
    /// Per pooled unit: whether the selected conv2 unit is active (z2 > 0).
    pub pool_active: Vec<bool>,
    /// Pooled, flattened activations, `12544`.
    pub h: Vec<f64>,
    pub z3: Vec<f64>,
    pub a3: Vec<f64>,
    pub z4: [f64; NUM_CLASSES],
}

pub(crate) fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect()
}

pub(crate) fn forward_cached(params: &ModelParams, x: &[f64]) -> Activations {
    debug_assert_eq!(x.len(), S0 * S0);
    let z1 = conv3x3(x, S0, S0, 1, &params.conv1_w, Some(&params.conv1_b), C1);
    let a1 = relu(&z1);
    let z2 = conv3x3(&a1, S1, S1, C1, &params.conv2_w, Some(&params.conv2_b), C2);

    let mut pool_pos = vec![0u32; FLAT];
    let mut pool_active = vec![false; FLAT];
    let mut h = vec![0.0; FLAT];
    for pi in 0..SP {
        for pj in 0..SP {
            for o in 0..C2 {
                let k = (pi * SP + pj) * C2 + o;
                let mut best_pos = (2 * pi) * S2 + 2 * pj;
                let mut best = z2[best_pos * C2 + o].max(0.0);
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let pos = (2 * pi + di) * S2 + 2 * pj + dj;
                    let v = z2[pos * C2 + o].max(0.0);
                    if v > best {
                        best = v;
                        best_pos = pos;
                    }
                }
                pool_pos[k] = best_pos as u32;
                pool_active[k] = z2[best_pos * C2 + o] > 0.0;
                h[k] = best;
            }
        }
    }

    let mut z3 = matvec_t(&params.fc1_w, FLAT, HIDDEN, &h);
    z3.iter_mut().zip(&params.fc1_b).for_each(|(z, b)| *z += b);
    let a3 = relu(&z3);
    let mut z4 = [0.0; NUM_CLASSES];
    z4.copy_from_slice(&matvec_t(&params.fc2_w, HIDDEN, NUM_CLASSES, &a3));
    z4.iter_mut().zip(&params.fc2_b).for_each(|(z, b)| *z += b);

    Activations {
        x: x.to_vec(),
        z1,
        a1,
        z2,
        pool_pos,
        pool_active,
        h,
        z3,
        a3,
        z4,
    }
}

/// Intermediate tensor shapes, in layer order, for a 32×32 input.
pub fn layer_shapes() -> Vec<Vec<usize>> {
    vec![
        vec![S1, S1, C1],
        vec![S2, S2, C2],
        vec![SP, SP, C2],
        vec![FLAT],
        vec![HIDDEN],
        vec![NUM_CLASSES],
    ]
}

pub fn forward(params: &ModelParams, grid: &FeatureGrid) -> Result<Logits> {
    grid.check_model_shape()?;
    Ok(Logits(forward_cached(params, grid.as_slice()).z4))
}

/// Distance of the input from the nearest non-differentiable point of the
/// network: the smallest |pre-activation| over all ReLUs, or the smallest gap
/// between the winner and runner-up of any pooling window. Finite-difference
/// checks are only meaningful when the step is well inside this margin.
pub fn kink_margin(params: &ModelParams, grid: &FeatureGrid) -> Result<f64> {
    grid.check_model_shape()?;
    let acts = forward_cached(params, grid.as_slice());
    let mut margin = acts
        .z1
        .iter()
        .chain(&acts.z2)
        .chain(&acts.z3)
        .fold(f64::INFINITY, |m, v| m.min(v.abs()));
    for pi in 0..SP {
        for pj in 0..SP {
            for o in 0..C2 {
                let mut vals = [0.0; 4];
                for (n, (di, dj)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                    vals[n] = acts.z2[((2 * pi + di) * S2 + 2 * pj + dj) * C2 + o];
                }
                vals.sort_by(|a, b| b.total_cmp(a));
                if vals[0] > 0.0 {
                    margin = margin.min(vals[0] - vals[1]);
                }
            }
        }
    }
    Ok(margin)
}

/// Which branch every piecewise-linear unit takes: the sign of each ReLU
/// pre-activation and the winner of each pooling window. Two inputs with the
/// same pattern lie in the same linear region of the network's hidden layers.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ActivationPattern(Vec<u64>);

pub fn activation_pattern(params: &ModelParams, grid: &FeatureGrid) -> Result<ActivationPattern> {
    grid.check_model_shape()?;
    Ok(pattern_of(&forward_cached(params, grid.as_slice())))
}

/// [`forward`] and [`activation_pattern`] from a single pass.
pub fn forward_with_pattern(params: &ModelParams, grid: &FeatureGrid) -> Result<(Logits, ActivationPattern)> {
    grid.check_model_shape()?;
    let acts = forward_cached(params, grid.as_slice());
    Ok((Logits(acts.z4), pattern_of(&acts)))
}

pub(crate) fn pattern_of(acts: &Activations) -> ActivationPattern {
    let signs = acts.z1.iter().chain(&acts.z2).chain(&acts.z3).map(|&v| v > 0.0);
    let mut words = Vec::with_capacity((acts.z1.len() + acts.z2.len() + HIDDEN) / 64 + FLAT / 2 + 2);
    let mut bits = 0u64;
    let mut n = 0;
    for on in signs {
        bits |= u64::from(on) << n;
        n += 1;
        if n == 64 {
            words.push(bits);
            (bits, n) = (0, 0);
        }
    }
    words.push(bits);
    words.extend(acts.pool_pos.chunks(2).map(|c| {
        u64::from(c[0]) | (u64::from(c.get(1).copied().unwrap_or(0)) << 32)
    }));
    ActivationPattern(words)
}

/// `-log softmax(logits)[label]` via log-sum-exp.
pub fn cross_entropy_loss(logits: &Logits, label: Label) -> f64 {
    let z = &logits.0;
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - z[label.index()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::FeatureKind;
    use ndarray::Array2;

    fn grid(seed: u64) -> FeatureGrid {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FeatureGrid::new(
            Array2::from_shape_fn((32, 32), |_| rng.random_range(-1.0..1.0)),
            FeatureKind::MelDb,
        )
        .unwrap()
    }

    #[test]
    fn parameter_count() {
        let p = init_params(0);
        assert_eq!(p.len(), PARAM_COUNT);
        assert_eq!(
            PARAM_COUNT,
            9 * 32 + 32 + 9 * 32 * 64 + 64 + 12544 * 128 + 128 + 128 * 10 + 10
        );
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_params(42);
        let b = init_params(42);
        assert_eq!(a, b);
        let c = init_params(43);
        assert_ne!(a, c);
        let bound = (6.0f64 / 9.0).sqrt();
        assert!(a.conv1_w.iter().all(|w| w.abs() <= bound));
        assert!(a.conv1_b.iter().all(|&b| b == 0.0));
        assert!(a.fc2_b.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn table_shapes() {
        assert_eq!(
            layer_shapes(),
            vec![
                vec![30, 30, 32],
                vec![28, 28, 64],
                vec![14, 14, 64],
                vec![12544],
                vec![128],
                vec![10]
            ]
        );
        let acts = forward_cached(&init_params(1), grid(1).as_slice());
        assert_eq!(acts.z1.len(), 30 * 30 * 32);
        assert_eq!(acts.z2.len(), 28 * 28 * 64);
        assert_eq!(acts.h.len(), 12544);
        assert_eq!(acts.z3.len(), 128);
    }

    #[test]
    fn zero_network_gives_zero_logits() {
        let l = forward(&ModelParams::zeros(), &grid(2)).unwrap();
        assert!(l.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn final_layer_is_linear() {
        let mut p = init_params(3);
        let g = grid(3);
        let base = forward(&p, &g).unwrap();
        p.fc2_w.iter_mut().for_each(|w| *w *= 2.0);
        let doubled = forward(&p, &g).unwrap();
        for (a, b) in base.0.iter().zip(doubled.0.iter()) {
            assert!((2.0 * a - b).abs() < 1e-12 * b.abs().max(1.0));
        }
        assert_eq!(base.argmax(), doubled.argmax());
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let g = FeatureGrid::new(Array2::zeros((32, 31)), FeatureKind::MelDb).unwrap();
        assert!(forward(&init_params(0), &g).is_err());
    }

    #[test]
    fn loss_examples() {
        let zero = Logits([0.0; 10]);
        assert!((cross_entropy_loss(&zero, Label::new(4).unwrap()) - 10f64.ln()).abs() < 1e-15);
        let mut z = [0.0; 10];
        z[0] = 100.0;
        let l = cross_entropy_loss(&Logits(z), Label::new(0).unwrap());
        assert!(l.is_finite() && l >= 0.0 && l < 1e-9);
        z[0] = 1000.0;
        assert!(cross_entropy_loss(&Logits(z), Label::new(3).unwrap()).is_finite());
    }

    #[test]
    fn serialization_round_trip() {
        let p = init_params(5);
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + PARAM_COUNT * 8);
        assert_eq!(&buf[..4], b"SLKP");
        let q = ModelParams::read_from(&buf[..]).unwrap();
        assert_eq!(p, q);
        buf[0] = b'X';
        assert!(ModelParams::read_from(&buf[..]).is_err());
    }

    #[test]
    fn labels() {
        assert_eq!(Label::from_word("stop").unwrap().index(), 8);
        assert_eq!(Label::new(9).unwrap().word(), "go");
        assert!(Label::new(10).is_err());
    }
}
