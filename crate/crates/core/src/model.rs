//! Encoder-decoder pixel classifiers with analytic gradients.
//!
//! Two families share one flat parameter vector layout:
//!
//! * `ConvexLinear`: `z = M x`, logits `= D z + τ e₀` with `D` a fixed random
//!   `(d·K) × m` matrix drawn from `decoder_seed` and `τ` a fixed background
//!   logit offset. Only `M` is trained, so logits are affine in the parameters
//!   and every loss built from them below is convex.
//! * `Mlp`: `z = tanh(W₁ x + b₁)`, logits from a trainable decoder of `z`
//!   (linear, or with one `tanh` hidden layer when `hidden_dim > 0`).
//!
//! Logits and probabilities are stored row-major as `d × K` (pixel-major).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentationOp;
use crate::error::{check_len, invalid, Result, WacError};
use crate::losses::{self, ConsistencyMetric, PROB_FLOOR};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    ConvexLinear,
    Mlp,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub family: Family,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub latent_dim: usize,
    #[serde(default)]
    pub decoder_seed: u64,
    /// Width of the optional hidden decoder layer (`Mlp` only, 0 = linear decoder).
    #[serde(default)]
    pub hidden_dim: usize,
    /// Fixed offset added to the background (class 0) logit of every pixel.
    #[serde(default)]
    pub background_logit: f64,
}

impl ModelSpec {
    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return invalid("model grid must have at least one pixel");
        }
        if self.num_classes < 2 {
            return invalid(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.latent_dim == 0 {
            return invalid("latent_dim must be >= 1");
        }
        if !self.background_logit.is_finite() {
            return invalid("background_logit must be finite");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Encoder,
    Decoder,
}

/// A dense block of the flat parameter vector, stored row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub part: Part,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub blocks: Vec<Block>,
    pub len: usize,
}

impl Layout {
    fn build(shapes: &[(&str, Part, usize, usize)]) -> Self {
        let mut offset = 0;
        let blocks = shapes
            .iter()
            .map(|&(name, part, rows, cols)| {
                let b = Block {
                    name: name.to_string(),
                    part,
                    offset,
                    rows,
                    cols,
                };
                offset += rows * cols;
                b
            })
            .collect();
        Self { blocks, len: offset }
    }

    pub fn block(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }
}

/// A flat parameter vector. The Euclidean norm is used both as the norm and its dual.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    pub fn norm(&self) -> f64 {
        norm(&self.values)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub latent: Vec<f64>,
    /// Row-major `d × K`, each row a probability vector clamped to `[PROB_FLOOR, 1]`.
    pub probs: Vec<f64>,
}

/// Which loss a finite-difference check evaluates.
#[derive(Clone, Debug)]
pub enum LossSelector<'a> {
    CrossEntropy {
        x: &'a [f64],
        y: &'a [usize],
    },
    Consistency {
        x: &'a [f64],
        a1: &'a AugmentationOp,
        a2: &'a AugmentationOp,
        lambda_ac: f64,
        metric: ConsistencyMetric,
    },
    Dice {
        x: &'a [f64],
        y: &'a [usize],
        epsilon: f64,
    },
}

/// Coordinate selection for [`Model::finite_diff_check`].
#[derive(Clone, Copy, Debug)]
pub enum Coordinates {
    All,
    /// A seeded random subset of this many coordinates (all of them if fewer exist).
    Subset { count: usize, seed: u64 },
}

struct DecoderCache {
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

/// A model family instance with its fixed (non-trained) decoder materialized.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    layout: Layout,
    fixed_decoder: Vec<f64>,
}

impl Model {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let d = spec.num_pixels();
        let k = spec.num_classes;
        let m = spec.latent_dim;
        let (layout, fixed_decoder) = match spec.family {
            Family::ConvexLinear => {
                let layout = Layout::build(&[("encoder.weight", Part::Encoder, m, d)]);
                let mut rng = ChaCha8Rng::seed_from_u64(spec.decoder_seed);
                let scale = 1.0 / (m as f64).sqrt();
                let dec = (0..d * k * m)
                    .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
                    .collect();
                (layout, dec)
            }
            Family::Mlp => {
                let h = spec.hidden_dim;
                let layout = if h == 0 {
                    Layout::build(&[
                        ("encoder.weight", Part::Encoder, m, d),
                        ("encoder.bias", Part::Encoder, m, 1),
                        ("decoder.weight", Part::Decoder, d * k, m),
                        ("decoder.bias", Part::Decoder, d * k, 1),
                    ])
                } else {
                    Layout::build(&[
                        ("encoder.weight", Part::Encoder, m, d),
                        ("encoder.bias", Part::Encoder, m, 1),
                        ("decoder.hidden.weight", Part::Decoder, h, m),
                        ("decoder.hidden.bias", Part::Decoder, h, 1),
                        ("decoder.weight", Part::Decoder, d * k, h),
                        ("decoder.bias", Part::Decoder, d * k, 1),
                    ])
                };
                (layout, Vec::new())
            }
        };
        Ok(Self {
            spec,
            layout,
            fixed_decoder,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.len
    }

    pub fn num_pixels(&self) -> usize {
        self.spec.num_pixels()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    pub fn is_convex(&self) -> bool {
        self.spec.family == Family::ConvexLinear
    }

    /// The fixed `(d·K) × m` decoder of the convex family (empty for `Mlp`).
    pub fn fixed_decoder(&self) -> &[f64] {
        &self.fixed_decoder
    }

    pub fn zeros(&self) -> ParamVector {
        ParamVector::new(vec![0.0; self.layout.len])
    }

    /// I.i.d. `N(0, scale²)` entries.
    pub fn random_params<R: Rng + ?Sized>(&self, rng: &mut R, scale: f64) -> ParamVector {
        ParamVector::new(
            (0..self.layout.len)
                .map(|_| rng.sample::<f64, _>(StandardNormal) * scale)
                .collect(),
        )
    }

    fn check_theta(&self, theta: &[f64]) -> Result<()> {
        check_len("parameter vector", self.layout.len, theta.len())
    }

    fn check_x(&self, x: &[f64]) -> Result<()> {
        check_len("image", self.num_pixels(), x.len())
    }

    fn check_y(&self, y: &[usize]) -> Result<()> {
        check_len("label map", self.num_pixels(), y.len())?;
        let k = self.num_classes();
        for (pixel, &label) in y.iter().enumerate() {
            if label >= k {
                return Err(WacError::LabelOutOfRange {
                    pixel,
                    label,
                    classes: k,
                });
            }
        }
        Ok(())
    }

    fn block(&self, name: &str) -> &Block {
        self.layout
            .block(name)
            .expect("layout block requested by the family that built it")
    }

    // ---------------------------------------------------------------------
    // Forward pieces

    fn encode_unchecked(&self, theta: &[f64], x: &[f64]) -> Vec<f64> {
        let d = self.num_pixels();
        let m = self.spec.latent_dim;
        let w = &theta[self.block("encoder.weight").range()];
        let mut z: Vec<f64> = (0..m).map(|l| dot(&w[l * d..(l + 1) * d], x)).collect();
        if self.spec.family == Family::Mlp {
            let b = &theta[self.block("encoder.bias").range()];
            for (zl, bl) in z.iter_mut().zip(b) {
                *zl = (*zl + bl).tanh();
            }
        }
        z
    }

    fn decode_unchecked(&self, theta: &[f64], z: &[f64]) -> DecoderCache {
        let dk = self.num_pixels() * self.num_classes();
        let (hidden, mut logits) = match self.spec.family {
            Family::ConvexLinear => (Vec::new(), matvec(&self.fixed_decoder, z, dk)),
            Family::Mlp => {
                let (input, hidden) = if self.spec.hidden_dim > 0 {
                    let hw = &theta[self.block("decoder.hidden.weight").range()];
                    let hb = &theta[self.block("decoder.hidden.bias").range()];
                    let mut h = matvec(hw, z, self.spec.hidden_dim);
                    for (hv, b) in h.iter_mut().zip(hb) {
                        *hv = (*hv + b).tanh();
                    }
                    (h.clone(), h)
                } else {
                    (z.to_vec(), Vec::new())
                };
                let w = &theta[self.block("decoder.weight").range()];
                let b = &theta[self.block("decoder.bias").range()];
                let mut logits = matvec(w, &input, dk);
                for (l, bv) in logits.iter_mut().zip(b) {
                    *l += bv;
                }
                (hidden, logits)
            }
        };
        if self.spec.background_logit != 0.0 {
            let k = self.num_classes();
            for row in logits.chunks_mut(k) {
                row[0] += self.spec.background_logit;
            }
        }
        DecoderCache { hidden, logits }
    }

    fn softmax_rows(&self, logits: &[f64]) -> Vec<f64> {
        let k = self.num_classes();
        let mut probs = vec![0.0; logits.len()];
        for (row, out) in logits.chunks(k).zip(probs.chunks_mut(k)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (o, &l) in out.iter_mut().zip(row) {
                *o = (l - max).exp();
                s += *o;
            }
            for o in out.iter_mut() {
                *o = (*o / s).max(PROB_FLOOR);
            }
        }
        probs
    }

    pub fn encode(&self, theta: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        self.check_theta(theta)?;
        self.check_x(x)?;
        Ok(self.encode_unchecked(theta, x))
    }

    pub fn forward(&self, theta: &[f64], x: &[f64]) -> Result<Prediction> {
        self.check_theta(theta)?;
        self.check_x(x)?;
        let latent = self.encode_unchecked(theta, x);
        let cache = self.decode_unchecked(theta, &latent);
        let probs = self.softmax_rows(&cache.logits);
        Ok(Prediction { latent, probs })
    }

    /// Per-pixel argmax class.
    pub fn predict_labels(&self, theta: &[f64], x: &[f64]) -> Result<Vec<usize>> {
        let pred = self.forward(theta, x)?;
        let k = self.num_classes();
        Ok(pred
            .probs
            .chunks(k)
            .map(|row| {
                let mut best = 0;
                for c in 1..k {
                    if row[c] > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect())
    }

    // ---------------------------------------------------------------------
    // Backward pieces. Each accumulates `scale · ∂loss/∂θ` into `grad`.

    fn backward_decoder(
        &self,
        theta: &[f64],
        z: &[f64],
        cache: &DecoderCache,
        dlogits: &[f64],
        scale: f64,
        grad: &mut [f64],
    ) -> Vec<f64> {
        let dk = dlogits.len();
        let m = self.spec.latent_dim;
        match self.spec.family {
            Family::ConvexLinear => matvec_t(&self.fixed_decoder, dlogits, m),
            Family::Mlp => {
                let (input, in_dim) = if self.spec.hidden_dim > 0 {
                    (&cache.hidden[..], self.spec.hidden_dim)
                } else {
                    (z, m)
                };
                let wb = self.block("decoder.weight").clone();
                let bb = self.block("decoder.bias").clone();
                for r in 0..dk {
                    let g = scale * dlogits[r];
                    if g == 0.0 {
                        continue;
                    }
                    grad[bb.offset + r] += g;
                    let row = &mut grad[wb.offset + r * in_dim..wb.offset + (r + 1) * in_dim];
                    for (gv, &iv) in row.iter_mut().zip(input) {
                        *gv += g * iv;
                    }
                }
                let w = &theta[wb.range()];
                let dinput = matvec_t(w, dlogits, in_dim);
                if self.spec.hidden_dim == 0 {
                    return dinput;
                }
                let h = self.spec.hidden_dim;
                let hwb = self.block("decoder.hidden.weight").clone();
                let hbb = self.block("decoder.hidden.bias").clone();
                let dpre: Vec<f64> = dinput
                    .iter()
                    .zip(&cache.hidden)
                    .map(|(g, hv)| g * (1.0 - hv * hv))
                    .collect();
                for r in 0..h {
                    let g = scale * dpre[r];
                    grad[hbb.offset + r] += g;
                    let row = &mut grad[hwb.offset + r * m..hwb.offset + (r + 1) * m];
                    for (gv, &zv) in row.iter_mut().zip(z) {
                        *gv += g * zv;
                    }
                }
                matvec_t(&theta[hwb.range()], &dpre, m)
            }
        }
    }

    fn backward_encoder(&self, x: &[f64], z: &[f64], dz: &[f64], scale: f64, grad: &mut [f64]) {
        let d = self.num_pixels();
        let wb = self.block("encoder.weight").clone();
        let dpre: Vec<f64> = match self.spec.family {
            Family::ConvexLinear => dz.to_vec(),
            Family::Mlp => dz
                .iter()
                .zip(z)
                .map(|(g, zv)| g * (1.0 - zv * zv))
                .collect(),
        };
        if self.spec.family == Family::Mlp {
            let bb = self.block("encoder.bias").clone();
            for (l, g) in dpre.iter().enumerate() {
                grad[bb.offset + l] += scale * g;
            }
        }
        for (l, &g) in dpre.iter().enumerate() {
            let g = scale * g;
            if g == 0.0 {
                continue;
            }
            let row = &mut grad[wb.offset + l * d..wb.offset + (l + 1) * d];
            for (gv, &xv) in row.iter_mut().zip(x) {
                *gv += g * xv;
            }
        }
    }

    // ---------------------------------------------------------------------
    // Losses with gradients

    /// Averaged pixel cross-entropy; if `grad` is given, adds `scale · ∇θ ℓ_CE`.
    pub fn ce_loss_grad(
        &self,
        theta: &[f64],
        x: &[f64],
        y: &[usize],
        scale: f64,
        grad: Option<&mut [f64]>,
    ) -> Result<f64> {
        self.check_theta(theta)?;
        self.check_x(x)?;
        self.check_y(y)?;
        let z = self.encode_unchecked(theta, x);
        let cache = self.decode_unchecked(theta, &z);
        let probs = self.softmax_rows(&cache.logits);
        let loss = losses::cross_entropy(&probs, y, self.num_classes())?;
        if let Some(grad) = grad {
            check_len("gradient buffer", self.layout.len, grad.len())?;
            let k = self.num_classes();
            let inv_d = 1.0 / y.len() as f64;
            let mut dlogits = vec![0.0; probs.len()];
            for (j, &label) in y.iter().enumerate() {
                let row = &probs[j * k..(j + 1) * k];
                // Where the floor is active the clamped loss is locally flat.
                if row[label] <= PROB_FLOOR {
                    continue;
                }
                for c in 0..k {
                    let target = if c == label { 1.0 } else { 0.0 };
                    dlogits[j * k + c] = (row[c] - target) * inv_d;
                }
            }
            let dz = self.backward_decoder(theta, &z, &cache, &dlogits, scale, grad);
            self.backward_encoder(x, &z, &dz, scale, grad);
        }
        Ok(loss)
    }

    /// Consistency penalty between the latents of two (already augmented)
    /// views; if `grad` is given, adds `scale · ∇θ ℓ_AC`.
    #[allow(clippy::too_many_arguments)]
    pub fn ac_loss_grad_views(
        &self,
        theta: &[f64],
        x1: &[f64],
        x2: &[f64],
        lambda_ac: f64,
        metric: ConsistencyMetric,
        scale: f64,
        grad: Option<&mut [f64]>,
    ) -> Result<f64> {
        self.check_theta(theta)?;
        self.check_x(x1)?;
        self.check_x(x2)?;
        let z1 = self.encode_unchecked(theta, x1);
        let z2 = self.encode_unchecked(theta, x2);
        let loss = losses::consistency(&z1, &z2, lambda_ac, metric)?;
        if let Some(grad) = grad {
            check_len("gradient buffer", self.layout.len, grad.len())?;
            if lambda_ac == 0.0 {
                return Ok(loss);
            }
            let diff: Vec<f64> = z1.iter().zip(&z2).map(|(a, b)| a - b).collect();
            let coef = match metric {
                ConsistencyMetric::SquaredEuclidean => 2.0 * lambda_ac,
                ConsistencyMetric::Euclidean => {
                    let n = norm(&diff);
                    if n == 0.0 {
                        // zero subgradient at coincident latents
                        return Ok(loss);
                    }
                    lambda_ac / n
                }
            };
            let dz1: Vec<f64> = diff.iter().map(|v| coef * v).collect();
            let dz2: Vec<f64> = dz1.iter().map(|v| -v).collect();
            self.backward_encoder(x1, &z1, &dz1, scale, grad);
            self.backward_encoder(x2, &z2, &dz2, scale, grad);
        }
        Ok(loss)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn ac_loss_grad(
        &self,
        theta: &[f64],
        x: &[f64],
        a1: &AugmentationOp,
        a2: &AugmentationOp,
        lambda_ac: f64,
        metric: ConsistencyMetric,
        scale: f64,
        grad: Option<&mut [f64]>,
    ) -> Result<f64> {
        let x1 = a1.apply(x)?;
        let x2 = a2.apply(x)?;
        self.ac_loss_grad_views(theta, &x1, &x2, lambda_ac, metric, scale, grad)
    }

    /// Smoothed dice loss; if `grad` is given, adds `scale · ∇θ ℓ_DICE`.
    pub fn dice_loss_grad(
        &self,
        theta: &[f64],
        x: &[f64],
        y: &[usize],
        epsilon: f64,
        scale: f64,
        grad: Option<&mut [f64]>,
    ) -> Result<f64> {
        if !(epsilon > 0.0) {
            return invalid(format!("dice epsilon must be > 0, got {epsilon}"));
        }
        self.check_theta(theta)?;
        self.check_x(x)?;
        self.check_y(y)?;
        let k = self.num_classes();
        let d = y.len();
        let z = self.encode_unchecked(theta, x);
        let cache = self.decode_unchecked(theta, &z);
        // Unclamped softmax keeps the loss smooth; the floor only matters for logs.
        let mut probs = vec![0.0; cache.logits.len()];
        for (row, out) in cache.logits.chunks(k).zip(probs.chunks_mut(k)) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for (o, &l) in out.iter_mut().zip(row) {
                *o = (l - max).exp();
                s += *o;
            }
            out.iter_mut().for_each(|o| *o /= s);
        }
        let loss = losses::dice_loss(&probs, y, epsilon, k)?;
        if let Some(grad) = grad {
            check_len("gradient buffer", self.layout.len, grad.len())?;
            // dℓ/dp[j,k] = −(1/K)(2 q_jk S_k − N_k)/S_k²
            let mut dprobs = vec![0.0; probs.len()];
            for c in 0..k {
                let mut inter = 0.0;
                let mut psum = 0.0;
                let mut qsum = 0.0;
                for j in 0..d {
                    let p = probs[j * k + c];
                    let q = if y[j] == c { 1.0 } else { 0.0 };
                    inter += p * q;
                    psum += p;
                    qsum += q;
                }
                let num = 2.0 * inter + epsilon;
                let den = psum + qsum + epsilon;
                for j in 0..d {
                    let q = if y[j] == c { 1.0 } else { 0.0 };
                    dprobs[j * k + c] = -(2.0 * q * den - num) / (den * den) / k as f64;
                }
            }
            let mut dlogits = vec![0.0; probs.len()];
            for j in 0..d {
                let p = &probs[j * k..(j + 1) * k];
                let g = &dprobs[j * k..(j + 1) * k];
                let inner: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
                for c in 0..k {
                    dlogits[j * k + c] = p[c] * (g[c] - inner);
                }
            }
            let dz = self.backward_decoder(theta, &z, &cache, &dlogits, scale, grad);
            self.backward_encoder(x, &z, &dz, scale, grad);
        }
        Ok(loss)
    }

    pub fn grad_ce(&self, theta: &[f64], x: &[f64], y: &[usize]) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.layout.len];
        self.ce_loss_grad(theta, x, y, 1.0, Some(&mut g))?;
        Ok(g)
    }

    pub fn grad_ac(
        &self,
        theta: &[f64],
        x: &[f64],
        a1: &AugmentationOp,
        a2: &AugmentationOp,
        lambda_ac: f64,
        metric: ConsistencyMetric,
    ) -> Result<Vec<f64>> {
        if !(lambda_ac >= 0.0) {
            return invalid(format!("lambda_ac must be >= 0, got {lambda_ac}"));
        }
        let mut g = vec![0.0; self.layout.len];
        self.ac_loss_grad(theta, x, a1, a2, lambda_ac, metric, 1.0, Some(&mut g))?;
        Ok(g)
    }

    pub fn grad_dice(&self, theta: &[f64], x: &[f64], y: &[usize], epsilon: f64) -> Result<Vec<f64>> {
        let mut g = vec![0.0; self.layout.len];
        self.dice_loss_grad(theta, x, y, epsilon, 1.0, Some(&mut g))?;
        Ok(g)
    }

    pub fn loss(&self, theta: &[f64], selector: &LossSelector<'_>) -> Result<f64> {
        match *selector {
            LossSelector::CrossEntropy { x, y } => self.ce_loss_grad(theta, x, y, 1.0, None),
            LossSelector::Consistency {
                x,
                a1,
                a2,
                lambda_ac,
                metric,
            } => self.ac_loss_grad(theta, x, a1, a2, lambda_ac, metric, 1.0, None),
            LossSelector::Dice { x, y, epsilon } => {
                self.dice_loss_grad(theta, x, y, epsilon, 1.0, None)
            }
        }
    }

    pub fn gradient(&self, theta: &[f64], selector: &LossSelector<'_>) -> Result<Vec<f64>> {
        match *selector {
            LossSelector::CrossEntropy { x, y } => self.grad_ce(theta, x, y),
            LossSelector::Consistency {
                x,
                a1,
                a2,
                lambda_ac,
                metric,
            } => self.grad_ac(theta, x, a1, a2, lambda_ac, metric),
            LossSelector::Dice { x, y, epsilon } => self.grad_dice(theta, x, y, epsilon),
        }
    }

    /// Relative error `‖g − g_fd‖ / max(‖g‖, ‖g_fd‖)` between the analytic gradient and
    /// central differences, over the selected coordinates. Coordinates where the exact
    /// gradient vanishes would otherwise compare pure rounding noise.
    pub fn finite_diff_check(
        &self,
        theta: &[f64],
        selector: &LossSelector<'_>,
        step: f64,
        coords: Coordinates,
    ) -> Result<f64> {
        if !(step > 0.0) {
            return invalid(format!("finite-difference step must be > 0, got {step}"));
        }
        let analytic = self.gradient(theta, selector)?;
        let n = theta.len();
        let indices: Vec<usize> = match coords {
            Coordinates::All => (0..n).collect(),
            Coordinates::Subset { count, seed } if count < n => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rand::seq::index::sample(&mut rng, n, count).into_vec()
            }
            Coordinates::Subset { .. } => (0..n).collect(),
        };
        let mut probe = theta.to_vec();
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for i in indices {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = self.loss(&probe, selector)?;
            probe[i] = orig - step;
            let down = self.loss(&probe, selector)?;
            probe[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(WacError::NonFinite(format!(
                    "loss during finite differences at coordinate {i}"
                )));
            }
            let numeric = (up - down) / (2.0 * step);
            diff2 += (analytic[i] - numeric).powi(2);
            a2 += analytic[i] * analytic[i];
            n2 += numeric * numeric;
        }
        let denom = a2.max(n2).sqrt();
        Ok(if denom == 0.0 { diff2.sqrt() } else { diff2.sqrt() / denom })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `A v` for row-major `A` with `rows` rows.
fn matvec(a: &[f64], v: &[f64], rows: usize) -> Vec<f64> {
    let cols = v.len();
    (0..rows)
        .map(|r| dot(&a[r * cols..(r + 1) * cols], v))
        .collect()
}

/// `Aᵀ u` for row-major `A` with `cols` columns.
fn matvec_t(a: &[f64], u: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for (r, &ur) in u.iter().enumerate() {
        if ur == 0.0 {
            continue;
        }
        for (o, &av) in out.iter_mut().zip(&a[r * cols..(r + 1) * cols]) {
            *o += ur * av;
        }
    }
    out
}
