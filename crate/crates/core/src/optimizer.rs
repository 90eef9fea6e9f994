//! AdaWAC: exponentiated-gradient ascent on the per-sample weights β and
//! (projected) SGD on θ, plus the ablations and hard-thresholding baselines.

use std::borrow::Cow;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::{sample_pair, PairSampling};
use crate::error::{check_len, invalid, Result, WacError};
use crate::losses::{ConsistencyMetric, LossPair, DEFAULT_DICE_EPSILON};
use crate::model::norm;
use crate::problem::WacProblem;

pub const CHECKPOINT_VERSION: u32 = 1;

/// One multiplicative-weights step on the two-point simplex `(β, 1 − β)`:
/// `β e^{η ce} / (β e^{η ce} + (1 − β) e^{η ac})`.
pub fn eg_update(beta: f64, ce: f64, ac: f64, eta: f64) -> Result<f64> {
    if !beta.is_finite() || !ce.is_finite() || !ac.is_finite() || !eta.is_finite() {
        return Err(WacError::NonFinite(format!(
            "eg_update(beta={beta}, ce={ce}, ac={ac}, eta={eta})"
        )));
    }
    if !(0.0..=1.0).contains(&beta) {
        return invalid(format!("beta must lie in [0, 1], got {beta}"));
    }
    if eta < 0.0 {
        return invalid(format!("eta_beta must be >= 0, got {eta}"));
    }
    let a = eta * ce;
    let b = eta * ac;
    if a == b {
        return Ok(beta);
    }
    let m = a.max(b);
    let num = beta * (a - m).exp();
    let next = num / (num + (1.0 - beta) * (b - m).exp());
    // rounding must never move β against the sign of ce − ac
    Ok(if a > b { next.max(beta) } else { next.min(beta) })
}

/// Per-sample weights with the paired simplex representation `B_i = (β_i, 1 − β_i)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightState {
    pub beta: Vec<f64>,
}

impl WeightState {
    pub fn uniform(n: usize) -> Self {
        Self {
            beta: vec![0.5; n],
        }
    }

    pub fn rows(&self) -> Vec<[f64; 2]> {
        self.beta.iter().map(|&b| [b, 1.0 - b]).collect()
    }
}

fn check_interior(b: &[[f64; 2]], what: &str) -> Result<()> {
    for (i, row) in b.iter().enumerate() {
        if !(row[0] > 0.0 && row[1] > 0.0) || !row[0].is_finite() || !row[1].is_finite() {
            return invalid(format!("{what} row {i} is not in the simplex interior: {row:?}"));
        }
        if (row[0] + row[1] - 1.0).abs() > 1e-9 {
            return invalid(format!("{what} row {i} does not sum to 1: {row:?}"));
        }
    }
    Ok(())
}

/// Negative-entropy mirror map `φ(B) = Σ B log B`.
pub fn mirror_map_b(b: &[[f64; 2]]) -> Result<f64> {
    check_interior(b, "B")?;
    Ok(b.iter().flatten().map(|&v| v * v.ln()).sum())
}

/// Gradient of the Fenchel conjugate: a row-wise softmax.
pub fn fenchel_dual_grad_b(g: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
    g.iter()
        .map(|row| {
            if !row[0].is_finite() || !row[1].is_finite() {
                return Err(WacError::NonFinite(format!("dual point {row:?}")));
            }
            let m = row[0].max(row[1]);
            let e0 = (row[0] - m).exp();
            let e1 = (row[1] - m).exp();
            let s = e0 + e1;
            Ok([e0 / s, e1 / s])
        })
        .collect()
}

/// Bregman divergence of `φ`: row-summed KL divergence.
pub fn bregman_b(b: &[[f64; 2]], b_prime: &[[f64; 2]]) -> Result<f64> {
    check_len("Bregman rows", b.len(), b_prime.len())?;
    check_interior(b, "B")?;
    check_interior(b_prime, "B'")?;
    Ok(b.iter()
        .zip(b_prime)
        .map(|(p, q)| p[0] * (p[0] / q[0]).ln() + p[1] * (p[1] / q[1]).ln())
        .sum())
}

/// `‖B‖_{1,2} = sqrt(Σ_i ‖B_i‖₁²)`.
pub fn norm_12(b: &[[f64; 2]]) -> f64 {
    b.iter()
        .map(|r| (r[0].abs() + r[1].abs()).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Equal primal/dual step size for a horizon of `T` iterations:
/// `2 / sqrt(5 T (γ² C_θ² + 2 n C_B²))`.
pub fn recommended_lr(gamma: f64, c_theta: f64, c_b: f64, n: usize, t: u64) -> Result<f64> {
    for (name, v) in [("gamma", gamma), ("c_theta", c_theta), ("c_b", c_b)] {
        if !(v >= 0.0) || !v.is_finite() {
            return invalid(format!("{name} must be finite and >= 0, got {v}"));
        }
    }
    if n == 0 || t == 0 {
        return invalid("n and T must be positive");
    }
    let inner = gamma * gamma * c_theta * c_theta + 2.0 * n as f64 * c_b * c_b;
    if inner <= 0.0 {
        return invalid("step size undefined: gamma*c_theta and c_b are both zero");
    }
    Ok(2.0 / (5.0 * t as f64 * inner).sqrt())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    #[default]
    #[serde(rename = "adawac")]
    AdaWac,
    /// Plain SGD on the cross-entropy (β pinned to 1, no consistency term).
    Erm,
    /// Fixed β = 1/2: naive sum of the two losses.
    AcrOnly,
    /// AdaWAC with the consistency weight forced to zero.
    ReweightOnly,
    /// Drop samples whose labels are entirely background.
    TrimTrain,
    /// Drop the given fraction of lowest-CE samples from every batch.
    TrimRatio(f64),
}

impl BaselineMode {
    pub fn name(&self) -> String {
        match self {
            BaselineMode::AdaWac => "adawac".into(),
            BaselineMode::Erm => "erm".into(),
            BaselineMode::AcrOnly => "acr_only".into(),
            BaselineMode::ReweightOnly => "reweight_only".into(),
            BaselineMode::TrimTrain => "trim_train".into(),
            BaselineMode::TrimRatio(r) => format!("trim_ratio_{r}"),
        }
    }

    /// Inverse of [`BaselineMode::name`]; a bare `trim_ratio` uses [`DEFAULT_TRIM_RATIO`].
    pub fn from_name(name: &str) -> Result<Self> {
        Ok(match name {
            "adawac" => BaselineMode::AdaWac,
            "erm" => BaselineMode::Erm,
            "acr_only" => BaselineMode::AcrOnly,
            "reweight_only" => BaselineMode::ReweightOnly,
            "trim_train" => BaselineMode::TrimTrain,
            "trim_ratio" => BaselineMode::TrimRatio(DEFAULT_TRIM_RATIO),
            other => match other.strip_prefix("trim_ratio_").map(str::parse::<f64>) {
                Some(Ok(r)) => BaselineMode::TrimRatio(r),
                _ => return invalid(format!("unknown mode {name:?}")),
            },
        })
    }

    fn uses_consistency(&self) -> bool {
        matches!(self, BaselineMode::AdaWac | BaselineMode::AcrOnly)
    }
}

/// Default trim fraction: the share of all-background slices in the original
/// multi-organ training set, `1 − 1280/2211`.
pub const DEFAULT_TRIM_RATIO: f64 = 1.0 - 1280.0 / 2211.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Uniform with replacement.
    #[default]
    WithReplacement,
    /// A fresh random permutation every epoch.
    EpochShuffle,
}

fn default_lambda() -> f64 {
    1.0
}
fn default_dice_eps() -> f64 {
    DEFAULT_DICE_EPSILON
}
fn default_batch() -> usize {
    1
}
fn default_log_every() -> u64 {
    1
}
fn default_divergence() -> f64 {
    1e12
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub eta_theta: f64,
    #[serde(default)]
    pub eta_beta: f64,
    #[serde(default = "default_lambda")]
    pub lambda_ac: f64,
    pub iterations: u64,
    #[serde(default)]
    pub metric: ConsistencyMetric,
    #[serde(default)]
    pub use_dice: bool,
    #[serde(default = "default_dice_eps")]
    pub dice_epsilon: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub mode: BaselineMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub sampling: Sampling,
    #[serde(default)]
    pub pair_sampling: PairSampling,
    /// Redraw the augmentation pair at every visit instead of freezing one per sample.
    #[serde(default)]
    pub resample_pairs: bool,
    /// Evaluate the cross-entropy on the first augmented view.
    #[serde(default)]
    pub ce_on_augmented: bool,
    /// Record a full trace every this many epochs (0 disables traces).
    #[serde(default = "default_log_every")]
    pub log_every_epochs: u64,
    /// Keep a checkpoint every this many iterations (0 disables).
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default = "default_divergence")]
    pub divergence_threshold: f64,
}

impl TrainConfig {
    pub fn new(eta_theta: f64, eta_beta: f64, iterations: u64) -> Self {
        Self {
            eta_theta,
            eta_beta,
            lambda_ac: default_lambda(),
            iterations,
            metric: ConsistencyMetric::default(),
            use_dice: false,
            dice_epsilon: DEFAULT_DICE_EPSILON,
            momentum: 0.0,
            weight_decay: 0.0,
            batch_size: 1,
            mode: BaselineMode::AdaWac,
            seed: 0,
            sampling: Sampling::WithReplacement,
            pair_sampling: PairSampling::Independent,
            resample_pairs: false,
            ce_on_augmented: false,
            log_every_epochs: 1,
            checkpoint_every: 0,
            divergence_threshold: default_divergence(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("eta_theta", self.eta_theta),
            ("eta_beta", self.eta_beta),
            ("lambda_ac", self.lambda_ac),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return invalid(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return invalid(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 {
            return invalid("batch_size must be >= 1");
        }
        if self.use_dice && !(self.dice_epsilon > 0.0) {
            return invalid("dice_epsilon must be > 0");
        }
        if let BaselineMode::TrimRatio(r) = self.mode {
            if !(0.0..1.0).contains(&r) {
                return invalid(format!("trim ratio must lie in [0, 1), got {r}"));
            }
        }
        if !(self.divergence_threshold > 0.0) {
            return invalid("divergence_threshold must be > 0");
        }
        Ok(())
    }

    /// Whether the settings match the analyzed algorithm (single-sample,
    /// plain SGD, uniform sampling with replacement).
    pub fn is_theory_track(&self) -> bool {
        self.momentum == 0.0
            && self.weight_decay == 0.0
            && self.batch_size == 1
            && self.sampling == Sampling::WithReplacement
            && !self.resample_pairs
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("TrainConfig serializes");
        hex(&Sha256::digest(&json))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Euclidean ball `{θ : ‖θ − center‖₂ ≤ γ}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    pub center: Vec<f64>,
    pub gamma: f64,
}

impl Projection {
    pub fn new(center: Vec<f64>, gamma: f64) -> Result<Self> {
        if !(gamma > 0.0) || !gamma.is_finite() {
            return invalid(format!("projection radius must be > 0, got {gamma}"));
        }
        Ok(Self { center, gamma })
    }

    pub fn project(&self, theta: &mut [f64]) {
        let r = crate::model::distance(theta, &self.center);
        if r > self.gamma {
            let s = self.gamma / r;
            for (t, c) in theta.iter_mut().zip(&self.center) {
                *t = c + (*t - c) * s;
            }
        }
    }

    pub fn contains(&self, theta: &[f64], tol: f64) -> bool {
        crate::model::distance(theta, &self.center) <= self.gamma + tol
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// Decimal, since JSON numbers cannot hold a u128 portably.
    pub word_pos: String,
}

fn save_rng(seed: u64, rng: &ChaCha8Rng) -> RngState {
    RngState {
        seed,
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos().to_string(),
    }
}

fn restore_rng(state: &RngState) -> Result<ChaCha8Rng> {
    let pos: u128 = state
        .word_pos
        .parse()
        .map_err(|_| WacError::InvalidArgument(format!("bad rng word_pos {:?}", state.word_pos)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(state.seed);
    rng.set_stream(state.stream);
    rng.set_word_pos(pos);
    Ok(rng)
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub iteration: u64,
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
    pub theta_bar: Vec<f64>,
    pub beta_bar: Vec<f64>,
    pub rng_state: RngState,
    pub config_hash: String,
    pub theta_sum: Vec<f64>,
    pub beta_acc: Vec<f64>,
    pub beta_last: Vec<u64>,
    pub velocity: Vec<f64>,
    pub order: Vec<usize>,
    pub order_pos: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: u64,
    pub ce: Vec<f64>,
    pub ac: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradStats {
    /// Largest per-step weighted gradient norm seen.
    pub max_norm: f64,
    /// Mean of the squared per-step weighted gradient norms.
    pub mean_sq_norm: f64,
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub mode: BaselineMode,
    pub iterations: u64,
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
    pub theta_bar: Vec<f64>,
    pub beta_bar: Vec<f64>,
    pub traces: Vec<EpochTrace>,
    pub grad_stats: GradStats,
    pub skipped_steps: u64,
    pub checkpoints: Vec<Checkpoint>,
}

pub struct Trainer<'a> {
    problem: Cow<'a, WacProblem>,
    config: TrainConfig,
    projection: Option<Projection>,
    eta_beta: f64,
    iteration: u64,
    theta: Vec<f64>,
    beta: Vec<f64>,
    theta_sum: Vec<f64>,
    beta_acc: Vec<f64>,
    beta_last: Vec<u64>,
    velocity: Vec<f64>,
    order: Vec<usize>,
    order_pos: usize,
    rng: ChaCha8Rng,
    traces: Vec<EpochTrace>,
    grad_stats: GradStats,
    skipped: u64,
    checkpoints: Vec<Checkpoint>,
    config_hash: String,
}

struct Visit {
    idx: usize,
    losses: LossPair,
    g_ce: Vec<f64>,
    g_ac: Option<Vec<f64>>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        problem: &'a WacProblem,
        config: TrainConfig,
        theta0: Vec<f64>,
        projection: Option<Projection>,
    ) -> Result<Self> {
        config.validate()?;
        check_len("initial parameters", problem.num_params(), theta0.len())?;
        if theta0.iter().any(|v| !v.is_finite()) {
            return Err(WacError::NonFinite("initial parameters".into()));
        }
        if let Some(p) = &projection {
            check_len("projection center", problem.num_params(), p.center.len())?;
        }
        let lambda = if config.mode.uses_consistency() {
            config.lambda_ac
        } else {
            0.0
        };
        let problem = if problem.lambda_ac() == lambda {
            Cow::Borrowed(problem)
        } else {
            Cow::Owned(problem.with_lambda(lambda)?)
        };
        if problem.ce_on_augmented() != config.ce_on_augmented {
            return invalid("problem and config disagree on ce_on_augmented");
        }
        let eta_beta = match config.mode {
            BaselineMode::AdaWac | BaselineMode::ReweightOnly => config.eta_beta,
            _ => 0.0,
        };
        let n = problem.len();
        let p = problem.num_params();
        let beta0 = match config.mode {
            BaselineMode::Erm | BaselineMode::TrimTrain | BaselineMode::TrimRatio(_) => 1.0,
            _ => 0.5,
        };
        let mut theta = theta0;
        if let Some(proj) = &projection {
            proj.project(&mut theta);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(0);
        let config_hash = config.hash();
        Ok(Self {
            problem,
            eta_beta,
            projection,
            iteration: 0,
            theta,
            beta: vec![beta0; n],
            theta_sum: vec![0.0; p],
            beta_acc: vec![0.0; n],
            beta_last: vec![0; n],
            velocity: vec![0.0; p],
            order: (0..n).collect(),
            order_pos: n,
            rng,
            traces: Vec::new(),
            grad_stats: GradStats::default(),
            skipped: 0,
            checkpoints: Vec::new(),
            config_hash,
            config,
        })
    }

    pub fn resume(
        problem: &'a WacProblem,
        config: TrainConfig,
        checkpoint: &Checkpoint,
        projection: Option<Projection>,
    ) -> Result<Self> {
        if checkpoint.version != CHECKPOINT_VERSION {
            return invalid(format!(
                "checkpoint version {} is not supported",
                checkpoint.version
            ));
        }
        if checkpoint.config_hash != config.hash() {
            return invalid("checkpoint was written with a different training config");
        }
        let mut t = Self::new(problem, config, checkpoint.theta.clone(), projection)?;
        check_len("checkpoint beta", t.beta.len(), checkpoint.beta.len())?;
        t.iteration = checkpoint.iteration;
        t.theta = checkpoint.theta.clone();
        t.beta = checkpoint.beta.clone();
        t.theta_sum = checkpoint.theta_sum.clone();
        t.beta_acc = checkpoint.beta_acc.clone();
        t.beta_last = checkpoint.beta_last.clone();
        t.velocity = checkpoint.velocity.clone();
        t.order = checkpoint.order.clone();
        t.order_pos = checkpoint.order_pos;
        t.rng = restore_rng(&checkpoint.rng_state)?;
        Ok(t)
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn problem(&self) -> &WacProblem {
        &self.problem
    }

    /// `(1/t) Σ_{s=1}^{t} θ_s`; the current θ before any step.
    pub fn theta_bar(&self) -> Vec<f64> {
        if self.iteration == 0 {
            return self.theta.clone();
        }
        let inv = 1.0 / self.iteration as f64;
        self.theta_sum.iter().map(|v| v * inv).collect()
    }

    /// `(1/t) Σ_{s=1}^{t} β_s`, accumulated per coordinate between changes.
    pub fn beta_bar(&self) -> Vec<f64> {
        let t = self.iteration;
        if t == 0 {
            return self.beta.clone();
        }
        self.beta
            .iter()
            .enumerate()
            .map(|(i, &b)| (self.beta_acc[i] + b * (t - self.beta_last[i]) as f64) / t as f64)
            .collect()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            iteration: self.iteration,
            theta: self.theta.clone(),
            beta: self.beta.clone(),
            theta_bar: self.theta_bar(),
            beta_bar: self.beta_bar(),
            rng_state: save_rng(self.config.seed, &self.rng),
            config_hash: self.config_hash.clone(),
            theta_sum: self.theta_sum.clone(),
            beta_acc: self.beta_acc.clone(),
            beta_last: self.beta_last.clone(),
            velocity: self.velocity.clone(),
            order: self.order.clone(),
            order_pos: self.order_pos,
        }
    }

    fn iterations_per_epoch(&self) -> u64 {
        self.problem.len().div_ceil(self.config.batch_size) as u64
    }

    fn draw_batch(&mut self) -> Vec<usize> {
        let n = self.problem.len();
        let mut batch = Vec::with_capacity(self.config.batch_size);
        for _ in 0..self.config.batch_size {
            let i = match self.config.sampling {
                Sampling::WithReplacement => self.rng.random_range(0..n),
                Sampling::EpochShuffle => {
                    if self.order_pos >= n {
                        for k in (1..n).rev() {
                            let j = self.rng.random_range(0..=k);
                            self.order.swap(k, j);
                        }
                        self.order_pos = 0;
                    }
                    self.order_pos += 1;
                    self.order[self.order_pos - 1]
                }
            };
            batch.push(i);
        }
        batch
    }

    fn visit(&self, theta: &[f64], idx: usize, pair: Option<&(crate::augment::AugmentationOp, crate::augment::AugmentationOp)>) -> Result<Visit> {
        let p = self.problem.num_params();
        let mut g_ce = vec![0.0; p];
        let ce = self.problem.ce_grad(theta, idx, 1.0, &mut g_ce)?;
        let (ac, g_ac) = if self.problem.lambda_ac() != 0.0 {
            let mut g = vec![0.0; p];
            let ac = match pair {
                Some((a1, a2)) => self.problem.ac_with_pair(theta, idx, a1, a2, 1.0, Some(&mut g))?,
                None => self.problem.ac_grad(theta, idx, 1.0, &mut g)?,
            };
            (ac, Some(g))
        } else {
            (0.0, None)
        };
        Ok(Visit {
            idx,
            losses: LossPair::new(ce, ac),
            g_ce,
            g_ac,
        })
    }

    fn set_beta(&mut self, i: usize, value: f64) {
        if value == self.beta[i] {
            return;
        }
        // β_i held its old value for iterations beta_last+1 ..= iteration-1
        let t = self.iteration - 1;
        self.beta_acc[i] += self.beta[i] * (t - self.beta_last[i]) as f64;
        self.beta_last[i] = t;
        self.beta[i] = value;
    }

    /// One iteration of the configured rule.
    pub fn step(&mut self) -> Result<()> {
        let batch = self.draw_batch();
        let pairs = if self.config.resample_pairs && self.problem.lambda_ac() != 0.0 {
            let (h, w) = (self.problem.model().spec().height, self.problem.model().spec().width);
            let mut v = Vec::with_capacity(batch.len());
            for _ in &batch {
                v.push(sample_pair(&mut self.rng, h, w, self.config.pair_sampling)?);
            }
            Some(v)
        } else {
            None
        };
        self.iteration += 1;
        let t = self.iteration;
        let theta = std::mem::take(&mut self.theta);
        let visits: Result<Vec<Visit>> = if batch.len() == 1 {
            vec![self.visit(&theta, batch[0], pairs.as_ref().map(|p| &p[0]))]
                .into_iter()
                .collect()
        } else {
            batch
                .par_iter()
                .enumerate()
                .map(|(k, &i)| self.visit(&theta, i, pairs.as_ref().map(|p| &p[k])))
                .collect()
        };
        let visits = match visits {
            Ok(v) => v,
            Err(e) => {
                self.theta = theta;
                return Err(e);
            }
        };
        for v in &visits {
            let l = v.losses;
            if !l.ce.is_finite()
                || !l.ac.is_finite()
                || l.ce > self.config.divergence_threshold
                || l.ac > self.config.divergence_threshold
            {
                self.theta = theta;
                return Err(WacError::Diverged {
                    iteration: t,
                    detail: format!("sample {} losses ce={} ac={}", v.idx, l.ce, l.ac),
                });
            }
        }

        // (sample position in batch, weight on CE, weight on AC)
        let mut weights: Vec<(usize, f64, f64)> = Vec::with_capacity(visits.len());
        match self.config.mode {
            BaselineMode::AdaWac | BaselineMode::AcrOnly | BaselineMode::ReweightOnly => {
                for (k, v) in visits.iter().enumerate() {
                    let b = eg_update(self.beta[v.idx], v.losses.ce, v.losses.ac, self.eta_beta)?;
                    self.set_beta(v.idx, b);
                    weights.push((k, b, 1.0 - b));
                }
            }
            BaselineMode::Erm => {
                weights.extend((0..visits.len()).map(|k| (k, 1.0, 0.0)));
            }
            BaselineMode::TrimTrain => {
                for (k, v) in visits.iter().enumerate() {
                    if self.problem.has_foreground(v.idx) {
                        weights.push((k, 1.0, 0.0));
                    }
                }
            }
            BaselineMode::TrimRatio(r) => {
                let keep = ((1.0 - r) * visits.len() as f64).ceil() as usize;
                let mut ranked: Vec<usize> = (0..visits.len()).collect();
                ranked.sort_by(|&a, &b| {
                    visits[b]
                        .losses
                        .ce
                        .total_cmp(&visits[a].losses.ce)
                        .then(visits[a].idx.cmp(&visits[b].idx))
                        .then(a.cmp(&b))
                });
                let mut kept: Vec<usize> = ranked.into_iter().take(keep).collect();
                kept.sort_unstable();
                weights.extend(kept.into_iter().map(|k| (k, 1.0, 0.0)));
            }
        }

        let p = theta.len();
        let mut grad = vec![0.0; p];
        if weights.is_empty() {
            self.skipped += 1;
        } else {
            let inv = 1.0 / weights.len() as f64;
            for &(k, w_ce, w_ac) in &weights {
                let v = &visits[k];
                if w_ce != 0.0 {
                    let c = w_ce * inv;
                    for (g, d) in grad.iter_mut().zip(&v.g_ce) {
                        *g += c * d;
                    }
                }
                if w_ac != 0.0 {
                    if let Some(g_ac) = &v.g_ac {
                        let c = w_ac * inv;
                        for (g, d) in grad.iter_mut().zip(g_ac) {
                            *g += c * d;
                        }
                    }
                }
            }
        }
        if self.config.use_dice {
            // the dice term always sees the full, untrimmed batch
            let inv = 1.0 / batch.len() as f64;
            for &i in &batch {
                if let Err(e) = self.problem.dice_grad(&theta, i, self.config.dice_epsilon, inv, &mut grad) {
                    self.theta = theta;
                    return Err(e);
                }
            }
        }
        let gnorm = norm(&grad);
        let mut theta = theta;
        let eta = self.config.eta_theta;
        let (mu, wd) = (self.config.momentum, self.config.weight_decay);
        if mu == 0.0 && wd == 0.0 {
            for (th, g) in theta.iter_mut().zip(&grad) {
                *th -= eta * g;
            }
        } else {
            for ((th, g), v) in theta.iter_mut().zip(&grad).zip(self.velocity.iter_mut()) {
                let g = g + wd * *th;
                *v = mu * *v + g;
                *th -= eta * *v;
            }
        }
        if let Some(proj) = &self.projection {
            proj.project(&mut theta);
        }
        if theta.iter().any(|v| !v.is_finite()) {
            self.theta = theta;
            return Err(WacError::Diverged {
                iteration: t,
                detail: "non-finite parameters after update".into(),
            });
        }
        for (s, th) in self.theta_sum.iter_mut().zip(&theta) {
            *s += th;
        }
        self.theta = theta;

        let gs = &mut self.grad_stats;
        gs.steps += 1;
        gs.max_norm = gs.max_norm.max(gnorm);
        gs.mean_sq_norm += (gnorm * gnorm - gs.mean_sq_norm) / gs.steps as f64;

        let ipe = self.iterations_per_epoch();
        if self.config.log_every_epochs > 0 && t % ipe == 0 {
            let epoch = t / ipe;
            if epoch % self.config.log_every_epochs == 0 {
                self.record_trace(epoch)?;
            }
        }
        if self.config.checkpoint_every > 0 && t % self.config.checkpoint_every == 0 {
            self.checkpoints.push(self.checkpoint());
        }
        Ok(())
    }

    fn record_trace(&mut self, epoch: u64) -> Result<()> {
        let losses = self.problem.all_losses(&self.theta)?;
        self.traces.push(EpochTrace {
            epoch,
            ce: losses.iter().map(|l| l.ce).collect(),
            ac: losses.iter().map(|l| l.ac).collect(),
            beta: self.beta.clone(),
        });
        Ok(())
    }

    /// Step until the configured iteration count is reached.
    pub fn run_to_end(&mut self) -> Result<()> {
        while self.iteration < self.config.iterations {
            self.step()?;
        }
        Ok(())
    }

    pub fn finish(self) -> RunRecord {
        RunRecord {
            mode: self.config.mode,
            iterations: self.iteration,
            theta_bar: self.theta_bar(),
            beta_bar: self.beta_bar(),
            theta: self.theta,
            beta: self.beta,
            traces: self.traces,
            grad_stats: self.grad_stats,
            skipped_steps: self.skipped,
            checkpoints: self.checkpoints,
        }
    }
}

/// Run the configured method from `theta0` for `config.iterations` steps.
pub fn run(
    problem: &WacProblem,
    config: &TrainConfig,
    theta0: Vec<f64>,
    projection: Option<Projection>,
) -> Result<RunRecord> {
    let mut trainer = Trainer::new(problem, config.clone(), theta0, projection)?;
    trainer.run_to_end()?;
    Ok(trainer.finish())
}

/// One AdaWAC step on sample `i` with explicit state, without a trainer.
#[allow(clippy::too_many_arguments)]
pub fn adawac_step(
    problem: &WacProblem,
    theta: &[f64],
    weights: &WeightState,
    i: usize,
    eta_theta: f64,
    eta_beta: f64,
    dice_epsilon: Option<f64>,
    projection: Option<&Projection>,
) -> Result<(Vec<f64>, WeightState)> {
    if i >= problem.len() {
        return invalid(format!("sample index {i} out of range for {} samples", problem.len()));
    }
    check_len("beta", problem.len(), weights.beta.len())?;
    let p = problem.num_params();
    let mut g_ce = vec![0.0; p];
    let mut g_ac = vec![0.0; p];
    let ce = problem.ce_grad(theta, i, 1.0, &mut g_ce)?;
    let ac = problem.ac_grad(theta, i, 1.0, &mut g_ac)?;
    let b = eg_update(weights.beta[i], ce, ac, eta_beta)?;
    let mut grad: Vec<f64> = g_ce
        .iter()
        .zip(&g_ac)
        .map(|(c, a)| b * c + (1.0 - b) * a)
        .collect();
    if let Some(eps) = dice_epsilon {
        problem.dice_grad(theta, i, eps, 1.0, &mut grad)?;
    }
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(WacError::NonFinite(format!("gradient at sample {i}")));
    }
    let mut next: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| t - eta_theta * g).collect();
    if let Some(proj) = projection {
        proj.project(&mut next);
    }
    let mut w = weights.clone();
    w.beta[i] = b;
    Ok((next, w))
}

/// SGD step on the mean CE of the batch samples that contain foreground.
/// Returns the parameters unchanged (apart from dice) when nothing survives.
pub fn trim_train_step(
    problem: &WacProblem,
    theta: &[f64],
    batch: &[usize],
    eta_theta: f64,
    dice_epsilon: Option<f64>,
) -> Result<Vec<f64>> {
    let survivors: Vec<usize> = batch
        .iter()
        .copied()
        .filter(|&i| problem.has_foreground(i))
        .collect();
    sgd_on_subset(problem, theta, batch, &survivors, eta_theta, dice_epsilon)
}

/// SGD step on the mean CE of the `⌈(1 − r)|B|⌉` highest-CE batch samples.
pub fn trim_ratio_step(
    problem: &WacProblem,
    theta: &[f64],
    batch: &[usize],
    r: f64,
    eta_theta: f64,
    dice_epsilon: Option<f64>,
) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&r) {
        return invalid(format!("trim ratio must lie in [0, 1), got {r}"));
    }
    let mut ranked: Vec<(f64, usize, usize)> = Vec::with_capacity(batch.len());
    for (k, &i) in batch.iter().enumerate() {
        ranked.push((problem.losses(theta, i)?.ce, i, k));
    }
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let keep = ((1.0 - r) * batch.len() as f64).ceil() as usize;
    let mut kept: Vec<(usize, usize)> = ranked.into_iter().take(keep).map(|(_, i, k)| (k, i)).collect();
    kept.sort_unstable();
    let kept: Vec<usize> = kept.into_iter().map(|(_, i)| i).collect();
    sgd_on_subset(problem, theta, batch, &kept, eta_theta, dice_epsilon)
}

fn sgd_on_subset(
    problem: &WacProblem,
    theta: &[f64],
    batch: &[usize],
    kept: &[usize],
    eta_theta: f64,
    dice_epsilon: Option<f64>,
) -> Result<Vec<f64>> {
    let p = problem.num_params();
    let mut grad = vec![0.0; p];
    if !kept.is_empty() {
        let inv = 1.0 / kept.len() as f64;
        for &i in kept {
            let mut g = vec![0.0; p];
            problem.ce_grad(theta, i, 1.0, &mut g)?;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += inv * b;
            }
        }
    }
    if let Some(eps) = dice_epsilon {
        let inv = 1.0 / batch.len() as f64;
        for &i in batch {
            problem.dice_grad(theta, i, eps, inv, &mut grad)?;
        }
    }
    Ok(theta.iter().zip(&grad).map(|(t, g)| t - eta_theta * g).collect())
}
