//! The empirical WAC objective over a fixed training set with frozen
//! augmentation pairs.
//!
//! Subpopulation tags are deliberately dropped here: nothing downstream of a
//! `WacProblem` can see them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::augment::{sample_pair, AugmentationOp, OpCode, PairSampling};
use crate::error::{check_len, invalid, Result};
use crate::losses::{ConsistencyMetric, LossPair};
use crate::model::Model;
use crate::synth::Dataset;

/// Samples are reduced in fixed chunks of this size so parallel sums are
/// independent of the thread count.
const REDUCE_CHUNK: usize = 8;

#[derive(Clone, Debug)]
struct Item {
    x: Vec<f64>,
    y: Vec<usize>,
    /// Image and labels the cross-entropy is evaluated on.
    ce_x: Vec<f64>,
    ce_y: Vec<usize>,
    x1: Vec<f64>,
    x2: Vec<f64>,
    pair: (OpCode, OpCode),
}

#[derive(Clone, Debug)]
pub struct WacProblem {
    model: Model,
    items: Vec<Item>,
    lambda_ac: f64,
    metric: ConsistencyMetric,
    ce_on_augmented: bool,
}

/// Draw one frozen augmentation pair per sample.
pub fn draw_pairs(
    n: usize,
    height: usize,
    width: usize,
    seed: u64,
    mode: PairSampling,
) -> Result<Vec<(AugmentationOp, AugmentationOp)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    (0..n)
        .map(|_| sample_pair(&mut rng, height, width, mode))
        .collect()
}

impl WacProblem {
    pub fn new(
        model: Model,
        dataset: &Dataset,
        pairs: &[(AugmentationOp, AugmentationOp)],
        lambda_ac: f64,
        metric: ConsistencyMetric,
        ce_on_augmented: bool,
    ) -> Result<Self> {
        if dataset.is_empty() {
            return invalid("training set is empty");
        }
        if !(lambda_ac >= 0.0) || !lambda_ac.is_finite() {
            return invalid(format!("lambda_ac must be finite and >= 0, got {lambda_ac}"));
        }
        check_len("augmentation pairs", dataset.len(), pairs.len())?;
        let spec = model.spec();
        if dataset.spec.height != spec.height || dataset.spec.width != spec.width {
            return invalid(format!(
                "dataset grid {}x{} does not match model grid {}x{}",
                dataset.spec.height, dataset.spec.width, spec.height, spec.width
            ));
        }
        let mut items = Vec::with_capacity(dataset.len());
        for (s, (a1, a2)) in dataset.samples.iter().zip(pairs) {
            check_len("image", model.num_pixels(), s.x.len())?;
            check_len("label map", model.num_pixels(), s.y.len())?;
            if let Some(&bad) = s.y.iter().find(|&&c| c >= model.num_classes()) {
                return invalid(format!(
                    "label {bad} out of range for {} classes",
                    model.num_classes()
                ));
            }
            let (ce_x, ce_y) = if ce_on_augmented {
                (a1.apply(&s.x)?, a1.apply(&s.y)?)
            } else {
                (s.x.clone(), s.y.clone())
            };
            items.push(Item {
                x: s.x.clone(),
                y: s.y.clone(),
                ce_x,
                ce_y,
                x1: a1.apply(&s.x)?,
                x2: a2.apply(&s.x)?,
                pair: (a1.code(), a2.code()),
            });
        }
        Ok(Self {
            model,
            items,
            lambda_ac,
            metric,
            ce_on_augmented,
        })
    }

    /// Same data and pairs with a different consistency weight.
    pub fn with_lambda(&self, lambda_ac: f64) -> Result<Self> {
        if !(lambda_ac >= 0.0) || !lambda_ac.is_finite() {
            return invalid(format!("lambda_ac must be finite and >= 0, got {lambda_ac}"));
        }
        let mut p = self.clone();
        p.lambda_ac = lambda_ac;
        Ok(p)
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn num_params(&self) -> usize {
        self.model.num_params()
    }

    pub fn lambda_ac(&self) -> f64 {
        self.lambda_ac
    }

    pub fn metric(&self) -> ConsistencyMetric {
        self.metric
    }

    pub fn ce_on_augmented(&self) -> bool {
        self.ce_on_augmented
    }

    pub fn pair_codes(&self) -> Vec<(OpCode, OpCode)> {
        self.items.iter().map(|it| it.pair).collect()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.items[i].x
    }

    pub fn labels(&self, i: usize) -> &[usize] {
        &self.items[i].y
    }

    pub fn has_foreground(&self, i: usize) -> bool {
        self.items[i].y.iter().any(|&c| c != 0)
    }

    pub fn losses(&self, theta: &[f64], i: usize) -> Result<LossPair> {
        let it = &self.items[i];
        let ce = self.model.ce_loss_grad(theta, &it.ce_x, &it.ce_y, 1.0, None)?;
        let ac = self.model.ac_loss_grad_views(
            theta,
            &it.x1,
            &it.x2,
            self.lambda_ac,
            self.metric,
            1.0,
            None,
        )?;
        Ok(LossPair::new(ce, ac))
    }

    /// Consistency loss on an explicit pair, for runs that redraw pairs per visit.
    pub fn ac_with_pair(
        &self,
        theta: &[f64],
        i: usize,
        a1: &AugmentationOp,
        a2: &AugmentationOp,
        scale: f64,
        grad: Option<&mut [f64]>,
    ) -> Result<f64> {
        self.model.ac_loss_grad(
            theta,
            &self.items[i].x,
            a1,
            a2,
            self.lambda_ac,
            self.metric,
            scale,
            grad,
        )
    }

    pub fn all_losses(&self, theta: &[f64]) -> Result<Vec<LossPair>> {
        (0..self.len())
            .into_par_iter()
            .map(|i| self.losses(theta, i))
            .collect()
    }

    pub fn ce_grad(&self, theta: &[f64], i: usize, scale: f64, grad: &mut [f64]) -> Result<f64> {
        let it = &self.items[i];
        self.model
            .ce_loss_grad(theta, &it.ce_x, &it.ce_y, scale, Some(grad))
    }

    pub fn ac_grad(&self, theta: &[f64], i: usize, scale: f64, grad: &mut [f64]) -> Result<f64> {
        let it = &self.items[i];
        self.model.ac_loss_grad_views(
            theta,
            &it.x1,
            &it.x2,
            self.lambda_ac,
            self.metric,
            scale,
            Some(grad),
        )
    }

    pub fn dice_grad(
        &self,
        theta: &[f64],
        i: usize,
        epsilon: f64,
        scale: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        let it = &self.items[i];
        self.model
            .dice_loss_grad(theta, &it.ce_x, &it.ce_y, epsilon, scale, Some(grad))
    }

    /// `(1/n) Σ_i β_i ℓ_CE,i + (1 − β_i) ℓ_AC,i`.
    pub fn objective(&self, theta: &[f64], beta: &[f64]) -> Result<f64> {
        check_len("beta", self.len(), beta.len())?;
        let pairs = self.all_losses(theta)?;
        Ok(pairs
            .iter()
            .zip(beta)
            .map(|(p, &b)| b * p.ce + (1.0 - b) * p.ac)
            .sum::<f64>()
            / self.len() as f64)
    }

    /// Objective value and its full-batch gradient in θ at fixed β.
    pub fn objective_grad(&self, theta: &[f64], beta: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_len("beta", self.len(), beta.len())?;
        let n = self.len();
        let p = self.num_params();
        let inv_n = 1.0 / n as f64;
        let chunks: Vec<Result<(f64, Vec<f64>)>> = (0..n.div_ceil(REDUCE_CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut g = vec![0.0; p];
                let mut v = 0.0;
                for i in c * REDUCE_CHUNK..((c + 1) * REDUCE_CHUNK).min(n) {
                    let b = beta[i];
                    let ce = if b != 0.0 {
                        self.ce_grad(theta, i, b * inv_n, &mut g)?
                    } else {
                        self.losses(theta, i)?.ce
                    };
                    let ac = if b != 1.0 && self.lambda_ac != 0.0 {
                        self.ac_grad(theta, i, (1.0 - b) * inv_n, &mut g)?
                    } else {
                        0.0
                    };
                    v += b * ce + (1.0 - b) * ac;
                }
                Ok((v, g))
            })
            .collect();
        let mut value = 0.0;
        let mut grad = vec![0.0; p];
        for chunk in chunks {
            let (v, g) = chunk?;
            value += v;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        Ok((value * inv_n, grad))
    }

    /// Per-sample gradient norms `(‖∇ℓ_CE,i‖, ‖∇ℓ_AC,i‖)` at θ.
    pub fn grad_norms(&self, theta: &[f64]) -> Result<Vec<(f64, f64)>> {
        let p = self.num_params();
        (0..self.len())
            .into_par_iter()
            .map(|i| {
                let mut g = vec![0.0; p];
                self.ce_grad(theta, i, 1.0, &mut g)?;
                let ce = crate::model::norm(&g);
                g.iter_mut().for_each(|v| *v = 0.0);
                self.ac_grad(theta, i, 1.0, &mut g)?;
                Ok((ce, crate::model::norm(&g)))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Family, ModelSpec};
    use crate::synth::{generate, MixtureSpec, TagMode, Track};

    fn small() -> WacProblem {
        let spec = MixtureSpec {
            xi: 0.5,
            track: Track::Planted,
            num_volumes: 3,
            slices_per_volume: 7,
            height: 3,
            width: 3,
            num_classes: 3,
            noise_sigma: 0.1,
            sparsity_level: 0.0,
            margin_boost: 3.0,
            seed: 1,
            tag_mode: TagMode::Iid,
            latent_dim: 4,
            decoder_seed: 2,
            background_logit: 0.5,
        };
        let ds = generate(&spec).unwrap();
        let model = Model::new(ModelSpec {
            family: Family::ConvexLinear,
            ..spec.planted_model()
        })
        .unwrap();
        let pairs = draw_pairs(ds.len(), 3, 3, 4, PairSampling::Independent).unwrap();
        WacProblem::new(model, &ds, &pairs, 0.7, ConsistencyMetric::Euclidean, false).unwrap()
    }

    #[test]
    fn objective_grad_matches_sum_of_parts() {
        let prob = small();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let theta = prob.model().random_params(&mut rng, 0.3).values;
        let beta: Vec<f64> = (0..prob.len()).map(|i| (i as f64 + 0.5) / prob.len() as f64).collect();
        let (v, g) = prob.objective_grad(&theta, &beta).unwrap();
        assert!((v - prob.objective(&theta, &beta).unwrap()).abs() < 1e-12);
        let mut expect = vec![0.0; theta.len()];
        let n = prob.len() as f64;
        for i in 0..prob.len() {
            prob.ce_grad(&theta, i, beta[i] / n, &mut expect).unwrap();
            prob.ac_grad(&theta, i, (1.0 - beta[i]) / n, &mut expect).unwrap();
        }
        for (a, b) in g.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn parallel_reduction_is_thread_count_independent() {
        let prob = small();
        let theta = vec![0.05; prob.num_params()];
        let beta = vec![0.3; prob.len()];
        let a = prob.objective_grad(&theta, &beta).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| prob.objective_grad(&theta, &beta).unwrap());
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }
}
