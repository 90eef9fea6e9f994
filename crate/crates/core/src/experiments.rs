//! Experiment drivers shared by the CLI and the test suites.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    duality_gap, estimate_constants, max_over_beta, rate_fit, separation_report, theoretical_bound,
    warm_start, Constants, MinOptions, RateFit, SeparationReport,
};
use crate::config::{CenterSpec, ExperimentConfig, InitSpec, LrRule};
use crate::error::{Result, WacError};
use crate::io::{self, fmt9, Csv};
use crate::metrics::{evaluate_slices, ClassScore};
use crate::augment::AugmentationOp;
use crate::losses::ConsistencyMetric;
use crate::model::{norm, Coordinates, Family, LossSelector, Model, ModelSpec};
use crate::optimizer::{recommended_lr, BaselineMode, Projection, RunRecord, TrainConfig, Trainer};
use crate::problem::{draw_pairs, WacProblem};
use crate::synth::{generate, generate_holdout, subset, Dataset, Tag};

const STREAM_INIT: u64 = 2;
const STREAM_PROBES: u64 = 3;

/// Everything a run needs, resolved from a config.
pub struct Prepared {
    pub config: ExperimentConfig,
    /// Training samples after the subset protocol.
    pub dataset: Dataset,
    pub problem: WacProblem,
    pub projection: Option<Projection>,
    pub theta0: Vec<f64>,
    /// Training settings with step sizes filled in.
    pub train: TrainConfig,
    pub constants: Option<Constants>,
}

pub fn load_or_generate(cfg: &ExperimentConfig) -> Result<Dataset> {
    match &cfg.data {
        Some(path) => io::load_dataset(Path::new(path)),
        None => generate(&cfg.mixture),
    }
}

/// Held-out, fully labelled samples for segmentation scores.
pub fn holdout_set(cfg: &ExperimentConfig, train_spec: &crate::synth::MixtureSpec) -> Result<Dataset> {
    let seed = cfg.eval.holdout_seed.unwrap_or(train_spec.seed.wrapping_add(1000));
    generate_holdout(train_spec, cfg.eval.holdout_volumes, seed)
}

fn resolve_center(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    problem: &WacProblem,
) -> Result<Option<Projection>> {
    let Some(p) = &cfg.projection else {
        return Ok(None);
    };
    let n = problem.num_params();
    let planted = || -> Result<Vec<f64>> {
        let star = dataset.theta_star.clone().ok_or_else(|| {
            WacError::Config("projection center needs a planted parameter".into())
        })?;
        if star.len() != n {
            return Err(WacError::Config(
                "planted parameter does not match the model; use the planted model spec".into(),
            ));
        }
        Ok(star)
    };
    let center = match &p.center {
        CenterSpec::Zero => vec![0.0; n],
        CenterSpec::Planted => planted()?,
        CenterSpec::ShrunkPlanted(r) => {
            let star = planted()?;
            let s = norm(&star);
            if s == 0.0 {
                return Err(WacError::Config("planted parameter is zero".into()));
            }
            star.iter().map(|v| v * r / s).collect()
        }
        CenterSpec::WarmStart {
            objective,
            iterations,
        } => warm_start(problem, *objective, &vec![0.0; n], *iterations)?,
    };
    Ok(Some(Projection::new(center, p.gamma)?))
}

/// Random points on the boundary of the ball, plus its center.
pub fn probe_points(proj: &Projection, model: &Model, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_PROBES);
    let mut pts = vec![proj.center.clone()];
    for _ in 0..count {
        let dir = model.random_params(&mut rng, 1.0).values;
        let s = norm(&dir);
        if s > 0.0 {
            pts.push(
                proj.center
                    .iter()
                    .zip(&dir)
                    .map(|(c, d)| c + proj.gamma * d / s)
                    .collect(),
            );
        }
    }
    pts
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let full = load_or_generate(cfg)?;
    let dataset = subset(&full, cfg.eval.subset, cfg.eval.subset_seed)?;
    let spec = cfg.model_spec()?;
    let model = Model::new(spec)?;
    let pairs = draw_pairs(
        dataset.len(),
        dataset.spec.height,
        dataset.spec.width,
        dataset.spec.seed,
        cfg.train.pair_sampling,
    )?;
    let problem = WacProblem::new(
        model,
        &dataset,
        &pairs,
        cfg.train.lambda_ac,
        cfg.train.metric,
        cfg.train.ce_on_augmented,
    )?;
    let projection = resolve_center(cfg, &dataset, &problem)?;
    let p = problem.num_params();
    let theta0 = match &cfg.init {
        InitSpec::Center => projection
            .as_ref()
            .map(|pr| pr.center.clone())
            .unwrap_or_else(|| vec![0.0; p]),
        InitSpec::Zero => vec![0.0; p],
        InitSpec::Random(scale) => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
            rng.set_stream(STREAM_INIT);
            problem.model().random_params(&mut rng, *scale).values
        }
    };
    let mut train = cfg.train.clone();
    let mut constants = None;
    if cfg.lr_rule == LrRule::Recommended {
        let proj = projection.as_ref().expect("validated");
        let mut pts = probe_points(proj, problem.model(), cfg.lr_probes, dataset.spec.seed);
        pts.push(theta0.clone());
        let refs: Vec<&[f64]> = pts.iter().map(|v| v.as_slice()).collect();
        let c = estimate_constants(&problem, &refs)?;
        let lr = recommended_lr(proj.gamma, c.c_theta, c.c_b, problem.len(), train.iterations)?;
        train.eta_theta = lr;
        train.eta_beta = lr;
        constants = Some(c);
    }
    Ok(Prepared {
        config: cfg.clone(),
        dataset,
        problem,
        projection,
        theta0,
        train,
        constants,
    })
}

impl Prepared {
    /// Step size the recommended rule gives for horizon `t`.
    pub fn lr_for(&self, t: u64) -> Result<f64> {
        match (&self.constants, &self.projection) {
            (Some(c), Some(p)) => recommended_lr(p.gamma, c.c_theta, c.c_b, self.problem.len(), t),
            _ => Ok(self.train.eta_theta),
        }
    }

    pub fn train_config(&self, mode: BaselineMode) -> TrainConfig {
        let mut t = self.train.clone();
        t.mode = mode;
        t
    }

    pub fn trainer(&self, mode: BaselineMode) -> Result<Trainer<'_>> {
        Trainer::new(
            &self.problem,
            self.train_config(mode),
            self.theta0.clone(),
            self.projection.clone(),
        )
    }

    pub fn run(&self, mode: BaselineMode) -> Result<RunRecord> {
        let mut t = self.trainer(mode)?;
        t.run_to_end()?;
        Ok(t.finish())
    }

    /// Separation of `β̄` and of the max-player's vertex at `θ̄` against the hidden tags.
    pub fn separation(&self, record: &RunRecord) -> Result<(SeparationReport, f64)> {
        let tags = self.dataset.tags();
        let rep = separation_report(&record.beta_bar, &tags)?;
        let (_, vertex) = max_over_beta(&self.problem.all_losses(&record.theta_bar)?)?;
        let agree = vertex
            .iter()
            .zip(&tags)
            .filter(|(b, t)| (**b > 0.5) == (**t == Tag::Dense))
            .count() as f64
            / tags.len() as f64;
        Ok((rep, agree))
    }

    pub fn holdout(&self) -> Result<Dataset> {
        holdout_set(&self.config, &self.dataset.spec)
    }

    /// Per-class scores of `theta` on fully labelled held-out samples.
    pub fn evaluate(&self, theta: &[f64], holdout: &Dataset) -> Result<Vec<ClassScore>> {
        let model = self.problem.model();
        let slices: Vec<(Vec<usize>, Vec<usize>)> = holdout
            .samples
            .par_iter()
            .map(|s| Ok((model.predict_labels(theta, &s.x)?, s.y.clone())))
            .collect::<Result<_>>()?;
        evaluate_slices(
            &slices,
            model.num_classes(),
            holdout.spec.height,
            holdout.spec.width,
            self.config.eval.dsc,
            self.config.eval.hd95,
        )
    }
}

/// Mean foreground DSC over classes.
pub fn mean_dsc(scores: &[ClassScore]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().map(|s| s.dsc).sum::<f64>() / scores.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub t: u64,
    pub seed: u64,
    pub gap: f64,
    pub gap_upper: f64,
    pub bound: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapCurve {
    pub rows: Vec<GapRow>,
    /// `(T, mean gap over seeds, bound)`.
    pub means: Vec<(u64, f64, f64)>,
    pub fit: Option<RateFit>,
    pub constants: Constants,
}

pub fn gap_curve(cfg: &ExperimentConfig) -> Result<GapCurve> {
    let sweep = cfg
        .sweep
        .clone()
        .ok_or_else(|| WacError::Config("gap-curve needs a [sweep] section".into()))?;
    if cfg.model_spec()?.family != Family::ConvexLinear {
        return Err(WacError::Unsupported(
            "gap-curve is only meaningful for the convex_linear family".into(),
        ));
    }
    if cfg.lr_rule != LrRule::Recommended {
        return Err(WacError::Config(
            "gap-curve needs lr_rule = \"recommended\"".into(),
        ));
    }
    let prep = prepare(cfg)?;
    let proj = prep.projection.clone().expect("validated");
    let c = prep.constants.expect("recommended rule sets constants");
    let n = prep.problem.len();
    let jobs: Vec<(u64, u64)> = sweep
        .t_values
        .iter()
        .flat_map(|&t| sweep.seeds.iter().map(move |&s| (t, s)))
        .collect();
    let rows: Vec<GapRow> = jobs
        .par_iter()
        .map(|&(t, seed)| {
            let lr = prep.lr_for(t)?;
            let mut tc = prep.train.clone();
            tc.mode = BaselineMode::AdaWac;
            tc.iterations = t;
            tc.seed = seed;
            tc.eta_theta = lr;
            tc.eta_beta = lr;
            tc.log_every_epochs = 0;
            tc.checkpoint_every = 0;
            let mut tr = Trainer::new(&prep.problem, tc, prep.theta0.clone(), Some(proj.clone()))?;
            tr.run_to_end()?;
            let rec = tr.finish();
            let g = duality_gap(&prep.problem, &rec.theta_bar, &rec.beta_bar, &proj, &MinOptions::default())?;
            Ok(GapRow {
                t,
                seed,
                gap: g.gap,
                gap_upper: g.gap_upper,
                bound: theoretical_bound(proj.gamma, c.c_theta, c.c_b, n, t)?,
                lr,
            })
        })
        .collect::<Result<_>>()?;
    let mut means = Vec::new();
    for &t in &sweep.t_values {
        let sel: Vec<&GapRow> = rows.iter().filter(|r| r.t == t).collect();
        let m = sel.iter().map(|r| r.gap).sum::<f64>() / sel.len() as f64;
        means.push((t, m, sel[0].bound));
    }
    let fit = if means.len() >= 2 && means.iter().all(|m| m.1 > 0.0) {
        let ts: Vec<f64> = means.iter().map(|m| m.0 as f64).collect();
        let gs: Vec<f64> = means.iter().map(|m| m.1).collect();
        Some(rate_fit(&ts, &gs)?)
    } else {
        None
    };
    Ok(GapCurve {
        rows,
        means,
        fit,
        constants: c,
    })
}

pub fn gap_csv(curve: &GapCurve) -> Csv {
    let mut csv = Csv::new(&["T", "seed", "gap", "bound", "c_theta", "c_b", "gap_upper", "lr"]);
    for r in &curve.rows {
        csv.row(&[
            r.t.to_string(),
            r.seed.to_string(),
            fmt9(r.gap),
            fmt9(r.bound),
            fmt9(curve.constants.c_theta),
            fmt9(curve.constants.c_b),
            fmt9(r.gap_upper),
            fmt9(r.lr),
        ]);
    }
    csv
}

/// Directory of one trained method inside an output directory.
pub fn mode_dir(out: &Path, mode: BaselineMode) -> PathBuf {
    out.join(mode.name())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub mode: String,
    pub subset: String,
    pub class_id: usize,
    pub dsc: f64,
    pub hd95: Option<f64>,
    pub separation_accuracy: f64,
    pub separation_margin: f64,
}

/// Score every configured method's final parameters on held-out dense samples.
pub fn compare(prep: &Prepared, records: &[(BaselineMode, RunRecord)]) -> Result<Vec<CompareRow>> {
    let holdout = prep.holdout()?;
    let subset = format!("{:?}", prep.config.eval.subset).to_lowercase();
    let tags = prep.dataset.tags();
    let mut rows = Vec::new();
    for (mode, rec) in records {
        let scores = prep.evaluate(&rec.theta, &holdout)?;
        let sep = separation_report(&rec.beta_bar, &tags)?;
        for s in scores {
            rows.push(CompareRow {
                mode: mode.name(),
                subset: subset.clone(),
                class_id: s.class_id,
                dsc: s.dsc,
                hd95: s.hd95,
                separation_accuracy: sep.accuracy,
                separation_margin: sep.margin,
            });
        }
    }
    Ok(rows)
}

pub fn compare_csv(rows: &[CompareRow]) -> Csv {
    let mut csv = Csv::new(&[
        "mode",
        "subset",
        "class_id",
        "dsc",
        "hd95",
        "separation_accuracy",
        "separation_margin",
    ]);
    for r in rows {
        csv.row(&[
            r.mode.clone(),
            r.subset.clone(),
            r.class_id.to_string(),
            fmt9(r.dsc),
            r.hd95.map(fmt9).unwrap_or_else(|| "undefined".into()),
            fmt9(r.separation_accuracy),
            fmt9(r.separation_margin),
        ]);
    }
    csv
}

/// Evaluation report in the `(run_id, class_id, dsc, hd95, convention)` layout.
pub fn eval_csv(run_id: &str, scores: &[ClassScore], prep: &Prepared) -> Csv {
    let mut csv = Csv::new(&["run_id", "class_id", "dsc", "hd95", "convention"]);
    let conv = format!("{:?}/{:?}", prep.config.eval.dsc, prep.config.eval.hd95).to_lowercase();
    for s in scores {
        csv.row(&[
            run_id.to_string(),
            s.class_id.to_string(),
            fmt9(s.dsc),
            s.hd95.map(fmt9).unwrap_or_else(|| "undefined".into()),
            conv.clone(),
        ]);
    }
    csv
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub loss: String,
    /// Worst per-trial relative error of the gradient vector.
    pub max_rel_error: f64,
}

/// Central finite differences against the analytic gradients of every loss, at random
/// parameters, images, labels and augmentation pairs.
pub fn gradcheck(spec: &ModelSpec, trials: usize, step: f64, seed: u64) -> Result<Vec<GradcheckRow>> {
    let model = Model::new(spec.clone())?;
    let group = AugmentationOp::group(spec.height, spec.width)?;
    let p = spec.num_pixels();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names = ["ce", "ac_squared", "ac_euclidean", "dice"];
    let mut worst = [0.0f64; 4];
    for t in 0..trials {
        let theta = model.random_params(&mut rng, 0.5).values;
        let x: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y: Vec<usize> = (0..p).map(|_| rng.random_range(0..spec.num_classes)).collect();
        let a1 = &group[rng.random_range(0..group.len())];
        let a2 = &group[rng.random_range(0..group.len())];
        let selectors = [
            LossSelector::CrossEntropy { x: &x, y: &y },
            LossSelector::Consistency {
                x: &x,
                a1,
                a2,
                lambda_ac: 1.0,
                metric: ConsistencyMetric::SquaredEuclidean,
            },
            LossSelector::Consistency {
                x: &x,
                a1,
                a2,
                lambda_ac: 1.0,
                metric: ConsistencyMetric::Euclidean,
            },
            LossSelector::Dice {
                x: &x,
                y: &y,
                epsilon: 1e-5,
            },
        ];
        for (w, sel) in worst.iter_mut().zip(&selectors) {
            let coords = if theta.len() <= 256 {
                Coordinates::All
            } else {
                Coordinates::Subset {
                    count: 256,
                    seed: seed.wrapping_add(t as u64),
                }
            };
            *w = w.max(model.finite_diff_check(&theta, sel, step, coords)?);
        }
    }
    Ok(names
        .iter()
        .zip(worst)
        .map(|(n, w)| GradcheckRow {
            loss: n.to_string(),
            max_rel_error: w,
        })
        .collect())
}
