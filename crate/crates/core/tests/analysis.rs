mod common;

use common::{problem_for, small, spec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wac_core::analysis::*;
use wac_core::losses::{ConsistencyMetric, LossPair};
use wac_core::model::norm;
use wac_core::optimizer::{recommended_lr, run, Projection, TrainConfig};
use wac_core::synth::{generate, Dataset, Sample, Tag};

/// A dataset whose images are all zero, so every prediction is the same for every θ.
fn flat(n: usize, background_logit: f64, labels_fg: bool) -> Dataset {
    let mut s = spec(1, n);
    s.background_logit = background_logit;
    let d = s.height * s.width;
    Dataset {
        samples: (0..n)
            .map(|i| Sample {
                x: vec![0.0; d],
                y: (0..d).map(|j| if labels_fg { (i + j) % s.num_classes } else { 0 }).collect(),
                volume_id: 0,
                slice_index: i,
                tag: Tag::Dense,
            })
            .collect(),
        spec: s,
        theta_star: None,
    }
}

#[test]
fn max_over_beta_single_sample() {
    let (v, b) = max_over_beta(&[LossPair::new(2.0, 3.0)]).unwrap();
    assert_eq!(v, 3.0);
    assert_eq!(b, vec![0.0]);
}

#[test]
fn max_over_beta_ties_pick_ones() {
    let l = vec![LossPair::new(0.7, 0.7); 4];
    let (v, b) = max_over_beta(&l).unwrap();
    assert!((v - 0.7).abs() < 1e-15);
    assert!(b.iter().all(|&x| x == 1.0));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn max_over_beta_matches_grid(pairs in prop::collection::vec((0.0f64..5.0, 0.0f64..5.0), 1..=3)) {
        let losses: Vec<LossPair> = pairs.iter().map(|&(c, a)| LossPair::new(c, a)).collect();
        let (v, _) = max_over_beta(&losses).unwrap();
        let n = losses.len() as f64;
        let best: f64 = losses
            .iter()
            .map(|l| {
                (0..201)
                    .map(|k| k as f64 / 200.0)
                    .map(|b| b * l.ce + (1.0 - b) * l.ac)
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .sum::<f64>()
            / n;
        prop_assert!((v - best).abs() < 1e-12);
    }

    #[test]
    fn gap_is_nonnegative_at_probed_points(seed in 0u64..500, radius in 0.1f64..1.0) {
        let (_, p) = small(0.8);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let proj = Projection::new(vec![0.0; p.num_params()], 1.0).unwrap();
        let dir = p.model().random_params(&mut rng, 1.0).values;
        let s = norm(&dir);
        let theta: Vec<f64> = dir.iter().map(|d| radius * d / s).collect();
        let beta: Vec<f64> = (0..p.len()).map(|_| rng.random::<f64>()).collect();
        let g = duality_gap(&p, &theta, &beta, &proj, &MinOptions::default()).unwrap();
        prop_assert!(g.gap >= -1e-6, "{}", g.gap);
        prop_assert!(g.gap_upper >= g.gap);
    }

    #[test]
    fn extra_probe_points_never_lower_constants(seed in 0u64..500) {
        let (_, p) = small(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = p.model().random_params(&mut rng, 0.5).values;
        let b = p.model().random_params(&mut rng, 0.5).values;
        let one = estimate_constants(&p, &[&a]).unwrap();
        let two = estimate_constants(&p, &[&a, &b]).unwrap();
        prop_assert!(two.c_theta >= one.c_theta && two.c_b >= one.c_b);
    }
}

#[test]
fn single_probe_constants_match_formulas() {
    let (_, p) = small(1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let theta = p.model().random_params(&mut rng, 0.5).values;
    let c = estimate_constants(&p, &[&theta]).unwrap();
    let n = p.len() as f64;
    let (mut gt, mut gb) = (0.0, 0.0);
    for i in 0..p.len() {
        let mut g1 = vec![0.0; theta.len()];
        let mut g2 = vec![0.0; theta.len()];
        let ce = p.ce_grad(&theta, i, 1.0, &mut g1).unwrap();
        let ac = p.ac_grad(&theta, i, 1.0, &mut g2).unwrap();
        gt += norm(&g1).max(norm(&g2)).powi(2) / n;
        gb += ce.max(ac).powi(2) / n;
    }
    assert!((c.c_theta - gt.sqrt()).abs() < 1e-12);
    assert!((c.c_b - gb.sqrt()).abs() < 1e-12);
}

#[test]
fn zero_loss_data_has_zero_c_b() {
    let ds = flat(4, 800.0, false);
    let p = problem_for(&ds, 1.0, ConsistencyMetric::Euclidean);
    let zero = vec![0.0; p.num_params()];
    let c = estimate_constants(&p, &[&zero]).unwrap();
    assert_eq!(c.c_b, 0.0);
}

#[test]
fn bound_examples() {
    assert!((theoretical_bound(1.0, 1.0, 0.0, 7, 20).unwrap() - 1.0).abs() < 1e-15);
    assert!((theoretical_bound(0.0, 3.0, 1.0, 2, 80).unwrap() - 1.0).abs() < 1e-15);
    let a = theoretical_bound(1.3, 0.4, 0.2, 9, 250).unwrap();
    let b = theoretical_bound(1.3, 0.4, 0.2, 9, 1000).unwrap();
    assert!((a / b - 2.0).abs() < 1e-12);
    assert!(theoretical_bound(1.0, 1.0, 1.0, 1, 0).is_err());
}

#[test]
fn oracle_on_theta_independent_data_returns_log_k() {
    let ds = flat(5, 0.0, true);
    let p = problem_for(&ds, 1.0, ConsistencyMetric::Euclidean);
    let zero = vec![0.0; p.num_params()];
    let r = minimize_theta(&p, &vec![1.0; p.len()], &zero, None, &MinOptions::default()).unwrap();
    assert!((r.value - 3f64.ln()).abs() < 1e-12, "{}", r.value);
    assert_eq!(r.theta, zero);
}

#[test]
fn oracle_agrees_from_different_starts() {
    let ds = generate(&spec(3, 6)).unwrap();
    let p = problem_for(&ds, 0.5, ConsistencyMetric::SquaredEuclidean);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let beta: Vec<f64> = (0..p.len()).map(|_| rng.random::<f64>()).collect();
    let proj = Projection::new(vec![0.0; p.num_params()], 1.5).unwrap();
    let opts = MinOptions {
        max_iterations: 20_000,
        ..MinOptions::default()
    };
    let a = minimize_theta(&p, &beta, &vec![0.0; p.num_params()], Some(&proj), &opts).unwrap();
    let start = p.model().random_params(&mut rng, 1.0).values;
    let b = minimize_theta(&p, &beta, &start, Some(&proj), &opts).unwrap();
    assert!(a.certificate < 1e-6 && b.certificate < 1e-6, "{} {}", a.certificate, b.certificate);
    assert!((a.value - b.value).abs() <= 10.0 * opts.tolerance, "{} {}", a.value, b.value);
}

#[test]
fn erm_oracle_fits_fully_labelled_planted_data() {
    let mut s = spec(4, 10);
    s.xi = 1.0;
    s.margin_boost = 20.0;
    s.background_logit = 0.0;
    let ds = generate(&s).unwrap();
    let p = problem_for(&ds, 1.0, ConsistencyMetric::Euclidean);
    let ones = vec![1.0; p.len()];
    let star = ds.theta_star.clone().unwrap();
    let at_star = p.objective(&star, &ones).unwrap();
    let fit = minimize_theta(
        &p,
        &ones,
        &vec![0.0; p.num_params()],
        None,
        &MinOptions {
            max_iterations: 5000,
            ..MinOptions::default()
        },
    )
    .unwrap();
    assert!(fit.value < 0.02 && fit.value < at_star, "{} {at_star}", fit.value);
    let (mut hit, mut total) = (0usize, 0usize);
    for s in &ds.samples {
        let pred = p.model().predict_labels(&fit.theta, &s.x).unwrap();
        hit += pred.iter().zip(&s.y).filter(|(a, b)| a == b).count();
        total += pred.len();
    }
    assert!(hit as f64 / total as f64 > 0.98, "{hit}/{total}");
}

#[test]
fn gap_vanishes_for_constant_objective_at_a_vertex() {
    let ds = flat(1, 0.0, true);
    let p = problem_for(&ds, 1.0, ConsistencyMetric::Euclidean);
    let proj = Projection::new(vec![0.0; p.num_params()], 1.0).unwrap();
    let zero = vec![0.0; p.num_params()];
    let g = duality_gap(&p, &zero, &[1.0], &proj, &MinOptions::default()).unwrap();
    assert!(g.gap.abs() < 1e-12, "{}", g.gap);
}

#[test]
fn gap_shrinks_with_horizon() {
    let mut s = spec(2, 10);
    s.margin_boost = 3.0;
    let ds = generate(&s).unwrap();
    let p = problem_for(&ds, 1.0, ConsistencyMetric::SquaredEuclidean);
    let star = ds.theta_star.clone().unwrap();
    let proj = Projection::new(star.clone(), 1.0).unwrap();
    let c = estimate_constants(&p, &[&star]).unwrap();
    let mut means = Vec::new();
    for t in [100u64, 1000, 10_000] {
        let lr = recommended_lr(1.0, c.c_theta, c.c_b, p.len(), t).unwrap();
        let mut total = 0.0;
        for seed in 0..5 {
            let mut cfg = TrainConfig::new(lr, lr, t);
            cfg.metric = ConsistencyMetric::SquaredEuclidean;
            cfg.seed = seed;
            cfg.log_every_epochs = 0;
            let rec = run(&p, &cfg, star.clone(), Some(proj.clone())).unwrap();
            total += duality_gap(&p, &rec.theta_bar, &rec.beta_bar, &proj, &MinOptions::default())
                .unwrap()
                .gap;
        }
        means.push(total / 5.0);
    }
    assert!(means[0] > means[1] && means[1] > means[2], "{means:?}");
}

#[test]
fn separation_examples() {
    let tags = [Tag::Dense, Tag::Sparse, Tag::Sparse, Tag::Dense, Tag::Sparse];
    let exact: Vec<f64> = tags.iter().map(|t| if *t == Tag::Dense { 1.0 } else { 0.0 }).collect();
    let r = separation_report(&exact, &tags).unwrap();
    assert_eq!(r.accuracy, 1.0);
    assert_eq!(r.margin, 0.5);
    let half = separation_report(&[0.5; 5], &tags).unwrap();
    assert_eq!(half.margin, 0.0);
    assert_eq!(half.accuracy, 0.6);
    assert_eq!(half.confusion.dense_high, 0);
}

#[test]
fn random_weights_give_chance_accuracy() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let tags: Vec<Tag> = (0..200).map(|i| if i % 2 == 0 { Tag::Dense } else { Tag::Sparse }).collect();
    let mut total = 0.0;
    for _ in 0..500 {
        let beta: Vec<f64> = (0..200).map(|_| rng.random::<f64>()).collect();
        total += separation_report(&beta, &tags).unwrap().accuracy;
    }
    assert!((total / 500.0 - 0.5).abs() < 0.01);
}

#[test]
fn rate_fit_edge_cases() {
    let ts = [10.0, 100.0, 1000.0];
    assert!(rate_fit(&ts, &[2.0, 2.0, 2.0]).unwrap().slope.abs() < 1e-12);
    let inv: Vec<f64> = ts.iter().map(|t| 5.0 / t).collect();
    assert!((rate_fit(&ts, &inv).unwrap().slope + 1.0).abs() < 1e-12);
    let sq: Vec<f64> = ts.iter().map(|t: &f64| 0.3 / t.sqrt()).collect();
    assert!((rate_fit(&ts, &sq).unwrap().slope + 0.5).abs() < 1e-9);
}
