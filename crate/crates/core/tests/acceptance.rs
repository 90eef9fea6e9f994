//! End-to-end acceptance criteria. Each prints one PASS/FAIL line; the process
//! fails if any criterion fails. Pass criterion names (e.g. `A3`) to run a subset.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wac_core::analysis::rate_fit;
use wac_core::config::ExperimentConfig;
use wac_core::experiments::{gap_curve, gradcheck, mean_dsc, prepare};
use wac_core::io::traces_csv;
use wac_core::metrics::{dsc_metric, hd95, DscConvention, EmptyConvention, MaskPair};
use wac_core::model::{Family, ModelSpec};
use wac_core::optimizer::{
    bregman_b, eg_update, norm_12, BaselineMode, Trainer,
};

const GAP_CURVE: &str = include_str!("../../../configs/gap_curve.toml");
const SEPARATION: &str = include_str!("../../../configs/separation.toml");
const HALF_SPARSE: &str = include_str!("../../../configs/half_sparse.toml");
const QUICKSTART: &str = include_str!("../../../configs/quickstart.toml");

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn cfg(text: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml_str(text).expect("bundled config parses")
}

fn a1() -> Outcome {
    let specs = [
        ModelSpec {
            family: Family::ConvexLinear,
            height: 4,
            width: 4,
            num_classes: 3,
            latent_dim: 5,
            decoder_seed: 1,
            hidden_dim: 0,
            background_logit: 0.5,
        },
        ModelSpec {
            family: Family::Mlp,
            height: 4,
            width: 4,
            num_classes: 3,
            latent_dim: 5,
            decoder_seed: 2,
            hidden_dim: 0,
            background_logit: 0.0,
        },
        ModelSpec {
            family: Family::Mlp,
            height: 4,
            width: 4,
            num_classes: 3,
            latent_dim: 5,
            decoder_seed: 3,
            hidden_dim: 6,
            background_logit: 0.0,
        },
    ];
    let mut worst: f64 = 0.0;
    for (i, spec) in specs.iter().enumerate() {
        let rows = gradcheck(spec, 20, 1e-6, 11 + i as u64).expect("gradcheck runs");
        for r in rows {
            worst = worst.max(r.max_rel_error);
        }
    }
    outcome(worst < 1e-4, format!("max relative error {worst:.2e}"))
}

/// Maximizer of `η (b ce + (1 − b) ac) − KL((b, 1−b) ‖ (β, 1−β))` over a uniform grid.
fn grid_mirror_step(beta: f64, ce: f64, ac: f64, eta: f64, points: usize) -> f64 {
    let mut best = (f64::NEG_INFINITY, 0.0);
    for k in 0..points {
        let b = k as f64 / (points - 1) as f64;
        let kl = |p: f64, q: f64| if p == 0.0 { 0.0 } else { p * (p / q).ln() };
        let v = eta * (b * ce + (1.0 - b) * ac) - kl(b, beta) - kl(1.0 - b, 1.0 - beta);
        if v > best.0 {
            best = (v, b);
        }
    }
    best.1
}

fn a2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_ratio: f64 = 0.0;
    for _ in 0..100 {
        let beta = rng.random_range(0.01..0.99);
        let ce = rng.random_range(0.0..3.0);
        let ac = rng.random_range(0.0..3.0);
        let eta = rng.random_range(0.0..2.0);
        let exact = eg_update(beta, ce, ac, eta).unwrap();
        for points in [201usize, 100_000] {
            let h = 1.0 / (points - 1) as f64;
            let g = grid_mirror_step(beta, ce, ac, eta, points);
            worst_ratio = worst_ratio.max((g - exact).abs() / h);
        }
    }
    let mut pinsker_ok = true;
    let mut min_slack = f64::INFINITY;
    for _ in 0..10_000 {
        let rows = rng.random_range(1..6);
        let mut draw = || -> Vec<[f64; 2]> {
            (0..rows)
                .map(|_| {
                    let p: f64 = rng.random_range(1e-6..1.0 - 1e-6);
                    [p, 1.0 - p]
                })
                .collect()
        };
        let b = draw();
        let bp = draw();
        let diff: Vec<[f64; 2]> = b.iter().zip(&bp).map(|(x, y)| [x[0] - y[0], x[1] - y[1]]).collect();
        let slack = bregman_b(&b, &bp).unwrap() - 0.5 * norm_12(&diff).powi(2);
        min_slack = min_slack.min(slack);
        pinsker_ok &= slack >= -1e-12;
        pinsker_ok &= bregman_b(&b, &b).unwrap() == 0.0;
    }
    outcome(
        worst_ratio <= 1.0 && pinsker_ok,
        format!("grid error ≤ {worst_ratio:.2} spacings, Pinsker min slack {min_slack:.2e}"),
    )
}

fn a3() -> Outcome {
    let curve = gap_curve(&cfg(GAP_CURVE)).expect("gap curve runs");
    let means: Vec<f64> = curve.means.iter().map(|m| m.1).collect();
    let monotone = means.windows(2).all(|w| w[1] < w[0]);
    let bounded = curve.means.iter().all(|(_, g, b)| *g <= 1.1 * b);
    let ts: Vec<f64> = curve.means.iter().map(|m| m.0 as f64).collect();
    let slope = rate_fit(&ts, &means).map(|f| f.slope).unwrap_or(f64::NAN);
    let rate = (-1.0..=-0.35).contains(&slope);
    let detail = curve
        .means
        .iter()
        .map(|(t, g, b)| format!("T={t}: {g:.3}/{b:.3}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(
        monotone && bounded && rate,
        format!("gap/bound {detail}; slope {slope:.3}"),
    )
}

fn a4() -> Outcome {
    let base = cfg(SEPARATION);
    let mut worst = (1.0f64, 1.0f64);
    for s in 0..5u64 {
        let c = base.with_seed(base.mixture.seed + s);
        let prep = prepare(&c).expect("prepare");
        let rec = prep.run(BaselineMode::AdaWac).expect("train");
        let (rep, vertex) = prep.separation(&rec).expect("separation");
        worst.0 = worst.0.min(rep.accuracy);
        worst.1 = worst.1.min(vertex);
    }
    outcome(
        worst.0 >= 0.95 && worst.1 >= 0.95,
        format!("min accuracy {:.3}, min vertex agreement {:.3} over 5 seeds", worst.0, worst.1),
    )
}

fn a5() -> Outcome {
    let base = cfg(HALF_SPARSE);
    let (mut erm, mut ada, mut max_dense) = (0.0, 0.0, 0.0f64);
    for s in 0..3u64 {
        let prep = prepare(&base.with_seed(s)).expect("prepare");
        max_dense = max_dense.max(prep.dataset.dense_fraction());
        let hold = prep.holdout().expect("holdout");
        for (mode, acc) in [(BaselineMode::Erm, &mut erm), (BaselineMode::AdaWac, &mut ada)] {
            let rec = prep.run(mode).expect("train");
            *acc += mean_dsc(&prep.evaluate(&rec.theta, &hold).expect("evaluate")) / 3.0;
        }
    }
    outcome(
        max_dense <= 0.1 && erm <= 0.2 && ada >= erm + 0.2,
        format!("dense fraction ≤ {max_dense:.3}; foreground DSC erm {erm:.3}, adawac {ada:.3}"),
    )
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn a6() -> Outcome {
    let mut c = cfg(QUICKSTART);
    c.train.iterations = 1500;
    c.train.batch_size = 4;
    let prep = prepare(&c).expect("prepare");
    let erm = prep.run(BaselineMode::Erm).unwrap();
    let trim0 = prep.run(BaselineMode::TrimRatio(0.0)).unwrap();
    let same_trim = bits(&erm.theta) == bits(&trim0.theta) && bits(&erm.theta_bar) == bits(&trim0.theta_bar);

    let acr = prep.run(BaselineMode::AcrOnly).unwrap();
    let mut t = prep.train_config(BaselineMode::AdaWac);
    t.eta_beta = 0.0;
    let frozen = wac_core::optimizer::run(&prep.problem, &t, prep.theta0.clone(), prep.projection.clone()).unwrap();
    let same_acr = bits(&acr.theta) == bits(&frozen.theta) && bits(&acr.beta) == bits(&frozen.beta);

    let mut t = prep.train_config(BaselineMode::AdaWac);
    t.lambda_ac = 0.0;
    let problem = prep.problem.with_lambda(0.0).unwrap();
    let mut tr = Trainer::new(&problem, t, prep.theta0.clone(), prep.projection.clone()).unwrap();
    let mut prev = tr.beta().to_vec();
    let mut monotone = true;
    while tr.iteration() < c.train.iterations {
        tr.step().unwrap();
        monotone &= tr.beta().iter().zip(&prev).all(|(b, p)| b >= p);
        prev = tr.beta().to_vec();
    }
    outcome(
        same_trim && same_acr && monotone,
        format!("trim_ratio(0)=erm {same_trim}, eta_beta=0 = acr_only {same_acr}, lambda=0 monotone {monotone}"),
    )
}

fn brute_hd95(pair: &MaskPair) -> f64 {
    let pts = |m: &[bool]| -> Vec<(i64, i64)> {
        (0..m.len())
            .filter(|&i| m[i])
            .map(|i| ((i / pair.width) as i64, (i % pair.width) as i64))
            .collect()
    };
    let (a, b) = (pts(&pair.pred), pts(&pair.gt));
    let directed = |from: &[(i64, i64)], to: &[(i64, i64)]| -> f64 {
        let mut d: Vec<f64> = from
            .iter()
            .map(|p| {
                let best = to
                    .iter()
                    .map(|q| (p.0 - q.0).pow(2) + (p.1 - q.1).pow(2))
                    .min()
                    .unwrap();
                (best as f64).sqrt()
            })
            .collect();
        d.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let rank = 0.95 * (d.len() - 1) as f64;
        let lo = rank.floor() as usize;
        let hi = rank.ceil() as usize;
        d[lo] + (d[hi] - d[lo]) * (rank - lo as f64)
    };
    directed(&a, &b).max(directed(&b, &a))
}

fn a7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut mismatches = 0;
    let mut tested = 0;
    while tested < 200 {
        let h = rng.random_range(1..=16);
        let w = rng.random_range(1..=16);
        let density = rng.random_range(0.02..0.6);
        let mut draw = || (0..h * w).map(|_| rng.random_bool(density)).collect::<Vec<bool>>();
        let (p, g) = (draw(), draw());
        if !p.contains(&true) || !g.contains(&true) {
            continue;
        }
        tested += 1;
        let pair = MaskPair::new(p, g, h, w).unwrap();
        let fast = hd95(&pair, EmptyConvention::Sentinel).unwrap().unwrap();
        if fast.to_bits() != brute_hd95(&pair).to_bits() {
            mismatches += 1;
        }
    }
    let empty = MaskPair::new(vec![false; 4], vec![false; 4], 2, 2).unwrap();
    let spurious = MaskPair::new(vec![true, false, false, false], vec![false; 4], 2, 2).unwrap();
    let table = dsc_metric(&empty, DscConvention::Corrected).unwrap() == 1.0
        && dsc_metric(&spurious, DscConvention::Corrected).unwrap() == 0.0;
    outcome(
        mismatches == 0 && table,
        format!("{mismatches}/200 hd95 mismatches; DSC empty-case table {table}"),
    )
}

fn a8() -> Outcome {
    let mut c = cfg(QUICKSTART);
    c.train.iterations = 2000;
    c.train.checkpoint_every = 500;
    c.train.log_every_epochs = 1;
    let csv = || {
        let prep = prepare(&c).unwrap();
        let rec = prep.run(BaselineMode::AdaWac).unwrap();
        (traces_csv(&rec, &prep.dataset).unwrap(), rec)
    };
    let (first, full) = csv();
    let (second, _) = csv();
    let same_csv = first == second;

    let prep = prepare(&c).unwrap();
    let ck = full
        .checkpoints
        .iter()
        .find(|k| k.iteration == 1000)
        .expect("checkpoint at 1000")
        .clone();
    let ck: wac_core::optimizer::Checkpoint =
        serde_json::from_slice(&wac_core::io::to_json_bytes(&ck).unwrap()).unwrap();
    let mut tr = Trainer::resume(
        &prep.problem,
        prep.train_config(BaselineMode::AdaWac),
        &ck,
        prep.projection.clone(),
    )
    .unwrap();
    tr.run_to_end().unwrap();
    let resumed = tr.finish();
    let same_resume = bits(&resumed.theta) == bits(&full.theta)
        && bits(&resumed.beta) == bits(&full.beta)
        && bits(&resumed.theta_bar) == bits(&full.theta_bar)
        && bits(&resumed.beta_bar) == bits(&full.beta_bar);
    outcome(
        same_csv && same_resume,
        format!("trace CSVs identical {same_csv}; resume bit-identical {same_resume}"),
    )
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn() -> Outcome, u64); 8] = [
        ("A1", a1, 10),
        ("A2", a2, 30),
        ("A3", a3, 600),
        ("A4", a4, 300),
        ("A5", a5, 600),
        ("A6", a6, 60),
        ("A7", a7, 30),
        ("A8", a8, 120),
    ];
    let mut failed = Vec::new();
    for (name, f, limit) in criteria {
        if !filters.is_empty() && !filters.iter().any(|x| name.eq_ignore_ascii_case(x)) {
            continue;
        }
        let t0 = Instant::now();
        let out = f();
        let took = t0.elapsed();
        let in_time = took <= Duration::from_secs(limit);
        let pass = out.pass && in_time;
        println!(
            "{name} {}: {} ({:.1}s of {limit}s)",
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            took.as_secs_f64()
        );
        if !pass {
            failed.push(name);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {}", failed.join(", "));
        std::process::exit(1);
    }
}
