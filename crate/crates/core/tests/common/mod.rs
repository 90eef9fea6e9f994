#![allow(dead_code)]

use wac_core::augment::PairSampling;
use wac_core::losses::ConsistencyMetric;
use wac_core::model::Model;
use wac_core::problem::{draw_pairs, WacProblem};
use wac_core::synth::{generate, Dataset, MixtureSpec, TagMode, Track};

pub fn spec(n_vol: usize, slices: usize) -> MixtureSpec {
    MixtureSpec {
        xi: 0.5,
        track: Track::Planted,
        num_volumes: n_vol,
        slices_per_volume: slices,
        height: 4,
        width: 4,
        num_classes: 3,
        noise_sigma: 0.1,
        sparsity_level: 0.5,
        margin_boost: 2.0,
        seed: 5,
        tag_mode: TagMode::Iid,
        latent_dim: 4,
        decoder_seed: 3,
        background_logit: 0.3,
    }
}

pub fn problem_for(ds: &Dataset, lambda: f64, metric: ConsistencyMetric) -> WacProblem {
    let model = Model::new(ds.spec.planted_model()).unwrap();
    let pairs = draw_pairs(ds.len(), ds.spec.height, ds.spec.width, 17, PairSampling::Distinct).unwrap();
    WacProblem::new(model, ds, &pairs, lambda, metric, false).unwrap()
}

pub fn small(lambda: f64) -> (Dataset, WacProblem) {
    let ds = generate(&spec(3, 6)).unwrap();
    let p = problem_for(&ds, lambda, ConsistencyMetric::Euclidean);
    (ds, p)
}

pub fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}
