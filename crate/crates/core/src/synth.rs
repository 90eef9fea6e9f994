//! Synthetic mixtures of label-sparse and label-dense samples that share one
//! image distribution.
//!
//! Images are always drawn by the same code path from the same RNG stream;
//! the sparse/dense tag comes from a separate stream and only decides how the
//! true label map is reported.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, WacError};
use crate::model::{Family, Model, ModelSpec};

const STREAM_IMAGES: u64 = 0;
const STREAM_TAGS: u64 = 1;
const STREAM_THINNING: u64 = 2;
const STREAM_PLANTED: u64 = 3;
const STREAM_SUBSET: u64 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Track {
    /// Smooth Gaussian fields labeled by a planted convex-linear model.
    Planted,
    /// Disks and ellipses on a dark background.
    Geometric,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TagMode {
    /// Dense probability follows a bump over slice index (sparse volume ends).
    #[default]
    VolumeProfile,
    /// Every sample is dense with probability `xi`, independently.
    Iid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    Sparse,
    Dense,
}

fn default_latent_dim() -> usize {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub xi: f64,
    pub track: Track,
    pub num_volumes: usize,
    pub slices_per_volume: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub sparsity_level: f64,
    #[serde(default)]
    pub margin_boost: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub tag_mode: TagMode,
    /// Latent width of the planted model (planted track only).
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    #[serde(default)]
    pub decoder_seed: u64,
    #[serde(default)]
    pub background_logit: f64,
}

impl MixtureSpec {
    pub fn num_samples(&self) -> usize {
        self.num_volumes * self.slices_per_volume
    }

    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.xi) {
            return invalid(format!("xi must lie in [0, 1], got {}", self.xi));
        }
        if !(0.0..=1.0).contains(&self.sparsity_level) {
            return invalid(format!(
                "sparsity_level must lie in [0, 1], got {}",
                self.sparsity_level
            ));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return invalid("noise_sigma must be finite and >= 0");
        }
        if !(self.margin_boost >= 0.0) || !self.margin_boost.is_finite() {
            return invalid("margin_boost must be finite and >= 0");
        }
        if self.num_volumes == 0 || self.slices_per_volume == 0 {
            return invalid("num_volumes and slices_per_volume must be >= 1");
        }
        if self.height == 0 || self.width == 0 {
            return invalid("grid must have at least one pixel");
        }
        if self.num_classes < 2 {
            return invalid("num_classes must be >= 2");
        }
        if self.track == Track::Planted {
            self.planted_model().validate()?;
        }
        Ok(())
    }

    /// The convex-linear model whose argmax labels the dense planted samples.
    pub fn planted_model(&self) -> ModelSpec {
        ModelSpec {
            family: Family::ConvexLinear,
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
            latent_dim: self.latent_dim,
            decoder_seed: self.decoder_seed,
            hidden_dim: 0,
            background_logit: self.background_logit,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: Vec<usize>,
    pub volume_id: usize,
    pub slice_index: usize,
    /// Ground-truth subpopulation, for evaluation only.
    pub tag: Tag,
}

impl Sample {
    pub fn has_foreground(&self) -> bool {
        self.y.iter().any(|&c| c != 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub spec: MixtureSpec,
    pub samples: Vec<Sample>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_star: Option<Vec<f64>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn tags(&self) -> Vec<Tag> {
        self.samples.iter().map(|s| s.tag).collect()
    }

    pub fn dense_fraction(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let dense = self.samples.iter().filter(|s| s.tag == Tag::Dense).count();
        dense as f64 / self.samples.len() as f64
    }

    /// The samples tagged dense (used as held-out evaluation sets).
    pub fn dense_only(&self) -> Dataset {
        Dataset {
            spec: self.spec.clone(),
            samples: self
                .samples
                .iter()
                .filter(|s| s.tag == Tag::Dense)
                .cloned()
                .collect(),
            theta_star: self.theta_star.clone(),
        }
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Dense probability per slice: low at both volume ends, high in the middle,
/// symmetric, with mean exactly `xi` and every entry in `[0, 1]`.
pub fn sparse_dense_layout(xi: f64, slices_per_volume: usize) -> Result<Vec<f64>> {
    if slices_per_volume == 0 {
        return invalid("slices_per_volume must be >= 1");
    }
    if !(0.0..=1.0).contains(&xi) {
        return invalid(format!("xi must lie in [0, 1], got {xi}"));
    }
    let s = slices_per_volume;
    if s == 1 {
        return Ok(vec![xi]);
    }
    let shape: Vec<f64> = (0..s)
        .map(|i| {
            let v = (std::f64::consts::PI * (i as f64 + 0.5) / s as f64).sin();
            v * v
        })
        .collect();
    let mean = shape.iter().sum::<f64>() / s as f64;
    let lo = shape.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = shape.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut a = f64::INFINITY;
    if mean - lo > 0.0 {
        a = a.min(xi / (mean - lo));
    }
    if hi - mean > 0.0 {
        a = a.min((1.0 - xi) / (hi - mean));
    }
    if !a.is_finite() {
        a = 0.0;
    }
    // Pair symmetric slices so the profile is exactly mirror-symmetric.
    let mut profile = vec![0.0; s];
    for i in 0..s {
        let j = s - 1 - i;
        let sym = 0.5 * (shape[i] + shape[j]);
        profile[i] = (xi + a * (sym - mean)).clamp(0.0, 1.0);
    }
    Ok(profile)
}

/// Sample from the mixture. Returns the planted parameter for the planted track.
pub fn generate(spec: &MixtureSpec) -> Result<Dataset> {
    generate_impl(spec, spec.seed)
}

/// Fresh, fully labelled samples from the same task: new images under `seed`,
/// but the planted parameter of `spec` is kept.
pub fn generate_holdout(spec: &MixtureSpec, num_volumes: usize, seed: u64) -> Result<Dataset> {
    let mut s = spec.clone();
    s.xi = 1.0;
    s.tag_mode = TagMode::Iid;
    s.num_volumes = num_volumes;
    s.seed = seed;
    generate_impl(&s, spec.seed)
}

fn generate_impl(spec: &MixtureSpec, planted_seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let n = spec.num_samples();
    let d = spec.num_pixels();

    let mut image_rng = rng_for(spec.seed, STREAM_IMAGES);
    let mut tag_rng = rng_for(spec.seed, STREAM_TAGS);
    let mut thin_rng = rng_for(spec.seed, STREAM_THINNING);

    let planted = match spec.track {
        Track::Planted => {
            let model = Model::new(spec.planted_model())?;
            let mut rng = rng_for(planted_seed, STREAM_PLANTED);
            let mut theta = model.random_params(&mut rng, 1.0).values;
            let norm = crate::model::norm(&theta);
            if norm == 0.0 {
                return Err(WacError::NonFinite("planted parameter has zero norm".into()));
            }
            theta.iter_mut().for_each(|v| *v *= spec.margin_boost / norm);
            Some((model, theta))
        }
        Track::Geometric => None,
    };

    let profile = match spec.tag_mode {
        TagMode::VolumeProfile => sparse_dense_layout(spec.xi, spec.slices_per_volume)?,
        TagMode::Iid => vec![spec.xi; spec.slices_per_volume],
    };

    let mut samples = Vec::with_capacity(n);
    for v in 0..spec.num_volumes {
        for s in 0..spec.slices_per_volume {
            let (x, truth) = match &planted {
                Some((model, theta)) => {
                    let x = planted_image(&mut image_rng, spec);
                    let y = model.predict_labels(theta, &x)?;
                    (x, y)
                }
                None => geometric_image(&mut image_rng, spec),
            };
            debug_assert_eq!(x.len(), d);
            let dense = tag_rng.random::<f64>() < profile[s];
            let keep: Vec<bool> = (0..d)
                .map(|_| thin_rng.random::<f64>() < spec.sparsity_level)
                .collect();
            let (y, tag) = if dense {
                (truth, Tag::Dense)
            } else {
                let y = truth
                    .iter()
                    .zip(&keep)
                    .map(|(&c, &k)| if k { c } else { 0 })
                    .collect();
                (y, Tag::Sparse)
            };
            samples.push(Sample {
                x,
                y,
                volume_id: v,
                slice_index: s,
                tag,
            });
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        samples,
        theta_star: planted.map(|(_, theta)| theta),
    })
}

/// Unit-variance smoothed field (3×3 box blur of white noise) plus pixel noise.
fn planted_image(rng: &mut ChaCha8Rng, spec: &MixtureSpec) -> Vec<f64> {
    let (h, w) = (spec.height, spec.width);
    let white: Vec<f64> = (0..h * w).map(|_| rng.sample(StandardNormal)).collect();
    let mut field = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut acc = 0.0;
            let mut cnt = 0.0f64;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let rr = r as i64 + dr;
                    let cc = c as i64 + dc;
                    if rr >= 0 && rr < h as i64 && cc >= 0 && cc < w as i64 {
                        acc += white[rr as usize * w + cc as usize];
                        cnt += 1.0;
                    }
                }
            }
            // A mean of `cnt` unit normals has variance 1/cnt.
            field[r * w + c] = acc / cnt.sqrt();
        }
    }
    for v in field.iter_mut() {
        *v += spec.noise_sigma * rng.sample::<f64, _>(StandardNormal);
    }
    field
}

fn geometric_image(rng: &mut ChaCha8Rng, spec: &MixtureSpec) -> (Vec<f64>, Vec<usize>) {
    let (h, w) = (spec.height, spec.width);
    let k = spec.num_classes;
    let mut y = vec![0usize; h * w];
    let shapes = rng.random_range(1..=2usize);
    let scale = h.min(w) as f64;
    for _ in 0..shapes {
        let class = rng.random_range(1..k);
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let ellipse = rng.random::<bool>();
        let (ry, rx, angle) = if ellipse {
            (
                rng.random_range(0.12..0.35) * scale,
                rng.random_range(0.12..0.35) * scale,
                rng.random_range(0.0..std::f64::consts::PI),
            )
        } else {
            let r = rng.random_range(0.15..0.3) * scale;
            (r, r, 0.0)
        };
        let (sa, ca) = angle.sin_cos();
        for r in 0..h {
            for c in 0..w {
                let dy = r as f64 + 0.5 - cy;
                let dx = c as f64 + 0.5 - cx;
                let u = ca * dx + sa * dy;
                let v = -sa * dx + ca * dy;
                if (u / rx).powi(2) + (v / ry).powi(2) <= 1.0 {
                    y[r * w + c] = class;
                }
            }
        }
    }
    let x = y
        .iter()
        .map(|&c| {
            let base = if c == 0 { -0.5 } else { 0.5 };
            base + spec.noise_sigma * rng.sample::<f64, _>(StandardNormal)
        })
        .collect();
    (x, y)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubsetMode {
    #[default]
    Full,
    /// A uniformly drawn half of the volumes.
    HalfVol,
    /// Even slice indices only.
    HalfSlice,
    /// Per volume, the half of the slices nearest the volume ends.
    HalfSparse,
}

/// Select training subsets by volume/slice metadata.
pub fn subset(dataset: &Dataset, mode: SubsetMode, seed: u64) -> Result<Dataset> {
    let keep: Vec<bool> = match mode {
        SubsetMode::Full => vec![true; dataset.len()],
        SubsetMode::HalfSlice => dataset
            .samples
            .iter()
            .map(|s| s.slice_index % 2 == 0)
            .collect(),
        SubsetMode::HalfVol => {
            let mut vols: Vec<usize> = dataset.samples.iter().map(|s| s.volume_id).collect();
            vols.sort_unstable();
            vols.dedup();
            let mut rng = rng_for(seed, STREAM_SUBSET);
            let chosen = rand::seq::index::sample(&mut rng, vols.len(), vols.len() / 2).into_vec();
            let chosen: std::collections::BTreeSet<usize> =
                chosen.into_iter().map(|i| vols[i]).collect();
            dataset
                .samples
                .iter()
                .map(|s| chosen.contains(&s.volume_id))
                .collect()
        }
        SubsetMode::HalfSparse => {
            use std::collections::BTreeMap;
            let mut by_vol: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
            for (i, s) in dataset.samples.iter().enumerate() {
                by_vol.entry(s.volume_id).or_default().push((s.slice_index, i));
            }
            let mut keep = vec![false; dataset.len()];
            for slices in by_vol.values_mut() {
                let max_slice = slices.iter().map(|&(s, _)| s).max().unwrap_or(0);
                let center = max_slice as f64 / 2.0;
                // Farthest from the middle first; ties to the lower slice index.
                slices.sort_by(|a, b| {
                    let da = (a.0 as f64 - center).abs();
                    let db = (b.0 as f64 - center).abs();
                    db.total_cmp(&da).then(a.0.cmp(&b.0))
                });
                let take = (slices.len() / 2).max(1);
                for &(_, i) in slices.iter().take(take) {
                    keep[i] = true;
                }
            }
            keep
        }
    };
    let samples: Vec<Sample> = dataset
        .samples
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(s, _)| s.clone())
        .collect();
    if samples.is_empty() {
        return Err(WacError::Empty(format!("{mode:?} subset selected no samples")));
    }
    Ok(Dataset {
        spec: dataset.spec.clone(),
        samples,
        theta_star: dataset.theta_star.clone(),
    })
}
