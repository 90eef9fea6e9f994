//! Segmentation metrics: per-class Dice similarity and the 95th-percentile
//! Hausdorff distance on 2D masks.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, invalid, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPair {
    pub pred: Vec<bool>,
    pub gt: Vec<bool>,
    pub height: usize,
    pub width: usize,
}

impl MaskPair {
    pub fn new(pred: Vec<bool>, gt: Vec<bool>, height: usize, width: usize) -> Result<Self> {
        check_len("pred mask", height * width, pred.len())?;
        check_len("gt mask", height * width, gt.len())?;
        Ok(Self {
            pred,
            gt,
            height,
            width,
        })
    }

    /// Binary masks of class `k` from two label maps.
    pub fn for_class(pred: &[usize], gt: &[usize], k: usize, height: usize, width: usize) -> Result<Self> {
        Self::new(
            pred.iter().map(|&v| v == k).collect(),
            gt.iter().map(|&v| v == k).collect(),
            height,
            width,
        )
    }

    fn validate(&self) -> Result<()> {
        check_len("pred mask", self.height * self.width, self.pred.len())?;
        check_len("gt mask", self.height * self.width, self.gt.len())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DscConvention {
    /// Both empty scores 1; an empty ground truth with a nonempty prediction scores 0.
    #[default]
    Corrected,
    /// The older pipeline behaviour: an empty ground truth always scores 1.
    TransUnetLegacy,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyConvention {
    /// Any empty mask gives distance 0.
    #[default]
    Zero,
    /// One empty mask gives an undefined value (`None`), excluded from averages.
    Sentinel,
}

pub fn dsc_metric(pair: &MaskPair, convention: DscConvention) -> Result<f64> {
    pair.validate()?;
    let p = pair.pred.iter().filter(|&&v| v).count();
    let g = pair.gt.iter().filter(|&&v| v).count();
    if g == 0 {
        return Ok(match (convention, p) {
            (_, 0) => 1.0,
            (DscConvention::Corrected, _) => 0.0,
            (DscConvention::TransUnetLegacy, _) => 1.0,
        });
    }
    let inter = pair
        .pred
        .iter()
        .zip(&pair.gt)
        .filter(|(a, b)| **a && **b)
        .count();
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// One-dimensional squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    let mut first = None;
    for q in 0..n {
        if f[q].is_finite() {
            first = Some(q);
            break;
        }
    }
    let Some(q0) = first else {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    };
    v[0] = q0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in q0 + 1..n {
        if !f[q].is_finite() {
            continue;
        }
        let qf = q as f64;
        loop {
            let p = v[k] as f64;
            let s = ((f[q] + qf * qf) - (f[v[k]] + p * p)) / (2.0 * qf - 2.0 * p);
            if s <= z[k] {
                // the parabola at v[k] is hidden; k > 0 here since z[0] = -inf
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every pixel to the nearest set pixel
/// of `mask`; infinite everywhere when the mask is empty.
pub fn squared_distance_transform(mask: &[bool], height: usize, width: usize) -> Result<Vec<f64>> {
    check_len("mask", height * width, mask.len())?;
    let mut grid: Vec<f64> = mask
        .iter()
        .map(|&m| if m { 0.0 } else { f64::INFINITY })
        .collect();
    let len = height.max(width);
    let mut f = vec![0.0; len];
    let mut out = vec![0.0; len];
    let mut v = vec![0usize; len];
    let mut z = vec![0.0; len + 1];
    for c in 0..width {
        for r in 0..height {
            f[r] = grid[r * width + c];
        }
        edt_1d(&f[..height], &mut out[..height], &mut v, &mut z);
        for r in 0..height {
            grid[r * width + c] = out[r];
        }
    }
    for r in 0..height {
        f[..width].copy_from_slice(&grid[r * width..(r + 1) * width]);
        edt_1d(&f[..width], &mut out[..width], &mut v, &mut z);
        grid[r * width..(r + 1) * width].copy_from_slice(&out[..width]);
    }
    Ok(grid)
}

/// Inclusive linear-interpolation percentile (rank `q (m − 1)`) of a sorted slice.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> Result<f64> {
    if sorted.is_empty() {
        return invalid("percentile of an empty list");
    }
    if !(0.0..=1.0).contains(&q) {
        return invalid(format!("percentile must lie in [0, 1], got {q}"));
    }
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * frac)
}

fn directed_95(from: &[bool], to_sq_dist: &[f64]) -> Result<f64> {
    let mut d: Vec<f64> = from
        .iter()
        .zip(to_sq_dist)
        .filter(|(m, _)| **m)
        .map(|(_, s)| s.sqrt())
        .collect();
    d.sort_by(f64::total_cmp);
    percentile_sorted(&d, 0.95)
}

/// Symmetric 95th-percentile Hausdorff distance in pixel units.
pub fn hd95(pair: &MaskPair, empty: EmptyConvention) -> Result<Option<f64>> {
    pair.validate()?;
    let pe = !pair.pred.iter().any(|&v| v);
    let ge = !pair.gt.iter().any(|&v| v);
    match (pe, ge) {
        (true, true) => return Ok(Some(0.0)),
        (true, false) | (false, true) => {
            return Ok(match empty {
                EmptyConvention::Zero => Some(0.0),
                EmptyConvention::Sentinel => None,
            })
        }
        _ => {}
    }
    let to_gt = squared_distance_transform(&pair.gt, pair.height, pair.width)?;
    let to_pred = squared_distance_transform(&pair.pred, pair.height, pair.width)?;
    let a = directed_95(&pair.pred, &to_gt)?;
    let b = directed_95(&pair.gt, &to_pred)?;
    Ok(Some(a.max(b)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class_id: usize,
    pub dsc: f64,
    /// Mean over the slices where HD95 is defined; `None` if it never is.
    pub hd95: Option<f64>,
}

/// Mean per-class scores over a set of label-map slices, foreground classes only.
pub fn evaluate_slices(
    slices: &[(Vec<usize>, Vec<usize>)],
    num_classes: usize,
    height: usize,
    width: usize,
    dsc_convention: DscConvention,
    empty: EmptyConvention,
) -> Result<Vec<ClassScore>> {
    if slices.is_empty() {
        return invalid("no slices to evaluate");
    }
    let mut out = Vec::with_capacity(num_classes.saturating_sub(1));
    for k in 1..num_classes {
        let mut dsc = 0.0;
        let (mut hsum, mut hcount) = (0.0, 0usize);
        for (pred, gt) in slices {
            let pair = MaskPair::for_class(pred, gt, k, height, width)?;
            dsc += dsc_metric(&pair, dsc_convention)?;
            if let Some(h) = hd95(&pair, empty)? {
                hsum += h;
                hcount += 1;
            }
        }
        out.push(ClassScore {
            class_id: k,
            dsc: dsc / slices.len() as f64,
            hd95: (hcount > 0).then(|| hsum / hcount as f64),
        });
    }
    Ok(out)
}
