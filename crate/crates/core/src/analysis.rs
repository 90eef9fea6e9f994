//! Post-hoc diagnostics: duality gap of an averaged iterate, Lipschitz-type
//! constants, separation of β by hidden tag, and convergence-rate fits.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, invalid, Result, WacError};
use crate::losses::LossPair;
use crate::model::{distance, norm};
use crate::optimizer::Projection;
use crate::problem::WacProblem;
use crate::synth::Tag;

/// `max_{β ∈ [0,1]^n} (1/n) Σ β_i ce_i + (1 − β_i) ac_i`, attained at a vertex.
/// Ties pick `β_i = 1`.
pub fn max_over_beta(losses: &[LossPair]) -> Result<(f64, Vec<f64>)> {
    if losses.is_empty() {
        return Err(WacError::Empty("loss list".into()));
    }
    let beta: Vec<f64> = losses
        .iter()
        .map(|l| if l.ce >= l.ac { 1.0 } else { 0.0 })
        .collect();
    let value = losses.iter().map(|l| l.max()).sum::<f64>() / losses.len() as f64;
    Ok((value, beta))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinOptions {
    pub max_iterations: usize,
    /// Stop once the certified suboptimality drops below this.
    pub tolerance: f64,
    pub initial_step: f64,
}

impl Default for MinOptions {
    fn default() -> Self {
        Self {
            max_iterations: 2000,
            tolerance: 1e-8,
            initial_step: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinResult {
    pub theta: Vec<f64>,
    pub value: f64,
    /// Frank–Wolfe gap at `theta`; an upper bound on `value − min` for convex
    /// objectives over the ball. Infinite without a projection.
    pub certificate: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
}

fn fw_gap(theta: &[f64], grad: &[f64], proj: &Projection) -> f64 {
    let inner: f64 = grad
        .iter()
        .zip(theta.iter().zip(&proj.center))
        .map(|(g, (t, c))| g * (t - c))
        .sum();
    (inner + proj.gamma * norm(grad)).max(0.0)
}

/// Full-batch projected gradient descent with backtracking on
/// `θ ↦ (1/n) Σ β_i ce_i(θ) + (1 − β_i) ac_i(θ)`.
pub fn minimize_theta(
    problem: &WacProblem,
    beta: &[f64],
    start: &[f64],
    projection: Option<&Projection>,
    opts: &MinOptions,
) -> Result<MinResult> {
    check_len("beta", problem.len(), beta.len())?;
    check_len("start", problem.num_params(), start.len())?;
    if !(opts.initial_step > 0.0) {
        return invalid("initial_step must be > 0");
    }
    let mut theta = start.to_vec();
    if let Some(p) = projection {
        p.project(&mut theta);
    }
    let (mut value, mut grad) = problem.objective_grad(&theta, beta)?;
    let mut step = opts.initial_step;
    let mut iterations = 0;
    let cert = |t: &[f64], g: &[f64]| match projection {
        Some(p) => fw_gap(t, g, p),
        None => f64::INFINITY,
    };
    let mut certificate = cert(&theta, &grad);
    while iterations < opts.max_iterations {
        let gn = norm(&grad);
        if certificate <= opts.tolerance || gn == 0.0 {
            break;
        }
        iterations += 1;
        let mut accepted = false;
        for _ in 0..60 {
            let mut cand: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| t - step * g).collect();
            if let Some(p) = projection {
                p.project(&mut cand);
            }
            let cv = problem.objective(&cand, beta)?;
            let diff: Vec<f64> = cand.iter().zip(&theta).map(|(a, b)| a - b).collect();
            let lin: f64 = grad.iter().zip(&diff).map(|(g, d)| g * d).sum();
            let quad = diff.iter().map(|d| d * d).sum::<f64>() / (2.0 * step);
            if cv <= value + lin + quad + 1e-15 * value.abs() {
                let moved = norm(&diff) > 0.0;
                theta = cand;
                accepted = moved;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        let (v, g) = problem.objective_grad(&theta, beta)?;
        value = v;
        grad = g;
        certificate = cert(&theta, &grad);
        step *= 2.0;
    }
    Ok(MinResult {
        gradient_norm: norm(&grad),
        theta,
        value,
        certificate,
        iterations,
    })
}

/// Which fixed mixture of the two losses a warm start minimizes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarmObjective {
    /// Cross-entropy only.
    Erm,
    /// Equal-weight sum of cross-entropy and consistency.
    #[default]
    Acr,
}

/// Full-batch descent from `start` for a fixed budget, used to place the
/// projection ball around a sensible region of parameter space.
pub fn warm_start(
    problem: &WacProblem,
    objective: WarmObjective,
    start: &[f64],
    iterations: usize,
) -> Result<Vec<f64>> {
    let b = match objective {
        WarmObjective::Erm => 1.0,
        WarmObjective::Acr => 0.5,
    };
    let beta = vec![b; problem.len()];
    let opts = MinOptions {
        max_iterations: iterations,
        tolerance: 0.0,
        initial_step: 1.0,
    };
    Ok(minimize_theta(problem, &beta, start, None, &opts)?.theta)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub gap: f64,
    /// Gap with the inner minimum replaced by its certified lower bound.
    pub gap_upper: f64,
    pub max_value: f64,
    pub min_value: f64,
    pub min_certificate: f64,
    pub min_iterations: usize,
}

/// `max_B L(θ̄, B) − min_{θ ∈ ball} L(θ, B̄)`.
pub fn duality_gap(
    problem: &WacProblem,
    theta_bar: &[f64],
    beta_bar: &[f64],
    projection: &Projection,
    opts: &MinOptions,
) -> Result<GapReport> {
    check_len("theta_bar", problem.num_params(), theta_bar.len())?;
    check_len("beta_bar", problem.len(), beta_bar.len())?;
    let (max_value, _) = max_over_beta(&problem.all_losses(theta_bar)?)?;
    let min = minimize_theta(problem, beta_bar, theta_bar, Some(projection), opts)?;
    Ok(GapReport {
        gap: max_value - min.value,
        gap_upper: max_value - (min.value - min.certificate),
        max_value,
        min_value: min.value,
        min_certificate: min.certificate,
        min_iterations: min.iterations,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    /// Bound on `‖∇_θ L_i‖` over the weight simplex, as a root-mean-square over samples.
    pub c_theta: f64,
    /// Bound on `‖∇_{B_i} L_i‖_∞`, as a root-mean-square over samples.
    pub c_b: f64,
}

/// Empirical constants: at each probe point take the worse of the two simplex
/// vertices per sample, then the largest value over probe points.
pub fn estimate_constants(problem: &WacProblem, points: &[&[f64]]) -> Result<Constants> {
    if points.is_empty() {
        return Err(WacError::Empty("probe points".into()));
    }
    let n = problem.len() as f64;
    let mut c_theta: f64 = 0.0;
    let mut c_b: f64 = 0.0;
    for theta in points {
        let norms = problem.grad_norms(theta)?;
        let gt = norms.iter().map(|(a, b)| a.max(*b).powi(2)).sum::<f64>() / n;
        let losses = problem.all_losses(theta)?;
        let gb = losses.iter().map(|l| l.max().powi(2)).sum::<f64>() / n;
        c_theta = c_theta.max(gt.sqrt());
        c_b = c_b.max(gb.sqrt());
    }
    Ok(Constants { c_theta, c_b })
}

/// `2 sqrt(5 (γ² C_θ² + 2 n C_B²) / T)`.
pub fn theoretical_bound(gamma: f64, c_theta: f64, c_b: f64, n: usize, t: u64) -> Result<f64> {
    for (name, v) in [("gamma", gamma), ("c_theta", c_theta), ("c_b", c_b)] {
        if !(v >= 0.0) || !v.is_finite() {
            return invalid(format!("{name} must be finite and >= 0, got {v}"));
        }
    }
    if t == 0 {
        return invalid("T must be positive");
    }
    let inner = gamma * gamma * c_theta * c_theta + 2.0 * n as f64 * c_b * c_b;
    Ok(2.0 * (5.0 * inner / t as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    /// Dense sample with β̄ > 1/2.
    pub dense_high: usize,
    pub dense_low: usize,
    pub sparse_high: usize,
    /// Sparse sample with β̄ ≤ 1/2.
    pub sparse_low: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    /// Fraction of samples where `β̄ > 1/2` coincides with the dense tag.
    pub accuracy: f64,
    /// Mean `|β̄ − 1/2|`.
    pub margin: f64,
    pub confusion: Confusion,
    pub mean_beta_dense: Option<f64>,
    pub mean_beta_sparse: Option<f64>,
}

pub fn separation_report(beta_bar: &[f64], tags: &[Tag]) -> Result<SeparationReport> {
    check_len("tags", beta_bar.len(), tags.len())?;
    if beta_bar.is_empty() {
        return Err(WacError::Empty("beta".into()));
    }
    let mut c = Confusion {
        dense_high: 0,
        dense_low: 0,
        sparse_high: 0,
        sparse_low: 0,
    };
    let (mut sd, mut ss) = (0.0, 0.0);
    for (&b, &t) in beta_bar.iter().zip(tags) {
        let high = b > 0.5;
        match (t, high) {
            (Tag::Dense, true) => c.dense_high += 1,
            (Tag::Dense, false) => c.dense_low += 1,
            (Tag::Sparse, true) => c.sparse_high += 1,
            (Tag::Sparse, false) => c.sparse_low += 1,
        }
        match t {
            Tag::Dense => sd += b,
            Tag::Sparse => ss += b,
        }
    }
    let n = beta_bar.len() as f64;
    let nd = c.dense_high + c.dense_low;
    let ns = c.sparse_high + c.sparse_low;
    Ok(SeparationReport {
        accuracy: (c.dense_high + c.sparse_low) as f64 / n,
        margin: beta_bar.iter().map(|b| (b - 0.5).abs()).sum::<f64>() / n,
        mean_beta_dense: (nd > 0).then(|| sd / nd as f64),
        mean_beta_sparse: (ns > 0).then(|| ss / ns as f64),
        confusion: c,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Least-squares line through `(log T, log gap)`.
pub fn rate_fit(ts: &[f64], gaps: &[f64]) -> Result<RateFit> {
    check_len("gaps", ts.len(), gaps.len())?;
    if ts.len() < 2 {
        return invalid("rate fit needs at least two points");
    }
    if ts.iter().chain(gaps).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return invalid("rate fit needs positive finite values");
    }
    let xs: Vec<f64> = ts.iter().map(|v| v.ln()).collect();
    let ys: Vec<f64> = gaps.iter().map(|v| v.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return invalid("rate fit needs distinct T values");
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(RateFit {
        slope,
        intercept: my - slope * mx,
        r_squared,
    })
}

/// Largest distance from `center` among `points`; a quick radius heuristic.
pub fn max_radius(center: &[f64], points: &[&[f64]]) -> f64 {
    points
        .iter()
        .map(|p| distance(p, center))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn max_over_beta_picks_vertices() {
        let l = [LossPair::new(2.0, 1.0), LossPair::new(0.5, 3.0), LossPair::new(1.0, 1.0)];
        let (v, b) = max_over_beta(&l).unwrap();
        assert_eq!(b, vec![1.0, 0.0, 1.0]);
        assert!((v - 2.0).abs() < 1e-15);
        assert!(max_over_beta(&[]).is_err());
    }

    #[test]
    fn bound_examples() {
        let b = theoretical_bound(1.0, 1.0, 0.0, 3, 5).unwrap();
        assert!((b - 2.0).abs() < 1e-15);
        let a = theoretical_bound(2.0, 0.5, 0.3, 10, 100).unwrap();
        let c = theoretical_bound(2.0, 0.5, 0.3, 10, 400).unwrap();
        assert!((a / c - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rate_fit_recovers_power_law() {
        let ts = [100.0, 1000.0, 10000.0, 100000.0];
        let gaps: Vec<f64> = ts.iter().map(|t: &f64| 3.0 * t.powf(-0.5)).collect();
        let f = rate_fit(&ts, &gaps).unwrap();
        assert!((f.slope + 0.5).abs() < 1e-12);
        assert!((f.intercept - 3f64.ln()).abs() < 1e-12);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
        assert!(rate_fit(&[1.0], &[1.0]).is_err());
        assert!(rate_fit(&[1.0, 2.0], &[1.0, -1.0]).is_err());
    }

    #[test]
    fn separation_counts() {
        let beta = [0.9, 0.2, 0.5, 0.6];
        let tags = [Tag::Dense, Tag::Sparse, Tag::Dense, Tag::Sparse];
        let r = separation_report(&beta, &tags).unwrap();
        assert_eq!(r.accuracy, 0.5);
        assert_eq!(r.confusion.dense_high, 1);
        assert_eq!(r.confusion.dense_low, 1);
        assert_eq!(r.confusion.sparse_high, 1);
        assert_eq!(r.confusion.sparse_low, 1);
        assert!((r.margin - (0.4 + 0.3 + 0.0 + 0.1) / 4.0).abs() < 1e-15);
    }
}
