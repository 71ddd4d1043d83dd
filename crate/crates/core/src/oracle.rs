//! Ground-truth solver for the Nash Bargaining Solution on a circular
//! frontier, feasible-set projection, the four evaluation metrics, and the
//! Wilcoxon signed-rank test.
//!
//! The solver never touches the learned pipeline; it exists so that every
//! generated allocation can be scored against an independent optimum.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::domain::{NegotiationInstance, UtilityVector};
use crate::error::{Error, Result};
use crate::rng::pairwise_sum;

/// Feasible geometry of one bilateral instance: the nonnegative ball of
/// radius `radius` plus the disagreement vector. Two membership predicates
/// are exposed because feasibility is used in two senses: the ball that
/// projection targets, and the individual-rationality half-spaces.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FeasibleSet {
    pub radius: f64,
    pub disagreement: [f64; 2],
}

impl FeasibleSet {
    pub fn new(radius: f64, disagreement: [f64; 2]) -> Result<Self> {
        if !(radius > 0.0) || !disagreement.iter().all(|v| v.is_finite()) {
            return Err(Error::Config(format!(
                "feasible set requires radius > 0 and finite d, got r={radius}, d={disagreement:?}"
            )));
        }
        Ok(FeasibleSet { radius, disagreement })
    }

    /// `u >= 0` componentwise and `|u| <= r`.
    pub fn feasible_ball(&self, u: &UtilityVector) -> bool {
        u.0.iter().all(|&v| v >= 0.0) && u.norm() <= self.radius
    }

    /// `u_i >= d_i` for every agent (weak inequality).
    pub fn ir_region(&self, u: &UtilityVector) -> bool {
        u.0[0] >= self.disagreement[0] && u.0[1] >= self.disagreement[1]
    }
}

/// Product of surpluses above the disagreement point. May be negative
/// outside the IR region.
pub fn nash_product(u: &UtilityVector, d: &[f64; 2]) -> f64 {
    (u.0[0] - d[0]) * (u.0[1] - d[1])
}

/// Feasible sub-arc `[theta_lo, theta_hi]` of the quarter circle on which
/// `u = (r cos, r sin)` satisfies `u >= max(d, 0)`.
fn feasible_arc(fs: &FeasibleSet) -> Result<(f64, f64)> {
    let r = fs.radius;
    let [d1, d2] = fs.disagreement;
    if d1 >= r || d2 >= r {
        return Err(Error::Infeasible(format!(
            "disagreement {:?} at or beyond radius {r}",
            fs.disagreement
        )));
    }
    let lo = if d2 <= 0.0 { 0.0 } else { (d2 / r).asin() };
    let hi = if d1 <= 0.0 {
        std::f64::consts::FRAC_PI_2
    } else {
        (d1 / r).acos()
    };
    if lo >= hi {
        return Err(Error::Infeasible(format!(
            "empty frontier arc for r={r}, d={:?}",
            fs.disagreement
        )));
    }
    Ok((lo, hi))
}

const COARSE_GRID: usize = 1024;
const THETA_TOL: f64 = 1e-10;

/// Exact NBS on the circular frontier: the Nash product is unimodal in the
/// arc angle, so a coarse bracket plus golden-section search recovers the
/// argmax to absolute angle tolerance 1e-10.
pub fn solve_nbs(fs: &FeasibleSet) -> Result<UtilityVector> {
    let (lo, hi) = feasible_arc(fs)?;
    let r = fs.radius;
    let [d1, d2] = fs.disagreement;
    let objective = |theta: f64| (r * theta.cos() - d1) * (r * theta.sin() - d2);

    // Coarse bracketing pass.
    let step = (hi - lo) / (COARSE_GRID - 1) as f64;
    let mut best_k = 0;
    let mut best_v = f64::NEG_INFINITY;
    for k in 0..COARSE_GRID {
        let v = objective(lo + step * k as f64);
        if v > best_v {
            best_v = v;
            best_k = k;
        }
    }
    let mut a = lo + step * best_k.saturating_sub(1) as f64;
    let mut b = (lo + step * (best_k + 1) as f64).min(hi);

    // Golden-section refinement (maximization).
    const RESP: f64 = 2.0 - 1.618_033_988_749_895; // 2 - phi
    let mut x1 = a + RESP * (b - a);
    let mut x2 = b - RESP * (b - a);
    let mut f1 = objective(x1);
    let mut f2 = objective(x2);
    while (b - a).abs() > THETA_TOL {
        if f1 > f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = a + RESP * (b - a);
            f1 = objective(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = b - RESP * (b - a);
            f2 = objective(x2);
        }
    }
    let theta = 0.5 * (a + b);
    Ok(UtilityVector([r * theta.cos(), r * theta.sin()]))
}

/// Clamp negatives to zero, then rescale onto the ball if the norm exceeds
/// the radius. The rescale repeats if rounding leaves the norm a hair above
/// `r`, so the output is always a fixed point of the projection.
pub fn project_feasible(u: &UtilityVector, radius: f64) -> UtilityVector {
    let mut v = [u.0[0].max(0.0), u.0[1].max(0.0)];
    for _ in 0..8 {
        let norm = (v[0] * v[0] + v[1] * v[1]).sqrt();
        if norm <= radius || norm == 0.0 {
            break;
        }
        let f = radius / norm;
        v = [v[0] * f, v[1] * f];
    }
    UtilityVector(v)
}

/// Radial projection onto the frontier arc (`|u| = r` exactly up to
/// rounding). The origin has no radial direction; it maps to the symmetric
/// frontier point.
pub fn project_frontier(u: &UtilityVector, radius: f64) -> UtilityVector {
    let v = [u.0[0].max(0.0), u.0[1].max(0.0)];
    let norm = (v[0] * v[0] + v[1] * v[1]).sqrt();
    if norm == 0.0 {
        let s = radius / std::f64::consts::SQRT_2;
        return UtilityVector([s, s]);
    }
    let f = radius / norm;
    UtilityVector([v[0] * f, v[1] * f])
}

/// Outward overshoot beyond the frontier: `max(0, |u| - r)`.
pub fn frontier_distance(u: &UtilityVector, radius: f64) -> f64 {
    (u.norm() - radius).max(0.0)
}

/// Aggregate evaluation of generated allocations against the per-instance
/// oracle NBS. Serializes as a flat JSON object; the per-instance series
/// are carried in memory for pairing and diagnostics only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ir_compliance: f64,
    pub mean_nash_product: f64,
    pub mean_oracle_nash_product: f64,
    /// Ratio of means: mean generated Nash product over mean oracle Nash
    /// product.
    pub nash_efficiency: f64,
    pub mean_frontier_distance: f64,
    pub n_samples: usize,
    #[serde(skip)]
    pub per_instance_nash: Vec<f64>,
    #[serde(skip)]
    pub per_instance_oracle_nash: Vec<f64>,
    /// Per-instance efficiency ratios, recorded for diagnostics; the headline
    /// number is the ratio of means above.
    #[serde(skip)]
    pub per_instance_efficiency: Vec<f64>,
}

/// Score `samples[i]` against `instances[i]` for all i.
pub fn evaluate(
    samples: &[UtilityVector],
    instances: &[NegotiationInstance],
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::Config("evaluate: empty input".to_string()));
    }
    if samples.len() != instances.len() {
        return Err(Error::Config(format!(
            "evaluate: {} samples vs {} instances",
            samples.len(),
            instances.len()
        )));
    }
    // Per-sample records in index order; the parallel map preserves order,
    // and the reductions below are fixed-order pairwise sums.
    let rows: Result<Vec<(f64, f64, f64, f64)>> = samples
        .par_iter()
        .zip(instances.par_iter())
        .map(|(u, inst)| {
            let d = inst.disagreement();
            let fs = FeasibleSet::new(inst.radius, d)?;
            let oracle = solve_nbs(&fs)?;
            let ir = if fs.ir_region(u) { 1.0 } else { 0.0 };
            let np = nash_product(u, &d);
            let onp = nash_product(&oracle, &d);
            let fd = frontier_distance(u, inst.radius);
            Ok((ir, np, onp, fd))
        })
        .collect();
    let rows = rows?;
    let n = rows.len();
    let ir: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let nash: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let oracle_nash: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let fdist: Vec<f64> = rows.iter().map(|r| r.3).collect();

    let mean_nash = pairwise_sum(&nash) / n as f64;
    let mean_oracle = pairwise_sum(&oracle_nash) / n as f64;
    if !(mean_oracle > 0.0) {
        return Err(Error::Degenerate(format!(
            "oracle mean Nash product {mean_oracle} not positive; efficiency undefined"
        )));
    }
    let per_eff = nash
        .iter()
        .zip(oracle_nash.iter())
        .map(|(a, b)| a / b)
        .collect();
    Ok(MetricsReport {
        ir_compliance: pairwise_sum(&ir) / n as f64,
        mean_nash_product: mean_nash,
        mean_oracle_nash_product: mean_oracle,
        nash_efficiency: mean_nash / mean_oracle,
        mean_frontier_distance: pairwise_sum(&fdist) / n as f64,
        n_samples: n,
        per_instance_nash: nash,
        per_instance_oracle_nash: oracle_nash,
        per_instance_efficiency: per_eff,
    })
}

// ---------------------------------------------------------------------------
// Wilcoxon signed-rank test
// ---------------------------------------------------------------------------

/// Ranks of `values` (ascending), ties replaced by the average rank.
pub(crate) fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Positions i..=j hold ties; assign the mean of ranks i+1..=j+1.
        let avg = (i + j + 2) as f64 / 2.0;
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

const WILCOXON_EXACT_LIMIT: usize = 25;
const WILCOXON_MIN_N: usize = 6;

/// Two-sided Wilcoxon signed-rank test for paired samples.
///
/// Zero differences are dropped. For fewer than 25 remaining pairs the
/// p-value is exact over all 2^n sign assignments of the observed ranks
/// (counted by dynamic programming over the doubled-rank sum); for 25 or
/// more it uses the normal approximation with tie correction and a
/// continuity correction. Returns `(W+, p)`.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(Error::Config(format!(
            "wilcoxon: length mismatch {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let diffs: Vec<f64> = x
        .iter()
        .zip(y.iter())
        .map(|(a, b)| a - b)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Err(Error::Degenerate(
            "wilcoxon: all differences are zero".to_string(),
        ));
    }
    let n = diffs.len();
    if n < WILCOXON_MIN_N {
        return Err(Error::Degenerate(format!(
            "wilcoxon: only {n} nonzero differences (need at least {WILCOXON_MIN_N})"
        )));
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let ranks = average_ranks(&abs);
    let w_plus: f64 = ranks
        .iter()
        .zip(diffs.iter())
        .filter(|(_, d)| **d > 0.0)
        .map(|(r, _)| *r)
        .sum();

    let p = if n < WILCOXON_EXACT_LIMIT {
        wilcoxon_exact_p(&ranks, w_plus)
    } else {
        wilcoxon_normal_p(&ranks, w_plus)
    };
    Ok((w_plus, p))
}

/// Exact two-sided p-value: both tails of the null distribution of W+
/// over every sign assignment of the observed (tie-averaged) ranks.
/// Average ranks are multiples of 1/2, so doubling makes them integers and
/// the distribution is countable by subset-sum DP. Counts stay below 2^25
/// and are exact in f64.
pub(crate) fn wilcoxon_exact_p(ranks: &[f64], w_plus: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut dist = vec![0.0f64; total + 1];
    dist[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        reach += r;
        for s in (r..=reach).rev() {
            dist[s] += dist[s - r];
        }
    }
    let denom = 2f64.powi(ranks.len() as i32);
    let w2 = (2.0 * w_plus).round() as usize;
    let p_le: f64 = dist[..=w2].iter().sum::<f64>() / denom;
    let p_ge: f64 = dist[w2..].iter().sum::<f64>() / denom;
    (2.0 * p_le.min(p_ge)).min(1.0)
}

/// Normal approximation with tie correction and continuity correction.
pub(crate) fn wilcoxon_normal_p(ranks: &[f64], w_plus: f64) -> f64 {
    let n = ranks.len() as f64;
    let mu = n * (n + 1.0) / 4.0;
    let mut var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0;
    // Tie correction: subtract (t^3 - t)/48 for each group of t tied ranks.
    let mut sorted = ranks.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        if t > 1.0 {
            var -= (t * t * t - t) / 48.0;
        }
        i = j + 1;
    }
    let dev = w_plus - mu;
    if dev == 0.0 || var <= 0.0 {
        return 1.0;
    }
    let z = (dev.abs() - 0.5) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (2.0 * (1.0 - normal.cdf(z))).clamp(0.0, 1.0)
}
