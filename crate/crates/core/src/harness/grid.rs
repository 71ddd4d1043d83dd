//! Inference-time grid search over the guidance parameters against a fixed
//! checkpoint, ranked by the composite objective
//! `0.40 * IR + 0.35 * Efficiency + 0.15 * Nash + 0.10 * (1 - FDist)`,
//! plus per-parameter sensitivity scores and Spearman correlations.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffusion::{initial_noise, sample_batch, DenoiserParams, NoiseSchedule, SamplerConfig};
use crate::domain::NegotiationInstance;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::oracle::{average_ranks, evaluate, MetricsReport};
use crate::rng::{mean, Stream};

/// Value lists per searched parameter. Fixed parameters are single-element
/// lists. Domains are validated against the published search space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSearchSpec {
    pub lambda: Vec<f64>,
    pub t_start: Vec<f64>,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub steps: Vec<usize>,
}

impl GridSearchSpec {
    /// Evenly spaced values across `[lo, hi]`, endpoints exact.
    pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
        if n == 1 {
            return vec![lo];
        }
        (0..n)
            .map(|i| {
                if i + 1 == n {
                    hi
                } else {
                    lo + (hi - lo) * i as f64 / (n - 1) as f64
                }
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let check = |name: &str, values: &[f64], lo: f64, hi: f64| -> Result<()> {
            if values.is_empty() {
                return Err(Error::Config(format!("grid: empty domain for {name}")));
            }
            for v in values {
                if !(lo..=hi).contains(v) {
                    return Err(Error::Config(format!(
                        "grid: {name} value {v} outside search domain [{lo}, {hi}]"
                    )));
                }
            }
            Ok(())
        };
        check("lambda", &self.lambda, 0.005, 0.35)?;
        check("t_start", &self.t_start, 0.10, 0.70)?;
        check("alpha", &self.alpha, 5.0, 300.0)?;
        check("beta", &self.beta, 0.5, 50.0)?;
        check("gamma", &self.gamma, 0.5, 80.0)?;
        if self.steps.is_empty() {
            return Err(Error::Config("grid: empty domain for steps".to_string()));
        }
        for s in &self.steps {
            if ![10usize, 15, 25, 50].contains(s) {
                return Err(Error::Config(format!(
                    "grid: steps value {s} outside search domain {{10, 15, 25, 50}}"
                )));
            }
        }
        Ok(())
    }

    pub fn cell_count(&self) -> usize {
        self.lambda.len()
            * self.t_start.len()
            * self.alpha.len()
            * self.beta.len()
            * self.gamma.len()
            * self.steps.len()
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GridCell {
    pub lambda: f64,
    pub t_start: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: GridCell,
    pub metrics: MetricsReport,
    pub composite: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub parameter: String,
    /// Range of the per-value marginal means divided by the overall mean,
    /// averaged across the four metrics.
    pub score: f64,
    pub rho_ir: f64,
    pub rho_nash: f64,
    pub rho_efficiency: f64,
    pub rho_fdist: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSearchReport {
    pub cells: Vec<CellResult>,
    /// Cell indices ordered best-first by the composite objective.
    pub ranking: Vec<usize>,
    pub sensitivity: Vec<SensitivityRow>,
}

pub fn composite_objective(m: &MetricsReport) -> f64 {
    0.40 * m.ir_compliance
        + 0.35 * m.nash_efficiency
        + 0.15 * m.mean_nash_product
        + 0.10 * (1.0 - m.mean_frontier_distance)
}

/// Pure ranking over per-cell results (best first, index as tie-break), so
/// re-ranking saved reports reproduces the order.
pub fn rank_cells(cells: &[CellResult]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cells.len()).collect();
    order.sort_by(|&a, &b| {
        cells[b]
            .composite
            .partial_cmp(&cells[a].composite)
            .unwrap()
            .then(a.cmp(&b))
    });
    order
}

fn enumerate_cells(spec: &GridSearchSpec) -> Vec<GridCell> {
    let mut cells = Vec::with_capacity(spec.cell_count());
    for &lambda in &spec.lambda {
        for &t_start in &spec.t_start {
            for &alpha in &spec.alpha {
                for &beta in &spec.beta {
                    for &gamma in &spec.gamma {
                        for &steps in &spec.steps {
                            cells.push(GridCell {
                                lambda,
                                t_start,
                                alpha,
                                beta,
                                gamma,
                                steps,
                            });
                        }
                    }
                }
            }
        }
    }
    cells
}

/// Evaluate every grid cell on the validation instances against the fixed
/// checkpoint. Each (cell, instance) pair owns its noise stream.
#[allow(clippy::too_many_arguments)]
pub fn grid_search(
    spec: &GridSearchSpec,
    val_instances: &[&NegotiationInstance],
    encoder: &EncoderParams,
    denoiser: &DenoiserParams,
    sched: &NoiseSchedule,
    base_sampler: &SamplerConfig,
    base_guidance: &GuidanceConfig,
    jobs: usize,
) -> Result<GridSearchReport> {
    spec.validate()?;
    if val_instances.is_empty() {
        return Err(Error::Config("grid: no validation instances".to_string()));
    }
    let cells = enumerate_cells(spec);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;

    let results: Result<Vec<CellResult>> = pool.install(|| {
        cells
            .par_iter()
            .enumerate()
            .map(|(cell_idx, cell)| {
                let guidance = GuidanceConfig {
                    lambda: cell.lambda,
                    t_start: cell.t_start,
                    alpha: cell.alpha,
                    beta: cell.beta,
                    gamma: cell.gamma,
                    ..*base_guidance
                };
                let sampler = SamplerConfig {
                    steps: cell.steps,
                    ..*base_sampler
                };
                let inits: Vec<[f64; 2]> = (0..val_instances.len())
                    .map(|i| {
                        let seed = Stream::derive(
                            base_sampler.seed,
                            &format!("grid/{cell_idx}/sample/{i}"),
                        )
                        .next_u64();
                        initial_noise(seed)
                    })
                    .collect();
                let samples = sample_batch(
                    val_instances,
                    encoder,
                    denoiser,
                    sched,
                    &sampler,
                    Some(&guidance),
                    &inits,
                )?;
                let owned: Vec<NegotiationInstance> =
                    val_instances.iter().map(|i| (*i).clone()).collect();
                let metrics = evaluate(&samples, &owned)?;
                let composite = composite_objective(&metrics);
                Ok(CellResult {
                    cell: *cell,
                    metrics,
                    composite,
                })
            })
            .collect()
    });
    let cells = results?;
    let ranking = rank_cells(&cells);
    let sensitivity = sensitivity_rows(&cells);
    Ok(GridSearchReport {
        cells,
        ranking,
        sensitivity,
    })
}

fn metric_values(cells: &[CellResult]) -> [Vec<f64>; 4] {
    [
        cells.iter().map(|c| c.metrics.ir_compliance).collect(),
        cells.iter().map(|c| c.metrics.mean_nash_product).collect(),
        cells.iter().map(|c| c.metrics.nash_efficiency).collect(),
        cells
            .iter()
            .map(|c| c.metrics.mean_frontier_distance)
            .collect(),
    ]
}

fn param_values(cells: &[CellResult], param: &str) -> Vec<f64> {
    cells
        .iter()
        .map(|c| match param {
            "lambda" => c.cell.lambda,
            "t_start" => c.cell.t_start,
            "alpha" => c.cell.alpha,
            "beta" => c.cell.beta,
            "gamma" => c.cell.gamma,
            "steps" => c.cell.steps as f64,
            other => unreachable!("unknown parameter {other}"),
        })
        .collect()
}

/// Sensitivity score for one parameter and one metric: group cells by the
/// parameter value, take per-group means, and divide their range by the
/// absolute overall mean.
fn range_over_mean(params: &[f64], metric: &[f64]) -> f64 {
    let mut distinct: Vec<f64> = params.to_vec();
    distinct.sort_by(|a, b| a.partial_cmp(b).unwrap());
    distinct.dedup();
    if distinct.len() < 2 {
        return 0.0;
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in &distinct {
        let group: Vec<f64> = params
            .iter()
            .zip(metric.iter())
            .filter(|(p, _)| *p == v)
            .map(|(_, m)| *m)
            .collect();
        let g = mean(&group);
        lo = lo.min(g);
        hi = hi.max(g);
    }
    let overall = mean(metric);
    if overall.abs() < 1e-12 {
        return 0.0;
    }
    (hi - lo) / overall.abs()
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let mx = mean(x);
    let my = mean(y);
    let mut num = 0.0;
    let mut dx = 0.0;
    let mut dy = 0.0;
    for (a, b) in x.iter().zip(y.iter()) {
        num += (a - mx) * (b - my);
        dx += (a - mx) * (a - mx);
        dy += (b - my) * (b - my);
    }
    if dx == 0.0 || dy == 0.0 {
        return 0.0;
    }
    num / (dx * dy).sqrt()
}

/// Spearman rank correlation: average-rank transform, then Pearson on the
/// ranks.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> f64 {
    pearson(&average_ranks(x), &average_ranks(y))
}

fn sensitivity_rows(cells: &[CellResult]) -> Vec<SensitivityRow> {
    let metrics = metric_values(cells);
    ["lambda", "t_start", "alpha", "beta", "gamma", "steps"]
        .iter()
        .map(|param| {
            let pv = param_values(cells, param);
            let scores: Vec<f64> = metrics.iter().map(|m| range_over_mean(&pv, m)).collect();
            SensitivityRow {
                parameter: param.to_string(),
                score: mean(&scores),
                rho_ir: spearman_rho(&pv, &metrics[0]),
                rho_nash: spearman_rho(&pv, &metrics[1]),
                rho_efficiency: spearman_rho(&pv, &metrics[2]),
                rho_fdist: spearman_rho(&pv, &metrics[3]),
            }
        })
        .collect()
}

pub fn grid_csv(report: &GridSearchReport) -> String {
    let mut out = String::from(
        "lambda,t_start,alpha,beta,gamma,steps,ir_compliance,mean_nash_product,nash_efficiency,mean_frontier_distance,composite\n",
    );
    for c in &report.cells {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            c.cell.lambda,
            c.cell.t_start,
            c.cell.alpha,
            c.cell.beta,
            c.cell.gamma,
            c.cell.steps,
            c.metrics.ir_compliance,
            c.metrics.mean_nash_product,
            c.metrics.nash_efficiency,
            c.metrics.mean_frontier_distance,
            c.composite
        ));
    }
    out
}

pub fn sensitivity_csv(report: &GridSearchReport) -> String {
    let mut out =
        String::from("parameter,score,rho_ir,rho_nash,rho_efficiency,rho_fdist\n");
    for r in &report.sensitivity {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.parameter, r.score, r.rho_ir, r.rho_nash, r.rho_efficiency, r.rho_fdist
        ));
    }
    out
}
