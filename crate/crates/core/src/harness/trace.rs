//! Trajectory export: guided and unguided chains from identical noise
//! initializations, per-instance step logs, and aggregate mean/std series.

use std::path::Path;

use crate::diffusion::{
    initial_noise, sample, DenoiserParams, NoiseSchedule, SamplerConfig, TrajectoryRecord,
};
use crate::domain::NegotiationInstance;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::rng::{mean, Stream};

#[derive(Debug, Clone)]
pub struct TrajectoryExport {
    /// Per instance: (guided, unguided) trajectories from one shared
    /// initialization.
    pub pairs: Vec<(TrajectoryRecord, TrajectoryRecord)>,
}

fn trajectory_csv(record: &TrajectoryRecord) -> String {
    let mut out = String::from(
        "step,t,u_t1,u_t2,u0_pre1,u0_pre2,u0_post1,u0_post2,grad_norm,nash_product,frontier_distance\n",
    );
    for s in &record.steps {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{}\n",
            s.step,
            s.t,
            s.u_t[0],
            s.u_t[1],
            s.u0_pre[0],
            s.u0_pre[1],
            s.u0_post[0],
            s.u0_post[1],
            s.grad_norm,
            s.nash_product,
            s.frontier_distance
        ));
    }
    out
}

fn std_dev(values: &[f64]) -> f64 {
    let m = mean(values);
    let var = mean(
        &values
            .iter()
            .map(|v| (v - m) * (v - m))
            .collect::<Vec<_>>(),
    );
    var.sqrt()
}

/// Aggregate mean/std per step across the exported instances, per metric
/// and mode, plus per-step IR rates.
pub fn aggregate_csv(export: &TrajectoryExport, instances: &[&NegotiationInstance]) -> String {
    let mut out = String::from(
        "step,t,guided_nash_mean,guided_nash_std,unguided_nash_mean,unguided_nash_std,\
         guided_fdist_mean,guided_fdist_std,unguided_fdist_mean,unguided_fdist_std,\
         guided_grad_mean,guided_grad_std,guided_ir_rate,unguided_ir_rate\n",
    );
    if export.pairs.is_empty() {
        return out;
    }
    let steps = export.pairs[0].0.steps.len();
    for k in 0..steps {
        let collect = |f: &dyn Fn(&TrajectoryRecord) -> f64, guided: bool| -> Vec<f64> {
            export
                .pairs
                .iter()
                .map(|(g, u)| f(if guided { g } else { u }))
                .collect()
        };
        let nash = |r: &TrajectoryRecord| r.steps[k].nash_product;
        let fdist = |r: &TrajectoryRecord| r.steps[k].frontier_distance;
        let grad = |r: &TrajectoryRecord| r.steps[k].grad_norm;
        let g_nash = collect(&nash, true);
        let u_nash = collect(&nash, false);
        let g_fd = collect(&fdist, true);
        let u_fd = collect(&fdist, false);
        let g_gr = collect(&grad, true);
        let ir_rate = |guided: bool| -> f64 {
            let hits = export
                .pairs
                .iter()
                .zip(instances.iter())
                .filter(|((g, u), inst)| {
                    let s = if guided { g } else { u };
                    let d = inst.disagreement();
                    s.steps[k].u0_post[0] >= d[0] && s.steps[k].u0_post[1] >= d[1]
                })
                .count();
            hits as f64 / export.pairs.len() as f64
        };
        let t = export.pairs[0].0.steps[k].t;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            k,
            t,
            mean(&g_nash),
            std_dev(&g_nash),
            mean(&u_nash),
            std_dev(&u_nash),
            mean(&g_fd),
            std_dev(&g_fd),
            mean(&u_fd),
            std_dev(&u_fd),
            mean(&g_gr),
            std_dev(&g_gr),
            ir_rate(true),
            ir_rate(false),
        ));
    }
    out
}

/// Trace `count` instances: guided and unguided chains share the per-instance
/// initialization, so divergence is attributable to guidance alone. Writes
/// `trajectory_<id>_guided.csv`, `trajectory_<id>_unguided.csv`, and
/// `trajectory_aggregate.csv` when `out_dir` is given.
#[allow(clippy::too_many_arguments)]
pub fn export_trajectories(
    instances: &[&NegotiationInstance],
    encoder: &EncoderParams,
    denoiser: &DenoiserParams,
    sched: &NoiseSchedule,
    sampler_cfg: &SamplerConfig,
    guidance_cfg: &GuidanceConfig,
    count: usize,
    out_dir: Option<&Path>,
) -> Result<TrajectoryExport> {
    if instances.is_empty() || count == 0 {
        return Err(Error::Config("trace: nothing to export".to_string()));
    }
    let n = count.min(instances.len());
    let mut pairs = Vec::with_capacity(n);
    for (i, inst) in instances.iter().take(n).enumerate() {
        let seed = Stream::derive(sampler_cfg.seed, &format!("trace/{i}")).next_u64();
        let init = initial_noise(seed);
        let (_, guided) = sample(
            inst,
            encoder,
            denoiser,
            sched,
            sampler_cfg,
            Some(guidance_cfg),
            init,
            true,
        )?;
        let (_, unguided) = sample(
            inst, encoder, denoiser, sched, sampler_cfg, None, init, true,
        )?;
        pairs.push((
            guided.expect("trace requested"),
            unguided.expect("trace requested"),
        ));
    }
    let export = TrajectoryExport { pairs };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        for (i, (guided, unguided)) in export.pairs.iter().enumerate() {
            std::fs::write(
                dir.join(format!("trajectory_{i}_guided.csv")),
                trajectory_csv(guided),
            )?;
            std::fs::write(
                dir.join(format!("trajectory_{i}_unguided.csv")),
                trajectory_csv(unguided),
            )?;
        }
        std::fs::write(
            dir.join("trajectory_aggregate.csv"),
            aggregate_csv(&export, &instances[..n]),
        )?;
    }
    Ok(export)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::generate_synthetic;

    #[test]
    fn guided_and_unguided_share_initialization() {
        let mut rng = Stream::derive(71, "trace-test");
        let encoder = EncoderParams::with_defaults(&mut rng).unwrap();
        let denoiser = DenoiserParams::with_defaults(&mut rng).unwrap();
        let sched = NoiseSchedule::default_linear();
        let ds = generate_synthetic(12, 8, 1.0).unwrap();
        let test = ds.test();
        let cfg = SamplerConfig {
            steps: 10,
            ..SamplerConfig::default()
        };
        let export = export_trajectories(
            &test,
            &encoder,
            &denoiser,
            &sched,
            &cfg,
            &GuidanceConfig::default(),
            1,
            None,
        )
        .unwrap();
        assert_eq!(export.pairs.len(), 1);
        let (g, u) = &export.pairs[0];
        assert_eq!(g.steps[0].u_t, u.steps[0].u_t);
        assert_eq!(g.steps.len(), 10);
        assert_eq!(u.steps.len(), 10);
        // Pre-window estimates coincide; the window is where they may split.
        for (gs, us) in g.steps.iter().zip(u.steps.iter()) {
            if (gs.t as f64 / 1000.0) >= 0.25 {
                assert_eq!(gs.u0_post, us.u0_post);
            }
        }
    }

    #[test]
    fn aggregate_has_one_row_per_step() {
        let mut rng = Stream::derive(72, "trace-agg");
        let encoder = EncoderParams::with_defaults(&mut rng).unwrap();
        let denoiser = DenoiserParams::with_defaults(&mut rng).unwrap();
        let sched = NoiseSchedule::default_linear();
        let ds = generate_synthetic(30, 9, 1.0).unwrap();
        let test = ds.test();
        let cfg = SamplerConfig {
            steps: 10,
            ..SamplerConfig::default()
        };
        let export = export_trajectories(
            &test,
            &encoder,
            &denoiser,
            &sched,
            &cfg,
            &GuidanceConfig::default(),
            3,
            None,
        )
        .unwrap();
        let csv = aggregate_csv(&export, &test[..3]);
        // Header plus one row per step.
        assert_eq!(csv.trim_end().lines().count(), 1 + 10);
    }
}
