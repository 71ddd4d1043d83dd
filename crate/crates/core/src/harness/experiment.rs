//! Experiment driver: trains or loads a checkpoint, samples one allocation
//! per test instance under the selected mode, and evaluates against the
//! oracle.
//!
//! Modes:
//! - `guided`: full guided DDIM with the configured guidance.
//! - `unguided`: identical chain, guidance never invoked.
//! - `projection`: unguided chain plus a single radial projection of each
//!   final sample onto the frontier arc.
//! - `hard_constraint`: guidance forced active at every step
//!   (`t_start = 1`).
//! - `supervised`: the same encoder feeding a direct regression head
//!   trained with squared error on the reference utilities.

use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfigFile;
use crate::diffusion::{
    initial_noise, sample_batch, train, DenoiserParams, NoiseSchedule, SamplerConfig, TrainConfig,
    TrainReport,
};
use crate::domain::{DatasetSplit, NegotiationInstance, UtilityVector};
use crate::encoder::{encode, encode_backward, EncodeCache, EncoderParams};
use crate::error::{Error, Result};
use crate::guidance::GuidanceConfig;
use crate::nn::checkpoint::Checkpoint;
use crate::nn::layers::{silu_backward, silu_forward, LayerNorm, Linear, Param};
use crate::nn::optim::AdamW;
use crate::nn::tensor::Tensor2D;
use crate::oracle::{evaluate, nash_product, project_frontier, solve_nbs, MetricsReport};
use crate::rng::Stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Guided,
    Unguided,
    Projection,
    HardConstraint,
    Supervised,
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "guided" => Ok(Mode::Guided),
            "unguided" => Ok(Mode::Unguided),
            "projection" => Ok(Mode::Projection),
            "hard_constraint" => Ok(Mode::HardConstraint),
            "supervised" => Ok(Mode::Supervised),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (expected guided, unguided, projection, hard_constraint, supervised)"
            ))),
        }
    }
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Guided => "guided",
            Mode::Unguided => "unguided",
            Mode::Projection => "projection",
            Mode::HardConstraint => "hard_constraint",
            Mode::Supervised => "supervised",
        }
    }
}

/// One line of `samples.csv`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRow {
    pub instance_id: usize,
    pub u1: f64,
    pub u2: f64,
    pub d1: f64,
    pub d2: f64,
    pub oracle_u1: f64,
    pub oracle_u2: f64,
    pub nash_product: f64,
    pub oracle_nash_product: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub mode: Mode,
    pub metrics: MetricsReport,
    pub rows: Vec<SampleRow>,
    pub train_report: Option<TrainReport>,
}

pub fn samples_csv(rows: &[SampleRow]) -> String {
    let mut out = String::from(
        "instance_id,u1,u2,d1,d2,oracle_u1,oracle_u2,nash_product,oracle_nash_product\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.instance_id,
            r.u1,
            r.u2,
            r.d1,
            r.d2,
            r.oracle_u1,
            r.oracle_u2,
            r.nash_product,
            r.oracle_nash_product
        ));
    }
    out
}

fn scoped_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Train encoder and denoiser per the config, or load them from the
/// configured checkpoint. A configured-but-missing checkpoint is an error.
pub fn prepare_models(
    cfg: &RunConfigFile,
    dataset: &DatasetSplit,
) -> Result<(EncoderParams, DenoiserParams, NoiseSchedule, Option<TrainReport>)> {
    let sched = cfg.noise_schedule()?;
    if let Some(path_str) = &cfg.experiment.checkpoint {
        let path = Path::new(path_str);
        if !path.exists() {
            return Err(Error::Checkpoint(format!(
                "checkpoint `{}` not found",
                path.display()
            )));
        }
        let ckpt = Checkpoint::load(path)?;
        if ckpt.kind != "diffusion" {
            return Err(Error::Checkpoint(format!(
                "checkpoint kind `{}`; expected `diffusion`",
                ckpt.kind
            )));
        }
        let arch = &cfg.architecture;
        let encoder = EncoderParams::load_from(
            &ckpt,
            arch.heads,
            arch.embed_dim,
            crate::domain::FEATURE_DIM,
        )?;
        let denoiser = DenoiserParams::load_from(
            &ckpt,
            2,
            arch.time_dim,
            arch.embed_dim,
            arch.hidden,
            arch.out_scale,
        )?;
        return Ok((encoder, denoiser, sched, None));
    }

    let mut init_rng = Stream::derive(cfg.seed, "init");
    let arch = &cfg.architecture;
    let mut encoder = EncoderParams::new(
        arch.heads,
        arch.embed_dim,
        crate::domain::FEATURE_DIM,
        &mut init_rng,
    )?;
    let mut denoiser = DenoiserParams::new(
        2,
        arch.time_dim,
        arch.embed_dim,
        arch.hidden,
        arch.out_scale,
        &mut init_rng,
    )?;
    let train_cfg = cfg.train_config();
    let report = train(dataset, &mut encoder, &mut denoiser, &sched, &train_cfg)?;
    Ok((encoder, denoiser, sched, Some(report)))
}

pub fn save_models(
    encoder: &EncoderParams,
    denoiser: &DenoiserParams,
    seed: u64,
    path: &Path,
) -> Result<()> {
    let mut ckpt = Checkpoint::new("diffusion", seed);
    ckpt.set_meta_u64("heads", encoder.heads as u64);
    ckpt.set_meta_u64("embed_dim", encoder.head_dim as u64);
    ckpt.set_meta_u64("time_dim", denoiser.time_dim as u64);
    ckpt.set_meta_u64("hidden", denoiser.hidden as u64);
    ckpt.set_meta_f64("out_scale", denoiser.c_out);
    encoder.save_into(&mut ckpt);
    denoiser.save_into(&mut ckpt);
    ckpt.save(path)
}

/// Sample one allocation per test instance (times `ensemble`) under the
/// given mode and evaluate. Instances are chunked and chunks sampled in
/// parallel; per-row outputs do not depend on the chunking.
#[allow(clippy::too_many_arguments)]
pub fn run_mode(
    mode: Mode,
    test_instances: &[&NegotiationInstance],
    encoder: &EncoderParams,
    denoiser: &DenoiserParams,
    sched: &NoiseSchedule,
    sampler_cfg: &SamplerConfig,
    guidance_cfg: &GuidanceConfig,
    ensemble: usize,
    jobs: usize,
) -> Result<ExperimentOutcome> {
    if test_instances.is_empty() {
        return Err(Error::Config("no test instances".to_string()));
    }
    if ensemble == 0 {
        return Err(Error::Config("ensemble must be >= 1".to_string()));
    }
    let guidance = match mode {
        Mode::Guided => Some(*guidance_cfg),
        Mode::HardConstraint => Some(GuidanceConfig {
            t_start: 1.0,
            ..*guidance_cfg
        }),
        Mode::Unguided | Mode::Projection => None,
        Mode::Supervised => {
            return Err(Error::Config(
                "supervised mode has a dedicated driver (run_supervised)".to_string(),
            ))
        }
    };

    // Expanded work list: (instance index, per-chain seed).
    let work: Vec<(usize, u64)> = (0..test_instances.len())
        .flat_map(|i| {
            (0..ensemble).map(move |k| {
                (
                    i,
                    Stream::derive(sampler_cfg.seed, &format!("sample/{i}/{k}")).next_u64(),
                )
            })
        })
        .collect();

    let pool = scoped_pool(jobs)?;
    let chunk_size = 64;
    let samples: Result<Vec<Vec<UtilityVector>>> = pool.install(|| {
        work.par_chunks(chunk_size)
            .map(|chunk| {
                let insts: Vec<&NegotiationInstance> =
                    chunk.iter().map(|&(i, _)| test_instances[i]).collect();
                let inits: Vec<[f64; 2]> =
                    chunk.iter().map(|&(_, s)| initial_noise(s)).collect();
                sample_batch(
                    &insts,
                    encoder,
                    denoiser,
                    sched,
                    sampler_cfg,
                    guidance.as_ref(),
                    &inits,
                )
            })
            .collect()
    });
    let mut samples: Vec<UtilityVector> = samples?.into_iter().flatten().collect();

    if mode == Mode::Projection {
        for (s, &(i, _)) in samples.iter_mut().zip(work.iter()) {
            *s = project_frontier(s, test_instances[i].radius);
        }
    }

    let eval_instances: Vec<NegotiationInstance> = work
        .iter()
        .map(|&(i, _)| test_instances[i].clone())
        .collect();
    let metrics = evaluate(&samples, &eval_instances)?;
    let rows = build_rows(&samples, &work, test_instances)?;
    Ok(ExperimentOutcome {
        mode,
        metrics,
        rows,
        train_report: None,
    })
}

fn build_rows(
    samples: &[UtilityVector],
    work: &[(usize, u64)],
    instances: &[&NegotiationInstance],
) -> Result<Vec<SampleRow>> {
    samples
        .iter()
        .zip(work.iter())
        .map(|(u, &(i, _))| {
            let inst = instances[i];
            let d = inst.disagreement();
            let oracle = solve_nbs(&inst.feasible_set()?)?;
            Ok(SampleRow {
                instance_id: i,
                u1: u.0[0],
                u2: u.0[1],
                d1: d[0],
                d2: d[1],
                oracle_u1: oracle.0[0],
                oracle_u2: oracle.0[1],
                nash_product: nash_product(u, &d),
                oracle_nash_product: nash_product(&oracle, &d),
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Supervised regression baseline
// ---------------------------------------------------------------------------

/// Regression head over the context embedding: the denoiser stack shape
/// without time conditioning or output scaling.
#[derive(Debug, Clone)]
pub struct SupervisedHead {
    lin1: Linear,
    ln1: LayerNorm,
    lin2: Linear,
    ln2: LayerNorm,
    lin3: Linear,
}

impl SupervisedHead {
    fn new(context_dim: usize, hidden: usize, rng: &mut Stream) -> Self {
        SupervisedHead {
            lin1: Linear::new(context_dim, hidden, rng),
            ln1: LayerNorm::new(hidden),
            lin2: Linear::new(hidden, hidden, rng),
            ln2: LayerNorm::new(hidden),
            lin3: Linear::new(hidden, 2, rng),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.lin1.weight,
            &mut self.lin1.bias,
            &mut self.ln1.gain,
            &mut self.ln1.bias,
            &mut self.lin2.weight,
            &mut self.lin2.bias,
            &mut self.ln2.gain,
            &mut self.ln2.bias,
            &mut self.lin3.weight,
            &mut self.lin3.bias,
        ]
    }

    fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn forward(&self, contexts: &Tensor2D) -> Result<(Tensor2D, SupervisedCache)> {
        let (a1, lin1) = self.lin1.forward(contexts)?;
        let (n1, ln1) = self.ln1.forward(&a1)?;
        let (s1, act1) = silu_forward(&n1);
        let (a2, lin2) = self.lin2.forward(&s1)?;
        let (n2, ln2) = self.ln2.forward(&a2)?;
        let (s2, act2) = silu_forward(&n2);
        let (out, lin3) = self.lin3.forward(&s2)?;
        Ok((
            out,
            SupervisedCache {
                lin1,
                ln1,
                act1,
                lin2,
                ln2,
                act2,
                lin3,
            },
        ))
    }

    fn backward(&mut self, grad_out: &Tensor2D, cache: &SupervisedCache) -> Result<Tensor2D> {
        let g = self.lin3.backward(grad_out, &cache.lin3)?;
        let g = silu_backward(&g, &cache.act2)?;
        let g = self.ln2.backward(&g, &cache.ln2)?;
        let g = self.lin2.backward(&g, &cache.lin2)?;
        let g = silu_backward(&g, &cache.act1)?;
        let g = self.ln1.backward(&g, &cache.ln1)?;
        self.lin1.backward(&g, &cache.lin1)
    }
}

#[derive(Debug, Clone)]
struct SupervisedCache {
    lin1: crate::nn::layers::LinearCache,
    ln1: crate::nn::layers::LayerNormCache,
    act1: crate::nn::layers::ActivationCache,
    lin2: crate::nn::layers::LinearCache,
    ln2: crate::nn::layers::LayerNormCache,
    act2: crate::nn::layers::ActivationCache,
    lin3: crate::nn::layers::LinearCache,
}

/// Train a fresh encoder plus regression head on the reference utilities
/// (squared error), then predict each test instance directly.
pub fn run_supervised(
    dataset: &DatasetSplit,
    test_instances: &[&NegotiationInstance],
    cfg: &RunConfigFile,
) -> Result<ExperimentOutcome> {
    let train_cfg: TrainConfig = cfg.train_config();
    let arch = &cfg.architecture;
    let mut rng = Stream::derive(cfg.seed, "init/supervised");
    let mut encoder = EncoderParams::new(
        arch.heads,
        arch.embed_dim,
        crate::domain::FEATURE_DIM,
        &mut rng,
    )?;
    let mut head = SupervisedHead::new(arch.embed_dim, arch.hidden, &mut rng);

    let instances: Vec<&NegotiationInstance> = dataset.train();
    if instances.is_empty() {
        return Err(Error::Config("train split is empty".to_string()));
    }
    let targets: Result<Vec<[f64; 2]>> = instances
        .iter()
        .map(|inst| {
            inst.reference_utility.as_ref().map(|u| u.0).ok_or_else(|| {
                Error::Config("training instance lacks a reference utility".to_string())
            })
        })
        .collect();
    let targets = targets?;

    let n = instances.len();
    let steps_per_epoch = n.div_ceil(train_cfg.batch_size);
    let mut adamw_cfg = train_cfg.adamw;
    adamw_cfg.horizon = train_cfg.epochs * steps_per_epoch;
    let mut optimizer = AdamW::new(adamw_cfg);
    let mut shuffle_rng = Stream::derive(cfg.seed, "supervised/shuffle");

    let mut report = TrainReport::default();
    for epoch in 0..train_cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        shuffle_rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(train_cfg.batch_size) {
            let m = chunk.len();
            let mut contexts = Tensor2D::zeros(m, arch.embed_dim);
            let mut caches: Vec<EncodeCache> = Vec::with_capacity(m);
            for (row, &idx) in chunk.iter().enumerate() {
                let (h, cache) = encode(instances[idx], &encoder)?;
                contexts.row_mut(row).copy_from_slice(&h.0);
                caches.push(cache);
            }
            let (pred, cache) = head.forward(&contexts)?;
            let mut grad = Tensor2D::zeros(m, 2);
            let mut loss = 0.0;
            for (row, &idx) in chunk.iter().enumerate() {
                for c in 0..2 {
                    let diff = pred.at(row, c) - targets[idx][c];
                    loss += diff * diff / m as f64;
                    *grad.at_mut(row, c) = 2.0 * diff / m as f64;
                }
            }
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "supervised loss at epoch {epoch}"
                )));
            }
            encoder.zero_grads();
            head.zero_grads();
            let grad_ctx = head.backward(&grad, &cache)?;
            for (row, c) in caches.iter().enumerate() {
                encode_backward(&mut encoder, grad_ctx.row(row), c)?;
            }
            let mut params = encoder.params_mut();
            params.extend(head.params_mut());
            optimizer.step(&mut params)?;
            loss_sum += loss * m as f64;
            seen += m;
        }
        report.log.push(crate::diffusion::EpochLog {
            epoch,
            phase: 1,
            l_mse: loss_sum / seen as f64,
            l_guide: 0.0,
            beta_ir: 0.0,
            lr: optimizer.learning_rate(),
        });
    }

    // Deterministic single-pass predictions.
    let mut samples = Vec::with_capacity(test_instances.len());
    for inst in test_instances {
        let (h, _) = encode(inst, &encoder)?;
        let ctx = Tensor2D::from_vec(1, arch.embed_dim, h.0)?;
        let (pred, _) = head.forward(&ctx)?;
        samples.push(UtilityVector([pred.at(0, 0), pred.at(0, 1)]));
    }
    let eval_instances: Vec<NegotiationInstance> =
        test_instances.iter().map(|i| (*i).clone()).collect();
    let metrics = evaluate(&samples, &eval_instances)?;
    let work: Vec<(usize, u64)> = (0..test_instances.len()).map(|i| (i, 0)).collect();
    let rows = build_rows(&samples, &work, test_instances)?;
    Ok(ExperimentOutcome {
        mode: Mode::Supervised,
        metrics,
        rows,
        train_report: Some(report),
    })
}

/// End-to-end experiment: dataset, models, sampling, evaluation, artifacts.
pub fn run_experiment(cfg: &RunConfigFile) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let mode = cfg.mode()?;
    let dataset = cfg.build_dataset()?;
    let test_owned = test_instances(cfg, &dataset);
    let test_refs: Vec<&NegotiationInstance> = test_owned.iter().collect();

    let mut outcome = match mode {
        Mode::Supervised => {
            if cfg.experiment.checkpoint.is_some() {
                return Err(Error::Config(
                    "supervised mode trains its own head; checkpoint not supported".to_string(),
                ));
            }
            run_supervised(&dataset, &test_refs, cfg)?
        }
        _ => {
            let (encoder, denoiser, sched, train_report) = prepare_models(cfg, &dataset)?;
            let mut out = run_mode(
                mode,
                &test_refs,
                &encoder,
                &denoiser,
                &sched,
                &cfg.sampler_config(),
                &cfg.guidance_config(),
                cfg.experiment.ensemble,
                cfg.experiment.jobs,
            )?;
            if train_report.is_some() {
                if let Some(dir) = cfg.output_dir() {
                    std::fs::create_dir_all(&dir)?;
                    save_models(&encoder, &denoiser, cfg.seed, &dir.join("checkpoint.json"))?;
                }
            }
            out.train_report = train_report;
            out
        }
    };

    if let Some(dir) = cfg.output_dir() {
        std::fs::create_dir_all(&dir)?;
        write_outcome_artifacts(cfg, &mut outcome, &dir)?;
    }
    Ok(outcome)
}

/// Test split with the counterfactual intervention applied when configured.
pub fn test_instances(cfg: &RunConfigFile, dataset: &DatasetSplit) -> Vec<NegotiationInstance> {
    dataset
        .test()
        .into_iter()
        .map(|inst| {
            if cfg.experiment.counterfactual_equalize_d {
                inst.equalize_disagreement()
            } else {
                inst.clone()
            }
        })
        .collect()
}

fn write_outcome_artifacts(
    cfg: &RunConfigFile,
    outcome: &mut ExperimentOutcome,
    dir: &Path,
) -> Result<()> {
    let metrics_json = serde_json::to_string_pretty(&outcome.metrics)
        .map_err(|e| Error::Parse(format!("serialize metrics: {e}")))?;
    std::fs::write(dir.join("metrics.json"), metrics_json)?;
    std::fs::write(dir.join("samples.csv"), samples_csv(&outcome.rows))?;
    if let Some(report) = &outcome.train_report {
        std::fs::write(dir.join("loss_log.csv"), report.to_csv())?;
    }
    std::fs::write(dir.join("resolved_config.toml"), cfg.to_toml()?)?;
    Ok(())
}
