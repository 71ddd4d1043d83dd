//! `nashgen`: dataset generation, training, sampling, evaluation, grid
//! search, trajectory export, and the theory property suite, all driven by
//! one declarative config file.
//!
//! Precedence: built-in defaults < config file < command-line flags. Every
//! run echoes its fully resolved config into the output directory, and all
//! randomness derives from the single root seed.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use nashgen_core::config::RunConfigFile;
use nashgen_core::diffusion::SamplerConfig;
use nashgen_core::domain::{generate_synthetic, save_dataset, NegotiationInstance};
use nashgen_core::harness::experiment::{
    prepare_models, run_experiment, samples_csv, test_instances,
};
use nashgen_core::harness::grid::{grid_csv, grid_search, sensitivity_csv, GridSearchSpec};
use nashgen_core::harness::theory::theory_suite;
use nashgen_core::harness::trace::export_trajectories;
use nashgen_core::nn::checkpoint::FORMAT_TAG;

#[derive(Parser, Debug)]
#[command(
    name = "nashgen",
    version,
    about = "Nash-bargaining-aligned utility allocation via guided graph diffusion"
)]
struct Cli {
    /// Run configuration file (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root seed overriding the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory overriding the config file.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads for sampling and grid cells.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate the synthetic dataset and write it with its sidecar metadata.
    GenData(GenDataArgs),
    /// Train the encoder and denoiser; writes checkpoint and loss log.
    Train,
    /// Sample one allocation per test instance; writes samples.csv.
    Sample(SampleArgs),
    /// Sample and score the four evaluation metrics; writes metrics.json.
    Evaluate(EvalArgs),
    /// Grid search over guidance parameters on the validation split.
    Grid(GridArgs),
    /// Export guided and unguided trajectories from shared initializations.
    Trace(TraceArgs),
    /// Run the theory property suite (IR entry, terminal step, drift clamp).
    Theory,
    /// Print the checkpoint format tag.
    Version,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Total instances before the 80/10/10 split.
    #[arg(long)]
    count: Option<usize>,
    /// Frontier radius.
    #[arg(long)]
    radius: Option<f64>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Equalize both disagreement points to their mean before sampling.
    #[arg(long)]
    counterfactual_equalize_d: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GridArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Comma-separated lambda values (default: 8 points over [0.005, 0.35]).
    #[arg(long)]
    grid_lambda: Option<String>,
    /// Comma-separated t_start values (default: 8 points over [0.10, 0.70]).
    #[arg(long)]
    grid_t_start: Option<String>,
    /// Comma-separated alpha values (default: the configured alpha).
    #[arg(long)]
    grid_alpha: Option<String>,
    /// Comma-separated beta values (default: the configured beta).
    #[arg(long)]
    grid_beta: Option<String>,
    /// Comma-separated gamma values (default: the configured gamma).
    #[arg(long)]
    grid_gamma: Option<String>,
    /// Comma-separated DDIM step counts (default: the configured steps).
    #[arg(long)]
    grid_steps: Option<String>,
}

#[derive(Args, Debug)]
struct TraceArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Number of test instances to trace.
    #[arg(long, default_value_t = 1)]
    count: usize,
}

fn main() -> ExitCode {
    let after_help = format!(
        "Configuration keys and built-in defaults (override via --config file, \
         then flags):\n\n{}",
        RunConfigFile::default_toml()
    );
    let matches = Cli::command().after_help(after_help).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfigFile> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfigFile::from_path(path)?,
        None => RunConfigFile::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output.dir = Some(out.display().to_string());
    }
    if let Some(jobs) = cli.jobs {
        cfg.experiment.jobs = jobs;
    }
    Ok(cfg)
}

fn require_out(cfg: &RunConfigFile) -> Result<PathBuf> {
    let dir = cfg
        .output_dir()
        .context("no output directory (pass --out or set output.dir)")?;
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn echo_config(cfg: &RunConfigFile, dir: &PathBuf) -> Result<()> {
    std::fs::write(dir.join("resolved_config.toml"), cfg.to_toml()?)?;
    Ok(())
}

fn parse_list<T: std::str::FromStr>(raw: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    raw.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<T>()
                .map_err(|e| anyhow::anyhow!("invalid {what} value `{tok}`: {e}"))
        })
        .collect()
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = load_config(&cli)?;
    match cli.cmd {
        Cmd::GenData(args) => {
            if let Some(count) = args.count {
                cfg.dataset.count = count;
            }
            if let Some(radius) = args.radius {
                cfg.dataset.radius = radius;
            }
            cfg.validate()?;
            let dir = require_out(&cfg)?;
            let seed = cfg.dataset.seed.unwrap_or(cfg.seed);
            let ds = generate_synthetic(cfg.dataset.count, seed, cfg.dataset.radius)?;
            let path = dir.join("dataset.jsonl");
            save_dataset(&ds, &path)?;
            echo_config(&cfg, &dir)?;
            println!(
                "wrote {} instances ({}/{}/{}) to {}",
                ds.len(),
                ds.counts.0,
                ds.counts.1,
                ds.counts.2,
                path.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Train => {
            cfg.experiment.checkpoint = None;
            cfg.validate()?;
            let dir = require_out(&cfg)?;
            let dataset = cfg.build_dataset()?;
            let (encoder, denoiser, _sched, report) = prepare_models(&cfg, &dataset)?;
            let report = report.expect("training ran");
            nashgen_core::harness::experiment::save_models(
                &encoder,
                &denoiser,
                cfg.seed,
                &dir.join("checkpoint.json"),
            )?;
            std::fs::write(dir.join("loss_log.csv"), report.to_csv())?;
            echo_config(&cfg, &dir)?;
            let last = report.log.last().expect("nonempty log");
            println!(
                "trained {} epochs; final l_mse {:.6}, l_guide {:.6}; checkpoint at {}",
                report.log.len(),
                last.l_mse,
                last.l_guide,
                dir.join("checkpoint.json").display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Sample(args) => {
            if let Some(mode) = args.mode {
                cfg.experiment.mode = mode;
            }
            if let Some(ckpt) = args.checkpoint {
                cfg.experiment.checkpoint = Some(ckpt.display().to_string());
            }
            if args.counterfactual_equalize_d {
                cfg.experiment.counterfactual_equalize_d = true;
            }
            cfg.validate()?;
            let dir = require_out(&cfg)?;
            let outcome = run_experiment(&cfg)?;
            std::fs::write(dir.join("samples.csv"), samples_csv(&outcome.rows))?;
            println!(
                "sampled {} allocations (mode {})",
                outcome.rows.len(),
                outcome.mode.as_str()
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Evaluate(args) => {
            if let Some(mode) = args.mode {
                cfg.experiment.mode = mode;
            }
            if let Some(ckpt) = args.checkpoint {
                cfg.experiment.checkpoint = Some(ckpt.display().to_string());
            }
            cfg.validate()?;
            require_out(&cfg)?;
            let outcome = run_experiment(&cfg)?;
            let m = &outcome.metrics;
            println!("mode                    {}", outcome.mode.as_str());
            println!("ir_compliance           {:.4}", m.ir_compliance);
            println!("mean_nash_product       {:.4}", m.mean_nash_product);
            println!("nash_efficiency         {:.2}%", 100.0 * m.nash_efficiency);
            println!("mean_frontier_distance  {:.4}", m.mean_frontier_distance);
            println!("n_samples               {}", m.n_samples);
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Grid(args) => {
            if let Some(ckpt) = args.checkpoint {
                cfg.experiment.checkpoint = Some(ckpt.display().to_string());
            }
            cfg.validate()?;
            let dir = require_out(&cfg)?;
            let spec = GridSearchSpec {
                lambda: match &args.grid_lambda {
                    Some(raw) => parse_list(raw, "lambda")?,
                    None => GridSearchSpec::linspace(0.005, 0.35, 8),
                },
                t_start: match &args.grid_t_start {
                    Some(raw) => parse_list(raw, "t_start")?,
                    None => GridSearchSpec::linspace(0.10, 0.70, 8),
                },
                alpha: match &args.grid_alpha {
                    Some(raw) => parse_list(raw, "alpha")?,
                    None => vec![cfg.guidance.alpha],
                },
                beta: match &args.grid_beta {
                    Some(raw) => parse_list(raw, "beta")?,
                    None => vec![cfg.guidance.beta],
                },
                gamma: match &args.grid_gamma {
                    Some(raw) => parse_list(raw, "gamma")?,
                    None => vec![cfg.guidance.gamma],
                },
                steps: match &args.grid_steps {
                    Some(raw) => parse_list(raw, "steps")?,
                    None => vec![cfg.sampler.steps],
                },
            };
            let dataset = cfg.build_dataset()?;
            let (encoder, denoiser, sched, _) = prepare_models(&cfg, &dataset)?;
            let val = dataset.val();
            if val.is_empty() {
                bail!("validation split is empty");
            }
            let report = grid_search(
                &spec,
                &val,
                &encoder,
                &denoiser,
                &sched,
                &cfg.sampler_config(),
                &cfg.guidance_config(),
                cfg.experiment.jobs,
            )?;
            std::fs::write(dir.join("grid.csv"), grid_csv(&report))?;
            std::fs::write(dir.join("sensitivity.csv"), sensitivity_csv(&report))?;
            echo_config(&cfg, &dir)?;
            println!("evaluated {} cells; top 3 by composite objective:", report.cells.len());
            for &idx in report.ranking.iter().take(3) {
                let c = &report.cells[idx];
                println!(
                    "  lambda={:.3} t_start={:.2} alpha={} beta={} gamma={} S={} -> composite {:.4} (eff {:.2}%)",
                    c.cell.lambda,
                    c.cell.t_start,
                    c.cell.alpha,
                    c.cell.beta,
                    c.cell.gamma,
                    c.cell.steps,
                    c.composite,
                    100.0 * c.metrics.nash_efficiency
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Trace(args) => {
            if let Some(ckpt) = args.checkpoint {
                cfg.experiment.checkpoint = Some(ckpt.display().to_string());
            }
            cfg.validate()?;
            let dir = require_out(&cfg)?;
            let dataset = cfg.build_dataset()?;
            let (encoder, denoiser, sched, _) = prepare_models(&cfg, &dataset)?;
            let test_owned = test_instances(&cfg, &dataset);
            let refs: Vec<&NegotiationInstance> = test_owned.iter().collect();
            let sampler: SamplerConfig = cfg.sampler_config();
            let export = export_trajectories(
                &refs,
                &encoder,
                &denoiser,
                &sched,
                &sampler,
                &cfg.guidance_config(),
                args.count,
                Some(&dir),
            )?;
            echo_config(&cfg, &dir)?;
            println!(
                "exported {} guided/unguided trajectory pairs to {}",
                export.pairs.len(),
                dir.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Theory => {
            let report = theory_suite(cfg.seed)?;
            print!("{}", report.render());
            if report.all_pass() {
                Ok(ExitCode::SUCCESS)
            } else {
                bail!("theory suite failed");
            }
        }
        Cmd::Version => {
            println!("{FORMAT_TAG}");
            Ok(ExitCode::SUCCESS)
        }
    }
}
