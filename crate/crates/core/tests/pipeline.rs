//! End-to-end pipeline tests on a miniature configuration: artifact
//! contracts, mode isolation, checkpoint loading, the supervised baseline,
//! and the counterfactual transform.

use std::path::Path;

use nashgen_core::config::RunConfigFile;
use nashgen_core::diffusion::sample;
use nashgen_core::domain::{save_dataset, NegotiationInstance};
use nashgen_core::harness::experiment::{prepare_models, run_experiment, test_instances, Mode};
use nashgen_core::harness::grid::{grid_search, GridSearchSpec};
use nashgen_core::harness::trace::export_trajectories;

/// Small architecture and short training so every test stays fast.
fn tiny_config(out: Option<&Path>) -> RunConfigFile {
    let mut cfg = RunConfigFile::default();
    cfg.dataset.count = 60;
    cfg.architecture.heads = 2;
    cfg.architecture.embed_dim = 16;
    cfg.architecture.time_dim = 8;
    cfg.architecture.hidden = 32;
    cfg.training.epochs = 2;
    cfg.training.phase1_epochs = 1;
    cfg.training.batch_size = 16;
    cfg.sampler.steps = 5;
    cfg.experiment.jobs = 2;
    cfg.output.dir = out.map(|p| p.display().to_string());
    cfg.validate().unwrap();
    cfg
}

#[test]
fn run_experiment_writes_all_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(Some(dir.path()));
    let outcome = run_experiment(&cfg).unwrap();
    assert_eq!(outcome.mode, Mode::Guided);
    assert_eq!(outcome.rows.len(), cfg.dataset.count / 10);

    let metrics_raw = std::fs::read_to_string(dir.path().join("metrics.json")).unwrap();
    let metrics: serde_json::Value = serde_json::from_str(&metrics_raw).unwrap();
    for key in [
        "ir_compliance",
        "mean_nash_product",
        "nash_efficiency",
        "mean_frontier_distance",
    ] {
        assert!(metrics.get(key).is_some(), "missing metric key {key}");
    }
    for artifact in [
        "samples.csv",
        "loss_log.csv",
        "checkpoint.json",
        "resolved_config.toml",
    ] {
        assert!(dir.path().join(artifact).exists(), "missing {artifact}");
    }
    let samples = std::fs::read_to_string(dir.path().join("samples.csv")).unwrap();
    assert!(samples.starts_with(
        "instance_id,u1,u2,d1,d2,oracle_u1,oracle_u2,nash_product,oracle_nash_product"
    ));
}

#[test]
fn identical_configs_produce_byte_identical_artifacts() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    run_experiment(&tiny_config(Some(dir_a.path()))).unwrap();
    run_experiment(&tiny_config(Some(dir_b.path()))).unwrap();
    for artifact in ["metrics.json", "samples.csv", "loss_log.csv", "checkpoint.json"] {
        let a = std::fs::read(dir_a.path().join(artifact)).unwrap();
        let b = std::fs::read(dir_b.path().join(artifact)).unwrap();
        assert_eq!(a, b, "artifact {artifact} differs between identical runs");
    }
}

#[test]
fn unguided_runs_ignore_the_guidance_section() {
    // Train once; the guidance section legitimately shapes phase-2
    // training, so isolation is asserted on a fixed checkpoint.
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&tiny_config(Some(dir.path()))).unwrap();
    let ckpt = dir.path().join("checkpoint.json").display().to_string();

    let mut wild = tiny_config(None);
    wild.experiment.mode = "unguided".to_string();
    wild.experiment.checkpoint = Some(ckpt.clone());
    wild.guidance.lambda = 0.17;
    wild.guidance.alpha = 250.0;
    wild.guidance.gamma = 70.0;
    let mut plain = tiny_config(None);
    plain.experiment.mode = "unguided".to_string();
    plain.experiment.checkpoint = Some(ckpt);

    let a = run_experiment(&wild).unwrap();
    let b = run_experiment(&plain).unwrap();
    for (x, y) in a.rows.iter().zip(b.rows.iter()) {
        assert_eq!(x.u1.to_bits(), y.u1.to_bits());
        assert_eq!(x.u2.to_bits(), y.u2.to_bits());
    }
}

#[test]
fn hard_constraint_mode_guides_every_step() {
    let cfg = tiny_config(None);
    let dataset = cfg.build_dataset().unwrap();
    let (encoder, denoiser, sched, _) = prepare_models(&cfg, &dataset).unwrap();
    let inst = dataset.test()[0].clone();
    let mut guidance = cfg.guidance_config();
    guidance.t_start = 1.0; // what hard_constraint mode forces
    let (_, record) = sample(
        &inst,
        &encoder,
        &denoiser,
        &sched,
        &cfg.sampler_config(),
        Some(&guidance),
        [0.3, -0.8],
        true,
    )
    .unwrap();
    let record = record.unwrap();
    assert_eq!(record.steps.len(), cfg.sampler.steps);
    for step in &record.steps {
        assert!(step.grad_norm > 0.0, "guidance inactive at t={}", step.t);
    }
}

#[test]
fn supervised_mode_trains_and_predicts() {
    let mut cfg = tiny_config(None);
    cfg.experiment.mode = "supervised".to_string();
    let outcome = run_experiment(&cfg).unwrap();
    assert_eq!(outcome.mode, Mode::Supervised);
    assert_eq!(outcome.rows.len(), 6);
    assert!(outcome.metrics.nash_efficiency.is_finite());
    let report = outcome.train_report.unwrap();
    assert_eq!(report.log.len(), cfg.training.epochs);

    // A checkpoint cannot be combined with the supervised driver.
    let mut with_ckpt = cfg.clone();
    with_ckpt.experiment.checkpoint = Some("anything.json".to_string());
    assert!(run_experiment(&with_ckpt).is_err());
}

#[test]
fn counterfactual_transform_equalizes_disagreements() {
    let mut cfg = tiny_config(None);
    cfg.experiment.counterfactual_equalize_d = true;
    let dataset = cfg.build_dataset().unwrap();
    let transformed = test_instances(&cfg, &dataset);
    for (inst, original) in transformed.iter().zip(dataset.test()) {
        assert_eq!(inst.agents[0].d, inst.agents[1].d);
        let mean = 0.5 * (original.agents[0].d + original.agents[1].d);
        assert_eq!(inst.agents[0].d, mean);
    }
    // End to end: the sampled allocations are evaluated against the
    // equalized instances.
    let outcome = run_experiment(&cfg).unwrap();
    let d_cols: Vec<(f64, f64)> = outcome.rows.iter().map(|r| (r.d1, r.d2)).collect();
    assert!(d_cols.iter().all(|(a, b)| a == b));
}

#[test]
fn checkpoint_reload_reproduces_samples_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(Some(dir.path()));
    let fresh = run_experiment(&cfg).unwrap();

    let mut reload = tiny_config(None);
    reload.experiment.checkpoint = Some(
        dir.path()
            .join("checkpoint.json")
            .display()
            .to_string(),
    );
    let loaded = run_experiment(&reload).unwrap();
    assert!(loaded.train_report.is_none());
    for (x, y) in fresh.rows.iter().zip(loaded.rows.iter()) {
        assert_eq!(x.u1.to_bits(), y.u1.to_bits());
        assert_eq!(x.u2.to_bits(), y.u2.to_bits());
    }

    let mut missing = tiny_config(None);
    missing.experiment.checkpoint = Some("/nonexistent/ckpt.json".to_string());
    assert!(run_experiment(&missing).is_err());
}

#[test]
fn single_cell_grid_returns_that_cell() {
    let cfg = tiny_config(None);
    let dataset = cfg.build_dataset().unwrap();
    let (encoder, denoiser, sched, _) = prepare_models(&cfg, &dataset).unwrap();
    let val_owned: Vec<NegotiationInstance> = dataset.val().into_iter().cloned().collect();
    let val: Vec<&NegotiationInstance> = val_owned.iter().collect();
    let spec = GridSearchSpec {
        lambda: vec![0.2],
        t_start: vec![0.3],
        alpha: vec![10.0],
        beta: vec![8.0],
        gamma: vec![15.0],
        steps: vec![10],
    };
    let report = grid_search(
        &spec,
        &val,
        &encoder,
        &denoiser,
        &sched,
        &cfg.sampler_config(),
        &cfg.guidance_config(),
        2,
    )
    .unwrap();
    assert_eq!(report.cells.len(), 1);
    assert_eq!(report.ranking, vec![0]);
    let c = &report.cells[0];
    let expected = 0.40 * c.metrics.ir_compliance
        + 0.35 * c.metrics.nash_efficiency
        + 0.15 * c.metrics.mean_nash_product
        + 0.10 * (1.0 - c.metrics.mean_frontier_distance);
    assert!((c.composite - expected).abs() < 1e-15);
}

#[test]
fn trajectory_export_writes_paired_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(None);
    let dataset = cfg.build_dataset().unwrap();
    let (encoder, denoiser, sched, _) = prepare_models(&cfg, &dataset).unwrap();
    let test_owned: Vec<NegotiationInstance> = dataset.test().into_iter().cloned().collect();
    let refs: Vec<&NegotiationInstance> = test_owned.iter().collect();
    let export = export_trajectories(
        &refs,
        &encoder,
        &denoiser,
        &sched,
        &cfg.sampler_config(),
        &cfg.guidance_config(),
        2,
        Some(dir.path()),
    )
    .unwrap();
    assert_eq!(export.pairs.len(), 2);
    for i in 0..2 {
        assert!(dir.path().join(format!("trajectory_{i}_guided.csv")).exists());
        assert!(dir
            .path()
            .join(format!("trajectory_{i}_unguided.csv"))
            .exists());
    }
    let aggregate =
        std::fs::read_to_string(dir.path().join("trajectory_aggregate.csv")).unwrap();
    assert_eq!(aggregate.trim_end().lines().count(), 1 + cfg.sampler.steps);

    // Shared initialization: the first latent rows agree.
    let guided = std::fs::read_to_string(dir.path().join("trajectory_0_guided.csv")).unwrap();
    let unguided =
        std::fs::read_to_string(dir.path().join("trajectory_0_unguided.csv")).unwrap();
    let first = |text: &str| {
        let line = text.lines().nth(1).unwrap().to_string();
        let cols: Vec<String> = line.split(',').map(str::to_string).collect();
        (cols[2].clone(), cols[3].clone())
    };
    assert_eq!(first(&guided), first(&unguided));
}

#[test]
fn file_dataset_source_round_trips_through_config() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.jsonl");
    let mut gen_cfg = tiny_config(None);
    let dataset = gen_cfg.build_dataset().unwrap();
    save_dataset(&dataset, &path).unwrap();

    gen_cfg.dataset.source = "file".to_string();
    gen_cfg.dataset.path = Some(path.display().to_string());
    gen_cfg.validate().unwrap();
    let loaded = gen_cfg.build_dataset().unwrap();
    assert_eq!(loaded.counts, dataset.counts);
    assert_eq!(loaded.seed, dataset.seed);
}
