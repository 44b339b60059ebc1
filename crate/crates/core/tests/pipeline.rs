//! Orchestration, persistence and resumability.

use std::fs;

use neatr_core::config::PipelineConfig;
use neatr_core::container::Container;
use neatr_core::dataset::{Dataset, Protocol};
use neatr_core::mussels::solve_mussels;
use neatr_core::pipeline::{run_pipeline, DirRun, Stage};
use neatr_core::simulate::{simulate_dataset, SimulationConfig};

fn small(protocol: Protocol, frames: usize) -> Dataset {
    simulate_dataset(&SimulationConfig {
        protocol,
        n1: 32,
        n2: 32,
        r_inplane: 4,
        noise_std: 0.01,
        max_frames: Some(frames),
        seed: 5,
        ..Default::default()
    })
    .unwrap()
}

fn quick(protocol: Protocol) -> PipelineConfig {
    let mut cfg = PipelineConfig::preset(protocol);
    cfg.phase_cycling.iters = 40;
    cfg.jvc.pd_iters = 20;
    cfg
}

#[test]
fn stop_after_mussels_is_solve_mussels() {
    let ds = small(Protocol::Sage, 2);
    let mut cfg = quick(Protocol::Sage);
    cfg.stages.stop_after_mussels = true;
    let run = run_pipeline(&ds, &cfg).unwrap();
    assert!(run.outputs.jvc.is_none() && run.outputs.denoised.is_none());
    for (f, frame) in ds.frames.iter().enumerate() {
        let direct = solve_mussels(frame, &ds.coils, &cfg.mussels, None).unwrap();
        assert_eq!(run.outputs.mussels[f], direct.images);
        assert_eq!(run.outputs.mussels_logs[f].log, direct.log);
    }
    assert_eq!(run.metrics.stages, vec![Stage::Mussels]);
}

#[test]
fn dataset_directory_round_trip() {
    let ds = small(Protocol::Dwi, 7);
    let dir = tempfile::tempdir().unwrap();
    ds.write(dir.path()).unwrap();
    let back = Dataset::read(dir.path()).unwrap();
    assert_eq!(back.manifest, Dataset::read(dir.path()).unwrap().manifest);
    assert_eq!(back.manifest.bvals, ds.manifest.bvals);
    assert_eq!(back.coils.maps(), ds.coils.maps());
    for (a, b) in back.frames.iter().zip(&ds.frames) {
        assert_eq!(a.data(), b.data());
        assert_eq!(a.masks(), b.masks());
    }
    let (ta, tb) = (back.truth.unwrap(), ds.truth.unwrap());
    assert_eq!(ta.magnitude, tb.magnitude);
    assert_eq!(ta.phases, tb.phases);
    assert_eq!(ta.support, tb.support);
    assert_eq!(ta.params, tb.params);
}

#[test]
fn resumed_runs_reproduce_the_full_run() {
    let ds = small(Protocol::Sage, 2);
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    ds.write(&data).unwrap();
    let out = root.path().join("out");
    let cfg = quick(Protocol::Sage);
    let full = DirRun { dataset: data.clone(), out_dir: out.clone(), from: Stage::Mussels }.run(&cfg).unwrap();
    let metrics = fs::read(out.join("metrics.json")).unwrap();
    let final_ = fs::read(out.join("final.ncf")).unwrap();
    for name in ["mussels.ncf", "denoised.ncf", "phases.ncf", "final.ncf"] {
        Container::read(out.join(name)).unwrap();
    }
    let text = fs::read_to_string(out.join("config.toml")).unwrap();
    assert_eq!(PipelineConfig::from_toml(&text).unwrap(), cfg);

    for from in [Stage::Denoise, Stage::PhaseCycling, Stage::Jvc] {
        let again = DirRun { dataset: data.clone(), out_dir: out.clone(), from }.run(&cfg).unwrap();
        assert_eq!(again.metrics, full.metrics, "from {from:?}");
        assert_eq!(fs::read(out.join("metrics.json")).unwrap(), metrics);
        assert_eq!(fs::read(out.join("final.ncf")).unwrap(), final_);
    }
}

#[test]
fn skip_denoise_writes_no_denoised_file() {
    let ds = small(Protocol::Sage, 1);
    let root = tempfile::tempdir().unwrap();
    ds.write(root.path().join("d")).unwrap();
    let mut cfg = quick(Protocol::Sage);
    cfg.stages.skip_denoise = true;
    let run = DirRun { dataset: root.path().join("d"), out_dir: root.path().join("o"), from: Stage::Mussels }
        .run(&cfg)
        .unwrap();
    assert!(!root.path().join("o/denoised.ncf").exists());
    assert!(run.metrics.rmse_percent.unwrap().denoised.is_none());
    assert_eq!(run.metrics.stages, vec![Stage::Mussels, Stage::PhaseCycling, Stage::Jvc]);
}

#[test]
fn metrics_are_deterministic() {
    let ds = small(Protocol::Dwi, 2);
    let cfg = quick(Protocol::Dwi);
    let a = run_pipeline(&ds, &cfg).unwrap().metrics.to_json().unwrap();
    let b = run_pipeline(&small(Protocol::Dwi, 2), &cfg).unwrap().metrics.to_json().unwrap();
    assert_eq!(a, b);
    let v: serde_json::Value = serde_json::from_str(&a).unwrap();
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["frames"].as_array().unwrap().len(), 2);
}

#[test]
fn missing_dataset_is_a_data_error() {
    let root = tempfile::tempdir().unwrap();
    let err = DirRun { dataset: root.path().join("nope"), out_dir: root.path().join("o"), from: Stage::Mussels }
        .run(&PipelineConfig::sage())
        .unwrap_err();
    assert_eq!(err.class(), neatr_core::error::ErrorClass::Data);
}
