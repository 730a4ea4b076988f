mod common;

use std::fs;
use std::path::Path;

use common::tiny_config;
use earlyexit::bench::{BenchConfig, Pipeline, STAGES};
use earlyexit::checkpoint::Checkpoint;
use earlyexit::Error;

fn read(dir: &Path, rel: &str) -> Vec<u8> {
    fs::read(dir.join(rel)).unwrap_or_else(|e| panic!("{rel}: {e}"))
}

/// Every file under `reports/` except wall-clock timing, sorted by path.
fn report_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.join("reports")];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "timing.json" {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn full_run_is_reproducible_and_well_formed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let summary = Pipeline::new(tiny_config(), a.path()).unwrap().run_all().unwrap();
    Pipeline::new(tiny_config(), b.path()).unwrap().run_all().unwrap();

    let (ra, rb) = (report_files(a.path()), report_files(b.path()));
    assert!(ra.len() > 20);
    assert_eq!(ra, rb);
    for ckpt in ["teacher", "branches", "downstream"] {
        let rel = format!("checkpoints/{ckpt}.ckpt");
        assert_eq!(read(a.path(), &rel), read(b.path(), &rel));
        let bytes = read(a.path(), &rel);
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes(), bytes);
    }

    // Entropy profile CSV schema.
    let profile = String::from_utf8(read(a.path(), "reports/entropy_profile.csv")).unwrap();
    assert!(profile.starts_with("layer,mean_entropy\n"));
    assert_eq!(profile.lines().count(), 1 + 4);
    let max = (32f64).ln();
    assert!(summary.profile.layer_means.iter().all(|&e| (0.0..=max).contains(&e)));

    // Noise sweep: one row per SNR, fractions summing to 1.
    assert_eq!(summary.sweep.rows.len(), 4);
    for row in &summary.sweep.rows {
        assert!((row.fractions.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(row.min_exit as f64 <= row.mean_exit && row.mean_exit <= row.max_exit as f64);
    }
    let sweep_csv = String::from_utf8(read(a.path(), "reports/noise_sweep.csv")).unwrap();
    assert!(sweep_csv.starts_with("snr,layer,fraction\n"));
    assert_eq!(sweep_csv.lines().count(), 1 + 4 * 4);

    // Comparison: a row per (strategy, noise level) plus averages.
    let c = &summary.compare;
    let strategies = 4 + 2;
    assert_eq!(c.rows.len(), strategies * (c.noise_levels.len() + 1));
    assert_eq!(c.noise_levels, vec!["clean", "10", "5", "0"]);
    assert!(c.forced_checks.iter().all(|f| f.identical && f.forced_accuracy == f.static_accuracy));
    let csv = String::from_utf8(read(a.path(), "reports/compare_static.csv")).unwrap();
    assert!(csv.starts_with("strategy,noise_level,accuracy,mean_exit,compute_saved\n"));

    // Eval: every span at every ratio, histogram and trace files present.
    assert_eq!(summary.evals.len(), 4);
    for e in &summary.evals {
        let stem = format!("reports/eval/{}_rho{}", e.strategy, e.rho);
        let hist = String::from_utf8(read(a.path(), &format!("{stem}_histogram.csv"))).unwrap();
        assert!(hist.starts_with("layer,count,fraction\n"));
        let traces = String::from_utf8(read(a.path(), &format!("{stem}_traces.csv"))).unwrap();
        assert_eq!(traces.lines().count(), 1 + 40);
        assert!(e.allowed_layers.iter().all(|k| (1..=4).contains(k)));
    }
    assert!(a.path().join("reports/timing.json").exists());
}

#[test]
fn stages_demand_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = Pipeline::new(tiny_config(), dir.path()).unwrap();
    let expect = |r: earlyexit::Result<()>, stage: &str| match r {
        Err(Error::Dependency { stage: s, .. }) => assert_eq!(s, stage),
        other => panic!("expected dependency on {stage}, got {other:?}"),
    };
    expect(p.run_stage("eval", None), "train-downstream");
    expect(p.run_stage("train-teacher", None), "synth");
    p.run_stage("synth", None).unwrap();
    expect(p.run_stage("train-branches", None), "train-teacher");
    expect(p.run_stage("profile-entropy", None), "train-branches");
    p.run_stage("train-teacher", None).unwrap();
    p.run_stage("train-branches", None).unwrap();
    expect(p.run_stage("train-downstream", None), "calibrate");
    expect(p.run_stage("noise-sweep", None), "train-downstream");
    for stage in &STAGES[3..] {
        p.run_stage(stage, None).unwrap();
    }
    assert!(matches!(p.run_stage("bogus", None), Err(Error::InvalidArgument(_))));
}

#[test]
fn static_layer_must_exist() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = Pipeline::new(tiny_config(), dir.path()).unwrap();
    let err = p.compare_static(Some(5)).unwrap_err();
    assert_eq!(err.kind(), "invalid_argument");
    let err = p.compare_static(Some(0)).unwrap_err();
    assert_eq!(err.kind(), "invalid_argument");
}

#[test]
fn checkpoints_from_another_config_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = Pipeline::new(tiny_config(), dir.path()).unwrap();
    for stage in &STAGES[..3] {
        p.run_stage(stage, None).unwrap();
    }
    let mut other = tiny_config();
    other.seeds.encoder_seed += 1;
    let err = Pipeline::new(other, dir.path()).unwrap().profile_entropy().unwrap_err();
    assert_eq!(err.kind(), "config");
}

#[test]
fn duplicate_snrs_give_identical_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.eval.snrs = vec!["5".into(), "clean".into(), "5".into()];
    let mut p = Pipeline::new(cfg, dir.path()).unwrap();
    for stage in &STAGES[..6] {
        p.run_stage(stage, None).unwrap();
    }
    let sweep = p.noise_sweep().unwrap();
    assert_eq!(sweep.rows[0], sweep.rows[2]);
    assert_eq!(sweep.rows[1].snr, "clean");
}

#[test]
fn shipped_config_parses_to_the_defaults() {
    let text = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml")).unwrap();
    assert_eq!(BenchConfig::from_toml(&text).unwrap(), BenchConfig::default());
}
