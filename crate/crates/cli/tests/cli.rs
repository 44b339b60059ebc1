use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

const SMALL: &str = r#"
[simulation]
n1 = 32
n2 = 32
r_inplane = 4
noise_std = 0.01

[mussels]
max_iter = 5

[phase_cycling]
iters = 20

[jvc]
pd_iters = 20
"#;

fn neatr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neatr"))
        .args(args)
        .env_remove("NEATR_CONFIG")
        .env_remove("NEATR_SEED")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_config(dir: &Path) -> String {
    let path = dir.join("small.toml");
    fs::write(&path, SMALL).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn unknown_flag_is_a_usage_error() {
    assert_eq!(neatr(&["simulate", "--bogus"]).status.code(), Some(2));
    assert_eq!(neatr(&["recon", "--dataset", "x", "--out", "y", "--from", "nowhere"]).status.code(), Some(2));
}

#[test]
fn bad_config_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[simulation]\nn1 = 32\n[mussels]\nmax_iters = 3\n").unwrap();
    let ds = dir.path().join("ds");
    ok(neatr(&["--config", &small_config(dir.path()), "simulate", "--out", s(&ds), "--frames", "1"]));
    let out = neatr(&["--config", s(&cfg), "recon", "--dataset", s(&ds), "--out", s(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    fs::write(&cfg, "[simulation]\nn1 = \"big\"\n").unwrap();
    assert_eq!(neatr(&["--config", s(&cfg), "simulate", "--out", s(&ds)]).status.code(), Some(3));
}

#[test]
fn missing_dataset_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = neatr(&["recon", "--dataset", s(&dir.path().join("absent")), "--out", s(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent"));
}

#[test]
fn simulate_with_fixed_seed_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(neatr(&["--config", &cfg, "--seed", "7", "simulate", "--out", s(d), "--frames", "2"]));
    }
    let mut names: Vec<_> = fs::read_dir(&a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 4);
    for n in &names {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n:?}");
    }
}

#[test]
fn metrics_of_identical_files_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    ok(neatr(&["--config", &small_config(dir.path()), "simulate", "--out", s(&ds), "--frames", "1"]));
    let m = s(&ds.join("truth_magnitude.ncf")).to_string();
    let rsos = dir.path().join("err.ncf");
    let v: serde_json::Value = serde_json::from_str(&ok(neatr(&["metrics", &m, &m, "--rsos", s(&rsos)]))).unwrap();
    assert_eq!(v["rmse_percent"], 0.0);
    assert!(rsos.exists());
    let k = s(&ds.join("kspace.ncf")).to_string();
    assert_eq!(neatr(&["metrics", &m, &k]).status.code(), Some(4));
}

#[test]
fn recon_fit_and_export_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = small_config(d);
    let (ds, r, f) = (d.join("ds"), d.join("r"), d.join("fit"));
    ok(neatr(&["--config", &cfg, "simulate", "--out", s(&ds)]));
    let t = Instant::now();
    let summary = ok(neatr(&["--config", &cfg, "recon", "--dataset", s(&ds), "--out", s(&r)]));
    println!("recon {:.1}s: {summary}", t.elapsed().as_secs_f64());
    assert!(summary.contains("jvc"));
    for name in ["config.toml", "metrics.json", "mussels.ncf", "denoised.ncf", "phases.ncf", "final.ncf"] {
        assert!(r.join(name).exists(), "{name}");
    }
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(r.join("metrics.json")).unwrap()).unwrap();
    let pipeline_final = metrics["rmse_percent"]["final"].as_f64().unwrap();
    let cli: serde_json::Value = serde_json::from_str(&ok(neatr(&[
        "metrics",
        s(&r.join("final.ncf")),
        s(&ds.join("truth_magnitude.ncf")),
        "--mask",
        s(&ds.join("truth_support.ncf")),
    ])))
    .unwrap();
    assert!((cli["rmse_percent"].as_f64().unwrap() - pipeline_final).abs() < 1e-9);

    ok(neatr(&["fit", "sage", "--input", s(&ds.join("truth_magnitude.ncf")), "--dataset", s(&ds), "--out", s(&f)]));
    let fit: serde_json::Value = serde_json::from_str(&fs::read_to_string(f.join("fit.json")).unwrap()).unwrap();
    assert!(fit["t2_rmse_percent"].as_f64().unwrap() < 1e-6);
    assert!(f.join("sage_params.ncf").exists());
    assert_eq!(neatr(&["fit", "dti", "--input", s(&r.join("final.ncf")), "--dataset", s(&ds), "--out", s(&f)]).status.code(), Some(3));

    for mode in ["magnitude", "error"] {
        let png = d.join(format!("{mode}.png"));
        ok(neatr(&[
            "export-png",
            s(&r.join("final.ncf")),
            "--out",
            s(&png),
            "--mode",
            mode,
            "--reference",
            s(&ds.join("truth_magnitude.ncf")),
            "--window",
            "0,0.5",
        ]));
        assert_eq!(&fs::read(&png).unwrap()[..8], b"\x89PNG\r\n\x1a\n");
    }
    ok(neatr(&["export-png", s(&r.join("phases.ncf")), "--out", s(&d.join("p.png")), "--mode", "phase", "--shot", "1"]));
    assert_eq!(neatr(&["export-png", s(&r.join("final.ncf")), "--out", s(&d.join("x.png")), "--frame", "9"]).status.code(), Some(4));
}
