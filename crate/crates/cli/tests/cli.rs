use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_precise-dmi"));
    c.env_remove("PRECISE_DMI_OUT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let o = run(args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
}

const SMALL: &str = r#"{
  "architecture": {
    "blocks": [{"channels": 4, "pool": 4}, {"channels": 8, "pool": 4}],
    "hidden": 32
  },
  "train": {"batch_size": 16, "iterations": 30},
  "phantom": {"matrix": [16, 16], "tumor_size": 1},
  "finetune": {"epochs": 2},
  "montecarlo": {"trials": 4, "precise_realizations": 1},
  "errormap": {"trials": 2}
}"#;

struct Setup {
    dir: TempDir,
    config: PathBuf,
}

impl Setup {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let config = dir.path().join("config.json");
        fs::write(&config, SMALL).unwrap();
        Setup { dir, config }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn cfg(&self) -> &str {
        self.config.to_str().unwrap()
    }

    fn trained(&self) -> PathBuf {
        let out = self.path("train");
        if !out.join("weights.pdmiw").exists() {
            ok(&["train", "-q", "--config", self.cfg(), "--out", out.to_str().unwrap()]);
        }
        out.join("weights.pdmiw")
    }

    fn phantom(&self) -> PathBuf {
        let out = self.path("phantom");
        if !out.join("fids.pdmi").exists() {
            ok(&["phantom", "--config", self.cfg(), "--out", out.to_str().unwrap()]);
        }
        out
    }
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn same_tree(a: &Path, b: &Path) {
    let mut names: Vec<_> = fs::read_dir(a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(!names.is_empty());
    for n in names {
        let (x, y) = (fs::read(a.join(&n)).unwrap(), fs::read(b.join(&n)).unwrap());
        if n == "manifest.json" {
            // Output paths differ, hashes must not.
            let (mx, my) = (manifest(a), manifest(b));
            assert_eq!(mx["outputs"], my["outputs"]);
            assert_eq!(mx["config"], my["config"]);
        } else {
            assert!(x == y, "{n:?} differs");
        }
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["estimate", "--dataset", "x"]).status.code(), Some(1));
    let t = TempDir::new().unwrap();
    let o = t.path().to_str().unwrap();
    assert_eq!(
        run(&["estimate", "--dataset", o, "--weights", o, "--lambda", "-1", "--out", o]).status.code(),
        Some(1)
    );
    fs::write(t.path().join("bad.json"), "{\"nope\": 1}").unwrap();
    let bad = t.path().join("bad.json");
    assert_eq!(run(&["crlb", "--config", bad.to_str().unwrap(), "--out", o]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn missing_inputs_exit_two() {
    let s = Setup::new();
    let w = s.trained();
    let out = s.path("est");
    let o = run(&[
        "estimate", "--dataset", s.path("nowhere").to_str().unwrap(),
        "--weights", w.to_str().unwrap(), "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn default_phantom_is_32_by_32_with_512_points() {
    let t = TempDir::new().unwrap();
    let out = t.path().join("ph");
    ok(&["phantom", "--out", out.to_str().unwrap()]);
    let m = manifest(&out);
    assert_eq!(m["results"]["dims"], serde_json::json!([32, 32, 1]));
    assert_eq!(m["results"]["n_points"], 512);
    for f in ["fids.pdmi", "mask.grid", "mri.grid", "truth.grid"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn estimate_is_byte_identical_across_runs() {
    let s = Setup::new();
    let w = s.trained();
    let ds = s.phantom();
    for lambda in ["0", "0.01"] {
        let (a, b) = (s.path(&format!("a{lambda}")), s.path(&format!("b{lambda}")));
        for out in [&a, &b] {
            ok(&[
                "estimate", "--deterministic", "--seed", "5", "--config", s.cfg(),
                "--dataset", ds.to_str().unwrap(), "--weights", w.to_str().unwrap(),
                "--lambda", lambda, "--out", out.to_str().unwrap(),
            ]);
        }
        same_tree(&a, &b);
        assert!(a.join("maps.grid").exists() && a.join("maps_Glx_ratio.pgm").exists());
    }
    assert!(s.path("a0.01").join("finetuned.pdmiw").exists());
    assert!(!s.path("a0").join("finetuned.pdmiw").exists());
}

#[test]
fn train_and_phantom_are_reproducible() {
    let s = Setup::new();
    for cmd in ["train", "phantom"] {
        let (a, b) = (s.path(&format!("{cmd}1")), s.path(&format!("{cmd}2")));
        for out in [&a, &b] {
            ok(&[cmd, "-q", "--deterministic", "--config", s.cfg(), "--out", out.to_str().unwrap()]);
        }
        same_tree(&a, &b);
    }
}

#[test]
fn calibration_moves_median_water() {
    let s = Setup::new();
    let w = s.trained();
    let ds = s.phantom();
    let out = s.path("cal");
    ok(&[
        "estimate", "-q", "--calibrate", "--config", s.cfg(), "--dataset", ds.to_str().unwrap(),
        "--weights", w.to_str().unwrap(), "--lambda", "0", "--out", out.to_str().unwrap(),
    ]);
    let m = manifest(&out);
    let c = m["results"]["calibration"].as_f64().unwrap();
    assert!(c > 0.0 && c != 1.0);
}

#[test]
fn baselines_write_maps() {
    let s = Setup::new();
    let ds = s.phantom();
    for method in ["fourier", "aniso"] {
        let out = s.path(method);
        ok(&[
            "baseline", "--config", s.cfg(), "--dataset", ds.to_str().unwrap(),
            "--method", method, "--out", out.to_str().unwrap(),
        ]);
        let m = manifest(&out);
        assert_eq!(m["results"]["failed_voxels"], 0);
        let csv = fs::read_to_string(out.join("maps.csv")).unwrap();
        assert!(csv.starts_with("x,y,z,water_amplitude"));
    }
}

#[test]
fn montecarlo_has_fourteen_levels_and_three_estimators() {
    let s = Setup::new();
    let w = s.trained();
    let out = s.path("mc");
    ok(&[
        "montecarlo", "-q", "--config", s.cfg(), "--weights", w.to_str().unwrap(),
        "--out", out.to_str().unwrap(),
    ]);
    let mut r = csv::Reader::from_path(out.join("montecarlo.csv")).unwrap();
    let header = r.headers().unwrap().clone();
    for e in ["fourier", "sve", "precise"] {
        assert!(header.iter().any(|h| h == format!("{e}_ratio_sd_pct")), "{e}");
    }
    let rows: Vec<_> = r.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 14);
    let snr: Vec<f64> = rows.iter().map(|r| r[0].parse().unwrap()).collect();
    assert_eq!(snr[0], 5.0);
    assert!((snr[13] - 35.0).abs() < 1e-9);
}

#[test]
fn crlb_table_lists_formula_and_numeric_columns() {
    let t = TempDir::new().unwrap();
    let out = t.path().join("crlb");
    ok(&["crlb", "--out", out.to_str().unwrap()]);
    let mut r = csv::Reader::from_path(out.join("crlb.csv")).unwrap();
    let h = r.headers().unwrap().clone();
    assert!(h.iter().any(|c| c == "literal") && h.iter().any(|c| c == "numeric_amplitude_only"));
    assert_eq!(r.records().count(), 9);
}

#[test]
fn errormap_writes_bias_and_sd() {
    let s = Setup::new();
    let w = s.trained();
    let ds = s.phantom();
    let out = s.path("err");
    ok(&[
        "errormap", "-q", "--config", s.cfg(), "--dataset", ds.to_str().unwrap(),
        "--weights", w.to_str().unwrap(), "--lambda", "0.04", "--out", out.to_str().unwrap(),
    ]);
    assert!(out.join("errors.grid").exists());
    assert!(out.join("errors_Lac_bias.pgm").exists());
    assert_eq!(manifest(&out)["results"]["trials"], 2);
}

#[test]
fn output_directory_falls_back_to_environment() {
    let t = TempDir::new().unwrap();
    let o = bin()
        .env("PRECISE_DMI_OUT", t.path())
        .args(["crlb"])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(t.path().join("crlb").join("crlb.csv").exists());
    let o = bin()
        .current_dir(t.path())
        .args(["crlb"])
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(t.path().join("out").join("crlb").join("manifest.json").exists());
}
