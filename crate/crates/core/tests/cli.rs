use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_quasiperiodic"));
    c.env("SOURCE_DATE_EPOCH", "1700000000");
    c
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

fn synth_csv(dir: &Path, testbed: &str, steps: usize, seed: u64) -> PathBuf {
    let out = dir.join(format!("{testbed}.csv"));
    let o = bin()
        .args(["synth", "--testbed", testbed, "--steps", &steps.to_string(), "--seed", &seed.to_string(), "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn small_run_args() -> Vec<&'static str> {
    vec![
        "--delays",
        "6",
        "--num-eigen",
        "50",
        "--epsilon-median-scale",
        "0.1",
        "--train-end",
        "400",
    ]
}

#[test]
fn missing_input_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = bin()
        .args(["run", "--input", "/nonexistent/series.csv", "--output-dir"])
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3));
    let err = stderr(&o);
    assert!(err.starts_with("error kind=") && err.contains("code=3"), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1);
    assert!(!out.exists());
}

#[test]
fn invalid_parameters_are_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_csv(tmp.path(), "pure_torus_2", 300, 0);
    for extra in [vec!["--L0", "1"], vec!["--eps1", "-1"], vec!["--num-eigen", "0"]] {
        let o = bin().args(["frequencies", "--input"]).arg(&data).args(&extra).output().unwrap();
        assert_eq!(o.status.code(), Some(2), "{extra:?}: {}", stderr(&o));
    }
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "delays = 3\nbandwith = 1.0\n").unwrap();
    let o = bin().arg("frequencies").arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn degenerate_kernel_is_a_numerical_error() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_csv(tmp.path(), "pure_torus_2", 200, 0);
    let o = bin()
        .args(["frequencies", "--delays", "4", "--epsilon", "1e12", "--num-eigen", "40", "--input"])
        .arg(&data)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
    assert!(stderr(&o).contains("kind=numerical"));
}

#[test]
fn frequencies_prints_period_table_and_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_csv(tmp.path(), "pure_torus_2", 700, 0);
    let csv = tmp.path().join("freq.csv");
    let o = bin()
        .args(["frequencies", "--delays", "10", "--num-eigen", "80", "--epsilon-median-scale", "0.1", "--input"])
        .arg(&data)
        .arg("--out")
        .arg(&csv)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("∞ (mean)"), "{table}");
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("bin,omega_rad_per_s,period_s,period_human,amplitude,growth"));
}

#[test]
fn run_is_byte_reproducible_and_manifest_reruns() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_csv(tmp.path(), "torus_plus_logistic", 600, 2);
    let out = tmp.path().join("out");
    let run = |extra: &[&str]| {
        let o = bin()
            .arg("run")
            .args(small_run_args())
            .args(["--predict-start", "450", "--predict-end", "590", "--input"])
            .arg(&data)
            .arg("--output-dir")
            .arg(&out)
            .args(extra)
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", stderr(&o));
        let tree = read_tree(&out);
        std::fs::remove_dir_all(&out).unwrap();
        tree
    };
    let first = run(&[]);
    for name in [
        "frequencies.csv",
        "periodic.csv",
        "chaotic_coeffs.csv",
        "reconstruction.csv",
        "prediction.csv",
        "errors.csv",
        "model.json",
        "manifest.toml",
        "diagnostics/growth_curve.csv",
        "diagnostics/ratio_curve.csv",
        "diagnostics/sqdist_histogram.csv",
        "diagnostics/eigenvalues.csv",
    ] {
        assert!(first.contains_key(name), "missing {name}");
    }
    assert!(!first.contains_key(".lock"));
    assert_eq!(first, run(&[]));

    let manifest = tmp.path().join("manifest.toml");
    std::fs::write(&manifest, &first["manifest.toml"]).unwrap();
    let o = bin().arg("run").arg("--config").arg(&manifest).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let again = read_tree(&out);
    for (k, v) in &first {
        assert_eq!(again.get(k), Some(v), "{k} differs when re-run from the manifest");
    }
}

#[test]
fn locked_output_directory_is_refused() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_csv(tmp.path(), "pure_torus_2", 500, 0);
    let out = tmp.path().join("out");
    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(out.join(".lock"), "").unwrap();
    let o = bin().arg("run").args(small_run_args()).arg("--input").arg(&data).arg("--output-dir").arg(&out).output().unwrap();
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("locked"));
}

#[test]
fn decompose_then_reconstruct_and_predict() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_csv(tmp.path(), "pure_torus_2", 700, 0);
    let model = tmp.path().join("model.json");
    let common = |c: &mut Command| {
        c.args(small_run_args()).arg("--input").arg(&data);
    };
    let mut c = bin();
    c.arg("decompose");
    common(&mut c);
    let o = c.arg("--model").arg(&model).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));

    let rec = tmp.path().join("rec.csv");
    let mut c = bin();
    c.arg("reconstruct");
    common(&mut c);
    let o = c.arg("--model").arg(&model).args(["--mode", "freerun", "--out"]).arg(&rec).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(std::fs::read_to_string(&rec).unwrap().lines().count() > 300);

    let pred = tmp.path().join("pred.csv");
    let errs = tmp.path().join("errs.csv");
    let mut c = bin();
    c.arg("predict");
    common(&mut c);
    let o = c
        .arg("--model")
        .arg(&model)
        .args(["--init-at", "450", "--steps", "200", "--ma-window", "1", "--ma-window", "10", "--out"])
        .arg(&pred)
        .arg("--errors-out")
        .arg(&errs)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(&pred).unwrap().lines().count(), 201);
    let header = std::fs::read_to_string(&errs).unwrap();
    assert!(header.lines().next().unwrap().contains("_ma10"));

    // A model fitted on other data must be refused.
    let other = synth_csv(tmp.path(), "torus_plus_damped", 700, 0);
    let o = bin()
        .arg("predict")
        .args(small_run_args())
        .arg("--input")
        .arg(&other)
        .arg("--model")
        .arg(&model)
        .args(["--init-at", "450", "--steps", "10", "--out"])
        .arg(&pred)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn diagnostics_writes_curves() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth_csv(tmp.path(), "pure_torus_2", 500, 0);
    let dir = tmp.path().join("diag");
    let o = bin().arg("diagnostics").args(small_run_args()).arg("--input").arg(&data).arg("--out-dir").arg(&dir).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["growth_curve.csv", "ratio_curve.csv", "sqdist_histogram.csv", "eigenvalues.csv"] {
        assert!(dir.join(f).exists(), "{f}");
    }
}

fn tree_hash(tree: &BTreeMap<String, Vec<u8>>) -> String {
    let mut h = Sha256::new();
    for (k, v) in tree {
        if k == "manifest.toml" {
            continue;
        }
        h.update(k.as_bytes());
        h.update([0]);
        h.update(v);
    }
    hex::encode(h.finalize())
}

/// The bundled example config must keep producing the committed artifacts.
/// Set `QP_BLESS=1` to accept a deliberate change.
#[test]
fn bundled_config_matches_golden_hash() {
    let root = workspace_root();
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = bin()
        .arg("run")
        .arg("--config")
        .arg(root.join("configs/synthetic.toml"))
        .arg("--output-dir")
        .arg(&out)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let got = tree_hash(&read_tree(&out));
    let golden = root.join("configs/synthetic.golden");
    if std::env::var_os("QP_BLESS").is_some() {
        std::fs::write(&golden, format!("{got}\n")).unwrap();
    }
    let want = std::fs::read_to_string(&golden).unwrap();
    assert_eq!(got, want.trim(), "artifacts of configs/synthetic.toml changed");
}
