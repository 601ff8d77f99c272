use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn qhevqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qhevqa")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// First `rows` samples of the bundled digits, written to `dir`.
fn small_dataset(dir: &Path, rows: usize) -> PathBuf {
    let full = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../qhevqa/data/digits01.csv")).unwrap();
    let path = dir.join("small.csv");
    let text: Vec<&str> = full.lines().take(rows).collect();
    std::fs::write(&path, text.join("\n")).unwrap();
    path
}

fn csv_rows(path: &Path) -> Vec<Vec<f64>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

#[test]
fn gadget_demo_prints_frequencies_and_analytic_column() {
    let o = qhevqa(&["gadget-demo", "--shots", "2048", "--seed", "3"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for name in ["direct", "gadget"] {
        let line = text.lines().find(|l| l.starts_with(name)).unwrap();
        let cols: Vec<f64> = line.split_whitespace().skip(1).map(|v| v.parse().unwrap()).collect();
        assert!((cols[0] - 0.85355).abs() <= 0.024, "{line}");
        assert_eq!(&cols[2..], &[0.85355, 0.14645]);
    }
}

#[test]
fn single_shot_demo_gives_one_valid_bit() {
    let o = qhevqa(&["gadget-demo", "--shots", "1"]);
    assert!(o.status.success());
    let text = stdout(&o);
    for name in ["direct", "gadget"] {
        let line = text.lines().find(|l| l.starts_with(name)).unwrap();
        let p0: f64 = line.split_whitespace().nth(1).unwrap().parse().unwrap();
        assert!(p0 == 0.0 || p0 == 1.0);
    }
}

#[test]
fn decompose_reports_tallies_next_to_the_reference() {
    let o = qhevqa(&["decompose", "--axis", "x", "--angle", "5.57"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("reference: T=35 T†=24 H=28"));
    let tallies = text.lines().find(|l| l.starts_with("tallies:")).unwrap();
    let total: usize = tallies.split("T+T†=").nth(1).unwrap().trim_end_matches(')').parse().unwrap();
    assert!((40..=200).contains(&total), "{tallies}");
    let dist: f64 = text.lines().find(|l| l.starts_with("distance:")).unwrap().split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!(dist <= 1e-2);
    for key in ["sequence:", "target:", "achieved:"] {
        assert!(text.contains(key));
    }
}

#[test]
fn identity_rotation_gives_an_empty_sequence() {
    let o = qhevqa(&["decompose", "--axis", "z", "--angle", "0"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.lines().any(|l| l.trim_end() == "sequence:"));
    assert!(text.contains("distance: 0.000e0"));
    assert!(!text.contains("reference:"));
}

#[test]
fn unreachable_epsilon_exits_nonzero() {
    let o = qhevqa(&["decompose", "--angle", "1.0", "--epsilon", "1e-9"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}

#[test]
fn missing_dataset_exits_with_code_two() {
    let o = qhevqa(&["train", "--dataset", "/definitely/not/here.csv"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("dataset not found"));
}

#[test]
fn unreachable_server_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let o = qhevqa(&[
        "train",
        "--mode",
        "delegated-exact-gates",
        "--transport",
        "tcp",
        "--connect",
        "--port",
        &port.to_string(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn plaintext_and_delegated_training_agree() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), 20);
    let run = |mode: &str| {
        let out = dir.path().join(mode);
        let o = qhevqa(&[
            "train",
            "--mode",
            mode,
            "--seed",
            "7",
            "--epochs",
            "2",
            "--dataset",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let plain = run("plaintext");
    let delegated = run("delegated-exact-gates");
    let (a, b) = (csv_rows(&plain.join("metrics.csv")), csv_rows(&delegated.join("metrics.csv")));
    assert_eq!(a.len(), 3);
    for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
        assert!((x - y).abs() <= 1e-6);
    }
    assert!(delegated.join("server_model.json").exists());
    assert!(!plain.join("server_model.json").exists());
    let svg = std::fs::read_to_string(plain.join("metrics.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
}

#[test]
fn config_file_is_read_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), 12);
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, format!("seed = 11\nepochs = 1\ndataset = {:?}\nout = \"ignored\"\n", data.to_str().unwrap())).unwrap();
    let out = dir.path().join("flag-out");
    let o = qhevqa(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = std::fs::read_to_string(out.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 11"));
    assert!(manifest.contains("\"epochs\": 1"));
    assert_eq!(csv_rows(&out.join("metrics.csv")).len(), 2);

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "colour = 3\n").unwrap();
    assert!(!qhevqa(&["verify", "--config", bad.to_str().unwrap()]).status.success());
}

#[test]
fn identical_manifests_give_identical_csvs() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), 30);
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = qhevqa(&["train", "--seed", "5", "--epochs", "3", "--dataset", data.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success());
        std::fs::read(out.join("metrics.csv")).unwrap()
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn verify_passes_and_the_mutation_hook_fails_it() {
    let o = qhevqa(&["verify"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.lines().skip(1).all(|l| l.ends_with("PASS")));
    assert!(text.lines().next().unwrap().contains("ms"));

    let o = qhevqa(&["verify", "--mutate", "cnot"]);
    assert_eq!(o.status.code(), Some(1));
    let text = stdout(&o);
    let line = text.lines().find(|l| l.starts_with("conjugation tables")).unwrap();
    assert!(line.ends_with("FAIL"));
}
