use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke_config() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml")
}

fn pexml(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pexml"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn value(text: &str, key: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("{key} missing in {text}"))
        .to_string()
}

#[test]
fn smoke_stages_emit_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    let cfg = smoke_config();

    let spaces = stdout(&pexml(&["spaces"], &cfg, out));
    assert_eq!(value(&spaces, "dim1"), "12");
    assert_eq!(value(&spaces, "dim2"), "4");

    let gamma = stdout(&pexml(&["gamma"], &cfg, out));
    let g: f64 = value(&gamma, "gamma").parse().unwrap();
    assert!(g > 0.0 && g < 1.0);
    let dt_max: f64 = value(&gamma, "dt_max").parse().unwrap();
    assert!(dt_max > 0.0);
    assert!(["true", "false"].contains(&value(&gamma, "satisfied").as_str()));

    stdout(&pexml(&["simulate"], &cfg, out));
    let ds = stdout(&pexml(&["dataset"], &cfg, out));
    assert_eq!(value(&ds, "train"), "2");
    stdout(&pexml(&["pod"], &cfg, out));
    stdout(&pexml(&["train"], &cfg, out));
    let eval = stdout(&pexml(&["eval"], &cfg, out));
    for k in 1..=4 {
        let v: f64 = value(&eval, &format!("mean_e{k}")).parse().unwrap();
        assert!(v.is_finite());
    }

    for f in [
        "field.pexf",
        "spaces.pexs",
        "stability.txt",
        "manifest.txt",
        "simulate/errors.csv",
        "simulate/coarse.pext",
        "simulate/fine.pext",
        "train/params.csv",
        "train/000000.pext",
        "test/000001.pext",
        "pod.pexp",
        "model.pexm",
        "loss.csv",
        "errors.csv",
        "summary.txt",
    ] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let csv = std::fs::read_to_string(out.join("errors.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,t,e1,e2,e3,e4"));
    // one row per step n = 2..=N with N = 3
    assert_eq!(lines.count(), 2);
    let loss = std::fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 6);
}

#[test]
fn run_matches_stagewise_outputs() {
    let cfg = smoke_config();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let all = stdout(&pexml(&["run"], &cfg, a.path()));
    for stage in ["dataset", "train", "eval"] {
        stdout(&pexml(&[stage], &cfg, b.path()));
    }
    assert_eq!(all, std::fs::read_to_string(b.path().join("summary.txt")).unwrap());
    // a second run reloads every artifact and reproduces the summary
    assert_eq!(all, stdout(&pexml(&["run"], &cfg, a.path())));
}

#[test]
fn field_subcommand_writes_a_reusable_field() {
    let dir = tempfile::tempdir().unwrap();
    let field = dir.path().join("kappa.pexf");
    let o = Command::new(env!("CARGO_BIN_EXE_pexml"))
        .args(["field", "--config"])
        .arg(smoke_config())
        .arg("--out")
        .arg(dir.path().join("out"))
        .arg("--output")
        .arg(&field)
        .output()
        .unwrap();
    stdout(&o);
    assert!(field.is_file());

    let cfg = dir.path().join("with_field.toml");
    let text = std::fs::read_to_string(smoke_config()).unwrap() + "field.path = \"kappa.pexf\"\n";
    std::fs::write(&cfg, text).unwrap();
    let spaces = stdout(&pexml(&["spaces"], &cfg, &dir.path().join("second")));
    assert_eq!(value(&spaces, "dim1"), "12");
}

#[test]
fn bad_config_fails_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "example.id = 1\ngrid.n = 10\ngrid.Nc = 3\n").unwrap();
    let o = pexml(&["spaces"], &cfg, &dir.path().join("out"));
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("grid.Nc"));

    let o = pexml(&["gamma"], &dir.path().join("missing.toml"), &dir.path().join("out"));
    assert!(!o.status.success());
}
