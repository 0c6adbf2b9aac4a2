use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use vdc_core::data::{save_cache, synthetic_blobs};

const BIN: &str = env!("CARGO_BIN_EXE_vdc");

fn tiny_config(data: &str) -> String {
    format!(
        r#"
[data]
{data}

[model]
latent_dim = 2
clusters = 3
architecture = {{ kind = "mlp", hidden = [16] }}

[train]
batch_size = 64

[schedule]
gamma = 5e-4
t_gamma = 60
t_beta = 20
t_static = 5
periods = 2

[gmm]
k = 4
"#
    )
}

const BLOBS: &str = "source = \"synthetic_blobs\"\nn = 600\nclusters = 3\ndim = 6\nseed = 2";

fn vdc(dir: &Path, args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok_json(out: Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

fn write_config(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn missing_key_exits_with_code_two_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let text = tiny_config(BLOBS).replace("latent_dim = 2\n", "");
    let cfg = write_config(dir.path(), "bad.toml", &text);
    let out = vdc(dir.path(), &["train", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.latent_dim"));

    let text = tiny_config(BLOBS).replace("[gmm]", "[gmm]\nrestarts = 3");
    let cfg = write_config(dir.path(), "typo.toml", &text);
    let out = vdc(dir.path(), &["train", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("gmm.restarts"));
}

#[test]
fn same_seed_gives_identical_runs_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", &tiny_config(BLOBS));
    for name in ["a", "b"] {
        ok_json(vdc(dir.path(), &["train", "--config", &cfg, "--seed", "4", "--out", name]));
    }
    let loss = |name: &str| fs::read(dir.path().join(name).join("loss.csv")).unwrap();
    assert_eq!(loss("a"), loss("b"));

    let eval = |name: &str| {
        ok_json(vdc(
            dir.path(),
            &["eval", "--run", name, "--importance-samples", "8", "--seed", "1"],
        ))
    };
    let (a, b) = (eval("a"), eval("b"));
    assert_eq!(a, b);
    assert!(a["accuracy"].as_f64().unwrap() > 0.0);
    assert!(a["nmi"].is_number());
    assert!(a["neg_log_px"].is_number());
}

#[test]
fn unlabeled_data_omits_label_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let mut ds = synthetic_blobs(600, 3, 6, 0.5, 2).unwrap();
    ds.labels = None;
    save_cache(&ds, &dir.path().join("blobs.vdc")).unwrap();
    let cfg = write_config(dir.path(), "run.toml", &tiny_config("source = \"cache\"\npath = \"blobs.vdc\""));
    ok_json(vdc(dir.path(), &["train", "--config", &cfg, "--out", "run"]));
    let report = ok_json(vdc(dir.path(), &["eval", "--run", "run", "--importance-samples", "4"]));
    let keys = report.as_object().unwrap();
    assert!(!keys.contains_key("accuracy"));
    assert!(!keys.contains_key("nmi"));
    assert!(keys.contains_key("neg_log_px"));
    assert_eq!(report["samples"], 600);
}

#[test]
fn embed_generate_and_their_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", &tiny_config(BLOBS));
    ok_json(vdc(dir.path(), &["train", "--config", &cfg, "--out", "run"]));

    let summary = ok_json(vdc(
        dir.path(),
        &["embed", "--run", "run", "--out", "e1.csv", "--project", "2d"],
    ));
    assert_eq!(summary["rows"], 600);
    ok_json(vdc(dir.path(), &["embed", "--run", "run", "--out", "e2.csv"]));
    let first = fs::read_to_string(dir.path().join("e1.csv")).unwrap();
    let second = fs::read_to_string(dir.path().join("e2.csv")).unwrap();
    assert_eq!(first.lines().count(), 601);
    assert!(first.starts_with("id,z0,z1,cluster,responsibility,label,pc1,pc2"));
    let strip = |text: &str| -> Vec<String> {
        text.lines()
            .map(|l| l.split(',').take(6).collect::<Vec<_>>().join(","))
            .collect()
    };
    assert_eq!(strip(&first), strip(&second));
    assert!(dir.path().join("e1.png").exists());
    ok_json(vdc(dir.path(), &["embed", "--run", "run", "--out", "e3.csv"]));
    assert_eq!(second, fs::read_to_string(dir.path().join("e3.csv")).unwrap());

    let gen = ok_json(vdc(
        dir.path(),
        &["generate", "--run", "run", "--cluster", "1", "--count", "50", "--out", "g.csv"],
    ));
    assert_eq!(gen["count"], 50);
    let rows = fs::read_to_string(dir.path().join("g.csv")).unwrap();
    assert_eq!(rows.lines().count(), 51);
    assert!(rows.lines().skip(1).all(|l| l.starts_with("1,")));

    let out = vdc(dir.path(), &["generate", "--run", "run", "--cluster", "3", "--out", "bad.csv"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("cluster"));

    let out = vdc(dir.path(), &["eval", "--run", "missing"]);
    assert!(!out.status.success());
}

#[test]
fn stability_with_one_repeated_seed_has_zero_spread() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "run.toml", &tiny_config(BLOBS));
    let out = ok_json(vdc(
        dir.path(),
        &[
            "stability",
            "--config",
            &cfg,
            "--trials",
            "2",
            "--same-seed",
            "--importance-samples",
            "0",
        ],
    ));
    let acc = &out["summary"]["metrics"]["accuracy"];
    assert_eq!(acc["std"].as_f64(), Some(0.0));
    assert_eq!(out["trials"].as_array().unwrap().len(), 2);

    let out = vdc(dir.path(), &["stability", "--config", &cfg, "--trials", "1"]);
    assert!(!out.status.success());
}

#[test]
fn select_k_over_a_single_count_is_its_own_argmin() {
    let dir = tempfile::tempdir().unwrap();
    let text = tiny_config(BLOBS).replace("[model]", "[split]\ntest_fraction = 0.2\nseed = 1\n\n[model]");
    let cfg = write_config(dir.path(), "run.toml", &text);
    let report = ok_json(vdc(
        dir.path(),
        &["select-k", "--config", &cfg, "--k-range", "3..3", "--importance-samples", "4"],
    ));
    assert_eq!(report["argmin"], 3);
    assert_eq!(report["rows"].as_array().unwrap().len(), 1);

    let out = vdc(dir.path(), &["select-k", "--config", &cfg, "--k-range", "5..3"]);
    assert!(!out.status.success());
}

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            vdc_core::RunConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 4);
}
