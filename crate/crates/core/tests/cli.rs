use std::path::Path;
use std::process::{Command, Output};

use labo::cli::SmoothReport;

const SMALL: &str = r#"
modes = ["none", "labo"]
seeds = [3]

[dataset]
kind = "blobs"
classes = 3
per_class = 30
std = 1.0

[model]
hidden = [6]

[train]
steps = 40
batch_size = 16
learning_rate = 0.05
eval_every = 20
"#;

fn labo(args: &[&str], env_out: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_labo"));
    cmd.args(args).env_remove("LABO_OUT");
    if let Some(p) = env_out {
        cmd.env("LABO_OUT", p);
    }
    cmd.output().unwrap()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("exp.toml");
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

#[test]
fn smooth_prints_structured_report() {
    let out = labo(
        &[
            "smooth", "--logits", "2,1,0", "--tau", "2", "--alpha", "0.4",
        ],
        None,
    );
    assert!(out.status.success());
    let report: SmoothReport = serde_json::from_slice(&out.stdout).unwrap();
    let want = [
        0.506_480_391_055_654,
        0.307_195_885_718_498_4,
        0.186_323_723_225_847_6,
    ];
    for (a, b) in report.p_star.as_slice().iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!((report.objective.total - 0.742_280_058_865_480_4).abs() < 1e-12);

    let negative = labo(&["smooth", "--logits", "-1,0.5,-3"], None);
    assert!(negative.status.success());

    let bad = labo(&["smooth", "--logits", "1,oops"], None);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn malformed_config_exits_2_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("steps = 40", "steps = forty"));
    let out = labo(&["train", "--config", &cfg], Some(dir.path()));
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line"), "{err}");

    let missing = labo(&["train", "--config", "/nonexistent/exp.toml"], None);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn output_dir_from_env_and_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let env_dir = dir.path().join("from_env");
    let out = labo(&["train", "--config", &cfg], Some(&env_dir));
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(env_dir.join("summary.json").exists());
    assert!(env_dir.join("labo_seed3.csv").exists());

    let flag_dir = dir.path().join("from_flag");
    let out = labo(
        &[
            "train",
            "--config",
            &cfg,
            "--out",
            flag_dir.to_str().unwrap(),
        ],
        Some(&env_dir),
    );
    assert!(out.status.success());
    assert!(flag_dir.join("summary.json").exists());
    assert_eq!(
        std::fs::read_to_string(env_dir.join("summary.json")).unwrap(),
        std::fs::read_to_string(flag_dir.join("summary.json")).unwrap()
    );
}

#[test]
fn hist_writes_histogram_and_rejects_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let runs = dir.path().join("runs");
    assert!(labo(&["train", "--config", &cfg], Some(&runs))
        .status
        .success());
    let ckpt = runs.join("none_seed3.json");
    let hist = dir.path().join("hist");
    let out = labo(
        &[
            "hist",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--config",
            &cfg,
            "--out",
            hist.to_str().unwrap(),
        ],
        None,
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(hist.join("histogram.json").exists());
    assert!(hist.join("histogram.dat").exists());

    let wide = write_config(
        dir.path(),
        &SMALL.replace("std = 1.0", "std = 1.0\ndim = 4"),
    );
    let out = labo(
        &[
            "hist",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--config",
            &wide,
        ],
        Some(&hist),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn kd_without_teacher_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL.replace(
        "modes = [\"none\", \"labo\"]",
        "modes = [\"kd\"]\nteacher_checkpoint = \"nowhere/teacher.json\"",
    );
    let cfg = write_config(dir.path(), &text);
    let out = labo(&["train", "--config", &cfg], Some(dir.path()));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere/teacher.json"));
}

#[test]
fn labo_histogram_peaks_lower_than_one_hot() {
    let dir = tempfile::tempdir().unwrap();
    let text = SMALL
        .replace("seeds = [3]", "seeds = [1]")
        .replace("per_class = 30", "per_class = 500")
        .replace("hidden = [6]", "hidden = [32]")
        .replace("steps = 40", "steps = 1500\nwarmup = 200")
        .replace("batch_size = 16", "batch_size = 64")
        .replace("learning_rate = 0.05", "learning_rate = 0.1")
        .replace("eval_every = 20", "eval_every = 250");
    let cfg = write_config(dir.path(), &text);
    let runs = dir.path().join("runs");
    assert!(labo(&["train", "--config", &cfg], Some(&runs))
        .status
        .success());
    let mode_bin = |stem: &str| {
        let out_dir = dir.path().join(stem);
        let ckpt = runs.join(format!("{stem}_seed1.json"));
        let out = labo(
            &[
                "hist",
                "--checkpoint",
                ckpt.to_str().unwrap(),
                "--config",
                &cfg,
                "--out",
                out_dir.to_str().unwrap(),
            ],
            None,
        );
        assert!(out.status.success());
        let text = std::fs::read_to_string(out_dir.join("histogram.json")).unwrap();
        let h: labo::train::ConfidenceHistogram = serde_json::from_str(&text).unwrap();
        h.mode_bin()
    };
    let (none, labo_bin) = (mode_bin("none"), mode_bin("labo"));
    assert!(labo_bin < none, "labo mode bin {labo_bin}, one-hot {none}");
}
