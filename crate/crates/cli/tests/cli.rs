use std::path::Path;
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn msbi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msbi"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn digest_dir(dir: &Path) -> Vec<(String, String)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let bytes = std::fs::read(&p).unwrap();
            (
                p.file_name().unwrap().to_string_lossy().into_owned(),
                hex::encode(Sha256::digest(&bytes)),
            )
        })
        .collect();
    out.sort();
    out
}

#[test]
fn help_lists_every_subcommand_and_common_flag() {
    let top = String::from_utf8(msbi(&["--help"]).stdout).unwrap();
    for sub in [
        "preset",
        "simulate",
        "train",
        "diagnose",
        "scan",
        "calibrate",
    ] {
        assert!(top.contains(sub), "{sub} missing from help");
    }
    for sub in ["simulate", "train", "diagnose", "scan", "calibrate"] {
        let help = String::from_utf8(msbi(&[sub, "--help"]).stdout).unwrap();
        for flag in [
            "--config",
            "--preset",
            "--set",
            "--seed",
            "--out",
            "--alpha",
            "--threads",
        ] {
            assert!(help.contains(flag), "{sub} --help lacks {flag}");
        }
    }
}

#[test]
fn preset_prints_a_loadable_config() {
    let o = msbi(&["preset", "niw5d"]);
    assert_eq!(code(&o), 0);
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["model"]["family"], "niw5d");
    assert_eq!(
        code(&msbi(&["preset", "nope"])),
        2,
        "clap rejects unknown values with its own usage code"
    );
}

#[test]
fn simulate_zero_datasets_writes_only_the_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let o = msbi(&[
        "simulate",
        "--preset",
        "gaussian2d",
        "--out",
        dir.path().to_str().unwrap(),
        "-n",
        "0",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let files: Vec<_> = digest_dir(&dir.path().join("datasets"))
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    assert_eq!(files, vec!["manifest.json".to_string()]);
}

#[test]
fn simulate_is_byte_identical_for_a_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    for (dir, seed) in [(&a, "5"), (&b, "5"), (&c, "6")] {
        let o = msbi(&[
            "simulate",
            "--preset",
            "gaussian2d",
            "--seed",
            seed,
            "--out",
            dir.path().to_str().unwrap(),
            "-n",
            "10",
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let da = digest_dir(&a.path().join("datasets"));
    assert_eq!(da.len(), 21);
    assert_eq!(da, digest_dir(&b.path().join("datasets")));
    assert_ne!(da, digest_dir(&c.path().join("datasets")));

    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.path().join("datasets/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["n"], 10);
    assert_eq!(manifest["dataset_shape"], serde_json::json!([100, 2]));
    let x = msbi::Tensor::load(a.path().join("datasets/dataset_00000.bin")).unwrap();
    assert_eq!(x.shape(), &[100, 2]);
}

#[test]
fn bad_input_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = msbi(&[
        "simulate",
        "--preset",
        "gaussian2d",
        "--out",
        out,
        "-n",
        "1",
        "--set",
        "train.bogus=1",
    ]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("bogus"), "{}", stderr(&o));
    let o = msbi(&[
        "simulate",
        "--preset",
        "gaussian2d",
        "--out",
        out,
        "-n",
        "1",
        "--knob",
        "nope=1",
    ]);
    assert_eq!(code(&o), 1);
    let o = msbi(&[
        "diagnose",
        "--preset",
        "gaussian2d",
        "--out",
        out,
        "--checkpoint",
        out,
    ]);
    assert_eq!(code(&o), 1, "missing checkpoint");
    let o = msbi(&["simulate", "-n", "1"]);
    assert_eq!(code(&o), 1, "no config");
}

#[test]
fn train_then_diagnose_and_calibrate() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let small = [
        "--preset",
        "gaussian2d",
        "--out",
        out,
        "--set",
        "train.steps=100",
        "--set",
        "train.batch_size=16",
        "--set",
        "train.pilot_size=200",
        "--set",
        "train.validation_every=0",
        "--set",
        "mmd.reference_size=300",
        "--set",
        "mmd.replicates=200",
    ];
    let with = |head: &[&str], tail: &[&str]| -> Vec<String> {
        head.iter()
            .chain(&small)
            .chain(tail)
            .map(|s| s.to_string())
            .collect()
    };
    let run = |args: Vec<String>| {
        Command::new(env!("CARGO_BIN_EXE_msbi"))
            .args(&args)
            .output()
            .unwrap()
    };

    let o = run(with(&["train"], &[]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(dir.path().join("checkpoint/train_log.csv").is_file());

    let o = run(with(&["diagnose"], &["-n", "20"]));
    assert_eq!(
        code(&o),
        0,
        "well-specified data flagged: {}",
        String::from_utf8_lossy(&o.stdout)
    );
    assert!(dir.path().join("diagnose/report.json").is_file());

    let o = run(with(&["diagnose"], &["-n", "20", "--knob", "mu0=6"]));
    assert_eq!(
        code(&o),
        2,
        "shifted prior not flagged: {}",
        String::from_utf8_lossy(&o.stdout)
    );

    // Files written by `simulate` are accepted as observed data.
    let o = run(with(&["simulate"], &["-n", "5"]));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let data = dir.path().join("datasets");
    let o = run(with(&["diagnose"], &["--data", data.to_str().unwrap()]));
    assert!(matches!(code(&o), 0 | 2), "{}", stderr(&o));

    let o = run(with(
        &["calibrate"],
        &[
            "--n-sbc",
            "40",
            "--draws",
            "20",
            "--set",
            "calibrate.rmse_datasets=10",
            "--set",
            "calibrate.rmse_draws=20",
        ],
    ));
    assert!(matches!(code(&o), 0 | 2), "{}", stderr(&o));
    assert!(dir.path().join("calibrate").is_dir());

    let o = run(with(
        &["scan"],
        &[
            "--grid",
            "tau=1,3",
            "--set",
            "scan.repetitions=2",
            "--set",
            "scan.n_observed=10",
        ],
    ));
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(dir.path().join("scan/scan.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
}
