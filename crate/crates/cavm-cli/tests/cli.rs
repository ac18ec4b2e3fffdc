//! End-to-end tests of the `cavm` binary: file contracts, exit codes,
//! and byte-level reproducibility.

use std::path::Path;
use std::process::{Command, Output};

fn cavm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cavm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = cavm(args);
    assert!(
        out.status.success(),
        "command {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn gen_small_dataset(dir: &Path, seed: u64) {
    ok(&[
        "gen-data",
        "--out",
        dir.to_str().unwrap(),
        "--train",
        "2",
        "--val",
        "1",
        "--test",
        "1",
        "--size",
        "32",
        "--seed",
        &seed.to_string(),
    ]);
}

fn write_tiny_config(path: &Path) {
    std::fs::write(
        path,
        "preset = \"toy\"\nimage_size = 32\nlambda_adv = 0.0\nseed = 7\n",
    )
    .unwrap();
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = walk(dir);
    files.sort();
    files
        .into_iter()
        .map(|p| {
            let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
            (rel, std::fs::read(&p).unwrap())
        })
        .collect()
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn gen_data_layout_and_byte_identical_rerun() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen_small_dataset(&a, 500);
    gen_small_dataset(&b, 500);

    for split in ["train", "val", "test"] {
        assert!(a.join(split).is_dir(), "missing split {split}");
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["splits"]["train"]["count"], 2);
    assert_eq!(manifest["splits"]["train"]["seeds"][0], 500);
    assert_eq!(manifest["splits"]["test"]["count"], 1);

    assert_eq!(dir_bytes(&a), dir_bytes(&b), "rerun with same seed must be byte-identical");
}

#[test]
fn full_pipeline_train_synthesize_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small_dataset(&data, 900);
    let cfg = tmp.path().join("run.toml");
    write_tiny_config(&cfg);

    let ck1 = tmp.path().join("phase1.ckpt");
    ok(&[
        "train-tokenizer",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        ck1.to_str().unwrap(),
        "--steps",
        "3",
    ]);
    assert!(ck1.is_file());
    let log = std::fs::read_to_string(tmp.path().join("phase1.log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3, "one JSONL record per step");
    let rec: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(rec["phase"], 1);
    assert!(rec["loss_total"].as_f64().unwrap().is_finite());

    let ck2 = tmp.path().join("phase2.ckpt");
    ok(&[
        "train-ar",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--init",
        ck1.to_str().unwrap(),
        "--out",
        ck2.to_str().unwrap(),
        "--steps",
        "2",
    ]);
    assert!(ck2.is_file());

    // synthesize all three doses, with previews
    let test_sample = walk(&data.join("test"))[0].clone();
    let syn = tmp.path().join("syn");
    ok(&[
        "synthesize",
        "--ckpt",
        ck2.to_str().unwrap(),
        "--input",
        test_sample.to_str().unwrap(),
        "--out",
        syn.to_str().unwrap(),
        "--pgm",
    ]);
    for name in ["y_ld", "y_hd", "y_sd"] {
        assert!(syn.join(format!("{name}.cavm")).is_file(), "missing {name}.cavm");
        assert!(syn.join(format!("{name}.pgm")).is_file(), "missing {name}.pgm");
    }

    // one-step override produces a single standard-dose image, deterministically
    let one_a = tmp.path().join("one_a");
    let one_b = tmp.path().join("one_b");
    for out in [&one_a, &one_b] {
        ok(&[
            "synthesize",
            "--ckpt",
            ck2.to_str().unwrap(),
            "--input",
            test_sample.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--steps",
            "1",
        ]);
    }
    assert_eq!(walk(&one_a).len(), 1);
    assert!(one_a.join("y_sd.cavm").is_file());
    assert_eq!(dir_bytes(&one_a), dir_bytes(&one_b), "synthesis must be deterministic");

    let report_path = tmp.path().join("report.txt");
    let out = ok(&[
        "evaluate",
        "--ckpt",
        ck2.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        report_path.to_str().unwrap(),
    ]);
    let report = std::fs::read_to_string(&report_path).unwrap();
    assert!(report.starts_with("# config_hash="), "provenance header: {report}");
    assert!(report.contains("seed=7"));
    assert!(report.contains("method=cavm region=tumor"));
    assert!(report.contains("method=copy-input region=healthy"));
    assert_eq!(String::from_utf8_lossy(&out.stdout), report, "report echoed to stdout");
}

#[test]
fn ablate_reports_exactly_four_variants_in_order() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_small_dataset(&data, 1300);
    let cfg = tmp.path().join("run.toml");
    write_tiny_config(&cfg);

    let report_path = tmp.path().join("ablation.txt");
    ok(&[
        "ablate",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        report_path.to_str().unwrap(),
        "--pretrain-steps",
        "2",
        "--ar-steps",
        "1",
    ]);
    let report = std::fs::read_to_string(&report_path).unwrap();
    assert!(report.starts_with("# config_hash="));
    let methods: Vec<&str> = report
        .lines()
        .filter(|l| l.starts_with("method=") && l.contains("region=tumor"))
        .map(|l| l.split(" region=").next().unwrap())
        .collect();
    assert_eq!(
        methods,
        vec![
            "method=One Step",
            "method=Two Steps",
            "method=w/o Dose-variant Autoregression",
            "method=CAVM"
        ]
    );
}

#[test]
fn train_ar_missing_init_is_usage_error_naming_the_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cavm(&[
        "train-ar",
        "--data",
        tmp.path().to_str().unwrap(),
        "--out",
        tmp.path().join("x.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--init"), "stderr must name the flag: {err}");
}

#[test]
fn bad_config_key_exits_2_with_position() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "bogus_key = 1\n").unwrap();
    let out = cavm(&[
        "train-tokenizer",
        "--config",
        cfg.to_str().unwrap(),
        "--data",
        tmp.path().to_str().unwrap(),
        "--out",
        tmp.path().join("x.ckpt").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bogus_key"), "{err}");
    assert!(err.contains("line 1"), "parse errors carry a position: {err}");
}

#[test]
fn missing_checkpoint_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let out = cavm(&[
        "evaluate",
        "--ckpt",
        tmp.path().join("nope.ckpt").to_str().unwrap(),
        "--data",
        tmp.path().to_str().unwrap(),
        "--out",
        tmp.path().join("r.txt").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn corrupt_checkpoint_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let fake = tmp.path().join("fake.ckpt");
    std::fs::write(&fake, b"not a checkpoint at all").unwrap();
    let out = cavm(&[
        "evaluate",
        "--ckpt",
        fake.to_str().unwrap(),
        "--data",
        tmp.path().to_str().unwrap(),
        "--out",
        tmp.path().join("r.txt").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
