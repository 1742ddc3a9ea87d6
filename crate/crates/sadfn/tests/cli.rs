//! End-to-end checks of the command-line binary: the documented mask
//! example, failure diagnostics, config precedence, artifact determinism,
//! and a full generate → train → fuse → evaluate smoke run at toy scale.

use sadfn::mri::SamplingMask;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_sadfn"));
    c.env("SADFN_THREADS", "1");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn sadfn binary")
}

fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Reads `run.log` with its wall-time line stripped (the only line that
/// differs between identical runs).
fn run_log_stable(dir: &Path) -> String {
    let text = std::fs::read_to_string(dir.join("run.log")).expect("run.log exists");
    text.lines()
        .filter(|l| !l.starts_with("wall_time_s"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Byte-compares two directories recursively, ignoring `run.log`.
fn assert_dirs_identical(a: &Path, b: &Path) {
    let mut names: Vec<String> = std::fs::read_dir(a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    let mut other: Vec<String> = std::fs::read_dir(b)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    other.sort();
    assert_eq!(names, other, "directory listings differ: {a:?} vs {b:?}");
    for name in names {
        if name == "run.log" {
            continue;
        }
        let (pa, pb) = (a.join(&name), b.join(&name));
        if pa.is_dir() {
            assert_dirs_identical(&pa, &pb);
        } else {
            assert_eq!(
                std::fs::read(&pa).unwrap(),
                std::fs::read(&pb).unwrap(),
                "file bytes differ: {pa:?}"
            );
        }
    }
}

#[test]
fn gen_mask_documented_example_sets_72_rows() {
    let dir = tempfile::tempdir().unwrap();
    let mask_path = dir.path().join("m.bin");
    let out = run_ok(&[
        "gen-mask",
        "--kind",
        "cartesian1d",
        "--fraction",
        "0.30",
        "--size",
        "240",
        "--seed",
        "1",
        "--out",
        mask_path.to_str().unwrap(),
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("72 full rows"), "stdout: {stdout}");
    let mask = SamplingMask::load(&mask_path).unwrap();
    assert_eq!(mask.full_rows(), 72);
    assert!(mask.is_conjugate_symmetric());
}

#[test]
fn evaluate_on_missing_dataset_fails_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let out = run(&[
        "evaluate",
        "--data",
        empty.to_str().unwrap(),
        "--mask",
        "unused.bin",
        "--seg",
        "unused",
        "--out",
        dir.path().join("rep").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("no samples found"), "stderr: {stderr}");
    // Exactly one diagnostic line.
    assert_eq!(stderr.lines().count(), 1, "stderr: {stderr}");
}

#[test]
fn every_subcommand_offers_help() {
    for sub in [
        "gen-data",
        "gen-mask",
        "train-rec",
        "train-seg",
        "train-wos",
        "finetune-sadfn",
        "finetune-cascade",
        "reconstruct",
        "evaluate",
        "histogram",
        "dump-features",
        "timeit",
    ] {
        let out = run(&[sub, "--help"]);
        assert!(out.status.success(), "{sub} --help");
        assert!(
            String::from_utf8_lossy(&out.stdout).contains("--help"),
            "{sub} help text"
        );
    }
    // Top-level help and version also succeed.
    assert!(run(&["--help"]).status.success());
    assert!(run(&["--version"]).status.success());
}

#[test]
fn config_file_feeds_values_and_flags_override_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("mask.cfg");
    std::fs::write(&cfg, "# mask settings\nseed = 5\nfraction = 0.5\nsize = 16\n").unwrap();

    let a_dir = dir.path().join("a");
    std::fs::create_dir(&a_dir).unwrap();
    run_ok(&[
        "gen-mask",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        a_dir.join("m.bin").to_str().unwrap(),
    ]);
    let log = run_log_stable(&a_dir);
    assert!(log.contains("seed = 5"), "file value used: {log}");
    assert!(log.contains("fraction = 0.5"), "{log}");
    assert!(log.contains("command = gen-mask"), "{log}");
    assert!(log.contains("version = sadfn-v"), "{log}");

    let b_dir = dir.path().join("b");
    std::fs::create_dir(&b_dir).unwrap();
    run_ok(&[
        "gen-mask",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "7",
        "--out",
        b_dir.join("m.bin").to_str().unwrap(),
    ]);
    let log = run_log_stable(&b_dir);
    assert!(log.contains("seed = 7"), "flag overrides file: {log}");
}

#[test]
fn identical_seeded_runs_write_identical_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        run_ok(&[
            "gen-data",
            "--out",
            d.to_str().unwrap(),
            "--count",
            "3",
            "--size",
            "16",
            "--seed",
            "11",
        ]);
    }
    assert_dirs_identical(&a, &b);
    // The run logs agree except for wall time and the output path itself.
    let strip = |log: String| -> Vec<String> {
        log.lines().filter(|l| !l.starts_with("out = ")).map(str::to_string).collect()
    };
    assert_eq!(strip(run_log_stable(&a)), strip(run_log_stable(&b)));
}

#[test]
fn pipeline_smoke_runs_every_stage() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let (data, mask) = (p("data"), p("mask.bin"));
    let (rec, seg, wos, fused, cascade) = (p("rec"), p("seg"), p("wos"), p("sadfn"), p("cascade"));

    run_ok(&["gen-data", "--out", &data, "--count", "10", "--size", "16", "--seed", "2"]);
    run_ok(&["gen-mask", "--out", &mask, "--size", "16", "--fraction", "0.4", "--seed", "2"]);

    let common = ["--data", &data, "--holdout", "2", "--seed", "2"];
    let mut args = vec![
        "train-rec", "--mask", &mask, "--ckpt", &rec, "--blocks", "1", "--width", "2",
        "--iters", "6", "--batch", "2", "--eval-every", "3",
    ];
    args.extend_from_slice(&common);
    run_ok(&args);
    assert!(dir.path().join("rec/manifest.txt").is_file());
    assert!(dir.path().join("rec/curve.csv").is_file());
    assert!(dir.path().join("rec/run.log").is_file());

    let mut args = vec![
        "train-seg", "--ckpt", &seg, "--width", "2", "--iters", "6", "--batch", "2",
        "--eval-every", "3",
    ];
    args.extend_from_slice(&common);
    run_ok(&args);

    let mut args = vec![
        "train-wos", "--mask", &mask, "--ckpt", &wos, "--blocks", "1", "--width", "2",
        "--iters", "6", "--batch", "2", "--eval-every", "3",
    ];
    args.extend_from_slice(&common);
    run_ok(&args);

    let mut args = vec![
        "finetune-sadfn", "--mask", &mask, "--rec", &rec, "--seg", &seg, "--ckpt", &fused,
        "--iters", "4", "--batch", "2", "--eval-every", "2",
    ];
    args.extend_from_slice(&common);
    run_ok(&args);
    for sub in ["rec", "seg", "fusion"] {
        assert!(dir.path().join("sadfn").join(sub).join("manifest.txt").is_file(), "{sub}");
    }

    let mut args = vec![
        "finetune-cascade", "--mask", &mask, "--rec", &rec, "--seg", &seg, "--ckpt", &cascade,
        "--lambda", "0.5", "--iters", "4", "--batch", "2", "--eval-every", "2",
    ];
    args.extend_from_slice(&common);
    run_ok(&args);
    assert!(dir.path().join("cascade/rec/manifest.txt").is_file());
    assert!(dir.path().join("cascade/seg/manifest.txt").is_file());

    let recons = p("recons");
    run_ok(&[
        "reconstruct", "--data", &data, "--mask", &mask, "--model", "sadfn", "--ckpt", &fused,
        "--out", &recons,
    ]);
    assert!(dir.path().join("recons/recon_0000.tns").is_file());
    assert!(dir.path().join("recons/recon_0009.tns").is_file());

    let report = p("report");
    let out = run_ok(&[
        "evaluate", "--data", &data, "--mask", &mask, "--model", "sadfn", "--ckpt", &fused,
        "--seg", &seg, "--out", &report,
    ]);
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("sadfn+segmenter"), "table: {table}");
    assert!(table.contains("full_sampled+segmenter"), "table: {table}");
    assert!(dir.path().join("report/report.tsv").is_file());
    assert!(dir.path().join("report/report.csv").is_file());

    let hist = p("hist.tsv");
    let out = run_ok(&["histogram", "--data", &data, "--bins", "10", "--out", &hist]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("bin_lo"));
    assert!(dir.path().join("hist.tsv").is_file());

    let feats = p("feats");
    run_ok(&[
        "dump-features", "--data", &data, "--index", "0", "--mask", &mask, "--ckpt", &fused,
        "--out", &feats,
    ]);
    assert!(dir.path().join("feats/pre_recon.tns").is_file());
    assert!(dir.path().join("feats/seg_feat.tns").is_file());
    assert!(dir.path().join("feats/output.tns").is_file());
    // One fused tensor per hidden conv of the single block.
    assert!(dir.path().join("feats/block0_fuse1.tns").is_file());

    let times = p("times");
    let out = run_ok(&[
        "timeit", "--data", &data, "--mask", &mask, "--reps", "1", "--rec", &rec,
        "--sadfn", &fused, "--wos", &wos, "--out", &times,
    ]);
    let timings = std::fs::read_to_string(dir.path().join("times/timings.tsv")).unwrap();
    for model in ["zero_filled", "rec", "sadfn", "wos"] {
        assert!(timings.contains(model), "timings: {timings}");
        assert!(String::from_utf8_lossy(&out.stdout).contains(model));
    }
}
