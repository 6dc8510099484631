//! Black-box checks of the command-line interface: help surface, exit codes,
//! manifests, and thread-count independence of the printed output.

use std::path::Path;
use std::process::{Command, Output};

fn mmreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmreg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn top_level_help_snapshot() {
    let out = mmreg(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    let expected = "\
Multi-modal deformable 3D volume registration

Usage: mmreg [OPTIONS] <COMMAND>

Commands:
  register      Deformable registration of a moving volume onto a fixed volume
  rigid         Rigid pre-alignment via a (1+1) evolution strategy on NMI
  warp          Apply a displacement field to a volume
  dice          Per-label Dice overlap between two label volumes
  mind          Compute and save the self-similarity descriptor field
  similarity    One-shot dissimilarity between two equally shaped volumes
  stitch        Tile a volume, map every tile, and stitch by stride averaging
  phantom       Generate a synthetic phantom pair with ground truth
  gridsearch    Sweep lambda/spacing/levels combinations and rank them
  volume-stats  Mean segmented volumes (cm\u{b3}) of two label-volume groups

Options:
      --seed <SEED>        Seed for every stochastic component [default: 24301]
      --threads <THREADS>  Worker thread cap; outputs are identical for any value
  -h, --help               Print help
  -V, --version            Print version
";
    assert_eq!(stdout(&out), expected);
}

#[test]
fn register_help_lists_defaults() {
    let out = mmreg(&["register", "--help"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    for needle in [
        "--measure <MEASURE>",
        "nmi|mind|nmi+mind|lncc [default: nmi+mind]",
        "--beta <BETA>",
        "[default: 0.8]",
        "--scale <SCALE>",
        "fixed:<v>|grad|delta [default: grad]",
        "--lambda <LAMBDA>",
        "[default: 0.00001]",
        "--regularizer <REGULARIZER>",
        "tv|l2 [default: tv]",
        "--spacing <SPACING>",
        "[default: 8]",
        "--levels <LEVELS>",
        "[default: 3]",
        "--iters <ITERS>",
        "[default: 100]",
        "--symmetric",
        "--rigid-init",
        "--lncc-radius <LNCC_RADIUS>",
        "--bins <BINS>",
    ] {
        assert!(text.contains(needle), "register help misses {needle:?}:\n{text}");
    }
}

#[test]
fn every_subcommand_prints_help() {
    for sub in [
        "register",
        "rigid",
        "warp",
        "dice",
        "mind",
        "similarity",
        "stitch",
        "phantom",
        "gridsearch",
        "volume-stats",
    ] {
        let out = mmreg(&[sub, "--help"]);
        assert_eq!(out.status.code(), Some(0), "{sub} --help exit code");
        assert!(stdout(&out).contains("Usage:"), "{sub} help has no usage line");
    }
}

#[test]
fn version_exits_zero() {
    let out = mmreg(&["--version"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).starts_with("mmreg "));
}

#[test]
fn usage_errors_exit_one() {
    for args in [
        vec!["register"],                          // missing required flags
        vec!["--bogus"],                           // unknown flag
        vec!["similarity", "--measure"],           // flag without value
        vec![],                                    // no subcommand
    ] {
        let out = mmreg(&args);
        assert_eq!(out.status.code(), Some(1), "args {args:?}");
    }
}

#[test]
fn runtime_errors_exit_two() {
    let out = mmreg(&["dice", "--a", "/nonexistent/a.mha", "--b", "/nonexistent/b.mha"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).starts_with("error:"), "stderr: {}", stderr(&out));
}

fn make_phantom(dir: &Path) {
    let out = mmreg(&[
        "phantom",
        "--out-dir",
        dir.to_str().unwrap(),
        "--dims",
        "16x16x16",
        "--deformation",
        "sinusoidal:1.5,8",
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    for file in ["a.mha", "b.mha", "labels_a.mha", "labels_b.mha", "truth.mha", "spec.txt"] {
        assert!(dir.join(file).exists(), "phantom did not write {file}");
    }
}

#[test]
fn phantom_dice_warp_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    make_phantom(dir);

    // Identical inputs score a mean Dice of 1.
    let labels = dir.join("labels_a.mha");
    let out = mmreg(&["dice", "--a", labels.to_str().unwrap(), "--b", labels.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    assert!(text.contains("mean"), "dice output:\n{text}");
    assert!(text.contains("1.000"), "dice output:\n{text}");

    // Warping by the generated truth reproduces the second modality's frame.
    let warped = dir.join("warped.mha");
    let out = mmreg(&[
        "warp",
        "--input",
        dir.join("a.mha").to_str().unwrap(),
        "--field",
        dir.join("truth.mha").to_str().unwrap(),
        "--out",
        warped.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    assert!(warped.exists());
}

#[test]
fn manifest_block_reports_run_parameters() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    make_phantom(dir);
    let manifest = dir.join("run.txt");
    let out = mmreg(&[
        "--seed",
        "99",
        "similarity",
        "--fixed",
        dir.join("a.mha").to_str().unwrap(),
        "--moving",
        dir.join("b.mha").to_str().unwrap(),
        "--measure",
        "nmi",
        "--manifest",
        manifest.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("measure=nmi value="), "similarity output:\n{text}");
    assert!(text.contains("[manifest]"), "missing manifest block:\n{text}");
    assert!(text.contains("subcommand=similarity"), "manifest block:\n{text}");
    assert!(text.contains("seed=0x63"), "manifest block:\n{text}");
    let written = std::fs::read_to_string(&manifest).unwrap();
    assert!(written.contains("subcommand=similarity"));
}

#[test]
fn thread_count_does_not_change_output() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    make_phantom(dir);
    let run = |threads: &str| {
        let out = mmreg(&[
            "--threads",
            threads,
            "similarity",
            "--fixed",
            dir.join("a.mha").to_str().unwrap(),
            "--moving",
            dir.join("b.mha").to_str().unwrap(),
            "--measure",
            "lncc",
        ]);
        assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr(&out));
        // The manifest echoes wall time and the thread flag itself; every
        // computed line must match exactly.
        stdout(&out)
            .lines()
            .filter(|l| !l.starts_with("wall_seconds") && !l.starts_with("threads"))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(run("1"), run("4"));
}
