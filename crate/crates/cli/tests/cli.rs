//! End-to-end runs of the `orbitmask` binary on a tiny model.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use orbitmask::checkpoint::read_sections;

const TINY: [&str; 10] = [
    "--set", "model.d=16",
    "--set", "model.n_layers=1",
    "--set", "model.n_heads=2",
    "--set", "model.max_seq_len=300",
    "--set", "tok.hidden=16",
];

fn orbitmask(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_orbitmask"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn orbitmask")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = orbitmask(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    orbitmask(dir, args).status.code().expect("exit code")
}

/// Dataset of 12 objects plus a 2-epoch tokenizer checkpoint on a tiny model.
fn setup() -> (tempfile::TempDir, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["gen-data", "--out", "data", "--n-objects", "12", "--seed", "5"]);
    let mut args = vec!["train-tokenizer", "--out", "tok", "--data", "data", "--epochs", "2", "--set", "split=all"];
    args.extend_from_slice(&TINY);
    ok(d, &args);
    (tmp, PathBuf::from("tok/checkpoint.ckpt"))
}

fn manifest(dir: &Path) -> Vec<String> {
    fs::read_to_string(dir.join("manifest.txt")).unwrap().lines().map(str::to_string).collect()
}

#[test]
fn dataset_is_reproducible_and_listed() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["gen-data", "--out", "a", "--n-objects", "3", "--seed", "9"]);
    ok(d, &["gen-data", "--out", "b", "--n-objects", "3", "--seed", "9"]);
    let listed = manifest(&d.join("a"));
    assert_eq!(listed, manifest(&d.join("b")));
    for rel in &listed {
        assert_eq!(fs::read(d.join("a").join(rel)).unwrap(), fs::read(d.join("b").join(rel)).unwrap(), "{rel}");
    }
    let csv = fs::read_to_string(d.join("a/manifest.csv")).unwrap();
    assert!(csv.starts_with("object_id,split,caption,ref_index,view0,"));
    assert_eq!(csv.lines().count(), 4);
    assert!(listed.contains(&"obj_00000/view7.ppm".to_string()));
    let ppm = fs::read(d.join("a/obj_00000/view0.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n32 32\n255\n"));
    assert!(listed.contains(&"config.echo".to_string()));
}

#[test]
fn configuration_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(code(d, &["gen-data", "--out", "x", "--set", "bogus=1"]), 2);
    assert_eq!(code(d, &["gen-data", "--out", "x", "--set", "n_objects"]), 2);
    assert_eq!(code(d, &["train", "--out", "x", "--stage", "4", "--ckpt", "c", "--data", "d"]), 2);
    fs::write(d.join("bad.cfg"), "no equals sign here\n").unwrap();
    assert_eq!(code(d, &["gen-data", "--out", "x", "--config", "bad.cfg"]), 2);
}

#[test]
fn io_errors_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(code(d, &["inspect-checkpoint", "--out", "x", "--ckpt", "missing.ckpt"]), 3);
    fs::write(d.join("junk.ckpt"), b"VMK1 but not really").unwrap();
    assert_eq!(code(d, &["inspect-checkpoint", "--out", "x", "--ckpt", "junk.ckpt"]), 3);
    assert_eq!(code(d, &["train-tokenizer", "--out", "x", "--data", "nowhere"]), 3);
}

#[test]
fn pipeline_commands_write_their_artifacts() {
    let (tmp, ckpt) = setup();
    let d = tmp.path();
    let ckpt = ckpt.to_str().unwrap();

    let listing = ok(d, &["inspect-checkpoint", "--out", "ins", "--ckpt", ckpt]);
    let text = String::from_utf8(listing.stdout).unwrap();
    let sections: Vec<&str> = text.lines().filter(|l| l.starts_with('[')).collect();
    assert_eq!(sections.len(), 5, "{text}");
    for (line, name) in sections.iter().zip(["vocab", "tokenizer", "model", "optimizer", "meta"]) {
        assert!(line.starts_with(&format!("[{name}]")), "{line}");
    }

    ok(d, &["train", "--out", "s1", "--stage", "1", "--ckpt", ckpt, "--data", "data", "--steps", "2", "--batch-size", "2", "--set", "split=all"]);
    let trace = fs::read_to_string(d.join("s1/trace.csv")).unwrap();
    let lines: Vec<&str> = trace.lines().collect();
    assert_eq!(lines[0], "step,stage,lr,loss");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,1,"));

    let trained = "s1/checkpoint.ckpt";
    let reference = "data/obj_00001/view0.ppm";
    ok(d, &["sample", "--out", "i2mv", "--task", "i2mv", "--ckpt", trained, "--ref", reference, "--T", "3"]);
    for k in 0..3 {
        assert!(fs::read(d.join(format!("i2mv/view{k}.ppm"))).unwrap().starts_with(b"P6\n32 32\n255\n"));
    }
    let strace = fs::read_to_string(d.join("i2mv/trace.csv")).unwrap();
    assert_eq!(strace.lines().next(), Some("step,masked_count,mean_confidence"));
    assert_eq!(strace.lines().count(), 4);
    assert!(strace.lines().last().unwrap().starts_with("3,0,"));

    ok(d, &["sample", "--out", "t2mv", "--task", "t2mv", "--ckpt", trained, "--desc", "a red cube", "--T", "2"]);
    assert!(d.join("t2mv/view3.ppm").exists());
    ok(d, &["sample", "--out", "mmu", "--task", "mmu", "--ckpt", trained, "--ref", reference, "--T", "2"]);
    assert!(d.join("mmu/answer.txt").exists());
    ok(d, &["sample", "--out", "ts", "--task", "turnstyle", "--ckpt", trained, "--ref", reference, "--T", "2"]);
    for f in ["reference.ppm", "background.ppm", "object_view0.ppm", "composite2.ppm"] {
        assert!(d.join("ts").join(f).exists(), "{f}");
    }
    assert_eq!(code(d, &["sample", "--out", "x", "--task", "i2mv", "--ckpt", trained]), 2);
    assert_eq!(code(d, &["sample", "--out", "x", "--task", "paint", "--ckpt", trained, "--ref", reference]), 2);
    assert_eq!(
        code(d, &["sample", "--out", "x", "--task", "turnstyle", "--ckpt", trained, "--ref", reference, "--region", "0,0,8,8"]),
        2
    );

    ok(d, &["ablate-schedule", "--out", "ab", "--ckpt", trained, "--data", "data", "--split", "all", "--T", "2", "--seeds", "0", "--set", "max_objects=2"]);
    let csv = fs::read_to_string(d.join("ab/ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "schedule,psnr,ssim,token_acc,consistency,n_samples");
    let names: Vec<&str> = rows[1..].iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(names, ["linear", "quadratic", "cosine"]);

    ok(d, &["eval", "--out", "ev", "--ckpt", trained, "--data", "data", "--split", "all", "--T", "2", "--set", "max_objects=2"]);
    assert_eq!(fs::read_to_string(d.join("ev/eval.csv")).unwrap().lines().count(), 3);
    assert!(fs::read_to_string(d.join("ev/summary.txt")).unwrap().contains("shuffled_psnr"));
}

#[test]
fn zero_steps_passes_the_checkpoint_through() {
    let (tmp, ckpt) = setup();
    let d = tmp.path();
    ok(d, &["train", "--out", "z", "--stage", "2", "--ckpt", ckpt.to_str().unwrap(), "--data", "data", "--steps", "0"]);
    assert_eq!(fs::read(d.join("z/checkpoint.ckpt")).unwrap(), fs::read(d.join(&ckpt)).unwrap());
    assert_eq!(fs::read_to_string(d.join("z/trace.csv")).unwrap(), "step,stage,lr,loss\n");
}

#[test]
fn resume_from_periodic_checkpoint_matches_uninterrupted_trace() {
    let (tmp, ckpt) = setup();
    let d = tmp.path();
    let base = ["--stage", "2", "--data", "data", "--steps", "4", "--batch-size", "2", "--set", "split=all", "--set", "checkpoint_every=2"];
    let mut full = vec!["train", "--out", "full", "--ckpt", ckpt.to_str().unwrap()];
    full.extend_from_slice(&base);
    ok(d, &full);
    assert!(d.join("full/checkpoint_step000002.ckpt").exists());
    let mut resumed = vec!["train", "--out", "resumed", "--ckpt", "full/checkpoint_step000002.ckpt"];
    resumed.extend_from_slice(&base);
    ok(d, &resumed);
    let full_trace = fs::read_to_string(d.join("full/trace.csv")).unwrap();
    let resumed_trace = fs::read_to_string(d.join("resumed/trace.csv")).unwrap();
    let tail: Vec<&str> = full_trace.lines().skip(3).collect();
    let rest: Vec<&str> = resumed_trace.lines().skip(1).collect();
    assert_eq!(tail, rest);
    // The meta sections differ only in the echoed `ckpt` path.
    let a = read_sections(d.join("full/checkpoint.ckpt")).unwrap();
    let b = read_sections(d.join("resumed/checkpoint.ckpt")).unwrap();
    for name in ["vocab", "tokenizer", "model", "optimizer"] {
        let pick = |s: &[orbitmask::checkpoint::Section]| s.iter().find(|x| x.name == name).cloned();
        assert_eq!(pick(&a), pick(&b), "{name}");
    }
}

#[test]
fn config_echo_replays_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(d, &["gen-data", "--out", "first", "--n-objects", "2", "--seed", "4"]);
    let echo = fs::read_to_string(d.join("first/config.echo")).unwrap();
    assert!(echo.contains("n_objects = 2") && echo.contains("seed = 4"), "{echo}");
    ok(d, &["gen-data", "--out", "second", "--config", "first/config.echo"]);
    assert_eq!(
        fs::read(d.join("first/manifest.csv")).unwrap(),
        fs::read(d.join("second/manifest.csv")).unwrap()
    );
}

#[test]
fn non_finite_training_exits_4() {
    let (tmp, ckpt) = setup();
    let d = tmp.path();
    let status = code(
        d,
        &["train", "--out", "nan", "--stage", "1", "--ckpt", ckpt.to_str().unwrap(), "--data", "data", "--steps", "3", "--set", "split=all", "--set", "base_lr=1e30", "--set", "warmup_steps=0"],
    );
    assert_eq!(status, 4);
    assert!(d.join("nan/diagnostic.txt").exists());
}
