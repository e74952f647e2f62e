//! The `sparsehead` binary end to end: exit codes, diagnostics and the files
//! each subcommand writes.

use std::path::Path;
use std::process::{Command, Output};

fn sparsehead(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sparsehead")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Overrides for a head small enough to train in well under a second.
const TINY: [&str; 10] = ["--set", "head.channels=8", "--set", "head.num_groups=2", "--set", "train.steps=4", "--set", "eval.scenes=1", "--set", "eval.width=224"];

fn tiny(sub: &str, out: &Path, extra: &[&str]) -> Output {
    let out = out.to_str().unwrap();
    let mut args = vec![sub, "--out", out, "--set", "eval.height=192"];
    args.extend(TINY);
    args.extend(extra);
    sparsehead(&args)
}

#[test]
fn unknown_subcommand_and_flag_exit_two_with_usage() {
    let o = sparsehead(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    let o = sparsehead(&["train", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(sparsehead(&["--help"]).status.code(), Some(0));
}

#[test]
fn config_errors_exit_one_with_line_and_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "seed = 3\n\n[train]\nsteps = \"many\"\n").unwrap();
    let o = sparsehead(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("line 4") && err.contains("steps"), "{err}");

    std::fs::write(&cfg, "[head]\nchanels = 8\n").unwrap();
    let o = sparsehead(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("chanels"), "{}", stderr(&o));

    let o = sparsehead(&["train", "--set", "train.batch_size=0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("batch_size"), "{}", stderr(&o));
}

#[test]
fn gradcheck_passes_in_both_precisions() {
    let o = sparsehead(&["gradcheck", "--seed", "4"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("f32 max") && text.contains("f64 max"), "{text}");
}

#[test]
fn train_then_benchmarks_and_mask_dump() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = tiny("train", &run, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["loss.csv", "head.ckpt", "head.json", "config.toml"] {
        assert!(run.join(f).exists(), "missing {f}");
    }

    let bench = dir.path().join("bench");
    let ckpt = run.join("head.ckpt");
    let o = tiny("bench-flops", &bench, &["--checkpoint", ckpt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let flops = std::fs::read_to_string(bench.join("flops.csv")).unwrap();
    assert!(flops.starts_with("level,branch,dense_macs,sparse_macs,mask_macs,g_macs,activation_ratio,reduction_pct\n"));

    let o = tiny("bench-latency", &bench, &["--checkpoint", run.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(bench.join("latency.csv")).unwrap().lines().count(), 3);

    let o = tiny("dump-masks", &run, &["--scene", "0"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["mask_L0_cls.ct4", "mask_L0_reg.ct4", "mask_L1_cls.ct4", "mask_L1_reg.ct4"] {
        let bytes = std::fs::read(run.join("masks").join(f)).unwrap();
        assert_eq!(&bytes[..4], b"CT4\0");
    }
}

#[test]
fn missing_checkpoint_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = tiny("bench-flops", dir.path(), &[]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn sweep_writes_one_row_per_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let o = tiny("sweep-ratio", dir.path(), &["--ratios", "0.5,0.9"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(dir.path().join("fixed_0.9").join("head.ckpt").exists());
}
