//! Command-line front end.
//!
//! Exit codes: 0 success, 1 config or runtime error, 2 usage error, 3 a
//! gradient check exceeded its tolerance.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use sparsehead_core::head::Head;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{dump_masks, eval_scenes};
use crate::flops::bench_flops;
use crate::gradsuite::{self, Precision};
use crate::latency::bench_latency;
use crate::sweep::{macs_non_increasing, sweep_ratio, write_csv};
use crate::train::train;

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_GRADCHECK: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "sparsehead", version, about = "Sparse detection head: training, benchmarks and checks on synthetic scenes")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML run config; defaults are used for anything it leaves out.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (`output.dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Config override, e.g. `--set head.loss.beta=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub sets: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on synthetic scenes; writes the loss CSV and a checkpoint.
    Train,
    /// Per-level and per-branch MACs of sparse inference against dense.
    BenchFlops(CheckpointArg),
    /// Wall-clock median of sparse against dense inference.
    BenchLatency(CheckpointArg),
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        /// Only this precision; both when absent.
        #[arg(long, value_parser = ["f32", "f64"])]
        precision: Option<String>,
    },
    /// One fixed-ratio training run per ratio.
    SweepRatio {
        #[arg(long, value_delimiter = ',', default_values_t = [0.5, 0.7, 0.9, 0.95])]
        ratios: Vec<f64>,
    },
    /// Per-level inference masks of one evaluation scene.
    DumpMasks {
        #[command(flatten)]
        checkpoint: CheckpointArg,
        /// Index into the evaluation scenes.
        #[arg(long, default_value_t = 0)]
        scene: usize,
    },
}

#[derive(Debug, Args)]
pub struct CheckpointArg {
    /// Checkpoint file or run directory; the output directory's checkpoint when absent.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

/// Parses `argv` and runs the command, writing reports to `out` and
/// diagnostics to `err`. Returns the process exit code.
pub fn run<I, S>(argv: I, out: &mut impl Write, err: &mut impl Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    EXIT_OK
                }
                _ => EXIT_USAGE,
            };
        }
    };
    match execute(&cli, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_ERROR
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut sets = common.sets.clone();
    if let Some(seed) = common.seed {
        sets.push(format!("seed={seed}"));
    }
    if let Some(dir) = &common.out {
        sets.push(format!("output.dir={}", toml::Value::String(dir.display().to_string())));
    }
    RunConfig::load(common.config.as_deref(), &sets)
}

/// Loads a checkpoint and adopts its head shape into `cfg` so that the
/// evaluation features match it.
fn load_head(cfg: &mut RunConfig, arg: &CheckpointArg) -> Result<Head<f32>> {
    let (params, manifest) = match &arg.checkpoint {
        None => (cfg.output.checkpoint(), cfg.output.manifest()),
        Some(p) if p.is_dir() => (p.join(&cfg.output.checkpoint), p.join(&cfg.output.manifest)),
        Some(p) => (p.clone(), p.with_extension("json")),
    };
    let head = Head::<f32>::load(&params, &manifest)?;
    cfg.head = head.cfg.clone();
    cfg.head.seed = cfg.seed;
    cfg.validate()?;
    Ok(head)
}

fn execute(cli: &Cli, out: &mut impl Write) -> Result<i32> {
    let mut cfg = load_config(&cli.common)?;
    let dir = cfg.output.dir.clone();
    match &cli.command {
        Command::Train => {
            let (_, r) = train(&cfg)?;
            writeln!(out, "trained {} steps in {:.1}s", r.steps, r.seconds)?;
            for (i, (h, t)) in r.hard_ratios.iter().zip(&r.targets).enumerate() {
                writeln!(out, "level {i}: target {t:.4} hard cls {:.4} reg {:.4}", h[0], h[1])?;
            }
            writeln!(out, "checkpoint {}", r.checkpoint.display())?;
        }
        Command::BenchFlops(arg) => {
            let head = load_head(&mut cfg, arg)?;
            let scenes = eval_scenes(&cfg, cfg.eval.scenes)?;
            let report = bench_flops(&head, &scenes)?;
            let path = ensure_dir(&dir)?.join("flops.csv");
            report.write_csv(&path)?;
            writeln!(out, "MAC reduction {:.2}% over {} scenes; dense matches closed form: {}", report.reduction_pct(), scenes.len(), report.dense_matches_closed_form())?;
            writeln!(out, "wrote {}", path.display())?;
        }
        Command::BenchLatency(arg) => {
            let head = load_head(&mut cfg, arg)?;
            let scene = eval_scenes(&cfg, 1)?.remove(0);
            let r = bench_latency(&head, &scene.feats, cfg.eval.latency_reps, cfg.eval.warmup, cfg.eval.parallel)?;
            let path = ensure_dir(&dir)?.join("latency.csv");
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["variant", "median_ms", "p10_ms", "p90_ms"])?;
            for (name, t) in [("sparse", &r.sparse), ("dense", &r.dense)] {
                w.write_record([name.to_string(), t.median_ms.to_string(), t.p10_ms.to_string(), t.p90_ms.to_string()])?;
            }
            w.flush()?;
            let d = r.input;
            writeln!(out, "input ({},{},{},{}) reps {}: sparse {:.2} ms, dense {:.2} ms, speedup {:.2}x", d.b, d.c, d.h, d.w, r.repetitions, r.sparse.median_ms, r.dense.median_ms, r.speedup())?;
            writeln!(out, "wrote {}", path.display())?;
        }
        Command::Gradcheck { precision } => {
            let precisions = match precision.as_deref() {
                Some("f32") => vec![Precision::F32],
                Some(_) => vec![Precision::F64],
                None => vec![Precision::F32, Precision::F64],
            };
            let mut ok = true;
            for p in precisions {
                let report = gradsuite::run(p, cfg.seed)?;
                for c in &report.cases {
                    writeln!(out, "{p} {:<16} {:.3e}", c.name, c.error)?;
                }
                writeln!(out, "{p} max {:.3e} (tolerance {:.0e}): {}", report.max_error(), p.tolerance(), if report.passed() { "ok" } else { "FAILED" })?;
                ok &= report.passed();
            }
            return Ok(if ok { EXIT_OK } else { EXIT_GRADCHECK });
        }
        Command::SweepRatio { ratios } => {
            let points = sweep_ratio(&cfg, ratios)?;
            let path = ensure_dir(&dir)?.join("sweep.csv");
            write_csv(&points, &path)?;
            for p in &points {
                writeln!(out, "ratio {:.2}: target {:.2} worst error {:.4} executed MACs {}", p.mask_ratio, p.target(), p.max_error(), p.executed_macs)?;
            }
            writeln!(out, "MACs non-increasing in ratio: {}", macs_non_increasing(&points))?;
            writeln!(out, "wrote {}", path.display())?;
        }
        Command::DumpMasks { checkpoint, scene } => {
            let head = load_head(&mut cfg, checkpoint)?;
            let scenes = eval_scenes(&cfg, scene + 1)?;
            let written = dump_masks(&head, &scenes[*scene], &dir.join("masks"))?;
            for p in written {
                writeln!(out, "wrote {}", p.display())?;
            }
        }
    }
    Ok(EXIT_OK)
}

fn ensure_dir(dir: &Path) -> Result<&Path> {
    fs::create_dir_all(dir).map_err(Error::from)?;
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code(args: &[&str]) -> (i32, String) {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        let c = run(std::iter::once("sparsehead").chain(args.iter().copied()), &mut o, &mut e);
        (c, String::from_utf8_lossy(&e).into_owned())
    }

    #[test]
    fn usage_errors_exit_two() {
        assert_eq!(code(&["frobnicate"]).0, EXIT_USAGE);
        assert_eq!(code(&["train", "--bogus"]).0, EXIT_USAGE);
        assert_eq!(code(&[]).0, EXIT_USAGE);
        assert_eq!(code(&["--help"]).0, EXIT_OK);
    }

    #[test]
    fn bad_override_exits_one_with_field() {
        let (c, err) = code(&["train", "--set", "train.steps=\"many\""]);
        assert_eq!(c, EXIT_ERROR);
        assert!(err.contains("steps"), "{err}");
    }

    #[test]
    fn seed_and_out_flags_feed_the_config() {
        let common = Common { config: None, seed: Some(9), out: Some("x/y".into()), sets: vec!["seed=3".into()] };
        let cfg = load_config(&common).unwrap();
        assert_eq!((cfg.seed, cfg.output.dir), (9, PathBuf::from("x/y")));
    }
}
