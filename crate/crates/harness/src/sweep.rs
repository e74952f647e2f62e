//! Fixed mask-ratio sweep: one training run per ratio, then inference
//! activation and MACs on shared evaluation scenes.

use std::path::Path;

use sparsehead_core::objective::RatioMode;

use crate::config::RunConfig;
use crate::error::{invalid, Result};
use crate::eval::{activation_ratios, eval_scenes, LevelRatio};
use crate::flops::bench_flops;
use crate::train::train;

#[derive(Clone, Debug)]
pub struct SweepPoint {
    pub mask_ratio: f64,
    pub levels: Vec<LevelRatio>,
    pub executed_macs: u64,
    pub dense_macs: u64,
}

impl SweepPoint {
    /// Activation target `1 − r`.
    pub fn target(&self) -> f64 {
        1.0 - self.mask_ratio
    }

    /// Largest deviation of any level and branch from the target.
    pub fn max_error(&self) -> f64 {
        self.levels.iter().flat_map(|l| l.active).map(|a| (a - self.target()).abs()).fold(0.0, f64::max)
    }
}

/// Trains `base` under `FIXED(r)` for each ratio. Run outputs go to
/// `base.output.dir/fixed_{r}`.
pub fn sweep_ratio(base: &RunConfig, ratios: &[f64]) -> Result<Vec<SweepPoint>> {
    if ratios.is_empty() {
        return Err(invalid!("no ratios to sweep"));
    }
    let scenes = eval_scenes(base, base.eval.scenes)?;
    let mut points = Vec::with_capacity(ratios.len());
    for &r in ratios {
        let mut cfg = base.clone();
        cfg.head.ratio_mode = RatioMode::Fixed(r);
        cfg.output.dir = base.output.dir.join(format!("fixed_{r}"));
        let (head, _) = train(&cfg)?;
        let flops = bench_flops(&head, &scenes)?;
        points.push(SweepPoint {
            mask_ratio: r,
            levels: activation_ratios(&head, &scenes)?,
            executed_macs: flops.total().executed(),
            dense_macs: flops.total().dense_macs,
        });
    }
    Ok(points)
}

/// Whether executed MACs never increase as the mask ratio grows.
pub fn macs_non_increasing(points: &[SweepPoint]) -> bool {
    let mut sorted: Vec<&SweepPoint> = points.iter().collect();
    sorted.sort_by(|a, b| a.mask_ratio.total_cmp(&b.mask_ratio));
    sorted.windows(2).all(|w| w[1].executed_macs <= w[0].executed_macs)
}

pub fn write_csv(points: &[SweepPoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let levels = points.first().map_or(0, |p| p.levels.len());
    let mut header: Vec<String> = vec!["mask_ratio".into(), "target".into()];
    for i in 0..levels {
        header.extend([format!("active_L{i}_cls"), format!("active_L{i}_reg")]);
    }
    header.extend(["executed_macs".into(), "dense_macs".into()]);
    w.write_record(&header)?;
    for p in points {
        let mut row = vec![p.mask_ratio.to_string(), p.target().to_string()];
        for l in &p.levels {
            row.extend(l.active.iter().map(f64::to_string));
        }
        row.extend([p.executed_macs.to_string(), p.dense_macs.to_string()]);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(r: f64, macs: u64) -> SweepPoint {
        let levels = vec![LevelRatio { level: 0, foreground: 0.1, active: [1.0 - r + 0.01, 1.0 - r - 0.03] }];
        SweepPoint { mask_ratio: r, levels, executed_macs: macs, dense_macs: 1000 }
    }

    #[test]
    fn monotonicity_ignores_input_order() {
        assert!(macs_non_increasing(&[point(0.9, 100), point(0.5, 500), point(0.7, 300)]));
        assert!(!macs_non_increasing(&[point(0.9, 400), point(0.5, 300)]));
    }

    #[test]
    fn error_is_worst_branch() {
        assert!((point(0.7, 0).max_error() - 0.03).abs() < 1e-12);
    }

    #[test]
    fn tiny_sweep_runs_and_writes() {
        let dir = tempfile::tempdir().unwrap();
        let sets = [
            "train.steps=3".to_string(),
            "head.channels=8".into(),
            "head.num_groups=2".into(),
            "eval.scenes=1".into(),
            "eval.width=224".into(),
            "eval.height=192".into(),
            format!("output.dir={}", dir.path().display()),
        ];
        let cfg = RunConfig::load(None, &sets).unwrap();
        let pts = sweep_ratio(&cfg, &[0.5, 0.9]).unwrap();
        assert_eq!(pts.len(), 2);
        assert!(dir.path().join("fixed_0.5").join("loss.csv").exists());
        let p = dir.path().join("sweep.csv");
        write_csv(&pts, &p).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert!(text.starts_with("mask_ratio,target,active_L0_cls,active_L0_reg,active_L1_cls,active_L1_reg,executed_macs,dense_macs\n"));
    }
}
