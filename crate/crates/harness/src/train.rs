//! The training loop: fresh synthetic batches every step, SGD on the head,
//! one CSV row per step.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sparsehead_core::head::{Head, LossValues, Sgd, TrainOptions, TrainStep};
use sparsehead_core::ledger::Branch;
use sparsehead_core::Tensor4;

use crate::config::{RunConfig, Stream};
use crate::error::{Error, Result};
use crate::scene::{Batch, SceneGenerator};

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub steps: usize,
    pub final_losses: LossValues,
    /// Mean hard training-mask ratio over the trailing window, `[cls, reg]` per level.
    pub hard_ratios: Vec<[f64; 2]>,
    pub soft_ratios: Vec<[f64; 2]>,
    /// Mean AMM target per level over the same window.
    pub targets: Vec<f64>,
    pub loss_csv: PathBuf,
    pub checkpoint: PathBuf,
    pub manifest: PathBuf,
    pub seconds: f64,
}

/// Losses, then hard mask ratios and targets per level, then the extras:
/// the regression loss, the pre-clip gradient norm and soft ratios.
pub fn csv_header(levels: usize) -> Vec<String> {
    let mut h: Vec<String> = ["step", "det_loss", "norm_loss", "amm_loss", "total"].map(String::from).to_vec();
    let per_branch = |prefix: &str| (0..levels).flat_map(move |i| Branch::HEADS.map(|b| format!("{prefix}_L{i}_{}", b.name()))).collect::<Vec<_>>();
    h.extend(per_branch("hard"));
    h.extend((0..levels).map(|i| format!("target_L{i}")));
    h.extend(["reg_loss".into(), "grad_norm".into()]);
    h.extend(per_branch("soft"));
    h
}

fn csv_row(step: usize, s: &TrainStep<f32>, grad_norm: f64) -> Vec<String> {
    let l = &s.losses;
    let mut row = vec![step.to_string(), l.det.to_string(), l.norm.to_string(), l.amm.to_string(), l.total.to_string()];
    row.extend(s.ratios.iter().flat_map(|r| r.map(|x| x.hard.to_string())));
    row.extend(s.targets.iter().map(f64::to_string));
    row.extend([l.reg.to_string(), grad_norm.to_string()]);
    row.extend(s.ratios.iter().flat_map(|r| r.map(|x| x.soft.to_string())));
    row
}

/// Trains a fresh head per `cfg`, writing the loss CSV and checkpoint into
/// `cfg.output.dir`.
pub fn train(cfg: &RunConfig) -> Result<(Head<f32>, TrainReport)> {
    let head = Head::<f32>::init(cfg.head_config())?;
    train_from(cfg, head)
}

pub fn train_from(cfg: &RunConfig, mut head: Head<f32>) -> Result<(Head<f32>, TrainReport)> {
    cfg.validate()?;
    let started = Instant::now();
    let out = &cfg.output;
    fs::create_dir_all(&out.dir)?;
    let generator = SceneGenerator::new(cfg.scene.clone(), &cfg.head_config())?;
    let mut scene_rng = cfg.rng(Stream::Scenes);
    let mut noise_rng = cfg.rng(Stream::MaskNoise);
    let mut opt = Sgd::new(cfg.train.lr, cfg.train.momentum)?.with_clip(cfg.train.clip_norm)?;
    let levels = cfg.head.num_levels;
    let mut csv = csv::Writer::from_path(out.loss_csv())?;
    csv.write_record(csv_header(levels))?;
    let window_start = cfg.train.steps.saturating_sub(cfg.train.ratio_window.max(1));
    let mut hard = vec![[0.0; 2]; levels];
    let mut soft = vec![[0.0; 2]; levels];
    let mut targets = vec![0.0; levels];
    let mut final_losses = LossValues::default();
    for step in 0..cfg.train.steps {
        let batch = generator.batch(cfg.train.batch_size, &mut scene_rng)?;
        let ts = head.forward_train(&batch.feats, &batch.labels, &mut noise_rng, TrainOptions::default())?;
        let grads = ts.gradients()?;
        let finite = ts.losses.total.is_finite() && grads.iter().flatten().all(Tensor4::all_finite);
        if !finite {
            let dump = out.dir.join(format!("nan_step{step}"));
            dump_step(&dump, &head, &batch, &ts)?;
            return Err(Error::NonFinite { step, dump });
        }
        csv.write_record(csv_row(step, &ts, Sgd::grad_norm(&grads)))?;
        if step >= window_start {
            for (i, r) in ts.ratios.iter().enumerate() {
                for b in 0..2 {
                    hard[i][b] += r[b].hard;
                    soft[i][b] += r[b].soft;
                }
                targets[i] += ts.targets[i];
            }
        }
        final_losses = ts.losses;
        opt.step(&mut head, &grads)?;
        head.apply_bn_updates(&ts.bn_updates)?;
    }
    csv.flush()?;
    let n = (cfg.train.steps - window_start).max(1) as f64;
    let avg = |v: Vec<[f64; 2]>| v.into_iter().map(|r| [r[0] / n, r[1] / n]).collect::<Vec<_>>();
    head.save(&out.checkpoint(), &out.manifest(), &[cfg.seed, cfg.scene.seed])?;
    fs::write(out.dir.join("config.toml"), cfg.to_toml()?)?;
    let report = TrainReport {
        steps: cfg.train.steps,
        final_losses,
        hard_ratios: avg(hard),
        soft_ratios: avg(soft),
        targets: targets.into_iter().map(|t| t / n).collect(),
        loss_csv: out.loss_csv(),
        checkpoint: out.checkpoint(),
        manifest: out.manifest(),
        seconds: started.elapsed().as_secs_f64(),
    };
    Ok((head, report))
}

/// Writes the offending step's inputs, outputs and parameters.
fn dump_step(dir: &Path, head: &Head<f32>, batch: &Batch, ts: &TrainStep<f32>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let write = |name: String, t: &Tensor4<f32>| -> Result<()> { Ok(fs::write(dir.join(name), t.to_ct4_bytes())?) };
    for (i, x) in batch.feats.levels().iter().enumerate() {
        write(format!("feat_L{i}.ct4"), x)?;
        write(format!("labels_L{i}.ct4"), &batch.labels[i].positive_mask())?;
    }
    for (i, level) in ts.outputs.levels.iter().enumerate() {
        for (b, out) in Branch::HEADS.iter().zip(level) {
            write(format!("pred_L{i}_{}.ct4", b.name()), &out.pred)?;
            write(format!("mask_L{i}_{}.ct4", b.name()), &out.mask.to_tensor())?;
        }
    }
    head.save(&dir.join("head.ckpt"), &dir.join("head.json"), &[])?;
    fs::write(dir.join("losses.txt"), format!("{:?}\n", ts.losses))?;
    Ok(())
}
