//! Held-out scenes, inference activation ratios and mask dumps.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sparsehead_core::head::{FpnFeatures, Head, HeadOutputs};
use sparsehead_core::ledger::{Branch, FlopLedger};

use crate::config::{RunConfig, Stream};
use crate::error::Result;
use crate::scene::{Scene, SceneGenerator};

/// `n` scenes at the config's evaluation size. Scenes are generated in
/// parallel from per-scene seeds drawn up front, so the set is deterministic.
pub fn eval_scenes(cfg: &RunConfig, n: usize) -> Result<Vec<Scene>> {
    let generator = SceneGenerator::new(cfg.scene.clone(), &cfg.head_config())?.resized(cfg.eval.width, cfg.eval.height)?;
    let mut rng = cfg.rng(Stream::Eval);
    let seeds: Vec<u64> = (0..n).map(|_| rng.random()).collect();
    seeds.into_par_iter().map(|s| generator.generate(&mut ChaCha8Rng::seed_from_u64(s))).collect()
}

/// Sparse inference with levels evaluated concurrently, each with a private
/// ledger merged afterwards.
pub fn infer_parallel(head: &Head<f32>, feats: &FpnFeatures<f32>) -> Result<HeadOutputs<f32>> {
    let per_level: Vec<_> = feats.levels().par_iter().enumerate().map(|(i, x)| head.infer_level(i, x, None)).collect::<std::result::Result<_, _>>()?;
    let mut ledger = FlopLedger::new();
    let mut levels = Vec::with_capacity(per_level.len());
    for (out, l) in per_level {
        ledger.merge(&l);
        levels.push(out);
    }
    Ok(HeadOutputs { levels, ledger })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelRatio {
    pub level: usize,
    /// Mean realized foreground fraction of the scenes at this level.
    pub foreground: f64,
    /// Inference activation ratio `[cls, reg]`.
    pub active: [f64; 2],
}

impl LevelRatio {
    pub fn mean_active(&self) -> f64 {
        (self.active[0] + self.active[1]) / 2.0
    }
}

pub fn activation_ratios(head: &Head<f32>, scenes: &[Scene]) -> Result<Vec<LevelRatio>> {
    let levels = head.cfg.num_levels;
    let mut active = vec![[0usize; 2]; levels];
    let mut pixels = vec![0usize; levels];
    let mut fg = vec![0.0; levels];
    for s in scenes {
        let out = head.forward_infer(&s.feats)?;
        for (i, lv) in out.levels.iter().enumerate() {
            for b in 0..2 {
                active[i][b] += lv[b].mask.active_count();
            }
            pixels[i] += lv[0].mask.decisions().len();
            fg[i] += s.fractions[i];
        }
    }
    Ok((0..levels)
        .map(|i| LevelRatio {
            level: i,
            foreground: fg[i] / scenes.len().max(1) as f64,
            active: [0, 1].map(|b| active[i][b] as f64 / pixels[i].max(1) as f64),
        })
        .collect())
}

/// Writes `mask_L{level}_{branch}.ct4` for one scene's inference masks.
pub fn dump_masks(head: &Head<f32>, scene: &Scene, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let out = head.forward_infer(&scene.feats)?;
    let mut written = Vec::new();
    for (i, lv) in out.levels.iter().enumerate() {
        for (b, o) in Branch::HEADS.iter().zip(lv) {
            let path = dir.join(format!("mask_L{i}_{}.ct4", b.name()));
            fs::write(&path, o.mask.to_tensor().to_ct4_bytes())?;
            written.push(path);
        }
    }
    Ok(written)
}
