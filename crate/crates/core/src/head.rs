//! Multi-level, two-branch sparse detection head.
//!
//! Every FPN level runs the same weights: one point-wise projection producing
//! the global feature `G`, then per branch a mask network, four CESC layers
//! and a 3×3 prediction convolution. Inactive prediction pixels output the
//! prediction bias.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cesc::{
    cesc_forward_sparse, dense_layer, global_feature, read_params, tape_cesc_dense, tape_cesc_sparse,
    tape_global_feature, write_params, CescLayer, Gate, GlobalVars, InactiveFill, LayerVars, Mode,
    NormalizerKind, STACKED_LAYERS,
};
use crate::error::{ensure, Error, Result};
use crate::ledger::{Branch, FlopLedger, Site, Slot};
use crate::mask::{infer_mask, mask_logits, sparse_conv3x3, GumbelNoise, HardMask};
use crate::norm::Stats;
use crate::objective::{
    det_loss_surrogate, reg_loss_surrogate, tape_amm_loss, tape_det_loss, tape_reg_loss, tape_total_loss, target_ratios,
    LevelLabels, LossWeights, RatioMode,
};
use crate::ops::{conv2d, ConvWeights, Kernel};
use crate::real::Real;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{Dims, Tensor4};

/// Focal-loss prior initialization: `−ln((1 − 0.01) / 0.01)`.
pub const CLS_PRIOR_BIAS: f64 = -4.59;
pub const REG_OUTPUTS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub num_levels: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub stacked_layers: usize,
    pub level_strides: Vec<usize>,
    pub num_groups: usize,
    pub ratio_mode: RatioMode,
    pub normalizer: NormalizerKind,
    pub inactive_fill: InactiveFill,
    /// Gumbel temperature of the training mask.
    pub tau: f64,
    pub loss: LossWeights,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            num_levels: 3,
            channels: 64,
            num_classes: 3,
            stacked_layers: STACKED_LAYERS,
            level_strides: vec![8, 16, 32],
            num_groups: 8,
            ratio_mode: RatioMode::AdaptiveLayerwise,
            normalizer: NormalizerKind::CeGn,
            inactive_fill: InactiveFill::Global,
            tau: 1.0,
            loss: LossWeights::default(),
            init_std: 0.01,
            seed: 0,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.num_levels >= 1, "at least one level is required");
        ensure!(self.level_strides.len() == self.num_levels, "{} strides for {} levels", self.level_strides.len(), self.num_levels);
        ensure!(self.level_strides.windows(2).all(|w| w[0] < w[1]), "strides must be strictly increasing");
        ensure!(self.level_strides.iter().all(|&s| s > 0), "strides must be positive");
        ensure!(self.stacked_layers == STACKED_LAYERS, "the head stacks exactly {STACKED_LAYERS} layers");
        ensure!(self.channels > 0 && self.num_classes > 0, "channels and classes must be positive");
        ensure!(self.num_groups > 0 && self.channels % self.num_groups == 0, "{} groups do not divide {} channels", self.num_groups, self.channels);
        ensure!(self.tau > 0.0, "temperature must be positive");
        ensure!(self.init_std > 0.0, "init std must be positive");
        self.ratio_mode.validate()?;
        self.loss.validate()
    }

    pub fn pred_channels(&self, branch: Branch) -> usize {
        match branch {
            Branch::Cls => self.num_classes,
            _ => REG_OUTPUTS,
        }
    }

    /// Feature-map size of `level` for an image of `height × width` pixels.
    pub fn level_size(&self, level: usize, height: usize, width: usize) -> (usize, usize) {
        let s = self.level_strides[level];
        (height.div_ceil(s), width.div_ceil(s))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    /// 1-based class id.
    pub class: u16,
}

impl GtBox {
    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtScene {
    pub width: usize,
    pub height: usize,
    pub boxes: Vec<GtBox>,
}

impl GtScene {
    pub fn new(width: usize, height: usize, boxes: Vec<GtBox>) -> Result<Self> {
        for b in &boxes {
            ensure!(b.x1 > b.x0 && b.y1 > b.y0, "degenerate box {b:?}");
            ensure!(b.x0 >= 0.0 && b.y0 >= 0.0 && b.x1 <= width as f64 && b.y1 <= height as f64, "box {b:?} outside image");
            ensure!(b.class > 0, "box class ids start at 1");
        }
        Ok(GtScene { width, height, boxes })
    }
}

/// Level a box belongs to: `√area ∈ [4·s_k, 8·s_k)`, open at both ends.
pub fn box_level(b: &GtBox, strides: &[usize]) -> usize {
    let size = b.area().sqrt();
    strides.iter().rposition(|&s| size >= 4.0 * s as f64).unwrap_or(0)
}

/// Per-level labels for a batch of scenes. Pixel centers inside an assigned
/// box take its class; the smaller box wins on overlap. Regression targets
/// are center-to-edge distances divided by `4·stride`.
pub fn assign_labels<T: Real>(scenes: &[GtScene], cfg: &HeadConfig) -> Result<Vec<LevelLabels<T>>> {
    ensure!(!scenes.is_empty(), "no scenes to label");
    let (h0, w0) = (scenes[0].height, scenes[0].width);
    ensure!(scenes.iter().all(|s| s.height == h0 && s.width == w0), "scenes in a batch must share the image size");
    let nb = scenes.len();
    let mut out = Vec::with_capacity(cfg.num_levels);
    for level in 0..cfg.num_levels {
        let s = cfg.level_strides[level] as f64;
        let (h, w) = cfg.level_size(level, h0, w0);
        let hw = h * w;
        let mut classes = vec![0u16; nb * hw];
        let mut reg = vec![T::zero(); nb * REG_OUTPUTS * hw];
        for (b, scene) in scenes.iter().enumerate() {
            let mut best = vec![f64::INFINITY; hw];
            for bx in scene.boxes.iter().filter(|bx| box_level(bx, &cfg.level_strides) == level) {
                let area = bx.area();
                for y in 0..h {
                    let cy = (y as f64 + 0.5) * s;
                    for x in 0..w {
                        let cx = (x as f64 + 0.5) * s;
                        let k = y * w + x;
                        if bx.contains(cx, cy) && area < best[k] {
                            best[k] = area;
                            classes[b * hw + k] = bx.class;
                            let norm = 4.0 * s;
                            let d = [cx - bx.x0, cy - bx.y0, bx.x1 - cx, bx.y1 - cy];
                            for (c, v) in d.iter().enumerate() {
                                reg[(b * REG_OUTPUTS + c) * hw + k] = T::lit(v / norm);
                            }
                        }
                    }
                }
            }
        }
        let labels = LevelLabels::new(Dims::new(nb, 1, h, w), classes, cfg.num_classes)?;
        out.push(labels.with_reg_targets(Tensor4::from_vec(Dims::new(nb, REG_OUTPUTS, h, w), reg)?)?);
    }
    Ok(out)
}

/// One feature map per level, uniform channel and batch counts.
#[derive(Clone, Debug, PartialEq)]
pub struct FpnFeatures<T = f32> {
    levels: Vec<Tensor4<T>>,
}

impl<T: Real> FpnFeatures<T> {
    pub fn new(levels: Vec<Tensor4<T>>) -> Result<Self> {
        ensure!(!levels.is_empty(), "no feature levels");
        let d = levels[0].dims();
        ensure!(levels.iter().all(|l| l.dims().c == d.c && l.dims().b == d.b), "feature levels must share batch and channel counts");
        Ok(FpnFeatures { levels })
    }

    pub fn levels(&self) -> &[Tensor4<T>] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn stack(parts: &[FpnFeatures<T>]) -> Result<Self> {
        ensure!(!parts.is_empty(), "nothing to stack");
        let n = parts[0].len();
        ensure!(parts.iter().all(|p| p.len() == n), "level counts differ");
        let levels = (0..n)
            .map(|i| Tensor4::stack_batch(&parts.iter().map(|p| p.levels[i].clone()).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        Self::new(levels)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchParams<T = f32> {
    pub mask: ConvWeights<T>,
    pub layers: Vec<CescLayer<T>>,
    pub pred: ConvWeights<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head<T = f32> {
    pub cfg: HeadConfig,
    pub point: ConvWeights<T>,
    pub cls: BranchParams<T>,
    pub reg: BranchParams<T>,
}

fn normal_tensor<T: Real>(dims: Dims, std: f64, rng: &mut impl Rng) -> Result<Tensor4<T>> {
    let n = Normal::new(0.0, std).map_err(|e| Error::Contract(e.to_string()))?;
    Ok(Tensor4::from_fn(dims, |_, _, _, _| T::lit(n.sample(rng))))
}

impl<T: Real> Head<T> {
    pub fn init(cfg: HeadConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let c = cfg.channels;
        // Fan-in matched to a 3×3 layer of the same width, so CE-GN's
        // l/std[G] ratio starts near one instead of growing 3× per layer.
        let point = ConvWeights::new(normal_tensor(Dims::new(c, c, 1, 1), cfg.init_std * 3.0, &mut rng)?, Some(Tensor4::zeros(Dims::new(1, c, 1, 1))))?;
        let branch = |b: Branch, rng: &mut ChaCha8Rng| -> Result<BranchParams<T>> {
            let layers = (0..STACKED_LAYERS)
                .map(|_| Ok(CescLayer::init(c, cfg.num_groups, cfg.normalizer, cfg.init_std, rng)?.with_fill(cfg.inactive_fill)))
                .collect::<Result<Vec<_>>>()?;
            let out = cfg.pred_channels(b);
            let bias = if b == Branch::Cls { T::lit(CLS_PRIOR_BIAS) } else { T::zero() };
            Ok(BranchParams {
                mask: ConvWeights::zeros(1, c, Kernel::K3x3, true),
                layers,
                pred: ConvWeights::new(normal_tensor(Dims::new(out, c, 3, 3), cfg.init_std, rng)?, Some(Tensor4::full(Dims::new(1, out, 1, 1), bias)))?,
            })
        };
        let cls = branch(Branch::Cls, &mut rng)?;
        let reg = branch(Branch::Reg, &mut rng)?;
        Ok(Head { cfg, point, cls, reg })
    }

    pub fn branch(&self, b: Branch) -> &BranchParams<T> {
        match b {
            Branch::Cls => &self.cls,
            _ => &self.reg,
        }
    }

    pub fn branch_mut(&mut self, b: Branch) -> &mut BranchParams<T> {
        match b {
            Branch::Cls => &mut self.cls,
            _ => &mut self.reg,
        }
    }

    /// Every stored tensor with its checkpoint name, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Tensor4<T>)> {
        let mut out = vec![("point.weight".to_string(), &self.point.weight), ("point.bias".to_string(), self.point.bias.as_ref().expect("point bias"))];
        for b in Branch::HEADS {
            let p = self.branch(b);
            let n = b.name();
            out.push((format!("{n}.mask.weight"), &p.mask.weight));
            out.push((format!("{n}.mask.bias"), p.mask.bias.as_ref().expect("mask bias")));
            for (j, l) in p.layers.iter().enumerate() {
                for (k, t) in l.params() {
                    out.push((format!("{n}.layer{j}.{k}"), t));
                }
            }
            out.push((format!("{n}.pred.weight"), &p.pred.weight));
            out.push((format!("{n}.pred.bias"), p.pred.bias.as_ref().expect("pred bias")));
        }
        out
    }

    /// Same order as [`Head::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Tensor4<T>> {
        let mut out: Vec<&mut Tensor4<T>> = vec![&mut self.point.weight, self.point.bias.as_mut().expect("point bias")];
        for p in [&mut self.cls, &mut self.reg] {
            out.push(&mut p.mask.weight);
            out.push(p.mask.bias.as_mut().expect("mask bias"));
            for l in p.layers.iter_mut() {
                out.extend(l.params_mut());
            }
            out.push(&mut p.pred.weight);
            out.push(p.pred.bias.as_mut().expect("pred bias"));
        }
        out
    }

    pub fn is_trainable(name: &str) -> bool {
        !name.contains("running_")
    }

    fn check_features(&self, feats: &FpnFeatures<T>) -> Result<()> {
        ensure!(feats.len() == self.cfg.num_levels, "{} feature levels for a {}-level head", feats.len(), self.cfg.num_levels);
        ensure!(feats.levels()[0].dims().c == self.cfg.channels, "features have {} channels, head {}", feats.levels()[0].dims().c, self.cfg.channels);
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Head<U> {
        let cw = |w: &ConvWeights<T>| ConvWeights { weight: w.weight.cast(), bias: w.bias.as_ref().map(|b| b.cast()) };
        let br = |p: &BranchParams<T>| BranchParams {
            mask: cw(&p.mask),
            layers: p
                .layers
                .iter()
                .map(|l| CescLayer {
                    conv: cw(&l.conv),
                    scale: l.scale.cast(),
                    shift: l.shift.cast(),
                    num_groups: l.num_groups,
                    kind: l.kind,
                    fill: l.fill,
                    running_mean: l.running_mean.cast(),
                    running_var: l.running_var.cast(),
                })
                .collect(),
            pred: cw(&p.pred),
        };
        Head { cfg: self.cfg.clone(), point: cw(&self.point), cls: br(&self.cls), reg: br(&self.reg) }
    }
}

/// Per-branch results of one level.
#[derive(Clone, Debug, PartialEq)]
pub struct BranchOutput<T = f32> {
    pub pred: Tensor4<T>,
    pub mask: HardMask<T>,
    pub sparse_feats: Vec<Tensor4<T>>,
    /// Dense shadow features; empty at inference.
    pub dense_feats: Vec<Tensor4<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutputs<T = f32> {
    /// `levels[i][0]` is classification, `levels[i][1]` regression.
    pub levels: Vec<[BranchOutput<T>; 2]>,
    pub ledger: FlopLedger,
}

/// Forces every mask on or off instead of thresholding.
pub type MaskOverride = Option<bool>;

fn fill_inactive_bias<T: Real>(pred: &mut Tensor4<T>, mask: &HardMask<T>, bias: &[T]) {
    let d = pred.dims();
    let hw = d.plane();
    for b in 0..d.b {
        let gate = &mask.decisions()[b * hw..(b + 1) * hw];
        for c in 0..d.c {
            let base = (b * d.c + c) * hw;
            for (k, &on) in gate.iter().enumerate() {
                if !on {
                    pred.data_mut()[base + k] = bias[c];
                }
            }
        }
    }
}

impl<T: Real> Head<T> {
    /// Sparse inference of one level with a private ledger.
    pub fn infer_level(&self, level: usize, x: &Tensor4<T>, force: MaskOverride) -> Result<([BranchOutput<T>; 2], FlopLedger)> {
        ensure!(level < self.cfg.num_levels, "level {level} out of range");
        let d = x.dims();
        let (c, px) = (self.cfg.channels as u64, (d.b * d.plane()) as u64);
        let mut ledger = FlopLedger::new();
        let g = global_feature(x, &self.point, self.cfg.num_groups)?;
        ledger.record(Site::new(level, Branch::Shared, Slot::Global), px * c * c, 0);
        let mut run = |branch: Branch| -> Result<BranchOutput<T>> {
            let p = self.branch(branch);
            let mask = match force {
                Some(on) => HardMask::all(d, on),
                None => {
                    let s = mask_logits(x, &p.mask)?;
                    ledger.record(Site::new(level, branch, Slot::MaskNet), px * 9 * c, 0);
                    infer_mask(&s)
                }
            };
            let mut h = x.clone();
            let mut feats = Vec::with_capacity(STACKED_LAYERS);
            for (j, layer) in p.layers.iter().enumerate() {
                h = cesc_forward_sparse(&h, &mask, &g, layer, Mode::Infer, &mut ledger, Site::new(level, branch, Slot::Layer(j as u8)))?;
                feats.push(h.clone());
            }
            let mut pred = sparse_conv3x3(&h, &p.pred, &mask, &mut ledger, Site::new(level, branch, Slot::Pred))?;
            fill_inactive_bias(&mut pred, &mask, p.pred.bias_slice().expect("pred bias"));
            Ok(BranchOutput { pred, mask, sparse_feats: feats, dense_feats: Vec::new() })
        };
        let cls = run(Branch::Cls)?;
        let reg = run(Branch::Reg)?;
        Ok(([cls, reg], ledger))
    }

    pub fn forward_infer(&self, feats: &FpnFeatures<T>) -> Result<HeadOutputs<T>> {
        self.forward_infer_with(feats, None)
    }

    pub fn forward_infer_with(&self, feats: &FpnFeatures<T>, force: MaskOverride) -> Result<HeadOutputs<T>> {
        self.check_features(feats)?;
        let mut ledger = FlopLedger::new();
        let mut levels = Vec::with_capacity(feats.len());
        for (i, x) in feats.levels().iter().enumerate() {
            let (out, l) = self.infer_level(i, x, force)?;
            ledger.merge(&l);
            levels.push(out);
        }
        Ok(HeadOutputs { levels, ledger })
    }

    /// Dense evaluation of the same head (every pixel active, no mask
    /// networks): the reference for latency and dense-limit checks.
    pub fn dense_reference_level(&self, x: &Tensor4<T>) -> Result<[Tensor4<T>; 2]> {
        let g = global_feature(x, &self.point, self.cfg.num_groups)?;
        let run = |p: &BranchParams<T>| -> Result<Tensor4<T>> {
            let mut h = x.clone();
            for layer in &p.layers {
                h = dense_layer(&h, &g, layer, Mode::Infer)?;
            }
            conv2d(&h, &p.pred, 1, 1)
        };
        Ok([run(&self.cls)?, run(&self.reg)?])
    }

    pub fn dense_reference(&self, feats: &FpnFeatures<T>) -> Result<Vec<[Tensor4<T>; 2]>> {
        self.check_features(feats)?;
        feats.levels().iter().map(|x| self.dense_reference_level(x)).collect()
    }
}

/// Convolution MACs of the dense head (both branches, four layers and the
/// prediction convolution) on one level of `pixels = B·H·W`.
pub fn dense_level_macs(cfg: &HeadConfig, pixels: u64) -> u64 {
    let c = cfg.channels as u64;
    let per_branch = |out: u64| STACKED_LAYERS as u64 * 9 * c * c + 9 * c * out;
    pixels * (per_branch(cfg.num_classes as u64) + per_branch(REG_OUTPUTS as u64))
}

/// Mask networks plus the point-wise projection on one level.
pub fn overhead_level_macs(cfg: &HeadConfig, pixels: u64) -> u64 {
    let c = cfg.channels as u64;
    pixels * (c * c + 2 * 9 * c)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub det: f64,
    pub reg: f64,
    pub norm: f64,
    pub amm: f64,
    pub total: f64,
}

/// Activation ratios of one level's branch mask.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RatioRecord {
    pub hard: f64,
    pub soft: f64,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOptions {
    pub force: MaskOverride,
    /// Copy per-layer sparse and dense features into the outputs.
    pub keep_features: bool,
}

/// Batch statistics of one batch-norm layer from a training pass.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub branch: Branch,
    pub layer: usize,
    pub stats: Stats<T>,
}

/// A recorded training forward pass, ready for backward.
pub struct TrainStep<T: Real> {
    tape: Tape<T>,
    loss: Var,
    param_vars: Vec<Option<Var>>,
    pub losses: LossValues,
    pub ratios: Vec<[RatioRecord; 2]>,
    pub targets: Vec<f64>,
    pub outputs: HeadOutputs<T>,
    pub bn_updates: Vec<BnUpdate<T>>,
}

impl<T: Real> TrainStep<T> {
    /// Gradients aligned with [`Head::named_params`]; `None` for buffers.
    pub fn gradients(&self) -> Result<Vec<Option<Tensor4<T>>>> {
        let mut g: Gradients<T> = self.tape.backward(self.loss)?;
        Ok(self.param_vars.iter().map(|v| v.and_then(|v| g.take(v).or_else(|| Some(Tensor4::zeros(self.tape.dims(v)))))).collect())
    }
}

struct BranchVars {
    mask_w: Var,
    mask_b: Var,
    layers: Vec<LayerVars>,
    pred_w: Var,
    pred_b: Var,
}

struct HeadVars {
    point_w: Var,
    point_b: Var,
    branches: [BranchVars; 2],
}

impl<T: Real> Head<T> {
    fn register(&self, tape: &mut Tape<T>) -> (HeadVars, Vec<Option<Var>>) {
        let mut flat = Vec::new();
        let p = |tape: &mut Tape<T>, t: &Tensor4<T>, flat: &mut Vec<Option<Var>>| {
            let v = tape.param(t.clone());
            flat.push(Some(v));
            v
        };
        let point_w = p(tape, &self.point.weight, &mut flat);
        let point_b = p(tape, self.point.bias.as_ref().expect("point bias"), &mut flat);
        let branch = |bp: &BranchParams<T>, tape: &mut Tape<T>, flat: &mut Vec<Option<Var>>| {
            let mask_w = p(tape, &bp.mask.weight, flat);
            let mask_b = p(tape, bp.mask.bias.as_ref().expect("mask bias"), flat);
            let layers = bp
                .layers
                .iter()
                .map(|l| {
                    let lv = LayerVars { conv: p(tape, &l.conv.weight, flat), scale: p(tape, &l.scale, flat), shift: p(tape, &l.shift, flat) };
                    flat.push(None);
                    flat.push(None);
                    lv
                })
                .collect();
            let pred_w = p(tape, &bp.pred.weight, flat);
            let pred_b = p(tape, bp.pred.bias.as_ref().expect("pred bias"), flat);
            BranchVars { mask_w, mask_b, layers, pred_w, pred_b }
        };
        let cls = branch(&self.cls, tape, &mut flat);
        let reg = branch(&self.reg, tape, &mut flat);
        (HeadVars { point_w, point_b, branches: [cls, reg] }, flat)
    }

    /// Training forward pass with Gumbel masks drawn from `rng`.
    pub fn forward_train(&self, feats: &FpnFeatures<T>, labels: &[LevelLabels<T>], rng: &mut impl Rng, opts: TrainOptions) -> Result<TrainStep<T>> {
        self.check_features(feats)?;
        ensure!(labels.len() == self.cfg.num_levels, "{} label levels for {} feature levels", labels.len(), self.cfg.num_levels);
        let cfg = &self.cfg;
        let mut tape = Tape::new();
        let (vars, param_vars) = self.register(&mut tape);
        let targets = target_ratios(labels, cfg.ratio_mode)?;
        let inv_tau = T::lit(1.0 / cfg.tau);
        let mut cls_preds = Vec::new();
        let mut reg_preds = Vec::new();
        let mut soft_nodes = Vec::new();
        let mut norm_terms: Option<Var> = None;
        let mut ratios = Vec::new();
        let mut levels_out = Vec::new();
        let mut bn_updates = Vec::new();
        for (i, feat) in feats.levels().iter().enumerate() {
            let d = feat.dims();
            ensure!(labels[i].dims().spatial_eq(&d), "labels {} do not match level {i} features {d}", labels[i].dims());
            let x = tape.constant(feat.clone());
            let gv: GlobalVars = tape_global_feature(&mut tape, x, vars.point_w, Some(vars.point_b), cfg.num_groups)?;
            let mut level_soft = Vec::new();
            let mut level_ratios = [RatioRecord::default(); 2];
            let mut outs = Vec::new();
            for (bi, branch) in Branch::HEADS.into_iter().enumerate() {
                let bp = self.branch(branch);
                let bv = &vars.branches[bi];
                let (gate, hard_mask) = match opts.force {
                    Some(on) => {
                        let m = HardMask::all(d, on);
                        let gate = Gate { mask: tape.constant(m.to_tensor()), active: Rc::new(m.decisions().to_vec()) };
                        (gate, m)
                    }
                    None => {
                        let s = tape.conv(x, bv.mask_w, Some(bv.mask_b), 1)?;
                        let noise = GumbelNoise::sample(tape.dims(s), rng);
                        let z = tape.add_const(s, &noise.difference())?;
                        let z = tape.scale(z, inv_tau);
                        let soft = tape.sigmoid(z);
                        let hard = tape.straight_through(soft);
                        let decisions: Vec<bool> = tape.value(hard).data().iter().map(|&v| v > T::zero()).collect();
                        let m = HardMask::from_decisions(tape.dims(hard), decisions)?;
                        level_ratios[bi].soft = tape.value(soft).sum() / tape.value(soft).len() as f64;
                        level_soft.push(soft);
                        (Gate { mask: hard, active: Rc::new(m.decisions().to_vec()) }, m)
                    }
                };
                level_ratios[bi].hard = hard_mask.active_count() as f64 / hard_mask.decisions().len() as f64;
                let hconst = tape.constant(hard_mask.to_tensor());
                let per_active = T::lit(1.0 / hard_mask.active_count().max(1) as f64);
                let mut h = x;
                let mut dense_h = x;
                let mut sparse_feats = Vec::new();
                let mut dense_feats = Vec::new();
                for (j, layer) in bp.layers.iter().enumerate() {
                    let (next, bn) = tape_cesc_sparse(&mut tape, h, &gate, &gv, &bv.layers[j], layer)?;
                    if let Some(stats) = bn {
                        bn_updates.push(BnUpdate { branch, layer: j, stats });
                    }
                    h = next;
                    let teacher = tape_cesc_dense(&mut tape, dense_h, &gv, &bv.layers[j], layer)?;
                    dense_h = teacher;
                    let diff = tape.sub(teacher, h)?;
                    let masked = tape.mask_mul(diff, hconst)?;
                    let sq = tape.squared_norm(masked);
                    let sq = tape.scale(sq, per_active);
                    norm_terms = Some(match norm_terms {
                        None => sq,
                        Some(a) => tape.add(a, sq)?,
                    });
                    if opts.keep_features {
                        sparse_feats.push(tape.value(h).clone());
                        dense_feats.push(tape.value(dense_h).clone());
                    }
                }
                let p = tape.conv(h, bv.pred_w, None, 1)?;
                let p = tape.mask_mul(p, gate.mask)?;
                let p = tape.channel_affine(p, None, Some(bv.pred_b))?;
                match branch {
                    Branch::Cls => cls_preds.push(p),
                    _ => reg_preds.push(p),
                }
                outs.push(BranchOutput { pred: tape.value(p).clone(), mask: hard_mask, sparse_feats, dense_feats });
            }
            let reg_out = outs.pop().expect("reg");
            let cls_out = outs.pop().expect("cls");
            levels_out.push([cls_out, reg_out]);
            soft_nodes.push(level_soft);
            ratios.push(level_ratios);
        }
        let det = tape_det_loss(&mut tape, &cls_preds, labels)?;
        let reg = tape_reg_loss(&mut tape, &reg_preds, labels)?;
        let det_total = match reg {
            Some(r) => tape.add(det, r)?,
            None => det,
        };
        let norm_sum = norm_terms.expect("at least one layer");
        let norm = tape.scale(norm_sum, T::lit(1.0 / (STACKED_LAYERS * 2 * cfg.num_levels) as f64));
        let amm = if opts.force.is_some() {
            tape.constant(Tensor4::scalar(T::zero()))
        } else {
            tape_amm_loss(&mut tape, &soft_nodes, &targets)?
        };
        let total = tape_total_loss(&mut tape, det_total, norm, amm, cfg.loss)?;
        let losses = LossValues {
            det: tape.scalar(det),
            reg: reg.map_or(0.0, |r| tape.scalar(r)),
            norm: tape.scalar(norm),
            amm: tape.scalar(amm),
            total: tape.scalar(total),
        };
        Ok(TrainStep {
            tape,
            loss: total,
            param_vars,
            losses,
            ratios,
            targets,
            outputs: HeadOutputs { levels: levels_out, ledger: FlopLedger::new() },
            bn_updates,
        })
    }

    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<T>]) -> Result<()> {
        for u in updates {
            self.branch_mut(u.branch).layers[u.layer].update_running(&u.stats)?;
        }
        Ok(())
    }
}

/// Recomputes losses of a forward pass from its outputs with the pure
/// reference functions.
pub fn reference_losses<T: Real>(out: &HeadOutputs<T>, labels: &[LevelLabels<T>]) -> Result<(f64, f64)> {
    let cls: Vec<Tensor4<T>> = out.levels.iter().map(|l| l[0].pred.clone()).collect();
    let reg: Vec<Tensor4<T>> = out.levels.iter().map(|l| l[1].pred.clone()).collect();
    Ok((det_loss_surrogate(&cls, labels)?, reg_loss_surrogate(&reg, labels)?))
}

/// Stochastic gradient descent with classical momentum.
#[derive(Clone, Debug)]
pub struct Sgd<T = f32> {
    pub lr: f64,
    pub momentum: f64,
    /// Rescales the whole gradient when its global L2 norm exceeds this.
    pub clip_norm: Option<f64>,
    velocity: Vec<Option<Tensor4<T>>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Result<Self> {
        ensure!(lr > 0.0 && (0.0..1.0).contains(&momentum), "invalid optimizer settings lr={lr} momentum={momentum}");
        Ok(Sgd { lr, momentum, clip_norm: None, velocity: Vec::new() })
    }

    pub fn with_clip(mut self, clip_norm: Option<f64>) -> Result<Self> {
        if let Some(c) = clip_norm {
            ensure!(c > 0.0, "clip norm must be positive, got {c}");
        }
        self.clip_norm = clip_norm;
        Ok(self)
    }

    pub fn grad_norm(grads: &[Option<Tensor4<T>>]) -> f64 {
        grads.iter().flatten().flat_map(|g| g.data()).map(|v| v.f64().powi(2)).sum::<f64>().sqrt()
    }

    /// `v ← μ·v + g; p ← p − lr·v` for every parameter with a gradient.
    pub fn step(&mut self, head: &mut Head<T>, grads: &[Option<Tensor4<T>>]) -> Result<()> {
        let mut params = head.params_mut();
        ensure!(params.len() == grads.len(), "{} gradients for {} parameters", grads.len(), params.len());
        if self.velocity.is_empty() {
            self.velocity = vec![None; params.len()];
        }
        let norm = Self::grad_norm(grads);
        let shrink = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        let (mu, lr, shrink) = (T::lit(self.momentum), T::lit(self.lr), T::lit(shrink));
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            let Some(g) = g else { continue };
            ensure!(g.dims() == p.dims(), "gradient dims {} for parameter {}", g.dims(), p.dims());
            let vel = v.get_or_insert_with(|| Tensor4::zeros(g.dims()));
            for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(vel.data_mut().iter_mut()).zip(g.data()) {
                *vv = mu * *vv + shrink * gv;
                *pv = *pv - lr * *vv;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub config: HeadConfig,
    pub parameters: Vec<String>,
    pub seeds: Vec<u64>,
}

impl Head<f32> {
    /// Writes the `CEASC1` parameter file and its JSON manifest.
    pub fn save(&self, params_path: &Path, manifest_path: &Path, seeds: &[u64]) -> Result<()> {
        let named = self.named_params();
        let mut w = BufWriter::new(File::create(params_path)?);
        write_params(&mut w, &named)?;
        w.flush()?;
        let manifest = Manifest {
            format: "CEASC1".into(),
            config: self.cfg.clone(),
            parameters: named.iter().map(|(n, _)| n.clone()).collect(),
            seeds: seeds.to_vec(),
        };
        let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(manifest_path, json + "\n")?;
        Ok(())
    }

    pub fn load(params_path: &Path, manifest_path: &Path) -> Result<Self> {
        let manifest: Manifest =
            serde_json::from_str(&std::fs::read_to_string(manifest_path)?).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        let mut head = Head::<f32>::init(manifest.config)?;
        let stored = read_params(&mut BufReader::new(File::open(params_path)?))?;
        let names: Vec<String> = head.named_params().into_iter().map(|(n, _)| n).collect();
        ensure!(stored.len() == names.len(), "checkpoint holds {} tensors, head needs {}", stored.len(), names.len());
        for ((name, t), (want, slot)) in stored.into_iter().zip(names.iter().zip(head.params_mut())) {
            if &name != want {
                return Err(Error::Format(format!("parameter {name} where {want} was expected")));
            }
            if t.dims() != slot.dims() {
                return Err(Error::Format(format!("parameter {name} has dims {}, expected {}", t.dims(), slot.dims())));
            }
            *slot = t;
        }
        Ok(head)
    }
}
