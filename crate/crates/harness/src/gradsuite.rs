//! Finite-difference checks of every differentiable piece of the head, from
//! single operators up to the full training loss.

use std::fmt;
use std::rc::Rc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparsehead_core::cesc::{tape_cesc_dense, tape_cesc_sparse, tape_global_feature, CescLayer, Gate, LayerVars, NormalizerKind};
use sparsehead_core::gradcheck::grad_check;
use sparsehead_core::head::{assign_labels, FpnFeatures, GtBox, GtScene, Head, HeadConfig, TrainOptions};
use sparsehead_core::mask::{GumbelNoise, HardMask};
use sparsehead_core::norm::StatLayout;
use sparsehead_core::objective::{tape_amm_loss, tape_det_loss, LevelLabels};
use sparsehead_core::ops::ConvWeights;
use sparsehead_core::tape::{Tape, Var};
use sparsehead_core::{Dims, Real, Result as CoreResult, Tensor4};

use crate::error::Result;

/// Coordinates probed per parameter tensor in the end-to-end case.
const E2E_SAMPLES: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn tolerance(self) -> f64 {
        match self {
            Precision::F32 => 1e-2,
            Precision::F64 => 1e-5,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    /// Worst tensor-level relative error over the case's inputs.
    pub error: f64,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub precision: Precision,
    pub cases: Vec<CaseResult>,
}

impl SuiteReport {
    pub fn max_error(&self) -> f64 {
        self.cases.iter().map(|c| c.error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.error < self.precision.tolerance())
    }
}

pub const CASES: [&str; 8] = ["conv2d", "pointwise_conv", "ce_gn", "train_mask", "norm_loss", "amm_loss", "det_loss", "end_to_end"];

pub fn run(precision: Precision, seed: u64) -> Result<SuiteReport> {
    let cases = match precision {
        Precision::F32 => run_with::<f32>(seed)?,
        Precision::F64 => run_with::<f64>(seed)?,
    };
    Ok(SuiteReport { precision, cases })
}

/// Central-difference step. Differences are always taken in f64, whatever
/// precision the analytic gradient is computed in: 32-bit differences have
/// truncation and rounding errors of their own at the percent level, which
/// would swamp the quantity being measured.
const STEP: f64 = 1e-6;

fn run_with<T: Real>(seed: u64) -> Result<Vec<CaseResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let errors = [
        conv_case::<T>(3, &mut rng)?,
        conv_case::<T>(1, &mut rng)?,
        ce_gn_case::<T>(&mut rng)?,
        train_mask_case::<T>(&mut rng)?,
        norm_loss_case::<T>(&mut rng)?,
        amm_case::<T>(&mut rng)?,
        det_case::<T>(&mut rng)?,
        end_to_end_case::<T>(&mut rng)?,
    ];
    Ok(CASES.iter().zip(errors).map(|(&name, error)| CaseResult { name, error }).collect())
}

/// A scalar function of several tensors, written once for every precision.
trait Probe {
    fn eval<T: Real>(&self, t: &mut Tape<T>, v: &[Var]) -> CoreResult<Var>;
}

/// Worst tensor-level relative error of the `T` gradient of `p` at `inputs`
/// against f64 central differences.
fn check<T: Real>(p: &impl Probe, inputs: &[Tensor4<f64>]) -> Result<f64> {
    let reference = grad_check(|t, v| p.eval(t, v), inputs, STEP)?;
    let mut tape = Tape::<T>::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.cast())).collect();
    let loss = p.eval(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (v, r) in vars.iter().zip(&reference.params) {
        let analytic: Vec<f64> = match grads.get(*v) {
            Some(g) => g.data().iter().map(|x| x.f64()).collect(),
            None => vec![0.0; r.numeric.len()],
        };
        worst = worst.max(tensor_error(&analytic, &r.numeric));
    }
    Ok(worst)
}

/// `‖a − n‖ / max(1e-6, ‖a‖, ‖n‖)`.
fn tensor_error(a: &[f64], n: &[f64]) -> f64 {
    let diff = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / 1e-6f64.max(norm(a)).max(norm(n))
}

fn uniform(dims: Dims, scale: f64, rng: &mut impl Rng) -> Tensor4<f64> {
    Tensor4::from_fn(dims, |_, _, _, _| rng.random_range(-scale..scale))
}

/// `Σ y ⊙ probe`, a scalar whose gradient is `probe` with respect to `y`.
fn probe_sum<T: Real>(t: &mut Tape<T>, y: Var, probe: &Tensor4<f64>) -> CoreResult<Var> {
    let p = t.constant(probe.cast());
    let z = t.mul(y, p)?;
    Ok(t.sum(z))
}

struct Conv {
    k: usize,
    probe: Tensor4<f64>,
}

impl Probe for Conv {
    fn eval<T: Real>(&self, t: &mut Tape<T>, v: &[Var]) -> CoreResult<Var> {
        let y = t.conv(v[0], v[1], Some(v[2]), self.k / 2)?;
        probe_sum(t, y, &self.probe)
    }
}

fn conv_case<T: Real>(k: usize, rng: &mut impl Rng) -> Result<f64> {
    let x = uniform(Dims::new(2, 3, 5, 6), 1.0, rng);
    let w = uniform(Dims::new(4, 3, k, k), 0.5, rng);
    let b = uniform(Dims::new(1, 4, 1, 1), 0.5, rng);
    let probe = uniform(Dims::new(2, 4, 5, 6), 1.0, rng);
    check::<T>(&Conv { k, probe }, &[x, w, b])
}

struct CeGn {
    probe: Tensor4<f64>,
}

impl Probe for CeGn {
    fn eval<T: Real>(&self, t: &mut Tape<T>, v: &[Var]) -> CoreResult<Var> {
        let st = t.stats(v[1], StatLayout::group(2), None)?;
        let n = t.normalize(v[0], st, StatLayout::group(2))?;
        let a = t.channel_affine(n, Some(v[2]), Some(v[3]))?;
        probe_sum(t, a, &self.probe)
    }
}

fn ce_gn_case<T: Real>(rng: &mut impl Rng) -> Result<f64> {
    let dims = Dims::new(2, 4, 3, 3);
    let l = uniform(dims, 1.0, rng);
    let g = uniform(dims, 2.0, rng);
    let w = uniform(Dims::new(1, 4, 1, 1), 1.5, rng);
    let b = uniform(Dims::new(1, 4, 1, 1), 0.5, rng);
    let probe = uniform(dims, 1.0, rng);
    check::<T>(&CeGn { probe }, &[l, g, w, b])
}

/// The mask network followed by the Gumbel-sigmoid surrogate at τ = 0.7.
struct TrainMask {
    noise: Tensor4<f64>,
    probe: Tensor4<f64>,
}

impl Probe for TrainMask {
    fn eval<T: Real>(&self, t: &mut Tape<T>, v: &[Var]) -> CoreResult<Var> {
        let s = t.conv(v[0], v[1], Some(v[2]), 1)?;
        let z = t.add_const(s, &self.noise.cast())?;
        let z = t.scale(z, T::lit(1.0 / 0.7));
        let soft = t.sigmoid(z);
        probe_sum(t, soft, &self.probe)
    }
}

fn train_mask_case<T: Real>(rng: &mut impl Rng) -> Result<f64> {
    let x = uniform(Dims::new(2, 3, 5, 5), 1.0, rng);
    let w = uniform(Dims::new(1, 3, 3, 3), 0.5, rng);
    let b = uniform(Dims::new(1, 1, 1, 1), 0.5, rng);
    let noise = GumbelNoise::<f64>::sample(Dims::new(2, 1, 5, 5), rng).difference();
    let probe = uniform(Dims::new(2, 1, 5, 5), 1.0, rng);
    check::<T>(&TrainMask { noise, probe }, &[x, w, b])
}

/// Two stacked layers evaluated sparsely under a fixed mask and densely,
/// compared at active pixels.
struct NormLoss {
    mask_dims: Dims,
    decisions: Vec<bool>,
    layers: usize,
    groups: usize,
}

impl Probe for NormLoss {
    fn eval<T: Real>(&self, t: &mut Tape<T>, v: &[Var]) -> CoreResult<Var> {
        let mask = HardMask::<T>::from_decisions(self.mask_dims, self.decisions.clone())?;
        let active = T::lit(1.0 / mask.active_count() as f64);
        let gv = tape_global_feature(t, v[0], v[1], Some(v[2]), self.groups)?;
        let m = t.constant(mask.to_tensor());
        let gate = Gate { mask: m, active: Rc::new(self.decisions.clone()) };
        let (mut sparse, mut dense) = (v[0], v[0]);
        let mut acc = None;
        for j in 0..self.layers {
            let lv = LayerVars { conv: v[3 + 3 * j], scale: v[4 + 3 * j], shift: v[5 + 3 * j] };
            let layer = CescLayer::new(ConvWeights::new(t.value(lv.conv).clone(), None)?, t.value(lv.scale).clone(), t.value(lv.shift).clone(), self.groups, NormalizerKind::CeGn)?;
            sparse = tape_cesc_sparse(t, sparse, &gate, &gv, &lv, &layer)?.0;
            dense = tape_cesc_dense(t, dense, &gv, &lv, &layer)?;
            let d = t.sub(dense, sparse)?;
            let d = t.mask_mul(d, m)?;
            let sq = t.squared_norm(d);
            let sq = t.scale(sq, active);
            acc = Some(match acc {
                None => sq,
                Some(a) => t.add(a, sq)?,
            });
        }
        Ok(acc.expect("at least one layer"))
    }
}

fn norm_loss_case<T: Real>(rng: &mut impl Rng) -> Result<f64> {
    let (c, dims) = (4, Dims::new(1, 4, 5, 5));
    let x = uniform(dims, 1.0, rng);
    let point_w = uniform(Dims::new(c, c, 1, 1), 0.8, rng);
    let point_b = uniform(Dims::new(1, c, 1, 1), 0.3, rng);
    let mut params = vec![x, point_w, point_b];
    for _ in 0..2 {
        params.push(uniform(Dims::new(c, c, 3, 3), 0.3, rng));
        params.push(uniform(Dims::new(1, c, 1, 1), 1.5, rng));
        params.push(uniform(Dims::new(1, c, 1, 1), 0.3, rng));
    }
    let mut decisions: Vec<bool> = (0..dims.plane()).map(|_| rng.random_bool(0.5)).collect();
    decisions[0] = true;
    let case = NormLoss { mask_dims: Dims::new(1, 1, 5, 5), decisions, layers: 2, groups: 2 };
    check::<T>(&case, &params)
}

struct Amm {
    noise: Vec<Tensor4<f64>>,
}

impl Probe for Amm {
    fn eval<T: Real>(&self, t: &mut Tape<T>, v: &[Var]) -> CoreResult<Var> {
        let mut soft = Vec::new();
        for (s, n) in v.iter().zip(&self.noise) {
            let z = t.add_const(*s, &n.cast())?;
            soft.push(t.sigmoid(z));
        }
        tape_amm_loss(t, &[soft[..2].to_vec(), soft[2..].to_vec()], &[0.2, 0.35])
    }
}

fn amm_case<T: Real>(rng: &mut impl Rng) -> Result<f64> {
    let shapes = [Dims::new(2, 1, 6, 5), Dims::new(2, 1, 6, 5), Dims::new(2, 1, 3, 3), Dims::new(2, 1, 3, 3)];
    let logits: Vec<Tensor4<f64>> = shapes.iter().map(|&d| uniform(d, 2.0, rng)).collect();
    let noise = shapes.iter().map(|&d| GumbelNoise::<f64>::sample(d, rng).difference()).collect();
    check::<T>(&Amm { noise }, &logits)
}

struct Det {
    /// Label dims and class ids per level.
    labels: Vec<(Dims, Vec<u16>)>,
}

impl Probe for Det {
    fn eval<T: Real>(&self, t: &mut Tape<T>, v: &[Var]) -> CoreResult<Var> {
        let labels = self.labels.iter().map(|(d, c)| LevelLabels::<T>::new(*d, c.clone(), 3)).collect::<CoreResult<Vec<_>>>()?;
        tape_det_loss(t, v, &labels)
    }
}

fn det_case<T: Real>(rng: &mut impl Rng) -> Result<f64> {
    let dims = [Dims::new(2, 3, 4, 5), Dims::new(2, 3, 2, 3)];
    let logits: Vec<Tensor4<f64>> = dims.iter().map(|&d| uniform(d, 3.0, rng)).collect();
    let labels = dims
        .iter()
        .map(|d| {
            let classes = (0..d.b * d.plane()).map(|_| rng.random_range(0..=3u16)).collect();
            (Dims::new(d.b, 1, d.h, d.w), classes)
        })
        .collect();
    check::<T>(&Det { labels }, &logits)
}

/// The whole training loss of a small two-level head with all masks forced
/// on, differentiated with respect to every trainable tensor. Coordinates
/// are subsampled per tensor.
fn end_to_end_case<T: Real>(rng: &mut impl Rng) -> Result<f64> {
    let cfg = HeadConfig {
        num_levels: 2,
        channels: 8,
        num_classes: 2,
        level_strides: vec![8, 16],
        num_groups: 2,
        init_std: 0.1,
        seed: rng.random(),
        ..HeadConfig::default()
    };
    let (width, height) = (96, 80);
    let boxes = vec![
        GtBox { x0: 4.0, y0: 6.0, x1: 28.0, y1: 26.0, class: 1 },
        GtBox { x0: 20.0, y0: 8.0, x1: 92.0, y1: 78.0, class: 2 },
    ];
    let scenes = [GtScene::new(width, height, boxes)?];
    let levels: Vec<Tensor4<f64>> = (0..cfg.num_levels)
        .map(|i| {
            let (lh, lw) = cfg.level_size(i, height, width);
            uniform(Dims::new(1, cfg.channels, lh, lw), 1.0, rng)
        })
        .collect();
    let mut head = Head::<f64>::init(cfg.clone())?;
    let opts = TrainOptions { force: Some(true), keep_features: false };
    let mut noise = ChaCha8Rng::seed_from_u64(0);

    let head_t = head.cast::<T>();
    let feats_t = FpnFeatures::new(levels.iter().map(|x| x.cast::<T>()).collect())?;
    let grads = head_t.forward_train(&feats_t, &assign_labels::<T>(&scenes, &cfg)?, &mut noise, opts)?.gradients()?;

    let feats = FpnFeatures::new(levels)?;
    let labels = assign_labels::<f64>(&scenes, &cfg)?;
    let names: Vec<String> = head.named_params().into_iter().map(|(n, _)| n).collect();
    let mut worst: f64 = 0.0;
    for (pi, name) in names.iter().enumerate() {
        let Some(g) = grads[pi].as_ref().filter(|_| Head::<f64>::is_trainable(name)) else { continue };
        let len = g.len();
        let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
        for k in sample(rng, len, E2E_SAMPLES.min(len)) {
            let orig = head.params_mut()[pi].data()[k];
            let mut eval_at = |v: f64| -> Result<f64> {
                head.params_mut()[pi].data_mut()[k] = v;
                Ok(head.forward_train(&feats, &labels, &mut noise, opts)?.losses.total)
            };
            numeric.push((eval_at(orig + STEP)? - eval_at(orig - STEP)?) / (2.0 * STEP));
            head.params_mut()[pi].data_mut()[k] = orig;
            analytic.push(g.data()[k].f64());
        }
        worst = worst.max(tensor_error(&analytic, &numeric));
    }
    Ok(worst)
}
