//! Context-enhanced sparse convolution (CESC).
//!
//! One layer is `relu(norm(conv3x3(x)) + G)` at active pixels, where `G` is a
//! point-wise projection of the level's FPN feature and the default
//! normalizer (CE-GN) takes its group statistics from `G` instead of from the
//! sparsely computed activations. Inactive pixels carry `relu(G)`.
//!
//! Pure tensor functions serve inference and act as references for the tape
//! builders used in training.

use std::io::{Read, Write};
use std::rc::Rc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::ledger::{FlopLedger, Site};
use crate::mask::{sparse_conv3x3, HardMask};
use crate::norm::{channel_affine, compute_stats, group_stats, normalize_with, StatLayout, Stats, EPSILON};
use crate::ops::{conv2d, pointwise_conv, relu, ConvWeights, Kernel};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::{Dims, Tensor4};

pub const STACKED_LAYERS: usize = 4;
pub const BN_MOMENTUM: f64 = 0.1;
pub const CHECKPOINT_MAGIC: [u8; 7] = *b"CEASC1\0";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizerKind {
    #[default]
    CeGn,
    Gn,
    Bn,
    In,
    None,
}

/// What inactive pixels output.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InactiveFill {
    #[default]
    Global,
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CescLayer<T = f32> {
    /// 3×3, no bias; shared by the sparse and dense shadow paths.
    pub conv: ConvWeights<T>,
    pub scale: Tensor4<T>,
    pub shift: Tensor4<T>,
    pub num_groups: usize,
    pub kind: NormalizerKind,
    pub fill: InactiveFill,
    /// Batch-norm running averages, (1, C, 1, 1); untouched by other kinds.
    pub running_mean: Tensor4<T>,
    pub running_var: Tensor4<T>,
}

impl<T: Real> CescLayer<T> {
    pub fn new(conv: ConvWeights<T>, scale: Tensor4<T>, shift: Tensor4<T>, num_groups: usize, kind: NormalizerKind) -> Result<Self> {
        ensure!(conv.kernel_hw() == (3, 3), "CESC convolution must be 3x3");
        let c = conv.out_channels();
        let v = Dims::new(1, c, 1, 1);
        ensure!(scale.dims() == v && shift.dims() == v, "affine vectors must be (1,{c},1,1)");
        ensure!(num_groups > 0 && c % num_groups == 0, "{num_groups} groups do not divide {c} channels");
        Ok(CescLayer {
            conv,
            scale,
            shift,
            num_groups,
            kind,
            fill: InactiveFill::Global,
            running_mean: Tensor4::zeros(v),
            running_var: Tensor4::full(v, T::one()),
        })
    }

    /// Conv weights from N(0, std²); w = 1, b = 0.
    pub fn init(channels: usize, num_groups: usize, kind: NormalizerKind, std: f64, rng: &mut impl Rng) -> Result<Self> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::Contract(e.to_string()))?;
        let w = Tensor4::from_fn(Dims::new(channels, channels, 3, 3), |_, _, _, _| T::lit(normal.sample(rng)));
        Self::new(
            ConvWeights::new(w, None)?,
            Tensor4::full(Dims::new(1, channels, 1, 1), T::one()),
            Tensor4::zeros(Dims::new(1, channels, 1, 1)),
            num_groups,
            kind,
        )
    }

    pub fn with_fill(mut self, fill: InactiveFill) -> Self {
        self.fill = fill;
        self
    }

    pub fn channels(&self) -> usize {
        self.conv.out_channels()
    }

    /// Statistic partitioning for normalizers that compute their own stats.
    pub fn layout(&self) -> StatLayout {
        match self.kind {
            NormalizerKind::CeGn | NormalizerKind::Gn => StatLayout::group(self.num_groups),
            NormalizerKind::In => StatLayout::instance(self.channels()),
            NormalizerKind::Bn => StatLayout::batch(self.channels()),
            NormalizerKind::None => StatLayout::group(1),
        }
    }

    /// `running ← (1 − m)·running + m·batch` with momentum 0.1.
    pub fn update_running(&mut self, batch: &Stats<T>) -> Result<()> {
        ensure!(self.kind == NormalizerKind::Bn, "running statistics belong to batch norm layers");
        ensure!(batch.means.len() == self.channels(), "batch stats have {} channels", batch.means.len());
        let m = T::lit(BN_MOMENTUM);
        let keep = T::one() - m;
        let eps = T::lit(EPSILON);
        for c in 0..self.channels() {
            let var = batch.stds[c] * batch.stds[c] - eps;
            self.running_mean.data_mut()[c] = keep * self.running_mean.data()[c] + m * batch.means[c];
            self.running_var.data_mut()[c] = keep * self.running_var.data()[c] + m * var;
        }
        Ok(())
    }

    fn running_stats(&self) -> Stats<T> {
        let eps = T::lit(EPSILON);
        Stats {
            layout: self.layout(),
            means: self.running_mean.data().to_vec(),
            stds: self.running_var.data().iter().map(|&v| (v + eps).sqrt()).collect(),
            counts: vec![0; self.channels()],
        }
    }

    /// Named tensors in a fixed order; `params_mut` follows the same order.
    pub fn params(&self) -> Vec<(&'static str, &Tensor4<T>)> {
        vec![
            ("conv", &self.conv.weight),
            ("scale", &self.scale),
            ("shift", &self.shift),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor4<T>> {
        vec![&mut self.conv.weight, &mut self.scale, &mut self.shift, &mut self.running_mean, &mut self.running_var]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalFeature<T = f32> {
    pub g: Tensor4<T>,
    pub stats: Stats<T>,
}

impl<T: Real> GlobalFeature<T> {
    pub fn num_groups(&self) -> usize {
        self.stats.layout.groups
    }
}

/// `G = pointwise_conv(x, w_point)` with its group statistics.
pub fn global_feature<T: Real>(x: &Tensor4<T>, w_point: &ConvWeights<T>, num_groups: usize) -> Result<GlobalFeature<T>> {
    ensure!(w_point.kernel()? == Kernel::K1x1, "global feature projection must be 1x1");
    let g = pointwise_conv(x, w_point)?;
    let stats = group_stats(&g, num_groups)?;
    Ok(GlobalFeature { g, stats })
}

/// `w_c · (l − mean[G]) / std[G] + b_c` per (batch, group).
pub fn ce_gn<T: Real>(l: &Tensor4<T>, g: &GlobalFeature<T>, layer: &CescLayer<T>) -> Result<Tensor4<T>> {
    ensure!(l.dims() == g.g.dims(), "layer output {} does not match global feature {}", l.dims(), g.g.dims());
    ensure!(g.num_groups() == layer.num_groups, "global feature has {} groups, layer {}", g.num_groups(), layer.num_groups);
    let n = normalize_with(l, &g.stats)?;
    channel_affine(&n, layer.scale.data(), layer.shift.data())
}

/// Applies the layer's normalizer and affine. `stat_mask` restricts
/// self-computed statistics to active pixels.
fn normalize_layer<T: Real>(
    l: &Tensor4<T>,
    g: &GlobalFeature<T>,
    layer: &CescLayer<T>,
    stat_mask: Option<&[bool]>,
    mode: Mode,
) -> Result<Tensor4<T>> {
    let n = match (layer.kind, mode) {
        (NormalizerKind::CeGn, _) => return ce_gn(l, g, layer),
        (NormalizerKind::None, _) => l.clone(),
        (NormalizerKind::Bn, Mode::Infer) => normalize_with(l, &layer.running_stats())?,
        _ => normalize_with(l, &compute_stats(l, layer.layout(), stat_mask)?)?,
    };
    channel_affine(&n, layer.scale.data(), layer.shift.data())
}

fn add_relu<T: Real>(a: &Tensor4<T>, g: &Tensor4<T>) -> Result<Tensor4<T>> {
    a.zip_map(g, |p, q| {
        let s = p + q;
        if s > T::zero() { s } else { T::zero() }
    })
}

fn fill_value<T: Real>(g: &Tensor4<T>, fill: InactiveFill) -> Tensor4<T> {
    match fill {
        InactiveFill::Global => relu(g),
        InactiveFill::Zero => Tensor4::zeros(g.dims()),
    }
}

/// Sparse layer: `relu(norm(sparse_conv3x3(x)) + G)` at active pixels, the
/// fill value elsewhere.
pub fn cesc_forward_sparse<T: Real>(
    x: &Tensor4<T>,
    mask: &HardMask<T>,
    g: &GlobalFeature<T>,
    layer: &CescLayer<T>,
    mode: Mode,
    ledger: &mut FlopLedger,
    site: Site,
) -> Result<Tensor4<T>> {
    let l = sparse_conv3x3(x, &layer.conv, mask, ledger, site)?;
    let n = normalize_layer(&l, g, layer, Some(mask.decisions()), mode)?;
    let on = add_relu(&n, &g.g)?;
    let d = on.dims();
    ledger.record_elementwise((d.b * d.plane() * d.c) as u64);
    let mut out = fill_value(&g.g, layer.fill);
    let hw = d.plane();
    let gate = mask.decisions();
    for b in 0..d.b {
        for c in 0..d.c {
            let base = (b * d.c + c) * hw;
            for (k, &active) in gate[b * hw..(b + 1) * hw].iter().enumerate() {
                if active {
                    out.data_mut()[base + k] = on.data()[base + k];
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn dense_layer<T: Real>(x: &Tensor4<T>, g: &GlobalFeature<T>, layer: &CescLayer<T>, mode: Mode) -> Result<Tensor4<T>> {
    let l = conv2d(x, &layer.conv, 1, 1)?;
    let n = normalize_layer(&l, g, layer, None, mode)?;
    add_relu(&n, &g.g)
}

/// Dense shadow: the same layer evaluated at every pixel. Training only.
pub fn cesc_forward_dense<T: Real>(x_dense: &Tensor4<T>, g: &GlobalFeature<T>, layer: &CescLayer<T>, mode: Mode) -> Result<Tensor4<T>> {
    if mode == Mode::Infer {
        return Err(Error::Mode("the dense shadow path exists only in training".into()));
    }
    dense_layer(x_dense, g, layer, mode)
}

/// `Σ_e Σ_j ‖(dense − sparse) ⊙ H_e‖² / max(1, |H_e|) / (4·entries)`. Each
/// entry `e` is one (level, branch) stack; `sparse[e][j]` is layer `j` of
/// entry `e` and `masks[e]` its mask. Dividing by the active count keeps the
/// term independent of map area.
pub fn norm_loss<T: Real>(sparse: &[Vec<Tensor4<T>>], dense: &[Vec<Tensor4<T>>], masks: &[HardMask<T>]) -> Result<f64> {
    ensure!(
        sparse.len() == dense.len() && sparse.len() == masks.len() && !sparse.is_empty(),
        "norm loss lists misaligned: {} sparse, {} dense, {} masks",
        sparse.len(),
        dense.len(),
        masks.len()
    );
    let mut total = 0.0;
    for ((fs, cs), m) in sparse.iter().zip(dense).zip(masks) {
        let mut entry = 0.0;
        ensure!(fs.len() == cs.len(), "layer counts differ: {} vs {}", fs.len(), cs.len());
        for (f, c) in fs.iter().zip(cs) {
            ensure!(f.dims() == c.dims(), "feature dims {} vs {}", f.dims(), c.dims());
            ensure!(m.dims().spatial_eq(&f.dims()), "mask dims {} do not gate {}", m.dims(), f.dims());
            let d = f.dims();
            let hw = d.plane();
            for b in 0..d.b {
                for ch in 0..d.c {
                    for (k, (&fv, &cv)) in f.plane(b, ch).iter().zip(c.plane(b, ch)).enumerate() {
                        if m.decisions()[b * hw + k] {
                            entry += (cv.f64() - fv.f64()).powi(2);
                        }
                    }
                }
            }
        }
        total += entry / m.active_count().max(1) as f64;
    }
    Ok(total / (STACKED_LAYERS * sparse.len()) as f64)
}

/// Tape handles for a layer's trainable tensors.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub conv: Var,
    pub scale: Var,
    pub shift: Var,
}

/// Tape handles for one level's global feature.
#[derive(Clone, Copy, Debug)]
pub struct GlobalVars {
    pub g: Var,
    pub stats: Var,
    pub relu_g: Var,
}

/// A training mask: 0/1 straight-through node plus its decisions.
#[derive(Clone, Debug)]
pub struct Gate {
    pub mask: Var,
    pub active: Rc<Vec<bool>>,
}

pub fn tape_global_feature<T: Real>(tape: &mut Tape<T>, x: Var, w: Var, b: Option<Var>, num_groups: usize) -> Result<GlobalVars> {
    ensure!(tape.dims(w).h == 1 && tape.dims(w).w == 1, "global feature projection must be 1x1");
    let g = tape.conv(x, w, b, 0)?;
    let stats = tape.stats(g, StatLayout::group(num_groups), None)?;
    let relu_g = tape.relu(g);
    Ok(GlobalVars { g, stats, relu_g })
}

/// Normalizer plus affine on the tape. Returns batch statistics for batch
/// norm layers so the caller can update running averages.
fn tape_normalize<T: Real>(
    tape: &mut Tape<T>,
    l: Var,
    gv: &GlobalVars,
    vars: &LayerVars,
    layer: &CescLayer<T>,
    stat_mask: Option<Rc<Vec<bool>>>,
) -> Result<(Var, Option<Stats<T>>)> {
    let layout = layer.layout();
    let (n, batch) = match layer.kind {
        NormalizerKind::CeGn => (tape.normalize(l, gv.stats, layout)?, None),
        NormalizerKind::None => (l, None),
        kind => {
            let st = tape.stats(l, layout, stat_mask)?;
            let batch = (kind == NormalizerKind::Bn).then(|| {
                let (means, stds) = tape.stats_values(st);
                Stats { layout, means, stds, counts: Vec::new() }
            });
            (tape.normalize(l, st, layout)?, batch)
        }
    };
    Ok((tape.channel_affine(n, Some(vars.scale), Some(vars.shift))?, batch))
}

/// Training-time sparse layer. The convolution is evaluated densely so the
/// straight-through gradient sees what each inactive pixel would have output.
pub fn tape_cesc_sparse<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    gate: &Gate,
    gv: &GlobalVars,
    vars: &LayerVars,
    layer: &CescLayer<T>,
) -> Result<(Var, Option<Stats<T>>)> {
    let l = tape.conv(x, vars.conv, None, 1)?;
    let (n, batch) = tape_normalize(tape, l, gv, vars, layer, Some(gate.active.clone()))?;
    let s = tape.add(n, gv.g)?;
    let on = tape.relu(s);
    let off = match layer.fill {
        InactiveFill::Global => gv.relu_g,
        InactiveFill::Zero => {
            let d = tape.dims(gv.g);
            tape.constant(Tensor4::zeros(d))
        }
    };
    Ok((tape.select(gate.mask, on, off)?, batch))
}

/// Dense layer on the tape (every pixel active).
pub fn tape_cesc_dense<T: Real>(tape: &mut Tape<T>, x: Var, gv: &GlobalVars, vars: &LayerVars, layer: &CescLayer<T>) -> Result<Var> {
    let l = tape.conv(x, vars.conv, None, 1)?;
    let (n, _) = tape_normalize(tape, l, gv, vars, layer, None)?;
    let s = tape.add(n, gv.g)?;
    Ok(tape.relu(s))
}

/// Writes named f32 tensors in the `CEASC1` container.
pub fn write_params<W: Write>(out: &mut W, params: &[(String, &Tensor4<f32>)]) -> Result<()> {
    out.write_all(&CHECKPOINT_MAGIC)?;
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params {
        let bytes = name.as_bytes();
        ensure!(bytes.len() <= u16::MAX as usize, "parameter name too long: {name}");
        out.write_all(&(bytes.len() as u16).to_le_bytes())?;
        out.write_all(bytes)?;
        t.write_ct4(out)?;
    }
    Ok(())
}

pub fn read_params<R: Read>(input: &mut R) -> Result<Vec<(String, Tensor4<f32>)>> {
    let mut magic = [0u8; 7];
    input.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a CEASC1 checkpoint".into()));
    }
    let mut n = [0u8; 4];
    input.read_exact(&mut n)?;
    let count = u32::from_le_bytes(n) as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let mut len = [0u8; 2];
        input.read_exact(&mut len)?;
        let mut name = vec![0u8; u16::from_le_bytes(len) as usize];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Format(format!("parameter name: {e}")))?;
        out.push((name, Tensor4::read_ct4(input)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::mask::HardMask;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random<T: Real>(dims: Dims, seed: u64) -> Tensor4<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor4::from_fn(dims, |_, _, _, _| T::lit(rng.random_range(-1.0..1.0)))
    }

    fn random_mask<T: Real>(dims: Dims, p: f64, seed: u64) -> HardMask<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Dims::new(dims.b, 1, dims.h, dims.w);
        HardMask::from_decisions(m, (0..m.numel()).map(|_| rng.random_bool(p)).collect()).unwrap()
    }

    fn layer(c: usize, groups: usize, kind: NormalizerKind, seed: u64) -> CescLayer<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut l = CescLayer::init(c, groups, kind, 0.3, &mut rng).unwrap();
        l.scale = Tensor4::from_fn(Dims::new(1, c, 1, 1), |_, _, _, _| rng.random_range(0.5..1.5));
        l.shift = Tensor4::from_fn(Dims::new(1, c, 1, 1), |_, _, _, _| rng.random_range(-0.3..0.3));
        l
    }

    fn point(c: usize, seed: u64) -> ConvWeights<f32> {
        ConvWeights::new(random(Dims::new(c, c, 1, 1), seed), Some(random(Dims::new(1, c, 1, 1), seed + 1))).unwrap()
    }

    fn site() -> Site {
        Site::new(0, crate::ledger::Branch::Cls, crate::ledger::Slot::Layer(0))
    }

    /// Normalizes by caller-supplied per-(b, c) mean/std with explicit loops.
    fn external_norm(l: &Tensor4<f32>, mean: impl Fn(usize, usize) -> f64, std: impl Fn(usize, usize) -> f64, w: &[f32], b: &[f32]) -> Tensor4<f32> {
        let d = l.dims();
        Tensor4::from_fn(d, |bi, c, y, x| {
            (w[c] as f64 * (l.at(bi, c, y, x) as f64 - mean(bi, c)) / std(bi, c) + b[c] as f64) as f32
        })
    }

    /// Loop mean/var over the (b, c) pairs selected by `same`, restricted to `on` pixels.
    fn loop_stats(l: &Tensor4<f32>, same: impl Fn(usize, usize) -> bool, on: impl Fn(usize, usize, usize) -> bool) -> (f64, f64) {
        let d = l.dims();
        let mut vals = Vec::new();
        for b in 0..d.b {
            for c in 0..d.c {
                if same(b, c) {
                    for y in 0..d.h {
                        for x in 0..d.w {
                            if on(b, y, x) {
                                vals.push(l.at(b, c, y, x) as f64);
                            }
                        }
                    }
                }
            }
        }
        let n = vals.len().max(1) as f64;
        let m = vals.iter().sum::<f64>() / n;
        (m, (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n + EPSILON).sqrt())
    }

    #[test]
    fn global_feature_identity_and_bias() {
        let x = random::<f32>(Dims::new(2, 4, 3, 5), 1);
        let id = Tensor4::from_fn(Dims::new(4, 4, 1, 1), |o, i, _, _| (o == i) as u8 as f32);
        let g = global_feature(&x, &ConvWeights::new(id, None).unwrap(), 2).unwrap();
        assert_eq!(g.g, x);
        assert_eq!(g.stats, group_stats(&x, 2).unwrap());

        let bias = Tensor4::channel_vector(vec![1.0, 2.0, 3.0, 4.0]);
        let w = ConvWeights::new(Tensor4::zeros(Dims::new(4, 4, 1, 1)), Some(bias)).unwrap();
        let g = global_feature(&x, &w, 4).unwrap();
        assert_eq!(g.g.at(1, 2, 2, 4), 3.0);
        assert!(g.stats.stds.iter().all(|&s| (s as f64 - EPSILON.sqrt()).abs() < 1e-9));
    }

    #[test]
    fn global_feature_matches_loop_oracle() {
        let x = random::<f32>(Dims::new(1, 3, 4, 4), 2);
        let w = ConvWeights::new(random(Dims::new(5, 3, 1, 1), 3), Some(random(Dims::new(1, 5, 1, 1), 4))).unwrap();
        let g = global_feature(&x, &w, 1).unwrap();
        for o in 0..5 {
            for y in 0..4 {
                for xx in 0..4 {
                    let want: f32 = w.bias_slice().unwrap()[o] + (0..3).map(|i| w.weight.at(o, i, 0, 0) * x.at(0, i, y, xx)).sum::<f32>();
                    assert!((g.g.at(0, o, y, xx) - want).abs() < 1e-6);
                }
            }
        }
        let bad = ConvWeights::new(random::<f32>(Dims::new(5, 2, 1, 1), 5), None).unwrap();
        assert!(global_feature(&x, &bad, 1).is_err());
    }

    #[test]
    fn ce_gn_self_normalizes_when_l_is_g() {
        let x = random::<f32>(Dims::new(2, 8, 5, 5), 6);
        let id = Tensor4::from_fn(Dims::new(8, 8, 1, 1), |o, i, _, _| (o == i) as u8 as f32);
        let g = global_feature(&x, &ConvWeights::new(id, None).unwrap(), 4).unwrap();
        let lay = CescLayer::init(8, 4, NormalizerKind::CeGn, 0.01, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let out = ce_gn(&g.g, &g, &lay).unwrap();
        let s = group_stats(&out, 4).unwrap();
        assert!(s.means.iter().all(|m| m.abs() < 1e-5));
        assert!(s.stds.iter().all(|sd| (sd - 1.0).abs() < 1e-3));
    }

    #[test]
    fn ce_gn_constant_global_feature() {
        let dims = Dims::new(1, 2, 3, 3);
        let g = GlobalFeature { g: Tensor4::full(dims, 0.5f32), stats: group_stats(&Tensor4::full(dims, 0.5f32), 1).unwrap() };
        let mut lay = layer(2, 1, NormalizerKind::CeGn, 7);
        lay.scale = Tensor4::channel_vector(vec![2.0, 1.0]);
        lay.shift = Tensor4::channel_vector(vec![0.0, 1.0]);
        let l = random::<f32>(dims, 8);
        let out = ce_gn(&l, &g, &lay).unwrap();
        let sd = EPSILON.sqrt();
        let want = external_norm(&l, |_, _| 0.5, |_, _| sd, &[2.0, 1.0], &[0.0, 1.0]);
        let scale = want.data().iter().fold(1.0f64, |a, v| a.max(v.abs() as f64));
        assert!(out.max_abs_diff(&want).unwrap() < 1e-5 * scale);
    }

    #[test]
    fn ce_gn_matches_external_stats_oracle() {
        let dims = Dims::new(2, 6, 4, 5);
        let l = random::<f32>(dims, 9);
        let gt = random::<f32>(dims, 10).map(|v| 2.0 * v + 0.3);
        let g = GlobalFeature { stats: group_stats(&gt, 3).unwrap(), g: gt.clone() };
        let lay = layer(6, 3, NormalizerKind::CeGn, 11);
        let out = ce_gn(&l, &g, &lay).unwrap();
        let mean = |b, c| loop_stats(&gt, |bb, cc| bb == b && cc / 2 == c / 2, |_, _, _| true).0;
        let std = |b, c| loop_stats(&gt, |bb, cc| bb == b && cc / 2 == c / 2, |_, _, _| true).1;
        let want = external_norm(&l, mean, std, lay.scale.data(), lay.shift.data());
        assert!(out.max_abs_diff(&want).unwrap() < 1e-5);

        let wrong = layer(6, 2, NormalizerKind::CeGn, 11);
        assert!(ce_gn(&l, &g, &wrong).is_err());
    }

    fn setup(kind: NormalizerKind, seed: u64) -> (Tensor4<f32>, GlobalFeature<f32>, CescLayer<f32>) {
        let dims = Dims::new(2, 4, 6, 7);
        let x = random::<f32>(dims, seed);
        let g = global_feature(&x, &point(4, seed + 1), 2).unwrap();
        (x, g, layer(4, 2, kind, seed + 2))
    }

    #[test]
    fn sparse_limits() {
        for kind in [NormalizerKind::CeGn, NormalizerKind::Gn, NormalizerKind::In, NormalizerKind::Bn, NormalizerKind::None] {
            let (x, g, lay) = setup(kind, 20);
            let mut ledger = FlopLedger::new();
            let all = cesc_forward_sparse(&x, &HardMask::all(x.dims(), true), &g, &lay, Mode::Train, &mut ledger, site()).unwrap();
            let dense = cesc_forward_dense(&x, &g, &lay, Mode::Train).unwrap();
            assert_eq!(all.dims(), x.dims());
            assert!(all.max_abs_diff(&dense).unwrap() < 1e-5, "{kind:?}");
            let none = cesc_forward_sparse(&x, &HardMask::all(x.dims(), false), &g, &lay, Mode::Train, &mut ledger, site()).unwrap();
            assert_eq!(none, relu(&g.g));
        }
    }

    #[test]
    fn zero_fill_flag() {
        let (x, g, lay) = setup(NormalizerKind::CeGn, 25);
        let lay = lay.with_fill(InactiveFill::Zero);
        let out = cesc_forward_sparse(&x, &HardMask::all(x.dims(), false), &g, &lay, Mode::Infer, &mut FlopLedger::new(), site()).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn random_mask_matches_dense_oracle_and_fill() {
        let (x, g, lay) = setup(NormalizerKind::CeGn, 30);
        let m = random_mask(x.dims(), 0.3, 31);
        let out = cesc_forward_sparse(&x, &m, &g, &lay, Mode::Infer, &mut FlopLedger::new(), site()).unwrap();
        // composed oracle: dense conv, CE-GN by loops, residual, relu
        let conv = conv2d(&x, &lay.conv, 1, 1).unwrap();
        let mean = |b, c| loop_stats(&g.g, |bb, cc| bb == b && cc / 2 == c / 2, |_, _, _| true).0;
        let std = |b, c| loop_stats(&g.g, |bb, cc| bb == b && cc / 2 == c / 2, |_, _, _| true).1;
        let normed = external_norm(&conv, mean, std, lay.scale.data(), lay.shift.data());
        let d = x.dims();
        for b in 0..d.b {
            for c in 0..d.c {
                for y in 0..d.h {
                    for xx in 0..d.w {
                        let gv = g.g.at(b, c, y, xx);
                        let want = if m.is_active(b, y, xx) { (normed.at(b, c, y, xx) + gv).max(0.0) } else { gv.max(0.0) };
                        assert!((out.at(b, c, y, xx) - want).abs() < 1e-5);
                    }
                }
            }
        }
        let dense = cesc_forward_dense(&x, &g, &lay, Mode::Train).unwrap();
        for b in 0..d.b {
            for c in 0..d.c {
                for y in 0..d.h {
                    for xx in 0..d.w {
                        let want = (normed.at(b, c, y, xx) + g.g.at(b, c, y, xx)).max(0.0);
                        assert!((dense.at(b, c, y, xx) - want).abs() < 1e-5);
                    }
                }
            }
        }
    }

    #[test]
    fn ablation_normalizers_match_textbook() {
        let (x, g, _) = setup(NormalizerKind::Gn, 40);
        let m = random_mask::<f32>(x.dims(), 0.5, 41);
        let on = |b: usize, y: usize, xx: usize| m.is_active(b, y, xx);
        for kind in [NormalizerKind::Gn, NormalizerKind::In, NormalizerKind::Bn] {
            let lay = layer(4, 2, kind, 42);
            let conv = conv2d(&x, &lay.conv, 1, 1).unwrap();
            let same = |b: usize, c: usize| {
                move |bb: usize, cc: usize| match kind {
                    NormalizerKind::Gn => bb == b && cc / 2 == c / 2,
                    NormalizerKind::In => bb == b && cc == c,
                    _ => cc == c,
                }
            };
            let normed = external_norm(
                &conv,
                |b, c| loop_stats(&conv, same(b, c), on).0,
                |b, c| loop_stats(&conv, same(b, c), on).1,
                lay.scale.data(),
                lay.shift.data(),
            );
            let out = cesc_forward_sparse(&x, &m, &g, &lay, Mode::Train, &mut FlopLedger::new(), site()).unwrap();
            let d = x.dims();
            for b in 0..d.b {
                for c in 0..d.c {
                    for y in 0..d.h {
                        for xx in 0..d.w {
                            if m.is_active(b, y, xx) {
                                let want = (normed.at(b, c, y, xx) + g.g.at(b, c, y, xx)).max(0.0);
                                assert!((out.at(b, c, y, xx) - want).abs() < 1e-4, "{kind:?}");
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn batch_norm_running_update_and_inference() {
        let (x, g, mut lay) = setup(NormalizerKind::Bn, 50);
        let conv = conv2d(&x, &lay.conv, 1, 1).unwrap();
        let batch = compute_stats(&conv, lay.layout(), None).unwrap();
        lay.update_running(&batch).unwrap();
        let var0 = (batch.stds[0] as f64).powi(2) - EPSILON;
        assert!((lay.running_mean.data()[0] as f64 - 0.1 * batch.means[0] as f64).abs() < 1e-6);
        assert!((lay.running_var.data()[0] as f64 - (0.9 + 0.1 * var0)).abs() < 1e-5);
        let out = cesc_forward_sparse(&x, &HardMask::all(x.dims(), true), &g, &lay, Mode::Infer, &mut FlopLedger::new(), site()).unwrap();
        assert_eq!(out.dims(), x.dims());
        let mut gn = setup(NormalizerKind::Gn, 50).2;
        assert!(gn.update_running(&batch).is_err());
    }

    #[test]
    fn dense_path_rejects_inference_and_zero_weights() {
        let (x, g, mut lay) = setup(NormalizerKind::CeGn, 60);
        assert!(matches!(cesc_forward_dense(&x, &g, &lay, Mode::Infer), Err(Error::Mode(_))));
        lay.conv.weight = Tensor4::zeros(lay.conv.weight.dims());
        let out = cesc_forward_dense(&x, &g, &lay, Mode::Train).unwrap();
        let zero = ce_gn(&Tensor4::zeros(x.dims()), &g, &lay).unwrap();
        assert_eq!(out, add_relu(&zero, &g.g).unwrap());
    }

    #[test]
    fn norm_loss_examples() {
        let dims = Dims::new(1, 3, 2, 2);
        let f = random::<f32>(dims, 70);
        let all = HardMask::all(dims, true);
        assert_eq!(norm_loss(&[vec![f.clone()]], &[vec![f.clone()]], &[all.clone()]).unwrap(), 0.0);
        let c = random::<f32>(dims, 71);
        assert_eq!(norm_loss(&[vec![f.clone()]], &[vec![c.clone()]], &[HardMask::all(dims, false)]).unwrap(), 0.0);
        let mut one = vec![false; 4];
        one[3] = true;
        let m = HardMask::from_decisions(Dims::new(1, 1, 2, 2), one).unwrap();
        let want: f64 = (0..3).map(|ch| (c.at(0, ch, 1, 1) as f64 - f.at(0, ch, 1, 1) as f64).powi(2)).sum::<f64>() / 4.0;
        assert!((norm_loss(&[vec![f.clone()]], &[vec![c.clone()]], &[m]).unwrap() - want).abs() < 1e-12);
        assert!(norm_loss(&[vec![f.clone()]], &[], &[all]).is_err());
    }

    #[test]
    fn tape_layers_match_pure_functions() {
        for kind in [NormalizerKind::CeGn, NormalizerKind::Gn, NormalizerKind::In, NormalizerKind::Bn, NormalizerKind::None] {
            let (x, _, lay) = setup(kind, 80);
            let pw = point(4, 81);
            let g = global_feature(&x, &pw, 2).unwrap();
            let m = random_mask::<f32>(x.dims(), 0.4, 82);
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let wv = t.param(pw.weight.clone());
            let bv = t.param(pw.bias.clone().unwrap());
            let gv = tape_global_feature(&mut t, xv, wv, Some(bv), 2).unwrap();
            let vars = LayerVars { conv: t.param(lay.conv.weight.clone()), scale: t.param(lay.scale.clone()), shift: t.param(lay.shift.clone()) };
            let gate = Gate { mask: t.constant(m.to_tensor()), active: Rc::new(m.decisions().to_vec()) };
            let (sv, _) = tape_cesc_sparse(&mut t, xv, &gate, &gv, &vars, &lay).unwrap();
            let dv = tape_cesc_dense(&mut t, xv, &gv, &vars, &lay).unwrap();
            let sparse = cesc_forward_sparse(&x, &m, &g, &lay, Mode::Train, &mut FlopLedger::new(), site()).unwrap();
            let dense = cesc_forward_dense(&x, &g, &lay, Mode::Train).unwrap();
            assert!(t.value(sv).max_abs_diff(&sparse).unwrap() < 1e-5, "{kind:?}");
            assert!(t.value(dv).max_abs_diff(&dense).unwrap() < 1e-5, "{kind:?}");
        }
    }

    fn ce_gn_check<T: Real>(h: f64) -> f64 {
        let dims = Dims::new(2, 4, 3, 3);
        let l = random::<T>(dims, 90);
        let g = random::<T>(dims, 91).map(|v| v * T::lit(2.0));
        let w = Tensor4::channel_vector(vec![T::lit(1.2), T::lit(0.7), T::lit(-0.5), T::lit(1.0)]);
        let b = Tensor4::channel_vector(vec![T::lit(0.1), T::lit(-0.2), T::lit(0.0), T::lit(0.3)]);
        let probe = random::<T>(dims, 92);
        let report = grad_check(
            |t, v| {
                let st = t.stats(v[1], StatLayout::group(2), None)?;
                let n = t.normalize(v[0], st, StatLayout::group(2))?;
                let a = t.channel_affine(n, Some(v[2]), Some(v[3]))?;
                let p = t.constant(probe.clone());
                let y = t.mul(a, p)?;
                Ok(t.sum(y))
            },
            &[l, g, w, b],
            T::lit(h),
        )
        .unwrap();
        report.max_relative_error()
    }

    #[test]
    fn ce_gn_gradients() {
        let e64 = ce_gn_check::<f64>(1e-6);
        assert!(e64 < 1e-5, "{e64}");
        let e32 = ce_gn_check::<f32>(1e-2);
        assert!(e32 < 1e-2, "{e32}");
    }

    #[test]
    fn checkpoint_round_trip_and_magic() {
        let lay = layer(4, 2, NormalizerKind::CeGn, 100);
        let named: Vec<(String, &Tensor4<f32>)> = lay.params().into_iter().map(|(n, t)| (format!("layer0.{n}"), t)).collect();
        let mut buf = Vec::new();
        write_params(&mut buf, &named).unwrap();
        assert_eq!(&buf[..7], b"CEASC1\0");
        assert_eq!(u32::from_le_bytes(buf[7..11].try_into().unwrap()), 5);
        let back = read_params(&mut buf.as_slice()).unwrap();
        assert_eq!(back.len(), 5);
        for ((n0, t0), (n1, t1)) in named.iter().zip(&back) {
            assert_eq!(n0, n1);
            assert_eq!(*t0, t1);
        }
        buf[0] = b'X';
        assert!(matches!(read_params(&mut buf.as_slice()), Err(Error::Format(_))));
    }
}
