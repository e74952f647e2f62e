//! Spatial execution masks and the sparse 3×3 convolution they drive.
//!
//! A mask network (one 3×3 conv to a single channel) produces logits `S`.
//! Training thresholds `σ((S + g1 − g2)/τ)` at ½ with two Gumbel samples;
//! inference keeps pixels with `S > 0`.

use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Result};
use crate::ledger::{FlopLedger, Site};
use crate::ops::{check_conv, conv_forward, conv_forward_at, sigmoid, ConvWeights, Kernel};
use crate::real::Real;
use crate::tensor::{Dims, Tensor4};

/// Pre-threshold mask logits, dims (B, 1, H, W).
#[derive(Clone, Debug, PartialEq)]
pub struct SoftMask<T = f32> {
    logits: Tensor4<T>,
}

impl<T: Real> SoftMask<T> {
    pub fn new(logits: Tensor4<T>) -> Result<Self> {
        ensure!(logits.dims().c == 1, "mask logits must have one channel, got {}", logits.dims());
        Ok(SoftMask { logits })
    }

    pub fn logits(&self) -> &Tensor4<T> {
        &self.logits
    }
}

/// Two independent Gumbel(0, 1) fields.
#[derive(Clone, Debug, PartialEq)]
pub struct GumbelNoise<T = f32> {
    pub g1: Tensor4<T>,
    pub g2: Tensor4<T>,
    pub seed: u64,
}

fn gumbel<T: Real>(dims: Dims, rng: &mut impl Rng) -> Tensor4<T> {
    Tensor4::from_fn(dims, |_, _, _, _| {
        let u: f64 = rng.sample(Open01);
        T::lit(-(-u.ln()).ln())
    })
}

impl<T: Real> GumbelNoise<T> {
    pub fn from_seed(dims: Dims, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g1 = gumbel(dims, &mut rng);
        let g2 = gumbel(dims, &mut rng);
        GumbelNoise { g1, g2, seed }
    }

    /// Draws a fresh seed from `rng`, so each forward pass gets new noise
    /// while the whole run stays reproducible.
    pub fn sample(dims: Dims, rng: &mut impl Rng) -> Self {
        Self::from_seed(dims, rng.random())
    }

    pub fn zeros(dims: Dims) -> Self {
        GumbelNoise { g1: Tensor4::zeros(dims), g2: Tensor4::zeros(dims), seed: 0 }
    }

    /// `g1 − g2`, a standard logistic sample per pixel.
    pub fn difference(&self) -> Tensor4<T> {
        self.g1.sub(&self.g2).expect("noise fields share dims")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ActiveSite {
    pub b: u32,
    pub y: u32,
    pub x: u32,
}

/// Binary per-pixel execution decision.
#[derive(Clone, Debug, PartialEq)]
pub struct HardMask<T = f32> {
    dims: Dims,
    decisions: Vec<bool>,
    active: Vec<ActiveSite>,
    soft_surrogate: Option<Tensor4<T>>,
}

impl<T: Real> HardMask<T> {
    /// `decisions` is indexed `(b·H + y)·W + x` for mask dims (B, 1, H, W).
    pub fn from_decisions(dims: Dims, decisions: Vec<bool>) -> Result<Self> {
        ensure!(dims.c == 1, "mask dims must have one channel, got {dims}");
        ensure!(decisions.len() == dims.numel(), "{} decisions for mask dims {dims}", decisions.len());
        let hw = dims.plane();
        let active = decisions
            .iter()
            .enumerate()
            .filter(|(_, &on)| on)
            .map(|(i, _)| ActiveSite { b: (i / hw) as u32, y: ((i % hw) / dims.w) as u32, x: (i % dims.w) as u32 })
            .collect();
        Ok(HardMask { dims, decisions, active, soft_surrogate: None })
    }

    pub fn all(dims: Dims, on: bool) -> Self {
        Self::from_decisions(Dims::new(dims.b, 1, dims.h, dims.w), vec![on; dims.b * dims.plane()])
            .expect("well-formed mask")
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn decisions(&self) -> &[bool] {
        &self.decisions
    }

    /// Active positions in lexicographic (b, y, x) order.
    pub fn active_set(&self) -> &[ActiveSite] {
        &self.active
    }

    pub fn is_active(&self, b: usize, y: usize, x: usize) -> bool {
        self.decisions[(b * self.dims.h + y) * self.dims.w + x]
    }

    pub fn soft_surrogate(&self) -> Option<&Tensor4<T>> {
        self.soft_surrogate.as_ref()
    }

    /// Flat `y·W + x` indices of active pixels, one list per batch element.
    pub fn active_per_batch(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.dims.b];
        for s in &self.active {
            out[s.b as usize].push(s.y as usize * self.dims.w + s.x as usize);
        }
        out
    }

    pub fn active_count(&self) -> usize {
        self.active.len()
    }

    /// 0.0 / 1.0 tensor with the mask dims.
    pub fn to_tensor(&self) -> Tensor4<T> {
        let data = self.decisions.iter().map(|&on| if on { T::one() } else { T::zero() }).collect();
        Tensor4::from_vec(self.dims, data).expect("mask dims")
    }

    fn check_gates(&self, x: Dims) -> Result<()> {
        ensure!(self.dims.spatial_eq(&x), "mask dims {} do not match feature dims {x}", self.dims);
        Ok(())
    }
}

/// `S = conv3x3(x, W_mask)` with a single output channel.
pub fn mask_logits<T: Real>(x: &Tensor4<T>, w_mask: &ConvWeights<T>) -> Result<SoftMask<T>> {
    ensure!(w_mask.out_channels() == 1, "mask network must have one output channel, got {}", w_mask.out_channels());
    ensure!(w_mask.kernel_hw() == (3, 3), "mask network must be 3x3");
    let k = check_conv(x.dims(), &w_mask.weight, 1, 1)?;
    SoftMask::new(conv_forward(x, &w_mask.weight, w_mask.bias_slice(), k))
}

/// Training branch: decision = `σ((S + g1 − g2)/τ) > ½`, keeping the sigmoid
/// as the straight-through surrogate.
pub fn train_mask<T: Real>(s: &SoftMask<T>, noise: &GumbelNoise<T>, tau: T) -> Result<HardMask<T>> {
    ensure!(tau > T::zero(), "temperature must be positive, got {tau}");
    let d = s.logits.dims();
    ensure!(noise.g1.dims() == d && noise.g2.dims() == d, "noise dims do not match logits {d}");
    let z = s.logits.add(&noise.difference())?.scale(T::one() / tau);
    let surrogate = sigmoid(&z);
    let half = T::lit(0.5);
    let decisions = surrogate.data().iter().map(|&p| p > half).collect();
    let mut mask = HardMask::from_decisions(d, decisions)?;
    mask.soft_surrogate = Some(surrogate);
    Ok(mask)
}

/// Inference branch: decision = `S > 0` (ties inactive).
pub fn infer_mask<T: Real>(s: &SoftMask<T>) -> HardMask<T> {
    let d = s.logits.dims();
    let decisions = s.logits.data().iter().map(|&v| v > T::zero()).collect();
    HardMask::from_decisions(d, decisions).expect("logit dims are mask dims")
}

/// 3×3 pad-1 convolution evaluated only at active pixels; inactive outputs
/// are zero. Records `|active|·9·C_in·C_out` executed MACs and the dense
/// equivalent against `site`.
pub fn sparse_conv3x3<T: Real>(
    x: &Tensor4<T>,
    w: &ConvWeights<T>,
    mask: &HardMask<T>,
    ledger: &mut FlopLedger,
    site: Site,
) -> Result<Tensor4<T>> {
    let k = check_conv(x.dims(), &w.weight, 1, 1)?;
    ensure!(k == Kernel::K3x3, "sparse convolution is 3x3 only");
    mask.check_gates(x.dims())?;
    let out = conv_forward_at(x, &w.weight, w.bias_slice(), k, &mask.active_per_batch());
    let per_pixel = (9 * w.in_channels() * w.out_channels()) as u64;
    let d = x.dims();
    ledger.record(site, mask.active_count() as u64 * per_pixel, (d.b * d.plane()) as u64 * per_pixel);
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActiveRatio {
    /// Hard count ratio `|active| / (B·H·W)`.
    pub hard: f64,
    /// Mean of the training surrogate, when present.
    pub soft: Option<f64>,
}

pub fn active_ratio<T: Real>(mask: &HardMask<T>) -> ActiveRatio {
    let n = mask.decisions.len();
    let hard = if n == 0 { 0.0 } else { mask.active.len() as f64 / n as f64 };
    let soft = mask.soft_surrogate.as_ref().map(|s| s.sum() / s.len().max(1) as f64);
    ActiveRatio { hard, soft }
}
