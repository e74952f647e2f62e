//! Synthetic detection scenes and the FPN features they induce.
//!
//! A scene is a set of labelled rectangles. Each level's feature map is a
//! fixed random projection of a rendered image, average-pooled to that
//! level's stride, plus Gaussian noise. The image has a background/class
//! one-hot in which only boxes assigned to the level carry their class, and
//! one occupancy channel covering every box. Objects of other scales are thus
//! visible at each level without looking like its positives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sparsehead_core::head::{assign_labels, box_level, FpnFeatures, GtBox, GtScene, HeadConfig};
use sparsehead_core::objective::LevelLabels;
use sparsehead_core::{Dims, Tensor4};

use crate::error::{invalid, Error, Result};

/// Whole-scene attempts before a spec is declared infeasible.
pub const MAX_ATTEMPTS: usize = 1000;
/// Box proposals per level inside one attempt.
const PROPOSALS_PER_LEVEL: usize = 400;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    /// Target positive fraction per level. A single entry applies to all levels.
    pub foreground: Vec<f64>,
    /// Accepted deviation of the realized fraction from the target.
    pub tolerance: f64,
    pub max_objects: usize,
    /// Smallest box side in pixels (the finest level is open below).
    pub min_side: f64,
    pub max_aspect: f64,
    pub noise_std: f64,
    /// Fixes the feature projection; scenes themselves come from the caller's rng.
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            width: 224,
            height: 192,
            foreground: vec![0.12],
            tolerance: 0.03,
            max_objects: 64,
            min_side: 8.0,
            max_aspect: 2.0,
            noise_std: 0.1,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self, levels: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.width == 0 || self.height == 0 {
            return bad("scene size must be positive".into());
        }
        if self.foreground.len() != 1 && self.foreground.len() != levels {
            return bad(format!("{} foreground fractions for {levels} levels", self.foreground.len()));
        }
        if let Some(f) = self.foreground.iter().find(|f| !(0.0..1.0).contains(*f)) {
            return bad(format!("foreground fraction {f} outside [0, 1)"));
        }
        if !(self.tolerance > 0.0) || !(self.min_side > 0.0) || !(self.max_aspect >= 1.0) || !(self.noise_std >= 0.0) {
            return bad("tolerance, min_side, max_aspect and noise_std must be positive (max_aspect >= 1)".into());
        }
        Ok(())
    }

    pub fn fraction(&self, level: usize) -> f64 {
        if self.foreground.len() == 1 {
            self.foreground[0]
        } else {
            self.foreground[level]
        }
    }
}

/// `[lo, hi)` range of `√area` for boxes of each level.
pub fn scale_ranges(strides: &[usize], min_side: f64) -> Vec<(f64, f64)> {
    strides
        .iter()
        .enumerate()
        .map(|(k, &s)| {
            let hi = 8.0 * s as f64;
            let lo = if k == 0 { min_side.min(hi) } else { 4.0 * s as f64 };
            (lo, hi)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Scene {
    pub gt: GtScene,
    pub feats: FpnFeatures<f32>,
    /// Realized positive fraction per level.
    pub fractions: Vec<f64>,
}

/// A labelled training batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub scenes: Vec<GtScene>,
    pub feats: FpnFeatures<f32>,
    pub labels: Vec<LevelLabels<f32>>,
}

#[derive(Clone, Debug)]
pub struct SceneGenerator {
    spec: SceneSpec,
    head: HeadConfig,
    ranges: Vec<(f64, f64)>,
    /// `channels × (classes + 2)`: background, the classes, then occupancy.
    projection: Vec<f32>,
}

impl SceneGenerator {
    pub fn new(spec: SceneSpec, head: &HeadConfig) -> Result<Self> {
        spec.validate(head.num_levels)?;
        head.validate()?;
        let cols = head.num_classes + 2;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
        let projection = (0..head.channels * cols).map(|_| normal.sample(&mut rng)).collect();
        let ranges = scale_ranges(&head.level_strides, spec.min_side);
        Ok(SceneGenerator { spec, head: head.clone(), ranges, projection })
    }

    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    /// Same projection and geometry rules on a different image size.
    pub fn resized(&self, width: usize, height: usize) -> Result<Self> {
        let spec = SceneSpec { width, height, ..self.spec.clone() };
        spec.validate(self.head.num_levels)?;
        Ok(SceneGenerator { spec, ..self.clone() })
    }

    pub fn level_cells(&self, level: usize) -> (usize, usize) {
        self.head.level_size(level, self.spec.height, self.spec.width)
    }

    /// Samples boxes until every level's positive fraction is within
    /// tolerance of its target.
    pub fn sample_boxes(&self, rng: &mut impl Rng) -> Result<Vec<GtBox>> {
        for _ in 0..MAX_ATTEMPTS {
            if let Some(boxes) = self.attempt(rng) {
                return Ok(boxes);
            }
        }
        Err(Error::Infeasible(format!(
            "no scene within ±{} of {:?} after {MAX_ATTEMPTS} attempts ({}x{} image, strides {:?})",
            self.spec.tolerance, self.spec.foreground, self.spec.width, self.spec.height, self.head.level_strides
        )))
    }

    fn attempt(&self, rng: &mut impl Rng) -> Option<Vec<GtBox>> {
        let (iw, ih) = (self.spec.width as f64, self.spec.height as f64);
        let tol = self.spec.tolerance;
        let mut boxes = Vec::new();
        for (level, &(lo, hi)) in self.ranges.iter().enumerate() {
            let target = self.spec.fraction(level);
            if target == 0.0 {
                continue;
            }
            let (h, w) = self.level_cells(level);
            let cells = (h * w) as f64;
            let s = self.head.level_strides[level] as f64;
            let mut covered = vec![false; h * w];
            let mut count = 0usize;
            for _ in 0..PROPOSALS_PER_LEVEL {
                if count as f64 >= (target - tol / 3.0) * cells {
                    break;
                }
                let size = rng.random_range(lo.ln()..hi.ln()).exp();
                let aspect = rng.random_range(-self.spec.max_aspect.ln()..=self.spec.max_aspect.ln()).exp();
                let (bw, bh) = (size * aspect.sqrt(), size / aspect.sqrt());
                if bw > iw || bh > ih {
                    continue;
                }
                let x0 = rng.random_range(0.0..=iw - bw);
                let y0 = rng.random_range(0.0..=ih - bh);
                let class = rng.random_range(1..=self.head.num_classes as u16);
                let b = GtBox { x0, y0, x1: x0 + bw, y1: y0 + bh, class };
                if box_level(&b, &self.head.level_strides) != level {
                    continue;
                }
                let fresh = cells_inside(&b, s, h, w).filter(|&k| !covered[k]).count();
                if (count + fresh) as f64 > (target + tol) * cells {
                    continue;
                }
                for k in cells_inside(&b, s, h, w) {
                    covered[k] = true;
                }
                count += fresh;
                boxes.push(b);
                if boxes.len() > self.spec.max_objects {
                    return None;
                }
            }
            if (count as f64 / cells - target).abs() > tol {
                return None;
            }
        }
        Some(boxes)
    }

    pub fn generate(&self, rng: &mut impl Rng) -> Result<Scene> {
        let boxes = self.sample_boxes(rng)?;
        let gt = GtScene::new(self.spec.width, self.spec.height, boxes)?;
        let feats = self.features(&gt, rng)?;
        let labels = assign_labels::<f32>(std::slice::from_ref(&gt), &self.head)?;
        let fractions = labels.iter().map(|l| l.pos() as f64 / l.numel() as f64).collect();
        Ok(Scene { gt, feats, fractions })
    }

    pub fn batch(&self, size: usize, rng: &mut impl Rng) -> Result<Batch> {
        if size == 0 {
            return Err(invalid!("batch size must be positive"));
        }
        let scenes: Vec<Scene> = (0..size).map(|_| self.generate(rng)).collect::<Result<_>>()?;
        let feats = FpnFeatures::stack(&scenes.iter().map(|s| s.feats.clone()).collect::<Vec<_>>())?;
        let gts: Vec<GtScene> = scenes.into_iter().map(|s| s.gt).collect();
        let labels = assign_labels(&gts, &self.head)?;
        Ok(Batch { scenes: gts, feats, labels })
    }

    /// Features of a given scene; only the noise is drawn from `rng`.
    pub fn features(&self, gt: &GtScene, rng: &mut impl Rng) -> Result<FpnFeatures<f32>> {
        let occupancy = render(gt, |_| true);
        let cols = self.head.num_classes + 2;
        let c = self.head.channels;
        let normal = Normal::new(0.0f32, self.spec.noise_std as f32).map_err(|e| invalid!("noise: {e}"))?;
        let mut levels = Vec::with_capacity(self.head.num_levels);
        for level in 0..self.head.num_levels {
            let s = self.head.level_strides[level];
            let (h, w) = self.level_cells(level);
            let class = render(gt, |b| box_level(b, &self.head.level_strides) == level);
            let pooled = pool(&class, &occupancy, gt.width, gt.height, s, cols, h, w);
            let mut data = vec![0f32; c * h * w];
            for ch in 0..c {
                let row = &self.projection[ch * cols..(ch + 1) * cols];
                for k in 0..h * w {
                    let v: f32 = row.iter().zip(&pooled[k * cols..(k + 1) * cols]).map(|(p, q)| p * q).sum();
                    data[ch * h * w + k] = v;
                }
            }
            for v in data.iter_mut() {
                *v += normal.sample(rng);
            }
            levels.push(Tensor4::from_vec(Dims::new(1, c, h, w), data)?);
        }
        Ok(FpnFeatures::new(levels)?)
    }
}

/// Level cells whose centers fall inside `b`.
fn cells_inside(b: &GtBox, s: f64, h: usize, w: usize) -> impl Iterator<Item = usize> + '_ {
    let span = |lo: f64, hi: f64, n: usize| {
        let first = ((lo / s - 0.5).ceil().max(0.0)) as usize;
        let last = ((hi / s - 0.5).ceil().max(0.0) as usize).min(n);
        first..last.max(first)
    };
    let (ys, xs) = (span(b.y0, b.y1, h), span(b.x0, b.x1, w));
    ys.flat_map(move |y| xs.clone().map(move |x| y * w + x))
}

/// Per-pixel class id over the boxes passing `keep`, the smallest box
/// winning on overlap.
fn render(gt: &GtScene, keep: impl Fn(&GtBox) -> bool) -> Vec<u16> {
    let (w, h) = (gt.width, gt.height);
    let mut class = vec![0u16; w * h];
    let mut best = vec![f64::INFINITY; w * h];
    for b in gt.boxes.iter().filter(|b| keep(b)) {
        let area = b.area();
        for k in cells_inside(b, 1.0, h, w) {
            if area < best[k] {
                best[k] = area;
                class[k] = b.class;
            }
        }
    }
    class
}

/// Average of the class one-hot and the any-box occupancy (last column) over
/// `s × s` cells; layout `[cell][column]`.
#[allow(clippy::too_many_arguments)]
fn pool(class: &[u16], any: &[u16], width: usize, height: usize, s: usize, cols: usize, h: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0f32; h * w * cols];
    let mut counts = vec![0u32; h * w];
    for py in 0..height {
        let y = py / s;
        for px in 0..width {
            let k = y * w + px / s;
            let i = py * width + px;
            out[k * cols + class[i] as usize] += 1.0;
            if any[i] > 0 {
                out[k * cols + cols - 1] += 1.0;
            }
            counts[k] += 1;
        }
    }
    for (k, &n) in counts.iter().enumerate() {
        for v in &mut out[k * cols..(k + 1) * cols] {
            *v /= n as f32;
        }
    }
    out
}
