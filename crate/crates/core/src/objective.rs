//! Mask-ratio targets and the training losses.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::mask::{active_ratio, HardMask};
use crate::real::Real;
use crate::tape::{focal_value, Tape, Var};
use crate::tensor::{Dims, Tensor4};

pub const FOCAL_GAMMA: f64 = 2.0;
pub const FOCAL_ALPHA: f64 = 0.25;

/// Per-pixel class ids for one level, 0 = background.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelLabels<T = f32> {
    dims: Dims,
    classes: Rc<Vec<u16>>,
    num_classes: usize,
    /// Box-offset targets (B, 4, h, w), meaningful at positive pixels only.
    reg_targets: Option<Tensor4<T>>,
}

impl<T: Real> LevelLabels<T> {
    /// `classes[(b·h + y)·w + x]` for label dims (B, 1, h, w).
    pub fn new(dims: Dims, classes: Vec<u16>, num_classes: usize) -> Result<Self> {
        ensure!(dims.c == 1, "label dims must have one channel, got {dims}");
        ensure!(classes.len() == dims.numel(), "{} class ids for label dims {dims}", classes.len());
        ensure!(classes.iter().all(|&k| (k as usize) <= num_classes), "class id exceeds {num_classes}");
        Ok(LevelLabels { dims, classes: Rc::new(classes), num_classes, reg_targets: None })
    }

    pub fn background(dims: Dims, num_classes: usize) -> Self {
        Self::new(dims, vec![0; dims.numel()], num_classes).expect("background labels")
    }

    pub fn with_reg_targets(mut self, t: Tensor4<T>) -> Result<Self> {
        let d = t.dims();
        ensure!(d.c == 4 && d.spatial_eq(&self.dims), "regression targets {d} do not fit labels {}", self.dims);
        self.reg_targets = Some(t);
        Ok(self)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn classes(&self) -> &[u16] {
        &self.classes
    }

    pub fn shared_classes(&self) -> Rc<Vec<u16>> {
        self.classes.clone()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn reg_targets(&self) -> Option<&Tensor4<T>> {
        self.reg_targets.as_ref()
    }

    pub fn pos(&self) -> usize {
        self.classes.iter().filter(|&&k| k > 0).count()
    }

    pub fn numel(&self) -> usize {
        self.classes.len()
    }

    /// 0/1 positive indicator with the label dims.
    pub fn positive_mask(&self) -> Tensor4<T> {
        let data = self.classes.iter().map(|&k| if k > 0 { T::one() } else { T::zero() }).collect();
        Tensor4::from_vec(self.dims, data).expect("label dims")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1.0, beta: 10.0 }
    }
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let w = LossWeights { alpha, beta };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.alpha >= 0.0 && self.beta >= 0.0, "loss weights must be non-negative: {self:?}");
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RatioMode {
    #[default]
    AdaptiveLayerwise,
    AdaptiveGlobal,
    /// Mask ratio `r` (fraction skipped); the activation target is `1 − r`.
    Fixed(f64),
}

impl RatioMode {
    pub fn validate(&self) -> Result<()> {
        if let RatioMode::Fixed(r) = self {
            ensure!((0.0..=1.0).contains(r), "fixed mask ratio {r} outside [0, 1]");
        }
        Ok(())
    }
}

/// `Pos(C) / Numel(C)`.
pub fn target_ratio<T: Real>(labels: &LevelLabels<T>) -> f64 {
    if labels.numel() == 0 {
        0.0
    } else {
        labels.pos() as f64 / labels.numel() as f64
    }
}

/// Activation target per level under `mode`.
pub fn target_ratios<T: Real>(levels: &[LevelLabels<T>], mode: RatioMode) -> Result<Vec<f64>> {
    mode.validate()?;
    Ok(match mode {
        RatioMode::AdaptiveLayerwise => levels.iter().map(target_ratio).collect(),
        RatioMode::AdaptiveGlobal => {
            let pos: usize = levels.iter().map(|l| l.pos()).sum();
            let n: usize = levels.iter().map(|l| l.numel()).sum();
            let p = if n == 0 { 0.0 } else { pos as f64 / n as f64 };
            vec![p; levels.len()]
        }
        RatioMode::Fixed(r) => vec![1.0 - r; levels.len()],
    })
}

/// `(1/L) Σ_i mean_branch (ratio_ib − P_i)²`, with `masks[i]` holding the
/// branch masks of level `i`. Ratios use the soft surrogate when present.
pub fn amm_loss<T: Real>(masks: &[Vec<HardMask<T>>], targets: &[f64]) -> Result<f64> {
    ensure!(masks.len() == targets.len() && !masks.is_empty(), "{} mask levels for {} targets", masks.len(), targets.len());
    let mut total = 0.0;
    for (branches, &p) in masks.iter().zip(targets) {
        ensure!(!branches.is_empty(), "level without masks");
        let level: f64 = branches
            .iter()
            .map(|m| {
                let r = active_ratio(m);
                (r.soft.unwrap_or(r.hard) - p).powi(2)
            })
            .sum();
        total += level / branches.len() as f64;
    }
    Ok(total / masks.len() as f64)
}

/// Tape form of [`amm_loss`] over soft surrogate nodes.
pub fn tape_amm_loss<T: Real>(tape: &mut Tape<T>, soft: &[Vec<Var>], targets: &[f64]) -> Result<Var> {
    ensure!(soft.len() == targets.len() && !soft.is_empty(), "{} mask levels for {} targets", soft.len(), targets.len());
    let mut acc: Option<Var> = None;
    for (branches, &p) in soft.iter().zip(targets) {
        ensure!(!branches.is_empty(), "level without masks");
        let w = T::lit(1.0 / (branches.len() * soft.len()) as f64);
        for &s in branches {
            let m = tape.mean(s);
            let d = tape.add_scalar(m, -p);
            let sq = tape.square(d);
            let term = tape.scale(sq, w);
            acc = Some(match acc {
                None => term,
                Some(a) => tape.add(a, term)?,
            });
        }
    }
    acc.ok_or_else(|| Error::Contract("empty amm loss".into()))
}

fn check_cls<T: Real>(pred: Dims, labels: &LevelLabels<T>) -> Result<()> {
    ensure!(pred.c == labels.num_classes(), "classification output has {} channels, expected {}", pred.c, labels.num_classes());
    ensure!(pred.spatial_eq(&labels.dims()), "prediction {pred} does not match labels {}", labels.dims());
    Ok(())
}

/// Mean over levels of the per-pixel binary focal loss (summed over classes).
pub fn det_loss_surrogate<T: Real>(cls_pred: &[Tensor4<T>], labels: &[LevelLabels<T>]) -> Result<f64> {
    ensure!(cls_pred.len() == labels.len() && !labels.is_empty(), "{} predictions for {} label levels", cls_pred.len(), labels.len());
    let mut total = 0.0;
    for (z, lab) in cls_pred.iter().zip(labels) {
        check_cls(z.dims(), lab)?;
        let d = z.dims();
        let hw = d.plane();
        let mut level = 0.0;
        for b in 0..d.b {
            for c in 0..d.c {
                for (k, &v) in z.plane(b, c).iter().enumerate() {
                    let positive = lab.classes()[b * hw + k] as usize == c + 1;
                    level += focal_value(v.f64(), positive, FOCAL_GAMMA, FOCAL_ALPHA);
                }
            }
        }
        total += level / (d.b * hw).max(1) as f64;
    }
    Ok(total / labels.len() as f64)
}

pub fn tape_det_loss<T: Real>(tape: &mut Tape<T>, cls_pred: &[Var], labels: &[LevelLabels<T>]) -> Result<Var> {
    ensure!(cls_pred.len() == labels.len() && !labels.is_empty(), "{} predictions for {} label levels", cls_pred.len(), labels.len());
    let mut acc: Option<Var> = None;
    for (&z, lab) in cls_pred.iter().zip(labels) {
        check_cls(tape.dims(z), lab)?;
        let f = tape.focal_loss(z, lab.shared_classes(), T::lit(FOCAL_GAMMA), T::lit(FOCAL_ALPHA))?;
        acc = Some(match acc {
            None => f,
            Some(a) => tape.add(a, f)?,
        });
    }
    let sum = acc.expect("non-empty");
    Ok(tape.scale(sum, T::lit(1.0 / labels.len() as f64)))
}

/// Mean over levels of `Σ_pos ‖pred − target‖² / (4·max(1, Pos))` on the
/// regression branch output, i.e. a per-coordinate mean. Levels without targets contribute zero.
pub fn reg_loss_surrogate<T: Real>(reg_pred: &[Tensor4<T>], labels: &[LevelLabels<T>]) -> Result<f64> {
    ensure!(reg_pred.len() == labels.len() && !labels.is_empty(), "{} predictions for {} label levels", reg_pred.len(), labels.len());
    let mut total = 0.0;
    for (p, lab) in reg_pred.iter().zip(labels) {
        let Some(t) = lab.reg_targets() else { continue };
        ensure!(p.dims() == t.dims(), "regression output {} vs targets {}", p.dims(), t.dims());
        let d = p.dims();
        let hw = d.plane();
        let mut level = 0.0;
        for b in 0..d.b {
            for c in 0..4 {
                for (k, (&pv, &tv)) in p.plane(b, c).iter().zip(t.plane(b, c)).enumerate() {
                    if lab.classes()[b * hw + k] > 0 {
                        level += (pv.f64() - tv.f64()).powi(2);
                    }
                }
            }
        }
        total += level / (4 * lab.pos().max(1)) as f64;
    }
    Ok(total / labels.len() as f64)
}

pub fn tape_reg_loss<T: Real>(tape: &mut Tape<T>, reg_pred: &[Var], labels: &[LevelLabels<T>]) -> Result<Option<Var>> {
    ensure!(reg_pred.len() == labels.len() && !labels.is_empty(), "{} predictions for {} label levels", reg_pred.len(), labels.len());
    let mut acc: Option<Var> = None;
    for (&p, lab) in reg_pred.iter().zip(labels) {
        let Some(t) = lab.reg_targets() else { continue };
        ensure!(tape.dims(p) == t.dims(), "regression output {} vs targets {}", tape.dims(p), t.dims());
        let tv = tape.constant(t.clone());
        let diff = tape.sub(p, tv)?;
        let pos = tape.constant(lab.positive_mask());
        let masked = tape.mask_mul(diff, pos)?;
        let sq = tape.squared_norm(masked);
        let term = tape.scale(sq, T::lit(1.0 / (4 * lab.pos().max(1) * labels.len()) as f64));
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok(acc)
}

/// `det + α·norm + β·amm`.
pub fn total_loss(det: f64, norm: f64, amm: f64, w: LossWeights) -> f64 {
    det + w.alpha * norm + w.beta * amm
}

pub fn tape_total_loss<T: Real>(tape: &mut Tape<T>, det: Var, norm: Var, amm: Var, w: LossWeights) -> Result<Var> {
    let n = tape.scale(norm, T::lit(w.alpha));
    let a = tape.scale(amm, T::lit(w.beta));
    let s = tape.add(det, n)?;
    tape.add(s, a)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::mask::{train_mask, GumbelNoise, SoftMask};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(classes: Vec<u16>, w: usize) -> LevelLabels<f64> {
        let h = classes.len() / w;
        LevelLabels::new(Dims::new(1, 1, h, w), classes, 3).unwrap()
    }

    #[test]
    fn target_ratio_examples() {
        assert_eq!(target_ratio(&labels(vec![0; 100], 10)), 0.0);
        assert_eq!(target_ratio(&labels(vec![2; 100], 10)), 1.0);
        let mut c = vec![0u16; 100];
        c[..12].fill(1);
        assert!((target_ratio(&labels(c, 10)) - 0.12).abs() < 1e-15);
    }

    #[test]
    fn label_validation() {
        assert!(LevelLabels::<f32>::new(Dims::new(1, 1, 2, 2), vec![0, 4, 0, 0], 3).is_err());
        assert!(LevelLabels::<f32>::new(Dims::new(1, 1, 2, 2), vec![0, 0, 0], 3).is_err());
    }

    #[test]
    fn ratio_modes() {
        let a = labels([vec![1u16; 10], vec![0; 90]].concat(), 10);
        let b = labels([vec![1u16; 50], vec![0; 50]].concat(), 10);
        let lv = [a, b];
        assert_eq!(target_ratios(&lv, RatioMode::AdaptiveLayerwise).unwrap(), vec![0.1, 0.5]);
        assert_eq!(target_ratios(&lv, RatioMode::AdaptiveGlobal).unwrap(), vec![0.3, 0.3]);
        let f = target_ratios(&lv, RatioMode::Fixed(0.9)).unwrap();
        assert!(f.iter().all(|v| (v - 0.1).abs() < 1e-12));
        assert!(target_ratios(&lv, RatioMode::Fixed(1.5)).is_err());
    }

    fn const_mask(ratio_on: usize) -> HardMask<f64> {
        let d = Dims::new(1, 1, 10, 10);
        HardMask::from_decisions(d, (0..100).map(|i| i < ratio_on).collect()).unwrap()
    }

    #[test]
    fn amm_examples() {
        assert_eq!(amm_loss(&[vec![const_mask(12)], vec![const_mask(40)]], &[0.12, 0.4]).unwrap(), 0.0);
        assert!((amm_loss(&[vec![const_mask(50)]], &[0.12]).unwrap() - 0.1444).abs() < 1e-12);
        assert!(amm_loss(&[vec![const_mask(50)]], &[0.12, 0.3]).is_err());
    }

    #[test]
    fn amm_random_matches_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let levels = 3;
        let mut masks = Vec::new();
        let mut ratios = Vec::new();
        for _ in 0..levels {
            let mut br = Vec::new();
            let mut rr = Vec::new();
            for _ in 0..2 {
                let s = SoftMask::new(Tensor4::from_fn(Dims::new(1, 1, 6, 6), |_, _, _, _| rng.random_range(-2.0..2.0))).unwrap();
                let m = train_mask(&s, &GumbelNoise::from_seed(s.logits().dims(), rng.random()), 1.0).unwrap();
                rr.push(m.soft_surrogate().unwrap().data().iter().sum::<f64>() / 36.0);
                br.push(m);
            }
            masks.push(br);
            ratios.push(rr);
        }
        let targets: Vec<f64> = (0..levels).map(|_| rng.random_range(0.0..1.0)).collect();
        let direct: f64 = ratios.iter().zip(&targets).map(|(r, p)| ((r[0] - p).powi(2) + (r[1] - p).powi(2)) / 2.0).sum::<f64>() / 3.0;
        assert!((amm_loss(&masks, &targets).unwrap() - direct).abs() < 1e-6);
    }

    #[test]
    fn focal_surrogate_examples() {
        let lab = LevelLabels::<f64>::background(Dims::new(1, 1, 4, 4), 1);
        let zero = Tensor4::zeros(Dims::new(1, 1, 4, 4));
        let l = det_loss_surrogate(&[zero], std::slice::from_ref(&lab)).unwrap();
        assert!((l - 0.75 * 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
        assert!((l - 0.1300).abs() < 1e-4);

        let mut c = vec![0u16; 16];
        c[5] = 2;
        let lab = LevelLabels::<f64>::new(Dims::new(1, 1, 4, 4), c.clone(), 2).unwrap();
        let z = Tensor4::from_fn(Dims::new(1, 2, 4, 4), |_, ch, y, x| if c[y * 4 + x] as usize == ch + 1 { 10.0 } else { -10.0 });
        assert!(det_loss_surrogate(&[z], std::slice::from_ref(&lab)).unwrap() < 1e-3);
        assert!(det_loss_surrogate(&[Tensor4::zeros(Dims::new(1, 3, 4, 4))], &[lab]).is_err());
    }

    #[test]
    fn total_loss_examples_and_affinity() {
        assert_eq!(total_loss(0.5, 0.2, 0.01, LossWeights::new(0.0, 0.0).unwrap()), 0.5);
        assert!((total_loss(0.5, 0.2, 0.01, LossWeights::default()) - 0.8).abs() < 1e-12);
        assert_eq!(LossWeights::default(), LossWeights { alpha: 1.0, beta: 10.0 });
        assert!(LossWeights::new(-1.0, 0.0).is_err());
        let w = LossWeights::new(0.7, 3.0).unwrap();
        let base = total_loss(1.0, 2.0, 3.0, w);
        assert!((total_loss(2.0, 2.0, 3.0, w) - base - 1.0).abs() < 1e-12);
        assert!((total_loss(1.0, 3.0, 3.0, w) - base - 0.7).abs() < 1e-12);
        assert!((total_loss(1.0, 2.0, 4.0, w) - base - 3.0).abs() < 1e-12);
    }

    #[test]
    fn tape_losses_match_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = Dims::new(2, 3, 4, 5);
        let z = Tensor4::<f64>::from_fn(d, |_, _, _, _| rng.random_range(-3.0..3.0));
        let cls: Vec<u16> = (0..40).map(|_| rng.random_range(0..4)).collect();
        let tg = Tensor4::<f64>::from_fn(Dims::new(2, 4, 4, 5), |_, _, _, _| rng.random_range(0.0..1.0));
        let lab = LevelLabels::new(Dims::new(2, 1, 4, 5), cls, 3).unwrap().with_reg_targets(tg).unwrap();
        let rp = Tensor4::<f64>::from_fn(Dims::new(2, 4, 4, 5), |_, _, _, _| rng.random_range(0.0..1.0));
        let mut t = Tape::new();
        let zv = t.param(z.clone());
        let rv = t.param(rp.clone());
        let det = tape_det_loss(&mut t, &[zv], std::slice::from_ref(&lab)).unwrap();
        let reg = tape_reg_loss(&mut t, &[rv], std::slice::from_ref(&lab)).unwrap().unwrap();
        assert!((t.scalar(det) - det_loss_surrogate(&[z], std::slice::from_ref(&lab)).unwrap()).abs() < 1e-12);
        assert!((t.scalar(reg) - reg_loss_surrogate(&[rp], &[lab]).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = Dims::new(1, 2, 4, 4);
        let z = Tensor4::<f64>::from_fn(d, |_, _, _, _| rng.random_range(-3.0..3.0));
        let cls: Vec<u16> = (0..16).map(|_| rng.random_range(0..3)).collect();
        let lab = LevelLabels::new(Dims::new(1, 1, 4, 4), cls, 2).unwrap();
        let r = grad_check(|t, v| tape_det_loss(t, &[v[0]], std::slice::from_ref(&lab)), &[z.clone()], 1e-6).unwrap();
        assert!(r.max_relative_error() < 1e-5, "{}", r.max_relative_error());
        let z32 = z.cast::<f32>();
        let lab32 = LevelLabels::<f32>::new(Dims::new(1, 1, 4, 4), lab.classes().to_vec(), 2).unwrap();
        let r = grad_check(|t, v| tape_det_loss(t, &[v[0]], std::slice::from_ref(&lab32)), &[z32], 1e-2).unwrap();
        assert!(r.max_relative_error() < 1e-2, "{}", r.max_relative_error());

        // amm through the surrogate: gradient w.r.t. mask logits
        let s = Tensor4::<f64>::from_fn(Dims::new(1, 1, 5, 5), |_, _, _, _| rng.random_range(-2.0..2.0));
        let noise = GumbelNoise::<f64>::from_seed(s.dims(), 7).difference();
        let r = grad_check(
            |t, v| {
                let z = t.add_const(v[0], &noise)?;
                let z = t.scale(z, 1.0 / 0.8);
                let soft = t.sigmoid(z);
                tape_amm_loss(t, &[vec![soft]], &[0.2])
            },
            &[s],
            1e-6,
        )
        .unwrap();
        assert!(r.max_relative_error() < 1e-5, "{}", r.max_relative_error());
    }

    proptest! {
        #[test]
        fn target_ratio_permutation_invariant_and_monotone(seed in any::<u64>(), extra in 0usize..10) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut c: Vec<u16> = (0..60).map(|_| if rng.random_bool(0.3) { 1 } else { 0 }).collect();
            let base = target_ratio(&labels(c.clone(), 6));
            let mut shuffled = c.clone();
            for i in (1..shuffled.len()).rev() {
                shuffled.swap(i, rng.random_range(0..=i));
            }
            prop_assert_eq!(base, target_ratio(&labels(shuffled, 6)));
            let mut added = 0;
            for v in c.iter_mut() {
                if *v == 0 && added < extra {
                    *v = 2;
                    added += 1;
                }
            }
            prop_assert!(target_ratio(&labels(c, 6)) >= base);
        }

        #[test]
        fn amm_zero_iff_matched(k in 0usize..=100, p in 0.0f64..1.0) {
            let l = amm_loss(&[vec![const_mask(k)]], &[k as f64 / 100.0]).unwrap();
            prop_assert!(l.abs() < 1e-20);
            let off = amm_loss(&[vec![const_mask(k)]], &[p]).unwrap();
            prop_assert_eq!(off == 0.0, (k as f64 / 100.0 - p).abs() == 0.0);
        }
    }
}
