//! How closely a masked CESC stack follows its dense evaluation under
//! different normalizers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sparsehead_core::cesc::{cesc_forward_dense, cesc_forward_sparse, global_feature, Mode, NormalizerKind};
use sparsehead_core::head::{assign_labels, Head, HeadConfig};
use sparsehead_core::ledger::{Branch, FlopLedger, Site, Slot};
use sparsehead_core::mask::HardMask;
use sparsehead_core::{Real, Tensor4};

use crate::error::Result;
use crate::scene::SceneGenerator;

#[derive(Clone, Debug)]
pub struct SimilarityTrial {
    pub seed: u64,
    pub mask_ratio: f64,
    /// Cosine similarity at active pixels, one entry per normalizer asked for.
    pub cosine: Vec<f64>,
}

/// Cosine similarity of `a` and `b` restricted to pixels where `mask` is on.
pub fn masked_cosine<T: Real>(a: &Tensor4<T>, b: &Tensor4<T>, mask: &HardMask<T>) -> f64 {
    let d = a.dims();
    let hw = d.plane();
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for bi in 0..d.b {
        let gate = &mask.decisions()[bi * hw..(bi + 1) * hw];
        for c in 0..d.c {
            for (k, (&x, &y)) in a.plane(bi, c).iter().zip(b.plane(bi, c)).enumerate() {
                if gate[k] {
                    let (x, y) = (x.f64(), y.f64());
                    ab += x * y;
                    aa += x * x;
                    bb += y * y;
                }
            }
        }
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// For each trial: a fresh scene, its level-0 foreground as the mask, and a
/// freshly initialized classification stack evaluated sparsely and densely
/// for every kind in `kinds`. Weights are identical across kinds.
pub fn normalizer_similarity(generator: &SceneGenerator, head: &HeadConfig, kinds: &[NormalizerKind], trials: usize, seed: u64) -> Result<Vec<SimilarityTrial>> {
    let mut out = Vec::with_capacity(trials);
    for t in 0..trials as u64 {
        let trial_seed = seed.wrapping_add(t);
        let scene = generator.generate(&mut ChaCha8Rng::seed_from_u64(trial_seed))?;
        let labels = assign_labels::<f32>(std::slice::from_ref(&scene.gt), head)?;
        let x = &scene.feats.levels()[0];
        let pos = labels[0].positive_mask();
        let mask = HardMask::from_decisions(pos.dims(), pos.data().iter().map(|&v| v > 0.0).collect())?;
        let mut cosine = Vec::with_capacity(kinds.len());
        for &kind in kinds {
            let h = Head::<f32>::init(HeadConfig { normalizer: kind, seed: trial_seed, ..head.clone() })?;
            let g = global_feature(x, &h.point, head.num_groups)?;
            let (mut sparse, mut dense) = (x.clone(), x.clone());
            let mut ledger = FlopLedger::new();
            for (j, layer) in h.cls.layers.iter().enumerate() {
                let site = Site::new(0, Branch::Cls, Slot::Layer(j as u8));
                sparse = cesc_forward_sparse(&sparse, &mask, &g, layer, Mode::Train, &mut ledger, site)?;
                dense = cesc_forward_dense(&dense, &g, layer, Mode::Train)?;
            }
            cosine.push(masked_cosine(&sparse, &dense, &mask));
        }
        let ratio = mask.active_count() as f64 / mask.decisions().len() as f64;
        out.push(SimilarityTrial { seed: trial_seed, mask_ratio: ratio, cosine });
    }
    Ok(out)
}

/// Mean cosine per kind over trials.
pub fn mean_cosine(trials: &[SimilarityTrial]) -> Vec<f64> {
    let n = trials.first().map_or(0, |t| t.cosine.len());
    (0..n).map(|k| trials.iter().map(|t| t.cosine[k]).sum::<f64>() / trials.len().max(1) as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use sparsehead_core::Dims;

    #[test]
    fn cosine_examples() {
        let d = Dims::new(1, 2, 1, 2);
        let a = Tensor4::<f64>::from_vec(d, vec![1.0, 5.0, 0.0, 7.0]).unwrap();
        let b = Tensor4::<f64>::from_vec(d, vec![2.0, -1.0, 0.0, 3.0]).unwrap();
        let m = HardMask::from_decisions(Dims::new(1, 1, 1, 2), vec![true, false]).unwrap();
        assert!((masked_cosine(&a, &b, &m) - 1.0).abs() < 1e-12);
        let m = HardMask::from_decisions(Dims::new(1, 1, 1, 2), vec![false, true]).unwrap();
        let want = (5.0 * -1.0 + 7.0 * 3.0) / ((25.0f64 + 49.0).sqrt() * (1.0f64 + 9.0).sqrt());
        assert!((masked_cosine(&a, &b, &m) - want).abs() < 1e-12);
        assert_eq!(masked_cosine(&a, &b, &HardMask::all(Dims::new(1, 1, 1, 2), false)), 0.0);
    }

    #[test]
    fn trials_are_well_formed() {
        let cfg = RunConfig::load(None, &["head.channels=16".into(), "head.num_groups=4".into()]).unwrap();
        let g = SceneGenerator::new(cfg.scene.clone(), &cfg.head_config()).unwrap();
        let t = normalizer_similarity(&g, &cfg.head_config(), &[NormalizerKind::CeGn, NormalizerKind::Gn], 2, 0).unwrap();
        assert_eq!(t.len(), 2);
        for trial in &t {
            assert!(trial.mask_ratio > 0.0);
            assert!(trial.cosine.iter().all(|c| (-1.0..=1.0 + 1e-9).contains(c)));
        }
    }
}
