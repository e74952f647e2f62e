//! Partitioned mean/std statistics shared by every normalizer variant.
//!
//! Group, instance and batch normalization differ only in how (sample,
//! channel) pairs are bucketed into statistic partitions, so one layout type
//! covers all of them.

use crate::error::{ensure, Result};
use crate::real::Real;
use crate::tensor::{Dims, Tensor4};

/// Variance guard added before the square root.
pub const EPSILON: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StatLayout {
    pub groups: usize,
    /// Separate statistics per batch element (group/instance norm) or pooled
    /// across the batch (batch norm).
    pub per_sample: bool,
}

impl StatLayout {
    pub fn group(groups: usize) -> Self {
        StatLayout { groups, per_sample: true }
    }

    pub fn instance(channels: usize) -> Self {
        StatLayout { groups: channels, per_sample: true }
    }

    pub fn batch(channels: usize) -> Self {
        StatLayout { groups: channels, per_sample: false }
    }

    pub fn check(&self, dims: Dims) -> Result<()> {
        ensure!(self.groups > 0, "group count must be positive");
        ensure!(
            dims.c % self.groups == 0,
            "{} channels are not divisible into {} groups",
            dims.c,
            self.groups
        );
        Ok(())
    }

    pub fn partitions(&self, batch: usize) -> usize {
        if self.per_sample {
            batch * self.groups
        } else {
            self.groups
        }
    }

    #[inline]
    pub fn partition(&self, channels: usize, b: usize, c: usize) -> usize {
        let g = c / (channels / self.groups);
        if self.per_sample {
            b * self.groups + g
        } else {
            g
        }
    }
}

/// Per-partition mean and epsilon-guarded standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct Stats<T = f32> {
    pub layout: StatLayout,
    pub means: Vec<T>,
    pub stds: Vec<T>,
    /// Number of elements that entered each partition.
    pub counts: Vec<usize>,
}

/// Mean/std per partition, optionally restricted to pixels where
/// `mask[(b·H + y)·W + x]` is set. Empty partitions get mean 0, std √ε.
pub fn compute_stats<T: Real>(x: &Tensor4<T>, layout: StatLayout, mask: Option<&[bool]>) -> Result<Stats<T>> {
    let d = x.dims();
    layout.check(d)?;
    if let Some(m) = mask {
        ensure!(m.len() == d.b * d.plane(), "stat mask has {} entries, expected {}", m.len(), d.b * d.plane());
    }
    let parts = layout.partitions(d.b);
    let hw = d.plane();
    let mut sum = vec![0.0f64; parts];
    let mut count = vec![0usize; parts];
    for b in 0..d.b {
        let m = mask.map(|m| &m[b * hw..(b + 1) * hw]);
        for c in 0..d.c {
            let p = layout.partition(d.c, b, c);
            let plane = x.plane(b, c);
            match m {
                None => {
                    sum[p] += plane.iter().map(|v| v.f64()).sum::<f64>();
                    count[p] += hw;
                }
                Some(m) => {
                    for (v, &on) in plane.iter().zip(m) {
                        if on {
                            sum[p] += v.f64();
                            count[p] += 1;
                        }
                    }
                }
            }
        }
    }
    let mean: Vec<f64> = sum.iter().zip(&count).map(|(&s, &n)| if n == 0 { 0.0 } else { s / n as f64 }).collect();
    let mut sq = vec![0.0f64; parts];
    for b in 0..d.b {
        let m = mask.map(|m| &m[b * hw..(b + 1) * hw]);
        for c in 0..d.c {
            let p = layout.partition(d.c, b, c);
            let mu = mean[p];
            let plane = x.plane(b, c);
            sq[p] += match m {
                None => plane.iter().map(|v| (v.f64() - mu).powi(2)).sum::<f64>(),
                Some(m) => plane.iter().zip(m).filter(|(_, &on)| on).map(|(v, _)| (v.f64() - mu).powi(2)).sum(),
            };
        }
    }
    let stds = sq
        .iter()
        .zip(&count)
        .map(|(&s, &n)| {
            let var = if n == 0 { 0.0 } else { s / n as f64 };
            T::lit((var + EPSILON).sqrt())
        })
        .collect();
    Ok(Stats { layout, means: mean.into_iter().map(T::lit).collect(), stds, counts: count })
}

/// Per (batch, group) statistics over the group's channels and all pixels,
/// indexed `b·groups + g`.
pub fn group_stats<T: Real>(x: &Tensor4<T>, num_groups: usize) -> Result<Stats<T>> {
    compute_stats(x, StatLayout::group(num_groups), None)
}

/// `(x − mean_p) / std_p` with the partition `p` of each element.
pub fn normalize_with<T: Real>(x: &Tensor4<T>, stats: &Stats<T>) -> Result<Tensor4<T>> {
    let d = x.dims();
    stats.layout.check(d)?;
    ensure!(
        stats.means.len() == stats.layout.partitions(d.b),
        "stats carry {} partitions, tensor {} needs {}",
        stats.means.len(),
        d,
        stats.layout.partitions(d.b)
    );
    let mut out = Vec::with_capacity(d.numel());
    for b in 0..d.b {
        for c in 0..d.c {
            let p = stats.layout.partition(d.c, b, c);
            let (mu, sd) = (stats.means[p], stats.stds[p]);
            out.extend(x.plane(b, c).iter().map(|&v| (v - mu) / sd));
        }
    }
    Tensor4::from_vec(d, out)
}

/// `w_c · x + b_c` with per-channel vectors.
pub fn channel_affine<T: Real>(x: &Tensor4<T>, scale: &[T], shift: &[T]) -> Result<Tensor4<T>> {
    let d = x.dims();
    ensure!(scale.len() == d.c && shift.len() == d.c, "affine vectors must have {} entries", d.c);
    let mut out = Vec::with_capacity(d.numel());
    for b in 0..d.b {
        for c in 0..d.c {
            out.extend(x.plane(b, c).iter().map(|&v| scale[c] * v + shift[c]));
        }
    }
    Tensor4::from_vec(d, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Welford streaming mean/variance, independent of the two-pass kernel.
    fn streaming(values: impl Iterator<Item = f64>) -> (f64, f64) {
        let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
        for v in values {
            n += 1.0;
            let delta = v - mean;
            mean += delta / n;
            m2 += delta * (v - mean);
        }
        (mean, m2 / n)
    }

    #[test]
    fn constant_tensor() {
        let x = Tensor4::<f32>::full(Dims::new(2, 4, 3, 3), 5.0);
        for groups in [1, 2, 4] {
            let s = group_stats(&x, groups).unwrap();
            assert!(s.means.iter().all(|&m| m == 5.0));
            assert!(s.stds.iter().all(|&sd| (sd as f64 - EPSILON.sqrt()).abs() < 1e-9));
        }
    }

    #[test]
    fn two_groups_of_zeros_and_ones() {
        let x = Tensor4::<f32>::from_fn(Dims::new(1, 4, 2, 2), |_, c, _, _| if c < 2 { 0.0 } else { 1.0 });
        let s = group_stats(&x, 2).unwrap();
        assert_eq!(s.means, vec![0.0, 1.0]);
    }

    #[test]
    fn rejects_indivisible_channels() {
        let x = Tensor4::<f32>::zeros(Dims::new(1, 6, 2, 2));
        assert!(group_stats(&x, 4).is_err());
    }

    #[test]
    fn random_matches_streaming_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let dims = Dims::new(2, 8, 7, 9);
        let x = Tensor4::<f32>::from_fn(dims, |_, _, _, _| rng.random_range(-3.0..5.0));
        let s = group_stats(&x, 4).unwrap();
        for b in 0..2 {
            for g in 0..4 {
                let vals = (2 * g..2 * g + 2).flat_map(|c| x.plane(b, c).iter().map(|v| *v as f64).collect::<Vec<_>>());
                let (mean, var) = streaming(vals);
                let sd = (var + EPSILON).sqrt();
                let p = b * 4 + g;
                assert!(((s.means[p] as f64 - mean) / mean).abs() < 1e-6);
                assert!(((s.stds[p] as f64 - sd) / sd).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn masked_stats_only_see_active_pixels() {
        let x = Tensor4::<f64>::from_vec(Dims::new(1, 1, 1, 4), vec![1.0, 100.0, 3.0, -50.0]).unwrap();
        let s = compute_stats(&x, StatLayout::group(1), Some(&[true, false, true, false])).unwrap();
        assert_eq!(s.means[0], 2.0);
        assert!((s.stds[0] - (1.0 + EPSILON).sqrt()).abs() < 1e-12);
        let empty = compute_stats(&x, StatLayout::group(1), Some(&[false; 4])).unwrap();
        assert_eq!(empty.means[0], 0.0);
        assert_eq!(empty.counts[0], 0);
    }

    #[test]
    fn batch_layout_pools_over_samples() {
        let x = Tensor4::<f64>::from_fn(Dims::new(2, 2, 1, 1), |b, c, _, _| (b * 10 + c) as f64);
        let s = compute_stats(&x, StatLayout::batch(2), None).unwrap();
        assert_eq!(s.means, vec![5.0, 6.0]);
    }

    proptest! {
        #[test]
        fn self_normalized_has_zero_mean_unit_std(seed in any::<u64>(), groups in prop::sample::select(vec![1usize, 2, 4])) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor4::<f32>::from_fn(Dims::new(2, 4, 5, 5), |_, _, _, _| rng.random_range(-4.0..4.0));
            let s = group_stats(&x, groups).unwrap();
            let n = normalize_with(&x, &s).unwrap();
            let again = group_stats(&n, groups).unwrap();
            for (m, sd) in again.means.iter().zip(&again.stds) {
                prop_assert!(m.abs() < 1e-5);
                prop_assert!((sd - 1.0).abs() < 1e-3);
            }
        }
    }
}
