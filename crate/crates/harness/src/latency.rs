//! Wall-clock comparison of sparse inference against the dense head.

use std::time::Instant;

use serde::Serialize;
use sparsehead_core::head::{FpnFeatures, Head};
use sparsehead_core::Dims;

use crate::error::{invalid, Result};
use crate::eval::infer_parallel;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Timing {
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
}

impl Timing {
    /// Nearest-rank percentiles of `samples` (milliseconds).
    pub fn from_samples(samples: &[f64]) -> Self {
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let at = |q: f64| {
            if s.is_empty() {
                return f64::NAN;
            }
            let rank = (q * s.len() as f64).ceil().max(1.0) as usize;
            s[rank.min(s.len()) - 1]
        };
        Timing { median_ms: at(0.5), p10_ms: at(0.1), p90_ms: at(0.9) }
    }
}

#[derive(Clone, Debug)]
pub struct LatencyReport {
    /// Finest-level input dims.
    pub input: Dims,
    pub repetitions: usize,
    pub parallel: bool,
    pub sparse: Timing,
    pub dense: Timing,
    /// Every repetition executed the same MAC count.
    pub ledger_stable: bool,
}

impl LatencyReport {
    /// Dense median over sparse median.
    pub fn speedup(&self) -> f64 {
        self.dense.median_ms / self.sparse.median_ms
    }
}

fn time_ms(f: impl FnOnce() -> Result<()>) -> Result<f64> {
    let t = Instant::now();
    f()?;
    Ok(t.elapsed().as_secs_f64() * 1e3)
}

/// Times `repetitions` sparse and dense passes over `feats` after `warmup`
/// untimed ones. Sparse and dense repetitions are interleaved so that slow
/// drifts of the machine affect both alike. `parallel` runs the levels of
/// the sparse pass concurrently.
pub fn bench_latency(head: &Head<f32>, feats: &FpnFeatures<f32>, repetitions: usize, warmup: usize, parallel: bool) -> Result<LatencyReport> {
    if repetitions < 30 {
        return Err(invalid!("latency needs at least 30 repetitions, got {repetitions}"));
    }
    let sparse = || if parallel { infer_parallel(head, feats) } else { Ok(head.forward_infer(feats)?) };
    let reference = sparse()?.ledger.total_executed();
    for _ in 0..warmup {
        sparse()?;
        head.dense_reference(feats)?;
    }
    let (mut ts, mut td) = (Vec::with_capacity(repetitions), Vec::with_capacity(repetitions));
    let mut ledger_stable = true;
    for _ in 0..repetitions {
        ts.push(time_ms(|| {
            let out = sparse()?;
            ledger_stable &= out.ledger.total_executed() == reference;
            Ok(())
        })?);
        td.push(time_ms(|| {
            head.dense_reference(feats)?;
            Ok(())
        })?);
    }
    Ok(LatencyReport {
        input: feats.levels()[0].dims(),
        repetitions,
        parallel,
        sparse: Timing::from_samples(&ts),
        dense: Timing::from_samples(&td),
        ledger_stable,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use sparsehead_core::head::HeadConfig;
    use sparsehead_core::Tensor4;

    #[test]
    fn nearest_rank_percentiles() {
        let s: Vec<f64> = (1..=10).rev().map(f64::from).collect();
        let t = Timing::from_samples(&s);
        assert_eq!((t.p10_ms, t.median_ms, t.p90_ms), (1.0, 5.0, 9.0));
        assert_eq!(Timing::from_samples(&[4.0]).median_ms, 4.0);
    }

    #[test]
    fn too_few_repetitions_is_an_error() {
        let cfg = HeadConfig { num_levels: 1, level_strides: vec![8], channels: 8, num_groups: 2, ..HeadConfig::default() };
        let head = Head::<f32>::init(cfg).unwrap();
        let feats = FpnFeatures::new(vec![Tensor4::zeros(Dims::new(1, 8, 4, 4))]).unwrap();
        assert!(bench_latency(&head, &feats, 29, 0, false).is_err());
        let r = bench_latency(&head, &feats, 30, 1, false).unwrap();
        assert!(r.ledger_stable && r.sparse.p10_ms <= r.sparse.p90_ms);
    }
}
