//! MAC accounting of sparse inference against the dense head.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use sparsehead_core::head::{dense_level_macs, Head};
use sparsehead_core::ledger::{Branch, FlopLedger, Slot};

use crate::error::Result;
use crate::scene::Scene;

/// One CSV row. Branch rows carry the conv and mask-net work of one branch;
/// the `shared` row of a level carries the point-wise global feature; the
/// final `total` row sums everything.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FlopRow {
    pub level: Option<usize>,
    pub branch: String,
    pub dense_macs: u64,
    pub sparse_macs: u64,
    pub mask_macs: u64,
    pub g_macs: u64,
    pub activation_ratio: Option<f64>,
    /// `100·(1 − (sparse + mask + g) / dense)`; empty where there is no dense
    /// counterpart.
    pub reduction_pct: Option<f64>,
}

impl FlopRow {
    fn finish(mut self, active: Option<(u64, u64)>) -> Self {
        self.activation_ratio = active.map(|(a, n)| a as f64 / n.max(1) as f64);
        self.reduction_pct = (self.dense_macs > 0).then(|| 100.0 * (1.0 - self.executed() as f64 / self.dense_macs as f64));
        self
    }

    pub fn executed(&self) -> u64 {
        self.sparse_macs + self.mask_macs + self.g_macs
    }
}

#[derive(Clone, Debug)]
pub struct FlopReport {
    pub rows: Vec<FlopRow>,
    /// Dense MACs from the closed-form formula over the same feature sizes.
    pub closed_form_dense: u64,
}

impl FlopReport {
    pub fn total(&self) -> &FlopRow {
        self.rows.last().expect("total row")
    }

    pub fn reduction_pct(&self) -> f64 {
        self.total().reduction_pct.unwrap_or(0.0)
    }

    pub fn dense_matches_closed_form(&self) -> bool {
        self.total().dense_macs == self.closed_form_dense
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs sparse inference on every scene and aggregates the ledgers.
pub fn bench_flops(head: &Head<f32>, scenes: &[Scene]) -> Result<FlopReport> {
    let levels = head.cfg.num_levels;
    let mut ledger = FlopLedger::new();
    // (active, pixels) per (level, branch)
    let mut active: BTreeMap<(usize, Branch), (u64, u64)> = BTreeMap::new();
    let mut closed_form_dense = 0;
    for s in scenes {
        let out = head.forward_infer(&s.feats)?;
        ledger.merge(&out.ledger);
        for (i, lv) in out.levels.iter().enumerate() {
            for (b, o) in Branch::HEADS.into_iter().zip(lv) {
                let e = active.entry((i, b)).or_default();
                e.0 += o.mask.active_count() as u64;
                e.1 += o.mask.decisions().len() as u64;
            }
        }
        for x in s.feats.levels() {
            let d = x.dims();
            closed_form_dense += dense_level_macs(&head.cfg, (d.b * d.plane()) as u64);
        }
    }
    let mut rows = Vec::new();
    for level in 0..levels {
        for branch in Branch::HEADS {
            let at = |pred: &dyn Fn(Slot) -> bool| ledger.sum_where(|s| s.level == level && s.branch == branch && pred(s.slot));
            let conv = at(&|s| matches!(s, Slot::Layer(_) | Slot::Pred));
            let row = FlopRow {
                level: Some(level),
                branch: branch.name().into(),
                dense_macs: conv.dense,
                sparse_macs: conv.executed,
                mask_macs: at(&|s| s == Slot::MaskNet).executed,
                g_macs: 0,
                activation_ratio: None,
                reduction_pct: None,
            };
            rows.push(row.finish(active.get(&(level, branch)).copied()));
        }
        let g = ledger.sum_where(|s| s.level == level && s.branch == Branch::Shared);
        let row = FlopRow {
            level: Some(level),
            branch: Branch::Shared.name().into(),
            dense_macs: g.dense,
            sparse_macs: 0,
            mask_macs: 0,
            g_macs: g.executed,
            activation_ratio: None,
            reduction_pct: None,
        };
        rows.push(row.finish(None));
    }
    let sum = |f: fn(&FlopRow) -> u64| rows.iter().map(f).sum::<u64>();
    let (a, n) = active.values().fold((0, 0), |acc, v| (acc.0 + v.0, acc.1 + v.1));
    let total = FlopRow {
        level: None,
        branch: "total".into(),
        dense_macs: sum(|r| r.dense_macs),
        sparse_macs: sum(|r| r.sparse_macs),
        mask_macs: sum(|r| r.mask_macs),
        g_macs: sum(|r| r.g_macs),
        activation_ratio: None,
        reduction_pct: None,
    }
    .finish(Some((a, n)));
    rows.push(total);
    Ok(FlopReport { rows, closed_form_dense })
}
