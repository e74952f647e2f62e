//! Multiply-accumulate accounting for sparse vs. dense head execution.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Cls,
    Reg,
    /// Work shared by both branches of a level (the global context feature).
    Shared,
}

impl Branch {
    pub const HEADS: [Branch; 2] = [Branch::Cls, Branch::Reg];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Cls => "cls",
            Branch::Reg => "reg",
            Branch::Shared => "shared",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Slot {
    MaskNet,
    Global,
    Layer(u8),
    Pred,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Site {
    pub level: usize,
    pub branch: Branch,
    pub slot: Slot,
}

impl Site {
    pub fn new(level: usize, branch: Branch, slot: Slot) -> Self {
        Site { level, branch, slot }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacCount {
    /// MACs actually executed.
    pub executed: u64,
    /// MACs the dense reference head spends on the same site (0 for sites the
    /// dense head does not have, such as mask networks).
    pub dense: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlopLedger {
    records: BTreeMap<Site, MacCount>,
    count_elementwise: bool,
    elementwise: u64,
}

impl FlopLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_elementwise(mut self, on: bool) -> Self {
        self.count_elementwise = on;
        self
    }

    pub fn counts_elementwise(&self) -> bool {
        self.count_elementwise
    }

    pub fn record(&mut self, site: Site, executed: u64, dense: u64) {
        let e = self.records.entry(site).or_default();
        e.executed += executed;
        e.dense += dense;
    }

    /// Counted only when the ledger was created with elementwise counting on.
    pub fn record_elementwise(&mut self, ops: u64) {
        if self.count_elementwise {
            self.elementwise += ops;
        }
    }

    pub fn elementwise(&self) -> u64 {
        self.elementwise
    }

    pub fn get(&self, site: Site) -> MacCount {
        self.records.get(&site).copied().unwrap_or_default()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Site, &MacCount)> {
        self.records.iter()
    }

    pub fn merge(&mut self, other: &FlopLedger) {
        for (site, c) in &other.records {
            self.record(*site, c.executed, c.dense);
        }
        self.elementwise += other.elementwise;
    }

    pub fn total_executed(&self) -> u64 {
        self.records.values().map(|c| c.executed).sum()
    }

    pub fn total_dense(&self) -> u64 {
        self.records.values().map(|c| c.dense).sum()
    }

    pub fn sum_where(&self, pred: impl Fn(&Site) -> bool) -> MacCount {
        self.records.iter().filter(|(s, _)| pred(s)).fold(MacCount::default(), |acc, (_, c)| MacCount {
            executed: acc.executed + c.executed,
            dense: acc.dense + c.dense,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merge_adds_counts() {
        let s = Site::new(0, Branch::Cls, Slot::Layer(0));
        let mut a = FlopLedger::new();
        a.record(s, 10, 40);
        let mut b = FlopLedger::new();
        b.record(s, 5, 40);
        b.record(Site::new(1, Branch::Shared, Slot::Global), 7, 0);
        a.merge(&b);
        assert_eq!(a.get(s), MacCount { executed: 15, dense: 80 });
        assert_eq!(a.total_executed(), 22);
        assert_eq!(a.total_dense(), 80);
    }

    #[test]
    fn elementwise_respects_flag() {
        let mut off = FlopLedger::new();
        off.record_elementwise(100);
        assert_eq!(off.elementwise(), 0);
        let mut on = FlopLedger::new().with_elementwise(true);
        on.record_elementwise(100);
        assert_eq!(on.elementwise(), 100);
    }
}
