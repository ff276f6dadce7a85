//! Redundant-flush and eviction-refetch census over a trace.
//!
//! A flush of line L is redundant when no store to L happened since the
//! previous flush of L (or since the start of the trace). `clflush` and
//! `clflushopt` invalidate the line; a later store or load to it must read
//! the line back from PM, which is counted as an eviction refetch. `clwb`
//! keeps the line cached. Capacity evictions are not modelled: residency
//! changes only through flushes.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};

use serde::Serialize;

use crate::trace::{CacheLineId, FlushKind, OpKind, TraceOp, TraceProgram};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LineCensus {
    pub flushes: usize,
    pub redundant: usize,
    pub refetches: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CensusReport {
    /// Count per flush mnemonic; every flush kind is present.
    pub flushes: BTreeMap<OpKind, usize>,
    /// Count per fence mnemonic; every fence kind is present.
    pub fences: BTreeMap<OpKind, usize>,
    pub redundant_flushes: usize,
    pub eviction_refetches: usize,
    pub per_line: BTreeMap<CacheLineId, LineCensus>,
}

impl CensusReport {
    pub fn total_flushes(&self) -> usize {
        self.flushes.values().sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("census report serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Residency {
    Cold,
    Cached,
    Invalidated,
}

#[derive(Debug, Clone, Copy)]
struct LineState {
    stored_since_flush: bool,
    residency: Residency,
}

pub fn census(program: &TraceProgram) -> CensusReport {
    let mut flushes: BTreeMap<OpKind, usize> =
        [OpKind::Clflush, OpKind::Clflushopt, OpKind::Clwb].into_iter().map(|k| (k, 0)).collect();
    let mut fences: BTreeMap<OpKind, usize> =
        [OpKind::Sfence, OpKind::Mfence].into_iter().map(|k| (k, 0)).collect();
    let mut per_line: BTreeMap<CacheLineId, LineCensus> = BTreeMap::new();
    let mut lines: BTreeMap<CacheLineId, LineState> = BTreeMap::new();

    for op in program.ops() {
        if let TraceOp::Fence(kind) = op {
            *fences.entry(OpKind::from(*kind)).or_default() += 1;
            continue;
        }
        let line = op.line().expect("non-fence ops carry an address");
        let state = lines
            .entry(line)
            .or_insert(LineState { stored_since_flush: false, residency: Residency::Cold });
        let counts = per_line.entry(line).or_default();
        match *op {
            TraceOp::Store { .. } | TraceOp::Load { .. } => {
                if state.residency == Residency::Invalidated {
                    counts.refetches += 1;
                }
                state.residency = Residency::Cached;
                if matches!(op, TraceOp::Store { .. }) {
                    state.stored_since_flush = true;
                }
            }
            TraceOp::Flush { kind, .. } => {
                *flushes.entry(OpKind::from(kind)).or_default() += 1;
                counts.flushes += 1;
                if !state.stored_since_flush {
                    counts.redundant += 1;
                }
                state.stored_since_flush = false;
                if kind != FlushKind::Clwb {
                    state.residency = Residency::Invalidated;
                }
            }
            TraceOp::Fence(_) => unreachable!(),
        }
    }

    CensusReport {
        redundant_flushes: per_line.values().map(|c| c.redundant).sum(),
        eviction_refetches: per_line.values().map(|c| c.refetches).sum(),
        flushes,
        fences,
        per_line,
    }
}

/// Human-readable table.
impl fmt::Display for CensusReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut kinds = String::new();
        for (k, n) in self.flushes.iter().chain(&self.fences) {
            let _ = write!(kinds, " {k}={n}");
        }
        writeln!(f, "ops:{kinds}")?;
        writeln!(f, "redundant flushes:  {}", self.redundant_flushes)?;
        writeln!(f, "eviction refetches: {}", self.eviction_refetches)?;
        writeln!(f, "{:<18} {:>8} {:>10} {:>10}", "line", "flushes", "redundant", "refetches")?;
        for (line, c) in &self.per_line {
            writeln!(f, "{:<18} {:>8} {:>10} {:>10}", line.to_string(), c.flushes, c.redundant, c.refetches)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::parse_trace;

    fn run(text: &str) -> CensusReport {
        census(&parse_trace(text).unwrap())
    }

    #[test]
    fn empty_trace_is_all_zero() {
        let r = run("");
        assert_eq!(r.total_flushes(), 0);
        assert_eq!(r.redundant_flushes, 0);
        assert_eq!(r.eviction_refetches, 0);
        assert!(r.per_line.is_empty());
        assert!(r.fences.values().all(|&n| n == 0));
    }

    #[test]
    fn per_field_flushes_of_one_line_are_redundant() {
        let r = run(
            "store 0x1000 8 1\nstore 0x1008 8 2\nstore 0x1010 8 1\n\
             clflush 0x1000\nclflush 0x1008\nclflush 0x1010",
        );
        assert_eq!(r.redundant_flushes, 2);
        assert_eq!(r.flushes[&OpKind::Clflush], 3);
        // No access after the flushes, so nothing is fetched back.
        assert_eq!(r.eviction_refetches, 0);
    }

    #[test]
    fn reloads_after_invalidation_are_refetches() {
        let text = "store 0x1000 8 1\nstore 0x1008 8 2\nstore 0x1010 8 1\n\
                    clflush 0x1000\nload 0x1008 8\nclflush 0x1008\nload 0x1010 8\nclflush 0x1010";
        let r = run(text);
        assert_eq!(r.eviction_refetches, 2);
        assert_eq!(r.redundant_flushes, 2);
        let r = run(&text.replace("clflush", "clwb"));
        assert_eq!(r.eviction_refetches, 0);
        assert_eq!(r.redundant_flushes, 2);
        let r = run(&text.replace("clflush", "clflushopt"));
        assert_eq!(r.eviction_refetches, 2);
    }

    #[test]
    fn flush_of_never_stored_line_is_redundant() {
        let r = run("clflush 0x40\nstore 0x40 1 1\nclflush 0x40\nclflush 0x40");
        assert_eq!(r.redundant_flushes, 2);
        assert_eq!(r.eviction_refetches, 1);
        assert_eq!(r.per_line[&CacheLineId::of(0x40)], LineCensus { flushes: 3, redundant: 2, refetches: 1 });
    }

    #[test]
    fn fences_do_not_reset_redundancy() {
        let r = run("store 0x0 8 1\nclwb 0x0\nsfence\nclwb 0x0\nmfence");
        assert_eq!(r.redundant_flushes, 1);
        assert_eq!(r.fences[&OpKind::Sfence], 1);
        assert_eq!(r.fences[&OpKind::Mfence], 1);
    }

    #[test]
    fn json_schema_keys() {
        let r = run("store 0x1000 8 1\nclflush 0x1000\nsfence");
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        for key in ["flushes", "fences", "redundant_flushes", "eviction_refetches", "per_line"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["flushes"]["clflush"], 1);
        assert_eq!(v["fences"]["sfence"], 1);
        assert_eq!(v["per_line"]["0x1000"]["flushes"], 1);
    }
}
