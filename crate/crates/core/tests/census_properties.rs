mod common;

use std::collections::HashMap;

use common::program_strategy;
use pmpatch_core::census::census;
use pmpatch_core::rewrite::{rewrite_trace, RewriteRule};
use pmpatch_core::trace::{CacheLineId, FlushKind, TraceOp, TraceProgram};
use proptest::prelude::*;

/// Straight re-count of the census definitions, one line at a time.
fn reference(p: &TraceProgram) -> (usize, usize) {
    // line -> (stored since last flush, invalidated)
    let mut lines: HashMap<CacheLineId, (bool, bool)> = HashMap::new();
    let (mut redundant, mut refetches) = (0, 0);
    for op in p.ops() {
        let Some(line) = op.line() else { continue };
        let entry = lines.entry(line).or_insert((false, false));
        match *op {
            TraceOp::Store { .. } | TraceOp::Load { .. } => {
                if entry.1 {
                    refetches += 1;
                    entry.1 = false;
                }
                if matches!(op, TraceOp::Store { .. }) {
                    entry.0 = true;
                }
            }
            TraceOp::Flush { kind, .. } => {
                if !entry.0 {
                    redundant += 1;
                }
                entry.0 = false;
                if kind != FlushKind::Clwb {
                    entry.1 = true;
                }
            }
            TraceOp::Fence(_) => {}
        }
    }
    (redundant, refetches)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn census_matches_reference_count(p in program_strategy(12)) {
        let r = census(&p);
        prop_assert_eq!((r.redundant_flushes, r.eviction_refetches), reference(&p));
        prop_assert!(r.redundant_flushes <= r.total_flushes());
        let per_line: usize = r.per_line.values().map(|l| l.refetches).sum();
        prop_assert_eq!(per_line, r.eviction_refetches);
    }

    #[test]
    fn clwb_rewrite_never_adds_refetches(p in program_strategy(12)) {
        let before = census(&p);
        let after = census(&rewrite_trace(&p, RewriteRule::clflush_to_clwb_sfence()));
        prop_assert!(after.eviction_refetches <= before.eviction_refetches);
        prop_assert_eq!(after.redundant_flushes, before.redundant_flushes);
    }
}
