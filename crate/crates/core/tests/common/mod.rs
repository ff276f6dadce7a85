#![allow(dead_code)]

pub mod oracle;

use pmpatch_core::trace::{TraceOp, TraceProgram};
use proptest::prelude::*;

pub const LINES: [u64; 3] = [0x1000, 0x1040, 0x1080];

/// A random trace op over at most three lines: 8-byte stores at offsets 0 or
/// 8 with values 1..=3, loads, all flush kinds and both fences.
pub fn op_strategy() -> impl Strategy<Value = TraceOp> {
    let addr = (0..LINES.len(), prop_oneof![Just(0u64), Just(8u64)]).prop_map(|(l, off)| LINES[l] + off);
    prop_oneof![
        4 => (addr.clone(), 1u64..=3).prop_map(|(a, v)| TraceOp::store(a, 8, v)),
        1 => addr.clone().prop_map(|a| TraceOp::load(a, 8)),
        2 => addr.clone().prop_map(TraceOp::clflush),
        1 => addr.clone().prop_map(TraceOp::clflushopt),
        1 => addr.prop_map(TraceOp::clwb),
        1 => Just(TraceOp::sfence()),
        1 => Just(TraceOp::mfence()),
    ]
}

pub fn program_strategy(max_ops: usize) -> impl Strategy<Value = TraceProgram> {
    prop::collection::vec(op_strategy(), 0..=max_ops).prop_map(|ops| TraceProgram::new(ops).unwrap())
}
