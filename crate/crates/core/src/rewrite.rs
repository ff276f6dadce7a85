//! Trace-level flush/fence rewriting.

use std::fmt;

use crate::trace::{FenceKind, FlushKind, TraceOp, TraceProgram};

/// Default number of following ops searched for an existing fence.
pub const DEFAULT_DEDUP_WINDOW: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RewriteRule {
    /// Each `clflush` becomes `clwb; sfence`, or just `clwb` when one of the
    /// next `dedup_window` ops is already a fence.
    ClflushToClwbSfence { dedup_window: usize },
    ClflushoptToClwb,
    MfenceToSfence,
}

impl RewriteRule {
    pub fn clflush_to_clwb_sfence() -> Self {
        RewriteRule::ClflushToClwbSfence { dedup_window: DEFAULT_DEDUP_WINDOW }
    }
}

impl fmt::Display for RewriteRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RewriteRule::ClflushToClwbSfence { dedup_window } => {
                write!(f, "CLFLUSH_TO_CLWB_SFENCE(window={dedup_window})")
            }
            RewriteRule::ClflushoptToClwb => f.write_str("CLFLUSHOPT_TO_CLWB"),
            RewriteRule::MfenceToSfence => f.write_str("MFENCE_TO_SFENCE"),
        }
    }
}

pub fn rewrite_trace(program: &TraceProgram, rule: RewriteRule) -> TraceProgram {
    let ops = rewrite_ops(program.ops(), rule).into_iter().map(|(op, _)| op).collect();
    TraceProgram::new(ops).expect("rewriting preserves op validity")
}

/// Rewrites `ops`, tagging each output op with the index of the input op it
/// came from.
pub fn rewrite_ops(ops: &[TraceOp], rule: RewriteRule) -> Vec<(TraceOp, usize)> {
    let mut out = Vec::with_capacity(ops.len());
    for (i, &op) in ops.iter().enumerate() {
        match (rule, op) {
            (
                RewriteRule::ClflushToClwbSfence { dedup_window },
                TraceOp::Flush { kind: FlushKind::Clflush, addr },
            ) => {
                out.push((TraceOp::clwb(addr), i));
                let fenced = ops[i + 1..].iter().take(dedup_window).any(TraceOp::is_fence);
                if !fenced {
                    out.push((TraceOp::sfence(), i));
                }
            }
            (RewriteRule::ClflushoptToClwb, TraceOp::Flush { kind: FlushKind::Clflushopt, addr }) => {
                out.push((TraceOp::clwb(addr), i));
            }
            (RewriteRule::MfenceToSfence, TraceOp::Fence(FenceKind::Mfence)) => {
                out.push((TraceOp::sfence(), i));
            }
            _ => out.push((op, i)),
        }
    }
    out
}
