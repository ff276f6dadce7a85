use serde::Serialize;

use crate::trace::{OpKind, TraceProgram};

/// Per-op costs of flushes and fences. Stores, loads and absent ops cost 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CostModel {
    pub clflush: u64,
    pub clflushopt: u64,
    pub clwb: u64,
    pub mfence: u64,
    pub sfence: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel { clflush: 3, clflushopt: 2, clwb: 2, mfence: 2, sfence: 1 }
    }
}

impl CostModel {
    pub fn op(&self, kind: OpKind) -> u64 {
        match kind {
            OpKind::Store | OpKind::Load => 0,
            OpKind::Clflush => self.clflush,
            OpKind::Clflushopt => self.clflushopt,
            OpKind::Clwb => self.clwb,
            OpKind::Mfence => self.mfence,
            OpKind::Sfence => self.sfence,
        }
    }

    pub fn ops(&self, kinds: &[OpKind]) -> u64 {
        kinds.iter().map(|&k| self.op(k)).sum()
    }

    /// Summed cost of every constraint op in `program`.
    pub fn program(&self, program: &TraceProgram) -> u64 {
        program.ops().iter().map(|op| self.op(op.kind())).sum()
    }
}
