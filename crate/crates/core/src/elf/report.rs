//! Machine-readable patch outcome.

use serde::{Deserialize, Serialize};

use super::plan::{PatchPlan, SkipReason, Strategy};

pub const TOOL_VERSION: &str = concat!("pmpatch ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteReport {
    /// Hex address of the flush, e.g. `"0x401004"`.
    pub vaddr: String,
    /// Original instruction, `clflush` or `clflushopt`.
    pub kind: String,
    pub strategy: Strategy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<SkipReason>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentReport {
    pub vaddr: String,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchReport {
    pub sites: Vec<SiteReport>,
    pub patched: usize,
    pub skipped: usize,
    pub segment: Option<SegmentReport>,
    pub tool_version: String,
}

impl PatchReport {
    pub fn from_plan(plan: &PatchPlan) -> Self {
        PatchReport {
            sites: plan
                .sites
                .iter()
                .map(|s| SiteReport {
                    vaddr: format!("{:#x}", s.vaddr),
                    kind: s.kind.name().to_string(),
                    strategy: s.strategy,
                    reason: s.reason,
                })
                .collect(),
            patched: plan.patched(),
            skipped: plan.skipped(),
            segment: plan.segment.map(|s| SegmentReport { vaddr: format!("{:#x}", s.vaddr), size: s.size }),
            tool_version: TOOL_VERSION.to_string(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("patch report serializes")
    }
}
