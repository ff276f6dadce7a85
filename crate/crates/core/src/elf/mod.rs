//! ELF loading, flush-site patching and verification.

mod apply;
mod image;
mod plan;
mod report;
mod verify;

pub use apply::{apply_patches, relocated_phdrs};
pub use image::{
    load_elf, ElfError, ElfImage, ExecRegion, FileHeader, ProgramHeader, SectionHeader, EHDR_SIZE, ET_DYN, ET_EXEC,
    PF_R, PF_W, PF_X, PT_LOAD, PT_PHDR,
};
pub use plan::{
    align_up, plan_patches, Detour, PatchOptions, PatchPlan, Piece, PlannedSite, SegmentLayout, SkipReason, Strategy,
    PAGE,
};
pub use report::{PatchReport, SegmentReport, SiteReport, TOOL_VERSION};
pub use verify::{check_report, verify_patch, FailureKind, VerifyFailure, VerifyReport};
