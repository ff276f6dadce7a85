//! Writing a plan into a copy of the image.

use super::image::{ElfImage, ProgramHeader, E_PHNUM_AT, E_PHOFF_AT, PF_R, PF_X, PHDR_SIZE, PT_LOAD, PT_PHDR};
use super::plan::{PatchPlan, SegmentLayout, PAGE};
use super::report::PatchReport;

/// Applies `plan` to a copy of `img`'s bytes.
pub fn apply_patches(img: &ElfImage, plan: &PatchPlan) -> (Vec<u8>, PatchReport) {
    let mut out = img.bytes().to_vec();
    for site in &plan.sites {
        if let Some(bytes) = &site.inplace {
            out[site.file_offset..site.file_offset + bytes.len()].copy_from_slice(bytes);
        }
    }
    for d in &plan.detours {
        out[d.span_file_offset..d.span_file_offset + d.span_len].copy_from_slice(&d.site_bytes);
    }
    if let Some(seg) = plan.segment {
        let phdrs = relocated_phdrs(img, &seg);
        out.resize(seg.file_offset as usize, 0);
        for p in &phdrs {
            out.extend_from_slice(&p.to_bytes());
        }
        out.resize(seg.file_offset as usize + seg.code_offset, 0);
        for d in &plan.detours {
            debug_assert_eq!(out.len(), seg.file_offset as usize + d.segment_offset);
            out.extend_from_slice(&d.trampoline);
        }
        out[E_PHOFF_AT..E_PHOFF_AT + 8].copy_from_slice(&seg.file_offset.to_le_bytes());
        out[E_PHNUM_AT..E_PHNUM_AT + 2].copy_from_slice(&(phdrs.len() as u16).to_le_bytes());
    }
    (out, PatchReport::from_plan(plan))
}

/// The program-header table of the patched file: the original entries with
/// `PT_PHDR` moved to the new table and one extra `PT_LOAD` for the injected
/// segment, placed after the last existing `PT_LOAD`.
pub fn relocated_phdrs(img: &ElfImage, seg: &SegmentLayout) -> Vec<ProgramHeader> {
    let table_size = (seg.phnum * PHDR_SIZE) as u64;
    let mut phdrs: Vec<ProgramHeader> = img
        .program_headers()
        .iter()
        .map(|p| {
            if p.p_type == PT_PHDR {
                ProgramHeader {
                    p_offset: seg.file_offset,
                    p_vaddr: seg.vaddr,
                    p_paddr: seg.vaddr,
                    p_filesz: table_size,
                    p_memsz: table_size,
                    ..*p
                }
            } else {
                *p
            }
        })
        .collect();
    let load = ProgramHeader {
        p_type: PT_LOAD,
        p_flags: PF_R | PF_X,
        p_offset: seg.file_offset,
        p_vaddr: seg.vaddr,
        p_paddr: seg.vaddr,
        p_filesz: seg.size,
        p_memsz: seg.size,
        p_align: PAGE,
    };
    let at = phdrs.iter().rposition(|p| p.p_type == PT_LOAD).map_or(phdrs.len(), |i| i + 1);
    phdrs.insert(at, load);
    debug_assert_eq!(phdrs.len(), seg.phnum);
    phdrs
}
