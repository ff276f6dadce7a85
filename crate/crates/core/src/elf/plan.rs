//! Per-site patch decisions and trampoline layout.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::image::{ElfImage, PHDR_SIZE};
use crate::rewrite::DEFAULT_DEDUP_WINDOW;
use crate::x86::{self, DecodedInstruction, InstrClass, Run, RunEnd, Sweep};

pub const PAGE: u64 = 0x1000;
/// Alignment of the first trampoline after the relocated program headers.
pub const TRAMPOLINE_ALIGN: usize = 16;
const JMP_LEN: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchOptions {
    /// Also rewrite `clflushopt` to `clwb`.
    pub patch_clflushopt: bool,
    /// Instructions after a `clflush` searched for an existing fence.
    pub dedup_window: usize,
}

impl Default for PatchOptions {
    fn default() -> Self {
        PatchOptions { patch_clflushopt: false, dedup_window: DEFAULT_DEDUP_WINDOW }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Strategy {
    Inplace,
    Detour,
    Skip,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Inplace => "INPLACE",
            Strategy::Detour => "DETOUR",
            Strategy::Skip => "SKIP",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkipReason {
    SpanTooShort,
    BranchTargetInside,
    RelocationUnsupported,
    UndecodableContext,
    Rel32OutOfRange,
}

impl fmt::Display for SkipReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SkipReason::SpanTooShort => "span-too-short",
            SkipReason::BranchTargetInside => "branch-target-inside",
            SkipReason::RelocationUnsupported => "relocation-unsupported",
            SkipReason::UndecodableContext => "undecodable-context",
            SkipReason::Rel32OutOfRange => "rel32-out-of-range",
        })
    }
}

/// One displaced instruction and where it went in the trampoline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Piece {
    pub orig_vaddr: u64,
    pub orig_len: usize,
    pub tramp_offset: usize,
    pub tramp_len: usize,
    /// True when the piece is a rewritten flush rather than a copy.
    pub rewritten: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Detour {
    pub span_vaddr: u64,
    pub span_len: usize,
    pub span_file_offset: usize,
    pub trampoline_vaddr: u64,
    /// Offset of the trampoline within the injected segment.
    pub segment_offset: usize,
    pub trampoline: Vec<u8>,
    /// `jmp` to the trampoline followed by `int3` padding.
    pub site_bytes: Vec<u8>,
    pub pieces: Vec<Piece>,
}

impl Detour {
    pub fn span_end(&self) -> u64 {
        self.span_vaddr + self.span_len as u64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlannedSite {
    pub vaddr: u64,
    pub file_offset: usize,
    pub kind: InstrClass,
    pub region: usize,
    pub run: usize,
    pub position: usize,
    /// Whether the rewrite appends an `sfence` after the `clwb`.
    pub added_fence: bool,
    pub strategy: Strategy,
    pub reason: Option<SkipReason>,
    /// Bytes written over the flush for INPLACE sites.
    pub inplace: Option<Vec<u8>>,
    /// Index into [`PatchPlan::detours`]. Several sites share one detour when
    /// later flushes fall inside an earlier site's span.
    pub detour: Option<usize>,
}

impl PlannedSite {
    pub fn is_patched(&self) -> bool {
        self.strategy != Strategy::Skip
    }
}

/// Placement of the injected segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SegmentLayout {
    pub vaddr: u64,
    pub file_offset: u64,
    /// Number of program headers in the relocated table.
    pub phnum: usize,
    /// Offset of the first trampoline within the segment.
    pub code_offset: usize,
    pub size: u64,
}

#[derive(Debug, Clone)]
pub struct PatchPlan {
    pub options: PatchOptions,
    pub sites: Vec<PlannedSite>,
    pub detours: Vec<Detour>,
    pub segment: Option<SegmentLayout>,
    /// Sweep of each executable region, in region order.
    pub sweeps: Vec<Sweep>,
}

impl PatchPlan {
    pub fn patched(&self) -> usize {
        self.sites.iter().filter(|s| s.is_patched()).count()
    }

    pub fn skipped(&self) -> usize {
        self.sites.len() - self.patched()
    }

    pub fn instruction(&self, site: &PlannedSite) -> &DecodedInstruction {
        &self.sweeps[site.region].runs[site.run].instructions[site.position]
    }
}

pub fn align_up(v: u64, align: u64) -> u64 {
    v.div_ceil(align) * align
}

fn is_target_flush(class: InstrClass, opts: &PatchOptions) -> bool {
    class == InstrClass::Clflush || (class == InstrClass::Clflushopt && opts.patch_clflushopt)
}

struct Goal {
    clwb: x86::Encoded,
    added_fence: bool,
}

fn goal(run: &Run, pos: usize, raw: &[u8], opts: &PatchOptions) -> Goal {
    let insn = &run.instructions[pos];
    let clwb = x86::clwb_from_flush(insn, insn.bytes(raw));
    let added_fence = insn.class == InstrClass::Clflush
        && !run.instructions[pos + 1..].iter().take(opts.dedup_window).any(|i| i.class.is_persist_fence());
    Goal { clwb, added_fence }
}

/// Decides a strategy for every flush site and lays out trampolines.
pub fn plan_patches(img: &ElfImage, opts: PatchOptions) -> PatchPlan {
    let sweeps: Vec<Sweep> =
        img.regions().iter().map(|r| x86::linear_sweep(img.region_bytes(r), &r.anchors)).collect();

    let mut targets: BTreeSet<u64> = BTreeSet::new();
    for (region, sweep) in img.regions().iter().zip(&sweeps) {
        for t in sweep.instructions().filter_map(|i| i.branch_target) {
            if let Some(v) = (region.vaddr as i64).checked_add(t).and_then(|v| u64::try_from(v).ok()) {
                targets.insert(v);
            }
        }
    }

    let phnum = img.program_headers().len() + 1;
    let seg_vaddr = align_up(img.max_load_end(), PAGE);
    let seg_file_offset = align_up(img.bytes().len() as u64, PAGE);
    let code_offset = (phnum * PHDR_SIZE).next_multiple_of(TRAMPOLINE_ALIGN);

    let mut found: Vec<(usize, usize, usize)> = Vec::new();
    for (g, sweep) in sweeps.iter().enumerate() {
        for site in x86::find_flush_sites(sweep, opts.patch_clflushopt) {
            found.push((g, site.run, site.position));
        }
    }
    found.sort_by_key(|&(g, r, p)| img.regions()[g].vaddr + sweeps[g].runs[r].instructions[p].offset as u64);

    let mut sites = Vec::with_capacity(found.len());
    let mut detours: Vec<Detour> = Vec::new();
    let mut cursor = code_offset;
    for (g, r, p) in found {
        let region = &img.regions()[g];
        let raw = img.region_bytes(region);
        let run = &sweeps[g].runs[r];
        let insn = &run.instructions[p];
        let vaddr = region.vaddr + insn.offset as u64;
        let goal = goal(run, p, raw, &opts);
        let mut site = PlannedSite {
            vaddr,
            file_offset: region.file_offset + insn.offset,
            kind: insn.class,
            region: g,
            run: r,
            position: p,
            added_fence: goal.added_fence,
            strategy: Strategy::Skip,
            reason: None,
            inplace: None,
            detour: None,
        };

        if let Some(k) = detours.iter().position(|d| vaddr >= d.span_vaddr && vaddr < d.span_end()) {
            site.strategy = Strategy::Detour;
            site.detour = Some(k);
        } else if insn.class == InstrClass::Clflushopt {
            // clflushopt and clwb differ only in the ModRM reg field.
            let mut bytes = insn.bytes(raw).to_vec();
            let m = usize::from(insn.layout.modrm.expect("flush has ModRM"));
            bytes[m] = (bytes[m] & 0xC7) | (6 << 3);
            site.strategy = Strategy::Inplace;
            site.inplace = Some(bytes);
        } else {
            let tramp_vaddr = seg_vaddr + cursor as u64;
            let ctx = DetourCtx { run, pos: p, raw, region_vaddr: region.vaddr, targets: &targets, opts: &opts };
            match build_detour(&ctx, tramp_vaddr) {
                Ok(mut d) => {
                    d.span_file_offset = region.file_offset + insn.offset;
                    d.segment_offset = cursor;
                    cursor += d.trampoline.len();
                    site.strategy = Strategy::Detour;
                    site.detour = Some(detours.len());
                    detours.push(d);
                }
                Err(reason) => site.reason = Some(reason),
            }
        }
        sites.push(site);
    }

    let segment = (!detours.is_empty()).then_some(SegmentLayout {
        vaddr: seg_vaddr,
        file_offset: seg_file_offset,
        phnum,
        code_offset,
        size: cursor as u64,
    });
    PatchPlan { options: opts, sites, detours, segment, sweeps }
}

struct DetourCtx<'a> {
    run: &'a Run,
    pos: usize,
    raw: &'a [u8],
    region_vaddr: u64,
    targets: &'a BTreeSet<u64>,
    opts: &'a PatchOptions,
}

fn build_detour(ctx: &DetourCtx<'_>, tramp_vaddr: u64) -> Result<Detour, SkipReason> {
    let insns = &ctx.run.instructions;
    let start = &insns[ctx.pos];
    let span_vaddr = ctx.region_vaddr + start.offset as u64;

    let mut end = ctx.pos;
    let mut span_len = 0;
    while span_len < JMP_LEN {
        let Some(i) = insns.get(end) else {
            return Err(match ctx.run.end {
                RunEnd::AnchorOverlap | RunEnd::Undecodable => SkipReason::UndecodableContext,
                RunEnd::Anchor | RunEnd::RegionEnd => SkipReason::SpanTooShort,
            });
        };
        if i.class == InstrClass::Undecodable {
            return Err(SkipReason::UndecodableContext);
        }
        span_len += i.length;
        end += 1;
    }
    let span_end = span_vaddr + span_len as u64;
    if ctx.targets.range(span_vaddr + 1..span_end).next().is_some() {
        return Err(SkipReason::BranchTargetInside);
    }
    if insns[ctx.pos + 1..end].iter().any(|i| i.class == InstrClass::DirectBranch) {
        return Err(SkipReason::RelocationUnsupported);
    }

    let mut trampoline = Vec::new();
    let mut pieces = Vec::new();
    for (k, insn) in insns.iter().enumerate().take(end).skip(ctx.pos) {
        let orig_vaddr = ctx.region_vaddr + insn.offset as u64;
        let orig_end = orig_vaddr + insn.length as u64;
        let at = trampoline.len();
        let here = tramp_vaddr + at as u64;
        let rewritten = is_target_flush(insn.class, ctx.opts);
        if rewritten {
            let g = goal(ctx.run, k, ctx.raw, ctx.opts);
            let mut bytes = g.clwb.bytes;
            if let Some(d) = g.clwb.rip_disp_at {
                let old = read_i32(insn.bytes(ctx.raw), insn.length - 4);
                let new = rebase(orig_end, old, here + bytes.len() as u64)?;
                bytes[d..d + 4].copy_from_slice(&new.to_le_bytes());
            }
            if g.added_fence {
                bytes.extend_from_slice(&x86::SFENCE);
            }
            trampoline.extend_from_slice(&bytes);
        } else {
            let mut bytes = insn.bytes(ctx.raw).to_vec();
            if insn.rip_relative {
                let d = usize::from(insn.layout.disp);
                let old = read_i32(&bytes, d);
                let new = rebase(orig_end, old, here + bytes.len() as u64)?;
                bytes[d..d + 4].copy_from_slice(&new.to_le_bytes());
            }
            trampoline.extend_from_slice(&bytes);
        }
        pieces.push(Piece {
            orig_vaddr,
            orig_len: insn.length,
            tramp_offset: at,
            tramp_len: trampoline.len() - at,
            rewritten,
        });
    }
    let back_from = tramp_vaddr + trampoline.len() as u64;
    trampoline.extend_from_slice(&x86::jmp_rel32(back_from, span_end).ok_or(SkipReason::Rel32OutOfRange)?);
    let mut site_bytes = x86::jmp_rel32(span_vaddr, tramp_vaddr).ok_or(SkipReason::Rel32OutOfRange)?.to_vec();
    site_bytes.resize(span_len, x86::INT3);

    Ok(Detour {
        span_vaddr,
        span_len,
        span_file_offset: 0,
        trampoline_vaddr: tramp_vaddr,
        segment_offset: 0,
        trampoline,
        site_bytes,
        pieces,
    })
}

fn read_i32(bytes: &[u8], at: usize) -> i32 {
    i32::from_le_bytes(bytes[at..at + 4].try_into().expect("four bytes"))
}

/// Displacement reaching the same absolute address from a new instruction end.
fn rebase(old_end: u64, old_disp: i32, new_end: u64) -> Result<i32, SkipReason> {
    let target = old_end as i128 + i128::from(old_disp);
    i32::try_from(target - new_end as i128).map_err(|_| SkipReason::RelocationUnsupported)
}
