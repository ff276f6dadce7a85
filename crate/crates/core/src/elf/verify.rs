//! Re-disassembly check of a patched image against its plan.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::Serialize;

use super::apply::relocated_phdrs;
use super::image::{ElfImage, E_PHNUM_AT, E_PHOFF_AT, EHDR_SIZE};
use super::plan::{PatchPlan, Strategy};
use super::report::PatchReport;
use crate::rewrite::{rewrite_ops, RewriteRule};
use crate::trace::{FenceKind, FlushKind, TraceOp};
use crate::x86::{self, DecodedInstruction, InstrClass, INT3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureKind {
    Header,
    ProgramHeaders,
    UntouchedBytes,
    FileLength,
    SiteBytes,
    JumpTarget,
    TrampolineBytes,
    TrampolineDecode,
    Projection,
    Accounting,
}

impl fmt::Display for FailureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FailureKind::Header => "header",
            FailureKind::ProgramHeaders => "program-headers",
            FailureKind::UntouchedBytes => "untouched-bytes",
            FailureKind::FileLength => "file-length",
            FailureKind::SiteBytes => "site-bytes",
            FailureKind::JumpTarget => "jump-target",
            FailureKind::TrampolineBytes => "trampoline-bytes",
            FailureKind::TrampolineDecode => "trampoline-decode",
            FailureKind::Projection => "projection",
            FailureKind::Accounting => "accounting",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct VerifyFailure {
    pub kind: FailureKind,
    /// Site address, when the failure belongs to a site.
    #[serde(serialize_with = "hex_opt")]
    pub vaddr: Option<u64>,
    pub detail: String,
}

fn hex_opt<S: serde::Serializer>(v: &Option<u64>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        Some(v) => s.serialize_str(&format!("{v:#x}")),
        None => s.serialize_none(),
    }
}

impl fmt::Display for VerifyFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.vaddr {
            Some(v) => write!(f, "{} at {v:#x}: {}", self.kind, self.detail),
            None => write!(f, "{}: {}", self.kind, self.detail),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct VerifyReport {
    pub sites_checked: usize,
    pub patched: usize,
    pub failures: Vec<VerifyFailure>,
}

impl VerifyReport {
    pub fn is_ok(&self) -> bool {
        self.failures.is_empty()
    }

    fn fail(&mut self, kind: FailureKind, vaddr: Option<u64>, detail: impl Into<String>) {
        self.failures.push(VerifyFailure { kind, vaddr, detail: detail.into() });
    }
}

/// Most byte-difference failures reported before giving up on a range.
const MAX_BYTE_FAILURES: usize = 8;

/// Checks that `patched` is `original` with exactly `plan` applied, and that
/// every patched site projects to the rewritten trace of its original.
pub fn verify_patch(original: &ElfImage, patched: &ElfImage, plan: &PatchPlan) -> VerifyReport {
    let mut report = VerifyReport { sites_checked: plan.sites.len(), patched: plan.patched(), failures: Vec::new() };
    check_accounting(plan, &mut report);
    check_headers(original, patched, plan, &mut report);
    check_untouched(original, patched, plan, &mut report);

    for site in plan.sites.iter().filter(|s| s.strategy == Strategy::Inplace) {
        let orig_insn = plan.instruction(site);
        let Some(bytes) = patched.read_vaddr(site.vaddr, orig_insn.length) else {
            report.fail(FailureKind::SiteBytes, Some(site.vaddr), "site is not file-backed");
            continue;
        };
        let now = x86::decode_one(bytes, 0).expect("non-empty");
        if now.class != InstrClass::Clwb || now.length != orig_insn.length {
            report.fail(
                FailureKind::SiteBytes,
                Some(site.vaddr),
                format!("expected clwb of length {}, found {} of length {}", orig_insn.length, now.class, now.length),
            );
            continue;
        }
        let mut keys = Keys::default();
        let expected = expected_ops(original, plan, site.region, site.run, site.position, 1, &mut keys);
        let got = vec![keys.project(&now, bytes, site.vaddr)];
        if expected != got {
            report.fail(FailureKind::Projection, Some(site.vaddr), format!("expected {expected:?}, found {got:?}"));
        }
    }

    for (k, d) in plan.detours.iter().enumerate() {
        let host = plan.sites.iter().find(|s| s.detour == Some(k)).expect("detour has a site");
        let at = Some(d.span_vaddr);
        let Some(site_bytes) = patched.read_vaddr(d.span_vaddr, d.span_len) else {
            report.fail(FailureKind::SiteBytes, at, "span is not file-backed");
            continue;
        };
        let jmp = x86::decode_one(site_bytes, 0).expect("non-empty");
        if jmp.class != InstrClass::DirectBranch || site_bytes[0] != 0xE9 {
            report.fail(FailureKind::SiteBytes, at, format!("expected jmp rel32, found {}", jmp.class));
            continue;
        }
        if target(&jmp, d.span_vaddr) != Some(d.trampoline_vaddr) {
            report.fail(FailureKind::JumpTarget, at, format!("site jump does not reach {:#x}", d.trampoline_vaddr));
        }
        if site_bytes[5..].iter().any(|&b| b != INT3) {
            report.fail(FailureKind::SiteBytes, at, "span padding is not int3");
        }

        let Some(tramp) = patched.read_vaddr(d.trampoline_vaddr, d.trampoline.len()) else {
            report.fail(FailureKind::TrampolineDecode, at, "trampoline is not mapped");
            continue;
        };
        if tramp != d.trampoline.as_slice() {
            let off = tramp.iter().zip(&d.trampoline).position(|(a, b)| a != b).unwrap_or(0);
            report.fail(
                FailureKind::TrampolineBytes,
                at,
                format!("trampoline differs from plan at byte {off} ({:#x})", d.trampoline_vaddr + off as u64),
            );
        }

        let mut keys = Keys::default();
        let count = d.pieces.len();
        let expected = expected_ops(original, plan, host.region, host.run, host.position, count, &mut keys);
        let mut got = Vec::new();
        let mut pos = 0;
        let mut back = None;
        while pos < tramp.len() {
            let insn = x86::decode_one(tramp, pos).expect("in range");
            let vaddr = d.trampoline_vaddr + pos as u64;
            if insn.class == InstrClass::Undecodable {
                report.fail(FailureKind::TrampolineDecode, at, format!("undecodable byte at {vaddr:#x}"));
                break;
            }
            if insn.end() == tramp.len() {
                back = Some((insn.clone(), vaddr));
                break;
            }
            got.push(keys.project(&insn, insn.bytes(tramp), vaddr));
            pos = insn.end();
        }
        match back {
            Some((insn, vaddr)) if insn.class == InstrClass::DirectBranch => {
                if target(&insn, vaddr - insn.offset as u64) != Some(d.span_end()) {
                    report.fail(FailureKind::JumpTarget, at, format!("jump back does not reach {:#x}", d.span_end()));
                }
            }
            Some(_) => report.fail(FailureKind::TrampolineDecode, at, "trampoline does not end in a jump back"),
            None => {
                if !report.failures.iter().any(|f| f.vaddr == at && f.kind == FailureKind::TrampolineDecode) {
                    report.fail(FailureKind::TrampolineDecode, at, "trampoline overruns its planned length");
                }
            }
        }
        if expected != got {
            report.fail(FailureKind::Projection, at, format!("expected {expected:?}, found {got:?}"));
        }
    }
    report
}

/// Checks a serialized report against the plan it claims to describe.
pub fn check_report(plan: &PatchPlan, patch_report: &PatchReport) -> Vec<VerifyFailure> {
    let mut r = VerifyReport::default();
    let expected = PatchReport::from_plan(plan);
    if patch_report.patched + patch_report.skipped != patch_report.sites.len() {
        r.fail(FailureKind::Accounting, None, "report counts do not add up to its site list");
    }
    if patch_report.sites != expected.sites {
        r.fail(FailureKind::Accounting, None, "report sites differ from the plan");
    }
    if patch_report.segment != expected.segment {
        r.fail(FailureKind::Accounting, None, "report segment differs from the plan");
    }
    r.failures
}

fn check_accounting(plan: &PatchPlan, report: &mut VerifyReport) {
    let found: usize = plan.sweeps.iter().map(|s| x86::find_flush_sites(s, plan.options.patch_clflushopt).len()).sum();
    if found != plan.sites.len() {
        report.fail(FailureKind::Accounting, None, format!("{found} sites found, {} planned", plan.sites.len()));
    }
    let unique: BTreeSet<u64> = plan.sites.iter().map(|s| s.vaddr).collect();
    if unique.len() != plan.sites.len() {
        report.fail(FailureKind::Accounting, None, "a site is planned more than once");
    }
    for s in &plan.sites {
        let consistent = match s.strategy {
            Strategy::Skip => s.reason.is_some() && s.detour.is_none() && s.inplace.is_none(),
            Strategy::Inplace => s.inplace.is_some() && s.detour.is_none(),
            Strategy::Detour => s.detour.is_some_and(|k| k < plan.detours.len()) && s.inplace.is_none(),
        };
        if !consistent {
            report.fail(FailureKind::Accounting, Some(s.vaddr), format!("inconsistent {} entry", s.strategy));
        }
    }
}

fn check_headers(original: &ElfImage, patched: &ElfImage, plan: &PatchPlan, report: &mut VerifyReport) {
    let (o, p) = (original.bytes(), patched.bytes());
    let skip = |i: usize| (E_PHOFF_AT..E_PHOFF_AT + 8).contains(&i) || (E_PHNUM_AT..E_PHNUM_AT + 2).contains(&i);
    if (0..EHDR_SIZE).any(|i| !skip(i) && o[i] != p[i]) {
        report.fail(FailureKind::Header, None, "ELF header changed outside e_phoff/e_phnum");
    }
    match plan.segment {
        None => {
            if patched.header().e_phoff != original.header().e_phoff
                || patched.header().e_phnum != original.header().e_phnum
            {
                report.fail(FailureKind::Header, None, "program-header table moved without an injected segment");
            }
        }
        Some(seg) => {
            if patched.header().e_phoff != seg.file_offset || usize::from(patched.header().e_phnum) != seg.phnum {
                report.fail(FailureKind::Header, None, "e_phoff/e_phnum do not point at the relocated table");
            }
            if patched.program_headers() != relocated_phdrs(original, &seg).as_slice() {
                report.fail(FailureKind::ProgramHeaders, None, "relocated program headers differ from the plan");
            }
        }
    }
}

fn check_untouched(original: &ElfImage, patched: &ElfImage, plan: &PatchPlan, report: &mut VerifyReport) {
    let (o, p) = (original.bytes(), patched.bytes());
    let mut allowed: Vec<(usize, usize)> = vec![(E_PHOFF_AT, 8), (E_PHNUM_AT, 2)];
    allowed.extend(plan.sites.iter().filter_map(|s| s.inplace.as_ref().map(|b| (s.file_offset, b.len()))));
    allowed.extend(plan.detours.iter().map(|d| (d.span_file_offset, d.span_len)));
    let editable = |i: usize| allowed.iter().any(|&(at, len)| i >= at && i < at + len);

    let expected_len = plan.segment.map_or(o.len(), |s| (s.file_offset + s.size) as usize);
    if p.len() != expected_len {
        report.fail(FailureKind::FileLength, None, format!("expected {expected_len} bytes, found {}", p.len()));
    }
    let mut reported = 0;
    for i in 0..o.len().min(p.len()) {
        if o[i] != p[i] && !editable(i) {
            report.fail(FailureKind::UntouchedBytes, None, format!("byte at file offset {i:#x} changed"));
            reported += 1;
            if reported == MAX_BYTE_FAILURES {
                break;
            }
        }
    }
    if let Some(seg) = plan.segment {
        let gap = o.len()..(seg.file_offset as usize).min(p.len());
        if p[gap].iter().any(|&b| b != 0) {
            report.fail(FailureKind::UntouchedBytes, None, "padding before the injected segment is not zero");
        }
    }
}

fn target(insn: &DecodedInstruction, buffer_vaddr: u64) -> Option<u64> {
    insn.branch_target.and_then(|t| u64::try_from(buffer_vaddr as i64 + t).ok())
}

/// Rewritten projection of `count` original instructions starting at
/// `position`, with the instructions after them as fence-lookahead context.
fn expected_ops(
    original: &ElfImage,
    plan: &PatchPlan,
    region: usize,
    run: usize,
    position: usize,
    count: usize,
    keys: &mut Keys,
) -> Vec<TraceOp> {
    let reg = &original.regions()[region];
    let raw = original.region_bytes(reg);
    let insns = &plan.sweeps[region].runs[run].instructions;
    let ctx_end = (position + count + plan.options.dedup_window).min(insns.len());
    let ops: Vec<TraceOp> = insns[position..ctx_end]
        .iter()
        .map(|i| keys.project(i, i.bytes(raw), reg.vaddr + i.offset as u64))
        .collect();
    let mut out = rewrite_ops(&ops, RewriteRule::ClflushToClwbSfence { dedup_window: plan.options.dedup_window });
    if plan.options.patch_clflushopt {
        let first: Vec<TraceOp> = out.iter().map(|(op, _)| *op).collect();
        out = rewrite_ops(&first, RewriteRule::ClflushoptToClwb).into_iter().map(|(op, i)| (op, out[i].1)).collect();
    }
    out.into_iter().filter(|&(_, origin)| origin < count).map(|(op, _)| op).collect()
}

/// Symbolic addresses for projected instructions: each distinct normalized
/// memory operand or opaque instruction gets its own cache line.
#[derive(Default)]
struct Keys {
    ids: HashMap<Vec<u8>, u64>,
}

impl Keys {
    fn id(&mut self, key: Vec<u8>) -> u64 {
        let next = (self.ids.len() as u64 + 1) * 64;
        *self.ids.entry(key).or_insert(next)
    }

    /// `raw` holds exactly the bytes of `insn`, which sits at `vaddr`.
    fn project(&mut self, insn: &DecodedInstruction, raw: &[u8], vaddr: u64) -> TraceOp {
        let raw = &raw[..insn.length];
        match insn.class {
            InstrClass::Clflush | InstrClass::Clflushopt | InstrClass::Clwb => {
                let kind = match insn.class {
                    InstrClass::Clflush => FlushKind::Clflush,
                    InstrClass::Clflushopt => FlushKind::Clflushopt,
                    _ => FlushKind::Clwb,
                };
                let mut key: Vec<u8> =
                    raw[..usize::from(insn.layout.prefixes)].iter().copied().filter(|&b| b != 0x66).collect();
                key.push(insn.layout.rex.map_or(0, |r| r & 0x03));
                key.extend(normalized_operand(insn, raw, vaddr));
                TraceOp::Flush { kind, addr: self.id(key) }
            }
            InstrClass::Sfence => TraceOp::Fence(FenceKind::Sfence),
            InstrClass::Mfence => TraceOp::Fence(FenceKind::Mfence),
            _ => {
                let mut key = vec![0xFF];
                if insn.rip_relative {
                    let d = usize::from(insn.layout.disp);
                    key.extend_from_slice(&raw[..d]);
                    key.extend_from_slice(&absolute(insn, raw, vaddr).to_le_bytes());
                    key.extend_from_slice(&raw[d + 4..]);
                } else {
                    key.extend_from_slice(raw);
                }
                TraceOp::Load { addr: self.id(key), size: 1 }
            }
        }
    }
}

/// ModRM (reg field cleared), SIB and displacement, with a RIP-relative
/// displacement replaced by the absolute address it reaches.
fn normalized_operand(insn: &DecodedInstruction, raw: &[u8], vaddr: u64) -> Vec<u8> {
    let mut out = vec![insn.operand_bytes[0] & 0xC7];
    if insn.rip_relative {
        out.extend_from_slice(&absolute(insn, raw, vaddr).to_le_bytes());
    } else {
        out.extend_from_slice(&insn.operand_bytes[1..]);
    }
    out
}

fn absolute(insn: &DecodedInstruction, raw: &[u8], vaddr: u64) -> u64 {
    let d = usize::from(insn.layout.disp);
    let disp = i32::from_le_bytes(raw[d..d + 4].try_into().expect("disp32"));
    (vaddr as i64 + insn.length as i64 + i64::from(disp)) as u64
}
