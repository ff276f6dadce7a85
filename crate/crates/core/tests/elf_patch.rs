//! End-to-end planning, patching and verification on hand-assembled
//! fixtures and the compiled corpus.

use std::os::unix::fs::PermissionsExt;
use std::path::Path;
use std::process::Command;

use iced_x86::{Decoder, DecoderOptions, Mnemonic};
use pmpatch_core::elf::{
    apply_patches, load_elf, plan_patches, verify_patch, ElfImage, FailureKind, PatchOptions, PatchPlan, SkipReason,
    Strategy,
};
use pmpatch_fixtures as fx;

fn image(bytes: &[u8]) -> ElfImage {
    ElfImage::parse(bytes.to_vec()).expect("fixture parses")
}

fn patch(bytes: &[u8], opts: PatchOptions) -> (PatchPlan, Vec<u8>) {
    let img = image(bytes);
    let plan = plan_patches(&img, opts);
    let (out, report) = apply_patches(&img, &plan);
    assert_eq!(report.patched + report.skipped, report.sites.len());
    let verdict = verify_patch(&img, &image(&out), &plan);
    assert!(verdict.is_ok(), "{:#?}", verdict.failures);
    (plan, out)
}

fn strategies(plan: &PatchPlan) -> Vec<(Strategy, Option<SkipReason>)> {
    plan.sites.iter().map(|s| (s.strategy, s.reason)).collect()
}

fn run(bytes: &[u8]) -> std::process::Output {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("prog");
    std::fs::write(&path, bytes).unwrap();
    std::fs::set_permissions(&path, std::fs::Permissions::from_mode(0o755)).unwrap();
    Command::new(&path).output().unwrap()
}

fn iced_mnemonics(bytes: &[u8], ip: u64) -> Vec<Mnemonic> {
    Decoder::with_ip(64, bytes, ip, DecoderOptions::NONE).into_iter().map(|i| i.mnemonic()).collect()
}

#[test]
fn flush_followed_by_fence_gets_no_extra_fence() {
    let f = fx::flush_then_fence();
    let (plan, out) = patch(&f.elf, PatchOptions::default());
    assert_eq!(strategies(&plan), vec![(Strategy::Detour, None)]);
    assert!(!plan.sites[0].added_fence);
    let d = &plan.detours[0];
    // clwb [rdi] ; displaced sfence ; jmp back
    assert_eq!(iced_mnemonics(&d.trampoline, d.trampoline_vaddr), vec![Mnemonic::Clwb, Mnemonic::Sfence, Mnemonic::Jmp]);
    assert_eq!(run(&out).status.code(), f.exit_code);
}

#[test]
fn distant_fence_is_not_seen_with_window_one() {
    let f = fx::flush_mov_fence();
    let (plan, out) = patch(&f.elf, PatchOptions::default());
    assert_eq!(strategies(&plan), vec![(Strategy::Detour, None)]);
    assert!(plan.sites[0].added_fence);
    let d = &plan.detours[0];
    assert_eq!(
        iced_mnemonics(&d.trampoline, d.trampoline_vaddr),
        vec![Mnemonic::Clwb, Mnemonic::Sfence, Mnemonic::Mov, Mnemonic::Jmp]
    );
    assert_eq!(run(&out).status.code(), f.exit_code);

    let (plan, _) = patch(&f.elf, PatchOptions { dedup_window: 2, ..PatchOptions::default() });
    assert!(!plan.sites[0].added_fence);
}

#[test]
fn trampoline_layout_matches_reference_disassembly() {
    let f = fx::flush_then_fence();
    let img = image(&f.elf);
    let plan = plan_patches(&img, PatchOptions::default());
    let (out, _) = apply_patches(&img, &plan);
    let patched = image(&out);
    let d = &plan.detours[0];
    let site = patched.read_vaddr(d.span_vaddr, d.span_len).unwrap();
    let jmp = Decoder::with_ip(64, site, d.span_vaddr, DecoderOptions::NONE).decode();
    assert_eq!((jmp.mnemonic(), jmp.near_branch_target()), (Mnemonic::Jmp, d.trampoline_vaddr));
    assert!(site[5..].iter().all(|&b| b == 0xCC));

    let tramp = patched.read_vaddr(d.trampoline_vaddr, d.trampoline.len()).unwrap();
    let insns: Vec<_> = Decoder::with_ip(64, tramp, d.trampoline_vaddr, DecoderOptions::NONE).into_iter().collect();
    assert_eq!(insns[0].mnemonic(), Mnemonic::Clwb);
    let orig_flush = Decoder::with_ip(64, img.read_vaddr(d.span_vaddr, 3).unwrap(), 0, DecoderOptions::NONE).decode();
    assert_eq!(insns[0].memory_base(), orig_flush.memory_base());
    let last = insns.last().unwrap();
    assert_eq!((last.mnemonic(), last.near_branch_target()), (Mnemonic::Jmp, d.span_end()));
}

#[test]
fn branch_target_inside_span_is_skipped() {
    let f = fx::branch_target_inside();
    let (plan, out) = patch(&f.elf, PatchOptions::default());
    assert_eq!(strategies(&plan), vec![(Strategy::Skip, Some(SkipReason::BranchTargetInside))]);
    assert!(plan.segment.is_none());
    assert_eq!(out, f.elf);
    assert_eq!(run(&out).status.code(), f.exit_code);
}

#[test]
fn clflushopt_is_opt_in_and_inplace() {
    let f = fx::clflushopt_site();
    let (plan, out) = patch(&f.elf, PatchOptions::default());
    assert!(plan.sites.is_empty());
    assert_eq!(out, f.elf);

    let (plan, out) = patch(&f.elf, PatchOptions { patch_clflushopt: true, ..PatchOptions::default() });
    assert_eq!(strategies(&plan), vec![(Strategy::Inplace, None)]);
    assert!(plan.segment.is_none());
    assert_eq!(out.len(), f.elf.len());
    let diffs: Vec<usize> = (0..out.len()).filter(|&i| out[i] != f.elf[i]).collect();
    assert_eq!(diffs.len(), 1);
    assert_eq!((out[diffs[0]] ^ f.elf[diffs[0]]).count_ones(), 1);

    let at = plan.sites[0].file_offset;
    let before = Decoder::with_ip(64, &f.elf[at..at + 4], 0, DecoderOptions::NONE).decode();
    let after = Decoder::with_ip(64, &out[at..at + 4], 0, DecoderOptions::NONE).decode();
    assert_eq!((before.mnemonic(), after.mnemonic()), (Mnemonic::Clflushopt, Mnemonic::Clwb));
    assert_eq!((before.len(), before.memory_base()), (after.len(), after.memory_base()));
    assert_eq!(run(&out).status.code(), f.exit_code);
}

#[test]
fn short_span_call_and_undecodable_are_skipped() {
    for (f, reason) in [
        (fx::span_too_short(), SkipReason::SpanTooShort),
        (fx::call_in_span(), SkipReason::RelocationUnsupported),
        (fx::undecodable_after_flush(), SkipReason::UndecodableContext),
        (fx::far_segment(), SkipReason::Rel32OutOfRange),
    ] {
        let (plan, out) = patch(&f.elf, PatchOptions::default());
        assert_eq!(strategies(&plan), vec![(Strategy::Skip, Some(reason))], "{}", f.name);
        assert_eq!(out, f.elf, "{}", f.name);
        if f.exit_code.is_some() {
            assert_eq!(run(&out).status.code(), f.exit_code, "{}", f.name);
        }
    }
}

#[test]
fn rip_relative_operands_are_rebased() {
    let f = fx::rip_relative();
    let (plan, out) = patch(&f.elf, PatchOptions::default());
    assert_eq!(strategies(&plan), vec![(Strategy::Detour, None), (Strategy::Detour, None)]);
    let first = &plan.detours[0];
    let insns: Vec<_> =
        Decoder::with_ip(64, &first.trampoline, first.trampoline_vaddr, DecoderOptions::NONE).into_iter().collect();
    let mov = insns.iter().find(|i| i.mnemonic() == Mnemonic::Mov).unwrap();
    assert_eq!(mov.memory_displacement64(), fx::DATA_BASE);
    let second = &plan.detours[1];
    let clwb = Decoder::with_ip(64, &second.trampoline, second.trampoline_vaddr, DecoderOptions::NONE).decode();
    assert_eq!((clwb.mnemonic(), clwb.memory_displacement64()), (Mnemonic::Clwb, fx::DATA_BASE + 0x40));
    assert_eq!(run(&out).status.code(), f.exit_code);
}

#[test]
fn adjacent_flushes_share_a_trampoline() {
    let f = fx::adjacent_clflushes();
    let (plan, out) = patch(&f.elf, PatchOptions::default());
    assert_eq!(strategies(&plan), vec![(Strategy::Detour, None), (Strategy::Detour, None)]);
    assert_eq!(plan.detours.len(), 1);
    assert_eq!(plan.sites[0].detour, plan.sites[1].detour);
    // First clwb gets a fence (next is a flush), second reuses the mfence.
    assert!(plan.sites[0].added_fence);
    assert!(!plan.sites[1].added_fence);
    let d = &plan.detours[0];
    assert_eq!(
        iced_mnemonics(&d.trampoline, d.trampoline_vaddr),
        vec![Mnemonic::Clwb, Mnemonic::Sfence, Mnemonic::Clwb, Mnemonic::Jmp]
    );
    assert_eq!(run(&out).status.code(), f.exit_code);
}

#[test]
fn no_flushes_is_byte_identical() {
    let f = fx::no_flushes();
    let (plan, out) = patch(&f.elf, PatchOptions::default());
    assert!(plan.sites.is_empty() && plan.segment.is_none());
    assert_eq!(out, f.elf);
}

#[test]
fn stripped_binary_falls_back_to_segments() {
    let f = fx::stripped();
    let img = image(&f.elf);
    assert!(img.sections().is_empty());
    assert_eq!(img.regions().len(), 1);
    let (plan, out) = patch(&f.elf, PatchOptions::default());
    assert_eq!(strategies(&plan), vec![(Strategy::Detour, None)]);
    assert_eq!(run(&out).status.code(), f.exit_code);
}

#[test]
fn original_against_itself_verifies_with_no_patches() {
    let f = fx::branch_target_inside();
    let img = image(&f.elf);
    let plan = plan_patches(&img, PatchOptions::default());
    assert_eq!(plan.patched(), 0);
    assert!(verify_patch(&img, &img, &plan).is_ok());
}

#[test]
fn corrupted_trampoline_fails_at_its_site() {
    let f = fx::flush_mov_fence();
    let img = image(&f.elf);
    let plan = plan_patches(&img, PatchOptions::default());
    let (mut out, _) = apply_patches(&img, &plan);
    let d = &plan.detours[0];
    let seg = plan.segment.unwrap();
    // Turn the clwb ModRM reg field into clflushopt.
    let at = (seg.file_offset as usize) + d.segment_offset + 3;
    assert_eq!(out[at], 0x37);
    out[at] = 0x3F;
    let v = verify_patch(&img, &image(&out), &plan);
    assert!(!v.is_ok());
    assert!(v.failures.iter().all(|x| x.vaddr == Some(d.span_vaddr)), "{:#?}", v.failures);
    assert!(v.failures.iter().any(|x| x.kind == FailureKind::Projection));
    assert!(v.failures.iter().any(|x| x.kind == FailureKind::TrampolineBytes));
}

#[test]
fn stray_byte_change_is_reported() {
    let f = fx::flush_then_fence();
    let img = image(&f.elf);
    let plan = plan_patches(&img, PatchOptions::default());
    let (mut out, _) = apply_patches(&img, &plan);
    out[0x2010] ^= 1;
    let v = verify_patch(&img, &image(&out), &plan);
    assert!(v.failures.iter().any(|x| x.kind == FailureKind::UntouchedBytes), "{:#?}", v.failures);
}

#[test]
fn all_fixtures_run_the_same_after_patching() {
    for f in fx::all() {
        let Some(code) = f.exit_code else { continue };
        assert_eq!(run(&f.elf).status.code(), Some(code), "{} unpatched", f.name);
        for opts in [PatchOptions::default(), PatchOptions { patch_clflushopt: true, dedup_window: 1 }] {
            let (_, out) = patch(&f.elf, opts);
            assert_eq!(run(&out).status.code(), Some(code), "{} patched", f.name);
        }
    }
}

fn corpus() -> Vec<std::path::PathBuf> {
    let bins = fx::corpus_binaries();
    assert!(bins.len() >= 5, "corpus missing: run crates/fixtures/corpus/build.sh");
    bins
}

fn run_path(path: &Path) -> std::process::Output {
    Command::new(path).output().unwrap()
}

#[test]
fn corpus_binaries_behave_identically_after_patching() {
    for path in corpus() {
        let img = load_elf(&path).unwrap();
        for opts in [PatchOptions::default(), PatchOptions { patch_clflushopt: true, dedup_window: 1 }] {
            let plan = plan_patches(&img, opts);
            assert!(plan.sites.iter().any(|s| s.is_patched()), "{}: nothing patched", path.display());
            let (out, _) = apply_patches(&img, &plan);
            let v = verify_patch(&img, &image(&out), &plan);
            assert!(v.is_ok(), "{}: {:#?}", path.display(), v.failures);
            let before = run_path(&path);
            let after = run(&out);
            assert!(before.status.success());
            assert_eq!(before.stdout, after.stdout, "{}", path.display());
            assert_eq!(before.status.code(), after.status.code(), "{}", path.display());
        }
    }
}

#[test]
fn patching_twice_changes_nothing() {
    for path in corpus() {
        let img = load_elf(&path).unwrap();
        let plan = plan_patches(&img, PatchOptions::default());
        let (once, _) = apply_patches(&img, &plan);
        let again = plan_patches(&image(&once), PatchOptions::default());
        // Only the skipped sites are found again, and they stay skipped.
        assert_eq!(again.sites.len(), plan.skipped(), "{}", path.display());
        assert!(again.sites.iter().all(|s| s.strategy == Strategy::Skip));
        let (twice, _) = apply_patches(&image(&once), &again);
        assert_eq!(once, twice, "{}", path.display());
    }
}
