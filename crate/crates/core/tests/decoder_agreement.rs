//! Instruction lengths and recognizer classes agree with iced-x86 on every
//! instruction the sweep produces from the compiled corpus.

use iced_x86::{Decoder, DecoderOptions, FlowControl, Instruction, Mnemonic, OpKind};
use pmpatch_core::elf::load_elf;
use pmpatch_core::x86::{branch_targets, find_flush_sites, linear_sweep, InstrClass};

fn reference_class(i: &Instruction) -> InstrClass {
    if i.is_invalid() {
        return InstrClass::Undecodable;
    }
    match i.mnemonic() {
        Mnemonic::Clflush => return InstrClass::Clflush,
        Mnemonic::Clflushopt => return InstrClass::Clflushopt,
        Mnemonic::Clwb => return InstrClass::Clwb,
        Mnemonic::Sfence => return InstrClass::Sfence,
        Mnemonic::Mfence => return InstrClass::Mfence,
        Mnemonic::Lfence => return InstrClass::Lfence,
        _ => {}
    }
    let near = matches!(i.op0_kind(), OpKind::NearBranch16 | OpKind::NearBranch32 | OpKind::NearBranch64);
    let flow = matches!(
        i.flow_control(),
        FlowControl::UnconditionalBranch | FlowControl::ConditionalBranch | FlowControl::Call
    );
    if near && flow {
        InstrClass::DirectBranch
    } else {
        InstrClass::Other
    }
}

#[test]
fn corpus_agreement_is_total() {
    let bins = pmpatch_fixtures::corpus_binaries();
    assert!(bins.len() >= 5);
    let mut total = 0;
    let mut flushes = 0;
    for path in &bins {
        let img = load_elf(path).unwrap();
        for region in img.regions() {
            let bytes = img.region_bytes(region);
            let sweep = linear_sweep(bytes, &region.anchors);
            for insn in sweep.instructions() {
                let mut d = Decoder::with_ip(64, &bytes[insn.offset..], region.vaddr + insn.offset as u64, DecoderOptions::NONE);
                let r = d.decode();
                let class = reference_class(&r);
                assert_eq!(insn.class, class, "{} {}+{:#x}", path.display(), region.name, insn.offset);
                if class != InstrClass::Undecodable {
                    assert_eq!(insn.length, r.len(), "{} {}+{:#x}", path.display(), region.name, insn.offset);
                }
                if class == InstrClass::DirectBranch {
                    let target = region.vaddr as i64 + insn.branch_target.unwrap();
                    assert_eq!(target as u64, r.near_branch_target());
                }
                if insn.class.is_flush() {
                    flushes += 1;
                    let m = r.memory_base();
                    assert_ne!(m, iced_x86::Register::None, "flush without a memory base");
                }
                total += 1;
            }
        }
    }
    assert!(total >= 200, "only {total} instructions");
    assert!(flushes > 0);
}

#[test]
fn sweep_tiles_each_run() {
    for path in pmpatch_fixtures::corpus_binaries() {
        let img = load_elf(&path).unwrap();
        for region in img.regions() {
            let sweep = linear_sweep(img.region_bytes(region), &region.anchors);
            for run in &sweep.runs {
                let mut at = run.anchor;
                for i in &run.instructions {
                    assert_eq!(i.offset, at);
                    at += i.length;
                }
            }
        }
    }
}

#[test]
fn zero_padding_has_no_recognizer_hits() {
    let zeros = [0u8; 33];
    let sweep = linear_sweep(&zeros, &[0]);
    let insns: Vec<_> = sweep.instructions().collect();
    // `00 00` is `add [rax], al`; the odd trailing byte is cut off.
    assert_eq!(insns.len(), 17);
    assert!(insns[..16].iter().all(|i| i.class == InstrClass::Other && i.length == 2));
    assert_eq!(insns[16].class, InstrClass::Undecodable);
    let mut d = Decoder::new(64, &zeros, DecoderOptions::NONE);
    assert_eq!(d.decode().mnemonic(), Mnemonic::Add);
    assert!(find_flush_sites(&sweep, true).is_empty());
}

#[test]
fn call_and_jcc_targets_match_reference() {
    // call +0x10 ; jne -4
    let code = [0xE8, 0x10, 0, 0, 0, 0x75, 0xFC];
    let sweep = linear_sweep(&code, &[0]);
    let ours = branch_targets(sweep.instructions());
    let theirs: std::collections::BTreeSet<usize> = Decoder::with_ip(64, &code, 0, DecoderOptions::NONE)
        .into_iter()
        .map(|i| i.near_branch_target() as usize)
        .collect();
    assert_eq!(ours, theirs);
    assert_eq!(ours.len(), 2);
}
