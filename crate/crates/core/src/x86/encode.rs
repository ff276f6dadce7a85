//! Byte patterns emitted by the rewriter.

use super::decode::{DecodedInstruction, InstrClass};

pub const SFENCE: [u8; 3] = [0x0F, 0xAE, 0xF8];
pub const INT3: u8 = 0xCC;

/// An encoded instruction and, when RIP-relative, where its disp32 sits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub bytes: Vec<u8>,
    pub rip_disp_at: Option<usize>,
}

/// Shortest form of each recognizer class, with `[rax]` as the memory
/// operand where there is one.
pub fn canonical(class: InstrClass) -> Option<&'static [u8]> {
    Some(match class {
        InstrClass::Clflush => &[0x0F, 0xAE, 0x38],
        InstrClass::Clflushopt => &[0x66, 0x0F, 0xAE, 0x38],
        InstrClass::Clwb => &[0x66, 0x0F, 0xAE, 0x30],
        InstrClass::Sfence => &SFENCE,
        InstrClass::Mfence => &[0x0F, 0xAE, 0xF0],
        InstrClass::Lfence => &[0x0F, 0xAE, 0xE8],
        InstrClass::DirectBranch => &[0xE9, 0, 0, 0, 0],
        InstrClass::Other => &[0x90],
        InstrClass::Undecodable => return None,
    })
}

/// `clwb` with the memory operand of `flush`, whose raw bytes are `raw`.
///
/// Legacy prefixes other than `66` and any REX are carried over; the ModRM
/// reg field becomes 6. The displacement is copied unchanged, so a
/// RIP-relative one must be re-adjusted by the caller.
pub fn clwb_from_flush(flush: &DecodedInstruction, raw: &[u8]) -> Encoded {
    assert!(flush.class.is_flush(), "not a flush: {}", flush.class);
    let prefixes = &raw[..usize::from(flush.layout.prefixes)];
    let mut bytes: Vec<u8> = prefixes.iter().copied().filter(|&b| b != 0x66).collect();
    bytes.push(0x66);
    bytes.extend(flush.layout.rex);
    bytes.extend_from_slice(&[0x0F, 0xAE]);
    let modrm = flush.operand_bytes[0];
    bytes.push((modrm & 0xC7) | (6 << 3));
    bytes.extend_from_slice(&flush.operand_bytes[1..]);
    let rip_disp_at = flush.rip_relative.then(|| bytes.len() - 4);
    Encoded { bytes, rip_disp_at }
}

/// `jmp rel32` placed at `from`, landing on `to`. `None` when out of range.
pub fn jmp_rel32(from: u64, to: u64) -> Option<[u8; 5]> {
    let rel = i64::try_from(to).ok()? - i64::try_from(from).ok()? - 5;
    let rel = i32::try_from(rel).ok()?;
    let mut out = [0xE9, 0, 0, 0, 0];
    out[1..].copy_from_slice(&rel.to_le_bytes());
    Some(out)
}
