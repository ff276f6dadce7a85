//! Single-instruction length decoder.

use std::fmt;

use serde::Serialize;
use thiserror::Error;

use super::tables::{self, Entry, Imm};

/// Architectural maximum instruction length.
pub const MAX_INSN_LEN: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum InstrClass {
    Clflush,
    Clflushopt,
    Clwb,
    Sfence,
    Mfence,
    Lfence,
    DirectBranch,
    Other,
    Undecodable,
}

impl InstrClass {
    pub fn is_flush(self) -> bool {
        matches!(self, InstrClass::Clflush | InstrClass::Clflushopt | InstrClass::Clwb)
    }

    /// Fences that order flushes. `lfence` does not.
    pub fn is_persist_fence(self) -> bool {
        matches!(self, InstrClass::Sfence | InstrClass::Mfence)
    }

    pub fn name(self) -> &'static str {
        match self {
            InstrClass::Clflush => "clflush",
            InstrClass::Clflushopt => "clflushopt",
            InstrClass::Clwb => "clwb",
            InstrClass::Sfence => "sfence",
            InstrClass::Mfence => "mfence",
            InstrClass::Lfence => "lfence",
            InstrClass::DirectBranch => "direct-branch",
            InstrClass::Other => "other",
            InstrClass::Undecodable => "undecodable",
        }
    }
}

impl fmt::Display for InstrClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Where the parts of an instruction sit, as offsets from its first byte.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct Layout {
    /// Number of legacy prefix bytes.
    pub prefixes: u8,
    /// REX byte, when one is in effect.
    pub rex: Option<u8>,
    /// Offset of the first opcode byte (after prefixes, REX or VEX/EVEX payload).
    pub opcode: u8,
    pub modrm: Option<u8>,
    pub disp: u8,
    pub disp_len: u8,
    pub imm: u8,
    pub imm_len: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DecodedInstruction {
    pub offset: usize,
    pub length: usize,
    pub class: InstrClass,
    /// ModRM, SIB and displacement bytes; populated for flush classes only.
    pub operand_bytes: Vec<u8>,
    pub rip_relative: bool,
    /// Target of a direct `jmp`/`call`/`jcc`/`loop`, as an offset in the
    /// decoded buffer. May fall outside the buffer.
    pub branch_target: Option<i64>,
    pub layout: Layout,
}

impl DecodedInstruction {
    pub fn end(&self) -> usize {
        self.offset + self.length
    }

    pub fn bytes<'a>(&self, buf: &'a [u8]) -> &'a [u8] {
        &buf[self.offset..self.end()]
    }

    fn undecodable(offset: usize) -> Self {
        DecodedInstruction {
            offset,
            length: 1,
            class: InstrClass::Undecodable,
            operand_bytes: Vec::new(),
            rip_relative: false,
            branch_target: None,
            layout: Layout::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("offset {offset} is outside the {len}-byte buffer")]
    OutOfRange { offset: usize, len: usize },
}

/// Decodes the instruction starting at `offset`.
///
/// Encodings the tables do not cover, and instructions cut off by the end
/// of `bytes`, come back as [`InstrClass::Undecodable`] with length 1.
pub fn decode_one(bytes: &[u8], offset: usize) -> Result<DecodedInstruction, DecodeError> {
    if offset >= bytes.len() {
        return Err(DecodeError::OutOfRange { offset, len: bytes.len() });
    }
    let end = bytes.len().min(offset + MAX_INSN_LEN);
    Ok(Cursor { bytes: &bytes[..end], start: offset, pos: offset }
        .decode()
        .unwrap_or_else(|| DecodedInstruction::undecodable(offset)))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    start: usize,
    pos: usize,
}

#[derive(Default)]
struct Prefixes {
    opsize: bool,
    adsize: bool,
    rep: bool,
    repne: bool,
    lock: bool,
    rex: Option<u8>,
    count: u8,
}

impl Prefixes {
    fn rex_w(&self) -> bool {
        self.rex.is_some_and(|r| r & 0x08 != 0)
    }
}

enum Map {
    One,
    Two,
    Three38,
    Three3A,
}

impl Cursor<'_> {
    fn next(&mut self) -> Option<u8> {
        let b = *self.bytes.get(self.pos)?;
        self.pos += 1;
        Some(b)
    }

    fn peek(&self) -> Option<u8> {
        self.bytes.get(self.pos).copied()
    }

    fn skip(&mut self, n: usize) -> Option<()> {
        if self.pos + n > self.bytes.len() {
            return None;
        }
        self.pos += n;
        Some(())
    }

    fn rel(&self) -> u8 {
        (self.pos - self.start) as u8
    }

    fn decode(mut self) -> Option<DecodedInstruction> {
        let mut pfx = Prefixes::default();
        loop {
            let b = self.peek()?;
            if tables::is_legacy_prefix(b) {
                match b {
                    0x66 => pfx.opsize = true,
                    0x67 => pfx.adsize = true,
                    0xF3 => pfx.rep = true,
                    0xF2 => pfx.repne = true,
                    0xF0 => pfx.lock = true,
                    _ => {}
                }
                // A legacy prefix after REX cancels the REX.
                pfx.rex = None;
                pfx.count = pfx.count.checked_add(1)?;
                self.pos += 1;
            } else if (0x40..=0x4F).contains(&b) {
                pfx.rex = Some(b);
                self.pos += 1;
            } else {
                break;
            }
        }
        let mut layout = Layout { prefixes: pfx.count, rex: pfx.rex, ..Layout::default() };

        let op = self.next()?;
        match op {
            0xC4 | 0xC5 | 0x62 => return self.decode_vex(op, &pfx, layout),
            0x8F if self.peek()? & 0x38 != 0 => return None, // XOP
            _ => {}
        }

        let (map, opcode, entry) = if op == 0x0F {
            let op2 = self.next()?;
            match op2 {
                0x38 => (Map::Three38, self.next()?, tables::THREE_BYTE_38),
                0x3A => (Map::Three3A, self.next()?, tables::THREE_BYTE_3A),
                _ => (Map::Two, op2, tables::TWO_BYTE[usize::from(op2)]),
            }
        } else {
            (Map::One, op, tables::ONE_BYTE[usize::from(op)])
        };
        layout.opcode = match map {
            Map::One => self.rel() - 1,
            Map::Two => self.rel() - 2,
            Map::Three38 | Map::Three3A => self.rel() - 3,
        };

        let (has_modrm, imm) = match entry {
            Entry::Op { modrm, imm } => (modrm, imm),
            Entry::Prefix | Entry::Escape | Entry::Invalid => return None,
        };

        let mut modrm = None;
        let mut rip_relative = false;
        if has_modrm {
            // mov to/from control and debug registers ignores the mod field.
            let (m, rip) = if matches!(map, Map::Two) && (0x20..=0x23).contains(&opcode) {
                layout.modrm = Some(self.rel());
                layout.disp = self.rel() + 1;
                (self.next()? | 0xC0, false)
            } else {
                self.modrm_operand(&mut layout)?
            };
            modrm = Some(m);
            rip_relative = rip;
        }

        let imm_len = match imm {
            Imm::Group3 => {
                let reg = (modrm.expect("group 3 has ModRM") >> 3) & 7;
                match (reg, opcode) {
                    (0 | 1, 0xF6) => 1,
                    (0 | 1, _) => full_imm(&pfx),
                    _ => 0,
                }
            }
            // SSE4a extrq/insertq carry two imm8.
            Imm::None if matches!(map, Map::Two) && opcode == 0x78 && (pfx.opsize || pfx.repne) => 2,
            Imm::None => 0,
            Imm::Byte | Imm::Rel8 => 1,
            Imm::Word => 2,
            Imm::Enter => 3,
            Imm::Full => full_imm(&pfx),
            Imm::Rel32 => 4,
            Imm::Wide => {
                if pfx.rex_w() {
                    8
                } else if pfx.opsize {
                    2
                } else {
                    4
                }
            }
            Imm::Moffs => {
                if pfx.adsize {
                    4
                } else {
                    8
                }
            }
        };
        layout.imm = self.rel();
        layout.imm_len = imm_len as u8;
        let imm_at = self.pos;
        self.skip(imm_len)?;

        let length = self.pos - self.start;
        let mut insn = DecodedInstruction {
            offset: self.start,
            length,
            class: InstrClass::Other,
            operand_bytes: Vec::new(),
            rip_relative,
            branch_target: None,
            layout,
        };

        if matches!(imm, Imm::Rel8 | Imm::Rel32) {
            let rel = if imm == Imm::Rel8 {
                i64::from(self.bytes[imm_at] as i8)
            } else {
                i64::from(i32::from_le_bytes(self.bytes[imm_at..imm_at + 4].try_into().ok()?))
            };
            insn.class = InstrClass::DirectBranch;
            insn.branch_target = Some((self.start + length) as i64 + rel);
        }

        if let (Map::Two, 0xAE, Some(m)) = (map, opcode, modrm) {
            insn.class = classify_group15(m, &pfx);
            if insn.class.is_flush() {
                let from = self.start + usize::from(layout.modrm.expect("flush has ModRM"));
                let to = self.start + usize::from(layout.disp + layout.disp_len);
                insn.operand_bytes = self.bytes[from..to].to_vec();
            }
        }
        Some(insn)
    }

    /// Consumes ModRM, SIB and displacement. Returns the ModRM byte and
    /// whether the operand is RIP-relative.
    fn modrm_operand(&mut self, layout: &mut Layout) -> Option<(u8, bool)> {
        layout.modrm = Some(self.rel());
        let m = self.next()?;
        let mode = m >> 6;
        let rm = m & 7;
        let mut rip = false;
        let disp_len = match mode {
            3 => 0,
            _ => {
                let mut disp = match mode {
                    1 => 1,
                    2 => 4,
                    _ => 0,
                };
                if rm == 4 {
                    let sib = self.next()?;
                    if mode == 0 && sib & 7 == 5 {
                        disp = 4;
                    }
                } else if mode == 0 && rm == 5 {
                    disp = 4;
                    rip = true;
                }
                disp
            }
        };
        layout.disp = self.rel();
        layout.disp_len = disp_len;
        self.skip(usize::from(disp_len))?;
        Some((m, rip))
    }

    fn decode_vex(mut self, op: u8, pfx: &Prefixes, mut layout: Layout) -> Option<DecodedInstruction> {
        // VEX and EVEX are #UD after 66/F2/F3/F0 or REX.
        if pfx.opsize || pfx.rep || pfx.repne || pfx.lock || pfx.rex.is_some() {
            return None;
        }
        let map = match op {
            0xC5 => {
                self.next()?;
                1
            }
            0xC4 => {
                let p0 = self.next()?;
                self.next()?;
                match p0 & 0x1F {
                    m @ 1..=3 => m,
                    _ => return None,
                }
            }
            _ => {
                let p0 = self.next()?;
                let p1 = self.next()?;
                self.next()?;
                if p1 & 0x04 == 0 {
                    return None;
                }
                match p0 & 0x07 {
                    m @ (1..=3 | 5 | 6) => m,
                    _ => return None,
                }
            }
        };
        layout.opcode = self.rel();
        let opcode = self.next()?;
        let mut rip_relative = false;
        // vzeroupper / vzeroall have no ModRM.
        if !(op != 0x62 && map == 1 && opcode == 0x77) {
            let (_, rip) = self.modrm_operand(&mut layout)?;
            rip_relative = rip;
        }
        let imm_len = match map {
            3 => 1,
            1 if tables::vex_map1_has_imm(opcode) => 1,
            _ => 0,
        };
        layout.imm = self.rel();
        layout.imm_len = imm_len;
        self.skip(usize::from(imm_len))?;
        Some(DecodedInstruction {
            offset: self.start,
            length: self.pos - self.start,
            class: InstrClass::Other,
            operand_bytes: Vec::new(),
            rip_relative,
            branch_target: None,
            layout,
        })
    }
}

fn full_imm(pfx: &Prefixes) -> usize {
    if pfx.opsize && !pfx.rex_w() {
        2
    } else {
        4
    }
}

/// `0F AE`: fences for register forms, cache-line flushes for memory forms.
fn classify_group15(modrm: u8, pfx: &Prefixes) -> InstrClass {
    if pfx.rep || pfx.repne {
        return InstrClass::Other;
    }
    let reg = (modrm >> 3) & 7;
    if modrm >> 6 == 3 {
        if pfx.opsize {
            return InstrClass::Other;
        }
        return match modrm {
            0xF8 => InstrClass::Sfence,
            0xF0 => InstrClass::Mfence,
            0xE8 => InstrClass::Lfence,
            _ => InstrClass::Other,
        };
    }
    match (reg, pfx.opsize) {
        (7, false) => InstrClass::Clflush,
        (7, true) => InstrClass::Clflushopt,
        (6, true) => InstrClass::Clwb,
        _ => InstrClass::Other,
    }
}
