//! Opcode attribute tables for 64-bit mode.
//!
//! One character per opcode, sixteen per row:
//!
//! | code | meaning                                            |
//! |------|----------------------------------------------------|
//! | `.`  | no operands beyond the opcode                      |
//! | `m`  | ModRM                                              |
//! | `b`  | imm8                                               |
//! | `w`  | imm16                                              |
//! | `z`  | imm16/32 by operand size                           |
//! | `M`  | ModRM + imm8                                       |
//! | `Z`  | ModRM + imm16/32                                   |
//! | `v`  | imm16/32/64 by operand size (`mov r, imm`)          |
//! | `E`  | imm16 + imm8 (`enter`)                             |
//! | `o`  | moffs: 64-bit address, 32-bit with `67`            |
//! | `r`  | rel8 branch                                        |
//! | `R`  | rel32 branch                                       |
//! | `g`  | group 3: ModRM, immediate only for /0 and /1       |
//! | `p`  | prefix byte (handled before table lookup)          |
//! | `e`  | escape to another map                              |
//! | `x`  | invalid or unsupported                             |

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Imm {
    None,
    Byte,
    Word,
    /// 2 bytes with a 16-bit operand size, else 4.
    Full,
    /// 2, 4 or 8 bytes by operand size.
    Wide,
    Enter,
    Moffs,
    Rel8,
    Rel32,
    /// Group 3: `Byte` or `Full` for /0 and /1 only, chosen by opcode width.
    Group3,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Entry {
    Op { modrm: bool, imm: Imm },
    Prefix,
    Escape,
    Invalid,
}

const fn entry(c: u8) -> Entry {
    use Entry::*;
    match c {
        b'.' => Op { modrm: false, imm: Imm::None },
        b'm' => Op { modrm: true, imm: Imm::None },
        b'b' => Op { modrm: false, imm: Imm::Byte },
        b'w' => Op { modrm: false, imm: Imm::Word },
        b'z' => Op { modrm: false, imm: Imm::Full },
        b'M' => Op { modrm: true, imm: Imm::Byte },
        b'Z' => Op { modrm: true, imm: Imm::Full },
        b'v' => Op { modrm: false, imm: Imm::Wide },
        b'E' => Op { modrm: false, imm: Imm::Enter },
        b'o' => Op { modrm: false, imm: Imm::Moffs },
        b'r' => Op { modrm: false, imm: Imm::Rel8 },
        b'R' => Op { modrm: false, imm: Imm::Rel32 },
        b'g' => Op { modrm: true, imm: Imm::Group3 },
        b'p' => Prefix,
        b'e' => Escape,
        _ => Invalid,
    }
}

const fn build(rows: &[u8; 256]) -> [Entry; 256] {
    let mut out = [Entry::Invalid; 256];
    let mut i = 0;
    while i < 256 {
        out[i] = entry(rows[i]);
        i += 1;
    }
    out
}

const fn concat(rows: [&[u8; 16]; 16]) -> [u8; 256] {
    let mut out = [0u8; 256];
    let mut r = 0;
    while r < 16 {
        let mut c = 0;
        while c < 16 {
            out[r * 16 + c] = rows[r][c];
            c += 1;
        }
        r += 1;
    }
    out
}

// 62 (EVEX), C4/C5 (VEX) and 8F (XOP when reg != 0) are intercepted before
// lookup; their entries here describe the legacy meaning or mark them
// invalid.
pub(crate) const ONE_BYTE: [Entry; 256] = build(&concat([
    b"mmmmbzxxmmmmbzxe", // 00
    b"mmmmbzxxmmmmbzxx", // 10
    b"mmmmbzpxmmmmbzpx", // 20
    b"mmmmbzpxmmmmbzpx", // 30
    b"pppppppppppppppp", // 40 REX
    b"................", // 50
    b"xxxmppppzZbM....", // 60
    b"rrrrrrrrrrrrrrrr", // 70
    b"MZxMmmmmmmmmmmmm", // 80
    b"..........x.....", // 90
    b"oooo....bz......", // A0
    b"bbbbbbbbvvvvvvvv", // B0
    b"MMw.xxMZE.w..bx.", // C0
    b"mmmmxxx.mmmmmmmm", // D0
    b"rrrrbbbbRRxr....", // E0
    b"p.pp..gg......mm", // F0
]));

pub(crate) const TWO_BYTE: [Entry; 256] = build(&concat([
    b"mmmmx.....x.xmxx", // 00
    b"mmmmmmmmmmmmmmmm", // 10
    b"mmmmxxxxmmmmmmmm", // 20
    b"......x.exexxxxx", // 30
    b"mmmmmmmmmmmmmmmm", // 40
    b"mmmmmmmmmmmmmmmm", // 50
    b"mmmmmmmmmmmmmmmm", // 60
    b"MMMMmmm.mmxxmmmm", // 70
    b"RRRRRRRRRRRRRRRR", // 80
    b"mmmmmmmmmmmmmmmm", // 90
    b"...mMmxx...mMmmm", // A0
    b"mmmmmmmmmmMmmmmm", // B0
    b"mmMmMMMm........", // C0
    b"mmmmmmmmmmmmmmmm", // D0
    b"mmmmmmmmmmmmmmmm", // E0
    b"mmmmmmmmmmmmmmmm", // F0
]));

/// `0F 38 xx`: always ModRM, never an immediate.
pub(crate) const THREE_BYTE_38: Entry = Entry::Op { modrm: true, imm: Imm::None };
/// `0F 3A xx`: always ModRM and imm8.
pub(crate) const THREE_BYTE_3A: Entry = Entry::Op { modrm: true, imm: Imm::Byte };

/// Opcodes of the VEX/EVEX `0F` map that carry an imm8.
pub(crate) fn vex_map1_has_imm(op: u8) -> bool {
    matches!(op, 0x70..=0x73 | 0xC2 | 0xC4..=0xC6)
}

pub(crate) fn is_legacy_prefix(b: u8) -> bool {
    matches!(b, 0x26 | 0x2E | 0x36 | 0x3E | 0x64 | 0x65 | 0x66 | 0x67 | 0xF0 | 0xF2 | 0xF3)
}
