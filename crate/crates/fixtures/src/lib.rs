//! Test fixtures: a minimal ELF64 writer, a tiny assembler, hand-assembled
//! programs and paths to the compiled corpus.
//!
//! Hand-assembled programs are static `ET_EXEC` files with code at
//! [`CODE_BASE`] and a writable buffer at [`DATA_BASE`]. The runnable ones
//! exit with a checksum as their status code.

use std::collections::HashMap;
use std::path::PathBuf;

pub const CODE_BASE: u64 = 0x401000;
pub const DATA_BASE: u64 = 0x402000;
const CODE_OFF: usize = 0x1000;
const DATA_OFF: usize = 0x2000;

/// Byte assembler with label fix-ups for rel8/rel32 and RIP-relative data.
#[derive(Default)]
pub struct Asm {
    bytes: Vec<u8>,
    labels: HashMap<&'static str, usize>,
    fixups: Vec<(usize, &'static str, Fix)>,
}

#[derive(Clone, Copy)]
enum Fix {
    Rel8,
    Rel32,
}

impl Asm {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn here(&self) -> usize {
        self.bytes.len()
    }

    pub fn label(&mut self, name: &'static str) -> &mut Self {
        assert!(self.labels.insert(name, self.bytes.len()).is_none(), "duplicate label {name}");
        self
    }

    pub fn raw(&mut self, bytes: &[u8]) -> &mut Self {
        self.bytes.extend_from_slice(bytes);
        self
    }

    /// `opcode` followed by a rel32 to `label`.
    pub fn rel32(&mut self, opcode: &[u8], label: &'static str) -> &mut Self {
        self.bytes.extend_from_slice(opcode);
        self.fixups.push((self.bytes.len(), label, Fix::Rel32));
        self.bytes.extend_from_slice(&[0; 4]);
        self
    }

    /// `opcode` followed by a rel8 to `label`.
    pub fn rel8(&mut self, opcode: u8, label: &'static str) -> &mut Self {
        self.bytes.push(opcode);
        self.fixups.push((self.bytes.len(), label, Fix::Rel8));
        self.bytes.push(0);
        self
    }

    pub fn jmp(&mut self, label: &'static str) -> &mut Self {
        self.rel32(&[0xE9], label)
    }

    pub fn call(&mut self, label: &'static str) -> &mut Self {
        self.rel32(&[0xE8], label)
    }

    /// Instruction whose last four bytes are a disp32 reaching
    /// `DATA_BASE + data_off`, followed by `suffix` (an immediate).
    pub fn rip_data(&mut self, head: &[u8], data_off: u64, suffix: &[u8]) -> &mut Self {
        let end = CODE_BASE + (self.bytes.len() + head.len() + 4 + suffix.len()) as u64;
        let disp = (DATA_BASE + data_off) as i64 - end as i64;
        self.bytes.extend_from_slice(head);
        self.bytes.extend_from_slice(&(disp as i32).to_le_bytes());
        self.bytes.extend_from_slice(suffix);
        self
    }

    /// `mov edi, eax; mov eax, 60; syscall`: exit with the low byte of eax.
    pub fn exit_with_eax(&mut self) -> &mut Self {
        self.raw(&[0x89, 0xC7, 0xB8, 0x3C, 0, 0, 0, 0x0F, 0x05])
    }

    pub fn offset_of(&self, label: &str) -> usize {
        self.labels[label]
    }

    pub fn finish(&self) -> Vec<u8> {
        let mut out = self.bytes.clone();
        for &(at, label, fix) in &self.fixups {
            let target = *self.labels.get(label).unwrap_or_else(|| panic!("undefined label {label}")) as i64;
            match fix {
                Fix::Rel32 => {
                    let rel = target - (at as i64 + 4);
                    out[at..at + 4].copy_from_slice(&(rel as i32).to_le_bytes());
                }
                Fix::Rel8 => {
                    let rel = target - (at as i64 + 1);
                    out[at] = i8::try_from(rel).expect("rel8 in range") as u8;
                }
            }
        }
        out
    }
}

/// Writer for a three-segment static executable.
#[derive(Clone)]
pub struct ElfBuilder {
    code: Vec<u8>,
    data: Vec<u8>,
    bss: u64,
    functions: Vec<(String, usize)>,
    entry: usize,
    sections: bool,
    phdr_entry: bool,
}

impl ElfBuilder {
    pub fn new(code: Vec<u8>) -> Self {
        ElfBuilder {
            code,
            data: vec![0; 0x100],
            bss: 0,
            functions: vec![("_start".into(), 0)],
            entry: 0,
            sections: true,
            phdr_entry: true,
        }
    }

    pub fn data(mut self, data: Vec<u8>) -> Self {
        self.data = data;
        self
    }

    /// Extra zero-initialised memory after the data.
    pub fn bss(mut self, bytes: u64) -> Self {
        self.bss = bytes;
        self
    }

    /// Adds an `STT_FUNC` symbol at `offset` into the code.
    pub fn function(mut self, name: &str, offset: usize) -> Self {
        self.functions.push((name.into(), offset));
        self
    }

    /// Omits section headers and symbols.
    pub fn stripped(mut self) -> Self {
        self.sections = false;
        self
    }

    pub fn without_phdr_entry(mut self) -> Self {
        self.phdr_entry = false;
        self
    }

    pub fn build(&self) -> Vec<u8> {
        assert!(self.code.len() <= 0x1000 && self.data.len() <= 0x1000);
        let mut f = vec![0u8; DATA_OFF + self.data.len()];
        f[CODE_OFF..CODE_OFF + self.code.len()].copy_from_slice(&self.code);
        f[DATA_OFF..].copy_from_slice(&self.data);

        let mut phdrs: Vec<[u64; 8]> = Vec::new();
        let phnum = if self.phdr_entry { 4 } else { 3 };
        // type, flags, offset, vaddr, paddr, filesz, memsz, align
        if self.phdr_entry {
            let size = (phnum * 56) as u64;
            phdrs.push([6, 4, 0x40, 0x400040, 0x400040, size, size, 8]);
        }
        phdrs.push([1, 4, 0, 0x400000, 0x400000, 0x1000, 0x1000, 0x1000]);
        let code_len = self.code.len() as u64;
        phdrs.push([1, 5, CODE_OFF as u64, CODE_BASE, CODE_BASE, code_len, code_len, 0x1000]);
        let data_len = self.data.len() as u64;
        phdrs.push([1, 6, DATA_OFF as u64, DATA_BASE, DATA_BASE, data_len, data_len + self.bss, 0x1000]);

        let (shoff, shnum, shstrndx) = if self.sections { self.append_sections(&mut f) } else { (0, 0, 0) };

        f[..4].copy_from_slice(b"\x7fELF");
        f[4] = 2;
        f[5] = 1;
        f[6] = 1;
        put16(&mut f, 16, 2);
        put16(&mut f, 18, 62);
        put32(&mut f, 20, 1);
        put64(&mut f, 24, CODE_BASE + self.entry as u64);
        put64(&mut f, 32, 0x40);
        put64(&mut f, 40, shoff);
        put16(&mut f, 52, 64);
        put16(&mut f, 54, 56);
        put16(&mut f, 56, phnum as u16);
        put16(&mut f, 58, 64);
        put16(&mut f, 60, shnum);
        put16(&mut f, 62, shstrndx);
        for (i, p) in phdrs.iter().enumerate() {
            let at = 0x40 + i * 56;
            put32(&mut f, at, p[0] as u32);
            put32(&mut f, at + 4, p[1] as u32);
            for (k, v) in p[2..].iter().enumerate() {
                put64(&mut f, at + 8 + k * 8, *v);
            }
        }
        f
    }

    /// Appends .symtab, .strtab, .shstrtab and the section header table.
    fn append_sections(&self, f: &mut Vec<u8>) -> (u64, u16, u16) {
        let mut strtab = vec![0u8];
        let mut symtab = vec![0u8; 24];
        for (name, off) in &self.functions {
            let mut sym = [0u8; 24];
            sym[..4].copy_from_slice(&(strtab.len() as u32).to_le_bytes());
            sym[4] = 0x12; // STB_GLOBAL, STT_FUNC
            sym[6..8].copy_from_slice(&1u16.to_le_bytes());
            sym[8..16].copy_from_slice(&(CODE_BASE + *off as u64).to_le_bytes());
            symtab.extend_from_slice(&sym);
            strtab.extend_from_slice(name.as_bytes());
            strtab.push(0);
        }
        let names = ["", ".text", ".data", ".symtab", ".strtab", ".shstrtab"];
        let mut shstrtab = Vec::new();
        let mut name_at = Vec::new();
        for n in names {
            name_at.push(shstrtab.len() as u32);
            shstrtab.extend_from_slice(n.as_bytes());
            shstrtab.push(0);
        }
        let align8 = |f: &mut Vec<u8>| f.resize(f.len().next_multiple_of(8), 0);
        align8(f);
        let symtab_off = f.len() as u64;
        f.extend_from_slice(&symtab);
        let strtab_off = f.len() as u64;
        f.extend_from_slice(&strtab);
        let shstrtab_off = f.len() as u64;
        f.extend_from_slice(&shstrtab);
        align8(f);
        let shoff = f.len() as u64;

        let headers: [SectionRow; 6] = [
            (0, 0, 0, 0, 0, 0, 0, 0, 0, 0),
            (name_at[1], 1, 6, CODE_BASE, CODE_OFF as u64, self.code.len() as u64, 0, 0, 16, 0),
            (name_at[2], 1, 3, DATA_BASE, DATA_OFF as u64, self.data.len() as u64, 0, 0, 8, 0),
            (name_at[3], 2, 0, 0, symtab_off, symtab.len() as u64, 4, 1, 8, 24),
            (name_at[4], 3, 0, 0, strtab_off, strtab.len() as u64, 0, 0, 1, 0),
            (name_at[5], 3, 0, 0, shstrtab_off, shstrtab.len() as u64, 0, 0, 1, 0),
        ];
        for h in headers {
            let mut b = [0u8; 64];
            b[0..4].copy_from_slice(&h.0.to_le_bytes());
            b[4..8].copy_from_slice(&h.1.to_le_bytes());
            b[8..16].copy_from_slice(&h.2.to_le_bytes());
            b[16..24].copy_from_slice(&h.3.to_le_bytes());
            b[24..32].copy_from_slice(&h.4.to_le_bytes());
            b[32..40].copy_from_slice(&h.5.to_le_bytes());
            b[40..44].copy_from_slice(&h.6.to_le_bytes());
            b[44..48].copy_from_slice(&h.7.to_le_bytes());
            b[48..56].copy_from_slice(&h.8.to_le_bytes());
            b[56..64].copy_from_slice(&h.9.to_le_bytes());
            f.extend_from_slice(&b);
        }
        (shoff, headers.len() as u16, 5)
    }
}

fn put16(f: &mut [u8], at: usize, v: u16) {
    f[at..at + 2].copy_from_slice(&v.to_le_bytes());
}

fn put32(f: &mut [u8], at: usize, v: u32) {
    f[at..at + 4].copy_from_slice(&v.to_le_bytes());
}

fn put64(f: &mut [u8], at: usize, v: u64) {
    f[at..at + 8].copy_from_slice(&v.to_le_bytes());
}

// Encodings used below.
const LEA_RDI_DATA: [u8; 3] = [0x48, 0x8D, 0x3D]; // lea rdi, [rip+disp32]
const CLFLUSH_RDI: [u8; 3] = [0x0F, 0xAE, 0x3F];
const CLFLUSH_RDI_64: [u8; 4] = [0x0F, 0xAE, 0x7F, 0x40]; // clflush [rdi+0x40]
const CLFLUSHOPT_RDI: [u8; 4] = [0x66, 0x0F, 0xAE, 0x3F];
const SFENCE: [u8; 3] = [0x0F, 0xAE, 0xF8];
const MFENCE: [u8; 3] = [0x0F, 0xAE, 0xF0];
const MOV_RDI_IMM5: [u8; 7] = [0x48, 0xC7, 0x07, 5, 0, 0, 0]; // mov qword [rdi], 5
const MOV_RDI64_IMM7: [u8; 8] = [0x48, 0xC7, 0x47, 0x40, 7, 0, 0, 0]; // mov qword [rdi+0x40], 7
const MOV_RAX_RDI: [u8; 3] = [0x48, 0x8B, 0x07]; // mov rax, [rdi]
const ADD_RAX_RDI64: [u8; 4] = [0x48, 0x03, 0x47, 0x40]; // add rax, [rdi+0x40]

/// name, type, flags, addr, offset, size, link, info, align, entsize
type SectionRow = (u32, u32, u64, u64, u64, u64, u32, u32, u64, u64);

/// A hand-assembled program and what running it should produce.
pub struct Fixture {
    pub name: &'static str,
    pub elf: Vec<u8>,
    /// Exit status when executed, for runnable fixtures.
    pub exit_code: Option<i32>,
}

/// `mov [rdi], 5; clflush [rdi]; sfence`, exits with 5.
pub fn flush_then_fence() -> Fixture {
    let mut a = Asm::new();
    a.rip_data(&LEA_RDI_DATA, 0, &[])
        .raw(&MOV_RDI_IMM5)
        .raw(&CLFLUSH_RDI)
        .raw(&SFENCE)
        .raw(&MOV_RAX_RDI)
        .exit_with_eax();
    Fixture { name: "flush_then_fence", elf: ElfBuilder::new(a.finish()).build(), exit_code: Some(5) }
}

/// `clflush [rdi]; mov; sfence`: the fence is two instructions away. Exits with 12.
pub fn flush_mov_fence() -> Fixture {
    let mut a = Asm::new();
    a.rip_data(&LEA_RDI_DATA, 0, &[])
        .raw(&MOV_RDI_IMM5)
        .raw(&CLFLUSH_RDI)
        .raw(&MOV_RDI64_IMM7)
        .raw(&SFENCE)
        .raw(&MOV_RAX_RDI)
        .raw(&ADD_RAX_RDI64)
        .exit_with_eax();
    Fixture { name: "flush_mov_fence", elf: ElfBuilder::new(a.finish()).build(), exit_code: Some(12) }
}

/// `clflush [rax]` whose detour span would contain the target of an
/// earlier forward jump. Exits with 9.
pub fn branch_target_inside() -> Fixture {
    let mut a = Asm::new();
    a.rip_data(&[0x48, 0x8D, 0x05], 0, &[]) // lea rax, [rip+data]
        .raw(&[0x31, 0xDB]) // xor ebx, ebx
        .raw(&[0x85, 0xDB]) // test ebx, ebx
        .rel8(0x74, "inside") // je inside (taken)
        .raw(&[0x0F, 0xAE, 0x38]) // clflush [rax]
        .raw(&[0x90]) // nop
        .label("inside")
        .raw(&[0xB3, 0x09]) // mov bl, 9
        .raw(&[0x89, 0xD8]) // mov eax, ebx
        .exit_with_eax();
    Fixture { name: "branch_target_inside", elf: ElfBuilder::new(a.finish()).build(), exit_code: Some(9) }
}

/// `clflushopt [rdi]; sfence`. Exits with 5.
pub fn clflushopt_site() -> Fixture {
    let mut a = Asm::new();
    a.rip_data(&LEA_RDI_DATA, 0, &[])
        .raw(&MOV_RDI_IMM5)
        .raw(&CLFLUSHOPT_RDI)
        .raw(&SFENCE)
        .raw(&MOV_RAX_RDI)
        .exit_with_eax();
    Fixture { name: "clflushopt_site", elf: ElfBuilder::new(a.finish()).build(), exit_code: Some(5) }
}

/// A `clflush` that ends the text section: no room for a 5-byte jump.
pub fn span_too_short() -> Fixture {
    let mut a = Asm::new();
    a.raw(&[0x31, 0xC0]).exit_with_eax().label("tail").raw(&CLFLUSH_RDI);
    let code = a.finish();
    let tail = a.offset_of("tail");
    Fixture { name: "span_too_short", elf: ElfBuilder::new(code).function("tail", tail).build(), exit_code: Some(0) }
}

/// Two sites: a `clflush [rdi]` whose span displaces a RIP-relative load,
/// and a RIP-relative `clflush` hosting its own detour. Exits with 12.
pub fn rip_relative() -> Fixture {
    let mut a = Asm::new();
    a.rip_data(&[0x48, 0xC7, 0x05], 0, &[5, 0, 0, 0]) // mov qword [rip+data], 5
        .rip_data(&[0x48, 0xC7, 0x05], 0x40, &[7, 0, 0, 0]) // mov qword [rip+data+0x40], 7
        .rip_data(&LEA_RDI_DATA, 0, &[])
        .raw(&CLFLUSH_RDI)
        .rip_data(&[0x8B, 0x05], 0, &[]) // mov eax, [rip+data]
        .raw(&SFENCE)
        .rip_data(&[0x0F, 0xAE, 0x3D], 0x40, &[]) // clflush [rip+data+0x40]
        .raw(&SFENCE)
        .rip_data(&[0x03, 0x05], 0x40, &[]) // add eax, [rip+data+0x40]
        .exit_with_eax();
    Fixture { name: "rip_relative", elf: ElfBuilder::new(a.finish()).build(), exit_code: Some(12) }
}

/// Two `clflush` back to back, then `mfence`. The second flush lies in the
/// first one's span. Exits with 12.
pub fn adjacent_clflushes() -> Fixture {
    let mut a = Asm::new();
    a.rip_data(&LEA_RDI_DATA, 0, &[])
        .raw(&MOV_RDI_IMM5)
        .raw(&MOV_RDI64_IMM7)
        .raw(&CLFLUSH_RDI)
        .raw(&CLFLUSH_RDI_64)
        .raw(&MFENCE)
        .raw(&MOV_RAX_RDI)
        .raw(&ADD_RAX_RDI64)
        .exit_with_eax();
    Fixture { name: "adjacent_clflushes", elf: ElfBuilder::new(a.finish()).build(), exit_code: Some(12) }
}

/// `clflush [rdi]; call f`: the call cannot be relocated. Exits with 3.
pub fn call_in_span() -> Fixture {
    let mut a = Asm::new();
    a.rip_data(&LEA_RDI_DATA, 0, &[])
        .raw(&CLFLUSH_RDI)
        .call("f")
        .exit_with_eax()
        .label("f")
        .raw(&[0xB8, 3, 0, 0, 0, 0xC3]); // mov eax, 3; ret
    let code = a.finish();
    let f = a.offset_of("f");
    Fixture { name: "call_in_span", elf: ElfBuilder::new(code).function("f", f).build(), exit_code: Some(3) }
}

/// `clflush` followed by a byte that is invalid in 64-bit mode.
pub fn undecodable_after_flush() -> Fixture {
    let mut a = Asm::new();
    a.raw(&[0x31, 0xC0]).exit_with_eax().label("tail").raw(&CLFLUSH_RDI).raw(&[0x06, 0x90, 0x90, 0x90]);
    let code = a.finish();
    let tail = a.offset_of("tail");
    Fixture {
        name: "undecodable_after_flush",
        elf: ElfBuilder::new(code).function("tail", tail).build(),
        exit_code: Some(0),
    }
}

/// No flushes at all. Exits with 42.
pub fn no_flushes() -> Fixture {
    let mut a = Asm::new();
    a.raw(&[0xB8, 42, 0, 0, 0]).exit_with_eax();
    Fixture { name: "no_flushes", elf: ElfBuilder::new(a.finish()).build(), exit_code: Some(42) }
}

/// [`flush_then_fence`] without section headers or symbols.
pub fn stripped() -> Fixture {
    let mut a = Asm::new();
    a.rip_data(&LEA_RDI_DATA, 0, &[])
        .raw(&MOV_RDI_IMM5)
        .raw(&CLFLUSH_RDI)
        .raw(&SFENCE)
        .raw(&MOV_RAX_RDI)
        .exit_with_eax();
    Fixture { name: "stripped", elf: ElfBuilder::new(a.finish()).stripped().build(), exit_code: Some(5) }
}

/// A flush in a binary whose data segment reserves 3 GiB, pushing the
/// injected segment out of rel32 range. Not runnable.
pub fn far_segment() -> Fixture {
    let mut a = Asm::new();
    a.rip_data(&LEA_RDI_DATA, 0, &[]).raw(&CLFLUSH_RDI).raw(&SFENCE).exit_with_eax();
    Fixture { name: "far_segment", elf: ElfBuilder::new(a.finish()).bss(3 << 30).build(), exit_code: None }
}

/// Every hand-assembled fixture.
pub fn all() -> Vec<Fixture> {
    vec![
        flush_then_fence(),
        flush_mov_fence(),
        branch_target_inside(),
        clflushopt_site(),
        span_too_short(),
        rip_relative(),
        adjacent_clflushes(),
        call_in_span(),
        undecodable_after_flush(),
        no_flushes(),
        stripped(),
        far_segment(),
    ]
}

/// Directory holding the compiled corpus.
pub fn corpus_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("corpus")
}

/// Compiled corpus binaries, sorted by name.
pub fn corpus_binaries() -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(corpus_dir().join("bin"))
        .map(|rd| rd.filter_map(|e| e.ok().map(|e| e.path())).collect())
        .unwrap_or_default();
    out.sort();
    out
}

/// Directory of trace programs used as examples.
pub fn traces_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("corpus").join("traces")
}
