//! ELF64 little-endian x86-64 parsing.

use std::collections::BTreeSet;
use std::path::Path;

use thiserror::Error;

pub const PT_LOAD: u32 = 1;
pub const PT_PHDR: u32 = 6;
pub const PF_X: u32 = 1;
pub const PF_W: u32 = 2;
pub const PF_R: u32 = 4;
pub const SHT_SYMTAB: u32 = 2;
pub const SHT_DYNSYM: u32 = 11;
pub const SHF_EXECINSTR: u64 = 4;
pub const STT_FUNC: u8 = 2;
pub const ET_EXEC: u16 = 2;
pub const ET_DYN: u16 = 3;
pub const EM_X86_64: u16 = 62;
pub const EHDR_SIZE: usize = 64;
pub const PHDR_SIZE: usize = 56;
pub const SHDR_SIZE: usize = 64;

/// Offsets of the file-header fields the patcher rewrites.
pub const E_PHOFF_AT: usize = 32;
pub const E_PHNUM_AT: usize = 56;

#[derive(Debug, Error)]
pub enum ElfError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("not an ELF file (bad magic)")]
    BadMagic,
    #[error("unsupported machine: {0}")]
    UnsupportedMachine(String),
    #[error("unsupported ELF type {0}: only executables and shared objects")]
    UnsupportedType(u16),
    #[error("truncated {field}: needs {needed} bytes at offset {offset:#x}, file has {len}")]
    Truncated { field: String, offset: usize, needed: usize, len: usize },
    #[error("malformed {field}: {reason}")]
    Malformed { field: String, reason: String },
}

fn truncated(field: impl Into<String>, offset: usize, needed: usize, len: usize) -> ElfError {
    ElfError::Truncated { field: field.into(), offset, needed, len }
}

fn malformed(field: impl Into<String>, reason: impl Into<String>) -> ElfError {
    ElfError::Malformed { field: field.into(), reason: reason.into() }
}

struct Reader<'a> {
    bytes: &'a [u8],
}

impl Reader<'_> {
    fn take<const N: usize>(&self, field: &str, offset: usize) -> Result<[u8; N], ElfError> {
        offset
            .checked_add(N)
            .and_then(|end| self.bytes.get(offset..end))
            .map(|s| s.try_into().expect("slice has length N"))
            .ok_or_else(|| truncated(field, offset, N, self.bytes.len()))
    }

    fn u8(&self, field: &str, offset: usize) -> Result<u8, ElfError> {
        Ok(self.take::<1>(field, offset)?[0])
    }

    fn u16(&self, field: &str, offset: usize) -> Result<u16, ElfError> {
        Ok(u16::from_le_bytes(self.take(field, offset)?))
    }

    fn u32(&self, field: &str, offset: usize) -> Result<u32, ElfError> {
        Ok(u32::from_le_bytes(self.take(field, offset)?))
    }

    fn u64(&self, field: &str, offset: usize) -> Result<u64, ElfError> {
        Ok(u64::from_le_bytes(self.take(field, offset)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FileHeader {
    pub e_type: u16,
    pub e_entry: u64,
    pub e_phoff: u64,
    pub e_shoff: u64,
    pub e_phentsize: u16,
    pub e_phnum: u16,
    pub e_shentsize: u16,
    pub e_shnum: u16,
    pub e_shstrndx: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProgramHeader {
    pub p_type: u32,
    pub p_flags: u32,
    pub p_offset: u64,
    pub p_vaddr: u64,
    pub p_paddr: u64,
    pub p_filesz: u64,
    pub p_memsz: u64,
    pub p_align: u64,
}

impl ProgramHeader {
    pub fn to_bytes(&self) -> [u8; PHDR_SIZE] {
        let mut b = [0u8; PHDR_SIZE];
        b[0..4].copy_from_slice(&self.p_type.to_le_bytes());
        b[4..8].copy_from_slice(&self.p_flags.to_le_bytes());
        b[8..16].copy_from_slice(&self.p_offset.to_le_bytes());
        b[16..24].copy_from_slice(&self.p_vaddr.to_le_bytes());
        b[24..32].copy_from_slice(&self.p_paddr.to_le_bytes());
        b[32..40].copy_from_slice(&self.p_filesz.to_le_bytes());
        b[40..48].copy_from_slice(&self.p_memsz.to_le_bytes());
        b[48..56].copy_from_slice(&self.p_align.to_le_bytes());
        b
    }

    pub fn contains_vaddr(&self, vaddr: u64) -> bool {
        vaddr >= self.p_vaddr && vaddr - self.p_vaddr < self.p_filesz
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SectionHeader {
    pub name: String,
    pub sh_type: u32,
    pub sh_flags: u64,
    pub sh_addr: u64,
    pub sh_offset: u64,
    pub sh_size: u64,
    pub sh_link: u32,
    pub sh_entsize: u64,
}

/// Executable bytes that are swept for instructions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecRegion {
    /// Section name, or `segment[i]` when taken from a program header.
    pub name: String,
    pub file_offset: usize,
    pub vaddr: u64,
    pub size: usize,
    /// Index of the `PT_LOAD` entry mapping the region.
    pub segment: usize,
    /// Known instruction starts, relative to the region start. Always
    /// contains 0.
    pub anchors: Vec<usize>,
}

impl ExecRegion {
    pub fn contains_vaddr(&self, vaddr: u64) -> bool {
        vaddr >= self.vaddr && vaddr - self.vaddr < self.size as u64
    }
}

#[derive(Debug, Clone)]
pub struct ElfImage {
    bytes: Vec<u8>,
    header: FileHeader,
    phdrs: Vec<ProgramHeader>,
    sections: Vec<SectionHeader>,
    regions: Vec<ExecRegion>,
}

pub fn load_elf(path: &Path) -> Result<ElfImage, ElfError> {
    let bytes = std::fs::read(path).map_err(|source| ElfError::Io { path: path.display().to_string(), source })?;
    ElfImage::parse(bytes)
}

impl ElfImage {
    pub fn parse(bytes: Vec<u8>) -> Result<Self, ElfError> {
        let r = Reader { bytes: &bytes };
        if r.take::<4>("e_ident magic", 0)? != *b"\x7fELF" {
            return Err(ElfError::BadMagic);
        }
        match r.u8("e_ident class", 4)? {
            2 => {}
            1 => return Err(ElfError::UnsupportedMachine("32-bit ELF class".into())),
            c => return Err(malformed("e_ident class", format!("unknown class {c}"))),
        }
        match r.u8("e_ident data", 5)? {
            1 => {}
            2 => return Err(ElfError::UnsupportedMachine("big-endian ELF".into())),
            d => return Err(malformed("e_ident data", format!("unknown encoding {d}"))),
        }
        let e_type = r.u16("e_type", 16)?;
        let e_machine = r.u16("e_machine", 18)?;
        if e_machine != EM_X86_64 {
            return Err(ElfError::UnsupportedMachine(format!("e_machine {e_machine}, expected x86-64")));
        }
        if e_type != ET_EXEC && e_type != ET_DYN {
            return Err(ElfError::UnsupportedType(e_type));
        }
        let header = FileHeader {
            e_type,
            e_entry: r.u64("e_entry", 24)?,
            e_phoff: r.u64("e_phoff", E_PHOFF_AT)?,
            e_shoff: r.u64("e_shoff", 40)?,
            e_phentsize: r.u16("e_phentsize", 54)?,
            e_phnum: r.u16("e_phnum", E_PHNUM_AT)?,
            e_shentsize: r.u16("e_shentsize", 58)?,
            e_shnum: r.u16("e_shnum", 60)?,
            e_shstrndx: r.u16("e_shstrndx", 62)?,
        };
        if header.e_phnum > 0 && usize::from(header.e_phentsize) != PHDR_SIZE {
            return Err(malformed("e_phentsize", format!("{} != {PHDR_SIZE}", header.e_phentsize)));
        }
        if header.e_shnum > 0 && usize::from(header.e_shentsize) != SHDR_SIZE {
            return Err(malformed("e_shentsize", format!("{} != {SHDR_SIZE}", header.e_shentsize)));
        }

        let phdrs = (0..usize::from(header.e_phnum))
            .map(|i| {
                let at = to_usize(header.e_phoff, "e_phoff")? + i * PHDR_SIZE;
                let f = |name: &str| format!("program header {i} {name}");
                Ok(ProgramHeader {
                    p_type: r.u32(&f("p_type"), at)?,
                    p_flags: r.u32(&f("p_flags"), at + 4)?,
                    p_offset: r.u64(&f("p_offset"), at + 8)?,
                    p_vaddr: r.u64(&f("p_vaddr"), at + 16)?,
                    p_paddr: r.u64(&f("p_paddr"), at + 24)?,
                    p_filesz: r.u64(&f("p_filesz"), at + 32)?,
                    p_memsz: r.u64(&f("p_memsz"), at + 40)?,
                    p_align: r.u64(&f("p_align"), at + 48)?,
                })
            })
            .collect::<Result<Vec<_>, ElfError>>()?;
        for (i, p) in phdrs.iter().enumerate() {
            if p.p_type == PT_LOAD && p.p_offset.checked_add(p.p_filesz).is_none_or(|e| e > bytes.len() as u64) {
                return Err(malformed(format!("program header {i} p_filesz"), "segment extends past end of file"));
            }
        }

        let sections = parse_sections(&r, &header)?;
        let mut image = ElfImage { bytes, header, phdrs, sections, regions: Vec::new() };
        image.regions = image.find_regions()?;
        Ok(image)
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.bytes
    }

    pub fn header(&self) -> &FileHeader {
        &self.header
    }

    pub fn program_headers(&self) -> &[ProgramHeader] {
        &self.phdrs
    }

    pub fn sections(&self) -> &[SectionHeader] {
        &self.sections
    }

    pub fn regions(&self) -> &[ExecRegion] {
        &self.regions
    }

    pub fn region_bytes(&self, region: &ExecRegion) -> &[u8] {
        &self.bytes[region.file_offset..region.file_offset + region.size]
    }

    /// End of the highest loadable segment in memory.
    pub fn max_load_end(&self) -> u64 {
        self.loads().map(|(_, p)| p.p_vaddr + p.p_memsz).max().unwrap_or(0)
    }

    fn loads(&self) -> impl Iterator<Item = (usize, &ProgramHeader)> {
        self.phdrs.iter().enumerate().filter(|(_, p)| p.p_type == PT_LOAD)
    }

    /// File offset backing `vaddr`, if a loadable segment maps it from the file.
    pub fn vaddr_to_offset(&self, vaddr: u64) -> Option<usize> {
        self.loads()
            .find(|(_, p)| p.contains_vaddr(vaddr))
            .map(|(_, p)| (p.p_offset + (vaddr - p.p_vaddr)) as usize)
    }

    /// `len` bytes at `vaddr`, when they are all file-backed by one segment.
    pub fn read_vaddr(&self, vaddr: u64, len: usize) -> Option<&[u8]> {
        let (_, p) = self.loads().find(|(_, p)| p.contains_vaddr(vaddr))?;
        if vaddr + len as u64 > p.p_vaddr + p.p_filesz {
            return None;
        }
        let at = (p.p_offset + (vaddr - p.p_vaddr)) as usize;
        self.bytes.get(at..at + len)
    }

    fn segment_for(&self, vaddr: u64, offset: u64, size: u64) -> Option<usize> {
        self.loads()
            .find(|(_, p)| {
                vaddr >= p.p_vaddr
                    && vaddr + size <= p.p_vaddr + p.p_filesz
                    && offset.wrapping_sub(p.p_offset) == vaddr - p.p_vaddr
            })
            .map(|(i, _)| i)
    }

    fn find_regions(&self) -> Result<Vec<ExecRegion>, ElfError> {
        let mut regions = Vec::new();
        let exec_sections: Vec<&SectionHeader> =
            self.sections.iter().filter(|s| s.sh_flags & SHF_EXECINSTR != 0 && s.sh_size > 0).collect();
        if exec_sections.is_empty() {
            for (i, p) in self.loads().filter(|(_, p)| p.p_flags & PF_X != 0 && p.p_filesz > 0) {
                regions.push(ExecRegion {
                    name: format!("segment[{i}]"),
                    file_offset: p.p_offset as usize,
                    vaddr: p.p_vaddr,
                    size: p.p_filesz as usize,
                    segment: i,
                    anchors: vec![0],
                });
            }
        } else {
            for s in exec_sections {
                let segment = self.segment_for(s.sh_addr, s.sh_offset, s.sh_size).ok_or_else(|| {
                    malformed(format!("section {}", s.name), "executable section is not inside one loadable segment")
                })?;
                regions.push(ExecRegion {
                    name: s.name.clone(),
                    file_offset: s.sh_offset as usize,
                    vaddr: s.sh_addr,
                    size: s.sh_size as usize,
                    segment,
                    anchors: vec![0],
                });
            }
        }

        let mut starts: BTreeSet<u64> = self.function_symbols()?.into_iter().collect();
        starts.insert(self.header.e_entry);
        for region in &mut regions {
            let inside: Vec<usize> =
                starts.iter().filter(|&&v| region.contains_vaddr(v)).map(|&v| (v - region.vaddr) as usize).collect();
            region.anchors.extend(inside);
            region.anchors.sort_unstable();
            region.anchors.dedup();
        }
        Ok(regions)
    }

    /// Values of every `STT_FUNC` symbol in `.symtab` and `.dynsym`.
    fn function_symbols(&self) -> Result<Vec<u64>, ElfError> {
        let r = Reader { bytes: &self.bytes };
        let mut out = Vec::new();
        for s in self.sections.iter().filter(|s| s.sh_type == SHT_SYMTAB || s.sh_type == SHT_DYNSYM) {
            if s.sh_entsize != 24 {
                return Err(malformed(format!("section {} sh_entsize", s.name), format!("{} != 24", s.sh_entsize)));
            }
            let base = to_usize(s.sh_offset, "sh_offset")?;
            for k in 0..(s.sh_size / 24) as usize {
                let at = base + k * 24;
                let info = r.u8(&format!("{} symbol {k} st_info", s.name), at + 4)?;
                let shndx = r.u16(&format!("{} symbol {k} st_shndx", s.name), at + 6)?;
                let value = r.u64(&format!("{} symbol {k} st_value", s.name), at + 8)?;
                if info & 0xF == STT_FUNC && shndx != 0 && value != 0 {
                    out.push(value);
                }
            }
        }
        Ok(out)
    }
}

fn to_usize(v: u64, field: &str) -> Result<usize, ElfError> {
    usize::try_from(v).map_err(|_| malformed(field, "offset does not fit in memory"))
}

fn parse_sections(r: &Reader<'_>, h: &FileHeader) -> Result<Vec<SectionHeader>, ElfError> {
    if h.e_shnum == 0 {
        return Ok(Vec::new());
    }
    let base = to_usize(h.e_shoff, "e_shoff")?;
    let mut raw = Vec::with_capacity(usize::from(h.e_shnum));
    for i in 0..usize::from(h.e_shnum) {
        let at = base + i * SHDR_SIZE;
        let f = |name: &str| format!("section header {i} {name}");
        raw.push((
            r.u32(&f("sh_name"), at)?,
            SectionHeader {
                name: String::new(),
                sh_type: r.u32(&f("sh_type"), at + 4)?,
                sh_flags: r.u64(&f("sh_flags"), at + 8)?,
                sh_addr: r.u64(&f("sh_addr"), at + 16)?,
                sh_offset: r.u64(&f("sh_offset"), at + 24)?,
                sh_size: r.u64(&f("sh_size"), at + 32)?,
                sh_link: r.u32(&f("sh_link"), at + 40)?,
                sh_entsize: r.u64(&f("sh_entsize"), at + 56)?,
            },
        ));
    }
    let strtab = raw.get(usize::from(h.e_shstrndx)).map(|(_, s)| (s.sh_offset, s.sh_size));
    for (name_off, s) in &mut raw {
        if s.sh_type != 8 {
            // SHT_NOBITS occupies no file space; everything else must fit.
            let end = s.sh_offset.checked_add(s.sh_size);
            if end.is_none_or(|e| e > r.bytes.len() as u64) {
                return Err(malformed("section header sh_size", format!("section at {:#x} extends past end of file", s.sh_offset)));
            }
        }
        if let Some((off, size)) = strtab {
            if u64::from(*name_off) < size {
                let start = (off + u64::from(*name_off)) as usize;
                let bytes = &r.bytes[start..(off + size) as usize];
                let end = bytes.iter().position(|&b| b == 0).unwrap_or(bytes.len());
                s.name = String::from_utf8_lossy(&bytes[..end]).into_owned();
            }
        }
    }
    Ok(raw.into_iter().map(|(_, s)| s).collect())
}
