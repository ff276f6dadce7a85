//! Operational model of buffered, relaxed x86 persistency for one thread.
//!
//! The machine keeps two views of memory: the volatile image (what the core
//! sees, cache included) and the persisted image (what survives a crash).
//! Transitions are nondeterministic:
//!
//! * `Exec` runs the next op in program order. Stores change only the
//!   volatile image. `clflush` persists its line on execution and may only
//!   run once every outstanding `clflushopt`/`clwb` has completed. `clflushopt`
//!   and `clwb` only post an obligation. Fences may only run once no
//!   obligation is outstanding. Loads have no persistency effect.
//! * `CompleteFlush` discharges an outstanding obligation by writing the line
//!   back.
//! * `Evict` writes back any dirty line at any time.
//!
//! Lines are persisted as whole 64-byte units. `mfence` and `sfence` share
//! the same rule here because loads never affect persisted state.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::trace::{CacheLineId, FlushKind, TraceOp, TraceProgram, LINE_SIZE};

/// Contents of one cache line.
pub type LineBytes = [u8; LINE_SIZE as usize];

pub(crate) const ZERO_LINE: LineBytes = [0; LINE_SIZE as usize];

/// Obligations are tracked in a 64-bit mask indexed by op position.
pub const MAX_MODEL_OPS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("program has {0} ops; the model tracks at most {MAX_MODEL_OPS}")]
    TooLong(usize),
}

/// One labelled transition of the machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Transition {
    Exec { index: usize },
    CompleteFlush { line: CacheLineId, origin: usize },
    Evict { line: CacheLineId },
}

impl fmt::Display for Transition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transition::Exec { index } => write!(f, "exec #{index}"),
            Transition::CompleteFlush { line, origin } => write!(f, "complete-flush {line} (from #{origin})"),
            Transition::Evict { line } => write!(f, "evict {line}"),
        }
    }
}

/// Compact machine state.
///
/// The volatile image is a function of `pc`, so only the persisted image is
/// stored, as one content class per touched line (see [`Machine`]). A line is
/// dirty exactly when its persisted class differs from the volatile class at
/// `pc`. Bit `i` of `pending` is set while the obligation posted by the
/// `clflushopt`/`clwb` at index `i` is outstanding.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MachineState {
    pub pc: usize,
    persisted: Vec<u16>,
    pending: u64,
}

impl MachineState {
    pub fn has_pending(&self) -> bool {
        self.pending != 0
    }
}

/// A program compiled for simulation.
///
/// Every distinct 64-byte content a line takes during execution gets a
/// small class number; identical contents share a class so that states
/// differing only in how a value was reached collapse together.
#[derive(Debug, Clone)]
pub struct Machine<'p> {
    program: &'p TraceProgram,
    lines: Vec<CacheLineId>,
    op_line: Vec<Option<usize>>,
    contents: Vec<Vec<LineBytes>>,
    class_at: Vec<Vec<u16>>,
}

impl<'p> Machine<'p> {
    pub fn new(program: &'p TraceProgram) -> Result<Self, ModelError> {
        if program.len() > MAX_MODEL_OPS {
            return Err(ModelError::TooLong(program.len()));
        }
        let lines = program.lines();
        let index_of = |line: CacheLineId| lines.binary_search(&line).expect("line collected above");
        let op_line: Vec<Option<usize>> =
            program.ops().iter().map(|op| op.line().map(index_of)).collect();

        let mut contents: Vec<Vec<LineBytes>> = vec![vec![ZERO_LINE]; lines.len()];
        let mut current = vec![0u16; lines.len()];
        let mut class_at = Vec::with_capacity(program.len() + 1);
        class_at.push(current.clone());
        for (op, line) in program.ops().iter().zip(&op_line) {
            if let (TraceOp::Store { addr, size, value }, Some(l)) = (*op, *line) {
                let mut bytes = contents[l][usize::from(current[l])];
                let start = (addr % LINE_SIZE) as usize;
                let size = usize::from(size);
                bytes[start..start + size].copy_from_slice(&value.to_le_bytes()[..size]);
                current[l] = match contents[l].iter().position(|c| *c == bytes) {
                    Some(class) => class as u16,
                    None => {
                        contents[l].push(bytes);
                        (contents[l].len() - 1) as u16
                    }
                };
            }
            class_at.push(current.clone());
        }
        Ok(Machine { program, lines, op_line, contents, class_at })
    }

    pub fn program(&self) -> &TraceProgram {
        self.program
    }

    /// Touched lines, ascending.
    pub fn lines(&self) -> &[CacheLineId] {
        &self.lines
    }

    /// All lines zero, nothing dirty, nothing pending.
    pub fn initial(&self) -> MachineState {
        MachineState { pc: 0, persisted: vec![0; self.lines.len()], pending: 0 }
    }

    pub fn is_final(&self, s: &MachineState) -> bool {
        s.pc == self.program.len()
    }

    fn is_dirty(&self, s: &MachineState, line: usize) -> bool {
        self.class_at[s.pc][line] != s.persisted[line]
    }

    fn persist(&self, s: &mut MachineState, line: usize) {
        s.persisted[line] = self.class_at[s.pc][line];
    }

    /// Every enabled transition out of `s`.
    pub fn successors(&self, s: &MachineState) -> Vec<(Transition, MachineState)> {
        let mut out = Vec::new();

        if let Some(op) = self.program.ops().get(s.pc) {
            let index = s.pc;
            let mut next = s.clone();
            let enabled = match *op {
                TraceOp::Store { .. } | TraceOp::Load { .. } => true,
                TraceOp::Flush { kind: FlushKind::Clflush, .. } => {
                    if s.has_pending() {
                        false
                    } else {
                        self.persist(&mut next, self.op_line[index].expect("flush has a line"));
                        true
                    }
                }
                TraceOp::Flush { .. } => {
                    next.pending |= 1 << index;
                    true
                }
                TraceOp::Fence(_) => !s.has_pending(),
            };
            if enabled {
                next.pc += 1;
                out.push((Transition::Exec { index }, next));
            }
        }

        let mut pending = s.pending;
        while pending != 0 {
            let origin = pending.trailing_zeros() as usize;
            pending &= pending - 1;
            let line = self.op_line[origin].expect("obligation comes from a flush");
            let mut next = s.clone();
            self.persist(&mut next, line);
            next.pending &= !(1 << origin);
            out.push((Transition::CompleteFlush { line: self.lines[line], origin }, next));
        }

        for line in 0..self.lines.len() {
            if self.is_dirty(s, line) {
                let mut next = s.clone();
                self.persist(&mut next, line);
                out.push((Transition::Evict { line: self.lines[line] }, next));
            }
        }
        out
    }

    /// Persisted contents, zero lines omitted.
    pub fn persisted_image(&self, s: &MachineState) -> CrashImage {
        self.image(&s.persisted)
    }

    /// Architectural (cache-inclusive) contents at `s.pc`, zero lines omitted.
    pub fn volatile_image(&self, s: &MachineState) -> CrashImage {
        self.image(&self.class_at[s.pc])
    }

    pub fn dirty_lines(&self, s: &MachineState) -> Vec<CacheLineId> {
        (0..self.lines.len()).filter(|&l| self.is_dirty(s, l)).map(|l| self.lines[l]).collect()
    }

    /// Outstanding `(line, origin index)` obligations.
    pub fn pending_flushes(&self, s: &MachineState) -> Vec<(CacheLineId, usize)> {
        (0..MAX_MODEL_OPS)
            .filter(|i| s.pending & (1 << i) != 0)
            .map(|i| (self.lines[self.op_line[i].expect("flush has a line")], i))
            .collect()
    }

    /// Key identifying the persisted image of `s`; equal keys mean equal images.
    pub(crate) fn persisted_key<'s>(&self, s: &'s MachineState) -> &'s [u16] {
        &s.persisted
    }

    pub(crate) fn image(&self, classes: &[u16]) -> CrashImage {
        let lines = classes
            .iter()
            .enumerate()
            .map(|(l, &c)| (self.lines[l], self.contents[l][usize::from(c)]))
            .filter(|(_, bytes)| *bytes != ZERO_LINE)
            .collect();
        CrashImage(lines)
    }
}

/// A persisted-memory image. Lines not present are all zero.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CrashImage(BTreeMap<CacheLineId, LineBytes>);

impl CrashImage {
    pub fn zero() -> Self {
        CrashImage::default()
    }

    /// Builds an image from whole-line contents, dropping all-zero lines.
    pub fn from_lines(lines: impl IntoIterator<Item = (CacheLineId, LineBytes)>) -> Self {
        CrashImage(lines.into_iter().filter(|(_, b)| *b != ZERO_LINE).collect())
    }

    /// Returns a copy with `value` written little-endian at `addr`.
    pub fn with_value(mut self, addr: u64, size: u8, value: u64) -> Self {
        let line = CacheLineId::of(addr);
        let mut bytes = self.line(line);
        let start = (addr % LINE_SIZE) as usize;
        let size = usize::from(size);
        bytes[start..start + size].copy_from_slice(&value.to_le_bytes()[..size]);
        self.0.remove(&line);
        if bytes != ZERO_LINE {
            self.0.insert(line, bytes);
        }
        self
    }

    pub fn line(&self, line: CacheLineId) -> LineBytes {
        self.0.get(&line).copied().unwrap_or(ZERO_LINE)
    }

    /// Little-endian value of `size` bytes at `offset` within `line`.
    pub fn read(&self, line: CacheLineId, offset: usize, size: usize) -> u64 {
        let bytes = self.line(line);
        let mut buf = [0u8; 8];
        buf[..size].copy_from_slice(&bytes[offset..offset + size]);
        u64::from_le_bytes(buf)
    }

    pub fn is_zero(&self) -> bool {
        self.0.is_empty()
    }

    /// Non-zero lines.
    pub fn lines(&self) -> impl Iterator<Item = (CacheLineId, &LineBytes)> {
        self.0.iter().map(|(l, b)| (*l, b))
    }
}

fn trimmed_hex(bytes: &LineBytes) -> String {
    let used = bytes.iter().rposition(|&b| b != 0).map_or(0, |i| i + 1);
    bytes[..used].iter().map(|b| format!("{b:02x}")).collect()
}

/// `{0x1000=2a, 0x1040=0000000001}`: each non-zero line with its leading
/// bytes in hex up to the last non-zero byte.
impl fmt::Display for CrashImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("{")?;
        for (i, (line, bytes)) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{line}={}", trimmed_hex(bytes))?;
        }
        f.write_str("}")
    }
}

impl Serialize for CrashImage {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_map(self.0.iter().map(|(l, b)| (l, trimmed_hex(b))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::parse_trace;

    fn step(succ: &[(Transition, MachineState)], t: Transition) -> Option<&MachineState> {
        succ.iter().find(|(label, _)| *label == t).map(|(_, s)| s)
    }

    #[test]
    fn dirty_store_can_be_evicted() {
        let p = parse_trace("store 0x1000 8 1").unwrap();
        let m = Machine::new(&p).unwrap();
        let s0 = m.initial();
        let s1 = step(&m.successors(&s0), Transition::Exec { index: 0 }).unwrap().clone();
        assert_eq!(m.dirty_lines(&s1), vec![CacheLineId::of(0x1000)]);
        assert!(m.persisted_image(&s1).is_zero());
        let succ = m.successors(&s1);
        let evicted = step(&succ, Transition::Evict { line: CacheLineId::of(0x1000) }).unwrap();
        assert_eq!(m.persisted_image(evicted), CrashImage::zero().with_value(0x1000, 8, 1));
        assert!(m.dirty_lines(evicted).is_empty());
    }

    #[test]
    fn fence_waits_for_pending_clwb() {
        let p = parse_trace("store 0x1000 8 1\nclwb 0x1000\nsfence").unwrap();
        let m = Machine::new(&p).unwrap();
        let s1 = step(&m.successors(&m.initial()), Transition::Exec { index: 0 }).unwrap().clone();
        let s2 = step(&m.successors(&s1), Transition::Exec { index: 1 }).unwrap().clone();
        assert_eq!(m.pending_flushes(&s2), vec![(CacheLineId::of(0x1000), 1)]);
        let succ = m.successors(&s2);
        assert!(step(&succ, Transition::Exec { index: 2 }).is_none());
        let done = step(&succ, Transition::CompleteFlush { line: CacheLineId::of(0x1000), origin: 1 })
            .unwrap();
        assert!(!done.has_pending());
        assert!(step(&m.successors(done), Transition::Exec { index: 2 }).is_some());
    }

    #[test]
    fn clflush_waits_for_pending_obligations() {
        let p = parse_trace("store 0x1000 8 1\nclwb 0x1000\nclflush 0x1040").unwrap();
        let m = Machine::new(&p).unwrap();
        let mut s = m.initial();
        for i in 0..2 {
            s = step(&m.successors(&s), Transition::Exec { index: i }).unwrap().clone();
        }
        assert!(step(&m.successors(&s), Transition::Exec { index: 2 }).is_none());
    }

    #[test]
    fn clflush_persists_on_execute() {
        let p = parse_trace("store 0x1000 8 5\nclflush 0x1000").unwrap();
        let m = Machine::new(&p).unwrap();
        let mut s = m.initial();
        for i in 0..2 {
            s = step(&m.successors(&s), Transition::Exec { index: i }).unwrap().clone();
        }
        assert_eq!(m.persisted_image(&s), CrashImage::zero().with_value(0x1000, 8, 5));
        assert!(m.successors(&s).is_empty());
    }

    #[test]
    fn load_and_final_state_have_no_effect() {
        let p = parse_trace("load 0x1000 8").unwrap();
        let m = Machine::new(&p).unwrap();
        let succ = m.successors(&m.initial());
        assert_eq!(succ.len(), 1);
        assert!(m.is_final(&succ[0].1));
        assert!(m.successors(&succ[0].1).is_empty());
    }

    #[test]
    fn storing_the_persisted_value_is_not_dirty() {
        let p = parse_trace("store 0x1000 8 0").unwrap();
        let m = Machine::new(&p).unwrap();
        let s1 = &m.successors(&m.initial())[0].1;
        assert!(m.dirty_lines(s1).is_empty());
    }

    #[test]
    fn image_display_trims_trailing_zero_bytes() {
        let img = CrashImage::zero().with_value(0x1000, 8, 0x2a).with_value(0x1044, 1, 1);
        assert_eq!(img.to_string(), "{0x1000=2a, 0x1040=0000000001}");
        assert_eq!(CrashImage::zero().to_string(), "{}");
        assert_eq!(img.read(CacheLineId::of(0x1040), 4, 1), 1);
    }
}
