//! Persistency-relevant operation traces.
//!
//! A trace is the single-threaded stream of stores, loads, flushes and
//! fences a PM program issues. The text format is one operation per line:
//!
//! ```text
//! # comment
//! store 0x1000 8 1
//! load 0x1008 8
//! clflush 0x1000
//! clflushopt 0x1000
//! clwb 0x1000
//! sfence
//! mfence
//! ```
//!
//! Addresses are hex with a `0x` prefix, sizes are one of 1, 2, 4 or 8, and
//! store values are unsigned integers (decimal or `0x` hex) that must fit in
//! the access size.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Serialize, Serializer};
use thiserror::Error;

/// Bytes per cache line.
pub const LINE_SIZE: u64 = 64;

/// A 64-byte cache line, identified by `addr >> 6`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CacheLineId(pub u64);

impl CacheLineId {
    pub fn of(addr: u64) -> Self {
        CacheLineId(addr >> 6)
    }

    /// Address of the first byte of the line.
    pub fn base(self) -> u64 {
        self.0 << 6
    }
}

impl fmt::Display for CacheLineId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#x}", self.base())
    }
}

impl Serialize for CacheLineId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FlushKind {
    Clflush,
    Clflushopt,
    Clwb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FenceKind {
    Sfence,
    Mfence,
}

/// Operation kind without operands.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OpKind {
    Store,
    Load,
    Clflush,
    Clflushopt,
    Clwb,
    Sfence,
    Mfence,
}

impl OpKind {
    pub fn mnemonic(self) -> &'static str {
        match self {
            OpKind::Store => "store",
            OpKind::Load => "load",
            OpKind::Clflush => "clflush",
            OpKind::Clflushopt => "clflushopt",
            OpKind::Clwb => "clwb",
            OpKind::Sfence => "sfence",
            OpKind::Mfence => "mfence",
        }
    }

    /// Flushes and fences: the ops a persistency constraint is made of.
    pub fn is_constraint(self) -> bool {
        !matches!(self, OpKind::Store | OpKind::Load)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.mnemonic())
    }
}

impl From<FlushKind> for OpKind {
    fn from(k: FlushKind) -> Self {
        match k {
            FlushKind::Clflush => OpKind::Clflush,
            FlushKind::Clflushopt => OpKind::Clflushopt,
            FlushKind::Clwb => OpKind::Clwb,
        }
    }
}

impl From<FenceKind> for OpKind {
    fn from(k: FenceKind) -> Self {
        match k {
            FenceKind::Sfence => OpKind::Sfence,
            FenceKind::Mfence => OpKind::Mfence,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TraceOp {
    Store { addr: u64, size: u8, value: u64 },
    Load { addr: u64, size: u8 },
    Flush { kind: FlushKind, addr: u64 },
    Fence(FenceKind),
}

impl TraceOp {
    pub fn store(addr: u64, size: u8, value: u64) -> Self {
        TraceOp::Store { addr, size, value }
    }

    pub fn load(addr: u64, size: u8) -> Self {
        TraceOp::Load { addr, size }
    }

    pub fn clflush(addr: u64) -> Self {
        TraceOp::Flush { kind: FlushKind::Clflush, addr }
    }

    pub fn clflushopt(addr: u64) -> Self {
        TraceOp::Flush { kind: FlushKind::Clflushopt, addr }
    }

    pub fn clwb(addr: u64) -> Self {
        TraceOp::Flush { kind: FlushKind::Clwb, addr }
    }

    pub fn sfence() -> Self {
        TraceOp::Fence(FenceKind::Sfence)
    }

    pub fn mfence() -> Self {
        TraceOp::Fence(FenceKind::Mfence)
    }

    pub fn kind(&self) -> OpKind {
        match *self {
            TraceOp::Store { .. } => OpKind::Store,
            TraceOp::Load { .. } => OpKind::Load,
            TraceOp::Flush { kind, .. } => kind.into(),
            TraceOp::Fence(kind) => kind.into(),
        }
    }

    pub fn addr(&self) -> Option<u64> {
        match *self {
            TraceOp::Store { addr, .. } | TraceOp::Load { addr, .. } | TraceOp::Flush { addr, .. } => {
                Some(addr)
            }
            TraceOp::Fence(_) => None,
        }
    }

    pub fn line(&self) -> Option<CacheLineId> {
        self.addr().map(CacheLineId::of)
    }

    pub fn is_fence(&self) -> bool {
        matches!(self, TraceOp::Fence(_))
    }

    fn validate(&self) -> Result<(), OpError> {
        match *self {
            TraceOp::Store { addr, size, value } => {
                check_access(addr, size)?;
                if size < 8 && value >> (u32::from(size) * 8) != 0 {
                    return Err(OpError::ValueTooWide { value, size });
                }
                Ok(())
            }
            TraceOp::Load { addr, size } => check_access(addr, size),
            TraceOp::Flush { .. } | TraceOp::Fence(_) => Ok(()),
        }
    }
}

fn check_access(addr: u64, size: u8) -> Result<(), OpError> {
    if !matches!(size, 1 | 2 | 4 | 8) {
        return Err(OpError::BadSize(size));
    }
    if addr % LINE_SIZE + u64::from(size) > LINE_SIZE {
        return Err(OpError::Straddle { addr, size });
    }
    Ok(())
}

impl fmt::Display for TraceOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            TraceOp::Store { addr, size, value } => write!(f, "store {addr:#x} {size} {value}"),
            TraceOp::Load { addr, size } => write!(f, "load {addr:#x} {size}"),
            TraceOp::Flush { kind, addr } => write!(f, "{} {addr:#x}", OpKind::from(kind)),
            TraceOp::Fence(kind) => write!(f, "{}", OpKind::from(kind)),
        }
    }
}

/// Violations of the per-op invariants.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OpError {
    #[error("access size {0} is not one of 1, 2, 4, 8")]
    BadSize(u8),
    #[error("access at {addr:#x} of {size} bytes straddles a cache-line boundary")]
    Straddle { addr: u64, size: u8 },
    #[error("value {value} does not fit in {size} bytes")]
    ValueTooWide { value: u64, size: u8 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TraceError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: {source}")]
    Op { line: usize, source: OpError },
    #[error("op {index}: {source}")]
    InvalidOp { index: usize, source: OpError },
}

/// An ordered list of trace operations. Index `i` executes before `i + 1`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct TraceProgram {
    ops: Vec<TraceOp>,
    source_lines: Vec<usize>,
}

impl TraceProgram {
    /// Builds a program from ops, checking the access invariants.
    pub fn new(ops: Vec<TraceOp>) -> Result<Self, TraceError> {
        for (index, op) in ops.iter().enumerate() {
            op.validate().map_err(|source| TraceError::InvalidOp { index, source })?;
        }
        let source_lines = (1..=ops.len()).collect();
        Ok(TraceProgram { ops, source_lines })
    }

    pub fn ops(&self) -> &[TraceOp] {
        &self.ops
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Source line of op `index` (1-based); synthetic programs number ops sequentially.
    pub fn source_line(&self, index: usize) -> Option<usize> {
        self.source_lines.get(index).copied()
    }

    /// Distinct cache lines referenced by any store, load or flush, ascending.
    pub fn lines(&self) -> Vec<CacheLineId> {
        self.ops
            .iter()
            .filter_map(TraceOp::line)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn line_count(&self) -> usize {
        self.lines().len()
    }

    pub fn into_ops(self) -> Vec<TraceOp> {
        self.ops
    }
}

impl fmt::Display for TraceProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for op in &self.ops {
            writeln!(f, "{op}")?;
        }
        Ok(())
    }
}

impl FromStr for TraceProgram {
    type Err = TraceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_trace(s)
    }
}

/// Parses the trace text format.
pub fn parse_trace(text: &str) -> Result<TraceProgram, TraceError> {
    let mut ops = Vec::new();
    let mut source_lines = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let op = parse_op(body).map_err(|message| TraceError::Syntax { line, message })?;
        op.validate().map_err(|source| TraceError::Op { line, source })?;
        ops.push(op);
        source_lines.push(line);
    }
    Ok(TraceProgram { ops, source_lines })
}

fn parse_op(body: &str) -> Result<TraceOp, String> {
    let mut words = body.split_whitespace();
    let mnemonic = words.next().unwrap_or_default();
    let args: Vec<&str> = words.collect();
    let arity = |n: usize| {
        if args.len() == n {
            Ok(())
        } else {
            Err(format!("`{mnemonic}` takes {n} operand(s), found {}", args.len()))
        }
    };
    match mnemonic {
        "store" => {
            arity(3)?;
            Ok(TraceOp::Store {
                addr: parse_addr(args[0])?,
                size: parse_size(args[1])?,
                value: parse_uint(args[2])?,
            })
        }
        "load" => {
            arity(2)?;
            Ok(TraceOp::Load { addr: parse_addr(args[0])?, size: parse_size(args[1])? })
        }
        "clflush" | "clflushopt" | "clwb" => {
            if args.is_empty() {
                return Err(format!("`{mnemonic}` requires an address"));
            }
            arity(1)?;
            let addr = parse_addr(args[0])?;
            Ok(match mnemonic {
                "clflush" => TraceOp::clflush(addr),
                "clflushopt" => TraceOp::clflushopt(addr),
                _ => TraceOp::clwb(addr),
            })
        }
        "sfence" | "mfence" => {
            if !args.is_empty() {
                return Err(format!("fence `{mnemonic}` takes no address"));
            }
            Ok(if mnemonic == "sfence" { TraceOp::sfence() } else { TraceOp::mfence() })
        }
        other => Err(format!("unknown operation `{other}`")),
    }
}

pub(crate) fn parse_addr(s: &str) -> Result<u64, String> {
    let hex = s
        .strip_prefix("0x")
        .or_else(|| s.strip_prefix("0X"))
        .ok_or_else(|| format!("address `{s}` must be hex with a 0x prefix"))?;
    u64::from_str_radix(hex, 16).map_err(|e| format!("bad address `{s}`: {e}"))
}

fn parse_size(s: &str) -> Result<u8, String> {
    match s {
        "1" => Ok(1),
        "2" => Ok(2),
        "4" => Ok(4),
        "8" => Ok(8),
        _ => Err(format!("size `{s}` is not one of 1, 2, 4, 8")),
    }
}

pub(crate) fn parse_uint(s: &str) -> Result<u64, String> {
    let parsed = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16),
        None => s.parse::<u64>(),
    };
    parsed.map_err(|e| format!("bad value `{s}`: {e}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_three_op_program() {
        let p = parse_trace("store 0x1000 8 1\nclflush 0x1000\nsfence").unwrap();
        assert_eq!(
            p.ops(),
            &[TraceOp::store(0x1000, 8, 1), TraceOp::clflush(0x1000), TraceOp::sfence()]
        );
        assert_eq!(p.line_count(), 1);
    }

    #[test]
    fn empty_file_is_empty_program() {
        assert!(parse_trace("").unwrap().is_empty());
        assert!(parse_trace("# nothing\n\n   \n").unwrap().is_empty());
    }

    #[test]
    fn straddling_store_is_rejected() {
        let err = parse_trace("store 0x103C 8 1").unwrap_err();
        assert_eq!(
            err,
            TraceError::Op { line: 1, source: OpError::Straddle { addr: 0x103c, size: 8 } }
        );
    }

    #[test]
    fn fence_with_address_is_rejected() {
        let err = parse_trace("store 0x0 1 1\nsfence 0x40").unwrap_err();
        assert!(matches!(err, TraceError::Syntax { line: 2, .. }), "{err}");
    }

    #[test]
    fn syntax_errors_carry_line_numbers() {
        let err = parse_trace("# header\n\nstore 0x10 3 1").unwrap_err();
        assert!(matches!(err, TraceError::Syntax { line: 3, .. }));
        let err = parse_trace("flush 0x10").unwrap_err();
        assert!(err.to_string().contains("unknown operation"));
        let err = parse_trace("clwb 4096").unwrap_err();
        assert!(err.to_string().contains("0x prefix"));
    }

    #[test]
    fn value_must_fit_access_size() {
        assert!(parse_trace("store 0x0 1 255").is_ok());
        let err = parse_trace("store 0x0 1 256").unwrap_err();
        assert!(matches!(err, TraceError::Op { source: OpError::ValueTooWide { .. }, .. }));
    }

    #[test]
    fn comments_and_source_lines() {
        let p = parse_trace("# c\nstore 0x40 4 7 # trailing\n\nclwb 0x40\n").unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p.source_line(0), Some(2));
        assert_eq!(p.source_line(1), Some(4));
    }

    #[test]
    fn display_round_trips() {
        let text = "store 0x1008 8 3\nload 0x1008 8\nclflushopt 0x1040\nclwb 0x1000\nmfence\nsfence\n";
        let p = parse_trace(text).unwrap();
        assert_eq!(p.to_string(), text);
    }

    #[test]
    fn cache_line_ids() {
        assert_eq!(CacheLineId::of(0x1000), CacheLineId::of(0x103f));
        assert_ne!(CacheLineId::of(0x103f), CacheLineId::of(0x1040));
        assert_eq!(CacheLineId::of(0x1047).to_string(), "0x1040");
    }

    #[test]
    fn new_validates_ops() {
        let err = TraceProgram::new(vec![TraceOp::load(0x3f, 2)]).unwrap_err();
        assert!(matches!(err, TraceError::InvalidOp { index: 0, .. }));
    }
}
