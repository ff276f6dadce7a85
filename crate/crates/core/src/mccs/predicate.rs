//! Consistency predicates over persisted images.
//!
//! Text format, one rule per line, `#` starts a comment:
//!
//! ```text
//! allow 0x1000=01, 0x1040=0000000001
//! allow {0x1000=02}
//! allow
//! order 0x1000:0:8=1 before 0x1040:8:4=0x2a
//! ```
//!
//! `allow` lists one acceptable image. Each entry names a line base address
//! and the line's leading bytes in hex; missing bytes and unlisted lines are
//! zero. A bare `allow` is the all-zero image. The braces match how crash
//! images are printed, so a witness can be pasted back in.
//!
//! `order A before B` holds for an image unless condition B is visible in
//! it while condition A is not. A condition is `line:offset:size=value`
//! with the value read little-endian.
//!
//! A file uses either `allow` or `order` rules. A file with no rules accepts
//! every image.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::crash::CrashStateSet;
use crate::model::{CrashImage, LineBytes, ZERO_LINE};
use crate::trace::{parse_addr, parse_uint, CacheLineId, LINE_SIZE};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("predicate line {line}: {message}")]
pub struct PredicateError {
    pub line: usize,
    pub message: String,
}

/// `value` stored little-endian in `size` bytes at `offset` of `line`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Condition {
    pub line: CacheLineId,
    pub offset: u8,
    pub size: u8,
    pub value: u64,
}

impl Condition {
    pub fn new(line: CacheLineId, offset: u8, size: u8, value: u64) -> Result<Self, String> {
        if !matches!(size, 1 | 2 | 4 | 8) {
            return Err(format!("size {size} is not one of 1, 2, 4, 8"));
        }
        if u64::from(offset) + u64::from(size) > LINE_SIZE {
            return Err(format!("{size} bytes at offset {offset} run past the line"));
        }
        if size < 8 && value >> (u32::from(size) * 8) != 0 {
            return Err(format!("value {value} does not fit in {size} bytes"));
        }
        Ok(Condition { line, offset, size, value })
    }

    pub fn holds(&self, image: &CrashImage) -> bool {
        image.read(self.line, usize::from(self.offset), usize::from(self.size)) == self.value
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}={}", self.line, self.offset, self.size, self.value)
    }
}

/// `first` must be persisted no later than `then`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct OrderRule {
    pub first: Condition,
    pub then: Condition,
}

impl OrderRule {
    pub fn holds(&self, image: &CrashImage) -> bool {
        !self.then.holds(image) || self.first.holds(image)
    }
}

impl fmt::Display for OrderRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "order {} before {}", self.first, self.then)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConsistencyPredicate {
    AllowAll,
    Allowed(BTreeSet<CrashImage>),
    Ordering(Vec<OrderRule>),
}

impl ConsistencyPredicate {
    pub fn holds(&self, image: &CrashImage) -> bool {
        match self {
            ConsistencyPredicate::AllowAll => true,
            ConsistencyPredicate::Allowed(set) => set.contains(image),
            ConsistencyPredicate::Ordering(rules) => rules.iter().all(|r| r.holds(image)),
        }
    }

    /// First rejected state in canonical order.
    pub fn first_violation<'a>(&self, states: &'a CrashStateSet) -> Option<&'a CrashImage> {
        states.iter().find(|s| !self.holds(s))
    }
}

impl fmt::Display for ConsistencyPredicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConsistencyPredicate::AllowAll => Ok(()),
            ConsistencyPredicate::Allowed(set) => {
                for image in set {
                    writeln!(f, "allow {image}")?;
                }
                Ok(())
            }
            ConsistencyPredicate::Ordering(rules) => {
                for rule in rules {
                    writeln!(f, "{rule}")?;
                }
                Ok(())
            }
        }
    }
}

impl FromStr for ConsistencyPredicate {
    type Err = PredicateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_predicate(s)
    }
}

pub fn parse_predicate(text: &str) -> Result<ConsistencyPredicate, PredicateError> {
    let mut allowed = BTreeSet::new();
    let mut rules = Vec::new();
    let mut first_kind: Option<&str> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let err = |message: String| PredicateError { line, message };
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (keyword, rest) = body.split_once(char::is_whitespace).unwrap_or((body, ""));
        match keyword {
            "allow" | "order" => {}
            other => return Err(err(format!("unknown rule `{other}`"))),
        }
        match first_kind {
            Some(k) if k != keyword => {
                return Err(err(format!("`{keyword}` rule in a file of `{k}` rules")));
            }
            _ => first_kind = Some(if keyword == "allow" { "allow" } else { "order" }),
        }
        if keyword == "allow" {
            allowed.insert(parse_image(rest.trim()).map_err(err)?);
        } else {
            rules.push(parse_order(rest.trim()).map_err(err)?);
        }
    }
    Ok(match first_kind {
        None => ConsistencyPredicate::AllowAll,
        Some("allow") => ConsistencyPredicate::Allowed(allowed),
        Some(_) => ConsistencyPredicate::Ordering(rules),
    })
}

fn parse_line_base(s: &str) -> Result<CacheLineId, String> {
    let addr = parse_addr(s)?;
    if addr % LINE_SIZE != 0 {
        return Err(format!("line address {addr:#x} is not 64-byte aligned"));
    }
    Ok(CacheLineId::of(addr))
}

fn parse_image(spec: &str) -> Result<CrashImage, String> {
    let spec = match spec.strip_prefix('{') {
        Some(inner) => inner.strip_suffix('}').ok_or("unclosed `{`")?.trim(),
        None => spec,
    };
    let mut lines = Vec::new();
    let mut seen = BTreeSet::new();
    for entry in spec.split(',').map(str::trim).filter(|e| !e.is_empty()) {
        let (addr, hex) = entry
            .split_once('=')
            .ok_or_else(|| format!("entry `{entry}` is not `line=hexbytes`"))?;
        let line = parse_line_base(addr.trim())?;
        if !seen.insert(line) {
            return Err(format!("line {line} listed twice"));
        }
        lines.push((line, parse_line_bytes(hex.trim())?));
    }
    Ok(CrashImage::from_lines(lines))
}

fn parse_line_bytes(hex: &str) -> Result<LineBytes, String> {
    if !hex.len().is_multiple_of(2) {
        return Err(format!("`{hex}` has an odd number of hex digits"));
    }
    if hex.len() / 2 > LINE_SIZE as usize {
        return Err(format!("`{hex}` is longer than a cache line"));
    }
    let mut bytes = ZERO_LINE;
    for (i, pair) in hex.as_bytes().chunks(2).enumerate() {
        let pair = std::str::from_utf8(pair).map_err(|_| format!("`{hex}` is not hex"))?;
        bytes[i] = u8::from_str_radix(pair, 16).map_err(|_| format!("`{hex}` is not hex"))?;
    }
    Ok(bytes)
}

fn parse_order(rest: &str) -> Result<OrderRule, String> {
    let words: Vec<&str> = rest.split_whitespace().collect();
    match words.as_slice() {
        [a, "before", b] => Ok(OrderRule { first: parse_condition(a)?, then: parse_condition(b)? }),
        _ => Err("expected `order <line>:<off>:<size>=<value> before <line>:<off>:<size>=<value>`".into()),
    }
}

fn parse_condition(s: &str) -> Result<Condition, String> {
    let (loc, value) = s.split_once('=').ok_or_else(|| format!("condition `{s}` lacks `=`"))?;
    let parts: Vec<&str> = loc.split(':').collect();
    let [line, offset, size] = parts.as_slice() else {
        return Err(format!("condition `{s}` is not `line:offset:size=value`"));
    };
    let line = parse_line_base(line)?;
    let offset: u8 = offset.parse().map_err(|_| format!("bad offset `{offset}`"))?;
    let size: u8 = size.parse().map_err(|_| format!("bad size `{size}`"))?;
    Condition::new(line, offset, size, parse_uint(value)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(pairs: &[(u64, u64)]) -> CrashImage {
        pairs.iter().fold(CrashImage::zero(), |i, &(a, v)| i.with_value(a, 8, v))
    }

    #[test]
    fn empty_file_allows_everything() {
        let p = parse_predicate("# nothing\n\n").unwrap();
        assert_eq!(p, ConsistencyPredicate::AllowAll);
        assert!(p.holds(&img(&[(0x1000, 7)])));
    }

    #[test]
    fn allow_lines_and_zero_image() {
        let p = parse_predicate("allow\nallow 0x1000=01, 0x1040=0000000000000000").unwrap();
        assert!(p.holds(&CrashImage::zero()));
        assert!(p.holds(&img(&[(0x1000, 1)])));
        assert!(!p.holds(&img(&[(0x1040, 1)])));
    }

    #[test]
    fn printed_image_parses_back() {
        let image = img(&[(0x1000, 0x2a), (0x1048, 1)]);
        let p = parse_predicate(&format!("allow {image}")).unwrap();
        assert!(p.holds(&image));
        assert_eq!(parse_predicate(&p.to_string()).unwrap(), p);
    }

    #[test]
    fn order_rule_semantics() {
        let p = parse_predicate("order 0x1000:0:8=1 before 0x1040:0:8=1").unwrap();
        assert!(p.holds(&CrashImage::zero()));
        assert!(p.holds(&img(&[(0x1000, 1)])));
        assert!(p.holds(&img(&[(0x1000, 1), (0x1040, 1)])));
        assert!(!p.holds(&img(&[(0x1040, 1)])));
        assert_eq!(parse_predicate(&p.to_string()).unwrap(), p);
    }

    #[test]
    fn order_condition_reads_subfield() {
        let p = parse_predicate("order 0x1000:8:4=0x2a before 0x1000:0:1=3").unwrap();
        let base = CrashImage::zero().with_value(0x1000, 1, 3);
        assert!(!p.holds(&base));
        assert!(p.holds(&base.with_value(0x1008, 4, 0x2a)));
    }

    #[test]
    fn rejects_bad_input() {
        let cases = [
            "allow 0x1000=01\norder 0x1000:0:8=1 before 0x1040:0:8=1",
            "permit 0x1000=01",
            "allow 0x1001=01",
            "allow 0x1000=1",
            "allow 0x1000=zz",
            "allow 0x1000=01, 0x1000=02",
            "order 0x1000:60:8=1 before 0x1040:0:8=1",
            "order 0x1000:0:3=1 before 0x1040:0:8=1",
            "order 0x1000:0:1=256 before 0x1040:0:8=1",
            "order 0x1000:0:8=1 after 0x1040:0:8=1",
        ];
        for text in cases {
            assert!(parse_predicate(text).is_err(), "{text}");
        }
        let e = parse_predicate("allow\n\nfoo").unwrap_err();
        assert_eq!(e.line, 3);
    }
}
