//! Reference semantics, written independently of `pmpatch_core::model`:
//! byte-level maps for both images, an explicit dirty set that every store
//! marks, and a list of obligations. Search is plain DFS over every
//! interleaving with a visited set on the full explicit state.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use pmpatch_core::trace::{FlushKind, TraceOp, TraceProgram};
use pmpatch_core::CrashImage;

type Mem = BTreeMap<u64, [u8; 64]>;

#[derive(Clone, PartialEq, Eq, Hash)]
struct St {
    pc: usize,
    volatile: Mem,
    persisted: Mem,
    dirty: BTreeSet<u64>,
    pending: Vec<(u64, usize)>,
}

fn write_back(s: &mut St, line: u64) {
    let v = s.volatile.get(&line).copied().unwrap_or([0; 64]);
    s.persisted.insert(line, v);
    s.dirty.remove(&line);
}

fn next_states(p: &TraceProgram, s: &St) -> Vec<St> {
    let mut out = Vec::new();
    if s.pc < p.len() {
        let mut n = s.clone();
        n.pc += 1;
        let ok = match p.ops()[s.pc] {
            TraceOp::Store { addr, size, value } => {
                let line = addr / 64;
                let mut bytes = n.volatile.get(&line).copied().unwrap_or([0; 64]);
                let off = (addr % 64) as usize;
                for i in 0..size as usize {
                    bytes[off + i] = (value >> (8 * i)) as u8;
                }
                n.volatile.insert(line, bytes);
                n.dirty.insert(line);
                true
            }
            TraceOp::Load { .. } => true,
            TraceOp::Flush { kind: FlushKind::Clflush, addr } => {
                if s.pending.is_empty() {
                    write_back(&mut n, addr / 64);
                    true
                } else {
                    false
                }
            }
            TraceOp::Flush { addr, .. } => {
                n.pending.push((addr / 64, s.pc));
                true
            }
            TraceOp::Fence(_) => s.pending.is_empty(),
        };
        if ok {
            out.push(n);
        }
    }
    for i in 0..s.pending.len() {
        let mut n = s.clone();
        let (line, _) = n.pending.remove(i);
        write_back(&mut n, line);
        out.push(n);
    }
    for &line in &s.dirty {
        let mut n = s.clone();
        write_back(&mut n, line);
        out.push(n);
    }
    out
}

fn image(m: &Mem) -> CrashImage {
    m.iter().fold(CrashImage::zero(), |img, (&line, bytes)| {
        (0..8).fold(img, |img, w| {
            let word = u64::from_le_bytes(bytes[w * 8..w * 8 + 8].try_into().unwrap());
            img.with_value(line * 64 + w as u64 * 8, 8, word)
        })
    })
}

pub fn crash_states(p: &TraceProgram) -> BTreeSet<CrashImage> {
    let init = St {
        pc: 0,
        volatile: Mem::new(),
        persisted: Mem::new(),
        dirty: BTreeSet::new(),
        pending: Vec::new(),
    };
    let mut seen = HashSet::new();
    let mut out = BTreeSet::new();
    let mut stack = vec![init];
    while let Some(s) = stack.pop() {
        if !seen.insert(s.clone()) {
            continue;
        }
        out.insert(image(&s.persisted));
        stack.extend(next_states(p, &s));
    }
    out
}

/// The image reached by running every op and then writing back every line.
pub fn final_image(p: &TraceProgram) -> CrashImage {
    p.ops().iter().fold(CrashImage::zero(), |img, op| match *op {
        TraceOp::Store { addr, size, value } => img.with_value(addr, size, value),
        _ => img,
    })
}
