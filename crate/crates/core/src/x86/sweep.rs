//! Anchored linear sweep.

use std::collections::BTreeSet;

use super::decode::{decode_one, DecodedInstruction, InstrClass};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunEnd {
    /// Reached the end of the region.
    RegionEnd,
    /// Reached the next anchor exactly.
    Anchor,
    /// The next instruction would have run past the next anchor; it was dropped.
    AnchorOverlap,
    /// The last instruction of the run is undecodable.
    Undecodable,
}

/// Instructions decoded sequentially from one anchor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Run {
    pub anchor: usize,
    pub instructions: Vec<DecodedInstruction>,
    pub end: RunEnd,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Sweep {
    pub runs: Vec<Run>,
}

impl Sweep {
    pub fn instructions(&self) -> impl Iterator<Item = &DecodedInstruction> {
        self.runs.iter().flat_map(|r| r.instructions.iter())
    }
}

/// Decodes from each anchor until the next anchor, an undecodable byte, or
/// the end of `section`. Anchors outside the region are ignored and
/// duplicates collapse.
pub fn linear_sweep(section: &[u8], anchors: &[usize]) -> Sweep {
    let anchors: BTreeSet<usize> = anchors.iter().copied().filter(|&a| a < section.len()).collect();
    let anchors: Vec<usize> = anchors.into_iter().collect();
    let mut runs = Vec::with_capacity(anchors.len());
    for (k, &anchor) in anchors.iter().enumerate() {
        let limit = anchors.get(k + 1).copied().unwrap_or(section.len());
        let mut instructions = Vec::new();
        let mut pos = anchor;
        let end = loop {
            if pos == section.len() {
                break RunEnd::RegionEnd;
            }
            if pos == limit {
                break RunEnd::Anchor;
            }
            let insn = decode_one(section, pos).expect("position is inside the section");
            if insn.end() > limit && limit < section.len() {
                break RunEnd::AnchorOverlap;
            }
            pos = insn.end();
            let undecodable = insn.class == InstrClass::Undecodable;
            instructions.push(insn);
            if undecodable {
                break RunEnd::Undecodable;
            }
        };
        runs.push(Run { anchor, instructions, end });
    }
    Sweep { runs }
}

/// A flush and its context inside a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlushSite {
    pub instr: DecodedInstruction,
    /// The instruction right after the flush in the same run, if any.
    pub next: Option<DecodedInstruction>,
    /// Index of the run in [`Sweep::runs`].
    pub run: usize,
    /// Index of the flush within its run.
    pub position: usize,
}

/// One site per `clflush`, and per `clflushopt` when `include_clflushopt`.
pub fn find_flush_sites(sweep: &Sweep, include_clflushopt: bool) -> Vec<FlushSite> {
    let mut sites = Vec::new();
    for (r, run) in sweep.runs.iter().enumerate() {
        for (i, insn) in run.instructions.iter().enumerate() {
            let wanted = match insn.class {
                InstrClass::Clflush => true,
                InstrClass::Clflushopt => include_clflushopt,
                _ => false,
            };
            if wanted {
                sites.push(FlushSite {
                    instr: insn.clone(),
                    next: run.instructions.get(i + 1).cloned(),
                    run: r,
                    position: i,
                });
            }
        }
    }
    sites
}

/// Targets of every direct branch, as offsets in the swept region. Targets
/// before the region start are dropped.
pub fn branch_targets<'a>(instructions: impl IntoIterator<Item = &'a DecodedInstruction>) -> BTreeSet<usize> {
    instructions
        .into_iter()
        .filter_map(|i| i.branch_target)
        .filter_map(|t| usize::try_from(t).ok())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    // mov [rdi], rax; clflush [rdi]; sfence
    const STORE_FLUSH_FENCE: [u8; 9] = [0x48, 0x89, 0x07, 0x0F, 0xAE, 0x3F, 0x0F, 0xAE, 0xF8];

    #[test]
    fn single_run_tiles_region() {
        let s = linear_sweep(&STORE_FLUSH_FENCE, &[0]);
        assert_eq!(s.runs.len(), 1);
        let offs: Vec<(usize, usize)> = s.instructions().map(|i| (i.offset, i.length)).collect();
        assert_eq!(offs, vec![(0, 3), (3, 3), (6, 3)]);
        assert_eq!(s.runs[0].end, RunEnd::RegionEnd);
    }

    #[test]
    fn stops_at_undecodable() {
        let bytes = [0x90, 0x06, 0x90];
        let s = linear_sweep(&bytes, &[0]);
        assert_eq!(s.runs[0].instructions.len(), 2);
        assert_eq!(s.runs[0].end, RunEnd::Undecodable);
    }

    #[test]
    fn runs_do_not_cross_anchors() {
        // Second anchor in the middle of the mov.
        let s = linear_sweep(&STORE_FLUSH_FENCE, &[0, 2]);
        assert_eq!(s.runs.len(), 2);
        assert!(s.runs[0].instructions.is_empty());
        assert_eq!(s.runs[0].end, RunEnd::AnchorOverlap);
        assert_eq!(s.runs[1].anchor, 2);
        // 07 is invalid in 64-bit mode.
        assert_eq!(s.runs[1].instructions[0].class, InstrClass::Undecodable);

        let s = linear_sweep(&STORE_FLUSH_FENCE, &[6, 0, 3, 3, 100]);
        let anchors: Vec<usize> = s.runs.iter().map(|r| r.anchor).collect();
        assert_eq!(anchors, vec![0, 3, 6]);
        assert!(s.runs.iter().all(|r| r.instructions.len() == 1));
        assert_eq!(s.runs[0].end, RunEnd::Anchor);
    }

    #[test]
    fn flush_sites_pair_with_successor() {
        let mut bytes = vec![0x0F, 0xAE, 0x3F, 0x0F, 0xAE, 0xF8, 0xC3];
        let s = linear_sweep(&bytes, &[0]);
        let sites = find_flush_sites(&s, false);
        assert_eq!(sites.len(), 1);
        assert_eq!(sites[0].next.as_ref().unwrap().class, InstrClass::Sfence);

        bytes = vec![0x66, 0x0F, 0xAE, 0x37, 0x0F, 0xAE, 0xF8];
        assert!(find_flush_sites(&linear_sweep(&bytes, &[0]), true).is_empty());

        bytes = vec![0x90, 0x0F, 0xAE, 0x3F];
        let sites = find_flush_sites(&linear_sweep(&bytes, &[0]), false);
        assert_eq!(sites.len(), 1);
        assert!(sites[0].next.is_none());
    }

    #[test]
    fn clflushopt_sites_are_opt_in() {
        let bytes = [0x66, 0x0F, 0xAE, 0x3F];
        let s = linear_sweep(&bytes, &[0]);
        assert!(find_flush_sites(&s, false).is_empty());
        assert_eq!(find_flush_sites(&s, true).len(), 1);
    }

    #[test]
    fn targets() {
        let mut code = vec![0xE9, 0x3B, 0, 0, 0];
        code.resize(0x41, 0x90);
        assert_eq!(branch_targets(linear_sweep(&code, &[0]).instructions()), BTreeSet::from([0x40]));
        assert!(branch_targets(linear_sweep(&[0x90, 0xC3], &[0]).instructions()).is_empty());
        // call +0; je -2
        let code = [0xE8, 0, 0, 0, 0, 0x74, 0xFE];
        assert_eq!(branch_targets(linear_sweep(&code, &[0]).instructions()), BTreeSet::from([5, 5]));
    }
}
