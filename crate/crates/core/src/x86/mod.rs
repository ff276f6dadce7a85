//! x86-64 length decoding and flush-site discovery.

mod decode;
mod encode;
mod sweep;
mod tables;

pub use decode::{decode_one, DecodeError, DecodedInstruction, InstrClass, Layout, MAX_INSN_LEN};
pub use encode::{canonical, clwb_from_flush, jmp_rel32, Encoded, INT3, SFENCE};
pub use sweep::{branch_targets, find_flush_sites, linear_sweep, FlushSite, Run, RunEnd, Sweep};
