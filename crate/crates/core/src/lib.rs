//! Core library for rewriting `clflush` into `clwb` in x86-64 persistent-memory
//! programs, and for checking that such rewrites keep crash consistency.
//!
//! * [`trace`], [`model`], [`crash`], [`rewrite`]: a single-threaded model of
//!   x86 buffered persistency over operation traces, with exhaustive
//!   crash-state enumeration and crash-equivalence checking.
//! * [`census`]: redundant-flush and eviction-refetch counting.
//! * [`x86`]: instruction-length decoding and flush-site discovery.
//! * [`elf`]: ELF loading, patch planning, trampoline injection and
//!   post-patch verification.
//! * [`mccs`]: search for the cheapest set of flushes and fences that keeps
//!   every crash state acceptable.

pub mod census;
pub mod crash;
pub mod elf;
pub mod mccs;
pub mod model;
pub mod rewrite;
pub mod trace;
pub mod x86;

pub use crash::{crash_equivalent, enumerate_crash_states, Bounds, CrashStateSet, Equivalence, Verdict};
pub use model::CrashImage;
pub use rewrite::{rewrite_trace, RewriteRule};
pub use trace::{parse_trace, CacheLineId, TraceOp, TraceProgram};
