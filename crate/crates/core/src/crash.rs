//! Exhaustive crash-state enumeration and crash equivalence.

use std::collections::{BTreeSet, HashSet};
use std::fmt;

use serde::Serialize;
use thiserror::Error;

use crate::model::{CrashImage, Machine, ModelError, MAX_MODEL_OPS};
use crate::trace::TraceProgram;

/// Resource limits for enumeration. Exceeding any of them is an error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bounds {
    pub max_ops: usize,
    pub max_lines: usize,
    pub max_states: usize,
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds { max_ops: 16, max_lines: 4, max_states: 1_000_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnumerateError {
    #[error("program has {ops} ops, bound is {max}")]
    TooManyOps { ops: usize, max: usize },
    #[error("program touches {lines} cache lines, bound is {max}")]
    TooManyLines { lines: usize, max: usize },
    #[error("state limit of {max} explored states exceeded")]
    StateLimit { max: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Every persisted image reachable at some crash point, in canonical order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
#[serde(transparent)]
pub struct CrashStateSet {
    states: BTreeSet<CrashImage>,
}

impl CrashStateSet {
    pub fn contains(&self, image: &CrashImage) -> bool {
        self.states.contains(image)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &CrashImage> {
        self.states.iter()
    }

    pub fn is_subset(&self, other: &CrashStateSet) -> bool {
        self.states.is_subset(&other.states)
    }

    pub fn difference<'a>(&'a self, other: &'a CrashStateSet) -> impl Iterator<Item = &'a CrashImage> {
        self.states.difference(&other.states)
    }
}

impl FromIterator<CrashImage> for CrashStateSet {
    fn from_iter<I: IntoIterator<Item = CrashImage>>(iter: I) -> Self {
        CrashStateSet { states: iter.into_iter().collect() }
    }
}

impl<'a> IntoIterator for &'a CrashStateSet {
    type Item = &'a CrashImage;
    type IntoIter = std::collections::btree_set::Iter<'a, CrashImage>;

    fn into_iter(self) -> Self::IntoIter {
        self.states.iter()
    }
}

/// Statistics of one enumeration run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct ExploreStats {
    pub states: usize,
    pub transitions: usize,
}

pub fn enumerate_crash_states(
    program: &TraceProgram,
    bounds: Bounds,
) -> Result<CrashStateSet, EnumerateError> {
    enumerate_with_stats(program, bounds).map(|(set, _)| set)
}

/// Depth-first search over [`Machine::successors`] from the initial state,
/// recording the persisted image of every reachable state.
pub fn enumerate_with_stats(
    program: &TraceProgram,
    bounds: Bounds,
) -> Result<(CrashStateSet, ExploreStats), EnumerateError> {
    check_bounds(program, bounds)?;
    let machine = Machine::new(program)?;

    let initial = machine.initial();
    let mut seen = HashSet::new();
    let mut persisted = HashSet::new();
    let mut stack = vec![initial.clone()];
    seen.insert(initial);
    let mut stats = ExploreStats::default();

    while let Some(state) = stack.pop() {
        stats.states += 1;
        if !persisted.contains(machine.persisted_key(&state)) {
            persisted.insert(machine.persisted_key(&state).to_vec());
        }
        for (_, next) in machine.successors(&state) {
            stats.transitions += 1;
            if seen.contains(&next) {
                continue;
            }
            if seen.len() >= bounds.max_states {
                return Err(EnumerateError::StateLimit { max: bounds.max_states });
            }
            seen.insert(next.clone());
            stack.push(next);
        }
    }

    let set = persisted.iter().map(|classes: &Vec<u16>| machine.image(classes)).collect();
    Ok((set, stats))
}

fn check_bounds(program: &TraceProgram, bounds: Bounds) -> Result<(), EnumerateError> {
    let max_ops = bounds.max_ops.min(MAX_MODEL_OPS);
    if program.len() > max_ops {
        return Err(EnumerateError::TooManyOps { ops: program.len(), max: max_ops });
    }
    let lines = program.line_count();
    if lines > bounds.max_lines {
        return Err(EnumerateError::TooManyLines { lines, max: bounds.max_lines });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Equal,
    /// The first program's crash states are a strict subset of the second's.
    P1Subset,
    /// The second program's crash states are a strict subset of the first's.
    P2Subset,
    Incomparable,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Equal => "EQUAL",
            Verdict::P1Subset => "P1_SUBSET",
            Verdict::P2Subset => "P2_SUBSET",
            Verdict::Incomparable => "INCOMPARABLE",
        })
    }
}

/// Outcome of comparing two programs' crash-state sets. The witness lists
/// hold every image present in exactly one of the sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Equivalence {
    pub verdict: Verdict,
    pub only_in_first: Vec<CrashImage>,
    pub only_in_second: Vec<CrashImage>,
}

pub fn crash_equivalent(
    first: &TraceProgram,
    second: &TraceProgram,
    bounds: Bounds,
) -> Result<Equivalence, EnumerateError> {
    let a = enumerate_crash_states(first, bounds)?;
    let b = enumerate_crash_states(second, bounds)?;
    Ok(compare_sets(&a, &b))
}

pub fn compare_sets(a: &CrashStateSet, b: &CrashStateSet) -> Equivalence {
    let only_in_first: Vec<_> = a.difference(b).cloned().collect();
    let only_in_second: Vec<_> = b.difference(a).cloned().collect();
    let verdict = match (only_in_first.is_empty(), only_in_second.is_empty()) {
        (true, true) => Verdict::Equal,
        (true, false) => Verdict::P1Subset,
        (false, true) => Verdict::P2Subset,
        (false, false) => Verdict::Incomparable,
    };
    Equivalence { verdict, only_in_first, only_in_second }
}
