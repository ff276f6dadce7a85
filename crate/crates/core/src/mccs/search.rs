use std::collections::{BTreeSet, HashMap};

use serde::{Serialize, Serializer};
use thiserror::Error;

use super::cost::CostModel;
use super::predicate::ConsistencyPredicate;
use crate::crash::{enumerate_crash_states, Bounds, EnumerateError};
use crate::model::CrashImage;
use crate::trace::{OpKind, TraceOp, TraceProgram};

/// Most constraint ops [`exhaustive_optimum`] accepts.
pub const EXHAUSTIVE_MAX_CONSTRAINTS: usize = 10;

use OpKind::{Clflush, Clflushopt, Clwb, Mfence, Sfence};

const CLFLUSH_FORMS: &[&[OpKind]] =
    &[&[Clflush], &[Clwb, Sfence], &[Clflushopt, Sfence], &[Clwb], &[Clflushopt], &[]];
const MFENCE_FORMS: &[&[OpKind]] = &[&[Mfence], &[Sfence], &[]];
const SFENCE_FORMS: &[&[OpKind]] = &[&[Sfence], &[]];
const CLWB_FORMS: &[&[OpKind]] = &[&[Clwb], &[]];
const CLFLUSHOPT_FORMS: &[&[OpKind]] = &[&[Clflushopt], &[]];

/// Replacement forms for a constraint op. Index 0 keeps the op; the rest
/// are listed in tie-break order. Empty for stores and loads.
pub fn forms(kind: OpKind) -> &'static [&'static [OpKind]] {
    match kind {
        Clflush => CLFLUSH_FORMS,
        Mfence => MFENCE_FORMS,
        Sfence => SFENCE_FORMS,
        Clwb => CLWB_FORMS,
        Clflushopt => CLFLUSHOPT_FORMS,
        OpKind::Store | OpKind::Load => &[],
    }
}

fn sub_multiset(small: &[OpKind], big: &[OpKind]) -> bool {
    small.iter().all(|k| {
        small.iter().filter(|x| *x == k).count() <= big.iter().filter(|x| *x == k).count()
    })
}

/// Whether form `lower` sits strictly below form `upper` in the downgrade
/// lattice of `kind`: the original op is the top, and otherwise dropping
/// ops moves down.
pub fn is_below(kind: OpKind, lower: usize, upper: usize) -> bool {
    let f = forms(kind);
    lower != upper && (upper == 0 || sub_multiset(f[lower], f[upper]) && f[lower].len() < f[upper].len())
}

/// Longest strictly descending chain from the original op.
pub fn lattice_depth(kind: OpKind) -> usize {
    fn depth(kind: OpKind, form: usize) -> usize {
        (0..forms(kind).len())
            .filter(|&g| is_below(kind, g, form))
            .map(|g| 1 + depth(kind, g))
            .max()
            .unwrap_or(0)
    }
    depth(kind, 0)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MinimizeError {
    #[error("input program violates the predicate: crash state {witness} is reachable")]
    InputInconsistent { witness: CrashImage },
    #[error("{count} constraint ops exceed the exhaustive search limit of {max}")]
    TooManyConstraints { count: usize, max: usize },
    #[error("minimized program admits crash state {witness}, which the predicate rejects")]
    Unsound { witness: CrashImage },
    #[error(transparent)]
    Enumerate(#[from] EnumerateError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "outcome", content = "to", rename_all = "kebab-case")]
pub enum Outcome {
    Kept,
    Downgraded(Vec<OpKind>),
    Removed,
}

/// What happened to one constraint op of the input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConstraintLog {
    pub index: usize,
    pub op: OpKind,
    #[serde(flatten)]
    pub outcome: Outcome,
}

/// One accepted single-op transformation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Step {
    pub index: usize,
    pub from: Vec<OpKind>,
    pub to: Vec<OpKind>,
    pub cost: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MinimizeResult {
    #[serde(serialize_with = "program_lines")]
    pub program: TraceProgram,
    pub total_cost: u64,
    pub input_cost: u64,
    pub log: Vec<ConstraintLog>,
    pub steps: Vec<Step>,
    pub oracle_calls: usize,
    /// Chosen form index per constraint op, in program order.
    #[serde(skip)]
    pub assignment: Vec<usize>,
}

fn program_lines<S: Serializer>(p: &TraceProgram, s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(p.ops().iter().map(ToString::to_string))
}

impl MinimizeResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes")
    }
}

fn instantiate(kind: OpKind, addr: Option<u64>) -> TraceOp {
    let addr = || addr.expect("flush forms only replace flushes");
    match kind {
        Clflush => TraceOp::clflush(addr()),
        Clflushopt => TraceOp::clflushopt(addr()),
        Clwb => TraceOp::clwb(addr()),
        Sfence => TraceOp::sfence(),
        Mfence => TraceOp::mfence(),
        OpKind::Store | OpKind::Load => unreachable!("forms hold constraints only"),
    }
}

/// Builds candidate programs and answers "does every crash state satisfy the
/// predicate", caching answers per assignment.
struct Oracle<'a> {
    ops: &'a [TraceOp],
    /// (program index, kind) of each constraint op.
    slots: Vec<(usize, OpKind)>,
    pred: &'a ConsistencyPredicate,
    input_bounds: Bounds,
    bounds: Bounds,
    cache: HashMap<Vec<usize>, Option<CrashImage>>,
    calls: usize,
}

impl<'a> Oracle<'a> {
    fn new(program: &'a TraceProgram, pred: &'a ConsistencyPredicate, bounds: Bounds) -> Self {
        let ops = program.ops();
        let slots: Vec<_> = ops
            .iter()
            .enumerate()
            .filter(|(_, op)| op.kind().is_constraint())
            .map(|(i, op)| (i, op.kind()))
            .collect();
        // A clflush can grow into two ops, so candidates get that much headroom.
        let growth = slots.iter().filter(|(_, k)| *k == Clflush).count();
        let widened = Bounds { max_ops: bounds.max_ops + growth, ..bounds };
        Oracle { ops, slots, pred, input_bounds: bounds, bounds: widened, cache: HashMap::new(), calls: 0 }
    }

    fn program(&self, assign: &[usize]) -> TraceProgram {
        let mut out = Vec::with_capacity(self.ops.len() + self.slots.len());
        let mut slot = 0;
        for (i, op) in self.ops.iter().enumerate() {
            if slot < self.slots.len() && self.slots[slot].0 == i {
                let form = forms(op.kind())[assign[slot]];
                out.extend(form.iter().map(|&k| instantiate(k, op.addr())));
                slot += 1;
            } else {
                out.push(*op);
            }
        }
        TraceProgram::new(out).expect("rewritten ops keep the original operands")
    }

    fn form_cost(&self, cm: &CostModel, slot: usize, form: usize) -> u64 {
        cm.ops(forms(self.slots[slot].1)[form])
    }

    fn cost(&self, cm: &CostModel, assign: &[usize]) -> u64 {
        (0..self.slots.len()).map(|s| self.form_cost(cm, s, assign[s])).sum()
    }

    fn check(&mut self, program: &TraceProgram, bounds: Bounds) -> Result<Option<CrashImage>, EnumerateError> {
        self.calls += 1;
        let states = enumerate_crash_states(program, bounds)?;
        Ok(self.pred.first_violation(&states).cloned())
    }

    /// A rejected reachable crash state, if any.
    fn violation(&mut self, assign: &[usize]) -> Result<Option<CrashImage>, EnumerateError> {
        if let Some(v) = self.cache.get(assign) {
            return Ok(v.clone());
        }
        let program = self.program(assign);
        let v = self.check(&program, self.bounds)?;
        self.cache.insert(assign.to_vec(), v.clone());
        Ok(v)
    }

    fn check_input(&mut self) -> Result<(), MinimizeError> {
        let keep = vec![0; self.slots.len()];
        let program = self.program(&keep);
        let v = self.check(&program, self.input_bounds)?;
        self.cache.insert(keep, v.clone());
        match v {
            Some(witness) => Err(MinimizeError::InputInconsistent { witness }),
            None => Ok(()),
        }
    }

    fn finish(
        mut self,
        cm: &CostModel,
        assign: Vec<usize>,
        steps: Vec<Step>,
    ) -> Result<MinimizeResult, MinimizeError> {
        let program = self.program(&assign);
        // Fresh enumeration, independent of the cache and the search path.
        if let Some(witness) = self.check(&program, self.bounds)? {
            return Err(MinimizeError::Unsound { witness });
        }
        let log = self
            .slots
            .iter()
            .zip(&assign)
            .map(|(&(index, op), &form)| {
                let outcome = match forms(op)[form] {
                    _ if form == 0 => Outcome::Kept,
                    [] => Outcome::Removed,
                    ops => Outcome::Downgraded(ops.to_vec()),
                };
                ConstraintLog { index, op, outcome }
            })
            .collect();
        Ok(MinimizeResult {
            total_cost: self.cost(cm, &assign),
            input_cost: self.cost(cm, &vec![0; assign.len()]),
            program,
            log,
            steps,
            oracle_calls: self.calls,
            assignment: assign,
        })
    }
}

/// Greedy descent: repeatedly applies the cheapest single-op downgrade that
/// keeps every crash state acceptable, until none does.
///
/// Candidates are ordered by resulting cost, then program index, then form
/// order. A downgrade that leaves the cost unchanged is accepted; every step
/// still moves strictly down one op's lattice, so the loop terminates.
pub fn minimize(
    program: &TraceProgram,
    pred: &ConsistencyPredicate,
    cm: &CostModel,
    bounds: Bounds,
) -> Result<MinimizeResult, MinimizeError> {
    let mut oracle = Oracle::new(program, pred, bounds);
    oracle.check_input()?;
    let mut assign = vec![0; oracle.slots.len()];
    let mut cost = oracle.cost(cm, &assign);
    let mut steps = Vec::new();
    loop {
        let mut candidates = Vec::new();
        for (slot, &(_, kind)) in oracle.slots.iter().enumerate() {
            let current = assign[slot];
            for form in 0..forms(kind).len() {
                if !is_below(kind, form, current) {
                    continue;
                }
                let next = cost - oracle.form_cost(cm, slot, current) + oracle.form_cost(cm, slot, form);
                if next <= cost {
                    candidates.push((next, slot, form));
                }
            }
        }
        candidates.sort_unstable();
        let mut accepted = None;
        for (next_cost, slot, form) in candidates {
            let mut next = assign.clone();
            next[slot] = form;
            if oracle.violation(&next)?.is_none() {
                accepted = Some((next_cost, slot, next));
                break;
            }
        }
        let Some((next_cost, slot, next)) = accepted else { break };
        let (index, kind) = oracle.slots[slot];
        steps.push(Step {
            index,
            from: forms(kind)[assign[slot]].to_vec(),
            to: forms(kind)[next[slot]].to_vec(),
            cost: next_cost,
        });
        assign = next;
        cost = next_cost;
    }
    oracle.finish(cm, assign, steps)
}

/// Reference optimum by exhaustive search over every combination of forms.
/// Cost levels are visited in ascending order and each level in
/// lexicographic order of form indices, so the first acceptable assignment
/// is the cheapest and, among those, the lexicographically smallest.
pub fn exhaustive_optimum(
    program: &TraceProgram,
    pred: &ConsistencyPredicate,
    cm: &CostModel,
    bounds: Bounds,
) -> Result<MinimizeResult, MinimizeError> {
    let mut oracle = Oracle::new(program, pred, bounds);
    let count = oracle.slots.len();
    if count > EXHAUSTIVE_MAX_CONSTRAINTS {
        return Err(MinimizeError::TooManyConstraints { count, max: EXHAUSTIVE_MAX_CONSTRAINTS });
    }
    oracle.check_input()?;
    let costs: Vec<Vec<u64>> = oracle
        .slots
        .iter()
        .map(|&(_, k)| forms(k).iter().map(|f| cm.ops(f)).collect())
        .collect();
    // Cheapest and dearest completion of slots i.. .
    let mut min_rest = vec![0; count + 1];
    let mut max_rest = vec![0; count + 1];
    for i in (0..count).rev() {
        min_rest[i] = min_rest[i + 1] + costs[i].iter().min().copied().unwrap_or(0);
        max_rest[i] = max_rest[i + 1] + costs[i].iter().max().copied().unwrap_or(0);
    }
    let mut levels = BTreeSet::from([0u64]);
    for slot_costs in &costs {
        levels = levels.iter().flat_map(|l| slot_costs.iter().map(move |c| l + c)).collect();
    }
    let mut assign = vec![0; count];
    for target in levels {
        if level_search(&mut oracle, &costs, &min_rest, &max_rest, 0, target, &mut assign)? {
            return oracle.finish(cm, assign, Vec::new());
        }
    }
    unreachable!("the input assignment is acceptable and lies on some level")
}

fn level_search(
    oracle: &mut Oracle<'_>,
    costs: &[Vec<u64>],
    min_rest: &[u64],
    max_rest: &[u64],
    slot: usize,
    remaining: u64,
    assign: &mut [usize],
) -> Result<bool, EnumerateError> {
    if slot == costs.len() {
        return Ok(remaining == 0 && oracle.violation(assign)?.is_none());
    }
    for (form, &c) in costs[slot].iter().enumerate() {
        if c > remaining {
            continue;
        }
        let rest = remaining - c;
        if rest < min_rest[slot + 1] || rest > max_rest[slot + 1] {
            continue;
        }
        assign[slot] = form;
        if level_search(oracle, costs, min_rest, max_rest, slot + 1, rest, assign)? {
            return Ok(true);
        }
    }
    Ok(false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mccs::predicate::parse_predicate;
    use crate::trace::parse_trace;

    const Y_NEEDS_X: &str = "order 0x1000:0:8=1 before 0x1040:0:8=1";

    fn run(trace: &str, pred: &str) -> (MinimizeResult, MinimizeResult) {
        let p = parse_trace(trace).unwrap();
        let pred = parse_predicate(pred).unwrap();
        let cm = CostModel::default();
        let g = minimize(&p, &pred, &cm, Bounds::default()).unwrap();
        let e = exhaustive_optimum(&p, &pred, &cm, Bounds::default()).unwrap();
        (g, e)
    }

    #[test]
    fn lattice_shape() {
        assert!(is_below(Clflush, 1, 0));
        assert!(is_below(Clflush, 3, 1));
        assert!(!is_below(Clflush, 4, 1));
        assert!(!is_below(Clflush, 2, 1));
        assert!(is_below(Mfence, 1, 0));
        assert!(!is_below(Mfence, 0, 0));
        assert_eq!(lattice_depth(Clflush), 3);
        assert_eq!(lattice_depth(Mfence), 2);
        assert_eq!(lattice_depth(Sfence), 1);
        assert_eq!(lattice_depth(Clwb), 1);
        assert_eq!(lattice_depth(OpKind::Store), 0);
    }

    #[test]
    fn vacuous_predicate_removes_everything() {
        let (g, e) = run("store 0x1000 8 1\nclflush 0x1000\nclflush 0x1008\nsfence", "");
        assert_eq!(g.total_cost, 0);
        assert_eq!(g.input_cost, 7);
        assert_eq!(g.program.to_string(), "store 0x1000 8 1\n");
        assert!(g.log.iter().all(|l| l.outcome == Outcome::Removed));
        assert_eq!(e.total_cost, 0);
    }

    #[test]
    fn ordering_downgrades_clflush_to_clwb_sfence() {
        let (g, e) = run("store 0x1000 8 1\nclflush 0x1000\nstore 0x1040 8 1", Y_NEEDS_X);
        assert_eq!(g.program.to_string(), "store 0x1000 8 1\nclwb 0x1000\nsfence\nstore 0x1040 8 1\n");
        assert_eq!(g.total_cost, 3);
        assert_eq!(g.log[0].outcome, Outcome::Downgraded(vec![Clwb, Sfence]));
        assert_eq!(g.steps.len(), 1);
        assert_eq!(e.total_cost, 3);
    }

    #[test]
    fn minimal_program_is_unchanged() {
        let trace = "store 0x1000 8 1\nclwb 0x1000\nsfence\nstore 0x1040 8 1";
        let (g, e) = run(trace, Y_NEEDS_X);
        assert_eq!(g.program, parse_trace(trace).unwrap());
        assert!(g.steps.is_empty());
        assert!(g.log.iter().all(|l| l.outcome == Outcome::Kept));
        assert_eq!(e.total_cost, 3);
    }

    #[test]
    fn no_constraints_is_its_own_optimum() {
        let (g, e) = run("store 0x1000 8 1\nload 0x1000 8", "");
        assert_eq!((g.total_cost, e.total_cost), (0, 0));
        assert!(e.log.is_empty());
    }

    #[test]
    fn zero_only_predicate_is_input_inconsistent() {
        let p = parse_trace("store 0x1000 8 1\nclflush 0x1000\nsfence").unwrap();
        let pred = parse_predicate("allow").unwrap();
        let cm = CostModel::default();
        for r in [
            minimize(&p, &pred, &cm, Bounds::default()),
            exhaustive_optimum(&p, &pred, &cm, Bounds::default()),
        ] {
            let err = r.unwrap_err();
            assert_eq!(
                err,
                MinimizeError::InputInconsistent { witness: CrashImage::zero().with_value(0x1000, 8, 1) }
            );
        }
    }

    #[test]
    fn bounds_are_enforced_on_input() {
        let p = parse_trace("store 0x1000 8 1\nclflush 0x1000\nsfence").unwrap();
        let pred = ConsistencyPredicate::AllowAll;
        let small = Bounds { max_ops: 2, ..Bounds::default() };
        let err = minimize(&p, &pred, &CostModel::default(), small).unwrap_err();
        assert!(matches!(err, MinimizeError::Enumerate(EnumerateError::TooManyOps { .. })));
    }

    #[test]
    fn exhaustive_limit() {
        let trace = "sfence\n".repeat(EXHAUSTIVE_MAX_CONSTRAINTS + 1);
        let p = parse_trace(&trace).unwrap();
        let err = exhaustive_optimum(&p, &ConsistencyPredicate::AllowAll, &CostModel::default(), Bounds::default())
            .unwrap_err();
        assert_eq!(err, MinimizeError::TooManyConstraints { count: 11, max: 10 });
    }

    #[test]
    fn custom_costs_change_the_choice() {
        let p = parse_trace("store 0x1000 8 1\nclflush 0x1000\nstore 0x1040 8 1").unwrap();
        let pred = parse_predicate(Y_NEEDS_X).unwrap();
        let cm = CostModel { clwb: 5, ..CostModel::default() };
        let g = minimize(&p, &pred, &cm, Bounds::default()).unwrap();
        assert_eq!(g.program.to_string(), "store 0x1000 8 1\nclflushopt 0x1000\nsfence\nstore 0x1040 8 1\n");
    }

    /// Greedy removes the synchronous `clflush 0x1088` first (largest single
    /// saving) and is then stuck with the clflushopt and the flush that
    /// orders it; keeping only `clflush 0x1088` costs 3.
    #[test]
    fn greedy_can_stop_above_the_optimum() {
        let trace = "store 0x1000 8 2\nmfence\nclwb 0x1080\nstore 0x1080 8 1\nclflush 0x1088\n\
                     clflushopt 0x1080\nclflush 0x1040\nstore 0x1040 8 2";
        let (g, e) = run(trace, "order 0x1080:0:8=1 before 0x1040:0:8=2");
        assert_eq!(g.input_cost, 12);
        assert_eq!(g.total_cost, 5);
        assert_eq!(e.total_cost, 3);
        assert_eq!(
            e.program.to_string(),
            "store 0x1000 8 2\nstore 0x1080 8 1\nclflush 0x1088\nstore 0x1040 8 2\n"
        );
    }

    #[test]
    fn json_shape() {
        let (g, _) = run("store 0x1000 8 1\nclflush 0x1000\nstore 0x1040 8 1", Y_NEEDS_X);
        let v: serde_json::Value = serde_json::from_str(&g.to_json()).unwrap();
        assert_eq!(v["program"][1], "clwb 0x1000");
        assert_eq!(v["log"][0]["outcome"], "downgraded");
        assert_eq!(v["log"][0]["to"][0], "clwb");
        assert_eq!(v["total_cost"], 3);
    }
}
