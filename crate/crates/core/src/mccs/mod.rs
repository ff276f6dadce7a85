//! Search for the cheapest flushes and fences that keep every reachable
//! crash state of a trace acceptable to a consistency predicate.
//!
//! Each flush or fence of the input is a constraint with a small set of
//! replacement forms (see [`forms`]). Stores and loads are never changed.

mod cost;
mod predicate;
mod search;

pub use cost::CostModel;
pub use predicate::{parse_predicate, Condition, ConsistencyPredicate, OrderRule, PredicateError};
pub use search::{
    exhaustive_optimum, forms, is_below, lattice_depth, minimize, ConstraintLog, MinimizeError,
    MinimizeResult, Outcome, Step, EXHAUSTIVE_MAX_CONSTRAINTS,
};
