//! Classical semantics: the immediate consequence operator relative to a
//! blocking set, its least fixpoints, stability checking, and an exhaustive
//! stable-model enumerator.

use std::collections::HashSet;

use thiserror::Error;

use crate::{GroundProgram, Interpretation};

pub const DEFAULT_ATOM_CAP: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OracleError {
    #[error("oracle scale exceeded: {atoms} atoms > cap {cap}")]
    ScaleExceeded { atoms: usize, cap: usize },
}

/// Heads of rules whose positive body lies in `i` and whose negative body
/// avoids `j`.
pub fn immediate_consequence(
    p: &GroundProgram,
    j: &Interpretation,
    i: &Interpretation,
) -> Interpretation {
    let mut out = Interpretation::empty(p.num_atoms());
    for r in p.rules() {
        if r.pos.iter().all(|&a| i.contains(a)) && !r.neg.iter().any(|&a| j.contains(a)) {
            out.insert(r.head);
        }
    }
    out
}

/// Iterates [`immediate_consequence`] from `seed` until the set repeats.
///
/// From the empty seed the sequence is monotone and reaches the least
/// fixpoint in at most `n + 1` rounds. Other seeds may oscillate; iteration
/// then stops at the first set seen before.
pub fn least_fixpoint(
    p: &GroundProgram,
    j: &Interpretation,
    seed: &Interpretation,
) -> Interpretation {
    least_fixpoint_counted(p, j, seed).0
}

/// Like [`least_fixpoint`], also returning the number of operator applications.
pub fn least_fixpoint_counted(
    p: &GroundProgram,
    j: &Interpretation,
    seed: &Interpretation,
) -> (Interpretation, usize) {
    let mut current = seed.clone();
    // the empty seed gives an increasing chain, so only equality can repeat
    let guard = !seed.is_empty();
    let mut seen: HashSet<Interpretation> = HashSet::new();
    let mut rounds = 0;
    loop {
        let next = immediate_consequence(p, j, &current);
        rounds += 1;
        if next == current {
            return (next, rounds);
        }
        if guard {
            seen.insert(current);
            if seen.contains(&next) {
                return (next, rounds);
            }
        }
        current = next;
    }
}

/// `s` is stable iff it equals the least fixpoint of the operator blocked by `s`.
pub fn is_stable(p: &GroundProgram, s: &Interpretation) -> bool {
    let empty = Interpretation::empty(p.num_atoms());
    least_fixpoint(p, s, &empty) == *s
}

/// All stable models, by exhaustive subset testing in bitmask order.
pub fn enumerate_stable_models(
    p: &GroundProgram,
    atom_cap: usize,
) -> Result<Vec<Interpretation>, OracleError> {
    let n = p.num_atoms();
    if n > atom_cap || n >= 64 {
        return Err(OracleError::ScaleExceeded {
            atoms: n,
            cap: atom_cap.min(63),
        });
    }
    let mut models = Vec::new();
    for mask in 0..(1u64 << n) {
        let s = Interpretation::from_mask(n, mask);
        if is_stable(p, &s) {
            models.push(s);
        }
    }
    Ok(models)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::program::parse_program;

    fn parse(text: &str) -> GroundProgram {
        parse_program(text).unwrap().0
    }

    fn set(n: usize, xs: &[usize]) -> Interpretation {
        Interpretation::from_indices(n, xs.iter().copied())
    }

    #[test]
    fn consequence_examples() {
        let p = parse("a :- not b.\nb :- not a.");
        assert_eq!(
            immediate_consequence(&p, &set(2, &[0]), &set(2, &[])),
            set(2, &[0])
        );

        let p = parse("a.\nb :- a.");
        assert_eq!(
            immediate_consequence(&p, &set(2, &[]), &set(2, &[0])),
            set(2, &[0, 1])
        );

        let p = parse("a.\nb :- not a.\nc :- not d, a.\ne :- a.\nd :- e.");
        assert_eq!(
            immediate_consequence(&p, &Interpretation::full(5), &set(5, &[])),
            set(5, &[0])
        );
    }

    #[test]
    fn fixpoint_examples() {
        let p = parse("a :- not b.\nb :- not a.");
        assert_eq!(
            least_fixpoint(&p, &set(2, &[0]), &set(2, &[])),
            set(2, &[0])
        );

        let empty = GroundProgram::empty();
        assert!(least_fixpoint(&empty, &set(0, &[]), &set(0, &[])).is_empty());

        let p = parse("a.\nb :- a.\nc :- b.");
        let (fix, rounds) = least_fixpoint_counted(&p, &set(3, &[]), &set(3, &[]));
        assert_eq!(fix, set(3, &[0, 1, 2]));
        // three growing rounds plus the confirming one
        assert_eq!(rounds, 4);
    }

    #[test]
    fn oscillating_seed_terminates() {
        // {a} -> {c} -> {b} -> {a}
        let p = parse("a :- b.\nb :- c.\nc :- a.");
        let out = least_fixpoint(&p, &set(3, &[]), &set(3, &[0]));
        assert_eq!(out.len(), 1);
    }

    #[test]
    fn stability_examples() {
        let p = parse("a :- not b.\nb :- not a.");
        assert!(is_stable(&p, &set(2, &[0])));
        assert!(!is_stable(&p, &set(2, &[0, 1])));
        assert!(is_stable(&GroundProgram::empty(), &set(0, &[])));
    }

    #[test]
    fn enumeration_examples() {
        let p = parse("a :- not b.\nb :- not a.");
        assert_eq!(
            enumerate_stable_models(&p, 20).unwrap(),
            vec![set(2, &[0]), set(2, &[1])]
        );
        assert!(enumerate_stable_models(&parse("a :- not a."), 20)
            .unwrap()
            .is_empty());
        assert_eq!(
            enumerate_stable_models(&GroundProgram::empty(), 20).unwrap(),
            vec![set(0, &[])]
        );
        assert_eq!(
            enumerate_stable_models(&p, 1),
            Err(OracleError::ScaleExceeded { atoms: 2, cap: 1 })
        );
    }
}
