//! Reference semantics written independently of the library: stability by
//! building the reduct explicitly and computing its least model, and a
//! brute-force enumerator on top of it.

#![allow(dead_code)]

use ndprop_core::generators::{gen_3lp, gen_n2l, N2LParams, ThreeLPParams};
use ndprop_core::{GroundProgram, Interpretation};
use rand::Rng;

/// Definite rules `(head, positive body)` of the reduct of `p` by `s`.
pub fn reduct(p: &GroundProgram, s: &[bool]) -> Vec<(usize, Vec<usize>)> {
    p.rules()
        .iter()
        .filter(|r| r.neg.iter().all(|&a| !s[a]))
        .map(|r| (r.head, r.pos.clone()))
        .collect()
}

pub fn least_model(n: usize, rules: &[(usize, Vec<usize>)]) -> Vec<bool> {
    let mut m = vec![false; n];
    loop {
        let mut changed = false;
        for (h, body) in rules {
            if !m[*h] && body.iter().all(|&b| m[b]) {
                m[*h] = true;
                changed = true;
            }
        }
        if !changed {
            return m;
        }
    }
}

pub fn reference_is_stable(p: &GroundProgram, s: &Interpretation) -> bool {
    let n = p.num_atoms();
    let bits: Vec<bool> = (0..n).map(|i| s.contains(i)).collect();
    least_model(n, &reduct(p, &bits)) == bits
}

pub fn reference_models(p: &GroundProgram) -> Vec<Interpretation> {
    let n = p.num_atoms();
    assert!(n <= 16, "reference enumeration is exhaustive");
    (0u64..1 << n)
        .map(|mask| Interpretation::from_indices(n, (0..n).filter(|i| mask >> i & 1 == 1)))
        .filter(|s| reference_is_stable(p, s))
        .collect()
}

/// Mixed N2L / 3-LP program with at most `max_atoms` atoms.
pub fn random_program(rng: &mut impl Rng, max_atoms: usize) -> GroundProgram {
    let seed = rng.gen();
    if rng.gen_bool(0.5) {
        let n = rng.gen_range(2..=max_atoms);
        let c1 = rng.gen_range(0.0..=(n as f64).min(6.0));
        let c2 = rng.gen_range(0.0..=(n as f64).min(1.5));
        gen_n2l(&N2LParams { n, c1, c2, seed }).unwrap()
    } else {
        let n = rng.gen_range(4..=max_atoms);
        let l = rng.gen_range(1..=6 * n);
        gen_3lp(&ThreeLPParams { n, l, seed }).unwrap()
    }
}

pub fn random_subset(rng: &mut impl Rng, n: usize, p: f64) -> Interpretation {
    Interpretation::from_indices(n, (0..n).filter(|_| rng.gen_bool(p)))
}
