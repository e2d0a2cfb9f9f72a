mod common;

use common::{random_program, random_subset, reference_is_stable, reference_models};
use ndprop_core::autodiff::Tape;
use ndprop_core::crisp::{enumerate_stable_models, is_stable, least_fixpoint};
use ndprop_core::dprop::{
    dprop_run, guided_policy, random_assignment, random_policy, rdprop_solve, RunStatus,
};
use ndprop_core::fuzzy::{
    certify, propagate, soft_consequence, undecided_degree, Certification, CertifyConfig,
    PropagationConfig,
};
use ndprop_core::generators::{gen_3lp, gen_n2l, N2LParams, ThreeLPParams};
use ndprop_core::policy::{
    decision_step, init_weights, min_bce_loss, ndprop_forward, ForwardConfig, HiddenState,
};
use ndprop_core::program::{validate, Atom, ProgramBuilder};
use ndprop_core::seeding::rng_from_seed;
use ndprop_core::{
    parse_program, serialize_program, GroundProgram, Interpretation, Rule, TNormKind,
};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

fn program_strategy() -> impl Strategy<Value = GroundProgram> {
    any::<u64>().prop_map(|seed| random_program(&mut rng_from_seed(seed), 10))
}

fn kind_strategy() -> impl Strategy<Value = TNormKind> {
    prop_oneof![
        Just(TNormKind::Godel),
        Just(TNormKind::Product),
        Just(TNormKind::Lukasiewicz)
    ]
}

/// Program with arbitrary bodies and ground-term style names.
fn random_text_program(rng: &mut impl Rng) -> GroundProgram {
    let n = rng.gen_range(1..12);
    let mut b = ProgramBuilder::new();
    let names: Vec<String> = (0..n)
        .map(|i| match rng.gen_range(0..3) {
            0 => format!("p{i}"),
            1 => format!("digit({i},{})", rng.gen_range(0..10)),
            _ => format!("q_{i}(x)"),
        })
        .collect();
    // declare in shuffled order so the atom table differs from rule order
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    for &i in &order {
        b.atom(&names[i]);
    }
    for _ in 0..rng.gen_range(0..20) {
        let head = rng.gen_range(0..n);
        let pos: Vec<usize> = (0..rng.gen_range(0..3))
            .map(|_| rng.gen_range(0..n))
            .collect();
        let neg: Vec<usize> = (0..rng.gen_range(0..3))
            .map(|_| rng.gen_range(0..n))
            .collect();
        b.rule(Rule::new(head, pos, neg));
    }
    b.build().0
}

#[test]
fn serialize_then_parse_is_identity() {
    let mut rng = rng_from_seed(2024);
    for _ in 0..1000 {
        let p = random_text_program(&mut rng);
        let text = serialize_program(&p);
        let (q, report) = parse_program(&text).unwrap();
        assert_eq!(q, p, "{text}");
        assert_eq!(report.dropped_inconsistent, 0);
        assert!(validate(&q).is_empty());
    }
}

#[test]
fn generator_programs_round_trip() {
    let mut rng = rng_from_seed(77);
    for _ in 0..1000 {
        let p = random_program(&mut rng, 12);
        assert_eq!(parse_program(&serialize_program(&p)).unwrap().0, p);
    }
}

#[test]
fn oracle_agrees_with_reduct_definition() {
    let mut rng = rng_from_seed(5);
    for _ in 0..300 {
        let p = random_program(&mut rng, 9);
        assert_eq!(
            enumerate_stable_models(&p, 20).unwrap(),
            reference_models(&p)
        );
        let s = random_subset(&mut rng, p.num_atoms(), 0.5);
        assert_eq!(is_stable(&p, &s), reference_is_stable(&p, &s));
    }
}

#[test]
fn n2l_rule_counts_match_binomial() {
    let draws = 10_000;
    let (mut pure, mut contra) = (0usize, 0usize);
    for seed in 0..draws {
        let p = gen_n2l(&N2LParams {
            n: 10,
            c1: 5.0,
            c2: 1.0,
            seed,
        })
        .unwrap();
        for r in p.rules() {
            if r.neg == [r.head] {
                contra += 1;
            } else {
                pure += 1;
            }
        }
    }
    let d = draws as f64;
    // Binomial(90, 0.5) and Binomial(10, 0.1), means over `draws` samples
    let pure_mean = pure as f64 / d;
    let contra_mean = contra as f64 / d;
    assert!(
        (pure_mean - 45.0).abs() <= 3.0 * (90.0 * 0.25 / d).sqrt(),
        "{pure_mean}"
    );
    assert!(
        (contra_mean - 1.0).abs() <= 3.0 * (10.0 * 0.1 * 0.9 / d).sqrt(),
        "{contra_mean}"
    );
}

#[test]
fn three_lp_bodies_are_distinct_and_half_negated() {
    let mut negated = 0usize;
    let mut rules = 0usize;
    for seed in 0..10_000u64 {
        let p = gen_3lp(&ThreeLPParams { n: 10, l: 50, seed }).unwrap();
        assert_eq!(p.rules().len(), 50);
        for r in p.rules() {
            let mut body: Vec<usize> = r.pos.iter().chain(&r.neg).copied().collect();
            body.sort_unstable();
            body.dedup();
            assert_eq!(body.len(), 3);
            assert!(!body.contains(&r.head));
            if rules < 10_000 {
                negated += r.neg.len();
                rules += 1;
            }
        }
    }
    let mean = negated as f64 / rules as f64;
    assert!(
        (mean - 1.5).abs() <= 3.0 * (0.75 / rules as f64).sqrt(),
        "{mean}"
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn fixpoint_monotone_in_false_set(p in program_strategy(), seed in any::<u64>()) {
        let mut rng = rng_from_seed(seed);
        let n = p.num_atoms();
        let f = random_subset(&mut rng, n, 0.3);
        let f2 = f.union(&random_subset(&mut rng, n, 0.3));
        let small = least_fixpoint(&p, &f.complement(), &Interpretation::empty(n));
        let large = least_fixpoint(&p, &f2.complement(), &Interpretation::empty(n));
        prop_assert!(small.is_subset(&large));
    }

    #[test]
    fn seed_inside_fixpoint_is_absorbed(p in program_strategy(), seed in any::<u64>()) {
        let mut rng = rng_from_seed(seed);
        let n = p.num_atoms();
        let j = random_subset(&mut rng, n, 0.5);
        let fix = least_fixpoint(&p, &j, &Interpretation::empty(n));
        let t = fix.intersection(&random_subset(&mut rng, n, 0.5));
        prop_assert_eq!(least_fixpoint(&p, &j, &t), fix);
    }

    #[test]
    fn dprop_successes_are_stable(p in program_strategy(), seed in any::<u64>(), singleton in any::<bool>()) {
        let mut rng = rng_from_seed(seed);
        let mut pol = random_policy(singleton);
        let out = dprop_run(&p, &mut pol, &mut rng, p.num_atoms()).unwrap();
        prop_assert!(out.final_state.t_set.is_disjoint(&out.final_state.u_set));
        if let RunStatus::Success(m) = &out.status {
            prop_assert!(reference_is_stable(&p, m));
        }
        let (r, stats) = rdprop_solve(&p, 5, &mut rng).unwrap();
        prop_assert!(stats.runs >= 1 && stats.runs <= 5);
        if let Some(m) = r.model() {
            prop_assert!(reference_is_stable(&p, m));
        }
        if let Some(m) = random_assignment(&p, &mut rng) {
            prop_assert!(reference_is_stable(&p, &m));
        }
    }

    #[test]
    fn guided_runs_reach_every_model(p in program_strategy()) {
        for m in reference_models(&p) {
            let mut pol = guided_policy(m.clone());
            let out = dprop_run(&p, &mut pol, &mut rng_from_seed(0), p.num_atoms()).unwrap();
            prop_assert_eq!(out.status, RunStatus::Success(m));
        }
    }

    #[test]
    fn soft_consequence_monotone_in_phi(p in program_strategy(), kind in kind_strategy(), seed in any::<u64>()) {
        let mut rng = rng_from_seed(seed);
        let n = p.num_atoms();
        let tau: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let phi: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let phi2: Vec<f64> = phi.iter().map(|&x| x + (1.0 - x) * rng.gen::<f64>()).collect();
        let a = soft_consequence(&p, &phi, &tau, kind);
        let b = soft_consequence(&p, &phi2, &tau, kind);
        for i in 0..n {
            prop_assert!(a[i] <= b[i] + 1e-12);
            prop_assert!((0.0..=1.0).contains(&a[i]));
        }
        let zero = vec![0.0; n];
        let fa = propagate(&p, &phi, &zero, kind, 1e-12, 10_000);
        let fb = propagate(&p, &phi2, &zero, kind, 1e-12, 10_000);
        for i in 0..n {
            prop_assert!(fa.tau[i] <= fb.tau[i] + 1e-6);
        }
    }

    #[test]
    fn fuzzy_seed_below_fixpoint_is_absorbed(p in program_strategy(), kind in kind_strategy(), seed in any::<u64>()) {
        let mut rng = rng_from_seed(seed);
        let n = p.num_atoms();
        let phi: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
        let zero = vec![0.0; n];
        let base = propagate(&p, &phi, &zero, kind, 1e-12, 10_000);
        let seed_tau: Vec<f64> = base.tau.iter().map(|&x| x * rng.gen::<f64>()).collect();
        let again = propagate(&p, &phi, &seed_tau, kind, 1e-12, 10_000);
        for i in 0..n {
            prop_assert!((base.tau[i] - again.tau[i]).abs() <= 1e-6);
        }
    }

    #[test]
    fn degrees_stay_in_range(p in program_strategy(), kind in kind_strategy(), seed in any::<u64>()) {
        let w = init_weights(4, 3, kind, seed);
        let mut rng = rng_from_seed(seed);
        let init = HiddenState::random(p.num_atoms(), 3, 4, &mut rng);
        let out = ndprop_forward(&p, &w, &ForwardConfig::new(6), &init);
        for s in &out.states {
            for x in s.tau.iter().chain(&s.phi).chain(&s.scores) {
                prop_assert!((0.0..=1.0).contains(x));
            }
        }
        if let Some(m) = out.certification.model() {
            prop_assert!(reference_is_stable(&p, m));
        }
    }

    #[test]
    fn binary_fixpoints_never_fail_certification(p in program_strategy(), kind in kind_strategy(), seed in any::<u64>()) {
        let mut rng = rng_from_seed(seed);
        let n = p.num_atoms();
        let phi = random_subset(&mut rng, n, 0.5).indicator();
        let tau = propagate(&p, &phi, &vec![0.0; n], kind, 1e-9, 20 * n + 1).tau;
        let cfg = CertifyConfig { binary_tol: 1e-7, propagation: PropagationConfig::default() };
        let cert = certify(&p, &tau, &phi, kind, &cfg);
        prop_assert!(!matches!(cert, Certification::NotStable(_)));
    }

    #[test]
    fn zero_loss_means_exact_model(p in program_strategy()) {
        let models = reference_models(&p);
        prop_assume!(!models.is_empty());
        let n = p.num_atoms();
        for m in &models {
            let mut t = Tape::new();
            let scores = t.row(m.indicator());
            let l = min_bce_loss(&mut t, scores, &models).unwrap();
            prop_assert_eq!(t.scalar(l), 0.0);
        }
        let mut t = Tape::new();
        let scores = t.row(vec![0.5; n]);
        let l = min_bce_loss(&mut t, scores, &models).unwrap();
        prop_assert!(n == 0 || t.scalar(l) > 0.0);
    }

    #[test]
    fn cell_is_permutation_equivariant(p in program_strategy(), seed in any::<u64>()) {
        let mut rng = rng_from_seed(seed);
        let n = p.num_atoms();
        let (h, l) = (3, 2);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let q = relabel(&p, &perm);
        let w = init_weights(h, l, TNormKind::Product, seed);
        let init = HiddenState::random(n, l, h, &mut rng);
        let mut moved = HiddenState::zeros(n, l, h);
        for s in 0..l {
            for i in 0..n {
                let (src, dst) = ((s * n + i) * h, (s * n + perm[i]) * h);
                moved.data[dst..dst + h].copy_from_slice(&init.data[src..src + h]);
            }
        }
        let tau: Vec<f64> = (0..l * n).map(|_| rng.gen()).collect();
        let phi: Vec<f64> = (0..l * n).map(|_| rng.gen()).collect();
        let mu = undecided_degree(&tau, &phi, TNormKind::Product);
        let permute = |v: &[f64]| {
            let mut out = vec![0.0; v.len()];
            for s in 0..l {
                for i in 0..n {
                    out[s * n + perm[i]] = v[s * n + i];
                }
            }
            out
        };
        let (d, _) = decision_step(&w, &tau, &phi, &mu, &init);
        let (dq, _) = decision_step(&w, &permute(&tau), &permute(&phi), &permute(&mu), &moved);
        prop_assert_eq!(permute(&d), dq);

        let a = ndprop_forward(&p, &w, &ForwardConfig::new(4), &init);
        let b = ndprop_forward(&q, &w, &ForwardConfig::new(4), &moved);
        for s in 0..l {
            for i in 0..n {
                prop_assert!((a.states[s].scores[i] - b.states[s].scores[perm[i]]).abs() < 1e-12);
            }
        }
    }
}

/// Renames atom `i` to position `perm[i]`, rules mapped accordingly.
fn relabel(p: &GroundProgram, perm: &[usize]) -> GroundProgram {
    let n = p.num_atoms();
    let mut atoms = vec![
        Atom {
            index: 0,
            name: String::new()
        };
        n
    ];
    for i in 0..n {
        atoms[perm[i]] = Atom {
            index: perm[i],
            name: p.atom_name(i).to_string(),
        };
    }
    let rules: Vec<Rule> = p
        .rules()
        .iter()
        .map(|r| {
            Rule::new(
                perm[r.head],
                r.pos.iter().map(|&a| perm[a]),
                r.neg.iter().map(|&a| perm[a]),
            )
        })
        .collect();
    let mut heads = vec![Vec::new(); n];
    for (j, r) in rules.iter().enumerate() {
        heads[r.head].push(j);
    }
    let q = GroundProgram::from_raw_parts(atoms, rules, heads);
    assert!(validate(&q).is_empty());
    q
}
