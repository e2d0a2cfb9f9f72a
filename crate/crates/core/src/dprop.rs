//! Decision–propagation over crisp (true, false, undecided) atom sets.
//!
//! A run starts from the atoms derivable with every negative literal blocked,
//! then alternates two steps until nothing is undecided: a policy falsifies a
//! non-empty set of undecided atoms, and truth is propagated to the least
//! fixpoint of the consequence operator blocked by the non-false atoms. A run
//! succeeds when the true and false sets stay disjoint; its true set is then
//! a stable model, and every stable model is reachable this way.

use rand::{Rng, RngCore};
use thiserror::Error;

use crate::crisp::{is_stable, least_fixpoint};
use crate::seeding::rng_from_seed;
use crate::{GroundProgram, Interpretation};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrispState {
    pub t_set: Interpretation,
    pub f_set: Interpretation,
    pub u_set: Interpretation,
    pub k: usize,
}

impl CrispState {
    pub fn is_contradictory(&self) -> bool {
        !self.t_set.is_disjoint(&self.f_set)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecisionError {
    #[error("guidance exhausted: no undecided atom lies outside the target")]
    GuidanceExhausted,
    #[error("scripted decisions exhausted at step {0}")]
    ScriptExhausted(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RunError {
    #[error(transparent)]
    Decision(#[from] DecisionError),
    #[error("policy returned an empty decision while {undecided} atoms are undecided")]
    EmptyDecision { undecided: usize },
    #[error("policy decided atoms that are not undecided")]
    DecidedOutsideUndecided,
    #[error("run exceeded {0} iterations")]
    IterationBudget(usize),
}

/// Chooses which undecided atoms to falsify next.
///
/// Implementations must return a non-empty subset of `state.u_set` whenever
/// it is non-empty.
pub trait DecisionPolicy {
    fn decide(
        &mut self,
        p: &GroundProgram,
        state: &CrispState,
        rng: &mut dyn RngCore,
    ) -> Result<Interpretation, DecisionError>;
}

/// Uniform random decisions: one undecided atom, or with `singleton = false`
/// a uniformly random non-empty subset of the undecided atoms.
#[derive(Debug, Clone, Copy)]
pub struct RandomPolicy {
    pub singleton: bool,
}

pub fn random_policy(singleton: bool) -> RandomPolicy {
    RandomPolicy { singleton }
}

impl DecisionPolicy for RandomPolicy {
    fn decide(
        &mut self,
        _p: &GroundProgram,
        state: &CrispState,
        rng: &mut dyn RngCore,
    ) -> Result<Interpretation, DecisionError> {
        let undecided: Vec<usize> = state.u_set.iter().collect();
        let n = state.u_set.universe();
        if undecided.is_empty() {
            return Ok(Interpretation::empty(n));
        }
        if self.singleton {
            let pick = undecided[rng.gen_range(0..undecided.len())];
            return Ok(Interpretation::from_indices(n, [pick]));
        }
        loop {
            let e = Interpretation::from_indices(
                n,
                undecided.iter().copied().filter(|_| rng.gen_bool(0.5)),
            );
            if !e.is_empty() {
                return Ok(e);
            }
        }
    }
}

/// Falsifies the lowest-indexed undecided atom outside a target model.
#[derive(Debug, Clone)]
pub struct GuidedPolicy {
    target: Interpretation,
}

pub fn guided_policy(target: Interpretation) -> GuidedPolicy {
    GuidedPolicy { target }
}

impl DecisionPolicy for GuidedPolicy {
    fn decide(
        &mut self,
        _p: &GroundProgram,
        state: &CrispState,
        _rng: &mut dyn RngCore,
    ) -> Result<Interpretation, DecisionError> {
        let n = state.u_set.universe();
        match state.u_set.difference(&self.target).iter().next() {
            Some(a) => Ok(Interpretation::from_indices(n, [a])),
            None if state.u_set.is_empty() => Ok(Interpretation::empty(n)),
            None => Err(DecisionError::GuidanceExhausted),
        }
    }
}

/// Replays a fixed sequence of decision sets.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    script: Vec<Interpretation>,
    next: usize,
}

impl ScriptedPolicy {
    pub fn new(script: Vec<Interpretation>) -> Self {
        ScriptedPolicy { script, next: 0 }
    }
}

impl DecisionPolicy for ScriptedPolicy {
    fn decide(
        &mut self,
        _p: &GroundProgram,
        _state: &CrispState,
        _rng: &mut dyn RngCore,
    ) -> Result<Interpretation, DecisionError> {
        let e = self
            .script
            .get(self.next)
            .cloned()
            .ok_or(DecisionError::ScriptExhausted(self.next))?;
        self.next += 1;
        Ok(e)
    }
}

pub fn init_state(p: &GroundProgram) -> CrispState {
    let n = p.num_atoms();
    let t_set = least_fixpoint(p, &Interpretation::full(n), &Interpretation::empty(n));
    let f_set = Interpretation::empty(n);
    let u_set = t_set.complement();
    CrispState {
        t_set,
        f_set,
        u_set,
        k: 0,
    }
}

/// One decision followed by propagation, with the falsified set given.
pub fn apply_decision(
    p: &GroundProgram,
    state: &CrispState,
    decided: &Interpretation,
) -> CrispState {
    let f_set = state.f_set.union(decided);
    let t_set = least_fixpoint(p, &f_set.complement(), &state.t_set);
    let u_set = state.u_set.difference(&t_set.union(&f_set));
    CrispState {
        t_set,
        f_set,
        u_set,
        k: state.k + 1,
    }
}

/// One decision chosen by `policy`, followed by propagation. Returns the new
/// state and the decided set.
pub fn dprop_step(
    p: &GroundProgram,
    state: &CrispState,
    policy: &mut dyn DecisionPolicy,
    rng: &mut dyn RngCore,
) -> Result<(CrispState, Interpretation), RunError> {
    let decided = policy.decide(p, state, rng)?;
    if decided.is_empty() && !state.u_set.is_empty() {
        return Err(RunError::EmptyDecision {
            undecided: state.u_set.len(),
        });
    }
    if !decided.is_subset(&state.u_set) {
        return Err(RunError::DecidedOutsideUndecided);
    }
    Ok((apply_decision(p, state, &decided), decided))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RunStatus {
    Success(Interpretation),
    Contradiction,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunOutcome {
    pub status: RunStatus,
    pub iterations: usize,
    pub trace: Vec<Interpretation>,
    pub final_state: CrispState,
}

impl RunOutcome {
    pub fn model(&self) -> Option<&Interpretation> {
        match &self.status {
            RunStatus::Success(m) => Some(m),
            RunStatus::Contradiction => None,
        }
    }

    pub fn decisions(&self) -> usize {
        self.trace.iter().map(Interpretation::len).sum()
    }
}

/// Runs decision–propagation to termination. A run stops early as soon as
/// the true and false sets intersect.
pub fn dprop_run(
    p: &GroundProgram,
    policy: &mut dyn DecisionPolicy,
    rng: &mut dyn RngCore,
    max_iters: usize,
) -> Result<RunOutcome, RunError> {
    let mut state = init_state(p);
    let mut trace = Vec::new();
    while !state.u_set.is_empty() {
        if state.k >= max_iters {
            return Err(RunError::IterationBudget(max_iters));
        }
        let (next, decided) = dprop_step(p, &state, policy, rng)?;
        trace.push(decided);
        state = next;
        if state.is_contradictory() {
            return Ok(RunOutcome {
                status: RunStatus::Contradiction,
                iterations: state.k,
                trace,
                final_state: state,
            });
        }
    }
    Ok(RunOutcome {
        status: RunStatus::Success(state.t_set.clone()),
        iterations: state.k,
        trace,
        final_state: state,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RestartStats {
    pub runs: usize,
    pub decisions: usize,
}

/// Random singleton decisions with up to `restarts` independent runs. Each
/// attempt seeds its own generator from one draw of `rng`.
pub fn rdprop_solve(
    p: &GroundProgram,
    restarts: usize,
    rng: &mut dyn RngCore,
) -> Result<(RunOutcome, RestartStats), RunError> {
    assert!(restarts >= 1, "at least one run is required");
    let mut stats = RestartStats::default();
    let mut policy = random_policy(true);
    let mut last = None;
    for _ in 0..restarts {
        let mut attempt_rng = rng_from_seed(rng.next_u64());
        let outcome = dprop_run(p, &mut policy, &mut attempt_rng, p.num_atoms())?;
        stats.runs += 1;
        stats.decisions += outcome.decisions();
        let solved = outcome.model().is_some();
        last = Some(outcome);
        if solved {
            break;
        }
    }
    Ok((last.expect("restarts >= 1"), stats))
}

/// Baseline: one uniformly random interpretation, kept if it is stable.
pub fn random_assignment(p: &GroundProgram, rng: &mut dyn RngCore) -> Option<Interpretation> {
    let n = p.num_atoms();
    let guess = Interpretation::from_indices(n, (0..n).filter(|_| rng.gen_bool(0.5)));
    is_stable(p, &guess).then_some(guess)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::program::parse_program;
    use crate::seeding::rng_from_seed;

    fn parse(text: &str) -> GroundProgram {
        parse_program(text).unwrap().0
    }

    fn set(n: usize, xs: &[usize]) -> Interpretation {
        Interpretation::from_indices(n, xs.iter().copied())
    }

    const CYCLE: &str = "a :- not b.\nb :- not a.";

    #[test]
    fn initial_states() {
        let s = init_state(&parse(CYCLE));
        assert_eq!(
            (s.t_set, s.f_set, s.u_set),
            (set(2, &[]), set(2, &[]), set(2, &[0, 1]))
        );

        let s = init_state(&parse("a.\nb :- not a."));
        assert_eq!(s.t_set, set(2, &[0]));
        assert_eq!(s.u_set, set(2, &[1]));

        let s = init_state(&GroundProgram::empty());
        assert!(s.t_set.is_empty() && s.f_set.is_empty() && s.u_set.is_empty());
    }

    #[test]
    fn appendix_steps() {
        let p = parse(CYCLE);
        let s0 = init_state(&p);
        let s1 = apply_decision(&p, &s0, &set(2, &[1]));
        assert_eq!(
            (s1.t_set, s1.f_set, s1.u_set),
            (set(2, &[0]), set(2, &[1]), set(2, &[]))
        );
        let s1 = apply_decision(&p, &s0, &set(2, &[0]));
        assert_eq!(
            (s1.t_set, s1.f_set, s1.u_set),
            (set(2, &[1]), set(2, &[0]), set(2, &[]))
        );

        let p = parse("a :- not a.");
        let s1 = apply_decision(&p, &init_state(&p), &set(1, &[0]));
        assert_eq!(
            (s1.t_set.clone(), s1.f_set.clone()),
            (set(1, &[0]), set(1, &[0]))
        );
        assert!(s1.is_contradictory());
    }

    #[test]
    fn guided_runs_reach_their_targets() {
        let p = parse(CYCLE);
        let mut rng = rng_from_seed(0);
        for target in [set(2, &[0]), set(2, &[1])] {
            let out = dprop_run(&p, &mut guided_policy(target.clone()), &mut rng, 2).unwrap();
            assert_eq!(out.status, RunStatus::Success(target));
            assert_eq!(out.iterations, 1);
        }
    }

    #[test]
    fn guidance_exhausted_is_reported() {
        // {a} is not stable here; guidance toward it runs out of atoms to falsify
        let p = parse("a :- b.\nb :- not c.\nc :- not b.");
        let mut rng = rng_from_seed(0);
        let mut policy = guided_policy(set(3, &[0, 1, 2]));
        let err = dprop_run(&p, &mut policy, &mut rng, 3).unwrap_err();
        assert_eq!(err, RunError::Decision(DecisionError::GuidanceExhausted));
    }

    #[test]
    fn odd_loop_contradicts() {
        let p = parse("a :- not a.");
        let mut rng = rng_from_seed(1);
        let out = dprop_run(&p, &mut random_policy(true), &mut rng, 1).unwrap();
        assert_eq!(out.status, RunStatus::Contradiction);
    }

    #[test]
    fn facts_need_no_decisions() {
        let p = parse("p.");
        let mut rng = rng_from_seed(1);
        let out = dprop_run(&p, &mut random_policy(true), &mut rng, 1).unwrap();
        assert_eq!(out.status, RunStatus::Success(set(1, &[0])));
        assert_eq!(out.iterations, 0);
        assert!(out.trace.is_empty());
    }

    #[test]
    fn random_policy_is_seeded_and_forced() {
        let p = parse(CYCLE);
        let s = init_state(&p);
        let pick = |seed| {
            random_policy(true)
                .decide(&p, &s, &mut rng_from_seed(seed))
                .unwrap()
        };
        assert_eq!(pick(7), pick(7));

        let single = CrispState {
            u_set: set(2, &[1]),
            ..s.clone()
        };
        let e = random_policy(true)
            .decide(&p, &single, &mut rng_from_seed(3))
            .unwrap();
        assert_eq!(e, set(2, &[1]));
    }

    #[test]
    fn random_policy_is_uniform() {
        let n = 4;
        let s = CrispState {
            t_set: set(n, &[]),
            f_set: set(n, &[]),
            u_set: Interpretation::full(n),
            k: 0,
        };
        let p = GroundProgram::empty();
        let mut rng = rng_from_seed(42);
        let mut counts = [0usize; 4];
        let mut policy = random_policy(true);
        for _ in 0..10_000 {
            let e = policy.decide(&p, &s, &mut rng).unwrap();
            assert_eq!(e.len(), 1);
            counts[e.iter().next().unwrap()] += 1;
        }
        // 3 sigma of Binomial(10000, 1/4) is 130
        for c in counts {
            assert!((2350..=2650).contains(&c), "{counts:?}");
        }
    }

    #[test]
    fn batch_policy_decides_subsets_of_undecided() {
        let p = parse("a :- not b.\nb :- not c.\nc :- not a.\nd :- not e.");
        let s = init_state(&p);
        let mut rng = rng_from_seed(5);
        let mut policy = random_policy(false);
        for _ in 0..200 {
            let e = policy.decide(&p, &s, &mut rng).unwrap();
            assert!(!e.is_empty() && e.is_subset(&s.u_set));
        }
    }

    #[test]
    fn rdprop_examples() {
        let p = parse(CYCLE);
        let (out, stats) = rdprop_solve(&p, 1, &mut rng_from_seed(9)).unwrap();
        assert!(out.model().is_some());
        assert_eq!(stats.runs, 1);

        let p = parse("a :- not a.");
        let (out, stats) = rdprop_solve(&p, 100, &mut rng_from_seed(9)).unwrap();
        assert_eq!(out.status, RunStatus::Contradiction);
        assert_eq!(stats.runs, 100);
        assert_eq!(stats.decisions, 100);
    }

    #[test]
    fn empty_decision_is_rejected() {
        let p = parse(CYCLE);
        let mut policy = ScriptedPolicy::new(vec![set(2, &[])]);
        let err = dprop_run(&p, &mut policy, &mut rng_from_seed(0), 2).unwrap_err();
        assert_eq!(err, RunError::EmptyDecision { undecided: 2 });
    }

    #[test]
    fn random_assignment_only_returns_stable_sets() {
        let p = parse(CYCLE);
        let mut rng = rng_from_seed(11);
        let mut hits = 0;
        for _ in 0..200 {
            if let Some(m) = random_assignment(&p, &mut rng) {
                assert!(is_stable(&p, &m));
                hits += 1;
            }
        }
        assert!(hits > 0);
    }
}
