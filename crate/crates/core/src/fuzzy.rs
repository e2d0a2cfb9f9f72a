//! Fuzzy decision–propagation over true/false degree vectors.
//!
//! Each atom carries a true degree `tau` and a false degree `phi`. A positive
//! literal reads `tau`, a default-negated one reads `phi`. Rule bodies are
//! combined with a t-norm, rules sharing a head with the dual t-conorm.
//! Decisions only raise `phi`; propagation only rewrites `tau`.

use crate::crisp::is_stable;
use crate::{GroundProgram, Interpretation, TNormKind};

pub const DEFAULT_EPS: f64 = 1e-6;
pub const DEFAULT_BINARY_TOL: f64 = 1e-3;
pub const INNER_SWEEPS_PER_ATOM: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct FuzzyState {
    pub tau: Vec<f64>,
    pub phi: Vec<f64>,
    pub t: usize,
}

impl FuzzyState {
    /// Binary lift of crisp true/false sets.
    pub fn from_sets(t_set: &Interpretation, f_set: &Interpretation) -> Self {
        FuzzyState {
            tau: t_set.indicator(),
            phi: f_set.indicator(),
            t: 0,
        }
    }

    pub fn in_range(&self) -> bool {
        self.tau
            .iter()
            .chain(&self.phi)
            .all(|x| (0.0..=1.0).contains(x))
    }
}

/// `mu_i = (1 - tau_i) ⊗ (1 - phi_i)`.
pub fn undecided_degree(tau: &[f64], phi: &[f64], kind: TNormKind) -> Vec<f64> {
    tau.iter()
        .zip(phi)
        .map(|(&t, &f)| kind.tnorm(1.0 - t, 1.0 - f))
        .collect()
}

pub fn rule_support(
    p: &GroundProgram,
    rule_id: usize,
    tau: &[f64],
    phi: &[f64],
    kind: TNormKind,
) -> f64 {
    let r = &p.rules()[rule_id];
    kind.tnorm_fold(
        r.pos
            .iter()
            .map(|&a| tau[a])
            .chain(r.neg.iter().map(|&a| phi[a])),
    )
}

/// One application of the soft consequence operator.
pub fn soft_consequence(p: &GroundProgram, phi: &[f64], tau: &[f64], kind: TNormKind) -> Vec<f64> {
    (0..p.num_atoms())
        .map(|i| {
            kind.tconorm_fold(
                p.rules_with_head(i)
                    .iter()
                    .map(|&j| rule_support(p, j, tau, phi, kind)),
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagationConfig {
    pub eps: f64,
    /// `None` means `20 * n` sweeps.
    pub max_inner: Option<usize>,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        PropagationConfig {
            eps: DEFAULT_EPS,
            max_inner: None,
        }
    }
}

impl PropagationConfig {
    pub fn max_inner_for(&self, n: usize) -> usize {
        self.max_inner.unwrap_or(INNER_SWEEPS_PER_ATOM * n).max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Propagation {
    pub tau: Vec<f64>,
    pub converged: bool,
    pub inner_iters: usize,
}

/// Applies the soft consequence operator synchronously until the largest
/// change drops below `eps` or `max_inner` sweeps have run.
pub fn propagate(
    p: &GroundProgram,
    phi: &[f64],
    tau0: &[f64],
    kind: TNormKind,
    eps: f64,
    max_inner: usize,
) -> Propagation {
    assert!(eps > 0.0 && max_inner >= 1);
    let mut tau = tau0.to_vec();
    for iter in 1..=max_inner {
        let next = soft_consequence(p, phi, &tau, kind);
        let change = next
            .iter()
            .zip(&tau)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        tau = next;
        if change < eps {
            return Propagation {
                tau,
                converged: true,
                inner_iters: iter,
            };
        }
    }
    Propagation {
        tau,
        converged: false,
        inner_iters: max_inner,
    }
}

/// `phi' = phi + mu ⊙ delta`, clipped at 1 against rounding.
pub fn decision_update(phi: &[f64], mu: &[f64], delta: &[f64]) -> Vec<f64> {
    phi.iter()
        .zip(mu)
        .zip(delta)
        .map(|((&f, &m), &d)| (f + m * d).min(1.0))
        .collect()
}

/// `p_i = (tau_i + 1 - phi_i) / 2`.
pub fn membership(tau: &[f64], phi: &[f64]) -> Vec<f64> {
    tau.iter()
        .zip(phi)
        .map(|(&t, &f)| 0.5 * (t + 1.0 - f))
        .collect()
}

/// Mean distance of membership scores from the nearest binary value.
pub fn binarization_distance(scores: &[f64]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    scores.iter().map(|&x| x.min(1.0 - x)).sum::<f64>() / scores.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertifyConfig {
    pub binary_tol: f64,
    pub propagation: PropagationConfig,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        CertifyConfig {
            binary_tol: DEFAULT_BINARY_TOL,
            propagation: PropagationConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Certification {
    Stable(Interpretation),
    NotBinary { reason: String },
    NotStable(Interpretation),
}

impl Certification {
    pub fn model(&self) -> Option<&Interpretation> {
        match self {
            Certification::Stable(m) => Some(m),
            _ => None,
        }
    }
}

/// Propagates to convergence, rounds a near-binary membership vector and
/// confirms the rounded set with the crisp stability check.
pub fn certify(
    p: &GroundProgram,
    tau: &[f64],
    phi: &[f64],
    kind: TNormKind,
    cfg: &CertifyConfig,
) -> Certification {
    assert!(cfg.binary_tol > 0.0);
    let n = p.num_atoms();
    let prop = propagate(
        p,
        phi,
        tau,
        kind,
        cfg.propagation.eps,
        cfg.propagation.max_inner_for(n),
    );
    if !prop.converged {
        return Certification::NotBinary {
            reason: format!(
                "propagation did not converge within {} sweeps",
                prop.inner_iters
            ),
        };
    }
    let scores = membership(&prop.tau, phi);
    if let Some((i, x)) = scores
        .iter()
        .enumerate()
        .find(|(_, &x)| (x - x.round()).abs() > cfg.binary_tol)
    {
        return Certification::NotBinary {
            reason: format!("atom {i} has membership {x:.6}"),
        };
    }
    let model = Interpretation::from_indices(
        n,
        scores
            .iter()
            .enumerate()
            .filter(|(_, &x)| x.round() == 1.0)
            .map(|(i, _)| i),
    );
    if is_stable(p, &model) {
        Certification::Stable(model)
    } else {
        Certification::NotStable(model)
    }
}
