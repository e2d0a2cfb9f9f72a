//! The learned decision policy and the fuzzy decision–propagation loop that
//! runs it.
//!
//! One recurrent cell with shared weights is applied to every atom of every
//! logical state. Its input is the atom's `[tau, phi, mu]` triple and its own
//! hidden vector; its output is a decision score in `(0, 1)` that scales how
//! far the atom's false degree moves toward 1 in this round. Several logical
//! states run side by side from different random hidden initializations, and
//! the one closest to binary at the end is read out.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{grad_check, sigmoid, GradCheckReport, Input, Tape, Var};
use crate::dprop::init_state;
use crate::fuzzy::{
    binarization_distance, certify, decision_update, membership, propagate, undecided_degree,
    Certification, CertifyConfig, PropagationConfig,
};
use crate::seeding::{derive_seed, rng_from_seed, SolverRng};
use crate::{GroundProgram, Interpretation, TNormKind};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"NDPW";
pub const WEIGHTS_VERSION: u32 = 1;
const INPUT_DIM: usize = 3;

/// Parameters of the recurrent decision cell and its readout.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyWeights {
    pub hidden: usize,
    pub logical: usize,
    pub tnorm: TNormKind,
    /// `3 x H`
    pub w_in: Vec<f64>,
    /// `H x H`
    pub w_h: Vec<f64>,
    /// `1 x H`
    pub b_h: Vec<f64>,
    /// `H x 1`
    pub w_out: Vec<f64>,
    /// `1 x 1`
    pub b_out: Vec<f64>,
}

impl PolicyWeights {
    pub fn zeros(hidden: usize, logical: usize, tnorm: TNormKind) -> Self {
        PolicyWeights {
            hidden,
            logical,
            tnorm,
            w_in: vec![0.0; INPUT_DIM * hidden],
            w_h: vec![0.0; hidden * hidden],
            b_h: vec![0.0; hidden],
            w_out: vec![0.0; hidden],
            b_out: vec![0.0],
        }
    }

    pub fn param_count(&self) -> usize {
        Self::param_count_for(self.hidden)
    }

    pub fn param_count_for(hidden: usize) -> usize {
        INPUT_DIM * hidden + hidden * hidden + hidden + hidden + 1
    }

    /// Parameter blocks in file order.
    pub fn blocks(&self) -> [&[f64]; 5] {
        [&self.w_in, &self.w_h, &self.b_h, &self.w_out, &self.b_out]
    }

    fn blocks_mut(&mut self) -> [&mut Vec<f64>; 5] {
        [
            &mut self.w_in,
            &mut self.w_h,
            &mut self.b_h,
            &mut self.w_out,
            &mut self.b_out,
        ]
    }

    pub fn flat(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.param_count());
        let mut offset = 0;
        for block in self.blocks_mut() {
            let len = block.len();
            block.copy_from_slice(&values[offset..offset + len]);
            offset += len;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|b| b.iter().all(|x| x.is_finite()))
    }
}

/// Uniform initialization in `[-1/sqrt(H), 1/sqrt(H)]`.
pub fn init_weights(hidden: usize, logical: usize, tnorm: TNormKind, seed: u64) -> PolicyWeights {
    assert!(hidden >= 1 && logical >= 1);
    let mut rng = rng_from_seed(seed);
    let bound = 1.0 / (hidden as f64).sqrt();
    let mut w = PolicyWeights::zeros(hidden, logical, tnorm);
    for block in w.blocks_mut() {
        for x in block.iter_mut() {
            *x = rng.gen_range(-bound..=bound);
        }
    }
    w
}

/// Hidden vectors, one per (logical state, atom) row, `L·n x H` row-major
/// with row index `state * n + atom`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub atoms: usize,
    pub logical: usize,
    pub hidden: usize,
    pub data: Vec<f64>,
}

impl HiddenState {
    pub fn zeros(atoms: usize, logical: usize, hidden: usize) -> Self {
        HiddenState {
            atoms,
            logical,
            hidden,
            data: vec![0.0; atoms * logical * hidden],
        }
    }

    /// Independent uniform `[-1, 1]` entries, so atoms and logical states
    /// start from different points.
    pub fn random(atoms: usize, logical: usize, hidden: usize, rng: &mut dyn RngCore) -> Self {
        let data = (0..atoms * logical * hidden)
            .map(|_| rng.gen_range(-1.0..=1.0))
            .collect();
        HiddenState {
            atoms,
            logical,
            hidden,
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.atoms * self.logical
    }
}

/// One cell application for every row. `tau`, `phi`, `mu` are `L·n` long in
/// state-major order. Returns decision scores and the next hidden state.
pub fn decision_step(
    weights: &PolicyWeights,
    tau: &[f64],
    phi: &[f64],
    mu: &[f64],
    hidden: &HiddenState,
) -> (Vec<f64>, HiddenState) {
    let h = weights.hidden;
    let rows = hidden.rows();
    assert!(tau.len() == rows && phi.len() == rows && mu.len() == rows && hidden.hidden == h);
    let mut delta = Vec::with_capacity(rows);
    let mut next = vec![0.0; rows * h];
    let mut pre_in = vec![0.0; h];
    let mut pre_h = vec![0.0; h];
    for r in 0..rows {
        // same accumulation order as the taped version
        pre_in.copy_from_slice(&weights.b_h);
        for (k, x) in [tau[r], phi[r], mu[r]].into_iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (o, w) in pre_in.iter_mut().zip(&weights.w_in[k * h..(k + 1) * h]) {
                *o += x * w;
            }
        }
        pre_h.iter_mut().for_each(|v| *v = 0.0);
        let hrow = &hidden.data[r * h..(r + 1) * h];
        for (k, &x) in hrow.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (o, w) in pre_h.iter_mut().zip(&weights.w_h[k * h..(k + 1) * h]) {
                *o += x * w;
            }
        }
        let out = &mut next[r * h..(r + 1) * h];
        for ((o, a), b) in out.iter_mut().zip(&pre_in).zip(&pre_h) {
            *o = (a + b).tanh();
        }
        let mut logit = weights.b_out[0];
        for (x, w) in out.iter().zip(&weights.w_out) {
            if *x != 0.0 {
                logit += x * w;
            }
        }
        delta.push(sigmoid(logit));
    }
    (
        delta,
        HiddenState {
            data: next,
            ..hidden.clone()
        },
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardConfig {
    pub outer_iterations: usize,
    pub propagation: PropagationConfig,
    pub certify: CertifyConfig,
    /// Replace each decision score by 1 if it is at least 0.5, else 0.
    pub hard_threshold: bool,
    pub record_trajectory: bool,
}

impl ForwardConfig {
    pub fn new(outer_iterations: usize) -> Self {
        ForwardConfig {
            outer_iterations,
            propagation: PropagationConfig::default(),
            certify: CertifyConfig::default(),
            hard_threshold: false,
            record_trajectory: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogicalState {
    pub tau: Vec<f64>,
    pub phi: Vec<f64>,
    pub scores: Vec<f64>,
    pub converged: bool,
}

/// Degrees of every logical state after one round.
#[derive(Debug, Clone, PartialEq)]
pub struct Round {
    pub delta: Vec<Vec<f64>>,
    pub tau: Vec<Vec<f64>>,
    pub phi: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutcome {
    pub states: Vec<LogicalState>,
    pub best_state: usize,
    pub certification: Certification,
    pub trajectory: Vec<Round>,
}

/// Index of the state with the smallest binarization distance; ties go to
/// the lowest index.
pub fn select_best_state<'a>(scores: impl IntoIterator<Item = &'a [f64]>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, s) in scores.into_iter().enumerate() {
        let d = binarization_distance(s);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// Runs the decision–propagation rounds for every logical state from the
/// crisp initial true set, then certifies the state closest to binary.
pub fn ndprop_forward(
    p: &GroundProgram,
    weights: &PolicyWeights,
    cfg: &ForwardConfig,
    init: &HiddenState,
) -> ForwardOutcome {
    let n = p.num_atoms();
    let l = weights.logical;
    let kind = weights.tnorm;
    assert_eq!(
        (init.atoms, init.logical, init.hidden),
        (n, l, weights.hidden),
        "hidden state shape"
    );
    let t0 = init_state(p).t_set.indicator();
    let mut tau: Vec<Vec<f64>> = vec![t0; l];
    let mut phi: Vec<Vec<f64>> = vec![vec![0.0; n]; l];
    let mut converged = vec![true; l];
    let mut hidden = init.clone();
    let max_inner = cfg.propagation.max_inner_for(n);
    let mut trajectory = Vec::new();
    for _ in 0..cfg.outer_iterations {
        let mu: Vec<Vec<f64>> = (0..l)
            .map(|s| undecided_degree(&tau[s], &phi[s], kind))
            .collect();
        let (delta, next_hidden) =
            decision_step(weights, &tau.concat(), &phi.concat(), &mu.concat(), &hidden);
        hidden = next_hidden;
        let delta: Vec<Vec<f64>> = delta
            .chunks(n.max(1))
            .take(l)
            .map(|c| {
                if cfg.hard_threshold {
                    c.iter()
                        .map(|&d| if d >= 0.5 { 1.0 } else { 0.0 })
                        .collect()
                } else {
                    c.to_vec()
                }
            })
            .collect();
        let delta = if n == 0 { vec![Vec::new(); l] } else { delta };
        for s in 0..l {
            phi[s] = decision_update(&phi[s], &mu[s], &delta[s]);
            let prop = propagate(p, &phi[s], &tau[s], kind, cfg.propagation.eps, max_inner);
            tau[s] = prop.tau;
            converged[s] = prop.converged;
        }
        if cfg.record_trajectory {
            trajectory.push(Round {
                delta,
                tau: tau.clone(),
                phi: phi.clone(),
            });
        }
    }
    let states: Vec<LogicalState> = (0..l)
        .map(|s| LogicalState {
            scores: membership(&tau[s], &phi[s]),
            tau: tau[s].clone(),
            phi: phi[s].clone(),
            converged: converged[s],
        })
        .collect();
    let best_state = select_best_state(states.iter().map(|s| s.scores.as_slice()));
    let best = &states[best_state];
    let certification = certify(p, &best.tau, &best.phi, kind, &cfg.certify);
    ForwardOutcome {
        states,
        best_state,
        certification,
        trajectory,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LossError {
    #[error("inconsistent instance: no stable model to compare against")]
    NoModels,
}

/// Binary cross entropy of `scores` (a `1 x n` tape value) against every
/// model; the smallest is returned and only its branch carries gradient.
pub fn min_bce_loss(
    tape: &mut Tape<'_>,
    scores: Var,
    models: &[Interpretation],
) -> Result<Var, LossError> {
    if models.is_empty() {
        return Err(LossError::NoModels);
    }
    let n = scores.len();
    if n == 0 {
        return Ok(tape.scalar_leaf(0.0));
    }
    let ln_p = tape.ln_safe(scores);
    let one_minus = tape.one_minus(scores);
    let ln_q = tape.ln_safe(one_minus);
    let mut best: Option<(f64, Var, usize)> = None;
    for (i, m) in models.iter().enumerate() {
        let y = m.indicator();
        let not_y: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
        let y = tape.leaf(y, 1, n);
        let not_y = tape.leaf(not_y, 1, n);
        let a = tape.mul(ln_p, y).expect("same shape");
        let b = tape.mul(ln_q, not_y).expect("same shape");
        let s = tape.add(a, b).expect("same shape");
        let m = tape.mean(s);
        let bce = tape.scale(m, -1.0);
        let v = tape.scalar(bce);
        if best.is_none_or(|(bv, _, _)| v < bv) {
            best = Some((v, bce, i));
        }
    }
    let (_, var, idx) = best.expect("non-empty");
    tape.note_branch(idx as u64);
    Ok(var)
}

/// Which logical states the training loss looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// The state closest to binary.
    #[default]
    Best,
    /// Average over all states.
    Mean,
    /// The smallest loss over states.
    Min,
}

/// Weight leaves of one taped forward pass.
#[derive(Debug, Clone, Copy)]
pub struct WeightVars {
    pub w_in: Var,
    pub w_h: Var,
    pub b_h: Var,
    pub w_out: Var,
    pub b_out: Var,
}

impl WeightVars {
    pub fn record(tape: &mut Tape<'_>, w: &PolicyWeights) -> Self {
        let h = w.hidden;
        WeightVars {
            w_in: tape.leaf(w.w_in.clone(), INPUT_DIM, h),
            w_h: tape.leaf(w.w_h.clone(), h, h),
            b_h: tape.leaf(w.b_h.clone(), 1, h),
            w_out: tape.leaf(w.w_out.clone(), h, 1),
            b_out: tape.leaf(w.b_out.clone(), 1, 1),
        }
    }

    pub fn all(&self) -> [Var; 5] {
        [self.w_in, self.w_h, self.b_h, self.w_out, self.b_out]
    }
}

/// Taped forward pass with a fixed number of propagation sweeps per round.
/// Returns the `L x n` membership scores.
pub fn taped_forward<'p>(
    tape: &mut Tape<'p>,
    p: &'p GroundProgram,
    wv: &WeightVars,
    kind: TNormKind,
    outer_iterations: usize,
    inner_sweeps: usize,
    init: &HiddenState,
) -> Var {
    let n = p.num_atoms();
    let l = init.logical;
    let h = init.hidden;
    let rows = l * n;
    let t0 = init_state(p).t_set.indicator();
    let mut tau = tape.leaf(t0.repeat(l), l, n);
    let mut phi = tape.leaf(vec![0.0; rows], l, n);
    let mut hidden = tape.leaf(init.data.clone(), rows, h);
    for _ in 0..outer_iterations {
        let nt = tape.one_minus(tau);
        let nf = tape.one_minus(phi);
        let mu = tape.tnorm(kind, nt, nf).expect("same shape");
        let cols: Vec<Var> = [tau, phi, mu]
            .iter()
            .map(|&v| tape.reshape(v, rows, 1).expect("size"))
            .collect();
        let x = tape.concat_cols(&cols).expect("rows");
        let a = tape.affine(x, wv.w_in, Some(wv.b_h)).expect("shape");
        let b = tape.affine(hidden, wv.w_h, None).expect("shape");
        let pre = tape.add(a, b).expect("shape");
        hidden = tape.tanh(pre);
        let logits = tape
            .affine(hidden, wv.w_out, Some(wv.b_out))
            .expect("shape");
        let delta = tape.sigmoid(logits);
        let delta = tape.reshape(delta, l, n).expect("size");
        let step = tape.mul(mu, delta).expect("shape");
        let raised = tape.add(phi, step).expect("shape");
        phi = tape.clamp01(raised);
        for _ in 0..inner_sweeps {
            tau = tape.soft_consequence(kind, p, tau, phi).expect("shape");
        }
    }
    let nf = tape.one_minus(phi);
    let sum = tape.add(tau, nf).expect("shape");
    tape.scale(sum, 0.5)
}

/// Training loss of one instance and its gradient with respect to the
/// weights, flattened in file order.
pub fn instance_loss_and_grad(
    p: &GroundProgram,
    models: &[Interpretation],
    weights: &PolicyWeights,
    outer_iterations: usize,
    inner_sweeps: usize,
    mode: LossMode,
    init: &HiddenState,
) -> Result<(f64, Vec<f64>), LossError> {
    let mut tape = Tape::new();
    let wv = WeightVars::record(&mut tape, weights);
    let scores = taped_forward(
        &mut tape,
        p,
        &wv,
        weights.tnorm,
        outer_iterations,
        inner_sweeps,
        init,
    );
    let loss = state_loss(&mut tape, scores, models, mode)?;
    let value = tape.scalar(loss);
    let grads = tape.backward(loss);
    let flat = wv.all().iter().flat_map(|&v| grads.wrt(v)).collect();
    Ok((value, flat))
}

/// Combines per-state min-BCE losses according to `mode`.
pub fn state_loss(
    tape: &mut Tape<'_>,
    scores: Var,
    models: &[Interpretation],
    mode: LossMode,
) -> Result<Var, LossError> {
    let (l, n) = scores.shape();
    let rows: Vec<Vec<f64>> = tape
        .value(scores)
        .chunks(n.max(1))
        .take(l)
        .map(<[f64]>::to_vec)
        .collect();
    match mode {
        LossMode::Best => {
            let best = if n == 0 {
                0
            } else {
                select_best_state(rows.iter().map(Vec::as_slice))
            };
            tape.note_branch(best as u64);
            let row = tape.select_row(scores, best);
            min_bce_loss(tape, row, models)
        }
        LossMode::Mean => {
            let mut total: Option<Var> = None;
            for s in 0..l {
                let row = tape.select_row(scores, s);
                let loss = min_bce_loss(tape, row, models)?;
                total = Some(match total {
                    None => loss,
                    Some(t) => tape.add(t, loss).expect("scalars"),
                });
            }
            let total = total.expect("at least one logical state");
            Ok(tape.scale(total, 1.0 / l as f64))
        }
        LossMode::Min => {
            let mut best: Option<(f64, Var, usize)> = None;
            for s in 0..l {
                let row = tape.select_row(scores, s);
                let loss = min_bce_loss(tape, row, models)?;
                let v = tape.scalar(loss);
                if best.is_none_or(|(bv, _, _)| v < bv) {
                    best = Some((v, loss, s));
                }
            }
            let (_, loss, s) = best.expect("at least one logical state");
            tape.note_branch(s as u64);
            Ok(loss)
        }
    }
}

/// Central-difference check of the weight gradient of the unrolled forward
/// pass. The loss is the min-BCE of the selected state when `models` is
/// non-empty and the mean membership score otherwise.
pub fn forward_grad_check<'p>(
    p: &'p GroundProgram,
    models: &[Interpretation],
    weights: &PolicyWeights,
    outer_iterations: usize,
    inner_sweeps: usize,
    init: &HiddenState,
    h: f64,
) -> GradCheckReport {
    let hd = weights.hidden;
    let point = [
        Input::new(weights.w_in.clone(), INPUT_DIM, hd),
        Input::new(weights.w_h.clone(), hd, hd),
        Input::new(weights.b_h.clone(), 1, hd),
        Input::new(weights.w_out.clone(), hd, 1),
        Input::new(weights.b_out.clone(), 1, 1),
    ];
    let kind = weights.tnorm;
    let f = |tape: &mut Tape<'p>, v: &[Var]| {
        let wv = WeightVars {
            w_in: v[0],
            w_h: v[1],
            b_h: v[2],
            w_out: v[3],
            b_out: v[4],
        };
        let scores = taped_forward(tape, p, &wv, kind, outer_iterations, inner_sweeps, init);
        if models.is_empty() {
            tape.mean(scores)
        } else {
            state_loss(tape, scores, models, LossMode::Best).expect("models are non-empty")
        }
    };
    grad_check(f, &point, h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub outer_iterations: usize,
    pub train_inner_sweeps: usize,
    pub test_outer_iterations: usize,
    pub hidden_dim: usize,
    pub logical_dim: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub tnorm: TNormKind,
    pub loss_mode: LossMode,
    pub eps: f64,
    pub binary_tol: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1000,
            outer_iterations: 10,
            train_inner_sweeps: 10,
            test_outer_iterations: 50,
            hidden_dim: 32,
            logical_dim: 32,
            learning_rate: 1e-3,
            batch_size: 64,
            tnorm: TNormKind::Godel,
            loss_mode: LossMode::Best,
            eps: crate::fuzzy::DEFAULT_EPS,
            binary_tol: crate::fuzzy::DEFAULT_BINARY_TOL,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn forward_config(&self) -> ForwardConfig {
        let mut f = ForwardConfig::new(self.test_outer_iterations);
        f.propagation.eps = self.eps;
        f.certify.propagation.eps = self.eps;
        f.certify.binary_tol = self.binary_tol;
        f
    }
}

/// An instance with its oracle stable models.
#[derive(Debug, Clone)]
pub struct LabeledProgram {
    pub program: GroundProgram,
    pub models: Vec<Interpretation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training loss; absent for the pre-training evaluation.
    pub mean_loss: Option<f64>,
    pub val_solve_rate: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: PolicyWeights,
    pub final_weights: PolicyWeights,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f64,
    },
    #[error("invalid training configuration: {0}")]
    Config(String),
}

const VAL_STREAM: u64 = 0x0056_414c;
const TRAIN_STREAM: u64 = 0x0054_524e;

/// Hidden initialization used when evaluating instance `index` under `seed`.
pub fn eval_hidden(
    seed: u64,
    index: usize,
    p: &GroundProgram,
    weights: &PolicyWeights,
) -> HiddenState {
    let mut rng = rng_from_seed(derive_seed(seed, &[VAL_STREAM, index as u64]));
    HiddenState::random(p.num_atoms(), weights.logical, weights.hidden, &mut rng)
}

/// Fraction of instances whose selected state certifies as stable.
pub fn solve_rate(
    instances: &[LabeledProgram],
    weights: &PolicyWeights,
    cfg: &ForwardConfig,
    seed: u64,
) -> f64 {
    if instances.is_empty() {
        return 0.0;
    }
    let solved: usize = instances
        .par_iter()
        .enumerate()
        .map(|(i, inst)| {
            let init = eval_hidden(seed, i, &inst.program, weights);
            ndprop_forward(&inst.program, weights, cfg, &init)
                .certification
                .model()
                .is_some() as usize
        })
        .collect::<Vec<_>>()
        .into_iter()
        .sum();
    solved as f64 / instances.len() as f64
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(len: usize) -> Self {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * mhat / (vhat.sqrt() + Self::EPS);
        }
    }
}

/// Minibatch Adam on the min-BCE loss. Returns the weights with the best
/// validation solve rate (the initial weights count as epoch 0).
pub fn train(
    train_set: &[LabeledProgram],
    val_set: &[LabeledProgram],
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if cfg.hidden_dim == 0
        || cfg.logical_dim == 0
        || cfg.batch_size == 0
        || cfg.outer_iterations == 0
    {
        return Err(TrainError::Config(
            "dimensions, batch size and iterations must be positive".into(),
        ));
    }
    if let Some(i) = train_set.iter().position(|x| x.models.is_empty()) {
        log::error!("training instance {i} has no stable model");
        return Err(TrainError::Loss(LossError::NoModels));
    }
    let mut weights = init_weights(cfg.hidden_dim, cfg.logical_dim, cfg.tnorm, cfg.seed);
    let fwd = cfg.forward_config();
    let initial_rate = solve_rate(val_set, &weights, &fwd, cfg.seed);
    let mut log_rows = vec![EpochLog {
        epoch: 0,
        mean_loss: None,
        val_solve_rate: initial_rate,
    }];
    log::info!("epoch 0: val solve rate {:.3}", initial_rate);
    let mut best = (initial_rate, weights.clone(), 0);
    let mut adam = Adam::new(weights.param_count());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=cfg.epochs {
        let mut shuffle_rng =
            SolverRng::seed_from_u64(derive_seed(cfg.seed, &[TRAIN_STREAM, epoch as u64]));
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<Result<(f64, Vec<f64>), LossError>> = batch
                .par_iter()
                .map(|&i| {
                    let inst = &train_set[i];
                    let mut rng = rng_from_seed(derive_seed(
                        cfg.seed,
                        &[TRAIN_STREAM, epoch as u64, i as u64],
                    ));
                    let init = HiddenState::random(
                        inst.program.num_atoms(),
                        cfg.logical_dim,
                        cfg.hidden_dim,
                        &mut rng,
                    );
                    instance_loss_and_grad(
                        &inst.program,
                        &inst.models,
                        &weights,
                        cfg.outer_iterations,
                        cfg.train_inner_sweeps,
                        cfg.loss_mode,
                        &init,
                    )
                })
                .collect();
            let mut grad = vec![0.0; weights.param_count()];
            let mut batch_loss = 0.0;
            for r in results {
                let (l, g) = r?;
                batch_loss += l;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grad.iter_mut().for_each(|g| *g *= scale);
            if !batch_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                log::error!("non-finite loss or gradient at epoch {epoch}, batch {batch_no}");
                return Err(TrainError::Diverged {
                    epoch,
                    batch: batch_no,
                    loss: batch_loss * scale,
                });
            }
            loss_sum += batch_loss;
            let mut flat = weights.flat();
            adam.step(&mut flat, &grad, cfg.learning_rate);
            weights.set_flat(&flat);
        }
        let mean_loss = loss_sum / train_set.len().max(1) as f64;
        let rate = solve_rate(val_set, &weights, &fwd, cfg.seed);
        log::info!("epoch {epoch}: loss {mean_loss:.5}, val solve rate {rate:.3}");
        log_rows.push(EpochLog {
            epoch,
            mean_loss: Some(mean_loss),
            val_solve_rate: rate,
        });
        if rate > best.0 {
            best = (rate, weights.clone(), epoch);
        }
    }
    Ok(TrainOutcome {
        weights: best.1,
        final_weights: weights,
        log: log_rows,
        best_epoch: best.2,
    })
}

#[derive(Debug, Error)]
pub enum WeightFileError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt weight file: {0}")]
    Corrupt(String),
    #[error("unsupported weight file version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
}

pub fn encode_weights(w: &PolicyWeights) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + 8 * w.param_count());
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(w.hidden as u32).to_le_bytes());
    out.extend_from_slice(&(w.logical as u32).to_le_bytes());
    out.push(w.tnorm.id());
    for block in w.blocks() {
        for x in block {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode_weights(bytes: &[u8]) -> Result<PolicyWeights, WeightFileError> {
    const HEADER: usize = 4 + 4 + 4 + 4 + 1;
    if bytes.len() < HEADER {
        return Err(WeightFileError::Corrupt(format!(
            "header needs {HEADER} bytes, file has {}",
            bytes.len()
        )));
    }
    if &bytes[..4] != WEIGHTS_MAGIC {
        return Err(WeightFileError::Corrupt("bad magic bytes".into()));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != WEIGHTS_VERSION {
        return Err(WeightFileError::VersionMismatch {
            found: version,
            expected: WEIGHTS_VERSION,
        });
    }
    let (hidden, logical) = (word(8) as usize, word(12) as usize);
    if hidden == 0 || logical == 0 {
        return Err(WeightFileError::Corrupt(
            "zero hidden or logical dimension".into(),
        ));
    }
    let tnorm =
        TNormKind::from_id(bytes[16]).map_err(|e| WeightFileError::Corrupt(e.to_string()))?;
    let count = PolicyWeights::param_count_for(hidden);
    let body = &bytes[HEADER..];
    if body.len() != 8 * count {
        return Err(WeightFileError::Corrupt(format!(
            "expected {} parameter bytes for hidden dimension {hidden}, found {}",
            8 * count,
            body.len()
        )));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut w = PolicyWeights::zeros(hidden, logical, tnorm);
    w.set_flat(&values);
    Ok(w)
}

pub fn save_weights(w: &PolicyWeights, path: &Path) -> Result<(), WeightFileError> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_weights(w))?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<PolicyWeights, WeightFileError> {
    decode_weights(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::program::parse_program;

    fn parse(text: &str) -> GroundProgram {
        parse_program(text).unwrap().0
    }

    const CYCLE: &str = "a :- not b.\nb :- not a.";

    #[test]
    fn init_is_seeded_and_bounded() {
        let a = init_weights(8, 2, TNormKind::Godel, 3);
        assert_eq!(a, init_weights(8, 2, TNormKind::Godel, 3));
        assert_ne!(a, init_weights(8, 2, TNormKind::Godel, 4));
        let bound = 1.0 / 8f64.sqrt();
        assert!(a.flat().iter().all(|x| x.abs() <= bound));
    }

    #[test]
    fn parameter_count_for_unit_hidden() {
        assert_eq!(PolicyWeights::param_count_for(1), 7);
        assert_eq!(init_weights(1, 1, TNormKind::Godel, 0).flat().len(), 7);
        assert_eq!(PolicyWeights::param_count_for(32), 96 + 1024 + 32 + 32 + 1);
    }

    #[test]
    fn zero_weights_give_half_scores() {
        let w = PolicyWeights::zeros(4, 2, TNormKind::Godel);
        let hidden = HiddenState::random(3, 2, 4, &mut rng_from_seed(1));
        let (delta, _) = decision_step(&w, &[0.2; 6], &[0.1; 6], &[0.7; 6], &hidden);
        assert_eq!(delta, vec![0.5; 6]);
    }

    #[test]
    fn decided_atoms_ignore_decisions() {
        let phi = decision_update(&[0.0, 1.0], &[0.0, 0.0], &[0.93, 0.2]);
        assert_eq!(phi, vec![0.0, 1.0]);
    }

    #[test]
    fn plain_and_taped_cells_agree() {
        let p = parse("a :- not b.\nb :- not c.\nc :- not a, b.\nd :- not d.");
        let w = init_weights(5, 3, TNormKind::Product, 8);
        let init = HiddenState::random(4, 3, 5, &mut rng_from_seed(2));
        let mut cfg = ForwardConfig::new(4);
        cfg.propagation.max_inner = Some(6);
        cfg.propagation.eps = 1e-300;
        let plain = ndprop_forward(&p, &w, &cfg, &init);
        let mut tape = Tape::new();
        let wv = WeightVars::record(&mut tape, &w);
        let scores = taped_forward(&mut tape, &p, &wv, w.tnorm, 4, 6, &init);
        let taped = tape.value(scores);
        for (s, state) in plain.states.iter().enumerate() {
            for (i, x) in state.scores.iter().enumerate() {
                assert!((x - taped[s * 4 + i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn crisp_emulation_on_the_two_cycle() {
        // readout bias pushes every score above 0.5 except through weights on phi/tau
        let p = parse(CYCLE);
        let mut w = PolicyWeights::zeros(1, 1, TNormKind::Godel);
        // hidden unit copies the initial hidden value; readout thresholds it
        w.w_h = vec![1.0];
        w.w_out = vec![1.0];
        let init = HiddenState {
            atoms: 2,
            logical: 1,
            hidden: 1,
            data: vec![-5.0, 5.0],
        };
        let mut cfg = ForwardConfig::new(1);
        cfg.hard_threshold = true;
        let out = ndprop_forward(&p, &w, &cfg, &init);
        assert_eq!(
            out.certification,
            Certification::Stable(Interpretation::from_indices(2, [0]))
        );
    }

    #[test]
    fn best_state_selection() {
        let rows: Vec<Vec<f64>> = vec![
            vec![0.5, 0.5],
            vec![1.0, 0.1],
            vec![0.9, 0.0],
            vec![1.0, 0.1],
        ];
        assert_eq!(select_best_state(rows.iter().map(Vec::as_slice)), 2);
        let ties: Vec<Vec<f64>> = vec![vec![0.25], vec![0.75]];
        assert_eq!(select_best_state(ties.iter().map(Vec::as_slice)), 0);
    }

    #[test]
    fn bce_examples() {
        let a = Interpretation::from_indices(2, [0]);
        let b = Interpretation::from_indices(2, [1]);
        let mut t = Tape::new();
        let exact = t.row(vec![1.0, 0.0]);
        let l = min_bce_loss(&mut t, exact, &[a.clone(), b.clone()]).unwrap();
        assert_eq!(t.scalar(l), 0.0);

        let half = t.row(vec![0.5, 0.5]);
        let l = min_bce_loss(&mut t, half, std::slice::from_ref(&a)).unwrap();
        assert!((t.scalar(l) - std::f64::consts::LN_2).abs() < 1e-15);

        let p = t.row(vec![0.7, 0.4]);
        let la = min_bce_loss(&mut t, p, std::slice::from_ref(&a)).unwrap();
        let lb = min_bce_loss(&mut t, p, std::slice::from_ref(&b)).unwrap();
        let both = min_bce_loss(&mut t, p, &[a, b]).unwrap();
        assert_eq!(t.scalar(both), t.scalar(la).min(t.scalar(lb)));

        assert_eq!(min_bce_loss(&mut t, p, &[]), Err(LossError::NoModels));
    }

    #[test]
    fn weight_file_round_trip_and_errors() {
        let w = init_weights(3, 2, TNormKind::Lukasiewicz, 1);
        let bytes = encode_weights(&w);
        assert_eq!(&bytes[..4], b"NDPW");
        assert_eq!(decode_weights(&bytes).unwrap(), w);
        assert!(matches!(
            decode_weights(&bytes[..10]),
            Err(WeightFileError::Corrupt(_))
        ));
        assert!(matches!(
            decode_weights(&bytes[..bytes.len() - 3]),
            Err(WeightFileError::Corrupt(_))
        ));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(
            decode_weights(&v2),
            Err(WeightFileError::VersionMismatch { found: 2, .. })
        ));
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(matches!(
            decode_weights(&magic),
            Err(WeightFileError::Corrupt(_))
        ));
    }

    #[test]
    fn header_dimensions_win() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.bin");
        let w = init_weights(32, 4, TNormKind::Godel, 9);
        save_weights(&w, &path).unwrap();
        let loaded = load_weights(&path).unwrap();
        assert_eq!((loaded.hidden, loaded.logical), (32, 4));
        assert_eq!(loaded, w);
    }
}
