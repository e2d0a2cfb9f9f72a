//! A small reverse-mode differentiation tape.
//!
//! Values are dense row-major matrices; a scalar is `1 x 1` and a degree
//! vector over `L` logical states is `L x n`. Binary elementwise ops accept a
//! scalar on either side. Forward values are computed eagerly when an op is
//! recorded, so control flow around the tape is ordinary Rust.
//!
//! Every piecewise choice (min/max branch, clamp, Łukasiewicz cut-off, an
//! external argmin) is folded into [`Tape::branch_signature`]. Two evaluations
//! with equal signatures went through the same smooth piece, which is what
//! [`grad_check`] uses to avoid comparing against differences across a kink.

use crate::{GroundProgram, TNormKind};

pub const SAFE_FLOOR: f64 = 1e-12;

/// Handle to a recorded value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn shape(self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(self) -> bool {
        self.rows == 1 && self.cols == 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ShapeError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Mismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
}

#[derive(Debug, Clone)]
enum Op<'p> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    DivSafe(usize, usize),
    Min(usize, usize),
    Max(usize, usize),
    TNorm(TNormKind, usize, usize),
    TConorm(TNormKind, usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Clamp01(usize),
    Sigmoid(usize),
    Tanh(usize),
    LnSafe(usize),
    Affine {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    ConcatCols(Vec<usize>),
    Reshape(usize),
    SelectRow(usize, usize),
    Sum(usize),
    Mean(usize),
    SoftConsequence {
        kind: TNormKind,
        program: &'p GroundProgram,
        tau: usize,
        phi: usize,
    },
}

#[derive(Debug, Clone)]
struct Node<'p> {
    op: Op<'p>,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
}

/// Append-only record of a computation; operands always precede consumers.
#[derive(Debug, Default)]
pub struct Tape<'p> {
    nodes: Vec<Node<'p>>,
    signature: u64,
    clamp_events: usize,
}

const SIG_MULT: u64 = 0x100_0000_01b3;

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            signature: 0xcbf2_9ce4_8422_2325,
            clamp_events: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of every piecewise branch taken so far.
    pub fn branch_signature(&self) -> u64 {
        self.signature
    }

    /// Number of entries floored by the safe `ln` and division ops.
    pub fn clamp_events(&self) -> usize {
        self.clamp_events
    }

    /// Folds an externally made discrete choice into the branch signature.
    pub fn note_branch(&mut self, choice: u64) {
        self.signature = (self.signature ^ choice).wrapping_mul(SIG_MULT);
    }

    fn branch(&mut self, taken: bool) {
        self.note_branch(taken as u64 + 1);
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.id].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        assert!(v.is_scalar(), "not a scalar");
        self.nodes[v.id].value[0]
    }

    fn push(&mut self, op: Op<'p>, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            rows,
            cols,
            value,
        });
        Var { id, rows, cols }
    }

    pub fn leaf(&mut self, value: Vec<f64>, rows: usize, cols: usize) -> Var {
        assert_eq!(
            value.len(),
            rows * cols,
            "leaf value does not match its shape"
        );
        self.push(Op::Leaf, rows, cols, value)
    }

    pub fn scalar_leaf(&mut self, x: f64) -> Var {
        self.leaf(vec![x], 1, 1)
    }

    pub fn row(&mut self, value: Vec<f64>) -> Var {
        let n = value.len();
        self.leaf(value, 1, n)
    }

    fn broadcast_shape(op: &'static str, a: Var, b: Var) -> Result<(usize, usize), ShapeError> {
        if a.shape() == b.shape() || b.is_scalar() {
            Ok(a.shape())
        } else if a.is_scalar() {
            Ok(b.shape())
        } else {
            Err(ShapeError::Mismatch {
                op,
                lhs: a.shape(),
                rhs: b.shape(),
            })
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        op: Op<'p>,
        mut f: impl FnMut(f64, f64, &mut Self) -> f64,
    ) -> Result<Var, ShapeError> {
        let (rows, cols) = Self::broadcast_shape(name, a, b)?;
        let len = rows * cols;
        let mut out = Vec::with_capacity(len);
        for k in 0..len {
            let x = self.nodes[a.id].value[if a.len() == 1 { 0 } else { k }];
            let y = self.nodes[b.id].value[if b.len() == 1 { 0 } else { k }];
            out.push(f(x, y, self));
        }
        Ok(self.push(op, rows, cols, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.binary("add", a, b, Op::Add(a.id, b.id), |x, y, _| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.binary("sub", a, b, Op::Sub(a.id, b.id), |x, y, _| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.binary("mul", a, b, Op::Mul(a.id, b.id), |x, y, _| x * y)
    }

    /// `a / max(b, 1e-12)`; the denominator must be non-negative.
    pub fn div_safe(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.binary("div_safe", a, b, Op::DivSafe(a.id, b.id), |x, y, t| {
            let clamped = y < SAFE_FLOOR;
            t.clamp_events += clamped as usize;
            t.branch(clamped);
            x / y.max(SAFE_FLOOR)
        })
    }

    /// Elementwise minimum; ties pick `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.binary("min", a, b, Op::Min(a.id, b.id), |x, y, t| {
            t.branch(x <= y);
            if x <= y {
                x
            } else {
                y
            }
        })
    }

    /// Elementwise maximum; ties pick `a`.
    pub fn max(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.binary("max", a, b, Op::Max(a.id, b.id), |x, y, t| {
            t.branch(x >= y);
            if x >= y {
                x
            } else {
                y
            }
        })
    }

    pub fn tnorm(&mut self, kind: TNormKind, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.binary("tnorm", a, b, Op::TNorm(kind, a.id, b.id), |x, y, t| {
            t.note_tnorm_branch(kind, x, y);
            kind.tnorm(x, y)
        })
    }

    pub fn tconorm(&mut self, kind: TNormKind, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.binary("tconorm", a, b, Op::TConorm(kind, a.id, b.id), |x, y, t| {
            t.note_tconorm_branch(kind, x, y);
            kind.tconorm(x, y)
        })
    }

    fn note_tnorm_branch(&mut self, kind: TNormKind, x: f64, y: f64) {
        match kind {
            TNormKind::Godel => self.branch(x <= y),
            TNormKind::Product => {}
            TNormKind::Lukasiewicz => self.branch(x + y - 1.0 > 0.0),
        }
    }

    fn note_tconorm_branch(&mut self, kind: TNormKind, x: f64, y: f64) {
        match kind {
            TNormKind::Godel => self.branch(x >= y),
            TNormKind::Product => {}
            TNormKind::Lukasiewicz => self.branch(x + y < 1.0),
        }
    }

    fn unary(&mut self, a: Var, op: Op<'p>, mut f: impl FnMut(f64, &mut Self) -> f64) -> Var {
        let mut out = Vec::with_capacity(a.len());
        for k in 0..a.len() {
            let x = self.nodes[a.id].value[k];
            out.push(f(x, self));
        }
        self.push(op, a.rows, a.cols, out)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a.id, c), |x, _| c * x)
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Offset(a.id), |x, _| x + c)
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.offset(neg, 1.0)
    }

    pub fn clamp01(&mut self, a: Var) -> Var {
        self.unary(a, Op::Clamp01(a.id), |x, t| {
            t.branch((0.0..=1.0).contains(&x));
            x.clamp(0.0, 1.0)
        })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a.id), |x, _| sigmoid(x))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a.id), |x, _| x.tanh())
    }

    /// `ln(max(a, 1e-12))`.
    pub fn ln_safe(&mut self, a: Var) -> Var {
        self.unary(a, Op::LnSafe(a.id), |x, t| {
            let clamped = x < SAFE_FLOOR;
            t.clamp_events += clamped as usize;
            t.branch(clamped);
            x.max(SAFE_FLOOR).ln()
        })
    }

    /// `x · w + b` with `x: m×k`, `w: k×h`, `b: 1×h` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, ShapeError> {
        if x.cols != w.rows {
            return Err(ShapeError::Mismatch {
                op: "affine",
                lhs: x.shape(),
                rhs: w.shape(),
            });
        }
        if let Some(b) = b {
            if b.shape() != (1, w.cols) {
                return Err(ShapeError::Mismatch {
                    op: "affine bias",
                    lhs: w.shape(),
                    rhs: b.shape(),
                });
            }
        }
        let (m, k, h) = (x.rows, x.cols, w.cols);
        let mut out = match b {
            Some(b) => {
                let bias = &self.nodes[b.id].value;
                let mut out = Vec::with_capacity(m * h);
                for _ in 0..m {
                    out.extend_from_slice(bias);
                }
                out
            }
            None => vec![0.0; m * h],
        };
        let xv = &self.nodes[x.id].value;
        let wv = &self.nodes[w.id].value;
        for i in 0..m {
            let orow = &mut out[i * h..(i + 1) * h];
            for kk in 0..k {
                let xik = xv[i * k + kk];
                if xik == 0.0 {
                    continue;
                }
                let wrow = &wv[kk * h..(kk + 1) * h];
                for (o, &wv) in orow.iter_mut().zip(wrow) {
                    *o += xik * wv;
                }
            }
        }
        Ok(self.push(
            Op::Affine {
                x: x.id,
                w: w.id,
                b: b.map(|b| b.id),
            },
            m,
            h,
            out,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, ShapeError> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if let Some(bad) = parts.iter().find(|p| p.rows != rows) {
            return Err(ShapeError::Mismatch {
                op: "concat_cols",
                lhs: parts[0].shape(),
                rhs: bad.shape(),
            });
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(&self.nodes[p.id].value[r * p.cols..(r + 1) * p.cols]);
            }
        }
        Ok(self.push(
            Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
            rows,
            cols,
            out,
        ))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var, ShapeError> {
        if rows * cols != a.len() {
            return Err(ShapeError::Mismatch {
                op: "reshape",
                lhs: a.shape(),
                rhs: (rows, cols),
            });
        }
        let value = self.nodes[a.id].value.clone();
        Ok(self.push(Op::Reshape(a.id), rows, cols, value))
    }

    pub fn select_row(&mut self, a: Var, row: usize) -> Var {
        assert!(row < a.rows, "row {row} out of range");
        let value = self.nodes[a.id].value[row * a.cols..(row + 1) * a.cols].to_vec();
        self.push(Op::SelectRow(a.id, row), 1, a.cols, value)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.id].value.iter().sum();
        self.push(Op::Sum(a.id), 1, 1, vec![s])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.id].value;
        let m = if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        };
        self.push(Op::Mean(a.id), 1, 1, vec![m])
    }

    /// One soft consequence sweep applied to every row of `tau`/`phi`
    /// (`L x n` each, one row per logical state).
    pub fn soft_consequence(
        &mut self,
        kind: TNormKind,
        program: &'p GroundProgram,
        tau: Var,
        phi: Var,
    ) -> Result<Var, ShapeError> {
        let n = program.num_atoms();
        if tau.shape() != phi.shape() || tau.cols != n {
            return Err(ShapeError::Mismatch {
                op: "soft_consequence",
                lhs: tau.shape(),
                rhs: phi.shape(),
            });
        }
        let rows = tau.rows;
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let t = &self.nodes[tau.id].value[r * n..(r + 1) * n];
            let f = &self.nodes[phi.id].value[r * n..(r + 1) * n];
            let mut sig = self.signature;
            for (i, o) in out[r * n..(r + 1) * n].iter_mut().enumerate() {
                *o = head_value(kind, program, i, t, f, &mut |taken| {
                    sig = (sig ^ (taken as u64 + 1)).wrapping_mul(SIG_MULT);
                });
            }
            self.signature = sig;
        }
        Ok(self.push(
            Op::SoftConsequence {
                kind,
                program,
                tau: tau.id,
                phi: phi.id,
            },
            rows,
            n,
            out,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert!(loss.is_scalar(), "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let val = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf => {}
            &Op::Add(a, b) => {
                accumulate_broadcast(grads, a, val(a).len(), g, |_, gk| gk);
                accumulate_broadcast(grads, b, val(b).len(), g, |_, gk| gk);
            }
            &Op::Sub(a, b) => {
                accumulate_broadcast(grads, a, val(a).len(), g, |_, gk| gk);
                accumulate_broadcast(grads, b, val(b).len(), g, |_, gk| -gk);
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                accumulate_broadcast(grads, a, av.len(), g, |k, gk| gk * pick(bv, k));
                accumulate_broadcast(grads, b, bv.len(), g, |k, gk| gk * pick(av, k));
            }
            &Op::DivSafe(a, b) => {
                let (av, bv) = (val(a), val(b));
                accumulate_broadcast(grads, a, av.len(), g, |k, gk| {
                    gk / pick(bv, k).max(SAFE_FLOOR)
                });
                accumulate_broadcast(grads, b, bv.len(), g, |k, gk| {
                    let y = pick(bv, k);
                    if y < SAFE_FLOOR {
                        0.0
                    } else {
                        -gk * pick(av, k) / (y * y)
                    }
                });
            }
            &Op::Min(a, b) | &Op::Max(a, b) => {
                let is_min = matches!(node.op, Op::Min(..));
                let (av, bv) = (val(a), val(b));
                let first = |k: usize| {
                    let (x, y) = (pick(av, k), pick(bv, k));
                    if is_min {
                        x <= y
                    } else {
                        x >= y
                    }
                };
                accumulate_broadcast(
                    grads,
                    a,
                    av.len(),
                    g,
                    |k, gk| if first(k) { gk } else { 0.0 },
                );
                accumulate_broadcast(
                    grads,
                    b,
                    bv.len(),
                    g,
                    |k, gk| if first(k) { 0.0 } else { gk },
                );
            }
            &Op::TNorm(kind, a, b) | &Op::TConorm(kind, a, b) => {
                let conorm = matches!(node.op, Op::TConorm(..));
                let (av, bv) = (val(a), val(b));
                let partial = |k: usize| {
                    let (x, y) = (pick(av, k), pick(bv, k));
                    if conorm {
                        kind.tconorm_grad(x, y)
                    } else {
                        kind.tnorm_grad(x, y)
                    }
                };
                accumulate_broadcast(grads, a, av.len(), g, |k, gk| gk * partial(k).0);
                accumulate_broadcast(grads, b, bv.len(), g, |k, gk| gk * partial(k).1);
            }
            &Op::Scale(a, c) => accumulate(grads, a, g.iter().map(|gk| c * gk)),
            &Op::Offset(a) | &Op::Reshape(a) => accumulate(grads, a, g.iter().copied()),
            &Op::Clamp01(a) => {
                let av = val(a);
                accumulate(
                    grads,
                    a,
                    g.iter()
                        .zip(av)
                        .map(|(gk, x)| if (0.0..=1.0).contains(x) { *gk } else { 0.0 }),
                );
            }
            &Op::Sigmoid(a) => {
                accumulate(
                    grads,
                    a,
                    g.iter().zip(&node.value).map(|(gk, s)| gk * s * (1.0 - s)),
                );
            }
            &Op::Tanh(a) => {
                accumulate(
                    grads,
                    a,
                    g.iter().zip(&node.value).map(|(gk, t)| gk * (1.0 - t * t)),
                );
            }
            &Op::LnSafe(a) => {
                let av = val(a);
                accumulate(
                    grads,
                    a,
                    g.iter()
                        .zip(av)
                        .map(|(gk, x)| if *x < SAFE_FLOOR { 0.0 } else { gk / x }),
                );
            }
            &Op::Affine { x, w, b } => {
                let (xn, wn) = (&self.nodes[x], &self.nodes[w]);
                let (m, k, h) = (xn.rows, xn.cols, wn.cols);
                let (xv, wv) = (&xn.value, &wn.value);
                // dX = G · Wᵀ
                let mut dx = vec![0.0; m * k];
                for i in 0..m {
                    let grow = &g[i * h..(i + 1) * h];
                    for kk in 0..k {
                        let wrow = &wv[kk * h..(kk + 1) * h];
                        dx[i * k + kk] = grow.iter().zip(wrow).map(|(a, b)| a * b).sum();
                    }
                }
                // dW = Xᵀ · G
                let mut dw = vec![0.0; k * h];
                for i in 0..m {
                    let grow = &g[i * h..(i + 1) * h];
                    for kk in 0..k {
                        let xik = xv[i * k + kk];
                        if xik == 0.0 {
                            continue;
                        }
                        for (d, gv) in dw[kk * h..(kk + 1) * h].iter_mut().zip(grow) {
                            *d += xik * gv;
                        }
                    }
                }
                accumulate(grads, x, dx.into_iter());
                accumulate(grads, w, dw.into_iter());
                if let Some(b) = b {
                    let mut db = vec![0.0; h];
                    for i in 0..m {
                        for (d, gv) in db.iter_mut().zip(&g[i * h..(i + 1) * h]) {
                            *d += gv;
                        }
                    }
                    accumulate(grads, b, db.into_iter());
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.rows;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.nodes[p].cols;
                    let mut dp = Vec::with_capacity(rows * pc);
                    for r in 0..rows {
                        let start = r * node.cols + offset;
                        dp.extend_from_slice(&g[start..start + pc]);
                    }
                    accumulate(grads, p, dp.into_iter());
                    offset += pc;
                }
            }
            &Op::SelectRow(a, row) => {
                let an = &self.nodes[a];
                let mut da = vec![0.0; an.value.len()];
                da[row * an.cols..(row + 1) * an.cols].copy_from_slice(g);
                accumulate(grads, a, da.into_iter());
            }
            &Op::Sum(a) => accumulate(grads, a, std::iter::repeat_n(g[0], val(a).len())),
            &Op::Mean(a) => {
                let len = val(a).len();
                let gk = if len == 0 { 0.0 } else { g[0] / len as f64 };
                accumulate(grads, a, std::iter::repeat_n(gk, len));
            }
            &Op::SoftConsequence {
                kind,
                program,
                tau,
                phi,
            } => {
                let n = program.num_atoms();
                let rows = node.rows;
                let (tv, fv) = (val(tau), val(phi));
                let mut dtau = vec![0.0; rows * n];
                let mut dphi = vec![0.0; rows * n];
                for r in 0..rows {
                    let span = r * n..(r + 1) * n;
                    head_backward(
                        kind,
                        program,
                        &tv[span.clone()],
                        &fv[span.clone()],
                        &g[span.clone()],
                        &mut dtau[span.clone()],
                        &mut dphi[span],
                    );
                }
                accumulate(grads, tau, dtau.into_iter());
                accumulate(grads, phi, dphi.into_iter());
            }
        }
    }
}

#[inline]
fn pick(v: &[f64], k: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[k]
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, g: impl Iterator<Item = f64>) {
    match &mut grads[id] {
        Some(acc) => {
            for (a, x) in acc.iter_mut().zip(g) {
                *a += x;
            }
        }
        slot @ None => *slot = Some(g.collect()),
    }
}

/// Accumulates into an operand that may have been broadcast from a scalar.
fn accumulate_broadcast(
    grads: &mut [Option<Vec<f64>>],
    id: usize,
    operand_len: usize,
    g: &[f64],
    f: impl Fn(usize, f64) -> f64,
) {
    if operand_len == 1 && g.len() != 1 {
        let s: f64 = g.iter().enumerate().map(|(k, &gk)| f(k, gk)).sum();
        accumulate(grads, id, std::iter::once(s));
    } else {
        accumulate(grads, id, g.iter().enumerate().map(|(k, &gk)| f(k, gk)));
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Folds a non-empty sequence left to right starting from its first element;
/// an empty sequence yields `unit`.
fn fold_first(
    values: impl Iterator<Item = f64>,
    unit: f64,
    mut op: impl FnMut(f64, f64) -> f64,
) -> f64 {
    let mut it = values;
    match it.next() {
        None => unit,
        Some(first) => it.fold(first, &mut op),
    }
}

fn literals<'a>(
    r: &'a crate::Rule,
    tau: &'a [f64],
    phi: &'a [f64],
) -> impl Iterator<Item = f64> + 'a {
    r.pos
        .iter()
        .map(|&a| tau[a])
        .chain(r.neg.iter().map(|&a| phi[a]))
}

fn head_value(
    kind: TNormKind,
    program: &GroundProgram,
    head: usize,
    tau: &[f64],
    phi: &[f64],
    note: &mut impl FnMut(bool),
) -> f64 {
    let supports = program.rules_with_head(head).iter().map(|&j| {
        fold_first(literals(&program.rules()[j], tau, phi), 1.0, |x, y| {
            match kind {
                TNormKind::Godel => note(x <= y),
                TNormKind::Lukasiewicz => note(x + y - 1.0 > 0.0),
                TNormKind::Product => {}
            }
            kind.tnorm(x, y)
        })
    });
    let supports: Vec<f64> = supports.collect();
    fold_first(supports.into_iter(), 0.0, |x, y| {
        match kind {
            TNormKind::Godel => note(x >= y),
            TNormKind::Lukasiewicz => note(x + y < 1.0),
            TNormKind::Product => {}
        }
        kind.tconorm(x, y)
    })
}

/// Partial derivatives of a left fold `acc_k = op(acc_{k-1}, x_k)` seeded
/// with `x_0`, scaled by `g`.
fn fold_backward(
    values: &[f64],
    g: f64,
    grad: impl Fn(f64, f64) -> (f64, f64),
    op: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    let mut out = vec![0.0; values.len()];
    if values.is_empty() {
        return out;
    }
    let mut accs = Vec::with_capacity(values.len());
    let mut acc = values[0];
    accs.push(acc);
    for &x in &values[1..] {
        acc = op(acc, x);
        accs.push(acc);
    }
    let mut carry = g;
    for k in (1..values.len()).rev() {
        let (da, db) = grad(accs[k - 1], values[k]);
        out[k] = carry * db;
        carry *= da;
    }
    out[0] = carry;
    out
}

fn head_backward(
    kind: TNormKind,
    program: &GroundProgram,
    tau: &[f64],
    phi: &[f64],
    g: &[f64],
    dtau: &mut [f64],
    dphi: &mut [f64],
) {
    for (head, &gh) in g.iter().enumerate() {
        if gh == 0.0 {
            continue;
        }
        let ids = program.rules_with_head(head);
        if ids.is_empty() {
            continue;
        }
        let bodies: Vec<Vec<f64>> = ids
            .iter()
            .map(|&j| literals(&program.rules()[j], tau, phi).collect())
            .collect();
        let supports: Vec<f64> = bodies
            .iter()
            .map(|b| fold_first(b.iter().copied(), 1.0, |x, y| kind.tnorm(x, y)))
            .collect();
        let dsupport = fold_backward(
            &supports,
            gh,
            |x, y| kind.tconorm_grad(x, y),
            |x, y| kind.tconorm(x, y),
        );
        for ((&j, body), ds) in ids.iter().zip(&bodies).zip(dsupport) {
            if ds == 0.0 {
                continue;
            }
            let r = &program.rules()[j];
            let dlits = fold_backward(
                body,
                ds,
                |x, y| kind.tnorm_grad(x, y),
                |x, y| kind.tnorm(x, y),
            );
            for (&a, d) in r.pos.iter().zip(&dlits) {
                dtau[a] += d;
            }
            for (&a, d) in r.neg.iter().zip(&dlits[r.pos.len()..]) {
                dphi[a] += d;
            }
        }
    }
}

/// Gradients of a scalar loss with respect to every recorded value.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.id).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zeros if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Vec<f64> {
        self.get(v)
            .map_or_else(|| vec![0.0; v.len()], <[f64]>::to_vec)
    }
}

/// A shaped input of a function checked by [`grad_check`].
#[derive(Debug, Clone)]
pub struct Input {
    pub value: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl Input {
    pub fn new(value: Vec<f64>, rows: usize, cols: usize) -> Self {
        assert_eq!(value.len(), rows * cols);
        Input { value, rows, cols }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a kink and were not compared.
    pub skipped: usize,
}

/// Compares the tape gradient of `f` at `point` against central differences
/// with step `h`. Relative error uses `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<'p, F>(f: F, point: &[Input], h: f64) -> GradCheckReport
where
    F: Fn(&mut Tape<'p>, &[Var]) -> Var,
{
    assert!(h > 0.0);
    let eval = |inputs: &[Input]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|i| tape.leaf(i.value.clone(), i.rows, i.cols))
            .collect();
        let out = f(&mut tape, &vars);
        (tape.scalar(out), tape.branch_signature())
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = point
        .iter()
        .map(|i| tape.leaf(i.value.clone(), i.rows, i.cols))
        .collect();
    let out = f(&mut tape, &vars);
    let base_sig = tape.branch_signature();
    let grads = tape.backward(out);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut probe = point.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for k in 0..point[which].value.len() {
            let x = point[which].value[k];
            probe[which].value[k] = x + h;
            let (up, sig_up) = eval(&probe);
            probe[which].value[k] = x - h;
            let (down, sig_down) = eval(&probe);
            probe[which].value[k] = x;
            if sig_up != base_sig || sig_down != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.max_rel_error = report.max_rel_error.max(rel);
            report.checked += 1;
        }
    }
    report
}
