//! Passive beamforming by successive convex approximation (SCA) over the
//! lifted coefficient matrices `Q_κ = q_κ q_κᴴ`.
//!
//! With `C_j = (V_j w_j)(V_j w_j)ᴴ` the signal power of user `j` is
//! `⟨C_j, Q_κ(j)⟩` and its rate is `log2(1 + 1/(A_j B_j))` for slacks
//! `A_j ≥ 1/⟨C̃_j, Q⟩` and `B_j ≥ ⟨D̃_j, Q⟩ + 1`, where tildes denote
//! division by the noise power and `D̃_j` sums the interfering couplings.
//! Each SCA step linearizes the (convex) rate bound in `(A, B)` and the
//! concave part of the rank-one penalty `Tr Q − ‖Q‖₂`, leaving a problem for
//! [`crate::cone::solve_cone`]. An outer loop grows the penalty until every
//! block is numerically rank one; the phases are then read off the principal
//! eigenvector.
//!
//! The same machinery serves every protocol through [`LiftedProblem`]:
//! energy splitting couples two full blocks by `diag Q_t + diag Q_r = 1`,
//! mode switching adds the binary penalty `β − β²`, time switching solves a
//! unit-diagonal block per side, and the element-split baseline uses
//! unit-diagonal blocks on disjoint element subsets.

use std::f64::consts::LN_2;
use std::fmt::Write as _;

use crate::channel::{CascadeBundle, Scenario, Side};
use crate::cone::{solve_cone, AffineForm, ConePoint, ConeProblem, FormMatrix, SolverOptions};
use crate::config::AlgorithmConfig;
use crate::linalg::{hermitian_eigen, hermitian_part, outer, psd_factor, rank_one_residual, re_trace_product, trace_re};
use crate::rates::{self, BeamformingState, PassiveCoefficients, Protocol};
use crate::{CMatrix, CVector, Error, Result, C64};

/// Pairwise couplings `C_j^k = (V_j w_k)(V_j w_k)ᴴ`; `C_j = C_j^j`.
#[derive(Debug, Clone)]
pub struct Coupling {
    terms: Vec<Vec<CMatrix>>,
}

impl Coupling {
    pub fn num_users(&self) -> usize {
        self.terms.len()
    }

    /// `C_j`.
    pub fn signal(&self, j: usize) -> &CMatrix {
        &self.terms[j][j]
    }

    /// `C_j^k`: power of user `k`'s stream arriving at user `j`.
    pub fn cross(&self, j: usize, k: usize) -> &CMatrix {
        &self.terms[j][k]
    }
}

pub fn build_coupling(bundle: &CascadeBundle, w: &CMatrix) -> Coupling {
    let terms = bundle
        .v
        .iter()
        .map(|v| {
            (0..w.ncols())
                .map(|k| {
                    let a: CVector = v * w.column(k);
                    outer(&a, &a)
                })
                .collect()
        })
        .collect();
    Coupling { terms }
}

/// First-order expansion of `log2(1 + 1/(A B))` at `(A^i, B^i)`; a global
/// under-estimator because the function is jointly convex on the positive
/// orthant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaylorBound {
    pub anchor_a: f64,
    pub anchor_b: f64,
    /// `log2(1 + 1/(A^i B^i))`.
    pub value: f64,
    /// `∂/∂A` at the anchor (negative).
    pub slope_a: f64,
    /// `∂/∂B` at the anchor (negative).
    pub slope_b: f64,
}

impl TaylorBound {
    pub fn eval(&self, a: f64, b: f64) -> f64 {
        self.value + self.slope_a * (a - self.anchor_a) + self.slope_b * (b - self.anchor_b)
    }
}

pub fn taylor_rate_constraint(anchor_a: f64, anchor_b: f64) -> Result<TaylorBound> {
    if !(anchor_a > 0.0 && anchor_b > 0.0 && anchor_a.is_finite() && anchor_b.is_finite()) {
        return Err(Error::invalid(
            "taylor_anchor",
            format!("anchors must be positive and finite, got ({anchor_a}, {anchor_b})"),
        ));
    }
    let ab = anchor_a * anchor_b;
    Ok(TaylorBound {
        anchor_a,
        anchor_b,
        value: (1.0 + 1.0 / ab).log2(),
        slope_a: -1.0 / (LN_2 * anchor_a * (1.0 + ab)),
        slope_b: -1.0 / (LN_2 * anchor_b * (1.0 + ab)),
    })
}

/// Linear majorant of `Tr Q − ‖Q‖₂` built at `anchor`:
/// `Tr Q − ‖Q^i‖₂ − x̄ᴴ (Q − Q^i) x̄` with `x̄` the principal unit eigenvector
/// of `Q^i`.
pub fn rank_one_surrogate(q: &CMatrix, anchor: &CMatrix) -> f64 {
    let (values, vectors) = hermitian_eigen(anchor);
    let x = vectors.column(0);
    let diff = q - anchor;
    let quad = x.dotc(&(&diff * x)).re;
    trace_re(q) - values[0] - quad
}

/// How the diagonals of the blocks are tied to the amplitudes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiagonalRule {
    /// Two blocks over the same elements with `diag Q_0 + diag Q_1 = 1`.
    SumToOne,
    /// Every block has a unit diagonal.
    Unit,
}

/// A lifted coefficient block: the elements it covers and the side it feeds.
#[derive(Debug, Clone)]
pub struct SurfaceBlock {
    pub side: Side,
    pub elements: Vec<usize>,
}

/// One user's rate term, already restricted to its block and divided by the
/// noise power.
#[derive(Debug, Clone)]
pub struct UserTerm {
    pub weight: f64,
    pub block: usize,
    pub signal: CMatrix,
    pub interference: CMatrix,
}

#[derive(Debug, Clone)]
pub struct LiftedProblem {
    pub blocks: Vec<SurfaceBlock>,
    pub users: Vec<UserTerm>,
    pub rule: DiagonalRule,
    /// Penalize fractional amplitudes (mode switching).
    pub binary: bool,
}

/// Iterate of the relaxed problem: the blocks plus the rate slacks of the
/// users that carry signal.
#[derive(Debug, Clone)]
pub struct LiftedCoefficients {
    pub blocks: Vec<CMatrix>,
    pub slack_a: Vec<f64>,
    pub slack_b: Vec<f64>,
}

impl LiftedCoefficients {
    pub fn rank_residuals(&self) -> Vec<f64> {
        self.blocks.iter().map(rank_one_residual).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PassiveTraceRow {
    pub outer: usize,
    pub inner: usize,
    /// Weighted sum rate of the lifted iterate.
    pub wsr: f64,
    pub rank_residual_t: f64,
    pub rank_residual_r: f64,
    pub eta2: f64,
}

pub fn trace_csv(rows: &[PassiveTraceRow]) -> String {
    let mut out = String::from("outer,inner,wsr,rank_residual_t,rank_residual_r,eta2\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.outer, r.inner, r.wsr, r.rank_residual_t, r.rank_residual_r, r.eta2
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct ScaOutcome {
    /// Extracted coefficient vector per block, indexed like the block's
    /// element list.
    pub q: Vec<CVector>,
    pub lifted: LiftedCoefficients,
    /// Lifted weighted sum rate of the final relaxed iterate.
    pub lifted_wsr: f64,
    /// Largest rank-one residual of the final relaxed iterate.
    pub rank_residual: f64,
    /// Largest `β(1 − β)` of the final relaxed iterate (mode switching).
    pub binary_residual: f64,
    pub converged: bool,
    pub outer_rounds: usize,
    pub subproblems: usize,
    pub trace: Vec<PassiveTraceRow>,
}

const SLACK_START_FRACTION: f64 = 0.1;
/// Linearized rate weight below which a user is left out of a subproblem.
const NEGLIGIBLE_PULL: f64 = 1e-12;

/// Convex subproblem around an anchor, a strictly feasible start and the
/// Taylor anchors `(A^i, B^i)` of the users that carry signal, in order.
struct Subproblem {
    problem: ConeProblem,
    start: ConePoint,
    anchors: Vec<(f64, f64)>,
}

impl LiftedProblem {
    fn block_size(&self, b: usize) -> usize {
        self.blocks[b].elements.len()
    }

    fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Dimension("lifted problem without blocks".into()));
        }
        if self.rule == DiagonalRule::SumToOne
            && (self.blocks.len() != 2 || self.blocks[0].elements != self.blocks[1].elements)
        {
            return Err(Error::Dimension("sum-to-one rule needs two blocks over the same elements".into()));
        }
        for u in &self.users {
            let n = self
                .blocks
                .get(u.block)
                .ok_or_else(|| Error::Dimension(format!("user references block {}", u.block)))?
                .elements
                .len();
            if u.signal.shape() != (n, n) || u.interference.shape() != (n, n) {
                return Err(Error::Dimension("user coupling does not match its block".into()));
            }
        }
        Ok(())
    }

    fn user_rate(&self, u: &UserTerm, q: &[CMatrix]) -> f64 {
        let s = re_trace_product(&u.signal, &q[u.block]).max(0.0);
        let i = re_trace_product(&u.interference, &q[u.block]).max(0.0);
        (1.0 + s / (1.0 + i)).log2()
    }

    /// `Σ_j ω_j log2(1 + ⟨C̃_j, Q⟩ / (1 + ⟨D̃_j, Q⟩))`.
    pub fn lifted_wsr(&self, q: &[CMatrix]) -> f64 {
        self.users.iter().map(|u| u.weight * self.user_rate(u, q)).sum()
    }

    fn amplitude(&self, q: &[CMatrix], b: usize, n: usize) -> f64 {
        q[b][(n, n)].re.clamp(0.0, 1.0)
    }

    fn binary_residual(&self, q: &[CMatrix]) -> f64 {
        if !self.binary {
            return 0.0;
        }
        let mut worst: f64 = 0.0;
        for b in 0..self.blocks.len() {
            for n in 0..self.block_size(b) {
                let beta = self.amplitude(q, b, n);
                worst = worst.max(beta * (1.0 - beta));
            }
        }
        worst
    }

    /// Lifted WSR minus the rank-one and binary penalties: the quantity every
    /// SCA step cannot decrease.
    pub fn penalized_objective(&self, q: &[CMatrix], eta2: f64, eta3: f64) -> f64 {
        let mut v = self.lifted_wsr(q);
        v -= eta2 * q.iter().map(rank_one_residual).sum::<f64>();
        if self.binary {
            for b in 0..self.blocks.len() {
                for n in 0..self.block_size(b) {
                    let beta = self.amplitude(q, b, n);
                    v -= eta3 * (beta - beta * beta);
                }
            }
        }
        v
    }

    /// Congruence `Q_b ← S Q_b S` with diagonal `S` that makes the diagonal
    /// rule hold exactly. Keeps every block Hermitian PSD of the same rank;
    /// removes the equality residual the barrier leaves behind when a block
    /// nears a singular face.
    fn restore_diagonal(&self, q: &mut [CMatrix]) {
        let n = self.block_size(0);
        let scales: Vec<Vec<f64>> = match self.rule {
            DiagonalRule::SumToOne => {
                let s: Vec<f64> = (0..n)
                    .map(|k| {
                        let total = q[0][(k, k)].re.max(0.0) + q[1][(k, k)].re.max(0.0);
                        if total > 0.0 { total.sqrt().recip() } else { 1.0 }
                    })
                    .collect();
                vec![s.clone(), s]
            }
            DiagonalRule::Unit => q
                .iter()
                .map(|m| {
                    (0..m.nrows())
                        .map(|k| if m[(k, k)].re > 0.0 { m[(k, k)].re.sqrt().recip() } else { 1.0 })
                        .collect()
                })
                .collect(),
        };
        for (m, s) in q.iter_mut().zip(&scales) {
            for r in 0..m.nrows() {
                for c in 0..m.ncols() {
                    m[(r, c)] *= s[r] * s[c];
                }
            }
        }
    }

    fn diagonal_target(&self) -> f64 {
        match self.rule {
            DiagonalRule::SumToOne => 0.5,
            DiagonalRule::Unit => 1.0,
        }
    }

    /// Builds the convex subproblem around `anchor` together with a strictly
    /// feasible start. Users without signal are left out.
    fn subproblem(&self, anchor: &[CMatrix], eta2: f64, eta3: f64) -> Result<Subproblem> {
        let mut active = Vec::new();
        for (j, u) in self.users.iter().enumerate() {
            if trace_re(&u.signal) <= 0.0 || u.weight <= 0.0 {
                continue;
            }
            let signal = re_trace_product(&u.signal, &anchor[u.block]).max(1e-12 * trace_re(&u.signal));
            let interference = re_trace_product(&u.interference, &anchor[u.block]).max(0.0);
            // A beam starved to subnormal power carries no rate to linearize.
            if !(1.0 / signal).is_finite() {
                continue;
            }
            let bound = taylor_rate_constraint(1.0 / signal, 1.0 + interference)?;
            // A user whose linearized rate has no weight only constrains its own
            // slacks, which the barrier would then push towards infinity.
            let pull = u.weight * (bound.slope_a * bound.anchor_a).abs().max((bound.slope_b * bound.anchor_b).abs());
            if pull > NEGLIGIBLE_PULL {
                active.push((j, bound));
            }
        }
        let sizes: Vec<usize> = (0..self.blocks.len()).map(|b| self.block_size(b)).collect();
        let mut p = ConeProblem::new(sizes.clone(), 2 * active.len());

        for (b, &n) in sizes.iter().enumerate() {
            let (values, vectors) = hermitian_eigen(&anchor[b]);
            let _ = values;
            let x: CVector = vectors.column(0).into_owned();
            let mut c = (CMatrix::identity(n, n) - outer(&x, &x)).scale(eta2);
            if self.binary {
                for k in 0..n {
                    let beta = self.amplitude(anchor, b, k);
                    c[(k, k)] += C64::new(eta3 * (1.0 - 2.0 * beta), 0.0);
                }
            }
            p.objective_blocks[b] = hermitian_part(&c);
        }

        match self.rule {
            DiagonalRule::SumToOne => {
                for k in 0..sizes[0] {
                    p.equalities.push(AffineForm {
                        blocks: vec![(0, FormMatrix::Unit(k)), (1, FormMatrix::Unit(k))],
                        scalars: vec![],
                        constant: -1.0,
                    });
                }
            }
            DiagonalRule::Unit => {
                for (b, &n) in sizes.iter().enumerate() {
                    for k in 0..n {
                        p.equalities.push(AffineForm {
                            blocks: vec![(b, FormMatrix::Unit(k))],
                            scalars: vec![],
                            constant: -1.0,
                        });
                    }
                }
            }
        }

        let target = self.diagonal_target();
        let start_blocks: Vec<CMatrix> = anchor
            .iter()
            .zip(&sizes)
            .map(|(q, &n)| {
                q.scale(1.0 - SLACK_START_FRACTION)
                    + CMatrix::identity(n, n).scale(SLACK_START_FRACTION * target)
            })
            .collect();
        let mut start_scalars = Vec::with_capacity(2 * active.len());

        // Slacks are carried relative to their anchors, `A = A^i·a` and
        // `B = B^i·b`, so every scalar and form is of order one.
        let mut anchors = Vec::with_capacity(active.len());
        for (a, (j, bound)) in active.into_iter().enumerate() {
            let u = &self.users[j];
            let (ia, ib) = (2 * a, 2 * a + 1);
            anchors.push((bound.anchor_a, bound.anchor_b));
            p.objective_scalars[ia] = -u.weight * bound.slope_a * bound.anchor_a;
            p.objective_scalars[ib] = -u.weight * bound.slope_b * bound.anchor_b;
            // a · ⟨C̃_j A^i, Q⟩ ≥ 1
            let signal_form = u.signal.scale(bound.anchor_a);
            p.hyperbolic.push((
                AffineForm::scalar(ia),
                AffineForm {
                    blocks: vec![(u.block, FormMatrix::Factor(psd_factor(&signal_form)))],
                    scalars: vec![],
                    constant: 0.0,
                },
            ));
            // (⟨D̃_j, Q⟩ + 1) / B^i − b ≤ 0
            let interference_form = u.interference.unscale(bound.anchor_b);
            p.inequalities.push(AffineForm {
                blocks: vec![(u.block, FormMatrix::Factor(psd_factor(&interference_form)))],
                scalars: vec![(ib, -1.0)],
                constant: 1.0 / bound.anchor_b,
            });
            let s0 = re_trace_product(&signal_form, &start_blocks[u.block]);
            let i0 = re_trace_product(&interference_form, &start_blocks[u.block]).max(0.0);
            start_scalars.push(2.0 / s0);
            start_scalars.push(2.0 * (1.0 / bound.anchor_b + i0));
        }
        let start = ConePoint {
            blocks: start_blocks,
            scalars: start_scalars,
        };
        Ok(Subproblem {
            problem: p,
            start,
            anchors,
        })
    }

    fn extract(&self, q: &[CMatrix]) -> Vec<CVector> {
        let phases: Vec<Vec<C64>> = q
            .iter()
            .map(|m| {
                let (_, vectors) = hermitian_eigen(m);
                vectors
                    .column(0)
                    .iter()
                    .map(|z| if z.norm() > 0.0 { z / z.norm() } else { C64::new(1.0, 0.0) })
                    .collect()
            })
            .collect();
        match self.rule {
            DiagonalRule::Unit => phases.into_iter().map(CVector::from_vec).collect(),
            DiagonalRule::SumToOne => {
                let n = self.block_size(0);
                let mut beta0 = vec![0.0; n];
                for k in 0..n {
                    let (a, b) = (self.amplitude(q, 0, k), self.amplitude(q, 1, k));
                    beta0[k] = if a + b > 0.0 { a / (a + b) } else { 0.5 };
                    if self.binary {
                        beta0[k] = if beta0[k] >= 0.5 { 1.0 } else { 0.0 };
                    }
                }
                let make = |blk: usize| {
                    CVector::from_iterator(
                        n,
                        (0..n).map(|k| {
                            let beta = if blk == 0 { beta0[k] } else { 1.0 - beta0[k] };
                            phases[blk][k] * beta.sqrt()
                        }),
                    )
                };
                vec![make(0), make(1)]
            }
        }
    }

    /// Convex problem of one SCA step around `anchor` with the rank-one and
    /// binary penalties dropped, together with a strictly feasible start.
    pub fn relaxed_subproblem(&self, anchor: &[CMatrix]) -> Result<(ConeProblem, ConePoint)> {
        self.validate()?;
        let sub = self.subproblem(anchor, 0.0, 0.0)?;
        Ok((sub.problem, sub.start))
    }

    /// Runs the penalized SCA from the rank-one point `init` (one vector per
    /// block, feasible for the diagonal rule).
    pub fn solve(&self, init: &[CVector], alg: &AlgorithmConfig) -> Result<ScaOutcome> {
        self.validate()?;
        if init.len() != self.blocks.len() || init.iter().zip(0..).any(|(q, b)| q.len() != self.block_size(b)) {
            return Err(Error::Dimension("initial coefficients do not match the blocks".into()));
        }
        let opts = SolverOptions {
            tol: alg.solver_tol,
            ..SolverOptions::default()
        };
        let mut anchor: Vec<CMatrix> = init.iter().map(|q| outer(q, q)).collect();
        let mut slacks = (Vec::new(), Vec::new());
        let mut eta2 = alg.sca_penalty;
        let mut eta3 = alg.ms_penalty;
        let mut trace = Vec::new();
        let mut converged = false;
        let mut outer_rounds = 0;
        let mut subproblems = 0;
        let residual_pair = |q: &[CMatrix]| -> (f64, f64) {
            let r: Vec<f64> = q.iter().map(rank_one_residual).collect();
            match (self.blocks.len(), self.blocks[0].side) {
                (1, Side::Transmission) => (r[0], 0.0),
                (1, Side::Reflection) => (0.0, r[0]),
                _ => (r[0], r[1..].iter().copied().fold(0.0, f64::max)),
            }
        };

        for outer_idx in 0..alg.max_outer_rounds {
            outer_rounds = outer_idx + 1;
            let mut current = self.penalized_objective(&anchor, eta2, eta3);
            let mut solver_failed = false;
            for inner_idx in 0..alg.max_inner {
                let sub = self.subproblem(&anchor, eta2, eta3)?;
                // Large penalties can exhaust the barrier's precision; the
                // anchor is then the best point this round can certify.
                let sol = match solve_cone(&sub.problem, &sub.start, &opts) {
                    Ok(sol) => sol,
                    Err(Error::Numerical(_)) => {
                        solver_failed = true;
                        break;
                    }
                    Err(e) => return Err(e),
                };
                subproblems += 1;
                let mut next: Vec<CMatrix> = sol.point.blocks.iter().map(hermitian_part).collect();
                self.restore_diagonal(&mut next);
                let value = self.penalized_objective(&next, eta2, eta3);
                let (rt, rr) = residual_pair(&next);
                trace.push(PassiveTraceRow {
                    outer: outer_idx,
                    inner: inner_idx,
                    wsr: self.lifted_wsr(&next),
                    rank_residual_t: rt,
                    rank_residual_r: rr,
                    eta2,
                });
                let gain = value - current;
                // A step may only lose what the solver tolerance allows.
                if gain < -10.0 * alg.solver_tol * (1.0 + current.abs()) {
                    break;
                }
                anchor = next;
                slacks = (
                    sub.anchors.iter().enumerate().map(|(a, (sa, _))| sa * sol.point.scalars[2 * a]).collect(),
                    sub.anchors.iter().enumerate().map(|(a, (_, sb))| sb * sol.point.scalars[2 * a + 1]).collect(),
                );
                current = value;
                if gain < alg.ao_tol {
                    break;
                }
            }
            let rank = anchor.iter().map(rank_one_residual).fold(0.0, f64::max);
            let binary = self.binary_residual(&anchor);
            if rank < alg.rank_tol && binary < alg.rank_tol {
                converged = true;
                break;
            }
            if solver_failed {
                break;
            }
            if rank >= alg.rank_tol {
                eta2 *= alg.penalty_growth;
            }
            if binary >= alg.rank_tol {
                eta3 *= alg.penalty_growth;
            }
        }

        let q = self.extract(&anchor);
        Ok(ScaOutcome {
            q,
            lifted_wsr: self.lifted_wsr(&anchor),
            rank_residual: anchor.iter().map(rank_one_residual).fold(0.0, f64::max),
            binary_residual: self.binary_residual(&anchor),
            lifted: LiftedCoefficients {
                blocks: anchor,
                slack_a: slacks.0,
                slack_b: slacks.1,
            },
            converged,
            outer_rounds,
            subproblems,
            trace,
        })
    }
}

fn restrict(m: &CMatrix, elements: &[usize]) -> CMatrix {
    CMatrix::from_fn(elements.len(), elements.len(), |a, b| m[(elements[a], elements[b])])
}

fn user_term(
    coupling: &Coupling,
    j: usize,
    weight: f64,
    block: usize,
    elements: &[usize],
    interferers: impl Iterator<Item = usize>,
    noise: f64,
) -> UserTerm {
    let n = elements.len();
    let mut interference = CMatrix::zeros(n, n);
    for k in interferers {
        interference += restrict(coupling.cross(j, k), elements);
    }
    UserTerm {
        weight,
        block,
        signal: restrict(coupling.signal(j), elements).unscale(noise),
        interference: interference.unscale(noise),
    }
}

/// Energy splitting (`binary = false`) or mode switching (`binary = true`):
/// block 0 feeds the transmission side, block 1 the reflection side, and every
/// other user interferes.
pub fn split_problem(scenario: &Scenario, coupling: &Coupling, binary: bool) -> LiftedProblem {
    let n = scenario.cfg.num_elements;
    let all: Vec<usize> = (0..n).collect();
    let noise = scenario.cfg.noise_power;
    let users = (0..scenario.num_users())
        .map(|j| {
            let others = (0..scenario.num_users()).filter(move |&k| k != j);
            user_term(coupling, j, scenario.weights[j], scenario.side(j).index(), &all, others, noise)
        })
        .collect();
    LiftedProblem {
        blocks: Side::BOTH
            .iter()
            .map(|&side| SurfaceBlock {
                side,
                elements: all.clone(),
            })
            .collect(),
        users,
        rule: DiagonalRule::SumToOne,
        binary,
    }
}

/// Time switching, one side: unit-modulus block over all elements with
/// same-side interference only.
pub fn time_switching_problem(scenario: &Scenario, coupling: &Coupling, side: Side) -> LiftedProblem {
    let all: Vec<usize> = (0..scenario.cfg.num_elements).collect();
    let members = scenario.users_on(side);
    let noise = scenario.cfg.noise_power;
    let users = members
        .iter()
        .map(|&j| {
            let others = members.iter().copied().filter(move |&k| k != j);
            user_term(coupling, j, scenario.weights[j], 0, &all, others, noise)
        })
        .collect();
    LiftedProblem {
        blocks: vec![SurfaceBlock { side, elements: all }],
        users,
        rule: DiagonalRule::Unit,
        binary: false,
    }
}

/// Element split of the baseline with a transmitting and a reflecting
/// sub-surface: the first half of the elements transmits, the second half
/// reflects, both at full amplitude.
pub fn element_split(num_elements: usize) -> Result<[Vec<usize>; 2]> {
    if num_elements % 2 != 0 || num_elements == 0 {
        return Err(Error::invalid(
            "num_elements",
            format!("the split-surface baseline needs an even element count, got {num_elements}"),
        ));
    }
    let half = num_elements / 2;
    Ok([(0..half).collect(), (half..num_elements).collect()])
}

pub fn element_split_problem(scenario: &Scenario, coupling: &Coupling) -> Result<LiftedProblem> {
    let split = element_split(scenario.cfg.num_elements)?;
    let noise = scenario.cfg.noise_power;
    let users = (0..scenario.num_users())
        .map(|j| {
            let b = scenario.side(j).index();
            let others = (0..scenario.num_users()).filter(move |&k| k != j);
            user_term(coupling, j, scenario.weights[j], b, &split[b], others, noise)
        })
        .collect();
    Ok(LiftedProblem {
        blocks: Side::BOTH
            .iter()
            .zip(split)
            .map(|(&side, elements)| SurfaceBlock { side, elements })
            .collect(),
        users,
        rule: DiagonalRule::Unit,
        binary: false,
    })
}

/// Result of a passive-beamforming block.
#[derive(Debug, Clone)]
pub struct PassiveOutcome {
    pub coeffs: PassiveCoefficients,
    /// WSR of `coeffs` (for TS: at the current time shares).
    pub wsr: f64,
    /// The SCA result was worse than the starting point and was discarded.
    pub kept_initial: bool,
    /// One outcome per solved lifted problem.
    pub sca: Vec<ScaOutcome>,
}

impl PassiveOutcome {
    pub fn converged(&self) -> bool {
        self.sca.iter().all(|s| s.converged)
    }

    pub fn trace(&self) -> Vec<PassiveTraceRow> {
        self.sca.iter().flat_map(|s| s.trace.iter().cloned()).collect()
    }
}

fn with_exact_amplitudes(mut c: PassiveCoefficients, beta_t: Vec<f64>, beta_r: Vec<f64>) -> PassiveCoefficients {
    c.beta_t = beta_t;
    c.beta_r = beta_r;
    c
}

fn keep_better(
    scenario: &Scenario,
    bundle: &CascadeBundle,
    state: &BeamformingState,
    init: &PassiveCoefficients,
    candidate: PassiveCoefficients,
    sca: Vec<ScaOutcome>,
) -> PassiveOutcome {
    let before = rates::wsr(scenario, bundle, state, init);
    let after = rates::wsr(scenario, bundle, state, &candidate);
    if after >= before {
        PassiveOutcome {
            coeffs: candidate,
            wsr: after,
            kept_initial: false,
            sca,
        }
    } else {
        PassiveOutcome {
            coeffs: init.clone(),
            wsr: before,
            kept_initial: true,
            sca,
        }
    }
}

fn split_sca(
    scenario: &Scenario,
    bundle: &CascadeBundle,
    state: &BeamformingState,
    init: &PassiveCoefficients,
    alg: &AlgorithmConfig,
    protocol: Protocol,
) -> Result<PassiveOutcome> {
    let coupling = build_coupling(bundle, &state.w);
    let problem = split_problem(scenario, &coupling, protocol == Protocol::Ms);
    let start = [init.q(Side::Transmission), init.q(Side::Reflection)];
    let out = problem.solve(&start, alg)?;
    let beta_t: Vec<f64> = out.q[0].iter().map(|z| z.norm_sqr()).collect();
    let beta_t: Vec<f64> = if protocol == Protocol::Ms {
        beta_t.iter().map(|&b| b.round()).collect()
    } else {
        beta_t
    };
    let beta_r = beta_t.iter().map(|b| 1.0 - b).collect();
    let candidate = with_exact_amplitudes(PassiveCoefficients::from_q(protocol, &out.q[0], &out.q[1]), beta_t, beta_r);
    Ok(keep_better(scenario, bundle, state, init, candidate, vec![out]))
}

/// Energy-splitting passive beamforming.
pub fn sca_es(
    scenario: &Scenario,
    bundle: &CascadeBundle,
    state: &BeamformingState,
    init: &PassiveCoefficients,
    alg: &AlgorithmConfig,
) -> Result<PassiveOutcome> {
    split_sca(scenario, bundle, state, init, alg, Protocol::Es)
}

/// Mode-switching passive beamforming; amplitudes end in `{0, 1}`.
pub fn sca_ms(
    scenario: &Scenario,
    bundle: &CascadeBundle,
    state: &BeamformingState,
    init: &PassiveCoefficients,
    alg: &AlgorithmConfig,
) -> Result<PassiveOutcome> {
    split_sca(scenario, bundle, state, init, alg, Protocol::Ms)
}

/// Unit-modulus phases of one side under time switching. Returns the
/// coefficient vector `q_κ` (never worse than `init` for that side's
/// weighted rate) and the SCA record.
pub fn optimize_ts_phases(
    scenario: &Scenario,
    bundle: &CascadeBundle,
    state: &BeamformingState,
    side: Side,
    init: &CVector,
    alg: &AlgorithmConfig,
) -> Result<(CVector, ScaOutcome)> {
    let coupling = build_coupling(bundle, &state.w);
    let problem = time_switching_problem(scenario, &coupling, side);
    let out = problem.solve(std::slice::from_ref(init), alg)?;
    let side_rate = |q: &CVector| {
        let lifted = [outer(q, q)];
        problem.lifted_wsr(&lifted)
    };
    let q = if side_rate(&out.q[0]) >= side_rate(init) {
        out.q[0].clone()
    } else {
        init.clone()
    };
    Ok((q, out))
}

/// Time-switching passive beamforming on both sides.
pub fn sca_ts(
    scenario: &Scenario,
    bundle: &CascadeBundle,
    state: &BeamformingState,
    init: &PassiveCoefficients,
    alg: &AlgorithmConfig,
) -> Result<PassiveOutcome> {
    let mut q = [init.q(Side::Transmission), init.q(Side::Reflection)];
    let mut sca = Vec::new();
    for side in Side::BOTH {
        if scenario.users_on(side).is_empty() {
            continue;
        }
        let (qs, out) = optimize_ts_phases(scenario, bundle, state, side, &q[side.index()], alg)?;
        q[side.index()] = qs;
        sca.push(out);
    }
    let n = init.num_elements();
    let candidate = with_exact_amplitudes(PassiveCoefficients::from_q(Protocol::Ts, &q[0], &q[1]), vec![1.0; n], vec![1.0; n]);
    Ok(keep_better(scenario, bundle, state, init, candidate, sca))
}

/// Split-surface baseline: unit-modulus phases on each half.
pub fn sca_element_split(
    scenario: &Scenario,
    bundle: &CascadeBundle,
    state: &BeamformingState,
    init: &PassiveCoefficients,
    alg: &AlgorithmConfig,
) -> Result<PassiveOutcome> {
    let coupling = build_coupling(bundle, &state.w);
    let problem = element_split_problem(scenario, &coupling)?;
    let start: Vec<CVector> = problem
        .blocks
        .iter()
        .map(|blk| {
            let full = init.q(blk.side);
            CVector::from_iterator(blk.elements.len(), blk.elements.iter().map(|&n| full[n]))
        })
        .collect();
    let out = problem.solve(&start, alg)?;
    let n = init.num_elements();
    let mut q = [CVector::zeros(n), CVector::zeros(n)];
    let mut beta = [vec![0.0; n], vec![0.0; n]];
    for (b, blk) in problem.blocks.iter().enumerate() {
        for (a, &e) in blk.elements.iter().enumerate() {
            q[b][e] = out.q[b][a];
            beta[b][e] = 1.0;
        }
    }
    let [bt, br] = beta;
    let mut candidate = with_exact_amplitudes(PassiveCoefficients::from_q(Protocol::Ms, &q[0], &q[1]), bt, br);
    // Phases of idle elements are irrelevant; pin them to zero.
    for (b, blk) in problem.blocks.iter().enumerate() {
        let other = 1 - b;
        for &e in &blk.elements {
            match Side::BOTH[other] {
                Side::Transmission => candidate.theta_t[e] = 0.0,
                Side::Reflection => candidate.theta_r[e] = 0.0,
            }
        }
    }
    Ok(keep_better(scenario, bundle, state, init, candidate, vec![out]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{frobenius, principal_eigenpair};
    use crate::rng::RandomStream;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn random_vector(n: usize, rng: &mut RandomStream) -> CVector {
        CVector::from_fn(n, |_, _| rng.complex_normal(1.0).unwrap())
    }

    #[test]
    fn taylor_tight_at_anchor_and_rejects_bad_anchor() {
        let t = taylor_rate_constraint(0.7, 1.9).unwrap();
        assert_eq!(t.eval(0.7, 1.9), (1.0f64 + 1.0 / (0.7 * 1.9)).log2());
        assert!(taylor_rate_constraint(0.0, 1.0).is_err());
        assert!(taylor_rate_constraint(1.0, -2.0).is_err());
    }

    #[test]
    fn taylor_is_global_underestimator() {
        let mut rng = RandomStream::new(3, 0);
        for _ in 0..10_000 {
            let ai = (rng.next_unit() * 8.0 - 4.0).exp();
            let bi = (rng.next_unit() * 8.0 - 4.0).exp();
            let a = (rng.next_unit() * 10.0 - 5.0).exp();
            let b = (rng.next_unit() * 10.0 - 5.0).exp();
            let t = taylor_rate_constraint(ai, bi).unwrap();
            let exact = (1.0 + 1.0 / (a * b)).log2();
            assert!(t.eval(a, b) <= exact + 1e-12 * (1.0 + exact.abs()), "{ai} {bi} {a} {b}");
        }
    }

    #[test]
    fn taylor_slopes_match_finite_differences() {
        let f = |a: f64, b: f64| (1.0 + 1.0 / (a * b)).log2();
        for &(a, b) in &[(0.3, 2.0), (1.0, 1.0), (5.0, 0.2), (0.01, 30.0)] {
            let t = taylor_rate_constraint(a, b).unwrap();
            let (ha, hb) = (1e-6 * a, 1e-6 * b);
            let da = (f(a + ha, b) - f(a - ha, b)) / (2.0 * ha);
            let db = (f(a, b + hb) - f(a, b - hb)) / (2.0 * hb);
            assert!((da - t.slope_a).abs() < 1e-6 * da.abs());
            assert!((db - t.slope_b).abs() < 1e-6 * db.abs());
        }
    }

    #[test]
    fn surrogate_tight_and_dominating() {
        let mut rng = RandomStream::new(5, 0);
        let q = random_vector(4, &mut rng);
        let rank_one = outer(&q, &q);
        assert!(rank_one_surrogate(&rank_one, &rank_one).abs() < 1e-12);
        for _ in 0..10_000 {
            let n = 3;
            let x = CMatrix::from_fn(n, n, |_, _| rng.complex_normal(1.0).unwrap());
            let y = CMatrix::from_fn(n, n, |_, _| rng.complex_normal(1.0).unwrap());
            let (q, anchor) = (&x * x.adjoint(), &y * y.adjoint());
            let at_anchor = rank_one_surrogate(&anchor, &anchor);
            assert!((at_anchor - rank_one_residual(&anchor)).abs() < 1e-10 * (1.0 + at_anchor));
            let s = rank_one_surrogate(&q, &anchor);
            assert!(rank_one_residual(&q) <= s + 1e-10 * (1.0 + s.abs()));
        }
    }

    fn small_scenario(n: usize, j: usize, l: usize, seed: u64) -> (Scenario, CascadeBundle) {
        let mut cfg = crate::config::SystemConfig::default();
        cfg.num_elements = n;
        cfg.num_users = j;
        cfg.num_paths = l;
        cfg.refresh();
        let scenario = Scenario::sample(&cfg, seed).unwrap();
        let grid = crate::position::fpe_grid(&cfg).unwrap();
        let bundle = scenario.assemble(&grid.coords).unwrap();
        (scenario, bundle)
    }

    fn matched_state(scenario: &Scenario, bundle: &CascadeBundle, coeffs: &PassiveCoefficients) -> BeamformingState {
        let rows = rates::effective_rows(scenario, bundle, coeffs);
        let groups = vec![(0..scenario.num_users()).collect::<Vec<_>>()];
        BeamformingState::new(crate::active::matched_filter_init(&rows, &groups, scenario.cfg.max_power))
    }

    fn half_split(n: usize, protocol: Protocol) -> PassiveCoefficients {
        PassiveCoefficients {
            protocol,
            beta_t: vec![0.5; n],
            beta_r: vec![0.5; n],
            theta_t: vec![0.0; n],
            theta_r: vec![0.0; n],
        }
    }

    #[test]
    fn coupling_identities() {
        let (scenario, bundle) = small_scenario(4, 3, 2, 11);
        let mut rng = RandomStream::new(2, 0);
        let mut w = CMatrix::from_fn(bundle.h.ncols(), 3, |_, _| rng.complex_normal(1.0).unwrap());
        w.column_mut(1).fill(c(0.0, 0.0));
        let cp = build_coupling(&bundle, &w);
        assert_eq!(frobenius(cp.signal(1)), 0.0);
        let q = random_vector(4, &mut rng);
        for j in [0, 2] {
            let direct = (q.adjoint() * &bundle.v[j] * w.column(j))[(0, 0)].norm_sqr();
            let lifted = re_trace_product(&outer(&q, &q), cp.signal(j));
            assert!((direct - lifted).abs() < 1e-10 * direct);
            let (values, _) = hermitian_eigen(cp.signal(j));
            assert!(values[1].abs() < 1e-9 * values[0]);
        }
        let _ = scenario;
    }

    fn phase_grid_best(a: &CVector) -> f64 {
        // max over θ₁, θ₂ of |a₁ e^{jθ₁} + a₂ e^{jθ₂}|² on a one-degree grid
        let mut best: f64 = 0.0;
        for i in 0..360 {
            for k in 0..360 {
                let t1 = (i as f64).to_radians();
                let t2 = (k as f64).to_radians();
                let v = (a[0] * C64::from_polar(1.0, t1) + a[1] * C64::from_polar(1.0, t2)).norm_sqr();
                best = best.max(v);
            }
        }
        best
    }

    #[test]
    fn es_single_user_matches_phase_grid() {
        let (scenario, bundle) = small_scenario(2, 1, 1, 21);
        assert_eq!(scenario.side(0), Side::Reflection);
        let init = half_split(2, Protocol::Es);
        let state = matched_state(&scenario, &bundle, &init);
        let out = sca_es(&scenario, &bundle, &state, &init, &AlgorithmConfig::default()).unwrap();
        let a: CVector = &bundle.v[0] * state.w.column(0);
        let achieved = (out.coeffs.q(Side::Reflection).adjoint() * &a)[(0, 0)].norm_sqr();
        let best = phase_grid_best(&a);
        assert!(achieved >= best * (1.0 - 1e-3), "{achieved} vs {best}");
        assert!(out.coeffs.feasibility_violation() < 1e-12);
    }

    #[test]
    fn ts_single_user_matches_phase_grid_with_unit_modulus() {
        let (scenario, bundle) = small_scenario(2, 1, 1, 23);
        let init = PassiveCoefficients {
            protocol: Protocol::Ts,
            beta_t: vec![1.0; 2],
            beta_r: vec![1.0; 2],
            theta_t: vec![0.0; 2],
            theta_r: vec![0.3, 2.0],
        };
        let state = matched_state(&scenario, &bundle, &init);
        let (q, out) = optimize_ts_phases(
            &scenario,
            &bundle,
            &state,
            Side::Reflection,
            &init.q(Side::Reflection),
            &AlgorithmConfig::default(),
        )
        .unwrap();
        for z in q.iter() {
            assert!((z.norm() - 1.0).abs() < 1e-9);
        }
        let a: CVector = &bundle.v[0] * state.w.column(0);
        let achieved = (q.adjoint() * &a)[(0, 0)].norm_sqr();
        assert!(achieved >= phase_grid_best(&a) * (1.0 - 1e-3));
        assert!(out.converged);
    }

    /// Two users, one per side, no interference, noise 1; user 0 favours
    /// element 0 and user 1 element 1.
    fn two_user_split(binary: bool) -> LiftedProblem {
        let a0 = CVector::from_vec(vec![c(10.0, 0.0), c(0.0, 9.0)]);
        let a1 = CVector::from_vec(vec![c(8.0, 0.0), c(-10.0, 0.0)]);
        let elements = vec![0, 1];
        LiftedProblem {
            blocks: vec![
                SurfaceBlock {
                    side: Side::Transmission,
                    elements: elements.clone(),
                },
                SurfaceBlock {
                    side: Side::Reflection,
                    elements,
                },
            ],
            users: vec![
                UserTerm {
                    weight: 0.5,
                    block: 0,
                    signal: outer(&a0, &a0),
                    interference: CMatrix::zeros(2, 2),
                },
                UserTerm {
                    weight: 0.5,
                    block: 1,
                    signal: outer(&a1, &a1),
                    interference: CMatrix::zeros(2, 2),
                },
            ],
            rule: DiagonalRule::SumToOne,
            binary,
        }
    }

    #[test]
    fn ms_picks_best_binary_assignment() {
        let p = two_user_split(true);
        let init = [
            CVector::from_element(2, c(0.5f64.sqrt(), 0.0)),
            CVector::from_element(2, c(0.5f64.sqrt(), 0.0)),
        ];
        let out = p.solve(&init, &AlgorithmConfig::default()).unwrap();
        let beta_t: Vec<f64> = out.q[0].iter().map(|z| z.norm_sqr().round()).collect();
        // Enumerate all four assignments with co-phased elements.
        let value = |bt: &[f64]| {
            let q0 = CVector::from_fn(2, |k, _| c(bt[k].sqrt(), 0.0));
            let q1 = CVector::from_fn(2, |k, _| c((1.0 - bt[k]).sqrt(), 0.0));
            let s0: f64 = (0..2).map(|k| bt[k].sqrt() * p.users[0].signal[(k, k)].re.sqrt()).sum();
            let s1: f64 = (0..2).map(|k| (1.0 - bt[k]).sqrt() * p.users[1].signal[(k, k)].re.sqrt()).sum();
            let _ = (q0, q1);
            0.5 * (1.0 + s0 * s0).log2() + 0.5 * (1.0 + s1 * s1).log2()
        };
        let mut best = (f64::MIN, vec![]);
        for mask in 0..4u32 {
            let bt: Vec<f64> = (0..2).map(|k| ((mask >> k) & 1) as f64).collect();
            let v = value(&bt);
            if v > best.0 {
                best = (v, bt);
            }
        }
        assert_eq!(beta_t, best.1);
        assert!(out.binary_residual < 1e-7);
    }

    #[test]
    fn locally_optimal_rank_one_start_stops_in_first_round() {
        let a = CVector::from_vec(vec![c(3.0, 1.0), c(-1.0, 2.0), c(0.5, -0.5)]);
        let p = LiftedProblem {
            blocks: vec![SurfaceBlock {
                side: Side::Reflection,
                elements: vec![0, 1, 2],
            }],
            users: vec![UserTerm {
                weight: 1.0,
                block: 0,
                signal: outer(&a, &a),
                interference: CMatrix::zeros(3, 3),
            }],
            rule: DiagonalRule::Unit,
            binary: false,
        };
        let co_phased = CVector::from_fn(3, |k, _| a[k] / a[k].norm());
        let out = p.solve(&[co_phased.clone()], &AlgorithmConfig::default()).unwrap();
        assert!(out.converged);
        assert_eq!(out.outer_rounds, 1);
        assert!(out.rank_residual < 1e-7);
        let (_, v) = principal_eigenpair(&outer(&out.q[0], &out.q[0]));
        let align = v.dotc(&co_phased).norm() / co_phased.norm();
        assert!((align - 1.0).abs() < 1e-9);
    }

    #[test]
    fn element_split_rejects_odd_counts() {
        assert!(element_split(7).is_err());
        assert_eq!(element_split(4).unwrap(), [vec![0, 1], vec![2, 3]]);
    }

    #[test]
    fn trace_csv_header() {
        let rows = vec![PassiveTraceRow {
            outer: 0,
            inner: 1,
            wsr: 2.5,
            rank_residual_t: 0.1,
            rank_residual_r: 0.2,
            eta2: 1e-4,
        }];
        let csv = trace_csv(&rows);
        assert!(csv.starts_with("outer,inner,wsr,rank_residual_t,rank_residual_r,eta2\n0,1,2.5,"));
    }
}
