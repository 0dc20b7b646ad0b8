//! Element-position optimization by penalized, smoothed gradient ascent.
//!
//! Positions are reparameterized as `U = (A/2)·tanh(Ũ)` so that every iterate
//! stays inside the square region. The minimum-distance constraint becomes,
//! in `Ũ`-space, `g̃ = 2D₀/A − ‖tanh ũ_n − tanh ũ_n'‖ ≤ 0`; each pair is
//! penalized with the log-sum-exp (softplus) smoothing `ρ·ln(1 + e^{g̃/ρ})`.
//! The penalized objective `p(Ũ) = f(U) − η₁·Σ_pairs softplus` is ascended
//! with Armijo backtracking, and `η₁` grows while `ρ` shrinks across outer
//! rounds until the layout is feasible.

use std::f64::consts::LN_2;
use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::channel::{min_pair_distance, ElementPositions, Scenario, Side};
use crate::config::{AlgorithmConfig, SystemConfig};
use crate::rates::{interferes, BeamformingState, PassiveCoefficients, Protocol};
use crate::rng::RandomStream;
use crate::{CMatrix, CVector, Error, Result, C64};

/// `f(U) = Σ_j ω_j R_j(U)` for fixed `W` and `q`, with TS rates scaled by
/// their time share. All signal terms are normalized by the noise power.
#[derive(Debug, Clone)]
pub struct PositionObjective<'a> {
    scenario: &'a Scenario,
    protocol: Protocol,
    /// `conj(q_κ(j))` per user, length N.
    q_conj: Vec<CVector>,
    /// Column `k` is `Σ_BS E w_k / σ`, length L.
    b: CMatrix,
    /// Effective user weight: `ω_j`, times `τ_κ(j)` under TS.
    weights: Vec<f64>,
    k0: f64,
}

/// Value and `U`-gradient of the objective.
#[derive(Debug, Clone)]
pub struct ObjectiveEval {
    pub value: f64,
    pub grad: DMatrix<f64>,
}

impl<'a> PositionObjective<'a> {
    pub fn new(scenario: &'a Scenario, coeffs: &PassiveCoefficients, state: &BeamformingState) -> Self {
        let q = [coeffs.q(Side::Transmission), coeffs.q(Side::Reflection)];
        let q_conj = (0..scenario.num_users())
            .map(|j| q[scenario.side(j).index()].map(|z| z.conj()))
            .collect();
        let b = (&scenario.bs_response * &state.w).scale(1.0 / scenario.cfg.noise_power.sqrt());
        let weights = (0..scenario.num_users())
            .map(|j| {
                let w = scenario.weights[j];
                if coeffs.protocol == Protocol::Ts {
                    w * state.tau(scenario.side(j))
                } else {
                    w
                }
            })
            .collect();
        PositionObjective {
            scenario,
            protocol: coeffs.protocol,
            q_conj,
            b,
            weights,
            k0: std::f64::consts::TAU / scenario.cfg.wavelength,
        }
    }

    pub fn scenario(&self) -> &Scenario {
        self.scenario
    }

    fn interferers(&self, j: usize) -> impl Iterator<Item = usize> + '_ {
        let sides = &self.scenario.realization.user_sides;
        (0..self.weights.len()).filter(move |&k| interferes(self.protocol, sides, j, k))
    }

    /// Per-element factors: `α_{n,j} = conj(q[n])·g_j[n]` and
    /// `β_{n,k} = (H w_k)[n]/σ`, with their x/y derivatives when requested.
    #[allow(clippy::type_complexity)]
    fn element_terms(
        &self,
        u: &DMatrix<f64>,
        n: usize,
        with_grad: bool,
    ) -> (Vec<C64>, Vec<C64>, Vec<[C64; 2]>, Vec<[C64; 2]>) {
        let real = &self.scenario.realization;
        let (x, y) = (u[(0, n)], u[(1, n)]);
        let users = self.weights.len();
        let jk = C64::new(0.0, self.k0);
        let mut alpha = vec![C64::new(0.0, 0.0); users];
        let mut dalpha = vec![[C64::new(0.0, 0.0); 2]; if with_grad { users } else { 0 }];
        for j in 0..users {
            let mut acc = C64::new(0.0, 0.0);
            let mut dx = C64::new(0.0, 0.0);
            let mut dy = C64::new(0.0, 0.0);
            for (ang, sigma) in real.user_departure[j].iter().zip(&real.user_gains[j]) {
                let (cx, cy) = (ang.x_coeff(), ang.y_coeff());
                let t = sigma * C64::from_polar(1.0, self.k0 * (x * cx + y * cy));
                acc += t;
                if with_grad {
                    dx += t * cx;
                    dy += t * cy;
                }
            }
            let qc = self.q_conj[j][n];
            alpha[j] = qc * acc;
            if with_grad {
                dalpha[j] = [qc * jk * dx, qc * jk * dy];
            }
        }
        let mut beta = vec![C64::new(0.0, 0.0); users];
        let mut dbeta = vec![[C64::new(0.0, 0.0); 2]; if with_grad { users } else { 0 }];
        for (o, ang) in real.surface_arrival.iter().enumerate() {
            let (cx, cy) = (ang.x_coeff(), ang.y_coeff());
            let phase = C64::from_polar(1.0, -self.k0 * (x * cx + y * cy));
            for k in 0..users {
                let t = phase * self.b[(o, k)];
                beta[k] += t;
                if with_grad {
                    dbeta[k][0] -= jk * t * cx;
                    dbeta[k][1] -= jk * t * cy;
                }
            }
        }
        (alpha, beta, dalpha, dbeta)
    }

    /// `s_{jk} = q_κ(j)ᴴ V_j w_k / σ` for all pairs.
    pub fn signals(&self, u: &DMatrix<f64>) -> CMatrix {
        let users = self.weights.len();
        let mut s = CMatrix::zeros(users, users);
        for n in 0..u.ncols() {
            let (alpha, beta, _, _) = self.element_terms(u, n, false);
            for j in 0..users {
                for k in 0..users {
                    s[(j, k)] += alpha[j] * beta[k];
                }
            }
        }
        s
    }

    pub fn value(&self, u: &DMatrix<f64>) -> f64 {
        let s = self.signals(u);
        (0..self.weights.len())
            .map(|j| {
                let interference: f64 = self.interferers(j).map(|k| s[(j, k)].norm_sqr()).sum();
                self.weights[j] * (1.0 + s[(j, j)].norm_sqr() / (interference + 1.0)).log2()
            })
            .sum()
    }

    /// Rate of user `j` at full time share, used by the gradient checks.
    pub fn user_rate(&self, u: &DMatrix<f64>, j: usize) -> f64 {
        let s = self.signals(u);
        let interference: f64 = self.interferers(j).map(|k| s[(j, k)].norm_sqr()).sum();
        (1.0 + s[(j, j)].norm_sqr() / (interference + 1.0)).log2()
    }

    /// `∂R_j/∂U` (2×N) at full time share.
    pub fn user_rate_gradient(&self, u: &DMatrix<f64>, j: usize) -> DMatrix<f64> {
        let mut unit = vec![0.0; self.weights.len()];
        unit[j] = 1.0;
        self.evaluate_weighted(u, &unit).grad
    }

    pub fn evaluate(&self, u: &DMatrix<f64>) -> ObjectiveEval {
        self.evaluate_weighted(u, &self.weights)
    }

    fn evaluate_weighted(&self, u: &DMatrix<f64>, weights: &[f64]) -> ObjectiveEval {
        let users = weights.len();
        let n_el = u.ncols();
        let mut s = CMatrix::zeros(users, users);
        let mut parts = Vec::with_capacity(n_el);
        for n in 0..n_el {
            let terms = self.element_terms(u, n, true);
            for j in 0..users {
                for k in 0..users {
                    s[(j, k)] += terms.0[j] * terms.1[k];
                }
            }
            parts.push(terms);
        }
        let mut value = 0.0;
        // dR_j = [ (dS + dI)/(S + I + 1) − dI/(I + 1) ] / ln 2
        let mut coef_total = vec![0.0; users];
        let mut coef_interf = vec![0.0; users];
        for j in 0..users {
            let sig = s[(j, j)].norm_sqr();
            let interference: f64 = self.interferers(j).map(|k| s[(j, k)].norm_sqr()).sum();
            value += weights[j] * (1.0 + sig / (interference + 1.0)).log2();
            coef_total[j] = weights[j] / (LN_2 * (sig + interference + 1.0));
            coef_interf[j] = weights[j] / (LN_2 * (interference + 1.0));
        }
        let mut grad = DMatrix::zeros(2, n_el);
        for (n, (alpha, beta, dalpha, dbeta)) in parts.iter().enumerate() {
            for j in 0..users {
                if weights[j] == 0.0 {
                    continue;
                }
                // d|s_jk|² = 2 Re(conj(s_jk)·(dα_j β_k + α_j dβ_k))
                let dpow = |k: usize, axis: usize| -> f64 {
                    2.0 * (s[(j, k)].conj() * (dalpha[j][axis] * beta[k] + alpha[j] * dbeta[k][axis])).re
                };
                for axis in 0..2 {
                    let ds = dpow(j, axis);
                    let di: f64 = self.interferers(j).map(|k| dpow(k, axis)).sum();
                    grad[(axis, n)] += coef_total[j] * (ds + di) - coef_interf[j] * di;
                }
            }
        }
        ObjectiveEval { value, grad }
    }

    pub fn workspace(&self, u: &DMatrix<f64>) -> GradientWorkspace {
        GradientWorkspace::build(self, u)
    }
}

/// Amplitude/phase form of the per-element signal decomposition
/// `q_κᴴ V_j w_k = a_{n,j} F_j(u_n) Fᴴ_in(u_n) b_k + (rest of the array)`.
#[derive(Debug, Clone)]
pub struct GradientWorkspace {
    /// `a_{n,j}[p] = conj(q_κ[n])·σ_{j,p}`, indexed `[n][j]`.
    pub a: Vec<Vec<Vec<C64>>>,
    /// `b_k = Σ_BS E w_k / σ`, indexed `[k]`.
    pub b: Vec<Vec<C64>>,
    /// `c_{n,j}`: the user's own signal from all elements but `n`.
    pub c: Vec<Vec<C64>>,
    /// `i_{n,j}^k`: user `k`'s stream seen by user `j` from all elements but `n`.
    pub i: Vec<Vec<Vec<C64>>>,
    /// `ζ_j^{p,o} = cosθ_p sinφ_p − cosθ_o sinφ_o`, indexed `[j][p][o]`.
    pub zeta: Vec<Vec<Vec<f64>>>,
    /// `μ_j^{p,o} = sinθ_p − sinθ_o`, indexed `[j][p][o]`.
    pub mu: Vec<Vec<Vec<f64>>>,
    /// Path phase `k₀(ρ_j^p(u_n) − ρ_in^o(u_n))` without the gain angles,
    /// indexed `[n][j][p][o]`.
    pub path_phase: Vec<Vec<Vec<Vec<f64>>>>,
    pub interferers: Vec<Vec<usize>>,
    pub weights: Vec<f64>,
    pub k0: f64,
}

impl GradientWorkspace {
    pub fn build(obj: &PositionObjective, u: &DMatrix<f64>) -> Self {
        let real = &obj.scenario.realization;
        let users = obj.weights.len();
        let n_el = u.ncols();
        let l_in = real.surface_arrival.len();
        let s = obj.signals(u);
        let b: Vec<Vec<C64>> = (0..users).map(|k| obj.b.column(k).iter().copied().collect()).collect();
        let mut a = Vec::with_capacity(n_el);
        let mut c = Vec::with_capacity(n_el);
        let mut i = Vec::with_capacity(n_el);
        let mut path_phase = Vec::with_capacity(n_el);
        for n in 0..n_el {
            let (alpha, beta, _, _) = obj.element_terms(u, n, false);
            a.push(
                (0..users)
                    .map(|j| real.user_gains[j].iter().map(|g| obj.q_conj[j][n] * g).collect())
                    .collect::<Vec<Vec<C64>>>(),
            );
            c.push((0..users).map(|j| s[(j, j)] - alpha[j] * beta[j]).collect::<Vec<_>>());
            i.push(
                (0..users)
                    .map(|j| (0..users).map(|k| s[(j, k)] - alpha[j] * beta[k]).collect())
                    .collect::<Vec<Vec<C64>>>(),
            );
            let (x, y) = (u[(0, n)], u[(1, n)]);
            path_phase.push(
                (0..users)
                    .map(|j| {
                        real.user_departure[j]
                            .iter()
                            .map(|pa| {
                                real.surface_arrival
                                    .iter()
                                    .map(|oa| {
                                        obj.k0
                                            * (x * (pa.x_coeff() - oa.x_coeff()) + y * (pa.y_coeff() - oa.y_coeff()))
                                    })
                                    .collect()
                            })
                            .collect()
                    })
                    .collect(),
            );
        }
        let coeff = |f: fn(&crate::channel::PathAngle) -> f64| -> Vec<Vec<Vec<f64>>> {
            (0..users)
                .map(|j| {
                    real.user_departure[j]
                        .iter()
                        .map(|pa| (0..l_in).map(|o| f(pa) - f(&real.surface_arrival[o])).collect())
                        .collect()
                })
                .collect()
        };
        GradientWorkspace {
            a,
            b,
            c,
            i,
            zeta: coeff(|p| p.x_coeff()),
            mu: coeff(|p| p.y_coeff()),
            path_phase,
            interferers: (0..users).map(|j| obj.interferers(j).collect()).collect(),
            weights: obj.weights.clone(),
            k0: obj.k0,
        }
    }

    /// `φ^{p,o}` for element `n`, user `j` and stream `k`.
    fn phi(&self, n: usize, j: usize, k: usize, p: usize, o: usize) -> f64 {
        self.a[n][j][p].arg() + self.b[k][o].arg() + self.path_phase[n][j][p][o]
    }

    /// `|s|²` rebuilt as `|rest + Σ_{p,o} |a_p||b_o| e^{jφ^{p,o}}|²`.
    fn power_expansion(&self, n: usize, j: usize, k: usize, rest: C64) -> f64 {
        let mut re = rest.norm() * rest.arg().cos();
        let mut im = rest.norm() * rest.arg().sin();
        for p in 0..self.a[n][j].len() {
            for o in 0..self.b[k].len() {
                let amp = self.a[n][j][p].norm() * self.b[k][o].norm();
                let ph = self.phi(n, j, k, p, o);
                re += amp * ph.cos();
                im += amp * ph.sin();
            }
        }
        re * re + im * im
    }

    /// Derivative of `|s|²` along x (`axis = 0`) or y (`axis = 1`):
    /// `2k₀ Σ_{p,o} ξ^{p,o}|a_p||b_o| [ |rest| sin(∠rest − φ^{p,o})
    ///   + Σ_{p',o'} |a_p'||b_o'| sin(φ^{p',o'} − φ^{p,o}) ]`.
    fn power_derivative(&self, n: usize, j: usize, k: usize, rest: C64, axis: usize) -> f64 {
        let coeffs = if axis == 0 { &self.zeta[j] } else { &self.mu[j] };
        let lp = self.a[n][j].len();
        let lo = self.b[k].len();
        let mut total = 0.0;
        for p in 0..lp {
            for o in 0..lo {
                let amp = self.a[n][j][p].norm() * self.b[k][o].norm();
                let ph = self.phi(n, j, k, p, o);
                let mut inner = rest.norm() * (rest.arg() - ph).sin();
                for p2 in 0..lp {
                    for o2 in 0..lo {
                        let amp2 = self.a[n][j][p2].norm() * self.b[k][o2].norm();
                        inner += amp2 * (self.phi(n, j, k, p2, o2) - ph).sin();
                    }
                }
                total += coeffs[p][o] * amp * inner;
            }
        }
        2.0 * self.k0 * total
    }

    /// `υ_j = |q_κᴴ V_j w_j|²/σ²` from the expansion around element `n`.
    pub fn upsilon(&self, n: usize, j: usize) -> f64 {
        self.power_expansion(n, j, j, self.c[n][j])
    }

    /// `γ_j = Σ_k |q_κᴴ V_j w_k|²/σ²` over interferers, from the expansion.
    pub fn gamma(&self, n: usize, j: usize) -> f64 {
        self.interferers[j]
            .iter()
            .map(|&k| self.power_expansion(n, j, k, self.i[n][j][k]))
            .sum()
    }

    /// `(∂R_j/∂x_n, ∂R_j/∂y_n)` at full time share by the quotient rule.
    pub fn grad_rate_position(&self, n: usize, j: usize) -> [f64; 2] {
        let ups = self.upsilon(n, j);
        let gam = self.gamma(n, j);
        let mut out = [0.0; 2];
        for (axis, slot) in out.iter_mut().enumerate() {
            let du = self.power_derivative(n, j, j, self.c[n][j], axis);
            let dg: f64 = self.interferers[j]
                .iter()
                .map(|&k| self.power_derivative(n, j, k, self.i[n][j][k], axis))
                .sum();
            *slot = (du * (gam + 1.0) - ups * dg) / (LN_2 * (gam + 1.0) * (gam + 1.0 + ups));
        }
        out
    }
}

/// `ρ·ln(1 + e^{x/ρ})` with the large-argument branch `x + ρ·ln(1 + e^{−x/ρ})`.
pub fn softplus(x: f64, rho: f64) -> f64 {
    let z = x / rho;
    if z > 30.0 {
        x + rho * (-z).exp().ln_1p()
    } else {
        rho * z.exp().ln_1p()
    }
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Smoothed distance penalty `η₁ Σ_{n<n'} ρ ln(1 + e^{g̃/ρ})` and its
/// `Ũ`-gradient, with `g̃ = 2D₀/A − ‖tanh ũ_n − tanh ũ_n'‖`.
pub fn penalty_value_and_grad(
    unconstrained: &DMatrix<f64>,
    eta: f64,
    rho: f64,
    min_distance: f64,
    region_side: f64,
) -> (f64, DMatrix<f64>) {
    let t = unconstrained.map(f64::tanh);
    let n = t.ncols();
    let threshold = 2.0 * min_distance / region_side;
    let mut value = 0.0;
    let mut grad = DMatrix::zeros(2, n);
    for a in 0..n {
        for b in a + 1..n {
            let dx = t[(0, a)] - t[(0, b)];
            let dy = t[(1, a)] - t[(1, b)];
            let d = (dx * dx + dy * dy).sqrt();
            let g = threshold - d;
            value += softplus(g, rho);
            if d > 0.0 {
                // ∂softplus/∂t_a = σ(g/ρ)·(−(t_a − t_b)/d)
                let s = logistic(g / rho) / d;
                grad[(0, a)] -= s * dx;
                grad[(1, a)] -= s * dy;
                grad[(0, b)] += s * dx;
                grad[(1, b)] += s * dy;
            }
        }
    }
    for k in 0..n {
        for r in 0..2 {
            grad[(r, k)] *= 1.0 - t[(r, k)] * t[(r, k)];
        }
    }
    (eta * value, grad.scale(eta))
}

/// `U = (A/2)·tanh(Ũ)`.
pub fn reparam(unconstrained: &DMatrix<f64>, region_side: f64) -> DMatrix<f64> {
    unconstrained.map(|v| 0.5 * region_side * v.tanh())
}

/// `∂U/∂Ũ = (A/2)(1 − tanh²Ũ)` elementwise.
pub fn chain_factor(unconstrained: &DMatrix<f64>, region_side: f64) -> DMatrix<f64> {
    unconstrained.map(|v| {
        let t = v.tanh();
        0.5 * region_side * (1.0 - t * t)
    })
}

/// Penalized objective in `Ũ`-space.
pub struct PenalizedObjective<'o, 'a> {
    pub objective: &'o PositionObjective<'a>,
    pub eta: f64,
    pub rho: f64,
    pub min_distance: f64,
    pub region_side: f64,
}

impl PenalizedObjective<'_, '_> {
    pub fn value(&self, unconstrained: &DMatrix<f64>) -> f64 {
        let u = reparam(unconstrained, self.region_side);
        let (pen, _) = penalty_value_and_grad(unconstrained, self.eta, self.rho, self.min_distance, self.region_side);
        self.objective.value(&u) - pen
    }

    /// Returns `(p, ∇p, f)`.
    pub fn value_and_grad(&self, unconstrained: &DMatrix<f64>) -> (f64, DMatrix<f64>, f64) {
        let u = reparam(unconstrained, self.region_side);
        let eval = self.objective.evaluate(&u);
        let (pen, pgrad) =
            penalty_value_and_grad(unconstrained, self.eta, self.rho, self.min_distance, self.region_side);
        let grad = eval.grad.component_mul(&chain_factor(unconstrained, self.region_side)) - pgrad;
        (eval.value - pen, grad, eval.value)
    }
}

/// Outcome of one Armijo search.
#[derive(Debug, Clone)]
pub struct StepResult {
    /// Accepted step, or 0 on stagnation.
    pub step: f64,
    pub next: DMatrix<f64>,
    pub value: f64,
    pub stagnated: bool,
}

/// Largest `τ = ω_τ^k τ̄` (`k ≤ 60`) with
/// `p(x + τ∇p) ≥ p(x) + δ τ ‖∇p‖²`.
pub fn backtracking_step<F: Fn(&DMatrix<f64>) -> f64>(
    p: F,
    x: &DMatrix<f64>,
    p_x: f64,
    grad: &DMatrix<f64>,
    initial_step: f64,
    shrink: f64,
    delta: f64,
) -> StepResult {
    let gnorm2 = grad.norm_squared();
    let mut tau = initial_step;
    for _ in 0..=60 {
        let cand = x + grad.scale(tau);
        let v = p(&cand);
        if v.is_finite() && v >= p_x + delta * tau * gnorm2 {
            return StepResult {
                step: tau,
                next: cand,
                value: v,
                stagnated: false,
            };
        }
        tau *= shrink;
    }
    StepResult {
        step: 0.0,
        next: x.clone(),
        value: p_x,
        stagnated: true,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositionTraceRow {
    pub iter: usize,
    pub p_value: f64,
    pub wsr: f64,
    pub min_pair_dist: f64,
    pub eta1: f64,
    pub rho: f64,
    pub step: f64,
}

pub fn trace_csv(rows: &[PositionTraceRow]) -> String {
    let mut out = String::from("iter,p_value,wsr,min_pair_dist,eta1,rho,step\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.iter, r.p_value, r.wsr, r.min_pair_dist, r.eta1, r.rho, r.step
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct PositionOutcome {
    pub positions: ElementPositions,
    /// Objective `f` at the returned layout.
    pub value: f64,
    /// Whether an outer round ended with a feasible layout.
    pub converged: bool,
    pub outer_rounds: usize,
    pub trace: Vec<PositionTraceRow>,
}

/// Feasibility of the distance constraint up to a relative `1e-9` slack.
pub fn distance_feasible(coords: &DMatrix<f64>, min_distance: f64) -> bool {
    min_pair_distance(coords) >= min_distance * (1.0 - 1e-9)
}

/// Nested penalty loops: inner Armijo ascent until the increment of `p` is at
/// most `ε₁` or `i_max` steps; outer `η₁ ← ω_η η₁`, `ρ ← ω_ρ ρ` until the
/// layout meets `D₀`. Returns the best feasible layout visited (by `f`), so a
/// feasible start is never worsened.
pub fn optimize_positions(
    objective: &PositionObjective,
    init: &ElementPositions,
    sys: &SystemConfig,
    alg: &AlgorithmConfig,
) -> PositionOutcome {
    let d0 = sys.min_distance;
    let side = sys.region_side;
    let mut x = init.unconstrained.clone();
    let mut best: Option<(f64, DMatrix<f64>)> = None;
    let consider = |f: f64, z: &DMatrix<f64>, best: &mut Option<(f64, DMatrix<f64>)>| {
        if distance_feasible(&reparam(z, side), d0) && best.as_ref().is_none_or(|(bf, _)| f > *bf) {
            *best = Some((f, z.clone()));
        }
    };
    consider(objective.value(&init.coords), &x, &mut best);
    let mut eta = alg.initial_penalty;
    let mut rho = alg.initial_smoothing;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut rounds = 0;
    let mut iter = 0;
    while rounds < alg.max_outer_rounds {
        rounds += 1;
        let pen = PenalizedObjective {
            objective,
            eta,
            rho,
            min_distance: d0,
            region_side: side,
        };
        let (mut p_cur, mut grad, _) = pen.value_and_grad(&x);
        for _ in 0..alg.max_inner {
            let step = backtracking_step(
                |z| pen.value(z),
                &x,
                p_cur,
                &grad,
                alg.initial_step,
                alg.step_shrink,
                alg.armijo_delta,
            );
            if step.stagnated {
                break;
            }
            let increment = step.value - p_cur;
            x = step.next;
            let (p_next, g_next, f_next) = pen.value_and_grad(&x);
            p_cur = p_next;
            grad = g_next;
            iter += 1;
            let coords = reparam(&x, side);
            trace.push(PositionTraceRow {
                iter,
                p_value: p_cur,
                wsr: f_next,
                min_pair_dist: min_pair_distance(&coords),
                eta1: eta,
                rho,
                step: step.step,
            });
            consider(f_next, &x, &mut best);
            if increment <= alg.inner_tol {
                break;
            }
        }
        if distance_feasible(&reparam(&x, side), d0) {
            converged = true;
            break;
        }
        eta *= alg.penalty_growth;
        rho *= alg.smoothing_decay;
    }
    let chosen = best.map(|(_, z)| z).unwrap_or(x);
    let positions = ElementPositions::from_unconstrained(chosen, side).expect("two-row layout");
    PositionOutcome {
        value: objective.value(&positions.coords),
        positions,
        converged,
        outer_rounds: rounds,
        trace,
    }
}

/// Random initial layout: distinct sites of a centred lattice with pitch
/// `max(λ/2, D₀)`, each jittered by up to a quarter pitch and redrawn until
/// every pair is at least `D₀` apart. Falls back to random sequential
/// addition and finally to the fixed grid.
pub fn initial_positions(sys: &SystemConfig, rng: &mut RandomStream) -> Result<ElementPositions> {
    let n = sys.num_elements;
    let a = sys.region_side;
    let d0 = sys.min_distance;
    let pitch = (sys.wavelength / 2.0).max(d0);
    let inner = 0.5 * a * (1.0 - 1e-6);
    let per_axis = lattice_count(a, pitch);
    let sites: Vec<(f64, f64)> = (0..per_axis * per_axis)
        .map(|k| {
            let off = (per_axis as f64 - 1.0) / 2.0;
            ((((k % per_axis) as f64) - off) * pitch, (((k / per_axis) as f64) - off) * pitch)
        })
        .collect();
    let inside = |x: f64, y: f64| x.abs() < inner && y.abs() < inner;
    if sites.len() >= n {
        for _ in 0..2000 {
            let mut order: Vec<usize> = (0..sites.len()).collect();
            for i in (1..order.len()).rev() {
                let k = (rng.next_unit() * (i + 1) as f64) as usize;
                order.swap(i, k.min(i));
            }
            let mut coords = DMatrix::zeros(2, n);
            let mut ok = true;
            for (c, &s) in order.iter().take(n).enumerate() {
                let x = sites[s].0 + rng.uniform(-0.25, 0.25)? * pitch;
                let y = sites[s].1 + rng.uniform(-0.25, 0.25)? * pitch;
                if !inside(x, y) {
                    ok = false;
                    break;
                }
                coords[(0, c)] = x;
                coords[(1, c)] = y;
            }
            if ok && distance_feasible(&coords, d0) {
                return ElementPositions::from_coords(coords, a);
            }
        }
    }
    for _ in 0..200 {
        let mut pts: Vec<(f64, f64)> = Vec::with_capacity(n);
        for _ in 0..10_000 {
            if pts.len() == n {
                break;
            }
            let x = rng.uniform(-inner, inner)?;
            let y = rng.uniform(-inner, inner)?;
            if pts.iter().all(|&(px, py)| ((px - x).powi(2) + (py - y).powi(2)).sqrt() >= d0) {
                pts.push((x, y));
            }
        }
        if pts.len() == n {
            let coords = DMatrix::from_fn(2, n, |r, c| if r == 0 { pts[c].0 } else { pts[c].1 });
            return ElementPositions::from_coords(coords, a);
        }
    }
    for _ in 0..200 {
        if let Some(coords) = spread(n, d0, inner, rng)? {
            return ElementPositions::from_coords(coords, a);
        }
    }
    let grid = fixed_grid(n, d0.max(sys.wavelength / 2.0), a)?;
    ElementPositions::from_coords(grid, a)
}

/// Tight regions: random points pushed apart pairwise and clamped to the box
/// until every distance clears `d0` with a small margin.
fn spread(n: usize, d0: f64, inner: f64, rng: &mut RandomStream) -> Result<Option<DMatrix<f64>>> {
    let target = d0 * (1.0 + 1e-4);
    let bound = inner * (1.0 - 1e-6);
    let mut pts = Vec::with_capacity(n);
    for _ in 0..n {
        pts.push([rng.uniform(-bound, bound)?, rng.uniform(-bound, bound)?]);
    }
    for _ in 0..5000 {
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for k in i + 1..n {
                let d = [pts[k][0] - pts[i][0], pts[k][1] - pts[i][1]];
                let dist = d[0].hypot(d[1]);
                if dist >= target {
                    continue;
                }
                worst = worst.max(target - dist);
                let dir = if dist > 0.0 { [d[0] / dist, d[1] / dist] } else { [1.0, 0.0] };
                let push = 0.5 * (target - dist);
                for c in 0..2 {
                    pts[i][c] = (pts[i][c] - push * dir[c]).clamp(-bound, bound);
                    pts[k][c] = (pts[k][c] + push * dir[c]).clamp(-bound, bound);
                }
            }
        }
        if worst == 0.0 {
            let coords = DMatrix::from_fn(2, n, |r, c| pts[c][r]);
            return Ok(distance_feasible(&coords, d0).then_some(coords));
        }
    }
    Ok(None)
}

/// Largest `m` with `(m − 1)·pitch < A`.
fn lattice_count(a: f64, pitch: f64) -> usize {
    let mut m = 1;
    while (m as f64) * pitch < a {
        m += 1;
    }
    m
}

/// Centred rectangular grid with the given pitch: the row count starts at
/// `⌊√N⌋` and grows until the columns fit strictly inside the region.
pub fn fixed_grid(n: usize, pitch: f64, region_side: f64) -> Result<DMatrix<f64>> {
    if n == 0 {
        return Err(Error::invalid("N", "no elements"));
    }
    let mut rows = ((n as f64).sqrt().floor() as usize).max(1);
    while rows <= n {
        let cols = n.div_ceil(rows);
        if (cols as f64 - 1.0) * pitch < region_side && (rows as f64 - 1.0) * pitch < region_side {
            let xo = (cols as f64 - 1.0) / 2.0;
            let yo = (rows as f64 - 1.0) / 2.0;
            return Ok(DMatrix::from_fn(2, n, |r, k| {
                if r == 0 {
                    ((k % cols) as f64 - xo) * pitch
                } else {
                    ((k / cols) as f64 - yo) * pitch
                }
            }));
        }
        rows += 1;
    }
    Err(Error::invalid(
        "N",
        format!("{n} elements do not fit a grid of pitch {pitch} inside side {region_side}"),
    ))
}

/// Half-wavelength grid used by the fixed-position baseline.
pub fn fpe_grid(sys: &SystemConfig) -> Result<ElementPositions> {
    let grid = fixed_grid(sys.num_elements, sys.wavelength / 2.0, sys.region_side)?;
    ElementPositions::from_coords(grid, sys.region_side)
}
