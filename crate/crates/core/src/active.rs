//! WMMSE active beamforming at the base station.
//!
//! For a set of mutually interfering users with effective channels `h_jᴴ`
//! (rows of a K×M matrix), the weighted sum rate is maximized by alternating
//! the closed-form receive scalars and MSE weights with a power-constrained
//! quadratic program in `W`. The QP is solved in closed form through the
//! eigen-decomposition of `K = Σ_k ϖ_k |v_k|² h_k h_kᴴ` and a bisection on
//! the power multiplier `μ`.

use crate::channel::{CascadeBundle, Scenario, Side};
use crate::config::AlgorithmConfig;
use crate::linalg::hermitian_eigen;
use crate::rates::{effective_rows, BeamformingState, PassiveCoefficients, Protocol};
use crate::{CMatrix, CVector, C64};

#[derive(Debug, Clone, PartialEq)]
pub struct WmmseState {
    /// `ϖ_j = ω_j (1 + SINR_j)`.
    pub mse_weights: Vec<f64>,
    /// `v_j = h_jᴴ w_j / (Σ_k |h_jᴴ w_k|² + σ²)`.
    pub receive: Vec<C64>,
    /// MSE at the optimal receive scalar, `1 / (1 + SINR_j)`.
    pub mse: Vec<f64>,
}

/// SINRs of all users in `rows` under full mutual interference.
pub fn sinrs(rows: &CMatrix, w: &CMatrix, noise: f64) -> Vec<f64> {
    let g = (rows * w).map(|z| z.norm_sqr());
    (0..rows.nrows())
        .map(|j| {
            let total: f64 = g.row(j).sum();
            g[(j, j)] / (total - g[(j, j)] + noise)
        })
        .collect()
}

pub fn weighted_rate(rows: &CMatrix, w: &CMatrix, weights: &[f64], noise: f64) -> f64 {
    sinrs(rows, w, noise)
        .iter()
        .zip(weights)
        .map(|(s, wt)| wt * (1.0 + s).log2())
        .sum()
}

pub fn update_weights_and_scalars(rows: &CMatrix, w: &CMatrix, weights: &[f64], noise: f64) -> WmmseState {
    let y = rows * w;
    let mut state = WmmseState {
        mse_weights: Vec::with_capacity(rows.nrows()),
        receive: Vec::with_capacity(rows.nrows()),
        mse: Vec::with_capacity(rows.nrows()),
    };
    for j in 0..rows.nrows() {
        let total: f64 = y.row(j).iter().map(|z| z.norm_sqr()).sum::<f64>() + noise;
        let signal = y[(j, j)].norm_sqr();
        let sinr = signal / (total - signal);
        state.mse_weights.push(weights[j] * (1.0 + sinr));
        state.receive.push(y[(j, j)] / total);
        state.mse.push(1.0 / (1.0 + sinr));
    }
    state
}

#[derive(Debug, Clone)]
pub struct BeamformerSolution {
    pub w: CMatrix,
    /// Power multiplier; zero when the budget is slack.
    pub mu: f64,
}

/// Minimize `Σ_j ϖ_j e_j` subject to `Tr(WᴴW) ≤ P`, with
/// `w_j = ϖ_j v_j (K + μI)⁻¹ h_j` and complementary slackness on `μ`.
pub fn solve_beamformer(rows: &CMatrix, state: &WmmseState, max_power: f64) -> BeamformerSolution {
    let (users, m) = rows.shape();
    let mut k = CMatrix::zeros(m, m);
    let mut rhs = CMatrix::zeros(m, users);
    for j in 0..users {
        let h: CVector = rows.row(j).adjoint();
        let c = state.mse_weights[j] * state.receive[j].norm_sqr();
        if c > 0.0 {
            k += (&h * h.adjoint()).scale(c);
        }
        rhs.set_column(j, &(&h * (state.receive[j] * state.mse_weights[j])));
    }
    let (lambda, u) = hermitian_eigen(&k);
    let lmax = lambda.first().copied().unwrap_or(0.0);
    if !(lmax > 0.0) {
        return BeamformerSolution {
            w: CMatrix::zeros(m, users),
            mu: 0.0,
        };
    }
    // Components along numerically null directions of K are dropped, which
    // realizes the pseudo-inverse at μ = 0.
    let floor = lmax * 1e-13;
    let coeff = u.adjoint() * &rhs;
    let weight_sq: Vec<f64> = (0..m).map(|i| coeff.row(i).iter().map(|z| z.norm_sqr()).sum()).collect();
    let power = |mu: f64| -> f64 {
        (0..m)
            .filter(|&i| lambda[i] > floor)
            .map(|i| weight_sq[i] / (lambda[i] + mu).powi(2))
            .sum()
    };
    let mu = if power(0.0) <= max_power {
        0.0
    } else {
        // P(μ) ≤ Σ|c|²/μ², so this upper end is always feasible.
        let mut hi = (weight_sq.iter().sum::<f64>() / max_power).sqrt();
        let mut lo = 0.0;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if power(mid) > max_power {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-15 * hi {
                break;
            }
        }
        hi
    };
    let mut scaled = coeff.clone();
    for i in 0..m {
        let s = if lambda[i] > floor { 1.0 / (lambda[i] + mu) } else { 0.0 };
        for j in 0..users {
            scaled[(i, j)] *= s;
        }
    }
    BeamformerSolution { w: &u * scaled, mu }
}

#[derive(Debug, Clone)]
pub struct WmmseOutcome {
    pub w: CMatrix,
    /// Weighted rate before the first round and after each accepted round.
    pub history: Vec<f64>,
}

/// Alternate the closed-form updates until the weighted-rate increment drops
/// below `tol`. A round that would lower the rate is discarded.
pub fn wmmse_loop(
    rows: &CMatrix,
    weights: &[f64],
    noise: f64,
    max_power: f64,
    w_init: &CMatrix,
    tol: f64,
    max_iter: usize,
) -> WmmseOutcome {
    let mut w = w_init.clone();
    let mut current = weighted_rate(rows, &w, weights, noise);
    let mut history = vec![current];
    for _ in 0..max_iter {
        let state = update_weights_and_scalars(rows, &w, weights, noise);
        let next = solve_beamformer(rows, &state, max_power).w;
        let value = weighted_rate(rows, &next, weights, noise);
        if value < current {
            break;
        }
        let gain = value - current;
        w = next;
        current = value;
        history.push(value);
        if gain < tol {
            break;
        }
    }
    WmmseOutcome { w, history }
}

/// One active-beamforming block of the alternating optimization. ES/MS use a
/// single WMMSE over all users; TS solves each side separately with its own
/// budget.
pub fn optimize_active(
    scenario: &Scenario,
    bundle: &CascadeBundle,
    coeffs: &PassiveCoefficients,
    state: &BeamformingState,
    alg: &AlgorithmConfig,
) -> BeamformingState {
    let rows = effective_rows(scenario, bundle, coeffs);
    let noise = scenario.cfg.noise_power;
    let pmax = scenario.cfg.max_power;
    let mut out = state.clone();
    let groups: Vec<Vec<usize>> = if coeffs.protocol == Protocol::Ts {
        Side::BOTH.iter().map(|&s| scenario.users_on(s)).collect()
    } else {
        vec![(0..scenario.num_users()).collect()]
    };
    for users in groups.into_iter().filter(|g| !g.is_empty()) {
        let sub_rows = CMatrix::from_fn(users.len(), rows.ncols(), |a, m| rows[(users[a], m)]);
        let sub_w = CMatrix::from_fn(rows.ncols(), users.len(), |m, a| state.w[(m, users[a])]);
        let weights: Vec<f64> = users.iter().map(|&j| scenario.weights[j]).collect();
        let res = wmmse_loop(&sub_rows, &weights, noise, pmax, &sub_w, alg.ao_tol, alg.max_wmmse_iters);
        for (a, &j) in users.iter().enumerate() {
            out.w.set_column(j, &res.w.column(a));
        }
    }
    out
}

/// Matched filters `w_j = sqrt(P/K)·h_j/‖h_j‖` with the budget split evenly
/// over the `K` users of each power group.
pub fn matched_filter_init(rows: &CMatrix, groups: &[Vec<usize>], max_power: f64) -> CMatrix {
    let mut w = CMatrix::zeros(rows.ncols(), rows.nrows());
    for users in groups {
        if users.is_empty() {
            continue;
        }
        let share = (max_power / users.len() as f64).sqrt();
        for &j in users {
            let h: CVector = rows.row(j).adjoint();
            let norm = h.norm();
            if norm > 0.0 {
                w.set_column(j, &h.scale(share / norm));
            }
        }
    }
    w
}
