//! SINRs, per-user rates and the weighted sum rate (WSR).
//!
//! User `j` on side `κ` receives `q_κᴴ V_j Σ_k w_k s_k + n`. Under energy
//! splitting (ES) and mode switching (MS) every other user interferes; under
//! time switching (TS) only users on the same side do, and the rate is scaled
//! by that side's time share.

use std::f64::consts::TAU;

use crate::channel::{CascadeBundle, Scenario, Side};
use crate::{CMatrix, CVector, Error, Result, C64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Protocol {
    Es,
    Ms,
    Ts,
}

impl Protocol {
    pub fn label(self) -> &'static str {
        match self {
            Protocol::Es => "ES",
            Protocol::Ms => "MS",
            Protocol::Ts => "TS",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "es" => Ok(Protocol::Es),
            "ms" => Ok(Protocol::Ms),
            "ts" => Ok(Protocol::Ts),
            other => Err(Error::invalid("protocol", format!("unknown protocol `{other}`"))),
        }
    }
}

/// Surface coefficients. Element `n` on side `κ` applies
/// `sqrt(β_κ[n])·exp(jθ_κ[n])`; the coefficient vector used in the rate
/// expressions is its conjugate, `q_κ[n] = sqrt(β_κ[n])·exp(−jθ_κ[n])`.
#[derive(Debug, Clone, PartialEq)]
pub struct PassiveCoefficients {
    pub protocol: Protocol,
    pub beta_t: Vec<f64>,
    pub beta_r: Vec<f64>,
    pub theta_t: Vec<f64>,
    pub theta_r: Vec<f64>,
}

fn wrap_phase(a: f64) -> f64 {
    let w = a.rem_euclid(TAU);
    if w >= TAU {
        0.0
    } else {
        w
    }
}

impl PassiveCoefficients {
    pub fn num_elements(&self) -> usize {
        self.beta_t.len()
    }

    pub fn amplitudes(&self, side: Side) -> &[f64] {
        match side {
            Side::Transmission => &self.beta_t,
            Side::Reflection => &self.beta_r,
        }
    }

    pub fn phases(&self, side: Side) -> &[f64] {
        match side {
            Side::Transmission => &self.theta_t,
            Side::Reflection => &self.theta_r,
        }
    }

    pub fn q(&self, side: Side) -> CVector {
        let beta = self.amplitudes(side);
        let theta = self.phases(side);
        CVector::from_iterator(
            beta.len(),
            beta.iter().zip(theta).map(|(&b, &t)| C64::from_polar(b.max(0.0).sqrt(), -t)),
        )
    }

    /// Inverse of [`PassiveCoefficients::q`]: `β = |q|²`, `θ = −∠q`.
    pub fn from_q(protocol: Protocol, q_t: &CVector, q_r: &CVector) -> Self {
        let split = |q: &CVector| -> (Vec<f64>, Vec<f64>) {
            q.iter().map(|z| (z.norm_sqr(), wrap_phase(-z.arg()))).unzip()
        };
        let (beta_t, theta_t) = split(q_t);
        let (beta_r, theta_r) = split(q_r);
        PassiveCoefficients {
            protocol,
            beta_t,
            beta_r,
            theta_t,
            theta_r,
        }
    }

    /// Largest violation of the protocol's amplitude constraints.
    pub fn feasibility_violation(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for n in 0..self.num_elements() {
            let (bt, br) = (self.beta_t[n], self.beta_r[n]);
            for b in [bt, br] {
                worst = worst.max(-b).max(b - 1.0);
            }
            match self.protocol {
                Protocol::Es => worst = worst.max((bt + br - 1.0).abs()),
                Protocol::Ms => {
                    worst = worst.max((bt + br - 1.0).abs());
                    worst = worst.max(bt.min(1.0 - bt).abs()).max(br.min(1.0 - br).abs());
                }
                Protocol::Ts => worst = worst.max((bt - 1.0).abs()).max((br - 1.0).abs()),
            }
        }
        worst
    }
}

/// Active beamformer and TS time shares. `w` is M×J with column `j` serving
/// user `j`; under TS the columns of each side form that side's beamformer
/// `W_κ` with its own power budget.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamformingState {
    pub w: CMatrix,
    pub tau_t: f64,
    pub tau_r: f64,
}

impl BeamformingState {
    pub fn new(w: CMatrix) -> Self {
        BeamformingState {
            w,
            tau_t: 0.5,
            tau_r: 0.5,
        }
    }

    pub fn tau(&self, side: Side) -> f64 {
        match side {
            Side::Transmission => self.tau_t,
            Side::Reflection => self.tau_r,
        }
    }

    /// `Tr(W_κᴴ W_κ)` over the given columns.
    pub fn power_of(&self, users: &[usize]) -> f64 {
        users.iter().map(|&j| self.w.column(j).norm_squared()).sum()
    }

    pub fn total_power(&self) -> f64 {
        self.w.norm_squared()
    }
}

/// Whether user `k` interferes with user `j` under `protocol`.
pub fn interferes(protocol: Protocol, sides: &[Side], j: usize, k: usize) -> bool {
    k != j && (protocol != Protocol::Ts || sides[j] == sides[k])
}

/// Row `j` is the effective channel `q_κ(j)ᴴ V_j`, 1×M.
pub fn effective_rows(scenario: &Scenario, bundle: &CascadeBundle, coeffs: &PassiveCoefficients) -> CMatrix {
    let q = [coeffs.q(Side::Transmission), coeffs.q(Side::Reflection)];
    let m = bundle.h.ncols();
    let mut rows = CMatrix::zeros(scenario.num_users(), m);
    for j in 0..scenario.num_users() {
        let row = q[scenario.side(j).index()].adjoint() * &bundle.v[j];
        rows.set_row(j, &row);
    }
    rows
}

/// `|h_jᴴ w_k|²` for all pairs, J×J.
pub fn gain_matrix(rows: &CMatrix, w: &CMatrix) -> nalgebra::DMatrix<f64> {
    (rows * w).map(|z| z.norm_sqr())
}

fn sinr_from_gains(gains: &nalgebra::DMatrix<f64>, protocol: Protocol, sides: &[Side], j: usize, noise: f64) -> f64 {
    let interference: f64 = (0..gains.ncols())
        .filter(|&k| interferes(protocol, sides, j, k))
        .map(|k| gains[(j, k)])
        .sum();
    gains[(j, j)] / (interference + noise)
}

/// ES/MS SINR of user `j`: interference from every other user through the
/// victim's own surface coefficients.
pub fn sinr_es_ms(
    scenario: &Scenario,
    bundle: &CascadeBundle,
    w: &CMatrix,
    coeffs: &PassiveCoefficients,
    j: usize,
) -> f64 {
    let rows = effective_rows(scenario, bundle, coeffs);
    let gains = gain_matrix(&rows, w);
    sinr_from_gains(&gains, Protocol::Es, &scenario.realization.user_sides, j, scenario.cfg.noise_power)
}

/// TS rate of user `j`: same-side interference only, scaled by the side's
/// time share.
pub fn rate_ts(
    scenario: &Scenario,
    bundle: &CascadeBundle,
    state: &BeamformingState,
    coeffs: &PassiveCoefficients,
    j: usize,
) -> f64 {
    let rows = effective_rows(scenario, bundle, coeffs);
    let gains = gain_matrix(&rows, &state.w);
    let sinr = sinr_from_gains(&gains, Protocol::Ts, &scenario.realization.user_sides, j, scenario.cfg.noise_power);
    state.tau(scenario.side(j)) * (1.0 + sinr).log2()
}

/// Per-user rates (bits/s/Hz) given precomputed effective rows.
pub fn rates_from_rows(
    scenario: &Scenario,
    protocol: Protocol,
    rows: &CMatrix,
    state: &BeamformingState,
) -> Vec<f64> {
    let gains = gain_matrix(rows, &state.w);
    let sides = &scenario.realization.user_sides;
    (0..scenario.num_users())
        .map(|j| {
            let r = (1.0 + sinr_from_gains(&gains, protocol, sides, j, scenario.cfg.noise_power)).log2();
            if protocol == Protocol::Ts {
                state.tau(sides[j]) * r
            } else {
                r
            }
        })
        .collect()
}

pub fn user_rates(
    scenario: &Scenario,
    bundle: &CascadeBundle,
    state: &BeamformingState,
    coeffs: &PassiveCoefficients,
) -> Vec<f64> {
    let rows = effective_rows(scenario, bundle, coeffs);
    rates_from_rows(scenario, coeffs.protocol, &rows, state)
}

/// `Σ_j ω_j R_j`.
pub fn wsr(scenario: &Scenario, bundle: &CascadeBundle, state: &BeamformingState, coeffs: &PassiveCoefficients) -> f64 {
    weighted_sum(&scenario.weights, &user_rates(scenario, bundle, state, coeffs))
}

pub fn weighted_sum(weights: &[f64], rates: &[f64]) -> f64 {
    weights.iter().zip(rates).map(|(w, r)| w * r).sum()
}

/// Per-side weighted rate sums `S_κ` evaluated at full time share.
pub fn side_sums(
    scenario: &Scenario,
    bundle: &CascadeBundle,
    state: &BeamformingState,
    coeffs: &PassiveCoefficients,
) -> [f64; 2] {
    let full = BeamformingState {
        w: state.w.clone(),
        tau_t: 1.0,
        tau_r: 1.0,
    };
    let rates = user_rates(scenario, bundle, &full, coeffs);
    let mut sums = [0.0; 2];
    for (j, r) in rates.iter().enumerate() {
        sums[scenario.side(j).index()] += scenario.weights[j] * r;
    }
    sums
}
