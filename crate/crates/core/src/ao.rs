//! Alternating optimization over element positions, the active beamformer
//! and the surface coefficients, for the three protocols and the two
//! baselines (fixed half-wavelength elements, and a split surface whose two
//! halves are fixed to transmission and reflection).
//!
//! Every block update is an ascent step on the weighted sum rate (WSR), so
//! the per-iteration trace is nondecreasing up to solver tolerance.

use std::fmt::Write as _;
use std::time::Instant;

use crate::active::{matched_filter_init, optimize_active};
use crate::channel::{CascadeBundle, ElementPositions, Scenario, Side, STREAM_INIT};
use crate::config::AlgorithmConfig;
use crate::linalg::hermitian_eigen;
use crate::passive::{element_split, sca_element_split, sca_es, sca_ms, sca_ts, PassiveOutcome};
use crate::position::{distance_feasible, fpe_grid, initial_positions, optimize_positions, PositionObjective};
use crate::rates::{self, effective_rows, BeamformingState, PassiveCoefficients, Protocol};
use crate::rng::{RandomStream, GENERATOR_ID};
use crate::{CMatrix, Error, Result};

/// A protocol together with its element and surface model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scheme {
    Es,
    Ms,
    Ts,
    FpeEs,
    FpeMs,
    FpeTs,
    MeRis,
}

impl Scheme {
    pub const ALL: [Scheme; 7] = [
        Scheme::Es,
        Scheme::Ms,
        Scheme::Ts,
        Scheme::FpeEs,
        Scheme::FpeMs,
        Scheme::FpeTs,
        Scheme::MeRis,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Scheme::Es => "ES",
            Scheme::Ms => "MS",
            Scheme::Ts => "TS",
            Scheme::FpeEs => "FPE-ES",
            Scheme::FpeMs => "FPE-MS",
            Scheme::FpeTs => "FPE-TS",
            Scheme::MeRis => "ME-RIS",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_uppercase().replace('_', "-");
        Scheme::ALL
            .into_iter()
            .find(|sc| sc.label() == key)
            .ok_or_else(|| Error::invalid("scheme", format!("unknown scheme `{s}`")))
    }

    pub fn protocol(self) -> Protocol {
        match self {
            Scheme::Es | Scheme::FpeEs => Protocol::Es,
            Scheme::Ms | Scheme::FpeMs | Scheme::MeRis => Protocol::Ms,
            Scheme::Ts | Scheme::FpeTs => Protocol::Ts,
        }
    }

    /// Whether the elements move.
    pub fn movable(self) -> bool {
        !matches!(self, Scheme::FpeEs | Scheme::FpeMs | Scheme::FpeTs)
    }
}

/// Where the elements start.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitialLayout {
    /// Jittered lattice drawn from the initialization stream.
    Random,
    /// The half-wavelength grid of the fixed-element baseline.
    Grid,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub scheme: Scheme,
    pub wsr: f64,
    pub rates: Vec<f64>,
    pub positions: ElementPositions,
    /// Beamformer and time shares; under TS the columns of each side form
    /// that side's beamformer.
    pub state: BeamformingState,
    pub coeffs: PassiveCoefficients,
    /// WSR at the initial point, then after every outer iteration.
    pub trace: Vec<f64>,
    /// The WSR increment fell below `ε₂` before the iteration cap.
    pub converged: bool,
    /// Every position call ended with a distance-feasible layout.
    pub positions_converged: bool,
    /// Every passive call met its rank (and binary) tolerance.
    pub passive_converged: bool,
    /// Passive calls that failed numerically; the previous coefficients were
    /// kept.
    pub passive_failures: usize,
    /// Largest `Tr(Q) − ‖Q‖₂` of the lifted solutions in the last passive call.
    pub rank_residual: f64,
    pub realization_seed: u64,
    pub init_seed: u64,
    pub seconds: f64,
}

impl SolveResult {
    pub fn iterations(&self) -> usize {
        self.trace.len().saturating_sub(1)
    }

    /// Key/value result record, one `key = value` pair per line; vectors are
    /// comma separated.
    pub fn record(&self) -> String {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:.12e}")).collect::<Vec<_>>().join(",");
        let mut s = String::new();
        let coords = &self.positions.coords;
        let xs: Vec<f64> = (0..coords.ncols()).map(|n| coords[(0, n)]).collect();
        let ys: Vec<f64> = (0..coords.ncols()).map(|n| coords[(1, n)]).collect();
        let w_re: Vec<f64> = self.state.w.iter().map(|z| z.re).collect();
        let w_im: Vec<f64> = self.state.w.iter().map(|z| z.im).collect();
        let lines: [(&str, String); 24] = [
            ("scheme", self.scheme.label().to_string()),
            ("protocol", self.scheme.protocol().label().to_string()),
            ("realization_seed", self.realization_seed.to_string()),
            ("init_seed", self.init_seed.to_string()),
            ("generator", GENERATOR_ID.to_string()),
            ("wsr", format!("{:.12e}", self.wsr)),
            ("rates", join(&self.rates)),
            ("iterations", self.iterations().to_string()),
            ("trace", join(&self.trace)),
            ("converged", self.converged.to_string()),
            ("positions_converged", self.positions_converged.to_string()),
            ("passive_converged", self.passive_converged.to_string()),
            ("passive_failures", self.passive_failures.to_string()),
            ("rank_residual", format!("{:.3e}", self.rank_residual)),
            ("tau_t", format!("{:.12e}", self.state.tau_t)),
            ("tau_r", format!("{:.12e}", self.state.tau_r)),
            ("x", join(&xs)),
            ("y", join(&ys)),
            ("beta_t", join(&self.coeffs.beta_t)),
            ("beta_r", join(&self.coeffs.beta_r)),
            ("theta_t", join(&self.coeffs.theta_t)),
            ("theta_r", join(&self.coeffs.theta_r)),
            ("w_re", format!("{}x{}:{}", self.state.w.nrows(), self.state.w.ncols(), join(&w_re))),
            ("w_im", join(&w_im)),
        ];
        for (k, v) in lines {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(s, "seconds = {:.3}", self.seconds);
        s
    }
}

/// Time shares maximizing `τ_t S_t + (1 − τ_t) S_r`: the larger side takes
/// the whole frame; ties within `1e-12` split it evenly.
pub fn allocate_time(s_t: f64, s_r: f64) -> (f64, f64) {
    if (s_t - s_r).abs() <= 1e-12 {
        (0.5, 0.5)
    } else if s_t > s_r {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    }
}

/// Phases that co-phase, on each side, the strongest user's cascaded channel
/// along its dominant BS direction. Sides without users keep zero phases.
fn cophasing_phases(scenario: &Scenario, bundle: &CascadeBundle) -> [Vec<f64>; 2] {
    let n = scenario.cfg.num_elements;
    let mut phases = [vec![0.0; n], vec![0.0; n]];
    for side in Side::BOTH {
        let strongest = scenario
            .users_on(side)
            .into_iter()
            .max_by(|&a, &b| bundle.v[a].norm_squared().total_cmp(&bundle.v[b].norm_squared()));
        let Some(j) = strongest else { continue };
        let v = &bundle.v[j];
        let (_, vectors) = hermitian_eigen(&v.ad_mul(v));
        let a = v * vectors.column(0);
        // q_n = e^{−jθ_n} aligned with a_n makes qᴴa = Σ|a_n|.
        phases[side.index()] = a.iter().map(|z| (-z.arg()).rem_euclid(std::f64::consts::TAU)).collect();
    }
    phases
}

fn initial_coefficients(scheme: Scheme, scenario: &Scenario, bundle: &CascadeBundle) -> Result<PassiveCoefficients> {
    let n = scenario.cfg.num_elements;
    let [theta_t, theta_r] = cophasing_phases(scenario, bundle);
    let (beta_t, beta_r) = match scheme.protocol() {
        Protocol::Es => (vec![0.5; n], vec![0.5; n]),
        Protocol::Ts => (vec![1.0; n], vec![1.0; n]),
        Protocol::Ms if scheme == Scheme::MeRis => {
            let [t, _] = element_split(n)?;
            let bt: Vec<f64> = (0..n).map(|e| if t.contains(&e) { 1.0 } else { 0.0 }).collect();
            let br = bt.iter().map(|b| 1.0 - b).collect();
            (bt, br)
        }
        Protocol::Ms => {
            let bt: Vec<f64> = (0..n).map(|e| if e % 2 == 0 { 1.0 } else { 0.0 }).collect();
            let br = bt.iter().map(|b| 1.0 - b).collect();
            (bt, br)
        }
    };
    Ok(PassiveCoefficients {
        protocol: scheme.protocol(),
        beta_t,
        beta_r,
        theta_t,
        theta_r,
    })
}

fn power_groups(scenario: &Scenario, protocol: Protocol) -> Vec<Vec<usize>> {
    if protocol == Protocol::Ts {
        Side::BOTH.iter().map(|&s| scenario.users_on(s)).collect()
    } else {
        vec![(0..scenario.num_users()).collect()]
    }
}

fn passive_step(
    scheme: Scheme,
    scenario: &Scenario,
    bundle: &CascadeBundle,
    state: &BeamformingState,
    coeffs: &PassiveCoefficients,
    alg: &AlgorithmConfig,
) -> Result<PassiveOutcome> {
    match scheme {
        Scheme::Es | Scheme::FpeEs => sca_es(scenario, bundle, state, coeffs, alg),
        Scheme::Ms | Scheme::FpeMs => sca_ms(scenario, bundle, state, coeffs, alg),
        Scheme::Ts | Scheme::FpeTs => sca_ts(scenario, bundle, state, coeffs, alg),
        Scheme::MeRis => sca_element_split(scenario, bundle, state, coeffs, alg),
    }
}

/// Run the alternating optimization of `scheme` on one realization. Each
/// outer iteration updates positions (movable schemes only), then the
/// active beamformer, then the surface coefficients, then (TS) the time
/// shares, and stops once the WSR increment is below `ε₂`.
pub fn run_scheme(
    scenario: &Scenario,
    alg: &AlgorithmConfig,
    scheme: Scheme,
    layout: InitialLayout,
) -> Result<SolveResult> {
    alg.validate()?;
    let start = Instant::now();
    let sys = &scenario.cfg;
    let protocol = scheme.protocol();
    let mut positions = match layout {
        InitialLayout::Grid => fpe_grid(sys)?,
        InitialLayout::Random => initial_positions(sys, &mut RandomStream::new(alg.rng_seed, STREAM_INIT))?,
    };
    let mut bundle = scenario.assemble(&positions.coords)?;
    let mut coeffs = initial_coefficients(scheme, scenario, &bundle)?;
    let rows = effective_rows(scenario, &bundle, &coeffs);
    let mut state = BeamformingState::new(matched_filter_init(&rows, &power_groups(scenario, protocol), sys.max_power));

    let mut current = rates::wsr(scenario, &bundle, &state, &coeffs);
    let mut trace = vec![current];
    let mut converged = false;
    let mut positions_converged = true;
    let mut passive_converged = true;
    let mut passive_failures = 0;
    let mut rank_residual = 0.0;

    for _ in 0..alg.max_ao_iters {
        if scheme.movable() {
            let objective = PositionObjective::new(scenario, &coeffs, &state);
            let out = optimize_positions(&objective, &positions, sys, alg);
            positions_converged &= out.converged;
            positions = out.positions;
            bundle = scenario.assemble(&positions.coords)?;
        }
        state = optimize_active(scenario, &bundle, &coeffs, &state, alg);
        match passive_step(scheme, scenario, &bundle, &state, &coeffs, alg) {
            Ok(out) => {
                passive_converged &= out.converged();
                rank_residual = out.sca.iter().map(|s| s.rank_residual).fold(0.0, f64::max);
                coeffs = out.coeffs;
            }
            Err(_) => {
                passive_converged = false;
                passive_failures += 1;
            }
        }
        if protocol == Protocol::Ts {
            let [s_t, s_r] = rates::side_sums(scenario, &bundle, &state, &coeffs);
            let (tau_t, tau_r) = allocate_time(s_t, s_r);
            state.tau_t = tau_t;
            state.tau_r = tau_r;
        }
        let next = rates::wsr(scenario, &bundle, &state, &coeffs);
        trace.push(next);
        let increment = next - current;
        current = next;
        if increment < alg.ao_tol {
            converged = true;
            break;
        }
    }

    Ok(SolveResult {
        scheme,
        wsr: current,
        rates: rates::user_rates(scenario, &bundle, &state, &coeffs),
        positions,
        state,
        coeffs,
        trace,
        converged,
        positions_converged,
        passive_converged,
        passive_failures,
        rank_residual,
        realization_seed: scenario.realization.seed,
        init_seed: alg.rng_seed,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Energy splitting with movable elements.
pub fn run_es(scenario: &Scenario, alg: &AlgorithmConfig) -> Result<SolveResult> {
    run_scheme(scenario, alg, Scheme::Es, InitialLayout::Random)
}

/// Mode switching with movable elements; amplitudes end binary.
pub fn run_ms(scenario: &Scenario, alg: &AlgorithmConfig) -> Result<SolveResult> {
    run_scheme(scenario, alg, Scheme::Ms, InitialLayout::Random)
}

/// Time switching with movable elements shared by both phases.
pub fn run_ts(scenario: &Scenario, alg: &AlgorithmConfig) -> Result<SolveResult> {
    run_scheme(scenario, alg, Scheme::Ts, InitialLayout::Random)
}

/// Fixed half-wavelength elements under `protocol`.
pub fn run_fpe_baseline(scenario: &Scenario, alg: &AlgorithmConfig, protocol: Protocol) -> Result<SolveResult> {
    let scheme = match protocol {
        Protocol::Es => Scheme::FpeEs,
        Protocol::Ms => Scheme::FpeMs,
        Protocol::Ts => Scheme::FpeTs,
    };
    run_scheme(scenario, alg, scheme, InitialLayout::Grid)
}

/// Movable elements split into a transmitting and a reflecting half with
/// frozen amplitudes.
pub fn run_me_ris_baseline(scenario: &Scenario, alg: &AlgorithmConfig) -> Result<SolveResult> {
    element_split(scenario.cfg.num_elements)?;
    run_scheme(scenario, alg, Scheme::MeRis, InitialLayout::Random)
}

/// Names of the violated constraints of `result.scheme`, empty when every
/// check passes at tolerance: layout inside the region and `D₀`-separated,
/// beamformer power within budget (per side under TS), amplitude rules, and
/// time shares summing to one.
pub fn feasibility_violations(scenario: &Scenario, result: &SolveResult) -> Vec<String> {
    let sys = &scenario.cfg;
    let mut out = Vec::new();
    let coords = &result.positions.coords;
    if !distance_feasible(coords, sys.min_distance) {
        out.push("minimum distance".to_string());
    }
    if coords.iter().any(|c| c.abs() > sys.region_side / 2.0) {
        out.push("outside region".to_string());
    }
    for users in power_groups(scenario, result.scheme.protocol()) {
        if result.state.power_of(&users) > sys.max_power * (1.0 + 1e-9) {
            out.push("power budget".to_string());
        }
    }
    if result.coeffs.feasibility_violation() > 1e-9 {
        out.push("amplitude rule".to_string());
    }
    if result.scheme.protocol() == Protocol::Ts && (result.state.tau_t + result.state.tau_r - 1.0).abs() > 1e-12 {
        out.push("time shares".to_string());
    }
    if result.scheme == Scheme::MeRis {
        let [t, _] = element_split(sys.num_elements).unwrap_or_default();
        if (0..sys.num_elements).any(|e| result.coeffs.beta_t[e] != if t.contains(&e) { 1.0 } else { 0.0 }) {
            out.push("split surface changed".to_string());
        }
    }
    out
}

/// The active beamformer of one TS side as an `M × |side|` matrix.
pub fn side_beamformer(scenario: &Scenario, state: &BeamformingState, side: Side) -> CMatrix {
    let users = scenario.users_on(side);
    CMatrix::from_fn(state.w.nrows(), users.len(), |m, a| state.w[(m, users[a])])
}
