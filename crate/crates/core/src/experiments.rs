//! Monte-Carlo sweeps, convergence traces and the finite-difference gradient
//! check, all emitting plain CSV.
//!
//! Realization `k` of a sweep with master seed `m` uses seed
//! `derive_seed(m, k)` for both the channel draw and the initialization, so
//! growing the realization count never changes the earlier realizations.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::ao::{feasibility_violations, run_scheme, InitialLayout, Scheme, SolveResult};
use crate::channel::Scenario;
use crate::config::{AlgorithmConfig, SystemConfig};
use crate::position::PositionObjective;
use crate::rates::{BeamformingState, PassiveCoefficients, Protocol};
use crate::rng::{derive_seed, RandomStream};
use crate::{CMatrix, Error, Result};

/// Exact header of every sweep table.
pub const SWEEP_HEADER: &str = "param,value,scheme,mean_wsr,stderr,n";
/// Environment variable capping the worker count of a sweep.
pub const THREADS_ENV: &str = "STARS_OPT_THREADS";

/// Random-instance stream of the gradient check.
const STREAM_GRADCHECK: u64 = 4;

/// System parameter varied by a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    NumUsers,
    PmaxDbm,
    RegionSideLambda,
    NumPaths,
    NumElements,
}

impl SweepParam {
    pub fn label(self) -> &'static str {
        match self {
            SweepParam::NumUsers => "num_users",
            SweepParam::PmaxDbm => "pmax_dbm",
            SweepParam::RegionSideLambda => "region_side_lambda",
            SweepParam::NumPaths => "num_paths",
            SweepParam::NumElements => "num_elements",
        }
    }

    /// Accepts the column label or the short CLI names `users`, `pmax`,
    /// `region`, `paths`, `elements`.
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "users" | "num_users" | "j" => Ok(SweepParam::NumUsers),
            "pmax" | "pmax_dbm" | "power" => Ok(SweepParam::PmaxDbm),
            "region" | "region_side_lambda" | "a" => Ok(SweepParam::RegionSideLambda),
            "paths" | "num_paths" | "l" => Ok(SweepParam::NumPaths),
            "elements" | "num_elements" | "n" => Ok(SweepParam::NumElements),
            other => Err(Error::invalid("param", format!("unknown sweep parameter `{other}`"))),
        }
    }

    /// `cfg` with this parameter set to `value`.
    pub fn apply(self, cfg: &SystemConfig, value: f64) -> Result<SystemConfig> {
        let count = || -> Result<usize> {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(Error::invalid(self.label(), format!("{value} is not a positive count")))
            }
        };
        let mut out = cfg.clone();
        match self {
            SweepParam::NumUsers => {
                out.num_users = count()?;
                if out.user_weights.as_ref().is_some_and(|w| w.len() != out.num_users) {
                    return Err(Error::invalid("num_users", "explicit user weights do not match the swept count"));
                }
            }
            SweepParam::PmaxDbm => out.max_power_dbm = value,
            SweepParam::RegionSideLambda => out.region_side_lambda = value,
            SweepParam::NumPaths => out.num_paths = count()?,
            SweepParam::NumElements => out.num_elements = count()?,
        }
        out.refresh();
        out.validate()?;
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub param: SweepParam,
    pub values: Vec<f64>,
    pub schemes: Vec<Scheme>,
    pub num_realizations: usize,
    pub master_seed: u64,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::invalid("values", "empty value list"));
        }
        if self.schemes.is_empty() {
            return Err(Error::invalid("schemes", "empty scheme list"));
        }
        if self.num_realizations == 0 {
            return Err(Error::invalid("n", "at least one realization is required"));
        }
        Ok(())
    }
}

/// One `(value, scheme)` cell of a sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub param: SweepParam,
    pub value: f64,
    pub scheme: Scheme,
    /// Final WSR per realization in index order; `None` for a failed run.
    pub samples: Vec<Option<f64>>,
    /// `(realization index, message)` for every failed run.
    pub errors: Vec<(usize, String)>,
    /// `(realization index, violated constraint)` of finished runs.
    pub violations: Vec<(usize, String)>,
}

impl SweepRow {
    fn successes(&self) -> impl Iterator<Item = f64> + '_ {
        self.samples.iter().flatten().copied()
    }

    /// Number of successful runs.
    pub fn n(&self) -> usize {
        self.successes().count()
    }

    /// Mean over successful runs; NaN when every run failed.
    pub fn mean(&self) -> f64 {
        let n = self.n();
        if n == 0 {
            return f64::NAN;
        }
        self.successes().sum::<f64>() / n as f64
    }

    /// Sample standard deviation over `√n`; zero for a single run.
    pub fn stderr(&self) -> f64 {
        let n = self.n();
        if n < 2 {
            return if n == 1 { 0.0 } else { f64::NAN };
        }
        let m = self.mean();
        let var = self.successes().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{}",
            self.param.label(),
            self.value,
            self.scheme.label(),
            self.mean(),
            self.stderr(),
            self.n()
        )
    }
}

#[derive(Debug, Clone)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// Header plus one line per row, LF terminated.
    pub fn csv(&self) -> String {
        let mut s = String::from(SWEEP_HEADER);
        s.push('\n');
        for row in &self.rows {
            s.push_str(&row.csv_line());
            s.push('\n');
        }
        s
    }

    pub fn row(&self, value: f64, scheme: Scheme) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.value == value && r.scheme == scheme)
    }
}

/// Worker count: `STARS_OPT_THREADS` when set to a positive integer,
/// otherwise rayon's default.
pub fn worker_count() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}

/// Scenario and initialization seed of realization `index`.
pub fn realization(cfg: &SystemConfig, alg: &AlgorithmConfig, master: u64, index: usize) -> Result<(Scenario, AlgorithmConfig)> {
    let seed = derive_seed(master, index as u64);
    let scenario = Scenario::sample(cfg, seed)?;
    let alg = AlgorithmConfig { rng_seed: seed, ..alg.clone() };
    Ok((scenario, alg))
}

/// Movable schemes start from the seeded random layout, fixed ones from the
/// half-wavelength grid.
pub fn default_layout(scheme: Scheme) -> InitialLayout {
    if scheme.movable() {
        InitialLayout::Random
    } else {
        InitialLayout::Grid
    }
}

/// Constraint violations of a finished run, including a lifted rank
/// residual at or above `ε₃`.
pub fn state_violations(scenario: &Scenario, result: &SolveResult, alg: &AlgorithmConfig) -> Vec<String> {
    let mut v = feasibility_violations(scenario, result);
    if result.rank_residual >= alg.rank_tol {
        v.push(format!("rank residual {:.3e}", result.rank_residual));
    }
    v
}

/// Run `scheme` on realization `index` of `master`.
pub fn run_realization(
    cfg: &SystemConfig,
    alg: &AlgorithmConfig,
    scheme: Scheme,
    master: u64,
    index: usize,
) -> Result<SolveResult> {
    let (scenario, alg) = realization(cfg, alg, master, index)?;
    run_scheme(&scenario, &alg, scheme, default_layout(scheme))
}

/// Evaluate every `(value, scheme, realization)` triple, concurrently when
/// allowed, and gather the rows in `(value, scheme)` order. Individual
/// failures are kept in their row.
pub fn run_sweep(spec: &SweepSpec, cfg: &SystemConfig, alg: &AlgorithmConfig) -> Result<SweepTable> {
    spec.validate()?;
    alg.validate()?;
    let cfgs: Vec<Result<SystemConfig>> = spec.values.iter().map(|&v| spec.param.apply(cfg, v)).collect();
    let jobs: Vec<(usize, usize, usize)> = (0..spec.values.len())
        .flat_map(|v| (0..spec.schemes.len()).flat_map(move |s| (0..spec.num_realizations).map(move |k| (v, s, k))))
        .collect();
    type Outcome = std::result::Result<(f64, Vec<String>), String>;
    let run = |&(v, s, k): &(usize, usize, usize)| -> Outcome {
        let cfg = cfgs[v].as_ref().map_err(|e| e.to_string())?;
        let (scenario, alg) = realization(cfg, alg, spec.master_seed, k).map_err(|e| e.to_string())?;
        let scheme = spec.schemes[s];
        let r = run_scheme(&scenario, &alg, scheme, default_layout(scheme)).map_err(|e| e.to_string())?;
        Ok((r.wsr, state_violations(&scenario, &r, &alg)))
    };
    let outcomes: Vec<Outcome> = match worker_count() {
        Some(threads) => rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::invalid(THREADS_ENV, e.to_string()))?
            .install(|| jobs.par_iter().map(run).collect()),
        None => jobs.par_iter().map(run).collect(),
    };

    let mut rows = Vec::with_capacity(spec.values.len() * spec.schemes.len());
    let mut results = outcomes.into_iter();
    for &value in &spec.values {
        for &scheme in &spec.schemes {
            let mut row = SweepRow {
                param: spec.param,
                value,
                scheme,
                samples: Vec::with_capacity(spec.num_realizations),
                errors: Vec::new(),
                violations: Vec::new(),
            };
            for k in 0..spec.num_realizations {
                match results.next().expect("one outcome per job") {
                    Ok((w, violated)) => {
                        row.samples.push(Some(w));
                        row.violations.extend(violated.into_iter().map(|v| (k, v)));
                    }
                    Err(e) => {
                        row.samples.push(None);
                        row.errors.push((k, e));
                    }
                }
            }
            rows.push(row);
        }
    }
    Ok(SweepTable { rows })
}

/// Alternating-optimization run whose per-iteration WSR is the product.
#[derive(Debug, Clone)]
pub struct ConvergenceTrace {
    pub result: SolveResult,
}

impl ConvergenceTrace {
    /// `iter,wsr` rows; iteration 0 is the initial point.
    pub fn csv(&self) -> String {
        let mut s = String::from("iter,wsr\n");
        for (i, w) in self.result.trace.iter().enumerate() {
            let _ = writeln!(s, "{i},{w:.9}");
        }
        s
    }
}

/// Trace of `scheme` on the realization drawn from `seed`, initialized from
/// the same seed.
pub fn run_convergence_trace(
    cfg: &SystemConfig,
    alg: &AlgorithmConfig,
    scheme: Scheme,
    seed: u64,
) -> Result<ConvergenceTrace> {
    let scenario = Scenario::sample(cfg, seed)?;
    let alg = AlgorithmConfig { rng_seed: seed, ..alg.clone() };
    let result = run_scheme(&scenario, &alg, scheme, default_layout(scheme))?;
    Ok(ConvergenceTrace { result })
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub trials: usize,
    /// Worst `‖g − g_fd‖_∞ / ‖g_fd‖_∞` over instances and users.
    pub max_relative_error: f64,
}

/// Compare the analytic rate gradients with central differences of step
/// `1e-6·λ` on `trials` random instances: channel, layout inside the
/// region, energy-splitting coefficients and beamformer are all random.
pub fn gradient_check(cfg: &SystemConfig, trials: usize, master: u64) -> Result<GradCheckReport> {
    cfg.validate()?;
    let h = 1e-6 * cfg.wavelength;
    let n = cfg.num_elements;
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let seed = derive_seed(master, t as u64);
        let scenario = Scenario::sample(cfg, seed)?;
        let mut rng = RandomStream::new(seed, STREAM_GRADCHECK);
        let half = 0.5 * cfg.region_side;
        let mut u = DMatrix::zeros(2, n);
        for v in u.iter_mut() {
            *v = rng.uniform(-half, half)?;
        }
        let beta_t: Vec<f64> = (0..n).map(|_| rng.next_unit()).collect::<Vec<_>>();
        let mut phase = || rng.uniform(0.0, std::f64::consts::TAU);
        let theta_t = (0..n).map(|_| phase()).collect::<Result<Vec<_>>>()?;
        let theta_r = (0..n).map(|_| phase()).collect::<Result<Vec<_>>>()?;
        let coeffs = PassiveCoefficients {
            protocol: Protocol::Es,
            beta_r: beta_t.iter().map(|b| 1.0 - b).collect(),
            beta_t,
            theta_t,
            theta_r,
        };
        let mut w = CMatrix::zeros(cfg.num_bs_antennas, cfg.num_users);
        for z in w.iter_mut() {
            *z = rng.complex_normal(1.0)?;
        }
        let power = w.norm_squared();
        let state = BeamformingState::new(w.scale((cfg.max_power / power).sqrt()));
        let objective = PositionObjective::new(&scenario, &coeffs, &state);
        for j in 0..cfg.num_users {
            let g = objective.user_rate_gradient(&u, j);
            let mut fd = DMatrix::zeros(2, n);
            for e in 0..n {
                for r in 0..2 {
                    let mut up = u.clone();
                    up[(r, e)] += h;
                    let mut dn = u.clone();
                    dn[(r, e)] -= h;
                    fd[(r, e)] = (objective.user_rate(&up, j) - objective.user_rate(&dn, j)) / (2.0 * h);
                }
            }
            let scale = fd.abs().max();
            if scale > 0.0 {
                worst = worst.max((&g - &fd).abs().max() / scale);
            }
        }
    }
    Ok(GradCheckReport {
        trials,
        max_relative_error: worst,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_alg() -> AlgorithmConfig {
        AlgorithmConfig {
            max_ao_iters: 2,
            ..AlgorithmConfig::default()
        }
    }

    #[test]
    fn params_parse_and_apply() {
        let cfg = SystemConfig::default();
        assert_eq!(SweepParam::parse("users").unwrap(), SweepParam::NumUsers);
        assert_eq!(SweepParam::parse("region_side_lambda").unwrap(), SweepParam::RegionSideLambda);
        assert!(SweepParam::parse("bandwidth").is_err());
        let c = SweepParam::RegionSideLambda.apply(&cfg, 4.5).unwrap();
        assert!((c.region_side - 4.5 * c.wavelength).abs() < 1e-15);
        assert!(SweepParam::NumUsers.apply(&cfg, 2.5).is_err());
        assert_eq!(SweepParam::NumPaths.apply(&cfg, 3.0).unwrap().num_paths, 3);
    }

    #[test]
    fn spec_validation() {
        let mut spec = SweepSpec {
            param: SweepParam::PmaxDbm,
            values: vec![],
            schemes: vec![Scheme::Es],
            num_realizations: 1,
            master_seed: 0,
        };
        assert!(spec.validate().is_err());
        spec.values = vec![30.0];
        spec.num_realizations = 0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn row_statistics() {
        let row = SweepRow {
            param: SweepParam::NumUsers,
            value: 4.0,
            scheme: Scheme::Es,
            samples: vec![Some(1.0), None, Some(3.0)],
            errors: vec![(1, "x".into())],
            violations: vec![],
        };
        assert_eq!(row.n(), 2);
        assert_eq!(row.mean(), 2.0);
        assert!((row.stderr() - 1.0).abs() < 1e-15);
        assert_eq!(row.csv_line(), "num_users,4,ES,2.000000,1.000000,2");
    }

    #[test]
    fn single_realization_is_the_run() {
        let cfg = SystemConfig::default();
        let alg = small_alg();
        let spec = SweepSpec {
            param: SweepParam::PmaxDbm,
            values: vec![cfg.max_power_dbm],
            schemes: vec![Scheme::FpeEs],
            num_realizations: 1,
            master_seed: 9,
        };
        let table = run_sweep(&spec, &cfg, &alg).unwrap();
        let direct = run_realization(&cfg, &alg, Scheme::FpeEs, 9, 0).unwrap();
        assert_eq!(table.rows.len(), 1);
        assert_eq!(table.rows[0].samples, vec![Some(direct.wsr)]);
        assert!(table.csv().starts_with(SWEEP_HEADER));
    }

    #[test]
    fn failures_stay_in_their_row() {
        // A one-wavelength region cannot hold the fixed half-wavelength grid.
        let cfg = SystemConfig::default();
        let spec = SweepSpec {
            param: SweepParam::RegionSideLambda,
            values: vec![1.0],
            schemes: vec![Scheme::FpeEs],
            num_realizations: 2,
            master_seed: 1,
        };
        let table = run_sweep(&spec, &cfg, &small_alg()).unwrap();
        assert_eq!(table.rows[0].n(), 0);
        assert_eq!(table.rows[0].errors.len(), 2);
        assert!(table.rows[0].csv_line().ends_with(",0"));
    }

    #[test]
    fn trace_csv_shape() {
        let cfg = SystemConfig::default();
        let t = run_convergence_trace(&cfg, &small_alg(), Scheme::FpeTs, 3).unwrap();
        let csv = t.csv();
        assert!(csv.starts_with("iter,wsr\n0,"));
        assert_eq!(csv.lines().count(), t.result.trace.len() + 1);
    }

    #[test]
    fn gradient_check_small() {
        let report = gradient_check(&SystemConfig::default(), 3, 5).unwrap();
        assert!(report.max_relative_error < 1e-4, "{}", report.max_relative_error);
    }
}
