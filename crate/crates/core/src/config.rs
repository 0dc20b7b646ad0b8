//! System and algorithm parameters.
//!
//! Both configs are loaded from one flat `key = value` text file. Blank lines
//! and `#` comments are ignored; absent keys take the reference defaults
//! (3 GHz carrier, 8 antennas, 8 elements, 4 users, 2 paths, 30 dBm budget).
//! Power-like quantities are given in dB/dBm and lengths in wavelengths; both
//! are converted to linear units and meters when the config is built.

use std::fmt::Write as _;
use std::path::Path;

use crate::{Error, Result};

const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Keys accepted in the config file, in serialization order.
pub const CONFIG_KEYS: [&str; 25] = [
    "freq_hz",
    "M",
    "N",
    "J",
    "L",
    "beta0_db",
    "alpha0",
    "pmax_dbm",
    "noise_dbm",
    "region_side_lambda",
    "d0_lambda",
    "eta1",
    "eta2",
    "eta3",
    "rho",
    "omega_eta",
    "omega_rho",
    "omega_tau",
    "tau_bar",
    "delta",
    "eps1",
    "eps2",
    "eps3",
    "i_max",
    "seed",
];

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn dbm_to_watts(dbm: f64) -> f64 {
    db_to_linear(dbm - 30.0)
}

/// Physical scenario. The `*_db`, `*_dbm` and `*_lambda` fields are the
/// inputs; the linear/metric twins are derived by [`SystemConfig::refresh`].
#[derive(Debug, Clone, PartialEq)]
pub struct SystemConfig {
    pub carrier_frequency: f64,
    pub wavelength: f64,
    pub num_bs_antennas: usize,
    pub num_elements: usize,
    pub num_users: usize,
    pub num_paths: usize,
    pub ref_gain_db: f64,
    pub ref_gain: f64,
    pub pathloss_exponent: f64,
    pub max_power_dbm: f64,
    pub max_power: f64,
    pub noise_power_dbm: f64,
    pub noise_power: f64,
    pub region_side_lambda: f64,
    pub region_side: f64,
    pub min_distance_lambda: f64,
    pub min_distance: f64,
    pub bs_position: [f64; 3],
    pub user_region_center: [f64; 3],
    pub user_region_edge: f64,
    /// Explicit user weights. `None` selects the inverse expected-gain rule.
    pub user_weights: Option<Vec<f64>>,
}

impl Default for SystemConfig {
    fn default() -> Self {
        let mut cfg = SystemConfig {
            carrier_frequency: 3e9,
            wavelength: 0.0,
            num_bs_antennas: 8,
            num_elements: 8,
            num_users: 4,
            num_paths: 2,
            ref_gain_db: -30.0,
            ref_gain: 0.0,
            pathloss_exponent: 2.2,
            max_power_dbm: 30.0,
            max_power: 0.0,
            noise_power_dbm: -90.0,
            noise_power: 0.0,
            region_side_lambda: 2.5,
            region_side: 0.0,
            min_distance_lambda: 0.5,
            min_distance: 0.0,
            bs_position: [-10.0, -5.0, 10.0],
            user_region_center: [0.0, -10.0, 0.0],
            user_region_edge: 40.0,
            user_weights: None,
        };
        cfg.refresh();
        cfg
    }
}

impl SystemConfig {
    /// Recompute every derived linear/metric field from the input fields.
    pub fn refresh(&mut self) {
        self.wavelength = SPEED_OF_LIGHT / self.carrier_frequency;
        self.ref_gain = db_to_linear(self.ref_gain_db);
        self.max_power = dbm_to_watts(self.max_power_dbm);
        self.noise_power = dbm_to_watts(self.noise_power_dbm);
        self.region_side = self.region_side_lambda * self.wavelength;
        self.min_distance = self.min_distance_lambda * self.wavelength;
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("M", self.num_bs_antennas),
            ("N", self.num_elements),
            ("J", self.num_users),
            ("L", self.num_paths),
        ] {
            if v == 0 {
                return Err(Error::invalid(key, "must be at least 1"));
            }
        }
        positive("freq_hz", self.carrier_frequency)?;
        positive("wavelength", self.wavelength)?;
        positive("region_side_lambda", self.region_side)?;
        positive("d0_lambda", self.min_distance)?;
        positive("pmax_dbm", self.max_power)?;
        positive("noise_dbm", self.noise_power)?;
        positive("beta0_db", self.ref_gain)?;
        positive("alpha0", self.pathloss_exponent)?;
        positive("user_region_edge", self.user_region_edge)?;
        let per_side = (self.region_side / self.min_distance + 1.0).floor();
        if (self.num_elements as f64) > per_side * per_side {
            return Err(Error::invalid(
                "N",
                format!(
                    "{} elements cannot be packed at spacing d0 inside the region",
                    self.num_elements
                ),
            ));
        }
        if let Some(w) = &self.user_weights {
            validate_weights(w, self.num_users)?;
        }
        Ok(())
    }
}

/// Algorithm schedules and tolerances.
#[derive(Debug, Clone, PartialEq)]
pub struct AlgorithmConfig {
    pub initial_penalty: f64,
    pub initial_smoothing: f64,
    pub penalty_growth: f64,
    pub smoothing_decay: f64,
    pub initial_step: f64,
    pub step_shrink: f64,
    pub armijo_delta: f64,
    pub inner_tol: f64,
    pub ao_tol: f64,
    pub rank_tol: f64,
    pub max_inner: usize,
    pub sca_penalty: f64,
    pub ms_penalty: f64,
    pub rng_seed: u64,
    /// Hard cap on penalty rounds in the position and passive solvers.
    pub max_outer_rounds: usize,
    /// Hard cap on alternating-optimization rounds.
    pub max_ao_iters: usize,
    /// Hard cap on WMMSE rounds per active-beamforming call.
    pub max_wmmse_iters: usize,
    /// Duality-gap target of the barrier solver.
    pub solver_tol: f64,
}

impl Default for AlgorithmConfig {
    fn default() -> Self {
        AlgorithmConfig {
            initial_penalty: 1e-4,
            initial_smoothing: 1.0,
            penalty_growth: 10.0,
            smoothing_decay: 0.1,
            initial_step: 10.0,
            step_shrink: 0.5,
            armijo_delta: 1e-4,
            inner_tol: 1e-6,
            ao_tol: 1e-6,
            rank_tol: 1e-7,
            max_inner: 100,
            sca_penalty: 1e-4,
            ms_penalty: 1e-4,
            rng_seed: 1,
            max_outer_rounds: 20,
            max_ao_iters: 30,
            max_wmmse_iters: 200,
            solver_tol: 1e-7,
        }
    }
}

impl AlgorithmConfig {
    pub fn validate(&self) -> Result<()> {
        positive("eta1", self.initial_penalty)?;
        positive("rho", self.initial_smoothing)?;
        positive("tau_bar", self.initial_step)?;
        positive("eps1", self.inner_tol)?;
        positive("eps2", self.ao_tol)?;
        positive("eps3", self.rank_tol)?;
        positive("eta2", self.sca_penalty)?;
        positive("eta3", self.ms_penalty)?;
        if !(self.penalty_growth > 1.0) {
            return Err(Error::invalid("omega_eta", "penalty_growth must exceed 1"));
        }
        open_unit("omega_rho", "smoothing_decay", self.smoothing_decay)?;
        open_unit("omega_tau", "step_shrink", self.step_shrink)?;
        open_unit("delta", "armijo_delta", self.armijo_delta)?;
        positive("solver_tol", self.solver_tol)?;
        for (key, v) in [
            ("i_max", self.max_inner),
            ("max_outer_rounds", self.max_outer_rounds),
            ("max_ao_iters", self.max_ao_iters),
            ("max_wmmse_iters", self.max_wmmse_iters),
        ] {
            if v == 0 {
                return Err(Error::invalid(key, "must be at least 1"));
            }
        }
        Ok(())
    }
}

fn positive(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && !v.is_nan() {
        Ok(())
    } else {
        Err(Error::invalid(key, format!("must be positive, got {v}")))
    }
}

fn open_unit(key: &str, name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(key, format!("{name} out of (0,1): {v}")))
    }
}

/// Check that weights are positive and sum to one.
pub fn validate_weights(w: &[f64], num_users: usize) -> Result<()> {
    if w.len() != num_users {
        return Err(Error::invalid(
            "user_weights",
            format!("expected {num_users} weights, got {}", w.len()),
        ));
    }
    if w.iter().any(|&x| !(x > 0.0)) {
        return Err(Error::invalid("user_weights", "weights must be positive"));
    }
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > 1e-12 {
        return Err(Error::invalid("user_weights", format!("weights sum to {sum}")));
    }
    Ok(())
}

/// Weights inversely proportional to the expected surface-user gains,
/// normalized to sum to one.
pub fn default_weights(expected_gains: &[f64]) -> Result<Vec<f64>> {
    if expected_gains.is_empty() {
        return Err(Error::invalid("user_weights", "no users"));
    }
    if let Some(g) = expected_gains.iter().find(|&&g| !(g > 0.0)) {
        return Err(Error::invalid(
            "user_weights",
            format!("expected gain must be positive, got {g}"),
        ));
    }
    let inv: Vec<f64> = expected_gains.iter().map(|g| 1.0 / g).collect();
    let total: f64 = inv.iter().sum();
    Ok(inv.into_iter().map(|x| x / total).collect())
}

/// Parse config text. Absent keys keep their defaults.
pub fn parse_config(text: &str) -> Result<(SystemConfig, AlgorithmConfig)> {
    let mut sys = SystemConfig::default();
    let mut alg = AlgorithmConfig::default();
    let mut seen = std::collections::HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: idx + 1,
            message: format!("expected `key = value`, got `{line}`"),
        })?;
        let key = key.trim();
        let value = value.trim();
        if !seen.insert(key.to_string()) {
            return Err(Error::Parse {
                line: idx + 1,
                message: format!("duplicate key `{key}`"),
            });
        }
        set_key(&mut sys, &mut alg, key, value).map_err(|e| match e {
            Error::Parse { message, .. } => Error::Parse {
                line: idx + 1,
                message,
            },
            other => other,
        })?;
    }
    sys.refresh();
    sys.validate()?;
    alg.validate()?;
    Ok((sys, alg))
}

/// Read and validate a config file.
pub fn load_config(path: impl AsRef<Path>) -> Result<(SystemConfig, AlgorithmConfig)> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

/// Assign one config key from its textual value. Derived fields are not
/// refreshed; call [`SystemConfig::refresh`] afterwards.
pub fn set_key(
    sys: &mut SystemConfig,
    alg: &mut AlgorithmConfig,
    key: &str,
    value: &str,
) -> Result<()> {
    let float = || -> Result<f64> {
        value.parse::<f64>().map_err(|_| Error::Parse {
            line: 0,
            message: format!("`{key}`: not a number: `{value}`"),
        })
    };
    let count = || -> Result<usize> {
        value.parse::<usize>().map_err(|_| Error::Parse {
            line: 0,
            message: format!("`{key}`: not a non-negative integer: `{value}`"),
        })
    };
    match key {
        "freq_hz" => sys.carrier_frequency = float()?,
        "M" => sys.num_bs_antennas = count()?,
        "N" => sys.num_elements = count()?,
        "J" => sys.num_users = count()?,
        "L" => sys.num_paths = count()?,
        "beta0_db" => sys.ref_gain_db = float()?,
        "alpha0" => sys.pathloss_exponent = float()?,
        "pmax_dbm" => sys.max_power_dbm = float()?,
        "noise_dbm" => sys.noise_power_dbm = float()?,
        "region_side_lambda" => sys.region_side_lambda = float()?,
        "d0_lambda" => sys.min_distance_lambda = float()?,
        "eta1" => alg.initial_penalty = float()?,
        "eta2" => alg.sca_penalty = float()?,
        "eta3" => alg.ms_penalty = float()?,
        "rho" => alg.initial_smoothing = float()?,
        "omega_eta" => alg.penalty_growth = float()?,
        "omega_rho" => alg.smoothing_decay = float()?,
        "omega_tau" => alg.step_shrink = float()?,
        "tau_bar" => alg.initial_step = float()?,
        "delta" => alg.armijo_delta = float()?,
        "eps1" => alg.inner_tol = float()?,
        "eps2" => alg.ao_tol = float()?,
        "eps3" => alg.rank_tol = float()?,
        "i_max" => alg.max_inner = count()?,
        "seed" => {
            alg.rng_seed = value.parse::<u64>().map_err(|_| Error::Parse {
                line: 0,
                message: format!("`seed`: not an unsigned integer: `{value}`"),
            })?
        }
        _ => {
            return Err(Error::Parse {
                line: 0,
                message: format!("unknown key `{key}`"),
            })
        }
    }
    Ok(())
}

/// Serialize both configs in the file format, one key per line.
pub fn to_config_string(sys: &SystemConfig, alg: &AlgorithmConfig) -> String {
    let values: [String; 25] = [
        sys.carrier_frequency.to_string(),
        sys.num_bs_antennas.to_string(),
        sys.num_elements.to_string(),
        sys.num_users.to_string(),
        sys.num_paths.to_string(),
        sys.ref_gain_db.to_string(),
        sys.pathloss_exponent.to_string(),
        sys.max_power_dbm.to_string(),
        sys.noise_power_dbm.to_string(),
        sys.region_side_lambda.to_string(),
        sys.min_distance_lambda.to_string(),
        alg.initial_penalty.to_string(),
        alg.sca_penalty.to_string(),
        alg.ms_penalty.to_string(),
        alg.initial_smoothing.to_string(),
        alg.penalty_growth.to_string(),
        alg.smoothing_decay.to_string(),
        alg.step_shrink.to_string(),
        alg.initial_step.to_string(),
        alg.armijo_delta.to_string(),
        alg.inner_tol.to_string(),
        alg.ao_tol.to_string(),
        alg.rank_tol.to_string(),
        alg.max_inner.to_string(),
        alg.rng_seed.to_string(),
    ];
    let mut out = String::new();
    for (k, v) in CONFIG_KEYS.iter().zip(values.iter()) {
        let _ = writeln!(out, "{k} = {v}");
    }
    out
}
