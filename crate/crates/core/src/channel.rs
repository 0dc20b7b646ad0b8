//! Geometric multipath channels and the cascaded BS-surface-user responses.
//!
//! The surface sits at the origin of the global frame. Every link is a sum of
//! `L` far-field paths; the phase of path `p` at a local position `(x, y)` is
//! `2π/λ · (x cosθ_p sinφ_p + y sinθ_p)`. Stacking those phases over paths and
//! positions gives a field-response matrix (FRM) with one column per position.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;

use crate::config::{default_weights, SystemConfig};
use crate::rng::RandomStream;
use crate::{CMatrix, CVector, Error, Result, C64};

/// Which half-space a user occupies relative to the surface.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Side {
    Transmission,
    Reflection,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::Transmission, Side::Reflection];

    /// 0 for transmission, 1 for reflection.
    pub fn index(self) -> usize {
        match self {
            Side::Transmission => 0,
            Side::Reflection => 1,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Side::Transmission => "t",
            Side::Reflection => "r",
        }
    }
}

/// Elevation `θ` and azimuth `φ` of one path, radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathAngle {
    pub elevation: f64,
    pub azimuth: f64,
}

impl PathAngle {
    /// Coefficient of `x` in the path phase.
    pub fn x_coeff(&self) -> f64 {
        self.elevation.cos() * self.azimuth.sin()
    }

    /// Coefficient of `y` in the path phase.
    pub fn y_coeff(&self) -> f64 {
        self.elevation.sin()
    }
}

/// One random draw of users, path angles and path gains.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub seed: u64,
    pub bs_departure: Vec<PathAngle>,
    pub surface_arrival: Vec<PathAngle>,
    /// `user_departure[j][p]`.
    pub user_departure: Vec<Vec<PathAngle>>,
    /// Diagonal of the BS-surface path-gain matrix.
    pub bs_gains: Vec<C64>,
    /// `user_gains[j][p]`, the row vector of surface-user path gains.
    pub user_gains: Vec<Vec<C64>>,
    pub user_sides: Vec<Side>,
    pub user_positions: Vec<[f64; 3]>,
    pub bs_expected_gain: f64,
    pub user_expected_gains: Vec<f64>,
}

fn distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

const STREAM_USERS: u64 = 0;
const STREAM_ANGLES: u64 = 1;
const STREAM_GAINS: u64 = 2;
/// Stream reserved for algorithm initialization within one realization.
pub const STREAM_INIT: u64 = 3;

/// Draw a realization. Users with even index are sampled on the reflection
/// side of the user square; odd users are mirrored across the surface plane
/// (`y → −y`) onto the transmission side.
pub fn sample_realization(cfg: &SystemConfig, seed: u64) -> Result<ChannelRealization> {
    cfg.validate()?;
    let l = cfg.num_paths;
    let half_edge = cfg.user_region_edge / 2.0;
    let c = cfg.user_region_center;
    let mut users = RandomStream::new(seed, STREAM_USERS);
    let mut user_positions = Vec::with_capacity(cfg.num_users);
    let mut user_sides = Vec::with_capacity(cfg.num_users);
    for j in 0..cfg.num_users {
        let x = users.uniform(c[0] - half_edge, c[0] + half_edge)?;
        let z = users.uniform(c[2] - half_edge, c[2] + half_edge)?;
        if j % 2 == 0 {
            user_positions.push([x, c[1], z]);
            user_sides.push(Side::Reflection);
        } else {
            user_positions.push([x, -c[1], z]);
            user_sides.push(Side::Transmission);
        }
    }
    let origin = [0.0; 3];
    let path_gain = |d: f64| cfg.ref_gain * d.powf(-cfg.pathloss_exponent);
    let bs_expected_gain = path_gain(distance(cfg.bs_position, origin));
    let user_expected_gains: Vec<f64> =
        user_positions.iter().map(|&p| path_gain(distance(p, origin))).collect();

    let mut angles = RandomStream::new(seed, STREAM_ANGLES);
    let half_pi = std::f64::consts::FRAC_PI_2;
    let mut draw_paths = |n: usize| -> Result<Vec<PathAngle>> {
        (0..n)
            .map(|_| {
                Ok(PathAngle {
                    elevation: angles.uniform(-half_pi, half_pi)?,
                    azimuth: angles.uniform(-half_pi, half_pi)?,
                })
            })
            .collect()
    };
    let bs_departure = draw_paths(l)?;
    let surface_arrival = draw_paths(l)?;
    let user_departure = (0..cfg.num_users)
        .map(|_| draw_paths(l))
        .collect::<Result<Vec<_>>>()?;

    let mut gains = RandomStream::new(seed, STREAM_GAINS);
    let bs_gains = (0..l)
        .map(|_| gains.complex_normal(bs_expected_gain / l as f64))
        .collect::<Result<Vec<_>>>()?;
    let user_gains = user_expected_gains
        .iter()
        .map(|&g| (0..l).map(|_| gains.complex_normal(g / l as f64)).collect())
        .collect::<Result<Vec<Vec<_>>>>()?;

    Ok(ChannelRealization {
        seed,
        bs_departure,
        surface_arrival,
        user_departure,
        bs_gains,
        user_gains,
        user_sides,
        user_positions,
        bs_expected_gain,
        user_expected_gains,
    })
}

impl ChannelRealization {
    pub fn num_users(&self) -> usize {
        self.user_sides.len()
    }

    pub fn num_paths(&self) -> usize {
        self.bs_gains.len()
    }

    pub fn users_on(&self, side: Side) -> Vec<usize> {
        (0..self.num_users()).filter(|&j| self.user_sides[j] == side).collect()
    }

    /// Text dump: `#meta` key/value lines, then `#angles` (one `θ φ` pair per
    /// line: BS departure, surface arrival, then users in order) and `#gains`
    /// (one `re im` pair per line: BS paths, then users in order).
    pub fn to_text(&self) -> String {
        let mut out = String::from("#meta\n");
        let _ = writeln!(out, "seed {}", self.seed);
        let _ = writeln!(out, "paths {}", self.num_paths());
        let _ = writeln!(out, "users {}", self.num_users());
        let sides: Vec<&str> = self.user_sides.iter().map(|s| s.label()).collect();
        let _ = writeln!(out, "sides {}", sides.join(" "));
        let _ = writeln!(out, "bs_expected_gain {:?}", self.bs_expected_gain);
        for (j, (g, p)) in self.user_expected_gains.iter().zip(&self.user_positions).enumerate() {
            let _ = writeln!(out, "user {j} {:?} {:?} {:?} {:?}", g, p[0], p[1], p[2]);
        }
        out.push_str("#angles\n");
        let all_angles = self
            .bs_departure
            .iter()
            .chain(&self.surface_arrival)
            .chain(self.user_departure.iter().flatten());
        for a in all_angles {
            let _ = writeln!(out, "{:?} {:?}", a.elevation, a.azimuth);
        }
        out.push_str("#gains\n");
        for z in self.bs_gains.iter().chain(self.user_gains.iter().flatten()) {
            let _ = writeln!(out, "{:?} {:?}", z.re, z.im);
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, message: String| Error::Parse { line, message };
        let mut section = "";
        let mut seed = None;
        let mut paths = None;
        let mut users = None;
        let mut sides = Vec::new();
        let mut bs_expected_gain = None;
        let mut user_rows: Vec<(f64, [f64; 3])> = Vec::new();
        let mut angle_pairs: Vec<(f64, f64)> = Vec::new();
        let mut gain_pairs: Vec<(f64, f64)> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('#') {
                section = match line {
                    "#meta" | "#angles" | "#gains" => line,
                    other => return Err(bad(line_no, format!("unknown section `{other}`"))),
                };
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let num = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|_| bad(line_no, format!("not a number: `{s}`")))
            };
            match section {
                "#meta" => match fields[0] {
                    "seed" | "paths" | "users" if fields.len() == 2 => {
                        let v = fields[1]
                            .parse::<u64>()
                            .map_err(|_| bad(line_no, format!("not an integer: `{}`", fields[1])))?;
                        match fields[0] {
                            "seed" => seed = Some(v),
                            "paths" => paths = Some(v as usize),
                            _ => users = Some(v as usize),
                        }
                    }
                    "sides" => {
                        for s in &fields[1..] {
                            sides.push(match *s {
                                "t" => Side::Transmission,
                                "r" => Side::Reflection,
                                other => return Err(bad(line_no, format!("unknown side `{other}`"))),
                            });
                        }
                    }
                    "bs_expected_gain" if fields.len() == 2 => bs_expected_gain = Some(num(fields[1])?),
                    "user" if fields.len() == 6 => {
                        user_rows.push((num(fields[2])?, [num(fields[3])?, num(fields[4])?, num(fields[5])?]))
                    }
                    _ => return Err(bad(line_no, format!("malformed meta line `{line}`"))),
                },
                "#angles" | "#gains" if fields.len() == 2 => {
                    let pair = (num(fields[0])?, num(fields[1])?);
                    if section == "#angles" {
                        angle_pairs.push(pair);
                    } else {
                        gain_pairs.push(pair);
                    }
                }
                _ => return Err(bad(line_no, format!("unexpected line `{line}`"))),
            }
        }
        let missing = |what: &str| Error::Parse {
            line: 0,
            message: format!("missing `{what}`"),
        };
        let l = paths.ok_or_else(|| missing("paths"))?;
        let j = users.ok_or_else(|| missing("users"))?;
        if sides.len() != j || user_rows.len() != j {
            return Err(Error::Dimension(format!("expected {j} users in meta section")));
        }
        if angle_pairs.len() != l * (2 + j) || gain_pairs.len() != l * (1 + j) {
            return Err(Error::Dimension(format!(
                "expected {} angle and {} gain lines",
                l * (2 + j),
                l * (1 + j)
            )));
        }
        let angles: Vec<PathAngle> = angle_pairs
            .into_iter()
            .map(|(elevation, azimuth)| PathAngle { elevation, azimuth })
            .collect();
        let gains: Vec<C64> = gain_pairs.into_iter().map(|(re, im)| C64::new(re, im)).collect();
        Ok(ChannelRealization {
            seed: seed.ok_or_else(|| missing("seed"))?,
            bs_departure: angles[..l].to_vec(),
            surface_arrival: angles[l..2 * l].to_vec(),
            user_departure: angles[2 * l..].chunks(l).map(|c| c.to_vec()).collect(),
            bs_gains: gains[..l].to_vec(),
            user_gains: gains[l..].chunks(l).map(|c| c.to_vec()).collect(),
            user_sides: sides,
            user_positions: user_rows.iter().map(|r| r.1).collect(),
            bs_expected_gain: bs_expected_gain.ok_or_else(|| missing("bs_expected_gain"))?,
            user_expected_gains: user_rows.iter().map(|r| r.0).collect(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Movable-element coordinates `U` (2×N, meters) together with the
/// unconstrained preimage `Ũ` with `U = (A/2)·tanh(Ũ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementPositions {
    pub coords: DMatrix<f64>,
    pub unconstrained: DMatrix<f64>,
    pub region_side: f64,
}

impl ElementPositions {
    pub fn from_unconstrained(unconstrained: DMatrix<f64>, region_side: f64) -> Result<Self> {
        if unconstrained.nrows() != 2 {
            return Err(Error::Dimension("positions must have two rows".into()));
        }
        let half = region_side / 2.0;
        let coords = unconstrained.map(|v| half * v.tanh());
        Ok(ElementPositions {
            coords,
            unconstrained,
            region_side,
        })
    }

    /// Requires every coordinate strictly inside `(−A/2, A/2)`.
    pub fn from_coords(coords: DMatrix<f64>, region_side: f64) -> Result<Self> {
        if coords.nrows() != 2 {
            return Err(Error::Dimension("positions must have two rows".into()));
        }
        let half = region_side / 2.0;
        if coords.iter().any(|&v| !(v.abs() < half)) {
            return Err(Error::invalid("positions", "coordinates must lie strictly inside the region"));
        }
        let unconstrained = coords.map(|v| (v / half).atanh());
        Ok(ElementPositions {
            coords,
            unconstrained,
            region_side,
        })
    }

    pub fn len(&self) -> usize {
        self.coords.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.ncols() == 0
    }

    pub fn min_pair_distance(&self) -> f64 {
        min_pair_distance(&self.coords)
    }
}

/// Smallest Euclidean distance between two columns; `+∞` for fewer than two.
pub fn min_pair_distance(coords: &DMatrix<f64>) -> f64 {
    let n = coords.ncols();
    let mut best = f64::INFINITY;
    for a in 0..n {
        for b in a + 1..n {
            let d = ((coords[(0, a)] - coords[(0, b)]).powi(2) + (coords[(1, a)] - coords[(1, b)]).powi(2)).sqrt();
            best = best.min(d);
        }
    }
    best
}

/// FRM with entry `(p, k) = exp(j·2π/λ·(x_k cosθ_p sinφ_p + y_k sinθ_p))`.
pub fn field_response(positions: &DMatrix<f64>, angles: &[PathAngle], wavelength: f64) -> Result<CMatrix> {
    if positions.nrows() != 2 {
        return Err(Error::Dimension(format!(
            "positions must be 2×K, got {}×{}",
            positions.nrows(),
            positions.ncols()
        )));
    }
    let k0 = std::f64::consts::TAU / wavelength;
    Ok(CMatrix::from_fn(angles.len(), positions.ncols(), |p, k| {
        let rho = positions[(0, k)] * angles[p].x_coeff() + positions[(1, k)] * angles[p].y_coeff();
        C64::from_polar(1.0, k0 * rho)
    }))
}

/// Which angle set of a realization an FRM uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Link {
    BsAperture,
    SurfaceIncident,
    SurfaceToUser(usize),
}

pub fn build_frm(
    realization: &ChannelRealization,
    link: Link,
    positions: &DMatrix<f64>,
    wavelength: f64,
) -> Result<CMatrix> {
    let angles = match link {
        Link::BsAperture => &realization.bs_departure,
        Link::SurfaceIncident => &realization.surface_arrival,
        Link::SurfaceToUser(j) => realization
            .user_departure
            .get(j)
            .ok_or_else(|| Error::Dimension(format!("no user {j}")))?,
    };
    field_response(positions, angles, wavelength)
}

/// Fixed BS uniform linear array along `x` with half-wavelength spacing.
pub fn bs_antenna_positions(num_antennas: usize, wavelength: f64) -> DMatrix<f64> {
    DMatrix::from_fn(2, num_antennas, |r, m| if r == 0 { m as f64 * wavelength / 2.0 } else { 0.0 })
}

/// Position-dependent cascaded responses for one element layout.
#[derive(Debug, Clone)]
pub struct CascadeBundle {
    /// BS FRM `E`, L×M.
    pub bs_frm: CMatrix,
    /// `F_in(U)`, L×N.
    pub incident_frm: CMatrix,
    /// `F_j(U)`, L×N per user.
    pub user_frms: Vec<CMatrix>,
    /// `H(U) = F_inᴴ Σ_BS E`, N×M.
    pub h: CMatrix,
    /// `g_j(U) = σ_j F_j(U)` stored as a length-N column per user.
    pub g: Vec<CVector>,
    /// `V_j(U) = diag(g_j) H`, N×M per user.
    pub v: Vec<CMatrix>,
}

/// Everything about one realization that does not depend on the element
/// layout, plus the user weights.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub cfg: SystemConfig,
    pub realization: ChannelRealization,
    pub weights: Vec<f64>,
    /// `E`, L×M.
    pub bs_frm: CMatrix,
    /// `Σ_BS E`, L×M.
    pub bs_response: CMatrix,
}

impl Scenario {
    /// Weights default to the inverse expected-gain rule unless the config
    /// fixes them.
    pub fn new(cfg: &SystemConfig, realization: ChannelRealization) -> Result<Self> {
        cfg.validate()?;
        if realization.num_users() != cfg.num_users || realization.num_paths() != cfg.num_paths {
            return Err(Error::Dimension("realization does not match the config".into()));
        }
        let weights = match &cfg.user_weights {
            Some(w) => w.clone(),
            None => default_weights(&realization.user_expected_gains)?,
        };
        let positions = bs_antenna_positions(cfg.num_bs_antennas, cfg.wavelength);
        let bs_frm = build_frm(&realization, Link::BsAperture, &positions, cfg.wavelength)?;
        let mut bs_response = bs_frm.clone();
        for (o, g) in realization.bs_gains.iter().enumerate() {
            for m in 0..bs_response.ncols() {
                bs_response[(o, m)] *= g;
            }
        }
        Ok(Scenario {
            cfg: cfg.clone(),
            realization,
            weights,
            bs_frm,
            bs_response,
        })
    }

    pub fn sample(cfg: &SystemConfig, seed: u64) -> Result<Self> {
        Self::new(cfg, sample_realization(cfg, seed)?)
    }

    pub fn num_users(&self) -> usize {
        self.realization.num_users()
    }

    pub fn side(&self, j: usize) -> Side {
        self.realization.user_sides[j]
    }

    pub fn users_on(&self, side: Side) -> Vec<usize> {
        self.realization.users_on(side)
    }

    pub fn assemble(&self, positions: &DMatrix<f64>) -> Result<CascadeBundle> {
        assemble_cascade(self, positions)
    }
}

/// Build `F_in`, `F_j`, `H`, `g_j` and `V_j` for the layout `positions`.
pub fn assemble_cascade(scenario: &Scenario, positions: &DMatrix<f64>) -> Result<CascadeBundle> {
    let lambda = scenario.cfg.wavelength;
    let real = &scenario.realization;
    let incident_frm = build_frm(real, Link::SurfaceIncident, positions, lambda)?;
    let h = incident_frm.adjoint() * &scenario.bs_response;
    let mut user_frms = Vec::with_capacity(real.num_users());
    let mut g = Vec::with_capacity(real.num_users());
    let mut v = Vec::with_capacity(real.num_users());
    for j in 0..real.num_users() {
        let f = build_frm(real, Link::SurfaceToUser(j), positions, lambda)?;
        let sigma = CVector::from_column_slice(&real.user_gains[j]);
        let gj = f.transpose() * sigma;
        let mut vj = h.clone();
        for n in 0..vj.nrows() {
            let s = gj[n];
            for m in 0..vj.ncols() {
                vj[(n, m)] *= s;
            }
        }
        user_frms.push(f);
        g.push(gj);
        v.push(vj);
    }
    Ok(CascadeBundle {
        bs_frm: scenario.bs_frm.clone(),
        incident_frm,
        user_frms,
        h,
        g,
        v,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SystemConfig {
        SystemConfig::default()
    }

    #[test]
    fn sampling_is_deterministic() {
        let cfg = small_cfg();
        let a = sample_realization(&cfg, 17).unwrap();
        let b = sample_realization(&cfg, 17).unwrap();
        assert_eq!(a, b);
        let c = sample_realization(&cfg, 18).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn sides_alternate_and_mirror() {
        let cfg = small_cfg();
        let r = sample_realization(&cfg, 3).unwrap();
        for j in 0..cfg.num_users {
            let expect = if j % 2 == 0 { Side::Reflection } else { Side::Transmission };
            assert_eq!(r.user_sides[j], expect);
            let y = r.user_positions[j][1];
            assert_eq!(y, if j % 2 == 0 { -10.0 } else { 10.0 });
        }
        for a in r.bs_departure.iter().chain(&r.surface_arrival).chain(r.user_departure.iter().flatten()) {
            assert!(a.elevation.abs() <= std::f64::consts::FRAC_PI_2);
            assert!(a.azimuth.abs() <= std::f64::consts::FRAC_PI_2);
        }
        let w = Scenario::new(&cfg, r).unwrap().weights;
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unit_distance_gives_reference_gain() {
        let cfg = small_cfg();
        let d: f64 = 1.0;
        assert_eq!(cfg.ref_gain * d.powf(-cfg.pathloss_exponent), cfg.ref_gain);
    }

    #[test]
    fn bs_gain_variance_matches() {
        let mut cfg = small_cfg();
        cfg.num_users = 1;
        cfg.num_paths = 1;
        let n = 100_000;
        let mut acc = 0.0;
        let mut target = 0.0;
        for s in 0..n {
            let r = sample_realization(&cfg, s).unwrap();
            acc += r.bs_gains[0].norm_sqr();
            target = r.bs_expected_gain;
        }
        let est = acc / n as f64;
        assert!((est / target - 1.0).abs() < 0.03, "{est} vs {target}");
    }

    #[test]
    fn frm_reference_point_and_broadside() {
        let lambda = 0.1;
        let angles = [
            PathAngle { elevation: 0.3, azimuth: -1.1 },
            PathAngle { elevation: 0.0, azimuth: std::f64::consts::FRAC_PI_2 },
        ];
        let origin = DMatrix::zeros(2, 1);
        let f = field_response(&origin, &angles, lambda).unwrap();
        assert!(f.iter().all(|z| (z - C64::new(1.0, 0.0)).norm() < 1e-15));
        let pos = DMatrix::from_column_slice(2, 1, &[0.037, 0.02]);
        let f = field_response(&pos, &angles, lambda).unwrap();
        let expect = C64::from_polar(1.0, std::f64::consts::TAU * 0.037 / lambda);
        assert!((f[(1, 0)] - expect).norm() < 1e-12);
    }

    #[test]
    fn frm_matches_scalar_formula() {
        let lambda = 0.1;
        let a = PathAngle { elevation: -0.7, azimuth: 1.2 };
        let (x, y) = (lambda / 4.0, lambda / 3.0);
        let pos = DMatrix::from_column_slice(2, 1, &[x, y]);
        let f = field_response(&pos, &[a], lambda).unwrap();
        let rho = x * (-0.7f64).cos() * 1.2f64.sin() + y * (-0.7f64).sin();
        let phase = 2.0 * std::f64::consts::PI / lambda * rho;
        assert!((f[(0, 0)] - C64::new(phase.cos(), phase.sin())).norm() < 1e-12);
        assert!(field_response(&DMatrix::zeros(3, 1), &[a], lambda).is_err());
    }

    #[test]
    fn scalar_cascade_is_unity() {
        let mut cfg = small_cfg();
        cfg.num_bs_antennas = 1;
        cfg.num_elements = 1;
        cfg.num_users = 1;
        cfg.num_paths = 1;
        let mut r = sample_realization(&cfg, 0).unwrap();
        r.bs_gains = vec![C64::new(1.0, 0.0)];
        r.user_gains = vec![vec![C64::new(1.0, 0.0)]];
        let s = Scenario::new(&cfg, r).unwrap();
        let b = s.assemble(&DMatrix::zeros(2, 1)).unwrap();
        for m in [&b.h, &b.v[0]] {
            assert!((m[(0, 0)] - C64::new(1.0, 0.0)).norm() < 1e-15);
        }
        assert!((b.g[0][0] - C64::new(1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn dump_restore_roundtrip() {
        let cfg = small_cfg();
        let r = sample_realization(&cfg, 99).unwrap();
        let back = ChannelRealization::from_text(&r.to_text()).unwrap();
        assert_eq!(r, back);
        assert!(ChannelRealization::from_text("#meta\nseed x\n").is_err());
    }

    #[test]
    fn positions_reparameterize() {
        let a = 0.25;
        let u = DMatrix::from_row_slice(2, 2, &[0.1, -0.05, 0.0, 0.12]);
        let p = ElementPositions::from_coords(u.clone(), a).unwrap();
        let back = ElementPositions::from_unconstrained(p.unconstrained.clone(), a).unwrap();
        assert!((back.coords - u).abs().max() < 1e-15);
        assert!(ElementPositions::from_coords(DMatrix::from_element(2, 1, 0.125), a).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn layout(vals: &[f64], half: f64) -> DMatrix<f64> {
            DMatrix::from_fn(2, vals.len() / 2, |r, c| vals[2 * c + r] * half)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn frm_entries_unit_modulus_and_cascade_identity(
                seed in 0u64..1000,
                vals in proptest::collection::vec(-0.999f64..0.999, 16),
            ) {
                let cfg = SystemConfig::default();
                let s = Scenario::sample(&cfg, seed).unwrap();
                let u = layout(&vals, cfg.region_side / 2.0);
                let b = s.assemble(&u).unwrap();
                for f in std::iter::once(&b.incident_frm).chain(&b.user_frms).chain(std::iter::once(&b.bs_frm)) {
                    for z in f.iter() {
                        prop_assert!((z.norm() - 1.0).abs() < 1e-12);
                    }
                }
                for j in 0..cfg.num_users {
                    let diag = CMatrix::from_diagonal(&b.g[j]);
                    let alt = diag * &b.h;
                    let scale = b.v[j].norm();
                    prop_assert!((&alt - &b.v[j]).iter().map(|z| z.norm()).fold(0.0, f64::max) <= 1e-10 * scale);
                }
            }

            #[test]
            fn moving_one_element_changes_only_its_column(
                seed in 0u64..1000,
                vals in proptest::collection::vec(-0.9f64..0.9, 16),
                n in 0usize..8,
                dx in -0.01f64..0.01, dy in -0.01f64..0.01,
            ) {
                let cfg = SystemConfig::default();
                let s = Scenario::sample(&cfg, seed).unwrap();
                let u = layout(&vals, cfg.region_side / 2.0);
                let mut moved = u.clone();
                moved[(0, n)] += dx;
                moved[(1, n)] += dy;
                let a = s.assemble(&u).unwrap();
                let b = s.assemble(&moved).unwrap();
                let k0 = std::f64::consts::TAU / cfg.wavelength;
                for k in 0..8 {
                    for (fa, fb, angles) in [(&a.incident_frm, &b.incident_frm, &s.realization.surface_arrival)]
                        .into_iter()
                        .chain(a.user_frms.iter().zip(&b.user_frms).zip(&s.realization.user_departure).map(|((x, y), z)| (x, y, z)))
                    {
                        for p in 0..fa.nrows() {
                            let expect = if k == n {
                                fa[(p, k)] * C64::from_polar(1.0, k0 * (dx * angles[p].x_coeff() + dy * angles[p].y_coeff()))
                            } else {
                                fa[(p, k)]
                            };
                            prop_assert!((fb[(p, k)] - expect).norm() < 1e-12);
                        }
                    }
                }
            }
        }
    }
}
