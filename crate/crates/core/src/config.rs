//! Run configuration: TOML text with fixed sections, strict keys and
//! cross-field validation.
//!
//! ```toml
//! experiment = "force_balance"      # or constant_field, spin_separation, diffusion,
//!                                   # flux_source, gauge_limit, none
//! solver = "lindblad,trajectories"  # or "all"
//!
//! [grid]
//! n = 128
//! length = 32.0
//!
//! [physics]
//! mass = 1.0
//! nu = 1.0
//!
//! [field]
//! kind = "helix"                    # constant | helix | domain_wall | sampled
//! winding = 2                       # helix: q = winding·2π/L
//!
//! [initial]
//! kind = "gaussian"                 # gaussian | unpolarized
//! sigma = 2.0
//! bloch = [0.0, 0.0, 1.0]
//!
//! [time]
//! t_end = 2.0
//! dt = 1e-3
//! output_every = 10
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::fields::spinor_from_bloch;
use crate::fields::{AxisField, FieldKind, Rotation, Spin2, Vec3};
use crate::grid::Grid;
use crate::lindblad::{init_partially_coherent, init_with_spin, spin_from_bloch, step_bound, DensityMatrix, GaussianPacket};
use crate::semiclassical::{suggested_p_max, MomentumGrid, PhaseSpaceState, TransportSolver};
use crate::trajectories::InitialSpin;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    #[default]
    None,
    ConstantField,
    ForceBalance,
    SpinSeparation,
    Diffusion,
    FluxSource,
    GaugeLimit,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::None => "none",
            ExperimentKind::ConstantField => "constant_field",
            ExperimentKind::ForceBalance => "force_balance",
            ExperimentKind::SpinSeparation => "spin_separation",
            ExperimentKind::Diffusion => "diffusion",
            ExperimentKind::FluxSource => "flux_source",
            ExperimentKind::GaugeLimit => "gauge_limit",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Lindblad,
    Trajectories,
    Semiclassical,
    Gauge,
}

impl SolverKind {
    pub const ALL: [SolverKind; 4] = [
        SolverKind::Lindblad,
        SolverKind::Trajectories,
        SolverKind::Semiclassical,
        SolverKind::Gauge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Lindblad => "lindblad",
            SolverKind::Trajectories => "trajectories",
            SolverKind::Semiclassical => "semiclassical",
            SolverKind::Gauge => "gauge",
        }
    }
}

/// Parses `"all"` or a comma-separated list of solver names.
pub fn parse_solvers(text: &str) -> Result<Vec<SolverKind>> {
    let mut out = Vec::new();
    for word in text.split(',').map(str::trim).filter(|w| !w.is_empty()) {
        if word == "all" {
            out.extend(SolverKind::ALL);
            continue;
        }
        let kind = SolverKind::ALL.into_iter().find(|k| k.name() == word).ok_or_else(|| {
            Error::config(
                "solver",
                format!("unknown solver `{word}`; expected lindblad, trajectories, semiclassical, gauge or all"),
            )
        })?;
        out.push(kind);
    }
    out.sort();
    out.dedup();
    if out.is_empty() {
        return Err(Error::config("solver", "no solver selected"));
    }
    Ok(out)
}

fn default_n() -> usize {
    128
}
fn default_length() -> f64 {
    32.0
}
fn one() -> f64 {
    1.0
}
fn default_output_every() -> usize {
    1
}
fn default_n_traj() -> usize {
    2000
}
fn default_n_outputs() -> usize {
    20
}
fn z_axis() -> [f64; 3] {
    [0.0, 0.0, 1.0]
}
fn default_solver() -> String {
    "lindblad".into()
}
fn default_sigma() -> f64 {
    2.0
}
fn default_positivity_every() -> usize {
    50
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_length")]
    pub length: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            n: default_n(),
            length: default_length(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicsSection {
    #[serde(default = "one")]
    pub mass: f64,
    pub nu: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSection {
    pub kind: String,
    pub axis: Option<[f64; 3]>,
    pub winding: Option<i64>,
    pub wavenumber: Option<f64>,
    pub center: Option<f64>,
    pub width: Option<f64>,
    pub table: Option<PathBuf>,
    #[serde(default)]
    pub rotation_rate: f64,
    #[serde(default = "z_axis")]
    pub rotation_axis: [f64; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    pub kind: String,
    #[serde(default)]
    pub x0: f64,
    #[serde(default)]
    pub p0: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    /// Momentum width of a partially coherent packet (pure when absent).
    pub sigma_p: Option<f64>,
    /// Spin Bloch vector for `gaussian`.
    pub bloch: Option<[f64; 3]>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeSection {
    pub t_end: f64,
    pub dt: Option<f64>,
    #[serde(default = "default_output_every")]
    pub output_every: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LindbladSection {
    #[serde(default = "default_positivity_every")]
    pub positivity_every: usize,
}

impl Default for LindbladSection {
    fn default() -> Self {
        LindbladSection {
            positivity_every: default_positivity_every(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoriesSection {
    #[serde(default = "default_n_traj")]
    pub n_traj: usize,
    #[serde(default)]
    pub base_seed: u64,
}

impl Default for TrajectoriesSection {
    fn default() -> Self {
        TrajectoriesSection {
            n_traj: default_n_traj(),
            base_seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemiclassicalSection {
    pub p_max: Option<f64>,
    pub dp: Option<f64>,
    pub dt: Option<f64>,
    /// Momentum width of the phase-space initial state (default: that of the
    /// density matrix).
    pub sigma_p: Option<f64>,
    /// Snapshot times for the phase-space CSV (default: first and last output).
    pub snapshots: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaugeSection {
    #[serde(default)]
    pub nu_list: Vec<f64>,
    pub t_end: Option<f64>,
    #[serde(default = "default_n_outputs")]
    pub n_outputs: usize,
}

impl Default for GaugeSection {
    fn default() -> Self {
        GaugeSection {
            nu_list: Vec::new(),
            t_end: None,
            n_outputs: default_n_outputs(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

/// The whole configuration file.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: Option<String>,
    #[serde(default)]
    pub experiment: ExperimentKind,
    #[serde(default = "default_solver")]
    pub solver: String,
    #[serde(default)]
    pub grid: GridSection,
    pub physics: PhysicsSection,
    pub field: FieldSection,
    pub initial: InitialSection,
    pub time: TimeSection,
    #[serde(default)]
    pub lindblad: LindbladSection,
    #[serde(default)]
    pub trajectories: TrajectoriesSection,
    #[serde(default)]
    pub semiclassical: SemiclassicalSection,
    #[serde(default)]
    pub gauge: GaugeSection,
    #[serde(default)]
    pub output: OutputSection,
    /// Directory for relative paths (the config file's directory).
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

impl RunConfig {
    /// Parses TOML text. Unknown keys and type errors are reported with their line.
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            line: e.span().map(|s| line_of(text, s.start)).unwrap_or(0),
            message: e.message().trim().to_string(),
        })
    }

    /// Reads, parses and validates a configuration file.
    pub fn from_path(path: &Path) -> Result<(Self, Scenario)> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config("config.path", format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        let scenario = cfg.validate()?;
        Ok((cfg, scenario))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn solvers(&self) -> Result<Vec<SolverKind>> {
        parse_solvers(&self.solver)
    }

    fn build_field(&self, grid: Grid) -> Result<AxisField> {
        let f = &self.field;
        let used: &[&str] = match f.kind.as_str() {
            "constant" => &["axis"],
            "helix" => &["winding", "wavenumber"],
            "domain_wall" => &["center", "width"],
            "sampled" => &["table"],
            other => {
                return Err(Error::config(
                    "field.kind",
                    format!("unknown field kind `{other}`; expected constant, helix, domain_wall or sampled"),
                ))
            }
        };
        let given = [
            ("axis", f.axis.is_some()),
            ("winding", f.winding.is_some()),
            ("wavenumber", f.wavenumber.is_some()),
            ("center", f.center.is_some()),
            ("width", f.width.is_some()),
            ("table", f.table.is_some()),
        ];
        if let Some((key, _)) = given.iter().find(|(k, g)| *g && !used.contains(k)) {
            return Err(Error::config(
                "field.kind",
                format!("key `field.{key}` does not apply to a {} field", f.kind),
            ));
        }
        let missing = |key: &str| Error::config("field.kind", format!("{} field needs `field.{key}`", f.kind));
        let field = match f.kind.as_str() {
            "constant" => {
                let a = Vec3::from(f.axis.ok_or_else(|| missing("axis"))?);
                if a.norm() < 1e-6 {
                    return Err(Error::config("field.axis", "axis must be a nonzero vector"));
                }
                AxisField::new(FieldKind::Constant { axis: a.normalize() }, grid, None)?
            }
            "helix" => {
                let q = match (f.winding, f.wavenumber) {
                    (Some(w), None) => w as f64 * grid.dk(),
                    (None, Some(q)) => q,
                    (Some(_), Some(_)) => {
                        return Err(Error::config("field.winding", "give either winding or wavenumber, not both"))
                    }
                    (None, None) => return Err(missing("winding")),
                };
                AxisField::new(FieldKind::Helix { wavenumber: q }, grid, None)?
            }
            "domain_wall" => AxisField::new(
                FieldKind::DomainWall {
                    center: f.center.unwrap_or(0.0),
                    width: f.width.ok_or_else(|| missing("width"))?,
                },
                grid,
                None,
            )?,
            _ => {
                let rel = f.table.as_ref().ok_or_else(|| missing("table"))?;
                let path = match &self.base_dir {
                    Some(dir) if rel.is_relative() => dir.join(rel),
                    _ => rel.clone(),
                };
                let text = std::fs::read_to_string(&path).map_err(|e| {
                    Error::config("field.table", format!("cannot read {}: {e}", path.display()))
                })?;
                AxisField::from_table(&text, grid)?
            }
        };
        if f.rotation_rate != 0.0 {
            Ok(field.with_rotation(Rotation::new(f.rotation_rate, Vec3::from(f.rotation_axis))?))
        } else {
            Ok(field)
        }
    }

    /// Checks every cross-field constraint and builds the solver inputs.
    pub fn validate(&self) -> Result<Scenario> {
        let solvers = self.solvers()?;
        let grid = Grid::new(self.grid.n, self.grid.length)?;
        let (mass, nu) = (self.physics.mass, self.physics.nu);
        if !(mass > 0.0) {
            return Err(Error::config("physics.mass", "mass must be > 0"));
        }
        if !(nu >= 0.0) {
            return Err(Error::config("physics.nu", "decoherence rate must be ≥ 0"));
        }
        let field = self.build_field(grid)?;

        let ini = &self.initial;
        let packet = GaussianPacket {
            x0: ini.x0,
            p0: ini.p0,
            sigma: ini.sigma,
        };
        packet.validate(&grid)?;
        let bloch = match (ini.kind.as_str(), ini.bloch) {
            ("unpolarized", None) => Vec3::zeros(),
            ("unpolarized", Some(_)) => {
                return Err(Error::config("initial.bloch", "an unpolarized state takes no Bloch vector"))
            }
            ("gaussian", Some(b)) => {
                let b = Vec3::from(b);
                if b.norm() > 1.0 + 1e-12 {
                    return Err(Error::config("initial.bloch", format!("Bloch vector length {} exceeds 1", b.norm())));
                }
                b
            }
            ("gaussian", None) => return Err(Error::config("initial.bloch", "gaussian state needs `initial.bloch`")),
            (other, _) => {
                return Err(Error::config(
                    "initial.kind",
                    format!("unknown initial state `{other}`; expected gaussian or unpolarized"),
                ))
            }
        };
        let pure_sigma_p = 0.5 / ini.sigma;
        if let Some(sp) = ini.sigma_p {
            if !(sp >= pure_sigma_p - 1e-12) {
                return Err(Error::config(
                    "initial.sigma_p",
                    format!("momentum width must satisfy sigma·sigma_p ≥ 1/2, i.e. sigma_p ≥ {pure_sigma_p}"),
                ));
            }
        }
        let sigma_p = ini.sigma_p.unwrap_or(pure_sigma_p);
        let spatially_pure = ini.sigma_p.is_none_or(|sp| (sp - pure_sigma_p).abs() < 1e-12);

        let t = &self.time;
        if !(t.t_end > 0.0) {
            return Err(Error::config("time.t_end", "t_end must be > 0"));
        }
        if t.output_every == 0 {
            return Err(Error::config("time.output_every", "output_every must be ≥ 1"));
        }
        let dt_bound = step_bound(nu, mass, grid.dx(), t.t_end);
        let dt = t.dt.unwrap_or(dt_bound);
        if !(dt > 0.0) {
            return Err(Error::config("time.dt", "dt must be > 0"));
        }
        let n_steps = (t.t_end / dt).round() as usize;
        if n_steps == 0 || ((n_steps as f64) * dt - t.t_end).abs() > 1e-9 * t.t_end {
            return Err(Error::config(
                "time.dt",
                format!("t_end = {} must be an integer multiple of dt = {dt}", t.t_end),
            ));
        }

        let trajectory_spin = if solvers.contains(&SolverKind::Trajectories) {
            if !spatially_pure {
                return Err(Error::config(
                    "initial.sigma_p",
                    "trajectories need a spatially pure packet; remove sigma_p",
                ));
            }
            if self.trajectories.n_traj < 2 {
                return Err(Error::config("trajectories.n_traj", "n_traj must be ≥ 2"));
            }
            Some(if ini.kind == "unpolarized" {
                InitialSpin::Unpolarized
            } else if (bloch.norm() - 1.0).abs() < 1e-10 {
                InitialSpin::Pure(spinor_from_bloch(&bloch))
            } else {
                return Err(Error::config("initial.bloch", "trajectories need |bloch| = 1 or an unpolarized state"));
            })
        } else {
            None
        };

        let semiclassical = if solvers.contains(&SolverKind::Semiclassical) {
            let sc = &self.semiclassical;
            let sigma_p = sc.sigma_p.unwrap_or(sigma_p);
            if !(sigma_p >= pure_sigma_p - 1e-12) {
                return Err(Error::config(
                    "semiclassical.sigma_p",
                    format!("momentum width must satisfy sigma·sigma_p ≥ 1/2, i.e. sigma_p ≥ {pure_sigma_p}"),
                ));
            }
            let max_grad = field.dn_at(0.0).iter().map(|v| v.norm_squared()).fold(0.0, f64::max);
            let p_max = sc
                .p_max
                .unwrap_or_else(|| 1.5 * suggested_p_max(ini.p0, sigma_p, nu, max_grad, t.t_end));
            let policy = suggested_p_max(ini.p0, sigma_p, nu, max_grad, t.t_end);
            if p_max < policy {
                return Err(Error::config(
                    "semiclassical.p_max",
                    format!("p_max = {p_max} is below p0 + 6√⟨p²⟩(T) = {policy}"),
                ));
            }
            // the transverse-spin mode is anti-diffusive; central differences keep it
            // damped by relaxation once dp exceeds max|n'|
            let dp = sc.dp.unwrap_or_else(|| (sigma_p / 5.0).max(1.05 * max_grad.sqrt()));
            let pgrid = MomentumGrid::symmetric(p_max, dp)?;
            let sdt = sc.dt.unwrap_or_else(|| {
                let bound = TransportSolver::cfl_bound(&field, &pgrid, mass, nu);
                let every = (dt * t.output_every as f64).min(t.t_end);
                // largest divisor of the output interval within the bound
                every / (every / bound).ceil()
            });
            TransportSolver::new(field.clone(), pgrid, mass, nu, sdt)?;
            Some(SemiclassicalSetup { pgrid, dt: sdt, sigma_p })
        } else {
            None
        };

        let gauge = if solvers.contains(&SolverKind::Gauge) || self.experiment == ExperimentKind::GaugeLimit {
            let g = &self.gauge;
            if g.nu_list.is_empty() {
                return Err(Error::config("gauge.nu_list", "gauge runs need a nonempty nu_list"));
            }
            if g.nu_list.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::config("gauge.nu_list", "nu_list must be strictly ascending"));
            }
            if g.nu_list.iter().any(|&v| !(v >= 0.0)) {
                return Err(Error::config("physics.nu", "decoherence rate must be ≥ 0 (gauge.nu_list)"));
            }
            if g.n_outputs < 2 {
                return Err(Error::config("gauge.n_outputs", "n_outputs must be ≥ 2"));
            }
            if !spatially_pure {
                return Err(Error::config("initial.sigma_p", "gauge runs need a spatially pure packet"));
            }
            Some(g.clone())
        } else {
            None
        };

        Ok(Scenario {
            experiment: self.experiment,
            solvers,
            grid,
            field,
            mass,
            nu,
            packet,
            bloch,
            sigma_p: ini.sigma_p.filter(|_| !spatially_pure),
            dt,
            n_steps,
            output_every: t.output_every,
            positivity_every: self.lindblad.positivity_every,
            trajectory_spin,
            n_traj: self.trajectories.n_traj,
            base_seed: self.trajectories.base_seed,
            semiclassical,
            snapshots: self.semiclassical.snapshots.clone(),
            gauge,
        })
    }
}

/// Shipped presets, one per experiment.
pub const PRESETS: [(&str, &str); 6] = [
    ("constant_field", include_str!("../presets/constant_field.toml")),
    ("force_balance", include_str!("../presets/force_balance.toml")),
    ("spin_separation", include_str!("../presets/spin_separation.toml")),
    ("diffusion", include_str!("../presets/diffusion.toml")),
    ("flux_source", include_str!("../presets/flux_source.toml")),
    ("gauge_limit", include_str!("../presets/gauge_limit.toml")),
];

/// Text of a shipped preset, by name.
pub fn preset(name: &str) -> Option<&'static str> {
    PRESETS.iter().find(|(n, _)| *n == name).map(|(_, text)| *text)
}


#[derive(Clone, Debug)]
pub struct SemiclassicalSetup {
    pub pgrid: MomentumGrid,
    pub dt: f64,
    pub sigma_p: f64,
}

/// A validated configuration, ready for the solvers.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub experiment: ExperimentKind,
    pub solvers: Vec<SolverKind>,
    pub grid: Grid,
    pub field: AxisField,
    pub mass: f64,
    pub nu: f64,
    pub packet: GaussianPacket,
    pub bloch: Vec3,
    /// Set for partially coherent packets only.
    pub sigma_p: Option<f64>,
    pub dt: f64,
    pub n_steps: usize,
    pub output_every: usize,
    pub positivity_every: usize,
    pub trajectory_spin: Option<InitialSpin>,
    pub n_traj: usize,
    pub base_seed: u64,
    pub semiclassical: Option<SemiclassicalSetup>,
    pub snapshots: Option<Vec<f64>>,
    pub gauge: Option<GaugeSection>,
}

impl Scenario {
    pub fn t_end(&self) -> f64 {
        self.dt * self.n_steps as f64
    }

    pub fn has(&self, s: SolverKind) -> bool {
        self.solvers.contains(&s)
    }

    pub fn spin(&self) -> Spin2 {
        spin_from_bloch(&self.bloch)
    }

    /// Initial density matrix with Bloch vector `bloch`.
    pub fn density_matrix_with(&self, bloch: &Vec3) -> Result<DensityMatrix> {
        let spin = spin_from_bloch(bloch);
        match self.sigma_p {
            Some(sp) => init_partially_coherent(self.grid, self.packet, sp, &spin),
            None => init_with_spin(self.grid, self.packet, &spin),
        }
    }

    pub fn density_matrix(&self) -> Result<DensityMatrix> {
        self.density_matrix_with(&self.bloch)
    }

    /// Phase-space initial state matching the density matrix's Wigner function.
    pub fn phase_space_state(&self) -> Result<PhaseSpaceState> {
        let sc = self
            .semiclassical
            .as_ref()
            .ok_or_else(|| Error::Internal("semiclassical solver not configured".into()))?;
        Ok(PhaseSpaceState::gaussian(
            self.grid,
            sc.pgrid,
            self.packet.x0,
            self.packet.p0,
            self.packet.sigma,
            sc.sigma_p,
            self.bloch,
        ))
    }

    /// Output times of the density-matrix run.
    pub fn output_times(&self) -> Vec<f64> {
        let mut t: Vec<f64> = (0..=self.n_steps)
            .step_by(self.output_every)
            .map(|k| k as f64 * self.dt)
            .collect();
        if !self.n_steps.is_multiple_of(self.output_every) {
            t.push(self.t_end());
        }
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
experiment = "force_balance"
solver = "lindblad"

[grid]
n = 64
length = 32.0

[physics]
mass = 1.0
nu = 1.0

[field]
kind = "helix"
winding = 2

[initial]
kind = "gaussian"
sigma = 2.0
bloch = [0.0, 0.0, 1.0]

[time]
t_end = 1.0
dt = 0.01
output_every = 10
"#;

    fn with(replace: &str, by: &str) -> String {
        assert!(BASE.contains(replace), "{replace}");
        BASE.replacen(replace, by, 1)
    }

    #[test]
    fn base_config_validates() {
        let cfg = RunConfig::parse(BASE).unwrap();
        let s = cfg.validate().unwrap();
        assert_eq!(s.n_steps, 100);
        assert_eq!(s.output_times().len(), 11);
        assert_eq!(s.solvers, vec![SolverKind::Lindblad]);
        let round = RunConfig::parse(&cfg.to_toml()).unwrap();
        assert_eq!(round.to_toml(), cfg.to_toml());
    }

    #[test]
    fn negative_rate_names_the_constraint() {
        let err = RunConfig::parse(&with("nu = 1.0", "nu = -1")).unwrap().validate().unwrap_err();
        assert!(err.to_string().contains("decoherence rate must be ≥ 0"));
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn unknown_key_is_reported_with_its_line() {
        let text = with("mass = 1.0", "mas = 1");
        match RunConfig::parse(&text).unwrap_err() {
            Error::Parse { line, message } => {
                assert!(message.contains("mas"), "{message}");
                let expected = text.lines().position(|l| l.starts_with("mas")).unwrap() + 1;
                assert_eq!(line, expected);
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn cross_field_constraints() {
        let check = |text: String, constraint: &str| {
            let err = RunConfig::parse(&text).unwrap().validate().unwrap_err();
            assert!(err.to_string().contains(constraint), "{err}");
        };
        check(with("winding = 2", "wavenumber = 0.3"), "field");
        check(with("sigma = 2.0", "sigma = 0.5"), "initial.sigma_resolvable");
        check(with("dt = 0.01", "dt = 0.03"), "time.dt");
        check(with("winding = 2", "winding = 2\nwidth = 1.0"), "field.kind");
        check(with("bloch = [0.0, 0.0, 1.0]", "bloch = [0.0, 1.0, 1.0]"), "initial.bloch");
        check(
            with("solver = \"lindblad\"", "solver = \"gauge\"").replace("[time]", "[gauge]\nnu_list = [4.0, 2.0]\n\n[time]"),
            "gauge.nu_list",
        );
        check(
            with("solver = \"lindblad\"", "solver = \"semiclassical\"")
                .replace("[time]", "[semiclassical]\ndt = 1.0\n\n[time]"),
            "semiclassical.cfl",
        );
        check(with("sigma = 2.0", "sigma = 2.0\nsigma_p = 0.1"), "initial.sigma_p");
        check(with("solver = \"lindblad\"", "solver = \"magic\""), "solver");
    }

    #[test]
    fn presets_validate() {
        for (name, text) in PRESETS {
            let cfg = RunConfig::parse(text).unwrap_or_else(|e| panic!("{name}: {e}"));
            cfg.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(cfg.experiment.name(), name);
        }
        let s = RunConfig::parse(preset("spin_separation").unwrap()).unwrap().validate().unwrap();
        assert_eq!(s.solvers.len(), 4);
        assert!(matches!(s.field.kind(), FieldKind::Helix { .. }));
        assert!(matches!(s.trajectory_spin, Some(InitialSpin::Unpolarized)));
    }

    #[test]
    fn solver_lists() {
        assert_eq!(parse_solvers("all").unwrap().len(), 4);
        assert_eq!(
            parse_solvers("trajectories, lindblad").unwrap(),
            vec![SolverKind::Lindblad, SolverKind::Trajectories]
        );
        assert!(parse_solvers("").is_err());
    }

    #[test]
    fn bloch_spinors() {
        for b in [Vec3::z(), -Vec3::z(), Vec3::x(), Vec3::new(0.6, 0.0, 0.8)] {
            let chi = spinor_from_bloch(&b);
            let rho = chi * chi.adjoint();
            let back = crate::lindblad::pauli_vector(&rho);
            for c in 0..3 {
                assert!((back[c].re - b[c]).abs() < 1e-12);
            }
        }
    }
}
