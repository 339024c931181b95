//! Measurement-axis fields `n(x)` and the local spin geometry derived from them.
//!
//! An [`AxisField`] is a unit 3-vector per grid point (optionally rigidly
//! rotating in time). [`SpinGeometry`] holds everything the solvers need at
//! one instant: the pointer spinors `|±n(x)⟩`, projectors, the force field
//! `(∂ₓn)×n`, the emergent vector potentials and the scalar potentials.
//!
//! Spinor gauge: with spherical angles `(θ, φ)` of `n`,
//! `|n⟩ = (cos θ/2, e^{iφ} sin θ/2)` and `|-n⟩ = (-e^{-iφ} sin θ/2, cos θ/2)`.
//! Written in Cartesian components this is
//! `|n⟩ = (1 + n₃, n₁ + i n₂) / √(2(1 + n₃))`, which is what the code uses; it
//! is regular everywhere except the south pole `n = -ẑ`.

use std::f64::consts::PI;

use nalgebra::{Matrix2, Vector2, Vector3};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::grid::{Grid, Spectral};

pub type Vec3 = Vector3<f64>;
pub type Spin2 = Matrix2<Complex64>;
pub type Spinor = Vector2<Complex64>;

/// Distance from `-ẑ` below which the spinor gauge is considered singular.
pub const SOUTH_POLE_TOLERANCE: f64 = 1e-6;

const C0: Complex64 = Complex64 { re: 0.0, im: 0.0 };
const C1: Complex64 = Complex64 { re: 1.0, im: 0.0 };
const CI: Complex64 = Complex64 { re: 0.0, im: 1.0 };

/// Pauli matrices σ₁, σ₂, σ₃ in the laboratory basis.
pub fn pauli() -> [Spin2; 3] {
    [
        Spin2::new(C0, C1, C1, C0),
        Spin2::new(C0, -CI, CI, C0),
        Spin2::new(C1, C0, C0, -C1),
    ]
}

/// `v·σ`.
pub fn sigma_dot(v: &Vec3) -> Spin2 {
    Spin2::new(
        Complex64::new(v.z, 0.0),
        Complex64::new(v.x, -v.y),
        Complex64::new(v.x, v.y),
        Complex64::new(-v.z, 0.0),
    )
}

/// Projector pair `P± = (1 ± n·σ)/2`.
pub fn projectors(n: &Vec3) -> [Spin2; 2] {
    let half = Spin2::identity() * Complex64::new(0.5, 0.0);
    let s = sigma_dot(n) * Complex64::new(0.5, 0.0);
    [half + s, half - s]
}

/// Field family with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum FieldKind {
    Constant { axis: Vec3 },
    /// `n(x) = (cos qx, sin qx, 0)`.
    Helix { wavenumber: f64 },
    /// Polar angle `θ(x) = π/2·(1 + tanh((x - center)/width))` in the xz-plane.
    DomainWall { center: f64, width: f64 },
    /// Tabulated vectors, one per grid point.
    Sampled { samples: Vec<Vec3> },
}

impl FieldKind {
    pub fn name(&self) -> &'static str {
        match self {
            FieldKind::Constant { .. } => "constant",
            FieldKind::Helix { .. } => "helix",
            FieldKind::DomainWall { .. } => "domain_wall",
            FieldKind::Sampled { .. } => "sampled",
        }
    }
}

/// Rigid rotation of the whole field about `axis` at angular rate `rate`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation {
    pub rate: f64,
    pub axis: Vec3,
}

impl Rotation {
    pub fn new(rate: f64, axis: Vec3) -> Result<Self> {
        let norm = axis.norm();
        if !(norm > 1e-12) {
            return Err(Error::config("field.rotation_axis", "rotation axis must be nonzero"));
        }
        Ok(Rotation {
            rate,
            axis: axis / norm,
        })
    }

    fn rotate(&self, v: &Vec3, t: f64) -> Vec3 {
        let angle = self.rate * t;
        let (s, c) = angle.sin_cos();
        let a = &self.axis;
        v * c + a.cross(v) * s + a * (a.dot(v) * (1.0 - c))
    }
}

/// Unit-vector field sampled on a periodic grid, with first and second
/// spatial derivatives.
#[derive(Clone, Debug)]
pub struct AxisField {
    grid: Grid,
    kind: FieldKind,
    rotation: Option<Rotation>,
    n: Vec<Vec3>,
    dn: Vec<Vec3>,
    d2n: Vec<Vec3>,
}

/// Build a field of the given family on `grid`.
pub fn build_axis_field(kind: FieldKind, grid: Grid) -> Result<AxisField> {
    AxisField::new(kind, grid, None)
}

impl AxisField {
    pub fn new(kind: FieldKind, grid: Grid, rotation: Option<Rotation>) -> Result<Self> {
        let xs = grid.positions();
        let (n, dn, d2n) = match &kind {
            FieldKind::Constant { axis } => {
                let norm = axis.norm();
                if norm < 1e-6 {
                    return Err(Error::Validation {
                        index: 0,
                        message: format!("constant axis has norm {norm:.3e} < 1e-6"),
                    });
                }
                let a = axis / norm;
                let zero = Vec3::zeros();
                (vec![a; grid.n()], vec![zero; grid.n()], vec![zero; grid.n()])
            }
            FieldKind::Helix { wavenumber } => {
                let q = *wavenumber;
                let winding = q * grid.length() / (2.0 * PI);
                let nearest = winding.round();
                if (winding - nearest).abs() > 1e-9 {
                    let lo = winding.floor() * grid.dk();
                    let hi = winding.ceil() * grid.dk();
                    let best = nearest * grid.dk();
                    return Err(Error::config(
                        "field.helix_periodicity",
                        format!(
                            "helix wavenumber {q} is not a multiple of 2π/L = {}; nearest \
                             admissible q = {best} (neighbours {lo}, {hi})",
                            grid.dk()
                        ),
                    ));
                }
                let n: Vec<Vec3> = xs
                    .iter()
                    .map(|x| Vec3::new((q * x).cos(), (q * x).sin(), 0.0))
                    .collect();
                let (dn, d2n) = spectral_derivatives(&grid, &n);
                (n, dn, d2n)
            }
            FieldKind::DomainWall { center, width } => {
                if !(*width > 0.0) {
                    return Err(Error::config(
                        "field.wall_width",
                        format!("domain wall width must be > 0, got {width}"),
                    ));
                }
                // Not periodic, so derivatives come from the chain rule.
                let mut n = Vec::with_capacity(grid.n());
                let mut dn = Vec::with_capacity(grid.n());
                let mut d2n = Vec::with_capacity(grid.n());
                for x in &xs {
                    let u = (x - center) / width;
                    let th = 0.5 * PI * (1.0 + u.tanh());
                    let sech2 = 1.0 / u.cosh().powi(2);
                    let th1 = 0.5 * PI * sech2 / width;
                    let th2 = -PI * sech2 * u.tanh() / (width * width);
                    let (s, c) = th.sin_cos();
                    let radial = Vec3::new(s, 0.0, c);
                    let tangent = Vec3::new(c, 0.0, -s);
                    n.push(radial);
                    dn.push(tangent * th1);
                    d2n.push(tangent * th2 - radial * (th1 * th1));
                }
                (n, dn, d2n)
            }
            FieldKind::Sampled { samples } => {
                if samples.len() != grid.n() {
                    return Err(Error::config(
                        "field.samples",
                        format!("expected {} samples, got {}", grid.n(), samples.len()),
                    ));
                }
                let mut n = Vec::with_capacity(grid.n());
                for (index, v) in samples.iter().enumerate() {
                    let norm = v.norm();
                    if !(norm >= 1e-6) {
                        return Err(Error::Validation {
                            index,
                            message: format!("sample has norm {norm:.3e} < 1e-6"),
                        });
                    }
                    n.push(v / norm);
                }
                let (dn, d2n) = spectral_derivatives(&grid, &n);
                (n, dn, d2n)
            }
        };
        let kind = match kind {
            FieldKind::Sampled { .. } => FieldKind::Sampled { samples: n.clone() },
            other => other,
        };
        Ok(AxisField {
            grid,
            kind,
            rotation,
            n,
            dn,
            d2n,
        })
    }

    /// Parse a whitespace-separated `x n1 n2 n3` table (one row per grid point).
    pub fn from_table(text: &str, grid: Grid) -> Result<Self> {
        let mut samples = Vec::new();
        let mut xs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<f64> = line
                .split_whitespace()
                .map(|c| c.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    line: lineno + 1,
                    message: format!("bad number: {e}"),
                })?;
            if cols.len() != 4 {
                return Err(Error::Parse {
                    line: lineno + 1,
                    message: format!("expected 4 columns (x n1 n2 n3), got {}", cols.len()),
                });
            }
            xs.push(cols[0]);
            samples.push(Vec3::new(cols[1], cols[2], cols[3]));
        }
        for (i, w) in xs.windows(2).enumerate() {
            if ((w[1] - w[0]) - grid.dx()).abs() > 1e-9 * grid.length() {
                return Err(Error::Validation {
                    index: i + 1,
                    message: format!(
                        "row spacing {} does not match grid spacing {}",
                        w[1] - w[0],
                        grid.dx()
                    ),
                });
            }
        }
        AxisField::new(FieldKind::Sampled { samples }, grid, None)
    }

    pub fn with_rotation(mut self, rotation: Rotation) -> Self {
        self.rotation = Some(rotation);
        self
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn kind(&self) -> &FieldKind {
        &self.kind
    }

    pub fn rotation(&self) -> Option<&Rotation> {
        self.rotation.as_ref()
    }

    pub fn is_time_dependent(&self) -> bool {
        self.rotation.is_some_and(|r| r.rate != 0.0)
    }

    fn rotated(&self, v: &[Vec3], t: f64) -> Vec<Vec3> {
        match &self.rotation {
            Some(r) if r.rate != 0.0 && t != 0.0 => v.iter().map(|u| r.rotate(u, t)).collect(),
            _ => v.to_vec(),
        }
    }

    /// `n(x_i, t)`.
    pub fn n_at(&self, t: f64) -> Vec<Vec3> {
        self.rotated(&self.n, t)
    }

    /// `∂ₓn(x_i, t)`.
    pub fn dn_at(&self, t: f64) -> Vec<Vec3> {
        self.rotated(&self.dn, t)
    }

    /// `∂ₓ²n(x_i, t)`.
    pub fn d2n_at(&self, t: f64) -> Vec<Vec3> {
        self.rotated(&self.d2n, t)
    }

    /// `∂ₜn(x_i, t) = Ω (â × n)`; zero without rotation.
    pub fn dn_dt_at(&self, t: f64) -> Vec<Vec3> {
        match &self.rotation {
            Some(r) => self
                .n_at(t)
                .iter()
                .map(|v| r.axis.cross(v) * r.rate)
                .collect(),
            None => vec![Vec3::zeros(); self.grid.n()],
        }
    }

    /// Projector pairs at every grid point at time `t`.
    pub fn projectors_at(&self, t: f64) -> Vec<[Spin2; 2]> {
        self.n_at(t).iter().map(projectors).collect()
    }

    /// Evaluate the field at an arbitrary position (trigonometric interpolation
    /// for sampled fields).
    pub fn evaluate(&self, x: f64, t: f64) -> Vec3 {
        let v = match &self.kind {
            FieldKind::Constant { axis } => axis.normalize(),
            FieldKind::Helix { wavenumber } => {
                Vec3::new((wavenumber * x).cos(), (wavenumber * x).sin(), 0.0)
            }
            FieldKind::DomainWall { center, width } => {
                let th = 0.5 * PI * (1.0 + ((x - center) / width).tanh());
                Vec3::new(th.sin(), 0.0, th.cos())
            }
            FieldKind::Sampled { samples } => {
                trig_interpolate(&self.grid, samples, x).normalize()
            }
        };
        match &self.rotation {
            Some(r) => r.rotate(&v, t),
            None => v,
        }
    }
}

fn spectral_derivatives(grid: &Grid, n: &[Vec3]) -> (Vec<Vec3>, Vec<Vec3>) {
    let spec = Spectral::new(*grid);
    let mut d1 = vec![Vec3::zeros(); grid.n()];
    let mut d2 = vec![Vec3::zeros(); grid.n()];
    for c in 0..3 {
        let comp: Vec<f64> = n.iter().map(|v| v[c]).collect();
        let a = spec.derivative_order(&comp, 1);
        let b = spec.derivative_order(&comp, 2);
        for i in 0..grid.n() {
            d1[i][c] = a[i];
            d2[i][c] = b[i];
        }
    }
    (d1, d2)
}

fn trig_interpolate(grid: &Grid, samples: &[Vec3], x: f64) -> Vec3 {
    let spec = Spectral::new(*grid);
    let n = grid.n();
    let mut out = Vec3::zeros();
    let k = spec.k();
    for c in 0..3 {
        let mut buf: Vec<Complex64> = samples.iter().map(|v| Complex64::new(v[c], 0.0)).collect();
        spec.forward(&mut buf);
        let mut acc = 0.0;
        for (m, coef) in buf.iter().enumerate() {
            // split the Nyquist mode symmetrically so the interpolant is real
            let w = if n.is_multiple_of(2) && m == n / 2 { 0.5 } else { 1.0 };
            let phase = Complex64::from_polar(1.0, k[m] * (x - grid.x_min()));
            acc += w * (coef * phase).re;
            if w == 0.5 {
                acc += w * (coef * phase.conj()).re;
            }
        }
        out[c] = acc / n as f64;
    }
    out
}

/// Pointer spinor `|n⟩` and its derivative given `∂n` (chain rule through the
/// Cartesian gauge formula). Returns `(|n⟩, ∂|n⟩, |-n⟩, ∂|-n⟩)`.
fn spinor_pair(n: &Vec3, dn: &Vec3) -> (Spinor, Spinor, Spinor, Spinor) {
    let c = 1.0 + n.z;
    let norm_re = (2.0 * c).powf(-0.5);
    let norm = Complex64::new(norm_re, 0.0);
    let dnorm = Complex64::new(-norm_re * dn.z / (2.0 * c), 0.0);
    let up = Spinor::new(Complex64::new(c, 0.0), Complex64::new(n.x, n.y));
    let dup = Spinor::new(Complex64::new(dn.z, 0.0), Complex64::new(dn.x, dn.y));
    let dw = Spinor::new(Complex64::new(-n.x, n.y), Complex64::new(c, 0.0));
    let ddw = Spinor::new(Complex64::new(-dn.x, dn.y), Complex64::new(dn.z, 0.0));
    (
        up * norm,
        up * dnorm + dup * norm,
        dw * norm,
        dw * dnorm + ddw * norm,
    )
}

/// Spinor with Bloch vector `b` (`|b| = 1`), in the pointer-basis convention.
pub fn spinor_from_bloch(b: &Vec3) -> Spinor {
    let th = b.z.clamp(-1.0, 1.0).acos();
    let ph = b.y.atan2(b.x);
    Spinor::new(
        Complex64::new((th / 2.0).cos(), 0.0),
        Complex64::from_polar((th / 2.0).sin(), ph),
    )
}

/// Local phase transformation of the pointer basis: `|±n⟩ → e^{iχ±}|±n⟩`.
#[derive(Clone, Debug)]
pub struct GaugePhase {
    pub plus: Vec<f64>,
    pub minus: Vec<f64>,
}

impl GaugePhase {
    /// Same phase function applied to both spinors.
    pub fn uniform(grid: &Grid, chi: impl Fn(f64) -> f64) -> Self {
        let v: Vec<f64> = grid.positions().into_iter().map(chi).collect();
        GaugePhase {
            plus: v.clone(),
            minus: v,
        }
    }
}

/// Spin geometry of an axis field at one instant.
#[derive(Clone, Debug)]
pub struct SpinGeometry {
    pub time: f64,
    pub mass: f64,
    pub n: Vec<Vec3>,
    pub spinor_plus: Vec<Spinor>,
    pub spinor_minus: Vec<Spinor>,
    pub projector_plus: Vec<Spin2>,
    pub projector_minus: Vec<Spin2>,
    /// `(∂ₓn) × n`.
    pub force_field: Vec<Vec3>,
    pub a_plus: Vec<f64>,
    pub a_minus: Vec<f64>,
    pub a_pm: Vec<Complex64>,
    /// `|A₊₋|² / 2m`.
    pub grav_potential: Vec<f64>,
    pub phi_plus: Vec<f64>,
    pub phi_minus: Vec<f64>,
}

/// Geometry at `t = 0` in the default gauge.
pub fn spin_geometry(field: &AxisField, mass: f64) -> Result<SpinGeometry> {
    SpinGeometry::at(field, mass, 0.0, None)
}

impl SpinGeometry {
    pub fn at(
        field: &AxisField,
        mass: f64,
        t: f64,
        gauge: Option<&GaugePhase>,
    ) -> Result<Self> {
        if !(mass > 0.0) {
            return Err(Error::config("physics.mass", "mass must be > 0"));
        }
        let grid = field.grid();
        let n = field.n_at(t);
        let dn = field.dn_at(t);
        let dt = field.dn_dt_at(t);
        let south = Vec3::new(0.0, 0.0, -1.0);
        for (index, v) in n.iter().enumerate() {
            let distance = (v - south).norm();
            if distance < SOUTH_POLE_TOLERANCE {
                return Err(Error::GaugeSingular { index, distance });
            }
        }
        let gauge_derivs = gauge.map(|g| {
            let spec = Spectral::new(*grid);
            (spec.derivative(&g.plus), spec.derivative(&g.minus))
        });

        let size = grid.n();
        let mut geo = SpinGeometry {
            time: t,
            mass,
            n: n.clone(),
            spinor_plus: Vec::with_capacity(size),
            spinor_minus: Vec::with_capacity(size),
            projector_plus: Vec::with_capacity(size),
            projector_minus: Vec::with_capacity(size),
            force_field: Vec::with_capacity(size),
            a_plus: Vec::with_capacity(size),
            a_minus: Vec::with_capacity(size),
            a_pm: Vec::with_capacity(size),
            grav_potential: Vec::with_capacity(size),
            phi_plus: Vec::with_capacity(size),
            phi_minus: Vec::with_capacity(size),
        };
        for i in 0..size {
            let (mut up, mut dup, mut dw, mut ddw) = spinor_pair(&n[i], &dn[i]);
            let (_, mut tup, _, mut tdw) = spinor_pair(&n[i], &dt[i]);
            if let (Some(g), Some((gp, gm))) = (gauge, &gauge_derivs) {
                let ep = Complex64::from_polar(1.0, g.plus[i]);
                let em = Complex64::from_polar(1.0, g.minus[i]);
                dup = (dup + up * Complex64::new(0.0, gp[i])) * ep;
                ddw = (ddw + dw * Complex64::new(0.0, gm[i])) * em;
                up *= ep;
                dw *= em;
                tup *= ep;
                tdw *= em;
            }
            let a_plus = (-CI * up.dotc(&dup)).re;
            let a_minus = (-CI * dw.dotc(&ddw)).re;
            let a_pm = -CI * up.dotc(&ddw);
            let [pp, pm] = projectors(&n[i]);
            geo.force_field.push(dn[i].cross(&n[i]));
            geo.a_plus.push(a_plus);
            geo.a_minus.push(a_minus);
            geo.grav_potential.push(a_pm.norm_sqr() / (2.0 * mass));
            geo.a_pm.push(a_pm);
            geo.phi_plus.push((-CI * up.dotc(&tup)).re);
            geo.phi_minus.push((-CI * dw.dotc(&tdw)).re);
            geo.spinor_plus.push(up);
            geo.spinor_minus.push(dw);
            geo.projector_plus.push(pp);
            geo.projector_minus.push(pm);
        }
        Ok(geo)
    }

    pub fn len(&self) -> usize {
        self.n.len()
    }

    pub fn is_empty(&self) -> bool {
        self.n.is_empty()
    }

    /// Vector potential for sector `s = ±1`.
    pub fn a_sector(&self, sign: i8) -> &[f64] {
        if sign > 0 {
            &self.a_plus
        } else {
            &self.a_minus
        }
    }

    pub fn phi_sector(&self, sign: i8) -> &[f64] {
        if sign > 0 {
            &self.phi_plus
        } else {
            &self.phi_minus
        }
    }

    pub fn spinor(&self, sign: i8) -> &[Spinor] {
        if sign > 0 {
            &self.spinor_plus
        } else {
            &self.spinor_minus
        }
    }
}
