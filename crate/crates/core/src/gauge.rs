//! Strong-decoherence limit: local superselection sectors `|±n(x)⟩` and the
//! effective charged dynamics inside each sector,
//!
//! ```text
//! H_s = (p + A_s)²/2m + |A₊₋|²/2m + φ_s,   s = ±1.
//! ```
//!
//! In one dimension the vector potential can be removed exactly: with
//! `A_s = ā + ∂ₓχ` (`ā` the mean, `χ` periodic), `p + A_s = e^{-iχ}(p + ā)e^{iχ}`,
//! so the kinetic factor is applied spectrally in the frame `e^{iχ}φ`. The
//! scalar terms are split off symmetrically (Strang).

use std::borrow::Cow;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::diagnostics::linear_fit;
use crate::error::{Error, Result};
use crate::fields::{spinor_from_bloch, AxisField, GaugePhase, SpinGeometry, Spinor, Vec3};
use crate::grid::{transpose_into, Grid, Spectral};
use crate::lindblad::{first_index_diagonal, step_bound, ConservationMonitor, DensityMatrix, GaussianPacket, LindbladSolver};

/// Sector content: a wavefunction (`N`) or a density matrix (`N × N`).
#[derive(Clone, Debug, PartialEq)]
pub enum SectorData {
    Wave(Vec<Complex64>),
    Density(Vec<Complex64>),
}

/// Amplitude or density of one sector, `s = ±1`.
#[derive(Clone, Debug, PartialEq)]
pub struct SectorState {
    pub sign: i8,
    pub grid: Grid,
    pub data: SectorData,
}

impl SectorState {
    pub fn wave(sign: i8, grid: Grid, phi: Vec<Complex64>) -> Self {
        SectorState {
            sign,
            grid,
            data: SectorData::Wave(phi),
        }
    }

    /// Diagonal `ϱ_s(x|x)`.
    pub fn density(&self) -> Vec<f64> {
        let n = self.grid.n();
        match &self.data {
            SectorData::Wave(phi) => phi.iter().map(|z| z.norm_sqr()).collect(),
            SectorData::Density(rho) => (0..n).map(|i| rho[i * n + i].re).collect(),
        }
    }

    /// `tr ϱ_s`.
    pub fn norm(&self) -> f64 {
        self.density().iter().sum::<f64>() * self.grid.dx()
    }

    pub fn mean_x(&self) -> f64 {
        let d = self.density();
        let w: f64 = d.iter().sum();
        self.grid.positions().iter().zip(&d).map(|(x, v)| x * v).sum::<f64>() / w
    }

    /// `tr[(p + A)ϱ_s]`, unnormalized, with spectral `p`.
    pub fn kinetic_momentum(&self, spec: &Spectral, a: &[f64]) -> f64 {
        let dx = self.grid.dx();
        let kp: Vec<Complex64> = spec.k_odd().iter().map(|&k| Complex64::new(k, 0.0)).collect();
        let (pdiag, dens): (Vec<f64>, Vec<f64>) = match &self.data {
            SectorData::Wave(phi) => {
                let mut b = phi.clone();
                spec.apply_multiplier(&mut b, &kp);
                (b.iter().zip(phi).map(|(p, f)| (p * f.conj()).re).collect(), self.density())
            }
            SectorData::Density(rho) => (
                first_index_diagonal(spec, rho, &kp).iter().map(|z| z.re).collect(),
                self.density(),
            ),
        };
        pdiag.iter().zip(&dens).zip(a).map(|((p, d), a)| p + a * d).sum::<f64>() * dx
    }

    /// Max `|ϱ_s(i,j) - ϱ_s(j,i)*|`; zero for wavefunctions.
    pub fn hermiticity_error(&self) -> f64 {
        let n = self.grid.n();
        match &self.data {
            SectorData::Wave(_) => 0.0,
            SectorData::Density(r) => (0..n)
                .flat_map(|i| (0..n).map(move |j| (i, j)))
                .map(|(i, j)| (r[i * n + j] - r[j * n + i].conj()).norm())
                .fold(0.0, f64::max),
        }
    }
}

/// Result of projecting a density matrix onto local sectors.
#[derive(Clone, Debug)]
pub struct SectorProjection {
    pub plus: SectorState,
    pub minus: SectorState,
    /// `Δx·‖⟨n(xᵢ)|ϱ(xᵢ|xⱼ)|-n(xⱼ)⟩‖_F`, the discarded cross terms.
    pub coherence_norm: f64,
}

/// `ϱ_s(i,j) = ⟨u_s(i)|ϱ(i,j)|u_s(j)⟩` for arbitrary local spinor pairs.
pub fn project_onto(rho: &DensityMatrix, plus: &[Spinor], minus: &[Spinor]) -> SectorProjection {
    let grid = *rho.grid();
    let n = grid.n();
    let rows: Vec<(Vec<Complex64>, Vec<Complex64>, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rp = Vec::with_capacity(n);
            let mut rm = Vec::with_capacity(n);
            let mut cross = 0.0;
            for j in 0..n {
                let b = rho.block(i, j);
                rp.push((plus[i].adjoint() * b * plus[j])[(0, 0)]);
                rm.push((minus[i].adjoint() * b * minus[j])[(0, 0)]);
                cross += (plus[i].adjoint() * b * minus[j])[(0, 0)].norm_sqr();
            }
            (rp, rm, cross)
        })
        .collect();
    let mut p = Vec::with_capacity(n * n);
    let mut m = Vec::with_capacity(n * n);
    let mut cross = 0.0;
    for (rp, rm, c) in rows {
        p.extend(rp);
        m.extend(rm);
        cross += c;
    }
    SectorProjection {
        plus: SectorState {
            sign: 1,
            grid,
            data: SectorData::Density(p),
        },
        minus: SectorState {
            sign: -1,
            grid,
            data: SectorData::Density(m),
        },
        coherence_norm: cross.sqrt() * grid.dx(),
    }
}

/// Sectors of the local pointer basis `|±n(x)⟩`.
pub fn project_sectors(rho: &DensityMatrix, geometry: &SpinGeometry) -> SectorProjection {
    project_onto(rho, &geometry.spinor_plus, &geometry.spinor_minus)
}

/// Sectors of a fixed spin axis `±â`.
pub fn project_on_axis(rho: &DensityMatrix, axis: &Vec3) -> SectorProjection {
    let a = axis.normalize();
    let n = rho.grid().n();
    project_onto(rho, &vec![spinor_from_bloch(&a); n], &vec![spinor_from_bloch(&-a); n])
}

/// Pointwise scalar potential of sector `s`: `|A₊₋|²/2m + φ_s`.
///
/// The first term is the same vector for both sectors.
pub fn sector_potential(geometry: &SpinGeometry, sign: i8) -> Vec<f64> {
    geometry
        .grav_potential
        .iter()
        .zip(geometry.phi_sector(sign))
        .map(|(g, p)| g + p)
        .collect()
}

/// One sector observation.
#[derive(Clone, Debug, Serialize)]
pub struct SectorRecord {
    pub t: f64,
    pub sector: i8,
    pub norm: f64,
    pub mean_x: f64,
    pub kinetic_momentum: f64,
}

/// Propagator for the effective sector Hamiltonians.
#[derive(Clone, Debug)]
pub struct EffectiveSolver {
    field: AxisField,
    spectral: Spectral,
    mass: f64,
    dt: f64,
    gauge: Option<GaugePhase>,
    static_geometry: Option<SpinGeometry>,
    /// Drop `|A₊₋|²/2m` (diagnostic use only).
    pub without_grav: bool,
}

impl EffectiveSolver {
    pub fn new(field: AxisField, mass: f64, dt: f64, gauge: Option<GaugePhase>) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::config("time.dt", "time step must be > 0"));
        }
        let static_geometry = if field.is_time_dependent() {
            // still reject singular fields up front
            SpinGeometry::at(&field, mass, 0.0, gauge.as_ref())?;
            None
        } else {
            Some(SpinGeometry::at(&field, mass, 0.0, gauge.as_ref())?)
        };
        Ok(EffectiveSolver {
            spectral: Spectral::new(*field.grid()),
            field,
            mass,
            dt,
            gauge,
            static_geometry,
            without_grav: false,
        })
    }

    pub fn spectral(&self) -> &Spectral {
        &self.spectral
    }

    pub fn geometry(&self, t: f64) -> Result<Cow<'_, SpinGeometry>> {
        match &self.static_geometry {
            Some(g) => Ok(Cow::Borrowed(g)),
            None => Ok(Cow::Owned(SpinGeometry::at(&self.field, self.mass, t, self.gauge.as_ref())?)),
        }
    }

    /// `e^{-iH_sΔt}` applied to one vector, with the geometry frozen at `geo`.
    fn propagate(&self, geo: &SpinGeometry, sign: i8, v: &mut [Complex64]) {
        let a = geo.a_sector(sign);
        let mean = a.iter().sum::<f64>() / a.len() as f64;
        let fluct: Vec<f64> = a.iter().map(|x| x - mean).collect();
        let chi = self.spectral.antiderivative_zero_mean(&fluct);
        let mut pot = sector_potential(geo, sign);
        if self.without_grav {
            pot.iter_mut().zip(&geo.grav_potential).for_each(|(p, g)| *p -= g);
        }
        let h = 0.5 * self.dt;
        for ((z, u), c) in v.iter_mut().zip(&pot).zip(&chi) {
            *z *= Complex64::from_polar(1.0, c - u * h);
        }
        let mult: Vec<Complex64> = self
            .spectral
            .k()
            .iter()
            .map(|&k| Complex64::from_polar(1.0, -(k + mean).powi(2) * self.dt / (2.0 * self.mass)))
            .collect();
        self.spectral.apply_multiplier(v, &mult);
        for ((z, u), c) in v.iter_mut().zip(&pot).zip(&chi) {
            *z *= Complex64::from_polar(1.0, -c - u * h);
        }
    }

    /// One step from `t` (geometry at the midpoint).
    pub fn step(&self, state: &mut SectorState, t: f64) -> Result<()> {
        let geo = self.geometry(t + 0.5 * self.dt)?;
        let n = state.grid.n();
        match &mut state.data {
            SectorData::Wave(phi) => self.propagate(&geo, state.sign, phi),
            SectorData::Density(rho) => {
                // U ϱ U† = (U (U ϱ)†)†; rows of the transpose are columns
                let mut scratch = vec![Complex64::new(0.0, 0.0); n * n];
                for _ in 0..2 {
                    transpose_into(rho, &mut scratch, n);
                    scratch.par_chunks_mut(n).for_each(|col| self.propagate(&geo, state.sign, col));
                    for (dst, src) in rho.iter_mut().zip(&scratch) {
                        *dst = src.conj();
                    }
                }
            }
        }
        Ok(())
    }

    pub fn observe(&self, state: &SectorState, t: f64) -> Result<SectorRecord> {
        let geo = self.geometry(t)?;
        Ok(SectorRecord {
            t,
            sector: state.sign,
            norm: state.norm(),
            mean_x: state.mean_x(),
            kinetic_momentum: state.kinetic_momentum(&self.spectral, geo.a_sector(state.sign)),
        })
    }

    pub fn run(&self, state: &mut SectorState, t0: f64, n_steps: usize, output_every: usize) -> Result<Vec<SectorRecord>> {
        let output_every = output_every.max(1);
        let mut out = vec![self.observe(state, t0)?];
        for s in 0..n_steps {
            self.step(state, t0 + s as f64 * self.dt)?;
            let done = s + 1;
            if done % output_every == 0 || done == n_steps {
                out.push(self.observe(state, t0 + done as f64 * self.dt)?);
            }
        }
        Ok(out)
    }
}

/// The gauge-limit scenario: a wavepacket prepared in the `+` sector.
#[derive(Clone, Debug)]
pub struct ConvergenceScenario {
    pub field: AxisField,
    pub mass: f64,
    pub packet: GaussianPacket,
    pub t_end: f64,
    /// Time step override; default is the density-matrix step bound.
    pub dt: Option<f64>,
    pub n_outputs: usize,
}

impl ConvergenceScenario {
    /// `Ψ(x) = ψ(x)|n(x)⟩`.
    pub fn initial_state(&self) -> Result<DensityMatrix> {
        let grid = *self.field.grid();
        let geo = SpinGeometry::at(&self.field, self.mass, 0.0, None)?;
        let psi = self.packet.wavefunction(&grid)?;
        let spinors: Vec<Spinor> = psi.iter().zip(&geo.spinor_plus).map(|(a, u)| u * *a).collect();
        Ok(DensityMatrix::from_spinor_wavefunction(grid, &spinors))
    }

    fn schedule(&self, nu: f64) -> (f64, usize, usize) {
        let grid = self.field.grid();
        let dt = self
            .dt
            .unwrap_or_else(|| step_bound(nu, self.mass, grid.dx(), self.t_end));
        let steps_per_output = ((self.t_end / self.n_outputs.max(1) as f64) / dt).ceil() as usize;
        let n_steps = steps_per_output * self.n_outputs.max(1);
        (self.t_end / n_steps as f64, n_steps, steps_per_output)
    }
}

/// One row of the convergence table.
#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceRow {
    pub nu: f64,
    pub dt: f64,
    /// `max_t max_s |tr[(p + A_s)ϱ_s]_full - (same)_effective|`.
    pub delta: f64,
    /// Mean coherence norm over the second half of the run.
    pub coherence_floor: f64,
    pub times: Vec<f64>,
    pub coherence: Vec<f64>,
    pub full_momentum: [Vec<f64>; 2],
    pub effective_momentum: [Vec<f64>; 2],
    pub monitor: ConservationMonitor,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceStudy {
    pub rows: Vec<ConvergenceRow>,
    pub delta_monotone: bool,
    /// Slope of `ln(floor)` against `ln ν` over the rows with `ν > 0`.
    pub floor_exponent: Option<f64>,
}

/// Full density-matrix dynamics projected on sectors versus the effective
/// sector dynamics, for every `ν` in `nu_list`.
pub fn convergence_study(scenario: &ConvergenceScenario, nu_list: &[f64]) -> Result<ConvergenceStudy> {
    if nu_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::config("gauge.nu_list", "nu_list must be strictly ascending"));
    }
    if nu_list.iter().any(|&v| v < 0.0) {
        return Err(Error::config("physics.nu", "decoherence rate must be ≥ 0"));
    }
    let grid = *scenario.field.grid();
    let geo0 = SpinGeometry::at(&scenario.field, scenario.mass, 0.0, None)?;
    let psi = scenario.packet.wavefunction(&grid)?;
    let mut rows = Vec::with_capacity(nu_list.len());
    for &nu in nu_list {
        let (dt, n_steps, every) = scenario.schedule(nu);

        let eff = EffectiveSolver::new(scenario.field.clone(), scenario.mass, dt, None)?;
        let mut plus = SectorState::wave(1, grid, psi.clone());
        let mut minus = SectorState::wave(-1, grid, vec![Complex64::new(0.0, 0.0); grid.n()]);
        let eff_plus = eff.run(&mut plus, 0.0, n_steps, every)?;
        let eff_minus = eff.run(&mut minus, 0.0, n_steps, every)?;

        let solver = LindbladSolver::new(scenario.field.clone(), scenario.mass, nu, dt)?;
        let mut rho = scenario.initial_state()?;
        let mut times = Vec::new();
        let mut coherence = Vec::new();
        let mut full = [Vec::new(), Vec::new()];
        let spec = Spectral::new(grid);
        let (_, monitor) = solver.run_with(&mut rho, 0.0, n_steps, every, |t, state| {
            let geo = if scenario.field.is_time_dependent() {
                Cow::Owned(SpinGeometry::at(&scenario.field, scenario.mass, t, None)?)
            } else {
                Cow::Borrowed(&geo0)
            };
            let proj = project_sectors(state, &geo);
            times.push(t);
            coherence.push(proj.coherence_norm);
            full[0].push(proj.plus.kinetic_momentum(&spec, geo.a_sector(1)));
            full[1].push(proj.minus.kinetic_momentum(&spec, geo.a_sector(-1)));
            Ok(())
        })?;
        let effective = [
            eff_plus.iter().map(|r| r.kinetic_momentum).collect::<Vec<_>>(),
            eff_minus.iter().map(|r| r.kinetic_momentum).collect::<Vec<_>>(),
        ];
        let delta = (0..2)
            .flat_map(|s| full[s].iter().zip(&effective[s]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        let half = times.len() / 2;
        let tail = &coherence[half..];
        let coherence_floor = tail.iter().sum::<f64>() / tail.len() as f64;
        rows.push(ConvergenceRow {
            nu,
            dt,
            delta,
            coherence_floor,
            times,
            coherence,
            full_momentum: full,
            effective_momentum: effective,
            monitor,
        });
    }
    let delta_monotone = rows.windows(2).all(|w| w[1].delta < w[0].delta);
    let fit_points: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.nu > 0.0 && r.coherence_floor > 0.0)
        .map(|r| (r.nu.ln(), r.coherence_floor.ln()))
        .collect();
    let floor_exponent = (fit_points.len() >= 2).then(|| {
        let (x, y): (Vec<f64>, Vec<f64>) = fit_points.into_iter().unzip();
        linear_fit(&x, &y).0
    });
    Ok(ConvergenceStudy {
        rows,
        delta_monotone,
        floor_exponent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{build_axis_field, FieldKind};
    use crate::lindblad::{dissipator_channel, init_gaussian, init_unpolarized};

    fn helix(g: Grid, winding: f64) -> AxisField {
        build_axis_field(FieldKind::Helix { wavenumber: winding * g.dk() }, g).unwrap()
    }

    /// Tilted helix with a modulated polar angle: x-dependent `A±`.
    pub(crate) fn wobbly(g: Grid) -> AxisField {
        let q = g.dk();
        let samples = g
            .positions()
            .iter()
            .map(|&x| {
                let th = 1.0 + 0.3 * (q * x).sin();
                let ph = 2.0 * q * x;
                Vec3::new(th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos())
            })
            .collect();
        build_axis_field(FieldKind::Sampled { samples }, g).unwrap()
    }

    fn packet(p0: f64) -> GaussianPacket {
        GaussianPacket { x0: -1.0, p0, sigma: 2.0 }
    }

    #[test]
    fn decohered_state_has_no_cross_terms() {
        let g = Grid::new(64, 32.0).unwrap();
        let f = helix(g, 1.0);
        let chi = Spinor::new(Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0));
        let mut rho = init_gaussian(g, 0.0, 0.3, 2.0, chi).unwrap();
        dissipator_channel(&mut rho, &f.n_at(0.0), 1.0, 60.0);
        let geo = SpinGeometry::at(&f, 1.0, 0.0, None).unwrap();
        let p = project_sectors(&rho, &geo);
        assert!(p.coherence_norm < 1e-10);
        assert!((p.plus.norm() + p.minus.norm() - 1.0).abs() < 1e-10);
        assert!(p.plus.hermiticity_error() < 1e-12);
    }

    #[test]
    fn eigenstate_and_unpolarized_projections() {
        let g = Grid::new(64, 32.0).unwrap();
        let f = build_axis_field(FieldKind::Constant { axis: Vec3::z() }, g).unwrap();
        let geo = SpinGeometry::at(&f, 1.0, 0.0, None).unwrap();
        let up = Spinor::new(Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0));
        let rho = init_gaussian(g, 0.0, 0.0, 2.0, up).unwrap();
        let p = project_sectors(&rho, &geo);
        assert!((p.plus.norm() - 1.0).abs() < 1e-12);
        assert!(p.minus.norm().abs() < 1e-15);
        if let SectorData::Density(d) = &p.plus.data {
            let diff = d.iter().zip(rho.comp(0, 0)).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            assert!(diff < 1e-15);
        }
        let h = helix(g, 2.0);
        let geo = SpinGeometry::at(&h, 1.0, 0.0, None).unwrap();
        let p = project_sectors(&init_unpolarized(g, 0.0, 0.0, 2.0).unwrap(), &geo);
        assert!((p.plus.norm() - 0.5).abs() < 1e-10);
        assert!((p.minus.norm() - 0.5).abs() < 1e-10);
    }

    #[test]
    fn constant_vector_potential_shifts_group_velocity() {
        let g = Grid::new(128, 32.0).unwrap();
        let q = 2.0 * g.dk();
        let f = helix(g, 2.0);
        let dt = 0.01;
        let solver = EffectiveSolver::new(f, 1.0, dt, None).unwrap();
        let p0 = 0.5;
        for sign in [1i8, -1] {
            let psi = packet(p0).wavefunction(&g).unwrap();
            let mut s = SectorState::wave(sign, g, psi);
            let recs = solver.run(&mut s, 0.0, 200, 200).unwrap();
            let last = recs.last().unwrap();
            let v = p0 + sign as f64 * q / 2.0;
            assert!((last.mean_x - (-1.0 + v * 2.0)).abs() < 1e-6, "{}", last.mean_x);
            assert!((last.kinetic_momentum - v).abs() < 1e-10);
        }
    }

    #[test]
    fn helix_sectors_match_exact_momentum_space_solution() {
        let g = Grid::new(128, 32.0).unwrap();
        let q = 2.0 * g.dk();
        let f = helix(g, 2.0);
        let (dt, steps, m) = (0.02, 50, 1.0);
        let solver = EffectiveSolver::new(f, m, dt, None).unwrap();
        let spec = Spectral::new(g);
        let t = dt * steps as f64;
        for sign in [1i8, -1] {
            let psi = packet(0.2).wavefunction(&g).unwrap();
            let mut s = SectorState::wave(sign, g, psi.clone());
            for k in 0..steps {
                solver.step(&mut s, k as f64 * dt).unwrap();
            }
            // H_s diagonal in k: (k ± q/2)²/2m + q²/8m
            let mut exact = psi;
            let mult: Vec<Complex64> = spec
                .k()
                .iter()
                .map(|&k| {
                    let e = (k + sign as f64 * q / 2.0).powi(2) / (2.0 * m) + q * q / (8.0 * m);
                    Complex64::from_polar(1.0, -e * t)
                })
                .collect();
            spec.apply_multiplier(&mut exact, &mult);
            if let SectorData::Wave(phi) = &s.data {
                let d = phi.iter().zip(&exact).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
                assert!(d < 1e-10, "{d}");
            }
        }
    }

    #[test]
    fn gravitational_term_is_charge_independent() {
        let g = Grid::new(64, 32.0).unwrap();
        let f = wobbly(g);
        let geo = SpinGeometry::at(&f, 1.3, 0.0, None).unwrap();
        let plus = sector_potential(&geo, 1);
        let minus = sector_potential(&geo, -1);
        assert!(plus.iter().zip(&minus).all(|(a, b)| a.to_bits() == b.to_bits()));
        // removing it shifts both sectors' phases the same way
        let dt = 0.01;
        let with = EffectiveSolver::new(f.clone(), 1.3, dt, None).unwrap();
        let mut without = with.clone();
        without.without_grav = true;
        let psi = packet(0.0).wavefunction(&g).unwrap();
        let mut overlaps = Vec::new();
        for sign in [1i8, -1] {
            let mut a = SectorState::wave(sign, g, psi.clone());
            let mut b = a.clone();
            for k in 0..20 {
                with.step(&mut a, k as f64 * dt).unwrap();
                without.step(&mut b, k as f64 * dt).unwrap();
            }
            if let (SectorData::Wave(x), SectorData::Wave(y)) = (&a.data, &b.data) {
                let ov: Complex64 = x.iter().zip(y).map(|(u, v)| v.conj() * u).sum::<Complex64>() * g.dx();
                overlaps.push(ov.arg());
            }
        }
        assert!(overlaps[0] < 0.0 && overlaps[1] < 0.0);
    }

    #[test]
    fn mirror_sectors_have_mirror_momenta() {
        // even A₊ and potential: parity maps H₊ onto H₋
        let g = Grid::new(128, 32.0).unwrap();
        let q = g.dk();
        let samples = g
            .positions()
            .iter()
            .map(|&x| {
                let th = 1.0 + 0.3 * (q * x).cos();
                let ph = 2.0 * q * x;
                Vec3::new(th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos())
            })
            .collect();
        let f = build_axis_field(FieldKind::Sampled { samples }, g).unwrap();
        let solver = EffectiveSolver::new(f, 1.0, 0.01, None).unwrap();
        let psi = packet(0.4).wavefunction(&g).unwrap();
        let n = g.n();
        let mirrored: Vec<Complex64> = (0..n).map(|i| psi[(n - i) % n]).collect();
        let mut a = SectorState::wave(1, g, psi);
        let mut b = SectorState::wave(-1, g, mirrored);
        let ra = solver.run(&mut a, 0.0, 100, 10).unwrap();
        let rb = solver.run(&mut b, 0.0, 100, 10).unwrap();
        for (x, y) in ra.iter().zip(&rb) {
            assert!((x.kinetic_momentum + y.kinetic_momentum).abs() < 1e-8);
            assert!((x.mean_x + y.mean_x).abs() < 1e-8);
            assert!((x.norm - 1.0).abs() < 1e-10);
        }
        assert!(ra.last().unwrap().kinetic_momentum.abs() > 0.1);
    }

    #[test]
    fn effective_step_is_second_order() {
        let g = Grid::new(64, 32.0).unwrap();
        let f = wobbly(g);
        let t = 0.8;
        let run = |steps: usize| {
            let dt = t / steps as f64;
            let s = EffectiveSolver::new(f.clone(), 1.0, dt, None).unwrap();
            let mut st = SectorState::wave(1, g, packet(0.3).wavefunction(&g).unwrap());
            for k in 0..steps {
                s.step(&mut st, k as f64 * dt).unwrap();
            }
            match st.data {
                SectorData::Wave(v) => v,
                _ => unreachable!(),
            }
        };
        let reference = run(1280);
        let err = |v: Vec<Complex64>| v.iter().zip(&reference).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        let (e1, e2) = (err(run(20)), err(run(40)));
        let order = (e1 / e2).log2();
        assert!((order - 2.0).abs() < 0.2, "order {order}");
    }

    #[test]
    fn density_level_matches_wave_level() {
        let g = Grid::new(48, 24.0).unwrap();
        let f = wobbly(g);
        let solver = EffectiveSolver::new(f, 1.0, 0.02, None).unwrap();
        let psi = GaussianPacket { x0: 0.0, p0: 0.3, sigma: 1.5 }.wavefunction(&g).unwrap();
        let n = g.n();
        let rho: Vec<Complex64> = (0..n * n).map(|k| psi[k / n] * psi[k % n].conj()).collect();
        let mut w = SectorState::wave(-1, g, psi);
        let mut d = SectorState {
            sign: -1,
            grid: g,
            data: SectorData::Density(rho),
        };
        for k in 0..10 {
            solver.step(&mut w, k as f64 * 0.02).unwrap();
            solver.step(&mut d, k as f64 * 0.02).unwrap();
        }
        if let (SectorData::Wave(p), SectorData::Density(r)) = (&w.data, &d.data) {
            for i in 0..n {
                for j in 0..n {
                    assert!((r[i * n + j] - p[i] * p[j].conj()).norm() < 1e-12);
                }
            }
        }
        assert!(d.hermiticity_error() < 1e-12);
    }

    #[test]
    fn regauged_run_has_same_observables() {
        let g = Grid::new(128, 32.0).unwrap();
        let f = wobbly(g);
        let l = g.length();
        let gauge = GaugePhase::uniform(&g, |x| (std::f64::consts::TAU * x / l).sin());
        let dt = 0.01;
        let plain = EffectiveSolver::new(f.clone(), 1.0, dt, None).unwrap();
        let regauged = EffectiveSolver::new(f, 1.0, dt, Some(gauge.clone())).unwrap();
        let psi = packet(0.3).wavefunction(&g).unwrap();
        // φ' = ⟨n'|Ψ⟩ = e^{-iχ}φ
        let psi_g: Vec<Complex64> = psi
            .iter()
            .zip(&gauge.plus)
            .map(|(z, c)| z * Complex64::from_polar(1.0, -c))
            .collect();
        let mut a = SectorState::wave(1, g, psi);
        let mut b = SectorState::wave(1, g, psi_g);
        let ra = plain.run(&mut a, 0.0, 100, 25).unwrap();
        let rb = regauged.run(&mut b, 0.0, 100, 25).unwrap();
        for (x, y) in ra.iter().zip(&rb) {
            assert!((x.kinetic_momentum - y.kinetic_momentum).abs() < 1e-8);
        }
        let d = a.density().iter().zip(b.density()).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
        assert!(d < 1e-8, "{d}");
    }

    #[test]
    fn rotating_helix_scalar_potentials() {
        use crate::fields::Rotation;
        let g = Grid::new(64, 32.0).unwrap();
        let omega = 0.7;
        let f = helix(g, 1.0).with_rotation(Rotation::new(omega, Vec3::z()).unwrap());
        let geo = SpinGeometry::at(&f, 1.0, 0.3, None).unwrap();
        let plus = sector_potential(&geo, 1);
        let minus = sector_potential(&geo, -1);
        let q = g.dk();
        for i in 0..g.n() {
            assert!((plus[i] - (q * q / 8.0 + omega / 2.0)).abs() < 1e-10);
            assert!((minus[i] - (q * q / 8.0 - omega / 2.0)).abs() < 1e-10);
        }
    }

    #[test]
    fn small_convergence_study_trend() {
        let g = Grid::new(48, 24.0).unwrap();
        let scenario = ConvergenceScenario {
            field: helix(g, 1.0),
            mass: 1.0,
            packet: GaussianPacket { x0: 0.0, p0: 1.0, sigma: 1.5 },
            t_end: 0.5,
            dt: Some(0.002),
            n_outputs: 10,
        };
        let study = convergence_study(&scenario, &[0.0, 4.0, 16.0, 64.0]).unwrap();
        assert!(study.delta_monotone, "{:?}", study.rows.iter().map(|r| r.delta).collect::<Vec<_>>());
        assert!(convergence_study(&scenario, &[4.0, 2.0]).is_err());
    }
}
