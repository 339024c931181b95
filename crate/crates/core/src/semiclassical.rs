//! Gradient-expanded phase-space transport for `ρ₀(x,p)` and `ρ⃗(x,p)`.
//!
//! With `F = (∂ₓn) × n` and `D = (ν/4)|∂ₓn|²`:
//!
//! ```text
//! ∂ₜρ₀ + (p/m)∂ₓρ₀ = D ∂²ₚρ₀ + (ν/2) F·∂ₚρ⃗
//! ∂ₜρ⃗ + (p/m)∂ₓρ⃗ = ν n(n·ρ⃗) - νρ⃗ - D ∂²ₚρ⃗ + (ν/4) ∂ₓn (∂ₓn·∂²ₚρ⃗)
//!                  - (ν/8) [n (∂²ₓn·∂²ₚρ⃗) + ∂²ₓn (n·∂²ₚρ⃗)] - (ν/2) F ∂ₚρ₀
//! ```
//!
//! The bracketed curvature term comes from the same second-order expansion of
//! `n(x ± s/2)` as the others; without it the orientation part would not be
//! rotation covariant. Layout of every field is `[i * n_p + k]` (x-major).

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fields::{AxisField, Vec3};
use crate::grid::{Grid, Spectral};
use crate::observables::{force_integral, ObservableRecord, TimeSeries};

/// Uniform momentum grid `p_k = p_min + k·Δp`, `k = 0..n`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MomentumGrid {
    p_min: f64,
    dp: f64,
    n: usize,
}

impl MomentumGrid {
    pub fn new(p_min: f64, dp: f64, n: usize) -> Self {
        assert!(dp > 0.0 && n >= 3, "invalid momentum grid");
        MomentumGrid { p_min, dp, n }
    }

    /// Symmetric window `[-p_max, p_max]` with spacing close to `dp`.
    pub fn symmetric(p_max: f64, dp: f64) -> Result<Self> {
        if !(p_max > 0.0 && dp > 0.0 && dp < p_max) {
            return Err(Error::config(
                "semiclassical.p_grid",
                format!("need 0 < dp < p_max, got dp = {dp}, p_max = {p_max}"),
            ));
        }
        let half = (p_max / dp).ceil() as usize;
        let dp = p_max / half as f64;
        Ok(MomentumGrid::new(-p_max, dp, 2 * half + 1))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dp(&self) -> f64 {
        self.dp
    }

    pub fn p(&self, k: usize) -> f64 {
        self.p_min + k as f64 * self.dp
    }

    pub fn p_max_abs(&self) -> f64 {
        self.p(0).abs().max(self.p(self.n - 1).abs())
    }

    pub fn values(&self) -> Vec<f64> {
        (0..self.n).map(|k| self.p(k)).collect()
    }
}

/// Real phase-space fields on an `N_x × N_p` grid.
#[derive(Clone, Debug)]
pub struct PhaseSpaceState {
    grid: Grid,
    pgrid: MomentumGrid,
    pub rho0: Vec<f64>,
    pub rho_vec: [Vec<f64>; 3],
}

impl PhaseSpaceState {
    pub fn zeros(grid: Grid, pgrid: MomentumGrid) -> Self {
        let z = vec![0.0; grid.n() * pgrid.n()];
        PhaseSpaceState {
            grid,
            pgrid,
            rho0: z.clone(),
            rho_vec: [z.clone(), z.clone(), z],
        }
    }

    pub fn from_fields(grid: Grid, pgrid: MomentumGrid, rho0: Vec<f64>, rho_vec: [Vec<f64>; 3]) -> Self {
        let len = grid.n() * pgrid.n();
        assert!(rho0.len() == len && rho_vec.iter().all(|v| v.len() == len));
        PhaseSpaceState {
            grid,
            pgrid,
            rho0,
            rho_vec,
        }
    }

    /// Product Gaussian `exp(-(x-x₀)²/2σₓ² - (p-p₀)²/2σₚ²)` with spin
    /// polarization `bloch` (`|bloch| ≤ 1`), normalized on the grid.
    pub fn gaussian(
        grid: Grid,
        pgrid: MomentumGrid,
        x0: f64,
        p0: f64,
        sigma_x: f64,
        sigma_p: f64,
        bloch: Vec3,
    ) -> Self {
        let mut s = PhaseSpaceState::zeros(grid, pgrid);
        let np = pgrid.n();
        for i in 0..grid.n() {
            let d = grid.wrap(grid.x(i) - x0);
            let gx = (-d * d / (2.0 * sigma_x * sigma_x)).exp();
            for k in 0..np {
                let dp = pgrid.p(k) - p0;
                s.rho0[i * np + k] = gx * (-dp * dp / (2.0 * sigma_p * sigma_p)).exp();
            }
        }
        let mass = s.mass();
        s.rho0.iter_mut().for_each(|v| *v /= mass);
        for c in 0..3 {
            s.rho_vec[c] = s.rho0.iter().map(|v| v * bloch[c]).collect();
        }
        s
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn momentum_grid(&self) -> &MomentumGrid {
        &self.pgrid
    }

    pub fn rho0_row(&self, i: usize) -> &[f64] {
        let np = self.pgrid.n();
        &self.rho0[i * np..(i + 1) * np]
    }

    fn cell(&self) -> f64 {
        self.grid.dx() * self.pgrid.dp()
    }

    /// `∫∫ρ₀ dx dp`.
    pub fn mass(&self) -> f64 {
        self.rho0.iter().sum::<f64>() * self.cell()
    }

    pub fn max_rho0(&self) -> f64 {
        self.rho0.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min_rho0(&self) -> f64 {
        self.rho0.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    fn axpy(&mut self, a: f64, other: &PhaseSpaceState) {
        self.rho0.iter_mut().zip(&other.rho0).for_each(|(x, y)| *x += a * y);
        for c in 0..3 {
            self.rho_vec[c]
                .iter_mut()
                .zip(&other.rho_vec[c])
                .for_each(|(x, y)| *x += a * y);
        }
    }

    /// Moments and profiles; `force_field` is `(∂ₓn) × n` on the x grid.
    pub fn moments(&self, t: f64, nu: f64, force_field: &[Vec3]) -> ObservableRecord {
        let (nx, np) = (self.grid.n(), self.pgrid.n());
        let dx = self.grid.dx();
        let dp = self.pgrid.dp();
        let ps = self.pgrid.values();
        let mut density = vec![0.0; nx];
        let mut spin_density = vec![[0.0; 3]; nx];
        let mut current = vec![[0.0; 3]; nx];
        let (mut mean_p, mut mean_p2) = (0.0, 0.0);
        for i in 0..nx {
            let row = i * np;
            for k in 0..np {
                let r0 = self.rho0[row + k];
                density[i] += r0 * dp;
                mean_p += ps[k] * r0;
                mean_p2 += ps[k] * ps[k] * r0;
                for c in 0..3 {
                    let v = self.rho_vec[c][row + k];
                    spin_density[i][c] += v * dp;
                    current[i][c] += ps[k] * v * dp;
                }
            }
        }
        let trace = density.iter().sum::<f64>() * dx;
        let xs = self.grid.positions();
        let mean_x = xs.iter().zip(&density).map(|(x, d)| x * d).sum::<f64>() * dx / trace;
        let var_x = xs
            .iter()
            .zip(&density)
            .map(|(x, d)| (x - mean_x).powi(2) * d)
            .sum::<f64>()
            * dx
            / trace;
        let mut orientation = [0.0; 3];
        for s in &spin_density {
            for c in 0..3 {
                orientation[c] += s[c] * dx;
            }
        }
        ObservableRecord {
            t,
            trace,
            purity: f64::NAN,
            mean_x,
            var_x,
            mean_p: mean_p * dx * dp,
            mean_p2: mean_p2 * dx * dp,
            force: force_integral(nu, force_field, &spin_density, dx),
            density,
            spin_density,
            current,
            orientation,
            min_eigenvalue: None,
        }
    }
}

/// `+(ν/2) Σᵢ F(xᵢ) ρ₀(xᵢ) Δx`, the integrated orientation-flux source.
pub fn flux_source_integral(nu: f64, force_field: &[Vec3], density: &[f64], dx: f64) -> Vec3 {
    force_field
        .iter()
        .zip(density)
        .fold(Vec3::zeros(), |acc, (f, d)| acc + f * *d)
        * (0.5 * nu * dx)
}

/// Pointwise geometry used by the p-space terms.
#[derive(Clone, Debug)]
struct LocalGeometry {
    n: Vec<Vec3>,
    dn: Vec<Vec3>,
    d2n: Vec<Vec3>,
    force: Vec<Vec3>,
}

impl LocalGeometry {
    fn at(field: &AxisField, t: f64) -> Self {
        let n = field.n_at(t);
        let dn = field.dn_at(t);
        let d2n = field.d2n_at(t);
        let force = dn.iter().zip(&n).map(|(a, b)| a.cross(b)).collect();
        LocalGeometry { n, dn, d2n, force }
    }
}

/// Central first and second p-differences with zero ghost cells.
#[inline]
fn dp_central(row: &[f64], k: usize, inv_2dp: f64, inv_dp2: f64) -> (f64, f64) {
    let left = if k > 0 { row[k - 1] } else { 0.0 };
    let right = if k + 1 < row.len() { row[k + 1] } else { 0.0 };
    ((right - left) * inv_2dp, (right - 2.0 * row[k] + left) * inv_dp2)
}

/// Momentum-space terms (diffusion, coupling, force source) of one x row.
fn p_terms_row(
    nu: f64,
    g: (&Vec3, &Vec3, &Vec3, &Vec3),
    dp: f64,
    r0: &[f64],
    rv: [&[f64]; 3],
    out0: &mut [f64],
    outv: [&mut [f64]; 3],
) {
    let (n, dn, d2n, f) = g;
    let diff = 0.25 * nu * dn.norm_squared();
    let (inv_2dp, inv_dp2) = (0.5 / dp, 1.0 / (dp * dp));
    let [o1, o2, o3] = outv;
    for k in 0..r0.len() {
        let (d0, dd0) = dp_central(r0, k, inv_2dp, inv_dp2);
        let mut dv = Vec3::zeros();
        let mut ddv = Vec3::zeros();
        for c in 0..3 {
            let (a, b) = dp_central(rv[c], k, inv_2dp, inv_dp2);
            dv[c] = a;
            ddv[c] = b;
        }
        out0[k] = diff * dd0 + 0.5 * nu * f.dot(&dv);
        let v = -diff * ddv + dn * (0.25 * nu * dn.dot(&ddv))
            - (n * d2n.dot(&ddv) + d2n * n.dot(&ddv)) * (0.125 * nu)
            - f * (0.5 * nu * d0);
        o1[k] = v[0];
        o2[k] = v[1];
        o3[k] = v[2];
    }
}

/// Momentum-space part of the right-hand side (no advection, no relaxation).
fn p_space_rhs(state: &PhaseSpaceState, geo: &LocalGeometry, nu: f64) -> PhaseSpaceState {
    let np = state.pgrid.n();
    let dp = state.pgrid.dp();
    let mut out = PhaseSpaceState::zeros(state.grid, state.pgrid);
    let [ox, oy, oz] = &mut out.rho_vec;
    out.rho0
        .par_chunks_mut(np)
        .zip(ox.par_chunks_mut(np))
        .zip(oy.par_chunks_mut(np))
        .zip(oz.par_chunks_mut(np))
        .enumerate()
        .for_each(|(i, (((o0, o1), o2), o3))| {
            let row = i * np..(i + 1) * np;
            p_terms_row(
                nu,
                (&geo.n[i], &geo.dn[i], &geo.d2n[i], &geo.force[i]),
                dp,
                &state.rho0[row.clone()],
                [
                    &state.rho_vec[0][row.clone()],
                    &state.rho_vec[1][row.clone()],
                    &state.rho_vec[2][row],
                ],
                o0,
                [o1, o2, o3],
            );
        });
    out
}

/// Full right-hand side `∂ₜ(ρ₀, ρ⃗)` at time `t`, with spectral `∂ₓ`.
pub fn transport_rhs(field: &AxisField, mass: f64, nu: f64, state: &PhaseSpaceState, t: f64) -> PhaseSpaceState {
    let geo = LocalGeometry::at(field, t);
    let mut out = p_space_rhs(state, &geo, nu);
    let (nx, np) = (state.grid.n(), state.pgrid.n());
    let spec = Spectral::new(state.grid);
    let ps = state.pgrid.values();
    let advect = |src: &[f64], dst: &mut [f64]| {
        for k in 0..np {
            let col: Vec<f64> = (0..nx).map(|i| src[i * np + k]).collect();
            let d = spec.derivative(&col);
            for i in 0..nx {
                dst[i * np + k] -= ps[k] / mass * d[i];
            }
        }
    };
    advect(&state.rho0, &mut out.rho0);
    for c in 0..3 {
        advect(&state.rho_vec[c], &mut out.rho_vec[c]);
    }
    for i in 0..nx {
        let n = geo.n[i];
        for k in 0..np {
            let idx = i * np + k;
            let v = Vec3::new(state.rho_vec[0][idx], state.rho_vec[1][idx], state.rho_vec[2][idx]);
            let relax = (n * n.dot(&v) - v) * nu;
            for c in 0..3 {
                out.rho_vec[c][idx] += relax[c];
            }
        }
    }
    out
}

/// Leakage beyond which a run aborts.
pub const LEAKAGE_LIMIT: f64 = 1e-8;

/// Split-step integrator for the transport equations.
#[derive(Clone, Debug)]
pub struct TransportSolver {
    field: AxisField,
    spectral: Spectral,
    pgrid: MomentumGrid,
    mass: f64,
    nu: f64,
    dt: f64,
}

/// Run summary for the phase-space solver.
#[derive(Clone, Debug, Serialize)]
pub struct TransportMonitor {
    pub initial_mass: f64,
    pub leakage: f64,
    /// Most negative `ρ₀` relative to `max ρ₀`.
    pub worst_negativity: f64,
}

impl TransportSolver {
    pub fn new(field: AxisField, pgrid: MomentumGrid, mass: f64, nu: f64, dt: f64) -> Result<Self> {
        if !(mass > 0.0) {
            return Err(Error::config("physics.mass", "mass must be > 0"));
        }
        if !(nu >= 0.0) {
            return Err(Error::config("physics.nu", "decoherence rate must be ≥ 0"));
        }
        let bound = Self::cfl_bound(&field, &pgrid, mass, nu);
        if !(dt > 0.0 && dt <= bound) {
            return Err(Error::config(
                "semiclassical.cfl",
                format!("time step {dt} violates the CFL bound; need 0 < dt ≤ {bound:.6e}"),
            ));
        }
        let spectral = Spectral::new(*field.grid());
        Ok(TransportSolver {
            field,
            spectral,
            pgrid,
            mass,
            nu,
            dt,
        })
    }

    /// `0.5·min(Δx/(p_max/m), Δp²/(ν max|∂ₓn|²/2))`.
    pub fn cfl_bound(field: &AxisField, pgrid: &MomentumGrid, mass: f64, nu: f64) -> f64 {
        let dx = field.grid().dx();
        let advect = dx / (pgrid.p_max_abs() / mass);
        let curvature = (0..=8)
            .map(|s| s as f64 * 0.125)
            .flat_map(|frac| {
                let t = frac * field.rotation().map_or(0.0, |r| std::f64::consts::TAU / r.rate.abs().max(1e-300));
                field.dn_at(t).into_iter().map(|v| v.norm_squared())
            })
            .fold(0.0, f64::max);
        let diffuse = if nu * curvature > 0.0 {
            pgrid.dp().powi(2) / (0.5 * nu * curvature)
        } else {
            f64::INFINITY
        };
        0.5 * advect.min(diffuse)
    }

    pub fn momentum_grid(&self) -> &MomentumGrid {
        &self.pgrid
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Exact free streaming over `tau` by Fourier shift of every p column.
    fn advect(&self, state: &mut PhaseSpaceState, tau: f64) {
        let (nx, np) = (state.grid.n(), self.pgrid.n());
        let ks = self.spectral.k();
        let ps = self.pgrid.values();
        let mass = self.mass;
        let spec = &self.spectral;
        let shift_field = |f: &mut Vec<f64>| {
            let cols: Vec<Vec<f64>> = (0..np)
                .into_par_iter()
                .map(|k| {
                    let mut col: Vec<Complex64> =
                        (0..nx).map(|i| Complex64::new(f[i * np + k], 0.0)).collect();
                    let v = ps[k] / mass * tau;
                    let mult: Vec<Complex64> = ks.iter().map(|&q| Complex64::from_polar(1.0, -q * v)).collect();
                    spec.apply_multiplier(&mut col, &mult);
                    col.into_iter().map(|z| z.re).collect()
                })
                .collect();
            for (k, col) in cols.iter().enumerate() {
                for i in 0..nx {
                    f[i * np + k] = col[i];
                }
            }
        };
        shift_field(&mut state.rho0);
        for c in 0..3 {
            shift_field(&mut state.rho_vec[c]);
        }
    }

    /// Exact `ρ⃗ ← n(n·ρ⃗) + e^{-ντ}(ρ⃗ - n(n·ρ⃗))` with `n` at time `t`.
    fn relax(&self, state: &mut PhaseSpaceState, tau: f64, t: f64) {
        let decay = (-self.nu * tau).exp();
        let n = self.field.n_at(t);
        let np = self.pgrid.n();
        for (i, ni) in n.iter().enumerate() {
            for k in 0..np {
                let idx = i * np + k;
                let v = Vec3::new(state.rho_vec[0][idx], state.rho_vec[1][idx], state.rho_vec[2][idx]);
                let along = ni * ni.dot(&v);
                let out = along + (v - along) * decay;
                for c in 0..3 {
                    state.rho_vec[c][idx] = out[c];
                }
            }
        }
    }

    /// Classical RK4 for the p-space terms with geometry frozen at `t`.
    fn p_step(&self, state: &mut PhaseSpaceState, tau: f64, t: f64) {
        let geo = LocalGeometry::at(&self.field, t);
        let k1 = p_space_rhs(state, &geo, self.nu);
        let mut s = state.clone();
        s.axpy(0.5 * tau, &k1);
        let k2 = p_space_rhs(&s, &geo, self.nu);
        let mut s = state.clone();
        s.axpy(0.5 * tau, &k2);
        let k3 = p_space_rhs(&s, &geo, self.nu);
        let mut s = state.clone();
        s.axpy(tau, &k3);
        let k4 = p_space_rhs(&s, &geo, self.nu);
        state.axpy(tau / 6.0, &k1);
        state.axpy(tau / 3.0, &k2);
        state.axpy(tau / 3.0, &k3);
        state.axpy(tau / 6.0, &k4);
    }

    /// One split step: advect ½, relax ½, p-terms 1, relax ½, advect ½.
    pub fn step(&self, state: &mut PhaseSpaceState, t: f64) {
        let (h, mid) = (0.5 * self.dt, t + 0.5 * self.dt);
        self.advect(state, h);
        self.relax(state, h, mid);
        self.p_step(state, self.dt, mid);
        self.relax(state, h, mid);
        self.advect(state, h);
    }

    pub fn observe(&self, state: &PhaseSpaceState, t: f64) -> ObservableRecord {
        let geo = LocalGeometry::at(&self.field, t);
        state.moments(t, self.nu, &geo.force)
    }

    /// Advance `n_steps` from `t0`, sampling every `output_every` steps.
    pub fn run(
        &self,
        state: &mut PhaseSpaceState,
        t0: f64,
        n_steps: usize,
        output_every: usize,
        mut visit: impl FnMut(f64, &PhaseSpaceState) -> Result<()>,
    ) -> Result<(TimeSeries, TransportMonitor)> {
        let output_every = output_every.max(1);
        let initial_mass = state.mass();
        let mut monitor = TransportMonitor {
            initial_mass,
            leakage: 0.0,
            worst_negativity: 0.0,
        };
        let mut series = TimeSeries::default();
        series.push(self.observe(state, t0));
        visit(t0, state)?;
        for s in 0..n_steps {
            let t = t0 + s as f64 * self.dt;
            self.step(state, t);
            let leak = (state.mass() - initial_mass).abs();
            monitor.leakage = monitor.leakage.max(leak);
            if leak > LEAKAGE_LIMIT {
                return Err(Error::Numerical(format!(
                    "phase-space mass leaked through the momentum boundary: {leak:.3e} at t = {:.6}; \
                     widen p_max",
                    t + self.dt
                )));
            }
            let done = s + 1;
            if done % output_every == 0 || done == n_steps {
                let t_out = t0 + done as f64 * self.dt;
                let max = state.max_rho0();
                if max > 0.0 {
                    monitor.worst_negativity = monitor.worst_negativity.min(state.min_rho0() / max);
                }
                series.push(self.observe(state, t_out));
                visit(t_out, state)?;
            }
        }
        Ok((series, monitor))
    }
}

/// Window half-width `p₀ + 6√⟨p²⟩(T)` for a state with momentum spread
/// `sigma_p` diffusing at `d⟨p²⟩/dt ≤ ν max|∂ₓn|²/2` for time `t_end`.
pub fn suggested_p_max(p0: f64, sigma_p: f64, nu: f64, max_gradient_sq: f64, t_end: f64) -> f64 {
    p0.abs() + 6.0 * (sigma_p * sigma_p + 0.5 * nu * max_gradient_sq * t_end).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{build_axis_field, FieldKind};

    fn helix(grid: Grid, winding: f64) -> AxisField {
        build_axis_field(
            FieldKind::Helix {
                wavenumber: winding * grid.dk(),
            },
            grid,
        )
        .unwrap()
    }

    fn max_abs(v: &[f64]) -> f64 {
        v.iter().fold(0.0, |a, b| a.max(b.abs()))
    }

    #[test]
    fn symmetric_grid_is_centred() {
        let g = MomentumGrid::symmetric(10.0, 0.3).unwrap();
        assert!((g.p(0) + 10.0).abs() < 1e-12);
        assert!((g.p(g.n() - 1) - 10.0).abs() < 1e-12);
        assert!(g.p(g.n() / 2).abs() < 1e-12);
        assert!(MomentumGrid::symmetric(1.0, 2.0).is_err());
    }

    #[test]
    fn constant_field_rhs_is_advection_plus_relaxation() {
        let g = Grid::new(32, 16.0).unwrap();
        let f = build_axis_field(FieldKind::Constant { axis: Vec3::z() }, g).unwrap();
        let pg = MomentumGrid::symmetric(6.0, 0.2).unwrap();
        let s = PhaseSpaceState::gaussian(g, pg, 0.0, 0.5, 2.0, 1.0, Vec3::new(0.6, 0.0, 0.3));
        let rhs = transport_rhs(&f, 1.0, 0.8, &s, 0.0);
        let spec = Spectral::new(g);
        let np = pg.n();
        for k in 0..np {
            let col: Vec<f64> = (0..g.n()).map(|i| s.rho0[i * np + k]).collect();
            let d = spec.derivative(&col);
            for i in 0..g.n() {
                let idx = i * np + k;
                let adv = -pg.p(k) * d[i];
                assert!((rhs.rho0[idx] - adv).abs() < 1e-12);
                // z component: advection only; x component: advection - ν ρ_x
                assert!((rhs.rho_vec[2][idx] - 0.3 * adv).abs() < 1e-12);
                let expect_x = 0.6 * adv - 0.8 * s.rho_vec[0][idx];
                assert!((rhs.rho_vec[0][idx] - expect_x).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn helix_source_terms() {
        let g = Grid::new(32, 16.0).unwrap();
        let f = helix(g, 1.0);
        let q = g.dk();
        let nu = 1.5;
        let pg = MomentumGrid::symmetric(6.0, 0.1).unwrap();
        // x-independent, unpolarized: only p-space terms survive
        let s = PhaseSpaceState::gaussian(g, pg, 0.0, 0.0, 1e6, 1.0, Vec3::zeros());
        let rhs = transport_rhs(&f, 1.0, nu, &s, 0.0);
        let np = pg.n();
        let dp = pg.dp();
        for i in [0, 7, 19] {
            for k in 1..np - 1 {
                let idx = i * np + k;
                let d2 = (s.rho0[idx + 1] - 2.0 * s.rho0[idx] + s.rho0[idx - 1]) / (dp * dp);
                let d1 = (s.rho0[idx + 1] - s.rho0[idx - 1]) / (2.0 * dp);
                assert!((rhs.rho0[idx] - 0.25 * nu * q * q * d2).abs() < 1e-9);
                assert!((rhs.rho_vec[2][idx] - 0.5 * nu * q * d1).abs() < 1e-9);
                assert!(rhs.rho_vec[0][idx].abs() < 1e-9 && rhs.rho_vec[1][idx].abs() < 1e-9);
            }
        }
    }

    #[test]
    fn homogeneous_state_is_stationary_in_constant_field() {
        let g = Grid::new(16, 8.0).unwrap();
        let n = Vec3::new(1.0, 2.0, 2.0) / 3.0;
        let f = build_axis_field(FieldKind::Constant { axis: n }, g).unwrap();
        let pg = MomentumGrid::symmetric(8.0, 0.2).unwrap();
        let mut s = PhaseSpaceState::gaussian(g, pg, 0.0, 0.0, 1e6, 1.0, n * 0.5);
        let before = s.clone();
        let rhs = transport_rhs(&f, 1.0, 3.0, &s, 0.0);
        assert!(max_abs(&rhs.rho0) < 1e-12);
        for c in 0..3 {
            assert!(max_abs(&rhs.rho_vec[c]) < 1e-12);
        }
        let solver = TransportSolver::new(f, pg, 1.0, 3.0, 0.01).unwrap();
        for s_idx in 0..10 {
            solver.step(&mut s, s_idx as f64 * 0.01);
        }
        let diff: f64 = s.rho0.iter().zip(&before.rho0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn free_advection_translates_gaussian() {
        let g = Grid::new(128, 32.0).unwrap();
        let f = build_axis_field(FieldKind::Constant { axis: Vec3::z() }, g).unwrap();
        // narrow momentum spread so every column shifts by nearly the same amount
        let pg = MomentumGrid::new(0.99, 0.01, 3);
        let s0 = PhaseSpaceState::gaussian(g, pg, -3.0, 1.0, 1.5, 1.0, Vec3::zeros());
        let mut s = s0.clone();
        let dt = 0.05;
        let solver = TransportSolver::new(f, pg, 1.0, 0.0, dt).unwrap();
        for k in 0..100 {
            solver.step(&mut s, k as f64 * dt);
        }
        let t = 100.0 * dt;
        let np = pg.n();
        let mut worst: f64 = 0.0;
        for i in 0..g.n() {
            for k in 0..np {
                let p = pg.p(k);
                let d = g.wrap(g.x(i) - (-3.0 + p * t));
                let exact = s0.rho0[(0..g.n()).min_by(|&a, &b| {
                    let da = g.wrap(g.x(a) + 3.0).abs();
                    let db = g.wrap(g.x(b) + 3.0).abs();
                    da.partial_cmp(&db).unwrap()
                }).unwrap() * np + k]
                    * (-d * d / (2.0 * 1.5 * 1.5)).exp();
                worst = worst.max((s.rho0[i * np + k] - exact).abs());
            }
        }
        assert!(worst / s0.max_rho0() < 1e-4, "{worst}");
    }

    #[test]
    fn relaxation_only_decay_rate() {
        let g = Grid::new(16, 8.0).unwrap();
        let f = build_axis_field(FieldKind::Constant { axis: Vec3::z() }, g).unwrap();
        let pg = MomentumGrid::symmetric(6.0, 0.2).unwrap();
        let nu = 2.0;
        let mut s = PhaseSpaceState::gaussian(g, pg, 0.0, 0.0, 1e6, 1.0, Vec3::x());
        let dt = 0.01;
        let solver = TransportSolver::new(f, pg, 1.0, nu, dt).unwrap();
        let (series, _) = solver.run(&mut s, 0.0, 50, 50, |_, _| Ok(())).unwrap();
        let r = series.last().unwrap();
        let rate = -(r.orientation[0]).ln() / r.t;
        assert!((rate - nu).abs() / nu < 5e-3, "{rate}");
    }

    #[test]
    fn moment_chain_holds_per_step() {
        let g = Grid::new(32, 16.0).unwrap();
        let f = helix(g, 1.0);
        let pg = MomentumGrid::symmetric(10.0, 0.1).unwrap();
        let nu = 1.0;
        let mut s = PhaseSpaceState::gaussian(g, pg, 0.0, 0.3, 2.0, 1.0, Vec3::new(0.0, 0.2, 0.7));
        // d⟨p⟩/dt of the RHS equals the force integral exactly
        let rhs = transport_rhs(&f, 1.0, nu, &s, 0.0);
        let np = pg.n();
        let ps = pg.values();
        let cell = g.dx() * pg.dp();
        let dpdt: f64 = (0..g.n() * np).map(|idx| ps[idx % np] * rhs.rho0[idx]).sum::<f64>() * cell;
        let mass_rate: f64 = rhs.rho0.iter().sum::<f64>() * cell;
        let solver = TransportSolver::new(f, pg, 1.0, nu, 0.005).unwrap();
        let r = solver.observe(&s, 0.0);
        assert!((dpdt - r.force).abs() < 1e-10, "{dpdt} vs {}", r.force);
        assert!(mass_rate.abs() < 1e-10);
        let m0 = s.mass();
        solver.step(&mut s, 0.0);
        assert!((s.mass() - m0).abs() < 1e-10);
    }

    #[test]
    fn cfl_violation_is_reported() {
        let g = Grid::new(32, 16.0).unwrap();
        let f = helix(g, 1.0);
        let pg = MomentumGrid::symmetric(10.0, 0.1).unwrap();
        let err = TransportSolver::new(f, pg, 1.0, 1.0, 1.0).unwrap_err();
        assert!(err.to_string().contains("CFL"));
    }

    #[test]
    fn helix_diffusion_initial_slope() {
        let g = Grid::new(32, 32.0).unwrap();
        let f = helix(g, 2.0);
        let q = 2.0 * g.dk();
        let nu = 0.5;
        let pg = MomentumGrid::symmetric(12.0, 0.1).unwrap();
        let mut s = PhaseSpaceState::gaussian(g, pg, 0.0, 0.0, 2.0, 2.0, Vec3::zeros());
        let dt = 0.004;
        let solver = TransportSolver::new(f, pg, 1.0, nu, dt).unwrap();
        let (series, _) = solver.run(&mut s, 0.0, 25, 1, |_, _| Ok(())).unwrap();
        // moment chain: d⟨p²⟩/dt = (νq²/2)e^{-νt}
        let t = series.last().unwrap().t;
        let expect = 0.5 * q * q * (1.0 - (-nu * t).exp());
        let got = series.last().unwrap().mean_p2 - series.records[0].mean_p2;
        assert!((got - expect).abs() / expect < 1e-3, "{got} vs {expect}");
    }
}
