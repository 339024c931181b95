//! Full spinor density matrix `ϱ(xᵢ|xⱼ)` under the position-dependent
//! unselective-measurement master equation
//!
//! ```text
//! ∂ₜϱ = -i[p²/2m, ϱ] + ν (P₊ϱP₊ + P₋ϱP₋ - ϱ),   P±(x) = (1 ± n(x)·σ)/2
//! ```
//!
//! Both generators are integrated exactly: the kinetic part spectrally, the
//! dissipator through its closed form. Because `P₊P₋ = 0` pointwise, the
//! measurement map `Φ(ϱ) = P₊ϱP₊ + P₋ϱP₋` is idempotent and
//! `exp(νΔt(Φ - 1)) = e^{-νΔt} + (1 - e^{-νΔt})Φ`. The two are composed with
//! Strang splitting, so the only error is the O(Δt²) splitting error.
//!
//! Storage is in the laboratory spin basis: four `N × N` row-major arrays,
//! one per spin index pair `(a, b)`, holding `ϱ_ab(xᵢ|xⱼ)` as a density
//! (`Σᵢ tr ϱ(xᵢ|xᵢ) Δx = 1`).

use nalgebra::DMatrix;
use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fields::{projectors, sigma_dot, AxisField, Spin2, Spinor, Vec3};
use crate::grid::{transpose_into, Grid, Spectral};
use crate::observables::{force_integral, ObservableRecord, TimeSeries};
use crate::semiclassical::{MomentumGrid, PhaseSpaceState};

const CI: Complex64 = Complex64 { re: 0.0, im: 1.0 };

#[derive(Clone, Debug)]
pub struct DensityMatrix {
    grid: Grid,
    comps: [Vec<Complex64>; 4],
}

#[inline]
fn ci(a: usize, b: usize) -> usize {
    2 * a + b
}

impl DensityMatrix {
    pub fn zeros(grid: Grid) -> Self {
        let z = vec![Complex64::new(0.0, 0.0); grid.n() * grid.n()];
        DensityMatrix {
            grid,
            comps: [z.clone(), z.clone(), z.clone(), z],
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// `ϱ_ab(·|·)` as a row-major `N × N` array.
    pub fn comp(&self, a: usize, b: usize) -> &[Complex64] {
        &self.comps[ci(a, b)]
    }

    pub fn comp_mut(&mut self, a: usize, b: usize) -> &mut [Complex64] {
        &mut self.comps[ci(a, b)]
    }

    pub fn block(&self, i: usize, j: usize) -> Spin2 {
        let k = i * self.grid.n() + j;
        Spin2::new(
            self.comps[0][k],
            self.comps[1][k],
            self.comps[2][k],
            self.comps[3][k],
        )
    }

    pub fn set_block(&mut self, i: usize, j: usize, m: &Spin2) {
        let k = i * self.grid.n() + j;
        self.comps[0][k] = m[(0, 0)];
        self.comps[1][k] = m[(0, 1)];
        self.comps[2][k] = m[(1, 0)];
        self.comps[3][k] = m[(1, 1)];
    }

    /// `ψ(x)ψ*(x') ⊗ s` for a spatial wavefunction and a 2×2 spin matrix.
    pub fn from_product(grid: Grid, psi: &[Complex64], spin: &Spin2) -> Self {
        let n = grid.n();
        let mut rho = DensityMatrix::zeros(grid);
        for (c, comp) in rho.comps.iter_mut().enumerate() {
            let s = spin[(c / 2, c % 2)];
            comp.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = psi[i] * psi[j].conj() * s;
                }
            });
        }
        rho
    }

    /// Pure state `|Ψ⟩⟨Ψ|` from a spinor wavefunction.
    pub fn from_spinor_wavefunction(grid: Grid, psi: &[Spinor]) -> Self {
        let n = grid.n();
        let mut rho = DensityMatrix::zeros(grid);
        for (c, comp) in rho.comps.iter_mut().enumerate() {
            let (a, b) = (c / 2, c % 2);
            comp.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = psi[i][a] * psi[j][b].conj();
                }
            });
        }
        rho
    }

    /// `Σᵢ tr ϱ(xᵢ|xᵢ) Δx`.
    pub fn trace(&self) -> f64 {
        let n = self.grid.n();
        (0..n)
            .map(|i| (self.comps[0][i * n + i] + self.comps[3][i * n + i]).re)
            .sum::<f64>()
            * self.grid.dx()
    }

    /// `tr ϱ²` of the density operator.
    pub fn purity(&self) -> f64 {
        let n = self.grid.n();
        let dx2 = self.grid.dx().powi(2);
        let mut acc = 0.0;
        for a in 0..2 {
            for b in 0..2 {
                let x = &self.comps[ci(a, b)];
                let y = &self.comps[ci(b, a)];
                acc += (0..n)
                    .into_par_iter()
                    .map(|i| {
                        (0..n)
                            .map(|j| (x[i * n + j] * y[j * n + i]).re)
                            .sum::<f64>()
                    })
                    .sum::<f64>();
            }
        }
        acc * dx2
    }

    /// `max |ϱ_ab(i,j) - ϱ_ba(j,i)*|`.
    pub fn hermiticity_error(&self) -> f64 {
        let n = self.grid.n();
        let mut worst = 0.0_f64;
        for a in 0..2 {
            for b in 0..2 {
                let x = &self.comps[ci(a, b)];
                let y = &self.comps[ci(b, a)];
                let e = (0..n)
                    .into_par_iter()
                    .map(|i| {
                        (0..n)
                            .map(|j| (x[i * n + j] - y[j * n + i].conj()).norm())
                            .fold(0.0, f64::max)
                    })
                    .reduce(|| 0.0, f64::max);
                worst = worst.max(e);
            }
        }
        worst
    }

    /// Smallest eigenvalue of the density operator `ϱ Δx` (2N × 2N).
    pub fn min_eigenvalue(&self) -> f64 {
        let n = self.grid.n();
        let dx = self.grid.dx();
        let m = DMatrix::<Complex64>::from_fn(2 * n, 2 * n, |r, c| {
            let (i, a) = (r / 2, r % 2);
            let (j, b) = (c / 2, c % 2);
            let v = self.comps[ci(a, b)][i * n + j] * dx;
            let w = self.comps[ci(b, a)][j * n + i].conj() * dx;
            (v + w) * 0.5
        });
        m.symmetric_eigenvalues()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn max_abs_diff(&self, other: &DensityMatrix) -> f64 {
        self.comps
            .iter()
            .zip(&other.comps)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).norm()))
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.comps
            .iter()
            .flat_map(|a| a.iter().map(|x| x.norm()))
            .fold(0.0, f64::max)
    }

    /// Diagonal Pauli densities `(ρ₀(x), ρ⃗(x))`.
    pub fn diagonal_densities(&self) -> (Vec<f64>, Vec<[f64; 3]>) {
        let n = self.grid.n();
        let mut rho0 = Vec::with_capacity(n);
        let mut spin = Vec::with_capacity(n);
        for i in 0..n {
            let b = self.block(i, i);
            rho0.push((b[(0, 0)] + b[(1, 1)]).re);
            spin.push(pauli_vector(&b).map(|z| z.re));
        }
        (rho0, spin)
    }

    pub fn scale(&mut self, s: f64) {
        self.comps
            .iter_mut()
            .for_each(|c| c.iter_mut().for_each(|v| *v *= s));
    }

    pub fn add_scaled(&mut self, other: &DensityMatrix, s: f64) {
        for (a, b) in self.comps.iter_mut().zip(&other.comps) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y * s);
        }
    }
}

/// `(tr σ₁B, tr σ₂B, tr σ₃B)` of a 2×2 block.
pub fn pauli_vector(b: &Spin2) -> [Complex64; 3] {
    [
        b[(0, 1)] + b[(1, 0)],
        CI * (b[(0, 1)] - b[(1, 0)]),
        b[(0, 0)] - b[(1, 1)],
    ]
}

/// Gaussian wavepacket parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianPacket {
    pub x0: f64,
    pub p0: f64,
    pub sigma: f64,
}

impl GaussianPacket {
    pub fn validate(&self, grid: &Grid) -> Result<()> {
        if !(self.sigma >= 3.0 * grid.dx()) {
            return Err(Error::config(
                "initial.sigma_resolvable",
                format!(
                    "width {} is below 3Δx = {}",
                    self.sigma,
                    3.0 * grid.dx()
                ),
            ));
        }
        // |ψ|² at the farthest periodic image relative to the peak
        let tail = (-(grid.length() / 2.0).powi(2) / (2.0 * self.sigma * self.sigma)).exp();
        if tail >= 1e-12 {
            let max_sigma = grid.length() / 2.0 / (2.0 * 1e12_f64.ln()).sqrt();
            return Err(Error::config(
                "initial.sigma_tails",
                format!(
                    "width {} wraps around the periodic domain (edge/center = {tail:.2e}); \
                     need sigma < {max_sigma:.4}",
                    self.sigma
                ),
            ));
        }
        Ok(())
    }

    /// Normalized periodic samples `ψ(xᵢ)` with `Σ|ψ|²Δx = 1`.
    pub fn wavefunction(&self, grid: &Grid) -> Result<Vec<Complex64>> {
        self.validate(grid)?;
        let mut psi: Vec<Complex64> = grid
            .positions()
            .iter()
            .map(|x| {
                let d = grid.wrap(x - self.x0);
                Complex64::from_polar(
                    (-d * d / (4.0 * self.sigma * self.sigma)).exp(),
                    self.p0 * d,
                )
            })
            .collect();
        let norm = (psi.iter().map(|z| z.norm_sqr()).sum::<f64>() * grid.dx()).sqrt();
        psi.iter_mut().for_each(|z| *z /= norm);
        Ok(psi)
    }
}

/// Pure product state `ψ(x)χ` with a Gaussian `ψ`.
pub fn init_gaussian(grid: Grid, x0: f64, p0: f64, sigma: f64, chi: Spinor) -> Result<DensityMatrix> {
    let norm = chi.norm();
    if (norm - 1.0).abs() > 1e-10 {
        return Err(Error::config(
            "initial.spinor",
            format!("spinor must be normalized, |χ| = {norm}"),
        ));
    }
    let spin = chi * chi.adjoint();
    init_with_spin(grid, GaussianPacket { x0, p0, sigma }, &spin)
}

/// `ψψ† ⊗ 1/2`: spatially pure, spin maximally mixed.
pub fn init_unpolarized(grid: Grid, x0: f64, p0: f64, sigma: f64) -> Result<DensityMatrix> {
    let spin = Spin2::identity() * Complex64::new(0.5, 0.0);
    init_with_spin(grid, GaussianPacket { x0, p0, sigma }, &spin)
}

/// Gaussian spatial state with an arbitrary unit-trace spin density matrix.
pub fn init_with_spin(grid: Grid, packet: GaussianPacket, spin: &Spin2) -> Result<DensityMatrix> {
    let psi = packet.wavefunction(&grid)?;
    Ok(DensityMatrix::from_product(grid, &psi, spin))
}

/// Partially coherent (Gaussian-Schell) packet times `spin`:
/// `ϱ(x₁|x₂) ∝ e^{-X²/2σₓ²} e^{-σₚ²r²/2} e^{ip₀r}` with `X` the midpoint and `r`
/// the separation. Its Wigner function is a Gaussian of widths `σₓ`, `σₚ`.
pub fn init_partially_coherent(
    grid: Grid,
    packet: GaussianPacket,
    sigma_p: f64,
    spin: &Spin2,
) -> Result<DensityMatrix> {
    packet.validate(&grid)?;
    if !(sigma_p * packet.sigma >= 0.5 - 1e-12) {
        return Err(Error::config(
            "initial.sigma_p",
            format!(
                "momentum width must satisfy sigma·sigma_p ≥ 1/2, i.e. sigma_p ≥ {}",
                0.5 / packet.sigma
            ),
        ));
    }
    let n = grid.n();
    let mut kernel = vec![Complex64::new(0.0, 0.0); n * n];
    let mut norm = 0.0;
    for i in 0..n {
        for j in 0..n {
            let r = grid.wrap(grid.x(i) - grid.x(j));
            let mid = grid.wrap(grid.x(j) + 0.5 * r - packet.x0);
            let a = (-mid * mid / (2.0 * packet.sigma * packet.sigma) - 0.5 * sigma_p * sigma_p * r * r).exp();
            kernel[i * n + j] = Complex64::from_polar(a, packet.p0 * r);
        }
        norm += kernel[i * n + i].re;
    }
    let scale = 1.0 / (norm * grid.dx());
    let mut rho = DensityMatrix::zeros(grid);
    for a in 0..2 {
        for b in 0..2 {
            let s = spin[(a, b)] * scale;
            rho.comp_mut(a, b).iter_mut().zip(&kernel).for_each(|(d, k)| *d = k * s);
        }
    }
    Ok(rho)
}

/// Spin density matrix `(1 + b·σ)/2` for a Bloch vector `|b| ≤ 1`.
pub fn spin_from_bloch(b: &Vec3) -> Spin2 {
    (Spin2::identity() + sigma_dot(b)) * Complex64::new(0.5, 0.0)
}

/// Pauli decomposition `ϱ = (ρ₀ + ρ⃗·σ)/2` of every block.
#[derive(Clone, Debug)]
pub struct PauliFields {
    pub grid: Grid,
    pub rho0: Vec<Complex64>,
    pub rho_vec: [Vec<Complex64>; 3],
}

pub fn decompose(rho: &DensityMatrix) -> PauliFields {
    let [a, b, c, d] = &rho.comps;
    let rho0 = a.iter().zip(d).map(|(x, y)| x + y).collect();
    let rx = b.iter().zip(c).map(|(x, y)| x + y).collect();
    let ry = b.iter().zip(c).map(|(x, y)| CI * (x - y)).collect();
    let rz = a.iter().zip(d).map(|(x, y)| x - y).collect();
    PauliFields {
        grid: rho.grid,
        rho0,
        rho_vec: [rx, ry, rz],
    }
}

pub fn recompose(p: &PauliFields) -> DensityMatrix {
    let half = 0.5;
    let [rx, ry, rz] = &p.rho_vec;
    let c00 = p.rho0.iter().zip(rz).map(|(a, z)| (a + z) * half).collect();
    let c11 = p.rho0.iter().zip(rz).map(|(a, z)| (a - z) * half).collect();
    let c01 = rx.iter().zip(ry).map(|(x, y)| (x - CI * y) * half).collect();
    let c10 = rx.iter().zip(ry).map(|(x, y)| (x + CI * y) * half).collect();
    DensityMatrix {
        grid: p.grid,
        comps: [c00, c01, c10, c11],
    }
}

/// Dissipative right-hand side of the Pauli-component equations:
///
/// ```text
/// ∂ₜρ₀ = -(ν/4)(n₁ - n₂)² ρ₀ - (iν/2)(n₁ × n₂)·ρ⃗
/// ∂ₜρ⃗ = (ν/2) n₁(ρ⃗·n₂) + (ν/2)(n₁·ρ⃗) n₂ - (ν/4)(n₁ + n₂)² ρ⃗ + (iν/2)(n₁ × n₂) ρ₀
/// ```
///
/// with `n₁ = n(xᵢ)`, `n₂ = n(xⱼ)`.
pub fn pauli_rhs(n: &[Vec3], p: &PauliFields, nu: f64) -> PauliFields {
    let size = p.grid.n();
    let mut out = PauliFields {
        grid: p.grid,
        rho0: vec![Complex64::new(0.0, 0.0); size * size],
        rho_vec: std::array::from_fn(|_| vec![Complex64::new(0.0, 0.0); size * size]),
    };
    let half_inu = CI * (0.5 * nu);
    for i in 0..size {
        for j in 0..size {
            let k = i * size + j;
            let (n1, n2) = (&n[i], &n[j]);
            let r0 = p.rho0[k];
            let r = [p.rho_vec[0][k], p.rho_vec[1][k], p.rho_vec[2][k]];
            let dot = |v: &Vec3| r[0] * v.x + r[1] * v.y + r[2] * v.z;
            let cross = n1.cross(n2);
            let diff2 = (n1 - n2).norm_squared();
            let sum2 = (n1 + n2).norm_squared();
            out.rho0[k] = -0.25 * nu * diff2 * r0 - half_inu * dot(&cross);
            let (r_n2, n1_r) = (dot(n2), dot(n1));
            for c in 0..3 {
                out.rho_vec[c][k] = 0.5 * nu * (n1[c] * r_n2 + n1_r * n2[c])
                    - 0.25 * nu * sum2 * r[c]
                    + half_inu * cross[c] * r0;
            }
        }
    }
    out
}

/// Direct evaluation of `ν(P₊ϱP₊ + P₋ϱP₋ - ϱ)` with explicit projectors.
pub fn dissipator_rhs(rho: &DensityMatrix, n: &[Vec3], nu: f64) -> DensityMatrix {
    let size = rho.grid.n();
    let proj: Vec<[Spin2; 2]> = n.iter().map(projectors).collect();
    let mut out = DensityMatrix::zeros(rho.grid);
    for i in 0..size {
        for j in 0..size {
            let b = rho.block(i, j);
            let phi = proj[i][0] * b * proj[j][0] + proj[i][1] * b * proj[j][1];
            out.set_block(i, j, &((phi - b) * Complex64::new(nu, 0.0)));
        }
    }
    out
}

/// Exact solution of `∂ₜϱ = ν(Φ(ϱ) - ϱ)` over `dt`:
/// `ϱ ← e^{-νΔt}ϱ + (1 - e^{-νΔt})Φ(ϱ)`, using `Φ(B)ᵢⱼ = (B + NᵢBNⱼ)/2`,
/// `N = n·σ`.
pub fn dissipator_channel(rho: &mut DensityMatrix, n: &[Vec3], nu: f64, dt: f64) {
    assert!(dt >= 0.0, "negative time step");
    let keep = (-nu * dt).exp();
    if keep == 1.0 {
        return;
    }
    let size = rho.grid.n();
    let sig: Vec<Spin2> = n.iter().map(sigma_dot).collect();
    let w_keep = Complex64::new(keep, 0.0);
    let w_phi = Complex64::new(0.5 * (1.0 - keep), 0.0);
    let [c00, c01, c10, c11] = &mut rho.comps;
    c00.par_chunks_mut(size)
        .zip(c01.par_chunks_mut(size))
        .zip(c10.par_chunks_mut(size))
        .zip(c11.par_chunks_mut(size))
        .enumerate()
        .for_each(|(i, (((r00, r01), r10), r11))| {
            let si = &sig[i];
            for j in 0..size {
                let b = Spin2::new(r00[j], r01[j], r10[j], r11[j]);
                let out = b * w_keep + (b + si * b * sig[j]) * w_phi;
                r00[j] = out[(0, 0)];
                r01[j] = out[(0, 1)];
                r10[j] = out[(1, 0)];
                r11[j] = out[(1, 1)];
            }
        });
}

/// Exact free evolution `ϱ ← e^{-ip²τ/2m} ϱ e^{+ip²τ/2m}`.
pub fn kinetic_step(spec: &Spectral, rho: &mut DensityMatrix, tau: f64, mass: f64) {
    if tau == 0.0 {
        return;
    }
    let n = spec.grid().n();
    let phases = spec.free_phases(tau, mass);
    let conj: Vec<Complex64> = phases.iter().map(|z| z.conj()).collect();
    let mut scratch = vec![Complex64::new(0.0, 0.0); n * n];
    for comp in rho.comps.iter_mut() {
        // along the second index: ϱU†
        spec.apply_multiplier_rows(comp, &conj);
        // along the first index: Uϱ
        transpose_into(comp, &mut scratch, n);
        spec.apply_multiplier_rows(&mut scratch, &phases);
        transpose_into(&scratch, comp, n);
    }
}

/// `(Mϱ_c)(xᵢ|xᵢ)` where `M` is the Fourier multiplier `mult` acting on the
/// first index.
pub(crate) fn first_index_diagonal(spec: &Spectral, comp: &[Complex64], mult: &[Complex64]) -> Vec<Complex64> {
    let n = spec.grid().n();
    let mut t = vec![Complex64::new(0.0, 0.0); n * n];
    transpose_into(comp, &mut t, n);
    spec.apply_multiplier_rows(&mut t, mult);
    (0..n).map(|j| t[j * n + j]).collect()
}

/// Momentum probabilities `P(k)` in FFT order (sum to the trace).
pub fn momentum_distribution(spec: &Spectral, rho: &DensityMatrix) -> Vec<f64> {
    let n = spec.grid().n();
    let mut out = vec![0.0; n];
    let mut t = vec![Complex64::new(0.0, 0.0); n * n];
    for a in 0..2 {
        // v(i, k) = Σⱼ ϱ(i,j) e^{+ikxⱼ}
        let mut v: Vec<Complex64> = rho.comp(a, a).iter().map(|z| z.conj()).collect();
        v.par_chunks_mut(n).for_each(|row| {
            spec.forward(row);
            row.iter_mut().for_each(|z| *z = z.conj());
        });
        transpose_into(&v, &mut t, n);
        t.par_chunks_mut(n).for_each(|row| spec.forward(row));
        for k in 0..n {
            out[k] += t[k * n + k].re;
        }
    }
    let s = rho.grid.dx() / n as f64;
    out.iter_mut().for_each(|v| *v *= s);
    out
}

/// Default step bound `min(0.1/ν, 0.1·m·Δx², T/1000)`.
pub fn step_bound(nu: f64, mass: f64, dx: f64, t_end: f64) -> f64 {
    let mut b = (0.1 * mass * dx * dx).min(t_end / 1000.0);
    if nu > 0.0 {
        b = b.min(0.1 / nu);
    }
    b
}

/// Running record of the conservation checks.
#[derive(Clone, Debug, serde::Serialize)]
pub struct ConservationMonitor {
    pub initial_trace: f64,
    pub max_trace_drift: f64,
    pub max_step_trace_change: f64,
    pub max_hermiticity: f64,
    pub min_eigenvalue: f64,
    pub positivity_checks: usize,
    pub elapsed: f64,
}

impl ConservationMonitor {
    /// Worst trace drift per unit simulated time.
    pub fn trace_drift_rate(&self) -> f64 {
        if self.elapsed > 0.0 {
            self.max_trace_drift / self.elapsed
        } else {
            self.max_trace_drift
        }
    }
}

/// Threshold below which a negative eigenvalue aborts a run.
pub const POSITIVITY_FLOOR: f64 = -1e-8;

/// Strang-split propagator for the master equation.
#[derive(Clone, Debug)]
pub struct LindbladSolver {
    field: AxisField,
    spectral: Spectral,
    mass: f64,
    nu: f64,
    dt: f64,
    /// Eigenvalue check cadence in steps; 0 disables.
    pub positivity_every: usize,
}

impl LindbladSolver {
    pub fn new(field: AxisField, mass: f64, nu: f64, dt: f64) -> Result<Self> {
        if !(nu >= 0.0) {
            return Err(Error::config("physics.nu", "decoherence rate must be ≥ 0"));
        }
        if !(mass > 0.0) {
            return Err(Error::config("physics.mass", "mass must be > 0"));
        }
        if !(dt > 0.0) {
            return Err(Error::config("time.dt", "time step must be > 0"));
        }
        let spectral = Spectral::new(*field.grid());
        Ok(LindbladSolver {
            field,
            spectral,
            mass,
            nu,
            dt,
            positivity_every: 50,
        })
    }

    pub fn field(&self) -> &AxisField {
        &self.field
    }

    pub fn spectral(&self) -> &Spectral {
        &self.spectral
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn kinetic_half_step(&self, rho: &mut DensityMatrix) {
        kinetic_step(&self.spectral, rho, 0.5 * self.dt, self.mass);
    }

    /// One Strang step from time `t`: kinetic(Δt/2), dissipator(Δt), kinetic(Δt/2).
    /// The axis field is evaluated at the step midpoint.
    pub fn step(&self, rho: &mut DensityMatrix, t: f64) {
        self.kinetic_half_step(rho);
        let n = self.field.n_at(t + 0.5 * self.dt);
        dissipator_channel(rho, &n, self.nu, self.dt);
        self.kinetic_half_step(rho);
    }

    /// Observables of `rho` at time `t`.
    pub fn observe(&self, rho: &DensityMatrix, t: f64, with_eigenvalue: bool) -> ObservableRecord {
        observe(&self.spectral, rho, t, &self.field, self.nu, with_eigenvalue)
    }

    /// Advance `n_steps` steps from `t0`, recording observables at `t0` and
    /// after every `output_every` steps. Adjacent kinetic half-steps between
    /// outputs are merged.
    pub fn run(
        &self,
        rho: &mut DensityMatrix,
        t0: f64,
        n_steps: usize,
        output_every: usize,
    ) -> Result<(TimeSeries, ConservationMonitor)> {
        self.run_with(rho, t0, n_steps, output_every, |_, _| Ok(()))
    }

    /// Like [`run`](Self::run) but also hands every materialized output state
    /// to `visit`.
    pub fn run_with(
        &self,
        rho: &mut DensityMatrix,
        t0: f64,
        n_steps: usize,
        output_every: usize,
        mut visit: impl FnMut(f64, &DensityMatrix) -> Result<()>,
    ) -> Result<(TimeSeries, ConservationMonitor)> {
        let output_every = output_every.max(1);
        let initial_trace = rho.trace();
        let mut monitor = ConservationMonitor {
            initial_trace,
            max_trace_drift: 0.0,
            max_step_trace_change: 0.0,
            max_hermiticity: rho.hermiticity_error(),
            min_eigenvalue: f64::INFINITY,
            positivity_checks: 0,
            elapsed: n_steps as f64 * self.dt,
        };
        let mut series = TimeSeries::default();
        let check_pos = self.positivity_every > 0;
        let first = self.observe(rho, t0, check_pos);
        if let Some(ev) = first.min_eigenvalue {
            monitor.min_eigenvalue = ev;
            monitor.positivity_checks += 1;
        }
        series.push(first);
        visit(t0, rho)?;
        let mut last_trace = initial_trace;
        let mut last_output_step = 0usize;

        if n_steps > 0 {
            self.kinetic_half_step(rho);
        }
        for s in 0..n_steps {
            let t_mid = t0 + (s as f64 + 0.5) * self.dt;
            let n = self.field.n_at(t_mid);
            dissipator_channel(rho, &n, self.nu, self.dt);
            let done = s + 1;
            let is_output = done % output_every == 0 || done == n_steps;
            let is_pos = check_pos && done % self.positivity_every == 0;
            if is_output || is_pos {
                self.kinetic_half_step(rho);
                let t = t0 + done as f64 * self.dt;
                let tr = rho.trace();
                let steps_since = (done - last_output_step) as f64;
                monitor.max_trace_drift = monitor.max_trace_drift.max((tr - initial_trace).abs());
                monitor.max_step_trace_change = monitor
                    .max_step_trace_change
                    .max((tr - last_trace).abs() / steps_since);
                monitor.max_hermiticity = monitor.max_hermiticity.max(rho.hermiticity_error());
                last_trace = tr;
                last_output_step = done;
                if is_pos {
                    let ev = rho.min_eigenvalue();
                    monitor.min_eigenvalue = monitor.min_eigenvalue.min(ev);
                    monitor.positivity_checks += 1;
                    if ev < POSITIVITY_FLOOR {
                        return Err(Error::Numerical(format!(
                            "density matrix lost positivity at t = {t}: min eigenvalue {ev:.3e}"
                        )));
                    }
                }
                if is_output {
                    series.push(self.observe(rho, t, false));
                    visit(t, rho)?;
                }
                if done < n_steps {
                    self.kinetic_half_step(rho);
                }
            } else {
                kinetic_step(&self.spectral, rho, self.dt, self.mass);
            }
        }
        Ok((series, monitor))
    }
}

/// Observables of a density matrix; `field` supplies the force field at `t`.
pub fn observe(
    spec: &Spectral,
    rho: &DensityMatrix,
    t: f64,
    field: &AxisField,
    nu: f64,
    with_eigenvalue: bool,
) -> ObservableRecord {
    let grid = *rho.grid();
    let dx = grid.dx();
    let xs = grid.positions();
    let (density, spin_density) = rho.diagonal_densities();
    let trace: f64 = density.iter().sum::<f64>() * dx;
    let mean_x = xs.iter().zip(&density).map(|(x, d)| x * d).sum::<f64>() * dx / trace;
    let var_x = xs
        .iter()
        .zip(&density)
        .map(|(x, d)| (x - mean_x).powi(2) * d)
        .sum::<f64>()
        * dx
        / trace;

    let kp: Vec<Complex64> = spec.k_odd().iter().map(|&k| Complex64::new(k, 0.0)).collect();
    let k2: Vec<Complex64> = spec.k().iter().map(|&k| Complex64::new(k * k, 0.0)).collect();
    let d: Vec<Vec<Complex64>> = (0..4)
        .map(|c| first_index_diagonal(spec, &rho.comps[c], &kp))
        .collect();
    let mut current = Vec::with_capacity(grid.n());
    let mut mean_p = 0.0;
    for i in 0..grid.n() {
        let b = Spin2::new(d[0][i], d[1][i], d[2][i], d[3][i]);
        mean_p += (b[(0, 0)] + b[(1, 1)]).re;
        current.push(pauli_vector(&b).map(|z| z.re));
    }
    mean_p *= dx;
    let p2_00 = first_index_diagonal(spec, &rho.comps[0], &k2);
    let p2_11 = first_index_diagonal(spec, &rho.comps[3], &k2);
    let mean_p2 = p2_00.iter().zip(&p2_11).map(|(a, b)| (a + b).re).sum::<f64>() * dx;

    let mut orientation = [0.0; 3];
    for s in &spin_density {
        for c in 0..3 {
            orientation[c] += s[c] * dx;
        }
    }
    let n = field.n_at(t);
    let dn = field.dn_at(t);
    let force_field: Vec<Vec3> = dn.iter().zip(&n).map(|(a, b)| a.cross(b)).collect();
    let force = force_integral(nu, &force_field, &spin_density, dx);

    ObservableRecord {
        t,
        trace,
        purity: rho.purity(),
        mean_x,
        var_x,
        mean_p,
        mean_p2,
        density,
        spin_density,
        current,
        orientation,
        force,
        min_eigenvalue: with_eigenvalue.then(|| rho.min_eigenvalue()),
    }
}

/// Discrete Wigner transform of every Pauli component.
///
/// `W(xᵢ, p) = (Δx/π) Σₘ e^{-2ipmΔx} ρ(x_{i+m} | x_{i-m})`, summed over the
/// pairs whose separation `2|m|Δx` does not exceed `L/2` (the pair at exactly
/// `L/2` gets weight ½). Longer separations would alias onto the antipodal
/// midpoint. The momentum grid has spacing `π/L` and `N` points centred on
/// zero; the x-marginal is exact.
pub fn wigner_transform(rho: &DensityMatrix) -> PhaseSpaceState {
    let grid = *rho.grid();
    let n = grid.n();
    let dx = grid.dx();
    let pauli = decompose(rho);
    let dp = std::f64::consts::PI / grid.length();
    let half = n / 2;
    let mgrid = MomentumGrid::new(-(half as f64) * dp, dp, n);
    let spec = Spectral::new(grid);
    let m_max = n / 4;
    let edge_weight = if n.is_multiple_of(4) { 0.5 } else { 1.0 };
    let sources = [&pauli.rho0, &pauli.rho_vec[0], &pauli.rho_vec[1], &pauli.rho_vec[2]];
    let fields: Vec<Vec<f64>> = sources
        .iter()
        .map(|src| {
            let mut buf = vec![Complex64::new(0.0, 0.0); n * n];
            buf.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
                for m in -(m_max as isize)..=(m_max as isize) {
                    let a = (i as isize + m).rem_euclid(n as isize) as usize;
                    let b = (i as isize - m).rem_euclid(n as isize) as usize;
                    let w = if m.unsigned_abs() == m_max { edge_weight } else { 1.0 };
                    row[m.rem_euclid(n as isize) as usize] += src[a * n + b] * w;
                }
                spec.forward(row);
            });
            let mut out = vec![0.0; n * n];
            for i in 0..n {
                for k in 0..n {
                    // sorted index 0 is FFT index -N/2
                    let fft_idx = (k + n - half) % n;
                    out[i * n + k] = buf[i * n + fft_idx].re * dx / std::f64::consts::PI;
                }
            }
            out
        })
        .collect();
    let mut it = fields.into_iter();
    let w0 = it.next().unwrap();
    let wv = [it.next().unwrap(), it.next().unwrap(), it.next().unwrap()];
    PhaseSpaceState::from_fields(grid, mgrid, w0, wv)
}
