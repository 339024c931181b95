//! Pure-state unraveling: free spectral evolution interrupted by global
//! unselective spin measurements along `n(x)` at Poisson times of rate `ν`.
//!
//! At a jump the outcome `+` occurs with probability `⟨ψ|P₊|ψ⟩` and the state
//! is replaced by `P±ψ/‖P±ψ‖`. Averaging `|ψ⟩⟨ψ|` over the process reproduces
//! the master equation.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fields::{sigma_dot, AxisField, Spin2, Spinor, Vec3};
use crate::grid::{Grid, Spectral};
use crate::lindblad::{pauli_vector, GaussianPacket};
use crate::observables::{force_integral, ObservableRecord, TimeSeries};

/// Spinor wavefunction `ψ_a(xᵢ)` stored as two component arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct Wavefunction {
    grid: Grid,
    pub up: Vec<Complex64>,
    pub down: Vec<Complex64>,
}

impl Wavefunction {
    pub fn product(grid: Grid, psi: &[Complex64], chi: &Spinor) -> Self {
        Wavefunction {
            grid,
            up: psi.iter().map(|z| z * chi[0]).collect(),
            down: psi.iter().map(|z| z * chi[1]).collect(),
        }
    }

    pub fn gaussian(grid: Grid, packet: GaussianPacket, chi: &Spinor) -> Result<Self> {
        let psi = packet.wavefunction(&grid)?;
        Ok(Self::product(grid, &psi, chi))
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    /// `Σᵢₐ |ψₐ(xᵢ)|² Δx`.
    pub fn norm_sqr(&self) -> f64 {
        self.up
            .iter()
            .chain(&self.down)
            .map(|z| z.norm_sqr())
            .sum::<f64>()
            * self.grid.dx()
    }

    pub fn spinor(&self, i: usize) -> Spinor {
        Spinor::new(self.up[i], self.down[i])
    }

    pub fn to_spinors(&self) -> Vec<Spinor> {
        (0..self.grid.n()).map(|i| self.spinor(i)).collect()
    }

    fn scale(&mut self, s: f64) {
        self.up.iter_mut().chain(self.down.iter_mut()).for_each(|z| *z *= s);
    }
}

/// One measurement event.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Jump {
    pub t: f64,
    /// `+1` or `-1`.
    pub outcome: i8,
}

/// Final state and jump history of one trajectory.
#[derive(Clone, Debug)]
pub struct TrajectoryState {
    pub psi: Wavefunction,
    pub jumps: Vec<Jump>,
}

/// Threshold on `‖P±ψ‖²` below which a drawn branch is treated as a bug.
pub const DEGENERATE_BRANCH: f64 = 1e-14;

#[derive(Clone, Debug)]
pub struct TrajectorySolver {
    field: AxisField,
    spectral: Spectral,
    mass: f64,
    nu: f64,
}

impl TrajectorySolver {
    pub fn new(field: AxisField, mass: f64, nu: f64) -> Result<Self> {
        if !(nu >= 0.0) {
            return Err(Error::config("physics.nu", "decoherence rate must be ≥ 0"));
        }
        if !(mass > 0.0) {
            return Err(Error::config("physics.mass", "mass must be > 0"));
        }
        let spectral = Spectral::new(*field.grid());
        Ok(TrajectorySolver {
            field,
            spectral,
            mass,
            nu,
        })
    }

    pub fn spectral(&self) -> &Spectral {
        &self.spectral
    }

    pub fn field(&self) -> &AxisField {
        &self.field
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    /// Exact free evolution `e^{-ip²τ/2m}ψ`.
    pub fn free_evolve(&self, psi: &mut Wavefunction, tau: f64) {
        if tau == 0.0 {
            return;
        }
        let phases = self.spectral.free_phases(tau, self.mass);
        self.spectral.apply_multiplier(&mut psi.up, &phases);
        self.spectral.apply_multiplier(&mut psi.down, &phases);
    }

    /// One global unselective measurement at time `t`, with outcome drawn
    /// from `u ∈ [0, 1)`.
    pub fn measure(&self, psi: &mut Wavefunction, t: f64, u: f64) -> Result<i8> {
        let n = self.field.n_at(t);
        let dx = psi.grid.dx();
        let half = Complex64::new(0.5, 0.0);
        let projected: Vec<(Spinor, Spinor)> = n
            .iter()
            .enumerate()
            .map(|(i, ni)| {
                let s = psi.spinor(i);
                let ns = sigma_dot(ni) * s;
                ((s + ns) * half, (s - ns) * half)
            })
            .collect();
        let p_plus: f64 = projected.iter().map(|(p, _)| p.norm_squared()).sum::<f64>() * dx;
        let total = psi.norm_sqr();
        let outcome: i8 = if u * total < p_plus { 1 } else { -1 };
        let weight = if outcome == 1 { p_plus } else { total - p_plus };
        if weight < DEGENERATE_BRANCH {
            return Err(Error::Internal(format!(
                "measurement drew branch {outcome:+} with weight {weight:.3e} at t = {t}"
            )));
        }
        for (i, (p, m)) in projected.into_iter().enumerate() {
            let v = if outcome == 1 { p } else { m };
            psi.up[i] = v[0];
            psi.down[i] = v[1];
        }
        psi.scale((total / weight).sqrt());
        Ok(outcome)
    }

    /// Evolve one trajectory, sampling observables at `times` (ascending, the
    /// first ≥ `t0`). Jumps are applied at their exact Poisson times.
    pub fn evolve_trajectory(
        &self,
        psi0: Wavefunction,
        t0: f64,
        times: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<(TrajectoryState, Vec<ObservableRecord>)> {
        let mut psi = psi0;
        let mut jumps = Vec::new();
        let mut records = Vec::with_capacity(times.len());
        let mut t = t0;
        let waiting = (self.nu > 0.0).then(|| Exp::new(self.nu).expect("positive rate"));
        let mut next_jump = match &waiting {
            Some(d) => t0 + d.sample(rng),
            None => f64::INFINITY,
        };
        for &t_out in times {
            while next_jump <= t_out {
                self.free_evolve(&mut psi, next_jump - t);
                t = next_jump;
                let u: f64 = rng.random();
                let outcome = self.measure(&mut psi, t, u)?;
                jumps.push(Jump { t, outcome });
                next_jump = t + waiting.as_ref().map_or(f64::INFINITY, |d| d.sample(rng));
            }
            self.free_evolve(&mut psi, t_out - t);
            t = t_out;
            records.push(self.observe(&psi, t));
        }
        Ok((TrajectoryState { psi, jumps }, records))
    }

    /// Observables of a pure state, with the same conventions as the
    /// density-matrix solver.
    pub fn observe(&self, psi: &Wavefunction, t: f64) -> ObservableRecord {
        let grid = psi.grid;
        let n = grid.n();
        let dx = grid.dx();
        let kp: Vec<Complex64> = self.spectral.k_odd().iter().map(|&k| Complex64::new(k, 0.0)).collect();
        let k2: Vec<Complex64> = self.spectral.k().iter().map(|&k| Complex64::new(k * k, 0.0)).collect();
        let apply = |v: &[Complex64], m: &[Complex64]| {
            let mut b = v.to_vec();
            self.spectral.apply_multiplier(&mut b, m);
            b
        };
        let (pu, pd) = (apply(&psi.up, &kp), apply(&psi.down, &kp));
        let (p2u, p2d) = (apply(&psi.up, &k2), apply(&psi.down, &k2));
        let mut density = Vec::with_capacity(n);
        let mut spin_density = Vec::with_capacity(n);
        let mut current = Vec::with_capacity(n);
        let (mut mean_p, mut mean_p2) = (0.0, 0.0);
        for i in 0..n {
            let (a, b) = (psi.up[i], psi.down[i]);
            let block = Spin2::new(a * a.conj(), a * b.conj(), b * a.conj(), b * b.conj());
            density.push(a.norm_sqr() + b.norm_sqr());
            spin_density.push(pauli_vector(&block).map(|z| z.re));
            let d = Spin2::new(pu[i] * a.conj(), pu[i] * b.conj(), pd[i] * a.conj(), pd[i] * b.conj());
            mean_p += (d[(0, 0)] + d[(1, 1)]).re;
            current.push(pauli_vector(&d).map(|z| z.re));
            mean_p2 += (p2u[i] * a.conj() + p2d[i] * b.conj()).re;
        }
        let trace = density.iter().sum::<f64>() * dx;
        let xs = grid.positions();
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
        let nn = self.field.n_at(t);
        let dn = self.field.dn_at(t);
        let force_field: Vec<Vec3> = dn.iter().zip(&nn).map(|(a, b)| a.cross(b)).collect();
        ObservableRecord {
            t,
            trace,
            purity: 1.0,
            mean_x,
            var_x,
            mean_p: mean_p * dx,
            mean_p2: mean_p2 * dx,
            force: force_integral(self.nu, &force_field, &spin_density, dx),
            density,
            spin_density,
            current,
            orientation,
            min_eigenvalue: None,
        }
    }
}

/// Spin part of the initial ensemble.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InitialSpin {
    Pure(Spinor),
    /// `1/2`: trajectories alternate between `|↑⟩` (even index) and `|↓⟩`.
    Unpolarized,
}

impl InitialSpin {
    fn spinor_for(&self, index: u64) -> Spinor {
        let one = Complex64::new(1.0, 0.0);
        let zero = Complex64::new(0.0, 0.0);
        match self {
            InitialSpin::Pure(chi) => *chi,
            InitialSpin::Unpolarized if index.is_multiple_of(2) => Spinor::new(one, zero),
            InitialSpin::Unpolarized => Spinor::new(zero, one),
        }
    }
}

/// Per-trajectory RNG: the base seed selects the key, the trajectory index
/// the stream.
pub fn trajectory_rng(base_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base_seed);
    rng.set_stream(index);
    rng
}

/// Ensemble mean and standard error at every output time.
#[derive(Clone, Debug, Serialize)]
pub struct EnsembleResult {
    pub n_traj: usize,
    pub base_seed: u64,
    pub mean: TimeSeries,
    pub stderr: TimeSeries,
    pub jump_counts: Vec<usize>,
    /// Jump log of trajectory 0.
    pub first_jump_log: Vec<Jump>,
}

/// Flattened numeric view of a record, for accumulation.
fn flatten(r: &ObservableRecord) -> Vec<f64> {
    let mut v = vec![r.trace, r.mean_x, r.var_x, r.mean_p, r.mean_p2, r.force];
    v.extend_from_slice(&r.orientation);
    v.extend_from_slice(&r.density);
    v.extend(r.spin_density.iter().flatten());
    v.extend(r.current.iter().flatten());
    v
}

fn unflatten(t: f64, v: &[f64], n: usize) -> ObservableRecord {
    let triples = |s: &[f64]| s.chunks(3).map(|c| [c[0], c[1], c[2]]).collect::<Vec<_>>();
    let d0 = 9;
    ObservableRecord {
        t,
        trace: v[0],
        purity: f64::NAN,
        mean_x: v[1],
        var_x: v[2],
        mean_p: v[3],
        mean_p2: v[4],
        force: v[5],
        orientation: [v[6], v[7], v[8]],
        density: v[d0..d0 + n].to_vec(),
        spin_density: triples(&v[d0 + n..d0 + 4 * n]),
        current: triples(&v[d0 + 4 * n..d0 + 7 * n]),
        min_eigenvalue: None,
    }
}

/// Run `n_traj` trajectories from `ψ(x)χ` and reduce them in index order.
/// The result does not depend on `parallel`.
pub fn ensemble_average(
    solver: &TrajectorySolver,
    packet: GaussianPacket,
    spin: InitialSpin,
    t0: f64,
    times: &[f64],
    n_traj: usize,
    base_seed: u64,
    parallel: bool,
) -> Result<EnsembleResult> {
    if n_traj < 2 {
        return Err(Error::config(
            "trajectories.n_traj",
            format!("need at least 2 trajectories for error bars, got {n_traj}"),
        ));
    }
    let grid = *solver.field.grid();
    let psi = packet.wavefunction(&grid)?;
    let run_one = |index: usize| -> Result<(Vec<Vec<f64>>, Vec<Jump>)> {
        let mut rng = trajectory_rng(base_seed, index as u64);
        let psi0 = Wavefunction::product(grid, &psi, &spin.spinor_for(index as u64));
        let (state, records) = solver.evolve_trajectory(psi0, t0, times, &mut rng)?;
        Ok((records.iter().map(flatten).collect(), state.jumps))
    };
    let width = 9 + 7 * grid.n();
    let mut sum = vec![vec![0.0; width]; times.len()];
    let mut sum_sq = vec![vec![0.0; width]; times.len()];
    let mut jump_counts = Vec::with_capacity(n_traj);
    let mut first_jump_log = Vec::new();
    // bounded memory: evaluate a block, then fold it in index order
    const BLOCK: usize = 64;
    for start in (0..n_traj).step_by(BLOCK) {
        let block = start..(start + BLOCK).min(n_traj);
        let results: Vec<Result<(Vec<Vec<f64>>, Vec<Jump>)>> = if parallel {
            block.clone().into_par_iter().map(run_one).collect()
        } else {
            block.clone().map(run_one).collect()
        };
        for (index, res) in block.zip(results) {
            let (flat, jumps) = res?;
            for (k, v) in flat.iter().enumerate() {
                for (j, x) in v.iter().enumerate() {
                    sum[k][j] += x;
                    sum_sq[k][j] += x * x;
                }
            }
            jump_counts.push(jumps.len());
            if index == 0 {
                first_jump_log = jumps;
            }
        }
    }
    let nf = n_traj as f64;
    let mut mean = TimeSeries::default();
    let mut stderr = TimeSeries::default();
    for (k, &t) in times.iter().enumerate() {
        let m: Vec<f64> = sum[k].iter().map(|s| s / nf).collect();
        let se: Vec<f64> = sum_sq[k]
            .iter()
            .zip(&m)
            .map(|(sq, mu)| (((sq / nf - mu * mu) * nf / (nf - 1.0)).max(0.0) / nf).sqrt())
            .collect();
        mean.push(unflatten(t, &m, grid.n()));
        stderr.push(unflatten(t, &se, grid.n()));
    }
    Ok(EnsembleResult {
        n_traj,
        base_seed,
        mean,
        stderr,
        jump_counts,
        first_jump_log,
    })
}

/// Sample statistics of jump counts against Poisson(`λ`).
#[derive(Clone, Debug, Serialize)]
pub struct PoissonCheck {
    pub lambda: f64,
    pub mean: f64,
    pub variance: f64,
    /// `(mean - λ)/√(λ/n)`.
    pub mean_z: f64,
    /// `(var - λ)/√((λ + 2λ²)/n)`.
    pub variance_z: f64,
}

impl PoissonCheck {
    pub fn new(counts: &[usize], lambda: f64) -> Self {
        let n = counts.len() as f64;
        let mean = counts.iter().sum::<usize>() as f64 / n;
        let variance = counts.iter().map(|&c| (c as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        PoissonCheck {
            lambda,
            mean,
            variance,
            mean_z: (mean - lambda) / (lambda / n).sqrt(),
            variance_z: (variance - lambda) / ((lambda + 2.0 * lambda * lambda) / n).sqrt(),
        }
    }

    pub fn within(&self, sigmas: f64) -> bool {
        self.mean_z.abs() <= sigmas && self.variance_z.abs() <= sigmas
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fields::{build_axis_field, FieldKind};
    use crate::lindblad::{init_gaussian, kinetic_step, observe, DensityMatrix};

    fn c(re: f64) -> Complex64 {
        Complex64::new(re, 0.0)
    }

    fn grid() -> Grid {
        Grid::new(64, 32.0).unwrap()
    }

    fn packet() -> GaussianPacket {
        GaussianPacket {
            x0: 0.0,
            p0: 0.4,
            sigma: 2.0,
        }
    }

    fn helix(g: Grid) -> AxisField {
        build_axis_field(FieldKind::Helix { wavenumber: 2.0 * g.dk() }, g).unwrap()
    }

    #[test]
    fn zero_rate_is_free_evolution() {
        let g = grid();
        let chi = Spinor::new(c(0.6), Complex64::new(0.0, 0.8));
        let solver = TrajectorySolver::new(helix(g), 1.0, 0.0).unwrap();
        let psi0 = Wavefunction::gaussian(g, packet(), &chi).unwrap();
        let mut rng = trajectory_rng(1, 0);
        let (state, recs) = solver.evolve_trajectory(psi0, 0.0, &[0.5, 1.5], &mut rng).unwrap();
        assert!(state.jumps.is_empty());
        // same spectral operator as the density-matrix kinetic step
        let spec = Spectral::new(g);
        let mut rho = init_gaussian(g, 0.0, 0.4, 2.0, chi).unwrap();
        kinetic_step(&spec, &mut rho, 1.5, 1.0);
        let pure = DensityMatrix::from_spinor_wavefunction(g, &state.psi.to_spinors());
        assert!(pure.max_abs_diff(&rho) < 1e-13);
        let r = observe(&spec, &rho, 1.5, solver.field(), 0.0, false);
        assert!((recs[1].mean_p - r.mean_p).abs() < 1e-12);
        assert!((recs[1].mean_p2 - r.mean_p2).abs() < 1e-10);
        for i in 0..g.n() {
            for k in 0..3 {
                assert!((recs[1].current[i][k] - r.current[i][k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn eigenstate_always_gives_plus() {
        let g = grid();
        let f = build_axis_field(FieldKind::Constant { axis: Vec3::z() }, g).unwrap();
        let solver = TrajectorySolver::new(f, 1.0, 5.0).unwrap();
        let chi = Spinor::new(c(1.0), c(0.0));
        let psi0 = Wavefunction::gaussian(g, packet(), &chi).unwrap();
        let mut free = psi0.clone();
        let mut rng = trajectory_rng(9, 3);
        let (state, _) = solver.evolve_trajectory(psi0, 0.0, &[2.0], &mut rng).unwrap();
        assert!(state.jumps.len() > 3);
        assert!(state.jumps.iter().all(|j| j.outcome == 1));
        solver.free_evolve(&mut free, 2.0);
        let d = state
            .psi
            .up
            .iter()
            .zip(&free.up)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(d < 1e-12);
    }

    #[test]
    fn measurement_keeps_norm_and_projects() {
        let g = grid();
        let f = helix(g);
        let solver = TrajectorySolver::new(f.clone(), 1.0, 1.0).unwrap();
        let chi = Spinor::new(c(1.0), c(0.0));
        for u in [0.1, 0.9] {
            let mut psi = Wavefunction::gaussian(g, packet(), &chi).unwrap();
            let outcome = solver.measure(&mut psi, 0.0, u).unwrap();
            assert!((psi.norm_sqr() - 1.0).abs() < 1e-12);
            let n = f.n_at(0.0);
            for i in 0..g.n() {
                let s = psi.spinor(i);
                let ns = sigma_dot(&n[i]) * s;
                assert!((ns - s * c(outcome as f64)).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn fixed_seed_is_bitwise_reproducible() {
        let g = grid();
        let solver = TrajectorySolver::new(helix(g), 1.0, 2.0).unwrap();
        let times = [0.25, 0.5];
        let a = ensemble_average(&solver, packet(), InitialSpin::Unpolarized, 0.0, &times, 16, 42, true).unwrap();
        let b = ensemble_average(&solver, packet(), InitialSpin::Unpolarized, 0.0, &times, 16, 42, false).unwrap();
        let fa: Vec<u64> = a.mean.records.iter().flat_map(flatten).map(f64::to_bits).collect();
        let fb: Vec<u64> = b.mean.records.iter().flat_map(flatten).map(f64::to_bits).collect();
        assert_eq!(fa, fb);
        assert_eq!(a.jump_counts, b.jump_counts);
    }

    #[test]
    fn streams_are_distinct() {
        let mut a = trajectory_rng(5, 0);
        let mut b = trajectory_rng(5, 1);
        let xa: u64 = a.random();
        let xb: u64 = b.random();
        assert_ne!(xa, xb);
    }

    #[test]
    fn poisson_statistics() {
        let g = grid();
        let f = build_axis_field(FieldKind::Constant { axis: Vec3::z() }, g).unwrap();
        let (nu, t) = (3.0, 1.0);
        let solver = TrajectorySolver::new(f, 1.0, nu).unwrap();
        let res = ensemble_average(&solver, packet(), InitialSpin::Unpolarized, 0.0, &[t], 1000, 7, true).unwrap();
        let check = PoissonCheck::new(&res.jump_counts, nu * t);
        assert!(check.within(3.0), "{check:?}");
    }

    #[test]
    fn unpolarized_ensemble_has_no_net_z_spin() {
        // mirror symmetry of the helix (x → -x with a spin π-rotation about x̂)
        // forces ∫ρ_z dx = 0 for a symmetric packet at rest
        let g = grid();
        let solver = TrajectorySolver::new(helix(g), 1.0, 1.0).unwrap();
        let at_rest = GaussianPacket { p0: 0.0, ..packet() };
        let res = ensemble_average(&solver, at_rest, InitialSpin::Unpolarized, 0.0, &[0.5, 1.0], 200, 3, true).unwrap();
        for (m, s) in res.mean.records.iter().zip(&res.stderr.records) {
            assert!(m.orientation[2].abs() <= 3.0 * s.orientation[2] + 1e-12, "{} {}", m.orientation[2], s.orientation[2]);
        }
    }
}
