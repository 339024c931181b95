//! Run orchestration: executes the selected solvers for a validated
//! [`Scenario`], applies the experiment's checks and collects output tables.

use std::path::{Path, PathBuf};

use num_complex::Complex64;

use crate::config::{ExperimentKind, RunConfig, Scenario, SolverKind};
use crate::diagnostics::{
    decay_rate, diffusion_rate, flux_source_check, force_balance, initial_slope, spin_separation, CriterionResult,
    ExperimentReport, Provenance, SectorMomenta,
};
use crate::error::{Error, Result};
use crate::fields::{GaugePhase, SpinGeometry, Vec3};
use crate::gauge::{convergence_study, project_on_axis, ConvergenceScenario, EffectiveSolver, SectorState};
use crate::grid::Spectral;
use crate::lindblad::{momentum_distribution, wigner_transform, ConservationMonitor, DensityMatrix, LindbladSolver};
use crate::observables::TimeSeries;
use crate::output::{create_run_dir, sha256_hex, write_artifacts, Cell, CsvTable, Manifest};
use crate::semiclassical::{PhaseSpaceState, TransportSolver};
use crate::trajectories::{ensemble_average, EnsembleResult, PoissonCheck, TrajectorySolver};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Tolerances of the shipped experiments.
pub mod tolerance {
    pub const FORCE_RESIDUAL: f64 = 1e-3;
    pub const EARLY_FORCE: f64 = 0.02;
    pub const ANTIPODAL: f64 = 1e-8;
    pub const TOTAL_MOMENTUM: f64 = 1e-8;
    pub const SECTOR_FORCE: f64 = 0.05;
    pub const DIFFUSION_LINDBLAD: f64 = 0.10;
    pub const DIFFUSION_SEMICLASSICAL: f64 = 0.02;
    pub const FLUX_SOURCE: f64 = 0.05;
    pub const STANDARD_ERRORS: f64 = 3.0;
    pub const FLOOR_EXPONENT: f64 = -1.0;
    pub const FLOOR_EXPONENT_BAND: f64 = 0.3;
    pub const GAUGE_INVARIANCE: f64 = 1e-8;
    pub const TRACE_DRIFT_RATE: f64 = 1e-10;
    pub const HERMITICITY: f64 = 1e-12;
    pub const POSITIVITY: f64 = -1e-8;
    pub const ZERO: f64 = 1e-10;
    pub const TRANSVERSE_DECAY: f64 = 0.01;
    pub const FREE_SPREADING: f64 = 1e-6;
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub parallel: bool,
    pub seed: Option<u64>,
}

/// Everything a run produced, before it is written to disk.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: ExperimentReport,
    pub tables: Vec<(String, CsvTable)>,
    pub monitors: Vec<(String, ConservationMonitor)>,
}

impl RunOutcome {
    pub fn table(&self, name: &str) -> Option<&CsvTable> {
        self.tables.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn criterion(&self, name: &str) -> Option<&CriterionResult> {
        self.report.criteria.iter().find(|c| c.name == name)
    }
}

fn series_table(series: &TimeSeries, with_quantum: bool) -> CsvTable {
    let mut header = vec!["t", "trace", "mean_x", "var_x", "mean_p", "mean_p2", "s_x", "s_y", "s_z", "force"];
    if with_quantum {
        header.extend(["purity", "min_eigenvalue"]);
    }
    let mut t = CsvTable::new(&header);
    for r in &series.records {
        let mut row: Vec<Cell> = vec![
            r.t.into(),
            r.trace.into(),
            r.mean_x.into(),
            r.var_x.into(),
            r.mean_p.into(),
            r.mean_p2.into(),
            r.orientation[0].into(),
            r.orientation[1].into(),
            r.orientation[2].into(),
            r.force.into(),
        ];
        if with_quantum {
            row.push(r.purity.into());
            row.push(r.min_eigenvalue.unwrap_or(f64::NAN).into());
        }
        t.push(row);
    }
    t
}

fn profile_table(series: &TimeSeries, positions: &[f64]) -> CsvTable {
    let mut t = CsvTable::new(&["t", "x", "rho0", "rho_x", "rho_y", "rho_z", "j_x", "j_y", "j_z"]);
    for r in &series.records {
        for (i, x) in positions.iter().enumerate() {
            let s = r.spin_density[i];
            let j = r.current[i];
            t.push(vec![
                r.t.into(),
                (*x).into(),
                r.density[i].into(),
                s[0].into(),
                s[1].into(),
                s[2].into(),
                j[0].into(),
                j[1].into(),
                j[2].into(),
            ]);
        }
    }
    t
}

fn ensemble_table(e: &EnsembleResult) -> CsvTable {
    let mut t = CsvTable::new(&[
        "t", "mean_p", "mean_p_se", "mean_p2", "mean_p2_se", "s_x", "s_x_se", "s_y", "s_y_se", "s_z", "s_z_se",
    ]);
    for (m, s) in e.mean.records.iter().zip(&e.stderr.records) {
        let mut row: Vec<Cell> = vec![m.t.into(), m.mean_p.into(), s.mean_p.into(), m.mean_p2.into(), s.mean_p2.into()];
        for c in 0..3 {
            row.push(m.orientation[c].into());
            row.push(s.orientation[c].into());
        }
        t.push(row);
    }
    t
}

fn phase_space_rows(table: &mut CsvTable, t: f64, s: &PhaseSpaceState) {
    let np = s.momentum_grid().n();
    for i in 0..s.grid().n() {
        for k in 0..np {
            let idx = i * np + k;
            table.push(vec![
                t.into(),
                s.grid().x(i).into(),
                s.momentum_grid().p(k).into(),
                s.rho0[idx].into(),
                s.rho_vec[0][idx].into(),
                s.rho_vec[1][idx].into(),
                s.rho_vec[2][idx].into(),
            ]);
        }
    }
}

fn conservation_checks(report: &mut ExperimentReport, label: &str, m: &ConservationMonitor) {
    report.check(CriterionResult::at_most(
        &format!("conservation.{label}.trace_drift_rate"),
        m.trace_drift_rate(),
        tolerance::TRACE_DRIFT_RATE,
    ));
    report.check(CriterionResult::at_most(
        &format!("conservation.{label}.hermiticity"),
        m.max_hermiticity,
        tolerance::HERMITICITY,
    ));
    if m.positivity_checks > 0 {
        report.check(CriterionResult::at_least(
            &format!("conservation.{label}.min_eigenvalue"),
            m.min_eigenvalue,
            tolerance::POSITIVITY,
        ));
    }
}

/// Unit direction shared by `F(x)` at every point where it is nonzero.
fn uniform_force_direction(scn: &Scenario) -> Result<Vec3> {
    let geo = SpinGeometry::at(&scn.field, scn.mass, 0.0, None)?;
    let big = geo
        .force_field
        .iter()
        .max_by(|a, b| a.norm().total_cmp(&b.norm()))
        .copied()
        .unwrap_or_else(Vec3::zeros);
    if big.norm() == 0.0 {
        return Err(Error::config("experiment", "spin separation needs a field with nonzero gradient"));
    }
    let dir = big.normalize();
    let parallel = geo.force_field.iter().all(|f| f.cross(&dir).norm() <= 1e-10 * big.norm());
    if !parallel {
        return Err(Error::config("experiment", "spin separation needs a force field of fixed direction"));
    }
    Ok(dir)
}

struct Run<'a> {
    scn: &'a Scenario,
    opts: &'a RunOptions,
    report: ExperimentReport,
    tables: Vec<(String, CsvTable)>,
    monitors: Vec<(String, ConservationMonitor)>,
}

impl Run<'_> {
    fn lindblad(
        &mut self,
        label: &str,
        rho: &mut DensityMatrix,
        nu: f64,
        visit: impl FnMut(f64, &DensityMatrix) -> Result<()>,
    ) -> Result<TimeSeries> {
        let scn = self.scn;
        let mut solver = LindbladSolver::new(scn.field.clone(), scn.mass, nu, scn.dt)?;
        solver.positivity_every = scn.positivity_every;
        let (series, monitor) = solver.run_with(rho, 0.0, scn.n_steps, scn.output_every, visit)?;
        conservation_checks(&mut self.report, label, &monitor);
        self.monitors.push((label.to_string(), monitor));
        Ok(series)
    }

    fn table(&mut self, name: &str, t: CsvTable) {
        self.tables.push((name.to_string(), t));
    }

    fn trajectories(&mut self, lindblad: Option<&TimeSeries>) -> Result<()> {
        let scn = self.scn;
        let spin = scn.trajectory_spin.ok_or_else(|| Error::Internal("trajectory spin missing".into()))?;
        let solver = TrajectorySolver::new(scn.field.clone(), scn.mass, scn.nu)?;
        let times = scn.output_times();
        let seed = self.opts.seed.unwrap_or(scn.base_seed);
        let e = ensemble_average(&solver, scn.packet, spin, 0.0, &times, scn.n_traj, seed, self.opts.parallel)?;
        let mut jumps = CsvTable::new(&["trajectory", "jumps"]);
        for (k, c) in e.jump_counts.iter().enumerate() {
            jumps.push(vec![k.into(), (*c).into()]);
        }
        let poisson = PoissonCheck::new(&e.jump_counts, scn.nu * scn.t_end());
        self.report.check(
            CriterionResult::flag("trajectories.jump_counts_poisson", poisson.within(tolerance::STANDARD_ERRORS), "")
                .with_note(format!(
                    "mean z = {:.3}, variance z = {:.3}, lambda = {}",
                    poisson.mean_z, poisson.variance_z, poisson.lambda
                )),
        );
        self.report.attach("poisson", &poisson)?;
        if let Some(l) = lindblad {
            let mut worst_p: f64 = 0.0;
            let mut worst_s: f64 = 0.0;
            for ((m, s), r) in e.mean.records.iter().zip(&e.stderr.records).zip(&l.records) {
                let z = |diff: f64, se: f64| if diff.abs() <= 1e-10 { 0.0 } else { diff.abs() / se };
                worst_p = worst_p.max(z(m.mean_p - r.mean_p, s.mean_p));
                worst_s = worst_s.max(z(m.orientation[2] - r.orientation[2], s.orientation[2]));
            }
            self.report.check(CriterionResult::at_most(
                "trajectories.mean_p_vs_lindblad_se",
                worst_p,
                tolerance::STANDARD_ERRORS,
            ));
            self.report.check(CriterionResult::at_most(
                "trajectories.s_z_vs_lindblad_se",
                worst_s,
                tolerance::STANDARD_ERRORS,
            ));
        }
        self.table("trajectories_series.csv", ensemble_table(&e));
        self.table("trajectories_jumps.csv", jumps);
        Ok(())
    }

    fn semiclassical(&mut self) -> Result<TimeSeries> {
        let scn = self.scn;
        let sc = scn.semiclassical.as_ref().ok_or_else(|| Error::Internal("semiclassical setup missing".into()))?;
        let solver = TransportSolver::new(scn.field.clone(), sc.pgrid, scn.mass, scn.nu, sc.dt)?;
        let mut state = scn.phase_space_state()?;
        let interval = scn.dt * scn.output_every as f64;
        let per_output = (interval / sc.dt).round().max(1.0) as usize;
        let n_steps = (scn.t_end() / sc.dt).round() as usize;
        let snaps = scn.snapshots.clone().unwrap_or_else(|| vec![0.0, scn.t_end()]);
        let mut table = CsvTable::new(&["t", "x", "p", "rho0", "rho_x", "rho_y", "rho_z"]);
        let tol = 0.5 * sc.dt;
        let (series, monitor) = solver.run(&mut state, 0.0, n_steps, per_output, |t, s| {
            if snaps.iter().any(|&ts| (ts - t).abs() <= tol) {
                phase_space_rows(&mut table, t, s);
            }
            Ok(())
        })?;
        self.report.attach("semiclassical_monitor", &monitor)?;
        self.table("semiclassical_series.csv", series_table(&series, false));
        self.table("semiclassical_phase_space.csv", table);
        Ok(series)
    }

    fn expected_diffusion_rate(&self, density: &[f64]) -> f64 {
        let dn = self.scn.field.dn_at(0.0);
        let dx = self.scn.grid.dx();
        0.5 * self.scn.nu * dn.iter().zip(density).map(|(d, r)| d.norm_squared() * r).sum::<f64>() * dx
    }

    fn force_balance(&mut self, series: &TimeSeries) -> Result<()> {
        let scn = self.scn;
        let interval = scn.dt * scn.output_every as f64;
        let fb = force_balance(series, interval)?;
        let pointwise = fb
            .residual
            .iter()
            .zip(&fb.force)
            .map(|(r, f)| if *f != 0.0 { (r / f).abs() } else { r.abs() })
            .fold(0.0, f64::max);
        self.report.check(CriterionResult::at_most(
            "force_balance.relative_residual",
            pointwise,
            tolerance::FORCE_RESIDUAL,
        ));
        let window = if scn.nu > 0.0 { 0.1 / scn.nu } else { scn.t_end() };
        let early: Vec<_> = series.records.iter().filter(|r| r.t <= window * (1.0 + 1e-9)).collect();
        let slope = initial_slope(
            &early.iter().map(|r| r.t).collect::<Vec<_>>(),
            &early.iter().map(|r| r.mean_p).collect::<Vec<_>>(),
        )?;
        self.report.check(
            CriterionResult::relative("force_balance.early_force", slope, series.records[0].force, tolerance::EARLY_FORCE)
                .with_note("initial d<p>/dt against the force at t = 0"),
        );
        let mut table = CsvTable::new(&["t", "dpdt", "force", "residual"]);
        for k in 0..fb.times.len() {
            table.push(vec![fb.times[k].into(), fb.dpdt[k].into(), fb.force[k].into(), fb.residual[k].into()]);
        }
        self.table("force_balance.csv", table);
        self.report.attach("force_balance", &fb)?;

        let flipped_bloch = -scn.bloch;
        let mut rho = scn.density_matrix_with(&flipped_bloch)?;
        let flipped = self.lindblad("lindblad_antipodal", &mut rho, scn.nu, |_, _| Ok(()))?;
        let worst = series
            .records
            .iter()
            .zip(&flipped.records)
            .map(|(a, b)| (a.force + b.force).abs().max((a.mean_p + b.mean_p).abs()))
            .fold(0.0, f64::max);
        self.report.check(CriterionResult::at_most("force_balance.antipodal_flip", worst, tolerance::ANTIPODAL));
        Ok(())
    }

    fn spin_separation(&mut self, samples: &[SectorMomenta], force_mag: f64) -> Result<()> {
        let scn = self.scn;
        let window = 0.1 / scn.nu;
        let sep = spin_separation(samples, window)?;
        self.report.check(CriterionResult::at_most(
            "spin_separation.total_momentum",
            sep.max_abs_total_momentum,
            tolerance::TOTAL_MOMENTUM,
        ));
        let positive = sep.times.iter().zip(&sep.separation).all(|(t, s)| *t == 0.0 || *s > 0.0);
        self.report
            .check(CriterionResult::flag("spin_separation.separation_positive", positive, "Δ<p>(t) > 0 for t > 0"));
        let expected = 0.5 * scn.nu * force_mag;
        self.report
            .check(CriterionResult::relative("spin_separation.early_force_plus", sep.early_force_plus, expected, tolerance::SECTOR_FORCE));
        self.report.check(CriterionResult::relative(
            "spin_separation.early_force_minus",
            sep.early_force_minus,
            -expected,
            tolerance::SECTOR_FORCE,
        ));
        self.report.check(CriterionResult::flag(
            "spin_separation.correlator_monotone",
            sep.correlator_monotone,
            "C(t) increasing over the early window",
        ));
        let mut table = CsvTable::new(&[
            "t", "weight_plus", "weight_minus", "p_plus", "p_minus", "separation", "correlator", "total_p",
        ]);
        for (s, d) in samples.iter().zip(&sep.separation) {
            table.push(vec![
                s.t.into(),
                s.weight_plus.into(),
                s.weight_minus.into(),
                s.momentum_plus.into(),
                s.momentum_minus.into(),
                (*d).into(),
                s.correlator.into(),
                s.total_momentum.into(),
            ]);
        }
        self.table("spin_separation.csv", table);
        self.report.attach("spin_separation", &sep)?;
        Ok(())
    }

    fn diffusion(&mut self, label: &str, series: &TimeSeries, tol: f64) -> Result<()> {
        let scn = self.scn;
        let window = if scn.nu > 0.0 { (1.0 / scn.nu).min(scn.t_end()) } else { scn.t_end() };
        let fit = diffusion_rate(series, scn.nu, window)?;
        let expected = self.expected_diffusion_rate(&series.records[0].density);
        let c = if expected == 0.0 {
            CriterionResult::absolute(&format!("diffusion.{label}_rate"), fit.rate, 0.0, tolerance::ZERO)
        } else {
            CriterionResult::relative(&format!("diffusion.{label}_rate"), fit.rate, expected, tol)
        };
        self.report.check(c.with_note(format!(
            "initial rate over t ≤ {window}; early quadratic slope {:.6e}, secant {:.6e}",
            fit.early_slope, fit.secant
        )));
        self.report.attach(&format!("diffusion_{label}"), &fit)?;
        Ok(())
    }

    fn flux_source(&mut self, label: &str, series: &TimeSeries) -> Result<()> {
        let scn = self.scn;
        let geo = SpinGeometry::at(&scn.field, scn.mass, 0.0, None)?;
        let c = (0..3)
            .max_by(|&a, &b| {
                let m = |c: usize| geo.force_field.iter().map(|f| f[c].abs()).fold(0.0, f64::max);
                m(a).total_cmp(&m(b))
            })
            .unwrap_or(2);
        let check = flux_source_check(series, &geo.force_field, scn.nu, c)?;
        if check.skipped {
            self.report
                .check(CriterionResult::flag(&format!("flux_source.{label}"), true, &format!("skipped: {}", check.note)));
        } else {
            self.report.check(CriterionResult::at_most(
                &format!("flux_source.{label}_relative_residual"),
                check.relative_residual,
                tolerance::FLUX_SOURCE,
            ));
            let mut t = CsvTable::new(&["x", "dj_dt", "source"]);
            for (i, x) in scn.grid.positions().iter().enumerate() {
                t.push(vec![(*x).into(), check.dj_dt[i].into(), check.source[i].into()]);
            }
            self.table(&format!("flux_source_{label}.csv"), t);
        }
        Ok(())
    }

    fn constant_field(&mut self, series: &TimeSeries, p_dist: &[(f64, Vec<f64>)]) -> Result<()> {
        let scn = self.scn;
        let max_force = series.records.iter().map(|r| r.force.abs()).fold(0.0, f64::max);
        self.report.check(CriterionResult::at_most("constant_field.force", max_force, tolerance::ZERO));
        let p0 = series.records[0].mean_p;
        let dp = series.records.iter().map(|r| (r.mean_p - p0).abs()).fold(0.0, f64::max);
        self.report.check(CriterionResult::at_most("constant_field.momentum_change", dp, tolerance::ZERO));
        let first = &p_dist[0].1;
        let dist_change = p_dist
            .iter()
            .flat_map(|(_, d)| d.iter().zip(first).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        self.report
            .check(CriterionResult::at_most("constant_field.momentum_distribution_change", dist_change, tolerance::ZERO));

        let axis = scn.field.n_at(0.0)[0];
        let transverse = |r: &crate::observables::ObservableRecord| {
            let s = Vec3::from(r.orientation);
            (s - axis * axis.dot(&s)).norm()
        };
        let amp: Vec<f64> = series.records.iter().map(transverse).collect();
        if amp[0] > 1e-6 && scn.nu > 0.0 {
            let rate = decay_rate(&series.times(), &amp);
            self.report.check(CriterionResult::relative(
                "constant_field.transverse_decay_rate",
                rate,
                scn.nu,
                tolerance::TRANSVERSE_DECAY,
            ));
        }

        let mut rho = scn.density_matrix()?;
        let free = self.lindblad("lindblad_free", &mut rho, 0.0, |_, _| Ok(()))?;
        let (s, m) = (scn.packet.sigma, scn.mass);
        let sp = scn.sigma_p.unwrap_or(0.5 / s);
        let worst = free
            .records
            .iter()
            .map(|r| {
                let var = s * s + (sp * r.t / m).powi(2);
                let mean = scn.packet.x0 + scn.packet.p0 * r.t / m;
                ((r.var_x - var) / var).abs().max((r.mean_x - mean).abs() / s)
            })
            .fold(0.0, f64::max);
        self.report.check(CriterionResult::at_most("constant_field.free_spreading", worst, tolerance::FREE_SPREADING));
        self.table("lindblad_free_series.csv", series_table(&free, true));
        Ok(())
    }

    fn gauge_limit(&mut self) -> Result<()> {
        let scn = self.scn;
        let g = scn.gauge.as_ref().ok_or_else(|| Error::Internal("gauge section missing".into()))?;
        let study_scenario = ConvergenceScenario {
            field: scn.field.clone(),
            mass: scn.mass,
            packet: scn.packet,
            t_end: g.t_end.unwrap_or(scn.t_end()),
            dt: None,
            n_outputs: g.n_outputs,
        };
        let study = convergence_study(&study_scenario, &g.nu_list)?;
        self.report.check(CriterionResult::flag(
            "gauge_limit.delta_monotone",
            study.delta_monotone,
            &format!("delta = {:?}", study.rows.iter().map(|r| r.delta).collect::<Vec<_>>()),
        ));
        match study.floor_exponent {
            Some(e) => self.report.check(
                CriterionResult::absolute(
                    "gauge_limit.coherence_floor_exponent",
                    e,
                    tolerance::FLOOR_EXPONENT,
                    tolerance::FLOOR_EXPONENT_BAND,
                )
                .with_note("log-log slope of the coherence floor against nu"),
            ),
            None => self.report.check(CriterionResult::flag(
                "gauge_limit.coherence_floor_exponent",
                false,
                "fewer than two positive rates in nu_list",
            )),
        }
        let mut conv = CsvTable::new(&["nu", "delta", "coherence_floor"]);
        let mut coh = CsvTable::new(&["nu", "t", "coherence_norm", "p_full_plus", "p_full_minus", "p_eff_plus", "p_eff_minus"]);
        for row in &study.rows {
            conv.push(vec![row.nu.into(), row.delta.into(), row.coherence_floor.into()]);
            for k in 0..row.times.len() {
                coh.push(vec![
                    row.nu.into(),
                    row.times[k].into(),
                    row.coherence[k].into(),
                    row.full_momentum[0][k].into(),
                    row.full_momentum[1][k].into(),
                    row.effective_momentum[0][k].into(),
                    row.effective_momentum[1][k].into(),
                ]);
            }
            conservation_checks(&mut self.report, &format!("lindblad_nu_{}", row.nu), &row.monitor);
            self.monitors.push((format!("lindblad_nu_{}", row.nu), row.monitor.clone()));
        }
        self.table("convergence.csv", conv);
        self.table("coherence.csv", coh);

        let dt = study.rows.last().map(|row| row.dt).unwrap_or(scn.dt);
        self.effective_sectors(study_scenario.t_end, dt, g.n_outputs)?;
        self.report.attach(
            "convergence",
            &study.rows.iter().map(|r| (r.nu, r.delta, r.coherence_floor)).collect::<Vec<_>>(),
        )?;
        self.report.attach("coherence_floor_exponent", &study.floor_exponent)?;
        Ok(())
    }
    /// Effective sector dynamics of the packet in both sectors, plain and
    /// re-gauged with `χ = sin(2πx/L)`.
    fn effective_sectors(&mut self, t_end: f64, dt_max: f64, n_outputs: usize) -> Result<()> {
        let scn = self.scn;
        let steps_per_output = ((t_end / n_outputs as f64) / dt_max).ceil().max(1.0) as usize;
        let n_steps = steps_per_output * n_outputs;
        let dt = t_end / n_steps as f64;
        let l = scn.grid.length();
        let phase = GaugePhase::uniform(&scn.grid, |x| (std::f64::consts::TAU * x / l).sin());
        let plain = EffectiveSolver::new(scn.field.clone(), scn.mass, dt, None)?;
        let regauged = EffectiveSolver::new(scn.field.clone(), scn.mass, dt, Some(phase.clone()))?;
        let psi = scn.packet.wavefunction(&scn.grid)?;
        let mut sectors = CsvTable::new(&["t", "sector", "norm", "mean_x", "p_kinetic"]);
        let mut worst: f64 = 0.0;
        for (sign, chi) in [(1i8, &phase.plus), (-1i8, &phase.minus)] {
            let psi_g: Vec<Complex64> = psi.iter().zip(chi).map(|(z, c)| z * Complex64::from_polar(1.0, -c)).collect();
            let mut a = SectorState::wave(sign, scn.grid, psi.clone());
            let mut b = SectorState::wave(sign, scn.grid, psi_g);
            let ra = plain.run(&mut a, 0.0, n_steps, steps_per_output)?;
            let rb = regauged.run(&mut b, 0.0, n_steps, steps_per_output)?;
            for (x, y) in ra.iter().zip(&rb) {
                worst = worst.max((x.kinetic_momentum - y.kinetic_momentum).abs());
            }
            let da = a.density();
            worst = worst.max(da.iter().zip(b.density()).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max));
            for r in &ra {
                sectors.push(vec![r.t.into(), r.sector.into(), r.norm.into(), r.mean_x.into(), r.kinetic_momentum.into()]);
            }
        }
        self.report
            .check(CriterionResult::at_most("gauge.invariance", worst, tolerance::GAUGE_INVARIANCE));
        self.table("sectors.csv", sectors);
        Ok(())
    }
}

/// Runs every selected solver and the experiment checks.
pub fn execute(cfg: &RunConfig, scn: &Scenario, opts: &RunOptions) -> Result<RunOutcome> {
    let provenance = Provenance {
        config_hash: sha256_hex(cfg.to_toml().as_bytes()),
        seed: scn.has(SolverKind::Trajectories).then(|| opts.seed.unwrap_or(scn.base_seed)),
        version: VERSION.to_string(),
    };
    let mut run = Run {
        scn,
        opts,
        report: ExperimentReport::new(scn.experiment.name(), provenance),
        tables: Vec::new(),
        monitors: Vec::new(),
    };
    let exp = scn.experiment;
    let needs_lindblad = scn.has(SolverKind::Lindblad);
    if !needs_lindblad
        && matches!(exp, ExperimentKind::ForceBalance | ExperimentKind::SpinSeparation | ExperimentKind::ConstantField)
    {
        return Err(Error::config("solver", format!("experiment {} needs the lindblad solver", exp.name())));
    }

    let lindblad = if needs_lindblad {
        let spec = Spectral::new(scn.grid);
        let mut samples = Vec::new();
        let mut p_dist = Vec::new();
        let axis = if exp == ExperimentKind::SpinSeparation {
            Some(uniform_force_direction(scn)?)
        } else {
            None
        };
        let mut rho = scn.density_matrix()?;
        let zeros = vec![0.0; scn.grid.n()];
        let series = run.lindblad("lindblad", &mut rho, scn.nu, |t, state| {
            if let Some(axis) = axis {
                let proj = project_on_axis(state, &axis);
                let w = wigner_transform(state);
                let np = w.momentum_grid().n();
                let ps = w.momentum_grid().values();
                let mut corr = 0.0;
                for i in 0..scn.grid.n() {
                    for k in 0..np {
                        let idx = i * np + k;
                        let v = Vec3::new(w.rho_vec[0][idx], w.rho_vec[1][idx], w.rho_vec[2][idx]);
                        corr += ps[k] * axis.dot(&v);
                    }
                }
                corr *= scn.grid.dx() * w.momentum_grid().dp();
                let total = proj.plus.kinetic_momentum(&spec, &zeros) + proj.minus.kinetic_momentum(&spec, &zeros);
                samples.push(SectorMomenta {
                    t,
                    weight_plus: proj.plus.norm(),
                    weight_minus: proj.minus.norm(),
                    momentum_plus: proj.plus.kinetic_momentum(&spec, &zeros),
                    momentum_minus: proj.minus.kinetic_momentum(&spec, &zeros),
                    total_momentum: total,
                    correlator: corr,
                });
            }
            if exp == ExperimentKind::ConstantField {
                p_dist.push((t, momentum_distribution(&spec, state)));
            }
            Ok(())
        })?;
        run.table("lindblad_series.csv", series_table(&series, true));
        run.table("lindblad_profiles.csv", profile_table(&series, &scn.grid.positions()));
        match exp {
            ExperimentKind::ForceBalance => run.force_balance(&series)?,
            ExperimentKind::SpinSeparation => {
                let geo = SpinGeometry::at(&scn.field, scn.mass, 0.0, None)?;
                let fmag = geo.force_field[0].norm();
                run.spin_separation(&samples, fmag)?
            }
            ExperimentKind::Diffusion => run.diffusion("lindblad", &series, tolerance::DIFFUSION_LINDBLAD)?,
            ExperimentKind::FluxSource => run.flux_source("lindblad", &series)?,
            ExperimentKind::ConstantField => run.constant_field(&series, &p_dist)?,
            _ => {}
        }
        Some(series)
    } else {
        None
    };

    if scn.has(SolverKind::Trajectories) {
        run.trajectories(lindblad.as_ref())?;
    }
    if scn.has(SolverKind::Semiclassical) {
        let series = run.semiclassical()?;
        match exp {
            ExperimentKind::Diffusion => run.diffusion("semiclassical", &series, tolerance::DIFFUSION_SEMICLASSICAL)?,
            ExperimentKind::FluxSource => run.flux_source("semiclassical", &series)?,
            _ => {}
        }
    }
    if exp == ExperimentKind::GaugeLimit {
        run.gauge_limit()?;
    } else if scn.has(SolverKind::Gauge) {
        let g = scn.gauge.as_ref().map(|g| g.n_outputs).unwrap_or(20);
        run.effective_sectors(scn.t_end(), scn.dt, g)?;
    }

    Ok(RunOutcome {
        report: run.report,
        tables: run.tables,
        monitors: run.monitors,
    })
}

/// Writes an outcome into a fresh run directory under `root`.
pub fn write_outcome(root: &Path, cfg: &RunConfig, scn: &Scenario, opts: &RunOptions, outcome: &RunOutcome) -> Result<PathBuf> {
    let name = cfg.name.clone().unwrap_or_else(|| scn.experiment.name().to_string());
    let dir = create_run_dir(root, &name)?;
    let mut files: Vec<(String, String)> = outcome.tables.iter().map(|(n, t)| (n.clone(), t.to_csv())).collect();
    files.push(("report.json".into(), outcome.report.to_json()? + "\n"));
    files.push(("report.txt".into(), outcome.report.to_text()));
    files.push(("config.toml".into(), cfg.to_toml()));
    let manifest = Manifest {
        name,
        experiment: scn.experiment.name().into(),
        solvers: scn.solvers.iter().map(|s| s.name().to_string()).collect(),
        config_hash: outcome.report.provenance.config_hash.clone(),
        seeds: if scn.has(SolverKind::Trajectories) {
            vec![opts.seed.unwrap_or(scn.base_seed)]
        } else {
            Vec::new()
        },
        version: VERSION.into(),
        passed: outcome.report.passed(),
        artifacts: Vec::new(),
    };
    write_artifacts(&dir, &files, manifest)?;
    Ok(dir)
}
