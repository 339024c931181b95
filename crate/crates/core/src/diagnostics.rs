//! Solver-agnostic experiment checks on completed output series.
//!
//! Every check reads only [`ObservableRecord`]s (or sector momenta computed
//! from output states) at the output cadence. Time derivatives are centered
//! differences on that cadence.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fields::Vec3;
use crate::observables::{ObservableRecord, TimeSeries};

/// Least-squares line `y = a·x + b`, returned as `(a, b)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Least-squares coefficients of `y ≈ Σ_k c_k b_k(x)`.
pub fn basis_fit(x: &[f64], y: &[f64], basis: &[&dyn Fn(f64) -> f64]) -> Result<Vec<f64>> {
    if x.len() < basis.len() + 2 {
        return Err(Error::config(
            "diagnostics.window",
            format!("fit window has {} points, need at least {}", x.len(), basis.len() + 2),
        ));
    }
    let a = DMatrix::from_fn(x.len(), basis.len(), |i, k| basis[k](x[i]));
    let b = DVector::from_column_slice(y);
    let svd = a.svd(true, true);
    let c = svd
        .solve(&b, 1e-14)
        .map_err(|e| Error::Numerical(format!("least squares failed: {e}")))?;
    Ok(c.iter().copied().collect())
}

/// Slope at `x[0]` of the least-squares quadratic through the points.
pub fn initial_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    let x0 = x[0];
    let shifted: Vec<f64> = x.iter().map(|v| v - x0).collect();
    let c = basis_fit(&shifted, y, &[&|_| 1.0, &|s| s, &|s| s * s])?;
    Ok(c[1])
}

/// Centered differences `(y_{k+1} - y_{k-1}) / (t_{k+1} - t_{k-1})` at the
/// interior points; the cadence must be uniform.
pub fn centered_derivative(times: &[f64], y: &[f64]) -> Result<Vec<(f64, f64)>> {
    if times.len() < 3 {
        return Err(Error::config(
            "diagnostics.cadence",
            "centered differences need at least 3 outputs",
        ));
    }
    let h = times[1] - times[0];
    if times.windows(2).any(|w| ((w[1] - w[0]) - h).abs() > 1e-9 * h.abs().max(1e-300)) {
        return Err(Error::config("diagnostics.cadence", "output cadence must be uniform"));
    }
    Ok((1..times.len() - 1)
        .map(|k| (times[k], (y[k + 1] - y[k - 1]) / (times[k + 1] - times[k - 1])))
        .collect())
}

fn max_abs(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// `d⟨p⟩/dt` against the momentum-balance force.
#[derive(Clone, Debug, Serialize)]
pub struct ForceBalance {
    pub times: Vec<f64>,
    pub dpdt: Vec<f64>,
    pub force: Vec<f64>,
    pub residual: Vec<f64>,
    /// `max |residual| / max |force|`; absolute when the force vanishes.
    pub relative_residual: f64,
    pub max_abs_residual: f64,
    pub max_abs_force: f64,
}

/// Compares the centered-difference `d⟨p⟩/dt` with the recorded force at every
/// interior output time. `max_cadence` bounds the output spacing.
pub fn force_balance(series: &TimeSeries, max_cadence: f64) -> Result<ForceBalance> {
    let times = series.times();
    if times.len() >= 2 && times[1] - times[0] > max_cadence * (1.0 + 1e-12) {
        return Err(Error::config(
            "diagnostics.cadence",
            format!(
                "output spacing {} exceeds the admissible cadence {max_cadence}",
                times[1] - times[0]
            ),
        ));
    }
    let deriv = centered_derivative(&times, &series.column(|r| r.mean_p))?;
    let force: Vec<f64> = series.records[1..series.len() - 1].iter().map(|r| r.force).collect();
    let residual: Vec<f64> = deriv.iter().zip(&force).map(|((_, d), f)| d - f).collect();
    let max_abs_residual = max_abs(residual.iter().copied());
    let max_abs_force = max_abs(force.iter().copied());
    let relative_residual = if max_abs_force > 0.0 {
        max_abs_residual / max_abs_force
    } else {
        max_abs_residual
    };
    Ok(ForceBalance {
        times: deriv.iter().map(|d| d.0).collect(),
        dpdt: deriv.iter().map(|d| d.1).collect(),
        force,
        residual,
        relative_residual,
        max_abs_residual,
        max_abs_force,
    })
}

/// Sector-resolved momentum at one output time.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct SectorMomenta {
    pub t: f64,
    pub weight_plus: f64,
    pub weight_minus: f64,
    /// Unnormalized `tr[p ϱ_±]`.
    pub momentum_plus: f64,
    pub momentum_minus: f64,
    pub total_momentum: f64,
    /// `∫∫ p F̂·W⃗ dx dp`.
    pub correlator: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SpinSeparation {
    pub times: Vec<f64>,
    /// Normalized sector momenta difference `⟨p⟩₊ - ⟨p⟩₋`.
    pub separation: Vec<f64>,
    pub correlator: Vec<f64>,
    pub max_abs_total_momentum: f64,
    /// Initial `d tr[pϱ_±]/dt` divided by the initial sector weight.
    pub early_force_plus: f64,
    pub early_force_minus: f64,
    pub early_window: f64,
    pub correlator_monotone: bool,
}

/// Separation metrics from sector momenta; the early window is `t ≤ t0 + window`.
pub fn spin_separation(samples: &[SectorMomenta], window: f64) -> Result<SpinSeparation> {
    if samples.is_empty() {
        return Err(Error::config("diagnostics.window", "no samples"));
    }
    let t0 = samples[0].t;
    let early: Vec<&SectorMomenta> = samples.iter().filter(|s| s.t <= t0 + window * (1.0 + 1e-9)).collect();
    let et: Vec<f64> = early.iter().map(|s| s.t).collect();
    let plus = initial_slope(&et, &early.iter().map(|s| s.momentum_plus).collect::<Vec<_>>())?;
    let minus = initial_slope(&et, &early.iter().map(|s| s.momentum_minus).collect::<Vec<_>>())?;
    let correlator: Vec<f64> = samples.iter().map(|s| s.correlator).collect();
    let early_corr = &correlator[..early.len()];
    Ok(SpinSeparation {
        times: samples.iter().map(|s| s.t).collect(),
        separation: samples
            .iter()
            .map(|s| s.momentum_plus / s.weight_plus - s.momentum_minus / s.weight_minus)
            .collect(),
        max_abs_total_momentum: max_abs(samples.iter().map(|s| s.total_momentum)),
        early_force_plus: plus / samples[0].weight_plus,
        early_force_minus: minus / samples[0].weight_minus,
        early_window: window,
        correlator_monotone: early_corr.windows(2).all(|w| w[1] > w[0]),
        correlator,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct FluxSource {
    pub skipped: bool,
    pub note: String,
    pub t: f64,
    pub dj_dt: Vec<f64>,
    pub source: Vec<f64>,
    /// `max_x |∂ₜj_c - (ν/2)F_c ρ₀| / max_x |(ν/2)F_c ρ₀|`.
    pub relative_residual: f64,
}

/// Early-time orientation-flux source check for component `c` over the first
/// output interval (centered at its midpoint).
pub fn flux_source_check(series: &TimeSeries, force_field: &[Vec3], nu: f64, c: usize) -> Result<FluxSource> {
    if series.len() < 2 {
        return Err(Error::config("diagnostics.cadence", "need two outputs"));
    }
    let (a, b) = (&series.records[0], &series.records[1]);
    let polarized = max_abs(a.spin_density.iter().flat_map(|s| s.iter().copied()));
    let scale = max_abs(a.density.iter().copied());
    if polarized > 1e-12 * scale.max(1e-300) {
        return Ok(FluxSource {
            skipped: true,
            note: "initial state carries orientation; other transport terms contribute".into(),
            t: a.t,
            dj_dt: Vec::new(),
            source: Vec::new(),
            relative_residual: f64::NAN,
        });
    }
    let h = b.t - a.t;
    let dj_dt: Vec<f64> = a.current.iter().zip(&b.current).map(|(u, v)| (v[c] - u[c]) / h).collect();
    let source: Vec<f64> = force_field
        .iter()
        .enumerate()
        .map(|(i, f)| 0.25 * nu * f[c] * (a.density[i] + b.density[i]))
        .collect();
    let smax = max_abs(source.iter().copied());
    let rmax = max_abs(dj_dt.iter().zip(&source).map(|(d, s)| d - s));
    Ok(FluxSource {
        skipped: false,
        note: String::new(),
        t: 0.5 * (a.t + b.t),
        relative_residual: if smax > 0.0 { rmax / smax } else { rmax },
        dj_dt,
        source,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct DiffusionRate {
    pub window: f64,
    pub points: usize,
    /// Initial rate from `⟨p²⟩ ≈ c + D(1 - e^{-νt})/ν` over the window.
    pub rate: f64,
    /// Initial slope of a quadratic fit over `t ≤ 0.1/ν` (the whole window when `ν = 0`).
    pub early_slope: f64,
    /// `(⟨p²⟩(end) - ⟨p²⟩(0)) / window`.
    pub secant: f64,
}

/// Fits the `⟨p²⟩` growth over `t ≤ t0 + window`.
pub fn diffusion_rate(series: &TimeSeries, nu: f64, window: f64) -> Result<DiffusionRate> {
    let t0 = series.records[0].t;
    let pts: Vec<&ObservableRecord> = series
        .records
        .iter()
        .filter(|r| r.t <= t0 + window * (1.0 + 1e-9))
        .collect();
    let t: Vec<f64> = pts.iter().map(|r| r.t - t0).collect();
    let p2: Vec<f64> = pts.iter().map(|r| r.mean_p2).collect();
    if t.len() < 5 {
        return Err(Error::config(
            "diagnostics.window",
            format!("diffusion window holds {} outputs, need at least 5", t.len()),
        ));
    }
    let g = move |s: f64| if nu > 0.0 { -(-nu * s).exp_m1() / nu } else { s };
    let c = basis_fit(&t, &p2, &[&|_| 1.0, &g])?;
    let early_end = if nu > 0.0 { 0.1 / nu } else { window };
    let k = t.iter().filter(|&&s| s <= early_end * (1.0 + 1e-9)).count();
    let early_slope = if k >= 5 { initial_slope(&t[..k], &p2[..k])? } else { f64::NAN };
    Ok(DiffusionRate {
        window,
        points: t.len(),
        rate: c[1],
        early_slope,
        secant: (p2[t.len() - 1] - p2[0]) / t[t.len() - 1],
    })
}

/// Fitted exponential decay rate of `|y|` (log-linear fit).
pub fn decay_rate(times: &[f64], y: &[f64]) -> f64 {
    let ly: Vec<f64> = y.iter().map(|v| v.abs().ln()).collect();
    -linear_fit(times, &ly).0
}

/// One checked quantity with its tolerance.
#[derive(Clone, Debug, Serialize)]
pub struct CriterionResult {
    pub name: String,
    pub value: f64,
    pub expected: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub note: String,
}

impl CriterionResult {
    /// `|value - expected| ≤ tolerance`.
    pub fn absolute(name: &str, value: f64, expected: f64, tolerance: f64) -> Self {
        CriterionResult {
            name: name.into(),
            value,
            expected,
            tolerance,
            passed: (value - expected).abs() <= tolerance,
            note: String::new(),
        }
    }

    /// `|value - expected| ≤ tolerance·|expected|`.
    pub fn relative(name: &str, value: f64, expected: f64, tolerance: f64) -> Self {
        let mut r = Self::absolute(name, value, expected, tolerance * expected.abs());
        r.tolerance = tolerance;
        r.note = "relative".into();
        r
    }

    /// `value ≤ bound`.
    pub fn at_most(name: &str, value: f64, bound: f64) -> Self {
        CriterionResult {
            name: name.into(),
            value,
            expected: 0.0,
            tolerance: bound,
            passed: value <= bound,
            note: "upper bound".into(),
        }
    }

    /// `value ≥ bound`.
    pub fn at_least(name: &str, value: f64, bound: f64) -> Self {
        CriterionResult {
            name: name.into(),
            value,
            expected: bound,
            tolerance: 0.0,
            passed: value >= bound,
            note: "lower bound".into(),
        }
    }

    /// Describes what the value was compared against.
    pub fn target(&self) -> String {
        match self.note.as_str() {
            "upper bound" => format!("at most {:.3e}", self.tolerance),
            "lower bound" => format!("at least {:.3e}", self.expected),
            _ => format!("expected {:.6e}, tolerance {:.3e}", self.expected, self.tolerance),
        }
    }

    pub fn flag(name: &str, ok: bool, note: &str) -> Self {
        CriterionResult {
            name: name.into(),
            value: ok as u8 as f64,
            expected: 1.0,
            tolerance: 0.0,
            passed: ok,
            note: note.into(),
        }
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = note.into();
        self
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: Option<u64>,
    pub version: String,
}

/// Machine- and human-readable result of one scenario.
#[derive(Clone, Debug, Serialize)]
pub struct ExperimentReport {
    pub scenario: String,
    pub criteria: Vec<CriterionResult>,
    pub data: serde_json::Map<String, serde_json::Value>,
    pub provenance: Provenance,
}

impl ExperimentReport {
    pub fn new(scenario: &str, provenance: Provenance) -> Self {
        ExperimentReport {
            scenario: scenario.into(),
            criteria: Vec::new(),
            data: serde_json::Map::new(),
            provenance,
        }
    }

    pub fn check(&mut self, c: CriterionResult) {
        self.criteria.push(c);
    }

    /// Attaches raw numbers under `key`.
    pub fn attach(&mut self, key: &str, value: &impl Serialize) -> Result<()> {
        self.data.insert(key.into(), serde_json::to_value(value)?);
        Ok(())
    }

    pub fn passed(&self) -> bool {
        self.criteria.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> Vec<&CriterionResult> {
        self.criteria.iter().filter(|c| !c.passed).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("scenario: {}\n", self.scenario);
        for c in &self.criteria {
            let verdict = if c.passed { "PASS" } else { "FAIL" };
            let note = match c.note.as_str() {
                "" | "upper bound" | "lower bound" => String::new(),
                n => format!(" ({n})"),
            };
            s += &format!("  [{verdict}] {}: value {:.6e}, {}{note}\n", c.name, c.value, c.target());
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn series(times: &[f64], f: impl Fn(f64) -> ObservableRecord) -> TimeSeries {
        TimeSeries {
            records: times.iter().map(|&t| f(t)).collect(),
        }
    }

    #[test]
    fn fits_recover_exact_models() {
        let x: Vec<f64> = (0..20).map(|k| k as f64 * 0.1).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v - 1.0).collect();
        let (a, b) = linear_fit(&x, &y);
        assert!((a - 3.0).abs() < 1e-12 && (b + 1.0).abs() < 1e-12);
        let q: Vec<f64> = x.iter().map(|v| 2.0 + 0.5 * v - 4.0 * v * v).collect();
        assert!((initial_slope(&x, &q).unwrap() - 0.5).abs() < 1e-10);
        assert!(initial_slope(&x[..3], &q[..3]).is_err());
        let e: Vec<f64> = x.iter().map(|v| 2.0 * (-0.7 * v).exp()).collect();
        assert!((decay_rate(&x, &e) - 0.7).abs() < 1e-12);
    }

    #[test]
    fn centered_derivative_is_exact_for_quadratics() {
        let t: Vec<f64> = (0..11).map(|k| k as f64 * 0.2).collect();
        let y: Vec<f64> = t.iter().map(|s| s * s).collect();
        for (s, d) in centered_derivative(&t, &y).unwrap() {
            assert!((d - 2.0 * s).abs() < 1e-12);
        }
        let bad = [0.0, 0.1, 0.3];
        assert!(centered_derivative(&bad, &[0.0; 3]).is_err());
    }

    #[test]
    fn force_balance_of_consistent_series() {
        let t: Vec<f64> = (0..101).map(|k| k as f64 * 0.01).collect();
        let s = series(&t, |t| ObservableRecord {
            t,
            mean_p: 0.5 * (1.0 - (-t).exp()),
            force: 0.5 * (-t).exp(),
            ..Default::default()
        });
        let fb = force_balance(&s, 0.01).unwrap();
        assert!(fb.relative_residual < 1e-4);
        assert!(force_balance(&s, 0.001).is_err());
        let zero = series(&t, |t| ObservableRecord { t, ..Default::default() });
        assert_eq!(force_balance(&zero, 1.0).unwrap().relative_residual, 0.0);
    }

    #[test]
    fn diffusion_fit_recovers_initial_rate() {
        let nu = 0.5;
        let d = 0.3;
        let t: Vec<f64> = (0..=40).map(|k| k as f64 * 0.05).collect();
        let s = series(&t, |t| ObservableRecord {
            t,
            mean_p2: 0.1 + d * (1.0 - (-nu * t).exp()) / nu,
            ..Default::default()
        });
        let r = diffusion_rate(&s, nu, 2.0).unwrap();
        assert!((r.rate - d).abs() < 1e-10);
        assert!(r.secant < d);
        assert!(diffusion_rate(&s, nu, 0.1).is_err());
        let flat = series(&t, |t| ObservableRecord { t, mean_p2: 0.1, ..Default::default() });
        assert!(diffusion_rate(&flat, 0.0, 2.0).unwrap().rate.abs() < 1e-12);
    }

    #[test]
    fn flux_check_skips_polarized_states() {
        let rec = |t: f64, sz: f64| ObservableRecord {
            t,
            density: vec![1.0; 4],
            spin_density: vec![[0.0, 0.0, sz]; 4],
            current: vec![[0.0, 0.0, -0.5 * t]; 4],
            ..Default::default()
        };
        let f = vec![Vec3::new(0.0, 0.0, -1.0); 4];
        let s = TimeSeries { records: vec![rec(0.0, 0.0), rec(0.1, 0.0)] };
        let r = flux_source_check(&s, &f, 1.0, 2).unwrap();
        assert!(!r.skipped && r.relative_residual < 1e-12);
        let p = TimeSeries { records: vec![rec(0.0, 1.0), rec(0.1, 1.0)] };
        assert!(flux_source_check(&p, &f, 1.0, 2).unwrap().skipped);
    }

    #[test]
    fn report_round_trips_to_json() {
        let mut r = ExperimentReport::new("demo", Provenance::default());
        r.check(CriterionResult::relative("force", 1.01, 1.0, 0.02));
        r.check(CriterionResult::at_most("residual", 2e-3, 1e-3));
        assert!(!r.passed());
        assert_eq!(r.failures().len(), 1);
        let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(v["criteria"][0]["passed"], true);
        assert!(r.to_text().contains("[FAIL] residual"));
    }
}
