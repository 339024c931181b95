//! Observable snapshots shared by every solver.

use serde::Serialize;

use crate::fields::Vec3;

/// Observables at one output time.
///
/// Spatial profiles are sampled on the solver's x grid. `current` is the
/// orientation flux `j⃗(x) = ∫ p ρ⃗(x, p) dp`, `force` is the momentum-balance
/// prediction `-(ν/2) ∫ [(∂ₓn) × n]·ρ⃗(x) dx` evaluated on this snapshot.
#[derive(Clone, Debug, Default, Serialize)]
pub struct ObservableRecord {
    pub t: f64,
    pub trace: f64,
    pub purity: f64,
    pub mean_x: f64,
    pub var_x: f64,
    pub mean_p: f64,
    pub mean_p2: f64,
    pub density: Vec<f64>,
    pub spin_density: Vec<[f64; 3]>,
    pub current: Vec<[f64; 3]>,
    pub orientation: [f64; 3],
    pub force: f64,
    pub min_eigenvalue: Option<f64>,
}

impl ObservableRecord {
    pub fn spin_vec(&self, i: usize) -> Vec3 {
        Vec3::from(self.spin_density[i])
    }

    /// Total orientation-flux component `∫ j_c(x) dx`, i.e. `⟨p σ_c⟩`.
    pub fn total_current(&self, c: usize, dx: f64) -> f64 {
        self.current.iter().map(|j| j[c]).sum::<f64>() * dx
    }
}

/// `-(ν/2) Σᵢ F(xᵢ)·ρ⃗(xᵢ) Δx`.
pub fn force_integral(nu: f64, force_field: &[Vec3], spin_density: &[[f64; 3]], dx: f64) -> f64 {
    -0.5 * nu
        * force_field
            .iter()
            .zip(spin_density)
            .map(|(f, s)| f.dot(&Vec3::from(*s)))
            .sum::<f64>()
        * dx
}

/// A sequence of records at increasing times.
#[derive(Clone, Debug, Default, Serialize)]
pub struct TimeSeries {
    pub records: Vec<ObservableRecord>,
}

impl TimeSeries {
    pub fn push(&mut self, r: ObservableRecord) {
        self.records.push(r);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn times(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.t).collect()
    }

    pub fn column(&self, f: impl Fn(&ObservableRecord) -> f64) -> Vec<f64> {
        self.records.iter().map(f).collect()
    }

    pub fn last(&self) -> Option<&ObservableRecord> {
        self.records.last()
    }
}
