//! Periodic 1D grid and the spectral (FFT) machinery shared by every solver.
//!
//! Positions are `x_i = -L/2 + i·Δx` for `i = 0..N`, so the domain is centered
//! on the origin. Wavenumbers follow FFT ordering; the Nyquist mode is kept at
//! `-πN/L` for even operators (`k²`) and zeroed for odd ones (`k`), which keeps
//! first derivatives of real data real.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    n: usize,
    length: f64,
}

impl Grid {
    pub fn new(n: usize, length: f64) -> Result<Self> {
        if n < 8 {
            return Err(Error::config(
                "grid.n",
                format!("grid needs at least 8 points, got {n}"),
            ));
        }
        if !(length > 0.0 && length.is_finite()) {
            return Err(Error::config(
                "grid.length",
                format!("domain length must be positive and finite, got {length}"),
            ));
        }
        Ok(Grid { n, length })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn dx(&self) -> f64 {
        self.length / self.n as f64
    }

    pub fn x_min(&self) -> f64 {
        -0.5 * self.length
    }

    pub fn x(&self, i: usize) -> f64 {
        self.x_min() + i as f64 * self.dx()
    }

    pub fn positions(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.x(i)).collect()
    }

    /// Shortest signed periodic displacement `x - x0`, in `[-L/2, L/2)`.
    pub fn wrap(&self, d: f64) -> f64 {
        let l = self.length;
        (d + 0.5 * l).rem_euclid(l) - 0.5 * l
    }

    /// Spacing of the spectral momentum grid, `2π/L`.
    pub fn dk(&self) -> f64 {
        2.0 * PI / self.length
    }

    /// Wavenumbers in FFT order with the Nyquist mode at `-πN/L`.
    pub fn wavenumbers(&self) -> Vec<f64> {
        let n = self.n as i64;
        (0..n)
            .map(|m| {
                let m = if m < (n + 1) / 2 { m } else { m - n };
                m as f64 * self.dk()
            })
            .collect()
    }

    /// Wavenumbers for odd-order derivatives: Nyquist mode set to zero.
    pub fn derivative_wavenumbers(&self) -> Vec<f64> {
        let mut k = self.wavenumbers();
        if self.n.is_multiple_of(2) {
            k[self.n / 2] = 0.0;
        }
        k
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "N={} L={} dx={}", self.n, self.length, self.dx())
    }
}

/// FFT plans and wavenumber tables for one grid.
#[derive(Clone)]
pub struct Spectral {
    grid: Grid,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    k: Vec<f64>,
    k_odd: Vec<f64>,
}

impl fmt::Debug for Spectral {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Spectral").field("grid", &self.grid).finish()
    }
}

impl Spectral {
    pub fn new(grid: Grid) -> Self {
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(grid.n());
        let inverse = planner.plan_fft_inverse(grid.n());
        Spectral {
            grid,
            forward,
            inverse,
            k: grid.wavenumbers(),
            k_odd: grid.derivative_wavenumbers(),
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn k(&self) -> &[f64] {
        &self.k
    }

    pub fn k_odd(&self) -> &[f64] {
        &self.k_odd
    }

    /// In-place unnormalized forward DFT of every length-N chunk of `buf`.
    pub fn forward(&self, buf: &mut [Complex64]) {
        self.forward.process(buf);
    }

    /// In-place inverse DFT of every length-N chunk, normalized by 1/N.
    pub fn inverse(&self, buf: &mut [Complex64]) {
        self.inverse.process(buf);
        let s = 1.0 / self.grid.n() as f64;
        buf.iter_mut().for_each(|z| *z *= s);
    }

    /// Apply the Fourier multiplier `mult[k]` to one length-N vector.
    pub fn apply_multiplier(&self, v: &mut [Complex64], mult: &[Complex64]) {
        self.forward(v);
        v.iter_mut().zip(mult).for_each(|(a, m)| *a *= m);
        self.inverse(v);
    }

    /// Apply the multiplier to every row of a row-major `rows × N` slab.
    pub fn apply_multiplier_rows(&self, slab: &mut [Complex64], mult: &[Complex64]) {
        let n = self.grid.n();
        slab.par_chunks_mut(n * 8).for_each(|chunk| {
            self.forward.process(chunk);
            let s = 1.0 / n as f64;
            for row in chunk.chunks_mut(n) {
                row.iter_mut().zip(mult).for_each(|(a, m)| *a *= m * s);
            }
            self.inverse.process(chunk);
        });
    }

    /// Free-particle propagator phases `exp(-i k² τ / 2m)`.
    pub fn free_phases(&self, tau: f64, mass: f64) -> Vec<Complex64> {
        self.k
            .iter()
            .map(|&k| Complex64::from_polar(1.0, -k * k * tau / (2.0 * mass)))
            .collect()
    }

    /// Spectral first derivative of periodic real samples.
    pub fn derivative(&self, f: &[f64]) -> Vec<f64> {
        self.derivative_order(f, 1)
    }

    /// Spectral derivative of order `order` (1 or 2 in practice).
    pub fn derivative_order(&self, f: &[f64], order: u32) -> Vec<f64> {
        let mut buf: Vec<Complex64> = f.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        let ks = if order % 2 == 1 { &self.k_odd } else { &self.k };
        let i_pow = Complex64::i().powu(order);
        let mult: Vec<Complex64> = ks.iter().map(|&k| i_pow * k.powi(order as i32)).collect();
        self.apply_multiplier(&mut buf, &mult);
        buf.iter().map(|z| z.re).collect()
    }

    /// Periodic antiderivative of the zero-mean part of `f`, itself with zero mean.
    pub fn antiderivative_zero_mean(&self, f: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex64> = f.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        let mult: Vec<Complex64> = self
            .k_odd
            .iter()
            .map(|&k| {
                if k == 0.0 {
                    Complex64::new(0.0, 0.0)
                } else {
                    Complex64::new(0.0, -1.0 / k)
                }
            })
            .collect();
        self.apply_multiplier(&mut buf, &mult);
        buf.iter().map(|z| z.re).collect()
    }
}

/// Transpose a square row-major `n × n` matrix into `out`.
pub(crate) fn transpose_into(src: &[Complex64], out: &mut [Complex64], n: usize) {
    out.par_chunks_mut(n).enumerate().for_each(|(j, row)| {
        for (i, v) in row.iter_mut().enumerate() {
            *v = src[i * n + j];
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_tiny_grid() {
        assert!(Grid::new(4, 1.0).is_err());
        assert!(Grid::new(16, 0.0).is_err());
    }

    #[test]
    fn wavenumber_layout() {
        let g = Grid::new(8, 2.0 * PI).unwrap();
        assert_eq!(g.wavenumbers(), vec![0.0, 1.0, 2.0, 3.0, -4.0, -3.0, -2.0, -1.0]);
        assert_eq!(g.derivative_wavenumbers()[4], 0.0);
        assert!((g.x(0) + PI).abs() < 1e-15);
    }

    #[test]
    fn spectral_derivative_of_sine_is_exact() {
        let g = Grid::new(64, 10.0).unwrap();
        let s = Spectral::new(g);
        let q = 3.0 * g.dk();
        let f: Vec<f64> = g.positions().iter().map(|x| (q * x).sin()).collect();
        let d = s.derivative(&f);
        let d2 = s.derivative_order(&f, 2);
        for (i, x) in g.positions().iter().enumerate() {
            assert!((d[i] - q * (q * x).cos()).abs() < 1e-12);
            assert!((d2[i] + q * q * (q * x).sin()).abs() < 1e-11);
        }
        let back = s.antiderivative_zero_mean(&d);
        for i in 0..64 {
            assert!((back[i] - f[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn wrap_is_symmetric() {
        let g = Grid::new(16, 4.0).unwrap();
        assert!((g.wrap(3.0) + 1.0).abs() < 1e-15);
        assert!((g.wrap(-1.5) + 1.5).abs() < 1e-15);
    }
}
