//! Compressible Neo-Hookean material.
//!
//! `Ψ = μ/2 (F:F − 3 − 2 ln J) + λ/2 (½(J² − 1) − ln J)` with `J = det F`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaterialParams {
    pub e: f64,
    pub nu: f64,
    pub lame_lambda: f64,
    pub lame_mu: f64,
}

/// Lamé parameters `(λ, μ)` from Young's modulus and Poisson's ratio.
pub fn lame_from_e_nu(e: f64, nu: f64) -> Result<(f64, f64)> {
    if !(nu < 0.5) {
        return Err(Error::Incompressible { nu });
    }
    if !(nu >= 0.0) {
        return Err(Error::config("nu", format!("{nu} is negative")));
    }
    if !(e > 0.0) || !e.is_finite() {
        return Err(Error::config("E", format!("{e} is not positive")));
    }
    let lambda = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
    let mu = e / (2.0 * (1.0 + nu));
    Ok((lambda, mu))
}

impl MaterialParams {
    pub fn new(e: f64, nu: f64) -> Result<Self> {
        let (lame_lambda, lame_mu) = lame_from_e_nu(e, nu)?;
        Ok(Self {
            e,
            nu,
            lame_lambda,
            lame_mu,
        })
    }
}

fn det3(f: &[[f64; 3]; 3]) -> f64 {
    f[0][0] * (f[1][1] * f[2][2] - f[1][2] * f[2][1]) - f[0][1] * (f[1][0] * f[2][2] - f[1][2] * f[2][0])
        + f[0][2] * (f[1][0] * f[2][1] - f[1][1] * f[2][0])
}

/// Strain-energy density for a full 3×3 deformation gradient.
pub fn energy_density(f: &[[f64; 3]; 3], mat: &MaterialParams) -> Result<f64> {
    let j = det3(f);
    if !(j > 0.0) {
        return Err(Error::Inversion { element: None, det: j });
    }
    let i1: f64 = f.iter().flatten().map(|v| v * v).sum();
    Ok(psi(i1, j, mat.lame_lambda, mat.lame_mu))
}

#[inline]
fn psi(i1: f64, j: f64, lambda: f64, mu: f64) -> f64 {
    let ln_j = j.ln();
    0.5 * mu * (i1 - 3.0 - 2.0 * ln_j) + 0.5 * lambda * (0.5 * (j * j - 1.0) - ln_j)
}

/// In-plane gradient `[F11, F12, F21, F22]` with `F33 = 1` (plane strain).
pub type Grad2 = [f64; 4];

#[inline]
pub(crate) fn det2(f: &Grad2) -> f64 {
    f[0] * f[3] - f[1] * f[2]
}

/// Plane-strain energy density; `None` when `det F ≤ 0`.
#[inline]
pub(crate) fn psi_plane(f: &Grad2, lambda: f64, mu: f64) -> Option<f64> {
    let j = det2(f);
    if !(j > 0.0) {
        return None;
    }
    let i1 = f[0] * f[0] + f[1] * f[1] + f[2] * f[2] + f[3] * f[3] + 1.0;
    Some(psi(i1, j, lambda, mu))
}

/// `F⁻¹` laid out like `F`.
#[inline]
fn inv2(f: &Grad2, j: f64) -> Grad2 {
    [f[3] / j, -f[1] / j, -f[2] / j, f[0] / j]
}

/// First Piola-Kirchhoff stress `P = μ(F − F⁻ᵀ) + λ/2 (J² − 1) F⁻ᵀ`.
#[inline]
pub(crate) fn stress_plane(f: &Grad2, lambda: f64, mu: f64) -> Grad2 {
    let j = det2(f);
    let fi = inv2(f, j);
    let c = 0.5 * lambda * (j * j - 1.0);
    let mut p = [0.0; 4];
    for i in 0..2 {
        for jj in 0..2 {
            // (F⁻ᵀ)_iJ = (F⁻¹)_Ji
            let fit = fi[jj * 2 + i];
            p[i * 2 + jj] = mu * (f[i * 2 + jj] - fit) + c * fit;
        }
    }
    p
}

/// Material tangent `A[iJ][kL] = ∂P_iJ / ∂F_kL`.
#[inline]
pub(crate) fn tangent_plane(f: &Grad2, lambda: f64, mu: f64) -> [[f64; 4]; 4] {
    let j = det2(f);
    let fi = inv2(f, j);
    let c1 = mu - 0.5 * lambda * (j * j - 1.0);
    let c2 = lambda * j * j;
    let mut a = [[0.0; 4]; 4];
    for i in 0..2 {
        for jj in 0..2 {
            for k in 0..2 {
                for l in 0..2 {
                    let mut v = c1 * fi[jj * 2 + k] * fi[l * 2 + i] + c2 * fi[jj * 2 + i] * fi[l * 2 + k];
                    if i == k && jj == l {
                        v += mu;
                    }
                    a[i * 2 + jj][k * 2 + l] = v;
                }
            }
        }
    }
    a
}
