//! Diagonal solves in the Fourier basis of a periodic square grid.

use std::sync::Arc;

use realfft::num_complex::Complex;
use realfft::{ComplexToReal, RealFftPlanner, RealToComplex};
use rustfft::{Fft, FftPlanner};

/// Applies `x = F⁻¹ diag(1/symbol) F b` on an `n × n` periodic grid.
///
/// Rows go through a real-to-complex transform, the `n/2 + 1` resulting
/// columns through a complex transform.
pub struct PeriodicSpectral {
    n: usize,
    half: usize,
    row_fwd: Arc<dyn RealToComplex<f64>>,
    row_inv: Arc<dyn ComplexToReal<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
    spectrum: Vec<Complex<f64>>,
    row_real: Vec<f64>,
    row_cplx: Vec<Complex<f64>>,
    column: Vec<Complex<f64>>,
    col_scratch: Vec<Complex<f64>>,
    row_scratch: Vec<Complex<f64>>,
    /// Inverse symbol, laid out as `spectrum` (`n` rows × `half` columns), pre-scaled by 1/n².
    inv_symbol: Vec<f64>,
}

impl PeriodicSpectral {
    pub fn new(n: usize) -> Self {
        let mut real = RealFftPlanner::<f64>::new();
        let mut cplx = FftPlanner::<f64>::new();
        let half = n / 2 + 1;
        let row_fwd = real.plan_fft_forward(n);
        let row_inv = real.plan_fft_inverse(n);
        let col_fwd = cplx.plan_fft_forward(n);
        let col_inv = cplx.plan_fft_inverse(n);
        let scratch_len = col_fwd
            .get_inplace_scratch_len()
            .max(col_inv.get_inplace_scratch_len());
        let row_scratch_len = row_fwd
            .get_scratch_len()
            .max(row_inv.get_scratch_len());
        Self {
            n,
            half,
            row_fwd,
            row_inv,
            col_fwd,
            col_inv,
            spectrum: vec![Complex::default(); n * half],
            row_real: vec![0.0; n],
            row_cplx: vec![Complex::default(); half],
            column: vec![Complex::default(); n],
            col_scratch: vec![Complex::default(); scratch_len],
            row_scratch: vec![Complex::default(); row_scratch_len],
            inv_symbol: vec![0.0; n * half],
        }
    }

    /// Eigenvalue magnitude of the negated 5-point periodic Laplacian for
    /// wavenumber `(k, l)` with grid spacing `1/n`.
    pub fn neg_laplacian_eigenvalue(n: usize, k: usize, l: usize) -> f64 {
        let nf = n as f64;
        let sk = (std::f64::consts::PI * k as f64 / nf).sin();
        let sl = (std::f64::consts::PI * l as f64 / nf).sin();
        4.0 * nf * nf * (sk * sk + sl * sl)
    }

    /// Sets the diagonal operator from its symbol as a function of the
    /// negated-Laplacian eigenvalue. The symbol must be non-zero everywhere.
    pub fn set_symbol(&mut self, symbol: impl Fn(f64) -> f64) {
        let n = self.n;
        let scale = 1.0 / (n * n) as f64;
        for row in 0..n {
            for col in 0..self.half {
                let ell = Self::neg_laplacian_eigenvalue(n, row, col);
                self.inv_symbol[row * self.half + col] = scale / symbol(ell);
            }
        }
    }

    /// In-place application of the inverse operator to a row-major field.
    pub fn solve_in_place(&mut self, field: &mut [f64]) {
        let (n, half) = (self.n, self.half);
        debug_assert_eq!(field.len(), n * n);
        for row in 0..n {
            self.row_real.copy_from_slice(&field[row * n..(row + 1) * n]);
            self.row_fwd
                .process_with_scratch(&mut self.row_real, &mut self.row_cplx, &mut self.row_scratch)
                .expect("row transform sizes are fixed at construction");
            self.spectrum[row * half..(row + 1) * half].copy_from_slice(&self.row_cplx);
        }
        for col in 0..half {
            for row in 0..n {
                self.column[row] = self.spectrum[row * half + col];
            }
            self.col_fwd
                .process_with_scratch(&mut self.column, &mut self.col_scratch);
            for row in 0..n {
                self.column[row] *= self.inv_symbol[row * half + col];
            }
            self.col_inv
                .process_with_scratch(&mut self.column, &mut self.col_scratch);
            for row in 0..n {
                self.spectrum[row * half + col] = self.column[row];
            }
        }
        for row in 0..n {
            self.row_cplx
                .copy_from_slice(&self.spectrum[row * half..(row + 1) * half]);
            // the inverse real transform requires purely real DC and Nyquist bins
            self.row_cplx[0].im = 0.0;
            if n % 2 == 0 {
                self.row_cplx[half - 1].im = 0.0;
            }
            self.row_inv
                .process_with_scratch(&mut self.row_cplx, &mut self.row_real, &mut self.row_scratch)
                .expect("row transform sizes are fixed at construction");
            field[row * n..(row + 1) * n].copy_from_slice(&self.row_real);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn neg_laplacian(n: usize, u: &[f64]) -> Vec<f64> {
        let h2 = (n * n) as f64;
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                let c = u[i * n + j];
                let s = u[((i + 1) % n) * n + j]
                    + u[((i + n - 1) % n) * n + j]
                    + u[i * n + (j + 1) % n]
                    + u[i * n + (j + n - 1) % n];
                out[i * n + j] = (4.0 * c - s) * h2;
            }
        }
        out
    }

    #[test]
    fn inverts_shifted_laplacian() {
        // (shift - Δ) x = b solved spectrally, checked by applying the stencil
        let n = 16;
        let shift = 3.0;
        let mut solver = PeriodicSpectral::new(n);
        solver.set_symbol(|ell| shift + ell);
        let b: Vec<f64> = (0..n * n).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.1).collect();
        let mut x = b.clone();
        solver.solve_in_place(&mut x);
        let lx = neg_laplacian(n, &x);
        for i in 0..n * n {
            let ax = shift * x[i] + lx[i];
            assert!((ax - b[i]).abs() < 1e-10, "{i}: {ax} vs {}", b[i]);
        }
    }

    #[test]
    fn identity_symbol_is_identity() {
        let n = 8;
        let mut solver = PeriodicSpectral::new(n);
        solver.set_symbol(|_| 1.0);
        let b: Vec<f64> = (0..n * n).map(|i| (i as f64).sin()).collect();
        let mut x = b.clone();
        solver.solve_in_place(&mut x);
        for (a, e) in x.iter().zip(&b) {
            assert!((a - e).abs() < 1e-13);
        }
    }
}
