//! Small dense helpers and a restarted GMRES shared by the solvers.

/// Dot product with eight independent partial sums so the loop vectorizes.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    acc.iter().sum::<f64>() + tail
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn norm_inf(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

#[derive(Debug, Clone, Copy)]
pub struct GmresOutcome {
    pub iterations: usize,
    pub residual: f64,
    pub converged: bool,
}

/// Right-preconditioned restarted GMRES for `A x = b`.
///
/// `apply` computes `out = A v`; `precond` overwrites its argument with
/// `M⁻¹ v`. Starts from the incoming `x`. Stops once `‖b − A x‖ ≤ rtol ‖b‖`.
pub fn gmres(
    apply: impl FnMut(&[f64], &mut [f64]),
    precond: impl FnMut(&mut [f64]),
    b: &[f64],
    x: &mut [f64],
    rtol: f64,
    restart: usize,
    max_iters: usize,
) -> GmresOutcome {
    Gmres::default().solve(apply, precond, b, x, rtol, restart, max_iters)
}

/// GMRES with Krylov storage kept between solves.
#[derive(Default)]
pub struct Gmres {
    basis: Vec<Vec<f64>>,
    work: Vec<f64>,
    z: Vec<f64>,
}

impl Gmres {
    #[allow(clippy::too_many_arguments)]
    pub fn solve(
        &mut self,
        mut apply: impl FnMut(&[f64], &mut [f64]),
        mut precond: impl FnMut(&mut [f64]),
        b: &[f64],
        x: &mut [f64],
        rtol: f64,
        restart: usize,
        max_iters: usize,
    ) -> GmresOutcome {
        let n = b.len();
        let b_norm = norm2(b);
        if b_norm == 0.0 {
            x.iter_mut().for_each(|v| *v = 0.0);
            return GmresOutcome {
                iterations: 0,
                residual: 0.0,
                converged: true,
            };
        }
        let target = rtol * b_norm;
        for v in [&mut self.work, &mut self.z] {
            v.resize(n, 0.0);
        }
        if self.basis.first().map_or(true, |v| v.len() != n) {
            self.basis.clear();
        }
        if self.basis.is_empty() {
            self.basis.push(vec![0.0; n]);
        }
        let Gmres { basis, work, z } = self;
        let mut hess = vec![vec![0.0; restart]; restart + 1];
        let mut cs = vec![0.0; restart];
        let mut sn = vec![0.0; restart];
        let mut g = vec![0.0; restart + 1];
        let mut total = 0;

        loop {
            apply(x, work);
            for i in 0..n {
                basis[0][i] = b[i] - work[i];
            }
            let residual = norm2(&basis[0]);
            if residual <= target || total >= max_iters {
                return GmresOutcome {
                    iterations: total,
                    residual: residual / b_norm,
                    converged: residual <= target,
                };
            }
            basis[0].iter_mut().for_each(|v| *v /= residual);
            g.iter_mut().for_each(|v| *v = 0.0);
            g[0] = residual;

            let mut k = 0;
            while k < restart && total < max_iters {
                z.copy_from_slice(&basis[k]);
                precond(z);
                apply(z, work);
                // modified Gram-Schmidt
                for j in 0..=k {
                    let h = dot(work, &basis[j]);
                    hess[j][k] = h;
                    for (w, v) in work.iter_mut().zip(&basis[j]) {
                        *w -= h * v;
                    }
                }
                let h_next = norm2(work);
                hess[k + 1][k] = h_next;
                if basis.len() == k + 1 {
                    basis.push(vec![0.0; n]);
                }
                if h_next > 0.0 {
                    for (dst, w) in basis[k + 1].iter_mut().zip(work.iter()) {
                        *dst = w / h_next;
                    }
                }
                for j in 0..k {
                    let t = cs[j] * hess[j][k] + sn[j] * hess[j + 1][k];
                    hess[j + 1][k] = -sn[j] * hess[j][k] + cs[j] * hess[j + 1][k];
                    hess[j][k] = t;
                }
                let denom = hess[k][k].hypot(hess[k + 1][k]);
                cs[k] = hess[k][k] / denom;
                sn[k] = hess[k + 1][k] / denom;
                hess[k][k] = denom;
                hess[k + 1][k] = 0.0;
                g[k + 1] = -sn[k] * g[k];
                g[k] *= cs[k];
                total += 1;
                k += 1;
                if g[k].abs() <= target || h_next == 0.0 {
                    break;
                }
            }

            // back substitution for the Krylov coefficients
            let mut y = vec![0.0; k];
            for i in (0..k).rev() {
                let mut s = g[i];
                for j in i + 1..k {
                    s -= hess[i][j] * y[j];
                }
                y[i] = s / hess[i][i];
            }
            z.iter_mut().for_each(|v| *v = 0.0);
            for (j, yj) in y.iter().enumerate() {
                for (zi, vi) in z.iter_mut().zip(&basis[j]) {
                    *zi += yj * vi;
                }
            }
            precond(z);
            for (xi, zi) in x.iter_mut().zip(z.iter()) {
                *xi += zi;
            }
        }
    }
}
