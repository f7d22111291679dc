//! Cahn-Hilliard phase separation on the periodic unit square.
//!
//! The mixed concentration / chemical-potential system is discretized with
//! the 5-point periodic Laplacian on an `n × n` cell grid and advanced with a
//! θ-weighted flux:
//!
//! ```text
//! (c₁ − c₀)/Δt = M Δ[(1 − θ) μ(c₀) + θ μ(c₁)],   μ(c) = f′(c) − λ Δc
//! ```
//!
//! with `f(c) = ω c²(1 − c)²`. Each step eliminates μ and solves the
//! resulting nonlinear equation for `c₁` by Newton's method; the Newton
//! systems are solved with GMRES preconditioned by the constant-coefficient
//! linearization, which is diagonal in the Fourier basis.

mod spectral;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use spectral::PeriodicSpectral;

use crate::error::{Error, Result};
use crate::linalg::{norm_inf, Gmres};
use crate::pattern::{Pattern, PatternMeta, PatternSource, SIDE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChConfig {
    /// Initial mean concentration.
    pub c0: f64,
    /// Half-range of the uniform initial fluctuation.
    pub noise_amp: f64,
    /// Number of noise blocks per side; must divide `sim_resolution`.
    pub init_grid: usize,
    pub mobility: f64,
    /// Interface-thickness coefficient λ.
    pub interface_lambda: f64,
    /// Peak-to-valley scale ω of the double well `ω c²(1−c)²`.
    pub well_depth: f64,
    pub dt: f64,
    pub theta: f64,
    pub n_steps: usize,
    pub snapshot_steps: Vec<usize>,
    pub sim_resolution: usize,
    pub seed: u64,
    /// Newton stops once the preconditioned residual (concentration units,
    /// max norm) falls below this.
    pub newton_tol: f64,
    pub max_newton_iters: usize,
}

impl Default for ChConfig {
    fn default() -> Self {
        Self {
            c0: 0.5,
            noise_amp: 0.05,
            init_grid: 64,
            mobility: 1.0,
            interface_lambda: 1e-2,
            well_depth: 100.0,
            dt: 5e-6,
            theta: 0.5,
            n_steps: 2000,
            snapshot_steps: vec![2000],
            sim_resolution: 128,
            seed: 0,
            newton_tol: 1e-10,
            max_newton_iters: 30,
        }
    }
}

impl ChConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.c0 > 0.0 && self.c0 < 1.0) {
            return Err(Error::config("c0", format!("{} is not in (0, 1)", self.c0)));
        }
        if !(self.noise_amp >= 0.0 && self.noise_amp < self.c0.min(1.0 - self.c0)) {
            return Err(Error::config(
                "noise_amp",
                format!("{} must lie in [0, min(c0, 1 - c0))", self.noise_amp),
            ));
        }
        if self.sim_resolution < 4 {
            return Err(Error::config("sim_resolution", "must be at least 4"));
        }
        if self.init_grid == 0 || self.sim_resolution % self.init_grid != 0 {
            return Err(Error::config(
                "init_grid",
                format!("{} does not divide sim_resolution {}", self.init_grid, self.sim_resolution),
            ));
        }
        if !(self.mobility >= 0.0) {
            return Err(Error::config("mobility", "must be non-negative"));
        }
        if !(self.interface_lambda > 0.0) {
            return Err(Error::config("interface_lambda", "must be positive"));
        }
        if !(self.well_depth > 0.0) {
            return Err(Error::config("well_depth", "must be positive"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::config("dt", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::config("theta", format!("{} is not in [0, 1]", self.theta)));
        }
        if self.snapshot_steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("snapshot_steps", "must be strictly increasing"));
        }
        if let Some(&last) = self.snapshot_steps.last() {
            if last > self.n_steps {
                return Err(Error::config(
                    "snapshot_steps",
                    format!("step {last} exceeds n_steps {}", self.n_steps),
                ));
            }
        }
        Ok(())
    }

    /// Double-well free energy density `ω c²(1−c)²`.
    #[inline]
    pub fn well(&self, c: f64) -> f64 {
        let t = c * (1.0 - c);
        self.well_depth * t * t
    }

    #[inline]
    fn well_prime(&self, c: f64) -> f64 {
        2.0 * self.well_depth * c * (1.0 - c) * (1.0 - 2.0 * c)
    }

    #[inline]
    fn well_second(&self, c: f64) -> f64 {
        self.well_depth * (2.0 - 12.0 * c + 12.0 * c * c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationField {
    values: Vec<f64>,
    resolution: usize,
    pub step_index: usize,
    total_mass: f64,
}

impl ConcentrationField {
    pub fn new(values: Vec<f64>, resolution: usize, step_index: usize) -> Result<Self> {
        if values.len() != resolution * resolution {
            return Err(Error::Argument(format!(
                "{} values do not form a {resolution}x{resolution} grid",
                values.len()
            )));
        }
        let total_mass = values.iter().sum();
        Ok(Self {
            values,
            resolution,
            step_index,
            total_mass,
        })
    }

    pub fn uniform(value: f64, resolution: usize) -> Self {
        Self::new(vec![value; resolution * resolution], resolution, 0).expect("square by construction")
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn total_mass(&self) -> f64 {
        self.total_mass
    }

    pub fn mean(&self) -> f64 {
        self.total_mass / self.values.len() as f64
    }
}

/// Initial state: `c0` plus block-constant uniform noise in `[−a, a]`,
/// one draw per `init_grid × init_grid` block, in row-major block order.
pub fn init_field(config: &ChConfig) -> Result<ConcentrationField> {
    config.validate()?;
    let n = config.sim_resolution;
    let blocks = config.init_grid;
    let block = n / blocks;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let noise: Vec<f64> = (0..blocks * blocks)
        .map(|_| (2.0 * rng.gen::<f64>() - 1.0) * config.noise_amp)
        .collect();
    let values = (0..n * n)
        .map(|i| {
            let (row, col) = (i / n, i % n);
            config.c0 + noise[(row / block) * blocks + col / block]
        })
        .collect();
    ConcentrationField::new(values, n, 0)
}

/// Periodic 5-point Laplacian with spacing `1/n`.
fn laplacian(n: usize, u: &[f64], out: &mut [f64]) {
    let h2 = (n * n) as f64;
    for i in 0..n {
        let up = &u[((i + n - 1) % n) * n..][..n];
        let down = &u[((i + 1) % n) * n..][..n];
        let row = &u[i * n..][..n];
        let dst = &mut out[i * n..][..n];
        for j in 1..n - 1 {
            dst[j] = (up[j] + down[j] + row[j - 1] + row[j + 1] - 4.0 * row[j]) * h2;
        }
        dst[0] = (up[0] + down[0] + row[n - 1] + row[1] - 4.0 * row[0]) * h2;
        dst[n - 1] = (up[n - 1] + down[n - 1] + row[n - 2] + row[0] - 4.0 * row[n - 1]) * h2;
    }
}

/// Discrete Ginzburg-Landau energy `h² Σ [f(c) + (λ/2)|∇⁺c|²]` with periodic
/// forward differences, consistent with the 5-point Laplacian.
pub fn free_energy(field: &ConcentrationField, config: &ChConfig) -> f64 {
    let n = field.resolution;
    let h2 = 1.0 / (n * n) as f64;
    let u = &field.values;
    let mut grad = 0.0;
    let mut bulk = 0.0;
    for i in 0..n {
        for j in 0..n {
            let c = u[i * n + j];
            let dx = u[i * n + (j + 1) % n] - c;
            let dy = u[((i + 1) % n) * n + j] - c;
            grad += dx * dx + dy * dy;
            bulk += config.well(c);
        }
    }
    // |∇c|² h² = (Δc_forward)² since differences carry 1/h each
    h2 * bulk + 0.5 * config.interface_lambda * grad
}

/// Reusable per-configuration solver state (FFT plans, scratch buffers).
pub struct ChSolver {
    config: ChConfig,
    spectral: PeriodicSpectral,
    n: usize,
    gmres: Gmres,
}

impl ChSolver {
    pub fn new(config: ChConfig) -> Result<Self> {
        config.validate()?;
        let n = config.sim_resolution;
        Ok(Self {
            spectral: PeriodicSpectral::new(n),
            n,
            config,
            gmres: Gmres::default(),
        })
    }

    pub fn config(&self) -> &ChConfig {
        &self.config
    }

    fn chemical_potential(&self, c: &[f64], out: &mut [f64]) {
        laplacian(self.n, c, out);
        let lam = self.config.interface_lambda;
        for (o, &ci) in out.iter_mut().zip(c) {
            *o = self.config.well_prime(ci) - lam * *o;
        }
    }

    /// Advances one time step.
    pub fn step(&mut self, field: &ConcentrationField) -> Result<ConcentrationField> {
        let n = self.n;
        if field.resolution != n {
            return Err(Error::Argument(format!(
                "field resolution {} does not match sim_resolution {n}",
                field.resolution
            )));
        }
        let cfg = self.config.clone();
        let len = n * n;
        let (dt, theta, m, lam) = (cfg.dt, cfg.theta, cfg.mobility, cfg.interface_lambda);
        let c_old = &field.values;

        // explicit part of the flux, fixed for the whole step
        let mut mu_old = vec![0.0; len];
        self.chemical_potential(c_old, &mut mu_old);

        let mut c = c_old.clone();
        let mut mu = vec![0.0; len];
        let mut residual = vec![0.0; len];
        let mut scaled = vec![0.0; len];
        let mut curvature = vec![0.0; len];
        let mut t1 = vec![0.0; len];
        let mut t2 = vec![0.0; len];
        let mut delta = vec![0.0; len];

        let mut iter = 0;
        loop {
            // R(c) = (c − c₀)/Δt − M Δ[(1−θ)μ₀ + θ μ(c)]
            self.chemical_potential(&c, &mut mu);
            for i in 0..len {
                t1[i] = (1.0 - theta) * mu_old[i] + theta * mu[i];
            }
            laplacian(n, &t1, &mut t2);
            for i in 0..len {
                residual[i] = (c[i] - c_old[i]) / dt - m * t2[i];
            }

            for (k, &ci) in curvature.iter_mut().zip(&c) {
                *k = cfg.well_second(ci);
            }
            let mean_curv =
                (curvature.iter().sum::<f64>() / len as f64).clamp(0.0, 2.0 * cfg.well_depth);
            self.spectral
                .set_symbol(|ell| 1.0 / dt + m * theta * ell * (mean_curv + lam * ell));

            // residual measured in concentration units through the preconditioner
            scaled.copy_from_slice(&residual);
            self.spectral.solve_in_place(&mut scaled);
            let res_norm = norm_inf(&scaled);
            if res_norm <= cfg.newton_tol {
                break;
            }
            if iter >= cfg.max_newton_iters || !res_norm.is_finite() {
                return Err(Error::Solver {
                    step: field.step_index + 1,
                    residual: res_norm,
                });
            }
            iter += 1;

            for r in residual.iter_mut() {
                *r = -*r;
            }
            // inexact Newton: early iterates only need a rough direction
            let rtol = (10.0 * res_norm).clamp(1e-8, 1e-2);
            delta.iter_mut().for_each(|d| *d = 0.0);
            let spectral = &mut self.spectral;
            let outcome = self.gmres.solve(
                |v, out| {
                    // J v = v/Δt − Mθ Δ(f''(c) v − λ Δv)
                    laplacian(n, v, &mut t1);
                    for i in 0..len {
                        t1[i] = curvature[i] * v[i] - lam * t1[i];
                    }
                    laplacian(n, &t1, &mut t2);
                    for i in 0..len {
                        out[i] = v[i] / dt - m * theta * t2[i];
                    }
                },
                |v| spectral.solve_in_place(v),
                &residual,
                &mut delta,
                rtol,
                30,
                300,
            );
            if !outcome.converged && outcome.residual > 0.1 {
                return Err(Error::Solver {
                    step: field.step_index + 1,
                    residual: res_norm,
                });
            }
            for (ci, d) in c.iter_mut().zip(&delta) {
                *ci += d;
            }
        }
        ConcentrationField::new(c, n, field.step_index + 1)
    }
}

/// One step with a freshly planned solver. Prefer [`ChSolver`] in loops.
pub fn step(field: &ConcentrationField, config: &ChConfig) -> Result<ConcentrationField> {
    ChSolver::new(config.clone())?.step(field)
}

/// Runs `n_steps` and returns the fields at `snapshot_steps`.
pub fn run_simulation(config: &ChConfig) -> Result<Vec<(usize, ConcentrationField)>> {
    run_simulation_with(config, |_| {})
}

/// Like [`run_simulation`], calling `observe` on every field (including the
/// initial one) as it is produced.
pub fn run_simulation_with(
    config: &ChConfig,
    mut observe: impl FnMut(&ConcentrationField),
) -> Result<Vec<(usize, ConcentrationField)>> {
    let mut solver = ChSolver::new(config.clone())?;
    let mut field = init_field(config)?;
    observe(&field);
    let mut snapshots = Vec::with_capacity(config.snapshot_steps.len());
    let mut wanted = config.snapshot_steps.iter().copied().peekable();
    if wanted.peek() == Some(&0) {
        snapshots.push((0, field.clone()));
        wanted.next();
    }
    for step_index in 1..=config.n_steps {
        if wanted.peek().is_none() {
            break;
        }
        field = solver.step(&field)?;
        observe(&field);
        if wanted.peek() == Some(&step_index) {
            snapshots.push((step_index, field.clone()));
            wanted.next();
        }
    }
    Ok(snapshots)
}

/// Area-average pools the field to 64×64 and marks cells strictly above
/// `threshold` as stiff.
pub fn binarize_and_downsample(field: &ConcentrationField, threshold: f64) -> Result<Pattern> {
    let n = field.resolution;
    if n % SIDE != 0 {
        return Err(Error::config(
            "sim_resolution",
            format!("{n} is not a multiple of {SIDE}"),
        ));
    }
    let f = n / SIDE;
    let area = (f * f) as f64;
    let meta = PatternMeta {
        source: PatternSource::CahnHilliard,
        seed: 0,
        c0: None,
        snapshot_step: Some(field.step_index),
    };
    Ok(Pattern::from_fn(meta, |row, col| {
        let mut s = 0.0;
        for i in row * f..(row + 1) * f {
            for j in col * f..(col + 1) * f {
                s += field.values[i * n + j];
            }
        }
        s / area > threshold
    }))
}

/// Simulates and converts each snapshot into a pattern tagged with the run's provenance.
pub fn simulate_patterns(config: &ChConfig, threshold: f64) -> Result<Vec<Pattern>> {
    run_simulation(config)?
        .into_iter()
        .map(|(step, field)| {
            let mut p = binarize_and_downsample(&field, threshold)?;
            p.meta.seed = config.seed;
            p.meta.c0 = Some(config.c0);
            p.meta.snapshot_step = Some(step);
            Ok(p)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(c0: f64, seed: u64) -> ChConfig {
        ChConfig {
            c0,
            sim_resolution: 64,
            init_grid: 64,
            seed,
            n_steps: 20,
            snapshot_steps: vec![20],
            ..ChConfig::default()
        }
    }

    #[test]
    fn zero_noise_is_uniform() {
        let cfg = ChConfig {
            noise_amp: 0.0,
            ..small(0.5, 1)
        };
        let f = init_field(&cfg).unwrap();
        assert!(f.values().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn init_noise_bounds_and_mean() {
        // the block draws are i.i.d. U[-a, a]: their mean has sd a/sqrt(3 B²),
        // so 3·a/B is a loose (≈5σ) envelope
        let cfg = ChConfig {
            c0: 0.63,
            init_grid: 16,
            ..small(0.63, 9)
        };
        let f = init_field(&cfg).unwrap();
        assert!(f.values().iter().all(|&v| (0.58..=0.68).contains(&v)));
        let bound = 0.05 / 16.0 * 3.0;
        assert!((f.mean() - 0.63).abs() < bound, "{}", f.mean());
    }

    #[test]
    fn init_blocks_are_constant() {
        let cfg = ChConfig {
            init_grid: 8,
            ..small(0.5, 4)
        };
        let f = init_field(&cfg).unwrap();
        let n = 64;
        let v = f.values();
        for i in 0..n {
            for j in 0..n {
                assert_eq!(v[i * n + j], v[(i / 8 * 8) * n + j / 8 * 8]);
            }
        }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = small(0.5, 77);
        assert_eq!(init_field(&cfg).unwrap(), init_field(&cfg).unwrap());
        let other = ChConfig { seed: 78, ..cfg.clone() };
        assert_ne!(init_field(&cfg).unwrap(), init_field(&other).unwrap());
    }

    #[test]
    fn invalid_configs_name_the_field() {
        let cases: Vec<(ChConfig, &str)> = vec![
            (ChConfig { c0: 1.2, ..small(0.5, 0) }, "c0"),
            (ChConfig { noise_amp: 0.6, ..small(0.5, 0) }, "noise_amp"),
            (ChConfig { init_grid: 7, ..small(0.5, 0) }, "init_grid"),
            (ChConfig { dt: 0.0, ..small(0.5, 0) }, "dt"),
            (ChConfig { theta: 1.5, ..small(0.5, 0) }, "theta"),
            (ChConfig { snapshot_steps: vec![5, 5], ..small(0.5, 0) }, "snapshot_steps"),
            (ChConfig { snapshot_steps: vec![50], ..small(0.5, 0) }, "snapshot_steps"),
        ];
        for (cfg, field) in cases {
            match init_field(&cfg) {
                Err(Error::Config { field: f, .. }) => assert_eq!(f, field),
                other => panic!("expected config error for {field}, got {other:?}"),
            }
        }
    }

    #[test]
    fn uniform_field_is_a_fixed_point() {
        let cfg = small(0.63, 0);
        let f = ConcentrationField::uniform(0.63, 64);
        let g = step(&f, &cfg).unwrap();
        for v in g.values() {
            assert!((v - 0.63).abs() < 1e-12);
        }
        assert_eq!(g.step_index, 1);
    }

    #[test]
    fn step_conserves_mass() {
        let cfg = small(0.5, 3);
        let mut solver = ChSolver::new(cfg.clone()).unwrap();
        let f0 = init_field(&cfg).unwrap();
        let mut f = f0.clone();
        for _ in 0..10 {
            let g = solver.step(&f).unwrap();
            assert!(((g.mean() - f.mean()) / f.mean()).abs() < 1e-10);
            f = g;
        }
        assert!(((f.mean() - f0.mean()) / f0.mean()).abs() < 1e-10);
    }

    #[test]
    fn cached_mass_matches_sum() {
        let f = init_field(&small(0.5, 12)).unwrap();
        assert_eq!(f.total_mass(), f.values().iter().sum::<f64>());
    }

    #[test]
    fn mismatched_resolution_is_rejected() {
        let cfg = small(0.5, 0);
        let f = ConcentrationField::uniform(0.5, 128);
        assert!(matches!(step(&f, &cfg), Err(Error::Argument(_))));
    }

    #[test]
    fn degenerate_runs() {
        let cfg = ChConfig {
            n_steps: 0,
            snapshot_steps: vec![0],
            ..small(0.5, 5)
        };
        let snaps = run_simulation(&cfg).unwrap();
        assert_eq!(snaps.len(), 1);
        assert_eq!(snaps[0].1, init_field(&cfg).unwrap());

        let cfg = ChConfig {
            snapshot_steps: vec![],
            ..cfg
        };
        assert!(run_simulation(&cfg).unwrap().is_empty());
    }

    #[test]
    fn binarize_rules() {
        let p = binarize_and_downsample(&ConcentrationField::uniform(0.9, 128), 0.5).unwrap();
        assert_eq!(p.count_stiff(), 64 * 64);
        let p = binarize_and_downsample(&ConcentrationField::uniform(0.5, 128), 0.5).unwrap();
        assert_eq!(p.count_stiff(), 0);
        assert_eq!(p.meta.source, PatternSource::CahnHilliard);

        // 2×2 blocks alternating 0/1 at 128 average to exactly 0.5 per pooled cell
        let n = 128;
        let vals = (0..n * n)
            .map(|i| (((i / n) + (i % n)) % 2) as f64)
            .collect();
        let checker = ConcentrationField::new(vals, n, 3).unwrap();
        let p = binarize_and_downsample(&checker, 0.5).unwrap();
        assert_eq!(p.count_stiff(), 0);
        assert_eq!(p.meta.snapshot_step, Some(3));

        let odd = ConcentrationField::uniform(0.5, 96);
        assert!(matches!(binarize_and_downsample(&odd, 0.5), Err(Error::Config { .. })));
    }
}
