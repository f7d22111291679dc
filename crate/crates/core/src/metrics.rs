//! Regression scores, morphological pattern descriptors, the Fréchet
//! distance between descriptor distributions and ΔΨ histograms.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use faer::{Mat, Side};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pattern::{Pattern, CELLS, SIDE};

/// Coefficient of determination and mean absolute error.
pub fn r2_mae(y_true: &[f64], y_pred: &[f64]) -> Result<(f64, f64)> {
    if y_true.is_empty() || y_true.len() != y_pred.len() {
        return Err(Error::Argument(format!(
            "r2_mae needs equal non-zero lengths, got {} and {}",
            y_true.len(),
            y_pred.len()
        )));
    }
    let n = y_true.len() as f64;
    let mean = y_true.iter().sum::<f64>() / n;
    let ss_tot: f64 = y_true.iter().map(|y| (y - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(Error::UndefinedR2);
    }
    let ss_res: f64 = y_true.iter().zip(y_pred).map(|(t, p)| (t - p).powi(2)).sum();
    let mae = y_true.iter().zip(y_pred).map(|(t, p)| (t - p).abs()).sum::<f64>() / n;
    Ok((1.0 - ss_res / ss_tot, mae))
}

pub const CORRELATION_LAGS: [usize; 5] = [1, 2, 4, 8, 16];
pub const DESCRIPTOR_DIM: usize = 8;
pub const DESCRIPTOR_NAMES: [&str; DESCRIPTOR_DIM] = [
    "stiff_fraction",
    "rho_1",
    "rho_2",
    "rho_4",
    "rho_8",
    "rho_16",
    "perimeter_density",
    "components",
];

/// Normalized two-point correlation of the stiff phase at lattice distance
/// `lag`, averaged over the horizontal and vertical directions with
/// periodic wraparound.
///
/// `ρ = (S₂ − φ²) / (φ − φ²)` so that 1 means perfectly correlated and 0
/// uncorrelated. Single-phase patterns give 0.
pub fn two_point_correlation(pattern: &Pattern, lag: usize) -> f64 {
    let cells = pattern.cells();
    let phi = pattern.stiff_fraction();
    let var = phi - phi * phi;
    if var == 0.0 {
        return 0.0;
    }
    let lag = lag % SIDE;
    let mut both = 0usize;
    for r in 0..SIDE {
        let row = &cells[r * SIDE..(r + 1) * SIDE];
        let below = &cells[((r + lag) % SIDE) * SIDE..((r + lag) % SIDE + 1) * SIDE];
        for c in 0..SIDE {
            let v = row[c];
            both += (v & row[(c + lag) % SIDE]) as usize + (v & below[c]) as usize;
        }
    }
    let s2 = both as f64 / (2 * CELLS) as f64;
    (s2 - phi * phi) / var
}

/// Fraction of interior nearest-neighbour pairs that straddle a phase
/// boundary (no wraparound).
pub fn perimeter_density(pattern: &Pattern) -> f64 {
    let cells = pattern.cells();
    let mut edges = 0usize;
    for r in 0..SIDE {
        for c in 0..SIDE {
            let v = cells[r * SIDE + c];
            if c + 1 < SIDE && cells[r * SIDE + c + 1] != v {
                edges += 1;
            }
            if r + 1 < SIDE && cells[(r + 1) * SIDE + c] != v {
                edges += 1;
            }
        }
    }
    edges as f64 / (2 * SIDE * (SIDE - 1)) as f64
}

/// Number of 4-connected components of cells equal to `phase` (no wraparound).
pub fn component_count(pattern: &Pattern, phase: bool) -> usize {
    let cells = pattern.cells();
    let target = phase as u8;
    let mut seen = vec![false; CELLS];
    let mut stack = Vec::new();
    let mut count = 0;
    for start in 0..CELLS {
        if seen[start] || cells[start] != target {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (r, c) = (i / SIDE, i % SIDE);
            let mut visit = |j: usize| {
                if !seen[j] && cells[j] == target {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if r > 0 {
                visit(i - SIDE);
            }
            if r + 1 < SIDE {
                visit(i + SIDE);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < SIDE {
                visit(i + 1);
            }
        }
    }
    count
}

/// Fixed-length morphological summary of a pattern; see [`DESCRIPTOR_NAMES`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DescriptorVector(pub [f64; DESCRIPTOR_DIM]);

impl DescriptorVector {
    pub fn of(pattern: &Pattern) -> Self {
        let mut v = [0.0; DESCRIPTOR_DIM];
        v[0] = pattern.stiff_fraction();
        for (slot, &lag) in v[1..6].iter_mut().zip(&CORRELATION_LAGS) {
            *slot = two_point_correlation(pattern, lag);
        }
        v[6] = perimeter_density(pattern);
        // both phases pooled into one count so the vector stays 8-long
        let comps = component_count(pattern, true) + component_count(pattern, false);
        v[7] = comps as f64 / SIDE as f64;
        DescriptorVector(v)
    }
}

/// Gaussian summary (mean, covariance) of a descriptor distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrechetStats {
    pub mean: Vec<f64>,
    /// Row-major `dim × dim` sample covariance.
    pub cov: Vec<f64>,
}

impl FrechetStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Sample mean and unbiased covariance; needs at least `dim + 1` rows.
    pub fn from_samples(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.len() < dim + 1 || dim == 0 {
            return Err(Error::SampleSize {
                required: dim.max(1) + 1,
                got: rows.len(),
            });
        }
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Argument("descriptor rows differ in length".into()));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut cov = vec![0.0; dim * dim];
        for r in rows {
            for i in 0..dim {
                let di = r[i] - mean[i];
                for j in 0..dim {
                    cov[i * dim + j] += di * (r[j] - mean[j]);
                }
            }
        }
        cov.iter_mut().for_each(|c| *c /= n - 1.0);
        Ok(Self { mean, cov })
    }
}

pub fn descriptors(patterns: &[Pattern]) -> Vec<DescriptorVector> {
    patterns.iter().map(DescriptorVector::of).collect()
}

pub fn descriptor_stats(patterns: &[Pattern]) -> Result<FrechetStats> {
    if patterns.len() < DESCRIPTOR_DIM + 1 {
        return Err(Error::SampleSize {
            required: DESCRIPTOR_DIM + 1,
            got: patterns.len(),
        });
    }
    stats_of(&descriptors(patterns))
}

fn stats_of(desc: &[DescriptorVector]) -> Result<FrechetStats> {
    let rows: Vec<Vec<f64>> = desc.iter().map(|d| d.0.to_vec()).collect();
    FrechetStats::from_samples(&rows)
}

const EIGEN_CLIP: f64 = 1e-10;

/// Eigenpairs of a symmetric matrix with eigenvalues clipped to be
/// non-negative; anything below `−1e-10` is rejected.
fn psd_eigen(m: &Mat<f64>, what: &str) -> Result<(Vec<f64>, Mat<f64>)> {
    let evd = m
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::NumericalDomain(format!("eigendecomposition of {what} failed: {e:?}")))?;
    let s = evd.S().column_vector();
    let mut vals = Vec::with_capacity(m.nrows());
    for i in 0..m.nrows() {
        let v = s[i];
        if !v.is_finite() || v < -EIGEN_CLIP {
            return Err(Error::NumericalDomain(format!(
                "{what} is not positive semidefinite (eigenvalue {v:e})"
            )));
        }
        vals.push(v.max(0.0));
    }
    Ok((vals, evd.U().to_owned()))
}

fn to_mat(dim: usize, data: &[f64]) -> Mat<f64> {
    Mat::from_fn(dim, dim, |i, j| 0.5 * (data[i * dim + j] + data[j * dim + i]))
}

/// `‖m_a − m_b‖² + Tr[C_a + C_b − 2 (C_a C_b)^{1/2}]`.
///
/// The trace of the square root is computed as `Tr (S C_b S)^{1/2}` with
/// `S = C_a^{1/2}`, which only needs symmetric eigendecompositions.
pub fn frechet_distance(a: &FrechetStats, b: &FrechetStats) -> Result<f64> {
    let dim = a.dim();
    if b.dim() != dim || a.cov.len() != dim * dim || b.cov.len() != dim * dim {
        return Err(Error::Argument(format!(
            "Fréchet stats dimensions differ ({} vs {})",
            a.dim(),
            b.dim()
        )));
    }
    let ca = to_mat(dim, &a.cov);
    let cb = to_mat(dim, &b.cov);
    let (va, ua) = psd_eigen(&ca, "covariance A")?;
    psd_eigen(&cb, "covariance B")?;
    let sqrt_a = Mat::from_fn(dim, dim, |i, j| {
        (0..dim).map(|k| ua[(i, k)] * va[k].sqrt() * ua[(j, k)]).sum::<f64>()
    });
    let inner = &sqrt_a * &cb * &sqrt_a;
    let inner = Mat::from_fn(dim, dim, |i, j| 0.5 * (inner[(i, j)] + inner[(j, i)]));
    let (vi, _) = psd_eigen(&inner, "C_a^1/2 C_b C_a^1/2")?;
    let tr_sqrt: f64 = vi.iter().map(|v| v.sqrt()).sum();
    let mean_sq: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let tr: f64 = (0..dim).map(|i| a.cov[i * dim + i] + b.cov[i * dim + i]).sum();
    Ok((mean_sq + tr - 2.0 * tr_sqrt).max(0.0))
}

/// Bootstrap replicates of several Fréchet distances at once.
///
/// Every replicate resamples each set in `sets` with replacement once, then
/// evaluates all `pairs` of set indices on the resampled sets, so distances
/// that share a set stay correlated across replicates. Returns one row per
/// replicate.
pub fn bootstrap_distances(
    sets: &[&[DescriptorVector]],
    pairs: &[(usize, usize)],
    n_boot: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_boot);
    for _ in 0..n_boot {
        let stats: Vec<FrechetStats> = sets
            .iter()
            .map(|set| {
                let sample: Vec<DescriptorVector> =
                    (0..set.len()).map(|_| set[rng.gen_range(0..set.len())]).collect();
                stats_of(&sample)
            })
            .collect::<Result<_>>()?;
        out.push(
            pairs
                .iter()
                .map(|&(i, j)| frechet_distance(&stats[i], &stats[j]))
                .collect::<Result<_>>()?,
        );
    }
    Ok(out)
}

/// Sample standard deviation.
pub fn std_dev(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if values.len() < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Percentage histogram of several sources over shared bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramTable {
    /// `n_bins + 1` increasing bin edges.
    pub edges: Vec<f64>,
    /// Percentage of each source's values per bin.
    pub percentages: BTreeMap<String, Vec<f64>>,
}

pub fn histogram_report(values_by_source: &BTreeMap<String, Vec<f64>>, n_bins: usize) -> Result<HistogramTable> {
    if n_bins == 0 {
        return Err(Error::Argument("histogram needs at least one bin".into()));
    }
    if values_by_source.is_empty() || values_by_source.values().any(Vec::is_empty) {
        return Err(Error::Argument("histogram sources must be non-empty".into()));
    }
    let all = values_by_source.values().flatten();
    let lo = all.clone().fold(f64::INFINITY, |m, &v| m.min(v));
    let hi = all.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let width = if hi > lo { (hi - lo) / n_bins as f64 } else { 1.0 };
    let edges: Vec<f64> = (0..=n_bins).map(|i| lo + i as f64 * width).collect();
    let percentages = values_by_source
        .iter()
        .map(|(name, values)| {
            let mut counts = vec![0usize; n_bins];
            for &v in values {
                let bin = (((v - lo) / width) as usize).min(n_bins - 1);
                counts[bin] += 1;
            }
            let pct = counts
                .iter()
                .map(|&c| 100.0 * c as f64 / values.len() as f64)
                .collect();
            (name.clone(), pct)
        })
        .collect();
    Ok(HistogramTable { edges, percentages })
}

impl HistogramTable {
    /// Overlap coefficient `Σ min(p_a, p_b)` in [0, 1].
    pub fn overlap(&self, a: &str, b: &str) -> Result<f64> {
        let get = |k: &str| {
            self.percentages
                .get(k)
                .ok_or_else(|| Error::Argument(format!("no histogram source `{k}`")))
        };
        let (pa, pb) = (get(a)?, get(b)?);
        Ok(pa.iter().zip(pb).map(|(x, y)| x.min(*y)).sum::<f64>() / 100.0)
    }

    /// One row per bin: `bin_lo, bin_hi, <source>...`.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["bin_lo".to_string(), "bin_hi".to_string()];
        header.extend(self.percentages.keys().cloned());
        w.write_record(&header)?;
        for i in 0..self.edges.len() - 1 {
            let mut row = vec![self.edges[i].to_string(), self.edges[i + 1].to_string()];
            row.extend(self.percentages.values().map(|p| p[i].to_string()));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<histogram>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        crate::pattern::write_atomic(path, &buf)
    }
}
