//! Non-learned pattern generators: spatially correlated "procedural"
//! patterns and uncorrelated Bernoulli patterns.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pattern::{Pattern, PatternMeta, PatternSource, CELLS, SIDE};

/// Stiff-cell probability that preserves the light-to-dark ratio of the
/// original reference dataset.
pub const REFERENCE_BERNOULLI_P: f64 = 0.6594;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProceduralConfig {
    /// Cells per side of the random base grid.
    pub base_grid: usize,
    pub target_fraction: f64,
    /// Degree of the interpolating polynomial used for upsampling.
    #[serde(default = "default_interp_order")]
    pub interp_order: usize,
    pub seed: u64,
}

fn default_interp_order() -> usize {
    3
}

impl ProceduralConfig {
    pub fn new(base_grid: usize, target_fraction: f64, seed: u64) -> Self {
        Self {
            base_grid,
            target_fraction,
            interp_order: default_interp_order(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_grid == 0 || SIDE % self.base_grid != 0 {
            return Err(Error::config(
                "base_grid",
                format!("{} does not divide {SIDE}", self.base_grid),
            ));
        }
        if !(self.target_fraction > 0.0 && self.target_fraction < 1.0) {
            return Err(Error::config(
                "target_fraction",
                format!("{} is not in (0, 1)", self.target_fraction),
            ));
        }
        if self.interp_order == 0 {
            return Err(Error::config("interp_order", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BernoulliConfig {
    pub p: f64,
    pub seed: u64,
}

impl BernoulliConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::config("p", format!("{} is not in [0, 1]", self.p)));
        }
        Ok(())
    }
}

/// Lagrange weights of degree `order` for evaluating a periodic sequence at
/// fractional position `x`. Returns `(first_index, weights)`; the stencil is
/// centred on `x` so integer positions reproduce the samples exactly.
fn lagrange_stencil(x: f64, order: usize) -> (i64, Vec<f64>) {
    let first = if order % 2 == 1 {
        x.floor() as i64 - (order as i64 - 1) / 2
    } else {
        x.round() as i64 - order as i64 / 2
    };
    let nodes: Vec<f64> = (0..=order).map(|j| (first + j as i64) as f64).collect();
    let weights = (0..=order)
        .map(|j| {
            (0..=order)
                .filter(|&m| m != j)
                .map(|m| (x - nodes[m]) / (nodes[j] - nodes[m]))
                .product()
        })
        .collect();
    (first, weights)
}

/// Separable periodic upsampling of a `k × k` grid to 64×64.
///
/// Output pixel centres are mapped into base-grid coordinates, so shifting
/// the base grid by one cell shifts the output by `64/k` pixels.
pub fn upsample(base: &[f64], k: usize, order: usize) -> Vec<f64> {
    let scale = k as f64 / SIDE as f64;
    let stencils: Vec<(i64, Vec<f64>)> = (0..SIDE)
        .map(|o| lagrange_stencil((o as f64 + 0.5) * scale - 0.5, order))
        .collect();
    let wrap = |i: i64| i.rem_euclid(k as i64) as usize;
    // rows of the base grid first, then columns
    let mut wide = vec![0.0; k * SIDE];
    for r in 0..k {
        for (o, (first, w)) in stencils.iter().enumerate() {
            wide[r * SIDE + o] = w
                .iter()
                .enumerate()
                .map(|(j, wj)| wj * base[r * k + wrap(first + j as i64)])
                .sum();
        }
    }
    let mut out = vec![0.0; CELLS];
    for (o, (first, w)) in stencils.iter().enumerate() {
        for c in 0..SIDE {
            out[o * SIDE + c] = w
                .iter()
                .enumerate()
                .map(|(j, wj)| wj * wide[wrap(first + j as i64) * SIDE + c])
                .sum();
        }
    }
    out
}

/// Marks the `round(fraction · 4096)` brightest cells as stiff; ties are
/// broken towards the lower cell index.
fn quantile_threshold(values: &[f64], fraction: f64) -> Vec<u8> {
    let n_stiff = (fraction * values.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    let mut cells = vec![0u8; values.len()];
    for &i in &order[..n_stiff] {
        cells[i] = 1;
    }
    cells
}

pub fn procedural_pattern(config: &ProceduralConfig) -> Result<Pattern> {
    config.validate()?;
    let k = config.base_grid;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let base: Vec<f64> = (0..k * k).map(|_| rng.gen::<f64>()).collect();
    let gray = upsample(&base, k, config.interp_order);
    let cells = quantile_threshold(&gray, config.target_fraction);
    Pattern::from_cells(cells, PatternMeta::new(PatternSource::Procedural, config.seed))
}

pub fn bernoulli_pattern(config: &BernoulliConfig) -> Result<Pattern> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let cells = (0..CELLS).map(|_| (rng.gen::<f64>() < config.p) as u8).collect();
    Pattern::from_cells(cells, PatternMeta::new(PatternSource::Bernoulli, config.seed))
}

/// Mean stiff fraction over a reference set.
pub fn calibrate_fraction(reference: &[Pattern]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Argument("calibration needs at least one pattern".into()));
    }
    let stiff: usize = reference.iter().map(Pattern::count_stiff).sum();
    Ok(stiff as f64 / (reference.len() * CELLS) as f64)
}
