//! The staged desk-scale pipeline: reference pool, simulations, the
//! augmentation grid, the transfer grid and distribution metrics.
//!
//! Every simulation goes through the content-addressed [`SimCache`] and
//! every trained model is stored next to the hash of its inputs, so a rerun
//! of an unchanged configuration performs no solves and no epochs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::chx::{simulate_patterns, ChConfig};
use crate::dataset::{
    bernoulli_pool, build_mixed_dataset, procedural_pool, reference_patterns, select, simulate_entries,
    BuildContext, DatasetManifest, MixSpec, PoolEntry, Provenance, SimCache, Split,
};
use crate::error::{Error, Result};
use crate::fea::FidelityProfile;
use crate::metamodel::{evaluate, train, write_history_csv, ArchitectureSpec, Checkpoint, TrainConfig, TrainProvenance};
use crate::metrics::{bootstrap_distances, descriptor_stats, descriptors, frechet_distance, histogram_report, std_dev};
use crate::pattern::{load_pattern_batch, write_atomic, Pattern, PatternSource};
use crate::synth::calibrate_fraction;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReferenceSource {
    /// The 1000 patterns shipped with the library.
    Bundled,
    /// Fresh Cahn-Hilliard runs with seeds `ch.seed..ch.seed + runs`.
    Simulate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReferenceConfig {
    pub source: ReferenceSource,
    pub ch: ChConfig,
    pub runs: usize,
    pub threshold: f64,
}

impl Default for ReferenceConfig {
    fn default() -> Self {
        Self {
            source: ReferenceSource::Bundled,
            ch: ChConfig::default(),
            runs: 10,
            threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProceduralSection {
    pub base_grid: usize,
    /// Defaults to the mean stiff fraction of the reference pool.
    pub target_fraction: Option<f64>,
}

impl Default for ProceduralSection {
    fn default() -> Self {
        Self {
            base_grid: 8,
            target_fraction: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BernoulliSection {
    /// Defaults to the mean stiff fraction of the reference pool.
    pub p: Option<f64>,
}

/// Pre-generated patterns (for instance from a GAN) listed in a pattern
/// batch manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalSource {
    pub name: String,
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub n_real_train: usize,
    /// Real patterns held out for checkpoint selection.
    pub n_val: usize,
    pub n_test: usize,
    /// Synthetic patterns added per source and replicate.
    pub n_synth: usize,
    pub sources: Vec<PatternSource>,
    pub external: Vec<ExternalSource>,
    pub rotations: bool,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            n_real_train: 200,
            n_val: 50,
            n_test: 200,
            n_synth: 800,
            sources: vec![PatternSource::Procedural, PatternSource::Bernoulli],
            external: Vec::new(),
            rotations: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    pub enabled: bool,
    /// Synthetic low-fidelity patterns added to the real training set for
    /// pretraining.
    pub n_pretrain_synth: usize,
    pub synth_source: PatternSource,
    pub pretrain_rotations: bool,
    /// High-fidelity real patterns used for fine-tuning, taken from the
    /// start of the real training list.
    pub n_finetune: usize,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            n_pretrain_synth: 800,
            synth_source: PatternSource::Procedural,
            pretrain_rotations: true,
            n_finetune: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    /// Patterns per set in the Fréchet comparisons; the real pool is split
    /// into two disjoint sets of this size.
    pub n_frechet: usize,
    pub n_boot: usize,
    pub hist_bins: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            n_frechet: 500,
            n_boot: 50,
            hist_bins: 20,
        }
    }
}

/// Everything a run depends on. `out` and `jobs` do not enter the hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    /// One training replicate per entry. The seed drives the synthetic
    /// draws, the initialization and the batch order; real splits stay fixed.
    pub replicate_seeds: Vec<u64>,
    pub jobs: usize,
    pub out: PathBuf,
    pub store_displacement: bool,
    pub reference: ReferenceConfig,
    pub procedural: ProceduralSection,
    pub bernoulli: BernoulliSection,
    pub low: FidelityProfile,
    pub high: FidelityProfile,
    pub augmentation: AugmentationConfig,
    pub transfer: TransferConfig,
    pub arch: String,
    pub train: TrainConfig,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
    pub metrics: MetricsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "desk".into(),
            seed: 0,
            replicate_seeds: vec![0, 1, 2],
            jobs: 1,
            out: PathBuf::from("runs/desk"),
            store_displacement: false,
            reference: ReferenceConfig::default(),
            procedural: ProceduralSection::default(),
            bernoulli: BernoulliSection::default(),
            low: FidelityProfile::low(),
            high: FidelityProfile::high(),
            augmentation: AugmentationConfig::default(),
            transfer: TransferConfig::default(),
            arch: "desk3".into(),
            train: TrainConfig::default(),
            pretrain: TrainConfig {
                epochs: 50,
                lr_drop_epoch: 25,
                ..TrainConfig::default()
            },
            finetune: TrainConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config("experiment", e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config("experiment", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = Self::from_toml(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical (sorted-key) JSON of every field that can
    /// change a result.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = PathBuf::new();
        c.jobs = 0;
        let value = serde_json::to_value(&c).expect("config serializes");
        crate::sha256_hex(value.to_string().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicate_seeds.is_empty() {
            return Err(Error::config("replicate_seeds", "needs at least one seed"));
        }
        let mut seen = self.replicate_seeds.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.replicate_seeds.len() {
            return Err(Error::config("replicate_seeds", "seeds must be distinct"));
        }
        if self.reference.source == ReferenceSource::Simulate {
            self.reference.ch.validate()?;
            if self.reference.runs == 0 {
                return Err(Error::config("reference.runs", "must be positive"));
            }
        }
        if !(self.reference.threshold > 0.0 && self.reference.threshold < 1.0) {
            return Err(Error::config("reference.threshold", "must be in (0, 1)"));
        }
        if let Some(f) = self.procedural.target_fraction {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::config("procedural.target_fraction", "must be in (0, 1)"));
            }
        }
        if let Some(p) = self.bernoulli.p {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config("bernoulli.p", "must be in [0, 1]"));
            }
        }
        self.low.validate()?;
        self.high.validate()?;
        if self.low.name == self.high.name {
            return Err(Error::config("high.name", "fidelity names must differ"));
        }
        let a = &self.augmentation;
        if a.n_real_train == 0 || a.n_val == 0 || a.n_test < 2 {
            return Err(Error::config(
                "augmentation",
                "n_real_train and n_val must be positive and n_test at least 2",
            ));
        }
        for s in &a.sources {
            if !matches!(s, PatternSource::Procedural | PatternSource::Bernoulli) {
                return Err(Error::config(
                    "augmentation.sources",
                    format!("`{s}` cannot be generated here; list its patterns under `external`"),
                ));
            }
        }
        for e in &a.external {
            if e.name.is_empty() || e.name.contains(['/', ',']) {
                return Err(Error::config("augmentation.external.name", format!("bad name `{}`", e.name)));
            }
            if !e.manifest.is_file() {
                return Err(Error::config(
                    "augmentation.external.manifest",
                    format!("{} does not exist", e.manifest.display()),
                ));
            }
        }
        let t = &self.transfer;
        if t.enabled {
            if !matches!(t.synth_source, PatternSource::Procedural | PatternSource::Bernoulli) {
                return Err(Error::config("transfer.synth_source", "must be procedural or bernoulli"));
            }
            if t.n_finetune == 0 || t.n_finetune > a.n_real_train {
                return Err(Error::config(
                    "transfer.n_finetune",
                    format!("must be in 1..={}", a.n_real_train),
                ));
            }
        }
        ArchitectureSpec::by_name(&self.arch)?;
        self.train.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()?;
        let m = &self.metrics;
        if m.n_frechet <= crate::metrics::DESCRIPTOR_DIM || m.n_boot < 2 || m.hist_bins == 0 {
            return Err(Error::config(
                "metrics",
                "n_frechet must exceed the descriptor dimension, n_boot must be at least 2 and hist_bins positive",
            ));
        }
        Ok(())
    }

    fn arms(&self) -> Vec<String> {
        let mut arms = vec!["real".to_string()];
        arms.extend(self.augmentation.sources.iter().map(|s| format!("real+{s}")));
        arms.extend(self.augmentation.external.iter().map(|e| format!("real+{}", e.name)));
        arms
    }

    /// Human-readable stage DAG.
    pub fn plan(&self) -> String {
        let a = &self.augmentation;
        let reps = self.replicate_seeds.len();
        let n_sources = a.sources.len() + a.external.len();
        let mut s = String::new();
        let mut line = |name: &str, deps: &str, what: String| {
            let _ = writeln!(s, "{name:<18} <- {deps:<28} {what}");
        };
        line(
            "reference",
            "",
            match self.reference.source {
                ReferenceSource::Bundled => "bundled Cahn-Hilliard patterns".into(),
                ReferenceSource::Simulate => format!("{} Cahn-Hilliard runs", self.reference.runs),
            },
        );
        line(
            "split",
            "reference",
            format!("real test {} / train {} / val {}", a.n_test, a.n_real_train, a.n_val),
        );
        line(
            "synth-pools",
            "reference",
            format!("{} patterns x {} sources x {} replicates", a.n_synth, n_sources, reps),
        );
        line(
            "simulate-low",
            "split, synth-pools",
            format!(
                "{} ({} profile, cached)",
                a.n_test + a.n_real_train + a.n_val + a.n_synth * n_sources * reps,
                self.low.name
            ),
        );
        line(
            "augmentation",
            "simulate-low",
            format!("{} arms x {} replicates, arch {}", self.arms().len(), reps, self.arch),
        );
        if self.transfer.enabled {
            line(
                "simulate-high",
                "split",
                format!(
                    "{} ({} profile, cached)",
                    a.n_test + self.transfer.n_finetune + a.n_val,
                    self.high.name
                ),
            );
            line(
                "transfer",
                "simulate-low, simulate-high",
                format!("pretrain, fine-tune and scratch x {reps} replicates"),
            );
        }
        line(
            "metrics",
            "simulate-low",
            format!("Fréchet on {} per set, {} bootstrap draws", self.metrics.n_frechet, self.metrics.n_boot),
        );
        line("report", "augmentation, transfer, metrics", "report.json and CSV tables".into());
        s
    }
}

/// One augmentation-grid cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationRow {
    pub arm: String,
    pub seed: u64,
    pub n_real: usize,
    pub n_synth: usize,
    pub train_rows: usize,
    pub r2: f64,
    pub mae: f64,
    pub best_epoch: usize,
}

/// Median over replicates per arm; `gain` is relative to the real-only arm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub median_r2: f64,
    pub median_mae: f64,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub seed: u64,
    /// Pretrained model on the low-fidelity test set.
    pub pretrain_r2: f64,
    pub finetune_r2: f64,
    pub finetune_mae: f64,
    pub scratch_r2: f64,
    pub scratch_mae: f64,
    /// `1 − finetune_mae / scratch_mae`.
    pub mae_reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrechetRow {
    pub a: String,
    pub b: String,
    pub distance: f64,
    /// Bootstrap standard error.
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub name: String,
    pub version: String,
    pub config_hash: String,
    pub reference_patterns: usize,
    pub procedural_fraction: f64,
    pub bernoulli_p: f64,
    pub augmentation: Vec<AugmentationRow>,
    pub augmentation_summary: Vec<ArmSummary>,
    pub transfer: Vec<TransferRow>,
    pub median_mae_reduction: Option<f64>,
    pub frechet: Vec<FrechetRow>,
    /// Histogram overlap of each source's low-fidelity ΔΨ with the real one.
    pub histogram_overlap: BTreeMap<String, f64>,
    /// Manifest name to SHA-256 of its CSV.
    pub datasets: BTreeMap<String, String>,
}

impl MetricsReport {
    pub fn summary(&self, arm: &str) -> Option<&ArmSummary> {
        self.augmentation_summary.iter().find(|s| s.arm == arm)
    }

    pub fn frechet(&self, a: &str, b: &str) -> Option<&FrechetRow> {
        self.frechet.iter().find(|r| r.a == a && r.b == b)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Format {
            kind: "report",
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// What a run did besides producing the report.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunStats {
    pub simulations: usize,
    pub cache_hits: usize,
    pub models_trained: usize,
    pub models_reused: usize,
    pub epochs: usize,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// A deterministic seed block for `(global, replicate, salt)`, kept below
/// 2^48 so consecutive pattern seeds never wrap.
fn derived_seed(global: u64, replicate: u64, salt: &str) -> u64 {
    let h = crate::sha256_hex(format!("{global}:{replicate}:{salt}").as_bytes());
    u64::from_str_radix(&h[..12], 16).expect("hex prefix")
}

pub fn version_and_provenance(config: Option<&ExperimentConfig>) -> Result<String> {
    let mut s = format!("hetmech {}\n", env!("CARGO_PKG_VERSION"));
    if let Some(cfg) = config {
        let _ = writeln!(s, "config {}", cfg.hash());
        let report = cfg.out.join("report.json");
        if report.is_file() {
            let r = MetricsReport::load(&report)?;
            for (name, hash) in &r.datasets {
                let _ = writeln!(s, "dataset {name} {hash}");
            }
        }
    }
    Ok(s)
}

/// Prints nothing and writes nothing; returns the stage plan.
pub fn dry_run(config: &ExperimentConfig) -> Result<String> {
    config.validate()?;
    Ok(config.plan())
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<(MetricsReport, RunStats)> {
    config.validate()?;
    let mut runner = Runner::new(config)?;
    let report = runner.run()?;
    let stats = RunStats {
        simulations: runner.cache.solves(),
        cache_hits: runner.cache.hits(),
        ..runner.stats
    };
    Ok((report, stats))
}

struct Real {
    pool: Vec<PoolEntry>,
    test: Vec<PoolEntry>,
    train: Vec<PoolEntry>,
    val: Vec<PoolEntry>,
}

struct Runner<'a> {
    cfg: &'a ExperimentConfig,
    hash: String,
    out: PathBuf,
    cache: SimCache,
    stats: RunStats,
    datasets: BTreeMap<String, String>,
}

impl<'a> Runner<'a> {
    fn new(cfg: &'a ExperimentConfig) -> Result<Self> {
        let out = cfg.out.clone();
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        Ok(Self {
            cfg,
            hash: cfg.hash(),
            cache: SimCache::new(out.join("cache"), cfg.store_displacement),
            out,
            stats: RunStats::default(),
            datasets: BTreeMap::new(),
        })
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        log::info!("stage {name}");
        f(self).map_err(|e| Error::Stage {
            stage: name.to_string(),
            config_hash: self.hash.clone(),
            partial: self.out.clone(),
            source: Box::new(e),
        })
    }

    fn ctx(&self) -> BuildContext<'_> {
        BuildContext {
            root: self.out.join("data"),
            cache: Some(&self.cache),
            jobs: self.cfg.jobs.max(1),
            config_hash: self.hash.clone(),
        }
    }

    fn run(&mut self) -> Result<MetricsReport> {
        let cfg = self.cfg;
        write_atomic(&self.out.join("config.toml"), cfg.to_toml()?.as_bytes())?;
        let pool = self.stage("reference", |r| r.reference())?;
        let real = self.stage("split", |r| r.split(pool))?;
        let all_real: Vec<Pattern> = real.pool.iter().map(|p| p.pattern.clone()).collect();
        let mean_fraction = calibrate_fraction(&all_real)?;
        let fraction = cfg.procedural.target_fraction.unwrap_or(mean_fraction);
        let p = cfg.bernoulli.p.unwrap_or(mean_fraction);

        let synth = self.stage("synth-pools", |r| r.synth_pools(fraction, p))?;
        let (test_low, val_low, train_low) = self.stage("simulate-low", |r| {
            let low = &r.cfg.low;
            let test = r.real_manifest("test-low", &real.test, low, Split::Test)?;
            let val = r.real_manifest("val-low", &real.val, low, Split::Val)?;
            let train = r.real_manifest("train-real-low", &real.train, low, Split::Train)?;
            Ok((test, val, train))
        })?;
        let mut rows = Vec::new();
        let mut synth_labels: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for (i, &seed) in cfg.replicate_seeds.iter().enumerate() {
            let grid = self.stage("augmentation", |r| {
                r.augmentation_grid(seed, &real, &synth[i], &test_low, &val_low, &train_low)
            })?;
            for (source, labels) in grid.1 {
                if i == 0 {
                    synth_labels.insert(source, labels);
                }
            }
            rows.extend(grid.0);
        }
        let augmentation_summary = summarize(&cfg.arms(), &rows);

        let mut transfer = Vec::new();
        if cfg.transfer.enabled {
            let (test_high, val_high, ft_high) = self.stage("simulate-high", |r| {
                let high = &r.cfg.high;
                let test = r.real_manifest("test-high", &real.test, high, Split::Test)?;
                let val = r.real_manifest("val-high", &real.val, high, Split::Val)?;
                let ft = r.real_manifest(
                    "finetune-high",
                    &real.train[..r.cfg.transfer.n_finetune],
                    high,
                    Split::Train,
                )?;
                Ok((test, val, ft))
            })?;
            for (i, &seed) in cfg.replicate_seeds.iter().enumerate() {
                let row = self.stage("transfer", |r| {
                    r.transfer_row(seed, &real, &synth[i], [&test_low, &val_low], [&test_high, &val_high, &ft_high])
                })?;
                transfer.push(row);
            }
        }
        let median_mae_reduction =
            (!transfer.is_empty()).then(|| median(&transfer.iter().map(|t| t.mae_reduction).collect::<Vec<_>>()));

        let (frechet, histogram_overlap) = self.stage("metrics", |r| {
            let mut real_labels = test_low.labels();
            real_labels.extend(val_low.labels());
            real_labels.extend(train_low.labels());
            r.distribution_metrics(&real, fraction, p, real_labels, synth_labels)
        })?;

        let report = MetricsReport {
            name: cfg.name.clone(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: self.hash.clone(),
            reference_patterns: real.pool.len(),
            procedural_fraction: fraction,
            bernoulli_p: p,
            augmentation: rows,
            augmentation_summary,
            transfer,
            median_mae_reduction,
            frechet,
            histogram_overlap,
            datasets: self.datasets.clone(),
        };
        self.stage("report", |r| r.write_report(&report))?;
        Ok(report)
    }

    fn reference(&mut self) -> Result<Vec<PoolEntry>> {
        let rc = &self.cfg.reference;
        match rc.source {
            ReferenceSource::Bundled => reference_patterns(),
            ReferenceSource::Simulate => {
                let mut pool = Vec::new();
                for run in 0..rc.runs as u64 {
                    let ch = ChConfig {
                        seed: rc.ch.seed + run,
                        ..rc.ch.clone()
                    };
                    for p in simulate_patterns(&ch, rc.threshold)? {
                        let step = p.meta.snapshot_step.unwrap_or(0);
                        pool.push(PoolEntry {
                            id: format!("ch-r{}-t{step}", ch.seed),
                            pattern: p,
                        });
                    }
                }
                Ok(pool)
            }
        }
    }

    fn split(&mut self, pool: Vec<PoolEntry>) -> Result<Real> {
        let a = &self.cfg.augmentation;
        let n = a.n_test + a.n_real_train + a.n_val;
        let chosen: Vec<PoolEntry> = select(&pool, n, self.cfg.seed, "real patterns")?
            .into_iter()
            .cloned()
            .collect();
        let test = chosen[..a.n_test].to_vec();
        let train = chosen[a.n_test..a.n_test + a.n_real_train].to_vec();
        let val = chosen[a.n_test + a.n_real_train..].to_vec();
        Ok(Real { pool, test, train, val })
    }

    /// Per replicate: one pool per augmentation source, in arm order.
    fn synth_pools(&mut self, fraction: f64, p: f64) -> Result<Vec<Vec<(String, Vec<PoolEntry>)>>> {
        let cfg = self.cfg;
        let n = cfg.augmentation.n_synth;
        let external: Vec<(String, Vec<PoolEntry>)> = cfg
            .augmentation
            .external
            .iter()
            .map(|e| {
                let pool = load_pattern_batch(&e.manifest)?
                    .into_iter()
                    .map(|(id, _, pattern)| PoolEntry {
                        id: format!("{}-{id}", e.name),
                        pattern,
                    })
                    .collect();
                Ok((e.name.clone(), pool))
            })
            .collect::<Result<_>>()?;
        cfg.replicate_seeds
            .iter()
            .map(|&seed| {
                let mut pools = Vec::new();
                for &s in &cfg.augmentation.sources {
                    let seed0 = derived_seed(cfg.seed, seed, s.as_str());
                    let pool = match s {
                        PatternSource::Procedural => {
                            procedural_pool(n, cfg.procedural.base_grid, fraction, seed0)?
                        }
                        _ => bernoulli_pool(n, p, seed0)?,
                    };
                    pools.push((s.as_str().to_string(), pool));
                }
                for (name, pool) in &external {
                    let chosen = select(pool, n, derived_seed(cfg.seed, seed, name), name)?;
                    pools.push((name.clone(), chosen.into_iter().cloned().collect()));
                }
                Ok(pools)
            })
            .collect()
    }

    fn save_manifest(&mut self, name: &str, m: &DatasetManifest) -> Result<()> {
        m.validate()?;
        m.save(&self.out.join("data").join(format!("{name}.csv")))?;
        self.datasets.insert(name.to_string(), m.content_hash()?);
        Ok(())
    }

    fn real_manifest(
        &mut self,
        name: &str,
        patterns: &[PoolEntry],
        profile: &FidelityProfile,
        split: Split,
    ) -> Result<DatasetManifest> {
        let refs: Vec<&PoolEntry> = patterns.iter().collect();
        let entries = simulate_entries(&refs, profile, split, false, &self.ctx())?;
        let m = DatasetManifest {
            entries,
            provenance: Provenance {
                config_hash: self.hash.clone(),
                seeds: vec![self.cfg.seed],
            },
        };
        self.save_manifest(name, &m)?;
        Ok(m)
    }

    /// Real training rows plus `synth` at low fidelity.
    fn mixed_manifest(
        &mut self,
        name: &str,
        real: &[PoolEntry],
        synth: &[PoolEntry],
        source: PatternSource,
        rotations: bool,
        seed: u64,
    ) -> Result<DatasetManifest> {
        let mix = MixSpec {
            n_real: real.len(),
            n_synth: synth.len(),
            synth_source: source,
            rotations_enabled: rotations,
        };
        let low = self.cfg.low.clone();
        let m = build_mixed_dataset(&mix, real, synth, &low, Split::Train, seed, &self.ctx())?;
        self.save_manifest(name, &m)?;
        Ok(m)
    }

    /// Trains unless a checkpoint for exactly these inputs already exists.
    fn train_cached(
        &mut self,
        label: &str,
        train_m: &DatasetManifest,
        val_m: &DatasetManifest,
        config: &TrainConfig,
        init: Option<&Checkpoint>,
    ) -> Result<Checkpoint> {
        let arch = ArchitectureSpec::by_name(&self.cfg.arch)?;
        let init_hash = init.map(|c| c.to_bytes().map(|b| crate::sha256_hex(&b))).transpose()?;
        let key = crate::sha256_hex(
            serde_json::json!({
                "arch": arch,
                "train": train_m.content_hash()?,
                "val": val_m.content_hash()?,
                "config": config,
                "init": init_hash,
            })
            .to_string()
            .as_bytes(),
        );
        let dir = self.out.join("checkpoints");
        let path = dir.join(format!("{label}.ckpt"));
        let key_path = dir.join(format!("{label}.key"));
        if std::fs::read_to_string(&key_path).ok().as_deref() == Some(key.as_str()) {
            if let Ok(ck) = Checkpoint::load(&path) {
                self.stats.models_reused += 1;
                return Ok(ck);
            }
        }
        let base = self.out.join("data");
        let train_s = train_m.load_samples(&base)?;
        let val_s = val_m.load_samples(&base)?;
        let provenance = TrainProvenance {
            dataset_hash: train_m.content_hash()?,
            train_ids: train_m.unique_ids(),
            ..TrainProvenance::default()
        };
        log::info!("training {label} on {} rows", train_s.len());
        let (ck, history) = train(&arch, &train_s, &val_s, config, init, provenance)?;
        ck.save(&path)?;
        write_history_csv(&self.out.join("history").join(format!("{label}.csv")), &history)?;
        write_atomic(&key_path, key.as_bytes())?;
        self.stats.models_trained += 1;
        self.stats.epochs += history.len();
        Ok(ck)
    }

    #[allow(clippy::type_complexity)]
    fn augmentation_grid(
        &mut self,
        seed: u64,
        real: &Real,
        synth: &[(String, Vec<PoolEntry>)],
        test: &DatasetManifest,
        val: &DatasetManifest,
        train_real: &DatasetManifest,
    ) -> Result<(Vec<AugmentationRow>, Vec<(String, Vec<f64>)>)> {
        let cfg = self.cfg;
        let train_cfg = TrainConfig {
            seed,
            ..cfg.train.clone()
        };
        let base = self.out.join("data");
        let rotations = cfg.augmentation.rotations;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut arms: Vec<(String, DatasetManifest, usize)> = Vec::new();
        let baseline = if rotations {
            self.mixed_manifest(&format!("aug-real-s{seed}"), &real.train, &[], PatternSource::Procedural, true, seed)?
        } else {
            train_real.clone()
        };
        arms.push(("real".into(), baseline, 0));
        for (name, pool) in synth {
            let source = pool.first().map_or(PatternSource::External, |p| p.pattern.meta.source);
            let m = self.mixed_manifest(&format!("aug-{name}-s{seed}"), &real.train, pool, source, rotations, seed)?;
            labels.push((
                name.clone(),
                m.entries
                    .iter()
                    .filter(|e| !e.source.is_real() && e.rotation == 0)
                    .map(|e| e.delta_psi)
                    .collect(),
            ));
            arms.push((format!("real+{name}"), m, pool.len()));
        }
        for (arm, m, n_synth) in arms {
            let label = format!("aug-{}-s{seed}", arm.replace('+', "-"));
            let ck = self.train_cached(&label, &m, val, &train_cfg, None)?;
            let ev = evaluate(&ck, test, &base)?;
            rows.push(AugmentationRow {
                arm,
                seed,
                n_real: real.train.len(),
                n_synth,
                train_rows: m.entries.len(),
                r2: ev.r2,
                mae: ev.mae,
                best_epoch: ck.provenance.epoch,
            });
        }
        Ok((rows, labels))
    }

    fn transfer_row(
        &mut self,
        seed: u64,
        real: &Real,
        synth: &[(String, Vec<PoolEntry>)],
        [test_low, val_low]: [&DatasetManifest; 2],
        [test_high, val_high, ft_high]: [&DatasetManifest; 3],
    ) -> Result<TransferRow> {
        let cfg = self.cfg;
        let t = &cfg.transfer;
        let base = self.out.join("data");
        let source = t.synth_source;
        let seed0 = derived_seed(cfg.seed, seed, source.as_str());
        // reuse the augmentation pool when it has the same source
        let pool = match synth.iter().find(|(n, _)| n == source.as_str()) {
            Some((_, p)) if p.len() >= t.n_pretrain_synth => p[..t.n_pretrain_synth].to_vec(),
            _ => {
                let all: Vec<Pattern> = real.pool.iter().map(|p| p.pattern.clone()).collect();
                let mean = calibrate_fraction(&all)?;
                match source {
                    PatternSource::Procedural => procedural_pool(
                        t.n_pretrain_synth,
                        cfg.procedural.base_grid,
                        cfg.procedural.target_fraction.unwrap_or(mean),
                        seed0,
                    )?,
                    _ => bernoulli_pool(t.n_pretrain_synth, cfg.bernoulli.p.unwrap_or(mean), seed0)?,
                }
            }
        };
        let pre_m = self.mixed_manifest(
            &format!("pretrain-s{seed}"),
            &real.train,
            &pool,
            source,
            t.pretrain_rotations,
            seed,
        )?;
        let pre_cfg = TrainConfig {
            seed,
            ..cfg.pretrain.clone()
        };
        let pre = self.train_cached(&format!("pretrain-s{seed}"), &pre_m, val_low, &pre_cfg, None)?;
        let pre_ev = evaluate(&pre, test_low, &base)?;
        let ft_cfg = TrainConfig {
            seed,
            ..cfg.finetune.clone()
        };
        let ft = self.train_cached(&format!("finetune-s{seed}"), ft_high, val_high, &ft_cfg, Some(&pre))?;
        let ft_ev = evaluate(&ft, test_high, &base)?;
        let scratch = self.train_cached(&format!("scratch-s{seed}"), ft_high, val_high, &ft_cfg, None)?;
        let sc_ev = evaluate(&scratch, test_high, &base)?;
        Ok(TransferRow {
            seed,
            pretrain_r2: pre_ev.r2,
            finetune_r2: ft_ev.r2,
            finetune_mae: ft_ev.mae,
            scratch_r2: sc_ev.r2,
            scratch_mae: sc_ev.mae,
            mae_reduction: 1.0 - ft_ev.mae / sc_ev.mae,
        })
    }

    fn distribution_metrics(
        &mut self,
        real: &Real,
        fraction: f64,
        p: f64,
        real_labels: Vec<f64>,
        synth_labels: BTreeMap<String, Vec<f64>>,
    ) -> Result<(Vec<FrechetRow>, BTreeMap<String, f64>)> {
        let cfg = self.cfg;
        let m = &cfg.metrics;
        let n = m.n_frechet;
        let halves = select(&real.pool, 2 * n, derived_seed(cfg.seed, 0, "frechet-real"), "real patterns for Fréchet")?;
        let real_a: Vec<Pattern> = halves[..n].iter().map(|e| e.pattern.clone()).collect();
        let real_b: Vec<Pattern> = halves[n..].iter().map(|e| e.pattern.clone()).collect();
        let proc_: Vec<Pattern> = procedural_pool(n, cfg.procedural.base_grid, fraction, derived_seed(cfg.seed, 0, "frechet-procedural"))?
            .into_iter()
            .map(|e| e.pattern)
            .collect();
        let bern: Vec<Pattern> = bernoulli_pool(n, p, derived_seed(cfg.seed, 0, "frechet-bernoulli"))?
            .into_iter()
            .map(|e| e.pattern)
            .collect();
        let mut names = vec!["real-b", "procedural", "bernoulli"];
        let mut sets = vec![real_a, real_b, proc_, bern];
        let mut ext_names = Vec::new();
        for e in &cfg.augmentation.external {
            let pats: Vec<Pattern> = load_pattern_batch(&e.manifest)?.into_iter().map(|t| t.2).collect();
            if pats.len() > crate::metrics::DESCRIPTOR_DIM {
                ext_names.push(e.name.clone());
                sets.push(pats);
            }
        }
        names.extend(ext_names.iter().map(String::as_str));
        let desc: Vec<_> = sets.iter().map(|s| descriptors(s)).collect();
        let refs: Vec<&[_]> = desc.iter().map(Vec::as_slice).collect();
        let pairs: Vec<(usize, usize)> = (1..sets.len()).map(|j| (0, j)).collect();
        let boot = bootstrap_distances(&refs, &pairs, m.n_boot, derived_seed(cfg.seed, 0, "bootstrap"))?;
        let real_stats = descriptor_stats(&sets[0])?;
        let mut frechet = Vec::new();
        for (k, &(_, j)) in pairs.iter().enumerate() {
            let d = frechet_distance(&real_stats, &descriptor_stats(&sets[j])?)?;
            let se = std_dev(&boot.iter().map(|row| row[k]).collect::<Vec<_>>());
            frechet.push(FrechetRow {
                a: "real-a".into(),
                b: names[j - 1].to_string(),
                distance: d,
                se,
            });
        }
        let mut values = synth_labels;
        values.insert("real".into(), real_labels);
        let table = histogram_report(&values, m.hist_bins)?;
        table.save_csv(&self.out.join("histogram.csv"))?;
        let overlap = values
            .keys()
            .filter(|k| *k != "real")
            .map(|k| Ok((k.clone(), table.overlap("real", k)?)))
            .collect::<Result<_>>()?;
        Ok((frechet, overlap))
    }

    fn write_report(&mut self, report: &MetricsReport) -> Result<()> {
        write_atomic(&self.out.join("report.json"), &serde_json::to_vec_pretty(report)?)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &report.augmentation {
            w.serialize(r)?;
        }
        write_atomic(&self.out.join("augmentation.csv"), &finish(w)?)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &report.transfer {
            w.serialize(r)?;
        }
        write_atomic(&self.out.join("transfer.csv"), &finish(w)?)?;
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &report.frechet {
            w.serialize(r)?;
        }
        write_atomic(&self.out.join("frechet.csv"), &finish(w)?)
    }
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| Error::io("<table>", e.into_error()))
}

fn summarize(arms: &[String], rows: &[AugmentationRow]) -> Vec<ArmSummary> {
    let col = |arm: &str, f: fn(&AugmentationRow) -> f64| {
        median(&rows.iter().filter(|r| r.arm == arm).map(f).collect::<Vec<_>>())
    };
    let base = col("real", |r| r.r2);
    arms.iter()
        .map(|arm| {
            let r2 = col(arm, |r| r.r2);
            ArmSummary {
                arm: arm.clone(),
                median_r2: r2,
                median_mae: col(arm, |r| r.mae),
                gain: r2 - base,
            }
        })
        .collect()
}
