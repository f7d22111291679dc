//! Dataset assembly: pattern pools, real/synthetic mixes, cached batch
//! simulation, rotation augmentation and k-fold splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fea::{self, FidelityProfile, SimRecord};
use crate::pattern::{
    load_pattern, read_pbm_stream, save_pattern, write_atomic, Pattern, PatternMeta, PatternSource,
};
use crate::synth::{bernoulli_pattern, procedural_pattern, BernoulliConfig, ProceduralConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Argument(format!("unknown split `{other}`"))),
        }
    }
}

/// A pattern with a stable identifier.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub id: String,
    pub pattern: Pattern,
}

/// One manifest row. `rotation` is in degrees counter-clockwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub pattern_id: String,
    pub file_path: String,
    pub source: PatternSource,
    pub rotation: u16,
    pub fidelity: String,
    pub split: Split,
    pub delta_psi: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<DatasetEntry>,
    pub provenance: Provenance,
}

impl DatasetManifest {
    /// Checks id/rotation uniqueness, that rotations share their base
    /// entry's split, and that the test split is real-only.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        let mut split_of: BTreeMap<&str, Split> = BTreeMap::new();
        for e in &self.entries {
            if ![0, 90, 180, 270].contains(&e.rotation) {
                return Err(Error::Argument(format!("rotation {} of `{}`", e.rotation, e.pattern_id)));
            }
            if !seen.insert((e.pattern_id.as_str(), e.rotation)) {
                return Err(Error::Argument(format!(
                    "duplicate entry `{}` at {}°",
                    e.pattern_id, e.rotation
                )));
            }
            if let Some(&s) = split_of.get(e.pattern_id.as_str()) {
                if s != e.split {
                    return Err(Error::Leakage(format!(
                        "rotations of `{}` are in both {s} and {}",
                        e.pattern_id, e.split
                    )));
                }
            } else {
                split_of.insert(&e.pattern_id, e.split);
            }
            if e.split == Split::Test && !e.source.is_real() {
                return Err(Error::Argument(format!(
                    "test entry `{}` has synthetic source {}",
                    e.pattern_id, e.source
                )));
            }
        }
        Ok(())
    }

    /// Base pattern ids in order of first appearance.
    pub fn unique_ids(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.entries
            .iter()
            .filter(|e| seen.insert(e.pattern_id.clone()))
            .map(|e| e.pattern_id.clone())
            .collect()
    }

    pub fn with_split(&self, split: Split) -> DatasetManifest {
        DatasetManifest {
            entries: self.entries.iter().filter(|e| e.split == split).cloned().collect(),
            provenance: self.provenance.clone(),
        }
    }

    pub fn labels(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.delta_psi).collect()
    }

    pub fn extend(&mut self, other: DatasetManifest) {
        self.entries.extend(other.entries);
        self.provenance.seeds.extend(other.provenance.seeds);
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if self.entries.is_empty() {
            w.write_record(["pattern_id", "file_path", "source", "rotation", "fidelity", "split", "delta_psi"])?;
        }
        for e in &self.entries {
            w.serialize(e)?;
        }
        w.into_inner().map_err(|e| Error::io("<manifest>", e.into_error()))
    }

    /// SHA-256 of the CSV form.
    pub fn content_hash(&self) -> Result<String> {
        Ok(crate::sha256_hex(&self.to_csv_bytes()?))
    }

    /// Writes `<path>` as CSV and `<path>.json` with the provenance.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_csv_bytes()?)?;
        write_atomic(
            &crate::pattern::sidecar_path(path),
            &serde_json::to_vec_pretty(&self.provenance)?,
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Format {
                kind: "manifest",
                path: path.to_path_buf(),
                reason: format!("{other:?}"),
            },
        })?;
        let entries = r
            .deserialize()
            .map(|row| {
                row.map_err(|e| Error::Format {
                    kind: "manifest",
                    path: path.to_path_buf(),
                    reason: e.to_string(),
                })
            })
            .collect::<Result<Vec<DatasetEntry>>>()?;
        let side = crate::pattern::sidecar_path(path);
        let provenance = if side.exists() {
            let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
            serde_json::from_str(&text)?
        } else {
            Provenance::default()
        };
        let m = DatasetManifest { entries, provenance };
        m.validate()?;
        Ok(m)
    }

    /// Loads each entry's bitmap (rotated as recorded) with its label.
    /// Relative file paths resolve against `base`.
    pub fn load_samples(&self, base: &Path) -> Result<Vec<(Pattern, f64)>> {
        let mut cache: BTreeMap<&str, Pattern> = BTreeMap::new();
        let mut out = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            if !cache.contains_key(e.file_path.as_str()) {
                cache.insert(&e.file_path, load_pattern(&base.join(&e.file_path))?);
            }
            let p = &cache[e.file_path.as_str()];
            out.push((rotate_pattern(p, (e.rotation / 90) as u8), e.delta_psi));
        }
        Ok(out)
    }
}

/// Exact lattice rotation by `quarter_turns × 90°` counter-clockwise.
pub fn rotate_pattern(pattern: &Pattern, quarter_turns: u8) -> Pattern {
    pattern.rotated(quarter_turns)
}

/// Partitions unique ids round-robin into `k` folds; returns `(train, val)`
/// per fold with every rotation following its base id.
pub fn kfold_split(manifest: &DatasetManifest, k: usize) -> Result<Vec<(DatasetManifest, DatasetManifest)>> {
    let ids = manifest.unique_ids();
    if k < 2 {
        return Err(Error::Argument(format!("k = {k} must be at least 2")));
    }
    if k > ids.len() {
        return Err(Error::Argument(format!("k = {k} exceeds {} unique ids", ids.len())));
    }
    let fold_of: BTreeMap<&str, usize> = ids.iter().enumerate().map(|(i, id)| (id.as_str(), i % k)).collect();
    Ok((0..k)
        .map(|f| {
            let (val, train): (Vec<_>, Vec<_>) = manifest
                .entries
                .iter()
                .cloned()
                .partition(|e| fold_of[e.pattern_id.as_str()] == f);
            let wrap = |entries| DatasetManifest {
                entries,
                provenance: manifest.provenance.clone(),
            };
            (wrap(train), wrap(val))
        })
        .collect())
}

/// How many real and synthetic patterns to combine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixSpec {
    pub n_real: usize,
    pub n_synth: usize,
    pub synth_source: PatternSource,
    pub rotations_enabled: bool,
}

impl MixSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_real + self.n_synth == 0 {
            return Err(Error::config("mix", "n_real + n_synth must be positive"));
        }
        Ok(())
    }
}

/// Content-addressed store of simulation results.
pub struct SimCache {
    dir: PathBuf,
    store_displacement: bool,
    solves: AtomicUsize,
    hits: AtomicUsize,
}

impl SimCache {
    pub fn new(dir: impl Into<PathBuf>, store_displacement: bool) -> Self {
        Self {
            dir: dir.into(),
            store_displacement,
            solves: AtomicUsize::new(0),
            hits: AtomicUsize::new(0),
        }
    }

    pub fn key(pattern: &Pattern, profile: &FidelityProfile) -> String {
        crate::sha256_hex(format!("{}:{}", pattern.content_hash(), profile.hash()).as_bytes())
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2]).join(format!("{key}.json"))
    }

    pub fn displacement_path(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2]).join(format!("{key}.disp"))
    }

    pub fn get(&self, key: &str) -> Result<Option<SimRecord>> {
        let path = self.path(key);
        match std::fs::read(&path) {
            Ok(bytes) => Ok(Some(serde_json::from_slice(&bytes).map_err(|e| Error::Format {
                kind: "cache",
                path: path.clone(),
                reason: e.to_string(),
            })?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    pub fn put(&self, key: &str, record: &SimRecord) -> Result<()> {
        if self.store_displacement && !record.displacement_field.is_empty() {
            fea::write_displacement(&self.displacement_path(key), &record.displacement_field)?;
        }
        write_atomic(&self.path(key), &serde_json::to_vec(record)?)
    }

    /// Number of simulations run through this cache handle.
    pub fn solves(&self) -> usize {
        self.solves.load(Ordering::Relaxed)
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }
}

/// Simulates `items` on a pool of `jobs` worker threads; results come back
/// in input order whatever the completion order.
pub fn simulate_batch(
    items: &[(String, Pattern)],
    profile: &FidelityProfile,
    cache: Option<&SimCache>,
    jobs: usize,
) -> Result<Vec<SimRecord>> {
    profile.validate()?;
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<SimRecord>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    let work = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        if i >= items.len() {
            break;
        }
        let (id, pattern) = &items[i];
        let out = simulate_one(id, pattern, profile, cache);
        let failed = out.is_err();
        results.lock().expect("result lock")[i] = Some(out);
        if failed {
            // stop handing out work; already running solves finish
            next.store(items.len(), Ordering::Relaxed);
        }
    };
    let jobs = jobs.max(1).min(items.len().max(1));
    if jobs == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(work);
            }
        });
    }
    let mut out = Vec::with_capacity(items.len());
    for (i, r) in results.into_inner().expect("result lock").into_iter().enumerate() {
        match r {
            Some(r) => out.push(r?),
            None => {
                return Err(Error::Argument(format!(
                    "simulation of `{}` was skipped after an earlier failure",
                    items[i].0
                )))
            }
        }
    }
    Ok(out)
}

fn simulate_one(id: &str, pattern: &Pattern, profile: &FidelityProfile, cache: Option<&SimCache>) -> Result<SimRecord> {
    let key = SimCache::key(pattern, profile);
    if let Some(c) = cache {
        if let Some(mut rec) = c.get(&key)? {
            c.hits.fetch_add(1, Ordering::Relaxed);
            rec.pattern_id = id.to_string();
            return Ok(rec);
        }
    }
    let rec = fea::simulate_pattern(pattern, profile, id)?;
    log::debug!("simulated {id} ({:.2}s)", rec.wall_time_s);
    if let Some(c) = cache {
        c.solves.fetch_add(1, Ordering::Relaxed);
        c.put(&key, &rec)?;
    }
    Ok(rec)
}

/// `n` entries of `pool` chosen by a seeded shuffle.
pub fn select<'a>(pool: &'a [PoolEntry], n: usize, seed: u64, what: &str) -> Result<Vec<&'a PoolEntry>> {
    if n > pool.len() {
        return Err(Error::Capacity {
            what: what.to_string(),
            requested: n,
            available: pool.len(),
        });
    }
    let mut idx: Vec<usize> = (0..pool.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(idx[..n].iter().map(|&i| &pool[i]).collect())
}

/// Where and how a dataset is materialized.
pub struct BuildContext<'a> {
    /// Pattern bitmaps are written to `<root>/patterns/<id>.pbm`.
    pub root: PathBuf,
    pub cache: Option<&'a SimCache>,
    pub jobs: usize,
    pub config_hash: String,
}

impl BuildContext<'_> {
    fn pattern_file(&self, id: &str) -> String {
        format!("patterns/{id}.pbm")
    }
}

/// Simulates `patterns` at `fidelity` and returns manifest rows tagged
/// `split`, with the three extra rotations added when `rotations` is set.
pub fn simulate_entries(
    patterns: &[&PoolEntry],
    fidelity: &FidelityProfile,
    split: Split,
    rotations: bool,
    ctx: &BuildContext<'_>,
) -> Result<Vec<DatasetEntry>> {
    let items: Vec<(String, Pattern)> = patterns.iter().map(|p| (p.id.clone(), p.pattern.clone())).collect();
    let records = simulate_batch(&items, fidelity, ctx.cache, ctx.jobs)?;
    let mut entries = Vec::new();
    for (p, rec) in patterns.iter().zip(&records) {
        let file_path = ctx.pattern_file(&p.id);
        let full = ctx.root.join(&file_path);
        if !full.exists() {
            save_pattern(&p.pattern, &full)?;
        }
        let turns: &[u16] = if rotations { &[0, 90, 180, 270] } else { &[0] };
        for &rotation in turns {
            entries.push(DatasetEntry {
                pattern_id: p.id.clone(),
                file_path: file_path.clone(),
                source: p.pattern.meta.source,
                rotation,
                fidelity: fidelity.name.clone(),
                split,
                delta_psi: rec.label(),
            });
        }
    }
    Ok(entries)
}

/// Draws `mix.n_real` patterns from `real_pool` and `mix.n_synth` from
/// `synth_pool`, simulates them (through the cache) and returns the manifest.
pub fn build_mixed_dataset(
    mix: &MixSpec,
    real_pool: &[PoolEntry],
    synth_pool: &[PoolEntry],
    fidelity: &FidelityProfile,
    split: Split,
    seed: u64,
    ctx: &BuildContext<'_>,
) -> Result<DatasetManifest> {
    mix.validate()?;
    if synth_pool.iter().any(|p| p.pattern.meta.source != mix.synth_source) {
        return Err(Error::config("synth_source", "synthetic pool contains other sources"));
    }
    if split == Split::Test && mix.n_synth > 0 {
        return Err(Error::config("n_synth", "test sets hold real patterns only"));
    }
    let mut chosen = select(real_pool, mix.n_real, seed, "real patterns")?;
    chosen.extend(select(synth_pool, mix.n_synth, seed ^ 0x5eed, "synthetic patterns")?);
    let rotations = mix.rotations_enabled && split == Split::Train;
    let entries = simulate_entries(&chosen, fidelity, split, rotations, ctx)?;
    let manifest = DatasetManifest {
        entries,
        provenance: Provenance {
            config_hash: ctx.config_hash.clone(),
            seeds: vec![seed],
        },
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Procedural patterns `proc-k<k>-<seed>` for seeds `seed0..seed0 + n`.
pub fn procedural_pool(n: usize, base_grid: usize, target_fraction: f64, seed0: u64) -> Result<Vec<PoolEntry>> {
    (0..n as u64)
        .map(|i| {
            let cfg = ProceduralConfig::new(base_grid, target_fraction, seed0 + i);
            Ok(PoolEntry {
                id: format!("proc-k{base_grid}-{}", seed0 + i),
                pattern: procedural_pattern(&cfg)?,
            })
        })
        .collect()
}

pub fn bernoulli_pool(n: usize, p: f64, seed0: u64) -> Result<Vec<PoolEntry>> {
    (0..n as u64)
        .map(|i| {
            Ok(PoolEntry {
                id: format!("bern-{}", seed0 + i),
                pattern: bernoulli_pattern(&BernoulliConfig { p, seed: seed0 + i })?,
            })
        })
        .collect()
}

const REFERENCE_PBM: &[u8] = include_bytes!("../data/reference.pbm");
const REFERENCE_CSV: &str = include_str!("../data/reference.csv");

/// Provenance of one bundled reference pattern.
#[derive(Debug, Clone, PartialEq, Deserialize)]
struct ReferenceRow {
    pattern_id: String,
    seed: u64,
    c0: f64,
    #[allow(dead_code)]
    init_grid: usize,
    snapshot_step: usize,
}

/// The bundled Cahn-Hilliard reference patterns (ids `ch-00000`…).
pub fn reference_patterns() -> Result<Vec<PoolEntry>> {
    let path = Path::new("<bundled reference.pbm>");
    let meta = PatternMeta::new(PatternSource::CahnHilliard, 0);
    let patterns = read_pbm_stream(REFERENCE_PBM, path, &meta)?;
    let rows: Vec<ReferenceRow> = csv::Reader::from_reader(REFERENCE_CSV.as_bytes())
        .deserialize()
        .collect::<std::result::Result<_, _>>()?;
    if rows.len() != patterns.len() {
        return Err(Error::Format {
            kind: "reference",
            path: path.to_path_buf(),
            reason: format!("{} bitmaps but {} metadata rows", patterns.len(), rows.len()),
        });
    }
    Ok(patterns
        .into_iter()
        .zip(rows)
        .map(|(mut pattern, row)| {
            pattern.meta.seed = row.seed;
            pattern.meta.c0 = Some(row.c0);
            pattern.meta.snapshot_step = Some(row.snapshot_step);
            PoolEntry {
                id: row.pattern_id,
                pattern,
            }
        })
        .collect())
}
