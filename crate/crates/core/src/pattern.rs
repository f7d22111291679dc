//! Binary 64×64 microstructure patterns and their on-disk formats.
//!
//! Cells are stored row-major with row 0 at the top of the image, matching
//! the PBM convention. A cell value of 1 marks the stiff phase.
//!
//! On disk a pattern is a raw (P4) PBM bitmap, optionally accompanied by a
//! JSON sidecar carrying its provenance. Several P4 images may be
//! concatenated in one file; [`read_pbm_stream`] reads them all back.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Side length of every pattern.
pub const SIDE: usize = 64;
/// Number of cells in a pattern.
pub const CELLS: usize = SIDE * SIDE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatternSource {
    CahnHilliard,
    Procedural,
    Bernoulli,
    WganCp,
    WganGp,
    External,
}

impl PatternSource {
    pub const ALL: [PatternSource; 6] = [
        PatternSource::CahnHilliard,
        PatternSource::Procedural,
        PatternSource::Bernoulli,
        PatternSource::WganCp,
        PatternSource::WganGp,
        PatternSource::External,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PatternSource::CahnHilliard => "cahn-hilliard",
            PatternSource::Procedural => "procedural",
            PatternSource::Bernoulli => "bernoulli",
            PatternSource::WganCp => "wgan-cp",
            PatternSource::WganGp => "wgan-gp",
            PatternSource::External => "external",
        }
    }

    /// Real patterns come from the physics simulation; everything else is synthetic.
    pub fn is_real(self) -> bool {
        self == PatternSource::CahnHilliard
    }
}

impl fmt::Display for PatternSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PatternSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PatternSource::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown pattern source `{s}`")))
    }
}

/// Provenance carried alongside a pattern; serialized as the JSON sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternMeta {
    pub source: PatternSource,
    pub seed: u64,
    pub c0: Option<f64>,
    pub snapshot_step: Option<usize>,
}

impl PatternMeta {
    pub fn new(source: PatternSource, seed: u64) -> Self {
        Self {
            source,
            seed,
            c0: None,
            snapshot_step: None,
        }
    }
}

#[derive(Clone, PartialEq)]
pub struct Pattern {
    cells: Vec<u8>,
    pub meta: PatternMeta,
}

impl fmt::Debug for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Pattern")
            .field("meta", &self.meta)
            .field("stiff_cells", &self.count_stiff())
            .finish()
    }
}

impl Pattern {
    /// Builds a pattern from 4096 row-major cell values, each 0 or 1.
    pub fn from_cells(cells: Vec<u8>, meta: PatternMeta) -> Result<Self> {
        if cells.len() != CELLS {
            return Err(Error::Argument(format!(
                "pattern needs {CELLS} cells, got {}",
                cells.len()
            )));
        }
        if let Some(bad) = cells.iter().find(|&&v| v > 1) {
            return Err(Error::Argument(format!("pattern cell value {bad} is not binary")));
        }
        Ok(Self { cells, meta })
    }

    pub fn from_fn(meta: PatternMeta, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut cells = Vec::with_capacity(CELLS);
        for row in 0..SIDE {
            for col in 0..SIDE {
                cells.push(f(row, col) as u8);
            }
        }
        Self { cells, meta }
    }

    pub fn filled(value: bool, meta: PatternMeta) -> Self {
        Self {
            cells: vec![value as u8; CELLS],
            meta,
        }
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.cells[row * SIDE + col] == 1
    }

    pub fn count_stiff(&self) -> usize {
        self.cells.iter().map(|&v| v as usize).sum()
    }

    pub fn stiff_fraction(&self) -> f64 {
        self.count_stiff() as f64 / CELLS as f64
    }

    /// Rotates the bitmap counter-clockwise by `quarter_turns` × 90°.
    pub fn rotated(&self, quarter_turns: u8) -> Pattern {
        let mut out = self.clone();
        for _ in 0..(quarter_turns % 4) {
            let src = out.cells.clone();
            for row in 0..SIDE {
                for col in 0..SIDE {
                    out.cells[row * SIDE + col] = src[col * SIDE + (SIDE - 1 - row)];
                }
            }
        }
        out
    }

    /// SHA-256 over the cell values only; provenance does not affect it.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(b"pattern64:");
        h.update(&self.cells);
        hex::encode(h.finalize())
    }

    /// Cells as 0.0/1.0 values, row-major.
    pub fn to_f64(&self) -> Vec<f64> {
        self.cells.iter().map(|&v| v as f64).collect()
    }

    pub fn to_pbm(&self) -> Vec<u8> {
        let mut out = format!("P4\n{SIDE} {SIDE}\n").into_bytes();
        let row_bytes = SIDE.div_ceil(8);
        for row in 0..SIDE {
            for b in 0..row_bytes {
                let mut byte = 0u8;
                for bit in 0..8 {
                    let col = b * 8 + bit;
                    if col < SIDE && self.get(row, col) {
                        byte |= 0x80 >> bit;
                    }
                }
                out.push(byte);
            }
        }
        out
    }
}

/// Validates and decodes every P4 image in `bytes`. Each image must be 64×64.
pub fn read_pbm_stream(bytes: &[u8], path: &Path, meta: &PatternMeta) -> Result<Vec<Pattern>> {
    let fail = |reason: String| Error::Format {
        kind: "PBM",
        path: path.to_path_buf(),
        reason,
    };
    let mut pos = 0;
    let mut patterns = Vec::new();
    loop {
        skip_ws_and_comments(bytes, &mut pos);
        if pos >= bytes.len() {
            break;
        }
        if bytes.get(pos..pos + 2) != Some(b"P4") {
            return Err(fail(format!("expected P4 magic at byte {pos}")));
        }
        pos += 2;
        let width = read_header_int(bytes, &mut pos).ok_or_else(|| fail("bad width".into()))?;
        let height = read_header_int(bytes, &mut pos).ok_or_else(|| fail("bad height".into()))?;
        if width != SIDE || height != SIDE {
            return Err(fail(format!("expected {SIDE}x{SIDE}, found {width}x{height}")));
        }
        // exactly one whitespace byte separates the header from the raster
        match bytes.get(pos) {
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            _ => return Err(fail("missing raster separator".into())),
        }
        let row_bytes = SIDE.div_ceil(8);
        let raster = bytes
            .get(pos..pos + row_bytes * SIDE)
            .ok_or_else(|| fail("truncated raster".into()))?;
        pos += row_bytes * SIDE;
        let cells = (0..CELLS)
            .map(|i| {
                let (row, col) = (i / SIDE, i % SIDE);
                (raster[row * row_bytes + col / 8] >> (7 - col % 8)) & 1
            })
            .collect();
        patterns.push(Pattern {
            cells,
            meta: meta.clone(),
        });
    }
    Ok(patterns)
}

fn skip_ws_and_comments(bytes: &[u8], pos: &mut usize) {
    while *pos < bytes.len() {
        if bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        } else if bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
}

fn read_header_int(bytes: &[u8], pos: &mut usize) -> Option<usize> {
    skip_ws_and_comments(bytes, pos);
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos]).ok()?.parse().ok()
}

/// Reads a single-image PBM and its sidecar (`<file>.json`) when present.
pub fn load_pattern(path: &Path) -> Result<Pattern> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let sidecar = sidecar_path(path);
    let meta = if sidecar.exists() {
        let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        serde_json::from_str(&text)?
    } else {
        PatternMeta::new(PatternSource::External, 0)
    };
    let mut patterns = read_pbm_stream(&bytes, path, &meta)?;
    if patterns.len() != 1 {
        return Err(Error::Format {
            kind: "PBM",
            path: path.to_path_buf(),
            reason: format!("expected one image, found {}", patterns.len()),
        });
    }
    Ok(patterns.remove(0))
}

pub fn sidecar_path(pbm: &Path) -> PathBuf {
    let mut s = pbm.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes `<path>` (PBM) and `<path>.json` (sidecar) atomically.
pub fn save_pattern(pattern: &Pattern, path: &Path) -> Result<()> {
    write_atomic(path, &pattern.to_pbm())?;
    let json = serde_json::to_vec_pretty(&pattern.meta)?;
    write_atomic(&sidecar_path(path), &json)
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    static COUNTER: AtomicU64 = AtomicU64::new(0);
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(
        ".tmp{}-{}",
        std::process::id(),
        COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// One row of a pattern batch manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternRecord {
    pub pattern_id: String,
    pub file_path: String,
    pub source: PatternSource,
    pub seed: u64,
}

/// Saves `patterns` as `<dir>/<id>.pbm` plus sidecars and a `manifest.csv`.
/// Ids are `<prefix>-<index:05>`.
pub fn write_pattern_batch(dir: &Path, prefix: &str, patterns: &[Pattern]) -> Result<Vec<PatternRecord>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(patterns.len());
    for (i, p) in patterns.iter().enumerate() {
        let id = format!("{prefix}-{i:05}");
        let file = format!("{id}.pbm");
        save_pattern(p, &dir.join(&file))?;
        records.push(PatternRecord {
            pattern_id: id,
            file_path: file,
            source: p.meta.source,
            seed: p.meta.seed,
        });
    }
    write_pattern_manifest(&dir.join("manifest.csv"), &records)?;
    Ok(records)
}

pub fn write_pattern_manifest(path: &Path, records: &[PatternRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

pub fn read_pattern_manifest(path: &Path) -> Result<Vec<PatternRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Format {
            kind: "manifest",
            path: path.to_path_buf(),
            reason: format!("{other:?}"),
        },
    })?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Loads every pattern listed in a batch manifest, resolving file paths
/// relative to the manifest's directory. Returns `(pattern_id, file_path, pattern)`.
pub fn load_pattern_batch(manifest: &Path) -> Result<Vec<(String, PathBuf, Pattern)>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    read_pattern_manifest(manifest)?
        .into_iter()
        .map(|r| {
            let path = base.join(&r.file_path);
            let p = load_pattern(&path)?;
            Ok((r.pattern_id, path, p))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn meta() -> PatternMeta {
        PatternMeta::new(PatternSource::Procedural, 3)
    }

    fn asymmetric() -> Pattern {
        Pattern::from_fn(meta(), |r, c| (r < 10 && c < 40) || (r * 7 + c * 3) % 11 == 0)
    }

    #[test]
    fn rotation_has_period_four() {
        let p = asymmetric();
        assert_eq!(p.rotated(4).cells(), p.cells());
        assert_eq!(p.rotated(2).rotated(2).cells(), p.cells());
        assert_ne!(p.rotated(1).cells(), p.cells());
        assert_eq!(p.rotated(1).rotated(3).cells(), p.cells());
    }

    #[test]
    fn rotation_moves_top_left_to_bottom_left() {
        let p = Pattern::from_fn(meta(), |r, c| r == 0 && c == 0);
        let q = p.rotated(1);
        assert!(q.get(SIDE - 1, 0));
        assert_eq!(q.count_stiff(), 1);
    }

    #[test]
    fn pbm_header_and_size() {
        let bytes = asymmetric().to_pbm();
        assert!(bytes.starts_with(b"P4\n64 64\n"));
        assert_eq!(bytes.len(), 9 + 64 * 8);
    }

    #[test]
    fn pbm_rejects_wrong_dimensions() {
        let mut bytes = b"P4\n32 64\n".to_vec();
        bytes.extend(vec![0u8; 4 * 64]);
        let err = read_pbm_stream(&bytes, Path::new("x.pbm"), &meta()).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn pbm_rejects_truncation() {
        let mut bytes = asymmetric().to_pbm();
        bytes.truncate(100);
        assert!(read_pbm_stream(&bytes, Path::new("x.pbm"), &meta()).is_err());
    }

    #[test]
    fn pbm_stream_reads_concatenated_images_and_comments() {
        let a = asymmetric();
        let b = a.rotated(1);
        let mut bytes = b"# leading comment\n".to_vec();
        bytes.extend(a.to_pbm());
        bytes.extend(b.to_pbm());
        let got = read_pbm_stream(&bytes, Path::new("x.pbm"), &meta()).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].cells(), a.cells());
        assert_eq!(got[1].cells(), b.cells());
    }

    #[test]
    fn from_cells_rejects_non_binary() {
        let mut cells = vec![0u8; CELLS];
        cells[5] = 2;
        assert!(Pattern::from_cells(cells, meta()).is_err());
        assert!(Pattern::from_cells(vec![0; 10], meta()).is_err());
    }

    #[test]
    fn batch_roundtrip_through_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let pats = vec![asymmetric(), Pattern::filled(true, meta())];
        let recs = write_pattern_batch(dir.path(), "proc", &pats).unwrap();
        assert_eq!(recs[1].pattern_id, "proc-00001");
        let back = load_pattern_batch(&dir.path().join("manifest.csv")).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].2, pats[0]);
        assert_eq!(back[1].2.meta, pats[1].meta);
    }

    proptest! {
        #[test]
        fn pbm_roundtrip(bits in proptest::collection::vec(0u8..=1, CELLS)) {
            let p = Pattern::from_cells(bits, meta()).unwrap();
            let back = read_pbm_stream(&p.to_pbm(), Path::new("p.pbm"), &meta()).unwrap();
            prop_assert_eq!(back.len(), 1);
            prop_assert_eq!(back[0].cells(), p.cells());
        }
    }
}
