//! Regenerates the bundled Cahn-Hilliard reference patterns.
//!
//! `cargo run --release -p hetmech --example reference_set -- <out_dir> [runs]`
//! writes `reference.pbm` (all patterns concatenated) and `reference.csv`.

use std::io::Write;

use hetmech::chx::{simulate_patterns, ChConfig};

const C0: [f64; 3] = [0.5, 0.63, 0.75];
const INIT_GRID: [usize; 3] = [32, 64, 128];
/// Early snapshots keep fine features; later ones have coarsened.
const SNAPSHOTS: [usize; 10] = [20, 40, 70, 100, 150, 200, 300, 400, 550, 700];

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = std::path::PathBuf::from(args.next().unwrap_or_else(|| "crates/core/data".into()));
    let runs: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(100);
    std::fs::create_dir_all(&out)?;
    let mut pbm = Vec::new();
    let mut csv = csv::Writer::from_path(out.join("reference.csv"))?;
    csv.write_record(["pattern_id", "seed", "c0", "init_grid", "snapshot_step"])?;
    for run in 0..runs {
        let config = ChConfig {
            c0: C0[run % 3],
            init_grid: INIT_GRID[(run / 3) % 3],
            n_steps: SNAPSHOTS[SNAPSHOTS.len() - 1],
            snapshot_steps: SNAPSHOTS.to_vec(),
            seed: run as u64,
            ..ChConfig::default()
        };
        for p in simulate_patterns(&config, 0.5)? {
            let id = format!("ch-{:05}", pbm.len() / p.to_pbm().len());
            pbm.extend_from_slice(&p.to_pbm());
            csv.write_record([
                id,
                run.to_string(),
                config.c0.to_string(),
                config.init_grid.to_string(),
                p.meta.snapshot_step.unwrap_or(0).to_string(),
            ])?;
        }
        eprintln!("run {run} done");
    }
    csv.flush()?;
    std::fs::File::create(out.join("reference.pbm"))?.write_all(&pbm)?;
    Ok(())
}
