//! `hetmech`: phase-field patterns, hyperelastic simulation, surrogate
//! training and the desk-scale experiment grid from one binary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hetmech::chx::{simulate_patterns, ChConfig};
use hetmech::dataset::{
    bernoulli_pool, build_mixed_dataset, kfold_split, procedural_pool, reference_patterns, simulate_batch,
    BuildContext, DatasetManifest, MixSpec, PoolEntry, SimCache, Split,
};
use hetmech::experiment::{dry_run, run_experiment, version_and_provenance, ExperimentConfig, MetricsReport};
use hetmech::fea::{write_displacement, write_sim_csv, FidelityProfile};
use hetmech::metamodel::{evaluate, train, write_history_csv, ArchitectureSpec, Checkpoint, TrainConfig, TrainProvenance};
use hetmech::metrics::{bootstrap_distances, descriptor_stats, descriptors, frechet_distance, std_dev};
use hetmech::pattern::{load_pattern_batch, write_atomic, write_pattern_batch};
use hetmech::synth::calibrate_fraction;
use hetmech::{Error, Pattern, PatternSource, Result};

#[derive(Parser)]
#[command(name = "hetmech", version, about = "Heterogeneous microstructure workbench")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Base random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for batch simulation.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// TOML configuration for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Cahn-Hilliard phase-field runs.
    Chx {
        #[command(subcommand)]
        command: ChxCommand,
    },
    /// Synthetic pattern generators.
    Synth {
        #[command(subcommand)]
        command: SynthCommand,
    },
    /// Equibiaxial-extension simulations of a pattern batch.
    Simulate(SimulateArgs),
    /// Dataset assembly.
    Dataset {
        #[command(subcommand)]
        command: DatasetCommand,
    },
    /// Train a surrogate from scratch.
    Train(TrainArgs),
    /// Fine-tune a pretrained surrogate on new data.
    Transfer(TransferArgs),
    /// Score a surrogate on a test manifest.
    Evaluate(EvaluateArgs),
    /// Distribution metrics and reports.
    Metrics {
        #[command(subcommand)]
        command: MetricsCommand,
    },
    /// The staged experiment grid.
    Experiment {
        #[command(subcommand)]
        command: ExperimentCommand,
    },
    /// Version, and the config and dataset hashes when `--config` is given.
    Version,
}

#[derive(Subcommand)]
enum ChxCommand {
    /// Runs `--runs` simulations with consecutive seeds and writes every
    /// snapshot as a pattern.
    Run {
        #[arg(long, default_value_t = 1)]
        runs: u64,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
}

#[derive(Subcommand)]
enum SynthCommand {
    Procedural {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 8)]
        base_grid: usize,
        /// Stiff fraction; defaults to the bundled reference mean.
        #[arg(long)]
        fraction: Option<f64>,
    },
    Bernoulli {
        #[arg(long)]
        n: usize,
        /// Stiff probability; defaults to the bundled reference mean.
        #[arg(long)]
        p: Option<f64>,
    },
}

#[derive(Args)]
struct SimulateArgs {
    /// Pattern batch manifest (`pattern_id,file_path,source,seed`).
    #[arg(long)]
    manifest: PathBuf,
    /// `low`, `high`, or a TOML profile file.
    #[arg(long, default_value = "low")]
    fidelity: String,
    /// Also write `<out>/disp/<id>.disp`.
    #[arg(long)]
    displacement: bool,
}

#[derive(Subcommand)]
enum DatasetCommand {
    /// Mixes real and synthetic patterns, simulates them and writes a manifest.
    Build {
        /// Counts, for example `real=200,synth=800`.
        #[arg(long, default_value = "real=200,synth=0")]
        mix: String,
        #[arg(long, value_enum, default_value = "procedural")]
        source: GenSource,
        /// Pattern batch manifest for the real pool; default is the bundled set.
        #[arg(long)]
        real: Option<PathBuf>,
        /// Pattern batch manifest for the synthetic pool; default generates one.
        #[arg(long)]
        synth: Option<PathBuf>,
        #[arg(long, default_value = "low")]
        fidelity: String,
        #[arg(long)]
        rotations: bool,
        #[arg(long, default_value = "train")]
        split: String,
        /// Also write `fold-<i>-train.csv` / `fold-<i>-val.csv`.
        #[arg(long)]
        kfold: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum GenSource {
    Procedural,
    Bernoulli,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long, default_value = "desk3")]
    arch: String,
    #[arg(long)]
    epochs: Option<usize>,
    /// Test manifest to score after training.
    #[arg(long)]
    test: Option<PathBuf>,
}

#[derive(Args)]
struct TransferArgs {
    #[arg(long)]
    pretrained: PathBuf,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    test: PathBuf,
}

#[derive(Subcommand)]
enum MetricsCommand {
    /// Descriptor Fréchet distance between two pattern sets. `bundled`
    /// names the bundled reference set.
    Frechet {
        #[arg(long)]
        set_a: String,
        #[arg(long)]
        set_b: String,
        #[arg(long, default_value_t = 50)]
        n_boot: usize,
    },
    /// Summarizes an experiment directory.
    Report {
        #[arg(long)]
        experiment: PathBuf,
    },
}

#[derive(Subcommand)]
enum ExperimentCommand {
    Run {
        /// Validate and print the stage plan only.
        #[arg(long)]
        dry_run: bool,
    },
    /// Writes the default configuration as TOML.
    Init,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(if e.is_config_error() {
                2
            } else if e.is_solver_error() {
                3
            } else {
                1
            })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let c = cli.common;
    match cli.command {
        Command::Chx { command } => chx(&c, command),
        Command::Synth { command } => synth(&c, command),
        Command::Simulate(a) => simulate(&c, a),
        Command::Dataset { command } => dataset(&c, command),
        Command::Train(a) => train_cmd(&c, a, None),
        Command::Transfer(a) => {
            let init = Checkpoint::load(&a.pretrained)?;
            train_cmd(&c, a.train, Some(init))
        }
        Command::Evaluate(a) => {
            let model = Checkpoint::load(&a.model)?;
            let ev = evaluate(&model, &DatasetManifest::load(&a.test)?, &base_of(&a.test))?;
            println!("{}", serde_json::to_string_pretty(&ev)?);
            Ok(())
        }
        Command::Metrics { command } => metrics(&c, command),
        Command::Experiment { command } => experiment(&c, command),
        Command::Version => {
            let cfg = c.config.as_deref().map(ExperimentConfig::load).transpose()?;
            print!("{}", version_and_provenance(cfg.as_ref())?);
            Ok(())
        }
    }
}

fn out_dir(c: &Common) -> Result<PathBuf> {
    let out = c
        .out
        .clone()
        .ok_or_else(|| Error::Config {
            field: "--out".into(),
            reason: "this subcommand needs an output directory".into(),
        })?;
    std::fs::create_dir_all(&out).map_err(|e| Error::Io {
        path: out.clone(),
        source: e,
    })?;
    Ok(out)
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    toml::from_str(&text).map_err(|e| Error::Config {
        field: path.display().to_string(),
        reason: e.to_string(),
    })
}

fn base_of(manifest: &Path) -> PathBuf {
    manifest.parent().unwrap_or(Path::new(".")).to_path_buf()
}

fn profile(name: &str) -> Result<FidelityProfile> {
    if name.ends_with(".toml") {
        let p: FidelityProfile = read_toml(Path::new(name))?;
        p.validate()?;
        Ok(p)
    } else {
        FidelityProfile::by_name(name)
    }
}

fn reference_fraction() -> Result<f64> {
    let pats: Vec<Pattern> = reference_patterns()?.into_iter().map(|e| e.pattern).collect();
    calibrate_fraction(&pats)
}

fn pool_from(manifest: &Path) -> Result<Vec<PoolEntry>> {
    Ok(load_pattern_batch(manifest)?
        .into_iter()
        .map(|(id, _, pattern)| PoolEntry { id, pattern })
        .collect())
}

fn write_pool(out: &Path, pool: &[PoolEntry]) -> Result<()> {
    let pats: Vec<Pattern> = pool.iter().map(|e| e.pattern.clone()).collect();
    let prefix = pool.first().map_or("pattern", |e| e.pattern.meta.source.as_str());
    let records = write_pattern_batch(out, prefix, &pats)?;
    println!("wrote {} patterns to {}", records.len(), out.join("manifest.csv").display());
    Ok(())
}

fn chx(c: &Common, cmd: ChxCommand) -> Result<()> {
    let ChxCommand::Run { runs, threshold } = cmd;
    let mut cfg: ChConfig = match &c.config {
        Some(p) => read_toml(p)?,
        None => ChConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let out = out_dir(c)?;
    let mut pool = Vec::new();
    for r in 0..runs {
        let run_cfg = ChConfig {
            seed: cfg.seed + r,
            ..cfg.clone()
        };
        for pattern in simulate_patterns(&run_cfg, threshold)? {
            pool.push(PoolEntry {
                id: String::new(),
                pattern,
            });
        }
    }
    write_pool(&out, &pool)
}

fn synth(c: &Common, cmd: SynthCommand) -> Result<()> {
    let seed = c.seed.unwrap_or(0);
    let out = out_dir(c)?;
    let pool = match cmd {
        SynthCommand::Procedural { n, base_grid, fraction } => {
            let f = fraction.map_or_else(reference_fraction, Ok)?;
            procedural_pool(n, base_grid, f, seed)?
        }
        SynthCommand::Bernoulli { n, p } => {
            let p = p.map_or_else(reference_fraction, Ok)?;
            bernoulli_pool(n, p, seed)?
        }
    };
    write_pool(&out, &pool)
}

fn simulate(c: &Common, a: SimulateArgs) -> Result<()> {
    let prof = profile(&a.fidelity)?;
    let out = out_dir(c)?;
    let items: Vec<(String, Pattern)> = load_pattern_batch(&a.manifest)?
        .into_iter()
        .map(|(id, _, p)| (id, p))
        .collect();
    let cache = SimCache::new(out.join("cache"), false);
    let records = simulate_batch(&items, &prof, Some(&cache), c.jobs.unwrap_or(1))?;
    write_sim_csv(&out.join(format!("sims-{}.csv", prof.name)), &records)?;
    if a.displacement {
        for r in &records {
            let field = if r.displacement_field.is_empty() {
                // cached records carry no field; solve again
                hetmech::fea::simulate_pattern(&items.iter().find(|i| i.0 == r.pattern_id).expect("id").1, &prof, &r.pattern_id)?
                    .displacement_field
            } else {
                r.displacement_field.clone()
            };
            write_displacement(&out.join("disp").join(format!("{}.disp", r.pattern_id)), &field)?;
        }
    }
    println!(
        "{} simulations ({} solved, {} cached) -> {}",
        records.len(),
        cache.solves(),
        cache.hits(),
        out.display()
    );
    Ok(())
}

fn parse_mix(s: &str) -> Result<(usize, usize)> {
    let mut counts = BTreeMap::new();
    for part in s.split(',') {
        let (k, v) = part.split_once('=').ok_or_else(|| Error::Argument(format!("bad mix term `{part}`")))?;
        let v: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::Argument(format!("bad count in `{part}`")))?;
        counts.insert(k.trim().to_string(), v);
    }
    if let Some(k) = counts.keys().find(|k| *k != "real" && *k != "synth") {
        return Err(Error::Argument(format!("unknown mix key `{k}`")));
    }
    Ok((*counts.get("real").unwrap_or(&0), *counts.get("synth").unwrap_or(&0)))
}

fn dataset(c: &Common, cmd: DatasetCommand) -> Result<()> {
    let DatasetCommand::Build {
        mix,
        source,
        real,
        synth,
        fidelity,
        rotations,
        split,
        kfold,
    } = cmd;
    let (n_real, n_synth) = parse_mix(&mix)?;
    let seed = c.seed.unwrap_or(0);
    let prof = profile(&fidelity)?;
    let split: Split = split.parse()?;
    let out = out_dir(c)?;
    let real_pool = match &real {
        Some(p) => pool_from(p)?,
        None => reference_patterns()?,
    };
    let synth_pool = match (&synth, n_synth) {
        (_, 0) => Vec::new(),
        (Some(p), _) => pool_from(p)?,
        (None, n) => match source {
            GenSource::Procedural => procedural_pool(n, 8, reference_fraction()?, seed)?,
            GenSource::Bernoulli => bernoulli_pool(n, reference_fraction()?, seed)?,
        },
    };
    let synth_source = synth_pool.first().map_or(
        match source {
            GenSource::Procedural => PatternSource::Procedural,
            GenSource::Bernoulli => PatternSource::Bernoulli,
        },
        |e| e.pattern.meta.source,
    );
    let spec = MixSpec {
        n_real,
        n_synth,
        synth_source,
        rotations_enabled: rotations,
    };
    let snapshot = serde_json::json!({
        "mix": spec,
        "fidelity": prof,
        "split": split,
        "seed": seed,
        "real": real,
        "synth": synth,
    });
    let config_hash = hetmech::sha256_hex(snapshot.to_string().as_bytes());
    let cache = SimCache::new(out.join("cache"), false);
    let ctx = BuildContext {
        root: out.clone(),
        cache: Some(&cache),
        jobs: c.jobs.unwrap_or(1),
        config_hash,
    };
    let manifest = build_mixed_dataset(&spec, &real_pool, &synth_pool, &prof, split, seed, &ctx)?;
    manifest.save(&out.join("manifest.csv"))?;
    write_atomic(&out.join("run-config.json"), &serde_json::to_vec_pretty(&snapshot)?)?;
    if let Some(k) = kfold {
        for (i, (tr, va)) in kfold_split(&manifest, k)?.into_iter().enumerate() {
            tr.save(&out.join(format!("fold-{i}-train.csv")))?;
            let va = DatasetManifest {
                entries: va
                    .entries
                    .into_iter()
                    .filter(|e| e.rotation == 0)
                    .map(|mut e| {
                        e.split = Split::Val;
                        e
                    })
                    .collect(),
                ..va
            };
            va.save(&out.join(format!("fold-{i}-val.csv")))?;
        }
    }
    println!(
        "{} rows, {} unique patterns ({} solved, {} cached) -> {}",
        manifest.entries.len(),
        manifest.unique_ids().len(),
        cache.solves(),
        cache.hits(),
        out.join("manifest.csv").display()
    );
    Ok(())
}

fn train_cmd(c: &Common, a: TrainArgs, init: Option<Checkpoint>) -> Result<()> {
    let mut cfg: TrainConfig = match &c.config {
        Some(p) => read_toml(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
        cfg.lr_drop_epoch = cfg.lr_drop_epoch.min(e);
    }
    let arch = match &init {
        Some(ck) => ck.network.arch().clone(),
        None => ArchitectureSpec::by_name(&a.arch)?,
    };
    let out = out_dir(c)?;
    let train_m = DatasetManifest::load(&a.train)?;
    let val_m = DatasetManifest::load(&a.val)?;
    let train_s = train_m.load_samples(&base_of(&a.train))?;
    let val_s = val_m.load_samples(&base_of(&a.val))?;
    let provenance = TrainProvenance {
        dataset_hash: train_m.content_hash()?,
        train_ids: train_m.unique_ids(),
        ..TrainProvenance::default()
    };
    let (ck, history) = train(&arch, &train_s, &val_s, &cfg, init.as_ref(), provenance)?;
    ck.save(&out.join("model.ckpt"))?;
    write_history_csv(&out.join("history.csv"), &history)?;
    println!(
        "kept epoch {} of {} -> {}",
        ck.provenance.epoch,
        history.len(),
        out.join("model.ckpt").display()
    );
    if let Some(t) = &a.test {
        let ev = evaluate(&ck, &DatasetManifest::load(t)?, &base_of(t))?;
        println!("test r2 {:.6} mae {:.6e}", ev.r2, ev.mae);
    }
    Ok(())
}

fn load_set(spec: &str) -> Result<Vec<Pattern>> {
    if spec == "bundled" {
        return Ok(reference_patterns()?.into_iter().map(|e| e.pattern).collect());
    }
    let path = Path::new(spec);
    // a dataset manifest has a `split` column, a pattern batch does not
    match DatasetManifest::load(path) {
        Ok(m) => Ok(m
            .load_samples(&base_of(path))?
            .into_iter()
            .zip(&m.entries)
            .filter(|(_, e)| e.rotation == 0)
            .map(|(s, _)| s.0)
            .collect()),
        Err(_) => Ok(load_pattern_batch(path)?.into_iter().map(|t| t.2).collect()),
    }
}

fn metrics(c: &Common, cmd: MetricsCommand) -> Result<()> {
    match cmd {
        MetricsCommand::Frechet { set_a, set_b, n_boot } => {
            let a = load_set(&set_a)?;
            let b = load_set(&set_b)?;
            let d = frechet_distance(&descriptor_stats(&a)?, &descriptor_stats(&b)?)?;
            let (da, db) = (descriptors(&a), descriptors(&b));
            let boot = bootstrap_distances(&[&da, &db], &[(0, 1)], n_boot.max(2), c.seed.unwrap_or(0))?;
            let se = std_dev(&boot.iter().map(|r| r[0]).collect::<Vec<_>>());
            println!(
                "{}",
                serde_json::json!({"n_a": a.len(), "n_b": b.len(), "distance": d, "se": se})
            );
            Ok(())
        }
        MetricsCommand::Report { experiment } => {
            let r = MetricsReport::load(&experiment.join("report.json"))?;
            print!("{}", render_report(&r));
            Ok(())
        }
    }
}

fn render_report(r: &MetricsReport) -> String {
    use std::fmt::Write;
    let mut s = String::new();
    let _ = writeln!(s, "experiment {} (config {})", r.name, &r.config_hash[..12]);
    let _ = writeln!(s, "\naugmentation (median over replicates)");
    let _ = writeln!(s, "{:<20} {:>10} {:>12} {:>10}", "arm", "R2", "MAE", "gain");
    for a in &r.augmentation_summary {
        let _ = writeln!(s, "{:<20} {:>10.5} {:>12.4e} {:>+10.5}", a.arm, a.median_r2, a.median_mae, a.gain);
    }
    if !r.transfer.is_empty() {
        let _ = writeln!(s, "\ntransfer");
        let _ = writeln!(
            s,
            "{:>6} {:>12} {:>12} {:>12} {:>12} {:>12} {:>10}",
            "seed", "pretrain R2", "finetune R2", "finetune MAE", "scratch R2", "scratch MAE", "MAE cut"
        );
        for t in &r.transfer {
            let _ = writeln!(
                s,
                "{:>6} {:>12.5} {:>12.5} {:>12.4e} {:>12.5} {:>12.4e} {:>9.1}%",
                t.seed,
                t.pretrain_r2,
                t.finetune_r2,
                t.finetune_mae,
                t.scratch_r2,
                t.scratch_mae,
                100.0 * t.mae_reduction
            );
        }
    }
    let _ = writeln!(s, "\nFréchet distance to real-a");
    for f in &r.frechet {
        let _ = writeln!(s, "{:<12} {:>10.4} ± {:.4}", f.b, f.distance, f.se);
    }
    let _ = writeln!(s, "\nΔΨ histogram overlap with real");
    for (k, v) in &r.histogram_overlap {
        let _ = writeln!(s, "{k:<12} {v:.3}");
    }
    s
}

fn experiment(c: &Common, cmd: ExperimentCommand) -> Result<()> {
    match cmd {
        ExperimentCommand::Init => {
            let out = out_dir(c)?;
            let path = out.join("experiment.toml");
            write_atomic(&path, ExperimentConfig::default().to_toml()?.as_bytes())?;
            println!("{}", path.display());
            Ok(())
        }
        ExperimentCommand::Run { dry_run: dry } => {
            let mut cfg = match &c.config {
                Some(p) => ExperimentConfig::load(p)?,
                None => ExperimentConfig::default(),
            };
            if let Some(s) = c.seed {
                cfg.seed = s;
            }
            if let Some(j) = c.jobs {
                cfg.jobs = j;
            }
            if let Some(o) = &c.out {
                cfg.out = o.clone();
            }
            if dry {
                println!("config {}", cfg.hash());
                print!("{}", dry_run(&cfg)?);
                return Ok(());
            }
            let (report, stats) = run_experiment(&cfg)?;
            print!("{}", render_report(&report));
            println!(
                "\n{} simulations ({} cached), {} models trained ({} reused), {} epochs -> {}",
                stats.simulations,
                stats.cache_hits,
                stats.models_trained,
                stats.models_reused,
                stats.epochs,
                cfg.out.display()
            );
            Ok(())
        }
    }
}
