//! Acceptance suite P1–P10. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.
//!
//! `cargo test --test acceptance -- P3 P4` runs a subset. The augmentation
//! and transfer criteria share one default experiment, written to
//! `HETMECH_ACCEPTANCE_DIR` or a directory under the target dir. Its
//! content-keyed caches survive between runs.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use hetmech::chx::{free_energy, run_simulation_with, ChConfig};
use hetmech::dataset::{reference_patterns, DatasetManifest};
use hetmech::experiment::{run_experiment, ExperimentConfig, MetricsReport, RunStats};
use hetmech::fea::{
    lame_from_e_nu, read_displacement, simulate_pattern, strain_energy_bounds_check, FidelityProfile, HeteroMesh,
};
use hetmech::metamodel::{
    gradient_check, pattern_inputs, train, ArchitectureSpec, Checkpoint, ConvSpec, Network, Padding, TrainConfig,
    TrainProvenance,
};
use hetmech::metrics::{bootstrap_distances, descriptor_stats, descriptors, frechet_distance, std_dev};
use hetmech::pattern::load_pattern;
use hetmech::synth::{bernoulli_pattern, calibrate_fraction, procedural_pattern, BernoulliConfig, ProceduralConfig};
use hetmech::{Pattern, PatternMeta, PatternSource};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = anyhow::Result<(bool, String)>;

struct Criterion {
    id: &'static str,
    title: &'static str,
    budget_s: f64,
    run: fn() -> Check,
}

fn main() {
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria = [
        Criterion { id: "P1", title: "Cahn-Hilliard mass conservation and energy decay", budget_s: 300.0, run: p1 },
        Criterion { id: "P2", title: "FEA homogeneous analytic oracle", budget_s: 120.0, run: p2 },
        Criterion { id: "P3", title: "FEA residual and tangent consistency", budget_s: 30.0, run: p3 },
        Criterion { id: "P4", title: "FEA rotation invariance", budget_s: 300.0, run: p4 },
        Criterion { id: "P5", title: "FEA stiffness bounds", budget_s: 600.0, run: p5 },
        Criterion { id: "P6", title: "surrogate gradients and memorization", budget_s: 300.0, run: p6 },
        Criterion { id: "P7", title: "augmentation benefit", budget_s: 7200.0, run: p7 },
        Criterion { id: "P8", title: "transfer benefit", budget_s: 7200.0, run: p8 },
        Criterion { id: "P9", title: "descriptor Fréchet orderings", budget_s: 600.0, run: p9 },
        Criterion { id: "P10", title: "determinism and formats", budget_s: f64::INFINITY, run: p10 },
    ];
    let mut failed = 0;
    let mut ran = 0;
    for c in criteria.iter().filter(|c| only.is_empty() || only.iter().any(|o| o == c.id)) {
        ran += 1;
        let t = Instant::now();
        let outcome = (c.run)();
        let secs = t.elapsed().as_secs_f64();
        let (ok, detail) = match outcome {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e:#}")),
        };
        let in_time = secs <= c.budget_s;
        let pass = ok && in_time;
        if !pass {
            failed += 1;
        }
        let budget = if c.budget_s.is_finite() {
            format!("{secs:.1}s of {:.0}s", c.budget_s)
        } else {
            format!("{secs:.1}s")
        };
        println!(
            "{} {:<4} {} [{budget}{}]: {detail}",
            if pass { "PASS" } else { "FAIL" },
            c.id,
            c.title,
            if in_time { "" } else { ", over budget" }
        );
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}

fn meta() -> PatternMeta {
    PatternMeta::new(PatternSource::External, 0)
}

fn random_pattern(seed: u64, p: f64) -> Pattern {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Pattern::from_fn(meta(), |_, _| rng.gen_bool(p))
}

fn p1() -> Check {
    let mut worst_drift: f64 = 0.0;
    let mut worst_rise = f64::NEG_INFINITY;
    let mut increases = 0;
    let mut steps = 0;
    for seed in 0..10u64 {
        let cfg = ChConfig {
            c0: [0.5, 0.63, 0.75][seed as usize % 3],
            seed,
            n_steps: 2000,
            snapshot_steps: vec![2000],
            sim_resolution: 128,
            ..ChConfig::default()
        };
        let mut m0 = None;
        let mut last: Option<f64> = None;
        run_simulation_with(&cfg, |f| {
            let m = f.total_mass();
            let m0 = *m0.get_or_insert(m);
            worst_drift = worst_drift.max(((m - m0) / m0).abs());
            let e = free_energy(f, &cfg);
            if let Some(prev) = last {
                steps += 1;
                let rise = (e - prev) / prev.abs();
                worst_rise = worst_rise.max(rise);
                if e > prev {
                    increases += 1;
                }
            }
            last = Some(e);
        })?;
    }
    Ok((
        worst_drift < 1e-10 && increases == 0,
        format!(
            "max relative mass drift {worst_drift:.2e} (< 1e-10); energy increases {increases} of {steps} steps, largest relative change {worst_rise:+.2e}"
        ),
    ))
}

/// Plane-strain Neo-Hookean energy density for `F = diag(a, a, 1)`.
fn psi_equibiaxial(stretch: f64, e: f64, nu: f64) -> f64 {
    let lambda = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
    let mu = e / (2.0 * (1.0 + nu));
    let ff = 2.0 * stretch * stretch + 1.0;
    let j = stretch * stretch;
    0.5 * mu * (ff - 3.0 - 2.0 * j.ln()) + 0.5 * lambda * (0.5 * (j * j - 1.0) - j.ln())
}

fn p2() -> Check {
    let exact = psi_equibiaxial(1.5, 1.0, 0.3);
    let mut errs = Vec::new();
    let mut values = Vec::new();
    for n in [64, 128, 256] {
        let profile = FidelityProfile {
            name: format!("oracle-{n}"),
            elements_per_side: n,
            displacement_program: vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
            e_soft: 1.0,
            e_stiff: 1.0,
            ..FidelityProfile::low()
        };
        let rec = simulate_pattern(&Pattern::filled(true, meta()), &profile, "homogeneous")?;
        values.push(rec.label());
        errs.push((rec.label() - exact).abs() / exact);
    }
    // the affine map is the exact discrete solution, so the errors sit at
    // roundoff and are only required not to grow above that level
    const FLOOR: f64 = 1e-10;
    let within = errs.iter().all(|&e| e < 5e-3);
    let monotone = errs.windows(2).all(|w| w[1] <= w[0] || w[1] < FLOOR);
    Ok((
        within && monotone,
        format!(
            "exact {exact:.12}; ΔΨ at 64/128/256 = {:.12}/{:.12}/{:.12}; relative errors {:.1e}/{:.1e}/{:.1e} (< 5e-3, non-increasing above {FLOOR:.0e})",
            values[0], values[1], values[2], errs[0], errs[1], errs[2]
        ),
    ))
}

fn p3() -> Check {
    let h = 1e-6;
    let mut worst_r: f64 = 0.0;
    let mut worst_k: f64 = 0.0;
    for seed in 0..5u64 {
        for order in [1, 2] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cells: Vec<bool> = (0..16).map(|_| rng.gen_bool(0.5)).collect();
            let mesh = HeteroMesh::grid(4, order, lame_from_e_nu(1.0, 0.3)?, lame_from_e_nu(10.0, 0.3)?, |i, j| {
                cells[j * 4 + i]
            })?;
            let n = mesh.n_dofs();
            let u: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.01..0.01)).collect();
            let r = mesh.residual(&u)?;
            let mut k = vec![0.0; n * n];
            for (i, j, v) in mesh.tangent_triplets(&u)? {
                k[i * n + j] += v;
            }
            let mut up = u.clone();
            let mut r_err: f64 = 0.0;
            let mut k_err: f64 = 0.0;
            for i in 0..n {
                up[i] = u[i] + h;
                let (ep, rp) = (mesh.total_energy(&up)?, mesh.residual(&up)?);
                up[i] = u[i] - h;
                let (em, rm) = (mesh.total_energy(&up)?, mesh.residual(&up)?);
                up[i] = u[i];
                r_err = r_err.max(((ep - em) / (2.0 * h) - r[i]).abs());
                for j in 0..n {
                    k_err = k_err.max(((rp[j] - rm[j]) / (2.0 * h) - k[j * n + i]).abs());
                }
            }
            let r_scale = r.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let k_scale = k.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            worst_r = worst_r.max(r_err / r_scale);
            worst_k = worst_k.max(k_err / k_scale);
        }
    }
    Ok((
        worst_r < 1e-6 && worst_k < 1e-6,
        format!(
            "5 seeds, linear and quadratic elements: residual vs energy {worst_r:.2e}, tangent vs residual {worst_k:.2e} (max-norm relative, < 1e-6)"
        ),
    ))
}

fn p4() -> Check {
    let profile = FidelityProfile::low();
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let p = random_pattern(100 + seed, 0.3 + 0.04 * seed as f64);
        let psi: Vec<f64> = (0..4)
            .map(|q| Ok(simulate_pattern(&p.rotated(q), &profile, "r")?.label()))
            .collect::<anyhow::Result<_>>()?;
        let lo = psi.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = psi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        worst = worst.max((hi - lo) / hi.abs());
    }
    Ok((
        worst < 1e-9,
        format!("10 patterns at d = 0.001: largest relative spread over 4 rotations {worst:.2e} (< 1e-9)"),
    ))
}

fn p5() -> Check {
    let profile = FidelityProfile::low();
    let mut violations = 0;
    let mut tightest = f64::INFINITY;
    for seed in 0..20u64 {
        let p = if seed % 2 == 0 {
            random_pattern(200 + seed, 0.1 + 0.04 * seed as f64)
        } else {
            procedural_pattern(&ProceduralConfig::new(8, 0.2 + 0.03 * seed as f64, seed))?
        };
        let (soft, het, stiff) = strain_energy_bounds_check(&p, &profile)?;
        if !(soft <= het && het <= stiff) {
            violations += 1;
        }
        tightest = tightest.min(((het - soft) / soft).min((stiff - het) / stiff));
    }
    Ok((
        violations == 0,
        format!("20 patterns: {violations} violations of soft <= hetero <= stiff; smallest relative margin {tightest:.2e}"),
    ))
}

fn perturbed(arch: &ArchitectureSpec, seed: u64) -> anyhow::Result<Network> {
    let mut net = Network::init(arch, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for p in net.params_mut() {
        *p += 0.1 * rng.gen_range(-1.0..1.0);
    }
    Ok(net)
}

fn uniform(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn p6() -> Check {
    let last = |c: usize, k: usize| ConvSpec {
        out_channels: c,
        kernel_size: k,
        padding: Padding::Valid,
        batchnorm: false,
        relu: false,
        maxpool: false,
    };
    let hidden = |c: usize, k: usize, padding: Padding, maxpool: bool| ConvSpec {
        out_channels: c,
        kernel_size: k,
        padding,
        batchnorm: true,
        relu: true,
        maxpool,
    };
    let nets = [
        (
            ArchitectureSpec {
                name: "tiny".into(),
                input_size: 6,
                conv_layers: vec![hidden(3, 3, Padding::Same, true), last(2, 2)],
            },
            3,
            0,
        ),
        (
            ArchitectureSpec {
                name: "stack".into(),
                input_size: 8,
                conv_layers: vec![
                    hidden(2, 3, Padding::Same, true),
                    hidden(3, 3, Padding::Same, true),
                    hidden(2, 2, Padding::Valid, false),
                    last(2, 1),
                ],
            },
            2,
            11,
        ),
    ];
    let mut worst: f64 = 0.0;
    let mut worst_name = String::new();
    let mut tensors = 0;
    let mut refined = 0;
    for (arch, n, seed) in &nets {
        let net = perturbed(arch, *seed)?;
        let x = uniform(n * arch.input_size * arch.input_size, seed + 1);
        let y = uniform(*n, seed + 2);
        let report = gradient_check(&net, &x, &y, 1e-3)?;
        refined += report.refined;
        for (name, rel) in report.per_tensor {
            tensors += 1;
            if rel >= worst {
                worst = rel;
                worst_name = format!("{}/{name}", arch.name);
            }
        }
    }

    // memorization: 32 real patterns with their low-fidelity labels
    let pool = reference_patterns()?;
    let profile = FidelityProfile::low();
    let samples: Vec<(Pattern, f64)> = pool
        .iter()
        .step_by(31)
        .take(32)
        .map(|e| Ok((e.pattern.clone(), simulate_pattern(&e.pattern, &profile, &e.id)?.label())))
        .collect::<anyhow::Result<_>>()?;
    let cfg = TrainConfig {
        epochs: 200,
        lr_drop_epoch: 100,
        batch_size: 32,
        seed: 0,
        ..TrainConfig::default()
    };
    let arch = ArchitectureSpec::desk3();
    let (ck, _) = train(&arch, &samples, &samples, &cfg, None, TrainProvenance::default())?;
    let pred = ck.predict(&pattern_inputs(samples.iter().map(|s| &s.0)), samples.len())?;
    let y: Vec<f64> = samples.iter().map(|s| s.1).collect();
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / y.len() as f64;
    let mse = pred.iter().zip(&y).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / y.len() as f64;
    let ratio = mse / var;
    Ok((
        worst < 1e-4 && ratio < 1e-3,
        format!(
            "{tensors} tensors, worst FD relative error {worst:.2e} ({worst_name}; {refined} coordinates needed a smaller step); 32-sample train MSE / label variance {ratio:.2e} after 200 epochs (< 1e-3)"
        ),
    ))
}

/// The default experiment backs both benefit criteria. It runs once per
/// process in a persistent directory, so a later run only redoes work whose
/// inputs changed.
fn default_experiment() -> Result<&'static (ExperimentConfig, MetricsReport, RunStats), String> {
    static RUN: OnceLock<Result<(ExperimentConfig, MetricsReport, RunStats), String>> = OnceLock::new();
    RUN.get_or_init(|| {
        let out = match std::env::var_os("HETMECH_ACCEPTANCE_DIR") {
            Some(d) => PathBuf::from(d),
            None => PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance-desk"),
        };
        let cfg = ExperimentConfig {
            out,
            ..ExperimentConfig::default()
        };
        let (report, stats) = run_experiment(&cfg).map_err(|e| format!("{e:#}"))?;
        Ok((cfg, report, stats))
    })
    .as_ref()
    .map_err(Clone::clone)
}

fn p7() -> Check {
    let (cfg, report, stats) = default_experiment().map_err(anyhow::Error::msg)?;
    let get = |arm: &str| report.summary(arm).map(|s| s.median_r2).unwrap_or(f64::NAN);
    let (base, proc_, bern) = (get("real"), get("real+procedural"), get("real+bernoulli"));
    let per_seed: Vec<String> = cfg
        .replicate_seeds
        .iter()
        .map(|&s| {
            let r2 = |arm: &str| {
                report
                    .augmentation
                    .iter()
                    .find(|r| r.seed == s && r.arm == arm)
                    .map_or(f64::NAN, |r| r.r2)
            };
            format!("{:.4}/{:.4}/{:.4}", r2("real"), r2("real+procedural"), r2("real+bernoulli"))
        })
        .collect();
    let overlap: Vec<String> = report
        .histogram_overlap
        .iter()
        .map(|(k, v)| format!("{k} {v:.2}"))
        .collect();
    Ok((
        proc_ > base && bern - base < proc_ - base,
        format!(
            "median test R2 real {base:.4}, +{n} procedural {proc_:.4}, +{n} Bernoulli {bern:.4} (per seed {}); label histogram overlap with real: {}; {} simulations, {} models trained in this process",
            per_seed.join(", "),
            overlap.join(", "),
            stats.simulations,
            stats.models_trained,
            n = cfg.augmentation.n_synth,
        ),
    ))
}

fn p8() -> Check {
    let (_, report, _) = default_experiment().map_err(anyhow::Error::msg)?;
    let cut = report.median_mae_reduction.unwrap_or(f64::NAN);
    let rows: Vec<String> = report
        .transfer
        .iter()
        .map(|t| {
            format!(
                "seed {}: pretrain R2 {:.4}, fine-tune R2 {:.4} MAE {:.3e}, scratch R2 {:.4} MAE {:.3e}",
                t.seed, t.pretrain_r2, t.finetune_r2, t.finetune_mae, t.scratch_r2, t.scratch_mae
            )
        })
        .collect();
    Ok((
        cut >= 0.2,
        format!("median MAE reduction {:.1}% (>= 20%); {}", 100.0 * cut, rows.join("; ")),
    ))
}

fn p9() -> Check {
    let real: Vec<Pattern> = reference_patterns()?.into_iter().map(|e| e.pattern).collect();
    let mut idx: Vec<usize> = (0..real.len()).collect();
    use rand::seq::SliceRandom;
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
    let half_a: Vec<Pattern> = idx[..500].iter().map(|&i| real[i].clone()).collect();
    let half_b: Vec<Pattern> = idx[500..].iter().map(|&i| real[i].clone()).collect();
    let frac = calibrate_fraction(&real)?;
    let procedural: Vec<Pattern> = (0..500)
        .map(|s| procedural_pattern(&ProceduralConfig::new(8, frac, 10_000 + s)))
        .collect::<Result<_, _>>()?;
    let bernoulli: Vec<Pattern> = (0..500)
        .map(|s| bernoulli_pattern(&BernoulliConfig { p: frac, seed: 20_000 + s }))
        .collect::<Result<_, _>>()?;
    let sa = descriptor_stats(&half_a)?;
    let d_rr = frechet_distance(&sa, &descriptor_stats(&half_b)?)?;
    let d_rp = frechet_distance(&sa, &descriptor_stats(&procedural)?)?;
    let d_rb = frechet_distance(&sa, &descriptor_stats(&bernoulli)?)?;
    let sets = [descriptors(&half_a), descriptors(&half_b), descriptors(&procedural), descriptors(&bernoulli)];
    let refs: Vec<&[_]> = sets.iter().map(Vec::as_slice).collect();
    let boot = bootstrap_distances(&refs, &[(0, 1), (0, 2), (0, 3)], 100, 9)?;
    let se = |f: &dyn Fn(&Vec<f64>) -> f64| std_dev(&boot.iter().map(f).collect::<Vec<_>>());
    let se_rr = se(&|r| r[0]);
    let se_rp = se(&|r| r[1]);
    let se_rb = se(&|r| r[2]);
    // paired bootstrap errors of the two gaps
    let se_gap1 = se(&|r| r[1] - r[0]);
    let se_gap2 = se(&|r| r[2] - r[1]);
    let gap1 = d_rp - d_rr;
    let gap2 = d_rb - d_rp;
    let ok = gap1 > 3.0 * se_gap1 && gap2 > 3.0 * se_gap2;
    Ok((
        ok,
        format!(
            "d(real, real half) {d_rr:.4} ± {se_rr:.4} < d(real, procedural) {d_rp:.4} ± {se_rp:.4} < d(real, Bernoulli) {d_rb:.4} ± {se_rb:.4}; gaps {gap1:.3} = {:.0} SE and {gap2:.3} = {:.0} SE (> 3)",
            gap1 / se_gap1,
            gap2 / se_gap2
        ),
    ))
}

fn tiny_config(out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        name: "formats".into(),
        out: out.to_path_buf(),
        replicate_seeds: vec![3],
        store_displacement: true,
        ..ExperimentConfig::default()
    };
    c.augmentation.n_real_train = 16;
    c.augmentation.n_val = 8;
    c.augmentation.n_test = 8;
    c.augmentation.n_synth = 8;
    c.transfer.n_pretrain_synth = 8;
    c.transfer.n_finetune = 8;
    c.high = FidelityProfile {
        name: "high".into(),
        displacement_program: vec![0.0, 0.001, 0.05],
        ..FidelityProfile::low()
    };
    let quick = TrainConfig {
        epochs: 3,
        lr_drop_epoch: 2,
        batch_size: 8,
        ..TrainConfig::default()
    };
    c.train = quick.clone();
    c.pretrain = quick.clone();
    c.finetune = quick;
    c.metrics.n_frechet = 40;
    c.metrics.n_boot = 5;
    c
}

fn files(dir: &Path, ext: &str) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == ext) {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

fn p10() -> Check {
    let root = tempfile::tempdir()?;
    let a = tiny_config(&root.path().join("a"));
    let b = tiny_config(&root.path().join("b"));
    let (ra, _) = run_experiment(&a)?;
    let (rb, _) = run_experiment(&b)?;
    let (again, rerun) = run_experiment(&a)?;
    let same_report = std::fs::read(a.out.join("report.json"))? == std::fs::read(b.out.join("report.json"))?
        && ra == rb
        && again == ra;
    let mut manifests_equal = true;
    let mut n_csv = 0;
    for p in files(&a.out, "csv") {
        let rel = p.strip_prefix(&a.out)?;
        if rel.starts_with("history") {
            continue;
        }
        n_csv += 1;
        manifests_equal &= std::fs::read(&p)? == std::fs::read(b.out.join(rel))?;
        let mut reader = csv::Reader::from_path(&p)?;
        for row in reader.records() {
            row?;
        }
        if rel.starts_with("data") {
            DatasetManifest::load(&p)?.validate()?;
        }
    }
    let pbm = files(&a.out, "pbm");
    for p in &pbm {
        let pat = load_pattern(p)?;
        anyhow::ensure!(pat.to_pbm() == std::fs::read(p)?, "{} does not round-trip", p.display());
    }
    let ckpts = files(&a.out, "ckpt");
    for p in &ckpts {
        anyhow::ensure!(Checkpoint::load(p)?.to_bytes()? == std::fs::read(p)?, "{} does not round-trip", p.display());
    }
    let disp = files(&a.out, "disp");
    for p in &disp {
        anyhow::ensure!(read_displacement(p)?.len() == 2 * 64 * 64);
    }
    let report_ok = MetricsReport::load(&a.out.join("report.json"))? == ra;
    let config_ok = ExperimentConfig::load(&a.out.join("config.toml"))?.hash() == a.hash();
    let idle = rerun.simulations == 0 && rerun.epochs == 0;
    Ok((
        same_report && manifests_equal && report_ok && config_ok && idle && !disp.is_empty(),
        format!(
            "reports identical {same_report}, {n_csv} CSV tables identical {manifests_equal}; round-tripped {} PBM, {} checkpoints, {} displacement files; rerun did {} solves and {} epochs",
            pbm.len(),
            ckpts.len(),
            disp.len(),
            rerun.simulations,
            rerun.epochs
        ),
    ))
}
