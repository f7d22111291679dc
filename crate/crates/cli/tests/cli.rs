use std::path::Path;
use std::process::{Command, Output};

fn hetmech(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hetmech"))
        .args(args)
        .output()
        .expect("spawn hetmech")
}

fn ok(args: &[&str]) -> String {
    let out = hetmech(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn version_and_help() {
    let v = ok(&["version"]);
    assert!(v.starts_with(&format!("hetmech {}", env!("CARGO_PKG_VERSION"))), "{v}");
    assert!(ok(&["--help"]).contains("experiment"));
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "replicate_seeds = [1, 1]\n").unwrap();
    let out = hetmech(&["--config", s(&bad), "experiment", "run", "--dry-run"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("replicate_seeds"));

    std::fs::write(&bad, "no_such_key = 3\n").unwrap();
    let out = hetmech(&["--config", s(&bad), "experiment", "run", "--dry-run"]);
    assert_eq!(out.status.code(), Some(2));

    let out = hetmech(&["--out", s(dir.path()), "synth", "bernoulli", "--n", "2", "--p", "1.5"]);
    assert_eq!(out.status.code(), Some(2));

    // missing input file is neither
    let out = hetmech(&["--out", s(dir.path()), "evaluate", "--model", "nope.ckpt", "--test", "nope.csv"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn solver_failures_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("pats");
    ok(&["--out", s(&out_dir), "synth", "procedural", "--n", "1"]);
    let prof = dir.path().join("strict.toml");
    std::fs::write(
        &prof,
        "name = \"strict\"\nelements_per_side = 64\nelement_order = 1\ndisplacement_program = [0.0, 0.3]\n\
         newton_tol = 1e-300\nmax_newton_iters = 1\nload_substeps = 1\ne_soft = 1.0\ne_stiff = 10.0\nnu = 0.3\n",
    )
    .unwrap();
    let out = hetmech(&[
        "--out",
        s(&dir.path().join("sims")),
        "simulate",
        "--manifest",
        s(&out_dir.join("manifest.csv")),
        "--fidelity",
        s(&prof),
    ]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn dry_run_and_init() {
    let dir = tempfile::tempdir().unwrap();
    let plan = ok(&["experiment", "run", "--dry-run"]);
    assert!(plan.starts_with("config ") && plan.contains("augmentation"), "{plan}");
    ok(&["--out", s(dir.path()), "experiment", "init"]);
    let cfg = dir.path().join("experiment.toml");
    let again = ok(&["--config", s(&cfg), "experiment", "run", "--dry-run"]);
    assert_eq!(plan.lines().next(), again.lines().next());
    assert!(!dir.path().join("report.json").exists());
}

#[test]
fn synth_simulate_dataset_train_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| dir.path().join(n);

    ok(&["--out", s(&d("proc")), "--seed", "4", "synth", "procedural", "--n", "3"]);
    ok(&["--out", s(&d("bern")), "synth", "bernoulli", "--n", "12", "--p", "0.4"]);
    let manifest = d("proc").join("manifest.csv");
    assert_eq!(std::fs::read_to_string(&manifest).unwrap().lines().count(), 4);

    let first = ok(&["--out", s(&d("sims")), "simulate", "--manifest", s(&manifest), "--displacement"]);
    assert!(first.contains("3 solved"), "{first}");
    let second = ok(&["--out", s(&d("sims")), "simulate", "--manifest", s(&manifest)]);
    assert!(second.contains("3 cached"), "{second}");
    assert_eq!(std::fs::read_dir(d("sims").join("disp")).unwrap().count(), 3);
    let sims = std::fs::read_to_string(d("sims").join("sims-low.csv")).unwrap();
    assert!(sims.lines().count() > 3);

    let build = |out: &str, seed: &str, mix: &str, split: &str, rot: bool| {
        let out = d(out);
        let mut args = vec!["--out", s(&out), "--seed", seed, "dataset", "build", "--mix", mix, "--split", split];
        if rot {
            args.push("--rotations");
        }
        ok(&args)
    };
    let tr = build("train", "2", "real=6,synth=2", "train", true);
    assert!(tr.starts_with("32 rows, 8 unique"), "{tr}");
    build("val", "7", "real=3,synth=0", "val", false);
    build("test", "9", "real=3,synth=0", "test", false);
    build("leaky", "2", "real=3,synth=0", "test", false);

    let m = |n: &str| d(n).join("manifest.csv");
    let trained = ok(&[
        "--out",
        s(&d("model")),
        "train",
        "--train",
        s(&m("train")),
        "--val",
        s(&m("val")),
        "--epochs",
        "2",
        "--test",
        s(&m("test")),
    ]);
    assert!(trained.contains("kept epoch"), "{trained}");
    let leak = hetmech(&["evaluate", "--model", s(&d("model").join("model.ckpt")), "--test", s(&m("leaky"))]);
    assert!(!leak.status.success());
    assert!(String::from_utf8_lossy(&leak.stderr).contains("leakage"));
    let model = d("model").join("model.ckpt");
    let eval = ok(&["evaluate", "--model", s(&model), "--test", s(&m("test"))]);
    assert!(eval.contains("r2"), "{eval}");

    let tuned = ok(&[
        "--out",
        s(&d("tuned")),
        "transfer",
        "--pretrained",
        s(&model),
        "--train",
        s(&m("val")),
        "--val",
        s(&m("test")),
        "--epochs",
        "1",
    ]);
    assert!(tuned.contains("kept epoch"), "{tuned}");

    let fd = ok(&["metrics", "frechet", "--set-a", "bundled", "--set-b", s(&d("bern").join("manifest.csv")), "--n-boot", "3"]);
    assert!(fd.contains("distance"), "{fd}");
}
