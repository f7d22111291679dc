use std::path::Path;

use hetmech::dataset::DatasetManifest;
use hetmech::experiment::{run_experiment, version_and_provenance, ExperimentConfig, MetricsReport};
use hetmech::fea::FidelityProfile;
use hetmech::metamodel::{Checkpoint, TrainConfig};
use hetmech::Error;

fn tiny(out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig {
        name: "tiny".into(),
        out: out.to_path_buf(),
        replicate_seeds: vec![5],
        ..ExperimentConfig::default()
    };
    let a = &mut c.augmentation;
    a.n_real_train = 12;
    a.n_val = 6;
    a.n_test = 8;
    a.n_synth = 10;
    c.transfer.n_pretrain_synth = 6;
    c.transfer.n_finetune = 8;
    c.high = FidelityProfile {
        name: "high".into(),
        displacement_program: vec![0.0, 0.001, 0.05],
        ..FidelityProfile::low()
    };
    let quick = TrainConfig {
        epochs: 2,
        lr_drop_epoch: 1,
        batch_size: 8,
        ..TrainConfig::default()
    };
    c.train = quick.clone();
    c.pretrain = quick.clone();
    c.finetune = quick;
    c.metrics.n_frechet = 30;
    c.metrics.n_boot = 4;
    c.metrics.hist_bins = 5;
    c
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn pipeline_is_deterministic_cached_and_well_formed() {
    let dir = tempfile::tempdir().unwrap();
    let a = tiny(&dir.path().join("a"));
    let b = tiny(&dir.path().join("b"));
    let (ra, sa) = run_experiment(&a).unwrap();
    let (rb, _) = run_experiment(&b).unwrap();
    assert_eq!(ra, rb);
    assert!(sa.simulations > 0 && sa.epochs > 0);

    // 3 arms + pretrain, fine-tune and scratch
    assert_eq!(ra.augmentation.len(), 3);
    assert_eq!(ra.transfer.len(), 1);
    assert_eq!(ra.frechet.len(), 3);
    assert!(ra.histogram_overlap.contains_key("procedural"));
    assert_eq!(sa.models_trained, 6);

    assert_eq!(read(&a.out.join("report.json")), read(&b.out.join("report.json")));
    for name in ra.datasets.keys() {
        let rel = format!("data/{name}.csv");
        assert_eq!(read(&a.out.join(&rel)), read(&b.out.join(&rel)), "{name}");
        let m = DatasetManifest::load(&a.out.join(&rel)).unwrap();
        assert_eq!(&m.content_hash().unwrap(), &ra.datasets[name]);
        m.load_samples(&a.out.join("data")).unwrap();
    }
    assert_eq!(MetricsReport::load(&a.out.join("report.json")).unwrap(), ra);
    for entry in std::fs::read_dir(a.out.join("checkpoints")).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "ckpt") {
            let ck = Checkpoint::load(&p).unwrap();
            assert_eq!(ck.to_bytes().unwrap(), read(&p));
        }
    }
    let back = ExperimentConfig::load(&a.out.join("config.toml")).unwrap();
    assert_eq!(back.hash(), a.hash());

    // second run in place: nothing to solve or train
    let (again, s2) = run_experiment(&a).unwrap();
    assert_eq!(again, ra);
    assert_eq!((s2.simulations, s2.epochs, s2.models_trained), (0, 0, 0));
    assert_eq!(s2.models_reused, 6);
    assert_eq!(read(&a.out.join("report.json")), read(&b.out.join("report.json")));

    let text = version_and_provenance(Some(&a)).unwrap();
    assert!(text.starts_with(&format!("hetmech {}", env!("CARGO_PKG_VERSION"))));
    assert!(text.contains(&a.hash()) && text.contains("dataset test-low "));
}

#[test]
fn stage_failures_name_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = tiny(dir.path());
    c.augmentation.n_test = 5000;
    match run_experiment(&c).unwrap_err() {
        Error::Stage {
            stage,
            config_hash,
            source,
            ..
        } => {
            assert_eq!(stage, "split");
            assert_eq!(config_hash, c.hash());
            assert!(matches!(*source, Error::Capacity { .. }));
        }
        other => panic!("unexpected {other}"),
    }
}
