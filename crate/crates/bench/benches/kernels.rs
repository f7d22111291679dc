use criterion::{criterion_group, criterion_main, Criterion};
use hetmech::chx::{init_field, ChConfig, ChSolver};
use hetmech::dataset::reference_patterns;
use hetmech::fea::{simulate_pattern, FidelityProfile};
use hetmech::metamodel::{pattern_inputs, ArchitectureSpec, Network};

fn ch_step(c: &mut Criterion) {
    let cfg = ChConfig::default();
    let field = init_field(&cfg).unwrap();
    let mut solver = ChSolver::new(cfg).unwrap();
    c.bench_function("ch step 128", |b| b.iter(|| solver.step(&field).unwrap()));
}

fn fea_solve(c: &mut Criterion) {
    let pattern = reference_patterns().unwrap().swap_remove(0).pattern;
    let mut g = c.benchmark_group("fea");
    g.sample_size(10);
    let low = FidelityProfile::low();
    g.bench_function("low fidelity pattern", |b| {
        b.iter(|| simulate_pattern(&pattern, &low, "bench").unwrap())
    });
    let high = FidelityProfile::high();
    g.bench_function("high fidelity pattern", |b| {
        b.iter(|| simulate_pattern(&pattern, &high, "bench").unwrap())
    });
    g.finish();
}

fn cnn(c: &mut Criterion) {
    let pool = reference_patterns().unwrap();
    let batch = 64;
    let x = pattern_inputs(pool.iter().take(batch).map(|e| &e.pattern));
    let y = vec![0.0; batch];
    let net = Network::init(&ArchitectureSpec::desk3(), 0).unwrap();
    let mut grad = vec![0.0; net.n_params()];
    let mut g = c.benchmark_group("desk3 batch 64");
    g.bench_function("predict", |b| b.iter(|| net.predict(&x, batch).unwrap()));
    g.bench_function("loss and gradient", |b| {
        b.iter(|| net.loss_and_grad(&x, &y, Some(&mut grad)).unwrap())
    });
    g.finish();
}

criterion_group!(benches, ch_step, fea_solve, cnn);
criterion_main!(benches);
