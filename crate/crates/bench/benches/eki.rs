use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use eki_core::ensemble::{eki_step_deterministic, eki_step_stochastic, empirical_stats};
use eki_core::rng::rng_from_seed;
use eki_core::{
    gen_eig_pencil, generate, record_step, Frame, NoiseDraw, ProblemInstance, ProblemSpec,
};

fn problem(n: usize, d: usize, j: usize) -> ProblemInstance {
    generate(&ProblemSpec {
        n,
        d,
        target_h: n.min(d) * 3 / 4,
        j,
        seed: 1,
        noise_on_data: true,
    })
    .unwrap()
}

const SIZES: [(usize, usize, usize); 3] = [(8, 12, 5), (30, 40, 20), (60, 80, 40)];

fn pencil(c: &mut Criterion) {
    let mut g = c.benchmark_group("gen_eig_pencil");
    for (n, d, j) in SIZES {
        let inst = problem(n, d, j);
        let stats = empirical_stats(&inst.ens0, &inst.obs).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(n), &stats, |b, s| {
            b.iter(|| gen_eig_pencil(black_box(&s.obs_cov), inst.obs.sigma()).unwrap())
        });
    }
    g.finish();
}

fn steps(c: &mut Criterion) {
    let mut g = c.benchmark_group("eki_step");
    for (n, d, j) in SIZES {
        let inst = problem(n, d, j);
        g.bench_function(BenchmarkId::new("deterministic", n), |b| {
            b.iter(|| eki_step_deterministic(black_box(&inst.ens0), &inst.obs, &inst.y).unwrap())
        });
        let mut rng = rng_from_seed(3);
        let noise = NoiseDraw::sample(inst.obs.sigma(), j, 3, &mut rng);
        g.bench_function(BenchmarkId::new("stochastic", n), |b| {
            b.iter(|| {
                eki_step_stochastic(black_box(&inst.ens0), &inst.obs, &inst.y, &noise).unwrap()
            })
        });
    }
    g.finish();
}

fn diagnostics(c: &mut Criterion) {
    let mut g = c.benchmark_group("diagnostics");
    for (n, d, j) in SIZES {
        let inst = problem(n, d, j);
        g.bench_function(BenchmarkId::new("frame", n), |b| {
            b.iter(|| Frame::from_initial(black_box(&inst.ens0), &inst.obs, &inst.y).unwrap())
        });
        let frame = Frame::from_initial(&inst.ens0, &inst.obs, &inst.y).unwrap();
        g.bench_function(BenchmarkId::new("record_step", n), |b| {
            b.iter(|| record_step(black_box(&inst.ens0), &inst.obs, &inst.y, &frame).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, pencil, steps, diagnostics);
criterion_main!(benches);
