use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use duallink::coupling::{mc_region_sampler, run_coupling, Region};
use duallink::duality::{link_sample, simulate_dual};
use duallink::euler::euler_backward;
use duallink::logistic::toy_logistic_2d;
use duallink::skorohod::{backward_flow, forward_flow, impute_noise, solve_skorohod_1d};
use duallink::{CouplingOptions, DriftField, HypoSurface, ReflectionRule, RegionSamplerConfig, RngSpec};
use duallink_bench::{constant, grid, noise, unit_interval, wedge};

fn euler(c: &mut Criterion) {
    let mut g = c.benchmark_group("euler_backward");
    for steps in [1_000, 10_000] {
        let w = noise(steps, 1, 1);
        let m = constant(0.5);
        g.bench_with_input(BenchmarkId::from_parameter(steps), &w, |b, w| b.iter(|| euler_backward(black_box(&[0.0]), w, &m).unwrap()));
    }
    g.finish();
}

fn skorohod(c: &mut Criterion) {
    let w = noise(10_000, 1, 2);
    let kappa: Vec<f64> = w.coord(0).iter().map(|v| v + 0.5).collect();
    c.bench_function("solve_skorohod_1d/10000", |b| b.iter(|| solve_skorohod_1d(black_box(&kappa)).unwrap()));

    let m = constant(0.5);
    let path = euler_backward(&[0.0], &w, &m).unwrap().reversed();
    let omega = impute_noise(&path, &m).unwrap();
    let level = HypoSurface::constant(0.3);
    let mut g = c.benchmark_group("flows/10000");
    for rule in [ReflectionRule::WholeStep, ReflectionRule::GridProjection] {
        g.bench_function(format!("forward/{rule:?}"), |b| b.iter(|| forward_flow(&path, &level, &omega, &m, rule).unwrap()));
    }
    let ff = forward_flow(&path, &level, &omega, &m, ReflectionRule::WholeStep).unwrap();
    let surfaces = ff.surfaces.reversed();
    let rn = ff.flow.reflected_noise.reversed_noise();
    g.bench_function("backward/WholeStep", |b| b.iter(|| backward_flow(path.last(), &surfaces, &rn, &m, ReflectionRule::WholeStep).unwrap()));
    g.finish();
}

fn dual_and_link(c: &mut Criterion) {
    let m = constant(0.5);
    let bilinear = DriftField::Bilinear2D;
    let mut seed = 0;
    c.bench_function("link_sample/interval", |b| {
        b.iter(|| {
            seed += 1;
            link_sample(&unit_interval(), &m, RngSpec::new(seed, 0)).unwrap()
        })
    });
    c.bench_function("link_sample/wedge", |b| {
        b.iter(|| {
            seed += 1;
            link_sample(&wedge(), &bilinear, RngSpec::new(seed, 0)).unwrap()
        })
    });
    let g1000 = grid(1000);
    c.bench_function("simulate_dual/interval/1000", |b| b.iter(|| simulate_dual(&unit_interval(), &g1000, &m, RngSpec::new(3, 0)).unwrap()));
}

fn coupling(c: &mut Criterion) {
    let m = constant(0.5);
    let mut g = c.benchmark_group("run_coupling");
    for steps in [100, 1000] {
        let tg = grid(steps);
        g.bench_with_input(BenchmarkId::from_parameter(steps), &tg, |b, tg| {
            b.iter(|| run_coupling(&unit_interval(), tg, &m, RngSpec::new(4, 0), CouplingOptions::default()).unwrap())
        });
    }
    g.finish();
}

fn region_sampler(c: &mut Criterion) {
    let model = DriftField::LogisticRegression(toy_logistic_2d());
    let region = Region::SlabRect { offset_lo: -0.5, offset_hi: 0.5, h_lo: vec![-1.0], h_hi: vec![1.0] };
    let cfg = RegionSamplerConfig { target_accepts: 50, ..RegionSamplerConfig::default() };
    let mut g = c.benchmark_group("mc_region_sampler");
    g.sample_size(10);
    g.bench_function("toy_logistic/50", |b| b.iter(|| mc_region_sampler(&region, &model, &cfg, 5).unwrap()));
    g.finish();
}

criterion_group!(benches, euler, skorohod, dual_and_link, coupling, region_sampler);
criterion_main!(benches);
