use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use pearl::pipeline::{fused_logits, run, RunOptions};
use pearl::propagate::{cg_solve, refine_grid, PooledGrid};
use pearl::synth::{generate, SynthSpec};
use pearl::{Exec, GrayImage, LogitGrid, PipelineConfig, PrototypeMatrix};

const POLICIES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn scene_spec() -> SynthSpec {
    // 3 x 5 sliding windows.
    SynthSpec { height: 256, width: 384, grid_h: 64, grid_w: 96, ..SynthSpec::default() }
}

fn bench_align(c: &mut Criterion) {
    let scene = generate(&scene_spec()).unwrap();
    let inputs = scene.inputs().unwrap();
    let config = scene.spec.config();
    let mut group = c.benchmark_group("align_windows");
    group.sample_size(20);
    for (name, exec) in POLICIES {
        group.bench_function(name, |b| b.iter(|| fused_logits(black_box(&inputs), &config, exec).unwrap()));
    }
    group.finish();
}

fn bench_cg(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let config = PipelineConfig::default();
    let mut group = c.benchmark_group("cg_solve");
    for classes in [19, 150] {
        let (h, w) = (config.grid_h, config.grid_w);
        let t = PrototypeMatrix::normalized(DMatrix::from_fn(classes, 64, |_, _| StandardNormal.sample(&mut rng))).unwrap();
        let scores = (0..h * w * classes).map(|_| StandardNormal.sample(&mut rng)).collect();
        let pooled = PooledGrid {
            logits: LogitGrid::new(h, w, classes, scores).unwrap(),
            gray: GrayImage::new(h, w, (0..h * w).map(|_| rng.random()).collect()).unwrap(),
        };
        let refinement = refine_grid(pooled, &t, &config, Exec::Sequential).unwrap();
        for (name, exec) in POLICIES {
            group.bench_with_input(BenchmarkId::new(name, classes), &refinement, |b, r| {
                b.iter(|| cg_solve(&r.system, &r.field.logits, config.cg_iters, exec).unwrap())
            });
        }
    }
    group.finish();
}

fn bench_run(c: &mut Criterion) {
    let scene = generate(&scene_spec()).unwrap();
    let inputs = scene.inputs().unwrap();
    let config = scene.spec.config();
    let mut group = c.benchmark_group("run");
    group.sample_size(10);
    for (name, exec) in POLICIES {
        group.bench_function(name, |b| {
            b.iter(|| run(black_box(&inputs), &config, RunOptions::default(), exec).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench_align, bench_cg, bench_run);
criterion_main!(benches);
