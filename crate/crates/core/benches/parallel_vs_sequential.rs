//! Sequential vs data-parallel execution of the hot paths. Build with
//! `--no-default-features` to measure the sequential fallback of `par`.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use reloc::geometry::Intrinsics;
use reloc::par;
use reloc::pose_solver::{ransac_localize, score_hypothesis, RansacConfig};
use reloc::predictor::{sample_grid, CorrespondenceSet, OracleConfig, OracleSource, PredictionSource, WorldBox};
use reloc::synthetic::SyntheticScene;

fn setup() -> (Vec<CorrespondenceSet>, Vec<reloc::geometry::Pose>, Intrinsics) {
    let k = Intrinsics::seven_scenes();
    let scene = SyntheticScene::default();
    let frames = scene.frames(&k, "bench", "seq-01", 8, 0);
    let b = scene.bounds();
    let source = OracleSource::new(OracleConfig {
        noise_sigma_mm: 10.0,
        outlier_fraction: 0.3,
        outlier_bounds: WorldBox { min: b.min, max: b.max },
        rng_seed: 0,
    })
    .unwrap();
    let corrs = frames
        .iter()
        .map(|f| {
            let (p, m) = source.predict(f).unwrap();
            sample_grid(&p, &m, 40, 40).unwrap()
        })
        .collect();
    (corrs, frames.iter().map(|f| f.pose).collect(), k)
}

fn localize_batch(c: &mut Criterion) {
    let (corrs, _, k) = setup();
    let cfg = RansacConfig::default();
    let mut g = c.benchmark_group("localize_8_frames");
    g.sample_size(10);
    g.bench_function("sequential", |b| {
        b.iter(|| {
            par::with_threads(1, || {
                corrs
                    .iter()
                    .map(|cs| ransac_localize(cs, &k, &cfg).unwrap().inlier_count)
                    .sum::<usize>()
            })
        })
    });
    for threads in [2, 4, 0] {
        let label = if threads == 0 { "all".to_string() } else { threads.to_string() };
        g.bench_with_input(BenchmarkId::new("parallel", label), &threads, |b, &t| {
            b.iter(|| {
                par::with_threads(t, || {
                    par::map_slice(&corrs, |cs| ransac_localize(cs, &k, &cfg).unwrap().inlier_count)
                        .into_iter()
                        .sum::<usize>()
                })
            })
        });
    }
    g.finish();
}

fn scoring(c: &mut Criterion) {
    let (corrs, poses, k) = setup();
    let cs = &corrs[0];
    // 256 hypotheses scored against 1600 correspondences
    let hyps: Vec<_> = (0..256).map(|i| poses[i % poses.len()]).collect();
    let mut g = c.benchmark_group("score_256_hypotheses");
    g.bench_function("sequential", |b| {
        b.iter(|| hyps.iter().map(|h| score_hypothesis(h, cs, &k, 10.0).count).sum::<usize>())
    });
    g.bench_function("parallel", |b| {
        b.iter(|| {
            par::map_slice(&hyps, |h| score_hypothesis(h, cs, &k, 10.0).count)
                .into_iter()
                .sum::<usize>()
        })
    });
    g.finish();
}

criterion_group!(benches, localize_batch, scoring);
criterion_main!(benches);
