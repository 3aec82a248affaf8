use criterion::{criterion_group, criterion_main, Criterion};
use occgen_bench::fixture;
use occgen_core::diffusion::{generate, stage1_loss_and_grads};
use occgen_core::ors::{cast_rays, ors_project, FeatureSource};
use occgen_core::reward::{reward_and_grads, FeatureExtractor};
use occgen_core::rng;

fn bench(c: &mut Criterion) {
    let (model, clip) = fixture(3);
    let cfg = &model.config;
    let frame = &clip.clip.frames[0];

    c.bench_function("ors_project", |b| {
        let rays = cast_rays(&frame.camera, cfg.ors.step, cfg.ors.n_sample).unwrap();
        b.iter(|| ors_project(&frame.grid, &rays, &model.tables, FeatureSource::Foreground))
    });

    let eps = rng::normal_tensor(&mut rng::prng(1), clip.video.shape().to_vec(), 1.0);
    c.bench_function("stage1_step", |b| {
        b.iter(|| stage1_loss_and_grads(&model, &clip, 50, &eps, false).unwrap())
    });

    let mut slow = c.benchmark_group("sampling");
    slow.sample_size(10);
    slow.bench_function("generate_20_steps", |b| {
        b.iter(|| generate(&model, &clip, 20, cfg.diffusion.cfg_scale, 0).unwrap())
    });
    let mut adapted = model.clone();
    occgen_core::reward::init_adapters(&mut adapted.params, cfg.reward.rank, 0).unwrap();
    let extractor = FeatureExtractor::new(cfg.reward.extractor_seed);
    slow.bench_function("reward_update_10_steps", |b| {
        b.iter(|| reward_and_grads(&adapted, &clip, &extractor, 0).unwrap())
    });
    slow.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
