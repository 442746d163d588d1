use std::hint::black_box;

use chunkplay::diffusion::SamplerConfig;
use chunkplay::evaluation::{estimate_state, OracleConfig};
use chunkplay::model::{patchify_chunk, DenoiserInput, DenoiserConfig, DenoiserParameters, InjectionStrategy};
use chunkplay::rollout::Engine;
use chunkplay::trainer::{ExamplePool, InitParams, TrainConfig, Trainer};
use chunkplay::worldsim::{generate_corpus, generate_episode, CorpusSpec, Dataset, EpisodeConfig};
use chunkplay::{seed, ActionCommand, EntityKind, WorldConfig};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

fn config() -> DenoiserConfig {
    DenoiserConfig { action: Some(InjectionStrategy::Adaln), ..DenoiserConfig::reduced() }
}

fn forward(c: &mut Criterion) {
    let cfg = config();
    let params = DenoiserParameters::<f32>::init(cfg, &mut seed::rng(1, &[])).unwrap();
    let ep = generate_episode(&EpisodeConfig::new(EntityKind::GameCar, WorldConfig::reduced()), 3).unwrap();
    let layout = cfg.layout();
    let cond = patchify_chunk(&layout, &ep.chunks[0].to_signed()).unwrap();
    let x = patchify_chunk(&layout, &ep.chunks[1].to_signed()).unwrap();
    for batch in [1usize, 16] {
        let (cond, x) = (cond.repeat(batch), x.repeat(batch));
        let actions = vec![ActionCommand::Left; batch];
        let (tc, t) = (vec![0; batch], vec![500; batch]);
        c.bench_function(&format!("denoiser_forward_b{batch}"), |b| {
            b.iter(|| black_box(params.forward(&DenoiserInput { cond: &cond, target: &x, actions: &actions, t_cond: &tc, t_target: &t }).unwrap()))
        });
    }
}

fn train_step(c: &mut Criterion) {
    let world = WorldConfig::reduced();
    let game = Dataset::new(generate_corpus(&CorpusSpec { entity: Some(EntityKind::GameCar), episodes: 8, world, seed: 1 }).unwrap()).unwrap();
    let generic = Dataset::new(generate_corpus(&CorpusSpec { entity: None, episodes: 8, world, seed: 2 }).unwrap()).unwrap();
    let s1 = ExamplePool::new(&[&generic], 1).unwrap();
    let s1_ckpt = {
        let mut c1 = TrainConfig::stage1(DenoiserConfig { action: None, ..config() });
        c1.steps = 1;
        c1.batch_size = 1;
        Trainer::new(c1, InitParams::Scratch, &s1, None).unwrap().save().unwrap().0
    };
    let pool = ExamplePool::new(&[&game], 2).unwrap();
    let mut c2 = TrainConfig::stage2(config());
    c2.batch_size = 16;
    c2.steps = u64::MAX;
    let mut trainer = Trainer::new(c2, InitParams::Stage1(s1_ckpt), &pool, None).unwrap();
    c.bench_function("train_step_b16", |b| b.iter(|| black_box(trainer.train_step(&pool).unwrap())));
}

fn ddim_chunk(c: &mut Criterion) {
    let params = DenoiserParameters::<f32>::init(config(), &mut seed::rng(1, &[])).unwrap();
    let engine = Engine::new(params, SamplerConfig { num_steps: 20, ..SamplerConfig::default() }, "bench").unwrap();
    let ep = generate_episode(&EpisodeConfig::new(EntityKind::GameCar, WorldConfig::reduced()), 3).unwrap();
    let mut group = c.benchmark_group("ddim");
    group.sample_size(10);
    group.bench_function("chunk_20_steps", |b| {
        b.iter(|| black_box(engine.generate(&[&ep.chunks[0]], &[ActionCommand::Forward], &[7]).unwrap()))
    });
    group.finish();
}

fn oracle(c: &mut Criterion) {
    let world = WorldConfig::reduced();
    let ep = generate_episode(&EpisodeConfig::new(EntityKind::RealBicycle, world), 5).unwrap();
    let spec = EntityKind::RealBicycle.spec();
    let oracle = OracleConfig::default();
    c.bench_function("oracle_estimate_chunk", |b| {
        b.iter_batched(
            || (ep.chunks[2].clone(), ep.chunks[1].last_frame().clone()),
            |(chunk, prev)| black_box(estimate_state(&chunk, Some(&prev), &spec, &world, &oracle)),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, forward, train_step, ddim_chunk, oracle);
criterion_main!(benches);
