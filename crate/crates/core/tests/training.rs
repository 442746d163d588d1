use chunkplay::diffusion::{standard_normal, training_loss_with, DiffusionSchedule, LossBatch, NoiseDraw};
use chunkplay::model::{load_checkpoint, DenoiserConfig, DenoiserParameters, InjectionStrategy};
use chunkplay::trainer::{AdamW, ExamplePool, InitParams, MetricRecord, TrainConfig, Trainer};
use chunkplay::worldsim::{generate_corpus, generate_episode, CorpusSpec, Dataset, EpisodeConfig};
use chunkplay::{seed, EntityKind, WorldConfig};

fn world() -> WorldConfig {
    WorldConfig { chunks: 3, ..WorldConfig::reduced() }
}

fn model(layers: usize) -> DenoiserConfig {
    DenoiserConfig { action: Some(InjectionStrategy::Adaln), layers, ..DenoiserConfig::reduced() }
}

fn corpus(entity: Option<EntityKind>, episodes: usize, seed: u64) -> Dataset {
    Dataset::new(generate_corpus(&CorpusSpec { entity, episodes, world: world(), seed }).unwrap()).unwrap()
}

fn config(stage: u8, steps: u64, layers: usize) -> TrainConfig {
    let m = model(layers);
    let mut c = if stage == 1 { TrainConfig::stage1(DenoiserConfig { action: None, ..m }) } else { TrainConfig::stage2(m) };
    c.steps = steps;
    c.batch_size = 4;
    c.learning_rate = 1e-3;
    c.warmup_steps = 5;
    c.checkpoint_every = steps;
    c
}

fn stage1_init(pool: &ExamplePool) -> InitParams {
    let t = Trainer::new(config(1, 1, 1), InitParams::Scratch, pool, None).unwrap();
    InitParams::Stage1(t.save().unwrap().0)
}

#[test]
fn memorizes_one_fixed_example() {
    let ep = generate_episode(&EpisodeConfig::new(EntityKind::GameCar, world()), 1).unwrap();
    let (cond, target) = (ep.chunks[0].to_signed(), ep.chunks[1].to_signed());
    let actions = [ep.actions.as_ref().unwrap()[0]];
    let cfg = model(2);
    let mut params = DenoiserParameters::<f32>::init(cfg, &mut seed::rng(3, &[])).unwrap();
    let mut rng = seed::rng(4, &[]);
    let n = cfg.chunk_values();
    let draw = NoiseDraw { t_cond: vec![40], t_target: vec![300], cond_noise: standard_normal(n, &mut rng), target_noise: standard_normal(n, &mut rng) };
    let batch = LossBatch { cond: &cond, target: &target, actions: &actions };
    let schedule = DiffusionSchedule::default();
    let mut opt = AdamW::new(&params);
    let first = training_loss_with(&params, &schedule, &batch, &draw).unwrap().loss;
    let mut last = first;
    for _ in 0..2000 {
        let out = training_loss_with(&params, &schedule, &batch, &draw).unwrap();
        last = out.loss;
        opt.step(&mut params, &out.grads, 1e-3, 0.0);
    }
    assert!((0.9..1.1).contains(&first), "initial ε-MSE {first}");
    assert!(last < 0.01, "ε-MSE after 2000 steps: {last}");
}

#[test]
fn loss_falls_on_a_small_corpus() {
    let generic = corpus(None, 8, 1);
    let pool = ExamplePool::new(&[&generic], 1).unwrap();
    let mut c = config(1, 300, 1);
    c.batch_size = 8;
    let mut t = Trainer::new(c, InitParams::Scratch, &pool, None).unwrap();
    let losses: Vec<f64> = (0..300).map(|_| t.train_step(&pool).unwrap().loss).collect();
    let head = losses[..10].iter().sum::<f64>() / 10.0;
    let tail = losses[250..].iter().sum::<f64>() / 50.0;
    assert!(tail < 0.5 * head, "loss {head:.3} -> {tail:.3}");
    assert!(losses.iter().all(|l| l.is_finite()));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let generic = corpus(None, 4, 1);
    let s1 = ExamplePool::new(&[&generic], 1).unwrap();
    let (game, real) = (corpus(Some(EntityKind::GameCar), 4, 2), corpus(Some(EntityKind::RealPedestrian), 4, 3));
    let pool = ExamplePool::new(&[&game, &real], 2).unwrap();
    let init = stage1_init(&s1);
    let mut c = config(2, 6, 1);
    c.checkpoint_every = 3;

    let dir = tempfile::tempdir().unwrap();
    let full = Trainer::new(c, init.clone(), &pool, Some(&dir.path().join("full"))).unwrap().run(&pool).unwrap();
    assert_eq!(full.checkpoints.len(), 2);

    let mut half = Trainer::new(c, init, &pool, Some(&dir.path().join("split"))).unwrap();
    for _ in 0..3 {
        half.train_step(&pool).unwrap();
    }
    let (_, path) = half.save().unwrap();
    // a crashed run may have logged steps beyond its last checkpoint
    half.train_step(&pool).unwrap();
    let ckpt = load_checkpoint(&path.unwrap(), None).unwrap();
    let resumed = Trainer::resume(c, ckpt, &pool, Some(&dir.path().join("split"))).unwrap().run(&pool).unwrap();

    assert_eq!(resumed.params, full.params);
    // checkpoints keep a thinned history; metrics.log is the full record
    assert_eq!(resumed.metrics[resumed.metrics.len() - 3..], full.metrics[3..]);
    let log = |run: &str| std::fs::read_to_string(dir.path().join(run).join("metrics.log")).unwrap();
    assert_eq!(log("split"), log("full"));
    let records: Vec<MetricRecord> = log("full").lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.iter().map(|r| r.step).collect::<Vec<_>>(), vec![1, 2, 3, 4, 5, 6]);

    let mut other = c;
    other.learning_rate *= 2.0;
    let ckpt = load_checkpoint(&full.checkpoints[0], None).unwrap();
    assert!(Trainer::resume(other, ckpt, &pool, None).is_err());
}

#[test]
fn same_seed_same_weights() {
    let game = corpus(Some(EntityKind::GameCar), 3, 5);
    let generic = corpus(None, 3, 6);
    let s1 = ExamplePool::new(&[&generic], 1).unwrap();
    let pool = ExamplePool::new(&[&game], 2).unwrap();
    let run = |seed: u64| {
        let mut c = config(2, 4, 1);
        c.seed = seed;
        Trainer::new(c, stage1_init(&s1), &pool, None).unwrap().run(&pool).unwrap().params
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}
