use alignflow_core::alignment::{log_prob_grid, mas_search};
use alignflow_core::flows::stack_forward;
use alignflow_core::harness::{
    duration_batches, eval_alignment, generate_corpus, score_durations, train_main, train_toy,
    CorpusSpec, DurationLaw, ExperimentConfig, ToyModel,
};
use alignflow_core::numerics::{Rng, Tensor};
use alignflow_core::Error;
use proptest::prelude::*;

fn quick(seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.train.seed = seed;
    c.train.steps_main = 40;
    c.train.steps_duration = 10;
    c.train.eval_every = 20;
    c.train.dims.hidden = 16;
    c.train.dims.ffn = 16;
    c.train.dims.duration_filters = 8;
    c.corpus.instances = 8;
    c.corpus.held_out = 4;
    c
}

fn snapshot(model: &ToyModel, ids: &[alignflow_core::numerics::ParamId]) -> Vec<Vec<u64>> {
    ids.iter()
        .map(|id| {
            model
                .store
                .get(*id)
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect()
        })
        .collect()
}

#[test]
fn corpus_is_seed_deterministic() {
    let spec = CorpusSpec {
        noise: 0.3,
        speakers: 2,
        ..CorpusSpec::default()
    };
    let a = generate_corpus(&spec, &Rng::new(17)).unwrap();
    let b = generate_corpus(&spec, &Rng::new(17)).unwrap();
    assert_eq!(a, b);
    let c = generate_corpus(&spec, &Rng::new(18)).unwrap();
    assert_ne!(a.instances, c.instances);
}

#[test]
fn duration_histogram_within_three_sigma() {
    let spec = CorpusSpec {
        vocab: 2,
        laws: vec![
            DurationLaw { min: 1, max: 4 },
            DurationLaw { min: 2, max: 6 },
        ],
        min_tokens: 10,
        max_tokens: 10,
        instances: 2000,
        held_out: 0,
        ..CorpusSpec::default()
    };
    let corpus = generate_corpus(&spec, &Rng::new(3)).unwrap();
    for (tok, law) in spec.laws.iter().enumerate() {
        let samples: Vec<usize> = corpus
            .instances
            .iter()
            .flat_map(|i| {
                i.tokens
                    .iter()
                    .zip(&i.durations)
                    .filter(|(t, _)| **t == tok)
                    .map(|(_, d)| *d)
            })
            .collect();
        let n = samples.len() as f64;
        assert!(n >= 8000.0);
        let p = 1.0 / (law.max - law.min + 1) as f64;
        for k in law.min..=law.max {
            let count = samples.iter().filter(|d| **d == k).count() as f64;
            let sigma = (n * p * (1.0 - p)).sqrt();
            assert!(
                (count - n * p).abs() <= 3.0 * sigma,
                "token {tok}, duration {k}: {count} of {n}"
            );
        }
        assert!(samples.iter().all(|d| (law.min..=law.max).contains(d)));
    }
}

#[test]
fn prototype_prior_recovers_every_alignment() {
    let corpus = generate_corpus(&CorpusSpec::default(), &Rng::new(4)).unwrap();
    let mut found = Vec::new();
    for inst in &corpus.held_out {
        let (c, j) = (inst.frames.rows(), inst.frames.cols());
        let frames = Tensor::new(
            &[j, c],
            (0..j)
                .flat_map(|f| (0..c).map(move |ch| (f, ch)))
                .map(|(f, ch)| inst.frames.at(ch, f))
                .collect(),
        )
        .unwrap();
        let mean = Tensor::new(
            &[inst.tokens.len(), c],
            inst.tokens
                .iter()
                .flat_map(|t| (0..c).map(|ch| corpus.prototypes.at(*t, ch)))
                .collect(),
        )
        .unwrap();
        let std = Tensor::full(mean.shape(), 1.0);
        let grid = log_prob_grid(&frames, &mean, &std).unwrap();
        found.push(mas_search(&grid, 0.0, &mut Rng::new(0)).unwrap().0);
    }
    let score = score_durations(
        found
            .iter()
            .map(|a| a.durations())
            .zip(corpus.held_out.iter().map(|i| i.durations.as_slice())),
    )
    .unwrap();
    assert_eq!(score.exact_match, 1.0);
    assert_eq!(score.mae, 0.0);
}

#[test]
fn zero_main_steps_leave_parameters_alone() {
    let cfg = quick(1);
    let corpus = generate_corpus(&cfg.corpus, &Rng::new(1)).unwrap();
    let mut model = ToyModel::new(&cfg).unwrap();
    let before = model.store.clone();
    let mut train = cfg.train.clone();
    train.steps_main = 0;
    let history = train_main(&mut model, &train, &corpus).unwrap();
    assert!(history.is_empty());
    for ((_, a), (_, b)) in before.iter().zip(model.store.iter()) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn short_run_is_finite_and_deterministic() {
    let run = || {
        let cfg = quick(2);
        let corpus = generate_corpus(&cfg.corpus, &Rng::new(2)).unwrap();
        let mut model = ToyModel::new(&cfg).unwrap();
        let h = train_toy(&mut model, &cfg.train, &corpus).unwrap();
        (h, snapshot(&model, &model.store.ids().collect::<Vec<_>>()))
    };
    let (a, pa) = run();
    let (b, pb) = run();
    assert_eq!(a, b);
    assert_eq!(pa, pb);
    assert_eq!(a.main.len(), 40);
    assert_eq!(a.duration.len(), 10);
    assert!(a.main.iter().all(|r| r.loss.is_finite()));
    assert_eq!(a.main.iter().filter(|r| r.eval.is_some()).count(), 2);
    assert_eq!(a.main[1].noise_scale, 0.01 - 2e-6);
}

#[test]
fn non_finite_frames_abort_with_the_step() {
    let mut cfg = quick(3);
    cfg.corpus.prototype_scale = 1e200;
    let corpus = generate_corpus(&cfg.corpus, &Rng::new(3)).unwrap();
    let mut model = ToyModel::new(&cfg).unwrap();
    match train_main(&mut model, &cfg.train, &corpus) {
        Err(Error::Diverged { step, detail }) => {
            assert_eq!(step, 0);
            assert!(!detail.is_empty());
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn without_transformer_attention_is_frozen_and_inert() {
    let mut cfg = quick(4);
    cfg.train.transformer = false;
    let corpus = generate_corpus(&cfg.corpus, &Rng::new(4)).unwrap();
    let mut model = ToyModel::new(&cfg).unwrap();
    let attn = model.attention_params();
    assert!(!attn.is_empty());
    let before = snapshot(&model, &attn);
    train_toy(&mut model, &cfg.train, &corpus).unwrap();
    assert_eq!(snapshot(&model, &attn), before);

    let x = &corpus.instances[0].frames;
    let (z, ld, _) = stack_forward(&model.flows, &model.store, x, None).unwrap();
    let mut rng = Rng::new(40);
    for id in &attn {
        let n = model.store.get(*id).len();
        let vals: Vec<f64> = (0..n).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
        model.store.set(*id, &vals).unwrap();
    }
    let (z2, ld2, _) = stack_forward(&model.flows, &model.store, x, None).unwrap();
    assert_eq!(z, z2);
    assert_eq!(ld, ld2);
}

#[test]
fn without_alignment_noise_the_scale_is_zero() {
    let mut cfg = quick(5);
    cfg.train.alignment_noise = false;
    let corpus = generate_corpus(&cfg.corpus, &Rng::new(5)).unwrap();
    let mut model = ToyModel::new(&cfg).unwrap();
    let h = train_main(&mut model, &cfg.train, &corpus).unwrap();
    assert!(h.iter().all(|r| r.noise_scale == 0.0));
}

#[test]
fn without_adversary_duration_is_deterministic_mse() {
    let mut cfg = quick(6);
    cfg.train.adversarial = false;
    let corpus = generate_corpus(&cfg.corpus, &Rng::new(6)).unwrap();
    let mut model = ToyModel::new(&cfg).unwrap();
    assert!(!model.generator.is_stochastic());
    let disc = model.discriminator.params();
    let before = snapshot(&model, &disc);
    let h = train_toy(&mut model, &cfg.train, &corpus).unwrap();
    assert!(h
        .duration
        .iter()
        .all(|r| r.loss_d == 0.0 && r.loss_g_adv == 0.0));
    assert_eq!(snapshot(&model, &disc), before);
}

#[test]
fn speakers_condition_flows_only_when_enabled() {
    let mut cfg = quick(7);
    cfg.corpus.speakers = 3;
    let model = ToyModel::new(&cfg).unwrap();
    assert!(model.flows_conditioned());
    assert!(model.generator.config().condition_width.is_some());
    cfg.train.speaker_conditioning = false;
    let model = ToyModel::new(&cfg).unwrap();
    assert!(!model.flows_conditioned());
    assert!(model.speakers.is_some());
}

#[test]
fn multi_speaker_run_produces_conditioned_batches() {
    let mut cfg = quick(8);
    cfg.corpus.speakers = 2;
    cfg.train.steps_main = 10;
    let corpus = generate_corpus(&cfg.corpus, &Rng::new(8)).unwrap();
    let mut model = ToyModel::new(&cfg).unwrap();
    train_main(&mut model, &cfg.train, &corpus).unwrap();
    let batches = duration_batches(&model, &corpus.instances, 3).unwrap();
    assert_eq!(batches.len(), 3);
    assert!(batches.iter().all(|b| b.conditions.is_some()));
    let score = eval_alignment(&model, &corpus.held_out).unwrap();
    assert!(score.exact_match >= 0.0 && score.mae.is_finite());
}

#[test]
fn toy_corpus_duration_loss_drops_fivefold() {
    let mut cfg = quick(9);
    cfg.train.steps_main = 2000;
    cfg.train.steps_duration = 2000;
    cfg.train.eval_every = 2000;
    let corpus = generate_corpus(&cfg.corpus, &Rng::new(9)).unwrap();
    let mut model = ToyModel::new(&cfg).unwrap();
    let h = train_toy(&mut model, &cfg.train, &corpus).unwrap();
    let first = h.duration[0].loss_g_mse;
    let last = h.duration.last().unwrap().loss_g_mse;
    assert!(last * 5.0 <= first, "{first} -> {last}");
}

fn arb_config() -> impl Strategy<Value = ExperimentConfig> {
    (
        any::<u64>(),
        1usize..5000,
        1usize..100,
        1e-6f64..1e-1,
        0.0f64..0.999,
        any::<bool>(),
        any::<bool>(),
        prop::collection::vec((1usize..4, 0usize..4), 2..6),
        0.0f64..2.0,
    )
        .prop_map(
            |(seed, main, dur, lr, beta1, noise, transformer, laws, obs)| {
                let mut c = ExperimentConfig::default();
                c.train.seed = seed;
                c.train.steps_main = main + dur;
                c.train.steps_duration = dur;
                c.train.optimizer.lr = lr;
                c.train.optimizer.beta1 = beta1;
                c.train.alignment_noise = noise;
                c.train.transformer = transformer;
                c.corpus.vocab = laws.len();
                c.corpus.laws = laws
                    .iter()
                    .map(|(lo, span)| DurationLaw {
                        min: *lo,
                        max: lo + span,
                    })
                    .collect();
                c.corpus.noise = obs;
                c
            },
        )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_text_round_trips(c in arb_config()) {
        let back = ExperimentConfig::from_text(&c.to_text()).unwrap();
        prop_assert_eq!(back, c);
    }
}
