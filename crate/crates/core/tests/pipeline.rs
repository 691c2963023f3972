use moener::checkpoint::{pool_from_bytes, pool_to_bytes};
use moener::corpus::Layer;
use moener::distant::{label_corpus, load_gazetteer};
use moener::eval::evaluate_tags;
use moener::fairness::FairConfig;
use moener::moe::{moe_loss, train_moe, ExpertPool};
use moener::synth::{generate, SynthSpec};
use moener::tagger::{Dims, TrainConfig, Vocabulary};
use moener::{Pool, Pool32};

fn small_dims() -> Dims {
    Dims {
        window: 1,
        emb_dim: 8,
        hidden_dim: 16,
    }
}

#[test]
fn full_gazetteer_reproduces_noise_free_gold() {
    let s = generate(&SynthSpec {
        docs_per_cluster: 10,
        seed: 2,
        ..SynthSpec::default()
    })
    .unwrap();
    let gaz = load_gazetteer(&s.gazetteer_tsv(), s.corpus.label_set()).unwrap();
    assert_eq!(gaz.duplicates, 0);
    let relabeled = label_corpus(s.corpus.clone().without_layer(Layer::Distant), &gaz.gazetteer).unwrap();
    let report = evaluate_tags(
        &relabeled,
        relabeled.layer(Layer::Gold).unwrap(),
        relabeled.layer(Layer::Distant).unwrap(),
    )
    .unwrap();
    assert_eq!(report.overall.f1, 1.0);
}

#[test]
fn mixture_training_lowers_the_objective() {
    let s = generate(&SynthSpec {
        num_clusters: 2,
        docs_per_cluster: 20,
        noise_rate: 0.1,
        seed: 1,
        ..SynthSpec::default()
    })
    .unwrap();
    let vocab = Vocabulary::build(s.corpus.documents());
    let mut pool = Pool::init(vocab, s.corpus.label_set().clone(), 2, small_dims(), 1).unwrap();
    let before = moe_loss(&pool, &s.corpus, Layer::Distant).unwrap();
    let cfg = TrainConfig {
        seed: 1,
        ..TrainConfig::default()
    };
    let log = train_moe(
        &mut pool,
        &s.corpus,
        Layer::Distant,
        4,
        Some(&FairConfig::default()),
        &cfg,
    )
    .unwrap();
    let after = moe_loss(&pool, &s.corpus, Layer::Distant).unwrap();
    assert_eq!(log.len(), 4);
    assert!(after < before, "{after} >= {before}");
    assert!(log.iter().all(|r| r.scaling.is_some()));
}

#[test]
fn single_precision_pipeline_is_finite_and_round_trips() {
    let s = generate(&SynthSpec {
        num_clusters: 2,
        docs_per_cluster: 10,
        noise_rate: 0.2,
        seed: 4,
        ..SynthSpec::default()
    })
    .unwrap();
    let vocab = Vocabulary::build(s.corpus.documents());
    let mut pool = Pool32::init(vocab, s.corpus.label_set().clone(), 2, small_dims(), 4).unwrap();
    train_moe(&mut pool, &s.corpus, Layer::Distant, 2, None, &TrainConfig::default()).unwrap();
    assert!(pool.experts().iter().all(|e| e.is_finite()));
    assert!(moe_loss(&pool, &s.corpus, Layer::Distant).unwrap().is_finite());
    let back: ExpertPool<f32> = pool_from_bytes(&pool_to_bytes(&pool)).unwrap();
    assert_eq!(back, pool);
    assert!(pool_from_bytes::<f64>(&pool_to_bytes(&pool)).is_err());
}

#[test]
fn fair_rounds_break_up_identical_experts() {
    // identical experts tie on every document; each round the trained experts
    // become distinguishable, so the fair assignment reaches one more expert
    let s = generate(&SynthSpec {
        num_clusters: 4,
        docs_per_cluster: 15,
        noise_rate: 0.3,
        seed: 6,
        ..SynthSpec::default()
    })
    .unwrap();
    let vocab = Vocabulary::build(s.corpus.documents());
    let mut pool = Pool::init_identical(vocab, s.corpus.label_set().clone(), 4, small_dims(), 6).unwrap();
    let cfg = TrainConfig {
        seed: 6,
        ..TrainConfig::default()
    };
    let log = train_moe(
        &mut pool,
        &s.corpus,
        Layer::Distant,
        4,
        Some(&FairConfig::default()),
        &cfg,
    )
    .unwrap();
    assert_eq!(log[0].assignment.histogram(), vec![60, 0, 0, 0]);
    let used: Vec<usize> = log
        .iter()
        .map(|r| r.assignment.histogram().iter().filter(|&&n| n > 0).count())
        .collect();
    assert!(used.windows(2).all(|w| w[1] >= w[0]), "{used:?}");
    assert_eq!(*used.last().unwrap(), 4, "{used:?}");
}
