use std::collections::{BTreeMap, BTreeSet, HashMap};

use poolbias::data::{LabeledDataset, RankedList, Run};
use poolbias::retriever::Retriever;
use poolbias::scorer::{Architecture, DifferentiableScorer};
use poolbias::training::{
    denoise_candidates, init_models, log_to_csv, naive_train, train, FeatureStore, Regime, TrainConfig, Trainer,
};
use poolbias::world::{generate_world, simulate_pooling, PoolingMode, PoolingParams, Split, World, WorldConfig};

struct Fixture {
    world: World,
    dataset: LabeledDataset,
    candidates: Run,
}

fn fixture() -> Fixture {
    let cfg = WorldConfig {
        n_docs: 300,
        n_train: 40,
        n_dev: 5,
        n_test: 5,
        feature_dim: 6,
        latent_dim: 4,
        ..WorldConfig::default()
    };
    let mut world = generate_world(&cfg).unwrap();
    let pooler = Retriever::feature_subset(2, 6).unwrap();
    let pooled = simulate_pooling(
        &mut world,
        &pooler,
        PoolingParams {
            depth: 10,
            budget: Some(1),
            mode: PoolingMode::Deterministic,
        },
    )
    .unwrap();
    let strong = Retriever::oracle_noisy(&world, 0.6, 1).unwrap();
    let candidates = world
        .split(Split::Train)
        .iter()
        .map(|q| (q.query_id.clone(), strong.retrieve(q, &world.corpus, 50).unwrap()))
        .collect();
    Fixture {
        world,
        dataset: pooled.dataset,
        candidates,
    }
}

fn config(regime: Regime, steps: usize) -> TrainConfig {
    TrainConfig {
        regime,
        steps,
        batch_size: 8,
        seed: 11,
        ..TrainConfig::default()
    }
}

#[test]
fn constant_selection_cet_follows_naive_step_by_step() {
    let fx = fixture();
    let features = FeatureStore::from_world(&fx.world);
    let (r, _) = init_models(Architecture::Linear, features.pair_dim(), 3).unwrap();
    let flat_s = DifferentiableScorer::zeros(Architecture::Linear, features.pair_dim());

    let naive_cfg = config(Regime::Naive, 100);
    let cet_cfg = TrainConfig {
        regime: Regime::Cet,
        freeze_selection: true,
        ..naive_cfg.clone()
    };
    let mut naive = Trainer::new(&features, &fx.dataset, &fx.candidates, r.clone(), None, &naive_cfg).unwrap();
    let mut cet = Trainer::new(&features, &fx.dataset, &fx.candidates, r, Some(flat_s), &cet_cfg).unwrap();
    for step in 0..100 {
        let a = naive.step().unwrap();
        let b = cet.step().unwrap();
        assert_eq!(b.mean_w_r, 1.0, "step {step}");
        let max_diff = naive
            .relevance()
            .params()
            .iter()
            .zip(cet.relevance().params())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(max_diff <= 1e-12, "step {step}: {max_diff}");
        assert!((a.loss_r - b.loss_r).abs() <= 1e-12);
    }
}

#[test]
fn zero_steps_leave_the_model_unchanged() {
    let fx = fixture();
    let features = FeatureStore::from_world(&fx.world);
    let (r, s) = init_models(Architecture::Linear, features.pair_dim(), 3).unwrap();
    for regime in [Regime::Naive, Regime::Cet, Regime::Mismatch] {
        let out = train(&features, &fx.dataset, &fx.candidates, r.clone(), s.clone(), &config(regime, 0), None).unwrap();
        assert_eq!(out.relevance, r);
        assert!(out.log.is_empty());
    }
}

#[test]
fn training_is_deterministic_per_seed() {
    let fx = fixture();
    let features = FeatureStore::from_world(&fx.world);
    let (r, s) = init_models(Architecture::Linear, features.pair_dim(), 3).unwrap();
    let cfg = config(Regime::Cet, 60);
    let a = train(&features, &fx.dataset, &fx.candidates, r.clone(), s.clone(), &cfg, None).unwrap();
    let b = train(&features, &fx.dataset, &fx.candidates, r.clone(), s.clone(), &cfg, None).unwrap();
    assert_eq!(log_to_csv(&a.log), log_to_csv(&b.log));
    assert_eq!(a.relevance, b.relevance);
    assert_eq!(a.selection, b.selection);
    let other = train(
        &features,
        &fx.dataset,
        &fx.candidates,
        r,
        s,
        &TrainConfig { seed: 12, ..cfg },
        None,
    )
    .unwrap();
    assert_ne!(a.relevance, other.relevance);
}

#[test]
fn mismatch_with_the_same_candidates_is_naive() {
    let fx = fixture();
    let features = FeatureStore::from_world(&fx.world);
    let (r, s) = init_models(Architecture::Linear, features.pair_dim(), 3).unwrap();
    let naive = train(&features, &fx.dataset, &fx.candidates, r.clone(), s.clone(), &config(Regime::Naive, 50), None)
        .unwrap();
    let mismatch = train(&features, &fx.dataset, &fx.candidates, r, s, &config(Regime::Mismatch, 50), None).unwrap();
    assert_eq!(naive.relevance, mismatch.relevance);
}

#[test]
fn denoise_thresholds() {
    let fx = fixture();
    let features = FeatureStore::from_world(&fx.world);
    let (r, _) = init_models(Architecture::Linear, features.pair_dim(), 3).unwrap();
    let teacher = naive_train(&features, &fx.dataset, &fx.candidates, r, &config(Regime::Naive, 100), None)
        .unwrap()
        .relevance;

    let (kept, fallback) = denoise_candidates(&features, &fx.dataset, &fx.candidates, &teacher, 50, 1.0).unwrap();
    assert!(fallback.is_empty());
    for (qid, list) in &kept {
        let positives = fx.dataset.positives(qid).unwrap();
        let pool: Vec<&str> = fx.candidates[qid]
            .top(50)
            .iter()
            .map(|e| e.doc_id.as_str())
            .filter(|d| !positives.contains(*d))
            .collect();
        assert_eq!(list.len(), pool.len() - 1, "{qid}");
        let best = pool
            .iter()
            .max_by(|a, b| {
                let sa = features.score(&teacher, qid, a).unwrap();
                let sb = features.score(&teacher, qid, b).unwrap();
                sa.total_cmp(&sb)
            })
            .unwrap();
        assert!(list.doc_ids().all(|d| d != *best));
    }

    let (tiny, fallback) = denoise_candidates(&features, &fx.dataset, &fx.candidates, &teacher, 50, 1e-9).unwrap();
    assert_eq!(fallback.len(), fx.dataset.len());
    assert!(tiny.values().all(|l| l.len() == 1));
}

#[test]
fn fixed_batch_loss_decreases_on_a_separable_toy() {
    // One query, one positive, one negative; the triple stream repeats the
    // same pair so every step sees the same batch.
    let q = vec![1.0, 0.0];
    let docs = [("pos".to_string(), vec![1.0, 0.2]), ("neg".to_string(), vec![-1.0, 0.3])];
    let features = FeatureStore::new(
        docs.iter().map(|(d, v)| (d.as_str(), v.as_slice())).collect::<HashMap<_, _>>(),
        [("q", q.as_slice())].into_iter().collect(),
    );
    let dataset = LabeledDataset::new(BTreeMap::from([("q".to_string(), BTreeSet::from(["pos".to_string()]))]));
    let candidates = Run::from([(
        "q".to_string(),
        RankedList::from_scores("q", [("neg", 2.0), ("pos", 1.0)]).unwrap(),
    )]);
    let cfg = TrainConfig {
        steps: 10,
        batch_size: 1,
        lr: 1e-3,
        ..TrainConfig::default()
    };
    let r = DifferentiableScorer::new(Architecture::Linear, 6, 4).unwrap();
    let out = naive_train(&features, &dataset, &candidates, r, &cfg, None).unwrap();
    assert_eq!(out.log.len(), 10);
    for w in out.log.windows(2) {
        assert!(w[1].loss_r < w[0].loss_r, "{} !< {}", w[1].loss_r, w[0].loss_r);
    }
}

#[test]
fn regimes_share_the_triple_stream_for_a_seed() {
    let fx = fixture();
    let features = FeatureStore::from_world(&fx.world);
    let (r, s) = init_models(Architecture::Linear, features.pair_dim(), 3).unwrap();
    let mut naive =
        Trainer::new(&features, &fx.dataset, &fx.candidates, r.clone(), None, &config(Regime::Naive, 30)).unwrap();
    let mut cet = Trainer::new(&features, &fx.dataset, &fx.candidates, r, Some(s), &config(Regime::Cet, 30)).unwrap();
    for _ in 0..30 {
        naive.step().unwrap();
        cet.step().unwrap();
        assert_eq!(naive.last_batch(), cet.last_batch());
    }
    assert_ne!(naive.relevance(), cet.relevance());
}
