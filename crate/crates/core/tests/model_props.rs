mod common;

use multitap::corpus::InteractionRecord;
use multitap::diffkit::{grad_check, Tensor};
use multitap::model::{evaluate, train_target, AggregationMode, MultiTapModel, SourceReps, TrainConfig, TransferMode};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{toy, toy_cfg, TOY_TRIPLES};

#[test]
fn total_loss_gradients_match_finite_differences() {
    let start = std::time::Instant::now();
    for aggregation in AggregationMode::ALL {
        for transfer in TransferMode::ALL {
            let t = toy(7);
            let cfg = toy_cfg(aggregation, transfer);
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let mut model = MultiTapModel::new(&t.personas, &t.semantics, &t.ids, &cfg, &mut rng).unwrap();
            model.attach_source(&t.source).unwrap();
            let mut store = std::mem::take(&mut model.store);
            let report = grad_check(
                &mut store,
                |s| {
                    std::mem::swap(&mut model.store, s);
                    let r = model.loss_and_grad::<ChaCha8Rng>(&TOY_TRIPLES, transfer, 1.4, 0.5, None);
                    std::mem::swap(&mut model.store, s);
                    r.map(|p| p.total)
                },
                1e-4,
            )
            .unwrap();
            assert!(
                report.max_rel_error < 1e-4,
                "{aggregation}/{transfer}: {:?}",
                report.worst
            );
        }
    }
    assert!(start.elapsed().as_secs() < 10);
}

#[test]
fn zero_lambda_total_equals_recommendation_loss() {
    let t = toy(3);
    let cfg = toy_cfg(AggregationMode::SelfAttn, TransferMode::Doppelganger);
    let mut model = MultiTapModel::new(&t.personas, &t.semantics, &t.ids, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    model.attach_source(&t.source).unwrap();
    let p = model
        .loss_and_grad::<ChaCha8Rng>(&TOY_TRIPLES, TransferMode::Doppelganger, 0.0, 0.5, None)
        .unwrap();
    assert!(p.dpl > 0.0);
    assert_eq!(p.total, p.rec);
}

/// Interactions for the toy users; the last event of each user is held out.
fn toy_events() -> (Vec<InteractionRecord>, Vec<InteractionRecord>) {
    let mut train = Vec::new();
    let mut valid = Vec::new();
    for u in 0..4 {
        for (t, i) in [u, (u + 1) % 6, (u + 3) % 6].into_iter().enumerate() {
            let r = InteractionRecord {
                user: format!("u{u}"),
                item: format!("i{i}"),
                rating: 5.0,
                ts: t as i64,
            };
            if t == 2 { valid.push(r) } else { train.push(r) }
        }
    }
    (train, valid)
}

fn small_train_cfg(transfer: TransferMode, lambda: f64) -> TrainConfig {
    TrainConfig {
        transfer,
        lambda,
        epochs: 8,
        patience: 100,
        batch_size: 3,
        lr: 0.01,
        dropout: 0.1,
        ..toy_cfg(AggregationMode::SelfAttn, transfer)
    }
}

#[test]
fn zero_lambda_trace_matches_plain_training() {
    let t = toy(4);
    let (train, valid) = toy_events();
    let a = train_target(
        &t.personas,
        &t.semantics,
        &t.ids,
        Some(&t.source),
        &train,
        &valid,
        &small_train_cfg(TransferMode::Doppelganger, 0.0),
        9,
    )
    .unwrap();
    let b = train_target(
        &t.personas,
        &t.semantics,
        &t.ids,
        None,
        &train,
        &valid,
        &small_train_cfg(TransferMode::None, 0.0),
        9,
    )
    .unwrap();
    let rec = |o: &multitap::model::TrainOutcome| -> Vec<(f64, f64)> {
        o.history.iter().map(|e| (e.l_rec, e.valid_hr5)).collect()
    };
    assert_eq!(rec(&a), rec(&b));
    assert_eq!(a.model.store, b.model.store);
}

#[test]
fn training_is_deterministic_and_transfer_needs_overlap() {
    let t = toy(5);
    let (train, valid) = toy_events();
    let cfg = small_train_cfg(TransferMode::Doppelganger, 1.4);
    let run = || {
        let o = train_target(&t.personas, &t.semantics, &t.ids, Some(&t.source), &train, &valid, &cfg, 3).unwrap();
        let m = evaluate(&o.model, &train, &valid, &[1, 5]).unwrap();
        (o.history, m)
    };
    let (h1, m1) = run();
    let (h2, m2) = run();
    assert_eq!(h1, h2);
    assert_eq!(m1, m2);
    assert!(h1.iter().all(|e| e.l_dpl > 0.0));

    let stranger = SourceReps {
        users: vec!["nobody".into()],
        h: Tensor::zeros(&[1, 4]),
        v: Tensor::zeros(&[1, 3]),
    };
    let err = train_target(&t.personas, &t.semantics, &t.ids, Some(&stranger), &train, &valid, &cfg, 3);
    assert!(matches!(err, Err(multitap::Error::EmptyInput(_))));
}

fn argsort_desc(xs: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[b].total_cmp(&xs[a]).then(a.cmp(&b)));
    idx
}

proptest! {
    #[test]
    fn common_positive_scale_keeps_rankings(seed in 0u64..500, c in 0.01f64..50.0) {
        let t = toy(seed);
        let cfg = toy_cfg(AggregationMode::Mean, TransferMode::None);
        let model = MultiTapModel::new(&t.personas, &t.semantics, &t.ids, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let s = model.scorer().unwrap();
        let mut scaled = s.clone();
        scaled.zu.scale(c);
        scaled.zi.scale(c);
        for u in model.users() {
            prop_assert_eq!(argsort_desc(&s.scores(u).unwrap()), argsort_desc(&scaled.scores(u).unwrap()));
        }
    }
}
