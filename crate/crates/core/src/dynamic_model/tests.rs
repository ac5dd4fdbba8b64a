use std::collections::{BTreeMap, BTreeSet};

use super::*;
use crate::catalog::{Article, AvailabilityWindow, Catalog, SequenceEvent};
use crate::exec::Execution;
use crate::numerics::{finite_diff_grad, AdamConfig};

fn catalog(n: usize, window: (i64, i64)) -> Catalog {
    Catalog::new(
        (0..n)
            .map(|i| Article {
                id: format!("a{i:03}"),
                tags: BTreeSet::new(),
                log_price: 0.0,
                fabric: BTreeMap::new(),
                image_feat: None,
                availability: vec![AvailabilityWindow {
                    start: window.0,
                    end: window.1,
                }],
            })
            .collect(),
    )
    .unwrap()
}

fn seq(events: &[(usize, i64)]) -> PurchaseSequence {
    PurchaseSequence {
        customer: "k".into(),
        events: events
            .iter()
            .map(|&(article, t)| SequenceEvent { article, t })
            .collect(),
    }
}

fn random_params(rng: &mut Rng, h: usize, d: usize) -> LstmParams {
    let mut p = LstmParams::init(TimeEncoding::Cyclic, h, d, rng);
    p.gate_bias.iter_mut().for_each(|b| *b += rng.normal() * 0.5);
    p.proj_bias.iter_mut().for_each(|b| *b = rng.normal() * 0.5);
    p
}

#[test]
fn encode_time_examples() {
    assert_eq!(encode_time(0), vec![0.0, 0.0, 1.0]);
    let half = encode_time(MINUTES_PER_YEAR / 2);
    assert!((half[0] - 0.5).abs() < 1e-12);
    assert!(half[1].abs() < 1e-12);
    assert!((half[2] + 1.0).abs() < 1e-12);
    let t = 123_457;
    let (a, b) = (encode_time(t), encode_time(t + MINUTES_PER_YEAR));
    assert!((b[0] - a[0] - 1.0).abs() < 1e-12);
    assert_eq!(a[1], b[1]);
    assert_eq!(a[2], b[2]);
}

#[test]
fn step_input_layouts() {
    let x = step_input(TimeEncoding::Cyclic, None, 1000, 2).unwrap();
    assert_eq!(&x[..5], &[0.0; 5]);
    assert_eq!(&x[5..], encode_time(1000).as_slice());

    let x = step_input(TimeEncoding::Cyclic, Some((&[0.0, 0.0], 500)), 1000, 2).unwrap();
    assert_eq!(&x[3..5], &[0.0, 0.0]);
    assert_ne!(&x[..3], &[0.0; 3]);

    let mut hand = encode_time(MINUTES_PER_YEAR / 4);
    hand.extend([0.25, -4.0]);
    hand.extend(encode_time(MINUTES_PER_YEAR));
    let x = step_input(
        TimeEncoding::Cyclic,
        Some((&[0.25, -4.0], MINUTES_PER_YEAR / 4)),
        MINUTES_PER_YEAR,
        2,
    )
    .unwrap();
    assert_eq!(x, hand);
    assert!(step_input(TimeEncoding::Cyclic, Some((&[1.0], 0)), 5, 2).is_err());

    let raw = step_input(TimeEncoding::Raw, Some((&[1.0], 7)), 9, 1).unwrap();
    assert_eq!(raw, vec![7.0, 1.0, 9.0]);
}

#[test]
fn lstm_step_trivial_cases() {
    let p = LstmParams::zeros(TimeEncoding::Cyclic, 3, 2);
    let (s, h) = lstm_step(&p, &LstmState::zeros(3), &[1.0; 8]).unwrap();
    assert_eq!(s.cell, vec![0.0; 3]);
    assert_eq!(h, vec![0.0; 3]);
    assert!(lstm_step(&p, &LstmState::zeros(3), &[1.0; 7]).is_err());

    // forget gate saturated open; input gate 0.5 times tanh(0) adds nothing
    let mut p = LstmParams::zeros(TimeEncoding::Cyclic, 2, 2);
    p.gate_bias[2..4].iter_mut().for_each(|b| *b = 50.0);
    let state = LstmState {
        cell: vec![0.7, -1.3],
        hidden: vec![0.0, 0.0],
    };
    let (s, h) = lstm_step(&p, &state, &[0.4; 8]).unwrap();
    assert!((s.cell[0] - 0.7).abs() < 1e-12 && (s.cell[1] + 1.3).abs() < 1e-12);
    assert!((h[0] - 0.5 * 0.7f64.tanh()).abs() < 1e-12);
}

#[test]
fn lstm_step_matches_scalar_oracle() {
    let mut rng = Rng::new(21);
    let p = random_params(&mut rng, 3, 2);
    let x: Vec<f64> = (0..p.input_dim).map(|_| rng.normal()).collect();
    let state = LstmState {
        cell: (0..3).map(|_| rng.normal()).collect(),
        hidden: (0..3).map(|_| rng.normal()).collect(),
    };
    let (s, h) = lstm_step(&p, &state, &x).unwrap();
    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let cols = p.input_dim + 3;
    let pre = |gate: usize, j: usize| {
        let row = gate * 3 + j;
        let mut acc = p.gate_bias[row];
        for c in 0..cols {
            let v = if c < p.input_dim {
                x[c]
            } else {
                state.hidden[c - p.input_dim]
            };
            acc += p.gates.as_slice()[row * cols + c] * v;
        }
        acc
    };
    for j in 0..3 {
        let c = sig(pre(1, j)) * state.cell[j] + sig(pre(0, j)) * pre(3, j).tanh();
        assert!((s.cell[j] - c).abs() < 1e-12);
        assert!((h[j] - sig(pre(2, j)) * c.tanh()).abs() < 1e-12);
    }
}

#[test]
fn style_sequence_unrolls_manually() {
    let mut rng = Rng::new(3);
    let p = random_params(&mut rng, 3, 2);
    let emb = Mat::from_fn(4, 2, |_, _| rng.normal());
    let s = seq(&[(1, 100), (3, 5000), (0, 90_000)]);
    let styles = style_sequence(&p, &s, &emb, None).unwrap();
    assert_eq!(styles.len(), 3);

    let mut state = LstmState::zeros(3);
    for (i, e) in s.events.iter().enumerate() {
        let prev = (i > 0).then(|| (emb.row(s.events[i - 1].article), s.events[i - 1].t));
        let x = step_input(TimeEncoding::Cyclic, prev, e.t, 2).unwrap();
        let (next, h) = lstm_step(&p, &state, &x).unwrap();
        state = next;
        let d = affine(&p.proj, &p.proj_bias, &h).unwrap();
        assert_eq!(styles[i].d, d);
        assert_eq!(styles[i].at_step, i + 1);
    }
    assert_eq!(style_sequence(&p, &s, &emb, None).unwrap(), styles);

    let with_eval = style_sequence(&p, &s, &emb, Some(100_000)).unwrap();
    assert_eq!(with_eval.len(), 4);
    assert_eq!(&with_eval[..3], &styles[..]);
    let x = step_input(TimeEncoding::Cyclic, Some((emb.row(0), 90_000)), 100_000, 2).unwrap();
    let (_, h) = lstm_step(&p, &state, &x).unwrap();
    assert_eq!(with_eval[3].d, affine(&p.proj, &p.proj_bias, &h).unwrap());

    assert!(style_sequence(&p, &s, &emb, Some(10)).is_err());
    let empty = style_sequence(&p, &seq(&[]), &emb, Some(10)).unwrap();
    assert_eq!(empty.len(), 1);
}

use crate::numerics::affine;

#[test]
fn first_style_depends_only_on_first_time() {
    let mut rng = Rng::new(4);
    let p = random_params(&mut rng, 4, 3);
    let emb = Mat::from_fn(6, 3, |_, _| rng.normal());
    let a = style_sequence(&p, &seq(&[(2, 77)]), &emb, None).unwrap();
    let b = style_sequence(&p, &seq(&[(5, 77), (1, 90), (0, 91)]), &emb, None).unwrap();
    assert_eq!(a[0].d, b[0].d);
}

#[test]
fn order_mask_examples() {
    let t = [true, true, true];
    assert_eq!(order_mask(&[10, 20, 30]).unwrap(), t);
    assert_eq!(order_mask(&[10, 10, 10]).unwrap(), vec![true, false, false]);
    assert_eq!(order_mask(&[10, 10, 20, 20]).unwrap(), vec![true, false, true, false]);
    assert!(order_mask(&[]).unwrap().is_empty());
    assert!(order_mask(&[5, 4]).is_err());
}

#[test]
fn shuffle_orders_examples() {
    let s = seq(&[(0, 1), (1, 2), (2, 3)]);
    assert_eq!(shuffle_orders(&s, &mut Rng::new(0)), s);

    let pair = seq(&[(0, 5), (1, 5)]);
    let mut first_zero = 0;
    for trial in 0..1000 {
        let out = shuffle_orders(&pair, &mut Rng::new(trial));
        if out.events[0].article == 0 {
            first_zero += 1;
        }
    }
    let freq = first_zero as f64 / 1000.0;
    assert!((freq - 0.5).abs() <= 0.05, "{freq}");

    let groups = seq(&[(0, 5), (1, 5), (2, 9)]);
    for trial in 0..50 {
        let out = shuffle_orders(&groups, &mut Rng::new(trial));
        assert_eq!(out.events[2].article, 2);
    }
}

#[test]
fn negatives_examples() {
    let cat = catalog(10, (0, 100));
    let mut rng = Rng::new(1);
    let mut all = sample_negatives(&cat, 50, &[], 10, &mut rng).unwrap();
    all.sort_unstable();
    assert_eq!(all, (0..10).collect::<Vec<_>>());

    for _ in 0..1000 {
        let negs = sample_negatives(&cat, 50, &[3], 2, &mut rng).unwrap();
        assert!(!negs.contains(&3));
        assert_ne!(negs[0], negs[1]);
    }
    assert!(matches!(
        sample_negatives(&cat, 50, &[1, 2], 9, &mut rng),
        Err(Error::Sampling {
            needed: 9,
            available: 8
        })
    ));
    assert!(matches!(
        sample_negatives(&cat, 500, &[], 1, &mut rng),
        Err(Error::Sampling { available: 0, .. })
    ));

    let mut counts = [0usize; 10];
    let mut rng = Rng::new(99);
    let draws = 10_000;
    for _ in 0..draws {
        counts[sample_negatives(&cat, 50, &[], 1, &mut rng).unwrap()[0]] += 1;
    }
    let sigma = (draws as f64 * 0.1 * 0.9).sqrt();
    for c in counts {
        assert!((c as f64 - 1000.0).abs() < 3.0 * sigma, "{counts:?}");
    }
}

#[test]
fn negatives_respect_availability() {
    let mut arts: Vec<Article> = catalog(20, (0, 100)).articles().to_vec();
    for a in arts.iter_mut().skip(10) {
        a.availability = vec![AvailabilityWindow { start: 200, end: 300 }];
    }
    let cat = Catalog::new(arts).unwrap();
    let mut rng = Rng::new(5);
    for _ in 0..200 {
        for a in sample_negatives(&cat, 50, &[], 4, &mut rng).unwrap() {
            assert!(a < 10);
        }
    }
}

fn toy_batch(rng: &mut Rng, d: usize, n_articles: usize, lengths: &[usize], n: usize) -> Vec<PreparedSequence> {
    lengths
        .iter()
        .map(|&len| {
            let mut t = rng.index(100_000) as i64;
            let mut steps = Vec::new();
            let mut prev: Option<(usize, i64)> = None;
            for i in 0..len {
                t += 1 + rng.index(200_000) as i64;
                let emb_prev: Vec<f64> = prev
                    .map(|(a, _)| (0..d).map(|c| ((a * 7 + c) as f64).sin()).collect())
                    .unwrap_or_default();
                let input = step_input(
                    TimeEncoding::Cyclic,
                    prev.map(|(_, tp)| (emb_prev.as_slice(), tp)),
                    t,
                    d,
                )
                .unwrap();
                let pos = rng.index(n_articles);
                let target = (i == 0 || rng.bernoulli(0.7)).then(|| Target {
                    positive: pos,
                    negatives: (0..n).map(|_| rng.index(n_articles)).collect(),
                    weight: 1.0,
                });
                steps.push(PreparedStep { input, target });
                prev = Some((pos, t));
            }
            PreparedSequence { steps }
        })
        .collect()
}

fn max_rel_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-7))
        .fold(0.0, f64::max)
}

#[test]
fn bptt_matches_finite_differences() {
    let mut rng = Rng::new(8);
    for kind in [LossKind::Sigmoid, LossKind::Softmax, LossKind::Rank] {
        let params = random_params(&mut rng, 3, 2);
        let emb = Mat::from_fn(6, 2, |_, _| rng.normal());
        let batch = toy_batch(&mut rng, 2, 6, &[3, 2], 3);
        let analytic = bptt_gradients(&params, &batch, &emb, kind, Execution::Sequential)
            .unwrap()
            .grads
            .flatten();
        let numeric = finite_diff_grad(
            |x| {
                let mut p = params.clone();
                p.unflatten(x);
                batch_loss(&p, &batch, &emb, kind, Execution::Sequential).unwrap().0
            },
            &params.flatten(),
            1e-5,
        )
        .unwrap();
        let err = max_rel_error(&analytic, &numeric);
        assert!(err < 1e-4, "{kind:?}: {err}");
    }
}

#[test]
fn bptt_single_step_and_linearity() {
    let mut rng = Rng::new(10);
    let params = random_params(&mut rng, 3, 2);
    let emb = Mat::from_fn(5, 2, |_, _| rng.normal());
    let batch = toy_batch(&mut rng, 2, 5, &[1], 2);
    let g1 = bptt_gradients(&params, &batch, &emb, LossKind::Rank, Execution::Sequential).unwrap();
    assert_eq!(g1.targets, 1);
    // single step: no recurrence, so recurrent weights get zero gradient
    let cols = params.input_dim + params.hidden;
    for r in 0..4 * params.hidden {
        for c in params.input_dim..cols {
            assert_eq!(g1.grads.gates.get(r, c), 0.0);
        }
    }

    let doubled: Vec<PreparedSequence> = batch
        .iter()
        .map(|s| PreparedSequence {
            steps: s
                .steps
                .iter()
                .map(|st| PreparedStep {
                    input: st.input.clone(),
                    target: st.target.clone().map(|mut t| {
                        t.weight *= 2.0;
                        t
                    }),
                })
                .collect(),
        })
        .collect();
    let g2 = bptt_gradients(&params, &doubled, &emb, LossKind::Rank, Execution::Sequential).unwrap();
    for (a, b) in g1.grads.flatten().iter().zip(g2.grads.flatten()) {
        assert!((2.0 * a - b).abs() <= 1e-14 * (1.0 + a.abs()));
    }
}

#[test]
fn parallel_and_sequential_gradients_are_identical() {
    let mut rng = Rng::new(12);
    let params = random_params(&mut rng, 5, 3);
    let emb = Mat::from_fn(20, 3, |_, _| rng.normal());
    let batch = toy_batch(&mut rng, 3, 20, &[4, 1, 7, 3, 5, 2], 4);
    let a = bptt_gradients(&params, &batch, &emb, LossKind::Sigmoid, Execution::Sequential).unwrap();
    let b = bptt_gradients(&params, &batch, &emb, LossKind::Sigmoid, Execution::Parallel).unwrap();
    assert_eq!(a, b);
}

#[test]
fn prepare_masks_orders_and_excludes_basket() {
    let cat = catalog(30, (0, 1_000_000));
    let emb = Mat::from_fn(30, 2, |r, c| (r * 3 + c) as f64 * 0.01);
    let s = seq(&[(0, 10), (1, 10), (2, 10), (3, 50), (4, 90), (5, 90)]);
    let prepared = prepare_sequence(&s, &cat, &emb, TimeEncoding::Cyclic, 5, &mut Rng::new(2)).unwrap();
    assert_eq!(prepared.steps.len(), 6);
    assert_eq!(prepared.target_count(), 3);
    let basket = [0usize, 1, 2];
    let t0 = prepared.steps[0].target.as_ref().unwrap();
    assert!(basket.contains(&t0.positive));
    assert!(t0.negatives.iter().all(|a| !basket.contains(a)));
    assert_eq!(t0.negatives.len(), 5);
    assert!(prepared.steps[0].input[..5].iter().all(|&v| v == 0.0));
}

#[test]
fn training_zero_epochs_returns_init() {
    let cat = catalog(10, (0, 1_000_000));
    let emb = Mat::from_fn(10, 2, |r, c| (r + c) as f64 * 0.1);
    let cfg = TrainConfigDyn {
        epochs: 0,
        hidden: 4,
        negatives: 2,
        seed: 3,
        ..Default::default()
    };
    let (m, log) = train_dynamic(&cat, &[seq(&[(1, 5), (2, 9)])], &emb, &cfg, Execution::Sequential).unwrap();
    let init = LstmParams::init(TimeEncoding::Cyclic, 4, 2, &mut Rng::new(3));
    assert_eq!(m.params, init);
    assert_eq!(log.len(), 1);
}

#[test]
fn training_learns_a_repeated_favourite() {
    let cat = catalog(2, (0, 10_000_000));
    let emb = Mat::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let events: Vec<(usize, i64)> = (0..12).map(|i| (0, 1000 + i * 20_000)).collect();
    let cfg = TrainConfigDyn {
        epochs: 30,
        hidden: 4,
        negatives: 1,
        batch_size: 1,
        seed: 1,
        adam: AdamConfig {
            lr: 0.05,
            ..Default::default()
        },
        ..Default::default()
    };
    let s = seq(&events);
    let run = || train_dynamic(&cat, std::slice::from_ref(&s), &emb, &cfg, Execution::Parallel).unwrap();
    let (m, log) = run();
    let styles = style_sequence(&m.params, &s, &emb, Some(300_000)).unwrap();
    let d = &styles.last().unwrap().d;
    assert!(d[0] > d[1], "favourite should outrank the other article: {d:?}");
    assert!(log.last().unwrap().validation_loss < log[0].validation_loss);
    let (m2, _) = run();
    assert_eq!(m.params.flatten(), m2.params.flatten());
}

#[test]
fn full_size_parameter_count_below_a_million() {
    let p = LstmParams::zeros(TimeEncoding::Cyclic, 256, 128);
    // 4H(U+H) + 4H + DH + D with U = 2*3 + 128
    assert_eq!(p.parameter_count(), 4 * 256 * (134 + 256) + 4 * 256 + 128 * 256 + 128);
    assert!(p.parameter_count() < 1_000_000);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let mut rng = Rng::new(30);
    let m = DynamicModel {
        params: random_params(&mut rng, 3, 2),
        loss: LossKind::Softmax,
        negatives: 7,
        seed: 99,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dyn.ckpt");
    m.save(&path).unwrap();
    let back = DynamicModel::load(&path).unwrap();
    assert_eq!(back, m);
    let bytes = std::fs::read(&path).unwrap();
    back.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(DynamicModel::load(&path).is_err());
}
