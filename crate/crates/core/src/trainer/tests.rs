use super::*;
use crate::metanet::MetaNetKind;
use crate::model::{Method, ModelSpec};
use crate::synthetic::keyword_corpus;

fn single(name: &str, value: f64) -> ParamStore {
    let mut s = ParamStore::new();
    s.add(name, Tensor::from_vec(vec![value]));
    s
}

#[test]
fn zero_gradient_is_a_fixed_point() {
    let mut p = single("w", 0.7);
    let mut st = AdamState::new(&p);
    for _ in 0..10 {
        adam_step(&mut p, &[Tensor::zeros(&[1])], &mut st, &AdamConfig::default()).unwrap();
    }
    assert_eq!(p.iter().next().unwrap().1.data(), &[0.7]);
    assert_eq!(st.step, 10);
}

#[test]
fn first_step_moves_by_learning_rate() {
    let cfg = AdamConfig { learning_rate: 1e-3, ..Default::default() };
    let mut p = single("w", 0.0);
    let mut st = AdamState::new(&p);
    adam_step(&mut p, &[Tensor::from_vec(vec![1.0])], &mut st, &cfg).unwrap();
    let moved = p.iter().next().unwrap().1.data()[0];
    assert!((moved + 1e-3).abs() < 1e-10, "{moved}");
}

#[test]
fn quadratic_bowl_converges() {
    let cfg = AdamConfig { learning_rate: 0.1, ..Default::default() };
    let mut p = single("theta", 1.0);
    let mut st = AdamState::new(&p);
    // independent scalar recurrence of the same update rule
    let (mut theta, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
    let mut reached = None;
    for t in 1..=200 {
        let g = 2.0 * p.iter().next().unwrap().1.data()[0];
        adam_step(&mut p, &[Tensor::from_vec(vec![g])], &mut st, &cfg).unwrap();
        let g_ref = 2.0 * theta;
        m = 0.9 * m + 0.1 * g_ref;
        v = 0.999 * v + 0.001 * g_ref * g_ref;
        theta -= 0.1 * (m / (1.0 - 0.9f64.powi(t))) / ((v / (1.0 - 0.999f64.powi(t))).sqrt() + 1e-8);
        let now = p.iter().next().unwrap().1.data()[0];
        assert!((now - theta).abs() < 1e-12);
        if now.abs() < 0.01 && reached.is_none() {
            reached = Some(t);
        }
    }
    assert!(reached.is_some());
}

#[test]
fn non_finite_gradient_names_the_tensor() {
    let mut p = single("fc.weight", 1.0);
    let mut st = AdamState::new(&p);
    let err = adam_step(&mut p, &[Tensor::from_vec(vec![f64::NAN])], &mut st, &AdamConfig::default()).unwrap_err();
    assert!(matches!(err, Error::NonFinite { ref tensor } if tensor == "fc.weight"));
    assert_eq!(st.step, 0);
    assert_eq!(p.iter().next().unwrap().1.data(), &[1.0]);
}

#[test]
fn doubled_gradients_keep_the_step_direction() {
    let g = Tensor::from_vec(vec![0.3, -2.0, 1e-3, -0.5]);
    let g2 = Tensor::from_vec(g.data().iter().map(|x| 2.0 * x).collect());
    let run = |grad: &Tensor| {
        let mut p = ParamStore::new();
        p.add("w", Tensor::zeros(&[4]));
        let mut st = AdamState::new(&p);
        adam_step(&mut p, std::slice::from_ref(grad), &mut st, &AdamConfig::default()).unwrap();
        let out = p.iter().next().unwrap().1.clone();
        out
    };
    let (a, b) = (run(&g), run(&g2));
    for (x, y) in a.data().iter().zip(b.data()) {
        assert_eq!(x.signum(), y.signum());
        assert!((x - y).abs() < 1e-8);
    }
}

fn small_spec(method: Method, v: usize) -> ModelSpec {
    ModelSpec { method, meta: MetaNetKind::Cnn, h: 6, c: 1, n: 2, v, u: 4 }
}

fn quick_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 8,
        adam: AdamConfig { learning_rate: 1e-2, ..Default::default() },
        epochs: 3,
        seed,
        eval_every: 3,
        checkpoint_dir: None,
    }
}

#[test]
fn replay_is_bit_identical() {
    let corpus = keyword_corpus(40, 1, 5);
    let (tr, va) = split_validation(corpus.docs.clone(), 0.2, 5);
    let spec = small_spec(Method::Are, corpus.vocab.len());
    let a = train(&tr, &va, spec, quick_config(9)).unwrap();
    let b = train(&tr, &va, spec, quick_config(9)).unwrap();
    assert!(!a.log.is_empty());
    assert_eq!(a.log.len(), b.log.len());
    assert!(a.log.iter().zip(&b.log).all(|(x, y)| x.same_run(y)));
    let c = train(&tr, &va, spec, quick_config(10)).unwrap();
    assert!(!a.log.iter().zip(&c.log).all(|(x, y)| x.same_run(y)));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let corpus = keyword_corpus(30, 1, 6);
    let spec = small_spec(Method::Are, corpus.vocab.len());
    let config = TrainConfig { batch_size: 4, eval_every: 0, ..quick_config(2) };
    // 30 docs / batch 4 = 8 batches per epoch, so 10 steps cross an epoch
    let mut full = Trainer::new(Model::seeded(spec, 2).unwrap(), config.clone()).unwrap();
    full.run(&corpus.docs, &[], Some(10)).unwrap();

    let mut first = Trainer::new(Model::seeded(spec, 2).unwrap(), config.clone()).unwrap();
    first.run(&corpus.docs, &[], Some(5)).unwrap();
    let bytes = first.to_checkpoint().to_bytes();
    drop(first);
    let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
    let mut resumed = Trainer::from_checkpoint(&ckpt, config.clone()).unwrap();
    resumed.run(&corpus.docs, &[], Some(5)).unwrap();

    assert_eq!(full.step(), 10);
    assert_eq!(resumed.step(), 10);
    for ((n, a), (_, b)) in full.model().params().iter().zip(resumed.model().params().iter()) {
        assert!(a.bit_eq(b), "{n}");
    }
    assert_eq!(full.model().bn_state(), resumed.model().bn_state());
    assert_eq!(full.to_checkpoint(), resumed.to_checkpoint());

    let wrong_seed = TrainConfig { seed: 3, ..config };
    assert!(Trainer::from_checkpoint(&ckpt, wrong_seed).is_err());
}

#[test]
fn fixed_batch_loss_decreases() {
    let corpus = keyword_corpus(16, 1, 7);
    for method in [Method::Are, Method::Lre, Method::Conv] {
        let spec = small_spec(method, corpus.vocab.len());
        let config = TrainConfig { adam: AdamConfig { learning_rate: 1e-3, ..Default::default() }, ..quick_config(1) };
        let mut t = Trainer::new(Model::seeded(spec, 1).unwrap(), config).unwrap();
        let batch: Vec<&EncodedDocument> = corpus.docs.iter().collect();
        let losses: Vec<f64> = (0..100).map(|_| t.train_batch(&batch).unwrap()).collect();
        assert!(losses.iter().all(|l| l.is_finite()));
        let increases = losses.windows(2).filter(|w| w[1] > w[0] + 1e-12).count();
        assert!(increases <= 5, "{method}: {increases} increases");
        assert!(losses[99] < losses[0]);
    }
}

#[test]
fn best_checkpoint_and_state_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = keyword_corpus(24, 1, 8);
    let (tr, va) = split_validation(corpus.docs, 0.25, 8);
    let config = TrainConfig { checkpoint_dir: Some(dir.path().to_path_buf()), ..quick_config(4) };
    let out = train(&tr, &va, small_spec(Method::Lre, corpus.vocab.len()), config).unwrap();
    let best = Model::load(dir.path().join(BEST_CHECKPOINT)).unwrap();
    let acc = evaluate(&best, &va).unwrap().accuracy;
    assert_eq!(Some(acc), out.best_val_acc);
    assert!(out.log.iter().all(|r| r.val_acc.unwrap() <= acc));
    assert!(Checkpoint::load(dir.path().join(STATE_CHECKPOINT)).is_ok());

    let log = dir.path().join("metrics.ndjson");
    write_metric_log(&log, &out.log).unwrap();
    let back = read_metric_log(&log).unwrap();
    assert!(back.iter().zip(&out.log).all(|(a, b)| a.same_run(b) && a.wall_ms == b.wall_ms));
}

#[test]
fn evaluate_counts() {
    let corpus = keyword_corpus(20, 1, 9);
    let mut m = Model::seeded(small_spec(Method::Lre, corpus.vocab.len()), 1).unwrap();
    let w = m.params().find("fc.weight").unwrap();
    m.params_mut().get_mut(w).data_mut().fill(0.0);
    let b = m.params().find("fc.bias").unwrap();
    m.params_mut().get_mut(b).data_mut().copy_from_slice(&[1.0, 0.0]);
    // 18 of class 0 and 2 of class 1 → majority predictor scores 0.9
    let mut docs: Vec<EncodedDocument> = corpus.docs.iter().filter(|d| d.label() == 0).cloned().collect();
    docs.extend(docs.clone().into_iter().take(8));
    docs.extend(corpus.docs.iter().filter(|d| d.label() == 1).take(2).cloned());
    assert_eq!(docs.len(), 20);
    let e = evaluate(&m, &docs).unwrap();
    assert!((e.accuracy - 0.9).abs() < 1e-15);
    assert_eq!(e.confusion, vec![vec![18, 0], vec![2, 0]]);
    let rows: Vec<usize> = e.confusion.iter().map(|r| r.iter().sum()).collect();
    assert_eq!(rows, vec![18, 2]);
    docs.reverse();
    assert_eq!(evaluate(&m, &docs).unwrap().accuracy, e.accuracy);
    assert!(matches!(evaluate(&m, &[]), Err(Error::EmptyCorpus)));
}

#[test]
fn keyword_corpus_is_fit_perfectly() {
    let corpus = keyword_corpus(64, 1, 11);
    let config = TrainConfig { epochs: 15, eval_every: 0, ..quick_config(11) };
    let out = train(&corpus.docs, &[], small_spec(Method::Are, corpus.vocab.len()), config).unwrap();
    assert_eq!(evaluate(&out.model, &corpus.docs).unwrap().accuracy, 1.0);
}

#[test]
fn split_is_seeded_and_sized() {
    let corpus = keyword_corpus(100, 1, 12);
    let (a, b) = split_validation(corpus.docs.clone(), 0.05, 3);
    assert_eq!((a.len(), b.len()), (95, 5));
    let (a2, b2) = split_validation(corpus.docs.clone(), 0.05, 3);
    assert_eq!(a, a2);
    assert_eq!(b, b2);
    let (_, b3) = split_validation(corpus.docs.clone(), 0.05, 4);
    assert_ne!(b, b3);
    let (one, none) = split_validation(corpus.docs[..1].to_vec(), 0.5, 0);
    assert_eq!((one.len(), none.len()), (1, 0));
}

#[test]
fn training_input_errors() {
    let corpus = keyword_corpus(8, 1, 13);
    let spec = small_spec(Method::Conv, corpus.vocab.len());
    assert!(matches!(train(&[], &[], spec, quick_config(0)), Err(Error::EmptyCorpus)));
    let bad = vec![EncodedDocument::new(corpus.docs[0].indices().to_vec(), 2, 1).unwrap()];
    assert!(matches!(train(&bad, &[], spec, quick_config(0)), Err(Error::Label { label: 2, .. })));
    let zero_batch = TrainConfig { batch_size: 0, ..quick_config(0) };
    assert!(train(&corpus.docs, &[], spec, zero_batch).is_err());
}
