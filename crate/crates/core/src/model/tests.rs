use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numeric::gradcheck::FD_STEP;
use crate::numeric::{BN_EPS, BN_MOMENTUM};

fn toy_spec(method: Method, meta: MetaNetKind) -> ModelSpec {
    ModelSpec { method, meta, h: 4, c: 1, n: 2, v: 7, u: 3 }
}

fn doc(content: &[usize], label: usize, c: usize) -> EncodedDocument {
    let mut idx = vec![0; c];
    idx.extend_from_slice(content);
    idx.extend(std::iter::repeat(0).take(c));
    EncodedDocument::new(idx, label, c).unwrap()
}

fn param<'m>(m: &'m Model, name: &str) -> &'m Tensor {
    m.params().get(m.params().find(name).unwrap())
}

fn all_specs() -> Vec<ModelSpec> {
    let mut specs: Vec<_> = MetaNetKind::ALL.iter().map(|&k| toy_spec(Method::Are, k)).collect();
    specs.push(toy_spec(Method::Lre, MetaNetKind::Cnn));
    specs.push(toy_spec(Method::Conv, MetaNetKind::Cnn));
    specs
}

/// Naive reference for the padded embedding of a document.
fn embed(v: &Tensor, d: &EncodedDocument) -> Vec<Vec<f64>> {
    let h = v.shape()[0];
    (0..h).map(|a| d.indices().iter().map(|&w| v.get(&[a, w])).collect()).collect()
}

fn head(m: &Model, r: &[f64]) -> Vec<f64> {
    let (w, b) = (param(m, "fc.weight"), param(m, "fc.bias"));
    (0..m.spec().n)
        .map(|j| b.data()[j] + r.iter().enumerate().map(|(a, x)| w.get(&[j, a]) * x).sum::<f64>())
        .collect()
}

/// Hand-rolled ARE(CNN) forward; `stats` overrides the batch-norm
/// statistics, otherwise they come from this single document.
fn are_cnn_reference(m: &Model, d: &EncodedDocument, stats: Option<&BnState>) -> Vec<f64> {
    let ModelSpec { h, c, .. } = *m.spec();
    let r = 2 * c + 1;
    let e = embed(param(m, "embedding"), d);
    let (w, bias) = (param(m, "meta.conv.weight"), param(m, "meta.conv.bias"));
    let (gamma, beta) = (param(m, "meta.bn.gamma"), param(m, "meta.bn.beta"));
    let len = d.len();
    let mut z = vec![vec![0.0; len]; h * r];
    for (o, row) in z.iter_mut().enumerate() {
        for (i, out) in row.iter_mut().enumerate() {
            let mut acc = bias.data()[o];
            for a in 0..h {
                for k in 0..r {
                    // content position i + k - c lives at padded index i + k
                    let j = i + k;
                    if j >= c && j < c + len {
                        acc += w.get(&[o, a, k]) * e[a][j];
                    }
                }
            }
            *out = acc;
        }
    }
    let mut rsum = vec![0.0; h];
    for a in 0..h {
        for i in 0..len {
            let mut best = f64::NEG_INFINITY;
            for t in 0..r {
                let o = a * r + t;
                let (mean, var) = match stats {
                    Some(s) => (s.running_mean.data()[o], s.running_var.data()[o]),
                    None => {
                        let mean = z[o].iter().sum::<f64>() / len as f64;
                        (mean, z[o].iter().map(|x| (x - mean).powi(2)).sum::<f64>() / len as f64)
                    }
                };
                let k = gamma.data()[o] * (z[o][i] - mean) / (var + BN_EPS).sqrt() + beta.data()[o];
                best = best.max(k * e[a][i + t]);
            }
            rsum[a] += best;
        }
    }
    head(m, &rsum)
}

fn lre_reference(m: &Model, d: &EncodedDocument) -> Vec<f64> {
    let ModelSpec { h, c, .. } = *m.spec();
    let e = embed(param(m, "embedding"), d);
    let u = param(m, "lcu.table");
    let mut rsum = vec![0.0; h];
    for (i, &w) in d.content().iter().enumerate() {
        for a in 0..h {
            rsum[a] += (0..2 * c + 1).map(|t| u.get(&[a, t, w]) * e[a][i + t]).fold(f64::NEG_INFINITY, f64::max);
        }
    }
    head(m, &rsum)
}

fn conv_reference(m: &Model, d: &EncodedDocument) -> Vec<f64> {
    let ModelSpec { h, c, .. } = *m.spec();
    let e = embed(param(m, "embedding"), d);
    let w = param(m, "conv.filters");
    let mut rsum = vec![0.0; h];
    for (f, out) in rsum.iter_mut().enumerate() {
        for i in 0..d.len() {
            for a in 0..h {
                for k in 0..2 * c + 1 {
                    *out += w.get(&[f, a, k]) * e[a][i + k];
                }
            }
        }
    }
    head(m, &rsum)
}

fn randomize(m: &mut Model, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, t) in m.params_mut().iter_mut() {
        *t = Tensor::uniform(t.shape(), 0.8, &mut rng);
    }
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() < tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn are_forward_matches_reference() {
    let mut m = Model::seeded(toy_spec(Method::Are, MetaNetKind::Cnn), 3).unwrap();
    randomize(&mut m, 4);
    let d = doc(&[3, 5, 2, 6, 1], 0, 1);
    let pass = m.forward(&[&d], true).unwrap();
    let got = pass.tape.value(pass.logits).data().to_vec();
    assert_close(&got, &are_cnn_reference(&m, &d, None), 1e-10);

    // eval mode uses running statistics moved once by the training pass
    let bn = pass.bn.clone();
    drop(pass);
    m.set_bn_state(bn);
    let stats = m.bn_state().unwrap().clone();
    assert!(stats.running_mean.data().iter().any(|&x| x != 0.0));
    let got = m.logits(&[&d]).unwrap();
    assert_close(got.data(), &are_cnn_reference(&m, &d, Some(&stats)), 1e-10);
}

#[test]
fn running_stats_follow_momentum() {
    let m = Model::seeded(toy_spec(Method::Are, MetaNetKind::Cnn), 3).unwrap();
    let d = doc(&[3, 5, 2, 6, 1], 0, 1);
    let pass = m.forward(&[&d], true).unwrap();
    let bn = pass.bn.unwrap();
    // all-zero start: running mean becomes (1 − momentum) · batch mean
    let fresh = BnState::new(bn.channels());
    assert!(bn.running_mean.data().iter().zip(fresh.running_mean.data()).any(|(a, b)| a != b));
    assert!(bn.running_var.data().iter().all(|&v| v >= BN_MOMENTUM));
}

#[test]
fn lre_and_conv_forward_match_reference() {
    let d = doc(&[3, 5, 2, 6, 1], 1, 1);
    let mut m = Model::seeded(toy_spec(Method::Lre, MetaNetKind::Cnn), 5).unwrap();
    randomize(&mut m, 6);
    assert_close(m.logits(&[&d]).unwrap().data(), &lre_reference(&m, &d), 1e-10);
    let mut m = Model::seeded(toy_spec(Method::Conv, MetaNetKind::Cnn), 7).unwrap();
    randomize(&mut m, 8);
    assert_close(m.logits(&[&d]).unwrap().data(), &conv_reference(&m, &d), 1e-9);
}

#[test]
fn batched_forward_equals_individual_lre() {
    let mut m = Model::seeded(toy_spec(Method::Lre, MetaNetKind::Cnn), 9).unwrap();
    randomize(&mut m, 10);
    let a = doc(&[3, 5, 2], 0, 1);
    let b = doc(&[6, 1, 4, 4, 2, 3], 1, 1);
    let both = m.logits(&[&a, &b]).unwrap();
    let la = m.logits(&[&a]).unwrap();
    let lb = m.logits(&[&b]).unwrap();
    assert_eq!(&both.data()[..2], la.data());
    assert_eq!(&both.data()[2..], lb.data());
}

#[test]
fn zero_embedding_gives_bias_logits() {
    let d = doc(&[3, 5, 2, 6, 1], 0, 1);
    for spec in all_specs() {
        let mut m = Model::seeded(spec, 11).unwrap();
        let id = m.params().find("embedding").unwrap();
        m.params_mut().get_mut(id).data_mut().fill(0.0);
        let b = m.params().find("fc.bias").unwrap();
        m.params_mut().get_mut(b).data_mut().copy_from_slice(&[0.25, -1.5]);
        for training in [true, false] {
            let pass = m.forward(&[&d], training).unwrap();
            assert_eq!(pass.tape.value(pass.logits).data(), &[0.25, -1.5], "{spec:?}");
        }
    }
}

#[test]
fn uninformative_head_gives_ln2_loss() {
    let d = doc(&[3, 5, 2, 6, 1], 1, 1);
    for spec in all_specs() {
        let mut m = Model::seeded(spec, 12).unwrap();
        let w = m.params().find("fc.weight").unwrap();
        m.params_mut().get_mut(w).data_mut().fill(0.0);
        let step = m.loss_and_grads(&[&d], true).unwrap();
        assert!((step.loss - std::f64::consts::LN_2).abs() < 1e-15);
        let p = m.predict(&d).unwrap();
        assert_eq!(p.probabilities, vec![0.5, 0.5]);
    }
}

#[test]
fn prediction_examples() {
    let p = predictions_from_logits(&Tensor::new(vec![2, 2], vec![2.0, 2.0, 10.0, 0.0]).unwrap());
    assert_eq!(p[0].probabilities, vec![0.5, 0.5]);
    assert_eq!(p[1].class, 0);
    assert!((p[1].probabilities[0] - 0.99995).abs() < 1e-5);
    for q in &p {
        assert!((q.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let shifted = predictions_from_logits(&Tensor::new(vec![1, 3], vec![0.3, 1.2, -0.4]).unwrap());
    let base = predictions_from_logits(&Tensor::new(vec![1, 3], vec![100.3, 101.2, 99.6]).unwrap());
    assert_eq!(shifted[0].class, base[0].class);
}

#[test]
fn empty_and_invalid_documents_are_rejected() {
    let m = Model::seeded(toy_spec(Method::Are, MetaNetKind::Cnn), 1).unwrap();
    let empty = EncodedDocument::new(vec![0, 0], 0, 1).unwrap();
    assert!(matches!(m.forward(&[&empty], false), Err(Error::EmptyDocument)));
    let out_of_vocab = doc(&[3, 9], 0, 1);
    assert!(matches!(m.forward(&[&out_of_vocab], false), Err(Error::Vocabulary { .. })));
    let wrong_radius = doc(&[3, 4], 0, 2);
    assert!(m.forward(&[&wrong_radius], false).is_err());
    let bad_label = doc(&[3, 4], 5, 1);
    assert!(matches!(m.loss_and_grads(&[&bad_label], true), Err(Error::Label { label: 5, classes: 2 })));
}

#[test]
fn spec_validation() {
    let mut s = toy_spec(Method::Are, MetaNetKind::FactoredCnn);
    assert!(s.validate().is_ok());
    s.u = 12;
    assert!(s.validate().is_err());
    s.method = Method::Lre;
    assert!(s.validate().is_ok());
    assert!(ModelSpec { n: 1, ..s }.validate().is_err());
    assert!(ModelSpec { h: 0, ..s }.validate().is_err());
    let d = ModelSpec::new(Method::Are, 100, 4);
    assert_eq!((d.h, d.region(), d.u), (256, 9, 32));
}

#[test]
fn gradients_match_finite_differences() {
    let docs = [doc(&[3, 5, 2, 6, 1], 0, 1), doc(&[4, 4, 2], 1, 1)];
    let refs: Vec<&EncodedDocument> = docs.iter().collect();
    for spec in all_specs() {
        let m = Model::seeded(spec, 21).unwrap();
        for (name, err) in m.gradient_check(&refs, FD_STEP).unwrap() {
            assert!(err < 1e-4, "{spec:?} {name}: {err}");
        }
    }
}

#[test]
fn sum_over_positions_ignores_region_order() {
    let mut m = Model::seeded(toy_spec(Method::Lre, MetaNetKind::Cnn), 13).unwrap();
    randomize(&mut m, 14);
    let d = doc(&[3, 5, 2, 6, 1], 0, 1);
    let mut tape = Tape::new();
    let p = m.params().bind(&mut tape);
    let e = tape.gather(p.var(m.embedding), d.indices()).unwrap();
    let bank = lcu_filters(&mut tape, p.var(*match &m.provider {
        Provider::Lcu(id) => id,
        _ => unreachable!(),
    }), &d)
    .unwrap();
    let regions = project_and_pool(&mut tape, e, bank, Pooling::Max).unwrap();
    let cols: Vec<Var> = [4, 0, 3, 1, 2].iter().map(|&i| tape.slice(regions, 1, i, 1).unwrap()).collect();
    let permuted = tape.concat(&cols, 1).unwrap();
    let a = sequence_embedding(&mut tape, regions).unwrap();
    let b = sequence_embedding(&mut tape, permuted).unwrap();
    assert!(tape.value(a).max_abs_diff(tape.value(b)) < 1e-14);

    // permuting the words themselves changes the regions and the logits
    let shuffled = doc(&[5, 3, 6, 1, 2], 0, 1);
    let l1 = m.logits(&[&d]).unwrap();
    let l2 = m.logits(&[&shuffled]).unwrap();
    assert!(l1.max_abs_diff(&l2) > 1e-6);
}

#[test]
fn eval_mode_is_deterministic() {
    let d = doc(&[3, 5, 2, 6, 1], 0, 1);
    for spec in all_specs() {
        let m = Model::seeded(spec, 15).unwrap();
        assert!(m.logits(&[&d]).unwrap().bit_eq(&m.logits(&[&d]).unwrap()));
    }
}

#[test]
fn forward_embedded_matches_lookup() {
    let d = doc(&[3, 5, 2, 6, 1], 0, 1);
    for spec in all_specs() {
        let m = Model::seeded(spec, 16).unwrap();
        let e = Tensor::new(
            vec![4, 7],
            embed(param(&m, "embedding"), &d).concat(),
        )
        .unwrap();
        let pass = m.forward_embedded(&[&d], vec![e], false).unwrap();
        assert!(pass.tape.value(pass.logits).bit_eq(&m.logits(&[&d]).unwrap()));
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let d = doc(&[3, 5, 2, 6, 1], 0, 1);
    for spec in all_specs() {
        let mut m = Model::seeded(spec, 17).unwrap();
        let bn = m.forward(&[&d], true).unwrap().bn;
        m.set_bn_state(bn);
        let path = dir.path().join("model.bin");
        m.save(&path).unwrap();
        let back = Model::load(&path).unwrap();
        assert_eq!(back.spec(), m.spec());
        for ((n1, a), (n2, b)) in m.params().iter().zip(back.params().iter()) {
            assert_eq!(n1, n2);
            assert!(a.bit_eq(b), "{n1}");
        }
        assert_eq!(m.bn_state(), back.bn_state());
        assert!(m.logits(&[&d]).unwrap().bit_eq(&back.logits(&[&d]).unwrap()));
    }
}

#[test]
fn checkpoint_errors_are_distinct() {
    let m = Model::seeded(toy_spec(Method::Are, MetaNetKind::Cnn), 18).unwrap();
    let bytes = m.to_checkpoint().to_bytes();

    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad_magic), Err(Error::Format(_))));

    let mut bad_version = bytes.clone();
    bad_version[4] = 9;
    assert!(matches!(Checkpoint::from_bytes(&bad_version), Err(Error::Version { found: 9, expected: 1 })));

    for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(Error::Truncated(_))), "cut {cut}");
    }

    let mut ckpt = m.to_checkpoint();
    ckpt.tensors[0].1 = Tensor::zeros(&[4, 8]);
    let reparsed = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
    assert!(matches!(Model::from_checkpoint(&reparsed), Err(Error::ShapeMismatch { .. })));

    let mut missing = m.to_checkpoint();
    missing.tensors.pop();
    assert!(matches!(Model::from_checkpoint(&missing), Err(Error::Format(_))));
}

#[test]
fn checkpoint_keeps_counters_and_optimizer_tensors() {
    let m = Model::seeded(toy_spec(Method::Lre, MetaNetKind::Cnn), 19).unwrap();
    let mut ckpt = m.to_checkpoint();
    ckpt.tensors.push(("optim.m.embedding".into(), Tensor::ones(&[4, 7])));
    ckpt.counters.push(("step".into(), 42));
    let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.counter("step"), Some(42));
    assert!(Model::from_checkpoint(&back).is_ok());
}
