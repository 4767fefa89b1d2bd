use stylenet::autodiff::{Graph, ParamKind, ParamStore, Tensor};
use stylenet::synth::{Corpus, SynthConfig};
use stylenet::trainer::{argmax_rows, cross_entropy, history_csv, train, Adam, LabeledSample, Preset, TrainConfig, Trainer};
use stylenet::{Hands, InputMode, StyleNet, Variant};

fn corpus(persons: usize, sentences: usize, reps: usize, seed: u64) -> Vec<LabeledSample> {
    Corpus::new(persons, sentences, reps, seed, InputMode::Score2d, SynthConfig::default())
        .unwrap()
        .samples()
        .unwrap()
        .into_iter()
        .map(|s| LabeledSample { class: s.labels.person_id as usize, sample: s })
        .collect()
}

fn tiny_config(epochs: usize) -> TrainConfig {
    TrainConfig { epochs, frames: 8, preset: Preset::Tiny, batch_size: 8, seed: 3, ..Default::default() }
}

fn ce(logits: Vec<f64>, classes: usize, labels: &[usize]) -> f64 {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[labels.len(), classes], logits).unwrap());
    let l = cross_entropy(&mut g, x, labels).unwrap();
    g.value(l).data()[0]
}

#[test]
fn cross_entropy_examples() {
    assert!((ce(vec![0.3; 10], 10, &[4]) - 10f64.ln()).abs() < 1e-12);
    // ln(1 + (C-1)·e^-20) stays below 1e-8 only for C ≤ 5.
    let mut favored = vec![0.0; 3];
    favored[2] = 20.0;
    assert!(ce(favored, 3, &[2]) < 1e-8);

    // Two rows by hand: -ln(e^1/(e^1+e^2)) and -ln(e^0/(e^0+e^0)).
    let by_hand = ((1f64.exp() + 2f64.exp()).ln() - 1.0 + 2f64.ln()) / 2.0;
    assert!((ce(vec![1.0, 2.0, 0.0, 0.0], 2, &[0, 1]) - by_hand).abs() < 1e-12);

    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[1, 3]));
    assert!(cross_entropy(&mut g, x, &[3]).is_err());
}

fn one_param_store(values: Vec<f64>, grads: Vec<f64>, kind: ParamKind) -> ParamStore {
    let mut store = ParamStore::new();
    let n = values.len();
    let id = store.add("w", Tensor::new(&[n], values).unwrap(), kind).unwrap();
    store.get_mut(id).grad = Tensor::new(&[n], grads).unwrap();
    store
}

#[test]
fn first_adam_step_moves_by_lr_times_sign() {
    let cfg = TrainConfig { weight_decay: 0.0, ..Default::default() };
    let before = vec![0.5, -1.25, 3.0, 0.0];
    let grads = vec![2.0, -0.5, 0.1, -7.5];
    let mut store = one_param_store(before.clone(), grads.clone(), ParamKind::Weight);
    let mut adam = Adam::new(&store);
    adam.step(&mut store, 1e-3, &cfg).unwrap();
    for ((a, b), g) in store.value(stylenet::autodiff::ParamId(0)).data().iter().zip(&before).zip(&grads) {
        // |m̂| / (sqrt(v̂) + eps) = |g| / (|g| + eps).
        let expected = b - 1e-3 * g.signum() * g.abs() / (g.abs() + cfg.eps);
        assert!((a - expected).abs() < 1e-15);
        assert!((a - (b - 1e-3 * g.signum())).abs() < 1e-9);
    }
}

#[test]
fn zero_gradient_without_decay_is_a_no_op() {
    let cfg = TrainConfig { weight_decay: 0.0, ..Default::default() };
    let mut store = one_param_store(vec![0.5, -2.0], vec![0.0, 0.0], ParamKind::Weight);
    let mut adam = Adam::new(&store);
    for _ in 0..3 {
        adam.step(&mut store, 1e-3, &cfg).unwrap();
    }
    assert_eq!(store.value(stylenet::autodiff::ParamId(0)).data(), [0.5, -2.0]);
}

#[test]
fn decay_applies_only_to_weights() {
    let cfg = TrainConfig { weight_decay: 0.1, ..Default::default() };
    for (kind, moves) in [(ParamKind::Weight, true), (ParamKind::NoDecay, false)] {
        let mut store = one_param_store(vec![2.0], vec![0.0], kind);
        let mut adam = Adam::new(&store);
        adam.step(&mut store, 1e-3, &cfg).unwrap();
        let w = store.value(stylenet::autodiff::ParamId(0)).data()[0];
        assert_eq!(w != 2.0, moves, "{kind:?}");
    }
    let mut other = one_param_store(vec![1.0, 1.0, 1.0], vec![0.0; 3], ParamKind::Weight);
    let mut adam = Adam::new(&one_param_store(vec![1.0], vec![0.0], ParamKind::Weight));
    assert!(adam.step(&mut other, 1e-3, &cfg).is_err());
}

#[test]
fn identical_optimizers_stay_identical() {
    let cfg = TrainConfig::default();
    let mut a = one_param_store(vec![0.1, 0.2, 0.3], vec![1.0, -2.0, 0.5], ParamKind::Weight);
    let mut b = a.clone();
    let (mut oa, mut ob) = (Adam::new(&a), Adam::new(&b));
    for _ in 0..5 {
        oa.step(&mut a, 1e-3, &cfg).unwrap();
        ob.step(&mut b, 1e-3, &cfg).unwrap();
    }
    assert_eq!(a.value(stylenet::autodiff::ParamId(0)), b.value(stylenet::autodiff::ParamId(0)));
    assert_eq!(oa, ob);
}

#[test]
fn both_fusion_weights_receive_gradient() {
    let data = corpus(3, 1, 2, 5);
    let cfg = tiny_config(1);
    let net = StyleNet::new(cfg.model_config(Hands::One, 3), 1).unwrap();
    let samples: Vec<_> = data.iter().map(|s| &s.sample).collect();
    let labels: Vec<usize> = data.iter().map(|s| s.class).collect();
    let mut rng = stylenet::seed::rng_for(0, &[]);
    let batch = stylenet::skeleton::build_batch(&samples, &net.graph, 8, None, &mut rng).unwrap();
    let mut g = Graph::new();
    let (j, b) = (g.constant(batch.joints), g.constant(batch.bones));
    let out = net.forward(&mut g, j, b, true, &mut rng).unwrap();
    let loss = cross_entropy(&mut g, out.fused, &labels).unwrap();
    g.backward(loss).unwrap();
    let mut store = net.store.clone();
    store.accumulate_grads(&g);
    assert_ne!(store.grad(net.alpha_id()).data()[0], 0.0);
    assert_ne!(store.grad(net.beta_id()).data()[0], 0.0);
}

#[test]
fn training_is_deterministic_and_resumable() {
    let data = corpus(3, 2, 2, 7);
    let (tr, val) = data.split_at(8);
    let cfg = TrainConfig { lr_drops: vec![2], ..tiny_config(4) };
    let fresh = || StyleNet::new(cfg.model_config(Hands::One, 3), 11).unwrap();
    let a = train(fresh(), tr, val, &cfg).unwrap();
    let b = train(fresh(), tr, val, &cfg).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.history.len(), 4);
    assert!(a.history.iter().all(|r| r.train_loss.is_finite() && r.val_acc.is_some()));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.styn");
    let mut t = Trainer::new(fresh(), cfg.clone()).unwrap();
    t.run(tr, val, 2).unwrap();
    t.save(&path).unwrap();
    let mut resumed = Trainer::load(&path, cfg.clone()).unwrap();
    assert_eq!(resumed.epoch, 2);
    resumed.run(tr, val, cfg.epochs).unwrap();
    let c = resumed.finish();
    assert_eq!(c.history, a.history);
    assert_eq!(c.best_epoch, a.best_epoch);
    for ((_, p), (_, q)) in c.last.store.iter().zip(a.last.store.iter()) {
        assert_eq!(p.value, q.value, "{}", p.name);
    }
    for ((_, p), (_, q)) in c.best.store.iter().zip(a.best.store.iter()) {
        assert_eq!(p.value, q.value, "{}", p.name);
    }

    let csv = history_csv(&a.history);
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.starts_with("epoch,lr,train_loss,train_acc,val_acc,alpha,beta\n"));
}

#[test]
fn loss_falls_on_a_small_corpus() {
    let data = corpus(3, 1, 4, 9);
    let cfg = TrainConfig { lr_drops: vec![], ..tiny_config(30) };
    let net = StyleNet::new(cfg.model_config(Hands::One, 3), 2).unwrap();
    let out = train(net, &data, &[], &cfg).unwrap();
    let h = &out.history;
    let head: f64 = h[..5].iter().map(|r| r.train_loss).sum::<f64>() / 5.0;
    let tail: f64 = h[h.len() - 5..].iter().map(|r| r.train_loss).sum::<f64>() / 5.0;
    assert!(tail < 0.7 * head, "{head} -> {tail}");
    assert_eq!(out.best_epoch, 29);
}

#[test]
fn invalid_sets_are_rejected() {
    let data = corpus(3, 1, 1, 1);
    let cfg = tiny_config(1);
    let net = StyleNet::new(cfg.model_config(Hands::One, 2), 0).unwrap();
    assert!(train(net.clone(), &[], &[], &cfg).is_err());
    assert!(train(net, &data, &[], &cfg).is_err(), "label 2 exceeds two classes");
    let wide = StyleNet::new(cfg.model_config(Hands::Two, 3), 0).unwrap();
    assert!(train(wide, &data, &[], &cfg).is_err());
}

#[test]
fn baseline_variant_trains_too() {
    let data = corpus(2, 1, 2, 4);
    let cfg = TrainConfig { variant: Variant::Baseline, ..tiny_config(2) };
    let net = StyleNet::new(cfg.model_config(Hands::One, 2), 0).unwrap();
    assert!(net.stream(stylenet::model::StreamKind::Joint).downsampler.is_none());
    let out = train(net, &data, &data, &cfg).unwrap();
    let preds = argmax_rows(&Tensor::new(&[2, 2], vec![0.0, 1.0, 3.0, -1.0]).unwrap());
    assert_eq!(preds, [1, 0]);
    assert_eq!(out.history.len(), 2);
}

#[test]
#[ignore = "fails: dropout, frame sampling and shuffling keep the per-epoch loss noisy once it plateaus"]
fn overfit_loss_moving_average_never_rises() {
    let data = corpus(5, 2, 5, 6);
    let cfg = TrainConfig { lr_drops: vec![120, 210, 270], batch_size: 32, seed: 1, ..tiny_config(300) };
    let net = StyleNet::new(cfg.model_config(Hands::One, 5), 1).unwrap();
    let out = train(net, &data, &[], &cfg).unwrap();
    let losses: Vec<f64> = out.history.iter().map(|r| r.train_loss).collect();
    let averages: Vec<f64> = losses.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    for (i, pair) in averages.windows(2).enumerate() {
        assert!(pair[1] <= pair[0], "window {i}: {} -> {}", pair[0], pair[1]);
    }
}
