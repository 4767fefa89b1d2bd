use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use stylenet::autodiff::{grad_check, Graph, ParamStore, Tensor, Var, BN_EPS};
use stylenet::hand_graph::{HandGraph, Hands, SubsetAdjacency};
use stylenet::model::{
    compute_ahat, compute_c, graph_product, spatial_nonlocal_d, temporal_nonlocal, two_stream_predict, AdjacencyMode,
    Downsampler, ModelConfig, Residual, SpatialUnit, StreamKind, StyleNet, TemporalUnit, Variant,
};
use stylenet::Error;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Fixed random weights turning any tensor into a scalar loss.
fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> stylenet::Result<Var> {
    let w = randn(&mut rng(seed), g.shape(y), 1.0);
    let wv = g.constant(w);
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

#[test]
fn zero_embeddings_give_uniform_similarity() {
    let mut g = Graph::new();
    let x = g.constant(randn(&mut rng(1), &[2, 3, 4, 5], 1.0));
    let w = g.constant(Tensor::zeros(&[4, 3, 1, 1]));
    let c = compute_c(&mut g, x, w, w).unwrap();
    assert_eq!(g.shape(c), [2, 5, 5]);
    assert!(g.value(c).data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
}

#[test]
fn similarity_rows_are_positive_and_normalized() {
    let mut r = rng(2);
    for _ in 0..100 {
        let (n, c, t, v, ce) = (r.random_range(1..3), r.random_range(1..5), r.random_range(1..6), r.random_range(2..22), r.random_range(1..5));
        let mut g = Graph::new();
        let x = g.constant(randn(&mut r, &[n, c, t, v], 2.0));
        let w1 = g.constant(randn(&mut r, &[ce, c, 1, 1], 1.0));
        let w2 = g.constant(randn(&mut r, &[ce, c, 1, 1], 1.0));
        let out = compute_c(&mut g, x, w1, w2).unwrap();
        for row in g.value(out).data().chunks(v) {
            assert!(row.iter().all(|&p| p > 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn two_vertex_similarity_matches_closed_form() {
    // One channel, one frame, identity embeddings: logits are x_i·x_j.
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[1, 1, 1, 2], vec![1.0, 2.0]).unwrap());
    let w = g.constant(Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap());
    let c = compute_c(&mut g, x, w, w).unwrap();
    let row0 = [1.0f64.exp(), 2.0f64.exp()];
    let row1 = [2.0f64.exp(), 4.0f64.exp()];
    let expected = [
        row0[0] / (row0[0] + row0[1]),
        row0[1] / (row0[0] + row0[1]),
        row1[0] / (row1[0] + row1[1]),
        row1[1] / (row1[0] + row1[1]),
    ];
    for (a, b) in g.value(c).data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn ahat_is_elementwise_sum() {
    let mut r = rng(3);
    let at = randn(&mut r, &[4, 4], 1.0);
    let b = randn(&mut r, &[4, 4], 1.0);
    let c = randn(&mut r, &[3, 4, 4], 1.0);
    let mut g = Graph::new();
    let (av, bv, cv) = (g.constant(at.clone()), g.constant(b.clone()), g.constant(c.clone()));
    let ahat = compute_ahat(&mut g, av, bv, cv).unwrap();
    for n in 0..3 {
        for i in 0..4 {
            for j in 0..4 {
                let expected = at.at(&[i, j]) + b.at(&[i, j]) + c.at(&[n, i, j]);
                assert_eq!(g.value(ahat).at(&[n, i, j]), expected);
            }
        }
    }
    // Shifting B by Δ shifts Â by Δ.
    let delta = randn(&mut r, &[4, 4], 1.0);
    let b2 = Tensor::from_fn(&[4, 4], |k| b.data()[k] + delta.data()[k]);
    let mut g2 = Graph::new();
    let (av, bv, cv) = (g2.constant(at), g2.constant(b2), g2.constant(c));
    let ahat2 = compute_ahat(&mut g2, av, bv, cv).unwrap();
    for n in 0..3 {
        for k in 0..16 {
            let d = g2.value(ahat2).data()[n * 16 + k] - g.value(ahat).data()[n * 16 + k];
            assert!((d - delta.data()[k]).abs() < 1e-12);
        }
    }
    let small = g2.constant(Tensor::zeros(&[3, 3]));
    assert!(matches!(compute_ahat(&mut g2, av, small, cv), Err(Error::Shape(_))));
}

#[test]
fn initial_ahat_is_skeleton_plus_uniform() {
    let adj = HandGraph::new(Hands::One).subset_adjacency(0.001).unwrap();
    let mut g = Graph::new();
    let x = g.constant(randn(&mut rng(4), &[2, 3, 5, 21], 1.0));
    let w = g.constant(Tensor::zeros(&[4, 3, 1, 1]));
    let b = g.constant(Tensor::zeros(&[21, 21]));
    let a = g.constant(adj.matrices[1].clone());
    let c = compute_c(&mut g, x, w, w).unwrap();
    let ahat = compute_ahat(&mut g, a, b, c).unwrap();
    for n in 0..2 {
        for i in 0..21 {
            for j in 0..21 {
                assert!((g.value(ahat).at(&[n, i, j]) - adj.matrices[1].at(&[i, j]) - 1.0 / 21.0).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn zero_reprojection_leaves_graph_unchanged() {
    let mut r = rng(5);
    let mut g = Graph::new();
    let ahat_t = randn(&mut r, &[2, 21, 21], 1.0);
    let ahat = g.constant(ahat_t.clone());
    let th = g.constant(randn(&mut r, &[11, 21], 1.0));
    let ph = g.constant(randn(&mut r, &[11, 21], 1.0));
    let gm = g.constant(randn(&mut r, &[11, 21], 1.0));
    let w = g.constant(Tensor::zeros(&[21, 11]));
    let d = spatial_nonlocal_d(&mut g, ahat, th, ph, gm, w).unwrap();
    assert_eq!(g.shape(d), [2, 21, 21]);
    assert_eq!(g.value(d), &ahat_t);
}

#[test]
fn three_vertex_nonlocal_matches_hand_arithmetic() {
    let a = [[1.0, 2.0, 0.0], [0.0, 1.0, 1.0], [3.0, 0.0, 1.0]];
    let (theta, phi, gv) = ([1.0, 0.0, 1.0], [0.0, 1.0, 2.0], [1.0, 1.0, 0.0]);
    let w_hat = [0.5, -1.0, 2.0];
    let mut g = Graph::new();
    let av = g.constant(Tensor::new(&[3, 3], a.concat()).unwrap());
    let th = g.constant(Tensor::new(&[1, 3], theta.to_vec()).unwrap());
    let ph = g.constant(Tensor::new(&[1, 3], phi.to_vec()).unwrap());
    let gm = g.constant(Tensor::new(&[1, 3], gv.to_vec()).unwrap());
    let wv = g.constant(Tensor::new(&[3, 1], w_hat.to_vec()).unwrap());
    let d = spatial_nonlocal_d(&mut g, av, th, ph, gm, wv).unwrap();

    // Column j of Â is vertex j's feature; embeddings are 1-d projections.
    let proj = |e: [f64; 3], j: usize| (0..3).map(|i| e[i] * a[i][j]).sum::<f64>();
    for i in 0..3 {
        for j in 0..3 {
            // Y[j] = Σ_m E[j][m]·(G·Â)[m] with E[j][m] = θ(j)·φ(m) / d, d = 1.
            let y_j: f64 = (0..3).map(|m| proj(theta, j) * proj(phi, m) * proj(gv, m)).sum();
            let expected = w_hat[i] * y_j + a[i][j];
            assert!((g.value(d).at(&[i, j]) - expected).abs() < 1e-12, "({i},{j})");
        }
    }
}

#[test]
fn temporal_attention_matches_hand_loop() {
    let mut r = rng(6);
    let x = randn(&mut r, &[1, 2, 3, 2], 1.0);
    let (th, ph, gw) = (randn(&mut r, &[1, 2, 1, 1], 1.0), randn(&mut r, &[1, 2, 1, 1], 1.0), randn(&mut r, &[1, 2, 1, 1], 1.0));
    let w = randn(&mut r, &[2, 1, 1, 1], 1.0);
    let mut g = Graph::new();
    let vars: Vec<Var> = [&x, &th, &ph, &gw, &w].iter().map(|t| g.constant((*t).clone())).collect();
    let out = temporal_nonlocal(&mut g, vars[0], vars[1], vars[2], vars[3], vars[4]).unwrap();

    let p = 6;
    let pos = |k: usize, c: usize| x.at(&[0, c, k / 2, k % 2]);
    let emb = |e: &Tensor, k: usize| e.data()[0] * pos(k, 0) + e.data()[1] * pos(k, 1);
    for c in 0..2 {
        for k in 0..p {
            let y: f64 = (0..p).map(|m| emb(&th, k) * emb(&ph, m) / p as f64 * emb(&gw, m)).sum();
            let expected = w.data()[c] * y + pos(k, c);
            assert!((g.value(out).at(&[0, c, k / 2, k % 2]) - expected).abs() < 1e-12);
        }
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = [&x, &th, &ph, &gw].iter().map(|t| g.constant((*t).clone())).collect();
    let zero = g.constant(Tensor::zeros(&[2, 1, 1, 1]));
    let out = temporal_nonlocal(&mut g, vars[0], vars[1], vars[2], vars[3], zero).unwrap();
    assert_eq!(g.value(out), &x);
}

#[test]
fn block_gradients_match_finite_differences() {
    let mut r = rng(7);
    let x = randn(&mut r, &[2, 3, 4, 5], 1.0);
    let (w1, w2) = (randn(&mut r, &[4, 3, 1, 1], 0.5), randn(&mut r, &[4, 3, 1, 1], 0.5));
    let err = grad_check(
        |g, xv| {
            let (a, b) = (g.constant(w1.clone()), g.constant(w2.clone()));
            let c = compute_c(g, xv, a, b)?;
            weighted_sum(g, c, 1)
        },
        &x,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "compute_c {err}");

    let ahat = randn(&mut r, &[2, 5, 5], 1.0);
    let embeds: Vec<Tensor> = (0..3).map(|_| randn(&mut r, &[3, 5], 1.0)).collect();
    let w_hat = randn(&mut r, &[5, 3], 1.0);
    let err = grad_check(
        |g, a| {
            let e: Vec<Var> = embeds.iter().map(|t| g.constant(t.clone())).collect();
            let w = g.constant(w_hat.clone());
            let d = spatial_nonlocal_d(g, a, e[0], e[1], e[2], w)?;
            weighted_sum(g, d, 2)
        },
        &ahat,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "spatial non-local {err}");
    let err = grad_check(
        |g, th| {
            let a = g.constant(ahat.clone());
            let (p, gm, w) = (g.constant(embeds[1].clone()), g.constant(embeds[2].clone()), g.constant(w_hat.clone()));
            let d = spatial_nonlocal_d(g, a, th, p, gm, w)?;
            weighted_sum(g, d, 3)
        },
        &embeds[0],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "spatial non-local theta {err}");

    let xt = randn(&mut r, &[2, 4, 3, 5], 1.0);
    let tw: Vec<Tensor> = (0..3).map(|_| randn(&mut r, &[2, 4, 1, 1], 0.5)).collect();
    let ww = randn(&mut r, &[4, 2, 1, 1], 0.5);
    let err = grad_check(
        |g, xv| {
            let e: Vec<Var> = tw.iter().map(|t| g.constant(t.clone())).collect();
            let w = g.constant(ww.clone());
            let y = temporal_nonlocal(g, xv, e[0], e[1], e[2], w)?;
            weighted_sum(g, y, 4)
        },
        &xt,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "temporal non-local {err}");

    let m = randn(&mut r, &[2, 5, 5], 1.0);
    let err = grad_check(
        |g, mv| {
            let xv = g.constant(x.clone());
            let y = graph_product(g, xv, mv)?;
            weighted_sum(g, y, 5)
        },
        &m,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "graph product {err}");
}

/// Sets every running mean/variance to random values so eval-mode batch norm
/// is a non-trivial affine map.
fn randomize_store(store: &mut ParamStore, r: &mut ChaCha8Rng, std: f64) {
    for (_, p) in store.iter_mut() {
        let positive = p.name.ends_with("running_var") || p.name.ends_with("gamma");
        for v in p.value.data_mut() {
            *v = if positive { r.random_range(0.5..1.5) } else { std * r.sample::<f64, _>(StandardNormal) };
        }
    }
}

fn bn_eval(store: &ParamStore, prefix: &str, c: usize, x: f64) -> f64 {
    let get = |s: &str| store.value(store.id(&format!("{prefix}.{s}")).unwrap()).data()[c];
    (x - get("running_mean")) / (get("running_var") + BN_EPS).sqrt() * get("gamma") + get("beta")
}

#[test]
fn fixed_graph_unit_matches_neighbour_loop() {
    let mut r = rng(8);
    let (n, cin, cout, t, v) = (2, 3, 5, 4, 21);
    let mut store = ParamStore::new();
    let unit = SpatialUnit::new(&mut store, "u", cin, cout, v, false, AdjacencyMode::Fixed, &mut r).unwrap();
    randomize_store(&mut store, &mut r, 0.7);
    let adj = HandGraph::new(Hands::One).subset_adjacency(0.001).unwrap();
    let x = randn(&mut r, &[n, cin, t, v], 1.0);

    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let a: Vec<Var> = adj.matrices.iter().map(|m| g.constant(m.clone())).collect();
    let out = unit.forward(&mut g, &store, xv, &a, false).unwrap();
    let out = g.value(out).clone();

    // Per vertex: sum over each subset's neighbours (non-zero entries) of
    // the normalized weight times the projected neighbour features.
    let graph = HandGraph::new(Hands::One);
    let raw = graph.partition_subsets();
    let w = |k: usize, o: usize, i: usize| store.value(store.id(&format!("u.k{k}.w")).unwrap()).at(&[o, i, 0, 0]);
    let res_w = |o: usize, i: usize| store.value(store.id("u.res.w").unwrap()).at(&[o, i, 0, 0]);
    for b in 0..n {
        for o in 0..cout {
            for ti in 0..t {
                for vi in 0..v {
                    let mut s = 0.0;
                    for k in 0..3 {
                        for vj in (0..v).filter(|&vj| raw[k].at(&[vi, vj]) != 0.0) {
                            let proj: f64 = (0..cin).map(|c| w(k, o, c) * x.at(&[b, c, ti, vj])).sum();
                            s += adj.matrices[k].at(&[vi, vj]) * proj;
                        }
                    }
                    let res: f64 = (0..cin).map(|c| res_w(o, c) * x.at(&[b, c, ti, vi])).sum();
                    let expected = (bn_eval(&store, "u.bn", o, s) + bn_eval(&store, "u.res.bn", o, res)).max(0.0);
                    let got = out.at(&[b, o, ti, vi]);
                    assert!((got - expected).abs() < 1e-6, "({b},{o},{ti},{vi}) {got} vs {expected}");
                }
            }
        }
    }
}

#[test]
fn zero_weight_unit_passes_residual_through() {
    let mut r = rng(9);
    let mut store = ParamStore::new();
    let unit = SpatialUnit::new(&mut store, "u", 3, 3, 21, false, AdjacencyMode::Adaptive, &mut r).unwrap();
    assert!(matches!(unit.residual, Residual::Identity));
    for (_, p) in store.iter_mut() {
        if p.name.ends_with(".w") {
            p.value.data_mut().fill(0.0);
        }
    }
    let x = randn(&mut r, &[2, 3, 4, 21], 1.0);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let adj = HandGraph::new(Hands::One).subset_adjacency(0.001).unwrap();
    let a: Vec<Var> = adj.matrices.iter().map(|m| g.constant(m.clone())).collect();
    let out = unit.forward(&mut g, &store, xv, &a, true).unwrap();
    for (o, i) in g.value(out).data().iter().zip(x.data()) {
        assert!((o - i.max(0.0)).abs() < 1e-12);
    }
}

#[test]
fn unit_output_shapes() {
    let mut r = rng(10);
    let mut store = ParamStore::new();
    let unit = SpatialUnit::new(&mut store, "u", 3, 64, 21, true, AdjacencyMode::Adaptive, &mut r).unwrap();
    let temporal = TemporalUnit::new(&mut store, "t", 64, 2, true, &mut r).unwrap();
    let mut g = Graph::new();
    let x = g.constant(randn(&mut r, &[2, 3, 32, 21], 1.0));
    let adj = HandGraph::new(Hands::One).subset_adjacency(0.001).unwrap();
    let a: Vec<Var> = adj.matrices.iter().map(|m| g.constant(m.clone())).collect();
    let s = unit.forward(&mut g, &store, x, &a, true).unwrap();
    assert_eq!(g.shape(s), [2, 64, 32, 21]);
    let t = temporal.forward(&mut g, &store, s, true).unwrap();
    assert_eq!(g.shape(t), [2, 64, 16, 21]);
}

fn downsampler_fixture(r: &mut ChaCha8Rng) -> (ParamStore, Downsampler) {
    let mut store = ParamStore::new();
    let d = Downsampler::new(&mut store, "d", 6, 4, r).unwrap();
    randomize_store(&mut store, r, 0.8);
    (store, d)
}

#[test]
fn downsampler_matches_per_channel_loop() {
    let mut r = rng(11);
    let (store, d) = downsampler_fixture(&mut r);
    let x = randn(&mut r, &[2, 3, 2, 3], 1.0);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let out = d.forward(&mut g, &store, xv, false).unwrap();
    assert_eq!(g.shape(out), [2, 3]);
    let val = |s: &str| store.value(store.id(s).unwrap()).clone();
    let (w1, b1, w2, b2) = (val("d.fc1.w"), val("d.fc1.b"), val("d.fc2.w"), val("d.fc2.b"));
    for n in 0..2 {
        for c in 0..3 {
            let flat: Vec<f64> = (0..6).map(|k| x.at(&[n, c, k / 3, k % 3])).collect();
            let mut y = b2.data()[0];
            for h in 0..4 {
                let pre = b1.data()[h] + (0..6).map(|k| w1.at(&[h, k]) * flat[k]).sum::<f64>();
                y += w2.at(&[0, h]) * bn_eval(&store, "d.bn", h, pre);
            }
            assert!((g.value(out).at(&[n, c]) - y).abs() < 1e-12);
        }
    }
}

#[test]
fn downsampler_is_shared_across_channels() {
    let mut r = rng(12);
    let (mut store, d) = downsampler_fixture(&mut r);
    let x = randn(&mut r, &[2, 4, 2, 3], 1.0);
    let perm = [2, 0, 3, 1];
    let xp = Tensor::from_fn(&[2, 4, 2, 3], |k| {
        let (n, c, rest) = (k / 24, (k / 6) % 4, k % 6);
        x.data()[n * 24 + perm[c] * 6 + rest]
    });
    let run = |store: &ParamStore, t: &Tensor, training: bool| {
        let mut g = Graph::new();
        let xv = g.constant(t.clone());
        let out = d.forward(&mut g, store, xv, training).unwrap();
        g.value(out).clone()
    };
    for training in [false, true] {
        let (a, b) = (run(&store, &x, training), run(&store, &xp, training));
        for n in 0..2 {
            for c in 0..4 {
                assert!((b.at(&[n, c]) - a.at(&[n, perm[c]])).abs() < 1e-12);
            }
        }
    }
    let (w2, b2) = (store.id("d.fc2.w").unwrap(), store.id("d.fc2.b").unwrap());
    store.value_mut(w2).data_mut().fill(0.0);
    store.value_mut(b2).data_mut()[0] = 0.75;
    assert!(run(&store, &x, true).data().iter().all(|&v| v == 0.75));
}

#[test]
fn full_stream_shapes_and_eval_determinism() {
    let net = StyleNet::new(ModelConfig::full(Hands::One, 10), 1).unwrap();
    let x = randn(&mut rng(13), &[2, 3, 32, 21], 1.0);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let feats = net.stream_features(&mut g, xv, StreamKind::Joint, false).unwrap();
    let trace: Vec<usize> = feats[1..].iter().map(|&f| g.shape(f)[2]).collect();
    assert_eq!(trace, [32, 32, 32, 32, 16, 16, 16, 8, 8, 8]);
    let chans: Vec<usize> = feats[1..].iter().map(|&f| g.shape(f)[1]).collect();
    assert_eq!(chans, [64, 64, 64, 64, 128, 128, 128, 256, 256, 256]);

    let logits = |x: &Tensor| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = net.stream_forward(&mut g, xv, StreamKind::Joint, false, &mut rng(0)).unwrap();
        g.value(y).clone()
    };
    let (a, b) = (logits(&x), logits(&x));
    assert_eq!(a.shape(), [2, 10]);
    assert_eq!(a, b);
    let mut g = Graph::new();
    let bad = g.constant(Tensor::zeros(&[2, 3, 16, 21]));
    assert!(net.stream_forward(&mut g, bad, StreamKind::Joint, false, &mut rng(0)).is_err());
}

#[test]
fn fusion_is_weighted_sum() {
    let mut r = rng(14);
    let (j, b) = (randn(&mut r, &[5, 4], 1.0), randn(&mut r, &[5, 4], 1.0));
    let fuse = |alpha: f64, beta: f64, b: &Tensor| {
        let mut g = Graph::new();
        let (jv, bv) = (g.constant(j.clone()), g.constant(b.clone()));
        let (a, be) = (g.constant(Tensor::full(&[1], alpha)), g.constant(Tensor::full(&[1], beta)));
        let y = two_stream_predict(&mut g, jv, bv, a, be).unwrap();
        g.value(y).clone()
    };
    let y = fuse(2.0, 0.5, &b);
    for k in 0..20 {
        assert_eq!(y.data()[k], 2.0 * j.data()[k] + 0.5 * b.data()[k]);
    }
    let y = fuse(1.0, 1.0, &j);
    assert!(y.data().iter().zip(j.data()).all(|(a, b)| *a == 2.0 * b));
    let y = fuse(1.7, 0.0, &b);
    let argmax = |t: &Tensor, n: usize| (0..4).max_by(|&p, &q| t.at(&[n, p]).total_cmp(&t.at(&[n, q]))).unwrap();
    for n in 0..5 {
        assert_eq!(argmax(&y, n), argmax(&j, n));
    }
}

/// Copies every tensor whose name exists in both stores.
fn copy_shared(dst: &mut ParamStore, src: &ParamStore) {
    for (_, p) in dst.iter_mut() {
        if let Some(id) = src.id(&p.name) {
            p.value = src.value(id).clone();
        }
    }
}

#[test]
fn zero_reprojections_make_nonlocal_layers_transparent() {
    let cfg = ModelConfig::full(Hands::One, 5);
    let mut full = StyleNet::new(cfg.clone(), 2).unwrap();
    let mut plain = StyleNet::new(Variant::Downsample.apply(&cfg), 3).unwrap();
    let mut r = rng(15);
    for (_, p) in full.store.iter_mut() {
        if p.name.contains("snl.w_hat") || p.name.contains("tnl.w") {
            p.value = randn(&mut r, p.value.shape(), 0.5);
        }
    }
    copy_shared(&mut plain.store, &full.store);
    let x = randn(&mut r, &[2, 3, 32, 21], 1.0);
    let layer_outputs = |net: &StyleNet| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let f = net.stream_features(&mut g, xv, StreamKind::Joint, false).unwrap();
        (g.value(f[8]).clone(), g.value(f[10]).clone())
    };
    let (p8, p10) = layer_outputs(&plain);
    let (f8, _) = layer_outputs(&full);
    assert!(f8.max_abs_diff(&p8) > 1e-3, "randomized re-projection must matter");
    for (_, p) in full.store.iter_mut() {
        if p.name.contains("snl.w_hat") || p.name.contains("tnl.w") {
            p.value.data_mut().fill(0.0);
        }
    }
    let (f8, f10) = layer_outputs(&full);
    assert!(f8.max_abs_diff(&p8) < 1e-6);
    assert!(f10.max_abs_diff(&p10) < 1e-6);
}

#[test]
fn neutral_adaptive_terms_reduce_to_fixed_graph_network() {
    // With B = 0 and zero embeddings, C is the uniform matrix 1/V, so the
    // adaptive network equals a fixed-graph network on Ã_k + 1/V.
    let cfg = ModelConfig::compact(Hands::One, 4, 16);
    let mut adaptive = StyleNet::new(cfg.clone(), 4).unwrap();
    let fixed_cfg = ModelConfig { adjacency: AdjacencyMode::Fixed, ..Variant::Downsample.apply(&cfg) };
    let mut fixed = StyleNet::new(fixed_cfg, 5).unwrap();
    for (_, p) in adaptive.store.iter_mut() {
        if p.name.contains(".c1") || p.name.contains(".c2") || p.name.ends_with(".b") && p.name.contains(".k") || p.name.contains("w_hat") || p.name.contains("tnl.w") {
            p.value.data_mut().fill(0.0);
        }
    }
    copy_shared(&mut fixed.store, &adaptive.store);
    let v = 21;
    let shifted = adaptive.adjacency().matrices.clone().map(|m| Tensor::from_fn(&[v, v], |k| m.data()[k] + 1.0 / v as f64));
    fixed.set_adjacency(SubsetAdjacency { matrices: shifted, sigma: 0.001 }).unwrap();
    let batch = randn(&mut rng(16), &[3, 3, 16, 21], 1.0);
    let run = |net: &StyleNet, training: bool| {
        let mut g = Graph::new();
        let (j, b) = (g.constant(batch.clone()), g.constant(batch.clone()));
        let out = net.forward(&mut g, j, b, training, &mut rng(1)).unwrap();
        g.value(out.fused).clone()
    };
    for training in [false, true] {
        assert!(run(&adaptive, training).max_abs_diff(&run(&fixed, training)) < 1e-6);
    }
}

#[test]
fn swapping_hands_leaves_initial_logits_unchanged() {
    let cfg = ModelConfig::compact(Hands::Two, 3, 16);
    let net = StyleNet::new(cfg, 6).unwrap();
    let swap = |v: usize| (v + 21) % 42;
    let x = randn(&mut rng(17), &[2, 3, 16, 42], 1.0);
    let xs = Tensor::from_fn(&[2, 3, 16, 42], |k| x.data()[k - k % 42 + swap(k % 42)]);

    // Relabel every vertex-indexed tensor consistently.
    let mut swapped = net.clone();
    let perm_vc: Vec<usize> = (0..42 * 3).map(|k| swap(k / 3) * 3 + k % 3).collect();
    for (_, p) in swapped.store.iter_mut() {
        let shape = p.value.shape().to_vec();
        let src = p.value.clone();
        if p.name.contains("input_bn") {
            p.value = Tensor::from_fn(&shape, |k| src.data()[perm_vc[k]]);
        } else if p.name.ends_with(".b") && p.name.contains(".k") {
            p.value = Tensor::from_fn(&shape, |k| src.at(&[swap(k / 42), swap(k % 42)]));
        } else if p.name.contains("down.fc1.w") {
            let cols = shape[1];
            p.value = Tensor::from_fn(&shape, |k| {
                let (h, c) = (k / cols, k % cols);
                src.at(&[h, c - c % 42 + swap(c % 42)])
            });
        }
    }
    let adj = net.adjacency().matrices.clone().map(|m| Tensor::from_fn(&[42, 42], |k| m.at(&[swap(k / 42), swap(k % 42)])));
    assert_eq!(adj, net.adjacency().matrices, "hand swap is a graph automorphism");
    swapped.set_adjacency(SubsetAdjacency { matrices: adj, sigma: 0.001 }).unwrap();

    let run = |net: &StyleNet, x: &Tensor| {
        let mut g = Graph::new();
        let (j, b) = (g.constant(x.clone()), g.constant(x.clone()));
        let out = net.forward(&mut g, j, b, false, &mut rng(0)).unwrap();
        g.value(out.fused).clone()
    };
    let (a, b) = (run(&net, &x), run(&swapped, &xs));
    assert!(a.max_abs_diff(&b) < 1e-9, "{}", a.max_abs_diff(&b));
}

#[test]
fn baseline_has_fewer_parameters() {
    let cfg = ModelConfig::full(Hands::One, 10);
    let counts: Vec<usize> = Variant::ALL.iter().map(|v| StyleNet::new(v.apply(&cfg), 0).unwrap().num_parameters()).collect();
    assert!(counts[0] < counts[4]);
    assert!(counts.iter().all(|&c| c <= counts[4]));
}

#[test]
fn checkpoint_round_trip_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.styn");
    let net = StyleNet::new(ModelConfig::tiny(Hands::Two, 4), 9).unwrap();
    net.save(&path).unwrap();
    let back = StyleNet::load(&path).unwrap();
    assert_eq!(back.config, net.config);
    for ((_, a), (_, b)) in net.store.iter().zip(back.store.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value, b.value);
    }

    // A sidecar describing a different architecture is rejected.
    let other = ModelConfig::tiny(Hands::One, 4);
    other.to_key_values().save(stylenet::model::config_path(&path)).unwrap();
    assert!(matches!(StyleNet::load(&path), Err(Error::Format { .. })));
    net.config.to_key_values().save(stylenet::model::config_path(&path)).unwrap();

    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
    assert!(matches!(StyleNet::load(&path), Err(Error::Truncated { .. })));
    let mut bad = bytes.clone();
    bad[..4].copy_from_slice(b"NOPE");
    std::fs::write(&path, &bad).unwrap();
    assert!(matches!(StyleNet::load(&path), Err(Error::Format { .. })));
}
