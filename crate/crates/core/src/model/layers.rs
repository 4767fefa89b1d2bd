//! Building blocks of one stream. Graph products follow the convention
//! `out[.., i] = Σ_j M[i, j]·x[.., j]`, i.e. `x·Mᵀ` over the vertex axis.

use rand::Rng;

use crate::autodiff::{BnParams, Graph, ParamId, ParamKind, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::hand_graph::NUM_SUBSETS;

use super::config::AdjacencyMode;

const TEMPORAL_KERNEL: usize = 9;

/// Embedding width used by the attention matrices `C_k`.
pub fn embed_channels(out_channels: usize) -> usize {
    (out_channels / 4).max(4)
}

/// Width of the spatial non-local embeddings for `v` vertices.
pub fn nonlocal_width(v: usize) -> usize {
    v.div_ceil(2)
}

/// `x·Mᵀ` over the last axis of `x: [N, C, T, V]`; `m` is `[V, V]` or `[N, V, V]`.
pub fn graph_product(g: &mut Graph, x: Var, m: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(Error::shape(format!("graph product needs [N, C, T, V], got {shape:?}")));
    }
    let mt = g.transpose(m)?;
    match g.shape(m).len() {
        2 => g.matmul(x, mt),
        3 => {
            let (n, c, t, v) = (shape[0], shape[1], shape[2], shape[3]);
            if g.shape(m)[0] != n {
                return Err(Error::shape(format!("graph batch {:?} vs input {shape:?}", g.shape(m))));
            }
            let flat = g.reshape(x, &[n, c * t, v])?;
            let y = g.matmul(flat, mt)?;
            g.reshape(y, &[n, c, t, v])
        }
        _ => Err(Error::shape(format!("graph matrix {:?}", g.shape(m)))),
    }
}

/// Embedded-Gaussian vertex similarity: both embeddings flattened over
/// `(channel, frame)` per vertex, dot products between vertices, softmax over
/// the last axis. Returns `[N, V, V]` with rows summing to one.
pub fn compute_c(g: &mut Graph, x: Var, w1: Var, w2: Var) -> Result<Var> {
    let e1 = g.conv2d(x, w1, None, 1, 0)?;
    let e2 = g.conv2d(x, w2, None, 1, 0)?;
    let s = g.shape(e1).to_vec();
    let (n, ce, t, v) = (s[0], s[1], s[2], s[3]);
    let flat = |g: &mut Graph, e: Var| -> Result<Var> {
        let p = g.permute(e, &[0, 3, 1, 2])?;
        g.reshape(p, &[n, v, ce * t])
    };
    let f1 = flat(g, e1)?;
    let f2 = flat(g, e2)?;
    let f2t = g.transpose(f2)?;
    let logits = g.matmul(f1, f2t)?;
    Ok(g.softmax(logits))
}

/// `Ã + B + C` with `Ã, B: [V, V]` shared over the batch of `C: [N, V, V]`.
pub fn compute_ahat(g: &mut Graph, a_tilde: Var, b: Var, c: Var) -> Result<Var> {
    let ab = g.add(a_tilde, b)?;
    g.add_broadcast(c, ab)
}

/// Non-local refinement of a graph: the `V` columns of `Â` are embedded to
/// width `d` by `Θ, Φ, G: [d, V]`, `E = (ΘÂ)ᵀ(ΦÂ)/d`, `Y = E·(GÂ)ᵀ`, and the
/// result `Ŵ·Yᵀ + Â` with `Ŵ: [V, d]`.
pub fn spatial_nonlocal_d(g: &mut Graph, ahat: Var, theta: Var, phi: Var, gm: Var, w_hat: Var) -> Result<Var> {
    let d = g.shape(theta)[0];
    let ta = g.matmul(theta, ahat)?;
    let pa = g.matmul(phi, ahat)?;
    let ga = g.matmul(gm, ahat)?;
    let tat = g.transpose(ta)?;
    let e = g.matmul(tat, pa)?;
    let e = g.scale(e, 1.0 / d as f64);
    let gat = g.transpose(ga)?;
    let y = g.matmul(e, gat)?;
    let yt = g.transpose(y)?;
    let proj = g.matmul(w_hat, yt)?;
    g.add(proj, ahat)
}

/// Dot-product attention over all `T·V` positions of `x: [N, C, T, V]`:
/// `E = θᵀφ / P`, `Y = E·gᵀ`, output `W(Y) + x`. The embeddings are 1×1
/// convolutions `C → C'` and `W` maps `C' → C`.
pub fn temporal_nonlocal(g: &mut Graph, x: Var, theta: Var, phi: Var, gw: Var, w: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (n, t, v) = (s[0], s[2], s[3]);
    let p = t * v;
    let c2 = g.shape(theta)[0];
    let embed = |g: &mut Graph, k: Var| -> Result<Var> {
        let e = g.conv2d(x, k, None, 1, 0)?;
        g.reshape(e, &[n, c2, p])
    };
    let th = embed(g, theta)?;
    let ph = embed(g, phi)?;
    let gg = embed(g, gw)?;
    let tht = g.transpose(th)?;
    let e = g.matmul(tht, ph)?;
    let e = g.scale(e, 1.0 / p as f64);
    let ggt = g.transpose(gg)?;
    let y = g.matmul(e, ggt)?;
    let yt = g.transpose(y)?;
    let y4 = g.reshape(yt, &[n, c2, t, v])?;
    let out = g.conv2d(y4, w, None, 1, 0)?;
    g.add(out, x)
}

/// `α·out_J + β·out_B`.
pub fn two_stream_predict(g: &mut Graph, joints: Var, bones: Var, alpha: Var, beta: Var) -> Result<Var> {
    let a = g.scale_by(joints, alpha)?;
    let b = g.scale_by(bones, beta)?;
    g.add(a, b)
}

fn conv_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

pub(crate) fn add_bn(store: &mut ParamStore, name: &str, c: usize) -> Result<BnParams> {
    Ok(BnParams {
        gamma: store.add(format!("{name}.gamma"), Tensor::full(&[c], 1.0), ParamKind::NoDecay)?,
        beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c]), ParamKind::NoDecay)?,
        running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[c]), ParamKind::Buffer)?,
        running_var: store.add(format!("{name}.running_var"), Tensor::full(&[c], 1.0), ParamKind::Buffer)?,
    })
}

/// 1×1 (optionally strided) convolution followed by batch norm.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub w: ParamId,
    pub bn: BnParams,
    pub stride: usize,
}

impl ConvBn {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            w: store.add_normal(format!("{name}.w"), &[cout, cin, 1, 1], conv_std(cin), rng)?,
            bn: add_bn(store, &format!("{name}.bn"), cout)?,
            stride,
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, training: bool) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = g.conv2d(x, w, None, self.stride, 0)?;
        g.batch_norm(store, y, self.bn, training)
    }
}

/// Identity when shapes allow it, otherwise a projecting [`ConvBn`].
#[derive(Clone, Debug)]
pub enum Residual {
    Identity,
    Project(ConvBn),
}

impl Residual {
    pub(crate) fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize, rng: &mut R) -> Result<Self> {
        if cin == cout && stride == 1 {
            Ok(Residual::Identity)
        } else {
            Ok(Residual::Project(ConvBn::new(store, name, cin, cout, stride, rng)?))
        }
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, training: bool) -> Result<Var> {
        match self {
            Residual::Identity => Ok(x),
            Residual::Project(c) => c.forward(g, store, x, training),
        }
    }
}

/// Θ, Φ, G and Ŵ of one subset's spatial non-local block.
#[derive(Clone, Debug)]
pub struct SpatialNonLocal {
    pub theta: ParamId,
    pub phi: ParamId,
    pub g: ParamId,
    pub w_hat: ParamId,
}

/// Learned graph terms of one subset: `B_k` and the embeddings behind `C_k`.
#[derive(Clone, Debug)]
pub struct AdaptiveGraph {
    pub b: ParamId,
    pub c1: ParamId,
    pub c2: ParamId,
    pub nonlocal: Option<SpatialNonLocal>,
}

/// Per-subset parameters of a spatial unit.
#[derive(Clone, Debug)]
pub struct Subset {
    pub w: ParamId,
    /// Absent when the unit uses the fixed skeleton graph only.
    pub adaptive: Option<AdaptiveGraph>,
}

#[derive(Clone, Debug)]
pub struct SpatialUnit {
    pub subsets: Vec<Subset>,
    pub bn: BnParams,
    pub residual: Residual,
}

impl SpatialUnit {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        v: usize,
        nonlocal: bool,
        mode: AdjacencyMode,
        rng: &mut R,
    ) -> Result<Self> {
        let ce = embed_channels(cout);
        let d = nonlocal_width(v);
        let mut subsets = Vec::with_capacity(NUM_SUBSETS);
        for k in 0..NUM_SUBSETS {
            let p = format!("{name}.k{k}");
            let w = store.add_normal(format!("{p}.w"), &[cout, cin, 1, 1], conv_std(cin * NUM_SUBSETS), rng)?;
            let adaptive = match mode {
                AdjacencyMode::Fixed => None,
                AdjacencyMode::Adaptive => Some(AdaptiveGraph {
                    b: store.add(format!("{p}.b"), Tensor::zeros(&[v, v]), ParamKind::Weight)?,
                    c1: store.add_normal(format!("{p}.c1"), &[ce, cin, 1, 1], conv_std(cin), rng)?,
                    c2: store.add_normal(format!("{p}.c2"), &[ce, cin, 1, 1], conv_std(cin), rng)?,
                    nonlocal: if nonlocal {
                        let std = (1.0 / v as f64).sqrt();
                        Some(SpatialNonLocal {
                            theta: store.add_normal(format!("{p}.snl.theta"), &[d, v], std, rng)?,
                            phi: store.add_normal(format!("{p}.snl.phi"), &[d, v], std, rng)?,
                            g: store.add_normal(format!("{p}.snl.g"), &[d, v], std, rng)?,
                            w_hat: store.add(format!("{p}.snl.w_hat"), Tensor::zeros(&[v, d]), ParamKind::Weight)?,
                        })
                    } else {
                        None
                    },
                }),
            };
            subsets.push(Subset { w, adaptive });
        }
        Ok(Self {
            subsets,
            bn: add_bn(store, &format!("{name}.bn"), cout)?,
            residual: Residual::new(store, &format!("{name}.res"), cin, cout, 1, rng)?,
        })
    }

    /// The graph `M_k` this unit convolves with for subset `k`.
    pub fn graph_matrix(&self, g: &mut Graph, store: &ParamStore, x: Var, a_tilde: Var, k: usize) -> Result<Var> {
        let Some(s) = &self.subsets[k].adaptive else {
            return Ok(a_tilde);
        };
        let (w1, w2, b) = (g.param(store, s.c1), g.param(store, s.c2), g.param(store, s.b));
        let c = compute_c(g, x, w1, w2)?;
        let ahat = compute_ahat(g, a_tilde, b, c)?;
        match &s.nonlocal {
            None => Ok(ahat),
            Some(nl) => {
                let (th, ph, gm, wh) = (
                    g.param(store, nl.theta),
                    g.param(store, nl.phi),
                    g.param(store, nl.g),
                    g.param(store, nl.w_hat),
                );
                spatial_nonlocal_d(g, ahat, th, ph, gm, wh)
            }
        }
    }

    /// `ReLU(BN(Σ_k W_k(x·M_kᵀ)) + residual(x))`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, a_tilde: &[Var], training: bool) -> Result<Var> {
        if a_tilde.len() != self.subsets.len() {
            return Err(Error::shape(format!("{} subset graphs for {} subsets", a_tilde.len(), self.subsets.len())));
        }
        let mut acc: Option<Var> = None;
        for (k, &a) in a_tilde.iter().enumerate() {
            let m = self.graph_matrix(g, store, x, a, k)?;
            let xm = graph_product(g, x, m)?;
            let w = g.param(store, self.subsets[k].w);
            let y = g.conv2d(xm, w, None, 1, 0)?;
            acc = Some(match acc {
                None => y,
                Some(s) => g.add(s, y)?,
            });
        }
        let sum = acc.ok_or_else(|| Error::shape("spatial unit without subsets"))?;
        let normed = g.batch_norm(store, sum, self.bn, training)?;
        let res = self.residual.forward(g, store, x, training)?;
        let out = g.add(normed, res)?;
        Ok(g.relu(out))
    }
}

/// Θ, Φ, G and W of a temporal non-local block.
#[derive(Clone, Debug)]
pub struct TemporalNonLocal {
    pub theta: ParamId,
    pub phi: ParamId,
    pub g: ParamId,
    pub w: ParamId,
}

/// 9×1 temporal convolution with batch norm, optionally followed by the
/// temporal non-local block.
#[derive(Clone, Debug)]
pub struct TemporalUnit {
    pub w: ParamId,
    pub bn: BnParams,
    pub stride: usize,
    pub nonlocal: Option<TemporalNonLocal>,
}

impl TemporalUnit {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, c: usize, stride: usize, nonlocal: bool, rng: &mut R) -> Result<Self> {
        let nonlocal = if nonlocal {
            let c2 = (c / 2).max(1);
            Some(TemporalNonLocal {
                theta: store.add_normal(format!("{name}.tnl.theta"), &[c2, c, 1, 1], conv_std(c), rng)?,
                phi: store.add_normal(format!("{name}.tnl.phi"), &[c2, c, 1, 1], conv_std(c), rng)?,
                g: store.add_normal(format!("{name}.tnl.g"), &[c2, c, 1, 1], conv_std(c), rng)?,
                w: store.add(format!("{name}.tnl.w"), Tensor::zeros(&[c, c2, 1, 1]), ParamKind::Weight)?,
            })
        } else {
            None
        };
        Ok(Self {
            w: store.add_normal(format!("{name}.w"), &[c, c, TEMPORAL_KERNEL, 1], conv_std(c * TEMPORAL_KERNEL), rng)?,
            bn: add_bn(store, &format!("{name}.bn"), c)?,
            stride,
            nonlocal,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, training: bool) -> Result<Var> {
        let w = g.param(store, self.w);
        let y = g.conv2d(x, w, None, self.stride, TEMPORAL_KERNEL / 2)?;
        let y = g.batch_norm(store, y, self.bn, training)?;
        match &self.nonlocal {
            None => Ok(y),
            Some(nl) => {
                let (th, ph, gw, ww) = (g.param(store, nl.theta), g.param(store, nl.phi), g.param(store, nl.g), g.param(store, nl.w));
                temporal_nonlocal(g, y, th, ph, gw, ww)
            }
        }
    }
}

/// Spatial unit, temporal unit and the layer-level residual.
#[derive(Clone, Debug)]
pub struct Layer {
    pub spatial: SpatialUnit,
    pub temporal: TemporalUnit,
    pub residual: Residual,
}

impl Layer {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, a_tilde: &[Var], training: bool) -> Result<Var> {
        let s = self.spatial.forward(g, store, x, a_tilde, training)?;
        let t = self.temporal.forward(g, store, s, training)?;
        let r = self.residual.forward(g, store, x, training)?;
        let out = g.add(t, r)?;
        Ok(g.relu(out))
    }
}

/// Shared `FC → BN → FC` map from each channel's `T·V` map to one scalar.
#[derive(Clone, Debug)]
pub struct Downsampler {
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub bn: BnParams,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

impl Downsampler {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, positions: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            fc1_w: store.add_normal(format!("{name}.fc1.w"), &[hidden, positions], (1.0 / positions as f64).sqrt(), rng)?,
            fc1_b: store.add(format!("{name}.fc1.b"), Tensor::zeros(&[hidden]), ParamKind::Weight)?,
            bn: add_bn(store, &format!("{name}.bn"), hidden)?,
            fc2_w: store.add_normal(format!("{name}.fc2.w"), &[1, hidden], (1.0 / hidden as f64).sqrt(), rng)?,
            fc2_b: store.add(format!("{name}.fc2.b"), Tensor::zeros(&[1]), ParamKind::Weight)?,
        })
    }

    /// `[N, C, T, V] → [N, C]`, the same parameters serving every channel.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, training: bool) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape(format!("downsampler needs [N, C, T, V], got {s:?}")));
        }
        let (n, c) = (s[0], s[1]);
        let rows = g.reshape(x, &[n * c, s[2] * s[3]])?;
        let (w1, b1, w2, b2) = (
            g.param(store, self.fc1_w),
            g.param(store, self.fc1_b),
            g.param(store, self.fc2_w),
            g.param(store, self.fc2_b),
        );
        let h = g.linear(rows, w1, Some(b1))?;
        let h = g.batch_norm(store, h, self.bn, training)?;
        let y = g.linear(h, w2, Some(b2))?;
        g.reshape(y, &[n, c])
    }
}

/// Global average over `T·V`: `[N, C, T, V] → [N, C]`.
pub fn global_average_pool(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::shape(format!("pooling needs [N, C, T, V], got {s:?}")));
    }
    let flat = g.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
    g.mean_last(flat)
}
