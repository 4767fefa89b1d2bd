use rand::Rng;

use crate::autodiff::{BnParams, Graph, ParamId, ParamKind, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::hand_graph::{HandGraph, SubsetAdjacency};
use crate::seed::rng_for;
use crate::skeleton::StreamBatch;

use super::config::ModelConfig;
use super::layers::{add_bn, global_average_pool, two_stream_predict, Downsampler, Layer, Residual, SpatialUnit, TemporalUnit};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StreamKind {
    Joint,
    Bone,
}

impl StreamKind {
    pub fn prefix(self) -> &'static str {
        match self {
            StreamKind::Joint => "joint",
            StreamKind::Bone => "bone",
        }
    }
}

/// Parameters of one stream.
#[derive(Clone, Debug)]
pub struct Stream {
    /// Batch norm over the `V·C` input channels.
    pub input_bn: BnParams,
    pub layers: Vec<Layer>,
    pub downsampler: Option<Downsampler>,
    pub fc_w: ParamId,
    pub fc_b: ParamId,
}

impl Stream {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, kind: StreamKind, rng: &mut R) -> Result<Self> {
        let p = kind.prefix();
        let v = cfg.num_vertices();
        let input_bn = add_bn(store, &format!("{p}.input_bn"), v * cfg.in_channels)?;
        let mut layers = Vec::with_capacity(cfg.layers.len());
        let mut cin = cfg.in_channels;
        for (i, spec) in cfg.layers.iter().enumerate() {
            let name = format!("{p}.l{i}");
            let spatial = SpatialUnit::new(
                store,
                &format!("{name}.spatial"),
                cin,
                spec.channels,
                v,
                cfg.snl_layer == Some(i),
                cfg.adjacency,
                rng,
            )?;
            let temporal = TemporalUnit::new(store, &format!("{name}.temporal"), spec.channels, spec.stride, cfg.tnl_layer == Some(i), rng)?;
            let residual = Residual::new(store, &format!("{name}.res"), cin, spec.channels, spec.stride, rng)?;
            layers.push(Layer {
                spatial,
                temporal,
                residual,
            });
            cin = spec.channels;
        }
        let t_last = *cfg.frame_trace().last().expect("at least one layer");
        let downsampler = if cfg.downsample {
            Some(Downsampler::new(store, &format!("{p}.down"), t_last * v, cfg.hidden, rng)?)
        } else {
            None
        };
        let c = cfg.final_channels();
        Ok(Self {
            input_bn,
            layers,
            downsampler,
            fc_w: store.add_normal(format!("{p}.fc.w"), &[cfg.num_classes, c], (1.0 / c as f64).sqrt(), rng)?,
            fc_b: store.add(format!("{p}.fc.b"), Tensor::zeros(&[cfg.num_classes]), ParamKind::Weight)?,
        })
    }
}

/// Logits of both streams and of their fusion.
#[derive(Clone, Copy, Debug)]
pub struct FusedLogits {
    pub joint: Var,
    pub bone: Var,
    pub fused: Var,
}

/// The two-stream network with its parameters.
#[derive(Clone, Debug)]
pub struct StyleNet {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub graph: HandGraph,
    adjacency: SubsetAdjacency,
    joint: Stream,
    bone: Stream,
    alpha: ParamId,
    beta: ParamId,
}

impl StyleNet {
    /// Fresh network with weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let graph = HandGraph::new(config.hands);
        let adjacency = graph.subset_adjacency(config.sigma)?;
        let mut store = ParamStore::new();
        let mut rng = rng_for(seed, &[0x1417]);
        let joint = Stream::new(&mut store, &config, StreamKind::Joint, &mut rng)?;
        let bone = Stream::new(&mut store, &config, StreamKind::Bone, &mut rng)?;
        let alpha = store.add("alpha", Tensor::full(&[1], 1.0), ParamKind::NoDecay)?;
        let beta = store.add("beta", Tensor::full(&[1], 1.0), ParamKind::NoDecay)?;
        let mut net = Self {
            config,
            store,
            graph,
            adjacency,
            joint,
            bone,
            alpha,
            beta,
        };
        net.store.round_to_f32();
        Ok(net)
    }

    pub fn stream(&self, kind: StreamKind) -> &Stream {
        match kind {
            StreamKind::Joint => &self.joint,
            StreamKind::Bone => &self.bone,
        }
    }

    pub fn alpha_id(&self) -> ParamId {
        self.alpha
    }

    pub fn beta_id(&self) -> ParamId {
        self.beta
    }

    pub fn adjacency(&self) -> &SubsetAdjacency {
        &self.adjacency
    }

    /// Replaces the normalized subset graphs, e.g. with a relabelled copy.
    pub fn set_adjacency(&mut self, adjacency: SubsetAdjacency) -> Result<()> {
        let v = self.config.num_vertices();
        if adjacency.matrices.iter().any(|m| m.shape() != [v, v]) {
            return Err(Error::shape(format!("adjacency must be {v}x{v}")));
        }
        self.adjacency = adjacency;
        Ok(())
    }

    /// Number of trainable scalars.
    pub fn num_parameters(&self) -> usize {
        self.store.iter().filter(|(_, p)| p.trainable()).map(|(_, p)| p.value.numel()).sum()
    }

    /// The subset graphs `Ã_k` as graph constants.
    pub fn adjacency_vars(&self, g: &mut Graph) -> Vec<Var> {
        self.adjacency.matrices.iter().map(|m| g.constant(m.clone())).collect()
    }

    fn input_norm(&self, g: &mut Graph, s: &Stream, x: Var, training: bool) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let (n, c, t, v) = (shape[0], shape[1], shape[2], shape[3]);
        let p = g.permute(x, &[0, 3, 1, 2])?;
        let flat = g.reshape(p, &[n, v * c, t])?;
        let y = g.batch_norm(&self.store, flat, s.input_bn, training)?;
        let y = g.reshape(y, &[n, v, c, t])?;
        g.permute(y, &[0, 2, 3, 1])
    }

    /// Output of every layer of one stream, input normalization included as
    /// the first entry.
    pub fn stream_features(&self, g: &mut Graph, x: Var, kind: StreamKind, training: bool) -> Result<Vec<Var>> {
        let cfg = &self.config;
        let shape = g.shape(x).to_vec();
        let expected = [cfg.in_channels, cfg.frames, cfg.num_vertices()];
        if shape.len() != 4 || shape[1..] != expected {
            return Err(Error::shape(format!("stream input {shape:?}, expected [N, {}, {}, {}]", expected[0], expected[1], expected[2])));
        }
        let s = self.stream(kind);
        let a = self.adjacency_vars(g);
        let mut h = self.input_norm(g, s, x, training)?;
        let mut out = vec![h];
        for layer in &s.layers {
            h = layer.forward(g, &self.store, h, &a, training)?;
            out.push(h);
        }
        Ok(out)
    }

    /// Logits `[N, classes]` of one stream for `x: [N, C, T, V]`.
    pub fn stream_forward<R: Rng + ?Sized>(&self, g: &mut Graph, x: Var, kind: StreamKind, training: bool, rng: &mut R) -> Result<Var> {
        let feats = self.stream_features(g, x, kind, training)?;
        let h = *feats.last().expect("features");
        let s = self.stream(kind);
        let pooled = match &s.downsampler {
            Some(d) => d.forward(g, &self.store, h, training)?,
            None => global_average_pool(g, h)?,
        };
        let dropped = g.dropout(pooled, self.config.dropout, training, rng)?;
        let (w, b) = (g.param(&self.store, s.fc_w), g.param(&self.store, s.fc_b));
        g.linear(dropped, w, Some(b))
    }

    /// Both streams and their weighted fusion.
    pub fn forward<R: Rng + ?Sized>(&self, g: &mut Graph, joints: Var, bones: Var, training: bool, rng: &mut R) -> Result<FusedLogits> {
        let joint = self.stream_forward(g, joints, StreamKind::Joint, training, rng)?;
        let bone = self.stream_forward(g, bones, StreamKind::Bone, training, rng)?;
        let (a, b) = (g.param(&self.store, self.alpha), g.param(&self.store, self.beta));
        let fused = two_stream_predict(g, joint, bone, a, b)?;
        Ok(FusedLogits { joint, bone, fused })
    }

    /// Eval-mode fused logits for a prepared batch.
    pub fn predict(&self, batch: &StreamBatch) -> Result<Tensor> {
        let mut g = Graph::new();
        let j = g.constant(batch.joints.clone());
        let b = g.constant(batch.bones.clone());
        // Eval mode never draws from the generator.
        let mut rng = rng_for(0, &[]);
        let out = self.forward(&mut g, j, b, false, &mut rng)?;
        Ok(g.value(out.fused).clone())
    }
}
