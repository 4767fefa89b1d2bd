use std::fmt;
use std::str::FromStr;

use crate::config::{parse_list, KeyValues};
use crate::error::{Error, Result};
use crate::hand_graph::{Hands, DEFAULT_SIGMA};

/// Output channels and temporal stride of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub channels: usize,
    pub stride: usize,
}

impl LayerSpec {
    pub const fn new(channels: usize, stride: usize) -> Self {
        Self { channels, stride }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.channels, self.stride)
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (c, st) = s.split_once('/').unwrap_or((s, "1"));
        let parse = |x: &str| {
            x.trim()
                .parse::<usize>()
                .map_err(|_| Error::invalid(format!("bad layer spec `{s}`, expected channels/stride")))
        };
        Ok(Self::new(parse(c)?, parse(st)?))
    }
}

/// Which graphs the spatial units convolve with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdjacencyMode {
    /// Only the normalized skeleton subsets `Ã_k`.
    Fixed,
    /// `Ã_k + B_k + C_k`, refined by the spatial non-local block where enabled.
    Adaptive,
}

impl fmt::Display for AdjacencyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AdjacencyMode::Fixed => "fixed",
            AdjacencyMode::Adaptive => "adaptive",
        })
    }
}

impl FromStr for AdjacencyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(AdjacencyMode::Fixed),
            "adaptive" => Ok(AdjacencyMode::Adaptive),
            _ => Err(Error::invalid(format!("unknown adjacency mode `{s}`"))),
        }
    }
}

/// Architecture shared by both streams.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub hands: Hands,
    /// Frames per clip at the input.
    pub frames: usize,
    pub layers: Vec<LayerSpec>,
    /// 0-based layer whose spatial unit carries the non-local block.
    pub snl_layer: Option<usize>,
    /// 0-based layer whose temporal unit carries the non-local block.
    pub tnl_layer: Option<usize>,
    /// Learned per-channel downsampler; global average pooling otherwise.
    pub downsample: bool,
    /// Hidden width of the downsampler.
    pub hidden: usize,
    pub num_classes: usize,
    pub dropout: f64,
    pub adjacency: AdjacencyMode,
    pub sigma: f64,
}

pub const FULL_LAYERS: [LayerSpec; 10] = [
    LayerSpec::new(64, 1),
    LayerSpec::new(64, 1),
    LayerSpec::new(64, 1),
    LayerSpec::new(64, 1),
    LayerSpec::new(128, 2),
    LayerSpec::new(128, 1),
    LayerSpec::new(128, 1),
    LayerSpec::new(256, 2),
    LayerSpec::new(256, 1),
    LayerSpec::new(256, 1),
];

pub const DEFAULT_FRAMES: usize = 32;
pub const DEFAULT_DROPOUT: f64 = 0.3;

impl ModelConfig {
    /// Ten layers, spatial non-local in the 8th and temporal non-local in the
    /// 10th, learned downsampler, 32 input frames.
    pub fn full(hands: Hands, num_classes: usize) -> Self {
        Self {
            in_channels: 3,
            hands,
            frames: DEFAULT_FRAMES,
            layers: FULL_LAYERS.to_vec(),
            snl_layer: Some(7),
            tnl_layer: Some(9),
            downsample: true,
            hidden: 64,
            num_classes,
            dropout: DEFAULT_DROPOUT,
            adjacency: AdjacencyMode::Adaptive,
            sigma: DEFAULT_SIGMA,
        }
    }

    /// Two layers (4 and 8 channels, the second strided and carrying both
    /// non-local blocks) on 8 frames, for gradient checks.
    pub fn tiny(hands: Hands, num_classes: usize) -> Self {
        Self {
            frames: 8,
            layers: vec![LayerSpec::new(4, 1), LayerSpec::new(8, 2)],
            snl_layer: Some(1),
            tnl_layer: Some(1),
            hidden: 6,
            ..Self::full(hands, num_classes)
        }
    }

    /// Small four-layer network used for desk-scale training runs.
    pub fn compact(hands: Hands, num_classes: usize, frames: usize) -> Self {
        Self {
            frames,
            layers: vec![
                LayerSpec::new(8, 1),
                LayerSpec::new(8, 1),
                LayerSpec::new(16, 2),
                LayerSpec::new(16, 1),
            ],
            snl_layer: Some(2),
            tnl_layer: Some(3),
            hidden: 16,
            ..Self::full(hands, num_classes)
        }
    }

    pub fn num_vertices(&self) -> usize {
        self.hands.num_vertices()
    }

    /// Frame count after every layer.
    pub fn frame_trace(&self) -> Vec<usize> {
        let mut t = self.frames;
        self.layers
            .iter()
            .map(|l| {
                t = (t - 1) / l.stride + 1;
                t
            })
            .collect()
    }

    pub fn final_channels(&self) -> usize {
        self.layers.last().map_or(self.in_channels, |l| l.channels)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.layers.is_empty() {
            return bad("a stream needs at least one layer".into());
        }
        if self.in_channels == 0 || self.frames == 0 || self.num_classes == 0 {
            return bad("channels, frames and classes must be positive".into());
        }
        if self.layers.iter().any(|l| l.channels == 0 || l.stride == 0) {
            return bad("layer channels and strides must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !self.sigma.is_finite() || self.sigma < 0.0 {
            return bad(format!("sigma {} must be non-negative", self.sigma));
        }
        for (name, l) in [("snl_layer", self.snl_layer), ("tnl_layer", self.tnl_layer)] {
            if l.is_some_and(|l| l >= self.layers.len()) {
                return bad(format!("{name} outside the {} layers", self.layers.len()));
            }
        }
        if self.snl_layer.is_some() && self.adjacency == AdjacencyMode::Fixed {
            return bad("the spatial non-local block needs the adaptive adjacency".into());
        }
        if self.tnl_layer.is_some_and(|l| self.layers[l].channels < 2) {
            return bad("the temporal non-local block needs at least 2 channels".into());
        }
        if self.downsample && self.hidden == 0 {
            return bad("downsampler hidden width must be positive".into());
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        let opt = |o: Option<usize>| o.map_or("none".to_string(), |v| v.to_string());
        kv.set("in_channels", self.in_channels);
        kv.set("vertices", self.num_vertices());
        kv.set("frames", self.frames);
        kv.set(
            "layers",
            self.layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(","),
        );
        kv.set("snl_layer", opt(self.snl_layer));
        kv.set("tnl_layer", opt(self.tnl_layer));
        kv.set("downsample", self.downsample);
        kv.set("hidden", self.hidden);
        kv.set("num_classes", self.num_classes);
        kv.set("dropout", self.dropout);
        kv.set("adjacency", self.adjacency);
        kv.set("sigma", self.sigma);
        kv
    }

    /// Reads the keys written by [`Self::to_key_values`], leaving others in `kv`.
    pub fn from_key_values(kv: &mut KeyValues) -> Result<Self> {
        let opt = |s: Option<String>| -> Result<Option<usize>> {
            match s.as_deref() {
                None | Some("none") => Ok(None),
                Some(v) => v
                    .parse()
                    .map(Some)
                    .map_err(|_| Error::invalid(format!("bad layer index `{v}`"))),
            }
        };
        let need = |v: Option<usize>, key: &str| v.ok_or_else(|| Error::invalid(format!("missing config key `{key}`")));
        let hands = Hands::from_vertices(need(kv.take("vertices")?, "vertices")?)?;
        let num_classes = need(kv.take("num_classes")?, "num_classes")?;
        let base = Self::full(hands, num_classes);
        let layers = match kv.take::<String>("layers")? {
            Some(s) => parse_list(&s)?,
            None => base.layers.clone(),
        };
        let cfg = Self {
            in_channels: kv.take_or("in_channels", base.in_channels)?,
            hands,
            frames: kv.take_or("frames", base.frames)?,
            layers,
            snl_layer: match kv.take::<String>("snl_layer")? {
                Some(s) => opt(Some(s))?,
                None => base.snl_layer,
            },
            tnl_layer: match kv.take::<String>("tnl_layer")? {
                Some(s) => opt(Some(s))?,
                None => base.tnl_layer,
            },
            downsample: kv.take_or("downsample", base.downsample)?,
            hidden: kv.take_or("hidden", base.hidden)?,
            num_classes,
            dropout: kv.take_or("dropout", base.dropout)?,
            adjacency: kv.take_or("adjacency", base.adjacency)?,
            sigma: kv.take_or("sigma", base.sigma)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Ablation variants, from the plain adaptive network up to the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// Global average pooling, no non-local blocks.
    Baseline,
    Downsample,
    DownsampleTnl,
    DownsampleSnl,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Baseline,
        Variant::Downsample,
        Variant::DownsampleTnl,
        Variant::DownsampleSnl,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Downsample => "+downsample",
            Variant::DownsampleTnl => "+downsample+TNL",
            Variant::DownsampleSnl => "+downsample+SNL",
            Variant::Full => "full",
        }
    }

    pub fn has_snl(self) -> bool {
        matches!(self, Variant::DownsampleSnl | Variant::Full)
    }

    pub fn has_tnl(self) -> bool {
        matches!(self, Variant::DownsampleTnl | Variant::Full)
    }

    pub fn has_downsample(self) -> bool {
        self != Variant::Baseline
    }

    /// Switches blocks of a full configuration off as the variant requires.
    pub fn apply(self, full: &ModelConfig) -> ModelConfig {
        ModelConfig {
            snl_layer: full.snl_layer.filter(|_| self.has_snl()),
            tnl_layer: full.tnl_layer.filter(|_| self.has_tnl()),
            downsample: self.has_downsample(),
            ..full.clone()
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase();
        Variant::ALL
            .into_iter()
            .find(|v| v.name().to_ascii_lowercase() == key || v.name().trim_start_matches('+').to_ascii_lowercase() == key)
            .ok_or_else(|| Error::invalid(format!("unknown variant `{s}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_frame_trace() {
        let c = ModelConfig::full(Hands::One, 10);
        assert_eq!(c.frame_trace(), vec![32, 32, 32, 32, 16, 16, 16, 8, 8, 8]);
        c.validate().unwrap();
    }

    #[test]
    fn key_value_round_trip() {
        for c in [ModelConfig::full(Hands::Two, 7), Variant::Baseline.apply(&ModelConfig::tiny(Hands::One, 3))] {
            let mut kv = KeyValues::parse(&c.to_key_values().to_string()).unwrap();
            assert_eq!(ModelConfig::from_key_values(&mut kv).unwrap(), c);
            kv.finish().unwrap();
        }
    }

    #[test]
    fn variants_parse_and_toggle() {
        assert_eq!("full".parse::<Variant>().unwrap(), Variant::Full);
        assert_eq!("+downsample+snl".parse::<Variant>().unwrap(), Variant::DownsampleSnl);
        assert_eq!("downsample".parse::<Variant>().unwrap(), Variant::Downsample);
        let b = Variant::Baseline.apply(&ModelConfig::full(Hands::One, 3));
        assert_eq!((b.snl_layer, b.tnl_layer, b.downsample), (None, None, false));
    }
}
