//! Joint sequences, bone derivation, frame sampling, occlusion noise and the
//! on-disk sample/manifest formats.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::hand_graph::{finger_joint, HandGraph, Hands, JOINTS_PER_FINGER};

pub const SAMPLE_MAGIC: &[u8; 4] = b"SKEL";
pub const SAMPLE_VERSION: u32 = 1;
pub const CHANNELS: usize = 3;
const HEADER_LEN: usize = 4 + 4 + 3 * 4 + 1;

/// Meaning of the third channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InputMode {
    /// `(x, y, score)` with the detector score in `[0, 1]`.
    Score2d,
    /// `(x, y, z)`.
    Xyz3d,
}

impl InputMode {
    pub fn byte(self) -> u8 {
        match self {
            InputMode::Score2d => 0,
            InputMode::Xyz3d => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(InputMode::Score2d),
            1 => Some(InputMode::Xyz3d),
            _ => None,
        }
    }
}

impl std::str::FromStr for InputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "2d" => Ok(InputMode::Score2d),
            "3d" => Ok(InputMode::Xyz3d),
            _ => Err(Error::invalid(format!("unknown mode `{s}` (expected 2d or 3d)"))),
        }
    }
}

impl std::fmt::Display for InputMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InputMode::Score2d => "2d",
            InputMode::Xyz3d => "3d",
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SampleLabels {
    pub person_id: u32,
    pub sentence_id: u32,
    pub repetition_id: u32,
}

/// A `T × V × 3` joint sequence in `(frame, joint, channel)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct JointSample {
    frames: usize,
    joints: usize,
    data: Vec<f32>,
    pub mode: InputMode,
    pub labels: SampleLabels,
}

impl JointSample {
    pub fn new(frames: usize, joints: usize, data: Vec<f32>, mode: InputMode, labels: SampleLabels) -> Result<Self> {
        if frames == 0 {
            return Err(Error::invalid("a joint sample needs at least one frame"));
        }
        Hands::from_vertices(joints)?;
        if data.len() != frames * joints * CHANNELS {
            return Err(Error::shape(format!(
                "{frames}x{joints}x{CHANNELS} sample given {} values",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("joint sample contains non-finite values"));
        }
        if mode == InputMode::Score2d && data.chunks(CHANNELS).any(|p| !(0.0..=1.0).contains(&p[2])) {
            return Err(Error::invalid("2D scores must lie in [0, 1]"));
        }
        Ok(Self {
            frames,
            joints,
            data,
            mode,
            labels,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// The three channels of `joint` at `frame`.
    pub fn point(&self, frame: usize, joint: usize) -> [f32; CHANNELS] {
        let o = (frame * self.joints + joint) * CHANNELS;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// Keeps only the listed frames, in order.
    pub fn select_frames(&self, indices: &[usize]) -> Result<Self> {
        let row = self.joints * CHANNELS;
        let mut data = Vec::with_capacity(indices.len() * row);
        for &t in indices {
            if t >= self.frames {
                return Err(Error::invalid(format!("frame {t} out of range for {} frames", self.frames)));
            }
            data.extend_from_slice(&self.data[t * row..(t + 1) * row]);
        }
        Self::new(indices.len(), self.joints, data, self.mode, self.labels)
    }

    /// `[C, T, V]` layout as consumed by the network.
    pub fn to_channel_major(&self) -> Vec<f64> {
        channel_major(&self.data, self.frames, self.joints)
    }
}

fn channel_major(data: &[f32], frames: usize, verts: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for t in 0..frames {
        for v in 0..verts {
            for c in 0..CHANNELS {
                out[(c * frames + t) * verts + v] = data[(t * verts + v) * CHANNELS + c] as f64;
            }
        }
    }
    out
}

/// Bone vectors: one per edge, child minus parent.
#[derive(Clone, Debug, PartialEq)]
pub struct BoneSample {
    frames: usize,
    data: Vec<f32>,
    edges: Vec<(usize, usize)>,
    num_joints: usize,
}

impl BoneSample {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn num_bones(&self) -> usize {
        self.edges.len()
    }

    /// Bone slot `b` joins `edges()[b].0` (parent) to `edges()[b].1` (child).
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn bone(&self, frame: usize, slot: usize) -> [f32; CHANNELS] {
        let o = (frame * self.edges.len() + slot) * CHANNELS;
        [self.data[o], self.data[o + 1], self.data[o + 2]]
    }

    /// Places each bone on its child joint so the bone stream shares the joint
    /// graph; wrist slots carry zeros.
    pub fn to_vertex_layout(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.frames * self.num_joints * CHANNELS];
        for t in 0..self.frames {
            for (slot, &(_, child)) in self.edges.iter().enumerate() {
                let src = (t * self.edges.len() + slot) * CHANNELS;
                let dst = (t * self.num_joints + child) * CHANNELS;
                out[dst..dst + CHANNELS].copy_from_slice(&self.data[src..src + CHANNELS]);
            }
        }
        out
    }

    /// `[C, T, V]` in vertex layout.
    pub fn to_channel_major(&self) -> Vec<f64> {
        channel_major(&self.to_vertex_layout(), self.frames, self.num_joints)
    }
}

/// Bone vectors of `j` over the edges of `g`. Coordinates are differenced
/// child minus parent; in 2D mode the score is the product of both endpoint
/// scores, in 3D mode all three channels are differenced.
pub fn derive_bones(j: &JointSample, g: &HandGraph) -> Result<BoneSample> {
    if j.joints() != g.num_vertices() {
        return Err(Error::shape(format!(
            "sample has {} joints but the graph has {} vertices",
            j.joints(),
            g.num_vertices()
        )));
    }
    let edges = g.edges().to_vec();
    let mut data = Vec::with_capacity(j.frames() * edges.len() * CHANNELS);
    for t in 0..j.frames() {
        for &(p, c) in &edges {
            let (pp, cp) = (j.point(t, p), j.point(t, c));
            data.push(cp[0] - pp[0]);
            data.push(cp[1] - pp[1]);
            data.push(match j.mode {
                InputMode::Score2d => cp[2] * pp[2],
                InputMode::Xyz3d => cp[2] - pp[2],
            });
        }
    }
    Ok(BoneSample {
        frames: j.frames(),
        data,
        edges,
        num_joints: j.joints(),
    })
}

/// Segment-random frame sampling: `[0, t_full)` is cut into `t_out` equal
/// segments and one index is drawn uniformly from each, so indices are
/// non-decreasing and short clips repeat frames proportionally.
pub fn sample_frames<R: Rng + ?Sized>(t_full: usize, t_out: usize, rng: &mut R) -> Vec<usize> {
    assert!(t_full >= 1, "cannot sample from an empty clip");
    let seg = t_full as f64 / t_out as f64;
    (0..t_out)
        .map(|i| {
            let u: f64 = rng.random();
            let pos = (i as f64 + u) * seg;
            // Guard the upper segment edge against rounding.
            let upper = (((i + 1) as f64 * seg).ceil() as usize).clamp(1, t_full) - 1;
            (pos.floor() as usize).min(upper)
        })
        .collect()
}

/// Occlusion tendency per joint: thumb joints 3, index-finger joints 2, all
/// others 1, normalized to sum to one.
pub fn default_occlusion_weights(hands: Hands) -> Vec<f64> {
    let mut w = vec![1.0; hands.num_vertices()];
    for h in 0..hands.count() {
        for j in 0..JOINTS_PER_FINGER {
            w[finger_joint(h, 0, j)] = 3.0;
            w[finger_joint(h, 1, j)] = 2.0;
        }
    }
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}

/// Draws how many joints fail (uniform over 0, 1, 2) and which ones
/// (weighted, without replacement).
pub fn draw_occluded_joints<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Result<Vec<usize>> {
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || !weights.iter().any(|w| *w > 0.0) {
        return Err(Error::invalid("occlusion weights must be non-negative with at least one positive"));
    }
    let k = rng.random_range(0..3usize);
    let mut remaining: Vec<f64> = weights.to_vec();
    let mut chosen = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = remaining.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut r = rng.random::<f64>() * total;
        let mut pick = remaining.iter().rposition(|w| *w > 0.0).expect("positive weight");
        for (i, w) in remaining.iter().enumerate() {
            if *w <= 0.0 {
                continue;
            }
            if r < *w {
                pick = i;
                break;
            }
            r -= w;
        }
        remaining[pick] = 0.0;
        chosen.push(pick);
    }
    Ok(chosen)
}

/// Simulated detector failure: zero every channel of 0–2 weighted-random
/// joints in every frame of the clip.
pub fn inject_noise<R: Rng + ?Sized>(j: &JointSample, rng: &mut R, occlusion_weights: &[f64]) -> Result<JointSample> {
    if occlusion_weights.len() != j.joints() {
        return Err(Error::shape(format!(
            "{} occlusion weights for {} joints",
            occlusion_weights.len(),
            j.joints()
        )));
    }
    let chosen = draw_occluded_joints(occlusion_weights, rng)?;
    let mut out = j.clone();
    for t in 0..j.frames() {
        for &v in &chosen {
            let o = (t * j.joints() + v) * CHANNELS;
            out.data[o..o + CHANNELS].fill(0.0);
        }
    }
    Ok(out)
}

pub fn write_sample(path: impl AsRef<Path>, j: &JointSample) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(HEADER_LEN + j.data.len() * 4);
    buf.extend_from_slice(SAMPLE_MAGIC);
    buf.extend_from_slice(&SAMPLE_VERSION.to_le_bytes());
    for d in [j.frames, j.joints, CHANNELS] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.push(j.mode.byte());
    for v in &j.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Header of a sample file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleHeader {
    pub frames: usize,
    pub joints: usize,
    pub channels: usize,
    pub mode: InputMode,
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<SampleHeader> {
    if bytes.len() < 4 || &bytes[..4] != SAMPLE_MAGIC {
        return Err(Error::format(path, "bad magic (expected SKEL)"));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let version = u32_at(4);
    if version != SAMPLE_VERSION as usize {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let mode = InputMode::from_byte(bytes[20]).ok_or_else(|| Error::format(path, format!("bad mode byte {}", bytes[20])))?;
    let header = SampleHeader {
        frames: u32_at(8),
        joints: u32_at(12),
        channels: u32_at(16),
        mode,
    };
    if header.channels != CHANNELS {
        return Err(Error::format(path, format!("expected {CHANNELS} channels, header says {}", header.channels)));
    }
    Ok(header)
}

pub fn read_sample_header(path: impl AsRef<Path>) -> Result<SampleHeader> {
    use std::io::Read;
    let path = path.as_ref();
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::with_capacity(HEADER_LEN);
    Read::by_ref(&mut f)
        .take(HEADER_LEN as u64)
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    parse_header(path, &buf)
}

/// Reads a sample file. Labels are not stored in the file and come back as
/// zero; [`DatasetManifest::load_sample`] attaches them.
pub fn read_sample(path: impl AsRef<Path>) -> Result<JointSample> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let h = parse_header(path, &bytes)?;
    let count = h
        .frames
        .checked_mul(h.joints)
        .and_then(|n| n.checked_mul(h.channels))
        .ok_or_else(|| Error::format(path, "header dimensions overflow"))?;
    let expected = HEADER_LEN + count * 4;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::format(
            path,
            format!("payload holds {} bytes beyond the {count} declared values", bytes.len() - expected),
        ));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    JointSample::new(h.frames, h.joints, data, h.mode, SampleLabels::default())
        .map_err(|e| Error::format(path, e.to_string()))
}

/// One manifest line plus the dimensions read from the file header.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub path: PathBuf,
    pub labels: SampleLabels,
    pub mode: InputMode,
    pub frames: usize,
    pub joints: usize,
}

/// List of sample files with their labels.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    /// Parses a manifest and validates every referenced file header. Relative
    /// paths resolve against the manifest's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::format(
                    path,
                    format!("line {}: expected 4 tab-separated fields, found {}", lineno + 1, fields.len()),
                ));
            }
            let num = |s: &str| {
                s.trim()
                    .parse::<u32>()
                    .map_err(|_| Error::format(path, format!("line {}: `{s}` is not a label", lineno + 1)))
            };
            let labels = SampleLabels {
                person_id: num(fields[1])?,
                sentence_id: num(fields[2])?,
                repetition_id: num(fields[3])?,
            };
            let file = base.join(fields[0]);
            let h = read_sample_header(&file)?;
            records.push(ManifestRecord {
                path: file,
                labels,
                mode: h.mode,
                frames: h.frames,
                joints: h.joints,
            });
        }
        Ok(Self { records })
    }

    /// Writes one `path<TAB>person<TAB>sentence<TAB>repetition` line per
    /// record, with paths relative to the manifest's directory when possible.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new(""));
        let mut out = Vec::new();
        for r in &self.records {
            let rel = r.path.strip_prefix(base).unwrap_or(&r.path);
            writeln!(
                out,
                "{}\t{}\t{}\t{}",
                rel.display(),
                r.labels.person_id,
                r.labels.sentence_id,
                r.labels.repetition_id
            )
            .expect("write to vec");
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Reads a record's file, checks it against the header dimensions recorded
    /// at load time, and attaches the labels.
    pub fn load_sample(&self, index: usize) -> Result<JointSample> {
        let r = self
            .records
            .get(index)
            .ok_or_else(|| Error::invalid(format!("manifest has no record {index}")))?;
        let mut s = read_sample(&r.path)?;
        if s.frames() != r.frames || s.joints() != r.joints || s.mode != r.mode {
            return Err(Error::format(&r.path, "file changed since the manifest was loaded"));
        }
        s.labels = r.labels;
        Ok(s)
    }

    pub fn load_all(&self) -> Result<Vec<JointSample>> {
        (0..self.records.len()).map(|i| self.load_sample(i)).collect()
    }

    /// Sorted distinct person ids; a person's class index is its position here.
    pub fn persons(&self) -> Vec<u32> {
        let mut p: Vec<u32> = self.records.iter().map(|r| r.labels.person_id).collect();
        p.sort_unstable();
        p.dedup();
        p
    }

    pub fn sentences(&self) -> Vec<u32> {
        let mut s: Vec<u32> = self.records.iter().map(|r| r.labels.sentence_id).collect();
        s.sort_unstable();
        s.dedup();
        s
    }
}

/// Network input for a batch: joints and bones as `[N, 3, T, V]` tensors.
#[derive(Clone, Debug)]
pub struct StreamBatch {
    pub joints: Tensor,
    pub bones: Tensor,
}

/// Samples `t_out` frames of every clip, optionally applies occlusion noise,
/// derives bones and stacks everything into stream tensors.
pub fn build_batch<R: Rng + ?Sized>(
    samples: &[&JointSample],
    graph: &HandGraph,
    t_out: usize,
    noise: Option<&[f64]>,
    rng: &mut R,
) -> Result<StreamBatch> {
    let v = graph.num_vertices();
    let per = CHANNELS * t_out * v;
    let mut joints = Vec::with_capacity(samples.len() * per);
    let mut bones = Vec::with_capacity(samples.len() * per);
    for s in samples {
        let idx = sample_frames(s.frames(), t_out, rng);
        let mut clip = s.select_frames(&idx)?;
        if let Some(w) = noise {
            clip = inject_noise(&clip, rng, w)?;
        }
        let b = derive_bones(&clip, graph)?;
        joints.extend(clip.to_channel_major());
        bones.extend(b.to_channel_major());
    }
    let shape = [samples.len(), CHANNELS, t_out, v];
    Ok(StreamBatch {
        joints: Tensor::new(&shape, joints)?,
        bones: Tensor::new(&shape, bones)?,
    })
}
