//! Synthetic typing corpora.
//!
//! A person is a [`StyleParams`]: resting posture, hand proportions, stroke
//! timing, finger assignment, jitter and detector-score behaviour. A sentence
//! is a key sequence on a 26-key virtual keyboard. Every person types the same
//! sentences, so sentence identity lives in which fingers move when, while
//! person identity lives only in how they move.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::hand_graph::{finger_joint, wrist, Hands, FINGERS, JOINTS_PER_FINGER, JOINTS_PER_HAND};
use crate::seed::{rng_for, splitmix64};
use crate::skeleton::{
    write_sample, DatasetManifest, InputMode, JointSample, ManifestRecord, SampleLabels, CHANNELS,
};

pub const NUM_KEYS: usize = 26;
pub const KEY_COLUMNS: usize = 10;
const ROW_LENGTHS: [usize; 3] = [10, 9, 7];
pub const DEFAULT_DELTA_STYLE: f64 = 0.15;
/// Pixel scale that offset-type style parameters are measured against.
pub const POSTURE_REFERENCE_PX: f64 = 100.0;
const FINGER_REFERENCE_PX: f64 = 20.0;
const MIN_SCORE: f64 = 0.05;

/// Style parameters that take one of four separated levels, chosen by the
/// bits of a bijective mix of the person seed. Distinct seeds always differ
/// in at least one of them by at least `delta` (relative).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum LatticeParam {
    StrokeDuration,
    Asymmetry,
    Dwell,
    Gap,
    Coupling,
    PressDepth,
    HandScale,
    JitterScale,
    Degradation,
    Rotation,
    WristX,
    WristY,
    FingerLength(usize),
    FingerBaseX(usize),
    FingerBaseY(usize),
    FingerCurl(usize),
}

const LATTICE: [LatticeParam; 32] = {
    use LatticeParam::*;
    [
        StrokeDuration,
        Asymmetry,
        Dwell,
        Gap,
        Coupling,
        PressDepth,
        HandScale,
        JitterScale,
        Degradation,
        Rotation,
        WristX,
        WristY,
        FingerLength(0),
        FingerLength(1),
        FingerLength(2),
        FingerLength(3),
        FingerLength(4),
        FingerBaseX(0),
        FingerBaseX(1),
        FingerBaseX(2),
        FingerBaseX(3),
        FingerBaseX(4),
        FingerBaseY(0),
        FingerBaseY(1),
        FingerBaseY(2),
        FingerBaseY(3),
        FingerBaseY(4),
        FingerCurl(0),
        FingerCurl(1),
        FingerCurl(2),
        FingerCurl(3),
        FingerCurl(4),
    ]
};

/// How a lattice level maps to a value.
enum Scale {
    /// `base·(1+δ)^level`.
    Ratio(f64),
    /// `(level − 1.5)·δ·reference` pixels.
    Offset(f64),
}

impl LatticeParam {
    fn scale(self) -> Scale {
        use LatticeParam::*;
        match self {
            StrokeDuration => Scale::Ratio(0.24),
            Asymmetry => Scale::Ratio(0.30),
            Dwell => Scale::Ratio(0.12),
            Gap => Scale::Ratio(0.10),
            Coupling => Scale::Ratio(0.04),
            PressDepth => Scale::Ratio(8.0),
            HandScale => Scale::Ratio(0.85),
            JitterScale => Scale::Ratio(0.6),
            Degradation => Scale::Ratio(0.02),
            Rotation => Scale::Offset(1.0),
            WristX | WristY => Scale::Offset(POSTURE_REFERENCE_PX),
            FingerLength(_) => Scale::Ratio(0.8),
            FingerBaseX(_) | FingerBaseY(_) | FingerCurl(_) => Scale::Offset(FINGER_REFERENCE_PX),
        }
    }
}

/// Per-person typing style.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleParams {
    pub delta: f64,
    /// Lattice levels in [`LATTICE`] order.
    levels: [u8; 32],
    /// Finger (0 = thumb … 4 = little) that types each key column, per hand
    /// for two-handed typing is derived from this.
    pub column_finger: [usize; KEY_COLUMNS],
    /// Fraction of the fingertip displacement followed by the three proximal
    /// joints of each finger.
    pub follow: [[f64; JOINTS_PER_FINGER - 1]; FINGERS],
    /// Relative jitter of each joint of one hand; multiplied by the jitter scale.
    pub joint_jitter: [f64; JOINTS_PER_HAND],
    /// Global multiplier applied to every jitter std (corpus difficulty knob).
    pub jitter_gain: f64,
}

impl StyleParams {
    fn lattice(&self, p: LatticeParam) -> f64 {
        let i = LATTICE.iter().position(|&q| q == p).expect("lattice parameter");
        let level = self.levels[i] as f64;
        match p.scale() {
            Scale::Ratio(base) => base * (1.0 + self.delta).powf(level),
            Scale::Offset(reference) => (level - 1.5) * self.delta * reference,
        }
    }

    /// Seconds per keystroke, including the pause after it.
    pub fn stroke_duration(&self) -> f64 {
        self.lattice(LatticeParam::StrokeDuration)
    }

    /// Fraction of the motion spent reaching for the key.
    pub fn asymmetry(&self) -> f64 {
        self.lattice(LatticeParam::Asymmetry)
    }

    pub fn dwell(&self) -> f64 {
        self.lattice(LatticeParam::Dwell)
    }

    pub fn gap(&self) -> f64 {
        self.lattice(LatticeParam::Gap)
    }

    /// Fraction of a stroke that the wrist and idle fingers of the same hand follow.
    pub fn coupling(&self) -> f64 {
        self.lattice(LatticeParam::Coupling)
    }

    pub fn press_depth(&self) -> f64 {
        self.lattice(LatticeParam::PressDepth)
    }

    pub fn hand_scale(&self) -> f64 {
        self.lattice(LatticeParam::HandScale)
    }

    /// Jitter std in pixels for a joint of either hand.
    pub fn jitter_std(&self, joint: usize) -> f64 {
        self.jitter_gain * self.lattice(LatticeParam::JitterScale) * self.joint_jitter[joint % JOINTS_PER_HAND]
    }

    /// Score lost per pixel/frame of joint speed.
    pub fn degradation(&self) -> f64 {
        self.lattice(LatticeParam::Degradation)
    }

    /// Posture offsets in pixels: wrist, then per finger `(base x, base y, curl)`.
    pub fn posture_offsets(&self) -> Vec<f64> {
        use LatticeParam::*;
        let mut v = vec![self.lattice(WristX), self.lattice(WristY)];
        for f in 0..FINGERS {
            v.extend([self.lattice(FingerBaseX(f)), self.lattice(FingerBaseY(f)), self.lattice(FingerCurl(f))]);
        }
        v
    }

    /// Largest relative difference over the lattice parameters. Offsets are
    /// compared against their reference pixel scale.
    pub fn separation(&self, other: &StyleParams) -> f64 {
        LATTICE
            .iter()
            .map(|&p| {
                let (a, b) = (self.lattice(p), other.lattice(p));
                match p.scale() {
                    Scale::Ratio(_) => (a - b).abs() / a.min(b),
                    Scale::Offset(reference) => (a - b).abs() / reference,
                }
            })
            .fold(0.0, f64::max)
    }

    /// All numeric parameters as one vector, for distance comparisons.
    pub fn parameter_vector(&self) -> Vec<f64> {
        let mut v: Vec<f64> = LATTICE.iter().map(|&p| self.lattice(p)).collect();
        v.extend(self.column_finger.iter().map(|&f| f as f64));
        v.extend(self.follow.iter().flatten());
        v.extend(self.joint_jitter);
        v
    }

    /// Resting joint positions `(x, y, z)` for every joint of `hands`.
    pub fn rest_pose(&self, hands: Hands) -> Vec<[f64; 3]> {
        let mut pose = vec![[0.0; 3]; hands.num_vertices()];
        for h in 0..hands.count() {
            let (cx, mirror) = match (hands, h) {
                (Hands::One, _) => (160.0, 1.0),
                (Hands::Two, 0) => (95.0, -1.0),
                (Hands::Two, _) => (225.0, 1.0),
            };
            let s = self.hand_scale();
            let rot = self.lattice(LatticeParam::Rotation).to_radians() * 4.0;
            let (sin, cos) = rot.sin_cos();
            let place = |dx: f64, dy: f64| -> (f64, f64) {
                let (dx, dy) = (dx * mirror, dy);
                (dx * cos - dy * sin, dx * sin + dy * cos)
            };
            let wx = cx + self.lattice(LatticeParam::WristX) * mirror;
            let wy = 205.0 + self.lattice(LatticeParam::WristY);
            pose[wrist(h)] = [wx, wy, 0.0];
            for f in 0..FINGERS {
                let (bx, by) = FINGER_BASES[f];
                let bx = bx * s + self.lattice(LatticeParam::FingerBaseX(f));
                let by = by * s + self.lattice(LatticeParam::FingerBaseY(f));
                let len = self.lattice(LatticeParam::FingerLength(f)) * s;
                let curl = self.lattice(LatticeParam::FingerCurl(f));
                let (ux, uy) = FINGER_DIRECTIONS[f];
                let (mut px, mut py) = (bx, by);
                for j in 0..JOINTS_PER_FINGER {
                    if j > 0 {
                        px += ux * SEGMENTS[f][j - 1] * len;
                        py += uy * SEGMENTS[f][j - 1] * len;
                    }
                    // Curl bends the distal joints back towards the palm.
                    let bend = if j >= 2 { curl * (j - 1) as f64 / 2.0 } else { 0.0 };
                    let (ox, oy) = place(px, py + bend);
                    pose[finger_joint(h, f, j)] = [wx + ox, wy + oy, 0.0];
                }
            }
        }
        pose
    }

    /// Finger and hand that type `column` for the given hand count.
    pub fn typing_finger(&self, hands: Hands, column: usize) -> (usize, usize) {
        match hands {
            Hands::One => (0, self.column_finger[column]),
            Hands::Two => {
                // Left hand covers columns 0-4 (mirrored), right hand 5-9.
                if column < KEY_COLUMNS / 2 {
                    (0, self.column_finger[KEY_COLUMNS - 1 - 2 * column])
                } else {
                    (1, self.column_finger[2 * (column - KEY_COLUMNS / 2)])
                }
            }
        }
    }
}

// Finger base offsets from the wrist (pixels, right hand, unit scale).
const FINGER_BASES: [(f64, f64); FINGERS] = [(-30.0, -22.0), (-18.0, -58.0), (0.0, -62.0), (17.0, -58.0), (31.0, -48.0)];
const FINGER_DIRECTIONS: [(f64, f64); FINGERS] = [(-0.6, -0.8), (-0.1, -0.995), (0.0, -1.0), (0.1, -0.995), (0.22, -0.975)];
// Segment lengths base→tip, pixels at unit finger length.
const SEGMENTS: [[f64; JOINTS_PER_FINGER - 1]; FINGERS] =
    [[16.0, 13.0, 10.0], [24.0, 15.0, 11.0], [26.0, 16.0, 11.0], [24.0, 15.0, 10.0], [19.0, 12.0, 9.0]];

/// Deterministic style for `seed`, with lattice spacing `delta`.
pub fn make_person_style(seed: u64, delta: f64) -> StyleParams {
    let bits = splitmix64(seed);
    let mut levels = [0u8; 32];
    for (i, l) in levels.iter_mut().enumerate() {
        *l = ((bits >> (2 * i)) & 0b11) as u8;
    }
    let mut rng = rng_for(seed, &[0x5717e]);
    // Four distinct cut points split the ten columns into five finger blocks.
    let mut cuts: Vec<usize> = rand::seq::index::sample(&mut rng, KEY_COLUMNS - 1, FINGERS - 1)
        .into_iter()
        .map(|c| c + 1)
        .collect();
    cuts.sort_unstable();
    let mut column_finger = [0; KEY_COLUMNS];
    for (c, slot) in column_finger.iter_mut().enumerate() {
        *slot = cuts.iter().filter(|&&cut| c >= cut).count();
    }
    let mut follow = [[0.0; JOINTS_PER_FINGER - 1]; FINGERS];
    for f in &mut follow {
        for (j, v) in f.iter_mut().enumerate() {
            let base = (j + 1) as f64 / JOINTS_PER_FINGER as f64;
            *v = (base * rng.random_range(0.7..1.3)).min(0.95);
        }
    }
    let mut joint_jitter = [0.0; JOINTS_PER_HAND];
    for j in &mut joint_jitter {
        *j = rng.random_range(0.5..1.5);
    }
    StyleParams {
        delta,
        levels,
        column_finger,
        follow,
        joint_jitter,
        jitter_gain: 1.0,
    }
}

/// Key centres on the virtual keyboard and the column each key belongs to.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyLayout {
    pub positions: Vec<[f64; 2]>,
    pub columns: Vec<usize>,
}

impl KeyLayout {
    /// Three staggered rows of 10, 9 and 7 keys above the resting fingertips.
    pub fn standard(hands: Hands) -> Self {
        let (x0, pitch) = match hands {
            Hands::One => (105.0, 12.0),
            Hands::Two => (70.0, 19.0),
        };
        let mut positions = Vec::with_capacity(NUM_KEYS);
        let mut columns = Vec::with_capacity(NUM_KEYS);
        for (r, &len) in ROW_LENGTHS.iter().enumerate() {
            for c in 0..len {
                positions.push([x0 + c as f64 * pitch + r as f64 * pitch / 3.0, 72.0 + r as f64 * 13.0]);
                columns.push(c);
            }
        }
        Self { positions, columns }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sentence {
    pub id: u32,
    pub keys: Vec<usize>,
}

impl Sentence {
    pub fn new(id: u32, keys: Vec<usize>) -> Result<Self> {
        if keys.is_empty() {
            return Err(Error::invalid("a sentence needs at least one key"));
        }
        if let Some(k) = keys.iter().find(|&&k| k >= NUM_KEYS) {
            return Err(Error::invalid(format!("key {k} outside the {NUM_KEYS}-key layout")));
        }
        Ok(Self { id, keys })
    }

    pub fn random<R: Rng + ?Sized>(id: u32, len: usize, rng: &mut R) -> Result<Self> {
        Self::new(id, (0..len).map(|_| rng.random_range(0..NUM_KEYS)).collect())
    }
}

/// Smooth reach-hold-return profile over `frames` frames: 0 at the first and
/// last frame, exactly 1 during the hold.
pub fn stroke_profile(frames: usize, asymmetry: f64, dwell: f64, gap: f64) -> Vec<f64> {
    let frames = frames.max(4);
    let gap_f = ((gap * frames as f64).round() as usize).min(frames - 3);
    let active = frames - gap_f;
    let hold = ((dwell * active as f64).round() as usize).clamp(1, active - 2);
    let moving = active - hold;
    let rise = ((asymmetry * moving as f64).round() as usize).clamp(1, moving - 1);
    let fall = moving - rise;
    let mut s = Vec::with_capacity(frames);
    for k in 0..rise {
        s.push(0.5 - 0.5 * (std::f64::consts::PI * k as f64 / rise as f64).cos());
    }
    s.extend(std::iter::repeat_n(1.0, hold));
    for k in 0..fall {
        s.push(0.5 + 0.5 * (std::f64::consts::PI * (k + 1) as f64 / fall as f64).cos());
    }
    s.extend(std::iter::repeat_n(0.0, gap_f));
    s
}

/// Generator knobs.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub fps: f64,
    pub delta_style: f64,
    /// Multiplies every person's jitter.
    pub jitter_gain: f64,
    pub sentence_len: (usize, usize),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            fps: 30.0,
            delta_style: DEFAULT_DELTA_STYLE,
            jitter_gain: 1.0,
            sentence_len: (6, 10),
        }
    }
}

/// Hand count implied by a mode: 2D corpora are one-handed, 3D corpora
/// two-handed.
pub fn hands_for_mode(mode: InputMode) -> Hands {
    match mode {
        InputMode::Score2d => Hands::One,
        InputMode::Xyz3d => Hands::Two,
    }
}

/// Noise-free joint positions of one typed sentence, frame-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub frames: usize,
    pub joints: usize,
    pub positions: Vec<[f64; 3]>,
}

impl Trajectory {
    pub fn at(&self, t: usize, v: usize) -> [f64; 3] {
        self.positions[t * self.joints + v]
    }
}

/// Frames of one keystroke for `style` at `fps`.
pub fn stroke_frames(style: &StyleParams, fps: f64) -> usize {
    ((fps * style.stroke_duration()).round() as usize).max(4)
}

/// Kinematics without jitter: per keystroke the assigned fingertip moves from
/// rest to the key and back along the style's stroke profile, the rest of that
/// finger follows by fixed fractions and the wrist and idle fingers of the
/// same hand by the coupling fraction.
pub fn noiseless_trajectory(
    style: &StyleParams,
    sentence: &Sentence,
    layout: &KeyLayout,
    hands: Hands,
    fps: f64,
) -> Result<Trajectory> {
    if !fps.is_finite() || fps <= 0.0 {
        return Err(Error::invalid(format!("fps must be positive, got {fps}")));
    }
    if let Some(k) = sentence.keys.iter().find(|&&k| k >= layout.len()) {
        return Err(Error::invalid(format!("key {k} outside the layout")));
    }
    let nv = hands.num_vertices();
    let rest = style.rest_pose(hands);
    let per_stroke = stroke_frames(style, fps);
    let profile = stroke_profile(per_stroke, style.asymmetry(), style.dwell(), style.gap());
    let frames = per_stroke * sentence.keys.len();
    let mut positions = vec![[0.0f64; 3]; frames * nv];
    for (k, &key) in sentence.keys.iter().enumerate() {
        let (hand, finger) = style.typing_finger(hands, layout.columns[key]);
        let base = finger_joint(hand, finger, 0);
        let tip = finger_joint(hand, finger, JOINTS_PER_FINGER - 1);
        let target = layout.positions[key];
        let d = [target[0] - rest[tip][0], target[1] - rest[tip][1], -style.press_depth()];
        for (i, &s) in profile.iter().enumerate() {
            let t = k * per_stroke + i;
            for v in 0..nv {
                let w = if v / JOINTS_PER_HAND != hand {
                    0.0
                } else if v == tip {
                    1.0
                } else if (base..tip).contains(&v) {
                    style.follow[finger][v - base]
                } else {
                    style.coupling()
                };
                let p = &mut positions[t * nv + v];
                for c in 0..3 {
                    p[c] = rest[v][c] + s * w * d[c];
                }
            }
        }
    }
    Ok(Trajectory {
        frames,
        joints: nv,
        positions,
    })
}

/// Renders one sentence typed by one person.
pub fn synth_sequence<R: Rng + ?Sized>(
    style: &StyleParams,
    sentence: &Sentence,
    layout: &KeyLayout,
    hands: Hands,
    rng: &mut R,
    fps: f64,
    mode: InputMode,
) -> Result<JointSample> {
    let traj = noiseless_trajectory(style, sentence, layout, hands, fps)?;
    let (frames, nv) = (traj.frames, traj.joints);
    let clean = &traj.positions;
    let mut data = Vec::with_capacity(frames * nv * CHANNELS);
    let normals: Vec<Normal<f64>> = (0..nv)
        .map(|v| Normal::new(0.0, style.jitter_std(v)).map_err(|e| Error::invalid(e.to_string())))
        .collect::<Result<_>>()?;
    for t in 0..frames {
        for v in 0..nv {
            let p = clean[t * nv + v];
            let q = if t == 0 { clean[(t + 1).min(frames - 1) * nv + v] } else { clean[(t - 1) * nv + v] };
            let speed = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
            let (jx, jy, jz) = (normals[v].sample(rng), normals[v].sample(rng), normals[v].sample(rng));
            data.push((p[0] + jx) as f32);
            data.push((p[1] + jy) as f32);
            data.push(match mode {
                InputMode::Score2d => (1.0 - style.degradation() * speed).clamp(MIN_SCORE, 1.0) as f32,
                InputMode::Xyz3d => (p[2] + jz) as f32,
            });
        }
    }
    JointSample::new(
        frames,
        nv,
        data,
        mode,
        SampleLabels {
            person_id: 0,
            sentence_id: sentence.id,
            repetition_id: 0,
        },
    )
}

/// Everything needed to render a corpus; the same object regenerates any
/// sample on demand.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub seed: u64,
    pub mode: InputMode,
    pub hands: Hands,
    pub config: SynthConfig,
    pub styles: Vec<StyleParams>,
    pub sentences: Vec<Sentence>,
    pub reps: usize,
    pub layout: KeyLayout,
}

impl Corpus {
    pub fn new(n_persons: usize, n_sentences: usize, n_reps: usize, seed: u64, mode: InputMode, config: SynthConfig) -> Result<Self> {
        if n_persons == 0 || n_sentences == 0 || n_reps == 0 {
            return Err(Error::invalid("persons, sentences and repetitions must all be >= 1"));
        }
        let (lo, hi) = config.sentence_len;
        if lo == 0 || hi < lo {
            return Err(Error::invalid(format!("bad sentence length range {lo}..={hi}")));
        }
        let hands = hands_for_mode(mode);
        let styles = (0..n_persons)
            .map(|p| {
                let mut s = make_person_style(crate::seed::derive_seed(seed, &[0, p as u64]), config.delta_style);
                s.jitter_gain = config.jitter_gain;
                s
            })
            .collect();
        let sentences = (0..n_sentences)
            .map(|s| {
                let mut rng = rng_for(seed, &[1, s as u64]);
                let len = rng.random_range(lo..=hi);
                Sentence::random(s as u32, len, &mut rng)
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            seed,
            mode,
            hands,
            config,
            styles,
            sentences,
            reps: n_reps,
            layout: KeyLayout::standard(hands),
        })
    }

    pub fn len(&self) -> usize {
        self.styles.len() * self.sentences.len() * self.reps
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Random stream of one (person, sentence, repetition) triple.
    pub fn sample_rng(&self, person: usize, sentence: usize, rep: usize) -> ChaCha8Rng {
        rng_for(self.seed, &[2, person as u64, sentence as u64, rep as u64])
    }

    pub fn sample(&self, person: usize, sentence: usize, rep: usize) -> Result<JointSample> {
        let mut rng = self.sample_rng(person, sentence, rep);
        let mut s = synth_sequence(
            &self.styles[person],
            &self.sentences[sentence],
            &self.layout,
            self.hands,
            &mut rng,
            self.config.fps,
            self.mode,
        )?;
        s.labels = SampleLabels {
            person_id: person as u32,
            sentence_id: sentence as u32,
            repetition_id: rep as u32,
        };
        Ok(s)
    }

    /// All samples in (person, sentence, repetition) order.
    pub fn samples(&self) -> Result<Vec<JointSample>> {
        let mut out = Vec::with_capacity(self.len());
        for p in 0..self.styles.len() {
            for s in 0..self.sentences.len() {
                for r in 0..self.reps {
                    out.push(self.sample(p, s, r)?);
                }
            }
        }
        Ok(out)
    }
}

pub const MANIFEST_NAME: &str = "manifest.tsv";

/// Writes every sample of a new corpus under `out_dir` together with
/// `manifest.tsv`, returning the manifest.
pub fn generate_corpus(
    out_dir: impl AsRef<Path>,
    n_persons: usize,
    n_sentences: usize,
    n_reps: usize,
    seed: u64,
    mode: InputMode,
    config: SynthConfig,
) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    let corpus = Corpus::new(n_persons, n_sentences, n_reps, seed, mode, config)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::with_capacity(corpus.len());
    for p in 0..n_persons {
        for s in 0..n_sentences {
            for r in 0..n_reps {
                let sample = corpus.sample(p, s, r)?;
                let path = out_dir.join(format!("p{p:03}_s{s:03}_r{r:03}.skel"));
                write_sample(&path, &sample)?;
                records.push(ManifestRecord {
                    path,
                    labels: sample.labels,
                    mode,
                    frames: sample.frames(),
                    joints: sample.joints(),
                });
            }
        }
    }
    let manifest = DatasetManifest { records };
    manifest.save(out_dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}
