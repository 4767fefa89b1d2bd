//! Evaluation protocols: sentence- and repetition-level splits, repeated
//! noisy or clean testing, and variant ablations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Display};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{grad_check_params, GradCheckReport, Graph, ParamKind, Tensor};
use crate::config::{parse_list, KeyValues};
use crate::error::{Error, Result};
use crate::hand_graph::{HandGraph, Hands};
use crate::model::{ModelConfig, StyleNet, Variant};
use crate::seed::rng_for;
use crate::skeleton::{build_batch, default_occlusion_weights, DatasetManifest, JointSample, StreamBatch};
use crate::trainer::{argmax_rows, cross_entropy, train, LabeledSample, TrainConfig};

const SPLIT_STREAM: u64 = 0x5350;
const EVAL_STREAM: u64 = 0x4556;

/// Default number of evaluation trials.
pub const DEFAULT_TRIALS: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    /// Whole sentences are held out.
    UnseenSentences,
    /// Repetitions of every sentence are dealt to all three sets.
    SeenSentences,
}

impl Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::UnseenSentences => "unseen",
            Protocol::SeenSentences => "seen",
        })
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "unseen" | "unseen_sentences" => Ok(Protocol::UnseenSentences),
            "seen" | "seen_sentences" => Ok(Protocol::SeenSentences),
            other => Err(Error::invalid(format!("unknown protocol `{other}`"))),
        }
    }
}

/// Train/validation/test membership as manifest record indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExperimentSplit {
    pub protocol: Protocol,
    /// Sentence counts (unseen) or repetition counts (seen) per set.
    pub spec: [usize; 3],
    pub seed: u64,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn check_counts(counts: [usize; 3], total: usize, what: &str) -> Result<()> {
    if counts.iter().sum::<usize>() != total {
        return Err(Error::invalid(format!("{what} counts {counts:?} do not sum to {total}")));
    }
    if counts.contains(&0) {
        return Err(Error::invalid(format!("{what} counts {counts:?} must all be at least 1")));
    }
    Ok(())
}

/// Holds out whole sentences: the corpus sentences are permuted by `seed`
/// and dealt `counts` to train, validation and test.
pub fn split_unseen(manifest: &DatasetManifest, counts: [usize; 3], seed: u64) -> Result<ExperimentSplit> {
    let mut sentences = manifest.sentences();
    check_counts(counts, sentences.len(), "sentence")?;
    sentences.shuffle(&mut rng_for(seed, &[SPLIT_STREAM]));
    let role: BTreeMap<u32, usize> = sentences
        .iter()
        .enumerate()
        .map(|(i, &s)| (s, usize::from(i >= counts[0]) + usize::from(i >= counts[0] + counts[1])))
        .collect();
    let mut sets: [Vec<usize>; 3] = Default::default();
    for (i, r) in manifest.records.iter().enumerate() {
        sets[role[&r.labels.sentence_id]].push(i);
    }
    let [train, val, test] = sets;
    let split = ExperimentSplit { protocol: Protocol::UnseenSentences, spec: counts, seed, train, val, test };
    split.validate(manifest)?;
    Ok(split)
}

/// Deals the repetitions of every (person, sentence) pair, shuffled by
/// `seed`, as `reps` to train, validation and test.
pub fn split_seen(manifest: &DatasetManifest, reps: [usize; 3], seed: u64) -> Result<ExperimentSplit> {
    let mut groups: BTreeMap<(u32, u32), Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        groups.entry((r.labels.person_id, r.labels.sentence_id)).or_default().push(i);
    }
    let total = groups.values().next().map_or(0, Vec::len);
    if let Some(((p, s), g)) = groups.iter().find(|(_, g)| g.len() != total) {
        return Err(Error::invalid(format!("person {p} sentence {s} has {} repetitions, others {total}", g.len())));
    }
    check_counts(reps, total, "repetition")?;
    let mut sets: [Vec<usize>; 3] = Default::default();
    for (&(p, s), members) in &mut groups {
        members.shuffle(&mut rng_for(seed, &[SPLIT_STREAM, u64::from(p), u64::from(s)]));
        sets[0].extend(&members[..reps[0]]);
        sets[1].extend(&members[reps[0]..reps[0] + reps[1]]);
        sets[2].extend(&members[reps[0] + reps[1]..]);
    }
    for s in &mut sets {
        s.sort_unstable();
    }
    let [train, val, test] = sets;
    let split = ExperimentSplit { protocol: Protocol::SeenSentences, spec: reps, seed, train, val, test };
    split.validate(manifest)?;
    Ok(split)
}

impl ExperimentSplit {
    pub fn sets(&self) -> [&[usize]; 3] {
        [&self.train, &self.val, &self.test]
    }

    /// Checks disjointness, coverage and the protocol's own guarantees.
    pub fn validate(&self, manifest: &DatasetManifest) -> Result<()> {
        let n = manifest.len();
        let mut seen = vec![false; n];
        for &i in self.sets().iter().flat_map(|s| s.iter()) {
            if i >= n {
                return Err(Error::Invariant(format!("split refers to record {i} of a {n}-record manifest")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Invariant(format!("record {i} appears in more than one set")));
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Invariant(format!("record {i} belongs to no set")));
        }
        let labels = |set: &[usize]| -> Vec<_> { set.iter().map(|&i| manifest.records[i].labels).collect() };
        let persons: BTreeSet<u32> = manifest.persons().into_iter().collect();
        match self.protocol {
            Protocol::UnseenSentences => {
                let sentence_sets: Vec<BTreeSet<u32>> =
                    self.sets().iter().map(|s| labels(s).iter().map(|l| l.sentence_id).collect()).collect();
                for (a, b) in [(0, 1), (0, 2), (1, 2)] {
                    if let Some(s) = sentence_sets[a].intersection(&sentence_sets[b]).next() {
                        return Err(Error::Invariant(format!("sentence {s} appears in two sets")));
                    }
                }
                for (k, set) in self.sets().iter().enumerate() {
                    if sentence_sets[k].len() != self.spec[k] {
                        return Err(Error::Invariant(format!("set {k} holds {} sentences, spec says {}", sentence_sets[k].len(), self.spec[k])));
                    }
                    let present: BTreeSet<u32> = labels(set).iter().map(|l| l.person_id).collect();
                    if present != persons {
                        return Err(Error::Invariant(format!("set {k} does not contain every person")));
                    }
                }
            }
            Protocol::SeenSentences => {
                for (k, set) in self.sets().iter().enumerate() {
                    let mut per: BTreeMap<(u32, u32), usize> = BTreeMap::new();
                    for l in labels(set) {
                        *per.entry((l.person_id, l.sentence_id)).or_default() += 1;
                    }
                    let pairs: BTreeSet<(u32, u32)> = manifest.records.iter().map(|r| (r.labels.person_id, r.labels.sentence_id)).collect();
                    if per.len() != pairs.len() || per.values().any(|&c| c != self.spec[k]) {
                        return Err(Error::Invariant(format!("set {k} does not hold {} repetitions of every pair", self.spec[k])));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> KeyValues {
        let list = |s: &[usize]| s.iter().map(ToString::to_string).collect::<Vec<_>>().join(",");
        let mut kv = KeyValues::new();
        kv.set("protocol", self.protocol);
        kv.set("spec", list(&self.spec));
        kv.set("seed", self.seed);
        kv.set("train", list(&self.train));
        kv.set("val", list(&self.val));
        kv.set("test", list(&self.test));
        kv
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_key_values().save(path)
    }

    /// Reads a split file and validates it against `manifest`.
    pub fn load(path: impl AsRef<Path>, manifest: &DatasetManifest) -> Result<Self> {
        let path = path.as_ref();
        let mut kv = KeyValues::load(path)?;
        let fmt_err = |e: Error| Error::format(path, e.to_string());
        let mut list = |key: &str| -> Result<Vec<usize>> {
            let s: String = kv.take(key)?.ok_or_else(|| Error::invalid(format!("missing `{key}`")))?;
            parse_list(&s)
        };
        let spec = list("spec").map_err(fmt_err)?;
        let (train, val, test) = (list("train").map_err(fmt_err)?, list("val").map_err(fmt_err)?, list("test").map_err(fmt_err)?);
        let spec: [usize; 3] = spec.try_into().map_err(|_| Error::format(path, "spec needs three counts"))?;
        let protocol = kv.take("protocol").map_err(fmt_err)?.ok_or_else(|| Error::format(path, "missing `protocol`"))?;
        let seed = kv.take_or("seed", 0u64).map_err(fmt_err)?;
        kv.finish().map_err(fmt_err)?;
        let split = Self { protocol, spec, seed, train, val, test };
        split.validate(manifest)?;
        Ok(split)
    }
}

/// Maps each person id to its class index (position among sorted ids).
pub fn class_map(manifest: &DatasetManifest) -> BTreeMap<u32, usize> {
    manifest.persons().into_iter().enumerate().map(|(i, p)| (p, i)).collect()
}

/// Loads the clips of `indices` with their class labels.
pub fn labeled_set(manifest: &DatasetManifest, indices: &[usize]) -> Result<Vec<LabeledSample>> {
    let classes = class_map(manifest);
    indices
        .iter()
        .map(|&i| {
            let sample = manifest.load_sample(i)?;
            Ok(LabeledSample { class: classes[&sample.labels.person_id], sample })
        })
        .collect()
}

/// Hand count implied by the clips' joint count.
pub fn hands_of(set: &[LabeledSample]) -> Result<Hands> {
    let v = set.first().ok_or_else(|| Error::invalid("empty sample set"))?.sample.joints();
    if set.iter().any(|s| s.sample.joints() != v) {
        return Err(Error::invalid("clips differ in joint count"));
    }
    Hands::from_vertices(v)
}

/// Anything that labels a batch of clips.
pub trait Classifier {
    fn num_classes(&self) -> usize;
    fn frames(&self) -> usize;
    fn graph(&self) -> &HandGraph;
    /// One predicted class per clip; `clips` are the sampled originals the
    /// batch was built from.
    fn classify(&self, clips: &[&JointSample], batch: &StreamBatch) -> Result<Vec<usize>>;
}

impl Classifier for StyleNet {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn frames(&self) -> usize {
        self.config.frames
    }

    fn graph(&self) -> &HandGraph {
        &self.graph
    }

    fn classify(&self, _clips: &[&JointSample], batch: &StreamBatch) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.predict(batch)?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub trials: usize,
    /// Occlusion weights per joint when noise is on.
    pub noise: Option<Vec<f64>>,
    pub seed: u64,
    pub batch_size: usize,
}

impl EvalOptions {
    pub fn clean(trials: usize, seed: u64) -> Self {
        Self { trials, noise: None, seed, batch_size: 32 }
    }

    /// Noise with the default thumb/index-heavy occlusion weights.
    pub fn noisy(trials: usize, seed: u64, hands: Hands) -> Self {
        Self { noise: Some(default_occlusion_weights(hands)), ..Self::clean(trials, seed) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation over trials (0 for a single trial).
    pub std: f64,
}

impl EvalReport {
    pub fn from_accuracies(accuracies: Vec<f64>) -> Self {
        let (mean, std) = mean_std(&accuracies);
        Self { accuracies, mean, std }
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("trial,accuracy\n");
        for (i, a) in self.accuracies.iter().enumerate() {
            out.push_str(&format!("{i},{a}\n"));
        }
        out.push_str(&format!("mean,{}\nstd,{}\n", self.mean, self.std));
        out
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() < 2 { 0.0 } else { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() };
    (mean, std)
}

/// Repeated testing: every trial resamples frames (and occlusions) from its
/// own stream and scores argmax predictions.
pub fn evaluate<C: Classifier + ?Sized>(model: &C, test: &[LabeledSample], opts: &EvalOptions) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    if opts.trials == 0 || opts.batch_size == 0 {
        return Err(Error::invalid("trials and batch_size must be positive"));
    }
    if let Some(s) = test.iter().find(|s| s.class >= model.num_classes()) {
        return Err(Error::invalid(format!("test label {} but the model has {} classes", s.class, model.num_classes())));
    }
    let mut accuracies = Vec::with_capacity(opts.trials);
    for trial in 0..opts.trials {
        let mut rng = rng_for(opts.seed, &[EVAL_STREAM, trial as u64]);
        let mut correct = 0;
        for chunk in test.chunks(opts.batch_size) {
            let clips: Vec<&JointSample> = chunk.iter().map(|s| &s.sample).collect();
            let batch = build_batch(&clips, model.graph(), model.frames(), opts.noise.as_deref(), &mut rng)?;
            let pred = model.classify(&clips, &batch)?;
            correct += pred.iter().zip(chunk).filter(|(p, s)| **p == s.class).count();
        }
        accuracies.push(correct as f64 / test.len() as f64);
    }
    Ok(EvalReport::from_accuracies(accuracies))
}

/// The three sample sets of an experiment.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub train: Vec<LabeledSample>,
    pub val: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
    pub num_classes: usize,
}

impl ExperimentData {
    pub fn load(manifest: &DatasetManifest, split: &ExperimentSplit) -> Result<Self> {
        split.validate(manifest)?;
        Ok(Self {
            train: labeled_set(manifest, &split.train)?,
            val: labeled_set(manifest, &split.val)?,
            test: labeled_set(manifest, &split.test)?,
            num_classes: manifest.persons().len(),
        })
    }
}

/// One trained model's scores.
#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub variant: Variant,
    pub seed: u64,
    pub parameters: usize,
    pub clean: EvalReport,
    pub noisy: Option<EvalReport>,
}

/// Trains `variant` with `config.seed = seed` and scores the best-validation
/// weights.
pub fn run_variant(data: &ExperimentData, config: &TrainConfig, variant: Variant, seed: u64, eval: &AblationEval) -> Result<RunResult> {
    let hands = hands_of(&data.train)?;
    let cfg = TrainConfig { variant, seed, ..config.clone() };
    let net = StyleNet::new(cfg.model_config(hands, data.num_classes), seed)?;
    let parameters = net.num_parameters();
    let outcome = train(net, &data.train, &data.val, &cfg)?;
    let clean = evaluate(&outcome.best, &data.test, &EvalOptions::clean(eval.trials, seed))?;
    let noisy = if eval.noise {
        Some(evaluate(&outcome.best, &data.test, &EvalOptions::noisy(eval.trials, seed, hands))?)
    } else {
        None
    };
    Ok(RunResult { variant, seed, parameters, clean, noisy })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AblationEval {
    pub trials: usize,
    /// Also score every model under occlusion noise.
    pub noise: bool,
}

/// Per-variant aggregate over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub parameters: usize,
    pub runs: Vec<RunResult>,
}

impl AblationRow {
    pub fn clean(&self) -> (f64, f64) {
        mean_std(&self.runs.iter().map(|r| r.clean.mean).collect::<Vec<_>>())
    }

    pub fn noisy(&self) -> Option<(f64, f64)> {
        let v: Option<Vec<f64>> = self.runs.iter().map(|r| r.noisy.as_ref().map(|n| n.mean)).collect();
        v.map(|v| mean_std(&v))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("variant,parameters,seeds,clean_mean,clean_std,noisy_mean,noisy_std\n");
        for r in &self.rows {
            let (cm, cs) = r.clean();
            let noisy = r.noisy().map(|(m, s)| format!("{m},{s}")).unwrap_or_else(|| ",".into());
            out.push_str(&format!("{},{},{},{cm},{cs},{noisy}\n", r.variant.name(), r.parameters, r.runs.len()));
        }
        out
    }
}

/// Trains every variant for every seed on the same data.
pub fn run_ablation(data: &ExperimentData, config: &TrainConfig, variants: &[Variant], seeds: &[u64], eval: AblationEval) -> Result<AblationTable> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("ablation needs at least one variant and one seed"));
    }
    let rows = variants
        .iter()
        .map(|&variant| {
            let runs = seeds.iter().map(|&s| run_variant(data, config, variant, s, &eval)).collect::<Result<Vec<_>>>()?;
            Ok(AblationRow { variant, parameters: runs[0].parameters, runs })
        })
        .collect::<Result<_>>()?;
    Ok(AblationTable { rows })
}

/// Finite-difference check of the whole two-stream network: every tensor
/// is randomized (zero-initialized ones included), and the loss is the
/// training-mode cross-entropy of the fused logits on a random batch.
///
/// `per_tensor` limits how many coordinates of each tensor are compared.
pub fn network_grad_check(config: &ModelConfig, batch: usize, per_tensor: Option<usize>, seed: u64) -> Result<GradCheckReport> {
    let mut net = StyleNet::new(config.clone(), seed)?;
    let mut rng = rng_for(seed, &[0x4743]);
    for (_, p) in net.store.iter_mut() {
        let gain = p.name.ends_with(".gamma") || p.name == "alpha" || p.name == "beta";
        for v in p.value.data_mut() {
            *v = match p.kind {
                ParamKind::Buffer => *v,
                _ if gain => rng.random_range(0.5..1.5),
                _ => 0.5 * rng.sample::<f64, _>(StandardNormal),
            };
        }
    }
    let shape = [batch, config.in_channels, config.frames, config.num_vertices()];
    let joints = Tensor::from_fn(&shape, |_| rng.sample(StandardNormal));
    let bones = Tensor::from_fn(&shape, |_| rng.sample(StandardNormal));
    let labels: Vec<usize> = (0..batch).map(|i| i % config.num_classes).collect();
    let dropout_seed = rng.random::<u64>();
    let f = |g: &mut Graph, store: &crate::autodiff::ParamStore| {
        let mut probe = net.clone();
        probe.store = store.clone();
        let (j, b) = (g.constant(joints.clone()), g.constant(bones.clone()));
        let out = probe.forward(g, j, b, true, &mut rng_for(dropout_seed, &[]))?;
        cross_entropy(g, out.fused, &labels)
    };
    let mut store = net.store.clone();
    grad_check_params(&mut store, f, 1e-5, per_tensor, &mut rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn protocol_names() {
        assert_eq!("Seen".parse::<Protocol>().unwrap(), Protocol::SeenSentences);
        assert_eq!(Protocol::UnseenSentences.to_string().parse::<Protocol>().unwrap(), Protocol::UnseenSentences);
        assert!("other".parse::<Protocol>().is_err());
    }

    #[test]
    fn sample_std() {
        assert_eq!(mean_std(&[1.0]), (1.0, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }
}
