//! Optimization: loss, Adam with L2 decay, step schedule and a resumable
//! epoch loop with best-validation retention.

use std::collections::BTreeMap;
use std::fmt::{self, Display};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::autodiff::{round_slice_to_f32, Graph, ParamStore, Tensor, Var, BN_MOMENTUM};
use crate::config::{parse_list, KeyValues};
use crate::error::{Error, Result};
use crate::hand_graph::Hands;
use crate::model::{config_path, read_tensors, store_entries, write_tensors, ModelConfig, StyleNet, Variant};
use crate::seed::rng_for;
use crate::skeleton::{build_batch, JointSample};

const TRAIN_STREAM: u64 = 0x7472;
const VAL_STREAM: u64 = 0x7661;

/// Architecture family the trainer instantiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Full,
    Compact,
    Tiny,
}

impl Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Full => "full",
            Preset::Compact => "compact",
            Preset::Tiny => "tiny",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "full" => Ok(Preset::Full),
            "compact" => Ok(Preset::Compact),
            "tiny" => Ok(Preset::Tiny),
            other => Err(Error::invalid(format!("unknown preset `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Epochs at which the learning rate is multiplied by `lr_decay`.
    pub lr_drops: Vec<usize>,
    pub lr_decay: f64,
    pub dropout: f64,
    pub seed: u64,
    /// Frames sampled per clip.
    pub frames: usize,
    pub preset: Preset,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
            epochs: 100,
            lr_drops: vec![40, 70, 90],
            lr_decay: 0.1,
            dropout: 0.3,
            seed: 0,
            frames: 32,
            preset: Preset::Full,
            variant: Variant::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr, self.eps, self.lr_decay];
        if self.batch_size == 0 || self.epochs == 0 || self.frames == 0 || positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid("batch_size, epochs, frames, lr, eps and lr_decay must be positive"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight_decay must be non-negative"));
        }
        for b in [self.beta1, self.beta2] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("Adam coefficient {b} outside [0, 1)")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.lr_drops.windows(2).any(|w| w[0] >= w[1]) || self.lr_drops.first() == Some(&0) {
            return Err(Error::invalid("lr_drops must be positive and strictly ascending"));
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_drops.iter().filter(|&&d| d <= epoch).count();
        self.lr * self.lr_decay.powi(drops as i32)
    }

    /// The network this config trains for the given input and label space.
    pub fn model_config(&self, hands: Hands, num_classes: usize) -> ModelConfig {
        let base = match self.preset {
            Preset::Full => ModelConfig::full(hands, num_classes),
            Preset::Compact => ModelConfig::compact(hands, num_classes, self.frames),
            Preset::Tiny => ModelConfig::tiny(hands, num_classes),
        };
        ModelConfig {
            frames: self.frames,
            dropout: self.dropout,
            ..self.variant.apply(&base)
        }
    }

    /// Takes the known keys out of `kv`; unspecified keys keep their defaults.
    pub fn from_key_values(kv: &mut KeyValues) -> Result<Self> {
        let d = Self::default();
        let lr_drops = match kv.take::<String>("lr_drops")? {
            Some(s) if s.trim() == "none" => Vec::new(),
            Some(s) => parse_list(&s)?,
            None => d.lr_drops,
        };
        let cfg = Self {
            batch_size: kv.take_or("batch_size", d.batch_size)?,
            lr: kv.take_or("lr", d.lr)?,
            beta1: kv.take_or("beta1", d.beta1)?,
            beta2: kv.take_or("beta2", d.beta2)?,
            eps: kv.take_or("eps", d.eps)?,
            weight_decay: kv.take_or("weight_decay", d.weight_decay)?,
            epochs: kv.take_or("epochs", d.epochs)?,
            lr_drops,
            lr_decay: kv.take_or("lr_decay", d.lr_decay)?,
            dropout: kv.take_or("dropout", d.dropout)?,
            seed: kv.take_or("seed", d.seed)?,
            frames: kv.take_or("frames", d.frames)?,
            preset: kv.take_or("preset", d.preset)?,
            variant: kv.take_or("variant", d.variant)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut kv = KeyValues::load(path)?;
        let cfg = Self::from_key_values(&mut kv)?;
        kv.finish()?;
        Ok(cfg)
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("batch_size", self.batch_size);
        kv.set("lr", self.lr);
        kv.set("beta1", self.beta1);
        kv.set("beta2", self.beta2);
        kv.set("eps", self.eps);
        kv.set("weight_decay", self.weight_decay);
        kv.set("epochs", self.epochs);
        let drops: Vec<String> = self.lr_drops.iter().map(ToString::to_string).collect();
        kv.set("lr_drops", if drops.is_empty() { "none".to_string() } else { drops.join(",") });
        kv.set("lr_decay", self.lr_decay);
        kv.set("dropout", self.dropout);
        kv.set("seed", self.seed);
        kv.set("frames", self.frames);
        kv.set("preset", self.preset);
        kv.set("variant", self.variant.name());
        kv
    }
}

/// Mean negative log-likelihood of the labels under softmax of the logits.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    g.cross_entropy(logits, labels)
}

/// Adam moments for every trainable tensor of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    /// Steps taken so far.
    pub t: u64,
    moments: Vec<Option<(Tensor, Tensor)>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let moments = store
            .iter()
            .map(|(_, p)| p.trainable().then(|| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape()))))
            .collect();
        Self { t: 0, moments }
    }

    /// One bias-corrected step using the gradients currently in `store`.
    /// Decayed tensors see `grad + weight_decay·param`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, cfg: &TrainConfig) -> Result<()> {
        if self.moments.len() != store.len() {
            return Err(Error::shape(format!("optimizer tracks {} tensors, store has {}", self.moments.len(), store.len())));
        }
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for ((_, p), state) in store.iter_mut().zip(&mut self.moments) {
            let (m, v) = match (p.trainable(), state) {
                (false, None) => continue,
                (true, Some((m, v))) if m.shape() == p.value.shape() => (m, v),
                _ => return Err(Error::shape(format!("optimizer state does not match `{}`", p.name))),
            };
            let decay = if p.weight_decay_exempt() { 0.0 } else { cfg.weight_decay };
            let grads = p.grad.data();
            let values = p.value.data_mut();
            for (((w, &g), m), v) in values.iter_mut().zip(grads).zip(m.data_mut()).zip(v.data_mut()) {
                let g = g + decay * *w;
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + cfg.eps);
            }
        }
        Ok(())
    }

    pub fn round_to_f32(&mut self) {
        for (m, v) in self.moments.iter_mut().flatten() {
            round_slice_to_f32(m.data_mut());
            round_slice_to_f32(v.data_mut());
        }
    }

    fn entries(&self, store: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = vec![("adam.t".to_string(), Tensor::full(&[1], self.t as f64))];
        for ((_, p), state) in store.iter().zip(&self.moments) {
            if let Some((m, v)) = state {
                out.push((format!("adam.m.{}", p.name), m.clone()));
                out.push((format!("adam.v.{}", p.name), v.clone()));
            }
        }
        out
    }

    fn from_entries(store: &ParamStore, entries: &mut BTreeMap<String, Tensor>, path: &Path) -> Result<Self> {
        let mut take = |name: String, shape: &[usize]| {
            let t = entries.remove(&name).ok_or_else(|| Error::format(path, format!("missing tensor `{name}`")))?;
            if t.shape() != shape {
                return Err(Error::format(path, format!("tensor `{name}` has shape {:?}, expected {shape:?}", t.shape())));
            }
            Ok(t)
        };
        let t = take("adam.t".to_string(), &[1])?.data()[0] as u64;
        let mut moments = Vec::with_capacity(store.len());
        for (_, p) in store.iter() {
            moments.push(if p.trainable() {
                let shape = p.value.shape();
                Some((take(format!("adam.m.{}", p.name), shape)?, take(format!("adam.v.{}", p.name), shape)?))
            } else {
                None
            });
        }
        Ok(Self { t, moments })
    }
}

/// A clip and its class index.
#[derive(Clone, Debug)]
pub struct LabeledSample {
    pub sample: JointSample,
    pub class: usize,
}

/// One row of the training history.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    /// `None` when there is no validation set.
    pub val_acc: Option<f64>,
    pub alpha: f64,
    pub beta: f64,
}

impl EpochRecord {
    const WIDTH: usize = 7;

    fn to_row(self) -> [f64; Self::WIDTH] {
        [self.epoch as f64, self.lr, self.train_loss, self.train_acc, self.val_acc.unwrap_or(f64::NAN), self.alpha, self.beta]
    }

    fn from_row(r: &[f64]) -> Self {
        Self {
            epoch: r[0] as usize,
            lr: r[1],
            train_loss: r[2],
            train_acc: r[3],
            val_acc: (!r[4].is_nan()).then_some(r[4]),
            alpha: r[5],
            beta: r[6],
        }
    }

    /// Every float narrowed to single precision, so that persisted histories
    /// compare equal to live ones.
    fn rounded(self) -> Self {
        let mut row = self.to_row();
        round_slice_to_f32(&mut row);
        Self::from_row(&row)
    }
}

pub const HISTORY_HEADER: &str = "epoch,lr,train_loss,train_acc,val_acc,alpha,beta";

/// The history as a comma-separated table with a header line.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = format!("{HISTORY_HEADER}\n");
    for r in history {
        let val = r.val_acc.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{},{},{},{}\n", r.epoch, r.lr, r.train_loss, r.train_acc, val, r.alpha, r.beta));
    }
    out
}

/// Index of the largest entry of each row.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = *logits.shape().last().expect("rank ≥ 1");
    logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

/// Eval-mode accuracy with frames drawn from `seed`.
pub fn accuracy(net: &StyleNet, set: &[LabeledSample], batch_size: usize, seed: u64) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    let mut rng = rng_for(seed, &[VAL_STREAM]);
    let mut correct = 0;
    for chunk in set.chunks(batch_size.max(1)) {
        let samples: Vec<&JointSample> = chunk.iter().map(|s| &s.sample).collect();
        let batch = build_batch(&samples, &net.graph, net.config.frames, None, &mut rng)?;
        let pred = argmax_rows(&net.predict(&batch)?);
        correct += pred.iter().zip(chunk).filter(|(p, s)| **p == s.class).count();
    }
    Ok(correct as f64 / set.len() as f64)
}

/// Mutable training state; everything needed to continue a run exactly.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub net: StyleNet,
    pub adam: Adam,
    /// Next epoch to run.
    pub epoch: usize,
    pub history: Vec<EpochRecord>,
    best: Option<(ParamStore, f64, usize)>,
}

/// Result of a finished run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Weights with the best validation accuracy, or the last weights when
    /// there was no validation set.
    pub best: StyleNet,
    pub best_epoch: usize,
    pub last: StyleNet,
    pub history: Vec<EpochRecord>,
}

impl Trainer {
    pub fn new(net: StyleNet, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(&net.store);
        Ok(Self { config, net, adam, epoch: 0, history: Vec::new(), best: None })
    }

    fn check_set(&self, set: &[LabeledSample], what: &str) -> Result<()> {
        let cfg = &self.net.config;
        for s in set {
            if s.class >= cfg.num_classes {
                return Err(Error::invalid(format!("{what} label {} but the model has {} classes", s.class, cfg.num_classes)));
            }
            if s.sample.joints() != cfg.num_vertices() {
                return Err(Error::shape(format!("{what} clip has {} joints, model expects {}", s.sample.joints(), cfg.num_vertices())));
            }
        }
        Ok(())
    }

    /// Runs one epoch over `train` and scores `val`.
    pub fn run_epoch(&mut self, train: &[LabeledSample], val: &[LabeledSample]) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(Error::invalid("empty training set"));
        }
        self.check_set(train, "training")?;
        self.check_set(val, "validation")?;
        let epoch = self.epoch;
        let lr = self.config.lr_at(epoch);
        let mut rng = rng_for(self.config.seed, &[TRAIN_STREAM, epoch as u64]);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);

        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (b, idx) in order.chunks(self.config.batch_size).enumerate() {
            let samples: Vec<&JointSample> = idx.iter().map(|&i| &train[i].sample).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| train[i].class).collect();
            let batch = build_batch(&samples, &self.net.graph, self.net.config.frames, None, &mut rng)?;

            let mut g = Graph::new();
            let (j, bo) = (g.constant(batch.joints), g.constant(batch.bones));
            let out = self.net.forward(&mut g, j, bo, true, &mut rng)?;
            let loss = cross_entropy(&mut g, out.fused, &labels)?;
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Divergence { epoch, batch: b, loss: value });
            }
            loss_sum += value * idx.len() as f64;
            let pred = argmax_rows(g.value(out.fused));
            correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();

            g.backward(loss)?;
            let store = &mut self.net.store;
            store.zero_grad();
            store.accumulate_grads(&g);
            store.apply_bn_updates(&g, BN_MOMENTUM);
            self.adam.step(store, lr, &self.config)?;
            store.round_to_f32();
            self.adam.round_to_f32();
            let (alpha, beta) = self.fusion_weights();
            if !(alpha.is_finite() && beta.is_finite()) {
                return Err(Error::Divergence { epoch, batch: b, loss: value });
            }
        }

        let val_acc = if val.is_empty() { None } else { Some(accuracy(&self.net, val, self.config.batch_size, self.config.seed)?) };
        let (alpha, beta) = self.fusion_weights();
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            train_acc: correct as f64 / train.len() as f64,
            val_acc,
            alpha,
            beta,
        }
        .rounded();
        if let Some(v) = record.val_acc {
            // Small validation sets saturate; ties go to the later, better converged epoch.
            if self.best.as_ref().is_none_or(|(_, best, _)| v >= *best) {
                self.best = Some((self.net.store.clone(), v, epoch));
            }
        }
        self.history.push(record);
        self.epoch += 1;
        Ok(record)
    }

    /// Runs epochs until `self.epoch == until` (capped at the configured count).
    pub fn run(&mut self, train: &[LabeledSample], val: &[LabeledSample], until: usize) -> Result<()> {
        while self.epoch < until.min(self.config.epochs) {
            self.run_epoch(train, val)?;
        }
        Ok(())
    }

    pub fn fusion_weights(&self) -> (f64, f64) {
        let s = &self.net.store;
        (s.value(self.net.alpha_id()).data()[0], s.value(self.net.beta_id()).data()[0])
    }

    pub fn finish(self) -> TrainOutcome {
        let (best, best_epoch) = match self.best {
            Some((store, _, epoch)) => {
                let mut net = self.net.clone();
                net.store = store;
                (net, epoch)
            }
            None => (self.net.clone(), self.epoch.saturating_sub(1)),
        };
        TrainOutcome { best, best_epoch, last: self.net, history: self.history }
    }

    /// Writes the full state (weights, moments, history, best snapshot) to one
    /// checkpoint plus the architecture sidecar.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.net.config.to_key_values().save(config_path(path))?;
        let mut entries = store_entries(&self.net.store);
        entries.extend(self.adam.entries(&self.net.store));
        entries.push(("trainer.epoch".into(), Tensor::full(&[1], self.epoch as f64)));
        let rows: Vec<f64> = self.history.iter().flat_map(|r| r.to_row()).collect();
        entries.push(("trainer.history".into(), Tensor::new(&[self.history.len(), EpochRecord::WIDTH], rows)?));
        if let Some((store, val, epoch)) = &self.best {
            entries.push(("trainer.best".into(), Tensor::new(&[2], vec![*val, *epoch as f64])?));
            entries.extend(store_entries(store).into_iter().map(|(n, t)| (format!("best.{n}"), t)));
        }
        write_tensors(path, &entries)
    }

    /// Restores a state written by [`Trainer::save`].
    pub fn load(path: impl AsRef<Path>, config: TrainConfig) -> Result<Self> {
        let path = path.as_ref();
        let mut entries = read_tensors(path)?;
        let net = StyleNet::load_with(path, &mut entries)?;
        let adam = Adam::from_entries(&net.store, &mut entries, path)?;
        let mut scalar = |name: &str| {
            entries
                .remove(name)
                .filter(|t| t.rank() >= 1)
                .ok_or_else(|| Error::format(path, format!("missing tensor `{name}`")))
        };
        let epoch = scalar("trainer.epoch")?.data()[0] as usize;
        let hist = scalar("trainer.history")?;
        if hist.shape().get(1).copied().unwrap_or(EpochRecord::WIDTH) != EpochRecord::WIDTH || hist.shape()[0] != epoch {
            return Err(Error::format(path, "history does not match the epoch counter"));
        }
        let history = hist.data().chunks(EpochRecord::WIDTH).map(EpochRecord::from_row).collect();
        let best = match entries.remove("trainer.best") {
            Some(meta) => {
                let mut store = net.store.clone();
                let mut prefixed: BTreeMap<String, Tensor> = BTreeMap::new();
                let keys: Vec<String> = entries.keys().filter(|k| k.starts_with("best.")).cloned().collect();
                for k in keys {
                    let t = entries.remove(&k).expect("listed key");
                    prefixed.insert(k["best.".len()..].to_string(), t);
                }
                crate::model::load_store(&mut store, &mut prefixed, path)?;
                Some((store, meta.data()[0], meta.data()[1] as usize))
            }
            None => None,
        };
        if let Some(extra) = entries.keys().next() {
            return Err(Error::format(path, format!("unexpected tensor `{extra}`")));
        }
        let mut trainer = Self::new(net, config)?;
        trainer.adam = adam;
        trainer.epoch = epoch;
        trainer.history = history;
        trainer.best = best;
        Ok(trainer)
    }
}

/// Trains from scratch for `config.epochs` epochs.
pub fn train(net: StyleNet, train_set: &[LabeledSample], val_set: &[LabeledSample], config: &TrainConfig) -> Result<TrainOutcome> {
    let mut t = Trainer::new(net, config.clone())?;
    t.run(train_set, val_set, config.epochs)?;
    Ok(t.finish())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_steps_down_at_drops() {
        let cfg = TrainConfig::default();
        let close = |a: f64, b: f64| (a - b).abs() < 1e-18;
        assert!(close(cfg.lr_at(0), 1e-3));
        assert!(close(cfg.lr_at(39), 1e-3));
        assert!(close(cfg.lr_at(40), 1e-4));
        assert!(close(cfg.lr_at(69), 1e-4));
        assert!(close(cfg.lr_at(70), 1e-5));
        assert!(close(cfg.lr_at(90), 1e-6));
        assert!(close(cfg.lr_at(99), 1e-6));
    }

    #[test]
    fn config_round_trips_and_validates() {
        let cfg = TrainConfig { preset: Preset::Compact, variant: Variant::DownsampleTnl, lr_drops: vec![], ..Default::default() };
        let mut kv = KeyValues::parse(&cfg.to_key_values().to_string()).unwrap();
        assert_eq!(TrainConfig::from_key_values(&mut kv).unwrap(), cfg);
        kv.finish().unwrap();
        for bad in ["lr = 0", "lr_drops = 70,40", "batch_size = 0", "dropout = 1", "beta1 = 1.5", "weight_decay = -1"] {
            assert!(TrainConfig::from_key_values(&mut KeyValues::parse(bad).unwrap()).is_err(), "{bad}");
        }
    }
}
