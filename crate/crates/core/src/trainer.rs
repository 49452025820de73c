//! Training loop, checkpoints, evaluation and the A/B experiment.
//!
//! Each epoch draws its shuffle order, dropout masks and conditioning
//! choices from streams keyed by the master seed and the epoch number, so
//! a run resumed from an end-of-epoch checkpoint continues exactly as an
//! uninterrupted run would.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{segment_sequences, Standardizer};
use crate::metrics::{accumulate, aggregate, Aggregate, FrameCounts, ScoreReport};
use crate::model::{bce_loss, layer_of, Conditioning, Feedback, ModelConfig, SedModel};
use crate::nn::{clip_grad_l2, Adam, AdamState, Phase};
use crate::rng::{derive_seed, stream, Stream};
use crate::roll::EventRoll;
use crate::schedule::{ActivitySelector, ScheduleParams, SelectorMode};
use crate::synthdata::{make_corpus, Corpus, CorpusKind, CorpusParams, Sequence, Split};
use crate::tensor::Tape;

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const TRAINING_LOG: &str = "training.log";
pub const CONFIG_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_clip: Option<f64>,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub sequence_length: usize,
    pub threshold: f64,
    pub record_timing: bool,
    pub schedule: ScheduleParams,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            learning_rate: 1e-3,
            grad_clip: None,
            patience: 50,
            max_epochs: 300,
            seed: 0,
            sequence_length: 128,
            threshold: 0.5,
            record_timing: false,
            schedule: ScheduleParams::default(),
            model: ModelConfig::default(),
        }
    }
}

/// The settings that shape a training trajectory. Stopping rules and
/// logging options are left out so a run can be extended on resume.
#[derive(Serialize)]
struct Fingerprinted<'a> {
    batch_size: usize,
    learning_rate: f64,
    grad_clip: Option<f64>,
    seed: u64,
    sequence_length: usize,
    schedule: ScheduleParams,
    model: &'a ModelConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("training: {m}")));
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("gradient clip {c} must be positive"));
            }
        }
        if self.sequence_length == 0 {
            return bad("sequence length must be at least 1".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold {} must lie in (0, 1)", self.threshold));
        }
        self.schedule.validate()?;
        self.model.validate()
    }

    /// First 8 bytes of the SHA-256 of the trajectory-shaping settings.
    pub fn fingerprint(&self, batches_per_epoch: usize) -> u64 {
        let view = Fingerprinted {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            grad_clip: self.grad_clip,
            seed: self.seed,
            sequence_length: self.sequence_length,
            schedule: ScheduleParams {
                batches_per_epoch,
                ..self.schedule
            },
            model: &self.model,
        };
        let text = toml::to_string(&view).expect("fingerprint view serializes");
        let digest = Sha256::digest(text.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
    }

    fn selector_mode(&self) -> SelectorMode {
        match self.model.conditioning {
            Conditioning::Off | Conditioning::GroundTruth => SelectorMode::AlwaysTruth,
            Conditioning::Scheduled => SelectorMode::Scheduled,
            Conditioning::Predictions => SelectorMode::AlwaysPred,
        }
    }
}

/// `ceil(n_train / batch_size)`, at least 1.
pub fn batches_per_epoch(n_train: usize, batch_size: usize) -> Result<usize> {
    if n_train == 0 || batch_size == 0 {
        return Err(Error::Validation(format!(
            "cannot form batches from {n_train} training sequences with batch size {batch_size}"
        )));
    }
    Ok(n_train.div_ceil(batch_size))
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"SEDM";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Named arrays plus the weight-update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: u64,
    pub updates: u64,
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    fn require(&self, name: &str) -> Result<&Record> {
        self.get(name)
            .ok_or_else(|| Error::Validation(format!("checkpoint has no record named {name}")))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint.to_le_bytes());
        out.extend_from_slice(&self.updates.to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
            for &d in &r.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &r.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let err = |at: usize, msg: String| Error::parse("checkpoint", format!("byte {at}"), msg);
        let take = |at: usize, n: usize| -> Result<&[u8]> {
            bytes
                .get(at..at + n)
                .ok_or_else(|| err(at, format!("unexpected end of file reading {n} bytes")))
        };
        let u32_at = |at: usize| -> Result<u32> { Ok(u32::from_le_bytes(take(at, 4)?.try_into().unwrap())) };
        let u64_at = |at: usize| -> Result<u64> { Ok(u64::from_le_bytes(take(at, 8)?.try_into().unwrap())) };
        if take(0, 4)? != CHECKPOINT_MAGIC {
            return Err(err(0, "missing SEDM magic".into()));
        }
        let version = u32_at(4)?;
        if version != CHECKPOINT_VERSION {
            return Err(err(4, format!("unsupported version {version}")));
        }
        let fingerprint = u64_at(8)?;
        let updates = u64_at(16)?;
        let mut pos = 24;
        let mut records = Vec::new();
        while pos < bytes.len() {
            let name_len = u32_at(pos)? as usize;
            let name = std::str::from_utf8(take(pos + 4, name_len)?)
                .map_err(|_| err(pos + 4, "record name is not UTF-8".into()))?
                .to_string();
            pos += 4 + name_len;
            let rank = u32_at(pos)? as usize;
            pos += 4;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u32_at(pos)? as usize);
                pos += 4;
            }
            let n: usize = shape.iter().product();
            let data = take(pos, 4 * n)?
                .chunks_exact(4)
                .map(|s| f32::from_le_bytes(s.try_into().unwrap()))
                .collect();
            pos += 4 * n;
            records.push(Record { name, shape, data });
        }
        Ok(Checkpoint {
            fingerprint,
            updates,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Parse { location, msg, .. } => Error::Parse {
                context: path.display().to_string(),
                location,
                msg,
            },
            other => other,
        })
    }

    /// Rebuilds the model described by `config` with this checkpoint's weights.
    pub fn restore_model(&self, config: &ModelConfig) -> Result<SedModel<f32>> {
        let mut model = SedModel::new(config.clone(), 0)?;
        let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
        for name in names {
            let r = self.require(&name)?;
            model.set_tensor(&name, &r.shape, r.data.clone())?;
        }
        Ok(model)
    }

    pub fn restore_standardizer(&self) -> Result<Standardizer> {
        let mean = self.require("standardizer.mean")?;
        let std = self.require("standardizer.std")?;
        Ok(Standardizer {
            mean: mean.data.iter().map(|&v| v as f64).collect(),
            std: std.data.iter().map(|&v| v as f64).collect(),
        })
    }
}

/// Where a run stands after a completed epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Progress {
    epochs_completed: usize,
    best_epoch: usize,
    epochs_since_best: usize,
    best_val_loss: f32,
}

impl Progress {
    const RECORD: &'static str = "trainer.progress";

    fn to_record(self) -> Record {
        Record {
            name: Self::RECORD.into(),
            shape: vec![4],
            data: vec![
                self.epochs_completed as f32,
                self.best_epoch as f32,
                self.epochs_since_best as f32,
                self.best_val_loss,
            ],
        }
    }

    fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        let r = c.require(Self::RECORD)?;
        if r.data.len() != 4 {
            return Err(Error::Validation("malformed trainer.progress record".into()));
        }
        Ok(Progress {
            epochs_completed: r.data[0] as usize,
            best_epoch: r.data[1] as usize,
            epochs_since_best: r.data[2] as usize,
            best_val_loss: r.data[3],
        })
    }
}

fn snapshot(
    model: &SedModel<f32>,
    adam: &Adam<f32>,
    standardizer: &Standardizer,
    progress: Progress,
    fingerprint: u64,
    updates: u64,
) -> Checkpoint {
    let mut records: Vec<Record> = model
        .named_tensors()
        .into_iter()
        .map(|(name, t)| Record {
            name,
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        })
        .collect();
    let state = adam.state();
    let trainable = model.trainable_names();
    if state.m.len() == trainable.len() {
        for (moment, values) in [("m", &state.m), ("v", &state.v)] {
            for (name, v) in trainable.iter().zip(values.iter()) {
                records.push(Record {
                    name: format!("adam.{moment}.{name}"),
                    shape: vec![v.len()],
                    data: v.clone(),
                });
            }
        }
    }
    for (name, v) in [("standardizer.mean", &standardizer.mean), ("standardizer.std", &standardizer.std)] {
        records.push(Record {
            name: name.into(),
            shape: vec![v.len()],
            data: v.iter().map(|&x| x as f32).collect(),
        });
    }
    records.push(progress.to_record());
    Checkpoint {
        fingerprint,
        updates,
        records,
    }
}

fn restore_adam(c: &Checkpoint, model: &SedModel<f32>, adam: &mut Adam<f32>) -> Result<()> {
    let names = model.trainable_names();
    if c.get(&format!("adam.m.{}", names[0])).is_none() {
        return Ok(());
    }
    let mut m = Vec::with_capacity(names.len());
    let mut v = Vec::with_capacity(names.len());
    for n in &names {
        m.push(c.require(&format!("adam.m.{n}"))?.data.clone());
        v.push(c.require(&format!("adam.v.{n}"))?.data.clone());
    }
    adam.set_state(AdamState {
        step: c.updates,
        m,
        v,
    });
    Ok(())
}

/// One fixed-length training example.
#[derive(Debug, Clone)]
pub struct Item {
    /// `[T × F]` standardized features.
    pub x: Vec<f32>,
    /// `[T × C]` binary targets.
    pub y: Vec<f32>,
    pub valid: Vec<bool>,
    pub roll: EventRoll,
}

/// Standardizes and segments sequences into `len`-frame items.
pub fn prepare_items(seqs: &[Sequence], standardizer: &Standardizer, len: usize) -> Result<Vec<Item>> {
    let mut items = Vec::new();
    for s in seqs {
        let x = standardizer.apply(&s.features)?;
        for seg in segment_sequences(&x, &s.roll, len)? {
            let valid = seg.mask();
            items.push(Item {
                x: seg.features.values().to_vec(),
                y: seg.roll.to_values(),
                valid,
                roll: seg.roll,
            });
        }
    }
    Ok(items)
}

struct Batch {
    x: Vec<f32>,
    y: Vec<f32>,
    valid: Vec<bool>,
    size: usize,
}

fn gather(items: &[Item], idx: &[usize]) -> Batch {
    let mut b = Batch {
        x: Vec::new(),
        y: Vec::new(),
        valid: Vec::new(),
        size: idx.len(),
    };
    for &i in idx {
        b.x.extend_from_slice(&items[i].x);
        b.y.extend_from_slice(&items[i].y);
        b.valid.extend_from_slice(&items[i].valid);
    }
    b
}

fn check_corpus(model: &ModelConfig, corpus: &Corpus) -> Result<()> {
    if corpus.n_classes() != model.n_classes {
        return Err(Error::Validation(format!(
            "model predicts {} classes but the corpus has {} ({})",
            model.n_classes,
            corpus.n_classes(),
            corpus.labels.join(", ")
        )));
    }
    for s in corpus.train.iter().chain(&corpus.val).chain(&corpus.test) {
        if s.features.n_features() != model.n_features {
            return Err(Error::Validation(format!(
                "sequence {} has {} features, the model expects {}",
                s.name,
                s.features.n_features(),
                model.n_features
            )));
        }
    }
    Ok(())
}

/// Mean loss per valid frame with inference-time feedback.
pub fn validation_loss(model: &SedModel<f32>, items: &[Item], batch_size: usize) -> Result<f64> {
    let idx: Vec<usize> = (0..items.len()).collect();
    let mut total = 0.0;
    let mut frames = 0usize;
    for chunk in idx.chunks(batch_size) {
        let b = gather(items, chunk);
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let feedback = if model.config.conditioning.is_on() {
            Feedback::Predictions {
                binarize: model.config.binarize_conditioning,
            }
        } else {
            Feedback::None
        };
        let out = model.forward(&mut tape, &vars, &b.x, b.size, feedback, &mut Phase::Eval)?;
        let n_valid = b.valid.iter().filter(|&&v| v).count();
        if n_valid == 0 {
            continue;
        }
        let loss = bce_loss(&mut tape, out.pred, &b.y, &b.valid)?;
        total += tape.data(loss)[0] as f64 * n_valid as f64;
        frames += n_valid;
    }
    if frames == 0 {
        return Err(Error::Validation("validation split has no valid frames".into()));
    }
    Ok(total / frames as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f32,
    /// Ground-truth probability in effect after the epoch; `None` without
    /// conditioning.
    pub p_tf: Option<f64>,
    pub seconds: Option<f64>,
}

impl EpochRecord {
    pub fn line(&self) -> String {
        let p = self.p_tf.map_or("-".to_string(), |p| format!("{p:.6}"));
        let s = self.seconds.map_or("-".to_string(), |s| format!("{s:.3}"));
        format!("{} {:.6} {:.6} {p} {s}", self.epoch, self.train_loss, self.val_loss)
    }
}

fn log_header(config: &TrainConfig, n_b: usize) -> String {
    let clip = config.grad_clip.map_or("off".to_string(), |c| c.to_string());
    let conditioning = serde_plain(&config.model.conditioning);
    format!(
        "# sedtk training log v1\n\
         # learning_rate={} grad_clip={clip} batch_size={} patience={} max_epochs={} seed={} sequence_length={}\n\
         # conditioning={conditioning} binarize_conditioning={} gamma={} p_min={} p_max={} batches_per_epoch={n_b}\n\
         # epoch train_loss val_loss p_tf seconds\n",
        config.learning_rate,
        config.batch_size,
        config.patience,
        config.max_epochs,
        config.seed,
        config.sequence_length,
        config.model.binarize_conditioning,
        config.schedule.gamma,
        config.schedule.p_min,
        config.schedule.p_max,
    )
}

fn serde_plain<S: Serialize>(v: &S) -> String {
    #[derive(Serialize)]
    struct Wrap<'a, S> {
        v: &'a S,
    }
    let s = toml::to_string(&Wrap { v }).unwrap_or_default();
    s.trim().trim_start_matches("v = ").trim_matches('"').to_string()
}

#[derive(Default)]
pub struct TrainOptions<'a> {
    /// Where to write checkpoints, the log and the config. Required to resume.
    pub out_dir: Option<&'a Path>,
    /// Continue from `out_dir/last.ckpt` if it exists.
    pub resume: bool,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

pub struct TrainOutcome {
    /// Weights from the epoch with the lowest validation loss.
    pub model: SedModel<f32>,
    pub standardizer: Standardizer,
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: String,
    pub best_epoch: usize,
    pub epochs_completed: usize,
    pub updates: u64,
    pub batches_per_epoch: usize,
    pub stopped_early: bool,
}

/// Trains on `corpus.train`, selecting the epoch with the lowest
/// validation loss. Stops once `patience` epochs pass without a new
/// strict minimum, or at `max_epochs`.
pub fn train(config: &TrainConfig, corpus: &Corpus, options: TrainOptions<'_>) -> Result<TrainOutcome> {
    config.validate()?;
    check_corpus(&config.model, corpus)?;
    if corpus.val.is_empty() {
        return Err(Error::Validation("corpus has no validation sequences".into()));
    }
    let TrainOptions {
        out_dir,
        resume,
        mut on_epoch,
    } = options;

    // Rounded to storage precision up front so a reloaded run sees the
    // exact same statistics.
    let fitted = Standardizer::fit(corpus.train.iter().map(|s| &s.features))?;
    let mut standardizer = Standardizer {
        mean: fitted.mean.iter().map(|&v| v as f32 as f64).collect(),
        std: fitted.std.iter().map(|&v| v as f32 as f64).collect(),
    };

    let train_items = prepare_items(&corpus.train, &standardizer, config.sequence_length)?;
    let n_b = batches_per_epoch(train_items.len(), config.batch_size)?;
    let fingerprint = config.fingerprint(n_b);
    let schedule = ScheduleParams {
        batches_per_epoch: n_b,
        ..config.schedule
    };

    let mut model = SedModel::<f32>::new(config.model.clone(), config.seed)?;
    let mut adam = Adam::new(config.learning_rate);
    let mut updates = 0u64;
    let mut progress = Progress {
        epochs_completed: 0,
        best_epoch: 0,
        epochs_since_best: 0,
        best_val_loss: f32::INFINITY,
    };
    let mut log = log_header(config, n_b);
    let mut best: Option<Checkpoint> = None;

    if let (true, Some(dir)) = (resume, out_dir) {
        let last_path = dir.join(LAST_CHECKPOINT);
        if last_path.exists() {
            let last = Checkpoint::load(&last_path)?;
            if last.fingerprint != fingerprint {
                return Err(Error::Config(format!(
                    "{} was written with configuration fingerprint {:016x}, current is {fingerprint:016x}",
                    last_path.display(),
                    last.fingerprint
                )));
            }
            model = last.restore_model(&config.model)?;
            restore_adam(&last, &model, &mut adam)?;
            standardizer = last.restore_standardizer()?;
            progress = Progress::from_checkpoint(&last)?;
            updates = last.updates;
            let log_path = dir.join(TRAINING_LOG);
            log = fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?;
            let best_path = dir.join(BEST_CHECKPOINT);
            best = Some(if best_path.exists() { Checkpoint::load(&best_path)? } else { last });
        }
    }
    let train_items = prepare_items(&corpus.train, &standardizer, config.sequence_length)?;
    let val_items = prepare_items(&corpus.val, &standardizer, config.sequence_length)?;

    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let conditioned = config.model.conditioning.is_on();
    let mut selector = ActivitySelector::new(
        schedule,
        config.selector_mode(),
        config.model.binarize_conditioning,
        0,
    );
    selector.set_updates(updates);
    let names = model.trainable_names();
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, n) in names.iter().enumerate() {
        let layer = layer_of(n);
        match groups.last_mut() {
            Some((l, idx)) if l == layer => idx.push(i),
            _ => groups.push((layer.to_string(), vec![i])),
        }
    }

    let mut last = None;
    let mut stopped_early = progress.epochs_since_best >= config.patience;
    while !stopped_early && progress.epochs_completed < config.max_epochs {
        let epoch = progress.epochs_completed;
        let started = config.record_timing.then(Instant::now);
        let mut order: Vec<usize> = (0..train_items.len()).collect();
        order.shuffle(&mut stream(config.seed, Stream::Shuffle, epoch as u64));
        let mut dropout_rng = stream(config.seed, Stream::Dropout, epoch as u64);
        selector.reseed(derive_seed(config.seed, Stream::Sampler, epoch as u64));

        let mut loss_sum = 0.0;
        for (bi, chunk) in order.chunks(config.batch_size).enumerate() {
            let b = gather(&train_items, chunk);
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape);
            let feedback = if conditioned {
                Feedback::Select {
                    selector: &mut selector,
                    targets: &b.y,
                }
            } else {
                Feedback::None
            };
            let out = model.forward(&mut tape, &vars, &b.x, b.size, feedback, &mut Phase::Train(&mut dropout_rng))?;
            let loss = bce_loss(&mut tape, out.pred, &b.y, &b.valid)?;
            let value = tape.data(loss)[0];
            if !value.is_finite() {
                return Err(Error::Divergence(format!(
                    "loss is {value} at epoch {}, batch {bi} (weight update {updates})",
                    epoch + 1
                )));
            }
            tape.backward(loss)?;
            let mut grads: Vec<Vec<f32>> = vars
                .trainable()
                .into_iter()
                .map(|v| {
                    tape.grad(v)
                        .map(<[f32]>::to_vec)
                        .unwrap_or_else(|| vec![0.0; tape.value(v).len()])
                })
                .collect();
            if let Some(max_norm) = config.grad_clip {
                for (_, idx) in &groups {
                    let mut layer: Vec<Vec<f32>> = idx.iter().map(|&i| std::mem::take(&mut grads[i])).collect();
                    clip_grad_l2(&mut layer, max_norm);
                    for (&i, g) in idx.iter().zip(layer) {
                        grads[i] = g;
                    }
                }
            }
            {
                let mut params: Vec<&mut [f32]> = model.trainable_mut().into_iter().map(|t| t.data_mut()).collect();
                adam.update(&mut params, &grads)?;
            }
            model.apply_batch_stats(&out.bn_stats);
            selector.advance();
            updates += 1;
            loss_sum += value as f64;
        }

        let val_loss = validation_loss(&model, &val_items, config.batch_size)? as f32;
        progress.epochs_completed += 1;
        let improved = val_loss < progress.best_val_loss;
        if improved {
            progress.best_val_loss = val_loss;
            progress.best_epoch = progress.epochs_completed;
            progress.epochs_since_best = 0;
        } else {
            progress.epochs_since_best += 1;
        }
        let record = EpochRecord {
            epoch: progress.epochs_completed,
            train_loss: loss_sum / n_b as f64,
            val_loss,
            p_tf: conditioned.then(|| selector.p_tf()),
            seconds: started.map(|s| s.elapsed().as_secs_f64()),
        };
        let _ = writeln!(log, "{}", record.line());
        if let Some(cb) = on_epoch.as_mut() {
            cb(&record);
        }

        let snap = snapshot(&model, &adam, &standardizer, progress, fingerprint, updates);
        if improved {
            best = Some(snap.clone());
        }
        if let Some(dir) = out_dir {
            snap.save(&dir.join(LAST_CHECKPOINT))?;
            if improved {
                snap.save(&dir.join(BEST_CHECKPOINT))?;
            }
            let log_path = dir.join(TRAINING_LOG);
            fs::write(&log_path, &log).map_err(|e| Error::io(&log_path, e))?;
        }
        last = Some(snap);
        stopped_early = progress.epochs_since_best >= config.patience;
    }

    let last = match last {
        Some(l) => l,
        None => snapshot(&model, &adam, &standardizer, progress, fingerprint, updates),
    };
    let best = best.unwrap_or_else(|| last.clone());
    Ok(TrainOutcome {
        model: best.restore_model(&config.model)?,
        standardizer,
        best,
        last,
        log,
        best_epoch: progress.best_epoch,
        epochs_completed: progress.epochs_completed,
        updates,
        batches_per_epoch: n_b,
        stopped_early,
    })
}

/// Frame-based scores of `model` over `seqs`, padding excluded.
pub fn evaluate_model(
    model: &SedModel<f32>,
    standardizer: &Standardizer,
    seqs: &[Sequence],
    sequence_length: usize,
    threshold: f64,
) -> Result<ScoreReport> {
    if let Some(s) = seqs.iter().find(|s| s.roll.classes() != model.n_classes()) {
        return Err(Error::Validation(format!(
            "sequence {} has {} classes, the model predicts {}",
            s.name,
            s.roll.classes(),
            model.n_classes()
        )));
    }
    let items = prepare_items(seqs, standardizer, sequence_length)?;
    let mut counts = FrameCounts::default();
    let batch = 8;
    for chunk in items.chunks(batch) {
        let x: Vec<f32> = chunk.iter().flat_map(|i| i.x.iter().copied()).collect();
        let hop = chunk[0].roll.hop();
        let (_, rolls) = model.infer(&x, chunk.len(), threshold, hop)?;
        for (item, pred) in chunk.iter().zip(&rolls) {
            counts.merge(&accumulate(&item.roll, pred, Some(&item.valid))?);
        }
    }
    Ok(ScoreReport::from_counts(counts))
}

/// Scores a checkpoint on one split of a corpus.
pub fn evaluate(checkpoint: &Checkpoint, config: &TrainConfig, corpus: &Corpus, split: Split) -> Result<ScoreReport> {
    check_corpus(&config.model, corpus)?;
    let model = checkpoint.restore_model(&config.model)?;
    let standardizer = checkpoint.restore_standardizer()?;
    evaluate_model(
        &model,
        &standardizer,
        corpus.split(split),
        config.sequence_length,
        config.threshold,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AbParams {
    pub seeds: Vec<u64>,
    /// Conditioning used by the proposed arm.
    pub proposed_conditioning: Conditioning,
    /// Learning rate of the proposed arm; defaults to the shared one.
    pub proposed_learning_rate: Option<f64>,
    /// Gradient clip of the proposed arm; defaults to the shared one.
    pub proposed_grad_clip: Option<f64>,
}

impl Default for AbParams {
    fn default() -> Self {
        AbParams {
            seeds: (0..5).collect(),
            proposed_conditioning: Conditioning::Scheduled,
            proposed_learning_rate: None,
            proposed_grad_clip: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    Baseline,
    Proposed,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Proposed => "proposed",
        }
    }
}

#[derive(Debug, Clone)]
pub struct AbCell {
    pub kind: CorpusKind,
    pub arm: Arm,
    /// One test-split report per seed.
    pub reports: Vec<ScoreReport>,
    pub summary: Aggregate,
}

#[derive(Debug, Clone)]
pub struct AbReport {
    pub seeds: Vec<u64>,
    pub cells: Vec<AbCell>,
}

impl AbReport {
    pub fn cell(&self, kind: CorpusKind, arm: Arm) -> &AbCell {
        self.cells
            .iter()
            .find(|c| c.kind == kind && c.arm == arm)
            .expect("every kind and arm is trained")
    }

    /// `(F1 delta, ER delta)` of proposed over baseline, in the mean.
    pub fn delta(&self, kind: CorpusKind) -> (f64, f64) {
        let b = &self.cell(kind, Arm::Baseline).summary;
        let p = &self.cell(kind, Arm::Proposed).summary;
        (p.f1_mean - b.f1_mean, p.er_mean - b.er_mean)
    }

    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<14}{:<10}{:>10}{:>10}{:>10}{:>10}",
            "corpus", "model", "F1 mean", "F1 std", "ER mean", "ER std"
        );
        for c in &self.cells {
            let s = &c.summary;
            let _ = writeln!(
                out,
                "{:<14}{:<10}{:>10.4}{:>10.4}{:>10.4}{:>10.4}",
                c.kind.to_string(),
                c.arm.name(),
                s.f1_mean,
                s.f1_std,
                s.er_mean,
                s.er_std
            );
        }
        for kind in [CorpusKind::Structured, CorpusKind::Unstructured] {
            let (df1, der) = self.delta(kind);
            let _ = writeln!(out, "delta {kind}: F1 {df1:+.4} ER {der:+.4}");
        }
        out
    }

    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for c in &self.cells {
            let p = format!("{}.{}", c.kind, c.arm.name());
            let s = &c.summary;
            let _ = writeln!(out, "{p}.f1_mean={}", s.f1_mean);
            let _ = writeln!(out, "{p}.f1_std={}", s.f1_std);
            let _ = writeln!(out, "{p}.er_mean={}", s.er_mean);
            let _ = writeln!(out, "{p}.er_std={}", s.er_std);
        }
        for kind in [CorpusKind::Structured, CorpusKind::Unstructured] {
            let (df1, der) = self.delta(kind);
            let _ = writeln!(out, "{kind}.delta_f1={df1}");
            let _ = writeln!(out, "{kind}.delta_er={der}");
        }
        out
    }
}

/// Trains baseline and proposed models on structured and unstructured
/// corpora for every seed and scores each on its test split. Seed `s`
/// generates the corpus and initializes both arms.
pub fn ab_experiment(base: &TrainConfig, corpus: &CorpusParams, ab: &AbParams) -> Result<AbReport> {
    if ab.seeds.len() < 3 {
        return Err(Error::Usage(format!(
            "the A/B experiment needs at least 3 seeds, got {}",
            ab.seeds.len()
        )));
    }
    if !ab.proposed_conditioning.is_on() {
        return Err(Error::Config("the proposed arm must use conditioning".into()));
    }
    let kinds = [CorpusKind::Structured, CorpusKind::Unstructured];
    let arms = [Arm::Baseline, Arm::Proposed];
    let mut jobs = Vec::new();
    for &kind in &kinds {
        for &seed in &ab.seeds {
            for &arm in &arms {
                jobs.push((kind, seed, arm));
            }
        }
    }
    let results: Vec<ScoreReport> = jobs
        .par_iter()
        .map(|&(kind, seed, arm)| {
            let data = make_corpus(kind, corpus, seed)?;
            let mut cfg = base.clone();
            cfg.seed = seed;
            if arm == Arm::Proposed {
                cfg.model.conditioning = ab.proposed_conditioning;
                cfg.learning_rate = ab.proposed_learning_rate.unwrap_or(cfg.learning_rate);
                cfg.grad_clip = ab.proposed_grad_clip.or(cfg.grad_clip);
            } else {
                cfg.model.conditioning = Conditioning::Off;
            }
            let outcome = train(&cfg, &data, TrainOptions::default())?;
            evaluate_model(
                &outcome.model,
                &outcome.standardizer,
                &data.test,
                cfg.sequence_length,
                cfg.threshold,
            )
        })
        .collect::<Result<_>>()?;
    let mut cells = Vec::new();
    for &kind in &kinds {
        for &arm in &arms {
            let reports: Vec<ScoreReport> = jobs
                .iter()
                .zip(&results)
                .filter(|((k, _, a), _)| *k == kind && *a == arm)
                .map(|(_, r)| *r)
                .collect();
            let per_seed: Vec<Vec<ScoreReport>> = reports.iter().map(|r| vec![*r]).collect();
            cells.push(AbCell {
                kind,
                arm,
                summary: aggregate(&per_seed)?,
                reports,
            });
        }
    }
    Ok(AbReport {
        seeds: ab.seeds.clone(),
        cells,
    })
}
