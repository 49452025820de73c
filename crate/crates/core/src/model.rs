//! The convolutional-recurrent detector.
//!
//! Three CNN blocks turn a `[T × F]` feature sequence into a `[T × K]`
//! latent sequence, a GRU runs over time, and a sigmoid layer emits class
//! probabilities per frame. With conditioning enabled, the GRU input at
//! step `t` is the latent frame concatenated with an activity vector for
//! step `t - 1`: ground truth, the model's own prediction, or a scheduled
//! mix of the two. Fed-back activities are constants on the tape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{CnnBlock, CnnBlockVars, GruCell, GruVars, Linear, LinearVars, Phase};
use crate::rng::{stream, Stream};
use crate::roll::EventRoll;
use crate::schedule::{binarize, ActivitySelector};
use crate::tensor::{BatchStats, Real, Tape, Tensor, TensorError, Var};

pub const PREDICTION_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// Plain CRNN.
    Off,
    /// Always the previous ground truth during training.
    GroundTruth,
    /// Ground truth or prediction, chosen per step by the schedule.
    Scheduled,
    /// Always the previous prediction.
    Predictions,
}

impl Conditioning {
    pub fn is_on(self) -> bool {
        self != Conditioning::Off
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_classes: usize,
    pub n_features: usize,
    pub cnn_filters: usize,
    pub gru_hidden: usize,
    pub kernel: usize,
    /// `(time, frequency)` pooling factor per CNN block.
    pub pool_plan: Vec<(usize, usize)>,
    pub conditioning: Conditioning,
    /// Threshold fed-back predictions at 0.5, in training and inference.
    pub binarize_conditioning: bool,
    pub dropout: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk(6)
    }
}

impl ModelConfig {
    /// Full-size network: 128 filters, 128 recurrent units.
    pub fn paper_scale(n_classes: usize) -> Self {
        ModelConfig {
            n_classes,
            n_features: 40,
            cnn_filters: 128,
            gru_hidden: 128,
            kernel: 5,
            pool_plan: vec![(1, 5), (1, 4), (1, 2)],
            conditioning: Conditioning::Off,
            binarize_conditioning: false,
            dropout: 0.25,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }

    /// 16 filters and 32 recurrent units.
    pub fn desk(n_classes: usize) -> Self {
        ModelConfig {
            cnn_filters: 16,
            gru_hidden: 32,
            ..ModelConfig::paper_scale(n_classes)
        }
    }

    pub fn with_conditioning(mut self, conditioning: Conditioning) -> Self {
        self.conditioning = conditioning;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model: {m}")));
        if self.n_classes == 0 {
            return bad("needs at least one class".into());
        }
        if self.cnn_filters == 0 || self.gru_hidden == 0 {
            return bad("filters and recurrent units must be positive".into());
        }
        if self.kernel.is_multiple_of(2) {
            return bad(format!("kernel size {} must be odd", self.kernel));
        }
        if self.pool_plan.is_empty() || self.pool_plan.iter().any(|&(a, b)| a == 0 || b == 0) {
            return bad("pool plan needs at least one block with positive factors".into());
        }
        if self.pool_plan.iter().any(|&(kt, _)| kt != 1) {
            return bad("time pooling must be 1 so every frame gets a prediction".into());
        }
        let product: usize = self.pool_plan.iter().map(|p| p.1).product();
        if product != self.n_features {
            return bad(format!(
                "frequency pooling factors multiply to {product} but there are {} features",
                self.n_features
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} must be in [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn gru_input(&self) -> usize {
        self.cnn_filters + if self.conditioning.is_on() { self.n_classes } else { 0 }
    }
}

/// Where the conditioning activity for step `t` comes from.
pub enum Feedback<'a, T> {
    /// No conditioning input (baseline model).
    None,
    /// The selector chooses between `targets` (`[B × T × C]`) and predictions.
    Select {
        selector: &'a mut ActivitySelector,
        targets: &'a [T],
    },
    /// The model's own previous output.
    Predictions { binarize: bool },
    /// A recorded `[B × T × C]` sequence of conditioning inputs.
    Replay(&'a [T]),
}

pub struct ForwardOutput<T> {
    /// `[B × T × C]` probabilities.
    pub pred: Var,
    /// Batch statistics per CNN block (train phase only).
    pub bn_stats: Vec<Option<BatchStats>>,
    /// `[B × T × C]`: row `t` holds the activity fed in at step `t`.
    pub conditioning: Vec<T>,
}

pub struct ModelVars {
    pub blocks: Vec<CnnBlockVars>,
    pub gru: GruVars,
    pub out: LinearVars,
}

impl ModelVars {
    /// Trainable variables in [`SedModel::trainable_names`] order.
    pub fn trainable(&self) -> Vec<Var> {
        let mut v = Vec::new();
        for b in &self.blocks {
            v.extend([b.weight, b.bias, b.scale, b.shift]);
        }
        let g = &self.gru;
        v.extend([g.w_z, g.w_r, g.w_h, g.u_z, g.u_r, g.u_h, g.b_z, g.b_r, g.b_h]);
        v.extend([self.out.weight, self.out.bias]);
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SedModel<T> {
    pub config: ModelConfig,
    pub blocks: Vec<CnnBlock<T>>,
    pub gru: GruCell<T>,
    pub out: Linear<T>,
}

/// Layer name of a parameter: the part before the first dot.
pub fn layer_of(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

impl<T: Real> SedModel<T> {
    /// Glorot-initialized model drawn from the init stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, Stream::Init, 0);
        let n = config.pool_plan.len();
        let blocks = config
            .pool_plan
            .iter()
            .enumerate()
            .map(|(i, &pool)| {
                CnnBlock::new(
                    if i == 0 { 1 } else { config.cnn_filters },
                    config.cnn_filters,
                    config.kernel,
                    pool,
                    config.dropout,
                    i + 1 == n,
                    config.bn_momentum,
                    config.bn_eps,
                    &mut rng,
                )
            })
            .collect();
        let gru = GruCell::new(config.gru_input(), config.gru_hidden, &mut rng);
        let out = Linear::new(config.gru_hidden, config.n_classes, &mut rng);
        Ok(SedModel {
            config,
            blocks,
            gru,
            out,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> ModelVars {
        ModelVars {
            blocks: self.blocks.iter().map(|b| b.bind(tape)).collect(),
            gru: self.gru.bind(tape),
            out: self.out.bind(tape),
        }
    }

    pub fn trainable_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.blocks.len() {
            for p in ["weight", "bias", "bn.scale", "bn.shift"] {
                names.push(format!("cnn{i}.{p}"));
            }
        }
        for (p, _) in self.gru.tensors() {
            names.push(format!("gru.{p}"));
        }
        names.push("out.weight".into());
        names.push("out.bias".into());
        names
    }

    /// Trainable tensors, in the same order as [`ModelVars::trainable`].
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = Vec::new();
        for b in &mut self.blocks {
            v.push(&mut b.weight);
            v.push(&mut b.bias);
            v.push(&mut b.bn.scale);
            v.push(&mut b.bn.shift);
        }
        for (_, t) in self.gru.tensors_mut() {
            v.push(t);
        }
        v.push(&mut self.out.weight);
        v.push(&mut self.out.bias);
        v
    }

    /// Every stored array, including batch-norm running statistics.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut v = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            v.push((format!("cnn{i}.weight"), &b.weight));
            v.push((format!("cnn{i}.bias"), &b.bias));
            v.push((format!("cnn{i}.bn.scale"), &b.bn.scale));
            v.push((format!("cnn{i}.bn.shift"), &b.bn.shift));
            v.push((format!("cnn{i}.bn.running_mean"), &b.bn.running_mean));
            v.push((format!("cnn{i}.bn.running_var"), &b.bn.running_var));
        }
        for (p, t) in self.gru.tensors() {
            v.push((format!("gru.{p}"), t));
        }
        v.push(("out.weight".into(), &self.out.weight));
        v.push(("out.bias".into(), &self.out.bias));
        v
    }

    fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut v = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            v.push((format!("cnn{i}.weight"), &mut b.weight));
            v.push((format!("cnn{i}.bias"), &mut b.bias));
            v.push((format!("cnn{i}.bn.scale"), &mut b.bn.scale));
            v.push((format!("cnn{i}.bn.shift"), &mut b.bn.shift));
            v.push((format!("cnn{i}.bn.running_mean"), &mut b.bn.running_mean));
            v.push((format!("cnn{i}.bn.running_var"), &mut b.bn.running_var));
        }
        for (p, t) in self.gru.tensors_mut() {
            v.push((format!("gru.{p}"), t));
        }
        v.push(("out.weight".into(), &mut self.out.weight));
        v.push(("out.bias".into(), &mut self.out.bias));
        v
    }

    /// Replaces the array called `name`; the shape must match.
    pub fn set_tensor(&mut self, name: &str, shape: &[usize], data: Vec<T>) -> Result<()> {
        for (n, t) in self.named_tensors_mut() {
            if n == name {
                if t.shape() != shape {
                    return Err(Error::Validation(format!(
                        "{name} has shape {:?} in the model but {shape:?} was given",
                        t.shape()
                    )));
                }
                *t = Tensor::new(shape.to_vec(), data)?;
                return Ok(());
            }
        }
        Err(Error::Validation(format!("model has no parameter named {name}")))
    }

    pub fn apply_batch_stats(&mut self, stats: &[Option<BatchStats>]) {
        for (b, s) in self.blocks.iter_mut().zip(stats) {
            if let Some(s) = s {
                b.bn.update_running(s);
            }
        }
    }

    /// Sets the GRU input-weight rows that read the conditioning vector to 0.
    pub fn zero_conditioning_weights(&mut self) {
        if !self.config.conditioning.is_on() {
            return;
        }
        let k = self.config.cnn_filters;
        let h = self.config.gru_hidden;
        for w in [&mut self.gru.w_z, &mut self.gru.w_r, &mut self.gru.w_h] {
            for v in &mut w.data_mut()[k * h..] {
                *v = T::zero();
            }
        }
    }

    /// The same network with the conditioning input removed.
    pub fn without_conditioning(&self) -> SedModel<T> {
        let mut m = self.clone();
        if !self.config.conditioning.is_on() {
            return m;
        }
        let k = self.config.cnn_filters;
        let h = self.config.gru_hidden;
        m.config.conditioning = Conditioning::Off;
        for w in [&mut m.gru.w_z, &mut m.gru.w_r, &mut m.gru.w_h] {
            let kept = w.data()[..k * h].to_vec();
            *w = Tensor::new([k, h], kept).expect("leading rows of a [K+C × H] matrix");
        }
        m
    }

    /// Runs the network on `x` (`[B × T × F]`, row-major).
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        vars: &ModelVars,
        x: &[T],
        batch: usize,
        mut feedback: Feedback<'_, T>,
        phase: &mut Phase<'_>,
    ) -> Result<ForwardOutput<T>> {
        let f = self.config.n_features;
        let c = self.config.n_classes;
        if batch == 0 || x.is_empty() || !x.len().is_multiple_of(batch * f) {
            return Err(TensorError::shape("model_forward", &[x.len()], &[batch, 0, f]).into());
        }
        let frames = x.len() / (batch * f);
        let conditioned = self.config.conditioning.is_on();
        match &feedback {
            Feedback::None if conditioned => {
                return Err(Error::Usage("a conditioned model needs a feedback source".into()))
            }
            Feedback::Select { targets, .. } if targets.len() != batch * frames * c => {
                return Err(TensorError::shape("model_targets", &[batch, frames, c], &[targets.len()]).into())
            }
            Feedback::Replay(seq) if seq.len() != batch * frames * c => {
                return Err(TensorError::shape("model_replay", &[batch, frames, c], &[seq.len()]).into())
            }
            _ => {}
        }

        let mut h = tape.constant([batch, 1, frames, f], x.to_vec())?;
        let mut bn_stats = Vec::with_capacity(self.blocks.len());
        for (block, v) in self.blocks.iter().zip(&vars.blocks) {
            let (y, stats) = block.forward(tape, v, h, phase)?;
            h = y;
            bn_stats.push(stats);
        }

        let hidden = self.config.gru_hidden;
        let mut state = tape.constant([batch, hidden], vec![T::zero(); batch * hidden])?;
        let mut prev = vec![T::zero(); batch * c];
        let mut conditioning = if conditioned {
            vec![T::zero(); batch * frames * c]
        } else {
            Vec::new()
        };
        let mut outputs: Vec<Var> = Vec::with_capacity(frames);
        let rows = |seq: &[T], t: usize| -> Vec<T> {
            (0..batch)
                .flat_map(|b| seq[(b * frames + t) * c..(b * frames + t + 1) * c].iter().copied())
                .collect()
        };
        for t in 0..frames {
            let mut input = tape.time_step(h, t)?;
            if conditioned {
                if t > 0 {
                    let last = tape.data(outputs[t - 1]).to_vec();
                    prev = match &mut feedback {
                        Feedback::None => unreachable!("rejected above"),
                        Feedback::Select { selector, targets } => selector.select(&rows(targets, t - 1), &last, c)?,
                        Feedback::Predictions { binarize: true } => binarize(&last, 0.5),
                        Feedback::Predictions { binarize: false } => last,
                        Feedback::Replay(seq) => rows(seq, t),
                    };
                }
                for b in 0..batch {
                    conditioning[(b * frames + t) * c..(b * frames + t + 1) * c]
                        .copy_from_slice(&prev[b * c..(b + 1) * c]);
                }
                let y = tape.constant([batch, c], prev.clone())?;
                input = tape.concat(input, y)?;
            }
            state = self.gru.step(tape, &vars.gru, input, state)?;
            outputs.push(self.out.forward_sigmoid(tape, &vars.out, state)?);
        }
        let pred = tape.stack_time(&outputs)?;
        Ok(ForwardOutput {
            pred,
            bn_stats,
            conditioning,
        })
    }

    /// Eval-phase probabilities with the model's own predictions fed back
    /// (thresholded when `binarize_conditioning` is set), and their
    /// `>= threshold` rolls, one per batch item.
    pub fn infer(&self, x: &[T], batch: usize, threshold: f64, hop: f64) -> Result<(Vec<T>, Vec<EventRoll>)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let feedback = if self.config.conditioning.is_on() {
            Feedback::Predictions {
                binarize: self.config.binarize_conditioning,
            }
        } else {
            Feedback::None
        };
        let out = self.forward(&mut tape, &vars, x, batch, feedback, &mut Phase::Eval)?;
        let probs = tape.data(out.pred).to_vec();
        let c = self.config.n_classes;
        let frames = probs.len() / (batch * c);
        let rolls = probs
            .chunks(frames * c)
            .map(|p| EventRoll::from_threshold(frames, c, hop, p, threshold))
            .collect();
        Ok((probs, rolls))
    }
}

/// Mean over valid frames of the per-frame binary cross-entropy summed over
/// classes. `valid` has one flag per `(batch, frame)`.
pub fn bce_loss<T: Real>(tape: &mut Tape<T>, pred: Var, targets: &[T], valid: &[bool]) -> Result<Var> {
    let n = tape.value(pred).len();
    if targets.len() != n || valid.is_empty() || !n.is_multiple_of(valid.len()) {
        return Err(TensorError::shape("bce_loss", tape.shape(pred), &[targets.len(), valid.len()]).into());
    }
    if let Some(i) = targets.iter().position(|&y| y != T::zero() && y != T::one()) {
        return Err(Error::Validation(format!(
            "target {i} is {}, expected 0 or 1",
            targets[i]
        )));
    }
    let c = n / valid.len();
    let n_valid = valid.iter().filter(|&&v| v).count();
    if n_valid == 0 {
        return Err(Error::Validation("loss over a batch without valid frames".into()));
    }
    let weight: Vec<T> = valid
        .iter()
        .flat_map(|&v| std::iter::repeat_n(if v { T::one() } else { T::zero() }, c))
        .collect();
    Ok(tape.bce(
        pred,
        targets,
        &weight,
        T::lit(1.0 / n_valid as f64),
        T::lit(PREDICTION_CLAMP),
    )?)
}
