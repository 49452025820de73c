#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sedtk::model::{bce_loss, Conditioning, Feedback, ModelConfig, SedModel};
use sedtk::nn::{CnnBlock, GruCell, Linear, Phase};
use sedtk::{Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
pub const ABS_FLOOR: f64 = 1e-6;
pub const REL_TOL: f64 = 1e-4;

#[derive(Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub worst_abs: f64,
    pub worst_rel: f64,
    pub failures: Vec<String>,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }

    pub fn merge(&mut self, other: GradCheck) {
        self.checked += other.checked;
        self.worst_abs = self.worst_abs.max(other.worst_abs);
        self.worst_rel = self.worst_rel.max(other.worst_rel);
        self.failures.extend(other.failures);
    }
}

/// Compares analytic gradients with central differences.
///
/// `shifted(k, j, delta)` must return the loss with entry `j` of parameter
/// `k` moved by `delta`, everything else unchanged.
pub fn compare(
    label: &str,
    analytic: &[Vec<f64>],
    mut shifted: impl FnMut(usize, usize, f64) -> f64,
) -> GradCheck {
    let mut out = GradCheck::default();
    for (k, grad) in analytic.iter().enumerate() {
        for (j, &a) in grad.iter().enumerate() {
            let numeric = (shifted(k, j, FD_STEP) - shifted(k, j, -FD_STEP)) / (2.0 * FD_STEP);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(f64::MIN_POSITIVE);
            out.checked += 1;
            out.worst_abs = out.worst_abs.max(abs);
            if abs > ABS_FLOOR {
                out.worst_rel = out.worst_rel.max(rel);
            }
            if abs > ABS_FLOOR && rel > REL_TOL {
                out.failures
                    .push(format!("{label}: param {k}[{j}] analytic {a:e} numeric {numeric:e}"));
            }
        }
    }
    out
}

/// Gradient check of a function of free tensors.
///
/// `build` maps the bound parameters to a scalar loss on a fresh tape.
pub fn check_fn(
    label: &str,
    params: &[Tensor<f64>],
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
) -> GradCheck {
    let run = |ps: &[Tensor<f64>]| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p)).collect();
        let loss = build(&mut tape, &vars);
        let value = tape.data(loss)[0];
        tape.backward(loss).expect("backward");
        let grads = vars
            .iter()
            .zip(ps)
            .map(|(&v, p)| tape.grad(v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec))
            .collect();
        (value, grads)
    };
    let (_, analytic) = run(params);
    let mut work = params.to_vec();
    compare(label, &analytic, |k, j, delta| {
        let original = work[k].data()[j];
        work[k].data_mut()[j] = original + delta;
        let (v, _) = run(&work);
        work[k].data_mut()[j] = original;
        v
    })
}

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces any tensor to a scalar through fixed random weights so every
/// output element contributes a distinct gradient.
pub fn project(tape: &mut Tape<f64>, x: Var, rng_seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let shape = tape.shape(x).to_vec();
    let w = random_tensor(&shape, &mut rng).into_data();
    let w = tape.constant(shape, w).unwrap();
    let p = tape.mul(x, w).unwrap();
    tape.sum(p).unwrap()
}

/// The composed model used by the gradient checks: 8 frames, 4 filters,
/// 4 recurrent units, 2 classes.
pub fn tiny_model_config(conditioning: Conditioning) -> ModelConfig {
    ModelConfig {
        n_classes: 2,
        n_features: 4,
        cnn_filters: 4,
        gru_hidden: 4,
        kernel: 5,
        pool_plan: vec![(1, 2), (1, 2), (1, 1)],
        conditioning,
        ..ModelConfig::desk(2)
    }
}

pub struct ModelProblem {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub valid: Vec<bool>,
    /// Fixed conditioning inputs, drawn once from the targets and noise.
    pub replay: Vec<f64>,
    pub batch: usize,
    pub dropout_seed: u64,
}

impl ModelProblem {
    pub fn random(config: &ModelConfig, batch: usize, frames: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let f = config.n_features;
        let c = config.n_classes;
        let x = (0..batch * frames * f).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y: Vec<f64> = (0..batch * frames * c)
            .map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 })
            .collect();
        let replay = y
            .iter()
            .map(|&v| if rng.random_bool(0.5) { v } else { rng.random_range(0.0..1.0) })
            .collect();
        let mut valid = vec![true; batch * frames];
        // Mask the tail of the last sequence as padding would.
        for v in valid.iter_mut().rev().take(frames / 4) {
            *v = false;
        }
        ModelProblem {
            x,
            y,
            valid,
            replay,
            batch,
            dropout_seed: seed,
        }
    }

    /// Loss and per-parameter gradients in trainable order. The dropout
    /// stream is reseeded on every call so masks stay fixed.
    pub fn loss_and_grads(&self, model: &SedModel<f64>) -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape);
        let feedback = if model.config.conditioning.is_on() {
            Feedback::Replay(&self.replay)
        } else {
            Feedback::None
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.dropout_seed);
        let out = model
            .forward(&mut tape, &vars, &self.x, self.batch, feedback, &mut Phase::Train(&mut rng))
            .unwrap();
        let loss = bce_loss(&mut tape, out.pred, &self.y, &self.valid).unwrap();
        let value = tape.data(loss)[0];
        tape.backward(loss).unwrap();
        let grads = vars
            .trainable()
            .into_iter()
            .map(|v| tape.grad(v).map_or_else(|| vec![0.0; tape.value(v).len()], <[f64]>::to_vec))
            .collect();
        (value, grads)
    }
}

pub fn check_model(label: &str, model: &SedModel<f64>, problem: &ModelProblem) -> GradCheck {
    let (_, analytic) = problem.loss_and_grads(model);
    let mut work = model.clone();
    compare(label, &analytic, |k, j, delta| {
        let original = {
            let mut ps = work.trainable_mut();
            let d = ps[k].data_mut();
            let o = d[j];
            d[j] = o + delta;
            o
        };
        let (v, _) = problem.loss_and_grads(&work);
        work.trainable_mut()[k].data_mut()[j] = original;
        v
    })
}

fn block_slot<'a>(b: &'a mut CnnBlock<f64>, x: &'a mut Tensor<f64>, k: usize) -> &'a mut [f64] {
    match k {
        0 => x.data_mut(),
        1 => b.weight.data_mut(),
        2 => b.bias.data_mut(),
        3 => b.bn.scale.data_mut(),
        _ => b.bn.shift.data_mut(),
    }
}

fn check_cnn_block(label: &str, block: &CnnBlock<f64>, x: &Tensor<f64>, train_seed: Option<u64>) -> GradCheck {
    let run = |b: &CnnBlock<f64>, x: &Tensor<f64>| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let xv = tape.param(x);
        let vars = b.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(train_seed.unwrap_or(0));
        let mut phase = match train_seed {
            Some(_) => Phase::Train(&mut rng),
            None => Phase::Eval,
        };
        let (y, _) = b.forward(&mut tape, &vars, xv, &mut phase).unwrap();
        let loss = project(&mut tape, y, 99);
        let value = tape.data(loss)[0];
        tape.backward(loss).unwrap();
        let grads = [xv, vars.weight, vars.bias, vars.scale, vars.shift]
            .iter()
            .map(|&v| tape.grad(v).map_or_else(|| vec![0.0; tape.value(v).len()], <[f64]>::to_vec))
            .collect();
        (value, grads)
    };
    let (_, analytic) = run(block, x);
    let mut b = block.clone();
    let mut xw = x.clone();
    compare(label, &analytic, |k, j, delta| {
        let original = {
            let d = block_slot(&mut b, &mut xw, k);
            let o = d[j];
            d[j] = o + delta;
            o
        };
        let (v, _) = run(&b, &xw);
        block_slot(&mut b, &mut xw, k)[j] = original;
        v
    })
}

/// Every differentiable tape operation and layer, with inputs drawn from `seed`.
pub fn layer_suite(seed: u64) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut all = GradCheck::default();
    let mut r = |s: &[usize]| random_tensor(s, &mut rng);
    let (a, b, m) = (r(&[3, 4]), r(&[4, 5]), r(&[3, 4]));
    let bias = r(&[4]);
    let img = r(&[2, 2, 5, 6]);
    let kern = r(&[3, 2, 3, 3]);
    let cbias = r(&[3]);
    let pool_in = r(&[2, 3, 4, 6]);
    let bn_in = r(&[3, 2, 2, 3]);
    let (gamma, beta) = (r(&[2]), r(&[2]));
    let seq = r(&[2, 3, 4, 2]);
    let steps: Vec<Tensor<f64>> = (0..3).map(|_| r(&[2, 3])).collect();
    let logits = r(&[4, 3]);
    let cat_b = r(&[3, 2]);

    all.merge(check_fn("matmul", &[a.clone(), b], |t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        project(t, y, seed)
    }));
    all.merge(check_fn("add/sub/mul", &[a.clone(), m.clone()], |t, v| {
        let s = t.add(v[0], v[1]).unwrap();
        let d = t.sub(v[0], v[1]).unwrap();
        let p = t.mul(s, d).unwrap();
        let p = t.mul(p, v[0]).unwrap();
        project(t, p, seed)
    }));
    all.merge(check_fn("add_bias/affine", &[a.clone(), bias], |t, v| {
        let y = t.add_bias(v[0], v[1]).unwrap();
        let y = t.affine(y, -1.7, 0.3).unwrap();
        project(t, y, seed)
    }));
    all.merge(check_fn("sigmoid/tanh/relu", std::slice::from_ref(&a), |t, v| {
        let s = t.sigmoid(v[0]).unwrap();
        let h = t.tanh(v[0]).unwrap();
        let r = t.relu(v[0]).unwrap();
        let y = t.add(s, h).unwrap();
        let y = t.mul(y, r).unwrap();
        let y = t.add(y, r).unwrap();
        project(t, y, seed)
    }));
    all.merge(check_fn("conv2d", &[img, kern, cbias], |t, v| {
        let y = t.conv2d(v[0], v[1], v[2]).unwrap();
        project(t, y, seed)
    }));
    all.merge(check_fn("maxpool2d", &[pool_in], |t, v| {
        let y = t.maxpool2d(v[0], (1, 2)).unwrap();
        let z = t.maxpool2d(v[0], (2, 3)).unwrap();
        let a = project(t, y, seed);
        let b = project(t, z, seed + 1);
        t.add(a, b).unwrap()
    }));
    all.merge(check_fn("batch_norm_train", &[bn_in.clone(), gamma.clone(), beta.clone()], |t, v| {
        let (y, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap();
        project(t, y, seed)
    }));
    all.merge(check_fn("batch_norm_eval", &[bn_in, gamma, beta], |t, v| {
        let y = t.batch_norm_eval(v[0], v[1], v[2], &[0.2, -0.1], &[0.7, 1.9], 1e-5).unwrap();
        project(t, y, seed)
    }));
    all.merge(check_fn("concat", &[a.clone(), cat_b], |t, v| {
        let y = t.concat(v[0], v[1]).unwrap();
        project(t, y, seed)
    }));
    all.merge(check_fn("time_step/stack_time", &[seq], |t, v| {
        let rows: Vec<Var> = (0..4).map(|i| t.time_step(v[0], i).unwrap()).collect();
        let y = t.stack_time(&rows[1..]).unwrap();
        project(t, y, seed)
    }));
    all.merge(check_fn("stack_time", &steps, |t, v| {
        let y = t.stack_time(v).unwrap();
        let y = t.tanh(y).unwrap();
        project(t, y, seed)
    }));
    all.merge(check_fn("sum/mean", &[a], |t, v| {
        let s = t.sum(v[0]).unwrap();
        let sq = t.mul(v[0], v[0]).unwrap();
        let m = t.mean(sq).unwrap();
        let y = t.mul(s, m).unwrap();
        t.add(y, m).unwrap()
    }));
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
        let target: Vec<f64> = (0..12).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let weight: Vec<f64> = (0..12).map(|i| if i % 5 == 0 { 0.0 } else { 1.0 }).collect();
        all.merge(check_fn("bce", &[logits], move |t, v| {
            let p = t.sigmoid(v[0]).unwrap();
            t.bce(p, &target, &weight, 1.0 / 9.0, 1e-7).unwrap()
        }));
    }

    let mut lrng = ChaCha8Rng::seed_from_u64(seed ^ 0xb10c);
    let block = CnnBlock::<f64>::new(2, 3, 5, (1, 2), 0.25, true, 0.1, 1e-5, &mut lrng);
    let x = random_tensor(&[2, 2, 4, 6], &mut lrng);
    all.merge(check_cnn_block("cnn block (train)", &block, &x, Some(seed)));
    let mut eval_block = block.clone();
    eval_block.bn.running_mean.data_mut().copy_from_slice(&[0.1, -0.2, 0.05]);
    eval_block.bn.running_var.data_mut().copy_from_slice(&[0.8, 1.3, 0.4]);
    all.merge(check_cnn_block("cnn block (eval)", &eval_block, &x, None));

    let gru = GruCell::<f64>::new(3, 4, &mut lrng);
    let x1 = random_tensor(&[2, 3], &mut lrng);
    let x2 = random_tensor(&[2, 3], &mut lrng);
    let h0 = random_tensor(&[2, 4], &mut lrng);
    let mut gru_params: Vec<Tensor<f64>> = gru.tensors().iter().map(|(_, t)| (*t).clone()).collect();
    gru_params.extend([x1, x2, h0]);
    all.merge(check_fn("gru", &gru_params, |t, v| {
        let vars = gru_vars(v);
        let h = t.tanh(v[11]).unwrap();
        let h = gru.step(t, &vars, v[9], h).unwrap();
        let h = gru.step(t, &vars, v[10], h).unwrap();
        project(t, h, seed)
    }));

    let lin = Linear::<f64>::new(4, 3, &mut lrng);
    let hin = random_tensor(&[2, 4], &mut lrng);
    all.merge(check_fn("linear+sigmoid", &[lin.weight.clone(), lin.bias.clone(), hin], |t, v| {
        let vars = sedtk::nn::LinearVars {
            weight: v[0],
            bias: v[1],
        };
        let y = lin.forward_sigmoid(t, &vars, v[2]).unwrap();
        project(t, y, seed)
    }));
    all
}

fn gru_vars(v: &[Var]) -> sedtk::nn::GruVars {
    sedtk::nn::GruVars {
        w_z: v[0],
        w_r: v[1],
        w_h: v[2],
        u_z: v[3],
        u_r: v[4],
        u_h: v[5],
        b_z: v[6],
        b_r: v[7],
        b_h: v[8],
    }
}

/// The composed tiny model, with and without conditioning, on `seed`.
pub fn model_suite(seed: u64) -> GradCheck {
    let mut all = GradCheck::default();
    for conditioning in [Conditioning::Off, Conditioning::Scheduled] {
        let config = tiny_model_config(conditioning);
        let model = SedModel::<f64>::new(config.clone(), seed).unwrap();
        let problem = ModelProblem::random(&config, 2, 8, seed);
        all.merge(check_model(&format!("model {conditioning:?} seed {seed}"), &model, &problem));
    }
    all
}
