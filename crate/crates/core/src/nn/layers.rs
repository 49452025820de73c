use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::init::glorot_uniform;
use crate::error::{Error, Result};
use crate::tensor::{BatchStats, Real, Tape, Tensor, Var};

/// Whether a forward pass trains (batch statistics, dropout) or evaluates.
pub enum Phase<'a> {
    Train(&'a mut ChaCha8Rng),
    Eval,
}

impl Phase<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Phase::Train(_))
    }
}

/// Inverted-dropout mask: kept units scaled by `1/(1-rate)`, dropped units 0.
pub fn dropout_mask<T: Real>(len: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<T> {
    if rate <= 0.0 {
        return vec![T::one(); len];
    }
    if rate >= 1.0 {
        return vec![T::zero(); len];
    }
    let keep = T::lit(1.0 / (1.0 - rate));
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect()
}

/// Dropout in train phase; identity in eval phase.
pub fn dropout<T: Real>(tape: &mut Tape<T>, x: Var, rate: f64, phase: &mut Phase<'_>) -> Result<Var> {
    match phase {
        Phase::Eval => Ok(x),
        Phase::Train(_) if rate <= 0.0 => Ok(x),
        Phase::Train(rng) => {
            let mask = dropout_mask(tape.value(x).len(), rate, rng);
            let m = tape.constant(tape.shape(x).to_vec(), mask)?;
            Ok(tape.mul(x, m)?)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: f64,
    pub eps: f64,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Self {
        BatchNorm {
            scale: Tensor::full([channels], T::one()),
            shift: Tensor::zeros([channels]),
            running_mean: Tensor::zeros([channels]),
            running_var: Tensor::full([channels], T::one()),
            momentum,
            eps,
        }
    }

    /// Normalizes `x` (channels on axis 1). Returns batch statistics in train phase.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        x: Var,
        scale: Var,
        shift: Var,
        train: bool,
    ) -> Result<(Var, Option<BatchStats>)> {
        if train {
            let (y, stats) = tape.batch_norm_train(x, scale, shift, self.eps)?;
            Ok((y, Some(stats)))
        } else {
            let y = tape.batch_norm_eval(
                x,
                scale,
                shift,
                self.running_mean.data(),
                self.running_var.data(),
                self.eps,
            )?;
            Ok((y, None))
        }
    }

    /// Exponential moving update of the running statistics. The running
    /// variance uses the unbiased batch estimate.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        let correction = if stats.count > 1 {
            stats.count as f64 / (stats.count - 1) as f64
        } else {
            1.0
        };
        for (rm, &bm) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *rm = T::lit((1.0 - m) * rm.as_f64() + m * bm);
        }
        for (rv, &bv) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            let updated = (1.0 - m) * rv.as_f64() + m * bv * correction;
            *rv = T::lit(updated.max(f64::MIN_POSITIVE));
        }
    }
}

/// dropout(input) → conv → batch-norm → ReLU → max-pool [→ dropout].
#[derive(Debug, Clone, PartialEq)]
pub struct CnnBlock<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub bn: BatchNorm<T>,
    pub pool: (usize, usize),
    pub dropout: f64,
    pub output_dropout: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct CnnBlockVars {
    pub weight: Var,
    pub bias: Var,
    pub scale: Var,
    pub shift: Var,
}

impl<T: Real> CnnBlock<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        c_in: usize,
        filters: usize,
        kernel: usize,
        pool: (usize, usize),
        dropout: f64,
        output_dropout: bool,
        bn_momentum: f64,
        bn_eps: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let area = kernel * kernel;
        CnnBlock {
            weight: glorot_uniform(&[filters, c_in, kernel, kernel], c_in * area, filters * area, rng),
            bias: Tensor::zeros([filters]),
            bn: BatchNorm::new(filters, bn_momentum, bn_eps),
            pool,
            dropout,
            output_dropout,
        }
    }

    pub fn filters(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> CnnBlockVars {
        CnnBlockVars {
            weight: tape.param(&self.weight),
            bias: tape.param(&self.bias),
            scale: tape.param(&self.bn.scale),
            shift: tape.param(&self.bn.shift),
        }
    }

    /// `[B × Cin × T × F]` → `[B × filters × T/kt × F/kf]`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        vars: &CnnBlockVars,
        x: Var,
        phase: &mut Phase<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let x = dropout(tape, x, self.dropout, phase)?;
        let y = tape.conv2d(x, vars.weight, vars.bias)?;
        let (y, stats) = self.bn.forward(tape, y, vars.scale, vars.shift, phase.is_train())?;
        let y = tape.relu(y)?;
        let y = tape.maxpool2d(y, self.pool)?;
        let y = if self.output_dropout {
            dropout(tape, y, self.dropout, phase)?
        } else {
            y
        };
        Ok((y, stats))
    }
}

/// Gated recurrent unit.
///
/// `z = σ(xW_z + hU_z + b_z)`, `r = σ(xW_r + hU_r + b_r)`,
/// `h̃ = tanh(xW_h + (r⊙h)U_h + b_h)`, `h' = (1-z)⊙h + z⊙h̃`.
#[derive(Debug, Clone, PartialEq)]
pub struct GruCell<T> {
    pub w_z: Tensor<T>,
    pub w_r: Tensor<T>,
    pub w_h: Tensor<T>,
    pub u_z: Tensor<T>,
    pub u_r: Tensor<T>,
    pub u_h: Tensor<T>,
    pub b_z: Tensor<T>,
    pub b_r: Tensor<T>,
    pub b_h: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    pub w_z: Var,
    pub w_r: Var,
    pub w_h: Var,
    pub u_z: Var,
    pub u_r: Var,
    pub u_h: Var,
    pub b_z: Var,
    pub b_r: Var,
    pub b_h: Var,
}

impl<T: Real> GruCell<T> {
    pub fn new(input: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut w = || glorot_uniform(&[input, hidden], input, hidden, rng);
        let (w_z, w_r, w_h) = (w(), w(), w());
        let mut u = || glorot_uniform(&[hidden, hidden], hidden, hidden, rng);
        let (u_z, u_r, u_h) = (u(), u(), u());
        GruCell {
            w_z,
            w_r,
            w_h,
            u_z,
            u_r,
            u_h,
            b_z: Tensor::zeros([hidden]),
            b_r: Tensor::zeros([hidden]),
            b_h: Tensor::zeros([hidden]),
        }
    }

    pub fn input_size(&self) -> usize {
        self.w_z.shape()[0]
    }

    pub fn hidden_size(&self) -> usize {
        self.w_z.shape()[1]
    }

    pub fn tensors(&self) -> [(&'static str, &Tensor<T>); 9] {
        [
            ("w_z", &self.w_z),
            ("w_r", &self.w_r),
            ("w_h", &self.w_h),
            ("u_z", &self.u_z),
            ("u_r", &self.u_r),
            ("u_h", &self.u_h),
            ("b_z", &self.b_z),
            ("b_r", &self.b_r),
            ("b_h", &self.b_h),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut Tensor<T>); 9] {
        [
            ("w_z", &mut self.w_z),
            ("w_r", &mut self.w_r),
            ("w_h", &mut self.w_h),
            ("u_z", &mut self.u_z),
            ("u_r", &mut self.u_r),
            ("u_h", &mut self.u_h),
            ("b_z", &mut self.b_z),
            ("b_r", &mut self.b_r),
            ("b_h", &mut self.b_h),
        ]
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> GruVars {
        GruVars {
            w_z: tape.param(&self.w_z),
            w_r: tape.param(&self.w_r),
            w_h: tape.param(&self.w_h),
            u_z: tape.param(&self.u_z),
            u_r: tape.param(&self.u_r),
            u_h: tape.param(&self.u_h),
            b_z: tape.param(&self.b_z),
            b_r: tape.param(&self.b_r),
            b_h: tape.param(&self.b_h),
        }
    }

    fn gate(&self, tape: &mut Tape<T>, x: Var, w: Var, h: Var, u: Var, b: Var) -> Result<Var> {
        let xw = tape.matmul(x, w)?;
        let hu = tape.matmul(h, u)?;
        let s = tape.add(xw, hu)?;
        Ok(tape.add_bias(s, b)?)
    }

    /// One step: `x: [B × Din]`, `h: [B × F″]` → `[B × F″]`.
    pub fn step(&self, tape: &mut Tape<T>, vars: &GruVars, x: Var, h: Var) -> Result<Var> {
        let (sx, sh) = (tape.shape(x), tape.shape(h));
        if sx.len() != 2
            || sh.len() != 2
            || sx[0] != sh[0]
            || sx[1] != self.input_size()
            || sh[1] != self.hidden_size()
        {
            return Err(crate::tensor::TensorError::shape("gru_step", sx, sh).into());
        }
        let z = self.gate(tape, x, vars.w_z, h, vars.u_z, vars.b_z)?;
        let z = tape.sigmoid(z)?;
        let r = self.gate(tape, x, vars.w_r, h, vars.u_r, vars.b_r)?;
        let r = tape.sigmoid(r)?;
        let rh = tape.mul(r, h)?;
        let cand = self.gate(tape, x, vars.w_h, rh, vars.u_h, vars.b_h)?;
        let cand = tape.tanh(cand)?;
        // (1 - z)⊙h + z⊙h̃
        let keep = tape.affine(z, -T::one(), T::one())?;
        let kept = tape.mul(keep, h)?;
        let fresh = tape.mul(z, cand)?;
        let next = tape.add(kept, fresh)?;
        debug_assert!(
            tape.data(next).iter().all(|v| !(v.abs() > T::one())),
            "GRU state left [-1, 1]"
        );
        Ok(next)
    }
}

/// Fully connected layer followed by a sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl<T: Real> Linear<T> {
    pub fn new(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            weight: glorot_uniform(&[input, output], input, output, rng),
            bias: Tensor::zeros([output]),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> LinearVars {
        LinearVars {
            weight: tape.param(&self.weight),
            bias: tape.param(&self.bias),
        }
    }

    /// `σ(hW + b)`, shape `[B × C]`.
    pub fn forward_sigmoid(&self, tape: &mut Tape<T>, vars: &LinearVars, h: Var) -> Result<Var> {
        if tape.shape(h).len() != 2 || tape.shape(h)[1] != self.weight.shape()[0] {
            return Err(Error::Tensor(crate::tensor::TensorError::shape(
                "linear",
                tape.shape(h),
                self.weight.shape(),
            )));
        }
        let logits = tape.matmul(h, vars.weight)?;
        let logits = tape.add_bias(logits, vars.bias)?;
        Ok(tape.sigmoid(logits)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn dropout_mask_replays_from_seed() {
        let mask: Vec<f32> = dropout_mask(1000, 0.25, &mut ChaCha8Rng::seed_from_u64(3));
        // Independent replay of the draw sequence.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let replay: Vec<f32> = (0..1000)
            .map(|_| if rng.random::<f64>() < 0.25 { 0.0 } else { (1.0 / 0.75) as f32 })
            .collect();
        assert_eq!(mask, replay);
    }

    #[test]
    fn dropout_keep_fraction() {
        let n = 20_000;
        let mask: Vec<f64> = dropout_mask(n, 0.25, &mut ChaCha8Rng::seed_from_u64(8));
        let kept = mask.iter().filter(|&&v| v > 0.0).count() as f64 / n as f64;
        let sigma = (0.75 * 0.25 / n as f64).sqrt();
        assert!((kept - 0.75).abs() < 3.0 * sigma, "{kept}");
        assert!(mask.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12));
    }

    #[test]
    fn dropout_eval_is_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full([4, 4], 2.0));
        let y = dropout(&mut tape, x, 0.25, &mut Phase::Eval).unwrap();
        assert_eq!(x, y);
    }

    fn bn_on(data: Vec<f64>, scale: f64, shift: f64, train: bool) -> Vec<f64> {
        let bn = BatchNorm::<f64>::new(2, 0.1, 1e-5);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new([3, 2, 4], data).unwrap());
        let s = tape.leaf(Tensor::full([2], scale));
        let b = tape.leaf(Tensor::full([2], shift));
        let (y, _) = bn.forward(&mut tape, x, s, b, train).unwrap();
        tape.data(y).to_vec()
    }

    fn channel(values: &[f64], c: usize) -> Vec<f64> {
        values
            .chunks(4)
            .enumerate()
            .filter(|(i, _)| i % 2 == c)
            .flat_map(|(_, ch)| ch.to_vec())
            .collect()
    }

    fn mean_std(v: &[f64]) -> (f64, f64) {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
        (m, var.sqrt())
    }

    #[test]
    fn batch_norm_train_standardizes_then_applies_affine() {
        let data: Vec<f64> = (0..24).map(|i| ((i * 7) % 11) as f64 * 0.3 + 1.0).collect();
        let y = bn_on(data.clone(), 1.0, 0.0, true);
        for c in 0..2 {
            let (m, s) = mean_std(&channel(&y, c));
            assert!(m.abs() < 1e-5);
            assert!((s - 1.0).abs() < 1e-4);
        }
        let y = bn_on(data, 2.0, 3.0, true);
        for c in 0..2 {
            let (m, s) = mean_std(&channel(&y, c));
            assert!((m - 3.0).abs() < 1e-4);
            assert!((s - 2.0).abs() < 1e-4);
        }
    }

    #[test]
    fn batch_norm_eval_with_unit_stats_is_near_identity() {
        let data: Vec<f64> = (0..24).map(|i| i as f64 * 0.1).collect();
        let y = bn_on(data.clone(), 1.0, 0.0, false);
        for (a, b) in y.iter().zip(&data) {
            assert!((a - b).abs() <= b.abs() * 1e-5 + 1e-12);
        }
    }

    #[test]
    fn batch_norm_constant_batch_is_guarded() {
        let y = bn_on(vec![5.0; 24], 1.0, 0.0, true);
        assert!(y.iter().all(|v| v.is_finite() && v.abs() < 1e-6));
    }

    #[test]
    fn running_stats_stay_positive() {
        let mut bn = BatchNorm::<f32>::new(1, 0.1, 1e-5);
        let stats = BatchStats {
            mean: vec![2.0],
            var: vec![0.0],
            count: 1,
        };
        for _ in 0..1000 {
            bn.update_running(&stats);
        }
        assert!(bn.running_var.data()[0] > 0.0);
        assert!((bn.running_mean.data()[0] - 2.0).abs() < 1e-3);
    }

    #[test]
    fn cnn_block_shapes_and_eval_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = CnnBlock::<f32>::new(1, 4, 5, (1, 5), 0.25, false, 0.1, 1e-5, &mut rng);
        let input: Vec<f32> = (0..2 * 16 * 40).map(|i| ((i % 13) as f32).sin()).collect();
        let run = || {
            let mut tape = Tape::new();
            let vars = block.bind(&mut tape);
            let x = tape.leaf(Tensor::new([2, 1, 16, 40], input.clone()).unwrap());
            let (y, stats) = block.forward(&mut tape, &vars, x, &mut Phase::Eval).unwrap();
            assert!(stats.is_none());
            assert_eq!(tape.shape(y), &[2, 4, 16, 8]);
            tape.data(y).to_vec()
        };
        assert_eq!(run(), run());

        let bad = CnnBlock::<f32>::new(1, 4, 5, (1, 3), 0.25, false, 0.1, 1e-5, &mut rng);
        let mut tape = Tape::new();
        let vars = bad.bind(&mut tape);
        let x = tape.leaf(Tensor::zeros([1, 1, 4, 40]));
        assert!(bad.forward(&mut tape, &vars, x, &mut Phase::Eval).is_err());
    }

    #[test]
    fn cnn_block_train_mask_is_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = CnnBlock::<f32>::new(1, 2, 5, (1, 2), 0.25, true, 0.1, 1e-5, &mut rng);
        let run = |seed| {
            let mut tape = Tape::new();
            let vars = block.bind(&mut tape);
            let x = tape.leaf(Tensor::full([2, 1, 4, 4], 1.0));
            let mut drng = ChaCha8Rng::seed_from_u64(seed);
            let (y, stats) = block
                .forward(&mut tape, &vars, x, &mut Phase::Train(&mut drng))
                .unwrap();
            assert!(stats.is_some());
            tape.data(y).to_vec()
        };
        assert_eq!(run(17), run(17));
    }

    #[test]
    fn gru_zero_weights_keep_zero_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut cell = GruCell::<f64>::new(3, 2, &mut rng);
        for (_, t) in cell.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let vars = cell.bind(&mut tape);
        let x = tape.leaf(Tensor::full([2, 3], 0.7));
        let h = tape.leaf(Tensor::zeros([2, 2]));
        let next = cell.step(&mut tape, &vars, x, h).unwrap();
        assert!(tape.data(next).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_state_stays_inside_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cell = GruCell::<f64>::new(5, 4, &mut rng);
        let mut tape = Tape::new();
        let vars = cell.bind(&mut tape);
        let mut h = tape.leaf(Tensor::zeros([3, 4]));
        for t in 0..50 {
            let data: Vec<f64> = (0..15).map(|i| ((i * 31 + t * 7) % 17) as f64 - 8.0).collect();
            let x = tape.leaf(Tensor::new([3, 5], data).unwrap());
            h = cell.step(&mut tape, &vars, x, h).unwrap();
            assert!(tape.data(h).iter().all(|v| v.abs() < 1.0));
        }
        let bad = tape.leaf(Tensor::zeros([3, 4]));
        assert!(cell.step(&mut tape, &vars, bad, h).is_err());
    }

    #[test]
    fn linear_sigmoid_zero_and_saturation() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut lin = Linear::<f64>::new(3, 2, &mut rng);
        lin.weight.data_mut().fill(0.0);
        let mut tape = Tape::new();
        let vars = lin.bind(&mut tape);
        let h = tape.leaf(Tensor::full([4, 3], 0.3));
        let y = lin.forward_sigmoid(&mut tape, &vars, h).unwrap();
        assert!(tape.data(y).iter().all(|&v| v == 0.5));

        lin.bias.data_mut().fill(20.0);
        let mut tape = Tape::new();
        let vars = lin.bind(&mut tape);
        let h = tape.leaf(Tensor::full([1, 3], 0.3));
        let y = lin.forward_sigmoid(&mut tape, &vars, h).unwrap();
        assert!(tape.data(y).iter().all(|&v| (1.0 - v) < 1e-8 && v < 1.0));
    }
}
